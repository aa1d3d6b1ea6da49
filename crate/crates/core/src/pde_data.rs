//! Ground-truth PDE solvers and training-pair generation.
//!
//! Burgers' equation `u_t = −u u_x + ν u_xx` on the periodic unit interval
//! is solved two independent ways:
//!
//! - **spectrally**, through the Cole-Hopf substitution
//!   `φ(x) = exp(−(1/2ν) ∫₀ˣ u dx′)`, which linearizes the dynamics to the
//!   heat equation `φ_t = ν φ_xx`, solved exactly mode-by-mode
//!   (`φ̂_k(t) = φ̂_k(0) e^{−4π²k²νt}`) on an internal 256-point grid;
//! - **by finite differences** in conservative flux form with explicit
//!   second-order (Heun) time stepping, used as an independent oracle.
//!
//! The Brusselator reaction-diffusion system
//! `u_t = D₁Δu + a − (1+b)u + vu²`, `v_t = D₂Δv + bu − vu²` runs on a
//! periodic 2-D grid with a 5-point Laplacian, either fully explicit or
//! with the diffusion solved implicitly per step in Fourier space.
//!
//! Dataset builders draw initial-condition parameters and sample times
//! uniformly, evolve the PDE, optionally corrupt observations with
//! Gaussian noise, and pack everything into a [`SnapshotPairSet`] with
//! complete metadata. Mechanism datasets (planar two-segment arm, Klein
//! bottle point clouds) provide low-dimensional manifold-constrained data.

use crate::error::{Error, Result};
use crate::manifold::klein_bottle_chart;
use crate::rng::stream_rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io::{Read, Write};

/// Internal fine-grid size for the spectral Burgers solver.
const SPECTRAL_MODES: usize = 256;
/// Zero-mean tolerance for Cole-Hopf inputs.
const MEAN_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Fields
// ---------------------------------------------------------------------------

/// Periodic scalar field on the unit interval, sampled at `x_k = k/n`
/// (no duplicated endpoint).
#[derive(Clone, Debug, PartialEq)]
pub struct Field1D {
    values: Vec<f64>,
}

impl Field1D {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// Samples `f(x)` at the grid points.
    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: (0..n).map(|k| f(k as f64 / n as f64)).collect(),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Two-channel periodic field (`u`, `v`) on an `lx × ly` grid with `Δx = 1`;
/// storage is row-major with `x` fastest: index `(ix, iy) = iy*lx + ix`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2D {
    pub lx: usize,
    pub ly: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Field2D {
    pub fn new(lx: usize, ly: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != lx * ly || v.len() != lx * ly {
            return Err(Error::Config(format!(
                "field extents {lx}x{ly} do not match channel lengths {} / {}",
                u.len(),
                v.len()
            )));
        }
        Ok(Self { lx, ly, u, v })
    }

    pub fn constant(lx: usize, ly: usize, u: f64, v: f64) -> Self {
        Self {
            lx,
            ly,
            u: vec![u; lx * ly],
            v: vec![v; lx * ly],
        }
    }

    pub fn cells(&self) -> usize {
        self.lx * self.ly
    }

    pub fn all_finite(&self) -> bool {
        self.u.iter().chain(self.v.iter()).all(|v| v.is_finite())
    }

    /// Flattens to a single vector `[u..., v...]` (channel-major).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.cells());
        out.extend_from_slice(&self.u);
        out.extend_from_slice(&self.v);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.u
            .iter()
            .chain(self.v.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

// ---------------------------------------------------------------------------
// Spectral helpers (unit-length periodic domain)
// ---------------------------------------------------------------------------

pub(crate) fn fft_forward(values: &[f64]) -> Vec<Complex64> {
    let n = values.len();
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf
}

pub(crate) fn fft_inverse_real(spectrum: &mut [Complex64]) -> Vec<f64> {
    let n = spectrum.len();
    FftPlanner::new().plan_fft_inverse(n).process(spectrum);
    spectrum.iter().map(|c| c.re / n as f64).collect()
}

/// Signed wavenumber for FFT bin `i` of length `n`.
pub(crate) fn signed_freq(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Evaluates the trigonometric interpolant of a length-`n` spectrum at `x`.
fn trig_interp(spectrum: &[Complex64], x: f64) -> f64 {
    let n = spectrum.len();
    let mut acc = spectrum[0].re;
    for k in 1..n / 2 {
        let phase = TAU * k as f64 * x;
        let (s, c) = phase.sin_cos();
        // û_k e^{i2πkx} + û_{n−k} e^{−i2πkx}, conjugate-symmetric input.
        acc += 2.0 * (spectrum[k].re * c - spectrum[k].im * s);
    }
    if n % 2 == 0 {
        acc += spectrum[n / 2].re * (TAU * (n / 2) as f64 * x).cos();
    }
    acc / n as f64
}

/// Resamples a periodic field to a new grid size by trigonometric
/// interpolation (exact for band-limited data).
pub fn resample(field: &Field1D, new_n: usize) -> Field1D {
    if field.len() == new_n {
        return field.clone();
    }
    let spec = fft_forward(field.values());
    Field1D::from_fn(new_n, |x| trig_interp(&spec, x))
}

/// Spectral antiderivative `∫₀ˣ u dx′` of a zero-mean periodic field.
fn spectral_antiderivative(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut spec = fft_forward(values);
    spec[0] = Complex64::new(0.0, 0.0);
    for (i, c) in spec.iter_mut().enumerate().skip(1) {
        let k = signed_freq(i, n);
        if n % 2 == 0 && i == n / 2 {
            // Nyquist mode has no well-defined odd antiderivative; it is
            // zero for all the band-limited inputs used here.
            *c = Complex64::new(0.0, 0.0);
            continue;
        }
        *c /= Complex64::new(0.0, TAU * k as f64);
    }
    let anti = fft_inverse_real(&mut spec);
    // Fix the integration constant so the antiderivative vanishes at x=0.
    let a0 = anti[0];
    anti.into_iter().map(|v| v - a0).collect()
}

/// Spectral derivative of a periodic field.
fn spectral_derivative(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut spec = fft_forward(values);
    for (i, c) in spec.iter_mut().enumerate() {
        let k = signed_freq(i, n);
        if n % 2 == 0 && i == n / 2 {
            *c = Complex64::new(0.0, 0.0);
            continue;
        }
        *c *= Complex64::new(0.0, TAU * k as f64);
    }
    fft_inverse_real(&mut spec)
}

// ---------------------------------------------------------------------------
// Cole-Hopf transform and spectral Burgers solver
// ---------------------------------------------------------------------------

fn require_zero_mean(u: &Field1D) -> Result<()> {
    let m = u.mean();
    if m.abs() > MEAN_TOL {
        return Err(Error::Config(format!(
            "Cole-Hopf requires a zero-mean field (periodicity of the \
             transformed variable); mean = {m:.3e}"
        )));
    }
    Ok(())
}

/// Cole-Hopf transform `φ(x) = exp(−(1/2ν) ∫₀ˣ u dx′)`.
///
/// The input must be zero-mean, otherwise the transformed variable is not
/// periodic and the spectral evolution is invalid.
pub fn cole_hopf_forward(u: &Field1D, nu: f64) -> Result<Field1D> {
    require_zero_mean(u)?;
    let anti = spectral_antiderivative(u.values());
    Ok(Field1D::new(
        anti.iter().map(|a| (-a / (2.0 * nu)).exp()).collect(),
    ))
}

/// Inverse Cole-Hopf transform `u = −2ν ∂_x ln φ = −2ν φ_x / φ`.
pub fn cole_hopf_inverse(phi: &Field1D, nu: f64) -> Result<Field1D> {
    if phi.values().iter().any(|&p| p <= 0.0) {
        return Err(Error::Solver(
            "Cole-Hopf inverse requires a strictly positive field".into(),
        ));
    }
    let dphi = spectral_derivative(phi.values());
    Ok(Field1D::new(
        dphi.iter()
            .zip(phi.values())
            .map(|(d, p)| -2.0 * nu * d / p)
            .collect(),
    ))
}

/// Solves Burgers' equation spectrally at several horizons at once,
/// reusing the transformed initial spectrum.
///
/// Internally: resample to 256 points, Cole-Hopf transform, exact heat
/// evolution of each Fourier mode, inverse transform, resample back to the
/// input grid.
pub fn burgers_solve_spectral_multi(
    u0: &Field1D,
    nu: f64,
    times: &[f64],
) -> Result<Vec<Field1D>> {
    require_zero_mean(u0)?;
    if nu <= 0.0 {
        return Err(Error::Config(format!("viscosity must be positive, got {nu}")));
    }
    let n_out = u0.len();
    let fine = resample(u0, SPECTRAL_MODES);
    let phi0 = cole_hopf_forward(&fine, nu)?;
    if phi0.values().iter().any(|&p| p < 1e-250) {
        return Err(Error::Solver(
            "Cole-Hopf transform underflow (amplitude too large for this viscosity)".into(),
        ));
    }
    let phi_hat0 = fft_forward(phi0.values());
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        if t < 0.0 {
            return Err(Error::Config(format!("negative solve time {t}")));
        }
        let mut phi_hat: Vec<Complex64> = phi_hat0
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let k = signed_freq(i, SPECTRAL_MODES) as f64;
                c * (-4.0 * std::f64::consts::PI.powi(2) * k * k * nu * t).exp()
            })
            .collect();
        let phi_t = Field1D::new(fft_inverse_real(&mut phi_hat));
        if phi_t.values().iter().any(|&p| p <= 0.0 || !p.is_finite()) {
            return Err(Error::Solver(
                "transformed field lost positivity during spectral evolution".into(),
            ));
        }
        let u_fine = cole_hopf_inverse(&phi_t, nu)?;
        out.push(resample(&u_fine, n_out));
    }
    Ok(out)
}

/// Solves Burgers' equation spectrally to time `t` (see
/// [`burgers_solve_spectral_multi`]).
pub fn burgers_solve_spectral(u0: &Field1D, nu: f64, t: f64) -> Result<Field1D> {
    Ok(burgers_solve_spectral_multi(u0, nu, &[t])?.pop().unwrap())
}

// ---------------------------------------------------------------------------
// Finite-difference Burgers solver (independent oracle)
// ---------------------------------------------------------------------------

/// Conservative finite-difference Burgers solver: flux form
/// `u_t = −(u²/2)_x + ν u_xx` with central differences and Heun (RK2)
/// time stepping on a grid of spacing `dx` (the field is resampled to that
/// grid and back). Checks the advective and diffusive stability bounds up
/// front and watches for blow-up.
pub fn burgers_solve_fd(u0: &Field1D, nu: f64, t: f64, dt: f64, dx: f64) -> Result<Field1D> {
    if dt <= 0.0 || dx <= 0.0 {
        return Err(Error::Config("dt and dx must be positive".into()));
    }
    let n = (1.0 / dx).round() as usize;
    if n < 4 || ((n as f64) * dx - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "dx = {dx} does not evenly divide the unit domain"
        )));
    }
    // Stability: diffusive ν dt/dx² ≤ 1/2 (Heun), advective |u| dt/dx ≤ 1.
    // Enforce conservative margins up front.
    let amp = u0.max_abs().max(1.0);
    if nu * dt / (dx * dx) > 0.25 {
        return Err(Error::Config(format!(
            "diffusive stability violated: nu*dt/dx^2 = {:.3}",
            nu * dt / (dx * dx)
        )));
    }
    if amp * dt / dx > 0.5 {
        return Err(Error::Config(format!(
            "advective stability violated: |u|dt/dx = {:.3}",
            amp * dt / dx
        )));
    }

    let mut u = resample(u0, n).values().to_vec();
    let rhs = |u: &[f64], out: &mut [f64]| {
        for i in 0..n {
            let im = (i + n - 1) % n;
            let ip = (i + 1) % n;
            let flux = (u[ip] * u[ip] - u[im] * u[im]) / (4.0 * dx);
            let diff = nu * (u[ip] - 2.0 * u[i] + u[im]) / (dx * dx);
            out[i] = -flux + diff;
        }
    };

    let steps = (t / dt).round() as usize;
    let t_rem = t - steps as f64 * dt;
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut mid = vec![0.0; n];
    let mut step_once = |u: &mut Vec<f64>, h: f64| {
        rhs(u, &mut k1);
        for i in 0..n {
            mid[i] = u[i] + h * k1[i];
        }
        rhs(&mid, &mut k2);
        for i in 0..n {
            u[i] += 0.5 * h * (k1[i] + k2[i]);
        }
    };
    for s in 0..steps {
        step_once(&mut u, dt);
        if s % 128 == 0 && u.iter().any(|v| !v.is_finite() || v.abs() > 1e3) {
            return Err(Error::Solver(format!(
                "finite-difference Burgers blow-up at step {s}"
            )));
        }
    }
    if t_rem.abs() > 1e-12 {
        step_once(&mut u, t_rem);
    }
    if u.iter().any(|v| !v.is_finite() || v.abs() > 1e3) {
        return Err(Error::Solver("finite-difference Burgers blow-up".into()));
    }
    Ok(resample(&Field1D::new(u), u0.len()))
}

// ---------------------------------------------------------------------------
// Initial-condition families
// ---------------------------------------------------------------------------

/// Closed-form initial-condition families on the periodic unit interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum InitialCondition {
    /// `α sin(2πx) + (1−α) cos³(2πx)`, `α ∈ [0,1]`.
    MixedSine { alpha: f64 },
    /// `cos(2π(x − α))`, shift `α ∈ [0,1]`.
    Periodic { alpha: f64 },
    /// `cos(2πx − α₁) + cos(4πx − α₂)`, phases in `[0, 2π]`.
    DoublyPeriodic { alpha1: f64, alpha2: f64 },
}

/// IC family tags (used by dataset builders to draw parameters).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IcFamily {
    MixedSine,
    Periodic,
    DoublyPeriodic,
}

impl IcFamily {
    pub fn param_count(&self) -> usize {
        match self {
            IcFamily::MixedSine | IcFamily::Periodic => 1,
            IcFamily::DoublyPeriodic => 2,
        }
    }

    /// The natural parameter range of the family (applied per parameter).
    pub fn natural_range(&self) -> (f64, f64) {
        match self {
            IcFamily::MixedSine | IcFamily::Periodic => (0.0, 1.0),
            IcFamily::DoublyPeriodic => (0.0, TAU),
        }
    }

    /// Draws IC parameters uniformly from `range` (each parameter
    /// independently for two-parameter families).
    fn draw(&self, range: (f64, f64), rng: &mut impl Rng) -> Vec<f64> {
        (0..self.param_count())
            .map(|_| rng.gen_range(range.0..=range.1))
            .collect()
    }

    pub fn condition(&self, params: &[f64]) -> Result<InitialCondition> {
        match (self, params) {
            (IcFamily::MixedSine, [a]) => Ok(InitialCondition::MixedSine { alpha: *a }),
            (IcFamily::Periodic, [a]) => Ok(InitialCondition::Periodic { alpha: *a }),
            (IcFamily::DoublyPeriodic, [a1, a2]) => Ok(InitialCondition::DoublyPeriodic {
                alpha1: *a1,
                alpha2: *a2,
            }),
            _ => Err(Error::Config(format!(
                "family {self:?} got {} parameters",
                params.len()
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            IcFamily::MixedSine => "mixed-sine",
            IcFamily::Periodic => "periodic",
            IcFamily::DoublyPeriodic => "doubly-periodic",
        }
    }
}

/// Samples a named initial condition on an `n`-point grid.
pub fn sample_ic(ic: InitialCondition, n: usize) -> Result<Field1D> {
    match ic {
        InitialCondition::MixedSine { alpha } => {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Config(format!("alpha {alpha} outside [0,1]")));
            }
            Ok(Field1D::from_fn(n, |x| {
                alpha * (TAU * x).sin() + (1.0 - alpha) * (TAU * x).cos().powi(3)
            }))
        }
        InitialCondition::Periodic { alpha } => {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Config(format!("alpha {alpha} outside [0,1]")));
            }
            Ok(Field1D::from_fn(n, |x| (TAU * (x - alpha)).cos()))
        }
        InitialCondition::DoublyPeriodic { alpha1, alpha2 } => {
            for a in [alpha1, alpha2] {
                if !(0.0..=TAU).contains(&a) {
                    return Err(Error::Config(format!("phase {a} outside [0,2π]")));
                }
            }
            Ok(Field1D::from_fn(n, |x| {
                (TAU * x - alpha1).cos() + (2.0 * TAU * x - alpha2).cos()
            }))
        }
    }
}

// ---------------------------------------------------------------------------
// Snapshot pair sets
// ---------------------------------------------------------------------------

/// Dataset-level metadata serialized into the binary header and manifests.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PairSetInfo {
    /// Data source tag (e.g. "burgers/mixed-sine", "brusselator").
    pub source: String,
    /// Evolution lag between the two snapshots of a pair.
    pub tau: f64,
    /// Observation noise standard deviation.
    pub noise_sigma: f64,
    /// Master seed the set was generated from.
    pub seed: u64,
    /// Solver / generator settings, free-form but complete.
    pub settings: serde_json::Value,
}

/// Training pairs `(X⁽ⁱ⁾, x⁽ⁱ⁾)`: states at time `tᵢ` and `tᵢ + τ`,
/// flattened to rows, with per-pair IC parameters and sample times.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotPairSet {
    /// State dimension `d`.
    pub dim: usize,
    /// Number of IC parameters per pair (1 or 2).
    pub n_params: usize,
    /// `[m, d]` row-major: states at `tᵢ`.
    pub x_first: Vec<f64>,
    /// `[m, d]` row-major: states at `tᵢ + τ`.
    pub x_second: Vec<f64>,
    /// `[m, n_params]` row-major IC parameters.
    pub params: Vec<f64>,
    /// Sample times `tᵢ`.
    pub times: Vec<f64>,
    pub info: PairSetInfo,
}

const PAIRSET_MAGIC: &[u8; 6] = b"GDDAT1";

impl SnapshotPairSet {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first_row(&self, i: usize) -> &[f64] {
        &self.x_first[i * self.dim..(i + 1) * self.dim]
    }

    pub fn second_row(&self, i: usize) -> &[f64] {
        &self.x_second[i * self.dim..(i + 1) * self.dim]
    }

    pub fn param_row(&self, i: usize) -> &[f64] {
        &self.params[i * self.n_params..(i + 1) * self.n_params]
    }

    /// Serializes to the versioned binary layout: magic, JSON header
    /// (length-prefixed), extents, then `x_first`, `x_second`, `params`,
    /// `times` as 64-bit little-endian values in sample order.
    pub fn write_binary<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(PAIRSET_MAGIC)?;
        let header = serde_json::to_vec(&self.info)
            .map_err(|e| Error::Artifact(format!("header encode failed: {e}")))?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for v in [self.len() as u64, self.dim as u64, self.n_params as u64] {
            out.write_all(&v.to_le_bytes())?;
        }
        for arr in [&self.x_first, &self.x_second, &self.params, &self.times] {
            for v in arr.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 6];
        input.read_exact(&mut magic)?;
        if &magic != PAIRSET_MAGIC {
            return Err(Error::Artifact(format!(
                "bad dataset magic {:?}, expected {:?}",
                magic, PAIRSET_MAGIC
            )));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |input: &mut R| -> Result<u64> {
            input.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let hlen = read_u64(input)? as usize;
        if hlen > 1 << 24 {
            return Err(Error::Artifact(format!("unreasonable header length {hlen}")));
        }
        let mut hbuf = vec![0u8; hlen];
        input.read_exact(&mut hbuf)?;
        let info: PairSetInfo = serde_json::from_slice(&hbuf)
            .map_err(|e| Error::Artifact(format!("header decode failed: {e}")))?;
        let m = read_u64(input)? as usize;
        let dim = read_u64(input)? as usize;
        let n_params = read_u64(input)? as usize;
        let read_vec = |input: &mut R, len: usize| -> Result<Vec<f64>> {
            let mut out = vec![0.0; len];
            let mut buf = [0u8; 8];
            for v in out.iter_mut() {
                input.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            Ok(out)
        };
        let x_first = read_vec(input, m * dim)?;
        let x_second = read_vec(input, m * dim)?;
        let params = read_vec(input, m * n_params)?;
        let times = read_vec(input, m)?;
        Ok(SnapshotPairSet {
            dim,
            n_params,
            x_first,
            x_second,
            params,
            times,
            info,
        })
    }

    /// Exports one pair as CSV: header `x,first,second`, one row per
    /// grid point (1-D layouts; higher-D states are written flat with
    /// their linear index in place of `x`).
    pub fn export_pair_csv<W: Write>(&self, i: usize, out: &mut W) -> Result<()> {
        if i >= self.len() {
            return Err(Error::Config(format!(
                "pair index {i} out of range (m = {})",
                self.len()
            )));
        }
        writeln!(out, "x,first,second")?;
        let first = self.first_row(i);
        let second = self.second_row(i);
        for k in 0..self.dim {
            writeln!(out, "{},{},{}", k as f64 / self.dim as f64, first[k], second[k])?;
        }
        Ok(())
    }
}

/// Builds a Burgers snapshot-pair dataset: `m` pairs with IC parameters
/// drawn uniformly from `alpha_range` (defaulting to the family's natural
/// range, and validated against it), sample times `tᵢ` uniform on
/// `t_range`, second snapshots at `tᵢ + τ`, and i.i.d. Gaussian observation
/// noise of standard deviation `noise_sigma` on both snapshots.
#[allow(clippy::too_many_arguments)]
pub fn make_burgers_dataset(
    family: IcFamily,
    alpha_range: Option<(f64, f64)>,
    m: usize,
    n: usize,
    nu: f64,
    tau: f64,
    t_range: (f64, f64),
    noise_sigma: f64,
    seed: u64,
) -> Result<SnapshotPairSet> {
    if m == 0 {
        return Err(Error::Config("dataset needs at least one pair".into()));
    }
    if t_range.1 < t_range.0 || t_range.0 < 0.0 {
        return Err(Error::Config(format!("bad time range {t_range:?}")));
    }
    let natural = family.natural_range();
    let range = alpha_range.unwrap_or(natural);
    if !(range.0 >= natural.0 && range.1 <= natural.1 && range.0 < range.1) {
        return Err(Error::Config(format!(
            "alpha_range [{}, {}] outside the {} family's natural range [{}, {}]",
            range.0,
            range.1,
            family.name(),
            natural.0,
            natural.1
        )));
    }
    let mut param_rng = stream_rng(seed, 1);
    let mut noise_rng = stream_rng(seed, 2);
    let noise = Normal::new(0.0, noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;

    let n_params = family.param_count();
    let mut set = SnapshotPairSet {
        dim: n,
        n_params,
        x_first: Vec::with_capacity(m * n),
        x_second: Vec::with_capacity(m * n),
        params: Vec::with_capacity(m * n_params),
        times: Vec::with_capacity(m),
        info: PairSetInfo {
            source: format!("burgers/{}", family.name()),
            tau,
            noise_sigma,
            seed,
            settings: serde_json::json!({
                "nu": nu,
                "grid": n,
                "t_range": [t_range.0, t_range.1],
                "alpha_range": [range.0, range.1],
                "solver": "cole-hopf-spectral",
                "spectral_modes": SPECTRAL_MODES,
            }),
        },
    };

    for _ in 0..m {
        let p = family.draw(range, &mut param_rng);
        let t = if t_range.1 > t_range.0 {
            param_rng.gen_range(t_range.0..t_range.1)
        } else {
            t_range.0
        };
        let ic = family.condition(&p)?;
        let u0 = sample_ic(ic, n)?;
        let sols = burgers_solve_spectral_multi(&u0, nu, &[t, t + tau])?;
        for (buf, sol) in [(&mut set.x_first, &sols[0]), (&mut set.x_second, &sols[1])] {
            buf.extend(sol.values().iter().map(|&v| {
                if noise_sigma > 0.0 {
                    v + noise.sample(&mut noise_rng)
                } else {
                    v
                }
            }));
        }
        set.params.extend_from_slice(&p);
        set.times.push(t);
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// Brusselator
// ---------------------------------------------------------------------------

/// Time integrators for the Brusselator system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BrusselatorIntegrator {
    /// Fully explicit Euler (reaction and diffusion).
    ExplicitEuler,
    /// Explicit reaction, diffusion solved implicitly per step in Fourier
    /// space (exact solve of the backward-Euler diffusion system, since
    /// the periodic 5-point Laplacian diagonalizes under the DFT).
    SemiImplicit,
}

/// Brusselator reaction-diffusion parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BrusselatorParams {
    pub d1: f64,
    pub d2: f64,
    pub a: f64,
    pub b: f64,
    pub dt: f64,
    pub dx: f64,
    pub integrator: BrusselatorIntegrator,
}

impl Default for BrusselatorParams {
    fn default() -> Self {
        Self {
            d1: 1.0,
            d2: 0.1,
            a: 1.0,
            b: 3.0,
            dt: 1e-3,
            dx: 1.0,
            integrator: BrusselatorIntegrator::ExplicitEuler,
        }
    }
}

impl BrusselatorParams {
    pub fn validate(&self) -> Result<()> {
        if self.d1 <= 0.0 || self.d2 <= 0.0 {
            return Err(Error::Config("diffusivities must be positive".into()));
        }
        if self.dt <= 0.0 || self.dx <= 0.0 {
            return Err(Error::Config("dt and dx must be positive".into()));
        }
        if self.integrator == BrusselatorIntegrator::ExplicitEuler {
            let bound = self.dx * self.dx / (4.0 * self.d1.max(self.d2));
            if self.dt > bound {
                return Err(Error::Config(format!(
                    "explicit Euler unstable: dt = {} exceeds dx²/4D = {bound}",
                    self.dt
                )));
            }
        }
        Ok(())
    }

    /// Reaction terms `f(u,v) = a − (1+b)u + vu²`, `g(u,v) = bu − vu²`.
    pub fn reaction(&self, u: f64, v: f64) -> (f64, f64) {
        let uu = u * u;
        (
            self.a - (1.0 + self.b) * u + v * uu,
            self.b * u - v * uu,
        )
    }

    /// Homogeneous fixed point `(a, b/a)`.
    pub fn fixed_point(&self) -> (f64, f64) {
        (self.a, self.b / self.a)
    }
}

/// 5-point periodic Laplacian with spacing `dx`.
fn laplacian_2d(field: &[f64], lx: usize, ly: usize, dx: f64, out: &mut [f64]) {
    let inv = 1.0 / (dx * dx);
    for iy in 0..ly {
        let up = if iy == 0 { ly - 1 } else { iy - 1 } * lx;
        let down = if iy == ly - 1 { 0 } else { iy + 1 } * lx;
        let row = iy * lx;
        for ix in 0..lx {
            let left = row + if ix == 0 { lx - 1 } else { ix - 1 };
            let right = row + if ix == lx - 1 { 0 } else { ix + 1 };
            out[row + ix] = (field[left] + field[right] + field[up + ix] + field[down + ix]
                - 4.0 * field[row + ix])
                * inv;
        }
    }
}

/// In-place 2-D FFT (rows then columns).
fn fft2d(buf: &mut [Complex64], lx: usize, ly: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(lx)
    } else {
        planner.plan_fft_forward(lx)
    };
    for row in buf.chunks_mut(lx) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(ly)
    } else {
        planner.plan_fft_forward(ly)
    };
    let mut col = vec![Complex64::new(0.0, 0.0); ly];
    for ix in 0..lx {
        for iy in 0..ly {
            col[iy] = buf[iy * lx + ix];
        }
        col_fft.process(&mut col);
        for iy in 0..ly {
            buf[iy * lx + ix] = col[iy];
        }
    }
}

/// One backward-Euler diffusion solve `(I − dt·D·Δ) u_new = u` done
/// exactly in Fourier space (the periodic 5-point Laplacian is diagonal
/// there with eigenvalues `−(4 − 2cos(2πk/Lx) − 2cos(2πl/Ly))/dx²`).
fn implicit_diffusion(field: &mut [f64], lx: usize, ly: usize, dx: f64, dt_d: f64) {
    let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2d(&mut buf, lx, ly, false);
    let inv_dx2 = 1.0 / (dx * dx);
    for iy in 0..ly {
        let cy = (TAU * iy as f64 / ly as f64).cos();
        for ix in 0..lx {
            let cx = (TAU * ix as f64 / lx as f64).cos();
            let lam = (4.0 - 2.0 * cx - 2.0 * cy) * inv_dx2;
            buf[iy * lx + ix] /= 1.0 + dt_d * lam;
        }
    }
    fft2d(&mut buf, lx, ly, true);
    let scale = 1.0 / (lx * ly) as f64;
    for (f, c) in field.iter_mut().zip(&buf) {
        *f = c.re * scale;
    }
}

/// Integrates the Brusselator system to time `horizon`, storing snapshots
/// every `snapshot_stride` time units (and the initial state at t=0).
pub fn brusselator_solve(
    ic: &Field2D,
    params: &BrusselatorParams,
    horizon: f64,
    snapshot_stride: f64,
) -> Result<Vec<(f64, Field2D)>> {
    params.validate()?;
    if snapshot_stride <= 0.0 {
        return Err(Error::Config("snapshot stride must be positive".into()));
    }
    let (lx, ly) = (ic.lx, ic.ly);
    let cells = ic.cells();
    let mut u = ic.u.clone();
    let mut v = ic.v.clone();
    let mut lap_u = vec![0.0; cells];
    let mut lap_v = vec![0.0; cells];

    let steps = (horizon / params.dt).round() as usize;
    let stride_steps = (snapshot_stride / params.dt).round().max(1.0) as usize;
    let mut snaps = vec![(0.0, ic.clone())];

    for s in 1..=steps {
        match params.integrator {
            BrusselatorIntegrator::ExplicitEuler => {
                laplacian_2d(&u, lx, ly, params.dx, &mut lap_u);
                laplacian_2d(&v, lx, ly, params.dx, &mut lap_v);
                for i in 0..cells {
                    let (f, g) = params.reaction(u[i], v[i]);
                    u[i] += params.dt * (params.d1 * lap_u[i] + f);
                    v[i] += params.dt * (params.d2 * lap_v[i] + g);
                }
            }
            BrusselatorIntegrator::SemiImplicit => {
                for i in 0..cells {
                    let (f, g) = params.reaction(u[i], v[i]);
                    u[i] += params.dt * f;
                    v[i] += params.dt * g;
                }
                implicit_diffusion(&mut u, lx, ly, params.dx, params.dt * params.d1);
                implicit_diffusion(&mut v, lx, ly, params.dx, params.dt * params.d2);
            }
        }
        if s % 512 == 0 {
            let blow = u
                .iter()
                .chain(v.iter())
                .any(|x| !x.is_finite() || x.abs() > 1e6);
            if blow {
                return Err(Error::Solver(format!(
                    "Brusselator blow-up at t = {:.3}",
                    s as f64 * params.dt
                )));
            }
        }
        if s % stride_steps == 0 {
            let t = s as f64 * params.dt;
            snaps.push((t, Field2D::new(lx, ly, u.clone(), v.clone())?));
        }
    }
    if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Solver("Brusselator produced non-finite values".into()));
    }
    Ok(snaps)
}

/// Brusselator initial condition:
/// `u₀(x,y) = α sin(2πx/Lx) + (1−α) cos³(2πx/Lx)` and the same profile in
/// `y` for `v₀`.
pub fn brusselator_ic(alpha: f64, lx: usize, ly: usize) -> Result<Field2D> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0,1]")));
    }
    let profile = |s: f64, l: usize| -> f64 {
        let th = TAU * s / l as f64;
        alpha * th.sin() + (1.0 - alpha) * th.cos().powi(3)
    };
    let mut u = vec![0.0; lx * ly];
    let mut v = vec![0.0; lx * ly];
    for iy in 0..ly {
        for ix in 0..lx {
            u[iy * lx + ix] = profile(ix as f64, lx);
            v[iy * lx + ix] = profile(iy as f64, ly);
        }
    }
    Field2D::new(lx, ly, u, v)
}

/// Builds a Brusselator snapshot-pair dataset: `n_traj` trajectories with
/// `α ~ U[0,1]`, transient `t < t_transient` discarded, pairs
/// `(w(t), w(t+τ))` at stride `τ` until `t_end`, flattened channel-major,
/// with optional observation noise.
#[allow(clippy::too_many_arguments)]
pub fn make_brusselator_dataset(
    n_traj: usize,
    l: usize,
    params: &BrusselatorParams,
    t_transient: f64,
    t_end: f64,
    tau: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<SnapshotPairSet> {
    if n_traj == 0 {
        return Err(Error::Config("dataset needs at least one trajectory".into()));
    }
    if t_end <= t_transient + tau {
        return Err(Error::Config(format!(
            "t_end = {t_end} leaves no room for pairs after the transient {t_transient} + tau {tau}"
        )));
    }
    let mut param_rng = stream_rng(seed, 1);
    let mut noise_rng = stream_rng(seed, 2);
    let noise = Normal::new(0.0, noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;
    let dim = 2 * l * l;
    let mut set = SnapshotPairSet {
        dim,
        n_params: 1,
        x_first: Vec::new(),
        x_second: Vec::new(),
        params: Vec::new(),
        times: Vec::new(),
        info: PairSetInfo {
            source: "brusselator".into(),
            tau,
            noise_sigma,
            seed,
            settings: serde_json::json!({
                "grid": l,
                "params": params,
                "t_transient": t_transient,
                "t_end": t_end,
                "n_traj": n_traj,
            }),
        },
    };

    for _ in 0..n_traj {
        let alpha: f64 = param_rng.gen_range(0.0..=1.0);
        let ic = brusselator_ic(alpha, l, l)?;
        let snaps = brusselator_solve(&ic, params, t_end, tau)?;
        let usable: Vec<&(f64, Field2D)> = snaps
            .iter()
            .filter(|(t, _)| *t >= t_transient - 1e-9)
            .collect();
        for pair in usable.windows(2) {
            let (t0, w0) = pair[0];
            let (_, w1) = pair[1];
            for (buf, w) in [(&mut set.x_first, w0), (&mut set.x_second, w1)] {
                buf.extend(w.flatten().iter().map(|&x| {
                    if noise_sigma > 0.0 {
                        x + noise.sample(&mut noise_rng)
                    } else {
                        x
                    }
                }));
            }
            set.params.push(alpha);
            set.times.push(*t0);
        }
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// Constrained-mechanism datasets
// ---------------------------------------------------------------------------

/// Samples `n` configurations of a planar two-segment arm: joint angles
/// uniform on `[0, 2π)²`, returning rows `(x₁, y₁, x₂, y₂) ∈ ℝ⁴` with
/// `(x₁,y₁) = ℓ₁(cos θ₁, sin θ₁)` and `(x₂,y₂) = (x₁,y₁) + ℓ₂(cos θ₂, sin θ₂)`.
pub fn make_arm_dataset(n: usize, l1: f64, l2: f64, seed: u64) -> Result<Vec<f64>> {
    if l1 <= 0.0 || l2 <= 0.0 {
        return Err(Error::Config(format!(
            "segment lengths must be positive, got {l1}, {l2}"
        )));
    }
    let mut rng = stream_rng(seed, 1);
    let mut out = Vec::with_capacity(4 * n);
    for _ in 0..n {
        let th1: f64 = rng.gen_range(0.0..TAU);
        let th2: f64 = rng.gen_range(0.0..TAU);
        let (s1, c1) = th1.sin_cos();
        let (s2, c2) = th2.sin_cos();
        let x1 = l1 * c1;
        let y1 = l1 * s1;
        out.extend_from_slice(&[x1, y1, x1 + l2 * c2, y1 + l2 * s2]);
    }
    Ok(out)
}

/// Samples `n` points of the Klein-bottle embedding (parameters uniform on
/// `[0, 2π)²`) with optional ambient Gaussian noise; rows in ℝ⁴.
pub fn make_klein_dataset(n: usize, a: f64, b: f64, noise_sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(a > b && b > 0.0) {
        return Err(Error::Config(format!(
            "Klein-bottle constants need a > b > 0, got {a}, {b}"
        )));
    }
    let mut rng = stream_rng(seed, 1);
    let mut noise_rng = stream_rng(seed, 2);
    let noise = Normal::new(0.0, noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;
    let mut out = Vec::with_capacity(4 * n);
    for _ in 0..n {
        let u1: f64 = rng.gen_range(0.0..TAU);
        let u2: f64 = rng.gen_range(0.0..TAU);
        let z = klein_bottle_chart(u1, u2, a, b).z;
        for zi in z {
            out.push(if noise_sigma > 0.0 {
                zi + noise.sample(&mut noise_rng)
            } else {
                zi
            });
        }
    }
    Ok(out)
}
