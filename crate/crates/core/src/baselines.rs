//! Linear and analytic reduction baselines: proper orthogonal
//! decomposition (POD), dynamic mode decomposition (DMD), a truncated
//! Cole-Hopf reduced model for the viscous Burgers equation, and a PCA
//! embedding for trajectory visualization.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::pde_data::{
    cole_hopf_forward, cole_hopf_inverse, fft_forward, fft_inverse_real, signed_freq, Field1D,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};

/// Relative singular-value cutoff below which data count as rank-deficient.
const RANK_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Linear reduced-order models
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RomKind {
    Pod,
    Dmd,
}

/// A linear reduced-order model: an orthonormal basis of a low-dimensional
/// subspace plus a linear one-step evolution operator in basis coordinates.
#[derive(Clone, Debug)]
pub struct LinearROM {
    pub kind: RomKind,
    /// Subtracted mean (all zeros when mean subtraction was disabled).
    pub mean: Vec<f64>,
    /// `[n, r]`, orthonormal columns.
    pub basis: Tensor,
    /// `[r, r]` one-step operator in basis coordinates.
    pub evolution: Tensor,
    /// Eigenvalues of the evolution operator (real, imaginary parts).
    pub eig_re: Vec<f64>,
    pub eig_im: Vec<f64>,
    /// Singular values of the (centered) snapshot matrix.
    pub singular_values: Vec<f64>,
    /// Whether the snapshot mean was subtracted before the decomposition
    /// (recorded so runs are reproducible).
    pub mean_subtracted: bool,
}

impl LinearROM {
    pub fn state_dim(&self) -> usize {
        self.basis.shape()[0]
    }

    pub fn reduced_dim(&self) -> usize {
        self.basis.shape()[1]
    }

    /// Basis coordinates of one state: `a = Bᵀ(x − μ)`.
    pub fn encode_coords(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (n, r) = (self.state_dim(), self.reduced_dim());
        if x.len() != n {
            return Err(Error::Config(format!(
                "state has {} values, model expects {n}",
                x.len()
            )));
        }
        let b = self.basis.data();
        let mut a = vec![0.0; r];
        for (i, (xi, mi)) in x.iter().zip(&self.mean).enumerate() {
            let y = xi - mi;
            for (j, aj) in a.iter_mut().enumerate() {
                *aj += b[i * r + j] * y;
            }
        }
        Ok(a)
    }

    /// Lift of basis coordinates back to the full space: `x = B a + μ`.
    pub fn lift(&self, coords: &[f64]) -> Vec<f64> {
        let (n, r) = (self.state_dim(), self.reduced_dim());
        let b = self.basis.data();
        let mut x = self.mean.clone();
        for i in 0..n {
            for (j, aj) in coords.iter().enumerate().take(r) {
                x[i] += b[i * r + j] * aj;
            }
        }
        x
    }

    /// Projection of a state onto the model subspace (lift ∘ encode).
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.lift(&self.encode_coords(x)?))
    }

    fn step_coords(&self, a: &[f64]) -> Vec<f64> {
        let r = self.reduced_dim();
        let ev = self.evolution.data();
        let mut out = vec![0.0; r];
        for (i, oi) in out.iter_mut().enumerate() {
            for (j, aj) in a.iter().enumerate() {
                *oi += ev[i * r + j] * aj;
            }
        }
        out
    }

    /// Predictions at horizons `0..=steps`: project the initial state,
    /// evolve its coordinates with the reduced operator (amplitudes fit at
    /// the initial time), lift every intermediate state. Entry 0 is the
    /// plain subspace projection.
    pub fn predict_horizons(&self, x0: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
        let mut a = self.encode_coords(x0)?;
        let mut out = Vec::with_capacity(steps + 1);
        out.push(self.lift(&a));
        for _ in 0..steps {
            a = self.step_coords(&a);
            out.push(self.lift(&a));
        }
        Ok(out)
    }

    /// Largest entry of `BᵀB − I` (orthonormality defect of the basis).
    pub fn orthonormality_residual(&self) -> f64 {
        let (n, r) = (self.state_dim(), self.reduced_dim());
        let b = self.basis.data();
        let mut worst = 0.0f64;
        for j in 0..r {
            for k in 0..r {
                let mut dot = 0.0;
                for i in 0..n {
                    dot += b[i * r + j] * b[i * r + k];
                }
                let target = if j == k { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Column-mean of a row-major `[m, n]` snapshot tensor.
fn snapshot_mean(snapshots: &Tensor) -> Vec<f64> {
    let (m, n) = (snapshots.shape()[0], snapshots.shape()[1]);
    let mut mean = vec![0.0; n];
    for row in snapshots.data().chunks(n) {
        for (mi, v) in mean.iter_mut().zip(row) {
            *mi += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    mean
}

/// `[n, m]` matrix whose columns are the (optionally centered) snapshots.
fn column_matrix(snapshots: &Tensor, mean: &[f64]) -> DMatrix<f64> {
    let (m, n) = (snapshots.shape()[0], snapshots.shape()[1]);
    DMatrix::from_fn(n, m, |i, j| snapshots.data()[j * n + i] - mean[i])
}

fn eigen_pairs(a: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let eig = a.complex_eigenvalues();
    let mut pairs: Vec<(f64, f64)> = eig.iter().map(|c| (c.re, c.im)).collect();
    // Sort by magnitude, largest first, for stable reporting.
    pairs.sort_by(|a, b| {
        let ma = a.0 * a.0 + a.1 * a.1;
        let mb = b.0 * b.0 + b.1 * b.1;
        mb.partial_cmp(&ma).unwrap()
    });
    pairs.into_iter().unzip()
}

fn tensor_from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    Tensor::new(
        vec![m.nrows(), m.ncols()],
        (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
            .collect(),
    )
    .expect("matrix dims consistent")
}

/// Proper orthogonal decomposition of a snapshot sequence (rows of
/// `snapshots`, in time order). The basis holds the top-`r` left singular
/// vectors of the (optionally mean-centered) snapshot matrix; the reduced
/// evolution operator is the least-squares one-step map in basis
/// coordinates.
pub fn pod(snapshots: &Tensor, r: usize, mean_subtract: bool) -> Result<LinearROM> {
    if snapshots.shape().len() != 2 {
        return Err(Error::Config("snapshots must be a [m, n] tensor".into()));
    }
    let (m, n) = (snapshots.shape()[0], snapshots.shape()[1]);
    if r == 0 || r > n.min(m) {
        return Err(Error::Config(format!(
            "reduced dimension {r} outside 1..=min(n={n}, m={m})"
        )));
    }
    let mean = if mean_subtract {
        snapshot_mean(snapshots)
    } else {
        vec![0.0; n]
    };
    let y = column_matrix(snapshots, &mean);
    let svd = y.clone().svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    if sigma[r - 1] <= RANK_TOL * sigma[0].max(f64::MIN_POSITIVE) {
        return Err(Error::Solver(format!(
            "snapshot matrix is rank-deficient below {r} (sigma_{r} = {:.3e})",
            sigma[r - 1]
        )));
    }
    let basis = u.columns(0, r).into_owned();

    // Least-squares one-step operator on basis coordinates.
    let coords = basis.transpose() * &y; // r × m
    let evolution = if m >= 2 {
        let a1 = coords.columns(0, m - 1).into_owned();
        let a2 = coords.columns(1, m - 1).into_owned();
        let pinv = a1
            .svd(true, true)
            .pseudo_inverse(RANK_TOL)
            .map_err(|e| Error::Solver(format!("least-squares fit failed: {e}")))?;
        a2 * pinv
    } else {
        DMatrix::identity(r, r)
    };
    let (eig_re, eig_im) = eigen_pairs(&evolution);

    Ok(LinearROM {
        kind: RomKind::Pod,
        mean,
        basis: tensor_from_dmatrix(&basis),
        evolution: tensor_from_dmatrix(&evolution),
        eig_re,
        eig_im,
        singular_values: sigma,
        mean_subtracted: mean_subtract,
    })
}

/// POD reduced-order model fit on lag-τ snapshot pairs (row `i` of
/// `x_first` maps to row `i` of `x_second`): the basis comes from the
/// stacked first and second snapshots, the evolution operator from a
/// least-squares fit between the paired basis coordinates. Use this
/// instead of [`pod`] when the data is unordered pairs from many
/// trajectories rather than one ordered trajectory.
pub fn pod_pairs(
    x_first: &Tensor,
    x_second: &Tensor,
    r: usize,
    mean_subtract: bool,
) -> Result<LinearROM> {
    if x_first.shape().len() != 2 || x_first.shape() != x_second.shape() {
        return Err(Error::Config(
            "pair tensors must be [m, n] with matching shapes".into(),
        ));
    }
    let (m, n) = (x_first.shape()[0], x_first.shape()[1]);
    if r == 0 || r > n.min(2 * m) {
        return Err(Error::Config(format!(
            "reduced dimension {r} outside 1..=min(n={n}, 2m={})",
            2 * m
        )));
    }
    let mut stacked_data = x_first.data().to_vec();
    stacked_data.extend_from_slice(x_second.data());
    let stacked = Tensor::new(vec![2 * m, n], stacked_data)?;
    let mean = if mean_subtract {
        snapshot_mean(&stacked)
    } else {
        vec![0.0; n]
    };
    let y = column_matrix(&stacked, &mean);
    let svd = y.svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    if sigma[r - 1] <= RANK_TOL * sigma[0].max(f64::MIN_POSITIVE) {
        return Err(Error::Solver(format!(
            "snapshot matrix is rank-deficient below {r} (sigma_{r} = {:.3e})",
            sigma[r - 1]
        )));
    }
    let basis = u.columns(0, r).into_owned();

    let a1 = basis.transpose() * column_matrix(x_first, &mean);
    let a2 = basis.transpose() * column_matrix(x_second, &mean);
    let pinv = a1
        .svd(true, true)
        .pseudo_inverse(RANK_TOL)
        .map_err(|e| Error::Solver(format!("least-squares fit failed: {e}")))?;
    let evolution = a2 * pinv;
    let (eig_re, eig_im) = eigen_pairs(&evolution);

    Ok(LinearROM {
        kind: RomKind::Pod,
        mean,
        basis: tensor_from_dmatrix(&basis),
        evolution: tensor_from_dmatrix(&evolution),
        eig_re,
        eig_im,
        singular_values: sigma,
        mean_subtracted: mean_subtract,
    })
}

/// Exact dynamic mode decomposition from one-step snapshot pairs (row `i`
/// of `x_first` maps to row `i` of `x_second`). With `X = UΣVᵀ`, the
/// reduced operator is `Ã = Uᵀ X′ V Σ⁻¹`; predictions evolve basis
/// coordinates with `Ã`. When `mean_subtract` is set, the mean of the
/// first-snapshot set is removed from both sides (recorded on the model).
pub fn dmd(x_first: &Tensor, x_second: &Tensor, r: usize, mean_subtract: bool) -> Result<LinearROM> {
    if x_first.shape().len() != 2 || x_first.shape() != x_second.shape() {
        return Err(Error::Config(
            "pair tensors must be [m, n] with matching shapes".into(),
        ));
    }
    let (m, n) = (x_first.shape()[0], x_first.shape()[1]);
    if r == 0 || r > n.min(m) {
        return Err(Error::Config(format!(
            "reduced dimension {r} outside 1..=min(n={n}, m={m})"
        )));
    }
    let mean = if mean_subtract {
        snapshot_mean(x_first)
    } else {
        vec![0.0; n]
    };
    let x = column_matrix(x_first, &mean);
    let xp = column_matrix(x_second, &mean);
    let svd = x.clone().svd(true, true);
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    if sigma[r - 1] <= RANK_TOL * sigma[0].max(f64::MIN_POSITIVE) {
        return Err(Error::Solver(format!(
            "pair data are singular below rank {r} (sigma_{r} = {:.3e})",
            sigma[r - 1]
        )));
    }
    let u = svd.u.as_ref().expect("U requested").columns(0, r).into_owned();
    let vt = svd.v_t.as_ref().expect("Vᵀ requested");
    let v = vt.rows(0, r).transpose(); // m × r
    let sigma_inv = DMatrix::from_fn(r, r, |i, j| if i == j { 1.0 / sigma[i] } else { 0.0 });
    let a_tilde = u.transpose() * &xp * v * sigma_inv;
    let (eig_re, eig_im) = eigen_pairs(&a_tilde);

    Ok(LinearROM {
        kind: RomKind::Dmd,
        mean,
        basis: tensor_from_dmatrix(&u),
        evolution: tensor_from_dmatrix(&a_tilde),
        eig_re,
        eig_im,
        singular_values: sigma,
        mean_subtracted: mean_subtract,
    })
}

// ---------------------------------------------------------------------------
// Truncated Cole-Hopf reduced model
// ---------------------------------------------------------------------------

/// Reduced-order Burgers prediction through the Cole-Hopf transform with a
/// hard Fourier cutoff: transform the initial state, keep modes
/// `|k| ≤ n_f/2` of the transformed field, evolve those analytically under
/// the heat equation, transform back. `n_f` must be even.
pub fn cole_hopf_rom(u0: &Field1D, nu: f64, t: f64, n_f: usize) -> Result<Field1D> {
    if n_f % 2 != 0 {
        return Err(Error::Config(format!("mode budget n_f = {n_f} must be even")));
    }
    if t < 0.0 {
        return Err(Error::Config(format!("time {t} must be non-negative")));
    }
    let phi = cole_hopf_forward(u0, nu)?;
    let n = phi.len();
    let mut spectrum = fft_forward(phi.values());
    let k_max = (n_f / 2) as i64;
    for (i, c) in spectrum.iter_mut().enumerate() {
        let k = signed_freq(i, n);
        if k.abs() > k_max {
            c.re = 0.0;
            c.im = 0.0;
        } else {
            let decay = (-4.0 * PI * PI * (k * k) as f64 * nu * t).exp();
            c.re *= decay;
            c.im *= decay;
        }
    }
    let phi_t = Field1D::new(fft_inverse_real(&mut spectrum));
    cole_hopf_inverse(&phi_t, nu)
}

// ---------------------------------------------------------------------------
// PCA embedding
// ---------------------------------------------------------------------------

/// Low-dimensional coordinates of a snapshot set.
#[derive(Clone, Debug)]
pub struct PcaEmbedding {
    /// `[m, d]` coordinates in the principal directions.
    pub coords: Tensor,
    /// Fraction of total variance captured by the `d` directions.
    pub variance_captured: f64,
    /// All singular values of the centered snapshot matrix.
    pub singular_values: Vec<f64>,
}

/// Mean-centered projection of the snapshot rows onto their top-`d`
/// principal directions.
pub fn pca_embed(snapshots: &Tensor, d: usize) -> Result<PcaEmbedding> {
    if snapshots.shape().len() != 2 {
        return Err(Error::Config("snapshots must be a [m, n] tensor".into()));
    }
    let (m, n) = (snapshots.shape()[0], snapshots.shape()[1]);
    if d == 0 || d > n.min(m) {
        return Err(Error::Config(format!(
            "embedding dimension {d} outside 1..=min(n={n}, m={m})"
        )));
    }
    let mean = snapshot_mean(snapshots);
    let y = column_matrix(snapshots, &mean); // n × m
    let svd = y.svd(true, false);
    let u = svd.u.as_ref().expect("U requested");
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let captured: f64 = sigma.iter().take(d).map(|s| s * s).sum();
    let mut coords = vec![0.0; m * d];
    for row in 0..m {
        for j in 0..d {
            let mut acc = 0.0;
            for i in 0..n {
                acc += (snapshots.data()[row * n + i] - mean[i]) * u[(i, j)];
            }
            coords[row * d + j] = acc;
        }
    }
    Ok(PcaEmbedding {
        coords: Tensor::new(vec![m, d], coords)?,
        variance_captured: if total > 0.0 { captured / total } else { 1.0 },
        singular_values: sigma,
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

const ROM_MAGIC: &[u8; 6] = b"GDROM1";

#[derive(Serialize, Deserialize)]
struct RomHeader {
    kind: RomKind,
    n: usize,
    r: usize,
    mean_subtracted: bool,
    eig_re: Vec<f64>,
    eig_im: Vec<f64>,
    singular_values: Vec<f64>,
}

/// Serializes a reduced model: magic, JSON header, then mean, basis, and
/// evolution as 64-bit little-endian values.
pub fn save_rom<W: Write>(rom: &LinearROM, out: &mut W) -> Result<()> {
    out.write_all(ROM_MAGIC)?;
    let header = RomHeader {
        kind: rom.kind,
        n: rom.state_dim(),
        r: rom.reduced_dim(),
        mean_subtracted: rom.mean_subtracted,
        eig_re: rom.eig_re.clone(),
        eig_im: rom.eig_im.clone(),
        singular_values: rom.singular_values.clone(),
    };
    let hjson = serde_json::to_vec(&header)
        .map_err(|e| Error::Artifact(format!("model header encode failed: {e}")))?;
    out.write_all(&(hjson.len() as u64).to_le_bytes())?;
    out.write_all(&hjson)?;
    for v in rom
        .mean
        .iter()
        .chain(rom.basis.data())
        .chain(rom.evolution.data())
    {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Loads a reduced model saved by [`save_rom`].
pub fn load_rom<R: Read>(input: &mut R) -> Result<LinearROM> {
    let mut magic = [0u8; 6];
    input.read_exact(&mut magic)?;
    if &magic != ROM_MAGIC {
        return Err(Error::Artifact(format!(
            "bad model magic {:?}, expected {:?}",
            magic, ROM_MAGIC
        )));
    }
    let mut lenbuf = [0u8; 8];
    input.read_exact(&mut lenbuf)?;
    let hlen = u64::from_le_bytes(lenbuf) as usize;
    if hlen > 1 << 24 {
        return Err(Error::Artifact(format!("unreasonable header length {hlen}")));
    }
    let mut hbuf = vec![0u8; hlen];
    input.read_exact(&mut hbuf)?;
    let header: RomHeader = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::Artifact(format!("model header decode failed: {e}")))?;
    let (n, r) = (header.n, header.r);
    let read_vec = |input: &mut R, len: usize| -> Result<Vec<f64>> {
        let mut out = vec![0.0; len];
        let mut buf = [0u8; 8];
        for v in out.iter_mut() {
            input.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(out)
    };
    let mean = read_vec(input, n)?;
    let basis = Tensor::new(vec![n, r], read_vec(input, n * r)?)?;
    let evolution = Tensor::new(vec![r, r], read_vec(input, r * r)?)?;
    Ok(LinearROM {
        kind: header.kind,
        mean,
        basis,
        evolution,
        eig_re: header.eig_re,
        eig_im: header.eig_im,
        singular_values: header.singular_values,
        mean_subtracted: header.mean_subtracted,
    })
}
