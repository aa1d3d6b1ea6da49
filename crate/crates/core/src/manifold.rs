//! Latent manifolds and differentiable nearest-point projection.
//!
//! A manifold `M ⊂ ℝ^N` is described by an atlas of charts `σ^k: U_k → ℝ^N`
//! with analytic first and second derivatives. The nearest-point projection
//!
//! ```text
//! Λ(w) = argmin_{z ∈ M} ½‖w − z‖²
//! ```
//!
//! is computed either in closed form (circles, products of circles,
//! cylinders, the embedded 3-D torus) or by Newton iteration on the
//! stationarity condition
//!
//! ```text
//! G(u, w) = −∇_u σ(u)ᵀ (w − σ(u)) = 0
//! ```
//!
//! seeded from the nearest point of a sampled point cloud. Either way, the
//! derivative of the projection with respect to its input follows from the
//! implicit function theorem:
//!
//! ```text
//! ∇_u G = ∇_uσᵀ∇_uσ − Σ_n (w−σ)_n ∇_uu σ_n      (m×m)
//! ∇_w G = −∇_uσᵀ                                  (m×N)
//! J = dz*/dw = ∇_uσ [∇_u G]⁻¹ ∇_uσᵀ              (N×N)
//! ```
//!
//! which downstream models splice into backpropagation as a custom-gradient
//! node. `J` is symmetric and its columns lie in the tangent space at the
//! projected point.

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io::{BufRead, Write};
use std::sync::Arc;

/// Distance below which an input counts as degenerate (medial set).
const DEGENERATE_EPS: f64 = 1e-12;
/// Newton convergence tolerance on ‖G‖.
const NEWTON_TOL: f64 = 1e-10;
/// Newton iteration cap.
const NEWTON_MAX_ITERS: usize = 50;

// ---------------------------------------------------------------------------
// Charts
// ---------------------------------------------------------------------------

/// Chart evaluation: embedding value with first and second derivatives.
#[derive(Clone, Debug)]
pub struct ChartEval {
    /// `σ(u) ∈ ℝ^N`.
    pub z: Vec<f64>,
    /// `∇_u σ`, row-major `[N, m]`: `jac[n*m + i] = ∂σ_n/∂u_i`.
    pub jac: Vec<f64>,
    /// `∇_uu σ`, row-major `[N, m, m]`:
    /// `hess[(n*m + i)*m + j] = ∂²σ_n/∂u_i∂u_j`.
    pub hess: Vec<f64>,
}

/// A smooth embedding `σ: U ⊂ ℝ^m → ℝ^N` with analytic derivatives.
pub trait ChartFn: Send + Sync {
    fn intrinsic_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn eval(&self, u: &[f64]) -> ChartEval;
    /// Maps parameters to canonical domain representatives (e.g. wraps
    /// periodic angles); identity by default.
    fn canonicalize(&self, _u: &mut [f64]) {}
}

/// One chart of an atlas: a parameter box plus the embedding map.
#[derive(Clone)]
pub struct Chart {
    pub id: usize,
    /// Box bounds per intrinsic coordinate.
    pub domain: Vec<(f64, f64)>,
    /// Coordinates that wrap around (right endpoint identified with left).
    pub periodic: Vec<bool>,
    pub map: Arc<dyn ChartFn>,
}

impl Chart {
    pub fn eval(&self, u: &[f64]) -> ChartEval {
        self.map.eval(u)
    }
}

fn wrap_angle(t: f64) -> f64 {
    let mut r = t % TAU;
    if r < 0.0 {
        r += TAU;
    }
    r
}

/// Product of `circles` unit circles followed by `axes` free coordinates:
/// `u = (θ_1..θ_c, a_1..a_d) ↦ (cos θ_1, sin θ_1, …, a_1..a_d)`.
struct CirclesWithAxes {
    circles: usize,
    axes: usize,
}

impl ChartFn for CirclesWithAxes {
    fn intrinsic_dim(&self) -> usize {
        self.circles + self.axes
    }

    fn embed_dim(&self) -> usize {
        2 * self.circles + self.axes
    }

    fn eval(&self, u: &[f64]) -> ChartEval {
        let m = self.intrinsic_dim();
        let n = self.embed_dim();
        let mut z = vec![0.0; n];
        let mut jac = vec![0.0; n * m];
        let mut hess = vec![0.0; n * m * m];
        for c in 0..self.circles {
            let (s, co) = u[c].sin_cos();
            z[2 * c] = co;
            z[2 * c + 1] = s;
            jac[(2 * c) * m + c] = -s;
            jac[(2 * c + 1) * m + c] = co;
            hess[((2 * c) * m + c) * m + c] = -co;
            hess[((2 * c + 1) * m + c) * m + c] = -s;
        }
        for d in 0..self.axes {
            let row = 2 * self.circles + d;
            z[row] = u[self.circles + d];
            jac[row * m + self.circles + d] = 1.0;
        }
        ChartEval { z, jac, hess }
    }

    fn canonicalize(&self, u: &mut [f64]) {
        for c in 0..self.circles {
            u[c] = wrap_angle(u[c]);
        }
    }
}

/// Torus of revolution in ℝ³: ring radius `ring`, tube radius `tube`.
struct Torus3d {
    ring: f64,
    tube: f64,
}

impl ChartFn for Torus3d {
    fn intrinsic_dim(&self) -> usize {
        2
    }

    fn embed_dim(&self) -> usize {
        3
    }

    fn eval(&self, u: &[f64]) -> ChartEval {
        let (rr, rt) = (self.ring, self.tube);
        let (s1, c1) = u[0].sin_cos();
        let (s2, c2) = u[1].sin_cos();
        let ring = rr + rt * c2;
        let z = vec![ring * c1, ring * s1, rt * s2];
        // Rows are embedding coordinates, columns parameters (u1, u2).
        let jac = vec![
            -ring * s1, -rt * s2 * c1, //
            ring * c1, -rt * s2 * s1, //
            0.0, rt * c2,
        ];
        let hess = vec![
            // z1: [u1u1, u1u2; u2u1, u2u2]
            -ring * c1, rt * s2 * s1, rt * s2 * s1, -rt * c2 * c1, //
            // z2
            -ring * s1, -rt * s2 * c1, -rt * s2 * c1, -rt * c2 * s1, //
            // z3
            0.0, 0.0, 0.0, -rt * s2,
        ];
        ChartEval { z, jac, hess }
    }

    fn canonicalize(&self, u: &mut [f64]) {
        u[0] = wrap_angle(u[0]);
        u[1] = wrap_angle(u[1]);
    }
}

/// Klein bottle immersed in ℝ⁴:
///
/// ```text
/// z₁ = (a + b cos u₂) cos u₁
/// z₂ = (a + b cos u₂) sin u₁
/// z₃ = b sin u₂ cos(u₁/2)
/// z₄ = b sin u₂ sin(u₁/2)
/// ```
///
/// with the identification `σ(u₁ + 2π, u₂) = σ(u₁, −u₂)`.
struct Klein4d {
    a: f64,
    b: f64,
}

impl ChartFn for Klein4d {
    fn intrinsic_dim(&self) -> usize {
        2
    }

    fn embed_dim(&self) -> usize {
        4
    }

    fn eval(&self, u: &[f64]) -> ChartEval {
        let (a, b) = (self.a, self.b);
        let (s1, c1) = u[0].sin_cos();
        let (s2, c2) = u[1].sin_cos();
        let (sh, ch) = (u[0] / 2.0).sin_cos();
        let ring = a + b * c2;
        let z = vec![ring * c1, ring * s1, b * s2 * ch, b * s2 * sh];
        let jac = vec![
            -ring * s1, -b * s2 * c1, //
            ring * c1, -b * s2 * s1, //
            -0.5 * b * s2 * sh, b * c2 * ch, //
            0.5 * b * s2 * ch, b * c2 * sh,
        ];
        let hess = vec![
            // z1
            -ring * c1, b * s2 * s1, b * s2 * s1, -b * c2 * c1, //
            // z2
            -ring * s1, -b * s2 * c1, -b * s2 * c1, -b * c2 * s1, //
            // z3
            -0.25 * b * s2 * ch, -0.5 * b * c2 * sh, -0.5 * b * c2 * sh, -b * s2 * ch, //
            // z4
            -0.25 * b * s2 * sh, 0.5 * b * c2 * ch, 0.5 * b * c2 * ch, -b * s2 * sh,
        ];
        ChartEval { z, jac, hess }
    }

    fn canonicalize(&self, u: &mut [f64]) {
        // The map is 4π-periodic in u₁ with σ(u₁+2π, u₂) = σ(u₁, −u₂);
        // fold into [0, 2π)².
        let mut u1 = u[0] % (2.0 * TAU);
        if u1 < 0.0 {
            u1 += 2.0 * TAU;
        }
        let mut u2 = u[1];
        if u1 >= TAU {
            u1 -= TAU;
            u2 = -u2;
        }
        u[0] = u1;
        u[1] = wrap_angle(u2);
    }
}

/// Evaluates the Klein-bottle embedding and its derivatives at `(u₁, u₂)`.
pub fn klein_bottle_chart(u1: f64, u2: f64, a: f64, b: f64) -> ChartEval {
    Klein4d { a, b }.eval(&[u1, u2])
}

// ---------------------------------------------------------------------------
// Atlases
// ---------------------------------------------------------------------------

/// Closed-form projector tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyticKind {
    Circle,
    ProductOfCircles,
    CylinderAxis,
    Torus3d,
}

/// Serializable atlas description (kind, dimensions, shape constants).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AtlasDescriptor {
    pub kind: String,
    pub intrinsic_dim: usize,
    pub embed_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub circles: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ring_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tube_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub waist: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lobe: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cloud_resolution: Option<usize>,
    /// Chart parameter boxes, one list of (lo, hi) pairs per chart.
    pub chart_domains: Vec<Vec<(f64, f64)>>,
}

/// Point-cloud sampling of a manifold used to seed chart projections.
#[derive(Clone, Debug)]
pub struct PointCloudSeed {
    /// Embedded points, row-major `[points, N]`.
    pub points: Vec<f64>,
    /// Chart id per point.
    pub chart_ids: Vec<usize>,
    /// Chart coordinates per point, row-major `[points, m]`.
    pub coords: Vec<f64>,
    pub embed_dim: usize,
    pub intrinsic_dim: usize,
}

impl PointCloudSeed {
    pub fn len(&self) -> usize {
        self.chart_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chart_ids.is_empty()
    }

    /// Index of the seed nearest to `w`; exact ties resolve to the lowest
    /// index (deterministic).
    pub fn nearest(&self, w: &[f64]) -> usize {
        let n = self.embed_dim;
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for p in 0..self.len() {
            let d: f64 = (0..n)
                .map(|i| {
                    let t = w[i] - self.points[p * n + i];
                    t * t
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = p;
            }
        }
        best
    }

    /// Writes the cloud as CSV with header `k,u1..um,z1..zN`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let (m, n) = (self.intrinsic_dim, self.embed_dim);
        let mut header = String::from("k");
        for i in 1..=m {
            header.push_str(&format!(",u{i}"));
        }
        for i in 1..=n {
            header.push_str(&format!(",z{i}"));
        }
        writeln!(out, "{header}")?;
        for p in 0..self.len() {
            let mut line = format!("{}", self.chart_ids[p]);
            for i in 0..m {
                line.push_str(&format!(",{}", self.coords[p * m + i]));
            }
            for i in 0..n {
                line.push_str(&format!(",{}", self.points[p * n + i]));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Reads a cloud written by [`PointCloudSeed::write_csv`].
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Artifact("empty point-cloud file".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let m = cols.iter().filter(|c| c.starts_with('u')).count();
        let n = cols.iter().filter(|c| c.starts_with('z')).count();
        if cols.first() != Some(&"k") || m == 0 || n == 0 {
            return Err(Error::Artifact(format!(
                "malformed point-cloud header: {header}"
            )));
        }
        let mut cloud = PointCloudSeed {
            points: Vec::new(),
            chart_ids: Vec::new(),
            coords: Vec::new(),
            embed_dim: n,
            intrinsic_dim: m,
        };
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != 1 + m + n {
                return Err(Error::Artifact(format!(
                    "point-cloud row has {} fields, expected {}",
                    fields.len(),
                    1 + m + n
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Artifact(format!("bad number in point cloud: {s}")))
            };
            cloud.chart_ids.push(
                fields[0]
                    .parse()
                    .map_err(|_| Error::Artifact(format!("bad chart id: {}", fields[0])))?,
            );
            for f in &fields[1..1 + m] {
                cloud.coords.push(parse(f)?);
            }
            for f in &fields[1 + m..] {
                cloud.points.push(parse(f)?);
            }
        }
        Ok(cloud)
    }
}

/// Result of projecting a point onto the manifold.
#[derive(Clone, Debug)]
pub struct ProjectionResult {
    /// Nearest manifold point `z* ∈ ℝ^N`.
    pub z: Vec<f64>,
    /// Chart the solution lives in.
    pub chart_id: usize,
    /// Chart coordinates `u*` of `z*`.
    pub u: Vec<f64>,
    /// `dz*/dw`, row-major `[N, N]`.
    pub jacobian: Vec<f64>,
    /// `‖G(u*, w)‖` at the solution.
    pub residual: f64,
    /// True when the input sat on the medial set and a deterministic
    /// fallback (chart origin, zero Jacobian) was substituted.
    pub degenerate: bool,
}

/// A manifold with its charts, optional closed-form projector, and optional
/// point-cloud seeding for Newton projection.
#[derive(Clone)]
pub struct ManifoldAtlas {
    pub charts: Vec<Chart>,
    pub intrinsic_dim: usize,
    pub embed_dim: usize,
    pub analytic: Option<AnalyticKind>,
    pub cloud: Option<PointCloudSeed>,
    pub descriptor: AtlasDescriptor,
    /// Circle/axis split for the closed-form projectors.
    circles: usize,
    axes: usize,
}

impl ManifoldAtlas {
    fn single_chart(
        map: Arc<dyn ChartFn>,
        domain: Vec<(f64, f64)>,
        periodic: Vec<bool>,
        analytic: Option<AnalyticKind>,
        descriptor: AtlasDescriptor,
        circles: usize,
        axes: usize,
    ) -> Self {
        let intrinsic_dim = map.intrinsic_dim();
        let embed_dim = map.embed_dim();
        ManifoldAtlas {
            charts: vec![Chart {
                id: 0,
                domain,
                periodic,
                map,
            }],
            intrinsic_dim,
            embed_dim,
            analytic,
            cloud: None,
            descriptor,
            circles,
            axes,
        }
    }

    /// Unit circle in ℝ².
    pub fn circle() -> Self {
        let desc = AtlasDescriptor {
            kind: "circle".into(),
            intrinsic_dim: 1,
            embed_dim: 2,
            circles: Some(1),
            axes: Some(0),
            ring_radius: None,
            tube_radius: None,
            waist: None,
            lobe: None,
            cloud_resolution: None,
            chart_domains: vec![vec![(0.0, TAU)]],
        };
        Self::single_chart(
            Arc::new(CirclesWithAxes { circles: 1, axes: 0 }),
            vec![(0.0, TAU)],
            vec![true],
            Some(AnalyticKind::Circle),
            desc,
            1,
            0,
        )
    }

    /// Product of `k` unit circles in ℝ^{2k} (flat torus for k=2).
    pub fn product_of_circles(k: usize) -> Self {
        let desc = AtlasDescriptor {
            kind: "product-of-circles".into(),
            intrinsic_dim: k,
            embed_dim: 2 * k,
            circles: Some(k),
            axes: Some(0),
            ring_radius: None,
            tube_radius: None,
            waist: None,
            lobe: None,
            cloud_resolution: None,
            chart_domains: vec![vec![(0.0, TAU); k]],
        };
        Self::single_chart(
            Arc::new(CirclesWithAxes { circles: k, axes: 0 }),
            vec![(0.0, TAU); k],
            vec![true; k],
            Some(AnalyticKind::ProductOfCircles),
            desc,
            k,
            0,
        )
    }

    /// `circles` unit circles times `axes` unconstrained coordinates
    /// (the axis coordinates pass through projection unchanged).
    ///
    /// `axis_range` bounds the axis chart box (used only for point-cloud
    /// sampling; projection itself never clamps the axis).
    pub fn cylinder(circles: usize, axes: usize, axis_range: (f64, f64)) -> Self {
        let mut domain = vec![(0.0, TAU); circles];
        domain.extend(std::iter::repeat(axis_range).take(axes));
        let mut periodic = vec![true; circles];
        periodic.extend(std::iter::repeat(false).take(axes));
        let desc = AtlasDescriptor {
            kind: "cylinder-axis".into(),
            intrinsic_dim: circles + axes,
            embed_dim: 2 * circles + axes,
            circles: Some(circles),
            axes: Some(axes),
            ring_radius: None,
            tube_radius: None,
            waist: None,
            lobe: None,
            cloud_resolution: None,
            chart_domains: vec![domain.clone()],
        };
        Self::single_chart(
            Arc::new(CirclesWithAxes { circles, axes }),
            domain,
            periodic,
            Some(AnalyticKind::CylinderAxis),
            desc,
            circles,
            axes,
        )
    }

    /// Torus of revolution in ℝ³ (ring radius > tube radius > 0).
    pub fn torus3d(ring: f64, tube: f64) -> Result<Self> {
        if !(ring > tube && tube > 0.0) {
            return Err(Error::Config(format!(
                "torus3d requires ring > tube > 0, got {ring}, {tube}"
            )));
        }
        let desc = AtlasDescriptor {
            kind: "torus3d".into(),
            intrinsic_dim: 2,
            embed_dim: 3,
            circles: None,
            axes: None,
            ring_radius: Some(ring),
            tube_radius: Some(tube),
            waist: None,
            lobe: None,
            cloud_resolution: None,
            chart_domains: vec![vec![(0.0, TAU), (0.0, TAU)]],
        };
        Ok(Self::single_chart(
            Arc::new(Torus3d { ring, tube }),
            vec![(0.0, TAU), (0.0, TAU)],
            vec![true, true],
            Some(AnalyticKind::Torus3d),
            desc,
            0,
            0,
        ))
    }

    /// Klein bottle immersed in ℝ⁴ (waist `a` > lobe `b` > 0), projected by
    /// point-cloud-seeded Newton iteration at the given cloud resolution.
    pub fn klein4d(a: f64, b: f64, cloud_resolution: usize) -> Result<Self> {
        if !(a > b && b > 0.0) {
            return Err(Error::Config(format!(
                "klein4d requires a > b > 0, got {a}, {b}"
            )));
        }
        let desc = AtlasDescriptor {
            kind: "klein4d".into(),
            intrinsic_dim: 2,
            embed_dim: 4,
            circles: None,
            axes: None,
            ring_radius: None,
            tube_radius: None,
            waist: Some(a),
            lobe: Some(b),
            cloud_resolution: Some(cloud_resolution),
            chart_domains: vec![vec![(0.0, TAU), (0.0, TAU)]],
        };
        let mut atlas = Self::single_chart(
            Arc::new(Klein4d { a, b }),
            vec![(0.0, TAU), (0.0, TAU)],
            vec![true, true],
            None,
            desc,
            0,
            0,
        );
        atlas.cloud = Some(build_point_cloud(&atlas, cloud_resolution)?);
        Ok(atlas)
    }

    /// Rebuilds an atlas from its serialized descriptor.
    pub fn from_descriptor(d: &AtlasDescriptor) -> Result<Self> {
        match d.kind.as_str() {
            "circle" => Ok(Self::circle()),
            "product-of-circles" => Ok(Self::product_of_circles(d.intrinsic_dim)),
            "cylinder-axis" => {
                let circles = d
                    .circles
                    .ok_or_else(|| Error::Artifact("cylinder-axis needs circles".into()))?;
                let axes = d
                    .axes
                    .ok_or_else(|| Error::Artifact("cylinder-axis needs axes".into()))?;
                let range = d.chart_domains[0]
                    .get(circles)
                    .copied()
                    .unwrap_or((-1.0, 1.0));
                Ok(Self::cylinder(circles, axes, range))
            }
            "torus3d" => Self::torus3d(
                d.ring_radius
                    .ok_or_else(|| Error::Artifact("torus3d needs ring_radius".into()))?,
                d.tube_radius
                    .ok_or_else(|| Error::Artifact("torus3d needs tube_radius".into()))?,
            ),
            "klein4d" => Self::klein4d(
                d.waist.ok_or_else(|| Error::Artifact("klein4d needs waist".into()))?,
                d.lobe.ok_or_else(|| Error::Artifact("klein4d needs lobe".into()))?,
                d.cloud_resolution.unwrap_or(100),
            ),
            other => Err(Error::Artifact(format!("unknown manifold kind: {other}"))),
        }
    }

    /// Projects `w` onto the manifold (closed form when available,
    /// otherwise point-cloud-seeded Newton), with the IFT Jacobian.
    pub fn project(&self, w: &[f64]) -> Result<ProjectionResult> {
        if self.analytic.is_some() {
            project_analytic(w, self)
        } else {
            project_chart(w, self)
        }
    }

    fn chart(&self, id: usize) -> &Chart {
        &self.charts[id]
    }

    /// Indices of the unconstrained (axis) coordinates of the embedding.
    ///
    /// For product-of-circles-with-axes layouts the first `2·circles`
    /// coordinates are circle pairs and the trailing `axes` coordinates are
    /// free; fully constrained manifolds return an empty list.
    pub fn axis_dims(&self) -> Vec<usize> {
        (2 * self.circles..2 * self.circles + self.axes).collect()
    }
}

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

fn check_input_dim(w: &[f64], atlas: &ManifoldAtlas) -> Result<()> {
    if w.len() != atlas.embed_dim {
        return Err(Error::Config(format!(
            "projection input has dim {}, manifold embeds in dim {}",
            w.len(),
            atlas.embed_dim
        )));
    }
    Ok(())
}

fn degenerate_fallback(atlas: &ManifoldAtlas, chart_id: usize) -> ProjectionResult {
    let chart = atlas.chart(chart_id);
    let u = vec![0.0; atlas.intrinsic_dim];
    let z = chart.eval(&u).z;
    ProjectionResult {
        z,
        chart_id,
        u,
        jacobian: vec![0.0; atlas.embed_dim * atlas.embed_dim],
        residual: 0.0,
        degenerate: true,
    }
}

/// Closed-form nearest-point projection for atlases with an analytic tag.
///
/// Inputs on the medial set (e.g. the center of a circle factor) return the
/// deterministic fallback: chart origin, zero Jacobian, `degenerate` set.
pub fn project_analytic(w: &[f64], atlas: &ManifoldAtlas) -> Result<ProjectionResult> {
    check_input_dim(w, atlas)?;
    let kind = atlas
        .analytic
        .ok_or_else(|| Error::Config("atlas has no analytic projector".into()))?;
    let mut u = vec![0.0; atlas.intrinsic_dim];
    match kind {
        AnalyticKind::Circle | AnalyticKind::ProductOfCircles | AnalyticKind::CylinderAxis => {
            for c in 0..atlas.circles {
                let (x, y) = (w[2 * c], w[2 * c + 1]);
                let r = (x * x + y * y).sqrt();
                if r < DEGENERATE_EPS {
                    return Ok(degenerate_fallback(atlas, 0));
                }
                u[c] = wrap_angle(y.atan2(x));
            }
            for d in 0..atlas.axes {
                u[atlas.circles + d] = w[2 * atlas.circles + d];
            }
        }
        AnalyticKind::Torus3d => {
            let (ring, tube) = (
                atlas.descriptor.ring_radius.unwrap(),
                atlas.descriptor.tube_radius.unwrap(),
            );
            let rho = (w[0] * w[0] + w[1] * w[1]).sqrt();
            if rho < DEGENERATE_EPS {
                // On the torus axis: every tube point is equidistant.
                return Ok(degenerate_fallback(atlas, 0));
            }
            let u1 = wrap_angle(w[1].atan2(w[0]));
            // Signed in-plane distance from the ring circle, out-of-plane z.
            let dr = rho - ring;
            let dz = w[2];
            if (dr * dr + dz * dz).sqrt() < DEGENERATE_EPS {
                // Exactly on the ring circle: nearest tube point ambiguous.
                return Ok(degenerate_fallback(atlas, 0));
            }
            let u2 = wrap_angle(dz.atan2(dr));
            // tube==0 never happens (constructor enforces tube > 0).
            let _ = tube;
            u = vec![u1, u2];
        }
    }
    finish_projection(w, atlas, 0, u)
}

/// Completes a projection at known chart coordinates: canonicalizes `u`,
/// evaluates the chart, and attaches residual + IFT Jacobian.
fn finish_projection(
    w: &[f64],
    atlas: &ManifoldAtlas,
    chart_id: usize,
    mut u: Vec<f64>,
) -> Result<ProjectionResult> {
    let chart = atlas.chart(chart_id);
    chart.map.canonicalize(&mut u);
    let eval = chart.eval(&u);
    let g = stationarity_residual(&eval, w);
    let jacobian = projection_jacobian(&u, chart_id, w, atlas)?;
    Ok(ProjectionResult {
        z: eval.z,
        chart_id,
        u,
        jacobian,
        residual: g,
        degenerate: false,
    })
}

/// `‖G(u, w)‖ = ‖∇_uσᵀ (w − σ(u))‖`.
fn stationarity_residual(eval: &ChartEval, w: &[f64]) -> f64 {
    let n = eval.z.len();
    let m = eval.jac.len() / n;
    let mut norm2 = 0.0;
    for i in 0..m {
        let mut gi = 0.0;
        for nn in 0..n {
            gi -= eval.jac[nn * m + i] * (w[nn] - eval.z[nn]);
        }
        norm2 += gi * gi;
    }
    norm2.sqrt()
}

/// `G` and `∇_u G` at `(u, w)`.
fn newton_system(eval: &ChartEval, w: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let n = eval.z.len();
    let m = eval.jac.len() / n;
    let mut g = vec![0.0; m];
    for i in 0..m {
        for nn in 0..n {
            g[i] -= eval.jac[nn * m + i] * (w[nn] - eval.z[nn]);
        }
    }
    let mut a = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let mut v = 0.0;
            for nn in 0..n {
                v += eval.jac[nn * m + i] * eval.jac[nn * m + j];
                v -= (w[nn] - eval.z[nn]) * eval.hess[(nn * m + i) * m + j];
            }
            a[(i, j)] = v;
        }
    }
    (g, a)
}

/// Projection Jacobian `J = dz*/dw` at a solved projection, via the
/// implicit function theorem:
/// `J = ∇_uσ [∇_uσᵀ∇_uσ − Σ_n (w−σ)_n ∇_uuσ_n]⁻¹ ∇_uσᵀ`.
///
/// Errors when the system matrix is numerically singular (input near the
/// focal/medial set), reporting its condition estimate.
pub fn projection_jacobian(
    u: &[f64],
    chart_id: usize,
    w: &[f64],
    atlas: &ManifoldAtlas,
) -> Result<Vec<f64>> {
    check_input_dim(w, atlas)?;
    let chart = atlas.chart(chart_id);
    let eval = chart.eval(u);
    let n = atlas.embed_dim;
    let m = atlas.intrinsic_dim;
    let (_, a) = newton_system(&eval, w);
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-12 * smax.max(1.0) {
        return Err(Error::Solver(format!(
            "projection Jacobian system singular (condition ~ {:.2e}); \
             input lies near the medial/focal set",
            smax / smin.max(f64::MIN_POSITIVE)
        )));
    }
    // Solve A X = ∇σᵀ (m×N), then J = ∇σ X.
    let lu = a.lu();
    let mut st = DMatrix::<f64>::zeros(m, n);
    for i in 0..m {
        for nn in 0..n {
            st[(i, nn)] = eval.jac[nn * m + i];
        }
    }
    let x = lu
        .solve(&st)
        .ok_or_else(|| Error::Solver("projection Jacobian solve failed".into()))?;
    let mut j = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let mut v = 0.0;
            for i in 0..m {
                v += eval.jac[r * m + i] * x[(i, c)];
            }
            j[r * n + c] = v;
        }
    }
    Ok(j)
}

/// Newton iteration on `G(u, w) = 0` from a seed coordinate.
fn newton_project(
    chart: &Chart,
    w: &[f64],
    u0: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let mut u = u0.to_vec();
    let eval = chart.eval(&u);
    let (mut g, mut a) = newton_system(&eval, w);
    let mut gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    for _ in 0..NEWTON_MAX_ITERS {
        if gnorm < NEWTON_TOL {
            return Ok((u, gnorm));
        }
        let rhs = DMatrix::from_column_slice(g.len(), 1, &g);
        let step = a
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Solver("singular Newton system in projection".into()))?;
        // Damped update: halve the step while the residual grows.
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = u
                .iter()
                .enumerate()
                .map(|(i, ui)| ui - t * step[(i, 0)])
                .collect();
            let te = chart.eval(&trial);
            let (tg, ta) = newton_system(&te, w);
            let tnorm = tg.iter().map(|v| v * v).sum::<f64>().sqrt();
            if tnorm < gnorm || t < 1e-4 {
                u = trial;
                g = tg;
                a = ta;
                gnorm = tnorm;
                break;
            }
            t *= 0.5;
        }
    }
    if gnorm < NEWTON_TOL {
        Ok((u, gnorm))
    } else {
        Err(Error::Solver(format!(
            "projection Newton failed to converge: residual {gnorm:.3e}"
        )))
    }
}

/// Nearest-point projection via point-cloud seeding and per-chart Newton
/// refinement.
///
/// Each chart is seeded from its nearest cloud point; among charts whose
/// Newton solve converges, the result with the smallest distance
/// `‖w − σᵏ(u*)‖` wins (exact ties go to the lower chart id).
pub fn project_chart(w: &[f64], atlas: &ManifoldAtlas) -> Result<ProjectionResult> {
    check_input_dim(w, atlas)?;
    let cloud = atlas
        .cloud
        .as_ref()
        .ok_or_else(|| Error::Config("chart projection requires a point cloud".into()))?;
    let m = atlas.intrinsic_dim;
    let n = atlas.embed_dim;

    let mut best: Option<(f64, usize, Vec<f64>, f64)> = None; // (dist, chart, u, gnorm)
    for chart in &atlas.charts {
        // Nearest seed belonging to this chart.
        let mut seed: Option<usize> = None;
        let mut seed_d = f64::INFINITY;
        for p in 0..cloud.len() {
            if cloud.chart_ids[p] != chart.id {
                continue;
            }
            let d: f64 = (0..n)
                .map(|i| {
                    let t = w[i] - cloud.points[p * n + i];
                    t * t
                })
                .sum();
            if d < seed_d {
                seed_d = d;
                seed = Some(p);
            }
        }
        let Some(p) = seed else { continue };
        let u0 = &cloud.coords[p * m..(p + 1) * m];
        let Ok((u, gnorm)) = newton_project(chart, w, u0) else {
            continue;
        };
        let z = chart.eval(&u).z;
        let dist: f64 = (0..n).map(|i| (w[i] - z[i]).powi(2)).sum::<f64>().sqrt();
        let better = match &best {
            None => true,
            Some((bd, bid, _, _)) => dist < *bd || (dist == *bd && chart.id < *bid),
        };
        if better {
            best = Some((dist, chart.id, u, gnorm));
        }
    }
    let (_, chart_id, u, _) =
        best.ok_or_else(|| Error::Solver("projection Newton converged in no chart".into()))?;
    finish_projection(w, atlas, chart_id, u)
}

/// Samples each chart's parameter box on a uniform grid (`resolution`
/// points per axis; periodic axes exclude the duplicate right endpoint).
pub fn build_point_cloud(atlas: &ManifoldAtlas, resolution: usize) -> Result<PointCloudSeed> {
    if resolution < 2 {
        return Err(Error::Config(format!(
            "point-cloud resolution must be at least 2 per axis, got {resolution}"
        )));
    }
    let m = atlas.intrinsic_dim;
    let n = atlas.embed_dim;
    let mut cloud = PointCloudSeed {
        points: Vec::new(),
        chart_ids: Vec::new(),
        coords: Vec::new(),
        embed_dim: n,
        intrinsic_dim: m,
    };
    for chart in &atlas.charts {
        let axis_values: Vec<Vec<f64>> = chart
            .domain
            .iter()
            .zip(&chart.periodic)
            .map(|(&(lo, hi), &per)| {
                let denom = if per { resolution } else { resolution - 1 } as f64;
                (0..resolution)
                    .map(|i| lo + (hi - lo) * i as f64 / denom)
                    .collect()
            })
            .collect();
        let mut idx = vec![0usize; m];
        loop {
            let u: Vec<f64> = (0..m).map(|i| axis_values[i][idx[i]]).collect();
            let z = chart.eval(&u).z;
            cloud.chart_ids.push(chart.id);
            cloud.coords.extend_from_slice(&u);
            cloud.points.extend_from_slice(&z);
            // Advance the mixed-radix counter.
            let mut axis = 0;
            loop {
                if axis == m {
                    break;
                }
                idx[axis] += 1;
                if idx[axis] < resolution {
                    break;
                }
                idx[axis] = 0;
                axis += 1;
            }
            if axis == m {
                break;
            }
        }
    }
    Ok(cloud)
}

/// Empirical contraction-constant estimate for the projection:
/// `max_i ‖Λ(w_i) − Λ(w_i + δ_i)‖ / ‖δ_i‖` over random probe pairs drawn
/// in the given coordinate box, skipping degenerate projections.
/// Diagnostic only — the bound degrades near the medial set.
pub fn projection_lipschitz_estimate(
    atlas: &ManifoldAtlas,
    box_halfwidth: f64,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream_rng(seed, 0xC0FFEE);
    let n = atlas.embed_dim;
    let mut worst = 0.0f64;
    let mut kept = 0;
    while kept < pairs {
        let w1: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(-box_halfwidth..box_halfwidth))
            .collect();
        let delta: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let w2: Vec<f64> = w1.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let (p1, p2) = match (atlas.project(&w1), atlas.project(&w2)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => continue,
        };
        if p1.degenerate || p2.degenerate {
            continue;
        }
        let dz: f64 = p1
            .z
            .iter()
            .zip(&p2.z)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let dw: f64 = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        if dw > 1e-9 {
            worst = worst.max(dz / dw);
            kept += 1;
        }
    }
    Ok(worst)
}
