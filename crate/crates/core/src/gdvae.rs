//! The variational autoencoder with manifold latent spaces and fixed
//! latent dynamics.
//!
//! A model is a pair of Gaussian heads — encoder `X ↦ η(𝔞(X), σ_e²)` and
//! decoder `z ↦ η(𝔟(z), σ_d²)` — plus a latent evolution map and, when the
//! latent space is a manifold, a [`ManifoldAtlas`] through which every
//! latent code is projected. Training minimizes the three-term objective
//!
//! ```text
//! ℓ = L_RE + L_KL + L_RR
//! L_RE = decoder NLL of x from one latent step applied to encode(X)
//! L_KL = β · KL(q(·|X) ‖ N(0, σ₀² I))
//! L_RR = γ · decoder NLL of x from encode(x)   (no latent step)
//! ```
//!
//! over snapshot pairs `(X, x)` one evolution step apart. Decoder NLL is
//! realized as a weighted mean-square error (weight `1/(2σ_d²)`, reported
//! raw and weighted). The reparameterized sample `w̃ = 𝔞(X) + σ_e ⊙ ξ` flows
//! through the differentiable nearest-point projection, so gradients reach
//! the encoder through the manifold constraint.

use crate::diffcore::{
    activation, adam_step, add, add_const, add_scalar, affine, conv2d, custom_gradient_node,
    exp, linear, mat_const, mul_const, reshape, row_add_const, scale, square, sub_const,
    sum_all, tconv2d, AdamConfig, Activation, NodeId, ParamId, ParamSet, Tape, Tensor,
};
use crate::error::{Error, Result};
use crate::manifold::{AtlasDescriptor, ManifoldAtlas};
use crate::pde_data::SnapshotPairSet;
use crate::rng::stream_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::io::{Read, Write};
use std::rc::Rc;

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

/// One stage of a feed-forward network.
#[derive(Clone, Debug)]
enum Layer {
    /// `y = x Wᵀ + b`.
    Affine { w: ParamId, b: ParamId },
    /// `y = x Wᵀ` (final layers of architectures without output bias).
    Linear { w: ParamId },
    Act(Activation),
    /// `[B, c·h·w] → [B, c, h, w]`.
    ToImage { c: usize, h: usize, w: usize },
    Conv { k: ParamId, stride: usize, pad: usize },
    Tconv { k: ParamId, stride: usize, pad: usize, out_hw: (usize, usize) },
    /// `[B, c, h, w] → [B, c·h·w]`.
    Flatten,
}

/// A feed-forward mean network (MLP or CNN stack) acting on `[B, in_dim]`.
#[derive(Clone, Debug)]
pub struct Net {
    layers: Vec<Layer>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Net {
    /// Appends this network's forward pass to the tape.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, mut x: NodeId) -> Result<NodeId> {
        for layer in &self.layers {
            x = match layer {
                Layer::Affine { w, b } => affine(tape, params, x, *w, *b)?,
                Layer::Linear { w } => linear(tape, params, x, *w)?,
                Layer::Act(kind) => activation(tape, x, *kind),
                Layer::ToImage { c, h, w } => {
                    let b = tape.value(x).shape()[0];
                    reshape(tape, x, vec![b, *c, *h, *w])?
                }
                Layer::Conv { k, stride, pad } => conv2d(tape, params, x, *k, *stride, *pad)?,
                Layer::Tconv {
                    k,
                    stride,
                    pad,
                    out_hw,
                } => tconv2d(tape, params, x, *k, *stride, *pad, *out_hw)?,
                Layer::Flatten => {
                    let shape = tape.value(x).shape().to_vec();
                    let b = shape[0];
                    let rest: usize = shape[1..].iter().product();
                    reshape(tape, x, vec![b, rest])?
                }
            };
        }
        Ok(x)
    }

    /// Evaluates the network on a plain row-major batch (no gradients).
    pub fn eval(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let node = tape.input(x.clone());
        let out = self.forward(&mut tape, params, node)?;
        Ok(tape.value(out).clone())
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Affine { w, b } => {
                    ids.push(*w);
                    ids.push(*b);
                }
                Layer::Linear { w } | Layer::Conv { k: w, .. } | Layer::Tconv { k: w, .. } => {
                    ids.push(*w)
                }
                _ => {}
            }
        }
        ids
    }
}

fn normal_tensor(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            std * x
        })
        .collect();
    Tensor::new(shape, data).expect("shape/data length agree by construction")
}

/// Weight initialization: `std = sqrt(2/fan_in)` before rectifier
/// activations, `sqrt(1/fan_in)` for linear output layers; biases zero.
fn init_affine(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    in_dim: usize,
    out_dim: usize,
    rectified: bool,
    bias: bool,
) -> (ParamId, Option<ParamId>) {
    let std = if rectified {
        (2.0 / in_dim as f64).sqrt()
    } else {
        (1.0 / in_dim as f64).sqrt()
    };
    let w = params.add(normal_tensor(vec![out_dim, in_dim], std, rng));
    let b = bias.then(|| params.add(Tensor::zeros(vec![out_dim])));
    (w, b)
}

/// Builds a fully connected network `dims[0] → … → dims.last()` with the
/// given hidden activation. `final_bias = false` drops the bias of the
/// output layer only.
fn mlp(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    dims: &[usize],
    act: Activation,
    final_bias: bool,
) -> Net {
    let mut layers = Vec::new();
    for i in 0..dims.len() - 1 {
        let last = i == dims.len() - 2;
        let (w, b) = init_affine(params, rng, dims[i], dims[i + 1], !last, !last || final_bias);
        match b {
            Some(b) => layers.push(Layer::Affine { w, b }),
            None => layers.push(Layer::Linear { w }),
        }
        if !last {
            layers.push(Layer::Act(act));
        }
    }
    Net {
        layers,
        in_dim: dims[0],
        out_dim: *dims.last().unwrap(),
    }
}

/// Convolution stage geometry of the two-channel field encoder. The first
/// three stages are fixed; the final stage collapses whatever spatial
/// extent remains to 1×1.
const CONV_STAGES: [(usize, usize, usize, usize, usize); 3] =
    [(2, 10, 3, 3, 1), (10, 20, 3, 3, 1), (20, 40, 2, 2, 1)];
const CONV_FEATURES: usize = 100;

/// Spatial sizes [l, s1, s2, s3, 1] of the conv chain on an `l×l` grid,
/// plus the final-stage kernel size (= s3).
fn conv_chain_sizes(l: usize) -> Result<Vec<usize>> {
    let mut sizes = vec![l];
    let mut s = l;
    for (_, _, k, stride, pad) in CONV_STAGES {
        if s + 2 * pad < k {
            return Err(Error::Config(format!(
                "grid {l} too small for the convolution stack (stage input {s})"
            )));
        }
        s = (s + 2 * pad - k) / stride + 1;
        sizes.push(s);
    }
    if s < 1 {
        return Err(Error::Config(format!("grid {l} collapses before the final stage")));
    }
    sizes.push(1);
    Ok(sizes)
}

fn field_encoder(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    l: usize,
    latent: usize,
) -> Result<Net> {
    let sizes = conv_chain_sizes(l)?;
    let mut layers = vec![Layer::ToImage { c: 2, h: l, w: l }];
    for (in_c, out_c, k, stride, pad) in CONV_STAGES {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let kid = params.add(normal_tensor(vec![out_c, in_c, k, k], std, rng));
        layers.push(Layer::Conv { k: kid, stride, pad });
        layers.push(Layer::Act(Activation::Relu));
    }
    let k_last = sizes[3];
    let in_c = CONV_STAGES[2].1;
    let std = (2.0 / (in_c * k_last * k_last) as f64).sqrt();
    let kid = params.add(normal_tensor(vec![CONV_FEATURES, in_c, k_last, k_last], std, rng));
    layers.push(Layer::Conv { k: kid, stride: 1, pad: 0 });
    layers.push(Layer::Act(Activation::Relu));
    layers.push(Layer::Flatten);
    let (w, b) = init_affine(params, rng, CONV_FEATURES, latent, false, true);
    layers.push(Layer::Affine { w, b: b.unwrap() });
    Ok(Net {
        layers,
        in_dim: 2 * l * l,
        out_dim: latent,
    })
}

fn field_decoder(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    l: usize,
    latent: usize,
) -> Result<Net> {
    let sizes = conv_chain_sizes(l)?;
    let k_last = sizes[3];
    let mut layers = Vec::new();
    let (w, b) = init_affine(params, rng, latent, CONV_FEATURES, true, true);
    layers.push(Layer::Affine { w, b: b.unwrap() });
    layers.push(Layer::Act(Activation::Relu));
    layers.push(Layer::ToImage { c: CONV_FEATURES, h: 1, w: 1 });
    // Mirror of the encoder stack: each stage is the adjoint of the
    // corresponding convolution, with explicit output extents because the
    // strided stages are not size-invertible.
    let mut stages: Vec<(usize, usize, usize, usize, usize, usize)> = vec![(
        CONV_FEATURES,
        CONV_STAGES[2].1,
        k_last,
        1,
        0,
        sizes[3],
    )];
    for (i, (in_c, out_c, k, stride, pad)) in CONV_STAGES.iter().enumerate().rev() {
        stages.push((*out_c, *in_c, *k, *stride, *pad, sizes[i]));
    }
    for (idx, (in_c, out_c, k, stride, pad, out_size)) in stages.iter().enumerate() {
        let last = idx == stages.len() - 1;
        let fan_in = in_c * k * k;
        let std = if last {
            (1.0 / fan_in as f64).sqrt()
        } else {
            (2.0 / fan_in as f64).sqrt()
        };
        let kid = params.add(normal_tensor(vec![*in_c, *out_c, *k, *k], std, rng));
        layers.push(Layer::Tconv {
            k: kid,
            stride: *stride,
            pad: *pad,
            out_hw: (*out_size, *out_size),
        });
        if !last {
            layers.push(Layer::Act(Activation::Relu));
        }
    }
    layers.push(Layer::Flatten);
    Ok(Net {
        layers,
        in_dim: latent,
        out_dim: 2 * l * l,
    })
}

// ---------------------------------------------------------------------------
// Model specification (serializable)
// ---------------------------------------------------------------------------

/// Hidden activation for custom architectures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActKind {
    Relu,
    LeakyRelu { slope: f64 },
}

impl ActKind {
    fn to_activation(self) -> Activation {
        match self {
            ActKind::Relu => Activation::Relu,
            ActKind::LeakyRelu { slope } => Activation::LeakyRelu(slope),
        }
    }
}

/// Named network architectures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArchKind {
    /// `in-400-400-latent` ReLU MLP encoder and mirrored decoder.
    BurgersMlp,
    /// `in-400-400-latent` ReLU MLP with no bias on the output layers.
    PeriodicMlp,
    /// `in-100-500-100-out` MLP with leaky-rectifier activations
    /// (slope 1e−6), for low-dimensional mechanism data.
    DeepMlp,
    /// Single affine layer each way (linear encoder/decoder).
    Linear,
    /// Convolutional encoder over two-channel `l×l` fields with a mirrored
    /// transposed-convolution decoder; `l` is derived from the input dim.
    FieldCnn,
    /// Fully connected with explicit hidden sizes.
    Custom {
        hidden: Vec<usize>,
        activation: ActKind,
        final_bias: bool,
    },
}

/// Encoder noise specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SigmaSpec {
    /// Constant standard deviation (0 disables sampling; log-variance is
    /// then undefined, so a positive β requires σ > 0).
    Fixed { sigma: f64 },
    /// Trainable log-variance network `in → hidden → latent` (ReLU), with
    /// the output bias initialized so the initial std equals `init_sigma`.
    Net { hidden: usize, init_sigma: f64 },
}

/// Latent evolution map specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "kebab-case")]
pub enum LatentMapSpec {
    Identity,
    /// `z ↦ ρ z`, `0 < ρ ≤ 1`.
    Decay { rho: f64 },
    /// `z ↦ z + Δt·e_axis` (0-based axis index).
    Translate { dt: f64, axis: usize },
    /// Rotation by `ω·Δt` in the plane of the first two coordinates; all
    /// other coordinates pass through unchanged.
    Rotate { omega: f64, dt: f64 },
    /// Trainable linear map `z ↦ W z` (initialized at the identity).
    LearnableLinear,
}

/// Complete serializable description of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchKind,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub latent_map: LatentMapSpec,
    /// Latent manifold; `None` leaves the latent space Euclidean.
    #[serde(default)]
    pub manifold: Option<AtlasDescriptor>,
    pub sigma_e: SigmaSpec,
    /// Decoder observation std (fixed scalar).
    pub sigma_d: f64,
}

// ---------------------------------------------------------------------------
// Gaussian heads and latent maps (runtime)
// ---------------------------------------------------------------------------

/// Where a head's variance comes from.
#[derive(Clone, Debug)]
pub enum LogVarSource {
    /// Fixed standard deviation σ (σ ≥ 0; 0 = deterministic head).
    Fixed(f64),
    /// Network producing per-dimension log σ².
    Net(Net),
}

/// Conditional Gaussian: mean network plus a variance source.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub mean: Net,
    pub logvar: LogVarSource,
}

impl GaussianHead {
    /// σ² for a batch, evaluated without gradients.
    pub fn sigma2(&self, params: &ParamSet, x: &Tensor, out_dim: usize) -> Result<Tensor> {
        let b = x.shape()[0];
        match &self.logvar {
            LogVarSource::Fixed(s) => {
                Ok(Tensor::new(vec![b, out_dim], vec![s * s; b * out_dim])?)
            }
            LogVarSource::Net(net) => {
                let lv = net.eval(params, x)?;
                Ok(Tensor::new(
                    vec![b, out_dim],
                    lv.data().iter().map(|v| v.exp()).collect(),
                )?)
            }
        }
    }
}

/// Runtime latent evolution map (parameters, if any, live in the model's
/// [`ParamSet`]).
#[derive(Clone, Debug)]
pub enum LatentMap {
    Identity,
    Decay { rho: f64 },
    Translate { dt: f64, axis: usize },
    Rotate { omega: f64, dt: f64 },
    LearnableLinear { w: ParamId },
}

impl LatentMap {
    pub fn spec(&self) -> LatentMapSpec {
        match self {
            LatentMap::Identity => LatentMapSpec::Identity,
            LatentMap::Decay { rho } => LatentMapSpec::Decay { rho: *rho },
            LatentMap::Translate { dt, axis } => LatentMapSpec::Translate {
                dt: *dt,
                axis: *axis,
            },
            LatentMap::Rotate { omega, dt } => LatentMapSpec::Rotate {
                omega: *omega,
                dt: *dt,
            },
            LatentMap::LearnableLinear { .. } => LatentMapSpec::LearnableLinear,
        }
    }

    fn rotation_matrix(omega: f64, dt: f64, n: usize) -> Tensor {
        let theta = omega * dt;
        let (s, c) = theta.sin_cos();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        m[0] = c;
        m[1] = -s;
        m[n] = s;
        m[n + 1] = c;
        Tensor::new(vec![n, n], m).expect("square rotation matrix")
    }

    /// Appends the map to the tape (differentiable path).
    pub fn apply_node(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        z: NodeId,
    ) -> Result<NodeId> {
        let n = tape.value(z).shape()[1];
        match self {
            LatentMap::Identity => Ok(z),
            LatentMap::Decay { rho } => Ok(scale(tape, z, *rho)),
            LatentMap::Translate { dt, axis } => {
                let mut v = vec![0.0; n];
                v[*axis] = *dt;
                row_add_const(tape, z, &Tensor::vector(v))
            }
            LatentMap::Rotate { omega, dt } => {
                mat_const(tape, z, &Self::rotation_matrix(*omega, *dt, n))
            }
            LatentMap::LearnableLinear { w } => linear(tape, params, z, *w),
        }
    }

    /// Applies the map to one latent code in place (inference path).
    pub fn apply_vec(&self, params: &ParamSet, z: &mut [f64]) {
        match self {
            LatentMap::Identity => {}
            LatentMap::Decay { rho } => z.iter_mut().for_each(|v| *v *= rho),
            LatentMap::Translate { dt, axis } => z[*axis] += dt,
            LatentMap::Rotate { omega, dt } => {
                let theta = omega * dt;
                let (s, c) = theta.sin_cos();
                let (z0, z1) = (z[0], z[1]);
                z[0] = c * z0 - s * z1;
                z[1] = s * z0 + c * z1;
            }
            LatentMap::LearnableLinear { w } => {
                let wv = params.value(*w);
                let n = z.len();
                let mut out = vec![0.0; n];
                for (i, o) in out.iter_mut().enumerate() {
                    for (j, zj) in z.iter().enumerate() {
                        *o += wv.data()[i * n + j] * zj;
                    }
                }
                z.copy_from_slice(&out);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// A trained or trainable model instance. Immutable once training is done;
/// inference methods take `&self` and are safe to call concurrently.
#[derive(Clone)]
pub struct GDVAEModel {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub encoder: GaussianHead,
    pub decoder: GaussianHead,
    pub latent_map: LatentMap,
    pub manifold: Option<ManifoldAtlas>,
}

/// Result of encoding one observation.
#[derive(Clone, Debug)]
pub struct Encoding {
    /// Encoder mean `w = 𝔞(X)` (pre-projection).
    pub w: Vec<f64>,
    /// Encoder variances σ_e² per latent dimension.
    pub sigma2: Vec<f64>,
    /// Latent code: projection of the (sampled) embedding when a manifold
    /// is attached, the embedding itself otherwise.
    pub z: Vec<f64>,
}

impl GDVAEModel {
    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Encoder forward on a batch; samples the reparameterized embedding
    /// when `rng` is supplied (and σ_e > 0), then projects.
    /// Returns `(w, σ_e², z)`.
    pub fn encode_batch(
        &self,
        x: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let n = self.latent_dim();
        let w = self.encoder.mean.eval(&self.params, x)?;
        let sigma2 = self.encoder.sigma2(&self.params, x, n)?;
        let b = w.shape()[0];
        let mut z = w.data().to_vec();
        if let Some(r) = rng.as_deref_mut() {
            for (v, s2) in z.iter_mut().zip(sigma2.data()) {
                if *s2 > 0.0 {
                    let xi: f64 = StandardNormal.sample(r);
                    *v += s2.sqrt() * xi;
                }
            }
        }
        if let Some(atlas) = &self.manifold {
            let mut out = vec![0.0; b * n];
            for row in 0..b {
                let p = atlas.project(&z[row * n..(row + 1) * n])?;
                out[row * n..(row + 1) * n].copy_from_slice(&p.z);
            }
            z = out;
        }
        Ok((w, sigma2, Tensor::new(vec![b, n], z)?))
    }

    /// Encodes a single observation. With `rng`, draws one reparameterized
    /// sample before projecting; without, follows the mean path.
    pub fn encode(&self, x: &[f64], rng: Option<&mut ChaCha8Rng>) -> Result<Encoding> {
        if x.len() != self.input_dim() {
            return Err(Error::Config(format!(
                "encode input has {} values, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        let (w, sigma2, z) = self.encode_batch(&xt, rng)?;
        Ok(Encoding {
            w: w.data().to_vec(),
            sigma2: sigma2.data().to_vec(),
            z: z.data().to_vec(),
        })
    }

    /// Decoder mean for a batch of latent codes.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.mean.eval(&self.params, z)
    }

    /// One latent evolution step in place: apply the map, then re-project
    /// when a manifold is attached (a no-op for maps that stay on the
    /// manifold; a safety net otherwise).
    pub fn latent_step_vec(&self, z: &mut [f64]) -> Result<()> {
        self.latent_map.apply_vec(&self.params, z);
        if let Some(atlas) = &self.manifold {
            if !matches!(self.latent_map, LatentMap::Identity) {
                let p = atlas.project(z)?;
                z.copy_from_slice(&p.z);
            }
        }
        Ok(())
    }

    /// Mean-path predictions at horizons `0..=steps`: encode once without
    /// sampling, step the latent code, decode every intermediate state.
    /// Entry `k` of the result corresponds to `k` latent steps (entry 0 is
    /// the plain reconstruction).
    pub fn predict_horizons(&self, x0: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
        let (_, _, z0) = self.encode_batch(x0, None)?;
        let b = z0.shape()[0];
        let n = self.latent_dim();
        let mut z = z0.data().to_vec();
        let mut out = Vec::with_capacity(steps + 1);
        out.push(self.decode_batch(&z0)?);
        for _ in 0..steps {
            for row in 0..b {
                self.latent_step_vec(&mut z[row * n..(row + 1) * n])?;
            }
            let zt = Tensor::new(vec![b, n], z.clone())?;
            out.push(self.decode_batch(&zt)?);
        }
        Ok(out)
    }

    /// Largest constraint residual (distance to the manifold) over the
    /// rows of a latent batch; 0 when the latent space is Euclidean.
    pub fn constraint_residual(&self, z: &Tensor) -> Result<f64> {
        let Some(atlas) = &self.manifold else {
            return Ok(0.0);
        };
        let n = self.latent_dim();
        let mut worst = 0.0f64;
        for row in z.data().chunks(n) {
            let p = atlas.project(row)?;
            let d: f64 = row
                .iter()
                .zip(&p.z)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(d);
        }
        Ok(worst)
    }
}

/// Multi-step prediction for a single observation: `[x̂₁ … x̂_n]`, where
/// `x̂_k` decodes the latent code after `k` evolution steps.
pub fn predict_multistep(model: &GDVAEModel, x0: &[f64], n: usize) -> Result<Vec<Vec<f64>>> {
    let xt = Tensor::new(vec![1, x0.len()], x0.to_vec())?;
    let all = model.predict_horizons(&xt, n)?;
    Ok(all[1..].iter().map(|t| t.data().to_vec()).collect())
}

// ---------------------------------------------------------------------------
// KL divergence
// ---------------------------------------------------------------------------

/// KL divergence of `N(μ, diag σ²)` from `N(0, σ₀² I)`:
/// `Σᵢ [ln(σ₀/σᵢ) + (σᵢ² + μᵢ²)/(2σ₀²) − ½]`. Always ≥ 0, and 0 exactly
/// when μ = 0 and σ = σ₀.
pub fn kl_diag_gaussian(mu: &[f64], sigma2: &[f64], sigma0_2: f64) -> f64 {
    mu.iter()
        .zip(sigma2)
        .map(|(m, s2)| 0.5 * (sigma0_2 / s2).ln() + (s2 + m * m) / (2.0 * sigma0_2) - 0.5)
        .sum()
}

/// Where the KL term acts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    /// On the full pre-projection embedding (default).
    PreProjection,
    /// Only on the unconstrained axis coordinates of the latent manifold
    /// (no-op for fully constrained or Euclidean latents).
    AxisOnly,
}

/// 0/1 mask over latent dimensions selecting where KL applies.
pub fn kl_mask(model: &GDVAEModel, mode: KlMode) -> Vec<f64> {
    let n = model.latent_dim();
    match (mode, &model.manifold) {
        (KlMode::PreProjection, _) | (KlMode::AxisOnly, None) => vec![1.0; n],
        (KlMode::AxisOnly, Some(atlas)) => {
            let mut mask = vec![0.0; n];
            for d in atlas.axis_dims() {
                mask[d] = 1.0;
            }
            mask
        }
    }
}

// ---------------------------------------------------------------------------
// Training configuration and loss
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub beta: f64,
    pub gamma: f64,
    /// Prior standard deviation σ₀.
    pub sigma0: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Decoder NLL weight (`1/(2σ_d²)` for a Gaussian observation model).
    pub mse_weight: f64,
    pub kl_mode: KlMode,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma: 0.5,
            sigma0: 1.0,
            lr: 1e-3,
            batch: 100,
            epochs: 100,
            seed: 0,
            mse_weight: 1e-4,
            kl_mode: KlMode::PreProjection,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("beta and gamma must be non-negative".into()));
        }
        if self.sigma0 <= 0.0 {
            return Err(Error::Config("sigma0 must be positive".into()));
        }
        if self.lr <= 0.0 || self.mse_weight <= 0.0 {
            return Err(Error::Config("lr and mse_weight must be positive".into()));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loss components of one batch, as per-sample means. `l_re`, `l_kl`,
/// `l_rr` carry their weights (mse weight, β, γ); `mse_re`/`mse_rr` are the
/// raw squared-error sums per sample for reporting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_re: f64,
    pub l_kl: f64,
    pub l_rr: f64,
    pub total: f64,
    pub mse_re: f64,
    pub mse_rr: f64,
}

/// Differentiable nearest-point projection of each row, spliced into the
/// tape with the implicit-Jacobian backward rule.
fn project_node(tape: &mut Tape, x: NodeId, atlas: &ManifoldAtlas) -> Result<NodeId> {
    let jac_store: Rc<RefCell<Vec<f64>>> = Rc::new(RefCell::new(Vec::new()));
    let js = Rc::clone(&jac_store);
    custom_gradient_node(
        tape,
        x,
        move |w: &Tensor| {
            let (b, n) = (w.shape()[0], w.shape()[1]);
            let mut out = vec![0.0; b * n];
            let mut jacs = vec![0.0; b * n * n];
            for row in 0..b {
                let p = atlas.project(&w.data()[row * n..(row + 1) * n])?;
                out[row * n..(row + 1) * n].copy_from_slice(&p.z);
                jacs[row * n * n..(row + 1) * n * n].copy_from_slice(&p.jacobian);
            }
            *js.borrow_mut() = jacs;
            Tensor::new(vec![b, n], out)
        },
        Box::new(move |g: &Tensor| {
            let (b, n) = (g.shape()[0], g.shape()[1]);
            let jacs = jac_store.borrow();
            let mut dx = vec![0.0; b * n];
            for row in 0..b {
                let jac = &jacs[row * n * n..(row + 1) * n * n];
                let gr = &g.data()[row * n..(row + 1) * n];
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, gj) in gr.iter().enumerate() {
                        // dw = Jᵀ g with J = dz*/dw.
                        acc += jac[j * n + i] * gj;
                    }
                    dx[row * n + i] = acc;
                }
            }
            Tensor::new(vec![b, n], dx).expect("gradient shape matches input")
        }),
    )
}

fn tile_rows(row: &[f64], batch: usize) -> Tensor {
    let mut data = Vec::with_capacity(row.len() * batch);
    for _ in 0..batch {
        data.extend_from_slice(row);
    }
    Tensor::new(vec![batch, row.len()], data).expect("tile shape consistent")
}

struct BuiltLoss {
    tape: Tape,
    total: NodeId,
    breakdown: LossBreakdown,
}

/// One encode→(step)→decode pass contributing a weighted-MSE term.
/// Returns `(loss_node, raw_sse_value)`.
#[allow(clippy::too_many_arguments)]
fn reconstruction_term(
    model: &GDVAEModel,
    tape: &mut Tape,
    x_in: NodeId,
    target: &Tensor,
    take_latent_step: bool,
    weight: f64,
    noise: Option<&Tensor>,
    lv_node: Option<NodeId>,
) -> Result<(NodeId, f64, NodeId)> {
    let params = &model.params;
    let w = model.encoder.mean.forward(tape, params, x_in)?;
    // Reparameterized sample w̃ = w + σ_e ⊙ ξ.
    let w_tilde = match (noise, &model.encoder.logvar, lv_node) {
        (Some(xi), LogVarSource::Fixed(s), _) if *s > 0.0 => {
            let scaled = Tensor::new(
                xi.shape().to_vec(),
                xi.data().iter().map(|v| v * s).collect(),
            )?;
            add_const(tape, w, &scaled)?
        }
        (Some(xi), LogVarSource::Net(_), Some(lv)) => {
            let half = scale(tape, lv, 0.5);
            let sigma = exp(tape, half);
            let noise_term = mul_const(tape, sigma, xi)?;
            add(tape, w, noise_term)?
        }
        _ => w,
    };
    let z = match &model.manifold {
        Some(atlas) => project_node(tape, w_tilde, atlas)?,
        None => w_tilde,
    };
    let z_next = if take_latent_step {
        let stepped = model.latent_map.apply_node(tape, params, z)?;
        match (&model.manifold, &model.latent_map) {
            (Some(atlas), map) if !matches!(map, LatentMap::Identity) => {
                project_node(tape, stepped, atlas)?
            }
            _ => stepped,
        }
    } else {
        z
    };
    let xhat = model.decoder.mean.forward(tape, params, z_next)?;
    let diff = sub_const(tape, xhat, target)?;
    let sq = square(tape, diff);
    let sse = sum_all(tape, sq);
    let sse_value = tape.value(sse).item();
    let term = scale(tape, sse, weight);
    Ok((term, sse_value, w))
}

/// Builds the full objective for one batch on a fresh tape. `rng` supplies
/// the reparameterization draws; omit it (or set σ_e = 0) for the
/// deterministic mean path.
fn build_loss(
    model: &GDVAEModel,
    config: &TrainingConfig,
    x_first: &Tensor,
    x_second: &Tensor,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<BuiltLoss> {
    let b = x_first.shape()[0];
    let n = model.latent_dim();
    let params = &model.params;
    let mut tape = Tape::new();

    let sampling = match &model.encoder.logvar {
        LogVarSource::Fixed(s) => *s > 0.0,
        LogVarSource::Net(_) => true,
    } && rng.is_some();
    let draw_noise = |rng: &mut Option<&mut ChaCha8Rng>| -> Option<Tensor> {
        if !sampling {
            return None;
        }
        let r = rng.as_deref_mut().expect("sampling implies rng");
        Some(Tensor::new(
            vec![b, n],
            (0..b * n)
                .map(|_| StandardNormal.sample(r))
                .collect::<Vec<f64>>(),
        ).expect("noise shape consistent"))
    };

    if config.beta > 0.0 {
        if let LogVarSource::Fixed(s) = &model.encoder.logvar {
            if *s <= 0.0 {
                return Err(Error::Config(
                    "KL term undefined for zero encoder std; set beta = 0 or sigma_e > 0"
                        .into(),
                ));
            }
        }
    }

    let x_node = tape.input(x_first.clone());
    // Trainable log-variance, evaluated once on the inputs (used by both
    // the KL term and the reparameterization).
    let lv_node = match &model.encoder.logvar {
        LogVarSource::Net(net) if config.beta > 0.0 || sampling => {
            Some(net.forward(&mut tape, params, x_node)?)
        }
        _ => None,
    };

    let noise_re = draw_noise(&mut rng);
    let per_sample_weight = config.mse_weight / b as f64;
    let (re_node, re_sse, w_node) = reconstruction_term(
        model,
        &mut tape,
        x_node,
        x_second,
        true,
        per_sample_weight,
        noise_re.as_ref(),
        lv_node,
    )?;

    let mut total = re_node;
    let mut l_kl = 0.0;

    if config.beta > 0.0 {
        let mask = kl_mask(model, config.kl_mode);
        let n_mask: f64 = mask.iter().sum();
        if n_mask > 0.0 {
            let mask_t = tile_rows(&mask, b);
            let s0_2 = config.sigma0 * config.sigma0;
            let w_sq = square(&mut tape, w_node);
            let w_sq_masked = mul_const(&mut tape, w_sq, &mask_t)?;
            let sum_w_sq = sum_all(&mut tape, w_sq_masked);
            let kl_node = match (&model.encoder.logvar, lv_node) {
                (LogVarSource::Fixed(s), _) => {
                    // Per masked dimension: ln(σ₀/σ) + σ²/(2σ₀²) − ½.
                    let c = (config.sigma0 / s).ln() + s * s / (2.0 * s0_2) - 0.5;
                    let quad = scale(&mut tape, sum_w_sq, 1.0 / (2.0 * s0_2));
                    add_scalar(&mut tape, quad, b as f64 * n_mask * c)
                }
                (LogVarSource::Net(_), Some(lv)) => {
                    let lv_masked = mul_const(&mut tape, lv, &mask_t)?;
                    let sum_lv = sum_all(&mut tape, lv_masked);
                    let neg_half_lv = scale(&mut tape, sum_lv, -0.5);
                    let elv = exp(&mut tape, lv);
                    let elv_masked = mul_const(&mut tape, elv, &mask_t)?;
                    let sum_elv = sum_all(&mut tape, elv_masked);
                    let quad_in = add(&mut tape, sum_elv, sum_w_sq)?;
                    let quad = scale(&mut tape, quad_in, 1.0 / (2.0 * s0_2));
                    let partial = add(&mut tape, neg_half_lv, quad)?;
                    let c = 0.5 * s0_2.ln() - 0.5;
                    add_scalar(&mut tape, partial, b as f64 * n_mask * c)
                }
                (LogVarSource::Net(_), None) => unreachable!("lv node built when beta > 0"),
            };
            let kl_scaled = scale(&mut tape, kl_node, config.beta / b as f64);
            l_kl = tape.value(kl_scaled).item();
            total = add(&mut tape, total, kl_scaled)?;
        }
    }

    let mut l_rr = 0.0;
    let mut rr_sse = 0.0;
    if config.gamma > 0.0 {
        let y_node = tape.input(x_second.clone());
        let lv_rr = match &model.encoder.logvar {
            LogVarSource::Net(net) if sampling => {
                Some(net.forward(&mut tape, params, y_node)?)
            }
            _ => None,
        };
        let noise_rr = draw_noise(&mut rng);
        let (rr_node, sse, _) = reconstruction_term(
            model,
            &mut tape,
            y_node,
            x_second,
            false,
            config.gamma * per_sample_weight,
            noise_rr.as_ref(),
            lv_rr,
        )?;
        rr_sse = sse;
        l_rr = tape.value(rr_node).item();
        total = add(&mut tape, total, rr_node)?;
    }

    let l_re = tape.value(re_node).item();
    let breakdown = LossBreakdown {
        l_re,
        l_kl,
        l_rr,
        total: tape.value(total).item(),
        mse_re: re_sse / b as f64,
        mse_rr: rr_sse / b as f64,
    };
    Ok(BuiltLoss {
        tape,
        total,
        breakdown,
    })
}

/// Evaluates the training objective on a batch without touching gradients.
/// `X` holds the early snapshots, `x` the late ones; `rng` supplies the
/// reparameterization sample (pass `None` for the deterministic path).
pub fn elbo_loss(
    x_first: &Tensor,
    x_second: &Tensor,
    model: &GDVAEModel,
    config: &TrainingConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossBreakdown> {
    config.validate()?;
    Ok(build_loss(model, config, x_first, x_second, rng)?.breakdown)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Per-epoch mean loss components (per-sample means across the epoch).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_re: f64,
    pub l_kl: f64,
    pub l_rr: f64,
    pub total: f64,
}

pub type TrainingHistory = Vec<EpochStats>;

/// Writes history as CSV with header `epoch,L_RE,L_KL,L_RR,total`.
pub fn write_history_csv<W: Write>(history: &[EpochStats], out: &mut W) -> Result<()> {
    writeln!(out, "epoch,L_RE,L_KL,L_RR,total")?;
    write_history_rows(history, out)
}

/// Appends history rows without the header — for extending the history
/// file of a resumed run in the [`write_history_csv`] format.
pub fn write_history_rows<W: Write>(history: &[EpochStats], out: &mut W) -> Result<()> {
    for e in history {
        writeln!(
            out,
            "{},{},{},{},{}",
            e.epoch, e.l_re, e.l_kl, e.l_rr, e.total
        )?;
    }
    Ok(())
}

fn gather_rows(set: &SnapshotPairSet, idx: &[usize], second: bool) -> Tensor {
    let d = set.dim;
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(if second {
            set.second_row(i)
        } else {
            set.first_row(i)
        });
    }
    Tensor::new(vec![idx.len(), d], data).expect("gathered rows conform")
}

/// Minibatch Adam on the three-term objective, one reparameterized sample
/// per datum per step. Deterministic given `config.seed`. Returns per-epoch
/// loss components; a non-finite loss aborts with a diagnostic naming the
/// offending term.
pub fn train(
    model: &mut GDVAEModel,
    pairs: &SnapshotPairSet,
    config: &TrainingConfig,
) -> Result<TrainingHistory> {
    train_range(model, pairs, config, 0, config.epochs)
}

/// Seed streams for the per-epoch shuffle and noise RNGs; the epoch index
/// occupies the low 32 bits so every epoch is independently derivable.
const SHUFFLE_STREAM: u64 = 101 << 32;
const NOISE_STREAM: u64 = 102 << 32;

/// Runs epochs `start_epoch..end_epoch` of the training schedule. Each
/// epoch derives its shuffle and noise streams from `(seed, epoch)`, so a
/// run split across calls — train, checkpoint, reload, continue — matches
/// the uninterrupted run bit-for-bit, provided the optimizer state is
/// carried across the break (see [`save_training_state`]).
pub fn train_range(
    model: &mut GDVAEModel,
    pairs: &SnapshotPairSet,
    config: &TrainingConfig,
    start_epoch: usize,
    end_epoch: usize,
) -> Result<TrainingHistory> {
    config.validate()?;
    if start_epoch > end_epoch {
        return Err(Error::Config(format!(
            "epoch range {start_epoch}..{end_epoch} is reversed"
        )));
    }
    if pairs.is_empty() {
        return Err(Error::Config("training needs a non-empty pair set".into()));
    }
    if pairs.dim != model.input_dim() {
        return Err(Error::Config(format!(
            "pair dimension {} does not match model input {}",
            pairs.dim,
            model.input_dim()
        )));
    }
    let m = pairs.len();
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut indices: Vec<usize> = (0..m).collect();
    let mut history = Vec::with_capacity(end_epoch - start_epoch);

    for epoch in start_epoch..end_epoch {
        let mut shuffle_rng = stream_rng(config.seed, SHUFFLE_STREAM | epoch as u64);
        let mut noise_rng = stream_rng(config.seed, NOISE_STREAM | epoch as u64);
        indices.iter_mut().enumerate().for_each(|(i, v)| *v = i);
        // Fisher-Yates shuffle.
        for i in (1..m).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        let mut sums = LossBreakdown::default();
        for chunk in indices.chunks(config.batch) {
            let x_first = gather_rows(pairs, chunk, false);
            let x_second = gather_rows(pairs, chunk, true);
            model.params.zero_grad();
            let built = build_loss(model, config, &x_first, &x_second, Some(&mut noise_rng))?;
            let bd = built.breakdown;
            if !bd.total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}: L_RE={:.6e}, L_KL={:.6e}, L_RR={:.6e}",
                    bd.l_re, bd.l_kl, bd.l_rr
                )));
            }
            built.tape.backward(built.total, &mut model.params)?;
            adam_step(&mut model.params, &adam)?;
            let wgt = chunk.len() as f64;
            sums.l_re += bd.l_re * wgt;
            sums.l_kl += bd.l_kl * wgt;
            sums.l_rr += bd.l_rr * wgt;
            sums.total += bd.total * wgt;
        }
        history.push(EpochStats {
            epoch,
            l_re: sums.l_re / m as f64,
            l_kl: sums.l_kl / m as f64,
            l_rr: sums.l_rr / m as f64,
            total: sums.total / m as f64,
        });
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Architecture construction
// ---------------------------------------------------------------------------

/// Builds a model from its specification; `seed` drives weight
/// initialization only.
pub fn build_architecture(spec: &ModelSpec, seed: u64) -> Result<GDVAEModel> {
    if spec.input_dim == 0 || spec.latent_dim == 0 {
        return Err(Error::Config("input and latent dims must be positive".into()));
    }
    if spec.sigma_d <= 0.0 {
        return Err(Error::Config("sigma_d must be positive".into()));
    }
    match &spec.latent_map {
        LatentMapSpec::Decay { rho } if !(*rho > 0.0 && *rho <= 1.0) => {
            return Err(Error::Config(format!("decay factor {rho} outside (0, 1]")));
        }
        LatentMapSpec::Translate { axis, .. } if *axis >= spec.latent_dim => {
            return Err(Error::Config(format!(
                "translation axis {axis} outside latent dim {}",
                spec.latent_dim
            )));
        }
        LatentMapSpec::Rotate { .. } if spec.latent_dim < 2 => {
            return Err(Error::Config("rotation needs at least 2 latent dims".into()));
        }
        _ => {}
    }

    let manifold = spec
        .manifold
        .as_ref()
        .map(ManifoldAtlas::from_descriptor)
        .transpose()?;
    if let Some(atlas) = &manifold {
        if atlas.embed_dim != spec.latent_dim {
            return Err(Error::Config(format!(
                "manifold embeds in {} dims but latent dim is {}",
                atlas.embed_dim, spec.latent_dim
            )));
        }
    }

    let mut params = ParamSet::new();
    let mut rng = stream_rng(seed, 7);
    let (d, n) = (spec.input_dim, spec.latent_dim);

    let (enc_mean, dec_mean) = match &spec.arch {
        ArchKind::BurgersMlp => (
            mlp(&mut params, &mut rng, &[d, 400, 400, n], Activation::Relu, true),
            mlp(&mut params, &mut rng, &[n, 400, 400, d], Activation::Relu, true),
        ),
        ArchKind::PeriodicMlp => (
            mlp(&mut params, &mut rng, &[d, 400, 400, n], Activation::Relu, false),
            mlp(&mut params, &mut rng, &[n, 400, 400, d], Activation::Relu, false),
        ),
        ArchKind::DeepMlp => (
            mlp(
                &mut params,
                &mut rng,
                &[d, 100, 500, 100, n],
                Activation::LeakyRelu(1e-6),
                true,
            ),
            mlp(
                &mut params,
                &mut rng,
                &[n, 100, 500, 100, d],
                Activation::LeakyRelu(1e-6),
                true,
            ),
        ),
        ArchKind::Linear => (
            mlp(&mut params, &mut rng, &[d, n], Activation::Relu, true),
            mlp(&mut params, &mut rng, &[n, d], Activation::Relu, true),
        ),
        ArchKind::FieldCnn => {
            let l2 = d / 2;
            let l = (l2 as f64).sqrt().round() as usize;
            if 2 * l * l != d {
                return Err(Error::Config(format!(
                    "input dim {d} is not 2·l² for any integer grid size l"
                )));
            }
            (
                field_encoder(&mut params, &mut rng, l, n)?,
                field_decoder(&mut params, &mut rng, l, n)?,
            )
        }
        ArchKind::Custom {
            hidden,
            activation,
            final_bias,
        } => {
            let mut enc_dims = vec![d];
            enc_dims.extend_from_slice(hidden);
            enc_dims.push(n);
            let mut dec_dims = vec![n];
            dec_dims.extend(hidden.iter().rev());
            dec_dims.push(d);
            (
                mlp(
                    &mut params,
                    &mut rng,
                    &enc_dims,
                    activation.to_activation(),
                    *final_bias,
                ),
                mlp(
                    &mut params,
                    &mut rng,
                    &dec_dims,
                    activation.to_activation(),
                    *final_bias,
                ),
            )
        }
    };

    let enc_logvar = match &spec.sigma_e {
        SigmaSpec::Fixed { sigma } => {
            if *sigma < 0.0 {
                return Err(Error::Config("sigma_e must be non-negative".into()));
            }
            LogVarSource::Fixed(*sigma)
        }
        SigmaSpec::Net { hidden, init_sigma } => {
            if *init_sigma <= 0.0 {
                return Err(Error::Config("init_sigma must be positive".into()));
            }
            let net = mlp(
                &mut params,
                &mut rng,
                &[d, *hidden, n],
                Activation::Relu,
                true,
            );
            // Shift the output bias so the initial std is init_sigma.
            let last_bias = *net.param_ids().last().expect("mlp has parameters");
            let lv0 = 2.0 * init_sigma.ln();
            for v in params.get_mut(last_bias).value.data_mut() {
                *v = lv0;
            }
            LogVarSource::Net(net)
        }
    };

    let latent_map = match &spec.latent_map {
        LatentMapSpec::Identity => LatentMap::Identity,
        LatentMapSpec::Decay { rho } => LatentMap::Decay { rho: *rho },
        LatentMapSpec::Translate { dt, axis } => LatentMap::Translate {
            dt: *dt,
            axis: *axis,
        },
        LatentMapSpec::Rotate { omega, dt } => LatentMap::Rotate {
            omega: *omega,
            dt: *dt,
        },
        LatentMapSpec::LearnableLinear => {
            let mut eye = vec![0.0; n * n];
            for i in 0..n {
                eye[i * n + i] = 1.0;
            }
            let w = params.add(Tensor::new(vec![n, n], eye)?);
            LatentMap::LearnableLinear { w }
        }
    };

    Ok(GDVAEModel {
        spec: spec.clone(),
        encoder: GaussianHead {
            mean: enc_mean,
            logvar: enc_logvar,
        },
        decoder: GaussianHead {
            mean: dec_mean,
            logvar: LogVarSource::Fixed(spec.sigma_d),
        },
        latent_map,
        manifold,
        params,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const MODEL_MAGIC: &[u8; 6] = b"GDVAE1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    shapes: Vec<Vec<usize>>,
}

/// Serializes a model: magic, JSON header (spec + parameter shapes), then
/// every parameter tensor in declaration order as 64-bit little-endian.
pub fn save_model<W: Write>(model: &GDVAEModel, out: &mut W) -> Result<()> {
    out.write_all(MODEL_MAGIC)?;
    let header = CheckpointHeader {
        spec: model.spec.clone(),
        shapes: model
            .params
            .iter()
            .map(|(_, p)| p.value.shape().to_vec())
            .collect(),
    };
    let hjson = serde_json::to_vec(&header)
        .map_err(|e| Error::Artifact(format!("checkpoint header encode failed: {e}")))?;
    out.write_all(&(hjson.len() as u64).to_le_bytes())?;
    out.write_all(&hjson)?;
    for (_, p) in model.params.iter() {
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads a model saved by [`save_model`]; the architecture is rebuilt from
/// the stored spec and the parameter tensors are restored in order.
pub fn load_model<R: Read>(input: &mut R) -> Result<GDVAEModel> {
    let mut magic = [0u8; 6];
    input.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Artifact(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            magic, MODEL_MAGIC
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
    let header: CheckpointHeader = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::Artifact(format!("checkpoint header decode failed: {e}")))?;
    let mut model = build_architecture(&header.spec, 0)?;
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    if ids.len() != header.shapes.len() {
        return Err(Error::Artifact(format!(
            "checkpoint lists {} tensors, architecture has {}",
            header.shapes.len(),
            ids.len()
        )));
    }
    let mut buf = [0u8; 8];
    for (id, shape) in ids.iter().zip(&header.shapes) {
        let p = model.params.get_mut(*id);
        if p.value.shape() != shape.as_slice() {
            return Err(Error::Artifact(format!(
                "checkpoint tensor shape {:?} does not match architecture {:?}",
                shape,
                p.value.shape()
            )));
        }
        for v in p.value.data_mut() {
            input.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok(model)
}

const TRAINER_MAGIC: &[u8; 6] = b"GDTRN1";

#[derive(Serialize, Deserialize)]
struct TrainerHeader {
    epochs_done: usize,
    steps: Vec<u64>,
    lens: Vec<usize>,
}

/// Serializes the optimizer side of a training run — completed epoch count
/// plus per-parameter Adam step counts and moment estimates — so that a
/// checkpointed run can continue exactly where it stopped. Layout mirrors
/// [`save_model`]: magic, JSON header, then for each parameter its first
/// and second moments as 64-bit little-endian.
pub fn save_training_state<W: Write>(
    model: &GDVAEModel,
    epochs_done: usize,
    out: &mut W,
) -> Result<()> {
    let state = model.params.optimizer_state();
    out.write_all(TRAINER_MAGIC)?;
    let header = TrainerHeader {
        epochs_done,
        steps: state.iter().map(|s| s.step).collect(),
        lens: state.iter().map(|s| s.m.len()).collect(),
    };
    let hjson = serde_json::to_vec(&header)
        .map_err(|e| Error::Artifact(format!("trainer header encode failed: {e}")))?;
    out.write_all(&(hjson.len() as u64).to_le_bytes())?;
    out.write_all(&hjson)?;
    for s in &state {
        for v in s.m.iter().chain(&s.v) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Restores optimizer state saved by [`save_training_state`] into a model
/// (typically one just re-loaded via [`load_model`]); returns the number
/// of epochs the serialized run had completed.
pub fn load_training_state<R: Read>(model: &mut GDVAEModel, input: &mut R) -> Result<usize> {
    let mut magic = [0u8; 6];
    input.read_exact(&mut magic)?;
    if &magic != TRAINER_MAGIC {
        return Err(Error::Artifact(format!(
            "bad trainer-state magic {:?}, expected {:?}",
            magic, TRAINER_MAGIC
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
    let header: TrainerHeader = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::Artifact(format!("trainer header decode failed: {e}")))?;
    if header.steps.len() != header.lens.len() {
        return Err(Error::Artifact(
            "trainer header step and length lists disagree".into(),
        ));
    }
    let mut buf = [0u8; 8];
    let mut state = Vec::with_capacity(header.lens.len());
    for (&len, &step) in header.lens.iter().zip(&header.steps) {
        let mut read_moments = || -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                input.read_exact(&mut buf)?;
                out.push(f64::from_le_bytes(buf));
            }
            Ok(out)
        };
        let m = read_moments()?;
        let v = read_moments()?;
        state.push(crate::diffcore::OptimizerState { step, m, v });
    }
    model.params.restore_optimizer_state(&state)?;
    Ok(header.epochs_done)
}
