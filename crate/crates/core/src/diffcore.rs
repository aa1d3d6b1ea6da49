//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records a forward computation as a topologically ordered list
//! of nodes; [`Tape::backward`] walks the list in reverse, applying each
//! node's backward rule and accumulating gradients into the consumed nodes
//! and into a [`ParamSet`]. The op set is deliberately small: exactly what
//! dense encoder/decoder networks, convolutional nets, Gaussian
//! log-likelihood / KL objectives, and linear latent maps need — plus a
//! custom-gradient node used to splice externally computed Jacobians
//! (e.g. the manifold projection's implicit-function-theorem Jacobian)
//! into the chain rule.
//!
//! Conventions:
//! - all values are `f64`, row-major;
//! - batched vector data is `[B, n]`, batched image data is `[B, C, H, W]`;
//! - an affine layer computes `y = W x + b` per sample (`W` is `[out, in]`);
//! - `conv2d` is cross-correlation; `tconv2d` is its exact adjoint for the
//!   same geometry, with an explicit output size (stride can make several
//!   input sizes map to one output size, so the inverse geometry is
//!   ambiguous without it).

use crate::error::{Error, Result};
use std::fmt;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Dense row-major tensor of 64-bit reals.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{} values]", self.data.len())
        }
    }
}

impl Tensor {
    /// Builds a tensor from a shape and row-major values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Config(format!(
                "tensor shape {:?} implies {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Zero-filled tensor.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// 1-element scalar tensor.
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Row-major vector tensor `[n]`.
    pub fn vector(v: Vec<f64>) -> Self {
        Self {
            shape: vec![v.len()],
            data: v,
        }
    }

    /// Matrix tensor `[rows, cols]` from row-major values.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same data, new shape (element count must match).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry (0 for empty tensors).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }
}

// ---------------------------------------------------------------------------
// GEMM helper (row-major wrappers around matrixmultiply)
// ---------------------------------------------------------------------------

/// `c[m,n] (+)= a[m,k] · b[k,n]`, all row-major; `beta=1` accumulates.
#[allow(clippy::too_many_arguments)]
fn gemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Row-major [r, c] has row stride c and column stride 1; a transposed
    // view swaps the two strides.
    let (rsa, csa) = if ta {
        (1isize, m as isize)
    } else {
        (k as isize, 1isize)
    };
    let (rsb, csb) = if tb {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// A trainable tensor with accumulated gradient and Adam state.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    /// First-moment estimate.
    m: Tensor,
    /// Second-moment estimate.
    v: Tensor,
    /// Number of optimizer steps taken (for bias correction).
    step: u64,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: Tensor::zeros(shape.clone()),
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// Handle to a parameter stored in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Arena of model parameters; tape ops reference parameters by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    /// Iterates over `(ParamId, Parameter)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Clears accumulated gradients.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Snapshots the per-parameter optimizer state (step count and Adam
    /// moment estimates) so interrupted training can continue exactly.
    pub fn optimizer_state(&self) -> Vec<OptimizerState> {
        self.params
            .iter()
            .map(|p| OptimizerState {
                step: p.step,
                m: p.m.data().to_vec(),
                v: p.v.data().to_vec(),
            })
            .collect()
    }

    /// Restores optimizer state captured by [`Self::optimizer_state`];
    /// the parameter list must match element-for-element.
    pub fn restore_optimizer_state(&mut self, state: &[OptimizerState]) -> Result<()> {
        if state.len() != self.params.len() {
            return Err(Error::Config(format!(
                "optimizer state has {} entries for {} parameters",
                state.len(),
                self.params.len()
            )));
        }
        for (p, s) in self.params.iter_mut().zip(state) {
            if s.m.len() != p.value.len() || s.v.len() != p.value.len() {
                return Err(Error::Config(format!(
                    "optimizer moment length {} does not match parameter length {}",
                    s.m.len(),
                    p.value.len()
                )));
            }
            p.step = s.step;
            p.m.data_mut().copy_from_slice(&s.m);
            p.v.data_mut().copy_from_slice(&s.v);
        }
        Ok(())
    }
}

/// Per-parameter optimizer state: the Adam step count and first/second
/// moment estimates, in parameter storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update over every parameter, consuming accumulated gradients.
///
/// Standard first/second-moment update with bias correction. Errors if any
/// gradient is non-finite (the caller should treat that as divergence).
pub fn adam_step(params: &mut ParamSet, cfg: &AdamConfig) -> Result<()> {
    for p in &mut params.params {
        if !p.grad.all_finite() {
            return Err(Error::Training("non-finite gradient in adam_step".into()));
        }
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (val, grad, m, v) = (
            p.value.data_mut(),
            p.grad.data(),
            p.m.data_mut(),
            p.v.data_mut(),
        );
        for i in 0..val.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            val[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Handle to a value node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Position of this node on its tape; indexes the gradient vector
    /// returned by [`Tape::backward`].
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Activation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// `max(x, s*x)` with slope `s` on the negative side.
    LeakyRelu(f64),
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
        }
    }

    /// Derivative; the kink at 0 uses the negative-side value (0 resp. s).
    fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
        }
    }
}

/// Convolution geometry shared by `conv2d` and `tconv2d`.
///
/// Always describes the *convolution* direction: `in_c` channels at
/// `in_h x in_w` map to `out_c` channels at `out_h x out_w`. A `tconv2d`
/// node runs this geometry backwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a convolution over an `in_h x in_w` input.
    pub fn conv(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        in_h: usize,
        in_w: usize,
    ) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::Config("conv stride/kernel must be positive".into()));
        }
        let h_num = (in_h + 2 * padding).checked_sub(k);
        let w_num = (in_w + 2 * padding).checked_sub(k);
        let (h_num, w_num) = match (h_num, w_num) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::Config(format!(
                    "kernel {k} larger than padded input {}x{}",
                    in_h + 2 * padding,
                    in_w + 2 * padding
                )))
            }
        };
        let out_h = h_num / stride + 1;
        let out_w = w_num / stride + 1;
        Ok(Self {
            in_c,
            out_c,
            kh: k,
            kw: k,
            stride,
            padding,
            in_h,
            in_w,
            out_h,
            out_w,
        })
    }

    /// Geometry of a transposed convolution producing an explicit
    /// `out_h x out_w` output from an `in_h x in_w` input. Internally this
    /// is the adjoint of `conv(out -> in)`, so the requested output size
    /// must be consistent: `conv(out_hw) -> in_hw` under the same
    /// stride/padding/kernel.
    #[allow(clippy::too_many_arguments)]
    pub fn tconv(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Self> {
        // The adjoint convolution maps out_c channels at out_hw to in_c at in_hw.
        let g = ConvGeom::conv(out_c, in_c, k, stride, padding, out_h, out_w)?;
        if g.out_h != in_h || g.out_w != in_w {
            return Err(Error::Config(format!(
                "tconv2d output size {out_h}x{out_w} is inconsistent: the adjoint \
                 convolution would produce {}x{}, expected {in_h}x{in_w}",
                g.out_h, g.out_w
            )));
        }
        Ok(g)
    }

    fn cols_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn cols_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

type VjpFn = dyn Fn(&Tensor) -> Tensor;

enum Op {
    /// Constant input (no gradient flows past it).
    Leaf,
    /// Parameter value read from the [`ParamSet`].
    Param(ParamId),
    /// `y[B,out] = x[B,in] W^T + b`, `W: [out,in]`.
    Affine { x: NodeId, w: ParamId, b: ParamId },
    /// `y[B,out] = x[B,in] W^T` (no bias), `W: [out,in]`.
    Linear { x: NodeId, w: ParamId },
    /// Elementwise activation.
    Act { x: NodeId, kind: Activation },
    /// Batched cross-correlation, kernel `[out_c, in_c, kh, kw]`.
    Conv2d { x: NodeId, k: ParamId, geom: ConvGeom },
    /// Adjoint of `Conv2d` with the same geometry; kernel layout is the
    /// convolution's `[conv_out_c, conv_in_c, kh, kw]`, i.e.
    /// `[tconv_in_c, tconv_out_c, kh, kw]`.
    Tconv2d { x: NodeId, k: ParamId, geom: ConvGeom },
    /// `y = c * x`.
    Scale { x: NodeId, c: f64 },
    /// `y = x + c` (every element).
    AddScalar { x: NodeId },
    /// `y = x + t`, `t` constant, same shape.
    AddConst { x: NodeId },
    /// `y = x ∘ t`, `t` constant, same shape.
    MulConst { x: NodeId, t: Tensor },
    /// `y[B,n] = x[B,n] + v[n]` (row broadcast, `v` constant).
    RowAddConst { x: NodeId },
    /// `y[B,n] = x[B,k] M^T`, `M: [n,k]` constant.
    MatConst { x: NodeId, m: Tensor },
    /// `y = a + b`, same shape.
    Add { a: NodeId, b: NodeId },
    /// `y = exp(x)` elementwise.
    Exp { x: NodeId },
    /// `y = x^2` elementwise.
    Square { x: NodeId },
    /// `y = sum of all elements` (scalar output).
    SumAll { x: NodeId },
    /// Same data, different shape.
    Reshape { x: NodeId },
    /// Externally computed forward with an externally supplied
    /// vector-Jacobian product for the backward pass.
    Custom { x: NodeId, vjp: Box<VjpFn> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation; replays it backwards for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The value computed at a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a constant input node.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Registers a parameter-read node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    /// Runs the backward pass from a scalar node, returning the gradient
    /// with respect to every node and accumulating parameter gradients.
    ///
    /// Returns the gradient tensors indexed by node; callers usually only
    /// need specific entries (e.g. the gradient at an input node).
    pub fn backward(&self, loss: NodeId, params: &mut ParamSet) -> Result<Vec<Tensor>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Config(
                "backward requires a scalar (1-element) loss node".into(),
            ));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            // Split so we can read the upstream gradient while writing
            // gradients of earlier nodes (topological order guarantees
            // every input id is smaller than its consumer's id).
            let (before, after) = grads.split_at_mut(i);
            let g = &after[0];
            if g.max_abs() == 0.0 {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    let pg = params.get_mut(*pid).grad.data_mut();
                    for (a, b) in pg.iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                Op::Affine { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let batch = xv.shape()[0];
                    let n_in = xv.shape()[1];
                    let n_out = g.shape()[1];
                    // dx = g · W
                    {
                        let wv = params.value(*w).data().to_vec();
                        gemm_rowmajor(
                            batch,
                            n_out,
                            n_in,
                            g.data(),
                            false,
                            &wv,
                            false,
                            1.0,
                            before[x.0].data_mut(),
                        );
                    }
                    // dW += g^T · x ; db += column sums of g
                    let xd = xv.data().to_vec();
                    let gd = g.data().to_vec();
                    gemm_rowmajor(
                        n_out,
                        batch,
                        n_in,
                        &gd,
                        true,
                        &xd,
                        false,
                        1.0,
                        params.get_mut(*w).grad.data_mut(),
                    );
                    let bg = params.get_mut(*b).grad.data_mut();
                    for r in 0..batch {
                        for c in 0..n_out {
                            bg[c] += gd[r * n_out + c];
                        }
                    }
                }
                Op::Linear { x, w } => {
                    let xv = &self.nodes[x.0].value;
                    let batch = xv.shape()[0];
                    let n_in = xv.shape()[1];
                    let n_out = g.shape()[1];
                    // dx = g · W
                    {
                        let wv = params.value(*w).data().to_vec();
                        gemm_rowmajor(
                            batch,
                            n_out,
                            n_in,
                            g.data(),
                            false,
                            &wv,
                            false,
                            1.0,
                            before[x.0].data_mut(),
                        );
                    }
                    // dW += g^T · x
                    let xd = xv.data().to_vec();
                    let gd = g.data().to_vec();
                    gemm_rowmajor(
                        n_out,
                        batch,
                        n_in,
                        &gd,
                        true,
                        &xd,
                        false,
                        1.0,
                        params.get_mut(*w).grad.data_mut(),
                    );
                }
                Op::Act { x, kind } => {
                    let xv = self.nodes[x.0].value.data();
                    let dst = before[x.0].data_mut();
                    for j in 0..xv.len() {
                        dst[j] += g.data()[j] * kind.derivative(xv[j]);
                    }
                }
                Op::Conv2d { x, k, geom } => {
                    let xv = &self.nodes[x.0].value;
                    let kv = params.value(*k).data().to_vec();
                    // dx = tconv(g); dK += per-sample g · cols(x)^T
                    conv2d_backward(
                        geom,
                        xv,
                        &kv,
                        g,
                        before[x.0].data_mut(),
                        params.get_mut(*k).grad.data_mut(),
                    );
                }
                Op::Tconv2d { x, k, geom } => {
                    let xv = &self.nodes[x.0].value;
                    let kv = params.value(*k).data().to_vec();
                    tconv2d_backward(
                        geom,
                        xv,
                        &kv,
                        g,
                        before[x.0].data_mut(),
                        params.get_mut(*k).grad.data_mut(),
                    );
                }
                Op::Scale { x, c } => {
                    let dst = before[x.0].data_mut();
                    for (d, gg) in dst.iter_mut().zip(g.data()) {
                        *d += c * gg;
                    }
                }
                Op::AddScalar { x } | Op::AddConst { x } | Op::RowAddConst { x } => {
                    let dst = before[x.0].data_mut();
                    for (d, gg) in dst.iter_mut().zip(g.data()) {
                        *d += gg;
                    }
                }
                Op::MulConst { x, t } => {
                    let dst = before[x.0].data_mut();
                    for j in 0..dst.len() {
                        dst[j] += g.data()[j] * t.data()[j];
                    }
                }
                Op::MatConst { x, m } => {
                    // y = x M^T  =>  dx = g · M
                    let batch = g.shape()[0];
                    let n_out = g.shape()[1];
                    let n_in = before[x.0].shape()[1];
                    gemm_rowmajor(
                        batch,
                        n_out,
                        n_in,
                        g.data(),
                        false,
                        m.data(),
                        false,
                        1.0,
                        before[x.0].data_mut(),
                    );
                }
                Op::Add { a, b } => {
                    // `a` and `b` may alias the same node; accumulate one at
                    // a time.
                    for id in [a, b] {
                        let dst = before[id.0].data_mut();
                        for (d, gg) in dst.iter_mut().zip(g.data()) {
                            *d += gg;
                        }
                    }
                }
                Op::Exp { x } => {
                    // d exp(x) = exp(x) dx; the node value is exp(x).
                    let yv = self.nodes[i].value.data();
                    let dst = before[x.0].data_mut();
                    for j in 0..dst.len() {
                        dst[j] += g.data()[j] * yv[j];
                    }
                }
                Op::Square { x } => {
                    let xv = self.nodes[x.0].value.data();
                    let dst = before[x.0].data_mut();
                    for j in 0..dst.len() {
                        dst[j] += 2.0 * xv[j] * g.data()[j];
                    }
                }
                Op::SumAll { x } => {
                    let gg = g.data()[0];
                    let dst = before[x.0].data_mut();
                    for d in dst.iter_mut() {
                        *d += gg;
                    }
                }
                Op::Reshape { x } => {
                    let dst = before[x.0].data_mut();
                    for (d, gg) in dst.iter_mut().zip(g.data()) {
                        *d += gg;
                    }
                }
                Op::Custom { x, vjp } => {
                    let dx = vjp(g);
                    if dx.shape() != self.nodes[x.0].value.shape() {
                        return Err(Error::Config(format!(
                            "custom gradient returned shape {:?}, input has {:?}",
                            dx.shape(),
                            self.nodes[x.0].value.shape()
                        )));
                    }
                    let dst = before[x.0].data_mut();
                    for (d, gg) in dst.iter_mut().zip(dx.data()) {
                        *d += gg;
                    }
                }
            }
        }
        Ok(grads)
    }
}

// ---------------------------------------------------------------------------
// Tape ops (forward builders)
// ---------------------------------------------------------------------------

/// `y = W x + b` per sample: `x: [B, in]`, `W: [out, in]`, `b: [out]`.
pub fn affine(tape: &mut Tape, params: &ParamSet, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
    let xv = tape.value(x);
    if xv.shape().len() != 2 {
        return Err(Error::Config(format!(
            "affine input must be [batch, features], got {:?}",
            xv.shape()
        )));
    }
    let (batch, n_in) = (xv.shape()[0], xv.shape()[1]);
    let wv = params.value(w);
    let bv = params.value(b);
    if wv.shape().len() != 2 || wv.shape()[1] != n_in {
        return Err(Error::Config(format!(
            "affine weight {:?} does not conform to input {:?}",
            wv.shape(),
            xv.shape()
        )));
    }
    let n_out = wv.shape()[0];
    if bv.shape() != [n_out] {
        return Err(Error::Config(format!(
            "affine bias {:?} does not conform to weight {:?}",
            bv.shape(),
            wv.shape()
        )));
    }
    let mut y = vec![0.0; batch * n_out];
    // y = x · W^T
    gemm_rowmajor(batch, n_in, n_out, xv.data(), false, wv.data(), true, 0.0, &mut y);
    for r in 0..batch {
        for c in 0..n_out {
            y[r * n_out + c] += bv.data()[c];
        }
    }
    let out = Tensor::new(vec![batch, n_out], y)?;
    Ok(tape.push(out, Op::Affine { x, w, b }))
}

/// `y = W x` per sample (no bias): `x: [B, in]`, `W: [out, in]`.
pub fn linear(tape: &mut Tape, params: &ParamSet, x: NodeId, w: ParamId) -> Result<NodeId> {
    let xv = tape.value(x);
    if xv.shape().len() != 2 {
        return Err(Error::Config(format!(
            "linear input must be [batch, features], got {:?}",
            xv.shape()
        )));
    }
    let (batch, n_in) = (xv.shape()[0], xv.shape()[1]);
    let wv = params.value(w);
    if wv.shape().len() != 2 || wv.shape()[1] != n_in {
        return Err(Error::Config(format!(
            "linear weight {:?} does not conform to input {:?}",
            wv.shape(),
            xv.shape()
        )));
    }
    let n_out = wv.shape()[0];
    let mut y = vec![0.0; batch * n_out];
    gemm_rowmajor(batch, n_in, n_out, xv.data(), false, wv.data(), true, 0.0, &mut y);
    let out = Tensor::new(vec![batch, n_out], y)?;
    Ok(tape.push(out, Op::Linear { x, w }))
}

/// Elementwise activation.
pub fn activation(tape: &mut Tape, x: NodeId, kind: Activation) -> NodeId {
    let y: Vec<f64> = tape.value(x).data().iter().map(|&v| kind.apply(v)).collect();
    let out = Tensor {
        shape: tape.value(x).shape().to_vec(),
        data: y,
    };
    tape.push(out, Op::Act { x, kind })
}

/// `y = c * x`.
pub fn scale(tape: &mut Tape, x: NodeId, c: f64) -> NodeId {
    let y: Vec<f64> = tape.value(x).data().iter().map(|v| c * v).collect();
    let out = Tensor {
        shape: tape.value(x).shape().to_vec(),
        data: y,
    };
    tape.push(out, Op::Scale { x, c })
}

/// `y = x + c` for every element.
pub fn add_scalar(tape: &mut Tape, x: NodeId, c: f64) -> NodeId {
    let y: Vec<f64> = tape.value(x).data().iter().map(|v| v + c).collect();
    let out = Tensor {
        shape: tape.value(x).shape().to_vec(),
        data: y,
    };
    tape.push(out, Op::AddScalar { x })
}

/// `y = x + t` with a constant tensor of identical shape.
pub fn add_const(tape: &mut Tape, x: NodeId, t: &Tensor) -> Result<NodeId> {
    if !tape.value(x).same_shape(t) {
        return Err(Error::Config(format!(
            "add_const shapes differ: {:?} vs {:?}",
            tape.value(x).shape(),
            t.shape()
        )));
    }
    let y: Vec<f64> = tape
        .value(x)
        .data()
        .iter()
        .zip(t.data())
        .map(|(a, b)| a + b)
        .collect();
    let out = Tensor {
        shape: t.shape().to_vec(),
        data: y,
    };
    Ok(tape.push(out, Op::AddConst { x }))
}

/// `y = x - t` with a constant tensor of identical shape.
pub fn sub_const(tape: &mut Tape, x: NodeId, t: &Tensor) -> Result<NodeId> {
    let neg = Tensor {
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|v| -v).collect(),
    };
    add_const(tape, x, &neg)
}

/// `y = x ∘ t` with a constant tensor of identical shape.
pub fn mul_const(tape: &mut Tape, x: NodeId, t: &Tensor) -> Result<NodeId> {
    if !tape.value(x).same_shape(t) {
        return Err(Error::Config(format!(
            "mul_const shapes differ: {:?} vs {:?}",
            tape.value(x).shape(),
            t.shape()
        )));
    }
    let y: Vec<f64> = tape
        .value(x)
        .data()
        .iter()
        .zip(t.data())
        .map(|(a, b)| a * b)
        .collect();
    let out = Tensor {
        shape: t.shape().to_vec(),
        data: y,
    };
    Ok(tape.push(
        out,
        Op::MulConst {
            x,
            t: t.clone(),
        },
    ))
}

/// `y[B,n] = x[B,n] + v[n]`, broadcasting the constant row `v`.
pub fn row_add_const(tape: &mut Tape, x: NodeId, v: &Tensor) -> Result<NodeId> {
    let xv = tape.value(x);
    if xv.shape().len() != 2 || v.shape() != [xv.shape()[1]] {
        return Err(Error::Config(format!(
            "row_add_const: input {:?} and row {:?} do not conform",
            xv.shape(),
            v.shape()
        )));
    }
    let (batch, n) = (xv.shape()[0], xv.shape()[1]);
    let mut y = xv.data().to_vec();
    for r in 0..batch {
        for c in 0..n {
            y[r * n + c] += v.data()[c];
        }
    }
    let out = Tensor::new(vec![batch, n], y)?;
    Ok(tape.push(out, Op::RowAddConst { x }))
}

/// `y[B,n] = x[B,k] M^T` with a constant matrix `M: [n,k]` (per-sample
/// linear map `z -> M z`).
pub fn mat_const(tape: &mut Tape, x: NodeId, m: &Tensor) -> Result<NodeId> {
    let xv = tape.value(x);
    if xv.shape().len() != 2 || m.shape().len() != 2 || m.shape()[1] != xv.shape()[1] {
        return Err(Error::Config(format!(
            "mat_const: input {:?} and matrix {:?} do not conform",
            xv.shape(),
            m.shape()
        )));
    }
    let (batch, k) = (xv.shape()[0], xv.shape()[1]);
    let n = m.shape()[0];
    let mut y = vec![0.0; batch * n];
    gemm_rowmajor(batch, k, n, xv.data(), false, m.data(), true, 0.0, &mut y);
    let out = Tensor::new(vec![batch, n], y)?;
    Ok(tape.push(out, Op::MatConst { x, m: m.clone() }))
}

/// `y = a + b`, same shape.
pub fn add(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    if !tape.value(a).same_shape(tape.value(b)) {
        return Err(Error::Config(format!(
            "add shapes differ: {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    let y: Vec<f64> = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(p, q)| p + q)
        .collect();
    let out = Tensor {
        shape: tape.value(a).shape().to_vec(),
        data: y,
    };
    Ok(tape.push(out, Op::Add { a, b }))
}

/// `y = exp(x)` elementwise.
pub fn exp(tape: &mut Tape, x: NodeId) -> NodeId {
    let y: Vec<f64> = tape.value(x).data().iter().map(|v| v.exp()).collect();
    let out = Tensor {
        shape: tape.value(x).shape().to_vec(),
        data: y,
    };
    tape.push(out, Op::Exp { x })
}

/// `y = x^2` elementwise.
pub fn square(tape: &mut Tape, x: NodeId) -> NodeId {
    let y: Vec<f64> = tape.value(x).data().iter().map(|v| v * v).collect();
    let out = Tensor {
        shape: tape.value(x).shape().to_vec(),
        data: y,
    };
    tape.push(out, Op::Square { x })
}

/// Scalar sum of all elements.
pub fn sum_all(tape: &mut Tape, x: NodeId) -> NodeId {
    let s: f64 = tape.value(x).data().iter().sum();
    tape.push(Tensor::scalar(s), Op::SumAll { x })
}

/// Same data, new shape.
pub fn reshape(tape: &mut Tape, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
    let out = tape.value(x).reshaped(shape)?;
    Ok(tape.push(out, Op::Reshape { x }))
}

/// Splices an externally computed mapping into the tape.
///
/// `forward` is evaluated immediately on the node's current value (outside
/// the tape's symbolic rules); `jacobian_apply` receives the upstream
/// gradient during the backward pass and must return the gradient with
/// respect to the input (i.e. multiply by the transposed Jacobian of
/// `forward`). Shape consistency of the returned gradient is enforced at
/// backward time.
pub fn custom_gradient_node<F>(
    tape: &mut Tape,
    x: NodeId,
    forward: F,
    jacobian_apply: Box<VjpFn>,
) -> Result<NodeId>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let y = forward(tape.value(x))?;
    Ok(tape.push(y, Op::Custom { x, vjp: jacobian_apply }))
}

// ---------------------------------------------------------------------------
// Convolution machinery (im2col / col2im + GEMM)
// ---------------------------------------------------------------------------

/// Gathers padded input patches into a `[in_c*kh*kw, out_h*out_w]` matrix.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    let ncols = g.cols_cols();
    for c in 0..g.in_c {
        let chan = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let mut idx = 0;
                for oy in 0..g.out_h {
                    let sy = (oy * g.stride + dy) as isize - g.padding as isize;
                    for ox in 0..g.out_w {
                        let sx = (ox * g.stride + dx) as isize - g.padding as isize;
                        dst[idx] = if sy >= 0 && sy < ih && sx >= 0 && sx < iw {
                            chan[(sy * iw + sx) as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `[in_c*kh*kw, out_h*out_w]` matrix back onto the padded
/// input layout; exact adjoint of [`im2col`].
fn col2im(g: &ConvGeom, cols: &[f64], x: &mut [f64]) {
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    let ncols = g.cols_cols();
    for c in 0..g.in_c {
        let base = c * g.in_h * g.in_w;
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let mut idx = 0;
                for oy in 0..g.out_h {
                    let sy = (oy * g.stride + dy) as isize - g.padding as isize;
                    for ox in 0..g.out_w {
                        let sx = (ox * g.stride + dx) as isize - g.padding as isize;
                        if sy >= 0 && sy < ih && sx >= 0 && sx < iw {
                            x[base + (sy * iw + sx) as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Per-sample convolution forward: `y = K · cols(x)`.
fn conv2d_forward(g: &ConvGeom, x: &Tensor, kernel: &[f64]) -> Tensor {
    let batch = x.shape()[0];
    let in_len = g.in_c * g.in_h * g.in_w;
    let out_len = g.out_c * g.out_h * g.out_w;
    let mut cols = vec![0.0; g.cols_rows() * g.cols_cols()];
    let mut y = vec![0.0; batch * out_len];
    for s in 0..batch {
        im2col(g, &x.data()[s * in_len..(s + 1) * in_len], &mut cols);
        gemm_rowmajor(
            g.out_c,
            g.cols_rows(),
            g.cols_cols(),
            kernel,
            false,
            &cols,
            false,
            0.0,
            &mut y[s * out_len..(s + 1) * out_len],
        );
    }
    Tensor {
        shape: vec![batch, g.out_c, g.out_h, g.out_w],
        data: y,
    }
}

/// Per-sample transposed-convolution forward: `y = col2im(K^T · x)`.
///
/// `g` describes the adjoint convolution (its input space is this op's
/// *output* space), and `x` lives in the convolution's output space.
fn tconv2d_forward(g: &ConvGeom, x: &Tensor, kernel: &[f64]) -> Tensor {
    let batch = x.shape()[0];
    let in_len = g.out_c * g.out_h * g.out_w; // tconv input = conv output space
    let out_len = g.in_c * g.in_h * g.in_w;
    let mut cols = vec![0.0; g.cols_rows() * g.cols_cols()];
    let mut y = vec![0.0; batch * out_len];
    for s in 0..batch {
        cols.iter_mut().for_each(|v| *v = 0.0);
        gemm_rowmajor(
            g.cols_rows(),
            g.out_c,
            g.cols_cols(),
            kernel,
            true,
            &x.data()[s * in_len..(s + 1) * in_len],
            false,
            0.0,
            &mut cols,
        );
        col2im(g, &cols, &mut y[s * out_len..(s + 1) * out_len]);
    }
    Tensor {
        shape: vec![batch, g.in_c, g.in_h, g.in_w],
        data: y,
    }
}

/// Backward pass of conv2d: input gradient (tconv of `g_out`) and kernel
/// gradient (`g_out · cols(x)^T`), accumulated in place.
fn conv2d_backward(
    g: &ConvGeom,
    x: &Tensor,
    kernel: &[f64],
    g_out: &Tensor,
    dx: &mut [f64],
    dk: &mut [f64],
) {
    let batch = x.shape()[0];
    let in_len = g.in_c * g.in_h * g.in_w;
    let out_len = g.out_c * g.out_h * g.out_w;
    let mut cols = vec![0.0; g.cols_rows() * g.cols_cols()];
    for s in 0..batch {
        let go = &g_out.data()[s * out_len..(s + 1) * out_len];
        // dx_s += col2im(K^T · go)
        gemm_rowmajor(
            g.cols_rows(),
            g.out_c,
            g.cols_cols(),
            kernel,
            true,
            go,
            false,
            0.0,
            &mut cols,
        );
        col2im(g, &cols, &mut dx[s * in_len..(s + 1) * in_len]);
        // dK += go · cols(x_s)^T
        im2col(g, &x.data()[s * in_len..(s + 1) * in_len], &mut cols);
        gemm_rowmajor(
            g.out_c,
            g.cols_cols(),
            g.cols_rows(),
            go,
            false,
            &cols,
            true,
            1.0,
            dk,
        );
    }
}

/// Backward pass of tconv2d: input gradient is the forward convolution of
/// `g_out`; kernel gradient mirrors the conv case with roles swapped.
fn tconv2d_backward(
    g: &ConvGeom,
    x: &Tensor,
    kernel: &[f64],
    g_out: &Tensor,
    dx: &mut [f64],
    dk: &mut [f64],
) {
    let batch = x.shape()[0];
    let in_len = g.out_c * g.out_h * g.out_w; // tconv input lives in conv-output space
    let out_len = g.in_c * g.in_h * g.in_w;
    let mut cols = vec![0.0; g.cols_rows() * g.cols_cols()];
    for s in 0..batch {
        let go = &g_out.data()[s * out_len..(s + 1) * out_len];
        im2col(g, go, &mut cols);
        // dx_s += K · cols(go)  (the forward convolution applied to g_out)
        gemm_rowmajor(
            g.out_c,
            g.cols_rows(),
            g.cols_cols(),
            kernel,
            false,
            &cols,
            false,
            1.0,
            &mut dx[s * in_len..(s + 1) * in_len],
        );
        // dK += x_s · cols(go)^T
        gemm_rowmajor(
            g.out_c,
            g.cols_cols(),
            g.cols_rows(),
            &x.data()[s * in_len..(s + 1) * in_len],
            false,
            &cols,
            true,
            1.0,
            dk,
        );
    }
}

/// Batched 2-D cross-correlation.
///
/// `x: [B, in_c, H, W]`, kernel `[out_c, in_c, kh, kw]`, square kernels.
pub fn conv2d(
    tape: &mut Tape,
    params: &ParamSet,
    x: NodeId,
    kernel: ParamId,
    stride: usize,
    padding: usize,
) -> Result<NodeId> {
    let xv = tape.value(x);
    if xv.shape().len() != 4 {
        return Err(Error::Config(format!(
            "conv2d input must be [batch, channels, h, w], got {:?}",
            xv.shape()
        )));
    }
    let ks = params.value(kernel).shape().to_vec();
    if ks.len() != 4 || ks[2] != ks[3] {
        return Err(Error::Config(format!(
            "conv2d kernel must be [out_c, in_c, k, k], got {ks:?}"
        )));
    }
    if ks[1] != xv.shape()[1] {
        return Err(Error::Config(format!(
            "conv2d kernel expects {} input channels, input has {}",
            ks[1],
            xv.shape()[1]
        )));
    }
    let geom = ConvGeom::conv(ks[1], ks[0], ks[2], stride, padding, xv.shape()[2], xv.shape()[3])?;
    if geom.out_h == 0 || geom.out_w == 0 {
        return Err(Error::Config("conv2d output has zero extent".into()));
    }
    let y = conv2d_forward(&geom, xv, params.value(kernel).data());
    Ok(tape.push(y, Op::Conv2d { x, k: kernel, geom }))
}

/// Batched transposed convolution (exact adjoint of [`conv2d`] for the same
/// geometry parameters).
///
/// `x: [B, in_c, H, W]`, kernel `[in_c, out_c, kh, kw]`; `out_hw` fixes the
/// output spatial size (required because strided convolutions flatten
/// several input sizes onto one output size).
pub fn tconv2d(
    tape: &mut Tape,
    params: &ParamSet,
    x: NodeId,
    kernel: ParamId,
    stride: usize,
    padding: usize,
    out_hw: (usize, usize),
) -> Result<NodeId> {
    let xv = tape.value(x);
    if xv.shape().len() != 4 {
        return Err(Error::Config(format!(
            "tconv2d input must be [batch, channels, h, w], got {:?}",
            xv.shape()
        )));
    }
    let ks = params.value(kernel).shape().to_vec();
    if ks.len() != 4 || ks[2] != ks[3] {
        return Err(Error::Config(format!(
            "tconv2d kernel must be [in_c, out_c, k, k], got {ks:?}"
        )));
    }
    if ks[0] != xv.shape()[1] {
        return Err(Error::Config(format!(
            "tconv2d kernel expects {} input channels, input has {}",
            ks[0],
            xv.shape()[1]
        )));
    }
    let geom = ConvGeom::tconv(
        ks[0],
        ks[1],
        ks[2],
        stride,
        padding,
        xv.shape()[2],
        xv.shape()[3],
        out_hw.0,
        out_hw.1,
    )?;
    let y = tconv2d_forward(&geom, xv, params.value(kernel).data());
    Ok(tape.push(y, Op::Tconv2d { x, k: kernel, geom }))
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Compares an analytic gradient against central finite differences.
///
/// `f` re-evaluates the scalar objective at perturbed inputs; `analytic`
/// is the candidate gradient at `x` (same shape as `x`). Returns the
/// maximum over coordinates of `|analytic - fd| / (|analytic| + eps)` with
/// a scale-aware `eps`; coordinates where both values are negligibly small
/// compared to the gradient's overall scale count as exact matches.
///
/// Central differences are second-order accurate; `h = 1e-6` balances
/// truncation against round-off for `f` of order unity. Piecewise-linear
/// activations (relu kinks) are only correctly checked when no coordinate
/// sits within `h` of a kink; test inputs are drawn away from kinks.
pub fn finite_difference_check(
    f: &mut dyn FnMut(&Tensor) -> f64,
    analytic: &Tensor,
    x: &Tensor,
    h: f64,
) -> f64 {
    assert_eq!(analytic.shape(), x.shape(), "gradient/input shape mismatch");
    let scale = analytic.max_abs().max(1.0);
    let floor = 1e-9 * scale;
    let eps = 1e-8 * scale;
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = f(&xp);
        xp.data_mut()[i] = orig - h;
        let fm = f(&xp);
        xp.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        if a.abs() < floor && fd.abs() < floor {
            continue;
        }
        let rel = (a - fd).abs() / (a.abs() + eps);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn tensor_shape_mismatch_is_config_error() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn affine_identity_passes_through() {
        let mut ps = ParamSet::new();
        let w = ps.add(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = ps.add(Tensor::vector(vec![0.0, 0.0]));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap());
        let y = affine(&mut tape, &ps, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn affine_bias_only() {
        let mut ps = ParamSet::new();
        let w = ps.add(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let b = ps.add(Tensor::vector(vec![5.0, 5.0]));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![7.0, -3.0]).unwrap());
        let y = affine(&mut tape, &ps, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 5.0]);
    }

    #[test]
    fn affine_shape_mismatch_errors() {
        let mut ps = ParamSet::new();
        let w = ps.add(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = ps.add(Tensor::vector(vec![0.0, 0.0]));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        assert!(affine(&mut tape, &ps, x, w, b).is_err());
    }

    /// Gradient of sum((Wx+b)^2) wrt x checked against central differences.
    #[test]
    fn affine_gradient_matches_finite_differences() {
        let mut rng = stream_rng(11, 0);
        let mut ps = ParamSet::new();
        let w = ps.add(rand_tensor(vec![3, 4], &mut rng, -1.0, 1.0));
        let b = ps.add(rand_tensor(vec![3], &mut rng, -1.0, 1.0));
        let x0 = rand_tensor(vec![2, 4], &mut rng, -1.0, 1.0);

        let run = |ps: &ParamSet, xin: &Tensor| -> (f64, Option<Tensor>, Tape, NodeId) {
            let mut tape = Tape::new();
            let x = tape.input(xin.clone());
            let y = affine(&mut tape, ps, x, w, b).unwrap();
            let sq = square(&mut tape, y);
            let loss = sum_all(&mut tape, sq);
            (tape.value(loss).item(), None, tape, x)
        };

        let (_, _, tape, xnode) = run(&ps, &x0);
        let mut ps2 = ps.clone();
        let loss_node = NodeId(tape.len() - 1);
        let grads = tape.backward(loss_node, &mut ps2).unwrap();
        let gx = grads[xnode.0].clone();

        let mut f = |xin: &Tensor| run(&ps, xin).0;
        let err = finite_difference_check(&mut f, &gx, &x0, 1e-6);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn linear_matches_affine_with_zero_bias_and_checks_gradients() {
        let mut rng = stream_rng(12, 0);
        let mut ps = ParamSet::new();
        let w = ps.add(rand_tensor(vec![3, 4], &mut rng, -1.0, 1.0));
        let b = ps.add(Tensor::zeros(vec![3]));
        let x0 = rand_tensor(vec![2, 4], &mut rng, -1.0, 1.0);

        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let y_lin = linear(&mut tape, &ps, x, w).unwrap();
        let y_aff = affine(&mut tape, &ps, x, w, b).unwrap();
        assert_eq!(tape.value(y_lin).data(), tape.value(y_aff).data());

        // Gradient of sum((xW^T)^2) wrt x and W against finite differences.
        let run = |ps: &ParamSet, xin: &Tensor| -> (Tape, NodeId, NodeId) {
            let mut tape = Tape::new();
            let x = tape.input(xin.clone());
            let y = linear(&mut tape, ps, x, w).unwrap();
            let sq = square(&mut tape, y);
            let loss = sum_all(&mut tape, sq);
            (tape, x, loss)
        };
        let (tape, xnode, loss) = run(&ps, &x0);
        let mut ps2 = ps.clone();
        let grads = tape.backward(loss, &mut ps2).unwrap();

        let mut fx = |xin: &Tensor| {
            let (t, _, l) = run(&ps, xin);
            t.value(l).item()
        };
        let err = finite_difference_check(&mut fx, &grads[xnode.0], &x0, 1e-6);
        assert!(err < 1e-6, "input grad rel err {err}");

        let w0 = ps.value(w).clone();
        let mut fw = |wv: &Tensor| {
            let mut ps_alt = ps.clone();
            ps_alt.get_mut(w).value = wv.clone();
            let (t, _, l) = run(&ps_alt, &x0);
            t.value(l).item()
        };
        let err_w = finite_difference_check(&mut fw, &ps2.grad(w).clone(), &w0, 1e-6);
        assert!(err_w < 1e-6, "weight grad rel err {err_w}");
    }

    #[test]
    fn relu_and_leaky_values_and_gradients() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_abs_diff_eq!(Activation::LeakyRelu(1e-6).apply(-1.0), -1e-6);
        assert_eq!(Activation::Relu.derivative(2.0), 1.0);
        assert_eq!(Activation::Relu.derivative(-2.0), 0.0);
        assert_eq!(Activation::LeakyRelu(1e-6).derivative(-2.0), 1e-6);
        // Subgradient convention at the kink: negative-side value.
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
    }

    #[test]
    fn conv2d_one_by_one_kernel_scales_input() {
        let mut ps = ParamSet::new();
        let k = ps.add(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = conv2d(&mut tape, &ps, x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn tconv2d_one_by_one_kernel_scales_input() {
        let mut ps = ParamSet::new();
        let k = ps.add(Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap());
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tconv2d(&mut tape, &ps, x, k, 1, 0, (2, 2)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 9.0, 12.0]);
    }

    /// Channel/size bookkeeping for the encoder's first layer geometry:
    /// two channels at 64x64 through a (2,10,3,3,1) layer give 10 channels
    /// at 22x22.
    #[test]
    fn conv2d_strided_geometry() {
        let mut rng = stream_rng(12, 0);
        let mut ps = ParamSet::new();
        let k = ps.add(rand_tensor(vec![10, 2, 3, 3], &mut rng, -0.3, 0.3));
        let mut tape = Tape::new();
        let x = tape.input(rand_tensor(vec![1, 2, 64, 64], &mut rng, -1.0, 1.0));
        let y = conv2d(&mut tape, &ps, x, k, 3, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 10, 22, 22]);
    }

    /// The mirrored decoder stack maps a 100-channel 1x1 code back to a
    /// 2-channel 64x64 field.
    #[test]
    fn tconv2d_decoder_stack_geometry() {
        let mut rng = stream_rng(13, 0);
        let mut ps = ParamSet::new();
        let k1 = ps.add(rand_tensor(vec![100, 40, 5, 5], &mut rng, -0.1, 0.1));
        let k2 = ps.add(rand_tensor(vec![40, 20, 2, 2], &mut rng, -0.1, 0.1));
        let k3 = ps.add(rand_tensor(vec![20, 10, 3, 3], &mut rng, -0.1, 0.1));
        let k4 = ps.add(rand_tensor(vec![10, 2, 3, 3], &mut rng, -0.1, 0.1));
        let mut tape = Tape::new();
        let x = tape.input(rand_tensor(vec![2, 100, 1, 1], &mut rng, -1.0, 1.0));
        let y1 = tconv2d(&mut tape, &ps, x, k1, 1, 0, (5, 5)).unwrap();
        let y2 = tconv2d(&mut tape, &ps, y1, k2, 2, 1, (8, 8)).unwrap();
        let y3 = tconv2d(&mut tape, &ps, y2, k3, 3, 1, (22, 22)).unwrap();
        let y4 = tconv2d(&mut tape, &ps, y3, k4, 3, 1, (64, 64)).unwrap();
        assert_eq!(tape.value(y4).shape(), &[2, 2, 64, 64]);
    }

    /// <conv(x), y> == <x, tconv(y)> with a shared kernel: conv2d and
    /// tconv2d are exact adjoints.
    #[test]
    fn conv_tconv_adjoint_identity() {
        let mut rng = stream_rng(14, 0);
        for &(ic, oc, k, s, p, hw) in &[
            (2usize, 10usize, 3usize, 3usize, 1usize, 64usize),
            (10, 20, 3, 3, 1, 22),
            (20, 40, 2, 2, 1, 8),
            (40, 100, 5, 1, 0, 5),
        ] {
            let mut ps = ParamSet::new();
            let kernel = ps.add(rand_tensor(vec![oc, ic, k, k], &mut rng, -0.5, 0.5));
            let geom = ConvGeom::conv(ic, oc, k, s, p, hw, hw).unwrap();

            let xv = rand_tensor(vec![1, ic, hw, hw], &mut rng, -1.0, 1.0);
            let yv = rand_tensor(vec![1, oc, geom.out_h, geom.out_w], &mut rng, -1.0, 1.0);

            let mut tape = Tape::new();
            let x = tape.input(xv.clone());
            let cx = conv2d(&mut tape, &ps, x, kernel, s, p).unwrap();
            let y = tape.input(yv.clone());
            let ty = tconv2d(&mut tape, &ps, y, kernel, s, p, (hw, hw)).unwrap();

            let lhs: f64 = tape
                .value(cx)
                .data()
                .iter()
                .zip(yv.data())
                .map(|(a, b)| a * b)
                .sum();
            let rhs: f64 = xv
                .data()
                .iter()
                .zip(tape.value(ty).data())
                .map(|(a, b)| a * b)
                .sum();
            let rel = (lhs - rhs).abs() / lhs.abs().max(1e-300);
            assert!(rel < 1e-10, "adjoint identity violated: rel {rel}");
        }
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let mut rng = stream_rng(15, 0);
        let mut ps = ParamSet::new();
        let k = ps.add(rand_tensor(vec![2, 2, 3, 3], &mut rng, -0.5, 0.5));
        let x0 = rand_tensor(vec![1, 2, 6, 6], &mut rng, -1.0, 1.0);

        let eval = |ps: &ParamSet, xin: &Tensor| -> (f64, Tape, NodeId, NodeId) {
            let mut tape = Tape::new();
            let x = tape.input(xin.clone());
            let y = conv2d(&mut tape, ps, x, k, 2, 1).unwrap();
            let sq = square(&mut tape, y);
            let loss = sum_all(&mut tape, sq);
            (tape.value(loss).item(), tape, x, loss)
        };

        let (_, tape, xnode, loss) = eval(&ps, &x0);
        let mut ps2 = ps.clone();
        let grads = tape.backward(loss, &mut ps2).unwrap();

        // Input gradient.
        let mut f = |xin: &Tensor| eval(&ps, xin).0;
        let err = finite_difference_check(&mut f, &grads[xnode.0], &x0, 1e-5);
        assert!(err < 1e-5, "input grad rel err {err}");

        // Kernel gradient.
        let k0 = ps.value(k).clone();
        let mut fk = |kin: &Tensor| {
            let mut ps3 = ps.clone();
            ps3.get_mut(k).value = kin.clone();
            eval(&ps3, &x0).0
        };
        let err = finite_difference_check(&mut fk, ps2.grad(k), &k0, 1e-5);
        assert!(err < 1e-5, "kernel grad rel err {err}");
    }

    #[test]
    fn tconv2d_gradient_matches_finite_differences() {
        let mut rng = stream_rng(16, 0);
        let mut ps = ParamSet::new();
        let k = ps.add(rand_tensor(vec![3, 2, 3, 3], &mut rng, -0.5, 0.5));
        let x0 = rand_tensor(vec![2, 3, 3, 3], &mut rng, -1.0, 1.0);

        let eval = |ps: &ParamSet, xin: &Tensor| -> (f64, Tape, NodeId, NodeId) {
            let mut tape = Tape::new();
            let x = tape.input(xin.clone());
            let y = tconv2d(&mut tape, ps, x, k, 2, 1, (6, 6)).unwrap();
            let sq = square(&mut tape, y);
            let loss = sum_all(&mut tape, sq);
            (tape.value(loss).item(), tape, x, loss)
        };

        let (_, tape, xnode, loss) = eval(&ps, &x0);
        let mut ps2 = ps.clone();
        let grads = tape.backward(loss, &mut ps2).unwrap();

        let mut f = |xin: &Tensor| eval(&ps, xin).0;
        let err = finite_difference_check(&mut f, &grads[xnode.0], &x0, 1e-5);
        assert!(err < 1e-5, "input grad rel err {err}");

        let k0 = ps.value(k).clone();
        let mut fk = |kin: &Tensor| {
            let mut ps3 = ps.clone();
            ps3.get_mut(k).value = kin.clone();
            eval(&ps3, &x0).0
        };
        let err = finite_difference_check(&mut fk, ps2.grad(k), &k0, 1e-5);
        assert!(err < 1e-5, "kernel grad rel err {err}");
    }

    #[test]
    fn custom_gradient_identity_passes_gradients_through() {
        let mut ps = ParamSet::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0, 3.0]).reshaped(vec![1, 3]).unwrap());
        let y = custom_gradient_node(
            &mut tape,
            x,
            |v| Ok(v.clone()),
            Box::new(|g| g.clone()),
        )
        .unwrap();
        let sq = square(&mut tape, y);
        let loss = sum_all(&mut tape, sq);
        let grads = tape.backward(loss, &mut ps).unwrap();
        assert_eq!(grads[x.0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn custom_gradient_doubling_doubles_upstream() {
        let mut ps = ParamSet::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let y = custom_gradient_node(
            &mut tape,
            x,
            |v| {
                Ok(Tensor {
                    shape: v.shape().to_vec(),
                    data: v.data().iter().map(|a| 2.0 * a).collect(),
                })
            },
            Box::new(|g| Tensor {
                shape: g.shape().to_vec(),
                data: g.data().iter().map(|a| 2.0 * a).collect(),
            }),
        )
        .unwrap();
        let loss = sum_all(&mut tape, y);
        let grads = tape.backward(loss, &mut ps).unwrap();
        assert_eq!(grads[x.0].data(), &[2.0, 2.0]);
    }

    #[test]
    fn custom_gradient_shape_mismatch_is_error() {
        let mut ps = ParamSet::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let y = custom_gradient_node(
            &mut tape,
            x,
            |v| Ok(v.clone()),
            Box::new(|_| Tensor::scalar(0.0)),
        )
        .unwrap();
        let loss = sum_all(&mut tape, y);
        assert!(tape.backward(loss, &mut ps).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut ps = ParamSet::new();
        let p = ps.add(Tensor::vector(vec![1.0, -2.0]));
        adam_step(&mut ps, &AdamConfig::default()).unwrap();
        assert_eq!(ps.value(p).data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // At step 1 the bias corrections cancel: delta = -lr*g/(|g|+eps').
        let mut ps = ParamSet::new();
        let p = ps.add(Tensor::vector(vec![1.0, 1.0]));
        ps.get_mut(p).grad = Tensor::vector(vec![0.5, -0.25]);
        let cfg = AdamConfig::default();
        adam_step(&mut ps, &cfg).unwrap();
        let v = ps.value(p).data();
        assert_abs_diff_eq!(v[0], 1.0 - cfg.lr, epsilon = 1e-6);
        assert_abs_diff_eq!(v[1], 1.0 + cfg.lr, epsilon = 1e-6);
    }

    #[test]
    fn adam_nonfinite_gradient_errors() {
        let mut ps = ParamSet::new();
        let p = ps.add(Tensor::vector(vec![1.0]));
        ps.get_mut(p).grad = Tensor::vector(vec![f64::NAN]);
        assert!(adam_step(&mut ps, &AdamConfig::default()).is_err());
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut ps = ParamSet::new();
        let p = ps.add(Tensor::vector(vec![1.0, 1.0]));
        // lr must be large enough to cover the unit distance in 200
        // normalized steps; 0.02 settles to ~3e-5.
        let cfg = AdamConfig {
            lr: 0.02,
            ..AdamConfig::default()
        };
        for _ in 0..200 {
            ps.zero_grad();
            let g: Vec<f64> = ps.value(p).data().iter().map(|v| 2.0 * v).collect();
            ps.get_mut(p).grad = Tensor::vector(g);
            adam_step(&mut ps, &cfg).unwrap();
        }
        let norm: f64 = ps.value(p).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-2, "|theta| = {norm}");
    }

    #[test]
    fn finite_difference_check_on_square() {
        let mut f = |x: &Tensor| x.data()[0] * x.data()[0];
        let x = Tensor::vector(vec![3.0]);
        let analytic = Tensor::vector(vec![6.0]);
        let err = finite_difference_check(&mut f, &analytic, &x, 1e-6);
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn finite_difference_check_flags_wrong_gradient() {
        let mut f = |x: &Tensor| x.data()[0] * x.data()[0];
        let x = Tensor::vector(vec![3.0]);
        let wrong = Tensor::vector(vec![5.0]);
        let err = finite_difference_check(&mut f, &wrong, &x, 1e-6);
        assert!(err > 0.1);
    }

    /// Composite network gradient: affine -> relu -> affine -> square-sum,
    /// checking input, weight, and bias gradients all at once.
    #[test]
    fn mlp_end_to_end_gradients() {
        let mut rng = stream_rng(17, 0);
        let mut ps = ParamSet::new();
        let w1 = ps.add(rand_tensor(vec![5, 4], &mut rng, -0.8, 0.8));
        let b1 = ps.add(rand_tensor(vec![5], &mut rng, -0.2, 0.2));
        let w2 = ps.add(rand_tensor(vec![2, 5], &mut rng, -0.8, 0.8));
        let b2 = ps.add(rand_tensor(vec![2], &mut rng, -0.2, 0.2));
        let x0 = rand_tensor(vec![3, 4], &mut rng, -1.0, 1.0);

        let eval = |ps: &ParamSet, xin: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let x = tape.input(xin.clone());
            let h = affine(&mut tape, ps, x, w1, b1).unwrap();
            let h = activation(&mut tape, h, Activation::Relu);
            let y = affine(&mut tape, ps, h, w2, b2).unwrap();
            let sq = square(&mut tape, y);
            let loss = sum_all(&mut tape, sq);
            tape.value(loss).item()
        };

        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let h = affine(&mut tape, &ps, x, w1, b1).unwrap();
        let h = activation(&mut tape, h, Activation::Relu);
        let y = affine(&mut tape, &ps, h, w2, b2).unwrap();
        let sq = square(&mut tape, y);
        let loss = sum_all(&mut tape, sq);
        let mut ps_g = ps.clone();
        let grads = tape.backward(loss, &mut ps_g).unwrap();

        let mut f = |xin: &Tensor| eval(&ps, xin);
        let err = finite_difference_check(&mut f, &grads[x.0], &x0, 1e-6);
        assert!(err < 1e-6, "input grad rel err {err}");

        for (pid, name) in [(w1, "w1"), (b1, "b1"), (w2, "w2"), (b2, "b2")] {
            let p0 = ps.value(pid).clone();
            let mut fp = |pin: &Tensor| {
                let mut ps3 = ps.clone();
                ps3.get_mut(pid).value = pin.clone();
                eval(&ps3, &x0)
            };
            let err = finite_difference_check(&mut fp, ps_g.grad(pid), &p0, 1e-6);
            assert!(err < 1e-6, "{name} grad rel err {err}");
        }
    }

    /// Two backward passes over the same tape produce bit-identical
    /// gradients (deterministic accumulation order).
    #[test]
    fn backward_is_deterministic() {
        let mut rng = stream_rng(18, 0);
        let mut ps = ParamSet::new();
        let w = ps.add(rand_tensor(vec![4, 4], &mut rng, -1.0, 1.0));
        let b = ps.add(rand_tensor(vec![4], &mut rng, -1.0, 1.0));
        let mut tape = Tape::new();
        let x = tape.input(rand_tensor(vec![2, 4], &mut rng, -1.0, 1.0));
        let y = affine(&mut tape, &ps, x, w, b).unwrap();
        let act = activation(&mut tape, y, Activation::LeakyRelu(1e-6));
        let sq = square(&mut tape, act);
        let loss = sum_all(&mut tape, sq);

        let mut ps1 = ps.clone();
        let g1 = tape.backward(loss, &mut ps1).unwrap();
        let mut ps2 = ps.clone();
        let g2 = tape.backward(loss, &mut ps2).unwrap();
        assert_eq!(g1[x.0].data(), g2[x.0].data());
        assert_eq!(ps1.grad(w).data(), ps2.grad(w).data());
    }

    #[test]
    fn elementwise_ops_gradients() {
        let mut rng = stream_rng(19, 0);
        let x0 = rand_tensor(vec![2, 3], &mut rng, 0.1, 1.5);
        let t = rand_tensor(vec![2, 3], &mut rng, -1.0, 1.0);
        let v = rand_tensor(vec![3], &mut rng, -1.0, 1.0);
        let m = rand_tensor(vec![2, 3], &mut rng, -1.0, 1.0);

        let eval = |xin: &Tensor| -> (f64, Tape, NodeId, NodeId) {
            let mut tape = Tape::new();
            let x = tape.input(xin.clone());
            let a = exp(&mut tape, x);
            let b = mul_const(&mut tape, a, &t).unwrap();
            let c = row_add_const(&mut tape, b, &v).unwrap();
            let d = mat_const(&mut tape, c, &m).unwrap();
            let e = scale(&mut tape, d, 0.7);
            let f = add_scalar(&mut tape, e, 0.3);
            let g = square(&mut tape, f);
            let l = sum_all(&mut tape, g);
            (tape.value(l).item(), tape, x, l)
        };

        let (_, tape, xnode, loss) = eval(&x0);
        let mut ps = ParamSet::new();
        let grads = tape.backward(loss, &mut ps).unwrap();
        let mut f = |xin: &Tensor| eval(xin).0;
        let err = finite_difference_check(&mut f, &grads[xnode.0], &x0, 1e-6);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn reshape_roundtrips_gradient() {
        let mut ps = ParamSet::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let flat = reshape(&mut tape, x, vec![1, 4]).unwrap();
        let sq = square(&mut tape, flat);
        let loss = sum_all(&mut tape, sq);
        let grads = tape.backward(loss, &mut ps).unwrap();
        assert_eq!(grads[x.0].shape(), &[1, 2, 2, 1]);
        assert_eq!(grads[x.0].data(), &[2.0, 4.0, 6.0, 8.0]);
    }
}
