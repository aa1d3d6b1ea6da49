//! Geometric dynamic variational autoencoders with manifold latent spaces.
//!
//! This crate provides the numerical building blocks for learning
//! reduced-order models of dissipative PDEs and constrained mechanical
//! systems:
//!
//! - [`diffcore`]: a small reverse-mode automatic differentiation engine
//!   (dense tensors, a Wengert-list tape, affine/convolution/activation
//!   primitives, custom-gradient nodes, and an Adam optimizer),
//! - [`manifold`]: latent manifolds described by chart atlases, with
//!   differentiable nearest-point projection (analytic where available,
//!   Newton on general charts) and exact projection Jacobians via the
//!   implicit function theorem,
//! - [`gdvae`]: Gaussian encoder/decoder heads, latent evolution maps, the
//!   three-term variational training objective, minibatch training, and
//!   multi-step latent prediction,
//! - [`pde_data`]: reference solvers (viscous Burgers via a Cole-Hopf
//!   spectral method and a finite-difference method; Brusselator
//!   reaction-diffusion in 2D) and snapshot-pair dataset builders, plus
//!   constrained-mechanism synthetic datasets,
//! - [`baselines`]: linear reduced-order baselines (POD, exact DMD,
//!   truncated Cole-Hopf ROM, PCA embedding),
//! - [`analysis`]: evaluation metrics, multi-step error tables, latent
//!   variance diagnostics, and latent-code export.

pub mod analysis;
pub mod baselines;
pub mod diffcore;
pub mod error;
pub mod gdvae;
pub mod manifold;
pub mod pde_data;
pub mod rng;

pub use error::{Error, Result};
