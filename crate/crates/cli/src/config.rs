//! Declarative run configuration: one JSON document describes a whole
//! experiment (dataset, model, training schedule, baselines, horizons),
//! and a mandatory master seed makes every derived quantity reproducible.

use gdvae_core::gdvae::{ModelSpec, TrainingConfig};
use gdvae_core::manifold::AtlasDescriptor;
use gdvae_core::pde_data::{BrusselatorParams, IcFamily};
use gdvae_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn default_trials() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// What data to generate and train on.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Viscous Burgers snapshot pairs from a parametric IC family.
    Burgers {
        family: IcFamily,
        /// Uniform sampling range for the IC parameter(s); defaults to the
        /// family's natural range.
        #[serde(default)]
        alpha_range: Option<(f64, f64)>,
        /// Number of snapshot pairs.
        m: usize,
        /// Spatial grid size.
        n: usize,
        nu: f64,
        /// Evolution lag between the two snapshots of a pair.
        tau: f64,
        /// Sample times drawn uniformly from this interval.
        t_range: (f64, f64),
        #[serde(default)]
        noise_sigma: f64,
    },
    /// Brusselator reaction-diffusion snapshot pairs past the transient.
    Brusselator {
        /// Number of trajectories (distinct ICs).
        n_traj: usize,
        /// Grid edge length; the state dimension is `2·l²`.
        l: usize,
        #[serde(default)]
        params: BrusselatorParams,
        /// Settling time discarded before pairs are sampled.
        t_transient: f64,
        /// Trajectory end time.
        t_end: f64,
        tau: f64,
        #[serde(default)]
        noise_sigma: f64,
    },
}

impl DatasetSpec {
    /// Flattened state dimension of one snapshot.
    pub fn state_dim(&self) -> usize {
        match self {
            DatasetSpec::Burgers { n, .. } => *n,
            DatasetSpec::Brusselator { l, .. } => 2 * l * l,
        }
    }

    pub fn tau(&self) -> f64 {
        match self {
            DatasetSpec::Burgers { tau, .. } | DatasetSpec::Brusselator { tau, .. } => *tau,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Burgers {
                family,
                alpha_range,
                m,
                n,
                nu,
                tau,
                t_range,
                noise_sigma,
            } => {
                if *m == 0 {
                    return Err(Error::Config("dataset.m must be positive".into()));
                }
                if *n < 4 {
                    return Err(Error::Config("dataset.n must be at least 4".into()));
                }
                if !(*nu > 0.0) {
                    return Err(Error::Config("dataset.nu must be positive".into()));
                }
                if !(*tau > 0.0) {
                    return Err(Error::Config("dataset.tau must be positive".into()));
                }
                if t_range.1 < t_range.0 || t_range.0 < 0.0 {
                    return Err(Error::Config(format!(
                        "dataset.t_range [{}, {}] is not a forward time interval",
                        t_range.0, t_range.1
                    )));
                }
                if *noise_sigma < 0.0 {
                    return Err(Error::Config(
                        "dataset.noise_sigma must be non-negative".into(),
                    ));
                }
                if let Some(range) = alpha_range {
                    let natural = family.natural_range();
                    if !(range.0 >= natural.0 && range.1 <= natural.1 && range.0 < range.1) {
                        return Err(Error::Config(format!(
                            "dataset.alpha_range [{}, {}] outside the {} family's natural range [{}, {}]",
                            range.0,
                            range.1,
                            family.name(),
                            natural.0,
                            natural.1
                        )));
                    }
                }
                Ok(())
            }
            DatasetSpec::Brusselator {
                n_traj,
                l,
                params,
                t_transient,
                t_end,
                tau,
                noise_sigma,
            } => {
                if *n_traj == 0 {
                    return Err(Error::Config("dataset.n_traj must be positive".into()));
                }
                if *l < 2 {
                    return Err(Error::Config("dataset.l must be at least 2".into()));
                }
                if *t_end <= *t_transient + *tau {
                    return Err(Error::Config(format!(
                        "dataset.t_end = {t_end} leaves no room for pairs after dataset.t_transient = {t_transient} plus tau = {tau}"
                    )));
                }
                if *noise_sigma < 0.0 {
                    return Err(Error::Config(
                        "dataset.noise_sigma must be non-negative".into(),
                    ));
                }
                params.validate()
            }
        }
    }
}

/// A classical reduced-order baseline to evaluate next to the model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BaselineSpec {
    /// Exact dynamic mode decomposition fit on the training pairs.
    Dmd {
        rank: usize,
        #[serde(default = "default_true")]
        mean_subtract: bool,
    },
    /// POD basis + least-squares one-step operator fit on the pairs.
    Pod {
        rank: usize,
        #[serde(default = "default_true")]
        mean_subtract: bool,
    },
    /// Truncated-mode exact evolution for Burgers (analytic ROM).
    ColeHopf { modes: usize },
    /// Pass-through of the reference solution; a plumbing self-check that
    /// must score an all-zero table.
    Oracle,
}

/// Evaluation protocol settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Number of held-out test initial conditions (uniform parameter grid).
    pub n_test: usize,
    /// Whether to evaluate the trained model (disable to evaluate
    /// baselines alone, e.g. before any training has happened).
    pub include_model: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            n_test: 16,
            include_model: true,
        }
    }
}

/// Latent-diagnostics settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSpec {
    /// Parameter grid size for the continuity diagnostic.
    pub grid: usize,
    /// Informative-dimension threshold (multiples of the median
    /// variance-of-mean / mean-of-variance ratio).
    pub threshold: f64,
    /// Cap on the encoder batch used for variance statistics.
    pub batch_cap: usize,
}

impl Default for AnalyzeSpec {
    fn default() -> Self {
        Self {
            grid: 64,
            threshold: 10.0,
            batch_cap: 2000,
        }
    }
}

/// One experiment, fully described: everything a run needs is in this
/// document plus the master seed, so re-running the config reproduces
/// every artifact byte-for-byte.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Experiment name (free-form, recorded in manifests).
    pub name: String,
    /// Master seed; every derived seed (dataset, per-trial training) is
    /// mixed from it.
    pub seed: u64,
    /// Output directory for all artifacts.
    pub out_dir: PathBuf,
    /// Number of independently seeded training trials.
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub dataset: DatasetSpec,
    /// Model architecture; required by train/eval/analyze.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    /// Latent manifold; merged into the model spec (set it here or inside
    /// `model.manifold`, not both).
    #[serde(default)]
    pub manifold: Option<AtlasDescriptor>,
    /// Training schedule; the seed field is overridden per trial.
    #[serde(default)]
    pub training: Option<TrainingConfig>,
    /// Prediction horizons in seconds (multiples of the dataset lag).
    #[serde(default)]
    pub horizons: Vec<f64>,
    #[serde(default)]
    pub baselines: Vec<BaselineSpec>,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub analyze: AnalyzeSpec,
    /// Continue an interrupted training run from its checkpoints instead
    /// of starting over (bit-exact with the uninterrupted run).
    #[serde(default)]
    pub resume: bool,
    /// Dataset file to train on; defaults to `<out_dir>/dataset.bin`.
    #[serde(default)]
    pub dataset_file: Option<PathBuf>,
}

impl RunConfig {
    /// Loads and validates a config document.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies command-line overrides, then re-validates.
    pub fn apply_overrides(
        &mut self,
        out: Option<PathBuf>,
        trials: Option<usize>,
        seed: Option<u64>,
    ) -> Result<()> {
        if let Some(out) = out {
            self.out_dir = out;
        }
        if let Some(trials) = trials {
            self.trials = trials;
        }
        if let Some(seed) = seed {
            self.seed = seed;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        self.dataset.validate()?;
        for (i, h) in self.horizons.iter().enumerate() {
            if !(*h >= 0.0) {
                return Err(Error::Config(format!(
                    "horizons[{i}] = {h} must be non-negative"
                )));
            }
        }
        if let Some(model) = &self.model {
            if model.input_dim != self.dataset.state_dim() {
                return Err(Error::Config(format!(
                    "model.input_dim = {} does not match the dataset state dimension {}",
                    model.input_dim,
                    self.dataset.state_dim()
                )));
            }
            if self.manifold.is_some() && model.manifold.is_some() {
                return Err(Error::Config(
                    "manifold given both at top level and inside model.manifold".into(),
                ));
            }
        }
        if self.eval.n_test == 0 {
            return Err(Error::Config("eval.n_test must be positive".into()));
        }
        if self.analyze.grid < 3 {
            return Err(Error::Config("analyze.grid must be at least 3".into()));
        }
        if !(self.analyze.threshold > 0.0) {
            return Err(Error::Config("analyze.threshold must be positive".into()));
        }
        Ok(())
    }

    /// The model spec with the top-level manifold merged in.
    pub fn resolved_model(&self) -> Result<ModelSpec> {
        let mut model = self
            .model
            .clone()
            .ok_or_else(|| Error::Config("this command needs a model section".into()))?;
        if let Some(manifold) = &self.manifold {
            model.manifold = Some(manifold.clone());
        }
        Ok(model)
    }

    /// Training schedule, or a config error if the section is missing.
    pub fn training(&self) -> Result<&TrainingConfig> {
        self.training
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a training section".into()))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset_file
            .clone()
            .unwrap_or_else(|| self.out_dir.join("dataset.bin"))
    }

    /// Converts the horizon list to latent step counts, requiring each to
    /// be an integer multiple of the dataset lag.
    pub fn horizon_steps(&self) -> Result<Vec<usize>> {
        if self.horizons.is_empty() {
            return Err(Error::Config("horizons must not be empty".into()));
        }
        let tau = self.dataset.tau();
        self.horizons
            .iter()
            .map(|&h| {
                let k = (h / tau).round();
                if (k * tau - h).abs() > 1e-9 * h.max(1.0) {
                    return Err(Error::Config(format!(
                        "horizon {h} is not an integer multiple of the dataset lag {tau}"
                    )));
                }
                Ok(k as usize)
            })
            .collect()
    }
}
