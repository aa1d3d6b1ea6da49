//! Evaluation metrics and diagnostics: L¹-relative errors, multi-step
//! error tables with per-trial standard errors, per-dimension encoder
//! variance statistics (mean-of-variance / variance-of-mean), a
//! continuity diagnostic for latent codes of periodic families, and
//! latent-code export.

use crate::baselines::LinearROM;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::gdvae::GDVAEModel;
use crate::pde_data::SnapshotPairSet;
use serde::Serialize;
use std::io::Write;

// ---------------------------------------------------------------------------
// L¹-relative error
// ---------------------------------------------------------------------------

/// `‖pred − truth‖₁ / ‖truth‖₁`. Errors when the truth has zero norm.
pub fn l1_relative_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Config(format!(
            "prediction has {} values, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let den: f64 = truth.iter().map(|v| v.abs()).sum();
    if den <= 0.0 {
        return Err(Error::Config("truth has zero L1 norm".into()));
    }
    let num: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(num / den)
}

// ---------------------------------------------------------------------------
// Multi-step evaluation tables
// ---------------------------------------------------------------------------

/// Anything that can roll a state forward: returns predictions at horizons
/// `0..=steps`, entry 0 being the model's reconstruction of the input.
pub trait Forecaster {
    fn forecast(&self, x0: &[f64], steps: usize) -> Result<Vec<Vec<f64>>>;
}

impl Forecaster for GDVAEModel {
    fn forecast(&self, x0: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
        let xt = Tensor::new(vec![1, x0.len()], x0.to_vec())?;
        Ok(self
            .predict_horizons(&xt, steps)?
            .into_iter()
            .map(|t| t.data().to_vec())
            .collect())
    }
}

impl Forecaster for LinearROM {
    fn forecast(&self, x0: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
        self.predict_horizons(x0, steps)
    }
}

/// One test case: an initial state and the reference solution at each
/// requested horizon (same order as the `horizon_steps` argument).
#[derive(Clone, Debug)]
pub struct TestItem {
    pub x0: Vec<f64>,
    pub truths: Vec<Vec<f64>>,
}

/// One table row: a method at a latent dimension, with per-horizon mean
/// error and standard error over training trials.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub method: String,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub trials: usize,
}

/// Error table: rows of methods, columns of horizons (in seconds).
#[derive(Clone, Debug, Default)]
pub struct EvalTable {
    pub horizons_seconds: Vec<f64>,
    pub rows: Vec<EvalRow>,
}

#[derive(Serialize)]
struct SidecarRow<'a> {
    method: &'a str,
    dim: usize,
    trials: usize,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    horizons_seconds: &'a [f64],
    rows: Vec<SidecarRow<'a>>,
}

impl EvalTable {
    pub fn new(horizons_seconds: Vec<f64>) -> Self {
        Self {
            horizons_seconds,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: EvalRow) -> Result<()> {
        if row.mean.len() != self.horizons_seconds.len()
            || row.se.len() != self.horizons_seconds.len()
        {
            return Err(Error::Config(format!(
                "row '{}' has {} columns, table has {}",
                row.method,
                row.mean.len(),
                self.horizons_seconds.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// CSV with header `method,dim,h0,h0_se,h1,h1_se,...`; the horizon
    /// seconds behind the `h<j>` labels live in the JSON sidecar.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut header = String::from("method,dim");
        for j in 0..self.horizons_seconds.len() {
            header.push_str(&format!(",h{j},h{j}_se"));
        }
        writeln!(out, "{header}")?;
        for row in &self.rows {
            let mut line = format!("{},{}", row.method, row.dim);
            for (m, s) in row.mean.iter().zip(&row.se) {
                line.push_str(&format!(",{m},{s}"));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// JSON sidecar recording horizon seconds and per-row trial counts.
    pub fn sidecar_json(&self) -> Result<String> {
        let sidecar = Sidecar {
            horizons_seconds: &self.horizons_seconds,
            rows: self
                .rows
                .iter()
                .map(|r| SidecarRow {
                    method: &r.method,
                    dim: r.dim,
                    trials: r.trials,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Artifact(format!("sidecar encode failed: {e}")))
    }
}

/// Evaluates independently trained trials of one method on a shared test
/// set. For each trial, the per-horizon error is the mean L¹-relative
/// error over test items; the row reports the across-trial mean and
/// standard error (0 for a single trial).
pub fn multistep_eval(
    trials: &[&dyn Forecaster],
    items: &[TestItem],
    horizon_steps: &[usize],
    method: &str,
    dim: usize,
) -> Result<EvalRow> {
    if trials.is_empty() {
        return Err(Error::Config("need at least one trained trial".into()));
    }
    if items.is_empty() || horizon_steps.is_empty() {
        return Err(Error::Config("need test items and horizons".into()));
    }
    for (i, item) in items.iter().enumerate() {
        if item.truths.len() != horizon_steps.len() {
            return Err(Error::Config(format!(
                "test item {i} has {} truths for {} horizons",
                item.truths.len(),
                horizon_steps.len()
            )));
        }
    }
    let max_step = *horizon_steps.iter().max().unwrap();
    let h = horizon_steps.len();
    // per_trial[t][j] = mean error of trial t at horizon j.
    let mut per_trial = vec![vec![0.0f64; h]; trials.len()];
    for (t, model) in trials.iter().enumerate() {
        for item in items {
            let preds = model.forecast(&item.x0, max_step)?;
            if preds.len() != max_step + 1 {
                return Err(Error::Config(format!(
                    "forecaster returned {} horizons, expected {}",
                    preds.len(),
                    max_step + 1
                )));
            }
            for (j, &step) in horizon_steps.iter().enumerate() {
                per_trial[t][j] += l1_relative_error(&preds[step], &item.truths[j])?;
            }
        }
        for v in per_trial[t].iter_mut() {
            *v /= items.len() as f64;
        }
    }
    let nt = trials.len() as f64;
    let mut mean = vec![0.0; h];
    let mut se = vec![0.0; h];
    for j in 0..h {
        let mj: f64 = per_trial.iter().map(|row| row[j]).sum::<f64>() / nt;
        mean[j] = mj;
        if trials.len() > 1 {
            let var: f64 = per_trial
                .iter()
                .map(|row| (row[j] - mj) * (row[j] - mj))
                .sum::<f64>()
                / (nt - 1.0);
            se[j] = (var / nt).sqrt();
        }
    }
    Ok(EvalRow {
        method: method.to_string(),
        dim,
        mean,
        se,
        trials: trials.len(),
    })
}

// ---------------------------------------------------------------------------
// Encoder variance statistics
// ---------------------------------------------------------------------------

/// Per-dimension batch statistics of a Gaussian encoder: `q_mov` is the
/// mean of the predicted variances (how noisy each dimension is), `q_vom`
/// the variance of the predicted means (how much each dimension responds
/// to the data). Informative dimensions have large `q_vom` and small
/// `q_mov`.
#[derive(Clone, Debug)]
pub struct VarianceStats {
    pub q_mov: Vec<f64>,
    pub q_vom: Vec<f64>,
    pub n_b: usize,
}

/// Computes the statistics from per-datum encoder means `[B, n]` and
/// variances `[B, n]`: `q_mov = mean σ²`, `q_vom = mean μ² − (mean μ)²`.
pub fn variance_stats(mu: &Tensor, sigma2: &Tensor) -> Result<VarianceStats> {
    if mu.shape().len() != 2 || mu.shape() != sigma2.shape() {
        return Err(Error::Config(
            "means and variances must be [B, n] with matching shapes".into(),
        ));
    }
    let (b, n) = (mu.shape()[0], mu.shape()[1]);
    if b < 2 {
        return Err(Error::Config(format!(
            "variance statistics need a batch of at least 2 (got {b})"
        )));
    }
    let mut mean_mu = vec![0.0; n];
    let mut mean_mu2 = vec![0.0; n];
    let mut q_mov = vec![0.0; n];
    for row in 0..b {
        for i in 0..n {
            let m = mu.data()[row * n + i];
            mean_mu[i] += m;
            mean_mu2[i] += m * m;
            q_mov[i] += sigma2.data()[row * n + i];
        }
    }
    let bf = b as f64;
    let q_vom: Vec<f64> = (0..n)
        .map(|i| (mean_mu2[i] / bf - (mean_mu[i] / bf) * (mean_mu[i] / bf)).max(0.0))
        .collect();
    q_mov.iter_mut().for_each(|v| *v /= bf);
    Ok(VarianceStats {
        q_mov,
        q_vom,
        n_b: b,
    })
}

/// [`variance_stats`] evaluated on a model's encoder over a data batch
/// (mean path, no sampling).
pub fn model_variance_stats(model: &GDVAEModel, batch: &Tensor) -> Result<VarianceStats> {
    let (mu, sigma2, _) = model.encode_batch(batch, None)?;
    variance_stats(&mu, &sigma2)
}

/// Ranks dimensions by `q_vom / q_mov` (descending) and returns those whose
/// ratio exceeds `threshold ×` the median ratio. When every dimension ties,
/// the result is empty (nothing stands out).
pub fn select_informative_dims(stats: &VarianceStats, threshold: f64) -> Vec<usize> {
    let n = stats.q_vom.len();
    let ratio = |i: usize| stats.q_vom[i] / stats.q_mov[i].max(f64::MIN_POSITIVE);
    let mut sorted: Vec<f64> = (0..n).map(ratio).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mut dims: Vec<usize> = (0..n).filter(|&i| ratio(i) > threshold * median).collect();
    dims.sort_by(|&a, &b| ratio(b).partial_cmp(&ratio(a)).unwrap());
    dims
}

// ---------------------------------------------------------------------------
// Continuity diagnostic
// ---------------------------------------------------------------------------

/// Continuity of latent codes over a periodic one-parameter family. The
/// codes (rows, ordered by the parameter, wrap pair included by cyclic
/// adjacency) are scored as the largest adjacent code distance divided by
/// the median adjacent distance: ≈1 for codes laid out evenly around a
/// loop, ≈grid-size when the codes sweep a line and jump back at the wrap.
/// Unitless, and invariant under rigid motions of the codes.
pub fn continuity_score(codes: &Tensor) -> Result<f64> {
    if codes.shape().len() != 2 {
        return Err(Error::Config("codes must be a [m, n] tensor".into()));
    }
    let (m, n) = (codes.shape()[0], codes.shape()[1]);
    if m < 3 {
        return Err(Error::Config(format!(
            "continuity needs at least 3 grid points (got {m})"
        )));
    }
    let mut dists = Vec::with_capacity(m);
    for i in 0..m {
        let j = (i + 1) % m;
        let a = &codes.data()[i * n..(i + 1) * n];
        let b = &codes.data()[j * n..(j + 1) * n];
        let d: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        dists.push(d);
    }
    let max = dists.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        // All codes coincide: trivially continuous.
        return Ok(1.0);
    }
    let mut sorted = dists;
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    if median == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(max / median)
}

// ---------------------------------------------------------------------------
// Latent-code export
// ---------------------------------------------------------------------------

/// Writes the latent codes of every first snapshot in the set as CSV rows
/// `alpha[,alpha2],t,z1..zN` (mean encoding path, no sampling), preceded by
/// a matching header. Byte-deterministic for a given model and dataset.
pub fn export_latent_codes<W: Write>(
    model: &GDVAEModel,
    pairs: &SnapshotPairSet,
    out: &mut W,
) -> Result<()> {
    let n = model.latent_dim();
    let mut header = match pairs.n_params {
        1 => String::from("alpha"),
        2 => String::from("alpha,alpha2"),
        k => {
            return Err(Error::Config(format!(
                "datasets carry 1 or 2 parameters, this one has {k}"
            )))
        }
    };
    header.push_str(",t");
    for i in 1..=n {
        header.push_str(&format!(",z{i}"));
    }
    writeln!(out, "{header}")?;
    for i in 0..pairs.len() {
        let enc = model.encode(pairs.first_row(i), None)?;
        let mut line = pairs
            .param_row(i)
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        line.push_str(&format!(",{}", pairs.times[i]));
        for z in &enc.z {
            line.push_str(&format!(",{z}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gdvae::{
        build_architecture, ArchKind, LatentMapSpec, ModelSpec, SigmaSpec,
    };
    use crate::manifold::ManifoldAtlas;
    use crate::pde_data::PairSetInfo;
    use crate::rng::stream_rng;
    use rand::Rng;
    use std::f64::consts::TAU;

    // ---- l1_relative_error ----

    #[test]
    fn l1_error_basic_values() {
        let truth = vec![1.0, -2.0, 3.0];
        assert_eq!(l1_relative_error(&truth, &truth).unwrap(), 0.0);
        let double: Vec<f64> = truth.iter().map(|v| 2.0 * v).collect();
        assert!((l1_relative_error(&double, &truth).unwrap() - 1.0).abs() < 1e-15);
        // Perturbation with 5% relative L1 mass.
        let delta = [0.06, 0.12, 0.12]; // sum 0.3 = 0.05 * 6
        let pred: Vec<f64> = truth.iter().zip(&delta).map(|(t, d)| t + d).collect();
        assert!((l1_relative_error(&pred, &truth).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn l1_error_is_scale_invariant_and_zero_iff_equal() {
        let mut rng = stream_rng(40, 0);
        for _ in 0..50 {
            let truth: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let pred: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let e = l1_relative_error(&pred, &truth).unwrap();
            assert!(e >= 0.0);
            let c = rng.gen_range(0.1..10.0);
            let ps: Vec<f64> = pred.iter().map(|v| c * v).collect();
            let ts: Vec<f64> = truth.iter().map(|v| c * v).collect();
            let es = l1_relative_error(&ps, &ts).unwrap();
            assert!((e - es).abs() < 1e-12 * (1.0 + e));
            if pred != truth {
                assert!(e > 0.0);
            }
        }
    }

    #[test]
    fn l1_error_rejects_zero_norm_truth() {
        assert!(l1_relative_error(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(l1_relative_error(&[1.0], &[1.0, 2.0]).is_err());
    }

    // ---- multistep_eval ----

    struct RuleForecaster<F: Fn(&[f64], usize) -> Vec<f64>> {
        rule: F,
    }

    impl<F: Fn(&[f64], usize) -> Vec<f64>> Forecaster for RuleForecaster<F> {
        fn forecast(&self, x0: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
            Ok((0..=steps).map(|k| (self.rule)(x0, k)).collect())
        }
    }

    fn decay_items(rho: f64, m: usize, steps: &[usize]) -> Vec<TestItem> {
        (0..m)
            .map(|i| {
                let x0: Vec<f64> = (0..4).map(|j| ((i * 4 + j) as f64 * 0.31).sin() + 1.5).collect();
                let truths = steps
                    .iter()
                    .map(|&k| x0.iter().map(|v| v * rho.powi(k as i32)).collect())
                    .collect();
                TestItem { x0, truths }
            })
            .collect()
    }

    #[test]
    fn perfect_oracle_scores_zero_everywhere() {
        let steps = [0usize, 1, 2, 4];
        let items = decay_items(0.8, 5, &steps);
        let oracle = RuleForecaster {
            rule: |x0: &[f64], k: usize| x0.iter().map(|v| v * 0.8f64.powi(k as i32)).collect(),
        };
        let row = multistep_eval(&[&oracle], &items, &steps, "oracle", 4).unwrap();
        assert_eq!(row.trials, 1);
        for (m, s) in row.mean.iter().zip(&row.se) {
            assert_eq!(*m, 0.0);
            assert_eq!(*s, 0.0);
        }
    }

    #[test]
    fn single_trial_reports_zero_standard_error() {
        let steps = [1usize, 2];
        let items = decay_items(0.9, 3, &steps);
        let biased = RuleForecaster {
            rule: |x0: &[f64], k: usize| {
                x0.iter().map(|v| v * 0.9f64.powi(k as i32) * 1.07).collect()
            },
        };
        let row = multistep_eval(&[&biased], &items, &steps, "biased", 4).unwrap();
        for (m, s) in row.mean.iter().zip(&row.se) {
            assert!((m - 0.07).abs() < 1e-12);
            assert_eq!(*s, 0.0);
        }
    }

    #[test]
    fn mean_and_standard_error_match_hand_computation() {
        // Two trials whose predictions are uniformly scaled truths: the
        // L1-relative error is exactly the scaling offset, so the mean and
        // the standard error have closed forms.
        let steps = [1usize, 3];
        let items = decay_items(0.85, 4, &steps);
        let t1 = RuleForecaster {
            rule: |x0: &[f64], k: usize| {
                x0.iter().map(|v| v * 0.85f64.powi(k as i32) * 1.02).collect()
            },
        };
        let t2 = RuleForecaster {
            rule: |x0: &[f64], k: usize| {
                x0.iter().map(|v| v * 0.85f64.powi(k as i32) * 1.06).collect()
            },
        };
        let row = multistep_eval(&[&t1, &t2], &items, &steps, "pair", 4).unwrap();
        assert_eq!(row.trials, 2);
        for (m, s) in row.mean.iter().zip(&row.se) {
            assert!((m - 0.04).abs() < 1e-12, "mean {m}");
            // SE = std([0.02, 0.06]) / sqrt(2) = 0.02828.../1.414... = 0.02
            assert!((s - 0.02).abs() < 1e-12, "se {s}");
        }
    }

    #[test]
    fn eval_table_csv_and_sidecar_layout() {
        let mut table = EvalTable::new(vec![0.25, 0.5]);
        table
            .push(EvalRow {
                method: "model-a".into(),
                dim: 2,
                mean: vec![0.125, 0.25],
                se: vec![0.0, 0.0625],
                trials: 5,
            })
            .unwrap();
        table
            .push(EvalRow {
                method: "model-b".into(),
                dim: 3,
                mean: vec![0.5, 1.0],
                se: vec![0.25, 0.125],
                trials: 1,
            })
            .unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "method,dim,h0,h0_se,h1,h1_se");
        assert_eq!(lines.next().unwrap(), "model-a,2,0.125,0,0.25,0.0625");
        assert_eq!(lines.next().unwrap(), "model-b,3,0.5,0.25,1,0.125");

        let sidecar: serde_json::Value =
            serde_json::from_str(&table.sidecar_json().unwrap()).unwrap();
        assert_eq!(sidecar["horizons_seconds"][1], 0.5);
        assert_eq!(sidecar["rows"][0]["trials"], 5);
        assert_eq!(sidecar["rows"][1]["method"], "model-b");

        // Mismatched column count is rejected.
        assert!(table
            .push(EvalRow {
                method: "bad".into(),
                dim: 1,
                mean: vec![0.1],
                se: vec![0.0],
                trials: 1,
            })
            .is_err());
    }

    // ---- variance statistics ----

    fn tensor(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|i| f(i / cols, i % cols)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_mean_has_zero_variance_of_mean() {
        let mu = tensor(6, 3, |_, j| j as f64 * 0.5 - 1.0);
        let s2 = tensor(6, 3, |_, _| 0.04);
        let stats = variance_stats(&mu, &s2).unwrap();
        assert_eq!(stats.n_b, 6);
        for i in 0..3 {
            assert!(stats.q_vom[i].abs() < 1e-15);
            assert!((stats.q_mov[i] - 0.04).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_two_point_batch_has_unit_variance_of_mean() {
        let mu = tensor(2, 1, |b, _| if b == 0 { 1.0 } else { -1.0 });
        let s2 = tensor(2, 1, |_, _| 0.01);
        let stats = variance_stats(&mu, &s2).unwrap();
        assert!((stats.q_vom[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn statistics_match_bruteforce_recomputation() {
        let mut rng = stream_rng(41, 0);
        let (b, n) = (50, 6);
        let mu = tensor(b, n, |_, _| 0.0); // placeholder, rebuilt below
        let _ = mu;
        let mu_data: Vec<f64> = (0..b * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let s2_data: Vec<f64> = (0..b * n).map(|_| rng.gen_range(0.001..2.0)).collect();
        let mu = Tensor::new(vec![b, n], mu_data.clone()).unwrap();
        let s2 = Tensor::new(vec![b, n], s2_data.clone()).unwrap();
        let stats = variance_stats(&mu, &s2).unwrap();
        for i in 0..n {
            let mut mean = 0.0;
            for row in 0..b {
                mean += mu_data[row * n + i];
            }
            mean /= b as f64;
            let mut vom = 0.0;
            let mut mov = 0.0;
            for row in 0..b {
                let d = mu_data[row * n + i] - mean;
                vom += d * d;
                mov += s2_data[row * n + i];
            }
            vom /= b as f64;
            mov /= b as f64;
            assert!((stats.q_vom[i] - vom).abs() < 1e-12);
            assert!((stats.q_mov[i] - mov).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_batches_below_two() {
        let mu = tensor(1, 3, |_, _| 0.0);
        let s2 = tensor(1, 3, |_, _| 1.0);
        assert!(variance_stats(&mu, &s2).is_err());
    }

    #[test]
    fn informative_dims_are_exactly_the_signal_dims() {
        // 10 dims: dims 3 and 7 carry signal (ratio 100), the rest noise
        // (ratio about 1).
        let n = 10;
        let q_mov = vec![0.01; n];
        let mut q_vom = vec![0.01; n];
        q_vom[3] = 1.0;
        q_vom[7] = 1.0;
        let stats = VarianceStats { q_mov, q_vom, n_b: 100 };
        let dims = select_informative_dims(&stats, 10.0);
        assert_eq!(dims.len(), 2);
        assert!(dims.contains(&3) && dims.contains(&7));
    }

    #[test]
    fn identical_dims_select_nothing() {
        let stats = VarianceStats {
            q_mov: vec![0.5; 6],
            q_vom: vec![0.2; 6],
            n_b: 10,
        };
        assert!(select_informative_dims(&stats, 10.0).is_empty());
    }

    // ---- continuity ----

    fn circle_codes(m: usize) -> Tensor {
        tensor(m, 2, |i, j| {
            let th = TAU * i as f64 / m as f64;
            if j == 0 {
                th.cos()
            } else {
                th.sin()
            }
        })
    }

    #[test]
    fn uniform_circle_codes_score_one() {
        let score = continuity_score(&circle_codes(40)).unwrap();
        assert!((score - 1.0).abs() < 1e-10, "score {score}");
    }

    #[test]
    fn linear_codes_with_wrap_jump_score_grid_size() {
        let m = 50;
        let codes = tensor(m, 2, |i, j| if j == 0 { i as f64 / m as f64 } else { 0.0 });
        let score = continuity_score(&codes).unwrap();
        assert!(
            (score - (m as f64 - 1.0)).abs() < 1e-9,
            "score {score} for grid {m}"
        );
    }

    #[test]
    fn score_is_invariant_under_rotation() {
        let mut rng = stream_rng(42, 0);
        let codes = tensor(12, 3, |_, _| rng.gen_range(-1.0..1.0));
        let base = continuity_score(&codes).unwrap();
        // Rotate by a product of Givens rotations.
        let (a, b) = (0.6f64, 1.9f64);
        let rot = |v: &[f64]| -> Vec<f64> {
            let (s1, c1) = a.sin_cos();
            let (s2, c2) = b.sin_cos();
            let w = [
                c1 * v[0] - s1 * v[1],
                s1 * v[0] + c1 * v[1],
                v[2],
            ];
            vec![w[0], c2 * w[1] - s2 * w[2], s2 * w[1] + c2 * w[2]]
        };
        let rotated = Tensor::new(
            vec![12, 3],
            codes
                .data()
                .chunks(3)
                .flat_map(|r| rot(r))
                .collect::<Vec<f64>>(),
        )
        .unwrap();
        let score = continuity_score(&rotated).unwrap();
        assert!((score - base).abs() < 1e-12 * (1.0 + base));
    }

    #[test]
    fn continuity_needs_three_points() {
        let codes = tensor(2, 2, |i, _| i as f64);
        assert!(continuity_score(&codes).is_err());
    }

    #[test]
    fn identical_codes_score_one() {
        let codes = tensor(5, 2, |_, _| 0.7);
        assert_eq!(continuity_score(&codes).unwrap(), 1.0);
    }

    // ---- latent export ----

    fn toy_pairs(m: usize, dim: usize) -> SnapshotPairSet {
        let mut x_first = Vec::new();
        for i in 0..m {
            for j in 0..dim {
                x_first.push(((i * dim + j) as f64 * 0.17).sin());
            }
        }
        SnapshotPairSet {
            dim,
            n_params: 1,
            x_first: x_first.clone(),
            x_second: x_first,
            params: (0..m).map(|i| i as f64 / m as f64).collect(),
            times: (0..m).map(|i| 0.25 * i as f64).collect(),
            info: PairSetInfo {
                source: "toy".into(),
                tau: 0.25,
                noise_sigma: 0.0,
                seed: 0,
                settings: serde_json::Value::Null,
            },
        }
    }

    #[test]
    fn export_rows_match_dataset_and_stay_on_manifold() {
        let spec = ModelSpec {
            arch: ArchKind::Custom {
                hidden: vec![8],
                activation: crate::gdvae::ActKind::Relu,
                final_bias: true,
            },
            input_dim: 4,
            latent_dim: 2,
            latent_map: LatentMapSpec::Identity,
            manifold: Some(ManifoldAtlas::circle().descriptor.clone()),
            sigma_e: SigmaSpec::Fixed { sigma: 0.01 },
            sigma_d: 1.0,
        };
        let model = build_architecture(&spec, 30).unwrap();
        let pairs = toy_pairs(7, 4);
        let mut buf = Vec::new();
        export_latent_codes(&model, &pairs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "alpha,t,z1,z2");
        assert_eq!(lines.len(), 1 + pairs.len());

        let atlas = ManifoldAtlas::circle();
        for line in &lines[1..] {
            let vals: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            assert_eq!(vals.len(), 4);
            let z = &vals[2..];
            let p = atlas.project(z).unwrap();
            let d: f64 = z
                .iter()
                .zip(&p.z)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(d < 1e-9, "exported code off the manifold by {d}");
        }

        // Byte-deterministic.
        let mut buf2 = Vec::new();
        export_latent_codes(&model, &pairs, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }
}
