//! The four subcommands: dataset generation, multi-trial training,
//! error-table evaluation, and latent-space analysis. Each writes its
//! artifacts plus a manifest into the run's output directory.

use crate::config::{BaselineSpec, DatasetSpec, RunConfig};
use crate::manifest::RunManifest;
use gdvae_core::analysis::{
    continuity_score, export_latent_codes, l1_relative_error, model_variance_stats,
    multistep_eval, select_informative_dims, EvalRow, EvalTable, Forecaster, TestItem,
};
use gdvae_core::baselines::{cole_hopf_rom, dmd, pod_pairs, save_rom};
use gdvae_core::diffcore::Tensor;
use gdvae_core::gdvae::{
    build_architecture, load_model, load_training_state, save_model, save_training_state,
    train_range, write_history_csv, write_history_rows, GDVAEModel,
};
use gdvae_core::pde_data::{
    brusselator_ic, brusselator_solve, make_brusselator_dataset, make_burgers_dataset,
    sample_ic, Field1D, SnapshotPairSet,
};
use gdvae_core::rng::derive_seed;
use gdvae_core::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

/// Seed-stream namespace for trial seeds: trial `t` trains with
/// `derive_seed(master, TRIAL_STREAM + t)`, decorrelated from the dataset
/// generator's streams.
const TRIAL_STREAM: u64 = 0x5452_4c00; // "TRL" << 8

pub fn trial_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.trials)
        .map(|t| derive_seed(cfg.seed, TRIAL_STREAM + t as u64))
        .collect()
}

fn ckpt_name(t: usize) -> String {
    format!("trial{t}.ckpt")
}

fn state_name(t: usize) -> String {
    format!("trial{t}.state")
}

fn history_name(t: usize) -> String {
    format!("trial{t}.history.csv")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        Error::Artifact(format!("cannot create {}: {e}", path.display()))
    })?))
}

fn open_artifact(path: &Path, hint: &str) -> Result<BufReader<File>> {
    if !path.exists() {
        return Err(Error::Artifact(format!(
            "missing artifact {} ({hint})",
            path.display()
        )));
    }
    Ok(BufReader::new(File::open(path).map_err(|e| {
        Error::Artifact(format!("cannot open {}: {e}", path.display()))
    })?))
}

fn load_dataset(cfg: &RunConfig) -> Result<SnapshotPairSet> {
    let path = cfg.dataset_path();
    if path == cfg.out_dir.join("dataset.bin") {
        RunManifest::check_artifact(&cfg.out_dir, "generate", "dataset.bin")?;
    }
    let mut reader = open_artifact(&path, "run `gdvae generate` first")?;
    let set = SnapshotPairSet::read_binary(&mut reader)?;
    if let Some(model) = &cfg.model {
        if set.dim != model.input_dim {
            return Err(Error::Config(format!(
                "dataset {} has state dimension {}, model.input_dim is {}",
                path.display(),
                set.dim,
                model.input_dim
            )));
        }
    }
    Ok(set)
}

fn load_trial_model(cfg: &RunConfig, t: usize) -> Result<GDVAEModel> {
    let name = ckpt_name(t);
    RunManifest::check_artifact(&cfg.out_dir, "train", &name)?;
    let mut reader = open_artifact(&cfg.out_dir.join(&name), "run `gdvae train` first")?;
    load_model(&mut reader)
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let started = Instant::now();
    let manifest = RunManifest::begin("generate", cfg, Vec::new())?;

    let set = match &cfg.dataset {
        DatasetSpec::Burgers {
            family,
            alpha_range,
            m,
            n,
            nu,
            tau,
            t_range,
            noise_sigma,
        } => make_burgers_dataset(
            *family,
            *alpha_range,
            *m,
            *n,
            *nu,
            *tau,
            *t_range,
            *noise_sigma,
            cfg.seed,
        )?,
        DatasetSpec::Brusselator {
            n_traj,
            l,
            params,
            t_transient,
            t_end,
            tau,
            noise_sigma,
        } => make_brusselator_dataset(
            *n_traj,
            *l,
            params,
            *t_transient,
            *t_end,
            *tau,
            *noise_sigma,
            cfg.seed,
        )?,
    };

    let path = cfg.out_dir.join("dataset.bin");
    let mut out = create(&path)?;
    set.write_binary(&mut out)?;
    out.flush()?;
    manifest.finalize(started, &["dataset.bin".to_string()])?;
    println!(
        "generated {} pairs of dimension {} -> {}",
        set.len(),
        set.dim,
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrialOutcome {
    trial: usize,
    epochs_run: usize,
    final_loss: Option<f64>,
}

pub fn cmd_train(cfg: &RunConfig, threads: usize) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let started = Instant::now();
    let pairs = load_dataset(cfg)?;
    let spec = cfg.resolved_model()?;
    let base = cfg.training()?.clone();
    let seeds = trial_seeds(cfg);
    let manifest = RunManifest::begin("train", cfg, seeds.clone())?;

    let run_trial = |t: usize| -> Result<TrialOutcome> {
        let mut tc = base.clone();
        tc.seed = seeds[t];
        let ckpt_path = cfg.out_dir.join(ckpt_name(t));
        let state_path = cfg.out_dir.join(state_name(t));
        let history_path = cfg.out_dir.join(history_name(t));

        let resumable = cfg.resume && ckpt_path.exists() && state_path.exists();
        let (mut model, start_epoch) = if resumable {
            let mut model = load_model(&mut open_artifact(&ckpt_path, "checkpoint")?)?;
            let done = load_training_state(&mut model, &mut open_artifact(&state_path, "state")?)?;
            (model, done)
        } else {
            (build_architecture(&spec, seeds[t])?, 0)
        };
        if start_epoch >= tc.epochs {
            return Ok(TrialOutcome {
                trial: t,
                epochs_run: 0,
                final_loss: None,
            });
        }
        let history = train_range(&mut model, &pairs, &tc, start_epoch, tc.epochs)?;

        let mut out = create(&ckpt_path)?;
        save_model(&model, &mut out)?;
        out.flush()?;
        let mut out = create(&state_path)?;
        save_training_state(&model, tc.epochs, &mut out)?;
        out.flush()?;
        if start_epoch > 0 && history_path.exists() {
            let mut out = BufWriter::new(
                std::fs::OpenOptions::new()
                    .append(true)
                    .open(&history_path)?,
            );
            write_history_rows(&history, &mut out)?;
            out.flush()?;
        } else {
            let mut out = create(&history_path)?;
            write_history_csv(&history, &mut out)?;
            out.flush()?;
        }
        Ok(TrialOutcome {
            trial: t,
            epochs_run: history.len(),
            final_loss: history.last().map(|e| e.total),
        })
    };

    let outcomes: Vec<TrialOutcome> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            (0..cfg.trials)
                .into_par_iter()
                .map(run_trial)
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        (0..cfg.trials)
            .map(run_trial)
            .collect::<Result<Vec<_>>>()?
    };

    for o in &outcomes {
        match o.final_loss {
            Some(loss) => println!(
                "trial {}: ran {} epochs, final loss {loss:.6e}",
                o.trial, o.epochs_run
            ),
            None => println!("trial {}: already complete, nothing to do", o.trial),
        }
    }
    let mut names = Vec::new();
    for t in 0..cfg.trials {
        names.push(ckpt_name(t));
        names.push(state_name(t));
        names.push(history_name(t));
    }
    manifest.finalize(started, &names)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Builds the held-out test set: initial states on a uniform parameter
/// grid with reference solutions at every horizon.
fn build_test_items(cfg: &RunConfig, steps: &[usize]) -> Result<Vec<TestItem>> {
    let n_test = cfg.eval.n_test;
    let mut items = Vec::with_capacity(n_test);
    match &cfg.dataset {
        DatasetSpec::Burgers {
            family,
            alpha_range,
            n,
            nu,
            ..
        } => {
            let (lo, hi) = alpha_range.unwrap_or_else(|| family.natural_range());
            // Second parameter (if any) sweeps the range in golden-ratio
            // steps so the grid does not collapse onto a diagonal.
            const GOLDEN: f64 = 0.618_033_988_749_894_9;
            for i in 0..n_test {
                let frac = (i as f64 + 0.5) / n_test as f64;
                let params: Vec<f64> = match family.param_count() {
                    1 => vec![lo + frac * (hi - lo)],
                    _ => vec![
                        lo + frac * (hi - lo),
                        lo + ((i as f64 + 0.5) * GOLDEN).fract() * (hi - lo),
                    ],
                };
                let u0 = sample_ic(family.condition(&params)?, *n)?;
                let sols = gdvae_core::pde_data::burgers_solve_spectral_multi(
                    &u0,
                    *nu,
                    &cfg.horizons,
                )?;
                items.push(TestItem {
                    x0: u0.values().to_vec(),
                    truths: sols.iter().map(|s| s.values().to_vec()).collect(),
                });
            }
        }
        DatasetSpec::Brusselator {
            l,
            params,
            t_transient,
            tau,
            ..
        } => {
            let max_step = *steps.iter().max().unwrap();
            for i in 0..n_test {
                let alpha = (i as f64 + 0.5) / n_test as f64;
                let ic = brusselator_ic(alpha, *l, *l)?;
                // Settle onto the attractor, then snapshot every lag.
                let warm = brusselator_solve(&ic, params, *t_transient, *t_transient)?;
                let s0 = &warm.last().expect("transient rollout has snapshots").1;
                let rolled = if max_step > 0 {
                    brusselator_solve(s0, params, max_step as f64 * tau, *tau)?
                } else {
                    vec![(0.0, s0.clone())]
                };
                if rolled.len() <= max_step {
                    return Err(Error::Solver(format!(
                        "reference rollout produced {} snapshots, needed {}",
                        rolled.len(),
                        max_step + 1
                    )));
                }
                items.push(TestItem {
                    x0: s0.flatten(),
                    truths: steps.iter().map(|&k| rolled[k].1.flatten()).collect(),
                });
            }
        }
    }
    Ok(items)
}

/// Mean per-horizon L¹-relative error of per-item predictions supplied by
/// a closure; used for baselines that predict in seconds, not steps.
fn direct_row(
    items: &[TestItem],
    n_horizons: usize,
    method: &str,
    dim: usize,
    mut predict: impl FnMut(&TestItem, usize) -> Result<Vec<f64>>,
) -> Result<EvalRow> {
    let mut mean = vec![0.0; n_horizons];
    for item in items {
        for (j, m) in mean.iter_mut().enumerate() {
            let pred = predict(item, j)?;
            *m += l1_relative_error(&pred, &item.truths[j])?;
        }
    }
    mean.iter_mut().for_each(|m| *m /= items.len() as f64);
    Ok(EvalRow {
        method: method.to_string(),
        dim,
        mean,
        se: vec![0.0; n_horizons],
        trials: 1,
    })
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let started = Instant::now();
    let steps = cfg.horizon_steps()?;
    let pairs = load_dataset(cfg)?;
    let manifest = RunManifest::begin("eval", cfg, trial_seeds(cfg))?;
    let items = build_test_items(cfg, &steps)?;

    let mut table = EvalTable::new(cfg.horizons.clone());
    let mut artifact_names = vec!["eval.csv".to_string(), "eval.json".to_string()];

    if cfg.eval.include_model {
        let spec = cfg.resolved_model()?;
        let models: Vec<GDVAEModel> = (0..cfg.trials)
            .map(|t| load_trial_model(cfg, t))
            .collect::<Result<_>>()?;
        let forecasters: Vec<&dyn Forecaster> =
            models.iter().map(|m| m as &dyn Forecaster).collect();
        table.push(multistep_eval(
            &forecasters,
            &items,
            &steps,
            "gd-vae",
            spec.latent_dim,
        )?)?;
    }

    let first = Tensor::new(vec![pairs.len(), pairs.dim], pairs.x_first.clone())?;
    let second = Tensor::new(vec![pairs.len(), pairs.dim], pairs.x_second.clone())?;
    for baseline in &cfg.baselines {
        match baseline {
            BaselineSpec::Dmd {
                rank,
                mean_subtract,
            } => {
                let rom = dmd(&first, &second, *rank, *mean_subtract)?;
                let name = format!("dmd-{rank}.rom");
                let mut out = create(&cfg.out_dir.join(&name))?;
                save_rom(&rom, &mut out)?;
                out.flush()?;
                artifact_names.push(name);
                let f: Vec<&dyn Forecaster> = vec![&rom];
                table.push(multistep_eval(&f, &items, &steps, "dmd", *rank)?)?;
            }
            BaselineSpec::Pod {
                rank,
                mean_subtract,
            } => {
                let rom = pod_pairs(&first, &second, *rank, *mean_subtract)?;
                let name = format!("pod-{rank}.rom");
                let mut out = create(&cfg.out_dir.join(&name))?;
                save_rom(&rom, &mut out)?;
                out.flush()?;
                artifact_names.push(name);
                let f: Vec<&dyn Forecaster> = vec![&rom];
                table.push(multistep_eval(&f, &items, &steps, "pod", *rank)?)?;
            }
            BaselineSpec::ColeHopf { modes } => {
                let nu = match &cfg.dataset {
                    DatasetSpec::Burgers { nu, .. } => *nu,
                    _ => {
                        return Err(Error::Config(
                            "the cole-hopf baseline applies only to Burgers datasets".into(),
                        ))
                    }
                };
                let row = direct_row(&items, steps.len(), "cole-hopf", *modes, |item, j| {
                    let pred =
                        cole_hopf_rom(&Field1D::new(item.x0.clone()), nu, cfg.horizons[j], *modes)?;
                    Ok(pred.values().to_vec())
                })?;
                table.push(row)?;
            }
            BaselineSpec::Oracle => {
                let row = direct_row(&items, steps.len(), "oracle", 0, |item, j| {
                    Ok(item.truths[j].clone())
                })?;
                table.push(row)?;
            }
        }
    }

    let csv_path = cfg.out_dir.join("eval.csv");
    let mut out = create(&csv_path)?;
    table.write_csv(&mut out)?;
    out.flush()?;
    std::fs::write(cfg.out_dir.join("eval.json"), table.sidecar_json()?)?;

    for row in &table.rows {
        let cells: Vec<String> = row
            .mean
            .iter()
            .zip(&row.se)
            .map(|(m, s)| format!("{m:.3e}±{s:.1e}"))
            .collect();
        println!(
            "{}({}) over {} trial(s): {}",
            row.method,
            row.dim,
            row.trials,
            cells.join("  ")
        );
    }
    println!("table -> {}", csv_path.display());
    manifest.finalize(started, &artifact_names)
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

/// Latent codes of a uniform cyclic parameter grid (one-parameter Burgers
/// families only): grid point `i` is `alpha = lo + i·(hi−lo)/grid`, so the
/// wrap pair (last, first) closes the loop for periodic families.
fn continuity_codes(cfg: &RunConfig, model: &GDVAEModel, grid: usize) -> Result<Option<Tensor>> {
    let DatasetSpec::Burgers { family, alpha_range, n, .. } = &cfg.dataset else {
        return Ok(None);
    };
    if family.param_count() != 1 {
        return Ok(None);
    }
    let (lo, hi) = alpha_range.unwrap_or_else(|| family.natural_range());
    let mut data = Vec::with_capacity(grid * model.latent_dim());
    for i in 0..grid {
        let alpha = lo + (hi - lo) * i as f64 / grid as f64;
        let u = sample_ic(family.condition(&[alpha])?, *n)?;
        let enc = model.encode(u.values(), None)?;
        data.extend_from_slice(&enc.z);
    }
    Ok(Some(Tensor::new(vec![grid, model.latent_dim()], data)?))
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let started = Instant::now();
    let pairs = load_dataset(cfg)?;
    let manifest = RunManifest::begin("analyze", cfg, trial_seeds(cfg))?;

    let rows = pairs.len().min(cfg.analyze.batch_cap);
    let batch = Tensor::new(
        vec![rows, pairs.dim],
        pairs.x_first[..rows * pairs.dim].to_vec(),
    )?;

    let mut variance = String::from("trial,dim,q_mov,q_vom,ratio,selected\n");
    let mut continuity = String::from(
        "# continuity score (our operationalization): max adjacent latent-code distance \
         over the cyclic parameter grid, divided by the median adjacent distance\n\
         trial,score\n",
    );
    let mut have_continuity = false;
    let mut artifact_names = vec!["variance.csv".to_string()];

    for t in 0..cfg.trials {
        let model = load_trial_model(cfg, t)?;
        let stats = model_variance_stats(&model, &batch)?;
        let selected = select_informative_dims(&stats, cfg.analyze.threshold);
        for i in 0..stats.q_mov.len() {
            let ratio = stats.q_vom[i] / stats.q_mov[i].max(f64::MIN_POSITIVE);
            variance.push_str(&format!(
                "{t},{i},{},{},{ratio},{}\n",
                stats.q_mov[i],
                stats.q_vom[i],
                u8::from(selected.contains(&i))
            ));
        }
        println!(
            "trial {t}: batch {} informative dims {:?}",
            stats.n_b, selected
        );

        if let Some(codes) = continuity_codes(cfg, &model, cfg.analyze.grid)? {
            let score = continuity_score(&codes)?;
            continuity.push_str(&format!("{t},{score}\n"));
            have_continuity = true;
            println!("trial {t}: continuity score {score:.3}");
        }

        let name = format!("trial{t}.latent.csv");
        let mut out = create(&cfg.out_dir.join(&name))?;
        export_latent_codes(&model, &pairs, &mut out)?;
        out.flush()?;
        artifact_names.push(name);
    }

    std::fs::write(cfg.out_dir.join("variance.csv"), variance)?;
    if have_continuity {
        std::fs::write(cfg.out_dir.join("continuity.csv"), continuity)?;
        artifact_names.push("continuity.csv".to_string());
    } else {
        println!("continuity diagnostic skipped: needs a one-parameter Burgers family");
    }
    manifest.finalize(started, &artifact_names)
}

/// Resolves the worker-thread count: the `--threads` flag, the
/// `GDVAE_THREADS` environment variable, then 1.
pub fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("GDVAE_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(1)
    .max(1)
}

/// Maps library errors onto the documented exit codes: 2 configuration,
/// 3 solver, 4 training, 5 missing or corrupt artifact, 1 everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Solver(_) => 3,
        Error::Training(_) => 4,
        Error::Artifact(_) => 5,
        Error::Io(_) => 1,
    }
}
