//! Experiment orchestration: runs configured scenarios over independent
//! trials, compares filters on shared truth paths, dumps gain fields, and
//! writes every artifact (`truth.csv`, `estimate_<filter>.csv`,
//! `report.txt`, `comparison.csv`, `gain_at_<t>.csv`).
//!
//! Stream layout, shared by every entry point so runs are reproducible
//! across verbs: trial k draws from `RandomStream::new(seed).substream(k)`,
//! the truth path from that trial stream's substream 0, and the filter from
//! its substream 1.

pub mod config;
pub mod report;

pub use config::{ConfigError, FilterKind, ScenarioConfig};
pub use report::{
    comparison_csv, estimate_csv, gain_csv, relative_mse, truth_csv, ComparisonRow, EstimateRow,
    MetricError, RunReport, TrialOutcome,
};

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{bootstrap_run, kalman_bucy_run, BaselineError};
use crate::filter::{run_fpf, run_fpf_until, FpfError};
use crate::gain::gain_field;
use crate::models::{Geometry, ScalarDiffusionModel};
use crate::oracle::{ks_filter_run, GridSpec, OracleError};
use crate::sim::{simulate_truth, RandomStream, SimError, TruthPath};

/// Environment variable consulted for the output directory when the config
/// does not name one.
pub const OUTPUT_DIR_ENV: &str = "FPF_OUT_DIR";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("incompatible comparison configs: {0}")]
    Incompatible(String),
    #[error("gaindump requires filter=fpf")]
    GaindumpNeedsFpf,
    #[error("dump time {at} is outside the run horizon [0, {horizon}]")]
    BadDumpTime { at: f64, horizon: f64 },
    #[error("internal failure: {0}")]
    Internal(String),
}

/// Output directory precedence: the config's `output_dir`, then the
/// `FPF_OUT_DIR` environment variable, then the working directory.
pub fn resolve_output_dir(config: &ScenarioConfig) -> PathBuf {
    if let Some(dir) = &config.output_dir {
        return PathBuf::from(dir);
    }
    match std::env::var(OUTPUT_DIR_ENV) {
        Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from("."),
    }
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}

/// How one filter run on one truth path ended.
enum FilterOutcome {
    Finished(Vec<EstimateRow>),
    Collapsed { step: usize },
    Diverged { step: usize },
}

/// Runs the configured filter on one truth path and reports the wall time
/// of the filter call alone (artifact writing and metrics are excluded).
/// Failures that validation should have ruled out surface as
/// [`HarnessError::Internal`]; in-run degeneracies become outcomes.
fn run_filter(
    config: &ScenarioConfig,
    model: &ScalarDiffusionModel,
    truth: &TruthPath,
    stream: RandomStream,
) -> Result<(FilterOutcome, f64), HarnessError> {
    let internal = |what: &str, e: &dyn std::fmt::Display| {
        HarnessError::Internal(format!("{what}: {e}"))
    };
    match config.filter {
        FilterKind::Fpf => {
            let gain = config
                .gain
                .ok_or_else(|| HarnessError::Internal("fpf config without gain".into()))?;
            let n = config
                .n_particles
                .ok_or_else(|| HarnessError::Internal("fpf config without n_particles".into()))?;
            let start = Instant::now();
            let result = run_fpf(model, gain, truth, n, stream, config.form);
            let elapsed = start.elapsed().as_secs_f64();
            let outcome = match result {
                Ok(estimates) => FilterOutcome::Finished(
                    estimates
                        .iter()
                        .map(|e| EstimateRow {
                            time: e.time,
                            mean: e.mean,
                            variance: e.variance,
                            h_hat: e.h_hat,
                        })
                        .collect(),
                ),
                Err(FpfError::Diverged { step, .. }) => FilterOutcome::Diverged { step },
                Err(e) => return Err(internal("fpf run", &e)),
            };
            Ok((outcome, elapsed))
        }
        FilterKind::Bootstrap => {
            let n = config.n_particles.ok_or_else(|| {
                HarnessError::Internal("bootstrap config without n_particles".into())
            })?;
            let start = Instant::now();
            let result = bootstrap_run(model, truth, n, stream, config.resample_threshold);
            let elapsed = start.elapsed().as_secs_f64();
            let outcome = match result {
                Ok(estimates) => FilterOutcome::Finished(
                    estimates
                        .iter()
                        .map(|e| EstimateRow {
                            time: e.time,
                            mean: e.mean,
                            variance: e.variance,
                            h_hat: e.h_hat,
                        })
                        .collect(),
                ),
                Err(BaselineError::WeightCollapseAtStep(step)) => {
                    FilterOutcome::Collapsed { step }
                }
                Err(BaselineError::ParticleDivergedAtStep { step, .. }) => {
                    FilterOutcome::Diverged { step }
                }
                Err(e) => return Err(internal("bootstrap run", &e)),
            };
            Ok((outcome, elapsed))
        }
        FilterKind::Kalman => {
            let params = *model.linear_params().ok_or_else(|| {
                HarnessError::Internal("kalman filter on a nonlinear model".into())
            })?;
            let start = Instant::now();
            let result = kalman_bucy_run(&params, truth);
            let elapsed = start.elapsed().as_secs_f64();
            let outcome = match result {
                Ok(states) => FilterOutcome::Finished(
                    states
                        .iter()
                        .map(|s| EstimateRow {
                            time: s.time,
                            mean: s.mean,
                            variance: s.variance,
                            h_hat: params.gamma * s.mean,
                        })
                        .collect(),
                ),
                Err(BaselineError::VarianceNotPositive { step }) => {
                    FilterOutcome::Diverged { step }
                }
                Err(BaselineError::NonFiniteState(step)) => FilterOutcome::Diverged { step },
                Err(e) => return Err(internal("kalman run", &e)),
            };
            Ok((outcome, elapsed))
        }
        FilterKind::KsOracle => {
            let spec = GridSpec::for_model(model);
            let start = Instant::now();
            let result = ks_filter_run(model, truth, &spec, &[]);
            let elapsed = start.elapsed().as_secs_f64();
            let outcome = match result {
                Ok(run) => FilterOutcome::Finished(
                    run.summaries
                        .iter()
                        .map(|s| EstimateRow {
                            time: s.time,
                            mean: s.mean,
                            variance: s.variance,
                            h_hat: s.h_hat,
                        })
                        .collect(),
                ),
                Err(OracleError::GridTooSmall { step }) => FilterOutcome::Diverged { step },
                Err(e) => return Err(internal("grid oracle run", &e)),
            };
            Ok((outcome, elapsed))
        }
    }
}

/// Relative mse of the estimated variance series against the Kalman-Bucy
/// reference. `None` for models without a closed-form reference, and for
/// time grids where the reference itself degenerates.
fn variance_mse(
    model: &ScalarDiffusionModel,
    truth: &TruthPath,
    rows: &[EstimateRow],
    dt: f64,
) -> Result<Option<f64>, HarnessError> {
    let Some(params) = model.linear_params() else {
        return Ok(None);
    };
    let Ok(reference) = kalman_bucy_run(params, truth) else {
        return Ok(None);
    };
    let estimated: Vec<f64> = rows.iter().map(|r| r.variance).collect();
    let target: Vec<f64> = reference.iter().map(|s| s.variance).collect();
    Ok(Some(relative_mse(&estimated, &target, dt)?))
}

/// Root mean squared tracking error of the posterior mean against the true
/// state, with circle distances taken along the shortest arc.
fn tracking_rmse(rows: &[EstimateRow], truth: &TruthPath, geometry: Geometry) -> f64 {
    let sum: f64 = rows
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let err = match geometry {
                Geometry::Line => row.mean - truth.states[k + 1],
                Geometry::Circle => {
                    let d = (row.mean - truth.states[k + 1]).rem_euclid(TAU);
                    if d > PI {
                        TAU - d
                    } else {
                        d
                    }
                }
            };
            err * err
        })
        .sum();
    (sum / rows.len() as f64).sqrt()
}

/// Runs every trial of one scenario and writes its artifacts into the
/// resolved output directory: `truth.csv` and `estimate_<filter>.csv` for
/// trial 0, and `report.txt` covering all trials. A diverging truth path or
/// filter marks the trial rather than aborting the run.
pub fn run_scenario(config: &ScenarioConfig) -> Result<RunReport, HarnessError> {
    let model = config.model()?;
    let out_dir = resolve_output_dir(config);
    let mut outcomes = Vec::with_capacity(config.trials);
    for k in 0..config.trials {
        let trial = RandomStream::new(config.seed).substream(k as u64);
        let truth = match simulate_truth(&model, config.dt, config.horizon, trial.substream(0)) {
            Ok(truth) => truth,
            Err(SimError::Diverged { step }) => {
                outcomes.push(TrialOutcome::Diverged { step });
                continue;
            }
            Err(e) => {
                return Err(HarnessError::Internal(format!("truth simulation: {e}")));
            }
        };
        if k == 0 {
            write_file(&out_dir, "truth.csv", &truth_csv(&truth))?;
        }
        let (outcome, elapsed) = run_filter(config, &model, &truth, trial.substream(1))?;
        match outcome {
            FilterOutcome::Finished(rows) => {
                let mse = variance_mse(&model, &truth, &rows, config.dt)?;
                let rmse = tracking_rmse(&rows, &truth, model.geometry());
                if k == 0 {
                    let name = format!("estimate_{}.csv", config.filter.tag());
                    write_file(&out_dir, &name, &estimate_csv(&rows))?;
                }
                outcomes.push(TrialOutcome::Ok {
                    mse,
                    rmse,
                    time_per_iter: elapsed / truth.n_steps() as f64,
                });
            }
            FilterOutcome::Collapsed { step } => outcomes.push(TrialOutcome::Collapsed { step }),
            FilterOutcome::Diverged { step } => outcomes.push(TrialOutcome::Diverged { step }),
        }
    }
    let report = RunReport::from_outcomes(config.provenance_hash(), config.seed, outcomes);
    write_file(&out_dir, "report.txt", &report.render())?;
    Ok(report)
}

/// SHA-256 digest of a truth path's observation increments, little-endian
/// bytes in step order.
fn increments_digest(truth: &TruthPath) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for dz in &truth.obs_increments {
        hasher.update(dz.to_le_bytes());
    }
    hasher.finalize().into()
}

/// Truth paths for every trial of one model-parameter cell, paired with
/// their observation digests. `None` marks a trial whose truth diverged.
struct TruthCell {
    trials: Vec<Option<(TruthPath, [u8; 32])>>,
}

fn build_truth_cell(
    model: &ScalarDiffusionModel,
    seed: u64,
    dt: f64,
    horizon: f64,
    trials: usize,
) -> Result<TruthCell, HarnessError> {
    let mut cell = Vec::with_capacity(trials);
    for k in 0..trials {
        let trial = RandomStream::new(seed).substream(k as u64);
        match simulate_truth(model, dt, horizon, trial.substream(0)) {
            Ok(truth) => {
                let digest = increments_digest(&truth);
                cell.push(Some((truth, digest)));
            }
            Err(SimError::Diverged { .. }) => cell.push(None),
            Err(e) => {
                return Err(HarnessError::Internal(format!("truth simulation: {e}")));
            }
        }
    }
    Ok(TruthCell { trials: cell })
}

/// Canonical rendering of a config's model parameters; configs with equal
/// keys share one truth cell.
fn params_key(config: &ScenarioConfig) -> String {
    config
        .model_params
        .iter()
        .map(|(key, value)| format!("{key}={value}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Runs every config against shared truth paths and writes
/// `comparison.csv` (one row per config) into the first config's output
/// directory. All configs must agree on model name, time grid, seed, and
/// trial count; configs with identical model parameters consume the same
/// truth paths, which are digest-checked before every reuse.
pub fn compare_filters(configs: &[ScenarioConfig]) -> Result<Vec<ComparisonRow>, HarnessError> {
    let Some(first) = configs.first() else {
        return Err(HarnessError::Incompatible("no configs given".into()));
    };
    for config in &configs[1..] {
        if config.model_name != first.model_name {
            return Err(HarnessError::Incompatible(format!(
                "model {} vs {}",
                config.model_name, first.model_name
            )));
        }
        if config.dt != first.dt || config.horizon != first.horizon {
            return Err(HarnessError::Incompatible(format!(
                "time grid {}x{} vs {}x{}",
                config.dt, config.horizon, first.dt, first.horizon
            )));
        }
        if config.seed != first.seed {
            return Err(HarnessError::Incompatible(format!(
                "seed {} vs {}",
                config.seed, first.seed
            )));
        }
        if config.trials != first.trials {
            return Err(HarnessError::Incompatible(format!(
                "trials {} vs {}",
                config.trials, first.trials
            )));
        }
    }

    let mut cells: BTreeMap<String, TruthCell> = BTreeMap::new();
    let mut rows = Vec::with_capacity(configs.len());
    for config in configs {
        let model = config.model()?;
        let key = params_key(config);
        if !cells.contains_key(&key) {
            let cell =
                build_truth_cell(&model, first.seed, first.dt, first.horizon, first.trials)?;
            cells.insert(key.clone(), cell);
        }
        let cell = &cells[&key];

        let mut mses = Vec::new();
        let mut times = Vec::new();
        for (k, slot) in cell.trials.iter().enumerate() {
            let Some((truth, digest)) = slot else {
                continue;
            };
            if increments_digest(truth) != *digest {
                return Err(HarnessError::Internal(
                    "shared truth path changed between runs".into(),
                ));
            }
            let filter_stream = RandomStream::new(config.seed).substream(k as u64).substream(1);
            let (outcome, elapsed) = run_filter(config, &model, truth, filter_stream)?;
            if let FilterOutcome::Finished(estimate_rows) = outcome {
                times.push(elapsed / truth.n_steps() as f64);
                if let Some(mse) = variance_mse(&model, truth, &estimate_rows, config.dt)? {
                    mses.push(mse);
                }
            }
        }
        rows.push(ComparisonRow {
            filter: config.filter.tag().to_string(),
            n_particles: config.n_particles,
            alpha: config.model_params.get("alpha").copied(),
            mse: mean_of(&mses),
            time_per_iter: mean_of(&times),
        });
    }

    let out_dir = resolve_output_dir(first);
    write_file(&out_dir, "comparison.csv", &comparison_csv(&rows))?;
    Ok(rows)
}

fn mean_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Replays trial 0 of an fpf scenario up to the step nearest `at`, then
/// synthesizes and writes the gain field at that ensemble as
/// `gain_at_<t>.csv`. Returns the written path.
pub fn gaindump(config: &ScenarioConfig, at: f64) -> Result<PathBuf, HarnessError> {
    if config.filter != FilterKind::Fpf {
        return Err(HarnessError::GaindumpNeedsFpf);
    }
    if !(at.is_finite() && at >= 0.0 && at <= config.horizon) {
        return Err(HarnessError::BadDumpTime {
            at,
            horizon: config.horizon,
        });
    }
    let model = config.model()?;
    let gain = config
        .gain
        .ok_or_else(|| HarnessError::Internal("fpf config without gain".into()))?;
    let n = config
        .n_particles
        .ok_or_else(|| HarnessError::Internal("fpf config without n_particles".into()))?;
    let trial = RandomStream::new(config.seed).substream(0);
    let truth = simulate_truth(&model, config.dt, config.horizon, trial.substream(0))
        .map_err(|e| HarnessError::Internal(format!("truth simulation: {e}")))?;
    let k_steps = ((at / config.dt).round() as usize).min(truth.n_steps());
    let positions = run_fpf_until(
        &model,
        gain,
        &truth,
        n,
        trial.substream(1),
        config.form,
        k_steps,
    )
    .map_err(|e| HarnessError::Internal(format!("filter run: {e}")))?;
    let field = gain_field(&positions, &model, gain)
        .map_err(|e| HarnessError::Internal(format!("gain synthesis: {e}")))?;
    let out_dir = resolve_output_dir(config);
    write_file(&out_dir, &format!("gain_at_{at}.csv"), &gain_csv(&field))
}
