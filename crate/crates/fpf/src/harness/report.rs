//! Metrics, per-trial outcomes, and the text renderings of every file
//! artifact. Everything here is pure; the orchestrator does the I/O.

use std::fmt::Write as _;

use thiserror::Error;

use crate::gain::GainField;
use crate::sim::TruthPath;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("series lengths differ ({estimated} vs {reference})")]
    LengthMismatch { estimated: usize, reference: usize },
    #[error("series are empty")]
    Empty,
    #[error("reference entry {index} is not positive ({value})")]
    NonPositiveReference { index: usize, value: f64 },
    #[error("dt must be positive and finite (got {0})")]
    BadDt(f64),
}

/// Time-averaged squared relative error between two variance series:
/// (1/T)·Σ dt·((est_k - ref_k)/ref_k)², the dt-weighted discretization of
/// a normalized integral. Invariant under scaling both series together.
pub fn relative_mse(estimated: &[f64], reference: &[f64], dt: f64) -> Result<f64, MetricError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(MetricError::BadDt(dt));
    }
    if estimated.len() != reference.len() {
        return Err(MetricError::LengthMismatch {
            estimated: estimated.len(),
            reference: reference.len(),
        });
    }
    if estimated.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut sum = 0.0;
    for (index, (&e, &r)) in estimated.iter().zip(reference).enumerate() {
        if !(r > 0.0 && r.is_finite()) {
            return Err(MetricError::NonPositiveReference { index, value: r });
        }
        let rel = (e - r) / r;
        sum += dt * rel * rel;
    }
    Ok(sum / (dt * estimated.len() as f64))
}

/// What happened to one trial of a scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrialOutcome {
    Ok {
        /// Relative mse of the variance series against the Kalman-Bucy
        /// reference; absent for models without a closed-form reference.
        mse: Option<f64>,
        /// Root mean squared state-tracking error against the truth path.
        rmse: f64,
        /// Mean wall time per filter step, seconds.
        time_per_iter: f64,
    },
    Collapsed {
        step: usize,
    },
    Diverged {
        step: usize,
    },
}

/// Aggregated result of all trials of one scenario, plus provenance.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub outcomes: Vec<TrialOutcome>,
    pub collapse_count: usize,
    pub divergence_count: usize,
    /// Mean over completed trials; absent when every trial failed.
    pub mean_time_per_iter: Option<f64>,
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map_or_else(|| "na".to_string(), |v| v.to_string())
}

impl RunReport {
    pub fn from_outcomes(config_hash: String, seed: u64, outcomes: Vec<TrialOutcome>) -> Self {
        let collapse_count = outcomes
            .iter()
            .filter(|o| matches!(o, TrialOutcome::Collapsed { .. }))
            .count();
        let divergence_count = outcomes
            .iter()
            .filter(|o| matches!(o, TrialOutcome::Diverged { .. }))
            .count();
        let times: Vec<f64> = outcomes
            .iter()
            .filter_map(|o| match o {
                TrialOutcome::Ok { time_per_iter, .. } => Some(*time_per_iter),
                _ => None,
            })
            .collect();
        let mean_time_per_iter = if times.is_empty() {
            None
        } else {
            Some(times.iter().sum::<f64>() / times.len() as f64)
        };
        RunReport {
            config_hash,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            outcomes,
            collapse_count,
            divergence_count,
            mean_time_per_iter,
        }
    }

    /// The `report.txt` body.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "config_hash={}", self.config_hash);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "version={}", self.version);
        let _ = writeln!(out, "trials={}", self.outcomes.len());
        for (k, outcome) in self.outcomes.iter().enumerate() {
            match outcome {
                TrialOutcome::Ok {
                    mse,
                    rmse,
                    time_per_iter,
                } => {
                    let _ = writeln!(
                        out,
                        "trial_{k} status=ok mse={} rmse={rmse} time_per_iter={time_per_iter}",
                        fmt_opt(*mse)
                    );
                }
                TrialOutcome::Collapsed { step } => {
                    let _ = writeln!(out, "trial_{k} status=collapsed step={step}");
                }
                TrialOutcome::Diverged { step } => {
                    let _ = writeln!(out, "trial_{k} status=diverged step={step}");
                }
            }
        }
        let _ = writeln!(out, "collapse_count={}", self.collapse_count);
        let _ = writeln!(out, "divergence_count={}", self.divergence_count);
        let _ = writeln!(
            out,
            "mean_time_per_iter={}",
            fmt_opt(self.mean_time_per_iter)
        );
        out
    }
}

/// One row of an estimate CSV, filter-agnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateRow {
    pub time: f64,
    pub mean: f64,
    pub variance: f64,
    pub h_hat: f64,
}

/// `truth.csv`: the state at each step end and the increment that led there.
pub fn truth_csv(truth: &TruthPath) -> String {
    let mut out = String::from("t,x,dz\n");
    for k in 0..truth.n_steps() {
        let _ = writeln!(
            out,
            "{},{},{}",
            truth.times[k + 1],
            truth.states[k + 1],
            truth.obs_increments[k]
        );
    }
    out
}

/// `estimate_<filter>.csv`.
pub fn estimate_csv(rows: &[EstimateRow]) -> String {
    let mut out = String::from("t,mean,variance,h_hat\n");
    for row in rows {
        let _ = writeln!(out, "{},{},{},{}", row.time, row.mean, row.variance, row.h_hat);
    }
    out
}

/// `gain_at_<t>.csv`: the synthesized gain field at each particle.
pub fn gain_csv(field: &GainField) -> String {
    let mut out = String::from("particle,K,Kprime\n");
    for (i, &(k, kp)) in field.at_particles().iter().enumerate() {
        let _ = writeln!(out, "{i},{k},{kp}");
    }
    out
}

/// One row of `comparison.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub filter: String,
    pub n_particles: Option<usize>,
    pub alpha: Option<f64>,
    pub mse: Option<f64>,
    pub time_per_iter: Option<f64>,
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("filter,N,alpha,mse,time_per_iter\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.filter,
            row.n_particles
                .map_or_else(|| "na".to_string(), |n| n.to_string()),
            fmt_opt(row.alpha),
            fmt_opt(row.mse),
            fmt_opt(row.time_per_iter)
        );
    }
    out
}
