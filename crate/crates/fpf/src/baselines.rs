//! Reference filters: the Kalman-Bucy filter (exact posterior for linear
//! models) and a continuous-time bootstrap particle filter with likelihood
//! reweighting and systematic resampling.
//!
//! The bootstrap weight update deliberately exponentiates the likelihood
//! factor directly: weight overflow or total underflow is the filter's
//! documented failure mode and is surfaced as a collapse error rather than
//! papered over with log-domain arithmetic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::filter::FilterEstimate;
use crate::models::{Geometry, LinearModelParams, ScalarDiffusionModel};
use crate::sim::{standard_normal, RandomStream, TruthPath};

/// Slack on the ess-below-threshold comparison so rounding in the weight
/// normalization cannot trigger a resample of exactly uniform weights.
const ESS_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("truth path has no observation increments")]
    EmptyTruth,
    #[error("dt must be positive and finite (got {0})")]
    BadDt(f64),
    #[error("observation increment is not finite ({0})")]
    BadObservation(f64),
    #[error("resample threshold must lie in (0, 1] (got {0})")]
    BadThreshold(f64),
    #[error("resample offset must lie in [0, 1) (got {0})")]
    BadOffset(f64),
    #[error("invalid weighted ensemble: {0}")]
    BadEnsemble(String),
    #[error("posterior variance became nonpositive at step {step}; reduce dt")]
    VarianceNotPositive { step: usize },
    #[error("posterior mean became non-finite at step {0}")]
    NonFiniteState(usize),
    #[error("importance weights collapsed to zero total mass")]
    WeightCollapse,
    #[error("importance weights collapsed to zero total mass at step {0}")]
    WeightCollapseAtStep(usize),
    #[error("particle {0} diverged")]
    ParticleDiverged(usize),
    #[error("particle {particle} diverged at step {step}")]
    ParticleDivergedAtStep { step: usize, particle: usize },
}

impl BaselineError {
    /// Attaches a step index to the step-free failure variants.
    fn at_step(self, step: usize) -> Self {
        match self {
            BaselineError::WeightCollapse => BaselineError::WeightCollapseAtStep(step),
            BaselineError::ParticleDiverged(particle) => {
                BaselineError::ParticleDivergedAtStep { step, particle }
            }
            other => other,
        }
    }
}

/// Gaussian posterior of the Kalman-Bucy filter at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    pub mean: f64,
    pub variance: f64,
    pub time: f64,
}

/// Runs the Kalman-Bucy filter along a truth path, Euler-discretized at the
/// truth's dt:
///
/// μ_{k+1} = μ_k + αμ_k dt + (Σ_kγ/σ_W²)(ΔZ_k - γμ_k dt),
/// Σ_{k+1} = Σ_k + (2αΣ_k + σ_B² - γ²Σ_k²/σ_W²) dt.
///
/// The variance flow is a deterministic ODE; only the mean consumes the
/// observations. A nonpositive variance after a step means dt is too large
/// for these parameters and is reported as an error.
pub fn kalman_bucy_run(
    params: &LinearModelParams,
    truth: &TruthPath,
) -> Result<Vec<KalmanState>, BaselineError> {
    if truth.n_steps() == 0 {
        return Err(BaselineError::EmptyTruth);
    }
    let dt = truth.dt;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(BaselineError::BadDt(dt));
    }
    let sw2 = params.sigma_w * params.sigma_w;
    let mut mu = params.init_mean;
    let mut sigma = params.init_var;
    let mut out = Vec::with_capacity(truth.n_steps());
    for (k, &dz) in truth.obs_increments.iter().enumerate() {
        if !dz.is_finite() {
            return Err(BaselineError::BadObservation(dz));
        }
        let gain = sigma * params.gamma / sw2;
        let next_mu = mu + params.alpha * mu * dt + gain * (dz - params.gamma * mu * dt);
        let next_sigma = sigma
            + (2.0 * params.alpha * sigma + params.sigma_b * params.sigma_b
                - params.gamma * params.gamma * sigma * sigma / sw2)
                * dt;
        if !(next_sigma > 0.0 && next_sigma.is_finite()) {
            return Err(BaselineError::VarianceNotPositive { step: k });
        }
        if !next_mu.is_finite() {
            return Err(BaselineError::NonFiniteState(k));
        }
        mu = next_mu;
        sigma = next_sigma;
        out.push(KalmanState {
            mean: mu,
            variance: sigma,
            time: (k + 1) as f64 * dt,
        });
    }
    Ok(out)
}

/// A particle ensemble with importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    positions: Vec<f64>,
    weights: Vec<f64>,
    ess: f64,
}

impl WeightedEnsemble {
    /// Builds an ensemble, checking that the weights are nonnegative and
    /// sum to 1 within 1e-9; the effective sample size 1/Σw² is computed
    /// here and cached.
    pub fn new(positions: Vec<f64>, weights: Vec<f64>) -> Result<Self, BaselineError> {
        if positions.is_empty() || positions.len() != weights.len() {
            return Err(BaselineError::BadEnsemble(format!(
                "{} positions vs {} weights",
                positions.len(),
                weights.len()
            )));
        }
        if let Some(i) = positions.iter().position(|x| !x.is_finite()) {
            return Err(BaselineError::BadEnsemble(format!(
                "position {i} is not finite"
            )));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(BaselineError::BadEnsemble(format!(
                "weight {i} is not a finite nonnegative value"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(BaselineError::BadEnsemble(format!(
                "weights sum to {total}, not 1"
            )));
        }
        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        Ok(Self {
            positions,
            weights,
            ess,
        })
    }

    /// Uniformly weighted ensemble.
    pub fn uniform(positions: Vec<f64>) -> Result<Self, BaselineError> {
        let n = positions.len();
        if n == 0 {
            return Err(BaselineError::BadEnsemble("empty ensemble".to_string()));
        }
        // Build weights that sum to exactly 1, then let the constructor
        // validate: w = 1/n sums within one rounding of 1 for any n.
        Self::new(positions, vec![1.0 / n as f64; n])
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Effective sample size 1/Σw² ∈ [1, N].
    pub fn ess(&self) -> f64 {
        self.ess
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// One bootstrap filter step: Euler-Maruyama propagation, reweighting by
/// the continuous-time likelihood factor exp{(h(X^i)ΔZ - ½h(X^i)²Δt)/σ_W²}
/// evaluated at the propagated particle, renormalization, and a systematic
/// resample when the effective sample size falls below threshold·N.
///
/// Particle i's noise comes from `stream.substream(1 + i)`; the resample
/// offset u comes from `stream.substream(0)`.
pub fn bootstrap_step(
    ens: &WeightedEnsemble,
    model: &ScalarDiffusionModel,
    dz: f64,
    dt: f64,
    stream: RandomStream,
    resample_threshold: f64,
) -> Result<WeightedEnsemble, BaselineError> {
    let mut rngs: Vec<ChaCha8Rng> = (0..ens.len())
        .map(|i| stream.substream(1 + i as u64).rng())
        .collect();
    let mut u_rng = stream.substream(0).rng();
    bootstrap_core(
        ens.positions(),
        ens.weights(),
        model,
        dz,
        dt,
        &mut rngs,
        &mut u_rng,
        resample_threshold,
    )
}

/// Runs the bootstrap filter over a full truth path, one estimate per
/// observation increment. The initial ensemble is drawn from the model's
/// initial law via `stream.substream(0)`, particle i's persistent noise
/// stream is `stream.substream(1 + i)`, and resample offsets come from
/// `stream.substream(1 + n_particles)`.
pub fn bootstrap_run(
    model: &ScalarDiffusionModel,
    truth: &TruthPath,
    n_particles: usize,
    stream: RandomStream,
    resample_threshold: f64,
) -> Result<Vec<FilterEstimate>, BaselineError> {
    if truth.n_steps() == 0 {
        return Err(BaselineError::EmptyTruth);
    }
    if n_particles < 2 {
        return Err(BaselineError::BadEnsemble(format!(
            "bootstrap run needs at least 2 particles (got {n_particles})"
        )));
    }
    let dt = truth.dt;
    let mut ens = WeightedEnsemble::uniform(crate::filter::initial_ensemble(
        model,
        n_particles,
        stream.substream(0),
    ))?;
    let mut rngs: Vec<ChaCha8Rng> = (0..n_particles)
        .map(|i| stream.substream(1 + i as u64).rng())
        .collect();
    let mut u_rng = stream.substream(1 + n_particles as u64).rng();

    let mut estimates = Vec::with_capacity(truth.n_steps());
    for (k, &dz) in truth.obs_increments.iter().enumerate() {
        ens = bootstrap_core(
            ens.positions(),
            ens.weights(),
            model,
            dz,
            dt,
            &mut rngs,
            &mut u_rng,
            resample_threshold,
        )
        .map_err(|e| e.at_step(k))?;
        estimates.push(weighted_estimate(&ens, model, (k + 1) as f64 * dt));
    }
    Ok(estimates)
}

#[allow(clippy::too_many_arguments)]
fn bootstrap_core(
    positions: &[f64],
    weights: &[f64],
    model: &ScalarDiffusionModel,
    dz: f64,
    dt: f64,
    rngs: &mut [ChaCha8Rng],
    u_rng: &mut ChaCha8Rng,
    resample_threshold: f64,
) -> Result<WeightedEnsemble, BaselineError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(BaselineError::BadDt(dt));
    }
    if !dz.is_finite() {
        return Err(BaselineError::BadObservation(dz));
    }
    if !(resample_threshold > 0.0 && resample_threshold <= 1.0) {
        return Err(BaselineError::BadThreshold(resample_threshold));
    }
    let n = positions.len();
    let sqdt = dt.sqrt();
    let sigma_b = model.sigma_b();
    let sw2 = model.sigma_w() * model.sigma_w();
    let geometry = model.geometry();

    // Propagation uses the same update grouping as the truth simulator.
    let mut new_positions = Vec::with_capacity(n);
    for (i, &x) in positions.iter().enumerate() {
        let xi = standard_normal(&mut rngs[i]);
        let next = geometry.wrap(x + (model.drift(x) * dt + sigma_b * sqdt * xi));
        if !next.is_finite() {
            return Err(BaselineError::ParticleDiverged(i));
        }
        new_positions.push(next);
    }

    let mut new_weights: Vec<f64> = new_positions
        .iter()
        .zip(weights)
        .map(|(&x, &w)| {
            let h = model.obs(x);
            w * ((h * dz - 0.5 * h * h * dt) / sw2).exp()
        })
        .collect();
    let total: f64 = new_weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(BaselineError::WeightCollapse);
    }
    for w in &mut new_weights {
        *w /= total;
    }

    let ess = 1.0 / new_weights.iter().map(|w| w * w).sum::<f64>();
    if ess < resample_threshold * n as f64 - ESS_SLACK {
        let u = u_rng.random::<f64>();
        let indices = systematic_resample(&new_weights, n, u)?;
        let resampled = indices.iter().map(|&i| new_positions[i]).collect();
        return Ok(WeightedEnsemble {
            positions: resampled,
            weights: vec![1.0 / n as f64; n],
            ess: n as f64,
        });
    }
    Ok(WeightedEnsemble {
        positions: new_positions,
        weights: new_weights,
        ess,
    })
}

/// Systematic resampling: selects `n_out` indices against the cumulative
/// weights at the stratified positions (j + u)/n_out. Index i is selected
/// either ⌊n_out·w_i⌋ or ⌈n_out·w_i⌉ times.
pub fn systematic_resample(
    weights: &[f64],
    n_out: usize,
    u: f64,
) -> Result<Vec<usize>, BaselineError> {
    if !(0.0..1.0).contains(&u) {
        return Err(BaselineError::BadOffset(u));
    }
    if weights.is_empty() || n_out == 0 {
        return Err(BaselineError::BadEnsemble(
            "resampling needs nonempty weights and output".to_string(),
        ));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return Err(BaselineError::BadEnsemble(format!(
            "weight {i} is not a finite nonnegative value"
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(BaselineError::BadEnsemble(format!(
            "weights sum to {total}, not 1"
        )));
    }

    let mut out = Vec::with_capacity(n_out);
    let mut i = 0;
    let mut csum = weights[0];
    for j in 0..n_out {
        let p = (j as f64 + u) / n_out as f64;
        // The final cumulative sum can round below 1; the last index absorbs
        // the remainder.
        while p >= csum && i < weights.len() - 1 {
            i += 1;
            csum += weights[i];
        }
        out.push(i);
    }
    Ok(out)
}

/// Weighted posterior summary, column-compatible with the unweighted
/// estimates from the main filter.
pub fn weighted_estimate(
    ens: &WeightedEnsemble,
    model: &ScalarDiffusionModel,
    time: f64,
) -> FilterEstimate {
    let h_hat = ens
        .positions()
        .iter()
        .zip(ens.weights())
        .map(|(&x, &w)| w * model.obs(x))
        .sum::<f64>();
    match model.geometry() {
        Geometry::Line => {
            let mean: f64 = ens
                .positions()
                .iter()
                .zip(ens.weights())
                .map(|(&x, &w)| w * x)
                .sum();
            let variance: f64 = ens
                .positions()
                .iter()
                .zip(ens.weights())
                .map(|(&x, &w)| w * (x - mean) * (x - mean))
                .sum();
            FilterEstimate {
                mean,
                variance,
                h_hat,
                time,
                degenerate: variance == 0.0,
            }
        }
        Geometry::Circle => {
            let (mut p_c, mut p_s) = (0.0, 0.0);
            for (&theta, &w) in ens.positions().iter().zip(ens.weights()) {
                p_c += w * theta.cos();
                p_s += w * theta.sin();
            }
            let resultant = p_c.hypot(p_s);
            let degenerate = resultant < 1e-12;
            let mean = if degenerate {
                0.0
            } else {
                Geometry::Circle.wrap(p_s.atan2(p_c))
            };
            FilterEstimate {
                mean,
                variance: (1.0 - resultant).clamp(0.0, 1.0),
                h_hat,
                time,
                degenerate,
            }
        }
    }
}
