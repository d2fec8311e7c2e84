//! The feedback particle filter engine.
//!
//! Each particle follows the controlled diffusion
//! X^i_{t+Δt} = X^i_t + a(X^i_t)Δt + σ_B√Δt ξ^i + K(X^i_t)ΔI^i with the
//! per-particle innovation ΔI^i = ΔZ - ½(h(X^i) + ĥ^(N))Δt. The gain field
//! is resynthesized from the pre-update ensemble every step and there is no
//! resampling; the ensemble stays equally weighted throughout.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gain::{gain_field, GainError, GainMethod};
use crate::models::{Geometry, ScalarDiffusionModel};
use crate::sim::{standard_normal, RandomStream, TruthPath};

/// Ensembles whose circular mean resultant falls below this are flagged
/// degenerate and the mean direction tie-breaks to 0.
const DEGENERATE_RESULTANT: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FpfError {
    #[error("ensemble needs at least 2 particles (got {0})")]
    TooFewParticles(usize),
    #[error("particle {index} has non-finite position")]
    NonFinitePosition { index: usize },
    #[error("particle {index} at {value} is outside the circle domain [0, 2π)")]
    CircleOutOfRange { index: usize, value: f64 },
    #[error("ensemble time must be nonnegative and finite (got {0})")]
    BadTime(f64),
    #[error("dt must be positive and finite (got {0})")]
    BadDt(f64),
    #[error("observation increment is not finite ({0})")]
    BadObservation(f64),
    #[error("ensemble geometry does not match the model's")]
    GeometryMismatch,
    #[error("particle {particle} diverged at step {step}")]
    Diverged { step: usize, particle: usize },
    #[error("truth path has no observation increments")]
    EmptyTruth,
    #[error(transparent)]
    Gain(#[from] GainError),
}

/// Time-discretization of the particle update.
///
/// `StratonovichEuler` applies the gain times the innovation with no
/// correction term; `Ito` adds the Wong-Zakai drift Ω = ½σ_W²KK′ per step.
/// The two differ at finite Δt, which makes the discretization discrepancy
/// directly measurable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FpfForm {
    #[default]
    StratonovichEuler,
    Ito,
}

impl std::str::FromStr for FpfForm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stratonovich_euler" => Ok(FpfForm::StratonovichEuler),
            "ito" => Ok(FpfForm::Ito),
            other => Err(format!(
                "unknown form `{other}` (expected stratonovich_euler or ito)"
            )),
        }
    }
}

impl std::fmt::Display for FpfForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FpfForm::StratonovichEuler => "stratonovich_euler",
            FpfForm::Ito => "ito",
        })
    }
}

/// An equally weighted particle ensemble at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    positions: Vec<f64>,
    geometry: Geometry,
    time: f64,
}

impl ParticleEnsemble {
    pub fn new(positions: Vec<f64>, geometry: Geometry, time: f64) -> Result<Self, FpfError> {
        if positions.len() < 2 {
            return Err(FpfError::TooFewParticles(positions.len()));
        }
        for (index, &x) in positions.iter().enumerate() {
            if !x.is_finite() {
                return Err(FpfError::NonFinitePosition { index });
            }
            if geometry == Geometry::Circle && !(0.0..std::f64::consts::TAU).contains(&x) {
                return Err(FpfError::CircleOutOfRange { index, value: x });
            }
        }
        if !(time.is_finite() && time >= 0.0) {
            return Err(FpfError::BadTime(time));
        }
        Ok(Self {
            positions,
            geometry,
            time,
        })
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Posterior summary of an ensemble: mean, spread, and predicted
/// observation rate. On the circle the mean is the circular mean and the
/// spread is the dispersion 1 - R ∈ [0, 1]; `degenerate` marks ensembles
/// whose mean is undefined (vanishing resultant on the circle, coincident
/// particles on the line), where the mean tie-breaks to 0 or the common
/// position respectively.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterEstimate {
    pub mean: f64,
    pub variance: f64,
    pub h_hat: f64,
    pub time: f64,
    pub degenerate: bool,
}

/// Advances every particle one observation step.
///
/// ĥ^(N) is computed once from the pre-update ensemble in storage order,
/// and the gain field is synthesized from the same pre-update positions.
/// Per-particle process noise comes from `stream.substream(i)`.
pub fn fpf_step(
    ensemble: &ParticleEnsemble,
    model: &ScalarDiffusionModel,
    gain_method: GainMethod,
    dz: f64,
    dt: f64,
    stream: RandomStream,
    form: FpfForm,
) -> Result<ParticleEnsemble, FpfError> {
    validate_step_inputs(ensemble.geometry(), model, dz, dt)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..ensemble.len())
        .map(|i| stream.substream(i as u64).rng())
        .collect();
    let positions = step_core(ensemble.positions(), model, gain_method, dz, dt, &mut rngs, form)
        .map_err(|failure| failure.at_step((ensemble.time() / dt).round() as usize))?;
    Ok(ParticleEnsemble {
        positions,
        geometry: ensemble.geometry(),
        time: ensemble.time() + dt,
    })
}

/// Runs the filter over a full truth path: draws the initial ensemble from
/// the model's initial law, then steps through every observation increment,
/// emitting one estimate per increment.
///
/// The initial ensemble uses `stream.substream(0)`; particle i's process
/// noise is the persistent stream `stream.substream(1 + i)`.
pub fn run_fpf(
    model: &ScalarDiffusionModel,
    gain_method: GainMethod,
    truth: &TruthPath,
    n_particles: usize,
    stream: RandomStream,
    form: FpfForm,
) -> Result<Vec<FilterEstimate>, FpfError> {
    if truth.n_steps() == 0 {
        return Err(FpfError::EmptyTruth);
    }
    if n_particles < 2 {
        return Err(FpfError::TooFewParticles(n_particles));
    }
    let dt = truth.dt;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(FpfError::BadDt(dt));
    }

    let mut positions = initial_ensemble(model, n_particles, stream.substream(0));
    let mut rngs: Vec<ChaCha8Rng> = (0..n_particles)
        .map(|i| stream.substream(1 + i as u64).rng())
        .collect();

    let mut estimates = Vec::with_capacity(truth.n_steps());
    for (k, &dz) in truth.obs_increments.iter().enumerate() {
        if !dz.is_finite() {
            return Err(FpfError::BadObservation(dz));
        }
        positions = step_core(&positions, model, gain_method, dz, dt, &mut rngs, form)
            .map_err(|failure| failure.at_step(k))?;
        estimates.push(estimate_positions(
            &positions,
            model,
            (k + 1) as f64 * dt,
        ));
    }
    Ok(estimates)
}

/// Replays the first `k_steps` filter steps of the [`run_fpf`] trajectory
/// with the identical stream layout and returns the particle positions at
/// that point. Lets callers inspect the ensemble a full run actually sees.
pub(crate) fn run_fpf_until(
    model: &ScalarDiffusionModel,
    gain_method: GainMethod,
    truth: &TruthPath,
    n_particles: usize,
    stream: RandomStream,
    form: FpfForm,
    k_steps: usize,
) -> Result<Vec<f64>, FpfError> {
    if truth.n_steps() == 0 {
        return Err(FpfError::EmptyTruth);
    }
    if n_particles < 2 {
        return Err(FpfError::TooFewParticles(n_particles));
    }
    let dt = truth.dt;
    let mut positions = initial_ensemble(model, n_particles, stream.substream(0));
    let mut rngs: Vec<ChaCha8Rng> = (0..n_particles)
        .map(|i| stream.substream(1 + i as u64).rng())
        .collect();
    for k in 0..k_steps.min(truth.n_steps()) {
        let dz = truth.obs_increments[k];
        if !dz.is_finite() {
            return Err(FpfError::BadObservation(dz));
        }
        positions = step_core(&positions, model, gain_method, dz, dt, &mut rngs, form)
            .map_err(|failure| failure.at_step(k))?;
    }
    Ok(positions)
}

/// Draws an ensemble from the model's initial law N(init_mean, init_var),
/// wrapped into the model's domain.
pub(crate) fn initial_ensemble(
    model: &ScalarDiffusionModel,
    n_particles: usize,
    stream: RandomStream,
) -> Vec<f64> {
    let mut rng = stream.rng();
    let sd = model.init_var().sqrt();
    (0..n_particles)
        .map(|_| {
            model
                .geometry()
                .wrap(model.init_mean() + sd * standard_normal(&mut rng))
        })
        .collect()
}

/// Posterior summary of an ensemble.
pub fn estimate(ensemble: &ParticleEnsemble, model: &ScalarDiffusionModel) -> FilterEstimate {
    estimate_positions(ensemble.positions(), model, ensemble.time())
}

pub(crate) fn estimate_positions(
    positions: &[f64],
    model: &ScalarDiffusionModel,
    time: f64,
) -> FilterEstimate {
    let n = positions.len() as f64;
    let h_hat = positions.iter().map(|&x| model.obs(x)).sum::<f64>() / n;
    match model.geometry() {
        Geometry::Line => {
            let mean = positions.iter().sum::<f64>() / n;
            let variance =
                positions.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            FilterEstimate {
                mean,
                variance,
                h_hat,
                time,
                degenerate: variance == 0.0,
            }
        }
        Geometry::Circle => {
            let coeffs = crate::gain::FourierGainCoeffs::from_angles(positions)
                .expect("ensemble positions are finite and nonempty");
            let resultant = coeffs.resultant();
            let degenerate = resultant < DEGENERATE_RESULTANT;
            let mean = if degenerate {
                0.0
            } else {
                Geometry::Circle.wrap(coeffs.p_s().atan2(coeffs.p_c()))
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

enum StepFailure {
    Gain(GainError),
    NonFinite { particle: usize },
}

impl StepFailure {
    fn at_step(self, step: usize) -> FpfError {
        match self {
            StepFailure::Gain(e) => FpfError::Gain(e),
            StepFailure::NonFinite { particle } => FpfError::Diverged { step, particle },
        }
    }
}

/// One particle update pass over raw positions; shared by [`fpf_step`]
/// (fresh per-call noise streams) and [`run_fpf`] (persistent per-particle
/// generators).
fn step_core(
    positions: &[f64],
    model: &ScalarDiffusionModel,
    gain_method: GainMethod,
    dz: f64,
    dt: f64,
    rngs: &mut [ChaCha8Rng],
    form: FpfForm,
) -> Result<Vec<f64>, StepFailure> {
    let n = positions.len();
    let h: Vec<f64> = positions.iter().map(|&x| model.obs(x)).collect();
    let h_hat = h.iter().sum::<f64>() / n as f64;
    let gain = gain_field(positions, model, gain_method).map_err(StepFailure::Gain)?;

    let sqdt = dt.sqrt();
    let sw2 = model.sigma_w() * model.sigma_w();
    let sigma_b = model.sigma_b();
    let geometry = model.geometry();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = positions[i];
        let xi = standard_normal(&mut rngs[i]);
        let innovation = dz - 0.5 * (h[i] + h_hat) * dt;
        let (k, kp) = gain.at_particles()[i];
        let mut gain_term = k * innovation;
        if form == FpfForm::Ito {
            gain_term += 0.5 * sw2 * k * kp * dt;
        }
        // The grouping (drift + noise) + gain_term keeps a zero-gain step
        // bit-identical to the plain Euler-Maruyama update.
        let next = geometry.wrap(x + ((model.drift(x) * dt + sigma_b * sqdt * xi) + gain_term));
        if !next.is_finite() {
            return Err(StepFailure::NonFinite { particle: i });
        }
        out.push(next);
    }
    Ok(out)
}

fn validate_step_inputs(
    ensemble_geometry: Geometry,
    model: &ScalarDiffusionModel,
    dz: f64,
    dt: f64,
) -> Result<(), FpfError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(FpfError::BadDt(dt));
    }
    if !dz.is_finite() {
        return Err(FpfError::BadObservation(dz));
    }
    if ensemble_geometry != model.geometry() {
        return Err(FpfError::GeometryMismatch);
    }
    Ok(())
}
