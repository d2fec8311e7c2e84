//! Reproducible randomness and ground-truth trajectory generation.
//!
//! All randomness in the crate flows from a [`RandomStream`], a (seed,
//! stream) pair over ChaCha8. Substreams are derived by mixing the child
//! index into the stream id, so truth generation, each filter's particle
//! noise, and each trial are statistically independent but individually
//! reproducible from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::models::ScalarDiffusionModel;

/// Errors raised during simulation.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("dt must be positive and finite (got {0})")]
    BadDt(f64),
    #[error("horizon must be at least one step (got horizon {horizon}, dt {dt})")]
    BadHorizon { horizon: f64, dt: f64 },
    #[error("horizon {horizon} is not a whole number of steps of dt {dt}")]
    HorizonNotDivisible { horizon: f64, dt: f64 },
    #[error("state became non-finite at step {step}")]
    Diverged { step: usize },
}

/// A named position in the crate's reproducible randomness tree.
///
/// Two streams with the same `(seed, stream_id)` produce identical draws;
/// distinct stream ids give independent ChaCha8 streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
}

/// Finalizer from splitmix64; bijective on u64, used to spread child indices
/// across the stream-id space so sibling substreams never collide.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl RandomStream {
    /// Root stream for a seed.
    pub fn new(seed: u64) -> Self {
        Self { seed, stream_id: 0 }
    }

    /// The k-th child stream. Children of distinct parents are distinct
    /// because the parent's stream id participates in the mix; the golden
    /// ratio offset keeps the zero id out of the finalizer's fixed point,
    /// so no child ever equals the root.
    pub fn substream(self, k: u64) -> Self {
        const GOLDEN: u64 = 0x9e3779b97f4a7c15;
        Self {
            seed: self.seed,
            stream_id: mix(self
                .stream_id
                .wrapping_mul(GOLDEN)
                .wrapping_add(k)
                .wrapping_add(GOLDEN)),
        }
    }

    /// Instantiates the generator for this stream.
    pub fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    pub fn seed(self) -> u64 {
        self.seed
    }
}

/// Draws one standard normal.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// A simulated hidden trajectory with its observation increments.
///
/// `states` holds X at times 0, dt, …, n·dt and is one element longer than
/// `obs_increments`; `obs_increments[k]` is ΔZ over [k·dt, (k+1)·dt).
#[derive(Debug, Clone, PartialEq)]
pub struct TruthPath {
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub obs_increments: Vec<f64>,
    pub dt: f64,
}

impl TruthPath {
    /// Number of observation steps.
    pub fn n_steps(&self) -> usize {
        self.obs_increments.len()
    }
}

/// Number of steps in a horizon, requiring the horizon to be a whole number
/// of steps within 1e-9 relative tolerance.
pub(crate) fn step_count(dt: f64, horizon: f64) -> Result<usize, SimError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(SimError::BadDt(dt));
    }
    if !horizon.is_finite() || horizon < dt {
        return Err(SimError::BadHorizon { horizon, dt });
    }
    let ratio = horizon / dt;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
        return Err(SimError::HorizonNotDivisible { horizon, dt });
    }
    Ok(n as usize)
}

/// Simulates the hidden state by Euler-Maruyama and accumulates observation
/// increments at the interval's left endpoint:
///
/// X_{k+1} = X_k + a(X_k) dt + σ_B √dt ξ_k,
/// ΔZ_k = h(X_k) dt + σ_W √dt η_k.
///
/// The initial state is drawn from N(init_mean, init_var). Circle-geometry
/// states are wrapped into [0, 2π) after every step.
pub fn simulate_truth(
    model: &ScalarDiffusionModel,
    dt: f64,
    horizon: f64,
    stream: RandomStream,
) -> Result<TruthPath, SimError> {
    let n = step_count(dt, horizon)?;
    let mut rng = stream.rng();
    let sqdt = dt.sqrt();

    let mut x = model.geometry().wrap(
        model.init_mean() + model.init_var().sqrt() * standard_normal(&mut rng),
    );
    let mut states = Vec::with_capacity(n + 1);
    let mut obs_increments = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n + 1);
    states.push(x);
    times.push(0.0);

    for k in 0..n {
        let xi = standard_normal(&mut rng);
        let eta = standard_normal(&mut rng);
        let dz = model.obs(x) * dt + model.sigma_w() * sqdt * eta;
        // Grouped so the filter's zero-gain update reproduces this sum
        // bit for bit.
        x = model
            .geometry()
            .wrap(x + (model.drift(x) * dt + model.sigma_b() * sqdt * xi));
        if !x.is_finite() || !dz.is_finite() {
            return Err(SimError::Diverged { step: k });
        }
        states.push(x);
        obs_increments.push(dz);
        times.push((k + 1) as f64 * dt);
    }

    Ok(TruthPath {
        times,
        states,
        obs_increments,
        dt,
    })
}
