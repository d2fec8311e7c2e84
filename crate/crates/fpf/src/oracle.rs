//! Grid-based ground truth: a Kolmogorov-forward (Fokker-Planck) evolver, a
//! Kushner-Stratonovich posterior solver built on it by operator splitting,
//! and gain synthesis by quadrature against a grid density.
//!
//! Everything here is test-side machinery for validating the particle
//! filters; nothing in this module runs inside a filter loop. All solvers
//! are line-geometry only.

use thiserror::Error;

use crate::models::{Geometry, ScalarDiffusionModel};
use crate::sim::TruthPath;

/// Explicit-scheme safety factor; sub-step counts are chosen so both the
/// diffusion number and the advection CFL number stay at or below this.
const CFL_SAFETY: f64 = 0.45;

/// Per-step ceiling on the trapezoid mass of the two boundary cells of the
/// posterior; more mass than this at the edges means the grid is clipping
/// real probability.
const BOUNDARY_MASS_LIMIT: f64 = 1e-6;

/// Node count used when a grid is sized automatically from a model.
pub const DEFAULT_GRID_CELLS: usize = 800;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("density mass is not positive and finite")]
    NonPositiveMass,
    #[error("grid solvers support line geometry only")]
    CircleUnsupported,
    #[error("truth path has no observation increments")]
    EmptyTruth,
    #[error("boundary mass exceeded {BOUNDARY_MASS_LIMIT:e} at step {step}; widen the grid")]
    GridTooSmall { step: usize },
}

/// Extent and resolution of a solver grid. `n_cells` counts grid nodes;
/// density values live on the nodes and integrals are trapezoidal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n_cells: usize,
}

impl GridSpec {
    /// Sizes a grid from the model's initial law: mean plus or minus 8
    /// widths, where the width also covers the stationary spread of a
    /// mean-reverting linear model, then widened until the drift points
    /// inward at both edges so attractors stay interior.
    pub fn for_model(model: &ScalarDiffusionModel) -> GridSpec {
        let mut width = model.init_var().sqrt().max(1e-3);
        if let Some(lp) = model.linear_params() {
            if lp.alpha < 0.0 {
                width = width.max(lp.sigma_b / (2.0 * lp.alpha.abs()).sqrt());
            }
        }
        let mut lo = model.init_mean() - 8.0 * width;
        let mut hi = model.init_mean() + 8.0 * width;
        for _ in 0..4 {
            if model.drift(lo) < 0.0 {
                lo -= 4.0 * width;
            }
            if model.drift(hi) > 0.0 {
                hi += 4.0 * width;
            }
        }
        GridSpec {
            lo,
            hi,
            n_cells: DEFAULT_GRID_CELLS,
        }
    }
}

/// A nonnegative density sampled on uniform grid nodes, with the mass
/// clipped away by positivity enforcement recorded as a diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    grid_lo: f64,
    grid_hi: f64,
    n_cells: usize,
    values: Vec<f64>,
    dx: f64,
    clip_mass: f64,
}

fn trapezoid(values: &[f64], dx: f64) -> f64 {
    let sum: f64 = values.iter().sum();
    dx * (sum - 0.5 * (values[0] + values[values.len() - 1]))
}

impl GridDensity {
    /// Builds a density from raw node values; values must be finite and
    /// nonnegative. The result is not normalized.
    pub fn new(spec: &GridSpec, values: Vec<f64>) -> Result<Self, OracleError> {
        if !(spec.lo.is_finite() && spec.hi.is_finite() && spec.lo < spec.hi) {
            return Err(OracleError::BadGrid(format!(
                "bounds [{}, {}] are not an increasing finite pair",
                spec.lo, spec.hi
            )));
        }
        if spec.n_cells < 3 {
            return Err(OracleError::BadGrid(format!(
                "need at least 3 nodes (got {})",
                spec.n_cells
            )));
        }
        if values.len() != spec.n_cells {
            return Err(OracleError::BadGrid(format!(
                "{} values for {} nodes",
                values.len(),
                spec.n_cells
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(OracleError::BadGrid(
                "values must be finite and nonnegative".to_string(),
            ));
        }
        Ok(Self {
            grid_lo: spec.lo,
            grid_hi: spec.hi,
            n_cells: spec.n_cells,
            dx: (spec.hi - spec.lo) / (spec.n_cells - 1) as f64,
            values,
            clip_mass: 0.0,
        })
    }

    /// Normalized Gaussian density on the grid.
    pub fn gaussian(spec: &GridSpec, mean: f64, var: f64) -> Result<Self, OracleError> {
        if !(var > 0.0 && var.is_finite() && mean.is_finite()) {
            return Err(OracleError::BadGrid(format!(
                "gaussian needs finite mean and positive variance (got {mean}, {var})"
            )));
        }
        let dx = (spec.hi - spec.lo) / (spec.n_cells.max(2) - 1) as f64;
        let values = (0..spec.n_cells)
            .map(|i| {
                let z = spec.lo + i as f64 * dx - mean;
                (-0.5 * z * z / var).exp()
            })
            .collect();
        let mut density = Self::new(spec, values)?;
        density.normalize()?;
        Ok(density)
    }

    pub fn grid_lo(&self) -> f64 {
        self.grid_lo
    }

    pub fn grid_hi(&self) -> f64 {
        self.grid_hi
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Total mass removed so far by clipping negative values to zero.
    pub fn clip_mass(&self) -> f64 {
        self.clip_mass
    }

    /// Position of node i.
    pub fn node(&self, i: usize) -> f64 {
        self.grid_lo + i as f64 * self.dx
    }

    /// Trapezoid integral of the stored values.
    pub fn mass(&self) -> f64 {
        trapezoid(&self.values, self.dx)
    }

    /// Trapezoid integral of f(x)·p(x).
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        let weighted: Vec<f64> = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &p)| f(self.node(i)) * p)
            .collect();
        trapezoid(&weighted, self.dx)
    }

    pub fn mean(&self) -> f64 {
        self.expect(|x| x)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.expect(|x| (x - m) * (x - m))
    }

    /// Rescales to unit trapezoid mass. A mass already within 1e-12 of 1 is
    /// left untouched so exact fixed points of the evolution stay bitwise
    /// fixed.
    pub fn normalize(&mut self) -> Result<(), OracleError> {
        let mass = self.mass();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(OracleError::NonPositiveMass);
        }
        if (mass - 1.0).abs() > 1e-12 {
            for v in &mut self.values {
                *v /= mass;
            }
        }
        Ok(())
    }
}

/// Evolves a density through the Kolmogorov forward equation
/// ∂p/∂t = -∂(ap)/∂x + (σ_B²/2)∂²p/∂x² for a duration dt and renormalizes.
///
/// The update is a conservative flux form: upwind drift flux plus centered
/// diffusion flux at each node interface, zero flux at both ends. When dt
/// violates the explicit stability bounds the step is split into equal
/// sub-steps that satisfy them, so no dt is rejected. The combined scheme
/// is monotone under those bounds; any negative values that rounding still
/// produces are clipped to zero and recorded in the clip-mass diagnostic.
pub fn fp_step(density: &GridDensity, model: &ScalarDiffusionModel, dt: f64) -> GridDensity {
    assert!(dt > 0.0 && dt.is_finite(), "fp_step needs positive dt");
    let mut out = fp_step_raw(density, model, dt);
    out.normalize()
        .expect("zero-flux evolution of a unit-mass density keeps positive mass");
    out
}

/// The flux-form update without the final renormalization; exposed within
/// the crate so mass conservation can be checked directly.
pub(crate) fn fp_step_raw(
    density: &GridDensity,
    model: &ScalarDiffusionModel,
    dt: f64,
) -> GridDensity {
    let n = density.n_cells;
    let dx = density.dx;
    let diff = 0.5 * model.sigma_b() * model.sigma_b();

    // Drift is time-independent, so interface velocities are fixed for the
    // whole step.
    let a_mid: Vec<f64> = (0..n - 1)
        .map(|i| model.drift(density.grid_lo + (i as f64 + 0.5) * dx))
        .collect();
    let max_a = a_mid.iter().fold(0.0f64, |m, a| m.max(a.abs()));

    let diffusion_subs = (model.sigma_b() * model.sigma_b() * dt / (CFL_SAFETY * dx * dx)).ceil();
    let advection_subs = (max_a * dt / (CFL_SAFETY * dx)).ceil();
    let n_sub = diffusion_subs.max(advection_subs).max(1.0) as usize;
    let tau = dt / n_sub as f64;

    let mut v = density.values.clone();
    let mut clip = density.clip_mass;
    // flux[j] sits between nodes j-1 and j; flux[0] and flux[n] stay zero.
    let mut flux = vec![0.0; n + 1];
    for _ in 0..n_sub {
        for j in 1..n {
            let a = a_mid[j - 1];
            let upwind = if a >= 0.0 { v[j - 1] } else { v[j] };
            flux[j] = a * upwind - diff * (v[j] - v[j - 1]) / dx;
        }
        for i in 0..n {
            v[i] -= tau * (flux[i + 1] - flux[i]) / dx;
            if v[i] < 0.0 {
                clip += -v[i] * dx;
                v[i] = 0.0;
            }
        }
    }
    GridDensity {
        grid_lo: density.grid_lo,
        grid_hi: density.grid_hi,
        n_cells: n,
        values: v,
        dx,
        clip_mass: clip,
    }
}

/// Posterior moments of the grid filter at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSummary {
    pub time: f64,
    pub mean: f64,
    pub variance: f64,
    pub h_hat: f64,
}

/// Output of the grid filter: per-step moment summaries plus full density
/// snapshots at the requested times.
#[derive(Debug, Clone)]
pub struct KsRun {
    pub summaries: Vec<GridSummary>,
    pub snapshots: Vec<(f64, GridDensity)>,
}

/// Runs the grid posterior filter along a truth path by operator splitting:
/// each observation interval applies the forward evolution first, then a
/// pointwise Bayes multiply with the Gaussian increment likelihood
/// exp{(h(s)ΔZ - ½h(s)²Δt)/σ_W²} (computed max-shifted for overflow
/// safety), then renormalizes.
///
/// Each requested snapshot time is matched to the nearest step time within
/// half a step; unmatched times are dropped. A per-step boundary-mass check
/// rejects grids too narrow for the posterior.
pub fn ks_filter_run(
    model: &ScalarDiffusionModel,
    truth: &TruthPath,
    spec: &GridSpec,
    snapshot_times: &[f64],
) -> Result<KsRun, OracleError> {
    if model.geometry() == Geometry::Circle {
        return Err(OracleError::CircleUnsupported);
    }
    if truth.n_steps() == 0 {
        return Err(OracleError::EmptyTruth);
    }
    let dt = truth.dt;
    let mut density = GridDensity::gaussian(spec, model.init_mean(), model.init_var())?;
    let n = density.n_cells;
    let h: Vec<f64> = (0..n).map(|i| model.obs(density.node(i))).collect();
    let sw2 = model.sigma_w() * model.sigma_w();

    let mut pending: Vec<f64> = snapshot_times.to_vec();
    let mut summaries = Vec::with_capacity(truth.n_steps());
    let mut snapshots = Vec::new();

    for (k, &dz) in truth.obs_increments.iter().enumerate() {
        density = fp_step(&density, model, dt);

        let log_lik: Vec<f64> = h.iter().map(|&hi| (hi * dz - 0.5 * hi * hi * dt) / sw2).collect();
        let shift = log_lik.iter().fold(f64::NEG_INFINITY, |m, &g| m.max(g));
        for (v, &g) in density.values.iter_mut().zip(&log_lik) {
            *v *= (g - shift).exp();
        }
        density.normalize()?;

        let edge_mass = 0.5 * density.dx * (density.values[0] + density.values[n - 1]);
        if edge_mass > BOUNDARY_MASS_LIMIT {
            return Err(OracleError::GridTooSmall { step: k });
        }

        let time = (k + 1) as f64 * dt;
        summaries.push(GridSummary {
            time,
            mean: density.mean(),
            variance: density.variance(),
            h_hat: density.expect(|x| model.obs(x)),
        });
        pending.retain(|&t| {
            if (t - time).abs() <= 0.5 * dt + 1e-12 {
                snapshots.push((time, density.clone()));
                false
            } else {
                true
            }
        });
    }
    Ok(KsRun {
        summaries,
        snapshots,
    })
}

/// Solves the gain boundary value problem ∂x(pK) = -(h-ĥ)p/σ_W² on the
/// grid by cumulative trapezoid quadrature:
///
/// K_i = integral of (ĥ-h)p up to node i, divided by σ_W²·max(p_i, floor),
///
/// with floor = 1e-9·max(p). The left boundary value is exactly zero and
/// the right one vanishes to rounding because ĥ is the same quadrature's
/// mean, so the vanishing-flux boundary conditions hold by construction.
pub fn quadrature_gain(density: &GridDensity, model: &ScalarDiffusionModel) -> Vec<f64> {
    let n = density.n_cells;
    let dx = density.dx;
    let p = &density.values;
    let mass = density.mass();
    assert!(
        mass > 0.0 && mass.is_finite(),
        "quadrature_gain needs a normalized density"
    );
    let h: Vec<f64> = (0..n).map(|i| model.obs(density.node(i))).collect();
    let h_hat = density.expect(|x| model.obs(x)) / mass;
    let sw2 = model.sigma_w() * model.sigma_w();

    let integrand: Vec<f64> = h.iter().zip(p).map(|(&hi, &pi)| (h_hat - hi) * pi).collect();
    let floor = 1e-9 * p.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut gain = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    gain.push(0.0);
    for i in 1..n {
        cumulative += 0.5 * dx * (integrand[i - 1] + integrand[i]);
        gain.push(cumulative / (sw2 * p[i].max(floor)));
    }
    gain
}
