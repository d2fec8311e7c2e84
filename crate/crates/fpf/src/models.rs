//! Hidden-state/observation model family and the three built-in models.
//!
//! A model pairs a scalar diffusion for the hidden state,
//! dX_t = a(X_t) dt + σ_B dB_t, with a scalar observation channel,
//! dZ_t = h(X_t) dt + σ_W dW_t. The state lives either on the real line or
//! on the circle [0, 2π); circle geometry is a flag on the model rather than
//! a separate type so one filter engine serves both.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use thiserror::Error;

/// State-space geometry of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    Line,
    Circle,
}

impl Geometry {
    /// Maps a state into the model's domain: identity on the line,
    /// reduction to [0, 2π) on the circle.
    pub fn wrap(self, x: f64) -> f64 {
        match self {
            Geometry::Line => x,
            Geometry::Circle => {
                // rem_euclid can round up to exactly 2π for tiny negative
                // inputs; fold that case back to 0 so the invariant holds.
                let r = x.rem_euclid(TAU);
                if r >= TAU {
                    0.0
                } else {
                    r
                }
            }
        }
    }
}

/// Errors raised while building or validating a model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown builtin model `{0}` (expected linear, double_well, or oscillator)")]
    UnknownModel(String),
    #[error("model parameter `{0}` is required")]
    MissingParam(&'static str),
    #[error("model parameter `{name}` is not finite ({value})")]
    NonFiniteParam { name: String, value: f64 },
    #[error("model parameter `{0}` is not used by this model")]
    UnexpectedParam(String),
    #[error("sigma_w must be positive (got {0})")]
    NonPositiveSigmaW(f64),
    #[error("sigma_b must be nonnegative (got {0})")]
    NegativeSigmaB(f64),
    #[error("init_var must be nonnegative (got {0})")]
    NegativeInitVar(f64),
    #[error("circle-geometry {which} is not 2π-periodic at x = {x}: |Δ| = {delta:.3e}")]
    NotPeriodic {
        which: &'static str,
        x: f64,
        delta: f64,
    },
    #[error("init_cov must be symmetric within 1e-12 (max asymmetry {0:.3e})")]
    AsymmetricInitCov(f64),
    #[error("init_cov must be positive definite (smallest eigenvalue {0:.3e})")]
    InitCovNotPositiveDefinite(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

type ScalarFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;

/// A scalar diffusion with a scalar observation channel.
///
/// The observation derivative h′ is stored explicitly rather than obtained by
/// numerical differentiation: the quadrature gain solver and the gain
/// positivity test need its exact sign.
///
/// Immutable after construction, so it can be shared across workers.
pub struct ScalarDiffusionModel {
    drift: ScalarFn,
    obs: ScalarFn,
    obs_deriv: ScalarFn,
    sigma_b: f64,
    sigma_w: f64,
    init_mean: f64,
    init_var: f64,
    geometry: Geometry,
    linear: Option<LinearModelParams>,
}

impl std::fmt::Debug for ScalarDiffusionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScalarDiffusionModel")
            .field("sigma_b", &self.sigma_b)
            .field("sigma_w", &self.sigma_w)
            .field("init_mean", &self.init_mean)
            .field("init_var", &self.init_var)
            .field("geometry", &self.geometry)
            .field("linear", &self.linear)
            .finish_non_exhaustive()
    }
}

impl ScalarDiffusionModel {
    /// Builds a model from explicit drift, observation function, and
    /// observation derivative.
    ///
    /// Circle-geometry models must have 2π-periodic drift and observation
    /// functions; this is checked on a sample of points at construction.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        drift: impl Fn(f64) -> f64 + Send + Sync + 'static,
        obs: impl Fn(f64) -> f64 + Send + Sync + 'static,
        obs_deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma_b: f64,
        sigma_w: f64,
        init_mean: f64,
        init_var: f64,
        geometry: Geometry,
    ) -> Result<Self, ModelError> {
        let model = Self {
            drift: Box::new(drift),
            obs: Box::new(obs),
            obs_deriv: Box::new(obs_deriv),
            sigma_b,
            sigma_w,
            init_mean,
            init_var,
            geometry,
            linear: None,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ModelError> {
        for (name, value) in [
            ("sigma_b", self.sigma_b),
            ("sigma_w", self.sigma_w),
            ("init_mean", self.init_mean),
            ("init_var", self.init_var),
        ] {
            if !value.is_finite() {
                return Err(ModelError::NonFiniteParam {
                    name: name.to_string(),
                    value,
                });
            }
        }
        if self.sigma_w <= 0.0 {
            return Err(ModelError::NonPositiveSigmaW(self.sigma_w));
        }
        if self.sigma_b < 0.0 {
            return Err(ModelError::NegativeSigmaB(self.sigma_b));
        }
        if self.init_var < 0.0 {
            return Err(ModelError::NegativeInitVar(self.init_var));
        }
        if self.geometry == Geometry::Circle {
            for k in 0..16 {
                let x = TAU * k as f64 / 16.0;
                let dd = ((self.drift)(x) - (self.drift)(x + TAU)).abs();
                if dd >= 1e-12 {
                    return Err(ModelError::NotPeriodic {
                        which: "drift",
                        x,
                        delta: dd,
                    });
                }
                let dh = ((self.obs)(x) - (self.obs)(x + TAU)).abs();
                if dh >= 1e-12 {
                    return Err(ModelError::NotPeriodic {
                        which: "obs",
                        x,
                        delta: dh,
                    });
                }
            }
        }
        Ok(())
    }

    /// Drift a(x).
    pub fn drift(&self, x: f64) -> f64 {
        (self.drift)(x)
    }

    /// Observation function h(x).
    pub fn obs(&self, x: f64) -> f64 {
        (self.obs)(x)
    }

    /// Observation derivative h′(x).
    pub fn obs_deriv(&self, x: f64) -> f64 {
        (self.obs_deriv)(x)
    }

    /// Process-noise intensity σ_B.
    pub fn sigma_b(&self) -> f64 {
        self.sigma_b
    }

    /// Observation-noise intensity σ_W.
    pub fn sigma_w(&self) -> f64 {
        self.sigma_w
    }

    /// Mean of the initial law.
    pub fn init_mean(&self) -> f64 {
        self.init_mean
    }

    /// Variance of the initial law.
    pub fn init_var(&self) -> f64 {
        self.init_var
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    /// The linear parameters when the model is exactly the linear family
    /// (drift αx, observation γx); `None` for every other model.
    pub fn linear_params(&self) -> Option<&LinearModelParams> {
        self.linear.as_ref()
    }
}

/// Parameters of the linear-Gaussian family: dX = αX dt + σ_B dB,
/// dZ = γX dt + σ_W dW, X₀ ~ N(init_mean, init_var).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearModelParams {
    pub alpha: f64,
    pub gamma: f64,
    pub sigma_b: f64,
    pub sigma_w: f64,
    pub init_mean: f64,
    pub init_var: f64,
}

impl LinearModelParams {
    /// The corresponding diffusion model, with drift x ↦ αx and
    /// observation x ↦ γx.
    pub fn to_model(self) -> Result<ScalarDiffusionModel, ModelError> {
        let Self { alpha, gamma, .. } = self;
        let mut model = ScalarDiffusionModel::new(
            move |x| alpha * x,
            move |x| gamma * x,
            move |_| gamma,
            self.sigma_b,
            self.sigma_w,
            self.init_mean,
            self.init_var,
            Geometry::Line,
        )?;
        model.linear = Some(self);
        Ok(model)
    }
}

/// Parameters of the d-dimensional linear-Gaussian family:
/// dX = αX dt + σ_B dB, dZ = γᵀX dt + σ_W dW.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLinearModelParams {
    pub dim: usize,
    pub a_matrix: nalgebra::DMatrix<f64>,
    pub gamma_vec: nalgebra::DVector<f64>,
    pub sigma_b: f64,
    pub sigma_w: f64,
    pub init_mean: nalgebra::DVector<f64>,
    pub init_cov: nalgebra::DMatrix<f64>,
}

impl MultiLinearModelParams {
    pub fn new(
        a_matrix: nalgebra::DMatrix<f64>,
        gamma_vec: nalgebra::DVector<f64>,
        sigma_b: f64,
        sigma_w: f64,
        init_mean: nalgebra::DVector<f64>,
        init_cov: nalgebra::DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        let dim = gamma_vec.len();
        if a_matrix.nrows() != dim
            || a_matrix.ncols() != dim
            || init_mean.len() != dim
            || init_cov.nrows() != dim
            || init_cov.ncols() != dim
            || dim == 0
        {
            return Err(ModelError::DimensionMismatch(format!(
                "gamma_vec has length {dim}; a_matrix is {}x{}, init_mean length {}, init_cov {}x{}",
                a_matrix.nrows(),
                a_matrix.ncols(),
                init_mean.len(),
                init_cov.nrows(),
                init_cov.ncols(),
            )));
        }
        if sigma_w <= 0.0 {
            return Err(ModelError::NonPositiveSigmaW(sigma_w));
        }
        if sigma_b < 0.0 {
            return Err(ModelError::NegativeSigmaB(sigma_b));
        }
        let mut asym = 0.0f64;
        for i in 0..dim {
            for j in 0..dim {
                asym = asym.max((init_cov[(i, j)] - init_cov[(j, i)]).abs());
            }
        }
        if asym > 1e-12 {
            return Err(ModelError::AsymmetricInitCov(asym));
        }
        let eig = init_cov.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_eig <= 0.0 {
            return Err(ModelError::InitCovNotPositiveDefinite(min_eig));
        }
        Ok(Self {
            dim,
            a_matrix,
            gamma_vec,
            sigma_b,
            sigma_w,
            init_mean,
            init_cov,
        })
    }
}

/// Default initial variance of the builtin oscillator: a wrapped normal with
/// σ = 2π is uniform on the circle to within ~3e-9 total variation, which
/// realizes the "no prior information" initial ensemble without a dedicated
/// uniform flag.
pub const OSCILLATOR_UNIFORM_INIT_VAR: f64 = TAU * TAU;

fn take(
    params: &BTreeMap<String, f64>,
    name: &'static str,
    used: &mut Vec<&'static str>,
) -> Result<f64, ModelError> {
    used.push(name);
    let v = *params.get(name).ok_or(ModelError::MissingParam(name))?;
    if !v.is_finite() {
        return Err(ModelError::NonFiniteParam {
            name: name.to_string(),
            value: v,
        });
    }
    Ok(v)
}

fn take_or(
    params: &BTreeMap<String, f64>,
    name: &'static str,
    default: f64,
    used: &mut Vec<&'static str>,
) -> Result<f64, ModelError> {
    used.push(name);
    match params.get(name) {
        None => Ok(default),
        Some(&v) if v.is_finite() => Ok(v),
        Some(&v) => Err(ModelError::NonFiniteParam {
            name: name.to_string(),
            value: v,
        }),
    }
}

fn reject_unused(params: &BTreeMap<String, f64>, used: &[&'static str]) -> Result<(), ModelError> {
    for key in params.keys() {
        if !used.iter().any(|u| u == key) {
            return Err(ModelError::UnexpectedParam(key.clone()));
        }
    }
    Ok(())
}

/// Builds one of the three builtin models from a parameter map.
///
/// * `linear`: requires `alpha`, `gamma`, `sigma_b`, `sigma_w`, `init_mean`,
///   `init_var`.
/// * `double_well`: drift x(1−x²) with stable equilibria at ±1 and h(x) = x;
///   requires `sigma_b`, `sigma_w`; `init_mean`/`init_var` default to 0 and 1
///   (one wide Gaussian covering both wells).
/// * `oscillator`: drift ≡ ω on the circle with h(θ) = ½(1+cos θ); requires
///   `omega`, `sigma_b`, `sigma_w`; `init_mean`/`init_var` default to π and
///   (2π)², an effectively uniform wrapped normal.
///
/// Parameters not used by the named model are rejected.
pub fn make_builtin_model(
    name: &str,
    params: &BTreeMap<String, f64>,
) -> Result<ScalarDiffusionModel, ModelError> {
    let mut used = Vec::new();
    match name {
        "linear" => {
            let lp = LinearModelParams {
                alpha: take(params, "alpha", &mut used)?,
                gamma: take(params, "gamma", &mut used)?,
                sigma_b: take(params, "sigma_b", &mut used)?,
                sigma_w: take(params, "sigma_w", &mut used)?,
                init_mean: take(params, "init_mean", &mut used)?,
                init_var: take(params, "init_var", &mut used)?,
            };
            reject_unused(params, &used)?;
            lp.to_model()
        }
        "double_well" => {
            let sigma_b = take(params, "sigma_b", &mut used)?;
            let sigma_w = take(params, "sigma_w", &mut used)?;
            let init_mean = take_or(params, "init_mean", 0.0, &mut used)?;
            let init_var = take_or(params, "init_var", 1.0, &mut used)?;
            reject_unused(params, &used)?;
            ScalarDiffusionModel::new(
                |x| x * (1.0 - x * x),
                |x| x,
                |_| 1.0,
                sigma_b,
                sigma_w,
                init_mean,
                init_var,
                Geometry::Line,
            )
        }
        "oscillator" => {
            let omega = take(params, "omega", &mut used)?;
            if !omega.is_finite() {
                return Err(ModelError::NonFiniteParam {
                    name: "omega".to_string(),
                    value: omega,
                });
            }
            let sigma_b = take(params, "sigma_b", &mut used)?;
            let sigma_w = take(params, "sigma_w", &mut used)?;
            let init_mean = take_or(params, "init_mean", PI, &mut used)?;
            let init_var = take_or(params, "init_var", OSCILLATOR_UNIFORM_INIT_VAR, &mut used)?;
            reject_unused(params, &used)?;
            ScalarDiffusionModel::new(
                move |_| omega,
                |theta| 0.5 * (1.0 + theta.cos()),
                |theta| -0.5 * theta.sin(),
                sigma_b,
                sigma_w,
                init_mean,
                init_var,
                Geometry::Circle,
            )
        }
        other => Err(ModelError::UnknownModel(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }

    fn linear_va() -> BTreeMap<String, f64> {
        params(&[
            ("alpha", -0.5),
            ("gamma", 3.0),
            ("sigma_b", 1.0),
            ("sigma_w", 0.5),
            ("init_mean", 1.0),
            ("init_var", 1.0),
        ])
    }

    #[test]
    fn builtin_linear_drift_and_obs() {
        let m = make_builtin_model("linear", &linear_va()).unwrap();
        assert_eq!(m.drift(2.0), -1.0);
        assert_eq!(m.obs(2.0), 6.0);
        assert_eq!(m.obs_deriv(7.5), 3.0);
        assert_eq!(m.geometry(), Geometry::Line);
        let lp = m.linear_params().unwrap();
        assert_eq!(lp.alpha, -0.5);
        assert_eq!(lp.gamma, 3.0);
    }

    #[test]
    fn builtin_double_well_equilibria() {
        let m =
            make_builtin_model("double_well", &params(&[("sigma_b", 0.4), ("sigma_w", 0.2)]))
                .unwrap();
        assert_eq!(m.drift(1.0), 0.0);
        assert_eq!(m.drift(-1.0), 0.0);
        assert_eq!(m.drift(0.0), 0.0);
        assert!(m.drift(0.5) > 0.0);
        assert!(m.drift(1.5) < 0.0);
        assert!(m.linear_params().is_none());
        assert_eq!(m.init_mean(), 0.0);
        assert_eq!(m.init_var(), 1.0);
    }

    #[test]
    fn double_well_drift_matches_potential_gradient() {
        // Potential V(x) = -x²/2 + x⁴/4; the drift is -V'.
        let m =
            make_builtin_model("double_well", &params(&[("sigma_b", 0.4), ("sigma_w", 0.2)]))
                .unwrap();
        let v = |x: f64| -0.5 * x * x + 0.25 * x.powi(4);
        let h = 1e-5;
        for k in 0..20 {
            let x = -2.0 + 4.0 * k as f64 / 19.0;
            let fd = -(v(x + h) - v(x - h)) / (2.0 * h);
            assert!(
                (m.drift(x) - fd).abs() < 1e-8,
                "drift mismatch at x={x}: {} vs {}",
                m.drift(x),
                fd
            );
        }
    }

    #[test]
    fn builtin_oscillator_observation() {
        let m = make_builtin_model(
            "oscillator",
            &params(&[("omega", 1.0), ("sigma_b", 0.5), ("sigma_w", 0.4)]),
        )
        .unwrap();
        assert_eq!(m.obs(0.0), 1.0);
        assert_relative_eq!(m.obs(PI), 0.0, epsilon = 1e-15);
        assert_eq!(m.geometry(), Geometry::Circle);
        assert_eq!(m.drift(0.3), 1.0);
        assert_eq!(m.drift(5.9), 1.0);
        assert_eq!(m.init_mean(), PI);
        assert_eq!(m.init_var(), OSCILLATOR_UNIFORM_INIT_VAR);
    }

    #[test]
    fn obs_deriv_matches_finite_differences_for_builtins() {
        let models = [
            make_builtin_model("linear", &linear_va()).unwrap(),
            make_builtin_model("double_well", &params(&[("sigma_b", 0.4), ("sigma_w", 0.2)]))
                .unwrap(),
            make_builtin_model(
                "oscillator",
                &params(&[("omega", 1.0), ("sigma_b", 0.5), ("sigma_w", 0.4)]),
            )
            .unwrap(),
        ];
        let h = 1e-6;
        for m in &models {
            for k in 0..20 {
                let x = -3.0 + 6.0 * k as f64 / 19.0;
                let fd = (m.obs(x + h) - m.obs(x - h)) / (2.0 * h);
                assert!(
                    (m.obs_deriv(x) - fd).abs() < 1e-6,
                    "obs_deriv mismatch at x={x}"
                );
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(
            make_builtin_model("brownian", &params(&[])),
            Err(ModelError::UnknownModel(_))
        ));
        let mut p = linear_va();
        p.remove("gamma");
        assert!(matches!(
            make_builtin_model("linear", &p),
            Err(ModelError::MissingParam("gamma"))
        ));
        let mut p = linear_va();
        p.insert("sigma_w".to_string(), 0.0);
        assert!(matches!(
            make_builtin_model("linear", &p),
            Err(ModelError::NonPositiveSigmaW(_))
        ));
        let mut p = linear_va();
        p.insert("alpha".to_string(), f64::NAN);
        assert!(matches!(
            make_builtin_model("linear", &p),
            Err(ModelError::NonFiniteParam { .. })
        ));
        let mut p = linear_va();
        p.insert("omega".to_string(), 1.0);
        assert!(matches!(
            make_builtin_model("linear", &p),
            Err(ModelError::UnexpectedParam(_))
        ));
    }

    #[test]
    fn circle_models_must_be_periodic() {
        let err = ScalarDiffusionModel::new(
            |x| x,
            |x| x.cos(),
            |x| -x.sin(),
            0.5,
            0.4,
            PI,
            1.0,
            Geometry::Circle,
        );
        assert!(matches!(
            err,
            Err(ModelError::NotPeriodic { which: "drift", .. })
        ));
    }

    #[test]
    fn wrap_maps_into_unit_circle() {
        assert_eq!(Geometry::Line.wrap(-5.0), -5.0);
        for &x in &[-1e-18, -7.3, 0.0, 1.0, TAU, TAU + 0.5, 123.456, -123.456] {
            let w = Geometry::Circle.wrap(x);
            assert!((0.0..TAU).contains(&w), "wrap({x}) = {w} out of range");
        }
    }

    #[test]
    fn multi_linear_validation() {
        use nalgebra::{DMatrix, DVector};
        let ok = MultiLinearModelParams::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
            1.0,
            1.0,
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        );
        assert!(ok.is_ok());

        let asym = MultiLinearModelParams::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
            1.0,
            1.0,
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]),
        );
        assert!(matches!(asym, Err(ModelError::AsymmetricInitCov(_))));

        let not_pd = MultiLinearModelParams::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
            1.0,
            1.0,
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
        );
        assert!(matches!(
            not_pd,
            Err(ModelError::InitCovNotPositiveDefinite(_))
        ));
    }
}
