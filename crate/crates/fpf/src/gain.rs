//! Gain-function synthesis.
//!
//! The gain K solves the weighted boundary value problem
//! ∂x(pK) = -(h - ĥ)p/σ_W² for the current ensemble density p. Three
//! solvers are provided: the closed-form Kalman gain Σγ/σ_W² for linear
//! models, a direct numerical approximation at the particle locations for
//! general scalar models on the line, and a first-harmonic perturbation
//! solution for circle models.
//!
//! Every solver reduces over particles in sorted-position order, so the
//! resulting gain field is bit-for-bit equivariant under permutation of the
//! input ensemble.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::models::{Geometry, ScalarDiffusionModel};

/// Gains with |K| above this cap are clipped and counted in the field's
/// `clipped` metadata; the cap is far above any correct value in the
/// shipped scenarios, so hitting it signals a tail particle with
/// near-vanishing density.
pub const GAIN_CLIP: f64 = 1e4;

/// The density estimate is clipped below at this fraction of its maximum
/// before dividing, so tail particles receive large-but-bounded gains.
pub const DENSITY_FLOOR_FRACTION: f64 = 1e-6;

/// Largest ensemble for which the kernel density sum is evaluated exactly
/// (O(N²)); larger ensembles use a binned grid evaluation of the same
/// mixture.
const DNS_EXACT_MAX_N: usize = 2048;

/// Kernel mass beyond 8.5 standard deviations is below f64 resolution
/// relative to the peak, so the grid evaluation truncates there.
const KERNEL_SUPPORT_STDS: f64 = 8.5;

/// Grid node spacing for the binned density, as a fraction of the kernel
/// standard deviation.
const GRID_NODES_PER_STD: f64 = 8.0;

/// Upper bound on grid nodes; beyond this the spacing coarsens instead.
const MAX_GRID_NODES: usize = 32_768;

#[derive(Debug, Error)]
pub enum GainError {
    #[error("gain synthesis needs at least {need} particles (got {got})")]
    TooFewParticles { need: usize, got: usize },
    #[error("particle {index} has non-finite position")]
    NonFinitePosition { index: usize },
    #[error("bandwidth must be positive and finite (got {0})")]
    BadBandwidth(f64),
    #[error("sigma_w must be positive and finite (got {0})")]
    BadSigmaW(f64),
    #[error("covariance is {rows}x{cols} but gamma has length {len}")]
    DimensionMismatch { rows: usize, cols: usize, len: usize },
    #[error("covariance matrix is singular")]
    SingularCovariance,
    #[error("gain method {method} requires {geometry} geometry")]
    GeometryMismatch {
        method: GainMethodTag,
        geometry: &'static str,
    },
    #[error("exact_linear gain requires a model from the linear family")]
    NotLinearModel,
    #[error("unknown gain method `{0}` (expected exact_linear, dns, or fourier_circle)")]
    UnknownMethod(String),
    #[error("fourier coefficient {name} = {value} exceeds the density bound 2/π")]
    CoefficientOutOfRange { name: &'static str, value: f64 },
}

/// Identifies which solver produced a [`GainField`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GainMethodTag {
    ExactLinear,
    Dns,
    FourierCircle,
}

impl fmt::Display for GainMethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GainMethodTag::ExactLinear => "exact_linear",
            GainMethodTag::Dns => "dns",
            GainMethodTag::FourierCircle => "fourier_circle",
        })
    }
}

/// Gain solver selection, carrying the optional bandwidth override for the
/// direct numerical solver (`None` means the per-step default bandwidth).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GainMethod {
    ExactLinear,
    Dns { bandwidth: Option<f64> },
    FourierCircle,
}

impl GainMethod {
    pub fn tag(self) -> GainMethodTag {
        match self {
            GainMethod::ExactLinear => GainMethodTag::ExactLinear,
            GainMethod::Dns { .. } => GainMethodTag::Dns,
            GainMethod::FourierCircle => GainMethodTag::FourierCircle,
        }
    }
}

impl FromStr for GainMethod {
    type Err = GainError;

    fn from_str(s: &str) -> Result<Self, GainError> {
        match s {
            "exact_linear" => Ok(GainMethod::ExactLinear),
            "dns" => Ok(GainMethod::Dns { bandwidth: None }),
            "fourier_circle" => Ok(GainMethod::FourierCircle),
            other => Err(GainError::UnknownMethod(other.to_string())),
        }
    }
}

/// Gain and its spatial derivative evaluated at each particle, with
/// counters recording how often the density floor and gain cap engaged.
#[derive(Debug, Clone, PartialEq)]
pub struct GainField {
    at_particles: Vec<(f64, f64)>,
    method_tag: GainMethodTag,
    clipped: usize,
    floored: usize,
}

impl GainField {
    fn new(at_particles: Vec<(f64, f64)>, method_tag: GainMethodTag) -> Self {
        Self {
            at_particles,
            method_tag,
            clipped: 0,
            floored: 0,
        }
    }

    /// Gain/derivative pairs, indexed like the input ensemble.
    pub fn at_particles(&self) -> &[(f64, f64)] {
        &self.at_particles
    }

    pub fn method_tag(&self) -> GainMethodTag {
        self.method_tag
    }

    /// Number of particles whose gain hit the |K| cap.
    pub fn clipped(&self) -> usize {
        self.clipped
    }

    /// Number of particles whose density estimate was below the floor.
    pub fn floored(&self) -> usize {
        self.floored
    }

    pub fn len(&self) -> usize {
        self.at_particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.at_particles.is_empty()
    }

    /// Gain at particle i.
    pub fn k(&self, i: usize) -> f64 {
        self.at_particles[i].0
    }

    /// Gain derivative at particle i.
    pub fn kp(&self, i: usize) -> f64 {
        self.at_particles[i].1
    }
}

/// The scalar Kalman gain Σγ/σ_W², constant in x.
pub fn kalman_gain_scalar(variance: f64, gamma: f64, sigma_w: f64) -> f64 {
    assert!(variance >= 0.0, "variance must be nonnegative");
    assert!(
        sigma_w > 0.0 && sigma_w.is_finite(),
        "sigma_w must be positive"
    );
    variance * gamma / (sigma_w * sigma_w)
}

/// The d-dimensional Kalman gain Σγ/σ_W².
pub fn kalman_gain_vector(
    cov: &DMatrix<f64>,
    gamma: &DVector<f64>,
    sigma_w: f64,
) -> Result<DVector<f64>, GainError> {
    if !(sigma_w > 0.0 && sigma_w.is_finite()) {
        return Err(GainError::BadSigmaW(sigma_w));
    }
    if cov.nrows() != cov.ncols() || cov.ncols() != gamma.len() {
        return Err(GainError::DimensionMismatch {
            rows: cov.nrows(),
            cols: cov.ncols(),
            len: gamma.len(),
        });
    }
    Ok(cov * gamma / (sigma_w * sigma_w))
}

/// Residual of the gradient-form compatibility condition
/// K_i (Σ⁻¹)_{jk} = K_j (Σ⁻¹)_{ik} for the Kalman gain of this
/// covariance/observation pair: the maximum over all index triples of the
/// two sides' absolute difference. Zero means a gradient representation
/// pK = ∇φ is consistent; for d ≥ 2 with K ≠ 0 the residual is strictly
/// positive.
pub fn check_gradient_condition(
    cov: &DMatrix<f64>,
    gamma: &DVector<f64>,
    sigma_w: f64,
) -> Result<f64, GainError> {
    let k = kalman_gain_vector(cov, gamma, sigma_w)?;
    let inv = cov
        .clone()
        .try_inverse()
        .ok_or(GainError::SingularCovariance)?;
    let d = gamma.len();
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            for l in 0..d {
                worst = worst.max((k[i] * inv[(j, l)] - k[j] * inv[(i, l)]).abs());
            }
        }
    }
    Ok(worst)
}

/// Default kernel bandwidth for [`dns_gain`]: max(1e-4, σ̂·N^(-2/5)) with σ̂
/// the ensemble standard deviation, shrinking as the ensemble grows.
pub fn dns_default_bandwidth(positions: &[f64]) -> f64 {
    let n = positions.len();
    debug_assert!(n >= 2);
    let mean = positions.iter().sum::<f64>() / n as f64;
    let var = positions.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var.sqrt() * (n as f64).powf(-0.4)).max(1e-4)
}

/// Density evaluation strategy for [`dns_gain`]; `Auto` switches from the
/// exact mixture sum to the binned grid above [`DNS_EXACT_MAX_N`] particles.
/// The forced modes exist so tests can compare the two paths directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) enum DensityMode {
    Auto,
    Exact,
    Binned,
}

/// Direct numerical gain at the particle locations:
///
/// K(X^i) = (1/p̃(X^i)) (1/σ_W²) (1/N) (Σ_{j: X^j < X^i}(ĥ - h(X^j)) + ½(ĥ - h(X^i)))
///
/// with p̃ the sum-of-Gaussians density of kernel variance `bandwidth`, and
/// K′(X^i) = (ĥ - h(X^i))/σ_W² - b̃(X^i)K(X^i) with b̃ = p̃′/p̃ in closed
/// form. A sort plus one prefix pass reproduces the double-sum values in
/// O(N log N); coincident particles share one prefix value, so ties
/// contribute only through the ½-weighted own term.
pub fn dns_gain(
    positions: &[f64],
    model: &ScalarDiffusionModel,
    bandwidth: f64,
) -> Result<GainField, GainError> {
    dns_gain_with_mode(positions, model, bandwidth, DensityMode::Auto)
}

pub(crate) fn dns_gain_with_mode(
    positions: &[f64],
    model: &ScalarDiffusionModel,
    bandwidth: f64,
    mode: DensityMode,
) -> Result<GainField, GainError> {
    let n = positions.len();
    if n < 2 {
        return Err(GainError::TooFewParticles { need: 2, got: n });
    }
    if let Some(index) = positions.iter().position(|x| !x.is_finite()) {
        return Err(GainError::NonFinitePosition { index });
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(GainError::BadBandwidth(bandwidth));
    }
    if model.geometry() != Geometry::Line {
        return Err(GainError::GeometryMismatch {
            method: GainMethodTag::Dns,
            geometry: "line",
        });
    }

    let order = sorted_order(positions);
    let pos_sorted: Vec<f64> = order.iter().map(|&i| positions[i]).collect();
    let h_sorted: Vec<f64> = pos_sorted.iter().map(|&x| model.obs(x)).collect();
    let h_hat = h_sorted.iter().sum::<f64>() / n as f64;

    // Prefix sums of ĥ - h over strictly smaller positions; a run of
    // coincident particles shares the value accumulated before the run.
    let mut prefix = vec![0.0; n];
    let mut acc = 0.0;
    let mut g = 0;
    while g < n {
        let mut e = g + 1;
        while e < n && pos_sorted[e] == pos_sorted[g] {
            e += 1;
        }
        for slot in prefix.iter_mut().take(e).skip(g) {
            *slot = acc;
        }
        for &h in h_sorted.iter().take(e).skip(g) {
            acc += h_hat - h;
        }
        g = e;
    }

    let use_exact = match mode {
        DensityMode::Exact => true,
        DensityMode::Binned => false,
        DensityMode::Auto => n <= DNS_EXACT_MAX_N,
    };
    let (ptilde, dptilde) = if use_exact {
        mixture_density_exact(&pos_sorted, bandwidth)
    } else {
        mixture_density_binned(&pos_sorted, bandwidth)
    };

    let pmax = ptilde.iter().cloned().fold(0.0f64, f64::max);
    let floor = DENSITY_FLOOR_FRACTION * pmax;
    let sw2 = model.sigma_w() * model.sigma_w();
    let scale = 1.0 / (n as f64 * sw2);

    let mut at_particles = vec![(0.0, 0.0); n];
    let mut clipped = 0;
    let mut floored = 0;
    for k in 0..n {
        let p_eff = if ptilde[k] < floor {
            floored += 1;
            floor
        } else {
            ptilde[k]
        };
        let raw = (prefix[k] + 0.5 * (h_hat - h_sorted[k])) * scale / p_eff;
        let gain = if raw.abs() > GAIN_CLIP {
            clipped += 1;
            GAIN_CLIP.copysign(raw)
        } else {
            raw
        };
        let btilde = dptilde[k] / p_eff;
        let kp = (h_hat - h_sorted[k]) / sw2 - btilde * gain;
        at_particles[order[k]] = (gain, kp);
    }

    let mut field = GainField::new(at_particles, GainMethodTag::Dns);
    field.clipped = clipped;
    field.floored = floored;
    Ok(field)
}

/// Stable argsort by (position, original index); ties keep input order so
/// coincident particles map to deterministic slots.
fn sorted_order(positions: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        positions[a]
            .partial_cmp(&positions[b])
            .expect("positions checked finite")
            .then(a.cmp(&b))
    });
    order
}

/// Exact mixture density and derivative at the sorted particle positions,
/// O(N²): p̃(x) = (1/N)Σ q(x; X_j, ε), p̃′(x) = (1/N)Σ q·(X_j - x)/ε.
fn mixture_density_exact(pos_sorted: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = pos_sorted.len();
    let inv2eps = 1.0 / (2.0 * eps);
    let norm = 1.0 / (TAU * eps).sqrt();
    let mut ptilde = vec![0.0; n];
    let mut dptilde = vec![0.0; n];
    for k in 0..n {
        let x = pos_sorted[k];
        let mut p = 0.0;
        let mut dp = 0.0;
        for &xj in pos_sorted {
            let d = xj - x;
            let q = norm * (-d * d * inv2eps).exp();
            p += q;
            dp += q * d;
        }
        ptilde[k] = p / n as f64;
        dptilde[k] = dp / (eps * n as f64);
    }
    (ptilde, dptilde)
}

/// Binned evaluation of the same mixture: particles are spread onto a grid
/// by linear binning, convolved with the sampled kernel, and the density and
/// its derivative are read back at the particle positions by cubic
/// interpolation. Grid spacing is a small fraction of the kernel standard
/// deviation, so the relative error is far below the solver's statistical
/// error at the ensemble sizes that reach this path.
fn mixture_density_binned(pos_sorted: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = pos_sorted.len();
    let sqeps = eps.sqrt();
    let pad = KERNEL_SUPPORT_STDS * sqeps;
    let lo = pos_sorted[0] - pad;
    let hi = pos_sorted[n - 1] + pad;
    let target = sqeps / GRID_NODES_PER_STD;
    let nodes = (((hi - lo) / target).ceil() as usize + 1).clamp(16, MAX_GRID_NODES);
    let delta = (hi - lo) / (nodes - 1) as f64;

    let mut mass = vec![0.0; nodes];
    for &x in pos_sorted {
        let t = (x - lo) / delta;
        let i = (t.floor() as usize).min(nodes - 2);
        let w = t - i as f64;
        mass[i] += 1.0 - w;
        mass[i + 1] += w;
    }

    let tmax = ((pad / delta).ceil() as usize).min(nodes - 1);
    let norm = 1.0 / ((TAU * eps).sqrt() * n as f64);
    let kern: Vec<f64> = (0..=tmax)
        .map(|m| {
            let d = m as f64 * delta;
            norm * (-d * d / (2.0 * eps)).exp()
        })
        .collect();

    let mut density = vec![0.0; nodes];
    let mut ddensity = vec![0.0; nodes];
    for i in 0..nodes {
        let m_lo = -(i.min(tmax) as isize);
        let m_hi = tmax.min(nodes - 1 - i) as isize;
        let mut p = 0.0;
        let mut dp = 0.0;
        for m in m_lo..=m_hi {
            let w = mass[(i as isize + m) as usize] * kern[m.unsigned_abs()];
            p += w;
            dp += w * m as f64;
        }
        density[i] = p;
        ddensity[i] = dp * delta / eps;
    }

    let mut ptilde = vec![0.0; n];
    let mut dptilde = vec![0.0; n];
    for k in 0..n {
        let t = (pos_sorted[k] - lo) / delta;
        let i = (t.floor() as usize).min(nodes - 2);
        let s = t - i as f64;
        ptilde[k] = catmull_rom(&density, i, s);
        dptilde[k] = catmull_rom(&ddensity, i, s);
    }
    (ptilde, dptilde)
}

/// Catmull-Rom cubic through nodes i-1..i+2 evaluated at fraction s of the
/// cell [i, i+1]; edge indices are clamped.
fn catmull_rom(values: &[f64], i: usize, s: f64) -> f64 {
    let last = values.len() - 1;
    let p0 = values[i.saturating_sub(1)];
    let p1 = values[i];
    let p2 = values[(i + 1).min(last)];
    let p3 = values[(i + 2).min(last)];
    0.5 * (2.0 * p1
        + s * ((p2 - p0)
            + s * ((2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) + s * (-p0 + 3.0 * p1 - 3.0 * p2 + p3))))
}

/// First-harmonic coefficients P_c, P_s of an angular ensemble's density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierGainCoeffs {
    p_c: f64,
    p_s: f64,
}

impl FourierGainCoeffs {
    /// Bound on either coefficient for any density: (1/π)∫|cos| p ≤ 2/π,
    /// plus numerical slack.
    pub const COEFF_BOUND: f64 = 2.0 / PI + 1e-9;

    pub fn new(p_c: f64, p_s: f64) -> Result<Self, GainError> {
        if !(p_c.is_finite() && p_c.abs() <= Self::COEFF_BOUND) {
            return Err(GainError::CoefficientOutOfRange {
                name: "p_c",
                value: p_c,
            });
        }
        if !(p_s.is_finite() && p_s.abs() <= Self::COEFF_BOUND) {
            return Err(GainError::CoefficientOutOfRange {
                name: "p_s",
                value: p_s,
            });
        }
        Ok(Self { p_c, p_s })
    }

    /// Empirical coefficients P_c ≈ (1/πN)Σ cos θ_j, P_s ≈ (1/πN)Σ sin θ_j,
    /// reduced in sorted-angle order.
    pub fn from_angles(angles: &[f64]) -> Result<Self, GainError> {
        if angles.is_empty() {
            return Err(GainError::TooFewParticles { need: 1, got: 0 });
        }
        if let Some(index) = angles.iter().position(|x| !x.is_finite()) {
            return Err(GainError::NonFinitePosition { index });
        }
        let order = sorted_order(angles);
        let mut sum_c = 0.0;
        let mut sum_s = 0.0;
        for &i in &order {
            sum_c += angles[i].cos();
            sum_s += angles[i].sin();
        }
        let scale = 1.0 / (PI * angles.len() as f64);
        Self::new(sum_c * scale, sum_s * scale)
    }

    pub fn p_c(&self) -> f64 {
        self.p_c
    }

    pub fn p_s(&self) -> f64 {
        self.p_s
    }

    /// Length of the mean resultant vector, π√(P_c² + P_s²) ∈ [0, 1].
    pub fn resultant(&self) -> f64 {
        PI * self.p_c.hypot(self.p_s)
    }
}

/// Zeroth-order circle gain K₀(θ) = -sin θ/(2σ_W²).
pub fn fourier_k0(theta: f64, sigma_w: f64) -> f64 {
    -theta.sin() / (2.0 * sigma_w * sigma_w)
}

/// First-order circle gain K₁(θ) = (π/(4σ_W²))(P_c sin 2θ - P_s cos 2θ).
pub fn fourier_k1(theta: f64, coeffs: FourierGainCoeffs, sigma_w: f64) -> f64 {
    let sw2 = sigma_w * sigma_w;
    PI / (4.0 * sw2) * (coeffs.p_c * (2.0 * theta).sin() - coeffs.p_s * (2.0 * theta).cos())
}

/// Circle gain K₀ + K₁ and its analytic derivative at one angle.
pub fn fourier_gain_at(theta: f64, coeffs: FourierGainCoeffs, sigma_w: f64) -> (f64, f64) {
    let sw2 = sigma_w * sigma_w;
    let k = fourier_k0(theta, sigma_w) + fourier_k1(theta, coeffs, sigma_w);
    let kp = -theta.cos() / (2.0 * sw2)
        + PI / (2.0 * sw2)
            * (coeffs.p_c * (2.0 * theta).cos() + coeffs.p_s * (2.0 * theta).sin());
    (k, kp)
}

/// First-harmonic perturbation gain for circle models, evaluated at each
/// particle; higher harmonics are dropped.
pub fn fourier_gain_circle(positions: &[f64], sigma_w: f64) -> Result<GainField, GainError> {
    if positions.is_empty() {
        return Err(GainError::TooFewParticles { need: 1, got: 0 });
    }
    if !(sigma_w > 0.0 && sigma_w.is_finite()) {
        return Err(GainError::BadSigmaW(sigma_w));
    }
    let coeffs = FourierGainCoeffs::from_angles(positions)?;
    let at_particles = positions
        .iter()
        .map(|&theta| fourier_gain_at(theta, coeffs, sigma_w))
        .collect();
    Ok(GainField::new(at_particles, GainMethodTag::FourierCircle))
}

/// Synthesizes the gain field for an ensemble with the selected method,
/// enforcing method/geometry compatibility.
pub fn gain_field(
    positions: &[f64],
    model: &ScalarDiffusionModel,
    method: GainMethod,
) -> Result<GainField, GainError> {
    match method {
        GainMethod::ExactLinear => {
            if model.geometry() != Geometry::Line {
                return Err(GainError::GeometryMismatch {
                    method: GainMethodTag::ExactLinear,
                    geometry: "line",
                });
            }
            let params = model.linear_params().ok_or(GainError::NotLinearModel)?;
            let n = positions.len();
            if n < 2 {
                return Err(GainError::TooFewParticles { need: 2, got: n });
            }
            if let Some(index) = positions.iter().position(|x| !x.is_finite()) {
                return Err(GainError::NonFinitePosition { index });
            }
            let mean = positions.iter().sum::<f64>() / n as f64;
            let var = positions.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                / (n - 1) as f64;
            let k = kalman_gain_scalar(var, params.gamma, params.sigma_w);
            Ok(GainField::new(
                vec![(k, 0.0); n],
                GainMethodTag::ExactLinear,
            ))
        }
        GainMethod::Dns { bandwidth } => {
            let eps = match bandwidth {
                Some(b) => b,
                None => {
                    if positions.len() < 2 {
                        return Err(GainError::TooFewParticles {
                            need: 2,
                            got: positions.len(),
                        });
                    }
                    if let Some(index) = positions.iter().position(|x| !x.is_finite()) {
                        return Err(GainError::NonFinitePosition { index });
                    }
                    dns_default_bandwidth(positions)
                }
            };
            dns_gain(positions, model, eps)
        }
        GainMethod::FourierCircle => {
            if model.geometry() != Geometry::Circle {
                return Err(GainError::GeometryMismatch {
                    method: GainMethodTag::FourierCircle,
                    geometry: "circle",
                });
            }
            fourier_gain_circle(positions, model.sigma_w())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinearModelParams;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn line_model_with_obs(
        obs: impl Fn(f64) -> f64 + Send + Sync + 'static,
        obs_deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma_w: f64,
    ) -> ScalarDiffusionModel {
        ScalarDiffusionModel::new(
            |_| 0.0,
            obs,
            obs_deriv,
            1.0,
            sigma_w,
            0.0,
            1.0,
            Geometry::Line,
        )
        .unwrap()
    }

    /// Literal double-sum transcription of the particle-sum gain formula and
    /// the mixture density, kept deliberately naive as the oracle for the
    /// prefix-sum implementation.
    fn dns_oracle(
        positions: &[f64],
        model: &ScalarDiffusionModel,
        eps: f64,
    ) -> Vec<(f64, f64)> {
        let n = positions.len();
        let h: Vec<f64> = positions.iter().map(|&x| model.obs(x)).collect();
        let h_hat = h.iter().sum::<f64>() / n as f64;
        let sw2 = model.sigma_w() * model.sigma_w();
        let norm = 1.0 / (TAU * eps).sqrt();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut p = 0.0;
            let mut dp = 0.0;
            for j in 0..n {
                let d = positions[j] - positions[i];
                let q = norm * (-d * d / (2.0 * eps)).exp();
                p += q;
                dp += q * d / eps;
            }
            p /= n as f64;
            dp /= n as f64;
            let mut sum = 0.0;
            for j in 0..n {
                if positions[j] < positions[i] {
                    sum += h_hat - h[j];
                }
            }
            sum += 0.5 * (h_hat - h[i]);
            let k = sum / (p * sw2 * n as f64);
            let kp = (h_hat - h[i]) / sw2 - (dp / p) * k;
            out.push((k, kp));
        }
        out
    }

    #[test]
    fn kalman_gain_scalar_examples() {
        assert_eq!(kalman_gain_scalar(1.0, 3.0, 0.5), 12.0);
        assert_eq!(kalman_gain_scalar(0.0, 7.0, 1.0), 0.0);
        assert_relative_eq!(
            kalman_gain_scalar(0.153364, 3.0, 0.5),
            1.840368,
            epsilon = 1e-12
        );
    }

    #[test]
    fn kalman_gain_vector_examples() {
        let k = kalman_gain_vector(
            &DMatrix::identity(2, 2),
            &DVector::from_vec(vec![1.0, 0.0]),
            1.0,
        )
        .unwrap();
        assert_eq!(k.as_slice(), &[1.0, 0.0]);

        let k = kalman_gain_vector(
            &DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])),
            &DVector::from_vec(vec![1.0, 1.0]),
            1.0,
        )
        .unwrap();
        assert_eq!(k.as_slice(), &[2.0, 3.0]);

        assert!(matches!(
            kalman_gain_vector(
                &DMatrix::identity(3, 3),
                &DVector::from_vec(vec![1.0, 0.0]),
                1.0
            ),
            Err(GainError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gradient_condition_examples() {
        let resid = check_gradient_condition(
            &DMatrix::from_element(1, 1, 0.7),
            &DVector::from_vec(vec![2.0]),
            0.5,
        )
        .unwrap();
        assert_eq!(resid, 0.0);

        let resid = check_gradient_condition(
            &DMatrix::identity(2, 2),
            &DVector::zeros(2),
            1.0,
        )
        .unwrap();
        assert_eq!(resid, 0.0);

        let resid = check_gradient_condition(
            &DMatrix::identity(2, 2),
            &DVector::from_vec(vec![1.0, 0.0]),
            1.0,
        )
        .unwrap();
        assert_eq!(resid, 1.0);

        assert!(matches!(
            check_gradient_condition(
                &DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
                &DVector::from_vec(vec![1.0, 0.0]),
                1.0
            ),
            Err(GainError::SingularCovariance)
        ));
    }

    #[test]
    fn dns_two_particle_hand_values() {
        // positions {0, 1}, h(x) = x, σ_W = 1, ε = 1: both gains equal
        // 0.25/(2·p̃) with p̃ = (φ(0)+φ(1))/2, and the derivatives are
        // mirror images.
        let model = line_model_with_obs(|x| x, |_| 1.0, 1.0);
        let field = dns_gain(&[0.0, 1.0], &model, 1.0).unwrap();
        assert_relative_eq!(field.k(0), 0.390_068_539_849_617_8, epsilon = 1e-12);
        assert_relative_eq!(field.k(1), 0.390_068_539_849_617_8, epsilon = 1e-12);
        assert_relative_eq!(field.kp(0), 0.35273326258805926, epsilon = 1e-12);
        assert_relative_eq!(field.kp(1), -0.35273326258805926, epsilon = 1e-12);
        assert_eq!(field.method_tag(), GainMethodTag::Dns);
        assert_eq!(field.clipped(), 0);
    }

    #[test]
    fn dns_constant_h_gives_zero_gain() {
        // With h ≡ 0 every residual ĥ - h(X^j) is exactly 0.0, so the gain
        // and its derivative vanish bit-exactly.
        let model = line_model_with_obs(|_| 0.0, |_| 0.0, 1.0);
        let field = dns_gain(&[-1.0, 0.3, 0.4, 2.0], &model, 0.5).unwrap();
        for i in 0..4 {
            assert_eq!(field.k(i), 0.0);
            assert_eq!(field.kp(i), 0.0);
        }
    }

    #[test]
    fn dns_approximates_kalman_gain_on_gaussian_ensemble() {
        // 10⁴ standard normal draws, h(x) = 3x, σ_W = 0.5, ε = 0.1: the
        // interior gain should sit within 10% of the constant 12.0.
        let model = LinearModelParams {
            alpha: -0.5,
            gamma: 3.0,
            sigma_b: 1.0,
            sigma_w: 0.5,
            init_mean: 0.0,
            init_var: 1.0,
        }
        .to_model()
        .unwrap();
        let mut rng = crate::sim::RandomStream::new(2024).rng();
        let positions: Vec<f64> = (0..10_000)
            .map(|_| crate::sim::standard_normal(&mut rng))
            .collect();
        let field = dns_gain(&positions, &model, 0.1).unwrap();
        let mut rel_errs: Vec<f64> = positions
            .iter()
            .zip(field.at_particles())
            .filter(|(x, _)| x.abs() <= 1.0)
            .map(|(_, &(k, _))| (k - 12.0).abs() / 12.0)
            .collect();
        assert!(rel_errs.len() > 5_000);
        rel_errs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let median = rel_errs[rel_errs.len() / 2];
        assert!(median < 0.10, "median interior error {median}");
    }

    #[test]
    fn dns_binned_density_matches_exact_path() {
        // Just above the exact-path cutoff, force both density evaluations
        // and compare gains where the density carries real mass.
        let model = line_model_with_obs(|x| x, |_| 1.0, 0.5);
        let mut rng = crate::sim::RandomStream::new(5).rng();
        let positions: Vec<f64> = (0..3_000)
            .map(|_| crate::sim::standard_normal(&mut rng))
            .collect();
        let eps = dns_default_bandwidth(&positions);
        let exact = dns_gain_with_mode(&positions, &model, eps, DensityMode::Exact).unwrap();
        let binned = dns_gain_with_mode(&positions, &model, eps, DensityMode::Binned).unwrap();
        let mut checked = 0;
        for (i, &x) in positions.iter().enumerate() {
            if x.abs() > 2.0 {
                continue;
            }
            checked += 1;
            let (ke, _) = exact.at_particles()[i];
            let (kb, _) = binned.at_particles()[i];
            let rel = (ke - kb).abs() / ke.abs().max(1e-12);
            assert!(rel < 1e-2, "particle {i}: exact {ke} vs binned {kb}");
        }
        assert!(checked > 2_000);
    }

    #[test]
    fn dns_rejects_bad_inputs() {
        let model = line_model_with_obs(|x| x, |_| 1.0, 1.0);
        assert!(matches!(
            dns_gain(&[0.0], &model, 1.0),
            Err(GainError::TooFewParticles { .. })
        ));
        assert!(matches!(
            dns_gain(&[0.0, f64::NAN], &model, 1.0),
            Err(GainError::NonFinitePosition { index: 1 })
        ));
        assert!(matches!(
            dns_gain(&[0.0, 1.0], &model, 0.0),
            Err(GainError::BadBandwidth(_))
        ));
    }

    #[test]
    fn fourier_hand_values() {
        // Uniform grid of 10⁴ angles: harmonics vanish and K(π/2) reduces
        // to K₀(π/2) = -1/(2·0.16) = -3.125.
        let n = 10_000;
        let angles: Vec<f64> = (0..n).map(|i| TAU * i as f64 / n as f64).collect();
        let coeffs = FourierGainCoeffs::from_angles(&angles).unwrap();
        assert!(coeffs.p_c().abs() < 1e-3);
        assert!(coeffs.p_s().abs() < 1e-3);
        let (k, _) = fourier_gain_at(PI / 2.0, FourierGainCoeffs::new(0.0, 0.0).unwrap(), 0.4);
        assert_relative_eq!(k, -3.125, epsilon = 1e-12);

        // θ = 0 zeroes the K₀ component for any ensemble.
        assert_eq!(fourier_k0(0.0, 0.4), 0.0);

        // P_c = 0.1, P_s = 0, σ_W = 0.4, θ = π/4.
        let coeffs = FourierGainCoeffs::new(0.1, 0.0).unwrap();
        assert_relative_eq!(
            fourier_k1(PI / 4.0, coeffs, 0.4),
            0.49087385212340523,
            epsilon = 1e-12
        );
    }

    #[test]
    fn fourier_derivative_matches_finite_differences() {
        let coeffs = FourierGainCoeffs::new(0.12, -0.07).unwrap();
        let h = 1e-6;
        for k in 0..24 {
            let theta = TAU * k as f64 / 24.0;
            let (_, kp) = fourier_gain_at(theta, coeffs, 0.4);
            let (k_plus, _) = fourier_gain_at(theta + h, coeffs, 0.4);
            let (k_minus, _) = fourier_gain_at(theta - h, coeffs, 0.4);
            let fd = (k_plus - k_minus) / (2.0 * h);
            assert_relative_eq!(kp, fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn fourier_shift_by_two_pi_is_invariant() {
        let angles = [0.3, 1.7, 2.9, 4.1, 5.5];
        let base = fourier_gain_circle(&angles, 0.4).unwrap();
        for shift_at in 0..angles.len() {
            let mut shifted = angles;
            shifted[shift_at] += TAU;
            let moved = fourier_gain_circle(&shifted, 0.4).unwrap();
            for i in 0..angles.len() {
                assert_relative_eq!(base.k(i), moved.k(i), epsilon = 1e-9);
                assert_relative_eq!(base.kp(i), moved.kp(i), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn coefficient_bound_is_enforced() {
        assert!(FourierGainCoeffs::new(0.63, 0.0).is_ok());
        assert!(matches!(
            FourierGainCoeffs::new(0.7, 0.0),
            Err(GainError::CoefficientOutOfRange { name: "p_c", .. })
        ));
        assert!(matches!(
            FourierGainCoeffs::new(0.0, f64::NAN),
            Err(GainError::CoefficientOutOfRange { name: "p_s", .. })
        ));
    }

    #[test]
    fn gain_field_dispatch_checks_compatibility() {
        let linear = LinearModelParams {
            alpha: -0.5,
            gamma: 3.0,
            sigma_b: 1.0,
            sigma_w: 0.5,
            init_mean: 0.0,
            init_var: 1.0,
        }
        .to_model()
        .unwrap();
        let oscillator = crate::models::make_builtin_model(
            "oscillator",
            &[("omega", 1.0), ("sigma_b", 0.5), ("sigma_w", 0.4)]
                .iter()
                .map(|&(k, v)| (k.to_string(), v))
                .collect::<BTreeMap<_, _>>(),
        )
        .unwrap();
        let nonlinear = line_model_with_obs(|x| x.tanh(), |x| 1.0 / x.cosh().powi(2), 1.0);

        // Sample variance of {0,1,2} is 1, so K = 1·3/0.25 = 12.
        let field = gain_field(&[0.0, 1.0, 2.0], &linear, GainMethod::ExactLinear).unwrap();
        assert_eq!(field.at_particles(), &[(12.0, 0.0); 3]);

        assert!(matches!(
            gain_field(&[0.0, 1.0], &nonlinear, GainMethod::ExactLinear),
            Err(GainError::NotLinearModel)
        ));
        assert!(matches!(
            gain_field(&[0.0, 1.0], &linear, GainMethod::FourierCircle),
            Err(GainError::GeometryMismatch { .. })
        ));
        assert!(matches!(
            gain_field(&[0.0, 1.0], &oscillator, GainMethod::Dns { bandwidth: None }),
            Err(GainError::GeometryMismatch { .. })
        ));
        assert!(
            gain_field(&[0.0, 1.0], &oscillator, GainMethod::FourierCircle).is_ok()
        );
    }

    #[test]
    fn gain_method_parses_from_str() {
        assert_eq!(
            "exact_linear".parse::<GainMethod>().unwrap(),
            GainMethod::ExactLinear
        );
        assert_eq!(
            "dns".parse::<GainMethod>().unwrap(),
            GainMethod::Dns { bandwidth: None }
        );
        assert_eq!(
            "fourier_circle".parse::<GainMethod>().unwrap(),
            GainMethod::FourierCircle
        );
        assert!("kalman".parse::<GainMethod>().is_err());
    }

    proptest! {
        #[test]
        fn dns_matches_double_loop_oracle(
            positions in proptest::collection::vec(-5.0f64..5.0, 2..200),
            nonlinear_h in proptest::bool::ANY,
        ) {
            let model = if nonlinear_h {
                line_model_with_obs(|x| x.tanh(), |x| 1.0 / x.cosh().powi(2), 0.7)
            } else {
                line_model_with_obs(|x| 2.0 * x, |_| 2.0, 0.7)
            };
            let eps = 0.3;
            let field = dns_gain(&positions, &model, eps).unwrap();
            let oracle = dns_oracle(&positions, &model, eps);
            for (i, (&(k, kp), &(ok, okp))) in
                field.at_particles().iter().zip(oracle.iter()).enumerate()
            {
                let scale = ok.abs().max(1.0);
                prop_assert!((k - ok).abs() <= 1e-10 * scale, "K mismatch at {i}: {k} vs {ok}");
                let scale = okp.abs().max(1.0);
                prop_assert!((kp - okp).abs() <= 1e-10 * scale, "K' mismatch at {i}: {kp} vs {okp}");
            }
        }

        #[test]
        fn dns_gain_is_permutation_equivariant(
            positions in proptest::collection::vec(-4.0f64..4.0, 2..64),
            seed in proptest::num::u64::ANY,
        ) {
            let model = line_model_with_obs(|x| x * x, |x| 2.0 * x, 0.9);
            let base = dns_gain(&positions, &model, 0.25).unwrap();

            // Fisher-Yates with a splitmix-style walk; any permutation works.
            let mut perm: Vec<usize> = (0..positions.len()).collect();
            let mut state = seed;
            for i in (1..perm.len()).rev() {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                perm.swap(i, (state >> 33) as usize % (i + 1));
            }
            let shuffled: Vec<f64> = perm.iter().map(|&i| positions[i]).collect();
            let moved = dns_gain(&shuffled, &model, 0.25).unwrap();
            for (slot, &src) in perm.iter().enumerate() {
                prop_assert_eq!(moved.at_particles()[slot], base.at_particles()[src]);
            }
        }

        #[test]
        fn fourier_gain_is_permutation_equivariant(
            angles in proptest::collection::vec(0.0f64..TAU, 1..64),
        ) {
            let base = fourier_gain_circle(&angles, 0.4).unwrap();
            let mut reversed = angles.clone();
            reversed.reverse();
            let moved = fourier_gain_circle(&reversed, 0.4).unwrap();
            let n = angles.len();
            for i in 0..n {
                prop_assert_eq!(moved.at_particles()[n - 1 - i], base.at_particles()[i]);
            }
        }

        #[test]
        fn fourier_coeffs_respect_density_bound(
            angles in proptest::collection::vec(-10.0f64..10.0, 1..128),
        ) {
            let coeffs = FourierGainCoeffs::from_angles(&angles).unwrap();
            prop_assert!(coeffs.p_c().abs() <= FourierGainCoeffs::COEFF_BOUND);
            prop_assert!(coeffs.p_s().abs() <= FourierGainCoeffs::COEFF_BOUND);
            prop_assert!(coeffs.resultant() <= 1.0 + 1e-9);
        }

        #[test]
        fn dns_gain_field_is_always_finite(
            positions in proptest::collection::vec(-50.0f64..50.0, 2..80),
            eps in 1e-4f64..4.0,
        ) {
            let model = line_model_with_obs(|x| x, |_| 1.0, 0.5);
            let field = dns_gain(&positions, &model, eps).unwrap();
            for &(k, kp) in field.at_particles() {
                prop_assert!(k.is_finite());
                prop_assert!(kp.is_finite());
                prop_assert!(k.abs() <= GAIN_CLIP);
            }
        }
    }
}
