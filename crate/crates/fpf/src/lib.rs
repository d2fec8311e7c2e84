//! Continuous-time nonlinear filtering on line and circle state spaces.
//!
//! The crate estimates the posterior of a scalar diffusion observed through
//! a noisy sensor path. Its centerpiece is a feedback particle filter whose
//! control gain is resynthesized from the ensemble at every step, with
//! pluggable solvers: the exact linear-Gaussian gain, a density-based
//! direct numerical solver on the line, and a truncated Fourier solver on
//! the circle. A Kalman-Bucy filter and a bootstrap particle filter serve
//! as baselines, and a finite-volume grid filter provides a
//! sampling-noise-free oracle for cross-checks. The `harness` module and
//! the `fpf` binary run scenario files end to end and write CSV artifacts.

pub mod baselines;
pub mod filter;
pub mod gain;
pub mod harness;
pub mod models;
pub mod oracle;
pub mod sim;
