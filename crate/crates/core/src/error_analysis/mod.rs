//! Norms across representations, exact second-moment error engines,
//! Monte Carlo estimators and log-log rate fitting.
//!
//! The exact engines replace Monte Carlo wherever the quantity of interest
//! is the second moment of something linear in the driving Gaussian
//! vectors: means are computed by covariance propagation and carry a
//! rigorous mode-truncation tail bound instead of a statistical error.

mod exact;
mod mc;

pub use exact::{
    exact_modeling_error, exact_strong_error_fd, exact_strong_error_td, FdOptions,
    FdStrongReport, ModelingReport, TailPolicy, TdStrongReport,
};
pub use mc::{
    mc_modeling_estimand_exact, mc_strong_error, McExperiment, McReport,
};

use crate::error::{CoreError, Result};
use crate::evolve::{EvolutionConfig, FemTrajectory, SpectralTrajectory};
use crate::femspace::{cross_gram_sine, Assembly, FemField, SplineSpaceSpec};
use crate::spectral::SpectralField;

/// One sweep point of an experiment: parameters, error value and the
/// quality indicators attached to it.
#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub experiment: String,
    pub params: Vec<(String, f64)>,
    /// Root error value (the quantity whose rate the theory predicts).
    pub error: f64,
    /// Squared error, the quantity actually computed.
    pub error_sq: f64,
    /// Standard error of `error_sq` (0 for exact computations).
    pub stderr_sq: f64,
    /// Rigorous bound on the truncation contribution to `error_sq`.
    pub tail_sq: f64,
    /// Set when a tail or adaptivity budget was exhausted.
    pub flagged: bool,
}

impl ErrorReport {
    pub fn exact(experiment: &str, params: Vec<(String, f64)>, error_sq: f64, tail_sq: f64, flagged: bool) -> Self {
        Self {
            experiment: experiment.into(),
            params,
            error: error_sq.max(0.0).sqrt(),
            error_sq,
            stderr_sq: 0.0,
            tail_sq,
            flagged,
        }
    }

    /// Tail bound relative to the value (0 when the value vanishes).
    pub fn tail_rel(&self) -> f64 {
        if self.error_sq > 0.0 {
            self.tail_sq / self.error_sq
        } else {
            0.0
        }
    }
}

/// Least-squares fit of log(error) against log(abscissa).
#[derive(Debug, Clone, Copy)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Fits the observed convergence order from a refinement sweep.
pub fn fit_rate(abscissas: &[f64], errors: &[f64]) -> Result<RateFit> {
    if abscissas.len() != errors.len() {
        return Err(CoreError::ShapeMismatch(
            "abscissas and errors differ in length".into(),
        ));
    }
    if abscissas.len() < 3 {
        return Err(CoreError::InvalidParameter(
            "rate fit needs at least 3 points".into(),
        ));
    }
    if abscissas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CoreError::InvalidParameter(
            "abscissas must be strictly decreasing".into(),
        ));
    }
    if abscissas.iter().chain(errors).any(|&v| !(v > 0.0)) {
        return Err(CoreError::InvalidParameter(
            "rate fit needs strictly positive inputs".into(),
        ));
    }
    let xs: Vec<f64> = abscissas.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - ybar).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Cross inner products of a spline space against the sine basis, cached
/// for repeated mixed-representation norms.
pub struct FemSpectralMetric {
    e_ks: Vec<Vec<f64>>,
}

impl FemSpectralMetric {
    pub fn new(spec: &SplineSpaceSpec, k_max: usize) -> Self {
        Self {
            e_ks: (1..=k_max).map(|k| cross_gram_sine(spec, k)).collect(),
        }
    }

    pub fn k_max(&self) -> usize {
        self.e_ks.len()
    }

    pub fn e_k(&self, k: usize) -> &[f64] {
        &self.e_ks[k - 1]
    }

    /// Squared L2 distance between a spline field and a spectral field;
    /// exact as long as the spectral field is supported on k <= k_max.
    pub fn distance_sq(&self, asm: &Assembly, u_h: &FemField, v: &SpectralField) -> f64 {
        assert!(v.k_max() <= self.e_ks.len(), "metric truncation too small");
        let mut val = asm.mass.quad_form(&u_h.coeffs, &u_h.coeffs);
        for (i, &c) in v.coeffs().iter().enumerate() {
            if c != 0.0 {
                let cross: f64 = self.e_ks[i]
                    .iter()
                    .zip(&u_h.coeffs)
                    .map(|(e, u)| e * u)
                    .sum();
                val -= 2.0 * c * cross;
            }
            val += c * c;
        }
        val.max(0.0)
    }

    /// Root distance.
    pub fn distance(&self, asm: &Assembly, u_h: &FemField, v: &SpectralField) -> f64 {
        self.distance_sq(asm, u_h, v).sqrt()
    }
}

/// Discrete-in-time L2 distance of two spectral trajectories
/// (sum over steps 1..=M of dtau times the squared L2 distance).
pub fn discrete_lt2_spectral(
    a: &SpectralTrajectory,
    b: &SpectralTrajectory,
    config: &EvolutionConfig,
) -> Result<f64> {
    if a.states.len() != b.states.len() {
        return Err(CoreError::ShapeMismatch(
            "trajectories differ in step count".into(),
        ));
    }
    let mut acc = 0.0;
    for m in 1..a.states.len() {
        let d = a.states[m].sub(&b.states[m]);
        acc += config.dtau * d.coeffs().iter().map(|c| c * c).sum::<f64>();
    }
    Ok(acc.sqrt())
}

/// Discrete-in-time L2 distance of a spline trajectory from a spectral one.
pub fn discrete_lt2_mixed(
    a: &FemTrajectory,
    b: &SpectralTrajectory,
    asm: &Assembly,
    metric: &FemSpectralMetric,
    config: &EvolutionConfig,
) -> Result<f64> {
    if a.states.len() != b.states.len() {
        return Err(CoreError::ShapeMismatch(
            "trajectories differ in step count".into(),
        ));
    }
    let mut acc = 0.0;
    for m in 1..a.states.len() {
        acc += config.dtau * metric.distance_sq(asm, &a.states[m], &b.states[m]);
    }
    Ok(acc.sqrt())
}
