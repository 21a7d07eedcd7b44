//! Monte Carlo counterparts of the exact error engines.
//!
//! Every estimator uses common random numbers: both discretizations in a
//! pathwise difference are driven by the same noise object, and sample
//! streams derive from (base_seed, sample_index) so runs are reproducible
//! and parallel.

use super::exact::projected_kernel_sum;
use super::FemSpectralMetric;
use crate::error::{CoreError, Result};
use crate::evolve::{
    be_fullydiscrete_final, be_timediscrete_stoch_final, exact_u_truncated, exact_uhat,
    EvolutionConfig,
};
use crate::femspace::{Assembly, NoiseCoupling, SplineSpaceSpec};
use crate::noise::{
    basis_spline_inners, build_gram, cos_spline_inners, sample_coupled_noise, sample_noise,
    SpaceTimeGrid,
};
use crate::quad::geometric_exp_sum;
use crate::rng::mix_seed;
use crate::spectral::{exp_kernel_integral, ModelParams, SpectralField};
use rayon::prelude::*;

/// Monte Carlo mean of a squared pathwise error.
#[derive(Debug, Clone, Copy)]
pub struct McReport {
    pub mean_sq: f64,
    /// Standard error of the mean of the squared error.
    pub stderr_sq: f64,
    pub n_samples: usize,
}

impl McReport {
    /// Whether `exact_sq` lies within `n_se` standard errors plus an extra
    /// deterministic band (e.g. a reported coupling bias).
    pub fn consistent_with(&self, exact_sq: f64, n_se: f64, extra_band: f64) -> bool {
        (self.mean_sq - exact_sq).abs() <= n_se * self.stderr_sq + extra_band
    }
}

/// The three strong-error estimands.
pub enum McExperiment<'a> {
    /// || u - u-hat ||^2 at time t from one coupled noise realization,
    /// modes truncated at params.k_max on both sides.
    Modeling {
        grid: &'a SpaceTimeGrid,
        params: &'a ModelParams,
        k_couple: usize,
        rho: usize,
        t: f64,
    },
    /// || U^M - u-hat(tau_M) ||^2, time-discrete scheme vs the regularized
    /// solution, same noise sample.
    TimeDiscrete {
        grid: &'a SpaceTimeGrid,
        params: &'a ModelParams,
        config: &'a EvolutionConfig,
    },
    /// || U_h^M - U^M ||^2, fully discrete vs time-discrete, same sample.
    FullyDiscrete {
        grid: &'a SpaceTimeGrid,
        params: &'a ModelParams,
        config: &'a EvolutionConfig,
        spec: &'a SplineSpaceSpec,
        asm: &'a Assembly,
        coupling: &'a NoiseCoupling,
        metric: &'a FemSpectralMetric,
    },
}

fn spectral_diff_sq(a: &SpectralField, b: &SpectralField) -> f64 {
    a.coeffs()
        .iter()
        .zip(b.coeffs())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Runs the Monte Carlo estimator with per-sample derived seeds.
pub fn mc_strong_error(
    experiment: &McExperiment,
    n_samples: usize,
    base_seed: u64,
) -> Result<McReport> {
    if n_samples < 2 {
        return Err(CoreError::InvalidParameter(
            "Monte Carlo needs at least 2 samples".into(),
        ));
    }
    // Derived streams must be pairwise distinct.
    {
        let mut seen = std::collections::HashSet::with_capacity(n_samples);
        for i in 0..n_samples as u64 {
            assert!(
                seen.insert(mix_seed(base_seed, i)),
                "seed derivation collision at sample {i}"
            );
        }
    }

    let values: Vec<f64> = match experiment {
        McExperiment::Modeling {
            grid,
            params,
            k_couple,
            rho,
            t,
        } => {
            if params.k_max > *k_couple {
                return Err(CoreError::InvalidParameter(format!(
                    "mode truncation {} exceeds coupled modes {}",
                    params.k_max, k_couple
                )));
            }
            let gram = build_gram(grid);
            (0..n_samples as u64)
                .into_par_iter()
                .map(|i| -> Result<f64> {
                    let coupled = sample_coupled_noise(grid, *k_couple, *rho, mix_seed(base_seed, i))?;
                    let u = exact_u_truncated(&coupled, *t, params)?;
                    let sample = coupled.induced_sample(&gram)?;
                    let uh = exact_uhat(&sample, *t, params)?;
                    Ok(spectral_diff_sq(&u, &uh))
                })
                .collect::<Result<Vec<_>>>()?
        }
        McExperiment::TimeDiscrete {
            grid,
            params,
            config,
        } => {
            let gram = build_gram(grid);
            (0..n_samples as u64)
                .into_par_iter()
                .map(|i| -> Result<f64> {
                    let s = sample_noise(grid, &gram, mix_seed(base_seed, i))?;
                    let u_m = be_timediscrete_stoch_final(&s, params, config)?;
                    let uh = exact_uhat(&s, config.t_final, params)?;
                    Ok(spectral_diff_sq(&u_m, &uh))
                })
                .collect::<Result<Vec<_>>>()?
        }
        McExperiment::FullyDiscrete {
            grid,
            params,
            config,
            spec,
            asm,
            coupling,
            metric,
        } => {
            let gram = build_gram(grid);
            (0..n_samples as u64)
                .into_par_iter()
                .map(|i| -> Result<f64> {
                    let s = sample_noise(grid, &gram, mix_seed(base_seed, i))?;
                    let u_h = be_fullydiscrete_final(&s, spec, asm, coupling, config)?;
                    let u_td = be_timediscrete_stoch_final(&s, params, config)?;
                    Ok(metric.distance_sq(asm, &u_h, &u_td))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(McReport {
        mean_sq: mean,
        stderr_sq: (var / n).sqrt(),
        n_samples: values.len(),
    })
}

/// Exact second moment of the modeling Monte Carlo estimand under the law
/// actually simulated (midpoint integrator for u, hat noise built from
/// k_couple cosine modes), together with the matched-truncation exact
/// modeling error. Their difference is the coupling bias to report.
pub struct McModelingExact {
    /// E || u_mid - u-hat_(truncated R) ||^2, the exact mean of the estimator.
    pub estimand_sq: f64,
    /// Theta^2 truncated at the same mode count (full-noise law).
    pub theta_sq_matched: f64,
}

impl McModelingExact {
    /// Coupling bias |Theta^2_K - E estimand|.
    pub fn coupling_bias(&self) -> f64 {
        (self.theta_sq_matched - self.estimand_sq).abs()
    }
}

pub fn mc_modeling_estimand_exact(
    grid: &SpaceTimeGrid,
    params: &ModelParams,
    k_couple: usize,
    rho: usize,
    t: f64,
) -> Result<McModelingExact> {
    if params.k_max > k_couple {
        return Err(CoreError::InvalidParameter(
            "mode truncation exceeds coupled modes".into(),
        ));
    }
    let gram = build_gram(grid);
    let delta = grid.dt / rho as f64;
    let n_sub_f = t / delta;
    let n_sub = n_sub_f.round() as u64;
    if (n_sub_f - n_sub as f64).abs() > 1e-9 * n_sub_f.max(1.0) {
        return Err(CoreError::OutOfRange(format!(
            "t={t} is not a sub-grid point"
        )));
    }
    let d_vecs: Vec<Vec<f64>> = (0..=k_couple).map(|k| cos_spline_inners(grid, k)).collect();

    let terms: Vec<f64> = (1..=params.k_max)
        .into_par_iter()
        .map(|k| -> Result<f64> {
            let mu_k = params.mu_k(k);
            let lam = ModelParams::lambda(k);
            let (c_k, _) = basis_spline_inners(grid, k);
            let v = gram.solve(&c_k);
            // Variance of the midpoint integrator value.
            let var_u = lam * lam
                * delta
                * (-mu_k * delta).exp()
                * geometric_exp_sum(2.0 * mu_k * delta, n_sub);
            // Variance of u-hat_k under the truncated-noise law.
            let g_tilde: f64 = d_vecs
                .iter()
                .map(|d| {
                    let dot: f64 = d.iter().zip(&v).map(|(a, b)| a * b).sum();
                    dot * dot
                })
                .sum();
            let p_k = projected_kernel_sum(grid, mu_k, t)?;
            let var_uhat = p_k * g_tilde;
            // Covariance through the shared mode-k increments.
            let vd_k: f64 = d_vecs[k].iter().zip(&v).map(|(a, b)| a * b).sum();
            let n_top = grid.slab_of(t.min(grid.t_final))? as usize;
            let mut cov = 0.0;
            for n in (1..=n_top).rev() {
                let lo = (n - 1) as f64 * grid.dt;
                let hi = (n as f64 * grid.dt).min(t);
                if hi <= lo {
                    continue;
                }
                if mu_k > 0.0 && mu_k * (t - hi) > 745.0 {
                    break;
                }
                let i_kn = exp_kernel_integral(mu_k, lo, hi, t)?;
                // Midpoint sum of the kernel over this slab's sub-steps.
                let j_lo = (n - 1) * rho;
                let j_hi = ((n * rho) as u64).min(n_sub);
                if (j_lo as u64) >= j_hi {
                    continue;
                }
                let count = j_hi - j_lo as u64;
                let i_min = n_sub - j_hi + 1;
                let mid_sum = delta
                    * (-mu_k * delta * (i_min as f64 - 0.5)).exp()
                    * geometric_exp_sum(mu_k * delta, count);
                cov += lam * (i_kn / grid.dt) * vd_k * mid_sum;
            }
            Ok(var_u - 2.0 * cov + var_uhat)
        })
        .collect::<Result<Vec<_>>>()?;
    let estimand_sq: f64 = terms.iter().sum();

    let theta = super::exact::exact_modeling_error(
        grid,
        params,
        t,
        &super::exact::TailPolicy::default(),
        Some(params.k_max),
    )?;
    Ok(McModelingExact {
        estimand_sq,
        theta_sq_matched: theta.theta_sq,
    })
}
