//! Backward Euler time stepping: deterministic spectral and FEM schemes,
//! the stochastic time-discrete scheme in the sine basis, the fully
//! discrete FEM scheme, and exact evaluators for the regularized solution
//! and the truncated-mode solution of the original problem.
//!
//! Step intervals and noise slabs are independent uniform grids; every
//! coupling between them goes through exact interval intersections.

use crate::error::{CoreError, Result};
use crate::femspace::{
    l2_project, noise_load, Assembly, FemField, NoiseCoupling, RhsInput, SplineSpaceSpec,
};
use crate::linalg::BandedCholesky;
use crate::noise::{basis_spline_inners, CoupledNoise, NoiseSample, SpaceTimeGrid};
use crate::spectral::{exp_kernel_integral, ModelParams, SpectralField};

/// Stability/invertibility gate for implicit stepping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    /// mu^2 dtau < 1/4, the hypothesis of the convergence results.
    #[default]
    Strict,
    /// Only requires 1 + dtau mu_k != 0 up to the mode truncation.
    InvertibilityOnly,
}

/// Uniform time-step configuration for the Backward Euler schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolutionConfig {
    pub m_steps: usize,
    pub dtau: f64,
    pub t_final: f64,
    pub gate: GateMode,
}

impl EvolutionConfig {
    pub fn new(params: &ModelParams, m_steps: usize, gate: GateMode) -> Result<Self> {
        if m_steps < 1 {
            return Err(CoreError::InvalidParameter(
                "need at least one time step".into(),
            ));
        }
        let dtau = params.t_final / m_steps as f64;
        match gate {
            GateMode::Strict => {
                if !(params.mu * params.mu * dtau < 0.25) {
                    return Err(CoreError::GateViolation(format!(
                        "mu^2 dtau = {} >= 1/4",
                        params.mu * params.mu * dtau
                    )));
                }
            }
            GateMode::InvertibilityOnly => {
                for k in 1..=params.k_max {
                    if (1.0 + dtau * params.mu_k(k)).abs() < 1e-12 {
                        return Err(CoreError::GateViolation(format!(
                            "1 + dtau mu_k vanishes at mode {k}"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            m_steps,
            dtau,
            t_final: params.t_final,
            gate,
        })
    }

    /// Step interval endpoints (tau_{m-1}, tau_m), m 1-based.
    pub fn interval(&self, m: usize) -> (f64, f64) {
        ((m - 1) as f64 * self.dtau, m as f64 * self.dtau)
    }
}

/// Per-step spectral states, index 0 is the initial value.
#[derive(Debug, Clone)]
pub struct SpectralTrajectory {
    pub states: Vec<SpectralField>,
}

/// Per-step FEM states, index 0 is the initial value.
#[derive(Debug, Clone)]
pub struct FemTrajectory {
    pub states: Vec<FemField>,
}

/// Length of the intersection of step interval m with noise slab n
/// (both 1-based).
pub fn overlap_weight(m: usize, n: u64, config: &EvolutionConfig, grid: &SpaceTimeGrid) -> f64 {
    let (a0, a1) = config.interval(m);
    let b0 = (n - 1) as f64 * grid.dt;
    let b1 = n as f64 * grid.dt;
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Range of slabs with nonempty intersection with step m.
pub fn overlapping_slabs(m: usize, config: &EvolutionConfig, grid: &SpaceTimeGrid) -> (u64, u64) {
    let (a0, a1) = config.interval(m);
    let lo = ((a0 / grid.dt).floor() as u64 + 1).min(grid.n_slabs);
    let mut hi = (a1 / grid.dt).ceil() as u64;
    // A step endpoint landing exactly on a slab boundary must not drag in
    // the next (measure-zero) slab.
    if hi > 1 && (hi - 1) as f64 * grid.dt >= a1 {
        hi -= 1;
    }
    (lo, hi.clamp(lo, grid.n_slabs))
}

/// Backward Euler for the deterministic equation in the sine basis:
/// coefficient k evolves by powers of 1/(1 + dtau mu_k).
pub fn be_det_spectral(
    w0: &SpectralField,
    params: &ModelParams,
    config: &EvolutionConfig,
) -> Result<SpectralTrajectory> {
    check_invertibility(params, config, w0.k_max())?;
    let denoms: Vec<f64> = (1..=w0.k_max())
        .map(|k| 1.0 + config.dtau * params.mu_k(k))
        .collect();
    // The per-mode recursion has the closed form w_k^m = w_k^0 d_k^{-m};
    // evaluating the power directly avoids O(m eps) drift of the iterated
    // division.
    let states = (0..=config.m_steps)
        .map(|m| {
            SpectralField::from_coeffs(
                w0.coeffs()
                    .iter()
                    .zip(&denoms)
                    .map(|(c, d)| c * d.powi(-(m as i32)))
                    .collect(),
            )
        })
        .collect();
    Ok(SpectralTrajectory { states })
}

fn check_invertibility(params: &ModelParams, config: &EvolutionConfig, k_max: usize) -> Result<()> {
    for k in 1..=k_max {
        if (1.0 + config.dtau * params.mu_k(k)).abs() < 1e-12 {
            return Err(CoreError::GateViolation(format!(
                "Backward Euler step operator singular at mode {k}"
            )));
        }
    }
    Ok(())
}

/// Backward Euler FEM scheme for the deterministic equation;
/// the step matrix is factorized once.
pub fn be_det_fem(
    w0: &SpectralField,
    spec: &SplineSpaceSpec,
    asm: &Assembly,
    config: &EvolutionConfig,
) -> Result<FemTrajectory> {
    let step = step_factor(asm, config)?;
    let mut states = Vec::with_capacity(config.m_steps + 1);
    states.push(l2_project(RhsInput::Spectral(w0), spec, asm));
    let mut rhs = vec![0.0; spec.dim];
    for _ in 1..=config.m_steps {
        let prev = states.last().unwrap();
        asm.mass.matvec(&prev.coeffs, &mut rhs);
        let mut next = rhs.clone();
        step.solve_in_place(&mut next);
        states.push(FemField::from_coeffs(spec, next));
    }
    Ok(FemTrajectory { states })
}

fn step_factor(asm: &Assembly, config: &EvolutionConfig) -> Result<BandedCholesky> {
    if config.gate == GateMode::Strict && !(asm.mu * asm.mu * config.dtau < 0.25) {
        return Err(CoreError::GateViolation(format!(
            "mu^2 dtau = {} >= 1/4",
            asm.mu * asm.mu * config.dtau
        )));
    }
    asm.step_matrix(config.dtau).cholesky().map_err(|e| {
        CoreError::Internal(format!(
            "Backward Euler step matrix failed to factorize: {e}"
        ))
    })
}

/// Slab forcing coefficients w_{k,n} = (eps_k', W-hat(slab n)) for all
/// modes k = 1..=k_max and slabs.
fn slab_mode_forcing(sample: &NoiseSample, k_max: usize) -> Vec<Vec<f64>> {
    let grid = &sample.grid;
    (1..=k_max)
        .map(|k| {
            let (c_k, _) = basis_spline_inners(grid, k);
            (1..=sample.n_slabs())
                .map(|n| {
                    c_k.iter()
                        .zip(sample.a_slab(n))
                        .map(|(c, a)| c * a)
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Stochastic Backward Euler in the sine basis, driven by the regularized
/// noise; starts from zero.
pub fn be_timediscrete_stoch(
    sample: &NoiseSample,
    params: &ModelParams,
    config: &EvolutionConfig,
) -> Result<SpectralTrajectory> {
    let mut states = Vec::with_capacity(config.m_steps + 1);
    run_timediscrete(sample, params, config, |state| states.push(state.to_vec()))?;
    Ok(SpectralTrajectory {
        states: states
            .into_iter()
            .map(SpectralField::from_coeffs)
            .collect(),
    })
}

/// Final state of the stochastic time-discrete scheme without storing the
/// trajectory.
pub fn be_timediscrete_stoch_final(
    sample: &NoiseSample,
    params: &ModelParams,
    config: &EvolutionConfig,
) -> Result<SpectralField> {
    let mut last: Vec<f64> = Vec::new();
    run_timediscrete(sample, params, config, |state| {
        last.clear();
        last.extend_from_slice(state);
    })?;
    Ok(SpectralField::from_coeffs(last))
}

fn run_timediscrete(
    sample: &NoiseSample,
    params: &ModelParams,
    config: &EvolutionConfig,
    mut visit: impl FnMut(&[f64]),
) -> Result<()> {
    gate_check(params, config)?;
    check_invertibility(params, config, params.k_max)?;
    let grid = &sample.grid;
    let forcing = slab_mode_forcing(sample, params.k_max);
    let denoms: Vec<f64> = (1..=params.k_max)
        .map(|k| 1.0 + config.dtau * params.mu_k(k))
        .collect();
    let mut current = vec![0.0; params.k_max];
    visit(&current);
    for m in 1..=config.m_steps {
        let (lo, hi) = overlapping_slabs(m, config, grid);
        for (ki, c) in current.iter_mut().enumerate() {
            let mut f = 0.0;
            for n in lo..=hi {
                let ov = overlap_weight(m, n, config, grid);
                if ov > 0.0 {
                    f -= ov * forcing[ki][(n - 1) as usize];
                }
            }
            *c = (*c + f) / denoms[ki];
        }
        visit(&current);
    }
    Ok(())
}

fn gate_check(params: &ModelParams, config: &EvolutionConfig) -> Result<()> {
    if config.gate == GateMode::Strict && !(params.mu * params.mu * config.dtau < 0.25) {
        return Err(CoreError::GateViolation(format!(
            "mu^2 dtau = {} >= 1/4",
            params.mu * params.mu * config.dtau
        )));
    }
    Ok(())
}

/// Driver for the fully discrete scheme that exposes one step at a time.
pub struct FullyDiscreteStepper<'a> {
    spec: &'a SplineSpaceSpec,
    asm: &'a Assembly,
    config: EvolutionConfig,
    grid: SpaceTimeGrid,
    step: BandedCholesky,
    /// Per-slab load vectors -N^T a_n.
    loads: Vec<Vec<f64>>,
    pub state: FemField,
    pub m_done: usize,
}

impl<'a> FullyDiscreteStepper<'a> {
    pub fn new(
        sample: &NoiseSample,
        spec: &'a SplineSpaceSpec,
        asm: &'a Assembly,
        coupling: &NoiseCoupling,
        config: &EvolutionConfig,
    ) -> Result<Self> {
        let step = step_factor(asm, config)?;
        let loads = (1..=sample.n_slabs())
            .map(|n| noise_load(coupling, sample, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            asm,
            config: *config,
            grid: sample.grid,
            step,
            loads,
            state: FemField::zeros(spec),
            m_done: 0,
        })
    }

    /// Advances one Backward Euler step.
    pub fn advance(&mut self) {
        let m = self.m_done + 1;
        let mut rhs = vec![0.0; self.spec.dim];
        self.asm.mass.matvec(&self.state.coeffs, &mut rhs);
        let (lo, hi) = overlapping_slabs(m, &self.config, &self.grid);
        for n in lo..=hi {
            let ov = overlap_weight(m, n, &self.config, &self.grid);
            if ov > 0.0 {
                for (r, l) in rhs.iter_mut().zip(&self.loads[(n - 1) as usize]) {
                    *r += ov * l;
                }
            }
        }
        self.step.solve_in_place(&mut rhs);
        self.state = FemField::from_coeffs(self.spec, rhs);
        self.m_done = m;
    }
}

/// Fully discrete Backward Euler FEM scheme driven by the regularized
/// noise; returns the whole trajectory.
pub fn be_fullydiscrete(
    sample: &NoiseSample,
    spec: &SplineSpaceSpec,
    asm: &Assembly,
    coupling: &NoiseCoupling,
    config: &EvolutionConfig,
) -> Result<FemTrajectory> {
    let mut stepper = FullyDiscreteStepper::new(sample, spec, asm, coupling, config)?;
    let mut states = Vec::with_capacity(config.m_steps + 1);
    states.push(stepper.state.clone());
    for _ in 1..=config.m_steps {
        stepper.advance();
        states.push(stepper.state.clone());
    }
    Ok(FemTrajectory { states })
}

/// Final state of the fully discrete scheme without storing the trajectory.
pub fn be_fullydiscrete_final(
    sample: &NoiseSample,
    spec: &SplineSpaceSpec,
    asm: &Assembly,
    coupling: &NoiseCoupling,
    config: &EvolutionConfig,
) -> Result<FemField> {
    let mut stepper = FullyDiscreteStepper::new(sample, spec, asm, coupling, config)?;
    for _ in 1..=config.m_steps {
        stepper.advance();
    }
    Ok(stepper.state)
}

/// Exact solution of the regularized problem at time t, mode by mode:
/// u-hat_k(t) = -sum_n I_{k,n}(t) (eps_k', W-hat slab n), with I the exact
/// exponential slab integrals over T_n intersected with (0, t).
pub fn exact_uhat(sample: &NoiseSample, t: f64, params: &ModelParams) -> Result<SpectralField> {
    let grid = &sample.grid;
    if !(0.0..=grid.t_final + 1e-12 * grid.t_final).contains(&t) {
        return Err(CoreError::OutOfRange(format!(
            "t={t} outside [0, {}]",
            grid.t_final
        )));
    }
    let mut coeffs = vec![0.0; params.k_max];
    if t == 0.0 {
        return Ok(SpectralField::from_coeffs(coeffs));
    }
    let forcing = slab_mode_forcing(sample, params.k_max);
    let n_t = grid.slab_of(t.min(grid.t_final))?;
    for (ki, c) in coeffs.iter_mut().enumerate() {
        let mu_k = params.mu_k(ki + 1);
        let mut acc = 0.0;
        for n in (1..=n_t).rev() {
            let lo = (n - 1) as f64 * grid.dt;
            let hi = (n as f64 * grid.dt).min(t);
            // Later slabs dominate; stop once the kernel has decayed away.
            if mu_k > 0.0 && mu_k * (t - hi) > 745.0 {
                break;
            }
            let i_kn = exp_kernel_integral(mu_k, lo, hi, t)?;
            acc += i_kn * forcing[ki][(n - 1) as usize];
        }
        *c = -acc;
    }
    Ok(SpectralField::from_coeffs(coeffs))
}

/// Mode-truncated solution of the original problem at a sub-grid point,
/// evaluated with a midpoint exponential integrator on the coupled noise.
pub fn exact_u_truncated(
    coupled: &CoupledNoise,
    t: f64,
    params: &ModelParams,
) -> Result<SpectralField> {
    let sub_dt = coupled.sub_dt();
    let steps_f = t / sub_dt;
    let steps = steps_f.round() as usize;
    if (steps_f - steps as f64).abs() > 1e-9 * steps_f.max(1.0) {
        return Err(CoreError::OutOfRange(format!(
            "t={t} is not a sub-grid point (sub step {sub_dt})"
        )));
    }
    let k_use = params.k_max.min(coupled.k_couple);
    let mut coeffs = vec![0.0; params.k_max];
    for (ki, c) in coeffs.iter_mut().enumerate().take(k_use) {
        let k = ki + 1;
        let mu_k = params.mu_k(k);
        let lam = ModelParams::lambda(k);
        let dbeta = coupled.dbeta_mode(k);
        let mut acc = 0.0;
        for (j, &db) in dbeta.iter().enumerate().take(steps) {
            let s_mid = (j as f64 + 0.5) * sub_dt;
            let decay = mu_k * (t - s_mid);
            if decay > 745.0 {
                continue;
            }
            acc += (-decay).exp() * db;
        }
        *c = -lam * acc;
    }
    Ok(SpectralField::from_coeffs(coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::femspace::{assemble, build_noise_coupling, build_space};
    use crate::noise::{build_gram, sample_noise};
    use crate::quad::composite_gauss;
    use crate::spectral::validate_params;
    use std::f64::consts::PI;

    #[test]
    fn config_gates() {
        let p = validate_params(12.0, 1.0, 4).unwrap();
        // mu^2 = 144: strict gate requires dtau < 1/576.
        assert!(EvolutionConfig::new(&p, 500, GateMode::Strict).is_err());
        assert!(EvolutionConfig::new(&p, 600, GateMode::Strict).is_ok());
        assert!(EvolutionConfig::new(&p, 500, GateMode::InvertibilityOnly).is_ok());
        let cfg = EvolutionConfig::new(&p, 600, GateMode::Strict).unwrap();
        assert!((cfg.dtau * cfg.m_steps as f64 - p.t_final).abs() < 1e-15);
    }

    #[test]
    fn overlap_examples() {
        // Aligned grids: full step length on the diagonal, zero off support.
        let p = validate_params(0.0, 1.0, 2).unwrap();
        let cfg = EvolutionConfig::new(&p, 4, GateMode::Strict).unwrap();
        let grid = SpaceTimeGrid::new(1.0, 4, 2).unwrap();
        assert!((overlap_weight(2, 2, &cfg, &grid) - cfg.dtau).abs() < 1e-16);
        assert_eq!(overlap_weight(1, 3, &cfg, &grid), 0.0);

        // dtau = 0.3 vs dt = 0.25: step 1 = (0, 0.3) overlaps slab 2 =
        // (0.25, 0.5) by 0.05.
        let pb = validate_params(0.0, 1.5, 2).unwrap();
        let cfgb = EvolutionConfig::new(&pb, 5, GateMode::Strict).unwrap();
        let gridb = SpaceTimeGrid::new(1.5, 6, 2).unwrap();
        assert!((cfgb.dtau - 0.3).abs() < 1e-15);
        assert!((gridb.dt - 0.25).abs() < 1e-15);
        assert!((overlap_weight(1, 2, &cfgb, &gridb) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn overlaps_partition_each_step() {
        let p = validate_params(0.0, 1.0, 2).unwrap();
        let cfg = EvolutionConfig::new(&p, 7, GateMode::Strict).unwrap();
        let grid = SpaceTimeGrid::new(1.0, 11, 2).unwrap();
        for m in 1..=7 {
            let (lo, hi) = overlapping_slabs(m, &cfg, &grid);
            let total: f64 = (lo..=hi).map(|n| overlap_weight(m, n, &cfg, &grid)).sum();
            assert!((total - cfg.dtau).abs() < 1e-14, "m={m}");
        }
    }

    #[test]
    fn be_spectral_examples() {
        let p = validate_params(0.0, 1.0, 4).unwrap();
        let cfg = EvolutionConfig::new(&p, 100, GateMode::Strict).unwrap();
        let w0 = SpectralField::basis(1, 4);
        let traj = be_det_spectral(&w0, &p, &cfg).unwrap();
        assert_eq!(traj.states[0], w0);
        let pi4 = PI.powi(4);
        assert!((traj.states[1].coeff(1) - 1.0 / (1.0 + 0.01 * pi4)).abs() < 1e-15);
        assert!((traj.states[1].coeff(1) - 0.506562).abs() < 1e-6);
        // Contraction for nonnegative drift eigenvalues.
        for m in 1..=100 {
            assert!(traj.states[m].coeff(1).abs() <= traj.states[m - 1].coeff(1).abs());
        }
        // Closed-form powers.
        for m in [3usize, 17, 100] {
            let expect = (1.0 + cfg.dtau * pi4).powi(-(m as i32));
            assert!((traj.states[m].coeff(1) - expect).abs() <= 1e-13 * expect.abs());
        }
    }

    #[test]
    fn be_fem_zero_initial_state() {
        let p = validate_params(0.0, 0.1, 4).unwrap();
        let spec = build_space(3, 6).unwrap();
        let asm = assemble(&spec, p.mu);
        let cfg = EvolutionConfig::new(&p, 8, GateMode::Strict).unwrap();
        let traj = be_det_fem(&SpectralField::zeros(4), &spec, &asm, &cfg).unwrap();
        for st in &traj.states {
            assert!(st.coeffs.iter().all(|&c| c == 0.0));
        }
    }

    #[test]
    fn be_fem_energy_monotonicity() {
        // (1 - 2 dtau mu^2) gamma(W^m) + 2 dtau ||W^m||^2 <= gamma(W^{m-1}).
        let p = validate_params(12.0, 0.01, 6).unwrap();
        let spec = build_space(3, 8).unwrap();
        let asm = assemble(&spec, p.mu);
        let cfg = EvolutionConfig::new(&p, 64, GateMode::Strict).unwrap();
        let w0 = SpectralField::basis(1, 6).add(&SpectralField::basis(2, 6));
        let traj = be_det_fem(&w0, &spec, &asm, &cfg).unwrap();
        for m in 1..=cfg.m_steps {
            let g_now = asm.gamma_tilde(&traj.states[m], &traj.states[m]);
            let g_prev = asm.gamma_tilde(&traj.states[m - 1], &traj.states[m - 1]);
            let l2 = asm.l2_norm(&traj.states[m]).powi(2);
            let lhs = (1.0 - 2.0 * cfg.dtau * p.mu * p.mu) * g_now + 2.0 * cfg.dtau * l2;
            assert!(lhs <= g_prev + 1e-10, "m={m}");
        }
    }

    #[test]
    fn stoch_zero_noise_and_linearity() {
        let p = validate_params(0.0, 1.0, 6).unwrap();
        let grid = SpaceTimeGrid::new(1.0, 8, 8).unwrap();
        let gram = build_gram(&grid);
        let cfg = EvolutionConfig::new(&p, 10, GateMode::Strict).unwrap();

        let zero = NoiseSample::from_r(&grid, &gram, vec![vec![0.0; 9]; 8], 0).unwrap();
        let traj = be_timediscrete_stoch(&zero, &p, &cfg).unwrap();
        for st in &traj.states {
            assert!(st.coeffs().iter().all(|&c| c == 0.0));
        }

        let s1 = sample_noise(&grid, &gram, 11).unwrap();
        let s2 = sample_noise(&grid, &gram, 12).unwrap();
        let sum_r: Vec<Vec<f64>> = (0..8)
            .map(|n| {
                s1.r_slab(n + 1)
                    .iter()
                    .zip(s2.r_slab(n + 1))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();
        let s12 = NoiseSample::from_r(&grid, &gram, sum_r, 0).unwrap();
        let t1 = be_timediscrete_stoch(&s1, &p, &cfg).unwrap();
        let t2 = be_timediscrete_stoch(&s2, &p, &cfg).unwrap();
        let t12 = be_timediscrete_stoch(&s12, &p, &cfg).unwrap();
        for m in 0..=cfg.m_steps {
            for k in 1..=6 {
                let lin = t1.states[m].coeff(k) + t2.states[m].coeff(k);
                let direct = t12.states[m].coeff(k);
                assert!((lin - direct).abs() <= 1e-13 * direct.abs().max(1.0));
            }
        }
    }

    #[test]
    fn stoch_duhamel_boundedness() {
        // |a_k^m| <= sum_j |f_k^j| for modes with nonnegative drift.
        let p = validate_params(0.0, 1.0, 4).unwrap();
        let grid = SpaceTimeGrid::new(1.0, 16, 8).unwrap();
        let gram = build_gram(&grid);
        let cfg = EvolutionConfig::new(&p, 12, GateMode::Strict).unwrap();
        let s = sample_noise(&grid, &gram, 3).unwrap();
        let traj = be_timediscrete_stoch(&s, &p, &cfg).unwrap();
        let forcing = slab_mode_forcing(&s, 4);
        for k in 1..=4usize {
            let mut total = 0.0;
            for m in 1..=cfg.m_steps {
                let (lo, hi) = overlapping_slabs(m, &cfg, &grid);
                let f: f64 = (lo..=hi)
                    .map(|n| overlap_weight(m, n, &cfg, &grid) * forcing[k - 1][(n - 1) as usize])
                    .sum();
                total += f.abs();
            }
            for m in 0..=cfg.m_steps {
                assert!(traj.states[m].coeff(k).abs() <= total + 1e-12);
            }
        }
    }

    #[test]
    fn manufactured_slab_forcing_matches_quadrature() {
        // Single-slab noise with W-hat = psi_i on slab 1: the step-1 forcing
        // of mode k must equal -overlap * (eps_k', psi_i).
        let grid = SpaceTimeGrid::new(1.0, 4, 6).unwrap();
        let gram = build_gram(&grid);
        let p = validate_params(0.0, 1.0, 5).unwrap();
        let cfg = EvolutionConfig::new(&p, 4, GateMode::Strict).unwrap();
        let i = 2usize;
        let mut e = vec![0.0; grid.n_hats()];
        e[i] = 1.0;
        let mut ge = vec![0.0; grid.n_hats()];
        gram.matrix().matvec(&e, &mut ge);
        let mut r = vec![vec![0.0; grid.n_hats()]; 4];
        r[0] = ge.iter().map(|v| v * grid.dt).collect();
        let s = NoiseSample::from_r(&grid, &gram, r, 0).unwrap();
        let traj = be_timediscrete_stoch(&s, &p, &cfg).unwrap();
        for k in 1..=5usize {
            let lam = (k as f64) * PI;
            let oracle = composite_gauss(0.0, 1.0, 8, 48, &|x| {
                2f64.sqrt() * lam * (lam * x).cos() * grid.hat(i, x)
            });
            let f = -cfg.dtau * oracle;
            let expect = f / (1.0 + cfg.dtau * p.mu_k(k));
            assert!(
                (traj.states[1].coeff(k) - expect).abs() < 1e-12,
                "mode {k}"
            );
        }
    }

    #[test]
    fn fully_discrete_zero_and_linearity() {
        let p = validate_params(0.0, 0.5, 4).unwrap();
        let grid = SpaceTimeGrid::new(0.5, 8, 8).unwrap();
        let gram = build_gram(&grid);
        let spec = build_space(3, 6).unwrap();
        let asm = assemble(&spec, p.mu);
        let coupling = build_noise_coupling(&spec, &grid);
        let cfg = EvolutionConfig::new(&p, 10, GateMode::Strict).unwrap();

        let zero = NoiseSample::from_r(&grid, &gram, vec![vec![0.0; 9]; 8], 0).unwrap();
        let traj = be_fullydiscrete(&zero, &spec, &asm, &coupling, &cfg).unwrap();
        for st in &traj.states {
            assert!(st.coeffs.iter().all(|&c| c == 0.0));
        }

        let s1 = sample_noise(&grid, &gram, 21).unwrap();
        let s2 = sample_noise(&grid, &gram, 22).unwrap();
        let sum_r: Vec<Vec<f64>> = (0..8)
            .map(|n| {
                s1.r_slab(n + 1)
                    .iter()
                    .zip(s2.r_slab(n + 1))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();
        let s12 = NoiseSample::from_r(&grid, &gram, sum_r, 0).unwrap();
        let t1 = be_fullydiscrete_final(&s1, &spec, &asm, &coupling, &cfg).unwrap();
        let t2 = be_fullydiscrete_final(&s2, &spec, &asm, &coupling, &cfg).unwrap();
        let t12 = be_fullydiscrete_final(&s12, &spec, &asm, &coupling, &cfg).unwrap();
        for d in 0..spec.dim {
            let lin = t1.coeffs[d] + t2.coeffs[d];
            assert!((lin - t12.coeffs[d]).abs() <= 1e-12 * t12.coeffs[d].abs().max(1.0));
        }
    }

    #[test]
    fn step_matrix_positive_definite_across_gate() {
        for &mu in &[0.0, 5.0, 12.0] {
            let spec = build_space(2, 8).unwrap();
            let asm = assemble(&spec, mu);
            for &m_steps in &[600usize, 1200, 4800] {
                let p = validate_params(mu, 1.0, 4).unwrap();
                let cfg = EvolutionConfig::new(&p, m_steps, GateMode::Strict);
                if let Ok(cfg) = cfg {
                    assert!(asm.step_matrix(cfg.dtau).cholesky().is_ok(), "mu={mu}");
                }
            }
        }
    }

    #[test]
    fn exact_uhat_examples() {
        let p = validate_params(0.0, 1.0, 6).unwrap();
        let grid = SpaceTimeGrid::new(1.0, 8, 8).unwrap();
        let gram = build_gram(&grid);
        let s = sample_noise(&grid, &gram, 30).unwrap();
        let at0 = exact_uhat(&s, 0.0, &p).unwrap();
        assert!(at0.coeffs().iter().all(|&c| c == 0.0));
        let zero = NoiseSample::from_r(&grid, &gram, vec![vec![0.0; 9]; 8], 0).unwrap();
        let v = exact_uhat(&zero, 0.7, &p).unwrap();
        assert!(v.coeffs().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn be_converges_to_uhat_under_refinement() {
        // For one fixed sample, the time-discrete solution approaches the
        // exact regularized solution as dtau shrinks.
        let p = validate_params(0.0, 0.5, 8).unwrap();
        let grid = SpaceTimeGrid::new(0.5, 8, 8).unwrap();
        let gram = build_gram(&grid);
        let s = sample_noise(&grid, &gram, 31).unwrap();
        let target = exact_uhat(&s, 0.5, &p).unwrap();
        let mut errors = Vec::new();
        for m_steps in [32usize, 128, 512, 2048] {
            let cfg = EvolutionConfig::new(&p, m_steps, GateMode::Strict).unwrap();
            let traj = be_timediscrete_stoch(&s, &p, &cfg).unwrap();
            let err = traj.states[m_steps].sub(&target);
            errors.push(err.coeffs().iter().map(|c| c * c).sum::<f64>().sqrt());
        }
        for w in errors.windows(2) {
            assert!(w[1] < w[0], "{errors:?}");
        }
        assert!(errors[3] < errors[0] / 20.0, "{errors:?}");
    }

    #[test]
    fn fully_discrete_approaches_time_discrete_under_h_refinement() {
        // One fixed sample: the pathwise gap between the fully discrete and
        // time-discrete solutions shrinks monotonically as the mesh refines.
        let k_max = 48;
        let p = validate_params(0.0, 0.02, k_max).unwrap();
        let grid = SpaceTimeGrid::new(0.02, 16, 16).unwrap();
        let gram = build_gram(&grid);
        let cfg = EvolutionConfig::new(&p, 32, GateMode::Strict).unwrap();
        let s = sample_noise(&grid, &gram, 77).unwrap();
        let u_td = be_timediscrete_stoch(&s, &p, &cfg).unwrap();
        let target = &u_td.states[cfg.m_steps];
        let mut prev = f64::INFINITY;
        for n_cells in [4usize, 8, 16] {
            let spec = build_space(3, n_cells).unwrap();
            let asm = assemble(&spec, p.mu);
            let coupling = build_noise_coupling(&spec, &grid);
            let u_h = be_fullydiscrete_final(&s, &spec, &asm, &coupling, &cfg).unwrap();
            let metric = crate::error_analysis::FemSpectralMetric::new(&spec, k_max);
            let d = metric.distance(&asm, &u_h, target);
            assert!(d < prev, "h=1/{n_cells}: {d} !< {prev}");
            prev = d;
        }
    }

    #[test]
    fn u_truncated_examples() {
        let p = validate_params(0.0, 0.5, 4).unwrap();
        let grid = SpaceTimeGrid::new(0.5, 4, 4).unwrap();
        let coupled = crate::noise::sample_coupled_noise(&grid, 8, 4, 5).unwrap();
        let at0 = exact_u_truncated(&coupled, 0.0, &p).unwrap();
        assert!(at0.coeffs().iter().all(|&c| c == 0.0));
        assert!(exact_u_truncated(&coupled, 0.1234, &p).is_err());

        // Single-mode noise decouples.
        let mut single = coupled.clone();
        for k in 0..=8usize {
            if k != 1 {
                for v in &mut single.dbeta[k] {
                    *v = 0.0;
                }
            }
        }
        let u = exact_u_truncated(&single, 0.5, &p).unwrap();
        assert!(u.coeff(1) != 0.0);
        for k in 2..=4 {
            assert_eq!(u.coeff(k), 0.0);
        }
    }
}
