//! Experiment drivers: one function per command-line subcommand, each
//! producing CSV-ready rows and named pass/fail checks against its
//! acceptance window.
//!
//! The default configurations are the committed desk-scale parameter sets;
//! the command line can override them from a config file.

use crate::error::Result;
use crate::error_analysis::{
    discrete_lt2_mixed, discrete_lt2_spectral, exact_modeling_error, exact_strong_error_fd,
    exact_strong_error_td, fit_rate, mc_modeling_estimand_exact, mc_strong_error, FdOptions,
    FemSpectralMetric, McExperiment, TailPolicy,
};
use crate::evolve::{
    be_det_fem, be_det_spectral, EvolutionConfig, GateMode, SpectralTrajectory,
};
use crate::femspace::{assemble, build_noise_coupling, build_space, solve_shifted_elliptic, RhsInput};
use crate::noise::{
    build_gram, ito_identity_check, project_pi_hat, sample_noise, slab_fn_norm_sq, SlabFn,
    SpaceTimeGrid,
};
use crate::rng::{mix_seed, stream_rng};
use crate::spectral::{
    check_regularity_bound, semigroup_apply, validate_params, SpectralField,
};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// One named verification with its acceptance window.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub label: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    pub pass: bool,
}

impl CheckOutcome {
    pub fn window(label: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            label: label.into(),
            value,
            lo,
            hi,
            pass: value >= lo && value <= hi,
        }
    }

    pub fn at_least(label: impl Into<String>, value: f64, lo: f64) -> Self {
        Self::window(label, value, lo, f64::INFINITY)
    }

    pub fn at_most(label: impl Into<String>, value: f64, hi: f64) -> Self {
        Self::window(label, value, f64::NEG_INFINITY, hi)
    }
}

/// Output of one experiment run.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub name: String,
    /// Human description of the property verified.
    pub claim: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub checks: Vec<CheckOutcome>,
}

impl ExperimentResult {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// RFC-4180-style CSV with full-precision numbers.
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// 17-significant-digit formatting so CSV round-trips f64 exactly.
pub fn fmt_g(v: f64) -> String {
    format!("{v:.16e}")
}

fn slope_to_date(abscissas: &[f64], errors: &[f64]) -> String {
    if abscissas.len() < 3 {
        String::new()
    } else {
        match fit_rate(abscissas, errors) {
            Ok(fit) => fmt_g(fit.slope),
            Err(_) => String::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Elliptic FEM rates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EllipticRatesCfg {
    pub mus: Vec<f64>,
    pub cells: Vec<usize>,
    pub k_max: usize,
}

impl Default for EllipticRatesCfg {
    fn default() -> Self {
        Self {
            mus: vec![0.0, 12.0],
            cells: vec![8, 16, 32, 64, 128],
            k_max: 8,
        }
    }
}

/// Observed L2 convergence order of the shifted fourth-order Galerkin
/// solve with f = eps_1, for both spline families.
pub fn elliptic_rates(cfg: &EllipticRatesCfg) -> Result<ExperimentResult> {
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for &r in &[2u8, 3u8] {
        for &mu in &cfg.mus {
            let params = validate_params(mu, 1.0, cfg.k_max)?;
            let f = SpectralField::basis(1, cfg.k_max);
            let exact_coeff = 1.0 / (params.mu_k(1) + mu * mu);
            let exact = f.scaled(exact_coeff);
            let mut hs = Vec::new();
            let mut errs = Vec::new();
            for &n_cells in &cfg.cells {
                let spec = build_space(r, n_cells)?;
                let asm = assemble(&spec, mu);
                let u_h = solve_shifted_elliptic(RhsInput::Spectral(&f), &spec, &asm);
                // Pointwise quadrature: errors at fine h live far below the
                // cancellation floor of the Gram expansion.
                let err = crate::femspace::l2_distance_quadrature(&spec, &u_h, &exact, 4)?;
                hs.push(spec.h);
                errs.push(err);
                rows.push(vec![
                    r.to_string(),
                    fmt_g(mu),
                    fmt_g(spec.h),
                    fmt_g(err),
                    String::new(),
                    String::new(),
                    slope_to_date(&hs, &errs),
                ]);
            }
            let fit = fit_rate(&hs, &errs)?;
            let floor = if r == 3 { 3.7 } else { 1.9 };
            checks.push(CheckOutcome::at_least(
                format!("elliptic L2 order, r={r}, mu={mu}"),
                fit.slope,
                floor,
            ));
        }
    }
    Ok(ExperimentResult {
        name: "elliptic-rates".into(),
        claim: "Galerkin solve of the shifted fourth-order problem converges in L2 \
                at order >= 4 (cubics) and >= 2 (quadratics)"
            .into(),
        columns: csv_cols(&["r", "mu", "h", "error", "stderr", "tail_rel", "slope_to_date"]),
        rows,
        checks,
    })
}

fn csv_cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

// ---------------------------------------------------------------------------
// Deterministic Backward Euler time rate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DetTimeCfg {
    pub mus: Vec<f64>,
    pub t_final: f64,
    /// Step counts of the sweep, increasing.
    pub m_list: Vec<usize>,
    pub k_max: usize,
    pub gate: GateMode,
}

impl Default for DetTimeCfg {
    fn default() -> Self {
        Self {
            mus: vec![0.0, 12.0],
            t_final: 0.01,
            m_list: vec![8, 16, 32, 64, 128, 256, 512, 1024],
            k_max: 2,
            gate: GateMode::Strict,
        }
    }
}

/// First-order convergence of Backward Euler to the semigroup solution in
/// the discrete-in-time L2 norm, for smooth two-mode initial data.
pub fn det_time_rates(cfg: &DetTimeCfg) -> Result<ExperimentResult> {
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let mut max_gap = 0.0f64;
    for &mu in &cfg.mus {
        let params = validate_params(mu, cfg.t_final, cfg.k_max)?;
        let w0 = SpectralField::basis(1, cfg.k_max).add(&SpectralField::basis(2, cfg.k_max));
        let mut dts = Vec::new();
        let mut errs = Vec::new();
        for &m in &cfg.m_list {
            let config = EvolutionConfig::new(&params, m, cfg.gate)?;
            let be = be_det_spectral(&w0, &params, &config)?;
            let exact = SpectralTrajectory {
                states: (0..=m)
                    .map(|i| semigroup_apply(&w0, i as f64 * config.dtau, &params))
                    .collect::<Result<Vec<_>>>()?,
            };
            let err = discrete_lt2_spectral(&be, &exact, &config)?;
            // Independent closed form, mode by mode.
            let closed = {
                let mut acc = 0.0;
                for step in 1..=m {
                    for k in 1..=2usize {
                        let mu_k = params.mu_k(k);
                        let be_v = (1.0 + config.dtau * mu_k).powi(-(step as i32));
                        let ex_v = (-mu_k * step as f64 * config.dtau).exp();
                        acc += config.dtau * (be_v - ex_v).powi(2);
                    }
                }
                acc.sqrt()
            };
            max_gap = max_gap.max((err - closed).abs() / closed.abs().max(1e-300));
            dts.push(config.dtau);
            errs.push(err);
            rows.push(vec![
                fmt_g(mu),
                fmt_g(config.dtau),
                fmt_g(err),
                String::new(),
                String::new(),
                slope_to_date(&dts, &errs),
            ]);
        }
        let fit = fit_rate(&dts, &errs)?;
        checks.push(CheckOutcome::window(
            format!("Backward Euler time order, mu={mu}"),
            fit.slope,
            0.85,
            1.15,
        ));
    }
    checks.push(CheckOutcome::at_most(
        "closed-form vs pipeline relative gap",
        max_gap,
        1e-13,
    ));
    Ok(ExperimentResult {
        name: "det-time-rates".into(),
        claim: "Backward Euler converges at first order in the step size to the \
                semigroup solution, in the discrete L2-in-time norm"
            .into(),
        columns: csv_cols(&["mu", "dtau", "error", "stderr", "tail_rel", "slope_to_date"]),
        rows,
        checks,
    })
}

// ---------------------------------------------------------------------------
// Deterministic fully-discrete space rate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DetSpaceCfg {
    pub mus: Vec<f64>,
    pub t_final: f64,
    pub m_steps: usize,
    pub cells: Vec<usize>,
    pub k_max: usize,
    pub gate: GateMode,
}

impl Default for DetSpaceCfg {
    fn default() -> Self {
        Self {
            mus: vec![0.0, 12.0],
            t_final: 0.01,
            m_steps: 512,
            cells: vec![8, 16, 32, 64],
            k_max: 2,
            gate: GateMode::Strict,
        }
    }
}

/// Space convergence of the deterministic fully-discrete scheme against the
/// time-discrete spectral trajectory at the same step size.
pub fn det_space_rates(cfg: &DetSpaceCfg) -> Result<ExperimentResult> {
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for &r in &[2u8, 3u8] {
        for &mu in &cfg.mus {
            let params = validate_params(mu, cfg.t_final, cfg.k_max)?;
            let config = EvolutionConfig::new(&params, cfg.m_steps, cfg.gate)?;
            let w0 = SpectralField::basis(1, cfg.k_max).add(&SpectralField::basis(2, cfg.k_max));
            let spectral_traj = be_det_spectral(&w0, &params, &config)?;
            let mut hs = Vec::new();
            let mut errs = Vec::new();
            for &n_cells in &cfg.cells {
                let spec = build_space(r, n_cells)?;
                let asm = assemble(&spec, mu);
                let metric = FemSpectralMetric::new(&spec, cfg.k_max);
                let fem_traj = be_det_fem(&w0, &spec, &asm, &config)?;
                let err = discrete_lt2_mixed(&fem_traj, &spectral_traj, &asm, &metric, &config)?;
                hs.push(spec.h);
                errs.push(err);
                rows.push(vec![
                    r.to_string(),
                    fmt_g(mu),
                    fmt_g(spec.h),
                    fmt_g(err),
                    String::new(),
                    String::new(),
                    slope_to_date(&hs, &errs),
                ]);
            }
            let fit = fit_rate(&hs, &errs)?;
            let floor = if r == 3 { 3.6 } else { 1.9 };
            checks.push(CheckOutcome::at_least(
                format!("fully-discrete space order, r={r}, mu={mu}"),
                fit.slope,
                floor,
            ));
        }
    }
    Ok(ExperimentResult {
        name: "det-space-rates".into(),
        claim: "the deterministic fully-discrete scheme approaches its \
                time-discrete limit at order 2 (quadratics) / 4 (cubics) in h"
            .into(),
        columns: csv_cols(&["r", "mu", "h", "error", "stderr", "tail_rel", "slope_to_date"]),
        rows,
        checks,
    })
}

// ---------------------------------------------------------------------------
// Modeling error
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ModelingCfg {
    pub mu: f64,
    /// Space sweep with the slab count tied to 4096 slabs (as specified).
    pub space_literal_t: f64,
    pub space_literal_slabs: u64,
    /// Space sweep with a noise-resolved time grid.
    pub space_resolved_t: f64,
    pub space_resolved_slabs: u64,
    pub space_cells: Vec<usize>,
    /// Time sweep at fixed fine space grid.
    pub time_t: f64,
    pub time_cells: usize,
    pub time_slab_list: Vec<u64>,
    pub policy: TailPolicy,
}

impl Default for ModelingCfg {
    fn default() -> Self {
        Self {
            mu: 0.0,
            space_literal_t: 1.0,
            space_literal_slabs: 4096,
            // The dx^(1/2) regime needs the slab-averaging deficit pushed
            // below the projection deficit of the finest cell sweep; the
            // closed-form engine makes 2^35 slabs as cheap as 4096.
            space_resolved_t: 2.5e-4,
            space_resolved_slabs: 1u64 << 35,
            space_cells: vec![8, 16, 32, 64, 128, 256],
            time_t: 1.0,
            time_cells: 512,
            time_slab_list: vec![16, 64, 256, 1024, 4096],
            policy: TailPolicy::default(),
        }
    }
}

/// Exact modeling error: root-mean-square distance between the white-noise
/// solution and the regularized-noise solution, by the isometry identity.
pub fn modeling_error(cfg: &ModelingCfg) -> Result<ExperimentResult> {
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let mut worst_tail = 0.0f64;

    let mut space_sweep = |label: &str, t_final: f64, n_slabs: u64| -> Result<f64> {
        let params = validate_params(cfg.mu, t_final, 1)?;
        let mut dxs = Vec::new();
        let mut errs = Vec::new();
        let mut prev = f64::INFINITY;
        for &cells in &cfg.space_cells {
            let grid = SpaceTimeGrid::new(t_final, n_slabs, cells)?;
            let rep = exact_modeling_error(&grid, &params, t_final, &cfg.policy, None)?;
            let theta = rep.theta_sq.sqrt();
            assert!(
                theta <= prev * (1.0 + 1e-12),
                "theta must not increase when dx is refined"
            );
            prev = theta;
            worst_tail = worst_tail.max(rep.tail_sq / rep.theta_sq.max(1e-300));
            dxs.push(grid.dx);
            errs.push(theta);
            rows.push(vec![
                label.to_string(),
                fmt_g(grid.dx),
                fmt_g(grid.dt),
                fmt_g(t_final),
                fmt_g(theta),
                fmt_g(rep.theta_a_sq.sqrt()),
                fmt_g(rep.theta_b_sq.sqrt()),
                String::new(),
                fmt_g(rep.tail_sq / rep.theta_sq.max(1e-300)),
                slope_to_date(&dxs, &errs),
            ]);
        }
        Ok(fit_rate(&dxs, &errs)?.slope)
    };

    let literal_slope = space_sweep("space-dt-T/4096", cfg.space_literal_t, cfg.space_literal_slabs)?;
    let resolved_slope =
        space_sweep("space-dt-resolved", cfg.space_resolved_t, cfg.space_resolved_slabs)?;

    // Time sweep at fixed fine dx.
    let params = validate_params(cfg.mu, cfg.time_t, 1)?;
    let mut dts = Vec::new();
    let mut errs = Vec::new();
    for &n_slabs in &cfg.time_slab_list {
        let grid = SpaceTimeGrid::new(cfg.time_t, n_slabs, cfg.time_cells)?;
        let rep = exact_modeling_error(&grid, &params, cfg.time_t, &cfg.policy, None)?;
        let theta = rep.theta_sq.sqrt();
        worst_tail = worst_tail.max(rep.tail_sq / rep.theta_sq.max(1e-300));
        dts.push(grid.dt);
        errs.push(theta);
        rows.push(vec![
            "time".to_string(),
            fmt_g(grid.dx),
            fmt_g(grid.dt),
            fmt_g(cfg.time_t),
            fmt_g(theta),
            fmt_g(rep.theta_a_sq.sqrt()),
            fmt_g(rep.theta_b_sq.sqrt()),
            String::new(),
            fmt_g(rep.tail_sq / rep.theta_sq.max(1e-300)),
            slope_to_date(&dts, &errs),
        ]);
    }
    let time_slope = fit_rate(&dts, &errs)?.slope;

    checks.push(CheckOutcome::window(
        "space slope, dt = T/4096 (as specified)",
        literal_slope,
        0.4,
        0.6,
    ));
    checks.push(CheckOutcome::window(
        "space slope, noise-resolved dt",
        resolved_slope,
        0.4,
        0.6,
    ));
    checks.push(CheckOutcome::window("time slope", time_slope, 0.08, 0.20));
    checks.push(CheckOutcome::at_most("worst relative tail", worst_tail, 0.01));

    Ok(ExperimentResult {
        name: "modeling-error".into(),
        claim: "strong modeling error decays like dx^(1/2) in the noise cell \
                width and dt^(1/8) in the noise slab length"
            .into(),
        columns: csv_cols(&[
            "sweep",
            "dx",
            "dt",
            "t_final",
            "error",
            "theta_a",
            "theta_b",
            "stderr",
            "tail_rel",
            "slope_to_date",
        ]),
        rows,
        checks,
    })
}

// ---------------------------------------------------------------------------
// Time-discrete strong rate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TimeStrongCfg {
    pub mu: f64,
    pub t_final: f64,
    pub n_slabs: u64,
    pub cells: usize,
    pub m_list: Vec<usize>,
    pub policy: TailPolicy,
    pub gate: GateMode,
}

impl Default for TimeStrongCfg {
    fn default() -> Self {
        Self {
            mu: 0.0,
            t_final: 0.01,
            n_slabs: 65_536,
            cells: 128,
            m_list: vec![16, 32, 64, 128, 256, 512, 1024, 2048, 4096],
            policy: TailPolicy::default(),
            gate: GateMode::Strict,
        }
    }
}

/// Strong rate of the time-discrete scheme against the regularized
/// solution, computed exactly by covariance propagation.
pub fn time_strong(cfg: &TimeStrongCfg) -> Result<ExperimentResult> {
    let grid = SpaceTimeGrid::new(cfg.t_final, cfg.n_slabs, cfg.cells)?;
    let params = validate_params(cfg.mu, cfg.t_final, 1)?;
    let mut rows = Vec::new();
    let mut dtaus = Vec::new();
    let mut errs = Vec::new();
    let mut worst_tail = 0.0f64;
    let mut prev = f64::INFINITY;
    for &m in &cfg.m_list {
        let config = EvolutionConfig::new(&params, m, cfg.gate)?;
        let rep = exact_strong_error_td(&grid, &params, &config, m, &cfg.policy, None)?;
        let err = rep.error_sq.sqrt();
        assert!(err <= prev * (1.0 + 1e-9), "error must shrink as dtau does");
        prev = err;
        worst_tail = worst_tail.max(rep.tail_sq / rep.error_sq.max(1e-300));
        dtaus.push(config.dtau);
        errs.push(err);
        rows.push(vec![
            fmt_g(config.dtau),
            fmt_g(grid.dt),
            fmt_g(grid.dx),
            fmt_g(err),
            String::new(),
            fmt_g(rep.tail_sq / rep.error_sq.max(1e-300)),
            slope_to_date(&dtaus, &errs),
        ]);
    }
    let fit = fit_rate(&dtaus, &errs)?;
    let checks = vec![
        CheckOutcome::window("time-discrete strong slope", fit.slope, 0.08, 0.20),
        CheckOutcome::at_most("worst relative tail", worst_tail, 0.01),
    ];
    Ok(ExperimentResult {
        name: "time-strong".into(),
        claim: "strong error of Backward Euler time stepping against the \
                regularized solution decays like dtau^(1/8)"
            .into(),
        columns: csv_cols(&["dtau", "dt", "dx", "error", "stderr", "tail_rel", "slope_to_date"]),
        rows,
        checks,
    })
}

// ---------------------------------------------------------------------------
// Fully-discrete space strong rate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SpaceStrongSub {
    pub t_final: f64,
    pub m_steps: usize,
    pub n_slabs: u64,
    pub cells: usize,
    pub fem_cells: Vec<usize>,
    pub k_fem: usize,
}

#[derive(Debug, Clone)]
pub struct SpaceStrongCfg {
    pub mu: f64,
    pub r2: SpaceStrongSub,
    pub r3: SpaceStrongSub,
    pub policy: TailPolicy,
    pub gate: GateMode,
}

impl Default for SpaceStrongCfg {
    fn default() -> Self {
        // The h^{nu(r)} regime is carried by the modes the mesh cannot
        // resolve but the time stepping and noise grid still feed; the step
        // counts below keep that feeding cutoff 6-7x above the largest
        // mesh-saturated mode of each sweep, and t_final activates the band
        // bottom.
        Self {
            mu: 0.0,
            r2: SpaceStrongSub {
                t_final: 1e-4,
                m_steps: 1 << 15,
                n_slabs: 1 << 15,
                cells: 128,
                fem_cells: vec![2, 4, 8],
                k_fem: 112,
            },
            r3: SpaceStrongSub {
                t_final: 1e-4,
                m_steps: 1 << 17,
                n_slabs: 1 << 17,
                cells: 128,
                fem_cells: vec![3, 4, 6],
                k_fem: 112,
            },
            policy: TailPolicy::default(),
            gate: GateMode::Strict,
        }
    }
}

/// Strong space rate of the fully discrete scheme against the time-discrete
/// scheme, exactly by covariance propagation.
pub fn space_strong(cfg: &SpaceStrongCfg) -> Result<ExperimentResult> {
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for &r in &[2u8, 3u8] {
        let sub = if r == 3 { &cfg.r3 } else { &cfg.r2 };
        let grid = SpaceTimeGrid::new(sub.t_final, sub.n_slabs, sub.cells)?;
        let params = validate_params(cfg.mu, sub.t_final, 1)?;
        let config = EvolutionConfig::new(&params, sub.m_steps, cfg.gate)?;
        // Sweep points are independent; run them concurrently and collect
        // in mesh order.
        let reports: Vec<_> = sub
            .fem_cells
            .par_iter()
            .map(|&n_cells| -> Result<_> {
                let spec = build_space(r, n_cells)?;
                let asm = assemble(&spec, cfg.mu);
                let coupling = build_noise_coupling(&spec, &grid);
                let opts = FdOptions {
                    policy: cfg.policy,
                    k_fem: sub.k_fem,
                    truncate_at: None,
                };
                let rep = exact_strong_error_fd(
                    &grid, &params, &config, &spec, &asm, &coupling, sub.m_steps, &opts,
                )?;
                Ok((spec.h, rep))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut hs = Vec::new();
        let mut errs = Vec::new();
        for (h, rep) in &reports {
            let err = rep.vs_td_sq.sqrt();
            hs.push(*h);
            errs.push(err);
            rows.push(vec![
                r.to_string(),
                fmt_g(*h),
                fmt_g(config.dtau),
                fmt_g(err),
                fmt_g(rep.vs_uhat_sq.sqrt()),
                String::new(),
                fmt_g(rep.vs_td_tail_sq / rep.vs_td_sq.max(1e-300)),
                slope_to_date(&hs, &errs),
            ]);
        }
        let fit = fit_rate(&hs, &errs)?;
        let (lo, hi) = if r == 3 { (0.40, 0.60) } else { (0.25, 0.45) };
        checks.push(CheckOutcome::window(
            format!("fully-discrete space slope, r={r}"),
            fit.slope,
            lo,
            hi,
        ));
    }
    Ok(ExperimentResult {
        name: "space-strong".into(),
        claim: "strong error between the fully discrete and time-discrete \
                schemes decays like h^(1/3) (quadratics) / h^(1/2) (cubics)"
            .into(),
        columns: csv_cols(&[
            "r",
            "h",
            "dtau",
            "error",
            "error_vs_uhat",
            "stderr",
            "tail_rel",
            "slope_to_date",
        ]),
        rows,
        checks,
    })
}

// ---------------------------------------------------------------------------
// Noise law statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct NoiseStatsCfg {
    pub t_final: f64,
    pub n_slabs: u64,
    pub j_cells: usize,
    pub n_samples: usize,
    pub base_seed: u64,
}

impl Default for NoiseStatsCfg {
    fn default() -> Self {
        Self {
            t_final: 1.0,
            n_slabs: 4,
            j_cells: 8,
            n_samples: 100_000,
            base_seed: 2024,
        }
    }
}

/// Sampled law of the slab vectors R: zero mean, within-slab covariance
/// dt G, independence across slabs.
pub fn noise_stats(cfg: &NoiseStatsCfg) -> Result<ExperimentResult> {
    let grid = SpaceTimeGrid::new(cfg.t_final, cfg.n_slabs, cfg.j_cells)?;
    let gram = build_gram(&grid);
    let n_hats = grid.n_hats();
    let n_slabs = cfg.n_slabs as usize;

    // Accumulate sums and squared sums of products per entry pair, in
    // deterministic blocks.
    let n_pairs = n_hats * (n_hats + 1) / 2;
    let mut within_sum = vec![0.0f64; n_pairs];
    let mut within_sq = vec![0.0f64; n_pairs];
    let mut cross_sum = vec![0.0f64; n_hats * n_hats];
    let mut cross_sq = vec![0.0f64; n_hats * n_hats];
    let mut mean_sum = vec![0.0f64; n_hats];
    let mut mean_sq = vec![0.0f64; n_hats];

    let block = 1000usize;
    let mut done = 0usize;
    while done < cfg.n_samples {
        let hi = (done + block).min(cfg.n_samples);
        let partials: Vec<_> = (done..hi)
            .into_par_iter()
            .map(|i| {
                let s = sample_noise(&grid, &gram, mix_seed(cfg.base_seed, i as u64)).unwrap();
                let mut w_sum = vec![0.0f64; n_pairs];
                let mut w_sq = vec![0.0f64; n_pairs];
                let mut c_sum = vec![0.0f64; n_hats * n_hats];
                let mut c_sq = vec![0.0f64; n_hats * n_hats];
                let mut m_sum = vec![0.0f64; n_hats];
                let mut m_sq = vec![0.0f64; n_hats];
                for n in 1..=n_slabs {
                    let r_n = s.r_slab(n);
                    let mut p = 0;
                    for a in 0..n_hats {
                        m_sum[a] += r_n[a];
                        m_sq[a] += r_n[a] * r_n[a];
                        for b in a..n_hats {
                            let v = r_n[a] * r_n[b];
                            w_sum[p] += v;
                            w_sq[p] += v * v;
                            p += 1;
                        }
                    }
                    if n < n_slabs {
                        let r_next = s.r_slab(n + 1);
                        for a in 0..n_hats {
                            for b in 0..n_hats {
                                let v = r_n[a] * r_next[b];
                                c_sum[a * n_hats + b] += v;
                                c_sq[a * n_hats + b] += v * v;
                            }
                        }
                    }
                }
                (w_sum, w_sq, c_sum, c_sq, m_sum, m_sq)
            })
            .collect();
        for (w_sum, w_sq, c_sum, c_sq, m_sum, m_sq) in partials {
            for (acc, v) in within_sum.iter_mut().zip(&w_sum) {
                *acc += v;
            }
            for (acc, v) in within_sq.iter_mut().zip(&w_sq) {
                *acc += v;
            }
            for (acc, v) in cross_sum.iter_mut().zip(&c_sum) {
                *acc += v;
            }
            for (acc, v) in cross_sq.iter_mut().zip(&c_sq) {
                *acc += v;
            }
            for (acc, v) in mean_sum.iter_mut().zip(&m_sum) {
                *acc += v;
            }
            for (acc, v) in mean_sq.iter_mut().zip(&m_sq) {
                *acc += v;
            }
        }
        done = hi;
    }

    let stats = |sum: f64, sq: f64, count: f64| {
        let mean = sum / count;
        let var = (sq / count - mean * mean).max(0.0);
        (mean, (var / count).sqrt())
    };

    let mut rows = Vec::new();
    let mut worst_within = 0.0f64;
    let mut worst_cross = 0.0f64;
    let mut worst_mean = 0.0f64;
    let within_count = (cfg.n_samples * n_slabs) as f64;
    let cross_count = (cfg.n_samples * (n_slabs - 1)) as f64;

    let mut p = 0;
    for a in 0..n_hats {
        let (mean, se) = stats(mean_sum[a], mean_sq[a], within_count);
        worst_mean = worst_mean.max(mean.abs() / se.max(1e-300));
        for b in a..n_hats {
            let (m, se) = stats(within_sum[p], within_sq[p], within_count);
            let target = grid.dt * gram.entry(a, b);
            let z = (m - target).abs() / se.max(1e-300);
            worst_within = worst_within.max(z);
            rows.push(vec![
                "within".into(),
                a.to_string(),
                b.to_string(),
                fmt_g(m),
                fmt_g(target),
                fmt_g(se),
                fmt_g(z),
            ]);
            p += 1;
        }
    }
    for a in 0..n_hats {
        for b in 0..n_hats {
            let (m, se) = stats(
                cross_sum[a * n_hats + b],
                cross_sq[a * n_hats + b],
                cross_count,
            );
            let z = m.abs() / se.max(1e-300);
            worst_cross = worst_cross.max(z);
            if a <= b {
                rows.push(vec![
                    "cross".into(),
                    a.to_string(),
                    b.to_string(),
                    fmt_g(m),
                    fmt_g(0.0),
                    fmt_g(se),
                    fmt_g(z),
                ]);
            }
        }
    }

    let checks = vec![
        CheckOutcome::at_most("worst within-slab covariance z-score", worst_within, 5.0),
        CheckOutcome::at_most("worst cross-slab covariance z-score", worst_cross, 5.0),
        CheckOutcome::at_most("worst mean z-score", worst_mean, 5.0),
    ];
    Ok(ExperimentResult {
        name: "noise-stats".into(),
        claim: "sampled slab vectors have zero mean, within-slab covariance \
                dt G, and are independent across slabs"
            .into(),
        columns: csv_cols(&["kind", "i", "j", "mean", "target", "se", "z"]),
        rows,
        checks,
    })
}

// ---------------------------------------------------------------------------
// Identity checks (pathwise integral identity, projection, regularity)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct IdentityCfg {
    pub n_ito_cases: usize,
    pub n_regularity_cases: usize,
    pub base_seed: u64,
}

impl Default for IdentityCfg {
    fn default() -> Self {
        Self {
            n_ito_cases: 100,
            n_regularity_cases: 100,
            base_seed: 7,
        }
    }
}

/// Pathwise integral identity, projection properties, and the semigroup
/// regularity bound on randomized inputs.
pub fn identity_checks(cfg: &IdentityCfg) -> Result<ExperimentResult> {
    let mut rows = Vec::new();

    // Pathwise identity on randomized slab functions and samples.
    let grid = SpaceTimeGrid::new(1.0, 8, 8)?;
    let gram = build_gram(&grid);
    let mut worst_ito = 0.0f64;
    for case in 0..cfg.n_ito_cases {
        let mut rng = stream_rng(cfg.base_seed, 10_000 + case as u64);
        let fields: Vec<SpectralField> = (0..8)
            .map(|_| {
                SpectralField::from_coeffs(
                    (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                )
            })
            .collect();
        let g = SlabFn::Spectral(fields);
        let sample = sample_noise(&grid, &gram, mix_seed(cfg.base_seed, case as u64))?;
        let (lhs, rhs) = ito_identity_check(&g, &sample, &gram)?;
        let gap = (lhs - rhs).abs() / (lhs.abs() + 1.0);
        worst_ito = worst_ito.max(gap);
    }
    rows.push(vec![
        "ito-identity".into(),
        fmt_g(worst_ito),
        fmt_g(1e-12),
    ]);

    // Projection: idempotence and non-expansiveness.
    let mut worst_idem = 0.0f64;
    let mut worst_expand = 0.0f64;
    for case in 0..20u64 {
        let mut rng = stream_rng(cfg.base_seed, 20_000 + case);
        let hat: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..9).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let g = SlabFn::Hat(hat.clone());
        let proj = project_pi_hat(&g, &grid, &gram)?;
        for (p, c) in proj.iter().zip(&hat) {
            for (x, y) in p.iter().zip(c) {
                worst_idem = worst_idem.max((x - y).abs());
            }
        }
        let fields: Vec<SpectralField> = (0..8)
            .map(|_| {
                SpectralField::from_coeffs(
                    (0..12).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                )
            })
            .collect();
        let g = SlabFn::Spectral(fields);
        let proj = project_pi_hat(&g, &grid, &gram)?;
        let pn = slab_fn_norm_sq(&SlabFn::Hat(proj), &grid, &gram)?.sqrt();
        let gn = slab_fn_norm_sq(&g, &grid, &gram)?.sqrt();
        worst_expand = worst_expand.max(pn - gn);
    }
    rows.push(vec!["projection-idempotence".into(), fmt_g(worst_idem), fmt_g(1e-12)]);
    rows.push(vec!["projection-nonexpansive".into(), fmt_g(worst_expand), fmt_g(1e-12)]);

    // Regularity bound on randomized data.
    let mut worst_ratio = 0.0f64;
    for case in 0..cfg.n_regularity_cases {
        let mut rng = stream_rng(cfg.base_seed, 30_000 + case as u64);
        let mu = if rng.random::<bool>() { 12.0 } else { 0.0 };
        let params = validate_params(mu, 1.0, 16)?;
        let w0 = SpectralField::from_coeffs(
            (0..16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        );
        let ell = u32::from(rng.random::<bool>());
        let beta = if rng.random::<bool>() { 0.0 } else { 2.0 };
        let p = if rng.random::<bool>() { 0.0 } else { 2.0 };
        let ta = rng.random::<f64>() * 0.5;
        let tb = ta + 1e-6 + rng.random::<f64>() * (1.0 - ta - 1e-6);
        let (lhs, rhs) = check_regularity_bound(&w0, ell, beta, p, ta, tb, &params)?;
        worst_ratio = worst_ratio.max(lhs / rhs.max(f64::MIN_POSITIVE));
    }
    rows.push(vec!["regularity-lhs-over-rhs".into(), fmt_g(worst_ratio), fmt_g(1.0)]);

    let checks = vec![
        CheckOutcome::at_most("pathwise identity relative gap", worst_ito, 1e-12),
        CheckOutcome::at_most("projection idempotence defect", worst_idem, 1e-12),
        CheckOutcome::at_most("projection expansion excess", worst_expand, 1e-12),
        CheckOutcome::at_most("regularity bound lhs/rhs", worst_ratio, 1.0),
    ];
    Ok(ExperimentResult {
        name: "identity-checks".into(),
        claim: "pathwise stochastic-integral identity, projection properties \
                and the semigroup regularity bound hold on randomized inputs"
            .into(),
        columns: csv_cols(&["check", "value", "bound"]),
        rows,
        checks,
    })
}

// ---------------------------------------------------------------------------
// Exact vs Monte Carlo consistency
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct McCrossCfg {
    pub n_samples: usize,
    pub base_seed: u64,
    // Modeling point.
    pub modeling_t: f64,
    pub modeling_slabs: u64,
    pub modeling_cells: usize,
    pub modeling_k: usize,
    pub modeling_rho: usize,
    // Time-discrete point.
    pub td_t: f64,
    pub td_slabs: u64,
    pub td_cells: usize,
    pub td_steps: usize,
    pub td_k: usize,
    // Fully-discrete point.
    pub fd_t: f64,
    pub fd_slabs: u64,
    pub fd_cells: usize,
    pub fd_steps: usize,
    pub fd_fem_cells: usize,
    pub fd_r: u8,
    pub fd_k: usize,
}

impl Default for McCrossCfg {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            base_seed: 99,
            modeling_t: 0.1,
            modeling_slabs: 32,
            modeling_cells: 8,
            modeling_k: 64,
            modeling_rho: 16,
            td_t: 0.01,
            td_slabs: 1024,
            td_cells: 16,
            td_steps: 16,
            td_k: 256,
            // Coarsest point of the quadratic-spline sweep of space-strong.
            fd_t: 1e-4,
            fd_slabs: 1 << 15,
            fd_cells: 128,
            fd_steps: 1 << 15,
            fd_fem_cells: 2,
            fd_r: 2,
            fd_k: 16,
        }
    }
}

/// Common-random-number Monte Carlo estimates against the exact engines at
/// one sweep point each.
pub fn exact_vs_mc(cfg: &McCrossCfg) -> Result<ExperimentResult> {
    let mut rows = Vec::new();
    let mut checks = Vec::new();

    // Modeling error point: the Monte Carlo estimand law differs from the
    // full-noise law by the mode truncation of the coupled noise and the
    // midpoint kernel sampling; both are accounted for exactly and the
    // difference is reported as the coupling bias.
    {
        let grid = SpaceTimeGrid::new(cfg.modeling_t, cfg.modeling_slabs, cfg.modeling_cells)?;
        let params = validate_params(0.0, cfg.modeling_t, cfg.modeling_k)?;
        let k_couple = 64 * cfg.modeling_cells;
        let exact =
            mc_modeling_estimand_exact(&grid, &params, k_couple, cfg.modeling_rho, cfg.modeling_t)?;
        let mc = mc_strong_error(
            &McExperiment::Modeling {
                grid: &grid,
                params: &params,
                k_couple,
                rho: cfg.modeling_rho,
                t: cfg.modeling_t,
            },
            cfg.n_samples,
            cfg.base_seed,
        )?;
        let bias = exact.coupling_bias();
        let gap = (mc.mean_sq - exact.theta_sq_matched).abs();
        rows.push(vec![
            "modeling".into(),
            fmt_g(exact.theta_sq_matched),
            fmt_g(mc.mean_sq),
            fmt_g(mc.stderr_sq),
            fmt_g(bias),
            fmt_g(gap),
        ]);
        checks.push(CheckOutcome::at_most(
            "modeling: |mc - exact| - 3 se - bias",
            gap - 3.0 * mc.stderr_sq - bias,
            0.0,
        ));
    }

    // Time-discrete strong error point.
    {
        let grid = SpaceTimeGrid::new(cfg.td_t, cfg.td_slabs, cfg.td_cells)?;
        let params = validate_params(0.0, cfg.td_t, cfg.td_k)?;
        let config = EvolutionConfig::new(&params, cfg.td_steps, GateMode::Strict)?;
        let exact = exact_strong_error_td(
            &grid,
            &params,
            &config,
            cfg.td_steps,
            &TailPolicy::default(),
            Some(cfg.td_k),
        )?;
        let mc = mc_strong_error(
            &McExperiment::TimeDiscrete {
                grid: &grid,
                params: &params,
                config: &config,
            },
            cfg.n_samples,
            cfg.base_seed + 1,
        )?;
        let gap = (mc.mean_sq - exact.error_sq).abs();
        rows.push(vec![
            "time-discrete".into(),
            fmt_g(exact.error_sq),
            fmt_g(mc.mean_sq),
            fmt_g(mc.stderr_sq),
            fmt_g(0.0),
            fmt_g(gap),
        ]);
        checks.push(CheckOutcome::at_most(
            "time-discrete: |mc - exact| - 3 se",
            gap - 3.0 * mc.stderr_sq,
            0.0,
        ));
    }

    // Fully-discrete strong error point.
    {
        let grid = SpaceTimeGrid::new(cfg.fd_t, cfg.fd_slabs, cfg.fd_cells)?;
        let params = validate_params(0.0, cfg.fd_t, cfg.fd_k)?;
        let config = EvolutionConfig::new(&params, cfg.fd_steps, GateMode::Strict)?;
        let spec = build_space(cfg.fd_r, cfg.fd_fem_cells)?;
        let asm = assemble(&spec, 0.0);
        let coupling = build_noise_coupling(&spec, &grid);
        let metric = FemSpectralMetric::new(&spec, cfg.fd_k);
        let opts = FdOptions {
            policy: TailPolicy::default(),
            k_fem: cfg.fd_k,
            truncate_at: Some(cfg.fd_k),
        };
        let exact = exact_strong_error_fd(
            &grid, &params, &config, &spec, &asm, &coupling, cfg.fd_steps, &opts,
        )?;
        let mc = mc_strong_error(
            &McExperiment::FullyDiscrete {
                grid: &grid,
                params: &params,
                config: &config,
                spec: &spec,
                asm: &asm,
                coupling: &coupling,
                metric: &metric,
            },
            cfg.n_samples,
            cfg.base_seed + 2,
        )?;
        let gap = (mc.mean_sq - exact.vs_td_sq).abs();
        rows.push(vec![
            "fully-discrete".into(),
            fmt_g(exact.vs_td_sq),
            fmt_g(mc.mean_sq),
            fmt_g(mc.stderr_sq),
            fmt_g(0.0),
            fmt_g(gap),
        ]);
        checks.push(CheckOutcome::at_most(
            "fully-discrete: |mc - exact| - 3 se",
            gap - 3.0 * mc.stderr_sq,
            0.0,
        ));
    }

    Ok(ExperimentResult {
        name: "exact-vs-mc".into(),
        claim: "common-random-number Monte Carlo estimates agree with the \
                exact covariance-propagation engines within 3 standard errors"
            .into(),
        columns: csv_cols(&["kind", "exact_sq", "mc_mean_sq", "se_sq", "bias", "gap"]),
        rows,
        checks,
    })
}
