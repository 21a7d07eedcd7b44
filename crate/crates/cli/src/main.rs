//! Command line runner: one subcommand per experiment, CSV artifacts and a
//! pass/fail summary against each acceptance window.
//!
//! Exit codes: 0 all checks pass, 1 a check failed its window, 2 the
//! configuration was invalid.

mod config;

use anyhow::{bail, Context, Result};
use chc_core::error_analysis::TailPolicy;
use chc_core::evolve::{be_det_spectral, EvolutionConfig, GateMode};
use chc_core::experiments::{self, ExperimentResult};
use chc_core::femspace::{assemble, build_space};
use chc_core::noise::{build_gram, sample_noise, NoiseSample, SpaceTimeGrid};
use chc_core::spectral::{validate_params, SpectralField};
use clap::{Parser, Subcommand};
use config::ConfigFile;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "chc",
    about = "Experiment harness for a linear Cahn-Hilliard-Cook solver: \
             convergence-rate studies, noise-law statistics and exact-vs-sampled \
             error cross-checks",
    version
)]
struct Cli {
    /// Flat key = value config file overriding the committed defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base seed override for sampled experiments.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for CSV artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads (0 = one per logical CPU).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Enforce the stability gate mu^2 dtau < 1/4; with
    /// `--strict-gate=false` only step-operator invertibility is required.
    #[arg(long, global = true, default_value_t = true, action = clap::ArgAction::Set)]
    strict_gate: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// L2 convergence order of the shifted fourth-order Galerkin solve.
    EllipticRates {
        /// Also dump the assembled mass/bending/gradient matrices as CSV.
        #[arg(long)]
        dump_matrices: bool,
    },
    /// Backward Euler time order against the semigroup solution.
    DetTimeRates {
        /// Export the finest Backward Euler trajectory as CSV.
        #[arg(long)]
        export_trajectory: bool,
    },
    /// Space order of the deterministic fully-discrete scheme.
    DetSpaceRates,
    /// Exact strong modeling error: space and time sweeps.
    ModelingError,
    /// Exact strong rate of the time-discrete scheme.
    TimeStrong,
    /// Exact strong space rate of the fully discrete scheme.
    SpaceStrong,
    /// Sampled law of the noise slab vectors.
    NoiseStats,
    /// Pathwise integral identity, projection and regularity checks.
    IdentityChecks,
    /// Monte Carlo cross-checks of the exact error engines.
    ExactVsMc,
    /// Draw one noise sample and export it as CSV (columns n,i,r);
    /// `--verify` re-imports the file and checks bit-exact round-trip.
    NoiseSample {
        #[arg(long, default_value_t = 8)]
        slabs: u64,
        #[arg(long, default_value_t = 8)]
        cells: usize,
        #[arg(long, default_value_t = 1.0)]
        t_final: f64,
        #[arg(long)]
        verify: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(match run(cli) {
        Ok(all_passed) => {
            if all_passed {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("configuration error: {e:#}");
            2
        }
    });
}

fn run(cli: Cli) -> Result<bool> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("building thread pool")?;
    }
    let gate = if cli.strict_gate {
        GateMode::Strict
    } else {
        GateMode::InvertibilityOnly
    };
    let file = match &cli.config {
        Some(path) => Some(ConfigFile::load(path)?),
        None => None,
    };
    let cfg = file.as_ref();

    let result = match &cli.command {
        Command::EllipticRates { dump_matrices } => {
            let mut c = experiments::EllipticRatesCfg::default();
            if let Some(f) = cfg {
                f.list_f64("model", "mus", &mut c.mus)?;
                f.list_usize("sweep", "cells", &mut c.cells)?;
                f.usize("model", "k_max", &mut c.k_max)?;
                f.reject_unknown()?;
            }
            validate_mus(&c.mus)?;
            if *dump_matrices {
                dump_assembly(&cli.out, &c)?;
            }
            experiments::elliptic_rates(&c)?
        }
        Command::DetTimeRates { export_trajectory } => {
            let mut c = experiments::DetTimeCfg::default();
            c.gate = gate;
            if let Some(f) = cfg {
                f.list_f64("model", "mus", &mut c.mus)?;
                f.f64("model", "t_final", &mut c.t_final)?;
                f.list_usize("sweep", "steps", &mut c.m_list)?;
                f.usize("model", "k_max", &mut c.k_max)?;
                f.reject_unknown()?;
            }
            validate_mus(&c.mus)?;
            if *export_trajectory {
                export_be_trajectory(&cli.out, &c)?;
            }
            experiments::det_time_rates(&c)?
        }
        Command::DetSpaceRates => {
            let mut c = experiments::DetSpaceCfg::default();
            c.gate = gate;
            if let Some(f) = cfg {
                f.list_f64("model", "mus", &mut c.mus)?;
                f.f64("model", "t_final", &mut c.t_final)?;
                f.usize("time", "steps", &mut c.m_steps)?;
                f.list_usize("sweep", "cells", &mut c.cells)?;
                f.usize("model", "k_max", &mut c.k_max)?;
                f.reject_unknown()?;
            }
            validate_mus(&c.mus)?;
            experiments::det_space_rates(&c)?
        }
        Command::ModelingError => {
            let mut c = experiments::ModelingCfg::default();
            if let Some(f) = cfg {
                f.f64("model", "mu", &mut c.mu)?;
                f.f64("space-literal", "t_final", &mut c.space_literal_t)?;
                f.u64("space-literal", "n_slabs", &mut c.space_literal_slabs)?;
                f.f64("space-resolved", "t_final", &mut c.space_resolved_t)?;
                f.u64("space-resolved", "n_slabs", &mut c.space_resolved_slabs)?;
                f.list_usize("space", "cells", &mut c.space_cells)?;
                f.f64("time", "t_final", &mut c.time_t)?;
                f.usize("time", "cells", &mut c.time_cells)?;
                f.list_u64("time", "slabs", &mut c.time_slab_list)?;
                apply_tail(f, &mut c.policy)?;
                f.reject_unknown()?;
            }
            validate_mus(&[c.mu])?;
            experiments::modeling_error(&c)?
        }
        Command::TimeStrong => {
            let mut c = experiments::TimeStrongCfg::default();
            c.gate = gate;
            if let Some(f) = cfg {
                f.f64("model", "mu", &mut c.mu)?;
                f.f64("model", "t_final", &mut c.t_final)?;
                f.u64("noise", "n_slabs", &mut c.n_slabs)?;
                f.usize("noise", "cells", &mut c.cells)?;
                f.list_usize("sweep", "steps", &mut c.m_list)?;
                apply_tail(f, &mut c.policy)?;
                f.reject_unknown()?;
            }
            validate_mus(&[c.mu])?;
            experiments::time_strong(&c)?
        }
        Command::SpaceStrong => {
            let mut c = experiments::SpaceStrongCfg::default();
            c.gate = gate;
            if let Some(f) = cfg {
                f.f64("model", "mu", &mut c.mu)?;
                apply_space_sub(f, "r2", &mut c.r2)?;
                apply_space_sub(f, "r3", &mut c.r3)?;
                apply_tail(f, &mut c.policy)?;
                f.reject_unknown()?;
            }
            validate_mus(&[c.mu])?;
            experiments::space_strong(&c)?
        }
        Command::NoiseStats => {
            let mut c = experiments::NoiseStatsCfg::default();
            if let Some(f) = cfg {
                f.f64("noise", "t_final", &mut c.t_final)?;
                f.u64("noise", "n_slabs", &mut c.n_slabs)?;
                f.usize("noise", "cells", &mut c.j_cells)?;
                f.usize("mc", "n_samples", &mut c.n_samples)?;
                f.u64("mc", "base_seed", &mut c.base_seed)?;
                f.reject_unknown()?;
            }
            if let Some(seed) = cli.seed {
                c.base_seed = seed;
            }
            experiments::noise_stats(&c)?
        }
        Command::IdentityChecks => {
            let mut c = experiments::IdentityCfg::default();
            if let Some(f) = cfg {
                f.usize("mc", "n_ito_cases", &mut c.n_ito_cases)?;
                f.usize("mc", "n_regularity_cases", &mut c.n_regularity_cases)?;
                f.u64("mc", "base_seed", &mut c.base_seed)?;
                f.reject_unknown()?;
            }
            if let Some(seed) = cli.seed {
                c.base_seed = seed;
            }
            experiments::identity_checks(&c)?
        }
        Command::ExactVsMc => {
            let mut c = experiments::McCrossCfg::default();
            if let Some(f) = cfg {
                f.usize("mc", "n_samples", &mut c.n_samples)?;
                f.u64("mc", "base_seed", &mut c.base_seed)?;
                f.f64("modeling", "t_final", &mut c.modeling_t)?;
                f.u64("modeling", "n_slabs", &mut c.modeling_slabs)?;
                f.usize("modeling", "cells", &mut c.modeling_cells)?;
                f.usize("modeling", "k_max", &mut c.modeling_k)?;
                f.usize("modeling", "rho", &mut c.modeling_rho)?;
                f.f64("time-discrete", "t_final", &mut c.td_t)?;
                f.u64("time-discrete", "n_slabs", &mut c.td_slabs)?;
                f.usize("time-discrete", "cells", &mut c.td_cells)?;
                f.usize("time-discrete", "steps", &mut c.td_steps)?;
                f.usize("time-discrete", "k_max", &mut c.td_k)?;
                f.f64("fully-discrete", "t_final", &mut c.fd_t)?;
                f.u64("fully-discrete", "n_slabs", &mut c.fd_slabs)?;
                f.usize("fully-discrete", "cells", &mut c.fd_cells)?;
                f.usize("fully-discrete", "steps", &mut c.fd_steps)?;
                f.usize("fully-discrete", "fem_cells", &mut c.fd_fem_cells)?;
                f.u8("fully-discrete", "r", &mut c.fd_r)?;
                f.usize("fully-discrete", "k_max", &mut c.fd_k)?;
                f.reject_unknown()?;
            }
            if let Some(seed) = cli.seed {
                c.base_seed = seed;
            }
            experiments::exact_vs_mc(&c)?
        }
        Command::NoiseSample {
            slabs,
            cells,
            t_final,
            verify,
        } => {
            return noise_sample_command(&cli, *slabs, *cells, *t_final, *verify);
        }
    };

    emit(&cli.out, &result)
}

fn validate_mus(mus: &[f64]) -> Result<()> {
    for &mu in mus {
        validate_params(mu, 1.0, 1).map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    Ok(())
}

fn apply_tail(f: &ConfigFile, policy: &mut TailPolicy) -> Result<()> {
    f.f64("tail", "rel_tol", &mut policy.rel_tol)?;
    f.usize("tail", "k_cap", &mut policy.k_cap)?;
    Ok(())
}

fn apply_space_sub(
    f: &ConfigFile,
    section: &str,
    sub: &mut experiments::SpaceStrongSub,
) -> Result<()> {
    f.f64(section, "t_final", &mut sub.t_final)?;
    f.usize(section, "steps", &mut sub.m_steps)?;
    f.u64(section, "n_slabs", &mut sub.n_slabs)?;
    f.usize(section, "cells", &mut sub.cells)?;
    f.list_usize(section, "fem_cells", &mut sub.fem_cells)?;
    f.usize(section, "k_fem", &mut sub.k_fem)?;
    Ok(())
}

/// Prints the summary, writes the CSV artifact, and reports overall pass.
fn emit(out_dir: &std::path::Path, result: &ExperimentResult) -> Result<bool> {
    println!("{}: {}", result.name, result.claim);
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let path = out_dir.join(format!("{}.csv", result.name));
    std::fs::write(&path, result.to_csv())
        .with_context(|| format!("writing {}", path.display()))?;
    println!("  wrote {}", path.display());
    for c in &result.checks {
        let window = if c.hi.is_infinite() && c.lo.is_infinite() {
            String::from("(informational)")
        } else if c.hi.is_infinite() {
            format!(">= {:.4}", c.lo)
        } else if c.lo.is_infinite() {
            format!("<= {:.4}", c.hi)
        } else {
            format!("in [{:.4}, {:.4}]", c.lo, c.hi)
        };
        println!(
            "  [{}] {}: {:.6} (want {})",
            if c.pass { "PASS" } else { "FAIL" },
            c.label,
            c.value,
            window
        );
    }
    Ok(result.passed())
}

fn dump_assembly(out_dir: &std::path::Path, c: &experiments::EllipticRatesCfg) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for &r in &[2u8, 3u8] {
        let n_cells = *c.cells.first().unwrap_or(&8);
        let spec = build_space(r, n_cells).map_err(|e| anyhow::anyhow!("{e}"))?;
        let asm = assemble(&spec, c.mus.first().copied().unwrap_or(0.0));
        let mut text = String::from("matrix,i,j,value\n");
        for (name, m) in [
            ("mass", &asm.mass),
            ("bending", &asm.bending),
            ("gradient", &asm.grad),
        ] {
            for i in 0..spec.dim {
                for j in i.saturating_sub(spec.bandwidth)..spec.dim.min(i + spec.bandwidth + 1) {
                    text.push_str(&format!(
                        "{name},{i},{j},{}\n",
                        experiments::fmt_g(m.get(i, j))
                    ));
                }
            }
        }
        let path = out_dir.join(format!("matrices-r{r}.csv"));
        std::fs::write(&path, text)?;
        println!("  wrote {}", path.display());
    }
    Ok(())
}

fn export_be_trajectory(out_dir: &std::path::Path, c: &experiments::DetTimeCfg) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mu = c.mus.first().copied().unwrap_or(0.0);
    let m = c.m_list.last().copied().unwrap_or(64);
    let params = validate_params(mu, c.t_final, c.k_max).map_err(|e| anyhow::anyhow!("{e}"))?;
    let config = EvolutionConfig::new(&params, m, c.gate).map_err(|e| anyhow::anyhow!("{e}"))?;
    let w0 = SpectralField::basis(1, c.k_max).add(&SpectralField::basis(2, c.k_max));
    let traj = be_det_spectral(&w0, &params, &config).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut text = String::from("m,tau_m,k,value\n");
    for (step, state) in traj.states.iter().enumerate() {
        for k in 1..=state.k_max() {
            text.push_str(&format!(
                "{step},{},{k},{}\n",
                experiments::fmt_g(step as f64 * config.dtau),
                experiments::fmt_g(state.coeff(k))
            ));
        }
    }
    let path = out_dir.join("be-trajectory.csv");
    std::fs::write(&path, text)?;
    println!("  wrote {}", path.display());
    Ok(())
}

fn noise_sample_command(
    cli: &Cli,
    slabs: u64,
    cells: usize,
    t_final: f64,
    verify: bool,
) -> Result<bool> {
    let grid = SpaceTimeGrid::new(t_final, slabs, cells).map_err(|e| anyhow::anyhow!("{e}"))?;
    let gram = build_gram(&grid);
    let seed = cli.seed.unwrap_or(0);
    let sample = sample_noise(&grid, &gram, seed).map_err(|e| anyhow::anyhow!("{e}"))?;
    std::fs::create_dir_all(&cli.out)?;
    let path = cli.out.join("noise-sample.csv");
    let text = sample.to_csv();
    std::fs::write(&path, &text)?;
    println!("wrote {}", path.display());
    if verify {
        let back = NoiseSample::from_csv(&grid, &gram, &std::fs::read_to_string(&path)?, seed)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        for n in 1..=sample.n_slabs() {
            if back.r_slab(n) != sample.r_slab(n) {
                bail!("round-trip mismatch at slab {n}");
            }
        }
        println!("round-trip verified bit-exact");
    }
    Ok(true)
}
