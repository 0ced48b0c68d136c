//! Thin CLI over the eos-maxwell library.
//!
//! Subcommands: `run` (simulate a config and write artifacts),
//! `verify-artificial` (error report against the closed-form solution),
//! `scan-stability` (Courant-number sweep), `oracle-kirchhoff` and
//! `oracle-quadrature` (standalone integral-identity checks). Every
//! subcommand exits nonzero on error; instability exits with code 2.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eos_maxwell::cli_io::{
    execute_run, load_config, write_artificial_report, write_kirchhoff_report, write_scan_report,
    SimConfig, SourceConfig,
};
use eos_maxwell::verification::{
    artificial_source_test, kirchhoff_identity_check, quadrature_oracle_report, stability_scan,
    ArtificialSolutionSpec,
};
use eos_maxwell::{EosError, Result};

/// Exit status used when a run trips the instability monitor.
const EXIT_UNSTABLE: u8 = 2;
/// Default Courant sweep for `scan-stability`: 0.05, 0.10, ..., 1.20.
fn default_tau_grid() -> Vec<f64> {
    (1..=24).map(|i| i as f64 * 0.05).collect()
}

#[derive(Parser)]
#[command(
    name = "eos",
    version,
    about = "Ewald-Oseen scattering solver for the 3D nonlinear Maxwell equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the config-driven subcommands.
#[derive(Args)]
struct RunOpts {
    /// Path to the TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's `output.directory`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Courant-number override; for `scan-stability` it replaces the sweep
    /// with this single value.
    #[arg(long)]
    tau: Option<f64>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation and write probe series, diagnostics and snapshots.
    Run(RunOpts),
    /// Run the artificial-solution configuration and report probe errors
    /// against the closed form.
    VerifyArtificial(RunOpts),
    /// Sweep the Courant number and report the contiguous stable window.
    ScanStability(RunOpts),
    /// Check the retarded Kirchhoff identity on a refinement ladder.
    OracleKirchhoff {
        /// Directory for the residual table CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Suppress the per-level table.
        #[arg(long)]
        quiet: bool,
    },
    /// Check the singular surface quadrature against closed forms.
    OracleQuadrature {
        /// Suppress the per-check table.
        #[arg(long)]
        quiet: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                EosError::Instability { .. } => ExitCode::from(EXIT_UNSTABLE),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run(opts) => cmd_run(&opts),
        Command::VerifyArtificial(opts) => cmd_verify_artificial(&opts),
        Command::ScanStability(opts) => cmd_scan_stability(&opts),
        Command::OracleKirchhoff { out, quiet } => cmd_oracle_kirchhoff(out.as_deref(), quiet),
        Command::OracleQuadrature { quiet } => cmd_oracle_quadrature(quiet),
    }
}

/// Loads a config and applies the `--tau` override.
fn load_with_tau(path: &Path, tau: Option<f64>) -> Result<SimConfig> {
    let mut config = load_config(path)?;
    if let Some(tau) = tau {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(EosError::ConfigSemantic {
                key: "--tau".into(),
                reason: format!("must be positive and finite, got {tau}"),
            });
        }
        config.params.tau = tau;
    }
    Ok(config)
}

/// Extracts the artificial-source spec or explains which subcommand needs it.
fn require_artificial(config: &SimConfig, what: &str) -> Result<ArtificialSolutionSpec> {
    match &config.source {
        SourceConfig::Artificial(spec) => Ok(*spec),
        SourceConfig::Dipole(_) => Err(EosError::ConfigSemantic {
            key: "source".into(),
            reason: format!("{what} requires [source.artificial]"),
        }),
    }
}

fn cmd_run(opts: &RunOpts) -> Result<ExitCode> {
    let config = load_with_tau(&opts.config, opts.tau)?;
    let summary = execute_run(&config, opts.out.as_deref(), opts.quiet)?;
    Ok(match summary.instability {
        Some(_) => ExitCode::from(EXIT_UNSTABLE),
        None => ExitCode::SUCCESS,
    })
}

fn cmd_verify_artificial(opts: &RunOpts) -> Result<ExitCode> {
    let config = load_with_tau(&opts.config, opts.tau)?;
    let spec = require_artificial(&config, "verify-artificial")?;
    let probes = if config.probes.is_empty() {
        vec![nalgebra::Vector3::new(spec.x_o, spec.y_o, spec.z_o)]
    } else {
        config.probes.clone()
    };
    let report = artificial_source_test(&spec, config.params.clone(), config.t_end, &probes)?;
    let dir = opts
        .out
        .clone()
        .unwrap_or_else(|| config.output.directory.clone());
    write_artificial_report(&report, &dir)?;
    if !opts.quiet {
        println!(
            "verify-artificial: rel_linf_abs_e = {:.6e}, linf_e = {:.6e}, l2_e = {:.6e}, \
             steps = {}, report in {}",
            report.rel_linf_abs_e,
            report.linf_e,
            report.l2_e,
            report.summary.steps,
            dir.display()
        );
    }
    if let Some(rep) = &report.summary.instability {
        eprintln!(
            "verify-artificial: UNSTABLE at step {} (max field {:.3e})",
            rep.step, rep.max_field
        );
        return Ok(ExitCode::from(EXIT_UNSTABLE));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_scan_stability(opts: &RunOpts) -> Result<ExitCode> {
    let config = load_with_tau(&opts.config, None)?;
    let spec = require_artificial(&config, "scan-stability")?;
    let taus = match opts.tau {
        Some(tau) => vec![tau],
        None => default_tau_grid(),
    };
    let report = stability_scan(&config.params, &spec, &taus)?;
    let dir = opts
        .out
        .clone()
        .unwrap_or_else(|| config.output.directory.clone());
    std::fs::create_dir_all(&dir)?;
    write_scan_report(&report, &dir)?;
    if !opts.quiet {
        for v in &report.verdicts {
            println!(
                "tau = {:>5.2}  {}  ({} steps to t = {:.3})",
                v.tau,
                if v.stable { "stable  " } else { "UNSTABLE" },
                v.steps,
                v.final_time
            );
        }
        match (report.tau1, report.tau2) {
            (Some(a), Some(b)) => println!("stable window: [{a}, {b}] at horizon {:.3}", report.horizon),
            _ => println!("stable window: none at horizon {:.3}", report.horizon),
        }
    }
    Ok(match report.tau1 {
        Some(_) => ExitCode::SUCCESS,
        None => ExitCode::from(EXIT_UNSTABLE),
    })
}

fn cmd_oracle_kirchhoff(out: Option<&Path>, quiet: bool) -> Result<ExitCode> {
    let report = kirchhoff_identity_check(&[8, 16, 32])?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_kirchhoff_report(&report, &dir.join("kirchhoff.csv"))?;
    }
    let residuals: Vec<f64> = report.levels.iter().map(|l| l.max_rel_residual).collect();
    if !quiet {
        for level in &report.levels {
            println!(
                "cells/axis = {:>3}  max relative residual = {:.6e}",
                level.cells_per_axis, level.max_rel_residual
            );
        }
    }
    let monotone = residuals.windows(2).all(|w| w[1] < w[0]);
    let final_ok = residuals.last().is_some_and(|r| *r < 0.01);
    if monotone && final_ok {
        if !quiet {
            println!("oracle-kirchhoff: PASS");
        }
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("oracle-kirchhoff: FAIL (residuals {residuals:?})");
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_oracle_quadrature(quiet: bool) -> Result<ExitCode> {
    let report = quadrature_oracle_report()?;
    if !quiet {
        println!(
            "self-panel 1/R:   numeric = {:.12}, analytic = {:.12}",
            report.self_inv_r.0, report.self_inv_r.1
        );
        println!("strong kernel PV: max deviation vs exclusion oracle = {:.3e}", report.pv_deviation);
        println!(
            "chi(1) disk:      numeric = {:.12}, analytic = {:.12}",
            report.chi_unit.0, report.chi_unit.1
        );
    }
    if report.pass() {
        if !quiet {
            println!("oracle-quadrature: PASS");
        }
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "oracle-quadrature: FAIL (1/R dev {:.3e}, PV dev {:.3e}, chi dev {:.3e})",
            (report.self_inv_r.0 - report.self_inv_r.1).abs(),
            report.pv_deviation,
            (report.chi_unit.0 - report.chi_unit.1).abs()
        );
        Ok(ExitCode::FAILURE)
    }
}
