//! Self-convergence of the artificial-source run: halving the grid spacing
//! (and with it the time step) should divide the probe errors by about four.
//!
//!     cargo run --release --example convergence_study [t_end] [half_width] [boundary_fraction] [counts,counts,...]

use eos_maxwell::core_state::MaterialParams;
use eos_maxwell::eos_solver::SimulationParams;
use eos_maxwell::verification::{artificial_source_test, ArtificialSolutionSpec};
use nalgebra::Vector3;
use std::time::Instant;

fn main() -> anyhow::Result<()> {
    let t_end: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3.0);
    let half: f64 = std::env::args().nth(2).map(|s| s.parse()).transpose()?.unwrap_or(0.2);
    let frac: f64 = std::env::args().nth(3).map(|s| s.parse()).transpose()?.unwrap_or(0.75);
    let ladder: Vec<usize> = match std::env::args().nth(4) {
        Some(s) => s.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => vec![6, 11, 21],
    };
    let materials = MaterialParams {
        eps0: 1.0,
        mu0: 1.0,
        c0: 1.0,
        eps1: 1.5,
        mu1: 1.0,
        c1: 1.0 / 1.5f64.sqrt(),
        alpha: 1.0,
        beta: 0.01,
        gamma: 0.01,
    };
    let spec = ArtificialSolutionSpec::reference_pulse();
    let probe = [Vector3::new(0.0, 0.0, 0.0)];
    let mut l2 = Vec::new();
    println!("cells    dt        steps   wall[s]   L2(E)       Linf(E)     rel Linf |E|");
    for &counts in &ladder {
        let params = SimulationParams::new(
            [[-half, half], [-half, half], [-half, half]],
            [counts; 3],
            frac,
            0.45,
            materials,
        );
        let start = Instant::now();
        let report = artificial_source_test(&spec, params, t_end, &probe)?;
        let wall = start.elapsed().as_secs_f64();
        if let Some(bad) = &report.summary.instability {
            anyhow::bail!("run went unstable at step {} (t = {:.3})", bad.step, bad.time);
        }
        println!(
            "{:<8} {:<9.5} {:<7} {:<9.2} {:<11.4e} {:<11.4e} {:<11.4e}",
            counts - 1,
            report.summary.final_time / report.summary.steps as f64,
            report.summary.steps,
            wall,
            report.l2_e,
            report.linf_e,
            report.rel_linf_abs_e,
        );
        l2.push(report.l2_e);
    }
    for k in 1..l2.len() {
        println!("L2 ratio level {k}: {:.2}", l2[k - 1] / l2[k]);
    }
    Ok(())
}
