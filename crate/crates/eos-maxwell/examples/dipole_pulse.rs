//! Pulse transit of the exterior dipole source: the plane-integrated |E|^2
//! on the monitored plane rises from zero as the pulse arrives and decays
//! back once it has passed.
//!
//!     cargo run --release --example dipole_pulse [tau] [counts] [half_width] [t_end]
//!
//! Arguments default to the shipped dipole config; overrides help explore
//! the resolution/timestep plane.

use eos_maxwell::cli_io::{load_config, SourceConfig};
use eos_maxwell::verification::dipole_transit_test;
use std::path::Path;

fn main() -> anyhow::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/dipole_scattering.toml");
    let mut config = load_config(&path)?;
    if let Some(tau) = std::env::args().nth(1) {
        config.params.tau = tau.parse()?;
    }
    if let Some(counts) = std::env::args().nth(2) {
        config.params.counts = [counts.parse()?; 3];
    }
    if let Some(half) = std::env::args().nth(3) {
        let h: f64 = half.parse()?;
        config.params.extents = [[-h, h]; 3];
    }
    if let Some(t_end) = std::env::args().nth(4) {
        config.t_end = t_end.parse()?;
    }
    let src = match &config.source {
        SourceConfig::Dipole(src) => src.clone(),
        _ => anyhow::bail!("config must use a dipole source"),
    };
    let plane = config.output.plane.ok_or_else(|| anyhow::anyhow!("config must set a plane"))?;
    let report =
        dipole_transit_test(&src, config.params.clone(), config.t_end, plane.axis, plane.coordinate)?;
    if let Some(bad) = &report.summary.instability {
        anyhow::bail!("run went unstable at step {} (t = {:.3})", bad.step, bad.time);
    }

    println!("t        plane-integrated |E|^2");
    let stride = (report.times.len() / 40).max(1);
    for (i, (&t, &u)) in report.times.iter().zip(&report.plane_energy).enumerate() {
        if i % stride == 0 {
            let bar = "#".repeat((60.0 * u / report.peak).round() as usize);
            println!("{t:<8.3} {u:<12.4e} {bar}");
        }
    }
    println!(
        "peak {:.4e} at t = {:.3}; final fraction of peak = {:.3e}",
        report.peak, report.peak_time, report.final_fraction
    );
    Ok(())
}
