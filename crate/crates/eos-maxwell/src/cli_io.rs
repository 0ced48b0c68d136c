//! Config parsing, canonical serialization, and run-artifact writers.
//!
//! Configs are TOML with a fixed schema: `[grid]`, `[materials]`, `[time]`,
//! exactly one of `[source.artificial]` / `[source.dipole]`, an optional
//! `[output]` block and optional `[[probes]]` entries. Unknown keys are
//! rejected at parse time. Serialization emits a canonical key order with
//! shortest round-trip float formatting, so parse -> serialize is idempotent.
//! CSV writers print 17 significant digits so downstream differencing of
//! near-equal values loses nothing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::Deserialize;

use crate::boundary_kernels::IncidentSourceSpec;
use crate::core_state::{CartesianGrid, FieldState, MaterialParams};
use crate::eos_solver::{
    run_simulation, Excitation, ProbeSeries, RunSummary, Simulation, SimulationParams,
    StepDiagnostics,
};
use crate::verification::{ArtificialSolutionSpec, ArtificialSource, ScanReport};
use crate::{EosError, Result};

/// Default probe cadence: write every step.
const DEFAULT_CADENCE: usize = 1;
/// Default output directory relative to the working directory.
const DEFAULT_OUT_DIR: &str = "out";

// ---------------------------------------------------------------------------
// Raw TOML schema (serde mirror of the file format).
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    grid: RawGrid,
    materials: RawMaterials,
    time: RawTime,
    source: RawSource,
    #[serde(default)]
    probes: Vec<RawProbe>,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    extents: [[f64; 2]; 3],
    counts: [usize; 3],
    boundary_fraction: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMaterials {
    eps0: f64,
    mu0: f64,
    /// Optional: derived as 1/sqrt(eps0 mu0) when omitted.
    c0: Option<f64>,
    eps1: f64,
    mu1: f64,
    /// Optional: derived as 1/sqrt(eps1 mu1) when omitted.
    c1: Option<f64>,
    alpha: f64,
    beta: f64,
    gamma: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTime {
    tau: f64,
    t_end: f64,
    #[serde(default = "default_cadence")]
    cadence: usize,
}

fn default_cadence() -> usize {
    DEFAULT_CADENCE
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSource {
    artificial: Option<RawArtificial>,
    dipole: Option<RawDipole>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArtificial {
    b: f64,
    alpha1: f64,
    beta1: f64,
    origin: [f64; 3],
    t_a: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDipole {
    position: [f64; 3],
    t0: f64,
    amplitude: f64,
    #[serde(default = "default_orientation")]
    orientation: [f64; 3],
}

fn default_orientation() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProbe {
    position: [f64; 3],
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    directory: Option<String>,
    #[serde(default = "default_formats")]
    formats: Vec<String>,
    plane: Option<RawPlane>,
}

fn default_formats() -> Vec<String> {
    vec!["probe-csv".to_string()]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlane {
    axis: String,
    coordinate: f64,
}

// ---------------------------------------------------------------------------
// Validated configuration.
// ---------------------------------------------------------------------------

/// Fully validated run configuration.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub params: SimulationParams,
    pub t_end: f64,
    /// Probe rows are written every `cadence` steps (the initial state is
    /// always row zero).
    pub cadence: usize,
    pub source: SourceConfig,
    pub probes: Vec<Vector3<f64>>,
    pub output: OutputConfig,
}

/// Excitation selection; a config carries exactly one mode.
#[derive(Debug, Clone)]
pub enum SourceConfig {
    Artificial(ArtificialSolutionSpec),
    Dipole(IncidentSourceSpec),
}

/// Output destination and requested artifact formats.
#[derive(Debug, Clone)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<OutputFormat>,
    pub plane: Option<PlaneSpec>,
}

/// Artifact formats a run can emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    /// One CSV per probe: `t,Ex,Ey,Ez,Bx,By,Bz,absE`.
    ProbeCsv,
    /// Legacy ASCII STRUCTURED_GRID snapshot of the final state.
    VtkLegacyAscii,
    /// `x,y,z,absE` rows on the grid plane nearest the configured slice.
    CsvPlane,
}

impl OutputFormat {
    fn name(self) -> &'static str {
        match self {
            OutputFormat::ProbeCsv => "probe-csv",
            OutputFormat::VtkLegacyAscii => "vtk-legacy-ascii",
            OutputFormat::CsvPlane => "csv-plane",
        }
    }
}

/// Axis-aligned plane slice used by csv-plane snapshots.
#[derive(Debug, Clone, Copy)]
pub struct PlaneSpec {
    /// 0 = x, 1 = y, 2 = z.
    pub axis: usize,
    pub coordinate: f64,
}

fn semantic(key: &str, reason: impl Into<String>) -> EosError {
    EosError::ConfigSemantic { key: key.to_string(), reason: reason.into() }
}

fn require_finite(key: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(semantic(key, "value must be finite"))
    }
}

/// Resolves an optional wave speed against c^2 eps mu = 1.
fn resolve_speed(region: usize, eps: f64, mu: f64, given: Option<f64>) -> Result<f64> {
    let derived = 1.0 / (eps * mu).sqrt();
    match given {
        None => Ok(derived),
        Some(c) => {
            let value = c * c * eps * mu;
            if (value - 1.0).abs() <= 1e-9 {
                Ok(c)
            } else {
                Err(EosError::MaterialInconsistency { region, value })
            }
        }
    }
}

/// Parses and validates a TOML run configuration.
pub fn parse_config(text: &str) -> Result<SimConfig> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| EosError::ConfigSyntax(e.to_string()))?;

    // Grid block.
    for (axis, ex) in raw.grid.extents.iter().enumerate() {
        require_finite("grid.extents", ex[0])?;
        require_finite("grid.extents", ex[1])?;
        if !(ex[0] < ex[1]) {
            return Err(semantic(
                "grid.extents",
                format!("axis {axis} has lower bound {} >= upper bound {}", ex[0], ex[1]),
            ));
        }
    }
    for (axis, &n) in raw.grid.counts.iter().enumerate() {
        if n < 4 {
            return Err(semantic("grid.counts", format!("axis {axis} needs >= 4 nodes, got {n}")));
        }
    }
    let bf = raw.grid.boundary_fraction;
    if !(bf > 0.0 && bf <= 1.0) {
        return Err(semantic("grid.boundary_fraction", format!("must lie in (0, 1], got {bf}")));
    }

    // Materials block: positivity, then wave-speed consistency.
    let m = &raw.materials;
    for (key, v) in [
        ("materials.eps0", m.eps0),
        ("materials.mu0", m.mu0),
        ("materials.eps1", m.eps1),
        ("materials.mu1", m.mu1),
    ] {
        require_finite(key, v)?;
        if v <= 0.0 {
            return Err(semantic(key, format!("must be strictly positive, got {v}")));
        }
    }
    for (key, v) in
        [("materials.alpha", m.alpha), ("materials.beta", m.beta), ("materials.gamma", m.gamma)]
    {
        require_finite(key, v)?;
    }
    let c0 = resolve_speed(0, m.eps0, m.mu0, m.c0)?;
    let c1 = resolve_speed(1, m.eps1, m.mu1, m.c1)?;
    let materials = MaterialParams {
        eps0: m.eps0,
        mu0: m.mu0,
        c0,
        eps1: m.eps1,
        mu1: m.mu1,
        c1,
        alpha: m.alpha,
        beta: m.beta,
        gamma: m.gamma,
    };
    materials.validate()?;

    // Time block.
    require_finite("time.tau", raw.time.tau)?;
    require_finite("time.t_end", raw.time.t_end)?;
    if !(raw.time.tau > 0.0) {
        return Err(semantic("time.tau", format!("must be strictly positive, got {}", raw.time.tau)));
    }
    if raw.time.t_end < 0.0 {
        return Err(semantic("time.t_end", format!("must be >= 0, got {}", raw.time.t_end)));
    }
    if raw.time.cadence == 0 {
        return Err(semantic("time.cadence", "must be >= 1"));
    }

    // Source block: exactly one mode.
    let source = match (&raw.source.artificial, &raw.source.dipole) {
        (Some(a), None) => {
            for (key, v) in [
                ("source.artificial.b", a.b),
                ("source.artificial.alpha1", a.alpha1),
                ("source.artificial.beta1", a.beta1),
                ("source.artificial.t_a", a.t_a),
            ] {
                require_finite(key, v)?;
            }
            SourceConfig::Artificial(ArtificialSolutionSpec {
                b: a.b,
                alpha1: a.alpha1,
                beta1: a.beta1,
                x_o: a.origin[0],
                y_o: a.origin[1],
                z_o: a.origin[2],
                t_a: a.t_a,
            })
        }
        (None, Some(d)) => {
            let position = Vector3::from(d.position);
            let orientation = Vector3::from(d.orientation);
            let norm = orientation.norm();
            if norm == 0.0 {
                return Err(semantic("source.dipole.orientation", "must be a nonzero vector"));
            }
            let inside = (0..3).all(|a| {
                position[a] >= raw.grid.extents[a][0] && position[a] <= raw.grid.extents[a][1]
            });
            if inside {
                return Err(semantic(
                    "source.dipole.position",
                    "the point source must lie outside the scatterer box",
                ));
            }
            SourceConfig::Dipole(IncidentSourceSpec {
                x0: position,
                t0: d.t0,
                amplitude: d.amplitude,
                orientation: orientation / norm,
            })
        }
        (Some(_), Some(_)) => {
            return Err(semantic(
                "source",
                "`source.artificial` and `source.dipole` are mutually exclusive",
            ))
        }
        (None, None) => {
            return Err(semantic(
                "source",
                "exactly one of `source.artificial` or `source.dipole` is required",
            ))
        }
    };

    // Probes must be inside the box so trilinear sampling is defined.
    let mut probes = Vec::with_capacity(raw.probes.len());
    for (idx, p) in raw.probes.iter().enumerate() {
        let pos = Vector3::from(p.position);
        let inside = (0..3)
            .all(|a| pos[a] >= raw.grid.extents[a][0] && pos[a] <= raw.grid.extents[a][1]);
        if !inside {
            return Err(semantic(
                "probes",
                format!("probe {idx} at {:?} lies outside the grid extents", p.position),
            ));
        }
        probes.push(pos);
    }

    // Output block.
    let mut formats = Vec::new();
    for name in &raw.output.formats {
        let f = match name.as_str() {
            "probe-csv" => OutputFormat::ProbeCsv,
            "vtk-legacy-ascii" => OutputFormat::VtkLegacyAscii,
            "csv-plane" => OutputFormat::CsvPlane,
            other => {
                return Err(semantic(
                    "output.formats",
                    format!(
                        "unknown format `{other}`; expected probe-csv, vtk-legacy-ascii or csv-plane"
                    ),
                ))
            }
        };
        if !formats.contains(&f) {
            formats.push(f);
        }
    }
    let plane = match &raw.output.plane {
        None => None,
        Some(p) => {
            let axis = match p.axis.as_str() {
                "x" => 0,
                "y" => 1,
                "z" => 2,
                other => {
                    return Err(semantic(
                        "output.plane.axis",
                        format!("expected x, y or z, got `{other}`"),
                    ))
                }
            };
            let ex = raw.grid.extents[axis];
            if !(p.coordinate >= ex[0] && p.coordinate <= ex[1]) {
                return Err(semantic(
                    "output.plane.coordinate",
                    format!("{} lies outside the {} extents [{}, {}]", p.coordinate, p.axis, ex[0], ex[1]),
                ));
            }
            Some(PlaneSpec { axis, coordinate: p.coordinate })
        }
    };
    if formats.contains(&OutputFormat::CsvPlane) && plane.is_none() {
        return Err(semantic(
            "output.plane",
            "required when `output.formats` includes csv-plane",
        ));
    }
    let directory =
        PathBuf::from(raw.output.directory.clone().unwrap_or_else(|| DEFAULT_OUT_DIR.to_string()));

    let params = SimulationParams::new(
        raw.grid.extents,
        raw.grid.counts,
        raw.grid.boundary_fraction,
        raw.time.tau,
        materials,
    );

    Ok(SimConfig {
        params,
        t_end: raw.time.t_end,
        cadence: raw.time.cadence,
        source,
        probes,
        output: OutputConfig { directory, formats, plane },
    })
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> Result<SimConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

// ---------------------------------------------------------------------------
// Canonical serialization.
// ---------------------------------------------------------------------------

/// Shortest decimal that round-trips the value, forced to TOML float syntax.
fn fmt_f64(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains('E') {
        s.push_str(".0");
    }
    s
}

fn fmt_triple(v: &[f64; 3]) -> String {
    format!("[{}, {}, {}]", fmt_f64(v[0]), fmt_f64(v[1]), fmt_f64(v[2]))
}

fn fmt_vec3(v: &Vector3<f64>) -> String {
    fmt_triple(&[v.x, v.y, v.z])
}

/// Emits the canonical TOML form of a config: fixed key order, derived wave
/// speeds written explicitly, shortest round-trip floats.
pub fn serialize_config(config: &SimConfig) -> String {
    let mut s = String::new();
    let g = &config.params;
    s.push_str("[grid]\n");
    let _ = writeln!(
        s,
        "extents = [[{}, {}], [{}, {}], [{}, {}]]",
        fmt_f64(g.extents[0][0]),
        fmt_f64(g.extents[0][1]),
        fmt_f64(g.extents[1][0]),
        fmt_f64(g.extents[1][1]),
        fmt_f64(g.extents[2][0]),
        fmt_f64(g.extents[2][1]),
    );
    let _ = writeln!(s, "counts = [{}, {}, {}]", g.counts[0], g.counts[1], g.counts[2]);
    let _ = writeln!(s, "boundary_fraction = {}", fmt_f64(g.boundary_fraction));

    let m = &g.materials;
    s.push_str("\n[materials]\n");
    for (key, v) in [
        ("eps0", m.eps0),
        ("mu0", m.mu0),
        ("c0", m.c0),
        ("eps1", m.eps1),
        ("mu1", m.mu1),
        ("c1", m.c1),
        ("alpha", m.alpha),
        ("beta", m.beta),
        ("gamma", m.gamma),
    ] {
        let _ = writeln!(s, "{key} = {}", fmt_f64(v));
    }

    s.push_str("\n[time]\n");
    let _ = writeln!(s, "tau = {}", fmt_f64(g.tau));
    let _ = writeln!(s, "t_end = {}", fmt_f64(config.t_end));
    let _ = writeln!(s, "cadence = {}", config.cadence);

    match &config.source {
        SourceConfig::Artificial(a) => {
            s.push_str("\n[source.artificial]\n");
            let _ = writeln!(s, "b = {}", fmt_f64(a.b));
            let _ = writeln!(s, "alpha1 = {}", fmt_f64(a.alpha1));
            let _ = writeln!(s, "beta1 = {}", fmt_f64(a.beta1));
            let _ = writeln!(s, "origin = {}", fmt_triple(&[a.x_o, a.y_o, a.z_o]));
            let _ = writeln!(s, "t_a = {}", fmt_f64(a.t_a));
        }
        SourceConfig::Dipole(d) => {
            s.push_str("\n[source.dipole]\n");
            let _ = writeln!(s, "position = {}", fmt_vec3(&d.x0));
            let _ = writeln!(s, "t0 = {}", fmt_f64(d.t0));
            let _ = writeln!(s, "amplitude = {}", fmt_f64(d.amplitude));
            let _ = writeln!(s, "orientation = {}", fmt_vec3(&d.orientation));
        }
    }

    s.push_str("\n[output]\n");
    let _ = writeln!(s, "directory = {:?}", config.output.directory.display().to_string());
    let names: Vec<String> =
        config.output.formats.iter().map(|f| format!("{:?}", f.name())).collect();
    let _ = writeln!(s, "formats = [{}]", names.join(", "));
    if let Some(p) = config.output.plane {
        let axis = ["x", "y", "z"][p.axis];
        let _ = writeln!(s, "plane = {{ axis = {axis:?}, coordinate = {} }}", fmt_f64(p.coordinate));
    }

    for p in &config.probes {
        s.push_str("\n[[probes]]\n");
        let _ = writeln!(s, "position = {}", fmt_vec3(p));
    }
    s
}

// ---------------------------------------------------------------------------
// CSV / VTK writers.
// ---------------------------------------------------------------------------

/// 17 significant digits: enough to reconstruct the exact double.
fn csv_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Keeps every `cadence`-th sample (always including the first).
pub fn thin_probe_series(series: &ProbeSeries, cadence: usize) -> ProbeSeries {
    assert!(cadence >= 1, "cadence must be >= 1");
    ProbeSeries {
        position: series.position,
        samples: series
            .samples
            .iter()
            .enumerate()
            .filter(|(i, _)| i % cadence == 0)
            .map(|(_, s)| *s)
            .collect(),
    }
}

/// Writes one probe's time series as CSV with header
/// `t,Ex,Ey,Ez,Bx,By,Bz,absE`.
pub fn write_probe_series(series: &ProbeSeries, path: &Path) -> Result<()> {
    let mut s = String::with_capacity(32 + 200 * series.samples.len());
    s.push_str("t,Ex,Ey,Ez,Bx,By,Bz,absE\n");
    for smp in &series.samples {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            csv_f64(smp.time),
            csv_f64(smp.e.x),
            csv_f64(smp.e.y),
            csv_f64(smp.e.z),
            csv_f64(smp.b.x),
            csv_f64(smp.b.y),
            csv_f64(smp.b.z),
            csv_f64(smp.e.norm()),
        );
    }
    fs::write(path, s)?;
    Ok(())
}

/// Writes per-step diagnostics as CSV.
pub fn write_diagnostics(diagnostics: &[StepDiagnostics], path: &Path) -> Result<()> {
    let mut s = String::with_capacity(64 + 160 * diagnostics.len());
    s.push_str("step,time,max_field,max_div_b,continuity_residual,energy,unstable\n");
    for d in diagnostics {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            d.step,
            csv_f64(d.time),
            csv_f64(d.max_field),
            csv_f64(d.max_div_b),
            csv_f64(d.continuity_residual),
            csv_f64(d.energy),
            d.unstable,
        );
    }
    fs::write(path, s)?;
    Ok(())
}

/// Writes stability-scan verdicts as CSV plus a plain-text window summary.
pub fn write_scan_report(report: &ScanReport, dir: &Path) -> Result<()> {
    let mut s = String::from("tau,stable,steps,final_time,max_field\n");
    for v in &report.verdicts {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            csv_f64(v.tau),
            v.stable,
            v.steps,
            csv_f64(v.final_time),
            csv_f64(v.max_field),
        );
    }
    fs::write(dir.join("scan.csv"), s)?;

    let mut t = String::new();
    let _ = writeln!(t, "horizon = {}", csv_f64(report.horizon));
    match (report.tau1, report.tau2) {
        (Some(a), Some(b)) => {
            let _ = writeln!(t, "tau1 = {}", csv_f64(a));
            let _ = writeln!(t, "tau2 = {}", csv_f64(b));
        }
        _ => {
            let _ = writeln!(t, "stable window = none");
        }
    }
    fs::write(dir.join("scan_window.txt"), t)?;
    Ok(())
}

/// Writes the artificial-run report: a plain-text summary plus one error CSV
/// per probe (`t,absE_num,absE_exact,errE,errB`).
pub fn write_artificial_report(
    report: &crate::verification::ArtificialTestReport,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut s = String::new();
    let _ = writeln!(s, "linf_e = {}", csv_f64(report.linf_e));
    let _ = writeln!(s, "linf_b = {}", csv_f64(report.linf_b));
    let _ = writeln!(s, "l2_e = {}", csv_f64(report.l2_e));
    let _ = writeln!(s, "l2_b = {}", csv_f64(report.l2_b));
    let _ = writeln!(s, "rel_linf_abs_e = {}", csv_f64(report.rel_linf_abs_e));
    let _ = writeln!(s, "steps = {}", report.summary.steps);
    let _ = writeln!(s, "final_time = {}", csv_f64(report.summary.final_time));
    match &report.summary.instability {
        Some(rep) => {
            let _ = writeln!(s, "unstable_at_step = {}", rep.step);
        }
        None => {
            let _ = writeln!(s, "unstable_at_step = none");
        }
    }
    fs::write(dir.join("verify_artificial.txt"), s)?;
    for (idx, p) in report.probes.iter().enumerate() {
        let mut c = String::from("t,absE_num,absE_exact,errE,errB\n");
        for i in 0..p.times.len() {
            let _ = writeln!(
                c,
                "{},{},{},{},{}",
                csv_f64(p.times[i]),
                csv_f64(p.abs_e_num[i]),
                csv_f64(p.abs_e_exact[i]),
                csv_f64(p.e_err[i]),
                csv_f64(p.b_err[i]),
            );
        }
        fs::write(dir.join(format!("probe_error_{idx}.csv")), c)?;
    }
    Ok(())
}

/// Writes the Kirchhoff-identity refinement table as CSV: one row per level
/// with the relative residual and the per-target absolute residuals.
pub fn write_kirchhoff_report(
    report: &crate::verification::KirchhoffReport,
    path: &Path,
) -> Result<()> {
    let n_targets = report.levels.first().map_or(0, |l| l.residuals.len());
    let mut s = String::from("cells_per_axis,max_rel_residual");
    for i in 0..n_targets {
        let _ = write!(s, ",residual_{i}");
    }
    s.push('\n');
    for level in &report.levels {
        let _ = write!(s, "{},{}", level.cells_per_axis, csv_f64(level.max_rel_residual));
        for r in &level.residuals {
            let _ = write!(s, ",{}", csv_f64(*r));
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Snapshot output selector.
#[derive(Debug, Clone, Copy)]
pub enum SnapshotFormat {
    /// Legacy ASCII STRUCTURED_GRID with point vectors E, B, J and scalar rho.
    VtkLegacyAscii,
    /// CSV rows `x,y,z,absE` on the grid plane nearest the slice coordinate.
    CsvPlane(PlaneSpec),
}

/// Writes a full-volume or plane snapshot of a field state.
pub fn write_snapshot(
    state: &FieldState,
    grid: &CartesianGrid,
    path: &Path,
    format: SnapshotFormat,
) -> Result<()> {
    match format {
        SnapshotFormat::VtkLegacyAscii => write_snapshot_vtk(state, grid, path),
        SnapshotFormat::CsvPlane(plane) => write_snapshot_plane(state, grid, plane, path),
    }
}

/// Grid-node order matches VTK STRUCTURED_GRID point order (x fastest).
fn write_snapshot_vtk(state: &FieldState, grid: &CartesianGrid, path: &Path) -> Result<()> {
    let [nx, ny, nz] = grid.counts;
    let n = grid.n_nodes();
    let mut s = String::with_capacity(200 * n);
    s.push_str("# vtk DataFile Version 3.0\n");
    let _ = writeln!(s, "eos-maxwell snapshot t = {}", csv_f64(state.time));
    s.push_str("ASCII\nDATASET STRUCTURED_GRID\n");
    let _ = writeln!(s, "DIMENSIONS {nx} {ny} {nz}");
    let _ = writeln!(s, "POINTS {n} double");
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = grid.node_pos(i, j, k);
                let _ = writeln!(s, "{} {} {}", csv_f64(p.x), csv_f64(p.y), csv_f64(p.z));
            }
        }
    }
    let _ = writeln!(s, "POINT_DATA {n}");
    for (name, data) in [("E", &state.e), ("B", &state.b), ("J", &state.j)] {
        let _ = writeln!(s, "VECTORS {name} double");
        for v in data.iter() {
            let _ = writeln!(s, "{} {} {}", csv_f64(v.x), csv_f64(v.y), csv_f64(v.z));
        }
    }
    s.push_str("SCALARS rho double 1\nLOOKUP_TABLE default\n");
    for r in &state.rho {
        let _ = writeln!(s, "{}", csv_f64(*r));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Index of the grid plane nearest the requested coordinate.
fn nearest_plane_index(grid: &CartesianGrid, plane: PlaneSpec) -> Result<usize> {
    let coords = &grid.node_coords[plane.axis];
    let lo = coords[0];
    let hi = coords[coords.len() - 1];
    if !(plane.coordinate >= lo && plane.coordinate <= hi) {
        return Err(EosError::DomainError);
    }
    let mut best = 0;
    for (i, &c) in coords.iter().enumerate() {
        if (c - plane.coordinate).abs() < (coords[best] - plane.coordinate).abs() {
            best = i;
        }
    }
    Ok(best)
}

fn write_snapshot_plane(
    state: &FieldState,
    grid: &CartesianGrid,
    plane: PlaneSpec,
    path: &Path,
) -> Result<()> {
    if plane.axis > 2 {
        return Err(semantic("output.plane.axis", "axis index must be 0, 1 or 2"));
    }
    let fixed = nearest_plane_index(grid, plane)?;
    let [nx, ny, nz] = grid.counts;
    let mut s = String::from("x,y,z,absE\n");
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if [i, j, k][plane.axis] != fixed {
                    continue;
                }
                let p = grid.node_pos(i, j, k);
                let abs_e = state.e[grid.node_index(i, j, k)].norm();
                let _ = writeln!(
                    s,
                    "{},{},{},{}",
                    csv_f64(p.x),
                    csv_f64(p.y),
                    csv_f64(p.z),
                    csv_f64(abs_e),
                );
            }
        }
    }
    fs::write(path, s)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Run driver shared by the CLI and the examples.
// ---------------------------------------------------------------------------

/// Builds a simulation from a validated config.
pub fn build_simulation(config: &SimConfig) -> Result<Simulation> {
    let excitation = match &config.source {
        SourceConfig::Artificial(spec) => Excitation::Artificial(Box::new(ArtificialSource {
            spec: *spec,
            materials: config.params.materials,
        })),
        SourceConfig::Dipole(spec) => Excitation::Dipole(spec.clone()),
    };
    Simulation::new(config.params.clone(), excitation)
}

/// Runs a configured simulation and writes every requested artifact into
/// `out_dir` (falling back to the config's output directory). Instability is
/// reported inside the returned summary, not as an error, so callers can
/// still inspect the partial artifacts.
pub fn execute_run(
    config: &SimConfig,
    out_override: Option<&Path>,
    quiet: bool,
) -> Result<RunSummary> {
    let mut sim = build_simulation(config)?;
    let dir = out_override.unwrap_or(&config.output.directory).to_path_buf();
    fs::create_dir_all(&dir)?;
    if !quiet {
        println!(
            "grid {}x{}x{}  dt = {:.6e}  t_end = {}",
            sim.grid.counts[0], sim.grid.counts[1], sim.grid.counts[2], sim.dt, config.t_end
        );
    }
    let summary = run_simulation(&mut sim, config.t_end, &config.probes, None)?;

    write_diagnostics(&summary.diagnostics, &dir.join("diagnostics.csv"))?;
    if config.output.formats.contains(&OutputFormat::ProbeCsv) {
        for (idx, series) in summary.probes.iter().enumerate() {
            let thinned = thin_probe_series(series, config.cadence);
            write_probe_series(&thinned, &dir.join(format!("probe_{idx}.csv")))?;
        }
    }
    if config.output.formats.contains(&OutputFormat::VtkLegacyAscii) {
        write_snapshot(
            &sim.state,
            &sim.grid,
            &dir.join("snapshot_final.vtk"),
            SnapshotFormat::VtkLegacyAscii,
        )?;
    }
    if config.output.formats.contains(&OutputFormat::CsvPlane) {
        // Parse validation guarantees the plane is present.
        let plane = config.output.plane.expect("csv-plane requires output.plane");
        write_snapshot(
            &sim.state,
            &sim.grid,
            &dir.join("snapshot_plane.csv"),
            SnapshotFormat::CsvPlane(plane),
        )?;
    }
    if !quiet {
        match &summary.instability {
            Some(rep) => println!(
                "UNSTABLE at step {} (t = {:.4}): max field {:.3e} exceeded {:.3e}",
                rep.step, rep.time, rep.max_field, rep.threshold
            ),
            None => println!(
                "completed {} steps to t = {:.6}; artifacts in {}",
                summary.steps,
                summary.final_time,
                dir.display()
            ),
        }
    }
    Ok(summary)
}
