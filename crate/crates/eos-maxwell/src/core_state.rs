//! Grid geometry, surface mesh, field storage, time-history buffers and the
//! rank-one boundary operator inverse.

use crate::{EosError, Result};
use nalgebra::{Matrix3, Vector3};

/// Per-axis spacing of the graded layer next to each face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisSpacing {
    /// Width of the single cell adjacent to each face.
    pub boundary: f64,
    /// Width of every interior cell.
    pub interior: f64,
}

/// Rectangular interior grid, uniform except for one graded cell at each face.
///
/// Layout rule per axis: with nominal spacing `h = L/(n-1)` the two
/// face-adjacent cells get width `boundary_fraction * h` and the `n-3`
/// interior cells stretch uniformly so the nodes still span the extent.
#[derive(Debug, Clone)]
pub struct CartesianGrid {
    pub extents: [[f64; 2]; 3],
    pub counts: [usize; 3],
    pub node_coords: [Vec<f64>; 3],
    pub boundary_layer: [AxisSpacing; 3],
    pub boundary_fraction: f64,
}

/// Box face identifiers; `Min`/`Max` refer to the coordinate along `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Face {
    XMin,
    XMax,
    YMin,
    YMax,
    ZMin,
    ZMax,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::XMin, Face::XMax, Face::YMin, Face::YMax, Face::ZMin, Face::ZMax];

    /// Axis normal to the face (0, 1 or 2).
    pub fn axis(self) -> usize {
        match self {
            Face::XMin | Face::XMax => 0,
            Face::YMin | Face::YMax => 1,
            Face::ZMin | Face::ZMax => 2,
        }
    }

    /// True for the `Max` side of the axis.
    pub fn is_max(self) -> bool {
        matches!(self, Face::XMax | Face::YMax | Face::ZMax)
    }

    /// Outward unit normal (out of the scatterer volume).
    pub fn normal(self) -> Vector3<f64> {
        let mut n = Vector3::zeros();
        n[self.axis()] = if self.is_max() { 1.0 } else { -1.0 };
        n
    }

    /// The two in-plane axes, ordered (u, v) with u < v.
    pub fn tangent_axes(self) -> (usize, usize) {
        match self.axis() {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }
}

/// A flat rectangular surface panel (one boundary cell face).
#[derive(Debug, Clone)]
pub struct Panel {
    pub centroid: Vector3<f64>,
    /// Unit normal pointing out of the scatterer.
    pub normal: Vector3<f64>,
    pub area: f64,
    pub face_id: Face,
    /// Flat grid-node indices of the four corners, counter-clockwise seen
    /// from outside.
    pub node_indices: [usize; 4],
    /// In-plane half extents along the face tangent axes (u, v).
    pub half_u: f64,
    pub half_v: f64,
}

impl Panel {
    /// Diameter of the panel rectangle.
    pub fn diameter(&self) -> f64 {
        2.0 * (self.half_u * self.half_u + self.half_v * self.half_v).sqrt()
    }
}

/// Quadrilateral panels covering the six faces of the box.
#[derive(Debug, Clone)]
pub struct SurfaceMesh {
    pub panels: Vec<Panel>,
    pub total_area: f64,
}

/// Collocated interior fields plus boundary-trace arrays on the panels.
#[derive(Debug, Clone)]
pub struct FieldState {
    pub e: Vec<Vector3<f64>>,
    pub b: Vec<Vector3<f64>>,
    pub j: Vec<Vector3<f64>>,
    pub rho: Vec<f64>,
    /// Inside limits of E on the surface panels (one per panel centroid).
    pub trace_e_plus: Vec<Vector3<f64>>,
    pub trace_b_plus: Vec<Vector3<f64>>,
    pub time: f64,
}

impl FieldState {
    /// All-zero fields at the given start time.
    pub fn zeros(grid: &CartesianGrid, mesh: &SurfaceMesh, time: f64) -> Self {
        let n = grid.n_nodes();
        let p = mesh.panels.len();
        FieldState {
            e: vec![Vector3::zeros(); n],
            b: vec![Vector3::zeros(); n],
            j: vec![Vector3::zeros(); n],
            rho: vec![0.0; n],
            trace_e_plus: vec![Vector3::zeros(); p],
            trace_b_plus: vec![Vector3::zeros(); p],
            time,
        }
    }

    /// Max-norm over every stored component, interior and traces.
    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for v in self.e.iter().chain(&self.b).chain(&self.j) {
            m = m.max(v.amax());
        }
        for r in &self.rho {
            m = m.max(r.abs());
        }
        for v in self.trace_e_plus.iter().chain(&self.trace_b_plus) {
            m = m.max(v.amax());
        }
        m
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.e
            .iter()
            .chain(&self.b)
            .chain(&self.j)
            .chain(&self.trace_e_plus)
            .chain(&self.trace_b_plus)
            .all(|v| v.x.is_finite() && v.y.is_finite() && v.z.is_finite())
            && self.rho.iter().all(|r| r.is_finite())
    }
}

/// Material constants per region (0 = outside, 1 = inside) and the current
/// model constants.
#[derive(Debug, Clone, Copy)]
pub struct MaterialParams {
    pub eps0: f64,
    pub mu0: f64,
    pub c0: f64,
    pub eps1: f64,
    pub mu1: f64,
    pub c1: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl MaterialParams {
    /// Checks positivity and c_j^2 eps_j mu_j = 1 within 1e-12 per region.
    pub fn validate(&self) -> Result<()> {
        for (region, (c, eps, mu)) in [(0, (self.c0, self.eps0, self.mu0)), (1, (self.c1, self.eps1, self.mu1))] {
            if c <= 0.0 || eps <= 0.0 || mu <= 0.0 {
                return Err(EosError::ConfigSemantic {
                    key: format!("materials (region {region})"),
                    reason: "eps, mu, c must all be strictly positive".into(),
                });
            }
            let value = c * c * eps * mu;
            if (value - 1.0).abs() > 1e-12 {
                return Err(EosError::MaterialInconsistency { region, value });
            }
        }
        Ok(())
    }

    /// Rank-one coefficient of the electric boundary identity.
    pub fn k_e(&self) -> f64 {
        0.5 * (self.eps1 / self.eps0 - 1.0)
    }

    /// Rank-one coefficient of the magnetic boundary identity.
    pub fn k_b(&self) -> f64 {
        0.5 * (1.0 - self.mu0 / self.mu1)
    }
}

/// Builds the graded rectangular grid.
///
/// `boundary_fraction` scales the face-adjacent cell width relative to the
/// nominal uniform spacing; 1.0 reproduces a uniform grid.
pub fn build_grid(extents: [[f64; 2]; 3], counts: [usize; 3], boundary_fraction: f64) -> Result<CartesianGrid> {
    if !(boundary_fraction > 0.0 && boundary_fraction <= 1.0) {
        return Err(EosError::InvalidGeometry(format!(
            "boundary_fraction must lie in (0, 1], got {boundary_fraction}"
        )));
    }
    let mut node_coords: [Vec<f64>; 3] = Default::default();
    let mut boundary_layer = [AxisSpacing { boundary: 0.0, interior: 0.0 }; 3];
    for axis in 0..3 {
        let [lo, hi] = extents[axis];
        let n = counts[axis];
        let len = hi - lo;
        if !(len > 0.0) {
            return Err(EosError::InvalidGeometry(format!(
                "extent along axis {axis} must be positive, got [{lo}, {hi}]"
            )));
        }
        if n < 4 {
            return Err(EosError::InvalidGeometry(format!(
                "counts must be at least 4 per axis, got {n} along axis {axis}"
            )));
        }
        let h_nom = len / (n - 1) as f64;
        let hb = boundary_fraction * h_nom;
        let hi_cell = (len - 2.0 * hb) / (n - 3) as f64;
        let mut coords = Vec::with_capacity(n);
        coords.push(lo);
        coords.push(lo + hb);
        for k in 2..n - 1 {
            coords.push(lo + hb + (k - 1) as f64 * hi_cell);
        }
        coords.push(hi);
        debug_assert_eq!(coords.len(), n);
        boundary_layer[axis] = AxisSpacing { boundary: hb, interior: hi_cell };
        node_coords[axis] = coords;
    }
    let grid = CartesianGrid {
        extents,
        counts,
        node_coords,
        boundary_layer,
        boundary_fraction,
    };
    debug_assert!(grid.min_spacing() > 0.0);
    Ok(grid)
}

impl CartesianGrid {
    pub fn n_nodes(&self) -> usize {
        self.counts[0] * self.counts[1] * self.counts[2]
    }

    /// Flat node index, x fastest.
    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.counts[0] * (j + self.counts[1] * k)
    }

    #[inline]
    pub fn node_pos(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(self.node_coords[0][i], self.node_coords[1][j], self.node_coords[2][k])
    }

    /// Number of cells (quadrature boxes) in the volume.
    pub fn n_cells(&self) -> usize {
        (self.counts[0] - 1) * (self.counts[1] - 1) * (self.counts[2] - 1)
    }

    #[inline]
    pub fn cell_index(&self, ci: usize, cj: usize, ck: usize) -> usize {
        ci + (self.counts[0] - 1) * (cj + (self.counts[1] - 1) * ck)
    }

    /// Width of cell `c` along `axis`.
    #[inline]
    pub fn cell_width(&self, axis: usize, c: usize) -> f64 {
        self.node_coords[axis][c + 1] - self.node_coords[axis][c]
    }

    #[inline]
    pub fn cell_center(&self, ci: usize, cj: usize, ck: usize) -> Vector3<f64> {
        Vector3::new(
            0.5 * (self.node_coords[0][ci] + self.node_coords[0][ci + 1]),
            0.5 * (self.node_coords[1][cj] + self.node_coords[1][cj + 1]),
            0.5 * (self.node_coords[2][ck] + self.node_coords[2][ck + 1]),
        )
    }

    #[inline]
    pub fn cell_volume(&self, ci: usize, cj: usize, ck: usize) -> f64 {
        self.cell_width(0, ci) * self.cell_width(1, cj) * self.cell_width(2, ck)
    }

    /// Smallest cell width over the three axes.
    pub fn min_spacing(&self) -> f64 {
        self.boundary_layer
            .iter()
            .flat_map(|s| [s.boundary, s.interior])
            .fold(f64::INFINITY, f64::min)
    }

    /// Diagonal of the box, the longest source-to-target distance.
    pub fn diameter(&self) -> f64 {
        let d: f64 = self
            .extents
            .iter()
            .map(|[lo, hi]| (hi - lo) * (hi - lo))
            .sum();
        d.sqrt()
    }

    /// True when the node lies on any box face.
    #[inline]
    pub fn is_face_node(&self, i: usize, j: usize, k: usize) -> bool {
        i == 0
            || j == 0
            || k == 0
            || i == self.counts[0] - 1
            || j == self.counts[1] - 1
            || k == self.counts[2] - 1
    }
}

/// Builds one panel per boundary cell face with outward normals.
///
/// Panels are ordered face by face (`Face::ALL` order) and row-major in the
/// face tangent axes (u fastest); the ordering is fixed so that assembly
/// loops are deterministic.
pub fn build_surface_mesh(grid: &CartesianGrid) -> SurfaceMesh {
    let mut panels = Vec::new();
    for face in Face::ALL {
        let axis = face.axis();
        let (ua, va) = face.tangent_axes();
        let plane_coord = if face.is_max() {
            *grid.node_coords[axis].last().unwrap()
        } else {
            grid.node_coords[axis][0]
        };
        let fixed_idx = if face.is_max() { grid.counts[axis] - 1 } else { 0 };
        for vc in 0..grid.counts[va] - 1 {
            for uc in 0..grid.counts[ua] - 1 {
                let du = grid.cell_width(ua, uc);
                let dv = grid.cell_width(va, vc);
                let mut centroid = Vector3::zeros();
                centroid[axis] = plane_coord;
                centroid[ua] = 0.5 * (grid.node_coords[ua][uc] + grid.node_coords[ua][uc + 1]);
                centroid[va] = 0.5 * (grid.node_coords[va][vc] + grid.node_coords[va][vc + 1]);
                let corner = |u: usize, v: usize| -> usize {
                    let mut idx = [0usize; 3];
                    idx[axis] = fixed_idx;
                    idx[ua] = u;
                    idx[va] = v;
                    grid.node_index(idx[0], idx[1], idx[2])
                };
                let node_indices = if face.is_max() {
                    [corner(uc, vc), corner(uc + 1, vc), corner(uc + 1, vc + 1), corner(uc, vc + 1)]
                } else {
                    [corner(uc, vc), corner(uc, vc + 1), corner(uc + 1, vc + 1), corner(uc + 1, vc)]
                };
                panels.push(Panel {
                    centroid,
                    normal: face.normal(),
                    area: du * dv,
                    face_id: face,
                    node_indices,
                    half_u: 0.5 * du,
                    half_v: 0.5 * dv,
                });
            }
        }
    }
    let total_area = panels.iter().map(|p| p.area).sum();
    SurfaceMesh { panels, total_area }
}

/// Inverse of `I + k n n^T` for unit `n`: `I - k/(1+k) n n^T`.
pub fn invert_normal_rank_one(n: &Vector3<f64>, k: f64) -> Result<Matrix3<f64>> {
    if (1.0 + k).abs() < 1e-14 {
        return Err(EosError::SingularOperator);
    }
    debug_assert!((n.norm() - 1.0).abs() < 1e-12);
    let coeff = -k / (1.0 + k);
    Ok(Matrix3::identity() + coeff * n * n.transpose())
}

/// Fields stored per time level in the history ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryField {
    TraceE,
    TraceB,
    TraceEDot,
    TraceBDot,
    CellJ,
    CellJDot,
    CellRho,
    CellRhoDot,
}

/// A sampled history value: vector fields and scalar fields share one API.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampled {
    Vector(Vector3<f64>),
    Scalar(f64),
}

#[derive(Debug, Clone)]
struct Level {
    time: f64,
    trace_e: Vec<Vector3<f64>>,
    trace_b: Vec<Vector3<f64>>,
    trace_e_dot: Vec<Vector3<f64>>,
    trace_b_dot: Vec<Vector3<f64>>,
    cell_j: Vec<Vector3<f64>>,
    cell_j_dot: Vec<Vector3<f64>>,
    cell_rho: Vec<f64>,
    cell_rho_dot: Vec<f64>,
    traces_filled: bool,
}

impl Level {
    fn empty(n_panels: usize, n_cells: usize) -> Self {
        Level {
            time: f64::NAN,
            trace_e: vec![Vector3::zeros(); n_panels],
            trace_b: vec![Vector3::zeros(); n_panels],
            trace_e_dot: vec![Vector3::zeros(); n_panels],
            trace_b_dot: vec![Vector3::zeros(); n_panels],
            cell_j: vec![Vector3::zeros(); n_cells],
            cell_j_dot: vec![Vector3::zeros(); n_cells],
            cell_rho: vec![0.0; n_cells],
            cell_rho_dot: vec![0.0; n_cells],
            traces_filled: false,
        }
    }
}

/// Boundary-trace values and their time derivatives at one panel and time.
#[derive(Debug, Clone, Copy)]
pub struct TraceSample {
    pub e: Vector3<f64>,
    pub b: Vector3<f64>,
    pub e_dot: Vector3<f64>,
    pub b_dot: Vector3<f64>,
}

/// Cell-centered current/charge values and time derivatives at one time.
#[derive(Debug, Clone, Copy)]
pub struct VolumeSample {
    pub j: Vector3<f64>,
    pub j_dot: Vector3<f64>,
    pub rho: f64,
    pub rho_dot: f64,
}

/// Volume snapshot pushed once per step (values at cell centers).
pub struct VolumeLevel<'a> {
    pub cell_j: &'a [Vector3<f64>],
    pub cell_j_dot: &'a [Vector3<f64>],
    pub cell_rho: &'a [f64],
    pub cell_rho_dot: &'a [f64],
}

/// Trace snapshot filled at the head level after the boundary update.
pub struct TraceLevel<'a> {
    pub trace_e: &'a [Vector3<f64>],
    pub trace_b: &'a [Vector3<f64>],
    pub trace_e_dot: &'a [Vector3<f64>],
    pub trace_b_dot: &'a [Vector3<f64>],
}

/// Fixed-depth ring of time levels supporting retarded sampling.
///
/// Volume fields (J, rho and their time derivatives at cell centers) and
/// boundary traces are stored per level. The volume part of a level is
/// pushed as soon as the interior step completes; the trace part is filled
/// after the boundary update of the same step, so the trace watermark can
/// trail the volume watermark by one level. Trace queries past the trace
/// watermark (up to one dt) use linear extrapolation from the two newest
/// filled levels, which is the explicit marching closure for self-panel
/// retardation.
#[derive(Debug, Clone)]
pub struct HistoryRing {
    depth: usize,
    dt: f64,
    n_panels: usize,
    n_cells: usize,
    slots: Vec<Level>,
    head_slot: usize,
    count: usize,
}

/// Smallest depth satisfying `depth * dt * c_min >= diameter + 2 c_min dt`
/// plus one interpolation level of margin.
pub fn required_depth(diameter: f64, c_min: f64, dt: f64) -> usize {
    ((diameter / (c_min * dt)).ceil() as usize) + 3
}

impl HistoryRing {
    pub fn new(depth: usize, dt: f64, n_panels: usize, n_cells: usize) -> Self {
        assert!(depth >= 3, "history depth must be at least 3");
        assert!(dt > 0.0);
        HistoryRing {
            depth,
            dt,
            n_panels,
            n_cells,
            slots: (0..depth).map(|_| Level::empty(n_panels, n_cells)).collect(),
            head_slot: depth - 1,
            count: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Time of the newest volume level.
    pub fn head_time(&self) -> f64 {
        assert!(self.count > 0, "history is empty");
        self.slots[self.head_slot].time
    }

    /// Time of the oldest retained level.
    pub fn oldest_time(&self) -> f64 {
        self.head_time() - (self.count - 1) as f64 * self.dt
    }

    /// Time of the newest level whose traces are filled.
    pub fn trace_time(&self) -> f64 {
        let head = &self.slots[self.head_slot];
        if head.traces_filled {
            head.time
        } else {
            assert!(self.count > 1, "no filled trace level yet");
            head.time - self.dt
        }
    }

    #[inline]
    fn level_back(&self, steps: usize) -> &Level {
        debug_assert!(steps < self.count);
        &self.slots[(self.head_slot + self.depth - steps) % self.depth]
    }

    /// Starts a new level at `time` with the volume snapshot; traces of the
    /// new level are marked unfilled.
    pub fn push_volume(&mut self, time: f64, vol: VolumeLevel) {
        assert_eq!(vol.cell_j.len(), self.n_cells);
        assert_eq!(vol.cell_j_dot.len(), self.n_cells);
        assert_eq!(vol.cell_rho.len(), self.n_cells);
        assert_eq!(vol.cell_rho_dot.len(), self.n_cells);
        if self.count > 0 {
            let expected = self.head_time() + self.dt;
            assert!(
                (time - expected).abs() <= 1e-9 * self.dt.max(1.0),
                "levels must be pushed on the uniform dt ladder"
            );
            assert!(
                self.slots[self.head_slot].traces_filled,
                "previous level traces must be filled before pushing a new level"
            );
        }
        self.head_slot = (self.head_slot + 1) % self.depth;
        self.count = (self.count + 1).min(self.depth);
        let lvl = &mut self.slots[self.head_slot];
        lvl.time = time;
        lvl.cell_j.copy_from_slice(vol.cell_j);
        lvl.cell_j_dot.copy_from_slice(vol.cell_j_dot);
        lvl.cell_rho.copy_from_slice(vol.cell_rho);
        lvl.cell_rho_dot.copy_from_slice(vol.cell_rho_dot);
        lvl.traces_filled = false;
    }

    /// Fills the trace arrays of the head level.
    pub fn fill_traces(&mut self, tr: TraceLevel) {
        assert!(self.count > 0, "push_volume must precede fill_traces");
        assert_eq!(tr.trace_e.len(), self.n_panels);
        assert_eq!(tr.trace_b.len(), self.n_panels);
        assert_eq!(tr.trace_e_dot.len(), self.n_panels);
        assert_eq!(tr.trace_b_dot.len(), self.n_panels);
        let lvl = &mut self.slots[self.head_slot];
        lvl.trace_e.copy_from_slice(tr.trace_e);
        lvl.trace_b.copy_from_slice(tr.trace_b);
        lvl.trace_e_dot.copy_from_slice(tr.trace_e_dot);
        lvl.trace_b_dot.copy_from_slice(tr.trace_b_dot);
        lvl.traces_filled = true;
    }

    /// Pushes a complete level (volume and traces), used during warm-up.
    pub fn push_complete(&mut self, time: f64, vol: VolumeLevel, tr: TraceLevel) {
        self.push_volume(time, vol);
        self.fill_traces(tr);
    }

    /// Locates the interpolation bracket for time `t`: returns (steps back
    /// from the head to the newer bracket level, weight toward that newer
    /// level). The caller guarantees `t` is at or below the relevant
    /// watermark; roundoff slightly outside the ladder is clamped.
    #[inline]
    fn bracket(&self, t: f64) -> Result<(usize, f64)> {
        let head = self.head_time();
        let oldest = self.oldest_time();
        if t < oldest - 1e-9 * self.dt {
            return Err(EosError::HistoryUnderrun { requested: t, oldest });
        }
        if self.count < 2 {
            if t == head {
                return Ok((0, 1.0));
            }
            return Err(EosError::HistoryUnderrun { requested: t, oldest });
        }
        let back = (head - t) / self.dt;
        let k = (back.floor().max(0.0) as usize).min(self.count - 2);
        let newer = self.level_back(k);
        let older_time = newer.time - self.dt;
        let w = (t - older_time) / self.dt;
        Ok((k, w))
    }

    #[inline]
    fn lerp_vec(&self, t: f64, idx: usize, get: impl Fn(&Level) -> &[Vector3<f64>]) -> Result<Vector3<f64>> {
        let (k, w) = self.bracket(t)?;
        let newer = self.level_back(k);
        // Bit-exact return at stored levels.
        if t == newer.time {
            return Ok(get(newer)[idx]);
        }
        let older = self.level_back(k + 1);
        if t == older.time {
            return Ok(get(older)[idx]);
        }
        Ok(get(older)[idx] * (1.0 - w) + get(newer)[idx] * w)
    }

    #[inline]
    fn lerp_scalar(&self, t: f64, idx: usize, get: impl Fn(&Level) -> &[f64]) -> Result<f64> {
        let (k, w) = self.bracket(t)?;
        let newer = self.level_back(k);
        if t == newer.time {
            return Ok(get(newer)[idx]);
        }
        let older = self.level_back(k + 1);
        if t == older.time {
            return Ok(get(older)[idx]);
        }
        Ok(get(older)[idx] * (1.0 - w) + get(newer)[idx] * w)
    }

    /// Volume samples may run at most one dt past the head (linear
    /// extrapolation through the bracket clamp); the time loop only needs
    /// this sliver when tau exceeds one half, where the nearest retarded
    /// cell time passes the previous level before the new one is recorded.
    #[inline]
    fn volume_guard(&self, t: f64) -> Result<()> {
        let newest = self.head_time();
        if t > newest + self.dt * (1.0 + 1e-9) {
            return Err(EosError::Causality { requested: t, latest: newest + self.dt });
        }
        Ok(())
    }

    #[inline]
    pub fn sample_cell_j(&self, cell: usize, t: f64) -> Result<Vector3<f64>> {
        self.volume_guard(t)?;
        self.lerp_vec(t, cell, |l| &l.cell_j)
    }

    #[inline]
    pub fn sample_cell_j_dot(&self, cell: usize, t: f64) -> Result<Vector3<f64>> {
        self.volume_guard(t)?;
        self.lerp_vec(t, cell, |l| &l.cell_j_dot)
    }

    #[inline]
    pub fn sample_cell_rho(&self, cell: usize, t: f64) -> Result<f64> {
        self.volume_guard(t)?;
        self.lerp_scalar(t, cell, |l| &l.cell_rho)
    }

    #[inline]
    pub fn sample_cell_rho_dot(&self, cell: usize, t: f64) -> Result<f64> {
        self.volume_guard(t)?;
        self.lerp_scalar(t, cell, |l| &l.cell_rho_dot)
    }

    /// Trace samples: values past the trace watermark (up to one dt) are
    /// linearly extrapolated from the two newest filled levels.
    #[inline]
    fn trace_lerp(&self, panel: usize, t: f64, get: impl Fn(&Level) -> &[Vector3<f64>] + Copy) -> Result<Vector3<f64>> {
        let newest = self.trace_time();
        if t > newest + 1e-12 * self.dt.max(1.0) {
            if t > newest + self.dt * (1.0 + 1e-9) {
                return Err(EosError::Causality { requested: t, latest: newest + self.dt });
            }
            if self.count < 2 {
                return Err(EosError::MissingBoundaryTrace(t));
            }
            let skip = if self.slots[self.head_slot].traces_filled { 0 } else { 1 };
            let l1 = self.level_back(skip);
            let l0 = self.level_back(skip + 1);
            let w = (t - l0.time) / self.dt;
            return Ok(get(l0)[panel] * (1.0 - w) + get(l1)[panel] * w);
        }
        self.lerp_vec(t, panel, get)
    }

    /// All four volume fields of one cell at time `t` with a single bracket
    /// search; the assembly hot loop calls this once per (target, cell).
    #[inline]
    pub fn sample_volume(&self, cell: usize, t: f64) -> Result<VolumeSample> {
        self.volume_guard(t)?;
        let (k, w) = self.bracket(t)?;
        let newer = self.level_back(k);
        if t == newer.time {
            return Ok(VolumeSample {
                j: newer.cell_j[cell],
                j_dot: newer.cell_j_dot[cell],
                rho: newer.cell_rho[cell],
                rho_dot: newer.cell_rho_dot[cell],
            });
        }
        let older = self.level_back(k + 1);
        if t == older.time {
            return Ok(VolumeSample {
                j: older.cell_j[cell],
                j_dot: older.cell_j_dot[cell],
                rho: older.cell_rho[cell],
                rho_dot: older.cell_rho_dot[cell],
            });
        }
        let a = 1.0 - w;
        Ok(VolumeSample {
            j: older.cell_j[cell] * a + newer.cell_j[cell] * w,
            j_dot: older.cell_j_dot[cell] * a + newer.cell_j_dot[cell] * w,
            rho: older.cell_rho[cell] * a + newer.cell_rho[cell] * w,
            rho_dot: older.cell_rho_dot[cell] * a + newer.cell_rho_dot[cell] * w,
        })
    }

    /// All four trace fields of one panel at time `t` with a single bracket
    /// search, extrapolating the final dt past the trace watermark exactly
    /// like the per-field samplers.
    #[inline]
    pub fn sample_traces(&self, panel: usize, t: f64) -> Result<TraceSample> {
        let newest = self.trace_time();
        if t > newest + 1e-12 * self.dt.max(1.0) {
            if t > newest + self.dt * (1.0 + 1e-9) {
                return Err(EosError::Causality { requested: t, latest: newest + self.dt });
            }
            if self.count < 2 {
                return Err(EosError::MissingBoundaryTrace(t));
            }
            let skip = if self.slots[self.head_slot].traces_filled { 0 } else { 1 };
            let l1 = self.level_back(skip);
            let l0 = self.level_back(skip + 1);
            let w = (t - l0.time) / self.dt;
            let a = 1.0 - w;
            return Ok(TraceSample {
                e: l0.trace_e[panel] * a + l1.trace_e[panel] * w,
                b: l0.trace_b[panel] * a + l1.trace_b[panel] * w,
                e_dot: l0.trace_e_dot[panel] * a + l1.trace_e_dot[panel] * w,
                b_dot: l0.trace_b_dot[panel] * a + l1.trace_b_dot[panel] * w,
            });
        }
        let (k, w) = self.bracket(t)?;
        let newer = self.level_back(k);
        if t == newer.time {
            return Ok(TraceSample {
                e: newer.trace_e[panel],
                b: newer.trace_b[panel],
                e_dot: newer.trace_e_dot[panel],
                b_dot: newer.trace_b_dot[panel],
            });
        }
        let older = self.level_back(k + 1);
        if t == older.time {
            return Ok(TraceSample {
                e: older.trace_e[panel],
                b: older.trace_b[panel],
                e_dot: older.trace_e_dot[panel],
                b_dot: older.trace_b_dot[panel],
            });
        }
        let a = 1.0 - w;
        Ok(TraceSample {
            e: older.trace_e[panel] * a + newer.trace_e[panel] * w,
            b: older.trace_b[panel] * a + newer.trace_b[panel] * w,
            e_dot: older.trace_e_dot[panel] * a + newer.trace_e_dot[panel] * w,
            b_dot: older.trace_b_dot[panel] * a + newer.trace_b_dot[panel] * w,
        })
    }

    #[inline]
    pub fn sample_trace_e(&self, panel: usize, t: f64) -> Result<Vector3<f64>> {
        self.trace_lerp(panel, t, |l| &l.trace_e)
    }

    #[inline]
    pub fn sample_trace_b(&self, panel: usize, t: f64) -> Result<Vector3<f64>> {
        self.trace_lerp(panel, t, |l| &l.trace_b)
    }

    #[inline]
    pub fn sample_trace_e_dot(&self, panel: usize, t: f64) -> Result<Vector3<f64>> {
        self.trace_lerp(panel, t, |l| &l.trace_e_dot)
    }

    #[inline]
    pub fn sample_trace_b_dot(&self, panel: usize, t: f64) -> Result<Vector3<f64>> {
        self.trace_lerp(panel, t, |l| &l.trace_b_dot)
    }
}

/// Tagged retarded sampling over any stored field.
///
/// `location_index` is a panel index for trace fields and a cell index for
/// volume fields. Exact at stored levels, linear in time between them.
pub fn sample_retarded(history: &HistoryRing, field_tag: HistoryField, location_index: usize, t: f64) -> Result<Sampled> {
    use HistoryField::*;
    Ok(match field_tag {
        TraceE => Sampled::Vector(history.sample_trace_e(location_index, t)?),
        TraceB => Sampled::Vector(history.sample_trace_b(location_index, t)?),
        TraceEDot => Sampled::Vector(history.sample_trace_e_dot(location_index, t)?),
        TraceBDot => Sampled::Vector(history.sample_trace_b_dot(location_index, t)?),
        CellJ => Sampled::Vector(history.sample_cell_j(location_index, t)?),
        CellJDot => Sampled::Vector(history.sample_cell_j_dot(location_index, t)?),
        CellRho => Sampled::Scalar(history.sample_cell_rho(location_index, t)?),
        CellRhoDot => Sampled::Scalar(history.sample_cell_rho_dot(location_index, t)?),
    })
}
