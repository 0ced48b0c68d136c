//! Interior time stepping: Lax-Wendroff on the first-order Maxwell system
//! and a modified Euler (Heun) substep for the current equation of motion.

use crate::core_state::{CartesianGrid, FieldState, MaterialParams};
use nalgebra::Vector3;
use rayon::prelude::*;

/// One 3-point differentiation rule: flat-index offsets along the axis and
/// the matching coefficients.
#[derive(Debug, Clone, Copy)]
pub struct Rule3 {
    pub offsets: [isize; 3],
    pub coeffs: [f64; 3],
}

/// Per-node difference rules along each axis.
///
/// Interior nodes carry central rules (non-uniform next to the graded
/// layer); face nodes carry second-order one-sided rules. Every rule is a
/// 3-point Lagrange differentiation, exact on quadratics by construction.
#[derive(Debug, Clone)]
pub struct StencilSet {
    /// First-derivative rules, `d1[axis][node_index_along_axis]`.
    pub d1: [Vec<Rule3>; 3],
    /// Second-derivative rules, same layout.
    pub d2: [Vec<Rule3>; 3],
    strides: [isize; 3],
    counts: [usize; 3],
}

/// Derivative of the Lagrange polynomial through (x0,f0),(x1,f1),(x2,f2)
/// evaluated at xe, as coefficients on (f0,f1,f2).
fn lagrange_d1(x: [f64; 3], xe: f64) -> [f64; 3] {
    let [x0, x1, x2] = x;
    [
        (2.0 * xe - x1 - x2) / ((x0 - x1) * (x0 - x2)),
        (2.0 * xe - x0 - x2) / ((x1 - x0) * (x1 - x2)),
        (2.0 * xe - x0 - x1) / ((x2 - x0) * (x2 - x1)),
    ]
}

/// Second derivative of the same interpolant (constant in xe).
fn lagrange_d2(x: [f64; 3]) -> [f64; 3] {
    let [x0, x1, x2] = x;
    [
        2.0 / ((x0 - x1) * (x0 - x2)),
        2.0 / ((x1 - x0) * (x1 - x2)),
        2.0 / ((x2 - x0) * (x2 - x1)),
    ]
}

/// Builds the per-node difference rules for the grid.
pub fn build_stencils(grid: &CartesianGrid) -> StencilSet {
    let mut d1: [Vec<Rule3>; 3] = Default::default();
    let mut d2: [Vec<Rule3>; 3] = Default::default();
    for axis in 0..3 {
        let xs = &grid.node_coords[axis];
        let n = xs.len();
        let mut r1 = Vec::with_capacity(n);
        let mut r2 = Vec::with_capacity(n);
        for i in 0..n {
            let (base, offsets) = if i == 0 {
                (0usize, [0isize, 1, 2])
            } else if i == n - 1 {
                (n - 3, [-2isize, -1, 0])
            } else {
                (i - 1, [-1isize, 0, 1])
            };
            let pts = [xs[base], xs[base + 1], xs[base + 2]];
            r1.push(Rule3 { offsets, coeffs: lagrange_d1(pts, xs[i]) });
            r2.push(Rule3 { offsets, coeffs: lagrange_d2(pts) });
        }
        d1[axis] = r1;
        d2[axis] = r2;
    }
    StencilSet {
        d1,
        d2,
        strides: [
            1,
            grid.counts[0] as isize,
            (grid.counts[0] * grid.counts[1]) as isize,
        ],
        counts: grid.counts,
    }
}

impl StencilSet {
    #[inline]
    fn idx3(&self, flat: usize) -> [usize; 3] {
        let nx = self.counts[0];
        let ny = self.counts[1];
        [flat % nx, (flat / nx) % ny, flat / (nx * ny)]
    }

    /// d/dx_axis of a scalar field at the flat node index.
    #[inline]
    pub fn d1_scalar(&self, f: &[f64], flat: usize, axis: usize) -> f64 {
        let i = self.idx3(flat)[axis];
        let rule = &self.d1[axis][i];
        let s = self.strides[axis];
        let mut acc = 0.0;
        for m in 0..3 {
            acc += rule.coeffs[m] * f[(flat as isize + rule.offsets[m] * s) as usize];
        }
        acc
    }

    /// d/dx_axis of a vector field at the flat node index.
    #[inline]
    pub fn d1_vector(&self, f: &[Vector3<f64>], flat: usize, axis: usize) -> Vector3<f64> {
        let i = self.idx3(flat)[axis];
        let rule = &self.d1[axis][i];
        let s = self.strides[axis];
        let mut acc = Vector3::zeros();
        for m in 0..3 {
            acc += rule.coeffs[m] * f[(flat as isize + rule.offsets[m] * s) as usize];
        }
        acc
    }

    /// Discrete curl at the flat node index.
    #[inline]
    pub fn curl(&self, f: &[Vector3<f64>], flat: usize) -> Vector3<f64> {
        let dx = self.d1_vector(f, flat, 0);
        let dy = self.d1_vector(f, flat, 1);
        let dz = self.d1_vector(f, flat, 2);
        Vector3::new(dy.z - dz.y, dz.x - dx.z, dx.y - dy.x)
    }

    /// Discrete divergence at the flat node index.
    #[inline]
    pub fn div(&self, f: &[Vector3<f64>], flat: usize) -> f64 {
        self.d1_vector(f, flat, 0).x + self.d1_vector(f, flat, 1).y + self.d1_vector(f, flat, 2).z
    }

    /// Discrete gradient of a scalar field at the flat node index.
    #[inline]
    pub fn grad(&self, f: &[f64], flat: usize) -> Vector3<f64> {
        Vector3::new(
            self.d1_scalar(f, flat, 0),
            self.d1_scalar(f, flat, 1),
            self.d1_scalar(f, flat, 2),
        )
    }
}

/// Current-model right-hand side `(alpha - beta rho) E - gamma J + phi`.
#[inline]
pub fn current_rhs(j: Vector3<f64>, rho: f64, e: Vector3<f64>, m: &MaterialParams, phi: Vector3<f64>) -> Vector3<f64> {
    (m.alpha - m.beta * rho) * e - m.gamma * j + phi
}

/// Lax-Wendroff update of E, B (interior nodes) and rho (all nodes).
///
/// The update is the second-order Taylor step F += dt dF + dt^2/2 ddF with
/// dE = c1^2 (curl B - mu1 J), dB = -curl E, drho = -div J and the current
/// model substituted for dJ inside the second-order terms. `phi_nodes` is
/// the current-model source at the current time (empty slice when the model
/// carries no source). Face values of E and B are Dirichlet data owned by
/// the boundary update and are returned unchanged.
pub fn lw_step_fields(
    state: &FieldState,
    grid: &CartesianGrid,
    materials: &MaterialParams,
    dt: f64,
    stencils: &StencilSet,
    phi_nodes: &[Vector3<f64>],
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vec<f64>) {
    let n = grid.n_nodes();
    assert_eq!(state.e.len(), n);
    assert!(phi_nodes.is_empty() || phi_nodes.len() == n);
    let c2 = materials.c1 * materials.c1;
    let mu1 = materials.mu1;
    let phi_at = |flat: usize| -> Vector3<f64> {
        if phi_nodes.is_empty() { Vector3::zeros() } else { phi_nodes[flat] }
    };

    // First time derivatives at every node (one-sided rules at faces).
    let mut dt_e = vec![Vector3::zeros(); n];
    let mut dt_b = vec![Vector3::zeros(); n];
    let mut dt_j = vec![Vector3::zeros(); n];
    let mut dt_rho = vec![0.0; n];
    dt_e.par_iter_mut()
        .zip(dt_b.par_iter_mut())
        .zip(dt_j.par_iter_mut())
        .zip(dt_rho.par_iter_mut())
        .enumerate()
        .for_each(|(flat, (((de, db), dj), drho))| {
            *de = c2 * (stencils.curl(&state.b, flat) - mu1 * state.j[flat]);
            *db = -stencils.curl(&state.e, flat);
            *dj = current_rhs(state.j[flat], state.rho[flat], state.e[flat], materials, phi_at(flat));
            *drho = -stencils.div(&state.j, flat);
        });

    // Taylor update; second derivatives compose the same first-order rules.
    let half = 0.5 * dt * dt;
    let nx = grid.counts[0];
    let ny = grid.counts[1];
    let new: Vec<(Vector3<f64>, Vector3<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|flat| {
            let i = flat % nx;
            let j = (flat / nx) % ny;
            let k = flat / (nx * ny);
            let ddt_rho = -stencils.div(&dt_j, flat);
            let new_rho = state.rho[flat] + dt * dt_rho[flat] + half * ddt_rho;
            if grid.is_face_node(i, j, k) {
                (state.e[flat], state.b[flat], new_rho)
            } else {
                let ddt_e = c2 * (stencils.curl(&dt_b, flat) - mu1 * dt_j[flat]);
                let ddt_b = -stencils.curl(&dt_e, flat);
                (
                    state.e[flat] + dt * dt_e[flat] + half * ddt_e,
                    state.b[flat] + dt * dt_b[flat] + half * ddt_b,
                    new_rho,
                )
            }
        })
        .collect();

    let mut e = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut rho = Vec::with_capacity(n);
    for (ev, bv, rv) in new {
        e.push(ev);
        b.push(bv);
        rho.push(rv);
    }
    (e, b, rho)
}

/// Heun (modified Euler) update of J with E and rho frozen over the substep.
///
/// `phi_t` and `phi_tp` are the current-model source at the step start and
/// end; empty slices mean no source.
pub fn euler_step_current(
    j: &[Vector3<f64>],
    rho: &[f64],
    e: &[Vector3<f64>],
    materials: &MaterialParams,
    dt: f64,
    phi_t: &[Vector3<f64>],
    phi_tp: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    let n = j.len();
    assert_eq!(rho.len(), n);
    assert_eq!(e.len(), n);
    assert!(phi_t.is_empty() || phi_t.len() == n);
    assert!(phi_tp.is_empty() || phi_tp.len() == n);
    (0..n)
        .into_par_iter()
        .map(|flat| {
            let p0 = if phi_t.is_empty() { Vector3::zeros() } else { phi_t[flat] };
            let p1 = if phi_tp.is_empty() { Vector3::zeros() } else { phi_tp[flat] };
            let f0 = current_rhs(j[flat], rho[flat], e[flat], materials, p0);
            let jstar = j[flat] + dt * f0;
            let f1 = current_rhs(jstar, rho[flat], e[flat], materials, p1);
            j[flat] + 0.5 * dt * (f0 + f1)
        })
        .collect()
}

/// One interior step: Lax-Wendroff on (E, B, rho) then Heun on J.
///
/// Returns the state at `t + dt` with face values of E and B carried over
/// unchanged; the caller replaces them from the boundary update and then
/// records the completed level into the history ring.
pub fn step_interior(
    state: &FieldState,
    grid: &CartesianGrid,
    materials: &MaterialParams,
    dt: f64,
    stencils: &StencilSet,
    phi_fn: Option<&(dyn Fn(Vector3<f64>, f64) -> Vector3<f64> + Sync)>,
) -> FieldState {
    let n = grid.n_nodes();
    let eval_phi = |t: f64| -> Vec<Vector3<f64>> {
        match phi_fn {
            None => Vec::new(),
            Some(f) => (0..n)
                .into_par_iter()
                .map(|flat| {
                    let nx = grid.counts[0];
                    let ny = grid.counts[1];
                    let pos = grid.node_pos(flat % nx, (flat / nx) % ny, flat / (nx * ny));
                    f(pos, t)
                })
                .collect(),
        }
    };
    let phi_t = eval_phi(state.time);
    let phi_tp = eval_phi(state.time + dt);
    let (e, b, rho) = lw_step_fields(state, grid, materials, dt, stencils, &phi_t);
    let j = euler_step_current(&state.j, &state.rho, &state.e, materials, dt, &phi_t, &phi_tp);
    FieldState {
        e,
        b,
        j,
        rho,
        trace_e_plus: state.trace_e_plus.clone(),
        trace_b_plus: state.trace_b_plus.clone(),
        time: state.time + dt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_state::{build_grid, build_surface_mesh};
    use approx::assert_abs_diff_eq;

    fn test_materials() -> MaterialParams {
        MaterialParams {
            eps0: 1.0,
            mu0: 1.0,
            c0: 1.0,
            eps1: 1.5,
            mu1: 1.0,
            c1: 1.0 / 1.5f64.sqrt(),
            alpha: 1.0,
            beta: 0.01,
            gamma: 0.01,
        }
    }

    #[test]
    fn stencils_exact_on_linear_everywhere() {
        let grid = build_grid([[0.0, 1.0], [0.0, 2.0], [0.0, 1.5]], [6, 5, 7], 0.5).unwrap();
        let st = build_stencils(&grid);
        let n = grid.n_nodes();
        let mut f = vec![0.0; n];
        for k in 0..grid.counts[2] {
            for j in 0..grid.counts[1] {
                for i in 0..grid.counts[0] {
                    let p = grid.node_pos(i, j, k);
                    f[grid.node_index(i, j, k)] = 2.0 * p.x - 3.0 * p.y + 0.5 * p.z + 1.0;
                }
            }
        }
        for flat in 0..n {
            assert_abs_diff_eq!(st.d1_scalar(&f, flat, 0), 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(st.d1_scalar(&f, flat, 1), -3.0, epsilon = 1e-12);
            assert_abs_diff_eq!(st.d1_scalar(&f, flat, 2), 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn stencils_exact_on_quadratic() {
        // 3-point Lagrange rules are exact on quadratics for any spacing,
        // one-sided and graded nodes included.
        let grid = build_grid([[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]], [7, 7, 7], 0.6).unwrap();
        let st = build_stencils(&grid);
        let n = grid.n_nodes();
        let mut f = vec![0.0; n];
        for k in 0..7 {
            for j in 0..7 {
                for i in 0..7 {
                    let p = grid.node_pos(i, j, k);
                    f[grid.node_index(i, j, k)] = p.x * p.x - 2.0 * p.y * p.y + 0.5 * p.z * p.z + p.x;
                }
            }
        }
        for k in 0..7 {
            for j in 0..7 {
                for i in 0..7 {
                    let flat = grid.node_index(i, j, k);
                    let p = grid.node_pos(i, j, k);
                    assert_abs_diff_eq!(st.d1_scalar(&f, flat, 0), 2.0 * p.x + 1.0, epsilon = 1e-10);
                    assert_abs_diff_eq!(st.d1_scalar(&f, flat, 1), -4.0 * p.y, epsilon = 1e-10);
                    assert_abs_diff_eq!(st.d2[0][i].coeffs.iter().zip(st.d2[0][i].offsets).map(|(c, o)| c * f[(flat as isize + o) as usize]).sum::<f64>(), 2.0, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn discrete_div_of_curl_vanishes() {
        // The composed first-derivative rules commute across axes, so the
        // discrete div(curl F) is exactly zero at every node.
        let grid = build_grid([[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]], [8, 6, 7], 0.7).unwrap();
        let st = build_stencils(&grid);
        let n = grid.n_nodes();
        let mut f = vec![Vector3::zeros(); n];
        for k in 0..grid.counts[2] {
            for j in 0..grid.counts[1] {
                for i in 0..grid.counts[0] {
                    let p = grid.node_pos(i, j, k);
                    f[grid.node_index(i, j, k)] = Vector3::new(
                        (3.1 * p.x + 1.7 * p.y * p.z).sin(),
                        (2.3 * p.y - 0.9 * p.x * p.x).cos(),
                        (1.3 * p.z + 2.2 * p.x * p.y).sin(),
                    );
                }
            }
        }
        let curl: Vec<Vector3<f64>> = (0..n).map(|flat| st.curl(&f, flat)).collect();
        for flat in 0..n {
            assert_abs_diff_eq!(st.div(&curl, flat), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn lw_zero_state_stays_zero() {
        let grid = build_grid([[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]], [6, 6, 6], 0.75).unwrap();
        let mesh = build_surface_mesh(&grid);
        let st = build_stencils(&grid);
        let m = test_materials();
        let mut state = FieldState::zeros(&grid, &mesh, 0.0);
        for _ in 0..100 {
            state = step_interior(&state, &grid, &m, 0.01, &st, None);
        }
        assert_eq!(state.max_abs(), 0.0);
    }

    #[test]
    fn lw_constant_field_is_stationary_one_step() {
        let grid = build_grid([[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]], [6, 6, 6], 0.75).unwrap();
        let mesh = build_surface_mesh(&grid);
        let st = build_stencils(&grid);
        let mut m = test_materials();
        m.alpha = 0.0; // keep J decoupled so E stays constant
        let mut state = FieldState::zeros(&grid, &mesh, 0.0);
        let e0 = Vector3::new(0.7, -0.2, 1.3);
        state.e.iter_mut().for_each(|v| *v = e0);
        let (e, b, rho) = lw_step_fields(&state, &grid, &m, 0.02, &st, &[]);
        for v in &e {
            assert!((v - e0).norm() < 1e-13);
        }
        for v in &b {
            assert!(v.norm() < 1e-13);
        }
        for r in &rho {
            assert!(r.abs() < 1e-13);
        }
    }

    #[test]
    fn heun_constant_rhs() {
        // alpha=1, beta=0, gamma=0, E=(1,0,0): f is J-independent, J=dt*E.
        let mut m = test_materials();
        m.alpha = 1.0;
        m.beta = 0.0;
        m.gamma = 0.0;
        let j = vec![Vector3::zeros()];
        let rho = vec![0.0];
        let e = vec![Vector3::new(1.0, 0.0, 0.0)];
        let out = euler_step_current(&j, &rho, &e, &m, 0.1, &[], &[]);
        assert_abs_diff_eq!(out[0].x, 0.1, epsilon = 1e-16);
        assert_eq!(out[0].y, 0.0);
    }

    #[test]
    fn heun_linear_decay_amplification() {
        // gamma=2, dt=0.1: Heun factor 1 - g dt + (g dt)^2 / 2 = 0.82.
        let mut m = test_materials();
        m.alpha = 0.0;
        m.beta = 0.0;
        m.gamma = 2.0;
        let j = vec![Vector3::new(1.0, 0.0, 0.0)];
        let rho = vec![0.0];
        let e = vec![Vector3::zeros()];
        let out = euler_step_current(&j, &rho, &e, &m, 0.1, &[], &[]);
        assert_abs_diff_eq!(out[0].x, 0.82, epsilon = 1e-15);
    }

    #[test]
    fn heun_coefficient_cancellation() {
        // beta rho = alpha nullifies the E drive.
        let mut m = test_materials();
        m.alpha = 1.0;
        m.beta = 0.01;
        m.gamma = 0.0;
        let j = vec![Vector3::zeros()];
        let rho = vec![100.0];
        let e = vec![Vector3::new(5.0, 5.0, 5.0)];
        let out = euler_step_current(&j, &rho, &e, &m, 0.1, &[], &[]);
        assert_eq!(out[0], Vector3::zeros());
    }

    /// Exact plane-wave evolution oracle: one LW step at interior nodes far
    /// from the faces matches the constant-coefficient solution to
    /// O(dt^3 + h^2 dt).
    #[test]
    fn lw_plane_wave_oracle() {
        let mut m = test_materials();
        m.alpha = 0.0;
        m.beta = 0.0;
        m.gamma = 0.0;
        let kvec = Vector3::new(2.0 * std::f64::consts::PI, std::f64::consts::PI, 0.5 * std::f64::consts::PI);
        let p = {
            // polarization orthogonal to k
            let trial = Vector3::new(0.3, -0.4, 1.0);
            (trial - kvec * (trial.dot(&kvec) / kvec.norm_squared())).normalize()
        };
        let omega = m.c1 * kvec.norm();
        let bamp = kvec.cross(&p) / omega;
        let fill = |grid: &CartesianGrid, t: f64| -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
            let n = grid.n_nodes();
            let mut e = vec![Vector3::zeros(); n];
            let mut b = vec![Vector3::zeros(); n];
            for k in 0..grid.counts[2] {
                for j in 0..grid.counts[1] {
                    for i in 0..grid.counts[0] {
                        let x = grid.node_pos(i, j, k);
                        let phase = kvec.dot(&x) - omega * t;
                        e[grid.node_index(i, j, k)] = p * phase.cos();
                        b[grid.node_index(i, j, k)] = bamp * phase.cos();
                    }
                }
            }
            (e, b)
        };
        let dt = 1e-3;
        let mut errs = Vec::new();
        for counts in [9usize, 17] {
            let grid = build_grid([[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]], [counts, counts, counts], 1.0).unwrap();
            let mesh = build_surface_mesh(&grid);
            let st = build_stencils(&grid);
            let (e, b) = fill(&grid, 0.0);
            let mut state = FieldState::zeros(&grid, &mesh, 0.0);
            state.e = e;
            state.b = b;
            let (e1, b1, _) = lw_step_fields(&state, &grid, &m, dt, &st, &[]);
            let (ex, bx) = fill(&grid, dt);
            let mut worst: f64 = 0.0;
            for k in 2..grid.counts[2] - 2 {
                for j in 2..grid.counts[1] - 2 {
                    for i in 2..grid.counts[0] - 2 {
                        let flat = grid.node_index(i, j, k);
                        worst = worst.max((e1[flat] - ex[flat]).norm());
                        worst = worst.max((b1[flat] - bx[flat]).norm());
                    }
                }
            }
            errs.push(worst);
        }
        // With dt tiny the h^2 dt term dominates: halving h divides the
        // one-step error by about 4. The fine-grid error sits at the
        // truncation estimate (h^2/6) |k|^3 c^2 dt ~ 1.6e-4.
        let ratio = errs[0] / errs[1];
        assert!(ratio > 3.4, "one-step convergence ratio {ratio} too small ({errs:?})");
        assert!(errs[1] < 2.5e-4, "one-step error too large: {errs:?}");
    }
}
