//! 2D MLS-MPM with fixed-corotated elasticity.
//!
//! Particle state per step: position `p`, velocity `v`, deformation gradient
//! `F` and affine velocity field `C`, one quantity per scalar component. The
//! background grid is rebuilt every step and never stored.
//!
//! P2G scatters particles in index order into a fresh grid, so the floating
//! point reduction order is fixed and replays are bit-identical.

use super::{EvalKind, Simulator, StepDiagnostics};
use crate::adjoint::Real;
use crate::quantity::{contiguous_layout, QuantityDescriptor, Role};

pub const QUANTITY_NAMES: [&str; 12] = [
    "p.x", "p.y", "v.x", "v.y", "F.00", "F.01", "F.10", "F.11", "C.00", "C.01", "C.10", "C.11",
];

const PX: usize = 0;
const PY: usize = 1;
const VX: usize = 2;
const VY: usize = 3;
const F00: usize = 4;
const C00: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct MpmParams {
    pub grid_res: usize,
    pub dt: f64,
    pub gravity: [f64; 2],
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub density: f64,
    /// Zero the wall-normal grid velocity within `bound_cells` of the box.
    pub boundary: bool,
    pub bound_cells: usize,
}

impl Default for MpmParams {
    fn default() -> Self {
        Self {
            grid_res: 64,
            dt: 2e-4,
            gravity: [0.0, -9.8],
            youngs_modulus: 400.0,
            poisson_ratio: 0.2,
            density: 1.0,
            boundary: true,
            bound_cells: 3,
        }
    }
}

/// A rectangular lattice of particles.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub origin: [f64; 2],
    pub size: [f64; 2],
    pub particles: [usize; 2],
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct Mpm {
    params: MpmParams,
    count: usize,
    initial: Vec<f64>,
    quantities: Vec<QuantityDescriptor>,
    dx: f64,
    inv_dx: f64,
    volume: f64,
    mass: f64,
    mu: f64,
    lambda: f64,
}

type Mat2<R> = [[R; 2]; 2];

#[inline]
fn matmul<R: Real>(a: &Mat2<R>, b: &Mat2<R>) -> Mat2<R> {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

/// Rotation factor of the 2D polar decomposition `F = R S`.
#[inline]
fn polar_rotation<R: Real>(f: &Mat2<R>) -> Mat2<R> {
    let a = f[0][0] + f[1][1];
    let b = f[1][0] - f[0][1];
    let norm = (a * a + b * b).sqrt();
    let c = a / norm;
    let s = b / norm;
    [[c, -s], [s, c]]
}

#[inline]
fn det<R: Real>(f: &Mat2<R>) -> R {
    f[0][0] * f[1][1] - f[0][1] * f[1][0]
}

/// Quadratic B-spline stencil: lower-left node and per-axis weights.
struct Stencil<R> {
    base: [usize; 2],
    fx: [R; 2],
    w: [[R; 3]; 2],
}

impl Mpm {
    pub fn new(params: MpmParams, positions: &[[f64; 2]], velocities: &[[f64; 2]]) -> Self {
        assert!(params.grid_res >= 2 * params.bound_cells + 4, "grid too small");
        assert!(params.dt > 0.0, "time step must be positive");
        assert_eq!(positions.len(), velocities.len());
        let count = positions.len();
        let dx = 1.0 / params.grid_res as f64;
        let volume = (0.5 * dx) * (0.5 * dx);
        let e = params.youngs_modulus;
        let nu = params.poisson_ratio;
        let mut initial = vec![0.0; 12 * count];
        for (p, (x, v)) in positions.iter().zip(velocities).enumerate() {
            initial[PX * count + p] = x[0];
            initial[PY * count + p] = x[1];
            initial[VX * count + p] = v[0];
            initial[VY * count + p] = v[1];
            initial[F00 * count + p] = 1.0;
            initial[(F00 + 3) * count + p] = 1.0;
        }
        Self {
            quantities: contiguous_layout(&QUANTITY_NAMES, count, Role::Particle),
            count,
            initial,
            dx,
            inv_dx: params.grid_res as f64,
            volume,
            mass: volume * params.density,
            mu: e / (2.0 * (1.0 + nu)),
            lambda: e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)),
            params,
        }
    }

    pub fn from_blocks(params: MpmParams, blocks: &[Block]) -> Self {
        let mut positions = Vec::new();
        let mut velocities = Vec::new();
        for b in blocks {
            for i in 0..b.particles[0] {
                for j in 0..b.particles[1] {
                    positions.push([
                        b.origin[0] + (i as f64 + 0.5) * b.size[0] / b.particles[0] as f64,
                        b.origin[1] + (j as f64 + 0.5) * b.size[1] / b.particles[1] as f64,
                    ]);
                    velocities.push(b.velocity);
                }
            }
        }
        Self::new(params, &positions, &velocities)
    }

    pub fn params(&self) -> &MpmParams {
        &self.params
    }

    pub fn particle_count(&self) -> usize {
        self.count
    }

    pub fn particle_mass(&self) -> f64 {
        self.mass
    }

    /// Positions are kept where the full 3×3 stencil lies on the grid.
    pub fn domain(&self) -> (f64, f64) {
        (self.dx, (self.params.grid_res as f64 - 2.0) * self.dx)
    }

    fn stencil<R: Real>(&self, x: [R; 2]) -> Stencil<R> {
        let mut base = [0usize; 2];
        let mut fx = [R::cst(0.0); 2];
        let mut w = [[R::cst(0.0); 3]; 2];
        for a in 0..2 {
            let scaled = x[a] * self.inv_dx;
            let top = (self.params.grid_res - 3) as f64;
            let b = (scaled.val() - 0.5).floor().clamp(0.0, top);
            base[a] = b as usize;
            let f = scaled - b;
            fx[a] = f;
            w[a] = [
                (f * -1.0 + 1.5).square() * 0.5,
                (f - 1.0).square() * -1.0 + 0.75,
                (f - 0.5).square() * 0.5,
            ];
        }
        Stencil { base, fx, w }
    }

    fn particle<R: Real>(&self, s: &[R], p: usize) -> ([R; 2], [R; 2], Mat2<R>, Mat2<R>) {
        let n = self.count;
        let at = |h: usize| s[h * n + p];
        (
            [at(PX), at(PY)],
            [at(VX), at(VY)],
            [[at(F00), at(F00 + 1)], [at(F00 + 2), at(F00 + 3)]],
            [[at(C00), at(C00 + 1)], [at(C00 + 2), at(C00 + 3)]],
        )
    }

    /// Scatter particle mass and momentum; the grid holds `(m v_x, m v_y, m)`.
    /// Also returns each particle's stencil and updated deformation gradient.
    fn particle_to_grid<R: Real>(&self, s: &[R]) -> (Vec<[R; 3]>, Vec<(Stencil<R>, Mat2<R>)>) {
        let res = self.params.grid_res;
        let dt = self.params.dt;
        let mut grid = vec![[R::cst(0.0); 3]; res * res];
        let mut cache = Vec::with_capacity(self.count);
        let stress_scale = -dt * self.volume * 4.0 * self.inv_dx * self.inv_dx;
        for p in 0..self.count {
            let (x, v, f, c) = self.particle(s, p);
            let st = self.stencil(x);
            let step = [[c[0][0] * dt + 1.0, c[0][1] * dt], [c[1][0] * dt, c[1][1] * dt + 1.0]];
            let f_new = matmul(&step, &f);
            let r = polar_rotation(&f_new);
            let j = det(&f_new);
            let diff = [[f_new[0][0] - r[0][0], f_new[0][1] - r[0][1]], [f_new[1][0] - r[1][0], f_new[1][1] - r[1][1]]];
            let f_t = [[f_new[0][0], f_new[1][0]], [f_new[0][1], f_new[1][1]]];
            let dft = matmul(&diff, &f_t);
            let vol_term = (j - 1.0) * j * self.lambda;
            // Kirchhoff stress 2μ(F − R)Fᵀ + λ(J − 1)J I, scaled into momentum
            let mut affine = [[R::cst(0.0); 2]; 2];
            for a in 0..2 {
                for b in 0..2 {
                    let mut tau = dft[a][b] * (2.0 * self.mu);
                    if a == b {
                        tau += vol_term;
                    }
                    affine[a][b] = tau * stress_scale + c[a][b] * self.mass;
                }
            }
            let mv = [v[0] * self.mass, v[1] * self.mass];
            for i in 0..3 {
                let dpx = (st.fx[0] * -1.0 + i as f64) * self.dx;
                for k in 0..3 {
                    let dpy = (st.fx[1] * -1.0 + k as f64) * self.dx;
                    let weight = st.w[0][i] * st.w[1][k];
                    let node = &mut grid[(st.base[0] + i) * res + st.base[1] + k];
                    node[0] += weight * (mv[0] + affine[0][0] * dpx + affine[0][1] * dpy);
                    node[1] += weight * (mv[1] + affine[1][0] * dpx + affine[1][1] * dpy);
                    node[2] += weight * self.mass;
                }
            }
            cache.push((st, f_new));
        }
        (grid, cache)
    }

    /// Sum of grid node masses after the scatter of `state`.
    pub fn grid_mass(&self, state: &[f64]) -> f64 {
        let (grid, _) = self.particle_to_grid(state);
        grid.iter().map(|n| n[2]).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass * self.count as f64
    }
}

impl Simulator for Mpm {
    fn quantities(&self) -> &[QuantityDescriptor] {
        &self.quantities
    }

    fn initial_state(&self) -> Vec<f64> {
        self.initial.clone()
    }

    fn step<R: Real>(&self, s: &[R], diag: &mut StepDiagnostics) -> Vec<R> {
        let res = self.params.grid_res;
        let dt = self.params.dt;
        let (mut grid, cache) = self.particle_to_grid(s);

        let bound = self.params.bound_cells;
        for i in 0..res {
            for k in 0..res {
                let node = &mut grid[i * res + k];
                if node[2].val() <= 0.0 {
                    *node = [R::cst(0.0); 3];
                    continue;
                }
                let m = node[2];
                let mut vx = node[0] / m + self.params.gravity[0] * dt;
                let mut vy = node[1] / m + self.params.gravity[1] * dt;
                if self.params.boundary {
                    if i < bound || i >= res - bound {
                        vx = R::cst(0.0);
                    }
                    if k < bound || k >= res - bound {
                        vy = R::cst(0.0);
                    }
                }
                node[0] = vx;
                node[1] = vy;
            }
        }

        let n = self.count;
        let (lo, hi) = self.domain();
        let apic = 4.0 * self.inv_dx * self.inv_dx;
        let mut out = vec![R::cst(0.0); 12 * n];
        for (p, (st, f_new)) in cache.into_iter().enumerate() {
            let mut v = [R::cst(0.0); 2];
            let mut c = [[R::cst(0.0); 2]; 2];
            for i in 0..3 {
                let dpx = (st.fx[0] * -1.0 + i as f64) * self.dx;
                for k in 0..3 {
                    let dpy = (st.fx[1] * -1.0 + k as f64) * self.dx;
                    let weight = st.w[0][i] * st.w[1][k];
                    let node = &grid[(st.base[0] + i) * res + st.base[1] + k];
                    let gv = [node[0] * weight, node[1] * weight];
                    v[0] += gv[0];
                    v[1] += gv[1];
                    c[0][0] += gv[0] * dpx * apic;
                    c[0][1] += gv[0] * dpy * apic;
                    c[1][0] += gv[1] * dpx * apic;
                    c[1][1] += gv[1] * dpy * apic;
                }
            }
            let mut x = [s[PX * n + p] + v[0] * dt, s[PY * n + p] + v[1] * dt];
            for xa in x.iter_mut() {
                let v = xa.val();
                if v < lo || v > hi {
                    diag.clamped += 1;
                    *xa = xa.clamp_val(lo, hi);
                }
            }
            out[PX * n + p] = x[0];
            out[PY * n + p] = x[1];
            out[VX * n + p] = v[0];
            out[VY * n + p] = v[1];
            for a in 0..2 {
                for b in 0..2 {
                    out[(F00 + 2 * a + b) * n + p] = f_new[a][b];
                    out[(C00 + 2 * a + b) * n + p] = c[a][b];
                }
            }
        }
        out
    }

    fn evaluate<R: Real>(&self, kind: EvalKind, s: &[R]) -> R {
        let n = self.count;
        let mut z = R::cst(0.0);
        match kind {
            EvalKind::FinalKineticEnergy => {
                for p in 0..n {
                    let (vx, vy) = (s[VX * n + p], s[VY * n + p]);
                    z += (vx * vx + vy * vy) * (0.5 * self.mass);
                }
            }
            EvalKind::FinalTotalEnergy => {
                let [gx, gy] = self.params.gravity;
                for p in 0..n {
                    let (x, v, f, _) = self.particle(s, p);
                    z += (v[0] * v[0] + v[1] * v[1]) * (0.5 * self.mass);
                    z -= (x[0] * gx + x[1] * gy) * self.mass;
                    let r = polar_rotation(&f);
                    let mut dev = R::cst(0.0);
                    for a in 0..2 {
                        for b in 0..2 {
                            dev += (f[a][b] - r[a][b]).square();
                        }
                    }
                    let j = det(&f) - 1.0;
                    z += (dev * self.mu + j * j * (0.5 * self.lambda)) * self.volume;
                }
            }
            EvalKind::AverageHeight => {
                for p in 0..n {
                    z += s[PY * n + p];
                }
                z = z / n as f64;
            }
        }
        z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{backprop_full, fd_check, FdCheckConfig};
    use crate::sims::{Differentiable, FinalEval};

    fn advance(sim: &Mpm, steps: usize) -> Vec<f64> {
        let mut s = sim.initial_state();
        for _ in 0..steps {
            s = sim.step(&s, &mut StepDiagnostics::default());
        }
        s
    }

    fn block(params: MpmParams, side: usize) -> Mpm {
        Mpm::from_blocks(
            params,
            &[Block {
                origin: [0.4, 0.5],
                size: [0.1, 0.1],
                particles: [side, side],
                velocity: [0.0, 0.0],
            }],
        )
    }

    #[test]
    fn resting_particle_is_a_fixed_point() {
        let params = MpmParams {
            gravity: [0.0, 0.0],
            ..Default::default()
        };
        let sim = Mpm::new(params, &[[0.5, 0.5]], &[[0.0, 0.0]]);
        let s0 = sim.initial_state();
        let s = advance(&sim, 10);
        for (a, b) in s.iter().zip(&s0) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn free_fall_conserves_momentum() {
        let params = MpmParams {
            boundary: false,
            ..Default::default()
        };
        let sim = block(params.clone(), 8);
        let steps = 50;
        let s = advance(&sim, steps);
        let n = sim.particle_count();
        for (h, g) in [(VX, params.gravity[0]), (VY, params.gravity[1])] {
            let mean: f64 = s[h * n..(h + 1) * n].iter().sum::<f64>() / n as f64;
            assert!((mean - g * steps as f64 * params.dt).abs() < 1e-10, "{mean}");
        }
    }

    #[test]
    fn grid_mass_matches_particle_mass() {
        let sim = block(MpmParams::default(), 10);
        let mut s = sim.initial_state();
        for _ in 0..20 {
            let m = sim.grid_mass(&s);
            assert!((m - sim.total_mass()).abs() < 1e-10 * sim.total_mass().max(1.0));
            s = sim.step(&s, &mut StepDiagnostics::default());
        }
    }

    #[test]
    fn replays_bit_identically() {
        let sim = block(MpmParams::default(), 6);
        let a = advance(&sim, 30);
        let b = advance(&sim, 30);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn walls_clamp_and_count() {
        let sim = Mpm::new(
            MpmParams {
                boundary: false,
                gravity: [0.0, 0.0],
                ..Default::default()
            },
            &[[0.03, 0.5]],
            &[[-100.0, 0.0]],
        );
        let mut diag = StepDiagnostics::default();
        let s = sim.step(&sim.initial_state(), &mut diag);
        assert_eq!(diag.clamped, 1);
        assert_eq!(s[PX], sim.domain().0);
    }

    #[test]
    fn energies_of_a_known_state() {
        let sim = Mpm::new(MpmParams::default(), &[[0.5, 0.25]], &[[3.0, 0.0]]);
        let s = sim.initial_state();
        let m = sim.particle_mass();
        assert!((sim.evaluate(EvalKind::FinalKineticEnergy, &s) - 4.5 * m).abs() < 1e-15);
        assert_eq!(sim.evaluate(EvalKind::AverageHeight, &s), 0.25);
        // undeformed: no elastic energy
        let total = sim.evaluate(EvalKind::FinalTotalEnergy, &s);
        assert!((total - (4.5 * m + 9.8 * 0.25 * m)).abs() < 1e-15);
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let params = MpmParams {
            grid_res: 16,
            dt: 1e-3,
            youngs_modulus: 200.0,
            ..Default::default()
        };
        let sim = Mpm::from_blocks(
            params,
            &[Block {
                origin: [0.35, 0.4],
                size: [0.12, 0.12],
                particles: [2, 2],
                velocity: [0.3, -0.5],
            }],
        );
        for kind in [EvalKind::FinalKineticEnergy, EvalKind::FinalTotalEnergy, EvalKind::AverageHeight] {
            let rep = fd_check(
                &Differentiable(&sim),
                &FinalEval { sim: &sim, kind },
                &sim.initial_state(),
                8,
                &FdCheckConfig {
                    samples: 60,
                    seed: 3,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(rep.max_error < 1e-4, "{kind:?}: {}", rep.max_error);
        }
    }

    #[test]
    fn tally_is_nonnegative_and_finite() {
        let sim = block(MpmParams::default(), 4);
        let out = backprop_full(
            &Differentiable(&sim),
            &FinalEval {
                sim: &sim,
                kind: EvalKind::FinalKineticEnergy,
            },
            &sim.initial_state(),
            10,
            &Default::default(),
        )
        .unwrap();
        assert!(out.tally.sums.iter().all(|g| g.is_finite() && *g >= 0.0));
        assert!(out.tally.get("v.y").unwrap() > 0.0);
    }
}
