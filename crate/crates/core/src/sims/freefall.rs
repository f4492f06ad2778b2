//! Independent bodies under gravity, optionally tied to the origin by a
//! linear spring. Unit mass, symplectic Euler:
//! `v ← v + (g − k x) dt`, `x ← x + v dt`.

use super::{EvalKind, Simulator, StepDiagnostics};
use crate::adjoint::Real;
use crate::quantity::{contiguous_layout, QuantityDescriptor, Role};

#[derive(Debug, Clone, PartialEq)]
pub struct FreeFallParams {
    pub dt: f64,
    pub gravity: f64,
    pub stiffness: f64,
}

#[derive(Debug, Clone)]
pub struct FreeFall {
    params: FreeFallParams,
    positions: Vec<f64>,
    velocities: Vec<f64>,
    quantities: Vec<QuantityDescriptor>,
}

impl FreeFall {
    pub fn new(params: FreeFallParams, positions: Vec<f64>, velocities: Vec<f64>) -> Self {
        assert!(params.dt > 0.0, "time step must be positive");
        assert_eq!(positions.len(), velocities.len());
        let quantities = contiguous_layout(&["x", "v"], positions.len(), Role::Particle);
        Self {
            params,
            positions,
            velocities,
            quantities,
        }
    }

    pub fn params(&self) -> &FreeFallParams {
        &self.params
    }

    pub fn bodies(&self) -> usize {
        self.positions.len()
    }
}

impl Simulator for FreeFall {
    fn quantities(&self) -> &[QuantityDescriptor] {
        &self.quantities
    }

    fn initial_state(&self) -> Vec<f64> {
        let mut s = self.positions.clone();
        s.extend_from_slice(&self.velocities);
        s
    }

    fn step<R: Real>(&self, state: &[R], _diag: &mut StepDiagnostics) -> Vec<R> {
        let n = self.bodies();
        let FreeFallParams { dt, gravity, stiffness } = self.params;
        let mut out = state.to_vec();
        for i in 0..n {
            let x = state[i];
            let mut v = state[n + i] + gravity * dt;
            if stiffness != 0.0 {
                v -= x * (stiffness * dt);
            }
            out[n + i] = v;
            out[i] = x + v * dt;
        }
        out
    }

    fn evaluate<R: Real>(&self, kind: EvalKind, state: &[R]) -> R {
        let n = self.bodies();
        let (x, v) = state.split_at(n);
        let kinetic = || v.iter().fold(R::cst(0.0), |acc, &vi| acc + vi * vi * 0.5);
        match kind {
            EvalKind::FinalKineticEnergy => kinetic(),
            EvalKind::FinalTotalEnergy => {
                let potential = x.iter().fold(R::cst(0.0), |acc, &xi| {
                    acc + xi * (-self.params.gravity) + xi * xi * (0.5 * self.params.stiffness)
                });
                kinetic() + potential
            }
            EvalKind::AverageHeight => x.iter().fold(R::cst(0.0), |acc, &xi| acc + xi) / n as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{backprop_full, fd_check, FdCheckConfig};
    use crate::sims::{Differentiable, FinalEval};

    fn drop(g: f64, v0: f64) -> FreeFall {
        FreeFall::new(
            FreeFallParams {
                dt: 0.01,
                gravity: g,
                stiffness: 0.0,
            },
            vec![0.0],
            vec![v0],
        )
    }

    fn advance(sim: &FreeFall, steps: usize) -> Vec<f64> {
        let mut s = sim.initial_state();
        for _ in 0..steps {
            s = sim.step(&s, &mut StepDiagnostics::default());
        }
        s
    }

    #[test]
    fn hundred_steps_closed_form() {
        let s = advance(&drop(-10.0, 0.0), 100);
        assert!((s[1] + 10.0).abs() < 1e-12);
        // x_T = Σ_{t=1..T} v_t dt = -0.1 · 0.01 · 5050
        assert!((s[0] + 5.05).abs() < 1e-12);
    }

    #[test]
    fn no_gravity_keeps_velocity() {
        let s = advance(&drop(0.0, 0.75), 40);
        assert_eq!(s[1], 0.75);
    }

    #[test]
    fn evaluation_kinds() {
        let sim = FreeFall::new(
            FreeFallParams {
                dt: 0.1,
                gravity: -2.0,
                stiffness: 4.0,
            },
            vec![1.0, 3.0],
            vec![3.0, 0.0],
        );
        let s = sim.initial_state();
        assert_eq!(sim.evaluate(EvalKind::FinalKineticEnergy, &s), 4.5);
        assert_eq!(sim.evaluate(EvalKind::AverageHeight, &s), 2.0);
        // KE 4.5, gravity 2·(1+3), spring 2·(1+9)
        assert_eq!(sim.evaluate(EvalKind::FinalTotalEnergy, &s), 4.5 + 8.0 + 20.0);
        let still = vec![0.0; 4];
        assert_eq!(sim.evaluate(EvalKind::FinalKineticEnergy, &still), 0.0);
    }

    #[test]
    fn tape_adjoint_matches_closed_form() {
        let sim = drop(-10.0, 0.5);
        let horizon = 60;
        let objective = FinalEval {
            sim: &sim,
            kind: EvalKind::FinalKineticEnergy,
        };
        let out = backprop_full(&Differentiable(&sim), &objective, &sim.initial_state(), horizon, &Default::default())
            .unwrap();
        let v_final: f64 = 0.5 - 10.0 * 0.01 * horizon as f64;
        let g_v = out.tally.get("v").unwrap();
        assert!((g_v - (horizon as f64 + 1.0) * v_final * v_final).abs() < 1e-10 * g_v);
        assert_eq!(out.tally.get("x").unwrap(), 0.0);
    }

    #[test]
    fn oscillator_passes_fd_check() {
        let sim = FreeFall::new(
            FreeFallParams {
                dt: 0.02,
                gravity: -1.0,
                stiffness: 9.0,
            },
            vec![0.3, -0.2, 0.9],
            vec![0.0, 1.0, -0.4],
        );
        for kind in [EvalKind::FinalKineticEnergy, EvalKind::FinalTotalEnergy, EvalKind::AverageHeight] {
            let rep = fd_check(
                &Differentiable(&sim),
                &FinalEval { sim: &sim, kind },
                &sim.initial_state(),
                80,
                &FdCheckConfig {
                    samples: 40,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(rep.max_error < 1e-6, "{kind:?}: {}", rep.max_error);
        }
    }
}
