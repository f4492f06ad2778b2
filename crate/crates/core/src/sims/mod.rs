//! Built-in differentiable simulators.
//!
//! Each simulator writes its step once against [`Real`]; the `f64`
//! instantiation is the forward map and the [`Var`] instantiation yields
//! the adjoint through a per-step tape.

mod freefall;
mod mpm;
mod run;
mod scene;

use serde::{Deserialize, Serialize};

use crate::adjoint::{Objective, Real, StepFunctions, Tape, Var};
use crate::quantity::QuantityDescriptor;

pub use freefall::{FreeFall, FreeFallParams};
pub use mpm::{Block, Mpm, MpmParams};
pub use run::{run, RunError, RunOptions, RunReport};
pub use scene::{FreeFallConfig, ModelConfig, MpmConfig, Scene, SceneConfig, SceneError};

/// Scalar summary of a trajectory, read from the final state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    FinalKineticEnergy,
    FinalTotalEnergy,
    AverageHeight,
}

impl EvalKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalKind::FinalKineticEnergy => "final_kinetic_energy",
            EvalKind::FinalTotalEnergy => "final_total_energy",
            EvalKind::AverageHeight => "average_height",
        }
    }
}

/// Side counters of a step that do not feed back into the state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepDiagnostics {
    /// Particles pushed back inside the domain.
    pub clamped: u64,
}

pub trait Simulator {
    fn quantities(&self) -> &[QuantityDescriptor];
    fn initial_state(&self) -> Vec<f64>;
    fn step<R: Real>(&self, state: &[R], diag: &mut StepDiagnostics) -> Vec<R>;
    fn evaluate<R: Real>(&self, kind: EvalKind, state: &[R]) -> R;

    fn state_len(&self) -> usize {
        crate::quantity::state_len(self.quantities())
    }
}

/// A simulator seen through the [`StepFunctions`] contract.
pub struct Differentiable<'a, S>(pub &'a S);

impl<S: Simulator> StepFunctions for Differentiable<'_, S> {
    fn quantities(&self) -> &[QuantityDescriptor] {
        self.0.quantities()
    }

    fn forward(&self, state: &[f64]) -> Vec<f64> {
        self.0.step(state, &mut StepDiagnostics::default())
    }

    fn adjoint(&self, state: &[f64], adj_next: &[f64]) -> Vec<f64> {
        let tape = Tape::with_capacity(state.len() * 64);
        let inputs = tape.vars(state);
        let outputs: Vec<Var<'_>> = self.0.step(&inputs, &mut StepDiagnostics::default());
        let seeds: Vec<(Var<'_>, f64)> = outputs.into_iter().zip(adj_next.iter().copied()).collect();
        let grads = tape.backward(&seeds);
        inputs.iter().map(|v| grads.of(v)).collect()
    }
}

/// Final-state evaluation function as an [`Objective`].
pub struct FinalEval<'a, S> {
    pub sim: &'a S,
    pub kind: EvalKind,
}

impl<S: Simulator> Objective for FinalEval<'_, S> {
    fn value(&self, t: usize, steps: usize, state: &[f64]) -> f64 {
        if t == steps {
            self.sim.evaluate(self.kind, state)
        } else {
            0.0
        }
    }

    fn accumulate_gradient(&self, t: usize, steps: usize, state: &[f64], grad: &mut [f64]) {
        if t != steps {
            return;
        }
        let tape = Tape::new();
        let inputs = tape.vars(state);
        let z = self.sim.evaluate(self.kind, &inputs);
        let grads = tape.backward(&[(z, 1.0)]);
        for (g, v) in grad.iter_mut().zip(&inputs) {
            *g += grads.of(v);
        }
    }
}

/// `z` of a state that is already final.
pub fn evaluate<S: Simulator>(sim: &S, kind: EvalKind, state: &[f64]) -> f64 {
    sim.evaluate(kind, state)
}
