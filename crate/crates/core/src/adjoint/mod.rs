//! Reverse sweeps through the time loop and the squared-adjoint tally.
//!
//! `∂z/∂x_t` is taken for the state as stored at the end of step `t`, the
//! value a quantized run would round. The tally therefore covers `t = 0..=T`.

mod checkpoint;
mod tape;

use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::qtypes::RangeTracker;
use crate::quantity::QuantityDescriptor;

pub use checkpoint::{backprop_checkpointed, CheckpointTree, SpillConfig};
pub use tape::{Gradients, Real, Tape, Var};

#[derive(Debug, Error)]
pub enum AdjointError {
    #[error("forward step is not replayable: recomputed state {step} differs from the original run")]
    NonReplayable { step: usize },
    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("step {step} is beyond the horizon {steps}")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("checkpoint spill failed: {0}")]
    Spill(#[from] io::Error),
}

/// One time step `s_t ↦ s_{t+1}` and its vector-Jacobian product.
pub trait StepFunctions {
    fn quantities(&self) -> &[QuantityDescriptor];

    fn state_len(&self) -> usize {
        crate::quantity::state_len(self.quantities())
    }

    fn forward(&self, state: &[f64]) -> Vec<f64>;

    /// `∂z/∂s_t` from `s_t` and `∂z/∂s_{t+1}`.
    fn adjoint(&self, state: &[f64], adj_next: &[f64]) -> Vec<f64>;
}

/// `z = Σ_t term(t, s_t)`; most objectives only read the final state.
pub trait Objective {
    fn value(&self, t: usize, steps: usize, state: &[f64]) -> f64;

    /// Add `∂term(t)/∂s_t` into `grad`.
    fn accumulate_gradient(&self, t: usize, steps: usize, state: &[f64], grad: &mut [f64]);
}

/// Per-quantity `g_h = Σ_t Σ_i (∂z/∂x_{t,h,i})²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTally {
    pub names: Vec<String>,
    pub counts: Vec<usize>,
    pub sums: Vec<f64>,
    /// `‖∂z/∂s_t‖²` per step, for diagnostics.
    pub step_norms: Vec<f64>,
}

impl GradientTally {
    pub fn new(quantities: &[QuantityDescriptor], steps: usize) -> Self {
        Self {
            names: quantities.iter().map(|q| q.name.clone()).collect(),
            counts: quantities.iter().map(|q| q.count).collect(),
            sums: vec![0.0; quantities.len()],
            step_norms: vec![0.0; steps + 1],
        }
    }

    pub fn record(&mut self, quantities: &[QuantityDescriptor], t: usize, adj: &[f64]) {
        let mut norm = 0.0;
        for (h, q) in quantities.iter().enumerate() {
            let s: f64 = adj[q.span()].iter().map(|a| a * a).sum();
            self.sums[h] += s;
            norm += s;
        }
        if t < self.step_norms.len() {
            self.step_norms[t] += norm;
        }
    }

    /// Tallies over disjoint step ranges add.
    pub fn merge(&mut self, other: &GradientTally) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.step_norms.iter_mut().zip(&other.step_norms) {
            *a += b;
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|h| self.sums[h])
    }
}

#[derive(Debug, Clone, Default)]
pub struct BackpropOptions {
    /// Cap on `|∂z/∂x|` applied after every adjoint step.
    pub gradient_clamp: Option<f64>,
    pub spill: Option<SpillConfig>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepStats {
    /// Forward steps executed, including the initial run.
    pub forward_steps: u64,
    /// Most full states held at once, the working state included.
    pub peak_resident: usize,
}

#[derive(Debug, Clone)]
pub struct Backprop {
    pub z: f64,
    pub tally: GradientTally,
    pub stats: SweepStats,
}

pub(crate) fn check_finite(values: &[f64], what: &'static str, step: usize) -> Result<(), AdjointError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AdjointError::NonFinite { what, step })
    }
}

pub(crate) fn apply_clamp(adj: &mut [f64], clamp: Option<f64>) {
    if let Some(cap) = clamp {
        for a in adj.iter_mut() {
            *a = a.clamp(-cap, cap);
        }
    }
}

/// Run forward keeping every state, then sweep back. Returns the states and
/// the adjoint of every step.
pub fn adjoint_trajectory<S, O>(
    steps: &S,
    objective: &O,
    initial: &[f64],
    horizon: usize,
    clamp: Option<f64>,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>), AdjointError>
where
    S: StepFunctions + ?Sized,
    O: Objective + ?Sized,
{
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(initial.to_vec());
    for t in 0..horizon {
        let next = steps.forward(&states[t]);
        check_finite(&next, "state", t + 1)?;
        states.push(next);
    }
    let z: f64 = states
        .iter()
        .enumerate()
        .map(|(t, s)| objective.value(t, horizon, s))
        .sum();

    let mut adjoints = vec![Vec::new(); horizon + 1];
    let mut adj = vec![0.0; initial.len()];
    objective.accumulate_gradient(horizon, horizon, &states[horizon], &mut adj);
    apply_clamp(&mut adj, clamp);
    adjoints[horizon] = adj;
    for t in (0..horizon).rev() {
        let mut adj = steps.adjoint(&states[t], &adjoints[t + 1]);
        objective.accumulate_gradient(t, horizon, &states[t], &mut adj);
        apply_clamp(&mut adj, clamp);
        check_finite(&adj, "adjoint", t)?;
        adjoints[t] = adj;
    }
    Ok((z, states, adjoints))
}

/// Reference sweep holding all `T + 1` states in memory.
pub fn backprop_full<S, O>(
    steps: &S,
    objective: &O,
    initial: &[f64],
    horizon: usize,
    options: &BackpropOptions,
) -> Result<Backprop, AdjointError>
where
    S: StepFunctions + ?Sized,
    O: Objective + ?Sized,
{
    let quantities = steps.quantities();
    let mut tally = GradientTally::new(quantities, horizon);
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(initial.to_vec());
    let mut z = objective.value(0, horizon, initial);
    for t in 0..horizon {
        let next = steps.forward(&states[t]);
        check_finite(&next, "state", t + 1)?;
        z += objective.value(t + 1, horizon, &next);
        states.push(next);
    }

    let mut adj = vec![0.0; initial.len()];
    objective.accumulate_gradient(horizon, horizon, &states[horizon], &mut adj);
    apply_clamp(&mut adj, options.gradient_clamp);
    tally.record(quantities, horizon, &adj);
    for t in (0..horizon).rev() {
        adj = steps.adjoint(&states[t], &adj);
        objective.accumulate_gradient(t, horizon, &states[t], &mut adj);
        apply_clamp(&mut adj, options.gradient_clamp);
        check_finite(&adj, "adjoint", t)?;
        tally.record(quantities, t, &adj);
    }
    Ok(Backprop {
        z,
        tally,
        stats: SweepStats {
            forward_steps: horizon as u64,
            peak_resident: horizon + 1,
        },
    })
}

#[derive(Debug, Clone)]
pub struct FdCheckConfig {
    pub samples: usize,
    /// Perturbation as a fraction of the quantity's range.
    pub rel_step: f64,
    /// Gradients below `floor · max(|z|, 1) / R_h` are compared absolutely
    /// against that floor.
    pub floor: f64,
    pub seed: u64,
}

impl Default for FdCheckConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            rel_step: 1e-6,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdSample {
    pub step: usize,
    pub quantity: usize,
    pub index: usize,
    pub adjoint: f64,
    pub finite_difference: f64,
    pub error: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_error: f64,
    pub samples: Vec<FdSample>,
}

/// Compare adjoints against central differences at randomly chosen
/// `(t, h, i)` coordinates.
pub fn fd_check<S, O>(
    steps: &S,
    objective: &O,
    initial: &[f64],
    horizon: usize,
    config: &FdCheckConfig,
) -> Result<FdReport, AdjointError>
where
    S: StepFunctions + ?Sized,
    O: Objective + ?Sized,
{
    assert!(config.samples >= 1, "fd_check needs at least one sample");
    let quantities = steps.quantities();
    let (z, states, adjoints) = adjoint_trajectory(steps, objective, initial, horizon, None)?;

    let ranges: Vec<f64> = quantities
        .iter()
        .map(|q| {
            let mut tracker = RangeTracker::default();
            for s in &states {
                for &v in &s[q.span()] {
                    let _ = tracker.observe(v);
                }
            }
            tracker.range()
        })
        .collect();

    // z restricted to the terms a perturbation at step t can reach
    let tail = |t: usize, start: Vec<f64>| -> f64 {
        let mut s = start;
        let mut acc = objective.value(t, horizon, &s);
        for j in t..horizon {
            s = steps.forward(&s);
            acc += objective.value(j + 1, horizon, &s);
        }
        acc
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = Vec::with_capacity(config.samples);
    let mut max_error: f64 = 0.0;
    for _ in 0..config.samples {
        let t = rng.gen_range(0..=horizon);
        let h = rng.gen_range(0..quantities.len());
        let q = &quantities[h];
        let i = rng.gen_range(0..q.count);
        let k = q.offset + i;
        let delta = config.rel_step * ranges[h];

        let mut plus = states[t].clone();
        plus[k] += delta;
        let mut minus = states[t].clone();
        minus[k] -= delta;
        let fd = (tail(t, plus) - tail(t, minus)) / (2.0 * delta);
        let ad = adjoints[t][k];

        let floor = config.floor * z.abs().max(1.0) / ranges[h];
        let scale = fd.abs().max(ad.abs()).max(floor);
        let error = (fd - ad).abs() / scale;
        max_error = max_error.max(error);
        samples.push(FdSample {
            step: t,
            quantity: h,
            index: i,
            adjoint: ad,
            finite_difference: fd,
            error,
        });
    }
    Ok(FdReport { max_error, samples })
}

#[cfg(test)]
pub(crate) mod testing {
    //! Small linear systems with closed-form adjoints.

    use super::*;
    use crate::quantity::{contiguous_layout, Role};

    /// `s_{t+1} = s_t`, `z = Σ s_T`.
    pub struct Identity {
        pub quantities: Vec<QuantityDescriptor>,
    }

    impl Identity {
        pub fn new(counts: &[usize]) -> Self {
            let mut quantities = Vec::new();
            let mut offset = 0;
            for (h, &c) in counts.iter().enumerate() {
                quantities.push(QuantityDescriptor {
                    name: format!("q{h}"),
                    count: c,
                    offset,
                    role: Role::Particle,
                });
                offset += c;
            }
            Self { quantities }
        }
    }

    impl StepFunctions for Identity {
        fn quantities(&self) -> &[QuantityDescriptor] {
            &self.quantities
        }
        fn forward(&self, state: &[f64]) -> Vec<f64> {
            state.to_vec()
        }
        fn adjoint(&self, _state: &[f64], adj_next: &[f64]) -> Vec<f64> {
            adj_next.to_vec()
        }
    }

    pub struct FinalSum;

    impl Objective for FinalSum {
        fn value(&self, t: usize, steps: usize, state: &[f64]) -> f64 {
            if t == steps {
                state.iter().sum()
            } else {
                0.0
            }
        }
        fn accumulate_gradient(&self, t: usize, steps: usize, _state: &[f64], grad: &mut [f64]) {
            if t == steps {
                grad.iter_mut().for_each(|g| *g += 1.0);
            }
        }
    }

    /// Single body: `v += g dt; x += v dt`, `z = ½ v_T²`.
    pub struct Drop {
        pub g: f64,
        pub dt: f64,
        pub quantities: Vec<QuantityDescriptor>,
    }

    impl Drop {
        pub fn new(g: f64, dt: f64) -> Self {
            Self {
                g,
                dt,
                quantities: contiguous_layout(&["x", "v"], 1, Role::Particle),
            }
        }
    }

    impl StepFunctions for Drop {
        fn quantities(&self) -> &[QuantityDescriptor] {
            &self.quantities
        }
        fn forward(&self, s: &[f64]) -> Vec<f64> {
            let v = s[1] + self.g * self.dt;
            vec![s[0] + v * self.dt, v]
        }
        fn adjoint(&self, _s: &[f64], a: &[f64]) -> Vec<f64> {
            // x' = x + (v + g dt) dt, v' = v + g dt
            vec![a[0], a[0] * self.dt + a[1]]
        }
    }

    pub struct HalfVSquared;

    impl Objective for HalfVSquared {
        fn value(&self, t: usize, steps: usize, s: &[f64]) -> f64 {
            if t == steps {
                0.5 * s[1] * s[1]
            } else {
                0.0
            }
        }
        fn accumulate_gradient(&self, t: usize, steps: usize, s: &[f64], g: &mut [f64]) {
            if t == steps {
                g[1] += s[1];
            }
        }
    }

    /// Sum of squared positions over every step: exercises per-step terms.
    pub struct PathEnergy;

    impl Objective for PathEnergy {
        fn value(&self, _t: usize, _steps: usize, s: &[f64]) -> f64 {
            s[0] * s[0]
        }
        fn accumulate_gradient(&self, _t: usize, _steps: usize, s: &[f64], g: &mut [f64]) {
            g[0] += 2.0 * s[0];
        }
    }
}
