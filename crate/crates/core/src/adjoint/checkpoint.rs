//! Bisection checkpointing.
//!
//! Leaves `0..=T` of a complete binary tree stand for the states `s_0..s_T`.
//! The inner node at depth `d` on the path to leaf `t` covers an aligned
//! block of `2^(D-d)` leaves and its signpost is the block's first leaf; a
//! checkpoint at that node stores the state at the signpost. Only the
//! checkpoints on the current root-to-leaf path stay resident, one slot per
//! depth. Recovering `s_t` restarts from the deepest still-valid ancestor and
//! refreshes the deeper slots as the rerun passes their signposts.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::PathBuf;
use std::rc::Rc;

use super::{
    apply_clamp, check_finite, AdjointError, Backprop, BackpropOptions, GradientTally, Objective,
    StepFunctions, SweepStats,
};

/// Move checkpoints to `dir` once resident checkpoint bytes would exceed
/// `memory_budget_bytes`.
#[derive(Debug, Clone)]
pub struct SpillConfig {
    pub dir: PathBuf,
    pub memory_budget_bytes: usize,
}

#[derive(Debug, Clone)]
enum Stored {
    Memory(Rc<Vec<f64>>),
    Disk(PathBuf),
}

#[derive(Debug, Clone)]
struct Slot {
    signpost: usize,
    stored: Stored,
}

fn state_hash(state: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    for v in state {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

pub struct CheckpointTree<'a, S: StepFunctions + ?Sized> {
    steps: &'a S,
    horizon: usize,
    depth: u32,
    slots: Vec<Option<Slot>>,
    /// Hash of every state from the first forward run, for replay checks.
    hashes: Vec<u64>,
    final_state: Vec<f64>,
    spill: Option<SpillConfig>,
    forward_steps: u64,
    peak_resident: usize,
}

impl<'a, S: StepFunctions + ?Sized> CheckpointTree<'a, S> {
    /// Run forward from `initial`, keeping the checkpoints on the path to
    /// leaf `T`. `visit` sees every state once, in order.
    pub fn build(
        steps: &'a S,
        initial: &[f64],
        horizon: usize,
        spill: Option<SpillConfig>,
        mut visit: impl FnMut(usize, &[f64]),
    ) -> Result<Self, AdjointError> {
        let leaves = horizon as u64 + 1;
        let depth = 64 - (leaves - 1).leading_zeros();
        let mut tree = Self {
            steps,
            horizon,
            depth,
            slots: vec![None; depth as usize],
            hashes: Vec::with_capacity(horizon + 1),
            final_state: Vec::new(),
            spill,
            forward_steps: 0,
            peak_resident: 0,
        };
        if let Some(spill) = &tree.spill {
            fs::create_dir_all(&spill.dir)?;
        }
        let mut state = initial.to_vec();
        for j in 0..=horizon {
            if j > 0 {
                state = steps.forward(&state);
                tree.forward_steps += 1;
                check_finite(&state, "state", j)?;
            }
            tree.hashes.push(state_hash(&state));
            visit(j, &state);
            tree.store_along_path(horizon, j, 0, &state)?;
            tree.note_resident();
        }
        tree.final_state = state;
        Ok(tree)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Inner-node depth `D = ⌈log2(T + 1)⌉`.
    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Hand over `s_T` from the initial run; later requests for it replay.
    pub fn take_final_state(&mut self) -> Vec<f64> {
        std::mem::take(&mut self.final_state)
    }

    pub fn forward_steps(&self) -> u64 {
        self.forward_steps
    }

    pub fn peak_resident(&self) -> usize {
        self.peak_resident
    }

    /// Signposts of the resident checkpoints, root first.
    pub fn resident_signposts(&self) -> Vec<Option<usize>> {
        self.slots.iter().map(|s| s.as_ref().map(|s| s.signpost)).collect()
    }

    fn signpost(&self, leaf: usize, d: u32) -> usize {
        let block = 1usize << (self.depth - d);
        leaf & !(block - 1)
    }

    /// Checkpoints currently held, counted once per distinct state.
    fn resident_checkpoints(&self) -> usize {
        let mut seen: Vec<usize> = self.slots.iter().flatten().map(|s| s.signpost).collect();
        seen.dedup();
        seen.len()
    }

    fn note_resident(&mut self) {
        let now = self.resident_checkpoints() + 1;
        self.peak_resident = self.peak_resident.max(now);
    }

    fn resident_bytes(&self) -> usize {
        let mut last = None;
        let mut bytes = 0;
        for slot in self.slots.iter().flatten() {
            if let Stored::Memory(rc) = &slot.stored {
                if last != Some(slot.signpost) {
                    bytes += rc.len() * 8;
                }
                last = Some(slot.signpost);
            }
        }
        bytes
    }

    /// Fill empty slots deeper than `from_depth` whose signpost on the path to
    /// `leaf` is `j`.
    fn store_along_path(&mut self, leaf: usize, j: usize, from_depth: u32, state: &[f64]) -> Result<(), AdjointError> {
        let mut shared: Option<Stored> = None;
        for d in from_depth..self.depth {
            if self.signpost(leaf, d) != j || self.slots[d as usize].is_some() {
                continue;
            }
            let stored = match &shared {
                Some(s) => s.clone(),
                None => {
                    let s = self.store(j, state)?;
                    shared = Some(s.clone());
                    s
                }
            };
            self.slots[d as usize] = Some(Slot { signpost: j, stored });
        }
        Ok(())
    }

    fn store(&self, signpost: usize, state: &[f64]) -> Result<Stored, AdjointError> {
        if let Some(spill) = &self.spill {
            if self.resident_bytes() + state.len() * 8 > spill.memory_budget_bytes {
                let path = spill.dir.join(format!("checkpoint-{signpost}.bin"));
                let mut bytes = Vec::with_capacity(state.len() * 8);
                for v in state {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                fs::File::create(&path)?.write_all(&bytes)?;
                return Ok(Stored::Disk(path));
            }
        }
        Ok(Stored::Memory(Rc::new(state.to_vec())))
    }

    fn load(stored: &Stored) -> Result<Vec<f64>, AdjointError> {
        match stored {
            Stored::Memory(rc) => Ok(rc.as_ref().clone()),
            Stored::Disk(path) => {
                let mut bytes = Vec::new();
                fs::File::open(path)?.read_to_end(&mut bytes)?;
                Ok(bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            }
        }
    }

    /// Reconstruct `s_t`, rerunning from the nearest resident ancestor.
    pub fn recover(&mut self, t: usize) -> Result<Vec<f64>, AdjointError> {
        if t > self.horizon {
            return Err(AdjointError::StepOutOfRange {
                step: t,
                steps: self.horizon,
            });
        }
        for d in 0..self.depth {
            let want = self.signpost(t, d);
            if self.slots[d as usize].as_ref().is_some_and(|s| s.signpost != want) {
                self.slots[d as usize] = None;
            }
        }
        let anchor = (0..self.depth)
            .rev()
            .find(|&d| self.slots[d as usize].is_some())
            .expect("root checkpoint is never evicted");
        let slot = self.slots[anchor as usize].clone().unwrap();
        let mut state = Self::load(&slot.stored)?;
        for j in slot.signpost..=t {
            if j > slot.signpost {
                state = self.steps.forward(&state);
                self.forward_steps += 1;
                if state_hash(&state) != self.hashes[j] {
                    return Err(AdjointError::NonReplayable { step: j });
                }
            }
            self.store_along_path(t, j, anchor + 1, &state)?;
            self.note_resident();
        }
        Ok(state)
    }
}

/// Same tally as [`super::backprop_full`] with `O(log T)` resident states
/// and `O(T log T)` forward steps.
pub fn backprop_checkpointed<S, O>(
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
    let mut z = 0.0;
    let mut tree = CheckpointTree::build(steps, initial, horizon, options.spill.clone(), |t, s| {
        z += objective.value(t, horizon, s)
    })?;
    let mut tally = GradientTally::new(quantities, horizon);
    let mut adj = vec![0.0; initial.len()];
    let final_state = tree.take_final_state();
    objective.accumulate_gradient(horizon, horizon, &final_state, &mut adj);
    drop(final_state);
    apply_clamp(&mut adj, options.gradient_clamp);
    tally.record(quantities, horizon, &adj);
    for t in (0..horizon).rev() {
        let state = tree.recover(t)?;
        adj = steps.adjoint(&state, &adj);
        objective.accumulate_gradient(t, horizon, &state, &mut adj);
        apply_clamp(&mut adj, options.gradient_clamp);
        check_finite(&adj, "adjoint", t)?;
        tally.record(quantities, t, &adj);
    }
    Ok(Backprop {
        z,
        tally,
        stats: SweepStats {
            forward_steps: tree.forward_steps(),
            peak_resident: tree.peak_resident(),
        },
    })
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::super::testing::*;
    use super::super::{adjoint_trajectory, backprop_full};
    use super::*;
    use crate::quantity::QuantityDescriptor;

    /// Counts forward steps; state is a single counter so states are distinct.
    struct Counter {
        inner: Identity,
    }

    impl StepFunctions for Counter {
        fn quantities(&self) -> &[QuantityDescriptor] {
            &self.inner.quantities
        }
        fn forward(&self, s: &[f64]) -> Vec<f64> {
            s.iter().map(|v| v + 1.0).collect()
        }
        fn adjoint(&self, _s: &[f64], a: &[f64]) -> Vec<f64> {
            a.to_vec()
        }
    }

    fn counter() -> Counter {
        Counter {
            inner: Identity::new(&[1]),
        }
    }

    #[test]
    fn five_leaf_replay_refreshes_depth_one_and_two() {
        let sys = counter();
        let mut tree = CheckpointTree::build(&sys, &[0.0], 4, None, |_, _| {}).unwrap();
        assert_eq!(tree.depth(), 3);
        assert_eq!(tree.resident_signposts(), vec![Some(0), Some(4), Some(4)]);
        assert_eq!(tree.forward_steps(), 4);
        let s3 = tree.recover(3).unwrap();
        assert_eq!(s3, vec![3.0]);
        // depth 1 refreshed after 0 steps (s_0), depth 2 after 2 steps (s_2)
        assert_eq!(tree.resident_signposts(), vec![Some(0), Some(0), Some(2)]);
        assert_eq!(tree.forward_steps(), 4 + 3);
        // s_2 is resident now: no rerun
        assert_eq!(tree.recover(2).unwrap(), vec![2.0]);
        assert_eq!(tree.forward_steps(), 7);
    }

    #[test]
    fn single_step_horizon() {
        let sys = counter();
        let mut tree = CheckpointTree::build(&sys, &[5.0], 1, None, |_, _| {}).unwrap();
        assert_eq!(tree.recover(0).unwrap(), vec![5.0]);
        assert!(tree.peak_resident() <= 2);
        assert!(matches!(tree.recover(2), Err(AdjointError::StepOutOfRange { .. })));
    }

    #[test]
    fn random_recovery_matches_stored_states() {
        let sys = Drop::new(-9.81, 0.013);
        let s0 = [0.2, 1.1];
        let horizon = 37;
        let (_, states, _) = adjoint_trajectory(&sys, &HalfVSquared, &s0, horizon, None).unwrap();
        let mut tree = CheckpointTree::build(&sys, &s0, horizon, None, |_, _| {}).unwrap();
        // any t at or behind the frontier
        let mut frontier = horizon;
        let mut x = 12345u64;
        while frontier > 0 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let t = (x >> 33) as usize % (frontier + 1);
            assert_eq!(tree.recover(t).unwrap(), states[t]);
            frontier = t;
        }
    }

    #[test]
    fn matches_full_storage_bit_for_bit() {
        let sys = Drop::new(-9.81, 0.01);
        for horizon in [0, 1, 2, 3, 15, 16, 17, 100, 256] {
            let a = backprop_full(&sys, &PathEnergy, &[0.3, 2.0], horizon, &Default::default()).unwrap();
            let b = backprop_checkpointed(&sys, &PathEnergy, &[0.3, 2.0], horizon, &Default::default()).unwrap();
            assert_eq!(a.z.to_bits(), b.z.to_bits());
            assert_eq!(a.tally, b.tally);
        }
    }

    #[test]
    fn complexity_bounds() {
        let sys = counter();
        for horizon in [15usize, 16, 1000, 1024, 1 << 14] {
            let out = backprop_checkpointed(&sys, &FinalSum, &[0.0], horizon, &Default::default()).unwrap();
            let log = (horizon as f64 + 1.0).log2().ceil() as usize;
            assert!(out.stats.peak_resident <= log + 2, "T={horizon}: {:?}", out.stats);
            let bound = horizon as f64 * ((horizon as f64).log2() + 2.0);
            assert!((out.stats.forward_steps as f64) <= bound, "T={horizon}: {:?}", out.stats);
        }
    }

    struct Impure {
        inner: Identity,
        calls: Cell<u32>,
    }

    impl StepFunctions for Impure {
        fn quantities(&self) -> &[QuantityDescriptor] {
            &self.inner.quantities
        }
        fn forward(&self, s: &[f64]) -> Vec<f64> {
            self.calls.set(self.calls.get() + 1);
            s.iter().map(|v| v + self.calls.get() as f64).collect()
        }
        fn adjoint(&self, _s: &[f64], a: &[f64]) -> Vec<f64> {
            a.to_vec()
        }
    }

    #[test]
    fn impure_step_is_detected() {
        let sys = Impure {
            inner: Identity::new(&[1]),
            calls: Cell::new(0),
        };
        let err = backprop_checkpointed(&sys, &FinalSum, &[0.0], 8, &Default::default()).unwrap_err();
        assert!(matches!(err, AdjointError::NonReplayable { .. }));
    }

    #[test]
    fn spilled_checkpoints_give_identical_tallies() {
        let dir = std::env::temp_dir().join(format!("quantsim-spill-{}", std::process::id()));
        let sys = Drop::new(-9.81, 0.01);
        let opts = BackpropOptions {
            gradient_clamp: None,
            spill: Some(SpillConfig {
                dir: dir.clone(),
                memory_budget_bytes: 16,
            }),
        };
        let a = backprop_full(&sys, &PathEnergy, &[0.3, 2.0], 50, &Default::default()).unwrap();
        let b = backprop_checkpointed(&sys, &PathEnergy, &[0.3, 2.0], 50, &opts).unwrap();
        assert_eq!(a.tally, b.tally);
        assert!(fs::read_dir(&dir).unwrap().count() > 0);
        fs::remove_dir_all(&dir).unwrap();
    }
}
