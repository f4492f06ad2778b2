//! Full-precision and quantized execution of a simulator.
//!
//! In quantized mode every quantity named in the scheme is encoded at the
//! end of each step (and once for the initial state), written into a
//! bit-packed buffer, then loaded and decoded back into the working state.

use thiserror::Error;

use super::{EvalKind, Simulator, StepDiagnostics};
use crate::bitpack::{PackError, PackLayout, PackedBuffer};
use crate::qtypes::{DitherRng, QuantError, QuantSpec, RangeTracker, StoreStats};
use crate::quantizer::QuantScheme;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("scheme names quantity `{0}` which the simulator does not have")]
    UnknownQuantity(String),
    #[error("scheme gives `{name}` {scheme} elements but the simulator has {sim}")]
    CountMismatch { name: String, scheme: usize, sim: usize },
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Pack(#[from] PackError),
}

#[derive(Debug, Clone)]
pub struct RunOptions<'a> {
    pub scheme: Option<&'a QuantScheme>,
    pub dither: bool,
    pub seed: u64,
    pub stream: u64,
    /// Saturated stores per quantity above this fraction produce a warning.
    pub saturation_warning: f64,
    pub safety_factor: f64,
    pub min_range: f64,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self {
            scheme: None,
            dither: true,
            seed: 0,
            stream: 0,
            saturation_warning: 1e-3,
            safety_factor: 2.0,
            min_range: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub final_state: Vec<f64>,
    pub z: f64,
    /// One tracker per simulator quantity, over `s_0..=s_T` before rounding.
    pub ranges: Vec<(String, RangeTracker)>,
    /// One entry per quantized quantity, in scheme order.
    pub stores: Vec<(String, StoreStats)>,
    pub clamped: u64,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn range_of(&self, name: &str) -> Option<f64> {
        self.ranges.iter().find(|(n, _)| n == name).map(|(_, r)| r.range())
    }

    pub fn total_stores(&self) -> StoreStats {
        let mut all = StoreStats::default();
        for (_, s) in &self.stores {
            all.merge(s);
        }
        all
    }
}

struct Slot {
    spec: QuantSpec,
    offset: usize,
    count: usize,
    group: usize,
    field: usize,
}

/// Packed storage for the quantized quantities, one buffer per element count.
struct Store {
    slots: Vec<Slot>,
    buffers: Vec<PackedBuffer>,
    stats: Vec<StoreStats>,
}

impl Store {
    fn new<S: Simulator>(sim: &S, scheme: &QuantScheme) -> Result<Self, RunError> {
        let mut groups: Vec<(usize, Vec<(String, u32)>)> = Vec::new();
        let mut slots = Vec::with_capacity(scheme.entries.len());
        for e in &scheme.entries {
            let q = sim
                .quantities()
                .iter()
                .find(|q| q.name == e.name)
                .ok_or_else(|| RunError::UnknownQuantity(e.name.clone()))?;
            if q.count != e.count {
                return Err(RunError::CountMismatch {
                    name: e.name.clone(),
                    scheme: e.count,
                    sim: q.count,
                });
            }
            let spec = e.spec()?;
            let group = match groups.iter().position(|(c, _)| *c == q.count) {
                Some(g) => g,
                None => {
                    groups.push((q.count, Vec::new()));
                    groups.len() - 1
                }
            };
            let fields = &mut groups[group].1;
            fields.push((e.name.clone(), spec.storage_bits()));
            slots.push(Slot {
                spec,
                offset: q.offset,
                count: q.count,
                group,
                field: fields.len() - 1,
            });
        }
        let buffers = groups
            .into_iter()
            .map(|(count, fields)| Ok(PackedBuffer::new(PackLayout::plan(&fields, 64)?, count)))
            .collect::<Result<_, PackError>>()?;
        Ok(Self {
            stats: vec![StoreStats::default(); slots.len()],
            slots,
            buffers,
        })
    }

    fn round_trip(&mut self, state: &mut [f64], rng: Option<&mut DitherRng>) -> Result<(), RunError> {
        let mut rng = rng;
        for (slot, stats) in self.slots.iter().zip(self.stats.iter_mut()) {
            let buf = &mut self.buffers[slot.group];
            for i in 0..slot.count {
                let v = state[slot.offset + i];
                let code = match rng.as_deref_mut() {
                    Some(r) => slot.spec.encode_dithered(v, r)?,
                    None => slot.spec.encode(v)?,
                };
                stats.record(v, &slot.spec, code);
                buf.store_signed(i, slot.field, code.value)?;
            }
        }
        for slot in &self.slots {
            let buf = &self.buffers[slot.group];
            for i in 0..slot.count {
                state[slot.offset + i] = slot.spec.decode(buf.load_signed(i, slot.field)?);
            }
        }
        Ok(())
    }
}

/// Run `steps` steps from the simulator's initial state and evaluate `kind`
/// on the final state.
pub fn run<S: Simulator>(sim: &S, steps: usize, kind: EvalKind, options: &RunOptions) -> Result<RunReport, RunError> {
    let quantities = sim.quantities();
    let mut trackers = vec![RangeTracker::new(options.safety_factor, options.min_range); quantities.len()];
    let mut store = options.scheme.map(|s| Store::new(sim, s)).transpose()?;
    let mut rng = options.dither.then(|| DitherRng::new(options.seed, options.stream));

    let mut state = sim.initial_state();
    let mut diag = StepDiagnostics::default();
    for t in 0..=steps {
        if t > 0 {
            state = sim.step(&state, &mut diag);
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(RunError::NonFinite { step: t });
        }
        for (q, tracker) in quantities.iter().zip(trackers.iter_mut()) {
            tracker.observe_all(&state[q.span()])?;
        }
        if let Some(store) = store.as_mut() {
            store.round_trip(&mut state, rng.as_mut())?;
        }
    }
    let z = sim.evaluate(kind, &state);

    let mut warnings = Vec::new();
    let stores: Vec<(String, StoreStats)> = match (&store, options.scheme) {
        (Some(store), Some(scheme)) => scheme
            .entries
            .iter()
            .zip(&store.stats)
            .map(|(e, s)| (e.name.clone(), *s))
            .collect(),
        _ => Vec::new(),
    };
    for (name, s) in &stores {
        if s.saturation_rate() > options.saturation_warning {
            warnings.push(format!(
                "quantity `{name}` saturated on {} of {} stores",
                s.saturations, s.stores
            ));
        }
    }
    if diag.clamped > 0 {
        warnings.push(format!("{} particle coordinates clamped to the domain", diag.clamped));
    }
    Ok(RunReport {
        final_state: state,
        z,
        ranges: quantities.iter().map(|q| q.name.clone()).zip(trackers).collect(),
        stores,
        clamped: diag.clamped,
        warnings,
    })
}
