//! From a reference run to a quantization scheme.
//!
//! With per-quantity element counts `P_h`, ranges `R_h` and squared-adjoint
//! tallies `g_h`, the predicted standard deviation of `z` under dithered
//! storage is `sqrt(Σ Δ_h² g_h / 12)`. Two closed-form solvers pick `Δ_h`:
//!
//! * error-bounded: minimize `Σ P_h b_h` subject to `σ ≤ ε |z|`, giving
//!   `Δ_h = sqrt(12 P_h (ε z)² / (g_h Σ P))` and `b_h = ⌈log2(R_h / Δ_h)⌉`;
//! * memory-bounded: minimize `σ` subject to `Σ P_h b_h ≤ B`, giving
//!   `Δ_h = c sqrt(P_h / g_h)` with `c` fixed by the budget, then `⌊·⌋`.

mod scheme;
mod validate;

use thiserror::Error;

use crate::adjoint::GradientTally;
use crate::qtypes::BitBounds;
use crate::sims::RunReport;

pub use scheme::{QuantScheme, SchemeEntry};
pub use validate::{
    optimality_probe, probe_table, validate, Perturbation, ProbeRow, TrialResult, ValidationConfig,
    ValidationReport,
};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("memory budget of {budget} bits cannot hold the {needed} bits required at minimum precision")]
    Infeasible { needed: u64, budget: u64 },
    #[error("invalid solver input: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveMode {
    /// Relative error tolerance `ε_err`.
    ErrorBounded { tolerance: f64 },
    /// Target physical-bit compression rate `ε_mem` in `(0, 1)`.
    MemoryBounded { rate: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantityInput {
    pub name: String,
    pub count: usize,
    pub range: f64,
    pub gradient: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverRequest {
    pub mode: SolveMode,
    pub z: f64,
    pub quantities: Vec<QuantityInput>,
    /// 32 or 64; the reference memory is `reference_bits · Σ P_h`.
    pub reference_bits: u32,
    pub bounds: BitBounds,
    /// Below this magnitude the tolerance becomes absolute: `ε · max(|z|, z_floor)`.
    pub z_floor: f64,
}

impl SolverRequest {
    pub fn new(mode: SolveMode, z: f64, quantities: Vec<QuantityInput>) -> Self {
        Self {
            mode,
            z,
            quantities,
            reference_bits: 32,
            bounds: BitBounds::default(),
            z_floor: 1e-12,
        }
    }

    fn check(&self) -> Result<(), SolveError> {
        let bad = |m: String| Err(SolveError::Invalid(m));
        match self.mode {
            SolveMode::ErrorBounded { tolerance } if !(tolerance > 0.0 && tolerance.is_finite()) => {
                return bad(format!("error tolerance {tolerance} must be positive"))
            }
            SolveMode::MemoryBounded { rate } if !(rate > 0.0 && rate < 1.0) => {
                return bad(format!("compression rate {rate} must lie in (0, 1)"))
            }
            _ => {}
        }
        if !self.z.is_finite() {
            return bad("reference z is not finite".into());
        }
        if !(self.z_floor > 0.0) {
            return bad("z_floor must be positive".into());
        }
        if self.bounds.min > self.bounds.max || self.bounds.max > crate::qtypes::MAX_FRACTION_BITS {
            return bad(format!("bit bounds [{}, {}] are invalid", self.bounds.min, self.bounds.max));
        }
        for q in &self.quantities {
            if !(q.range > 0.0 && q.range.is_finite()) {
                return bad(format!("quantity `{}` has range {}", q.name, q.range));
            }
            if !(q.gradient >= 0.0 && q.gradient.is_finite()) {
                return bad(format!("quantity `{}` has gradient tally {}", q.name, q.gradient));
            }
        }
        Ok(())
    }

    fn active(&self) -> impl Iterator<Item = (usize, &QuantityInput)> {
        self.quantities
            .iter()
            .enumerate()
            .filter(|(_, q)| q.gradient > 0.0 && q.count > 0)
    }

    fn scheme(&self, bits: &[u32], warnings: Vec<String>) -> QuantScheme {
        let entries = self
            .quantities
            .iter()
            .zip(bits)
            .map(|(q, &b)| SchemeEntry {
                name: q.name.clone(),
                count: q.count,
                fraction_bits: b,
                range: q.range,
                gradient: q.gradient,
            })
            .collect();
        let mut s = QuantScheme::from_entries(entries, self.z);
        s.mode = Some(self.mode);
        s.reference_bits = self.reference_bits;
        s.warnings = warnings;
        s
    }
}

/// Solver inputs for `names`, with ranges from a reference run and
/// sensitivities from a tally.
pub fn quantity_inputs(names: &[String], reference: &RunReport, tally: &GradientTally) -> Result<Vec<QuantityInput>, SolveError> {
    names
        .iter()
        .map(|name| {
            let h = tally
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| SolveError::Invalid(format!("no gradient tally for `{name}`")))?;
            let range = reference
                .range_of(name)
                .ok_or_else(|| SolveError::Invalid(format!("no range for `{name}`")))?;
            Ok(QuantityInput {
                name: name.clone(),
                count: tally.counts[h],
                range,
                gradient: tally.sums[h],
            })
        })
        .collect()
}

/// `sqrt(Σ Δ_h² g_h / 12)` over `(Δ_h, g_h)` pairs.
pub fn predict_error_terms(terms: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    (terms.into_iter().map(|(d, g)| d * d * g).sum::<f64>() / 12.0).sqrt()
}

pub fn predict_error(scheme: &QuantScheme) -> f64 {
    scheme.sigma_pred()
}

/// Unrounded resolutions of the error-bounded closed form; `None` for
/// quantities with no sensitivity.
pub fn continuous_error_bounded(req: &SolverRequest) -> Vec<Option<f64>> {
    let tolerance = match req.mode {
        SolveMode::ErrorBounded { tolerance } => tolerance,
        SolveMode::MemoryBounded { .. } => panic!("error-bounded resolutions need an error tolerance"),
    };
    let target = tolerance * req.z.abs().max(req.z_floor);
    let total: f64 = req.active().map(|(_, q)| q.count as f64).sum();
    req.quantities
        .iter()
        .map(|q| {
            (q.gradient > 0.0 && q.count > 0)
                .then(|| (12.0 * q.count as f64 * target * target / (q.gradient * total)).sqrt())
        })
        .collect()
}

fn bits_for(range: f64, delta: f64) -> f64 {
    (range / delta).log2()
}

pub fn solve_error_bounded(req: &SolverRequest) -> Result<QuantScheme, SolveError> {
    req.check()?;
    if !matches!(req.mode, SolveMode::ErrorBounded { .. }) {
        return Err(SolveError::Invalid("request is not error-bounded".into()));
    }
    let mut warnings = Vec::new();
    if req.active().next().is_none() {
        warnings.push("all gradient tallies are zero; every quantity gets the minimum bit count".into());
    }
    let mut clamped_high = Vec::new();
    let bits: Vec<u32> = continuous_error_bounded(req)
        .into_iter()
        .zip(&req.quantities)
        .map(|(delta, q)| match delta {
            None => req.bounds.min,
            Some(d) => {
                let raw = bits_for(q.range, d).ceil();
                if raw > req.bounds.max as f64 {
                    clamped_high.push(q.name.clone());
                }
                req.bounds.clamp(raw.clamp(-1e6, 1e6) as i64)
            }
        })
        .collect();
    if !clamped_high.is_empty() {
        warnings.push(format!(
            "bits capped at {} for {}; the error bound may not hold",
            req.bounds.max,
            clamped_high.join(", ")
        ));
    }
    Ok(req.scheme(&bits, warnings))
}

/// Physical-bit budget `⌊ε_mem · M⌋`.
pub fn memory_budget(req: &SolverRequest) -> u64 {
    let rate = match req.mode {
        SolveMode::MemoryBounded { rate } => rate,
        SolveMode::ErrorBounded { .. } => panic!("memory budget needs a compression rate"),
    };
    let elements: u64 = req.quantities.iter().map(|q| q.count as u64).sum();
    (rate * (req.reference_bits as u64 * elements) as f64).floor() as u64
}

/// Continuous optimum of `Σ Δ_h² g_h` subject to `Σ P_h b_h = budget` with
/// `b_h` boxed to the bounds, over active quantities only. Returns
/// unrounded bits (`NaN` for inactive entries).
pub fn continuous_memory_bounded(quantities: &[QuantityInput], budget: f64, bounds: BitBounds) -> Vec<f64> {
    let (lo, hi) = (bounds.min as f64, bounds.max as f64);
    let active: Vec<usize> = (0..quantities.len())
        .filter(|&h| quantities[h].gradient > 0.0 && quantities[h].count > 0)
        .collect();
    // b_h(L) = log2 R_h − ½ log2(P_h / g_h) − L with L = log2 c
    let anchor: Vec<f64> = quantities
        .iter()
        .map(|q| q.range.log2() - 0.5 * (q.count as f64 / q.gradient).log2())
        .collect();
    let used = |l: f64| -> f64 {
        active
            .iter()
            .map(|&h| quantities[h].count as f64 * (anchor[h] - l).clamp(lo, hi))
            .sum()
    };
    let mut out = vec![f64::NAN; quantities.len()];
    if active.is_empty() {
        return out;
    }
    let (mut a, mut b) = (
        active.iter().map(|&h| anchor[h]).fold(f64::INFINITY, f64::min) - hi - 1.0,
        active.iter().map(|&h| anchor[h]).fold(f64::NEG_INFINITY, f64::max) - lo + 1.0,
    );
    if used(a) <= budget {
        for &h in &active {
            out[h] = hi;
        }
        return out;
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if used(m) > budget {
            a = m;
        } else {
            b = m;
        }
    }
    // exact closed form over the quantities left strictly inside the box
    let l = 0.5 * (a + b);
    let (mut fixed_bits, mut free_p, mut free_anchor) = (0.0, 0.0, 0.0);
    let mut free = Vec::new();
    for &h in &active {
        let p = quantities[h].count as f64;
        let raw = anchor[h] - l;
        if raw <= lo {
            out[h] = lo;
            fixed_bits += p * lo;
        } else if raw >= hi {
            out[h] = hi;
            fixed_bits += p * hi;
        } else {
            free.push(h);
            free_p += p;
            free_anchor += p * anchor[h];
        }
    }
    if !free.is_empty() {
        let l_exact = (free_anchor - (budget - fixed_bits)) / free_p;
        for &h in &free {
            out[h] = (anchor[h] - l_exact).clamp(lo, hi);
        }
    }
    out
}

/// Floor of the continuous optimum under a fraction-bit budget.
pub fn solve_fraction_budget(quantities: &[QuantityInput], budget: f64, bounds: BitBounds) -> Vec<u32> {
    continuous_memory_bounded(quantities, budget, bounds)
        .into_iter()
        .map(|b| {
            if b.is_nan() {
                bounds.min
            } else {
                // guard against b landing a hair under an integer
                bounds.clamp((b + 1e-9).floor() as i64)
            }
        })
        .collect()
}

pub fn solve_memory_bounded(req: &SolverRequest) -> Result<QuantScheme, SolveError> {
    req.check()?;
    if !matches!(req.mode, SolveMode::MemoryBounded { .. }) {
        return Err(SolveError::Invalid("request is not memory-bounded".into()));
    }
    let budget = memory_budget(req);
    let needed: u64 = req
        .quantities
        .iter()
        .map(|q| q.count as u64 * (req.bounds.min as u64 + 1))
        .sum();
    if needed > budget {
        return Err(SolveError::Infeasible { needed, budget });
    }
    let mut warnings = Vec::new();
    if req.active().next().is_none() {
        warnings.push("all gradient tallies are zero; every quantity gets the minimum bit count".into());
    }
    let sign_bits: u64 = req.quantities.iter().map(|q| q.count as u64).sum();
    let inactive: u64 = req
        .quantities
        .iter()
        .filter(|q| q.gradient <= 0.0)
        .map(|q| q.count as u64 * req.bounds.min as u64)
        .sum();
    let fraction_budget = (budget - sign_bits - inactive) as f64;
    let mut bits = solve_fraction_budget(&req.quantities, fraction_budget, req.bounds);
    // flooring can only shrink usage, but the 1e-9 guard may tip an entry up
    let physical = |bits: &[u32]| -> u64 {
        req.quantities
            .iter()
            .zip(bits)
            .map(|(q, &b)| q.count as u64 * (b as u64 + 1))
            .sum()
    };
    while physical(&bits) > budget {
        let h = (0..bits.len())
            .filter(|&h| bits[h] > req.bounds.min)
            .max_by_key(|&h| req.quantities[h].count)
            .expect("budget covers minimum precision");
        bits[h] -= 1;
    }
    Ok(req.scheme(&bits, warnings))
}

pub fn solve(req: &SolverRequest) -> Result<QuantScheme, SolveError> {
    match req.mode {
        SolveMode::ErrorBounded { .. } => solve_error_bounded(req),
        SolveMode::MemoryBounded { .. } => solve_memory_bounded(req),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(name: &str, count: usize, range: f64, gradient: f64) -> QuantityInput {
        QuantityInput {
            name: name.into(),
            count,
            range,
            gradient,
        }
    }

    fn err_req(tol: f64, z: f64, qs: Vec<QuantityInput>) -> SolverRequest {
        SolverRequest::new(SolveMode::ErrorBounded { tolerance: tol }, z, qs)
    }

    #[test]
    fn predicted_error_arithmetic() {
        assert!((predict_error_terms([(0.1, 12.0)]) - 0.1).abs() < 1e-15);
        assert_eq!(predict_error_terms([(0.0, 5.0), (0.0, 1.0)]), 0.0);
    }

    #[test]
    fn single_quantity_worked_example() {
        let req = err_req(0.01, 10.0, vec![q("v", 1000, 1.0, 4.0)]);
        let delta = continuous_error_bounded(&req)[0].unwrap();
        assert!((delta - 0.03f64.sqrt()).abs() < 1e-12);
        let s = solve_error_bounded(&req).unwrap();
        assert_eq!(s.bits(), vec![3]);
        assert!(s.sigma_pred() <= 0.01 * 10.0);
    }

    #[test]
    fn four_times_the_gradient_is_one_more_bit() {
        let req = err_req(0.05, 2.0, vec![q("a", 50, 1.0, 0.3), q("b", 50, 1.0, 1.2)]);
        let d = continuous_error_bounded(&req);
        assert!((d[0].unwrap() / d[1].unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn inactive_quantities_get_minimum_bits() {
        let req = err_req(0.01, 1.0, vec![q("x", 5, 1.0, 0.0), q("v", 5, 1.0, 1.0)]);
        let s = solve_error_bounded(&req).unwrap();
        assert_eq!(s.bits()[0], 0);
        assert!(s.sigma_pred() <= 0.01);
        let all_zero = err_req(0.01, 1.0, vec![q("x", 5, 1.0, 0.0)]);
        let s = solve_error_bounded(&all_zero).unwrap();
        assert_eq!(s.bits(), vec![0]);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn near_zero_z_uses_floor() {
        let mut req = err_req(0.1, 0.0, vec![q("v", 1, 1.0, 1.0)]);
        req.z_floor = 1e-3;
        let s = solve_error_bounded(&req).unwrap();
        assert!(s.sigma_pred() <= 1e-4);
    }

    #[test]
    fn cap_at_max_bits_warns() {
        let req = err_req(1e-30, 1.0, vec![q("v", 1, 1.0, 1.0)]);
        let s = solve_error_bounded(&req).unwrap();
        assert_eq!(s.bits(), vec![56]);
        assert!(!s.warnings.is_empty());
    }

    #[test]
    fn bad_requests_rejected() {
        assert!(solve(&err_req(0.0, 1.0, vec![])).is_err());
        assert!(solve(&err_req(0.1, f64::NAN, vec![])).is_err());
        assert!(solve(&err_req(0.1, 1.0, vec![q("v", 1, 0.0, 1.0)])).is_err());
        assert!(solve(&err_req(0.1, 1.0, vec![q("v", 1, 1.0, -1.0)])).is_err());
        let mem = SolverRequest::new(SolveMode::MemoryBounded { rate: 1.5 }, 1.0, vec![]);
        assert!(solve(&mem).is_err());
    }

    #[test]
    fn symmetric_budget_splits_evenly() {
        let qs = vec![q("a", 1, 1.0, 1.0), q("b", 1, 1.0, 1.0)];
        assert_eq!(solve_fraction_budget(&qs, 20.0, BitBounds::default()), vec![10, 10]);
    }

    #[test]
    fn doubling_gradient_moves_half_a_bit() {
        let qs = vec![q("a", 3, 1.0, 1.0), q("b", 3, 1.0, 1.0)];
        let base = continuous_memory_bounded(&qs, 60.0, BitBounds::default());
        let mut doubled = qs.clone();
        doubled[1].gradient = 2.0;
        let moved = continuous_memory_bounded(&doubled, 60.0, BitBounds::default());
        let gap = (moved[1] - moved[0]) - (base[1] - base[0]);
        assert!((gap - 0.5).abs() < 1e-10);
    }

    #[test]
    fn stationarity_residual() {
        let qs = vec![q("a", 7, 2.0, 0.3), q("b", 3, 0.5, 11.0), q("c", 12, 1.0, 2.0e-2)];
        let b = continuous_memory_bounded(&qs, 200.0, BitBounds::default());
        let used: f64 = qs.iter().zip(&b).map(|(q, b)| q.count as f64 * b).sum();
        assert!((used - 200.0).abs() < 1e-9);
        // Δ_h² g_h / P_h is the same for every quantity off the bounds
        let c2: Vec<f64> = qs
            .iter()
            .zip(&b)
            .map(|(q, b)| (q.range * (-b).exp2()).powi(2) * q.gradient / q.count as f64)
            .collect();
        for c in &c2 {
            assert!((c / c2[0] - 1.0).abs() < 1e-10, "{c2:?}");
        }
    }

    #[test]
    fn box_constraints_respected() {
        let qs = vec![q("a", 1, 1.0, 1e-12), q("b", 1, 1.0, 1e12)];
        let bounds = BitBounds { min: 2, max: 20 };
        let b = continuous_memory_bounded(&qs, 15.0, bounds);
        assert_eq!(b[0], 2.0);
        assert!((b[1] - 13.0).abs() < 1e-9);
        // b is capped, the rest of the budget flows to a
        let b = continuous_memory_bounded(&qs, 24.0, bounds);
        assert!((b[0] - 4.0).abs() < 1e-9);
        assert_eq!(b[1], 20.0);
        assert_eq!(continuous_memory_bounded(&qs, 1000.0, bounds), vec![20.0, 20.0]);
    }

    #[test]
    fn memory_mode_meets_budget() {
        let qs = vec![q("p", 1000, 2.0, 5.0), q("v", 1000, 8.0, 0.01), q("F", 1000, 3.0, 0.0)];
        for rate in [0.6, 0.5, 0.4, 0.2] {
            let req = SolverRequest::new(SolveMode::MemoryBounded { rate }, 1.0, qs.clone());
            let s = solve_memory_bounded(&req).unwrap();
            assert!(s.compression_rate() <= rate, "{rate}: {}", s.compression_rate());
            assert_eq!(s.bits()[2], 0);
        }
    }

    #[test]
    fn tiny_budget_is_infeasible() {
        let req = SolverRequest::new(SolveMode::MemoryBounded { rate: 0.01 }, 1.0, vec![q("v", 10, 1.0, 1.0)]);
        assert!(matches!(solve(&req), Err(SolveError::Infeasible { .. })));
    }

    fn arb_quantities() -> impl Strategy<Value = Vec<QuantityInput>> {
        prop::collection::vec((1usize..2000, -6.0f64..6.0, -12.0f64..6.0), 1..6).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(h, (p, lr, lg))| q(&format!("q{h}"), p, lr.exp2(), lg.exp2()))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn error_bound_holds_after_ceiling(qs in arb_quantities(), tol in 1e-4f64..0.5, z in 0.01f64..100.0) {
            let s = solve_error_bounded(&err_req(tol, z, qs)).unwrap();
            if s.warnings.is_empty() {
                prop_assert!(s.sigma_pred() <= tol * z * (1.0 + 1e-12));
            }
        }

        #[test]
        fn tighter_tolerance_never_removes_bits(qs in arb_quantities(), tol in 1e-4f64..0.5, shrink in 0.01f64..1.0) {
            let loose = solve_error_bounded(&err_req(tol, 1.0, qs.clone())).unwrap();
            let tight = solve_error_bounded(&err_req(tol * shrink, 1.0, qs)).unwrap();
            for (a, b) in loose.bits().iter().zip(tight.bits()) {
                prop_assert!(b >= *a);
            }
        }

        #[test]
        fn range_scaling_leaves_resolution(qs in arb_quantities(), tol in 1e-4f64..0.5, k in -8i32..8) {
            let req = err_req(tol, 3.0, qs.clone());
            let scaled: Vec<_> = qs.iter().map(|q| QuantityInput { range: q.range * (k as f64).exp2(), ..q.clone() }).collect();
            let req2 = err_req(tol, 3.0, scaled.clone());
            let d1 = continuous_error_bounded(&req);
            let d2 = continuous_error_bounded(&req2);
            for ((a, b), (q1, q2)) in d1.iter().zip(&d2).zip(qs.iter().zip(&scaled)) {
                prop_assert_eq!(a, b);
                let shift = bits_for(q2.range, b.unwrap()) - bits_for(q1.range, a.unwrap());
                prop_assert!((shift - k as f64).abs() < 1e-9);
            }
        }

        #[test]
        fn memory_budget_is_hard(qs in arb_quantities(), rate in 0.05f64..0.95) {
            let req = SolverRequest::new(SolveMode::MemoryBounded { rate }, 1.0, qs);
            match solve_memory_bounded(&req) {
                Ok(s) => prop_assert!(s.physical_bits_total() <= memory_budget(&req)),
                Err(SolveError::Infeasible { .. }) => prop_assert!(rate * 32.0 < 1.0),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }

        #[test]
        fn smaller_budget_never_adds_bits(qs in arb_quantities(), budget in 0.0f64..500.0, shrink in 0.0f64..1.0) {
            let bounds = BitBounds::default();
            let total: f64 = qs.iter().map(|q| q.count as f64).sum();
            let big = continuous_memory_bounded(&qs, budget * total, bounds);
            let small = continuous_memory_bounded(&qs, budget * shrink * total, bounds);
            for (a, b) in big.iter().zip(&small) {
                prop_assert!(*b <= *a + 1e-9);
            }
        }
    }
}
