//! Monte Carlo validation of a scheme and perturbation studies around it.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::QuantScheme;
use crate::qtypes::StoreStats;
use crate::sims::{run, EvalKind, RunError, RunOptions, Simulator};

#[derive(Debug, Clone)]
pub struct ValidationConfig {
    pub trials: usize,
    pub seed: u64,
    /// Relative tolerance of the success window `|z − z_ref| ≤ 3 ε |z_ref|`.
    pub tolerance: f64,
    pub dither: bool,
    pub z_floor: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0,
            tolerance: 0.01,
            dither: true,
            z_floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub stream: u64,
    /// `NaN` when the trial blew up.
    pub z: f64,
    pub success: bool,
    pub stores: StoreStats,
    pub clamped: u64,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub seed: u64,
    pub z_ref: f64,
    pub tolerance: f64,
    pub sigma_pred: f64,
    pub trials: Vec<TrialResult>,
}

impl ValidationReport {
    fn finite(&self) -> impl Iterator<Item = f64> + '_ {
        self.trials.iter().map(|t| t.z).filter(|z| z.is_finite())
    }

    pub fn successes(&self) -> usize {
        self.trials.iter().filter(|t| t.success).count()
    }

    pub fn failed_non_finite(&self) -> usize {
        self.trials.iter().filter(|t| !t.z.is_finite()).count()
    }

    pub fn success_rate(&self) -> f64 {
        self.successes() as f64 / self.trials.len().max(1) as f64
    }

    pub fn mean(&self) -> f64 {
        let n = self.finite().count();
        if n == 0 {
            return f64::NAN;
        }
        self.finite().sum::<f64>() / n as f64
    }

    /// Sample standard deviation of `z` over finite trials.
    pub fn std(&self) -> f64 {
        let n = self.finite().count();
        if n < 2 {
            return f64::NAN;
        }
        let mean = self.mean();
        (self.finite().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    /// `σ_sim / σ_pred`.
    pub fn calibration(&self) -> f64 {
        self.std() / self.sigma_pred
    }

    /// Root-mean-square deviation from the reference, relative to it.
    pub fn relative_rms_error(&self) -> f64 {
        let n = self.finite().count();
        if n == 0 {
            return f64::NAN;
        }
        let ms = self.finite().map(|z| (z - self.z_ref).powi(2)).sum::<f64>() / n as f64;
        ms.sqrt() / self.z_ref.abs()
    }

    pub fn stores(&self) -> StoreStats {
        let mut all = StoreStats::default();
        for t in &self.trials {
            all.merge(&t.stores);
        }
        all
    }

    /// One row per trial, then a `#`-prefixed summary block.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,stream,z,success,stores,saturations,round_ups,round_downs,clamped\n");
        for (k, t) in self.trials.iter().enumerate() {
            let _ = writeln!(
                out,
                "{k},{},{:e},{},{},{},{},{},{}",
                t.stream, t.z, t.success, t.stores.stores, t.stores.saturations, t.stores.round_ups, t.stores.round_downs, t.clamped
            );
        }
        let s = self.stores();
        let _ = writeln!(out, "# trials = {}", self.trials.len());
        let _ = writeln!(out, "# successes = {}", self.successes());
        let _ = writeln!(out, "# non_finite = {}", self.failed_non_finite());
        let _ = writeln!(out, "# z_ref = {:e}", self.z_ref);
        let _ = writeln!(out, "# tolerance = {}", self.tolerance);
        let _ = writeln!(out, "# mean = {:e}", self.mean());
        let _ = writeln!(out, "# std = {:e}", self.std());
        let _ = writeln!(out, "# sigma_pred = {:e}", self.sigma_pred);
        let _ = writeln!(out, "# relative_rms_error = {:e}", self.relative_rms_error());
        let _ = writeln!(out, "# saturations = {}", s.saturations);
        match s.round_ratio() {
            Some(r) => {
                let _ = writeln!(out, "# round_ratio = {r}");
            }
            None => out.push_str("# round_ratio = none\n"),
        }
        out
    }
}

/// Run the quantized simulation `config.trials` times, trial `k` using dither
/// stream `k`, and score each against the scheme's reference `z`.
pub fn validate<S: Simulator>(
    sim: &S,
    steps: usize,
    kind: EvalKind,
    scheme: &QuantScheme,
    config: &ValidationConfig,
) -> Result<ValidationReport, RunError> {
    assert!(config.trials >= 1, "validation needs at least one trial");
    let z_ref = scheme.z_ref;
    let window = 3.0 * config.tolerance * z_ref.abs().max(config.z_floor);
    let mut trials = Vec::with_capacity(config.trials);
    for k in 0..config.trials {
        let options = RunOptions {
            scheme: Some(scheme),
            dither: config.dither,
            seed: config.seed,
            stream: k as u64,
            ..Default::default()
        };
        let trial = match run(sim, steps, kind, &options) {
            Ok(rep) => {
                let z = rep.z;
                TrialResult {
                    stream: k as u64,
                    z,
                    success: z.is_finite() && (z - z_ref).abs() <= window,
                    stores: rep.total_stores(),
                    clamped: rep.clamped,
                }
            }
            Err(RunError::NonFinite { .. }) => TrialResult {
                stream: k as u64,
                z: f64::NAN,
                success: false,
                stores: StoreStats::default(),
                clamped: 0,
            },
            Err(e) => return Err(e),
        };
        trials.push(trial);
    }
    Ok(ValidationReport {
        seed: config.seed,
        z_ref,
        tolerance: config.tolerance,
        sigma_pred: scheme.sigma_pred(),
        trials,
    })
}

/// A controlled change to a solved scheme.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    Unchanged,
    /// Remove `k` bits from every quantity.
    RemoveAll(u32),
    /// Remove `k` bits from a random half of the quantities.
    RemoveRandomHalf { bits: u32, seed: u64 },
    /// Move `k` bits from quantities whose name starts with `from` to those
    /// starting with `to`.
    Move { from: String, to: String, bits: u32 },
    AddAll(u32),
}

impl Perturbation {
    pub fn label(&self) -> String {
        match self {
            Perturbation::Unchanged => "baseline".into(),
            Perturbation::RemoveAll(k) => format!("all -{k}"),
            Perturbation::RemoveRandomHalf { bits, seed } => format!("half -{bits} (seed {seed})"),
            Perturbation::Move { from, to, bits } => format!("move {bits} {from}->{to}"),
            Perturbation::AddAll(k) => format!("all +{k}"),
        }
    }

    pub fn apply(&self, scheme: &QuantScheme) -> QuantScheme {
        let mut bits = scheme.bits();
        let max = crate::qtypes::MAX_FRACTION_BITS;
        match self {
            Perturbation::Unchanged => {}
            Perturbation::RemoveAll(k) => bits.iter_mut().for_each(|b| *b = b.saturating_sub(*k)),
            Perturbation::RemoveRandomHalf { bits: k, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let n = bits.len();
                for h in sample(&mut rng, n, n / 2) {
                    bits[h] = bits[h].saturating_sub(*k);
                }
            }
            Perturbation::Move { from, to, bits: k } => {
                for (b, e) in bits.iter_mut().zip(&scheme.entries) {
                    if e.name.starts_with(from.as_str()) {
                        *b = b.saturating_sub(*k);
                    } else if e.name.starts_with(to.as_str()) {
                        *b = (*b + k).min(max);
                    }
                }
            }
            Perturbation::AddAll(k) => bits.iter_mut().for_each(|b| *b = (*b + k).min(max)),
        }
        scheme.with_bits(&bits)
    }
}

#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub label: String,
    pub fraction_bits_total: u64,
    pub sigma_pred: f64,
    pub successes: usize,
    pub trials: usize,
}

impl ProbeRow {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.trials.max(1) as f64
    }
}

/// Validate the scheme under each perturbation with the same trial streams.
pub fn optimality_probe<S: Simulator>(
    sim: &S,
    steps: usize,
    kind: EvalKind,
    scheme: &QuantScheme,
    perturbations: &[Perturbation],
    config: &ValidationConfig,
) -> Result<Vec<ProbeRow>, RunError> {
    perturbations
        .iter()
        .map(|p| {
            let s = p.apply(scheme);
            let rep = validate(sim, steps, kind, &s, config)?;
            Ok(ProbeRow {
                label: p.label(),
                fraction_bits_total: s.fraction_bits_total(),
                sigma_pred: s.sigma_pred(),
                successes: rep.successes(),
                trials: rep.trials.len(),
            })
        })
        .collect()
}

pub fn probe_table(rows: &[ProbeRow]) -> String {
    let mut out = String::from("perturbation,fraction_bits,sigma_pred,successes,trials\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:e},{},{}",
            r.label, r.fraction_bits_total, r.sigma_pred, r.successes, r.trials
        );
    }
    out
}


#[cfg(test)]
mod dither_variance {
    use super::*;
    use crate::quantizer::SchemeEntry;
    use crate::sims::{FreeFall, FreeFallParams};

    // In free fall every stored velocity sits on the grid, so each step adds the
    // same offset Y = frac(g dt / delta) and non-subtractive dither contributes
    // Y(1 - Y) delta^2 per store rather than the uniform-average delta^2 / 12.
    #[test]
    fn free_fall_spread_matches_exact_oracle() {
        let (dt, gravity, steps) = (0.01, -9.81, 50);
        let v0 = [0.3, 0.1, -0.2, 0.5];
        let sim = FreeFall::new(FreeFallParams { dt, gravity, stiffness: 0.0 }, vec![0.0; 4], v0.to_vec());
        let reference = run(&sim, steps, EvalKind::FinalKineticEnergy, &RunOptions::default()).unwrap();
        let entry = |name: &str, bits| SchemeEntry {
            name: name.into(),
            count: 4,
            fraction_bits: bits,
            range: reference.range_of(name).unwrap(),
            gradient: 1.0,
        };
        let scheme = QuantScheme::from_entries(vec![entry("x", 40), entry("v", 8)], reference.z);
        let delta = scheme.entry("v").unwrap().resolution();
        let frac = |a: f64| a - a.floor();
        let y = frac(gravity * dt / delta);
        assert!((0.05..0.95).contains(&y), "offset {y} too close to the grid");

        let v_final = &reference.final_state[4..];
        let variance: f64 = v0
            .iter()
            .zip(v_final)
            .map(|(&a, &vt)| {
                let y0 = frac(a / delta);
                vt * vt * delta * delta * (y0 * (1.0 - y0) + steps as f64 * y * (1.0 - y))
            })
            .sum();
        let cfg = ValidationConfig {
            trials: 600,
            seed: 11,
            ..Default::default()
        };
        let rep = validate(&sim, steps, EvalKind::FinalKineticEnergy, &scheme, &cfg).unwrap();
        let ratio = rep.std() / variance.sqrt();
        assert!((ratio - 1.0).abs() < 0.15, "sigma_sim / sigma_oracle = {ratio}");
    }
}
