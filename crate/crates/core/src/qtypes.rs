//! Fixed-point codes with optional dithering, and range tracking for the
//! reference run.
//!
//! A value `v` is stored as the integer `u = round(v / Δ)` where the
//! resolution is `Δ = 2^-b · R`. Codes occupy `b + 1` physical bits in two's
//! complement, so the representable interval is `[-2^b, 2^b - 1]`; values
//! outside it saturate.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest fraction-bit count a spec can carry: the code plus its sign bit
/// must fit a 64-bit word.
pub const MAX_FRACTION_BITS: u32 = 63;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("non-finite value {0} cannot be quantized")]
    NonFinite(f64),
    #[error("range must be positive and finite, got {0}")]
    InvalidRange(f64),
    #[error("{0} fraction bits exceed the supported maximum of {MAX_FRACTION_BITS}")]
    TooManyBits(u32),
    #[error("code {code} lies outside the {bits}-fraction-bit code book")]
    CodeOutOfRange { code: i64, bits: u32 },
}

/// Configured bounds on fraction bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitBounds {
    pub min: u32,
    pub max: u32,
}

impl Default for BitBounds {
    fn default() -> Self {
        Self { min: 0, max: 56 }
    }
}

impl BitBounds {
    pub fn clamp(&self, bits: i64) -> u32 {
        bits.clamp(self.min as i64, self.max as i64) as u32
    }
}

/// Fraction bits and range of one fixed-point type. The resolution is always
/// derived from the two, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    fraction_bits: u32,
    range: f64,
}

/// An encoded value together with whether it had to be clamped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Code {
    pub value: i64,
    pub saturated: bool,
}

impl QuantSpec {
    pub fn new(fraction_bits: u32, range: f64) -> Result<Self, QuantError> {
        if !(range.is_finite() && range > 0.0) {
            return Err(QuantError::InvalidRange(range));
        }
        if fraction_bits > MAX_FRACTION_BITS {
            return Err(QuantError::TooManyBits(fraction_bits));
        }
        Ok(Self {
            fraction_bits,
            range,
        })
    }

    pub fn fraction_bits(&self) -> u32 {
        self.fraction_bits
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    /// `Δ = 2^-b · R`; exact since scaling by a power of two only touches
    /// the exponent.
    pub fn resolution(&self) -> f64 {
        self.range * (-(self.fraction_bits as f64)).exp2()
    }

    /// Physical storage width: fraction bits plus the sign bit.
    pub fn storage_bits(&self) -> u32 {
        self.fraction_bits + 1
    }

    pub fn min_code(&self) -> i64 {
        -(1i64 << self.fraction_bits)
    }

    pub fn max_code(&self) -> i64 {
        (1i64 << self.fraction_bits) - 1
    }

    /// Same range with a different bit count, clamped to what a code can hold.
    pub fn with_bits(&self, fraction_bits: u32) -> Self {
        Self {
            fraction_bits: fraction_bits.min(MAX_FRACTION_BITS),
            range: self.range,
        }
    }

    fn saturate(&self, rounded: f64) -> Code {
        let lo = self.min_code();
        let hi = self.max_code();
        if rounded < lo as f64 {
            Code {
                value: lo,
                saturated: true,
            }
        } else if rounded > hi as f64 {
            Code {
                value: hi,
                saturated: true,
            }
        } else {
            Code {
                value: rounded as i64,
                saturated: false,
            }
        }
    }

    /// Round to nearest, ties to even.
    pub fn encode(&self, v: f64) -> Result<Code, QuantError> {
        if !v.is_finite() {
            return Err(QuantError::NonFinite(v));
        }
        Ok(self.saturate((v / self.resolution()).round_ties_even()))
    }

    /// Non-subtractive dithered rounding: `u = ⌊v/Δ + ξ + 1/2⌋` with
    /// `ξ ~ U(-1/2, 1/2)`. The round-up probability equals the fractional
    /// part of `v/Δ`, so the decoded value is unbiased.
    pub fn encode_dithered(&self, v: f64, rng: &mut DitherRng) -> Result<Code, QuantError> {
        if !v.is_finite() {
            return Err(QuantError::NonFinite(v));
        }
        let xi = rng.next_xi();
        Ok(self.saturate((v / self.resolution() + xi + 0.5).floor()))
    }

    pub fn decode(&self, code: i64) -> f64 {
        code as f64 * self.resolution()
    }

    /// Like [`decode`](Self::decode) but rejects codes outside the code book.
    pub fn decode_checked(&self, code: i64) -> Result<f64, QuantError> {
        if code < self.min_code() || code > self.max_code() {
            return Err(QuantError::CodeOutOfRange {
                code,
                bits: self.fraction_bits,
            });
        }
        Ok(self.decode(code))
    }
}

/// Counter-based source of dither noise. The value drawn at
/// `(seed, stream, counter)` is a pure function of that triple, so quantized
/// runs need no stored noise and independent trials use distinct streams.
#[derive(Debug, Clone)]
pub struct DitherRng {
    seed: u64,
    stream: u64,
    counter: u64,
    core: ChaCha8Rng,
}

impl DitherRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(seed);
        core.set_stream(stream);
        Self {
            seed,
            stream,
            counter: 0,
            core,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Jump to an absolute counter position.
    pub fn seek(&mut self, counter: u64) {
        // each draw consumes two 32-bit words of the keystream
        self.core.set_word_pos(counter as u128 * 2);
        self.counter = counter;
    }

    /// Draw `ξ` in `[-1/2, 1/2)` and advance the counter.
    pub fn next_xi(&mut self) -> f64 {
        let bits = self.core.next_u64() >> 11;
        self.counter += 1;
        bits as f64 * (1.0 / (1u64 << 53) as f64) - 0.5
    }

    /// The noise value at `counter` without disturbing this generator.
    pub fn xi_at(&self, counter: u64) -> f64 {
        let mut probe = Self::new(self.seed, self.stream);
        probe.seek(counter);
        probe.next_xi()
    }
}

/// Running `sup |x|` of one quantity over a reference run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeTracker {
    max_abs: f64,
    safety_factor: f64,
    min_range: f64,
}

impl Default for RangeTracker {
    fn default() -> Self {
        Self::new(2.0, 1.0)
    }
}

impl RangeTracker {
    pub fn new(safety_factor: f64, min_range: f64) -> Self {
        assert!(safety_factor >= 1.0, "safety factor must be at least 1");
        assert!(min_range > 0.0, "fallback range must be positive");
        Self {
            max_abs: 0.0,
            safety_factor,
            min_range,
        }
    }

    pub fn observe(&mut self, v: f64) -> Result<(), QuantError> {
        if !v.is_finite() {
            return Err(QuantError::NonFinite(v));
        }
        self.max_abs = self.max_abs.max(v.abs());
        Ok(())
    }

    pub fn observe_all(&mut self, values: &[f64]) -> Result<(), QuantError> {
        values.iter().try_for_each(|&v| self.observe(v))
    }

    /// Per-thread trackers combine losslessly.
    pub fn merge(&mut self, other: &RangeTracker) {
        self.max_abs = self.max_abs.max(other.max_abs);
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }

    pub fn safety_factor(&self) -> f64 {
        self.safety_factor
    }

    /// `safety_factor · sup|x|`, or the fallback when nothing nonzero was seen.
    pub fn range(&self) -> f64 {
        if self.max_abs > 0.0 {
            self.safety_factor * self.max_abs
        } else {
            self.min_range
        }
    }
}

/// Store-side counters: saturations and the direction of every rounding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub stores: u64,
    pub saturations: u64,
    pub round_ups: u64,
    pub round_downs: u64,
}

impl StoreStats {
    /// Record a store of `v` that produced `code`.
    pub fn record(&mut self, v: f64, spec: &QuantSpec, code: Code) {
        self.stores += 1;
        if code.saturated {
            self.saturations += 1;
            return;
        }
        let scaled = v / spec.resolution();
        let u = code.value as f64;
        if u > scaled {
            self.round_ups += 1;
        } else if u < scaled {
            self.round_downs += 1;
        }
    }

    pub fn merge(&mut self, other: &StoreStats) {
        self.stores += other.stores;
        self.saturations += other.saturations;
        self.round_ups += other.round_ups;
        self.round_downs += other.round_downs;
    }

    /// Round-ups over round-downs; `None` when nothing was rounded down.
    pub fn round_ratio(&self) -> Option<f64> {
        (self.round_downs > 0).then(|| self.round_ups as f64 / self.round_downs as f64)
    }

    pub fn saturation_rate(&self) -> f64 {
        if self.stores == 0 {
            0.0
        } else {
            self.saturations as f64 / self.stores as f64
        }
    }
}
