use serde::{Deserialize, Serialize};

use super::{predict_error_terms, SolveError, SolveMode};
use crate::qtypes::{QuantError, QuantSpec};

/// Bits, range and sensitivity of one quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeEntry {
    pub name: String,
    #[serde(rename = "element_count")]
    pub count: usize,
    pub fraction_bits: u32,
    pub range: f64,
    /// `g_h` from the reverse sweep.
    pub gradient: f64,
}

impl SchemeEntry {
    pub fn spec(&self) -> Result<QuantSpec, QuantError> {
        QuantSpec::new(self.fraction_bits, self.range)
    }

    pub fn resolution(&self) -> f64 {
        self.range * (-(self.fraction_bits as f64)).exp2()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantScheme {
    pub entries: Vec<SchemeEntry>,
    pub z_ref: f64,
    pub mode: Option<SolveMode>,
    /// Bits per element of the unquantized reference storage.
    pub reference_bits: u32,
    pub seed: u64,
    pub safety_factor: f64,
    pub config_hash: String,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemeFile {
    config_hash: String,
    seed: u64,
    safety_factor: f64,
    z_ref: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tolerance: Option<f64>,
    reference_bits: u32,
    sigma_pred: f64,
    fraction_bits_total: u64,
    physical_bits_total: u64,
    compression_rate: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
    #[serde(rename = "quantity")]
    quantities: Vec<SchemeEntry>,
}

impl QuantScheme {
    pub fn from_entries(entries: Vec<SchemeEntry>, z_ref: f64) -> Self {
        Self {
            entries,
            z_ref,
            mode: None,
            reference_bits: 32,
            seed: 0,
            safety_factor: 2.0,
            config_hash: String::new(),
            warnings: Vec::new(),
        }
    }

    pub fn entry(&self, name: &str) -> Option<&SchemeEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn bits(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.fraction_bits).collect()
    }

    /// `Σ P_h b_h`.
    pub fn fraction_bits_total(&self) -> u64 {
        self.entries.iter().map(|e| e.count as u64 * e.fraction_bits as u64).sum()
    }

    /// `Σ P_h (b_h + 1)`, sign bits included.
    pub fn physical_bits_total(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| e.count as u64 * (e.fraction_bits as u64 + 1))
            .sum()
    }

    pub fn reference_memory(&self) -> u64 {
        self.reference_bits as u64 * self.entries.iter().map(|e| e.count as u64).sum::<u64>()
    }

    /// Physical bits over reference bits.
    pub fn compression_rate(&self) -> f64 {
        let m = self.reference_memory();
        if m == 0 {
            0.0
        } else {
            self.physical_bits_total() as f64 / m as f64
        }
    }

    /// `sqrt(Σ Δ_h² g_h / 12)`.
    pub fn sigma_pred(&self) -> f64 {
        predict_error_terms(self.entries.iter().map(|e| (e.resolution(), e.gradient)))
    }

    /// Same scheme with bits replaced, e.g. for perturbation studies.
    pub fn with_bits(&self, bits: &[u32]) -> Self {
        assert_eq!(bits.len(), self.entries.len());
        let mut out = self.clone();
        for (e, &b) in out.entries.iter_mut().zip(bits) {
            e.fraction_bits = b;
        }
        out
    }

    pub fn to_toml(&self) -> String {
        let (mode, tolerance) = match self.mode {
            Some(SolveMode::ErrorBounded { tolerance }) => (Some("error_bounded".to_string()), Some(tolerance)),
            Some(SolveMode::MemoryBounded { rate }) => (Some("memory_bounded".to_string()), Some(rate)),
            None => (None, None),
        };
        let file = SchemeFile {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            safety_factor: self.safety_factor,
            z_ref: self.z_ref,
            mode,
            tolerance,
            reference_bits: self.reference_bits,
            sigma_pred: self.sigma_pred(),
            fraction_bits_total: self.fraction_bits_total(),
            physical_bits_total: self.physical_bits_total(),
            compression_rate: self.compression_rate(),
            warnings: self.warnings.clone(),
            quantities: self.entries.clone(),
        };
        toml::to_string(&file).expect("scheme serializes")
    }

    /// Parse a scheme file. Derived totals in the file are ignored and
    /// recomputed.
    pub fn from_toml(text: &str) -> Result<Self, SolveError> {
        let file: SchemeFile = toml::from_str(text).map_err(|e| SolveError::Invalid(e.to_string()))?;
        let mode = match (file.mode.as_deref(), file.tolerance) {
            (None, _) => None,
            (Some("error_bounded"), Some(tolerance)) => Some(SolveMode::ErrorBounded { tolerance }),
            (Some("memory_bounded"), Some(rate)) => Some(SolveMode::MemoryBounded { rate }),
            (Some(other), _) => return Err(SolveError::Invalid(format!("bad scheme mode `{other}`"))),
        };
        for e in &file.quantities {
            e.spec().map_err(|err| SolveError::Invalid(format!("quantity `{}`: {err}", e.name)))?;
        }
        Ok(Self {
            entries: file.quantities,
            z_ref: file.z_ref,
            mode,
            reference_bits: file.reference_bits,
            seed: file.seed,
            safety_factor: file.safety_factor,
            config_hash: file.config_hash,
            warnings: file.warnings,
        })
    }
}
