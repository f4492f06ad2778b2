use serde::{Deserialize, Serialize};

/// Where a quantity lives in the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Particle,
    Grid,
}

/// One scalar attribute component shared by `count` elements, occupying
/// `state[offset..offset + count]` of the flattened state vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantityDescriptor {
    pub name: String,
    pub count: usize,
    pub offset: usize,
    pub role: Role,
}

impl QuantityDescriptor {
    pub fn span(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.count
    }
}

/// Lay out quantities back to back in the given order.
pub fn contiguous_layout<S: AsRef<str>>(names: &[S], count: usize, role: Role) -> Vec<QuantityDescriptor> {
    names
        .iter()
        .enumerate()
        .map(|(k, name)| QuantityDescriptor {
            name: name.as_ref().to_string(),
            count,
            offset: k * count,
            role,
        })
        .collect()
}

pub fn state_len(quantities: &[QuantityDescriptor]) -> usize {
    quantities.iter().map(|q| q.offset + q.count).max().unwrap_or(0)
}
