//! Scene files: which simulator, its parameters, horizon and evaluation.
//!
//! ```toml
//! steps = 512
//! dt = 2e-4
//! seed = 7
//! evaluation = "final_kinetic_energy"
//! quantized = ["p.x", "p.y"]   # optional, defaults to every quantity
//!
//! [model]
//! kind = "mpm"
//! grid_res = 64
//! [[model.blocks]]
//! origin = [0.2, 0.3]
//! size = [0.1, 0.1]
//! particles = [16, 16]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Block, EvalKind, FreeFall, FreeFallParams, Mpm, MpmParams, Simulator, StepDiagnostics};
use crate::adjoint::Real;
use crate::quantity::QuantityDescriptor;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scene: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub steps: usize,
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    pub evaluation: EvalKind,
    #[serde(default)]
    pub quantized: Option<Vec<String>>,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Freefall(FreeFallConfig),
    Mpm(MpmConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeFallConfig {
    #[serde(default = "one")]
    pub particles: usize,
    pub gravity: f64,
    #[serde(default)]
    pub stiffness: f64,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub v0: f64,
    /// Initial velocities spread evenly over `v0 ± spread / 2`.
    #[serde(default)]
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpmConfig {
    pub grid_res: usize,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 2],
    pub youngs_modulus: f64,
    #[serde(default = "default_poisson")]
    pub poisson_ratio: f64,
    #[serde(default = "one_f")]
    pub density: f64,
    #[serde(default = "yes")]
    pub boundary: bool,
    #[serde(default = "three")]
    pub bound_cells: usize,
    /// Random offset per particle, as a fraction of the lattice spacing.
    #[serde(default)]
    pub jitter: f64,
    pub blocks: Vec<BlockConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub origin: [f64; 2],
    pub size: [f64; 2],
    pub particles: [usize; 2],
    #[serde(default)]
    pub velocity: [f64; 2],
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn three() -> usize {
    3
}
fn yes() -> bool {
    true
}
fn default_gravity() -> [f64; 2] {
    [0.0, -9.8]
}
fn default_poisson() -> f64 {
    0.2
}

fn invalid(msg: impl Into<String>) -> SceneError {
    SceneError::Invalid(msg.into())
}

impl SceneConfig {
    pub fn from_toml(text: &str) -> Result<Self, SceneError> {
        let config: SceneConfig = toml::from_str(text)?;
        config.check()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene config serializes")
    }

    fn check(&self) -> Result<(), SceneError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(invalid("dt must be positive"));
        }
        match &self.model {
            ModelConfig::Freefall(f) => {
                if f.particles == 0 {
                    return Err(invalid("free fall needs at least one particle"));
                }
                let all = [f.gravity, f.stiffness, f.x0, f.v0, f.spread];
                if all.iter().any(|v| !v.is_finite()) || f.stiffness < 0.0 {
                    return Err(invalid("free fall parameters must be finite, stiffness nonnegative"));
                }
            }
            ModelConfig::Mpm(m) => {
                if m.grid_res < 2 * m.bound_cells + 4 {
                    return Err(invalid(format!("grid_res {} too small", m.grid_res)));
                }
                if !(m.youngs_modulus > 0.0 && m.density > 0.0) {
                    return Err(invalid("youngs_modulus and density must be positive"));
                }
                if !(m.poisson_ratio > -1.0 && m.poisson_ratio < 0.5) {
                    return Err(invalid("poisson_ratio must lie in (-1, 0.5)"));
                }
                if !(0.0..0.5).contains(&m.jitter) {
                    return Err(invalid("jitter must lie in [0, 0.5)"));
                }
                if m.blocks.is_empty() {
                    return Err(invalid("mpm scene needs at least one block"));
                }
                let dx = 1.0 / m.grid_res as f64;
                let (lo, hi) = (dx, 1.0 - 2.0 * dx);
                for (k, b) in m.blocks.iter().enumerate() {
                    if b.particles[0] == 0 || b.particles[1] == 0 {
                        return Err(invalid(format!("block {k} has no particles")));
                    }
                    for a in 0..2 {
                        if b.origin[a] < lo || b.origin[a] + b.size[a] > hi || b.size[a] <= 0.0 {
                            return Err(invalid(format!("block {k} lies outside the domain")));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// A built scene, dispatching to the configured simulator.
#[derive(Debug, Clone)]
pub enum Scene {
    FreeFall(FreeFall),
    Mpm(Mpm),
}

impl Scene {
    pub fn build(config: &SceneConfig) -> Result<Self, SceneError> {
        config.check()?;
        let scene = match &config.model {
            ModelConfig::Freefall(f) => {
                let n = f.particles;
                let velocities = (0..n)
                    .map(|i| {
                        let u = if n > 1 { i as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
                        f.v0 + f.spread * u
                    })
                    .collect();
                Scene::FreeFall(FreeFall::new(
                    FreeFallParams {
                        dt: config.dt,
                        gravity: f.gravity,
                        stiffness: f.stiffness,
                    },
                    vec![f.x0; n],
                    velocities,
                ))
            }
            ModelConfig::Mpm(m) => {
                let params = MpmParams {
                    grid_res: m.grid_res,
                    dt: config.dt,
                    gravity: m.gravity,
                    youngs_modulus: m.youngs_modulus,
                    poisson_ratio: m.poisson_ratio,
                    density: m.density,
                    boundary: m.boundary,
                    bound_cells: m.bound_cells,
                };
                let blocks: Vec<Block> = m
                    .blocks
                    .iter()
                    .map(|b| Block {
                        origin: b.origin,
                        size: b.size,
                        particles: b.particles,
                        velocity: b.velocity,
                    })
                    .collect();
                if m.jitter > 0.0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    let mut positions = Vec::new();
                    let mut velocities = Vec::new();
                    for b in &blocks {
                        let h = [b.size[0] / b.particles[0] as f64, b.size[1] / b.particles[1] as f64];
                        for i in 0..b.particles[0] {
                            for j in 0..b.particles[1] {
                                let jx = rng.gen_range(-m.jitter..=m.jitter);
                                let jy = rng.gen_range(-m.jitter..=m.jitter);
                                positions.push([
                                    b.origin[0] + (i as f64 + 0.5 + jx) * h[0],
                                    b.origin[1] + (j as f64 + 0.5 + jy) * h[1],
                                ]);
                                velocities.push(b.velocity);
                            }
                        }
                    }
                    Scene::Mpm(Mpm::new(params, &positions, &velocities))
                } else {
                    Scene::Mpm(Mpm::from_blocks(params, &blocks))
                }
            }
        };
        if let Some(names) = &config.quantized {
            for name in names {
                if !scene.quantities().iter().any(|q| &q.name == name) {
                    return Err(invalid(format!("unknown quantity `{name}` in quantized list")));
                }
            }
        }
        Ok(scene)
    }

    /// Quantities the scene asks to quantize.
    pub fn quantized_names(&self, config: &SceneConfig) -> Vec<String> {
        match &config.quantized {
            Some(names) => names.clone(),
            None => self.quantities().iter().map(|q| q.name.clone()).collect(),
        }
    }
}

impl Simulator for Scene {
    fn quantities(&self) -> &[QuantityDescriptor] {
        match self {
            Scene::FreeFall(s) => s.quantities(),
            Scene::Mpm(s) => s.quantities(),
        }
    }

    fn initial_state(&self) -> Vec<f64> {
        match self {
            Scene::FreeFall(s) => s.initial_state(),
            Scene::Mpm(s) => s.initial_state(),
        }
    }

    fn step<R: Real>(&self, state: &[R], diag: &mut StepDiagnostics) -> Vec<R> {
        match self {
            Scene::FreeFall(s) => s.step(state, diag),
            Scene::Mpm(s) => s.step(state, diag),
        }
    }

    fn evaluate<R: Real>(&self, kind: EvalKind, state: &[R]) -> R {
        match self {
            Scene::FreeFall(s) => s.evaluate(kind, state),
            Scene::Mpm(s) => s.evaluate(kind, state),
        }
    }
}
