use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use quantsim::quantizer::SolveMode;
use quantsim::sims::{Scene, SceneConfig};

use crate::CliError;

/// Environment variable that relocates every output directory.
pub const OUTPUT_ROOT_VAR: &str = "QUANTSIM_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModeKind {
    ErrorBounded,
    MemoryBounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Checkpointing {
    Full,
    Bisection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "three")]
    pub remove_bits: u32,
    #[serde(default = "one")]
    pub add_bits: u32,
    #[serde(default)]
    pub half_seed: u64,
    /// Pairs of name prefixes; one bit moves from the first to the second.
    #[serde(default = "default_moves")]
    pub moves: Vec<[String; 2]>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            remove_bits: 3,
            add_bits: 1,
            half_seed: 0,
            moves: default_moves(),
        }
    }
}

fn three() -> u32 {
    3
}
fn one() -> u32 {
    1
}
fn default_moves() -> Vec<[String; 2]> {
    vec![["p".into(), "v".into()], ["C".into(), "F".into()]]
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    /// Scene file, relative to this file.
    pub scene: PathBuf,
    /// Output directory, relative to the output root.
    pub output: PathBuf,
    pub mode: ModeKind,
    #[serde(default = "default_tolerance")]
    pub error_tolerance: f64,
    #[serde(default = "default_rate")]
    pub memory_rate: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Validation seed; defaults to the scene seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_checkpointing")]
    pub checkpointing: Checkpointing,
    #[serde(default = "yes")]
    pub dither: bool,
    /// Fraction of validation trials that must succeed.
    #[serde(default = "default_threshold")]
    pub success_threshold: f64,
    #[serde(default = "default_reference_bits")]
    pub reference_bits: u32,
    #[serde(default = "default_safety")]
    pub safety_factor: f64,
    #[serde(default = "default_min_range")]
    pub min_range: f64,
    #[serde(default = "default_z_floor")]
    pub z_floor: f64,
    #[serde(default)]
    pub probe: ProbeConfig,
}

fn default_tolerance() -> f64 {
    0.01
}
fn default_rate() -> f64 {
    0.5
}
fn default_trials() -> usize {
    20
}
fn default_checkpointing() -> Checkpointing {
    Checkpointing::Bisection
}
fn default_threshold() -> f64 {
    0.8
}
fn default_reference_bits() -> u32 {
    32
}
fn default_safety() -> f64 {
    2.0
}
fn default_min_range() -> f64 {
    1.0
}
fn default_z_floor() -> f64 {
    1e-12
}

/// Everything a command needs: the parsed files, where to write, and the
/// hash that ties artifacts to their inputs.
pub struct Project {
    pub config: ProjectConfig,
    pub scene_config: SceneConfig,
    pub scene: Scene,
    pub out_dir: PathBuf,
    pub hash: String,
}

impl ProjectConfig {
    fn check(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Invalid(m.to_string()));
        if !(self.error_tolerance > 0.0 && self.error_tolerance.is_finite()) {
            return bad("error_tolerance must be positive");
        }
        if !(self.memory_rate > 0.0 && self.memory_rate < 1.0) {
            return bad("memory_rate must lie in (0, 1)");
        }
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.success_threshold) {
            return bad("success_threshold must lie in [0, 1]");
        }
        if self.reference_bits != 32 && self.reference_bits != 64 {
            return bad("reference_bits must be 32 or 64");
        }
        if !(self.safety_factor >= 1.0) || !(self.min_range > 0.0) || !(self.z_floor > 0.0) {
            return bad("safety_factor must be at least 1; min_range and z_floor positive");
        }
        Ok(())
    }

    pub fn solve_mode(&self) -> SolveMode {
        match self.mode {
            ModeKind::ErrorBounded => SolveMode::ErrorBounded {
                tolerance: self.error_tolerance,
            },
            ModeKind::MemoryBounded => SolveMode::MemoryBounded { rate: self.memory_rate },
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))
}

impl Project {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read(path)?;
        let config: ProjectConfig =
            toml::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        config.check()?;
        let base = path.parent().unwrap_or(Path::new("."));
        let scene_path = base.join(&config.scene);
        let scene_text = read(&scene_path)?;
        let scene_config = SceneConfig::from_toml(&scene_text)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", scene_path.display())))?;
        let scene = Scene::build(&scene_config).map_err(|e| CliError::Invalid(e.to_string()))?;

        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hasher.update([0u8]);
        hasher.update(scene_text.as_bytes());
        let hash = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();

        let root = match env::var_os(OUTPUT_ROOT_VAR) {
            Some(r) => PathBuf::from(r),
            None => base.to_path_buf(),
        };
        Ok(Self {
            out_dir: root.join(&config.output),
            config,
            scene_config,
            scene,
            hash,
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed.unwrap_or(self.scene_config.seed)
    }

    pub fn quantized(&self) -> Vec<String> {
        self.scene.quantized_names(&self.scene_config)
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }

    pub fn write(&self, file: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", self.out_dir.display())))?;
        let path = self.path(file);
        fs::write(&path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn read_artifact(&self, file: &str) -> Result<String, CliError> {
        let path = self.path(file);
        fs::read_to_string(&path).map_err(|_| {
            CliError::Invalid(format!("missing artifact {}; run the earlier pipeline stage first", path.display()))
        })
    }

    pub fn check_hash(&self, file: &str, found: &str) -> Result<(), CliError> {
        if found == self.hash {
            Ok(())
        } else {
            Err(CliError::HashMismatch {
                file: file.to_string(),
                found: found.to_string(),
                expected: self.hash.clone(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCENE: &str = "steps = 5\ndt = 0.01\nevaluation = \"final_kinetic_energy\"\n[model]\nkind = \"freefall\"\nparticles = 2\ngravity = -9.81\n";

    fn write(dir: &Path, project: &str, scene: &str) -> PathBuf {
        fs::write(dir.join("s.toml"), scene).unwrap();
        let p = dir.join("p.toml");
        fs::write(&p, project).unwrap();
        p
    }

    #[test]
    fn defaults_fill_in() {
        let dir = tempfile::tempdir().unwrap();
        let p = Project::load(&write(dir.path(), "scene = \"s.toml\"\noutput = \"o\"\nmode = \"error_bounded\"\n", SCENE)).unwrap();
        assert_eq!(p.config.trials, 20);
        assert_eq!(p.config.checkpointing, Checkpointing::Bisection);
        assert_eq!(p.seed(), 0);
        assert_eq!(p.hash.len(), 64);
    }

    #[test]
    fn hash_covers_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let project = "scene = \"s.toml\"\noutput = \"o\"\nmode = \"error_bounded\"\n";
        let a = Project::load(&write(dir.path(), project, SCENE)).unwrap().hash;
        let b = Project::load(&write(dir.path(), project, &SCENE.replace("steps = 5", "steps = 6"))).unwrap().hash;
        let c = Project::load(&write(dir.path(), &format!("{project}trials = 3\n"), SCENE)).unwrap().hash;
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(b, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = "scene = \"s.toml\"\noutput = \"o\"\nmode = \"error_bounded\"\n";
        for extra in ["colour = 1\n", "memory_rate = 1.5\n", "success_threshold = 2.0\n", "reference_bits = 16\n"] {
            let r = Project::load(&write(dir.path(), &format!("{base}{extra}"), SCENE));
            assert!(matches!(r, Err(CliError::Invalid(_))), "{extra}");
        }
    }
}
