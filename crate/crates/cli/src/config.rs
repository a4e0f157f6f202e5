//! Run configuration: defaults, then the `--config` file, then `--set`
//! overrides, then `--seed`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use stainalign::eval::{FewShotProtocol, ProbeConfig, SurvivalProtocol};
use stainalign::{ContrastiveConfig, EncoderConfig, GotConfig, PretrainConfig, RankMeConfig, SyntheticConfig, TrainConfig};

use crate::failure::{CliResult, Failure};

pub const RESOLVED_CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Bundle directory read by `pretrain` and `embed`.
    pub dataset: Option<PathBuf>,
    /// Checkpoint directory, or a run directory holding `best.json`.
    pub checkpoint: Option<PathBuf>,
    /// Embedding CSV read by `eval`.
    pub embeddings: Option<PathBuf>,
    /// Label CSV read by `eval`.
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Also write per-patch attention weights.
    pub attention: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { attention: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Label columns to evaluate; empty means every label column.
    pub tasks: Vec<String>,
    pub ks: Vec<usize>,
    pub n_repeats: usize,
    pub seed: u64,
    /// Stain whose embeddings are evaluated; defaults to the first stain in
    /// the embedding file.
    pub stain: Option<String>,
    pub probe: ProbeConfig,
    pub survival: bool,
    pub survival_protocol: SurvivalProtocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            ks: vec![1, 5, 10, 25],
            n_repeats: 10,
            seed: 0,
            stain: None,
            probe: ProbeConfig::default(),
            survival: false,
            survival_protocol: SurvivalProtocol::default(),
        }
    }
}

impl EvalConfig {
    pub fn protocol(&self, k: usize) -> FewShotProtocol {
        FewShotProtocol { k, n_repeats: self.n_repeats, seed: self.seed }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub contrastive: ContrastiveConfig,
    pub got: GotConfig,
    pub rankme: RankMeConfig,
    pub synthetic: SyntheticConfig,
    pub embed: EmbedConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            encoder: self.encoder.clone(),
            train: self.train.clone(),
            contrastive: self.contrastive.clone(),
            got: self.got.clone(),
            rankme: self.rankme.clone(),
        }
    }

    /// Overrides every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synthetic.seed = seed;
        self.eval.seed = seed;
        self.eval.survival_protocol.seed = seed;
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir).map_err(|e| Failure::new(1, format!("{}: {e}", dir.display())))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))
    }

    /// Path field that must point at an existing file or directory.
    pub fn input(&self, name: &str, path: &Option<PathBuf>) -> CliResult<PathBuf> {
        let Some(p) = path else {
            return Err(Failure::config(format!("paths.{name} is required (use --set paths.{name}=<path>)")));
        };
        if !p.exists() {
            return Err(Failure::config(format!("paths.{name}: {} does not exist", p.display())));
        }
        Ok(p.clone())
    }
}

/// Recursively merges `patch` into `base`; objects merge key by key, other
/// values replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `key.path=value` override. The value is read as JSON when it
/// parses, otherwise as a string.
fn apply_override(root: &mut Value, spec: &str) -> CliResult<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        return Err(Failure::config(format!("--set {spec:?}: expected key=value")));
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Failure::config(format!("--set {spec:?}: empty key segment")));
        }
        let Value::Object(map) = node else {
            return Err(Failure::config(format!("--set {key}: {} is not a section", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one segment")
}

pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> CliResult<RunConfig> {
    let mut root = serde_json::to_value(RunConfig::default()).expect("config serializes");
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        merge(&mut root, patch);
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        Failure::config(format!("invalid config at `{path}`: {}", e.into_inner()))
    })?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}
