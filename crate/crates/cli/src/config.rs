//! Run configuration: one JSON document, dot-path overrides and a content
//! digest that names the artifact directory.

use std::path::{Path, PathBuf};

use pkdistill_core::cost::BandwidthScenario;
use pkdistill_core::data::SynthSpec;
use pkdistill_core::eval::ExperimentConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::failure::Failure;

pub const WORKDIR_ENV: &str = "PKDISTILL_WORKDIR";
const DEFAULT_WORKDIR: &str = "pkdistill-work";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
    /// Replaces `experiment.seeds` with this single seed when set.
    pub seed: Option<u64>,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub synth: SynthPair,
    #[serde(default)]
    pub cost: CostConfig,
}

/// Generator specs written next to the source and target manifests by
/// `synth` without `--spec`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthPair {
    pub source: Option<SynthSpec>,
    pub target: Option<SynthSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub bandwidth: BandwidthScenario,
    pub repeats: usize,
    pub warmup: usize,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            bandwidth: BandwidthScenario::hd720_fleet(),
            repeats: 20,
            warmup: 3,
        }
    }
}

/// Sets `key` (dot path) in a JSON object tree, creating objects on the way.
/// The value is parsed as JSON when possible and kept as a string otherwise.
pub fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), Failure> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::Config(format!("bad override key {key:?}")));
    }
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Map::new());
            } else {
                return Err(Failure::Config(format!("override {key}: {} is not an object", parts[..i].join("."))));
            }
        }
        let obj = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("key has at least one part")
}

/// Overlays `top` onto `base`, recursing into objects present in both.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

pub struct Overrides<'a> {
    pub seed: Option<u64>,
    pub workdir: Option<&'a Path>,
    pub sets: &'a [String],
}

pub struct Resolved {
    pub config: RunConfig,
    pub digest: String,
    pub workdir: PathBuf,
}

impl Resolved {
    pub fn load(path: Option<&Path>, ov: &Overrides<'_>) -> Result<Self, Failure> {
        let root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Failure::Config(format!("config {}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        if !root.is_object() {
            return Err(Failure::Config("config must be a JSON object".into()));
        }
        // Overrides then land on a complete tree, so `--set a.b=1` works
        // even when the file never mentions `a`.
        let mut full = serde_json::to_value(RunConfig::default()).map_err(|e| Failure::Config(e.to_string()))?;
        merge(&mut full, root);
        let mut root = full;
        if let Some(s) = ov.seed {
            set_path(&mut root, "seed", &s.to_string())?;
        }
        for kv in ov.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Failure::Config(format!("--set expects key=value, got {kv:?}")))?;
            set_path(&mut root, k.trim(), v)?;
        }
        let mut config: RunConfig =
            serde_json::from_value(root).map_err(|e| Failure::Config(format!("config schema: {e}")))?;
        if let Some(s) = config.seed {
            config.experiment.seeds = vec![s];
        }
        config.experiment.validate().map_err(|e| Failure::Config(e.to_string()))?;
        config.cost.bandwidth.validate().map_err(|e| Failure::Config(e.to_string()))?;
        let workdir = ov
            .workdir
            .map(Path::to_path_buf)
            .or_else(|| config.workdir.clone())
            .or_else(|| std::env::var_os(WORKDIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_WORKDIR));
        let digest = digest_of(&config)?;
        Ok(Resolved { config, digest, workdir })
    }

    pub fn seeds(&self) -> &[u64] {
        &self.config.experiment.seeds
    }

    /// Artifact root for this configuration.
    pub fn run_dir(&self) -> PathBuf {
        self.workdir.join("runs").join(&self.digest)
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.run_dir().join(format!("seed-{seed}"))
    }

    pub fn require(&self, key: &str, value: &Option<PathBuf>) -> Result<PathBuf, Failure> {
        let p = value.clone().ok_or_else(|| {
            Failure::Config(format!("missing config key `{key}`; set it in --config or with --set {key}=PATH"))
        })?;
        if !p.is_file() {
            return Err(Failure::Config(format!("{key} manifest {} does not exist", p.display())));
        }
        Ok(p)
    }
}

/// First 16 hex digits of SHA-256 over the canonical JSON of `value`. The
/// work dir is excluded so that moving artifacts keeps their names.
pub fn digest_of<T: Serialize>(value: &T) -> Result<String, Failure> {
    let mut v = serde_json::to_value(value).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("workdir");
    }
    // serde_json's default map is ordered by key, so this text is canonical.
    let text = serde_json::to_string(&v).map_err(|e| Failure::Config(e.to_string()))?;
    Ok(hex::encode(&Sha256::digest(text.as_bytes())[..8]))
}
