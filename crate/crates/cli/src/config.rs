//! Run configuration: built-in defaults, then the JSON file, then dotted
//! command-line overrides.

use std::path::{Path, PathBuf};

use a2n_core::analysis::AblationVariant;
use a2n_core::model::ModelConfig;
use a2n_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds initialisation, batch sampling and everything else random.
    pub seed: u64,
    pub model: ModelConfig,
    /// `train.seed` is always copied from `seed`.
    pub train: TrainConfig,
    /// Directories holding `HR/` and optionally `LRx{scale}/`.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub prepare: PrepareOptions,
    pub analyze: AnalyzeOptions,
    pub ablate: AblateOptions,
    pub gradcheck: GradcheckOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::a2n(4),
            train: TrainConfig::default(),
            train_dir: None,
            val_dir: None,
            out_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            prepare: PrepareOptions::default(),
            analyze: AnalyzeOptions::default(),
            ablate: AblateOptions::default(),
            gradcheck: GradcheckOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareOptions {
    /// Source HR directory. The scale is `model.scale`.
    pub hr_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeOptions {
    /// Images per end of the branch-weight ranking.
    pub k: usize,
    /// Use at most this many validation images.
    pub max_images: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions { k: 4, max_images: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    Fusion,
    Mask,
    /// Uses `ablate.variants`.
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateOptions {
    pub study: Study,
    pub variants: Vec<AblationVariant>,
}

impl Default for AblateOptions {
    fn default() -> Self {
        AblateOptions {
            study: Study::Fusion,
            variants: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckOptions {
    pub threshold: f64,
    pub eps: f64,
    pub n_blocks: usize,
    pub channels: usize,
    pub scale: usize,
    /// `null` checks every parameter.
    pub max_coords: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            threshold: 1e-5,
            eps: 1e-5,
            n_blocks: 2,
            channels: 8,
            scale: 2,
            max_coords: None,
        }
    }
}

/// Short flags accepted in place of their dotted paths.
const ALIASES: [(&str, &str); 2] = [("hr_dir", "prepare.hr_dir"), ("scale", "model.scale")];

/// Splits `--key value` / `--key=value` pairs. Keys may use `-` or `_`.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter().peekable();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(CliError::Config(format!("expected --key value, got '{arg}'")));
        };
        let (key, raw) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => match it.next_if(|v| !v.starts_with("--")) {
                Some(v) => (flag.to_string(), v.clone()),
                None => return Err(CliError::Config(format!("--{flag} needs a value"))),
            },
        };
        let key = key.replace('-', "_");
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(CliError::Config(format!("bad override key '--{flag}'")));
        }
        let key = ALIASES
            .iter()
            .find(|(a, _)| *a == key)
            .map(|(_, full)| full.to_string())
            .unwrap_or(key);
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        out.push((key, value));
    }
    Ok(out)
}

/// Recursively overlays `top` onto `base`. Objects merge, anything else
/// replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
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

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().unwrap()
            }
            _ => {
                return Err(CliError::Config(format!(
                    "cannot set '{key}': '{}' is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("keys have at least one part")
}

fn has_path(root: &Value, key: &str) -> bool {
    key.split('.')
        .try_fold(root, |node, part| node.get(part))
        .is_some()
}

/// Defaults, then `file`, then `overrides`; unknown keys are errors.
pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, CliError> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    let mut explicit_train_seed = false;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if !doc.is_object() {
            return Err(CliError::Config(format!("{}: top level must be an object", path.display())));
        }
        explicit_train_seed |= has_path(&doc, "train.seed");
        merge(&mut value, doc);
    }
    for (key, v) in overrides {
        explicit_train_seed |= key == "train.seed";
        set_path(&mut value, key, v.clone())?;
    }
    if explicit_train_seed {
        return Err(CliError::Config("set the top-level 'seed' instead of 'train.seed'".into()));
    }
    let mut cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| CliError::Config(format!("config: {e}")))?;
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

impl RunConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    /// Writes `<out_dir>/resolved_config.json`.
    pub fn write_resolved(&self) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| CliError::io(&self.out_dir, e))?;
        let path = self.out_dir.join("resolved_config.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
