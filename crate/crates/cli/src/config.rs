use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clinalign::data::{SplitRatios, SyntheticConfig};
use clinalign::error::{Error, Result};
use clinalign::eval::{LinearEvalGrid, DEFAULT_ANCHORS};
use clinalign::train::{FinetuneConfig, PretrainConfig};
use serde::{Deserialize, Serialize};

pub const OUT_ENV: &str = "CLINALIGN_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub n_stays: usize,
    /// Probability of blanking a measurement cell on disk.
    pub missing_rate: f64,
    /// z-normalize using statistics of the training split.
    pub normalize: bool,
    pub min_token_count: usize,
    pub splits: SplitRatios,
    pub synthetic: SyntheticConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_stays: 256,
            missing_rate: 0.1,
            normalize: true,
            min_token_count: 1,
            splits: SplitRatios::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub task: String,
    /// Split scored by retrieval and zero-shot.
    pub split: String,
    pub single_positive: bool,
    pub anchors: [String; 2],
    pub fractions: Vec<u32>,
    pub repeats: usize,
    pub linear: LinearEvalGrid,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            task: "ihm".into(),
            split: "test".into(),
            single_positive: false,
            anchors: [DEFAULT_ANCHORS.0.into(), DEFAULT_ANCHORS.1.into()],
            fractions: clinalign::data::LABEL_FRACTIONS.to_vec(),
            repeats: 5,
            linear: LinearEvalGrid::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSection {
    /// Epochs per trial.
    pub epochs: usize,
    /// Dotted pretrain keys to value lists; empty means the full default space.
    pub axes: BTreeMap<String, Vec<toml::Value>>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { epochs: 5, axes: BTreeMap::new() }
    }
}

/// Everything a command needs. `seed` drives every random stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalSection,
    pub grid: GridSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalSection::default(),
            grid: GridSection::default(),
        }
    }
}

fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() => merge(existing, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Paths present in `v` but not in `known`. Free-form maps are not descended.
fn unknown_keys(v: &toml::Value, known: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    let (Some(t), Some(k)) = (v.as_table(), known.as_table()) else { return };
    for (key, val) in t {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match k.get(key) {
            None => out.push(path),
            Some(_) if matches!(path.as_str(), "grid.axes" | "data.synthetic.templates") => {}
            Some(kv) => unknown_keys(val, kv, &path, out),
        }
    }
}

fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {s:?} has an empty key")));
    }
    // TOML literal when it parses, bare string otherwise
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    Ok((key.to_string(), value))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("cannot set {key}: {} is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

fn contains_path(v: &toml::Value, key: &str) -> bool {
    let mut cur = v;
    for part in key.split('.') {
        match cur.get(part) {
            Some(next) => cur = next,
            None => return false,
        }
    }
    true
}

/// Defaults, then the file, then `key=value` overrides.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let defaults = toml::Value::try_from(ExperimentConfig::default())
        .map_err(|e| Error::Config(format!("cannot serialize defaults: {e}")))?;
    let mut user = toml::Value::Table(Default::default());
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let parsed: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut user, parsed);
    }
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_path(&mut user, &k, v)?;
    }
    let mut unknown = Vec::new();
    unknown_keys(&user, &defaults, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
    }
    for nested in ["pretrain.seed", "finetune.seed"] {
        if contains_path(&user, nested) {
            return Err(Error::Config(format!("{nested} is derived; set the top-level seed instead")));
        }
    }
    let mut merged = defaults;
    merge(&mut merged, user);
    let mut cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.pretrain.seed = cfg.seed;
    cfg.finetune.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.n_stays < 2 {
            return Err(Error::Config(format!("data.n_stays must be at least 2, got {}", self.data.n_stays)));
        }
        if !(0.0..1.0).contains(&self.data.missing_rate) {
            return Err(Error::Config("data.missing_rate must lie in [0, 1)".into()));
        }
        if !["train", "validation", "test"].contains(&self.eval.split.as_str()) {
            return Err(Error::Config(format!("eval.split must be train, validation or test, got {:?}", self.eval.split)));
        }
        if self.grid.epochs == 0 {
            return Err(Error::Config("grid.epochs must be at least 1".into()));
        }
        self.data.synthetic.validate()?;
        self.data.splits.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    /// TOML form, loadable by [`resolve`]. Nested seeds are omitted.
    pub fn to_toml(&self) -> Result<String> {
        let mut v = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for section in ["pretrain", "finetune"] {
            if let Some(t) = v.get_mut(section).and_then(toml::Value::as_table_mut) {
                t.remove("seed");
            }
        }
        toml::to_string_pretty(&v).map_err(|e| Error::Config(e.to_string()))
    }
}

/// `explicit`, else `$CLINALIGN_OUT/<command>`, else `runs/<command>`.
pub fn out_dir(explicit: Option<PathBuf>, command: &str) -> PathBuf {
    explicit.unwrap_or_else(|| match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(command),
        _ => PathBuf::from("runs").join(command),
    })
}
