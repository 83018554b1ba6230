//! Experiment configuration: a JSON document with `dataset`, `model`, `train`
//! and `output` sections, optionally overridden by dotted command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{generate_sbm, load_linqs, read_cache, Dataset, SbmParams};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelSpec};
use crate::training::{SplitPolicy, TrainConfig};

const DATASET_KEYS: &[&str] = &[
    "kind",
    "name",
    "content",
    "cites",
    "path",
    "blocks",
    "per_block",
    "p_intra",
    "p_inter",
    "features",
    "seed",
    "train_per_class",
    "val_per_class",
    "row_normalize",
];
const MODEL_KEYS: &[&str] = &["arch", "hidden", "depth", "paths", "shared_stem", "dropout", "bias"];
const TRAIN_KEYS: &[&str] = &[
    "lr",
    "weight_decay",
    "epochs",
    "seeds",
    "seed_count",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
];
const OUTPUT_KEYS: &[&str] = &["metrics", "summary"];
const SECTIONS: &[(&str, &[&str])] = &[
    ("dataset", DATASET_KEYS),
    ("model", MODEL_KEYS),
    ("train", TRAIN_KEYS),
    ("output", OUTPUT_KEYS),
];

/// Keys whose flag value may be a single number standing for a one-item list.
const LIST_KEYS: &[&str] = &["train.seeds", "model.paths"];

/// Short flags and the dotted keys they stand for.
const ALIASES: &[(&str, &str)] = &[
    ("epochs", "train.epochs"),
    ("lr", "train.lr"),
    ("weight-decay", "train.weight_decay"),
    ("seeds", "train.seeds"),
    ("seed-count", "train.seed_count"),
    ("arch", "model.arch"),
    ("hidden", "model.hidden"),
    ("depth", "model.depth"),
    ("paths", "model.paths"),
    ("shared-stem", "model.shared_stem"),
    ("dropout", "model.dropout"),
    ("bias", "model.bias"),
    ("dataset", "dataset.kind"),
    ("row-normalize", "dataset.row_normalize"),
    ("metrics", "output.metrics"),
    ("summary", "output.summary"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Linqs { content: PathBuf, cites: PathBuf },
    Sbm(SbmParams),
    Cache { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub name: Option<String>,
    pub source: DatasetSource,
    pub split: SplitPolicy,
    pub row_normalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub hidden: usize,
    pub dropout: f64,
    pub bias: bool,
}

impl ModelConfig {
    pub fn spec(&self, in_dim: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            arch: self.arch.clone(),
            in_dim,
            hidden: self.hidden,
            classes,
            dropout: self.dropout,
            bias: self.bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub metrics: PathBuf,
    pub summary: PathBuf,
}

/// A fully resolved experiment with every default materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    kind: Option<String>,
    name: Option<String>,
    content: Option<PathBuf>,
    cites: Option<PathBuf>,
    path: Option<PathBuf>,
    blocks: Option<usize>,
    per_block: Option<usize>,
    p_intra: Option<f64>,
    p_inter: Option<f64>,
    features: Option<usize>,
    seed: Option<u64>,
    train_per_class: Option<usize>,
    val_per_class: Option<usize>,
    row_normalize: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    arch: Option<String>,
    hidden: Option<usize>,
    depth: Option<usize>,
    paths: Option<Vec<usize>>,
    shared_stem: Option<usize>,
    dropout: Option<f64>,
    bias: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    lr: Option<f64>,
    weight_decay: Option<f64>,
    epochs: Option<usize>,
    seeds: Option<Vec<u64>>,
    seed_count: Option<u64>,
    adam_beta1: Option<f64>,
    adam_beta2: Option<f64>,
    adam_eps: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    metrics: Option<PathBuf>,
    summary: Option<PathBuf>,
}

fn section<T: for<'de> Deserialize<'de> + Default>(root: &Map<String, Value>, name: &str) -> Result<T> {
    match root.get(name) {
        None | Some(Value::Null) => Ok(T::default()),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("{name}: {e}"))),
    }
}

/// Every key outside the known schema, as dotted paths.
fn unknown_keys(root: &Map<String, Value>) -> Vec<String> {
    let mut unknown = Vec::new();
    for (key, value) in root {
        match SECTIONS.iter().find(|(s, _)| s == key) {
            None => unknown.push(key.clone()),
            Some((_, known)) => {
                if let Value::Object(fields) = value {
                    unknown.extend(
                        fields
                            .keys()
                            .filter(|k| !known.contains(&k.as_str()))
                            .map(|k| format!("{key}.{k}")),
                    );
                }
            }
        }
    }
    unknown
}

/// Parses a flag value as JSON, falling back to a comma list, then a string.
fn parse_flag_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str(raw) {
        return v;
    }
    if raw.contains(',') {
        if let Ok(v) = serde_json::from_str(&format!("[{raw}]")) {
            return v;
        }
    }
    Value::String(raw.to_string())
}

/// A `section.key = value` override taken from the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

/// Splits `args` into overrides (`--section.key value`, `--section.key=value`
/// or a known alias such as `--epochs 500`) and everything else, preserving
/// the order of the rest. A flag with no following value is set to `true`.
pub fn extract_overrides(args: &[String]) -> (Vec<String>, Vec<Override>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg.clone());
            i += 1;
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v)),
            None => (flag, None),
        };
        let key = if name.contains('.') {
            Some(name.to_string())
        } else {
            ALIASES.iter().find(|(a, _)| *a == name).map(|(_, k)| k.to_string())
        };
        let Some(key) = key else {
            rest.push(arg.clone());
            i += 1;
            continue;
        };
        let value = match inline {
            Some(v) => {
                i += 1;
                parse_flag_value(v)
            }
            None => match args.get(i + 1) {
                Some(next) if !next.starts_with("--") => {
                    i += 2;
                    parse_flag_value(next)
                }
                _ => {
                    i += 1;
                    Value::Bool(true)
                }
            },
        };
        overrides.push(Override { key, value });
    }
    (rest, overrides)
}

fn apply_overrides(root: &mut Map<String, Value>, overrides: &[Override]) -> Result<()> {
    for o in overrides {
        let Some((sec, key)) = o.key.split_once('.') else {
            return Err(Error::Config(format!("override `{}` is not of the form section.key", o.key)));
        };
        let entry = root.entry(sec.to_string()).or_insert_with(|| Value::Object(Map::new()));
        let value = match (&o.value, LIST_KEYS.contains(&o.key.as_str())) {
            (Value::Number(_), true) => Value::Array(vec![o.value.clone()]),
            _ => o.value.clone(),
        };
        match entry {
            Value::Object(fields) => {
                fields.insert(key.to_string(), value);
            }
            _ => return Err(Error::Config(format!("`{sec}` is not a section"))),
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Reads `path` (if any) and applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<Self> {
        let value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        Self::from_value(value, overrides)
    }

    /// Like [`ExperimentConfig::load`] but a file holding a JSON array yields
    /// one config per element, as written by multi-model echoes.
    pub fn load_all(path: &Path, overrides: &[Override]) -> Result<Vec<Self>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        match value {
            Value::Array(items) => items.into_iter().map(|v| Self::from_value(v, overrides)).collect(),
            other => Ok(vec![Self::from_value(other, overrides)?]),
        }
    }

    pub fn from_value(value: Value, overrides: &[Override]) -> Result<Self> {
        let Value::Object(mut root) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        apply_overrides(&mut root, overrides)?;
        let unknown = unknown_keys(&root);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        for (name, _) in SECTIONS {
            if let Some(v) = root.get(*name) {
                if !v.is_object() && !v.is_null() {
                    return Err(Error::Config(format!("`{name}` must be an object")));
                }
            }
        }
        let cfg = ExperimentConfig {
            dataset: resolve_dataset(section(&root, "dataset")?)?,
            model: resolve_model(section(&root, "model")?)?,
            train: resolve_train(section(&root, "train")?)?,
            output: resolve_output(section(&root, "output")?),
        };
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// The resolved configuration in the input schema; loading it back gives
    /// an equal config.
    pub fn to_json(&self) -> Value {
        let d = &self.dataset;
        let mut dataset = Map::new();
        match &d.source {
            DatasetSource::Linqs { content, cites } => {
                dataset.insert("kind".into(), "linqs".into());
                dataset.insert("content".into(), path_value(content));
                dataset.insert("cites".into(), path_value(cites));
            }
            DatasetSource::Sbm(p) => {
                dataset.insert("kind".into(), "sbm".into());
                dataset.insert("blocks".into(), p.blocks.into());
                dataset.insert("per_block".into(), p.per_block.into());
                dataset.insert("p_intra".into(), p.p_intra.into());
                dataset.insert("p_inter".into(), p.p_inter.into());
                dataset.insert("features".into(), p.features.into());
                dataset.insert("seed".into(), p.seed.into());
            }
            DatasetSource::Cache { path } => {
                dataset.insert("kind".into(), "cache".into());
                dataset.insert("path".into(), path_value(path));
            }
        }
        if let Some(name) = &d.name {
            dataset.insert("name".into(), name.clone().into());
        }
        dataset.insert("train_per_class".into(), d.split.train_per_class.into());
        dataset.insert("val_per_class".into(), d.split.val_per_class.into());
        dataset.insert("row_normalize".into(), d.row_normalize.into());

        let m = &self.model;
        let mut model = Map::new();
        model.insert("arch".into(), m.arch.name().into());
        match &m.arch {
            Architecture::Sequential { depth } | Architecture::Residual { depth } => {
                model.insert("depth".into(), (*depth).into());
            }
            Architecture::Multipath { paths, shared_stem } => {
                model.insert("paths".into(), paths.clone().into());
                model.insert("shared_stem".into(), (*shared_stem).into());
            }
        }
        model.insert("hidden".into(), m.hidden.into());
        model.insert("dropout".into(), m.dropout.into());
        model.insert("bias".into(), m.bias.into());

        let t = &self.train;
        let train = serde_json::json!({
            "lr": t.lr,
            "weight_decay": t.weight_decay,
            "epochs": t.epochs,
            "seeds": t.seeds,
            "adam_beta1": t.adam_beta1,
            "adam_beta2": t.adam_beta2,
            "adam_eps": t.adam_eps,
        });
        let output = serde_json::json!({
            "metrics": path_value(&self.output.metrics),
            "summary": path_value(&self.output.summary),
        });
        serde_json::json!({
            "dataset": dataset,
            "model": model,
            "train": train,
            "output": output,
        })
    }

    /// Runs use a random split per seed according to `dataset.split`.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            split: Some(self.dataset.split),
            ..self.train.clone()
        }
    }

    /// Path of the config echo written next to the summary file.
    pub fn echo_path(&self) -> PathBuf {
        let mut name = self.output.summary.clone().into_os_string();
        name.push(".config.json");
        PathBuf::from(name)
    }
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn resolve_dataset(raw: RawDataset) -> Result<DatasetConfig> {
    let kind = raw.kind.as_deref().unwrap_or("sbm");
    let sbm_fields = [
        ("blocks", raw.blocks.is_some()),
        ("per_block", raw.per_block.is_some()),
        ("p_intra", raw.p_intra.is_some()),
        ("p_inter", raw.p_inter.is_some()),
        ("features", raw.features.is_some()),
        ("seed", raw.seed.is_some()),
    ];
    let file_fields = [
        ("content", raw.content.is_some()),
        ("cites", raw.cites.is_some()),
        ("path", raw.path.is_some()),
    ];
    let forbid = |fields: &[(&str, bool)], allowed: &[&str]| -> Result<()> {
        let bad: Vec<&str> = fields
            .iter()
            .filter(|(k, set)| *set && !allowed.contains(k))
            .map(|(k, _)| *k)
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "dataset.kind = {kind} does not take {}",
                bad.join(", ")
            )))
        }
    };
    let source = match kind {
        "sbm" => {
            forbid(&file_fields, &[])?;
            DatasetSource::Sbm(SbmParams {
                blocks: raw.blocks.unwrap_or(4),
                per_block: raw.per_block.unwrap_or(60),
                p_intra: raw.p_intra.unwrap_or(0.1),
                p_inter: raw.p_inter.unwrap_or(0.02),
                features: raw.features.unwrap_or(16),
                seed: raw.seed.unwrap_or(0),
            })
        }
        "linqs" => {
            forbid(&sbm_fields, &[])?;
            forbid(&file_fields, &["content", "cites"])?;
            match (raw.content, raw.cites) {
                (Some(content), Some(cites)) => DatasetSource::Linqs { content, cites },
                _ => return Err(Error::Config("dataset.kind = linqs needs both content and cites".into())),
            }
        }
        "cache" => {
            forbid(&sbm_fields, &[])?;
            forbid(&file_fields, &["path"])?;
            match raw.path {
                Some(path) => DatasetSource::Cache { path },
                None => return Err(Error::Config("dataset.kind = cache needs path".into())),
            }
        }
        other => {
            return Err(Error::Config(format!(
                "dataset.kind must be linqs, sbm or cache, got `{other}`"
            )))
        }
    };
    Ok(DatasetConfig {
        name: raw.name,
        source,
        split: SplitPolicy {
            train_per_class: raw.train_per_class.unwrap_or(20),
            val_per_class: raw.val_per_class.unwrap_or(30),
        },
        row_normalize: raw.row_normalize.unwrap_or(false),
    })
}

fn resolve_model(raw: RawModel) -> Result<ModelConfig> {
    let arch_name = raw.arch.as_deref().unwrap_or("gcn");
    let arch = match arch_name {
        "gcn" | "resgcn" => {
            let mut bad = Vec::new();
            if raw.paths.is_some() {
                bad.push("paths");
            }
            if raw.shared_stem.is_some() {
                bad.push("shared_stem");
            }
            if !bad.is_empty() {
                return Err(Error::Config(format!(
                    "model.arch = {arch_name} does not take {}",
                    bad.join(", ")
                )));
            }
            let depth = raw.depth.unwrap_or(2);
            if arch_name == "gcn" {
                Architecture::Sequential { depth }
            } else {
                Architecture::Residual { depth }
            }
        }
        "mpgcn" => {
            if raw.depth.is_some() {
                return Err(Error::Config("model.arch = mpgcn takes paths, not depth".into()));
            }
            let paths = raw
                .paths
                .ok_or_else(|| Error::Config("model.arch = mpgcn needs paths".into()))?;
            Architecture::Multipath {
                paths,
                shared_stem: raw.shared_stem.unwrap_or(0),
            }
        }
        other => {
            return Err(Error::Config(format!(
                "model.arch must be gcn, resgcn or mpgcn, got `{other}`"
            )))
        }
    };
    let model = ModelConfig {
        arch,
        hidden: raw.hidden.unwrap_or(64),
        dropout: raw.dropout.unwrap_or(0.5),
        bias: raw.bias.unwrap_or(true),
    };
    // dimensions are placeholders; this checks the architecture itself
    model.spec(1, 2).validate().map_err(|e| Error::Config(format!("model: {e}")))?;
    Ok(model)
}

fn resolve_train(raw: RawTrain) -> Result<TrainConfig> {
    let defaults = TrainConfig::default();
    let seeds = match (raw.seeds, raw.seed_count) {
        (Some(_), Some(_)) => {
            return Err(Error::Config("train.seeds and train.seed_count are mutually exclusive".into()))
        }
        (Some(seeds), None) => seeds,
        (None, Some(count)) => (0..count).collect(),
        (None, None) => defaults.seeds.clone(),
    };
    Ok(TrainConfig {
        lr: raw.lr.unwrap_or(defaults.lr),
        weight_decay: raw.weight_decay.unwrap_or(defaults.weight_decay),
        epochs: raw.epochs.unwrap_or(defaults.epochs),
        seeds,
        adam_beta1: raw.adam_beta1.unwrap_or(defaults.adam_beta1),
        adam_beta2: raw.adam_beta2.unwrap_or(defaults.adam_beta2),
        adam_eps: raw.adam_eps.unwrap_or(defaults.adam_eps),
        split: None,
    })
}

fn resolve_output(raw: RawOutput) -> OutputConfig {
    OutputConfig {
        metrics: raw.metrics.unwrap_or_else(|| PathBuf::from("metrics.csv")),
        summary: raw.summary.unwrap_or_else(|| PathBuf::from("summary.csv")),
    }
}

/// A loaded dataset plus diagnostics from loading it.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub skipped_citations: usize,
}

impl DatasetConfig {
    pub fn load(&self) -> Result<LoadedDataset> {
        let (mut dataset, skipped_citations) = match &self.source {
            DatasetSource::Linqs { content, cites } => {
                let l = load_linqs(content, cites)?;
                (l.dataset, l.skipped_citations)
            }
            DatasetSource::Sbm(p) => (generate_sbm(p)?, 0),
            DatasetSource::Cache { path } => (read_cache(path)?, 0),
        };
        if let Some(name) = &self.name {
            dataset.name = name.clone();
        }
        if self.row_normalize {
            dataset.row_normalize();
        }
        Ok(LoadedDataset {
            dataset,
            skipped_citations,
        })
    }
}

/// Flattened view used to compare the settings several configs must share.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SharedSettings {
    pub dataset: Value,
    pub hidden: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn shared_settings(&self) -> SharedSettings {
        let json = self.to_json();
        SharedSettings {
            dataset: json["dataset"].clone(),
            hidden: self.model.hidden,
            epochs: self.train.epochs,
            seeds: self.train.seeds.clone(),
        }
    }
}

/// Differences between the shared settings of `configs`, one line per field.
pub fn shared_mismatches(configs: &[ExperimentConfig]) -> Vec<String> {
    let Some(first) = configs.first() else {
        return Vec::new();
    };
    let reference = first.shared_settings();
    let mut fields: BTreeMap<&str, bool> = BTreeMap::new();
    for c in &configs[1..] {
        let s = c.shared_settings();
        *fields.entry("dataset").or_default() |= s.dataset != reference.dataset;
        *fields.entry("model.hidden").or_default() |= s.hidden != reference.hidden;
        *fields.entry("train.epochs").or_default() |= s.epochs != reference.epochs;
        *fields.entry("train.seeds").or_default() |= s.seeds != reference.seeds;
    }
    fields
        .into_iter()
        .filter(|(_, differs)| *differs)
        .map(|(k, _)| k.to_string())
        .collect()
}
