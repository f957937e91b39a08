//! Experiment configuration.
//!
//! Configs are flat `section.key = value` TOML. Every key goes through
//! [`ExperimentConfig::set`], which is also what `--set key=value` overrides and sweep
//! axes use, so a value accepted in one place is accepted everywhere.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lengen_core::model::{ModelConfig, PeKind, SizePreset};
use lengen_core::taskgen::{priming_weights, PrimingShape, Procedure, TaskKind, TaskSpec, TrainPlan};
use lengen_core::trainer::{OptimConfig, Schedule};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{key}: {msg}")]
    Invalid { key: String, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("unknown preset {0:?} (known: {known})", known = PRESETS.join(", "))]
    UnknownPreset(String),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(format!("expected f32 or f64, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskBlock {
    pub kind: TaskKind,
    pub n_train: usize,
    /// Evaluation lengths besides `n_train`; the largest fixes the input geometry.
    pub n_test: Vec<usize>,
    pub n2_max: Option<usize>,
    pub modulus: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataBlock {
    pub train_size: usize,
    pub pool_size: Option<usize>,
    pub test_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBlock {
    pub size: Option<SizePreset>,
    pub depth: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub pe_kind: PeKind,
    pub shared_layers: bool,
    pub k_clip: usize,
    pub shared_rel_tables: bool,
    pub dropout: f64,
    pub ffn_mult: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBlock {
    pub procedure: Procedure,
    pub epsilon: f64,
    pub priming: Option<String>,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub grad_clip: Option<f64>,
    pub fine_length: Option<usize>,
    pub fine_size: usize,
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputBlock {
    pub dir: PathBuf,
    pub checkpoint_every: Option<usize>,
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    /// Multiplies d_model, N_train and the epoch count at resolution time.
    pub scale: f64,
    pub precision: Precision,
    pub task: TaskBlock,
    pub data: DataBlock,
    pub model: ModelBlock,
    pub train: TrainBlock,
    pub output: OutputBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: None,
            scale: 1.0,
            precision: Precision::F32,
            task: TaskBlock {
                kind: TaskKind::Add,
                n_train: 5,
                n_test: (6..=20).collect(),
                n2_max: None,
                modulus: None,
            },
            data: DataBlock { train_size: 5000, pool_size: None, test_size: 10000, seed: 0 },
            model: ModelBlock {
                size: Some(SizePreset::Standard),
                depth: None,
                d_model: None,
                heads: None,
                pe_kind: PeKind::RpeK,
                shared_layers: true,
                k_clip: 16,
                shared_rel_tables: false,
                dropout: 0.0,
                ffn_mult: 4,
            },
            train: TrainBlock {
                procedure: Procedure::Standard,
                epsilon: 0.0,
                priming: None,
                epochs: 15000,
                lr: 1e-4,
                weight_decay: 1e-3,
                batch_size: 32,
                eval_every: 25,
                grad_clip: None,
                fine_length: None,
                fine_size: 1000,
                init_checkpoint: None,
            },
            output: OutputBlock { dir: PathBuf::from("runs"), checkpoint_every: None, run_id: None },
        }
    }
}

/// Named experiment presets.
pub const PRESETS: [&str; 4] = ["addition-rpek-base", "addition-ape-base", "mul-priming-50", "mul-fine-tune"];

fn preset_pairs(name: &str) -> Option<&'static [(&'static str, &'static str)]> {
    const ADD_BASE: [(&str, &str); 6] = [
        ("task.kind", "add"),
        ("task.n_train", "5"),
        ("task.n_test", "6-20"),
        ("model.size", "base"),
        ("model.shared_layers", "true"),
        ("train.procedure", "standard"),
    ];
    Some(match name {
        "addition-rpek-base" => {
            &[ADD_BASE[0], ADD_BASE[1], ADD_BASE[2], ADD_BASE[3], ADD_BASE[4], ADD_BASE[5], ("model.pe_kind", "rpe_k")]
        }
        "addition-ape-base" => {
            &[ADD_BASE[0], ADD_BASE[1], ADD_BASE[2], ADD_BASE[3], ADD_BASE[4], ADD_BASE[5], ("model.pe_kind", "ape")]
        }
        "mul-priming-50" => &[
            ("task.kind", "mul"),
            ("task.n_train", "5"),
            ("task.n_test", "35"),
            ("task.n2_max", "3"),
            ("data.train_size", "5000"),
            ("model.size", "standard"),
            ("model.pe_kind", "rpe_k"),
            ("model.shared_layers", "true"),
            ("train.procedure", "priming"),
            ("train.epsilon", "0.01"),
            ("train.priming", "single:35"),
        ],
        "mul-fine-tune" => &[
            ("task.kind", "mul"),
            ("task.n_train", "5"),
            ("task.n_test", "35"),
            ("task.n2_max", "3"),
            ("model.size", "standard"),
            ("model.pe_kind", "rpe_k"),
            ("model.shared_layers", "true"),
            ("train.procedure", "fine_tune"),
            ("train.fine_length", "35"),
        ],
        _ => return None,
    })
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: fmt::Display,
{
    value.parse::<V>().map_err(|e| invalid(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_opt<V: FromStr>(key: &str, value: &str) -> Result<Option<V>, ConfigError>
where
    V::Err: fmt::Display,
{
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// Parses `6,8,10`, `6-20` or mixtures like `3,6-8`.
pub fn parse_lengths(text: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| format!("bad range {part:?}"))?;
                let b: usize = b.trim().parse().map_err(|_| format!("bad range {part:?}"))?;
                if a > b {
                    return Err(format!("empty range {part:?}"));
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| format!("bad length {part:?}"))?),
        }
    }
    Ok(out)
}

fn format_lengths(lengths: &[usize]) -> String {
    lengths.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn toml_scalar(key: &str, v: &toml::Value) -> Result<String, ConfigError> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Datetime(d) => d.to_string(),
        toml::Value::Array(items) => {
            items.iter().map(|x| toml_scalar(key, x)).collect::<Result<Vec<_>, _>>()?.join(",")
        }
        toml::Value::Table(_) => return Err(invalid(key, "nested tables are not values")),
    })
}

/// Flattens a TOML table into dotted keys with string values.
pub fn flatten_toml(table: &toml::Table) -> Result<Vec<(String, String)>, ConfigError> {
    fn walk(prefix: &str, t: &toml::Table, out: &mut Vec<(String, String)>) -> Result<(), ConfigError> {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(inner) => walk(&key, inner, out)?,
                other => out.push((key.clone(), toml_scalar(&key, other)?)),
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk("", table, &mut out)?;
    Ok(out)
}

/// Renders a string value with the most specific TOML type that reads back identically.
fn toml_value(value: &str) -> toml::Value {
    if let Ok(b) = value.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = value.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    let floaty = value.contains(['.', 'e', 'E']) && !value.chars().any(|c| c.is_alphabetic() && c != 'e' && c != 'E');
    match value.parse::<f64>() {
        Ok(f) if floaty && f.is_finite() && f.to_string().parse::<f64>() == Ok(f) => toml::Value::Float(f),
        _ => toml::Value::String(value.to_string()),
    }
}

/// Renders `(key, value)` pairs as flat dotted TOML lines.
pub fn pairs_to_toml(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(&format!("{k} = {}\n", toml_value(v)));
    }
    s
}

impl ExperimentConfig {
    /// Reads a config file: the preset (if any) is applied first, then every other key.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    /// Applies a config file on top of the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let table: toml::Table =
            text.parse().map_err(|source| ConfigError::Toml { path: path.to_path_buf(), source })?;
        self.apply(&flatten_toml(&table)?)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table =
            text.parse().map_err(|source| ConfigError::Toml { path: PathBuf::from("<string>"), source })?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&flatten_toml(&table)?)?;
        Ok(cfg)
    }

    /// A preset applied on top of the defaults.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        cfg.set("preset", name)?;
        Ok(cfg)
    }

    /// Applies pairs, handling `preset` before anything else.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), ConfigError> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Sets one dotted key. `none` (or an empty value) clears optional keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "preset" => {
                let pairs = preset_pairs(v).ok_or_else(|| ConfigError::UnknownPreset(v.to_string()))?;
                for (k, val) in pairs {
                    self.set(k, val)?;
                }
                self.preset = Some(v.to_string());
            }
            "scale" => self.scale = parse(key, v)?,
            "precision" => self.precision = parse(key, v)?,
            "task.kind" => self.task.kind = parse(key, v)?,
            "task.n_train" => self.task.n_train = parse(key, v)?,
            "task.n_test" => self.task.n_test = parse_lengths(v).map_err(|m| invalid(key, m))?,
            "task.n2_max" => self.task.n2_max = parse_opt(key, v)?,
            "task.modulus" => self.task.modulus = parse_opt(key, v)?,
            "data.train_size" => self.data.train_size = parse(key, v)?,
            "data.pool_size" => self.data.pool_size = parse_opt(key, v)?,
            "data.test_size" => self.data.test_size = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "model.size" => self.model.size = parse_opt(key, v)?,
            "model.depth" => self.model.depth = parse_opt(key, v)?,
            "model.d_model" => self.model.d_model = parse_opt(key, v)?,
            "model.heads" => self.model.heads = parse_opt(key, v)?,
            "model.pe_kind" => self.model.pe_kind = parse(key, v)?,
            "model.shared_layers" => self.model.shared_layers = parse(key, v)?,
            "model.k_clip" => self.model.k_clip = parse(key, v)?,
            "model.shared_rel_tables" => self.model.shared_rel_tables = parse(key, v)?,
            "model.dropout" => self.model.dropout = parse(key, v)?,
            "model.ffn_mult" => self.model.ffn_mult = parse(key, v)?,
            "train.procedure" => self.train.procedure = parse(key, v)?,
            "train.epsilon" => self.train.epsilon = parse(key, v)?,
            "train.priming" => self.train.priming = (!v.is_empty() && v != "none").then(|| v.to_string()),
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.grad_clip" => self.train.grad_clip = parse_opt(key, v)?,
            "train.fine_length" => self.train.fine_length = parse_opt(key, v)?,
            "train.fine_size" => self.train.fine_size = parse(key, v)?,
            "train.init_checkpoint" => self.train.init_checkpoint = parse_opt(key, v)?,
            "output.dir" => self.output.dir = PathBuf::from(v),
            "output.checkpoint_every" => self.output.checkpoint_every = parse_opt(key, v)?,
            "output.run_id" => self.output.run_id = (!v.is_empty() && v != "none").then(|| v.to_string()),
            k if k.starts_with("manifest.") => {}
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every set key as a dotted pair, in a fixed order. Unset optional keys are omitted.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut p: Vec<(&str, Option<String>)> = vec![
            ("preset", self.preset.clone()),
            ("scale", Some(self.scale.to_string())),
            ("precision", Some(self.precision.to_string())),
            ("task.kind", Some(self.task.kind.to_string())),
            ("task.n_train", Some(self.task.n_train.to_string())),
            ("task.n_test", Some(format_lengths(&self.task.n_test))),
            ("task.n2_max", self.task.n2_max.map(|x| x.to_string())),
            ("task.modulus", self.task.modulus.map(|x| x.to_string())),
            ("data.train_size", Some(self.data.train_size.to_string())),
            ("data.pool_size", self.data.pool_size.map(|x| x.to_string())),
            ("data.test_size", Some(self.data.test_size.to_string())),
            ("data.seed", Some(self.data.seed.to_string())),
            // default is Some, so None must be written out explicitly
            ("model.size", Some(self.model.size.map_or_else(|| "none".to_string(), |x| x.to_string()))),
            ("model.depth", self.model.depth.map(|x| x.to_string())),
            ("model.d_model", self.model.d_model.map(|x| x.to_string())),
            ("model.heads", self.model.heads.map(|x| x.to_string())),
            ("model.pe_kind", Some(self.model.pe_kind.to_string())),
            ("model.shared_layers", Some(self.model.shared_layers.to_string())),
            ("model.k_clip", Some(self.model.k_clip.to_string())),
            ("model.shared_rel_tables", Some(self.model.shared_rel_tables.to_string())),
            ("model.dropout", Some(self.model.dropout.to_string())),
            ("model.ffn_mult", Some(self.model.ffn_mult.to_string())),
            ("train.procedure", Some(self.train.procedure.to_string())),
            ("train.epsilon", Some(self.train.epsilon.to_string())),
            ("train.priming", self.train.priming.clone()),
            ("train.epochs", Some(self.train.epochs.to_string())),
            ("train.lr", Some(self.train.lr.to_string())),
            ("train.weight_decay", Some(self.train.weight_decay.to_string())),
            ("train.batch_size", Some(self.train.batch_size.to_string())),
            ("train.eval_every", Some(self.train.eval_every.to_string())),
            ("train.grad_clip", self.train.grad_clip.map(|x| x.to_string())),
            ("train.fine_length", self.train.fine_length.map(|x| x.to_string())),
            ("train.fine_size", Some(self.train.fine_size.to_string())),
            ("train.init_checkpoint", self.train.init_checkpoint.as_ref().map(|x| x.display().to_string())),
            ("output.dir", Some(self.output.dir.display().to_string())),
            ("output.checkpoint_every", self.output.checkpoint_every.map(|x| x.to_string())),
            ("output.run_id", self.output.run_id.clone()),
        ];
        p.retain(|(_, v)| v.is_some());
        p.into_iter().map(|(k, v)| (k.to_string(), v.unwrap_or_default())).collect()
    }

    pub fn to_toml(&self) -> String {
        pairs_to_toml(&self.pairs())
    }

    /// Validates the config and expands every default into concrete core types.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let mut c = self.clone();
        // presets are fully expanded below; keeping the name would re-apply its defaults on reload
        let preset = c.preset.take();
        if !(c.scale.is_finite() && c.scale > 0.0) {
            return Err(invalid("scale", "must be a positive number"));
        }

        // task geometry
        if c.task.n_train == 0 {
            return Err(invalid("task.n_train", "must be at least 1"));
        }
        if c.task.n_test.contains(&0) {
            return Err(invalid("task.n_test", "lengths must be at least 1"));
        }
        c.task.n_test.sort_unstable();
        c.task.n_test.dedup();
        let width = c.task.n_test.iter().copied().chain([c.task.n_train]).max().unwrap_or(c.task.n_train);
        let n2_max = match (c.task.kind.is_mul_family(), c.task.n2_max) {
            (true, None) => 3,
            (true, Some(0)) => return Err(invalid("task.n2_max", "must be at least 1")),
            (true, Some(n)) => n,
            (false, None) => width,
            (false, Some(n)) if n == width => n,
            (false, Some(n)) => {
                return Err(invalid(
                    "task.n2_max",
                    format!("addition-family tasks use the first operand width ({width}), got {n}"),
                ))
            }
        };
        if c.task.kind.is_modular() != c.task.modulus.is_some() {
            let msg =
                if c.task.kind.is_modular() { "required for modular tasks" } else { "only valid for modular tasks" };
            return Err(invalid("task.modulus", msg));
        }
        let task = TaskSpec::new(c.task.kind, width, n2_max, c.task.modulus)
            .map_err(|e| invalid(if c.task.modulus.is_some() { "task.modulus" } else { "task.kind" }, e.to_string()))?;
        c.task.n2_max = Some(n2_max);

        // scale knob
        let scaled = |x: usize| ((x as f64 * c.scale).round() as usize).max(1);
        let (mut depth, mut d_model, mut heads) = c.model.size.map_or((6, 1024, 16), |s| s.dims());
        depth = c.model.depth.unwrap_or(depth);
        d_model = c.model.d_model.unwrap_or(d_model);
        heads = c.model.heads.unwrap_or(heads);
        if depth == 0 {
            return Err(invalid("model.depth", "must be at least 1"));
        }
        if heads == 0 {
            return Err(invalid("model.heads", "must be at least 1"));
        }
        if c.scale != 1.0 {
            d_model = (((d_model as f64 * c.scale) / heads as f64).round() as usize).max(1) * heads;
            c.data.train_size = scaled(c.data.train_size);
            c.train.epochs = scaled(c.train.epochs);
            c.scale = 1.0;
        }
        if d_model == 0 || d_model % heads != 0 {
            return Err(invalid(
                "model.d_model",
                format!("{d_model} is not a positive multiple of model.heads ({heads})"),
            ));
        }
        (c.model.size, c.model.depth, c.model.d_model, c.model.heads) = (None, Some(depth), Some(d_model), Some(heads));

        // data
        if c.data.train_size == 0 {
            return Err(invalid("data.train_size", "must be at least 1"));
        }
        if c.data.test_size == 0 {
            return Err(invalid("data.test_size", "must be at least 1"));
        }
        let available = 10u64.checked_pow(c.task.n_train as u32).map_or(u64::MAX, |p| p - 1);
        let pool_size = c.data.pool_size.unwrap_or_else(|| (c.data.train_size as u64).min(available) as usize);
        if pool_size == 0 || pool_size as u64 > available {
            return Err(invalid(
                "data.pool_size",
                format!("{pool_size} distinct operands requested, {available} exist below 10^{}", c.task.n_train),
            ));
        }
        c.data.pool_size = Some(pool_size);

        // model
        if !(0.0..1.0).contains(&c.model.dropout) {
            return Err(invalid("model.dropout", "must be in [0, 1)"));
        }
        if c.model.ffn_mult == 0 {
            return Err(invalid("model.ffn_mult", "must be at least 1"));
        }
        let mut model = ModelConfig::new(depth, d_model, heads, c.model.pe_kind, task.input_len(), task.n_out());
        model.ffn_mult = c.model.ffn_mult;
        model.shared_layers = c.model.shared_layers;
        model.k_clip = c.model.k_clip;
        model.shared_rel_tables = c.model.shared_rel_tables;
        model.dropout = c.model.dropout;
        model.validate().map_err(|e| invalid("model", e.to_string()))?;

        // optimisation
        let t = c.train.clone();
        if t.epochs == 0 {
            return Err(invalid("train.epochs", "must be at least 1"));
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(invalid("train.lr", "must be a positive number"));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return Err(invalid("train.weight_decay", "must be non-negative"));
        }
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be at least 1"));
        }
        if t.eval_every == 0 {
            return Err(invalid("train.eval_every", "must be at least 1"));
        }
        if t.grad_clip.is_some_and(|g| !(g.is_finite() && g > 0.0)) {
            return Err(invalid("train.grad_clip", "must be a positive number"));
        }
        if !(0.0..1.0).contains(&t.epsilon) {
            return Err(invalid("train.epsilon", format!("{} is outside [0, 1)", t.epsilon)));
        }
        if c.output.checkpoint_every == Some(0) {
            return Err(invalid("output.checkpoint_every", "must be at least 1"));
        }

        // plan
        let mut plan = TrainPlan::standard(task, c.task.n_train, c.data.train_size, c.data.seed);
        plan.pool_size = pool_size;
        match t.procedure {
            Procedure::Standard => {
                c.train.priming = None;
                c.train.fine_length = None;
                c.train.epsilon = 0.0;
            }
            Procedure::Priming => {
                let spec = t.priming.as_deref().ok_or_else(|| invalid("train.priming", "required for priming runs"))?;
                let shape = PrimingShape::parse(spec).map_err(|e| invalid("train.priming", e.to_string()))?;
                let weights = priming_weights(&shape).map_err(|e| invalid("train.priming", e.to_string()))?;
                if let Some(&n) = weights.keys().find(|&&n| n > width) {
                    return Err(invalid(
                        "train.priming",
                        format!("priming length {n} exceeds the longest evaluation length {width}"),
                    ));
                }
                if t.epsilon > 0.0 && t.epsilon * (c.data.train_size as f64) < 1.0 {
                    return Err(invalid(
                        "train.epsilon",
                        format!("{} of {} examples is less than one priming example", t.epsilon, c.data.train_size),
                    ));
                }
                plan = plan.with_priming(t.epsilon, weights);
                c.train.fine_length = None;
            }
            Procedure::FineTune => {
                let n = t.fine_length.ok_or_else(|| invalid("train.fine_length", "required for fine-tune runs"))?;
                if n == 0 || n > width {
                    return Err(invalid("train.fine_length", format!("{n} is outside 1..={width}")));
                }
                if t.init_checkpoint.is_none() {
                    return Err(invalid("train.init_checkpoint", "required for fine-tune runs"));
                }
                plan = plan.with_fine_tune(n, t.fine_size);
                c.train.priming = None;
                c.train.epsilon = 0.0;
            }
        }
        plan.validate().map_err(|e| invalid("train.procedure", e.to_string()))?;

        let optim = OptimConfig {
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            grad_clip: t.grad_clip,
            ..OptimConfig::default()
        };
        let mut eval_lengths = c.task.n_test.clone();
        eval_lengths.push(c.task.n_train);
        eval_lengths.sort_unstable();
        eval_lengths.dedup();
        let schedule = Schedule {
            epochs: c.train.epochs,
            eval_every: c.train.eval_every,
            eval_lengths,
            eval_count: c.data.test_size,
            checkpoint_every: c.output.checkpoint_every,
            checkpoint_dir: None,
        };
        let precision = c.precision;
        Ok(Resolved { config: c, preset, task, plan, model, optim, schedule, precision })
    }
}

/// A validated config plus the core objects it describes.
#[derive(Debug, Clone)]
pub struct Resolved {
    /// The config with every default made explicit and `scale` folded in.
    pub config: ExperimentConfig,
    /// Preset the config started from, if any.
    pub preset: Option<String>,
    pub task: TaskSpec,
    pub plan: TrainPlan,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub schedule: Schedule,
    pub precision: Precision,
}

impl Resolved {
    /// Stable identifier derived from everything except the output block.
    pub fn run_id(&self) -> String {
        if let Some(id) = &self.config.output.run_id {
            return id.clone();
        }
        let mut h = Sha256::new();
        for (k, v) in self.config.pairs().iter().filter(|(k, _)| !k.starts_with("output.")) {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        format!("run-{hex}")
    }
}
