//! Dataset presets and the flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::PIANO_KEYS;
use crate::error::{Error, Result};
use crate::init::InitPreset;
use crate::math::Nonlinearity;
use crate::model::{Architecture, ModelConfig, OutputHead};
use crate::optimize::{Schedule, Tau0, TrainPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetPreset {
    Nottingham,
    JsbChorales,
    MuseData,
    Char,
    Word,
}

impl DatasetPreset {
    pub const ALL: [DatasetPreset; 5] = [
        DatasetPreset::Nottingham,
        DatasetPreset::JsbChorales,
        DatasetPreset::MuseData,
        DatasetPreset::Char,
        DatasetPreset::Word,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetPreset::Nottingham => "nottingham",
            DatasetPreset::JsbChorales => "jsb",
            DatasetPreset::MuseData => "musedata",
            DatasetPreset::Char => "char",
            DatasetPreset::Word => "word",
        }
    }

    pub fn is_music(self) -> bool {
        matches!(self, DatasetPreset::Nottingham | DatasetPreset::JsbChorales | DatasetPreset::MuseData)
    }

    pub fn init_preset(self) -> InitPreset {
        match self {
            DatasetPreset::Char => InitPreset::Char,
            DatasetPreset::Word => InitPreset::Word,
            _ => InitPreset::Music,
        }
    }

    /// Input/output width: 88 keys, or a typical vocabulary size for text.
    pub fn default_vocab_size(self) -> usize {
        match self {
            DatasetPreset::Char => 50,
            DatasetPreset::Word => 10_000,
            _ => PIANO_KEYS,
        }
    }

    pub fn seq_len(self) -> usize {
        match self {
            DatasetPreset::JsbChorales => 50,
            _ => 200,
        }
    }

    pub fn beta(self) -> Option<f64> {
        match self {
            DatasetPreset::Nottingham => Some(2330.0),
            DatasetPreset::MuseData => Some(1475.0),
            DatasetPreset::JsbChorales => Some(100.0),
            DatasetPreset::Char | DatasetPreset::Word => None,
        }
    }

    pub fn weight_noise_std(self) -> f64 {
        match self {
            DatasetPreset::Char => 0.0,
            _ => 0.075,
        }
    }

    pub fn schedule_kind(self) -> ScheduleKind {
        if self.is_music() {
            ScheduleKind::Inverse
        } else {
            ScheduleKind::Halving
        }
    }

    /// Layer sizes of the reference model for `arch`.
    pub fn model(self, arch: Architecture) -> ModelConfig {
        use Architecture as A;
        use DatasetPreset as D;
        let v = self.default_vocab_size();
        let (rnn, deep, out_inter, srnn) = match self {
            D::Nottingham => (600, 400, 400, 400),
            D::JsbChorales => (200, 400, 400, 400),
            D::MuseData => (600, 400, 400, 600),
            D::Char => (600, 400, 600, 400),
            D::Word => (200, 200, 200, 400),
        };
        let mut c = match arch {
            A::Rnn => ModelConfig::new(arch, v, v, rnn),
            A::Dt | A::Dts => ModelConfig::new(arch, v, v, deep).with_transition_inter(deep),
            A::Dot | A::Dots => ModelConfig::new(arch, v, v, deep)
                .with_transition_inter(deep)
                .with_output_inter(out_inter),
            A::Srnn => ModelConfig::new(arch, v, v, srnn).with_levels(2),
        };
        if self.is_music() {
            c.output_head = OutputHead::Bernoulli;
        }
        if self == D::Char {
            c.output_inter_nl = Nonlinearity::Rectifier;
        }
        c
    }
}

impl fmt::Display for DatasetPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .or(match s {
                "jsb_chorales" | "jsbchorales" => Some(DatasetPreset::JsbChorales),
                _ => None,
            })
            .ok_or_else(|| Error::config(format!("unknown dataset preset `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Inverse,
    Halving,
}

impl ScheduleKind {
    fn name(self) -> &'static str {
        match self {
            ScheduleKind::Inverse => "inverse",
            ScheduleKind::Halving => "halving",
        }
    }
}

/// Non-empty, non-comment lines of a `key=value` file as
/// `(line number, key, value)`. Duplicate keys are rejected.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key=value`, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err("empty key".into()));
        }
        if let Some(first) = seen.insert(k.to_string(), i + 1) {
            return Err(err(format!("`{k}` already set on line {first}")));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_nl(key: &str, v: &str) -> Result<Nonlinearity> {
    Nonlinearity::parse(v).ok_or_else(|| Error::config(format!("unknown nonlinearity `{v}` for `{key}`")))
}

fn parse_optional<T: FromStr>(key: &str, v: &str, none: &str) -> Result<Option<T>> {
    if v == none {
        Ok(None)
    } else {
        parse_value(key, v).map(Some)
    }
}

pub const MODEL_KEYS: [&str; 11] = [
    "architecture",
    "input_dim",
    "output_dim",
    "hidden_dim",
    "transition_inter_dim",
    "output_inter_dim",
    "levels",
    "hidden_nl",
    "transition_inter_nl",
    "output_inter_nl",
    "output_head",
];

/// Every model field as `key=value` pairs in a fixed order.
pub fn model_config_entries(c: &ModelConfig) -> Vec<(&'static str, String)> {
    let values = [
        c.architecture.to_string(),
        c.input_dim.to_string(),
        c.output_dim.to_string(),
        c.hidden_dim.to_string(),
        c.transition_inter_dim.to_string(),
        c.output_inter_dim.to_string(),
        c.levels.to_string(),
        c.hidden_nl.name().to_string(),
        c.transition_inter_nl.name().to_string(),
        c.output_inter_nl.name().to_string(),
        c.output_head.name().to_string(),
    ];
    MODEL_KEYS.into_iter().zip(values).collect()
}

/// Sets one model field. Returns false if `key` is not a model key.
fn set_model_field(c: &mut ModelConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "architecture" => c.architecture = v.parse()?,
        "input_dim" => c.input_dim = parse_value(key, v)?,
        "output_dim" => c.output_dim = parse_value(key, v)?,
        "hidden_dim" => c.hidden_dim = parse_value(key, v)?,
        "transition_inter_dim" => c.transition_inter_dim = parse_value(key, v)?,
        "output_inter_dim" => c.output_inter_dim = parse_value(key, v)?,
        "levels" => c.levels = parse_value(key, v)?,
        "hidden_nl" => c.hidden_nl = parse_nl(key, v)?,
        "transition_inter_nl" => c.transition_inter_nl = parse_nl(key, v)?,
        "output_inter_nl" => c.output_inter_nl = parse_nl(key, v)?,
        "output_head" => c.output_head = v.parse()?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn model_config_to_text(c: &ModelConfig) -> String {
    model_config_entries(c)
        .into_iter()
        .fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k}={v}");
            s
        })
}

/// Inverse of [`model_config_to_text`]; every key must be present.
pub fn model_config_from_text(text: &str) -> Result<ModelConfig> {
    let entries = parse_key_values(text, Path::new("<model config>"))?;
    let mut c = ModelConfig::new(Architecture::Rnn, 1, 1, 1);
    for (_, k, v) in &entries {
        if !set_model_field(&mut c, k, v)? {
            return Err(Error::config(format!("unknown model key `{k}`")));
        }
    }
    if let Some(missing) = MODEL_KEYS.iter().find(|k| !entries.iter().any(|(_, e, _)| e == *k)) {
        return Err(Error::config(format!("model key `{missing}` missing")));
    }
    c.validate()?;
    Ok(c)
}

/// Everything a training or evaluation run needs. Built from preset
/// defaults, then overridden key by key.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: DatasetPreset,
    pub model: ModelConfig,
    pub schedule: ScheduleKind,
    pub learning_rate: f64,
    pub tau0: Tau0,
    pub beta: Option<f64>,
    pub halving_threshold: f64,
    pub clip_threshold: f64,
    pub weight_noise_std: f64,
    pub max_epochs: usize,
    pub max_updates: Option<u64>,
    pub patience: usize,
    pub eval_every: Option<u64>,
    pub seed: u64,
    pub seq_len: usize,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub parent: Option<PathBuf>,
    pub out_dir: PathBuf,
}

const DEFAULT_LEARNING_RATE: f64 = 0.1;
const DEFAULT_HALVING_THRESHOLD: f64 = 0.003;
const DEFAULT_PATIENCE: usize = 10;
const DEFAULT_MAX_EPOCHS: usize = 100;

impl RunConfig {
    pub fn preset_defaults(preset: DatasetPreset, arch: Architecture) -> Self {
        RunConfig {
            preset,
            model: preset.model(arch),
            schedule: preset.schedule_kind(),
            learning_rate: DEFAULT_LEARNING_RATE,
            tau0: Tau0::Auto,
            beta: preset.beta(),
            halving_threshold: DEFAULT_HALVING_THRESHOLD,
            clip_threshold: 1.0,
            weight_noise_std: preset.weight_noise_std(),
            max_epochs: DEFAULT_MAX_EPOCHS,
            max_updates: None,
            patience: DEFAULT_PATIENCE,
            eval_every: None,
            seed: 0,
            seq_len: preset.seq_len(),
            train: None,
            valid: None,
            test: None,
            parent: None,
            out_dir: PathBuf::from("out"),
        }
    }

    /// Parses a run file. `preset` is required; `architecture` defaults to
    /// `rnn`. Relative paths are resolved against `base_dir`.
    pub fn from_text(text: &str, path: &Path, base_dir: &Path) -> Result<Self> {
        let entries = parse_key_values(text, path)?;
        let lookup = |key: &str| entries.iter().find(|(_, k, _)| k == key).map(|(_, _, v)| v.as_str());
        let preset: DatasetPreset = lookup("preset")
            .ok_or_else(|| Error::config(format!("{}: `preset` is required", path.display())))?
            .parse()?;
        let arch: Architecture = lookup("architecture").unwrap_or("rnn").parse()?;
        let mut cfg = RunConfig::preset_defaults(preset, arch);
        cfg.out_dir = base_dir.join(&cfg.out_dir);
        for (line, k, v) in &entries {
            cfg.set(k, v, base_dir).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                message: match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                },
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_text(&text, path, base)
    }

    /// Applies one override.
    pub fn set(&mut self, key: &str, v: &str, base_dir: &Path) -> Result<()> {
        let path = |v: &str| -> Option<PathBuf> {
            (v != "none").then(|| {
                let p = PathBuf::from(v);
                if p.is_relative() {
                    base_dir.join(p)
                } else {
                    p
                }
            })
        };
        match key {
            "preset" => {}
            "vocab_size" => {
                let n = parse_value(key, v)?;
                self.model.input_dim = n;
                self.model.output_dim = n;
            }
            "schedule" => {
                self.schedule = match v {
                    "inverse" => ScheduleKind::Inverse,
                    "halving" => ScheduleKind::Halving,
                    _ => return Err(Error::config(format!("unknown schedule `{v}`"))),
                }
            }
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "tau0" => {
                self.tau0 = match parse_optional(key, v, "auto")? {
                    Some(t) => Tau0::At(t),
                    None => Tau0::Auto,
                }
            }
            "beta" => self.beta = parse_optional(key, v, "none")?,
            "halving_threshold" => self.halving_threshold = parse_value(key, v)?,
            "clip_threshold" => self.clip_threshold = parse_value(key, v)?,
            "weight_noise_std" => self.weight_noise_std = parse_value(key, v)?,
            "max_epochs" => self.max_epochs = parse_value(key, v)?,
            "max_updates" => self.max_updates = parse_optional(key, v, "none")?,
            "patience" => self.patience = parse_value(key, v)?,
            "eval_every" => self.eval_every = parse_optional(key, v, "epoch")?,
            "seed" => self.seed = parse_value(key, v)?,
            "seq_len" => self.seq_len = parse_value(key, v)?,
            "train" => self.train = path(v),
            "valid" => self.valid = path(v),
            "test" => self.test = path(v),
            "parent" => self.parent = path(v),
            "out_dir" => self.out_dir = path(v).unwrap_or_else(|| base_dir.join("out")),
            _ => {
                if !set_model_field(&mut self.model, key, v)? {
                    return Err(Error::config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seq_len == 0 {
            return Err(Error::config("seq_len must be at least 1"));
        }
        self.plan()?.validate()
    }

    pub fn plan(&self) -> Result<TrainPlan> {
        let schedule = match self.schedule {
            ScheduleKind::Inverse => Schedule::Inverse {
                base_lr: self.learning_rate,
                tau0: self.tau0,
                beta: self
                    .beta
                    .ok_or_else(|| Error::config("the inverse schedule needs `beta`"))?,
            },
            ScheduleKind::Halving => Schedule::Halving {
                initial_lr: self.learning_rate,
                significance_threshold: self.halving_threshold,
            },
        };
        Ok(TrainPlan {
            schedule,
            clip_threshold: self.clip_threshold,
            weight_noise_std: self.weight_noise_std,
            max_epochs: self.max_epochs,
            max_updates: self.max_updates,
            patience: self.patience,
            seed: self.seed,
            eval_every: self.eval_every,
        })
    }

    /// Every key with the value actually in effect. Parses back to an
    /// equal config.
    pub fn to_resolved_text(&self) -> String {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("preset", self.preset.to_string());
        for (k, v) in model_config_entries(&self.model) {
            put(k, v);
        }
        put("schedule", self.schedule.name().to_string());
        put("learning_rate", self.learning_rate.to_string());
        put(
            "tau0",
            match self.tau0 {
                Tau0::Auto => "auto".to_string(),
                Tau0::At(t) => t.to_string(),
            },
        );
        put("beta", self.beta.map_or("none".to_string(), |b| b.to_string()));
        put("halving_threshold", self.halving_threshold.to_string());
        put("clip_threshold", self.clip_threshold.to_string());
        put("weight_noise_std", self.weight_noise_std.to_string());
        put("max_epochs", self.max_epochs.to_string());
        put("max_updates", self.max_updates.map_or("none".to_string(), |m| m.to_string()));
        put("patience", self.patience.to_string());
        put("eval_every", self.eval_every.map_or("epoch".to_string(), |m| m.to_string()));
        put("seed", self.seed.to_string());
        put("seq_len", self.seq_len.to_string());
        put("train", opt_path(&self.train));
        put("valid", opt_path(&self.valid));
        put("test", opt_path(&self.test));
        put("parent", opt_path(&self.parent));
        put("out_dir", self.out_dir.display().to_string());
        s
    }
}
