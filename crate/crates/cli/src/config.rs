//! Flat `key = value` run configuration.
//!
//! Every key is typed and documented in [`KEYS`]. Unknown keys, duplicate
//! keys and malformed values are hard errors. Serializing and re-parsing a
//! config yields the same config.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use stsc_core::data::{RingGeometry, SplitSpec, RING_GEOMETRY};
use stsc_core::model::HeadMode;
use stsc_core::trainer::{Architecture, EvalModel, LossSwitches, LrSchedule, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{key}`; valid keys: {}", valid_keys())]
    UnknownKey { key: String },
    #[error("duplicate config key `{key}` on line {line}")]
    Duplicate { key: String, line: usize },
    #[error("bad value {value:?} for `{key}`: {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

/// Which dataset a run trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Rings,
    Blobs,
    Multilabel,
    Csv,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::Rings => "rings",
            DatasetKind::Blobs => "blobs",
            DatasetKind::Multilabel => "multilabel",
            DatasetKind::Csv => "csv",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rings" => Ok(DatasetKind::Rings),
            "blobs" => Ok(DatasetKind::Blobs),
            "multilabel" => Ok(DatasetKind::Multilabel),
            "csv" => Ok(DatasetKind::Csv),
            _ => Err("expected rings, blobs, multilabel or csv".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// CSV file for `kind = csv`.
    pub path: Option<PathBuf>,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub noise: f64,
    pub rings: RingGeometry,
    /// Flattened image geometry of CSV features, `(height, width)`.
    pub image: Option<(usize, usize)>,
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub arch: Architecture,
    pub train: TrainConfig,
    /// Seeds used by `ablate`: `seed, seed + 1, ...`.
    pub seeds: usize,
    pub out: PathBuf,
    /// Version of the tool that wrote a manifest; informational.
    pub tool_version: Option<String>,
}

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec {
                kind: DatasetKind::Rings,
                path: None,
                n: 1000,
                dim: 2,
                classes: 2,
                separation: 3.0,
                noise: 0.01,
                rings: RING_GEOMETRY,
                image: None,
            },
            split: SplitSpec {
                labeled_ratio: 0.1,
                ..SplitSpec::default()
            },
            arch: Architecture {
                hidden: vec![64, 64],
                conv: None,
            },
            train: TrainConfig {
                lambda_max: 3.0,
                gamma: 10.0,
                epochs: 300,
                batch_size: 16,
                lr_initial: 0.01,
                lr_decay: 0.99,
                noise_sigma: 0.04,
                eval_model: EvalModel::Teacher,
                ..TrainConfig::default()
            },
            seeds: 5,
            out: PathBuf::from("runs/default"),
            tool_version: None,
        }
    }
}

/// `(key, description)` for every accepted key, in serialization order.
pub const KEYS: &[(&str, &str)] = &[
    ("dataset", "rings | blobs | multilabel | csv"),
    ("dataset_path", "CSV file when dataset = csv"),
    ("n", "number of generated samples"),
    ("dim", "feature width of blobs / multilabel"),
    ("classes", "class count of blobs / multilabel"),
    ("separation", "blob center separation"),
    ("data_noise", "generator noise level"),
    ("ring_inner", "inner ring radius"),
    ("ring_outer", "outer ring radius"),
    ("ring_half_width", "half width of each ring"),
    ("image", "HxW geometry of CSV features, or none"),
    ("labeled_ratio", "labeled fraction of the training split, in (0, 1]"),
    ("train_frac", "training fraction"),
    ("val_frac", "validation fraction"),
    ("test_frac", "test fraction"),
    ("hidden", "comma-separated hidden widths"),
    ("conv", "KxC convolution front (kernel x channels), or none"),
    ("lambda_max", "maximum unsupervised weight"),
    ("beta", "weight of the relation consistency term"),
    ("gamma", "weight of the temporal consistency term"),
    ("alpha_ema", "teacher EMA decay"),
    ("tau", "relation binarization threshold"),
    ("ramp_up_epochs", "epochs of the lambda ramp-up"),
    ("tsc_start_epoch", "first epoch of temporal consistency"),
    ("epochs", "training epochs"),
    ("batch_size", "mini-batch size"),
    ("lr_initial", "initial learning rate"),
    ("lr_decay", "per-epoch decay factor (exponential) or power (poly)"),
    ("lr_schedule", "exponential | poly"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam epsilon"),
    ("seed", "root seed of every random stream"),
    ("head_mode", "single | multi"),
    ("use_lc", "enable individual consistency"),
    ("use_lsc", "enable relation consistency"),
    ("use_ltc", "enable temporal consistency"),
    ("noise_sigma", "input noise of both perturbations"),
    ("flip_prob", "horizontal flip probability (image inputs)"),
    ("eval_model", "student | teacher"),
    ("seeds", "number of seeds in ablate"),
    ("out", "output directory"),
    ("tool_version", "version that wrote the manifest"),
];

fn valid_keys() -> String {
    KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_with<T>(key: &str, value: &str, f: impl FnOnce(&str) -> std::result::Result<T, String>) -> Result<T> {
    f(value).map_err(|reason| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason,
    })
}

fn parse_pair(s: &str) -> std::result::Result<Option<(usize, usize)>, String> {
    if s == "none" {
        return Ok(None);
    }
    let (a, b) = s.split_once('x').ok_or("expected AxB or none")?;
    let a = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok(Some((a, b)))
}

fn show_pair(p: Option<(usize, usize)>) -> String {
    p.map_or("none".into(), |(a, b)| format!("{a}x{b}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.dataset;
        let t = &mut self.train;
        match key {
            "dataset" => d.kind = parse_with(key, v, |s| s.parse())?,
            "dataset_path" => d.path = (v != "none").then(|| PathBuf::from(v)),
            "n" => d.n = parse(key, v)?,
            "dim" => d.dim = parse(key, v)?,
            "classes" => d.classes = parse(key, v)?,
            "separation" => d.separation = parse(key, v)?,
            "data_noise" => d.noise = parse(key, v)?,
            "ring_inner" => d.rings.inner = parse(key, v)?,
            "ring_outer" => d.rings.outer = parse(key, v)?,
            "ring_half_width" => d.rings.half_width = parse(key, v)?,
            "image" => d.image = parse_with(key, v, parse_pair)?,
            "labeled_ratio" => self.split.labeled_ratio = parse(key, v)?,
            "train_frac" => self.split.train_frac = parse(key, v)?,
            "val_frac" => self.split.val_frac = parse(key, v)?,
            "test_frac" => self.split.test_frac = parse(key, v)?,
            "hidden" => {
                self.arch.hidden = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',').map(|w| parse(key, w.trim())).collect::<Result<_>>()?
                }
            }
            "conv" => self.arch.conv = parse_with(key, v, parse_pair)?,
            "lambda_max" => t.lambda_max = parse(key, v)?,
            "beta" => t.beta = parse(key, v)?,
            "gamma" => t.gamma = parse(key, v)?,
            "alpha_ema" => t.alpha_ema = parse(key, v)?,
            "tau" => t.tau = parse(key, v)?,
            "ramp_up_epochs" => t.ramp_up_epochs = parse(key, v)?,
            "tsc_start_epoch" => t.tsc_start_epoch = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr_initial" => t.lr_initial = parse(key, v)?,
            "lr_decay" => t.lr_decay = parse(key, v)?,
            "lr_schedule" => {
                t.lr_schedule = parse_with(key, v, |s| match s {
                    "exponential" => Ok(LrSchedule::Exponential),
                    "poly" => Ok(LrSchedule::Poly),
                    _ => Err("expected exponential or poly".into()),
                })?
            }
            "adam_beta1" => t.adam_beta1 = parse(key, v)?,
            "adam_beta2" => t.adam_beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "seed" => {
                t.seed = parse(key, v)?;
                self.split.seed = t.seed;
            }
            "head_mode" => {
                t.head_mode = parse_with(key, v, |s| match s {
                    "single" => Ok(HeadMode::SingleLabel),
                    "multi" => Ok(HeadMode::MultiLabel),
                    _ => Err("expected single or multi".into()),
                })?
            }
            "use_lc" => t.switches.use_lc = parse(key, v)?,
            "use_lsc" => t.switches.use_lsc = parse(key, v)?,
            "use_ltc" => t.switches.use_ltc = parse(key, v)?,
            "noise_sigma" => t.noise_sigma = parse(key, v)?,
            "flip_prob" => t.flip_prob = parse(key, v)?,
            "eval_model" => {
                t.eval_model = parse_with(key, v, |s| match s {
                    "student" => Ok(EvalModel::Student),
                    "teacher" => Ok(EvalModel::Teacher),
                    _ => Err("expected student or teacher".into()),
                })?
            }
            "seeds" => self.seeds = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "tool_version" => self.tool_version = Some(v.to_string()),
            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.dataset;
        let t = &self.train;
        let s = &self.split;
        let hidden = self.arch.hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        let values: Vec<String> = vec![
            d.kind.name().into(),
            d.path.as_ref().map_or("none".into(), |p| p.display().to_string()),
            d.n.to_string(),
            d.dim.to_string(),
            d.classes.to_string(),
            d.separation.to_string(),
            d.noise.to_string(),
            d.rings.inner.to_string(),
            d.rings.outer.to_string(),
            d.rings.half_width.to_string(),
            show_pair(d.image),
            s.labeled_ratio.to_string(),
            s.train_frac.to_string(),
            s.val_frac.to_string(),
            s.test_frac.to_string(),
            if hidden.is_empty() { "none".into() } else { hidden },
            show_pair(self.arch.conv),
            t.lambda_max.to_string(),
            t.beta.to_string(),
            t.gamma.to_string(),
            t.alpha_ema.to_string(),
            t.tau.to_string(),
            t.ramp_up_epochs.to_string(),
            t.tsc_start_epoch.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.lr_initial.to_string(),
            t.lr_decay.to_string(),
            match t.lr_schedule {
                LrSchedule::Exponential => "exponential",
                LrSchedule::Poly => "poly",
            }
            .into(),
            t.adam_beta1.to_string(),
            t.adam_beta2.to_string(),
            t.adam_eps.to_string(),
            t.seed.to_string(),
            match t.head_mode {
                HeadMode::SingleLabel => "single",
                HeadMode::MultiLabel => "multi",
            }
            .into(),
            t.switches.use_lc.to_string(),
            t.switches.use_lsc.to_string(),
            t.switches.use_ltc.to_string(),
            t.noise_sigma.to_string(),
            t.flip_prob.to_string(),
            match t.eval_model {
                EvalModel::Student => "student",
                EvalModel::Teacher => "teacher",
            }
            .into(),
            self.seeds.to_string(),
            self.out.display().to_string(),
            self.tool_version.clone().unwrap_or_else(|| "none".into()),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    key: key.into(),
                    line: i + 1,
                });
            }
            if key == "tool_version" && value.trim() == "none" {
                continue;
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_str(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: 0,
                text: o.to_string(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ((key, value), (_, doc)) in self.entries().into_iter().zip(KEYS) {
            out.push_str(&format!("# {doc}\n{key} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.dataset.kind == DatasetKind::Csv && self.dataset.path.is_none() {
            return Err(ConfigError::Invalid("dataset = csv needs dataset_path".into()));
        }
        let multi = self.dataset.kind == DatasetKind::Multilabel;
        if multi != (self.train.head_mode == HeadMode::MultiLabel) && self.dataset.kind != DatasetKind::Csv {
            return Err(ConfigError::Invalid(format!(
                "head_mode does not match dataset {}",
                self.dataset.kind.name()
            )));
        }
        if self.seeds == 0 {
            return Err(ConfigError::Invalid("seeds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_switches(&self, switches: LossSwitches) -> RunConfig {
        let mut c = self.clone();
        c.train.switches = switches;
        c
    }

    pub fn with_seed(&self, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.train.seed = seed;
        c.split.seed = seed;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse_str(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::parse_str("lamda_max = 2").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lamda_max") && msg.contains("lambda_max") && msg.contains("tau"));
    }

    #[test]
    fn duplicate_and_syntax_errors() {
        assert!(matches!(RunConfig::parse_str("tau = 0.5\ntau = 0.6"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(RunConfig::parse_str("\n\ntau 0.5"), Err(ConfigError::Syntax { line: 3, .. })));
        assert!(matches!(RunConfig::parse_str("epochs = many"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut c = RunConfig::parse_str("seed = 3 # root\n").unwrap();
        assert_eq!(c.train.seed, 3);
        c.apply_overrides(&["seed=1", "hidden=8, 4", "conv=3x2", "use_ltc=false"]).unwrap();
        assert_eq!(c.train.seed, 1);
        assert_eq!(c.split.seed, 1);
        assert_eq!(c.arch.hidden, vec![8, 4]);
        assert_eq!(c.arch.conv, Some((3, 2)));
        assert!(!c.train.switches.use_ltc);
        assert_eq!(RunConfig::parse_str(&c.to_text()).unwrap(), c);
    }
}
