//! Flat key = value run configuration with strict validation.
//!
//! The format is INI-flavoured: one `key = value` per line, `#` or `;`
//! comments, blank lines, and optional cosmetic `[section]` headers. Keys
//! are global (sections do not scope them), must be unique, and anything
//! outside the documented set is rejected before any computation starts.

use std::path::{Path, PathBuf};

use cliffnet::tasks::TrainConfig;
use cliffnet::{Error, Result, Signature};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Task {
    Regression,
    Hull,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::Hull => "hull",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "regression" => Ok(Task::Regression),
            "hull" => Ok(Task::Hull),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected regression or hull)"
            ))),
        }
    }
}

/// Parse "p,q,r" into a signature.
pub fn parse_signature(s: &str) -> Result<Signature> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("signature {s:?} is not of the form p,q,r")));
    }
    let num = |t: &str| {
        t.parse::<u32>()
            .map_err(|_| Error::Config(format!("signature component {t:?} is not a number")))
    };
    Signature::new(num(parts[0])?, num(parts[1])?, num(parts[2])?)
}

/// Everything a training run needs, validated up front.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub task: Task,
    pub signature: Signature,
    pub train_csv: PathBuf,
    pub test_csv: PathBuf,
    pub train: TrainConfig,
    /// Hidden width of the coordinate-MLP baseline; zero skips it.
    pub baseline_hidden: usize,
    pub out_dir: PathBuf,
    canonical: String,
}

const KNOWN_KEYS: &[&str] = &[
    "task",
    "signature",
    "train_csv",
    "test_csv",
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "lr_min",
    "channels",
    "depth",
    "weight_decay",
    "scalar_gate_hidden",
    "stop_at_test_mse",
    "baseline_hidden",
    "out_dir",
];

fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value, got {line:?}", idx + 1)));
        };
        let key = k.trim().to_string();
        let value = v.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("line {}: unknown key {key:?}", idx + 1)));
        }
        if pairs.iter().any(|(existing, _)| existing == &key) {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", idx + 1)));
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let pairs = parse_lines(text)?;
        let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let require = |key: &str| {
            get(key).ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
        };

        let task = Task::parse(require("task")?)?;
        let signature = parse_signature(require("signature")?)?;
        let train_csv = PathBuf::from(require("train_csv")?);
        let test_csv = PathBuf::from(require("test_csv")?);
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            seed: get("seed").map_or(Ok(defaults.seed), |v| parse_num("seed", v))?,
            epochs: parse_num("epochs", require("epochs")?)?,
            batch_size: get("batch_size")
                .map_or(Ok(defaults.batch_size), |v| parse_num("batch_size", v))?,
            lr: get("lr").map_or(Ok(defaults.lr), |v| parse_num("lr", v))?,
            lr_min: get("lr_min").map(|v| parse_num("lr_min", v)).transpose()?,
            channels: get("channels").map_or(Ok(defaults.channels), |v| parse_num("channels", v))?,
            depth: get("depth").map_or(Ok(defaults.depth), |v| parse_num("depth", v))?,
            weight_decay: get("weight_decay")
                .map_or(Ok(defaults.weight_decay), |v| parse_num("weight_decay", v))?,
            scalar_gate_hidden: get("scalar_gate_hidden")
                .map_or(Ok(defaults.scalar_gate_hidden), |v| parse_num("scalar_gate_hidden", v))?,
            stop_at_test_mse: get("stop_at_test_mse")
                .map(|v| parse_num("stop_at_test_mse", v))
                .transpose()?,
        };
        if train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if train.channels == 0 || train.depth == 0 {
            return Err(Error::Config("channels and depth must be positive".into()));
        }
        if !(train.lr.is_finite() && train.lr > 0.0) {
            return Err(Error::Config("lr must be a positive finite number".into()));
        }
        if !(train.weight_decay.is_finite() && train.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be a non-negative finite number".into()));
        }
        if let Some(lo) = train.lr_min {
            if !(lo.is_finite() && lo >= 0.0 && lo <= train.lr) {
                return Err(Error::Config("lr_min must lie in [0, lr]".into()));
            }
        }
        let baseline_hidden = get("baseline_hidden")
            .map_or(Ok(0usize), |v| parse_num("baseline_hidden", v))?;
        let out_dir = PathBuf::from(get("out_dir").unwrap_or("runs"));

        // Canonical form: sorted key=value pairs. out_dir is excluded so the
        // run identity does not depend on where the outputs land.
        let mut kept: Vec<&(String, String)> =
            pairs.iter().filter(|(k, _)| k != "out_dir").collect();
        kept.sort_by(|a, b| a.0.cmp(&b.0));
        let canonical =
            kept.iter().map(|(k, v)| format!("{k} = {v}\n")).collect::<Vec<_>>().concat();

        Ok(RunConfig {
            task,
            signature,
            train_csv,
            test_csv,
            train,
            baseline_hidden,
            out_dir,
            canonical,
        })
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_text(&text)
    }

    /// Sorted key=value lines (out_dir excluded); what the run hash covers.
    pub fn canonical(&self) -> &str {
        &self.canonical
    }

    /// All outputs of this config land here: {out_dir}/{hash}-s{seed}.
    pub fn run_dir(&self) -> PathBuf {
        let hash = fnv1a(self.canonical.as_bytes());
        self.out_dir.join(format!("{hash:016x}-s{}", self.train.seed))
    }
}

/// FNV-1a, 64-bit. Stable across platforms and good enough to keep run
/// directories collision-free.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
