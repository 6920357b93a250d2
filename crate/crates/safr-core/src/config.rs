//! Flat key=value run configuration shared by every CLI subcommand.
//! File values override defaults; command-line flags override file values.
//! Unknown keys are a hard error so typos never silently fall back.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::ModelConfig;
use crate::repr_metrics::LayerTag;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config line {line}: expected key=value, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?} ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
}

/// Every tunable of a run with defaults for each field. The effective
/// values are echoed to the run manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_tsv: String,
    pub test_tsv: String,
    pub cache: String,
    pub classes: usize,
    pub min_freq: usize,
    pub dev_fraction: f64,
    pub max_len: usize,
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub use_vmask: bool,
    pub vmask_tau: f64,
    pub vmask_info_coeff: f64,
    pub disable_pe: bool,
    pub lambda_imp: f64,
    pub lambda_inter: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub out_dir: String,
    pub k: f64,
    pub layer: LayerTag,
    pub edge_threshold: f64,
    pub layout_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let out_dir = std::env::var("SAFR_OUT_DIR").unwrap_or_else(|_| "out".into());
        RunConfig {
            train_tsv: String::new(),
            test_tsv: String::new(),
            cache: String::new(),
            classes: 2,
            min_freq: 2,
            dev_fraction: 0.2,
            max_len: 128,
            embed_dim: 256,
            ff_dim: 1024,
            heads: 4,
            dropout: 0.1,
            use_vmask: true,
            vmask_tau: 0.5,
            vmask_info_coeff: 0.0,
            disable_pe: false,
            lambda_imp: 0.1,
            lambda_inter: 0.1,
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            patience: 3,
            eval_every: 0,
            seed: 0,
            out_dir,
            k: 30.0,
            layer: LayerTag::Fc1,
            edge_threshold: crate::viz::DEFAULT_EDGE_THRESHOLD,
            layout_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: i + 1,
                text: raw.to_string(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one key=value pair; used by both the file loader and
    /// flag overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                reason: e.to_string(),
            })
        }
        match key {
            "train_tsv" => self.train_tsv = value.to_string(),
            "test_tsv" => self.test_tsv = value.to_string(),
            "cache" => self.cache = value.to_string(),
            "classes" => self.classes = parse(key, value)?,
            "min_freq" => self.min_freq = parse(key, value)?,
            "dev_fraction" => self.dev_fraction = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "ff_dim" => self.ff_dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "use_vmask" => self.use_vmask = parse(key, value)?,
            "vmask_tau" => self.vmask_tau = parse(key, value)?,
            "vmask_info_coeff" => self.vmask_info_coeff = parse(key, value)?,
            "disable_pe" => self.disable_pe = parse(key, value)?,
            "lambda_imp" => self.lambda_imp = parse(key, value)?,
            "lambda_inter" => self.lambda_inter = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            "k" => self.k = parse(key, value)?,
            "layer" => {
                self.layer = LayerTag::parse(value).ok_or_else(|| ConfigError::BadValue {
                    key: key.to_string(),
                    value: value.to_string(),
                    reason: "expected embedding|vmask|attention|fc1|fc2".to_string(),
                })?
            }
            "edge_threshold" => self.edge_threshold = parse(key, value)?,
            "layout_seed" => self.layout_seed = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            ff_dim: self.ff_dim,
            heads: self.heads,
            classes: self.classes,
            vocab_size,
            max_len: self.max_len,
            dropout: self.dropout,
            seed: self.seed,
            use_vmask: self.use_vmask,
            vmask_tau: self.vmask_tau,
            vmask_info_coeff: self.vmask_info_coeff,
            disable_pe: self.disable_pe,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda_imp: self.lambda_imp,
            lambda_inter: self.lambda_inter,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            grad_clip: self.grad_clip,
            seed: self.seed,
            patience: self.patience,
            eval_every: self.eval_every,
        }
    }

    /// Effective config as sorted key=value lines, parseable by
    /// `from_file`; re-running from this text reproduces the run.
    pub fn echo(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("train_tsv", self.train_tsv.clone());
        map.insert("test_tsv", self.test_tsv.clone());
        map.insert("cache", self.cache.clone());
        map.insert("classes", self.classes.to_string());
        map.insert("min_freq", self.min_freq.to_string());
        map.insert("dev_fraction", self.dev_fraction.to_string());
        map.insert("max_len", self.max_len.to_string());
        map.insert("embed_dim", self.embed_dim.to_string());
        map.insert("ff_dim", self.ff_dim.to_string());
        map.insert("heads", self.heads.to_string());
        map.insert("dropout", self.dropout.to_string());
        map.insert("use_vmask", self.use_vmask.to_string());
        map.insert("vmask_tau", self.vmask_tau.to_string());
        map.insert("vmask_info_coeff", self.vmask_info_coeff.to_string());
        map.insert("disable_pe", self.disable_pe.to_string());
        map.insert("lambda_imp", self.lambda_imp.to_string());
        map.insert("lambda_inter", self.lambda_inter.to_string());
        map.insert("epochs", self.epochs.to_string());
        map.insert("batch_size", self.batch_size.to_string());
        map.insert("lr", self.lr.to_string());
        map.insert("beta1", self.beta1.to_string());
        map.insert("beta2", self.beta2.to_string());
        map.insert("adam_eps", self.adam_eps.to_string());
        map.insert("grad_clip", self.grad_clip.to_string());
        map.insert("patience", self.patience.to_string());
        map.insert("eval_every", self.eval_every.to_string());
        map.insert("seed", self.seed.to_string());
        map.insert("out_dir", self.out_dir.clone());
        map.insert("k", self.k.to_string());
        map.insert("layer", self.layer.name().to_string());
        map.insert("edge_threshold", self.edge_threshold.to_string());
        map.insert("layout_seed", self.layout_seed.to_string());
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        PathBuf::from(&self.out_dir).join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_cfg(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_values_comments_and_blanks() {
        let f = write_cfg(
            "# run settings\nlambda_imp = 0.25\nheads=8  # inline comment\n\nlayer=fc2\n",
        );
        let cfg = RunConfig::from_file(f.path()).unwrap();
        assert_eq!(cfg.lambda_imp, 0.25);
        assert_eq!(cfg.heads, 8);
        assert_eq!(cfg.layer, LayerTag::Fc2);
        assert_eq!(cfg.epochs, RunConfig::default().epochs);
    }

    #[test]
    fn unknown_key_is_hard_error() {
        let f = write_cfg("lamda_imp=0.1\n");
        match RunConfig::from_file(f.path()) {
            Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "lamda_imp"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn bad_value_reports_key() {
        let f = write_cfg("epochs=three\n");
        assert!(matches!(
            RunConfig::from_file(f.path()),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("lambda_inter", "0.05").unwrap();
        cfg.set("seed", "99").unwrap();
        let f = write_cfg(&cfg.echo());
        let back = RunConfig::from_file(f.path()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_win_over_file() {
        let f = write_cfg("seed=1\n");
        let mut cfg = RunConfig::from_file(f.path()).unwrap();
        cfg.set("seed", "2").unwrap(); // flag override
        assert_eq!(cfg.seed, 2);
    }
}
