//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hvslu::corpus::CorpusConfig;
use hvslu::history::{ExtractorConfig, ExtractorKind};
use hvslu::slu::{ModelConfig, Phase, Preset, TrainConfig};
use hvslu::train::OptimConfig;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Which h-vector source an experiment uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorChoice {
    None,
    Kind(ExtractorKind),
}

impl std::fmt::Display for ExtractorChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::Kind(k) => k.fmt(f),
        }
    }
}

impl std::str::FromStr for ExtractorChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "none" {
            Ok(Self::None)
        } else {
            s.parse().map(Self::Kind)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub corpus_seed: u64,
    pub n_dialogs: usize,
    pub rho: f64,
    pub background_rate: f64,
    pub max_turns: usize,
    pub feature_seed: u64,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub extractor: ExtractorChoice,
    pub freq_k: usize,
    pub hvec_epochs: usize,
    pub hvec_batch_size: usize,
    pub preset: Preset,
    pub joint: bool,
    pub phase: Phase,
    /// Overrides the phase's default epoch budget.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            corpus_seed: c.generator.seed,
            n_dialogs: c.generator.n_dialogs,
            rho: c.generator.rho,
            background_rate: c.generator.background_rate,
            max_turns: c.generator.max_turns,
            feature_seed: c.features.seed,
            feature_dim: c.features.feature_dim,
            noise_sigma: c.features.noise_sigma,
            extractor: ExtractorChoice::None,
            freq_k: 4,
            hvec_epochs: ExtractorConfig::default().epochs,
            hvec_batch_size: ExtractorConfig::default().batch_size,
            preset: Preset::Desk,
            joint: false,
            phase: Phase::Direct,
            epochs: None,
            batch_size: 4,
            learning_rate: OptimConfig::default().learning_rate,
            seed: 1,
            out_dir: None,
        }
    }
}

const KEYS: &[&str] = &[
    "corpus_seed",
    "n_dialogs",
    "rho",
    "background_rate",
    "max_turns",
    "feature_seed",
    "feature_dim",
    "noise_sigma",
    "extractor",
    "freq_k",
    "hvec_epochs",
    "hvec_batch_size",
    "preset",
    "joint",
    "phase",
    "epochs",
    "batch_size",
    "learning_rate",
    "seed",
    "out_dir",
];

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Parse {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if seen.insert(key.to_string(), line).is_some() {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            cfg.set(key, value).map_err(|message| ConfigError::Parse { line, message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("invalid value {v:?} for {key}"))
        }
        match key {
            "corpus_seed" => self.corpus_seed = p(key, v)?,
            "n_dialogs" => self.n_dialogs = p(key, v)?,
            "rho" => self.rho = p(key, v)?,
            "background_rate" => self.background_rate = p(key, v)?,
            "max_turns" => self.max_turns = p(key, v)?,
            "feature_seed" => self.feature_seed = p(key, v)?,
            "feature_dim" => self.feature_dim = p(key, v)?,
            "noise_sigma" => self.noise_sigma = p(key, v)?,
            "extractor" => self.extractor = v.parse()?,
            "freq_k" => self.freq_k = p(key, v)?,
            "hvec_epochs" => self.hvec_epochs = p(key, v)?,
            "hvec_batch_size" => self.hvec_batch_size = p(key, v)?,
            "preset" => self.preset = v.parse()?,
            "joint" => self.joint = p(key, v)?,
            "phase" => self.phase = v.parse()?,
            "epochs" => self.epochs = Some(p(key, v)?),
            "batch_size" => self.batch_size = p(key, v)?,
            "learning_rate" => self.learning_rate = p(key, v)?,
            "seed" => self.seed = p(key, v)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            _ => unreachable!("key list checked"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.hvec_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    /// Resolved configuration, one key per line in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("corpus_seed", self.corpus_seed.to_string());
        kv("n_dialogs", self.n_dialogs.to_string());
        kv("rho", self.rho.to_string());
        kv("background_rate", self.background_rate.to_string());
        kv("max_turns", self.max_turns.to_string());
        kv("feature_seed", self.feature_seed.to_string());
        kv("feature_dim", self.feature_dim.to_string());
        kv("noise_sigma", self.noise_sigma.to_string());
        kv("extractor", self.extractor.to_string());
        kv("freq_k", self.freq_k.to_string());
        kv("hvec_epochs", self.hvec_epochs.to_string());
        kv("hvec_batch_size", self.hvec_batch_size.to_string());
        kv("preset", self.preset.to_string());
        kv("joint", self.joint.to_string());
        kv("phase", self.phase.to_string());
        if let Some(e) = self.epochs {
            kv("epochs", e.to_string());
        }
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("seed", self.seed.to_string());
        if let Some(o) = &self.out_dir {
            kv("out_dir", o.display().to_string());
        }
        s
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        let mut c = CorpusConfig::default();
        c.generator.seed = self.corpus_seed;
        c.generator.n_dialogs = self.n_dialogs;
        c.generator.rho = self.rho;
        c.generator.background_rate = self.background_rate;
        c.generator.max_turns = self.max_turns;
        c.features.seed = self.feature_seed;
        c.features.feature_dim = self.feature_dim;
        c.features.noise_sigma = self.noise_sigma;
        c
    }

    pub fn extractor_config(&self) -> ExtractorConfig {
        ExtractorConfig {
            max_turns: self.max_turns,
            epochs: self.hvec_epochs,
            batch_size: self.hvec_batch_size,
            optim: OptimConfig {
                learning_rate: self.learning_rate,
                ..OptimConfig::default()
            },
            seed: self.seed,
            ..ExtractorConfig::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            seed: self.seed,
            ..ModelConfig::preset(self.preset)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::new(self.phase, self.seed);
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        t.batch_size = self.batch_size;
        t.optim.learning_rate = self.learning_rate;
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let text = "# pilot\nseed = 3\nextractor = supervised-all  # inline\n\nphase=pretrain_zero\nepochs = 2\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.extractor, ExtractorChoice::Kind(ExtractorKind::SupervisedAll));
        assert_eq!(c.phase, Phase::PretrainZero);
        assert_eq!(c.train_config().epochs, 2);
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            ExperimentConfig::parse("seed = 1\n\nlayers = 3\n"),
            Err(ConfigError::UnknownKey {
                line: 3,
                key: "layers".into()
            })
        );
        assert!(matches!(
            ExperimentConfig::parse("seed = one"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("seed = 1\nrho 0.5"),
            Err(ConfigError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("seed = 1\nseed = 2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(ExperimentConfig::parse("rho = 1.5"), Err(ConfigError::Invalid(_))));
    }
}
