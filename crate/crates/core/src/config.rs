//! Model and experiment configuration.
//!
//! Configuration files are flat `key = value` text; `#` starts a comment.
//! Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::interaction;
use crate::trainer::{OrderMode, TrainConfig};

/// Architecture and pipeline hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub base_layers: usize,
    pub calib_layers: usize,
    pub group_layers: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub window: usize,
    pub stride: usize,
    /// feedback prototypes per query
    pub m: usize,
    /// group size
    pub n: usize,
    /// overlap between consecutive groups
    pub o: usize,
    /// candidate pool size
    pub k: usize,
    /// average the calibrated vector with the original
    pub residual: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            heads: 4,
            base_layers: 2,
            calib_layers: 2,
            group_layers: 4,
            vocab_size: interaction::DEFAULT_VOCAB_SIZE,
            max_seq_len: interaction::DEFAULT_MAX_SEQ_LEN,
            window: interaction::DEFAULT_WINDOW,
            stride: interaction::DEFAULT_STRIDE,
            m: 4,
            n: 60,
            o: 4,
            k: 1000,
            residual: true,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.base_encoder_config().validate()?;
        self.calib_encoder_config().validate()?;
        self.group_encoder_config().validate()?;
        if self.vocab_size <= interaction::RESERVED_IDS as usize {
            return Err(Error::InvalidConfig(format!(
                "vocab_size must exceed the {} reserved ids",
                interaction::RESERVED_IDS
            )));
        }
        if self.o >= self.n {
            return Err(Error::OverlapTooLarge {
                overlap: self.o,
                group: self.n,
            });
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::InvalidConfig("stride must be in 1..=window".into()));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden
    }

    /// Interaction encoder over token sequences.
    pub fn base_encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.base_layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn_dim: self.ffn_dim(),
            use_positional: true,
            max_positions: self.max_seq_len,
            vocab_size: self.vocab_size,
            use_segments: true,
            token_inputs: true,
        }
    }

    /// Two-vector calibration encoder; positional embeddings stay enabled
    /// for its fixed-order (prototype, candidate) input.
    pub fn calib_encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.calib_layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn_dim: self.ffn_dim(),
            use_positional: true,
            max_positions: 2,
            vocab_size: 1,
            use_segments: false,
            token_inputs: false,
        }
    }

    /// Groupwise scorer encoder; no positional embeddings, so scores are
    /// equivariant under permutations of the group.
    pub fn group_encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.group_layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn_dim: self.ffn_dim(),
            use_positional: false,
            max_positions: self.n,
            vocab_size: 1,
            use_segments: false,
            token_inputs: false,
        }
    }
}

/// Everything a run needs: model shape plus training settings, parsed from
/// one flat config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub order_mode: OrderMode,
    pub folds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 5,
            base_lr: 3e-6,
            warmup_fraction: 0.10,
            order_mode: OrderMode::Shuffled,
            folds: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            n: self.model.n,
            m: self.model.m,
            o: self.model.o,
            base_lr: self.base_lr,
            warmup_fraction: self.warmup_fraction,
            order_mode: self.order_mode,
            seed: self.model.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::ParseLine {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad value {value:?} for {key}")))
        }
        match key {
            "hidden" => self.model.hidden = num(key, value)?,
            "heads" => self.model.heads = num(key, value)?,
            "base_layers" => self.model.base_layers = num(key, value)?,
            "calib_layers" => self.model.calib_layers = num(key, value)?,
            "group_layers" => self.model.group_layers = num(key, value)?,
            "vocab_size" => self.model.vocab_size = num(key, value)?,
            "max_seq_len" => self.model.max_seq_len = num(key, value)?,
            "window" => self.model.window = num(key, value)?,
            "stride" => self.model.stride = num(key, value)?,
            "m" => self.model.m = num(key, value)?,
            "n" => self.model.n = num(key, value)?,
            "o" => self.model.o = num(key, value)?,
            "k" => self.model.k = num(key, value)?,
            "residual" => self.model.residual = num(key, value)?,
            "seed" => self.model.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "warmup_fraction" => self.warmup_fraction = num(key, value)?,
            "order_mode" => self.order_mode = value.parse()?,
            "folds" => self.folds = num(key, value)?,
            other => {
                return Err(Error::InvalidConfig(format!("unknown key: {other}")));
            }
        }
        Ok(())
    }

    /// Canonical key=value rendering (stable order, parseable back).
    pub fn to_config_string(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        for (k, v) in [
            ("hidden", m.hidden.to_string()),
            ("heads", m.heads.to_string()),
            ("base_layers", m.base_layers.to_string()),
            ("calib_layers", m.calib_layers.to_string()),
            ("group_layers", m.group_layers.to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("max_seq_len", m.max_seq_len.to_string()),
            ("window", m.window.to_string()),
            ("stride", m.stride.to_string()),
            ("m", m.m.to_string()),
            ("n", m.n.to_string()),
            ("o", m.o.to_string()),
            ("k", m.k.to_string()),
            ("residual", m.residual.to_string()),
            ("seed", m.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("warmup_fraction", self.warmup_fraction.to_string()),
            ("order_mode", self.order_mode.to_string()),
            ("folds", self.folds.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
