//! Flat `key = value` configuration with dotted namespaces.

use crate::contrastive::Aggregation;
use crate::encoders::ModelConfig;
use crate::error::{MuserError, Result};
use crate::signal::StftConfig;
use crate::text::{TemplateSpec, DEFAULT_MAX_LEN, DEFAULT_TEMPLATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = MuserError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(MuserError::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub spectrum_enabled: bool,
    pub aggregation: Aggregation,
    /// Emit an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub logit_scale_max: Option<f64>,
    pub template: String,
    pub max_len: usize,
    pub stft: StftConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 10,
            lr: 3e-4,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            spectrum_enabled: true,
            aggregation: Aggregation::Mean,
            checkpoint_every: 0,
            logit_scale_max: None,
            template: DEFAULT_TEMPLATE.to_string(),
            max_len: DEFAULT_MAX_LEN,
            stft: StftConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

/// Every recognised key, in serialization order.
pub const KEYS: &[&str] = &[
    "model.audio_dim",
    "model.audio_hidden",
    "model.embed_dim",
    "model.frame_feat",
    "model.grid",
    "model.spec_dim",
    "model.spec_hidden",
    "model.text_dim",
    "model.vocab_size",
    "stft.eps",
    "stft.frame_len",
    "stft.hop",
    "stft.log_compress",
    "stft.window",
    "text.max_len",
    "text.template",
    "train.adam_eps",
    "train.aggregation",
    "train.batch_size",
    "train.beta1",
    "train.beta2",
    "train.checkpoint_every",
    "train.epochs",
    "train.logit_scale_max",
    "train.lr",
    "train.optimizer",
    "train.seed",
    "train.spectrum",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| MuserError::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(MuserError::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "model.audio_dim" => m.audio_dim = parse(key, value)?,
            "model.audio_hidden" => m.audio_hidden = parse(key, value)?,
            "model.embed_dim" => m.embed_dim = parse(key, value)?,
            "model.frame_feat" => m.frame_feat = parse(key, value)?,
            "model.grid" => m.grid = parse(key, value)?,
            "model.spec_dim" => m.spec_dim = parse(key, value)?,
            "model.spec_hidden" => m.spec_hidden = parse(key, value)?,
            "model.text_dim" => m.text_dim = parse(key, value)?,
            "model.vocab_size" => m.vocab_size = parse(key, value)?,
            "stft.eps" => self.stft.eps = parse(key, value)?,
            "stft.frame_len" => self.stft.frame_len = parse(key, value)?,
            "stft.hop" => self.stft.hop = parse(key, value)?,
            "stft.log_compress" => self.stft.log_compress = parse_bool(key, value)?,
            "stft.window" => self.stft.window = parse(key, value)?,
            "text.max_len" => self.max_len = parse(key, value)?,
            "text.template" => self.template = value.to_string(),
            "train.adam_eps" => self.adam_eps = parse(key, value)?,
            "train.aggregation" => self.aggregation = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.beta1" => self.beta1 = parse(key, value)?,
            "train.beta2" => self.beta2 = parse(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.logit_scale_max" => {
                self.logit_scale_max = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "train.lr" => self.lr = parse(key, value)?,
            "train.optimizer" => self.optimizer = value.parse()?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.spectrum" => self.spectrum_enabled = parse_bool(key, value)?,
            other => return Err(MuserError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value; floats use round-trip formatting.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        KEYS.iter()
            .map(|&k| {
                let v = match k {
                    "model.audio_dim" => m.audio_dim.to_string(),
                    "model.audio_hidden" => m.audio_hidden.to_string(),
                    "model.embed_dim" => m.embed_dim.to_string(),
                    "model.frame_feat" => m.frame_feat.to_string(),
                    "model.grid" => m.grid.to_string(),
                    "model.spec_dim" => m.spec_dim.to_string(),
                    "model.spec_hidden" => m.spec_hidden.to_string(),
                    "model.text_dim" => m.text_dim.to_string(),
                    "model.vocab_size" => m.vocab_size.to_string(),
                    "stft.eps" => self.stft.eps.to_string(),
                    "stft.frame_len" => self.stft.frame_len.to_string(),
                    "stft.hop" => self.stft.hop.to_string(),
                    "stft.log_compress" => self.stft.log_compress.to_string(),
                    "stft.window" => self.stft.window.to_string(),
                    "text.max_len" => self.max_len.to_string(),
                    "text.template" => self.template.clone(),
                    "train.adam_eps" => self.adam_eps.to_string(),
                    "train.aggregation" => self.aggregation.to_string(),
                    "train.batch_size" => self.batch_size.to_string(),
                    "train.beta1" => self.beta1.to_string(),
                    "train.beta2" => self.beta2.to_string(),
                    "train.checkpoint_every" => self.checkpoint_every.to_string(),
                    "train.epochs" => self.epochs.to_string(),
                    "train.logit_scale_max" => self
                        .logit_scale_max
                        .map_or_else(|| "none".to_string(), |v| v.to_string()),
                    "train.lr" => self.lr.to_string(),
                    "train.optimizer" => self.optimizer.to_string(),
                    "train.seed" => self.seed.to_string(),
                    "train.spectrum" => self.spectrum_enabled.to_string(),
                    _ => unreachable!("key list and match arms agree"),
                };
                (k, v)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn template_spec(&self) -> Result<TemplateSpec> {
        TemplateSpec::new(&self.template)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MuserError::Config(m));
        if self.batch_size < 2 {
            return bad(format!("train.batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs < 1 {
            return bad("train.epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("train.adam_eps must be positive".into());
        }
        if let Some(c) = self.logit_scale_max {
            if !(c > 0.0 && c.is_finite()) {
                return bad("train.logit_scale_max must be positive".into());
            }
        }
        if self.max_len < 3 {
            return bad("text.max_len must be at least 3".into());
        }
        if self.template.contains('\n') {
            return bad("text.template must be a single line".into());
        }
        self.template_spec()?;
        self.model
            .validate()
            .map_err(|e| MuserError::Config(e.to_string()))
    }
}

/// Parses `key = value` lines; `#` starts a comment line, blanks are skipped.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = parse_assignment(line)
            .map_err(|e| MuserError::Config(format!("line {}: {e}", i + 1)))?;
        out.push((k, v));
    }
    Ok(out)
}

/// Splits `key = value` (or `key=value`) at the first `=`.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| MuserError::Config(format!("expected key = value, got `{s}`")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(MuserError::Config(format!("empty key in `{s}`")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}
