//! `key = value` training configuration. Lines starting with `#` are comments.

use std::path::PathBuf;

use crate::data::{SampleMode, Split};
use crate::error::FormatError;
use crate::model::{ModelConfig, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Uniform,
    Band,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub aggregation_window: usize,
    pub depth_layers: usize,
    /// Samples per frame; also the evaluation density.
    pub samples: usize,
    /// When set, each training draw picks its count log-uniformly in this range.
    pub train_samples: Option<(usize, usize)>,
    pub sampler: SamplerKind,
    /// Band rows; `None` means the middle quarter of the frame.
    pub band_rows: Option<(usize, usize)>,
    pub augment: bool,
    pub loss_include_observed: bool,
    pub context_pretrain_fraction: f64,
    pub depth_pretrain_fraction: f64,
    pub stem_channels: usize,
    pub context_widths: [usize; 3],
    pub context_channels: usize,
    pub depth_channels: usize,
    pub demo_channels: usize,
    pub predict_channels: usize,
    pub head_bias: f64,
    pub depth_input_scale: f64,
    pub dataset: PathBuf,
    pub split: Split,
    pub checkpoint: PathBuf,
    pub loss_log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            variant: Variant::Inductive,
            seed: 0,
            lr: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 1,
            aggregation_window: m.aggregation_window,
            depth_layers: m.depth_layers,
            samples: 200,
            train_samples: None,
            sampler: SamplerKind::Uniform,
            band_rows: None,
            augment: false,
            loss_include_observed: true,
            context_pretrain_fraction: 0.2,
            depth_pretrain_fraction: 0.2,
            stem_channels: m.stem_channels,
            context_widths: m.context_widths,
            context_channels: m.context_channels,
            depth_channels: m.depth_channels,
            demo_channels: m.demo_channels,
            predict_channels: m.predict_channels,
            head_bias: m.head_bias,
            depth_input_scale: m.depth_input_scale,
            dataset: PathBuf::from("data"),
            split: Split::Train,
            checkpoint: PathBuf::from("model.ckpt"),
            loss_log: None,
        }
    }
}

fn parse_pair(v: &str) -> Option<(usize, usize)> {
    let (a, b) = v.split_once(':')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "on" | "1" => Some(true),
        "false" | "off" | "0" => Some(false),
        _ => None,
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            stem_channels: self.stem_channels,
            context_widths: self.context_widths,
            context_channels: self.context_channels,
            depth_channels: self.depth_channels,
            demo_channels: self.demo_channels,
            predict_channels: self.predict_channels,
            depth_layers: self.depth_layers,
            aggregation_window: self.aggregation_window,
            head_bias: self.head_bias,
            depth_input_scale: self.depth_input_scale,
            ..ModelConfig::default()
        }
    }

    /// Copies the architecture fields of `m`.
    pub fn with_model(mut self, m: &ModelConfig) -> Self {
        self.variant = m.variant;
        self.stem_channels = m.stem_channels;
        self.context_widths = m.context_widths;
        self.context_channels = m.context_channels;
        self.depth_channels = m.depth_channels;
        self.demo_channels = m.demo_channels;
        self.predict_channels = m.predict_channels;
        self.depth_layers = m.depth_layers;
        self.aggregation_window = m.aggregation_window;
        self.head_bias = m.head_bias;
        self.depth_input_scale = m.depth_input_scale;
        self
    }

    pub fn sample_mode(&self, height: usize) -> SampleMode {
        match (self.sampler, self.band_rows) {
            (SamplerKind::Uniform, _) => SampleMode::Uniform,
            (SamplerKind::Band, Some((top, bottom))) => SampleMode::Band { top, bottom },
            (SamplerKind::Band, None) => SampleMode::middle_band(height),
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), FormatError> {
        let v = value.trim();
        let bad = || FormatError::Config(format!("bad value {v:?} for {key}"));
        macro_rules! num {
            () => {
                v.parse().map_err(|_| bad())?
            };
        }
        match key.trim() {
            "variant" => self.variant = v.parse().map_err(|_| bad())?,
            "seed" => self.seed = num!(),
            "lr" => self.lr = num!(),
            "momentum" => self.momentum = num!(),
            "epochs" => self.epochs = num!(),
            "batch_size" => self.batch_size = num!(),
            "aggregation_window" => self.aggregation_window = num!(),
            "depth_layers" | "depth_encoder_layers" => self.depth_layers = num!(),
            "samples" => self.samples = num!(),
            "train_samples" => {
                self.train_samples = if v.is_empty() {
                    None
                } else {
                    Some(parse_pair(v).ok_or_else(bad)?)
                }
            }
            "sampler" => {
                self.sampler = match v {
                    "uniform" => SamplerKind::Uniform,
                    "band" => SamplerKind::Band,
                    _ => return Err(bad()),
                }
            }
            "band_rows" => {
                self.band_rows = if v == "middle" {
                    None
                } else {
                    Some(parse_pair(v).ok_or_else(bad)?)
                }
            }
            "augment" => self.augment = parse_bool(v).ok_or_else(bad)?,
            "loss_include_observed" => self.loss_include_observed = parse_bool(v).ok_or_else(bad)?,
            "context_pretrain_fraction" => self.context_pretrain_fraction = num!(),
            "depth_pretrain_fraction" => self.depth_pretrain_fraction = num!(),
            "stem_channels" => self.stem_channels = num!(),
            "context_widths" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad())?;
                self.context_widths = parts.try_into().map_err(|_| bad())?;
            }
            "context_channels" => self.context_channels = num!(),
            "depth_channels" => self.depth_channels = num!(),
            "demo_channels" => self.demo_channels = num!(),
            "predict_channels" => self.predict_channels = num!(),
            "head_bias" => self.head_bias = num!(),
            "depth_input_scale" => self.depth_input_scale = num!(),
            "dataset" => self.dataset = v.into(),
            "split" => self.split = v.parse().map_err(|_| bad())?,
            "checkpoint" => self.checkpoint = v.into(),
            "loss_log" => self.loss_log = if v.is_empty() { None } else { Some(v.into()) },
            other => return Err(FormatError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), FormatError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| FormatError::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Parses a config file body on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FormatError::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v)
                .map_err(|e| FormatError::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let pair = |p: Option<(usize, usize)>, none: &str| p.map_or(none.to_string(), |(a, b)| format!("{a}:{b}"));
        let [w0, w1, w2] = self.context_widths;
        let lines = [
            ("variant", self.variant.to_string()),
            ("seed", self.seed.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("aggregation_window", self.aggregation_window.to_string()),
            ("depth_layers", self.depth_layers.to_string()),
            ("samples", self.samples.to_string()),
            ("train_samples", pair(self.train_samples, "")),
            (
                "sampler",
                match self.sampler {
                    SamplerKind::Uniform => "uniform".into(),
                    SamplerKind::Band => "band".into(),
                },
            ),
            ("band_rows", pair(self.band_rows, "middle")),
            ("augment", self.augment.to_string()),
            ("loss_include_observed", self.loss_include_observed.to_string()),
            ("context_pretrain_fraction", self.context_pretrain_fraction.to_string()),
            ("depth_pretrain_fraction", self.depth_pretrain_fraction.to_string()),
            ("stem_channels", self.stem_channels.to_string()),
            ("context_widths", format!("{w0},{w1},{w2}")),
            ("context_channels", self.context_channels.to_string()),
            ("depth_channels", self.depth_channels.to_string()),
            ("demo_channels", self.demo_channels.to_string()),
            ("predict_channels", self.predict_channels.to_string()),
            ("head_bias", self.head_bias.to_string()),
            ("depth_input_scale", self.depth_input_scale.to_string()),
            ("dataset", self.dataset.display().to_string()),
            ("split", self.split.to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
            (
                "loss_log",
                self.loss_log
                    .as_ref()
                    .map_or(String::new(), |p| p.display().to_string()),
            ),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        let bad = |m: String| Err(FormatError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        let (c, d) = (self.context_pretrain_fraction, self.depth_pretrain_fraction);
        if !(c >= 0.0 && d >= 0.0 && c + d <= 1.0) {
            return bad(format!(
                "pretrain fractions {c} + {d} must be nonnegative and sum to at most 1"
            ));
        }
        if let Some((lo, hi)) = self.train_samples {
            if lo == 0 || lo > hi {
                return bad(format!("train_samples {lo}:{hi} must satisfy 1 <= min <= max"));
            }
        }
        if let Some((top, bottom)) = self.band_rows {
            if top >= bottom {
                return bad(format!("band_rows {top}:{bottom} is empty"));
            }
        }
        self.model_config()
            .validate()
            .map_err(|e| FormatError::Config(e.to_string()))
    }
}
