//! Flat `key=value` run configuration.
//!
//! Every tunable of the model and the training harness lives here so that a
//! run is fully described by one small UTF-8 file. Unknown keys are rejected
//! rather than ignored.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::DType;

use crate::error::{Error, Result};

/// How the video-level queries evolve across frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateStrategy {
    /// Residual transformer-decoder update (the default).
    Addition,
    /// Multiplicative gating by the update block's output.
    Multiply,
    /// No update; queries stay at their initial value.
    None,
    /// Query-free baseline: a FIFO bank of memory features that image
    /// features cross-attend to before decoding.
    Sam2Bank,
}

impl UpdateStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "addition" => Ok(Self::Addition),
            "multiply" => Ok(Self::Multiply),
            "none" => Ok(Self::None),
            "sam2_bank" => Ok(Self::Sam2Bank),
            other => Err(Error::Config(format!(
                "unknown update_strategy `{other}` (expected addition|multiply|none|sam2_bank)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Addition => "addition",
            Self::Multiply => "multiply",
            Self::None => "none",
            Self::Sam2Bank => "sam2_bank",
        }
    }
}

/// How the learnable embeddings reach the mask decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingMode {
    /// As decoder tokens replacing sparse prompt embeddings (the default).
    Sparse,
    /// Pooled and broadcast-added to the image features.
    Dense,
    /// Both of the above.
    Both,
}

impl EmbeddingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Self::Sparse),
            "dense" => Ok(Self::Dense),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!(
                "unknown embedding_mode `{other}` (expected sparse|dense|both)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Sparse => "sparse",
            Self::Dense => "dense",
            Self::Both => "both",
        }
    }
}

/// Full run configuration. Defaults model the method at desk scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // encoder
    pub input_size: usize,
    pub stage_channels: [usize; 4],
    pub stage_blocks: [usize; 4],
    pub fpn_width: usize,
    pub adapter_rank: usize,
    pub freeze_backbone: bool,
    pub supervised_levels: Vec<usize>,
    // queries / temporal memory
    pub num_frame_queries: usize,
    pub num_video_queries: usize,
    pub query_hidden_dim: usize,
    pub update_strategy: UpdateStrategy,
    pub embedding_mode: EmbeddingMode,
    pub memory_bank_size: usize,
    // decoder
    pub decoder_rounds: usize,
    // loss
    pub loss_alpha: f64,
    // peft baselines
    pub lora_rank: usize,
    pub lora_alpha: f64,
    // training
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub clip_length: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub numerics: DType,
    pub data_root: String,
    pub out_dir: String,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            input_size: 64,
            stage_channels: [16, 32, 64, 128],
            stage_blocks: [1, 2, 2, 1],
            fpn_width: 64,
            adapter_rank: 8,
            freeze_backbone: true,
            supervised_levels: vec![4],
            num_frame_queries: 30,
            num_video_queries: 8,
            query_hidden_dim: 64,
            update_strategy: UpdateStrategy::Addition,
            embedding_mode: EmbeddingMode::Sparse,
            memory_bank_size: 6,
            decoder_rounds: 2,
            loss_alpha: 0.5,
            lora_rank: 8,
            lora_alpha: 16.0,
            learning_rate: 1e-4,
            weight_decay: 0.05,
            iterations: 2000,
            clip_length: 10,
            checkpoint_every: 500,
            seed: 7,
            numerics: DType::F32,
            data_root: "data/synth".to_string(),
            out_dir: "runs/default".to_string(),
        }
    }
}

impl Config {
    /// Overfit preset for the end-to-end learning smoke test: small input,
    /// higher learning rate, a short clip budget that still converges on the
    /// deterministic synthetic set.
    pub fn smoke() -> Self {
        Self {
            input_size: 32,
            learning_rate: 2e-3,
            iterations: 700,
            clip_length: 10,
            out_dir: "runs/smoke".to_string(),
            ..Self::default()
        }
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid value `{value}` for {what}"));
        match key {
            "input_size" => self.input_size = value.parse().map_err(|_| bad(key))?,
            "stage_channels" => self.stage_channels = parse_four(value, key)?,
            "stage_blocks" => self.stage_blocks = parse_four(value, key)?,
            "fpn_width" => self.fpn_width = value.parse().map_err(|_| bad(key))?,
            "adapter_rank" => self.adapter_rank = value.parse().map_err(|_| bad(key))?,
            "freeze_backbone" => self.freeze_backbone = value.parse().map_err(|_| bad(key))?,
            "supervised_levels" => {
                self.supervised_levels = if value.is_empty() {
                    vec![]
                } else {
                    value
                        .split(',')
                        .map(|v| v.trim().parse().map_err(|_| bad(key)))
                        .collect::<Result<Vec<usize>>>()?
                };
            }
            "num_frame_queries" => self.num_frame_queries = value.parse().map_err(|_| bad(key))?,
            "num_video_queries" => self.num_video_queries = value.parse().map_err(|_| bad(key))?,
            "query_hidden_dim" => self.query_hidden_dim = value.parse().map_err(|_| bad(key))?,
            "update_strategy" => self.update_strategy = UpdateStrategy::parse(value)?,
            "embedding_mode" => self.embedding_mode = EmbeddingMode::parse(value)?,
            "memory_bank_size" => self.memory_bank_size = value.parse().map_err(|_| bad(key))?,
            "decoder_rounds" => self.decoder_rounds = value.parse().map_err(|_| bad(key))?,
            "loss_alpha" => self.loss_alpha = value.parse().map_err(|_| bad(key))?,
            "lora_rank" => self.lora_rank = value.parse().map_err(|_| bad(key))?,
            "lora_alpha" => self.lora_alpha = value.parse().map_err(|_| bad(key))?,
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad(key))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad(key))?,
            "iterations" => self.iterations = value.parse().map_err(|_| bad(key))?,
            "clip_length" => self.clip_length = value.parse().map_err(|_| bad(key))?,
            "checkpoint_every" => self.checkpoint_every = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "numerics" => {
                self.numerics = match value {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(bad(key)),
                };
            }
            "data_root" => self.data_root = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 16 || self.input_size % 16 != 0 {
            return Err(Error::Config(format!(
                "input_size must be a multiple of 16 and >= 16, got {}",
                self.input_size
            )));
        }
        if !self.stage_channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "stage_channels must strictly increase, got {:?}",
                self.stage_channels
            )));
        }
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config("stage_blocks entries must be >= 1".into()));
        }
        if !self.freeze_backbone {
            return Err(Error::Config(
                "freeze_backbone must be true; the method fine-tunes a frozen encoder".into(),
            ));
        }
        if self.supervised_levels.iter().any(|l| !(2..=4).contains(l)) {
            return Err(Error::Config(format!(
                "supervised_levels must be a subset of {{2,3,4}}, got {:?}",
                self.supervised_levels
            )));
        }
        for (name, v) in [
            ("fpn_width", self.fpn_width),
            ("adapter_rank", self.adapter_rank),
            ("num_frame_queries", self.num_frame_queries),
            ("num_video_queries", self.num_video_queries),
            ("query_hidden_dim", self.query_hidden_dim),
            ("decoder_rounds", self.decoder_rounds),
            ("lora_rank", self.lora_rank),
            ("clip_length", self.clip_length),
            ("memory_bank_size", self.memory_bank_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Serialize back to the flat `key=value` form (used inside checkpoints).
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input_size={}", self.input_size);
        let _ = writeln!(s, "stage_channels={}", join(&self.stage_channels));
        let _ = writeln!(s, "stage_blocks={}", join(&self.stage_blocks));
        let _ = writeln!(s, "fpn_width={}", self.fpn_width);
        let _ = writeln!(s, "adapter_rank={}", self.adapter_rank);
        let _ = writeln!(s, "freeze_backbone={}", self.freeze_backbone);
        let _ = writeln!(s, "supervised_levels={}", join(&self.supervised_levels));
        let _ = writeln!(s, "num_frame_queries={}", self.num_frame_queries);
        let _ = writeln!(s, "num_video_queries={}", self.num_video_queries);
        let _ = writeln!(s, "query_hidden_dim={}", self.query_hidden_dim);
        let _ = writeln!(s, "update_strategy={}", self.update_strategy.as_str());
        let _ = writeln!(s, "embedding_mode={}", self.embedding_mode.as_str());
        let _ = writeln!(s, "memory_bank_size={}", self.memory_bank_size);
        let _ = writeln!(s, "decoder_rounds={}", self.decoder_rounds);
        let _ = writeln!(s, "loss_alpha={}", self.loss_alpha);
        let _ = writeln!(s, "lora_rank={}", self.lora_rank);
        let _ = writeln!(s, "lora_alpha={}", self.lora_alpha);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "iterations={}", self.iterations);
        let _ = writeln!(s, "clip_length={}", self.clip_length);
        let _ = writeln!(s, "checkpoint_every={}", self.checkpoint_every);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(
            s,
            "numerics={}",
            if self.numerics == DType::F64 { "f64" } else { "f32" }
        );
        let _ = writeln!(s, "data_root={}", self.data_root);
        let _ = writeln!(s, "out_dir={}", self.out_dir);
        s
    }

    /// Side length of the level-`i` feature map for this input size.
    /// Stage strides are cumulative powers of two starting at 2.
    pub fn level_size(&self, level: usize) -> usize {
        self.input_size >> level
    }
}

fn join(vals: &[usize]) -> String {
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_four(value: &str, key: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))?;
    let arr: [usize; 4] = parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key} needs exactly 4 comma-separated values")))?;
    Ok(arr)
}
