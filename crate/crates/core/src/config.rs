//! Run configuration: a flat `key = value` text format.
//!
//! Blank lines and `#` comments are ignored; unknown keys are rejected.
//! `--set key=value` overrides use the same parser.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub image_size: usize,
    pub mspp_scales: Vec<usize>,
    pub sa_layers: usize,
    pub sa_heads: usize,
    pub mlp_hidden: usize,
    /// Width of the text tower's token features.
    pub text_width: usize,
    /// Hidden width of every transformer feed-forward block, as a multiple of
    /// the block's model width.
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub use_sa: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            image_size: 32,
            mspp_scales: vec![1, 6],
            sa_layers: 2,
            sa_heads: 4,
            mlp_hidden: 128,
            text_width: 32,
            ffn_mult: 2,
            vocab_size: crate::encoders::Vocabulary::standard().len(),
            max_text_len: 16,
            use_sa: true,
        }
    }
}

impl EncoderConfig {
    /// Number of MSPP patches, `sum(s^2)` over the scales.
    pub fn num_patches(&self) -> usize {
        self.mspp_scales.iter().map(|s| s * s).sum()
    }

    /// Side of the backbone's last feature map (the map MSPP pools).
    pub fn feature_side(&self) -> usize {
        (self.image_size / 2).saturating_sub(4)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.mlp_hidden == 0 || self.text_width == 0 || self.ffn_mult == 0 {
            return bad("widths must be positive".into());
        }
        if self.image_size < 12 || self.image_size % 2 != 0 {
            return bad(format!("image_size {} must be even and at least 12", self.image_size));
        }
        if self.mspp_scales.is_empty() || self.mspp_scales.contains(&0) {
            return bad("mspp_scales must be a nonempty list of positive integers".into());
        }
        let side = self.feature_side();
        for &s in &self.mspp_scales {
            if side % s != 0 {
                return bad(format!("scale {s} must divide the {side}x{side} feature map"));
            }
        }
        if self.use_sa && (self.sa_layers == 0 || self.sa_heads == 0) {
            return bad("sa_layers and sa_heads must be positive when use_sa is set".into());
        }
        if self.vocab_size < 3 || self.max_text_len == 0 {
            return bad("vocab_size must be at least 3 and max_text_len positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Momentum encoders + negative queues.
    Queue,
    /// Symmetric in-batch InfoNCE, no queues (SimCLR-style ablation).
    InBatch,
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "queue" => Ok(LossMode::Queue),
            "in_batch" => Ok(LossMode::InBatch),
            _ => Err(Error::Config(format!("loss_mode must be queue or in_batch, got {s}"))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Queue => "queue",
            LossMode::InBatch => "in_batch",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub temperature: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub queue_size: usize,
    pub loss_mode: LossMode,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            momentum: 0.99,
            batch_size: 32,
            queue_size: 512,
            loss_mode: LossMode::Queue,
            epochs: 15,
            lr: 1e-3,
            weight_decay: 1e-5,
            seed: 7,
            augment: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1], got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        match self.loss_mode {
            LossMode::Queue => {
                if self.queue_size == 0 || self.queue_size % self.batch_size != 0 {
                    return bad(format!(
                        "queue_size {} must be a positive multiple of batch_size {}",
                        self.queue_size, self.batch_size
                    ));
                }
            }
            LossMode::InBatch => {
                if self.batch_size < 2 {
                    return bad("in_batch mode needs batch_size >= 2".into());
                }
            }
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative".into());
        }
        Ok(())
    }

    /// Steps that only fill the queues before the first loss.
    pub fn warmup_steps(&self) -> u64 {
        match self.loss_mode {
            LossMode::Queue => self.queue_size.div_ceil(self.batch_size) as u64,
            LossMode::InBatch => 0,
        }
    }
}

/// Network visualization and text-to-image generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct VisConfig {
    pub max_iterations: usize,
    pub lr: f64,
    /// `(channel, alpha)`: also maximize the mean activation of one channel of
    /// the last backbone layer, weighted by `alpha`.
    pub neuron: Option<(usize, f64)>,
    pub seed: u64,
}

impl Default for VisConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            lr: 8.0,
            neuron: None,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub grid: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub channels: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub commitment: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            grid: 4,
            code_dim: 16,
            codebook_size: 64,
            channels: 12,
            train_steps: 600,
            batch_size: 32,
            lr: 2e-3,
            commitment: 0.25,
            seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub trainer: TrainerConfig,
    pub vis: VisConfig,
    /// Iterations and step size of codebook-generator inversion.
    pub gen_iterations: usize,
    pub gen_lr: f64,
    pub generator: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            trainer: TrainerConfig::default(),
            vis: VisConfig::default(),
            gen_iterations: 300,
            gen_lr: 50.0,
            generator: GeneratorConfig::default(),
        }
    }
}

/// Documentation row: key, description, full-scale value where one exists.
const KEYS: &[(&str, &str, Option<&str>)] = &[
    ("embed_dim", "joint embedding size d", Some("2560")),
    ("image_size", "input image side in pixels", Some("600")),
    ("mspp_scales", "multi-scale patch pooling grid sizes", Some("1,6")),
    ("sa_layers", "transformer encoder layers per self-attention block", Some("4")),
    ("sa_heads", "attention heads", None),
    ("mlp_hidden", "hidden width of the two-layer projection MLP", None),
    ("text_width", "text token feature width", None),
    ("ffn_mult", "feed-forward hidden width multiplier", None),
    ("vocab_size", "token vocabulary size", None),
    ("max_text_len", "maximum tokens per text", None),
    ("use_sa", "enable self-attention blocks (false = w/o SA ablation)", Some("true")),
    ("temperature", "InfoNCE temperature tau", Some("0.07")),
    ("momentum", "momentum encoder coefficient m", Some("0.99")),
    ("batch_size", "mini-batch size N_b", Some("2688")),
    ("queue_size", "negative queue capacity N_q", Some("13440")),
    ("loss_mode", "queue | in_batch (SimCLR ablation)", Some("queue")),
    ("epochs", "training epochs", None),
    ("lr", "Adam learning rate", Some("1e-4")),
    ("weight_decay", "Adam weight decay", Some("1e-5")),
    ("seed", "training seed", None),
    ("augment", "random graying + colour jitter", Some("true")),
    ("vis_iterations", "network visualization iterations", None),
    ("vis_lr", "network visualization step size lambda", None),
    ("vis_neuron", "LLP channel to maximize, or none", None),
    ("vis_alpha", "weight of the neuron term", None),
    ("vis_seed", "seed of the random initial image", None),
    ("gen_iterations", "text-to-image generation iterations", None),
    ("gen_lr", "text-to-image generation step size lambda", None),
    ("gen_grid", "code grid side h = w", Some("16")),
    ("gen_code_dim", "code dimension d_c", Some("256")),
    ("gen_codebook_size", "codebook entries N_c", Some("1024")),
    ("gen_channels", "toy generator feature channels", None),
    ("gen_train_steps", "toy generator training steps", None),
    ("gen_batch_size", "toy generator batch size", None),
    ("gen_train_lr", "toy generator Adam learning rate", None),
    ("gen_commitment", "VQ commitment loss weight", None),
    ("gen_seed", "toy generator seed", None),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "embed_dim" => self.encoder.embed_dim = parse(key, v)?,
            "image_size" => self.encoder.image_size = parse(key, v)?,
            "mspp_scales" => {
                self.encoder.mspp_scales = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "sa_layers" => self.encoder.sa_layers = parse(key, v)?,
            "sa_heads" => self.encoder.sa_heads = parse(key, v)?,
            "mlp_hidden" => self.encoder.mlp_hidden = parse(key, v)?,
            "text_width" => self.encoder.text_width = parse(key, v)?,
            "ffn_mult" => self.encoder.ffn_mult = parse(key, v)?,
            "vocab_size" => self.encoder.vocab_size = parse(key, v)?,
            "max_text_len" => self.encoder.max_text_len = parse(key, v)?,
            "use_sa" => self.encoder.use_sa = parse_bool(key, v)?,
            "temperature" => self.trainer.temperature = parse(key, v)?,
            "momentum" => self.trainer.momentum = parse(key, v)?,
            "batch_size" => self.trainer.batch_size = parse(key, v)?,
            "queue_size" => self.trainer.queue_size = parse(key, v)?,
            "loss_mode" => self.trainer.loss_mode = v.parse()?,
            "epochs" => self.trainer.epochs = parse(key, v)?,
            "lr" => self.trainer.lr = parse(key, v)?,
            "weight_decay" => self.trainer.weight_decay = parse(key, v)?,
            "seed" => self.trainer.seed = parse(key, v)?,
            "augment" => self.trainer.augment = parse_bool(key, v)?,
            "vis_iterations" => self.vis.max_iterations = parse(key, v)?,
            "vis_lr" => self.vis.lr = parse(key, v)?,
            "vis_neuron" => {
                let alpha = self.vis.neuron.map_or(1.0, |n| n.1);
                self.vis.neuron = match v {
                    "none" => None,
                    _ => Some((parse(key, v)?, alpha)),
                }
            }
            "vis_alpha" => {
                let alpha = parse(key, v)?;
                if let Some(n) = &mut self.vis.neuron {
                    n.1 = alpha;
                } else if alpha != 1.0 {
                    return Err(Error::Config("vis_alpha requires vis_neuron to be set first".into()));
                }
            }
            "vis_seed" => self.vis.seed = parse(key, v)?,
            "gen_iterations" => self.gen_iterations = parse(key, v)?,
            "gen_lr" => self.gen_lr = parse(key, v)?,
            "gen_grid" => self.generator.grid = parse(key, v)?,
            "gen_code_dim" => self.generator.code_dim = parse(key, v)?,
            "gen_codebook_size" => self.generator.codebook_size = parse(key, v)?,
            "gen_channels" => self.generator.channels = parse(key, v)?,
            "gen_train_steps" => self.generator.train_steps = parse(key, v)?,
            "gen_batch_size" => self.generator.batch_size = parse(key, v)?,
            "gen_train_lr" => self.generator.lr = parse(key, v)?,
            "gen_commitment" => self.generator.commitment = parse(key, v)?,
            "gen_seed" => self.generator.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k, v)
    }

    /// Parses the key-value text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.trainer.validate()?;
        if self.vis.lr <= 0.0 || self.gen_lr <= 0.0 {
            return Err(Error::Config("vis_lr and gen_lr must be positive".into()));
        }
        if self.generator.codebook_size < 2 {
            return Err(Error::Config("gen_codebook_size must be at least 2".into()));
        }
        if self.generator.grid * 8 != self.encoder.image_size {
            return Err(Error::Config(format!(
                "generator output side {} (8 x gen_grid) must equal image_size {}",
                self.generator.grid * 8,
                self.encoder.image_size
            )));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let e = &self.encoder;
        let t = &self.trainer;
        let g = &self.generator;
        match key {
            "embed_dim" => e.embed_dim.to_string(),
            "image_size" => e.image_size.to_string(),
            "mspp_scales" => e.mspp_scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            "sa_layers" => e.sa_layers.to_string(),
            "sa_heads" => e.sa_heads.to_string(),
            "mlp_hidden" => e.mlp_hidden.to_string(),
            "text_width" => e.text_width.to_string(),
            "ffn_mult" => e.ffn_mult.to_string(),
            "vocab_size" => e.vocab_size.to_string(),
            "max_text_len" => e.max_text_len.to_string(),
            "use_sa" => e.use_sa.to_string(),
            "temperature" => t.temperature.to_string(),
            "momentum" => t.momentum.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "queue_size" => t.queue_size.to_string(),
            "loss_mode" => t.loss_mode.to_string(),
            "epochs" => t.epochs.to_string(),
            "lr" => t.lr.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "seed" => t.seed.to_string(),
            "augment" => t.augment.to_string(),
            "vis_iterations" => self.vis.max_iterations.to_string(),
            "vis_lr" => self.vis.lr.to_string(),
            "vis_neuron" => self.vis.neuron.map_or("none".into(), |n| n.0.to_string()),
            "vis_alpha" => self.vis.neuron.map_or(1.0, |n| n.1).to_string(),
            "vis_seed" => self.vis.seed.to_string(),
            "gen_iterations" => self.gen_iterations.to_string(),
            "gen_lr" => self.gen_lr.to_string(),
            "gen_grid" => g.grid.to_string(),
            "gen_code_dim" => g.code_dim.to_string(),
            "gen_codebook_size" => g.codebook_size.to_string(),
            "gen_channels" => g.channels.to_string(),
            "gen_train_steps" => g.train_steps.to_string(),
            "gen_batch_size" => g.batch_size.to_string(),
            "gen_train_lr" => g.lr.to_string(),
            "gen_commitment" => g.commitment.to_string(),
            "gen_seed" => g.seed.to_string(),
            _ => unreachable!("documented key {key}"),
        }
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _, _) in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    /// The defaults, with a description and the large-scale reference value
    /// of each key where one exists.
    pub fn defaults_documentation() -> String {
        let cfg = Self::default();
        let mut out = String::from("# brivl run configuration (desk-scale defaults)\n");
        for (key, desc, full_scale) in KEYS {
            let _ = write!(out, "\n# {desc}");
            if let Some(p) = full_scale {
                let _ = write!(out, " (full-scale value: {p})");
            }
            let _ = writeln!(out, "\n{key} = {}", cfg.value_of(key));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::defaults_documentation()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("bogus = 3").unwrap_err();
        assert!(err.to_string().contains("bogus"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn full_scale_hyperparameters_documented_and_accepted() {
        let doc = RunConfig::defaults_documentation();
        for v in ["0.07", "0.99", "13440", "2560", "1e-4", "1e-5"] {
            assert!(doc.contains(v), "{v} missing");
        }
        let mut cfg = RunConfig::default();
        cfg.apply_override("lr=1e-4").unwrap();
        cfg.apply_override("weight_decay=1e-5").unwrap();
        cfg.validate().unwrap();
        assert_eq!((cfg.trainer.lr, cfg.trainer.weight_decay), (1e-4, 1e-5));
    }

    #[test]
    fn queue_must_be_multiple_of_batch() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("queue_size=500").unwrap();
        assert!(cfg.validate().is_err());
        cfg.apply_override("loss_mode=in_batch").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn patch_count_for_full_scale_grids() {
        assert_eq!(EncoderConfig::default().num_patches(), 37);
    }

    #[test]
    fn scales_must_divide_feature_map() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("mspp_scales=1,5").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn warmup_covers_queue() {
        let t = TrainerConfig::default();
        assert_eq!(t.warmup_steps(), 16);
        let t = TrainerConfig { queue_size: 40, batch_size: 32, ..t };
        assert_eq!(t.warmup_steps(), 2);
    }
}
