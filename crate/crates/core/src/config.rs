//! Flat `key=value` training configuration.
//!
//! Blank lines and `#` comments are ignored. Later assignments win, so a
//! file followed by command-line overrides behaves as expected. Keys:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `epochs` | 10 | passes over the data |
//! | `batch_size` | 32 | pairs per step |
//! | `max_steps` | 0 | stop early after this many steps (0 = no limit) |
//! | `max_lr`, `min_lr` | 1e-3, 1e-5 | cosine schedule end points |
//! | `warmup_steps` | 20 | linear warmup |
//! | `weight_decay` | 0.02 | decoupled decay on `*.weight` tensors |
//! | `beta1`, `beta2`, `adam_eps` | 0.9, 0.999, 1e-8 | optimizer moments |
//! | `grad_clip` | 1.0 | global norm clip, 0 disables |
//! | `tau`, `changing_epoch` | 0.6, 1 | SPLC threshold and start epoch |
//! | `temperature_init` | 0.07 | initial ITC temperature |
//! | `seed` | 0 | all randomness |
//! | `tag2text` | true | append recognized tags to captions |
//! | `retain_original` | true | keep caption tags in the appended text |
//! | `rm_top_freq` | 0 | also exclude this many most frequent tags |
//! | `alt_target_mode` | false | appended tags as extra text columns |
//! | `mlr_weight` | 1.0 | multiplier on the recognition loss |
//! | `reweight` | true | inverse square-root frequency class weights |
//! | `persist_pseudo` | false | keep pseudo positives as targets for later epochs |
//! | `augment` | flip-crop | `identity` or `flip-crop` |
//! | `vocab_size` | 8000 | text vocabulary cap |
//! | `image_size`, `patch_size`, `width`, `depth`, `heads`, `mlp_ratio`, `text_max_len`, `proj_dim` | see [`EncoderConfig`] | encoders |
//! | `group_factor`, `num_queries`, `decoder_dim`, `decoder_heads`, `ffn_dim`, `prior_prob` | see [`RecognitionHeadConfig`] | head |

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::AugmentMode;
use crate::error::{Error, Result};
use crate::losses::Hyperparams;
use crate::model::{EncoderConfig, RecognitionHeadConfig};
use crate::optim::{AdamWConfig, LrSchedule};
use crate::supervision::TargetMode;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamWConfig,
    pub hyper: Hyperparams,
    pub encoder: EncoderConfig,
    pub head: RecognitionHeadConfig,
    pub seed: u64,
    pub tag2text: bool,
    pub retain_original: bool,
    pub rm_top_freq: usize,
    pub target_mode: TargetMode,
    pub mlr_weight: f64,
    pub reweight: bool,
    pub persist_pseudo: bool,
    pub augment: AugmentMode,
    pub vocab_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            max_steps: 0,
            max_lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 20,
            adam: AdamWConfig::default(),
            hyper: Hyperparams::default(),
            encoder: EncoderConfig::default(),
            head: RecognitionHeadConfig::default(),
            seed: 0,
            tag2text: true,
            retain_original: true,
            rm_top_freq: 0,
            target_mode: TargetMode::Combined,
            mlr_weight: 1.0,
            reweight: true,
            persist_pseudo: false,
            augment: AugmentMode::FlipCrop,
            vocab_size: 8000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "max_lr" => self.max_lr = parse(key, v)?,
            "min_lr" => self.min_lr = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "weight_decay" => self.adam.weight_decay = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "grad_clip" => {
                let c: f64 = parse(key, v)?;
                self.adam.grad_clip = (c > 0.0).then_some(c);
            }
            "tau" => self.hyper.tau = parse(key, v)?,
            "changing_epoch" => self.hyper.changing_epoch = parse(key, v)?,
            "temperature_init" => self.hyper.temperature_init = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "tag2text" => self.tag2text = parse(key, v)?,
            "retain_original" => self.retain_original = parse(key, v)?,
            "rm_top_freq" => self.rm_top_freq = parse(key, v)?,
            "alt_target_mode" => {
                let alt: bool = parse(key, v)?;
                self.target_mode = if alt {
                    TargetMode::ExtraColumns
                } else {
                    TargetMode::Combined
                };
            }
            "mlr_weight" => self.mlr_weight = parse(key, v)?,
            "reweight" => self.reweight = parse(key, v)?,
            "persist_pseudo" => self.persist_pseudo = parse(key, v)?,
            "augment" => self.augment = v.parse()?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "image_size" => self.encoder.image_size = parse(key, v)?,
            "patch_size" => self.encoder.patch_size = parse(key, v)?,
            "width" => self.encoder.width = parse(key, v)?,
            "depth" => self.encoder.depth = parse(key, v)?,
            "heads" => self.encoder.heads = parse(key, v)?,
            "mlp_ratio" => self.encoder.mlp_ratio = parse(key, v)?,
            "text_max_len" => self.encoder.text_max_len = parse(key, v)?,
            "proj_dim" => self.encoder.proj_dim = parse(key, v)?,
            "num_classes" => self.head.num_classes = parse(key, v)?,
            "group_factor" => self.head.group_factor = parse(key, v)?,
            "num_queries" => self.head.num_queries = parse(key, v)?,
            "decoder_dim" => self.head.decoder_dim = parse(key, v)?,
            "decoder_heads" => self.head.decoder_heads = parse(key, v)?,
            "ffn_dim" => self.head.ffn_dim = parse(key, v)?,
            "prior_prob" => self.head.prior_prob = parse(key, v)?,
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Apply every `key=value` line of `text`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: n + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            self.set(k, v).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str, origin: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, origin)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text, &path.display().to_string())
    }

    /// Every key, one per line; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let h = &self.head;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("max_lr", self.max_lr.to_string());
        kv("min_lr", self.min_lr.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("weight_decay", self.adam.weight_decay.to_string());
        kv("beta1", self.adam.beta1.to_string());
        kv("beta2", self.adam.beta2.to_string());
        kv("adam_eps", self.adam.eps.to_string());
        kv("grad_clip", self.adam.grad_clip.unwrap_or(0.0).to_string());
        kv("tau", self.hyper.tau.to_string());
        kv("changing_epoch", self.hyper.changing_epoch.to_string());
        kv("temperature_init", self.hyper.temperature_init.to_string());
        kv("seed", self.seed.to_string());
        kv("tag2text", self.tag2text.to_string());
        kv("retain_original", self.retain_original.to_string());
        kv("rm_top_freq", self.rm_top_freq.to_string());
        kv(
            "alt_target_mode",
            (self.target_mode == TargetMode::ExtraColumns).to_string(),
        );
        kv("mlr_weight", self.mlr_weight.to_string());
        kv("reweight", self.reweight.to_string());
        kv("persist_pseudo", self.persist_pseudo.to_string());
        kv("augment", self.augment.to_string());
        kv("vocab_size", self.vocab_size.to_string());
        kv("image_size", e.image_size.to_string());
        kv("patch_size", e.patch_size.to_string());
        kv("width", e.width.to_string());
        kv("depth", e.depth.to_string());
        kv("heads", e.heads.to_string());
        kv("mlp_ratio", e.mlp_ratio.to_string());
        kv("text_max_len", e.text_max_len.to_string());
        kv("proj_dim", e.proj_dim.to_string());
        kv("num_classes", h.num_classes.to_string());
        kv("group_factor", h.group_factor.to_string());
        kv("num_queries", h.num_queries.to_string());
        kv("decoder_dim", h.decoder_dim.to_string());
        kv("decoder_heads", h.decoder_heads.to_string());
        kv("ffn_dim", h.ffn_dim.to_string());
        kv("prior_prob", h.prior_prob.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be >= 1"));
        }
        if !(self.max_lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.max_lr) {
            return Err(Error::invalid("need 0 <= min_lr <= max_lr, max_lr > 0"));
        }
        if !(self.mlr_weight >= 0.0 && self.mlr_weight.is_finite()) {
            return Err(Error::invalid("mlr_weight must be finite and >= 0"));
        }
        if self.vocab_size < 4 {
            return Err(Error::invalid("vocab_size must be >= 4"));
        }
        self.hyper.validate()?;
        self.encoder.validate()
    }

    /// Optimizer steps for `n` training pairs.
    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.epochs * n.div_ceil(self.batch_size);
        if self.max_steps > 0 {
            full.min(self.max_steps)
        } else {
            full
        }
    }

    pub fn schedule(&self, n: usize) -> LrSchedule {
        LrSchedule {
            max_lr: self.max_lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps(n),
        }
    }
}
