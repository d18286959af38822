//! Flat `key = value` run configuration.
//!
//! Every key must be present; unknown keys are rejected. `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{BlockKind, DecoderConfig, EncoderConfig, Model};
use crate::tensor::Precision;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub mask_ratio: f64,
    pub gamma: f64,
    pub frame_gap: usize,
    pub momentum: f64,
    pub seed: u64,
    pub pairs_per_epoch: usize,
    pub image_size: usize,
    pub symmetric_masking: bool,
    pub same_augmentation: bool,
    pub color_jitter: bool,
    pub norm_pix: bool,
    pub precision: Precision,
    pub checkpoint_every: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch_size: 16,
            epochs: 50,
            warmup_epochs: 5,
            min_lr: 2e-9,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
            mask_ratio: 0.75,
            gamma: 1.0,
            frame_gap: 1,
            momentum: 0.996,
            seed: 0,
            pairs_per_epoch: 64,
            image_size: 32,
            symmetric_masking: true,
            same_augmentation: true,
            color_jitter: false,
            norm_pix: true,
            precision: Precision::F64,
            checkpoint_every: 0,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

const KEYS: &[&str] = &[
    "lr",
    "batch_size",
    "epochs",
    "warmup_epochs",
    "min_lr",
    "weight_decay",
    "betas",
    "mask_ratio",
    "gamma",
    "frame_gap",
    "momentum",
    "seed",
    "pairs_per_epoch",
    "image_size",
    "symmetric_masking",
    "same_augmentation",
    "color_jitter",
    "norm_pix",
    "target_grad_to_online",
    "precision",
    "checkpoint_every",
    "stem_factor",
    "stage_depths",
    "stage_widths",
    "block_kind",
    "downsample_factor_per_stage",
    "depth",
    "width",
    "patch_size",
    "out_channels",
];

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn raw(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        self.raw(key)?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("`{key}`: bad list element `{s}`")))
            })
            .collect()
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key)? {
            "true" | "on" | "1" => Ok(true),
            "false" | "off" | "0" => Ok(false),
            v => Err(Error::Config(format!("`{key}`: expected true/false, got `{v}`"))),
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", lineno + 1)));
            }
            if map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
        }
        let f = Fields(map);
        let betas: Vec<f64> = f
            .raw("betas")?
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config("`betas`: expected two comma-separated floats".into()))?;
        let [b1, b2] = betas[..] else {
            return Err(Error::Config("`betas`: expected two comma-separated floats".into()));
        };
        match f.raw("target_grad_to_online")? {
            "off" => {}
            v => return Err(Error::Config(format!("`target_grad_to_online`: only `off` is supported, got `{v}`"))),
        }
        let precision = match f.raw("precision")? {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            v => return Err(Error::Config(format!("`precision`: expected f64 or f32, got `{v}`"))),
        };
        let cfg = Self {
            lr: f.get("lr")?,
            batch_size: f.get("batch_size")?,
            epochs: f.get("epochs")?,
            warmup_epochs: f.get("warmup_epochs")?,
            min_lr: f.get("min_lr")?,
            weight_decay: f.get("weight_decay")?,
            betas: (b1, b2),
            mask_ratio: f.get("mask_ratio")?,
            gamma: f.get("gamma")?,
            frame_gap: f.get("frame_gap")?,
            momentum: f.get("momentum")?,
            seed: f.get("seed")?,
            pairs_per_epoch: f.get("pairs_per_epoch")?,
            image_size: f.get("image_size")?,
            symmetric_masking: f.flag("symmetric_masking")?,
            same_augmentation: f.flag("same_augmentation")?,
            color_jitter: f.flag("color_jitter")?,
            norm_pix: f.flag("norm_pix")?,
            precision,
            checkpoint_every: f.get("checkpoint_every")?,
            encoder: EncoderConfig {
                stem_factor: f.get("stem_factor")?,
                stage_depths: f.list("stage_depths")?,
                stage_widths: f.list("stage_widths")?,
                block_kind: f.get::<String>("block_kind")?.parse::<BlockKind>()?,
                downsample_factor_per_stage: f.get("downsample_factor_per_stage")?,
            },
            decoder: DecoderConfig {
                depth: f.get("depth")?,
                width: f.get("width")?,
                patch_size: f.get("patch_size")?,
                out_channels: f.get("out_channels")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=self.lr).contains(&self.min_lr) {
            return bad(format!("min_lr must lie in [0, lr], got {}", self.min_lr));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!(
                "need 0 <= warmup_epochs < epochs, got {} and {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 || self.pairs_per_epoch == 0 {
            return bad("batch_size and pairs_per_epoch must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1], got {}", self.momentum));
        }
        for b in [self.betas.0, self.betas.1] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("betas must lie in [0, 1), got {b}"));
            }
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0".into());
        }
        if self.frame_gap == 0 {
            return bad("frame_gap must be >= 1".into());
        }
        if self.decoder.out_channels != 3 {
            return bad("out_channels must be 3 for RGB reconstruction".into());
        }
        let model = self.model()?;
        model.grid_for(self.image_size, self.image_size)?;
        Ok(())
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.encoder.clone(), self.decoder.clone())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pairs_per_epoch.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch()
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let flag = |b: bool| if b { "true" } else { "false" };
        let e = &self.encoder;
        let d = &self.decoder;
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "warmup_epochs = {}", self.warmup_epochs);
        let _ = writeln!(s, "min_lr = {}", self.min_lr);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "betas = {},{}", self.betas.0, self.betas.1);
        let _ = writeln!(s, "mask_ratio = {}", self.mask_ratio);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "frame_gap = {}", self.frame_gap);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "pairs_per_epoch = {}", self.pairs_per_epoch);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "symmetric_masking = {}", flag(self.symmetric_masking));
        let _ = writeln!(s, "same_augmentation = {}", flag(self.same_augmentation));
        let _ = writeln!(s, "color_jitter = {}", flag(self.color_jitter));
        let _ = writeln!(s, "norm_pix = {}", flag(self.norm_pix));
        let _ = writeln!(s, "target_grad_to_online = off");
        let _ = writeln!(
            s,
            "precision = {}",
            match self.precision {
                Precision::F64 => "f64",
                Precision::F32 => "f32",
            }
        );
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "stem_factor = {}", e.stem_factor);
        let _ = writeln!(s, "stage_depths = {}", join(&e.stage_depths));
        let _ = writeln!(s, "stage_widths = {}", join(&e.stage_widths));
        let _ = writeln!(s, "block_kind = {}", e.block_kind);
        let _ = writeln!(s, "downsample_factor_per_stage = {}", e.downsample_factor_per_stage);
        let _ = writeln!(s, "depth = {}", d.depth);
        let _ = writeln!(s, "width = {}", d.width);
        let _ = writeln!(s, "patch_size = {}", d.patch_size);
        let _ = writeln!(s, "out_channels = {}", d.out_channels);
        s
    }
}
