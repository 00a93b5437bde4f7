//! Model and training configuration, presets, and the flat `key = value` file format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which uni-modal layers feed each fusion layer through gated bridges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Topology {
    /// Every fusion layer sees every uni-modal layer.
    AllGated,
    /// Fusion layer `l` sees uni-modal layer `L − L_F + l` only.
    SameLayer,
    /// No bridges; only the initial projection carries uni-modal features.
    LastOnly,
    /// The first fusion layer sees every uni-modal layer; later layers see none.
    BottomOnly,
}

impl Topology {
    pub const ALL: [Topology; 4] = [
        Topology::AllGated,
        Topology::SameLayer,
        Topology::LastOnly,
        Topology::BottomOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Topology::AllGated => "all-gated",
            Topology::SameLayer => "same-layer",
            Topology::LastOnly => "last-only",
            Topology::BottomOnly => "bottom-only",
        }
    }

    /// 1-indexed uni-modal source layers bridged into fusion layer `layer`
    /// (1-indexed) for a modality with `uni_depth` layers.
    pub fn sources(&self, layer: usize, uni_depth: usize, fusion_depth: usize) -> Vec<usize> {
        match self {
            Topology::AllGated => (1..=uni_depth).collect(),
            Topology::SameLayer => {
                // Uni-modal layer L − L_F + l; nothing when that falls below 1.
                let idx = (uni_depth + layer).checked_sub(fusion_depth);
                idx.filter(|&i| i >= 1 && i <= uni_depth).into_iter().collect()
            }
            Topology::LastOnly => Vec::new(),
            Topology::BottomOnly if layer == 1 => (1..=uni_depth).collect(),
            Topology::BottomOnly => Vec::new(),
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Topology::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown topology `{s}`")))
    }
}

/// How a sequence is reduced to one feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Row 0: the start token for text, the class token for images.
    First,
    Mean,
}

impl Pooling {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pooling::First => "first",
            Pooling::Mean => "mean",
        }
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Pooling::First),
            "mean" => Ok(Pooling::Mean),
            _ => Err(Error::Config(format!("unknown pooling `{s}`"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_visual: usize,
    pub d_text: usize,
    pub d_fusion: usize,
    pub visual_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub heads_uni: usize,
    pub heads_fusion: usize,
    pub ffn_mult: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub vocab_size: usize,
    /// Token budget including the start and end tokens.
    pub max_text_len: usize,
    /// Start-interaction layer; `None` means one past the last uni-modal layer
    /// of each modality.
    pub start_layer: Option<usize>,
    pub topology: Topology,
    /// Separate bridge projections per fusion layer instead of the shared ones.
    pub per_layer_projection: bool,
    pub itm_pooling: Pooling,
    pub cls_classes: usize,
    pub ln_eps: f64,
    pub init_std: f64,
    pub mask_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale preset used by tests and the learnability run.
    pub fn toy() -> Self {
        ModelConfig {
            d_visual: 32,
            d_text: 32,
            d_fusion: 32,
            visual_layers: 4,
            text_layers: 4,
            fusion_layers: 2,
            heads_uni: 4,
            heads_fusion: 4,
            ffn_mult: 4,
            patch: 4,
            height: 16,
            width: 16,
            channels: 3,
            vocab_size: 64,
            max_text_len: 50,
            start_layer: None,
            topology: Topology::AllGated,
            per_layer_projection: false,
            itm_pooling: Pooling::First,
            cls_classes: 0,
            ln_eps: 1e-5,
            init_std: 0.02,
            mask_rate: 0.15,
            seed: 7,
        }
    }

    /// Base-size dimensions: 768-wide, 12-head encoders, 6 fusion layers
    /// with 3072-wide FFNs, 224px images in 16px patches, 50-token text.
    pub fn base() -> Self {
        ModelConfig {
            d_visual: 768,
            d_text: 768,
            d_fusion: 768,
            visual_layers: 12,
            text_layers: 12,
            fusion_layers: 6,
            heads_uni: 12,
            heads_fusion: 12,
            ffn_mult: 4,
            patch: 16,
            height: 224,
            width: 224,
            channels: 3,
            vocab_size: 50265,
            max_text_len: 50,
            ..Self::toy()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    /// Number of image patches `N = H·W / P²`.
    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Start layer for the text tower (1-indexed; initial fusion input reads layer `S − 1`).
    pub fn start_text(&self) -> usize {
        self.start_layer.unwrap_or(self.text_layers + 1)
    }

    pub fn start_visual(&self) -> usize {
        self.start_layer.unwrap_or(self.visual_layers + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return fail(format!(
                "image {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            ));
        }
        if self.num_patches() == 0 || self.channels == 0 {
            return fail("image must contain at least one patch".into());
        }
        for (name, d, h) in [
            ("d_fusion", self.d_fusion, self.heads_fusion),
            ("d_visual", self.d_visual, self.heads_uni),
            ("d_text", self.d_text, self.heads_uni),
        ] {
            if d == 0 || h == 0 || d % h != 0 {
                return fail(format!("{name}={d} not divisible by {h} heads"));
            }
        }
        if self.ffn_mult == 0 || self.fusion_layers == 0 {
            return fail("ffn_mult and fusion_layers must be ≥ 1".into());
        }
        if let Some(s) = self.start_layer {
            if s < 1 || s > self.text_layers + 1 || s > self.visual_layers + 1 {
                return fail(format!(
                    "start_layer {s} outside 1..={}",
                    self.text_layers.min(self.visual_layers) + 1
                ));
            }
        }
        if self.max_text_len < 3 {
            return fail("max_text_len must be ≥ 3".into());
        }
        if self.vocab_size <= crate::vocab::NUM_SPECIALS {
            return fail("vocab_size must exceed the special-token count".into());
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return fail(format!("mask_rate {} outside (0, 1)", self.mask_rate));
        }
        if !(self.ln_eps > 0.0) || !(self.init_std > 0.0) {
            return fail("ln_eps and init_std must be > 0".into());
        }
        Ok(())
    }

    /// Closed-form parameter count for this configuration.
    ///
    /// With `F = ffn_mult·D`, one post-LN encoder layer holds
    /// `4D² + 2DF + F + 8D` parameters (no key bias); a fusion stream layer
    /// adds a cross-attention block and a third norm for `8D² + 2DF + F + 13D`.
    pub fn param_count_formula(&self) -> usize {
        let enc_layer = |d: usize| {
            let f = self.ffn_mult * d;
            4 * d * d + 2 * d * f + f + 8 * d
        };
        let (dv, dt, df) = (self.d_visual, self.d_text, self.d_fusion);
        let ff = self.ffn_mult * df;
        let visual = self.patch_dim() * dv + dv + (self.num_patches() + 1) * dv + self.visual_layers * enc_layer(dv);
        let text = self.vocab_size * dt + self.max_text_len * dt + self.text_layers * enc_layer(dt);
        let proj = dt * df + dv * df;
        let per_bridge_layer =
            (dt * df + df) + (dv * df + df) + 4 * df + if self.per_layer_projection { proj } else { 0 };
        let bridge = proj + 2 * df + self.fusion_layers * per_bridge_layer;
        let fusion = self.fusion_layers * 2 * (8 * df * df + 2 * df * ff + ff + 13 * df);
        let mut heads = (df * self.vocab_size + self.vocab_size) + (2 * df * 2 + 2);
        if self.cls_classes > 0 {
            heads += 2 * df * self.cls_classes + self.cls_classes;
        }
        visual + text + bridge + fusion + heads
    }
}

/// Optimizer, schedule, and loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub neg_fraction: f64,
    pub mlm_weight: f64,
    pub itm_weight: f64,
    pub uni_lr_mult: f64,
    pub cross_lr_mult: f64,
    pub heads_lr_mult: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub corpus_size: usize,
    pub eval_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-5,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            total_steps: 100_000,
            batch_size: 4096,
            neg_fraction: 0.5,
            mlm_weight: 1.0,
            itm_weight: 1.0,
            uni_lr_mult: 1.0,
            cross_lr_mult: 5.0,
            heads_lr_mult: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            checkpoint_every: 0,
            corpus_size: 360,
            eval_size: 360,
        }
    }
}

impl TrainConfig {
    /// Settings of the desk-scale learnability run.
    pub fn toy() -> Self {
        TrainConfig {
            base_lr: 3e-4,
            total_steps: 2000,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return fail("warmup_fraction must be in (0, 1)");
        }
        if !(self.neg_fraction > 0.0 && self.neg_fraction < 1.0) {
            return fail("neg_fraction must be in (0, 1)");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1");
        }
        if self.base_lr < 0.0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return fail("base_lr, weight_decay and grad_clip must be ≥ 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("betas must be in [0, 1) and adam_eps > 0");
        }
        Ok(())
    }
}

/// Full run configuration: model plus training.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn toy() -> Self {
        Config {
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
        }
    }

    pub fn base() -> Self {
        Config {
            model: ModelConfig::base(),
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses `key = value` lines. `#` starts a comment; unknown keys are
    /// rejected. An optional `preset = toy | base` selects the starting point.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut preset = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                preset = Some(value.to_string());
            } else {
                entries.push((i + 1, key.to_string(), value.to_string()));
            }
        }
        let mut cfg = match preset.as_deref() {
            None | Some("toy") => Config::toy(),
            Some("base") => Config::base(),
            Some(other) => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        for (line, key, value) in entries {
            cfg.set(&key, &value).map_err(|e| Error::ConfigParse {
                line,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets a single key. Used by the file parser and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "d_visual" => m.d_visual = p(key, value)?,
            "d_text" => m.d_text = p(key, value)?,
            "d_fusion" => m.d_fusion = p(key, value)?,
            "visual_layers" => m.visual_layers = p(key, value)?,
            "text_layers" => m.text_layers = p(key, value)?,
            "fusion_layers" => m.fusion_layers = p(key, value)?,
            "heads_uni" => m.heads_uni = p(key, value)?,
            "heads_fusion" => m.heads_fusion = p(key, value)?,
            "ffn_mult" => m.ffn_mult = p(key, value)?,
            "patch" => m.patch = p(key, value)?,
            "height" => m.height = p(key, value)?,
            "width" => m.width = p(key, value)?,
            "channels" => m.channels = p(key, value)?,
            "vocab_size" => m.vocab_size = p(key, value)?,
            "max_text_len" => m.max_text_len = p(key, value)?,
            "start_layer" => {
                m.start_layer = match value {
                    "last" => None,
                    v => Some(p(key, v)?),
                }
            }
            "topology" => m.topology = value.parse()?,
            "per_layer_projection" => m.per_layer_projection = p(key, value)?,
            "itm_pooling" => m.itm_pooling = value.parse()?,
            "cls_classes" => m.cls_classes = p(key, value)?,
            "ln_eps" => m.ln_eps = p(key, value)?,
            "init_std" => m.init_std = p(key, value)?,
            "mask_rate" => m.mask_rate = p(key, value)?,
            "seed" => m.seed = p(key, value)?,
            "base_lr" => t.base_lr = p(key, value)?,
            "weight_decay" => t.weight_decay = p(key, value)?,
            "warmup_fraction" => t.warmup_fraction = p(key, value)?,
            "total_steps" => t.total_steps = p(key, value)?,
            "batch_size" => t.batch_size = p(key, value)?,
            "neg_fraction" => t.neg_fraction = p(key, value)?,
            "mlm_weight" => t.mlm_weight = p(key, value)?,
            "itm_weight" => t.itm_weight = p(key, value)?,
            "uni_lr_mult" => t.uni_lr_mult = p(key, value)?,
            "cross_lr_mult" => t.cross_lr_mult = p(key, value)?,
            "heads_lr_mult" => t.heads_lr_mult = p(key, value)?,
            "beta1" => t.beta1 = p(key, value)?,
            "beta2" => t.beta2 = p(key, value)?,
            "adam_eps" => t.adam_eps = p(key, value)?,
            "grad_clip" => t.grad_clip = p(key, value)?,
            "checkpoint_every" => t.checkpoint_every = p(key, value)?,
            "corpus_size" => t.corpus_size = p(key, value)?,
            "eval_size" => t.eval_size = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let m = &self.model;
        let t = &self.train;
        let mut e = BTreeMap::new();
        e.insert("d_visual", m.d_visual.to_string());
        e.insert("d_text", m.d_text.to_string());
        e.insert("d_fusion", m.d_fusion.to_string());
        e.insert("visual_layers", m.visual_layers.to_string());
        e.insert("text_layers", m.text_layers.to_string());
        e.insert("fusion_layers", m.fusion_layers.to_string());
        e.insert("heads_uni", m.heads_uni.to_string());
        e.insert("heads_fusion", m.heads_fusion.to_string());
        e.insert("ffn_mult", m.ffn_mult.to_string());
        e.insert("patch", m.patch.to_string());
        e.insert("height", m.height.to_string());
        e.insert("width", m.width.to_string());
        e.insert("channels", m.channels.to_string());
        e.insert("vocab_size", m.vocab_size.to_string());
        e.insert("max_text_len", m.max_text_len.to_string());
        e.insert(
            "start_layer",
            m.start_layer.map_or_else(|| "last".to_string(), |s| s.to_string()),
        );
        e.insert("topology", m.topology.to_string());
        e.insert("per_layer_projection", m.per_layer_projection.to_string());
        e.insert("itm_pooling", m.itm_pooling.as_str().to_string());
        e.insert("cls_classes", m.cls_classes.to_string());
        e.insert("ln_eps", m.ln_eps.to_string());
        e.insert("init_std", m.init_std.to_string());
        e.insert("mask_rate", m.mask_rate.to_string());
        e.insert("seed", m.seed.to_string());
        e.insert("base_lr", t.base_lr.to_string());
        e.insert("weight_decay", t.weight_decay.to_string());
        e.insert("warmup_fraction", t.warmup_fraction.to_string());
        e.insert("total_steps", t.total_steps.to_string());
        e.insert("batch_size", t.batch_size.to_string());
        e.insert("neg_fraction", t.neg_fraction.to_string());
        e.insert("mlm_weight", t.mlm_weight.to_string());
        e.insert("itm_weight", t.itm_weight.to_string());
        e.insert("uni_lr_mult", t.uni_lr_mult.to_string());
        e.insert("cross_lr_mult", t.cross_lr_mult.to_string());
        e.insert("heads_lr_mult", t.heads_lr_mult.to_string());
        e.insert("beta1", t.beta1.to_string());
        e.insert("beta2", t.beta2.to_string());
        e.insert("adam_eps", t.adam_eps.to_string());
        e.insert("grad_clip", t.grad_clip.to_string());
        e.insert("checkpoint_every", t.checkpoint_every.to_string());
        e.insert("corpus_size", t.corpus_size.to_string());
        e.insert("eval_size", t.eval_size.to_string());
        e
    }

    /// Serializes every key; [`Config::parse`] reads it back exactly.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
