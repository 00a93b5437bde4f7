//! Named parameter storage, layout, initialization, and optimizer grouping.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor};

/// How a parameter is filled at initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupId {
    UniModal,
    CrossModal,
    Heads,
}

impl GroupId {
    pub const ALL: [GroupId; 3] = [GroupId::UniModal, GroupId::CrossModal, GroupId::Heads];

    pub fn as_str(&self) -> &'static str {
        match self {
            GroupId::UniModal => "uni_modal",
            GroupId::CrossModal => "cross_modal",
            GroupId::Heads => "heads",
        }
    }

    /// Group for a parameter name, or `None` when the prefix is unknown.
    pub fn of(name: &str) -> Option<GroupId> {
        match name.split('.').next()? {
            "visual" | "text" => Some(GroupId::UniModal),
            "bridge" | "fusion" => Some(GroupId::CrossModal),
            "heads" => Some(GroupId::Heads),
            _ => None,
        }
    }
}

/// Biases, norm gains/offsets, gate biases and type embeddings skip weight decay.
pub fn decay_exempt(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    last == "bias" || last.ends_with("_bias") || last == "gamma" || last == "beta" || last.ends_with("_type")
}

struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.gamma"), vec![d], Init::Ones);
        self.push(format!("{prefix}.beta"), vec![d], Init::Zeros);
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        self.push(format!("{prefix}.weight"), vec![din, dout], Init::Normal);
        self.push(format!("{prefix}.bias"), vec![dout], Init::Zeros);
    }

    /// Self- or cross-attention block. No key bias: it only shifts each
    /// softmax row by a constant.
    fn attention(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.q_weight"), vec![d, d], Init::Normal);
        self.push(format!("{prefix}.q_bias"), vec![d], Init::Zeros);
        self.push(format!("{prefix}.k_weight"), vec![d, d], Init::Normal);
        self.push(format!("{prefix}.v_weight"), vec![d, d], Init::Normal);
        self.push(format!("{prefix}.v_bias"), vec![d], Init::Zeros);
        self.push(format!("{prefix}.o_weight"), vec![d, d], Init::Normal);
        self.push(format!("{prefix}.o_bias"), vec![d], Init::Zeros);
    }

    fn ffn(&mut self, prefix: &str, d: usize, mult: usize) {
        self.linear(&format!("{prefix}.ffn_in"), d, mult * d);
        self.linear(&format!("{prefix}.ffn_out"), mult * d, d);
    }

    fn encoder_layer(&mut self, prefix: &str, d: usize, mult: usize) {
        self.attention(&format!("{prefix}.attn"), d);
        self.norm(&format!("{prefix}.ln1"), d);
        self.ffn(prefix, d, mult);
        self.norm(&format!("{prefix}.ln2"), d);
    }

    fn fusion_stream(&mut self, prefix: &str, d: usize, mult: usize) {
        self.attention(&format!("{prefix}.msa"), d);
        self.norm(&format!("{prefix}.ln1"), d);
        self.attention(&format!("{prefix}.mca"), d);
        self.norm(&format!("{prefix}.ln2"), d);
        self.ffn(prefix, d, mult);
        self.norm(&format!("{prefix}.ln3"), d);
    }
}

/// Every parameter tensor of the model, in a fixed order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut l = Layout { specs: Vec::new() };
    let (dv, dt, df) = (cfg.d_visual, cfg.d_text, cfg.d_fusion);

    l.push("visual.patch_proj".into(), vec![cfg.patch_dim(), dv], Init::Normal);
    l.push("visual.class".into(), vec![dv], Init::Normal);
    l.push("visual.pos".into(), vec![cfg.num_patches() + 1, dv], Init::Normal);
    for i in 0..cfg.visual_layers {
        l.encoder_layer(&format!("visual.layers.{i}"), dv, cfg.ffn_mult);
    }

    l.push("text.word".into(), vec![cfg.vocab_size, dt], Init::Normal);
    l.push("text.pos".into(), vec![cfg.max_text_len, dt], Init::Normal);
    for i in 0..cfg.text_layers {
        l.encoder_layer(&format!("text.layers.{i}"), dt, cfg.ffn_mult);
    }

    l.push("bridge.text_proj".into(), vec![dt, df], Init::Normal);
    l.push("bridge.visual_proj".into(), vec![dv, df], Init::Normal);
    l.push("bridge.text_type".into(), vec![df], Init::Normal);
    l.push("bridge.visual_type".into(), vec![df], Init::Normal);
    for i in 0..cfg.fusion_layers {
        let p = format!("bridge.layers.{i}");
        l.linear(&format!("{p}.text_gate"), dt, df);
        l.linear(&format!("{p}.visual_gate"), dv, df);
        l.norm(&format!("{p}.text_link"), df);
        l.norm(&format!("{p}.visual_link"), df);
        if cfg.per_layer_projection {
            l.push(format!("{p}.text_proj"), vec![dt, df], Init::Normal);
            l.push(format!("{p}.visual_proj"), vec![dv, df], Init::Normal);
        }
    }

    for i in 0..cfg.fusion_layers {
        l.fusion_stream(&format!("fusion.layers.{i}.text"), df, cfg.ffn_mult);
        l.fusion_stream(&format!("fusion.layers.{i}.visual"), df, cfg.ffn_mult);
    }

    l.linear("heads.mlm", df, cfg.vocab_size);
    l.linear("heads.itm", 2 * df, 2);
    if cfg.cls_classes > 0 {
        l.linear("heads.cls", 2 * df, cfg.cls_classes);
    }
    l.specs
}

/// Ordered map from parameter name to tensor.
///
/// The same type holds plain values and tape-bound leaves (see [`ParamStore::bind`]).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeded initialization: weights and embeddings from `N(0, init_std²)`,
    /// biases zero, norm gains one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.init_std).expect("positive std");
        let mut store = ParamStore::new();
        for spec in param_layout(cfg) {
            let n = spec.numel();
            let data = match spec.init {
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            store.insert(spec.name, Tensor::from_parts(spec.shape, data));
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// View with a name prefix.
    pub fn scope<'a>(&'a self, prefix: &str) -> Scope<'a> {
        Scope {
            store: self,
            prefix: prefix.to_string(),
        }
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> ParamStore {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v))).collect(),
        }
    }

    /// Copy with tape associations dropped.
    pub fn detached(&self) -> ParamStore {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }

    /// Gradient for each bound parameter; zeros where unreachable.
    pub fn gradients(&self, grads: &Gradients) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), grads.get_or_zeros(v)))
                .collect(),
        }
    }

    /// `self += other · scale`, elementwise per tensor (names must match).
    pub fn axpy(&mut self, other: &ParamStore, scale: f64) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(Error::shape("axpy", t.shape(), o.shape()));
            }
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    /// Zero-filled store with the same names and shapes.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

/// Prefixed lookup into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn get(&self, name: &str) -> Result<&'a Tensor> {
        self.store.get(&format!("{}.{name}", self.prefix))
    }

    pub fn scope(&self, prefix: &str) -> Scope<'a> {
        Scope {
            store: self.store,
            prefix: format!("{}.{prefix}", self.prefix),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }
}
