//! Uni-modal towers: patch and token embeddings, post-LN transformer layers,
//! and the per-layer trace consumed by the fusion bridges.

use std::sync::Arc;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{ParamStore, Scope};
use crate::tensor::{Tape, Tensor};
use crate::vocab::{self, Vocab};

/// Additive logit value for masked-out keys.
pub const MASK_VALUE: f64 = -1e9;

/// Embedded image: row 0 is the class token, rows `1..=N` the patches.
#[derive(Clone, Debug)]
pub struct PatchSequence {
    pub embeddings: Tensor,
    pub num_patches: usize,
}

/// Embedded caption: `[start, w_1 .. w_M, end]`.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub embeddings: Tensor,
}

impl TokenSequence {
    pub fn positions(&self) -> std::ops::Range<usize> {
        0..self.ids.len()
    }
}

/// Every layer output of both towers, inputs included at index 0.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// `[T_0, T_1, .., T_{L_T}]`.
    pub text: Vec<Tensor>,
    /// `[V_0, V_1, .., V_{L_V}]`.
    pub visual: Vec<Tensor>,
    /// Self-attention probabilities per text layer, `heads × S × S`.
    pub text_attn: Vec<Tensor>,
    pub visual_attn: Vec<Tensor>,
}

impl LayerTrace {
    pub fn text_depth(&self) -> usize {
        self.text.len() - 1
    }

    pub fn visual_depth(&self) -> usize {
        self.visual.len() - 1
    }

    /// `T_l` for `l` in `0..=L_T`.
    pub fn text_layer(&self, l: usize) -> Result<&Tensor> {
        self.text
            .get(l)
            .ok_or_else(|| Error::invalid("trace", format!("text layer {l} beyond depth {}", self.text_depth())))
    }

    pub fn visual_layer(&self, l: usize) -> Result<&Tensor> {
        self.visual.get(l).ok_or_else(|| {
            Error::invalid(
                "trace",
                format!("visual layer {l} beyond depth {}", self.visual_depth()),
            )
        })
    }

    /// Copy whose tensors carry no tape ids.
    pub fn detached(&self) -> LayerTrace {
        let d = |v: &Vec<Tensor>| v.iter().map(Tensor::detach).collect();
        LayerTrace {
            text: d(&self.text),
            visual: d(&self.visual),
            text_attn: self.text_attn.clone(),
            visual_attn: self.visual_attn.clone(),
        }
    }
}

/// Splits a `C×H×W` image into `N × (C·P²)` rows.
///
/// Patches run row-major from the top-left; each is flattened channel-major,
/// then row, then column.
pub fn patchify(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let expected = [cfg.channels, cfg.height, cfg.width];
    if image.shape() != expected {
        return Err(Error::shape("patchify", image.shape(), &expected));
    }
    let p = cfg.patch;
    if p == 0 || !cfg.height.is_multiple_of(p) || !cfg.width.is_multiple_of(p) {
        return Err(Error::invalid(
            "patchify",
            format!("{}x{} image not divisible by patch {p}", cfg.height, cfg.width),
        ));
    }
    let (gh, gw) = cfg.grid();
    let (h, w) = (cfg.height, cfg.width);
    let px = image.data();
    let mut rows = Vec::with_capacity(gh * gw * cfg.patch_dim());
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..cfg.channels {
                for dy in 0..p {
                    let y = gy * p + dy;
                    let start = c * h * w + y * w + gx * p;
                    rows.extend_from_slice(&px[start..start + p]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, cfg.patch_dim()], rows)
}

/// `V_0 = [E_class; patches·W^p] + V^pos`.
pub fn patchify_embed(tape: &mut Tape, image: &Tensor, cfg: &ModelConfig, params: &Scope<'_>) -> Result<PatchSequence> {
    let patches = patchify(image, cfg)?;
    let n = patches.shape()[0];
    let projected = tape.matmul(&patches, params.get("patch_proj")?)?;
    let class = tape.reshape(params.get("class")?, &[1, cfg.d_visual])?;
    let seq = tape.concat(&[&class, &projected], 0)?;
    let embeddings = tape.add(&seq, params.get("pos")?)?;
    Ok(PatchSequence {
        embeddings,
        num_patches: n,
    })
}

/// Word-embedding gather plus the first `len` rows of the position table.
pub fn embed_tokens(tape: &mut Tape, ids: &[usize], cfg: &ModelConfig, params: &Scope<'_>) -> Result<TokenSequence> {
    if ids.len() < 2 || ids.len() > cfg.max_text_len {
        return Err(Error::invalid(
            "embed_tokens",
            format!("sequence length {} outside 2..={}", ids.len(), cfg.max_text_len),
        ));
    }
    if ids[0] != vocab::START || ids[ids.len() - 1] != vocab::END {
        return Err(Error::invalid(
            "embed_tokens",
            "sequence must open with start and close with end",
        ));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::invalid(
            "embed_tokens",
            format!("id {bad} ≥ vocab_size {}", cfg.vocab_size),
        ));
    }
    let words = tape.gather(params.get("word")?, ids)?;
    let pos = tape.slice(params.get("pos")?, 0, 0, ids.len())?;
    let embeddings = tape.add(&words, &pos)?;
    Ok(TokenSequence {
        ids: ids.to_vec(),
        embeddings,
    })
}

/// Tokenizes `text` (lowercased, whitespace split, truncated) and embeds it.
pub fn tokenize_embed(
    tape: &mut Tape,
    text: &str,
    vocab: &Vocab,
    cfg: &ModelConfig,
    params: &Scope<'_>,
) -> Result<TokenSequence> {
    if vocab.len() <= vocab::NUM_SPECIALS {
        return Err(Error::invalid("tokenize_embed", "vocabulary has no word entries"));
    }
    let ids = vocab.encode(text, cfg.max_text_len);
    embed_tokens(tape, &ids, cfg, params)
}

/// Additive key mask with [`MASK_VALUE`] at pad positions, or `None` when
/// nothing is padded.
pub fn padding_mask(ids: &[usize]) -> Option<Arc<Vec<f64>>> {
    if !ids.contains(&vocab::PAD) {
        return None;
    }
    Some(Arc::new(
        ids.iter()
            .map(|&i| if i == vocab::PAD { MASK_VALUE } else { 0.0 })
            .collect(),
    ))
}

/// `x·W + b` with `W: in×out`.
pub fn linear(tape: &mut Tape, x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = tape.matmul(x, weight)?;
    match bias {
        Some(b) => tape.add(&y, b),
        None => Ok(y),
    }
}

/// Multi-head scaled dot-product attention of `queries` over `context`.
///
/// Returns the output projection and the per-head probabilities
/// (`heads × Sq × Sk`, detached).
pub fn attention(
    tape: &mut Tape,
    queries: &Tensor,
    context: &Tensor,
    params: &Scope<'_>,
    heads: usize,
    key_mask: Option<&Arc<Vec<f64>>>,
) -> Result<(Tensor, Tensor)> {
    let d = *queries.shape().last().unwrap_or(&0);
    if context.rank() != 2 || queries.rank() != 2 || context.shape()[1] != d {
        return Err(Error::shape("attention", queries.shape(), context.shape()));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::invalid(
            "attention",
            format!("width {d} not divisible by {heads} heads"),
        ));
    }
    let (sq, sk) = (queries.shape()[0], context.shape()[0]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(tape, queries, params.get("q_weight")?, Some(params.get("q_bias")?))?;
    let k = linear(tape, context, params.get("k_weight")?, None)?;
    let v = linear(tape, context, params.get("v_weight")?, Some(params.get("v_bias")?))?;
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads * sq * sk);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (
                tape.slice(&q, 1, lo, hi)?,
                tape.slice(&k, 1, lo, hi)?,
                tape.slice(&v, 1, lo, hi)?,
            )
        };
        let kt = tape.transpose(&kh)?;
        let scores = tape.matmul(&qh, &kt)?;
        let scores = tape.scale(&scores, scale)?;
        let p = tape.softmax(&scores, key_mask.cloned())?;
        probs.extend_from_slice(p.data());
        outs.push(tape.matmul(&p, &vh)?);
    }
    let merged = if heads == 1 {
        outs.pop().unwrap()
    } else {
        let refs: Vec<&Tensor> = outs.iter().collect();
        tape.concat(&refs, 1)?
    };
    let out = linear(tape, &merged, params.get("o_weight")?, Some(params.get("o_bias")?))?;
    Ok((out, Tensor::from_parts(vec![heads, sq, sk], probs)))
}

/// Position-wise `gelu(x·W1 + b1)·W2 + b2`.
pub fn feed_forward(tape: &mut Tape, x: &Tensor, params: &Scope<'_>) -> Result<Tensor> {
    let h = linear(tape, x, params.get("ffn_in.weight")?, Some(params.get("ffn_in.bias")?))?;
    let h = tape.gelu(&h)?;
    linear(
        tape,
        &h,
        params.get("ffn_out.weight")?,
        Some(params.get("ffn_out.bias")?),
    )
}

/// Residual add followed by layer norm with gains under `params.{norm}`.
pub fn add_norm(tape: &mut Tape, x: &Tensor, delta: &Tensor, norm: &Scope<'_>, eps: f64) -> Result<Tensor> {
    let sum = tape.add(x, delta)?;
    tape.layer_norm(&sum, norm.get("gamma")?, norm.get("beta")?, eps)
}

/// Post-LN block: `x' = LN(x + MSA(x))`, `out = LN(x' + FFN(x'))`.
pub fn transformer_layer(
    tape: &mut Tape,
    x: &Tensor,
    params: &Scope<'_>,
    heads: usize,
    eps: f64,
    key_mask: Option<&Arc<Vec<f64>>>,
) -> Result<(Tensor, Tensor)> {
    let (attn, probs) = attention(tape, x, x, &params.scope("attn"), heads, key_mask)?;
    let x1 = add_norm(tape, x, &attn, &params.scope("ln1"), eps)?;
    let ff = feed_forward(tape, &x1, params)?;
    let out = add_norm(tape, &x1, &ff, &params.scope("ln2"), eps)?;
    Ok((out, probs))
}

fn run_stack(
    tape: &mut Tape,
    input: &Tensor,
    params: &Scope<'_>,
    depth: usize,
    heads: usize,
    eps: f64,
    key_mask: Option<&Arc<Vec<f64>>>,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut outs = Vec::with_capacity(depth);
    let mut attn = Vec::with_capacity(depth);
    let mut x = input.clone();
    for i in 0..depth {
        let (y, p) = transformer_layer(tape, &x, &params.scope(&format!("layers.{i}")), heads, eps, key_mask)?;
        outs.push(y.clone());
        attn.push(p);
        x = y;
    }
    Ok((outs, attn))
}

/// Runs the visual tower; returns `[V_1..V_{L_V}]` and attention records.
pub fn encode_visual(
    tape: &mut Tape,
    v0: &PatchSequence,
    params: &Scope<'_>,
    cfg: &ModelConfig,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    run_stack(
        tape,
        &v0.embeddings,
        params,
        cfg.visual_layers,
        cfg.heads_uni,
        cfg.ln_eps,
        None,
    )
}

/// Runs the text tower; pad ids are masked out as keys.
pub fn encode_textual(
    tape: &mut Tape,
    t0: &TokenSequence,
    params: &Scope<'_>,
    cfg: &ModelConfig,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mask = padding_mask(&t0.ids);
    run_stack(
        tape,
        &t0.embeddings,
        params,
        cfg.text_layers,
        cfg.heads_uni,
        cfg.ln_eps,
        mask.as_ref(),
    )
}

/// Embeds and encodes one (caption ids, image) pair through both towers.
pub fn encode_pair(
    tape: &mut Tape,
    ids: &[usize],
    image: &Tensor,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<LayerTrace> {
    let vis = params.scope("visual");
    let txt = params.scope("text");
    let v0 = patchify_embed(tape, image, cfg, &vis)?;
    let t0 = embed_tokens(tape, ids, cfg, &txt)?;
    let (vl, va) = encode_visual(tape, &v0, &vis, cfg)?;
    let (tl, ta) = encode_textual(tape, &t0, &txt, cfg)?;
    let mut visual = vec![v0.embeddings];
    visual.extend(vl);
    let mut text = vec![t0.embeddings];
    text.extend(tl);
    Ok(LayerTrace {
        text,
        visual,
        text_attn: ta,
        visual_attn: va,
    })
}
