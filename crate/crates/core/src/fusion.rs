//! Cross-modal fusion encoder fed through sigmoid-gated cross-layer bridges.
//!
//! Fusion layer `l` consumes `Z̃_{l−1} = LN(Z_{l−1} + Σ_k g_k ⊙ proj(U_k))`
//! per modality, where `U_k` ranges over the uni-modal layers the configured
//! [`Topology`] bridges into layer `l`, and
//! `g_k = σ(U_k·W_G + b + Z_{l−1})` uses one gate parameter set per fusion
//! layer and modality.

use std::collections::BTreeMap;
use std::fmt;

use crate::config::{ModelConfig, Topology};
use crate::encoders::{add_norm, attention, feed_forward, LayerTrace};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Scope};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifies one bridge: fusion layer (1-indexed), modality, and source
/// uni-modal layer (1-indexed).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GateKey {
    pub layer: usize,
    pub modality: Modality,
    pub source: usize,
}

/// Attention probabilities recorded by one fusion layer.
#[derive(Clone, Debug)]
pub struct FusionAttention {
    pub text_msa: Tensor,
    pub text_mca: Tensor,
    pub visual_msa: Tensor,
    pub visual_mca: Tensor,
}

/// Everything a fusion pass produces.
#[derive(Clone, Debug)]
pub struct FusionState {
    pub z0_text: Tensor,
    pub z0_visual: Tensor,
    /// `[Z^T_1 .. Z^T_{L_F}]`.
    pub z_text: Vec<Tensor>,
    pub z_visual: Vec<Tensor>,
    /// Gate values (detached) per bridge.
    pub gates: BTreeMap<GateKey, Tensor>,
    pub attn: Vec<FusionAttention>,
}

impl FusionState {
    pub fn final_text(&self) -> &Tensor {
        self.z_text.last().unwrap_or(&self.z0_text)
    }

    pub fn final_visual(&self) -> &Tensor {
        self.z_visual.last().unwrap_or(&self.z0_visual)
    }
}

fn projection<'a>(params: &'a ParamStore, cfg: &ModelConfig, layer: usize, m: Modality) -> Result<&'a Tensor> {
    if cfg.per_layer_projection && layer > 0 {
        params.get(&format!("bridge.layers.{}.{}_proj", layer - 1, m.as_str()))
    } else {
        params.get(&format!("bridge.{}_proj", m.as_str()))
    }
}

/// `Z_0 = U_{S−1}·W + type` per modality.
pub fn init_fusion_inputs(
    tape: &mut Tape,
    trace: &LayerTrace,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<(Tensor, Tensor)> {
    let st = cfg.start_text();
    let sv = cfg.start_visual();
    if st == 0 || st > trace.text.len() || sv == 0 || sv > trace.visual.len() {
        return Err(Error::invalid(
            "init_fusion_inputs",
            format!(
                "start layers ({st}, {sv}) out of range for depths ({}, {})",
                trace.text_depth(),
                trace.visual_depth()
            ),
        ));
    }
    let bridge = params.scope("bridge");
    let t = tape.matmul(trace.text_layer(st - 1)?, bridge.get("text_proj")?)?;
    let zt = tape.add(&t, bridge.get("text_type")?)?;
    let v = tape.matmul(trace.visual_layer(sv - 1)?, bridge.get("visual_proj")?)?;
    let zv = tape.add(&v, bridge.get("visual_type")?)?;
    Ok((zt, zv))
}

/// `σ(source·W_G + b + prev)`, elementwise over tokens and hidden units.
pub fn compute_gate(tape: &mut Tape, source: &Tensor, prev: &Tensor, gate: &Scope<'_>) -> Result<Tensor> {
    if source.rank() != 2 || prev.rank() != 2 || source.shape()[0] != prev.shape()[0] {
        return Err(Error::shape("compute_gate", source.shape(), prev.shape()));
    }
    let pre = tape.matmul(source, gate.get("weight")?)?;
    let pre = tape.add(&pre, gate.get("bias")?)?;
    let pre = tape.add(&pre, prev)?;
    tape.sigmoid(&pre)
}

/// One bridged source: uni-modal layer index, raw features, and their
/// projection into the fusion width.
pub struct BridgeSource<'a> {
    pub layer: usize,
    pub features: &'a Tensor,
    pub projected: &'a Tensor,
}

/// `LN(prev + Σ_k g_k ⊙ proj(U_k))`; returns the aggregate and each source's gate.
pub fn bridge_aggregate(
    tape: &mut Tape,
    prev: &Tensor,
    sources: &[BridgeSource<'_>],
    gate: &Scope<'_>,
    link: &Scope<'_>,
    eps: f64,
) -> Result<(Tensor, Vec<(usize, Tensor)>)> {
    let mut acc = prev.clone();
    let mut gates = Vec::with_capacity(sources.len());
    for src in sources {
        if src.projected.shape() != prev.shape() {
            return Err(Error::shape("bridge_aggregate", prev.shape(), src.projected.shape()));
        }
        let g = compute_gate(tape, src.features, prev, gate)?;
        let contribution = tape.mul(&g, src.projected)?;
        acc = tape.add(&acc, &contribution)?;
        gates.push((src.layer, g));
    }
    let out = tape.layer_norm(&acc, link.get("gamma")?, link.get("beta")?, eps)?;
    Ok((out, gates))
}

/// One fusion layer over both streams.
///
/// Each stream runs `x1 = LN(x + MSA(x))`, `x2 = LN(x1 + MCA(x1, other_x1))`,
/// `out = LN(x2 + FFN(x2))`; cross-attention reads the other stream's
/// post-MSA state.
pub fn fusion_layer(
    tape: &mut Tape,
    zt: &Tensor,
    zv: &Tensor,
    params: &Scope<'_>,
    heads: usize,
    eps: f64,
) -> Result<(Tensor, Tensor, FusionAttention)> {
    if zt.rank() != 2 || zv.rank() != 2 || zt.shape()[1] != zv.shape()[1] {
        return Err(Error::shape("fusion_layer", zt.shape(), zv.shape()));
    }
    let ts = params.scope("text");
    let vs = params.scope("visual");

    let (t_msa, text_msa) = attention(tape, zt, zt, &ts.scope("msa"), heads, None)?;
    let t1 = add_norm(tape, zt, &t_msa, &ts.scope("ln1"), eps)?;
    let (v_msa, visual_msa) = attention(tape, zv, zv, &vs.scope("msa"), heads, None)?;
    let v1 = add_norm(tape, zv, &v_msa, &vs.scope("ln1"), eps)?;

    let (t_mca, text_mca) = attention(tape, &t1, &v1, &ts.scope("mca"), heads, None)?;
    let t2 = add_norm(tape, &t1, &t_mca, &ts.scope("ln2"), eps)?;
    let (v_mca, visual_mca) = attention(tape, &v1, &t1, &vs.scope("mca"), heads, None)?;
    let v2 = add_norm(tape, &v1, &v_mca, &vs.scope("ln2"), eps)?;

    let t_ff = feed_forward(tape, &t2, &ts)?;
    let t_out = add_norm(tape, &t2, &t_ff, &ts.scope("ln3"), eps)?;
    let v_ff = feed_forward(tape, &v2, &vs)?;
    let v_out = add_norm(tape, &v2, &v_ff, &vs.scope("ln3"), eps)?;

    Ok((
        t_out,
        v_out,
        FusionAttention {
            text_msa,
            text_mca,
            visual_msa,
            visual_mca,
        },
    ))
}

/// Full fusion pass: initial projection, then bridges and fusion layers.
pub fn fusion_forward(
    tape: &mut Tape,
    trace: &LayerTrace,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<FusionState> {
    let (z0t, z0v) = init_fusion_inputs(tape, trace, params, cfg)?;
    fusion_stack(tape, z0t, z0v, trace, params, cfg)
}

/// The layer loop of [`fusion_forward`], starting from given `Z_0` tensors.
pub fn fusion_stack(
    tape: &mut Tape,
    z0_text: Tensor,
    z0_visual: Tensor,
    trace: &LayerTrace,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<FusionState> {
    let topo: Topology = cfg.topology;
    let (lt, lv, lf) = (trace.text_depth(), trace.visual_depth(), cfg.fusion_layers);

    // Shared projections are computed once per source layer and reused.
    let mut shared: BTreeMap<(Modality, usize), Tensor> = BTreeMap::new();
    let mut z_text = Vec::with_capacity(lf);
    let mut z_visual = Vec::with_capacity(lf);
    let mut gates = BTreeMap::new();
    let mut attn = Vec::with_capacity(lf);
    let (mut prev_t, mut prev_v) = (z0_text.clone(), z0_visual.clone());

    for l in 1..=lf {
        let bridge = params.scope(&format!("bridge.layers.{}", l - 1));
        let mut inputs = Vec::with_capacity(2);
        for (m, prev, depth) in [(Modality::Text, &prev_t, lt), (Modality::Visual, &prev_v, lv)] {
            let src_layers = topo.sources(l, depth, lf);
            let mut projected = Vec::with_capacity(src_layers.len());
            for &s in &src_layers {
                let feats = match m {
                    Modality::Text => trace.text_layer(s)?,
                    Modality::Visual => trace.visual_layer(s)?,
                };
                let p = if cfg.per_layer_projection {
                    tape.matmul(feats, projection(params, cfg, l, m)?)?
                } else if let Some(p) = shared.get(&(m, s)) {
                    p.clone()
                } else {
                    let p = tape.matmul(feats, projection(params, cfg, 0, m)?)?;
                    shared.insert((m, s), p.clone());
                    p
                };
                projected.push((s, feats, p));
            }
            let sources: Vec<BridgeSource<'_>> = projected
                .iter()
                .map(|(s, f, p)| BridgeSource {
                    layer: *s,
                    features: f,
                    projected: p,
                })
                .collect();
            let (agg, g) = bridge_aggregate(
                tape,
                prev,
                &sources,
                &bridge.scope(&format!("{}_gate", m.as_str())),
                &bridge.scope(&format!("{}_link", m.as_str())),
                cfg.ln_eps,
            )?;
            for (source, gate) in g {
                gates.insert(
                    GateKey {
                        layer: l,
                        modality: m,
                        source,
                    },
                    gate.detach(),
                );
            }
            inputs.push(agg);
        }
        let scope = params.scope(&format!("fusion.layers.{}", l - 1));
        let (zt, zv, a) = fusion_layer(tape, &inputs[0], &inputs[1], &scope, cfg.heads_fusion, cfg.ln_eps)?;
        z_text.push(zt.clone());
        z_visual.push(zv.clone());
        attn.push(a);
        prev_t = zt;
        prev_v = zv;
    }

    Ok(FusionState {
        z0_text,
        z0_visual,
        z_text,
        z_visual,
        gates,
        attn,
    })
}
