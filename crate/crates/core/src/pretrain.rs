//! Masked language modeling and image-text matching.

use rand::Rng;

use crate::analysis::GateAccumulator;
use crate::config::{ModelConfig, Pooling, TrainConfig};
use crate::data::Corpus;
use crate::encoders::{encode_pair, LayerTrace};
use crate::error::{Error, Result};
use crate::fusion::{fusion_forward, FusionState};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};
use crate::vocab;

/// Share of selected positions replaced by the mask token.
pub const MASK_TOKEN_SHARE: f64 = 0.8;
/// Share of selected positions replaced by a random word id.
pub const RANDOM_TOKEN_SHARE: f64 = 0.1;

/// Selects each non-special position with probability `rate`; selected
/// positions become the mask id (80%), a random word id (10%), or stay as
/// they are (10%). Labels hold the original id at selected positions.
pub fn mask_tokens<R: Rng + ?Sized>(
    ids: &[usize],
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::invalid("mask_tokens", format!("rate {rate} outside (0, 1)")));
    }
    if !ids.iter().any(|&i| !vocab::is_special(i)) {
        return Err(Error::invalid("mask_tokens", "sequence has no maskable tokens"));
    }
    if vocab_size <= vocab::NUM_SPECIALS {
        return Err(Error::invalid("mask_tokens", "vocabulary has no word ids"));
    }
    let mut out = ids.to_vec();
    let mut labels = vec![None; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if vocab::is_special(id) || rng.random::<f64>() >= rate {
            continue;
        }
        labels[i] = Some(id);
        let r: f64 = rng.random();
        if r < MASK_TOKEN_SHARE {
            out[i] = vocab::MASK;
        } else if r < MASK_TOKEN_SHARE + RANDOM_TOKEN_SHARE {
            out[i] = rng.random_range(vocab::NUM_SPECIALS..vocab_size);
        }
    }
    Ok((out, labels))
}

/// One training example.
#[derive(Clone, Debug)]
pub struct PairItem {
    /// Caption ids after masking.
    pub ids: Vec<usize>,
    pub image: Tensor,
    /// 1 for a true pair, 0 for a caption paired with another record's image.
    pub itm_label: usize,
    pub mlm_labels: Vec<Option<usize>>,
    pub caption_record: usize,
    pub image_record: usize,
}

impl PairItem {
    pub fn has_mlm_targets(&self) -> bool {
        self.mlm_labels.iter().any(Option::is_some)
    }
}

#[derive(Clone, Debug)]
pub struct PairBatch {
    pub items: Vec<PairItem>,
    pub seed: u64,
}

/// Draws `batch_size` pairs. Each slot is a true pair with probability
/// `1 − neg_fraction`, otherwise the caption meets a uniformly drawn image
/// from a different record. Only true pairs are masked for MLM.
pub fn sample_itm_batch<R: Rng + ?Sized>(
    corpus: &Corpus,
    batch_size: usize,
    neg_fraction: f64,
    mask_rate: f64,
    vocab_size: usize,
    rng: &mut R,
    seed: u64,
) -> Result<PairBatch> {
    let n = corpus.len();
    if n < 2 {
        return Err(Error::invalid(
            "sample_itm_batch",
            "corpus needs at least 2 records for negatives",
        ));
    }
    if !(neg_fraction > 0.0 && neg_fraction < 1.0) {
        return Err(Error::invalid(
            "sample_itm_batch",
            format!("neg_fraction {neg_fraction} outside (0, 1)"),
        ));
    }
    let mut items = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let c = rng.random_range(0..n);
        let rec = &corpus.records[c];
        if rng.random::<f64>() < neg_fraction {
            let mut j = rng.random_range(0..n - 1);
            if j >= c {
                j += 1;
            }
            items.push(PairItem {
                ids: rec.ids.clone(),
                image: corpus.records[j].image.clone(),
                itm_label: 0,
                mlm_labels: vec![None; rec.ids.len()],
                caption_record: c,
                image_record: j,
            });
        } else {
            let (ids, mlm_labels) = mask_tokens(&rec.ids, mask_rate, vocab_size, rng)?;
            items.push(PairItem {
                ids,
                image: rec.image.clone(),
                itm_label: 1,
                mlm_labels,
                caption_record: c,
                image_record: c,
            });
        }
    }
    Ok(PairBatch { items, seed })
}

/// Both towers plus the fusion encoder for one pair.
pub fn forward_pair(
    tape: &mut Tape,
    ids: &[usize],
    image: &Tensor,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<(LayerTrace, FusionState)> {
    let trace = encode_pair(tape, ids, image, params, cfg)?;
    let fusion = fusion_forward(tape, &trace, params, cfg)?;
    Ok((trace, fusion))
}

/// Vocabulary logits for every text position of the last fusion layer.
pub fn mlm_logits(tape: &mut Tape, fusion: &FusionState, params: &ParamStore) -> Result<Tensor> {
    let h = params.scope("heads.mlm");
    let y = tape.matmul(fusion.final_text(), h.get("weight")?)?;
    tape.add(&y, h.get("bias")?)
}

/// Mean cross-entropy over labeled positions.
pub fn mlm_loss(
    tape: &mut Tape,
    fusion: &FusionState,
    labels: &[Option<usize>],
    params: &ParamStore,
) -> Result<Tensor> {
    let seq = fusion.final_text().shape()[0];
    if labels.len() != seq {
        return Err(Error::shape("mlm_loss", &[seq], &[labels.len()]));
    }
    if labels.iter().all(Option::is_none) {
        return Err(Error::invalid("mlm_loss", "no masked positions; resample the batch"));
    }
    let logits = mlm_logits(tape, fusion, params)?;
    tape.cross_entropy(&logits, labels)
}

fn pool(tape: &mut Tape, x: &Tensor, pooling: Pooling) -> Result<Tensor> {
    match pooling {
        Pooling::First => tape.slice(x, 0, 0, 1),
        Pooling::Mean => {
            let m = tape.mean(x, 0)?;
            tape.reshape(&m, &[1, x.shape()[1]])
        }
    }
}

/// `[pooled text ; pooled visual]`, a `1 × 2·D_f` row.
pub fn pooled_pair(tape: &mut Tape, fusion: &FusionState, pooling: Pooling) -> Result<Tensor> {
    let t = pool(tape, fusion.final_text(), pooling)?;
    let v = pool(tape, fusion.final_visual(), pooling)?;
    tape.concat(&[&t, &v], 1)
}

/// Two matching logits `[mismatch, match]` as a `1 × 2` row.
pub fn itm_logits(tape: &mut Tape, fusion: &FusionState, params: &ParamStore, pooling: Pooling) -> Result<Tensor> {
    let x = pooled_pair(tape, fusion, pooling)?;
    let h = params.scope("heads.itm");
    let y = tape.matmul(&x, h.get("weight")?)?;
    tape.add(&y, h.get("bias")?)
}

pub fn itm_loss(
    tape: &mut Tape,
    fusion: &FusionState,
    label: usize,
    params: &ParamStore,
    pooling: Pooling,
) -> Result<Tensor> {
    if label > 1 {
        return Err(Error::invalid("itm_loss", format!("label {label} is not 0 or 1")));
    }
    let logits = itm_logits(tape, fusion, params, pooling)?;
    tape.cross_entropy(&logits, &[Some(label)])
}

/// Logits of the optional downstream classification head.
pub fn cls_logits(tape: &mut Tape, fusion: &FusionState, params: &ParamStore, pooling: Pooling) -> Result<Tensor> {
    let x = pooled_pair(tape, fusion, pooling)?;
    let h = params.scope("heads.cls");
    let y = tape.matmul(&x, h.get("weight")?)?;
    tape.add(&y, h.get("bias")?)
}

/// Scalar loss components of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mlm: f64,
    pub itm: f64,
    /// Items contributing to the MLM mean.
    pub mlm_items: usize,
}

struct Weights {
    mlm: f64,
    itm: f64,
    mlm_items: usize,
}

fn batch_weights(batch: &PairBatch, train: &TrainConfig) -> Result<Weights> {
    if batch.items.is_empty() {
        return Err(Error::invalid("pretrain_step_loss", "empty batch"));
    }
    if !batch.items.iter().any(|i| i.itm_label == 1) {
        return Err(Error::invalid("pretrain_step_loss", "batch has no matched pairs"));
    }
    let mlm_items = batch
        .items
        .iter()
        .filter(|i| i.itm_label == 1 && i.has_mlm_targets())
        .count();
    if mlm_items == 0 {
        return Err(Error::invalid(
            "pretrain_step_loss",
            "no masked positions in batch; resample",
        ));
    }
    Ok(Weights {
        mlm: train.mlm_weight / mlm_items as f64,
        itm: train.itm_weight / batch.items.len() as f64,
        mlm_items,
    })
}

/// Per-item losses `(itm, mlm)` on `tape`; `mlm` is `None` for items without targets.
fn item_losses(
    tape: &mut Tape,
    item: &PairItem,
    params: &ParamStore,
    cfg: &ModelConfig,
    gates: Option<&mut GateAccumulator>,
) -> Result<(Tensor, Option<Tensor>)> {
    let (_, fusion) = forward_pair(tape, &item.ids, &item.image, params, cfg)?;
    if let Some(acc) = gates {
        acc.observe(&fusion.gates);
    }
    let itm = itm_loss(tape, &fusion, item.itm_label, params, cfg.itm_pooling)?;
    let mlm = if item.itm_label == 1 && item.has_mlm_targets() {
        Some(mlm_loss(tape, &fusion, &item.mlm_labels, params)?)
    } else {
        None
    };
    Ok((itm, mlm))
}

/// Joint objective on a single tape:
/// `mlm_weight · mean_mlm + itm_weight · mean_itm`, where the MLM mean runs
/// over matched items that carry at least one masked position and the ITM
/// mean runs over every item.
pub fn pretrain_step_loss(
    tape: &mut Tape,
    batch: &PairBatch,
    params: &ParamStore,
    cfg: &ModelConfig,
    train: &TrainConfig,
) -> Result<(Tensor, LossParts)> {
    let w = batch_weights(batch, train)?;
    let mut total: Option<Tensor> = None;
    let (mut mlm_sum, mut itm_sum) = (0.0, 0.0);
    for item in &batch.items {
        let (itm, mlm) = item_losses(tape, item, params, cfg, None)?;
        itm_sum += itm.item();
        let mut term = tape.scale(&itm, w.itm)?;
        if let Some(mlm) = mlm {
            mlm_sum += mlm.item();
            let scaled = tape.scale(&mlm, w.mlm)?;
            term = tape.add(&term, &scaled)?;
        }
        total = Some(match total {
            Some(acc) => tape.add(&acc, &term)?,
            None => term,
        });
    }
    let total = total.expect("non-empty batch");
    let parts = LossParts {
        total: total.item(),
        mlm: mlm_sum / w.mlm_items as f64,
        itm: itm_sum / batch.items.len() as f64,
        mlm_items: w.mlm_items,
    };
    Ok((total, parts))
}

/// Result of one differentiated batch.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub parts: LossParts,
    pub grads: ParamStore,
    /// Gate values seen during the forward passes.
    pub gates: GateAccumulator,
}

/// Same objective as [`pretrain_step_loss`], differentiated one item at a
/// time on short-lived tapes. Gradients are summed in item order.
pub fn loss_and_gradients(
    batch: &PairBatch,
    params: &ParamStore,
    cfg: &ModelConfig,
    train: &TrainConfig,
) -> Result<StepOutput> {
    let w = batch_weights(batch, train)?;
    let mut grads = params.zeros_like();
    let mut gates = GateAccumulator::new();
    let (mut mlm_sum, mut itm_sum, mut total) = (0.0, 0.0, 0.0);
    for item in &batch.items {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let (itm, mlm) = item_losses(&mut tape, item, &bound, cfg, Some(&mut gates))?;
        itm_sum += itm.item();
        let mut root = tape.scale(&itm, w.itm)?;
        if let Some(mlm) = mlm {
            mlm_sum += mlm.item();
            let scaled = tape.scale(&mlm, w.mlm)?;
            root = tape.add(&root, &scaled)?;
        }
        total += root.item();
        let g = tape.backward(&root)?;
        grads.axpy(&bound.gradients(&g), 1.0)?;
    }
    Ok(StepOutput {
        parts: LossParts {
            total,
            mlm: mlm_sum / w.mlm_items as f64,
            itm: itm_sum / batch.items.len() as f64,
            mlm_items: w.mlm_items,
        },
        grads,
        gates,
    })
}

/// Loss value only, with no tape recording.
pub fn batch_loss(batch: &PairBatch, params: &ParamStore, cfg: &ModelConfig, train: &TrainConfig) -> Result<LossParts> {
    let mut tape = Tape::new();
    let (_, parts) = pretrain_step_loss(&mut tape, batch, &params.detached(), cfg, train)?;
    Ok(parts)
}
