//! Held-out image-text matching: accuracy on a balanced batch and
//! recall@1 over small candidate sets.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pretrain::{forward_pair, itm_logits};
use crate::tensor::{Tape, Tensor};

/// Candidate images per recall query, the true one included.
pub const RECALL_CANDIDATES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItmEval {
    pub items: usize,
    pub positives: usize,
    pub accuracy: f64,
    pub recall_queries: usize,
    pub recall_at_1: f64,
}

/// ITM logits `(mismatch, match)` for one pair; no tape recording.
pub fn itm_pair_logits(params: &ParamStore, cfg: &ModelConfig, ids: &[usize], image: &Tensor) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let (_, fusion) = forward_pair(&mut tape, ids, image, params, cfg)?;
    let l = itm_logits(&mut tape, &fusion, params, cfg.itm_pooling)?;
    Ok((l.data()[0], l.data()[1]))
}

/// Accuracy over `items` pairs with exactly `items / 2` matches (captions
/// cycle through the corpus, negatives use a uniformly drawn other image),
/// and recall@1 where each of `recall_queries` captions ranks its own image
/// against seven images of records with a different caption.
pub fn eval_itm(
    params: &ParamStore,
    cfg: &ModelConfig,
    corpus: &Corpus,
    seed: u64,
    items: usize,
    recall_queries: usize,
) -> Result<ItmEval> {
    let n = corpus.len();
    if n < 2 || items == 0 {
        return Err(Error::invalid("eval_itm", "need at least 2 records and 1 item"));
    }
    corpus.check_compatible(cfg)?;
    let params = params.detached();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives = items / 2;
    let mut labels: Vec<usize> = (0..items).map(|i| usize::from(i < positives)).collect();
    labels.shuffle(&mut rng);

    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let c = i % n;
        let img = if label == 1 {
            c
        } else {
            let j = rng.random_range(0..n - 1);
            if j >= c {
                j + 1
            } else {
                j
            }
        };
        let (l0, l1) = itm_pair_logits(&params, cfg, &corpus.records[c].ids, &corpus.records[img].image)?;
        if usize::from(l1 > l0) == label {
            correct += 1;
        }
    }

    let queries = recall_queries.min(n);
    let mut hits = 0;
    for q in 0..queries {
        let rec = &corpus.records[q];
        let others: Vec<usize> = (0..n).filter(|&j| corpus.records[j].caption != rec.caption).collect();
        if others.len() < RECALL_CANDIDATES - 1 {
            return Err(Error::invalid(
                "eval_itm",
                "too few distinct captions for recall candidates",
            ));
        }
        let distractors: Vec<usize> = others
            .choose_multiple(&mut rng, RECALL_CANDIDATES - 1)
            .copied()
            .collect();
        let score = |j: usize| -> Result<f64> {
            let (l0, l1) = itm_pair_logits(&params, cfg, &rec.ids, &corpus.records[j].image)?;
            Ok(l1 - l0)
        };
        let own = score(q)?;
        let mut best_other = f64::NEG_INFINITY;
        for j in distractors {
            best_other = best_other.max(score(j)?);
        }
        if own > best_other {
            hits += 1;
        }
    }

    Ok(ItmEval {
        items,
        positives,
        accuracy: correct as f64 / items as f64,
        recall_queries: queries,
        recall_at_1: if queries == 0 {
            0.0
        } else {
            hits as f64 / queries as f64
        },
    })
}
