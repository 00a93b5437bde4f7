//! Finite-difference verification of the full pre-training gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::data::generate_corpus;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pretrain::{batch_loss, pretrain_step_loss, sample_itm_batch, PairBatch};
use crate::tensor::{finite_difference_stencil, relative_error, Stencil, Tape};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    /// Coordinates sampled per tensor (all when the tensor is smaller).
    pub coords: usize,
    pub eps: f64,
    pub stencil: Stencil,
    pub batch_size: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            coords: 50,
            eps: 2e-3,
            stencil: Stencil::FourPoint,
            batch_size: 2,
        }
    }
}

/// A small seeded batch holding at least one masked matched pair.
pub fn gradcheck_batch(config: &Config, batch_size: usize) -> Result<PairBatch> {
    let m = &config.model;
    let corpus = generate_corpus(36, m, m.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    for _ in 0..256 {
        let b = sample_itm_batch(
            &corpus,
            batch_size,
            config.train.neg_fraction,
            m.mask_rate,
            m.vocab_size,
            &mut rng,
            m.seed,
        )?;
        if b.items.iter().any(|i| i.itm_label == 1 && i.has_mlm_targets()) {
            return Ok(b);
        }
    }
    Err(Error::invalid("gradcheck", "could not draw a batch with masked tokens"))
}

/// Compares the taped gradient of the joint loss with central differences
/// on a random coordinate sample of every parameter tensor.
pub fn gradcheck_model(config: &Config, params: &ParamStore, opts: GradcheckOptions) -> Result<Vec<GradcheckEntry>> {
    let (m, t) = (&config.model, &config.train);
    let batch = gradcheck_batch(config, opts.batch_size)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (loss, _) = pretrain_step_loss(&mut tape, &batch, &bound, m, t)?;
    let analytic = bound.gradients(&tape.backward(&loss)?);
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(m.seed ^ 0x6772_6164);
    let mut out = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        let n = p.numel();
        let mut coords = if n <= opts.coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords).into_vec()
        };
        coords.sort_unstable();
        let mut probe_store = params.clone();
        let numeric = finite_difference_stencil(
            |x| {
                probe_store.insert(name, x.clone());
                Ok(batch_loss(&batch, &probe_store, m, t)?.total)
            },
            p,
            opts.eps,
            Some(&coords),
            opts.stencil,
        )?;
        let a = analytic.get(name)?;
        let max_rel_error = coords
            .iter()
            .map(|&i| relative_error(a.data()[i], numeric.data()[i]))
            .fold(0.0, f64::max);
        let max_abs_grad = coords.iter().map(|&i| a.data()[i].abs()).fold(0.0, f64::max);
        out.push(GradcheckEntry {
            name: name.to_string(),
            checked: coords.len(),
            max_rel_error,
            max_abs_grad,
        });
    }
    Ok(out)
}
