//! The deterministic training loop.
//!
//! Every random draw of step `s` comes from a ChaCha stream keyed by
//! `(seed, s)`, so a run resumed from a checkpoint at step `t` replays steps
//! `t+1..` exactly as the uninterrupted run would.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::GateSummary;
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, lr_at_step, AdamW, GroupMultipliers, OptimState};
use crate::params::ParamStore;
use crate::pretrain::{loss_and_gradients, sample_itm_batch, PairBatch};

const BATCH_STREAM_KEY: u64 = 0x6261_7463_685f_7267;
const MAX_RESAMPLES: usize = 64;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub mlm: f64,
    pub itm: f64,
    pub mlm_items: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub gate_mean: Option<f64>,
    pub gate_min: Option<f64>,
    pub gate_max: Option<f64>,
}

/// Seeded generator for the batch of `step`.
pub fn batch_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BATCH_STREAM_KEY);
    rng.set_stream(step as u64);
    rng
}

/// Model, optimizer state, and position in the schedule.
pub struct Trainer<'a> {
    pub config: Config,
    pub params: ParamStore,
    pub optim: OptimState,
    /// Completed steps.
    pub step: usize,
    corpus: &'a Corpus,
}

impl<'a> Trainer<'a> {
    /// Fresh parameters drawn from the configured seed.
    pub fn new(config: Config, corpus: &'a Corpus) -> Result<Self> {
        config.validate()?;
        corpus.check_compatible(&config.model)?;
        let params = ParamStore::init(&config.model, config.model.seed);
        let optim = OptimState::new(&params);
        Ok(Trainer {
            config,
            params,
            optim,
            step: 0,
            corpus,
        })
    }

    pub fn resume(ck: Checkpoint, corpus: &'a Corpus) -> Result<Self> {
        ck.config.validate()?;
        corpus.check_compatible(&ck.config.model)?;
        if ck.step > ck.config.train.total_steps {
            return Err(Error::Config(format!(
                "checkpoint step {} beyond total_steps {}",
                ck.step, ck.config.train.total_steps
            )));
        }
        Ok(Trainer {
            config: ck.config,
            params: ck.params,
            optim: ck.optim,
            step: ck.step,
            corpus,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.params.clone(),
            optim: self.optim.clone(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.train.total_steps
    }

    /// The batch used by step `step` (1-based). Draws are repeated from the
    /// same stream until the batch holds at least one masked matched item.
    pub fn batch_for_step(&self, step: usize) -> Result<PairBatch> {
        let (m, t) = (&self.config.model, &self.config.train);
        let mut rng = batch_rng(m.seed, step);
        for _ in 0..MAX_RESAMPLES {
            let batch = sample_itm_batch(
                self.corpus,
                t.batch_size,
                t.neg_fraction,
                m.mask_rate,
                m.vocab_size,
                &mut rng,
                step as u64,
            )?;
            if batch.items.iter().any(|i| i.itm_label == 1 && i.has_mlm_targets()) {
                return Ok(batch);
            }
        }
        Err(Error::invalid(
            "train",
            format!("no batch with masked tokens after {MAX_RESAMPLES} draws at step {step}"),
        ))
    }

    /// Runs the next step and returns its metrics and gate telemetry.
    pub fn train_step(&mut self) -> Result<(StepRecord, Vec<GateSummary>)> {
        if self.is_done() {
            return Err(Error::invalid("train", "schedule already complete"));
        }
        let step = self.step + 1;
        let batch = self.batch_for_step(step)?;
        let (m, t) = (&self.config.model, &self.config.train);
        let mut out = loss_and_gradients(&batch, &self.params, m, t)?;
        let p = out.parts;
        if !p.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("total {} (mlm {}, itm {})", p.total, p.mlm, p.itm),
            });
        }
        let grad_norm = clip_global_norm(&mut out.grads, t.grad_clip);
        let lr = lr_at_step(step, t.total_steps, t.base_lr, t.warmup_fraction)?;
        let groups = GroupMultipliers::from_config(t);
        AdamW::from_config(t).step(&mut self.params, &out.grads, &mut self.optim, |name| {
            groups.param_lr(name, lr)
        })?;
        self.step = step;

        let gates = out.gates.finish(Some(step));
        let count: usize = gates.iter().map(|g| g.count).sum();
        let (gate_mean, gate_min, gate_max) = if count == 0 {
            (None, None, None)
        } else {
            (
                Some(gates.iter().map(|g| g.mean * g.count as f64).sum::<f64>() / count as f64),
                gates.iter().map(|g| g.min).reduce(f64::min),
                gates.iter().map(|g| g.max).reduce(f64::max),
            )
        };
        let record = StepRecord {
            step,
            loss: p.total,
            mlm: p.mlm,
            itm: p.itm,
            mlm_items: p.mlm_items,
            lr,
            grad_norm,
            gate_mean,
            gate_min,
            gate_max,
        };
        Ok((record, gates))
    }
}

/// Files produced by [`train_loop`].
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub metrics: PathBuf,
    pub gates: PathBuf,
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub records: Vec<StepRecord>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const GATES_FILE: &str = "gates.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: usize) -> String {
    format!("step-{step:06}.ckpt")
}

fn create(path: &Path, overwrite: bool) -> Result<BufWriter<File>> {
    if path.exists() && !overwrite {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Trains to `total_steps`, writing `metrics.jsonl`, `gates.jsonl`,
/// periodic `step-NNNNNN.ckpt` files, and `final.ckpt` into `out_dir`.
/// With `resume`, training continues from the checkpoint's step.
pub fn train_loop(
    config: Config,
    corpus: &Corpus,
    out_dir: &Path,
    resume: Option<Checkpoint>,
    overwrite: bool,
) -> Result<RunOutputs> {
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck, corpus)?,
        None => Trainer::new(config, corpus)?,
    };
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let gates_path = out_dir.join(GATES_FILE);
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    if final_path.exists() && !overwrite {
        return Err(Error::OutputExists(final_path));
    }
    let mut metrics = create(&metrics_path, overwrite)?;
    let mut gate_log = create(&gates_path, overwrite)?;
    let every = trainer.config.train.checkpoint_every;
    let mut checkpoints = Vec::new();
    let mut records = Vec::new();
    while !trainer.is_done() {
        let (record, gates) = trainer.train_step()?;
        writeln!(metrics, "{}", serde_json::to_string(&record)?)?;
        for g in &gates {
            writeln!(gate_log, "{}", serde_json::to_string(g)?)?;
        }
        if every > 0 && trainer.step % every == 0 && !trainer.is_done() {
            let path = out_dir.join(checkpoint_name(trainer.step));
            trainer.checkpoint().save(&path, overwrite)?;
            checkpoints.push(path);
        }
        records.push(record);
    }
    metrics.flush()?;
    gate_log.flush()?;
    trainer.checkpoint().save(&final_path, overwrite)?;
    Ok(RunOutputs {
        metrics: metrics_path,
        gates: gates_path,
        final_checkpoint: final_path,
        checkpoints,
        records,
    })
}
