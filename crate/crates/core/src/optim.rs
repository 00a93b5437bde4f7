//! AdamW with decoupled weight decay, warmup/linear-decay schedule, and
//! per-group learning-rate multipliers.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::{decay_exempt, GroupId, ParamStore};

/// Linear ramp from 0 to `base_lr` over the first `ceil(warmup_fraction·total)`
/// steps, then linear decay to 0 at `total_steps`.
pub fn lr_at_step(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
        return Err(Error::invalid(
            "lr_at_step",
            format!("warmup_fraction {warmup_fraction} outside (0, 1)"),
        ));
    }
    if step > total_steps {
        return Err(Error::invalid(
            "lr_at_step",
            format!("step {step} beyond total {total_steps}"),
        ));
    }
    let warmup = warmup_steps(total_steps, warmup_fraction);
    if step == total_steps {
        return Ok(0.0);
    }
    if step <= warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    Ok(base_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64)
}

pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    // The small offset keeps e.g. 0.1·100 from rounding up to 11.
    ((warmup_fraction * total_steps as f64) - 1e-9).ceil().max(0.0) as usize
}

impl FromStr for GroupId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GroupId::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::invalid("group_lr", format!("unknown group `{s}`")))
    }
}

/// Learning-rate multipliers per group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupMultipliers {
    pub uni_modal: f64,
    pub cross_modal: f64,
    pub heads: f64,
}

impl Default for GroupMultipliers {
    fn default() -> Self {
        GroupMultipliers {
            uni_modal: 1.0,
            cross_modal: 5.0,
            heads: 5.0,
        }
    }
}

impl GroupMultipliers {
    pub fn from_config(t: &TrainConfig) -> Self {
        GroupMultipliers {
            uni_modal: t.uni_lr_mult,
            cross_modal: t.cross_lr_mult,
            heads: t.heads_lr_mult,
        }
    }

    pub fn multiplier(&self, g: GroupId) -> f64 {
        match g {
            GroupId::UniModal => self.uni_modal,
            GroupId::CrossModal => self.cross_modal,
            GroupId::Heads => self.heads,
        }
    }

    /// Scheduled rate for a group given by name.
    pub fn group_lr(&self, group: &str, lr: f64) -> Result<f64> {
        Ok(lr * self.multiplier(group.parse()?))
    }

    /// Scheduled rate for the group owning parameter `name`.
    pub fn param_lr(&self, name: &str, lr: f64) -> Result<f64> {
        let g =
            GroupId::of(name).ok_or_else(|| Error::invalid("group_lr", format!("parameter `{name}` has no group")))?;
        Ok(lr * self.multiplier(g))
    }
}

/// Partitions parameter names by group; every name must land in exactly one.
pub fn assign_groups(params: &ParamStore) -> Result<BTreeMap<GroupId, Vec<String>>> {
    let mut out: BTreeMap<GroupId, Vec<String>> = BTreeMap::new();
    for name in params.names() {
        let g = GroupId::of(name)
            .ok_or_else(|| Error::invalid("assign_groups", format!("parameter `{name}` has no group")))?;
        out.entry(g).or_default().push(name.to_string());
    }
    Ok(out)
}

/// Moment estimates and step counter.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        OptimState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    pub fn from_config(t: &TrainConfig) -> Self {
        AdamW {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
            weight_decay: t.weight_decay,
        }
    }

    /// One update with per-parameter rates from `lr_for(name)`.
    ///
    /// `p ← p·(1 − lr·wd)` (skipped for decay-exempt names), then
    /// `p ← p − lr·m̂/(√v̂ + eps)` with bias-corrected moments.
    /// All gradients are validated before anything is modified.
    pub fn step<F>(&self, params: &mut ParamStore, grads: &ParamStore, state: &mut OptimState, lr_for: F) -> Result<()>
    where
        F: Fn(&str) -> Result<f64>,
    {
        let mut rates = Vec::with_capacity(params.len());
        for (name, p) in params.iter() {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw_step", p.shape(), g.shape()));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
            let lr = lr_for(name)?;
            if !(lr >= 0.0) {
                return Err(Error::invalid("adamw_step", format!("negative rate {lr} for `{name}`")));
            }
            rates.push((name.to_string(), lr));
        }
        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, lr) in rates {
            let g = grads.get(&name)?;
            let decay = if decay_exempt(&name) {
                0.0
            } else {
                lr * self.weight_decay
            };
            let m = state.m.get_mut(&name)?.data_mut();
            for (mi, gi) in m.iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = state.v.get_mut(&name)?.data_mut();
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let m = state.m.get(&name)?.data().to_vec();
            let v = state.v.get(&name)?.data().to_vec();
            let p = params.get_mut(&name)?.data_mut();
            for ((pi, mi), vi) in p.iter_mut().zip(&m).zip(&v) {
                *pi *= 1.0 - decay;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping. `max_norm = 0` disables clipping.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        let names: Vec<String> = grads.names().map(str::to_string).collect();
        for n in names {
            if let Ok(t) = grads.get_mut(&n) {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}
