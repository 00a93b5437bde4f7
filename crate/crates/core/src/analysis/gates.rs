use std::collections::BTreeMap;

use serde::Serialize;

use crate::fusion::{FusionState, GateKey};
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 10;

/// Summary of the gate values observed for one bridge.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GateSummary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub layer: usize,
    pub modality: &'static str,
    pub source: usize,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Counts over ten equal-width bins of `(0, 1)`.
    pub histogram: [usize; HISTOGRAM_BINS],
}

#[derive(Clone, Debug)]
struct Acc {
    count: usize,
    sum: f64,
    min: f64,
    max: f64,
    hist: [usize; HISTOGRAM_BINS],
}

/// Running per-key gate statistics.
#[derive(Clone, Debug, Default)]
pub struct GateAccumulator {
    accs: BTreeMap<GateKey, Acc>,
}

impl GateAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.accs.is_empty()
    }

    pub fn observe(&mut self, gates: &BTreeMap<GateKey, Tensor>) {
        for (key, t) in gates {
            let acc = self.accs.entry(*key).or_insert(Acc {
                count: 0,
                sum: 0.0,
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
                hist: [0; HISTOGRAM_BINS],
            });
            for &v in t.data() {
                acc.count += 1;
                acc.sum += v;
                acc.min = acc.min.min(v);
                acc.max = acc.max.max(v);
                let bin = ((v * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
                acc.hist[bin] += 1;
            }
        }
    }

    pub fn finish(&self, step: Option<usize>) -> Vec<GateSummary> {
        self.accs
            .iter()
            .map(|(k, a)| GateSummary {
                step,
                layer: k.layer,
                modality: k.modality.as_str(),
                source: k.source,
                count: a.count,
                mean: a.sum / a.count.max(1) as f64,
                min: a.min,
                max: a.max,
                histogram: a.hist,
            })
            .collect()
    }
}

/// Per-(layer, modality, source) statistics over a set of fusion states.
pub fn gate_statistics<'a, I>(states: I) -> Vec<GateSummary>
where
    I: IntoIterator<Item = &'a FusionState>,
{
    let mut acc = GateAccumulator::new();
    for s in states {
        acc.observe(&s.gates);
    }
    acc.finish(None)
}
