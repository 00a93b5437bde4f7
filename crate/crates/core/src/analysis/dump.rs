use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::config::{ModelConfig, Pooling};
use crate::data::Corpus;
use crate::encoders::LayerTrace;
use crate::error::{Error, Result};
use crate::fusion::{FusionAttention, FusionState, GateKey, Modality};
use crate::params::ParamStore;
use crate::pretrain::forward_pair;
use crate::table::TensorTable;
use crate::tensor::{Tape, Tensor};

use super::cka::pool_examples;
use super::distance::{image_positions, text_positions, Position};

/// Layer stack selector for analysis commands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Text,
    Visual,
    FusionText,
    FusionVisual,
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Stream::Text),
            "visual" => Ok(Stream::Visual),
            "fusion-text" => Ok(Stream::FusionText),
            "fusion-visual" => Ok(Stream::FusionVisual),
            _ => Err(Error::invalid(
                "stream",
                format!("unknown stream `{s}` (expected text, visual, fusion-text, fusion-visual)"),
            )),
        }
    }
}

/// One example's recorded activations.
#[derive(Clone, Debug)]
pub struct ExampleDump {
    pub record: usize,
    pub trace: LayerTrace,
    pub fusion: FusionState,
}

/// Activations of a set of matched pairs, all from one set of parameters.
#[derive(Clone, Debug)]
pub struct ActivationDump {
    /// Label of the parameters the dump came from.
    pub source: String,
    pub text_len: usize,
    pub grid: (usize, usize),
    pub examples: Vec<ExampleDump>,
}

/// Runs the model on the first `count` records as matched pairs.
pub fn dump_activations(
    params: &ParamStore,
    cfg: &ModelConfig,
    corpus: &Corpus,
    count: usize,
    source: &str,
) -> Result<ActivationDump> {
    if count == 0 || count > corpus.len() {
        return Err(Error::invalid(
            "dump_activations",
            format!("cannot dump {count} examples from a corpus of {}", corpus.len()),
        ));
    }
    corpus.check_compatible(cfg)?;
    let params = params.detached();
    let mut examples = Vec::with_capacity(count);
    for rec in &corpus.records[..count] {
        let mut tape = Tape::new();
        let (trace, fusion) = forward_pair(&mut tape, &rec.ids, &rec.image, &params, cfg)?;
        examples.push(ExampleDump {
            record: rec.id,
            trace,
            fusion,
        });
    }
    let text_len = examples[0].trace.text[0].shape()[0];
    if examples.iter().any(|e| e.trace.text[0].shape()[0] != text_len) {
        return Err(Error::invalid("dump_activations", "captions differ in length"));
    }
    Ok(ActivationDump {
        source: source.to_string(),
        text_len,
        grid: cfg.grid(),
        examples,
    })
}

fn seq_put(t: &mut TensorTable, prefix: &str, seq: &[Tensor]) {
    for (i, x) in seq.iter().enumerate() {
        t.insert(format!("{prefix}/{i}"), x);
    }
}

fn seq_get(t: &TensorTable, prefix: &str, n: usize) -> Result<Vec<Tensor>> {
    (0..n).map(|i| t.get(&format!("{prefix}/{i}")).cloned()).collect()
}

fn positions_tensor(p: &[Position]) -> Tensor {
    Tensor::from_parts(vec![p.len(), 2], p.iter().flatten().copied().collect())
}

impl ActivationDump {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Per-layer `n×D` feature matrices for a stream; uni-modal streams
    /// skip the embedding output at index 0.
    pub fn layer_features(&self, stream: Stream, pooling: Pooling) -> Result<Vec<Tensor>> {
        let first = self
            .examples
            .first()
            .ok_or_else(|| Error::invalid("layer_features", "empty dump"))?;
        let depth = match stream {
            Stream::Text => first.trace.text_depth(),
            Stream::Visual => first.trace.visual_depth(),
            Stream::FusionText => first.fusion.z_text.len(),
            Stream::FusionVisual => first.fusion.z_visual.len(),
        };
        (0..depth)
            .map(|l| {
                let seqs: Vec<&Tensor> = self
                    .examples
                    .iter()
                    .map(|e| match stream {
                        Stream::Text => &e.trace.text[l + 1],
                        Stream::Visual => &e.trace.visual[l + 1],
                        Stream::FusionText => &e.fusion.z_text[l],
                        Stream::FusionVisual => &e.fusion.z_visual[l],
                    })
                    .collect();
                pool_examples(&seqs, pooling)
            })
            .collect()
    }

    /// Self-attention maps of one example per layer of a stream.
    pub fn self_attention(&self, example: usize, stream: Stream) -> Result<Vec<Tensor>> {
        let e = self
            .examples
            .get(example)
            .ok_or_else(|| Error::invalid("self_attention", format!("no example {example}")))?;
        Ok(match stream {
            Stream::Text => e.trace.text_attn.clone(),
            Stream::Visual => e.trace.visual_attn.clone(),
            Stream::FusionText => e.fusion.attn.iter().map(|a| a.text_msa.clone()).collect(),
            Stream::FusionVisual => e.fusion.attn.iter().map(|a| a.visual_msa.clone()).collect(),
        })
    }

    /// Query and key positions for a stream's self-attention maps.
    pub fn positions(&self, stream: Stream) -> (Vec<Option<Position>>, Vec<Position>) {
        match stream {
            Stream::Text | Stream::FusionText => text_positions(self.text_len),
            Stream::Visual | Stream::FusionVisual => image_positions(self.grid.0, self.grid.1),
        }
    }

    pub fn to_table(&self) -> TensorTable {
        let mut t = TensorTable::new();
        t.set_meta("kind", "activations");
        t.set_meta("source", &self.source);
        t.set_meta("examples", self.examples.len());
        t.set_meta("text_len", self.text_len);
        t.set_meta("grid_rows", self.grid.0);
        t.set_meta("grid_cols", self.grid.1);
        if let Some(e) = self.examples.first() {
            t.set_meta("text_layers", e.trace.text_depth());
            t.set_meta("visual_layers", e.trace.visual_depth());
            t.set_meta("fusion_layers", e.fusion.z_text.len());
            let keys: Vec<String> = e
                .fusion
                .gates
                .keys()
                .map(|k| format!("{}:{}:{}", k.layer, k.modality.as_str(), k.source))
                .collect();
            t.set_meta("gate_keys", keys.join(","));
        }
        let records: Vec<f64> = self.examples.iter().map(|e| e.record as f64).collect();
        if !records.is_empty() {
            t.insert("records", &Tensor::from_parts(vec![records.len()], records));
        }
        let (_, tk) = text_positions(self.text_len);
        let (_, vk) = image_positions(self.grid.0, self.grid.1);
        t.insert("positions/text", &positions_tensor(&tk));
        t.insert("positions/visual", &positions_tensor(&vk));
        for (i, e) in self.examples.iter().enumerate() {
            let p = format!("ex{i}");
            seq_put(&mut t, &format!("{p}/text"), &e.trace.text);
            seq_put(&mut t, &format!("{p}/visual"), &e.trace.visual);
            seq_put(&mut t, &format!("{p}/text_attn"), &e.trace.text_attn);
            seq_put(&mut t, &format!("{p}/visual_attn"), &e.trace.visual_attn);
            t.insert(format!("{p}/z0_text"), &e.fusion.z0_text);
            t.insert(format!("{p}/z0_visual"), &e.fusion.z0_visual);
            seq_put(&mut t, &format!("{p}/z_text"), &e.fusion.z_text);
            seq_put(&mut t, &format!("{p}/z_visual"), &e.fusion.z_visual);
            for (l, a) in e.fusion.attn.iter().enumerate() {
                t.insert(format!("{p}/text_msa/{l}"), &a.text_msa);
                t.insert(format!("{p}/text_mca/{l}"), &a.text_mca);
                t.insert(format!("{p}/visual_msa/{l}"), &a.visual_msa);
                t.insert(format!("{p}/visual_mca/{l}"), &a.visual_mca);
            }
            for (k, g) in &e.fusion.gates {
                t.insert(format!("{p}/gate/{}/{}/{}", k.layer, k.modality.as_str(), k.source), g);
            }
        }
        t
    }

    pub fn from_table(t: &TensorTable) -> Result<Self> {
        if t.meta("kind")? != "activations" {
            return Err(Error::invalid("activation_dump", "table is not an activation dump"));
        }
        let n: usize = t.meta_parse("examples")?;
        let records = if n > 0 { t.get("records")?.to_vec() } else { Vec::new() };
        let mut examples = Vec::with_capacity(n);
        if n > 0 {
            let lt: usize = t.meta_parse("text_layers")?;
            let lv: usize = t.meta_parse("visual_layers")?;
            let lf: usize = t.meta_parse("fusion_layers")?;
            let mut keys = Vec::new();
            for k in t.meta("gate_keys")?.split(',').filter(|s| !s.is_empty()) {
                let parts: Vec<&str> = k.split(':').collect();
                let bad = || Error::invalid("activation_dump", format!("bad gate key `{k}`"));
                if parts.len() != 3 {
                    return Err(bad());
                }
                keys.push(GateKey {
                    layer: parts[0].parse().map_err(|_| bad())?,
                    modality: match parts[1] {
                        "text" => Modality::Text,
                        "visual" => Modality::Visual,
                        _ => return Err(bad()),
                    },
                    source: parts[2].parse().map_err(|_| bad())?,
                });
            }
            for (i, rec) in records.iter().enumerate().take(n) {
                let p = format!("ex{i}");
                let trace = LayerTrace {
                    text: seq_get(t, &format!("{p}/text"), lt + 1)?,
                    visual: seq_get(t, &format!("{p}/visual"), lv + 1)?,
                    text_attn: seq_get(t, &format!("{p}/text_attn"), lt)?,
                    visual_attn: seq_get(t, &format!("{p}/visual_attn"), lv)?,
                };
                let attn = (0..lf)
                    .map(|l| {
                        Ok(FusionAttention {
                            text_msa: t.get(&format!("{p}/text_msa/{l}"))?.clone(),
                            text_mca: t.get(&format!("{p}/text_mca/{l}"))?.clone(),
                            visual_msa: t.get(&format!("{p}/visual_msa/{l}"))?.clone(),
                            visual_mca: t.get(&format!("{p}/visual_mca/{l}"))?.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut gates = BTreeMap::new();
                for k in &keys {
                    let name = format!("{p}/gate/{}/{}/{}", k.layer, k.modality.as_str(), k.source);
                    gates.insert(*k, t.get(&name)?.clone());
                }
                let fusion = FusionState {
                    z0_text: t.get(&format!("{p}/z0_text"))?.clone(),
                    z0_visual: t.get(&format!("{p}/z0_visual"))?.clone(),
                    z_text: seq_get(t, &format!("{p}/z_text"), lf)?,
                    z_visual: seq_get(t, &format!("{p}/z_visual"), lf)?,
                    gates,
                    attn,
                };
                examples.push(ExampleDump {
                    record: *rec as usize,
                    trace,
                    fusion,
                });
            }
        }
        Ok(ActivationDump {
            source: t.meta("source")?.to_string(),
            text_len: t.meta_parse("text_len")?,
            grid: (t.meta_parse("grid_rows")?, t.meta_parse("grid_cols")?),
            examples,
        })
    }

    pub fn save(&self, path: &Path, overwrite: bool) -> Result<()> {
        self.to_table().save(path, overwrite)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&TensorTable::load(path)?)
    }
}
