mod common;

use std::collections::BTreeMap;

use common::{randn, rng};
use rand::Rng;
use vlbridge::analysis::gate_statistics;
use vlbridge::config::{ModelConfig, Topology};
use vlbridge::fusion::{compute_gate, GateKey, Modality};
use vlbridge::params::ParamStore;
use vlbridge::pretrain::forward_pair;
use vlbridge::{Tape, Tensor};

fn random_ids(r: &mut impl Rng, cfg: &ModelConfig, words: usize) -> Vec<usize> {
    let mut ids = vec![1];
    ids.extend((0..words).map(|_| r.random_range(5..cfg.vocab_size)));
    ids.push(2);
    ids
}

fn with_gate_biases(params: &ParamStore, cfg: &ModelConfig, value: f64) -> ParamStore {
    let mut p = params.clone();
    for l in 0..cfg.fusion_layers {
        for m in ["text", "visual"] {
            let b = p.get_mut(&format!("bridge.layers.{l}.{m}_gate.bias")).unwrap();
            b.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }
    p
}

#[test]
fn saturated_closed_gates_reduce_to_last_only() {
    let mut r = rng(5);
    let gated = ModelConfig::toy();
    let last = ModelConfig {
        topology: Topology::LastOnly,
        ..gated.clone()
    };
    for i in 0..5 {
        let params = with_gate_biases(&ParamStore::init(&gated, i), &gated, -1e9);
        let ids = random_ids(&mut r, &gated, 4);
        let image = randn(&mut r, &[3, 16, 16]);
        let (_, a) = forward_pair(&mut Tape::new(), &ids, &image, &params, &gated).unwrap();
        let (_, b) = forward_pair(&mut Tape::new(), &ids, &image, &params, &last).unwrap();
        assert_eq!(a.gates.len(), 16);
        assert!(b.gates.is_empty());
        for l in 0..gated.fusion_layers {
            assert!(a.z_text[l].max_abs_diff(&b.z_text[l]) <= 1e-6);
            assert!(a.z_visual[l].max_abs_diff(&b.z_visual[l]) <= 1e-6);
        }
    }
}

fn expected_keys(topology: Topology, lt: usize, lv: usize, lf: usize) -> Vec<GateKey> {
    let mut keys = Vec::new();
    for l in 1..=lf {
        for (m, depth) in [(Modality::Text, lt), (Modality::Visual, lv)] {
            let sources: Vec<usize> = match topology {
                Topology::AllGated => (1..=depth).collect(),
                Topology::SameLayer => vec![depth - lf + l],
                Topology::LastOnly => vec![],
                Topology::BottomOnly if l == 1 => (1..=depth).collect(),
                Topology::BottomOnly => vec![],
            };
            keys.extend(sources.into_iter().map(|source| GateKey {
                layer: l,
                modality: m,
                source,
            }));
        }
    }
    keys.sort();
    keys
}

#[test]
fn gate_map_keys_follow_topology() {
    let mut r = rng(6);
    for (lt, lv, lf) in [(4, 4, 2), (3, 5, 2), (2, 2, 1)] {
        for topology in Topology::ALL {
            let cfg = ModelConfig {
                text_layers: lt,
                visual_layers: lv,
                fusion_layers: lf,
                topology,
                ..ModelConfig::toy()
            };
            let params = ParamStore::init(&cfg, 1);
            let ids = random_ids(&mut r, &cfg, 3);
            let image = randn(&mut r, &[3, 16, 16]);
            let (_, f) = forward_pair(&mut Tape::new(), &ids, &image, &params, &cfg).unwrap();
            let keys: Vec<GateKey> = f.gates.keys().copied().collect();
            assert_eq!(keys, expected_keys(topology, lt, lv, lf), "{topology} ({lt},{lv},{lf})");
            let count = match topology {
                Topology::AllGated => lf * lt + lf * lv,
                Topology::SameLayer => 2 * lf,
                Topology::BottomOnly => lt + lv,
                Topology::LastOnly => 0,
            };
            assert_eq!(keys.len(), count);
        }
    }
}

#[test]
fn gates_lie_strictly_inside_unit_interval() {
    let mut r = rng(7);
    let cfg = ModelConfig::toy();
    let params = ParamStore::init(&cfg, 3);
    let ids = random_ids(&mut r, &cfg, 4);
    let image = randn(&mut r, &[3, 16, 16]);
    let (_, f) = forward_pair(&mut Tape::new(), &ids, &image, &params, &cfg).unwrap();
    for (k, g) in &f.gates {
        assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0), "{k:?}");
        let rows = if k.modality == Modality::Text { ids.len() } else { 17 };
        assert_eq!(g.shape(), &[rows, cfg.d_fusion]);
    }
}

#[test]
fn zero_gate_parameters_and_inputs_give_half() {
    let mut store = ParamStore::new();
    store.insert("g.weight", Tensor::zeros(&[4, 3]));
    store.insert("g.bias", Tensor::zeros(&[3]));
    let src = Tensor::zeros(&[2, 4]);
    let prev = Tensor::zeros(&[2, 3]);
    let g = compute_gate(&mut Tape::new(), &src, &prev, &store.scope("g")).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.5));

    let mut state_gates = BTreeMap::new();
    state_gates.insert(
        GateKey {
            layer: 1,
            modality: Modality::Visual,
            source: 1,
        },
        g,
    );
    let dummy = Tensor::zeros(&[1, 1]);
    let state = vlbridge::fusion::FusionState {
        z0_text: dummy.clone(),
        z0_visual: dummy,
        z_text: vec![],
        z_visual: vec![],
        gates: state_gates,
        attn: vec![],
    };
    let stats = gate_statistics([&state, &state]);
    assert_eq!(stats.len(), 1);
    assert_eq!(stats[0].mean, 0.5);
    assert_eq!(stats[0].count, 12);
    assert_eq!(stats[0].histogram.iter().sum::<usize>(), 12);
}

#[test]
fn bridge_variants_run() {
    let mut r = rng(8);
    for cfg in [
        ModelConfig {
            per_layer_projection: true,
            ..ModelConfig::toy()
        },
        ModelConfig {
            start_layer: Some(3),
            ..ModelConfig::toy()
        },
        ModelConfig {
            start_layer: Some(1),
            topology: Topology::SameLayer,
            ..ModelConfig::toy()
        },
    ] {
        let params = ParamStore::init(&cfg, 2);
        assert_eq!(params.num_scalars(), cfg.param_count_formula());
        let ids = random_ids(&mut r, &cfg, 2);
        let image = randn(&mut r, &[3, 16, 16]);
        let (_, f) = forward_pair(&mut Tape::new(), &ids, &image, &params, &cfg).unwrap();
        assert_eq!(f.z_text.len(), cfg.fusion_layers);
        assert!(f.final_text().data().iter().all(|v| v.is_finite()));
    }
}
