//! Checkpoints: parameters, AdamW moments, counters, and the full
//! configuration in one tensor table.

use std::collections::BTreeSet;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::optim::OptimState;
use crate::params::{param_layout, ParamStore};
use crate::table::TensorTable;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";
const CONFIG: &str = "config.";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    /// Completed training steps.
    pub step: usize,
    pub params: ParamStore,
    pub optim: OptimState,
}

impl Checkpoint {
    pub fn to_table(&self) -> TensorTable {
        let mut t = TensorTable::new();
        t.set_meta("kind", "checkpoint");
        t.set_meta("step", self.step);
        t.set_meta("adam_t", self.optim.t);
        for (k, v) in self.config.entries() {
            t.set_meta(format!("{CONFIG}{k}"), v);
        }
        for (name, p) in self.params.iter() {
            t.insert(format!("{PARAM}{name}"), p);
        }
        for (name, m) in self.optim.m.iter() {
            t.insert(format!("{ADAM_M}{name}"), m);
        }
        for (name, v) in self.optim.v.iter() {
            t.insert(format!("{ADAM_V}{name}"), v);
        }
        t
    }

    /// Strict load: every tensor must be named in the layout implied by the
    /// stored configuration, with matching shape, and none may be missing.
    pub fn from_table(t: &TensorTable, source: &str) -> Result<Self> {
        let fail = |offset: u64, msg: String| Error::Format {
            path: source.to_string(),
            offset,
            msg,
        };
        if t.meta("kind")? != "checkpoint" {
            return Err(fail(0, "not a checkpoint".into()));
        }
        let config_text: String = t
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(CONFIG).map(|k| format!("{k} = {v}\n")))
            .collect();
        let config = Config::parse(&config_text)?;
        let layout = param_layout(&config.model);
        let known: BTreeSet<&str> = layout.iter().map(|s| s.name.as_str()).collect();

        for name in t.tensors.keys() {
            let offset = t.offset_of(name).unwrap_or(0);
            let bare = [PARAM, ADAM_M, ADAM_V]
                .iter()
                .find_map(|p| name.strip_prefix(p))
                .ok_or_else(|| fail(offset, format!("unknown tensor `{name}`")))?;
            if !known.contains(bare) {
                return Err(fail(offset, format!("unknown tensor `{name}`")));
            }
        }

        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for spec in &layout {
            for (prefix, store) in [(PARAM, &mut params), (ADAM_M, &mut m), (ADAM_V, &mut v)] {
                let key = format!("{prefix}{}", spec.name);
                let tensor = t
                    .tensors
                    .get(&key)
                    .ok_or_else(|| fail(0, format!("missing tensor `{key}`")))?;
                if tensor.shape() != spec.shape.as_slice() {
                    return Err(fail(
                        t.offset_of(&key).unwrap_or(0),
                        format!(
                            "tensor `{key}` has shape {:?}, expected {:?}",
                            tensor.shape(),
                            spec.shape
                        ),
                    ));
                }
                store.insert(spec.name.clone(), tensor.clone());
            }
        }
        Ok(Checkpoint {
            config,
            step: t.meta_parse("step")?,
            params,
            optim: OptimState {
                m,
                v,
                t: t.meta_parse("adam_t")?,
            },
        })
    }

    pub fn save(&self, path: &Path, overwrite: bool) -> Result<()> {
        self.to_table().save(path, overwrite)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let table = TensorTable::load(path)?;
        Self::from_table(&table, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample() -> Checkpoint {
        let config = Config::toy();
        let params = ParamStore::init(&config.model, 3);
        let mut optim = OptimState::new(&params);
        optim.t = 5;
        optim.m.get_mut("heads.itm.bias").unwrap().data_mut()[0] = 0.25;
        Checkpoint {
            config,
            step: 5,
            params,
            optim,
        }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let back = Checkpoint::from_table(
            &TensorTable::from_bytes(&ck.to_table().to_bytes(), "mem").unwrap(),
            "mem",
        )
        .unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.step, 5);
        assert_eq!(back.optim.t, 5);
        assert!(back.params.bit_eq(&ck.params));
        assert!(back.optim.m.bit_eq(&ck.optim.m));
        assert!(back.optim.v.bit_eq(&ck.optim.v));
    }

    #[test]
    fn unknown_tensor_is_rejected_with_offset() {
        let mut t = sample().to_table();
        t.insert("param/extra", &Tensor::scalar(1.0));
        let parsed = TensorTable::from_bytes(&t.to_bytes(), "mem").unwrap();
        let err = Checkpoint::from_table(&parsed, "mem").unwrap_err();
        match err {
            Error::Format { offset, msg, .. } => {
                assert!(offset > 0);
                assert!(msg.contains("param/extra"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_tensor_is_rejected() {
        let mut t = sample().to_table();
        t.tensors.shift_remove("adam_v/heads.itm.bias");
        assert!(Checkpoint::from_table(&t, "mem").is_err());
    }
}
