//! Checkpoints as safetensors files holding f64 parameters, AdamW moments and
//! a JSON metadata record.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use mfds_core::optim::{AdamW, Moments};
use mfds_core::{ParamStore, Tensor};
use safetensors::tensor::{Dtype, View};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};

const PARAM: &str = "param/";
const MOMENT_M: &str = "adam_m/";
const MOMENT_V: &str = "adam_v/";
const META_KEY: &str = "mfds";

/// Training progress stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub iteration: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Resolved run configuration as TOML.
    pub config: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor>,
    pub optimizer_step: u64,
    pub moments: BTreeMap<String, Moments>,
    pub meta: CheckpointMeta,
}

struct F64View<'a>(&'a Tensor);

impl View for F64View<'_> {
    fn dtype(&self) -> Dtype {
        Dtype::F64
    }

    fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Owned(self.0.data().iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    fn data_len(&self) -> usize {
        self.0.numel() * 8
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    optimizer_step: u64,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, opt: Option<&AdamW>, meta: CheckpointMeta) -> Self {
        Self {
            params: store.iter().map(|(n, p)| (n.to_string(), p.value().clone())).collect(),
            optimizer_step: opt.map_or(0, |o| o.step),
            moments: opt.map(|o| o.moments.clone()).unwrap_or_default(),
            meta,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut views: Vec<(String, F64View<'_>)> = Vec::new();
        for (n, t) in &self.params {
            views.push((format!("{PARAM}{n}"), F64View(t)));
        }
        for (n, m) in &self.moments {
            views.push((format!("{MOMENT_M}{n}"), F64View(&m.m)));
            views.push((format!("{MOMENT_V}{n}"), F64View(&m.v)));
        }
        let header = Header {
            optimizer_step: self.optimizer_step,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        // a single metadata key keeps the header byte-stable
        let info = Some(HashMap::from([(META_KEY.to_string(), json)]));
        safetensors::serialize(views, &info).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
        let (_, metadata) = SafeTensors::read_metadata(bytes).map_err(err)?;
        let json = metadata
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing metadata record".into()))?;
        let header: Header = serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let st = SafeTensors::deserialize(bytes).map_err(err)?;
        let mut params = BTreeMap::new();
        let mut m_parts = BTreeMap::new();
        let mut v_parts = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(Error::Checkpoint(format!("tensor `{name}` is {:?}, expected F64", view.dtype())));
            }
            let data: Vec<f64> = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(view.shape(), data)?;
            if let Some(n) = name.strip_prefix(PARAM) {
                params.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(MOMENT_M) {
                m_parts.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(MOMENT_V) {
                v_parts.insert(n.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
            }
        }
        let mut moments = BTreeMap::new();
        for (n, m) in m_parts {
            let v = v_parts.remove(&n).ok_or_else(|| Error::Checkpoint(format!("`{n}` has a first moment but no second")))?;
            moments.insert(n, Moments { m, v });
        }
        if let Some(n) = v_parts.keys().next() {
            return Err(Error::Checkpoint(format!("`{n}` has a second moment but no first")));
        }
        Ok(Self {
            params,
            optimizer_step: header.optimizer_step,
            moments,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io(dir))?;
        }
        let bytes = self.to_bytes()?;
        // write then rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(io(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io(path))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Copies weights into `store`. Missing and extra keys are tolerated and
    /// reported; any shape disagreement is an error listing every difference.
    pub fn apply(&self, store: &mut ParamStore) -> Result<KeyDiff> {
        let diff = KeyDiff::between(store, &self.params);
        if !diff.mismatched.is_empty() {
            return Err(Error::Checkpoint(format!("checkpoint does not fit the model:\n{diff}")));
        }
        for (n, t) in &self.params {
            if store.contains(n) {
                store.set(n, t.clone())?;
            }
        }
        if !diff.missing.is_empty() || !diff.unexpected.is_empty() {
            log::warn!("checkpoint keys differ from the model:\n{diff}");
        }
        Ok(diff)
    }

    /// Restores optimizer state for parameters present in `store`.
    pub fn restore_optimizer(&self, opt: &mut AdamW, store: &ParamStore) {
        opt.step = self.optimizer_step;
        opt.moments = self
            .moments
            .iter()
            .filter(|(n, m)| store.get(n).is_some_and(|p| p.shape() == m.m.shape()))
            .map(|(n, m)| (n.clone(), m.clone()))
            .collect();
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyDiff {
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
    /// `(name, model shape, checkpoint shape)`.
    pub mismatched: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl KeyDiff {
    pub fn between(store: &ParamStore, params: &BTreeMap<String, Tensor>) -> Self {
        let mut d = KeyDiff::default();
        for (n, p) in store.iter() {
            match params.get(n) {
                None => d.missing.push(n.to_string()),
                Some(t) if t.shape() != p.value().shape() => d.mismatched.push((n.to_string(), p.value().shape().to_vec(), t.shape().to_vec())),
                Some(_) => {}
            }
        }
        d.unexpected = params.keys().filter(|k| !store.contains(k)).cloned().collect();
        d
    }

    pub fn is_clean(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.mismatched.is_empty()
    }
}

impl std::fmt::Display for KeyDiff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (n, a, b) in &self.mismatched {
            writeln!(f, "  shape  {n}: model {a:?}, checkpoint {b:?}")?;
        }
        for n in &self.missing {
            writeln!(f, "  missing    {n}")?;
        }
        for n in &self.unexpected {
            writeln!(f, "  unexpected {n}")?;
        }
        Ok(())
    }
}
