//! Named parameter storage, the binary weights container and per-group
//! SHA-256 digests.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic    b"LSNW"
//! version  u32 (= 1)
//! count    u32
//! count x { name_len u32, name utf-8, ndim u32, dims u32 x ndim, data f32 x numel }
//! ```
//!
//! Tensors are written in name order, so equal stores produce equal files.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use lesionlm_tensor::{Float, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LSNW";
const VERSION: u32 = 1;

/// Parameter groups; the group of a parameter is the first dotted segment of
/// its name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    Prompts,
    Projector,
    Adapter,
    Lm,
    Anomaly,
    Diff,
    Heatmap,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::Backbone,
        Group::Prompts,
        Group::Projector,
        Group::Adapter,
        Group::Lm,
        Group::Anomaly,
        Group::Diff,
        Group::Heatmap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Prompts => "prompts",
            Group::Projector => "projector",
            Group::Adapter => "adapter",
            Group::Lm => "lm",
            Group::Anomaly => "anomaly",
            Group::Diff => "diff",
            Group::Heatmap => "heatmap",
        }
    }

    pub fn of(name: &str) -> Option<Group> {
        let head = name.split('.').next()?;
        Group::ALL.into_iter().find(|g| g.as_str() == head)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: BTreeMap<String, Arc<Tensor<F>>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>) {
        assert!(Group::of(name).is_some(), "parameter `{name}` has no known group prefix");
        let prev = self.params.insert(name.to_string(), Arc::new(value));
        assert!(prev.is_none(), "parameter `{name}` registered twice");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.arc(name)
    }

    pub fn arc(&self, name: &str) -> &Arc<Tensor<F>> {
        self.params.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Mutable access; clones the buffer if a graph still holds it.
    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        let p = self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        Arc::make_mut(p)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn group_names(&self, group: Group) -> Vec<String> {
        self.params.keys().filter(|n| Group::of(n) == Some(group)).cloned().collect()
    }

    pub fn num_params(&self, group: Group) -> usize {
        self.iter().filter(|(n, _)| Group::of(n) == Some(group)).map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast::<G>()))).collect() }
    }

    /// Copies every tensor of `groups` from `other`, which must hold the same
    /// names and shapes for those groups.
    pub fn copy_groups(&mut self, other: &ParamStore<F>, groups: &[Group]) -> Result<()> {
        for g in groups {
            let mine = self.group_names(*g);
            let theirs = other.group_names(*g);
            if mine != theirs {
                return Err(Error::Config(format!("parameter group `{g}` differs between models")));
            }
            for n in mine {
                let src = other.arc(&n);
                if src.shape() != self.get(&n).shape() {
                    return Err(Error::Config(format!("shape mismatch for `{n}`")));
                }
                self.params.insert(n, src.clone());
            }
        }
        Ok(())
    }

    /// SHA-256 over the names, shapes and f32 bytes of one group.
    pub fn digest(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter().filter(|(n, _)| Group::of(n) == Some(group)) {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for v in t.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Digest of every group, keyed by group name.
    pub fn checksum_report(&self) -> BTreeMap<Group, String> {
        Group::ALL.into_iter().map(|g| (g, self.digest(g))).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Format { path: path.display().to_string(), reason })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> std::result::Result<Self, String> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err("bad magic".into());
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let count = read_u32(r)?;
        let mut store = Self::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| "non utf-8 tensor name".to_string())?;
            if Group::of(&name).is_none() {
                return Err(format!("tensor `{name}` has no known group"));
            }
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim).map(|_| read_u32(r).map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            read_exact(r, &mut raw)?;
            let data = raw.chunks_exact(4).map(|c| F::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
            if store.contains(&name) {
                return Err(format!("duplicate tensor `{name}`"));
            }
            store.insert(&name, Tensor::new(&shape, data));
        }
        if !r.is_empty() {
            return Err("trailing bytes".into());
        }
        Ok(store)
    }

    /// Replaces the values of every tensor present in `loaded`, checking that
    /// names and shapes agree with this store.
    pub fn assign_from(&mut self, loaded: &ParamStore<F>) -> Result<()> {
        for (name, t) in loaded.params.iter() {
            let Some(slot) = self.params.get_mut(name) else {
                return Err(Error::Config(format!("checkpoint has unknown parameter `{name}`")));
            };
            if slot.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint shape {:?} for `{name}` does not match model shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Sub-store with the tensors of the given groups.
    pub fn subset(&self, groups: &[Group]) -> ParamStore<F> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(n, _)| Group::of(n).is_some_and(|g| groups.contains(&g)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

fn read_exact(r: &mut &[u8], out: &mut [u8]) -> std::result::Result<(), String> {
    r.read_exact(out).map_err(|_| "truncated".to_string())
}

fn read_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Registers parameters with seeded initial values.
pub struct ParamBuilder<F> {
    pub store: ParamStore<F>,
    rng: ChaCha8Rng,
}

impl<F: Float> ParamBuilder<F> {
    pub fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> String {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| F::from_f64(dist.sample(&mut self.rng))).collect();
        self.store.insert(name, Tensor::new(shape, data));
        name.to_string()
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64) -> String {
        self.store.insert(name, Tensor::full(shape, F::from_f64(value)));
        name.to_string()
    }

    pub fn finish(self) -> ParamStore<F> {
        self.store
    }
}

/// Binds parameters to a graph for one forward pass. Parameters whose group
/// is in the trainable set become gradient-requiring leaves; all others are
/// constants, so frozen groups never receive a gradient.
pub struct Ctx<'a, F: Float> {
    pub g: &'a Graph<F>,
    store: &'a ParamStore<F>,
    trainable: BTreeSet<Group>,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a, F: Float> Ctx<'a, F> {
    pub fn new(g: &'a Graph<F>, store: &'a ParamStore<F>, trainable: impl IntoIterator<Item = Group>) -> Self {
        Self { g, store, trainable: trainable.into_iter().collect(), bound: RefCell::new(BTreeMap::new()) }
    }

    /// Inference context: nothing is trainable.
    pub fn frozen(g: &'a Graph<F>, store: &'a ParamStore<F>) -> Self {
        Self::new(g, store, [])
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    pub fn is_trainable(&self, group: Group) -> bool {
        self.trainable.contains(&group)
    }

    pub fn p(&self, name: &str) -> Var {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let group = Group::of(name).unwrap_or_else(|| panic!("parameter `{name}` has no group"));
        let v = self.g.leaf(self.store.arc(name).clone(), self.trainable.contains(&group));
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Every parameter touched so far, with its graph handle.
    pub fn bound(&self) -> Vec<(String, Var)> {
        self.bound.borrow().iter().map(|(k, v)| (k.clone(), *v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut b = ParamBuilder::new(1);
        b.normal("backbone.w", &[3, 4], 1.0);
        b.full("lm.b", &[2], 0.5);
        b.normal("anomaly.sys", &[4], 1.0);
        b.finish()
    }

    #[test]
    fn container_round_trip() {
        let s = sample_store();
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        let back = ParamStore::<f32>::from_bytes(&bytes).unwrap();
        for (n, t) in s.iter() {
            assert_eq!(back.get(n), t);
        }
        assert!(ParamStore::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamStore::<f32>::from_bytes(&bad).is_err());
    }

    #[test]
    fn digest_sensitive_to_single_weight() {
        let mut s = sample_store();
        let before = s.checksum_report();
        assert_eq!(before, s.clone().checksum_report());
        s.get_mut("backbone.w").data_mut()[5] += 1e-3;
        let after = s.checksum_report();
        assert_ne!(before[&Group::Backbone], after[&Group::Backbone]);
        assert_eq!(before[&Group::Lm], after[&Group::Lm]);
    }

    #[test]
    fn frozen_groups_bind_as_constants() {
        let s = sample_store();
        let g = Graph::new();
        let cx = Ctx::new(&g, &s, [Group::Anomaly]);
        assert!(g.requires_grad(cx.p("anomaly.sys")));
        assert!(!g.requires_grad(cx.p("backbone.w")));
        assert_eq!(cx.p("anomaly.sys"), cx.p("anomaly.sys"));
    }
}
