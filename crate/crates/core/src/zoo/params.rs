use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, Entry};
use super::path::{ParamPath, PathPattern};
use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How much of a parameter the optimiser may touch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    Frozen,
    All,
    /// Only rows `lo..hi` along the first axis.
    Rows(usize, usize),
}

impl Trainable {
    pub fn is_trainable(&self) -> bool {
        !matches!(self, Trainable::Frozen)
    }

    /// Number of elements the optimiser updates for a tensor of `shape`.
    pub fn count(&self, shape: &[usize]) -> usize {
        let n: usize = shape.iter().product();
        match self {
            Trainable::Frozen => 0,
            Trainable::All => n,
            Trainable::Rows(lo, hi) => (hi - lo) * n / shape[0],
        }
    }
}

/// Named parameters, iterated in path order, with a trainability mask.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<ParamPath, Tensor>,
    trainable: BTreeMap<ParamPath, Trainable>,
}

pub enum Init<'a> {
    Seeded(u64),
    Checkpoint(&'a Checkpoint),
}

/// Builds the full parameter set for `spec`. Every parameter starts trainable.
pub fn build_model(spec: &ModelSpec, init: Init<'_>) -> Result<ParamStore> {
    spec.validate()?;
    match init {
        Init::Seeded(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::default();
            for (p, shape) in spec.param_shapes() {
                let t = match p.leaf() {
                    "bias" | "beta" => Tensor::zeros(&shape),
                    "gamma" => Tensor::full(&shape, 1.0),
                    _ => {
                        let fan_in = *shape.last().unwrap() as f64;
                        Tensor::uniform(&shape, 1.0 / fan_in.sqrt(), &mut rng)
                    }
                };
                store.insert(p, t, Trainable::All);
            }
            Ok(store)
        }
        Init::Checkpoint(ck) => {
            check_digest(spec, ck)?;
            let store = ParamStore::from_checkpoint(ck)?;
            let want = spec.param_shapes();
            for (p, shape) in &want {
                match store.entries.get(p) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::SpecMismatch(format!("{p}: shape {:?}, expected {shape:?}", t.shape())))
                    }
                    None => return Err(Error::SpecMismatch(format!("checkpoint lacks `{p}`"))),
                }
            }
            if let Some(extra) = store.entries.keys().find(|p| !want.contains_key(*p)) {
                return Err(Error::SpecMismatch(format!("checkpoint has unexpected `{extra}`")));
            }
            Ok(store)
        }
    }
}

pub fn check_digest(spec: &ModelSpec, ck: &Checkpoint) -> Result<()> {
    if ck.kind != spec.kind() || ck.digest != spec.digest() {
        return Err(Error::SpecMismatch(format!(
            "checkpoint is `{}` {}..., model is `{}` {}",
            ck.kind,
            &ck.digest_hex()[..12],
            spec.kind(),
            spec.canonical()
        )));
    }
    Ok(())
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: ParamPath, t: Tensor, tr: Trainable) {
        self.trainable.insert(p.clone(), tr);
        self.entries.insert(p, t);
    }

    pub fn remove(&mut self, p: &ParamPath) -> Option<Tensor> {
        self.trainable.remove(p);
        self.entries.remove(p)
    }

    pub fn get(&self, p: &ParamPath) -> Result<&Tensor> {
        self.entries.get(p).ok_or_else(|| Error::UnknownPath(p.to_string()))
    }

    pub fn contains(&self, p: &ParamPath) -> bool {
        self.entries.contains_key(p)
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, p: &ParamPath, t: Tensor) -> Result<()> {
        let slot = self.entries.get_mut(p).ok_or_else(|| Error::UnknownPath(p.to_string()))?;
        if slot.shape() != t.shape() {
            return Err(Error::ShapeMismatch(format!("{p}: {:?} vs {:?}", slot.shape(), t.shape())));
        }
        *slot = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamPath, &Tensor)> {
        self.entries.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &ParamPath> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable(&self, p: &ParamPath) -> &Trainable {
        self.trainable.get(p).unwrap_or(&Trainable::Frozen)
    }

    pub fn set_trainability(&mut self, p: &ParamPath, tr: Trainable) -> Result<()> {
        if !self.entries.contains_key(p) {
            return Err(Error::UnknownPath(p.to_string()));
        }
        self.trainable.insert(p.clone(), tr);
        Ok(())
    }

    /// Sets the whole-tensor trainable flag on every listed path.
    pub fn set_trainable<'a>(&mut self, paths: impl IntoIterator<Item = &'a ParamPath>, flag: bool) -> Result<()> {
        let paths: Vec<&ParamPath> = paths.into_iter().collect();
        if let Some(p) = paths.iter().find(|p| !self.entries.contains_key(**p)) {
            return Err(Error::UnknownPath(p.to_string()));
        }
        for p in paths {
            self.trainable.insert(p.clone(), if flag { Trainable::All } else { Trainable::Frozen });
        }
        Ok(())
    }

    pub fn trainable_paths(&self) -> Vec<ParamPath> {
        self.trainable.iter().filter(|(_, t)| t.is_trainable()).map(|(p, _)| p.clone()).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().map(|(p, t)| self.trainable(p).count(t.shape())).sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Lists parameters and module prefixes matching `pattern`, in path order.
    pub fn select_paths(&self, pattern: &PathPattern) -> Vec<ParamPath> {
        let mut out = BTreeSet::new();
        for p in self.entries.keys() {
            for cand in p.prefixes().chain(std::iter::once(p.clone())) {
                if pattern.matches(&cand) {
                    out.insert(cand);
                }
            }
        }
        out.into_iter().collect()
    }

    /// Parameters under a module prefix (or the parameter itself).
    pub fn under(&self, prefix: &ParamPath) -> Vec<ParamPath> {
        self.entries.keys().filter(|p| p.starts_with(prefix)).cloned().collect()
    }

    pub fn to_checkpoint(&self, spec: &ModelSpec) -> Checkpoint {
        Checkpoint {
            kind: spec.kind().to_string(),
            digest: spec.digest(),
            entries: self.entries.iter().map(|(p, t)| Entry::from_tensor(p.to_string(), t)).collect(),
        }
    }

    /// Loads every entry of a checkpoint, all marked trainable.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<ParamStore> {
        let mut store = ParamStore::default();
        for e in &ck.entries {
            let p: ParamPath = e
                .path
                .parse()
                .map_err(|_| Error::CorruptCheckpoint(format!("invalid entry path `{}`", e.path)))?;
            if store.contains(&p) {
                return Err(Error::CorruptCheckpoint(format!("duplicate entry `{p}`")));
            }
            store.insert(p, e.to_tensor(), Trainable::All);
        }
        Ok(store)
    }

    /// Copy of the values with every entry frozen; used for teachers and references.
    pub fn frozen_copy(&self) -> ParamStore {
        ParamStore {
            entries: self.entries.clone(),
            trainable: self.entries.keys().map(|p| (p.clone(), Trainable::Frozen)).collect(),
        }
    }

    /// Rounds every value to f32 precision, matching a save/load cycle.
    pub fn quantized(&self) -> ParamStore {
        ParamStore {
            entries: self.entries.iter().map(|(p, t)| (p.clone(), t.to_f32_precision())).collect(),
            trainable: self.trainable.clone(),
        }
    }
}

pub fn save_checkpoint(spec: &ModelSpec, params: &ParamStore, path: impl AsRef<std::path::Path>) -> Result<()> {
    params.to_checkpoint(spec).save(path)
}

pub fn load_checkpoint(spec: &ModelSpec, path: impl AsRef<std::path::Path>) -> Result<ParamStore> {
    build_model(spec, Init::Checkpoint(&Checkpoint::load(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::path::path;
    use crate::zoo::spec::{Activation, VitSpec};

    fn mlp() -> ModelSpec {
        ModelSpec::mlp(&[4, 8, 3], Activation::Relu).unwrap()
    }

    fn vit() -> ModelSpec {
        ModelSpec::vit(VitSpec { in_dim: 4, dim: 16, blocks: 2, heads: 2, mlp_dim: 32, classes: 3, seq_len: 5 })
            .unwrap()
    }

    #[test]
    fn seeded_init_is_reproducible_and_scaled() {
        let a = build_model(&mlp(), Init::Seeded(1)).unwrap();
        let b = build_model(&mlp(), Init::Seeded(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.paths().eq(b.paths()));
        let w = a.get(&path("layers[0].weight")).unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.5));
        assert!(a.get(&path("layers[0].bias")).unwrap().data().iter().all(|&v| v == 0.0));
        let v = build_model(&vit(), Init::Seeded(1)).unwrap();
        assert!(v.get(&path("blocks[1].norm2.gamma")).unwrap().data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn checkpoint_init_checks_digest() {
        let a = build_model(&mlp(), Init::Seeded(1)).unwrap();
        let ck = a.to_checkpoint(&mlp());
        let back = build_model(&mlp(), Init::Checkpoint(&ck)).unwrap();
        assert_eq!(back, a.quantized());
        let other = ModelSpec::mlp(&[4, 8, 3], Activation::Gelu).unwrap();
        assert!(matches!(build_model(&other, Init::Checkpoint(&ck)), Err(Error::SpecMismatch(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("m.zjk1");
        let a = build_model(&vit(), Init::Seeded(4)).unwrap();
        save_checkpoint(&vit(), &a, &f).unwrap();
        let bytes1 = std::fs::read(&f).unwrap();
        let b = load_checkpoint(&vit(), &f).unwrap();
        assert_eq!(b, a.quantized());
        save_checkpoint(&vit(), &b, &f).unwrap();
        assert_eq!(std::fs::read(&f).unwrap(), bytes1);
        assert!(matches!(load_checkpoint(&vit(), dir.path().join("missing")), Err(Error::Io(_))));
    }

    #[test]
    fn every_single_byte_mutation_fails_to_load_into_the_model() {
        let spec = mlp();
        let bytes = build_model(&spec, Init::Seeded(2)).unwrap().to_checkpoint(&spec).to_bytes();
        for pos in 0..bytes.len() {
            let mut m = bytes.clone();
            m[pos] ^= 0x10;
            let res = Checkpoint::from_bytes(&m).and_then(|ck| build_model(&spec, Init::Checkpoint(&ck)));
            assert!(res.is_err(), "mutation at byte {pos} went unnoticed");
        }
    }

    #[test]
    fn select_paths_cases() {
        let v = build_model(&vit(), Init::Seeded(0)).unwrap();
        let got = v.select_paths(&"blocks[0:2].attn.qkv".parse().unwrap());
        assert_eq!(got, vec![path("blocks[0].attn.qkv"), path("blocks[1].attn.qkv")]);
        assert!(v.select_paths(&"blocks[5:9]".parse().unwrap()).is_empty());
        let m = build_model(&mlp(), Init::Seeded(0)).unwrap();
        assert_eq!(m.select_paths(&"layers[*].bias".parse().unwrap()).len(), 2);
    }

    #[test]
    fn set_trainable_cases() {
        let mut m = build_model(&mlp(), Init::Seeded(0)).unwrap();
        let all: Vec<ParamPath> = m.paths().cloned().collect();
        m.set_trainable(&all, false).unwrap();
        let head = m.under(&mlp().head_module());
        m.set_trainable(&head, true).unwrap();
        assert_eq!(m.trainable_paths(), head);
        assert!(matches!(m.set_trainable([&path("nope.weight")], true), Err(Error::UnknownPath(_))));
    }
}
