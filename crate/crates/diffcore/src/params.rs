use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanInUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub init: Init,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

/// One row of the on-disk manifest. `offset` counts f32 elements into the blob.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a zero-filled parameter. Call [`ParamStore::initialize`] afterwards.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Parameter { name, value: Tensor::zeros(shape), init });
        Ok(ParamId(id))
    }

    /// Deterministically fills every parameter from `seed`. Values are drawn in
    /// f64 and rounded, so f32 and f64 stores built the same way agree.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.entries {
            match p.init {
                Init::Zeros => p.value.data_mut().iter_mut().for_each(|v| *v = T::zero()),
                Init::Ones => p.value.data_mut().iter_mut().for_each(|v| *v = T::one()),
                Init::FanInUniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    for v in p.value.data_mut() {
                        *v = T::lit(rng.gen_range(-bound..bound));
                    }
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.entries.iter_mut()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast(), init: p.init })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0;
        self.entries
            .iter()
            .map(|p| {
                let e = ManifestEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset };
                offset += p.value.len();
                e
            })
            .collect()
    }

    /// All values as little-endian f32, in manifest order.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 4);
        for p in &self.entries {
            write_f32s(&mut out, p.value.data());
        }
        out
    }

    /// Overwrites values from a manifest + blob pair. Every manifest entry must
    /// name an existing parameter of identical shape, and vice versa.
    pub fn load_blob(&mut self, manifest: &[ManifestEntry], blob: &[u8]) -> Result<()> {
        if manifest.len() != self.entries.len() {
            return Err(DiffError::CorruptStore(format!(
                "manifest lists {} parameters, store has {}",
                manifest.len(),
                self.entries.len()
            )));
        }
        for e in manifest {
            let id = self.id(&e.name).map_err(|_| DiffError::CorruptStore(format!("unexpected parameter `{}`", e.name)))?;
            let p = &mut self.entries[id.0];
            if p.value.shape() != e.shape.as_slice() {
                return Err(DiffError::CorruptStore(format!(
                    "`{}` has shape {:?} on disk, {:?} in model",
                    e.name,
                    e.shape,
                    p.value.shape()
                )));
            }
            let n = p.value.len();
            let vals = read_f32s(blob, e.offset, n)
                .ok_or_else(|| DiffError::CorruptStore(format!("blob too short for `{}`", e.name)))?;
            for (dst, v) in p.value.data_mut().iter_mut().zip(vals) {
                *dst = T::lit(v as f64);
            }
        }
        Ok(())
    }

    /// Writes `<stem>.json` (manifest) and `<stem>.bin` (blob) under `dir`.
    pub fn save(&self, dir: &std::path::Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = serde_json::to_vec_pretty(&self.manifest())?;
        std::fs::write(dir.join(format!("{stem}.json")), manifest)?;
        std::fs::write(dir.join(format!("{stem}.bin")), self.to_blob())?;
        Ok(())
    }

    pub fn load(&mut self, dir: &std::path::Path, stem: &str) -> Result<()> {
        let manifest: Vec<ManifestEntry> =
            serde_json::from_slice(&std::fs::read(dir.join(format!("{stem}.json")))?)?;
        let blob = std::fs::read(dir.join(format!("{stem}.bin")))?;
        let total: usize = manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if blob.len() != total * 4 {
            return Err(DiffError::CorruptStore(format!(
                "blob holds {} bytes, manifest describes {}",
                blob.len(),
                total * 4
            )));
        }
        self.load_blob(&manifest, &blob)
    }
}

pub fn write_f32s<T: Real>(out: &mut Vec<u8>, vals: &[T]) {
    for v in vals {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

pub fn read_f32s(blob: &[u8], offset: usize, n: usize) -> Option<Vec<f32>> {
    let start = offset.checked_mul(4)?;
    let end = start.checked_add(n.checked_mul(4)?)?;
    let bytes = blob.get(start..end)?;
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.w", &[3, 4], Init::FanInUniform { fan_in: 3 }).unwrap();
        s.add("a.b", &[4], Init::Zeros).unwrap();
        s.add("ln.g", &[4], Init::Ones).unwrap();
        s.initialize(11);
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("x", &[1], Init::Zeros).unwrap();
        assert!(matches!(s.add("x", &[2], Init::Zeros), Err(DiffError::DuplicateParam(_))));
    }

    #[test]
    fn initialization_is_seed_deterministic_and_bounded() {
        let a = store();
        let b = store();
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p.value, q.value);
        }
        let w = a.value(a.id("a.w").unwrap());
        let bound = 1.0 / 3f32.sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(w.data().iter().any(|v| *v != 0.0));
        assert!(a.value(a.id("a.b").unwrap()).data().iter().all(|v| *v == 0.0));
        assert!(a.value(a.id("ln.g").unwrap()).data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn f32_and_f64_stores_agree_after_rounding() {
        let mut s64 = ParamStore::<f64>::new();
        s64.add("a.w", &[3, 4], Init::FanInUniform { fan_in: 3 }).unwrap();
        s64.add("a.b", &[4], Init::Zeros).unwrap();
        s64.add("ln.g", &[4], Init::Ones).unwrap();
        s64.initialize(11);
        let s32 = store();
        for (p, q) in s32.iter().zip(s64.iter()) {
            for (x, y) in p.value.data().iter().zip(q.value.data()) {
                assert_eq!(*x, *y as f32);
            }
        }
    }

    #[test]
    fn manifest_offsets_are_cumulative() {
        let m = store().manifest();
        assert_eq!(m[0].offset, 0);
        assert_eq!(m[1].offset, 12);
        assert_eq!(m[2].offset, 16);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = store();
        a.save(dir.path(), "params").unwrap();
        let mut b = store();
        b.iter_mut().for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v = 9.0));
        b.load(dir.path(), "params").unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn load_rejects_shape_change() {
        let dir = tempfile::tempdir().unwrap();
        store().save(dir.path(), "params").unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("a.w", &[4, 3], Init::Zeros).unwrap();
        other.add("a.b", &[4], Init::Zeros).unwrap();
        other.add("ln.g", &[4], Init::Zeros).unwrap();
        assert!(matches!(other.load(dir.path(), "params"), Err(DiffError::CorruptStore(_))));
    }

    #[test]
    fn load_rejects_truncated_blob() {
        let dir = tempfile::tempdir().unwrap();
        store().save(dir.path(), "params").unwrap();
        let bin = dir.path().join("params.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        let mut s = store();
        assert!(matches!(s.load(dir.path(), "params"), Err(DiffError::CorruptStore(_))));
    }
}
