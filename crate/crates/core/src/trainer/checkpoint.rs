use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{FusionModel, ModelGraph};
use crate::tensor::{SeededRng, Tensor};

pub const MAGIC: &[u8; 8] = b"MELAFUSE";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// Named tensors (parameters and batch statistics), the architecture
/// fingerprint they came from, and the RNG state at save time.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub tensors: Vec<(String, Tensor)>,
}

/// Outcome of applying a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Checkpoint tensors with no same-named, same-shaped model parameter.
    pub skipped: Vec<String>,
    /// Model parameters the checkpoint did not provide.
    pub untouched: Vec<String>,
}

impl Checkpoint {
    pub fn from_model(model: &FusionModel, rng: &SeededRng) -> Self {
        Self {
            fingerprint: model.fingerprint(),
            rng_seed: rng.seed(),
            rng_word_pos: rng.word_pos(),
            tensors: model.params().map(|(_, _, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// A single graph, e.g. a backbone to be reused elsewhere.
    pub fn from_graph(graph: &ModelGraph, rng: &SeededRng) -> Self {
        Self {
            fingerprint: graph.fingerprint(),
            rng_seed: rng.seed(),
            rng_word_pos: rng.word_pos(),
            tensors: graph.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn rng(&self) -> SeededRng {
        SeededRng::from_state(self.rng_seed, self.rng_word_pos)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rng_seed = r.u64()?;
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Format(format!("tensor {name} extents overflow")))?;
            let data = (0..numel).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { fingerprint, rng_seed, rng_word_pos, tensors })
    }

    /// Written to a sibling temporary file, then renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Full load requires a matching fingerprint and supplies every tensor.
    /// Partial load copies tensors whose name and shape both match. The
    /// model is modified only after every check has passed.
    pub fn apply(&self, model: &mut FusionModel, partial: bool) -> Result<LoadReport> {
        if !partial && self.fingerprint != model.fingerprint() {
            return Err(Error::Compatibility(
                "architecture fingerprint differs; request a partial load to reuse matching tensors".into(),
            ));
        }
        let mut report = LoadReport::default();
        let mut writes = Vec::new();
        for (name, t) in &self.tensors {
            match model.find(name) {
                Some((part, id)) if model.graph(part).expect("found").store.get(id).value.shape() == t.shape() => {
                    writes.push((part, id, t));
                    report.loaded.push(name.clone());
                }
                _ if partial => report.skipped.push(name.clone()),
                Some(_) => return Err(Error::Compatibility(format!("tensor {name} has a different shape"))),
                None => return Err(Error::Compatibility(format!("model has no tensor named {name}"))),
            }
        }
        let provided: std::collections::HashSet<&str> = report.loaded.iter().map(String::as_str).collect();
        report.untouched = model
            .params()
            .filter(|(_, _, p)| !provided.contains(p.name.as_str()))
            .map(|(_, _, p)| p.name.clone())
            .collect();
        if !partial && !report.untouched.is_empty() {
            return Err(Error::Compatibility(format!("checkpoint lacks {}", report.untouched[0])));
        }
        for (part, id, t) in writes {
            model.param_mut(part, id).value = t.clone();
        }
        Ok(report)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
