//! Weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SRECW1"
//! u32 tensor count
//! per tensor: u32 name length, name (UTF-8), u32 rank, u32 dims[rank],
//!             f32 values[prod(dims)]
//! u64 first 8 bytes of SHA-256 over everything above
//! ```
//!
//! The trailing hash doubles as the model id stored in compressed files.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::{Conv, Model, ModelConfig, HEAD_DILATIONS};
use super::tensor::Tensor;
use crate::mixture::PARAMS_PER_MIXTURE;
use crate::{Error, Result};

const MAGIC: &[u8; 6] = b"SRECW1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    tensors: Vec<NamedTensor>,
    id: u64,
}

/// First 8 bytes of SHA-256, little-endian.
pub fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn body_bytes(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::Format("weight file is truncated".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

impl WeightStore {
    pub fn new(tensors: Vec<NamedTensor>) -> Self {
        let id = hash64(&body_bytes(&tensors));
        WeightStore { tensors, id }
    }

    pub fn from_model(model: &Model<f32>) -> Self {
        let mut tensors = Vec::with_capacity(2 * model.convs().len());
        for (spec, conv) in model.arch().convs().iter().zip(model.convs()) {
            for (suffix, t) in [("w", &conv.weight), ("b", &conv.bias)] {
                tensors.push(NamedTensor {
                    name: format!("{}.{suffix}", spec.name),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                });
            }
        }
        Self::new(tensors)
    }

    /// Model id: the content hash.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = body_bytes(&self.tensors);
        out.extend_from_slice(&self.id.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a weight file (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let mut r = Reader {
            data: body,
            pos: MAGIC.len(),
        };
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()?;
            if rank > 8 {
                return Err(Error::Format(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in weight file".into()));
        }
        let found = hash64(body);
        if found != stored {
            return Err(Error::Format(format!(
                "weight file hash {stored:016x} does not match content {found:016x}"
            )));
        }
        Ok(WeightStore { tensors, id: found })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Model configuration implied by tensor names and shapes.
    pub fn infer_config(&self) -> Result<ModelConfig> {
        let shape = |name: &str| {
            self.tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| t.shape.as_slice())
                .ok_or_else(|| Error::Format(format!("weight file lacks {name}")))
        };
        let has = |name: String| self.tensors.iter().any(|t| t.name == name);
        let levels = (0..).take_while(|l| has(format!("l{l}.s1.in.w"))).count();
        let res_blocks = (0..).take_while(|i| has(format!("l0.s1.res{i}.a.w"))).count();
        let input = shape("l0.s1.in.w")?;
        let out = shape("l0.s1.out.w")?;
        let step2 = shape("l0.s2.in.w")?;
        if input.len() != 4 || out.len() != 4 || step2.len() != 4 || out[0] % PARAMS_PER_MIXTURE != 0 {
            return Err(Error::Format("unexpected head or input shapes".into()));
        }
        let config = ModelConfig {
            levels,
            hidden: input[0],
            res_blocks,
            mixtures: out[0] / PARAMS_PER_MIXTURE,
            factorized: step2[1] == 6,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("weight file describes no valid model: {e}")))?;
        debug_assert_eq!(HEAD_DILATIONS.len(), 3);
        Ok(config)
    }

    /// Resolves every conv of the inferred architecture; extra, missing or
    /// misshapen tensors are load errors.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let config = self.infer_config()?;
        let mut by_name: HashMap<&str, &NamedTensor> = HashMap::new();
        for t in &self.tensors {
            if by_name.insert(&t.name, t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {}", t.name)));
            }
        }
        let skeleton = Model::<f32>::zeros(config)?;
        let mut convs = Vec::with_capacity(skeleton.convs().len());
        for spec in skeleton.arch().convs() {
            let mut get = |suffix: &str, shape: &[usize]| -> Result<Tensor<f32>> {
                let name = format!("{}.{suffix}", spec.name);
                let t = by_name
                    .remove(name.as_str())
                    .ok_or_else(|| Error::Format(format!("weight file lacks {name}")))?;
                if t.shape != shape {
                    return Err(Error::Format(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        t.shape
                    )));
                }
                Ok(Tensor::from_vec(shape, t.data.clone()))
            };
            convs.push(Conv {
                weight: get("w", &spec.weight_shape())?,
                bias: get("b", &[spec.c_out])?,
            });
        }
        if let Some(name) = by_name.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {name}")));
        }
        Model::from_parts(config, convs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model<f32> {
        let cfg = ModelConfig {
            levels: 2,
            hidden: 4,
            res_blocks: 2,
            mixtures: 3,
            factorized: false,
        };
        Model::init(cfg, 1).unwrap()
    }

    #[test]
    fn roundtrip() {
        let m = model();
        let store = WeightStore::from_model(&m);
        let back = WeightStore::from_bytes(&store.to_bytes()).unwrap();
        assert_eq!(back, store);
        let m2 = back.to_model().unwrap();
        assert_eq!(m2.config(), m.config());
        assert_eq!(m2.convs(), m.convs());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.w");
        store.save(&path).unwrap();
        assert_eq!(WeightStore::load(&path).unwrap(), store);
    }

    #[test]
    fn truncated_and_corrupt_files_fail() {
        let bytes = WeightStore::from_model(&model()).to_bytes();
        for cut in [0, 5, 6, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(WeightStore::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(WeightStore::from_bytes(&bad).is_err());
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 1;
        assert!(WeightStore::from_bytes(&flipped).is_err());
    }

    #[test]
    fn hash_tracks_every_value() {
        let m = model();
        let a = WeightStore::from_model(&m).id();
        let mut m2 = m.clone();
        let last = m2.convs().len() - 1;
        m2.convs_mut()[last].bias.data_mut()[0] += 1e-6;
        assert_ne!(WeightStore::from_model(&m2).id(), a);
        assert_eq!(WeightStore::from_model(&m).id(), a);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let store = WeightStore::from_model(&model());
        let mut tensors = store.tensors().to_vec();
        let i = tensors.iter().position(|t| t.name == "l1.up.w").unwrap();
        tensors[i].shape = vec![16, 4, 1, 9];
        assert!(WeightStore::new(tensors.clone()).to_model().is_err());
        tensors.remove(i);
        assert!(WeightStore::new(tensors).to_model().is_err());
    }
}
