//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//! `b"KSELCKPT"`, `u32` version, `u64` header length, header JSON
//! (training config with the model config inside, vocabulary tokens), `u32`
//! tensor count, then per tensor `u32` name length, UTF-8 name, `u32` rows,
//! `u32` cols and `rows * cols` `f32` values in row-major order.

use std::fs;
use std::path::Path;

use kselect_core::Vocabulary;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"KSELCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    train: TrainConfig,
    vocab: Vec<String>,
}

/// A loaded checkpoint: model, vocabulary, the config it was trained with,
/// and the hex SHA-256 of the file bytes.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub train: TrainConfig,
    pub hash: String,
}

/// A named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Matrix,
}

pub fn encode(model: &Model, vocab: &Vocabulary, train: &TrainConfig) -> Result<Vec<u8>> {
    let mut train = train.clone();
    train.model = model.config.clone();
    let header = serde_json::to_vec(&Header { train, vocab: vocab.tokens().to_vec() })?;
    let mut out = Vec::with_capacity(header.len() + model.store.scalar_count() * 4 + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for &x in p.value.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the checkpoint and returns its hash.
pub fn save(path: &Path, model: &Model, vocab: &Vocabulary, train: &TrainConfig) -> Result<String> {
    let bytes = encode(model, vocab, train)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(hash_bytes(&bytes))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
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

fn parse(bytes: &[u8]) -> Result<(Header, Vec<Tensor>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        let raw = r.take(rows * cols * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        tensors.push(Tensor { name, value: Matrix::from_vec(rows, cols, data) });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, tensors))
}

/// Copies externally produced weights into `model`. Every tensor must name
/// an existing parameter with the same shape; parameters not mentioned
/// keep their values. Returns how many were replaced.
pub fn import_weights(model: &mut Model, tensors: impl IntoIterator<Item = Tensor>) -> Result<usize> {
    let mut n = 0;
    for t in tensors {
        let id = model.store.id(&t.name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", t.name)))?;
        let current = model.store.value(id).shape();
        if current != t.value.shape() {
            return Err(Error::Checkpoint(format!("{}: shape {:?}, expected {:?}", t.name, t.value.shape(), current)));
        }
        *model.store.value_mut(id) = t.value;
        n += 1;
    }
    Ok(n)
}

/// Reads the tensors of a checkpoint file without building a model, for
/// use with [`import_weights`].
pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse(&bytes)?.1)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, tensors) = parse(bytes)?;
    let mut model = Model::new(header.train.model.clone())?;
    if tensors.len() != model.store.len() {
        return Err(Error::Checkpoint(format!("{} tensors, model has {}", tensors.len(), model.store.len())));
    }
    import_weights(&mut model, tensors)?;
    let vocab = Vocabulary::from_tokens(header.vocab)?;
    if vocab.len() != model.vocab() {
        return Err(Error::Checkpoint(format!("vocabulary of {} tokens for a model of {}", vocab.len(), model.vocab())));
    }
    Ok(Checkpoint { model, vocab, train: header.train, hash: hash_bytes(bytes) })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn fixture() -> (Model, Vocabulary, TrainConfig) {
        let vocab = Vocabulary::build(["alpha beta gamma delta"], 1);
        let cfg = TrainConfig {
            o: 2,
            model: ModelConfig { d: 8, layers: 1, heads: 2, ffn: 16, vocab: vocab.len(), max_positions: 64, ..Default::default() },
            ..Default::default()
        };
        (Model::new(cfg.model.clone()).unwrap(), vocab, cfg)
    }

    #[test]
    fn round_trip_rounds_to_f32() {
        let (m, v, c) = fixture();
        let bytes = encode(&m, &v, &c).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.train, c);
        assert_eq!(ck.vocab, v);
        assert_eq!(ck.hash.len(), 64);
        for ((_, a), (_, b)) in m.store.iter().zip(ck.model.store.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        // f32 values survive a second round trip bitwise
        assert_eq!(encode(&ck.model, &ck.vocab, &ck.train).unwrap(), bytes);
    }

    #[test]
    fn names_carry_group_tags() {
        let (m, v, c) = fixture();
        let tensors = parse(&encode(&m, &v, &c).unwrap()).unwrap().1;
        assert!(tensors.iter().any(|t| t.name == "theta_e.layer0.attn.wq"));
        assert!(tensors.iter().all(|t| ["theta_e.", "theta_d.", "theta_k.", "w.", "m."].iter().any(|p| t.name.starts_with(p))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (m, v, c) = fixture();
        let bytes = encode(&m, &v, &c).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn import_checks_names_and_shapes() {
        let (mut m, _, _) = fixture();
        let t = Tensor { name: "w.k_stop".into(), value: Matrix::from_vec(1, 8, vec![0.5; 8]) };
        assert_eq!(import_weights(&mut m, [t]).unwrap(), 1);
        assert_eq!(m.store.value(m.k_stop).data(), &[0.5; 8]);
        let wrong = Tensor { name: "w.k_stop".into(), value: Matrix::zeros(2, 8) };
        assert!(import_weights(&mut m, [wrong]).is_err());
        let unknown = Tensor { name: "w.nothing".into(), value: Matrix::zeros(1, 1) };
        assert!(import_weights(&mut m, [unknown]).is_err());
    }
}
