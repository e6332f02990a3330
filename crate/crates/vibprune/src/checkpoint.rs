//! Named-tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VIBP" | version u32 | count u32
//! per tensor: name_len u16 | name (UTF-8) | ndim u8 | dims u32 × ndim | f32 × product(dims)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use vibprune_core::extract::DenseModel;
use vibprune_core::model::{Betas, GatedTransformer, ModelConfig};
use vibprune_core::tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VIBP";
pub const VERSION: u32 = 1;

pub type Named = Vec<(String, Tensor<f32>)>;

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 2 + n.len() + 1 + 4 * t.shape().len() + 4 * t.len())
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count =
        u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let ndim = u8::try_from(t.shape().len())
            .map_err(|_| Error::Format(format!("{name} has too many dims")))?;
        out.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("{name} dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Named> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r
        .take(4)
        .map_err(|_| Error::Format("file too short for a checkpoint header".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:02x?}, expected \"VIBP\""
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        let ndim = r.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("{name} is too large")))?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    fs::write(path, encode(tensors)?).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<Named> {
    decode(&fs::read(path).map_err(Error::io(path))?)
}

/// A model of either representation, as stored on disk.
#[derive(Debug, Clone)]
pub enum Model {
    Gated(GatedTransformer<f32>),
    Dense(DenseModel<f32>),
}

fn meta(values: &[f64]) -> Tensor<f32> {
    Tensor::new(&[values.len()], values.iter().map(|&v| v as f32).collect()).expect("1-d")
}

/// Parameters plus `meta.config` (and `meta.gates` for gated models).
pub fn gated_tensors(m: &GatedTransformer<f32>) -> Named {
    let c = &m.config;
    let mut out = vec![(
        "meta.config".to_string(),
        meta(&[
            c.vocab_size as f64,
            c.max_seq as f64,
            c.width as f64,
            c.layers as f64,
            c.heads as f64,
            c.ffn_dim as f64,
            c.num_classes as f64,
            c.causal as u8 as f64,
            c.dropout,
        ]),
    )];
    if let Some(g) = m.gates() {
        out.push((
            "meta.gates".to_string(),
            meta(&[g.tau, g.binarized as u8 as f64]),
        ));
    }
    out.extend(m.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())));
    out
}

fn gated_from(tensors: Named, betas: &Betas) -> Result<GatedTransformer<f32>> {
    let mut config = None;
    let mut gates = None;
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        let v: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
        match name.as_str() {
            "meta.config" => config = Some(v),
            "meta.gates" => gates = Some(v),
            _ => {
                store.insert(name, t)?;
            }
        }
    }
    let c = config.ok_or_else(|| Error::Format("checkpoint has no meta.config".into()))?;
    let [vocab, seq, width, layers, heads, ffn, classes, causal, dropout] = c[..] else {
        return Err(Error::Format(format!(
            "meta.config has {} entries, expected 9",
            c.len()
        )));
    };
    let config = ModelConfig {
        vocab_size: vocab as usize,
        max_seq: seq as usize,
        width: width as usize,
        layers: layers as usize,
        heads: heads as usize,
        ffn_dim: ffn as usize,
        num_classes: classes as usize,
        causal: causal != 0.0,
        dropout: (dropout * 1e6).round() / 1e6,
    };
    let mut m = GatedTransformer::from_params(&config, store)?;
    if let Some(g) = gates {
        let [tau, binarized] = g[..] else {
            return Err(Error::Format(format!(
                "meta.gates has {} entries, expected 2",
                g.len()
            )));
        };
        m.bind_gates(betas, tau, binarized != 0.0)?;
    }
    Ok(m)
}

pub fn model_tensors(m: &Model) -> Named {
    match m {
        Model::Gated(g) => gated_tensors(g),
        Model::Dense(d) => d.named_tensors(),
    }
}

pub fn save_model(path: &Path, m: &Model) -> Result<()> {
    save(path, &model_tensors(m))
}

/// Loads either representation; gate strengths are not stored and come
/// from `betas`.
pub fn load_model(path: &Path, betas: &Betas) -> Result<Model> {
    let tensors = load(path)?;
    if tensors.iter().any(|(n, _)| n == "meta.config") {
        Ok(Model::Gated(gated_from(tensors, betas)?))
    } else {
        Ok(Model::Dense(DenseModel::from_named_tensors(&tensors)?))
    }
}

pub fn load_gated(path: &Path, betas: &Betas) -> Result<GatedTransformer<f32>> {
    match load_model(path, betas)? {
        Model::Gated(m) => Ok(m),
        Model::Dense(_) => Err(Error::Format(format!(
            "{} holds an extracted model, not a gated one",
            path.display()
        ))),
    }
}
