//! Dataset files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VIBD" | version u32 | kind u8 | vocab u32 | seq u32 | sizes u32 × 3 | seed u64
//! tokens u16 × (Σ sizes · seq), rows of train then val then test
//! labels u8 × Σ sizes, same order
//! ```
//!
//! Kind-specific generator knobs are not stored; the rows are.

use std::fs;
use std::path::Path;

use vibprune_core::data::{Dataset, TaskData, TaskKind, TaskSpec};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VIBD";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 1 + 4 + 4 + 12 + 8;

pub fn encode(data: &TaskData) -> Result<Vec<u8>> {
    let s = &data.spec;
    let splits = [&data.train, &data.val, &data.test];
    let u32_of = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(s.kind.code());
    out.extend_from_slice(&u32_of(s.vocab, "vocab")?.to_le_bytes());
    out.extend_from_slice(&u32_of(s.seq, "seq")?.to_le_bytes());
    for d in splits {
        if d.seq != s.seq {
            return Err(Error::Format(format!(
                "split with sequence length {} in a seq {} task",
                d.seq, s.seq
            )));
        }
        out.extend_from_slice(&u32_of(d.len(), "split size")?.to_le_bytes());
    }
    out.extend_from_slice(&s.seed.to_le_bytes());
    for d in splits {
        for t in &d.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    for d in splits {
        out.extend_from_slice(&d.labels);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<TaskData> {
    if bytes.len() < HEADER {
        return Err(Error::Format("file too short for a dataset header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected \"VIBD\"",
            &bytes[..4]
        )));
    }
    let u32_at =
        |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().expect("4 bytes")) as usize;
    let version = u32_at(4) as u32;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let kind = TaskKind::from_code(bytes[8])
        .ok_or_else(|| Error::Format(format!("unknown task kind {}", bytes[8])))?;
    let (vocab, seq) = (u32_at(9), u32_at(13));
    let sizes = [u32_at(17), u32_at(21), u32_at(25)];
    let seed = u64::from_le_bytes(bytes[29..37].try_into().expect("8 bytes"));
    let rows: usize = sizes.iter().sum();
    let want = rows
        .checked_mul(seq)
        .and_then(|t| t.checked_mul(2))
        .and_then(|t| t.checked_add(rows + HEADER))
        .ok_or_else(|| Error::Format("dataset sizes overflow".into()))?;
    if bytes.len() != want {
        return Err(Error::Format(format!(
            "dataset file has {} bytes, header implies {want}",
            bytes.len()
        )));
    }
    let tokens: Vec<u16> = bytes[HEADER..HEADER + 2 * rows * seq]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Format(format!(
            "token {t} outside vocabulary of {vocab}"
        )));
    }
    let labels = &bytes[HEADER + 2 * rows * seq..];
    let mut spec = TaskSpec::new(kind, vocab, seq, 0, seed);
    spec.sizes = sizes;
    let (mut r0, mut split) = (0, Vec::with_capacity(3));
    for n in sizes {
        split.push(Dataset {
            seq,
            tokens: tokens[r0 * seq..(r0 + n) * seq].to_vec(),
            labels: labels[r0..r0 + n].to_vec(),
        });
        r0 += n;
    }
    let test = split.pop().expect("3 splits");
    let val = split.pop().expect("3 splits");
    let train = split.pop().expect("3 splits");
    Ok(TaskData {
        spec,
        train,
        val,
        test,
    })
}

pub fn save(path: &Path, data: &TaskData) -> Result<()> {
    fs::write(path, encode(data)?).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<TaskData> {
    decode(&fs::read(path).map_err(Error::io(path))?)
}
