//! Synthetic sequence-classification tasks whose labels are deterministic
//! functions of the tokens.
//!
//! Every sequence is `[CLS] payload… [SEP]` with `CLS = 0` and `SEP = 1`;
//! payload tokens start at id 2.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Tokens;
use crate::Rng;

pub const CLS: u16 = 0;
pub const SEP: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Label 1 iff token `A` occurs more often than token `B`.
    MajorityPair,
    /// Label is the parity of the bit tokens that directly follow markers.
    MarkedParity,
    /// Tokens carry hidden feature vectors in `R^k`; the label is the sign
    /// of a fixed linear rule applied to their sum.
    SignalDims,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::MajorityPair => "majority_pair",
            TaskKind::MarkedParity => "marked_parity",
            TaskKind::SignalDims => "signal_dims",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        [
            TaskKind::MajorityPair,
            TaskKind::MarkedParity,
            TaskKind::SignalDims,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<TaskKind> {
        [
            TaskKind::MajorityPair,
            TaskKind::MarkedParity,
            TaskKind::SignalDims,
        ]
        .get(c as usize)
        .copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    /// Full sequence length including CLS and SEP.
    pub seq: usize,
    /// train, validation, test
    pub sizes: [usize; 3],
    pub seed: u64,
    /// `signal_dims`: intrinsic dimension `k`.
    pub intrinsic_dim: usize,
    /// `marked_parity`: number of marker-bit pairs in every sequence.
    pub markers: usize,
    /// `marked_parity`: probability that an unmarked payload slot holds a
    /// bit token.
    pub distractors: f64,
    /// `signal_dims`: minimum |score| (in units of the payload's standard
    /// deviation) for a sequence to be accepted.
    pub margin: f64,
}

impl TaskSpec {
    /// Spec with `total` examples split 80/10/10.
    pub fn new(kind: TaskKind, vocab: usize, seq: usize, total: usize, seed: u64) -> Self {
        let val = total / 10;
        let test = total / 10;
        TaskSpec {
            kind,
            vocab,
            seq,
            sizes: [total - val - test, val, test],
            seed,
            intrinsic_dim: 8,
            markers: 2,
            distractors: 0.0,
            margin: 0.25,
        }
    }

    fn payload_len(&self) -> usize {
        self.seq.saturating_sub(2)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.payload_len();
        let need_vocab = match self.kind {
            TaskKind::MajorityPair => 4,
            TaskKind::MarkedParity => 5,
            TaskKind::SignalDims => 4,
        };
        if self.vocab < need_vocab || self.vocab > u16::MAX as usize + 1 {
            return Err(Error::contract(format!(
                "{} needs a vocabulary of {need_vocab}..=65536 tokens, got {}",
                self.kind.as_str(),
                self.vocab
            )));
        }
        let need_payload = match self.kind {
            TaskKind::MajorityPair => 1,
            TaskKind::MarkedParity => 2 * self.markers.max(1),
            TaskKind::SignalDims => 1,
        };
        if p < need_payload {
            return Err(Error::contract(format!(
                "sequence length {} too short for {} (payload needs {need_payload})",
                self.seq,
                self.kind.as_str()
            )));
        }
        if self.kind == TaskKind::MarkedParity && self.markers == 0 {
            return Err(Error::contract("marked_parity needs markers >= 1"));
        }
        if !(0.0..=1.0).contains(&self.distractors) {
            return Err(Error::contract("distractors must lie in [0, 1]"));
        }
        if self.kind == TaskKind::SignalDims && self.intrinsic_dim == 0 {
            return Err(Error::contract("signal_dims needs intrinsic_dim >= 1"));
        }
        if self.sizes.iter().sum::<usize>() == 0 {
            return Err(Error::contract("dataset sizes are all zero"));
        }
        Ok(())
    }
}

/// Fixed-length labelled sequences, row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub seq: usize,
    pub tokens: Vec<u16>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u16] {
        &self.tokens[i * self.seq..(i + 1) * self.seq]
    }

    /// Tokens and labels of the examples at `idx`, in that order.
    pub fn batch(&self, idx: &[usize]) -> (Tokens, Vec<usize>) {
        let ids = idx
            .iter()
            .flat_map(|&i| self.row(i).iter().map(|&t| t as usize))
            .collect();
        let labels = idx.iter().map(|&i| self.labels[i] as usize).collect();
        (
            Tokens {
                ids,
                batch: idx.len(),
                seq: self.seq,
            },
            labels,
        )
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            seq: self.seq,
            tokens: idx
                .iter()
                .flat_map(|&i| self.row(i).iter().copied())
                .collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn push(&mut self, row: &[u16], label: u8) {
        self.tokens.extend_from_slice(row);
        self.labels.push(label);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Hidden state shared by all splits of a `signal_dims` task.
struct SignalRule {
    /// Per-token projection of its feature vector onto the rule direction.
    score: Vec<f64>,
}

impl SignalRule {
    fn new(spec: &TaskSpec, rng: &mut Rng) -> Self {
        let k = spec.intrinsic_dim;
        let mut w: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        let norm = libm::sqrt(w.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
        w.iter_mut().for_each(|x| *x /= norm);
        let score = (0..spec.vocab)
            .map(|t| {
                if t < 2 {
                    return 0.0;
                }
                let f: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
                f.iter().zip(&w).map(|(a, b)| a * b).sum()
            })
            .collect();
        SignalRule { score }
    }
}

/// Draws one payload and its label, or `None` when the draw is rejected
/// (majority ties, insufficient margin).
fn draw(
    spec: &TaskSpec,
    rule: Option<&SignalRule>,
    rng: &mut Rng,
    payload: &mut [u16],
) -> Option<u8> {
    let v = spec.vocab as u16;
    match spec.kind {
        TaskKind::MajorityPair => {
            // A = 2, B = 3, fillers after; A and B are each drawn with
            // probability 1/3 so counts vary widely
            let (mut a, mut b) = (0i32, 0i32);
            for t in payload.iter_mut() {
                let u: f64 = rng.random();
                *t = if u < 1.0 / 3.0 {
                    a += 1;
                    2
                } else if u < 2.0 / 3.0 || v == 4 {
                    b += 1;
                    3
                } else {
                    rng.random_range(4..v)
                };
            }
            if a == b {
                None
            } else {
                Some((a > b) as u8)
            }
        }
        TaskKind::MarkedParity => {
            // marker = 2, bits = 3 (zero) / 4 (one), fillers after; bit
            // tokens also appear unmarked as distractors
            let p = payload.len();
            for t in payload.iter_mut() {
                let u: f64 = rng.random();
                *t = if u < spec.distractors || v == 5 {
                    rng.random_range(3..5)
                } else {
                    rng.random_range(5..v)
                };
            }
            let m = spec.markers;
            // choose m non-overlapping (marker, bit) slots
            let slots = p / 2;
            let chosen = index::sample(rng, slots, m);
            let mut parity = 0u8;
            for s in chosen.iter() {
                let bit = rng.random_range(0..2u16);
                payload[2 * s] = 2;
                payload[2 * s + 1] = 3 + bit;
                parity ^= bit as u8;
            }
            Some(parity)
        }
        TaskKind::SignalDims => {
            let rule = rule.expect("signal rule");
            let mut s = 0.0;
            for t in payload.iter_mut() {
                *t = rng.random_range(2..v);
                s += rule.score[*t as usize];
            }
            let sd = libm::sqrt(payload.len() as f64);
            if s.abs() < spec.margin * sd {
                None
            } else {
                Some((s > 0.0) as u8)
            }
        }
    }
}

fn split(spec: &TaskSpec, rule: Option<&SignalRule>, n: usize, stream: u64) -> Dataset {
    let mut rng = Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream + 1);
    let mut ds = Dataset {
        seq: spec.seq,
        ..Default::default()
    };
    let mut row = vec![0u16; spec.seq];
    row[0] = CLS;
    row[spec.seq - 1] = SEP;
    for i in 0..n {
        // alternate the requested label, then shuffle the order below
        let want = (i % 2) as u8;
        loop {
            let label = draw(spec, rule, &mut rng, &mut row[1..spec.seq - 1]);
            if label == Some(want) {
                ds.push(&row, want);
                break;
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    ds.select(&order)
}

/// Generates the train/validation/test splits of `spec`.
pub fn generate(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let rule = match spec.kind {
        TaskKind::SignalDims => {
            let mut rng = Rng::seed_from_u64(spec.seed);
            Some(SignalRule::new(spec, &mut rng))
        }
        _ => None,
    };
    let r = rule.as_ref();
    Ok(TaskData {
        spec: spec.clone(),
        train: split(spec, r, spec.sizes[0], 1),
        val: split(spec, r, spec.sizes[1], 2),
        test: split(spec, r, spec.sizes[2], 3),
    })
}

/// Label of a `majority_pair` row, recomputed from its tokens.
pub fn majority_label(row: &[u16]) -> Option<u8> {
    let a = row.iter().filter(|&&t| t == 2).count();
    let b = row.iter().filter(|&&t| t == 3).count();
    (a != b).then_some((a > b) as u8)
}

/// Label of a `marked_parity` row, recomputed from its tokens.
pub fn marked_parity_label(row: &[u16]) -> Option<u8> {
    let mut parity = 0u8;
    let mut markers = 0;
    for w in row.windows(2) {
        if w[0] == 2 {
            markers += 1;
            parity ^= (w[1] == 4) as u8;
        }
    }
    (markers > 0).then_some(parity)
}

/// Stratified sample of `max(1, round(fraction·N))` examples without
/// replacement, kept in their original order.
pub fn subset(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!(
            "subset fraction {fraction} outside (0, 1]"
        )));
    }
    let n = data.len();
    if fraction == 1.0 || n == 0 {
        return Ok(data.clone());
    }
    let total = (libm::round(fraction * n as f64) as usize).clamp(1, n);
    let mut classes: Vec<u8> = data.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let members: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| (0..n).filter(|&i| data.labels[i] == c).collect())
        .collect();
    // proportional allocation, remainders to the largest fractional parts
    let exact: Vec<f64> = members
        .iter()
        .map(|m| total as f64 * m.len() as f64 / n as f64)
        .collect();
    let mut alloc_n: Vec<usize> = exact.iter().map(|&e| libm::floor(e) as usize).collect();
    let mut rest: Vec<usize> = (0..classes.len()).collect();
    rest.sort_by(|&a, &b| {
        let fa = exact[a] - libm::floor(exact[a]);
        let fb = exact[b] - libm::floor(exact[b]);
        fb.partial_cmp(&fa)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut short = total - alloc_n.iter().sum::<usize>();
    for &c in rest.iter().cycle() {
        if short == 0 {
            break;
        }
        if alloc_n[c] < members[c].len() {
            alloc_n[c] += 1;
            short -= 1;
        }
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(total);
    for (m, &k) in members.iter().zip(&alloc_n) {
        picked.extend(index::sample(&mut rng, m.len(), k).iter().map(|i| m[i]));
    }
    picked.sort_unstable();
    Ok(data.select(&picked))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_rule_example() {
        let row = [CLS, 2, 3, 2, 2, 3, 2, 3, 2, SEP];
        assert_eq!(majority_label(&row), Some(1));
    }

    #[test]
    fn generated_labels_follow_rules() {
        for kind in [TaskKind::MajorityPair, TaskKind::MarkedParity] {
            let d = generate(&TaskSpec::new(kind, 12, 10, 200, 4)).unwrap();
            for i in 0..d.train.len() {
                let row = d.train.row(i);
                assert_eq!(row[0], CLS);
                assert_eq!(row[9], SEP);
                let l = match kind {
                    TaskKind::MajorityPair => majority_label(row),
                    _ => marked_parity_label(row),
                };
                assert_eq!(l, Some(d.train.labels[i]));
            }
        }
    }

    #[test]
    fn splits_are_balanced_and_sized() {
        let d = generate(&TaskSpec::new(TaskKind::SignalDims, 20, 8, 1000, 1)).unwrap();
        assert_eq!([d.train.len(), d.val.len(), d.test.len()], [800, 100, 100]);
        let ones = d.train.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 400);
    }

    #[test]
    fn same_seed_same_data() {
        let s = TaskSpec::new(TaskKind::MarkedParity, 10, 12, 100, 9);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
    }

    #[test]
    fn infeasible_specs_rejected() {
        let s = TaskSpec::new(TaskKind::MarkedParity, 10, 4, 100, 9);
        assert!(matches!(generate(&s), Err(Error::Contract(_))));
        let s = TaskSpec::new(TaskKind::MajorityPair, 3, 8, 100, 9);
        assert!(matches!(generate(&s), Err(Error::Contract(_))));
    }

    #[test]
    fn subset_examples() {
        let d = generate(&TaskSpec::new(TaskKind::MajorityPair, 8, 8, 1250, 2))
            .unwrap()
            .train;
        assert_eq!(d.len(), 1000);
        assert_eq!(subset(&d, 1.0, 0).unwrap(), d);
        assert_eq!(subset(&d, 0.03, 0).unwrap().len(), 30);
        let s = subset(&d, 0.1, 5).unwrap();
        let ones = s.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!((s.len(), ones), (100, 50));
        assert_eq!(subset(&d, 0.1, 5).unwrap(), s);
        assert_eq!(subset(&d, 1e-9, 5).unwrap().len(), 1);
    }
}
