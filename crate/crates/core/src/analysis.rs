//! Attention probes and pruning-pattern reports over a frozen model.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::extract::{gate_survival, kept_heads, DenseModel, Survival};
use crate::model::{GatedTransformer, Tokens};
use crate::tensor::{Real, Tensor};

const BATCH: usize = 64;

/// Mean attention statistics per `[layer][head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    /// Mass on positions holding one of the probed tokens.
    pub token_mass: Vec<Vec<f64>>,
    /// Mass on the previous, current and next position.
    pub prev: Vec<Vec<f64>>,
    pub cur: Vec<Vec<f64>>,
    pub next: Vec<Vec<f64>>,
    /// Number of (example, query) rows averaged.
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadDivergence {
    /// `(layer, head)` of each row/column; dropped heads are absent.
    pub heads: Vec<(usize, usize)>,
    /// Mean JS divergence over query tokens, natural log.
    pub matrix: Vec<Vec<f64>>,
    /// Number of query tokens averaged; multiply to recover the sum.
    pub tokens: usize,
}

/// Jensen-Shannon divergence of two distributions, natural log.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            s += 0.5 * a * libm::log(a / m);
        }
        if b > 0.0 {
            s += 0.5 * b * libm::log(b / m);
        }
    }
    s.clamp(0.0, core::f64::consts::LN_2)
}

fn batches(data: &Dataset) -> impl Iterator<Item = Tokens> + '_ {
    let idx: Vec<usize> = (0..data.len()).collect();
    idx.chunks(BATCH)
        .map(|c| data.batch(c).0)
        .collect::<Vec<_>>()
        .into_iter()
}

fn dims<R: Real>(maps: &[Tensor<R>]) -> Result<(usize, usize, usize)> {
    let first = maps
        .first()
        .ok_or_else(|| Error::contract("no attention maps"))?;
    match *first.shape() {
        [b, h, s, s2] if s == s2 => Ok((b, h, s)),
        ref other => Err(Error::shape(
            "attention maps",
            alloc::format!("expected (B, J, S, S), got {other:?}"),
        )),
    }
}

/// Running sums behind [`AttentionStats`].
#[derive(Debug, Clone)]
pub struct AttentionAccumulator {
    token_ids: Vec<usize>,
    mass: Vec<Vec<f64>>,
    pos: [Vec<Vec<f64>>; 3],
    pos_n: [usize; 3],
    queries: usize,
}

impl AttentionAccumulator {
    pub fn new(layers: usize, heads: usize, token_ids: &[usize]) -> Self {
        let z = || vec![vec![0.0; heads]; layers];
        AttentionAccumulator {
            token_ids: token_ids.to_vec(),
            mass: z(),
            pos: [z(), z(), z()],
            pos_n: [0; 3],
            queries: 0,
        }
    }

    /// Adds one batch: `maps[layer]` is `(batch, heads, seq, seq)`.
    pub fn add<R: Real>(&mut self, tokens: &Tokens, maps: &[Tensor<R>]) -> Result<()> {
        let (b, nh, s) = dims(maps)?;
        if b != tokens.batch || s != tokens.seq || maps.len() != self.mass.len() {
            return Err(Error::shape(
                "attention maps",
                "maps do not match the token batch",
            ));
        }
        for (l, m) in maps.iter().enumerate() {
            let m = m.data();
            for bi in 0..b {
                let hit: Vec<bool> = tokens
                    .row(bi)
                    .iter()
                    .map(|t| self.token_ids.contains(t))
                    .collect();
                for h in 0..nh {
                    for q in 0..s {
                        let row = &m[((bi * nh + h) * s + q) * s..][..s];
                        let mass: f64 = row
                            .iter()
                            .zip(&hit)
                            .filter(|(_, &k)| k)
                            .map(|(v, _)| v.as_f64())
                            .sum();
                        self.mass[l][h] += mass;
                        for (k, off) in [-1isize, 0, 1].into_iter().enumerate() {
                            let key = q as isize + off;
                            if key >= 0 && (key as usize) < s {
                                self.pos[k][l][h] += row[key as usize].as_f64();
                            }
                        }
                    }
                }
            }
        }
        self.queries += b * s;
        self.pos_n[0] += b * s.saturating_sub(1);
        self.pos_n[1] += b * s;
        self.pos_n[2] += b * s.saturating_sub(1);
        Ok(())
    }

    pub fn finish(self) -> Result<AttentionStats> {
        if self.queries == 0 {
            return Err(Error::Data("no attention rows to average".into()));
        }
        let div = |m: &[Vec<f64>], n: usize| -> Vec<Vec<f64>> {
            m.iter()
                .map(|r| {
                    r.iter()
                        .map(|v| {
                            if n == 0 {
                                0.0
                            } else {
                                (v / n as f64).clamp(0.0, 1.0)
                            }
                        })
                        .collect()
                })
                .collect()
        };
        let [p, c, n] = &self.pos;
        Ok(AttentionStats {
            token_mass: div(&self.mass, self.queries),
            prev: div(p, self.pos_n[0]),
            cur: div(c, self.pos_n[1]),
            next: div(n, self.pos_n[2]),
            queries: self.queries,
        })
    }
}

/// Average attention each head pays to positions holding `token_ids`, and
/// to the previous, current and next position (boundary rows skipped).
pub fn token_attention<R: Real>(
    model: &GatedTransformer<R>,
    data: &Dataset,
    token_ids: &[usize],
) -> Result<AttentionStats> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let c = &model.config;
    let mut acc = AttentionAccumulator::new(c.layers, c.heads, token_ids);
    for tokens in batches(data) {
        acc.add(&tokens, &model.attention_maps(&tokens)?)?;
    }
    acc.finish()
}

/// Running sums behind [`HeadDivergence`].
#[derive(Debug, Clone)]
pub struct DivergenceAccumulator {
    heads: Vec<(usize, usize)>,
    sums: Vec<Vec<f64>>,
    tokens: usize,
}

impl DivergenceAccumulator {
    /// `alive[layer][head]` selects the heads that enter the matrix.
    pub fn new(alive: &[Vec<bool>]) -> Self {
        let heads: Vec<(usize, usize)> = alive
            .iter()
            .enumerate()
            .flat_map(|(l, hs)| {
                hs.iter()
                    .enumerate()
                    .filter(|(_, &a)| a)
                    .map(move |(h, _)| (l, h))
            })
            .collect();
        let n = heads.len();
        DivergenceAccumulator {
            heads,
            sums: vec![vec![0.0; n]; n],
            tokens: 0,
        }
    }

    pub fn add<R: Real>(&mut self, maps: &[Tensor<R>]) -> Result<()> {
        if self.heads.is_empty() {
            return Ok(());
        }
        let (b, nh, s) = dims(maps)?;
        let row = |(l, h): (usize, usize), bi: usize, q: usize| -> Vec<f64> {
            maps[l].data()[((bi * nh + h) * s + q) * s..][..s]
                .iter()
                .map(|v| v.as_f64())
                .collect()
        };
        for bi in 0..b {
            for q in 0..s {
                let rows: Vec<Vec<f64>> = self.heads.iter().map(|&hd| row(hd, bi, q)).collect();
                for i in 0..rows.len() {
                    for j in i + 1..rows.len() {
                        self.sums[i][j] += js_divergence(&rows[i], &rows[j]);
                    }
                }
            }
        }
        self.tokens += b * s;
        Ok(())
    }

    pub fn finish(self) -> HeadDivergence {
        let n = self.heads.len();
        let mut matrix = vec![vec![0.0; n]; n];
        let t = self.tokens.max(1) as f64;
        for i in 0..n {
            for j in i + 1..n {
                let v = (self.sums[i][j] / t).clamp(0.0, core::f64::consts::LN_2);
                matrix[i][j] = v;
                matrix[j][i] = v;
            }
        }
        HeadDivergence {
            heads: self.heads,
            matrix,
            tokens: self.tokens,
        }
    }
}

/// Pairwise mean JS divergence between the attention rows of every kept
/// head, from the eval forward.
pub fn head_js<R: Real>(model: &GatedTransformer<R>, data: &Dataset) -> Result<HeadDivergence> {
    let mut acc = DivergenceAccumulator::new(&kept_heads(model));
    for tokens in batches(data) {
        acc.add(&model.attention_maps(&tokens)?)?;
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPattern {
    pub heads_kept: usize,
    pub inter_kept: usize,
    pub out_kept: usize,
    pub heads_ratio: f64,
    pub inter_ratio: f64,
    pub out_ratio: f64,
    pub mha_alive: bool,
    pub ffn_alive: bool,
    pub alive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningPattern {
    pub width_kept: usize,
    pub width_ratio: f64,
    pub layers: Vec<LayerPattern>,
}

impl PruningPattern {
    pub fn from_survival(s: &Survival) -> Self {
        let ratio = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        PruningPattern {
            width_kept: s.width,
            width_ratio: ratio(s.width, s.full_width),
            layers: (0..s.heads.len())
                .map(|i| LayerPattern {
                    heads_kept: s.heads[i],
                    inter_kept: s.inter[i],
                    out_kept: s.out[i],
                    heads_ratio: ratio(s.heads[i], s.full_heads),
                    inter_ratio: ratio(s.inter[i], s.full_ffn_dim),
                    out_ratio: ratio(s.out[i], s.full_width),
                    mha_alive: s.mha_alive[i],
                    ffn_alive: s.ffn_alive[i],
                    alive: s.layer_alive(i),
                })
                .collect(),
        }
    }

    pub fn layers_kept(&self) -> usize {
        self.layers.iter().filter(|l| l.alive).count()
    }
}

/// Kept fractions per structure, read from the gates of `model`.
pub fn pruning_pattern<R: Real>(model: &GatedTransformer<R>) -> PruningPattern {
    PruningPattern::from_survival(&gate_survival(model))
}

pub fn dense_pruning_pattern<R: Real>(model: &DenseModel<R>) -> PruningPattern {
    PruningPattern::from_survival(&model.survival())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn js_extremes() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        let v = js_divergence(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((v - core::f64::consts::LN_2).abs() < 1e-15);
    }

    fn uniform_maps(b: usize, s: usize) -> Vec<Tensor<f64>> {
        vec![Tensor::full(&[b, 1, s, s], 1.0 / s as f64)]
    }

    #[test]
    fn uniform_head_on_two_marked_positions() {
        let tokens = Tokens::from_rows(&[&[7usize, 3, 3, 7, 3, 3, 3, 3][..]]).unwrap();
        let mut acc = AttentionAccumulator::new(1, 1, &[7]);
        acc.add(&tokens, &uniform_maps(1, 8)).unwrap();
        let st = acc.finish().unwrap();
        assert!((st.token_mass[0][0] - 0.25).abs() < 1e-12);
        assert!((st.cur[0][0] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn empty_and_full_token_sets() {
        let tokens = Tokens::from_rows(&[&[0usize, 1, 2][..]]).unwrap();
        for (set, want) in [(&[][..], 0.0), (&[0usize, 1, 2][..], 1.0)] {
            let mut acc = AttentionAccumulator::new(1, 1, set);
            acc.add(&tokens, &uniform_maps(1, 3)).unwrap();
            assert!((acc.finish().unwrap().token_mass[0][0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn no_rows_is_data_error() {
        let acc = AttentionAccumulator::new(1, 1, &[]);
        assert_eq!(acc.finish().unwrap_err().kind(), "data error");
    }
}
