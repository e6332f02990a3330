//! JSON reports written next to checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vibprune_core::analysis::{AttentionStats, HeadDivergence, PruningPattern};
use vibprune_core::extract::DenseModel;
use vibprune_core::model::ModelConfig;
use vibprune_core::objective::{CountModel, Metric};

use crate::error::{Error, Result};

/// Structure and cost of an extracted model, relative to its source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub d_kept: usize,
    pub heads_kept_per_layer: Vec<usize>,
    pub inter_kept_per_layer: Vec<usize>,
    pub out_kept_per_layer: Vec<usize>,
    /// Source indices of layers with at least one live sub-layer.
    pub layers_kept: Vec<usize>,
    pub mha_kept_per_layer: Vec<bool>,
    pub ffn_kept_per_layer: Vec<bool>,
    pub full_width: usize,
    pub full_heads: usize,
    pub full_ffn_dim: usize,
    pub params: u64,
    pub flops: u64,
    pub sparsity_params: f64,
    pub sparsity_flops: f64,
}

impl Sidecar {
    /// `source` is the configuration the model was extracted from; FLOPs
    /// are counted at `seq_len`.
    pub fn new(dense: &DenseModel<f32>, source: &ModelConfig, seq_len: usize) -> Result<Self> {
        let s = dense.survival();
        let params = dense.param_count();
        let flops = dense.flop_count(seq_len);
        let base = |m| CountModel::new(source, m, seq_len).map(|c| c.total_base);
        let (bp, bf) = (base(Metric::Parameters)?, base(Metric::Flops)?);
        Ok(Sidecar {
            d_kept: s.width,
            layers_kept: (0..s.heads.len()).filter(|&i| s.layer_alive(i)).collect(),
            heads_kept_per_layer: s.heads,
            inter_kept_per_layer: s.inter,
            out_kept_per_layer: s.out,
            mha_kept_per_layer: s.mha_alive,
            ffn_kept_per_layer: s.ffn_alive,
            full_width: s.full_width,
            full_heads: s.full_heads,
            full_ffn_dim: s.full_ffn_dim,
            params,
            flops,
            sparsity_params: 1.0 - params as f64 / bp,
            sparsity_flops: 1.0 - flops as f64 / bf,
        })
    }

    /// Per-structure kept ratios in the same layout as a pruning pattern.
    pub fn pattern(&self) -> PruningPattern {
        let ratio = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        PruningPattern {
            width_kept: self.d_kept,
            width_ratio: ratio(self.d_kept, self.full_width),
            layers: (0..self.heads_kept_per_layer.len())
                .map(|i| vibprune_core::analysis::LayerPattern {
                    heads_kept: self.heads_kept_per_layer[i],
                    inter_kept: self.inter_kept_per_layer[i],
                    out_kept: self.out_kept_per_layer[i],
                    heads_ratio: ratio(self.heads_kept_per_layer[i], self.full_heads),
                    inter_ratio: ratio(self.inter_kept_per_layer[i], self.full_ffn_dim),
                    out_ratio: ratio(self.out_kept_per_layer[i], self.full_width),
                    mha_alive: self.mha_kept_per_layer[i],
                    ffn_alive: self.ffn_kept_per_layer[i],
                    alive: self.layers_kept.contains(&i),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPatternJson {
    pub layer: usize,
    pub heads_ratio: f64,
    pub inter_ratio: f64,
    pub out_ratio: f64,
    pub mha_alive: bool,
    pub ffn_alive: bool,
    pub alive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternReport {
    pub width_kept: usize,
    pub width_ratio: f64,
    pub layers: Vec<LayerPatternJson>,
}

impl From<&PruningPattern> for PatternReport {
    fn from(p: &PruningPattern) -> Self {
        PatternReport {
            width_kept: p.width_kept,
            width_ratio: p.width_ratio,
            layers: p
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerPatternJson {
                    layer: i,
                    heads_ratio: l.heads_ratio,
                    inter_ratio: l.inter_ratio,
                    out_ratio: l.out_ratio,
                    mha_alive: l.mha_alive,
                    ffn_alive: l.ffn_alive,
                    alive: l.alive,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub tokens: Vec<usize>,
    pub queries: usize,
    /// `[layer][head]`
    pub token_mass: Vec<Vec<f64>>,
    pub prev: Vec<Vec<f64>>,
    pub cur: Vec<Vec<f64>>,
    pub next: Vec<Vec<f64>>,
}

impl AttentionReport {
    pub fn new(tokens: &[usize], s: &AttentionStats) -> Self {
        AttentionReport {
            tokens: tokens.to_vec(),
            queries: s.queries,
            token_mass: s.token_mass.clone(),
            prev: s.prev.clone(),
            cur: s.cur.clone(),
            next: s.next.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    /// `[layer, head]` of each row and column.
    pub heads: Vec<[usize; 2]>,
    pub matrix: Vec<Vec<f64>>,
    /// Query tokens averaged over; the unnormalized sum is `matrix · tokens`.
    pub tokens: usize,
}

impl From<&HeadDivergence> for DivergenceReport {
    fn from(h: &HeadDivergence) -> Self {
        DivergenceReport {
            heads: h.heads.iter().map(|&(l, j)| [l, j]).collect(),
            matrix: h.matrix.clone(),
            tokens: h.tokens,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(Error::io(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
