//! Expected parameter and FLOP counts of a gated model as a differentiable
//! function of per-unit keep probabilities.
//!
//! Every count is a product of keep values of the gate units that must all
//! survive for the counted weight (or operation) to survive extraction.
//! At hard 0/1 keeps the expression equals the exact count of the extracted
//! dense model.
//!
//! Counting conventions (dense model with kept width `d'`, sequence `n`):
//! - matmul `(m×k)·(k×n)`: `2mkn`; bias add, residual add, GELU, softmax
//!   and layer norm: one operation per element.
//! - token + position embedding add: `n·d'`.
//! - the final norm and classifier run on the pooled vector only.
//! - classifier bias is excluded from both counts.

use alloc::vec::Vec;

use crate::error::Result;
use crate::model::{GatedTransformer, ModelConfig};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Sparsity metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Parameters,
    Flops,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Parameters => "parameters",
            Metric::Flops => "flops",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        match s {
            "parameters" | "params" => Some(Metric::Parameters),
            "flops" => Some(Metric::Flops),
            _ => None,
        }
    }
}

/// Keep values of one layer's gates, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LayerKeeps {
    pub heads: Var,
    pub inter: Var,
    pub out: Var,
    pub mha: Var,
    pub ffn: Var,
}

/// Keep values of every gate, as graph nodes shaped like the gates.
#[derive(Debug, Clone)]
pub struct Keeps {
    pub width: Var,
    pub layers: Vec<LayerKeeps>,
}

impl Keeps {
    /// Constant keeps from explicit per-gate vectors.
    pub fn constant<R: Real>(
        g: &mut Graph<R>,
        width: &[f64],
        layers: &[[Vec<f64>; 5]],
    ) -> Result<Keeps> {
        let mut c = |v: &[f64]| g.constant(Tensor::from_f64(&[v.len()], v)?);
        let width = c(width)?;
        let layers = layers
            .iter()
            .map(|[h, i, o, a, f]| {
                Ok(LayerKeeps {
                    heads: c(h)?,
                    inter: c(i)?,
                    out: c(o)?,
                    mha: c(a)?,
                    ffn: c(f)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Keeps { width, layers })
    }

    /// All-ones keeps (nothing pruned).
    pub fn all_kept<R: Real>(g: &mut Graph<R>, cfg: &ModelConfig) -> Result<Keeps> {
        let layer = [
            alloc::vec![1.0; cfg.heads],
            alloc::vec![1.0; cfg.ffn_dim],
            alloc::vec![1.0; cfg.width],
            alloc::vec![1.0],
            alloc::vec![1.0],
        ];
        let layers: Vec<_> = (0..cfg.layers).map(|_| layer.clone()).collect();
        Keeps::constant(g, &alloc::vec![1.0; cfg.width], &layers)
    }

    /// Sigmoid keep probabilities of a gated model's gates.
    pub fn soft<R: Real>(
        g: &mut Graph<R>,
        model: &GatedTransformer<R>,
        tau: f64,
        temperature: f64,
    ) -> Result<Keeps> {
        let gates = model
            .gates()
            .ok_or_else(|| crate::Error::contract("expected sparsity needs a gated model"))?;
        let p = &model.params;
        let width = gates.embedding.soft_keep(g, p, tau, temperature)?;
        let layers = gates
            .layers
            .iter()
            .map(|l| {
                Ok(LayerKeeps {
                    heads: l.heads.soft_keep(g, p, tau, temperature)?,
                    inter: l.inter.soft_keep(g, p, tau, temperature)?,
                    out: l.out.soft_keep(g, p, tau, temperature)?,
                    mha: l.layer_mha.soft_keep(g, p, tau, temperature)?,
                    ffn: l.layer_ffn.soft_keep(g, p, tau, temperature)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Keeps { width, layers })
    }

    /// Hard 0/1 keeps of a gated model at threshold `tau`.
    pub fn hard<R: Real>(g: &mut Graph<R>, model: &GatedTransformer<R>, tau: f64) -> Result<Keeps> {
        let gates = model
            .gates()
            .ok_or_else(|| crate::Error::contract("expected sparsity needs a gated model"))?;
        let p = &model.params;
        let h = |gate: &crate::gates::VibGate| -> Vec<f64> {
            gate.hard_mask(p, tau)
                .into_iter()
                .map(|k| if k { 1.0 } else { 0.0 })
                .collect()
        };
        let layers: Vec<[Vec<f64>; 5]> = gates
            .layers
            .iter()
            .map(|l| {
                [
                    h(&l.heads),
                    h(&l.inter),
                    h(&l.out),
                    h(&l.layer_mha),
                    h(&l.layer_ffn),
                ]
            })
            .collect();
        Keeps::constant(g, &h(&gates.embedding), &layers)
    }
}

/// Base counts of a model configuration under one metric.
#[derive(Debug, Clone, PartialEq)]
pub struct CountModel {
    pub metric: Metric,
    /// Sequence length the FLOPs are counted at.
    pub seq_len: usize,
    pub config: ModelConfig,
    /// Count of the unpruned model.
    pub total_base: f64,
}

impl CountModel {
    pub fn new(config: &ModelConfig, metric: Metric, seq_len: usize) -> Result<Self> {
        let mut cm = CountModel {
            metric,
            seq_len,
            config: config.clone(),
            total_base: 0.0,
        };
        let mut g = Graph::<f64>::new();
        let ones = Keeps::all_kept(&mut g, config)?;
        let kept = cm.expected_kept(&mut g, &ones)?;
        cm.total_base = g.scalar(kept);
        Ok(cm)
    }

    /// Expected surviving count, a scalar node.
    pub fn expected_kept<R: Real>(&self, g: &mut Graph<R>, keeps: &Keeps) -> Result<Var> {
        let c = &self.config;
        let dh = c.head_dim() as f64;
        let n = self.seq_len as f64;
        let classes = c.num_classes as f64;
        let sm = g.sum(keeps.width)?;

        // embeddings, final norm, classifier
        let mut total = match self.metric {
            Metric::Parameters => g.scale(sm, (c.vocab_size + c.max_seq + 2) as f64 + classes)?,
            Metric::Flops => g.scale(sm, n + 1.0 + 2.0 * classes)?,
        };
        for lk in &keeps.layers {
            let ska = g.sum(lk.heads)?;
            let si = g.sum(lk.inter)?;
            let la = g.sum(lk.mha)?;
            let lf = g.sum(lk.ffn)?;
            let out_m = g.mul(lk.out, keeps.width)?;
            let kom = g.sum(out_m)?;
            let si_kom = g.mul(si, kom)?;
            let si_sm = g.mul(si, sm)?;

            let (per_head, attn_rest, ffn) = match self.metric {
                Metric::Parameters => {
                    // Q/K/V/O weights over kept width, Q/K/V biases
                    let per_head = g.scale(sm, 4.0 * dh)?;
                    let per_head = g.add_scalar(per_head, 3.0 * dh)?;
                    // ln1 weight+bias and W^O bias
                    let rest = g.scale(sm, 3.0)?;
                    // W_U + b_U + W_D + b_D + ln2
                    let a = g.add(si_sm, si)?;
                    let b = g.add(si_kom, kom)?;
                    let s2 = g.scale(sm, 2.0)?;
                    let ffn = g.add(a, b)?;
                    let ffn = g.add(ffn, s2)?;
                    (per_head, rest, ffn)
                }
                Metric::Flops => {
                    // projections in and out, biases, scores, softmax, context
                    let per_head = g.scale(sm, 8.0 * n * dh)?;
                    let per_head =
                        g.add_scalar(per_head, 3.0 * n * dh + 4.0 * n * n * dh + n * n)?;
                    // ln1, W^O bias, residual add
                    let rest = g.scale(sm, 3.0 * n)?;
                    // ln2; up-projection, its bias and GELU; down-projection;
                    // its bias and the residual add
                    let ln = g.scale(sm, n)?;
                    let up = g.scale(si_sm, 2.0 * n)?;
                    let up_b = g.scale(si, 2.0 * n)?;
                    let down = g.scale(si_kom, 2.0 * n)?;
                    let down_b = g.scale(kom, 2.0 * n)?;
                    let ffn = g.add(ln, up)?;
                    let ffn = g.add(ffn, up_b)?;
                    let ffn = g.add(ffn, down)?;
                    let ffn = g.add(ffn, down_b)?;
                    (per_head, rest, ffn)
                }
            };
            let heads = g.mul(ska, per_head)?;
            let attn = g.add(heads, attn_rest)?;
            let attn = g.mul(la, attn)?;
            let ffn = g.mul(lf, ffn)?;
            total = g.add(total, attn)?;
            total = g.add(total, ffn)?;
        }
        Ok(total)
    }

    /// `s_e = 1 − expected_kept / total_base`, a scalar node.
    pub fn sparsity<R: Real>(&self, g: &mut Graph<R>, keeps: &Keeps) -> Result<Var> {
        let kept = self.expected_kept(g, keeps)?;
        let ratio = g.scale(kept, -1.0 / self.total_base)?;
        g.add_scalar(ratio, 1.0)
    }
}
