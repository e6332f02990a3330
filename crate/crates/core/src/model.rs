//! Pre-norm transformer encoder with VIB gates at every structural site.
//!
//! Gate placement per layer `i`:
//! - `z_m` (one global gate over the hidden width) multiplies the embedding
//!   output, every layer-norm output that reads the residual stream, and
//!   every sub-layer output written back into it. A dropped width dimension
//!   is therefore identically zero in the residual stream and unread by
//!   every consumer.
//! - `z_a` scales each head's context vectors (one unit per head).
//! - `z_inter` scales the GELU activations of the FFN up-projection.
//! - `z_out` scales the FFN down-projection output.
//! - `z_layer_mha`, `z_layer_ffn` scale whole sub-layer outputs; they are
//!   sampled once per example rather than per token.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gates::{GateInit, SampleMode, Site, VibGate};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::Rng;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub causal: bool,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 16,
            max_seq: 16,
            width: 64,
            layers: 4,
            heads: 4,
            ffn_dim: 128,
            num_classes: 2,
            causal: false,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
            ("width", self.width),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("model.{name} must be at least 1")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::contract(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Parameter handles of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_w: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_w: ParamId,
    pub ln2_b: ParamId,
    pub wu: ParamId,
    pub bu: ParamId,
    pub wd: ParamId,
    pub bd: ParamId,
}

/// Gates of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGates {
    pub heads: VibGate,
    pub inter: VibGate,
    pub out: VibGate,
    pub layer_mha: VibGate,
    pub layer_ffn: VibGate,
}

impl LayerGates {
    pub fn iter(&self) -> impl Iterator<Item = &VibGate> {
        [
            &self.heads,
            &self.inter,
            &self.out,
            &self.layer_mha,
            &self.layer_ffn,
        ]
        .into_iter()
    }
}

/// Every gate of a student model.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSet {
    pub embedding: VibGate,
    pub layers: Vec<LayerGates>,
    /// Hard-mask threshold τ on `log α`.
    pub tau: f64,
    /// Set by binarization: gates contribute the constant `μ ⊙ hard_mask`.
    pub binarized: bool,
}

impl GateSet {
    pub fn iter(&self) -> impl Iterator<Item = &VibGate> {
        core::iter::once(&self.embedding).chain(self.layers.iter().flat_map(|l| l.iter()))
    }

    pub fn total_units(&self) -> usize {
        self.iter().map(|g| g.unit_count).sum()
    }
}

/// Gate strengths β per site. A site without an explicit value uses
/// `global / unit_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Betas {
    pub global: f64,
    pub per_site: [Option<f64>; 6],
}

impl Default for Betas {
    fn default() -> Self {
        Betas {
            global: 1e-3,
            per_site: [None; 6],
        }
    }
}

impl Betas {
    pub fn zero() -> Self {
        Betas {
            global: 0.0,
            per_site: [None; 6],
        }
    }

    pub fn for_gate(&self, site: Site, unit_count: usize) -> f64 {
        self.per_site[site.ordinal()].unwrap_or(self.global / unit_count as f64)
    }
}

/// Forward semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Stochastic gates (per sample and token; per sample for layer gates)
    /// and dropout.
    Train,
    /// Gates at `μ ⊙ hard_mask`.
    Eval,
    /// Gates at `μ`, no thresholding.
    Mean,
}

/// A batch of equal-length token sequences, row-major `(batch, seq)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl Tokens {
    pub fn from_rows<T: Copy + Into<usize>>(rows: &[&[T]]) -> Result<Self> {
        let seq = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Data("token rows have different lengths".into()));
        }
        let ids = rows
            .iter()
            .flat_map(|r| r.iter().map(|&t| t.into()))
            .collect();
        Ok(Tokens {
            ids,
            batch: rows.len(),
            seq,
        })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `(batch, classes)`
    pub logits: Var,
    /// Residual stream after each layer's FFN, `(batch, seq, width)`.
    pub hidden_states: Vec<Var>,
    /// Per layer, per head: `(batch, seq, seq)` attention probabilities.
    pub attention_probs: Vec<Vec<Var>>,
    pub embedding_output: Var,
}

/// Transformer whose activations are multiplied by VIB gates. Without a
/// [`GateSet`] it is the plain (teacher) network.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedTransformer<R = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<R>,
    pub emb_tok: ParamId,
    pub emb_pos: ParamId,
    pub layers: Vec<LayerParams>,
    pub ln_f_w: ParamId,
    pub ln_f_b: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    pub gates: Option<GateSet>,
}

const INIT_STD: f64 = 0.02;

fn normal_tensor<R: Real>(shape: &[usize], rng: &mut Rng) -> Tensor<R> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| R::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

impl<R: Real> GatedTransformer<R> {
    /// Ungated network with N(0, 0.02²) weights, zero biases and unit
    /// layer-norm scales.
    pub fn build_teacher(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, r) = (config.width, config.ffn_dim);
        let emb_tok = p.insert("emb.tok", normal_tensor(&[config.vocab_size, d], &mut rng))?;
        let emb_pos = p.insert("emb.pos", normal_tensor(&[config.max_seq, d], &mut rng))?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let mut lin = |p: &mut ParamStore<R>,
                           name: &str,
                           rows: usize,
                           cols: usize|
             -> Result<(ParamId, ParamId)> {
                let w = p.insert(
                    format!("layer.{i}.{name}.weight"),
                    normal_tensor(&[rows, cols], &mut rng),
                )?;
                let b = p.insert(format!("layer.{i}.{name}.bias"), Tensor::zeros(&[cols]))?;
                Ok((w, b))
            };
            let ln = |p: &mut ParamStore<R>, name: &str| -> Result<(ParamId, ParamId)> {
                let w = p.insert(
                    format!("layer.{i}.{name}.weight"),
                    Tensor::full(&[d], R::one()),
                )?;
                let b = p.insert(format!("layer.{i}.{name}.bias"), Tensor::zeros(&[d]))?;
                Ok((w, b))
            };
            let (ln1_w, ln1_b) = ln(&mut p, "ln1")?;
            let (wq, bq) = lin(&mut p, "wq", d, d)?;
            let (wk, bk) = lin(&mut p, "wk", d, d)?;
            let (wv, bv) = lin(&mut p, "wv", d, d)?;
            let (wo, bo) = lin(&mut p, "wo", d, d)?;
            let (ln2_w, ln2_b) = ln(&mut p, "ln2")?;
            let (wu, bu) = lin(&mut p, "wu", d, r)?;
            let (wd, bd) = lin(&mut p, "wd", r, d)?;
            layers.push(LayerParams {
                ln1_w,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_w,
                ln2_b,
                wu,
                bu,
                wd,
                bd,
            });
        }
        let ln_f_w = p.insert("ln_f.weight", Tensor::full(&[d], R::one()))?;
        let ln_f_b = p.insert("ln_f.bias", Tensor::zeros(&[d]))?;
        let cls_w = p.insert(
            "cls.weight",
            normal_tensor(&[d, config.num_classes], &mut rng),
        )?;
        let cls_b = p.insert("cls.bias", Tensor::zeros(&[config.num_classes]))?;
        Ok(GatedTransformer {
            config: config.clone(),
            params: p,
            emb_tok,
            emb_pos,
            layers,
            ln_f_w,
            ln_f_b,
            cls_w,
            cls_b,
            gates: None,
        })
    }

    /// Rebuilds an ungated network around an existing store, looking every
    /// tensor up by name and checking its shape. Gates can be re-attached
    /// afterwards with [`bind_gates`](Self::bind_gates).
    pub fn from_params(config: &ModelConfig, params: ParamStore<R>) -> Result<Self> {
        config.validate()?;
        let (d, r, c) = (config.width, config.ffn_dim, config.num_classes);
        let find = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| Error::contract(format!("missing tensor {name}")))?;
            if params.get(id).shape() != shape {
                return Err(Error::shape(
                    "from_params",
                    format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        params.get(id).shape()
                    ),
                ));
            }
            Ok(id)
        };
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let n = |s: &str| format!("layer.{i}.{s}");
            layers.push(LayerParams {
                ln1_w: find(&n("ln1.weight"), &[d])?,
                ln1_b: find(&n("ln1.bias"), &[d])?,
                wq: find(&n("wq.weight"), &[d, d])?,
                bq: find(&n("wq.bias"), &[d])?,
                wk: find(&n("wk.weight"), &[d, d])?,
                bk: find(&n("wk.bias"), &[d])?,
                wv: find(&n("wv.weight"), &[d, d])?,
                bv: find(&n("wv.bias"), &[d])?,
                wo: find(&n("wo.weight"), &[d, d])?,
                bo: find(&n("wo.bias"), &[d])?,
                ln2_w: find(&n("ln2.weight"), &[d])?,
                ln2_b: find(&n("ln2.bias"), &[d])?,
                wu: find(&n("wu.weight"), &[d, r])?,
                bu: find(&n("wu.bias"), &[r])?,
                wd: find(&n("wd.weight"), &[r, d])?,
                bd: find(&n("wd.bias"), &[d])?,
            });
        }
        Ok(GatedTransformer {
            config: config.clone(),
            emb_tok: find("emb.tok", &[config.vocab_size, d])?,
            emb_pos: find("emb.pos", &[config.max_seq, d])?,
            layers,
            ln_f_w: find("ln_f.weight", &[d])?,
            ln_f_b: find("ln_f.bias", &[d])?,
            cls_w: find("cls.weight", &[d, c])?,
            cls_b: find("cls.bias", &[c])?,
            params,
            gates: None,
        })
    }

    /// Deep copy of `teacher` with fresh gates at every site.
    pub fn build_student(teacher: &Self, init: &GateInit, betas: &Betas) -> Result<Self> {
        init.validate()?;
        let mut student = teacher.clone();
        student.gates = None;
        student.attach_gates(init, betas)?;
        Ok(student)
    }

    fn attach_gates(&mut self, init: &GateInit, betas: &Betas) -> Result<()> {
        let c = self.config.clone();
        let mut ordinal = 0u64;
        let mut next = |store: &mut ParamStore<R>, site: Site, index: usize, units: usize| {
            let seed = init.seed ^ (ordinal.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            ordinal += 1;
            let gi = GateInit { seed, ..*init };
            VibGate::new(store, site, index, units, betas.for_gate(site, units), &gi)
        };
        let p = &mut self.params;
        let embedding = next(p, Site::EmbeddingWidth, 0, c.width)?;
        let mut layers = Vec::with_capacity(c.layers);
        for i in 0..c.layers {
            layers.push(LayerGates {
                heads: next(p, Site::Heads, i, c.heads)?,
                inter: next(p, Site::FfnIntermediate, i, c.ffn_dim)?,
                out: next(p, Site::FfnOutput, i, c.width)?,
                layer_mha: next(p, Site::LayerMha, i, 1)?,
                layer_ffn: next(p, Site::LayerFfn, i, 1)?,
            });
        }
        self.gates = Some(GateSet {
            embedding,
            layers,
            tau: 0.0,
            binarized: false,
        });
        Ok(())
    }

    /// Re-attaches gate handles to parameters already present in the store
    /// (used when loading a student checkpoint).
    pub fn bind_gates(&mut self, betas: &Betas, tau: f64, binarized: bool) -> Result<()> {
        let c = self.config.clone();
        let find = |p: &ParamStore<R>, site: Site, index: usize, units: usize| -> Result<VibGate> {
            let mu_name = VibGate::param_name(site, index, "mu");
            let ls_name = VibGate::param_name(site, index, "log_sigma");
            let mu = p
                .id(&mu_name)
                .ok_or_else(|| Error::contract(format!("missing {mu_name}")))?;
            let ls = p
                .id(&ls_name)
                .ok_or_else(|| Error::contract(format!("missing {ls_name}")))?;
            if p.get(mu).shape() != [units] || p.get(ls).shape() != [units] {
                return Err(Error::shape(
                    "bind_gates",
                    format!("{mu_name} must have {units} units"),
                ));
            }
            Ok(VibGate {
                site,
                index,
                unit_count: units,
                beta: betas.for_gate(site, units),
                mu,
                log_sigma: ls,
            })
        };
        let p = &self.params;
        let embedding = find(p, Site::EmbeddingWidth, 0, c.width)?;
        let mut layers = Vec::with_capacity(c.layers);
        for i in 0..c.layers {
            layers.push(LayerGates {
                heads: find(p, Site::Heads, i, c.heads)?,
                inter: find(p, Site::FfnIntermediate, i, c.ffn_dim)?,
                out: find(p, Site::FfnOutput, i, c.width)?,
                layer_mha: find(p, Site::LayerMha, i, 1)?,
                layer_ffn: find(p, Site::LayerFfn, i, 1)?,
            });
        }
        self.gates = Some(GateSet {
            embedding,
            layers,
            tau,
            binarized,
        });
        if binarized {
            self.freeze_gates();
        }
        Ok(())
    }

    pub(crate) fn freeze_gates(&mut self) {
        if let Some(gs) = &self.gates {
            let ids: Vec<ParamId> = gs.iter().flat_map(|g| [g.mu, g.log_sigma]).collect();
            for id in ids {
                self.params.set_requires_grad(id, false);
            }
        }
    }

    pub fn gates(&self) -> Option<&GateSet> {
        self.gates.as_ref()
    }

    pub fn set_tau(&mut self, tau: f64) {
        if let Some(g) = &mut self.gates {
            g.tau = tau;
        }
    }

    pub fn is_binarized(&self) -> bool {
        self.gates.as_ref().is_some_and(|g| g.binarized)
    }

    /// Converts parameters to another element type.
    pub fn cast<S: Real>(&self) -> GatedTransformer<S> {
        GatedTransformer {
            config: self.config.clone(),
            params: self.params.cast(),
            emb_tok: self.emb_tok,
            emb_pos: self.emb_pos,
            layers: self.layers.clone(),
            ln_f_w: self.ln_f_w,
            ln_f_b: self.ln_f_b,
            cls_w: self.cls_w,
            cls_b: self.cls_b,
            gates: self.gates.clone(),
        }
    }

    /// Names of every tensor that belongs to the network proper (weights,
    /// biases, norms, embeddings), excluding gates and auxiliaries.
    pub fn weight_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.emb_tok, self.emb_pos];
        for l in &self.layers {
            ids.extend([
                l.ln1_w, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_w, l.ln2_b,
                l.wu, l.bu, l.wd, l.bd,
            ]);
        }
        ids.extend([self.ln_f_w, self.ln_f_b, self.cls_w, self.cls_b]);
        ids
    }

    // ----- forward ---------------------------------------------------

    fn gate_value(
        &self,
        g: &mut Graph<R>,
        gate: &VibGate,
        mode: Mode,
        noise_shape: &[usize],
        rng: &mut Rng,
    ) -> Result<Var> {
        let gs = self.gates.as_ref().expect("gate_value on gated model");
        let mode = if gs.binarized { Mode::Eval } else { mode };
        match mode {
            Mode::Train => {
                let eps = gate.draw_noise(noise_shape, rng)?;
                gate.sample_mask(g, &self.params, &eps, SampleMode::Stochastic)
            }
            Mode::Mean => Ok(g.param(&self.params, gate.mu)),
            Mode::Eval => {
                let mu = g.param(&self.params, gate.mu);
                let hard: Vec<R> = gate
                    .hard_mask(&self.params, gs.tau)
                    .into_iter()
                    .map(|k| if k { R::one() } else { R::zero() })
                    .collect();
                let hard = g.constant(Tensor::new(&[gate.unit_count], hard)?)?;
                g.mul(mu, hard)
            }
        }
    }

    fn gated(&self, g: &mut Graph<R>, x: Var, z: Option<Var>) -> Result<Var> {
        match z {
            Some(z) => g.mul(x, z),
            None => Ok(x),
        }
    }

    fn dropout(&self, g: &mut Graph<R>, x: Var, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let p = self.config.dropout;
        if mode != Mode::Train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<R> = (0..n)
            .map(|_| R::from_f64(if rng.random::<f64>() < p { 0.0 } else { keep }))
            .collect();
        let m = g.constant(Tensor::new(&shape, mask)?)?;
        g.mul(x, m)
    }

    fn norm_affine(&self, g: &mut Graph<R>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let n = g.layer_norm_lastdim(x)?;
        let w = g.param(&self.params, w);
        let b = g.param(&self.params, b);
        let y = g.mul(n, w)?;
        g.add(y, b)
    }

    fn linear(&self, g: &mut Graph<R>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = g.param(&self.params, w);
        let b = g.param(&self.params, b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    /// Runs the network on `tokens`, recording into `g`.
    pub fn forward(
        &self,
        g: &mut Graph<R>,
        tokens: &Tokens,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ForwardTrace> {
        let c = &self.config;
        let (bsz, seq) = (tokens.batch, tokens.seq);
        if seq == 0 || bsz == 0 {
            return Err(Error::Data("empty token batch".into()));
        }
        if seq > c.max_seq {
            return Err(Error::Data(format!(
                "sequence length {seq} exceeds max_seq {}",
                c.max_seq
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} >= vocab size {}",
                c.vocab_size
            )));
        }
        let (d, nh, dh) = (c.width, c.heads, c.head_dim());
        let gates = self.gates.as_ref();

        let tok_table = g.param(&self.params, self.emb_tok);
        let pos_table = g.param(&self.params, self.emb_pos);
        let tok = g.gather_rows(tok_table, &tokens.ids, &[bsz, seq])?;
        let positions: Vec<usize> = (0..seq).collect();
        let pos = g.gather_rows(pos_table, &positions, &[seq])?;
        let x = g.add(tok, pos)?;

        let zm = match gates {
            Some(gs) => Some(self.gate_value(g, &gs.embedding, mode, &[bsz, seq, d], rng)?),
            None => None,
        };
        let mut x = self.gated(g, x, zm)?;
        let embedding_output = x;

        let mut hidden_states = Vec::with_capacity(c.layers);
        let mut attention_probs = Vec::with_capacity(c.layers);
        let scale = 1.0 / libm::sqrt(dh as f64);
        for (i, lp) in self.layers.iter().enumerate() {
            let lg = gates.map(|gs| &gs.layers[i]);

            // attention sub-layer
            let h = self.norm_affine(g, x, lp.ln1_w, lp.ln1_b)?;
            let h = self.gated(g, h, zm)?;
            let q = self.linear(g, h, lp.wq, lp.bq)?;
            let k = self.linear(g, h, lp.wk, lp.bk)?;
            let v = self.linear(g, h, lp.wv, lp.bv)?;
            let za = match lg {
                Some(lg) => Some(self.gate_value(g, &lg.heads, mode, &[bsz, seq, nh], rng)?),
                None => None,
            };
            let mut ctxs = Vec::with_capacity(nh);
            let mut probs = Vec::with_capacity(nh);
            for hd in 0..nh {
                let qh = g.slice_lastdim(q, hd * dh, dh)?;
                let kh = g.slice_lastdim(k, hd * dh, dh)?;
                let vh = g.slice_lastdim(v, hd * dh, dh)?;
                let kt = g.transpose_last2(kh)?;
                let s = g.matmul(qh, kt)?;
                let s = g.scale(s, scale)?;
                let s = if c.causal { g.causal_mask_fill(s)? } else { s };
                let p = g.softmax_lastdim(s)?;
                probs.push(p);
                let ctx = g.matmul(p, vh)?;
                let ctx = match za {
                    Some(za) => {
                        let zh = g.slice_lastdim(za, hd, 1)?;
                        g.mul(ctx, zh)?
                    }
                    None => ctx,
                };
                ctxs.push(ctx);
            }
            attention_probs.push(probs);
            let a = g.concat_lastdim(&ctxs)?;
            let mha = self.linear(g, a, lp.wo, lp.bo)?;
            let zl = match lg {
                Some(lg) => Some(self.gate_value(g, &lg.layer_mha, mode, &[bsz, 1, 1], rng)?),
                None => None,
            };
            let mha = self.gated(g, mha, zl)?;
            let mha = self.dropout(g, mha, mode, rng)?;
            let mha = self.gated(g, mha, zm)?;
            x = g.add(x, mha)?;

            // feed-forward sub-layer
            let h = self.norm_affine(g, x, lp.ln2_w, lp.ln2_b)?;
            let h = self.gated(g, h, zm)?;
            let u = self.linear(g, h, lp.wu, lp.bu)?;
            let u = g.gelu(u)?;
            let zi = match lg {
                Some(lg) => {
                    Some(self.gate_value(g, &lg.inter, mode, &[bsz, seq, c.ffn_dim], rng)?)
                }
                None => None,
            };
            let u = self.gated(g, u, zi)?;
            let f = self.linear(g, u, lp.wd, lp.bd)?;
            let zo = match lg {
                Some(lg) => Some(self.gate_value(g, &lg.out, mode, &[bsz, seq, d], rng)?),
                None => None,
            };
            let f = self.gated(g, f, zo)?;
            let zl = match lg {
                Some(lg) => Some(self.gate_value(g, &lg.layer_ffn, mode, &[bsz, 1, 1], rng)?),
                None => None,
            };
            let f = self.gated(g, f, zl)?;
            let f = self.dropout(g, f, mode, rng)?;
            let f = self.gated(g, f, zm)?;
            x = g.add(x, f)?;
            hidden_states.push(x);
        }

        let h = self.norm_affine(g, x, self.ln_f_w, self.ln_f_b)?;
        let h = self.gated(g, h, zm)?;
        // pool the first token (bidirectional) or the last one (causal)
        let pos = if c.causal { seq - 1 } else { 0 };
        let ht = g.transpose_last2(h)?;
        let pooled = g.slice_lastdim(ht, pos, 1)?;
        let pooled = g.reshape(pooled, &[bsz, d])?;
        let logits = self.linear(g, pooled, self.cls_w, self.cls_b)?;
        Ok(ForwardTrace {
            logits,
            hidden_states,
            attention_probs,
            embedding_output,
        })
    }

    /// Forward pass without gradient bookkeeping; returns logits `(batch, C)`.
    pub fn logits(&self, tokens: &Tokens, mode: Mode, rng: &mut Rng) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        let t = self.forward(&mut g, tokens, mode, rng)?;
        Ok(g.value(t.logits).clone())
    }

    /// Attention probabilities of an eval-mode forward, per layer as
    /// `(batch, heads, seq, seq)`.
    pub fn attention_maps(&self, tokens: &Tokens) -> Result<Vec<Tensor<R>>> {
        let mut g = Graph::new();
        let mut rng = Rng::seed_from_u64(0);
        let t = self.forward(&mut g, tokens, Mode::Eval, &mut rng)?;
        let (b, s, nh) = (tokens.batch, tokens.seq, self.config.heads);
        t.attention_probs
            .iter()
            .map(|heads| {
                let mut out = vec![R::zero(); b * nh * s * s];
                for (h, &p) in heads.iter().enumerate() {
                    let pv = g.value(p).data();
                    for bi in 0..b {
                        let dst = (bi * nh + h) * s * s;
                        out[dst..dst + s * s].copy_from_slice(&pv[bi * s * s..(bi + 1) * s * s]);
                    }
                }
                Tensor::new(&[b, nh, s, s], out)
            })
            .collect()
    }

    /// Human-readable summary of the gate state, one line per gate.
    pub fn describe_gates(&self) -> String {
        let mut s = String::new();
        if let Some(gs) = &self.gates {
            for gate in gs.iter() {
                let kept = gate
                    .hard_mask(&self.params, gs.tau)
                    .iter()
                    .filter(|&&k| k)
                    .count();
                s.push_str(&format!(
                    "{}.{}: {}/{} kept\n",
                    gate.site, gate.index, kept, gate.unit_count
                ));
            }
        }
        s
    }
}

/// Mean cross-entropy of `(batch, C)` logits against integer labels.
pub fn cross_entropy<R: Real>(g: &mut Graph<R>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {shape:?} vs {} labels", labels.len()),
        ));
    }
    let classes = shape[1];
    let mut onehot = vec![R::zero(); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Data(format!(
                "label {y} >= number of classes {classes}"
            )));
        }
        onehot[i * classes + y] = R::one();
    }
    let oh = g.constant(Tensor::new(&shape, onehot)?)?;
    let lp = g.log_softmax_lastdim(logits)?;
    let picked = g.mul(lp, oh)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0 / labels.len() as f64)
}

/// Index of the largest logit in each row.
pub fn argmax_rows<R: Real>(logits: &Tensor<R>) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, R::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            max_seq: 6,
            width: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 12,
            num_classes: 3,
            causal: false,
            dropout: 0.0,
        }
    }

    fn batch() -> Tokens {
        Tokens {
            ids: vec![0, 3, 2, 6, 1, 1, 5, 4, 2, 0],
            batch: 2,
            seq: 5,
        }
    }

    #[test]
    fn invalid_config_is_contract_error() {
        let mut c = tiny();
        c.heads = 3;
        assert!(matches!(
            GatedTransformer::<f32>::build_teacher(&c, 0),
            Err(Error::Contract(_))
        ));
        c.heads = 2;
        c.layers = 0;
        assert!(matches!(
            GatedTransformer::<f32>::build_teacher(&c, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn teacher_is_deterministic_and_finite() {
        let a = GatedTransformer::<f32>::build_teacher(&tiny(), 5).unwrap();
        let b = GatedTransformer::<f32>::build_teacher(&tiny(), 5).unwrap();
        assert_eq!(a.params, b.params);
        let mut rng = Rng::seed_from_u64(0);
        let l = a.logits(&batch(), Mode::Eval, &mut rng).unwrap();
        assert!(l.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn student_gate_layout() {
        let cfg = ModelConfig {
            width: 32,
            layers: 2,
            heads: 4,
            ffn_dim: 64,
            ..tiny()
        };
        let t = GatedTransformer::<f32>::build_teacher(&cfg, 0).unwrap();
        let s =
            GatedTransformer::build_student(&t, &GateInit::default(), &Betas::default()).unwrap();
        let gs = s.gates().unwrap();
        assert_eq!(gs.iter().count(), 11);
        assert_eq!(gs.total_units(), 236);
    }

    #[test]
    fn out_of_vocab_token_is_data_error() {
        let t = GatedTransformer::<f32>::build_teacher(&tiny(), 0).unwrap();
        let bad = Tokens {
            ids: vec![0, 7],
            batch: 1,
            seq: 2,
        };
        let mut rng = Rng::seed_from_u64(0);
        assert!(matches!(
            t.logits(&bad, Mode::Eval, &mut rng),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[2, 4])).unwrap();
        let ce = cross_entropy(&mut g, l, &[1, 3]).unwrap();
        assert!((g.scalar(ce) - (4.0f64).ln()).abs() < 1e-12);
    }
}
