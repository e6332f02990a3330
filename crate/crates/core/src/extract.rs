//! Physical removal of masked units, and exact parameter / FLOP counts of
//! the resulting dense model.
//!
//! Gate values are folded into the weights that produce the gated
//! activation, so the dense model computes the same function as the eval
//! forward of the gated one:
//! - width gate: embedding columns, every norm's weight and bias, output
//!   columns and bias of `W^O` and `W_D`;
//! - head gate: rows of `W^O` belonging to the head;
//! - intermediate gate: rows of `W_D`;
//! - FFN output gate and layer gates: columns and bias of `W_D` / `W^O`.
//!
//! Dropped width dimensions are identically zero in the gated model's
//! residual stream. The dense layer norm therefore keeps the original width
//! as its divisor and treats the missing entries as zeros.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{GatedTransformer, Tokens};
use crate::tensor::kernels::{gelu, layer_norm_rows, softmax_rows, MASK_FILL};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseAttention<R = f32> {
    pub ln_w: Tensor<R>,
    pub ln_b: Tensor<R>,
    /// `d' × J'·d_h`
    pub wq: Tensor<R>,
    pub bq: Tensor<R>,
    pub wk: Tensor<R>,
    pub bk: Tensor<R>,
    pub wv: Tensor<R>,
    pub bv: Tensor<R>,
    /// `J'·d_h × d'`
    pub wo: Tensor<R>,
    pub bo: Tensor<R>,
    /// Original indices of the kept heads.
    pub head_index: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseFfn<R = f32> {
    pub ln_w: Tensor<R>,
    pub ln_b: Tensor<R>,
    /// `d' × r'`
    pub wu: Tensor<R>,
    pub bu: Tensor<R>,
    /// `r' × o'`
    pub wd: Tensor<R>,
    pub bd: Tensor<R>,
    /// Position in the kept width of each output column.
    pub out_index: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<R = f32> {
    /// Layer index in the model this one was extracted from.
    pub source: usize,
    pub attn: Option<DenseAttention<R>>,
    pub ffn: Option<DenseFfn<R>>,
}

/// Gate-free transformer with reduced dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel<R = f32> {
    /// Width of the model before extraction (layer-norm divisor).
    pub full_width: usize,
    pub full_heads: usize,
    pub full_ffn_dim: usize,
    pub head_dim: usize,
    pub causal: bool,
    /// Number of layers of the source model.
    pub source_layers: usize,
    /// Original indices of the kept width dimensions.
    pub width_index: Vec<usize>,
    /// `V × d'`
    pub emb_tok: Tensor<R>,
    /// `P × d'`
    pub emb_pos: Tensor<R>,
    pub layers: Vec<DenseLayer<R>>,
    pub ln_f_w: Tensor<R>,
    pub ln_f_b: Tensor<R>,
    /// `d' × C`
    pub cls_w: Tensor<R>,
    pub cls_b: Tensor<R>,
}

/// Effective gate constants `μ ⊙ hard_mask` of a model (ones when ungated).
struct Consts {
    width: Vec<f64>,
    /// heads, inter, out, mha, ffn
    layers: Vec<[Vec<f64>; 5]>,
}

fn consts<R: Real>(model: &GatedTransformer<R>) -> Consts {
    let c = &model.config;
    match model.gates() {
        None => Consts {
            width: vec![1.0; c.width],
            layers: (0..c.layers)
                .map(|_| {
                    [
                        vec![1.0; c.heads],
                        vec![1.0; c.ffn_dim],
                        vec![1.0; c.width],
                        vec![1.0],
                        vec![1.0],
                    ]
                })
                .collect(),
        },
        Some(gs) => {
            let p = &model.params;
            let v = |g: &crate::gates::VibGate| g.binary_value(p, gs.tau);
            Consts {
                width: v(&gs.embedding),
                layers: gs
                    .layers
                    .iter()
                    .map(|l| {
                        [
                            v(&l.heads),
                            v(&l.inter),
                            v(&l.out),
                            v(&l.layer_mha),
                            v(&l.layer_ffn),
                        ]
                    })
                    .collect(),
            }
        }
    }
}

/// Indices and values of the nonzero entries.
fn kept(values: &[f64]) -> Vec<(usize, f64)> {
    values
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, v)| v != 0.0)
        .collect()
}

/// `w[rows, cols]` with each entry scaled by its row and column factors.
fn select<R: Real>(w: &Tensor<R>, rows: &[(usize, f64)], cols: &[(usize, f64)]) -> Tensor<R> {
    let n = w.shape()[1];
    let data = rows
        .iter()
        .flat_map(|&(r, rs)| {
            cols.iter()
                .map(move |&(c, cs)| R::from_f64(w.data()[r * n + c].as_f64() * rs * cs))
        })
        .collect();
    Tensor::new(&[rows.len(), cols.len()], data).expect("sizes match")
}

fn select_vec<R: Real>(v: &Tensor<R>, idx: &[(usize, f64)]) -> Tensor<R> {
    let data = idx
        .iter()
        .map(|&(i, s)| R::from_f64(v.data()[i].as_f64() * s))
        .collect();
    Tensor::new(&[idx.len()], data).expect("sizes match")
}

fn ones(n: usize) -> Vec<(usize, f64)> {
    (0..n).map(|i| (i, 1.0)).collect()
}

/// Builds the dense model computing the eval forward of `model` (gates at
/// `μ ⊙ hard_mask`). An ungated model extracts to itself.
pub fn extract_dense<R: Real>(model: &GatedTransformer<R>) -> Result<DenseModel<R>> {
    let cfg = &model.config;
    let p = &model.params;
    let k = consts(model);
    let width = kept(&k.width);
    if width.is_empty() {
        return Err(Error::DegenerateModel(
            "every width dimension is masked".into(),
        ));
    }
    let dh = cfg.head_dim();
    let (v_all, p_all) = (ones(cfg.vocab_size), ones(cfg.max_seq));
    let plain_width: Vec<(usize, f64)> = width.iter().map(|&(j, _)| (j, 1.0)).collect();

    let mut layers = Vec::new();
    for (i, (lp, [heads, inter, out, mha, ffn])) in model.layers.iter().zip(&k.layers).enumerate() {
        let attn = if mha[0] == 0.0 {
            None
        } else {
            let heads = kept(heads);
            let cols: Vec<(usize, f64)> = heads
                .iter()
                .flat_map(|&(h, _)| (h * dh..(h + 1) * dh).map(|c| (c, 1.0)))
                .collect();
            let wo_rows: Vec<(usize, f64)> = heads
                .iter()
                .flat_map(|&(h, s)| (h * dh..(h + 1) * dh).map(move |r| (r, s)))
                .collect();
            let out_cols: Vec<(usize, f64)> = width.iter().map(|&(j, s)| (j, s * mha[0])).collect();
            Some(DenseAttention {
                ln_w: select_vec(p.get(lp.ln1_w), &width),
                ln_b: select_vec(p.get(lp.ln1_b), &width),
                wq: select(p.get(lp.wq), &plain_width, &cols),
                bq: select_vec(p.get(lp.bq), &cols),
                wk: select(p.get(lp.wk), &plain_width, &cols),
                bk: select_vec(p.get(lp.bk), &cols),
                wv: select(p.get(lp.wv), &plain_width, &cols),
                bv: select_vec(p.get(lp.bv), &cols),
                wo: select(p.get(lp.wo), &wo_rows, &out_cols),
                bo: select_vec(p.get(lp.bo), &out_cols),
                head_index: heads.iter().map(|&(h, _)| h).collect(),
            })
        };
        let ffn = if ffn[0] == 0.0 {
            None
        } else {
            let inter = kept(inter);
            let plain_inter: Vec<(usize, f64)> = inter.iter().map(|&(r, _)| (r, 1.0)).collect();
            let mut out_cols = Vec::new();
            let mut out_index = Vec::new();
            for (pos, &(j, s)) in width.iter().enumerate() {
                if out[j] != 0.0 {
                    out_cols.push((j, s * out[j] * ffn[0]));
                    out_index.push(pos);
                }
            }
            Some(DenseFfn {
                ln_w: select_vec(p.get(lp.ln2_w), &width),
                ln_b: select_vec(p.get(lp.ln2_b), &width),
                wu: select(p.get(lp.wu), &plain_width, &plain_inter),
                bu: select_vec(p.get(lp.bu), &plain_inter),
                wd: select(p.get(lp.wd), &inter, &out_cols),
                bd: select_vec(p.get(lp.bd), &out_cols),
                out_index,
            })
        };
        if attn.is_some() || ffn.is_some() {
            layers.push(DenseLayer {
                source: i,
                attn,
                ffn,
            });
        }
    }
    if layers.is_empty() {
        return Err(Error::DegenerateModel("every layer is masked".into()));
    }

    let tok_cols: Vec<(usize, f64)> = width.clone();
    Ok(DenseModel {
        full_width: cfg.width,
        full_heads: cfg.heads,
        full_ffn_dim: cfg.ffn_dim,
        head_dim: dh,
        causal: cfg.causal,
        source_layers: cfg.layers,
        width_index: width.iter().map(|&(j, _)| j).collect(),
        emb_tok: select(p.get(model.emb_tok), &v_all, &tok_cols),
        emb_pos: select(p.get(model.emb_pos), &p_all, &tok_cols),
        layers,
        ln_f_w: select_vec(p.get(model.ln_f_w), &width),
        ln_f_b: select_vec(p.get(model.ln_f_b), &width),
        cls_w: select(p.get(model.cls_w), &plain_width, &ones(cfg.num_classes)),
        cls_b: p.get(model.cls_b).clone(),
    })
}

fn add_bias<R: Real>(x: &mut [R], b: &[R]) {
    if b.is_empty() {
        return;
    }
    for row in x.chunks_mut(b.len()) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn matmul<R: Real>(x: &[R], w: &Tensor<R>, rows: usize) -> Vec<R> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![R::zero(); rows * n];
    R::gemm(rows, k, n, x, false, w.data(), false, &mut out, false);
    out
}

impl<R: Real> DenseModel<R> {
    pub fn width(&self) -> usize {
        self.width_index.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.emb_tok.shape()[0]
    }

    pub fn max_seq(&self) -> usize {
        self.emb_pos.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.cls_b.len()
    }

    /// Extracting an already dense model returns it unchanged.
    pub fn extract(&self) -> DenseModel<R> {
        self.clone()
    }

    fn norm(&self, x: &[R], w: &Tensor<R>, b: &Tensor<R>) -> Vec<R> {
        let d = self.width();
        let (mut y, _) = layer_norm_rows(x, d, self.full_width);
        for row in y.chunks_mut(d) {
            for ((v, &ww), &bb) in row.iter_mut().zip(w.data()).zip(b.data()) {
                *v = *v * ww + bb;
            }
        }
        y
    }

    /// Logits `(batch, C)`.
    pub fn forward(&self, tokens: &Tokens) -> Result<Tensor<R>> {
        let (bsz, n, d) = (tokens.batch, tokens.seq, self.width());
        if n == 0 || bsz == 0 {
            return Err(Error::Data("empty token batch".into()));
        }
        if n > self.max_seq() {
            return Err(Error::Data(format!(
                "sequence length {n} exceeds max_seq {}",
                self.max_seq()
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::Data(format!(
                "token id {bad} >= vocab size {}",
                self.vocab_size()
            )));
        }
        let rows = bsz * n;
        let dh = self.head_dim;
        let scale = R::from_f64(1.0 / libm::sqrt(dh as f64));
        let mut x = vec![R::zero(); rows * d];
        for (r, &id) in tokens.ids.iter().enumerate() {
            let t = r % n;
            for ((o, &a), &b) in x[r * d..(r + 1) * d]
                .iter_mut()
                .zip(self.emb_tok.row(id))
                .zip(self.emb_pos.row(t))
            {
                *o = a + b;
            }
        }

        for layer in &self.layers {
            if let Some(at) = &layer.attn {
                let h = self.norm(&x, &at.ln_w, &at.ln_b);
                let hw = at.head_index.len() * dh;
                let mut q = matmul(&h, &at.wq, rows);
                let mut k = matmul(&h, &at.wk, rows);
                let mut v = matmul(&h, &at.wv, rows);
                add_bias(&mut q, at.bq.data());
                add_bias(&mut k, at.bk.data());
                add_bias(&mut v, at.bv.data());
                let mut ctx = vec![R::zero(); rows * hw];
                let gather = |src: &[R], b: usize, hd: usize| -> Vec<R> {
                    (0..n)
                        .flat_map(|t| {
                            let off = (b * n + t) * hw + hd * dh;
                            src[off..off + dh].iter().copied()
                        })
                        .collect()
                };
                for b in 0..bsz {
                    for hd in 0..at.head_index.len() {
                        let (qh, kh, vh) =
                            (gather(&q, b, hd), gather(&k, b, hd), gather(&v, b, hd));
                        let mut s = vec![R::zero(); n * n];
                        R::gemm(n, dh, n, &qh, false, &kh, true, &mut s, false);
                        for (idx, sv) in s.iter_mut().enumerate() {
                            *sv *= scale;
                            if self.causal && idx % n > idx / n {
                                *sv = R::from_f64(MASK_FILL);
                            }
                        }
                        let pr = softmax_rows(&s, n);
                        let mut c = vec![R::zero(); n * dh];
                        R::gemm(n, n, dh, &pr, false, &vh, false, &mut c, false);
                        for t in 0..n {
                            let off = (b * n + t) * hw + hd * dh;
                            ctx[off..off + dh].copy_from_slice(&c[t * dh..(t + 1) * dh]);
                        }
                    }
                }
                let mut o = matmul(&ctx, &at.wo, rows);
                add_bias(&mut o, at.bo.data());
                for (xv, ov) in x.iter_mut().zip(&o) {
                    *xv += *ov;
                }
            }
            if let Some(ff) = &layer.ffn {
                let h = self.norm(&x, &ff.ln_w, &ff.ln_b);
                let mut u = matmul(&h, &ff.wu, rows);
                add_bias(&mut u, ff.bu.data());
                for uv in u.iter_mut() {
                    *uv = gelu(*uv);
                }
                let mut f = matmul(&u, &ff.wd, rows);
                add_bias(&mut f, ff.bd.data());
                let o = ff.out_index.len();
                for r in 0..rows {
                    for (c, &j) in ff.out_index.iter().enumerate() {
                        x[r * d + j] += f[r * o + c];
                    }
                }
            }
        }

        let pos = if self.causal { n - 1 } else { 0 };
        let pooled: Vec<R> = (0..bsz)
            .flat_map(|b| x[(b * n + pos) * d..(b * n + pos + 1) * d].iter().copied())
            .collect();
        let h = self.norm(&pooled, &self.ln_f_w, &self.ln_f_b);
        let mut logits = matmul(&h, &self.cls_w, bsz);
        add_bias(&mut logits, self.cls_b.data());
        Tensor::new(&[bsz, self.num_classes()], logits)
    }

    /// Number of stored weights, classifier bias excluded.
    pub fn param_count(&self) -> u64 {
        let mut n = self.emb_tok.len() + self.emb_pos.len();
        for l in &self.layers {
            if let Some(a) = &l.attn {
                n += [
                    &a.ln_w, &a.ln_b, &a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo,
                ]
                .iter()
                .map(|t| t.len())
                .sum::<usize>();
            }
            if let Some(f) = &l.ffn {
                n += [&f.ln_w, &f.ln_b, &f.wu, &f.bu, &f.wd, &f.bd]
                    .iter()
                    .map(|t| t.len())
                    .sum::<usize>();
            }
        }
        n += self.ln_f_w.len() + self.ln_f_b.len() + self.cls_w.len();
        n as u64
    }

    /// Operations of one forward pass over a sequence of `seq_len` tokens,
    /// enumerated layer by layer with the conventions of
    /// [`CountModel`](crate::objective::CountModel).
    pub fn flop_count(&self, seq_len: usize) -> u64 {
        let n = seq_len as u64;
        let d = self.width() as u64;
        let dh = self.head_dim as u64;
        let c = self.num_classes() as u64;
        // embedding add
        let mut f = n * d;
        for l in &self.layers {
            if let Some(a) = &l.attn {
                let hw = a.wq.shape()[1] as u64;
                let heads = a.head_index.len() as u64;
                f += n * d; // ln1
                f += 3 * (2 * n * d * hw + n * hw); // q, k, v with bias
                f += heads * (2 * n * n * dh + n * n + 2 * n * n * dh); // scores, softmax, context
                f += 2 * n * hw * d + n * d; // W^O with bias
                f += n * d; // residual
            }
            if let Some(ff) = &l.ffn {
                let r = ff.wu.shape()[1] as u64;
                let o = ff.out_index.len() as u64;
                f += n * d; // ln2
                f += 2 * n * d * r + n * r + n * r; // up-projection, bias, GELU
                f += 2 * n * r * o + n * o; // down-projection with bias
                f += n * o; // residual
            }
        }
        f + d + 2 * d * c
    }

    /// Named tensors of the model, including small metadata tensors under
    /// `meta.*`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<R>)> {
        let f = |v: &[usize]| {
            Tensor::new(
                &[v.len()],
                v.iter().map(|&x| R::from_f64(x as f64)).collect(),
            )
            .expect("1-d")
        };
        let mut out = vec![
            ("meta.full_width".into(), f(&[self.full_width])),
            ("meta.full_heads".into(), f(&[self.full_heads])),
            ("meta.full_ffn_dim".into(), f(&[self.full_ffn_dim])),
            ("meta.head_dim".into(), f(&[self.head_dim])),
            ("meta.causal".into(), f(&[self.causal as usize])),
            ("meta.source_layers".into(), f(&[self.source_layers])),
            ("meta.width_index".into(), f(&self.width_index)),
            ("emb.tok".into(), self.emb_tok.clone()),
            ("emb.pos".into(), self.emb_pos.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer.{i}.source"), f(&[l.source])));
            if let Some(a) = &l.attn {
                out.push((format!("layer.{i}.heads"), f(&a.head_index)));
                for (name, w, b) in [
                    ("ln1", &a.ln_w, &a.ln_b),
                    ("wq", &a.wq, &a.bq),
                    ("wk", &a.wk, &a.bk),
                    ("wv", &a.wv, &a.bv),
                    ("wo", &a.wo, &a.bo),
                ] {
                    out.push((format!("layer.{i}.{name}.weight"), w.clone()));
                    out.push((format!("layer.{i}.{name}.bias"), b.clone()));
                }
            }
            if let Some(ff) = &l.ffn {
                out.push((format!("layer.{i}.wd.out_index"), f(&ff.out_index)));
                for (name, w, b) in [
                    ("ln2", &ff.ln_w, &ff.ln_b),
                    ("wu", &ff.wu, &ff.bu),
                    ("wd", &ff.wd, &ff.bd),
                ] {
                    out.push((format!("layer.{i}.{name}.weight"), w.clone()));
                    out.push((format!("layer.{i}.{name}.bias"), b.clone()));
                }
            }
        }
        out.push(("ln_f.weight".into(), self.ln_f_w.clone()));
        out.push(("ln_f.bias".into(), self.ln_f_b.clone()));
        out.push(("cls.weight".into(), self.cls_w.clone()));
        out.push(("cls.bias".into(), self.cls_b.clone()));
        out
    }

    /// Inverse of [`named_tensors`](Self::named_tensors).
    pub fn from_named_tensors(tensors: &[(String, Tensor<R>)]) -> Result<Self> {
        let get = |name: &str| -> Result<&Tensor<R>> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::contract(format!("dense checkpoint is missing {name}")))
        };
        let has = |name: &str| tensors.iter().any(|(n, _)| n == name);
        let ints = |name: &str| -> Result<Vec<usize>> {
            Ok(get(name)?
                .data()
                .iter()
                .map(|v| v.as_f64() as usize)
                .collect())
        };
        let one = |name: &str| -> Result<usize> {
            ints(name)?
                .first()
                .copied()
                .ok_or_else(|| Error::contract(format!("{name} is empty")))
        };
        let mut layers = Vec::new();
        let mut i = 0;
        while has(&format!("layer.{i}.source")) {
            let t = |s: &str| get(&format!("layer.{i}.{s}")).cloned();
            let attn = if has(&format!("layer.{i}.heads")) {
                Some(DenseAttention {
                    ln_w: t("ln1.weight")?,
                    ln_b: t("ln1.bias")?,
                    wq: t("wq.weight")?,
                    bq: t("wq.bias")?,
                    wk: t("wk.weight")?,
                    bk: t("wk.bias")?,
                    wv: t("wv.weight")?,
                    bv: t("wv.bias")?,
                    wo: t("wo.weight")?,
                    bo: t("wo.bias")?,
                    head_index: ints(&format!("layer.{i}.heads"))?,
                })
            } else {
                None
            };
            let ffn = if has(&format!("layer.{i}.wd.out_index")) {
                Some(DenseFfn {
                    ln_w: t("ln2.weight")?,
                    ln_b: t("ln2.bias")?,
                    wu: t("wu.weight")?,
                    bu: t("wu.bias")?,
                    wd: t("wd.weight")?,
                    bd: t("wd.bias")?,
                    out_index: ints(&format!("layer.{i}.wd.out_index"))?,
                })
            } else {
                None
            };
            layers.push(DenseLayer {
                source: one(&format!("layer.{i}.source"))?,
                attn,
                ffn,
            });
            i += 1;
        }
        let m = DenseModel {
            full_width: one("meta.full_width")?,
            full_heads: one("meta.full_heads")?,
            full_ffn_dim: one("meta.full_ffn_dim")?,
            head_dim: one("meta.head_dim")?,
            causal: one("meta.causal")? != 0,
            source_layers: one("meta.source_layers")?,
            width_index: ints("meta.width_index")?,
            emb_tok: get("emb.tok")?.clone(),
            emb_pos: get("emb.pos")?.clone(),
            layers,
            ln_f_w: get("ln_f.weight")?.clone(),
            ln_f_b: get("ln_f.bias")?.clone(),
            cls_w: get("cls.weight")?.clone(),
            cls_b: get("cls.bias")?.clone(),
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let d = self.width();
        let bad = |what: &str| {
            Err(Error::shape(
                "dense model",
                format!("{what} does not match kept width {d}"),
            ))
        };
        if self.emb_tok.shape().len() != 2
            || self.emb_tok.shape()[1] != d
            || self.emb_pos.shape()[1] != d
        {
            return bad("embedding");
        }
        if self.cls_w.shape() != [d, self.num_classes()] || self.ln_f_w.len() != d {
            return bad("classifier");
        }
        for l in &self.layers {
            if let Some(a) = &l.attn {
                let hw = a.head_index.len() * self.head_dim;
                if a.wq.shape() != [d, hw] || a.wo.shape() != [hw, d] || a.bo.len() != d {
                    return bad("attention");
                }
            }
            if let Some(f) = &l.ffn {
                let r = f.bu.len();
                let o = f.out_index.len();
                if f.wu.shape() != [d, r]
                    || f.wd.shape() != [r, o]
                    || f.out_index.iter().any(|&j| j >= d)
                {
                    return bad("feed-forward");
                }
            }
        }
        Ok(())
    }
}

/// Kept-unit summary of a model: effective counts per original layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Survival {
    pub width: usize,
    pub full_width: usize,
    pub full_heads: usize,
    pub full_ffn_dim: usize,
    pub heads: Vec<usize>,
    pub inter: Vec<usize>,
    pub out: Vec<usize>,
    pub mha_alive: Vec<bool>,
    pub ffn_alive: Vec<bool>,
}

impl<R: Real> DenseModel<R> {
    pub fn survival(&self) -> Survival {
        let l = self.source_layers;
        let mut s = Survival {
            width: self.width(),
            full_width: self.full_width,
            full_heads: self.full_heads,
            full_ffn_dim: self.full_ffn_dim,
            heads: vec![0; l],
            inter: vec![0; l],
            out: vec![0; l],
            mha_alive: vec![false; l],
            ffn_alive: vec![false; l],
        };
        for layer in &self.layers {
            let i = layer.source;
            if let Some(a) = &layer.attn {
                s.heads[i] = a.head_index.len();
                s.mha_alive[i] = true;
            }
            if let Some(f) = &layer.ffn {
                s.inter[i] = f.bu.len();
                s.out[i] = f.out_index.len();
                s.ffn_alive[i] = true;
            }
        }
        s
    }
}

impl Survival {
    pub fn layer_alive(&self, i: usize) -> bool {
        self.mha_alive[i] || self.ffn_alive[i]
    }

    pub fn layers_alive(&self) -> usize {
        (0..self.mha_alive.len())
            .filter(|&i| self.layer_alive(i))
            .count()
    }
}

/// Survival read directly from the gates, with the same keep rules as
/// [`extract_dense`]. Unlike extraction it never fails, so fully masked
/// models report zeros.
pub fn gate_survival<R: Real>(model: &GatedTransformer<R>) -> Survival {
    let c = &model.config;
    let k = consts(model);
    let nz = |v: &[f64]| v.iter().filter(|&&x| x != 0.0).count();
    let mut s = Survival {
        width: nz(&k.width),
        full_width: c.width,
        full_heads: c.heads,
        full_ffn_dim: c.ffn_dim,
        heads: vec![0; c.layers],
        inter: vec![0; c.layers],
        out: vec![0; c.layers],
        mha_alive: vec![false; c.layers],
        ffn_alive: vec![false; c.layers],
    };
    if s.width == 0 {
        return s;
    }
    for (i, [heads, inter, out, mha, ffn]) in k.layers.iter().enumerate() {
        if mha[0] != 0.0 {
            s.mha_alive[i] = true;
            s.heads[i] = nz(heads);
        }
        if ffn[0] != 0.0 {
            s.ffn_alive[i] = true;
            s.inter[i] = nz(inter);
            s.out[i] = k
                .width
                .iter()
                .zip(out)
                .filter(|&(&w, &o)| w != 0.0 && o != 0.0)
                .count();
        }
    }
    s
}

/// Per-head keep flags `[layer][head]` of the eval forward: a head counts
/// as kept when its own gate and its layer's attention gate are nonzero.
pub fn kept_heads<R: Real>(model: &GatedTransformer<R>) -> Vec<Vec<bool>> {
    consts(model)
        .layers
        .iter()
        .map(|[heads, _, _, mha, _]| heads.iter().map(|&h| h != 0.0 && mha[0] != 0.0).collect())
        .collect()
}

/// Sizes of an extracted model relative to its source.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractReport {
    pub survival: Survival,
    pub layers_kept: usize,
    pub params: u64,
    pub flops: u64,
    pub base_params: u64,
    pub base_flops: u64,
    pub seq_len: usize,
}

impl ExtractReport {
    pub fn new<R: Real>(dense: &DenseModel<R>, base: &DenseModel<R>, seq_len: usize) -> Self {
        ExtractReport {
            survival: dense.survival(),
            layers_kept: dense.layers.len(),
            params: dense.param_count(),
            flops: dense.flop_count(seq_len),
            base_params: base.param_count(),
            base_flops: base.flop_count(seq_len),
            seq_len,
        }
    }

    pub fn sparsity_params(&self) -> f64 {
        1.0 - self.params as f64 / self.base_params as f64
    }

    pub fn sparsity_flops(&self) -> f64 {
        1.0 - self.flops as f64 / self.base_flops as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Mode, ModelConfig};
    use crate::Rng;
    use rand::SeedableRng;

    #[test]
    fn teacher_param_count_regression() {
        let cfg = ModelConfig {
            vocab_size: 64,
            max_seq: 32,
            width: 32,
            layers: 2,
            heads: 4,
            ffn_dim: 64,
            num_classes: 2,
            causal: false,
            dropout: 0.0,
        };
        let t = GatedTransformer::<f32>::build_teacher(&cfg, 0).unwrap();
        let d = extract_dense(&t).unwrap();
        // (V+P)d + L(4d² + 4d + 2 d r + r + d + 4d) + 2d + dC
        assert_eq!(d.param_count(), 20288);
    }

    #[test]
    fn identity_extraction_matches_teacher() {
        let cfg = ModelConfig {
            vocab_size: 9,
            max_seq: 6,
            width: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 16,
            ..Default::default()
        };
        let t = GatedTransformer::<f64>::build_teacher(&cfg, 3).unwrap();
        let d = extract_dense(&t).unwrap();
        let tokens = Tokens {
            ids: vec![1, 2, 3, 8, 0, 5, 5, 1],
            batch: 2,
            seq: 4,
        };
        let mut rng = Rng::seed_from_u64(0);
        let a = t.logits(&tokens, Mode::Eval, &mut rng).unwrap();
        let b = d.forward(&tokens).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(d.extract(), d);
        assert_eq!(
            DenseModel::from_named_tensors(&d.named_tensors()).unwrap(),
            d
        );
    }
}
