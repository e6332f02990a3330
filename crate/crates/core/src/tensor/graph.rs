use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, broadcast_apply, broadcast_reduce, broadcast_shape, Bcast};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    Gelu,
    Sigmoid,
    Log,
    Exp,
    Square,
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        shared_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        map_a: Bcast,
        map_b: Bcast,
    },
    Sub {
        a: Var,
        b: Var,
        map_a: Bcast,
        map_b: Bcast,
    },
    Mul {
        a: Var,
        b: Var,
        map_a: Bcast,
        map_b: Bcast,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Scale {
        x: Var,
        c: R,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Mean {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    CausalMask {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Tape of one forward computation. Nodes are appended in evaluation order,
/// which is a topological order, so the backward sweep is a reverse scan.
///
/// A graph lives for one step; parameters persist in a [`ParamStore`] and
/// are bound into the graph as leaves with [`Graph::param`].
#[derive(Debug)]
pub struct Graph<R = f32> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    params: BTreeMap<ParamId, Var>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor<R>,
        op: Op<R>,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        // x·0 is NaN exactly for non-finite x, so one vectorizable sum
        // screens the whole buffer before the slow scan.
        let mut lanes = [R::zero(); 8];
        let chunks = value.data().chunks_exact(8);
        let tail = chunks
            .remainder()
            .iter()
            .fold(R::zero(), |s, &v| s + v * R::zero());
        for c in chunks {
            for (l, &v) in lanes.iter_mut().zip(c) {
                *l += v * R::zero();
            }
        }
        if lanes.iter().fold(tail, |s, &l| s + l) != R::zero() {
            let bad = value
                .data()
                .iter()
                .position(|v| !v.is_finite())
                .unwrap_or(0);
            return Err(Error::Numeric {
                op: name,
                detail: format!("non-finite output at flat index {bad}"),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> R {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.nodes.push(Node {
            value: Tensor::scalar(R::from_f64(value)),
            op: Op::Leaf,
            requires_grad: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same
    /// node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store.get(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: store.requires_grad(id),
        });
        self.grads.push(None);
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Gradients of every bound parameter that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[R])> + '_ {
        self.params
            .iter()
            .filter_map(|(&id, &v)| self.grads[v.0].as_deref().map(|g| (id, g)))
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    // ----- primitives -------------------------------------------------

    /// `a (…, m, k) · b`, where `b` is either a shared `(k, n)` matrix or a
    /// batch `(…, k, n)` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands must be ≥2-D, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {sa:?} x {sb:?}"),
            ));
        }
        let shared_b = sb.len() == 2;
        if !shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape(
                "matmul",
                format!("batch dims differ: {sa:?} x {sb:?}"),
            ));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![R::zero(); batch * m * n];
        if shared_b {
            R::gemm(batch * m, k, n, av, false, bv, false, &mut out, false);
        } else {
            for t in 0..batch {
                R::gemm(
                    m,
                    k,
                    n,
                    &av[t * m * k..(t + 1) * m * k],
                    false,
                    &bv[t * k * n..(t + 1) * k * n],
                    false,
                    &mut out[t * m * n..(t + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(&out_shape, out)?,
            Op::MatMul { a, b, shared_b },
            rg,
            "matmul",
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(R, R) -> R,
    ) -> Result<(Tensor<R>, Bcast, Bcast)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let shape = broadcast_shape(sa, sb)
            .ok_or_else(|| Error::shape(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let ma = Bcast::classify(&shape, sa);
        let mb = Bcast::classify(&shape, sb);
        let n: usize = shape.iter().product();
        let data = broadcast_apply(self.value(a).data(), &ma, self.value(b).data(), &mb, n, f);
        Ok((Tensor::new(&shape, data)?, ma, mb))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map_a, map_b) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add { a, b, map_a, map_b }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map_a, map_b) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub { a, b, map_a, map_b }, rg, "sub")
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map_a, map_b) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul { a, b, map_a, map_b }, rg, "mul")
    }

    /// Selects rows of a `(rows, w)` table; output shape is `index_shape ++ [w]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::shape(
                "gather_rows",
                format!("table must be 2-D, got {st:?}"),
            ));
        }
        if index_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "gather_rows",
                format!("index shape {index_shape:?} vs {} ids", ids.len()),
            ));
        }
        let (rows, w) = (st[0], st[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            if i >= rows {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {i} out of range for {rows} rows"),
                ));
            }
            out.extend_from_slice(&tv[i * w..(i + 1) * w]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(w);
        let rg = self.rg(table);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    fn unary(&mut self, x: Var, kind: Unary, name: &'static str) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<R> = match kind {
            Unary::Gelu => xv.data().iter().map(|&v| kernels::gelu(v)).collect(),
            Unary::Sigmoid => xv.data().iter().map(|&v| kernels::sigmoid(v)).collect(),
            Unary::Log => xv.data().iter().map(|v| v.ln()).collect(),
            Unary::Exp => xv.data().iter().map(|v| v.exp()).collect(),
            Unary::Square => xv.data().iter().map(|&v| v * v).collect(),
        };
        let t = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x);
        self.push(t, Op::Unary { x, kind }, rg, name)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu, "gelu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid, "sigmoid")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log, "log")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp, "exp")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square, "square")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = R::from_f64(c);
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v * c).collect())?;
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, c }, rg, "scale")
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.scalar_const(c);
        self.add(x, k)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape(),
            kernels::softmax_rows(xv.data(), last_dim(xv.shape())),
        )?;
        let rg = self.rg(x);
        self.push(t, Op::Softmax { x }, rg, "softmax_lastdim")
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape(),
            kernels::log_softmax_rows(xv.data(), last_dim(xv.shape())),
        )?;
        let rg = self.rg(x);
        self.push(t, Op::LogSoftmax { x }, rg, "log_softmax_lastdim")
    }

    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let w = last_dim(xv.shape());
        let (y, inv_std) = kernels::layer_norm_rows(xv.data(), w, w);
        let t = Tensor::new(xv.shape(), y)?;
        let rg = self.rg(x);
        self.push(t, Op::LayerNorm { x, inv_std }, rg, "layer_norm_lastdim")
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: f64 = xv.data().iter().map(|v| v.as_f64()).sum();
        let t = Tensor::scalar(R::from_f64(s / xv.len() as f64));
        let rg = self.rg(x);
        self.push(t, Op::Mean { x }, rg, "mean")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(R::from_f64(s)), Op::Sum { x }, rg, "sum")
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_lastdim", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat_lastdim",
                    format!("leading dims {:?} vs {:?}", s, lead),
                ));
            }
            total += last_dim(s);
        }
        let mut out = vec![R::zero(); rows * total];
        let mut off = 0;
        for &p in parts {
            let w = last_dim(self.shape(p));
            let pv = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
            "concat_lastdim",
        )
    }

    pub fn slice_lastdim(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = last_dim(&s);
        if s.is_empty() || start + len > w {
            return Err(Error::shape(
                "slice_lastdim",
                format!("[{start}, {}) out of last dim of {s:?}", start + len),
            ));
        }
        let rows = self.value(x).len() / w.max(1);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * w + start..r * w + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Slice { x, start },
            rg,
            "slice_lastdim",
        )
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(
                "transpose_last2",
                format!("need ≥2-D, got {s:?}"),
            ));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.value(x).len() / (r * c).max(1);
        let xv = self.value(x).data();
        let mut out = vec![R::zero(); xv.len()];
        transpose_into(xv, &mut out, batch, r, c);
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(x);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Transpose { x },
            rg,
            "transpose_last2",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape { x }, rg, "reshape")
    }

    /// Replaces entries above the diagonal of the last two (square) axes
    /// with a large negative constant.
    pub fn causal_mask_fill(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::shape(
                "causal_mask_fill",
                format!("need square trailing axes, got {s:?}"),
            ));
        }
        let n = s[s.len() - 1];
        let mut data = self.value(x).data().to_vec();
        let fill = R::from_f64(kernels::MASK_FILL);
        for blk in data.chunks_mut(n * n) {
            for i in 0..n {
                for j in i + 1..n {
                    blk[i * n + j] = fill;
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(&s, data)?,
            Op::CausalMask { x },
            rg,
            "causal_mask_fill",
        )
    }

    // ----- reverse sweep ---------------------------------------------

    fn acc(&mut self, v: Var, g: &[R]) {
        if !self.rg(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    fn acc_mapped(&mut self, v: Var, g: &[R], map: &Bcast, f: impl Fn(usize, R) -> R) {
        if !self.rg(v) {
            return;
        }
        let d = broadcast_reduce(g, map, self.value(v).len(), f);
        self.acc(v, &d);
    }

    /// Propagates gradients from a scalar `loss` to every node that
    /// requires them. Multiple paths into one node accumulate by summation.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[R]) {
        // Temporarily move the op out so `self` stays mutably borrowable.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, shared_b } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                if self.rg(a) {
                    let bv = self.value(b).data();
                    let mut da = vec![R::zero(); batch * m * k];
                    if shared_b {
                        R::gemm(batch * m, n, k, g, false, bv, true, &mut da, false);
                    } else {
                        for t in 0..batch {
                            R::gemm(
                                m,
                                n,
                                k,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &bv[t * k * n..(t + 1) * k * n],
                                true,
                                &mut da[t * m * k..(t + 1) * m * k],
                                false,
                            );
                        }
                    }
                    self.acc(a, &da);
                }
                if self.rg(b) {
                    let av = self.value(a).data();
                    let db = if shared_b {
                        let mut db = vec![R::zero(); k * n];
                        R::gemm(k, batch * m, n, av, true, g, false, &mut db, false);
                        db
                    } else {
                        let mut db = vec![R::zero(); batch * k * n];
                        for t in 0..batch {
                            R::gemm(
                                k,
                                m,
                                n,
                                &av[t * m * k..(t + 1) * m * k],
                                true,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &mut db[t * k * n..(t + 1) * k * n],
                                false,
                            );
                        }
                        db
                    };
                    self.acc(b, &db);
                }
            }
            Op::Add { a, b, map_a, map_b } => {
                self.acc_mapped(*a, g, map_a, |_, x| x);
                self.acc_mapped(*b, g, map_b, |_, x| x);
            }
            Op::Sub { a, b, map_a, map_b } => {
                self.acc_mapped(*a, g, map_a, |_, x| x);
                self.acc_mapped(*b, g, map_b, |_, x| -x);
            }
            Op::Mul { a, b, map_a, map_b } => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let bv = self.value(b).data().to_vec();
                    self.acc_mapped(a, g, map_a, |i, x| x * bv[map_b.at(i)]);
                }
                if self.rg(b) {
                    let av = self.value(a).data().to_vec();
                    self.acc_mapped(b, g, map_b, |i, x| x * av[map_a.at(i)]);
                }
            }
            Op::Gather { table, ids } => {
                let st = self.shape(*table).to_vec();
                let w = st[1];
                let mut d = vec![R::zero(); st[0] * w];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..w {
                        d[id * w + c] += g[r * w + c];
                    }
                }
                self.acc(*table, &d);
            }
            &Op::Unary { x, kind } => {
                let xv = self.value(x).data();
                let yv = self.nodes[i].value.data();
                let d: Vec<R> = match kind {
                    Unary::Gelu => g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &v)| gi * kernels::gelu_grad(v))
                        .collect(),
                    Unary::Sigmoid => g
                        .iter()
                        .zip(yv)
                        .map(|(&gi, &y)| gi * y * (R::one() - y))
                        .collect(),
                    Unary::Log => g.iter().zip(xv).map(|(&gi, &v)| gi / v).collect(),
                    Unary::Exp => g.iter().zip(yv).map(|(&gi, &y)| gi * y).collect(),
                    Unary::Square => g.iter().zip(xv).map(|(&gi, &v)| gi * (v + v)).collect(),
                };
                self.acc(x, &d);
            }
            &Op::Scale { x, c } => {
                let d: Vec<R> = g.iter().map(|&gi| gi * c).collect();
                self.acc(x, &d);
            }
            &Op::Softmax { x } => {
                let y = self.nodes[i].value.data();
                let w = last_dim(self.nodes[i].value.shape());
                let mut d = vec![R::zero(); y.len()];
                for r in 0..y.len() / w.max(1) {
                    let rs = r * w..(r + 1) * w;
                    let dot: f64 = g[rs.clone()]
                        .iter()
                        .zip(&y[rs.clone()])
                        .map(|(a, b)| a.as_f64() * b.as_f64())
                        .sum();
                    for j in rs {
                        d[j] = R::from_f64(y[j].as_f64() * (g[j].as_f64() - dot));
                    }
                }
                self.acc(x, &d);
            }
            &Op::LogSoftmax { x } => {
                let y = self.nodes[i].value.data();
                let w = last_dim(self.nodes[i].value.shape());
                let mut d = vec![R::zero(); y.len()];
                for r in 0..y.len() / w.max(1) {
                    let rs = r * w..(r + 1) * w;
                    let gs: f64 = g[rs.clone()].iter().map(|v| v.as_f64()).sum();
                    for j in rs {
                        d[j] = R::from_f64(g[j].as_f64() - libm::exp(y[j].as_f64()) * gs);
                    }
                }
                self.acc(x, &d);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = self.nodes[i].value.data();
                let w = last_dim(self.nodes[i].value.shape());
                let n = w as f64;
                let mut d = vec![R::zero(); y.len()];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let rs = r * w..(r + 1) * w;
                    let gs: f64 = g[rs.clone()].iter().map(|v| v.as_f64()).sum();
                    let gy: f64 = g[rs.clone()]
                        .iter()
                        .zip(&y[rs.clone()])
                        .map(|(a, b)| a.as_f64() * b.as_f64())
                        .sum();
                    for j in rs {
                        let v = inv / n * (n * g[j].as_f64() - gs - y[j].as_f64() * gy);
                        d[j] = R::from_f64(v);
                    }
                }
                self.acc(*x, &d);
            }
            &Op::Mean { x } => {
                let n = self.value(x).len();
                let v = R::from_f64(g[0].as_f64() / n as f64);
                self.acc(x, &vec![v; n]);
            }
            &Op::Sum { x } => {
                let n = self.value(x).len();
                self.acc(x, &vec![g[0]; n]);
            }
            Op::Concat { parts } => {
                let total = last_dim(self.nodes[i].value.shape());
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for &p in parts {
                    let w = last_dim(self.shape(p));
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.acc(p, &d);
                    }
                    off += w;
                }
            }
            &Op::Slice { x, start } => {
                let w = last_dim(self.shape(x));
                let len = last_dim(self.nodes[i].value.shape());
                let rows = self.value(x).len() / w.max(1);
                let mut d = vec![R::zero(); rows * w];
                for r in 0..rows {
                    d[r * w + start..r * w + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.acc(x, &d);
            }
            &Op::Transpose { x } => {
                let s = self.shape(x).to_vec();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (r * c).max(1);
                let mut d = vec![R::zero(); g.len()];
                // gradient has the transposed (c×r) layout
                transpose_into(g, &mut d, batch, c, r);
                self.acc(x, &d);
            }
            &Op::Reshape { x } => self.acc(x, g),
            &Op::CausalMask { x } => {
                let s = self.shape(x);
                let n = s[s.len() - 1];
                let mut d = g.to_vec();
                for blk in d.chunks_mut(n * n) {
                    for r in 0..n {
                        for c in r + 1..n {
                            blk[r * n + c] = R::zero();
                        }
                    }
                }
                self.acc(x, &d);
            }
        }
        self.nodes[i].op = op;
    }
}

fn transpose_into<R: Copy>(src: &[R], dst: &mut [R], batch: usize, r: usize, c: usize) {
    for t in 0..batch {
        let (s, d) = (
            &src[t * r * c..(t + 1) * r * c],
            &mut dst[t * r * c..(t + 1) * r * c],
        );
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = s[i * c + j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0., 0.])).unwrap();
        let y = g.softmax_lastdim(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn gelu_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::scalar(0.0)).unwrap();
        let y = g.gelu(x).unwrap();
        assert_eq!(g.scalar(y), 0.0);
    }

    #[test]
    fn backward_square_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1., 2., 3.]), true).unwrap();
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_matmul_identity_passthrough() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 2], &[0.3, -1., 2., 5.]), true).unwrap();
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let y = g.matmul(x, i).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn backward_mean() {
        let mut g = Graph::<f32>::new();
        let x = g
            .leaf(
                Tensor::new(&[4], alloc::vec![1., 2., 3., 4.]).unwrap(),
                true,
            )
            .unwrap();
        let l = g.mean(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let e = g.matmul(a, b).unwrap_err();
        assert!(alloc::format!("{e}").starts_with("shape error in matmul"));
        let c = g.constant(Tensor::zeros(&[4])).unwrap();
        assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let mut g = Graph::<f32>::new();
        let x = g
            .constant(Tensor::new(&[1], alloc::vec![0.0]).unwrap())
            .unwrap();
        assert!(matches!(g.log(x), Err(Error::Numeric { op: "log", .. })));
    }

    #[test]
    fn two_consumer_paths_accumulate() {
        // y = sum(3x) + sum(x*x), computed as two explicit branches
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.5, -2.0]), true).unwrap();
        let p1 = g.scale(x, 3.0).unwrap();
        let p1 = g.sum(p1).unwrap();
        let p2 = g.square(x).unwrap();
        let p2 = g.sum(p2).unwrap();
        let l = g.add(p1, p2).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0 + 3.0, 3.0 - 4.0]);
    }

    #[test]
    fn causal_mask_blocks_upper_triangle() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let y = g.causal_mask_fill(x).unwrap();
        let p = g.softmax_lastdim(y).unwrap();
        assert_eq!(g.value(p).data()[0], 1.0);
        assert_eq!(g.value(p).data()[1], 0.0);
    }
}
