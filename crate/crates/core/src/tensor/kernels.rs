//! Gradient-free numeric kernels shared by the graph and the dense
//! (gate-free) model forward.

use alloc::vec;
use alloc::vec::Vec;

use super::Real;

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Fill value used for masked attention scores; finite so that the
/// non-finite output check stays meaningful.
pub const MASK_FILL: f64 = -1e9;

/// tanh through one `exp`; libm's tanh goes through expm1 and is several
/// times slower.
#[inline]
fn fast_tanh<R: Real>(u: R) -> R {
    let two = R::from_f64(2.0);
    R::one() - two / ((two * u).exp() + R::one())
}

pub fn gelu<R: Real>(x: R) -> R {
    let (c, a, half) = (R::from_f64(GELU_C), R::from_f64(GELU_A), R::from_f64(0.5));
    let t = fast_tanh(c * (x + a * x * x * x));
    half * x * (R::one() + t)
}

pub fn gelu_grad<R: Real>(x: R) -> R {
    let (c, a, half) = (R::from_f64(GELU_C), R::from_f64(GELU_A), R::from_f64(0.5));
    let t = fast_tanh(c * (x + a * x * x * x));
    let du = c * (R::one() + R::from_f64(3.0) * a * x * x);
    half * (R::one() + t) + half * x * (R::one() - t * t) * du
}

pub fn sigmoid<R: Real>(x: R) -> R {
    let x = x.as_f64();
    let s = if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    };
    R::from_f64(s)
}

/// Row-wise softmax over contiguous rows of length `w`.
pub fn softmax_rows<R: Real>(x: &[R], w: usize) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    if w == 0 {
        return out;
    }
    for (row, o) in x.chunks(w).zip(out.chunks_mut(w)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut sum = 0.0f64;
        for (oi, v) in o.iter_mut().zip(row) {
            let e = libm::exp(v.as_f64() - max);
            sum += e;
            *oi = R::from_f64(e);
        }
        let inv = 1.0 / sum;
        for oi in o.iter_mut() {
            *oi = R::from_f64(oi.as_f64() * inv);
        }
    }
    out
}

pub fn log_softmax_rows<R: Real>(x: &[R], w: usize) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    if w == 0 {
        return out;
    }
    for (row, o) in x.chunks(w).zip(out.chunks_mut(w)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let lse = max + libm::log(row.iter().map(|v| libm::exp(v.as_f64() - max)).sum::<f64>());
        for (oi, v) in o.iter_mut().zip(row) {
            *oi = R::from_f64(v.as_f64() - lse);
        }
    }
    out
}

/// Normalizes each row of `w` stored values as if it were a row of
/// `divisor ≥ w` values whose remaining `divisor − w` entries are zero.
/// With `divisor == w` this is the ordinary layer normalization (no affine).
/// Returns the normalized rows and the per-row inverse standard deviation.
pub fn layer_norm_rows<R: Real>(x: &[R], w: usize, divisor: usize) -> (Vec<R>, Vec<f64>) {
    debug_assert!(divisor >= w);
    let rows = if w == 0 { 0 } else { x.len() / w };
    let mut out = vec![R::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    let n = divisor as f64;
    let missing = (divisor - w) as f64;
    for r in 0..rows {
        let row = &x[r * w..(r + 1) * w];
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let ss: f64 = row
            .iter()
            .map(|v| (v.as_f64() - mean) * (v.as_f64() - mean))
            .sum::<f64>()
            + missing * mean * mean;
        let inv = 1.0 / libm::sqrt(ss / n + LN_EPS);
        for (o, v) in out[r * w..(r + 1) * w].iter_mut().zip(row) {
            *o = R::from_f64((v.as_f64() - mean) * inv);
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

/// Maps every flat index of `out_shape` onto the flat index of an operand
/// of shape `in_shape` under right-aligned broadcasting. `None` when the
/// shapes are equal (identity map).
pub fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Option<Vec<u32>> {
    if out_shape == in_shape {
        return None;
    }
    let nd = out_shape.len();
    let offset = nd - in_shape.len();
    // strides of the input, zero on broadcast axes
    let mut in_strides = vec![0usize; nd];
    let mut acc = 1usize;
    for ax in (0..in_shape.len()).rev() {
        if in_shape[ax] != 1 {
            in_strides[ax + offset] = acc;
        }
        acc *= in_shape[ax];
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur as u32);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            cur += in_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= in_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(map)
}

/// How an operand of a broadcast binary op is indexed from the flat
/// output index.
#[derive(Debug, Clone, PartialEq)]
pub enum Bcast {
    Same,
    /// `i % n`: the operand matches a trailing block of the output.
    Cycle(usize),
    /// `i / k`: the operand matches leading axes and is 1 on the rest.
    Repeat(usize),
    Map(Vec<u32>),
}

impl Bcast {
    pub fn classify(out_shape: &[usize], in_shape: &[usize]) -> Bcast {
        if out_shape == in_shape {
            return Bcast::Same;
        }
        let lead_ones = in_shape.iter().take_while(|&&d| d == 1).count();
        let core = &in_shape[lead_ones..];
        if out_shape.ends_with(core) {
            return Bcast::Cycle(core.iter().product());
        }
        let nd = out_shape.len();
        let offset = nd - in_shape.len();
        let padded = |ax: usize| {
            if ax < offset {
                1
            } else {
                in_shape[ax - offset]
            }
        };
        let p = (0..nd)
            .rev()
            .find(|&ax| padded(ax) != 1)
            .map_or(0, |ax| ax + 1);
        if (0..p).all(|ax| padded(ax) == out_shape[ax]) {
            return Bcast::Repeat(out_shape[p..].iter().product());
        }
        Bcast::Map(broadcast_map(out_shape, in_shape).unwrap_or_default())
    }

    #[inline]
    pub fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Repeat(k) => i / k,
            Bcast::Map(m) => m[i] as usize,
        }
    }
}

/// `out[i] = f(a[ma(i)], b[mb(i)])` over `n` outputs.
pub fn broadcast_apply<R: Real>(
    a: &[R],
    ma: &Bcast,
    b: &[R],
    mb: &Bcast,
    n: usize,
    f: impl Fn(R, R) -> R,
) -> Vec<R> {
    let mut out = Vec::with_capacity(n);
    match (ma, mb) {
        (Bcast::Same, Bcast::Same) => out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y))),
        (Bcast::Same, Bcast::Cycle(w)) if *w > 0 => {
            for row in a.chunks(*w) {
                out.extend(row.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
        }
        (Bcast::Cycle(w), Bcast::Same) if *w > 0 => {
            for row in b.chunks(*w) {
                out.extend(a.iter().zip(row).map(|(&x, &y)| f(x, y)));
            }
        }
        (Bcast::Same, Bcast::Repeat(k)) if *k > 0 => {
            for (row, &y) in a.chunks(*k).zip(b) {
                out.extend(row.iter().map(|&x| f(x, y)));
            }
        }
        (Bcast::Repeat(k), Bcast::Same) if *k > 0 => {
            for (row, &x) in b.chunks(*k).zip(a) {
                out.extend(row.iter().map(|&y| f(x, y)));
            }
        }
        _ => out.extend((0..n).map(|i| f(a[ma.at(i)], b[mb.at(i)]))),
    }
    out
}

/// Sums `g[i]` (after `f(i, g[i])`) into an operand of length `len`
/// indexed by `m`.
pub fn broadcast_reduce<R: Real>(
    g: &[R],
    m: &Bcast,
    len: usize,
    f: impl Fn(usize, R) -> R,
) -> Vec<R> {
    match m {
        Bcast::Same => g.iter().enumerate().map(|(i, &x)| f(i, x)).collect(),
        Bcast::Cycle(w) if *w > 0 => {
            let mut d = vec![R::zero(); len];
            for (r, row) in g.chunks(*w).enumerate() {
                for (j, (o, &x)) in d.iter_mut().zip(row).enumerate() {
                    *o += f(r * w + j, x);
                }
            }
            d
        }
        Bcast::Repeat(k) if *k > 0 => {
            let mut d = vec![R::zero(); len];
            for (r, row) in g.chunks(*k).enumerate() {
                let mut s = R::zero();
                for (j, &x) in row.iter().enumerate() {
                    s += f(r * k + j, x);
                }
                d[r] = s;
            }
            d
        }
        _ => {
            let mut d = vec![R::zero(); len];
            for (i, &x) in g.iter().enumerate() {
                d[m.at(i)] += f(i, x);
            }
            d
        }
    }
}

/// Right-aligned broadcast of two shapes; `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd {
            a[i + a.len() - nd]
        } else {
            1
        };
        let db = if i + b.len() >= nd {
            b[i + b.len() - nd]
        } else {
            1
        };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_matches_libm() {
        for i in -400..=400 {
            let u = i as f64 * 0.05;
            assert!((fast_tanh(u) - u.tanh()).abs() < 1e-15, "u={u}");
            assert!(
                (fast_tanh(u as f32) - (u as f32).tanh()).abs() < 1e-6,
                "u={u}"
            );
        }
        assert_eq!(fast_tanh(1e6f32), 1.0);
        assert_eq!(fast_tanh(-1e6f32), -1.0);
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-2.0f64, -0.7, 0.0, 0.3, 1.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn classify_agrees_with_map() {
        let cases: &[(&[usize], &[usize])] = &[
            (&[2, 3, 4], &[4]),
            (&[2, 3, 4], &[1, 3, 4]),
            (&[2, 3, 4], &[2, 1, 1]),
            (&[2, 3, 4], &[2, 3, 1]),
            (&[2, 3, 4], &[]),
            (&[2, 3, 4], &[3, 1]),
            (&[2, 3, 4], &[2, 1, 4]),
        ];
        for &(out, inp) in cases {
            let c = Bcast::classify(out, inp);
            let m = broadcast_map(out, inp).unwrap();
            let n: usize = out.iter().product();
            for i in 0..n {
                assert_eq!(c.at(i), m[i] as usize, "{out:?} {inp:?} {i}");
            }
        }
    }

    #[test]
    fn broadcast_map_trailing_and_leading() {
        let m = broadcast_map(&[2, 3], &[3]).unwrap();
        assert_eq!(m, [0, 1, 2, 0, 1, 2]);
        let m = broadcast_map(&[2, 2, 2], &[2, 1, 1]).unwrap();
        assert_eq!(m, [0, 0, 0, 0, 1, 1, 1, 1]);
        let m = broadcast_map(&[2, 3], &[]).unwrap();
        assert_eq!(m, [0; 6]);
        assert!(broadcast_map(&[2, 3], &[2, 3]).is_none());
    }

    #[test]
    fn padded_layer_norm_equals_full_norm_with_zeros() {
        let kept = [0.3f64, -1.2, 2.0];
        let full = [0.3f64, 0.0, -1.2, 0.0, 2.0];
        let (a, _) = layer_norm_rows(&kept, 3, 5);
        let (b, _) = layer_norm_rows(&full, 5, 5);
        assert!((a[0] - b[0]).abs() < 1e-12);
        assert!((a[1] - b[2]).abs() < 1e-12);
        assert!((a[2] - b[4]).abs() < 1e-12);
    }
}
