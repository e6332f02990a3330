use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::Rng;

/// `|a − n| / max(1e-8, |a| + |n|)`, maximized over entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn eval<F>(f: &mut F, params: &[Tensor<f64>], seed: u64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[Var], &mut Rng) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.leaf(p.clone(), false))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = Rng::seed_from_u64(seed);
    let out = f(&mut g, &vars, &mut rng)?;
    Ok(g.scalar(out))
}

/// Compares reverse-mode gradients of a scalar function against two-sided
/// finite differences, in `f64`.
///
/// `f` receives a fresh graph, one leaf per entry of `params`, and an RNG
/// re-seeded with `seed` on every evaluation, so any noise it draws is
/// frozen across the perturbed evaluations. Returns the maximum relative
/// error over all parameter entries.
pub fn gradcheck<F>(mut f: F, params: &[Tensor<f64>], eps: f64, seed: u64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[Var], &mut Rng) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("gradcheck eps must be positive"));
    }
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.leaf(p.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = Rng::seed_from_u64(seed);
    let out = f(&mut g, &vars, &mut rng)?;
    let base = g.scalar(out);
    g.backward(out)?;

    let again = eval(&mut f, params, seed)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Determinism(format!(
            "two evaluations under seed {seed} gave {base} and {again}"
        )));
    }

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => alloc::vec![0.0; params[pi].len()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..params[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let up = eval(&mut f, &work, seed)?;
            work[pi].data_mut()[j] = orig - eps;
            let down = eval(&mut f, &work, seed)?;
            work[pi].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn polynomial_is_exact() {
        let x = Tensor::from_f64(&[3], &[0.7, -1.3, 2.0]).unwrap();
        let err = gradcheck(
            |g, v, _| {
                let s = g.square(v[0])?;
                g.sum(s)
            },
            &[x],
            1e-3,
            0,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn unfrozen_noise_is_detected() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let mut calls = 0u64;
        let r = gradcheck(
            |g, v, rng| {
                calls += 1;
                let k: f64 = rng.random::<f64>() + calls as f64;
                let s = g.scale(v[0], k)?;
                g.sum(s)
            },
            &[x],
            1e-3,
            3,
        );
        assert!(matches!(r, Err(Error::Determinism(_))));
    }
}
