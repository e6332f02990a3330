//! Variational information bottleneck gates.
//!
//! A gate multiplies a group of `unit_count` activations by
//! `z = μ + ε ⊙ σ`, with ε drawn per (sample, token, unit). Its cost is
//! `Σ_j log(1 + μ_j² / σ_j²)`; a unit whose `log(μ²/σ²)` falls to the
//! threshold τ or below is redundant and removed by the hard mask.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::Rng;

/// Structural unit group a gate is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    EmbeddingWidth,
    Heads,
    FfnIntermediate,
    FfnOutput,
    LayerMha,
    LayerFfn,
}

impl Site {
    pub const ALL: [Site; 6] = [
        Site::EmbeddingWidth,
        Site::Heads,
        Site::FfnIntermediate,
        Site::FfnOutput,
        Site::LayerMha,
        Site::LayerFfn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::EmbeddingWidth => "embedding_width",
            Site::Heads => "heads",
            Site::FfnIntermediate => "ffn_intermediate",
            Site::FfnOutput => "ffn_output",
            Site::LayerMha => "layer_mha",
            Site::LayerFfn => "layer_ffn",
        }
    }

    pub fn parse(s: &str) -> Option<Site> {
        Site::ALL.into_iter().find(|site| site.as_str() == s)
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Initialization of gate parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateInit {
    pub mu_mean: f64,
    pub mu_std: f64,
    pub sigma_init: f64,
    pub seed: u64,
}

impl Default for GateInit {
    /// Gates start near identity so a teacher-initialized student begins
    /// at teacher behavior.
    fn default() -> Self {
        GateInit {
            mu_mean: 1.0,
            mu_std: 0.01,
            sigma_init: 0.1,
            seed: 0,
        }
    }
}

impl GateInit {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_std >= 0.0) || !(self.sigma_init > 0.0) {
            return Err(Error::contract(format!(
                "gate init needs mu_std >= 0 and sigma_init > 0, got {} and {}",
                self.mu_std, self.sigma_init
            )));
        }
        Ok(())
    }
}

/// How a gate's multiplier is formed in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// `μ + ε ⊙ σ`
    Stochastic,
    /// `μ`
    Mean,
}

/// One stochastic gate. The parameters live in the owning model's
/// [`ParamStore`] under `gate.<site>.<index>.{mu,log_sigma}`.
#[derive(Debug, Clone, PartialEq)]
pub struct VibGate {
    pub site: Site,
    /// Layer index, 0 for the single embedding-width gate.
    pub index: usize,
    pub unit_count: usize,
    pub beta: f64,
    pub mu: ParamId,
    pub log_sigma: ParamId,
}

impl VibGate {
    pub fn param_name(site: Site, index: usize, field: &str) -> alloc::string::String {
        format!("gate.{}.{}.{}", site.as_str(), index, field)
    }

    /// Registers fresh gate parameters: μ ~ N(mu_mean, mu_std²) from a
    /// generator seeded with `init.seed`, and `log σ = log(sigma_init)`.
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        site: Site,
        index: usize,
        unit_count: usize,
        beta: f64,
        init: &GateInit,
    ) -> Result<Self> {
        if unit_count == 0 {
            return Err(Error::contract("gate unit_count must be at least 1"));
        }
        if !(beta >= 0.0) {
            return Err(Error::contract(format!(
                "gate beta must be >= 0, got {beta}"
            )));
        }
        init.validate()?;
        let mut rng = Rng::seed_from_u64(init.seed);
        let mu: Vec<R> = if init.mu_std == 0.0 {
            alloc::vec![R::from_f64(init.mu_mean); unit_count]
        } else {
            let dist = Normal::new(init.mu_mean, init.mu_std)
                .map_err(|e| Error::contract(format!("gate init: {e}")))?;
            (0..unit_count)
                .map(|_| R::from_f64(dist.sample(&mut rng)))
                .collect()
        };
        let ls = R::from_f64(libm::log(init.sigma_init));
        let mu = store.insert(
            Self::param_name(site, index, "mu"),
            Tensor::new(&[unit_count], mu)?,
        )?;
        let log_sigma = store.insert(
            Self::param_name(site, index, "log_sigma"),
            Tensor::full(&[unit_count], ls),
        )?;
        Ok(VibGate {
            site,
            index,
            unit_count,
            beta,
            mu,
            log_sigma,
        })
    }

    pub fn mu<'a, R: Real>(&self, store: &'a ParamStore<R>) -> &'a [R] {
        store.get(self.mu).data()
    }

    pub fn sigma<R: Real>(&self, store: &ParamStore<R>) -> Vec<f64> {
        store
            .get(self.log_sigma)
            .data()
            .iter()
            .map(|v| libm::exp(v.as_f64()))
            .collect()
    }

    /// Redundancy score `α_j = μ_j² / σ_j²`.
    pub fn alpha<R: Real>(&self, store: &ParamStore<R>) -> Vec<f64> {
        self.mu(store)
            .iter()
            .zip(store.get(self.log_sigma).data())
            .map(|(m, ls)| {
                let m = m.as_f64();
                m * m * libm::exp(-2.0 * ls.as_f64())
            })
            .collect()
    }

    /// `log α_j = log μ_j² − 2 log σ_j` (−∞ when μ_j = 0).
    pub fn log_alpha<R: Real>(&self, store: &ParamStore<R>) -> Vec<f64> {
        self.mu(store)
            .iter()
            .zip(store.get(self.log_sigma).data())
            .map(|(m, ls)| {
                let m = m.as_f64();
                libm::log(m * m) - 2.0 * ls.as_f64()
            })
            .collect()
    }

    /// Hard keep mask: a unit is dropped iff `log α ≤ τ`.
    pub fn hard_mask<R: Real>(&self, store: &ParamStore<R>, tau: f64) -> Vec<bool> {
        self.log_alpha(store)
            .into_iter()
            .map(|la| la > tau)
            .collect()
    }

    /// Constant multiplier used after binarization: `μ ⊙ hard_mask`.
    pub fn binary_value<R: Real>(&self, store: &ParamStore<R>, tau: f64) -> Vec<f64> {
        self.mu(store)
            .iter()
            .zip(self.hard_mask(store, tau))
            .map(|(m, keep)| if keep { m.as_f64() } else { 0.0 })
            .collect()
    }

    /// Draws the reparameterization noise for this gate, `shape` ending in
    /// `unit_count`.
    pub fn draw_noise<R: Real>(&self, shape: &[usize], rng: &mut Rng) -> Result<Tensor<R>> {
        if shape.last() != Some(&self.unit_count) {
            return Err(Error::shape(
                "sample_mask",
                format!(
                    "noise shape {shape:?} must end in unit_count {}",
                    self.unit_count
                ),
            ));
        }
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                R::from_f64(e)
            })
            .collect();
        Tensor::new(shape, data)
    }

    /// Gate sample with the shape of `epsilon` (`(batch, seq, unit_count)`
    /// or any shape ending in `unit_count`). In mean mode the noise is
    /// ignored and μ is broadcast to that shape.
    pub fn sample_mask<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        epsilon: &Tensor<R>,
        mode: SampleMode,
    ) -> Result<Var> {
        if epsilon.shape().last() != Some(&self.unit_count) {
            return Err(Error::shape(
                "sample_mask",
                format!(
                    "epsilon shape {:?} must end in unit_count {}",
                    epsilon.shape(),
                    self.unit_count
                ),
            ));
        }
        let mu = g.param(store, self.mu);
        match mode {
            SampleMode::Stochastic => {
                let ls = g.param(store, self.log_sigma);
                let sigma = g.exp(ls)?;
                let eps = g.constant(epsilon.clone())?;
                let noise = g.mul(eps, sigma)?;
                g.add(noise, mu)
            }
            SampleMode::Mean => {
                let zeros = g.constant(Tensor::zeros(epsilon.shape()))?;
                g.add(zeros, mu)
            }
        }
    }

    /// `Σ_j log(1 + μ_j² / σ_j²)`, differentiable in μ and log σ.
    pub fn kl_term<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>) -> Result<Var> {
        let mu = g.param(store, self.mu);
        let ls = g.param(store, self.log_sigma);
        let mu2 = g.square(mu)?;
        let inv_var = g.scale(ls, -2.0)?;
        let inv_var = g.exp(inv_var)?;
        let ratio = g.mul(mu2, inv_var)?;
        let one_plus = g.add_scalar(ratio, 1.0)?;
        let logs = g.log(one_plus)?;
        g.sum(logs)
    }

    /// Differentiable keep probability `sigmoid((log α − τ) / temperature)`.
    pub fn soft_keep<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        tau: f64,
        temperature: f64,
    ) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::contract(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        let mu = g.param(store, self.mu);
        let ls = g.param(store, self.log_sigma);
        let mu2 = g.square(mu)?;
        // the offset keeps log finite at μ = 0 without moving any boundary
        // representable at this precision
        let mu2 = g.add_scalar(mu2, 1e-30)?;
        let log_mu2 = g.log(mu2)?;
        let two_ls = g.scale(ls, 2.0)?;
        let log_alpha = g.sub(log_mu2, two_ls)?;
        let shifted = g.add_scalar(log_alpha, -tau)?;
        let x = g.scale(shifted, 1.0 / temperature)?;
        g.sigmoid(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gate_with(mu: &[f64], sigma: &[f64]) -> (ParamStore<f64>, VibGate) {
        let mut store = ParamStore::new();
        let g = VibGate::new(
            &mut store,
            Site::Heads,
            0,
            mu.len(),
            0.0,
            &GateInit::default(),
        )
        .unwrap();
        store.get_mut(g.mu).data_mut().copy_from_slice(mu);
        for (d, s) in store.get_mut(g.log_sigma).data_mut().iter_mut().zip(sigma) {
            *d = s.ln();
        }
        (store, g)
    }

    #[test]
    fn new_gate_init() {
        let mut store = ParamStore::<f32>::new();
        let init = GateInit {
            mu_mean: 1.0,
            mu_std: 0.01,
            sigma_init: 0.1,
            seed: 7,
        };
        let g = VibGate::new(&mut store, Site::Heads, 0, 4, 1e-4, &init).unwrap();
        assert!(g.mu(&store).iter().all(|&m| (0.95..=1.05).contains(&m)));
        for s in g.sigma(&store) {
            assert!((s - 0.1).abs() < 1e-7);
        }
        let mut other = ParamStore::<f32>::new();
        let h = VibGate::new(&mut other, Site::Heads, 0, 4, 1e-4, &init).unwrap();
        assert_eq!(g.mu(&store), h.mu(&other));
    }

    #[test]
    fn zero_variance_init() {
        let mut store = ParamStore::<f64>::new();
        let init = GateInit {
            mu_mean: 1.0,
            mu_std: 0.0,
            sigma_init: 0.5,
            seed: 0,
        };
        let g = VibGate::new(&mut store, Site::LayerMha, 0, 1, 0.0, &init).unwrap();
        assert_eq!(g.mu(&store), &[1.0]);
        assert!((g.sigma(&store)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_units_rejected() {
        let mut store = ParamStore::<f32>::new();
        let r = VibGate::new(&mut store, Site::Heads, 0, 0, 0.0, &GateInit::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn stochastic_sample_is_affine_in_noise() {
        let (store, gate) = gate_with(&[1.0], &[0.5]);
        let mut g = Graph::new();
        let eps = Tensor::from_f64(&[1, 1, 1], &[2.0]).unwrap();
        let z = gate
            .sample_mask(&mut g, &store, &eps, SampleMode::Stochastic)
            .unwrap();
        assert!((g.value(z).data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mean_sample_broadcasts_mu() {
        let (store, gate) = gate_with(&[0.3, -0.1], &[1.0, 1.0]);
        let mut g = Graph::new();
        let eps = Tensor::from_f64(&[2, 3, 2], &[9.0; 12]).unwrap();
        let z = gate
            .sample_mask(&mut g, &store, &eps, SampleMode::Mean)
            .unwrap();
        assert_eq!(g.shape(z), &[2, 3, 2]);
        for pair in g.value(z).data().chunks(2) {
            assert_eq!(pair, &[0.3, -0.1]);
        }
    }

    #[test]
    fn tiny_sigma_collapses_to_mean() {
        let (mut store, gate) = gate_with(&[0.7], &[1.0]);
        store.get_mut(gate.log_sigma).data_mut()[0] = -20.0;
        let mut g = Graph::new();
        let eps = Tensor::from_f64(&[1, 2, 1], &[1.3, -2.2]).unwrap();
        let z = gate
            .sample_mask(&mut g, &store, &eps, SampleMode::Stochastic)
            .unwrap();
        for &v in g.value(z).data() {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_shape_mismatch() {
        let (store, gate) = gate_with(&[1.0, 1.0], &[1.0, 1.0]);
        let mut g = Graph::new();
        let eps = Tensor::zeros(&[1, 1, 3]);
        assert!(matches!(
            gate.sample_mask(&mut g, &store, &eps, SampleMode::Stochastic),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn kl_values() {
        for (mu, sigma, want) in [
            (&[0.0, 0.0][..], &[0.3, 2.0][..], 0.0),
            (&[1.0][..], &[1.0][..], core::f64::consts::LN_2),
            (&[3.0][..], &[1.0][..], core::f64::consts::LN_10),
        ] {
            let (store, gate) = gate_with(mu, sigma);
            let mut g = Graph::new();
            let kl = gate.kl_term(&mut g, &store).unwrap();
            assert!((g.scalar(kl) - want).abs() < 1e-12, "{mu:?}");
        }
    }

    #[test]
    fn alpha_values() {
        assert_eq!(
            gate_with(&[2.0], &[1.0])
                .1
                .alpha(&gate_with(&[2.0], &[1.0]).0),
            [4.0]
        );
        let (s, g) = gate_with(&[0.0], &[0.1]);
        assert_eq!(g.alpha(&s), [0.0]);
        let (s, g) = gate_with(&[1.0, -1.0], &[1.0, 1.0]);
        assert_eq!(g.alpha(&s), [1.0, 1.0]);
    }

    #[test]
    fn hard_mask_cases() {
        let (s, g) = gate_with(&[2.0], &[1.0]);
        assert_eq!(g.hard_mask(&s, 0.0), [true]);
        let (s, g) = gate_with(&[1.0], &[2.0]);
        assert_eq!(g.hard_mask(&s, 0.0), [false]);
        let (s, g) = gate_with(&[1.0], &[1.0]);
        assert_eq!(g.hard_mask(&s, 0.0), [false]);
    }

    #[test]
    fn soft_keep_cases() {
        let (s, gate) = gate_with(&[1.0], &[1.0]);
        let mut g = Graph::new();
        let k = gate.soft_keep(&mut g, &s, 0.0, 1.0).unwrap();
        assert_eq!(g.value(k).data()[0], 0.5);

        let (s, gate) = gate_with(&[2.0], &[1.0]);
        let mut g = Graph::new();
        let k = gate.soft_keep(&mut g, &s, 0.0, 1.0).unwrap();
        let v = g.value(k).data()[0];
        assert!((v - 0.8).abs() < 1e-12, "{v}");
        let k = gate.soft_keep(&mut g, &s, 0.0, 0.01).unwrap();
        assert!((g.value(k).data()[0] - 1.0).abs() < 1e-6);

        assert!(matches!(
            gate.soft_keep(&mut g, &s, 0.0, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn binary_value_composes_mean_and_hard() {
        // log α = [1, -1] with σ = 1 means μ² = [e, 1/e]
        let (mut s, gate) = gate_with(&[1.2, 0.7], &[1.0, 1.0]);
        let ls = s.get_mut(gate.log_sigma).data_mut();
        ls[0] = (1.2f64).ln() - 0.5;
        ls[1] = (0.7f64).ln() + 0.5;
        let la = gate.log_alpha(&s);
        assert!((la[0] - 1.0).abs() < 1e-12 && (la[1] + 1.0).abs() < 1e-12);
        assert_eq!(gate.binary_value(&s, 0.0), [1.2, 0.0]);
    }
}
