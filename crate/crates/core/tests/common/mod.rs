#![allow(dead_code)]

use rand::{Rng as _, SeedableRng};
use vibprune_core::gates::GateInit;
use vibprune_core::model::{Betas, GatedTransformer, ModelConfig, Tokens};
use vibprune_core::tensor::Real;
use vibprune_core::Rng;

pub fn config(width: usize, layers: usize, heads: usize, ffn_dim: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        max_seq: 7,
        width,
        layers,
        heads,
        ffn_dim,
        num_classes: 3,
        causal: false,
        dropout: 0.0,
    }
}

pub fn random_tokens(cfg: &ModelConfig, batch: usize, seq: usize, rng: &mut Rng) -> Tokens {
    Tokens {
        ids: (0..batch * seq).map(|_| rng.random_range(0..cfg.vocab_size)).collect(),
        batch,
        seq,
    }
}

/// Student of a fresh teacher whose weights are scaled up so that the
/// network is far from linear and pruning visibly changes its output.
pub fn student<R: Real>(cfg: &ModelConfig, seed: u64) -> GatedTransformer<R> {
    let mut t = GatedTransformer::<R>::build_teacher(cfg, seed).unwrap();
    for id in t.weight_ids() {
        for v in t.params.get_mut(id).data_mut() {
            *v *= R::from_f64(10.0);
        }
    }
    let init = GateInit {
        mu_mean: 1.0,
        mu_std: 0.0,
        sigma_init: 0.1,
        seed,
    };
    GatedTransformer::build_student(&t, &init, &Betas::default()).unwrap()
}

/// Sets every gate to a random hard assignment: each unit is kept with
/// probability `p_keep`, with a random scale μ in [0.5, 1.5] when kept
/// (log σ = −3, so log α > 0) and μ = 0.3, log σ = 1 when dropped.
pub fn assign_hard<R: Real>(model: &mut GatedTransformer<R>, p_keep: f64, rng: &mut Rng) {
    let gates: Vec<_> = model.gates().unwrap().iter().cloned().collect();
    for g in gates {
        for j in 0..g.unit_count {
            let keep = rng.random_bool(p_keep);
            let (mu, ls) = if keep {
                (rng.random_range(0.5..1.5), -3.0)
            } else {
                (0.3, 1.0)
            };
            model.params.get_mut(g.mu).data_mut()[j] = R::from_f64(mu);
            model.params.get_mut(g.log_sigma).data_mut()[j] = R::from_f64(ls);
        }
    }
}

/// Like [`assign_hard`] but redraws until extraction is possible: at
/// least one width dimension and one live sub-layer survive.
pub fn assign_extractable<R: Real>(model: &mut GatedTransformer<R>, p_keep: f64, rng: &mut Rng) {
    loop {
        assign_hard(model, p_keep, rng);
        if vibprune_core::extract::extract_dense(model).is_ok() {
            return;
        }
    }
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
