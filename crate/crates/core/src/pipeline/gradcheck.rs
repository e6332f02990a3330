//! Finite-difference audit of every training-loss component on a small
//! student, with gate noise frozen by re-seeding.

use alloc::vec::Vec;

use rand::SeedableRng;

use crate::data::{generate, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::gates::GateInit;
use crate::model::{cross_entropy, Betas, GatedTransformer, Mode, ModelConfig, Tokens};
use crate::objective::{
    ensure_w_layer, layer_distill, layer_map, pred_distill, total_loss, vib_loss, CountModel,
    Keeps, KlDirection, Metric, SparsityController,
};
use crate::tensor::{Graph, ParamId, Tensor, Var};
use crate::Rng;

/// Maximum relative error of each loss component's gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGradcheck {
    pub task: f64,
    /// The summed, β-weighted compression term.
    pub vib: f64,
    /// One gate's `kl_term` on its own.
    pub kl_term: f64,
    pub pred: f64,
    pub layer: f64,
    /// The Lagrangian term, differentiated through the expected sparsity.
    pub sparsity: f64,
    /// All of the above combined by `total_loss`.
    pub total: f64,
}

impl LossGradcheck {
    pub fn components(&self) -> [(&'static str, f64); 7] {
        [
            ("task", self.task),
            ("vib", self.vib),
            ("kl_term", self.kl_term),
            ("pred", self.pred),
            ("layer", self.layer),
            ("sparsity", self.sparsity),
            ("total", self.total),
        ]
    }
}

/// Below this magnitude, central differences in `f64` are dominated by
/// rounding, so the error is measured against the floor instead.
const ABS_FLOOR: f64 = 1e-6;

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(ABS_FLOOR))
        .fold(0.0, f64::max)
}

/// Gradient check over named entries of a model's parameter store.
///
/// `f` builds a scalar from the model on a fresh graph, with the RNG
/// re-seeded from `seed` on every call. Only parameters in `ids` are
/// perturbed.
pub fn store_gradcheck<F>(
    model: &mut GatedTransformer<f64>,
    ids: &[ParamId],
    eps: f64,
    seed: u64,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &GatedTransformer<f64>, &mut Rng) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("gradcheck eps must be positive"));
    }
    let eval = |f: &mut F, m: &GatedTransformer<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let mut rng = Rng::seed_from_u64(seed);
        let out = f(&mut g, m, &mut rng)?;
        Ok(g.scalar(out))
    };
    let mut g = Graph::new();
    let mut rng = Rng::seed_from_u64(seed);
    let out = f(&mut g, model, &mut rng)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| match g.param_var(id).and_then(|v| g.grad(v)) {
            Some(gr) => gr.to_vec(),
            None => alloc::vec![0.0; model.params.get(id).len()],
        })
        .collect();
    let mut worst = 0.0f64;
    for (&id, an) in ids.iter().zip(&analytic) {
        let mut numeric = Vec::with_capacity(an.len());
        for j in 0..an.len() {
            let orig = model.params.get(id).data()[j];
            model.params.get_mut(id).data_mut()[j] = orig + eps;
            let up = eval(&mut f, model)?;
            model.params.get_mut(id).data_mut()[j] = orig - eps;
            let down = eval(&mut f, model)?;
            model.params.get_mut(id).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        worst = worst.max(relative_error(an, &numeric));
    }
    Ok(worst)
}

/// Runs the audit on a `d=8, L=2, J=2` student built from `seed`.
pub fn loss_gradcheck(seed: u64) -> Result<LossGradcheck> {
    const EPS: f64 = 1e-5;
    let mut spec = TaskSpec::new(TaskKind::MajorityPair, 8, 6, 40, seed);
    spec.sizes = [4, 0, 0];
    let data = generate(&spec)?;
    let (tokens, labels): (Tokens, Vec<usize>) = data.train.batch(&[0, 1, 2, 3]);
    let cfg = ModelConfig {
        vocab_size: 8,
        max_seq: 6,
        width: 8,
        layers: 2,
        heads: 2,
        ffn_dim: 16,
        num_classes: 2,
        causal: false,
        dropout: 0.0,
    };
    let teacher = GatedTransformer::<f64>::build_teacher(&cfg, seed)?;
    // larger-than-default weights so no gradient is vanishingly small
    let mut student = teacher.clone();
    for id in student.weight_ids() {
        for v in student.params.get_mut(id).data_mut() {
            *v *= 5.0;
        }
    }
    let init = GateInit {
        mu_mean: 1.0,
        mu_std: 0.3,
        sigma_init: 0.5,
        seed,
    };
    let mut student = GatedTransformer::build_student(
        &student,
        &init,
        &Betas {
            global: 0.5,
            per_site: [None; 6],
        },
    )?;
    let w_id = ensure_w_layer(&mut student.params, cfg.width)?;
    for (i, v) in student
        .params
        .get_mut(w_id)
        .data_mut()
        .iter_mut()
        .enumerate()
    {
        *v += 0.05 * ((i * 7 % 11) as f64 - 5.0);
    }

    let mut rng = Rng::seed_from_u64(seed);
    let t_logits = teacher.logits(&tokens, Mode::Eval, &mut rng)?;
    let t_hidden: Vec<Tensor<f64>> = {
        let mut g = Graph::new();
        let tr = teacher.forward(&mut g, &tokens, Mode::Eval, &mut rng)?;
        tr.hidden_states
            .iter()
            .map(|&h| g.value(h).clone())
            .collect()
    };
    let teacher_layers: Vec<usize> = (0..cfg.layers).collect();
    let mapping = {
        let mut g = Graph::new();
        let mut r = Rng::seed_from_u64(seed);
        let tr = student.forward(&mut g, &tokens, Mode::Train, &mut r)?;
        let s: Vec<Tensor<f64>> = tr
            .hidden_states
            .iter()
            .map(|&h| g.value(h).clone())
            .collect();
        layer_map(
            &s,
            &t_hidden,
            &teacher_layers,
            student.params.get(w_id),
            &[true; 2],
        )?
    };

    let all: Vec<ParamId> = student.params.ids().collect();
    let gate_ids: Vec<ParamId> = student
        .gates()
        .expect("gated")
        .iter()
        .flat_map(|g| [g.mu, g.log_sigma])
        .collect();
    let one_gate = {
        let g = &student.gates().expect("gated").layers[1].inter;
        [g.mu, g.log_sigma]
    };

    let task = store_gradcheck(&mut student, &all, EPS, seed, |g, m, r| {
        let tr = m.forward(g, &tokens, Mode::Train, r)?;
        cross_entropy(g, tr.logits, &labels)
    })?;
    let vib = store_gradcheck(&mut student, &gate_ids, EPS, seed, |g, m, _| vib_loss(g, m))?;
    let kl_term = store_gradcheck(&mut student, &one_gate, EPS, seed, |g, m, _| {
        m.gates().expect("gated").layers[1]
            .inter
            .kl_term(g, &m.params)
    })?;
    let pred = store_gradcheck(&mut student, &all, EPS, seed, |g, m, r| {
        let tr = m.forward(g, &tokens, Mode::Train, r)?;
        pred_distill(g, tr.logits, &t_logits, KlDirection::StudentTeacher)
    })?;
    let layer = store_gradcheck(&mut student, &all, EPS, seed, |g, m, r| {
        let tr = m.forward(g, &tokens, Mode::Train, r)?;
        let w = g.param(&m.params, w_id);
        layer_distill(
            g,
            &tr.hidden_states,
            &t_hidden,
            &teacher_layers,
            w,
            &mapping,
        )
    })?;
    let counts = CountModel::new(&cfg, Metric::Parameters, cfg.max_seq)?;
    let mut ctrl = SparsityController::new(Metric::Parameters, 0.5, 0.01, 0)?;
    ctrl.lambda1 = 0.3;
    ctrl.lambda2 = 0.7;
    let sparsity = store_gradcheck(&mut student, &gate_ids, EPS, seed, |g, m, _| {
        let keeps = Keeps::soft(g, m, 0.0, 1.0)?;
        let s_e = counts.sparsity(g, &keeps)?;
        ctrl.loss(g, s_e, 0.5)
    })?;
    let total = store_gradcheck(&mut student, &all, EPS, seed, |g, m, r| {
        let tr = m.forward(g, &tokens, Mode::Train, r)?;
        let task = cross_entropy(g, tr.logits, &labels)?;
        let vib = vib_loss(g, m)?;
        let pred = pred_distill(g, tr.logits, &t_logits, KlDirection::StudentTeacher)?;
        let w = g.param(&m.params, w_id);
        let layer = layer_distill(
            g,
            &tr.hidden_states,
            &t_hidden,
            &teacher_layers,
            w,
            &mapping,
        )?;
        let keeps = Keeps::soft(g, m, 0.0, 1.0)?;
        let s_e = counts.sparsity(g, &keeps)?;
        let sp = ctrl.loss(g, s_e, 0.5)?;
        total_loss(g, task, vib, pred, layer, sp, 0.5)
    })?;
    Ok(LossGradcheck {
        task,
        vib,
        kl_term,
        pred,
        layer,
        sparsity,
        total,
    })
}
