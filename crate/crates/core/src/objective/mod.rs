//! Training objective: task loss, VIB compression cost, distillation terms
//! and the Lagrangian sparsity penalty.

mod counts;

pub use counts::{CountModel, Keeps, LayerKeeps, Metric};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::GatedTransformer;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Name of the learnable hidden-state projection in the student store.
pub const W_LAYER: &str = "distill.w_layer";

/// Direction of the prediction-distillation divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `KL(p_s ‖ p_t)`
    #[default]
    StudentTeacher,
    /// `KL(p_t ‖ p_s)`
    TeacherStudent,
}

/// Distillation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Weight of the prediction term; the layer term gets `1 − eta`.
    pub eta: f64,
    pub direction: KlDirection,
    /// Teacher layers to distill; `None` means all of them.
    pub teacher_layers: Option<Vec<usize>>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            eta: 0.5,
            direction: KlDirection::StudentTeacher,
            teacher_layers: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::contract(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

/// Adds the identity-initialized `d×d` projection to `store` (no-op when
/// it already exists) and returns its handle.
pub fn ensure_w_layer<R: Real>(store: &mut ParamStore<R>, width: usize) -> Result<ParamId> {
    if let Some(id) = store.id(W_LAYER) {
        if store.get(id).shape() != [width, width] {
            return Err(Error::shape("w_layer", format!("expected {width}x{width}")));
        }
        return Ok(id);
    }
    let mut eye = Tensor::zeros(&[width, width]);
    for i in 0..width {
        eye.data_mut()[i * width + i] = R::one();
    }
    store.insert(W_LAYER, eye)
}

/// `Σ_gates β · Σ_j log(1 + μ_j²/σ_j²)`.
pub fn vib_loss<R: Real>(g: &mut Graph<R>, model: &GatedTransformer<R>) -> Result<Var> {
    let gates = model
        .gates()
        .ok_or_else(|| Error::contract("vib_loss needs a gated model"))?;
    let mut total = g.scalar_const(0.0);
    for gate in gates.iter() {
        if gate.beta == 0.0 {
            continue;
        }
        let kl = gate.kl_term(g, &model.params)?;
        let kl = g.scale(kl, gate.beta)?;
        total = g.add(total, kl)?;
    }
    Ok(total)
}

/// Batch-mean KL divergence between the softmax distributions of student
/// and teacher logits. Teacher logits are treated as constants.
pub fn pred_distill<R: Real>(
    g: &mut Graph<R>,
    student_logits: Var,
    teacher_logits: &Tensor<R>,
    direction: KlDirection,
) -> Result<Var> {
    let shape = g.shape(student_logits).to_vec();
    if shape != teacher_logits.shape() || shape.len() != 2 {
        return Err(Error::shape(
            "pred_distill",
            format!(
                "student {:?} vs teacher {:?}",
                shape,
                teacher_logits.shape()
            ),
        ));
    }
    let t = g.constant(teacher_logits.clone())?;
    let ls = g.log_softmax_lastdim(student_logits)?;
    let lt = g.log_softmax_lastdim(t)?;
    let (lp, lq) = match direction {
        KlDirection::StudentTeacher => (ls, lt),
        KlDirection::TeacherStudent => (lt, ls),
    };
    let p = g.exp(lp)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let s = g.sum(terms)?;
    g.scale(s, 1.0 / shape[0] as f64)
}

/// Mean squared error between `h_s · w` and `h_t`, in `f64`.
fn projected_mse<R: Real>(h_s: &Tensor<R>, w: &Tensor<R>, h_t: &Tensor<R>) -> f64 {
    let d = *w.shape().first().unwrap_or(&0);
    let rows = h_s.len() / d.max(1);
    let mut proj = vec![R::zero(); rows * d];
    R::gemm(
        rows,
        d,
        d,
        h_s.data(),
        false,
        w.data(),
        false,
        &mut proj,
        false,
    );
    let sum: f64 = proj
        .iter()
        .zip(h_t.data())
        .map(|(a, b)| {
            let e = a.as_f64() - b.as_f64();
            e * e
        })
        .sum();
    sum / proj.len() as f64
}

/// For each teacher layer in `teacher_layers`, the alive student layer
/// whose projected hidden state is closest in mean squared error (ties go
/// to the smaller index). Pure function of values; no graph is recorded.
pub fn layer_map<R: Real>(
    student_hiddens: &[Tensor<R>],
    teacher_hiddens: &[Tensor<R>],
    teacher_layers: &[usize],
    w_layer: &Tensor<R>,
    alive: &[bool],
) -> Result<Vec<usize>> {
    if alive.len() != student_hiddens.len() {
        return Err(Error::shape(
            "layer_map",
            format!(
                "{} alive flags for {} student layers",
                alive.len(),
                student_hiddens.len()
            ),
        ));
    }
    if !alive.iter().any(|&a| a) {
        return Err(Error::DegenerateModel(
            "no alive student layer to distill into".into(),
        ));
    }
    teacher_layers
        .iter()
        .map(|&i| {
            let h_t = teacher_hiddens
                .get(i)
                .ok_or_else(|| Error::contract(format!("teacher layer {i} out of range")))?;
            let mut best: Option<(usize, f64)> = None;
            for (j, h_s) in student_hiddens.iter().enumerate() {
                if !alive[j] {
                    continue;
                }
                if h_s.shape() != h_t.shape() {
                    return Err(Error::shape(
                        "layer_map",
                        format!("student {:?} vs teacher {:?}", h_s.shape(), h_t.shape()),
                    ));
                }
                let e = projected_mse(h_s, w_layer, h_t);
                if best.is_none_or(|(_, b)| e < b) {
                    best = Some((j, e));
                }
            }
            Ok(best.expect("at least one alive layer").0)
        })
        .collect()
}

/// `Σ_i mean((H_s^{m(i)} · W_layer − H_t^i)²)` over the mapped pairs.
pub fn layer_distill<R: Real>(
    g: &mut Graph<R>,
    student_hiddens: &[Var],
    teacher_hiddens: &[Tensor<R>],
    teacher_layers: &[usize],
    w_layer: Var,
    mapping: &[usize],
) -> Result<Var> {
    if mapping.len() != teacher_layers.len() {
        return Err(Error::shape(
            "layer_distill",
            "mapping length differs from teacher layer set",
        ));
    }
    let mut total = g.scalar_const(0.0);
    for (&i, &j) in teacher_layers.iter().zip(mapping) {
        let t = g.constant(teacher_hiddens[i].clone())?;
        let p = g.matmul(student_hiddens[j], w_layer)?;
        let diff = g.sub(p, t)?;
        let sq = g.square(diff)?;
        let mse = g.mean(sq)?;
        total = g.add(total, mse)?;
    }
    Ok(total)
}

/// Lagrangian state of the sparsity constraint `s_e = t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityController {
    pub metric: Metric,
    pub target: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_lr: f64,
    /// Steps over which the working target ramps linearly from 0 to `target`.
    pub warmup_steps: usize,
}

impl SparsityController {
    pub fn new(metric: Metric, target: f64, lambda_lr: f64, warmup_steps: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&target) {
            return Err(Error::contract(format!(
                "target sparsity {target} outside [0, 1)"
            )));
        }
        Ok(SparsityController {
            metric,
            target,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda_lr,
            warmup_steps,
        })
    }

    /// Working target at `step` (0-based).
    pub fn t_cur(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.target
        } else {
            self.target * step as f64 / self.warmup_steps as f64
        }
    }

    /// `λ₁ (s_e − t) + λ₂ (s_e − t)²` with λ held constant.
    pub fn loss<R: Real>(&self, g: &mut Graph<R>, s_e: Var, t_cur: f64) -> Result<Var> {
        let v = g.add_scalar(s_e, -t_cur)?;
        let lin = g.scale(v, self.lambda1)?;
        let sq = g.square(v)?;
        let quad = g.scale(sq, self.lambda2)?;
        g.add(lin, quad)
    }

    /// Ascent step on the multipliers after observing `s_e`.
    pub fn update(&mut self, s_e: f64, t_cur: f64) {
        let v = s_e - t_cur;
        self.lambda1 += self.lambda_lr * v;
        self.lambda2 = (self.lambda2 + self.lambda_lr * v * v).max(0.0);
    }
}

/// `task + η·pred + (1−η)·layer + vib + sparsity`.
pub fn total_loss<R: Real>(
    g: &mut Graph<R>,
    task: Var,
    vib: Var,
    pred: Var,
    layer: Var,
    sparsity: Var,
    eta: f64,
) -> Result<Var> {
    let p = g.scale(pred, eta)?;
    let l = g.scale(layer, 1.0 - eta)?;
    let mut t = g.add(task, p)?;
    t = g.add(t, l)?;
    t = g.add(t, vib)?;
    g.add(t, sparsity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::{GateInit, Site, VibGate};
    use crate::model::Betas;

    #[test]
    fn sparsity_loss_examples() {
        let mut g = Graph::<f64>::new();
        let mut c = SparsityController::new(Metric::Parameters, 0.5, 0.01, 0).unwrap();
        c.lambda1 = 0.1;
        c.lambda2 = 0.5;
        let s = g.scalar_const(0.6);
        let l = c.loss(&mut g, s, 0.5).unwrap();
        assert!((g.scalar(l) - 0.015).abs() < 1e-15);
        c.lambda1 = -1.0;
        c.lambda2 = 0.0;
        let s = g.scalar_const(0.4);
        let l = c.loss(&mut g, s, 0.5).unwrap();
        assert!((g.scalar(l) - 0.1).abs() < 1e-15);
        let s = g.scalar_const(0.5);
        let l = c.loss(&mut g, s, 0.5).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn lagrangian_update_examples() {
        let mut c = SparsityController::new(Metric::Parameters, 0.5, 1.0, 0).unwrap();
        c.lambda1 = 0.3;
        c.lambda2 = 0.1;
        let before = c.clone();
        c.update(0.5, 0.5);
        assert_eq!(c, before);
        c.update(0.7, 0.5);
        assert!((c.lambda1 - 0.5).abs() < 1e-12);
        assert!((c.lambda2 - 0.14).abs() < 1e-12);
    }

    #[test]
    fn target_ramp() {
        let c = SparsityController::new(Metric::Parameters, 0.6, 0.01, 10).unwrap();
        assert_eq!(c.t_cur(0), 0.0);
        assert!((c.t_cur(5) - 0.3).abs() < 1e-15);
        assert_eq!(c.t_cur(10), 0.6);
        assert_eq!(c.t_cur(100), 0.6);
        assert!(SparsityController::new(Metric::Flops, 1.0, 0.01, 0).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let mut g = Graph::<f64>::new();
        let v = |g: &mut Graph<f64>, x| g.scalar_const(x);
        let (a, b, c, d, e) = (
            v(&mut g, 1.0),
            v(&mut g, 2.0),
            v(&mut g, 3.0),
            v(&mut g, 5.0),
            v(&mut g, 7.0),
        );
        let t = total_loss(&mut g, a, b, c, d, e, 1.0).unwrap();
        assert_eq!(g.scalar(t), 1.0 + 2.0 + 3.0 + 7.0);
        let t = total_loss(&mut g, a, b, c, d, e, 0.5).unwrap();
        assert_eq!(g.scalar(t), 1.0 + 2.0 + 1.5 + 2.5 + 7.0);
        let z = v(&mut g, 0.0);
        let t = total_loss(&mut g, z, z, z, z, z, 0.5).unwrap();
        assert_eq!(g.scalar(t), 0.0);
    }

    #[test]
    fn pred_distill_examples() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::from_f64(&[2, 3], &[0.1, -0.4, 2.0, 1.0, 1.0, -3.0]).unwrap();
        let s = g.constant(x.clone()).unwrap();
        let k = pred_distill(&mut g, s, &x, KlDirection::StudentTeacher).unwrap();
        assert!(g.scalar(k).abs() < 1e-15);
        // p_s → (1, 0), p_t = (0.5, 0.5)
        let s = g
            .constant(Tensor::from_f64(&[1, 2], &[60.0, 0.0]).unwrap())
            .unwrap();
        let t = Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
        let k = pred_distill(&mut g, s, &t, KlDirection::StudentTeacher).unwrap();
        assert!((g.scalar(k) - core::f64::consts::LN_2).abs() < 1e-12);
        let bad = Tensor::from_f64(&[1, 3], &[0.0; 3]).unwrap();
        assert!(matches!(
            pred_distill(&mut g, s, &bad, KlDirection::StudentTeacher),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn vib_loss_examples() {
        let mut store = ParamStore::<f64>::new();
        let gate =
            VibGate::new(&mut store, Site::LayerMha, 0, 1, 2.0, &GateInit::default()).unwrap();
        store.get_mut(gate.mu).data_mut()[0] = 0.3;
        store.get_mut(gate.log_sigma).data_mut()[0] = (0.3f64).ln();
        let mut g = Graph::new();
        let kl = gate.kl_term(&mut g, &store).unwrap();
        let kl = g.scale(kl, gate.beta).unwrap();
        assert!((g.scalar(kl) - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_betas_give_zero_vib() {
        let cfg = crate::model::ModelConfig {
            width: 8,
            heads: 2,
            ffn_dim: 8,
            layers: 1,
            ..Default::default()
        };
        let t = GatedTransformer::<f64>::build_teacher(&cfg, 1).unwrap();
        let s = GatedTransformer::build_student(&t, &GateInit::default(), &Betas::zero()).unwrap();
        let mut g = Graph::new();
        let v = vib_loss(&mut g, &s).unwrap();
        assert_eq!(g.scalar(v), 0.0);
    }

    #[test]
    fn layer_map_forced_and_degenerate() {
        let h = |v: f64| Tensor::<f64>::full(&[2, 3, 2], v);
        let eye = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = [h(0.0), h(1.0), h(2.0)];
        let t = [h(0.0), h(1.0), h(2.0)];
        assert_eq!(
            layer_map(&s, &t, &[0, 1, 2], &eye, &[true; 3]).unwrap(),
            [0, 1, 2]
        );
        assert_eq!(
            layer_map(&s, &t, &[0, 1, 2], &eye, &[false, true, false]).unwrap(),
            [1, 1, 1]
        );
        assert!(matches!(
            layer_map(&s, &t, &[0], &eye, &[false; 3]),
            Err(Error::DegenerateModel(_))
        ));
        // equal distances tie toward the smaller index
        let t = [h(1.0)];
        let s = [h(0.0), h(2.0)];
        assert_eq!(layer_map(&s, &t, &[0], &eye, &[true, true]).unwrap(), [0]);
    }

    #[test]
    fn layer_distill_with_zero_projection() {
        let mut g = Graph::<f64>::new();
        let ht = Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let hs = g
            .constant(Tensor::from_f64(&[1, 2, 2], &[9.0, 9.0, 9.0, 9.0]).unwrap())
            .unwrap();
        let w = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        let l = layer_distill(&mut g, &[hs], &[ht], &[0], w, &[0]).unwrap();
        assert!((g.scalar(l) - 7.5).abs() < 1e-12);
    }
}
