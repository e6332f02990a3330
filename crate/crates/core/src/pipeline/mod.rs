//! Training loops: teacher training, the pruning phase, mask binarization
//! and the finetuning phase, for the three pruning variants.

mod gradcheck;
mod optim;

pub use gradcheck::{loss_gradcheck, store_gradcheck, LossGradcheck};
pub use optim::{AdamW, Group};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};

use crate::data::{subset, Dataset};
use crate::error::{Error, Result};
use crate::gates::{GateInit, VibGate};
use crate::model::{argmax_rows, cross_entropy, Betas, GatedTransformer, Mode, Tokens};
use crate::objective::{
    ensure_w_layer, layer_distill, layer_map, pred_distill, total_loss, vib_loss, CountModel,
    Keeps, KlDirection, Metric, SparsityController, W_LAYER,
};
use crate::tensor::{Graph, ParamId, Real, Tensor};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Full data, all weights trainable.
    VTrans,
    /// A stratified data subset, all weights trainable.
    Fast,
    /// A data subset; only gates, norms and biases trainable.
    Faster,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::VTrans => "vtrans",
            Variant::Fast => "fast",
            Variant::Faster => "faster",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "vtrans" => Some(Variant::VTrans),
            "fast" => Some(Variant::Fast),
            "faster" => Some(Variant::Faster),
            _ => None,
        }
    }

    pub fn default_subset_fraction(self) -> f64 {
        match self {
            Variant::VTrans => 1.0,
            Variant::Fast | Variant::Faster => 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Teacher,
    Prune,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Teacher => "teacher",
            Phase::Prune => "prune",
            Phase::Finetune => "finetune",
        }
    }
}

/// One optimizer step's worth of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss_total: f64,
    pub loss_task: f64,
    pub loss_vib: f64,
    pub loss_pred: f64,
    pub loss_layer: f64,
    pub loss_sparsity: f64,
    pub s_e: f64,
    pub t_cur: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Set on the last step of each epoch.
    pub val_accuracy: Option<f64>,
}

/// Receiver of per-step metrics.
pub trait MetricsSink {
    fn record(&mut self, rec: &StepRecord) -> Result<()>;
}

impl MetricsSink for Vec<StepRecord> {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Discards every record.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &StepRecord) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub epochs_prune: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub lr_weights: f64,
    pub lr_gates: f64,
    pub lambda_lr: f64,
    pub weight_decay: f64,
    pub subset_fraction: f64,
    pub seed: u64,
    pub tau: f64,
    pub temperature: f64,
    pub target: f64,
    pub metric: Metric,
    pub eta: f64,
    pub kl_direction: KlDirection,
    pub betas: Betas,
    pub gate_init: GateInit,
    /// Fraction of pruning steps over which the target ramps up.
    pub warmup_fraction: f64,
    /// Sequence length FLOPs are counted at; `None` uses the data's.
    pub flops_seq_len: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::VTrans,
            epochs_prune: 10,
            epochs_finetune: 3,
            batch_size: 32,
            lr_weights: 3e-4,
            lr_gates: 3e-3,
            lambda_lr: 0.01,
            weight_decay: 0.01,
            subset_fraction: 1.0,
            seed: 0,
            tau: 0.0,
            temperature: 1.0,
            target: 0.5,
            metric: Metric::Parameters,
            eta: 0.5,
            kl_direction: KlDirection::StudentTeacher,
            betas: Betas::default(),
            gate_init: GateInit::default(),
            warmup_fraction: 0.3,
            flops_seq_len: None,
        }
    }
}

impl RunConfig {
    /// Defaults for `variant`, including its data fraction.
    pub fn for_variant(variant: Variant) -> Self {
        RunConfig {
            variant,
            subset_fraction: variant.default_subset_fraction(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::VTrans && self.subset_fraction != 1.0 {
            return Err(Error::contract(
                "variant vtrans requires subset_fraction = 1",
            ));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::contract(format!(
                "subset_fraction {} outside (0, 1]",
                self.subset_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::contract(format!("eta {} outside [0, 1]", self.eta)));
        }
        if !(0.0..1.0).contains(&self.target) {
            return Err(Error::contract(format!(
                "target {} outside [0, 1)",
                self.target
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::contract("temperature must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::contract("warmup_fraction outside [0, 1]"));
        }
        self.gate_init.validate()
    }
}

fn is_gate(name: &str) -> bool {
    name.starts_with("gate.")
}

fn is_norm(name: &str) -> bool {
    name.starts_with("ln_f.") || name.contains(".ln1.") || name.contains(".ln2.")
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

/// Which parameters an optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezePolicy {
    pub variant: Variant,
    pub phase: Phase,
}

impl FreezePolicy {
    pub fn trainable(&self, name: &str) -> bool {
        let gate = is_gate(name);
        if self.phase == Phase::Finetune && gate {
            return false;
        }
        if gate || name == W_LAYER {
            return true;
        }
        match self.variant {
            Variant::VTrans | Variant::Fast => true,
            Variant::Faster => is_norm(name) || is_bias(name),
        }
    }
}

/// Mean accuracy of eval-mode predictions.
pub fn accuracy<R: Real>(
    model: &GatedTransformer<R>,
    data: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut rng = Rng::seed_from_u64(0);
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (tokens, labels) = data.batch(chunk);
        let logits = model.logits(&tokens, Mode::Eval, &mut rng)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&labels)
            .filter(|(a, b)| a == b)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy of an extracted dense model.
pub fn dense_accuracy<R: Real>(
    model: &crate::extract::DenseModel<R>,
    data: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (tokens, labels) = data.batch(chunk);
        let logits = model.forward(&tokens)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&labels)
            .filter(|(a, b)| a == b)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order
}

fn divergence(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Divergence {
            step,
            detail: format!("{op}: {detail}"),
        },
        other => other,
    }
}

fn finite_or_diverge(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("{what} is {v}"),
        })
    }
}

/// Trains an ungated model on the task loss alone.
pub fn train_teacher<R: Real>(
    model: &mut GatedTransformer<R>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TeacherConfig,
    sink: &mut dyn MetricsSink,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut opt = AdamW::new();
    for id in model.weight_ids() {
        let wd = if is_bias(model.params.name(id)) {
            0.0
        } else {
            cfg.weight_decay
        };
        opt.add(
            &model.params,
            id,
            Group {
                lr: cfg.lr,
                weight_decay: wd,
            },
            None,
        );
    }
    let mut order_rng = Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut noise_rng = Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let order = shuffled(train.len(), &mut order_rng);
        let n_batches = order.len().div_ceil(cfg.batch_size);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (tokens, labels) = train.batch(chunk);
            let mut g = Graph::new();
            let run = |g: &mut Graph<R>, rng: &mut Rng| -> Result<crate::tensor::Var> {
                let t = model.forward(g, &tokens, Mode::Train, rng)?;
                cross_entropy(g, t.logits, &labels)
            };
            let loss = run(&mut g, &mut noise_rng).map_err(|e| divergence(step, e))?;
            let lv = g.scalar(loss).as_f64();
            finite_or_diverge(step, "teacher loss", lv)?;
            g.backward(loss)?;
            opt.step(&mut model.params, &g);
            let val_accuracy = match val {
                Some(v) if bi + 1 == n_batches => Some(accuracy(model, v, 256)?),
                _ => None,
            };
            sink.record(&StepRecord {
                step,
                phase: Phase::Teacher,
                loss_total: lv,
                loss_task: lv,
                loss_vib: 0.0,
                loss_pred: 0.0,
                loss_layer: 0.0,
                loss_sparsity: 0.0,
                s_e: 0.0,
                t_cur: 0.0,
                lambda1: 0.0,
                lambda2: 0.0,
                val_accuracy,
            })?;
            step += 1;
        }
    }
    Ok(())
}

/// Eval-mode teacher outputs for every example, computed once.
struct TeacherCache<R> {
    classes: usize,
    logits: Vec<R>,
    /// Per layer, `N × seq × d` flattened.
    hiddens: Vec<Vec<R>>,
    row: usize,
}

impl<R: Real> TeacherCache<R> {
    fn build(teacher: &GatedTransformer<R>, data: &Dataset, batch: usize) -> Result<Self> {
        let c = &teacher.config;
        let row = data.seq * c.width;
        let mut cache = TeacherCache {
            classes: c.num_classes,
            logits: Vec::with_capacity(data.len() * c.num_classes),
            hiddens: vec![Vec::with_capacity(data.len() * row); c.layers],
            row,
        };
        let mut rng = Rng::seed_from_u64(0);
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let (tokens, _) = data.batch(chunk);
            let mut g = Graph::new();
            let t = teacher.forward(&mut g, &tokens, Mode::Eval, &mut rng)?;
            cache.logits.extend_from_slice(g.value(t.logits).data());
            for (dst, &h) in cache.hiddens.iter_mut().zip(&t.hidden_states) {
                dst.extend_from_slice(g.value(h).data());
            }
        }
        Ok(cache)
    }

    fn logits(&self, idx: &[usize]) -> Tensor<R> {
        let c = self.classes;
        let data = idx
            .iter()
            .flat_map(|&i| self.logits[i * c..(i + 1) * c].iter().copied())
            .collect();
        Tensor::new(&[idx.len(), c], data).expect("sizes match")
    }

    fn hiddens(&self, idx: &[usize], seq: usize) -> Vec<Tensor<R>> {
        let r = self.row;
        self.hiddens
            .iter()
            .map(|h| {
                let data = idx
                    .iter()
                    .flat_map(|&i| h[i * r..(i + 1) * r].iter().copied())
                    .collect();
                Tensor::new(&[idx.len(), seq, r / seq], data).expect("sizes match")
            })
            .collect()
    }
}

/// Layers whose FFN layer gate is kept at threshold `tau`.
pub fn alive_layers<R: Real>(model: &GatedTransformer<R>) -> Vec<bool> {
    match model.gates() {
        None => vec![true; model.config.layers],
        Some(gs) => gs
            .layers
            .iter()
            .map(|l| l.layer_ffn.hard_mask(&model.params, gs.tau)[0])
            .collect(),
    }
}

/// Per-entry survival of every network weight under the model's hard
/// masks: an entry survives iff every gate unit it depends on is kept.
pub fn survival_masks<R: Real>(model: &GatedTransformer<R>) -> BTreeMap<ParamId, Vec<bool>> {
    let mut out = BTreeMap::new();
    let Some(gs) = model.gates() else {
        for id in model.weight_ids() {
            out.insert(id, vec![true; model.params.get(id).len()]);
        }
        return out;
    };
    let p = &model.params;
    let c = &model.config;
    let (d, dh, r) = (c.width, c.head_dim(), c.ffn_dim);
    let h = |g: &VibGate| g.hard_mask(p, gs.tau);
    let km = h(&gs.embedding);
    let cols = |rows: usize, f: &dyn Fn(usize) -> bool| -> Vec<bool> {
        (0..rows).flat_map(|_| (0..d).map(f)).collect()
    };
    out.insert(model.emb_tok, cols(c.vocab_size, &|j| km[j]));
    out.insert(model.emb_pos, cols(c.max_seq, &|j| km[j]));
    for (lp, lg) in model.layers.iter().zip(&gs.layers) {
        let la = h(&lg.layer_mha)[0];
        let lf = h(&lg.layer_ffn)[0];
        let ka = h(&lg.heads);
        let ki = h(&lg.inter);
        let ko = h(&lg.out);
        let vec_m = |alive: bool| -> Vec<bool> { km.iter().map(|&k| alive && k).collect() };
        out.insert(lp.ln1_w, vec_m(la));
        out.insert(lp.ln1_b, vec_m(la));
        out.insert(lp.bo, vec_m(la));
        let proj: Vec<bool> = (0..d)
            .flat_map(|j| (0..d).map(move |col| (j, col)))
            .map(|(j, col)| la && km[j] && ka[col / dh])
            .collect();
        let proj_b: Vec<bool> = (0..d).map(|col| la && ka[col / dh]).collect();
        for (w, b) in [(lp.wq, lp.bq), (lp.wk, lp.bk), (lp.wv, lp.bv)] {
            out.insert(w, proj.clone());
            out.insert(b, proj_b.clone());
        }
        let wo: Vec<bool> = (0..d)
            .flat_map(|row| (0..d).map(move |j| (row, j)))
            .map(|(row, j)| la && ka[row / dh] && km[j])
            .collect();
        out.insert(lp.wo, wo);
        out.insert(lp.ln2_w, vec_m(lf));
        out.insert(lp.ln2_b, vec_m(lf));
        let wu: Vec<bool> = (0..d)
            .flat_map(|j| (0..r).map(move |k| (j, k)))
            .map(|(j, k)| lf && km[j] && ki[k])
            .collect();
        out.insert(lp.wu, wu);
        out.insert(lp.bu, ki.iter().map(|&k| lf && k).collect());
        let wd: Vec<bool> = (0..r)
            .flat_map(|k| (0..d).map(move |j| (k, j)))
            .map(|(k, j)| lf && ki[k] && ko[j] && km[j])
            .collect();
        out.insert(lp.wd, wd);
        out.insert(lp.bd, (0..d).map(|j| lf && ko[j] && km[j]).collect());
    }
    out.insert(model.ln_f_w, km.clone());
    out.insert(model.ln_f_b, km.clone());
    out.insert(
        model.cls_w,
        (0..d)
            .flat_map(|j| (0..c.num_classes).map(move |_| j))
            .map(|j| km[j])
            .collect(),
    );
    out.insert(model.cls_b, vec![true; c.num_classes]);
    out
}

/// Result of a pruning phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub controller: SparsityController,
    pub steps: usize,
    /// Expected sparsity at the last step.
    pub final_s_e: f64,
    /// Data actually used (after subsetting).
    pub train_size: usize,
}

struct LossParts {
    total: f64,
    task: f64,
    vib: f64,
    pred: f64,
    layer: f64,
    sparsity: f64,
    s_e: f64,
}

/// Shared per-step computation of the pruning and finetuning phases.
#[allow(clippy::too_many_arguments)]
fn distill_step<R: Real>(
    student: &GatedTransformer<R>,
    cache: &TeacherCache<R>,
    data: &Dataset,
    chunk: &[usize],
    cfg: &RunConfig,
    teacher_layers: &[usize],
    sparsity: Option<(&CountModel, &SparsityController, f64)>,
    rng: &mut Rng,
    g: &mut Graph<R>,
) -> Result<LossParts> {
    let (tokens, labels): (Tokens, Vec<usize>) = data.batch(chunk);
    let trace = student.forward(g, &tokens, Mode::Train, rng)?;
    let task = cross_entropy(g, trace.logits, &labels)?;
    let vib = vib_loss(g, student)?;
    let t_logits = cache.logits(chunk);
    let pred = pred_distill(g, trace.logits, &t_logits, cfg.kl_direction)?;
    let t_hidden = cache.hiddens(chunk, data.seq);
    let w_id = student
        .params
        .id(W_LAYER)
        .ok_or_else(|| Error::contract("student has no w_layer"))?;
    let s_vals: Vec<Tensor<R>> = trace
        .hidden_states
        .iter()
        .map(|&h| g.value(h).clone())
        .collect();
    let mapping = layer_map(
        &s_vals,
        &t_hidden,
        teacher_layers,
        student.params.get(w_id),
        &alive_layers(student),
    )?;
    let w = g.param(&student.params, w_id);
    let layer = layer_distill(
        g,
        &trace.hidden_states,
        &t_hidden,
        teacher_layers,
        w,
        &mapping,
    )?;
    let (sp, s_e_val) = match sparsity {
        Some((counts, ctrl, t_cur)) => {
            let keeps = Keeps::soft(g, student, cfg.tau, cfg.temperature)?;
            let s_e = counts.sparsity(g, &keeps)?;
            (ctrl.loss(g, s_e, t_cur)?, g.scalar(s_e).as_f64())
        }
        None => (g.scalar_const(0.0), f64::NAN),
    };
    let total = total_loss(g, task, vib, pred, layer, sp, cfg.eta)?;
    g.backward(total)?;
    let v = |x| g.scalar(x).as_f64();
    Ok(LossParts {
        total: v(total),
        task: v(task),
        vib: v(vib),
        pred: v(pred),
        layer: v(layer),
        sparsity: v(sp),
        s_e: s_e_val,
    })
}

/// Registers trainable student parameters with the optimizer.
fn build_optimizer<R: Real>(
    student: &mut GatedTransformer<R>,
    cfg: &RunConfig,
    policy: FreezePolicy,
    masks: Option<&BTreeMap<ParamId, Vec<bool>>>,
) -> AdamW {
    let mut opt = AdamW::new();
    let ids: Vec<ParamId> = student.params.ids().collect();
    for id in ids {
        let name = alloc::string::String::from(student.params.name(id));
        let name = name.as_str();
        let on = policy.trainable(name);
        student.params.set_requires_grad(id, on);
        if !on {
            continue;
        }
        let gate = is_gate(name);
        let lr = if gate || name == W_LAYER {
            cfg.lr_gates
        } else {
            cfg.lr_weights
        };
        let wd = if gate || is_bias(name) {
            0.0
        } else {
            cfg.weight_decay
        };
        let mask = masks.and_then(|m| m.get(&id).cloned());
        opt.add(
            &student.params,
            id,
            Group {
                lr,
                weight_decay: wd,
            },
            mask,
        );
    }
    opt
}

/// The pruning phase: joint training of weights and gates under the
/// distillation, compression and sparsity objectives.
pub fn prune_phase<R: Real>(
    student: &mut GatedTransformer<R>,
    teacher: &GatedTransformer<R>,
    train: &Dataset,
    cfg: &RunConfig,
    sink: &mut dyn MetricsSink,
) -> Result<PruneOutcome> {
    cfg.validate()?;
    if student.gates().is_none() {
        return Err(Error::contract("prune_phase needs a gated student"));
    }
    if student.is_binarized() {
        return Err(Error::contract(
            "prune_phase on an already binarized student",
        ));
    }
    student.set_tau(cfg.tau);
    let data = subset(train, cfg.subset_fraction, cfg.seed)?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    ensure_w_layer(&mut student.params, student.config.width)?;
    let policy = FreezePolicy {
        variant: cfg.variant,
        phase: Phase::Prune,
    };
    let mut opt = build_optimizer(student, cfg, policy, None);

    let seq = cfg.flops_seq_len.unwrap_or(data.seq);
    let counts = CountModel::new(&student.config, cfg.metric, seq)?;
    let batches = data.len().div_ceil(cfg.batch_size);
    let total_steps = batches * cfg.epochs_prune;
    let warmup = libm::round(cfg.warmup_fraction * total_steps as f64) as usize;
    let mut ctrl = SparsityController::new(cfg.metric, cfg.target, cfg.lambda_lr, warmup)?;
    let cache = TeacherCache::build(teacher, &data, 256)?;
    let teacher_layers: Vec<usize> = (0..teacher.config.layers).collect();

    let mut order_rng = Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut noise_rng = Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let mut step = 0;
    let mut final_s_e = f64::NAN;
    for _ in 0..cfg.epochs_prune {
        let order = shuffled(data.len(), &mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let t_cur = ctrl.t_cur(step);
            let mut g = Graph::new();
            let parts = distill_step(
                student,
                &cache,
                &data,
                chunk,
                cfg,
                &teacher_layers,
                Some((&counts, &ctrl, t_cur)),
                &mut noise_rng,
                &mut g,
            )
            .map_err(|e| divergence(step, e))?;
            finite_or_diverge(step, "loss", parts.total)?;
            opt.step(&mut student.params, &g);
            ctrl.update(parts.s_e, t_cur);
            final_s_e = parts.s_e;
            sink.record(&StepRecord {
                step,
                phase: Phase::Prune,
                loss_total: parts.total,
                loss_task: parts.task,
                loss_vib: parts.vib,
                loss_pred: parts.pred,
                loss_layer: parts.layer,
                loss_sparsity: parts.sparsity,
                s_e: parts.s_e,
                t_cur,
                lambda1: ctrl.lambda1,
                lambda2: ctrl.lambda2,
                val_accuracy: None,
            })?;
            step += 1;
        }
    }
    Ok(PruneOutcome {
        controller: ctrl,
        steps: step,
        final_s_e,
        train_size: data.len(),
    })
}

/// Freezes every gate to the constant `μ ⊙ hard_mask(τ)`.
pub fn binarize<R: Real>(student: &mut GatedTransformer<R>, tau: f64) -> Result<()> {
    let gs = student
        .gates
        .as_mut()
        .ok_or_else(|| Error::contract("binarize needs a gated student"))?;
    if gs.binarized {
        return Ok(());
    }
    gs.tau = tau;
    if !alive_layers(student).iter().any(|&a| a) {
        return Err(Error::DegenerateModel(
            "every layer's feed-forward gate is dropped".into(),
        ));
    }
    if let Some(gs) = student.gates.as_mut() {
        gs.binarized = true;
    }
    student.freeze_gates();
    Ok(())
}

/// Hard sparsity of the binarized student under `metric`.
pub fn hard_sparsity<R: Real>(
    student: &GatedTransformer<R>,
    metric: Metric,
    seq_len: usize,
) -> Result<f64> {
    let tau = student.gates().map_or(0.0, |g| g.tau);
    let counts = CountModel::new(&student.config, metric, seq_len)?;
    let mut g = Graph::<R>::new();
    let keeps = Keeps::hard(&mut g, student, tau)?;
    let s = counts.sparsity(&mut g, &keeps)?;
    Ok(g.scalar(s).as_f64())
}

/// The finetuning phase: distillation and compression terms only, with
/// updates restricted to weights that survive the hard masks.
pub fn finetune_phase<R: Real>(
    student: &mut GatedTransformer<R>,
    teacher: &GatedTransformer<R>,
    train: &Dataset,
    cfg: &RunConfig,
    sink: &mut dyn MetricsSink,
) -> Result<usize> {
    cfg.validate()?;
    if !student.is_binarized() {
        return Err(Error::contract("finetune_phase needs a binarized student"));
    }
    if cfg.epochs_finetune == 0 {
        return Ok(0);
    }
    let data = subset(train, cfg.subset_fraction, cfg.seed)?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    ensure_w_layer(&mut student.params, student.config.width)?;
    let policy = FreezePolicy {
        variant: cfg.variant,
        phase: Phase::Finetune,
    };
    let masks = survival_masks(student);
    let mut opt = build_optimizer(student, cfg, policy, Some(&masks));
    let cache = TeacherCache::build(teacher, &data, 256)?;
    let teacher_layers: Vec<usize> = (0..teacher.config.layers).collect();

    let mut order_rng = Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(3);
    let mut noise_rng = Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(4);
    let mut step = 0;
    for _ in 0..cfg.epochs_finetune {
        let order = shuffled(data.len(), &mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let parts = distill_step(
                student,
                &cache,
                &data,
                chunk,
                cfg,
                &teacher_layers,
                None,
                &mut noise_rng,
                &mut g,
            )
            .map_err(|e| divergence(step, e))?;
            finite_or_diverge(step, "loss", parts.total)?;
            opt.step(&mut student.params, &g);
            sink.record(&StepRecord {
                step,
                phase: Phase::Finetune,
                loss_total: parts.total,
                loss_task: parts.task,
                loss_vib: parts.vib,
                loss_pred: parts.pred,
                loss_layer: parts.layer,
                loss_sparsity: 0.0,
                s_e: 0.0,
                t_cur: 0.0,
                lambda1: 0.0,
                lambda2: 0.0,
                val_accuracy: None,
            })?;
            step += 1;
        }
    }
    Ok(step)
}

/// Builds a student from `teacher` with the run's gate settings.
pub fn build_student<R: Real>(
    teacher: &GatedTransformer<R>,
    cfg: &RunConfig,
) -> Result<GatedTransformer<R>> {
    let init = GateInit {
        seed: cfg.seed ^ cfg.gate_init.seed,
        ..cfg.gate_init
    };
    let mut s = GatedTransformer::build_student(teacher, &init, &cfg.betas)?;
    s.set_tau(cfg.tau);
    ensure_w_layer(&mut s.params, s.config.width)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_policy_names() {
        let p = FreezePolicy {
            variant: Variant::Faster,
            phase: Phase::Prune,
        };
        assert!(p.trainable("gate.heads.0.mu"));
        assert!(p.trainable("layer.1.ln2.weight"));
        assert!(p.trainable("layer.1.wq.bias"));
        assert!(p.trainable("ln_f.weight"));
        assert!(!p.trainable("layer.1.wq.weight"));
        assert!(!p.trainable("emb.tok"));
        assert!(!p.trainable("cls.weight"));
        let p = FreezePolicy {
            variant: Variant::VTrans,
            phase: Phase::Finetune,
        };
        assert!(!p.trainable("gate.heads.0.mu"));
        assert!(p.trainable("emb.tok"));
    }

    #[test]
    fn vtrans_needs_full_data() {
        let c = RunConfig {
            subset_fraction: 0.5,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Contract(_))));
        assert!(RunConfig::for_variant(Variant::Fast).validate().is_ok());
    }
}
