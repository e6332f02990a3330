//! Whole phases driven from a [`Config`], shared by the CLI and tests.

use vibprune_core::data::{generate, TaskData};
use vibprune_core::extract::{extract_dense, DenseModel};
use vibprune_core::model::GatedTransformer;
use vibprune_core::pipeline::{
    accuracy, binarize, build_student, dense_accuracy, finetune_phase, hard_sparsity, prune_phase,
    train_teacher, MetricsSink, PruneOutcome,
};

use crate::config::Config;
use crate::datafile;
use crate::error::Result;
use crate::report::Sidecar;

pub fn task_data(cfg: &Config) -> Result<TaskData> {
    match &cfg.data_path {
        Some(p) => datafile::load(p),
        None => Ok(generate(&cfg.task)?),
    }
}

pub fn flops_seq_len(cfg: &Config) -> usize {
    cfg.run.flops_seq_len.unwrap_or(cfg.task.seq)
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub model: GatedTransformer<f32>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn teacher(cfg: &Config, data: &TaskData, sink: &mut dyn MetricsSink) -> Result<TeacherRun> {
    let mut model = GatedTransformer::build_teacher(&cfg.model, cfg.model_seed)?;
    train_teacher(&mut model, &data.train, Some(&data.val), &cfg.teacher, sink)?;
    Ok(TeacherRun {
        val_accuracy: accuracy(&model, &data.val, cfg.eval_batch)?,
        test_accuracy: accuracy(&model, &data.test, cfg.eval_batch)?,
        model,
    })
}

pub fn prune(
    cfg: &Config,
    teacher: &GatedTransformer<f32>,
    data: &TaskData,
    sink: &mut dyn MetricsSink,
) -> Result<(GatedTransformer<f32>, PruneOutcome)> {
    let mut student = build_student(teacher, &cfg.run)?;
    let out = prune_phase(&mut student, teacher, &data.train, &cfg.run, sink)?;
    Ok((student, out))
}

/// Binarizes `student` (if needed) and finetunes it; returns the step count.
pub fn finetune(
    cfg: &Config,
    teacher: &GatedTransformer<f32>,
    student: &mut GatedTransformer<f32>,
    data: &TaskData,
    sink: &mut dyn MetricsSink,
) -> Result<usize> {
    binarize(student, cfg.run.tau)?;
    Ok(finetune_phase(
        student,
        teacher,
        &data.train,
        &cfg.run,
        sink,
    )?)
}

/// Dense model and sidecar of a (possibly not yet binarized) student.
pub fn extract(
    cfg: &Config,
    student: &GatedTransformer<f32>,
) -> Result<(DenseModel<f32>, Sidecar)> {
    let dense = if student.gates().is_some() && !student.is_binarized() {
        let mut s = student.clone();
        binarize(&mut s, cfg.run.tau)?;
        extract_dense(&s)?
    } else {
        extract_dense(student)?
    };
    let side = Sidecar::new(&dense, &student.config, flops_seq_len(cfg))?;
    Ok((dense, side))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub teacher_val_accuracy: f64,
    pub teacher_test_accuracy: f64,
    pub final_s_e: f64,
    pub hard_sparsity: f64,
    /// Test accuracy of the extracted model.
    pub accuracy: f64,
    pub sidecar: Sidecar,
}

/// Teacher training, pruning, finetuning and extraction in one go.
pub fn pipeline(cfg: &Config, sink: &mut dyn MetricsSink) -> Result<PipelineReport> {
    let data = task_data(cfg)?;
    let t = teacher(cfg, &data, sink)?;
    let (mut student, out) = prune(cfg, &t.model, &data, sink)?;
    finetune(cfg, &t.model, &mut student, &data, sink)?;
    let hard = hard_sparsity(&student, cfg.run.metric, flops_seq_len(cfg))?;
    let (dense, sidecar) = extract(cfg, &student)?;
    Ok(PipelineReport {
        teacher_val_accuracy: t.val_accuracy,
        teacher_test_accuracy: t.test_accuracy,
        final_s_e: out.final_s_e,
        hard_sparsity: hard,
        accuracy: dense_accuracy(&dense, &data.test, cfg.eval_batch)?,
        sidecar,
    })
}
