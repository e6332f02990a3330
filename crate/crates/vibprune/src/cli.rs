//! Command-line surface.
//!
//! Every command reads `--config`, applies the overrides, and writes its
//! outputs under `--out`:
//!
//! | file | written by |
//! |---|---|
//! | `data.vibd` | train-teacher |
//! | `teacher.vibp`, `teacher.json` | train-teacher |
//! | `student.vibp`, `prune.json` | prune |
//! | `finetuned.vibp`, `finetune.json` | finetune |
//! | `dense.vibp`, `dense.json` (sidecar) | extract |
//! | `analysis/{pattern,attention,head_js}.json` | analyze |
//! | `metrics.jsonl` | every training phase, appended |

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use vibprune_core::analysis::{head_js, pruning_pattern, token_attention};
use vibprune_core::data::{CLS, SEP};
use vibprune_core::extract::extract_dense;
use vibprune_core::model::GatedTransformer;
use vibprune_core::pipeline::{accuracy, dense_accuracy, hard_sparsity, loss_gradcheck};

use crate::checkpoint::{self, Model};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::metrics::JsonlSink;
use crate::report::{self, AttentionReport, DivergenceReport, EvalReport, PatternReport};
use crate::{datafile, run};

#[derive(Debug, Parser)]
#[command(
    name = "vibprune",
    version,
    about = "Structured pruning of small transformers with variational gates"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or load) the task data and train the dense teacher.
    TrainTeacher(Common),
    /// Prune a gated copy of the teacher towards the target sparsity.
    Prune(Common),
    /// Binarize the pruned student's gates and finetune surviving weights.
    Finetune(Common),
    /// Physically remove masked structure and write the sidecar report.
    Extract(Common),
    /// Print {accuracy, params, flops} of a checkpoint on the test split.
    Eval(Common),
    /// Attention probes and the pruning pattern of a checkpoint.
    Analyze(Common),
    /// Finite-difference check of every loss component on a tiny model.
    Gradcheck(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// vtrans, fast or faster
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    /// parameters or flops
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Further `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Checkpoint to read instead of the default for the command.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl Common {
    pub fn config(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            c.set("seed", &s.to_string())?;
        }
        for (key, v) in [
            ("prune.variant", &self.variant),
            ("prune.target", &self.target),
            ("prune.metric", &self.metric),
        ] {
            if let Some(v) = v {
                c.set(key, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
            c.set(k.trim(), v.trim())?;
        }
        c.finish()
    }
}

struct Ctx {
    cfg: Config,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data(&self) -> Result<vibprune_core::data::TaskData> {
        if self.cfg.data_path.is_none() && self.path("data.vibd").exists() {
            return datafile::load(&self.path("data.vibd"));
        }
        run::task_data(&self.cfg)
    }

    fn teacher(&self) -> Result<GatedTransformer<f32>> {
        let p = self
            .cfg
            .teacher_path
            .clone()
            .unwrap_or_else(|| self.path("teacher.vibp"));
        checkpoint::load_gated(&p, &self.cfg.run.betas)
    }

    /// `--checkpoint`, else the first existing default.
    fn input(&self, defaults: &[&str]) -> Result<PathBuf> {
        if let Some(p) = &self.checkpoint {
            return Ok(p.clone());
        }
        defaults
            .iter()
            .map(|n| self.path(n))
            .find(|p| p.exists())
            .ok_or_else(|| {
                Error::Config(format!(
                    "no checkpoint given and none of {defaults:?} exist in {}",
                    self.out.display()
                ))
            })
    }

    fn sink(&self) -> Result<JsonlSink> {
        JsonlSink::append(&self.path("metrics.jsonl"))
    }
}

fn print(v: serde_json::Value) {
    println!("{v}");
}

pub fn run(cli: Cli) -> Result<()> {
    let (cmd, common) = match &cli.command {
        Command::TrainTeacher(c) => ("train-teacher", c),
        Command::Prune(c) => ("prune", c),
        Command::Finetune(c) => ("finetune", c),
        Command::Extract(c) => ("extract", c),
        Command::Eval(c) => ("eval", c),
        Command::Analyze(c) => ("analyze", c),
        Command::Gradcheck(c) => ("gradcheck", c),
    };
    let ctx = Ctx {
        cfg: common.config()?,
        out: common.out.clone(),
        checkpoint: common.checkpoint.clone(),
    };
    fs::create_dir_all(&ctx.out).map_err(Error::io(&ctx.out))?;
    match cmd {
        "train-teacher" => train_teacher(&ctx),
        "prune" => prune(&ctx),
        "finetune" => finetune(&ctx),
        "extract" => extract(&ctx),
        "eval" => eval(&ctx),
        "analyze" => analyze(&ctx),
        _ => gradcheck(&ctx),
    }
}

fn train_teacher(ctx: &Ctx) -> Result<()> {
    let data = run::task_data(&ctx.cfg)?;
    datafile::save(&ctx.path("data.vibd"), &data)?;
    let t = run::teacher(&ctx.cfg, &data, &mut ctx.sink()?)?;
    checkpoint::save_model(&ctx.path("teacher.vibp"), &Model::Gated(t.model))?;
    let v = json!({ "val_accuracy": t.val_accuracy, "test_accuracy": t.test_accuracy });
    report::write_json(&ctx.path("teacher.json"), &v)?;
    print(v);
    Ok(())
}

fn prune(ctx: &Ctx) -> Result<()> {
    let data = ctx.data()?;
    let teacher = ctx.teacher()?;
    let (student, out) = run::prune(&ctx.cfg, &teacher, &data, &mut ctx.sink()?)?;
    checkpoint::save_model(&ctx.path("student.vibp"), &Model::Gated(student))?;
    let c = &out.controller;
    let v = json!({
        "steps": out.steps,
        "train_size": out.train_size,
        "final_s_e": out.final_s_e,
        "target": c.target,
        "metric": c.metric.as_str(),
        "lambda1": c.lambda1,
        "lambda2": c.lambda2,
    });
    report::write_json(&ctx.path("prune.json"), &v)?;
    print(v);
    Ok(())
}

fn finetune(ctx: &Ctx) -> Result<()> {
    let data = ctx.data()?;
    let teacher = ctx.teacher()?;
    let p = ctx
        .cfg
        .student_path
        .clone()
        .unwrap_or_else(|| ctx.path("student.vibp"));
    let mut student = checkpoint::load_gated(&p, &ctx.cfg.run.betas)?;
    let steps = run::finetune(&ctx.cfg, &teacher, &mut student, &data, &mut ctx.sink()?)?;
    let hard = hard_sparsity(&student, ctx.cfg.run.metric, run::flops_seq_len(&ctx.cfg))?;
    let acc = accuracy(&student, &data.test, ctx.cfg.eval_batch)?;
    checkpoint::save_model(&ctx.path("finetuned.vibp"), &Model::Gated(student))?;
    let v = json!({ "steps": steps, "hard_sparsity": hard, "test_accuracy": acc });
    report::write_json(&ctx.path("finetune.json"), &v)?;
    print(v);
    Ok(())
}

fn extract(ctx: &Ctx) -> Result<()> {
    let p = ctx.input(&["finetuned.vibp", "student.vibp"])?;
    let student = checkpoint::load_gated(&p, &ctx.cfg.run.betas)?;
    let (dense, side) = run::extract(&ctx.cfg, &student)?;
    checkpoint::save_model(&ctx.path("dense.vibp"), &Model::Dense(dense))?;
    report::write_json(&ctx.path("dense.json"), &side)?;
    print(serde_json::to_value(&side).map_err(|e| Error::Format(e.to_string()))?);
    Ok(())
}

fn eval(ctx: &Ctx) -> Result<()> {
    let p = ctx.input(&["dense.vibp", "finetuned.vibp", "teacher.vibp"])?;
    let data = ctx.data()?;
    let seq = run::flops_seq_len(&ctx.cfg);
    let (accuracy, dense) = match checkpoint::load_model(&p, &ctx.cfg.run.betas)? {
        Model::Dense(d) => (dense_accuracy(&d, &data.test, ctx.cfg.eval_batch)?, d),
        Model::Gated(m) => {
            let (d, _) = run::extract(&ctx.cfg, &m)?;
            let acc = if m.gates().is_some() {
                dense_accuracy(&d, &data.test, ctx.cfg.eval_batch)?
            } else {
                accuracy(&m, &data.test, ctx.cfg.eval_batch)?
            };
            (acc, d)
        }
    };
    let r = EvalReport {
        accuracy,
        params: dense.param_count(),
        flops: dense.flop_count(seq),
    };
    print(serde_json::to_value(&r).map_err(|e| Error::Format(e.to_string()))?);
    Ok(())
}

fn analyze(ctx: &Ctx) -> Result<()> {
    let p = ctx.input(&["finetuned.vibp", "student.vibp", "teacher.vibp"])?;
    let mut model = checkpoint::load_gated(&p, &ctx.cfg.run.betas)?;
    if model.gates().is_some() && !model.is_binarized() {
        vibprune_core::pipeline::binarize(&mut model, ctx.cfg.run.tau)?;
    }
    let data = ctx.data()?;
    let dir = ctx.path("analysis");
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let tokens = if ctx.cfg.probe_tokens.is_empty() {
        vec![CLS as usize, SEP as usize]
    } else {
        ctx.cfg.probe_tokens.clone()
    };
    let pattern = pruning_pattern(&model);
    report::write_json(&dir.join("pattern.json"), &PatternReport::from(&pattern))?;
    let att = token_attention(&model, &data.test, &tokens)?;
    report::write_json(
        &dir.join("attention.json"),
        &AttentionReport::new(&tokens, &att),
    )?;
    let js = head_js(&model, &data.test)?;
    report::write_json(&dir.join("head_js.json"), &DivergenceReport::from(&js))?;
    // the extracted model must agree with the pattern read from the gates
    let dense = extract_dense(&model)?;
    if vibprune_core::analysis::dense_pruning_pattern(&dense) != pattern {
        return Err(Error::Core(vibprune_core::Error::Contract(
            "pruning pattern differs from the extracted model".into(),
        )));
    }
    print(
        json!({ "dir": dir.display().to_string(), "heads_compared": js.heads.len(), "width_kept": pattern.width_kept }),
    );
    Ok(())
}

/// Thresholds for [`loss_gradcheck`]: 1e-4 for the isolated KL term, 1e-3 otherwise.
pub fn gradcheck_threshold(component: &str) -> f64 {
    if component == "kl_term" {
        1e-4
    } else {
        1e-3
    }
}

fn gradcheck(ctx: &Ctx) -> Result<()> {
    let r = loss_gradcheck(ctx.cfg.run.seed)?;
    let mut v = serde_json::Map::new();
    let mut failed = Vec::new();
    for (name, err) in r.components() {
        v.insert(name.to_string(), json!(err));
        if !(err < gradcheck_threshold(name)) {
            failed.push(name);
        }
    }
    print(serde_json::Value::Object(v));
    if !failed.is_empty() {
        return Err(Error::Core(vibprune_core::Error::Numeric {
            op: "gradcheck",
            detail: format!("relative error above threshold for {}", failed.join(", ")),
        }));
    }
    Ok(())
}
