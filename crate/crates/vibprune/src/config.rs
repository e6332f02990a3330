//! Flat `key = value` run configuration with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! win, so command-line overrides are applied with [`Config::set`] after
//! the file is read.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vibprune_core::data::{TaskKind, TaskSpec};
use vibprune_core::gates::Site;
use vibprune_core::model::ModelConfig;
use vibprune_core::objective::{KlDirection, Metric};
use vibprune_core::pipeline::{RunConfig, TeacherConfig, Variant};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub task: TaskSpec,
    /// Architecture; vocabulary and sequence length follow the task.
    pub model: ModelConfig,
    pub model_seed: u64,
    pub teacher: TeacherConfig,
    pub run: RunConfig,
    pub eval_batch: usize,
    pub data_path: Option<PathBuf>,
    pub teacher_path: Option<PathBuf>,
    pub student_path: Option<PathBuf>,
    /// Token ids probed by `analyze`; empty means the task's special tokens.
    pub probe_tokens: Vec<usize>,
    subset_set: bool,
}

impl Default for Config {
    fn default() -> Self {
        let task = TaskSpec::new(TaskKind::MajorityPair, 16, 12, 2000, 1);
        let model = ModelConfig {
            vocab_size: task.vocab,
            max_seq: task.seq,
            width: 64,
            layers: 4,
            heads: 4,
            ffn_dim: 128,
            num_classes: 2,
            causal: false,
            dropout: 0.0,
        };
        Config {
            task,
            model,
            model_seed: 0,
            teacher: TeacherConfig::default(),
            run: RunConfig::default(),
            eval_batch: 256,
            data_path: None,
            teacher_path: None,
            student_path: None,
            probe_tokens: Vec::new(),
            subset_set: false,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value `{value}` for key `{key}` (expected true or false)"
        ))),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut c = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::parse(&fs::read_to_string(path).map_err(Error::io(path))?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        let r = &mut self.run;
        match key {
            "seed" => {
                let s = num(key, v)?;
                self.model_seed = s;
                self.teacher.seed = s;
                r.seed = s;
            }
            "task.kind" => {
                self.task.kind = TaskKind::parse(v)
                    .ok_or_else(|| Error::Config(format!("invalid value `{v}` for key `{key}`")))?
            }
            "task.vocab" => self.task.vocab = num(key, v)?,
            "task.seq" => self.task.seq = num(key, v)?,
            "task.size" => {
                let total: usize = num(key, v)?;
                self.task.sizes = TaskSpec::new(self.task.kind, 0, 0, total, 0).sizes;
            }
            "task.train" => self.task.sizes[0] = num(key, v)?,
            "task.val" => self.task.sizes[1] = num(key, v)?,
            "task.test" => self.task.sizes[2] = num(key, v)?,
            "task.seed" => self.task.seed = num(key, v)?,
            "task.intrinsic_dim" => self.task.intrinsic_dim = num(key, v)?,
            "task.markers" => self.task.markers = num(key, v)?,
            "task.distractors" => self.task.distractors = num(key, v)?,
            "task.margin" => self.task.margin = num(key, v)?,
            "model.width" => self.model.width = num(key, v)?,
            "model.layers" => self.model.layers = num(key, v)?,
            "model.heads" => self.model.heads = num(key, v)?,
            "model.ffn_dim" => self.model.ffn_dim = num(key, v)?,
            "model.causal" => self.model.causal = flag(key, v)?,
            "model.dropout" => self.model.dropout = num(key, v)?,
            "model.seed" => self.model_seed = num(key, v)?,
            "teacher.epochs" => self.teacher.epochs = num(key, v)?,
            "teacher.batch_size" => self.teacher.batch_size = num(key, v)?,
            "teacher.lr" => self.teacher.lr = num(key, v)?,
            "teacher.weight_decay" => self.teacher.weight_decay = num(key, v)?,
            "teacher.seed" => self.teacher.seed = num(key, v)?,
            "prune.variant" => {
                r.variant = Variant::parse(v)
                    .ok_or_else(|| Error::Config(format!("invalid value `{v}` for key `{key}`")))?
            }
            "prune.epochs" => r.epochs_prune = num(key, v)?,
            "prune.batch_size" => r.batch_size = num(key, v)?,
            "prune.lr_weights" => r.lr_weights = num(key, v)?,
            "prune.lr_gates" => r.lr_gates = num(key, v)?,
            "prune.lambda_lr" => r.lambda_lr = num(key, v)?,
            "prune.weight_decay" => r.weight_decay = num(key, v)?,
            "prune.subset_fraction" => {
                r.subset_fraction = num(key, v)?;
                self.subset_set = true;
            }
            "prune.seed" => r.seed = num(key, v)?,
            "prune.tau" => r.tau = num(key, v)?,
            "prune.temperature" => r.temperature = num(key, v)?,
            "prune.target" => r.target = num(key, v)?,
            "prune.metric" => {
                r.metric = Metric::parse(v)
                    .ok_or_else(|| Error::Config(format!("invalid value `{v}` for key `{key}`")))?
            }
            "prune.eta" => r.eta = num(key, v)?,
            "prune.kl_direction" => {
                r.kl_direction = match v {
                    "student_teacher" => KlDirection::StudentTeacher,
                    "teacher_student" => KlDirection::TeacherStudent,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid value `{v}` for key `{key}`"
                        )))
                    }
                }
            }
            "prune.warmup_fraction" => r.warmup_fraction = num(key, v)?,
            "prune.flops_seq_len" => r.flops_seq_len = Some(num(key, v)?),
            "finetune.epochs" => r.epochs_finetune = num(key, v)?,
            "gates.beta" => r.betas.global = num(key, v)?,
            "gates.mu_mean" => r.gate_init.mu_mean = num(key, v)?,
            "gates.mu_std" => r.gate_init.mu_std = num(key, v)?,
            "gates.sigma_init" => r.gate_init.sigma_init = num(key, v)?,
            "gates.seed" => r.gate_init.seed = num(key, v)?,
            "eval.batch_size" => self.eval_batch = num(key, v)?,
            "paths.data" => self.data_path = Some(PathBuf::from(v)),
            "paths.teacher" => self.teacher_path = Some(PathBuf::from(v)),
            "paths.student" => self.student_path = Some(PathBuf::from(v)),
            "analysis.tokens" => {
                self.probe_tokens = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            _ => match key.strip_prefix("gates.beta.").and_then(Site::parse) {
                Some(site) => r.betas.per_site[site.ordinal()] = Some(num(key, v)?),
                None => return Err(Error::Config(format!("unknown key `{key}`"))),
            },
        }
        Ok(())
    }

    /// Fills derived fields and checks every section.
    pub fn finish(mut self) -> Result<Config> {
        self.model.vocab_size = self.task.vocab;
        self.model.max_seq = self.task.seq;
        if !self.subset_set {
            self.run.subset_fraction = self.run.variant.default_subset_fraction();
        }
        let wrap = |e: vibprune_core::Error| Error::Config(e.to_string());
        self.task.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.run.validate().map_err(wrap)?;
        if self.teacher.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if let Some(&t) = self.probe_tokens.iter().find(|&&t| t >= self.task.vocab) {
            return Err(Error::Config(format!(
                "analysis token {t} outside vocabulary of {}",
                self.task.vocab
            )));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let c = Config::parse("# run\nseed = 3\ntask.kind=marked_parity\n\nmodel.width = 32\ngates.beta.embedding_width = 0.01\n")
            .unwrap()
            .finish()
            .unwrap();
        assert_eq!(c.run.seed, 3);
        assert_eq!(c.teacher.seed, 3);
        assert_eq!(c.task.kind, TaskKind::MarkedParity);
        assert_eq!(c.model.width, 32);
        assert_eq!(
            c.run.betas.per_site[Site::EmbeddingWidth.ordinal()],
            Some(0.01)
        );
    }

    #[test]
    fn unknown_key_is_named() {
        let e = Config::parse("model.wdith = 32").unwrap_err();
        assert_eq!(e.kind(), "config error");
        assert!(e.to_string().contains("model.wdith"), "{e}");
    }

    #[test]
    fn variant_sets_subset_unless_given() {
        let c = Config::parse("prune.variant = fast")
            .unwrap()
            .finish()
            .unwrap();
        assert_eq!(c.run.subset_fraction, 0.03);
        let c = Config::parse("prune.variant = fast\nprune.subset_fraction = 0.5")
            .unwrap()
            .finish()
            .unwrap();
        assert_eq!(c.run.subset_fraction, 0.5);
    }
}
