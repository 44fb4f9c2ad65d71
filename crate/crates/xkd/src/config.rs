//! Plain key=value run configuration with dotted namespaces.
//!
//! Lines are `key = value`, `#` starts a comment, unknown keys are rejected
//! with their line number, and command-line overrides apply last. The echoed
//! form re-parses to the identical typed configuration, which is what makes
//! sweep provenance diffable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::divergence::{BetaWeight, DivMode};
use crate::error::{Error, Result};
use crate::eval::{ToyTask, ToyTaskKind};
use crate::objectives::{PolicyEvalMode, XKDConfig};
use crate::policy::GenConfig;
use crate::qvalue::BoltzmannTemps;
use crate::reward::RewardPrior;
use crate::seq::Vocab;
use crate::trainer::{LrSchedule, OptimKind, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct FileConfig {
    pub seed: u64,
    pub task_kind: ToyTaskKind,
    pub task_content: usize,
    pub task_prompt_len: usize,
    pub data_train_items: usize,
    pub data_eval_items: usize,
    pub data_prompt_path: Option<String>,
    pub data_sft_path: Option<String>,
    pub data_teacher_path: Option<String>,
    pub student_k: usize,
    pub student_hidden: usize,
    pub student_init_std: f64,
    pub teacher_k: usize,
    pub teacher_smoothing: f64,
    pub teacher_responses_per_prompt: usize,
    pub train_steps: usize,
    pub train_batch_size: usize,
    pub train_lr: f64,
    pub train_lr_schedule: LrSchedule,
    pub train_warmup_steps: usize,
    pub train_optimizer: String,
    pub train_adam_beta1: f64,
    pub train_adam_beta2: f64,
    pub train_adam_eps: f64,
    pub train_grad_clip: Option<f64>,
    pub train_checkpoint_interval: usize,
    pub xkd_lambda: f64,
    pub xkd_gamma: f64,
    pub xkd_alpha: f64,
    pub xkd_beta: f64,
    pub xkd_tau: f64,
    pub xkd_tau_prime: f64,
    pub xkd_divergence: DivMode,
    pub xkd_policy_eval: PolicyEvalMode,
    pub xkd_prior_mean: f64,
    pub xkd_prior_std: f64,
    pub gen_temperature: f64,
    pub gen_top_p: f64,
    /// 0 means "derive from the task" (task length cap plus slack).
    pub gen_max_len: usize,
    pub eval_checkpoint: Option<String>,
    pub eval_n_samples: usize,
    pub sweep_kind: String,
    pub sweep_n_samples: usize,
    pub sweep_seeds: Vec<u64>,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            seed: 0,
            task_kind: ToyTaskKind::Copy,
            task_content: 6,
            task_prompt_len: 3,
            data_train_items: 64,
            data_eval_items: 200,
            data_prompt_path: None,
            data_sft_path: None,
            data_teacher_path: None,
            student_k: 2,
            student_hidden: 32,
            student_init_std: 0.2,
            teacher_k: 1,
            teacher_smoothing: 0.05,
            teacher_responses_per_prompt: 10,
            train_steps: 2000,
            train_batch_size: 4,
            train_lr: 0.02,
            train_lr_schedule: LrSchedule::LinearDecay,
            train_warmup_steps: 200,
            train_optimizer: "adam".into(),
            train_adam_beta1: 0.9,
            train_adam_beta2: 0.999,
            train_adam_eps: 1e-8,
            train_grad_clip: None,
            train_checkpoint_interval: 0,
            xkd_lambda: 0.001,
            xkd_gamma: 1.0,
            xkd_alpha: 0.5,
            xkd_beta: 0.5,
            xkd_tau: 1.0,
            xkd_tau_prime: 1.0,
            xkd_divergence: DivMode::Skew,
            xkd_policy_eval: PolicyEvalMode::Algorithm,
            xkd_prior_mean: 0.0,
            xkd_prior_std: 1.0,
            gen_temperature: 1.0,
            gen_top_p: 0.95,
            gen_max_len: 0,
            eval_checkpoint: None,
            eval_n_samples: 500,
            sweep_kind: "temperature".into(),
            sweep_n_samples: 500,
            sweep_seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

fn cfg_err(key: &str, line: Option<usize>, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        line,
        msg: msg.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: Option<usize>) -> Result<T> {
    value
        .parse()
        .map_err(|_| cfg_err(key, line, format!("cannot parse `{value}`")))
}

fn check_range(key: &str, value: f64, lo: f64, hi: f64, line: Option<usize>) -> Result<f64> {
    if !(value.is_finite() && (lo..=hi).contains(&value)) {
        return Err(cfg_err(key, line, format!("{value} outside [{lo}, {hi}]")));
    }
    Ok(value)
}

fn check_positive(key: &str, value: f64, line: Option<usize>) -> Result<f64> {
    if !(value.is_finite() && value > 0.0) {
        return Err(cfg_err(key, line, format!("{value} must be positive")));
    }
    Ok(value)
}

impl FileConfig {
    fn apply(&mut self, key: &str, value: &str, line: Option<usize>) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v, line)?,
            "task.kind" => {
                self.task_kind =
                    ToyTaskKind::parse(v).map_err(|e| cfg_err(key, line, e.to_string()))?
            }
            "task.content" => {
                self.task_content = parse_num(key, v, line)?;
                if self.task_content == 0 {
                    return Err(cfg_err(key, line, "needs at least one content token"));
                }
            }
            "task.prompt_len" => {
                self.task_prompt_len = parse_num(key, v, line)?;
                if self.task_prompt_len == 0 {
                    return Err(cfg_err(key, line, "must be positive"));
                }
            }
            "data.train_items" => self.data_train_items = parse_num(key, v, line)?,
            "data.eval_items" => self.data_eval_items = parse_num(key, v, line)?,
            "data.prompt_path" => self.data_prompt_path = Some(v.into()),
            "data.sft_path" => self.data_sft_path = Some(v.into()),
            "data.teacher_path" => self.data_teacher_path = Some(v.into()),
            "student.k" => self.student_k = parse_num(key, v, line)?,
            "student.hidden" => {
                self.student_hidden = parse_num(key, v, line)?;
                if self.student_hidden == 0 {
                    return Err(cfg_err(key, line, "must be positive"));
                }
            }
            "student.init_std" => {
                self.student_init_std = check_positive(key, parse_num(key, v, line)?, line)?
            }
            "teacher.k" => self.teacher_k = parse_num(key, v, line)?,
            "teacher.smoothing" => {
                let s: f64 = parse_num(key, v, line)?;
                if !(s.is_finite() && s >= 0.0) {
                    return Err(cfg_err(key, line, "must be >= 0"));
                }
                self.teacher_smoothing = s;
            }
            "teacher.responses_per_prompt" => {
                self.teacher_responses_per_prompt = parse_num(key, v, line)?;
                if self.teacher_responses_per_prompt == 0 {
                    return Err(cfg_err(key, line, "must be positive"));
                }
            }
            "train.steps" => self.train_steps = parse_num(key, v, line)?,
            "train.batch_size" => self.train_batch_size = parse_num(key, v, line)?,
            "train.lr" => self.train_lr = check_positive(key, parse_num(key, v, line)?, line)?,
            "train.lr_schedule" => {
                self.train_lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "linear-decay" => LrSchedule::LinearDecay,
                    other => {
                        return Err(cfg_err(
                            key,
                            line,
                            format!("`{other}` is not constant|linear-decay"),
                        ))
                    }
                }
            }
            "train.warmup_steps" => self.train_warmup_steps = parse_num(key, v, line)?,
            "train.optimizer" => {
                if v != "sgd" && v != "adam" {
                    return Err(cfg_err(key, line, format!("`{v}` is not sgd|adam")));
                }
                self.train_optimizer = v.into();
            }
            "train.adam_beta1" => {
                self.train_adam_beta1 = check_range(key, parse_num(key, v, line)?, 0.0, 1.0, line)?
            }
            "train.adam_beta2" => {
                self.train_adam_beta2 = check_range(key, parse_num(key, v, line)?, 0.0, 1.0, line)?
            }
            "train.adam_eps" => {
                self.train_adam_eps = check_positive(key, parse_num(key, v, line)?, line)?
            }
            "train.grad_clip" => {
                self.train_grad_clip = if v == "none" {
                    None
                } else {
                    Some(check_positive(key, parse_num(key, v, line)?, line)?)
                }
            }
            "train.checkpoint_interval" => {
                self.train_checkpoint_interval = parse_num(key, v, line)?
            }
            "xkd.lambda" => {
                let lam: f64 = parse_num(key, v, line)?;
                if !(lam.is_finite() && lam >= 0.0) {
                    return Err(cfg_err(key, line, "must be >= 0"));
                }
                self.xkd_lambda = lam;
            }
            "xkd.gamma" => {
                self.xkd_gamma = check_range(key, parse_num(key, v, line)?, 0.0, 1.0, line)?
            }
            "xkd.alpha" => {
                self.xkd_alpha = check_range(key, parse_num(key, v, line)?, 0.0, 1.0, line)?
            }
            "xkd.beta" => {
                self.xkd_beta = check_range(key, parse_num(key, v, line)?, 0.0, 1.0, line)?
            }
            "xkd.tau" => self.xkd_tau = check_positive(key, parse_num(key, v, line)?, line)?,
            "xkd.tau_prime" => {
                self.xkd_tau_prime = check_positive(key, parse_num(key, v, line)?, line)?
            }
            "xkd.divergence" => {
                self.xkd_divergence = match v {
                    "skew" => DivMode::Skew,
                    "mixture" => DivMode::Mixture,
                    other => {
                        return Err(cfg_err(key, line, format!("`{other}` is not skew|mixture")))
                    }
                }
            }
            "xkd.policy_eval" => {
                self.xkd_policy_eval = match v {
                    "algorithm" => PolicyEvalMode::Algorithm,
                    "boltzmann" => PolicyEvalMode::Boltzmann,
                    other => {
                        return Err(cfg_err(
                            key,
                            line,
                            format!("`{other}` is not algorithm|boltzmann"),
                        ))
                    }
                }
            }
            "xkd.prior_mean" => self.xkd_prior_mean = parse_num(key, v, line)?,
            "xkd.prior_std" => {
                self.xkd_prior_std = check_positive(key, parse_num(key, v, line)?, line)?
            }
            "gen.temperature" => {
                self.gen_temperature = check_positive(key, parse_num(key, v, line)?, line)?
            }
            "gen.top_p" => {
                let p: f64 = parse_num(key, v, line)?;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(cfg_err(key, line, format!("{p} outside (0, 1]")));
                }
                self.gen_top_p = p;
            }
            "gen.max_len" => self.gen_max_len = parse_num(key, v, line)?,
            "eval.checkpoint" => self.eval_checkpoint = Some(v.into()),
            "eval.n_samples" => self.eval_n_samples = parse_num(key, v, line)?,
            "sweep.kind" => {
                const KINDS: [&str; 5] = [
                    "temperature",
                    "lambda",
                    "tau-prime",
                    "data-fraction",
                    "hidden-size",
                ];
                if !KINDS.contains(&v) {
                    return Err(cfg_err(key, line, format!("`{v}` is not one of {KINDS:?}")));
                }
                self.sweep_kind = v.into();
            }
            "sweep.n_samples" => self.sweep_n_samples = parse_num(key, v, line)?,
            "sweep.seeds" => {
                let seeds: Vec<u64> = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim(), line))
                    .collect::<Result<_>>()?;
                if seeds.is_empty() {
                    return Err(cfg_err(key, line, "needs at least one seed"));
                }
                self.sweep_seeds = seeds;
            }
            other => return Err(cfg_err(other, line, "unknown key")),
        }
        Ok(())
    }

    /// Parse file text, then apply `key=value` overrides in order.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = FileConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("`{line}` is not key=value"),
            })?;
            cfg.apply(key.trim(), value, Some(line_no))?;
        }
        for (key, value) in overrides {
            cfg.apply(key.trim(), value, None)?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::invalid("config file", format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    /// Override the seed from the `XKD_SEED` environment variable when set.
    pub fn apply_env_seed(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = parse_num("XKD_SEED", v, None)?;
        }
        Ok(())
    }

    /// The effective configuration in canonical key=value form; re-parsing
    /// reproduces this config exactly.
    pub fn echo(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("seed", self.seed.to_string());
        map.insert("task.kind", self.task_kind.as_str().into());
        map.insert("task.content", self.task_content.to_string());
        map.insert("task.prompt_len", self.task_prompt_len.to_string());
        map.insert("data.train_items", self.data_train_items.to_string());
        map.insert("data.eval_items", self.data_eval_items.to_string());
        if let Some(p) = &self.data_prompt_path {
            map.insert("data.prompt_path", p.clone());
        }
        if let Some(p) = &self.data_sft_path {
            map.insert("data.sft_path", p.clone());
        }
        if let Some(p) = &self.data_teacher_path {
            map.insert("data.teacher_path", p.clone());
        }
        map.insert("student.k", self.student_k.to_string());
        map.insert("student.hidden", self.student_hidden.to_string());
        map.insert("student.init_std", self.student_init_std.to_string());
        map.insert("teacher.k", self.teacher_k.to_string());
        map.insert("teacher.smoothing", self.teacher_smoothing.to_string());
        map.insert(
            "teacher.responses_per_prompt",
            self.teacher_responses_per_prompt.to_string(),
        );
        map.insert("train.steps", self.train_steps.to_string());
        map.insert("train.batch_size", self.train_batch_size.to_string());
        map.insert("train.lr", self.train_lr.to_string());
        map.insert(
            "train.lr_schedule",
            match self.train_lr_schedule {
                LrSchedule::Constant => "constant".into(),
                LrSchedule::LinearDecay => "linear-decay".into(),
            },
        );
        map.insert("train.warmup_steps", self.train_warmup_steps.to_string());
        map.insert("train.optimizer", self.train_optimizer.clone());
        map.insert("train.adam_beta1", self.train_adam_beta1.to_string());
        map.insert("train.adam_beta2", self.train_adam_beta2.to_string());
        map.insert("train.adam_eps", self.train_adam_eps.to_string());
        if let Some(c) = self.train_grad_clip {
            map.insert("train.grad_clip", c.to_string());
        }
        map.insert(
            "train.checkpoint_interval",
            self.train_checkpoint_interval.to_string(),
        );
        map.insert("xkd.lambda", self.xkd_lambda.to_string());
        map.insert("xkd.gamma", self.xkd_gamma.to_string());
        map.insert("xkd.alpha", self.xkd_alpha.to_string());
        map.insert("xkd.beta", self.xkd_beta.to_string());
        map.insert("xkd.tau", self.xkd_tau.to_string());
        map.insert("xkd.tau_prime", self.xkd_tau_prime.to_string());
        map.insert(
            "xkd.divergence",
            match self.xkd_divergence {
                DivMode::Skew => "skew".into(),
                DivMode::Mixture => "mixture".into(),
            },
        );
        map.insert(
            "xkd.policy_eval",
            match self.xkd_policy_eval {
                PolicyEvalMode::Algorithm => "algorithm".into(),
                PolicyEvalMode::Boltzmann => "boltzmann".into(),
            },
        );
        map.insert("xkd.prior_mean", self.xkd_prior_mean.to_string());
        map.insert("xkd.prior_std", self.xkd_prior_std.to_string());
        map.insert("gen.temperature", self.gen_temperature.to_string());
        map.insert("gen.top_p", self.gen_top_p.to_string());
        map.insert("gen.max_len", self.gen_max_len.to_string());
        if let Some(c) = &self.eval_checkpoint {
            map.insert("eval.checkpoint", c.clone());
        }
        map.insert("eval.n_samples", self.eval_n_samples.to_string());
        map.insert("sweep.kind", self.sweep_kind.clone());
        map.insert("sweep.n_samples", self.sweep_n_samples.to_string());
        map.insert(
            "sweep.seeds",
            self.sweep_seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::with_content(self.task_content)
    }

    pub fn toy_task(&self) -> Result<ToyTask> {
        ToyTask::new(
            self.task_kind,
            self.vocab()?,
            self.task_prompt_len,
            self.seed,
        )
    }

    pub fn gen_config(&self, task: &ToyTask) -> GenConfig {
        let max_len = if self.gen_max_len == 0 {
            task.max_len + 2
        } else {
            self.gen_max_len
        };
        GenConfig {
            temperature: self.gen_temperature,
            top_p: self.gen_top_p,
            max_len,
            seed: self.seed,
        }
    }

    pub fn xkd_config(&self) -> Result<XKDConfig> {
        Ok(XKDConfig {
            lambda: self.xkd_lambda,
            gamma: self.xkd_gamma,
            alpha: self.xkd_alpha,
            beta: BetaWeight::new(self.xkd_beta)?,
            temps: BoltzmannTemps::new(self.xkd_tau, self.xkd_tau_prime)?,
            divergence: self.xkd_divergence,
            policy_eval: self.xkd_policy_eval,
            prior: RewardPrior::new(self.xkd_prior_mean, self.xkd_prior_std)?,
        })
    }

    pub fn train_config(&self, task: &ToyTask, out_dir: Option<PathBuf>) -> Result<TrainConfig> {
        let optimizer = match self.train_optimizer.as_str() {
            "sgd" => OptimKind::Sgd,
            _ => OptimKind::Adam {
                beta1: self.train_adam_beta1,
                beta2: self.train_adam_beta2,
                eps: self.train_adam_eps,
            },
        };
        let cfg = TrainConfig {
            steps: self.train_steps,
            batch_size: self.train_batch_size,
            lr: self.train_lr,
            lr_schedule: self.train_lr_schedule,
            warmup_steps: self.train_warmup_steps,
            seed: self.seed,
            xkd: self.xkd_config()?,
            gen: self.gen_config(task),
            optimizer,
            grad_clip: self.train_grad_clip,
            record_grads: false,
            checkpoint_interval: self.train_checkpoint_interval,
            checkpoint_dir: out_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
