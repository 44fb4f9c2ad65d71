//! Training loops: SFT warmup, white-box distillation with on-policy/offline
//! mixing, and the black-box sequence-level pipeline, driven by a single
//! seeded RNG stream so runs are reproducible bit for bit.
//!
//! Per step, the mixing pipelines draw u ~ Uniform(0,1) and go on-policy when
//! u <= alpha, sampling responses from the student's current parameters;
//! otherwise a batch is drawn from the offline set. Every loop draws u even
//! when it never branches on it, so the streams of all objective flavors
//! stay aligned under a shared seed. The black-box pipeline samples one
//! stored teacher response per prompt. One joint optimizer step updates
//! policy and reward-head parameters together; the teacher is frozen
//! throughout.
//!
//! Per-sample loss/gradient evaluation fans out across workers; reduction is
//! in fixed index order, so gradients are worker-count invariant.

use std::path::PathBuf;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::objectives::{
    loss_generalized_xkd, loss_gkd, loss_orm, loss_seq, loss_supervised_kd, loss_supervised_xkd,
    LossBreakdown, XKDConfig,
};
use crate::parallel;
use crate::policy::{sample_with_rng, GenConfig, NeuralPolicy, Policy};
use crate::reward::RewardPosterior;
use crate::seq::{Dataset, Prompt, Sequence};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn adam_default() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    LinearDecay,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_steps: usize,
    pub seed: u64,
    pub xkd: XKDConfig,
    pub gen: GenConfig,
    pub optimizer: OptimKind,
    /// Optional max-norm gradient clip.
    pub grad_clip: Option<f64>,
    /// Keep per-step mean policy gradients in the report (for stream
    /// comparisons; costs memory).
    pub record_grads: bool,
    /// Write a checkpoint every this many steps (0 disables) into
    /// `checkpoint_dir`.
    pub checkpoint_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            lr: 0.02,
            lr_schedule: LrSchedule::LinearDecay,
            warmup_steps: 200,
            seed: 0,
            xkd: XKDConfig::default(),
            gen: GenConfig::default(),
            optimizer: OptimKind::adam_default(),
            grad_clip: None,
            record_grads: false,
            checkpoint_interval: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "train config",
                "steps and batch_size must be positive",
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("train config", "lr must be positive"));
        }
        self.xkd.validate()?;
        self.gen.validate()?;
        Ok(())
    }
}

/// Learning rate at a 1-based step: linear ramp over the warmup, then either
/// flat or a linear decay reaching zero at the final step.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    debug_assert!(step >= 1);
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::LinearDecay => {
            let t1 = cfg.steps.max(cfg.warmup_steps + 1);
            cfg.lr * (t1 - step) as f64 / (t1 - cfg.warmup_steps) as f64
        }
    }
}

/// First/second-moment optimizer state for one parameter group.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Optimizer {
    pub fn new(kind: OptimKind, n_params: usize) -> Self {
        let state = match kind {
            OptimKind::Sgd => 0,
            OptimKind::Adam { .. } => n_params,
        };
        Optimizer {
            kind,
            m: vec![0.0; state],
            v: vec![0.0; state],
            t: 0,
        }
    }

    /// One update: SGD `p -= lr*g`, or bias-corrected Adam.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        match self.kind {
            OptimKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

fn clip_grad(grad: &mut [f64], max_norm: Option<f64>) {
    let Some(max_norm) = max_norm else { return };
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad {
            *g *= scale;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    OnPolicy,
    Offline,
}

/// One metrics line per optimizer step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub branch: Branch,
    pub kd_term: f64,
    pub prior_kl_term: f64,
    pub td_term: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    /// Per-step mean policy gradients, present when requested.
    pub theta_grads: Option<Vec<Vec<f64>>>,
    pub wall_time_secs: f64,
    pub seed: u64,
    /// How many samples were read from the offline set.
    pub sft_reads: usize,
    pub onpolicy_steps: usize,
}

impl TrainReport {
    pub fn window_mean_first(&self, window: usize) -> f64 {
        let w = window.min(self.records.len()).max(1);
        self.records[..w].iter().map(|r| r.total).sum::<f64>() / w as f64
    }

    pub fn window_mean_last(&self, window: usize) -> f64 {
        let w = window.min(self.records.len()).max(1);
        let n = self.records.len();
        self.records[n - w..].iter().map(|r| r.total).sum::<f64>() / w as f64
    }

    pub fn descended(&self, window: usize) -> bool {
        self.window_mean_last(window) < self.window_mean_first(window)
    }

    /// One JSON object per line with keys
    /// {step, branch, kd_term, prior_kl_term, td_term, total, lr}.
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("step record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_metrics(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.metrics_jsonl())?;
        Ok(())
    }
}

/// Which objective the white-box loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WhiteboxKind {
    Gkd,
    GeneralizedXkd,
    SupervisedKd,
    SupervisedXkd,
}

impl WhiteboxKind {
    fn mixes_onpolicy(self) -> bool {
        matches!(self, WhiteboxKind::Gkd | WhiteboxKind::GeneralizedXkd)
    }
}

struct LoopState<'a> {
    student: &'a mut NeuralPolicy,
    head: Option<&'a mut RewardPosterior>,
    cfg: &'a TrainConfig,
}

fn abort(step: usize, x: &Prompt, y: &Sequence, e: Error) -> Error {
    Error::TrainAbort {
        step,
        prompt: x.tokens().to_vec(),
        response: y.tokens().to_vec(),
        source: Box::new(e),
    }
}

type SampleEval = (LossBreakdown, Vec<f64>, Option<Vec<f64>>);

/// Evaluate the batch, reduce in index order, take one optimizer step.
/// Returns the mean breakdown and mean policy gradient.
#[allow(clippy::too_many_arguments)]
fn optimize_batch(
    state: &mut LoopState<'_>,
    opt_theta: &mut Optimizer,
    opt_phi: &mut Optimizer,
    batch: &[(Prompt, Sequence)],
    step: usize,
    eval: impl Fn(&NeuralPolicy, Option<&RewardPosterior>, &Prompt, &Sequence) -> Result<SampleEval>
        + Sync
        + Send,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let student_ref: &NeuralPolicy = state.student;
    let head_ref: Option<&RewardPosterior> = state.head.as_deref();
    let results = parallel::map_collect(batch, |(x, y)| eval(student_ref, head_ref, x, y));

    let n = batch.len() as f64;
    let mut mean = LossBreakdown::default();
    let mut theta = vec![0.0; state.student.param_count()];
    let mut phi = state.head.as_ref().map(|h| vec![0.0; h.param_count()]);
    for (i, res) in results.into_iter().enumerate() {
        let (b, g_theta, g_phi) = res.map_err(|e| abort(step, &batch[i].0, &batch[i].1, e))?;
        mean.kd_term += b.kd_term;
        mean.prior_kl_term += b.prior_kl_term;
        mean.td_logdensity_term += b.td_logdensity_term;
        mean.total += b.total;
        mean.n_steps += b.n_steps;
        for (a, g) in theta.iter_mut().zip(&g_theta) {
            *a += g;
        }
        if let (Some(acc), Some(g_phi)) = (phi.as_mut(), g_phi) {
            for (a, g) in acc.iter_mut().zip(&g_phi) {
                *a += g;
            }
        }
    }
    mean.kd_term /= n;
    mean.prior_kl_term /= n;
    mean.td_logdensity_term /= n;
    mean.total /= n;
    for g in &mut theta {
        *g /= n;
    }
    if let Some(phi) = phi.as_mut() {
        for g in phi.iter_mut() {
            *g /= n;
        }
    }

    if !mean.total.is_finite() {
        let (x, y) = &batch[0];
        return Err(abort(
            step,
            x,
            y,
            Error::NonFinite {
                what: "batch loss".into(),
            },
        ));
    }

    let lr = lr_at(state.cfg, step);
    clip_grad(&mut theta, state.cfg.grad_clip);
    opt_theta.step(state.student.params_mut(), &theta, lr);
    if let (Some(head), Some(mut phi)) = (state.head.as_mut(), phi) {
        clip_grad(&mut phi, state.cfg.grad_clip);
        let mut params = head.to_params();
        opt_phi.step(&mut params, &phi, lr);
        head.apply_params(&params)?;
    }
    Ok((mean, theta))
}

fn maybe_checkpoint(state: &LoopState<'_>, step: usize) -> Result<()> {
    let cfg = state.cfg;
    if cfg.checkpoint_interval == 0 || step % cfg.checkpoint_interval != 0 {
        return Ok(());
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join(format!("student_step{step}.ckpt"));
        checkpoint::save_neural(&path, state.student, state.head.as_deref())?;
    }
    Ok(())
}

fn whitebox_loop(
    teacher: &dyn Policy,
    mut state: LoopState<'_>,
    d_prompt: Option<&Dataset>,
    d_sft: &Dataset,
    kind: WhiteboxKind,
) -> Result<TrainReport> {
    state.cfg.validate()?;
    let sft_pairs = match d_sft {
        Dataset::PromptResponse(v) if !v.is_empty() => v,
        Dataset::PromptResponse(_) => return Err(Error::EmptyInput("offline dataset")),
        _ => {
            return Err(Error::invalid(
                "dataset",
                "offline data must be prompt-response",
            ))
        }
    };
    let prompts: Option<Vec<&Prompt>> = match d_prompt {
        Some(d) if kind.mixes_onpolicy() => {
            if d.is_empty() {
                return Err(Error::EmptyInput("prompt dataset"));
            }
            Some(d.prompts())
        }
        _ => None,
    };

    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(state.cfg.seed);
    let mut opt_theta = Optimizer::new(state.cfg.optimizer, state.student.param_count());
    let mut opt_phi = Optimizer::new(
        state.cfg.optimizer,
        state.head.as_ref().map_or(0, |h| h.param_count()),
    );
    let mut records = Vec::with_capacity(state.cfg.steps);
    let mut grads = state.cfg.record_grads.then(Vec::new);
    let mut sft_reads = 0usize;
    let mut onpolicy_steps = 0usize;

    for step in 1..=state.cfg.steps {
        // every white-box flavor draws u so their RNG streams stay aligned;
        // the supervised objectives discard it and always train offline
        let u: f64 = rng.gen();
        let branch = if kind.mixes_onpolicy() && u <= state.cfg.xkd.alpha {
            Branch::OnPolicy
        } else {
            Branch::Offline
        };

        let mut batch = Vec::with_capacity(state.cfg.batch_size);
        match branch {
            Branch::OnPolicy => {
                onpolicy_steps += 1;
                let prompts = prompts.as_ref().expect("on-policy branch has prompts");
                for _ in 0..state.cfg.batch_size {
                    let x = prompts[rng.gen_range(0..prompts.len())].clone();
                    let y = sample_with_rng(&*state.student, &x, &state.cfg.gen, &mut rng);
                    batch.push((x, y));
                }
            }
            Branch::Offline => {
                for _ in 0..state.cfg.batch_size {
                    let (x, y) = &sft_pairs[rng.gen_range(0..sft_pairs.len())];
                    sft_reads += 1;
                    batch.push((x.clone(), y.clone()));
                }
            }
        }

        let xkd = state.cfg.xkd;
        let (mean, theta) = optimize_batch(
            &mut state,
            &mut opt_theta,
            &mut opt_phi,
            &batch,
            step,
            move |student, head, x, y| match kind {
                WhiteboxKind::Gkd => {
                    let (b, g) = loss_gkd(teacher, student, x, y, &xkd)?;
                    Ok((b, g, None))
                }
                WhiteboxKind::GeneralizedXkd => {
                    let (b, g) = loss_generalized_xkd(teacher, student, head.unwrap(), x, y, &xkd)?;
                    Ok((b, g.theta, Some(g.phi)))
                }
                WhiteboxKind::SupervisedKd => {
                    let (b, g) = loss_supervised_kd(teacher, student, x, y, &xkd)?;
                    Ok((b, g, None))
                }
                WhiteboxKind::SupervisedXkd => {
                    let (b, g) = loss_supervised_xkd(teacher, student, head.unwrap(), x, y, &xkd)?;
                    Ok((b, g.theta, Some(g.phi)))
                }
            },
        )?;

        records.push(StepRecord {
            step,
            branch,
            kd_term: mean.kd_term,
            prior_kl_term: mean.prior_kl_term,
            td_term: mean.td_logdensity_term,
            total: mean.total,
            lr: lr_at(state.cfg, step),
        });
        if let Some(g) = grads.as_mut() {
            g.push(theta);
        }
        maybe_checkpoint(&state, step)?;
    }

    Ok(TrainReport {
        records,
        theta_grads: grads,
        wall_time_secs: start.elapsed().as_secs_f64(),
        seed: state.cfg.seed,
        sft_reads,
        onpolicy_steps,
    })
}

/// Supervised fine-tuning on prompt-response data: minimizes the mean
/// negative log-likelihood.
pub fn sft(student: &mut NeuralPolicy, d_sft: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let pairs = match d_sft {
        Dataset::PromptResponse(v) if !v.is_empty() => v,
        Dataset::PromptResponse(_) => return Err(Error::EmptyInput("sft dataset")),
        _ => {
            return Err(Error::invalid(
                "dataset",
                "sft data must be prompt-response",
            ))
        }
    };
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, student.param_count());
    let mut records = Vec::with_capacity(cfg.steps);
    let mut grads = cfg.record_grads.then(Vec::new);
    let mut state = LoopState {
        student,
        head: None,
        cfg,
    };
    let mut opt_phi = Optimizer::new(cfg.optimizer, 0);
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (x, y) = &pairs[rng.gen_range(0..pairs.len())];
            batch.push((x.clone(), y.clone()));
        }
        let (mean, theta) = optimize_batch(
            &mut state,
            &mut opt,
            &mut opt_phi,
            &batch,
            step,
            |student, _, x, y| {
                let (b, g) = loss_seq(student, x, y)?;
                Ok((b, g, None))
            },
        )?;
        records.push(StepRecord {
            step,
            branch: Branch::Offline,
            kd_term: mean.kd_term,
            prior_kl_term: 0.0,
            td_term: 0.0,
            total: mean.total,
            lr: lr_at(cfg, step),
        });
        if let Some(g) = grads.as_mut() {
            g.push(theta);
        }
        maybe_checkpoint(&state, step)?;
    }
    Ok(TrainReport {
        records,
        theta_grads: grads,
        wall_time_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        sft_reads: cfg.steps * cfg.batch_size,
        onpolicy_steps: 0,
    })
}

/// Generalized experiential distillation (the white-box pipeline): on-policy
/// and offline batches mixed by alpha, one joint policy/head update per step.
pub fn train_generalized_xkd(
    teacher: &dyn Policy,
    student: &mut NeuralPolicy,
    head: &mut RewardPosterior,
    d_prompt: &Dataset,
    d_sft: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    whitebox_loop(
        teacher,
        LoopState {
            student,
            head: Some(head),
            cfg,
        },
        Some(d_prompt),
        d_sft,
        WhiteboxKind::GeneralizedXkd,
    )
}

/// The non-experiential baseline of [`train_generalized_xkd`]: identical
/// sampling and RNG stream, divergence term only.
pub fn train_gkd(
    teacher: &dyn Policy,
    student: &mut NeuralPolicy,
    d_prompt: &Dataset,
    d_sft: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    whitebox_loop(
        teacher,
        LoopState {
            student,
            head: None,
            cfg,
        },
        Some(d_prompt),
        d_sft,
        WhiteboxKind::Gkd,
    )
}

/// Supervised experiential distillation: offline batches only.
pub fn train_supervised_xkd(
    teacher: &dyn Policy,
    student: &mut NeuralPolicy,
    head: &mut RewardPosterior,
    d_sft: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    whitebox_loop(
        teacher,
        LoopState {
            student,
            head: Some(head),
            cfg,
        },
        None,
        d_sft,
        WhiteboxKind::SupervisedXkd,
    )
}

/// The non-experiential supervised baseline.
pub fn train_supervised_kd(
    teacher: &dyn Policy,
    student: &mut NeuralPolicy,
    d_sft: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    whitebox_loop(
        teacher,
        LoopState {
            student,
            head: None,
            cfg,
        },
        None,
        d_sft,
        WhiteboxKind::SupervisedKd,
    )
}

fn blackbox_loop(
    d_teacher: &Dataset,
    mut state: LoopState<'_>,
    experiential: bool,
) -> Result<TrainReport> {
    state.cfg.validate()?;
    let behaviors = match d_teacher {
        Dataset::TeacherBehavior(v) if !v.is_empty() => v,
        Dataset::TeacherBehavior(_) => return Err(Error::EmptyInput("teacher-behavior dataset")),
        _ => {
            return Err(Error::invalid(
                "dataset",
                "black-box distillation needs a teacher-behavior dataset",
            ))
        }
    };
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(state.cfg.seed);
    let mut opt_theta = Optimizer::new(state.cfg.optimizer, state.student.param_count());
    let mut opt_phi = Optimizer::new(
        state.cfg.optimizer,
        state.head.as_ref().map_or(0, |h| h.param_count()),
    );
    let mut records = Vec::with_capacity(state.cfg.steps);
    let mut grads = state.cfg.record_grads.then(Vec::new);
    let mut sft_reads = 0usize;

    for step in 1..=state.cfg.steps {
        // u is never branched on here; drawing it keeps the stream aligned
        // with the white-box loops
        let _u: f64 = rng.gen();
        let mut batch = Vec::with_capacity(state.cfg.batch_size);
        for _ in 0..state.cfg.batch_size {
            let (x, responses) = &behaviors[rng.gen_range(0..behaviors.len())];
            let y = &responses[rng.gen_range(0..responses.len())];
            sft_reads += 1;
            batch.push((x.clone(), y.clone()));
        }
        let xkd = state.cfg.xkd;
        let (mean, theta) = optimize_batch(
            &mut state,
            &mut opt_theta,
            &mut opt_phi,
            &batch,
            step,
            move |student, head, x, y| {
                if experiential {
                    let (b, g) = loss_orm(student, head.unwrap(), x, y, &xkd)?;
                    Ok((b, g.theta, Some(g.phi)))
                } else {
                    let (b, g) = loss_seq(student, x, y)?;
                    Ok((b, g, None))
                }
            },
        )?;
        records.push(StepRecord {
            step,
            branch: Branch::Offline,
            kd_term: mean.kd_term,
            prior_kl_term: mean.prior_kl_term,
            td_term: mean.td_logdensity_term,
            total: mean.total,
            lr: lr_at(state.cfg, step),
        });
        if let Some(g) = grads.as_mut() {
            g.push(theta);
        }
        maybe_checkpoint(&state, step)?;
    }
    Ok(TrainReport {
        records,
        theta_grads: grads,
        wall_time_secs: start.elapsed().as_secs_f64(),
        seed: state.cfg.seed,
        sft_reads,
        onpolicy_steps: 0,
    })
}

/// Black-box sequence-level experiential distillation: per step, one stored
/// teacher response per sampled prompt, minimizing the sequence likelihood
/// loss plus the experiential terms.
pub fn train_blackbox_xkd(
    d_teacher: &Dataset,
    student: &mut NeuralPolicy,
    head: &mut RewardPosterior,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    blackbox_loop(
        d_teacher,
        LoopState {
            student,
            head: Some(head),
            cfg,
        },
        true,
    )
}

/// The non-experiential black-box baseline (sequence-level distillation).
pub fn train_seqkd(
    d_teacher: &Dataset,
    student: &mut NeuralPolicy,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    blackbox_loop(
        d_teacher,
        LoopState {
            student,
            head: None,
            cfg,
        },
        false,
    )
}
