//! Sweep harnesses: temperature/diversity curves, data-efficiency runs, and
//! the experiential-weight, Boltzmann-temperature, and student-capacity
//! ablations.
//!
//! Every sweep point is a pure function of (configuration, seed): the point
//! at index i trains with the stream derived from (base seed, i), so points
//! can run in any order or in parallel and reproduce bit for bit. Point
//! metrics are deterministic functions of the trained parameters (exact
//! sequence KL to the teacher over a fixed eval set, and greedy-decode task
//! performance), which is what makes the lambda=0 point exactly comparable
//! to the non-experiential baseline run.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::{diversity_at_temperature, performance, MetricRecord, ToyTask};
use crate::oracle::{exact_kl_seq, EnumSpace};
use crate::parallel;
use crate::policy::{GenConfig, NeuralPolicy, Policy, TabularPolicy};
use crate::reward::{feature_dim, RewardPosterior};
use crate::seq::{derive_seed, Dataset, Prompt, Sequence};
use crate::trainer::{train_generalized_xkd, train_gkd, TrainConfig, TrainReport};

/// Everything a distillation run needs: task, fitted teacher, data, the
/// student initialization, and the training configuration.
#[derive(Debug, Clone)]
pub struct DistillSetup {
    pub task: ToyTask,
    pub teacher: TabularPolicy,
    pub d_prompt: Dataset,
    pub d_sft: Dataset,
    pub eval_pairs: Vec<(Prompt, Sequence)>,
    pub student_init: NeuralPolicy,
    pub train: TrainConfig,
}

impl DistillSetup {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        task: ToyTask,
        n_train: usize,
        n_eval: usize,
        teacher_window: usize,
        smoothing: f64,
        student_window: usize,
        hidden: usize,
        init_std: f64,
        train: TrainConfig,
    ) -> Result<Self> {
        let pairs = task.gen_pairs(n_train);
        let teacher = TabularPolicy::fit_ngrams(&task.vocab, teacher_window, &pairs, smoothing)?;
        let d_prompt = Dataset::PromptOnly(pairs.iter().map(|(x, _)| x.clone()).collect());
        let d_sft = Dataset::PromptResponse(pairs);
        // eval prompts come from a shifted stream so they are disjoint from
        // training draws with overwhelming probability
        let eval_task = ToyTask {
            seed: derive_seed(task.seed, 0x5EED),
            ..task.clone()
        };
        let eval_pairs = eval_task.gen_pairs(n_eval);
        let student_init = NeuralPolicy::random(
            task.vocab.clone(),
            student_window,
            hidden,
            init_std,
            derive_seed(train.seed, 0x1217),
        )?;
        Ok(DistillSetup {
            task,
            teacher,
            d_prompt,
            d_sft,
            eval_pairs,
            student_init,
            train,
        })
    }

    /// Exact sequence-level KL(teacher || student), averaged over the eval
    /// prompts, enumerated to the task's length cap.
    pub fn eval_kl(&self, student: &dyn Policy) -> Result<f64> {
        mean_exact_kl(&self.teacher, student, &self.eval_pairs, &self.task)
    }

    fn fraction_of_data(&self, fraction: f64) -> (Dataset, Dataset) {
        let pairs = match &self.d_sft {
            Dataset::PromptResponse(v) => v,
            _ => unreachable!("setup holds prompt-response data"),
        };
        let keep = ((fraction * pairs.len() as f64).floor() as usize).max(1);
        let slice: Vec<_> = pairs[..keep.min(pairs.len())].to_vec();
        let prompts = slice.iter().map(|(x, _)| x.clone()).collect();
        (Dataset::PromptOnly(prompts), Dataset::PromptResponse(slice))
    }
}

pub fn mean_exact_kl(
    teacher: &dyn Policy,
    student: &dyn Policy,
    eval_pairs: &[(Prompt, Sequence)],
    task: &ToyTask,
) -> Result<f64> {
    if eval_pairs.is_empty() {
        return Err(Error::EmptyInput("eval prompts"));
    }
    let kls = parallel::map_collect(eval_pairs, |(x, _)| {
        let space = EnumSpace::new(task.vocab.clone(), task.max_len, x.clone())?;
        exact_kl_seq(teacher, student, &space)
    });
    let mut total = 0.0;
    for kl in kls {
        total += kl?;
    }
    Ok(total / eval_pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Gkd,
    GeneralizedXkd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gkd => "gkd",
            Method::GeneralizedXkd => "g-xkd",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PointMetrics {
    pub eval_kl: f64,
    pub performance: f64,
}

/// A finished sweep point: its metrics plus the trained parameters and the
/// step log, for callers that run further diagnostics or write checkpoints.
#[derive(Debug, Clone)]
pub struct PointOutcome {
    pub metrics: PointMetrics,
    pub student: NeuralPolicy,
    pub head: Option<RewardPosterior>,
    pub report: TrainReport,
}

/// Train one sweep point and measure it.
pub fn run_point(setup: &DistillSetup, method: Method, cfg: &TrainConfig) -> Result<PointOutcome> {
    let mut student = setup.student_init.clone();
    let mut head = None;
    let report = match method {
        Method::Gkd => train_gkd(
            &setup.teacher,
            &mut student,
            &setup.d_prompt,
            &setup.d_sft,
            cfg,
        )?,
        Method::GeneralizedXkd => {
            let mut h = RewardPosterior::zeros(feature_dim(
                &setup.task.vocab,
                setup.student_init.context_window(),
            ));
            let report = train_generalized_xkd(
                &setup.teacher,
                &mut student,
                &mut h,
                &setup.d_prompt,
                &setup.d_sft,
                cfg,
            )?;
            head = Some(h);
            report
        }
    };
    let gen = GenConfig {
        max_len: setup.task.max_len,
        ..cfg.gen.clone()
    };
    let metrics = PointMetrics {
        eval_kl: setup.eval_kl(&student)?,
        performance: performance(&setup.task, &student, &setup.eval_pairs, &gen)?,
    };
    Ok(PointOutcome {
        metrics,
        student,
        head,
        report,
    })
}

fn point_records(
    metrics: PointMetrics,
    seed: u64,
    fill: impl Fn(&mut MetricRecord),
) -> Vec<MetricRecord> {
    let mut out = Vec::with_capacity(2);
    for (name, value) in [
        ("eval_kl", metrics.eval_kl),
        ("performance", metrics.performance),
    ] {
        let mut r = MetricRecord::new(name, value, seed);
        fill(&mut r);
        out.push(r);
    }
    out
}

/// One full training run per experiential weight per base seed; the run at
/// index i uses the stream derived from (base, i).
pub fn sweep_lambda(
    setup: &DistillSetup,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    for &base in seeds {
        for (vi, &lambda) in values.iter().enumerate() {
            let run_seed = derive_seed(base, vi as u64);
            let mut cfg = setup.train.clone();
            cfg.seed = run_seed;
            cfg.xkd.lambda = lambda;
            let metrics = run_point(setup, Method::GeneralizedXkd, &cfg)?.metrics;
            records.extend(point_records(metrics, run_seed, |r| {
                r.lambda = Some(lambda);
                r.method = Some(Method::GeneralizedXkd.as_str().into());
            }));
        }
    }
    Ok(records)
}

/// One run per inverse-Boltzmann temperature per base seed.
pub fn sweep_tau_prime(
    setup: &DistillSetup,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    for &base in seeds {
        for (vi, &tau_prime) in values.iter().enumerate() {
            let run_seed = derive_seed(base, vi as u64);
            let mut cfg = setup.train.clone();
            cfg.seed = run_seed;
            cfg.xkd.temps.tau_prime = tau_prime;
            let metrics = run_point(setup, Method::GeneralizedXkd, &cfg)?.metrics;
            records.extend(point_records(metrics, run_seed, |r| {
                r.tau_prime = Some(tau_prime);
                r.method = Some(Method::GeneralizedXkd.as_str().into());
            }));
        }
    }
    Ok(records)
}

/// Train each method on a prefix of the training set, with the step budget
/// scaled by the same fraction (rounded down).
pub fn sweep_data_fraction(
    setup: &DistillSetup,
    fractions: &[f64],
    methods: &[Method],
    seeds: &[u64],
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    for &base in seeds {
        for (fi, &fraction) in fractions.iter().enumerate() {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::invalid(
                    "data fraction",
                    format!("{fraction} outside (0, 1]"),
                ));
            }
            let (d_prompt, d_sft) = setup.fraction_of_data(fraction);
            let scaled = DistillSetup {
                d_prompt,
                d_sft,
                ..setup.clone()
            };
            for (mi, &method) in methods.iter().enumerate() {
                let run_seed = derive_seed(base, (fi * methods.len() + mi) as u64);
                let mut cfg = setup.train.clone();
                cfg.seed = run_seed;
                cfg.steps = ((fraction * setup.train.steps as f64).floor() as usize).max(1);
                cfg.warmup_steps =
                    ((fraction * setup.train.warmup_steps as f64).floor() as usize).min(cfg.steps);
                let metrics = run_point(&scaled, method, &cfg)?.metrics;
                records.extend(point_records(metrics, run_seed, |r| {
                    r.data_fraction = Some(fraction);
                    r.method = Some(method.as_str().into());
                }));
            }
        }
    }
    Ok(records)
}

/// Sampling-temperature sweep: for each temperature emit the task
/// performance (greedy, temperature independent) and the diversity score
/// 1 - SelfBLEU of `n_samples` draws.
pub fn sweep_temperature(
    task: &ToyTask,
    student: &dyn Policy,
    eval_pairs: &[(Prompt, Sequence)],
    temps: &[f64],
    n_samples: usize,
    seeds: &[u64],
) -> Result<Vec<MetricRecord>> {
    if n_samples < 2 {
        return Err(Error::invalid(
            "temperature sweep",
            "needs at least 2 samples",
        ));
    }
    let prompts: Vec<Prompt> = eval_pairs.iter().map(|(x, _)| x.clone()).collect();
    let gen = GenConfig {
        max_len: task.max_len,
        top_p: 1.0,
        ..GenConfig::default()
    };
    let mut records = Vec::new();
    for &base in seeds {
        for (ti, &temperature) in temps.iter().enumerate() {
            let point_seed = derive_seed(base, ti as u64);
            let perf = performance(task, student, eval_pairs, &gen)?;
            let div = diversity_at_temperature(
                student,
                &prompts,
                &gen,
                temperature,
                n_samples,
                point_seed,
            )?;
            let mut perf_rec = MetricRecord::new("performance", perf, point_seed);
            perf_rec.temperature = Some(temperature);
            let mut div_rec = MetricRecord::new("diversity", div, point_seed);
            div_rec.temperature = Some(temperature);
            records.push(perf_rec);
            records.push(div_rec);
        }
    }
    Ok(records)
}

/// Student-capacity sweep: one distillation run per hidden size, the
/// desk-scale analog of varying model scale.
pub fn sweep_hidden_size(
    setup: &DistillSetup,
    sizes: &[usize],
    seeds: &[u64],
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    for &base in seeds {
        for (si, &hidden) in sizes.iter().enumerate() {
            let run_seed = derive_seed(base, si as u64);
            let student_init = NeuralPolicy::random(
                setup.task.vocab.clone(),
                setup.student_init.context_window(),
                hidden,
                0.2,
                derive_seed(run_seed, 0x1217),
            )?;
            let resized = DistillSetup {
                student_init,
                ..setup.clone()
            };
            let mut cfg = setup.train.clone();
            cfg.seed = run_seed;
            let metrics = run_point(&resized, Method::GeneralizedXkd, &cfg)?.metrics;
            records.extend(point_records(metrics, run_seed, |r| {
                r.hidden_size = Some(hidden);
                r.method = Some(Method::GeneralizedXkd.as_str().into());
            }));
        }
    }
    Ok(records)
}

/// Render one curve as a plain two-column "x y" file, averaging the metric
/// over seeds at each x.
pub fn curve_two_column(
    records: &[MetricRecord],
    metric: &str,
    x_of: impl Fn(&MetricRecord) -> Option<f64>,
) -> String {
    let mut by_x: Vec<(f64, f64, usize)> = Vec::new();
    for r in records.iter().filter(|r| r.metric == metric) {
        let Some(x) = x_of(r) else { continue };
        match by_x.iter_mut().find(|(xx, _, _)| *xx == x) {
            Some((_, sum, n)) => {
                *sum += r.value;
                *n += 1;
            }
            None => by_x.push((x, r.value, 1)),
        }
    }
    by_x.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut out = String::new();
    for (x, sum, n) in by_x {
        let _ = writeln!(out, "{x} {}", sum / n as f64);
    }
    out
}
