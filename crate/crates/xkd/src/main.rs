//! Batch entry point: SFT warmup, white-box and black-box distillation,
//! evaluation, sweeps, and the exact-identity verification suite. One command
//! per process; all artifacts land under `--out`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use xkd::checkpoint::{self, PolicyCheckpoint};
use xkd::config::FileConfig;
use xkd::divergence::BetaWeight;
use xkd::error::{Error, Result};
use xkd::eval::{
    diversity_at_temperature, exact_match, performance, records_jsonl, MetricRecord, ToyTask,
};
use xkd::objectives::{loss_ex, loss_orm, loss_seq, XKDConfig};
use xkd::oracle::{enumerate_probs, verify_gseq_reform, verify_seq_reform, EnumSpace};
use xkd::policy::{sample, GenConfig, NeuralPolicy, Policy, TabularPolicy};
use xkd::qvalue::{bellman_residual, BoltzmannTemps, BoltzmannView, ChainMdp};
use xkd::reward::{feature_dim, RewardPosterior};
use xkd::seq::{
    derive_seed, load_dataset, save_dataset, Dataset, DatasetKind, Prompt, Sequence, Vocab,
};
use xkd::sweeps::{
    curve_two_column, run_point, sweep_data_fraction, sweep_hidden_size, sweep_lambda,
    sweep_tau_prime, sweep_temperature, DistillSetup, Method,
};
use xkd::trainer::{sft, train_blackbox_xkd, TrainConfig, TrainReport};

#[derive(Parser)]
#[command(
    name = "xkd",
    about = "Experiential knowledge distillation on toy language tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised fine-tuning of the student on task data.
    Sft(RunArgs),
    /// White-box generalized experiential distillation.
    Distill(RunArgs),
    /// Black-box sequence-level experiential distillation.
    DistillBlackbox(RunArgs),
    /// Evaluate a checkpoint: task performance, exact KL to the teacher,
    /// and sampling diversity.
    Eval(RunArgs),
    /// Run the sweep selected by `sweep.kind`.
    Sweep(RunArgs),
    /// Run the exact-identity verification suite and print residuals.
    Verify(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Key=value configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Sft(args) => run_sft(args),
        Command::Distill(args) => run_distill(args),
        Command::DistillBlackbox(args) => run_distill_blackbox(args),
        Command::Eval(args) => run_eval(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Verify(args) => run_verify(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

struct Ctx {
    cfg: FileConfig,
    out: PathBuf,
}

fn prepare(args: &RunArgs) -> Result<Ctx> {
    let overrides: Vec<(String, String)> = args
        .set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::invalid("--set", format!("`{kv}` is not KEY=VALUE")))
        })
        .collect::<Result<_>>()?;
    let mut cfg = FileConfig::load(args.config.as_deref(), &overrides)?;
    let env_seed = std::env::var("XKD_SEED").ok();
    cfg.apply_env_seed(env_seed.as_deref())?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.echo"), cfg.echo())?;
    Ok(Ctx {
        cfg,
        out: args.out.clone(),
    })
}

fn student_init(cfg: &FileConfig, vocab: &Vocab) -> Result<NeuralPolicy> {
    NeuralPolicy::random(
        vocab.clone(),
        cfg.student_k,
        cfg.student_hidden,
        cfg.student_init_std,
        derive_seed(cfg.seed, 0x1217),
    )
}

/// Training data from files when paths are configured, generated from the
/// task otherwise.
fn training_pairs(cfg: &FileConfig, task: &ToyTask) -> Result<Vec<(Prompt, Sequence)>> {
    match &cfg.data_sft_path {
        Some(p) => match load_dataset(Path::new(p), DatasetKind::PromptResponse, &task.vocab)? {
            Dataset::PromptResponse(pairs) if !pairs.is_empty() => Ok(pairs),
            Dataset::PromptResponse(_) => Err(Error::EmptyInput("sft dataset file")),
            _ => unreachable!(),
        },
        None => Ok(task.gen_pairs(cfg.data_train_items)),
    }
}

fn build_setup(ctx: &Ctx, train: TrainConfig) -> Result<DistillSetup> {
    let cfg = &ctx.cfg;
    let task = cfg.toy_task()?;
    let pairs = training_pairs(cfg, &task)?;
    let teacher =
        TabularPolicy::fit_ngrams(&task.vocab, cfg.teacher_k, &pairs, cfg.teacher_smoothing)?;
    let d_prompt = match &cfg.data_prompt_path {
        Some(p) => load_dataset(Path::new(p), DatasetKind::PromptOnly, &task.vocab)?,
        None => Dataset::PromptOnly(pairs.iter().map(|(x, _)| x.clone()).collect()),
    };
    let eval_task = ToyTask {
        seed: derive_seed(task.seed, 0x5EED),
        ..task.clone()
    };
    let eval_pairs = eval_task.gen_pairs(cfg.data_eval_items);
    Ok(DistillSetup {
        student_init: student_init(cfg, &task.vocab)?,
        task,
        teacher,
        d_prompt,
        d_sft: Dataset::PromptResponse(pairs),
        eval_pairs,
        train,
    })
}

fn finish_training_run(
    ctx: &Ctx,
    report: &TrainReport,
    student: &NeuralPolicy,
    head: Option<&RewardPosterior>,
) -> Result<()> {
    report.write_metrics(&ctx.out.join("metrics.jsonl"))?;
    checkpoint::save_neural(&ctx.out.join("student.ckpt"), student, head)?;
    let window = (report.records.len() / 10).max(1);
    println!(
        "steps={} initial_mean_loss={:.6} final_mean_loss={:.6} wall={:.2}s",
        report.records.len(),
        report.window_mean_first(window),
        report.window_mean_last(window),
        report.wall_time_secs
    );
    if !report.descended(window) {
        return Err(Error::invalid(
            "training contract",
            "final windowed-mean loss did not drop below the initial window",
        ));
    }
    Ok(())
}

fn run_sft(args: &RunArgs) -> Result<()> {
    let ctx = prepare(args)?;
    let task = ctx.cfg.toy_task()?;
    let pairs = training_pairs(&ctx.cfg, &task)?;
    let mut student = student_init(&ctx.cfg, &task.vocab)?;
    let train = ctx.cfg.train_config(&task, Some(ctx.out.clone()))?;
    let report = sft(&mut student, &Dataset::PromptResponse(pairs), &train)?;
    finish_training_run(&ctx, &report, &student, None)
}

fn run_distill(args: &RunArgs) -> Result<()> {
    let ctx = prepare(args)?;
    let task = ctx.cfg.toy_task()?;
    let train = ctx.cfg.train_config(&task, Some(ctx.out.clone()))?;
    let setup = build_setup(&ctx, train.clone())?;
    checkpoint::save_tabular(&ctx.out.join("teacher.ckpt"), &setup.teacher, None)?;
    let outcome = run_point(&setup, Method::GeneralizedXkd, &train)?;
    let mut records = vec![
        MetricRecord::new("eval_kl", outcome.metrics.eval_kl, train.seed),
        MetricRecord::new("performance", outcome.metrics.performance, train.seed),
    ];
    for r in &mut records {
        r.lambda = Some(train.xkd.lambda);
    }
    std::fs::write(ctx.out.join("eval.jsonl"), records_jsonl(&records))?;
    println!(
        "eval_kl={:.6} performance={:.4}",
        outcome.metrics.eval_kl, outcome.metrics.performance
    );
    finish_training_run(
        &ctx,
        &outcome.report,
        &outcome.student,
        outcome.head.as_ref(),
    )
}

/// Teacher-behavior data: loaded when a path is configured, otherwise
/// sampled from the fitted tabular teacher (several responses per prompt).
fn behavior_dataset(ctx: &Ctx, task: &ToyTask) -> Result<Dataset> {
    if let Some(p) = &ctx.cfg.data_teacher_path {
        return load_dataset(Path::new(p), DatasetKind::TeacherBehavior, &task.vocab);
    }
    let pairs = training_pairs(&ctx.cfg, task)?;
    let teacher = TabularPolicy::fit_ngrams(
        &task.vocab,
        ctx.cfg.teacher_k,
        &pairs,
        ctx.cfg.teacher_smoothing,
    )?;
    let gen = ctx.cfg.gen_config(task);
    let per_prompt = ctx.cfg.teacher_responses_per_prompt;
    let records: Vec<(Prompt, Vec<Sequence>)> = pairs
        .iter()
        .enumerate()
        .map(|(i, (x, _))| {
            let responses = (0..per_prompt)
                .map(|r| {
                    let cfg = GenConfig {
                        seed: derive_seed(ctx.cfg.seed, (i * per_prompt + r) as u64),
                        ..gen.clone()
                    };
                    sample(&teacher, x, &cfg)
                })
                .collect();
            (x.clone(), responses)
        })
        .collect();
    let data = Dataset::TeacherBehavior(records);
    save_dataset(&ctx.out.join("teacher_behavior.txt"), &data)?;
    Ok(data)
}

fn run_distill_blackbox(args: &RunArgs) -> Result<()> {
    let ctx = prepare(args)?;
    let task = ctx.cfg.toy_task()?;
    let data = behavior_dataset(&ctx, &task)?;
    let mut student = student_init(&ctx.cfg, &task.vocab)?;
    let mut head = RewardPosterior::zeros(feature_dim(&task.vocab, ctx.cfg.student_k));
    let train = ctx.cfg.train_config(&task, Some(ctx.out.clone()))?;
    let report = train_blackbox_xkd(&data, &mut student, &mut head, &train)?;
    finish_training_run(&ctx, &report, &student, Some(&head))
}

fn run_eval(args: &RunArgs) -> Result<()> {
    let ctx = prepare(args)?;
    let ckpt_path = ctx.cfg.eval_checkpoint.clone().ok_or(Error::Config {
        key: "eval.checkpoint".into(),
        line: None,
        msg: "missing required key for the eval command".into(),
    })?;
    let task = ctx.cfg.toy_task()?;
    let (ckpt, _) = checkpoint::load_checkpoint(Path::new(&ckpt_path), &task.vocab)?;
    let policy: &dyn Policy = match &ckpt {
        PolicyCheckpoint::Neural(p) => p,
        PolicyCheckpoint::Tabular(p) => p,
    };

    let eval_task = ToyTask {
        seed: derive_seed(task.seed, 0x5EED),
        ..task.clone()
    };
    let eval_pairs = eval_task.gen_pairs(ctx.cfg.data_eval_items);
    let pairs = training_pairs(&ctx.cfg, &task)?;
    let teacher = TabularPolicy::fit_ngrams(
        &task.vocab,
        ctx.cfg.teacher_k,
        &pairs,
        ctx.cfg.teacher_smoothing,
    )?;
    let gen = ctx.cfg.gen_config(&task);

    let seed = ctx.cfg.seed;
    let mut records = vec![
        MetricRecord::new(
            "performance",
            performance(&task, policy, &eval_pairs, &gen)?,
            seed,
        ),
        MetricRecord::new("exact_match", exact_match(policy, &eval_pairs, &gen)?, seed),
        MetricRecord::new(
            "eval_kl",
            xkd::sweeps::mean_exact_kl(&teacher, policy, &eval_pairs, &task)?,
            seed,
        ),
    ];
    let prompts: Vec<Prompt> = eval_pairs.iter().map(|(x, _)| x.clone()).collect();
    let mut div = MetricRecord::new(
        "diversity",
        diversity_at_temperature(
            policy,
            &prompts,
            &gen,
            gen.temperature,
            ctx.cfg.eval_n_samples,
            derive_seed(seed, 0xD1F),
        )?,
        seed,
    );
    div.temperature = Some(gen.temperature);
    records.push(div);

    std::fs::write(ctx.out.join("metrics.jsonl"), records_jsonl(&records))?;
    for r in &records {
        println!("{} = {:.6}", r.metric, r.value);
    }
    Ok(())
}

fn write_curves(
    out: &Path,
    records: &[MetricRecord],
    metrics: &[&str],
    x_name: &str,
    x_of: impl Fn(&MetricRecord) -> Option<f64> + Copy,
) -> Result<()> {
    for metric in metrics {
        let text = curve_two_column(records, metric, x_of);
        std::fs::write(out.join(format!("curve_{metric}_vs_{x_name}.txt")), text)?;
    }
    Ok(())
}

fn run_sweep(args: &RunArgs) -> Result<()> {
    let ctx = prepare(args)?;
    let task = ctx.cfg.toy_task()?;
    let train = ctx.cfg.train_config(&task, None)?;
    let setup = build_setup(&ctx, train.clone())?;
    let seeds = ctx.cfg.sweep_seeds.clone();

    let records = match ctx.cfg.sweep_kind.as_str() {
        "temperature" => {
            // sweep a trained student: the configured checkpoint if present,
            // otherwise one distillation run
            let student = match &ctx.cfg.eval_checkpoint {
                Some(p) => {
                    let (ckpt, _) = checkpoint::load_checkpoint(Path::new(p), &task.vocab)?;
                    ckpt.as_neural()
                        .ok_or_else(|| {
                            Error::invalid(
                                "eval.checkpoint",
                                "temperature sweep needs a neural checkpoint",
                            )
                        })?
                        .clone()
                }
                None => run_point(&setup, Method::GeneralizedXkd, &train)?.student,
            };
            let temps = [0.1, 0.3, 0.5, 1.0];
            let records = sweep_temperature(
                &setup.task,
                &student,
                &setup.eval_pairs,
                &temps,
                ctx.cfg.sweep_n_samples,
                &seeds,
            )?;
            write_curves(
                &ctx.out,
                &records,
                &["diversity", "performance"],
                "temperature",
                |r| r.temperature,
            )?;
            records
        }
        "lambda" => {
            let values = [0.0, 0.005, 0.01, 0.015, 0.02];
            let records = sweep_lambda(&setup, &values, &seeds)?;
            write_curves(
                &ctx.out,
                &records,
                &["eval_kl", "performance"],
                "lambda",
                |r| r.lambda,
            )?;
            records
        }
        "tau-prime" => {
            let values = [0.1, 0.3, 0.5, 1.0];
            let records = sweep_tau_prime(&setup, &values, &seeds)?;
            write_curves(
                &ctx.out,
                &records,
                &["eval_kl", "performance"],
                "tau_prime",
                |r| r.tau_prime,
            )?;
            records
        }
        "data-fraction" => {
            let fractions = [0.25, 0.5, 0.75, 1.0];
            let methods = [Method::Gkd, Method::GeneralizedXkd];
            let records = sweep_data_fraction(&setup, &fractions, &methods, &seeds)?;
            for method in methods {
                let subset: Vec<MetricRecord> = records
                    .iter()
                    .filter(|r| r.method.as_deref() == Some(method.as_str()))
                    .cloned()
                    .collect();
                for metric in ["eval_kl", "performance"] {
                    let text = curve_two_column(&subset, metric, |r| r.data_fraction);
                    std::fs::write(
                        ctx.out.join(format!(
                            "curve_{metric}_vs_fraction_{}.txt",
                            method.as_str()
                        )),
                        text,
                    )?;
                }
            }
            records
        }
        "hidden-size" => {
            let sizes = [8, 16, 32, 64];
            let records = sweep_hidden_size(&setup, &sizes, &seeds)?;
            write_curves(
                &ctx.out,
                &records,
                &["eval_kl", "performance"],
                "hidden",
                |r| r.hidden_size.map(|h| h as f64),
            )?;
            records
        }
        other => unreachable!("config validation admits `{other}`"),
    };

    std::fs::write(ctx.out.join("metrics.jsonl"), records_jsonl(&records))?;
    println!(
        "sweep `{}` wrote {} records",
        ctx.cfg.sweep_kind,
        records.len()
    );
    Ok(())
}

struct VerifyLog {
    lines: Vec<String>,
    ok: bool,
}

impl VerifyLog {
    fn check(&mut self, name: &str, residual: f64, bound: f64) {
        let pass = residual.is_finite() && residual < bound;
        let line = format!(
            "{} {name}: residual {residual:.3e} (bound {bound:.0e})",
            if pass { "PASS" } else { "FAIL" }
        );
        println!("{line}");
        self.lines.push(line);
        self.ok &= pass;
    }
}

fn random_full_teacher(vocab: &Vocab, window: usize, seed: u64) -> Result<TabularPolicy> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut teacher = TabularPolicy::new(vocab.clone(), window);
    let mut contexts: Vec<Vec<usize>> = vec![vec![vocab.bos()]];
    contexts.extend((0..vocab.size()).map(|t| vec![t]));
    for ctx in contexts {
        let weights: Vec<(usize, f64)> = (0..vocab.size())
            .map(|t| (t, rng.gen_range(0.2..3.0)))
            .collect();
        teacher.set_context(ctx, weights)?;
    }
    Ok(teacher)
}

fn run_verify(args: &RunArgs) -> Result<()> {
    let ctx = prepare(args)?;
    let mut log = VerifyLog {
        lines: Vec::new(),
        ok: true,
    };
    let seed = ctx.cfg.seed;
    let temps = BoltzmannTemps::new(ctx.cfg.xkd_tau, ctx.cfg.xkd_tau_prime)?;

    // enumeration mass and the two loss reformulations on V=4, L=3
    let v4 = Vocab::with_content(2)?;
    let x = Prompt::new(vec![0], &v4)?;
    let space = EnumSpace::new(v4.clone(), 3, x)?;
    for i in 0..10u64 {
        let teacher = random_full_teacher(&v4, 1, derive_seed(seed, 100 + i))?;
        let a = NeuralPolicy::random(v4.clone(), 1, 3, 0.6, derive_seed(seed, 200 + i))?;
        let b = NeuralPolicy::random(v4.clone(), 1, 3, 0.6, derive_seed(seed, 300 + i))?;
        let mass: f64 = enumerate_probs(&teacher, &space)
            .iter()
            .map(|(_, p)| p)
            .sum();
        log.check(&format!("enumeration-mass[{i}]"), (mass - 1.0).abs(), 1e-9);
        let va = BoltzmannView::new(&a, temps);
        let vb = BoltzmannView::new(&b, temps);
        let r = verify_seq_reform(&teacher, &va, &vb, &space)?;
        log.check(&format!("seq-reform[{i}]"), r, 1e-9);
        for beta in [0.0, 0.5, 1.0] {
            let r = verify_gseq_reform(&teacher, &va, BetaWeight::new(beta)?, &space)?;
            log.check(&format!("g-seq-reform[{i}][beta={beta}]"), r, 1e-9);
        }
    }

    // Bellman consistency on the absorbing chain
    let mdp = ChainMdp::four_state_example();
    for gamma in [0.9, 1.0] {
        log.check(
            &format!("bellman[gamma={gamma}]"),
            bellman_residual(&mdp, gamma),
            1e-9,
        );
    }

    // the loss decomposition on random instances (V=6, generated length <= 4)
    let v6 = Vocab::with_content(4)?;
    let xkd_cfg = XKDConfig::default();
    let mut rng = StdRng::seed_from_u64(derive_seed(seed, 0xDEC));
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let student = NeuralPolicy::random(v6.clone(), 1, 4, 0.3, rng.gen())?;
        let mut head = RewardPosterior::zeros(feature_dim(&v6, 1));
        for w in head.w_mu.iter_mut().chain(head.w_logvar.iter_mut()) {
            *w = rng.gen_range(-0.4..0.4);
        }
        let x = Prompt::new(vec![rng.gen_range(0..v6.n_content())], &v6)?;
        let len = rng.gen_range(1..=4);
        let mut toks = vec![v6.bos()];
        for j in 0..len {
            if j + 1 == len && rng.gen_bool(0.5) {
                toks.push(v6.eos());
            } else {
                toks.push(rng.gen_range(0..v6.n_content()));
            }
        }
        let y = Sequence::new(toks, &v6)?;
        let (orm, _) = loss_orm(&student, &head, &x, &y, &xkd_cfg)?;
        let (s, _) = loss_seq(&student, &x, &y)?;
        let (e, _) = loss_ex(&student, &head, &x, &y, &xkd_cfg)?;
        worst = worst.max((orm.total - (s.total + e.total)).abs());
    }
    log.check("orm-decomposition[100 instances]", worst, 1e-12);

    std::fs::write(ctx.out.join("verify.txt"), log.lines.join("\n") + "\n")?;
    if log.ok {
        println!("all residuals within bounds");
        Ok(())
    } else {
        Err(Error::invalid(
            "verification",
            "at least one residual exceeded its bound",
        ))
    }
}
