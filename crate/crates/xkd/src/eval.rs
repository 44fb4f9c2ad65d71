//! Toy tasks and evaluation metrics.
//!
//! Three desk-scale tasks stand in for real corpora: copy (echo the prompt),
//! reverse (echo it backwards), and modsum (emit the prompt sum modulo the
//! content-vocabulary size). Performance is token accuracy for copy/reverse
//! and exact match for modsum; diversity is 1 - SelfBLEU over sampled
//! responses, with n-grams capped at 2 because toy sequences are short.

use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::parallel;
use crate::policy::{sample, GenConfig, Policy, GREEDY_TEMPERATURE};
use crate::seq::{derive_seed, Dataset, Prompt, Sequence, TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyTaskKind {
    Copy,
    Reverse,
    ModSum,
}

impl ToyTaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ToyTaskKind::Copy => "copy",
            ToyTaskKind::Reverse => "reverse",
            ToyTaskKind::ModSum => "modsum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(ToyTaskKind::Copy),
            "reverse" => Ok(ToyTaskKind::Reverse),
            "modsum" => Ok(ToyTaskKind::ModSum),
            other => Err(Error::invalid("task kind", format!("unknown `{other}`"))),
        }
    }
}

/// A deterministic toy data generator.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub kind: ToyTaskKind,
    pub vocab: Vocab,
    pub prompt_len: usize,
    /// Generated-token cap for responses and enumeration.
    pub max_len: usize,
    pub seed: u64,
}

impl ToyTask {
    pub fn new(kind: ToyTaskKind, vocab: Vocab, prompt_len: usize, seed: u64) -> Result<Self> {
        if prompt_len == 0 {
            return Err(Error::invalid("toy task", "prompt_len must be positive"));
        }
        let max_len = match kind {
            ToyTaskKind::Copy | ToyTaskKind::Reverse => prompt_len + 1,
            ToyTaskKind::ModSum => 2,
        };
        Ok(ToyTask {
            kind,
            vocab,
            prompt_len,
            max_len,
            seed,
        })
    }

    /// The task's gold response for a prompt, EOS terminated.
    pub fn gold_response(&self, x: &Prompt) -> Sequence {
        let v = &self.vocab;
        let mut toks = vec![v.bos()];
        match self.kind {
            ToyTaskKind::Copy => toks.extend_from_slice(x.tokens()),
            ToyTaskKind::Reverse => toks.extend(x.tokens().iter().rev().copied()),
            ToyTaskKind::ModSum => {
                let sum: usize = x.tokens().iter().sum();
                toks.push(sum % v.n_content());
            }
        }
        toks.push(v.eos());
        Sequence::new(toks, v).expect("gold responses are valid by construction")
    }

    fn random_prompt(&self, rng: &mut StdRng) -> Prompt {
        let toks: Vec<TokenId> = (0..self.prompt_len)
            .map(|_| rng.gen_range(0..self.vocab.n_content()))
            .collect();
        Prompt::new(toks, &self.vocab).expect("content tokens form a valid prompt")
    }

    /// Deterministic prompt/response pairs from the task seed.
    pub fn gen_pairs(&self, n: usize) -> Vec<(Prompt, Sequence)> {
        let mut rng = StdRng::seed_from_u64(self.seed);
        (0..n)
            .map(|_| {
                let x = self.random_prompt(&mut rng);
                let y = self.gold_response(&x);
                (x, y)
            })
            .collect()
    }
}

/// Prompt-only and prompt-response datasets for training.
pub fn gen_task_data(task: &ToyTask, n: usize) -> Result<(Dataset, Dataset)> {
    if n == 0 {
        return Err(Error::EmptyInput("task data size"));
    }
    let pairs = task.gen_pairs(n);
    let prompts = pairs.iter().map(|(x, _)| x.clone()).collect();
    Ok((Dataset::PromptOnly(prompts), Dataset::PromptResponse(pairs)))
}

fn greedy_cfg(gen: &GenConfig) -> GenConfig {
    GenConfig {
        temperature: GREEDY_TEMPERATURE / 2.0,
        top_p: 1.0,
        max_len: gen.max_len,
        seed: gen.seed,
    }
}

/// Fraction of eval items whose greedy decode reproduces the gold response
/// token for token. Greedy decoding ignores the configured sampling
/// temperature.
pub fn exact_match(
    policy: &dyn Policy,
    eval_set: &[(Prompt, Sequence)],
    gen: &GenConfig,
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::EmptyInput("eval set"));
    }
    let cfg = greedy_cfg(gen);
    let hits = parallel::map_collect(eval_set, |(x, gold)| {
        u32::from(&sample(policy, x, &cfg) == gold)
    });
    Ok(hits.iter().sum::<u32>() as f64 / eval_set.len() as f64)
}

/// Position-wise accuracy of the greedy decode against the gold generated
/// tokens, averaged over eval items.
pub fn token_accuracy(
    policy: &dyn Policy,
    eval_set: &[(Prompt, Sequence)],
    gen: &GenConfig,
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::EmptyInput("eval set"));
    }
    let cfg = greedy_cfg(gen);
    let scores = parallel::map_collect(eval_set, |(x, gold)| {
        let decoded = sample(policy, x, &cfg);
        let got = decoded.generated();
        let want = gold.generated();
        let hits = want
            .iter()
            .enumerate()
            .filter(|&(i, &t)| got.get(i) == Some(&t))
            .count();
        hits as f64 / want.len() as f64
    });
    Ok(scores.iter().sum::<f64>() / eval_set.len() as f64)
}

/// The task's headline metric.
pub fn performance(
    task: &ToyTask,
    policy: &dyn Policy,
    eval_set: &[(Prompt, Sequence)],
    gen: &GenConfig,
) -> Result<f64> {
    match task.kind {
        ToyTaskKind::Copy | ToyTaskKind::Reverse => token_accuracy(policy, eval_set, gen),
        ToyTaskKind::ModSum => exact_match(policy, eval_set, gen),
    }
}

fn content_tokens<'a>(y: &'a Sequence, vocab: &Vocab) -> &'a [TokenId] {
    let g = y.generated();
    if y.is_terminated(vocab) {
        &g[..g.len() - 1]
    } else {
        g
    }
}

/// Per-n-gram top-two counts across samples, so each candidate's clipped
/// reference count (max over the *other* samples) reads off in O(1).
struct TopTwo {
    best: usize,
    best_owner: usize,
    second: usize,
}

type NgramCounts = HashMap<Vec<TokenId>, usize>;

fn ngram_tables(
    contents: &[&[TokenId]],
    n: usize,
) -> (Vec<NgramCounts>, HashMap<Vec<TokenId>, TopTwo>) {
    let mut per_sample: Vec<NgramCounts> = Vec::with_capacity(contents.len());
    for c in contents {
        let mut counts = HashMap::new();
        if c.len() >= n {
            for w in c.windows(n) {
                *counts.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        per_sample.push(counts);
    }
    let mut top: HashMap<Vec<TokenId>, TopTwo> = HashMap::new();
    for (i, counts) in per_sample.iter().enumerate() {
        for (gram, &c) in counts {
            let entry = top.entry(gram.clone()).or_insert(TopTwo {
                best: 0,
                best_owner: usize::MAX,
                second: 0,
            });
            if c > entry.best {
                entry.second = entry.best;
                entry.best = c;
                entry.best_owner = i;
            } else if c > entry.second {
                entry.second = c;
            }
        }
    }
    (per_sample, top)
}

/// SelfBLEU over the sample pool: for each sample, modified n-gram precision
/// (n = 1..max_n, geometric mean) against all other samples as references,
/// with a brevity penalty against the closest reference length. Mean over
/// samples; in [0, 1].
pub fn self_bleu(samples: &[Sequence], vocab: &Vocab, max_n: usize) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("self_bleu", "needs at least 2 samples"));
    }
    if max_n == 0 {
        return Err(Error::invalid("self_bleu", "max_n must be positive"));
    }
    let contents: Vec<&[TokenId]> = samples.iter().map(|y| content_tokens(y, vocab)).collect();
    let mut lengths: Vec<usize> = contents.iter().map(|c| c.len()).collect();
    lengths.sort_unstable();

    let tables: Vec<_> = (1..=max_n).map(|n| ngram_tables(&contents, n)).collect();

    let n_empty = contents.iter().filter(|c| c.is_empty()).count();

    let mut total = 0.0;
    for i in 0..contents.len() {
        let c_len = contents[i].len();
        if c_len == 0 {
            // an empty output is a perfect match of any other empty output;
            // without one it matches nothing
            if n_empty >= 2 {
                total += 1.0;
            }
            continue;
        }
        let mut log_sum = 0.0;
        let mut n_used = 0usize;
        let mut zero_precision = false;
        for (per_sample, top) in &tables {
            let counts = &per_sample[i];
            let denom: usize = counts.values().sum();
            if denom == 0 {
                continue; // candidate too short for this order
            }
            n_used += 1;
            let mut clipped = 0usize;
            for (gram, &c) in counts {
                let t = &top[gram];
                let ref_max = if t.best_owner == i { t.second } else { t.best };
                clipped += c.min(ref_max);
            }
            if clipped == 0 {
                zero_precision = true;
                break;
            }
            log_sum += (clipped as f64 / denom as f64).ln();
        }
        if zero_precision || n_used == 0 {
            continue;
        }
        let precision = (log_sum / n_used as f64).exp();

        // closest reference length, excluding the candidate itself: with all
        // lengths sorted, drop one occurrence of c_len and take the nearest
        let r = closest_other_length(&lengths, c_len);
        let bp = if c_len >= r {
            1.0
        } else {
            (1.0 - r as f64 / c_len as f64).exp()
        };
        total += bp * precision;
    }
    Ok(total / contents.len() as f64)
}

fn closest_other_length(sorted: &[usize], c_len: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_dist = usize::MAX;
    let mut skipped_self = false;
    for &l in sorted {
        if !skipped_self && l == c_len {
            skipped_self = true; // the candidate's own length
            continue;
        }
        let dist = l.abs_diff(c_len);
        // ties prefer the shorter reference (sorted ascending does that)
        if dist < best_dist {
            best_dist = dist;
            best = l;
        }
    }
    if best == usize::MAX {
        c_len
    } else {
        best
    }
}

/// Diversity score 1 - SelfBLEU of `n_samples` draws at the given
/// temperature, cycling the eval prompts.
pub fn diversity_at_temperature(
    policy: &dyn Policy,
    prompts: &[Prompt],
    gen: &GenConfig,
    temperature: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput("prompt set"));
    }
    let cfg = GenConfig {
        temperature,
        ..gen.clone()
    };
    let samples: Vec<Sequence> = parallel::map_indices(n_samples, |i| {
        let x = &prompts[i % prompts.len()];
        let cfg_i = GenConfig {
            seed: derive_seed(seed, i as u64),
            ..cfg.clone()
        };
        sample(policy, x, &cfg_i)
    });
    Ok(1.0 - self_bleu(&samples, policy.vocab(), 2)?)
}

/// One emitted measurement with the configuration snapshot that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_prime: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub seed: u64,
}

impl MetricRecord {
    pub fn new(metric: impl Into<String>, value: f64, seed: u64) -> Self {
        MetricRecord {
            metric: metric.into(),
            value,
            temperature: None,
            data_fraction: None,
            lambda: None,
            tau_prime: None,
            hidden_size: None,
            method: None,
            seed,
        }
    }
}

pub fn records_jsonl(records: &[MetricRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_records_jsonl(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
