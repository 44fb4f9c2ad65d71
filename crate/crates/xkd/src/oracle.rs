//! Exact enumeration of sequence distributions on tiny spaces.
//!
//! Every sampled expectation in the trainer has an exact counterpart here,
//! and the two loss-reformulation identities are made executable: residuals
//! of both must sit at float-noise level on any pair of policies with
//! compatible support. Sequences that reach the length cap without EOS are
//! kept as truncated outcomes with their path probability, so total mass is
//! exactly one and matches how sampling truncates.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::divergence::BetaWeight;
use crate::error::{Error, Result};
use crate::parallel;
use crate::policy::{sample_with_rng, seq_logprob, GenConfig, Policy};
use crate::seq::{derive_seed, Prompt, Sequence, Vocab};

const ENUM_BUDGET: f64 = 1e7;

/// An enumerable outcome space: all sequences from one prompt terminating at
/// EOS within `max_len` generated tokens, plus the truncated length-`max_len`
/// non-terminated sequences.
#[derive(Debug, Clone)]
pub struct EnumSpace {
    vocab: Vocab,
    max_len: usize,
    prompt: Prompt,
}

impl EnumSpace {
    pub fn new(vocab: Vocab, max_len: usize, prompt: Prompt) -> Result<Self> {
        let requested = (vocab.size() as f64).powi(max_len as i32);
        if requested > ENUM_BUDGET {
            return Err(Error::BudgetExceeded {
                requested,
                budget: ENUM_BUDGET,
            });
        }
        Ok(EnumSpace {
            vocab,
            max_len,
            prompt,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn prompt(&self) -> &Prompt {
        &self.prompt
    }

    /// Every outcome in deterministic token-id DFS order. The ordering is
    /// policy independent, so per-policy probability vectors over it align.
    pub fn outcomes(&self) -> Vec<Sequence> {
        let mut out = Vec::new();
        let mut prefix = Sequence::start(&self.vocab);
        self.walk(&mut prefix, &mut |y| out.push(y.clone()));
        out
    }

    fn walk(&self, prefix: &mut Sequence, visit: &mut impl FnMut(&Sequence)) {
        if prefix.is_terminated(&self.vocab) || prefix.gen_len() == self.max_len {
            visit(prefix);
            return;
        }
        for t in 0..self.vocab.size() {
            prefix.push_unchecked(t);
            self.walk(prefix, visit);
            prefix.pop_unchecked();
        }
    }
}

fn first_token_shard(policy: &dyn Policy, space: &EnumSpace, first: usize) -> Vec<(Sequence, f64)> {
    let mut shard = Vec::new();
    let mut prefix = Sequence::start(space.vocab());
    let p0 = policy.next_dist(space.prompt(), &prefix).get(first);
    prefix.push_unchecked(first);
    extend_probs(policy, space, &mut prefix, p0, &mut shard);
    shard
}

/// Enumerate all outcomes with their probabilities under `policy`.
/// Probabilities sum to one within 1e-9 for any valid policy. Shards by the
/// first generated token; concatenating shards in token order reproduces the
/// sequential DFS order exactly.
pub fn enumerate_probs(policy: &dyn Policy, space: &EnumSpace) -> Vec<(Sequence, f64)> {
    let shards = parallel::map_indices(space.vocab().size(), |first| {
        first_token_shard(policy, space, first)
    });
    shards.into_iter().flatten().collect()
}

/// The sequential path of [`enumerate_probs`]; identical output.
pub fn enumerate_probs_serial(policy: &dyn Policy, space: &EnumSpace) -> Vec<(Sequence, f64)> {
    let shards = parallel::map_indices_serial(space.vocab().size(), |first| {
        first_token_shard(policy, space, first)
    });
    shards.into_iter().flatten().collect()
}

fn extend_probs(
    policy: &dyn Policy,
    space: &EnumSpace,
    prefix: &mut Sequence,
    prob: f64,
    out: &mut Vec<(Sequence, f64)>,
) {
    if prefix.is_terminated(space.vocab()) || prefix.gen_len() == space.max_len() {
        out.push((prefix.clone(), prob));
        return;
    }
    let dist = policy.next_dist(space.prompt(), prefix);
    for t in 0..space.vocab().size() {
        let p = prob * dist.get(t);
        prefix.push_unchecked(t);
        extend_probs(policy, space, prefix, p, out);
        prefix.pop_unchecked();
    }
}

/// Exact expectation of `f` under the policy's sequence distribution.
/// Outcomes with probability zero are skipped (the 0 * f convention), so `f`
/// is only evaluated on support.
pub fn exact_expectation(
    policy: &dyn Policy,
    space: &EnumSpace,
    mut f: impl FnMut(&Sequence) -> Result<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for (y, p) in enumerate_probs(policy, space) {
        if p == 0.0 {
            continue;
        }
        total += p * f(&y)?;
    }
    Ok(total)
}

/// Exact sequence-level KL(p || q) over the space. Errors if q assigns zero
/// probability inside p's support.
pub fn exact_kl_seq(p: &dyn Policy, q: &dyn Policy, space: &EnumSpace) -> Result<f64> {
    let mut total = 0.0;
    for (y, prob) in enumerate_probs(p, space) {
        if prob == 0.0 {
            continue;
        }
        let lq = seq_logprob(q, space.prompt(), &y)?;
        total += prob * (prob.ln() - lq);
    }
    Ok(total)
}

/// Exact E_{y~teacher}[-log student(y|x)]: the expected sequence-level loss.
pub fn exact_seq_loss(
    teacher: &dyn Policy,
    student: &dyn Policy,
    space: &EnumSpace,
) -> Result<f64> {
    exact_expectation(teacher, space, |y| {
        Ok(-seq_logprob(student, space.prompt(), y)?)
    })
}

/// Exact negative entropy E_{y~policy}[log policy(y|x)].
pub fn exact_neg_entropy(policy: &dyn Policy, space: &EnumSpace) -> Result<f64> {
    let mut total = 0.0;
    for (_, prob) in enumerate_probs(policy, space) {
        if prob == 0.0 {
            continue;
        }
        total += prob * prob.ln();
    }
    Ok(total)
}

/// The sequence-loss reformulation made executable: for any two student
/// parameterizations, `L_seq_exact - KL_exact(teacher||student)` is the same
/// number (the teacher's entropy term, student independent). Returns the
/// difference of the two evaluations; the contract is residual < 1e-9.
pub fn verify_seq_reform(
    teacher: &dyn Policy,
    student_a: &dyn Policy,
    student_b: &dyn Policy,
    space: &EnumSpace,
) -> Result<f64> {
    let lhs_a =
        exact_seq_loss(teacher, student_a, space)? - exact_kl_seq(teacher, student_a, space)?;
    let lhs_b =
        exact_seq_loss(teacher, student_b, space)? - exact_kl_seq(teacher, student_b, space)?;
    Ok((lhs_a - lhs_b).abs())
}

/// The general (forward/reverse mixed) reformulation made executable:
/// beta-weighted forward plus reverse sequence losses must equal the
/// sequence-level skew divergence minus the two entropy terms. Returns the
/// absolute residual between independently enumerated sides.
pub fn verify_gseq_reform(
    teacher: &dyn Policy,
    student: &dyn Policy,
    beta: BetaWeight,
    space: &EnumSpace,
) -> Result<f64> {
    let b = beta.value();
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    if b > 0.0 {
        lhs += b * exact_seq_loss(teacher, student, space)?;
        rhs += b * (exact_kl_seq(teacher, student, space)? - exact_neg_entropy(teacher, space)?);
    }
    if b < 1.0 {
        lhs += (1.0 - b) * exact_seq_loss(student, teacher, space)?;
        rhs += (1.0 - b)
            * (exact_kl_seq(student, teacher, space)? - exact_neg_entropy(student, space)?);
    }
    Ok((lhs - rhs).abs())
}

/// Monte-Carlo estimate next to its exact value.
#[derive(Debug, Clone, Copy)]
pub struct McCheck {
    pub mc_mean: f64,
    pub exact: f64,
    /// Standard error of the mean; `None` when fewer than two samples make it
    /// undefined.
    pub stderr: Option<f64>,
}

impl McCheck {
    /// |mc - exact| < k * stderr. False when stderr is undefined.
    pub fn within_sigma(&self, k: f64) -> bool {
        match self.stderr {
            Some(se) => (self.mc_mean - self.exact).abs() < k * se.max(1e-300),
            None => false,
        }
    }
}

/// Compare the Monte-Carlo estimate of E[f] (raw-distribution sampling:
/// temperature 1, full nucleus, truncation at the space's length cap) against
/// exact enumeration. Draw `i` owns the stream derived from (seed, i), so the
/// estimate is independent of worker count.
pub fn mc_vs_exact(
    policy: &dyn Policy,
    space: &EnumSpace,
    f: impl Fn(&Sequence) -> Result<f64> + Sync,
    n_samples: usize,
    seed: u64,
) -> Result<McCheck> {
    if n_samples == 0 {
        return Err(Error::EmptyInput("mc_vs_exact needs at least one sample"));
    }
    let exact = exact_expectation(policy, space, |y| f(y))?;
    let cfg = GenConfig {
        temperature: 1.0,
        top_p: 1.0,
        max_len: space.max_len(),
        seed,
    };
    let values = parallel::map_indices(n_samples, |i| {
        let mut rng = StdRng::seed_from_u64(derive_seed(seed, i as u64));
        let y = sample_with_rng(policy, space.prompt(), &cfg, &mut rng);
        f(&y)
    });
    let mut sum = 0.0;
    for v in &values {
        match v {
            Ok(x) => sum += x,
            Err(e) => {
                return Err(Error::NonFinite {
                    what: format!("monte-carlo sample evaluation: {e}"),
                })
            }
        }
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let stderr = if n_samples >= 2 {
        let var = values
            .iter()
            .map(|v| {
                let x = *v.as_ref().unwrap();
                (x - mean) * (x - mean)
            })
            .sum::<f64>()
            / (n - 1.0);
        Some((var / n).sqrt())
    } else {
        None
    };
    Ok(McCheck {
        mc_mean: mean,
        exact,
        stderr,
    })
}
