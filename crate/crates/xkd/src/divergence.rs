//! Token-level divergences and their point-wise (per-sample) averages over
//! realized prefixes.
//!
//! Two beta-parameterized divergences are provided. The skew form
//! `beta*KL(p||q) + (1-beta)*KL(q||p)` is the default: it is the combination
//! the sequence-loss reformulation produces exactly. The mixture form
//! `beta*KL(p||m) + (1-beta)*KL(q||m)` with `m = beta*p + (1-beta)*q` is the
//! published generalized-JSD alternative and stays finite for all inputs.
//!
//! Zero-probability collisions are reported as typed errors, never clamped:
//! the oracle identities depend on these values being exact.

use crate::error::{Error, Result};
use crate::policy::{Policy, TokenDist};
use crate::seq::{Prompt, Sequence};

/// Interpolation weight in [0, 1] between forward and reverse directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaWeight(f64);

impl BetaWeight {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta.is_finite() && (0.0..=1.0).contains(&beta)) {
            return Err(Error::invalid("beta", format!("{beta} outside [0, 1]")));
        }
        Ok(BetaWeight(beta))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Which token-level beta-divergence to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivMode {
    Skew,
    Mixture,
}

/// KL(p || q) with the 0*log(0/.) = 0 convention. Support violations
/// (p_i > 0 while q_i = 0) surface as errors.
pub fn kl_tokens(p: &TokenDist, q: &TokenDist) -> Result<f64> {
    debug_assert_eq!(p.len(), q.len());
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.probs().iter().zip(q.probs().iter()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::SupportViolation {
                token: i,
                step: None,
            });
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// beta*KL(p||q) + (1-beta)*KL(q||p). The endpoints return the single KL
/// directly, so beta=1 is forward KL and beta=0 is reverse KL bit-for-bit
/// (and a support violation on the zero-weighted side cannot poison the
/// result).
pub fn beta_skew_div(p: &TokenDist, q: &TokenDist, beta: BetaWeight) -> Result<f64> {
    let b = beta.value();
    if b == 1.0 {
        return kl_tokens(p, q);
    }
    if b == 0.0 {
        return kl_tokens(q, p);
    }
    Ok(b * kl_tokens(p, q)? + (1.0 - b) * kl_tokens(q, p)?)
}

/// beta*KL(p||m) + (1-beta)*KL(q||m) with m the beta-mixture. Finite for all
/// inputs: each evaluated KL's support is covered by the mixture.
pub fn mixture_jsd(p: &TokenDist, q: &TokenDist, beta: BetaWeight) -> f64 {
    let b = beta.value();
    let mut total = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs().iter()) {
        let mi = b * pi + (1.0 - b) * qi;
        if b > 0.0 && pi > 0.0 {
            total += b * pi * (pi / mi).ln();
        }
        if b < 1.0 && qi > 0.0 {
            total += (1.0 - b) * qi * (qi / mi).ln();
        }
    }
    total
}

fn token_div(p: &TokenDist, q: &TokenDist, beta: BetaWeight, mode: DivMode) -> Result<f64> {
    match mode {
        DivMode::Skew => beta_skew_div(p, q, beta),
        DivMode::Mixture => Ok(mixture_jsd(p, q, beta)),
    }
}

/// Token-level average over the realized prefixes of (x, y):
/// (1/|y|) * sum_t KL(p(.|x,y_1..t) || q(.|x,y_1..t)), |y| counting generated
/// steps.
pub fn pointwise_kl(
    p_policy: &dyn Policy,
    q_policy: &dyn Policy,
    x: &Prompt,
    y: &Sequence,
) -> Result<f64> {
    pointwise_div(p_policy, q_policy, x, y, |p, q, step| {
        kl_tokens(p, q).map_err(|e| e.at_step(step))
    })
}

/// Token-level average of the selected beta-divergence over realized
/// prefixes.
pub fn pointwise_beta_div(
    p_policy: &dyn Policy,
    q_policy: &dyn Policy,
    x: &Prompt,
    y: &Sequence,
    beta: BetaWeight,
    mode: DivMode,
) -> Result<f64> {
    pointwise_div(p_policy, q_policy, x, y, |p, q, step| {
        token_div(p, q, beta, mode).map_err(|e| e.at_step(step))
    })
}

fn pointwise_div(
    p_policy: &dyn Policy,
    q_policy: &dyn Policy,
    x: &Prompt,
    y: &Sequence,
    f: impl Fn(&TokenDist, &TokenDist, usize) -> Result<f64>,
) -> Result<f64> {
    let n = y.gen_len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut prefix = Sequence::start(p_policy.vocab());
    for (step, &tok) in y.generated().iter().enumerate() {
        let p = p_policy.next_dist(x, &prefix);
        let q = q_policy.next_dist(x, &prefix);
        total += f(&p, &q, step)?;
        prefix.push_unchecked(tok);
    }
    Ok(total / n as f64)
}
