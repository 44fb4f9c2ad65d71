//! Autoregressive teacher and student policies.
//!
//! The teacher is tabular (exact, enumerable); the student is a small
//! differentiable one-hidden-layer model with a tanh nonlinearity and analytic
//! parameter gradients. Both condition on the last `context_window` tokens of
//! prompt-plus-prefix.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::seq::{context_key, ContextTable, Prompt, Sequence, TokenId, Vocab};

/// Probabilities below the argmax-switch threshold are treated as temperature
/// zero (greedy decoding).
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// A distribution over the next token. Entries are non-negative and sum to
/// one within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist {
    probs: Vec<f64>,
}

impl TokenDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::invalid(
                "token distribution",
                "negative or non-finite entry",
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "token distribution",
                format!("entries sum to {sum}, not 1"),
            ));
        }
        Ok(TokenDist { probs })
    }

    /// Normalize non-negative weights. At least one weight must be positive.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !sum.is_finite() || sum <= 0.0 {
            return Err(Error::invalid(
                "token weights",
                "sum must be positive and finite",
            ));
        }
        Ok(TokenDist {
            probs: weights.iter().map(|w| w / sum).collect(),
        })
    }

    /// Stable softmax.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        TokenDist {
            probs: exps.iter().map(|e| e / sum).collect(),
        }
    }

    pub fn uniform(n: usize) -> Self {
        TokenDist {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, t: TokenId) -> f64 {
        self.probs[t]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// A conditional next-token distribution over a fixed vocabulary.
///
/// Policies are read-only during evaluation and sampling and may be shared
/// across parallel workers; only the trainer mutates parameters, as the
/// single writer between steps.
pub trait Policy: Sync {
    fn vocab(&self) -> &Vocab;
    fn context_window(&self) -> usize;
    /// Next-token distribution at state (x, prefix). Deterministic in the
    /// policy and the last `context_window` tokens of prompt-plus-prefix.
    fn next_dist(&self, x: &Prompt, prefix: &Sequence) -> TokenDist;
}

/// Tabular policy: per-context sparse positive weights over the vocabulary,
/// uniform fallback for unseen contexts. Exact and cheap to enumerate, which
/// is what the oracle needs from a teacher.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    vocab: Vocab,
    window: usize,
    table: ContextTable<Vec<(TokenId, f64)>>,
}

impl TabularPolicy {
    pub fn new(vocab: Vocab, window: usize) -> Self {
        TabularPolicy {
            vocab,
            window,
            table: ContextTable::new(),
        }
    }

    /// Install weights for one context. Weights must be positive; tokens left
    /// out get probability zero, which is how masked teachers are built.
    pub fn set_context(&mut self, ctx: Vec<TokenId>, weights: Vec<(TokenId, f64)>) -> Result<()> {
        if ctx.len() > self.window {
            return Err(Error::invalid(
                "tabular context",
                format!("key length {} exceeds window {}", ctx.len(), self.window),
            ));
        }
        if weights.is_empty() {
            return Err(Error::invalid("tabular context", "no weights"));
        }
        for &(t, w) in &weights {
            if !self.vocab.contains(t) {
                return Err(Error::invalid(
                    "tabular context",
                    format!("token {t} out of range"),
                ));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::invalid(
                    "tabular context",
                    format!("weight {w} for token {t} must be positive"),
                ));
            }
        }
        self.table.insert(ctx, weights);
        Ok(())
    }

    /// Fit n-gram counts from prompt/response pairs with additive smoothing
    /// over the full vocabulary. Any positive `smoothing` keeps every token in
    /// support, so reverse divergences against this policy stay finite.
    pub fn fit_ngrams(
        vocab: &Vocab,
        window: usize,
        data: &[(Prompt, Sequence)],
        smoothing: f64,
    ) -> Result<Self> {
        if !(smoothing.is_finite() && smoothing >= 0.0) {
            return Err(Error::invalid("smoothing", "must be finite and >= 0"));
        }
        let mut counts: ContextTable<Vec<f64>> = ContextTable::new();
        for (x, y) in data {
            let mut prefix = Sequence::start(vocab);
            for &tok in y.generated() {
                let key = context_key(vocab, window, x, &prefix);
                let slot = counts.entry(key).or_insert_with(|| vec![0.0; vocab.size()]);
                slot[tok] += 1.0;
                prefix.push_unchecked(tok);
            }
        }
        let mut policy = TabularPolicy::new(vocab.clone(), window);
        for (ctx, row) in counts {
            let weights: Vec<(TokenId, f64)> = row
                .iter()
                .enumerate()
                .map(|(t, &c)| (t, c + smoothing))
                .filter(|&(_, w)| w > 0.0)
                .collect();
            policy.set_context(ctx, weights)?;
        }
        Ok(policy)
    }

    pub fn contexts(&self) -> impl Iterator<Item = (&Vec<TokenId>, &Vec<(TokenId, f64)>)> {
        self.table.iter()
    }
}

impl Policy for TabularPolicy {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn context_window(&self) -> usize {
        self.window
    }

    fn next_dist(&self, x: &Prompt, prefix: &Sequence) -> TokenDist {
        let key = context_key(&self.vocab, self.window, x, prefix);
        match self.table.get(&key) {
            Some(weights) => {
                let mut dense = vec![0.0; self.vocab.size()];
                let mut sum = 0.0;
                for &(t, w) in weights {
                    dense[t] += w;
                    sum += w;
                }
                for p in &mut dense {
                    *p /= sum;
                }
                TokenDist { probs: dense }
            }
            None => TokenDist::uniform(self.vocab.size()),
        }
    }
}

/// One-hidden-layer student: concatenated one-hot context -> tanh hidden ->
/// vocab logits. Parameters live in a flat vector in checkpoint order
/// (input weights row-major, hidden bias, output weights row-major, output
/// bias) so the optimizer and the gradient checks can treat them uniformly.
#[derive(Debug, Clone)]
pub struct NeuralPolicy {
    vocab: Vocab,
    window: usize,
    hidden: usize,
    params: Vec<f64>,
}

impl NeuralPolicy {
    pub fn zeros(vocab: Vocab, window: usize, hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid(
                "neural policy",
                "hidden_size must be positive",
            ));
        }
        let n = Self::expected_param_count(&vocab, window, hidden);
        Ok(NeuralPolicy {
            vocab,
            window,
            hidden,
            params: vec![0.0; n],
        })
    }

    pub fn random(vocab: Vocab, window: usize, hidden: usize, std: f64, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(vocab, window, hidden)?;
        let mut rng = StdRng::seed_from_u64(seed);
        for w in &mut p.params {
            // Box-Muller keeps us off rand_distr for one Gaussian.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            *w = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
        Ok(p)
    }

    pub fn expected_param_count(vocab: &Vocab, window: usize, hidden: usize) -> usize {
        let input = window * vocab.size();
        input * hidden + hidden + hidden * vocab.size() + vocab.size()
    }

    pub fn from_params(
        vocab: Vocab,
        window: usize,
        hidden: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let expected = Self::expected_param_count(&vocab, window, hidden);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "neural policy parameters",
                expected,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                what: "neural policy parameters".into(),
            });
        }
        Ok(NeuralPolicy {
            vocab,
            window,
            hidden,
            params,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn input_dim(&self) -> usize {
        self.window * self.vocab.size()
    }

    // Flat layout offsets.
    fn off_b1(&self) -> usize {
        self.input_dim() * self.hidden
    }
    fn off_w2(&self) -> usize {
        self.off_b1() + self.hidden
    }
    fn off_b2(&self) -> usize {
        self.off_w2() + self.hidden * self.vocab.size()
    }

    /// Forward pass for one state; returns (probs, hidden activations,
    /// active input indices). The sparse one-hot input means each hidden unit
    /// reads exactly one weight per context slot.
    fn forward(&self, x: &Prompt, prefix: &Sequence) -> (TokenDist, Vec<f64>, Vec<usize>) {
        let v = self.vocab.size();
        let key = context_key(&self.vocab, self.window, x, prefix);
        let active: Vec<usize> = key.iter().enumerate().map(|(j, &t)| j * v + t).collect();

        let mut a1 = vec![0.0; self.hidden];
        let input_dim = self.input_dim();
        for (h, a) in a1.iter_mut().enumerate() {
            let mut z = self.params[self.off_b1() + h];
            let row = h * input_dim;
            for &idx in &active {
                z += self.params[row + idx];
            }
            *a = z.tanh();
        }

        let mut logits = vec![0.0; v];
        for (t, l) in logits.iter_mut().enumerate() {
            let mut z = self.params[self.off_b2() + t];
            let row = self.off_w2() + t * self.hidden;
            for (h, &a) in a1.iter().enumerate() {
                z += self.params[row + h] * a;
            }
            *l = z;
        }

        (TokenDist::from_logits(&logits), a1, active)
    }

    /// Accumulate into `grad` the parameter gradient of `sum_t dlogits[t] *
    /// logits[t]` at one state.
    pub fn accumulate_backprop(
        &self,
        x: &Prompt,
        prefix: &Sequence,
        dlogits: &[f64],
        grad: &mut [f64],
    ) {
        debug_assert_eq!(dlogits.len(), self.vocab.size());
        debug_assert_eq!(grad.len(), self.params.len());
        let (_, a1, active) = self.forward(x, prefix);
        let input_dim = self.input_dim();

        // output layer
        let mut da1 = vec![0.0; self.hidden];
        for (t, &dl) in dlogits.iter().enumerate() {
            grad[self.off_b2() + t] += dl;
            let row = self.off_w2() + t * self.hidden;
            for (h, &a) in a1.iter().enumerate() {
                grad[row + h] += dl * a;
                da1[h] += dl * self.params[row + h];
            }
        }
        // hidden layer through tanh
        for (h, (&da, &a)) in da1.iter().zip(a1.iter()).enumerate() {
            let dz = da * (1.0 - a * a);
            grad[self.off_b1() + h] += dz;
            let row = h * input_dim;
            for &idx in &active {
                grad[row + idx] += dz;
            }
        }
    }
}

impl Policy for NeuralPolicy {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn context_window(&self) -> usize {
        self.window
    }

    fn next_dist(&self, x: &Prompt, prefix: &Sequence) -> TokenDist {
        self.forward(x, prefix).0
    }
}

/// Decoding configuration: temperature rescaling of logits, then nucleus
/// truncation, then a seeded draw.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("gen config", "temperature must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid("gen config", "top_p must lie in (0, 1]"));
        }
        if self.max_len == 0 {
            return Err(Error::invalid("gen config", "max_len must be positive"));
        }
        Ok(())
    }
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            temperature: 1.0,
            top_p: 0.95,
            max_len: 8,
            seed: 0,
        }
    }
}

/// Log-probability of the whole sequence: the sum over generated steps of the
/// log next-token probability. `[BOS]` alone is the empty product, 0. A
/// realized token with probability zero is reported as a typed error rather
/// than silently clamped.
pub fn seq_logprob(policy: &dyn Policy, x: &Prompt, y: &Sequence) -> Result<f64> {
    let mut total = 0.0;
    let mut prefix = Sequence::start(policy.vocab());
    for (step, &tok) in y.generated().iter().enumerate() {
        let p = policy.next_dist(x, &prefix).get(tok);
        if p <= 0.0 {
            return Err(Error::ZeroProbToken { step, token: tok });
        }
        total += p.ln();
        prefix.push_unchecked(tok);
    }
    Ok(total)
}

/// Analytic gradient of [`seq_logprob`] with respect to the student's
/// parameters: per step the logit gradient of a log-softmax is
/// `onehot(token) - probs`, backpropagated through the hidden layer.
pub fn grad_seq_logprob(policy: &NeuralPolicy, x: &Prompt, y: &Sequence) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; policy.param_count()];
    let mut prefix = Sequence::start(policy.vocab());
    for &tok in y.generated() {
        let probs = policy.next_dist(x, &prefix);
        let mut dlogits: Vec<f64> = probs.probs().iter().map(|&p| -p).collect();
        dlogits[tok] += 1.0;
        policy.accumulate_backprop(x, &prefix, &dlogits, &mut grad);
        prefix.push_unchecked(tok);
    }
    Ok(grad)
}

/// Temperature-rescale then nucleus-truncate a next-token distribution.
/// Returns (token, renormalized probability) candidates sorted by descending
/// probability.
fn decode_candidates(dist: &TokenDist, temperature: f64, top_p: f64) -> Vec<(TokenId, f64)> {
    let mut scaled: Vec<(TokenId, f64)> = dist
        .probs()
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p > 0.0)
        .map(|(t, &p)| (t, p.ln() / temperature))
        .collect();
    let max = scaled
        .iter()
        .map(|&(_, l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (_, l) in &mut scaled {
        *l = (*l - max).exp();
        sum += *l;
    }
    for (_, p) in &mut scaled {
        *p /= sum;
    }
    // Descending probability, token id as the deterministic tie-break.
    scaled.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let mut cut = scaled.len();
    let mut cum = 0.0;
    for (i, &(_, p)) in scaled.iter().enumerate() {
        cum += p;
        if cum >= top_p {
            cut = i + 1;
            break;
        }
    }
    scaled.truncate(cut.max(1));
    let mass: f64 = scaled.iter().map(|&(_, p)| p).sum();
    for (_, p) in &mut scaled {
        *p /= mass;
    }
    scaled
}

fn draw_next(dist: &TokenDist, cfg: &GenConfig, rng: &mut StdRng) -> TokenId {
    if cfg.temperature < GREEDY_TEMPERATURE {
        return dist.argmax();
    }
    let candidates = decode_candidates(dist, cfg.temperature, cfg.top_p);
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for &(t, p) in &candidates {
        cum += p;
        if u < cum {
            return t;
        }
    }
    candidates.last().unwrap().0
}

/// Sample a sequence with an externally owned RNG (the trainer threads its
/// own stream through here).
pub fn sample_with_rng(
    policy: &dyn Policy,
    x: &Prompt,
    cfg: &GenConfig,
    rng: &mut StdRng,
) -> Sequence {
    let vocab = policy.vocab();
    let mut y = Sequence::start(vocab);
    for _ in 0..cfg.max_len {
        let dist = policy.next_dist(x, &y);
        let tok = draw_next(&dist, cfg, rng);
        y.push_unchecked(tok);
        if tok == vocab.eos() {
            break;
        }
    }
    y
}

/// Sample a sequence, terminating at EOS or `max_len`; reproducible from
/// `cfg.seed`.
pub fn sample(policy: &dyn Policy, x: &Prompt, cfg: &GenConfig) -> Sequence {
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    sample_with_rng(policy, x, cfg, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab4() -> Vocab {
        Vocab::with_content(2).unwrap() // tokens {0,1}, BOS=2, EOS=3
    }

    fn any_prompt(v: &Vocab) -> Prompt {
        Prompt::new(vec![0], v).unwrap()
    }

    #[test]
    fn zero_params_give_uniform() {
        let v = vocab4();
        let p = NeuralPolicy::zeros(v.clone(), 1, 4).unwrap();
        let d = p.next_dist(&any_prompt(&v), &Sequence::start(&v));
        for &q in d.probs() {
            assert!((q - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn tabular_unseen_context_is_uniform() {
        let v = vocab4();
        let p = TabularPolicy::new(v.clone(), 1);
        let d = p.next_dist(&any_prompt(&v), &Sequence::start(&v));
        for &q in d.probs() {
            assert!((q - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn tabular_hand_normalization() {
        let v = vocab4();
        let mut p = TabularPolicy::new(v.clone(), 1);
        // weights {0: 3, 1: 1}; BOS/EOS masked out
        p.set_context(vec![v.bos()], vec![(0, 3.0), (1, 1.0)])
            .unwrap();
        let d = p.next_dist(&any_prompt(&v), &Sequence::start(&v));
        assert!((d.get(0) - 0.75).abs() < 1e-12);
        assert!((d.get(1) - 0.25).abs() < 1e-12);
        assert_eq!(d.get(v.bos()), 0.0);
        assert_eq!(d.get(v.eos()), 0.0);
    }

    #[test]
    fn param_count_matches_layout() {
        let v = Vocab::with_content(4).unwrap(); // size 6
        let p = NeuralPolicy::zeros(v, 2, 5).unwrap();
        assert_eq!(p.param_count(), 2 * 6 * 5 + 5 + 5 * 6 + 6);
    }

    #[test]
    fn seq_logprob_bos_only_is_zero() {
        let v = vocab4();
        let p = NeuralPolicy::zeros(v.clone(), 1, 2).unwrap();
        let y = Sequence::start(&v);
        assert_eq!(seq_logprob(&p, &any_prompt(&v), &y).unwrap(), 0.0);
    }

    #[test]
    fn seq_logprob_uniform_two_steps() {
        let v = vocab4();
        let p = NeuralPolicy::zeros(v.clone(), 1, 2).unwrap();
        let y = Sequence::new(vec![2, 0, 1], &v).unwrap();
        let lp = seq_logprob(&p, &any_prompt(&v), &y).unwrap();
        assert!((lp - 2.0 * (0.25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn seq_logprob_matches_per_step_product() {
        let v = vocab4();
        let mut teacher = TabularPolicy::new(v.clone(), 1);
        teacher
            .set_context(vec![v.bos()], vec![(0, 2.0), (1, 1.0), (3, 1.0)])
            .unwrap();
        teacher
            .set_context(vec![0], vec![(0, 1.0), (1, 3.0), (3, 4.0)])
            .unwrap();
        teacher
            .set_context(vec![1], vec![(3, 1.0), (0, 1.0)])
            .unwrap();
        let x = any_prompt(&v);
        let y = Sequence::new(vec![2, 0, 1, 3], &v).unwrap();

        // oracle: step-by-step product of hand-queried next_dist entries
        let mut product = 1.0;
        let mut prefix = Sequence::start(&v);
        for &tok in y.generated() {
            product *= teacher.next_dist(&x, &prefix).get(tok);
            prefix.push_unchecked(tok);
        }
        let lp = seq_logprob(&teacher, &x, &y).unwrap();
        assert!((lp - product.ln()).abs() < 1e-12);
        // and the hand numbers: (2/4) * (3/8) * (1/2)
        assert!((product - 0.09375).abs() < 1e-12);
    }

    #[test]
    fn seq_logprob_zero_probability_is_typed() {
        let v = vocab4();
        let mut teacher = TabularPolicy::new(v.clone(), 1);
        teacher.set_context(vec![v.bos()], vec![(0, 1.0)]).unwrap();
        let y = Sequence::new(vec![2, 1], &v).unwrap();
        match seq_logprob(&teacher, &any_prompt(&v), &y) {
            Err(Error::ZeroProbToken { step: 0, token: 1 }) => {}
            other => panic!("expected ZeroProbToken, got {other:?}"),
        }
    }

    #[test]
    fn greedy_limit_is_deterministic_mode() {
        let v = vocab4();
        let mut teacher = TabularPolicy::new(v.clone(), 1);
        teacher
            .set_context(vec![v.bos()], vec![(1, 10.0), (0, 1.0)])
            .unwrap();
        teacher
            .set_context(vec![1], vec![(3, 10.0), (0, 1.0)])
            .unwrap();
        let cfg = GenConfig {
            temperature: 1e-9,
            top_p: 1.0,
            max_len: 5,
            seed: 7,
        };
        let y = sample(&teacher, &any_prompt(&v), &cfg);
        assert_eq!(y.tokens(), &[2, 1, 3]);
    }

    #[test]
    fn same_seed_same_sequence() {
        let v = vocab4();
        let p = NeuralPolicy::random(v.clone(), 1, 4, 0.5, 11).unwrap();
        let cfg = GenConfig {
            seed: 42,
            ..GenConfig::default()
        };
        let a = sample(&p, &any_prompt(&v), &cfg);
        let b = sample(&p, &any_prompt(&v), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn full_nucleus_frequencies_match_next_dist() {
        let v = vocab4();
        let p = NeuralPolicy::random(v.clone(), 1, 4, 0.7, 3).unwrap();
        let x = any_prompt(&v);
        let dist = p.next_dist(&x, &Sequence::start(&v));
        let cfg = GenConfig {
            temperature: 1.0,
            top_p: 1.0,
            max_len: 1,
            seed: 0,
        };
        let n = 100_000usize;
        let mut counts = vec![0usize; v.size()];
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..n {
            let y = sample_with_rng(&p, &x, &cfg, &mut rng);
            counts[y.generated()[0]] += 1;
        }
        for t in 0..v.size() {
            let freq = counts[t] as f64 / n as f64;
            let pt = dist.get(t);
            let sigma = (pt * (1.0 - pt) / n as f64).sqrt();
            assert!(
                (freq - pt).abs() < 4.0 * sigma + 1e-12,
                "token {t}: freq {freq} vs p {pt} (4 sigma {})",
                4.0 * sigma
            );
        }
    }

    #[test]
    fn nucleus_truncates_tail() {
        let v = vocab4();
        let mut teacher = TabularPolicy::new(v.clone(), 1);
        // 0.6 / 0.3 / 0.1: top_p=0.8 keeps tokens 0 and 1 only
        teacher
            .set_context(vec![v.bos()], vec![(0, 6.0), (1, 3.0), (3, 1.0)])
            .unwrap();
        let x = any_prompt(&v);
        let cfg = GenConfig {
            temperature: 1.0,
            top_p: 0.8,
            max_len: 1,
            seed: 0,
        };
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..2000 {
            let y = sample_with_rng(&teacher, &x, &cfg, &mut rng);
            assert_ne!(y.generated()[0], v.eos(), "tail token escaped the nucleus");
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let v = vocab4();
        let x = any_prompt(&v);
        let y = Sequence::new(vec![2, 0, 1, 3], &v).unwrap();
        for seed in 0..20 {
            let p = NeuralPolicy::random(v.clone(), 1, 3, 0.1, seed).unwrap();
            let grad = grad_seq_logprob(&p, &x, &y).unwrap();
            let fd = crate::gradcheck::central_diff(p.params(), 1e-5, |params| {
                let q = NeuralPolicy::from_params(v.clone(), 1, 3, params.to_vec()).unwrap();
                seq_logprob(&q, &x, &y).unwrap()
            });
            let err = crate::gradcheck::max_rel_err(&grad, &fd);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn grad_of_bos_only_is_zero() {
        let v = vocab4();
        let p = NeuralPolicy::random(v.clone(), 1, 3, 0.1, 0).unwrap();
        let g = grad_seq_logprob(&p, &any_prompt(&v), &Sequence::start(&v)).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn output_bias_grad_is_onehot_minus_probs() {
        let v = vocab4();
        let p = NeuralPolicy::random(v.clone(), 1, 3, 0.1, 1).unwrap();
        let x = any_prompt(&v);
        let y = Sequence::new(vec![2, 1], &v).unwrap();
        let probs = p.next_dist(&x, &Sequence::start(&v));
        let g = grad_seq_logprob(&p, &x, &y).unwrap();
        let off = p.param_count() - v.size();
        for t in 0..v.size() {
            let expect = if t == 1 {
                1.0 - probs.get(t)
            } else {
                -probs.get(t)
            };
            assert!((g[off + t] - expect).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn next_dist_normalizes(seed in 0u64..500) {
            let v = vocab4();
            let p = NeuralPolicy::random(v.clone(), 2, 3, 1.0, seed).unwrap();
            let d = p.next_dist(&any_prompt(&v), &Sequence::start(&v));
            let sum: f64 = d.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(d.probs().iter().all(|&q| q >= 0.0));
        }

        #[test]
        fn unit_temperature_full_nucleus_preserves_dist(seed in 0u64..200) {
            let v = vocab4();
            let p = NeuralPolicy::random(v.clone(), 1, 3, 0.8, seed).unwrap();
            let d = p.next_dist(&any_prompt(&v), &Sequence::start(&v));
            let cands = decode_candidates(&d, 1.0, 1.0);
            for (t, q) in cands {
                prop_assert!((q - d.get(t)).abs() < 1e-12);
            }
        }
    }
}
