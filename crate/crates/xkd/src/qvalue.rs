//! Q-values recovered from a language policy by the non-strict inverse
//! Boltzmann map, the Boltzmann policy over Q-values, and TD errors along
//! realized trajectories.
//!
//! The inverse map is implemented literally as the log-softmax of
//! tau'-scaled *probabilities* (not logits): `Q_a = tau'*p_a - logsumexp_v
//! tau'*p_v`. Its exponentials therefore sum to one, and recomposing a
//! Boltzmann policy from it does not generally reproduce the original
//! distribution.

use crate::error::{Error, Result};
use crate::policy::{Policy, TokenDist};
use crate::seq::{Prompt, Sequence, Vocab};

/// Boltzmann policy temperature tau and inverse-map temperature tau'.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoltzmannTemps {
    pub tau: f64,
    pub tau_prime: f64,
}

impl Default for BoltzmannTemps {
    fn default() -> Self {
        BoltzmannTemps {
            tau: 1.0,
            tau_prime: 1.0,
        }
    }
}

impl BoltzmannTemps {
    pub fn new(tau: f64, tau_prime: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0 && tau_prime.is_finite() && tau_prime > 0.0) {
            return Err(Error::invalid(
                "temperatures",
                "tau and tau' must be positive",
            ));
        }
        Ok(BoltzmannTemps { tau, tau_prime })
    }
}

/// TD error at one generated step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TDError {
    pub value: f64,
    pub step_index: usize,
}

/// Q-values from next-token probabilities: the log-softmax of tau'-scaled
/// probabilities.
pub fn q_from_policy(p: &TokenDist, tau_prime: f64) -> Vec<f64> {
    let scaled: Vec<f64> = p.probs().iter().map(|&pi| tau_prime * pi).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|&s| s - lse).collect()
}

/// Gradient of `q_from_policy` output at index `action` with respect to the
/// probability vector: `tau' * (onehot(action) - softmax(tau' * p))`.
pub fn q_from_policy_dprobs(p: &TokenDist, tau_prime: f64, action: usize) -> Vec<f64> {
    let scaled: Vec<f64> = p.probs().iter().map(|&pi| tau_prime * pi).collect();
    let w = TokenDist::from_logits(&scaled);
    let mut d: Vec<f64> = w.probs().iter().map(|&wi| -tau_prime * wi).collect();
    d[action] += tau_prime;
    d
}

/// Boltzmann policy over Q-values: softmax(tau * Q).
pub fn boltzmann_policy(q: &[f64], tau: f64) -> TokenDist {
    let scaled: Vec<f64> = q.iter().map(|&qi| tau * qi).collect();
    TokenDist::from_logits(&scaled)
}

/// A policy viewed through the Boltzmann recomposition: next-token
/// distribution softmax(tau * Q) with Q the inverse-Boltzmann values of the
/// wrapped policy.
pub struct BoltzmannView<'a> {
    inner: &'a dyn Policy,
    temps: BoltzmannTemps,
}

impl<'a> BoltzmannView<'a> {
    pub fn new(inner: &'a dyn Policy, temps: BoltzmannTemps) -> Self {
        BoltzmannView { inner, temps }
    }
}

impl Policy for BoltzmannView<'_> {
    fn vocab(&self) -> &Vocab {
        self.inner.vocab()
    }

    fn context_window(&self) -> usize {
        self.inner.context_window()
    }

    fn next_dist(&self, x: &Prompt, prefix: &Sequence) -> TokenDist {
        let q = q_from_policy(&self.inner.next_dist(x, prefix), self.temps.tau_prime);
        boltzmann_policy(&q, self.temps.tau)
    }
}

/// TD error delta_t = Q(s_t, y_{t+1}) - gamma * Q(s_{t+1}, y_{t+2}) along the
/// realized trajectory, with the terminal next-Q defined as zero.
pub fn td_error(
    policy: &dyn Policy,
    x: &Prompt,
    y: &Sequence,
    t: usize,
    gamma: f64,
    tau_prime: f64,
) -> Result<TDError> {
    let n = y.gen_len();
    if t >= n {
        return Err(Error::invalid(
            "td step",
            format!("step {t} out of range for {n} generated tokens"),
        ));
    }
    let toks = y.tokens();
    let action = toks[t + 1];
    let q_now = q_from_policy(&policy.next_dist(x, &y.prefix(t)), tau_prime)[action];
    let q_next = match toks.get(t + 2) {
        Some(&next_action) => {
            q_from_policy(&policy.next_dist(x, &y.prefix(t + 1)), tau_prime)[next_action]
        }
        None => 0.0,
    };
    Ok(TDError {
        value: q_now - gamma * q_next,
        step_index: t,
    })
}

/// Minimal absorbing chain MDP with exact policy evaluation, used to check
/// the Bellman relation `E_{(s',a') ~ pi}[Q(s,a) - gamma*Q(s',a')] = R(s,a)`
/// that motivates the TD-error regularizer. States 0..n-1 are transient, the
/// last state is absorbing with zero value; every action advances the chain,
/// so backward induction is exact for any gamma including 1.
#[derive(Debug, Clone)]
pub struct ChainMdp {
    /// rewards[s][a] for transient states.
    pub rewards: Vec<Vec<f64>>,
    /// policy[s][a], rows sum to one; row for the terminal state unused.
    pub policy: Vec<Vec<f64>>,
}

impl ChainMdp {
    pub fn new(rewards: Vec<Vec<f64>>, policy: Vec<Vec<f64>>) -> Result<Self> {
        if rewards.is_empty() || rewards.len() != policy.len() {
            return Err(Error::invalid("chain mdp", "rewards/policy shape mismatch"));
        }
        for row in &policy {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::invalid(
                    "chain mdp",
                    "policy rows must be distributions",
                ));
            }
        }
        Ok(ChainMdp { rewards, policy })
    }

    pub fn n_transient(&self) -> usize {
        self.rewards.len()
    }

    pub fn n_actions(&self) -> usize {
        self.rewards[0].len()
    }

    /// Exact Q^pi by backward induction from the absorbing terminal.
    pub fn exact_q(&self, gamma: f64) -> Vec<Vec<f64>> {
        let n = self.n_transient();
        let a = self.n_actions();
        let mut q = vec![vec![0.0; a]; n];
        // value of the state after s; terminal value is 0
        let mut v_next = 0.0;
        for s in (0..n).rev() {
            for act in 0..a {
                q[s][act] = self.rewards[s][act] + gamma * v_next;
            }
            v_next = (0..a).map(|act| self.policy[s][act] * q[s][act]).sum();
        }
        q
    }

    /// E_{(s',a') ~ pi}[Q(s,a) - gamma*Q(s',a')] where s' = s+1 and the
    /// terminal Q is zero.
    pub fn td_expectation(&self, q: &[Vec<f64>], s: usize, a: usize, gamma: f64) -> f64 {
        let next_value = if s + 1 < self.n_transient() {
            (0..self.n_actions())
                .map(|act| self.policy[s + 1][act] * q[s + 1][act])
                .sum()
        } else {
            0.0
        };
        q[s][a] - gamma * next_value
    }

    /// A fixed 4-state instance (3 transient + absorbing) with asymmetric
    /// rewards and a non-uniform policy.
    pub fn four_state_example() -> Self {
        ChainMdp::new(
            vec![vec![1.0, -0.5], vec![0.25, 2.0], vec![-1.0, 0.75]],
            vec![vec![0.7, 0.3], vec![0.2, 0.8], vec![0.5, 0.5]],
        )
        .unwrap()
    }
}

/// Max over all transient state-actions of |E[delta] - R(s,a)|.
pub fn bellman_residual(mdp: &ChainMdp, gamma: f64) -> f64 {
    let q = mdp.exact_q(gamma);
    let mut worst = 0.0f64;
    for s in 0..mdp.n_transient() {
        for a in 0..mdp.n_actions() {
            let e = mdp.td_expectation(&q, s, a, gamma);
            worst = worst.max((e - mdp.rewards[s][a]).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{NeuralPolicy, TabularPolicy};
    use crate::seq::Vocab;

    fn vocab() -> Vocab {
        Vocab::with_content(2).unwrap()
    }

    #[test]
    fn uniform_probs_give_constant_q() {
        let p = TokenDist::uniform(4);
        let q = q_from_policy(&p, 1.0);
        for &qi in &q {
            assert!((qi - (-(4.0f64).ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn q_exponentials_sum_to_one() {
        let p = TokenDist::from_weights(&[0.3, 2.0, 0.7, 1.1]).unwrap();
        for tau_prime in [0.1, 0.5, 1.0, 3.0] {
            let q = q_from_policy(&p, tau_prime);
            let mass: f64 = q.iter().map(|&qi| qi.exp()).sum();
            assert!((mass - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn q_two_token_hand_value() {
        let p = TokenDist::new(vec![0.9, 0.1]).unwrap();
        let q = q_from_policy(&p, 1.0);
        let lse = (0.9f64.exp() + 0.1f64.exp()).ln();
        assert!((q[0] - (0.9 - lse)).abs() < 1e-12);
        assert!((q[1] - (0.1 - lse)).abs() < 1e-12);
    }

    #[test]
    fn constant_q_gives_uniform_policy() {
        let d = boltzmann_policy(&[0.7; 5], 2.0);
        for &p in d.probs() {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn large_tau_concentrates_on_argmax() {
        let d = boltzmann_policy(&[0.0, 0.1, -0.2], 100.0);
        assert!(d.get(1) > 0.99);
    }

    #[test]
    fn boltzmann_shift_invariance() {
        let q = [0.3, -0.8, 1.2, 0.0];
        let shifted: Vec<f64> = q.iter().map(|&x| x + 5.37).collect();
        let a = boltzmann_policy(&q, 0.7);
        let b = boltzmann_policy(&shifted, 0.7);
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_map_is_not_a_strict_inverse() {
        let p = TokenDist::new(vec![0.7, 0.2, 0.1]).unwrap();
        let recomposed = boltzmann_policy(&q_from_policy(&p, 1.0), 1.0);
        let max_gap = p
            .probs()
            .iter()
            .zip(recomposed.probs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_gap > 1e-3, "recomposition unexpectedly reproduced p");
    }

    #[test]
    fn q_dprobs_matches_finite_differences() {
        let weights = [0.4, 1.3, 0.2, 0.9];
        let p = TokenDist::from_weights(&weights).unwrap();
        for action in 0..4 {
            for tau_prime in [0.3, 1.0, 2.5] {
                let analytic = q_from_policy_dprobs(&p, tau_prime, action);
                let fd = crate::gradcheck::central_diff(p.probs(), 1e-6, |probs| {
                    let scaled: Vec<f64> = probs.iter().map(|&pi| tau_prime * pi).collect();
                    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + scaled.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
                    scaled[action] - lse
                });
                assert!(crate::gradcheck::max_rel_err(&analytic, &fd) < 1e-4);
            }
        }
    }

    #[test]
    fn td_gamma_zero_is_current_q() {
        let v = vocab();
        let p = NeuralPolicy::random(v.clone(), 1, 3, 0.3, 1).unwrap();
        let x = Prompt::new(vec![0], &v).unwrap();
        let y = Sequence::new(vec![2, 0, 1, 3], &v).unwrap();
        let d = td_error(&p, &x, &y, 1, 0.0, 1.0).unwrap();
        let q = q_from_policy(&p.next_dist(&x, &y.prefix(1)), 1.0);
        assert_eq!(d.value, q[1]);
        assert_eq!(d.step_index, 1);
    }

    #[test]
    fn td_uniform_student_nonterminal_is_zero() {
        let v = vocab();
        let p = NeuralPolicy::zeros(v.clone(), 1, 3).unwrap();
        let x = Prompt::new(vec![0], &v).unwrap();
        let y = Sequence::new(vec![2, 0, 1, 3], &v).unwrap();
        for t in 0..2 {
            let d = td_error(&p, &x, &y, t, 1.0, 1.0).unwrap();
            assert!(d.value.abs() < 1e-12);
        }
    }

    #[test]
    fn td_terminal_uses_zero_next_q() {
        let v = vocab();
        let p = NeuralPolicy::zeros(v.clone(), 1, 3).unwrap();
        let x = Prompt::new(vec![0], &v).unwrap();
        let y = Sequence::new(vec![2, 0, 1, 3], &v).unwrap();
        let d = td_error(&p, &x, &y, 2, 1.0, 1.0).unwrap();
        assert!((d.value - (-(v.size() as f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn constant_dists_make_all_nonterminal_td_zero() {
        let v = vocab();
        // tabular policy with the same weights in every stored context plus
        // uniform fallback: constant distribution across states
        let mut p = TabularPolicy::new(v.clone(), 0);
        p.set_context(vec![], vec![(0, 1.0), (1, 1.0), (2, 1.0), (3, 1.0)])
            .unwrap();
        let x = Prompt::new(vec![1], &v).unwrap();
        let y = Sequence::new(vec![2, 0, 0, 1, 3], &v).unwrap();
        for t in 0..y.gen_len() - 1 {
            let d = td_error(&p, &x, &y, t, 1.0, 0.7).unwrap();
            assert!(d.value.abs() < 1e-12);
        }
    }

    #[test]
    fn chain_mdp_bellman_identity() {
        let mdp = ChainMdp::four_state_example();
        for gamma in [0.9, 1.0] {
            assert!(bellman_residual(&mdp, gamma) < 1e-9, "gamma {gamma}");
        }
    }

    #[test]
    fn chain_mdp_backward_induction_hand_check() {
        // two transient states, single action, reward 1 everywhere:
        // Q(1,0) = 1, Q(0,0) = 1 + gamma
        let mdp = ChainMdp::new(vec![vec![1.0], vec![1.0]], vec![vec![1.0], vec![1.0]]).unwrap();
        let q = mdp.exact_q(0.5);
        assert!((q[1][0] - 1.0).abs() < 1e-15);
        assert!((q[0][0] - 1.5).abs() < 1e-15);
    }
}
