//! Gaussian reward posterior conditioned on a state-action.
//!
//! The posterior is a linear-head Gaussian over hand-built one-hot features:
//! the k context tokens preceding an action concatenated with the action
//! token. A linear head keeps every gradient exact and checkable against the
//! quadrature and finite-difference oracles. Variance is parameterized as
//! log-variance so optimization is unconstrained.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::seq::{context_key, Prompt, Sequence, TokenId, Vocab};

/// One-hot features of a state-action: exactly k+1 active indices in a
/// dimension-(k+1)*V space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateActionFeatures {
    indices: Vec<usize>,
    dim: usize,
}

impl StateActionFeatures {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &i in &self.indices {
            v[i] = 1.0;
        }
        v
    }
}

/// Features for the reward at one step: the k tokens preceding the action
/// plus the action itself.
pub fn state_action_features(
    vocab: &Vocab,
    window: usize,
    x: &Prompt,
    prefix: &Sequence,
    action: TokenId,
) -> StateActionFeatures {
    let v = vocab.size();
    let key = context_key(vocab, window, x, prefix);
    let mut indices: Vec<usize> = key.iter().enumerate().map(|(j, &t)| j * v + t).collect();
    indices.push(window * v + action);
    StateActionFeatures {
        indices,
        dim: (window + 1) * v,
    }
}

pub fn feature_dim(vocab: &Vocab, window: usize) -> usize {
    (window + 1) * vocab.size()
}

/// Gaussian prior over rewards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardPrior {
    pub mean: f64,
    pub std: f64,
}

impl Default for RewardPrior {
    fn default() -> Self {
        RewardPrior {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl RewardPrior {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std.is_finite() && std > 0.0) {
            return Err(Error::invalid("reward prior", "std must be positive"));
        }
        Ok(RewardPrior { mean, std })
    }
}

/// Linear mean and log-variance heads over state-action features.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardPosterior {
    pub w_mu: Vec<f64>,
    pub b_mu: f64,
    pub w_logvar: Vec<f64>,
    pub b_logvar: f64,
}

impl RewardPosterior {
    pub fn zeros(dim: usize) -> Self {
        RewardPosterior {
            w_mu: vec![0.0; dim],
            b_mu: 0.0,
            w_logvar: vec![0.0; dim],
            b_logvar: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_mu.len()
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim() + 2
    }

    /// Flat parameter order: w_mu, b_mu, w_logvar, b_logvar — the checkpoint
    /// order.
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.w_mu);
        out.push(self.b_mu);
        out.extend_from_slice(&self.w_logvar);
        out.push(self.b_logvar);
        out
    }

    pub fn from_params(dim: usize, params: &[f64]) -> Result<Self> {
        if params.len() != 2 * dim + 2 {
            return Err(Error::DimensionMismatch {
                what: "reward head parameters",
                expected: 2 * dim + 2,
                got: params.len(),
            });
        }
        Ok(RewardPosterior {
            w_mu: params[..dim].to_vec(),
            b_mu: params[dim],
            w_logvar: params[dim + 1..2 * dim + 1].to_vec(),
            b_logvar: params[2 * dim + 1],
        })
    }

    pub fn apply_params(&mut self, params: &[f64]) -> Result<()> {
        let updated = Self::from_params(self.dim(), params)?;
        *self = updated;
        Ok(())
    }

    /// (mu, logvar) of the reward distribution at a state-action.
    pub fn posterior_params(&self, feat: &StateActionFeatures) -> Result<(f64, f64)> {
        if feat.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "state-action features",
                expected: self.dim(),
                got: feat.dim(),
            });
        }
        let mut mu = self.b_mu;
        let mut logvar = self.b_logvar;
        for &i in feat.indices() {
            mu += self.w_mu[i];
            logvar += self.w_logvar[i];
        }
        Ok((mu, logvar))
    }
}

/// Closed-form KL(N(mu, e^logvar) || prior). The general prior reduces to the
/// standard-normal case by standardization.
pub fn kl_to_prior(mu: f64, logvar: f64, prior: &RewardPrior) -> f64 {
    let z_mu = (mu - prior.mean) / prior.std;
    let z_logvar = logvar - 2.0 * prior.std.ln();
    0.5 * (z_logvar.exp() + z_mu * z_mu - 1.0 - z_logvar)
}

/// Gaussian log-pdf of `value` under N(mu, e^logvar).
pub fn log_density(mu: f64, logvar: f64, value: f64) -> f64 {
    let diff = value - mu;
    -0.5 * ((2.0 * PI).ln() + logvar + diff * diff * (-logvar).exp())
}

/// d kl_to_prior / d(mu, logvar).
pub fn kl_to_prior_dparams(mu: f64, logvar: f64, prior: &RewardPrior) -> (f64, f64) {
    let var_ratio = (logvar - 2.0 * prior.std.ln()).exp();
    let dmu = (mu - prior.mean) / (prior.std * prior.std);
    let dlogvar = 0.5 * (var_ratio - 1.0);
    (dmu, dlogvar)
}

/// d log_density / d(mu, logvar, value).
pub fn log_density_dparams(mu: f64, logvar: f64, value: f64) -> (f64, f64, f64) {
    let inv_var = (-logvar).exp();
    let diff = value - mu;
    let dmu = diff * inv_var;
    let dlogvar = -0.5 + 0.5 * diff * diff * inv_var;
    let dvalue = -diff * inv_var;
    (dmu, dlogvar, dvalue)
}

/// Scatter (dmu, dlogvar) at one state-action into a flat head gradient.
pub fn accumulate_head_grad(feat: &StateActionFeatures, dmu: f64, dlogvar: f64, grad: &mut [f64]) {
    let dim = feat.dim();
    debug_assert_eq!(grad.len(), 2 * dim + 2);
    for &i in feat.indices() {
        grad[i] += dmu;
        grad[dim + 1 + i] += dlogvar;
    }
    grad[dim] += dmu;
    grad[2 * dim + 1] += dlogvar;
}

/// Head-parameter gradient of kl_to_prior composed with posterior_params.
pub fn grad_kl_to_prior(
    head: &RewardPosterior,
    feat: &StateActionFeatures,
    prior: &RewardPrior,
) -> Result<Vec<f64>> {
    let (mu, logvar) = head.posterior_params(feat)?;
    let (dmu, dlogvar) = kl_to_prior_dparams(mu, logvar, prior);
    let mut grad = vec![0.0; head.param_count()];
    accumulate_head_grad(feat, dmu, dlogvar, &mut grad);
    Ok(grad)
}

/// Head-parameter gradient of log_density composed with posterior_params,
/// plus the derivative with respect to the evaluated value (the hook through
/// which TD errors pass gradient back to the policy).
pub fn grad_log_density(
    head: &RewardPosterior,
    feat: &StateActionFeatures,
    value: f64,
) -> Result<(Vec<f64>, f64)> {
    let (mu, logvar) = head.posterior_params(feat)?;
    let (dmu, dlogvar, dvalue) = log_density_dparams(mu, logvar, value);
    let mut grad = vec![0.0; head.param_count()];
    accumulate_head_grad(feat, dmu, dlogvar, &mut grad);
    Ok((grad, dvalue))
}
