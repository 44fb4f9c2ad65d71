//! Plain-text checkpoints.
//!
//! Neural: a `neural k=<k> hidden=<h> vocab=<V>` header followed by one
//! decimal parameter per line in flat order (input weights row-major, hidden
//! bias, output weights row-major, output bias). Tabular: a
//! `tabular k=<k> vocab=<V>` header followed by `ctx_tokens : id weight ...`
//! lines. An optional `rewardhead F=<F>` section with its parameters
//! (w_mu, b_mu, w_logvar, b_logvar order) is appended to either.
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! save/load cycle reproduces parameters bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{NeuralPolicy, Policy, TabularPolicy};
use crate::reward::RewardPosterior;
use crate::seq::{TokenId, Vocab};

#[derive(Debug, Clone)]
pub enum PolicyCheckpoint {
    Neural(NeuralPolicy),
    Tabular(TabularPolicy),
}

impl PolicyCheckpoint {
    pub fn as_neural(&self) -> Option<&NeuralPolicy> {
        match self {
            PolicyCheckpoint::Neural(p) => Some(p),
            PolicyCheckpoint::Tabular(_) => None,
        }
    }

    pub fn as_tabular(&self) -> Option<&TabularPolicy> {
        match self {
            PolicyCheckpoint::Tabular(p) => Some(p),
            PolicyCheckpoint::Neural(_) => None,
        }
    }
}

pub fn format_neural(policy: &NeuralPolicy, head: Option<&RewardPosterior>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "neural k={} hidden={} vocab={}",
        policy.context_window(),
        policy.hidden_size(),
        policy.vocab().size()
    );
    for p in policy.params() {
        let _ = writeln!(out, "{p}");
    }
    if let Some(h) = head {
        append_head(&mut out, h);
    }
    out
}

pub fn format_tabular(policy: &TabularPolicy, head: Option<&RewardPosterior>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "tabular k={} vocab={}",
        policy.context_window(),
        policy.vocab().size()
    );
    for (ctx, weights) in policy.contexts() {
        let ctx_str = ctx
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let mut line = ctx_str;
        line.push_str(" :");
        for (t, w) in weights {
            let _ = write!(line, " {t} {w}");
        }
        let _ = writeln!(out, "{}", line.trim_start());
    }
    if let Some(h) = head {
        append_head(&mut out, h);
    }
    out
}

fn append_head(out: &mut String, head: &RewardPosterior) {
    let _ = writeln!(out, "rewardhead F={}", head.dim());
    for p in head.to_params() {
        let _ = writeln!(out, "{p}");
    }
}

pub fn save_neural(
    path: &Path,
    policy: &NeuralPolicy,
    head: Option<&RewardPosterior>,
) -> Result<()> {
    std::fs::write(path, format_neural(policy, head))?;
    Ok(())
}

pub fn save_tabular(
    path: &Path,
    policy: &TabularPolicy,
    head: Option<&RewardPosterior>,
) -> Result<()> {
    std::fs::write(path, format_tabular(policy, head))?;
    Ok(())
}

fn header_field(line: &str, key: &str, line_no: usize) -> Result<usize> {
    line.split_whitespace()
        .find_map(|tok| tok.strip_prefix(&format!("{key}=")))
        .ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("missing `{key}=` in header"),
        })?
        .parse()
        .map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad `{key}=` value"),
        })
}

fn parse_float(s: &str, line_no: usize) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("`{s}` is not a number"),
    })
}

pub fn load_checkpoint(
    path: &Path,
    vocab: &Vocab,
) -> Result<(PolicyCheckpoint, Option<RewardPosterior>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid("checkpoint file", format!("{}: {e}", path.display())))?;
    parse_checkpoint(&text, vocab)
}

pub fn parse_checkpoint(
    text: &str,
    vocab: &Vocab,
) -> Result<(PolicyCheckpoint, Option<RewardPosterior>)> {
    let mut lines = text.lines().enumerate().peekable();
    let (line_no, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty checkpoint".into(),
    })?;
    let line_no = line_no + 1;

    let policy = if header.starts_with("neural") {
        let k = header_field(header, "k", line_no)?;
        let hidden = header_field(header, "hidden", line_no)?;
        let v = header_field(header, "vocab", line_no)?;
        if v != vocab.size() {
            return Err(Error::DimensionMismatch {
                what: "checkpoint vocab size",
                expected: vocab.size(),
                got: v,
            });
        }
        let n = NeuralPolicy::expected_param_count(vocab, k, hidden);
        let mut params = Vec::with_capacity(n);
        while params.len() < n {
            let (no, line) = lines.next().ok_or(Error::Parse {
                line: line_no,
                msg: format!("expected {n} parameters, file ended at {}", params.len()),
            })?;
            params.push(parse_float(line, no + 1)?);
        }
        PolicyCheckpoint::Neural(NeuralPolicy::from_params(vocab.clone(), k, hidden, params)?)
    } else if header.starts_with("tabular") {
        let k = header_field(header, "k", line_no)?;
        let v: usize = header_field(header, "vocab", line_no)?;
        if v != vocab.size() {
            return Err(Error::DimensionMismatch {
                what: "checkpoint vocab size",
                expected: vocab.size(),
                got: v,
            });
        }
        let mut policy = TabularPolicy::new(vocab.clone(), k);
        while let Some(&(_, line)) = lines.peek() {
            if line.starts_with("rewardhead") {
                break;
            }
            let (no, line) = lines.next().unwrap();
            let no = no + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (ctx_part, weights_part) = line.split_once(':').ok_or(Error::Parse {
                line: no,
                msg: "missing `:` separator in tabular row".into(),
            })?;
            let ctx: Vec<TokenId> = ctx_part
                .split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| Error::Parse {
                        line: no,
                        msg: format!("bad context token `{t}`"),
                    })
                })
                .collect::<Result<_>>()?;
            let fields: Vec<&str> = weights_part.split_whitespace().collect();
            if fields.len() % 2 != 0 {
                return Err(Error::Parse {
                    line: no,
                    msg: "odd number of id/weight fields".into(),
                });
            }
            let mut weights = Vec::with_capacity(fields.len() / 2);
            for pair in fields.chunks(2) {
                let id: TokenId = pair[0].parse().map_err(|_| Error::Parse {
                    line: no,
                    msg: format!("bad token id `{}`", pair[0]),
                })?;
                weights.push((id, parse_float(pair[1], no)?));
            }
            policy.set_context(ctx, weights)?;
        }
        PolicyCheckpoint::Tabular(policy)
    } else {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("unknown checkpoint header `{header}`"),
        });
    };

    let head = match lines.next() {
        Some((no, line)) if line.starts_with("rewardhead") => {
            let dim = header_field(line, "F", no + 1)?;
            let want = 2 * dim + 2;
            let mut params = Vec::with_capacity(want);
            for (no, line) in lines.by_ref() {
                if line.trim().is_empty() {
                    continue;
                }
                params.push(parse_float(line, no + 1)?);
            }
            if params.len() != want {
                return Err(Error::DimensionMismatch {
                    what: "reward head parameters",
                    expected: want,
                    got: params.len(),
                });
            }
            Some(RewardPosterior::from_params(dim, &params)?)
        }
        Some((no, line)) if !line.trim().is_empty() => {
            return Err(Error::Parse {
                line: no + 1,
                msg: format!("unexpected trailing content `{line}`"),
            })
        }
        _ => None,
    };

    Ok((policy, head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Policy;
    use crate::seq::{Prompt, Sequence};

    #[test]
    fn neural_round_trip_is_bit_exact() {
        let v = Vocab::with_content(3).unwrap();
        let p = NeuralPolicy::random(v.clone(), 2, 4, 0.37, 5).unwrap();
        let mut head = RewardPosterior::zeros(crate::reward::feature_dim(&v, 2));
        head.b_mu = 0.1 + 0.2; // a value without a short decimal form
        head.w_logvar[3] = -1.7273626262e-3;
        let text = format_neural(&p, Some(&head));
        let (ckpt, loaded_head) = parse_checkpoint(&text, &v).unwrap();
        let q = ckpt.as_neural().unwrap();
        assert_eq!(p.params(), q.params());
        assert_eq!(loaded_head.unwrap().to_params(), head.to_params());
    }

    #[test]
    fn tabular_round_trip_preserves_dists() {
        let v = Vocab::with_content(3).unwrap();
        let mut p = TabularPolicy::new(v.clone(), 1);
        p.set_context(vec![v.bos()], vec![(0, 1.25), (2, 0.5)])
            .unwrap();
        p.set_context(vec![0], vec![(1, 3.0), (v.eos(), 1.0)])
            .unwrap();
        let text = format_tabular(&p, None);
        let (ckpt, head) = parse_checkpoint(&text, &v).unwrap();
        assert!(head.is_none());
        let q = ckpt.as_tabular().unwrap();
        let x = Prompt::new(vec![0], &v).unwrap();
        for prefix in [
            Sequence::start(&v),
            Sequence::new(vec![v.bos(), 0], &v).unwrap(),
        ] {
            assert_eq!(
                p.next_dist(&x, &prefix).probs(),
                q.next_dist(&x, &prefix).probs()
            );
        }
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let v = Vocab::with_content(3).unwrap();
        let p = NeuralPolicy::zeros(v.clone(), 1, 2).unwrap();
        let text = format_neural(&p, None);
        let other = Vocab::with_content(4).unwrap();
        assert!(parse_checkpoint(&text, &other).is_err());
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let v = Vocab::with_content(3).unwrap();
        let p = NeuralPolicy::zeros(v.clone(), 1, 2).unwrap();
        let text = format_neural(&p, None);
        let cut: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            parse_checkpoint(&cut, &v),
            Err(Error::Parse { .. })
        ));
    }
}
