//! Vocabulary, sequences, prompts, datasets, and the per-step state/action
//! view of autoregressive generation shared by every other module.
//!
//! Generation is treated as an MDP: at step `t` the state is the prompt plus
//! the prefix generated so far, the action is the next token. BOS and EOS are
//! ordinary vocabulary members so the action space is closed; sampling EOS
//! terminates a sequence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Token vocabulary with reserved begin/end markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
    bos: TokenId,
    eos: TokenId,
}

impl Vocab {
    pub fn new(size: usize, bos: TokenId, eos: TokenId) -> Result<Self> {
        if size < 3 {
            return Err(Error::invalid("vocab", format!("size {size} < 3")));
        }
        if bos == eos {
            return Err(Error::invalid("vocab", "bos_id equals eos_id"));
        }
        if bos >= size || eos >= size {
            return Err(Error::invalid(
                "vocab",
                format!("marker id out of range (size {size}, bos {bos}, eos {eos})"),
            ));
        }
        Ok(Vocab { size, bos, eos })
    }

    /// Vocabulary with `n_content` ordinary tokens `0..n_content` followed by
    /// BOS and EOS. The layout used by the toy tasks.
    pub fn with_content(n_content: usize) -> Result<Self> {
        Vocab::new(n_content + 2, n_content, n_content + 1)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn contains(&self, t: TokenId) -> bool {
        t < self.size
    }

    /// Token ids that are neither BOS nor EOS.
    pub fn content_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.size).filter(|&t| t != self.bos && t != self.eos)
    }

    pub fn n_content(&self) -> usize {
        self.size - 2
    }
}

/// A (possibly partial) generated sequence. Always starts with BOS; EOS, if
/// present, is the final token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sequence {
    tokens: Vec<TokenId>,
}

impl Sequence {
    pub fn new(tokens: Vec<TokenId>, vocab: &Vocab) -> Result<Self> {
        if tokens.first() != Some(&vocab.bos()) {
            return Err(Error::invalid("sequence", "first token must be bos_id"));
        }
        for (i, &t) in tokens.iter().enumerate() {
            if !vocab.contains(t) {
                return Err(Error::invalid(
                    "sequence",
                    format!("token {t} at position {i} out of range"),
                ));
            }
            if t == vocab.eos() && i + 1 != tokens.len() {
                return Err(Error::invalid(
                    "sequence",
                    format!("eos_id at interior position {i}"),
                ));
            }
        }
        Ok(Sequence { tokens })
    }

    /// The length-1 sequence holding only BOS.
    pub fn start(vocab: &Vocab) -> Self {
        Sequence {
            tokens: vec![vocab.bos()],
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Generated tokens, i.e. everything after BOS.
    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[1..]
    }

    /// Number of generated tokens.
    pub fn gen_len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_terminated(&self, vocab: &Vocab) -> bool {
        self.tokens.len() > 1 && *self.tokens.last().unwrap() == vocab.eos()
    }

    /// Prefix holding BOS plus the first `t` generated tokens.
    pub fn prefix(&self, t: usize) -> Sequence {
        Sequence {
            tokens: self.tokens[..=t].to_vec(),
        }
    }

    pub(crate) fn push_unchecked(&mut self, t: TokenId) {
        self.tokens.push(t);
    }

    pub(crate) fn pop_unchecked(&mut self) {
        self.tokens.pop();
    }
}

/// Prompt tokens conditioning a generation. Nonempty, never contains EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Prompt {
    tokens: Vec<TokenId>,
}

impl Prompt {
    pub fn new(tokens: Vec<TokenId>, vocab: &Vocab) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("prompt", "empty"));
        }
        for (i, &t) in tokens.iter().enumerate() {
            if !vocab.contains(t) {
                return Err(Error::invalid(
                    "prompt",
                    format!("token {t} at position {i} out of range"),
                ));
            }
            if t == vocab.eos() {
                return Err(Error::invalid("prompt", format!("eos_id at position {i}")));
            }
        }
        Ok(Prompt { tokens })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }
}

/// One state/action transition of the generation MDP: the state is the prefix
/// before the action, the action is the generated token. `next_action` is
/// absent exactly when the action closes the sequence; downstream Q-values of
/// the missing next action are defined as zero (absorbing terminal).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepQuadruple {
    /// Prefix y_{1:t} (BOS plus `step` generated tokens).
    pub state_prefix: Sequence,
    /// The generated token acting at this step.
    pub action: TokenId,
    /// Prefix extended with the action.
    pub next_prefix: Sequence,
    /// The following generated token, absent at the terminal step.
    pub next_action: Option<TokenId>,
    /// Zero-based index over generated tokens.
    pub step: usize,
}

/// Expand a prompt/response pair into one quadruple per generated token, in
/// order. Concatenating the `action` fields reconstructs the sequence minus
/// BOS.
pub fn expand_quadruples(x: &Prompt, y: &Sequence) -> Result<Vec<StepQuadruple>> {
    let _ = x; // states pair the prompt with each prefix; the prompt is shared
    let toks = y.tokens();
    if toks.is_empty() {
        return Err(Error::invalid("sequence", "missing BOS"));
    }
    let n = toks.len() - 1;
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        out.push(StepQuadruple {
            state_prefix: y.prefix(t),
            action: toks[t + 1],
            next_prefix: y.prefix(t + 1),
            next_action: toks.get(t + 2).copied(),
            step: t,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    PromptOnly,
    PromptResponse,
    TeacherBehavior,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::PromptOnly => "prompt-only",
            DatasetKind::PromptResponse => "prompt-response",
            DatasetKind::TeacherBehavior => "teacher-behavior",
        }
    }
}

/// Training/evaluation data. The kind fixes the record arity; teacher-behavior
/// data may carry several responses per prompt.
#[derive(Debug, Clone)]
pub enum Dataset {
    PromptOnly(Vec<Prompt>),
    PromptResponse(Vec<(Prompt, Sequence)>),
    TeacherBehavior(Vec<(Prompt, Vec<Sequence>)>),
}

impl Dataset {
    pub fn kind(&self) -> DatasetKind {
        match self {
            Dataset::PromptOnly(_) => DatasetKind::PromptOnly,
            Dataset::PromptResponse(_) => DatasetKind::PromptResponse,
            Dataset::TeacherBehavior(_) => DatasetKind::TeacherBehavior,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::PromptOnly(v) => v.len(),
            Dataset::PromptResponse(v) => v.len(),
            Dataset::TeacherBehavior(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prompts(&self) -> Vec<&Prompt> {
        match self {
            Dataset::PromptOnly(v) => v.iter().collect(),
            Dataset::PromptResponse(v) => v.iter().map(|(x, _)| x).collect(),
            Dataset::TeacherBehavior(v) => v.iter().map(|(x, _)| x).collect(),
        }
    }
}

fn parse_tokens(field: &str, vocab: &Vocab, line: usize) -> Result<Vec<TokenId>> {
    field
        .split_whitespace()
        .map(|tok| {
            let id: TokenId = tok.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("`{tok}` is not a non-negative integer"),
            })?;
            if !vocab.contains(id) {
                return Err(Error::Parse {
                    line,
                    msg: format!("token {id} out of range for vocab size {}", vocab.size()),
                });
            }
            Ok(id)
        })
        .collect()
}

fn parse_response(field: &str, vocab: &Vocab, line: usize) -> Result<Sequence> {
    let toks = parse_tokens(field, vocab, line)?;
    Sequence::new(toks, vocab).map_err(|e| Error::Parse {
        line,
        msg: e.to_string(),
    })
}

/// Load a dataset file: one record per line, prompt tokens as space-separated
/// integers, `|` before the response, `;` between multiple responses. Lines
/// starting with `#` are comments.
pub fn load_dataset(path: &Path, kind: DatasetKind, vocab: &Vocab) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid("dataset file", format!("{}: {e}", path.display())))?;
    parse_dataset(&text, kind, vocab)
}

pub fn parse_dataset(text: &str, kind: DatasetKind, vocab: &Vocab) -> Result<Dataset> {
    let mut prompts = Vec::new();
    let mut pairs = Vec::new();
    let mut behaviors = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.splitn(2, '|');
        let prompt_field = fields.next().unwrap();
        let response_field = fields.next();
        let prompt =
            Prompt::new(parse_tokens(prompt_field, vocab, line_no)?, vocab).map_err(|e| {
                Error::Parse {
                    line: line_no,
                    msg: e.to_string(),
                }
            })?;
        match kind {
            DatasetKind::PromptOnly => {
                if response_field.is_some() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "unexpected `|` in prompt-only record".into(),
                    });
                }
                prompts.push(prompt);
            }
            DatasetKind::PromptResponse => {
                let resp = response_field.ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: "missing `|` separator before response".into(),
                })?;
                pairs.push((prompt, parse_response(resp, vocab, line_no)?));
            }
            DatasetKind::TeacherBehavior => {
                let resp = response_field.ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: "missing `|` separator before responses".into(),
                })?;
                let responses: Vec<Sequence> = resp
                    .split(';')
                    .map(|r| parse_response(r, vocab, line_no))
                    .collect::<Result<_>>()?;
                if responses.is_empty() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "record has no responses".into(),
                    });
                }
                behaviors.push((prompt, responses));
            }
        }
    }

    Ok(match kind {
        DatasetKind::PromptOnly => Dataset::PromptOnly(prompts),
        DatasetKind::PromptResponse => Dataset::PromptResponse(pairs),
        DatasetKind::TeacherBehavior => Dataset::TeacherBehavior(behaviors),
    })
}

fn write_tokens(out: &mut String, toks: &[TokenId]) {
    for (i, t) in toks.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{t}");
    }
}

/// Render a dataset in the line format accepted by [`load_dataset`].
pub fn format_dataset(data: &Dataset) -> String {
    let mut out = String::new();
    match data {
        Dataset::PromptOnly(v) => {
            for x in v {
                write_tokens(&mut out, x.tokens());
                out.push('\n');
            }
        }
        Dataset::PromptResponse(v) => {
            for (x, y) in v {
                write_tokens(&mut out, x.tokens());
                out.push_str(" | ");
                write_tokens(&mut out, y.tokens());
                out.push('\n');
            }
        }
        Dataset::TeacherBehavior(v) => {
            for (x, ys) in v {
                write_tokens(&mut out, x.tokens());
                out.push_str(" | ");
                for (i, y) in ys.iter().enumerate() {
                    if i > 0 {
                        out.push_str(" ; ");
                    }
                    write_tokens(&mut out, y.tokens());
                }
                out.push('\n');
            }
        }
    }
    out
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    std::fs::write(path, format_dataset(data))?;
    Ok(())
}

/// The last `window` tokens of prompt-plus-prefix, left-padded with BOS when
/// fewer are available. Fixed arity keeps the neural input and the reward
/// features well defined for any state.
pub fn context_key(vocab: &Vocab, window: usize, x: &Prompt, prefix: &Sequence) -> Vec<TokenId> {
    let mut key = vec![vocab.bos(); window];
    let total = x.tokens().len() + prefix.tokens().len();
    let take = window.min(total);
    let mut slot = window;
    let mut remaining = take;
    for &t in prefix.tokens().iter().rev() {
        if remaining == 0 {
            break;
        }
        slot -= 1;
        remaining -= 1;
        key[slot] = t;
    }
    for &t in x.tokens().iter().rev() {
        if remaining == 0 {
            break;
        }
        slot -= 1;
        remaining -= 1;
        key[slot] = t;
    }
    key
}

/// Deterministic per-index stream derivation (splitmix64 over the pair).
/// Sweep points and Monte-Carlo draws each own the stream at their index, so
/// results do not depend on execution order or worker count.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sorted map used to keep tabular-policy serialization deterministic.
pub(crate) type ContextTable<V> = BTreeMap<Vec<TokenId>, V>;

#[cfg(test)]
mod tests {
    use super::*;

    fn v4() -> Vocab {
        // two content tokens, BOS=2, EOS=3
        Vocab::with_content(2).unwrap()
    }

    #[test]
    fn vocab_rejects_degenerate() {
        assert!(Vocab::new(2, 0, 1).is_err());
        assert!(Vocab::new(4, 1, 1).is_err());
        assert!(Vocab::new(4, 4, 1).is_err());
    }

    #[test]
    fn sequence_invariants() {
        let v = v4();
        assert!(Sequence::new(vec![0, 1], &v).is_err()); // missing BOS
        assert!(Sequence::new(vec![2, 3, 0], &v).is_err()); // interior EOS
        assert!(Sequence::new(vec![2, 0, 1, 3], &v).is_ok());
        let s = Sequence::new(vec![2, 0, 3], &v).unwrap();
        assert!(s.is_terminated(&v));
        assert_eq!(s.gen_len(), 2);
    }

    #[test]
    fn prompt_invariants() {
        let v = v4();
        assert!(Prompt::new(vec![], &v).is_err());
        assert!(Prompt::new(vec![0, 3], &v).is_err()); // EOS in prompt
        assert!(Prompt::new(vec![0, 1], &v).is_ok());
    }

    #[test]
    fn quadruples_empty_for_bos_only() {
        let v = v4();
        let x = Prompt::new(vec![0], &v).unwrap();
        let y = Sequence::start(&v);
        assert!(expand_quadruples(&x, &y).unwrap().is_empty());
    }

    #[test]
    fn quadruples_single_step() {
        let v = v4();
        let x = Prompt::new(vec![0], &v).unwrap();
        let y = Sequence::new(vec![2, 1], &v).unwrap();
        let q = expand_quadruples(&x, &y).unwrap();
        assert_eq!(q.len(), 1);
        assert_eq!(q[0].action, 1);
        assert_eq!(q[0].next_action, None);
    }

    #[test]
    fn quadruples_hand_expansion() {
        let v = v4();
        let x = Prompt::new(vec![0], &v).unwrap();
        // y = [BOS, t1=0, t2=1, EOS]
        let y = Sequence::new(vec![2, 0, 1, 3], &v).unwrap();
        let q = expand_quadruples(&x, &y).unwrap();
        assert_eq!(q.len(), 3);
        // second quadruple: s=(x,[BOS,t1]), a=t2, a'=EOS
        assert_eq!(q[1].state_prefix.tokens(), &[2, 0]);
        assert_eq!(q[1].action, 1);
        assert_eq!(q[1].next_prefix.tokens(), &[2, 0, 1]);
        assert_eq!(q[1].next_action, Some(3));
        // last quadruple terminal
        assert_eq!(q[2].action, 3);
        assert_eq!(q[2].next_action, None);
    }

    #[test]
    fn quadruples_reconstruct_sequence() {
        let v = v4();
        let x = Prompt::new(vec![1], &v).unwrap();
        let y = Sequence::new(vec![2, 0, 0, 1, 3], &v).unwrap();
        let q = expand_quadruples(&x, &y).unwrap();
        let actions: Vec<TokenId> = q.iter().map(|s| s.action).collect();
        assert_eq!(actions, y.generated());
        for (t, quad) in q.iter().enumerate() {
            assert_eq!(quad.step, t);
            assert_eq!(quad.state_prefix.gen_len(), t);
            let mut ext = quad.state_prefix.clone();
            ext.push_unchecked(quad.action);
            assert_eq!(&ext, &quad.next_prefix);
        }
    }

    #[test]
    fn dataset_empty_file() {
        let v = v4();
        let d = parse_dataset("", DatasetKind::PromptOnly, &v).unwrap();
        assert_eq!(d.len(), 0);
    }

    #[test]
    fn dataset_prompt_response_line() {
        let v = Vocab::with_content(6).unwrap(); // bos=6, eos=7
        let d = parse_dataset("1 2 | 6 1 2", DatasetKind::PromptResponse, &v).unwrap();
        assert_eq!(d.len(), 1);
        match &d {
            Dataset::PromptResponse(recs) => {
                assert_eq!(recs[0].0.tokens(), &[1, 2]);
                assert_eq!(recs[0].1.tokens(), &[6, 1, 2]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn dataset_teacher_behavior_two_responses() {
        let v = Vocab::with_content(6).unwrap();
        let d = parse_dataset(
            "# comment\n1 2 | 6 1 7 ; 6 2 7\n",
            DatasetKind::TeacherBehavior,
            &v,
        )
        .unwrap();
        match &d {
            Dataset::TeacherBehavior(recs) => {
                assert_eq!(recs.len(), 1);
                assert_eq!(recs[0].1.len(), 2);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn dataset_errors_carry_line_numbers() {
        let v = v4();
        let err = parse_dataset("0\n9 | 2 0", DatasetKind::PromptResponse, &v).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1), // `0` lacks a response
            other => panic!("unexpected error {other:?}"),
        }
        let err = parse_dataset("0 | 2 9", DatasetKind::PromptResponse, &v).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "{msg}");
        assert!(msg.contains("out of range"), "{msg}");
    }

    #[test]
    fn dataset_round_trips_through_format() {
        let v = Vocab::with_content(6).unwrap();
        let text = "1 2 | 6 1 7 ; 6 2 7\n3 | 6 3 7\n";
        let d = parse_dataset(text, DatasetKind::TeacherBehavior, &v).unwrap();
        let re = parse_dataset(&format_dataset(&d), DatasetKind::TeacherBehavior, &v).unwrap();
        assert_eq!(format_dataset(&d), format_dataset(&re));
    }

    #[test]
    fn context_key_truncates_and_pads() {
        let v = v4();
        let x = Prompt::new(vec![0, 1], &v).unwrap();
        let y = Sequence::new(vec![2, 0], &v).unwrap();
        // window 2: last two of [0,1,2,0]
        assert_eq!(context_key(&v, 2, &x, &y), vec![2, 0]);
        // window 3 spans prompt and prefix
        assert_eq!(context_key(&v, 3, &x, &y), vec![1, 2, 0]);
        // window larger than available: left-padded with BOS
        assert_eq!(context_key(&v, 6, &x, &y), vec![2, 2, 0, 1, 2, 0]);
        // window 0: empty key
        assert!(context_key(&v, 0, &x, &y).is_empty());
    }
}
