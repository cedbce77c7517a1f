//! Pattern-verbalizer pairs and label scoring.
//!
//! A pattern turns an example into a cloze question with one `[MASK]`; the
//! verbalizer names one vocabulary token per label. The label distribution is
//! the softmax over the verbalizer-token logits at the mask.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Example, TokenId, Vocab, CLS_ID, MASK_ID};
use crate::error::{Error, Result};
use crate::model::{cls_logits, restricted_logits, Batch, ModelParams, Objective, Target};
use crate::scalar::Scalar;

/// Named patterns: news topic, entailment, QA topic and review rating.
pub const PRESETS: [(&str, &str); 4] = [
    ("agnews", "{a} ( {mask} ) {b}"),
    ("mnli", "\"{a}\" ? || {mask}, \"{b}\""),
    ("yahoo", "[ Category: ] {a} {mask} {b}"),
    ("yelp", "It was {mask}. {a}"),
];

pub fn preset_pattern(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, p)| *p)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    A,
    B,
    Mask,
}

fn parse_pattern(pattern: &str) -> Result<Vec<Segment>> {
    let mut segments = Vec::new();
    let mut rest = pattern;
    while let Some(start) = rest.find('{') {
        let Some(len) = rest[start..].find('}') else { break };
        let name = &rest[start + 1..start + len];
        let seg = match name {
            "a" => Segment::A,
            "b" => Segment::B,
            "mask" => Segment::Mask,
            _ => return Err(Error::Pattern(format!("unknown placeholder {{{name}}}"))),
        };
        if start > 0 {
            segments.push(Segment::Literal(rest[..start].to_string()));
        }
        segments.push(seg);
        rest = &rest[start + len + 1..];
    }
    if !rest.is_empty() {
        segments.push(Segment::Literal(rest.to_string()));
    }
    let count = |s: Segment| segments.iter().filter(|x| **x == s).count();
    if count(Segment::Mask) != 1 {
        return Err(Error::Pattern(format!("pattern must contain exactly one {{mask}}: {pattern:?}")));
    }
    if count(Segment::A) != 1 || count(Segment::B) > 1 {
        return Err(Error::Pattern(format!("pattern needs one {{a}} and at most one {{b}}: {pattern:?}")));
    }
    Ok(segments)
}

#[derive(Serialize, Deserialize)]
struct RawPvp {
    pattern: String,
    verbalizer: BTreeMap<usize, String>,
}

/// A pattern template plus a label → token map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPvp", into = "RawPvp")]
pub struct Pvp {
    pattern: String,
    verbalizer: BTreeMap<usize, String>,
    segments: Vec<Segment>,
}

impl TryFrom<RawPvp> for Pvp {
    type Error = Error;

    fn try_from(raw: RawPvp) -> Result<Self> {
        Pvp::new(&raw.pattern, raw.verbalizer)
    }
}

impl From<Pvp> for RawPvp {
    fn from(p: Pvp) -> Self {
        RawPvp { pattern: p.pattern, verbalizer: p.verbalizer }
    }
}

impl fmt::Display for Pvp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.pattern)
    }
}

impl Pvp {
    /// Parses the pattern and checks the verbalizer covers labels `0..k`
    /// with distinct single-word tokens.
    pub fn new(pattern: &str, verbalizer: BTreeMap<usize, String>) -> Result<Self> {
        let segments = parse_pattern(pattern)?;
        if verbalizer.is_empty() || verbalizer.keys().enumerate().any(|(i, &k)| i != k) {
            return Err(Error::Pattern("verbalizer must cover labels 0..k".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for word in verbalizer.values() {
            let pieces = tokenize(word);
            if pieces.len() != 1 {
                return Err(Error::Validation(format!("verbalizer must be single token: {word:?}")));
            }
            if !seen.insert(pieces[0].clone()) {
                return Err(Error::Pattern(format!("verbalizer token {word:?} used twice")));
            }
        }
        Ok(Pvp { pattern: pattern.to_string(), verbalizer, segments })
    }

    /// Verbalizer keyed by label name, as written in run configs.
    pub fn from_label_names(pattern: &str, label_names: &[String], by_name: &BTreeMap<String, String>) -> Result<Self> {
        let mut verbalizer = BTreeMap::new();
        for (i, name) in label_names.iter().enumerate() {
            let word = by_name
                .get(name)
                .ok_or_else(|| Error::Pattern(format!("verbalizer has no token for label {name:?}")))?;
            verbalizer.insert(i, word.clone());
        }
        if by_name.len() != label_names.len() {
            return Err(Error::Pattern("verbalizer names labels outside the dataset".into()));
        }
        Pvp::new(pattern, verbalizer)
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn verbalizer(&self) -> &BTreeMap<usize, String> {
        &self.verbalizer
    }

    pub fn num_labels(&self) -> usize {
        self.verbalizer.len()
    }

    pub fn uses_b(&self) -> bool {
        self.segments.contains(&Segment::B)
    }

    /// Literal text of the pattern, for vocabulary building.
    pub fn literal_text(&self) -> String {
        let parts: Vec<&str> = self
            .segments
            .iter()
            .filter_map(|s| match s {
                Segment::Literal(t) => Some(t.as_str()),
                _ => None,
            })
            .collect();
        parts.join(" ")
    }

    pub fn verbalizer_words(&self) -> Vec<String> {
        self.verbalizer.values().cloned().collect()
    }

    /// Verbalizer token ids indexed by label.
    pub fn verbalizer_ids(&self, vocab: &Vocab) -> Result<Vec<TokenId>> {
        self.verbalizer.values().map(|w| vocab.single_token(w)).collect()
    }
}

/// Builds the cloze input. Field text is truncated from the end, `{b}`
/// before `{a}`, until the sequence fits; literals and the mask are kept.
pub fn apply_pattern(pvp: &Pvp, example: &Example, vocab: &Vocab, max_seq_len: usize) -> Result<(Vec<TokenId>, usize)> {
    let b_text = match (&example.text_b, pvp.uses_b()) {
        (None, true) => return Err(Error::Pattern(format!("example {} has no text_b for {{b}}", example.id))),
        (Some(b), true) => b.as_str(),
        _ => "",
    };
    let mut a = vocab.encode(&example.text_a);
    let mut b = vocab.encode(b_text);
    let literals: Vec<Vec<TokenId>> = pvp
        .segments
        .iter()
        .map(|s| match s {
            Segment::Literal(t) => vocab.encode(t),
            _ => Vec::new(),
        })
        .collect();
    let fixed = literals.iter().map(Vec::len).sum::<usize>() + 1;
    if fixed > max_seq_len {
        return Err(Error::Pattern(format!("pattern needs {fixed} tokens but max_seq_len is {max_seq_len}")));
    }
    let mut excess = (fixed + a.len() + b.len()).saturating_sub(max_seq_len);
    let cut = excess.min(b.len());
    b.truncate(b.len() - cut);
    excess -= cut;
    a.truncate(a.len() - excess);

    let mut tokens = Vec::with_capacity(max_seq_len);
    let mut mask = 0;
    for (seg, lit) in pvp.segments.iter().zip(&literals) {
        match seg {
            Segment::Literal(_) => tokens.extend_from_slice(lit),
            Segment::A => tokens.extend_from_slice(&a),
            Segment::B => tokens.extend_from_slice(&b),
            Segment::Mask => {
                mask = tokens.len();
                tokens.push(MASK_ID);
            }
        }
    }
    Ok((tokens, mask))
}

/// `[CLS] a b`, truncated like [`apply_pattern`].
pub fn cls_input(example: &Example, vocab: &Vocab, max_seq_len: usize) -> Result<Vec<TokenId>> {
    if max_seq_len < 2 {
        return Err(Error::Contract("max_seq_len too small for a [CLS] input".into()));
    }
    let mut a = vocab.encode(&example.text_a);
    let mut b = example.text_b.as_deref().map(|t| vocab.encode(t)).unwrap_or_default();
    let mut excess = (1 + a.len() + b.len()).saturating_sub(max_seq_len);
    let cut = excess.min(b.len());
    b.truncate(b.len() - cut);
    excess -= cut;
    a.truncate(a.len() - excess);
    let mut tokens = Vec::with_capacity(1 + a.len() + b.len());
    tokens.push(CLS_ID);
    tokens.extend(a);
    tokens.extend(b);
    Ok(tokens)
}

/// Probabilities over labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    pub probs: Vec<f64>,
    pub argmax: usize,
    pub confidence: f64,
}

impl LabelDistribution {
    /// Max-subtracted softmax, evaluated in double precision.
    pub fn from_logits<S: Scalar>(logits: &[S]) -> Self {
        let max = logits.iter().map(|l| l.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let mut argmax = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[argmax] {
                argmax = i;
            }
        }
        LabelDistribution { confidence: probs[argmax], argmax, probs }
    }
}

pub fn score<S: Scalar>(
    params: &ModelParams<S>,
    pvp: &Pvp,
    example: &Example,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<LabelDistribution> {
    let (tokens, mask) = apply_pattern(pvp, example, vocab, max_seq_len)?;
    let logits = restricted_logits(params, &tokens, mask, &pvp.verbalizer_ids(vocab)?)?;
    Ok(LabelDistribution::from_logits(&logits))
}

/// Gold-labeled prompt batch.
pub fn prompt_batch(pvp: &Pvp, examples: &[&Example], vocab: &Vocab, max_seq_len: usize) -> Result<Batch> {
    let labeled = examples
        .iter()
        .map(|e| {
            e.gold_label
                .map(|l| (*e, l))
                .ok_or_else(|| Error::Contract(format!("example {} has no gold label", e.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Task::prompt(pvp.clone(), Arc::new(vocab.clone()), max_seq_len)?.batch(&labeled)
}

#[derive(Debug, Clone, PartialEq)]
enum Readout {
    Prompt { pvp: Pvp, verbalizer: Vec<TokenId> },
    Cls,
}

/// How examples become model inputs and how labels are read back out: either
/// through a pattern and verbalizer, or through the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    readout: Readout,
    vocab: Arc<Vocab>,
    max_seq_len: usize,
}

impl Task {
    pub fn prompt(pvp: Pvp, vocab: Arc<Vocab>, max_seq_len: usize) -> Result<Self> {
        let verbalizer = pvp.verbalizer_ids(&vocab)?;
        Ok(Task { readout: Readout::Prompt { pvp, verbalizer }, vocab, max_seq_len })
    }

    pub fn cls(vocab: Arc<Vocab>, max_seq_len: usize) -> Self {
        Task { readout: Readout::Cls, vocab, max_seq_len }
    }

    pub fn is_prompt(&self) -> bool {
        matches!(self.readout, Readout::Prompt { .. })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn objective(&self) -> Objective<'_> {
        match &self.readout {
            Readout::Prompt { verbalizer, .. } => Objective::Prompt { verbalizer },
            Readout::Cls => Objective::Cls,
        }
    }

    /// Model input for one example and the position the label is read from.
    pub fn input(&self, example: &Example) -> Result<(Vec<TokenId>, usize)> {
        match &self.readout {
            Readout::Prompt { pvp, .. } => apply_pattern(pvp, example, &self.vocab, self.max_seq_len),
            Readout::Cls => Ok((cls_input(example, &self.vocab, self.max_seq_len)?, 0)),
        }
    }

    /// Training batch from `(example, label)` pairs; the label may be gold or
    /// pseudo.
    pub fn batch(&self, items: &[(&Example, usize)]) -> Result<Batch> {
        let mut seqs = Vec::with_capacity(items.len());
        let mut targets = Vec::with_capacity(items.len());
        for &(example, label) in items {
            let (tokens, pos) = self.input(example)?;
            let target = match &self.readout {
                Readout::Prompt { verbalizer, .. } => {
                    let token = *verbalizer
                        .get(label)
                        .ok_or_else(|| Error::Contract(format!("label {label} outside the verbalizer")))?;
                    Target::Masked { position: pos, token }
                }
                Readout::Cls => Target::Label(label),
            };
            seqs.push(tokens);
            targets.push(target);
        }
        Batch::new(seqs, targets)
    }

    pub fn distribution<S: Scalar>(&self, params: &ModelParams<S>, example: &Example) -> Result<LabelDistribution> {
        let (tokens, pos) = self.input(example)?;
        let logits = match &self.readout {
            Readout::Prompt { verbalizer, .. } => restricted_logits(params, &tokens, pos, verbalizer)?,
            Readout::Cls => cls_logits(params, &tokens)?,
        };
        Ok(LabelDistribution::from_logits(&logits))
    }
}
