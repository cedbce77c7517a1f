use crate::corpus::{TokenId, CLS_ID, MASK_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, softmax, Scalar};

use super::encoder::{backward, cls_from_hidden, forward, token_logit, Trace};
use super::ModelParams;

/// Per-example supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Predict `token` at the masked `position`.
    Masked { position: usize, token: TokenId },
    /// Class index for the classification head.
    Label(usize),
}

/// Padded batch. Attention masks are contiguous prefixes: real tokens first,
/// `[PAD]` after.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub seq_len: usize,
    /// `len × seq_len` token ids.
    pub tokens: Vec<TokenId>,
    /// `len × seq_len`, true for real tokens.
    pub attention: Vec<bool>,
    pub targets: Vec<Target>,
}

impl Batch {
    /// Pads the sequences to a common length and validates the targets.
    pub fn new(sequences: Vec<Vec<TokenId>>, targets: Vec<Target>) -> Result<Self> {
        if sequences.len() != targets.len() {
            return Err(Error::Contract("one target per sequence required".into()));
        }
        let seq_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(seq_len * sequences.len());
        let mut attention = Vec::with_capacity(seq_len * sequences.len());
        for (seq, target) in sequences.iter().zip(&targets) {
            if let Target::Masked { position, .. } = *target {
                if position >= seq.len() || seq[position] != MASK_ID {
                    return Err(Error::Contract(format!("masked target at {position} does not point at [MASK]")));
                }
            }
            tokens.extend_from_slice(seq);
            tokens.extend(std::iter::repeat_n(PAD_ID, seq_len - seq.len()));
            attention.extend(std::iter::repeat_n(true, seq.len()));
            attention.extend(std::iter::repeat_n(false, seq_len - seq.len()));
        }
        Ok(Batch { seq_len, tokens, attention, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Unpadded tokens of example `i`.
    pub fn sequence(&self, i: usize) -> &[TokenId] {
        let row = &self.attention[i * self.seq_len..(i + 1) * self.seq_len];
        let len = row.iter().take_while(|&&a| a).count();
        &self.tokens[i * self.seq_len..i * self.seq_len + len]
    }
}

/// Training objective; selects which logits the cross-entropy runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective<'a> {
    /// Softmax over the full vocabulary.
    Mlm,
    /// Softmax over the verbalizer tokens, indexed by label.
    Prompt { verbalizer: &'a [TokenId] },
    /// Softmax over the classification head.
    Cls,
}

struct HeadOutput<S> {
    loss: S,
    /// (position, dL/dhidden row)
    d_hidden: (usize, Vec<S>),
}

/// Cross-entropy of one example; when `grad` is given, accumulates the head
/// parameter gradients into it and returns the hidden-state gradient.
fn head_loss<S: Scalar>(
    params: &ModelParams<S>,
    trace: &Trace<S>,
    target: Target,
    objective: Objective<'_>,
    mut grad: Option<&mut [S]>,
) -> Result<HeadOutput<S>> {
    let cfg = &params.config;
    let lay = params.layout();
    let d = cfg.d_model;
    match (objective, target) {
        (Objective::Mlm, Target::Masked { position, token }) | (Objective::Prompt { .. }, Target::Masked { position, token }) => {
            let candidates: Vec<TokenId> = match objective {
                Objective::Prompt { verbalizer } => verbalizer.to_vec(),
                _ => (0..cfg.vocab_size as TokenId).collect(),
            };
            let gold = candidates
                .iter()
                .position(|&t| t == token)
                .ok_or_else(|| Error::Contract(format!("target token {token} not among the candidates")))?;
            let h = trace.row(position, d);
            let logits: Vec<S> = candidates.iter().map(|&t| token_logit(params, h, t)).collect();
            let loss = log_sum_exp(&logits) - logits[gold];
            let mut dh = vec![S::zero(); d];
            if let Some(g) = grad.as_deref_mut() {
                let mut probs = softmax(&logits);
                probs[gold] -= S::one();
                for (&t, &dl) in candidates.iter().zip(&probs) {
                    let e_off = lay.tok_emb + t as usize * d;
                    for j in 0..d {
                        dh[j] += dl * params.flat[e_off + j];
                        g[e_off + j] += dl * h[j];
                    }
                    g[lay.mlm_bias + t as usize] += dl;
                }
            }
            Ok(HeadOutput { loss, d_hidden: (position, dh) })
        }
        (Objective::Cls, Target::Label(label)) => {
            if trace.len() == 0 || label >= cfg.num_labels {
                return Err(Error::Contract(format!("label {label} outside the {} classes", cfg.num_labels)));
            }
            let h = trace.row(0, d);
            let logits = cls_from_hidden(params, h);
            let loss = log_sum_exp(&logits) - logits[label];
            let mut dh = vec![S::zero(); d];
            if let Some(g) = grad {
                let c = cfg.num_labels;
                let mut probs = softmax(&logits);
                probs[label] -= S::one();
                for j in 0..d {
                    let w = &params.flat[lay.cls_w + j * c..][..c];
                    dh[j] = w.iter().zip(&probs).map(|(&a, &b)| a * b).sum();
                    for k in 0..c {
                        g[lay.cls_w + j * c + k] += h[j] * probs[k];
                    }
                }
                for k in 0..c {
                    g[lay.cls_b + k] += probs[k];
                }
            }
            Ok(HeadOutput { loss, d_hidden: (0, dh) })
        }
        _ => Err(Error::Contract("batch targets do not match the objective".into())),
    }
}

fn check_cls_input(tokens: &[TokenId], objective: Objective<'_>) -> Result<()> {
    if matches!(objective, Objective::Cls) && tokens.first() != Some(&CLS_ID) {
        return Err(Error::Contract("classification input must start with [CLS]".into()));
    }
    Ok(())
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad<S: Scalar>(
    params: &ModelParams<S>,
    batch: &Batch,
    objective: Objective<'_>,
) -> Result<(S, Vec<S>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut grad = vec![S::zero(); params.len()];
    let mut total = S::zero();
    let d = params.config.d_model;
    for (i, &target) in batch.targets.iter().enumerate() {
        let tokens = batch.sequence(i);
        check_cls_input(tokens, objective)?;
        let trace = forward(params, tokens)?;
        let out = head_loss(params, &trace, target, objective, Some(&mut grad))?;
        total += out.loss;
        let (pos, row) = out.d_hidden;
        let mut d_hidden = vec![S::zero(); trace.len() * d];
        d_hidden[pos * d..(pos + 1) * d].copy_from_slice(&row);
        backward(params, &trace, &d_hidden, &mut grad);
    }
    let inv = S::one() / S::of(batch.len() as f64);
    for g in &mut grad {
        *g *= inv;
    }
    Ok((total * inv, grad))
}

/// Cross-entropy of every example, in batch order.
pub fn per_example_losses<S: Scalar>(
    params: &ModelParams<S>,
    batch: &Batch,
    objective: Objective<'_>,
) -> Result<Vec<S>> {
    (0..batch.len())
        .map(|i| {
            let tokens = batch.sequence(i);
            check_cls_input(tokens, objective)?;
            let trace = forward(params, tokens)?;
            Ok(head_loss(params, &trace, batch.targets[i], objective, None)?.loss)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 16, num_labels: 2, d_model: 8, num_layers: 1, num_heads: 2, d_ffn: 8, max_seq_len: 8 }
    }

    #[test]
    fn padding_and_prefix_masks() {
        let b = Batch::new(
            vec![vec![5, MASK_ID], vec![4, 6, MASK_ID, 7]],
            vec![Target::Masked { position: 1, token: 9 }, Target::Masked { position: 2, token: 9 }],
        )
        .unwrap();
        assert_eq!(b.seq_len, 4);
        assert_eq!(b.sequence(0), &[5, MASK_ID]);
        assert_eq!(&b.tokens[..4], &[5, MASK_ID, PAD_ID, PAD_ID]);
        assert!(Batch::new(vec![vec![5, 6]], vec![Target::Masked { position: 1, token: 9 }]).is_err());
    }

    #[test]
    fn duplicated_example_keeps_mean_loss() {
        let p = init_params::<f64>(&tiny(), 3).unwrap();
        let seq = vec![4, MASK_ID, 8, 9];
        let t = Target::Masked { position: 1, token: 10 };
        let one = Batch::new(vec![seq.clone()], vec![t]).unwrap();
        let two = Batch::new(vec![seq.clone(), seq], vec![t, t]).unwrap();
        let (l1, g1) = loss_and_grad(&p, &one, Objective::Mlm).unwrap();
        let (l2, g2) = loss_and_grad(&p, &two, Objective::Mlm).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_verbalizer_logits_give_ln2() {
        let mut p = init_params::<f64>(&tiny(), 4).unwrap();
        // identical embeddings and biases for the two verbalizer tokens
        let emb: Vec<f64> = p.tensor("embed.tokens").unwrap()[10 * 8..11 * 8].to_vec();
        p.tensor_mut("embed.tokens").unwrap()[11 * 8..12 * 8].copy_from_slice(&emb);
        let b = Batch::new(vec![vec![4, MASK_ID, 5]], vec![Target::Masked { position: 1, token: 11 }]).unwrap();
        let (loss, _) = loss_and_grad(&p, &b, Objective::Prompt { verbalizer: &[10, 11] }).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn objective_mismatch_is_rejected() {
        let p = init_params::<f64>(&tiny(), 4).unwrap();
        let b = Batch::new(vec![vec![CLS_ID, 5]], vec![Target::Label(1)]).unwrap();
        assert!(loss_and_grad(&p, &b, Objective::Mlm).is_err());
        assert!(loss_and_grad(&p, &b, Objective::Cls).is_ok());
        let b = Batch::new(vec![vec![5, 5]], vec![Target::Label(1)]).unwrap();
        assert!(loss_and_grad(&p, &b, Objective::Cls).is_err());
    }

    #[test]
    fn permuting_examples_permutes_losses() {
        let p = init_params::<f64>(&tiny(), 5).unwrap();
        let seqs = vec![vec![4, MASK_ID], vec![MASK_ID, 7, 8], vec![9, 9, MASK_ID]];
        let ts = vec![
            Target::Masked { position: 1, token: 12 },
            Target::Masked { position: 0, token: 13 },
            Target::Masked { position: 2, token: 5 },
        ];
        let fwd = per_example_losses(&p, &Batch::new(seqs.clone(), ts.clone()).unwrap(), Objective::Mlm).unwrap();
        let order = [2, 0, 1];
        let pseqs = order.iter().map(|&i| seqs[i].clone()).collect();
        let pts = order.iter().map(|&i| ts[i]).collect();
        let perm = per_example_losses(&p, &Batch::new(pseqs, pts).unwrap(), Objective::Mlm).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(perm[k], fwd[i]);
        }
    }
}
