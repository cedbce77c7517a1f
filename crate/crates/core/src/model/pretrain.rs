use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, TokenId, Vocab, MASK_ID};
use crate::error::Result;
use crate::rng::{rng_for, stream, SimRng};
use crate::scalar::Scalar;

use super::{loss_and_grad, step, Batch, ModelParams, Objective, OptState, Target};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 1500, batch_size: 16, learning_rate: 3e-3, seed: 0 }
    }
}

/// Masks one uniformly chosen non-special token. Returns `None` when the
/// sequence has no maskable token.
pub fn mask_for_mlm(tokens: &[TokenId], rng: &mut SimRng) -> Option<(Vec<TokenId>, Target)> {
    let candidates: Vec<usize> = (0..tokens.len()).filter(|&i| !Vocab::is_special(tokens[i])).collect();
    if candidates.is_empty() {
        return None;
    }
    let position = candidates[rng.gen_range(0..candidates.len())];
    let mut masked = tokens.to_vec();
    masked[position] = MASK_ID;
    Some((masked, Target::Masked { position, token: tokens[position] }))
}

/// Single-mask MLM pretraining with Adam. Returns the loss of every step.
pub fn pretrain_mlm<S: Scalar>(
    params: &mut ModelParams<S>,
    corpus: &Dataset,
    vocab: &Vocab,
    config: &PretrainConfig,
) -> Result<Vec<f64>> {
    let max_len = params.config.max_seq_len;
    let encoded: Vec<Vec<TokenId>> = corpus
        .examples
        .iter()
        .map(|ex| {
            let mut ids = vocab.encode(&ex.text_a);
            if let Some(b) = &ex.text_b {
                ids.extend(vocab.encode(b));
            }
            ids.truncate(max_len);
            ids
        })
        .filter(|ids| ids.iter().any(|&t| !Vocab::is_special(t)))
        .collect();
    if config.steps == 0 || encoded.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = rng_for(config.seed, &[stream::PRETRAIN]);
    let mut opt = OptState::adam(config.learning_rate, params.len());
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut seqs = Vec::with_capacity(config.batch_size);
        let mut targets = Vec::with_capacity(config.batch_size);
        while seqs.len() < config.batch_size.max(1) {
            let src = &encoded[rng.gen_range(0..encoded.len())];
            if let Some((masked, target)) = mask_for_mlm(src, &mut rng) {
                seqs.push(masked);
                targets.push(target);
            }
        }
        let batch = Batch::new(seqs, targets)?;
        let (loss, grad) = loss_and_grad(params, &batch, Objective::Mlm)?;
        step(params, &mut opt, &grad)?;
        losses.push(loss.as_f64());
    }
    Ok(losses)
}
