//! Toy masked language model: a pre-LN transformer encoder with a tied MLM
//! output projection and a separate classification head, trained by exact
//! backpropagation over a flat parameter vector.

mod batch;
mod checkpoint;
mod encoder;
mod optim;
mod pretrain;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;

pub use batch::{loss_and_grad, per_example_losses, Batch, Objective, Target};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use encoder::{cls_logits, hidden_at, mlm_logits, restricted_logits};
pub use optim::{step, OptState, OptimizerKind};
pub use pretrain::{mask_for_mlm, pretrain_mlm, PretrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Output size of the classification head.
    pub num_labels: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, num_labels: usize) -> Self {
        ModelConfig { vocab_size, num_labels, d_model: 64, num_layers: 2, num_heads: 4, d_ffn: 128, max_seq_len: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= crate::corpus::SPECIAL_TOKENS.len() {
            return Err(Error::Config("vocab_size must exceed the special tokens".into()));
        }
        if self.num_labels == 0 || self.d_model == 0 || self.num_heads == 0 || self.d_ffn == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(4..=256).contains(&self.max_seq_len) {
            return Err(Error::Config(format!("max_seq_len must lie in 4..=256, got {}", self.max_seq_len)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, f, l) = (self.vocab_size, self.d_model, self.d_ffn, self.max_seq_len);
        let per_layer = 4 * d * d + 2 * d * f + 9 * d + f;
        v * d + l * d + self.num_layers * per_layer + 2 * d + v + d * self.num_labels + self.num_labels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one encoder block. Every bias directly follows its weight.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub w2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub mlm_bias: usize,
    pub cls_w: usize,
    pub cls_b: usize,
    pub manifest: Vec<TensorSpec>,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut manifest: Vec<TensorSpec> = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            manifest.push(TensorSpec { name, shape, offset });
            offset
        };
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ffn);
        let tok_emb = push("embed.tokens".into(), vec![v, d]);
        let pos_emb = push("embed.positions".into(), vec![cfg.max_seq_len, d]);
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = |s: &str| format!("block{l}.{s}");
            let ln1_g = push(p("ln1.gain"), vec![d]);
            let ln1_b = push(p("ln1.bias"), vec![d]);
            let mut lin = |name: &str, din: usize, dout: usize| {
                let w = push(p(&format!("{name}.weight")), vec![din, dout]);
                push(p(&format!("{name}.bias")), vec![dout]);
                w
            };
            let wq = lin("attn.query", d, d);
            let wk = lin("attn.key", d, d);
            let wv = lin("attn.value", d, d);
            let wo = lin("attn.out", d, d);
            let ln2_g = push(p("ln2.gain"), vec![d]);
            let ln2_b = push(p("ln2.bias"), vec![d]);
            let w1 = push(p("ffn.up.weight"), vec![d, f]);
            push(p("ffn.up.bias"), vec![f]);
            let w2 = push(p("ffn.down.weight"), vec![f, d]);
            push(p("ffn.down.bias"), vec![d]);
            blocks.push(BlockOffsets { ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, w2 });
        }
        let lnf_g = push("final_ln.gain".into(), vec![d]);
        let lnf_b = push("final_ln.bias".into(), vec![d]);
        let mlm_bias = push("mlm.bias".into(), vec![v]);
        let cls_w = push("cls.weight".into(), vec![d, cfg.num_labels]);
        let cls_b = push("cls.bias".into(), vec![cfg.num_labels]);
        Layout { tok_emb, pos_emb, blocks, lnf_g, lnf_b, mlm_bias, cls_w, cls_b, manifest, total }
    }
}

/// Flat parameter vector plus the manifest describing its tensors.
#[derive(Debug, Clone)]
pub struct ModelParams<S: Scalar> {
    pub config: ModelConfig,
    pub flat: Vec<S>,
    layout: Arc<Layout>,
}

impl<S: Scalar> PartialEq for ModelParams<S> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.flat == other.flat
    }
}

impl<S: Scalar> ModelParams<S> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(config));
        Ok(ModelParams { config: config.clone(), flat: vec![S::zero(); layout.total], layout })
    }

    /// Wraps an existing flat vector; its length must match the config.
    pub fn from_flat(config: &ModelConfig, flat: Vec<S>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if flat.len() != p.flat.len() {
            return Err(Error::Contract(format!(
                "flat vector has {} values, config needs {}",
                flat.len(),
                p.flat.len()
            )));
        }
        p.flat = flat;
        Ok(p)
    }

    /// Same tensors with a different flat vector (aggregation results).
    pub fn with_flat(&self, flat: Vec<S>) -> Result<Self> {
        if flat.len() != self.flat.len() {
            return Err(Error::Contract("flat vector length mismatch".into()));
        }
        Ok(ModelParams { config: self.config.clone(), flat, layout: self.layout.clone() })
    }

    pub fn manifest(&self) -> &[TensorSpec] {
        &self.layout.manifest
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[S]> {
        self.manifest().iter().find(|t| t.name == name).map(|t| &self.flat[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [S]> {
        let range = self.manifest().iter().find(|t| t.name == name)?.range();
        Some(&mut self.flat[range])
    }

    /// Splits the flat vector into named tensors.
    pub fn unflatten(&self) -> Vec<(String, Vec<usize>, Vec<S>)> {
        self.manifest().iter().map(|t| (t.name.clone(), t.shape.clone(), self.flat[t.range()].to_vec())).collect()
    }

    /// Inverse of [`ModelParams::unflatten`].
    pub fn flatten(config: &ModelConfig, tensors: &[(String, Vec<usize>, Vec<S>)]) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if tensors.len() != p.manifest().len() {
            return Err(Error::Contract("tensor count does not match manifest".into()));
        }
        let layout = p.layout.clone();
        for (spec, (name, shape, values)) in layout.manifest.iter().zip(tensors) {
            if &spec.name != name || &spec.shape != shape || values.len() != spec.len() {
                return Err(Error::Contract(format!("tensor {name} does not match manifest entry {}", spec.name)));
            }
            p.flat[spec.range()].copy_from_slice(values);
        }
        Ok(p)
    }

    /// Converts to another scalar type.
    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config.clone(),
            flat: self.flat.iter().map(|v| T::of(v.as_f64())).collect(),
            layout: self.layout.clone(),
        }
    }
}

/// Initializes weights uniformly in `±1/√fan_in` (embeddings use `d_model`
/// as fan-in), layer-norm gains to one and all biases to zero.
pub fn init_params<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<S>> {
    let mut p = ModelParams::<S>::zeros(config)?;
    let mut rng = rng_for(seed, &[stream::INIT]);
    let layout = p.layout.clone();
    for t in &layout.manifest {
        let slot = &mut p.flat[t.range()];
        if t.name.ends_with(".gain") {
            slot.fill(S::one());
        } else if t.name.ends_with(".bias") {
            slot.fill(S::zero());
        } else {
            let fan_in = if t.name.starts_with("embed.") { t.shape[1] } else { t.shape[0] };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in slot.iter_mut() {
                *v = S::of(rng.gen_range(-bound..bound));
            }
        }
    }
    Ok(p)
}
