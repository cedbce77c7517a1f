use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Optimizer state for one training run over one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<S: Scalar> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: u64,
    pub first_moment: Vec<S>,
    pub second_moment: Vec<S>,
}

impl<S: Scalar> OptState<S> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, len: usize) -> Self {
        let moments = if kind == OptimizerKind::Adam { len } else { 0 };
        OptState {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            first_moment: vec![S::zero(); moments],
            second_moment: vec![S::zero(); moments],
        }
    }

    pub fn adam(learning_rate: f64, len: usize) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate, len)
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate, 0)
    }
}

/// Applies one optimizer update in place.
pub fn step<S: Scalar>(params: &mut ModelParams<S>, state: &mut OptState<S>, gradient: &[S]) -> Result<()> {
    if gradient.len() != params.len() {
        return Err(Error::Contract(format!(
            "gradient has {} entries, parameters have {}",
            gradient.len(),
            params.len()
        )));
    }
    state.steps += 1;
    match state.kind {
        OptimizerKind::Sgd => {
            if state.learning_rate == 0.0 {
                return Ok(());
            }
            let lr = S::of(state.learning_rate);
            for (p, &g) in params.flat.iter_mut().zip(gradient) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Adam => {
            if state.first_moment.len() != params.len() {
                return Err(Error::Contract("adam moments sized for a different parameter vector".into()));
            }
            let (b1, b2) = (S::of(state.beta1), S::of(state.beta2));
            let t = state.steps as i32;
            let c1 = S::one() - S::of(state.beta1.powi(t));
            let c2 = S::one() - S::of(state.beta2.powi(t));
            let lr = S::of(state.learning_rate);
            let eps = S::of(state.epsilon);
            let skip = state.learning_rate == 0.0;
            let moments = state.first_moment.iter_mut().zip(state.second_moment.iter_mut());
            for ((&g, p), (m, v)) in gradient.iter().zip(params.flat.iter_mut()).zip(moments) {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                if !skip {
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params(values: &[f64]) -> ModelParams<f64> {
        // any config works; only the first entries are inspected
        let cfg = ModelConfig { vocab_size: 5, num_labels: 1, d_model: 1, num_layers: 0, num_heads: 1, d_ffn: 1, max_seq_len: 4 };
        let mut p = ModelParams::zeros(&cfg).unwrap();
        p.flat[..values.len()].copy_from_slice(values);
        p
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = params(&[0.3, -1.0, 2.0]);
        let before = p.clone();
        let g: Vec<f64> = (0..p.len()).map(|i| i as f64 - 2.0).collect();
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut s = OptState::new(kind, 0.0, p.len());
            step(&mut p, &mut s, &g).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn sgd_unit_rate_subtracts_gradient() {
        let mut p = params(&[1.0, 2.0, 3.0]);
        let g: Vec<f64> = (0..p.len()).map(|i| 0.5 * i as f64).collect();
        let expected: Vec<f64> = p.flat.iter().zip(&g).map(|(a, b)| a - b).collect();
        step(&mut p, &mut OptState::sgd(1.0), &g).unwrap();
        assert_eq!(p.flat, expected);
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let mut p = params(&[1.0, -2.0, 0.5]);
        let mut s = OptState::adam(0.1, p.len());
        let grads = [[0.2, -0.4, 1.0], [0.1, 0.3, -0.5]];
        // reference: scalar Adam written out per coordinate
        let mut reference = [1.0f64, -2.0, 0.5];
        let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
        for (t, g3) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            for i in 0..3 {
                m[i] = 0.9 * m[i] + 0.1 * g3[i];
                v[i] = 0.999 * v[i] + 0.001 * g3[i] * g3[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                reference[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
            let mut g = vec![0.0; p.len()];
            g[..3].copy_from_slice(g3);
            step(&mut p, &mut s, &g).unwrap();
        }
        for (i, (got, want)) in p.flat.iter().zip(&reference).enumerate() {
            assert!((got - want).abs() < 1e-12, "{i}");
        }
    }

    #[test]
    fn gradient_length_mismatch() {
        let mut p = params(&[1.0]);
        assert!(step(&mut p, &mut OptState::sgd(1.0), &[1.0]).is_err());
    }
}
