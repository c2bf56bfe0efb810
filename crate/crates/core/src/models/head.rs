//! Classification heads appended to a pretrained trunk.
//!
//! Three variants: a bare linear layer, layer-norm followed by linear, and
//! the compound head `linear -> batch norm -> ReLU -> linear -> batch norm`.

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

use super::{linear, ones_param, xavier_uniform, zeros_param, ModelError};

/// Default hidden width of the compound head's inner linear layer.
pub const COMPOUND_HEAD_HIDDEN_DEFAULT: usize = 50;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Single linear layer.
    Linear,
    /// Layer normalization followed by a linear layer.
    NormLinear,
    /// linear -> batch norm -> ReLU -> linear -> batch norm.
    Compound,
}

/// 1-D batch normalization over `[batch, features]` with running statistics
/// (momentum 0.1). Train mode normalizes by batch statistics; eval mode uses
/// the stored running values.
pub struct BatchNorm1d<F: Scalar> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    /// Non-trainable buffers.
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    features: usize,
}

impl<F: Scalar> BatchNorm1d<F> {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: ones_param(&[features]),
            beta: zeros_param(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::ones(&[features]),
            features,
        }
    }

    pub fn forward(&self, x: &Tensor<F>, train: bool) -> Result<Tensor<F>, ModelError> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.features {
            return Err(ModelError::DimensionMismatch(format!(
                "batch norm expects [batch, {}], got {shape:?}",
                self.features
            )));
        }
        let eps = Tensor::full(&[1, self.features], F::from_f64(BN_EPS));
        let normalized = if train {
            let mean = x.mean(Some(0), true)?;
            let centered = x.sub(&mean)?;
            let var = centered.mul(&centered)?.mean(Some(0), true)?;
            self.update_running(&mean.to_vec(), &var.to_vec());
            // rsqrt via exp(-0.5 ln(var + eps)); var + eps > 0 always.
            let inv_std = var.add(&eps)?.log().scale(F::from_f64(-0.5)).exp();
            centered.mul(&inv_std)?
        } else {
            let mean = self.running_mean.reshape(&[1, self.features])?;
            let var = self.running_var.reshape(&[1, self.features])?;
            let inv_std = var.add(&eps)?.log().scale(F::from_f64(-0.5)).exp();
            x.sub(&mean)?.mul(&inv_std)?
        };
        Ok(normalized.mul(&self.gamma)?.add(&self.beta)?)
    }

    fn update_running(&self, batch_mean: &[F], batch_var: &[F]) {
        let m = F::from_f64(BN_MOMENTUM);
        let keep = F::one() - m;
        let mut rm = self.running_mean.values_mut();
        let mut rv = self.running_var.values_mut();
        for i in 0..self.features {
            rm[i] = keep * rm[i] + m * batch_mean[i];
            rv[i] = keep * rv[i] + m * batch_var[i];
        }
    }

    fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<F>)> {
        vec![
            (format!("{prefix}.gamma"), self.gamma.clone()),
            (format!("{prefix}.beta"), self.beta.clone()),
        ]
    }

    fn buffers(&self, prefix: &str) -> Vec<(String, Tensor<F>)> {
        vec![
            (format!("{prefix}.running_mean"), self.running_mean.clone()),
            (format!("{prefix}.running_var"), self.running_var.clone()),
        ]
    }
}

enum HeadLayers<F: Scalar> {
    Linear {
        w: Tensor<F>,
        b: Tensor<F>,
    },
    NormLinear {
        ln_gamma: Tensor<F>,
        ln_beta: Tensor<F>,
        w: Tensor<F>,
        b: Tensor<F>,
    },
    Compound {
        w1: Tensor<F>,
        b1: Tensor<F>,
        bn1: BatchNorm1d<F>,
        w2: Tensor<F>,
        b2: Tensor<F>,
        bn2: BatchNorm1d<F>,
    },
}

pub struct ClassifierHead<F: Scalar> {
    pub kind: HeadKind,
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden_dim: usize,
    layers: HeadLayers<F>,
}

impl<F: Scalar> ClassifierHead<F> {
    pub fn new(
        kind: HeadKind,
        input_dim: usize,
        num_classes: usize,
        hidden_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self, ModelError> {
        if input_dim == 0 || num_classes == 0 || (kind == HeadKind::Compound && hidden_dim == 0) {
            return Err(ModelError::InvalidConfig("head dimensions must be positive".into()));
        }
        let layers = match kind {
            HeadKind::Linear => HeadLayers::Linear {
                w: xavier_uniform(&[num_classes, input_dim], rng),
                b: zeros_param(&[num_classes]),
            },
            HeadKind::NormLinear => HeadLayers::NormLinear {
                ln_gamma: ones_param(&[input_dim]),
                ln_beta: zeros_param(&[input_dim]),
                w: xavier_uniform(&[num_classes, input_dim], rng),
                b: zeros_param(&[num_classes]),
            },
            HeadKind::Compound => HeadLayers::Compound {
                w1: xavier_uniform(&[hidden_dim, input_dim], rng),
                b1: zeros_param(&[hidden_dim]),
                bn1: BatchNorm1d::new(hidden_dim),
                w2: xavier_uniform(&[num_classes, hidden_dim], rng),
                b2: zeros_param(&[num_classes]),
                bn2: BatchNorm1d::new(num_classes),
            },
        };
        Ok(Self {
            kind,
            input_dim,
            num_classes,
            hidden_dim,
            layers,
        })
    }

    /// `[batch, input_dim] -> [batch, num_classes]`.
    pub fn forward(&self, x: &Tensor<F>, train: bool) -> Result<Tensor<F>, ModelError> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(ModelError::DimensionMismatch(format!(
                "head expects [batch, {}], got {shape:?}",
                self.input_dim
            )));
        }
        match &self.layers {
            HeadLayers::Linear { w, b } => Ok(linear(x, w, b)?),
            HeadLayers::NormLinear { ln_gamma, ln_beta, w, b } => {
                let normed = x.layer_norm(ln_gamma, ln_beta, 1e-5)?;
                Ok(linear(&normed, w, b)?)
            }
            HeadLayers::Compound { w1, b1, bn1, w2, b2, bn2 } => {
                let h = linear(x, w1, b1)?;
                let h = bn1.forward(&h, train)?.relu();
                let out = linear(&h, w2, b2)?;
                bn2.forward(&out, train)
            }
        }
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<F>)> {
        match &self.layers {
            HeadLayers::Linear { w, b } => vec![
                (format!("{prefix}.weight"), w.clone()),
                (format!("{prefix}.bias"), b.clone()),
            ],
            HeadLayers::NormLinear { ln_gamma, ln_beta, w, b } => vec![
                (format!("{prefix}.ln.gamma"), ln_gamma.clone()),
                (format!("{prefix}.ln.beta"), ln_beta.clone()),
                (format!("{prefix}.weight"), w.clone()),
                (format!("{prefix}.bias"), b.clone()),
            ],
            HeadLayers::Compound { w1, b1, bn1, w2, b2, bn2 } => {
                let mut params = vec![
                    (format!("{prefix}.inner.weight"), w1.clone()),
                    (format!("{prefix}.inner.bias"), b1.clone()),
                ];
                params.extend(bn1.parameters(&format!("{prefix}.bn1")));
                params.push((format!("{prefix}.outer.weight"), w2.clone()));
                params.push((format!("{prefix}.outer.bias"), b2.clone()));
                params.extend(bn2.parameters(&format!("{prefix}.bn2")));
                params
            }
        }
    }

    /// Parameters plus batch-norm running statistics.
    pub fn named_arrays(&self, prefix: &str) -> Vec<(String, Tensor<F>)> {
        let mut arrays = self.parameters(prefix);
        if let HeadLayers::Compound { bn1, bn2, .. } = &self.layers {
            arrays.extend(bn1.buffers(&format!("{prefix}.bn1")));
            arrays.extend(bn2.buffers(&format!("{prefix}.bn2")));
        }
        arrays
    }

    /// (linear stages, batch-norm stages, relu stages) — structure check.
    pub fn stage_counts(&self) -> (usize, usize, usize) {
        match self.kind {
            HeadKind::Linear => (1, 0, 0),
            HeadKind::NormLinear => (1, 0, 0),
            HeadKind::Compound => (2, 2, 1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_head_output_shape() {
        let mut rng = RngStream::new(4);
        let head = ClassifierHead::<f64>::new(HeadKind::Linear, 410, 2, 0, &mut rng).unwrap();
        let x = Tensor::ones(&[3, 410]);
        let out = head.forward(&x, false).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
    }

    #[test]
    fn compound_head_structure() {
        let mut rng = RngStream::new(4);
        let head = ClassifierHead::<f64>::new(HeadKind::Compound, 16, 2, 8, &mut rng).unwrap();
        assert_eq!(head.stage_counts(), (2, 2, 1));
        let x = Tensor::from_vec(vec![4, 16], (0..64).map(|i| i as f64 * 0.1).collect()).unwrap();
        let out = head.forward(&x, true).unwrap();
        assert_eq!(out.shape(), &[4, 2]);
    }

    #[test]
    fn batch_norm_normalizes_in_train_mode() {
        let bn = BatchNorm1d::<f64>::new(2);
        let x = Tensor::from_vec(vec![4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap();
        let y = bn.forward(&x, true).unwrap().to_vec();
        for c in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| y[r * 2 + c]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 4.0;
            let var: f64 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let bn = BatchNorm1d::<f64>::new(1);
        let x = Tensor::from_vec(vec![2, 1], vec![5.0, 7.0]).unwrap();
        for _ in 0..200 {
            bn.forward(&x, true).unwrap();
        }
        // Running mean converges toward 6, running var toward 1.
        let y = bn.forward(&Tensor::from_vec(vec![1, 1], vec![6.0]).unwrap(), false).unwrap();
        assert!(y.item().abs() < 0.1, "eval output {}", y.item());
    }

    #[test]
    fn head_param_count_matches_formula() {
        let mut rng = RngStream::new(4);
        for (kind, hidden) in [(HeadKind::Linear, 0), (HeadKind::NormLinear, 0), (HeadKind::Compound, 50)] {
            let head = ClassifierHead::<f64>::new(kind, 410, 2, hidden, &mut rng).unwrap();
            let total: usize = head.parameters("h").iter().map(|(_, t)| t.numel()).sum();
            assert_eq!(total, super::super::head_param_count(kind, 410, 2, hidden), "{kind:?}");
        }
        // Single linear layer on width 410 with 2 classes: 410*2 + 2 = 822.
        assert_eq!(super::super::head_param_count(HeadKind::Linear, 410, 2, 0), 822);
    }
}
