//! Siamese recurrent network: weight-tied twin encoders joined by an energy
//! function over the element-wise distance of their representations.
//!
//! Each twin embeds a sequence, runs it through an LSTM, and projects the
//! final hidden state through a ReLU feed-forward layer. The pair probability
//! is `sigmoid(w_out . |o1 - o2| + b_out)`. Weight tying is structural: both
//! twins are the same parameter tensors.

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

use super::{linear, pool_last, xavier_uniform, zeros_param, LstmLayer, ModelError, TokenBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiameseConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    /// Width of the twin output representation.
    pub output_dim: usize,
}

impl SiameseConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embedding_dim: 300,
            hidden_dim: 512,
            output_dim: 512,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("output_dim", self.output_dim),
        ] {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

pub struct SiameseNet<F: Scalar> {
    pub config: SiameseConfig,
    pub embedding: Tensor<F>,
    pub encoder: LstmLayer<F>,
    pub ff_w: Tensor<F>,
    pub ff_b: Tensor<F>,
    pub out_w: Tensor<F>,
    pub out_b: Tensor<F>,
}

impl<F: Scalar> SiameseNet<F> {
    pub fn new(config: SiameseConfig, rng: &mut RngStream) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self {
            embedding: xavier_uniform(&[config.vocab_size, config.embedding_dim], rng),
            encoder: LstmLayer::new(config.embedding_dim, config.hidden_dim, rng),
            ff_w: xavier_uniform(&[config.output_dim, config.hidden_dim], rng),
            ff_b: zeros_param(&[config.output_dim]),
            out_w: xavier_uniform(&[1, config.output_dim], rng),
            out_b: zeros_param(&[1]),
            config,
        })
    }

    /// One twin: embedding -> LSTM -> final state -> ReLU feed-forward.
    /// Returns `[batch, output_dim]`.
    pub fn twin(&self, batch: &TokenBatch) -> Result<Tensor<F>, ModelError> {
        if batch.lens.contains(&0) {
            return Err(ModelError::EmptySequence);
        }
        let embedded = self
            .embedding
            .embedding_lookup(&batch.ids, &batch.ids_shape())?;
        let states = self.encoder.forward(&embedded, None)?;
        let last = pool_last(&states, &batch.lens)?;
        Ok(linear(&last, &self.ff_w, &self.ff_b)?.relu())
    }

    /// Energy head over twin outputs: `sigmoid(w_out |o1 - o2| + b_out)`.
    /// Returns `[batch, 1]` probabilities in (0, 1).
    pub fn combine(&self, o1: &Tensor<F>, o2: &Tensor<F>) -> Result<Tensor<F>, ModelError> {
        let distance = o1.sub(o2)?.abs();
        Ok(linear(&distance, &self.out_w, &self.out_b)?.sigmoid())
    }

    /// Full pair forward: same-class probability per row.
    pub fn forward_pair(&self, a: &TokenBatch, b: &TokenBatch) -> Result<Tensor<F>, ModelError> {
        let o1 = self.twin(a)?;
        let o2 = self.twin(b)?;
        self.combine(&o1, &o2)
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<F>)> {
        let mut params = vec![("embedding".to_string(), self.embedding.clone())];
        params.extend(self.encoder.parameters("encoder"));
        params.extend([
            ("ff.weight".to_string(), self.ff_w.clone()),
            ("ff.bias".to_string(), self.ff_b.clone()),
            ("out.weight".to_string(), self.out_w.clone()),
            ("out.bias".to_string(), self.out_b.clone()),
        ]);
        params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_net() -> SiameseNet<f64> {
        let mut rng = RngStream::new(11);
        let config = SiameseConfig {
            vocab_size: 10,
            embedding_dim: 4,
            hidden_dim: 5,
            output_dim: 3,
        };
        SiameseNet::new(config, &mut rng).unwrap()
    }

    fn batch(seqs: &[&[u32]]) -> TokenBatch {
        let seqs: Vec<Vec<u32>> = seqs.iter().map(|s| s.to_vec()).collect();
        TokenBatch::from_sequences(&seqs, 0).unwrap()
    }

    #[test]
    fn identical_inputs_with_zero_bias_give_half() {
        let net = toy_net();
        let a = batch(&[&[1, 2, 3]]);
        let p = net.forward_pair(&a, &a).unwrap();
        assert!((p.item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pair_probability_is_symmetric() {
        let net = toy_net();
        let a = batch(&[&[1, 2, 3]]);
        let b = batch(&[&[4, 5]]);
        let p_ab = net.forward_pair(&a, &b).unwrap().item();
        let p_ba = net.forward_pair(&b, &a).unwrap().item();
        assert!((p_ab - p_ba).abs() < 1e-12);
    }

    #[test]
    fn hand_set_energy_head_matches_closed_form() {
        // o1 = 0.3, o2 = 0.1, w_out = 2, b_out = 0 -> p = sigmoid(0.4)
        let mut net = toy_net();
        net.out_w = Tensor::param(vec![1, 1], vec![2.0]).unwrap();
        net.out_b = Tensor::param(vec![1], vec![0.0]).unwrap();
        let o1 = Tensor::from_vec(vec![1, 1], vec![0.3]).unwrap();
        let o2 = Tensor::from_vec(vec![1, 1], vec![0.1]).unwrap();
        let p = net.combine(&o1, &o2).unwrap().item();
        let expected = 1.0 / (1.0 + (-0.4f64).exp());
        assert!((p - expected).abs() < 1e-12);
        assert!((p - 0.5987).abs() < 1e-4);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        assert!(matches!(
            TokenBatch::from_sequences(&[vec![]], 0),
            Err(ModelError::EmptySequence)
        ));
    }

    #[test]
    fn parameter_count_matches_formula() {
        let net = toy_net();
        let total: usize = net.parameters().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(total, super::super::siamese_param_count(&net.config));
    }
}
