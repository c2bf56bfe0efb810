//! Stacked LSTM language model with the regularization set used for staged
//! finetuning: embedding-row dropout, input/inter-layer/output dropout, and
//! weight drop on the recurrent matrices (one mask per forward pass).

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

use super::{xavier_uniform, zeros_param, LstmLayer, ModelError, TokenBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutRates {
    pub embedding: f64,
    pub input: f64,
    pub hidden: f64,
    pub output: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        Self {
            embedding: 0.1,
            input: 0.3,
            hidden: 0.3,
            output: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLmConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub dropouts: DropoutRates,
    pub recurrent_weight_drop: f64,
    pub tie_embeddings: bool,
}

impl LstmLmConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            layers: 3,
            embedding_dim: 400,
            hidden_dim: 1150,
            dropouts: DropoutRates::default(),
            recurrent_weight_drop: 0.5,
            tie_embeddings: true,
        }
    }

    /// (input, hidden) widths per layer. With tied embeddings the last layer
    /// narrows back to the embedding width so the decoder can share the
    /// embedding matrix.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|i| {
                let input = if i == 0 { self.embedding_dim } else { self.hidden_dim };
                let hidden = if i + 1 == self.layers {
                    self.last_hidden_dim()
                } else {
                    self.hidden_dim
                };
                (input, hidden)
            })
            .collect()
    }

    pub fn last_hidden_dim(&self) -> usize {
        if self.tie_embeddings {
            self.embedding_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0 || self.layers == 0 || self.embedding_dim == 0 || self.hidden_dim == 0 {
            return Err(ModelError::InvalidConfig("all dimensions must be positive".into()));
        }
        let rates = [
            self.dropouts.embedding,
            self.dropouts.input,
            self.dropouts.hidden,
            self.dropouts.output,
            self.recurrent_weight_drop,
        ];
        if rates.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(ModelError::InvalidConfig("dropout rates must be in [0, 1)".into()));
        }
        Ok(())
    }
}

pub struct LstmLm<F: Scalar> {
    pub config: LstmLmConfig,
    pub embedding: Tensor<F>,
    pub layers: Vec<LstmLayer<F>>,
    /// `[vocab, last_hidden]`; absent when tied to the embedding.
    pub decoder_w: Option<Tensor<F>>,
    pub decoder_b: Tensor<F>,
}

impl<F: Scalar> LstmLm<F> {
    pub fn new(config: LstmLmConfig, rng: &mut RngStream) -> Result<Self, ModelError> {
        config.validate()?;
        let embedding = xavier_uniform(&[config.vocab_size, config.embedding_dim], rng);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(input, hidden)| LstmLayer::new(input, hidden, rng))
            .collect();
        let decoder_w = if config.tie_embeddings {
            None
        } else {
            Some(xavier_uniform(&[config.vocab_size, config.last_hidden_dim()], rng))
        };
        Ok(Self {
            embedding,
            layers,
            decoder_w,
            decoder_b: zeros_param(&[config.vocab_size]),
            config,
        })
    }

    pub fn output_width(&self) -> usize {
        self.config.last_hidden_dim()
    }

    /// Final-layer hidden states `[batch, seq, width]`. In train mode the
    /// configured dropouts are live, driven by `rng`; eval is deterministic.
    pub fn forward_hidden(
        &self,
        batch: &TokenBatch,
        train: bool,
        rng: &mut RngStream,
    ) -> Result<Tensor<F>, ModelError> {
        let rates = self.config.dropouts;
        let table = if train && rates.embedding > 0.0 {
            // Row-level embedding dropout: whole words vanish together.
            let keep = F::from_f64(1.0 / (1.0 - rates.embedding));
            let mask: Vec<F> = (0..self.config.vocab_size)
                .map(|_| if rng.bernoulli(rates.embedding) { F::zero() } else { keep })
                .collect();
            let mask = Tensor::from_vec(vec![self.config.vocab_size, 1], mask)?;
            self.embedding.mul(&mask)?
        } else {
            self.embedding.clone()
        };

        let mut x = table.embedding_lookup(&batch.ids, &batch.ids_shape())?;
        if train {
            x = x.dropout(rates.input, rng)?;
        }
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let recurrent = if train && self.config.recurrent_weight_drop > 0.0 {
                Some(layer.w_hh.dropout(self.config.recurrent_weight_drop, rng)?)
            } else {
                None
            };
            x = layer.forward(&x, recurrent.as_ref())?;
            if train && i < last {
                x = x.dropout(rates.hidden, rng)?;
            }
        }
        if train {
            x = x.dropout(rates.output, rng)?;
        }
        Ok(x)
    }

    /// Next-token logits `[batch, seq, vocab]` from hidden states.
    pub fn project_vocab(&self, hidden: &Tensor<F>) -> Result<Tensor<F>, ModelError> {
        let w = self.decoder_w.as_ref().unwrap_or(&self.embedding);
        Ok(hidden.matmul(&w.transpose(0, 1)?)?.add(&self.decoder_b)?)
    }

    pub fn forward(
        &self,
        batch: &TokenBatch,
        train: bool,
        rng: &mut RngStream,
    ) -> Result<Tensor<F>, ModelError> {
        let hidden = self.forward_hidden(batch, train, rng)?;
        self.project_vocab(&hidden)
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<F>)> {
        let mut params = vec![("embedding".to_string(), self.embedding.clone())];
        for (i, layer) in self.layers.iter().enumerate() {
            params.extend(layer.parameters(&format!("lstm.{i}")));
        }
        if let Some(w) = &self.decoder_w {
            params.push(("decoder.weight".to_string(), w.clone()));
        }
        params.push(("decoder.bias".to_string(), self.decoder_b.clone()));
        params
    }

    /// Groups ordered input-side first: embedding with the first layer, then
    /// each later layer, with the decoder bias attached to the last.
    pub fn param_groups(&self) -> Vec<(String, Vec<Tensor<F>>)> {
        let mut groups: Vec<(String, Vec<Tensor<F>>)> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut tensors: Vec<Tensor<F>> =
                layer.parameters("g").into_iter().map(|(_, t)| t).collect();
            if i == 0 {
                tensors.insert(0, self.embedding.clone());
            }
            if i + 1 == self.layers.len() {
                if let Some(w) = &self.decoder_w {
                    tensors.push(w.clone());
                }
                tensors.push(self.decoder_b.clone());
            }
            groups.push((format!("lstm.{i}"), tensors));
        }
        groups
    }
}
