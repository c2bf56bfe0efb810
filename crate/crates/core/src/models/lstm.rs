//! A single LSTM layer unrolled over time on the autodiff graph.

use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

use super::{xavier_uniform, zeros_param, ModelError};

/// Gate layout in the stacked weight matrices: input, forget, cell, output.
pub struct LstmLayer<F: Scalar> {
    /// `[4 * hidden, input]`
    pub w_ih: Tensor<F>,
    /// `[4 * hidden, hidden]`
    pub w_hh: Tensor<F>,
    /// `[4 * hidden]`
    pub bias: Tensor<F>,
    input_dim: usize,
    hidden_dim: usize,
}

impl<F: Scalar> LstmLayer<F> {
    pub fn new(input_dim: usize, hidden_dim: usize, rng: &mut RngStream) -> Self {
        Self {
            w_ih: xavier_uniform(&[4 * hidden_dim, input_dim], rng),
            w_hh: xavier_uniform(&[4 * hidden_dim, hidden_dim], rng),
            bias: zeros_param(&[4 * hidden_dim]),
            input_dim,
            hidden_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Run over `[batch, seq, input]`, returning hidden states
    /// `[batch, seq, hidden]`. `recurrent_weights` substitutes for `w_hh`
    /// when weight drop is active (one mask for the whole pass).
    pub fn forward(
        &self,
        inputs: &Tensor<F>,
        recurrent_weights: Option<&Tensor<F>>,
    ) -> Result<Tensor<F>, ModelError> {
        let shape = inputs.shape();
        if shape.len() != 3 || shape[2] != self.input_dim {
            return Err(ModelError::DimensionMismatch(format!(
                "lstm expects [batch, seq, {}], got {shape:?}",
                self.input_dim
            )));
        }
        let (batch, seq_len) = (shape[0], shape[1]);
        let h_dim = self.hidden_dim;

        let w_hh = recurrent_weights.unwrap_or(&self.w_hh);
        // Transposed once and shared by every timestep's matmul node.
        let w_ih_t = self.w_ih.transpose(0, 1)?;
        let w_hh_t = w_hh.transpose(0, 1)?;

        let mut h = Tensor::zeros(&[batch, h_dim]);
        let mut c = Tensor::zeros(&[batch, h_dim]);
        let mut states = Vec::with_capacity(seq_len);
        for t in 0..seq_len {
            let x_t = inputs.slice(1, t, t + 1)?.reshape(&[batch, self.input_dim])?;
            let gates = x_t
                .matmul(&w_ih_t)?
                .add(&h.matmul(&w_hh_t)?)?
                .add(&self.bias)?;
            let i = gates.slice(1, 0, h_dim)?.sigmoid();
            let f = gates.slice(1, h_dim, 2 * h_dim)?.sigmoid();
            let g = gates.slice(1, 2 * h_dim, 3 * h_dim)?.tanh();
            let o = gates.slice(1, 3 * h_dim, 4 * h_dim)?.sigmoid();
            c = f.mul(&c)?.add(&i.mul(&g)?)?;
            h = o.mul(&c.tanh())?;
            states.push(h.reshape(&[batch, 1, h_dim])?);
        }
        Ok(Tensor::concat(&states, 1)?)
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<F>)> {
        vec![
            (format!("{prefix}.w_ih"), self.w_ih.clone()),
            (format!("{prefix}.w_hh"), self.w_hh.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shape_is_batch_seq_hidden() {
        let mut rng = RngStream::new(3);
        let layer = LstmLayer::<f64>::new(4, 6, &mut rng);
        let x = Tensor::ones(&[2, 5, 4]);
        let h = layer.forward(&x, None).unwrap();
        assert_eq!(h.shape(), &[2, 5, 6]);
    }

    #[test]
    fn recurrence_is_causal() {
        let mut rng = RngStream::new(3);
        let layer = LstmLayer::<f64>::new(2, 3, &mut rng);
        let mut vals = vec![0.5; 2 * 4 * 2];
        let x1 = Tensor::from_vec(vec![2, 4, 2], vals.clone()).unwrap();
        // Perturb the last timestep only.
        vals[2 * 4 * 2 - 1] = 9.0;
        let x2 = Tensor::from_vec(vec![2, 4, 2], vals).unwrap();
        let h1 = layer.forward(&x1, None).unwrap();
        let h2 = layer.forward(&x2, None).unwrap();
        let (v1, v2) = (h1.to_vec(), h2.to_vec());
        // States for t < 3 must be bit-identical.
        for r in 0..2 {
            for t in 0..3 {
                for k in 0..3 {
                    let idx = (r * 4 + t) * 3 + k;
                    assert_eq!(v1[idx], v2[idx]);
                }
            }
        }
    }
}
