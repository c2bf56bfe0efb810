//! Decoder-only transformer language model.
//!
//! Pre-norm residual blocks, multi-head self-attention with an additive
//! causal mask, a two-linear-layer position-wise feed-forward, learned
//! position embeddings, and an output projection tied to the token
//! embedding. Attention can run bidirectionally (with key-side padding
//! masks) for masked-LM pretraining. An optional head mask zeroes the
//! output of selected heads before the output projection.

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

use super::{linear, normal_param, ones_param, zeros_param, ModelError, TokenBatch};

const ATTN_MASK_VALUE: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerLmConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub ffn_inner_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub init_std: f64,
    /// Autoregressive attention when true; bidirectional (masked-LM
    /// pretraining) when false.
    pub causal: bool,
    /// Per-head keep flags; masked heads contribute zeros to the output
    /// projection. `None` means all heads active.
    pub head_mask: Option<Vec<bool>>,
}

impl TransformerLmConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embedding_dim: 410,
            ffn_inner_dim: 2100,
            num_heads: 10,
            num_blocks: 16,
            max_seq_len: 256,
            dropout: 0.1,
            init_std: 0.02,
            causal: true,
            head_mask: None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embedding_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0
            || self.embedding_dim == 0
            || self.ffn_inner_dim == 0
            || self.num_heads == 0
            || self.num_blocks == 0
            || self.max_seq_len == 0
        {
            return Err(ModelError::InvalidConfig("all dimensions must be positive".into()));
        }
        if !self.embedding_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "embedding_dim {} not divisible by num_heads {}",
                self.embedding_dim, self.num_heads
            )));
        }
        if let Some(mask) = &self.head_mask {
            if mask.len() != self.num_heads {
                return Err(ModelError::InvalidConfig(format!(
                    "head_mask length {} != num_heads {}",
                    mask.len(),
                    self.num_heads
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

pub struct TransformerBlock<F: Scalar> {
    pub ln1_gamma: Tensor<F>,
    pub ln1_beta: Tensor<F>,
    pub w_q: Tensor<F>,
    pub b_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub b_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub b_v: Tensor<F>,
    pub w_o: Tensor<F>,
    pub b_o: Tensor<F>,
    pub ln2_gamma: Tensor<F>,
    pub ln2_beta: Tensor<F>,
    pub ffn_w1: Tensor<F>,
    pub ffn_b1: Tensor<F>,
    pub ffn_w2: Tensor<F>,
    pub ffn_b2: Tensor<F>,
}

impl<F: Scalar> TransformerBlock<F> {
    fn new(config: &TransformerLmConfig, rng: &mut RngStream) -> Self {
        let d = config.embedding_dim;
        let f = config.ffn_inner_dim;
        let std = config.init_std;
        Self {
            ln1_gamma: ones_param(&[d]),
            ln1_beta: zeros_param(&[d]),
            w_q: normal_param(&[d, d], std, rng),
            b_q: zeros_param(&[d]),
            w_k: normal_param(&[d, d], std, rng),
            b_k: zeros_param(&[d]),
            w_v: normal_param(&[d, d], std, rng),
            b_v: zeros_param(&[d]),
            w_o: normal_param(&[d, d], std, rng),
            b_o: zeros_param(&[d]),
            ln2_gamma: ones_param(&[d]),
            ln2_beta: zeros_param(&[d]),
            ffn_w1: normal_param(&[f, d], std, rng),
            ffn_b1: zeros_param(&[f]),
            ffn_w2: normal_param(&[d, f], std, rng),
            ffn_b2: zeros_param(&[d]),
        }
    }

    /// One pre-norm block. Returns the new stream and, when `trace` is set,
    /// the per-head context tensor `[batch, heads, seq, head_dim]` captured
    /// after head masking and before the output projection.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        x: &Tensor<F>,
        attn_mask: &Tensor<F>,
        head_mask: Option<&Tensor<F>>,
        config: &TransformerLmConfig,
        train: bool,
        rng: &mut RngStream,
        trace: bool,
    ) -> Result<(Tensor<F>, Option<Tensor<F>>), ModelError> {
        let shape = x.shape();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let heads = config.num_heads;
        let hd = config.head_dim();

        let normed = x.layer_norm(&self.ln1_gamma, &self.ln1_beta, LN_EPS)?;
        let split = |y: Tensor<F>| -> Result<Tensor<F>, ModelError> {
            Ok(y.reshape(&[b, t, heads, hd])?.transpose(1, 2)?)
        };
        let q = split(linear(&normed, &self.w_q, &self.b_q)?)?;
        let k = split(linear(&normed, &self.w_k, &self.b_k)?)?;
        let v = split(linear(&normed, &self.w_v, &self.b_v)?)?;

        let scores = q
            .matmul(&k.transpose(2, 3)?)?
            .scale(F::from_f64(1.0 / (hd as f64).sqrt()))
            .add(attn_mask)?;
        let weights = scores.softmax(3)?;
        let mut context = weights.matmul(&v)?;
        if let Some(mask) = head_mask {
            context = context.mul(mask)?;
        }
        let traced = trace.then(|| context.clone());

        let merged = context.transpose(1, 2)?.reshape(&[b, t, d])?;
        let mut attn_out = linear(&merged, &self.w_o, &self.b_o)?;
        if train {
            attn_out = attn_out.dropout(config.dropout, rng)?;
        }
        let x = x.add(&attn_out)?;

        let normed = x.layer_norm(&self.ln2_gamma, &self.ln2_beta, LN_EPS)?;
        let mut inner = linear(&normed, &self.ffn_w1, &self.ffn_b1)?.relu();
        if train {
            inner = inner.dropout(config.dropout, rng)?;
        }
        let mut ffn_out = linear(&inner, &self.ffn_w2, &self.ffn_b2)?;
        if train {
            ffn_out = ffn_out.dropout(config.dropout, rng)?;
        }
        Ok((x.add(&ffn_out)?, traced))
    }

    fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<F>)> {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.q.weight", &self.w_q),
            ("attn.q.bias", &self.b_q),
            ("attn.k.weight", &self.w_k),
            ("attn.k.bias", &self.b_k),
            ("attn.v.weight", &self.w_v),
            ("attn.v.bias", &self.b_v),
            ("attn.out.weight", &self.w_o),
            ("attn.out.bias", &self.b_o),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("ffn.w1.weight", &self.ffn_w1),
            ("ffn.w1.bias", &self.ffn_b1),
            ("ffn.w2.weight", &self.ffn_w2),
            ("ffn.w2.bias", &self.ffn_b2),
        ]
        .into_iter()
        .map(|(name, t)| (format!("{prefix}.{name}"), t.clone()))
        .collect()
    }
}

pub struct TransformerLm<F: Scalar> {
    pub config: TransformerLmConfig,
    pub token_embedding: Tensor<F>,
    pub position_embedding: Tensor<F>,
    pub blocks: Vec<TransformerBlock<F>>,
    pub final_ln_gamma: Tensor<F>,
    pub final_ln_beta: Tensor<F>,
}

impl<F: Scalar> TransformerLm<F> {
    pub fn new(config: TransformerLmConfig, rng: &mut RngStream) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.embedding_dim;
        Ok(Self {
            token_embedding: normal_param(&[config.vocab_size, d], config.init_std, rng),
            position_embedding: normal_param(&[config.max_seq_len, d], config.init_std, rng),
            blocks: (0..config.num_blocks).map(|_| TransformerBlock::new(&config, rng)).collect(),
            final_ln_gamma: ones_param(&[d]),
            final_ln_beta: zeros_param(&[d]),
            config,
        })
    }

    /// Additive attention mask: causal upper-triangle in causal mode,
    /// key-side padding in bidirectional mode.
    fn attention_mask(&self, batch: &TokenBatch) -> Result<Tensor<F>, ModelError> {
        let t = batch.seq_len;
        let neg = F::from_f64(ATTN_MASK_VALUE);
        if self.config.causal {
            let mut vals = vec![F::zero(); t * t];
            for i in 0..t {
                for j in (i + 1)..t {
                    vals[i * t + j] = neg;
                }
            }
            Ok(Tensor::from_vec(vec![t, t], vals)?)
        } else {
            let b = batch.batch_size;
            let mut vals = vec![F::zero(); b * t];
            for (r, &len) in batch.lens.iter().enumerate() {
                for j in len..t {
                    vals[r * t + j] = neg;
                }
            }
            Ok(Tensor::from_vec(vec![b, 1, 1, t], vals)?)
        }
    }

    fn head_mask_tensor(&self) -> Result<Option<Tensor<F>>, ModelError> {
        match &self.config.head_mask {
            None => Ok(None),
            Some(flags) => {
                let vals: Vec<F> = flags
                    .iter()
                    .map(|&keep| if keep { F::one() } else { F::zero() })
                    .collect();
                Ok(Some(Tensor::from_vec(vec![self.config.num_heads, 1, 1], vals)?))
            }
        }
    }

    fn run_blocks(
        &self,
        batch: &TokenBatch,
        train: bool,
        rng: &mut RngStream,
        trace: bool,
    ) -> Result<(Tensor<F>, Vec<Tensor<F>>), ModelError> {
        if batch.seq_len > self.config.max_seq_len {
            return Err(ModelError::OverlengthSequence {
                len: batch.seq_len,
                max: self.config.max_seq_len,
            });
        }
        let (b, t) = (batch.batch_size, batch.seq_len);
        let tokens = self.token_embedding.embedding_lookup(&batch.ids, &batch.ids_shape())?;
        let positions = self.position_embedding.slice(0, 0, t)?;
        let mut x = tokens.add(&positions)?;
        if train {
            x = x.dropout(self.config.dropout, rng)?;
        }
        debug_assert_eq!(x.shape(), &[b, t, self.config.embedding_dim]);

        let attn_mask = self.attention_mask(batch)?;
        let head_mask = self.head_mask_tensor()?;
        let mut traces = Vec::new();
        for block in &self.blocks {
            let (next, traced) =
                block.forward(&x, &attn_mask, head_mask.as_ref(), &self.config, train, rng, trace)?;
            x = next;
            if let Some(tr) = traced {
                traces.push(tr);
            }
        }
        let hidden = x.layer_norm(&self.final_ln_gamma, &self.final_ln_beta, LN_EPS)?;
        Ok((hidden, traces))
    }

    /// Final-layer hidden states `[batch, seq, dim]`.
    pub fn forward_hidden(
        &self,
        batch: &TokenBatch,
        train: bool,
        rng: &mut RngStream,
    ) -> Result<Tensor<F>, ModelError> {
        Ok(self.run_blocks(batch, train, rng, false)?.0)
    }

    /// Hidden states plus each block's per-head context (after head masking,
    /// before the output projection), for ablation inspection.
    pub fn forward_with_attention_trace(
        &self,
        batch: &TokenBatch,
    ) -> Result<(Tensor<F>, Vec<Tensor<F>>), ModelError> {
        let mut rng = RngStream::new(0);
        self.run_blocks(batch, false, &mut rng, true)
    }

    /// Logits over the vocabulary via the tied embedding, `[batch, seq, vocab]`.
    pub fn project_vocab(&self, hidden: &Tensor<F>) -> Result<Tensor<F>, ModelError> {
        Ok(hidden.matmul(&self.token_embedding.transpose(0, 1)?)?)
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
        let mut params = vec![
            ("token_embedding".to_string(), self.token_embedding.clone()),
            ("position_embedding".to_string(), self.position_embedding.clone()),
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            params.extend(block.parameters(&format!("block.{i}")));
        }
        params.push(("final_ln.gamma".to_string(), self.final_ln_gamma.clone()));
        params.push(("final_ln.beta".to_string(), self.final_ln_beta.clone()));
        params
    }

    pub fn param_groups(&self) -> Vec<(String, Vec<Tensor<F>>)> {
        let mut groups = vec![(
            "embeddings".to_string(),
            vec![self.token_embedding.clone(), self.position_embedding.clone()],
        )];
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            let mut tensors: Vec<Tensor<F>> =
                block.parameters("g").into_iter().map(|(_, t)| t).collect();
            if i == last {
                tensors.push(self.final_ln_gamma.clone());
                tensors.push(self.final_ln_beta.clone());
            }
            groups.push((format!("block.{i}"), tensors));
        }
        groups
    }
}
