//! Model architectures: siamese recurrent network, LSTM language model, and
//! decoder-only transformer, plus classification heads and the glue that
//! attaches a head to a pretrained trunk.

mod checkpoint;
mod head;
mod lstm;
mod lstm_lm;
mod siamese;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedArray, OptimizerSnapshot};
pub use head::{BatchNorm1d, ClassifierHead, HeadKind, COMPOUND_HEAD_HIDDEN_DEFAULT};
pub use lstm::LstmLayer;
pub use lstm_lm::{DropoutRates, LstmLm, LstmLmConfig};
pub use siamese::{SiameseConfig, SiameseNet};
pub use transformer::{TransformerLm, TransformerLmConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty input sequence")]
    EmptySequence,
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    OverlengthSequence { len: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint io on {path}: {source}")]
    CheckpointIo {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint does not match model: {0}")]
    ConfigMismatch(String),
}

/// A padded batch of token sequences, row-major `[batch, seq_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Real (unpadded) length of each row.
    pub lens: Vec<usize>,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[Vec<u32>], pad_id: u32) -> Result<Self, ModelError> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(ModelError::EmptySequence);
        }
        let seq_len = seqs.iter().map(Vec::len).max().unwrap();
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut lens = Vec::with_capacity(seqs.len());
        for seq in seqs {
            lens.push(seq.len());
            ids.extend(seq.iter().map(|&t| t as usize));
            ids.extend(std::iter::repeat_n(pad_id as usize, seq_len - seq.len()));
        }
        Ok(Self {
            ids,
            batch_size: seqs.len(),
            seq_len,
            lens,
        })
    }

    pub fn ids_shape(&self) -> [usize; 2] {
        [self.batch_size, self.seq_len]
    }
}

/// How a sequence of hidden states is reduced to one vector per example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Hidden state at the last real (non-pad) position.
    LastToken,
    /// Mean over real positions.
    Mean,
}

/// Select the hidden state at each row's last real position.
/// `hidden` is `[batch, seq, width]`.
pub(crate) fn pool_last<F: Scalar>(hidden: &Tensor<F>, lens: &[usize]) -> Result<Tensor<F>, ModelError> {
    let shape = hidden.shape();
    let (b, t) = (shape[0], shape[1]);
    let mut onehot = vec![F::zero(); b * t];
    for (r, &len) in lens.iter().enumerate() {
        onehot[r * t + len - 1] = F::one();
    }
    let sel = Tensor::from_vec(vec![b, t, 1], onehot)?;
    Ok(hidden.mul(&sel)?.sum(Some(1), false)?)
}

/// Mean of hidden states over each row's real positions.
pub(crate) fn pool_mean<F: Scalar>(hidden: &Tensor<F>, lens: &[usize]) -> Result<Tensor<F>, ModelError> {
    let shape = hidden.shape();
    let (b, t) = (shape[0], shape[1]);
    let mut weights = vec![F::zero(); b * t];
    for (r, &len) in lens.iter().enumerate() {
        let inv = F::from_f64(1.0 / len as f64);
        for c in 0..len {
            weights[r * t + c] = inv;
        }
    }
    let wts = Tensor::from_vec(vec![b, t, 1], weights)?;
    Ok(hidden.mul(&wts)?.sum(Some(1), false)?)
}

pub(crate) fn pool<F: Scalar>(
    hidden: &Tensor<F>,
    lens: &[usize],
    pooling: Pooling,
) -> Result<Tensor<F>, ModelError> {
    match pooling {
        Pooling::LastToken => pool_last(hidden, lens),
        Pooling::Mean => pool_mean(hidden, lens),
    }
}

/// `x @ w^T + b` with `w` stored `[out, in]`.
pub(crate) fn linear<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>, TensorError> {
    x.matmul(&w.transpose(0, 1)?)?.add(b)
}

pub(crate) fn xavier_uniform<F: Scalar>(shape: &[usize], rng: &mut RngStream) -> Tensor<F> {
    let fan_out = shape[0];
    let fan_in = shape[1..].iter().product::<usize>().max(1);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..crate::tensor::kernels::numel(shape))
        .map(|_| F::from_f64(rng.uniform(-bound, bound)))
        .collect();
    Tensor::param(shape.to_vec(), values).expect("shape/values consistent by construction")
}

pub(crate) fn normal_param<F: Scalar>(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor<F> {
    let values = (0..crate::tensor::kernels::numel(shape))
        .map(|_| F::from_f64(rng.normal(0.0, std)))
        .collect();
    Tensor::param(shape.to_vec(), values).expect("shape/values consistent by construction")
}

pub(crate) fn zeros_param<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    Tensor::param(shape.to_vec(), vec![F::zero(); crate::tensor::kernels::numel(shape)]).unwrap()
}

pub(crate) fn ones_param<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    Tensor::param(shape.to_vec(), vec![F::one(); crate::tensor::kernels::numel(shape)]).unwrap()
}

/// A language-model trunk a classifier head can be attached to.
pub enum BaseLm<F: Scalar> {
    Transformer(TransformerLm<F>),
    Lstm(LstmLm<F>),
}

impl<F: Scalar> BaseLm<F> {
    /// Width of the final hidden representation.
    pub fn hidden_width(&self) -> usize {
        match self {
            BaseLm::Transformer(m) => m.config.embedding_dim,
            BaseLm::Lstm(m) => m.output_width(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            BaseLm::Transformer(m) => m.config.vocab_size,
            BaseLm::Lstm(m) => m.config.vocab_size,
        }
    }

    pub fn max_seq_len(&self) -> Option<usize> {
        match self {
            BaseLm::Transformer(m) => Some(m.config.max_seq_len),
            BaseLm::Lstm(_) => None,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            BaseLm::Transformer(_) => "transformer_lm",
            BaseLm::Lstm(_) => "lstm_lm",
        }
    }

    /// Final-layer hidden states, `[batch, seq, width]`.
    pub fn forward_hidden(
        &self,
        batch: &TokenBatch,
        train: bool,
        rng: &mut RngStream,
    ) -> Result<Tensor<F>, ModelError> {
        match self {
            BaseLm::Transformer(m) => m.forward_hidden(batch, train, rng),
            BaseLm::Lstm(m) => m.forward_hidden(batch, train, rng),
        }
    }

    /// Next-token logits from hidden states, `[batch, seq, vocab]`.
    pub fn lm_logits(&self, hidden: &Tensor<F>) -> Result<Tensor<F>, ModelError> {
        match self {
            BaseLm::Transformer(m) => m.project_vocab(hidden),
            BaseLm::Lstm(m) => m.project_vocab(hidden),
        }
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<F>)> {
        match self {
            BaseLm::Transformer(m) => m.parameters(),
            BaseLm::Lstm(m) => m.parameters(),
        }
    }

    /// Ordered parameter groups from input side to output side, used by
    /// gradual unfreezing (which thaws from the back).
    pub fn param_groups(&self) -> Vec<(String, Vec<Tensor<F>>)> {
        match self {
            BaseLm::Transformer(m) => m.param_groups(),
            BaseLm::Lstm(m) => m.param_groups(),
        }
    }
}

/// Classifier logits plus, for multitask training, the retained LM logits.
pub struct ClassifierOutput<F: Scalar> {
    pub cls_logits: Tensor<F>,
    pub lm_logits: Option<Tensor<F>>,
}

/// A pretrained trunk with a classification head on the pooled final-layer
/// representation. The LM output projection stays available so multitask
/// finetuning can optimize both objectives on the same forward pass.
pub struct TextClassifier<F: Scalar> {
    pub base: BaseLm<F>,
    pub head: ClassifierHead<F>,
    pub pooling: Pooling,
}

/// Attach a classification head to a trunk; fails if the head input width
/// does not match the trunk representation width.
pub fn attach_head<F: Scalar>(
    base: BaseLm<F>,
    head: ClassifierHead<F>,
    pooling: Pooling,
) -> Result<TextClassifier<F>, ModelError> {
    if head.input_dim != base.hidden_width() {
        return Err(ModelError::DimensionMismatch(format!(
            "head expects input width {}, trunk produces {}",
            head.input_dim,
            base.hidden_width()
        )));
    }
    Ok(TextClassifier {
        base,
        head,
        pooling,
    })
}

impl<F: Scalar> TextClassifier<F> {
    pub fn forward(
        &self,
        batch: &TokenBatch,
        train: bool,
        rng: &mut RngStream,
        with_lm_logits: bool,
    ) -> Result<ClassifierOutput<F>, ModelError> {
        let hidden = self.base.forward_hidden(batch, train, rng)?;
        let pooled = pool(&hidden, &batch.lens, self.pooling)?;
        let cls_logits = self.head.forward(&pooled, train)?;
        let lm_logits = if with_lm_logits {
            Some(self.base.lm_logits(&hidden)?)
        } else {
            None
        };
        Ok(ClassifierOutput {
            cls_logits,
            lm_logits,
        })
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<F>)> {
        let mut params = self.base.parameters();
        params.extend(self.head.parameters("head"));
        params
    }

    /// Trunk groups followed by the head group; unfreezing thaws from the
    /// end of this list.
    pub fn param_groups(&self) -> Vec<(String, Vec<Tensor<F>>)> {
        let mut groups = self.base.param_groups();
        groups.push((
            "head".to_string(),
            self.head.parameters("head").into_iter().map(|(_, t)| t).collect(),
        ));
        groups
    }

    /// Trainable parameters plus non-trainable buffers (batch-norm running
    /// statistics), for checkpointing.
    pub fn named_arrays(&self) -> Vec<(String, Tensor<F>)> {
        let mut arrays = self.base.parameters();
        arrays.extend(self.head.named_arrays("head"));
        arrays
    }
}

// Closed-form trainable-parameter counts per architectural block. The
// parameter-count tests hold these equal to what the constructors allocate.

pub fn embedding_param_count(vocab: usize, dim: usize) -> usize {
    vocab * dim
}

pub fn linear_param_count(input: usize, output: usize) -> usize {
    input * output + output
}

pub fn lstm_layer_param_count(input: usize, hidden: usize) -> usize {
    4 * hidden * input + 4 * hidden * hidden + 4 * hidden
}

pub fn layer_norm_param_count(dim: usize) -> usize {
    2 * dim
}

pub fn head_param_count(kind: HeadKind, input_dim: usize, num_classes: usize, hidden: usize) -> usize {
    match kind {
        HeadKind::Linear => linear_param_count(input_dim, num_classes),
        HeadKind::NormLinear => layer_norm_param_count(input_dim) + linear_param_count(input_dim, num_classes),
        HeadKind::Compound => {
            linear_param_count(input_dim, hidden)
                + 2 * hidden
                + linear_param_count(hidden, num_classes)
                + 2 * num_classes
        }
    }
}

pub fn siamese_param_count(config: &SiameseConfig) -> usize {
    embedding_param_count(config.vocab_size, config.embedding_dim)
        + lstm_layer_param_count(config.embedding_dim, config.hidden_dim)
        + linear_param_count(config.hidden_dim, config.output_dim)
        + linear_param_count(config.output_dim, 1)
}

pub fn lstm_lm_param_count(config: &LstmLmConfig) -> usize {
    let mut total = embedding_param_count(config.vocab_size, config.embedding_dim);
    for (input, hidden) in config.layer_dims() {
        total += lstm_layer_param_count(input, hidden);
    }
    if !config.tie_embeddings {
        total += config.vocab_size * config.last_hidden_dim();
    }
    // Decoder bias is always its own parameter.
    total + config.vocab_size
}

pub fn transformer_param_count(config: &TransformerLmConfig) -> usize {
    let d = config.embedding_dim;
    let f = config.ffn_inner_dim;
    let per_block = 2 * layer_norm_param_count(d)      // pre-attention and pre-ffn norms
        + 4 * linear_param_count(d, d)                 // q, k, v, output projections
        + linear_param_count(d, f)
        + linear_param_count(f, d);
    embedding_param_count(config.vocab_size, d)        // token table (tied with output)
        + embedding_param_count(config.max_seq_len, d) // learned positions
        + config.num_blocks * per_block
        + layer_norm_param_count(d)                    // final norm
}
