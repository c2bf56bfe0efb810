//! Transfer-learning text classification toolkit.
//!
//! The crate bundles a reverse-mode autodiff tensor engine, a byte-level BPE
//! tokenizer, corpus ingestion and statistics, three model families (siamese
//! recurrent network, LSTM language model, decoder-only transformer), the
//! training regimes that connect them (standard finetuning, staged LM
//! finetuning with gradual unfreezing, multitask finetuning with an auxiliary
//! language-modeling loss), and ablation harnesses for pretraining and
//! attention-head masking. Everything runs on CPU at desk scale and is
//! deterministic under a fixed seed.

pub mod ablation;
pub mod corpus;
pub mod models;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod training;
