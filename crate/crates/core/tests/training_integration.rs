//! End-to-end behavior of the training loops at toy scale: losses fall,
//! reruns are bit-identical, checkpoints land once per epoch, freezing
//! holds parameters bit-still, and the separable siamese toy saturates.

use std::fs;

use textlift_core::corpus::LabeledDocument;
use textlift_core::models::{
    attach_head, BaseLm, ClassifierHead, DropoutRates, HeadKind, LstmLm, LstmLmConfig, Pooling,
    SiameseConfig, SiameseNet, TransformerLm, TransformerLmConfig,
};
use textlift_core::rng::RngStream;
use textlift_core::synthetic::SyntheticTask;
use textlift_core::tokenizer::train_bpe;
use textlift_core::training::{
    encode_documents, run_training, EncodedDoc, LrSchedule, TrainMode, TrainSettings,
    TrainableModel,
};

fn tiny_transformer_config(vocab: usize, causal: bool) -> TransformerLmConfig {
    TransformerLmConfig {
        vocab_size: vocab,
        embedding_dim: 16,
        ffn_inner_dim: 32,
        num_heads: 2,
        num_blocks: 2,
        max_seq_len: 40,
        dropout: 0.0,
        init_std: 0.05,
        causal,
        head_mask: None,
    }
}

fn tiny_lstm_config(vocab: usize) -> LstmLmConfig {
    LstmLmConfig {
        vocab_size: vocab,
        layers: 2,
        embedding_dim: 16,
        hidden_dim: 20,
        dropouts: DropoutRates {
            embedding: 0.0,
            input: 0.0,
            hidden: 0.0,
            output: 0.0,
        },
        recurrent_weight_drop: 0.0,
        tie_embeddings: true,
    }
}

/// Tokenized synthetic docs plus the tokenizer vocabulary size.
fn synthetic_docs(n: usize, seed: u64) -> (Vec<EncodedDoc>, usize) {
    let task = SyntheticTask::default();
    let docs: Vec<LabeledDocument> = task.labeled_docs(n, &mut RngStream::new(seed));
    let lines: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
    let tokenizer = train_bpe(&lines, 40).unwrap();
    let encoded = encode_documents(&tokenizer, &docs, Some(40));
    (encoded, tokenizer.vocab_size())
}

fn first_last_quarter_decrease(losses: &[f64]) -> bool {
    let q = (losses.len() / 4).max(1);
    let first: f64 = losses[..q].iter().sum::<f64>() / q as f64;
    let last: f64 = losses[losses.len() - q..].iter().sum::<f64>() / q as f64;
    last < first
}

fn train_losses(records: &[textlift_core::training::MetricsRecord]) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.split == "train")
        .map(|r| r.loss)
        .collect()
}

#[test]
fn pretrain_lm_transformer_loss_decreases() {
    let (docs, vocab) = synthetic_docs(64, 1);
    let model = TransformerLm::<f32>::new(tiny_transformer_config(vocab, true), &mut RngStream::new(2)).unwrap();
    let mut model = TrainableModel::LmTransformer(model);
    let mut settings = TrainSettings::new(TrainMode::PretrainLm);
    settings.epochs = 8;
    settings.batch_size = 16;
    settings.schedule = LrSchedule::Constant { base_lr: 3e-3 };
    let records = run_training(&mut model, &docs, None, &settings).unwrap();
    let losses = train_losses(&records);
    assert!(first_last_quarter_decrease(&losses), "losses {losses:?}");
}

#[test]
fn pretrain_lm_lstm_loss_decreases() {
    let (docs, vocab) = synthetic_docs(64, 3);
    let model = LstmLm::<f32>::new(tiny_lstm_config(vocab), &mut RngStream::new(2)).unwrap();
    let mut model = TrainableModel::LmLstm(model);
    let mut settings = TrainSettings::new(TrainMode::PretrainLm);
    settings.epochs = 8;
    settings.batch_size = 16;
    settings.schedule = LrSchedule::Constant { base_lr: 3e-3 };
    let records = run_training(&mut model, &docs, None, &settings).unwrap();
    let losses = train_losses(&records);
    assert!(first_last_quarter_decrease(&losses), "losses {losses:?}");
}

#[test]
fn pretrain_mlm_loss_decreases() {
    let (docs, vocab) = synthetic_docs(64, 5);
    let model = TransformerLm::<f32>::new(tiny_transformer_config(vocab, false), &mut RngStream::new(2)).unwrap();
    let mut model = TrainableModel::LmTransformer(model);
    let mut settings = TrainSettings::new(TrainMode::PretrainMlm);
    settings.epochs = 8;
    settings.batch_size = 16;
    settings.schedule = LrSchedule::Constant { base_lr: 3e-3 };
    settings.mlm.p_mask = 0.3;
    settings.mlm.max_predictions = 12;
    let records = run_training(&mut model, &docs, None, &settings).unwrap();
    let losses = train_losses(&records);
    assert!(first_last_quarter_decrease(&losses), "losses {losses:?}");
}

#[test]
fn causal_model_rejects_mlm_mode() {
    let (docs, vocab) = synthetic_docs(8, 5);
    let model = TransformerLm::<f32>::new(tiny_transformer_config(vocab, true), &mut RngStream::new(2)).unwrap();
    let mut model = TrainableModel::LmTransformer(model);
    let settings = TrainSettings::new(TrainMode::PretrainMlm);
    assert!(run_training(&mut model, &docs, None, &settings).is_err());
}

fn build_classifier(vocab: usize, head: HeadKind, seed: u64) -> TrainableModel<f32> {
    let mut rng = RngStream::new(seed);
    let trunk = TransformerLm::<f32>::new(tiny_transformer_config(vocab, true), &mut rng).unwrap();
    let width = trunk.config.embedding_dim;
    let head = ClassifierHead::new(head, width, 2, 8, &mut rng).unwrap();
    TrainableModel::Classifier(attach_head(BaseLm::Transformer(trunk), head, Pooling::LastToken).unwrap())
}

#[test]
fn finetune_standard_loss_decreases() {
    let (docs, vocab) = synthetic_docs(64, 7);
    let mut model = build_classifier(vocab, HeadKind::NormLinear, 2);
    let mut settings = TrainSettings::new(TrainMode::FinetuneStandard);
    settings.epochs = 8;
    settings.batch_size = 16;
    settings.schedule = LrSchedule::Constant { base_lr: 1e-3 };
    let records = run_training(&mut model, &docs, None, &settings).unwrap();
    let losses = train_losses(&records);
    assert!(first_last_quarter_decrease(&losses), "losses {losses:?}");
}

#[test]
fn finetune_multitask_loss_decreases() {
    let (docs, vocab) = synthetic_docs(64, 9);
    let mut model = build_classifier(vocab, HeadKind::NormLinear, 2);
    let mut settings = TrainSettings::new(TrainMode::FinetuneMultitask);
    settings.epochs = 8;
    settings.batch_size = 16;
    settings.schedule = LrSchedule::Constant { base_lr: 1e-3 };
    let records = run_training(&mut model, &docs, None, &settings).unwrap();
    let losses = train_losses(&records);
    assert!(first_last_quarter_decrease(&losses), "losses {losses:?}");
}

#[test]
fn ulmfit_stages_loss_decreases() {
    let (docs, vocab) = synthetic_docs(64, 11);
    // LM stage over an LSTM.
    let lm = LstmLm::<f32>::new(tiny_lstm_config(vocab), &mut RngStream::new(2)).unwrap();
    let mut model = TrainableModel::LmLstm(lm);
    let mut settings = TrainSettings::new(TrainMode::FinetuneUlmfitLmStage);
    settings.epochs = 8;
    settings.batch_size = 16;
    settings.schedule = LrSchedule::SlantedTriangular {
        base_lr: 3e-3,
        cut_frac: 0.1,
        ratio: 32.0,
        total_steps: 0,
    };
    let records = run_training(&mut model, &docs, None, &settings).unwrap();
    assert!(first_last_quarter_decrease(&train_losses(&records)));

    // Classifier stage with gradual unfreezing and the compound head.
    let TrainableModel::LmLstm(lm) = model else { unreachable!() };
    let width = lm.output_width();
    let mut rng = RngStream::new(3);
    let head = ClassifierHead::new(HeadKind::Compound, width, 2, 8, &mut rng).unwrap();
    let mut model = TrainableModel::Classifier(
        attach_head(BaseLm::Lstm(lm), head, Pooling::LastToken).unwrap(),
    );
    let mut settings = TrainSettings::new(TrainMode::FinetuneUlmfitClsStage);
    settings.epochs = 8;
    settings.batch_size = 16;
    settings.adam.beta1 = 0.8;
    settings.adam.beta2 = 0.7;
    settings.schedule = LrSchedule::SlantedTriangular {
        base_lr: 2e-3,
        cut_frac: 0.1,
        ratio: 32.0,
        total_steps: 0,
    };
    let records = run_training(&mut model, &docs, None, &settings).unwrap();
    assert!(first_last_quarter_decrease(&train_losses(&records)));
}

#[test]
fn siamese_separable_toy_saturates() {
    // Two trivially separable styles (disjoint ring halves would be even
    // easier; full synthetic styles already separate).
    let (docs, vocab) = synthetic_docs(40, 13);
    let config = SiameseConfig {
        vocab_size: vocab,
        embedding_dim: 12,
        hidden_dim: 16,
        output_dim: 12,
    };
    let net = SiameseNet::<f32>::new(config, &mut RngStream::new(21)).unwrap();
    let mut model = TrainableModel::Siamese(net);
    let mut settings = TrainSettings::new(TrainMode::TrainSiamese);
    settings.epochs = 500;
    settings.batch_size = 20;
    settings.schedule = LrSchedule::Constant { base_lr: 1e-3 };
    settings.loss.lambda = 0.0;
    settings.stop_at_train_accuracy = Some(1.0);
    let records = run_training(&mut model, &docs, None, &settings).unwrap();
    let last = records.iter().filter(|r| r.split == "train").next_back().unwrap();
    assert_eq!(last.accuracy, 1.0, "final train accuracy {}", last.accuracy);
    assert!(last.epoch <= 500);
}

#[test]
fn identical_seeds_give_bit_identical_checkpoints_and_metrics() {
    let (docs, vocab) = synthetic_docs(32, 15);
    let base = std::env::temp_dir().join(format!("textlift_det_{}", std::process::id()));
    let run = |dir: &std::path::Path| {
        let model =
            TransformerLm::<f32>::new(tiny_transformer_config(vocab, true), &mut RngStream::new(2)).unwrap();
        let mut model = TrainableModel::LmTransformer(model);
        let mut settings = TrainSettings::new(TrainMode::PretrainLm);
        settings.epochs = 3;
        settings.batch_size = 8;
        settings.schedule = LrSchedule::Constant { base_lr: 1e-3 };
        settings.checkpoint_dir = Some(dir.to_path_buf());
        run_training(&mut model, &docs, None, &settings).unwrap()
    };
    let dir_a = base.join("a");
    let dir_b = base.join("b");
    let rec_a = run(&dir_a);
    let rec_b = run(&dir_b);
    assert_eq!(
        textlift_core::training::metrics_to_jsonl(&rec_a),
        textlift_core::training::metrics_to_jsonl(&rec_b)
    );
    for epoch in 1..=3 {
        let name = format!("epoch-{epoch:03}.ckpt");
        let a = fs::read(dir_a.join(&name)).unwrap();
        let b = fs::read(dir_b.join(&name)).unwrap();
        assert_eq!(a, b, "checkpoint {name} differs");
    }
    fs::remove_dir_all(&base).ok();
}

#[test]
fn one_checkpoint_per_epoch_and_best_link() {
    let (docs, vocab) = synthetic_docs(24, 17);
    let dir = std::env::temp_dir().join(format!("textlift_ckpts_{}", std::process::id()));
    let model =
        TransformerLm::<f32>::new(tiny_transformer_config(vocab, true), &mut RngStream::new(2)).unwrap();
    let mut model = TrainableModel::LmTransformer(model);
    let mut settings = TrainSettings::new(TrainMode::PretrainLm);
    settings.epochs = 3;
    settings.batch_size = 8;
    settings.checkpoint_dir = Some(dir.clone());
    run_training(&mut model, &docs, None, &settings).unwrap();
    let mut ckpts: Vec<String> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().to_string())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    ckpts.sort();
    assert_eq!(ckpts, vec!["epoch-001.ckpt", "epoch-002.ckpt", "epoch-003.ckpt"]);
    let best = dir.join("best");
    assert!(best.symlink_metadata().is_ok(), "best link missing");
    assert!(fs::read(&best).is_ok(), "best link target readable");
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn frozen_groups_stay_bit_identical_in_first_stage() {
    let (docs, vocab) = synthetic_docs(32, 19);
    let mut model = build_classifier(vocab, HeadKind::Compound, 5);
    let before: Vec<(String, Vec<f32>)> = model
        .parameters()
        .iter()
        .map(|(n, t)| (n.clone(), t.to_vec()))
        .collect();
    let mut settings = TrainSettings::new(TrainMode::FinetuneUlmfitClsStage);
    settings.epochs = 1;
    settings.batch_size = 8;
    settings.schedule = LrSchedule::Constant { base_lr: 1e-3 };
    run_training(&mut model, &docs, None, &settings).unwrap();
    for ((name, old), (_, tensor)) in before.iter().zip(model.parameters().iter()) {
        let now = tensor.to_vec();
        if name.starts_with("head.") {
            assert_ne!(old, &now, "head parameter {name} should have moved");
        } else {
            assert_eq!(old, &now, "trunk parameter {name} moved while frozen");
        }
    }
}

#[test]
fn trainable_count_strictly_increases_then_saturates() {
    let (_, vocab) = synthetic_docs(8, 21);
    let TrainableModel::Classifier(m) = build_classifier(vocab, HeadKind::Linear, 5) else {
        unreachable!();
    };
    let plan = textlift_core::training::UnfreezePlan::new(&m.param_groups(), 1).unwrap();
    assert_eq!(plan.num_groups(), 4, "embeddings + 2 blocks + head");
    let count = |e: usize| plan.trainable_at_epoch(e).len();
    assert!(count(1) < count(2) && count(2) < count(3) && count(3) < count(4));
    assert_eq!(count(4), count(5));
    assert_eq!(count(4), m.parameters().len());
}
