//! Prototype for tuning the direction-check experiments. Temporary.

use std::time::Instant;

use textlift_core::corpus::LabeledDocument;
use textlift_core::models::{
    attach_head, BaseLm, ClassifierHead, HeadKind, Pooling, TransformerLm, TransformerLmConfig,
};
use textlift_core::rng::RngStream;
use textlift_core::synthetic::SyntheticTask;
use textlift_core::tokenizer::{train_bpe, BpeModel};
use textlift_core::training::{
    encode_documents, evaluate_model, run_training, EncodedDoc, LrSchedule, TrainMode,
    TrainSettings, TrainableModel,
};

fn tiny_config(vocab: usize) -> TransformerLmConfig {
    TransformerLmConfig {
        vocab_size: vocab,
        embedding_dim: 64,
        ffn_inner_dim: 128,
        num_heads: 4,
        num_blocks: 2,
        max_seq_len: 32,
        dropout: 0.1,
        init_std: 0.02,
        causal: true,
        head_mask: None,
    }
}

struct Setup {
    tokenizer: BpeModel,
    corpus: Vec<EncodedDoc>,
    train: Vec<EncodedDoc>,
    test: Vec<EncodedDoc>,
}

fn setup(seed: u64, n_corpus: usize, n_train: usize, n_test: usize) -> Setup {
    let corpus_task = SyntheticTask {
        fidelity: 0.85,
        ..Default::default()
    };
    let task = SyntheticTask {
        fidelity: 0.95,
        ..Default::default()
    };
    let mut gen = RngStream::named(seed, "datagen");
    let corpus_docs: Vec<LabeledDocument> = corpus_task.unlabeled_corpus(n_corpus, &mut gen);
    let train_docs = task.labeled_docs(n_train, &mut gen);
    let test_docs = task.labeled_docs(n_test, &mut gen);
    let lines: Vec<String> = corpus_docs.iter().map(|d| d.text.clone()).collect();
    let tokenizer = train_bpe(&lines, 60).unwrap();
    Setup {
        corpus: encode_documents(&tokenizer, &corpus_docs, Some(32)),
        train: encode_documents(&tokenizer, &train_docs, Some(32)),
        test: encode_documents(&tokenizer, &test_docs, Some(32)),
        tokenizer,
    }
}

fn pretrain(setup: &Setup, seed: u64, epochs: usize) -> TransformerLm<f32> {
    let config = tiny_config(setup.tokenizer.vocab_size());
    let model = TransformerLm::<f32>::new(config, &mut RngStream::named(seed, "init")).unwrap();
    let mut model = TrainableModel::LmTransformer(model);
    let mut s = TrainSettings::new(TrainMode::PretrainLm);
    s.epochs = epochs;
    s.batch_size = 32;
    s.seed = seed;
    s.schedule = LrSchedule::LinearWarmup {
        base_lr: 2.5e-3,
        warmup_steps: 20,
        total_steps: 0,
    };
    let t = Instant::now();
    let recs = run_training(&mut model, &setup.corpus, None, &s).unwrap();
    let last = recs.last().unwrap();
    eprintln!(
        "  pretrain seed {seed}: {} epochs in {:?}, final loss {:.3} acc {:.3}",
        epochs,
        t.elapsed(),
        last.loss,
        last.accuracy
    );
    let TrainableModel::LmTransformer(m) = model else { unreachable!() };
    m
}

fn finetune(
    trunk: TransformerLm<f32>,
    setup: &Setup,
    seed: u64,
    mode: TrainMode,
    train_docs: &[EncodedDoc],
    lr: f64,
) -> f64 {
    let width = trunk.config.embedding_dim;
    let head = ClassifierHead::new(
        HeadKind::NormLinear,
        width,
        2,
        8,
        &mut RngStream::named(seed, "head"),
    )
    .unwrap();
    let clf = attach_head(BaseLm::Transformer(trunk), head, Pooling::LastToken).unwrap();
    let mut model = TrainableModel::Classifier(clf);
    let mut s = TrainSettings::new(mode);
    s.epochs = 3;
    s.batch_size = 16;
    s.seed = seed;
    s.schedule = LrSchedule::LinearWarmup {
        base_lr: lr,
        warmup_steps: 0,
        total_steps: 0,
    };
    run_training(&mut model, train_docs, None, &s).unwrap();
    let (_, acc) = evaluate_model(&model, &setup.test, &s).unwrap();
    acc * 100.0
}

#[test]
#[ignore]
fn proto_pretraining_direction() {
    let total = Instant::now();
    let mut gaps = Vec::new();
    for seed in [11u64, 22, 33] {
        let t = Instant::now();
        let s = setup(seed, 5000, 200, 200);
        eprintln!("  data+bpe in {:?}, vocab {}", t.elapsed(), s.tokenizer.vocab_size());
        let trunk = pretrain(&s, seed, 2);
        let t = Instant::now();
        let acc_pre = finetune(trunk, &s, seed, TrainMode::FinetuneStandard, &s.train, 1e-3);
        let fresh = TransformerLm::<f32>::new(
            tiny_config(s.tokenizer.vocab_size()),
            &mut RngStream::named(seed, "init"),
        )
        .unwrap();
        let acc_rand = finetune(fresh, &s, seed, TrainMode::FinetuneStandard, &s.train, 1e-3);
        eprintln!(
            "  seed {seed}: pretrained {acc_pre:.1} vs random {acc_rand:.1} (finetunes {:?})",
            t.elapsed()
        );
        gaps.push(acc_pre - acc_rand);
    }
    let avg = gaps.iter().sum::<f64>() / gaps.len() as f64;
    eprintln!("avg gap {avg:.1} pts, total {:?}", total.elapsed());
    assert!(avg >= 10.0);
}

#[test]
#[ignore]
fn proto_multitask_direction() {
    let total = Instant::now();
    let mut pairs = Vec::new();
    for seed in [5u64, 6, 7, 8, 9] {
        let s = setup(seed, 5000, 50, 200);
        let trunk = pretrain(&s, seed, 2);
        let trunk_b = TransformerLm::<f32>::from_checkpoint(&{
            let path = std::env::temp_dir().join(format!("proto_mt_{seed}.ckpt"));
            trunk.save(&path, None).unwrap();
            textlift_core::models::load_checkpoint(&path).unwrap()
        })
        .unwrap();
        let acc_std = finetune(trunk, &s, seed, TrainMode::FinetuneStandard, &s.train, 1e-3);
        let acc_mt = finetune(trunk_b, &s, seed, TrainMode::FinetuneMultitask, &s.train, 1e-3);
        eprintln!("  seed {seed}: standard {acc_std:.1} multitask {acc_mt:.1}");
        pairs.push((acc_std, acc_mt));
    }
    let avg_std = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
    let avg_mt = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
    eprintln!("avg standard {avg_std:.1} multitask {avg_mt:.1}, total {:?}", total.elapsed());
}
