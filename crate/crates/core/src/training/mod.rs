//! Training loops for every regime: LM pretraining (causal and masked),
//! standard classifier finetuning, the staged LM-finetune / classifier
//! pipeline with gradual unfreezing, multitask finetuning with an auxiliary
//! LM loss, and siamese pair training. One checkpoint per epoch, JSON-lines
//! metrics, deterministic under a fixed seed.

mod adam;
mod loss;
mod mlm;
mod schedule;
mod unfreeze;

pub use adam::{zero_grads, Adam, AdamConfig};
pub use loss::{classification_loss, lm_loss, multitask_loss, siamese_loss};
pub use mlm::{mask_for_mlm, MlmMasking, MlmSettings};
pub use schedule::LrSchedule;
pub use unfreeze::UnfreezePlan;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, LabeledDocument};
use crate::models::{
    LstmLm, ModelError, OptimizerSnapshot, SiameseNet, TextClassifier, TokenBatch, TransformerLm,
};
use crate::rng::RngStream;
use crate::tensor::{backward, Scalar, Tensor, TensorError};
use crate::tokenizer::{special, BpeModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("mode {mode:?} is incompatible with model family '{family}': {detail}")]
    IncompatibleMode {
        mode: TrainMode,
        family: &'static str,
        detail: String,
    },
    #[error("all positions are padding; no loss targets in batch")]
    AllPaddingBatch,
    #[error("probability {0} outside (0, 1)")]
    NumericDomain(f64),
    #[error("non-finite {0} loss")]
    NonFinite(String),
    #[error("NaN gradient in parameter '{0}'")]
    NanGradient(String),
    #[error("no maskable (non-special) token in sequence")]
    NoMaskableToken,
    #[error("step {step} out of schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("mode {0:?} requires labeled documents")]
    MissingLabels(TrainMode),
    #[error("siamese pair sampling requires documents from both classes")]
    SingleClass,
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    PretrainLm,
    PretrainMlm,
    FinetuneStandard,
    FinetuneUlmfitLmStage,
    FinetuneUlmfitClsStage,
    FinetuneMultitask,
    TrainSiamese,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SiameseRegXent,
    LmXent,
    MlmXent,
    ClassificationXent,
    Multitask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// L2 coefficient for the siamese objective.
    pub lambda: f64,
    /// Multitask LM-loss weight.
    pub alpha: f64,
}

impl LossSpec {
    pub fn for_mode(mode: TrainMode) -> Self {
        let kind = match mode {
            TrainMode::TrainSiamese => LossKind::SiameseRegXent,
            TrainMode::PretrainLm | TrainMode::FinetuneUlmfitLmStage => LossKind::LmXent,
            TrainMode::PretrainMlm => LossKind::MlmXent,
            TrainMode::FinetuneStandard | TrainMode::FinetuneUlmfitClsStage => {
                LossKind::ClassificationXent
            }
            TrainMode::FinetuneMultitask => LossKind::Multitask,
        };
        Self {
            kind,
            lambda: 1e-4,
            alpha: 1.0,
        }
    }

    pub fn validate(&self, mode: TrainMode) -> Result<(), TrainError> {
        if self.lambda < 0.0 || self.alpha < 0.0 {
            return Err(TrainError::InvalidSettings(
                "lambda and alpha must be non-negative".into(),
            ));
        }
        let expected = LossSpec::for_mode(mode).kind;
        if self.kind != expected {
            return Err(TrainError::InvalidSettings(format!(
                "loss kind {:?} does not match mode {mode:?} (expected {expected:?})",
                self.kind
            )));
        }
        Ok(())
    }
}

/// A tokenized document ready for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDoc {
    pub ids: Vec<u32>,
    pub label: Option<Label>,
}

pub fn label_index(label: Label) -> usize {
    match label {
        Label::Real => 0,
        Label::Fake => 1,
    }
}

pub fn index_label(index: usize) -> Label {
    if index == 0 {
        Label::Real
    } else {
        Label::Fake
    }
}

/// Tokenize documents into `[bos] body [eos]` sequences, truncating the body
/// to fit `max_len` when given.
pub fn encode_documents(
    tokenizer: &BpeModel,
    docs: &[LabeledDocument],
    max_len: Option<usize>,
) -> Vec<EncodedDoc> {
    docs.iter()
        .map(|doc| {
            let mut body = tokenizer.encode(&doc.text).ids;
            if let Some(max) = max_len {
                body.truncate(max.saturating_sub(2));
            }
            let mut ids = Vec::with_capacity(body.len() + 2);
            ids.push(special::BOS);
            ids.extend(body);
            ids.push(special::EOS);
            EncodedDoc {
                ids,
                label: doc.label,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Serialize metrics as JSON lines (one record per line).
pub fn metrics_to_jsonl(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<(), TrainError> {
    fs::write(path, metrics_to_jsonl(records)).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub mode: TrainMode,
    pub loss: LossSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Epochs per unfreezing stage in the staged classifier mode.
    pub unfreeze_epochs_per_stage: usize,
    pub mlm: MlmSettings,
    /// Stop once training accuracy reaches this value (epoch cap still holds).
    pub stop_at_train_accuracy: Option<f64>,
    /// Record real wall time in metrics; off by default so identical runs
    /// produce byte-identical logs.
    pub log_wall_time: bool,
    pub save_optimizer_state: bool,
}

impl TrainSettings {
    pub fn new(mode: TrainMode) -> Self {
        Self {
            mode,
            loss: LossSpec::for_mode(mode),
            epochs: 3,
            batch_size: 32,
            schedule: LrSchedule::Constant { base_lr: 1e-3 },
            adam: AdamConfig::default(),
            seed: 42,
            checkpoint_dir: None,
            unfreeze_epochs_per_stage: 1,
            mlm: MlmSettings::default(),
            stop_at_train_accuracy: None,
            log_wall_time: false,
            save_optimizer_state: false,
        }
    }
}

/// The model under training, tagged by role.
pub enum TrainableModel<F: Scalar> {
    LmTransformer(TransformerLm<F>),
    LmLstm(LstmLm<F>),
    Classifier(TextClassifier<F>),
    Siamese(SiameseNet<F>),
}

impl<F: Scalar> TrainableModel<F> {
    pub fn family(&self) -> &'static str {
        match self {
            TrainableModel::LmTransformer(_) => "transformer_lm",
            TrainableModel::LmLstm(_) => "lstm_lm",
            TrainableModel::Classifier(_) => "classifier",
            TrainableModel::Siamese(_) => "siamese",
        }
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<F>)> {
        match self {
            TrainableModel::LmTransformer(m) => m.parameters(),
            TrainableModel::LmLstm(m) => m.parameters(),
            TrainableModel::Classifier(m) => m.parameters(),
            TrainableModel::Siamese(m) => m.parameters(),
        }
    }

    pub fn save(&self, path: &Path, optimizer: Option<&OptimizerSnapshot>) -> Result<(), ModelError> {
        match self {
            TrainableModel::LmTransformer(m) => m.save(path, optimizer),
            TrainableModel::LmLstm(m) => m.save(path, optimizer),
            TrainableModel::Classifier(m) => m.save(path, optimizer),
            TrainableModel::Siamese(m) => m.save(path, optimizer),
        }
    }
}

fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Next-token targets and validity mask for a batch of full sequences:
/// position t predicts the token at t + 1; the last real position and all
/// padding carry no target.
fn shifted_targets(batch: &TokenBatch) -> (Vec<usize>, Vec<bool>) {
    let (b, t) = (batch.batch_size, batch.seq_len);
    let mut targets = vec![0usize; b * t];
    let mut mask = vec![false; b * t];
    for r in 0..b {
        for pos in 0..batch.lens[r].saturating_sub(1) {
            targets[r * t + pos] = batch.ids[r * t + pos + 1];
            mask[r * t + pos] = true;
        }
    }
    (targets, mask)
}

fn token_accuracy<F: Scalar>(logits: &Tensor<F>, targets: &[usize], mask: &[bool]) -> (usize, usize) {
    let v = logits.shape()[2];
    let vals = logits.values();
    let mut correct = 0;
    let mut total = 0;
    for (pos, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            total += 1;
            if argmax(&vals[pos * v..(pos + 1) * v]) == target {
                correct += 1;
            }
        }
    }
    (correct, total)
}

struct StepOutput<F: Scalar> {
    loss: Tensor<F>,
    correct: usize,
    total: usize,
}

fn lm_step<F: Scalar>(
    model: &TrainableModel<F>,
    docs: &[&EncodedDoc],
    train: bool,
    rng: &mut RngStream,
) -> Result<StepOutput<F>, TrainError> {
    let seqs: Vec<Vec<u32>> = docs.iter().map(|d| d.ids.clone()).collect();
    let batch = TokenBatch::from_sequences(&seqs, special::PAD)?;
    let logits = match model {
        TrainableModel::LmTransformer(m) => m.forward(&batch, train, rng)?,
        TrainableModel::LmLstm(m) => m.forward(&batch, train, rng)?,
        _ => unreachable!("mode/model compatibility checked in run_training"),
    };
    let (targets, mask) = shifted_targets(&batch);
    let loss = lm_loss(&logits, &targets, &mask)?;
    let (correct, total) = token_accuracy(&logits, &targets, &mask);
    Ok(StepOutput {
        loss,
        correct,
        total,
    })
}

fn mlm_step<F: Scalar>(
    model: &TrainableModel<F>,
    docs: &[&EncodedDoc],
    settings: MlmSettings,
    train: bool,
    mask_rng: &mut RngStream,
    dropout_rng: &mut RngStream,
) -> Result<StepOutput<F>, TrainError> {
    let TrainableModel::LmTransformer(m) = model else {
        unreachable!("mode/model compatibility checked in run_training");
    };
    let vocab = m.config.vocab_size as u32;
    let mut seqs = Vec::with_capacity(docs.len());
    let mut maskings = Vec::with_capacity(docs.len());
    for doc in docs {
        let masking = mask_for_mlm(&doc.ids, settings, vocab, mask_rng)?;
        seqs.push(masking.masked_ids.clone());
        maskings.push(masking);
    }
    let batch = TokenBatch::from_sequences(&seqs, special::PAD)?;
    let logits = m.forward(&batch, train, dropout_rng)?;
    let (b, t) = (batch.batch_size, batch.seq_len);
    debug_assert_eq!(b, maskings.len());
    let mut targets = vec![0usize; b * t];
    let mut mask = vec![false; b * t];
    for (r, masking) in maskings.iter().enumerate() {
        for (&pos, &target) in masking.target_positions.iter().zip(&masking.target_ids) {
            targets[r * t + pos] = target as usize;
            mask[r * t + pos] = true;
        }
    }
    let loss = lm_loss(&logits, &targets, &mask)?;
    let (correct, total) = token_accuracy(&logits, &targets, &mask);
    Ok(StepOutput {
        loss,
        correct,
        total,
    })
}

fn cls_step<F: Scalar>(
    model: &TrainableModel<F>,
    docs: &[&EncodedDoc],
    mode: TrainMode,
    loss_spec: &LossSpec,
    train: bool,
    rng: &mut RngStream,
) -> Result<StepOutput<F>, TrainError> {
    let TrainableModel::Classifier(m) = model else {
        unreachable!("mode/model compatibility checked in run_training");
    };
    let mut labels = Vec::with_capacity(docs.len());
    for doc in docs {
        labels.push(label_index(doc.label.ok_or(TrainError::MissingLabels(mode))?));
    }
    let seqs: Vec<Vec<u32>> = docs.iter().map(|d| d.ids.clone()).collect();
    let batch = TokenBatch::from_sequences(&seqs, special::PAD)?;
    let multitask = mode == TrainMode::FinetuneMultitask && train;
    let out = m.forward(&batch, train, rng, multitask)?;
    let cls = classification_loss(&out.cls_logits, &labels)?;
    let loss = if multitask {
        let lm_logits = out.lm_logits.expect("requested lm logits");
        let (targets, mask) = shifted_targets(&batch);
        let lm = lm_loss(&lm_logits, &targets, &mask)?;
        multitask_loss(&cls, &lm, loss_spec.alpha)?
    } else {
        cls
    };
    let vals = out.cls_logits.values();
    let c = out.cls_logits.shape()[1];
    let mut correct = 0;
    for (r, &label) in labels.iter().enumerate() {
        if argmax(&vals[r * c..(r + 1) * c]) == label {
            correct += 1;
        }
    }
    drop(vals);
    Ok(StepOutput {
        loss,
        correct,
        total: labels.len(),
    })
}

/// Index documents by class for pair sampling.
fn class_indices(docs: &[EncodedDoc], mode: TrainMode) -> Result<[Vec<usize>; 2], TrainError> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, doc) in docs.iter().enumerate() {
        let label = doc.label.ok_or(TrainError::MissingLabels(mode))?;
        by_class[label_index(label)].push(i);
    }
    if by_class[0].is_empty() || by_class[1].is_empty() {
        return Err(TrainError::SingleClass);
    }
    Ok(by_class)
}

/// One pair per anchor document: a balanced coin picks a same-class or
/// cross-class partner, drawn uniformly (excluding the anchor when possible).
fn sample_pairs(
    docs: &[EncodedDoc],
    order: &[usize],
    by_class: &[Vec<usize>; 2],
    rng: &mut RngStream,
) -> Vec<(usize, usize, bool)> {
    let mut pairs = Vec::with_capacity(order.len());
    for &anchor in order {
        let class = label_index(docs[anchor].label.expect("checked by class_indices"));
        let same = rng.bernoulli(0.5);
        let pool = if same { &by_class[class] } else { &by_class[1 - class] };
        let partner = if same && pool.len() > 1 {
            let own = pool.iter().position(|&i| i == anchor).expect("anchor in own class");
            let mut k = rng.below(pool.len() - 1);
            if k >= own {
                k += 1;
            }
            pool[k]
        } else {
            pool[rng.below(pool.len())]
        };
        pairs.push((anchor, partner, same));
    }
    pairs
}

fn siamese_step<F: Scalar>(
    model: &TrainableModel<F>,
    docs: &[EncodedDoc],
    pairs: &[(usize, usize, bool)],
    params: &[(String, Tensor<F>)],
    lambda: f64,
) -> Result<StepOutput<F>, TrainError> {
    let TrainableModel::Siamese(net) = model else {
        unreachable!("mode/model compatibility checked in run_training");
    };
    let seq_a: Vec<Vec<u32>> = pairs.iter().map(|&(a, _, _)| docs[a].ids.clone()).collect();
    let seq_b: Vec<Vec<u32>> = pairs.iter().map(|&(_, b, _)| docs[b].ids.clone()).collect();
    let same: Vec<bool> = pairs.iter().map(|&(_, _, y)| y).collect();
    let batch_a = TokenBatch::from_sequences(&seq_a, special::PAD)?;
    let batch_b = TokenBatch::from_sequences(&seq_b, special::PAD)?;
    let p = net.forward_pair(&batch_a, &batch_b)?;
    let loss = siamese_loss(&p, &same, params, lambda)?;
    let vals = p.values();
    let mut correct = 0;
    for (&prob, &y) in vals.iter().zip(&same) {
        if (prob.to_f64() > 0.5) == y {
            correct += 1;
        }
    }
    drop(vals);
    Ok(StepOutput {
        loss,
        correct,
        total: same.len(),
    })
}

fn validate_compatibility<F: Scalar>(
    model: &TrainableModel<F>,
    settings: &TrainSettings,
) -> Result<(), TrainError> {
    let mode = settings.mode;
    let fail = |detail: &str| TrainError::IncompatibleMode {
        mode,
        family: model.family(),
        detail: detail.to_string(),
    };
    match mode {
        TrainMode::PretrainLm | TrainMode::FinetuneUlmfitLmStage => match model {
            TrainableModel::LmTransformer(m) => {
                if !m.config.causal {
                    return Err(fail("causal language modeling needs causal attention"));
                }
                Ok(())
            }
            TrainableModel::LmLstm(_) => Ok(()),
            _ => Err(fail("expected a language model")),
        },
        TrainMode::PretrainMlm => match model {
            TrainableModel::LmTransformer(m) => {
                if m.config.causal {
                    return Err(fail("masked-LM pretraining needs bidirectional attention"));
                }
                Ok(())
            }
            _ => Err(fail("expected a bidirectional transformer")),
        },
        TrainMode::FinetuneStandard | TrainMode::FinetuneMultitask | TrainMode::FinetuneUlmfitClsStage => {
            match model {
                TrainableModel::Classifier(_) => Ok(()),
                _ => Err(fail("expected a classifier (trunk + head)")),
            }
        }
        TrainMode::TrainSiamese => match model {
            TrainableModel::Siamese(_) => Ok(()),
            _ => Err(fail("expected a siamese network")),
        },
    }
}

/// Evaluate loss and accuracy over a split, deterministically (no dropout,
/// fixed evaluation streams). For classifier modes the reported loss is the
/// classification cross-entropy.
pub fn evaluate_model<F: Scalar>(
    model: &TrainableModel<F>,
    docs: &[EncodedDoc],
    settings: &TrainSettings,
) -> Result<(f64, f64), TrainError> {
    if docs.is_empty() {
        return Err(TrainError::InvalidSettings("evaluation split is empty".into()));
    }
    let mut loss_sum = 0.0;
    let mut loss_batches = 0usize;
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut rng = RngStream::named(settings.seed, "eval");
    let refs: Vec<&EncodedDoc> = docs.iter().collect();

    match settings.mode {
        TrainMode::TrainSiamese => {
            let by_class = class_indices(docs, settings.mode)?;
            let order: Vec<usize> = (0..docs.len()).collect();
            let mut pair_rng = RngStream::named(settings.seed, "eval_pairs");
            let pairs = sample_pairs(docs, &order, &by_class, &mut pair_rng);
            let params = model.parameters();
            for chunk in pairs.chunks(settings.batch_size) {
                let out = siamese_step(model, docs, chunk, &params, settings.loss.lambda)?;
                loss_sum += out.loss.item().to_f64();
                loss_batches += 1;
                correct += out.correct;
                total += out.total;
            }
        }
        TrainMode::PretrainMlm => {
            let mut mask_rng = RngStream::named(settings.seed, "eval_mlm");
            for chunk in refs.chunks(settings.batch_size) {
                let out = mlm_step(model, chunk, settings.mlm, false, &mut mask_rng, &mut rng)?;
                loss_sum += out.loss.item().to_f64();
                loss_batches += 1;
                correct += out.correct;
                total += out.total;
            }
        }
        TrainMode::PretrainLm | TrainMode::FinetuneUlmfitLmStage => {
            for chunk in refs.chunks(settings.batch_size) {
                let out = lm_step(model, chunk, false, &mut rng)?;
                loss_sum += out.loss.item().to_f64();
                loss_batches += 1;
                correct += out.correct;
                total += out.total;
            }
        }
        _ => {
            for chunk in refs.chunks(settings.batch_size) {
                let out = cls_step(model, chunk, TrainMode::FinetuneStandard, &settings.loss, false, &mut rng)?;
                loss_sum += out.loss.item().to_f64();
                loss_batches += 1;
                correct += out.correct;
                total += out.total;
            }
        }
    }
    Ok((loss_sum / loss_batches as f64, correct as f64 / total.max(1) as f64))
}

/// Train `model` on `train_docs`, optionally evaluating on `eval_docs` each
/// epoch. Writes one checkpoint per completed epoch into
/// `settings.checkpoint_dir` (when set) plus a `best` symlink pointing at
/// the lowest-loss epoch, and returns the per-epoch metrics log.
pub fn run_training<F: Scalar>(
    model: &mut TrainableModel<F>,
    train_docs: &[EncodedDoc],
    eval_docs: Option<&[EncodedDoc]>,
    settings: &TrainSettings,
) -> Result<Vec<MetricsRecord>, TrainError> {
    if settings.epochs == 0 {
        return Err(TrainError::InvalidSettings("epochs must be at least 1".into()));
    }
    if settings.batch_size == 0 {
        return Err(TrainError::InvalidSettings("batch_size must be at least 1".into()));
    }
    if train_docs.is_empty() {
        return Err(TrainError::InvalidSettings("training set is empty".into()));
    }
    validate_compatibility(model, settings)?;
    settings.loss.validate(settings.mode)?;

    let params = model.parameters();
    let unfreeze = if settings.mode == TrainMode::FinetuneUlmfitClsStage {
        let TrainableModel::Classifier(m) = &*model else {
            unreachable!("validated above");
        };
        Some(UnfreezePlan::new(&m.param_groups(), settings.unfreeze_epochs_per_stage)?)
    } else {
        None
    };

    let steps_per_epoch = train_docs.len().div_ceil(settings.batch_size);
    let total_steps = steps_per_epoch * settings.epochs;
    let schedule = settings.schedule.with_total_steps(total_steps);

    let mut optimizer = Adam::new(settings.adam)?;
    let mut shuffle_rng = RngStream::named(settings.seed, "batch_shuffle");
    let mut dropout_rng = RngStream::named(settings.seed, "dropout");
    let mut mask_rng = RngStream::named(settings.seed, "mlm");
    let mut pair_rng = RngStream::named(settings.seed, "pairs");

    let siamese_classes = if settings.mode == TrainMode::TrainSiamese {
        Some(class_indices(train_docs, settings.mode)?)
    } else {
        None
    };

    if let Some(dir) = &settings.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }

    let mut records = Vec::new();
    let mut global_step = 0usize;
    let mut best: Option<(usize, f64)> = None;

    for epoch in 1..=settings.epochs {
        let epoch_start = Instant::now();
        let trainable: Option<HashSet<usize>> =
            unfreeze.as_ref().map(|plan| plan.trainable_at_epoch(epoch));

        let mut order: Vec<usize> = (0..train_docs.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        let mut correct = 0usize;
        let mut total = 0usize;
        let mut last_lr = 0.0;

        let pairs = siamese_classes
            .as_ref()
            .map(|by_class| sample_pairs(train_docs, &order, by_class, &mut pair_rng));

        for step_in_epoch in 0..steps_per_epoch {
            let lo = step_in_epoch * settings.batch_size;
            let hi = (lo + settings.batch_size).min(train_docs.len());
            let out = match settings.mode {
                TrainMode::TrainSiamese => {
                    let pairs = pairs.as_ref().expect("pairs sampled for siamese mode");
                    siamese_step(model, train_docs, &pairs[lo..hi], &params, settings.loss.lambda)?
                }
                TrainMode::PretrainMlm => {
                    let chunk: Vec<&EncodedDoc> = order[lo..hi].iter().map(|&i| &train_docs[i]).collect();
                    mlm_step(model, &chunk, settings.mlm, true, &mut mask_rng, &mut dropout_rng)?
                }
                TrainMode::PretrainLm | TrainMode::FinetuneUlmfitLmStage => {
                    let chunk: Vec<&EncodedDoc> = order[lo..hi].iter().map(|&i| &train_docs[i]).collect();
                    lm_step(model, &chunk, true, &mut dropout_rng)?
                }
                _ => {
                    let chunk: Vec<&EncodedDoc> = order[lo..hi].iter().map(|&i| &train_docs[i]).collect();
                    cls_step(model, &chunk, settings.mode, &settings.loss, true, &mut dropout_rng)?
                }
            };
            let loss_value = out.loss.item().to_f64();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite("training".into()));
            }
            backward(&out.loss)?;
            let lr = schedule.lr_at_step((global_step + 1).min(total_steps))?;
            optimizer.step(&params, trainable.as_ref(), lr)?;
            zero_grads(&params);

            loss_sum += loss_value;
            loss_batches += 1;
            correct += out.correct;
            total += out.total;
            last_lr = lr;
            global_step += 1;
        }

        let train_loss = loss_sum / loss_batches as f64;
        let train_acc = correct as f64 / total.max(1) as f64;
        let wall_ms = if settings.log_wall_time {
            epoch_start.elapsed().as_millis() as u64
        } else {
            0
        };
        records.push(MetricsRecord {
            epoch,
            split: "train".to_string(),
            loss: train_loss,
            accuracy: train_acc,
            lr: last_lr,
            wall_ms,
        });

        let mut selection_loss = train_loss;
        if let Some(eval) = eval_docs {
            let eval_start = Instant::now();
            let (eval_loss, eval_acc) = evaluate_model(model, eval, settings)?;
            let wall_ms = if settings.log_wall_time {
                eval_start.elapsed().as_millis() as u64
            } else {
                0
            };
            records.push(MetricsRecord {
                epoch,
                split: "test".to_string(),
                loss: eval_loss,
                accuracy: eval_acc,
                lr: last_lr,
                wall_ms,
            });
            selection_loss = eval_loss;
        }

        if let Some(dir) = &settings.checkpoint_dir {
            let path = dir.join(format!("epoch-{epoch:03}.ckpt"));
            let snapshot = settings.save_optimizer_state.then(|| optimizer.snapshot(&params));
            model.save(&path, snapshot.as_ref())?;
        }
        if best.map(|(_, v)| selection_loss < v).unwrap_or(true) {
            best = Some((epoch, selection_loss));
        }

        if let Some(target) = settings.stop_at_train_accuracy {
            if train_acc >= target {
                break;
            }
        }
    }

    if let Some(dir) = &settings.checkpoint_dir {
        let (best_epoch, _) = best.expect("at least one epoch ran");
        link_best(dir, best_epoch)?;
    }
    Ok(records)
}

/// Point `<dir>/best` at the checkpoint of `epoch`.
fn link_best(dir: &Path, epoch: usize) -> Result<(), TrainError> {
    let link = dir.join("best");
    let target = format!("epoch-{epoch:03}.ckpt");
    if link.symlink_metadata().is_ok() {
        fs::remove_file(&link).map_err(|source| TrainError::Io {
            path: link.display().to_string(),
            source,
        })?;
    }
    #[cfg(unix)]
    {
        std::os::unix::fs::symlink(&target, &link).map_err(|source| TrainError::Io {
            path: link.display().to_string(),
            source,
        })
    }
    #[cfg(not(unix))]
    {
        fs::copy(dir.join(&target), &link)
            .map(|_| ())
            .map_err(|source| TrainError::Io {
                path: link.display().to_string(),
                source,
            })
    }
}
