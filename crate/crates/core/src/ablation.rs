//! Ablation harnesses: pretraining on/off with derived performance metrics,
//! and the attention-head masking sweep.

use serde::Serialize;
use thiserror::Error;

use crate::models::{
    attach_head, BaseLm, Checkpoint, ClassifierHead, HeadKind, ModelError, Pooling, TokenBatch,
    TransformerLm, TransformerLmConfig,
};
use crate::rng::RngStream;
use crate::tensor::Scalar;
use crate::training::{
    evaluate_model, run_training, EncodedDoc, LossSpec, LrSchedule, TrainError, TrainMode,
    TrainSettings, TrainableModel,
};

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("accuracy-with must be nonzero")]
    ZeroBaseline,
    #[error("keeping zero heads is not a valid sweep arm")]
    ZeroHeads,
    #[error("head count {k} exceeds the model's {num_heads} heads")]
    TooManyHeads { k: usize, num_heads: usize },
    #[error("head-mask sweep needs a transformer checkpoint, got '{0}'")]
    NotATransformer(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One experimental arm. Derived columns are recomputed from the raw
/// columns at report construction, never stored independently of them.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub condition: String,
    pub accuracy: f64,
    pub val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_increase: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub percent_of_performance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effect: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub kind: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column text table.
    pub fn to_table(&self) -> String {
        let (headers, cells): (Vec<&str>, Vec<Vec<String>>) = if self.kind == "heads" {
            (
                vec!["# of Heads", "Accuracy", "Val. Loss", "Effect"],
                self.rows
                    .iter()
                    .map(|r| {
                        vec![
                            r.condition.clone(),
                            format!("{:.2}%", r.accuracy),
                            format!("{:.4}", r.val_loss),
                            r.effect.map(|e| format!("{e:+.2}%")).unwrap_or_default(),
                        ]
                    })
                    .collect(),
            )
        } else {
            (
                vec!["Condition", "Pretrained?", "Accuracy", "Val. Loss", "Acc. Inc.", "% of Perf."],
                self.rows
                    .iter()
                    .map(|r| {
                        let (condition, pretrained) = match r.condition.rsplit_once('/') {
                            Some((c, p)) => (c.to_string(), p.to_string()),
                            None => (r.condition.clone(), String::new()),
                        };
                        vec![
                            condition,
                            pretrained,
                            format!("{:.2}%", r.accuracy),
                            format!("{:.4}", r.val_loss),
                            r.accuracy_increase.map(|v| format!("{v:+.2}%")).unwrap_or_default(),
                            r.percent_of_performance.map(|v| format!("{v:.2}%")).unwrap_or_default(),
                        ]
                    })
                    .collect(),
            )
        };
        render_table(&headers, &cells)
    }
}

fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for c in 0..cols {
            widths[c] = widths[c].max(row[c].len());
        }
    }
    let line = |cells: &[String], widths: &[usize]| {
        let joined: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{:<width$}", cell, width = widths[c]))
            .collect();
        format!("{}\n", joined.join("  ").trim_end())
    };
    let mut out = String::new();
    out.push_str(&line(&headers.iter().map(|h| h.to_string()).collect::<Vec<_>>(), &widths));
    out.push_str(&line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>(), &widths));
    for row in rows {
        out.push_str(&line(row, &widths));
    }
    out
}

/// Derived columns of the pretraining ablation: the accuracy boost from
/// pretraining and the share of total performance it accounts for.
/// Accuracies are percentages. An order violation (without > with) is
/// reported as a negative increase, not rejected.
pub fn pretraining_ablation_metrics(
    acc_with: f64,
    acc_without: f64,
) -> Result<(f64, f64), AblationError> {
    if acc_with == 0.0 {
        return Err(AblationError::ZeroBaseline);
    }
    let increase = acc_with - acc_without;
    let percent_of_performance = increase / acc_with * 100.0;
    Ok((increase, percent_of_performance))
}

/// Settings for a finetuning arm inside an ablation.
#[derive(Debug, Clone)]
pub struct FinetunePlan {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub alpha: f64,
    pub seed: u64,
    pub head: HeadKind,
    pub head_hidden: usize,
    pub pooling: Pooling,
}

impl Default for FinetunePlan {
    fn default() -> Self {
        Self {
            mode: TrainMode::FinetuneMultitask,
            epochs: 3,
            batch_size: 32,
            schedule: LrSchedule::LinearWarmup {
                base_lr: 3e-5,
                warmup_steps: 0,
                total_steps: 0,
            },
            alpha: 1.0,
            seed: 42,
            head: HeadKind::NormLinear,
            head_hidden: 50,
            pooling: Pooling::LastToken,
        }
    }
}

impl FinetunePlan {
    fn to_settings(&self) -> TrainSettings {
        let mut settings = TrainSettings::new(self.mode);
        settings.epochs = self.epochs;
        settings.batch_size = self.batch_size;
        settings.schedule = self.schedule;
        settings.loss = LossSpec {
            alpha: self.alpha,
            ..LossSpec::for_mode(self.mode)
        };
        settings.seed = self.seed;
        settings
    }
}

fn finetune_transformer_arm<F: Scalar>(
    trunk: TransformerLm<F>,
    train_docs: &[EncodedDoc],
    eval_docs: &[EncodedDoc],
    plan: &FinetunePlan,
) -> Result<(f64, f64), AblationError> {
    let mut rng = RngStream::named(plan.seed, "head_init");
    let head = ClassifierHead::new(plan.head, trunk.config.embedding_dim, 2, plan.head_hidden, &mut rng)?;
    let classifier = attach_head(BaseLm::Transformer(trunk), head, plan.pooling)?;
    let mut model = TrainableModel::Classifier(classifier);
    let settings = plan.to_settings();
    run_training(&mut model, train_docs, None, &settings)?;
    let (loss, acc) = evaluate_model(&model, eval_docs, &settings)?;
    Ok((acc * 100.0, loss))
}

/// Finetune a pretrained transformer once per head-count arm, keeping the
/// first `k` heads and zero-masking the rest, and report accuracy deltas
/// against the reference head count (the config's full head count unless
/// overridden).
pub fn head_mask_sweep<F: Scalar>(
    pretrained: &Checkpoint,
    train_docs: &[EncodedDoc],
    eval_docs: &[EncodedDoc],
    heads_to_keep: &[usize],
    reference: Option<usize>,
    plan: &FinetunePlan,
) -> Result<AblationReport, AblationError> {
    if pretrained.family != "transformer_lm" {
        return Err(AblationError::NotATransformer(pretrained.family.clone()));
    }
    let template = TransformerLm::<F>::from_checkpoint(pretrained)?;
    let num_heads = template.config.num_heads;
    let reference = reference.unwrap_or(num_heads);

    let mut arms: Vec<usize> = heads_to_keep.to_vec();
    if !arms.contains(&reference) {
        arms.push(reference);
    }
    arms.sort_unstable();
    arms.dedup();
    for &k in &arms {
        if k == 0 {
            return Err(AblationError::ZeroHeads);
        }
        if k > num_heads {
            return Err(AblationError::TooManyHeads { k, num_heads });
        }
    }

    let mut raw: Vec<(usize, f64, f64)> = Vec::with_capacity(arms.len());
    for &k in &arms {
        let mut trunk = TransformerLm::<F>::from_checkpoint(pretrained)?;
        trunk.config.head_mask = Some((0..num_heads).map(|h| h < k).collect());
        let (acc, loss) = finetune_transformer_arm(trunk, train_docs, eval_docs, plan)?;
        raw.push((k, acc, loss));
    }

    let reference_acc = raw
        .iter()
        .find(|(k, _, _)| *k == reference)
        .map(|(_, acc, _)| *acc)
        .expect("reference arm was run");
    let rows = raw
        .into_iter()
        .map(|(k, accuracy, val_loss)| AblationRow {
            condition: k.to_string(),
            accuracy,
            val_loss,
            accuracy_increase: None,
            percent_of_performance: None,
            effect: Some(accuracy - reference_acc),
        })
        .collect();
    Ok(AblationReport {
        kind: "heads".to_string(),
        rows,
    })
}

/// Train both arms of the pretraining ablation — (pretrain, then finetune)
/// versus (random init, then finetune) — with matched hyperparameters, and
/// report the derived metrics.
pub fn pretraining_ablation_run<F: Scalar>(
    config: &TransformerLmConfig,
    pretrain_corpus: &[EncodedDoc],
    train_docs: &[EncodedDoc],
    eval_docs: &[EncodedDoc],
    pretrain: &TrainSettings,
    plan: &FinetunePlan,
) -> Result<AblationReport, AblationError> {
    let init_rng = || RngStream::named(plan.seed, "trunk_init");

    // Arm A: pretrain the trunk, then finetune.
    let trunk_a = TransformerLm::<F>::new(config.clone(), &mut init_rng())?;
    let mut lm = TrainableModel::LmTransformer(trunk_a);
    run_training(&mut lm, pretrain_corpus, None, pretrain)?;
    let TrainableModel::LmTransformer(trunk_a) = lm else {
        unreachable!("model variant is preserved by training");
    };
    let (acc_with, loss_with) = finetune_transformer_arm(trunk_a, train_docs, eval_docs, plan)?;

    // Arm B: identical init, no pretraining.
    let trunk_b = TransformerLm::<F>::new(config.clone(), &mut init_rng())?;
    let (acc_without, loss_without) = finetune_transformer_arm(trunk_b, train_docs, eval_docs, plan)?;

    let (increase, percent) = pretraining_ablation_metrics(acc_with, acc_without)?;
    let condition = match plan.mode {
        TrainMode::FinetuneMultitask => "multitasking",
        _ => "standard",
    };
    Ok(AblationReport {
        kind: "pretraining".to_string(),
        rows: vec![
            AblationRow {
                condition: format!("{condition}/no"),
                accuracy: acc_without,
                val_loss: loss_without,
                accuracy_increase: None,
                percent_of_performance: None,
                effect: None,
            },
            AblationRow {
                condition: format!("{condition}/yes"),
                accuracy: acc_with,
                val_loss: loss_with,
                accuracy_increase: Some(increase),
                percent_of_performance: Some(percent),
                effect: None,
            },
        ],
    })
}

/// Structural check helper: the number of per-head channels carrying any
/// nonzero pre-projection activation, summed over blocks. Masking a superset
/// of heads can never increase this.
pub fn nonzero_attention_channels<F: Scalar>(
    model: &TransformerLm<F>,
    batch: &TokenBatch,
) -> Result<usize, ModelError> {
    let (_, traces) = model.forward_with_attention_trace(batch)?;
    let mut live = 0usize;
    for trace in traces {
        let shape = trace.shape().to_vec();
        let (b, h, t, hd) = (shape[0], shape[1], shape[2], shape[3]);
        let vals = trace.values();
        for head in 0..h {
            for k in 0..hd {
                let mut any = false;
                'scan: for r in 0..b {
                    for ti in 0..t {
                        if vals[((r * h + head) * t + ti) * hd + k] != F::zero() {
                            any = true;
                            break 'scan;
                        }
                    }
                }
                if any {
                    live += 1;
                }
            }
        }
    }
    Ok(live)
}
