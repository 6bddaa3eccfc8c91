//! Training loop, evaluation and the FAET/AET comparison.

use serde::Serialize;

use crate::adam::{AdamConfig, AdamState};
use crate::batch::{make_batches, make_ordered_batches};
use crate::classifier::Prediction;
use crate::config::{TrainConfig, Variant};
use crate::corpus::{Label, TokenizedDoc};
use crate::dropout::Dropout;
use crate::error::{FaetError, Result};
use crate::graph::Graph;
use crate::metrics::MetricsReport;
use crate::model::{derive_seed, FaetModel, DROPOUT_STREAM, SHUFFLE_STREAM};
use crate::scalar::Scalar;
use crate::vocab::build_vocab;

/// One line of the per-epoch training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub final_model: FaetModel<S>,
    /// Model after the epoch with the highest validation accuracy (earliest on ties).
    pub best_model: FaetModel<S>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Mean total loss (dropout off).
    pub loss: f64,
    pub predictions: Vec<Prediction>,
}

fn check_training_docs(train: &[TokenizedDoc], val: &[TokenizedDoc]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(FaetError::Data("training and validation sets must be non-empty".into()));
    }
    for (i, d) in train.iter().enumerate() {
        if d.label.is_none() {
            return Err(FaetError::Data(format!("training document {} has no label", i + 1)));
        }
        if d.emoji_tokens.is_empty() {
            return Err(FaetError::Data(format!("training document {} has no emoji", i + 1)));
        }
    }
    Ok(())
}

/// Trains a fresh model on `train`, reporting each epoch to `on_epoch`.
///
/// Everything random (initialisation, batch order, dropout masks) derives
/// from `config.seed`, so equal inputs give bitwise-equal results.
pub fn train<S: Scalar>(
    train: &[TokenizedDoc],
    val: &[TokenizedDoc],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    check_training_docs(train, val)?;
    let vocab = build_vocab(train, config.min_count);
    let mut model = FaetModel::<S>::new(config.clone(), vocab)?;
    let loss_cfg = model.loss_config();
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    let mut dropout = Dropout::new(config.dropout, derive_seed(config.seed, DROPOUT_STREAM));
    let shuffle_seed = derive_seed(config.seed, SHUFFLE_STREAM);

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, FaetModel<S>)> = None;
    for epoch in 1..=config.epochs {
        let batches = make_batches(
            train,
            &model.vocab,
            config.batch_size,
            config.max_len,
            derive_seed(shuffle_seed, epoch as u64),
        )?;
        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let mut d = (config.dropout > 0.0).then_some(&mut dropout);
            let loss = model.net.batch_loss(&mut g, &bound, batch, &loss_cfg, &mut d)?;
            let value = g.value(loss.total).item().as_f64();
            if !value.is_finite() {
                return Err(FaetError::Numeric(format!(
                    "loss is {value} at epoch {epoch}, batch {b}"
                )));
            }
            g.backward(loss.total)?;
            model.params.collect_grads(&g, &bound);
            drop(g);
            if let Some(p) = model.params.iter().find(|p| !p.grad.is_finite()) {
                return Err(FaetError::Numeric(format!(
                    "non-finite gradient for {} at epoch {epoch}, batch {b}",
                    p.name
                )));
            }
            adam.step_store(&mut model.params)?;
            loss_sum += value * batch.len() as f64;
        }
        let eval = evaluate(&model, val)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: eval.loss,
            val_acc: eval.report.accuracy,
        };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().map_or(true, |(acc, _, _)| entry.val_acc > *acc) {
            best = Some((entry.val_acc, epoch, model.clone()));
        }
    }
    model.params.zero_grads();
    let (best_epoch, mut best_model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model.clone()),
    };
    best_model.params.zero_grads();
    Ok(TrainOutcome {
        final_model: model,
        best_model,
        best_epoch,
        log,
    })
}

/// Scores labeled documents with dropout off. Parameters are not touched.
pub fn evaluate<S: Scalar>(model: &FaetModel<S>, docs: &[TokenizedDoc]) -> Result<Evaluation> {
    if docs.is_empty() {
        return Err(FaetError::Data("no documents to evaluate".into()));
    }
    let mut predictions = Vec::with_capacity(docs.len());
    let mut loss_sum = 0.0;
    for batch in make_ordered_batches(docs, &model.vocab, model.config.batch_size, model.config.max_len)? {
        let (preds, loss) = model.score_batch(&batch)?;
        loss_sum += loss * batch.len() as f64;
        predictions.extend(preds);
    }
    let pairs = predictions.iter().zip(docs).map(|(p, d)| (p.label, d.label.unwrap_or(0)));
    Ok(Evaluation {
        report: MetricsReport::from_pairs(pairs)?,
        loss: loss_sum / docs.len() as f64,
        predictions,
    })
}

/// Predictions for unlabeled documents.
pub fn predict<S: Scalar>(model: &FaetModel<S>, docs: &[TokenizedDoc]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(docs.len());
    for batch in make_ordered_batches(docs, &model.vocab, model.config.batch_size, model.config.max_len)? {
        out.extend(model.predict_batch(&batch)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub test: MetricsReport,
}

/// How often the two models are right on the same documents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Agreement {
    pub both_correct: usize,
    pub faet_only: usize,
    pub aet_only: usize,
    pub both_wrong: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExampleRow {
    pub text: String,
    pub emojis: Vec<String>,
    pub label: Label,
    pub faet: Label,
    pub aet: Label,
    pub faet_positive: f64,
    pub aet_positive: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub faet: VariantResult,
    pub aet: VariantResult,
    pub agreement: Agreement,
    pub examples: Vec<ExampleRow>,
}

impl AblationReport {
    /// Plain-text comparison table: one row per model.
    pub fn table(&self) -> String {
        let mut s = format!("{:<8} {:>9} {:>9} {:>9} {:>9}\n", "model", "precision", "recall", "f1", "accuracy");
        for r in [&self.faet, &self.aet] {
            let m = &r.test;
            s.push_str(&format!(
                "{:<8} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
                r.variant.name().to_uppercase(),
                m.positive.precision,
                m.positive.recall,
                m.positive.f1,
                m.accuracy
            ));
        }
        let a = &self.agreement;
        s.push_str(&format!(
            "\nagreement: both correct {}, FAET only {}, AET only {}, both wrong {}\n",
            a.both_correct, a.faet_only, a.aet_only, a.both_wrong
        ));
        s
    }
}

pub struct Ablation<S> {
    pub report: AblationReport,
    pub faet: TrainOutcome<S>,
    pub aet: TrainOutcome<S>,
}

/// Trains both variants from the same seed and data, then compares them on `test`.
pub fn ablate<S: Scalar>(
    train_docs: &[TokenizedDoc],
    val: &[TokenizedDoc],
    test: &[TokenizedDoc],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(Variant, &EpochLog),
) -> Result<Ablation<S>> {
    let run = |variant: Variant, on_epoch: &mut dyn FnMut(Variant, &EpochLog)| -> Result<(TrainOutcome<S>, Evaluation)> {
        let cfg = TrainConfig {
            variant,
            ..config.clone()
        };
        let outcome = train::<S>(train_docs, val, &cfg, |e| on_epoch(variant, e))?;
        let eval = evaluate(&outcome.best_model, test)?;
        Ok((outcome, eval))
    };
    let (faet, faet_eval) = run(Variant::Faet, &mut on_epoch)?;
    let (aet, aet_eval) = run(Variant::Aet, &mut on_epoch)?;

    let mut agreement = Agreement::default();
    let mut examples = Vec::with_capacity(test.len());
    for ((d, f), a) in test.iter().zip(&faet_eval.predictions).zip(&aet_eval.predictions) {
        let label = d.label.unwrap_or(0);
        match (f.label == label, a.label == label) {
            (true, true) => agreement.both_correct += 1,
            (true, false) => agreement.faet_only += 1,
            (false, true) => agreement.aet_only += 1,
            (false, false) => agreement.both_wrong += 1,
        }
        examples.push(ExampleRow {
            text: d.text_key(),
            emojis: d.emoji_tokens.clone(),
            label,
            faet: f.label,
            aet: a.label,
            faet_positive: f.probs[1],
            aet_positive: a.probs[1],
        });
    }
    let result = |variant, o: &TrainOutcome<S>, e: Evaluation| VariantResult {
        variant,
        best_epoch: o.best_epoch,
        log: o.log.clone(),
        test: e.report,
    };
    Ok(Ablation {
        report: AblationReport {
            faet: result(Variant::Faet, &faet, faet_eval),
            aet: result(Variant::Aet, &aet, aet_eval),
            agreement,
            examples,
        },
        faet,
        aet,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::overfit_corpus;

    fn small() -> TrainConfig {
        TrainConfig {
            d: 4,
            d_w: 4,
            n_filters: 4,
            batch_size: 8,
            epochs: 3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn deterministic_runs() {
        let docs = overfit_corpus(24, 2).unwrap();
        let a = train::<f64>(&docs, &docs[..8], &small(), |_| {}).unwrap();
        let b = train::<f64>(&docs, &docs[..8], &small(), |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.final_model, b.final_model);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let docs = overfit_corpus(16, 2).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            dropout: 0.0,
            ..small()
        };
        let out = train::<f64>(&docs, &docs, &cfg, |_| {}).unwrap();
        let fresh = FaetModel::<f64>::new(cfg, out.final_model.vocab.clone()).unwrap();
        let values = |m: &FaetModel<f64>| m.params.iter().map(|p| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(values(&out.final_model), values(&fresh));
        // Batch composition changes between epochs, so the train mean only agrees up to rounding.
        assert!(out.log.windows(2).all(|w| (w[0].train_loss - w[1].train_loss).abs() < 1e-12));
        assert!(out.log.windows(2).all(|w| w[0].val_loss == w[1].val_loss));
    }

    #[test]
    fn best_epoch_prefers_earliest_tie() {
        let docs = overfit_corpus(16, 2).unwrap();
        let cfg = TrainConfig { lr: 0.0, ..small() };
        let out = train::<f64>(&docs, &docs, &cfg, |_| {}).unwrap();
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let docs = overfit_corpus(16, 2).unwrap();
        assert!(train::<f64>(&docs, &[], &small(), |_| {}).is_err());
        let mut no_emoji = docs.clone();
        no_emoji[3].emoji_tokens.clear();
        assert!(train::<f64>(&no_emoji, &docs, &small(), |_| {}).is_err());
        let model = FaetModel::<f64>::new(small(), build_vocab(&docs, 1)).unwrap();
        assert!(evaluate(&model, &[]).is_err());
    }

    #[test]
    fn exploding_learning_rate_reports_batch() {
        let docs = overfit_corpus(16, 2).unwrap();
        let cfg = TrainConfig {
            lr: 1e300,
            epochs: 4,
            ..small()
        };
        if let Err(e) = train::<f64>(&docs, &docs, &cfg, |_| {}) {
            assert!(matches!(e, FaetError::Numeric(_)));
            assert!(e.to_string().contains("batch"));
        }
    }
}
