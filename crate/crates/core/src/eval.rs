//! Conventional and generalized zero-shot evaluation.
//!
//! Accuracies are per-class averaged top-1 percentages. In the generalized
//! setting, unseen (`U`) and seen (`S`) accuracies are both measured against
//! all classes and summarized by their harmonic mean.

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::mapnet::{self, AttentionAxis, MapParams, PredictMode};
use crate::pup::PrototypeStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc_czsl: f64,
    pub acc_unseen: f64,
    pub acc_seen: f64,
    pub harmonic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ModeMetrics {
    Czsl { acc: f64 },
    Gzsl { unseen: f64, seen: f64, harmonic: f64 },
}

/// Mean over `classes` of per-class top-1 accuracy, in percent.
/// Classes without samples are excluded.
pub fn per_class_top1(predictions: &[usize], labels: &[usize], classes: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for &c in classes {
        let (mut n, mut hit) = (0usize, 0usize);
        for (&p, &y) in predictions.iter().zip(labels) {
            if y == c {
                n += 1;
                hit += usize::from(p == y);
            }
        }
        if n == 0 {
            log::warn!("class {c} has no evaluation samples; excluded from accuracy");
            continue;
        }
        total += hit as f64 / n as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Empty("evaluation class set"));
    }
    if let Some(&y) = labels.iter().find(|y| !classes.contains(y)) {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: classes.len(),
        });
    }
    Ok(100.0 * total / counted as f64)
}

/// `2US / (U + S)`, or 0 when both are 0.
pub fn harmonic_mean(unseen: f64, seen: f64) -> f64 {
    if unseen + seen == 0.0 {
        0.0
    } else {
        2.0 * unseen * seen / (unseen + seen)
    }
}

/// Scores any predictor over the corpus test splits.
///
/// `predict(sample_index, mode)` returns a global class id.
pub fn evaluate_predictor<F>(corpus: &Corpus, mode: PredictMode, mut predict: F) -> Result<ModeMetrics>
where
    F: FnMut(usize, PredictMode) -> Result<usize>,
{
    let seen: Vec<usize> = (0..corpus.seen_classes()).collect();
    let unseen: Vec<usize> = (corpus.seen_classes()..corpus.class_count()).collect();
    let mut score = |split: Split, classes: &[usize], what: &'static str| -> Result<f64> {
        let idx = corpus.indices(split);
        if idx.is_empty() {
            return Err(Error::Empty(what));
        }
        let mut preds = Vec::with_capacity(idx.len());
        for &i in &idx {
            preds.push(predict(i, mode)?);
        }
        let labels: Vec<usize> = idx.iter().map(|&i| corpus.samples()[i].class_id).collect();
        per_class_top1(&preds, &labels, classes)
    };
    match mode {
        PredictMode::Czsl => Ok(ModeMetrics::Czsl {
            acc: score(Split::TestUnseen, &unseen, "test_unseen split")?,
        }),
        PredictMode::Gzsl => {
            let u = score(Split::TestUnseen, &unseen, "test_unseen split")?;
            let s = score(Split::TestSeen, &seen, "test_seen split")?;
            Ok(ModeMetrics::Gzsl {
                unseen: u,
                seen: s,
                harmonic: harmonic_mean(u, s),
            })
        }
    }
}

/// Predictions from the mapping network against the store's current prototypes.
pub struct Evaluator<'a> {
    embeddings: Tensor,
    index_of: Vec<Option<usize>>,
    prototypes: &'a Tensor,
    seen_classes: usize,
}

impl<'a> Evaluator<'a> {
    /// Embeds every test sample of `corpus` once.
    pub fn new(
        theta: &MapParams,
        store: &'a PrototypeStore,
        corpus: &Corpus,
        attributes: &Tensor,
        axis: AttentionAxis,
    ) -> Result<Self> {
        let mut index_of = vec![None; corpus.len()];
        let mut feats = Vec::new();
        for (i, s) in corpus.samples().iter().enumerate() {
            if s.split != Split::TrainSeen {
                index_of[i] = Some(feats.len());
                feats.push(&s.features);
            }
        }
        if feats.is_empty() {
            return Err(Error::Empty("test split"));
        }
        let embeddings = mapnet::semantic_embeddings(theta, attributes, &feats, axis)?;
        Ok(Evaluator {
            embeddings,
            index_of,
            prototypes: store.current(),
            seen_classes: store.seen_classes(),
        })
    }

    pub fn predict(&self, sample: usize, mode: PredictMode) -> Result<usize> {
        let row = self.index_of[sample].ok_or(Error::Empty("embedding for a training sample"))?;
        mapnet::predict(self.embeddings.row(row), self.prototypes, self.seen_classes, mode)
    }

    pub fn evaluate(&self, corpus: &Corpus, mode: PredictMode) -> Result<ModeMetrics> {
        evaluate_predictor(corpus, mode, |i, m| self.predict(i, m))
    }

    pub fn evaluate_all(&self, corpus: &Corpus) -> Result<Metrics> {
        let ModeMetrics::Czsl { acc } = self.evaluate(corpus, PredictMode::Czsl)? else {
            unreachable!("czsl mode yields czsl metrics")
        };
        let ModeMetrics::Gzsl { unseen, seen, harmonic } = self.evaluate(corpus, PredictMode::Gzsl)? else {
            unreachable!("gzsl mode yields gzsl metrics")
        };
        Ok(Metrics {
            acc_czsl: acc,
            acc_unseen: unseen,
            acc_seen: seen,
            harmonic,
        })
    }
}

pub fn evaluate(
    theta: &MapParams,
    store: &PrototypeStore,
    corpus: &Corpus,
    attributes: &Tensor,
    mode: PredictMode,
    axis: AttentionAxis,
) -> Result<ModeMetrics> {
    Evaluator::new(theta, store, corpus, attributes, axis)?.evaluate(corpus, mode)
}

pub fn evaluate_all(
    theta: &MapParams,
    store: &PrototypeStore,
    corpus: &Corpus,
    attributes: &Tensor,
    axis: AttentionAxis,
) -> Result<Metrics> {
    Evaluator::new(theta, store, corpus, attributes, axis)?.evaluate_all(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_class_examples() {
        assert_eq!(per_class_top1(&[0, 1, 1], &[0, 1, 1], &[0, 1]).unwrap(), 100.0);
        // class 0: 1/1 correct, class 1: 0/3 correct
        assert_eq!(per_class_top1(&[0, 0, 0, 0], &[0, 1, 1, 1], &[0, 1]).unwrap(), 50.0);
        // class 2 has no samples and is skipped
        assert_eq!(per_class_top1(&[0, 1], &[0, 1], &[0, 1, 2]).unwrap(), 100.0);
        assert!(per_class_top1(&[0], &[0, 1], &[0, 1]).is_err());
        assert!(per_class_top1(&[], &[], &[0]).is_err());
    }

    #[test]
    fn harmonic_examples() {
        assert!((harmonic_mean(61.7, 85.3) - 71.6).abs() < 0.05);
        assert!((harmonic_mean(60.0, 49.2) - 54.1).abs() < 0.05);
        assert!((harmonic_mean(67.9, 73.1) - 70.4).abs() < 0.05);
        assert_eq!(harmonic_mean(50.0, 50.0), 50.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 80.0), 0.0);
    }
}
