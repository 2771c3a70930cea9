use std::path::Path;

use clzsl_core::checkpoint;
use clzsl_core::data;
use clzsl_core::eval::Evaluator;
use clzsl_core::{Error, ModeMetrics, PredictMode};

use crate::error::Result;

/// Evaluates a checkpoint on a corpus's test splits, one result per mode.
pub fn evaluate(checkpoint_path: &Path, corpus_path: &Path, modes: &[PredictMode]) -> Result<Vec<ModeMetrics>> {
    let (state, config) = checkpoint::load(checkpoint_path)?;
    let (corpus, space) = data::load_corpus(corpus_path)?;
    if state.store.class_count() != corpus.class_count() || state.store.seen_classes() != corpus.seen_classes() {
        return Err(Error::Integrity(format!(
            "checkpoint covers {} classes ({} seen), corpus has {} ({} seen)",
            state.store.class_count(),
            state.store.seen_classes(),
            corpus.class_count(),
            corpus.seen_classes()
        ))
        .into());
    }
    if state.theta.attribute_dim() != space.attribute_dim() || state.theta.feature_dim() != corpus.feature_dim() {
        return Err(Error::Integrity(format!(
            "checkpoint maps d_a={} to d={}, corpus has d_a={} and d={}",
            state.theta.attribute_dim(),
            state.theta.feature_dim(),
            space.attribute_dim(),
            corpus.feature_dim()
        ))
        .into());
    }
    let evaluator = Evaluator::new(&state.theta, &state.store, &corpus, space.attributes(), config.attention_axis)?;
    modes
        .iter()
        .map(|&m| evaluator.evaluate(&corpus, m).map_err(Into::into))
        .collect()
}

/// Fixed-width table, percentages to one decimal.
pub fn table(results: &[ModeMetrics]) -> String {
    let mut out = format!("{:<6} {:>7} {:>7} {:>7} {:>7}\n", "mode", "acc", "U", "S", "H");
    for r in results {
        let line = match *r {
            ModeMetrics::Czsl { acc } => format!("{:<6} {:>7.1} {:>7} {:>7} {:>7}\n", "czsl", acc, "-", "-", "-"),
            ModeMetrics::Gzsl { unseen, seen, harmonic } => {
                format!("{:<6} {:>7} {:>7.1} {:>7.1} {:>7.1}\n", "gzsl", "-", unseen, seen, harmonic)
            }
        };
        out.push_str(&line);
    }
    out
}
