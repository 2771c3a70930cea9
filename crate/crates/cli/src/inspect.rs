//! Ranks logged sample weights per epoch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct WeightRow {
    pub epoch: usize,
    pub batch: usize,
    pub sample: usize,
    pub class_id: usize,
    pub loss: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub row: WeightRow,
    /// `ω·b`: 1 is the uniform weight of the sample's batch.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub samples: usize,
    /// Every batch of the epoch carried uniform weights.
    pub uniform: bool,
    pub top: Vec<Ranked>,
    pub bottom: Vec<Ranked>,
}

pub fn read_weights(path: &Path) -> Result<Vec<WeightRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<WeightRow>().enumerate() {
        let row = rec.map_err(|e| CliError::MalformedWeights {
            path: path.to_path_buf(),
            row: i + 1,
            message: e.to_string(),
        })?;
        if !(row.omega.is_finite() && row.loss.is_finite()) {
            return Err(CliError::MalformedWeights {
                path: path.to_path_buf(),
                row: i + 1,
                message: "non-finite loss or omega".into(),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

fn uniform(omegas: &[f64]) -> bool {
    let (lo, hi) = omegas
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| (lo.min(w), hi.max(w)));
    hi - lo <= 1e-12 * hi.abs().max(f64::MIN_POSITIVE)
}

/// Top `top` and bottom `bottom` samples of each epoch by `ω·b`, so that a
/// short trailing batch does not outrank full ones. Ties go to the earlier
/// (batch, sample) in both lists.
pub fn rank(rows: &[WeightRow], top: usize, bottom: usize) -> Vec<EpochReport> {
    let mut epochs: BTreeMap<usize, BTreeMap<usize, Vec<&WeightRow>>> = BTreeMap::new();
    for r in rows {
        epochs.entry(r.epoch).or_default().entry(r.batch).or_default().push(r);
    }
    epochs
        .into_iter()
        .map(|(epoch, batches)| {
            let mut all: Vec<Ranked> = Vec::new();
            let mut is_uniform = true;
            for members in batches.values() {
                let omegas: Vec<f64> = members.iter().map(|r| r.omega).collect();
                is_uniform &= uniform(&omegas);
                all.extend(members.iter().map(|r| Ranked {
                    row: (*r).clone(),
                    relative: r.omega * members.len() as f64,
                }));
            }
            let key = |r: &Ranked| (r.row.batch, r.row.sample);
            let mut desc = all.clone();
            desc.sort_by(|a, b| b.relative.total_cmp(&a.relative).then(key(a).cmp(&key(b))));
            let mut asc = all;
            asc.sort_by(|a, b| a.relative.total_cmp(&b.relative).then(key(a).cmp(&key(b))));
            EpochReport {
                epoch,
                samples: desc.len(),
                uniform: is_uniform,
                top: desc.into_iter().take(top).collect(),
                bottom: asc.into_iter().take(bottom).collect(),
            }
        })
        .collect()
}

pub fn render(reports: &[EpochReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = write!(out, "epoch {}  samples {}", r.epoch, r.samples);
        out.push_str(if r.uniform { "  no differentiation\n" } else { "\n" });
        for (kind, list) in [("top", &r.top), ("bottom", &r.bottom)] {
            for (i, e) in list.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "  {kind:<6} {:>3}  sample {:>6}  class {:>4}  batch {:>4}  loss {:>10.6}  omega {:.6e}  x{:.3}",
                    i + 1,
                    e.row.sample,
                    e.row.class_id,
                    e.row.batch,
                    e.row.loss,
                    e.row.omega,
                    e.relative
                );
            }
        }
    }
    out
}
