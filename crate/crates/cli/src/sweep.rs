//! Grid sweeps over `TrainConfig` fields.
//!
//! The grid file is a JSON object mapping field names to arrays of values.
//! Points enumerate the cartesian product with the last field varying fastest,
//! in file order. Point `i` trains with seed `base_seed + i`.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clzsl_core::data;
use clzsl_core::trainer;
use clzsl_core::{Corpus, Error, SemanticSpace, TrainConfig};
use serde_json::{Map, Value};

use crate::config::read_object;
use crate::error::{CliError, Result};

/// Fixed column order of the sweep CSV.
pub const COLUMNS: [&str; 7] = ["index", "params", "seed", "acc_czsl", "acc_unseen", "acc_seen", "harmonic"];

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub params: Map<String, Value>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    pub params: String,
    pub seed: u64,
    pub acc_czsl: f64,
    pub acc_unseen: f64,
    pub acc_seen: f64,
    pub harmonic: f64,
}

/// Expands `grid` over `base`. An empty grid, or any empty axis, yields no points.
pub fn expand(grid: &Map<String, Value>, base: &TrainConfig, source: &Path) -> Result<Vec<GridPoint>> {
    let field_err = |message: String| CliError::ConfigField {
        path: source.to_path_buf(),
        message,
    };
    let known = serde_json::to_value(base).expect("config serializes");
    let known = known.as_object().expect("config is an object");
    let mut axes: Vec<(&String, &Vec<Value>)> = Vec::new();
    for (key, values) in grid {
        if !known.contains_key(key) {
            return Err(field_err(format!("unknown config field {key:?} in grid")));
        }
        let Value::Array(values) = values else {
            return Err(field_err(format!("grid field {key:?} must be an array of values")));
        };
        axes.push((key, values));
    }
    if axes.is_empty() || axes.iter().any(|(_, v)| v.is_empty()) {
        return Ok(Vec::new());
    }
    let total: usize = axes.iter().map(|(_, v)| v.len()).product();
    let mut points = Vec::with_capacity(total);
    for index in 0..total {
        let mut rem = index;
        let mut picks = vec![0usize; axes.len()];
        for (slot, (_, values)) in picks.iter_mut().zip(&axes).rev() {
            *slot = rem % values.len();
            rem /= values.len();
        }
        let mut params = Map::new();
        let mut config = base.clone();
        for ((key, values), &pick) in axes.iter().zip(&picks) {
            let value = values[pick].clone();
            config
                .set_field(key, value.clone())
                .map_err(|e| field_err(format!("grid point {index}: {e}")))?;
            params.insert((*key).clone(), value);
        }
        config.seed = config.seed.wrapping_add(index as u64);
        config
            .validate()
            .map_err(|e| field_err(format!("grid point {index}: {e}")))?;
        points.push(GridPoint { index, params, config });
    }
    Ok(points)
}

pub fn run_point(point: &GridPoint, corpus: &Corpus, space: &SemanticSpace) -> Result<SweepRow> {
    let outcome = trainer::run(corpus, space, &point.config)?;
    let metrics = outcome
        .history
        .last()
        .and_then(|r| r.metrics)
        .ok_or(Error::Empty("test split metrics of the final epoch"))?;
    Ok(SweepRow {
        index: point.index,
        params: Value::Object(point.params.clone()).to_string(),
        seed: point.config.seed,
        acc_czsl: metrics.acc_czsl,
        acc_unseen: metrics.acc_unseen,
        acc_seen: metrics.acc_seen,
        harmonic: metrics.harmonic,
    })
}

/// Runs every point on `jobs` threads; rows come back in index order.
pub fn run_points(points: &[GridPoint], corpus: &Corpus, space: &SemanticSpace, jobs: usize) -> Result<Vec<SweepRow>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..points.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, points.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(point) = points.get(i) else { break };
                let row = run_point(point, corpus, space);
                if let Ok(r) = &row {
                    log::info!("point {}: {} H {:.2}", r.index, r.params, r.harmonic);
                }
                slots.lock().expect("no worker panicked")[i] = Some(row);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every point ran"))
        .collect()
}

pub fn write_csv<W: Write>(out: W, rows: &[SweepRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record([
            r.index.to_string(),
            r.params.clone(),
            r.seed.to_string(),
            r.acc_czsl.to_string(),
            r.acc_unseen.to_string(),
            r.acc_seen.to_string(),
            r.harmonic.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn sweep(corpus_path: &Path, grid_path: &Path, base: &TrainConfig, jobs: usize) -> Result<Vec<SweepRow>> {
    let (grid, _) = read_object(grid_path)?;
    let points = expand(&grid, base, grid_path)?;
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let (corpus, space) = data::load_corpus(corpus_path)?;
    run_points(&points, &corpus, &space, jobs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(text: &str) -> Map<String, Value> {
        serde_json::from_str(text).unwrap()
    }

    #[test]
    fn product_runs_in_file_order_with_offset_seeds() {
        let base = TrainConfig { seed: 10, ..Default::default() };
        let pts = expand(&grid(r#"{"temperature": [1, 10], "beta": [0.8, 0.9, 0.995]}"#), &base, Path::new("g")).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1].params.get("beta"), Some(&Value::from(0.9)));
        assert_eq!(pts[3].config.temperature, 10.0);
        assert_eq!(pts[3].config.beta, 0.8);
        assert_eq!(pts.iter().map(|p| p.config.seed).collect::<Vec<_>>(), vec![10, 11, 12, 13, 14, 15]);
    }

    #[test]
    fn empty_grid_has_no_points() {
        assert!(expand(&grid("{}"), &TrainConfig::default(), Path::new("g")).unwrap().is_empty());
        assert!(expand(&grid(r#"{"beta": []}"#), &TrainConfig::default(), Path::new("g")).unwrap().is_empty());
    }

    #[test]
    fn unknown_field_is_a_config_error() {
        let err = expand(&grid(r#"{"tau": [1]}"#), &TrainConfig::default(), Path::new("g")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("tau"));
        let err = expand(&grid(r#"{"beta": [2.0]}"#), &TrainConfig::default(), Path::new("g")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn header_only_csv_for_no_rows() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "index,params,seed,acc_czsl,acc_unseen,acc_seen,harmonic\n");
    }
}
