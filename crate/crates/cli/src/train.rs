//! The `train` command: run manifest, metrics log, weight log and checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clzsl_core::checkpoint;
use clzsl_core::data::{self, Batch};
use clzsl_core::trainer::{self, EpochRecord, StepDiagnostics, TrainObserver, TrainState};
use clzsl_core::{Metrics, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const WEIGHTS_FILE: &str = "weights.csv";
/// Wall-clock timings live apart from the metrics log so that it stays byte-stable.
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const RUN_FORMAT: &str = "clzsl-run";
/// Sidecar written by `synth` next to a generated corpus.
pub const SYNTH_CONFIG_FILE: &str = "synth_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOutputs {
    pub metrics: String,
    pub weights: Option<String>,
    pub timing: String,
    pub checkpoints: String,
    pub checkpoint_every: usize,
}

/// Everything needed to replay a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub code_version: String,
    pub seed: u64,
    pub corpus: PathBuf,
    pub config: TrainConfig,
    /// Generator settings, when the corpus came from `synth`.
    pub synth: Option<SynthConfig>,
    pub outputs: RunOutputs,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::ConfigSyntax {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if manifest.format != RUN_FORMAT {
            return Err(CliError::ConfigField {
                path: path.to_path_buf(),
                message: format!("format {:?} is not {RUN_FORMAT:?}", manifest.format),
            });
        }
        Ok(manifest)
    }
}

pub fn code_version() -> String {
    format!("clzsl {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone)]
pub struct TrainRequest {
    pub corpus: PathBuf,
    pub config: TrainConfig,
    pub out: PathBuf,
    pub force: bool,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub log_weights: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub checkpoint: PathBuf,
    pub metrics: Option<Metrics>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}")
}

fn read_synth_sidecar(corpus: &Path) -> Result<Option<SynthConfig>> {
    let dir = if corpus.is_dir() { corpus } else { corpus.parent().unwrap_or(Path::new(".")) };
    let path = dir.join(SYNTH_CONFIG_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Core(clzsl_core::Error::Json { path, source: e }))
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn core_io(path: &Path, e: impl Into<std::io::Error>) -> clzsl_core::Error {
    clzsl_core::Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

struct RunLog {
    out: PathBuf,
    config: TrainConfig,
    every: usize,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    weights: Option<csv::Writer<BufWriter<File>>>,
    started: Instant,
    last_saved: Option<usize>,
}

#[derive(Serialize)]
struct WeightRecord {
    epoch: usize,
    batch: usize,
    sample: usize,
    class_id: usize,
    loss: f64,
    omega: f64,
}

impl RunLog {
    fn save(&mut self, state: &TrainState) -> clzsl_core::Result<PathBuf> {
        let dir = self.out.join(CHECKPOINT_DIR).join(checkpoint_name(state.epochs_done));
        checkpoint::save(&dir, state, &self.config)?;
        self.last_saved = Some(state.epochs_done);
        Ok(dir)
    }
}

impl TrainObserver for RunLog {
    fn on_step(&mut self, epoch: usize, batch_index: usize, batch: &Batch, diag: &StepDiagnostics) -> clzsl_core::Result<()> {
        let Some(w) = self.weights.as_mut() else {
            return Ok(());
        };
        for (i, &sample) in batch.indices.iter().enumerate() {
            w.serialize(WeightRecord {
                epoch,
                batch: batch_index,
                sample,
                class_id: batch.class_ids[i],
                loss: diag.losses[i],
                omega: diag.weights[i],
            })
            .map_err(|e| core_io(&self.out.join(WEIGHTS_FILE), e))?;
        }
        Ok(())
    }

    fn on_epoch(&mut self, state: &TrainState, record: &EpochRecord) -> clzsl_core::Result<()> {
        let line = serde_json::to_string(record).expect("epoch record serializes");
        writeln!(self.metrics, "{line}").map_err(|e| core_io(&self.out.join(METRICS_FILE), e))?;
        self.metrics.flush().map_err(|e| core_io(&self.out.join(METRICS_FILE), e))?;
        let timing = serde_json::json!({
            "epoch": record.epoch,
            "elapsed_secs": self.started.elapsed().as_secs_f64(),
        });
        writeln!(self.timing, "{timing}").map_err(|e| core_io(&self.out.join(TIMING_FILE), e))?;
        if let Some(w) = self.weights.as_mut() {
            w.flush().map_err(|e| core_io(&self.out.join(WEIGHTS_FILE), e))?;
        }
        if self.every > 0 && record.epoch.is_multiple_of(self.every) {
            self.save(state)?;
        }
        log::info!(
            "epoch {}: loss {:.4} threshold {:.4}{}",
            record.epoch,
            record.loss_theta,
            record.threshold,
            record
                .metrics
                .map(|m| format!(" U {:.1} S {:.1} H {:.1}", m.acc_unseen, m.acc_seen, m.harmonic))
                .unwrap_or_default()
        );
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// Writes the run manifest, then trains and logs.
pub fn train(req: &TrainRequest) -> Result<TrainSummary> {
    let (corpus, space) = data::load_corpus(&req.corpus)?;
    req.config.validate()?;
    let manifest_path = req.out.join(RUN_MANIFEST_FILE);
    if manifest_path.exists() && !req.force {
        return Err(CliError::Exists { path: manifest_path });
    }
    fs::create_dir_all(&req.out).map_err(|e| CliError::io(&req.out, e))?;
    let corpus_path = fs::canonicalize(&req.corpus).map_err(|e| CliError::io(&req.corpus, e))?;
    let manifest = RunManifest {
        format: RUN_FORMAT.into(),
        code_version: code_version(),
        seed: req.config.seed,
        corpus: corpus_path,
        config: req.config.clone(),
        synth: read_synth_sidecar(&req.corpus)?,
        outputs: RunOutputs {
            metrics: METRICS_FILE.into(),
            weights: req.log_weights.then(|| WEIGHTS_FILE.into()),
            timing: TIMING_FILE.into(),
            checkpoints: CHECKPOINT_DIR.into(),
            checkpoint_every: req.checkpoint_every,
        },
    };
    write_json_file(&manifest_path, &manifest)?;

    let ckpt_root = req.out.join(CHECKPOINT_DIR);
    if ckpt_root.exists() {
        fs::remove_dir_all(&ckpt_root).map_err(|e| CliError::io(&ckpt_root, e))?;
    }
    let weights = if req.log_weights {
        Some(csv::Writer::from_writer(create(&req.out.join(WEIGHTS_FILE))?))
    } else {
        let stale = req.out.join(WEIGHTS_FILE);
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| CliError::io(&stale, e))?;
        }
        None
    };
    let mut log = RunLog {
        out: req.out.clone(),
        config: req.config.clone(),
        every: req.checkpoint_every,
        metrics: create(&req.out.join(METRICS_FILE))?,
        timing: create(&req.out.join(TIMING_FILE))?,
        weights,
        started: Instant::now(),
        last_saved: None,
    };
    let outcome = trainer::run_with(&corpus, &space, &req.config, &mut log)?;
    let checkpoint = if log.last_saved == Some(outcome.state.epochs_done) {
        ckpt_root.join(checkpoint_name(outcome.state.epochs_done))
    } else {
        log.save(&outcome.state)?
    };
    Ok(TrainSummary {
        epochs: outcome.state.epochs_done,
        checkpoint,
        metrics: outcome.history.last().and_then(|r| r.metrics),
    })
}

/// Re-runs a manifest's configuration on its corpus, writing into `out`.
pub fn replay(manifest_path: &Path, out: &Path, force: bool) -> Result<TrainSummary> {
    let m = RunManifest::read(manifest_path)?;
    if m.seed != m.config.seed {
        return Err(CliError::ConfigField {
            path: manifest_path.to_path_buf(),
            message: format!("seed {} disagrees with config.seed {}", m.seed, m.config.seed),
        });
    }
    if m.code_version != code_version() {
        log::warn!("manifest was written by {}, replaying with {}", m.code_version, code_version());
    }
    train(&TrainRequest {
        corpus: m.corpus,
        config: m.config,
        out: out.to_path_buf(),
        force,
        checkpoint_every: m.outputs.checkpoint_every,
        log_weights: m.outputs.weights.is_some(),
    })
}
