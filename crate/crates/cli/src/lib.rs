//! `clzsl` command-line front end.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data or
//! checkpoint integrity error, 3 non-finite loss during training.

pub mod config;
pub mod error;
pub mod eval;
pub mod inspect;
pub mod sweep;
pub mod train;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use clzsl_core::synth;
use clzsl_core::{PredictMode, SynthConfig};

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "clzsl", version, about = "Curriculum-weighted zero-shot learning on attribute prototypes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with ground-truth prototypes.
    Synth(SynthArgs),
    /// Train a model and log metrics, weights and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus (JSON lines on stdout).
    Eval(EvalArgs),
    /// Train once per point of a parameter grid and write a CSV.
    Sweep(SweepArgs),
    /// Rank logged sample weights per epoch.
    InspectWeights(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator config; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output corpus directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one generator field, e.g. `--set instance_dropout_rate=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Overwrite an existing corpus.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config: TrainConfig fields plus an optional "preset".
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named profile: cub-paper, sun-paper, awa2-paper or synthetic.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override one config field, e.g. `--set temperature=30`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Uniform sample weights.
    #[arg(long)]
    pub no_pcl: bool,
    /// Keep prototypes fixed.
    #[arg(long)]
    pub no_pup: bool,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<config::TrainOverrides> {
        Ok(config::TrainOverrides {
            config_file: self.config.clone(),
            preset: self.preset.clone(),
            sets: self
                .sets
                .iter()
                .map(|s| config::parse_assignment(s))
                .collect::<Result<_>>()?,
            seed: self.seed,
            epochs: self.epochs,
            no_pcl: self.no_pcl,
            no_pup: self.no_pup,
        })
    }

    fn is_empty(&self) -> bool {
        self.config.is_none()
            && self.preset.is_none()
            && self.sets.is_empty()
            && self.seed.is_none()
            && self.epochs.is_none()
            && !self.no_pcl
            && !self.no_pup
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory or manifest file.
    #[arg(long, required_unless_present = "replay")]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Re-run the configuration and corpus recorded in a run manifest.
    #[arg(long, conflicts_with = "corpus")]
    pub replay: Option<PathBuf>,
    /// Checkpoint every N epochs; 0 keeps only the final checkpoint.
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: usize,
    /// Skip the per-sample weight log.
    #[arg(long)]
    pub no_weight_log: bool,
    /// Overwrite an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Czsl,
    Gzsl,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "gzsl")]
    pub mode: ModeArg,
    /// Emit both czsl and gzsl results.
    #[arg(long)]
    pub both: bool,
    /// Print a table instead of JSON lines.
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSON object mapping config fields to arrays of values.
    #[arg(long)]
    pub grid: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// weights.csv of a training run.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long, default_value_t = 5)]
    pub bottom: usize,
}

/// Parses `args` (program name first), executes, and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io("<stdout>", e))
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth(a) => {
            let config = synth_config(&a)?;
            let dir = cmd_synth(&config, &a.out, a.force)?;
            write_out(out, &format!("{}\n", serde_json::json!({ "corpus": dir, "seed": config.seed })))
        }
        Command::Train(a) => {
            let summary = if let Some(manifest) = &a.replay {
                if !a.config.is_empty() {
                    return Err(CliError::Usage("--replay takes the configuration from the manifest".into()));
                }
                train::replay(manifest, &a.out, a.force)?
            } else {
                let corpus = a.corpus.clone().expect("clap requires --corpus without --replay");
                train::train(&train::TrainRequest {
                    corpus,
                    config: config::resolve_train_config(&a.config.overrides()?)?,
                    out: a.out.clone(),
                    force: a.force,
                    checkpoint_every: a.checkpoint_every,
                    log_weights: !a.no_weight_log,
                })?
            };
            let line = serde_json::to_string(&summary).expect("summary serializes");
            write_out(out, &format!("{line}\n"))
        }
        Command::Eval(a) => {
            let modes = if a.both {
                vec![PredictMode::Czsl, PredictMode::Gzsl]
            } else {
                vec![match a.mode {
                    ModeArg::Czsl => PredictMode::Czsl,
                    ModeArg::Gzsl => PredictMode::Gzsl,
                }]
            };
            let results = eval::evaluate(&a.checkpoint, &a.corpus, &modes)?;
            if a.table {
                return write_out(out, &eval::table(&results));
            }
            for r in &results {
                let line = serde_json::to_string(r).expect("metrics serialize");
                write_out(out, &format!("{line}\n"))?;
            }
            Ok(())
        }
        Command::Sweep(a) => {
            let base = config::resolve_train_config(&a.config.overrides()?)?;
            let rows = sweep::sweep(&a.corpus, &a.grid, &base, a.jobs)?;
            match &a.out {
                Some(path) => {
                    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
                    sweep::write_csv(std::io::BufWriter::new(file), &rows).map_err(|source| CliError::Csv {
                        path: path.clone(),
                        source,
                    })
                }
                None => sweep::write_csv(out, &rows).map_err(|source| CliError::Csv {
                    path: "<stdout>".into(),
                    source,
                }),
            }
        }
        Command::InspectWeights(a) => {
            let rows = inspect::read_weights(&a.weights)?;
            write_out(out, &inspect::render(&inspect::rank(&rows, a.top, a.bottom)))
        }
    }
}

fn synth_config(a: &SynthArgs) -> Result<SynthConfig> {
    let mut config = match &a.config {
        Some(path) => config::read_synth_config(path)?,
        None => SynthConfig::default(),
    };
    if !a.sets.is_empty() {
        let mut value = serde_json::to_value(&config).expect("synth config serializes");
        let map = value.as_object_mut().expect("synth config is an object");
        for s in &a.sets {
            let (key, v) = config::parse_assignment(s)?;
            if !map.contains_key(&key) {
                return Err(CliError::Usage(format!("--set: unknown generator field {key:?}")));
            }
            map.insert(key, v);
        }
        config = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("--set: {e}")))?;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// Generates and writes a corpus, plus the generator config next to it.
pub fn cmd_synth(config: &SynthConfig, out: &Path, force: bool) -> Result<PathBuf> {
    let manifest = out.join(clzsl_core::data::MANIFEST_FILE);
    if manifest.exists() && !force {
        return Err(CliError::Exists { path: out.to_path_buf() });
    }
    let generated = synth::generate(config)?;
    synth::write(out, &generated)?;
    let path = out.join(train::SYNTH_CONFIG_FILE);
    let mut text = serde_json::to_string_pretty(config).expect("synth config serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(out.to_path_buf())
}
