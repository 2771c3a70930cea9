//! Zero-shot learning with prototype-guided curriculum weighting and
//! prototype refinement.

pub mod binio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod mapnet;
pub mod optim;
pub mod pcl;
pub mod pup;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use config::{AuxBranch, TrainConfig};
pub use data::{Corpus, Sample, SemanticSpace, Split};
pub use error::{Error, Result};
pub use eval::{Metrics, ModeMetrics};
pub use mapnet::{AttentionAxis, MapParams, PredictMode};
pub use pup::{NeighborSource, PrototypeStore};
pub use synth::{GroundTruth, SynthConfig, SynthCorpus};
pub use tensor::Tensor;
pub use trainer::{TrainOutcome, TrainState};
