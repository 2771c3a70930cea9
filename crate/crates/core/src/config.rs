//! Training configuration and named presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapnet::AttentionAxis;
use crate::pcl::PclDims;
use crate::pup::NeighborSource;

/// Source of the embeddings accumulated for prototype updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxBranch {
    /// Reuse the main network's embeddings from the weighted step.
    #[default]
    Shared,
    /// A separate copy of the mapping network, trained with unweighted CE.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// RMSprop learning rate for the mapping network.
    pub lr_theta: f64,
    /// Adam learning rate for the weighting network.
    pub lr_phi: f64,
    /// Weight of the self-calibration loss.
    pub eta: f64,
    pub temperature: f64,
    /// Percentile `p` of the loss threshold.
    pub percentile: f64,
    /// EMA decay `κ` of the loss threshold.
    pub decay: f64,
    /// Prototype trade-off `β`.
    pub beta: f64,
    pub k_neighbors: usize,
    /// First (1-based) epoch after which prototypes are refreshed.
    pub update_start_epoch: usize,
    pub seed: u64,
    pub use_pcl: bool,
    pub use_pup: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub attention_axis: AttentionAxis,
    pub neighbor_source: NeighborSource,
    pub aux_branch: AuxBranch,
    pub normalize_prototypes: bool,
    pub pcl_dims: PclDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 50,
            lr_theta: 5e-4,
            lr_phi: 1e-2,
            eta: 0.08,
            temperature: 10.0,
            percentile: 0.8,
            decay: 0.9,
            beta: 0.995,
            k_neighbors: 10,
            update_start_epoch: 15,
            seed: 0,
            use_pcl: true,
            use_pup: true,
            clip_norm: Some(10.0),
            attention_axis: AttentionAxis::Regions,
            neighbor_source: NeighborSource::EpochMeans,
            aux_branch: AuxBranch::Shared,
            normalize_prototypes: false,
            pcl_dims: PclDims::default(),
        }
    }
}

pub const PRESETS: [&str; 4] = ["awa2-paper", "sun-paper", "cub-paper", "synthetic"];

impl TrainConfig {
    /// Named hyperparameter profile.
    pub fn preset(name: &str) -> Result<Self> {
        let base = TrainConfig::default();
        let config = match name {
            "cub-paper" => base,
            "sun-paper" => TrainConfig {
                lr_theta: 3e-4,
                eta: 1e-4,
                temperature: 30.0,
                percentile: 0.7,
                decay: 0.5,
                k_neighbors: 35,
                update_start_epoch: 25,
                ..base
            },
            "awa2-paper" => TrainConfig {
                eta: 0.1,
                k_neighbors: 3,
                update_start_epoch: 25,
                ..base
            },
            // Tuned for the default synthetic corpus.
            "synthetic" => TrainConfig {
                epochs: 30,
                lr_theta: 1e-2,
                lr_phi: 1e-3,
                eta: 0.01,
                temperature: 100.0,
                k_neighbors: 5,
                update_start_epoch: 10,
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        for (name, v) in [("lr_theta", self.lr_theta), ("lr_phi", self.lr_phi), ("eta", self.eta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return fail(format!("percentile must lie in (0, 1], got {}", self.percentile));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return fail(format!("decay must lie in [0, 1), got {}", self.decay));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if self.k_neighbors == 0 {
            return fail("k_neighbors must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return fail(format!("clip_norm must be positive, got {c}"));
            }
        }
        self.pcl_dims.validate()
    }

    /// Sets one field from a JSON value, by its serialized name.
    pub fn set_field(&mut self, field: &str, value: serde_json::Value) -> Result<()> {
        let mut obj = serde_json::to_value(&*self).expect("config serializes");
        let map = obj.as_object_mut().expect("config is an object");
        if !map.contains_key(field) {
            return Err(Error::Config(format!("unknown config field {field:?}")));
        }
        map.insert(field.to_string(), value);
        *self = serde_json::from_value(obj)
            .map_err(|e| Error::Config(format!("field {field:?}: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cub_preset_values() {
        let c = TrainConfig::preset("cub-paper").unwrap();
        assert_eq!(c.temperature, 10.0);
        assert_eq!(c.decay, 0.9);
        assert_eq!(c.percentile, 0.8);
        assert_eq!(c.eta, 0.08);
        assert_eq!(c.k_neighbors, 10);
        assert_eq!(c.update_start_epoch, 15);
        assert_eq!(c.beta, 0.995);
        assert_eq!((c.epochs, c.batch_size), (50, 50));
        assert_eq!((c.lr_theta, c.lr_phi), (5e-4, 1e-2));
    }

    #[test]
    fn sun_preset_values() {
        let c = TrainConfig::preset("sun-paper").unwrap();
        assert_eq!(
            (c.temperature, c.decay, c.percentile, c.eta, c.k_neighbors, c.update_start_epoch, c.lr_theta),
            (30.0, 0.5, 0.7, 1e-4, 35, 25, 3e-4)
        );
    }

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            TrainConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(TrainConfig::preset("imagenet").is_err());
    }

    #[test]
    fn set_field_by_name() {
        let mut c = TrainConfig::default();
        c.set_field("temperature", serde_json::json!(30.0)).unwrap();
        assert_eq!(c.temperature, 30.0);
        c.set_field("use_pcl", serde_json::json!(false)).unwrap();
        assert!(!c.use_pcl);
        assert!(c.set_field("tau", serde_json::json!(1)).is_err());
        assert!(c.set_field("epochs", serde_json::json!("many")).is_err());
    }

    #[test]
    fn validation_rejects_out_of_range() {
        let bad = [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { temperature: 0.0, ..Default::default() },
            TrainConfig { percentile: 0.0, ..Default::default() },
            TrainConfig { decay: 1.0, ..Default::default() },
            TrainConfig { beta: 1.5, ..Default::default() },
            TrainConfig { lr_theta: -1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn unknown_json_fields_rejected() {
        let err = serde_json::from_str::<TrainConfig>("{\n  \"epochs\": 3,\n  \"tempreature\": 2\n}").unwrap_err();
        assert_eq!(err.line(), 3);
        assert!(err.to_string().contains("tempreature"));
    }
}
