//! Deterministic synthetic corpora with known ground-truth prototypes.
//!
//! Every class owns a sparse set of active attributes. A sample plants one
//! visual direction per expressed attribute into a random subset of regions;
//! instance dropout suppresses attributes per sample, and the prototypes
//! handed to training are the true ones plus Gaussian noise.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::data::{self, Corpus, Manifest, Sample, SemanticSpace, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GROUND_TRUTH_FILE: &str = "ground_truth.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    #[serde(rename = "C_s")]
    pub seen_classes: usize,
    #[serde(rename = "C_u")]
    pub unseen_classes: usize,
    #[serde(rename = "K")]
    pub attributes: usize,
    #[serde(rename = "R")]
    pub regions: usize,
    pub d: usize,
    pub d_a: usize,
    pub samples_per_class: usize,
    pub instance_dropout_rate: f64,
    pub prototype_noise_sigma: f64,
    pub feature_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seen_classes: 20,
            unseen_classes: 5,
            attributes: 16,
            regions: 4,
            d: 8,
            d_a: 8,
            samples_per_class: 30,
            instance_dropout_rate: 0.2,
            prototype_noise_sigma: 0.3,
            feature_noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// All noise sources disabled.
    pub fn noiseless(self) -> Self {
        SynthConfig {
            instance_dropout_rate: 0.0,
            prototype_noise_sigma: 0.0,
            feature_noise_sigma: 0.0,
            ..self
        }
    }

    /// Active attributes per class.
    pub fn active_per_class(&self) -> usize {
        (self.attributes / 4).max(2).min(self.attributes)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let dims = [
            ("C_s", self.seen_classes),
            ("C_u", self.unseen_classes),
            ("K", self.attributes),
            ("R", self.regions),
            ("d", self.d),
            ("d_a", self.d_a),
            ("samples_per_class", self.samples_per_class),
        ];
        for (name, v) in dims {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.attributes > self.regions * self.d {
            return fail(format!(
                "K={} exceeds the R·d={} capacity of the feature grid",
                self.attributes,
                self.regions * self.d
            ));
        }
        if !(0.0..1.0).contains(&self.instance_dropout_rate) {
            return fail(format!(
                "instance_dropout_rate must lie in [0, 1), got {}",
                self.instance_dropout_rate
            ));
        }
        for (name, v) in [
            ("prototype_noise_sigma", self.prototype_noise_sigma),
            ("feature_noise_sigma", self.feature_noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.samples_per_class < 2 {
            return fail("samples_per_class must be at least 2 to fill both seen splits".into());
        }
        Ok(())
    }
}

/// Oracle-only data; never part of what the trainer receives.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Uncorrupted prototypes `[C×K]`.
    pub prototypes: Tensor,
    /// Per-sample attribute strengths after dropout `[N×K]`.
    pub realized: Tensor,
}

impl GroundTruth {
    /// Fraction of the class's active attributes that sample `i` lost.
    pub fn dropped_fraction(&self, sample: usize, class_id: usize) -> f64 {
        let truth = self.prototypes.row(class_id);
        let real = self.realized.row(sample);
        let active = truth.iter().filter(|&&z| z > 0.0).count();
        if active == 0 {
            return 0.0;
        }
        let dropped = truth.iter().zip(real).filter(|(&z, &r)| z > 0.0 && r == 0.0).count();
        dropped as f64 / active as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub space: SemanticSpace,
    pub truth: GroundTruth,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random unit vectors pushed apart by repeated pairwise projection.
fn decorrelated_rows<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
            normalize(&mut v);
            v
        })
        .collect();
    for _ in 0..20 {
        for i in 0..rows {
            for j in 0..rows {
                if i == j {
                    continue;
                }
                let c = dot(&out[i], &out[j]);
                let (vi, vj) = (out[i].clone(), &mut out[j]);
                for (x, y) in vj.iter_mut().zip(&vi) {
                    *x -= 0.5 * c * y;
                }
                normalize(vj);
            }
        }
    }
    out
}

fn active_sets<R: Rng>(config: &SynthConfig, rng: &mut R) -> Vec<Vec<usize>> {
    let classes = config.seen_classes + config.unseen_classes;
    let m = config.active_per_class();
    let mut seen_sets = BTreeSet::new();
    let mut sets = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut set = Vec::new();
        for _ in 0..64 {
            set = index::sample(rng, config.attributes, m).into_vec();
            set.sort_unstable();
            if !seen_sets.contains(&set) {
                break;
            }
        }
        seen_sets.insert(set.clone());
        sets.push(set);
    }
    sets
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (k, r, d) = (config.attributes, config.regions, config.d);
    let classes = config.seen_classes + config.unseen_classes;

    let attr_rows = decorrelated_rows(k, config.d_a, &mut rng);
    let attributes = Tensor::from_rows(&attr_rows)?;
    let projection: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..config.d_a).map(|_| normal(&mut rng)).collect())
        .collect();
    let directions: Vec<Vec<f64>> = attr_rows
        .iter()
        .map(|a| {
            let mut u: Vec<f64> = projection.iter().map(|p| dot(p, a)).collect();
            normalize(&mut u);
            u
        })
        .collect();

    let sets = active_sets(config, &mut rng);
    let mut truth = Tensor::zeros(&[classes, k]);
    for (c, set) in sets.iter().enumerate() {
        for &a in set {
            truth.row_mut(c)[a] = rng.random_range(0.5..1.5);
        }
    }
    let mut noisy = truth.clone();
    for v in noisy.data_mut() {
        *v += config.prototype_noise_sigma * normal(&mut rng);
    }

    let mut samples = Vec::with_capacity(classes * config.samples_per_class);
    let mut realized = Vec::with_capacity(classes * config.samples_per_class * k);
    let train_per_class = (config.samples_per_class * 4 / 5).clamp(1, config.samples_per_class - 1);
    for (c, set) in sets.iter().enumerate() {
        for j in 0..config.samples_per_class {
            let mut features = Tensor::zeros(&[r, d]);
            let mut expressed = vec![0.0; k];
            let kept: Vec<usize> = set
                .iter()
                .copied()
                .filter(|_| rng.random::<f64>() >= config.instance_dropout_rate)
                .collect();
            // distinct regions while they last, then wrap around
            let regions = index::sample(&mut rng, r, kept.len().clamp(1, r)).into_vec();
            for (i, &a) in kept.iter().enumerate() {
                let strength = truth.row(c)[a];
                expressed[a] = strength;
                let region = regions[i % regions.len()];
                for (f, u) in features.row_mut(region).iter_mut().zip(&directions[a]) {
                    *f += strength * u;
                }
            }
            for f in features.data_mut() {
                *f += config.feature_noise_sigma * normal(&mut rng);
            }
            let split = if c >= config.seen_classes {
                Split::TestUnseen
            } else if j < train_per_class {
                Split::TrainSeen
            } else {
                Split::TestSeen
            };
            realized.extend_from_slice(&expressed);
            samples.push(Sample {
                features,
                class_id: c,
                split,
            });
        }
    }
    let n = samples.len();
    let corpus = Corpus::new(r, d, config.seen_classes, config.unseen_classes, samples)?;
    let space = SemanticSpace::new(attributes, noisy)?;
    Ok(SynthCorpus {
        corpus,
        space,
        truth: GroundTruth {
            prototypes: truth,
            realized: Tensor::new(vec![n, k], realized)?,
        },
    })
}

/// Writes the corpus directory plus the ground-truth sidecar.
pub fn write(dir: &Path, synth: &SynthCorpus) -> Result<Manifest> {
    let manifest = data::save_corpus(dir, &synth.corpus, &synth.space)?;
    let mut values = synth.truth.prototypes.data().to_vec();
    values.extend_from_slice(synth.truth.realized.data());
    let path = dir.join(GROUND_TRUTH_FILE);
    binio::write_f64_file(&path, &values).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads the ground-truth sidecar of a corpus directory written by [`write`].
pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let manifest = Manifest::read(&dir.join(data::MANIFEST_FILE))?;
    let path = dir.join(GROUND_TRUTH_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let values = binio::decode_f64(&bytes)
        .ok_or_else(|| Error::Integrity(format!("{} is not a whole number of f64 values", path.display())))?;
    let (c, k, n) = (
        manifest.seen_classes + manifest.unseen_classes,
        manifest.attributes,
        manifest.samples.len(),
    );
    if values.len() != (c + n) * k {
        return Err(Error::Integrity(format!(
            "{} holds {} values, expected {}",
            path.display(),
            values.len(),
            (c + n) * k
        )));
    }
    let (p, rz) = values.split_at(c * k);
    Ok(GroundTruth {
        prototypes: Tensor::new(vec![c, k], p.to_vec())?,
        realized: Tensor::new(vec![n, k], rz.to_vec())?,
    })
}
