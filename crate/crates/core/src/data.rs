//! Corpus container, semantic space, batching, and the on-disk corpus format.
//!
//! A corpus directory holds `manifest.json` plus three raw little-endian
//! `f64` row-major blobs:
//!
//! * `features.bin`: one `R×d` region grid per sample, addressed by the
//!   sample's `offset` (in samples, not bytes);
//! * `attributes.bin`: the `K×d_a` attribute word vectors;
//! * `prototypes.bin`: the `C×K` class prototypes, seen classes first.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.bin";
pub const ATTRIBUTES_FILE: &str = "attributes.bin";
pub const PROTOTYPES_FILE: &str = "prototypes.bin";
pub const CORPUS_FORMAT: &str = "clzsl-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported corpus format {format:?} version {version} (expected {CORPUS_FORMAT:?} version {CORPUS_VERSION})")]
    UnsupportedVersion { format: String, version: u32 },
    #[error("{what}: expected {expected} values, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("sample {sample}: class_id {class_id} outside [{lo}, {hi}) for split {split:?}")]
    ClassOutOfRange {
        sample: usize,
        class_id: usize,
        split: Split,
        lo: usize,
        hi: usize,
    },
    #[error("sample {sample}: offset {offset} beyond the {available} grids in {FEATURES_FILE}")]
    OffsetOutOfRange {
        sample: usize,
        offset: usize,
        available: usize,
    },
    #[error("{0}: checksum mismatch")]
    ChecksumMismatch(String),
    #[error("{0} contains non-finite values")]
    NonFinite(String),
    #[error("corpus has no samples")]
    EmptyCorpus,
    #[error("corpus has no train_seen samples")]
    EmptyTrainSplit,
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainSeen,
    TestSeen,
    TestUnseen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `R×d` region features.
    pub features: Tensor,
    pub class_id: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    regions: usize,
    feature_dim: usize,
    seen_classes: usize,
    unseen_classes: usize,
    samples: Vec<Sample>,
}

impl Corpus {
    pub fn new(
        regions: usize,
        feature_dim: usize,
        seen_classes: usize,
        unseen_classes: usize,
        samples: Vec<Sample>,
    ) -> Result<Self, DataError> {
        if regions == 0 || feature_dim == 0 {
            return Err(DataError::InvalidDimension(format!(
                "R={regions}, d={feature_dim} must be positive"
            )));
        }
        if seen_classes == 0 || unseen_classes == 0 {
            return Err(DataError::InvalidDimension(format!(
                "C_s={seen_classes}, C_u={unseen_classes} must be positive"
            )));
        }
        if samples.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let total = seen_classes + unseen_classes;
        for (i, s) in samples.iter().enumerate() {
            if s.features.shape() != [regions, feature_dim] {
                return Err(DataError::DimensionMismatch {
                    what: format!("sample {i} features"),
                    expected: regions * feature_dim,
                    found: s.features.len(),
                });
            }
            if !s.features.is_finite() {
                return Err(DataError::NonFinite(format!("sample {i} features")));
            }
            let (lo, hi) = match s.split {
                Split::TrainSeen | Split::TestSeen => (0, seen_classes),
                Split::TestUnseen => (seen_classes, total),
            };
            if s.class_id < lo || s.class_id >= hi {
                return Err(DataError::ClassOutOfRange {
                    sample: i,
                    class_id: s.class_id,
                    split: s.split,
                    lo,
                    hi,
                });
            }
        }
        Ok(Corpus {
            regions,
            feature_dim,
            seen_classes,
            unseen_classes,
            samples,
        })
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn seen_classes(&self) -> usize {
        self.seen_classes
    }

    pub fn unseen_classes(&self) -> usize {
        self.unseen_classes
    }

    pub fn class_count(&self) -> usize {
        self.seen_classes + self.unseen_classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of all samples in `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticSpace {
    /// `K×d_a` attribute word vectors.
    attributes: Tensor,
    /// `C×K` class prototypes, seen rows first.
    prototypes: Tensor,
}

impl SemanticSpace {
    pub fn new(attributes: Tensor, prototypes: Tensor) -> Result<Self, DataError> {
        if attributes.rank() != 2 || prototypes.rank() != 2 {
            return Err(DataError::InvalidDimension(
                "attributes and prototypes must be matrices".into(),
            ));
        }
        if prototypes.cols() != attributes.rows() {
            return Err(DataError::DimensionMismatch {
                what: "prototype width vs attribute count".into(),
                expected: attributes.rows(),
                found: prototypes.cols(),
            });
        }
        if !attributes.is_finite() {
            return Err(DataError::NonFinite(ATTRIBUTES_FILE.into()));
        }
        if !prototypes.is_finite() {
            return Err(DataError::NonFinite(PROTOTYPES_FILE.into()));
        }
        Ok(SemanticSpace {
            attributes,
            prototypes,
        })
    }

    pub fn attributes(&self) -> &Tensor {
        &self.attributes
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn attribute_count(&self) -> usize {
        self.attributes.rows()
    }

    pub fn attribute_dim(&self) -> usize {
        self.attributes.cols()
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.rows()
    }

    /// Scales every prototype row to unit L2 norm; zero rows are left alone.
    pub fn normalize_prototypes(&mut self) {
        for c in 0..self.prototypes.rows() {
            let row = self.prototypes.row_mut(c);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFiles {
    pub features: FileEntry,
    pub attributes: FileEntry,
    pub prototypes: FileEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub class_id: usize,
    pub split: Split,
    /// Index of the sample's grid within `features.bin`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    #[serde(rename = "R")]
    pub regions: usize,
    #[serde(rename = "d")]
    pub feature_dim: usize,
    #[serde(rename = "d_a")]
    pub attribute_dim: usize,
    #[serde(rename = "K")]
    pub attributes: usize,
    #[serde(rename = "C_s")]
    pub seen_classes: usize,
    #[serde(rename = "C_u")]
    pub unseen_classes: usize,
    pub files: ManifestFiles,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = read_file(path).and_then(|b| {
            String::from_utf8(b).map_err(|e| DataError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| DataError::Manifest {
            path: path.to_path_buf(),
            source,
        })?;
        if manifest.format != CORPUS_FORMAT || manifest.version != CORPUS_VERSION {
            return Err(DataError::UnsupportedVersion {
                format: manifest.format,
                version: manifest.version,
            });
        }
        Ok(manifest)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Scale prototype rows to unit norm after loading.
    pub normalize_prototypes: bool,
}

/// Loads a corpus from a manifest file or a directory containing one.
pub fn load_corpus(path: &Path) -> Result<(Corpus, SemanticSpace), DataError> {
    load_corpus_with(path, LoadOptions::default())
}

pub fn load_corpus_with(
    path: &Path,
    options: LoadOptions,
) -> Result<(Corpus, SemanticSpace), DataError> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let m = Manifest::read(&manifest_path)?;

    if m.samples.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    for (name, value) in [
        ("R", m.regions),
        ("d", m.feature_dim),
        ("d_a", m.attribute_dim),
        ("K", m.attributes),
    ] {
        if value == 0 {
            return Err(DataError::InvalidDimension(format!("{name} must be positive")));
        }
    }

    let grid = m.regions * m.feature_dim;
    let features = read_blob(&dir, &m.files.features)?;
    if features.len() % grid != 0 {
        return Err(DataError::DimensionMismatch {
            what: FEATURES_FILE.into(),
            expected: grid * m.samples.len(),
            found: features.len(),
        });
    }
    let available = features.len() / grid;

    let attributes = read_blob(&dir, &m.files.attributes)?;
    expect_len(ATTRIBUTES_FILE, m.attributes * m.attribute_dim, attributes.len())?;
    let classes = m.seen_classes + m.unseen_classes;
    let prototypes = read_blob(&dir, &m.files.prototypes)?;
    expect_len(PROTOTYPES_FILE, classes * m.attributes, prototypes.len())?;

    let mut samples = Vec::with_capacity(m.samples.len());
    for (i, entry) in m.samples.iter().enumerate() {
        if entry.offset >= available {
            return Err(DataError::OffsetOutOfRange {
                sample: i,
                offset: entry.offset,
                available,
            });
        }
        let values = features[entry.offset * grid..(entry.offset + 1) * grid].to_vec();
        samples.push(Sample {
            features: Tensor::matrix(m.regions, m.feature_dim, values)
                .expect("grid length checked"),
            class_id: entry.class_id,
            split: entry.split,
        });
    }

    let corpus = Corpus::new(
        m.regions,
        m.feature_dim,
        m.seen_classes,
        m.unseen_classes,
        samples,
    )?;
    let mut space = SemanticSpace::new(
        Tensor::matrix(m.attributes, m.attribute_dim, attributes).expect("length checked"),
        Tensor::matrix(classes, m.attributes, prototypes).expect("length checked"),
    )?;
    if options.normalize_prototypes {
        space.normalize_prototypes();
    }
    Ok((corpus, space))
}

/// Writes `corpus` and `space` as a corpus directory, creating it if needed.
pub fn save_corpus(dir: &Path, corpus: &Corpus, space: &SemanticSpace) -> Result<Manifest, DataError> {
    if space.class_count() != corpus.class_count() {
        return Err(DataError::DimensionMismatch {
            what: "prototype rows vs corpus classes".into(),
            expected: corpus.class_count(),
            found: space.class_count(),
        });
    }
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let features: Vec<f64> = corpus
        .samples
        .iter()
        .flat_map(|s| s.features.data().iter().copied())
        .collect();
    let entry = |name: &str, values: &[f64]| -> Result<FileEntry, DataError> {
        let path = dir.join(name);
        let sha = binio::write_f64_file(&path, values).map_err(|source| DataError::Io { path, source })?;
        Ok(FileEntry {
            path: name.to_string(),
            sha256: Some(sha),
        })
    };
    let files = ManifestFiles {
        features: entry(FEATURES_FILE, &features)?,
        attributes: entry(ATTRIBUTES_FILE, space.attributes.data())?,
        prototypes: entry(PROTOTYPES_FILE, space.prototypes.data())?,
    };
    let manifest = Manifest {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        regions: corpus.regions,
        feature_dim: corpus.feature_dim,
        attribute_dim: space.attribute_dim(),
        attributes: space.attribute_count(),
        seen_classes: corpus.seen_classes,
        unseen_classes: corpus.unseen_classes,
        files,
        samples: corpus
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| SampleEntry {
                class_id: s.class_id,
                split: s.split,
                offset: i,
            })
            .collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|source| DataError::Io { path, source })?;
    Ok(manifest)
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

fn read_blob(dir: &Path, entry: &FileEntry) -> Result<Vec<f64>, DataError> {
    let path = dir.join(&entry.path);
    let bytes = read_file(&path)?;
    if let Some(expected) = &entry.sha256 {
        if !binio::sha256_hex(&bytes).eq_ignore_ascii_case(expected) {
            return Err(DataError::ChecksumMismatch(entry.path.clone()));
        }
    }
    binio::decode_f64(&bytes).ok_or_else(|| DataError::DimensionMismatch {
        what: format!("{} byte length", entry.path),
        expected: bytes.len() / 8 * 8,
        found: bytes.len(),
    })
}

fn expect_len(what: &str, expected: usize, found: usize) -> Result<(), DataError> {
    if expected == found {
        Ok(())
    } else {
        Err(DataError::DimensionMismatch {
            what: what.into(),
            expected,
            found,
        })
    }
}

/// A mini-batch of training samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub features: Vec<Tensor>,
    pub class_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Assembles a batch from explicit corpus indices.
    pub fn from_indices(corpus: &Corpus, indices: &[usize]) -> Self {
        Batch {
            indices: indices.to_vec(),
            features: indices
                .iter()
                .map(|&i| corpus.samples[i].features.clone())
                .collect(),
            class_ids: indices.iter().map(|&i| corpus.samples[i].class_id).collect(),
        }
    }
}

/// One shuffled pass over the `train_seen` samples, in batches of
/// `batch_size` with a trailing short batch.
pub fn batch_iter(corpus: &Corpus, batch_size: usize, epoch_seed: u64) -> Result<BatchIter<'_>, DataError> {
    if batch_size == 0 {
        return Err(DataError::InvalidBatchSize);
    }
    let mut order = corpus.indices(Split::TrainSeen);
    if order.is_empty() {
        return Err(DataError::EmptyTrainSplit);
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(BatchIter {
        corpus,
        order,
        batch_size,
        pos: 0,
    })
}

pub struct BatchIter<'a> {
    corpus: &'a Corpus,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = Batch::from_indices(self.corpus, &self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}
