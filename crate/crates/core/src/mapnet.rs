//! Visual-to-semantic mapping network.
//!
//! For one image with region features `V[R×d]` and attribute vectors
//! `A[K×d_a]`:
//!
//! * attention logits `a_kᵀ W1 v_r`, normalized into `alpha[K×R]`;
//! * attribute-specific features `F = alpha · V`;
//! * semantic embedding `ψ_k = a_kᵀ W2 F_k`;
//! * class scores `s_c = ψ · Z_c`.
//!
//! Training losses are the per-sample cross-entropy over seen classes and
//! the self-calibration loss, which shifts probability mass towards unseen
//! classes through a ±1 score offset.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, Tape, Tensor, TensorError, Var};

pub const W1_ID: ParamId = ParamId(0);
pub const W2_ID: ParamId = ParamId(1);

/// Axis along which attention logits are normalized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionAxis {
    /// Each attribute distributes its attention over regions.
    #[default]
    Regions,
    /// Each region distributes its attention over attributes.
    Attributes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    /// Candidates are the unseen classes only.
    Czsl,
    /// Candidates are all classes, with the calibration offset.
    Gzsl,
}

/// The bilinear maps `W1`, `W2`, each `d_a×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapParams {
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct MapVars {
    pub w1: Var,
    pub w2: Var,
}

impl MapParams {
    pub fn zeros(attribute_dim: usize, feature_dim: usize) -> Self {
        MapParams {
            w1: Tensor::zeros(&[attribute_dim, feature_dim]),
            w2: Tensor::zeros(&[attribute_dim, feature_dim]),
        }
    }

    /// Glorot-uniform initialization.
    pub fn init<R: Rng>(attribute_dim: usize, feature_dim: usize, rng: &mut R) -> Self {
        MapParams {
            w1: glorot(attribute_dim, feature_dim, rng),
            w2: glorot(attribute_dim, feature_dim, rng),
        }
    }

    pub fn attribute_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.cols()
    }

    /// Places the parameters on `tape`, as trainable leaves or constants.
    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> MapVars {
        if trainable {
            MapVars {
                w1: tape.param(W1_ID, self.w1.clone()),
                w2: tape.param(W2_ID, self.w2.clone()),
            }
        } else {
            MapVars {
                w1: tape.constant(self.w1.clone()),
                w2: tape.constant(self.w2.clone()),
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite() && self.w2.is_finite()
    }
}

pub(crate) fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

/// `A·W1` and `A·W2`, shared by every sample of a batch.
#[derive(Debug, Clone, Copy)]
pub struct Projections {
    pub queries: Var,
    pub keys: Var,
}

pub fn project(tape: &mut Tape, attributes: Var, params: MapVars) -> Result<Projections> {
    Ok(Projections {
        queries: tape.matmul(attributes, params.w1)?,
        keys: tape.matmul(attributes, params.w2)?,
    })
}

/// Attention `alpha[K×R]` for one image.
pub fn attend(
    tape: &mut Tape,
    features: Var,
    attributes: Var,
    w1: Var,
    axis: AttentionAxis,
) -> Result<Var> {
    let queries = tape.matmul(attributes, w1)?;
    attend_projected(tape, queries, features, axis)
}

pub fn attend_projected(tape: &mut Tape, queries: Var, features: Var, axis: AttentionAxis) -> Result<Var> {
    let vt = tape.transpose(features)?;
    let logits = tape.matmul(queries, vt)?;
    let softmax_axis = match axis {
        AttentionAxis::Regions => 1,
        AttentionAxis::Attributes => 0,
    };
    Ok(tape.softmax_axis(logits, softmax_axis, 1.0)?)
}

/// `F[K×d] = alpha · V`.
pub fn aggregate(tape: &mut Tape, alpha: Var, features: Var) -> Result<Var> {
    Ok(tape.matmul(alpha, features)?)
}

/// `ψ_k = a_kᵀ W2 F_k`, returned as a length-`K` vector.
pub fn embed(tape: &mut Tape, attribute_features: Var, attributes: Var, w2: Var) -> Result<Var> {
    let keys = tape.matmul(attributes, w2)?;
    embed_projected(tape, attribute_features, keys)
}

pub fn embed_projected(tape: &mut Tape, attribute_features: Var, keys: Var) -> Result<Var> {
    let prod = tape.mul(keys, attribute_features)?;
    Ok(tape.sum_axis(prod, 1)?)
}

/// Scores `Ψ·Zᵀ`: `[K]×[C'×K] → [C']` or `[b×K]×[C'×K] → [b×C']`.
pub fn class_scores(tape: &mut Tape, psi: Var, prototypes: Var) -> Result<Var> {
    let zt = tape.transpose(prototypes)?;
    if tape.value(psi).rank() == 1 {
        let k = tape.value(psi).len();
        let row = tape.reshape(psi, &[1, k])?;
        let s = tape.matmul(row, zt)?;
        let c = tape.value(s).cols();
        Ok(tape.reshape(s, &[c])?)
    } else {
        Ok(tape.matmul(psi, zt)?)
    }
}

/// Semantic embeddings of a batch, stacked as `[b×K]`.
pub fn embed_batch(
    tape: &mut Tape,
    features: &[Var],
    attributes: Var,
    params: MapVars,
    axis: AttentionAxis,
) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::Empty("feature batch"));
    }
    let proj = project(tape, attributes, params)?;
    let k = tape.value(attributes).rows();
    let mut rows = Vec::with_capacity(features.len());
    for &v in features {
        let alpha = attend_projected(tape, proj.queries, v, axis)?;
        let f = aggregate(tape, alpha, v)?;
        let psi = embed_projected(tape, f, proj.keys)?;
        rows.push(tape.reshape(psi, &[1, k])?);
    }
    Ok(tape.concat(&rows, 0)?)
}

/// Unreduced cross-entropy `-log softmax(s)[y]` per row of `scores[b×C_s]`.
pub fn ce_loss_per_sample(tape: &mut Tape, scores_seen: Var, labels: &[usize]) -> Result<Var> {
    let classes = tape.value(scores_seen).cols();
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let lp = tape.log_softmax(scores_seen, 1)?;
    let picked = tape.pick(lp, labels)?;
    Ok(tape.scale(picked, -1.0))
}

/// `+1` for unseen classes, `-1` for seen ones.
pub fn calibration_offsets(unseen_mask: &[bool]) -> Vec<f64> {
    unseen_mask
        .iter()
        .map(|&u| if u { 1.0 } else { -1.0 })
        .collect()
}

/// Self-calibration loss per row of `scores[b×C]`:
/// `-Σ_{c' unseen} log softmax(s + offset)[c']`.
pub fn sc_loss_per_sample(tape: &mut Tape, scores_all: Var, unseen_mask: &[bool]) -> Result<Var> {
    let shape = tape.value(scores_all).shape().to_vec();
    if shape.len() != 2 || shape[1] != unseen_mask.len() {
        return Err(TensorError::Shape {
            op: "sc_loss",
            lhs: shape,
            rhs: vec![unseen_mask.len()],
        }
        .into());
    }
    let offsets = tape.constant(Tensor::vector(calibration_offsets(unseen_mask)));
    let calibrated = tape.add_row_bias(scores_all, offsets)?;
    let lp = tape.log_softmax(calibrated, 1)?;
    let mask_row: Vec<f64> = unseen_mask.iter().map(|&u| if u { 1.0 } else { 0.0 }).collect();
    let mask = tape.constant(Tensor::matrix(
        shape[0],
        shape[1],
        mask_row.iter().copied().cycle().take(shape[0] * shape[1]).collect(),
    )?);
    let masked = tape.mul(lp, mask)?;
    let per_sample = tape.sum_axis(masked, 1)?;
    Ok(tape.scale(per_sample, -1.0))
}

/// Batch mean of [`sc_loss_per_sample`].
pub fn sc_loss(tape: &mut Tape, scores_all: Var, unseen_mask: &[bool]) -> Result<Var> {
    let per = sc_loss_per_sample(tape, scores_all, unseen_mask)?;
    Ok(tape.mean(per))
}

/// Calibrated argmax prediction for one embedding. Ties go to the lower class id.
pub fn predict(psi: &[f64], prototypes: &Tensor, seen_classes: usize, mode: PredictMode) -> Result<usize> {
    if prototypes.cols() != psi.len() {
        return Err(TensorError::Shape {
            op: "predict",
            lhs: vec![psi.len()],
            rhs: prototypes.shape().to_vec(),
        }
        .into());
    }
    let first = match mode {
        PredictMode::Czsl => seen_classes,
        PredictMode::Gzsl => 0,
    };
    let mut best: Option<(usize, f64)> = None;
    for c in first..prototypes.rows() {
        let offset = if c >= seen_classes { 1.0 } else { -1.0 };
        let score = dot(psi, prototypes.row(c)) + offset;
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((c, score));
        }
    }
    best.map(|(c, _)| c).ok_or(Error::Empty("candidate class set"))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward-only embeddings `[n×K]` for a list of images.
pub fn semantic_embeddings(
    params: &MapParams,
    attributes: &Tensor,
    features: &[&Tensor],
    axis: AttentionAxis,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape, false);
    let a = tape.constant(attributes.clone());
    let vs: Vec<Var> = features.iter().map(|f| tape.constant((*f).clone())).collect();
    let psi = embed_batch(&mut tape, &vs, a, vars, axis)?;
    Ok(tape.value(psi).clone())
}
