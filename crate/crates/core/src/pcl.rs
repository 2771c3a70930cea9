//! Prototype-guided curriculum weighting.
//!
//! Per-sample losses are compared against an exponentially averaged
//! percentile threshold `l_p`. The pair `(l_i, l_i - l_p)` passes through a
//! small ReLU network, is joined with label and training-progress
//! embeddings, and a tanh head produces one logit per sample. A temperature
//! softmax over the batch turns the logits into weights that sum to one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapnet::glorot;
use crate::optim::ParamSet;
use crate::tensor::{ParamId, Tape, Tensor, Var};

/// EMA of the nearest-rank `p`-th percentile of batch losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileState {
    threshold: Option<f64>,
    percentile: f64,
    decay: f64,
}

impl PercentileState {
    pub fn new(percentile: f64, decay: f64) -> Result<Self> {
        if !(percentile > 0.0 && percentile <= 1.0) {
            return Err(Error::Config(format!("percentile must lie in (0, 1], got {percentile}")));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("percentile decay must lie in [0, 1), got {decay}")));
        }
        Ok(PercentileState {
            threshold: None,
            percentile,
            decay,
        })
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn percentile(&self) -> f64 {
        self.percentile
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn is_initialized(&self) -> bool {
        self.threshold.is_some()
    }

    /// Folds one batch into the threshold and returns the new value.
    pub fn update(&mut self, batch_losses: &[f64]) -> Result<f64> {
        if batch_losses.is_empty() {
            return Err(Error::Empty("loss batch"));
        }
        if batch_losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Config("batch losses must be finite".into()));
        }
        let q = nearest_rank(batch_losses, self.percentile);
        let next = match self.threshold {
            None => q,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * q,
        };
        self.threshold = Some(next);
        Ok(next)
    }

    /// `l_i - l_p` for every sample.
    pub fn relative_losses(&self, batch_losses: &[f64]) -> Result<Vec<f64>> {
        let lp = self
            .threshold
            .ok_or_else(|| Error::Config("percentile state used before its first update".into()))?;
        Ok(batch_losses.iter().map(|l| l - lp).collect())
    }
}

/// 1-based rank `ceil(p·n)`, tolerant of representation error in `p·n`.
pub fn nearest_rank_index(n: usize, percentile: f64) -> usize {
    let raw = (percentile * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

/// The nearest-rank percentile of `values`.
pub fn nearest_rank(values: &[f64], percentile: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[nearest_rank_index(sorted.len(), percentile) - 1]
}

/// Layer widths of the weighting network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PclDims {
    pub hidden: usize,
    pub delta: usize,
    pub label_embed: usize,
    pub epoch_embed: usize,
    pub head_hidden: usize,
    pub epoch_buckets: usize,
}

impl Default for PclDims {
    fn default() -> Self {
        PclDims {
            hidden: 64,
            delta: 32,
            label_embed: 32,
            epoch_embed: 32,
            head_hidden: 128,
            epoch_buckets: 100,
        }
    }
}

impl PclDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.hidden,
            self.delta,
            self.label_embed,
            self.epoch_embed,
            self.head_hidden,
            self.epoch_buckets,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!("weighting network widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

const PCL_IDS: [ParamId; 10] = [
    ParamId(10),
    ParamId(11),
    ParamId(12),
    ParamId(13),
    ParamId(14),
    ParamId(15),
    ParamId(16),
    ParamId(17),
    ParamId(18),
    ParamId(19),
];

const PCL_NAMES: [&str; 10] = [
    "fc1_w",
    "fc1_b",
    "fc2_w",
    "fc2_b",
    "fc3_w",
    "fc3_b",
    "fc4_w",
    "fc4_b",
    "label_embed",
    "epoch_embed",
];

/// Parameters of the weighting network.
#[derive(Debug, Clone, PartialEq)]
pub struct PclParams {
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
    pub fc3_w: Tensor,
    pub fc3_b: Tensor,
    pub fc4_w: Tensor,
    pub fc4_b: Tensor,
    pub label_embed: Tensor,
    pub epoch_embed: Tensor,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PclVars {
    fc1_w: Var,
    fc1_b: Var,
    fc2_w: Var,
    fc2_b: Var,
    fc3_w: Var,
    fc3_b: Var,
    fc4_w: Var,
    fc4_b: Var,
    label_embed: Var,
    epoch_embed: Var,
}

impl PclVars {
    /// Wraps ten tape variables given in [`ParamSet::entries`] order.
    pub fn from_vars(vars: &[Var]) -> Option<Self> {
        let &[fc1_w, fc1_b, fc2_w, fc2_b, fc3_w, fc3_b, fc4_w, fc4_b, label_embed, epoch_embed] = vars else {
            return None;
        };
        Some(PclVars {
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            fc3_w,
            fc3_b,
            fc4_w,
            fc4_b,
            label_embed,
            epoch_embed,
        })
    }
}

impl PclParams {
    pub fn init<R: Rng>(dims: PclDims, seen_classes: usize, temperature: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dims, seen_classes, temperature)?;
        p.fc1_w = glorot(2, dims.hidden, rng);
        p.fc2_w = glorot(dims.hidden, dims.delta, rng);
        p.fc3_w = glorot(dims.label_embed + dims.epoch_embed + dims.delta, dims.head_hidden, rng);
        p.fc4_w = glorot(dims.head_hidden, 1, rng);
        p.label_embed = uniform(&[seen_classes, dims.label_embed], 0.1, rng);
        p.epoch_embed = uniform(&[dims.epoch_buckets, dims.epoch_embed], 0.1, rng);
        Ok(p)
    }

    pub fn zeros(dims: PclDims, seen_classes: usize, temperature: f64) -> Result<Self> {
        dims.validate()?;
        if seen_classes == 0 {
            return Err(Error::Config("weighting network needs at least one seen class".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        let head_in = dims.label_embed + dims.epoch_embed + dims.delta;
        Ok(PclParams {
            fc1_w: Tensor::zeros(&[2, dims.hidden]),
            fc1_b: Tensor::zeros(&[dims.hidden]),
            fc2_w: Tensor::zeros(&[dims.hidden, dims.delta]),
            fc2_b: Tensor::zeros(&[dims.delta]),
            fc3_w: Tensor::zeros(&[head_in, dims.head_hidden]),
            fc3_b: Tensor::zeros(&[dims.head_hidden]),
            fc4_w: Tensor::zeros(&[dims.head_hidden, 1]),
            fc4_b: Tensor::zeros(&[1]),
            label_embed: Tensor::zeros(&[seen_classes, dims.label_embed]),
            epoch_embed: Tensor::zeros(&[dims.epoch_buckets, dims.epoch_embed]),
            temperature,
        })
    }

    pub fn seen_classes(&self) -> usize {
        self.label_embed.rows()
    }

    pub fn epoch_buckets(&self) -> usize {
        self.epoch_embed.rows()
    }

    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> PclVars {
        let mut put = |i: usize, t: &Tensor| {
            if trainable {
                tape.param(PCL_IDS[i], t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        PclVars {
            fc1_w: put(0, &self.fc1_w),
            fc1_b: put(1, &self.fc1_b),
            fc2_w: put(2, &self.fc2_w),
            fc2_b: put(3, &self.fc2_b),
            fc3_w: put(4, &self.fc3_w),
            fc3_b: put(5, &self.fc3_b),
            fc4_w: put(6, &self.fc4_w),
            fc4_b: put(7, &self.fc4_b),
            label_embed: put(8, &self.label_embed),
            epoch_embed: put(9, &self.epoch_embed),
        }
    }
}

impl ParamSet for PclParams {
    fn entries(&self) -> Vec<(ParamId, &'static str, &Tensor)> {
        let tensors = [
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
            &self.fc3_w,
            &self.fc3_b,
            &self.fc4_w,
            &self.fc4_b,
            &self.label_embed,
            &self.epoch_embed,
        ];
        tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| (PCL_IDS[i], PCL_NAMES[i], t))
            .collect()
    }

    fn entries_mut(&mut self) -> Vec<(ParamId, &'static str, &mut Tensor)> {
        let tensors = [
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
            &mut self.fc3_w,
            &mut self.fc3_b,
            &mut self.fc4_w,
            &mut self.fc4_b,
            &mut self.label_embed,
            &mut self.epoch_embed,
        ];
        tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| (PCL_IDS[i], PCL_NAMES[i], t))
            .collect()
    }
}

fn uniform<R: Rng>(shape: &[usize], limit: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-limit..limit)).collect())
        .expect("sized by construction")
}

/// Bucket of the training-progress embedding for a completed fraction.
pub fn epoch_bucket(epoch_pct: f64, buckets: usize) -> usize {
    let pct = if epoch_pct.is_finite() { epoch_pct.clamp(0.0, 1.0) } else { 0.0 };
    ((pct * buckets as f64).floor() as usize).min(buckets - 1)
}

/// Inputs of one weighting pass.
#[derive(Debug, Clone, Copy)]
pub struct WeightInputs<'a> {
    pub losses: &'a [f64],
    pub relative: &'a [f64],
    pub labels: &'a [usize],
    pub epoch_pct: f64,
}

/// Per-sample weights `ω[b]` on `tape`.
pub fn weight_forward(
    tape: &mut Tape,
    vars: PclVars,
    inputs: WeightInputs<'_>,
    temperature: f64,
) -> Result<Var> {
    let b = inputs.losses.len();
    if b == 0 {
        return Err(Error::Empty("weighting batch"));
    }
    if inputs.relative.len() != b || inputs.labels.len() != b {
        return Err(Error::Config(format!(
            "weighting inputs disagree in length: {b} losses, {} relative, {} labels",
            inputs.relative.len(),
            inputs.labels.len()
        )));
    }
    let seen = tape.value(vars.label_embed).rows();
    if let Some(&class_id) = inputs.labels.iter().find(|&&y| y >= seen) {
        return Err(Error::NotSeenClass { class_id, seen });
    }

    let features: Vec<f64> = inputs
        .losses
        .iter()
        .zip(inputs.relative)
        .flat_map(|(&l, &r)| [l, r])
        .collect();
    let x = tape.constant(Tensor::matrix(b, 2, features)?);
    let h = tape.matmul(x, vars.fc1_w)?;
    let h = tape.add_row_bias(h, vars.fc1_b)?;
    let h = tape.relu(h);
    let delta = tape.matmul(h, vars.fc2_w)?;
    let delta = tape.add_row_bias(delta, vars.fc2_b)?;

    let label_rows = tape.gather_rows(vars.label_embed, inputs.labels)?;
    let bucket = epoch_bucket(inputs.epoch_pct, tape.value(vars.epoch_embed).rows());
    let epoch_rows = tape.gather_rows(vars.epoch_embed, &vec![bucket; b])?;
    let joined = tape.concat(&[label_rows, epoch_rows, delta], 1)?;

    let g = tape.matmul(joined, vars.fc3_w)?;
    let g = tape.add_row_bias(g, vars.fc3_b)?;
    let g = tape.tanh(g);
    let logits = tape.matmul(g, vars.fc4_w)?;
    let logits = tape.add_row_bias(logits, vars.fc4_b)?;
    let logits = tape.reshape(logits, &[b])?;
    Ok(tape.softmax_axis(logits, 0, temperature)?)
}

/// Forward-only weights using the parameters' own temperature.
pub fn weights(params: &PclParams, inputs: WeightInputs<'_>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape, false);
    let w = weight_forward(&mut tape, vars, inputs, params.temperature)?;
    Ok(tape.value(w).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> PclDims {
        PclDims {
            hidden: 6,
            delta: 4,
            label_embed: 3,
            epoch_embed: 3,
            head_hidden: 5,
            epoch_buckets: 10,
        }
    }

    #[test]
    fn percentile_examples() {
        let mut s = PercentileState::new(0.3, 0.5).unwrap();
        assert_eq!(s.update(&[5.0, 5.0, 5.0]).unwrap(), 5.0);
        assert_eq!(nearest_rank(&[3.0, 1.0, 5.0, 2.0, 4.0], 0.8), 4.0);

        let mut s = PercentileState::new(1.0, 0.5).unwrap();
        s.update(&[2.0]).unwrap();
        assert_eq!(s.update(&[4.0]).unwrap(), 3.0);
    }

    #[test]
    fn nearest_rank_tolerates_rounding() {
        // 0.7 * 10 evaluates to 7.000000000000001
        assert_eq!(nearest_rank_index(10, 0.7), 7);
        assert_eq!(nearest_rank_index(5, 0.8), 4);
        assert_eq!(nearest_rank_index(3, 0.01), 1);
        assert_eq!(nearest_rank_index(3, 1.0), 3);
    }

    #[test]
    fn percentile_rejects_bad_inputs() {
        assert!(PercentileState::new(0.0, 0.5).is_err());
        assert!(PercentileState::new(1.1, 0.5).is_err());
        assert!(PercentileState::new(0.5, 1.0).is_err());
        let mut s = PercentileState::new(0.5, 0.5).unwrap();
        assert!(matches!(s.update(&[]), Err(Error::Empty(_))));
        assert!(s.relative_losses(&[1.0]).is_err());
    }

    #[test]
    fn relative_losses_examples() {
        let mut s = PercentileState::new(1.0, 0.0).unwrap();
        s.update(&[2.0]).unwrap();
        assert_eq!(s.relative_losses(&[1.0, 3.0]).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(s.relative_losses(&[2.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_parameters_give_uniform_weights() {
        let p = PclParams::zeros(small_dims(), 3, 10.0).unwrap();
        let w = weights(
            &p,
            WeightInputs {
                losses: &[0.5, 1.5, 3.0, 0.1],
                relative: &[-0.5, 0.5, 2.0, -0.9],
                labels: &[0, 1, 2, 0],
                epoch_pct: 0.3,
            },
        )
        .unwrap();
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn singleton_batch_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PclParams::init(small_dims(), 3, 0.5, &mut rng).unwrap();
        let w = weights(
            &p,
            WeightInputs {
                losses: &[7.0],
                relative: &[3.0],
                labels: &[2],
                epoch_pct: 0.9,
            },
        )
        .unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn duplicated_samples_share_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PclParams::init(small_dims(), 3, 1.0, &mut rng).unwrap();
        let w = weights(
            &p,
            WeightInputs {
                losses: &[0.4, 2.0, 0.4],
                relative: &[-0.1, 1.5, -0.1],
                labels: &[1, 0, 1],
                epoch_pct: 0.5,
            },
        )
        .unwrap();
        assert_eq!(w[0], w[2]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unseen_label_rejected() {
        let p = PclParams::zeros(small_dims(), 3, 1.0).unwrap();
        let err = weights(
            &p,
            WeightInputs {
                losses: &[1.0],
                relative: &[0.0],
                labels: &[3],
                epoch_pct: 0.0,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotSeenClass { class_id: 3, seen: 3 }));
    }

    #[test]
    fn epoch_bucket_clamps() {
        assert_eq!(epoch_bucket(0.0, 100), 0);
        assert_eq!(epoch_bucket(0.505, 100), 50);
        assert_eq!(epoch_bucket(1.0, 100), 99);
        assert_eq!(epoch_bucket(7.0, 100), 99);
        assert_eq!(epoch_bucket(-1.0, 100), 0);
    }
}
