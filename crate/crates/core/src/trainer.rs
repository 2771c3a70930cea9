//! Alternating optimization of the mapping network (θ, RMSprop) and the
//! weighting network (φ, Adam), with per-epoch prototype refreshes.
//!
//! Each step first updates θ on `Σ ω_i l_i(θ)` with the weights held fixed,
//! then re-evaluates the losses at the new θ and updates φ on
//! `Σ ω_i(φ) l_i(θ')` with θ held fixed. The per-sample loss is
//! `CE_i + η·SC_i`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AuxBranch, TrainConfig};
use crate::data::{batch_iter, Batch, Corpus, SemanticSpace};
use crate::error::{Error, Result};
use crate::eval::{Evaluator, Metrics};
use crate::mapnet::{self, AttentionAxis, MapParams, MapVars};
use crate::optim::{Adam, RmsProp};
use crate::pcl::{self, PclParams, PercentileState, WeightInputs};
use crate::pup::{MappingLedger, PrototypeStore};
use crate::tensor::{GradientMap, Tape, Tensor, Var};

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub theta: MapParams,
    pub phi: PclParams,
    pub rmsprop: RmsProp,
    pub adam: Adam,
    pub percentile: PercentileState,
    pub store: PrototypeStore,
    /// Independent mapping branch feeding prototype updates, when enabled.
    pub aux: Option<(MapParams, RmsProp)>,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn init(corpus: &Corpus, space: &SemanticSpace, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if space.class_count() != corpus.class_count() {
            return Err(Error::Config(format!(
                "{} prototype rows for {} classes",
                space.class_count(),
                corpus.class_count()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let theta = MapParams::init(space.attribute_dim(), corpus.feature_dim(), &mut rng);
        let phi = PclParams::init(config.pcl_dims, corpus.seen_classes(), config.temperature, &mut rng)?;
        let aux = match config.aux_branch {
            AuxBranch::Shared => None,
            AuxBranch::Independent => Some((
                MapParams::init(space.attribute_dim(), corpus.feature_dim(), &mut rng),
                RmsProp::default(),
            )),
        };
        let mut prototypes = space.clone();
        if config.normalize_prototypes {
            prototypes.normalize_prototypes();
        }
        let store = PrototypeStore::new(
            prototypes.prototypes().clone(),
            corpus.seen_classes(),
            config.beta,
            config.k_neighbors,
        )?;
        Ok(TrainState {
            theta,
            phi,
            rmsprop: RmsProp::default(),
            adam: Adam::default(),
            percentile: PercentileState::new(config.percentile, config.decay)?,
            store,
            aux,
            epochs_done: 0,
        })
    }
}

/// Result of one alternating step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    /// Per-sample `CE + η·SC` at θ.
    pub losses: Vec<f64>,
    /// Weights used for the θ update.
    pub weights: Vec<f64>,
    /// `Σ ω_i l_i(θ)`.
    pub loss_theta: f64,
    /// Per-sample losses at the updated θ'.
    pub losses_after: Vec<f64>,
    /// `Σ ω_i(φ) l_i(θ')`, before the φ update.
    pub loss_phi: f64,
    pub threshold: f64,
    /// Embeddings `[b×K]` recorded for prototype updates.
    pub psi: Tensor,
}

/// Tape handles for the per-sample objective.
pub struct Objective {
    pub psi: Var,
    pub ce: Var,
    pub sc: Var,
    pub per_sample: Var,
}

/// Fixed inputs of the per-sample objective for one batch.
pub struct ObjectiveInputs<'a> {
    pub attributes: &'a Tensor,
    pub seen_prototypes: &'a Tensor,
    pub all_prototypes: &'a Tensor,
    pub unseen_mask: &'a [bool],
    pub labels: &'a [usize],
    pub eta: f64,
    pub axis: AttentionAxis,
}

/// Builds `CE_i + η·SC_i` for a batch whose features are already on the tape.
pub fn objective(tape: &mut Tape, theta: MapVars, features: &[Var], inputs: &ObjectiveInputs<'_>) -> Result<Objective> {
    let a = tape.constant(inputs.attributes.clone());
    let psi = mapnet::embed_batch(tape, features, a, theta, inputs.axis)?;
    let zs = tape.constant(inputs.seen_prototypes.clone());
    let za = tape.constant(inputs.all_prototypes.clone());
    let s_seen = mapnet::class_scores(tape, psi, zs)?;
    let ce = mapnet::ce_loss_per_sample(tape, s_seen, inputs.labels)?;
    let s_all = mapnet::class_scores(tape, psi, za)?;
    let sc = mapnet::sc_loss_per_sample(tape, s_all, inputs.unseen_mask)?;
    let scaled = tape.scale(sc, inputs.eta);
    let per_sample = tape.add(ce, scaled)?;
    Ok(Objective {
        psi,
        ce,
        sc,
        per_sample,
    })
}

fn clip(grads: &mut GradientMap, clip_norm: Option<f64>) {
    if let Some(c) = clip_norm {
        grads.clip_global_norm(c);
    }
}

fn check_finite(values: &[f64], epoch: usize, batch: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { epoch, batch })
    }
}

/// Position of a step within training, for diagnostics and the progress embedding.
#[derive(Debug, Clone, Copy)]
pub struct StepPosition {
    pub epoch: usize,
    pub batch: usize,
    pub epoch_pct: f64,
}

/// One alternating θ/φ update on `batch`.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    attributes: &Tensor,
    config: &TrainConfig,
    pos: StepPosition,
) -> Result<StepDiagnostics> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let seen_prototypes = state.store.seen_prototypes();
    let all_prototypes = state.store.current().clone();
    let mask = state.store.unseen_mask();
    let inputs = ObjectiveInputs {
        attributes,
        seen_prototypes: &seen_prototypes,
        all_prototypes: &all_prototypes,
        unseen_mask: &mask,
        labels: &batch.class_ids,
        eta: config.eta,
        axis: config.attention_axis,
    };
    let b = batch.len();

    // θ phase: weights are constants.
    let mut tape = Tape::new();
    let tv = state.theta.on_tape(&mut tape, true);
    let feats: Vec<Var> = batch.features.iter().map(|f| tape.constant(f.clone())).collect();
    let obj = objective(&mut tape, tv, &feats, &inputs)?;
    let losses = tape.value(obj.per_sample).data().to_vec();
    check_finite(&losses, pos.epoch, pos.batch)?;
    let psi = tape.value(obj.psi).clone();

    let threshold = state.percentile.update(&losses)?;
    let weights = if config.use_pcl {
        let relative = state.percentile.relative_losses(&losses)?;
        pcl::weights(
            &state.phi,
            WeightInputs {
                losses: &losses,
                relative: &relative,
                labels: &batch.class_ids,
                epoch_pct: pos.epoch_pct,
            },
        )?
    } else {
        vec![1.0 / b as f64; b]
    };
    let w = tape.constant(Tensor::vector(weights.clone()));
    let weighted = tape.mul(obj.per_sample, w)?;
    let total = tape.sum(weighted);
    let loss_theta = tape.value(total).item()?;
    let mut grads = tape.backward(total)?;
    clip(&mut grads, config.clip_norm);
    state.rmsprop.step(&mut state.theta, &grads, config.lr_theta)?;
    drop(tape);

    let psi = match &mut state.aux {
        None => psi,
        Some((aux_theta, aux_opt)) => {
            let mut tape = Tape::new();
            let av = aux_theta.on_tape(&mut tape, true);
            let feats: Vec<Var> = batch.features.iter().map(|f| tape.constant(f.clone())).collect();
            let obj = objective(&mut tape, av, &feats, &ObjectiveInputs { eta: 0.0, ..inputs })?;
            let aux_psi = tape.value(obj.psi).clone();
            let mean = tape.mean(obj.ce);
            let mut grads = tape.backward(mean)?;
            clip(&mut grads, config.clip_norm);
            aux_opt.step(aux_theta, &grads, config.lr_theta)?;
            aux_psi
        }
    };

    // φ phase: θ' is a constant.
    let losses_after = {
        let mut tape = Tape::new();
        let tv = state.theta.on_tape(&mut tape, false);
        let feats: Vec<Var> = batch.features.iter().map(|f| tape.constant(f.clone())).collect();
        let obj = objective(&mut tape, tv, &feats, &inputs)?;
        tape.value(obj.per_sample).data().to_vec()
    };
    check_finite(&losses_after, pos.epoch, pos.batch)?;
    let loss_phi = if config.use_pcl {
        let relative = state.percentile.relative_losses(&losses_after)?;
        let mut tape = Tape::new();
        let pv = state.phi.on_tape(&mut tape, true);
        let omega = pcl::weight_forward(
            &mut tape,
            pv,
            WeightInputs {
                losses: &losses_after,
                relative: &relative,
                labels: &batch.class_ids,
                epoch_pct: pos.epoch_pct,
            },
            state.phi.temperature,
        )?;
        let l = tape.constant(Tensor::vector(losses_after.clone()));
        let weighted = tape.mul(omega, l)?;
        let total = tape.sum(weighted);
        let value = tape.value(total).item()?;
        let mut grads = tape.backward(total)?;
        clip(&mut grads, config.clip_norm);
        state.adam.step(&mut state.phi, &grads, config.lr_phi)?;
        value
    } else {
        losses_after.iter().sum::<f64>() / b as f64
    };

    Ok(StepDiagnostics {
        losses,
        weights,
        loss_theta,
        losses_after,
        loss_phi,
        threshold,
        psi,
    })
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_theta: f64,
    pub loss_phi: f64,
    pub threshold: f64,
    pub prototypes_updated: bool,
    pub metrics: Option<Metrics>,
}

/// Hooks into the training loop. All methods default to no-ops.
pub trait TrainObserver {
    fn on_step(&mut self, _epoch: usize, _batch_index: usize, _batch: &Batch, _diag: &StepDiagnostics) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _state: &TrainState, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
}

/// Shuffle seed of a (1-based) epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch as u64)
        .rotate_left(17)
}

pub fn run(corpus: &Corpus, space: &SemanticSpace, config: &TrainConfig) -> Result<TrainOutcome> {
    run_with(corpus, space, config, &mut ())
}

pub fn run_with(
    corpus: &Corpus,
    space: &SemanticSpace,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let state = TrainState::init(corpus, space, config)?;
    resume_with(state, corpus, space, config, observer)
}

/// Continues training from `state` until `config.epochs` epochs are done.
pub fn resume_with(
    mut state: TrainState,
    corpus: &Corpus,
    space: &SemanticSpace,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    let has_tests = !corpus.indices(crate::data::Split::TestSeen).is_empty()
        && !corpus.indices(crate::data::Split::TestUnseen).is_empty();
    let mut ledger = MappingLedger::new(corpus.seen_classes(), space.attribute_count());
    let mut history = Vec::new();

    for epoch in state.epochs_done + 1..=config.epochs {
        ledger.reset();
        let epoch_pct = (epoch - 1) as f64 / config.epochs as f64;
        let (mut sum_theta, mut sum_phi, mut threshold, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (bi, batch) in batch_iter(corpus, config.batch_size, epoch_seed(config.seed, epoch))?.enumerate() {
            let diag = train_step(
                &mut state,
                &batch,
                space.attributes(),
                config,
                StepPosition {
                    epoch,
                    batch: bi,
                    epoch_pct,
                },
            )?;
            for (i, &class_id) in batch.class_ids.iter().enumerate() {
                ledger.record(class_id, diag.psi.row(i))?;
            }
            sum_theta += diag.loss_theta;
            sum_phi += diag.loss_phi;
            threshold = diag.threshold;
            batches += 1;
            observer.on_step(epoch, bi, &batch, &diag)?;
        }

        let refresh = config.use_pup && epoch >= config.update_start_epoch;
        if refresh {
            state.store.refresh(&ledger, config.neighbor_source)?;
        }
        state.epochs_done = epoch;

        let metrics = if has_tests {
            let evaluator = Evaluator::new(&state.theta, &state.store, corpus, space.attributes(), config.attention_axis)?;
            Some(evaluator.evaluate_all(corpus)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            loss_theta: sum_theta / batches as f64,
            loss_phi: sum_phi / batches as f64,
            threshold,
            prototypes_updated: refresh,
            metrics,
        };
        observer.on_epoch(&state, &record)?;
        history.push(record);
    }
    Ok(TrainOutcome { state, history })
}
