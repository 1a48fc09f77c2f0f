//! Metric-learning training loop: P×Q batches, augmentation, triplet
//! mining on fingerprint-level embeddings, AdamW with a cosine schedule.

mod mining;
mod optim;

pub use mining::{distance, mine_triplets, pairwise_distances, triplet_loss, MiningMode, Triplet};
pub use optim::{cosine_lr, OptimizerState, StepOutcome, ADAM_EPS, BETA1, BETA2, LR_MIN};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{centroid, group_by_identity, rotate, Record};
use crate::error::{Error, Result};
use crate::graph::Minutia;
use crate::model::{embed_on_tape, ModelConfig, ParameterSet, StatUpdates};
use crate::numeric::{Matrix, Mode, Tape};
use crate::rng::{self, StreamRng};

/// Rigid augmentation drawn once per fingerprint per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub rotation_deg: f64,
    pub translation: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            rotation_deg: 15.0,
            translation: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Identities per batch (P).
    pub identities_per_batch: usize,
    /// Impressions per identity (Q), clamped to what each identity has.
    pub impressions_per_identity: usize,
    /// Cosine horizon in optimizer steps; `None` spans the whole run.
    pub schedule_horizon: Option<u64>,
    pub seed: u64,
    pub mining: MiningMode,
    pub augment: AugmentSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.5,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            epochs: 30,
            identities_per_batch: 16,
            impressions_per_identity: 4,
            schedule_horizon: None,
            seed: 0,
            mining: MiningMode::Hardest,
            augment: AugmentSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::Validation(format!(
                "train.margin must be positive, got {}",
                self.margin
            )));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("augment.rotation_deg", self.augment.rotation_deg),
            ("augment.translation", self.augment.translation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!(
                    "train.{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.augment.rotation_deg > 180.0 {
            return Err(Error::Validation(
                "train.augment.rotation_deg must be at most 180".into(),
            ));
        }
        if self.identities_per_batch < 2 {
            return Err(Error::Validation(format!(
                "train.identities_per_batch must be at least 2, got {}",
                self.identities_per_batch
            )));
        }
        if self.impressions_per_identity < 2 {
            return Err(Error::Validation(format!(
                "train.impressions_per_identity must be at least 2, got {}",
                self.impressions_per_identity
            )));
        }
        if self.identities_per_batch * self.impressions_per_identity < 4 {
            return Err(Error::Validation("train batch size must be at least 4".into()));
        }
        if self.schedule_horizon == Some(0) {
            return Err(Error::Validation("train.schedule_horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Applies one random rotation about the centroid (orientations shifted by
/// the same angle) followed by one random translation. Coordinates are not
/// clamped, so the map is an exact rigid motion.
pub fn augment(minutiae: &[Minutia], spec: &AugmentSpec, r: &mut StreamRng) -> Vec<Minutia> {
    let mut out = minutiae.to_vec();
    if spec.rotation_deg > 0.0 {
        let max = spec.rotation_deg.to_radians();
        let angle = r.random_range(-max..=max);
        let c = centroid(&out);
        rotate(&mut out, c, angle);
    }
    if spec.translation > 0.0 {
        let t = spec.translation;
        let (tx, ty) = (r.random_range(-t..=t), r.random_range(-t..=t));
        for m in out.iter_mut() {
            m.x += tx;
            m.y += ty;
        }
    }
    out
}

/// Record indices for every batch of `epoch`. Identities are shuffled and
/// cut into groups of P; a trailing group with a single identity joins the
/// previous one. Each identity contributes up to Q impressions.
pub fn epoch_batches(records: &[Record], config: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let groups = group_by_identity(records);
    let mut r = rng::stream(config.seed, rng::BATCHES + epoch as u64);
    let mut ids: Vec<&Vec<usize>> = groups.values().collect();
    ids.shuffle(&mut r);
    let mut chunks: Vec<Vec<&Vec<usize>>> = ids.chunks(config.identities_per_batch).map(<[_]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
        let last = chunks.pop().expect("nonempty");
        chunks.last_mut().expect("nonempty").extend(last);
    }
    chunks
        .into_iter()
        .map(|chunk| {
            let mut batch = Vec::new();
            for members in chunk {
                if members.len() <= config.impressions_per_identity {
                    batch.extend(members.iter().copied());
                } else {
                    let mut picked: Vec<usize> = members
                        .choose_multiple(&mut r, config.impressions_per_identity)
                        .copied()
                        .collect();
                    picked.sort_unstable();
                    batch.extend(picked);
                }
            }
            batch
        })
        .collect()
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    pub active_triplet_fraction: f64,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ParameterSet,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// Batches processed, including skipped ones; drives the schedule.
    pub global_step: u64,
}

impl TrainState {
    pub fn fresh(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        let params = ParameterSet::init(model, train.seed)?;
        let optimizer = OptimizerState::new(params.named_tensors().into_iter().map(|(_, m)| m), train.weight_decay);
        Ok(TrainState {
            params,
            optimizer,
            epoch: 0,
            global_step: 0,
        })
    }
}

/// Checks the dataset can feed training: ≥ 2 identities, each with ≥ 2
/// impressions.
pub fn check_training_data(records: &[Record]) -> Result<()> {
    let groups = group_by_identity(records);
    if groups.len() < 2 {
        return Err(Error::DataQuality(format!(
            "training needs at least 2 identities, got {}",
            groups.len()
        )));
    }
    if let Some((id, m)) = groups.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::DataQuality(format!(
            "identity {id} has {} impression(s); training needs at least 2",
            m.len()
        )));
    }
    Ok(())
}

/// Result of one optimizer step.
pub struct BatchOutcome {
    pub loss: f64,
    pub triplets: usize,
    pub active: usize,
    pub applied: bool,
}

/// Forward, mining, backward and update for one batch of fingerprints.
pub fn train_step(
    params: &mut ParameterSet,
    optimizer: &mut OptimizerState,
    fingerprints: &[&[Minutia]],
    labels: &[u64],
    config: &TrainConfig,
    lr: f64,
) -> Result<BatchOutcome> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut stats = StatUpdates::new();
    let emb = embed_on_tape(&mut tape, &bound, params, fingerprints, Mode::Train, &mut stats)?;
    let dist = pairwise_distances(tape.value(emb))?;
    let triplets = mine_triplets(&dist, labels, config.margin, config.mining)?;
    if triplets.is_empty() {
        log::info!("batch of {} produced no triplets; step skipped", labels.len());
        return Ok(BatchOutcome {
            loss: 0.0,
            triplets: 0,
            active: 0,
            applied: false,
        });
    }
    let active = triplets
        .iter()
        .filter(|t| dist.get(t.anchor, t.positive) - dist.get(t.anchor, t.negative) + config.margin > 0.0)
        .count();
    let loss_var = tape.triplet_loss(emb, &triplets, config.margin)?;
    let loss = tape.value(loss_var).item()?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {loss}")));
    }
    let grads = tape.backward(loss_var)?;
    let grad_list: Vec<&Matrix> = (0..params.named_tensors().len())
        .map(|k| grads.get(k).expect("every parameter is registered"))
        .collect();
    let outcome = optimizer.step(&mut params.tensors_mut(), &grad_list, lr)?;
    let applied = outcome == StepOutcome::Applied;
    if applied {
        params.apply_stats(&stats);
    } else {
        log::warn!("non-finite gradient; optimizer step skipped");
    }
    Ok(BatchOutcome {
        loss,
        triplets: triplets.len(),
        active,
        applied,
    })
}

/// Trains from `state` until `config.epochs` epochs are complete. `on_epoch`
/// sees each epoch's log line and the state after it; an error from the
/// callback stops training.
pub fn train<F>(records: &[Record], config: &TrainConfig, mut state: TrainState, mut on_epoch: F) -> Result<TrainState>
where
    F: FnMut(&EpochLog, &TrainState) -> Result<()>,
{
    config.validate()?;
    state.params.validate()?;
    state
        .optimizer
        .validate(state.params.named_tensors().into_iter().map(|(_, m)| m))?;
    check_training_data(records)?;
    let steps_per_epoch = epoch_batches(records, config, 0).len() as u64;
    let horizon = config
        .schedule_horizon
        .unwrap_or(steps_per_epoch * config.epochs as u64);
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let mut aug = rng::stream(config.seed, rng::AUGMENT + epoch as u64);
        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        let mut triplets = 0usize;
        let mut active = 0usize;
        let mut lr = cosine_lr(state.global_step, horizon, config.learning_rate);
        for batch in epoch_batches(records, config, epoch) {
            let augmented: Vec<Vec<Minutia>> = batch
                .iter()
                .map(|&i| augment(&records[i].minutiae, &config.augment, &mut aug))
                .collect();
            let views: Vec<&[Minutia]> = augmented.iter().map(Vec::as_slice).collect();
            let labels: Vec<u64> = batch.iter().map(|&i| records[i].identity_id).collect();
            lr = cosine_lr(state.global_step, horizon, config.learning_rate);
            let out = train_step(&mut state.params, &mut state.optimizer, &views, &labels, config, lr)?;
            state.global_step += 1;
            if out.triplets > 0 {
                loss_sum += out.loss;
                loss_batches += 1;
                triplets += out.triplets;
                active += out.active;
            }
        }
        state.epoch += 1;
        let entry = EpochLog {
            epoch: state.epoch,
            mean_loss: if loss_batches == 0 {
                0.0
            } else {
                loss_sum / loss_batches as f64
            },
            lr,
            active_triplet_fraction: if triplets == 0 {
                0.0
            } else {
                active as f64 / triplets as f64
            },
        };
        log::info!(
            "epoch {} loss {:.6} lr {:.3e} active {:.3}",
            entry.epoch,
            entry.mean_loss,
            entry.lr,
            entry.active_triplet_fraction
        );
        on_epoch(&entry, &state)?;
    }
    Ok(state)
}
