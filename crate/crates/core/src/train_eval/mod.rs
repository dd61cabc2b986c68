//! Group training, evaluation, baselines and experiment protocols.

mod experiments;
mod knn;
mod report;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dam::{self, DamConfig, DamError, DamMode, DropoutGranularity, SquareImage};
use crate::fingerprint::{
    project_to_1d_image, ApIndex, FingerprintDataset, FingerprintError, FingerprintRecord,
    ReducedFingerprint, ReferencePoint, RpKey, RssiImage,
};
use crate::numerics::{argmax, NodeId, NumericsError, Optimizer, OptimizerConfig, Tape, Tensor};
use crate::seed;
use crate::vit::checkpoint::{Checkpoint, CheckpointError, StoredModel};
use crate::vit::{
    forward_graph, patch_batch, ModelSpec, VitConfig, VitError, VitModel, VitWeights,
};

pub use experiments::{
    ablate_dam, extended_device_eval, extended_device_knn, held_out_split, sweep, sweep_csv,
    DamAblation, HeldOut, HeldOutReport, SweepGrid, SweepPoint, SweepRow,
};
pub use knn::{knn_baseline, knn_predict};
pub use report::{
    evaluate, predictions_for, CellStats, EvalReport, Prediction, ReportMetadata, Summary,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] FingerprintError),
    #[error(transparent)]
    Dam(#[from] DamError),
    #[error(transparent)]
    Model(#[from] VitError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged ({scope}, epoch {epoch}): {detail}")]
    Divergence {
        scope: String,
        epoch: usize,
        detail: String,
    },
    #[error("{0}")]
    Eval(String),
}

impl TrainError {
    pub fn category(&self) -> &'static str {
        match self {
            Self::Config(_) | Self::Dam(DamError::InvalidConfig(_)) => "bad-config",
            Self::Model(VitError::Config(_)) => "bad-config",
            Self::Divergence { .. } => "training-divergence",
            Self::Checkpoint(_) => "format-error",
            _ => "format-error",
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(VitError::from(e))
    }
}

/// Per-epoch learning-rate multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from 1 at the first epoch towards 0 after the last.
    Cosine,
}

impl LrSchedule {
    pub fn scale(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
            }
        }
    }
}

/// Whether each building gets its own classifier or one model covers all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    PerBuilding,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub dam: DamConfig,
    pub augmented_copies_per_record: usize,
    pub scope: Scope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            dam: DamConfig::default(),
            augmented_copies_per_record: 4,
            scope: Scope::PerBuilding,
        }
    }
}

impl TrainConfig {
    /// Training profile for [`ModelSpec::scaled`] on the synthetic benchmark:
    /// whole-column dropout, Adam at 2e-3 with cosine decay, 64-pixel
    /// augmentation image. Pixel dropout leaves row 0 clean, and the model
    /// then leans on it and stays brittle to APs a new device misses.
    pub fn scaled() -> Self {
        let mut c = Self {
            optimizer: OptimizerConfig::adam(2e-3),
            lr_schedule: LrSchedule::Cosine,
            ..Self::default()
        };
        c.dam.image_size = ModelSpec::scaled().image_size;
        c.dam.granularity = DropoutGranularity::Column;
        c
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.augmented_copies_per_record == 0 {
            return Err(TrainError::Config(
                "epochs, batch_size and augmented_copies_per_record must be positive".into(),
            ));
        }
        self.optimizer
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.dam.validate()?;
        if self.dam.image_size != spec.image_size {
            return Err(TrainError::Config(format!(
                "dam.image_size {} differs from the model image_size {}",
                self.dam.image_size, spec.image_size
            )));
        }
        spec.build(1)?;
        Ok(())
    }

    /// Copies per record per epoch; deterministic augmentation needs one.
    pub fn effective_copies(&self) -> usize {
        if self.dam.mode == DamMode::Train && self.dam.is_stochastic() {
            self.augmented_copies_per_record
        } else {
            1
        }
    }

    /// The same run with dropout and infill switched off; this also drops
    /// to one copy per record (see [`TrainConfig::effective_copies`]).
    pub fn without_dam(&self) -> Self {
        let mut c = self.clone();
        c.dam.dropout_prob = 0.0;
        c.dam.infill_sigma = 0.0;
        c
    }
}

/// Averages over the training samples of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy on the augmented training batches of this epoch.
    pub accuracy: f64,
    pub samples: usize,
    /// How many training samples each device contributed.
    pub device_samples: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHistory {
    pub building_id: Option<u32>,
    pub num_classes: usize,
    pub epochs: Vec<EpochStats>,
}

/// Everything needed to map raw fingerprints to RP predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    /// `None` for a joint model covering every building.
    pub building_id: Option<u32>,
    pub ap_index: ApIndex,
    pub classes: Vec<ReferencePoint>,
    pub dam: DamConfig,
    pub model: VitModel<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    building_id: Option<u32>,
    ap_ids: Vec<String>,
    classes: Vec<ReferencePoint>,
    dam: DamConfig,
}

impl TrainedModel {
    pub fn covers(&self, building_id: u32) -> bool {
        self.building_id.is_none_or(|b| b == building_id)
    }

    /// Eval-mode DAM image of one record on this model's AP layout. APs
    /// the model never saw are dropped.
    pub fn image(&self, record: &FingerprintRecord) -> Result<SquareImage> {
        self.image_of(&record.reduce()?)
    }

    pub fn image_of(&self, fingerprint: &ReducedFingerprint) -> Result<SquareImage> {
        let one_d = project_to_1d_image(fingerprint, &self.ap_index);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Ok(dam::apply(
            &one_d,
            &self.dam.with_mode(DamMode::Eval),
            &mut rng,
        )?)
    }

    /// Class index per image, batched.
    pub fn classify(&self, images: &[SquareImage]) -> Result<Vec<usize>> {
        let c = self.classes.len();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let refs: Vec<&SquareImage> = chunk.iter().collect();
            let logits = self.model.logits(&refs)?;
            out.extend(logits.data().chunks(c).map(argmax));
        }
        Ok(out)
    }

    pub fn predict(&self, fingerprint: &ReducedFingerprint) -> Result<ReferencePoint> {
        let img = self.image_of(fingerprint)?;
        let (class, _) = self.model.predict(&img)?;
        Ok(self.classes[class])
    }
}

/// The models produced by one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub models: Vec<TrainedModel>,
    pub spec: ModelSpec,
    pub train_config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    spec: ModelSpec,
    train_config: TrainConfig,
}

impl ModelBundle {
    pub fn model_for(&self, building_id: u32) -> Option<&TrainedModel> {
        self.models.iter().find(|m| m.covers(building_id))
    }

    pub fn predict(&self, fingerprint: &ReducedFingerprint) -> Result<ReferencePoint> {
        self.model_for(fingerprint.building_id)
            .ok_or_else(|| {
                TrainError::Eval(format!(
                    "no model covers building {}",
                    fingerprint.building_id
                ))
            })?
            .predict(fingerprint)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let models = self
            .models
            .iter()
            .map(|m| {
                let meta = ModelMeta {
                    building_id: m.building_id,
                    ap_ids: m.ap_index.ids().iter().map(|s| s.to_string()).collect(),
                    classes: m.classes.clone(),
                    dam: m.dam.clone(),
                };
                Ok(StoredModel {
                    weights: m.model.weights().clone(),
                    metadata: to_json(&meta)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = BundleMeta {
            spec: self.spec.clone(),
            train_config: self.train_config.clone(),
        };
        Ok(Checkpoint {
            models,
            metadata: to_json(&meta)?,
        })
    }

    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self> {
        let bad = |e: serde_json::Error| CheckpointError::Manifest(e.to_string());
        let meta: BundleMeta = serde_json::from_value(checkpoint.metadata).map_err(bad)?;
        let mut models = Vec::with_capacity(checkpoint.models.len());
        for stored in checkpoint.models {
            let m: ModelMeta = serde_json::from_value(stored.metadata).map_err(bad)?;
            let index = ApIndex::new(m.ap_ids.iter().map(String::as_str));
            let config = stored.weights.config();
            if index.len() != m.ap_ids.len()
                || index.len() > config.image_size
                || m.classes.len() != config.num_classes
                || m.dam.image_size != config.image_size
            {
                return Err(CheckpointError::Manifest(
                    "model metadata disagrees with its config".into(),
                )
                .into());
            }
            m.dam.validate()?;
            models.push(TrainedModel {
                building_id: m.building_id,
                ap_index: index,
                classes: m.classes,
                dam: m.dam,
                model: VitModel::new(stored.weights),
            });
        }
        Ok(Self {
            models,
            spec: meta.spec,
            train_config: meta.train_config,
        })
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    serde_json::to_value(value).map_err(|e| TrainError::Config(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub bundle: ModelBundle,
    pub history: Vec<ModelHistory>,
}

const JOINT_LABEL: u64 = u64::MAX;
const INIT_LABEL: u64 = u64::MAX - 1;

/// Trains one classifier per building (or one joint model) on every record
/// of `dataset`, pooling all devices.
pub fn train(
    dataset: &FingerprintDataset,
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate(spec)?;
    if dataset.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let scopes: Vec<Option<u32>> = match config.scope {
        Scope::PerBuilding => {
            let set: BTreeSet<u32> = dataset.records().iter().map(|r| r.building_id).collect();
            set.into_iter().map(Some).collect()
        }
        Scope::Joint => vec![None],
    };
    let mut models = Vec::new();
    let mut history = Vec::new();
    for scope in scopes {
        let records: Vec<&FingerprintRecord> = dataset
            .records()
            .iter()
            .filter(|r| scope.is_none_or(|b| r.building_id == b))
            .collect();
        let (model, epochs) = train_scope(scope, &records, dataset, spec, config)?;
        history.push(ModelHistory {
            building_id: scope,
            num_classes: model.classes.len(),
            epochs,
        });
        models.push(model);
    }
    Ok(TrainOutput {
        bundle: ModelBundle {
            models,
            spec: spec.clone(),
            train_config: config.clone(),
        },
        history,
    })
}

fn scope_name(scope: Option<u32>) -> String {
    scope.map_or_else(|| "joint model".into(), |b| format!("building {b}"))
}

fn train_scope(
    scope: Option<u32>,
    records: &[&FingerprintRecord],
    dataset: &FingerprintDataset,
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<(TrainedModel, Vec<EpochStats>)> {
    let name = scope_name(scope);
    let ap_index = ApIndex::new(
        records
            .iter()
            .flat_map(|r| r.readings.iter().map(|a| a.ap.clone())),
    );
    if ap_index.len() > spec.image_size {
        return Err(TrainError::Config(format!(
            "{name} has {} access points but the image holds only {}",
            ap_index.len(),
            spec.image_size
        )));
    }
    let keys: BTreeSet<RpKey> = records.iter().map(|r| r.key()).collect();
    let classes: Vec<ReferencePoint> = keys
        .iter()
        .map(|k| {
            dataset.reference_point(*k).copied().ok_or_else(|| {
                TrainError::Eval(format!("no coordinates for reference point {k:?}"))
            })
        })
        .collect::<Result<_>>()?;
    let label_of: BTreeMap<RpKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let vit_config = spec.build(classes.len())?;
    let images: Vec<RssiImage> = records
        .iter()
        .map(|r| Ok(project_to_1d_image(&r.reduce()?, &ap_index)))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = records.iter().map(|r| label_of[&r.key()]).collect();

    let scope_label = scope.map_or(JOINT_LABEL, u64::from);
    let mut weights = VitWeights::<f32>::init(
        &vit_config,
        seed::derive(config.seed, &[scope_label, INIT_LABEL]),
    )?;
    let mut optimizer = Optimizer::<f32>::new(config.optimizer.clone());
    // Eval mode turns the stochastic stages off for the whole run.
    let dam_train = &config.dam;
    let copies = config.effective_copies();
    let mut stats = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        optimizer.set_lr_scale(config.lr_schedule.scale(epoch, config.epochs));
        let mut rng = seed::stream(config.seed, &[scope_label, epoch as u64]);
        let mut order: Vec<usize> = (0..records.len() * copies)
            .map(|i| i % records.len())
            .collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut device_samples = BTreeMap::new();
        for batch in order.chunks(config.batch_size) {
            let mut squares = Vec::with_capacity(batch.len());
            for &i in batch {
                squares.push(dam::apply(&images[i], dam_train, &mut rng)?);
                *device_samples
                    .entry(records[i].device_id.clone())
                    .or_insert(0) += 1;
            }
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, hits) = step(
                &mut weights,
                &mut optimizer,
                &vit_config,
                &squares,
                &batch_labels,
            )
            .map_err(|e| diverged(&name, epoch, e))?;
            loss_sum += loss * batch.len() as f64;
            correct += hits;
        }
        stats.push(EpochStats {
            epoch,
            loss: loss_sum / order.len() as f64,
            accuracy: correct as f64 / order.len() as f64,
            samples: order.len(),
            device_samples,
        });
    }
    Ok((
        TrainedModel {
            building_id: scope,
            ap_index,
            classes,
            dam: config.dam.clone(),
            model: VitModel::new(weights),
        },
        stats,
    ))
}

fn diverged(scope: &str, epoch: usize, e: TrainError) -> TrainError {
    match e {
        TrainError::Model(VitError::Numerics(inner @ NumericsError::NonFinite { .. })) => {
            TrainError::Divergence {
                scope: scope.into(),
                epoch,
                detail: inner.to_string(),
            }
        }
        other => other,
    }
}

/// One optimizer update; returns the batch loss and the number of correct
/// predictions made before the update.
fn step(
    weights: &mut VitWeights<f32>,
    optimizer: &mut Optimizer<f32>,
    config: &VitConfig,
    images: &[SquareImage],
    labels: &[usize],
) -> Result<(f64, usize)> {
    let refs: Vec<&SquareImage> = images.iter().collect();
    let mut tape = Tape::<f32>::new();
    let params: Vec<NodeId> = weights
        .tensors()
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect();
    let input = tape.constant(patch_batch::<f32>(&refs, config)?);
    let logits = forward_graph(&mut tape, config, &params, input, images.len())?;
    let loss = tape.cross_entropy(logits, labels)?;
    let loss_value = f64::from(tape.value(loss).data()[0]);
    if !loss_value.is_finite() {
        return Err(NumericsError::NonFinite {
            op: "cross_entropy",
        }
        .into());
    }
    let hits = tape
        .value(logits)
        .data()
        .chunks(config.num_classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor<f32>> = params.iter().map(|&p| grads.take(p)).collect();
    optimizer.step(weights.tensors_mut(), &grads)?;
    if weights.tensors().iter().any(|t| !t.all_finite()) {
        return Err(NumericsError::NonFinite {
            op: "optimizer_step",
        }
        .into());
    }
    Ok((loss_value, hits))
}
