//! Region-wise training: dataset splits, the reweighted training loop for
//! the fully connected head, per-voxel layer selection and orchestration of
//! all three model families.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::gabor::{build_bank, GaborConfig};
use crate::io::bundle::{DatasetRef, ModelBundle, BUNDLE_VERSION};
use crate::io::Dataset;
use crate::mlp::{self, evaluate_loss, forward, init_params, CorrelationMode, MlpHeadParams, TrainConfig, VoxelWeights};
use crate::rng::{derive_seed, seeded};
use crate::sparse::{fit_voxelwise, predict_linear, LinearEncodingModel, RompConfig};
use crate::standardize::Standardizer;
use crate::stats::pearson;
use crate::{FeatureMatrix, ResponseMatrix};

/// Layer id under which Gabor features are stored.
pub const GABOR_LAYER: u32 = 0;

/// Disjoint sample indices. Indices refer to the estimation block; when
/// `test_external` is set the test partition is the dataset's separate
/// test block and `test_indices` is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub test_external: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 1630,
            validation: 120,
            test: 120,
        }
    }
}

/// Seeded uniform partition of `0..sample_count`. Samples beyond the
/// requested sizes are left out. Each partition is returned sorted.
pub fn split_dataset(sample_count: usize, sizes: SplitSizes, seed: u64) -> Result<DatasetSplit> {
    let requested = sizes.train + sizes.validation + sizes.test;
    if requested > sample_count {
        return Err(Error::SizeOverflow {
            requested,
            available: sample_count,
        });
    }
    let mut order: Vec<usize> = (0..sample_count).collect();
    order.shuffle(&mut seeded(seed));
    let take = |range: std::ops::Range<usize>| {
        let mut v = order[range].to_vec();
        v.sort_unstable();
        v
    };
    let a = sizes.train;
    let b = a + sizes.validation;
    Ok(DatasetSplit {
        train_indices: take(0..a),
        validation_indices: take(a..b),
        test_indices: take(b..requested),
        test_external: false,
    })
}

impl DatasetSplit {
    /// Train/validation split of an estimation block whose test block is
    /// supplied separately.
    pub fn holdout(estimation_samples: usize, validation: usize, seed: u64) -> Result<Self> {
        let train = estimation_samples.checked_sub(validation).ok_or(Error::SizeOverflow {
            requested: validation,
            available: estimation_samples,
        })?;
        let mut split = split_dataset(
            estimation_samples,
            SplitSizes {
                train,
                validation,
                test: 0,
            },
            seed,
        )?;
        split.test_external = true;
        Ok(split)
    }
}

pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Voxel loss weights from validation correlations:
/// 0 below zero, `C / threshold` up to the threshold, 1 above.
pub fn update_mu(validation_c: &[f64], threshold: f64) -> Result<VoxelWeights> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidConfig(format!("mu threshold must be > 0, got {threshold}")));
    }
    let mu = validation_c
        .iter()
        .enumerate()
        .map(|(v, &c)| {
            if c.is_nan() {
                Err(Error::NonFinite(format!("validation correlation of voxel {v}")))
            } else if c < 0.0 {
                Ok(0.0)
            } else if c < threshold {
                Ok(c / threshold)
            } else {
                Ok(1.0)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VoxelWeights { mu })
}

/// Per-voxel correlations with undefined (constant) series scored 0.
pub fn correlations_or_zero(measured: &ResponseMatrix, predicted: &ResponseMatrix) -> Vec<f64> {
    (0..measured.ncols())
        .map(|v| {
            let m: Vec<f64> = measured.column(v).iter().copied().collect();
            let p: Vec<f64> = predicted.column(v).iter().copied().collect();
            pearson(&m, &p).unwrap_or(0.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingStatus {
    Converged,
    /// Hit `max_epochs` before the score stopped improving.
    MaxEpochs,
    /// Every voxel weight dropped to zero, so the loss has no gradient left.
    AllWeightsZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f64,
    pub mean_validation_c: f64,
    /// Validation correlation averaged with the epoch's voxel weights.
    pub score: f64,
    pub mean_mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLayerModel {
    pub standardizer: Standardizer,
    pub params: MlpHeadParams,
    pub status: TrainingStatus,
    pub best_epoch: usize,
    pub best_score: f64,
    /// Weights in force after the last completed epoch.
    pub final_mu: VoxelWeights,
}

impl MlpLayerModel {
    pub fn predict(&self, features: &FeatureMatrix) -> Result<ResponseMatrix> {
        forward(&self.params, &self.standardizer.apply(features)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerTraining {
    pub model: MlpLayerModel,
    pub log: Vec<EpochRecord>,
    /// Per-voxel validation correlations of the best snapshot.
    pub validation_c: Vec<f64>,
}

fn minibatches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(batch_size).collect();
    // a short tail makes a noisy correlation estimate; fold it into its neighbour
    if batches.len() > 1 && batches.last().unwrap().len() < batch_size / 2 {
        batches.pop();
        let start = (batches.len() - 1) * batch_size;
        *batches.last_mut().unwrap() = &order[start..];
    }
    batches
}

/// Trains one head on one layer's features. `features` and `responses`
/// cover the estimation block; `split` selects the train and validation rows.
pub fn train_roi_layer(
    features: &FeatureMatrix,
    responses: &ResponseMatrix,
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<LayerTraining> {
    config.validate()?;
    if features.nrows() != responses.nrows() {
        return Err(Error::SizeMismatch(format!(
            "{} feature rows vs {} response rows",
            features.nrows(),
            responses.nrows()
        )));
    }
    for &i in split.train_indices.iter().chain(&split.validation_indices) {
        if i >= features.nrows() {
            return Err(Error::SizeMismatch(format!(
                "split index {i} outside {} samples",
                features.nrows()
            )));
        }
    }
    if split.train_indices.len() < 3 || split.validation_indices.len() < 3 {
        return Err(Error::EmptyInput("train and validation need at least 3 samples".into()));
    }

    let raw_train = select_rows(features, &split.train_indices);
    let standardizer = Standardizer::fit(&raw_train);
    let x_train = standardizer.apply(&raw_train)?;
    let x_val = standardizer.apply(&select_rows(features, &split.validation_indices))?;
    let r_train = select_rows(responses, &split.train_indices);
    let r_val = select_rows(responses, &split.validation_indices);

    let voxels = responses.ncols();
    let mut params = init_params(features.ncols(), voxels, config);
    let mut adam = AdamState::new(params.param_count());
    let mut rng = seeded(derive_seed(config.seed, 1));
    let mut mu = VoxelWeights::ones(voxels);

    let initial_c = correlations_or_zero(&r_val, &forward(&params, &x_val)?);
    let mut best = (f64::NEG_INFINITY, params.clone(), 0usize, initial_c);
    let mut log = Vec::new();
    let mut stale = 0;
    let mut status = TrainingStatus::MaxEpochs;
    let mut order: Vec<usize> = (0..x_train.nrows()).collect();

    for epoch in 1..=config.max_epochs {
        let weight_total = mu.total();
        if weight_total == 0.0 {
            status = TrainingStatus::AllWeightsZero;
            break;
        }
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let batches = minibatches(&order, config.batch_size);
        for batch in &batches {
            let xb = select_rows(&x_train, batch);
            let rb = select_rows(&r_train, batch);
            let eval = evaluate_loss(&params, &xb, &rb, &mu, config.lambda, CorrelationMode::Training, true)?;
            loss_sum += eval.loss;
            mlp::adam_step(&mut params, &eval.gradient.unwrap(), &mut adam, config.learning_rate);
        }
        if !params.to_flat().iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }

        let val_c = correlations_or_zero(&r_val, &forward(&params, &x_val)?);
        let score = val_c.iter().zip(&mu.mu).map(|(c, m)| c * m).sum::<f64>() / weight_total;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            mean_validation_c: val_c.iter().sum::<f64>() / voxels.max(1) as f64,
            score,
            mean_mu: mu.mean(),
        };
        debug!(
            "epoch={} train_loss={:.6} mean_val_c={:.6} score={:.6} mean_mu={:.4}",
            record.epoch, record.train_loss, record.mean_validation_c, record.score, record.mean_mu
        );
        log.push(record);

        if score >= best.0 + config.min_improvement {
            stale = 0;
        } else {
            stale += 1;
        }
        if score > best.0 {
            best = (score, params.clone(), epoch, val_c.clone());
        }
        if stale >= config.patience {
            status = TrainingStatus::Converged;
            break;
        }
        mu = update_mu(&val_c, config.mu_threshold)?;
    }

    match status {
        TrainingStatus::MaxEpochs => warn!(
            "event=non_convergence reason=max_epochs epochs={} best_epoch={}",
            config.max_epochs, best.2
        ),
        TrainingStatus::AllWeightsZero => warn!(
            "event=non_convergence reason=all_weights_zero epochs={} best_epoch={}",
            log.len(),
            best.2
        ),
        TrainingStatus::Converged => {}
    }
    let (best_score, params, best_epoch, validation_c) = best;
    Ok(LayerTraining {
        model: MlpLayerModel {
            standardizer,
            params,
            status,
            best_epoch,
            best_score,
            final_mu: mu,
        },
        log,
        validation_c,
    })
}

/// Per voxel, the layer with the highest validation correlation. Ties and
/// NaN go to the lower layer id.
pub fn select_layer_per_voxel(candidates: &[(u32, Vec<f64>)]) -> Result<Vec<u32>> {
    let mut sorted: Vec<&(u32, Vec<f64>)> = candidates.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let first = sorted.first().ok_or(Error::EmptyCandidates)?;
    let voxels = first.1.len();
    if let Some((id, c)) = sorted.iter().find(|(_, c)| c.len() != voxels) {
        return Err(Error::SizeMismatch(format!(
            "layer {id} scores {} voxels, expected {voxels}",
            c.len()
        )));
    }
    Ok((0..voxels)
        .map(|v| {
            let mut best = (first.0, f64::NEG_INFINITY);
            for (id, c) in &sorted {
                let score = if c[v].is_nan() { f64::NEG_INFINITY } else { c[v] };
                if score > best.1 {
                    best = (*id, score);
                }
            }
            best.0
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gwp,
    DnnLinear,
    DnnTl,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Gwp => "gwp",
            ModelKind::DnnLinear => "dnn_linear",
            ModelKind::DnnTl => "dnn_tl",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Estimation samples held out for validation; the rest train.
    pub validation_samples: usize,
    pub train: TrainConfig,
    pub romp: RompConfig,
    /// `image_size` is taken from the dataset.
    pub gabor: GaborConfig,
    /// Layers wider than this are randomly projected down; `None` disables.
    pub max_feature_dim: Option<usize>,
    /// Restrict training to these layers; all manifest layers when absent.
    pub layers: Option<Vec<u32>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            validation_samples: 120,
            train: TrainConfig::default(),
            romp: RompConfig::default(),
            gabor: GaborConfig::default(),
            max_feature_dim: Some(4096),
            layers: None,
        }
    }
}

/// Nonzeros per input feature in [`SparseProjection`].
pub const PROJECTION_NNZ: usize = 4;

/// Seeded sparse sign projection. Every input feature is added, with random
/// sign and weight `1/sqrt(PROJECTION_NNZ)`, to `PROJECTION_NNZ` distinct
/// output coordinates. Nothing is stored: the pattern is regenerated from
/// the seed, so very wide layers cost no projection-matrix memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseProjection {
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
}

impl SparseProjection {
    fn pattern(&self, j: usize) -> Vec<(usize, f64)> {
        let mut rng = seeded(derive_seed(self.seed, j as u64));
        let nnz = PROJECTION_NNZ.min(self.output_dim);
        let w = 1.0 / (nnz as f64).sqrt();
        rand::seq::index::sample(&mut rng, self.output_dim, nnz)
            .into_iter()
            .map(|k| (k, if rng.random::<bool>() { w } else { -w }))
            .collect()
    }

    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.ncols() != self.input_dim {
            return Err(Error::SizeMismatch(format!(
                "projection expects {} features, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let mut out = FeatureMatrix::zeros(x.nrows(), self.output_dim);
        for j in 0..self.input_dim {
            for (k, w) in self.pattern(j) {
                out.column_mut(k).axpy(w, &x.column(j), 1.0);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Estimation,
    Test,
}

pub fn projection_for(config: &ModelConfig, seed: u64, layer: u32, dim: usize) -> Option<SparseProjection> {
    match config.max_feature_dim {
        Some(max) if dim > max && layer != GABOR_LAYER => Some(SparseProjection {
            input_dim: dim,
            output_dim: max,
            seed: derive_seed(seed, 200 + layer as u64),
        }),
        _ => None,
    }
}

fn model_layers(dataset: &Dataset, kind: ModelKind, config: &ModelConfig) -> Result<Vec<u32>> {
    if kind == ModelKind::Gwp {
        return Ok(vec![GABOR_LAYER]);
    }
    let layers = match &config.layers {
        Some(ids) => ids.clone(),
        None => dataset.layers.keys().copied().collect(),
    };
    if layers.is_empty() {
        return Err(Error::MissingLayerFeatures(1));
    }
    if let Some(&missing) = layers.iter().find(|id| !dataset.layers.contains_key(id)) {
        return Err(Error::MissingLayerFeatures(missing));
    }
    Ok(layers)
}

/// The feature matrices a model of `kind` consumes, keyed by layer id,
/// after any projection.
pub fn prepare_features(
    dataset: &Dataset,
    block: Block,
    kind: ModelKind,
    config: &ModelConfig,
    seed: u64,
) -> Result<BTreeMap<u32, FeatureMatrix>> {
    let layers = model_layers(dataset, kind, config)?;
    if kind == ModelKind::Gwp {
        let stimuli = dataset.stimuli.as_ref().ok_or_else(|| {
            Error::InvalidConfig("gwp models need stimulus images in the dataset".into())
        })?;
        let mut gabor = config.gabor.clone();
        gabor.image_size = dataset.manifest.stimuli.as_ref().unwrap().image_size;
        let bank = build_bank(&gabor)?;
        let images = match block {
            Block::Estimation => &stimuli.estimation,
            Block::Test => &stimuli.test,
        };
        return Ok(BTreeMap::from([(GABOR_LAYER, bank.extract_batch(images)?)]));
    }
    layers
        .into_iter()
        .map(|id| {
            let split = &dataset.layers[&id];
            let x = match block {
                Block::Estimation => &split.estimation,
                Block::Test => &split.test,
            };
            let x = match projection_for(config, seed, id, x.ncols()) {
                Some(p) => p.apply(x)?,
                None => x.clone(),
            };
            Ok((id, x))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerModel {
    Linear(LinearEncodingModel),
    Mlp(MlpLayerModel),
}

impl LayerModel {
    pub fn predict(&self, features: &FeatureMatrix) -> Result<ResponseMatrix> {
        match self {
            LayerModel::Linear(m) => predict_linear(m, features),
            LayerModel::Mlp(m) => m.predict(features),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedRoiModel {
    pub name: String,
    pub layers: BTreeMap<u32, LayerModel>,
    pub selected_layer: Vec<u32>,
    /// Validation correlation of each voxel's selected layer.
    pub validation_accuracy: Vec<f64>,
    pub logs: BTreeMap<u32, Vec<EpochRecord>>,
}

impl TrainedRoiModel {
    pub fn voxels(&self) -> usize {
        self.selected_layer.len()
    }

    /// Each voxel's prediction from its selected layer.
    pub fn predict(&self, features: &BTreeMap<u32, FeatureMatrix>) -> Result<ResponseMatrix> {
        let mut out: Option<ResponseMatrix> = None;
        for (id, model) in &self.layers {
            if !self.selected_layer.contains(id) {
                continue;
            }
            let x = features.get(id).ok_or(Error::MissingLayerFeatures(*id))?;
            let pred = model.predict(x)?;
            let out = out.get_or_insert_with(|| ResponseMatrix::zeros(pred.nrows(), self.voxels()));
            for (v, _) in self.selected_layer.iter().enumerate().filter(|(_, l)| *l == id) {
                out.set_column(v, &pred.column(v));
            }
        }
        out.ok_or_else(|| Error::EmptyInput(format!("ROI {} has no voxels", self.name)))
    }
}

fn train_roi(
    name: &str,
    features: &BTreeMap<u32, FeatureMatrix>,
    responses: &ResponseMatrix,
    split: &DatasetSplit,
    kind: ModelKind,
    config: &ModelConfig,
    seed: u64,
) -> Result<TrainedRoiModel> {
    let r_train = select_rows(responses, &split.train_indices);
    let r_val = select_rows(responses, &split.validation_indices);
    let results = features
        .par_iter()
        .map(|(&id, x)| {
            let (model, log, val_c) = match kind {
                ModelKind::Gwp | ModelKind::DnnLinear => {
                    let mut m = fit_voxelwise(&select_rows(x, &split.train_indices), &r_train, &config.romp)?;
                    m.layer_id = Some(id);
                    let pred = predict_linear(&m, &select_rows(x, &split.validation_indices))?;
                    (LayerModel::Linear(m), Vec::new(), correlations_or_zero(&r_val, &pred))
                }
                ModelKind::DnnTl => {
                    let train = TrainConfig {
                        seed: derive_seed(seed, id as u64),
                        ..config.train.clone()
                    };
                    let t = train_roi_layer(x, responses, split, &train)?;
                    (LayerModel::Mlp(t.model), t.log, t.validation_c)
                }
            };
            let mean = val_c.iter().sum::<f64>() / val_c.len().max(1) as f64;
            info!("roi={name} layer={id} kind={kind} mean_validation_c={mean:.6}");
            Ok((id, model, log, val_c))
        })
        .collect::<Result<Vec<_>>>()?;

    let candidates: Vec<(u32, Vec<f64>)> = results.iter().map(|(id, _, _, c)| (*id, c.clone())).collect();
    let selected_layer = select_layer_per_voxel(&candidates)?;
    let by_layer: BTreeMap<u32, &Vec<f64>> = candidates.iter().map(|(id, c)| (*id, c)).collect();
    let validation_accuracy = selected_layer
        .iter()
        .enumerate()
        .map(|(v, id)| by_layer[id][v])
        .collect();
    let mut layers = BTreeMap::new();
    let mut logs = BTreeMap::new();
    for (id, model, log, _) in results {
        layers.insert(id, model);
        if !log.is_empty() {
            logs.insert(id, log);
        }
    }
    Ok(TrainedRoiModel {
        name: name.to_string(),
        layers,
        selected_layer,
        validation_accuracy,
        logs,
    })
}

/// Trains every ROI of `dataset` with one model family. `seed` fixes the
/// split, projections, initialization and batch order.
pub fn train_full_model(dataset: &Dataset, kind: ModelKind, config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    config.train.validate()?;
    config.romp.validate()?;
    let split = DatasetSplit::holdout(
        dataset.manifest.estimation_samples,
        config.validation_samples,
        derive_seed(seed, 0),
    )?;
    let features = prepare_features(dataset, Block::Estimation, kind, config, seed)?;
    let mut rois = Vec::with_capacity(dataset.rois.len());
    for (r, roi) in dataset.rois.iter().enumerate() {
        info!("roi={} kind={kind} voxels={} layers={}", roi.name, roi.estimation.ncols(), features.len());
        rois.push(train_roi(
            &roi.name,
            &features,
            &roi.estimation,
            &split,
            kind,
            config,
            derive_seed(seed, 1000 + r as u64),
        )?);
    }
    let projections = features
        .iter()
        .filter_map(|(&id, _)| {
            let dim = dataset.layers.get(&id)?.estimation.ncols();
            projection_for(config, seed, id, dim).map(|p| (id, p))
        })
        .collect();
    Ok(ModelBundle {
        format_version: BUNDLE_VERSION,
        kind,
        seed,
        config: config.clone(),
        dataset: DatasetRef {
            name: dataset.manifest.name.clone(),
            estimation_samples: dataset.manifest.estimation_samples,
            test_samples: dataset.manifest.test_samples,
            test_fingerprint: dataset.test_fingerprint(),
        },
        split,
        projections,
        rois,
        extra: Default::default(),
    })
}
