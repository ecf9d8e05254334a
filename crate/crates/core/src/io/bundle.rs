//! Trained-model bundles.
//!
//! A bundle directory holds:
//!
//! * `bundle.json`: kind, seed, full config, dataset reference, per-ROI
//!   layer map, validation accuracies and training logs;
//! * `split.json`: the train/validation record;
//! * one multi-block matrix file per ROI and layer with the parameters.
//!
//! Head files store blocks `w1, b1, w2, b2, mean, scale`. Linear files
//! store `triplets` (rows of voxel, feature, coefficient), `intercepts`,
//! `degenerate` (0/1 per voxel), `mean`, `scale`.
//!
//! Unknown top-level keys in `bundle.json` are kept and written back.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::matrix::{read_blocks, write_blocks};
use super::{read_json, write_json};
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::mlp::{MlpHeadParams, VoxelWeights};
use crate::sparse::{LinearEncodingModel, SparseWeights};
use crate::standardize::Standardizer;
use crate::trainer::{
    prepare_features, Block, DatasetSplit, EpochRecord, LayerModel, MlpLayerModel, ModelConfig, ModelKind,
    SparseProjection, TrainedRoiModel, TrainingStatus,
};
use crate::ResponseMatrix;

pub const BUNDLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "bundle.json";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub name: String,
    pub estimation_samples: usize,
    pub test_samples: usize,
    pub test_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub format_version: u32,
    pub kind: ModelKind,
    pub seed: u64,
    pub config: ModelConfig,
    pub dataset: DatasetRef,
    pub split: DatasetSplit,
    pub projections: BTreeMap<u32, SparseProjection>,
    pub rois: Vec<TrainedRoiModel>,
    /// Manifest keys this version does not know about.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerKind {
    Mlp {
        status: TrainingStatus,
        best_epoch: usize,
        best_score: f64,
        final_mu: Vec<f64>,
    },
    Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerEntry {
    file: String,
    #[serde(flatten)]
    kind: LayerKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RoiManifest {
    name: String,
    selected_layer: Vec<u32>,
    validation_accuracy: Vec<f64>,
    layers: BTreeMap<u32, LayerEntry>,
    #[serde(default)]
    logs: BTreeMap<u32, Vec<EpochRecord>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleManifest {
    format_version: u32,
    kind: ModelKind,
    seed: u64,
    config: ModelConfig,
    dataset: DatasetRef,
    split_record: String,
    #[serde(default)]
    projections: BTreeMap<u32, SparseProjection>,
    rois: Vec<RoiManifest>,
}

const KNOWN_KEYS: [&str; 8] = [
    "format_version",
    "kind",
    "seed",
    "config",
    "dataset",
    "split_record",
    "projections",
    "rois",
];

fn row(values: impl ExactSizeIterator<Item = f64>) -> DMatrix<f64> {
    let n = values.len();
    DMatrix::from_iterator(1, n, values)
}

fn layer_file(roi: &str, layer: u32) -> String {
    let safe: String = roi
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("roi_{safe}_layer{layer}.nenc")
}

fn write_layer(model: &LayerModel, path: &Path) -> Result<()> {
    match model {
        LayerModel::Mlp(m) => {
            let p = &m.params;
            let b1 = row(p.b1.iter().copied());
            let b2 = row(p.b2.iter().copied());
            let mean = row(m.standardizer.mean.iter().copied());
            let scale = row(m.standardizer.scale.iter().copied());
            write_blocks(&[&p.w1, &b1, &p.w2, &b2, &mean, &scale], path)
        }
        LayerModel::Linear(m) => {
            let triplets: Vec<[f64; 3]> = m
                .weights
                .iter()
                .enumerate()
                .flat_map(|(v, w)| {
                    w.support
                        .iter()
                        .zip(&w.coefficients)
                        .map(move |(&j, &c)| [v as f64, j as f64, c])
                })
                .collect();
            let t = DMatrix::from_row_iterator(triplets.len(), 3, triplets.iter().flatten().copied());
            let intercepts = row(m.weights.iter().map(|w| w.intercept));
            let degenerate = row(m.weights.iter().map(|w| if w.degenerate { 1.0 } else { 0.0 }));
            let mean = row(m.standardizer.mean.iter().copied());
            let scale = row(m.standardizer.scale.iter().copied());
            write_blocks(&[&t, &intercepts, &degenerate, &mean, &scale], path)
        }
    }
}

fn expect_blocks(blocks: &[DMatrix<f64>], count: usize, path: &Path) -> Result<()> {
    if blocks.len() != count {
        return Err(Error::SchemaMismatch(format!(
            "{} holds {} blocks, expected {count}",
            path.display(),
            blocks.len()
        )));
    }
    Ok(())
}

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

fn read_layer(entry: &LayerEntry, layer: u32, path: &Path) -> Result<LayerModel> {
    let blocks = read_blocks(path)?;
    let bad = |what: &str| Error::SchemaMismatch(format!("{}: {what}", path.display()));
    match &entry.kind {
        LayerKind::Mlp {
            status,
            best_epoch,
            best_score,
            final_mu,
        } => {
            expect_blocks(&blocks, 6, path)?;
            let params = MlpHeadParams {
                w1: blocks[0].clone(),
                b1: DVector::from_vec(flat(&blocks[1])),
                w2: blocks[2].clone(),
                b2: DVector::from_vec(flat(&blocks[3])),
            };
            params.validate().map_err(|e| bad(&e.to_string()))?;
            let standardizer = Standardizer {
                mean: flat(&blocks[4]),
                scale: flat(&blocks[5]),
            };
            if standardizer.dim() != params.feature_dim() || standardizer.scale.len() != params.feature_dim() {
                return Err(bad("standardizer width differs from the head input"));
            }
            Ok(LayerModel::Mlp(MlpLayerModel {
                standardizer,
                params,
                status: *status,
                best_epoch: *best_epoch,
                best_score: *best_score,
                final_mu: VoxelWeights { mu: final_mu.clone() },
            }))
        }
        LayerKind::Linear => {
            expect_blocks(&blocks, 5, path)?;
            let (t, intercepts, degenerate) = (&blocks[0], flat(&blocks[1]), flat(&blocks[2]));
            if intercepts.len() != degenerate.len() || (t.nrows() > 0 && t.ncols() != 3) {
                return Err(bad("malformed linear blocks"));
            }
            let standardizer = Standardizer {
                mean: flat(&blocks[3]),
                scale: flat(&blocks[4]),
            };
            let mut weights: Vec<SparseWeights> = intercepts
                .iter()
                .zip(&degenerate)
                .map(|(&b, &d)| SparseWeights {
                    degenerate: d != 0.0,
                    ..SparseWeights::empty(b)
                })
                .collect();
            for r in 0..t.nrows() {
                let (v, j) = (t[(r, 0)] as usize, t[(r, 1)] as usize);
                let w = weights.get_mut(v).ok_or_else(|| bad("triplet voxel out of range"))?;
                if j >= standardizer.dim() {
                    return Err(bad("triplet feature out of range"));
                }
                w.support.push(j);
                w.coefficients.push(t[(r, 2)]);
            }
            Ok(LayerModel::Linear(LinearEncodingModel {
                standardizer,
                weights,
                layer_id: Some(layer),
            }))
        }
    }
}

pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rois = Vec::with_capacity(bundle.rois.len());
    for roi in &bundle.rois {
        let mut layers = BTreeMap::new();
        for (&id, model) in &roi.layers {
            let file = layer_file(&roi.name, id);
            write_layer(model, &dir.join(&file))?;
            let kind = match model {
                LayerModel::Mlp(m) => LayerKind::Mlp {
                    status: m.status,
                    best_epoch: m.best_epoch,
                    best_score: m.best_score,
                    final_mu: m.final_mu.mu.clone(),
                },
                LayerModel::Linear(_) => LayerKind::Linear,
            };
            layers.insert(id, LayerEntry { file, kind });
        }
        rois.push(RoiManifest {
            name: roi.name.clone(),
            selected_layer: roi.selected_layer.clone(),
            validation_accuracy: roi.validation_accuracy.clone(),
            layers,
            logs: roi.logs.clone(),
        });
    }
    write_json(&bundle.split, &dir.join(SPLIT_FILE))?;
    let manifest = BundleManifest {
        format_version: bundle.format_version,
        kind: bundle.kind,
        seed: bundle.seed,
        config: bundle.config.clone(),
        dataset: bundle.dataset.clone(),
        split_record: SPLIT_FILE.into(),
        projections: bundle.projections.clone(),
        rois,
    };
    let mut json = match serde_json::to_value(&manifest)? {
        serde_json::Value::Object(map) => map,
        _ => unreachable!("manifest serializes to an object"),
    };
    for (k, v) in &bundle.extra {
        json.entry(k.clone()).or_insert_with(|| v.clone());
    }
    write_json(&json, &dir.join(MANIFEST_FILE))
}

pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let path = dir.join(MANIFEST_FILE);
    let mut json: serde_json::Map<String, serde_json::Value> = read_json(&path)?;
    let extra: serde_json::Map<String, serde_json::Value> = json
        .iter()
        .filter(|(k, _)| !KNOWN_KEYS.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    json.retain(|k, _| KNOWN_KEYS.contains(&k.as_str()));
    match json.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == BUNDLE_VERSION as u64 => {}
        Some(v) => return Err(Error::UnsupportedVersion(v as u32)),
        None => return Err(Error::SchemaMismatch(format!("{}: no format_version", path.display()))),
    }
    let manifest: BundleManifest = serde_json::from_value(serde_json::Value::Object(json))
        .map_err(|e| Error::SchemaMismatch(format!("{}: {e}", path.display())))?;
    for key in extra.keys() {
        warn!("bundle={} unknown_key={key} action=preserved", dir.display());
    }
    let split: DatasetSplit = read_json(&dir.join(&manifest.split_record))?;
    let mut rois = Vec::with_capacity(manifest.rois.len());
    for roi in manifest.rois {
        let mut layers = BTreeMap::new();
        for (&id, entry) in &roi.layers {
            let path = dir.join(&entry.file);
            if !path.exists() {
                return Err(Error::MissingFile(path));
            }
            layers.insert(id, read_layer(entry, id, &path)?);
        }
        if let Some(l) = roi.selected_layer.iter().find(|l| !layers.contains_key(l)) {
            return Err(Error::SchemaMismatch(format!(
                "ROI {} selects layer {l}, which the bundle does not contain",
                roi.name
            )));
        }
        if roi.validation_accuracy.len() != roi.selected_layer.len() {
            return Err(Error::SchemaMismatch(format!(
                "ROI {}: {} validation accuracies for {} voxels",
                roi.name,
                roi.validation_accuracy.len(),
                roi.selected_layer.len()
            )));
        }
        rois.push(TrainedRoiModel {
            name: roi.name,
            layers,
            selected_layer: roi.selected_layer,
            validation_accuracy: roi.validation_accuracy,
            logs: roi.logs,
        });
    }
    Ok(ModelBundle {
        format_version: manifest.format_version,
        kind: manifest.kind,
        seed: manifest.seed,
        config: manifest.config,
        dataset: manifest.dataset,
        split,
        projections: manifest.projections,
        rois,
        extra,
    })
}

impl ModelBundle {
    /// Test-block predictions, one matrix per ROI in bundle order.
    pub fn predict_test(&self, dataset: &Dataset) -> Result<Vec<(String, ResponseMatrix)>> {
        let features = prepare_features(dataset, Block::Test, self.kind, &self.config, self.seed)?;
        self.rois
            .iter()
            .map(|roi| Ok((roi.name.clone(), roi.predict(&features)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synthetic::{generate_synthetic, SyntheticRoi, SyntheticSpec};
    use crate::mlp::TrainConfig;
    use crate::trainer::train_full_model;

    fn tiny() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            estimation_samples: 150,
            test_samples: 30,
            layer_dims: vec![12, 9],
            rois: vec![SyntheticRoi {
                name: "V1".into(),
                linear: 3,
                nonlinear: 2,
                noise: 1,
                ..Default::default()
            }],
            ..Default::default()
        })
        .unwrap()
        .dataset
    }

    fn config() -> ModelConfig {
        ModelConfig {
            validation_samples: 40,
            train: TrainConfig {
                hidden_size: 6,
                max_epochs: 4,
                batch_size: 40,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn assert_close(a: &ResponseMatrix, b: &ResponseMatrix) {
        assert_eq!(a.shape(), b.shape());
        let scale = a.amax().max(1.0);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-5 * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn round_trips_through_inference() {
        let ds = tiny();
        for kind in [ModelKind::DnnTl, ModelKind::DnnLinear] {
            let bundle = train_full_model(&ds, kind, &config(), 5).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_bundle(&bundle, dir.path()).unwrap();
            let loaded = load_bundle(dir.path()).unwrap();
            assert_eq!(loaded.split, bundle.split);
            assert_eq!(loaded.config, bundle.config);
            assert_eq!(loaded.seed, 5);
            assert_eq!(loaded.rois[0].selected_layer, bundle.rois[0].selected_layer);
            let a = bundle.predict_test(&ds).unwrap();
            let b = loaded.predict_test(&ds).unwrap();
            assert_close(&a[0].1, &b[0].1);
        }
    }

    #[test]
    fn dnn_tl_bundle_has_one_head_per_layer() {
        let bundle = train_full_model(&tiny(), ModelKind::DnnTl, &config(), 1).unwrap();
        let roi = &bundle.rois[0];
        assert_eq!(roi.layers.len(), 2);
        assert_eq!(roi.selected_layer.len(), 6);
        assert!(roi.selected_layer.iter().all(|l| *l == 1 || *l == 2));
        assert!(roi.validation_accuracy.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn missing_split_record_is_named() {
        let bundle = train_full_model(&tiny(), ModelKind::DnnLinear, &config(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join(SPLIT_FILE)).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with(SPLIT_FILE)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_survive_a_round_trip() {
        let bundle = train_full_model(&tiny(), ModelKind::DnnLinear, &config(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut json: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        json["annotator_note"] = serde_json::json!({"x": 1});
        std::fs::write(&path, serde_json::to_vec(&json).unwrap()).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded.extra["annotator_note"], serde_json::json!({"x": 1}));
        let out = tempfile::tempdir().unwrap();
        save_bundle(&loaded, out.path()).unwrap();
        let again: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(again["annotator_note"]["x"], 1);
    }

    #[test]
    fn version_mismatch_rejected() {
        let bundle = train_full_model(&tiny(), ModelKind::DnnLinear, &config(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("\"format_version\": 1", "\"format_version\": 7", 1)).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::UnsupportedVersion(7))));
    }
}
