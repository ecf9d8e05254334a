//! Synthetic datasets with known structure, used as oracles.
//!
//! Layer features are i.i.d. standard normal. Each ROI mixes voxel groups:
//!
//! * **linear**: a `sparsity`-sparse linear combination of one layer's features;
//! * **nonlinear**: a readout of a small random two-layer rectifier network
//!   shared by the ROI. Its hidden units come in mirrored pairs
//!   `relu(u.x) + relu(-u.x)` with tied readout weights, so the response has
//!   no linear component at all;
//! * **gabor**: a sparse linear combination of standardized Gabor energies of
//!   the generated stimuli (needs `stimuli`);
//! * **noise**: unit-variance Gaussian noise only.
//!
//! Planted signals are scaled to zero mean and unit variance over all
//! samples before `noise_sigma` Gaussian noise is added.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{
    Dataset, DatasetManifest, RoiData, RoiEntry, SplitFiles, SplitMatrix, SplitStimuli, StimulusEntry,
    MANIFEST_VERSION,
};
use super::matrix::write_matrix;
use super::stimuli::images_to_matrix;
use super::write_json;
use crate::error::{Error, Result};
use crate::gabor::{build_bank, GaborConfig, StimulusImage};
use crate::rng::{derive_seed, seeded, Rng};
use crate::standardize::Standardizer;
use crate::{FeatureMatrix, ResponseMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticRoi {
    pub name: String,
    pub linear: usize,
    pub nonlinear: usize,
    pub noise: usize,
    pub gabor: usize,
    /// Layer every planted voxel reads from; random per voxel when absent.
    pub source_layer: Option<u32>,
}

impl Default for SyntheticRoi {
    fn default() -> Self {
        Self {
            name: "ROI".into(),
            linear: 0,
            nonlinear: 0,
            noise: 0,
            gabor: 0,
            source_layer: None,
        }
    }
}

impl SyntheticRoi {
    pub fn voxels(&self) -> usize {
        self.linear + self.nonlinear + self.noise + self.gabor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStimuli {
    pub gabor: GaborConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub name: String,
    pub estimation_samples: usize,
    pub test_samples: usize,
    /// Feature dimension of layers `1..=layer_dims.len()`.
    pub layer_dims: Vec<usize>,
    pub rois: Vec<SyntheticRoi>,
    pub noise_sigma: f64,
    /// Nonzero weights per planted linear voxel and per hidden direction.
    pub sparsity: usize,
    /// Mirrored rectifier pairs in each ROI's planted network.
    pub nonlinear_units: usize,
    pub seed: u64,
    pub stimuli: Option<SyntheticStimuli>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            estimation_samples: 1750,
            test_samples: 120,
            layer_dims: vec![64, 64],
            rois: vec![SyntheticRoi {
                name: "ROI".into(),
                linear: 20,
                nonlinear: 20,
                noise: 20,
                ..Default::default()
            }],
            noise_sigma: 0.3,
            sparsity: 5,
            nonlinear_units: 4,
            seed: 0,
            stimuli: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        if self.estimation_samples < 3 || self.test_samples < 3 {
            return Err(Error::InvalidConfig("need at least 3 samples per block".into()));
        }
        if self.sparsity == 0 || self.nonlinear_units == 0 {
            return Err(Error::InvalidConfig("sparsity and nonlinear_units must be >= 1".into()));
        }
        for (i, &d) in self.layer_dims.iter().enumerate() {
            if d < self.sparsity {
                return Err(Error::InvalidConfig(format!(
                    "layer {} has {d} features, fewer than sparsity {}",
                    i + 1,
                    self.sparsity
                )));
            }
        }
        for roi in &self.rois {
            let planted = roi.linear + roi.nonlinear > 0;
            if planted && self.layer_dims.is_empty() {
                return Err(Error::InvalidConfig(format!("ROI {} needs feature layers", roi.name)));
            }
            if let Some(l) = roi.source_layer {
                if l == 0 || l as usize > self.layer_dims.len() {
                    return Err(Error::MissingLayerFeatures(l));
                }
            }
            if roi.gabor > 0 && self.stimuli.is_none() {
                return Err(Error::InvalidConfig(format!(
                    "ROI {} has gabor voxels but no stimuli are generated",
                    roi.name
                )));
            }
        }
        if let Some(s) = &self.stimuli {
            s.gabor.validate()?;
        }
        Ok(())
    }

    fn total_samples(&self) -> usize {
        self.estimation_samples + self.test_samples
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelGroup {
    Linear,
    Nonlinear,
    Gabor,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedVoxel {
    pub group: VoxelGroup,
    pub source_layer: Option<u32>,
    /// Feature indices (linear, gabor) or hidden-pair indices (nonlinear).
    pub support: Vec<usize>,
    pub coefficients: Vec<f64>,
    /// Clean response is `(raw - offset) / scale`.
    pub offset: f64,
    pub scale: f64,
}

/// One mirrored rectifier pair: `relu(w.x) + relu(-w.x)` over `support`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenDirection {
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiTruth {
    pub name: String,
    pub voxels: Vec<PlantedVoxel>,
    /// Planted network per source layer.
    pub networks: BTreeMap<u32, Vec<HiddenDirection>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub noise_sigma: f64,
    pub rois: Vec<RoiTruth>,
    /// Standardization applied to Gabor energies before the planted readout.
    pub gabor_standardizer: Option<Standardizer>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub ground_truth: GroundTruth,
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // row-major draw order so the stream layout is independent of storage
    let values: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect();
    DMatrix::from_row_slice(rows, cols, &values)
}

fn sparse_unit(rng: &mut Rng, dim: usize, k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut support = sample(rng, dim, k).into_vec();
    support.sort_unstable();
    let mut w: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter_mut().for_each(|v| *v /= norm);
    (support, w)
}

fn project(x: &FeatureMatrix, support: &[usize], weights: &[f64]) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| support.iter().zip(weights).map(|(&j, w)| w * x[(i, j)]).sum())
        .collect()
}

fn raw_response(
    voxel: &PlantedVoxel,
    layers: &BTreeMap<u32, FeatureMatrix>,
    gabor: Option<&FeatureMatrix>,
    networks: &BTreeMap<u32, Vec<HiddenDirection>>,
    samples: usize,
) -> Vec<f64> {
    match voxel.group {
        VoxelGroup::Linear => {
            project(&layers[&voxel.source_layer.unwrap()], &voxel.support, &voxel.coefficients)
        }
        VoxelGroup::Gabor => project(gabor.unwrap(), &voxel.support, &voxel.coefficients),
        VoxelGroup::Nonlinear => {
            let layer = voxel.source_layer.unwrap();
            let x = &layers[&layer];
            let net = &networks[&layer];
            let mut out = vec![0.0; samples];
            for (&unit, &a) in voxel.support.iter().zip(&voxel.coefficients) {
                let z = project(x, &net[unit].support, &net[unit].weights);
                for (o, zi) in out.iter_mut().zip(z) {
                    *o += a * (zi.max(0.0) + (-zi).max(0.0));
                }
            }
            out
        }
        VoxelGroup::Noise => vec![0.0; samples],
    }
}

impl GroundTruth {
    /// Noise-free responses of one ROI over the concatenated
    /// estimation + test samples.
    pub fn clean_responses(
        &self,
        roi: usize,
        layers: &BTreeMap<u32, FeatureMatrix>,
        gabor_features: Option<&FeatureMatrix>,
    ) -> ResponseMatrix {
        let truth = &self.rois[roi];
        let samples = layers
            .values()
            .next()
            .map(|m| m.nrows())
            .or(gabor_features.map(|g| g.nrows()))
            .unwrap_or(0);
        let gabor = gabor_features.map(|g| {
            self.gabor_standardizer
                .as_ref()
                .expect("gabor standardizer")
                .apply(g)
                .expect("gabor width")
        });
        let mut out = ResponseMatrix::zeros(samples, truth.voxels.len());
        for (v, voxel) in truth.voxels.iter().enumerate() {
            if voxel.group == VoxelGroup::Noise {
                continue;
            }
            let raw = raw_response(voxel, layers, gabor.as_ref(), &truth.networks, samples);
            for (i, r) in raw.into_iter().enumerate() {
                out[(i, v)] = (r - voxel.offset) / voxel.scale;
            }
        }
        out
    }
}

fn random_stimuli(rng: &mut Rng, count: usize, size: usize) -> Vec<StimulusImage> {
    (0..count)
        .map(|_| {
            let pixels = (0..size * size).map(|_| rng.random::<f64>()).collect();
            StimulusImage::new(size, pixels).expect("square image")
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let n = spec.total_samples();
    let ne = spec.estimation_samples;

    let mut layers: BTreeMap<u32, FeatureMatrix> = BTreeMap::new();
    for (i, &dim) in spec.layer_dims.iter().enumerate() {
        let id = i as u32 + 1;
        let mut rng = seeded(derive_seed(spec.seed, 100 + id as u64));
        layers.insert(id, gaussian(&mut rng, n, dim));
    }

    let (stimuli, gabor_raw) = match &spec.stimuli {
        None => (None, None),
        Some(s) => {
            let mut rng = seeded(derive_seed(spec.seed, 50));
            let images = random_stimuli(&mut rng, n, s.gabor.image_size);
            let bank = build_bank(&s.gabor)?;
            let feats = bank.extract_batch(&images)?;
            (Some(images), Some(feats))
        }
    };
    let gabor_standardizer = gabor_raw.as_ref().map(Standardizer::fit);
    let gabor_std = match (&gabor_raw, &gabor_standardizer) {
        (Some(g), Some(s)) => Some(s.apply(g)?),
        _ => None,
    };

    let layer_ids: Vec<u32> = layers.keys().copied().collect();
    let mut truths = Vec::new();
    let mut responses = Vec::new();
    for (r, roi) in spec.rois.iter().enumerate() {
        let mut rng = seeded(derive_seed(spec.seed, 1000 + r as u64));
        let pick_layer = |rng: &mut Rng| -> u32 {
            roi.source_layer
                .unwrap_or_else(|| layer_ids[rng.random_range(0..layer_ids.len())])
        };
        let mut networks: BTreeMap<u32, Vec<HiddenDirection>> = BTreeMap::new();
        let mut voxels = Vec::with_capacity(roi.voxels());

        for _ in 0..roi.linear {
            let layer = pick_layer(&mut rng);
            let (support, coefficients) = sparse_unit(&mut rng, layers[&layer].ncols(), spec.sparsity);
            voxels.push(PlantedVoxel {
                group: VoxelGroup::Linear,
                source_layer: Some(layer),
                support,
                coefficients,
                offset: 0.0,
                scale: 1.0,
            });
        }
        for _ in 0..roi.nonlinear {
            let layer = pick_layer(&mut rng);
            if !networks.contains_key(&layer) {
                let dim = layers[&layer].ncols();
                let net = (0..spec.nonlinear_units)
                    .map(|_| {
                        let (support, weights) = sparse_unit(&mut rng, dim, spec.sparsity);
                        HiddenDirection { support, weights }
                    })
                    .collect();
                networks.insert(layer, net);
            }
            let coefficients: Vec<f64> = (0..spec.nonlinear_units)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            voxels.push(PlantedVoxel {
                group: VoxelGroup::Nonlinear,
                source_layer: Some(layer),
                support: (0..spec.nonlinear_units).collect(),
                coefficients,
                offset: 0.0,
                scale: 1.0,
            });
        }
        for _ in 0..roi.gabor {
            let dim = gabor_std.as_ref().unwrap().ncols();
            let (support, coefficients) = sparse_unit(&mut rng, dim, spec.sparsity.min(dim));
            voxels.push(PlantedVoxel {
                group: VoxelGroup::Gabor,
                source_layer: None,
                support,
                coefficients,
                offset: 0.0,
                scale: 1.0,
            });
        }
        for _ in 0..roi.noise {
            voxels.push(PlantedVoxel {
                group: VoxelGroup::Noise,
                source_layer: None,
                support: Vec::new(),
                coefficients: Vec::new(),
                offset: 0.0,
                scale: 1.0,
            });
        }

        let mut resp = ResponseMatrix::zeros(n, voxels.len());
        for (v, voxel) in voxels.iter_mut().enumerate() {
            if voxel.group == VoxelGroup::Noise {
                for i in 0..n {
                    resp[(i, v)] = StandardNormal.sample(&mut rng);
                }
                continue;
            }
            let raw = raw_response(voxel, &layers, gabor_std.as_ref(), &networks, n);
            let mean = raw.iter().sum::<f64>() / n as f64;
            let sd = (raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            voxel.offset = mean;
            voxel.scale = if sd > 0.0 { sd } else { 1.0 };
            for (i, x) in raw.into_iter().enumerate() {
                let e: f64 = StandardNormal.sample(&mut rng);
                resp[(i, v)] = (x - voxel.offset) / voxel.scale + spec.noise_sigma * e;
            }
        }
        truths.push(RoiTruth {
            name: roi.name.clone(),
            voxels,
            networks,
        });
        responses.push(resp);
    }

    let split = |m: &DMatrix<f64>| SplitMatrix {
        estimation: m.rows(0, ne).into_owned(),
        test: m.rows(ne, n - ne).into_owned(),
    };
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        name: spec.name.clone(),
        estimation_samples: ne,
        test_samples: spec.test_samples,
        layers: layers
            .keys()
            .map(|&id| {
                (
                    id,
                    SplitFiles {
                        estimation: format!("layer{id}_estimation.nenc").into(),
                        test: format!("layer{id}_test.nenc").into(),
                    },
                )
            })
            .collect(),
        rois: spec
            .rois
            .iter()
            .map(|r| RoiEntry {
                name: r.name.clone(),
                voxels: r.voxels(),
                estimation: format!("roi_{}_estimation.nenc", r.name).into(),
                test: format!("roi_{}_test.nenc", r.name).into(),
            })
            .collect(),
        stimuli: spec.stimuli.as_ref().map(|s| StimulusEntry {
            image_size: s.gabor.image_size,
            estimation: "stimuli_estimation.nenc".into(),
            test: "stimuli_test.nenc".into(),
        }),
        provenance: format!(
            "synthetic ground truth, seed {}, noise_sigma {}",
            spec.seed, spec.noise_sigma
        ),
    };
    let dataset = Dataset {
        manifest,
        layers: layers.iter().map(|(&id, m)| (id, split(m))).collect(),
        rois: spec
            .rois
            .iter()
            .zip(&responses)
            .map(|(r, m)| {
                let s = split(m);
                RoiData {
                    name: r.name.clone(),
                    estimation: s.estimation,
                    test: s.test,
                }
            })
            .collect(),
        stimuli: stimuli.map(|mut imgs| {
            let test = imgs.split_off(ne);
            SplitStimuli {
                estimation: imgs,
                test,
            }
        }),
    };
    Ok(SyntheticDataset {
        dataset,
        ground_truth: GroundTruth {
            seed: spec.seed,
            noise_sigma: spec.noise_sigma,
            rois: truths,
            gabor_standardizer,
        },
    })
}

impl SyntheticDataset {
    /// Writes matrices, `manifest.json` and `ground_truth.json` into `dir`.
    /// Returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = &self.dataset.manifest;
        for (id, files) in &m.layers {
            let data = &self.dataset.layers[id];
            write_matrix(&data.estimation, dir.join(&files.estimation))?;
            write_matrix(&data.test, dir.join(&files.test))?;
        }
        for (entry, data) in m.rois.iter().zip(&self.dataset.rois) {
            write_matrix(&data.estimation, dir.join(&entry.estimation))?;
            write_matrix(&data.test, dir.join(&entry.test))?;
        }
        if let (Some(entry), Some(stim)) = (&m.stimuli, &self.dataset.stimuli) {
            write_matrix(&images_to_matrix(&stim.estimation)?, dir.join(&entry.estimation))?;
            write_matrix(&images_to_matrix(&stim.test)?, dir.join(&entry.test))?;
        }
        write_json(&self.ground_truth, &dir.join("ground_truth.json"))?;
        let path = dir.join("manifest.json");
        m.save(&path)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{fit_voxelwise, RompConfig};

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            estimation_samples: 200,
            test_samples: 40,
            layer_dims: vec![20, 30],
            rois: vec![SyntheticRoi {
                name: "A".into(),
                linear: 4,
                nonlinear: 3,
                noise: 2,
                ..Default::default()
            }],
            noise_sigma: 0.0,
            ..Default::default()
        }
    }

    fn full_layers(ds: &Dataset) -> BTreeMap<u32, FeatureMatrix> {
        ds.layers
            .iter()
            .map(|(&id, s)| {
                let mut m = FeatureMatrix::zeros(s.estimation.nrows() + s.test.nrows(), s.estimation.ncols());
                m.rows_mut(0, s.estimation.nrows()).copy_from(&s.estimation);
                m.rows_mut(s.estimation.nrows(), s.test.nrows()).copy_from(&s.test);
                (id, m)
            })
            .collect()
    }

    #[test]
    fn noiseless_responses_reproduce_from_ground_truth() {
        let syn = generate_synthetic(&small_spec()).unwrap();
        let layers = full_layers(&syn.dataset);
        let clean = syn.ground_truth.clean_responses(0, &layers, None);
        let roi = &syn.dataset.rois[0];
        for v in 0..7 {
            for i in 0..240 {
                let actual = if i < 200 { roi.estimation[(i, v)] } else { roi.test[(i - 200, v)] };
                assert!((actual - clean[(i, v)]).abs() <= 1e-6 * clean[(i, v)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn planted_signals_are_standardized() {
        let syn = generate_synthetic(&small_spec()).unwrap();
        let layers = full_layers(&syn.dataset);
        let clean = syn.ground_truth.clean_responses(0, &layers, None);
        for v in 0..7 {
            let col = clean.column(v);
            let mean = col.mean();
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 240.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_linear_supports_recovered() {
        let spec = SyntheticSpec {
            rois: vec![SyntheticRoi {
                name: "L".into(),
                linear: 6,
                source_layer: Some(2),
                ..Default::default()
            }],
            ..small_spec()
        };
        let syn = generate_synthetic(&spec).unwrap();
        let roi = &syn.dataset.rois[0];
        let cfg = RompConfig {
            max_sparsity: spec.sparsity,
            ..Default::default()
        };
        let model = fit_voxelwise(&syn.dataset.layers[&2].estimation, &roi.estimation, &cfg).unwrap();
        for (w, truth) in model.weights.iter().zip(&syn.ground_truth.rois[0].voxels) {
            assert_eq!(w.support, truth.support);
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let spec = SyntheticSpec {
            stimuli: Some(SyntheticStimuli {
                gabor: GaborConfig {
                    image_size: 16,
                    frequencies: vec![1.0, 2.0, 4.0],
                    orientations_count: 4,
                    ..Default::default()
                },
            }),
            rois: vec![SyntheticRoi {
                name: "G".into(),
                gabor: 3,
                linear: 2,
                ..Default::default()
            }],
            ..small_spec()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&spec).unwrap().write(a.path()).unwrap();
        generate_synthetic(&spec).unwrap().write(b.path()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert!(names.len() >= 9);
        for name in names {
            let x = std::fs::read(a.path().join(&name)).unwrap();
            let y = std::fs::read(b.path().join(&name)).unwrap();
            assert_eq!(x, y, "{name:?}");
        }
        let loaded = Dataset::load(&a.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.stimuli.as_ref().unwrap().test.len(), 40);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = small_spec();
        spec.noise_sigma = -1.0;
        assert!(generate_synthetic(&spec).is_err());
        let mut spec = small_spec();
        spec.rois[0].gabor = 1;
        assert!(generate_synthetic(&spec).is_err());
        let mut spec = small_spec();
        spec.rois[0].source_layer = Some(5);
        assert!(matches!(generate_synthetic(&spec), Err(Error::MissingLayerFeatures(5))));
    }
}
