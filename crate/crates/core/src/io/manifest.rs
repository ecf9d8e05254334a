//! Dataset manifests.
//!
//! A manifest is a JSON file listing matrix files relative to its own
//! directory:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "name": "subject1",
//!   "estimation_samples": 1750,
//!   "test_samples": 120,
//!   "layers": { "1": { "estimation": "conv1_est.nenc", "test": "conv1_test.nenc" } },
//!   "rois": [ { "name": "V1", "voxels": 1294,
//!               "estimation": "v1_est.nenc", "test": "v1_test.nenc" } ],
//!   "stimuli": { "image_size": 128, "estimation": "stim_est.nenc", "test": "stim_test.nenc" },
//!   "provenance": "..."
//! }
//! ```
//!
//! Feature files are samples × features, response files samples × voxels.
//! There is no reader for the native vim-1 archive: convert its estimation
//! and validation blocks to this layout with an external script, one
//! response file per ROI and one feature file per network layer.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::matrix::read_matrix;
use super::stimuli::load_images;
use super::{read_json, write_json};
use crate::error::{Error, Result};
use crate::gabor::StimulusImage;
use crate::{FeatureMatrix, ResponseMatrix};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub estimation: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiEntry {
    pub name: String,
    pub voxels: usize,
    pub estimation: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusEntry {
    pub image_size: usize,
    pub estimation: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub estimation_samples: usize,
    pub test_samples: usize,
    #[serde(default)]
    pub layers: BTreeMap<u32, SplitFiles>,
    pub rois: Vec<RoiEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stimuli: Option<StimulusEntry>,
    #[serde(default)]
    pub provenance: String,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "manifest version {} (expected {MANIFEST_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitMatrix {
    pub estimation: FeatureMatrix,
    pub test: FeatureMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiData {
    pub name: String,
    pub estimation: ResponseMatrix,
    pub test: ResponseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitStimuli {
    pub estimation: Vec<StimulusImage>,
    pub test: Vec<StimulusImage>,
}

/// A manifest with every referenced file loaded and cross-checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub layers: BTreeMap<u32, SplitMatrix>,
    pub rois: Vec<RoiData>,
    pub stimuli: Option<SplitStimuli>,
}

fn check_rows(what: &str, rows: usize, expected: usize) -> Result<()> {
    if rows != expected {
        return Err(Error::SchemaMismatch(format!(
            "{what} has {rows} rows, manifest declares {expected}"
        )));
    }
    Ok(())
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let (ne, nt) = (manifest.estimation_samples, manifest.test_samples);

        let mut layers = BTreeMap::new();
        for (&id, files) in &manifest.layers {
            let estimation = read_matrix(root.join(&files.estimation))?;
            let test = read_matrix(root.join(&files.test))?;
            check_rows(&format!("layer {id} estimation features"), estimation.nrows(), ne)?;
            check_rows(&format!("layer {id} test features"), test.nrows(), nt)?;
            if estimation.ncols() != test.ncols() {
                return Err(Error::SchemaMismatch(format!(
                    "layer {id}: {} estimation vs {} test feature columns",
                    estimation.ncols(),
                    test.ncols()
                )));
            }
            layers.insert(id, SplitMatrix { estimation, test });
        }

        let mut rois = Vec::new();
        for entry in &manifest.rois {
            let estimation = read_matrix(root.join(&entry.estimation))?;
            let test = read_matrix(root.join(&entry.test))?;
            check_rows(&format!("ROI {} estimation responses", entry.name), estimation.nrows(), ne)?;
            check_rows(&format!("ROI {} test responses", entry.name), test.nrows(), nt)?;
            for (what, m) in [("estimation", &estimation), ("test", &test)] {
                if m.ncols() != entry.voxels {
                    return Err(Error::SchemaMismatch(format!(
                        "ROI {} {what} responses have {} voxels, manifest declares {}",
                        entry.name,
                        m.ncols(),
                        entry.voxels
                    )));
                }
            }
            rois.push(RoiData {
                name: entry.name.clone(),
                estimation,
                test,
            });
        }

        let stimuli = match &manifest.stimuli {
            None => None,
            Some(s) => {
                let estimation = load_images(&root.join(&s.estimation))?;
                let test = load_images(&root.join(&s.test))?;
                check_rows("estimation stimuli", estimation.len(), ne)?;
                check_rows("test stimuli", test.len(), nt)?;
                if estimation.iter().chain(&test).any(|i| i.size() != s.image_size) {
                    return Err(Error::SchemaMismatch(format!(
                        "stimuli are not all {}px",
                        s.image_size
                    )));
                }
                Some(SplitStimuli { estimation, test })
            }
        };

        Ok(Self {
            manifest,
            layers,
            rois,
            stimuli,
        })
    }

    pub fn roi(&self, name: &str) -> Option<&RoiData> {
        self.rois.iter().find(|r| r.name == name)
    }

    /// Digest of the test-block responses at storage precision; bundles
    /// evaluated together must agree on it.
    pub fn test_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.manifest.test_samples.to_le_bytes());
        for roi in &self.rois {
            h.update(roi.name.as_bytes());
            h.update(roi.test.ncols().to_le_bytes());
            for v in roi.test.iter() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::matrix::write_matrix;
    use nalgebra::DMatrix;

    fn write_dataset(dir: &Path, est_rows: usize) -> PathBuf {
        write_matrix(&DMatrix::from_element(est_rows, 3, 1.0), dir.join("l1_est.nenc")).unwrap();
        write_matrix(&DMatrix::from_element(4, 3, 1.0), dir.join("l1_test.nenc")).unwrap();
        write_matrix(&DMatrix::from_element(10, 2, 0.5), dir.join("v1_est.nenc")).unwrap();
        write_matrix(&DMatrix::from_element(4, 2, 0.5), dir.join("v1_test.nenc")).unwrap();
        let manifest = DatasetManifest {
            format_version: 1,
            name: "tiny".into(),
            estimation_samples: 10,
            test_samples: 4,
            layers: BTreeMap::from([(
                1,
                SplitFiles {
                    estimation: "l1_est.nenc".into(),
                    test: "l1_test.nenc".into(),
                },
            )]),
            rois: vec![RoiEntry {
                name: "V1".into(),
                voxels: 2,
                estimation: "v1_est.nenc".into(),
                test: "v1_test.nenc".into(),
            }],
            stimuli: None,
            provenance: String::new(),
        };
        let path = dir.join("manifest.json");
        manifest.save(&path).unwrap();
        path
    }

    #[test]
    fn loads_consistent_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path(), 10);
        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.layers[&1].estimation.shape(), (10, 3));
        assert_eq!(ds.roi("V1").unwrap().test.shape(), (4, 2));
        assert_eq!(ds.test_fingerprint(), Dataset::load(&path).unwrap().test_fingerprint());
    }

    #[test]
    fn rejects_row_count_disagreement() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path(), 9);
        assert!(matches!(Dataset::load(&path), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path(), 10);
        std::fs::remove_file(dir.path().join("v1_test.nenc")).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::MissingFile(_))));
    }
}
