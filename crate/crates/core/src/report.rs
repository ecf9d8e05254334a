//! Test-set evaluation of trained bundles and pairwise model comparison.
//!
//! Reports carry no paths or timestamps, so a fixed seed reproduces them
//! byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json, Dataset, ModelBundle};
use crate::rng::derive_seed;
use crate::stats::{
    accuracy, model_advantage, randomization_threshold, sorted_curve, AccuracyVector, AdvantageResult,
    SignificanceResult, SortedCurve, DEFAULT_PERMUTATIONS, DEFAULT_P_LEVEL, DEFAULT_SHUFFLES,
};

/// Width of the paired-difference histogram bins over `[-1, 1]`.
pub const HISTOGRAM_BIN_WIDTH: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationOptions {
    pub shuffles: usize,
    pub p_level: f64,
    pub seed: u64,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        Self {
            shuffles: DEFAULT_SHUFFLES,
            p_level: DEFAULT_P_LEVEL,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiEvaluation {
    pub name: String,
    pub accuracy: AccuracyVector,
    pub mean_accuracy: Option<f64>,
    pub significance: SignificanceResult,
    pub curve: SortedCurve,
    pub selected_layer: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model: String,
    pub dataset: String,
    pub test_fingerprint: String,
    pub options: EvaluationOptions,
    pub rois: Vec<RoiEvaluation>,
}

impl EvaluationReport {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }
}

fn check_partition(expected: &str, found: &str, what: &str) -> Result<()> {
    if expected != found {
        return Err(Error::PartitionMismatch(format!(
            "{what}: test fingerprint {found} differs from {expected}"
        )));
    }
    Ok(())
}

/// Scores a bundle on the dataset's test block. This is the only place test
/// responses are read.
pub fn evaluate_bundle(bundle: &ModelBundle, dataset: &Dataset, options: &EvaluationOptions) -> Result<EvaluationReport> {
    let fingerprint = dataset.test_fingerprint();
    check_partition(&fingerprint, &bundle.dataset.test_fingerprint, "bundle")?;
    let predictions = bundle.predict_test(dataset)?;
    let rois = predictions
        .into_iter()
        .zip(&bundle.rois)
        .enumerate()
        .map(|(r, ((name, predicted), trained))| {
            let measured = &dataset
                .roi(&name)
                .ok_or_else(|| Error::SchemaMismatch(format!("dataset has no ROI {name}")))?
                .test;
            let acc = accuracy(measured, &predicted)?;
            let significance = randomization_threshold(
                measured,
                &predicted,
                options.shuffles,
                options.p_level,
                derive_seed(options.seed, r as u64),
            )?;
            let curve = sorted_curve(&acc, significance.threshold);
            log::info!(
                "roi={name} model={} mean_c={:.6} threshold={:.6} significant_fraction={:.6}",
                bundle.kind,
                acc.mean().unwrap_or(f64::NAN),
                significance.threshold,
                curve.significant_fraction
            );
            Ok(RoiEvaluation {
                name,
                mean_accuracy: acc.mean(),
                accuracy: acc,
                significance,
                curve,
                selected_layer: trained.selected_layer.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport {
        model: bundle.kind.to_string(),
        dataset: bundle.dataset.name.clone(),
        test_fingerprint: fingerprint,
        options: *options,
        rois,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonOptions {
    /// Overrides the per-ROI threshold (the larger of the two models'
    /// global randomization thresholds).
    pub threshold: Option<f64>,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for ComparisonOptions {
    fn default() -> Self {
        Self {
            threshold: None,
            permutations: DEFAULT_PERMUTATIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub voxel: usize,
    pub a: Option<f64>,
    pub b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, width: f64) -> Self {
        let bins = ((hi - lo) / width).round().max(1.0) as usize;
        let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let i = ((v - lo) / width).floor();
            let i = (i.max(0.0) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiComparison {
    pub name: String,
    pub threshold: f64,
    pub mean_a: Option<f64>,
    pub mean_b: Option<f64>,
    pub scatter: Vec<ScatterPoint>,
    /// `a - b` for voxels significant under both models.
    pub paired_differences: Vec<f64>,
    pub difference_histogram: Histogram,
    /// Voxels above threshold under at least one model.
    pub eligible: usize,
    pub a_better: usize,
    pub b_better: usize,
    pub ties: usize,
    pub fraction_a_better: f64,
    pub fraction_b_better: f64,
    /// `None` when no voxel is eligible.
    pub advantage: Option<AdvantageResult>,
    pub curves: BTreeMap<String, SortedCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub model_a: String,
    pub model_b: String,
    pub dataset: String,
    pub test_fingerprint: String,
    pub options: ComparisonOptions,
    pub rois: Vec<RoiComparison>,
}

impl ComparisonReport {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }
}

fn labels(a: &str, b: &str) -> (String, String) {
    if a == b {
        (format!("{a}_a"), format!("{b}_b"))
    } else {
        (a.to_string(), b.to_string())
    }
}

pub fn comparison_report(
    a: &EvaluationReport,
    b: &EvaluationReport,
    options: &ComparisonOptions,
) -> Result<ComparisonReport> {
    check_partition(&a.test_fingerprint, &b.test_fingerprint, "model B")?;
    let (label_a, label_b) = labels(&a.model, &b.model);
    let mut rois = Vec::with_capacity(a.rois.len());
    for (r, ra) in a.rois.iter().enumerate() {
        let rb = b
            .rois
            .iter()
            .find(|x| x.name == ra.name)
            .ok_or_else(|| Error::PartitionMismatch(format!("ROI {} missing from model B", ra.name)))?;
        if ra.accuracy.voxel_ids != rb.accuracy.voxel_ids {
            return Err(Error::PartitionMismatch(format!("ROI {} voxel sets differ", ra.name)));
        }
        let threshold = options
            .threshold
            .unwrap_or(ra.significance.threshold.max(rb.significance.threshold));
        let pairs: Vec<(Option<f64>, Option<f64>)> = ra
            .accuracy
            .values
            .iter()
            .copied()
            .zip(rb.accuracy.values.iter().copied())
            .collect();
        let scatter = pairs
            .iter()
            .zip(&ra.accuracy.voxel_ids)
            .map(|(&(a, b), &voxel)| ScatterPoint { voxel, a, b })
            .collect();
        let paired_differences: Vec<f64> = pairs
            .iter()
            .filter_map(|p| match *p {
                (Some(x), Some(y)) if x > threshold && y > threshold => Some(x - y),
                _ => None,
            })
            .collect();
        let (mut a_better, mut b_better, mut ties) = (0, 0, 0);
        for p in &pairs {
            if let (Some(x), Some(y)) = *p {
                if x > threshold || y > threshold {
                    match x.partial_cmp(&y) {
                        Some(std::cmp::Ordering::Greater) => a_better += 1,
                        Some(std::cmp::Ordering::Less) => b_better += 1,
                        _ => ties += 1,
                    }
                }
            }
        }
        let eligible = a_better + b_better + ties;
        let frac = |k: usize| if eligible == 0 { 0.0 } else { k as f64 / eligible as f64 };
        let advantage = match model_advantage(
            &ra.accuracy,
            &rb.accuracy,
            threshold,
            options.permutations,
            derive_seed(options.seed, r as u64),
        ) {
            Ok(adv) => Some(adv),
            Err(Error::NoEligibleVoxels) => None,
            Err(e) => return Err(e),
        };
        let curves = BTreeMap::from([
            (label_a.clone(), sorted_curve(&ra.accuracy, threshold)),
            (label_b.clone(), sorted_curve(&rb.accuracy, threshold)),
        ]);
        rois.push(RoiComparison {
            name: ra.name.clone(),
            threshold,
            mean_a: ra.accuracy.mean(),
            mean_b: rb.accuracy.mean(),
            scatter,
            difference_histogram: Histogram::new(&paired_differences, -1.0, 1.0, HISTOGRAM_BIN_WIDTH),
            paired_differences,
            eligible,
            a_better,
            b_better,
            ties,
            fraction_a_better: frac(a_better),
            fraction_b_better: frac(b_better),
            advantage,
            curves,
        });
    }
    Ok(ComparisonReport {
        model_a: label_a,
        model_b: label_b,
        dataset: a.dataset.clone(),
        test_fingerprint: a.test_fingerprint.clone(),
        options: *options,
        rois,
    })
}

/// Evaluates two bundles on one dataset and compares them.
pub fn compare_bundles(
    a: &ModelBundle,
    b: &ModelBundle,
    dataset: &Dataset,
    evaluation: &EvaluationOptions,
    comparison: &ComparisonOptions,
) -> Result<ComparisonReport> {
    check_partition(&a.dataset.test_fingerprint, &b.dataset.test_fingerprint, "bundles")?;
    let ea = evaluate_bundle(a, dataset, evaluation)?;
    let eb = evaluate_bundle(b, dataset, evaluation)?;
    comparison_report(&ea, &eb, comparison)
}
