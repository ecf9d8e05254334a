//! Prediction accuracy and the randomization statistics built on it.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::ResponseMatrix;

pub const DEFAULT_SHUFFLES: usize = 1000;
pub const DEFAULT_P_LEVEL: f64 = 0.001;
pub const DEFAULT_PERMUTATIONS: usize = 1000;
pub const ADVANTAGE_CONFIDENCE: f64 = 0.95;

struct Centered {
    dev: Vec<f64>,
    ss: f64,
}

fn center(x: &[f64]) -> Centered {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let dev: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let ss = dev.iter().map(|d| d * d).sum();
    Centered { dev, ss }
}

/// A series is constant when its centered energy is at rounding level
/// relative to its magnitude.
fn is_constant(x: &[f64], ss: f64) -> bool {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 64.0 * f64::EPSILON * peak;
    ss <= x.len() as f64 * floor * floor
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::SizeMismatch(format!(
            "series lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::SizeMismatch(format!(
            "correlation needs at least 3 samples, got {}",
            x.len()
        )));
    }
    let (a, b) = (center(x), center(y));
    if is_constant(x, a.ss) || is_constant(y, b.ss) {
        return Err(Error::ZeroVariance { voxel: 0 });
    }
    let sxy: f64 = a.dev.iter().zip(&b.dev).map(|(p, q)| p * q).sum();
    Ok((sxy / (a.ss.sqrt() * b.ss.sqrt())).clamp(-1.0, 1.0))
}

/// Per-voxel test-set correlations. `None` marks a zero-variance voxel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyVector {
    pub voxel_ids: Vec<usize>,
    pub values: Vec<Option<f64>>,
}

impl AccuracyVector {
    pub fn from_values(values: Vec<Option<f64>>) -> Self {
        Self {
            voxel_ids: (0..values.len()).collect(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mean over defined voxels.
    pub fn mean(&self) -> Option<f64> {
        let defined: Vec<f64> = self.values.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn undefined(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(i, _)| self.voxel_ids[i])
            .collect()
    }
}

pub fn accuracy(measured: &ResponseMatrix, predicted: &ResponseMatrix) -> Result<AccuracyVector> {
    if measured.shape() != predicted.shape() {
        return Err(Error::SizeMismatch(format!(
            "measured {:?} vs predicted {:?}",
            measured.shape(),
            predicted.shape()
        )));
    }
    let values = (0..measured.ncols())
        .map(|v| match pearson(measured.column(v).as_slice(), predicted.column(v).as_slice()) {
            Ok(c) => Ok(Some(c)),
            Err(Error::ZeroVariance { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AccuracyVector::from_values(values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    /// Maximum over voxels of the per-voxel null quantile.
    pub threshold: f64,
    pub p_level: f64,
    pub significant: Vec<bool>,
    pub null_samples_per_voxel: usize,
    /// `None` for voxels excluded because of zero variance.
    pub per_voxel_thresholds: Vec<Option<f64>>,
    pub excluded_voxels: Vec<usize>,
}

/// 1-based rank of the order statistic used as the `level` quantile of
/// `count` sorted samples.
fn quantile_rank(level: f64, count: usize) -> usize {
    let raw = level * count as f64;
    // guard against 0.999 * 1000 landing a hair above 999
    let rank = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    rank.clamp(1, count)
}

pub fn randomization_threshold(
    measured: &ResponseMatrix,
    predicted: &ResponseMatrix,
    shuffles: usize,
    p: f64,
    seed: u64,
) -> Result<SignificanceResult> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidConfig(format!("p level {p} outside (0, 1)")));
    }
    if (shuffles as f64) < (1.0 / p) * (1.0 - 1e-9) {
        return Err(Error::InvalidConfig(format!(
            "{shuffles} shuffles cannot resolve p = {p}"
        )));
    }
    let acc = accuracy(measured, predicted)?;
    let rank = quantile_rank(1.0 - p, shuffles);
    let per_voxel: Vec<Option<f64>> = (0..measured.ncols())
        .into_par_iter()
        .map(|v| {
            acc.values[v]?;
            let a = center(measured.column(v).as_slice());
            let b = center(predicted.column(v).as_slice());
            let norm = a.ss.sqrt() * b.ss.sqrt();
            let mut rng = seeded(derive_seed(seed, v as u64));
            let mut order: Vec<usize> = (0..b.dev.len()).collect();
            let mut null: Vec<f64> = (0..shuffles)
                .map(|_| {
                    order.shuffle(&mut rng);
                    let s: f64 = a.dev.iter().zip(&order).map(|(x, &j)| x * b.dev[j]).sum();
                    s / norm
                })
                .collect();
            null.sort_by(f64::total_cmp);
            Some(null[rank - 1])
        })
        .collect();
    let threshold = per_voxel
        .iter()
        .flatten()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::EmptyInput("no voxel with a defined accuracy".into()))?;
    let excluded = acc.undefined();
    if !excluded.is_empty() {
        log::info!(
            "randomization: excluded_zero_variance_voxels={}",
            excluded.len()
        );
    }
    Ok(SignificanceResult {
        threshold,
        p_level: p,
        significant: significance_flags(&acc, threshold),
        null_samples_per_voxel: shuffles,
        per_voxel_thresholds: per_voxel,
        excluded_voxels: excluded,
    })
}

pub fn significance_flags(acc: &AccuracyVector, threshold: f64) -> Vec<bool> {
    acc.values
        .iter()
        .map(|c| c.is_some_and(|c| c > threshold))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageResult {
    /// Fraction of eligible voxels on which model A is more accurate.
    pub advantage_fraction: f64,
    /// 95th percentile of `|null - 0.5|`.
    pub significance_band: f64,
    pub significant: bool,
    pub eligible_voxel_count: usize,
    pub permutations: usize,
    /// Share of null draws at least as far from 0.5 as the observed value.
    pub p_value: f64,
}

pub fn model_advantage(
    acc_a: &AccuracyVector,
    acc_b: &AccuracyVector,
    threshold: f64,
    permutations: usize,
    seed: u64,
) -> Result<AdvantageResult> {
    if acc_a.voxel_ids != acc_b.voxel_ids {
        return Err(Error::SizeMismatch(
            "accuracy vectors cover different voxels".into(),
        ));
    }
    if permutations == 0 {
        return Err(Error::InvalidConfig("permutations must be >= 1".into()));
    }
    // Scores doubled so ties stay integral: 2 = A wins, 1 = tie, 0 = B wins.
    let scores: Vec<u32> = acc_a
        .values
        .iter()
        .zip(&acc_b.values)
        .filter_map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) if *a > threshold || *b > threshold => Some(if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            }),
            _ => None,
        })
        .collect();
    if scores.is_empty() {
        return Err(Error::NoEligibleVoxels);
    }
    let denom = 2.0 * scores.len() as f64;
    let total: u64 = scores.iter().map(|&s| s as u64).sum();
    let advantage = total as f64 / denom;

    let mut rng = seeded(seed);
    let mut deviations: Vec<f64> = (0..permutations)
        .map(|_| {
            let t: u64 = scores
                .iter()
                .map(|&s| if rng.random::<bool>() { 2 - s as u64 } else { s as u64 })
                .sum();
            (t as f64 / denom - 0.5).abs()
        })
        .collect();
    deviations.sort_by(f64::total_cmp);
    let band = deviations[quantile_rank(ADVANTAGE_CONFIDENCE, permutations) - 1];
    let observed = (advantage - 0.5).abs();
    let extreme = deviations.iter().filter(|d| **d >= observed).count();
    Ok(AdvantageResult {
        advantage_fraction: advantage,
        significance_band: band,
        significant: observed > band,
        eligible_voxel_count: scores.len(),
        permutations,
        p_value: extreme as f64 / permutations as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortedCurve {
    /// Accuracies above threshold, descending; point `i` has rank `i + 1`.
    pub accuracies: Vec<f64>,
    /// Above-threshold voxels over all voxels of the ROI.
    pub significant_fraction: f64,
}

impl SortedCurve {
    pub fn points(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.accuracies.iter().enumerate().map(|(i, c)| (i + 1, *c))
    }
}

pub fn sorted_curve(acc: &AccuracyVector, threshold: f64) -> SortedCurve {
    let mut accuracies: Vec<f64> = acc
        .values
        .iter()
        .flatten()
        .copied()
        .filter(|c| *c > threshold)
        .collect();
    accuracies.sort_by(|a, b| b.total_cmp(a));
    let significant_fraction = if acc.is_empty() {
        0.0
    } else {
        accuracies.len() as f64 / acc.len() as f64
    };
    SortedCurve {
        accuracies,
        significant_fraction,
    }
}

pub fn sorted_curves(
    acc_per_model: &BTreeMap<String, AccuracyVector>,
    threshold: f64,
) -> BTreeMap<String, SortedCurve> {
    acc_per_model
        .iter()
        .map(|(name, acc)| (name.clone(), sorted_curve(acc, threshold)))
        .collect()
}
