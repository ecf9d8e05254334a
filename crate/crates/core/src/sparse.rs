//! Voxel-wise sparse linear regression by Regularized Orthogonal Matching
//! Pursuit (ROMP).
//!
//! Each iteration correlates the residual with every column, keeps the `s`
//! strongest candidates, and admits the contiguous run of them whose
//! magnitudes are within a factor of two of each other and whose combined
//! energy is largest. Coefficients are then refit by least squares on the
//! whole support, so the residual norm never grows.
//!
//! Batches are admitted until the support reaches `2s` (or the residual
//! vanishes), then the support is pruned to the `s` largest refit weights and
//! refit once more. In the noiseless case a support that covers the true one
//! gives wrong columns exactly zero weight, so the prune recovers it.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::standardize::Standardizer;
use crate::{FeatureMatrix, ResponseMatrix};

/// Singular values below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-10;
/// Refit coefficients below this fraction of the largest are dropped.
const PRUNE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RompConfig {
    /// Sparsity budget `s`: maximum support size and candidate batch size.
    pub max_sparsity: usize,
    pub max_iterations: usize,
    /// Stop once `|residual| <= residual_tolerance * |centered target|`.
    pub residual_tolerance: f64,
    pub standardize: bool,
}

impl Default for RompConfig {
    fn default() -> Self {
        Self {
            max_sparsity: 50,
            max_iterations: 100,
            residual_tolerance: 1e-4,
            standardize: true,
        }
    }
}

impl RompConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_sparsity == 0 {
            return Err(Error::InvalidConfig("max_sparsity must be >= 1".into()));
        }
        if !(self.residual_tolerance >= 0.0) {
            return Err(Error::InvalidConfig(
                "residual_tolerance must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseWeights {
    /// Ascending feature indices.
    pub support: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Set when a least-squares refit was rank deficient and fell back to the
    /// minimum-norm solution.
    #[serde(default)]
    pub degenerate: bool,
}

impl SparseWeights {
    pub fn empty(intercept: f64) -> Self {
        Self {
            support: Vec::new(),
            coefficients: Vec::new(),
            intercept,
            degenerate: false,
        }
    }
}

/// Per-iteration record of a ROMP run.
#[derive(Debug, Clone, Default)]
pub struct RompTrace {
    /// Residual norm before the first iteration and after each one.
    pub residual_norms: Vec<f64>,
    /// Indices admitted at each iteration, with their `|u|` values.
    pub batches: Vec<Vec<(usize, f64)>>,
    /// Residual norm after the final prune back to `max_sparsity`, if one
    /// was needed.
    pub pruned_residual_norm: Option<f64>,
}

pub fn romp_solve(dictionary: &FeatureMatrix, target: &[f64], config: &RompConfig) -> Result<SparseWeights> {
    romp_solve_traced(dictionary, target, config).map(|(w, _)| w)
}

pub fn romp_solve_traced(
    dictionary: &FeatureMatrix,
    target: &[f64],
    config: &RompConfig,
) -> Result<(SparseWeights, RompTrace)> {
    config.validate()?;
    if dictionary.nrows() == 0 || target.is_empty() {
        return Err(Error::EmptyInput("dictionary has no rows".into()));
    }
    if dictionary.nrows() != target.len() {
        return Err(Error::SizeMismatch(format!(
            "dictionary has {} rows, target has {}",
            dictionary.nrows(),
            target.len()
        )));
    }
    let (centered, means) = center_columns(dictionary);
    Ok(romp_centered(&centered, &means, target, config))
}

fn center_columns(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    let mut means = Vec::with_capacity(x.ncols());
    for mut col in out.column_iter_mut() {
        let m = col.sum() / n;
        col.add_scalar_mut(-m);
        means.push(m);
    }
    (out, means)
}

/// ROMP on an already column-centered dictionary. `means` are the column
/// means that were removed, used only to recover the intercept.
fn romp_centered(
    phi: &DMatrix<f64>,
    means: &[f64],
    target: &[f64],
    config: &RompConfig,
) -> (SparseWeights, RompTrace) {
    let n = target.len();
    let y_mean = target.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, target.iter().map(|v| v - y_mean));
    let y_norm = yc.norm();
    let mut trace = RompTrace {
        residual_norms: vec![y_norm],
        ..Default::default()
    };
    if y_norm == 0.0 {
        return (SparseWeights::empty(y_mean), trace);
    }

    let s = config.max_sparsity;
    let mut support: Vec<usize> = Vec::new();
    let mut in_support = vec![false; phi.ncols()];
    let mut coef = DVector::zeros(0);
    let mut residual = yc.clone();
    let mut degenerate = false;

    for _ in 0..config.max_iterations {
        let r_norm = *trace.residual_norms.last().unwrap();
        if support.len() >= 2 * s || r_norm <= config.residual_tolerance * y_norm {
            break;
        }
        let u = phi.tr_mul(&residual);
        let batch = select_batch(&u, &in_support, s, 2 * s - support.len());
        if batch.is_empty() {
            break;
        }
        for &(j, _) in &batch {
            in_support[j] = true;
            support.push(j);
        }
        let sub = phi.select_columns(&support);
        let (c, rank_deficient) = least_squares(&sub, &yc);
        degenerate |= rank_deficient;
        residual = &yc - &sub * &c;
        coef = c;
        let new_norm = residual.norm();
        debug_assert!(
            new_norm <= r_norm * (1.0 + 1e-9) + 1e-12 * y_norm,
            "residual grew from {r_norm} to {new_norm}"
        );
        trace.residual_norms.push(new_norm);
        trace.batches.push(batch);
    }

    if support.len() > s {
        // keep the s strongest weights and refit on them
        let mut order: Vec<usize> = (0..support.len()).collect();
        order.sort_by(|&a, &b| coef[b].abs().total_cmp(&coef[a].abs()).then(support[a].cmp(&support[b])));
        support = order[..s].iter().map(|&k| support[k]).collect();
        let sub = phi.select_columns(&support);
        let (c, rank_deficient) = least_squares(&sub, &yc);
        degenerate |= rank_deficient;
        trace.pruned_residual_norm = Some((&yc - &sub * &c).norm());
        coef = c;
    }
    if degenerate {
        warn!("romp: rank-deficient refit, using minimum-norm solution");
    }
    // noiseless refits give exact-zero weight to wrongly admitted columns
    let largest = coef.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let mut pairs: Vec<(usize, f64)> = support
        .iter()
        .copied()
        .zip(coef.iter().copied())
        .filter(|(_, c)| c.abs() > PRUNE_TOLERANCE * largest)
        .collect();
    pairs.sort_by_key(|p| p.0);
    let intercept = y_mean - pairs.iter().map(|(j, c)| c * means[*j]).sum::<f64>();
    let weights = SparseWeights {
        support: pairs.iter().map(|p| p.0).collect(),
        coefficients: pairs.iter().map(|p| p.1).collect(),
        intercept,
        degenerate,
    };
    (weights, trace)
}

/// Picks the comparable-magnitude batch J0 from the `s` largest `|u|`
/// outside the support, capped at `room` entries.
fn select_batch(u: &DVector<f64>, in_support: &[bool], s: usize, room: usize) -> Vec<(usize, f64)> {
    let mut cand: Vec<(usize, f64)> = u
        .iter()
        .enumerate()
        .filter(|(j, v)| !in_support[*j] && v.abs() > 0.0)
        .map(|(j, v)| (j, v.abs()))
        .collect();
    // descending magnitude, lower index first on ties
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(s);
    if cand.is_empty() {
        return cand;
    }

    // Sorted descending, so every comparable set is a contiguous run.
    let mut best = (0, 0, -1.0);
    let mut end = 0;
    let mut energy = 0.0;
    for start in 0..cand.len() {
        if end <= start {
            end = start;
            energy = 0.0;
        }
        while end < cand.len() && cand[start].1 <= 2.0 * cand[end].1 {
            energy += cand[end].1 * cand[end].1;
            end += 1;
        }
        if energy > best.2 {
            best = (start, end, energy);
        }
        energy -= cand[start].1 * cand[start].1;
    }
    let mut batch = cand[best.0..best.1].to_vec();
    batch.truncate(room);
    debug_assert!(batch.first().unwrap().1 <= 2.0 * batch.last().unwrap().1);
    batch
}

/// Minimum-norm least squares via SVD. The flag reports rank deficiency.
fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = RANK_TOLERANCE * max_sv;
    let deficient = svd.singular_values.iter().any(|s| *s <= eps);
    let x = svd
        .solve(b, eps)
        .unwrap_or_else(|_| DVector::zeros(a.ncols()));
    (x, deficient)
}

/// Per-voxel sparse models sharing one feature standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEncodingModel {
    pub standardizer: Standardizer,
    pub weights: Vec<SparseWeights>,
    pub layer_id: Option<u32>,
}

impl LinearEncodingModel {
    pub fn feature_dim(&self) -> usize {
        self.standardizer.dim()
    }

    pub fn voxels(&self) -> usize {
        self.weights.len()
    }
}

pub fn fit_voxelwise(
    features: &FeatureMatrix,
    responses: &ResponseMatrix,
    config: &RompConfig,
) -> Result<LinearEncodingModel> {
    config.validate()?;
    if features.nrows() != responses.nrows() {
        return Err(Error::SizeMismatch(format!(
            "{} feature rows vs {} response rows",
            features.nrows(),
            responses.nrows()
        )));
    }
    let standardizer = if config.standardize {
        Standardizer::fit(features)
    } else {
        Standardizer::identity(features.ncols())
    };
    if responses.ncols() == 0 {
        return Ok(LinearEncodingModel {
            standardizer,
            weights: Vec::new(),
            layer_id: None,
        });
    }
    if features.nrows() == 0 {
        return Err(Error::EmptyInput("no training samples".into()));
    }
    let z = standardizer.apply(features)?;
    let (phi, means) = center_columns(&z);
    let weights = (0..responses.ncols())
        .into_par_iter()
        .map(|v| {
            let target: Vec<f64> = responses.column(v).iter().copied().collect();
            if let Some(i) = target.iter().position(|t| !t.is_finite()) {
                return Err(Error::Voxel {
                    voxel: v,
                    source: Box::new(Error::NonFinite(format!("response row {i}"))),
                });
            }
            Ok(romp_centered(&phi, &means, &target, config).0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LinearEncodingModel {
        standardizer,
        weights,
        layer_id: None,
    })
}

pub fn predict_linear(model: &LinearEncodingModel, features: &FeatureMatrix) -> Result<ResponseMatrix> {
    let z = model.standardizer.apply(features)?;
    let mut out = ResponseMatrix::zeros(z.nrows(), model.voxels());
    for (v, w) in model.weights.iter().enumerate() {
        let mut col = out.column_mut(v);
        col.fill(w.intercept);
        for (&j, &c) in w.support.iter().zip(&w.coefficients) {
            if j >= z.ncols() {
                return Err(Error::SizeMismatch(format!(
                    "voxel {v} references feature {j} of {}",
                    z.ncols()
                )));
            }
            col.axpy(c, &z.column(j), 1.0);
        }
    }
    Ok(out)
}
