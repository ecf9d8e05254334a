//! Two fully connected layers appended to frozen features, trained for all
//! voxels of a region at once.
//!
//! `predicted = W2 * rectify(W1 * x + b1) + b2`, and the loss is the
//! voxel-weighted negative Pearson correlation plus an L2 penalty on the
//! weight matrices:
//!
//! `J = -sum_v mu_v * corr(measured_v, predicted_v) + lambda * (|W1|^2 + |W2|^2)`

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adam::{self, AdamState};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::{FeatureMatrix, ResponseMatrix};

/// Predicted series with variance below this count as dead during training.
pub const DEAD_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHeadParams {
    /// hidden × feature_dim
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// voxels × hidden
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_size: usize,
    /// L2 coefficient on the weight matrices.
    pub lambda: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Rounds without improvement tolerated before stopping.
    pub patience: usize,
    /// Smallest gain in validation score that counts as improvement.
    pub min_improvement: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mu_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_size: 100,
            lambda: 1e-3,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 10,
            min_improvement: 1e-4,
            batch_size: 128,
            seed: 0,
            mu_threshold: 0.27,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 {
            return Err(Error::InvalidConfig("hidden_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if !(self.mu_threshold > 0.0) {
            return Err(Error::InvalidConfig("mu_threshold must be > 0".into()));
        }
        if self.batch_size < 3 {
            return Err(Error::InvalidConfig(
                "batch_size must be >= 3 for correlations".into(),
            ));
        }
        Ok(())
    }
}

/// Per-voxel loss weights, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelWeights {
    pub mu: Vec<f64>,
}

impl VoxelWeights {
    pub fn ones(voxels: usize) -> Self {
        Self {
            mu: vec![1.0; voxels],
        }
    }

    pub fn mean(&self) -> f64 {
        if self.mu.is_empty() {
            0.0
        } else {
            self.mu.iter().sum::<f64>() / self.mu.len() as f64
        }
    }

    pub fn total(&self) -> f64 {
        self.mu.iter().sum()
    }
}

pub fn init_params(feature_dim: usize, voxels: usize, config: &TrainConfig) -> MlpHeadParams {
    let mut rng = seeded(config.seed);
    let h = config.hidden_size;
    let s1 = 1.0 / (feature_dim as f64).sqrt();
    let s2 = 1.0 / (h as f64).sqrt();
    let mut draw = |scale: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    };
    // row-major fill order keeps the layout independent of storage order
    let w1 = DMatrix::from_row_iterator(h, feature_dim, (0..h * feature_dim).map(|_| draw(s1)));
    let w2 = DMatrix::from_row_iterator(voxels, h, (0..voxels * h).map(|_| draw(s2)));
    MlpHeadParams {
        w1,
        b1: DVector::zeros(h),
        w2,
        b2: DVector::zeros(voxels),
    }
}

impl MlpHeadParams {
    pub fn zeros(feature_dim: usize, hidden: usize, voxels: usize) -> Self {
        Self {
            w1: DMatrix::zeros(hidden, feature_dim),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(voxels, hidden),
            b2: DVector::zeros(voxels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.feature_dim(), self.hidden(), self.voxels())
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn voxels(&self) -> usize {
        self.w2.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// `|W1|_F^2 + |W2|_F^2`; biases are not penalized.
    pub fn weight_norm_sq(&self) -> f64 {
        self.w1.norm_squared() + self.w2.norm_squared()
    }

    pub fn validate(&self) -> Result<()> {
        let consistent = self.b1.len() == self.hidden()
            && self.w2.ncols() == self.hidden()
            && self.b2.len() == self.voxels();
        if !consistent {
            return Err(Error::SizeMismatch("inconsistent head parameter shapes".into()));
        }
        let finite = self
            .w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("head parameters".into()));
        }
        Ok(())
    }

    fn blocks(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
        ]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }

    /// All parameters in a fixed order (W1, b1, W2, b2; column-major).
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn from_flat_like(&self, flat: &[f64]) -> Self {
        let mut out = self.zeros_like();
        let mut offset = 0;
        for block in out.blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        out
    }
}

struct Activations {
    pre: DMatrix<f64>,
    hidden: DMatrix<f64>,
    out: DMatrix<f64>,
}

fn check_features(params: &MlpHeadParams, features: &FeatureMatrix) -> Result<()> {
    if features.ncols() != params.feature_dim() {
        return Err(Error::SizeMismatch(format!(
            "head expects {} features, got {}",
            params.feature_dim(),
            features.ncols()
        )));
    }
    Ok(())
}

fn activations(params: &MlpHeadParams, x: &FeatureMatrix) -> Activations {
    let mut pre = x * params.w1.transpose();
    for mut row in pre.row_iter_mut() {
        row += params.b1.transpose();
    }
    let hidden = pre.map(|z| z.max(0.0));
    let mut out = &hidden * params.w2.transpose();
    for mut row in out.row_iter_mut() {
        row += params.b2.transpose();
    }
    Activations { pre, hidden, out }
}

/// Samples × voxels predictions.
pub fn forward(params: &MlpHeadParams, features: &FeatureMatrix) -> Result<ResponseMatrix> {
    check_features(params, features)?;
    Ok(activations(params, features).out)
}

/// How degenerate (constant) series are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationMode {
    /// Constant measured or predicted series is an error.
    Strict,
    /// Constant series contribute zero correlation and zero gradient.
    Training,
}

#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub loss: f64,
    /// Per-voxel correlation; 0 for voxels skipped in training mode.
    pub correlations: Vec<f64>,
    pub gradient: Option<MlpHeadParams>,
}

/// Correlation of one voxel and `dC/dpredicted`, or `None` if degenerate.
fn correlation_with_grad(
    measured: &[f64],
    predicted: &[f64],
    mode: CorrelationMode,
    want_grad: bool,
) -> Option<(f64, Vec<f64>)> {
    let n = measured.len() as f64;
    let mm = measured.iter().sum::<f64>() / n;
    let pm = predicted.iter().sum::<f64>() / n;
    let a: Vec<f64> = measured.iter().map(|v| v - mm).collect();
    let b: Vec<f64> = predicted.iter().map(|v| v - pm).collect();
    let saa: f64 = a.iter().map(|v| v * v).sum();
    let sbb: f64 = b.iter().map(|v| v * v).sum();
    let degenerate = match mode {
        CorrelationMode::Strict => {
            crate::stats::pearson(measured, predicted).is_err()
        }
        CorrelationMode::Training => saa / n < DEAD_VARIANCE || sbb / n < DEAD_VARIANCE,
    };
    if degenerate {
        return None;
    }
    let (na, nb) = (saa.sqrt(), sbb.sqrt());
    let c = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    let grad = if want_grad {
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x / na - c * y / nb) / nb)
            .collect()
    } else {
        Vec::new()
    };
    Some((c, grad))
}

pub fn evaluate_loss(
    params: &MlpHeadParams,
    features: &FeatureMatrix,
    measured: &ResponseMatrix,
    mu: &VoxelWeights,
    lambda: f64,
    mode: CorrelationMode,
    want_grad: bool,
) -> Result<LossEvaluation> {
    check_features(params, features)?;
    let (n, v) = (features.nrows(), params.voxels());
    if measured.shape() != (n, v) {
        return Err(Error::SizeMismatch(format!(
            "measured responses {:?}, expected ({n}, {v})",
            measured.shape()
        )));
    }
    if mu.mu.len() != v {
        return Err(Error::SizeMismatch(format!(
            "{} voxel weights for {v} voxels",
            mu.mu.len()
        )));
    }
    if n < 3 {
        return Err(Error::SizeMismatch(format!(
            "correlation loss needs at least 3 samples, got {n}"
        )));
    }
    let act = activations(params, features);
    let mut d_out = DMatrix::zeros(n, v);
    let mut correlations = vec![0.0; v];
    let mut loss = lambda * params.weight_norm_sq();
    for k in 0..v {
        let weight = mu.mu[k];
        let needs_grad = want_grad && weight != 0.0;
        let measured_k = measured.column(k);
        let predicted_k = act.out.column(k);
        match correlation_with_grad(measured_k.as_slice(), predicted_k.as_slice(), mode, needs_grad) {
            Some((c, g)) => {
                correlations[k] = c;
                loss -= weight * c;
                if needs_grad {
                    for (i, gi) in g.into_iter().enumerate() {
                        d_out[(i, k)] = -weight * gi;
                    }
                }
            }
            None if mode == CorrelationMode::Strict => {
                return Err(Error::ZeroVariance { voxel: k });
            }
            None => {}
        }
    }
    let gradient = want_grad.then(|| {
        let mut d_w2 = d_out.transpose() * &act.hidden;
        d_w2 += &params.w2 * (2.0 * lambda);
        let d_b2 = DVector::from_iterator(v, d_out.column_iter().map(|c| c.sum()));
        let mut d_pre = &d_out * &params.w2;
        d_pre.zip_apply(&act.pre, |g, z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        let mut d_w1 = d_pre.transpose() * features;
        d_w1 += &params.w1 * (2.0 * lambda);
        let d_b1 = DVector::from_iterator(params.hidden(), d_pre.column_iter().map(|c| c.sum()));
        MlpHeadParams {
            w1: d_w1,
            b1: d_b1,
            w2: d_w2,
            b2: d_b2,
        }
    });
    Ok(LossEvaluation {
        loss,
        correlations,
        gradient,
    })
}

/// Standalone loss evaluation; a constant voxel series is an error.
pub fn loss(
    params: &MlpHeadParams,
    features: &FeatureMatrix,
    measured: &ResponseMatrix,
    mu: &VoxelWeights,
    lambda: f64,
) -> Result<f64> {
    evaluate_loss(params, features, measured, mu, lambda, CorrelationMode::Strict, false).map(|e| e.loss)
}

pub fn loss_gradient(
    params: &MlpHeadParams,
    features: &FeatureMatrix,
    measured: &ResponseMatrix,
    mu: &VoxelWeights,
    lambda: f64,
) -> Result<MlpHeadParams> {
    evaluate_loss(params, features, measured, mu, lambda, CorrelationMode::Strict, true)
        .map(|e| e.gradient.expect("gradient requested"))
}

pub fn adam_step(params: &mut MlpHeadParams, gradient: &MlpHeadParams, state: &mut AdamState, learning_rate: f64) {
    let grads = gradient.blocks();
    let [p0, p1, p2, p3] = params.blocks_mut();
    adam::adam_step(
        &mut [(p0, grads[0]), (p1, grads[1]), (p2, grads[2]), (p3, grads[3])],
        state,
        learning_rate,
    );
}
