//! Visual encoding models that map image features to voxel responses.
//!
//! Three model families are supported:
//!
//! * **GWP**: quadrature-energy features from a Gabor wavelet pyramid
//!   ([`gabor`]) mapped to each voxel by sparse regression ([`sparse`]).
//! * **DNN-linear**: precomputed deep-network layer features mapped to each
//!   voxel by the same sparse regression, with the best layer picked per voxel.
//! * **DNN-TL**: the same features feeding a two-layer fully connected head
//!   ([`mlp`]) trained jointly for all voxels of a region with a reweighted
//!   correlation loss ([`trainer`]).
//!
//! [`stats`] and [`report`] implement the evaluation battery, and [`io`]
//! holds the file formats and a synthetic ground-truth generator.

pub mod adam;
pub mod error;
pub mod gabor;
pub mod io;
pub mod mlp;
pub mod report;
pub mod rng;
pub mod sparse;
pub mod standardize;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};

/// Samples × features.
pub type FeatureMatrix = DMatrix<f64>;
/// Samples × voxels.
pub type ResponseMatrix = DMatrix<f64>;

pub use gabor::{GaborBank, GaborConfig, StimulusImage};
pub use mlp::{MlpHeadParams, TrainConfig, VoxelWeights};
pub use sparse::{LinearEncodingModel, RompConfig, SparseWeights};
pub use stats::{AccuracyVector, AdvantageResult, SignificanceResult};
pub use trainer::{DatasetSplit, ModelKind, TrainedRoiModel};
