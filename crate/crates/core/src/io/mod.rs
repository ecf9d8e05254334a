//! File formats, dataset manifests, model bundles and synthetic data.

pub mod bundle;
pub mod manifest;
pub mod matrix;
pub mod stimuli;
pub mod synthetic;

pub use bundle::{load_bundle, save_bundle, ModelBundle};
pub use manifest::{Dataset, DatasetManifest};
pub use matrix::{read_matrix, write_matrix};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
