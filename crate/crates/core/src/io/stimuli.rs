//! Loading stimulus images from directories, matrix files or JSON lists.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;

use super::matrix::read_matrix;
use super::read_json;
use crate::error::{Error, Result};
use crate::gabor::StimulusImage;

const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm", "pnm", "ppm"];

#[derive(Deserialize)]
struct ImageList {
    images: Vec<PathBuf>,
}

/// Accepts a directory of images (sorted by file name), a matrix file whose
/// rows are flattened square images, or a JSON file `{"images": [...]}` with
/// paths relative to the JSON file.
pub fn load_images(path: &Path) -> Result<Vec<StimulusImage>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        return files.iter().map(|f| load_image_file(f)).collect();
    }
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let list: ImageList = read_json(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            list.images.iter().map(|p| load_image_file(&base.join(p))).collect()
        }
        Some(ext) if IMAGE_EXTENSIONS.contains(&ext) => Ok(vec![load_image_file(path)?]),
        _ => images_from_matrix(&read_matrix(path)?),
    }
}

fn load_image_file(path: &Path) -> Result<StimulusImage> {
    let img = image::open(path)?.to_luma8();
    StimulusImage::from_gray(&img)
}

pub fn images_from_matrix(m: &DMatrix<f64>) -> Result<Vec<StimulusImage>> {
    let size = (m.ncols() as f64).sqrt().round() as usize;
    if size * size != m.ncols() {
        return Err(Error::SizeMismatch(format!(
            "{} columns do not form a square image",
            m.ncols()
        )));
    }
    (0..m.nrows())
        .map(|r| StimulusImage::new(size, m.row(r).iter().copied().collect()))
        .collect()
}

pub fn images_to_matrix(images: &[StimulusImage]) -> Result<DMatrix<f64>> {
    let size = images.first().map_or(0, |i| i.size());
    if images.iter().any(|i| i.size() != size) {
        return Err(Error::SizeMismatch("images differ in size".into()));
    }
    let mut m = DMatrix::zeros(images.len(), size * size);
    for (r, img) in images.iter().enumerate() {
        for (c, p) in img.pixels().iter().enumerate() {
            m[(r, c)] = *p;
        }
    }
    Ok(m)
}
