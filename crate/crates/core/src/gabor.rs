//! Gabor wavelet pyramid and quadrature-energy feature extraction.
//!
//! Every (frequency, orientation, position) triple owns an even/odd filter
//! pair. A feature is the quadrature energy
//! `sqrt(<image, even>^2 + <image, odd>^2)`, which is insensitive to the
//! spatial phase of the stimulus.
//!
//! Filters are sampled analytically on the pixel grid, limited to a square
//! window of [`SUPPORT_SIGMAS`] envelope widths around their centre and
//! clipped at the image border. Each filter is made DC-free by removing an
//! envelope-shaped copy of its mean and then scaled to unit L2 norm.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::FeatureMatrix;

/// Window half-width in units of the envelope sigma.
pub const SUPPORT_SIGMAS: f64 = 3.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaborConfig {
    /// Pixels per side.
    pub image_size: usize,
    /// Spatial frequencies in cycles per field of view.
    pub frequencies: Vec<f64>,
    pub orientations_count: usize,
    /// Gaussian sigma as a fraction of the carrier wavelength.
    pub envelope_ratio: f64,
    /// Frequency `f` gets a `round(f * grid_multiplier)` square grid of centres.
    pub grid_multiplier: f64,
    /// Append mean luminance as one extra feature.
    pub dc_channel: bool,
}

impl Default for GaborConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            frequencies: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            orientations_count: 8,
            envelope_ratio: 0.5,
            grid_multiplier: 1.0,
            dc_channel: false,
        }
    }
}

impl GaborConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frequencies.is_empty() {
            return Err(Error::InvalidConfig("no frequencies".into()));
        }
        if self.frequencies.iter().any(|f| !f.is_finite() || *f < 1.0) {
            return Err(Error::InvalidConfig(
                "frequencies must be finite and >= 1 cycle/FOV".into(),
            ));
        }
        if self.frequencies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig(
                "frequencies must be strictly increasing".into(),
            ));
        }
        if self.orientations_count == 0 {
            return Err(Error::InvalidConfig("orientations_count must be >= 1".into()));
        }
        if !(self.envelope_ratio > 0.0) || !(self.grid_multiplier > 0.0) {
            return Err(Error::InvalidConfig(
                "envelope_ratio and grid_multiplier must be positive".into(),
            ));
        }
        let max_f = *self.frequencies.last().unwrap();
        let limit = self.image_size as f64 / 2.0;
        if max_f > limit {
            return Err(Error::NyquistViolation {
                frequency: max_f,
                limit,
                image_size: self.image_size,
            });
        }
        Ok(())
    }

    /// Number of centres per side for a frequency.
    pub fn grid(&self, frequency: f64) -> usize {
        ((frequency * self.grid_multiplier).round() as usize).max(1)
    }

    pub fn orientation(&self, k: usize) -> f64 {
        k as f64 * PI / self.orientations_count as f64
    }

    pub fn feature_dim(&self) -> usize {
        let pyramid: usize = self
            .frequencies
            .iter()
            .map(|&f| self.grid(f).pow(2) * self.orientations_count)
            .sum();
        pyramid + usize::from(self.dc_channel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Even,
    Odd,
}

/// Descriptor of one filter of the bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaborWavelet {
    pub frequency: f64,
    /// Radians in `[0, pi)`.
    pub orientation: f64,
    /// FOV-normalized `(x, y)` in `[0, 1]^2`; `y` grows with the row index.
    pub center: (f64, f64),
    pub phase: Phase,
}

/// Rectangular pixel window `[row0, row0 + rows) x [col0, col0 + cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Even and odd filters sharing position, orientation and frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraturePair {
    pub frequency: f64,
    pub orientation: f64,
    pub center: (f64, f64),
    pub window: Window,
    /// Row-major samples over `window`.
    pub even: Vec<f64>,
    pub odd: Vec<f64>,
}

impl QuadraturePair {
    pub fn wavelet(&self, phase: Phase) -> GaborWavelet {
        GaborWavelet {
            frequency: self.frequency,
            orientation: self.orientation,
            center: self.center,
            phase,
        }
    }

    fn project(&self, image: &StimulusImage) -> (f64, f64) {
        let n = image.size;
        let w = self.window;
        let (mut re, mut im) = (0.0, 0.0);
        for r in 0..w.rows {
            let row = &image.pixels[(w.row0 + r) * n + w.col0..][..w.cols];
            let even = &self.even[r * w.cols..][..w.cols];
            let odd = &self.odd[r * w.cols..][..w.cols];
            for ((p, e), o) in row.iter().zip(even).zip(odd) {
                re += p * e;
                im += p * o;
            }
        }
        (re, im)
    }

    fn energy(&self, image: &StimulusImage) -> f64 {
        let (re, im) = self.project(image);
        re.hypot(im)
    }

    /// Dense `image_size x image_size` rendering of one phase.
    pub fn dense(&self, image_size: usize, phase: Phase) -> Vec<f64> {
        let src = match phase {
            Phase::Even => &self.even,
            Phase::Odd => &self.odd,
        };
        let mut out = vec![0.0; image_size * image_size];
        for r in 0..self.window.rows {
            let dst = (self.window.row0 + r) * image_size + self.window.col0;
            out[dst..dst + self.window.cols]
                .copy_from_slice(&src[r * self.window.cols..][..self.window.cols]);
        }
        out
    }
}

/// Square grayscale stimulus, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusImage {
    size: usize,
    pixels: Vec<f64>,
}

impl StimulusImage {
    pub fn new(size: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::SizeMismatch(format!(
                "{} pixels cannot form a {size}x{size} image",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("pixel {i}")));
        }
        Ok(Self { size, pixels })
    }

    pub fn uniform(size: usize, value: f64) -> Self {
        Self {
            size,
            pixels: vec![value; size * size],
        }
    }

    /// Full-field sinusoidal grating in `[0, 1]`.
    pub fn grating(size: usize, frequency: f64, orientation: f64, phase: f64) -> Self {
        let (c, s) = (orientation.cos(), orientation.sin());
        let mut pixels = Vec::with_capacity(size * size);
        for r in 0..size {
            let y = (r as f64 + 0.5) / size as f64;
            for col in 0..size {
                let x = (col as f64 + 0.5) / size as f64;
                let u = x * c + y * s;
                pixels.push(0.5 + 0.5 * (2.0 * PI * frequency * u + phase).cos());
            }
        }
        Self { size, pixels }
    }

    pub fn from_gray(img: &image::GrayImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::SizeMismatch(format!("image is {w}x{h}, not square")));
        }
        let pixels = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
        Ok(Self {
            size: w as usize,
            pixels,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            size: self.size,
            pixels: self.pixels.iter().map(|p| p * alpha).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaborBank {
    config: GaborConfig,
    pairs: Vec<QuadraturePair>,
}

/// Builds the pyramid. Pairs are ordered frequency-major, then by
/// orientation, then by row-major centre position.
pub fn build_bank(config: &GaborConfig) -> Result<GaborBank> {
    config.validate()?;
    let n = config.image_size;
    let mut specs = Vec::new();
    for &f in &config.frequencies {
        let g = config.grid(f);
        for k in 0..config.orientations_count {
            let theta = config.orientation(k);
            for gy in 0..g {
                for gx in 0..g {
                    let center = ((gx as f64 + 0.5) / g as f64, (gy as f64 + 0.5) / g as f64);
                    specs.push((f, theta, center));
                }
            }
        }
    }
    let pairs = specs
        .into_par_iter()
        .map(|(f, theta, center)| make_pair(n, f, theta, center, config.envelope_ratio))
        .collect();
    Ok(GaborBank {
        config: config.clone(),
        pairs,
    })
}

fn pixel_range(center: f64, radius: f64, n: usize) -> (usize, usize) {
    let lo = ((center - radius) * n as f64 - 0.5).ceil().max(0.0) as usize;
    let hi = ((center + radius) * n as f64 - 0.5).floor().min(n as f64 - 1.0) as usize;
    (lo, hi.max(lo))
}

fn make_pair(n: usize, f: f64, theta: f64, center: (f64, f64), ratio: f64) -> QuadraturePair {
    let sigma = ratio / f;
    let radius = SUPPORT_SIGMAS * sigma;
    let (c0, c1) = pixel_range(center.0, radius, n);
    let (r0, r1) = pixel_range(center.1, radius, n);
    let window = Window {
        row0: r0,
        col0: c0,
        rows: r1 - r0 + 1,
        cols: c1 - c0 + 1,
    };
    let (ct, st) = (theta.cos(), theta.sin());
    let len = window.rows * window.cols;
    let mut env = Vec::with_capacity(len);
    let mut even = Vec::with_capacity(len);
    let mut odd = Vec::with_capacity(len);
    for r in r0..=r1 {
        let dy = (r as f64 + 0.5) / n as f64 - center.1;
        for c in c0..=c1 {
            let dx = (c as f64 + 0.5) / n as f64 - center.0;
            let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            let arg = 2.0 * PI * f * (dx * ct + dy * st);
            env.push(g);
            even.push(g * arg.cos());
            odd.push(g * arg.sin());
        }
    }
    remove_dc(&mut even, &env);
    remove_dc(&mut odd, &env);
    normalize(&mut even);
    normalize(&mut odd);
    QuadraturePair {
        frequency: f,
        orientation: theta,
        center,
        window,
        even,
        odd,
    }
}

fn remove_dc(filter: &mut [f64], env: &[f64]) {
    let k = filter.iter().sum::<f64>() / env.iter().sum::<f64>();
    for (v, e) in filter.iter_mut().zip(env) {
        *v -= k * e;
    }
    // second pass mops up rounding left by the first
    let k = filter.iter().sum::<f64>() / env.iter().sum::<f64>();
    for (v, e) in filter.iter_mut().zip(env) {
        *v -= k * e;
    }
}

fn normalize(filter: &mut [f64]) {
    let norm = filter.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        filter.iter_mut().for_each(|v| *v /= norm);
    }
}

impl GaborBank {
    pub fn config(&self) -> &GaborConfig {
        &self.config
    }

    pub fn pairs(&self) -> &[QuadraturePair] {
        &self.pairs
    }

    pub fn feature_dim(&self) -> usize {
        self.pairs.len() + usize::from(self.config.dc_channel)
    }

    /// Distinct (frequency, orientation) pairs in bank order.
    pub fn channels(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for p in &self.pairs {
            if out.last() != Some(&(p.frequency, p.orientation)) {
                out.push((p.frequency, p.orientation));
            }
        }
        out
    }

    /// Channel index of every pyramid feature, aligned with feature order.
    pub fn channel_of_feature(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.pairs.len());
        let mut current = 0;
        for (i, p) in self.pairs.iter().enumerate() {
            if i > 0 {
                let prev = &self.pairs[i - 1];
                if (prev.frequency, prev.orientation) != (p.frequency, p.orientation) {
                    current += 1;
                }
            }
            idx.push(current);
        }
        idx
    }

    pub fn extract_features(&self, image: &StimulusImage) -> Result<Vec<f64>> {
        if image.size != self.config.image_size {
            return Err(Error::SizeMismatch(format!(
                "image is {}px, bank expects {}px",
                image.size, self.config.image_size
            )));
        }
        let mut out: Vec<f64> = self.pairs.iter().map(|p| p.energy(image)).collect();
        if self.config.dc_channel {
            out.push(image.pixels.iter().sum::<f64>() / image.pixels.len() as f64);
        }
        Ok(out)
    }

    pub fn extract_batch(&self, images: &[StimulusImage]) -> Result<FeatureMatrix> {
        let rows = images
            .par_iter()
            .map(|img| self.extract_features(img))
            .collect::<Result<Vec<_>>>()?;
        let dim = self.feature_dim();
        let mut m = FeatureMatrix::zeros(rows.len(), dim);
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn default_bank() -> &'static GaborBank {
        static BANK: OnceLock<GaborBank> = OnceLock::new();
        BANK.get_or_init(|| build_bank(&GaborConfig::default()).unwrap())
    }

    /// Sum of energies per (frequency, orientation) channel.
    fn channel_energy(bank: &GaborBank, feats: &[f64]) -> Vec<f64> {
        let map = bank.channel_of_feature();
        let mut out = vec![0.0; bank.channels().len()];
        for (c, v) in map.iter().zip(feats) {
            out[*c] += v;
        }
        out
    }

    fn argmax(v: &[f64]) -> usize {
        let mut best = 0;
        for (i, x) in v.iter().enumerate() {
            if *x > v[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn default_bank_has_48_channels_and_expected_orientations() {
        let bank = default_bank();
        let channels = bank.channels();
        assert_eq!(channels.len(), 48);
        let orients: Vec<f64> = channels.iter().take(8).map(|c| c.1).collect();
        for (k, o) in orients.iter().enumerate() {
            assert!((o - k as f64 * PI / 8.0).abs() < 1e-15);
        }
        assert!((orients[7] - 7.0 * PI / 8.0).abs() < 1e-15);
    }

    #[test]
    fn default_feature_dim_matches_enumeration() {
        // count by walking the pyramid explicitly
        let mut count = 0;
        for f in [1usize, 2, 4, 8, 16, 32] {
            for _orient in 0..8 {
                for _row in 0..f {
                    for _col in 0..f {
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(count, 10920);
        assert_eq!(GaborConfig::default().feature_dim(), count);
        assert_eq!(default_bank().feature_dim(), count);
    }

    #[test]
    fn single_wavelet_bank() {
        let cfg = GaborConfig {
            image_size: 16,
            frequencies: vec![1.0],
            orientations_count: 1,
            ..Default::default()
        };
        let bank = build_bank(&cfg).unwrap();
        assert_eq!(bank.feature_dim(), 1);
        assert_eq!(bank.pairs()[0].wavelet(Phase::Odd).phase, Phase::Odd);
    }

    #[test]
    fn config_validation() {
        let nyq = GaborConfig {
            image_size: 32,
            frequencies: vec![1.0, 17.0],
            ..Default::default()
        };
        assert!(matches!(build_bank(&nyq), Err(Error::NyquistViolation { .. })));
        let unsorted = GaborConfig {
            frequencies: vec![2.0, 1.0],
            ..Default::default()
        };
        assert!(matches!(unsorted.validate(), Err(Error::InvalidConfig(_))));
        let low = GaborConfig {
            frequencies: vec![0.5],
            ..Default::default()
        };
        assert!(low.validate().is_err());
        let no_orient = GaborConfig {
            orientations_count: 0,
            ..Default::default()
        };
        assert!(no_orient.validate().is_err());
    }

    #[test]
    fn filters_are_dc_free_and_unit_norm() {
        for p in default_bank().pairs() {
            for filt in [&p.even, &p.odd] {
                let peak = filt.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(filt.iter().sum::<f64>().abs() <= 1e-6 * peak);
                let norm: f64 = filt.iter().map(|v| v * v).sum();
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_gray_gives_near_zero_energy() {
        let bank = default_bank();
        let feats = bank.extract_features(&StimulusImage::uniform(128, 0.5)).unwrap();
        let peak = bank
            .pairs()
            .iter()
            .flat_map(|p| p.even.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(feats.iter().all(|v| v.abs() < 1e-5 * peak));
    }

    #[test]
    fn grating_peaks_at_its_own_channel() {
        let bank = default_bank();
        let img = StimulusImage::grating(128, 4.0, PI / 4.0, 0.0);
        let e = channel_energy(bank, &bank.extract_features(&img).unwrap());
        let (f, o) = bank.channels()[argmax(&e)];
        assert_eq!(f, 4.0);
        assert!((o - PI / 4.0).abs() < 1e-12);
    }

    #[test]
    fn quadrature_energy_is_phase_invariant() {
        let bank = default_bank();
        let a = bank
            .extract_features(&StimulusImage::grating(128, 4.0, PI / 4.0, 0.0))
            .unwrap();
        let b = bank
            .extract_features(&StimulusImage::grating(128, 4.0, PI / 4.0, PI / 2.0))
            .unwrap();
        // Filters whose envelope the image border cuts are no longer an exact
        // quadrature pair, so the per-feature check covers interior positions.
        let sigma = bank.config().envelope_ratio / 4.0;
        let mut checked = 0;
        let (mut sum_a, mut sum_b) = (0.0, 0.0);
        for (i, p) in bank.pairs().iter().enumerate() {
            if p.frequency != 4.0 || (p.orientation - PI / 4.0).abs() > 1e-12 {
                continue;
            }
            sum_a += a[i];
            sum_b += b[i];
            let margin = p.center.0.min(p.center.1).min(1.0 - p.center.0).min(1.0 - p.center.1);
            if margin >= 2.0 * sigma {
                assert!((a[i] - b[i]).abs() <= 0.01 * a[i], "{} vs {}", a[i], b[i]);
                checked += 1;
            }
        }
        assert_eq!(checked, 4);
        assert!((sum_a - sum_b).abs() <= 0.01 * sum_a);
    }

    #[test]
    fn extraction_is_positively_homogeneous() {
        let bank = default_bank();
        let img = StimulusImage::grating(128, 8.0, PI / 8.0, 0.3);
        let a = bank.extract_features(&img).unwrap();
        let b = bank.extract_features(&img.scaled(3.7)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((3.7 * x - y).abs() <= 1e-10 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn size_mismatch_rejected() {
        let bank = default_bank();
        assert!(matches!(
            bank.extract_features(&StimulusImage::uniform(64, 0.0)),
            Err(Error::SizeMismatch(_))
        ));
        assert!(bank
            .extract_batch(&[StimulusImage::uniform(128, 0.0), StimulusImage::uniform(64, 0.0)])
            .is_err());
    }

    #[test]
    fn batch_matches_single_extraction() {
        let bank = default_bank();
        let empty = bank.extract_batch(&[]).unwrap();
        assert_eq!(empty.shape(), (0, 10920));

        let img = StimulusImage::grating(128, 2.0, 0.0, 1.0);
        let single = bank.extract_features(&img).unwrap();
        let batch = bank.extract_batch(std::slice::from_ref(&img)).unwrap();
        assert_eq!(batch.nrows(), 1);
        assert!(batch.row(0).iter().zip(&single).all(|(a, b)| a == b));

        let imgs: Vec<_> = [2.0, 8.0, 16.0]
            .iter()
            .map(|&f| StimulusImage::grating(128, f, PI / 2.0, 0.0))
            .collect();
        let m = bank.extract_batch(&imgs).unwrap();
        let channels = bank.channels();
        for (i, f) in [2.0, 8.0, 16.0].iter().enumerate() {
            let row: Vec<f64> = m.row(i).iter().cloned().collect();
            let e = channel_energy(bank, &row);
            assert_eq!(channels[argmax(&e)].0, *f);
        }
    }

    #[test]
    fn dc_channel_appends_mean_luminance() {
        let cfg = GaborConfig {
            image_size: 16,
            frequencies: vec![1.0, 2.0],
            orientations_count: 2,
            dc_channel: true,
            ..Default::default()
        };
        let bank = build_bank(&cfg).unwrap();
        assert_eq!(bank.feature_dim(), cfg.feature_dim());
        assert_eq!(bank.feature_dim(), 2 * (1 + 4) + 1);
        let f = bank.extract_features(&StimulusImage::uniform(16, 0.25)).unwrap();
        assert!((f.last().unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn bank_construction_is_deterministic() {
        let cfg = GaborConfig {
            image_size: 32,
            frequencies: vec![1.0, 4.0],
            ..Default::default()
        };
        assert_eq!(build_bank(&cfg).unwrap(), build_bank(&cfg).unwrap());
    }
}
