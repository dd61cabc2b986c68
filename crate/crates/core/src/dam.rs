//! Data augmentation: normalize a 1-D RSSI image, replicate it into a
//! square, then drop and re-fill pixels in every row but the first.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::fingerprint::{RssiImage, NOT_VISIBLE_DB};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DamError {
    #[error("image has {width} pixels but the configured image size is {size}")]
    ImageTooWide { width: usize, size: usize },
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DamMode {
    #[default]
    Train,
    Eval,
}

/// Whether dropout is decided per pixel or per column (same AP dropped in
/// every augmented row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutGranularity {
    #[default]
    Pixel,
    Column,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DamConfig {
    /// Side length R of the square image.
    pub image_size: usize,
    pub dropout_prob: f64,
    pub infill_mean: f64,
    pub infill_sigma: f64,
    pub granularity: DropoutGranularity,
    pub mode: DamMode,
}

impl Default for DamConfig {
    fn default() -> Self {
        Self {
            image_size: 206,
            dropout_prob: 0.1,
            infill_mean: 0.0,
            infill_sigma: 0.05,
            granularity: DropoutGranularity::Pixel,
            mode: DamMode::Train,
        }
    }
}

impl DamConfig {
    pub fn validate(&self) -> Result<(), DamError> {
        let bad = |m: &str| Err(DamError::InvalidConfig(m.into()));
        if self.image_size == 0 {
            return bad("image_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return bad("dropout_prob must lie in [0, 1)");
        }
        if !self.infill_mean.is_finite() {
            return bad("infill_mean must be finite");
        }
        if !(self.infill_sigma.is_finite() && self.infill_sigma >= 0.0) {
            return bad("infill_sigma must be finite and non-negative");
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: DamMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    /// True when training-mode output can differ from eval-mode output.
    pub fn is_stochastic(&self) -> bool {
        self.dropout_prob > 0.0
    }
}

/// Square R×R×3 image stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareImage {
    size: usize,
    /// Columns `0..active` carry access points; the rest are zero padding.
    active: usize,
    data: Vec<f64>,
}

impl SquareImage {
    /// Wraps raw `size·size·3` values; every column counts as active.
    pub fn from_data(size: usize, data: Vec<f64>) -> Result<Self, DamError> {
        if size == 0 || data.len() != size * size * 3 {
            return Err(DamError::InvalidConfig(format!(
                "{} values cannot form a {size}×{size}×3 image",
                data.len()
            )));
        }
        Ok(Self {
            size,
            active: size,
            data,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn active_width(&self) -> usize {
        self.active
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.size + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.size * 3..(row + 1) * self.size * 3]
    }

    fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.size + col) * 3;
        &mut self.data[i..i + 3]
    }
}

/// Maps dB to `[0, 1]` with `(v + 100) / 100`.
pub fn normalize(image: &RssiImage) -> RssiImage {
    RssiImage {
        pixels: image
            .pixels
            .iter()
            .map(|p| p.map(|v| ((v - NOT_VISIBLE_DB) / -NOT_VISIBLE_DB).clamp(0.0, 1.0)))
            .collect(),
    }
}

/// Right-pads the row with zeros to `size` pixels and repeats it `size` times.
pub fn replicate(image: &RssiImage, size: usize) -> Result<SquareImage, DamError> {
    let width = image.width();
    if width > size {
        return Err(DamError::ImageTooWide { width, size });
    }
    let mut row = vec![0.0; size * 3];
    row[..width * 3].copy_from_slice(&image.flatten());
    let mut data = Vec::with_capacity(size * size * 3);
    for _ in 0..size {
        data.extend_from_slice(&row);
    }
    Ok(SquareImage {
        size,
        active: width,
        data,
    })
}

/// Drops pixels of rows `1..R` (active columns only) with probability `p`
/// and replaces each channel with `clamp(N(mean, sigma), 0, 1)`. Row 0 is
/// never touched.
pub fn dropout_and_infill<G: Rng + ?Sized>(
    image: &mut SquareImage,
    config: &DamConfig,
    rng: &mut G,
) -> Result<(), DamError> {
    config.validate()?;
    let infill = Normal::new(config.infill_mean, config.infill_sigma)
        .map_err(|e| DamError::InvalidConfig(e.to_string()))?;
    let p = config.dropout_prob;
    let size = image.size;
    let active = image.active;
    match config.granularity {
        DropoutGranularity::Pixel => {
            for row in 1..size {
                for col in 0..active {
                    if rng.gen::<f64>() < p {
                        for c in image.pixel_mut(row, col) {
                            *c = infill.sample(rng).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        DropoutGranularity::Column => {
            let dropped: Vec<usize> = (0..active).filter(|_| rng.gen::<f64>() < p).collect();
            for row in 1..size {
                for &col in &dropped {
                    for c in image.pixel_mut(row, col) {
                        *c = infill.sample(rng).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Full pipeline on a dB-valued 1-D image. Eval mode is deterministic and
/// never consumes randomness.
pub fn apply<G: Rng + ?Sized>(
    image: &RssiImage,
    config: &DamConfig,
    rng: &mut G,
) -> Result<SquareImage, DamError> {
    config.validate()?;
    let mut square = replicate(&normalize(image), config.image_size)?;
    if config.mode == DamMode::Train {
        dropout_and_infill(&mut square, config, rng)?;
    }
    Ok(square)
}
