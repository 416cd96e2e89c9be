use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Square raster with interleaved channels, values in `[0, 1]`.
/// Layout is `pixels[(y * size + x) * channels + c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    size: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl ImageGrid {
    pub fn new(size: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != size * size * channels {
            return Err(Error::shape(
                format!("{size}x{size}x{channels} = {} values", size * size * channels),
                format!("{} values", pixels.len()),
            ));
        }
        if let Some(p) = pixels.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::InvalidArgument(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(ImageGrid { size, channels, pixels })
    }

    pub fn filled(size: usize, channels: usize, value: f32) -> Self {
        ImageGrid { size, channels, pixels: vec![value; size * size * channels] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.size + x) * self.channels + c]
    }

    pub fn check_shape(&self, config: &ModelConfig) -> Result<()> {
        if self.size != config.image_size || self.channels != config.channels {
            return Err(Error::shape(
                format!("{0}x{0}x{1}", config.image_size, config.channels),
                format!("{0}x{0}x{1}", self.size, self.channels),
            ));
        }
        Ok(())
    }

    /// Flattens into `n_patches` rows of `patch * patch * channels` values.
    /// Patches are ordered row-major over the grid; inside a patch the order
    /// is (row, column, channel).
    pub fn patchify(&self, patch: usize) -> Vec<f32> {
        let grid = self.size / patch;
        let dim = patch * patch * self.channels;
        let mut out = Vec::with_capacity(grid * grid * dim);
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let start = (y * self.size + gx * patch) * self.channels;
                    out.extend_from_slice(&self.pixels[start..start + patch * self.channels]);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_wrong_length() {
        assert!(ImageGrid::new(2, 1, vec![0.0; 3]).is_err());
        assert!(ImageGrid::new(2, 1, vec![0.0, 0.5, 1.5, 0.0]).is_err());
        assert!(ImageGrid::new(2, 1, vec![0.0, 0.5, f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        // 4x4 single-channel, value = y*4+x
        let px: Vec<f32> = (0..16).map(|v| v as f32 / 16.0).collect();
        let img = ImageGrid::new(4, 1, px).unwrap();
        let p = img.patchify(2);
        assert_eq!(p.len(), 16);
        let as_idx: Vec<usize> = p.iter().map(|v| (v * 16.0).round() as usize).collect();
        assert_eq!(as_idx, vec![0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]);
    }
}
