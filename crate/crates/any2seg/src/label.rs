//! Dense per-pixel class labels.

use crate::error::{Error, Result};

/// Sentinel label for pixels excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// H×W map of u8 class ids in row-major order. The value
/// [`IGNORE_LABEL`] marks pixels that carry no supervision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<LabelMap> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "label map {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> LabelMap {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Number of pixels carrying class `k`.
    pub fn count(&self, k: u8) -> usize {
        self.data.iter().filter(|&&v| v == k).count()
    }

    /// Checks every non-ignored label is below `num_classes`.
    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if v != IGNORE_LABEL && (v as usize) >= num_classes {
                return Err(Error::data(format!(
                    "label {} at pixel {} exceeds class count {}",
                    v, i, num_classes
                )));
            }
        }
        Ok(())
    }
}
