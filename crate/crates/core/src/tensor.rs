//! Dense per-pixel tensors: class probabilities, label masks and score maps.
//!
//! All tensors are stored row-major. A [`ProbMap`] keeps its class axis
//! innermost, so the probability vector of pixel `(r, c)` is the contiguous
//! slice `data[(r * width + c) * C..][..C]`.

use crate::error::{Error, Result};

/// Label id reserved for ground-truth unknown-object pixels.
pub const OOD_ID: i32 = 254;
/// Label id reserved for pixels excluded from every metric.
pub const IGNORE_ID: i32 = 255;
/// Absolute tolerance on the per-pixel probability sum.
pub const SUM_TOLERANCE: f64 = 1e-4;

/// Per-pixel class probabilities, `height x width x num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<f32>,
}

impl ProbMap {
    /// Builds a probability map and checks every invariant.
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<f32>) -> Result<Self> {
        let map = Self::new_unvalidated(height, width, num_classes, data)?;
        map.validate()?;
        Ok(map)
    }

    /// Builds a probability map checking only the shape. Values are taken as is.
    pub fn new_unvalidated(
        height: usize,
        width: usize,
        num_classes: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Schema(format!(
                "probability map must be at least 1x1, got {height}x{width}"
            )));
        }
        if num_classes < 2 {
            return Err(Error::Schema(format!(
                "probability map needs at least 2 classes, got {num_classes}"
            )));
        }
        let expected = height * width * num_classes;
        if data.len() != expected {
            return Err(Error::Schema(format!(
                "probability map {height}x{width}x{num_classes} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
        })
    }

    /// Checks value range and sum-to-one, reporting the first offending pixel in raster order.
    pub fn validate(&self) -> Result<()> {
        for (idx, probs) in self.pixels().enumerate() {
            let (row, col) = (idx / self.width, idx % self.width);
            let mut sum = 0.0f64;
            for (class, &p) in probs.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Validation(format!(
                        "pixel ({row}, {col}) class {class}: probability {p} outside [0, 1]"
                    )));
                }
                sum += f64::from(p);
            }
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::Validation(format!(
                    "pixel ({row}, {col}): probabilities sum to {sum}"
                )));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.num_classes;
        &self.data[start..start + self.num_classes]
    }

    /// Probability vectors in raster order.
    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.num_classes)
    }
}

/// Per-pixel integer class ids, with [`OOD_ID`] and [`IGNORE_ID`] reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<i32>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<i32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Schema(format!(
                "label mask must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Schema(format!(
                "label mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|&v| !(0..=IGNORE_ID).contains(&v)) {
            return Err(Error::Validation(format!(
                "pixel ({}, {}): label {} outside 0..=255",
                idx / width,
                idx % width,
                data[idx]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: i32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Checks that every id is a class in `0..num_classes` or one of the reserved ids.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (idx, &v) in self.data.iter().enumerate() {
            let ok = v == OOD_ID || v == IGNORE_ID || (v >= 0 && (v as usize) < num_classes);
            if !ok {
                return Err(Error::Validation(format!(
                    "pixel ({}, {}): label {v} is neither a class below {num_classes} nor a reserved id",
                    idx / self.width,
                    idx % self.width
                )));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> i32 {
        self.data[row * self.width + col]
    }
}

/// Per-pixel scalar uncertainty in `[0, 1]`; larger means more uncertain.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Schema(format!(
                "score map must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Schema(format!(
                "score map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "pixel ({}, {}): score {} outside [0, 1]",
                idx / width,
                idx % width,
                data[idx]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }
}
