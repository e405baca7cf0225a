use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Declared value interval of a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// Normalized MRI intensities in [-1, 1].
    Intensity,
    /// Binary masks with values in {0, 1}.
    Binary,
}

impl ValueRange {
    pub fn contains(self, v: f32) -> bool {
        match self {
            ValueRange::Intensity => (-1.0..=1.0).contains(&v),
            ValueRange::Binary => v == 0.0 || v == 1.0,
        }
    }
}

/// Single channel H×W grid of reals, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    values: Vec<f32>,
    range: ValueRange,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, values: Vec<f32>, range: ValueRange) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty grid {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} grid",
                values.len()
            )));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !range.contains(**v)) {
            return Err(Error::InvalidInput(format!(
                "value {v} at index {i} outside {range:?} range"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            range,
        })
    }

    pub fn intensity(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        Self::new(height, width, values, ValueRange::Intensity)
    }

    pub fn mask(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        Self::new(height, width, values, ValueRange::Binary)
    }

    /// Builds an intensity grid, clamping every value into [-1, 1].
    pub fn intensity_clamped(height: usize, width: usize, mut values: Vec<f32>) -> Result<Self> {
        for v in values.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        }
        Self::intensity(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    /// Values mapped from [-1, 1] to [0, 1]; masks are returned unchanged.
    pub fn to_unit(&self) -> Vec<f32> {
        match self.range {
            ValueRange::Intensity => self.values.iter().map(|v| (v + 1.0) * 0.5).collect(),
            ValueRange::Binary => self.values.clone(),
        }
    }

    /// Rectangular sub-grid `[row0, row0 + h) × [col0, col0 + w)`.
    pub fn crop(&self, row0: usize, col0: usize, h: usize, w: usize) -> Result<Self> {
        if row0 + h > self.height || col0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "crop {h}x{w}@({row0},{col0}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(h * w);
        for r in row0..row0 + h {
            let start = r * self.width + col0;
            values.extend_from_slice(&self.values[start..start + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            values,
            range: self.range,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ImageGrid::intensity(1, 2, vec![0.0, 1.5]).is_err());
        assert!(ImageGrid::mask(1, 2, vec![0.0, 0.5]).is_err());
        assert!(ImageGrid::mask(1, 2, vec![0.0, 1.0]).is_ok());
        assert!(ImageGrid::intensity(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn crop_extracts_rows() {
        let g = ImageGrid::intensity(3, 3, (0..9).map(|v| v as f32 / 10.0).collect()).unwrap();
        let c = g.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.values(), &[0.4, 0.5, 0.7, 0.8]);
        assert!(g.crop(2, 2, 2, 2).is_err());
    }
}
