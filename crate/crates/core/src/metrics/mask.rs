use crate::error::{Error, Result};

/// Binary segmentation mask with its physical pixel size.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
    spacing_um: f64,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>, spacing_um: f64) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "mask has {} values for {height}×{width}",
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Shape("mask values must be 0 or 1".into()));
        }
        if !(spacing_um > 0.0) || !spacing_um.is_finite() {
            return Err(Error::Shape(format!("spacing {spacing_um} must be positive")));
        }
        Ok(Self {
            height,
            width,
            values,
            spacing_um,
        })
    }

    pub fn from_points(
        height: usize,
        width: usize,
        points: &[(usize, usize)],
        spacing_um: f64,
    ) -> Result<Self> {
        let mut values = vec![0u8; height * width];
        for &(r, c) in points {
            if r >= height || c >= width {
                return Err(Error::Shape(format!("point ({r}, {c}) outside {height}×{width}")));
            }
            values[r * width + c] = 1;
        }
        Self::new(height, width, values, spacing_um)
    }

    /// Foreground where `prob >= threshold`.
    pub fn threshold<T: Copy + PartialOrd>(
        height: usize,
        width: usize,
        probs: &[T],
        threshold: T,
        spacing_um: f64,
    ) -> Result<Self> {
        let values = probs.iter().map(|&p| u8::from(p >= threshold)).collect();
        Self::new(height, width, values, spacing_um)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn spacing_um(&self) -> f64 {
        self.spacing_um
    }

    pub fn with_spacing(&self, spacing_um: f64) -> Result<Self> {
        Self::new(self.height, self.width, self.values.clone(), spacing_um)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.values[r * self.width + c] == 1
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Image diagonal in microns; the distance penalty when one surface is missing.
    pub fn diagonal_um(&self) -> f64 {
        ((self.height * self.height + self.width * self.width) as f64).sqrt() * self.spacing_um
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "masks are {}×{} and {}×{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub(crate) fn check_same_grid(&self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        if self.spacing_um != other.spacing_um {
            return Err(Error::Shape(format!(
                "spacing mismatch: {} vs {} µm/px",
                self.spacing_um, other.spacing_um
            )));
        }
        Ok(())
    }
}
