use ndarray::Array3;

use crate::error::{Error, Result};

/// Pixel grid with the normalized coordinate convention used everywhere in
/// this crate: pixel centers live in [-1, 1]^2, x points right, y points
/// down, and pixel (row i, col j) has center
///
/// ```text
/// x = (2 j + 1) / W - 1,    y = (2 i + 1) / H - 1
/// ```
///
/// The inverse map (continuous pixel index of a normalized point) is
/// `u = (x + 1) W / 2 - 1/2`, which is exact in floating point whenever W is
/// a power of two; identity-warp bit-exactness relies on that round trip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg(format!(
                "grid dimensions must be >= 1, got {height}x{width}"
            )));
        }
        Ok(ImageGrid { height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Normalized (x, y) of the center of pixel (row, col).
    #[inline]
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        let x = (2 * col + 1) as f64 / self.width as f64 - 1.0;
        let y = (2 * row + 1) as f64 / self.height as f64 - 1.0;
        [x, y]
    }

    /// Continuous (col, row) pixel position of a normalized point. Integer
    /// values land exactly on pixel centers.
    #[inline]
    pub fn continuous_position(&self, x: f64, y: f64) -> [f64; 2] {
        let u = (x + 1.0) * self.width as f64 / 2.0 - 0.5;
        let v = (y + 1.0) * self.height as f64 / 2.0 - 0.5;
        [u, v]
    }

    /// H x W x 2 array of pixel-center coordinates (x in channel 0, y in 1).
    pub fn centers(&self) -> Array3<f64> {
        Array3::from_shape_fn((self.height, self.width, 2), |(i, j, c)| {
            self.pixel_center(i, j)[c]
        })
    }

    /// Grid at one quarter the resolution (rounded up, at least 1x1); the
    /// resolution used for occlusion maps and generator features.
    pub fn quarter(&self) -> ImageGrid {
        ImageGrid {
            height: (self.height / 4).max(1),
            width: (self.width / 4).max(1),
        }
    }

    /// Width of one pixel in normalized units.
    pub fn pixel_spacing_x(&self) -> f64 {
        2.0 / self.width as f64
    }

    pub fn pixel_spacing_y(&self) -> f64 {
        2.0 / self.height as f64
    }
}
