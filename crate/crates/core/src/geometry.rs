use nalgebra::DMatrix;

use crate::error::{dim_err, Result};

/// Spatial layout of an image. Pixels are indexed column-major:
/// pixel `(row, col)` lives at `row + col * height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
}

impl ImageGeometry {
    pub fn new(height: usize, width: usize, bands: usize) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return dim_err(format!(
                "geometry must be non-empty, got {height}x{width}x{bands}"
            ));
        }
        Ok(ImageGeometry {
            height,
            width,
            bands,
        })
    }

    /// Single-band geometry.
    pub fn plane(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, 1)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row + col * self.height
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.height, index / self.height)
    }

    pub fn with_bands(&self, bands: usize) -> Self {
        ImageGeometry { bands, ..*self }
    }

    /// Same spatial grid, ignoring band count.
    pub fn same_grid(&self, other: &ImageGeometry) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// A multi-band image stored as a `bands x pixels` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Cube {
    pub geometry: ImageGeometry,
    pub data: DMatrix<f64>,
}

impl Cube {
    pub fn new(geometry: ImageGeometry, data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() != geometry.bands || data.ncols() != geometry.pixels() {
            return dim_err(format!(
                "cube data is {}x{}, geometry expects {}x{}",
                data.nrows(),
                data.ncols(),
                geometry.bands,
                geometry.pixels()
            ));
        }
        Ok(Cube { geometry, data })
    }

    pub fn zeros(geometry: ImageGeometry) -> Self {
        Cube {
            geometry,
            data: DMatrix::zeros(geometry.bands, geometry.pixels()),
        }
    }

    pub fn from_band(geometry: ImageGeometry, band: &[f64]) -> Result<Self> {
        let geometry = geometry.with_bands(1);
        if band.len() != geometry.pixels() {
            return dim_err(format!(
                "band has {} pixels, geometry expects {}",
                band.len(),
                geometry.pixels()
            ));
        }
        Ok(Cube {
            geometry,
            data: DMatrix::from_row_slice(1, band.len(), band),
        })
    }

    pub fn band(&self, b: usize) -> Vec<f64> {
        self.data.row(b).iter().copied().collect()
    }

    pub fn set_band(&mut self, b: usize, values: &[f64]) {
        for (dst, &v) in self.data.row_mut(b).iter_mut().zip(values) {
            *dst = v;
        }
    }
}

pub(crate) fn row_vec(m: &DMatrix<f64>, r: usize) -> Vec<f64> {
    m.row(r).iter().copied().collect()
}

pub(crate) fn set_row(m: &mut DMatrix<f64>, r: usize, values: &[f64]) {
    for (dst, &v) in m.row_mut(r).iter_mut().zip(values) {
        *dst = v;
    }
}
