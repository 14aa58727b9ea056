//! Cyclic convolution and the spectral solves of the quadratic subproblems.

use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{dim_err, Error, Result};
use crate::geometry::ImageGeometry;
use crate::par;

/// Circular blur on a fixed grid, diagonalized by the 2-D DFT.
///
/// The kernel centre (`(kh/2, kw/2)`) is mapped to the origin before the
/// transform, so blurring a delta at pixel `p` reproduces the kernel
/// centred on `p`.
#[derive(Clone)]
pub struct CyclicBlur {
    psf: DMatrix<f64>,
    geometry: ImageGeometry,
    transfer: Vec<Complex64>,
    col_fft: (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>),
    row_fft: (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>),
}

impl std::fmt::Debug for CyclicBlur {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CyclicBlur")
            .field("psf", &self.psf.shape())
            .field("geometry", &self.geometry)
            .finish()
    }
}

impl CyclicBlur {
    /// Builds the transfer function of `psf` (rows x cols, row = vertical)
    /// on the grid of `geometry`.
    pub fn new(psf: DMatrix<f64>, geometry: ImageGeometry) -> Result<Self> {
        if psf.nrows() == 0 || psf.ncols() == 0 {
            return dim_err("empty point spread function");
        }
        if psf.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("point spread function has non-finite entries".into()));
        }
        let geometry = geometry.with_bands(1);
        let (h, w) = (geometry.height, geometry.width);
        let mut planner = FftPlanner::new();
        let col_fft = (planner.plan_fft_forward(h), planner.plan_fft_inverse(h));
        let row_fft = (planner.plan_fft_forward(w), planner.plan_fft_inverse(w));
        let (ch, cw) = (psf.nrows() / 2, psf.ncols() / 2);
        let mut placed = vec![Complex64::new(0.0, 0.0); h * w];
        for b in 0..psf.ncols() {
            for a in 0..psf.nrows() {
                let r = (a as isize - ch as isize).rem_euclid(h as isize) as usize;
                let c = (b as isize - cw as isize).rem_euclid(w as isize) as usize;
                placed[geometry.index(r, c)].re += psf[(a, b)];
            }
        }
        let mut blur = CyclicBlur {
            psf,
            geometry,
            transfer: Vec::new(),
            col_fft,
            row_fft,
        };
        blur.fft2(&mut placed, false);
        blur.transfer = placed;
        Ok(blur)
    }

    /// The identity blur.
    pub fn delta(geometry: ImageGeometry) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, 1.0), geometry)
    }

    pub fn psf(&self) -> &DMatrix<f64> {
        &self.psf
    }

    pub fn geometry(&self) -> ImageGeometry {
        self.geometry
    }

    /// Frequency response, column-major like the pixel grid.
    pub fn transfer(&self) -> &[Complex64] {
        &self.transfer
    }

    /// `|b̂_k|²` for every frequency.
    pub fn power(&self) -> Vec<f64> {
        self.transfer.iter().map(|t| t.norm_sqr()).collect()
    }

    fn fft2(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.geometry.height, self.geometry.width);
        let (cf, rf) = if inverse {
            (&self.col_fft.1, &self.row_fft.1)
        } else {
            (&self.col_fft.0, &self.row_fft.0)
        };
        for col in buf.chunks_exact_mut(h) {
            cf.process(col);
        }
        let mut line = vec![Complex64::new(0.0, 0.0); w];
        for r in 0..h {
            for (c, v) in line.iter_mut().enumerate() {
                *v = buf[r + c * h];
            }
            rf.process(&mut line);
            for (c, v) in line.iter().enumerate() {
                buf[r + c * h] = *v;
            }
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.geometry.pixels() {
            return dim_err(format!(
                "band has {len} pixels, blur grid has {}",
                self.geometry.pixels()
            ));
        }
        Ok(())
    }

    /// Forward transform of a real band.
    pub fn spectrum(&self, band: &[f64]) -> Result<Vec<Complex64>> {
        self.check_len(band.len())?;
        let mut buf: Vec<Complex64> = band.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft2(&mut buf, false);
        Ok(buf)
    }

    /// Inverse transform, keeping the real part.
    pub fn real_inverse(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.fft2(&mut spec, true);
        let scale = 1.0 / spec.len() as f64;
        spec.iter().map(|c| c.re * scale).collect()
    }

    /// Multiplies the spectrum of `band` pointwise by `filter(k, b̂_k)`.
    pub fn filter_band(
        &self,
        band: &[f64],
        filter: impl Fn(usize, Complex64) -> Complex64,
    ) -> Result<Vec<f64>> {
        let mut spec = self.spectrum(band)?;
        for (k, (s, &t)) in spec.iter_mut().zip(&self.transfer).enumerate() {
            *s *= filter(k, t);
        }
        Ok(self.real_inverse(spec))
    }
}

/// Circular convolution with the blur, or correlation when `adjoint`.
pub fn apply_blur(band: &[f64], blur: &CyclicBlur, adjoint: bool) -> Result<Vec<f64>> {
    if adjoint {
        blur.filter_band(band, |_, t| t.conj())
    } else {
        blur.filter_band(band, |_, t| t)
    }
}

/// Row-wise blur of a `bands x pixels` matrix.
pub fn blur_rows(m: &DMatrix<f64>, blur: &CyclicBlur, adjoint: bool) -> Result<DMatrix<f64>> {
    blur.check_len(m.ncols())?;
    let rows = par::map_range(m.nrows(), |r| {
        let row: Vec<f64> = m.row(r).iter().copied().collect();
        apply_blur(&row, blur, adjoint)
    });
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (r, row) in rows.into_iter().enumerate() {
        crate::geometry::set_row(&mut out, r, &row?);
    }
    Ok(out)
}

/// `rhs (BBᵀ + 2I)⁻¹`, row by row in the frequency domain.
pub fn solve_x_update_hs(rhs: &DMatrix<f64>, blur: &CyclicBlur) -> Result<DMatrix<f64>> {
    solve_rows_shifted(rhs, blur, 2.0)
}

/// `(BᵀB + (λ + ρ)I)⁻¹ rhs` in the frequency domain.
pub fn solve_x_update_pair(rhs: &[f64], blur: &CyclicBlur, lambda: f64, rho: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) || !(rho > 0.0) {
        return Err(Error::Config(format!("need lambda >= 0 and rho > 0, got {lambda}, {rho}")));
    }
    let shift = lambda + rho;
    blur.filter_band(rhs, |_, t| Complex64::new(1.0 / (t.norm_sqr() + shift), 0.0))
}

/// Row-wise `(BᵀB + shift·I)⁻¹` on a `bands x pixels` matrix.
pub fn solve_rows_shifted(rhs: &DMatrix<f64>, blur: &CyclicBlur, shift: f64) -> Result<DMatrix<f64>> {
    if !(shift > 0.0) {
        return Err(Error::Config("spectral shift must be positive".into()));
    }
    blur.check_len(rhs.ncols())?;
    let rows = par::map_range(rhs.nrows(), |r| {
        let row: Vec<f64> = rhs.row(r).iter().copied().collect();
        blur.filter_band(&row, |_, t| Complex64::new(1.0 / (t.norm_sqr() + shift), 0.0))
    });
    let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
    for (r, row) in rows.into_iter().enumerate() {
        crate::geometry::set_row(&mut out, r, &row?);
    }
    Ok(out)
}
