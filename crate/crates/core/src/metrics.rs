//! Image quality metrics.
//!
//! ERGAS uses `100 · d · sqrt(mean_b MSE_b / μ_b²)` with `d` the resolution
//! ratio passed by the caller and `μ_b` the mean of reference band `b`.
//! SAM is the mean per-pixel spectral angle in degrees.

use nalgebra::DMatrix;

use crate::error::{dim_err, Error, Result};

/// PSNR between two equally sized images. Returns `+∞` for identical inputs.
pub fn psnr(reference: &[f64], estimate: &[f64], peak: f64) -> Result<f64> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return dim_err(format!("psnr on lengths {} and {}", reference.len(), estimate.len()));
    }
    if !(peak > 0.0) {
        return Err(Error::Metric(format!("peak must be positive, got {peak}")));
    }
    let mse = mse(reference, estimate);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Default PSNR peak: 255 for data on an 8-bit scale, the reference maximum otherwise.
pub fn default_peak(reference: &[f64]) -> f64 {
    let max = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > 1.0 + 1e-9 && max <= 255.0 {
        255.0
    } else if max > 0.0 {
        max
    } else {
        1.0
    }
}

fn check_cubes(reference: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<()> {
    if reference.shape() != estimate.shape() || reference.is_empty() {
        return dim_err(format!(
            "cube shapes {:?} and {:?} differ",
            reference.shape(),
            estimate.shape()
        ));
    }
    Ok(())
}

/// Per-band PSNR for `bands x pixels` cubes.
pub fn psnr_bands(reference: &DMatrix<f64>, estimate: &DMatrix<f64>, peak: f64) -> Result<Vec<f64>> {
    check_cubes(reference, estimate)?;
    (0..reference.nrows())
        .map(|b| {
            let r: Vec<f64> = reference.row(b).iter().copied().collect();
            let e: Vec<f64> = estimate.row(b).iter().copied().collect();
            psnr(&r, &e, peak)
        })
        .collect()
}

pub fn ergas(reference: &DMatrix<f64>, estimate: &DMatrix<f64>, resolution_ratio: f64) -> Result<f64> {
    check_cubes(reference, estimate)?;
    let n = reference.ncols() as f64;
    let mut acc = 0.0;
    for b in 0..reference.nrows() {
        let mean = reference.row(b).sum() / n;
        if mean == 0.0 {
            return Err(Error::Metric(format!("band {b} has zero mean")));
        }
        let mse = (reference.row(b) - estimate.row(b)).norm_squared() / n;
        acc += mse / (mean * mean);
    }
    Ok(100.0 * resolution_ratio * (acc / reference.nrows() as f64).sqrt())
}

/// Mean spectral angle in degrees, plus the number of pixels skipped
/// because either spectrum is zero.
pub fn sam(reference: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<(f64, usize)> {
    check_cubes(reference, estimate)?;
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for p in 0..reference.ncols() {
        let z = reference.column(p);
        let e = estimate.column(p);
        let (nz, ne) = (z.norm(), e.norm());
        if nz == 0.0 || ne == 0.0 {
            skipped += 1;
            continue;
        }
        // acos loses half the digits near zero angle
        let (a, b) = (z / nz, e / ne);
        total += 2.0 * (&a - &b).norm().atan2((&a + &b).norm());
        used += 1;
    }
    if skipped > 0 {
        log::warn!("sam: {skipped} zero spectra excluded");
    }
    if used == 0 {
        return Err(Error::Metric("all spectra are zero".into()));
    }
    Ok((total / used as f64 * 180.0 / std::f64::consts::PI, skipped))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr_db: Vec<f64>,
    pub mean_psnr_db: f64,
    pub ergas: f64,
    pub sam_degrees: f64,
    pub sam_skipped: usize,
}

impl MetricReport {
    pub fn compute(
        reference: &DMatrix<f64>,
        estimate: &DMatrix<f64>,
        peak: f64,
        resolution_ratio: f64,
    ) -> Result<Self> {
        let psnr_db = psnr_bands(reference, estimate, peak)?;
        let mean_psnr_db = psnr_db.iter().sum::<f64>() / psnr_db.len() as f64;
        let (sam_degrees, sam_skipped) = sam(reference, estimate)?;
        Ok(MetricReport {
            mean_psnr_db,
            ergas: ergas(reference, estimate, resolution_ratio)?,
            sam_degrees,
            sam_skipped,
            psnr_db,
        })
    }

    /// `band,psnr_db` rows followed by `ergas,<v>` and `sam_deg,<v>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("band,psnr_db\n");
        for (b, p) in self.psnr_db.iter().enumerate() {
            s.push_str(&format!("{b},{}\n", fmt_db(*p)));
        }
        s.push_str(&format!("ergas,{}\n", self.ergas));
        s.push_str(&format!("sam_deg,{}\n", self.sam_degrees));
        s
    }
}

/// Infinite PSNR is written as `inf`.
pub fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}
