//! Synthetic scenes with known ground truth.
//!
//! Spatial content is a mix of smooth periodic fields and piecewise-constant
//! shapes, so the patch prior has both texture and edges to learn. Noise
//! levels are set from the empirical power of the clean observations.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fft::{apply_blur, CyclicBlur};
use crate::geometry::ImageGeometry;
use crate::hs::{forward_hs, forward_ms, regular_mask, HsScene};
use crate::pair::PairScene;

/// Kernels shipped for the pair experiments. These are stand-ins, not the
/// kernels of any published benchmark.
pub const KERNEL_IDS: [&str; 4] = ["delta", "gaussian", "box", "motion"];

/// One smooth, edge-bearing field on the grid with values in `[0, 1]`.
pub fn smooth_field(geometry: ImageGeometry, rng: &mut impl Rng) -> Vec<f64> {
    let (h, w) = (geometry.height, geometry.width);
    let mut f = vec![0.0; geometry.pixels()];
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0..3) as f64,
                rng.gen_range(0..3) as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.3..1.0),
            )
        })
        .collect();
    let shapes: Vec<(f64, f64, f64, f64, bool)> = (0..5)
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.1..0.3) * h.min(w) as f64,
                rng.gen_range(-1.0..1.0),
                rng.gen_bool(0.5),
            )
        })
        .collect();
    for p in 0..geometry.pixels() {
        let (r, c) = geometry.coords(p);
        let (y, x) = (r as f64 / h as f64, c as f64 / w as f64);
        let mut v = 0.0;
        for &(ky, kx, ph, a) in &waves {
            v += a * (std::f64::consts::TAU * (ky * y + kx * x) + ph).cos();
        }
        for &(cy, cx, rad, a, disk) in &shapes {
            let (dy, dx) = ((r as f64 - cy).abs(), (c as f64 - cx).abs());
            let inside = if disk {
                dy * dy + dx * dx < rad * rad
            } else {
                dy < rad && dx < 0.6 * rad
            };
            if inside {
                v += 1.5 * a;
            }
        }
        f[p] = v;
    }
    normalize_unit(&mut f);
    f
}

fn normalize_unit(f: &mut [f64]) {
    let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in f.iter_mut() {
        *v = (*v - lo) / span;
    }
}

/// Normalized isotropic Gaussian on a `size x size` support.
pub fn gaussian_psf(size: usize, sigma: f64) -> DMatrix<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k = DMatrix::from_fn(size, size, |a, b| {
        let (dy, dx) = (a as f64 - c, b as f64 - c);
        (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
    });
    let s = k.sum();
    k /= s;
    k
}

/// Anti-aliased line of `length` pixels at `angle_deg`, normalized.
pub fn motion_psf(length: usize, angle_deg: f64) -> DMatrix<f64> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let half = (length as f64 - 1.0) / 2.0;
    let size = length + 2;
    let mid = (size as f64 - 1.0) / 2.0;
    let mut k = DMatrix::zeros(size, size);
    let steps = 16 * length;
    for t in 0..=steps {
        let d = -half + 2.0 * half * t as f64 / steps as f64;
        let (y, x) = (mid - d * s, mid + d * c);
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                k[(y0 as usize + dy, x0 as usize + dx)] += wy * wx;
            }
        }
    }
    let total = k.sum();
    k /= total;
    k
}

pub fn kernel(id: &str) -> Result<DMatrix<f64>> {
    match id {
        "delta" => Ok(DMatrix::from_element(1, 1, 1.0)),
        "gaussian" => Ok(gaussian_psf(8, 1.6)),
        "box" => Ok(DMatrix::from_element(9, 9, 1.0 / 81.0)),
        "motion" => Ok(motion_psf(15, 30.0)),
        other => Err(Error::UnknownKernel(format!(
            "{other} (known: {})",
            KERNEL_IDS.join(", ")
        ))),
    }
}

/// Noise std giving `snr_db` relative to the mean squared value of `clean`.
pub fn sigma_for_snr(clean: &[f64], snr_db: f64) -> f64 {
    let power = clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64;
    (power / 10f64.powf(snr_db / 10.0)).sqrt()
}

fn add_gaussian(values: &mut [f64], sigma: f64, rng: &mut impl Rng) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in values {
            *v += normal.sample(rng);
        }
    }
}

#[derive(Debug, Clone)]
pub struct HsSceneSpec {
    pub height: usize,
    pub width: usize,
    pub hs_bands: usize,
    pub ms_bands: usize,
    /// Rank of the true spectral subspace.
    pub true_rank: usize,
    pub decimation: usize,
    pub snr_h_db: f64,
    pub snr_m_db: f64,
    /// Optional `(count, snr_db)` for the last HS bands.
    pub low_snr_tail: Option<(usize, f64)>,
    pub psf_size: usize,
    pub psf_sigma: f64,
    pub seed: u64,
}

impl Default for HsSceneSpec {
    fn default() -> Self {
        HsSceneSpec {
            height: 32,
            width: 32,
            hs_bands: 30,
            ms_bands: 4,
            true_rank: 4,
            decimation: 4,
            snr_h_db: 50.0,
            snr_m_db: 50.0,
            low_snr_tail: None,
            psf_size: 5,
            psf_sigma: 1.0,
            seed: 0,
        }
    }
}

impl HsSceneSpec {
    fn validate(&self) -> Result<()> {
        if self.true_rank == 0 || self.true_rank > self.hs_bands {
            return Err(Error::Config("true_rank must be in 1..=hs_bands".into()));
        }
        if self.ms_bands == 0 || self.decimation == 0 || self.psf_size == 0 {
            return Err(Error::Config("ms_bands, decimation and psf_size must be positive".into()));
        }
        if self.low_snr_tail.is_some_and(|(n, _)| n > self.hs_bands) {
            return Err(Error::Config("low-SNR tail longer than the band count".into()));
        }
        Ok(())
    }
}

/// Spectral response with Gaussian bands spread over the HS range, rows summing to 1.
pub fn spectral_response(ms_bands: usize, hs_bands: usize) -> DMatrix<f64> {
    let width = hs_bands as f64 / ms_bands as f64;
    let mut r = DMatrix::from_fn(ms_bands, hs_bands, |m, l| {
        let centre = (m as f64 + 0.5) * width;
        let d = (l as f64 + 0.5 - centre) / (0.6 * width);
        (-0.5 * d * d).exp()
    });
    for mut row in r.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    r
}

pub fn generate_hs_scene(spec: &HsSceneSpec) -> Result<HsScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let g = ImageGeometry::new(spec.height, spec.width, spec.hs_bands)?;
    let plane = g.with_bands(1);
    let n = g.pixels();
    let lh = spec.hs_bands;

    // nonnegative smooth endmember-like spectra
    let e_true = DMatrix::from_fn(lh, spec.true_rank, |_, _| 0.0);
    let mut e_true = e_true;
    for j in 0..spec.true_rank {
        let bumps: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.0..lh as f64),
                    rng.gen_range(0.05..0.3) * lh as f64,
                    rng.gen_range(0.2..1.0),
                )
            })
            .collect();
        for l in 0..lh {
            let mut v = 0.1;
            for &(c, wdt, a) in &bumps {
                let d = (l as f64 - c) / wdt;
                v += a * (-0.5 * d * d).exp();
            }
            e_true[(l, j)] = v;
        }
    }
    let mut x_true = DMatrix::zeros(spec.true_rank, n);
    for j in 0..spec.true_rank {
        let f = smooth_field(plane, &mut rng);
        for (p, v) in f.into_iter().enumerate() {
            x_true[(j, p)] = 0.1 + v;
        }
    }
    let z = &e_true * x_true;

    let psf = gaussian_psf(spec.psf_size, spec.psf_sigma);
    let blur = CyclicBlur::new(psf, g)?;
    let mask = regular_mask(g, spec.decimation);
    let response = spectral_response(spec.ms_bands, lh);
    let nh = mask.iter().filter(|&&m| m).count();
    let mut scene = HsScene {
        geometry: g,
        truth: Some(z.clone()),
        yh: DMatrix::zeros(lh, nh),
        ym: DMatrix::zeros(spec.ms_bands, n),
        blur,
        mask,
        decimation: spec.decimation,
        response,
        sigma_h: 0.0,
        sigma_m: 0.0,
    };
    let mut yh = forward_hs(&z, &scene, None)?;
    let mut ym = forward_ms(&z, &scene, None)?;

    let tail = spec.low_snr_tail.map_or(0, |(k, _)| k);
    let head = lh - tail;
    let head_vals: Vec<f64> = yh.rows(0, head).iter().copied().collect();
    scene.sigma_h = if head > 0 { sigma_for_snr(&head_vals, spec.snr_h_db) } else { 0.0 };
    scene.sigma_m = sigma_for_snr(ym.as_slice(), spec.snr_m_db);
    let tail_sigma = match spec.low_snr_tail {
        Some((k, snr)) if k > 0 => {
            let vals: Vec<f64> = yh.rows(head, k).iter().copied().collect();
            sigma_for_snr(&vals, snr)
        }
        _ => 0.0,
    };
    // noise is drawn band by band so the tail can use its own level
    for l in 0..lh {
        let sigma = if l < head { scene.sigma_h } else { tail_sigma };
        let mut row: Vec<f64> = yh.row(l).iter().copied().collect();
        add_gaussian(&mut row, sigma, &mut rng);
        for (c, v) in row.into_iter().enumerate() {
            yh[(l, c)] = v;
        }
    }
    add_gaussian(ym.as_mut_slice(), scene.sigma_m, &mut rng);
    scene.yh = yh;
    scene.ym = ym;
    Ok(scene)
}

#[derive(Debug, Clone)]
pub struct PairSceneSpec {
    pub height: usize,
    pub width: usize,
    pub kernel: String,
    /// Noise std in image units (the image lies in `[0, 1]`).
    pub sigma_n: f64,
    pub sigma_b: f64,
    pub seed: u64,
}

/// Grayscale test image in `[0, 1]`.
pub fn test_image(geometry: ImageGeometry, rng: &mut impl Rng) -> Vec<f64> {
    let a = smooth_field(geometry, rng);
    let b = smooth_field(geometry, rng);
    let mut img: Vec<f64> = a.iter().zip(&b).map(|(a, b)| 0.7 * a + 0.3 * b).collect();
    normalize_unit(&mut img);
    for v in &mut img {
        *v = 0.05 + 0.9 * *v;
    }
    img
}

pub fn generate_pair_scene(spec: &PairSceneSpec) -> Result<PairScene> {
    let psf = kernel(&spec.kernel)?;
    if !(spec.sigma_n >= 0.0 && spec.sigma_b >= 0.0) {
        return Err(Error::Config("noise levels must be nonnegative".into()));
    }
    let g = ImageGeometry::plane(spec.height, spec.width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = test_image(g, &mut rng);
    let blur = CyclicBlur::new(psf, g)?;
    let mut y_b = apply_blur(&x, &blur, false)?;
    add_gaussian(&mut y_b, spec.sigma_b, &mut rng);
    let mut y_n = x.clone();
    add_gaussian(&mut y_n, spec.sigma_n, &mut rng);
    Ok(PairScene {
        geometry: g,
        truth: Some(x),
        y_b,
        y_n,
        blur,
        sigma_b: spec.sigma_b,
        sigma_n: spec.sigma_n,
    })
}
