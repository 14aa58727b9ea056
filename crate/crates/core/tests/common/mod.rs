#![allow(dead_code)]

use nalgebra::DMatrix;
use pnp_core::denoiser::{build_explicit_w, ExplicitW, LinearDenoiser, MeanMode};
use pnp_core::gmm::{train_em, EmConfig, GmmModel, PatchWeights};
use pnp_core::patch::{extract_patches, remove_means};
use pnp_core::synth::smooth_field;
use pnp_core::ImageGeometry;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| gauss(rng)).collect()
}

pub fn random_psd(n: usize, rank: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, rank, |_, _| gauss(rng));
    &a * a.transpose()
}

pub fn random_simplex(k: usize, n: usize, rng: &mut ChaCha8Rng) -> PatchWeights {
    let mut b = DMatrix::from_fn(k, n, |_, _| rng.gen_range(0.0..1.0));
    for mut col in b.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }
    PatchWeights { beta: b }
}

/// Random (untrained) model with `k` components of `side x side` patches.
pub fn random_model(k: usize, side: usize, rng: &mut ChaCha8Rng) -> GmmModel {
    let np = side * side;
    let mut alphas: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = alphas.iter().sum();
    alphas.iter_mut().for_each(|a| *a /= s);
    let covs = (0..k).map(|_| random_psd(np, np.min(3 + k), rng)).collect();
    GmmModel::new(alphas, covs, side).unwrap()
}

/// EM-trained pure-linear denoiser on a random smooth image.
pub fn trained_denoiser(h: usize, w: usize, side: usize, k: usize, seed: u64, sigma2: f64) -> LinearDenoiser {
    let mut r = rng(seed);
    let g = ImageGeometry::plane(h, w).unwrap();
    let img: Vec<f64> = smooth_field(g, &mut r).into_iter().map(|v| v + 0.03 * gauss(&mut r)).collect();
    let patches = remove_means(&extract_patches(&img, g, side).unwrap()).unwrap();
    let fit = train_em(
        &patches,
        &EmConfig {
            components: k,
            max_iters: 25,
            seed,
            noise_variance: 0.0009,
            ..EmConfig::default()
        },
    )
    .unwrap();
    LinearDenoiser::new(fit.model, fit.weights, sigma2, g, MeanMode::PureLinear).unwrap()
}

pub fn trained_w(h: usize, w: usize, side: usize, k: usize, seed: u64, sigma2: f64) -> (LinearDenoiser, ExplicitW) {
    let den = trained_denoiser(h, w, side, k, seed, sigma2);
    let ew = build_explicit_w(&den).unwrap();
    (den, ew)
}

/// Dense circulant of a PSF on an `h x w` grid with the centre at `(kh/2, kw/2)`,
/// built from offsets without any transform.
pub fn dense_circulant(psf: &DMatrix<f64>, h: usize, w: usize) -> DMatrix<f64> {
    let n = h * w;
    let (ch, cw) = (psf.nrows() / 2, psf.ncols() / 2);
    let mut b = DMatrix::zeros(n, n);
    for c in 0..w {
        for r in 0..h {
            for kb in 0..psf.ncols() {
                for ka in 0..psf.nrows() {
                    let sr = (r as isize - ka as isize + ch as isize).rem_euclid(h as isize) as usize;
                    let sc = (c as isize - kb as isize + cw as isize).rem_euclid(w as isize) as usize;
                    b[(r + c * h, sr + sc * h)] += psf[(ka, kb)];
                }
            }
        }
    }
    b
}

/// Cyclic Jacobi eigenvalue iteration, independent of nalgebra's solver.
pub fn jacobi_eig(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[(i, i)]).collect(), v)
}

pub fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
