//! Property suite for the fixed-weight denoiser: symmetry and spectrum of
//! `W`, agreement with the constructive proximity operator, nonexpansiveness,
//! convexity of the implied regularizer, and the scalar expansiveness example.

use pnp_core::denoiser::{
    build_explicit_w, denoise_image_fixed, eval_phi, expansiveness_demo, prox_oracle, ExplicitW, LinearDenoiser,
    MeanMode,
};
use pnp_core::gmm::{train_em, EmConfig};
use pnp_core::linalg::{dist2, norm2};
use pnp_core::patch::{extract_patches, remove_means};
use pnp_core::synth::smooth_field;
use pnp_core::{Error, ImageGeometry, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

pub struct Settings {
    pub pixels: usize,
    pub patch: usize,
    pub components: usize,
    pub noise_variance: f64,
    pub models: usize,
    pub seed: u64,
}

fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn train(g: ImageGeometry, s: &Settings, seed: u64) -> Result<LinearDenoiser> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img: Vec<f64> = smooth_field(g, &mut rng)
        .into_iter()
        .map(|v| v + 0.03 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let patches = remove_means(&extract_patches(&img, g, s.patch)?)?;
    let fit = train_em(
        &patches,
        &EmConfig {
            components: s.components,
            max_iters: 25,
            seed,
            noise_variance: 0.03 * 0.03,
            ..EmConfig::default()
        },
    )?;
    LinearDenoiser::new(fit.model, fit.weights, s.noise_variance, g, MeanMode::PureLinear)
}

pub fn run(s: &Settings) -> Result<Vec<Check>> {
    let side = (s.pixels as f64).sqrt().round() as usize;
    if side * side != s.pixels || side < s.patch {
        return Err(Error::Config(format!(
            "--n must be a square pixel count of at least patch² (got {})",
            s.pixels
        )));
    }
    if !(s.noise_variance > 0.0) {
        return Err(Error::Config("noise variance must be positive".into()));
    }
    let g = ImageGeometry::plane(side, side)?;
    let mut models: Vec<(LinearDenoiser, ExplicitW)> = Vec::new();
    for m in 0..s.models.max(1) {
        let den = train(g, s, s.seed.wrapping_add(m as u64))?;
        let w = build_explicit_w(&den)?;
        models.push((den, w));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x5eed);
    let n = s.pixels;
    let mut checks = Vec::new();

    let sym = models.iter().map(|(_, w)| w.symmetry_defect()).fold(0.0, f64::max);
    checks.push(Check {
        name: "W symmetric",
        pass: sym <= 1e-10,
        detail: format!("max defect {sym:.2e} (<= 1e-10)"),
    });

    let lo = models.iter().map(|(_, w)| w.eigenvalues.min()).fold(f64::INFINITY, f64::min);
    let hi = models.iter().map(|(_, w)| w.eigenvalues.max()).fold(f64::NEG_INFINITY, f64::max);
    checks.push(Check {
        name: "W spectrum in [0, 1)",
        pass: lo >= -1e-9 && hi <= 1.0 - 1e-9,
        detail: format!("eigenvalues in [{lo:.3e}, {hi:.6}]"),
    });

    let mut worst_prox: f64 = 0.0;
    for (den, w) in &models {
        for _ in 0..100 {
            let y = normal_vec(n, &mut rng);
            let a = denoise_image_fixed(&y, den)?;
            let b = prox_oracle(&y, w);
            worst_prox = worst_prox.max(dist2(&a, &b) / norm2(&y));
        }
    }
    checks.push(Check {
        name: "denoiser = prox of phi",
        pass: worst_prox <= 1e-8,
        detail: format!("max relative gap {worst_prox:.2e} (<= 1e-8)"),
    });

    let mut worst_ratio: f64 = 0.0;
    for (den, _) in &models {
        for _ in 0..200 {
            let scale = rng.gen_range(0.01..10.0);
            let x: Vec<f64> = normal_vec(n, &mut rng).iter().map(|v| v * scale).collect();
            let y: Vec<f64> = normal_vec(n, &mut rng).iter().map(|v| v * scale).collect();
            let ratio = dist2(&den.apply(&x)?, &den.apply(&y)?) / dist2(&x, &y);
            worst_ratio = worst_ratio.max(ratio);
        }
    }
    checks.push(Check {
        name: "nonexpansive",
        pass: worst_ratio <= 1.0,
        detail: format!("max ratio {worst_ratio:.6} (<= 1)"),
    });

    let mut worst_convex = f64::NEG_INFINITY;
    for (_, w) in &models {
        for _ in 0..200 {
            let x = w.project_onto_span(&normal_vec(n, &mut rng));
            let y = w.project_onto_span(&normal_vec(n, &mut rng));
            let t: f64 = rng.gen();
            let m: Vec<f64> = x.iter().zip(&y).map(|(a, b)| t * a + (1.0 - t) * b).collect();
            let (fx, fy, fm) = (eval_phi(&x, w), eval_phi(&y, w), eval_phi(&m, w));
            let chord = t * fx + (1.0 - t) * fy;
            worst_convex = worst_convex.max((fm - chord) / chord.abs().max(1.0));
        }
    }
    checks.push(Check {
        name: "phi convex on S(W)",
        pass: worst_convex <= 1e-9,
        detail: format!("max chord violation {worst_convex:.2e} (<= 1e-9)"),
    });

    let t = expansiveness_demo(0.01, 1.0, 0.1, [0.5, 0.5], -3.0, 3.0, 1e-4)?;
    checks.push(Check {
        name: "MMSE expansive, fixed not",
        pass: t.max_slope_mmse > 1.001 && t.max_slope_fixed < 1.0,
        detail: format!(
            "max slope MMSE {:.4}, fixed {:.4}",
            t.max_slope_mmse, t.max_slope_fixed
        ),
    });
    Ok(checks)
}

pub fn print_table(checks: &[Check]) {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in checks {
        println!(
            "{:<width$}  {}  {}",
            c.name,
            if c.pass { "PASS" } else { "FAIL" },
            c.detail
        );
    }
}
