//! Deblurring from a blurred/noisy image pair.
//!
//! ```text
//! y_b = B x + n_b,    y_n = x + n_n,    σ_b² ≪ σ_n²
//! ```
//!
//! The prior is a GMM trained on the patches of `y_n`, with posterior
//! weights frozen from that training. ADMM splits `v = x`; the x-step is a
//! single FFT-domain division and the v-step is the linear denoiser `W`
//! with `σ² = τ/ρ`.

use nalgebra::{DMatrix, DVector};

use crate::admm::{run_admm, Block, SolveReport, SolverConfig, SplitProblem};
use crate::denoiser::{eval_phi, ExplicitW, LinearDenoiser, MeanMode};
use crate::error::{dim_err, Error, Result};
use crate::fft::{apply_blur, solve_x_update_pair, CyclicBlur};
use crate::geometry::ImageGeometry;
use crate::gmm::{train_em, EmConfig, GmmModel, PatchWeights};
use crate::hs::dense_blur_matrix;
use crate::patch::{extract_patches, remove_means};

/// Cap on the pixel count for [`direct_solve_pair`].
pub const DIRECT_SOLVE_CAP: usize = 4096;

#[derive(Debug, Clone)]
pub struct PairScene {
    pub geometry: ImageGeometry,
    /// Ground truth, synthetic runs only.
    pub truth: Option<Vec<f64>>,
    pub y_b: Vec<f64>,
    pub y_n: Vec<f64>,
    pub blur: CyclicBlur,
    pub sigma_b: f64,
    pub sigma_n: f64,
}

impl PairScene {
    pub fn validate(&self) -> Result<()> {
        let n = self.geometry.pixels();
        if self.y_b.len() != n || self.y_n.len() != n {
            return dim_err("pair images differ from the scene grid");
        }
        if !self.blur.geometry().same_grid(&self.geometry) {
            return dim_err("blur grid differs from the scene grid");
        }
        if self.truth.as_ref().is_some_and(|t| t.len() != n) {
            return dim_err("ground truth length differs from the scene grid");
        }
        if self.sigma_b > self.sigma_n {
            log::warn!(
                "sigma_b = {} exceeds sigma_n = {}; the pair model expects a cleaner blurred image",
                self.sigma_b,
                self.sigma_n
            );
        }
        Ok(())
    }
}

/// `½‖Bx − y_b‖² + (λ/2)‖x − y_n‖² + weight·φ(x)`; `+∞` off `S(W)` when `weight > 0`.
pub fn objective_pair(x: &[f64], scene: &PairScene, lambda: f64, weight: f64, w: Option<&ExplicitW>) -> Result<f64> {
    if x.len() != scene.geometry.pixels() {
        return dim_err("x length differs from the scene grid");
    }
    let bx = apply_blur(x, &scene.blur, false)?;
    let data: f64 = bx.iter().zip(&scene.y_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let fuse: f64 = x.iter().zip(&scene.y_n).map(|(a, b)| (a - b) * (a - b)).sum();
    let mut obj = 0.5 * data + 0.5 * lambda * fuse;
    if let (Some(w), true) = (w, weight > 0.0) {
        obj += weight * eval_phi(x, w);
    }
    Ok(obj)
}

/// ADMM problem with the single split `v = x`.
pub struct PairProblem<'a> {
    scene: &'a PairScene,
    denoiser: Option<&'a LinearDenoiser>,
    lambda: f64,
    rho: f64,
    /// `Bᵀy_b + λ y_n`.
    data_rhs: Vec<f64>,
    explicit: Option<&'a ExplicitW>,
}

impl<'a> PairProblem<'a> {
    /// `denoiser = None` means no regularizer (`v = x − u`).
    pub fn new(scene: &'a PairScene, denoiser: Option<&'a LinearDenoiser>, lambda: f64, rho: f64) -> Result<Self> {
        scene.validate()?;
        if !(lambda >= 0.0) || !(rho > 0.0) {
            return Err(Error::Config("need lambda >= 0 and rho > 0".into()));
        }
        if let Some(d) = denoiser {
            if !d.geometry().same_grid(&scene.geometry) {
                return dim_err("denoiser grid differs from the scene grid");
            }
        }
        let mut data_rhs = apply_blur(&scene.y_b, &scene.blur, true)?;
        for (r, y) in data_rhs.iter_mut().zip(&scene.y_n) {
            *r += lambda * y;
        }
        Ok(PairProblem {
            scene,
            denoiser,
            lambda,
            rho,
            data_rhs,
            explicit: None,
        })
    }

    pub fn with_explicit_w(mut self, w: &'a ExplicitW) -> Self {
        self.explicit = Some(w);
        self
    }
}

impl SplitProblem for PairProblem<'_> {
    fn x_len(&self) -> usize {
        self.scene.geometry.pixels()
    }

    fn block_lens(&self) -> Vec<usize> {
        vec![self.x_len()]
    }

    fn x_update(&self, v: &[Block], u: &[Block]) -> Result<Vec<f64>> {
        let rhs: Vec<f64> = self
            .data_rhs
            .iter()
            .zip(v[0].iter().zip(&u[0]))
            .map(|(d, (v, u))| d + self.rho * (v + u))
            .collect();
        solve_x_update_pair(&rhs, &self.scene.blur, self.lambda, self.rho)
    }

    fn apply_h(&self, x: &[f64]) -> Result<Vec<Block>> {
        Ok(vec![x.to_vec()])
    }

    fn v_update(&self, _block: usize, arg: &[f64]) -> Result<Block> {
        match self.denoiser {
            Some(d) => d.apply(arg),
            None => Ok(arg.to_vec()),
        }
    }

    fn objective(&self, x: &[f64]) -> Option<f64> {
        let (weight, w) = match (self.denoiser, self.explicit) {
            (Some(_), Some(w)) => (self.rho, Some(w)),
            _ => (0.0, None),
        };
        let x = w.map_or_else(|| x.to_vec(), |w| w.project_onto_span(x));
        objective_pair(&x, self.scene, self.lambda, weight, w).ok()
    }
}

#[derive(Debug, Clone)]
pub struct PairParams {
    pub patch_side: usize,
    /// EM settings; `noise_variance` is overwritten with `σ_n²`.
    pub em: EmConfig,
    pub solver: SolverConfig,
    pub mode: MeanMode,
}

impl Default for PairParams {
    fn default() -> Self {
        PairParams {
            patch_side: 8,
            em: EmConfig::default(),
            solver: SolverConfig::default(),
            mode: MeanMode::Practical,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PairOutput {
    pub x_hat: Vec<f64>,
    pub model: GmmModel,
    pub weights: PatchWeights,
    pub report: SolveReport,
}

/// Trains the scene-adapted GMM on `y_n`.
pub fn train_pair_prior(scene: &PairScene, patch_side: usize, em: &EmConfig) -> Result<(GmmModel, PatchWeights)> {
    let patches = remove_means(&extract_patches(&scene.y_n, scene.geometry.with_bands(1), patch_side)?)?;
    let cfg = EmConfig {
        noise_variance: scene.sigma_n * scene.sigma_n,
        ..em.clone()
    };
    let fit = train_em(&patches, &cfg)?;
    Ok((fit.model, fit.weights))
}

/// Runs the pair ADMM with a given denoiser (or none).
pub fn solve_pair(
    scene: &PairScene,
    denoiser: Option<&LinearDenoiser>,
    solver: &SolverConfig,
) -> Result<(Vec<f64>, SolveReport)> {
    solver.validate()?;
    let problem = PairProblem::new(scene, denoiser, solver.lambda, solver.rho)?;
    let sol = run_admm(&problem, solver, None)?;
    Ok((sol.x, sol.report))
}

/// Full pipeline: GMM on `y_n`, frozen weights, ADMM.
pub fn deblur_pair(scene: &PairScene, params: &PairParams) -> Result<PairOutput> {
    scene.validate()?;
    params.solver.validate()?;
    let (model, weights) = train_pair_prior(scene, params.patch_side, &params.em)?;
    let SolverConfig { rho, tau, .. } = params.solver;
    let denoiser = if tau > 0.0 {
        Some(LinearDenoiser::new(
            model.clone(),
            weights.clone(),
            tau / rho,
            scene.geometry.with_bands(1),
            params.mode,
        )?)
    } else {
        None
    };
    let (x_hat, report) = solve_pair(scene, denoiser.as_ref(), &params.solver)?;
    Ok(PairOutput {
        x_hat,
        model,
        weights,
        report,
    })
}

/// Exact minimizer of `½‖Bx − y_b‖² + (λ/2)‖x − y_n‖² + weight·φ(x)` by a
/// dense solve in the coordinates of `S(W)`.
///
/// The pair ADMM with penalty `ρ` and denoiser `W` converges to this
/// minimizer with `weight = ρ`.
pub fn direct_solve_pair(scene: &PairScene, lambda: f64, w: Option<&ExplicitW>, weight: f64) -> Result<Vec<f64>> {
    scene.validate()?;
    let n = scene.geometry.pixels();
    if n > DIRECT_SOLVE_CAP {
        return Err(Error::Size(format!("{n} pixels exceed cap {DIRECT_SOLVE_CAP}")));
    }
    let b = dense_blur_matrix(&scene.blur)?;
    let (q, inv_minus_one): (DMatrix<f64>, Vec<f64>) = match w {
        Some(w) => (
            w.basis.clone(),
            w.retained_eigenvalues().iter().map(|l| 1.0 / l - 1.0).collect(),
        ),
        None => (DMatrix::identity(n, n), vec![0.0; n]),
    };
    let bq = &b * &q;
    let mut h = bq.transpose() * &bq;
    for k in 0..q.ncols() {
        h[(k, k)] += lambda + weight * inv_minus_one[k];
    }
    let rhs = b.transpose() * DVector::from_column_slice(&scene.y_b) + DVector::from_column_slice(&scene.y_n) * lambda;
    let g = q.transpose() * rhs;
    let z = match h.clone().cholesky() {
        Some(ch) => ch.solve(&g),
        None => h
            .lu()
            .solve(&g)
            .ok_or_else(|| Error::Config("quadratic objective is singular".into()))?,
    };
    Ok((q * z).as_slice().to_vec())
}
