//! Scene-adapted GMM patch denoiser.
//!
//! With the posterior weights frozen after training, the denoiser is the
//! linear operator `W = (1/n_p) Σ_i P_iᵀ F_i P_i` with
//! `F_i = Σ_j β_j^i C_j (C_j + σ²I)⁻¹`. `W` is symmetric PSD with spectrum
//! in `[0, 1)`, hence the proximity operator of
//! `φ(x) = ι_{S(W)}(x) + ½ xᵀ Q̄ (Λ̄⁻¹ − I) Q̄ᵀ x`.
//!
//! Two application modes exist. [`MeanMode::PureLinear`] is exactly `W`.
//! [`MeanMode::Practical`] removes each patch mean before filtering and adds
//! it back afterwards, which is what the restoration pipelines use.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};
use crate::geometry::ImageGeometry;
use crate::gmm::{e_step_rows, GmmModel, PatchWeights};
use crate::linalg::{spectral_map, sym_eig_desc};
use crate::par;
use crate::patch::{assemble_rows, patch_pixel};

/// Default cap on the pixel count of an explicitly materialized `W`.
pub const EXPLICIT_W_CAP: usize = 4096;

/// Relative eigenvalue threshold defining the rank of `W`.
pub const RANK_TOL: f64 = 1e-10;

/// Relative distance to `S(W)` beyond which `φ` is `+∞`.
pub const SUBSPACE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanMode {
    /// No mean handling; the denoiser is exactly `W`.
    PureLinear,
    /// Patch means are removed before filtering and restored afterwards.
    #[default]
    Practical,
}

/// Per-component Wiener filter `C (C + σ²I)⁻¹`.
///
/// Evaluated through the eigendecomposition of `C`, so the result is
/// symmetric with eigenvalues `ς/(ς + σ²)`.
pub fn wiener_filter(covariance: &DMatrix<f64>, noise_variance: f64) -> Result<DMatrix<f64>> {
    if !(noise_variance > 0.0) {
        return Err(Error::Config("Wiener filter needs a positive noise variance".into()));
    }
    Ok(spectral_map(covariance, |s| {
        let s = s.max(0.0);
        s / (s + noise_variance)
    }))
}

/// `F y` with `F = Σ_j β_j C_j (C_j + σ²I)⁻¹`.
pub fn denoise_patch_fixed(
    patch: &[f64],
    model: &GmmModel,
    beta: &[f64],
    noise_variance: f64,
) -> Result<Vec<f64>> {
    if patch.len() != model.patch_len() || beta.len() != model.components() {
        return dim_err("patch or weight length does not match the model");
    }
    let filters = model
        .covariances
        .iter()
        .map(|c| wiener_filter(c, noise_variance))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0; patch.len()];
    apply_mixture(&filters, beta, patch, &mut out);
    Ok(out)
}

fn apply_mixture(filters: &[DMatrix<f64>], beta: &[f64], y: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let np = y.len();
    for (f, &b) in filters.iter().zip(beta) {
        if b == 0.0 {
            continue;
        }
        // column-major storage: f[(r, c)] at c * np + r
        let data = f.as_slice();
        for (c, &yc) in y.iter().enumerate() {
            let w = b * yc;
            if w == 0.0 {
                continue;
            }
            let col = &data[c * np..(c + 1) * np];
            for (o, &fr) in out.iter_mut().zip(col) {
                *o += w * fr;
            }
        }
    }
}

/// GMM denoiser with frozen posterior weights.
#[derive(Debug, Clone)]
pub struct LinearDenoiser {
    model: GmmModel,
    weights: PatchWeights,
    noise_variance: f64,
    geometry: ImageGeometry,
    mode: MeanMode,
    filters: Vec<DMatrix<f64>>,
}

impl LinearDenoiser {
    pub fn new(
        model: GmmModel,
        weights: PatchWeights,
        noise_variance: f64,
        geometry: ImageGeometry,
        mode: MeanMode,
    ) -> Result<Self> {
        let geometry = geometry.with_bands(1);
        if weights.components() != model.components() {
            return dim_err(format!(
                "{} weight rows for {} components",
                weights.components(),
                model.components()
            ));
        }
        if weights.patches() != geometry.pixels() {
            return dim_err(format!(
                "{} weight columns for {} patches",
                weights.patches(),
                geometry.pixels()
            ));
        }
        if model.patch_side > geometry.height.min(geometry.width) {
            return dim_err("patch side exceeds image dimensions");
        }
        let filters = model
            .covariances
            .iter()
            .map(|c| wiener_filter(c, noise_variance))
            .collect::<Result<Vec<_>>>()?;
        Ok(LinearDenoiser {
            model,
            weights,
            noise_variance,
            geometry,
            mode,
            filters,
        })
    }

    pub fn model(&self) -> &GmmModel {
        &self.model
    }

    pub fn weights(&self) -> &PatchWeights {
        &self.weights
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn geometry(&self) -> ImageGeometry {
        self.geometry
    }

    pub fn mode(&self) -> MeanMode {
        self.mode
    }

    /// Same model and weights at another noise level.
    pub fn with_noise_variance(&self, noise_variance: f64) -> Result<Self> {
        Self::new(
            self.model.clone(),
            self.weights.clone(),
            noise_variance,
            self.geometry,
            self.mode,
        )
    }

    pub fn with_mode(&self, mode: MeanMode) -> Self {
        LinearDenoiser {
            mode,
            ..self.clone()
        }
    }

    /// Per-patch filter `F_i`.
    pub fn patch_filter(&self, i: usize) -> DMatrix<f64> {
        let np = self.model.patch_len();
        let mut f = DMatrix::zeros(np, np);
        for (j, g) in self.filters.iter().enumerate() {
            let b = self.weights.beta[(j, i)];
            if b != 0.0 {
                f += g * b;
            }
        }
        f
    }

    /// Applies the denoiser to one band.
    pub fn apply(&self, band: &[f64]) -> Result<Vec<f64>> {
        denoise_with(band, &self.geometry, &self.filters, &self.weights, self.mode, self.model.patch_side)
    }
}

fn denoise_with(
    band: &[f64],
    geometry: &ImageGeometry,
    filters: &[DMatrix<f64>],
    weights: &PatchWeights,
    mode: MeanMode,
    side: usize,
) -> Result<Vec<f64>> {
    if band.len() != geometry.pixels() {
        return dim_err(format!(
            "band has {} pixels, denoiser geometry has {}",
            band.len(),
            geometry.pixels()
        ));
    }
    let np = side * side;
    let k = weights.components();
    let mut rows = vec![0.0; geometry.pixels() * np];
    par::fill_rows(&mut rows, np, |i, out| {
        let mut y: Vec<f64> = (0..np).map(|t| band[patch_pixel(geometry, side, i, t)]).collect();
        let mean = match mode {
            MeanMode::PureLinear => 0.0,
            MeanMode::Practical => {
                let m = y.iter().sum::<f64>() / np as f64;
                y.iter_mut().for_each(|v| *v -= m);
                m
            }
        };
        let beta: Vec<f64> = (0..k).map(|j| weights.beta[(j, i)]).collect();
        apply_mixture(filters, &beta, &y, out);
        if mean != 0.0 {
            out.iter_mut().for_each(|v| *v += mean);
        }
    });
    Ok(assemble_rows(&rows, geometry, side))
}

/// Fixed-weight denoising of one band (the operator `W`, plus mean handling
/// in practical mode).
pub fn denoise_image_fixed(band: &[f64], denoiser: &LinearDenoiser) -> Result<Vec<f64>> {
    denoiser.apply(band)
}

/// Exact patch MMSE denoiser: the weights are recomputed from the noisy
/// input itself, so the map is nonlinear.
pub fn denoise_image_mmse(
    band: &[f64],
    geometry: ImageGeometry,
    model: &GmmModel,
    noise_variance: f64,
    mode: MeanMode,
) -> Result<Vec<f64>> {
    let geometry = geometry.with_bands(1);
    let set = crate::patch::extract_patches(band, geometry, model.patch_side)?;
    let set = match mode {
        MeanMode::PureLinear => set,
        MeanMode::Practical => crate::patch::remove_means(&set)?,
    };
    let weights = e_step_rows(&set.patches, set.patch_len(), model, noise_variance)?.weights;
    let den = LinearDenoiser::new(model.clone(), weights, noise_variance, geometry, mode)?;
    den.apply(band)
}

/// One sample of the scalar expansiveness example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansivenessRow {
    pub y: f64,
    pub mmse: f64,
    pub fixed: f64,
}

#[derive(Debug, Clone)]
pub struct ExpansivenessTable {
    pub rows: Vec<ExpansivenessRow>,
    /// Largest forward-difference slope of the MMSE curve.
    pub max_slope_mmse: f64,
    /// Largest forward-difference slope of the fixed-weight curve.
    pub max_slope_fixed: f64,
}

/// Scalar two-component zero-mean GMM denoiser versus its fixed-weight
/// counterpart (weights frozen at the prior `alphas`), sampled on
/// `lo..=hi` with spacing `step`.
pub fn expansiveness_demo(
    small_variance: f64,
    large_variance: f64,
    noise_variance: f64,
    alphas: [f64; 2],
    lo: f64,
    hi: f64,
    step: f64,
) -> Result<ExpansivenessTable> {
    if !(small_variance > 0.0 && small_variance < large_variance) {
        return Err(Error::Config("need 0 < small_variance < large_variance".into()));
    }
    if !(step > 0.0) || !(hi > lo) || noise_variance < 0.0 {
        return Err(Error::Config("invalid grid or noise variance".into()));
    }
    let vars = [small_variance, large_variance];
    let shrink = |v: f64| {
        if noise_variance == 0.0 {
            1.0
        } else {
            v / (v + noise_variance)
        }
    };
    let gains = [shrink(vars[0]), shrink(vars[1])];
    let mmse = |y: f64| {
        let logp: Vec<f64> = (0..2)
            .map(|j| {
                let s = vars[j] + noise_variance;
                alphas[j].ln() - 0.5 * (s.ln() + y * y / s)
            })
            .collect();
        let m = logp[0].max(logp[1]);
        let p0 = (logp[0] - m).exp();
        let p1 = (logp[1] - m).exp();
        (p0 * gains[0] + p1 * gains[1]) / (p0 + p1) * y
    };
    let fixed_gain = alphas[0] * gains[0] + alphas[1] * gains[1];
    let count = ((hi - lo) / step).round() as usize + 1;
    let rows: Vec<ExpansivenessRow> = (0..count)
        .map(|i| {
            let y = lo + i as f64 * step;
            ExpansivenessRow {
                y,
                mmse: mmse(y),
                fixed: fixed_gain * y,
            }
        })
        .collect();
    let slope = |f: fn(&ExpansivenessRow) -> f64| {
        rows.windows(2)
            .map(|w| (f(&w[1]) - f(&w[0])) / (w[1].y - w[0].y))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    Ok(ExpansivenessTable {
        max_slope_mmse: slope(|r| r.mmse),
        max_slope_fixed: slope(|r| r.fixed),
        rows,
    })
}

/// Dense `W` with its eigendecomposition. Test scale only.
#[derive(Debug, Clone)]
pub struct ExplicitW {
    pub matrix: DMatrix<f64>,
    /// All eigenvalues, descending.
    pub eigenvalues: DVector<f64>,
    /// Orthonormal basis of `S(W)`: eigenvectors of the retained eigenvalues.
    pub basis: DMatrix<f64>,
    /// Number of retained (nonzero) eigenvalues.
    pub rank: usize,
}

impl ExplicitW {
    /// `‖W − Wᵀ‖_F / ‖W‖_F`.
    pub fn symmetry_defect(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).norm() / self.matrix.norm().max(f64::MIN_POSITIVE)
    }

    pub fn retained_eigenvalues(&self) -> &[f64] {
        &self.eigenvalues.as_slice()[..self.rank]
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(y)).as_slice().to_vec()
    }

    /// Coordinates of `x` in the basis of `S(W)` and the residual norm.
    pub fn project(&self, x: &[f64]) -> (DVector<f64>, f64) {
        let xv = DVector::from_column_slice(x);
        let z = self.basis.transpose() * &xv;
        let resid = (&xv - &self.basis * &z).norm();
        (z, resid)
    }

    /// Orthogonal projection of `x` onto `S(W)`.
    pub fn project_onto_span(&self, x: &[f64]) -> Vec<f64> {
        let (z, _) = self.project(x);
        (&self.basis * z).as_slice().to_vec()
    }
}

/// Materializes `W = (1/n_p) Σ_i P_iᵀ F_i P_i` (pure-linear definition,
/// whatever the denoiser's mode) and its spectrum.
pub fn build_explicit_w(denoiser: &LinearDenoiser) -> Result<ExplicitW> {
    build_explicit_w_capped(denoiser, EXPLICIT_W_CAP)
}

pub fn build_explicit_w_capped(denoiser: &LinearDenoiser, cap: usize) -> Result<ExplicitW> {
    let g = denoiser.geometry;
    let n = g.pixels();
    if n > cap {
        return Err(Error::Size(format!("explicit W for {n} pixels exceeds cap {cap}")));
    }
    let side = denoiser.model.patch_side;
    let np = side * side;
    let scale = 1.0 / np as f64;
    let mut w = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let f = denoiser.patch_filter(i);
        let idx: Vec<usize> = (0..np).map(|t| patch_pixel(&g, side, i, t)).collect();
        for (b, &pb) in idx.iter().enumerate() {
            for (a, &pa) in idx.iter().enumerate() {
                w[(pa, pb)] += scale * f[(a, b)];
            }
        }
    }
    let (eigenvalues, vectors) = sym_eig_desc(&w);
    let lmax = eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let rank = eigenvalues.iter().take_while(|&&l| l > RANK_TOL * lmax && lmax > 0.0).count();
    let basis = vectors.columns(0, rank).into_owned();
    Ok(ExplicitW {
        matrix: w,
        eigenvalues,
        basis,
        rank,
    })
}

/// `φ(x) = ι_{S(W)}(x) + ½ xᵀ Q̄ (Λ̄⁻¹ − I) Q̄ᵀ x`; `+∞` off the subspace.
pub fn eval_phi(x: &[f64], w: &ExplicitW) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    let (z, resid) = w.project(x);
    if resid > SUBSPACE_TOL * norm {
        return f64::INFINITY;
    }
    0.5 * z
        .iter()
        .zip(w.retained_eigenvalues())
        .map(|(zk, lk)| zk * zk * (1.0 / lk - 1.0))
        .sum::<f64>()
}

/// `argmin_x ½‖x − y‖² + φ(x)` solved in the coordinates of `S(W)`:
/// `z = Λ̄ Q̄ᵀ y`, `x = Q̄ z`.
pub fn prox_oracle(y: &[f64], w: &ExplicitW) -> Vec<f64> {
    let z = w.basis.transpose() * DVector::from_column_slice(y);
    let scaled = DVector::from_iterator(
        w.rank,
        z.iter().zip(w.retained_eigenvalues()).map(|(zk, lk)| zk * lk),
    );
    (&w.basis * scaled).as_slice().to_vec()
}
