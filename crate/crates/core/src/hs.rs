//! Hyperspectral sharpening with PnP-SALSA.
//!
//! Observation model, with `Z` the `L_h x n_m` high-resolution cube:
//!
//! ```text
//! Y_h = Z B M + N_h        (blur, then keep the pixels of a regular grid)
//! Y_m = R Z + N_m          (spectral response of the MS/PAN sensor)
//! ```
//!
//! `Z = E X` with `E` an orthonormal PCA basis of the HS spectra. The
//! coefficients `X` are estimated by SALSA with three splits
//! `V_1 = XB`, `V_2 = X`, `V_3 = X`; the third split is handled by the
//! scene-adapted denoiser trained on `Y_m`.
//!
//! Spectra are not mean-centred before the PCA, because `Ẑ = E X` has no
//! offset term. A centred variant would need to carry the mean spectrum.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::admm::{run_admm, Block, SolveReport, SolverConfig, SplitProblem};
use crate::denoiser::{ExplicitW, LinearDenoiser, MeanMode};
use crate::error::{dim_err, Error, Result};
use crate::fft::{blur_rows, solve_x_update_hs, CyclicBlur};
use crate::geometry::{row_vec, set_row, Cube, ImageGeometry};
use crate::gmm::{average_beta_across_bands, EmConfig, GmmModel, PatchWeights};
use crate::linalg::sym_eig_desc;
use crate::par;
use crate::patch::{extract_patches, remove_means};

/// Cap on `L_s · n_m` for [`direct_solve_small`].
pub const DIRECT_SOLVE_CAP: usize = 8192;

/// Sampling mask keeping pixel `(r, c)` when `r % d == 0 && c % d == 0`.
pub fn regular_mask(geometry: ImageGeometry, decimation: usize) -> Vec<bool> {
    (0..geometry.pixels())
        .map(|p| {
            let (r, c) = geometry.coords(p);
            r % decimation == 0 && c % decimation == 0
        })
        .collect()
}

/// Observed scene for HS sharpening.
#[derive(Debug, Clone)]
pub struct HsScene {
    /// High-resolution spatial grid (`bands` = `L_h`).
    pub geometry: ImageGeometry,
    /// Ground truth `L_h x n_m`, synthetic runs only.
    pub truth: Option<DMatrix<f64>>,
    /// `L_h x n_h`; columns follow the kept pixels in increasing index order.
    pub yh: DMatrix<f64>,
    /// `L_m x n_m`.
    pub ym: DMatrix<f64>,
    pub blur: CyclicBlur,
    pub mask: Vec<bool>,
    pub decimation: usize,
    /// Spectral response `L_m x L_h`.
    pub response: DMatrix<f64>,
    pub sigma_h: f64,
    pub sigma_m: f64,
}

impl HsScene {
    pub fn hs_bands(&self) -> usize {
        self.response.ncols()
    }

    pub fn ms_bands(&self) -> usize {
        self.response.nrows()
    }

    /// Pixel indices kept by the mask.
    pub fn kept_pixels(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(p, &m)| m.then_some(p))
            .collect()
    }

    /// Low-resolution grid of `Y_h`.
    pub fn low_res_geometry(&self) -> Result<ImageGeometry> {
        let d = self.decimation;
        ImageGeometry::new(
            self.geometry.height.div_ceil(d),
            self.geometry.width.div_ceil(d),
            self.hs_bands(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.geometry.pixels();
        let (lm, lh) = self.response.shape();
        if self.mask.len() != n {
            return dim_err("mask length differs from pixel count");
        }
        if self.decimation == 0 || self.mask != regular_mask(self.geometry, self.decimation) {
            return dim_err("mask is not a regular grid with the stated decimation");
        }
        let nh = self.mask.iter().filter(|&&m| m).count();
        if self.yh.shape() != (lh, nh) {
            return dim_err(format!("Y_h is {:?}, expected {:?}", self.yh.shape(), (lh, nh)));
        }
        if self.ym.shape() != (lm, n) {
            return dim_err(format!("Y_m is {:?}, expected {:?}", self.ym.shape(), (lm, n)));
        }
        if !self.blur.geometry().same_grid(&self.geometry) {
            return dim_err("blur grid differs from the scene grid");
        }
        if self.response.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("spectral response has negative entries".into()));
        }
        if let Some(z) = &self.truth {
            if z.shape() != (lh, n) {
                return dim_err("ground truth shape differs from L_h x n_m");
            }
        }
        Ok(())
    }
}

fn add_noise<R: Rng + ?Sized>(m: &mut DMatrix<f64>, sigma: f64, rng: &mut R) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
        // column-major fill order keeps draws reproducible
        for v in m.iter_mut() {
            *v += normal.sample(rng);
        }
    }
}

/// `Z B M`, plus `N(0, σ_h²)` noise when `rng` is given.
pub fn forward_hs(z: &DMatrix<f64>, scene: &HsScene, rng: Option<&mut dyn rand::RngCore>) -> Result<DMatrix<f64>> {
    if z.ncols() != scene.geometry.pixels() {
        return dim_err("Z column count differs from the scene grid");
    }
    let blurred = blur_rows(z, &scene.blur, false)?;
    let kept = scene.kept_pixels();
    let mut out = DMatrix::zeros(z.nrows(), kept.len());
    for (c, &p) in kept.iter().enumerate() {
        out.set_column(c, &blurred.column(p));
    }
    if let Some(rng) = rng {
        add_noise(&mut out, scene.sigma_h, rng);
    }
    Ok(out)
}

/// `R Z`, plus `N(0, σ_m²)` noise when `rng` is given.
pub fn forward_ms(z: &DMatrix<f64>, scene: &HsScene, rng: Option<&mut dyn rand::RngCore>) -> Result<DMatrix<f64>> {
    if z.nrows() != scene.response.ncols() {
        return dim_err("Z row count differs from the response's band count");
    }
    let mut out = &scene.response * z;
    if let Some(rng) = rng {
        add_noise(&mut out, scene.sigma_m, rng);
    }
    Ok(out)
}

/// Orthonormal subspace basis of the HS spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    /// `L_h x L_s`, orthonormal columns.
    pub e: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

/// Top-`L_s` left singular vectors of `Y_h` (uncentred), each column signed
/// so that its largest-magnitude entry is positive.
pub fn pca_basis(yh: &DMatrix<f64>, subspace_dim: usize) -> Result<SubspaceBasis> {
    let (lh, nh) = yh.shape();
    if subspace_dim == 0 || subspace_dim > lh.min(nh) {
        return Err(Error::Config(format!(
            "subspace dimension {subspace_dim} outside 1..={}",
            lh.min(nh)
        )));
    }
    let gram = yh * yh.transpose();
    let (vals, vecs) = sym_eig_desc(&gram);
    let mut e = vecs.columns(0, subspace_dim).into_owned();
    for mut col in e.column_iter_mut() {
        let (mut best, mut mag) = (0.0, -1.0);
        for &v in col.iter() {
            if v.abs() > mag {
                mag = v.abs();
                best = v;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
    let singular_values = vals.iter().take(subspace_dim).map(|v| v.max(0.0).sqrt()).collect();
    Ok(SubspaceBasis { e, singular_values })
}

/// Solver-side constants of the SALSA iteration that do not change with `k`.
#[derive(Debug, Clone)]
pub struct SalsaOperators {
    /// `(EᵀE + ρI)⁻¹`.
    v1_inverse: DMatrix<f64>,
    /// `Eᵀ Y_h`, `L_s x n_h`.
    et_yh: DMatrix<f64>,
    /// `(λ EᵀRᵀRE + ρI)⁻¹`.
    v2_inverse: DMatrix<f64>,
    /// `λ EᵀRᵀ Y_m`, `L_s x n_m`.
    lambda_et_rt_ym: DMatrix<f64>,
    kept: Vec<usize>,
    rho: f64,
}

impl SalsaOperators {
    pub fn new(scene: &HsScene, basis: &SubspaceBasis, lambda: f64, rho: f64) -> Result<Self> {
        if !(rho > 0.0) || !(lambda >= 0.0) {
            return Err(Error::Config("need rho > 0 and lambda >= 0".into()));
        }
        let e = &basis.e;
        if e.nrows() != scene.hs_bands() {
            return dim_err("basis band count differs from the scene");
        }
        let ls = e.ncols();
        let eye = DMatrix::<f64>::identity(ls, ls);
        let v1_inverse = (e.transpose() * e + &eye * rho)
            .try_inverse()
            .ok_or_else(|| Error::Config("EᵀE + ρI is singular".into()))?;
        let re = &scene.response * e;
        let v2_inverse = (re.transpose() * &re * lambda + &eye * rho)
            .try_inverse()
            .ok_or_else(|| Error::Config("λEᵀRᵀRE + ρI is singular".into()))?;
        Ok(SalsaOperators {
            v1_inverse,
            et_yh: e.transpose() * &scene.yh,
            v2_inverse,
            lambda_et_rt_ym: re.transpose() * &scene.ym * lambda,
            kept: scene.kept_pixels(),
            rho,
        })
    }

    /// V1 from `A = XB − D1`: kept columns get `(EᵀE + ρI)⁻¹(EᵀY_h + ρA)`,
    /// the others are `A` unchanged.
    pub fn v1_from(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = a.clone();
        for (c, &p) in self.kept.iter().enumerate() {
            let rhs = self.et_yh.column(c) + a.column(p) * self.rho;
            out.set_column(p, &(&self.v1_inverse * rhs));
        }
        out
    }

    /// V2 from `A = X − D2`: `(λEᵀRᵀRE + ρI)⁻¹(λEᵀRᵀY_m + ρA)`.
    pub fn v2_from(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        &self.v2_inverse * (&self.lambda_et_rt_ym + a * self.rho)
    }
}

/// V1 update of the SALSA iteration.
pub fn v1_update(
    x: &DMatrix<f64>,
    d1: &DMatrix<f64>,
    scene: &HsScene,
    basis: &SubspaceBasis,
    rho: f64,
) -> Result<DMatrix<f64>> {
    let ops = SalsaOperators::new(scene, basis, 0.0, rho)?;
    let xb = blur_rows(x, &scene.blur, false)?;
    if d1.shape() != xb.shape() {
        return dim_err("D1 shape differs from X");
    }
    Ok(ops.v1_from(&(xb - d1)))
}

/// V2 update of the SALSA iteration.
pub fn v2_update(
    x: &DMatrix<f64>,
    d2: &DMatrix<f64>,
    scene: &HsScene,
    basis: &SubspaceBasis,
    lambda: f64,
    rho: f64,
) -> Result<DMatrix<f64>> {
    if d2.shape() != x.shape() || x.nrows() != basis.e.ncols() || x.ncols() != scene.geometry.pixels() {
        return dim_err("X/D2 shapes inconsistent with the scene");
    }
    let ops = SalsaOperators::new(scene, basis, lambda, rho)?;
    Ok(ops.v2_from(&(x - d2)))
}

/// V3 update: every coefficient band of `X − D3` through the denoiser.
pub fn v3_update(x: &DMatrix<f64>, d3: &DMatrix<f64>, denoiser: &LinearDenoiser) -> Result<DMatrix<f64>> {
    if d3.shape() != x.shape() {
        return dim_err("D3 shape differs from X");
    }
    denoise_rows(&(x - d3), denoiser)
}

fn denoise_rows(a: &DMatrix<f64>, denoiser: &LinearDenoiser) -> Result<DMatrix<f64>> {
    let rows = par::map_range(a.nrows(), |r| denoiser.apply(&row_vec(a, r)));
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for (r, row) in rows.into_iter().enumerate() {
        set_row(&mut out, r, &row?);
    }
    Ok(out)
}

fn to_matrix(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}

fn to_flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Objective `½‖EXBM − Y_h‖² + (λ/2)‖REX − Y_m‖² + w Σ_r φ(X_r)`.
///
/// Without an explicit `W` the regularizer is omitted. With one, each
/// coefficient band is first projected onto `S(W)` when `project` is set,
/// otherwise off-subspace bands give `+∞`.
pub fn hs_objective(
    x: &DMatrix<f64>,
    scene: &HsScene,
    basis: &SubspaceBasis,
    lambda: f64,
    reg_weight: f64,
    w: Option<&ExplicitW>,
    project: bool,
) -> Result<f64> {
    let x = match (w, project) {
        (Some(w), true) => {
            let mut p = x.clone();
            for r in 0..x.nrows() {
                set_row(&mut p, r, &w.project_onto_span(&row_vec(x, r)));
            }
            p
        }
        _ => x.clone(),
    };
    let z = &basis.e * &x;
    let yh_fit = forward_hs(&z, scene, None)? - &scene.yh;
    let ym_fit = forward_ms(&z, scene, None)? - &scene.ym;
    let mut obj = 0.5 * yh_fit.norm_squared() + 0.5 * lambda * ym_fit.norm_squared();
    if let Some(w) = w {
        if reg_weight > 0.0 {
            for r in 0..x.nrows() {
                obj += reg_weight * crate::denoiser::eval_phi(&row_vec(&x, r), w);
            }
        }
    }
    Ok(obj)
}

/// The three-split SALSA problem for PnP HS sharpening. `x` and every
/// block are `L_s x n_m` matrices flattened row by row.
pub struct HsSalsa<'a> {
    scene: &'a HsScene,
    basis: &'a SubspaceBasis,
    ops: SalsaOperators,
    denoiser: Option<&'a LinearDenoiser>,
    lambda: f64,
    reg_weight: f64,
    explicit: Option<&'a ExplicitW>,
}

impl<'a> HsSalsa<'a> {
    /// `denoiser = None` drops the regularizer (`V_3 = X − D_3`).
    pub fn new(
        scene: &'a HsScene,
        basis: &'a SubspaceBasis,
        denoiser: Option<&'a LinearDenoiser>,
        lambda: f64,
        rho: f64,
    ) -> Result<Self> {
        scene.validate()?;
        if let Some(d) = denoiser {
            if !d.geometry().same_grid(&scene.geometry) {
                return dim_err("denoiser grid differs from the scene grid");
            }
        }
        Ok(HsSalsa {
            scene,
            basis,
            ops: SalsaOperators::new(scene, basis, lambda, rho)?,
            denoiser,
            lambda,
            reg_weight: if denoiser.is_some() { rho } else { 0.0 },
            explicit: None,
        })
    }

    /// Enables objective evaluation against a materialized `W`.
    pub fn with_explicit_w(mut self, w: &'a ExplicitW) -> Self {
        self.explicit = Some(w);
        self
    }

    fn ls(&self) -> usize {
        self.basis.e.ncols()
    }

    fn n(&self) -> usize {
        self.scene.geometry.pixels()
    }

    fn mat(&self, v: &[f64]) -> DMatrix<f64> {
        to_matrix(v, self.ls(), self.n())
    }
}

impl SplitProblem for HsSalsa<'_> {
    fn x_len(&self) -> usize {
        self.ls() * self.n()
    }

    fn block_lens(&self) -> Vec<usize> {
        vec![self.x_len(); 3]
    }

    fn x_update(&self, v: &[Block], u: &[Block]) -> Result<Vec<f64>> {
        let s1 = self.mat(&v[0]) + self.mat(&u[0]);
        let mut rhs = blur_rows(&s1, &self.scene.blur, true)?;
        rhs += self.mat(&v[1]) + self.mat(&u[1]) + self.mat(&v[2]) + self.mat(&u[2]);
        Ok(to_flat(&solve_x_update_hs(&rhs, &self.scene.blur)?))
    }

    fn apply_h(&self, x: &[f64]) -> Result<Vec<Block>> {
        let xb = blur_rows(&self.mat(x), &self.scene.blur, false)?;
        Ok(vec![to_flat(&xb), x.to_vec(), x.to_vec()])
    }

    fn v_update(&self, block: usize, arg: &[f64]) -> Result<Block> {
        let a = self.mat(arg);
        let out = match block {
            0 => self.ops.v1_from(&a),
            1 => self.ops.v2_from(&a),
            _ => match self.denoiser {
                Some(d) => denoise_rows(&a, d)?,
                None => a,
            },
        };
        Ok(to_flat(&out))
    }

    fn objective(&self, x: &[f64]) -> Option<f64> {
        hs_objective(
            &self.mat(x),
            self.scene,
            self.basis,
            self.lambda,
            self.reg_weight,
            self.explicit,
            true,
        )
        .ok()
    }
}

#[derive(Debug, Clone)]
pub struct SharpenParams {
    pub subspace_dim: usize,
    pub patch_side: usize,
    /// EM settings; `noise_variance` is overwritten with `σ_m²`.
    pub em: EmConfig,
    pub solver: SolverConfig,
    pub mode: MeanMode,
}

impl Default for SharpenParams {
    fn default() -> Self {
        SharpenParams {
            subspace_dim: 4,
            patch_side: 8,
            em: EmConfig::default(),
            solver: SolverConfig {
                rho: 1e-4,
                lambda: 1e-1,
                tau: 1e-6,
                ..SolverConfig::default()
            },
            mode: MeanMode::Practical,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SharpenOutput {
    pub z_hat: Cube,
    pub x: DMatrix<f64>,
    pub basis: SubspaceBasis,
    pub model: GmmModel,
    pub weights: PatchWeights,
    pub report: SolveReport,
}

/// Trains the scene-adapted prior on all bands of `Y_m` and returns the
/// model with band-averaged posterior weights.
pub fn train_scene_prior(scene: &HsScene, patch_side: usize, em: &EmConfig) -> Result<(GmmModel, PatchWeights)> {
    let plane = scene.geometry.with_bands(1);
    let bands = (0..scene.ms_bands())
        .map(|b| remove_means(&extract_patches(&row_vec(&scene.ym, b), plane, patch_side)?))
        .collect::<Result<Vec<_>>>()?;
    let cfg = EmConfig {
        noise_variance: scene.sigma_m * scene.sigma_m,
        ..em.clone()
    };
    let fit = crate::gmm::train_em_bands(&bands, &cfg)?;
    let n = plane.pixels();
    let per_band: Vec<PatchWeights> = (0..bands.len())
        .map(|b| PatchWeights {
            beta: fit.weights.beta.columns(b * n, n).into_owned(),
        })
        .collect();
    Ok((fit.model, average_beta_across_bands(&per_band)?))
}

/// Full sharpening pipeline: PCA basis, scene-adapted GMM, PnP-SALSA.
pub fn sharpen(scene: &HsScene, params: &SharpenParams) -> Result<SharpenOutput> {
    scene.validate()?;
    params.solver.validate()?;
    let basis = pca_basis(&scene.yh, params.subspace_dim)?;
    let (model, weights) = train_scene_prior(scene, params.patch_side, &params.em)?;
    let SolverConfig { rho, lambda, tau, .. } = params.solver;
    let denoiser = if tau > 0.0 {
        Some(LinearDenoiser::new(
            model.clone(),
            weights.clone(),
            tau / rho,
            scene.geometry,
            params.mode,
        )?)
    } else {
        None
    };
    let problem = HsSalsa::new(scene, &basis, denoiser.as_ref(), lambda, rho)?;
    let sol = run_admm(&problem, &params.solver, None)?;
    let x = to_matrix(&sol.x, basis.e.ncols(), scene.geometry.pixels());
    let z = &basis.e * &x;
    Ok(SharpenOutput {
        z_hat: Cube::new(scene.geometry.with_bands(z.nrows()), z)?,
        x,
        basis,
        model,
        weights,
        report: sol.report,
    })
}

/// Dense matrix of the blur operator (column `q` is the blurred delta at `q`).
pub fn dense_blur_matrix(blur: &CyclicBlur) -> Result<DMatrix<f64>> {
    let n = blur.geometry().pixels();
    let cols = par::map_range(n, |q| {
        let mut e = vec![0.0; n];
        e[q] = 1.0;
        crate::fft::apply_blur(&e, blur, false)
    });
    let mut m = DMatrix::zeros(n, n);
    for (q, col) in cols.into_iter().enumerate() {
        m.set_column(q, &DVector::from_vec(col?));
    }
    Ok(m)
}

/// Exact minimizer of
/// `½‖EXBM − Y_h‖² + (λ/2)‖REX − Y_m‖² + w Σ_r φ(X_r)` by a dense solve in
/// the coordinates of `S(W)` (or of the whole space without `W`).
///
/// PnP-SALSA with penalty `ρ` and denoiser `W` converges to this minimizer
/// with `reg_weight = ρ`.
pub fn direct_solve_small(
    scene: &HsScene,
    basis: &SubspaceBasis,
    w: Option<&ExplicitW>,
    lambda: f64,
    reg_weight: f64,
) -> Result<DMatrix<f64>> {
    scene.validate()?;
    let n = scene.geometry.pixels();
    let ls = basis.e.ncols();
    if ls * n > DIRECT_SOLVE_CAP {
        return Err(Error::Size(format!("{} unknowns exceed cap {DIRECT_SOLVE_CAP}", ls * n)));
    }
    let bmat = dense_blur_matrix(&scene.blur)?;
    let kept = scene.kept_pixels();
    // S = rows of B at the kept pixels: the Y_h column c sees Σ_q B[kept[c], q] x_q.
    let s = DMatrix::from_fn(kept.len(), n, |c, q| bmat[(kept[c], q)]);
    let sts = s.transpose() * &s;
    let e = &basis.e;
    let re = &scene.response * e;
    let ete = e.transpose() * e;
    let rtr = re.transpose() * &re;
    let rhs_full = e.transpose() * &scene.yh * &s + re.transpose() * &scene.ym * lambda;

    let (q, inv_minus_one): (DMatrix<f64>, Vec<f64>) = match w {
        Some(w) => {
            if w.matrix.nrows() != n {
                return dim_err("explicit W size differs from the pixel count");
            }
            (
                w.basis.clone(),
                w.retained_eigenvalues().iter().map(|l| 1.0 / l - 1.0).collect(),
            )
        }
        None => (DMatrix::identity(n, n), vec![0.0; n]),
    };
    let r = q.ncols();
    let qt_sts_q = q.transpose() * &sts * &q;
    let eye_r = DMatrix::<f64>::identity(r, r);
    let mut h = DMatrix::<f64>::zeros(ls * r, ls * r);
    let mut g = DVector::<f64>::zeros(ls * r);
    for a in 0..ls {
        for b in 0..ls {
            let block = &qt_sts_q * ete[(a, b)] + &eye_r * (lambda * rtr[(a, b)]);
            h.view_mut((a * r, b * r), (r, r)).copy_from(&block);
        }
        for k in 0..r {
            h[(a * r + k, a * r + k)] += reg_weight * inv_minus_one[k];
        }
        let rhs_row = DVector::from_iterator(n, rhs_full.row(a).iter().copied());
        g.rows_mut(a * r, r).copy_from(&(q.transpose() * rhs_row));
    }
    let z = match h.clone().cholesky() {
        Some(ch) => ch.solve(&g),
        None => h
            .lu()
            .solve(&g)
            .ok_or_else(|| Error::Config("quadratic objective is singular".into()))?,
    };
    let mut x = DMatrix::zeros(ls, n);
    for a in 0..ls {
        let xa = &q * z.rows(a * r, r);
        x.row_mut(a).copy_from(&xa.transpose());
    }
    Ok(x)
}
