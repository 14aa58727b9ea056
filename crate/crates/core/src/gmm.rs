//! Zero-mean Gaussian mixture over patches, trained by EM from noisy
//! patches.
//!
//! Every component has zero mean; patches are expected to have their means
//! removed beforehand. Component `j` explains a noisy patch through the
//! covariance `C_j + σ²I`, and the M-step projects the noise-corrected
//! second moment back onto the PSD cone with [`eigt`].

use std::f64::consts::PI;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
pub use crate::linalg::eigt;
use crate::linalg::{min_eigenvalue, symmetrize};
use crate::par;
use crate::patch::PatchSet;

/// Responsibility total below which a component counts as empty.
const EMPTY_COMPONENT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub alphas: Vec<f64>,
    pub covariances: Vec<DMatrix<f64>>,
    pub patch_side: usize,
}

impl GmmModel {
    pub fn new(alphas: Vec<f64>, covariances: Vec<DMatrix<f64>>, patch_side: usize) -> Result<Self> {
        let model = GmmModel {
            alphas,
            covariances,
            patch_side,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn components(&self) -> usize {
        self.alphas.len()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side
    }

    /// Checks the simplex, shape and PSD invariants.
    pub fn validate(&self) -> Result<()> {
        let k = self.alphas.len();
        if k == 0 || self.covariances.len() != k {
            return dim_err(format!(
                "{} weights for {} covariances",
                k,
                self.covariances.len()
            ));
        }
        if self.alphas.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::Config("mixture weights must be nonnegative".into()));
        }
        let total: f64 = self.alphas.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}")));
        }
        let np = self.patch_len();
        for (j, c) in self.covariances.iter().enumerate() {
            if c.nrows() != np || c.ncols() != np {
                return dim_err(format!("covariance {j} is {}x{}, expected {np}x{np}", c.nrows(), c.ncols()));
            }
            let scale = c.norm().max(1.0);
            if (c - c.transpose()).norm() > 1e-10 * scale {
                return Err(Error::Config(format!("covariance {j} is not symmetric")));
            }
            if min_eigenvalue(c) < -1e-10 * scale {
                return Err(Error::Config(format!("covariance {j} is not PSD")));
            }
        }
        Ok(())
    }
}

/// Posterior component weights, one column per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchWeights {
    /// `K x N`.
    pub beta: DMatrix<f64>,
}

impl PatchWeights {
    pub fn components(&self) -> usize {
        self.beta.nrows()
    }

    pub fn patches(&self) -> usize {
        self.beta.ncols()
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.beta.column(i).iter().copied().collect()
    }

    /// Hard assignment per patch.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.patches())
            .map(|i| {
                self.beta
                    .column(i)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(j, _)| j)
                    .unwrap_or(0)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub components: usize,
    pub max_iters: usize,
    pub loglik_rel_tol: f64,
    pub seed: u64,
    /// Noise variance of the training patches.
    pub noise_variance: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            components: 20,
            max_iters: 100,
            loglik_rel_tol: 1e-5,
            seed: 0,
            noise_variance: 0.0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::Config("EM needs at least one component".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("EM needs at least one iteration".into()));
        }
        if !(self.loglik_rel_tol > 0.0) {
            return Err(Error::Config("EM tolerance must be positive".into()));
        }
        if !(self.noise_variance >= 0.0) {
            return Err(Error::Config("noise variance must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Output of an E-step with diagnostics.
#[derive(Debug, Clone)]
pub struct EStep {
    pub weights: PatchWeights,
    /// Observed-data log-likelihood `Σ_i log Σ_j α_j N(y_i; 0, C_j + σ²I)`.
    pub log_likelihood: f64,
    /// Components whose `C_j + σ²I` needed a diagonal loading to factor.
    pub regularized: Vec<usize>,
    /// Per-patch log-likelihood.
    pub patch_log_likelihood: Vec<f64>,
}

/// Cholesky-based Gaussian log-density evaluator for one component.
struct GaussianLogPdf {
    inv_chol: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianLogPdf {
    fn new(cov: &DMatrix<f64>, noise_variance: f64) -> (Self, bool) {
        let np = cov.nrows();
        let mut sigma = symmetrize(cov);
        for d in 0..np {
            sigma[(d, d)] += noise_variance;
        }
        let base = (sigma.trace() / np as f64).abs();
        let mut loading = 0.0;
        let mut regularized = false;
        loop {
            let mut s = sigma.clone();
            for d in 0..np {
                s[(d, d)] += loading;
            }
            if let Some(ch) = s.cholesky() {
                let l = ch.l();
                let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
                if log_det.is_finite() {
                    let inv_chol = l
                        .solve_lower_triangular(&DMatrix::identity(np, np))
                        .expect("cholesky factor is nonsingular");
                    let log_norm = -0.5 * (np as f64 * (2.0 * PI).ln() + log_det);
                    return (GaussianLogPdf { inv_chol, log_norm }, regularized);
                }
            }
            regularized = true;
            loading = if loading == 0.0 {
                (1e-10 * base).max(1e-12)
            } else {
                loading * 10.0
            };
        }
    }

    fn eval(&self, y: &[f64]) -> f64 {
        let np = y.len();
        let mut quad = 0.0;
        for r in 0..np {
            let mut z = 0.0;
            for c in 0..=r {
                z += self.inv_chol[(r, c)] * y[c];
            }
            quad += z * z;
        }
        self.log_norm - 0.5 * quad
    }
}

fn check_rows(rows: &[f64], np: usize) -> Result<usize> {
    if np == 0 || !rows.len().is_multiple_of(np) {
        return dim_err(format!("patch buffer of {} is not a multiple of {np}", rows.len()));
    }
    Ok(rows.len() / np)
}

/// E-step on raw patch rows (`N x n_p`, row-major).
pub fn e_step_rows(
    rows: &[f64],
    np: usize,
    model: &GmmModel,
    noise_variance: f64,
) -> Result<EStep> {
    let n = check_rows(rows, np)?;
    if model.patch_len() != np {
        return dim_err(format!(
            "model patch length {} differs from patch length {np}",
            model.patch_len()
        ));
    }
    let k = model.components();
    let mut regularized = Vec::new();
    let pdfs: Vec<GaussianLogPdf> = model
        .covariances
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let (pdf, reg) = GaussianLogPdf::new(c, noise_variance);
            if reg {
                regularized.push(j);
            }
            pdf
        })
        .collect();
    if !regularized.is_empty() {
        debug!("e_step: diagonal loading applied to components {regularized:?}");
    }
    let log_alpha: Vec<f64> = model.alphas.iter().map(|a| a.ln()).collect();

    let mut beta = vec![0.0; n * k];
    let mut patch_ll = vec![0.0; n];
    {
        let cols: Vec<(Vec<f64>, f64)> = par::map_range(n, |i| {
            let y = &rows[i * np..(i + 1) * np];
            let mut logp: Vec<f64> = (0..k).map(|j| log_alpha[j] + pdfs[j].eval(y)).collect();
            let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in logp.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in logp.iter_mut() {
                *v /= total;
            }
            (logp, max + total.ln())
        });
        for (i, (col, ll)) in cols.into_iter().enumerate() {
            beta[i * k..(i + 1) * k].copy_from_slice(&col);
            patch_ll[i] = ll;
        }
    }
    let log_likelihood = par::chunked_sum(
        n,
        || 0.0,
        |acc: &mut f64, i| *acc += patch_ll[i],
        |a, b| *a += *b,
    );
    Ok(EStep {
        weights: PatchWeights {
            beta: DMatrix::from_column_slice(k, n, &beta),
        },
        log_likelihood,
        regularized,
        patch_log_likelihood: patch_ll,
    })
}

/// Posterior component probabilities of each patch,
/// `β_{j,i} ∝ α_j N(y_i; 0, C_j + σ²I)`, computed in the log domain.
pub fn e_step(patches: &PatchSet, model: &GmmModel, noise_variance: f64) -> Result<PatchWeights> {
    Ok(e_step_rows(&patches.patches, patches.patch_len(), model, noise_variance)?.weights)
}

/// M-step on raw patch rows. Returns the model and the indices of
/// components that had to be reinitialized.
pub fn m_step_rows(
    rows: &[f64],
    np: usize,
    weights: &PatchWeights,
    noise_variance: f64,
) -> Result<(GmmModel, Vec<usize>)> {
    let n = check_rows(rows, np)?;
    if weights.patches() != n {
        return dim_err(format!("{} weight columns for {n} patches", weights.patches()));
    }
    let side = (np as f64).sqrt().round() as usize;
    if side * side != np {
        return dim_err(format!("patch length {np} is not a square"));
    }
    let k = weights.components();

    // Per-chunk weighted scatter matrices, combined in chunk order.
    let (totals, scatters) = par::chunked_sum(
        n,
        || (vec![0.0; k], vec![DMatrix::<f64>::zeros(np, np); k]),
        |acc: &mut (Vec<f64>, Vec<DMatrix<f64>>), i| {
            let y = DVector::from_column_slice(&rows[i * np..(i + 1) * np]);
            for j in 0..k {
                let b = weights.beta[(j, i)];
                if b != 0.0 {
                    acc.0[j] += b;
                    acc.1[j].ger(b, &y, &y, 1.0);
                }
            }
        },
        |a, b| {
            for j in 0..k {
                a.0[j] += b.0[j];
                a.1[j] += &b.1[j];
            }
        },
    );

    let grand: f64 = totals.iter().sum();
    let mut alphas: Vec<f64> = totals.iter().map(|t| t / grand).collect();
    let mut covariances = Vec::with_capacity(k);
    let mut rescued = Vec::new();
    for j in 0..k {
        if totals[j] < EMPTY_COMPONENT {
            rescued.push(j);
            covariances.push(DMatrix::zeros(np, np));
            continue;
        }
        let mut s = &scatters[j] / totals[j];
        for d in 0..np {
            s[(d, d)] -= noise_variance;
        }
        covariances.push(eigt(&s));
    }

    if !rescued.is_empty() {
        // Reseed empty components from the largest-energy patches.
        let mut energy: Vec<(usize, f64)> = (0..n)
            .map(|i| (i, rows[i * np..(i + 1) * np].iter().map(|v| v * v).sum()))
            .collect();
        energy.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (slot, &j) in rescued.iter().enumerate() {
            let i = energy[slot % n].0;
            let y = DVector::from_column_slice(&rows[i * np..(i + 1) * np]);
            let e = y.norm_squared();
            let mut c = &y * y.transpose();
            for d in 0..np {
                c[(d, d)] += 1e-3 * e / np as f64 + f64::MIN_POSITIVE;
            }
            warn!("m_step: component {j} empty, reinitialized from patch {i}");
            covariances[j] = c;
            alphas[j] = 1.0 / n as f64;
        }
        let s: f64 = alphas.iter().sum();
        alphas.iter_mut().for_each(|a| *a /= s);
    }

    Ok((
        GmmModel {
            alphas,
            covariances,
            patch_side: side,
        },
        rescued,
    ))
}

/// `α_j = Σ_i β_{j,i} / Σ β`, `C_j = eigt(Σ_i β_{j,i} y_i y_iᵀ / Σ_i β_{j,i} − σ²I)`.
pub fn m_step(patches: &PatchSet, weights: &PatchWeights, noise_variance: f64) -> Result<GmmModel> {
    Ok(m_step_rows(&patches.patches, patches.patch_len(), weights, noise_variance)?.0)
}

/// Result of EM training.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: GmmModel,
    /// Responsibilities of the final model on the training patches.
    pub weights: PatchWeights,
    pub log_likelihood_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of empty-component reinitializations over the run.
    pub rescues: usize,
}

/// Seeds the mixture: k-means++ on scale-normalized patches with a
/// sign-invariant distance (components are zero-mean, so `y` and `−y` are
/// equivalent), then per-cluster second moments with a small ridge.
fn initialize(rows: &[f64], np: usize, k: usize, seed: u64) -> GmmModel {
    let n = rows.len() / np;
    let side = (np as f64).sqrt().round() as usize;
    let rms = (rows.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    let feat = |i: usize| rows[i * np..(i + 1) * np].iter().map(move |v| v * scale);
    let dist = |i: usize, c: usize| -> f64 {
        let (mut uu, mut cc, mut uc) = (0.0, 0.0, 0.0);
        for (u, v) in feat(i).zip(feat(c)) {
            uu += u * u;
            cc += v * v;
            uc += u * v;
        }
        (uu + cc - 2.0 * uc.abs()).max(0.0)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| dist(i, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centers.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist(i, next));
        }
    }

    let labels: Vec<usize> = par::map_range(n, |i| {
        (0..k)
            .map(|j| (j, dist(i, centers[j])))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(j, _)| j)
            .unwrap_or(0)
    });

    let mut global = DMatrix::<f64>::zeros(np, np);
    let mut sums = vec![DMatrix::<f64>::zeros(np, np); k];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let y = DVector::from_column_slice(&rows[i * np..(i + 1) * np]);
        sums[labels[i]].ger(1.0, &y, &y, 1.0);
        global.ger(1.0, &y, &y, 1.0);
        counts[labels[i]] += 1;
    }
    global /= n as f64;
    let covariances = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| {
            let mut m = if c > 0 { s / c as f64 } else { global.clone() };
            let ridge = 1e-6 * m.trace() / np as f64 + f64::MIN_POSITIVE;
            for d in 0..np {
                m[(d, d)] += ridge;
            }
            symmetrize(&m)
        })
        .collect();
    let alphas = counts
        .iter()
        .map(|&c| (c.max(1)) as f64)
        .collect::<Vec<_>>();
    let s: f64 = alphas.iter().sum();
    GmmModel {
        alphas: alphas.into_iter().map(|a| a / s).collect(),
        covariances,
        patch_side: side,
    }
}

/// Runs EM on raw rows.
pub fn train_em_rows(rows: &[f64], np: usize, config: &EmConfig) -> Result<EmFit> {
    config.validate()?;
    let n = check_rows(rows, np)?;
    if n < config.components {
        return Err(Error::Config(format!(
            "{n} patches cannot support {} components",
            config.components
        )));
    }
    let sigma2 = config.noise_variance;
    let mut model = initialize(rows, np, config.components, config.seed);
    let mut es = e_step_rows(rows, np, &model, sigma2)?;
    let mut history = vec![es.log_likelihood];
    let mut converged = false;
    let mut iterations = 0;
    let mut rescues = 0;
    for it in 1..=config.max_iters {
        let (next, rescued) = m_step_rows(rows, np, &es.weights, sigma2)?;
        rescues += rescued.len();
        model = next;
        es = e_step_rows(rows, np, &model, sigma2)?;
        let prev = *history.last().expect("history is never empty");
        history.push(es.log_likelihood);
        iterations = it;
        let change = (es.log_likelihood - prev).abs() / es.log_likelihood.abs().max(f64::MIN_POSITIVE);
        debug!("EM iteration {it}: loglik {:.6e}, rel change {change:.3e}", es.log_likelihood);
        if rescued.is_empty() && change < config.loglik_rel_tol {
            converged = true;
            break;
        }
    }
    Ok(EmFit {
        model,
        weights: es.weights,
        log_likelihood_history: history,
        iterations,
        converged,
        rescues,
    })
}

/// Trains a GMM from (zero-mean) patches of one band.
pub fn train_em(patches: &PatchSet, config: &EmConfig) -> Result<EmFit> {
    train_em_rows(&patches.patches, patches.patch_len(), config)
}

/// Trains one GMM from the patches of several bands pooled together.
pub fn train_em_bands(bands: &[PatchSet], config: &EmConfig) -> Result<EmFit> {
    let first = bands
        .first()
        .ok_or_else(|| Error::Config("no training bands".into()))?;
    let np = first.patch_len();
    let mut rows = Vec::with_capacity(first.patches.len() * bands.len());
    for b in bands {
        if b.patch_len() != np {
            return dim_err("training bands use different patch sizes");
        }
        rows.extend_from_slice(&b.patches);
    }
    train_em_rows(&rows, np, config)
}

/// Averages per-band responsibilities: `β_j^i = (1/L) Σ_p β_{p,j}^i`.
pub fn average_beta_across_bands(per_band: &[PatchWeights]) -> Result<PatchWeights> {
    let first = per_band
        .first()
        .ok_or_else(|| Error::Dimension("no bands to average".into()))?;
    let (k, n) = first.beta.shape();
    let mut sum = DMatrix::zeros(k, n);
    for w in per_band {
        if w.beta.shape() != (k, n) {
            return dim_err(format!(
                "weight shapes differ: {:?} vs {:?}",
                w.beta.shape(),
                (k, n)
            ));
        }
        sum += &w.beta;
    }
    Ok(PatchWeights {
        beta: sum / per_band.len() as f64,
    })
}
