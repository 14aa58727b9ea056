//! ADMM / SALSA driver in scaled-dual form.
//!
//! For `min Σ_j g_j(H_j x)` with splitting `v_j = H_j x`, one iteration is
//!
//! ```text
//! x   ← argmin_x Σ_j ‖H_j x − v_j − u_j‖²        (problem callback)
//! v_j ← prox_{g_j/ρ}(H_j x − u_j)               (problem callback)
//! u_j ← u_j − H_j x + v_j
//! ```
//!
//! The penalty `ρ` is fixed for the whole run.

use std::io::Write;

use crate::error::{dim_err, Error, Result};

pub type Block = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub rho: f64,
    pub lambda: f64,
    pub tau: f64,
    pub max_iters: usize,
    pub primal_tol: f64,
    pub dual_tol: f64,
    pub record_history: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rho: 1.0,
            lambda: 1.0,
            tau: 1.0,
            max_iters: 1000,
            primal_tol: 1e-6,
            dual_tol: 1e-6,
            record_history: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.lambda >= 0.0) || !(self.tau >= 0.0) {
            return Err(Error::Config("lambda and tau must be nonnegative".into()));
        }
        if !(self.primal_tol > 0.0) || !(self.dual_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveReport {
    pub iterations_run: usize,
    pub primal_residuals: Vec<f64>,
    pub dual_residuals: Vec<f64>,
    /// Objective per iteration; empty unless `record_history` was set and
    /// the problem can evaluate its objective.
    pub objective_trace: Vec<f64>,
    /// `‖x^(k+1) − x^(k)‖` per iteration.
    pub step_norms: Vec<f64>,
    pub converged: bool,
}

impl SolveReport {
    /// CSV with header `iteration,primal,dual,objective`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iteration,primal,dual,objective")?;
        for i in 0..self.iterations_run {
            let obj = self
                .objective_trace
                .get(i)
                .map(|v| format!("{v:.17e}"))
                .unwrap_or_default();
            writeln!(
                out,
                "{},{:.17e},{:.17e},{}",
                i + 1,
                self.primal_residuals[i],
                self.dual_residuals[i],
                obj
            )?;
        }
        Ok(())
    }
}

/// A problem split into blocks `v_j = H_j x`.
pub trait SplitProblem {
    /// Length of `x`.
    fn x_len(&self) -> usize;

    /// Lengths of the split blocks `v_j`.
    fn block_lens(&self) -> Vec<usize>;

    /// `argmin_x Σ_j ‖H_j x − v_j − u_j‖²` (plus any term kept in `x`).
    fn x_update(&self, v: &[Block], u: &[Block]) -> Result<Vec<f64>>;

    /// `[H_1 x, ..., H_J x]`.
    fn apply_h(&self, x: &[f64]) -> Result<Vec<Block>>;

    /// `prox_{g_j/ρ}(arg)` for block `j`.
    fn v_update(&self, block: usize, arg: &[f64]) -> Result<Block>;

    /// Objective value at `x`, when computable.
    fn objective(&self, _x: &[f64]) -> Option<f64> {
        None
    }
}

/// Split and dual variables.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub v: Vec<Block>,
    pub u: Vec<Block>,
}

impl AdmmState {
    pub fn zeros(lens: &[usize]) -> Self {
        AdmmState {
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            u: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdmmSolution {
    pub x: Vec<f64>,
    pub state: AdmmState,
    pub report: SolveReport,
}

fn stacked_norm<'a>(pairs: impl Iterator<Item = (&'a Block, &'a Block)>) -> f64 {
    pairs
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
        .sum::<f64>()
        .sqrt()
}

/// Primal residual `‖Hx − v‖` and dual residual `ρ‖v − v_prev‖` over the
/// stacked blocks.
pub fn residuals(prev_v: &[Block], cur_v: &[Block], cur_hx: &[Block], rho: f64) -> Result<(f64, f64)> {
    if prev_v.len() != cur_v.len() || cur_v.len() != cur_hx.len() {
        return dim_err("residual block counts differ");
    }
    for ((a, b), c) in prev_v.iter().zip(cur_v).zip(cur_hx) {
        if a.len() != b.len() || b.len() != c.len() {
            return dim_err("residual block lengths differ");
        }
    }
    let primal = stacked_norm(cur_hx.iter().zip(cur_v));
    let dual = rho * stacked_norm(cur_v.iter().zip(prev_v));
    Ok((primal, dual))
}

fn all_finite(blocks: &[Block]) -> bool {
    blocks.iter().all(|b| b.iter().all(|v| v.is_finite()))
}

/// Runs ADMM from `init` (zeros when `None`).
pub fn run_admm<P: SplitProblem + ?Sized>(
    problem: &P,
    config: &SolverConfig,
    init: Option<AdmmState>,
) -> Result<AdmmSolution> {
    config.validate()?;
    let lens = problem.block_lens();
    let mut state = init.unwrap_or_else(|| AdmmState::zeros(&lens));
    if state.v.len() != lens.len()
        || state.u.len() != lens.len()
        || state.v.iter().zip(&lens).any(|(b, &n)| b.len() != n)
        || state.u.iter().zip(&lens).any(|(b, &n)| b.len() != n)
    {
        return dim_err("initial ADMM state does not match the problem's blocks");
    }

    let mut report = SolveReport::default();
    let mut x_prev: Option<Vec<f64>> = None;
    let mut x = vec![0.0; problem.x_len()];
    for iteration in 1..=config.max_iters {
        x = problem.x_update(&state.v, &state.u)?;
        if x.len() != problem.x_len() {
            return dim_err("x_update returned a vector of the wrong length");
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration });
        }
        let hx = problem.apply_h(&x)?;
        let mut v_new = Vec::with_capacity(lens.len());
        for (j, (hj, uj)) in hx.iter().zip(&state.u).enumerate() {
            let arg: Vec<f64> = hj.iter().zip(uj).map(|(a, b)| a - b).collect();
            v_new.push(problem.v_update(j, &arg)?);
        }
        if !all_finite(&v_new) {
            return Err(Error::Divergence { iteration });
        }
        for ((uj, hj), vj) in state.u.iter_mut().zip(&hx).zip(&v_new) {
            for ((u, h), v) in uj.iter_mut().zip(hj).zip(vj) {
                *u += v - h;
            }
        }
        let (primal, dual) = residuals(&state.v, &v_new, &hx, config.rho)?;
        state.v = v_new;
        if !primal.is_finite() || !dual.is_finite() || !all_finite(&state.u) {
            return Err(Error::Divergence { iteration });
        }
        report.primal_residuals.push(primal);
        report.dual_residuals.push(dual);
        report.step_norms.push(match &x_prev {
            Some(p) => crate::linalg::dist2(&x, p),
            None => crate::linalg::norm2(&x),
        });
        if config.record_history {
            if let Some(obj) = problem.objective(&x) {
                report.objective_trace.push(obj);
            }
        }
        report.iterations_run = iteration;
        if primal < config.primal_tol && dual < config.dual_tol {
            report.converged = true;
            break;
        }
        x_prev = Some(x.clone());
    }
    Ok(AdmmSolution { x, state, report })
}
