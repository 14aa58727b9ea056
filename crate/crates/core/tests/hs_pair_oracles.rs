mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use pnp_core::admm::{run_admm, SolverConfig};
use pnp_core::denoiser::{build_explicit_w, LinearDenoiser, MeanMode};
use pnp_core::fft::CyclicBlur;
use pnp_core::gmm::EmConfig;
use pnp_core::hs::{
    direct_solve_small, forward_hs, forward_ms, hs_objective, pca_basis, regular_mask, sharpen, train_scene_prior,
    v1_update, v2_update, v3_update, HsSalsa, HsScene, SharpenParams,
};
use pnp_core::linalg::{dist2, rel_diff};
use pnp_core::metrics::psnr_bands;
use pnp_core::pair::{direct_solve_pair, objective_pair, solve_pair, PairProblem};
use pnp_core::synth::{generate_hs_scene, generate_pair_scene, HsSceneSpec, PairSceneSpec};
use rand::Rng;

fn tiny_scene(seed: u64) -> HsScene {
    generate_hs_scene(&HsSceneSpec {
        height: 8,
        width: 8,
        hs_bands: 6,
        ms_bands: 2,
        true_rank: 3,
        decimation: 2,
        snr_h_db: 30.0,
        snr_m_db: 35.0,
        psf_size: 3,
        psf_sigma: 0.8,
        seed,
        ..HsSceneSpec::default()
    })
    .unwrap()
}

/// Column selection of the kept pixels.
fn selection(scene: &HsScene) -> DMatrix<f64> {
    let kept = scene.kept_pixels();
    let mut m = DMatrix::zeros(scene.geometry.pixels(), kept.len());
    for (c, &p) in kept.iter().enumerate() {
        m[(p, c)] = 1.0;
    }
    m
}

fn psf_of(scene: &HsScene) -> DMatrix<f64> {
    scene.blur.psf().clone()
}

/// Row-vector blur matrix: `(Z B)` blurs every row of `Z`.
fn row_blur_matrix(scene: &HsScene) -> DMatrix<f64> {
    dense_circulant(&psf_of(scene), scene.geometry.height, scene.geometry.width).transpose()
}

fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    a.clone().svd(true, true).solve(b, 1e-14).unwrap()
}

#[test]
fn forward_models_match_dense_construction() {
    let scene = tiny_scene(1);
    let mut r = rng(1);
    let z = DMatrix::from_fn(6, 64, |_, _| gauss(&mut r));
    let want = &z * row_blur_matrix(&scene) * selection(&scene);
    assert!(rel(&forward_hs(&z, &scene, None).unwrap(), &want) < 1e-12);
    let want = &scene.response * &z;
    assert!(rel(&forward_ms(&z, &scene, None).unwrap(), &want) < 1e-14);
}

#[test]
fn pca_residual_matches_tail_singular_values() {
    let mut r = rng(2);
    let low = DMatrix::from_fn(10, 3, |_, _| gauss(&mut r)) * DMatrix::from_fn(3, 50, |_, _| gauss(&mut r));
    let y = low + DMatrix::from_fn(10, 50, |_, _| 0.01 * gauss(&mut r));
    let svd = y.clone().svd(false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    for ls in 1..=5 {
        let b = pca_basis(&y, ls).unwrap();
        assert!(rel(&(b.e.transpose() * &b.e), &DMatrix::identity(ls, ls)) < 1e-10);
        let resid = (&y - &b.e * b.e.transpose() * &y).norm();
        let tail = s[ls..].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((resid - tail).abs() < 1e-9 * y.norm());
        for (a, b) in b.singular_values.iter().zip(&s) {
            assert!((a - b).abs() < 1e-8 * s[0]);
        }
        for col in b.e.column_iter() {
            let big = col.iter().copied().fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(big > 0.0);
        }
    }
}

#[test]
fn v1_and_v2_solve_their_subproblems() {
    let scene = tiny_scene(3);
    let basis = pca_basis(&scene.yh, 2).unwrap();
    let e = &basis.e;
    let mut r = rng(3);
    let x = DMatrix::from_fn(2, 64, |_, _| gauss(&mut r));
    let d = DMatrix::from_fn(2, 64, |_, _| gauss(&mut r));
    let (rho, lambda) = (0.7, 0.4);

    let v1 = v1_update(&x, &d, &scene, &basis, rho).unwrap();
    let a = &x * row_blur_matrix(&scene) - &d;
    let kept = scene.kept_pixels();
    for p in 0..64 {
        let want = match kept.iter().position(|&k| k == p) {
            Some(c) => {
                // min ‖E v − y‖² + ρ‖a − v‖²
                let mut stack = DMatrix::zeros(6 + 2, 2);
                stack.view_mut((0, 0), (6, 2)).copy_from(e);
                stack.view_mut((6, 0), (2, 2)).copy_from(&(DMatrix::identity(2, 2) * rho.sqrt()));
                let mut rhs = DVector::zeros(8);
                rhs.rows_mut(0, 6).copy_from(&scene.yh.column(c));
                rhs.rows_mut(6, 2).copy_from(&(a.column(p) * rho.sqrt()));
                lstsq(&stack, &rhs)
            }
            None => a.column(p).into_owned(),
        };
        assert!((v1.column(p) - &want).norm() < 1e-10 * (1.0 + want.norm()));
    }

    let v2 = v2_update(&x, &d, &scene, &basis, lambda, rho).unwrap();
    let re = &scene.response * e;
    let a = &x - &d;
    for p in 0..64 {
        let mut stack = DMatrix::zeros(2 + 2, 2);
        stack.view_mut((0, 0), (2, 2)).copy_from(&(&re * lambda.sqrt()));
        stack.view_mut((2, 0), (2, 2)).copy_from(&(DMatrix::identity(2, 2) * rho.sqrt()));
        let mut rhs = DVector::zeros(4);
        rhs.rows_mut(0, 2).copy_from(&(scene.ym.column(p) * lambda.sqrt()));
        rhs.rows_mut(2, 2).copy_from(&(a.column(p) * rho.sqrt()));
        let want = lstsq(&stack, &rhs);
        assert!((v2.column(p) - &want).norm() < 1e-10 * (1.0 + want.norm()));
    }
}

#[test]
fn v3_equals_explicit_w_row_wise() {
    let scene = tiny_scene(4);
    let (model, weights) = train_scene_prior(&scene, 3, &EmConfig { components: 3, max_iters: 20, ..EmConfig::default() }).unwrap();
    let den = LinearDenoiser::new(model, weights, 0.05, scene.geometry, MeanMode::PureLinear).unwrap();
    let w = build_explicit_w(&den).unwrap();
    let mut r = rng(4);
    let x = DMatrix::from_fn(3, 64, |_, _| gauss(&mut r));
    let d = DMatrix::from_fn(3, 64, |_, _| gauss(&mut r));
    let got = v3_update(&x, &d, &den).unwrap();
    let want = (&w.matrix * (&x - &d).transpose()).transpose();
    assert!(rel(&got, &want) < 1e-10);
}

struct Tiny {
    scene: HsScene,
    basis: pnp_core::hs::SubspaceBasis,
    den: LinearDenoiser,
    w: pnp_core::denoiser::ExplicitW,
}

fn tiny_problem(seed: u64, rho: f64, tau: f64) -> Tiny {
    let scene = tiny_scene(seed);
    let basis = pca_basis(&scene.yh, 2).unwrap();
    let em = EmConfig {
        components: 3,
        max_iters: 30,
        seed,
        ..EmConfig::default()
    };
    let (model, weights) = train_scene_prior(&scene, 3, &em).unwrap();
    let den = LinearDenoiser::new(model, weights, tau / rho, scene.geometry, MeanMode::PureLinear).unwrap();
    let w = build_explicit_w(&den).unwrap();
    Tiny { scene, basis, den, w }
}

#[test]
fn hs_admm_converges_to_oracle_with_certificate() {
    let (rho, lambda, tau) = (0.5, 0.5, 0.01);
    let t = tiny_problem(11, rho, tau);
    let problem = HsSalsa::new(&t.scene, &t.basis, Some(&t.den), lambda, rho)
        .unwrap()
        .with_explicit_w(&t.w);

    // default tolerances reached within 500 iterations
    let quick = run_admm(&problem, &SolverConfig { rho, lambda, tau, max_iters: 500, ..SolverConfig::default() }, None).unwrap();
    assert!(quick.report.converged, "{} iterations", quick.report.iterations_run);

    let cfg = SolverConfig {
        rho,
        lambda,
        tau,
        max_iters: 20_000,
        primal_tol: 1e-11,
        dual_tol: 1e-11,
        record_history: true,
    };
    let sol = run_admm(&problem, &cfg, None).unwrap();
    let rep = &sol.report;
    assert!(rep.converged);
    assert!(*rep.primal_residuals.last().unwrap() < 1e-10 && *rep.dual_residuals.last().unwrap() < 1e-10);
    assert_eq!(rep.objective_trace.len(), rep.iterations_run);

    let x = DMatrix::from_row_slice(2, 64, &sol.x);
    let oracle = direct_solve_small(&t.scene, &t.basis, Some(&t.w), lambda, rho).unwrap();
    assert!(rel(&x, &oracle) < 1e-5);
    let f_star = hs_objective(&oracle, &t.scene, &t.basis, lambda, rho, Some(&t.w), false).unwrap();
    let f_admm = hs_objective(&x, &t.scene, &t.basis, lambda, rho, Some(&t.w), true).unwrap();
    assert!(f_star <= f_admm * (1.0 + 1e-12) && f_admm <= f_star + 1e-8);
    assert!((rep.objective_trace.last().unwrap() - f_star).abs() <= 1e-6 * f_star);

    // the step sequence eventually shrinks
    let steps = &rep.step_norms;
    let tail = &steps[steps.len() / 2..];
    assert!(tail.last().unwrap() < &tail[0]);

    // history recording does not change the iterate
    let plain = run_admm(&problem, &SolverConfig { record_history: false, ..cfg.clone() }, None).unwrap();
    assert_eq!(plain.x, sol.x);

    // Ẑ = E X with orthonormal E
    let z = &t.basis.e * &x;
    assert!(rel(&(t.basis.e.transpose() * z), &x) < 1e-12);
}

#[test]
fn direct_solve_reductions() {
    // τ = 0: compare with normal equations built from explicit Kronecker operators
    let scene = tiny_scene(20);
    // L_s = L_m keeps R E invertible, so the problem is full rank
    let basis = pca_basis(&scene.yh, 2).unwrap();
    let lambda = 0.3;
    let x = direct_solve_small(&scene, &basis, None, lambda, 0.0).unwrap();
    let bm = row_blur_matrix(&scene) * selection(&scene); // n x n_h
    let e = &basis.e;
    let n = 64;
    let ls = 2;
    // vec over (r, q) with r-major ordering, matching X row-major flattening
    let mut a = DMatrix::zeros(6 * bm.ncols() + 2 * n, ls * n);
    for l in 0..6 {
        for c in 0..bm.ncols() {
            for rr in 0..ls {
                for q in 0..n {
                    a[(l * bm.ncols() + c, rr * n + q)] = e[(l, rr)] * bm[(q, c)];
                }
            }
        }
    }
    let re = &scene.response * e;
    let off = 6 * bm.ncols();
    for b in 0..2 {
        for p in 0..n {
            for rr in 0..ls {
                a[(off + b * n + p, rr * n + p)] = lambda.sqrt() * re[(b, rr)];
            }
        }
    }
    let mut y = DVector::zeros(a.nrows());
    for l in 0..6 {
        for c in 0..bm.ncols() {
            y[l * bm.ncols() + c] = scene.yh[(l, c)];
        }
    }
    for b in 0..2 {
        for p in 0..n {
            y[off + b * n + p] = lambda.sqrt() * scene.ym[(b, p)];
        }
    }
    let normal = (a.transpose() * &a).lu().solve(&(a.transpose() * y)).unwrap();
    let flat: Vec<f64> = x.transpose().as_slice().to_vec();
    assert!(rel_diff(&flat, normal.as_slice()) < 1e-8);

    // λ = 0, delta blur, full mask: HS-only least squares X = Eᵀ Y_h
    let mut s2 = scene.clone();
    s2.blur = CyclicBlur::delta(s2.geometry).unwrap();
    s2.decimation = 1;
    s2.mask = regular_mask(s2.geometry, 1);
    s2.yh = DMatrix::from_fn(6, 64, |i, j| ((i * 7 + j * 3) % 11) as f64);
    let x = direct_solve_small(&s2, &basis, None, 0.0, 0.0).unwrap();
    assert!(rel(&x, &(basis.e.transpose() * &s2.yh)) < 1e-10);
}

#[test]
fn sharpen_recovers_identity_observations() {
    let mut scene = generate_hs_scene(&HsSceneSpec {
        height: 16,
        width: 16,
        hs_bands: 8,
        ms_bands: 8,
        true_rank: 3,
        decimation: 1,
        seed: 21,
        ..HsSceneSpec::default()
    })
    .unwrap();
    scene.blur = CyclicBlur::delta(scene.geometry).unwrap();
    scene.response = DMatrix::identity(8, 8);
    let z = scene.truth.clone().unwrap();
    scene.yh = forward_hs(&z, &scene, None).unwrap();
    scene.ym = forward_ms(&z, &scene, None).unwrap();
    scene.sigma_h = 0.0;
    scene.sigma_m = 1e-3;
    let params = SharpenParams {
        subspace_dim: 3,
        patch_side: 4,
        em: EmConfig {
            components: 3,
            max_iters: 20,
            ..EmConfig::default()
        },
        solver: SolverConfig {
            rho: 1e-2,
            lambda: 1.0,
            tau: 1e-8,
            max_iters: 1000,
            ..SolverConfig::default()
        },
        mode: MeanMode::Practical,
    };
    let out = sharpen(&scene, &params).unwrap();
    let peak = z.max();
    let p = psnr_bands(&z, &out.z_hat.data, peak).unwrap();
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    assert!(mean > 60.0, "{mean}");
}

#[test]
fn pair_oracles_and_certificates() {
    let scene = generate_pair_scene(&PairSceneSpec {
        height: 16,
        width: 16,
        kernel: "gaussian".into(),
        sigma_n: 0.1,
        sigma_b: 0.01,
        seed: 30,
    })
    .unwrap();
    let g = scene.geometry;
    let n = g.pixels();
    let b = dense_circulant(scene.blur.psf(), 16, 16);
    let lambda = 0.2;
    let yb = DVector::from_column_slice(&scene.y_b);
    let yn = DVector::from_column_slice(&scene.y_n);

    // τ = 0 against the normal equations
    let cfg = SolverConfig { rho: 0.5, lambda, tau: 0.0, ..SolverConfig::default() };
    let (x, rep) = solve_pair(&scene, None, &cfg).unwrap();
    assert!(rep.converged && rep.iterations_run <= 1000);
    let normal = (b.transpose() * &b + DMatrix::identity(n, n) * lambda)
        .lu()
        .solve(&(b.transpose() * &yb + &yn * lambda))
        .unwrap();
    assert!(rel_diff(&x, normal.as_slice()) < 1e-5);
    let dense_obj = 0.5 * (&b * &normal - &yb).norm_squared() + 0.5 * lambda * (&normal - &yn).norm_squared();
    let got = objective_pair(normal.as_slice(), &scene, lambda, 0.0, None).unwrap();
    assert!((got - dense_obj).abs() < 1e-10 * dense_obj);

    // τ > 0, pure-linear W: KKT oracle and sampling certificate
    let (rho, tau) = (0.5, 0.005);
    let (den, w) = {
        let d = common::trained_denoiser(16, 16, 4, 3, 31, tau / rho);
        let d = LinearDenoiser::new(d.model().clone(), d.weights().clone(), tau / rho, g, MeanMode::PureLinear).unwrap();
        let w = build_explicit_w(&d).unwrap();
        (d, w)
    };
    let cfg = SolverConfig { rho, lambda, tau, ..SolverConfig::default() };
    let (x, rep) = solve_pair(&scene, Some(&den), &cfg).unwrap();
    assert!(rep.converged);
    let oracle = direct_solve_pair(&scene, lambda, Some(&w), rho).unwrap();
    assert!(rel_diff(&x, &oracle) < 1e-5);
    let xp = w.project_onto_span(&x);
    let f0 = objective_pair(&xp, &scene, lambda, rho, Some(&w)).unwrap();
    let mut r = rng(32);
    for _ in 0..100 {
        let scale = r.gen_range(1e-4..1e-1);
        let d = w.project_onto_span(&random_vec(n, &mut r));
        let xq: Vec<f64> = xp.iter().zip(&d).map(|(a, b)| a + scale * b).collect();
        assert!(f0 <= objective_pair(&xq, &scene, lambda, rho, Some(&w)).unwrap() + 1e-12);
    }
    let off: Vec<f64> = {
        let (_, v) = pnp_core::linalg::sym_eig_desc(&w.matrix);
        v.column(n - 1).iter().copied().collect()
    };
    assert_eq!(objective_pair(&off, &scene, lambda, rho, Some(&w)).unwrap(), f64::INFINITY);

    // λ → ∞ favours y_n
    let big = SolverConfig { rho: 1e6, lambda: 1e6, tau: 0.0, ..SolverConfig::default() };
    let (x, _) = solve_pair(&scene, None, &big).unwrap();
    assert!(dist2(&x, &scene.y_n) < 1e-3 * dist2(&x, &scene.y_b));

    // objective trace recorded through the problem
    let problem = PairProblem::new(&scene, Some(&den), lambda, rho).unwrap().with_explicit_w(&w);
    let sol = run_admm(&problem, &SolverConfig { record_history: true, ..cfg }, None).unwrap();
    let last = *sol.report.objective_trace.last().unwrap();
    let f_star = objective_pair(&oracle, &scene, lambda, rho, Some(&w)).unwrap();
    assert!((last - f_star).abs() < 1e-6 * f_star);
}
