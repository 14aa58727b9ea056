use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use pnp_core::admm::{SolveReport, SolverConfig};
use pnp_core::denoiser::{denoise_image_fixed, denoise_image_mmse, LinearDenoiser, MeanMode};
use pnp_core::fft::{blur_rows, CyclicBlur};
use pnp_core::gmm::{average_beta_across_bands, e_step_rows, train_em_bands, EmConfig, GmmModel, PatchWeights};
use pnp_core::hs::{sharpen, SharpenParams};
use pnp_core::io::{decode_cube, decode_pgm, read_gmm, read_image, write_cube, write_gmm, write_image, write_report};
use pnp_core::metrics::{default_peak, psnr, MetricReport};
use pnp_core::pair::{solve_pair, train_pair_prior, PairScene};
use pnp_core::patch::{extract_patches, remove_means};
use pnp_core::synth::{gaussian_psf, generate_hs_scene, generate_pair_scene, HsSceneSpec, PairSceneSpec};
use pnp_core::{Cube, Error, ImageGeometry, Result};

use crate::{scene_dir, verify};
use crate::{
    BenchArgs, Cli, Command, DeblurPairArgs, DenoiseArgs, EmArgs, Failure, GenSceneArgs, GridSearchArgs,
    MetricsArgs, SceneKind, SharpenArgs, SolverArgs, TrainGmmArgs, VerifyProxArgs,
};

pub fn run(cli: Cli) -> std::result::Result<ExitCode, Failure> {
    if let Some(t) = cli.threads {
        set_threads(t)?;
    }
    let seed = cli.seed;
    let code = match cli.command {
        Command::TrainGmm(a) => train_gmm(a, seed)?,
        Command::Denoise(a) => denoise(a)?,
        Command::Sharpen(a) => sharpen_cmd(a, seed)?,
        Command::DeblurPair(a) => deblur_pair_cmd(a, seed)?,
        Command::GenScene(a) => gen_scene(a, seed)?,
        Command::Metrics(a) => metrics(a)?,
        Command::VerifyProx(a) => verify_prox(a, seed)?,
        Command::Bench(a) => bench(a, seed)?,
        Command::GridSearch(a) => grid_search(a, seed)?,
    };
    Ok(code)
}

#[cfg(feature = "parallel")]
fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::State(e.to_string()))
}

#[cfg(not(feature = "parallel"))]
fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    log::info!("built without the parallel feature; --threads {n} ignored");
    Ok(())
}

fn em_config(a: &EmArgs, seed: u64) -> EmConfig {
    EmConfig {
        components: a.k,
        max_iters: a.em_iters,
        loglik_rel_tol: a.em_tol,
        seed,
        noise_variance: 0.0,
    }
}

fn solver_config(a: &SolverArgs, defaults: (f64, f64, f64), record: bool) -> SolverConfig {
    SolverConfig {
        tau: a.tau.unwrap_or(defaults.0),
        rho: a.rho.unwrap_or(defaults.1),
        lambda: a.lambda.unwrap_or(defaults.2),
        max_iters: a.max_iters,
        primal_tol: a.primal_tol,
        dual_tol: a.dual_tol,
        record_history: record,
    }
}

/// PGM or PNPCUBE1, any band count.
fn load_cube(path: &Path) -> Result<Cube> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") {
        let pgm = decode_pgm(&bytes)?;
        return Cube::from_band(ImageGeometry::plane(pgm.height, pgm.width)?, &pgm.to_band());
    }
    decode_cube(&bytes)
}

fn print_solve(report: &SolveReport) {
    println!(
        "iterations {} converged {} primal {:.3e} dual {:.3e}",
        report.iterations_run,
        report.converged,
        report.primal_residuals.last().copied().unwrap_or(f64::NAN),
        report.dual_residuals.last().copied().unwrap_or(f64::NAN)
    );
}

fn train_gmm(a: TrainGmmArgs, seed: u64) -> Result<ExitCode> {
    let cube = load_cube(&a.input)?;
    let plane = cube.geometry.with_bands(1);
    let bands = (0..cube.geometry.bands)
        .map(|b| {
            let set = extract_patches(&cube.band(b), plane, a.em.patch)?;
            if a.keep_means {
                Ok(set)
            } else {
                remove_means(&set)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = EmConfig {
        noise_variance: a.sigma * a.sigma,
        ..em_config(&a.em, seed)
    };
    let fit = train_em_bands(&bands, &cfg)?;
    let n = plane.pixels();
    let per_band: Vec<PatchWeights> = (0..bands.len())
        .map(|b| PatchWeights {
            beta: fit.weights.beta.columns(b * n, n).into_owned(),
        })
        .collect();
    write_gmm(&a.out, &fit.model, &average_beta_across_bands(&per_band)?)?;
    println!(
        "components {} iterations {} converged {} log-likelihood {:.6e}",
        fit.model.components(),
        fit.iterations,
        fit.converged,
        fit.log_likelihood_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(ExitCode::SUCCESS)
}

fn denoise(a: DenoiseArgs) -> Result<ExitCode> {
    let (band, g) = read_image(&a.input)?;
    let (model, weights) = read_gmm(&a.model)?;
    let sigma2 = a.sigma * a.sigma;
    let out = if a.varying {
        denoise_image_mmse(&band, g, &model, sigma2, a.mode.into())?
    } else {
        let den = LinearDenoiser::new(model, weights, sigma2, g, a.mode.into())?;
        denoise_image_fixed(&band, &den)?
    };
    write_image(&a.out, &out, g)?;
    Ok(ExitCode::SUCCESS)
}

fn sharpen_cmd(a: SharpenArgs, seed: u64) -> Result<ExitCode> {
    let mut scene = scene_dir::read_hs(&a.scene)?;
    if let Some(s) = a.sigma_m {
        scene.sigma_m = s;
    }
    let d = SharpenParams::default();
    let params = SharpenParams {
        subspace_dim: a.ls,
        patch_side: a.em.patch,
        em: em_config(&a.em, seed),
        solver: solver_config(&a.solver, (d.solver.tau, d.solver.rho, d.solver.lambda), a.report.is_some()),
        mode: a.solver.mode.into(),
    };
    let out = sharpen(&scene, &params)?;
    write_cube(&a.out, &out.z_hat)?;
    if let Some(p) = &a.report {
        write_report(p, &out.report)?;
    }
    print_solve(&out.report);
    if let Some(p) = &a.metrics {
        let truth = scene
            .truth
            .as_ref()
            .ok_or_else(|| Error::State("--metrics needs truth.cube in the scene directory".into()))?;
        let peak = default_peak(truth.as_slice());
        let m = MetricReport::compute(truth, &out.z_hat.data, peak, scene.decimation as f64)?;
        fs::write(p, m.to_csv())?;
        println!("mean psnr {:.3} dB ergas {:.4} sam {:.4} deg", m.mean_psnr_db, m.ergas, m.sam_degrees);
    }
    Ok(ExitCode::SUCCESS)
}

/// `(τ, ρ, λ)` from the noise levels: `τ = σ_b²`, `λ = σ_b²/σ_n²`, `ρ = τ/σ_n²`.
pub fn pair_defaults(sigma_b: f64, sigma_n: f64) -> (f64, f64, f64) {
    let sb = sigma_b.max(1e-3);
    let sn = sigma_n.max(sb);
    let tau = sb * sb;
    (tau, tau / (sn * sn), tau / (sn * sn))
}

fn load_pair(a: &DeblurPairArgs) -> Result<PairScene> {
    if let Some(dir) = &a.scene {
        let mut scene = scene_dir::read_pair(dir)?;
        if let Some(s) = a.sigma_n {
            scene.sigma_n = s;
        }
        if let Some(s) = a.sigma_b {
            scene.sigma_b = s;
        }
        return Ok(scene);
    }
    let missing = || Error::Config("give --scene or all of --blurred --noisy --psf --sigma-n".into());
    let (y_b, g) = read_image(a.blurred.as_ref().ok_or_else(missing)?)?;
    let (y_n, gn) = read_image(a.noisy.as_ref().ok_or_else(missing)?)?;
    if !g.same_grid(&gn) {
        return Err(Error::Dimension("blurred and noisy images differ in size".into()));
    }
    let psf = pnp_core::io::parse_psf(&pnp_core::io::read_to_string(a.psf.as_ref().ok_or_else(missing)?)?)?;
    let scene = PairScene {
        geometry: g,
        truth: None,
        y_b,
        y_n,
        blur: CyclicBlur::new(psf, g)?,
        sigma_b: a.sigma_b.unwrap_or(0.0),
        sigma_n: a.sigma_n.ok_or_else(missing)?,
    };
    scene.validate()?;
    Ok(scene)
}

fn pair_denoiser(
    scene: &PairScene,
    model: &GmmModel,
    weights: &PatchWeights,
    tau: f64,
    rho: f64,
    mode: MeanMode,
) -> Result<Option<LinearDenoiser>> {
    if tau > 0.0 {
        LinearDenoiser::new(model.clone(), weights.clone(), tau / rho, scene.geometry.with_bands(1), mode).map(Some)
    } else {
        Ok(None)
    }
}

fn deblur_pair_cmd(a: DeblurPairArgs, seed: u64) -> Result<ExitCode> {
    let scene = load_pair(&a)?;
    let solver = solver_config(&a.solver, pair_defaults(scene.sigma_b, scene.sigma_n), a.report.is_some());
    solver.validate()?;
    let (model, weights) = train_pair_prior(&scene, a.em.patch, &em_config(&a.em, seed))?;
    let den = pair_denoiser(&scene, &model, &weights, solver.tau, solver.rho, a.solver.mode.into())?;
    let (x, report) = solve_pair(&scene, den.as_ref(), &solver)?;
    write_image(&a.out, &x, scene.geometry)?;
    if let Some(p) = &a.report {
        write_report(p, &report)?;
    }
    print_solve(&report);
    if let Some(t) = &scene.truth {
        println!("psnr {:.3} dB", psnr(t, &x, default_peak(t))?);
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_scene(a: GenSceneArgs, seed: u64) -> Result<ExitCode> {
    match a.kind {
        SceneKind::Hs => {
            let spec = HsSceneSpec {
                height: a.height,
                width: a.width,
                hs_bands: a.hs_bands,
                ms_bands: a.ms_bands,
                true_rank: a.rank,
                decimation: a.decimation,
                snr_h_db: a.snr_h,
                snr_m_db: a.snr_m,
                low_snr_tail: (a.tail_bands > 0).then_some((a.tail_bands, a.tail_snr)),
                psf_size: a.psf_size,
                psf_sigma: a.psf_sigma,
                seed,
            };
            scene_dir::write_hs(&a.out, &generate_hs_scene(&spec)?)?;
        }
        SceneKind::Pair => {
            let spec = PairSceneSpec {
                height: a.height,
                width: a.width,
                kernel: a.kernel.clone(),
                sigma_n: a.sigma_n / 255.0,
                sigma_b: a.sigma_b / 255.0,
                seed,
            };
            scene_dir::write_pair(&a.out, &generate_pair_scene(&spec)?, &a.kernel)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn metrics(a: MetricsArgs) -> Result<ExitCode> {
    let r = load_cube(&a.reference)?;
    let e = load_cube(&a.estimate)?;
    if r.geometry != e.geometry {
        return Err(Error::Dimension(format!(
            "{} is {:?}, {} is {:?}",
            a.reference.display(),
            r.geometry,
            a.estimate.display(),
            e.geometry
        )));
    }
    let peak = a.peak.unwrap_or_else(|| default_peak(r.data.as_slice()));
    let csv = MetricReport::compute(&r.data, &e.data, peak, a.ratio)?.to_csv();
    match &a.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_prox(a: VerifyProxArgs, seed: u64) -> Result<ExitCode> {
    let checks = verify::run(&verify::Settings {
        pixels: a.n,
        patch: a.patch,
        components: a.k,
        noise_variance: a.sigma2,
        models: a.models,
        seed,
    })?;
    verify::print_table(&checks);
    Ok(if checks.iter().all(|c| c.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn time_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let t = Instant::now();
    for _ in 0..reps {
        f()?;
    }
    Ok(t.elapsed().as_secs_f64() * 1e3 / reps as f64)
}

#[cfg(feature = "parallel")]
fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::State(e.to_string()))?;
    Ok(pool.install(f))
}

#[cfg(feature = "parallel")]
fn available_threads() -> usize {
    rayon::current_num_threads()
}

#[cfg(not(feature = "parallel"))]
fn in_pool<T: Send>(_threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    Ok(f())
}

#[cfg(not(feature = "parallel"))]
fn available_threads() -> usize {
    1
}

fn bench(a: BenchArgs, seed: u64) -> Result<ExitCode> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (side, k) = (8, 20);
    let np = side * side;
    let g = ImageGeometry::plane(a.size, a.size)?;
    let n = g.pixels();
    let covs = (0..k)
        .map(|_| {
            let m = DMatrix::from_fn(np, np, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            &m * m.transpose() / np as f64
        })
        .collect();
    let model = GmmModel::new(vec![1.0 / k as f64; k], covs, side)?;
    let weights = PatchWeights {
        beta: DMatrix::from_element(k, n, 1.0 / k as f64),
    };
    let den = LinearDenoiser::new(model.clone(), weights, 0.01, g, MeanMode::Practical)?;
    let img: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let patches = extract_patches(&img, g, side)?;
    let bands = 8;
    let cube = DMatrix::from_fn(bands, n, |_, _| rng.gen::<f64>());
    let blur = CyclicBlur::new(gaussian_psf(5, 1.0), g)?;

    type Work<'a> = (String, Box<dyn Fn() -> Result<()> + Sync + 'a>);
    let work: Vec<Work> = vec![
        (
            format!("denoise {0}x{0} K={k} {side}x{side}", a.size),
            Box::new(|| denoise_image_fixed(&img, &den).map(|_| ())),
        ),
        (
            format!("e-step {n} patches K={k}"),
            Box::new(|| e_step_rows(&patches.patches, np, &model, 0.01).map(|_| ())),
        ),
        (
            format!("blur {bands} bands {0}x{0}", a.size),
            Box::new(|| blur_rows(&cube, &blur, false).map(|_| ())),
        ),
    ];
    let all = available_threads();
    println!("{:<32} {:>12} {:>12} {:>8}", "workload", "1 thread ms", format!("{all} threads ms"), "speedup");
    for (name, f) in &work {
        let one = in_pool(1, || time_ms(a.reps, f))??;
        let many = in_pool(all, || time_ms(a.reps, f))??;
        println!("{name:<32} {one:>12.3} {many:>12.3} {:>8.2}", one / many);
    }
    Ok(ExitCode::SUCCESS)
}

fn grid_search(a: GridSearchArgs, seed: u64) -> Result<ExitCode> {
    let scene = scene_dir::read_pair(&a.scene)?;
    let truth = scene
        .truth
        .clone()
        .ok_or_else(|| Error::State("grid search needs truth.cube in the scene directory".into()))?;
    let (t0, r0, l0) = pair_defaults(scene.sigma_b, scene.sigma_n);
    let scaled = |v: f64, f: &[f64]| f.iter().map(|s| v * s).collect::<Vec<_>>();
    let taus = a.taus.clone().unwrap_or_else(|| scaled(t0, &[0.25, 1.0, 4.0]));
    let rhos = a.rhos.clone().unwrap_or_else(|| scaled(r0, &[0.25, 1.0, 4.0]));
    let lambdas = a.lambdas.clone().unwrap_or_else(|| scaled(l0, &[0.5, 1.0, 2.0]));
    let (model, weights) = train_pair_prior(&scene, a.em.patch, &em_config(&a.em, seed))?;
    let peak = default_peak(&truth);
    let mut csv = String::from("tau,rho,lambda,psnr_db,iterations\n");
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for &tau in &taus {
        for &rho in &rhos {
            let den = pair_denoiser(&scene, &model, &weights, tau, rho, MeanMode::Practical)?;
            for &lambda in &lambdas {
                let solver = SolverConfig {
                    tau,
                    rho,
                    lambda,
                    max_iters: a.max_iters,
                    ..SolverConfig::default()
                };
                let (x, report) = solve_pair(&scene, den.as_ref(), &solver)?;
                let p = psnr(&truth, &x, peak)?;
                csv.push_str(&format!("{tau},{rho},{lambda},{p},{}\n", report.iterations_run));
                if best.is_none_or(|b| p > b.3) {
                    best = Some((tau, rho, lambda, p));
                }
            }
        }
    }
    match &a.out {
        Some(path) => {
            fs::write(path, &csv)?;
            if let Some((t, r, l, p)) = best {
                println!("best tau {t} rho {r} lambda {l} psnr {p:.3} dB");
            }
        }
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}
