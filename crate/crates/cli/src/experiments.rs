//! The four studies.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use weakform_core::fem::{apply_dirichlet, assemble_mass, interpolation_matrix, solve_forward, ForwardProblem};
use weakform_core::hmc::{run_hmc, write_chain_csv, HmcConfig, Posterior};
use weakform_core::linalg::{factorize, FactorKind, Factorization};
use weakform_core::mesh::{node_adjacency, Adjacency, TriMesh};
use weakform_core::relax::{
    build_tapered_precision, local_term_from_residual, patch_shape, residual_quadratic_form, sample_centers,
    sample_perturbation, PatchSampling, TaperedPrecision,
};
use weakform_core::surrogate::{Activation, InputSpec, Mlp, NoiseModel};
use weakform_core::vi::{
    write_trace_csv, AdamConfig, EpsilonSchedule, GaussianVariational, Observations, Penalty, TrainConfig, Trainer,
    VariationalModel,
};

use crate::data::{derive_seed, rng, simulate_observations, transport_problem, SigmaSpec, Simulated};
use crate::output::{ResultRow, RunOutput, SeedRecord, TimingRow};
use crate::{CliError, Experiment, ExperimentConfig};

const TAG_CENTERS: u64 = 1;
const TAG_DATA: u64 = 2;
const TAG_HMC: u64 = 3;
const TAG_INIT: u64 = 4;
const TAG_TRAIN: u64 = 5;
const TAG_PRED: u64 = 6;
const TAG_PERTURB: u64 = 7;

/// Interior nodes drawn uniformly with replacement.
pub fn interior_centers<R: Rng + ?Sized>(mesh: &TriMesh, count: usize, rng: &mut R) -> Vec<usize> {
    let interior = mesh.interior_nodes();
    (0..count).map(|_| interior[rng.random_range(0..interior.len())]).collect()
}

/// Mean node count of the mini-patches at `centers`.
pub fn mean_patch_nodes(mesh: &TriMesh, adj: &Adjacency, rho: f64, centers: &[usize]) -> f64 {
    centers
        .iter()
        .map(|&i| patch_shape(mesh, adj, rho, i).nodes.len() as f64)
        .sum::<f64>()
        / centers.len() as f64
}

/// Bisection on `ρ` for the mean mini-patch node count closest to `target`.
/// Returns `(ρ, achieved mean)`.
pub fn calibrate_radius(mesh: &TriMesh, adj: &Adjacency, target: usize, centers: &[usize]) -> Result<(f64, f64), CliError> {
    let target = target as f64;
    let saturated = mesh.diameter() + mesh.h();
    let top = mean_patch_nodes(mesh, adj, saturated, centers);
    if target > mesh.n_nodes() as f64 {
        return Err(CliError::Config(format!(
            "patch size target {target} exceeds the {} mesh nodes",
            mesh.n_nodes()
        )));
    }
    if target >= top {
        return Ok((saturated, top));
    }
    let mut lo = 0.5 * mesh.h();
    let bottom = mean_patch_nodes(mesh, adj, lo, centers);
    if target <= bottom {
        return if bottom <= 1.1 * target {
            Ok((lo, bottom))
        } else {
            Err(CliError::Config(format!(
                "patch size target {target} is below the minimal patch size {bottom:.1}"
            )))
        };
    }
    let mut hi = saturated;
    let (mut f_lo, mut f_hi) = (bottom, top);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let f = mean_patch_nodes(mesh, adj, mid, centers);
        if f < target {
            lo = mid;
            f_lo = f;
        } else {
            hi = mid;
            f_hi = f;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    let (rho, achieved) = if (f_hi - target).abs() <= (target - f_lo).abs() {
        (hi, f_hi)
    } else {
        (lo, f_lo)
    };
    // Patch sizes move in steps, so a target can fall between two plateaus. The
    // nearest plateau is used and the achieved size is reported with the results.
    Ok((rho, achieved))
}

fn sigma_spec(cfg: &ExperimentConfig) -> SigmaSpec {
    cfg.sigma_obs
        .map_or(SigmaSpec::FractionOfRange(cfg.noise_fraction), SigmaSpec::Absolute)
}

fn seed_record(out: &mut RunOutput, purpose: String, replicate: usize, seed: u64) -> u64 {
    out.seeds.push(SeedRecord {
        purpose,
        replicate,
        seed,
    });
    seed
}

fn timing(out: &mut RunOutput, method: &str, mesh_n: usize, replicate: usize, phase: &str, secs: f64) {
    out.timings.push(TimingRow {
        method: method.into(),
        mesh_n,
        replicate,
        phase: phase.into(),
        wall_clock_seconds: secs,
    });
}

fn mae(pred: &[f64], obs: &Observations) -> f64 {
    pred.iter().zip(&obs.values).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len() as f64
}

/// A calibrated taper shared by all replicates on one mesh.
struct Taper {
    label: String,
    rho: f64,
    gamma: TaperedPrecision,
}

fn prepare_tapers(
    cfg: &ExperimentConfig,
    n: usize,
    problem: &ForwardProblem,
    targets: &[usize],
    out: &mut RunOutput,
) -> Result<Vec<Taper>, CliError> {
    let mesh = problem.mesh();
    let t0 = Instant::now();
    let adj = node_adjacency(mesh);
    let seed = seed_record(out, format!("patch_centers_n{n}"), 0, derive_seed(cfg.seed, &[TAG_CENTERS, n as u64]));
    let centers = interior_centers(mesh, cfg.coverage_centers.max(1), &mut rng(seed));
    let mut radii = Vec::with_capacity(targets.len());
    for &q in targets {
        let (rho, achieved) = calibrate_radius(mesh, &adj, q, &centers)?;
        let label = format!("cvi_{q}");
        out.rows.push(ResultRow::new(&label, n, "rho", rho, 0));
        out.rows.push(ResultRow::new(&label, n, "patch_nodes", achieved, 0));
        radii.push((label, rho));
    }
    let a_fact = factorize(&problem.constrained_stiffness()?, FactorKind::Cholesky)?;
    let rho_max = radii.iter().map(|r| r.1).fold(0.0, f64::max);
    let widest = build_tapered_precision(&a_fact, mesh, rho_max)?;
    let tapers = radii
        .into_iter()
        .map(|(label, rho)| {
            let gamma = if rho == rho_max { widest.clone() } else { widest.restrict(mesh, rho)? };
            Ok(Taper { label, rho, gamma })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    timing(out, "cvi", n, 0, "taper", t0.elapsed().as_secs_f64());
    Ok(tapers)
}

fn train_config(cfg: &ExperimentConfig, penalty: Penalty) -> TrainConfig {
    TrainConfig {
        iterations: cfg.iterations,
        samples: cfg.latent_samples,
        penalty,
        schedule: EpsilonSchedule {
            start: cfg.eps_start,
            end: cfg.eps_end,
            period: cfg.eps_period,
            cyclic: cfg.cyclic,
        },
        adam: AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
        learn_noise: true,
    }
}

fn initial_model(cfg: &ExperimentConfig, data: &Observations, seed: u64) -> Result<VariationalModel, CliError> {
    let act = Activation::parse(&cfg.activation).ok_or_else(|| CliError::Config("activation".into()))?;
    let mut widths = vec![4];
    widths.extend(&cfg.hidden);
    widths.push(1);
    let scale = cfg
        .output_scale
        .unwrap_or_else(|| data.values.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    Ok(VariationalModel {
        q: GaussianVariational::standard(2),
        mlp: Mlp::init(&widths, act, &mut rng(seed))?.with_output_scale(scale),
        noise: NoiseModel::new(1.0),
        input: InputSpec::CoordinatesAndLatent,
    })
}

/// Trains one surrogate and reports accuracy rows.
#[allow(clippy::too_many_arguments)]
fn train_and_score(
    cfg: &ExperimentConfig,
    problem: &ForwardProblem,
    sim: &Simulated,
    gamma: Option<&TaperedPrecision>,
    penalty: Penalty,
    label: &str,
    n: usize,
    r: usize,
    tag: u64,
    out: &mut RunOutput,
) -> Result<(), CliError> {
    let tags = [n as u64, r as u64, tag];
    let init_seed = seed_record(out, format!("{label}_init_n{n}"), r, derive_seed(cfg.seed, &[&[TAG_INIT][..], &tags].concat()));
    let train_seed = seed_record(out, format!("{label}_train_n{n}"), r, derive_seed(cfg.seed, &[&[TAG_TRAIN][..], &tags].concat()));
    let pred_seed = seed_record(out, format!("{label}_predict_n{n}"), r, derive_seed(cfg.seed, &[&[TAG_PRED][..], &tags].concat()));
    let mut model = initial_model(cfg, &sim.train, init_seed)?;
    let mut trainer = Trainer::new(problem, &sim.train, gamma, train_config(cfg, penalty))?;
    let t0 = Instant::now();
    trainer.prebuild_patches()?;
    timing(out, label, n, r, "prebuild", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let trace = trainer.train(&mut model, &mut rng(train_seed))?;
    let train_secs = t0.elapsed().as_secs_f64();
    timing(out, label, n, r, "train", train_secs);
    if cfg.iterations > 0 {
        timing(out, label, n, r, "per_step", train_secs / cfg.iterations as f64);
    }
    let pred = model.predictive_mean(problem, &sim.validation.points, cfg.predictive_samples, &mut rng(pred_seed))?;
    out.rows.push(ResultRow::new(label, n, "mae", mae(&pred, &sim.validation), r));
    let sd = model.q.marginal_sd();
    for j in 0..2 {
        out.rows.push(ResultRow::new(label, n, format!("tau{}_mean", j + 1), model.q.mean[j], r));
        out.rows.push(ResultRow::new(label, n, format!("tau{}_sd", j + 1), sd[j], r));
    }
    out.rows.push(ResultRow::new(label, n, "sigma", model.noise.sigma(), r));
    if cfg.write_traces {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &trace)?;
        out.artifacts.push((format!("trace_{label}_n{n}_r{r}.csv"), String::from_utf8(buf).expect("utf-8")));
    }
    Ok(())
}

fn simulate(cfg: &ExperimentConfig, experiment: Experiment, n: usize, r: usize, out: &mut RunOutput) -> Result<Simulated, CliError> {
    let seed = seed_record(out, format!("data_n{n}"), r, derive_seed(cfg.seed, &[TAG_DATA, n as u64, r as u64]));
    let sim = simulate_observations(
        n,
        &cfg.true_z,
        cfg.diffusion,
        cfg.source_for(experiment),
        cfg.sensor_count,
        cfg.validation_count,
        sigma_spec(cfg),
        &mut rng(seed),
    )?;
    out.rows.push(ResultRow::new("data", n, "sigma_obs", sim.sigma_obs, r));
    Ok(sim)
}

fn hmc_replicate(
    cfg: &ExperimentConfig,
    problem: &ForwardProblem,
    sim: &Simulated,
    n: usize,
    r: usize,
    out: &mut RunOutput,
) -> Result<(), CliError> {
    let seed = seed_record(out, format!("hmc_n{n}"), r, derive_seed(cfg.seed, &[TAG_HMC, n as u64, r as u64]));
    let post = Posterior::new(problem, &sim.train, NoiseModel::new(sim.sigma_obs))?;
    let hc = HmcConfig {
        n_samples: cfg.hmc_samples,
        n_burn: cfg.hmc_burnin,
        n_leapfrog: cfg.hmc_leapfrog,
        initial_step: cfg.hmc_step_size,
        target_accept: 0.8,
    };
    let t0 = Instant::now();
    let chain = run_hmc(&post, &[0.0, 0.0], &hc, &mut rng(seed))?;
    let secs = t0.elapsed().as_secs_f64();
    timing(out, "hmc", n, r, "sample", secs);
    let grads = (hc.n_burn + hc.n_samples) * hc.n_leapfrog + 1;
    timing(out, "hmc", n, r, "per_gradient", secs / grads as f64);

    let w = interpolation_matrix(problem.mesh(), &sim.validation.points)?;
    let k = cfg.predictive_samples.min(chain.draws.len());
    let mut pred = vec![0.0; sim.validation.len()];
    for s in 0..k {
        let z = &chain.draws[s * chain.draws.len() / k];
        let v = w.spmv(&post.field(z)?)?;
        pred.iter_mut().zip(&v).for_each(|(p, x)| *p += x / k as f64);
    }
    out.rows.push(ResultRow::new("hmc", n, "mae", mae(&pred, &sim.validation), r));
    let (m, sd) = (chain.mean(), chain.sd());
    for j in 0..2 {
        out.rows.push(ResultRow::new("hmc", n, format!("tau{}_mean", j + 1), m[j], r));
        out.rows.push(ResultRow::new("hmc", n, format!("tau{}_sd", j + 1), sd[j], r));
    }
    out.rows.push(ResultRow::new("hmc", n, "acceptance", chain.acceptance_rate(), r));
    out.rows.push(ResultRow::new("hmc", n, "step_size", chain.step_size, r));
    if cfg.write_traces {
        let mut buf = Vec::new();
        write_chain_csv(&mut buf, &chain)?;
        out.artifacts.push((format!("chain_hmc_n{n}_r{r}.csv"), String::from_utf8(buf).expect("utf-8")));
    }
    Ok(())
}

fn per_replicate<F>(cfg: &ExperimentConfig, f: F) -> Result<RunOutput, CliError>
where
    F: Fn(usize) -> Result<RunOutput, CliError> + Sync + Send,
{
    let parts: Vec<Result<RunOutput, CliError>> = (0..cfg.replicates).into_par_iter().map(f).collect();
    let mut out = RunOutput::default();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// HMC and CVI at each patch-size target, per mesh and replicate.
pub fn run_transport_bip(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::default();
    let exp = Experiment::TransportBip;
    for &n in &cfg.mesh_n {
        let problem = transport_problem(n, cfg.diffusion, cfg.source_for(exp))?;
        let tapers = prepare_tapers(cfg, n, &problem, &cfg.q_int, &mut out)?;
        let reps = per_replicate(cfg, |r| {
            let mut o = RunOutput::default();
            let sim = simulate(cfg, exp, n, r, &mut o)?;
            if n <= cfg.hmc_max_mesh_n {
                hmc_replicate(cfg, &problem, &sim, n, r, &mut o)?;
            }
            for (k, t) in tapers.iter().enumerate() {
                let penalty = Penalty::WeakForm(cfg.patch_sampling());
                train_and_score(cfg, &problem, &sim, Some(&t.gamma), penalty, &t.label, n, r, k as u64, &mut o)?;
                o.rows.push(ResultRow::new(&t.label, n, "rho", t.rho, r));
            }
            Ok(o)
        })?;
        out.extend(reps);
    }
    Ok(out)
}

/// Weak-form mini-patch penalty against the pointwise collocation penalty on the same data.
pub fn run_pointwise_compare(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::default();
    let exp = Experiment::PointwiseCompare;
    for &n in &cfg.mesh_n {
        let problem = transport_problem(n, cfg.diffusion, cfg.source_for(exp))?;
        let tapers = prepare_tapers(cfg, n, &problem, &cfg.q_int[..1], &mut out)?;
        let gamma = &tapers[0].gamma;
        let reps = per_replicate(cfg, |r| {
            let mut o = RunOutput::default();
            let sim = simulate(cfg, exp, n, r, &mut o)?;
            let weak = Penalty::WeakForm(cfg.patch_sampling());
            train_and_score(cfg, &problem, &sim, Some(gamma), weak, "weak_form", n, r, 0, &mut o)?;
            let point = Penalty::Pointwise {
                n_int: cfg.collocation_interior,
                n_bnd: cfg.collocation_boundary,
            };
            train_and_score(cfg, &problem, &sim, None, point, "pointwise", n, r, 0, &mut o)?;
            Ok(o)
        })?;
        out.extend(reps);
    }
    Ok(out)
}

/// Tapered mini-patch estimate against the full dual norm of a perturbed solution's residual.
///
/// `abs_error` compares both norms on the same sampled centers; `abs_error_full` compares
/// the sampled tapered estimate with the exact `RᵀA⁻¹R` and also carries the sampling noise.
pub fn run_taper_study(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::default();
    let exp = Experiment::TaperStudy;
    let z = cfg.true_z.clone();
    let mut radii = cfg.rho.clone();
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    for &n in &cfg.mesh_n {
        let t0 = Instant::now();
        let problem = transport_problem(n, cfg.diffusion, cfg.source_for(exp))?;
        let mesh = problem.mesh();
        let nn = mesh.n_nodes();
        let a_fact = factorize(&problem.constrained_stiffness()?, FactorKind::Cholesky)?;
        let widest = build_tapered_precision(&a_fact, mesh, *radii.last().expect("validated"))?;
        let mut gammas: Vec<TaperedPrecision> = Vec::with_capacity(radii.len());
        for (k, &rho) in radii.iter().enumerate().rev() {
            let g = if k + 1 == radii.len() { widest.clone() } else { gammas.last().expect("wider taper").restrict(mesh, rho)? };
            gammas.push(g);
        }
        gammas.reverse();
        let l = problem.operator(&z)?;
        let b = problem.load(&z)?;
        let mass = assemble_mass(mesh)?;
        timing(&mut out, "taper", n, 0, "setup", t0.elapsed().as_secs_f64());

        let t0 = Instant::now();
        for (ei, &eps) in cfg.epsilon.iter().enumerate() {
            for d in 0..cfg.perturbation_draws {
                let seed = seed_record(
                    &mut out,
                    format!("perturbation_n{n}_eps{eps:?}"),
                    d,
                    derive_seed(cfg.seed, &[TAG_PERTURB, n as u64, ei as u64, d as u64]),
                );
                let mut g = rng(seed);
                let residual = perturbed_residual(&problem, &a_fact, &l, &b, &mass, &z, eps, &mut g)?;
                let x = a_fact.solve(&residual)?;
                let full_terms: Vec<f64> = residual.iter().zip(&x).map(|(r, x)| r * x).collect();
                let r_a = residual_quadratic_form(&residual, &a_fact)?;
                out.rows.push(ResultRow::new("target", n, "r_A", r_a, d).with_epsilon(eps));
                let mut schemes: Vec<(String, Vec<usize>)> = cfg
                    .patch_counts
                    .iter()
                    .map(|&p| (format!("P={p}"), sample_centers(nn, PatchSampling::Uniform(p), &mut g)))
                    .collect();
                schemes.push(("stratified".into(), sample_centers(nn, PatchSampling::Stratified, &mut g)));
                for (rho, gamma) in radii.iter().zip(&gammas) {
                    for (label, centers) in &schemes {
                        // Same centers for both norms, so the taper is the only difference.
                        let (mut diff, mut sum) = (0.0, 0.0);
                        for &i in centers {
                            let t = local_term_from_residual(i, &residual, gamma);
                            diff += full_terms[i] - t;
                            sum += t;
                        }
                        let scale = nn as f64 / centers.len() as f64;
                        out.rows.push(
                            ResultRow::new(label, n, "abs_error", (scale * diff).abs(), d)
                                .with_epsilon(eps)
                                .with_rho(*rho),
                        );
                        out.rows.push(
                            ResultRow::new(label, n, "abs_error_full", (r_a - scale * sum).abs(), d)
                                .with_epsilon(eps)
                                .with_rho(*rho),
                        );
                    }
                }
            }
        }
        timing(&mut out, "taper", n, 0, "study", t0.elapsed().as_secs_f64());
    }
    Ok(out)
}

/// `L u_ε − b` where `u_ε` solves the problem with load `b + M w`, `w ~ N(0, ε² A)` and
/// zero on the boundary.
#[allow(clippy::too_many_arguments)]
pub fn perturbed_residual<R: Rng + ?Sized>(
    problem: &ForwardProblem,
    a_fact: &Factorization,
    l: &weakform_core::linalg::CsrMatrix,
    b: &[f64],
    mass: &weakform_core::linalg::CsrMatrix,
    z: &[f64],
    eps: f64,
    rng: &mut R,
) -> Result<Vec<f64>, CliError> {
    let mesh = problem.mesh();
    let mut w = sample_perturbation(a_fact, eps, rng)?.w;
    for (i, wi) in w.iter_mut().enumerate() {
        if mesh.is_boundary(i) {
            *wi = 0.0;
        }
    }
    let mw = mass.spmv(&w)?;
    let f: Vec<f64> = b.iter().zip(&mw).map(|(bi, mi)| bi + mi).collect();
    let (lc, fc) = apply_dirichlet(l, &f, mesh, problem.boundary_values())?;
    let u = solve_forward(&lc, &fc)?;
    Ok(problem.residual(z, &u)?)
}

/// Mean fraction of elements inside a mini-patch, per radius.
pub fn run_coverage_curve(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::default();
    for &n in &cfg.mesh_n {
        let t0 = Instant::now();
        let mesh = weakform_core::mesh::structured_unit_square(n)?;
        let adj = node_adjacency(&mesh);
        let seed = seed_record(&mut out, format!("coverage_centers_n{n}"), 0, derive_seed(cfg.seed, &[TAG_CENTERS, n as u64]));
        let centers = interior_centers(&mesh, cfg.coverage_centers, &mut rng(seed));
        let ne = mesh.n_elements() as f64;
        let mut radii = cfg.rho.clone();
        radii.sort_by(f64::total_cmp);
        for rho in radii {
            let (mut frac, mut nodes) = (0.0, 0.0);
            for &i in &centers {
                let s = patch_shape(&mesh, &adj, rho, i);
                frac += s.active_elements.len() as f64 / ne;
                nodes += s.nodes.len() as f64;
            }
            let k = centers.len() as f64;
            out.rows.push(ResultRow::new("coverage", n, "element_fraction", frac / k, 0).with_rho(rho));
            out.rows.push(ResultRow::new("coverage", n, "patch_nodes", nodes / k, 0).with_rho(rho));
        }
        timing(&mut out, "coverage", n, 0, "curve", t0.elapsed().as_secs_f64());
    }
    Ok(out)
}
