use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use weakform_core::fem::{interpolation_matrix, ForwardProblem, LatentMap, OperatorFamily, ProblemSpec, ScalarField};
use weakform_core::hmc::{leapfrog, run_hmc, HmcConfig, Posterior};
use weakform_core::mesh::{structured_unit_square, TriMesh};
use weakform_core::surrogate::NoiseModel;
use weakform_core::vi::Observations;

fn problem(family: OperatorFamily, latent: LatentMap, n: usize) -> ForwardProblem {
    let spec = ProblemSpec {
        source: ScalarField::function(|x| 1.0 + x[0]),
        boundary: ScalarField::function(|x| 0.2 * x[1]),
        family,
    };
    ForwardProblem::new(structured_unit_square(n).unwrap(), spec, latent).unwrap()
}

fn obs() -> Observations {
    Observations {
        points: vec![[0.3, 0.3], [0.7, 0.4], [0.45, 0.8], [0.2, 0.6]],
        values: vec![0.05, 0.08, 0.2, 0.1],
    }
}

fn check_grad(p: &ForwardProblem, z: &[f64]) {
    let post = Posterior::new(p, &obs(), NoiseModel::new(0.05)).unwrap();
    let (lp, g) = post.log_posterior_and_grad(z).unwrap();
    assert!((lp - post.log_posterior(z).unwrap()).abs() < 1e-10 * lp.abs().max(1.0));
    for j in 0..z.len() {
        let h = 1e-6;
        let mut zp = z.to_vec();
        zp[j] += h;
        let fp = post.log_posterior(&zp).unwrap();
        zp[j] -= 2.0 * h;
        let fm = post.log_posterior(&zp).unwrap();
        let fd = (fp - fm) / (2.0 * h);
        assert!((fd - g[j]).abs() <= 1e-5 * (1.0 + fd.abs()), "component {j}: fd {fd} adjoint {}", g[j]);
    }
}

#[test]
fn adjoint_gradient_transport() {
    check_grad(&problem(OperatorFamily::DiffusionTransport, LatentMap::FixedDiffusion(0.3), 6), &[0.7, -0.4]);
}

#[test]
fn adjoint_gradient_direct_transport() {
    check_grad(&problem(OperatorFamily::DiffusionTransport, LatentMap::Direct, 5), &[0.6, 0.2, 1.1]);
}

#[test]
fn adjoint_gradient_source_scale() {
    check_grad(&problem(OperatorFamily::Poisson, LatentMap::SourceScale, 6), &[1.3]);
}

#[test]
fn adjoint_gradient_nodal_log() {
    let p = problem(OperatorFamily::NodalLogDiffusionTransport, LatentMap::Direct, 3);
    let d = p.latent_dim();
    let z: Vec<f64> = (0..d).map(|i| 0.1 * ((i * 7) % 5) as f64 - 0.2).collect();
    check_grad(&p, &z);
}

/// Linear-Gaussian case: u(z) = u_g + z·u_0, so the posterior over z is Gaussian.
#[test]
fn hmc_recovers_conjugate_posterior() {
    let spec = ProblemSpec {
        source: ScalarField::Constant(1.0),
        boundary: ScalarField::Constant(0.0),
        family: OperatorFamily::Poisson,
    };
    let p = ForwardProblem::new(structured_unit_square(8).unwrap(), spec, LatentMap::SourceScale).unwrap();
    let sigma = 0.02;
    let data = Observations {
        points: vec![[0.5, 0.5], [0.3, 0.6], [0.7, 0.2]],
        values: vec![0.09, 0.07, 0.05],
    };
    let u0 = p.solve(&[1.0]).unwrap();
    let w = interpolation_matrix(p.mesh(), &data.points).unwrap();
    let wu = w.spmv(&u0).unwrap();
    let prec = 1.0 + wu.iter().map(|a| a * a).sum::<f64>() / (sigma * sigma);
    let mean = wu.iter().zip(&data.values).map(|(a, y)| a * y).sum::<f64>() / (sigma * sigma) / prec;
    let sd = prec.sqrt().recip();

    let post = Posterior::new(&p, &data, NoiseModel::new(sigma)).unwrap();
    let cfg = HmcConfig {
        n_samples: 4000,
        n_burn: 500,
        n_leapfrog: 8,
        initial_step: 0.05,
        target_accept: 0.8,
    };
    let chain = run_hmc(&post, &[0.0], &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (m, s) = (chain.mean()[0], chain.sd()[0]);
    assert!((m - mean).abs() < 0.1 * sd, "mean {m} vs {mean}");
    assert!((s / sd - 1.0).abs() < 0.1, "sd {s} vs {sd}");
    assert!(chain.acceptance_rate() > 0.5);
}

fn prior_only(p: &ForwardProblem) -> Posterior<'_> {
    Posterior::new(p, &Observations::default(), NoiseModel::new(1.0)).unwrap()
}

#[test]
fn prior_only_gradient_is_minus_z() {
    let p = problem(OperatorFamily::DiffusionTransport, LatentMap::FixedDiffusion(1.0), 4);
    let post = prior_only(&p);
    let (_, g) = post.log_posterior_and_grad(&[0.4, -1.3]).unwrap();
    assert!((g[0] + 0.4).abs() < 1e-14 && (g[1] - 1.3).abs() < 1e-14);
}

#[test]
fn hmc_recovers_standard_normal_prior() {
    let p = problem(OperatorFamily::DiffusionTransport, LatentMap::FixedDiffusion(1.0), 3);
    let post = prior_only(&p);
    // Ten steps at the adapted size wrap the harmonic oscillator almost exactly
    // back on itself, so the chain barely moves. Three steps do not resonate.
    let cfg = HmcConfig {
        n_samples: 5000,
        n_burn: 500,
        n_leapfrog: 3,
        ..HmcConfig::default()
    };
    let chain = run_hmc(&post, &[0.5, -0.5], &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let n = chain.draws.len() as f64;
    // Batch means absorb the residual autocorrelation.
    let batches = 50;
    let per = chain.draws.len() / batches;
    for j in 0..2 {
        let m = chain.mean()[j];
        let bm: Vec<f64> = (0..batches)
            .map(|b| chain.draws[b * per..(b + 1) * per].iter().map(|d| d[j]).sum::<f64>() / per as f64)
            .collect();
        let var_b = bm.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
        let se = (var_b / batches as f64).sqrt();
        assert!(m.abs() < 4.0 * se, "component {j}: mean {m}, se {se}");
    }
    let mean = chain.mean();
    let mut cov = [[0.0; 2]; 2];
    for d in &chain.draws {
        for a in 0..2 {
            for b in 0..2 {
                cov[a][b] += (d[a] - mean[a]) * (d[b] - mean[b]) / n;
            }
        }
    }
    for a in 0..2 {
        for b in 0..2 {
            let target = if a == b { 1.0 } else { 0.0 };
            assert!((cov[a][b] - target).abs() < 0.1, "cov[{a}][{b}] = {}", cov[a][b]);
        }
    }
}

#[test]
fn tiny_steps_are_always_accepted() {
    let p = problem(OperatorFamily::DiffusionTransport, LatentMap::FixedDiffusion(1.0), 4);
    let post = Posterior::new(&p, &obs(), NoiseModel::new(0.05)).unwrap();
    let cfg = HmcConfig {
        n_samples: 200,
        n_burn: 0,
        n_leapfrog: 1,
        initial_step: 1e-5,
        target_accept: 0.8,
    };
    let chain = run_hmc(&post, &[0.3, 0.2], &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(chain.acceptance_rate(), 1.0);
}

#[test]
fn leapfrog_is_reversible() {
    let p = problem(OperatorFamily::DiffusionTransport, LatentMap::FixedDiffusion(1.0), 5);
    let post = Posterior::new(&p, &obs(), NoiseModel::new(0.05)).unwrap();
    let z0 = [0.6, -0.2];
    let (_, g0) = post.log_posterior_and_grad(&z0).unwrap();
    let (z1, p1, _, g1) = leapfrog(&post, &z0, &g0, &[0.7, 1.1], 0.01, 15).unwrap();
    let back: Vec<f64> = p1.iter().map(|x| -x).collect();
    let (z2, p2, _, _) = leapfrog(&post, &z1, &g1, &back, 0.01, 15).unwrap();
    for j in 0..2 {
        assert!((z2[j] - z0[j]).abs() < 1e-10);
    }
    assert!((p2[0] + 0.7).abs() < 1e-10 && (p2[1] + 1.1).abs() < 1e-10);
}

#[test]
fn energy_error_is_second_order() {
    let p = problem(OperatorFamily::DiffusionTransport, LatentMap::FixedDiffusion(1.0), 5);
    let post = Posterior::new(&p, &obs(), NoiseModel::new(0.05)).unwrap();
    let z0 = [0.6, -0.2];
    let (lp0, g0) = post.log_posterior_and_grad(&z0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let median_error = |eps: f64, steps: usize, rng: &mut ChaCha8Rng| {
        let mut errs: Vec<f64> = (0..41)
            .map(|_| {
                let p0: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
                let h0 = -lp0 + 0.5 * p0.iter().map(|x| x * x).sum::<f64>();
                let (_, p1, lp1, _) = leapfrog(&post, &z0, &g0, &p0, eps, steps).unwrap();
                (-lp1 + 0.5 * p1.iter().map(|x| x * x).sum::<f64>() - h0).abs()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        errs[20]
    };
    // Same trajectory length and momenta at both step sizes.
    let coarse = median_error(0.004, 10, &mut rng.clone());
    let fine = median_error(0.002, 20, &mut rng);
    let ratio = coarse / fine;
    assert!((2.8..=5.2).contains(&ratio), "ratio {ratio}");
}

/// Reflecting the whole problem in y ↦ 1 − y maps τ₂ to −τ₂.
#[test]
fn mirrored_problem_flips_tau2_gradient() {
    let spec = || ProblemSpec {
        source: ScalarField::Constant(5.0),
        boundary: ScalarField::Constant(0.0),
        family: OperatorFamily::DiffusionTransport,
    };
    let mesh = structured_unit_square(6).unwrap();
    let mirror = |x: [f64; 2]| [x[0], 1.0 - x[1]];
    let nodes: Vec<[f64; 2]> = mesh.nodes().iter().map(|&x| mirror(x)).collect();
    let elements: Vec<[usize; 3]> = mesh.elements().iter().map(|e| [e[0], e[2], e[1]]).collect();
    let mirrored = TriMesh::from_parts(nodes, elements, mesh.boundary_mask().to_vec()).unwrap();
    let p = ForwardProblem::new(mesh, spec(), LatentMap::FixedDiffusion(1.0)).unwrap();
    let pm = ForwardProblem::new(mirrored, spec(), LatentMap::FixedDiffusion(1.0)).unwrap();
    let data = Observations {
        points: vec![[0.3, 0.2], [0.7, 0.45], [0.55, 0.8]],
        values: vec![0.1, 0.25, 0.15],
    };
    let data_m = Observations {
        points: data.points.iter().map(|&x| mirror(x)).collect(),
        values: data.values.clone(),
    };
    let z = [0.8, 0.6];
    let (_, g) = Posterior::new(&p, &data, NoiseModel::new(0.05)).unwrap().log_posterior_and_grad(&z).unwrap();
    let (_, gm) = Posterior::new(&pm, &data_m, NoiseModel::new(0.05))
        .unwrap()
        .log_posterior_and_grad(&[z[0], -z[1]])
        .unwrap();
    assert!((g[0] - gm[0]).abs() < 1e-9 * g[0].abs().max(1.0), "{g:?} vs {gm:?}");
    assert!((g[1] + gm[1]).abs() < 1e-9 * g[1].abs().max(1.0), "{g:?} vs {gm:?}");
}
