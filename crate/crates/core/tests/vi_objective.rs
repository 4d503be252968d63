use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weakform_core::fem::{ForwardProblem, LatentMap, OperatorFamily, ProblemSpec, ScalarField};
use weakform_core::linalg::{factorize, FactorKind};
use weakform_core::mesh::{node_adjacency, structured_unit_square};
use weakform_core::relax::{build_tapered_precision, minipatch_estimator, PatchSampling, TaperedPrecision};
use weakform_core::surrogate::{Activation, InputSpec, Mlp, NoiseModel};
use weakform_core::vi::{
    EpsilonSchedule, GaussianVariational, Observations, Penalty, TrainConfig, Trainer, VariationalModel,
};

fn problem(family: OperatorFamily, latent: LatentMap, n: usize) -> ForwardProblem {
    let spec = ProblemSpec {
        source: ScalarField::function(|x| 1.0 + x[0] * x[1]),
        boundary: ScalarField::function(|x| 0.1 * x[0]),
        family,
    };
    ForwardProblem::new(structured_unit_square(n).unwrap(), spec, latent).unwrap()
}

fn gamma(p: &ForwardProblem, rho: f64) -> TaperedPrecision {
    let a = factorize(&p.constrained_stiffness().unwrap(), FactorKind::Cholesky).unwrap();
    build_tapered_precision(&a, p.mesh(), rho).unwrap()
}

fn model(d: usize, seed: u64, input: InputSpec) -> VariationalModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = match input {
        InputSpec::CoordinatesAndLatent => 2 + d,
        InputSpec::CoordinatesOnly => 2,
    };
    let mut q = GaussianVariational::standard(d);
    for (i, m) in q.mean.iter_mut().enumerate() {
        *m = 0.3 - 0.2 * i as f64;
    }
    q.diag_log.iter_mut().for_each(|l| *l = -0.7);
    q.lower.iter_mut().for_each(|l| *l = 0.1);
    VariationalModel {
        q,
        mlp: Mlp::init(&[width, 6, 5, 1], Activation::Tanh, &mut rng).unwrap().with_output_scale(0.5),
        noise: NoiseModel::new(0.3),
        input,
    }
}

fn data(p: &ForwardProblem) -> Observations {
    let points = vec![[0.31, 0.42], [0.77, 0.18], [0.5, 0.9], [0.12, 0.66]];
    let values = vec![0.2, -0.1, 0.05, 0.3];
    let _ = p;
    Observations { points, values }
}

fn config(penalty: Penalty, samples: usize) -> TrainConfig {
    TrainConfig {
        iterations: 1,
        samples,
        penalty,
        schedule: EpsilonSchedule::constant(0.1),
        ..TrainConfig::default()
    }
}

fn check_penalty_matches_estimator(p: &ForwardProblem, input: InputSpec) {
    let g = gamma(p, 0.3);
    let d = p.latent_dim();
    let m = model(d, 3, input);
    let obs = data(p);
    let mut t = Trainer::new(p, &obs, Some(&g), config(Penalty::WeakForm(PatchSampling::Stratified), 2)).unwrap();
    let draws = t.draw(d, &mut ChaCha8Rng::seed_from_u64(9));
    let (rep, _) = t.objective(&m, &draws, 0.1).unwrap();
    let latents: Vec<Vec<f64>> = draws.xi.iter().map(|xi| m.q.transform(xi)).collect();
    let fields: Vec<Vec<f64>> = latents.iter().map(|z| m.field(p, z).unwrap()).collect();
    let adj = node_adjacency(p.mesh());
    let est = minipatch_estimator(
        p,
        &adj,
        &g,
        &latents,
        |z, j| {
            let k = latents.iter().position(|l| l.as_slice() == z).unwrap();
            fields[k][j]
        },
        PatchSampling::Stratified,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert!(
        (rep.penalty - est).abs() <= 1e-10 * est.abs().max(1.0),
        "taped {} vs reference {}",
        rep.penalty,
        est
    );
    // Per-patch path, fed every node once.
    let n = p.mesh().n_nodes();
    let mut t = Trainer::new(p, &obs, Some(&g), config(Penalty::WeakForm(PatchSampling::Uniform(n)), 2)).unwrap();
    let mut draws = draws;
    draws.centers = vec![(0..n).collect(); 2];
    let (rep, _) = t.objective(&m, &draws, 0.1).unwrap();
    assert!(
        (rep.penalty - est).abs() <= 1e-10 * est.abs().max(1.0),
        "per-patch {} vs reference {}",
        rep.penalty,
        est
    );
}

#[test]
fn taped_penalty_matches_reference_transport() {
    check_penalty_matches_estimator(
        &problem(OperatorFamily::DiffusionTransport, LatentMap::FixedDiffusion(0.4), 6),
        InputSpec::CoordinatesAndLatent,
    );
}

#[test]
fn taped_penalty_matches_reference_poisson_source() {
    check_penalty_matches_estimator(
        &problem(OperatorFamily::Poisson, LatentMap::SourceScale, 6),
        InputSpec::CoordinatesAndLatent,
    );
}

#[test]
fn taped_penalty_matches_reference_nodal_log() {
    check_penalty_matches_estimator(
        &problem(OperatorFamily::NodalLogDiffusionTransport, LatentMap::Direct, 4),
        InputSpec::CoordinatesOnly,
    );
}

fn check_gradient(p: &ForwardProblem, penalty: Penalty, input: InputSpec, h: f64, tol: f64) {
    let g = gamma(p, 0.3);
    let d = p.latent_dim();
    let mut m = model(d, 5, input);
    let obs = data(p);
    let mut t = Trainer::new(p, &obs, Some(&g), config(penalty, 2)).unwrap();
    let draws = t.draw(d, &mut ChaCha8Rng::seed_from_u64(17));
    let eps = 0.5;
    let (_, grad) = t.objective(&m, &draws, eps).unwrap();
    let base = m.params_flat();
    let n = base.len();
    let idx: Vec<usize> = (0..n).step_by((n / 25).max(1)).chain(0..(2 * d + 1)).collect();
    for &i in &idx {
        let mut pp = base.clone();
        pp[i] += h;
        m.set_params_flat(&pp);
        let fp = t.objective(&m, &draws, eps).unwrap().0.total;
        pp[i] -= 2.0 * h;
        m.set_params_flat(&pp);
        let fm = t.objective(&m, &draws, eps).unwrap().0.total;
        m.set_params_flat(&base);
        let fd = (fp - fm) / (2.0 * h);
        assert!(
            (fd - grad[i]).abs() <= tol * (1.0 + fd.abs()),
            "param {i}: fd {fd} vs taped {}",
            grad[i]
        );
    }
}

#[test]
fn objective_gradient_matches_finite_differences_weak_form() {
    check_gradient(
        &problem(OperatorFamily::DiffusionTransport, LatentMap::FixedDiffusion(0.4), 6),
        Penalty::WeakForm(PatchSampling::Uniform(3)),
        InputSpec::CoordinatesAndLatent,
        1e-6,
        1e-5,
    );
    check_gradient(
        &problem(OperatorFamily::NodalLogDiffusionTransport, LatentMap::Direct, 3),
        Penalty::WeakForm(PatchSampling::Uniform(3)),
        InputSpec::CoordinatesOnly,
        1e-6,
        1e-5,
    );
}

#[test]
fn objective_gradient_matches_finite_differences_pointwise() {
    check_gradient(
        &problem(OperatorFamily::DiffusionTransport, LatentMap::FixedDiffusion(0.4), 6),
        Penalty::Pointwise { n_int: 5, n_bnd: 4 },
        InputSpec::CoordinatesAndLatent,
        1e-3,
        1e-3,
    );
}

#[test]
fn boundary_centers_contribute_nothing() {
    let p = problem(OperatorFamily::DiffusionTransport, LatentMap::FixedDiffusion(0.4), 5);
    let g = gamma(&p, 0.3);
    let m = model(2, 1, InputSpec::CoordinatesAndLatent);
    let mut t = Trainer::new(&p, &Observations::default(), Some(&g), config(Penalty::WeakForm(PatchSampling::Uniform(1)), 1)).unwrap();
    let mut draws = t.draw(2, &mut ChaCha8Rng::seed_from_u64(2));
    draws.centers[0] = vec![0];
    let (rep, _) = t.objective(&m, &draws, 0.1).unwrap();
    assert_eq!(rep.penalty, 0.0);
    assert_eq!(rep.neg_loglik, 0.0);
}

#[test]
fn weak_form_without_gamma_is_rejected() {
    let p = problem(OperatorFamily::Poisson, LatentMap::SourceScale, 4);
    assert!(Trainer::new(&p, &Observations::default(), None, TrainConfig::default()).is_err());
}
