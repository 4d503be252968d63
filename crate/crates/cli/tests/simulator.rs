use weakform::data::{rng, simulate_observations, transport_problem, SigmaSpec};
use weakform_core::fem::interpolate;

#[test]
fn noise_has_the_requested_spread() {
    let sigma = 0.02;
    let s = simulate_observations(4, &[1.0, 1.0], 1.0, 10.0, 10_000, 1, SigmaSpec::Absolute(sigma), &mut rng(7)).unwrap();
    let fine = transport_problem(8, 1.0, 10.0).unwrap();
    let u = fine.solve(&[1.0, 1.0]).unwrap();
    let e: Vec<f64> = s
        .train
        .points
        .iter()
        .zip(&s.train.values)
        .map(|(p, v)| v - interpolate(fine.mesh(), &u, *p).unwrap())
        .collect();
    let m = e.iter().sum::<f64>() / e.len() as f64;
    let sd = (e.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (e.len() - 1) as f64).sqrt();
    assert!((sd / sigma - 1.0).abs() < 0.03, "sd {sd}");
    assert!(m.abs() < 4.0 * sigma / 100.0);
}

#[test]
fn fraction_of_range_scales_with_the_field() {
    let s = simulate_observations(4, &[1.0, 1.0], 1.0, 10.0, 3, 3, SigmaSpec::FractionOfRange(0.05), &mut rng(0)).unwrap();
    assert!((s.sigma_obs - 0.05 * s.field_range).abs() < 1e-15);
    assert!(s.field_range > 0.0);
}

#[test]
fn same_seed_same_data() {
    let a = simulate_observations(6, &[0.5, -1.0], 1.0, 10.0, 20, 5, SigmaSpec::Absolute(0.1), &mut rng(3)).unwrap();
    let b = simulate_observations(6, &[0.5, -1.0], 1.0, 10.0, 20, 5, SigmaSpec::Absolute(0.1), &mut rng(3)).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.validation, b.validation);
    let c = simulate_observations(6, &[0.5, -1.0], 1.0, 10.0, 20, 5, SigmaSpec::Absolute(0.1), &mut rng(4)).unwrap();
    assert_ne!(a.train, c.train);
}

#[test]
fn sensors_lie_inside_the_square() {
    let s = simulate_observations(4, &[1.0, 1.0], 1.0, 10.0, 500, 1, SigmaSpec::Absolute(0.1), &mut rng(1)).unwrap();
    assert!(s.train.points.iter().all(|p| p[0] > 0.0 && p[0] < 1.0 && p[1] > 0.0 && p[1] < 1.0));
}
