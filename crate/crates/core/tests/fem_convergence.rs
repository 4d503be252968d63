use std::f64::consts::PI;

use weakform_core::fem::{l2_error, ForwardProblem, LatentMap, OperatorFamily, ProblemSpec, ScalarField};
use weakform_core::mesh::structured_unit_square;

fn exact(x: [f64; 2]) -> f64 {
    (PI * x[0]).sin() * (PI * x[1]).sin()
}

fn error(n: usize) -> f64 {
    let spec = ProblemSpec {
        source: ScalarField::function(|x| 2.0 * PI * PI * exact(x)),
        boundary: ScalarField::Constant(0.0),
        family: OperatorFamily::Poisson,
    };
    let p = ForwardProblem::new(structured_unit_square(n).unwrap(), spec, LatentMap::Direct).unwrap();
    let u = p.solve(&[]).unwrap();
    l2_error(p.mesh(), &u, exact)
}

#[test]
fn manufactured_poisson_converges_at_second_order() {
    let errs: Vec<f64> = [8, 16, 32, 64].iter().map(|&n| error(n)).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.4..=4.6).contains(&ratio), "errors {errs:?}");
    }
}

#[test]
fn l2_error_is_exact_for_linears_and_constants() {
    let m = structured_unit_square(3).unwrap();
    let u: Vec<f64> = m.nodes().iter().map(|x| 1.0 + 2.0 * x[0] - x[1]).collect();
    assert!(l2_error(&m, &u, |x| 1.0 + 2.0 * x[0] - x[1]) < 1e-14);
    // ∫(1)² over the unit square.
    let zero = vec![0.0; m.n_nodes()];
    assert!((l2_error(&m, &zero, |_| 1.0) - 1.0).abs() < 1e-12);
}
