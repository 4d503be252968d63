use weakform_core::fem::{ForwardProblem, LatentMap, OperatorFamily, ProblemSpec, ScalarField};
use weakform_core::linalg::{factorize, FactorKind};
use weakform_core::mesh::{node_adjacency, structured_unit_square};
use weakform_core::relax::{build_minipatch, build_tapered_precision, patch_shape};

#[test]
fn geometric_shape_matches_tapered_precision_pattern() {
    let spec = ProblemSpec {
        source: ScalarField::Constant(1.0),
        boundary: ScalarField::Constant(0.0),
        family: OperatorFamily::Poisson,
    };
    let p = ForwardProblem::new(structured_unit_square(8).unwrap(), spec, LatentMap::SourceScale).unwrap();
    let mesh = p.mesh();
    let adj = node_adjacency(mesh);
    let a = factorize(&p.constrained_stiffness().unwrap(), FactorKind::Cholesky).unwrap();
    for rho in [0.05, 0.13, 0.3, 0.61, 1.5] {
        let g = build_tapered_precision(&a, mesh, rho).unwrap();
        for i in 0..mesh.n_nodes() {
            let patch = build_minipatch(mesh, &adj, &g, i);
            let shape = patch_shape(mesh, &adj, rho, i);
            assert_eq!(shape.gamma_nodes, patch.gamma_nodes, "rho {rho} node {i}");
            assert_eq!(shape.nodes, patch.nodes(), "rho {rho} node {i}");
            assert_eq!(shape.active_elements, patch.active_elements, "rho {rho} node {i}");
        }
    }
}
