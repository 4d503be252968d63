use proptest::prelude::*;
use rand::SeedableRng;
use weakform_core::fem::{assemble_operator, assemble_stiffness, ForwardProblem, LatentMap, OperatorFamily, ProblemSpec, ScalarField};
use weakform_core::linalg::{factorize, CsrMatrix, FactorKind};
use weakform_core::mesh::{elements_touching, node_adjacency, structured_unit_square};
use weakform_core::relax::{build_tapered_precision, minipatch_estimator, residual_quadratic_form, PatchSampling};
use weakform_core::vi::{kl_to_standard_normal, GaussianVariational};

fn transport(n: usize) -> ForwardProblem {
    let spec = ProblemSpec {
        source: ScalarField::Constant(1.0),
        boundary: ScalarField::Constant(0.0),
        family: OperatorFamily::DiffusionTransport,
    };
    ForwardProblem::new(structured_unit_square(n).unwrap(), spec, LatentMap::FixedDiffusion(1.0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mesh_counts_and_euler(n in 1usize..12) {
        let m = structured_unit_square(n).unwrap();
        let adj = node_adjacency(&m);
        prop_assert_eq!(m.n_nodes(), (n + 1) * (n + 1));
        prop_assert_eq!(m.n_elements(), 2 * n * n);
        let chi = m.n_nodes() as i64 - adj.n_edges() as i64 + m.n_elements() as i64;
        prop_assert_eq!(chi, 1);
        prop_assert!(adj.is_symmetric());
        for i in 0..m.n_nodes() {
            prop_assert!(!adj.neighbors(i).contains(&i));
        }
        prop_assert!((m.total_area() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn elements_touching_is_monotone(n in 2usize..8, picks in prop::collection::vec(0usize..1000, 0..12), extra in 0usize..1000) {
        let m = structured_unit_square(n).unwrap();
        let nn = m.n_nodes();
        let small: Vec<usize> = picks.iter().map(|p| p % nn).collect();
        let mut big = small.clone();
        big.push(extra % nn);
        let a = elements_touching(&m, &small);
        let b = elements_touching(&m, &big);
        prop_assert!(a.iter().all(|k| b.contains(k)));
    }

    #[test]
    fn stiffness_is_spd_after_constraint(n in 2usize..7, x in prop::collection::vec(-1.0f64..1.0, 64)) {
        let p = transport(n);
        let a = p.constrained_stiffness().unwrap();
        let nn = a.n_rows();
        let v: Vec<f64> = (0..nn).map(|i| x[i % x.len()] + 1e-3 * (i as f64 + 1.0)).collect();
        let av = a.spmv(&v).unwrap();
        let q: f64 = v.iter().zip(&av).map(|(a, b)| a * b).sum();
        prop_assert!(q > 0.0);
    }

    #[test]
    fn stiffness_sparsity_follows_adjacency(n in 1usize..8) {
        let m = structured_unit_square(n).unwrap();
        let adj = node_adjacency(&m);
        let a = assemble_stiffness(&m).unwrap();
        prop_assert!(a.is_symmetric(1e-14));
        for i in 0..a.n_rows() {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                prop_assert!(v == 0.0 || j == i || adj.neighbors(i).contains(&j));
            }
        }
    }

    #[test]
    fn operator_is_affine_in_parameters(
        z1 in prop::collection::vec(0.5f64..2.0, 3),
        z2 in prop::collection::vec(0.5f64..2.0, 3),
        alpha in 0.0f64..1.0,
    ) {
        let m = structured_unit_square(4).unwrap();
        let dec = assemble_operator(&m, OperatorFamily::DiffusionTransport).unwrap();
        let zc: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let l1 = dec.assemble(&z1).unwrap().to_dense();
        let l2 = dec.assemble(&z2).unwrap().to_dense();
        let lc = dec.assemble(&zc).unwrap().to_dense();
        for i in 0..lc.len() {
            for j in 0..lc.len() {
                let mix = alpha * l1[i][j] + (1.0 - alpha) * l2[i][j];
                prop_assert!((lc[i][j] - mix).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn solve_inverts_spmv(seed in 0u64..1000, n in 3usize..12) {
        // Diagonally dominant, so well conditioned.
        let mut trip = Vec::new();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for i in 0..n {
            trip.push((i, i, 4.0 + next().abs()));
            let j = (i + 1) % n;
            if j != i {
                trip.push((i, j, next()));
                trip.push((j, i, next()));
            }
        }
        let a = CsrMatrix::from_triplets(n, n, &trip).unwrap();
        let x: Vec<f64> = (0..n).map(|_| next()).collect();
        let b = a.spmv(&x).unwrap();
        let back = factorize(&a, FactorKind::Lu).unwrap().solve(&b).unwrap();
        let err: f64 = back.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-10 * nx.max(1e-300));
    }

    #[test]
    fn precision_rows_are_symmetric(i in 0usize..25, j in 0usize..25) {
        let a = transport(4).constrained_stiffness().unwrap();
        let f = factorize(&a, FactorKind::Cholesky).unwrap();
        let ri = f.precision_row(i).unwrap();
        let rj = f.precision_row(j).unwrap();
        prop_assert!((ri[j] - rj[i]).abs() < 1e-10);
    }

    #[test]
    fn taper_entries_nest(r1 in 0.01f64..1.5, r2 in 0.01f64..1.5) {
        let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        let p = transport(5);
        let f = factorize(&p.constrained_stiffness().unwrap(), FactorKind::Cholesky).unwrap();
        let wide = build_tapered_precision(&f, p.mesh(), hi).unwrap();
        let narrow = build_tapered_precision(&f, p.mesh(), lo).unwrap();
        for i in 0..p.mesh().n_nodes() {
            for &(j, v) in narrow.row(i) {
                let w = wide.row(i).iter().find(|e| e.0 == j).map(|e| e.1);
                prop_assert_eq!(w, Some(v));
            }
        }
    }

    #[test]
    fn saturated_stratified_estimator_is_exact(t1 in -2.0f64..2.0, t2 in -2.0f64..2.0, c in -1.0f64..1.0) {
        let p = transport(5);
        let f = factorize(&p.constrained_stiffness().unwrap(), FactorKind::Cholesky).unwrap();
        let gamma = build_tapered_precision(&f, p.mesh(), 2.0).unwrap();
        let z = [t1, t2];
        let mu: Vec<f64> = p.mesh().nodes().iter().map(|x| c * x[0] * (1.0 - x[0]) * x[1]).collect();
        let full = residual_quadratic_form(&p.residual(&z, &mu).unwrap(), &f).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let adj = node_adjacency(p.mesh());
        let est = minipatch_estimator(&p, &adj, &gamma, &[z.to_vec()], |_, i| mu[i], PatchSampling::Stratified, &mut rng)
            .unwrap();
        prop_assert!((est - full).abs() <= 1e-8 * full);
    }

    #[test]
    fn kl_is_non_negative(
        mean in prop::collection::vec(-3.0f64..3.0, 3),
        diag in prop::collection::vec(-2.0f64..2.0, 3),
        lower in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let q = GaussianVariational { mean, diag_log: diag, lower };
        prop_assert!(kl_to_standard_normal(&q) >= 0.0);
    }
}


#[test]
fn kl_vanishes_only_at_standard_normal() {
    assert_eq!(kl_to_standard_normal(&GaussianVariational::standard(3)), 0.0);
    let mut q = GaussianVariational::standard(3);
    q.lower[1] = 1e-3;
    assert!(kl_to_standard_normal(&q) > 0.0);
}
