//! Dual-space residual penalties: the A⁻¹-weighted residual, tapering, mini-patches
//! and the pointwise baseline.

use std::collections::BTreeSet;
use std::io::{self, BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::fem::{FemError, ForwardProblem, OperatorFamily, ProblemSpec};
use crate::linalg::{CsrMatrix, Factorization, LinalgError};
use crate::mesh::{distance, elements_touching, Adjacency, Rect, TriMesh};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelaxError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("mini-patch was built for tapered precision {expected:016x}, got {got:016x}")]
    FingerprintMismatch { expected: u64, got: u64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("cache parse error on line {line}: {message}")]
    Cache { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, RelaxError>;

/// FNV-1a over a byte stream.
#[derive(Debug, Clone, Copy)]
pub struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn bytes(mut self, bytes: &[u8]) -> Self {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
        self
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

/// Stable hash of mesh geometry and topology.
pub fn mesh_hash(mesh: &TriMesh) -> u64 {
    let mut h = Fnv::default();
    for p in mesh.nodes() {
        h = h.bytes(&p[0].to_le_bytes()).bytes(&p[1].to_le_bytes());
    }
    for e in mesh.elements() {
        for v in e {
            h = h.bytes(&(*v as u64).to_le_bytes());
        }
    }
    for &b in mesh.boundary_mask() {
        h = h.bytes(&[u8::from(b)]);
    }
    h.finish()
}

/// `(Lμ − f)ᵀ A⁻¹ (Lμ − f)` over interior rows of a constrained system.
pub fn full_residual_norm(
    l: &CsrMatrix,
    mu: &[f64],
    f: &[f64],
    a_fact: &Factorization,
    boundary: &[bool],
) -> Result<f64> {
    let mut r = l.spmv(mu)?;
    if f.len() != r.len() || boundary.len() != r.len() {
        return Err(LinalgError::DimensionMismatch {
            op: "full_residual_norm",
            expected: r.len(),
            got: f.len().min(boundary.len()),
        }
        .into());
    }
    for ((ri, fi), &b) in r.iter_mut().zip(f).zip(boundary) {
        *ri = if b { 0.0 } else { *ri - fi };
    }
    residual_quadratic_form(&r, a_fact)
}

/// `rᵀ A⁻¹ r` by one solve.
pub fn residual_quadratic_form(r: &[f64], a_fact: &Factorization) -> Result<f64> {
    let x = a_fact.solve(r)?;
    Ok(r.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSample {
    pub w: Vec<f64>,
    pub epsilon: f64,
}

/// `w = ε Rᵀ ξ` with `RᵀR = A`, from a Cholesky factorisation of `A`.
pub fn sample_perturbation<R: Rng + ?Sized>(
    a_chol: &Factorization,
    epsilon: f64,
    rng: &mut R,
) -> Result<PerturbationSample> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(RelaxError::Invalid(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let xi: Vec<f64> = (0..a_chol.dim()).map(|_| rng.sample(StandardNormal)).collect();
    let w = a_chol
        .cholesky_lower_mul(&xi)?
        .into_iter()
        .map(|v| epsilon * v)
        .collect();
    Ok(PerturbationSample { w, epsilon })
}

/// Rows of `A⁻¹` with entries at distance `≥ ρ` dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct TaperedPrecision {
    rho: f64,
    rows: Vec<Vec<(usize, f64)>>,
    fingerprint: u64,
}

pub fn build_tapered_precision(a_fact: &Factorization, mesh: &TriMesh, rho: f64) -> Result<TaperedPrecision> {
    if !(rho > 0.0) {
        return Err(RelaxError::Invalid(format!("taper radius must be positive, got {rho}")));
    }
    let rows = (0..mesh.n_nodes())
        .map(|i| {
            let full = a_fact.precision_row(i)?;
            let xi = mesh.node(i);
            Ok(full
                .into_iter()
                .enumerate()
                .filter(|&(j, _)| distance(xi, mesh.node(j)) < rho)
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaperedPrecision::from_rows(mesh, rho, rows))
}

impl TaperedPrecision {
    fn from_rows(mesh: &TriMesh, rho: f64, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let fingerprint = Fnv(mesh_hash(mesh)).bytes(&rho.to_le_bytes()).finish();
        Self { rho, rows, fingerprint }
    }

    /// Drops entries at distance `≥ rho`, which must not exceed the current radius.
    pub fn restrict(&self, mesh: &TriMesh, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= self.rho) {
            return Err(RelaxError::Invalid(format!(
                "restriction radius {rho} outside (0, {}]",
                self.rho
            )));
        }
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .copied()
                    .filter(|&(j, _)| distance(mesh.node(i), mesh.node(j)) < rho)
                    .collect()
            })
            .collect();
        Ok(Self::from_rows(mesh, rho, rows))
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn n_nodes(&self) -> usize {
        self.rows.len()
    }

    /// Stored `(j, Γ_ij)` pairs, sorted by `j`.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// `nei_Γ(i)`: nodes with a nonzero stored entry, `i` included.
    pub fn neighbourhood(&self, i: usize) -> Vec<usize> {
        self.rows[i]
            .iter()
            .filter(|&&(j, v)| v != 0.0 || j == i)
            .map(|&(j, _)| j)
            .collect()
    }

    /// File name keyed by mesh hash and radius.
    pub fn cache_file_name(mesh: &TriMesh, rho: f64) -> String {
        format!("gamma_{:016x}_{:016x}.csv", mesh_hash(mesh), rho.to_bits())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "i,j,value")?;
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                writeln!(out, "{i},{j},{v:?}")?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R, mesh: &TriMesh, rho: f64) -> Result<Self> {
        let mut rows = vec![Vec::new(); mesh.n_nodes()];
        let err = |line: usize, message: &str| RelaxError::Cache {
            line,
            message: message.to_string(),
        };
        for (k, line) in input.lines().enumerate() {
            let line = line.map_err(|e| err(k + 1, &e.to_string()))?;
            if k == 0 {
                if line.trim() != "i,j,value" {
                    return Err(err(1, "expected header `i,j,value`"));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(err(k + 1, "expected three fields"));
            }
            let i: usize = f[0].trim().parse().map_err(|_| err(k + 1, "bad i"))?;
            let j: usize = f[1].trim().parse().map_err(|_| err(k + 1, "bad j"))?;
            let v: f64 = f[2].trim().parse().map_err(|_| err(k + 1, "bad value"))?;
            if i >= rows.len() || j >= rows.len() {
                return Err(err(k + 1, "node index out of range"));
            }
            rows[i].push((j, v));
        }
        for row in &mut rows {
            row.sort_by_key(|&(j, _)| j);
        }
        Ok(Self::from_rows(mesh, rho, rows))
    }
}

/// The node and element sets needed for one local residual term.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniPatch {
    pub center: usize,
    /// `nei_Γ(center)`, sorted, center included.
    pub gamma_nodes: Vec<usize>,
    /// `nei_Δ(nei_Γ(center))` minus the Γ nodes, sorted.
    pub halo_nodes: Vec<usize>,
    pub active_elements: Vec<usize>,
    gamma_fingerprint: u64,
}

impl MiniPatch {
    /// Every node in the patch, sorted.
    pub fn nodes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.gamma_nodes.iter().chain(&self.halo_nodes).copied().collect();
        all.sort_unstable();
        all
    }

    pub fn n_nodes(&self) -> usize {
        self.gamma_nodes.len() + self.halo_nodes.len()
    }

    /// Nodes whose weak-form rows enter the local term.
    pub fn residual_rows(&self) -> &[usize] {
        &self.gamma_nodes
    }
}

pub fn build_minipatch(mesh: &TriMesh, adjacency: &Adjacency, gamma: &TaperedPrecision, i: usize) -> MiniPatch {
    let gamma_nodes = gamma.neighbourhood(i);
    let inner: BTreeSet<usize> = gamma_nodes.iter().copied().collect();
    let halo: BTreeSet<usize> = gamma_nodes
        .iter()
        .flat_map(|&j| adjacency.neighbors(j).iter().copied())
        .filter(|j| !inner.contains(j))
        .collect();
    let halo_nodes: Vec<usize> = halo.into_iter().collect();
    let all: Vec<usize> = gamma_nodes.iter().chain(&halo_nodes).copied().collect();
    MiniPatch {
        center: i,
        active_elements: elements_touching(mesh, &all),
        gamma_nodes,
        halo_nodes,
        gamma_fingerprint: gamma.fingerprint(),
    }
}

/// Weak-form residual rows `(L[z]μ − f)_j` for `j` in the patch's Γ nodes, assembled
/// from the active elements only. Boundary rows are zero and boundary values of `mu`
/// are replaced by the Dirichlet data.
pub fn local_residual_rows(
    patch: &MiniPatch,
    problem: &ForwardProblem,
    z: &[f64],
    mu: impl Fn(usize) -> f64,
) -> Result<Vec<(usize, f64)>> {
    let mesh = problem.mesh();
    let coeffs = problem.coefficients(z)?;
    let scale = problem.source_scale(z);
    let g = problem.boundary_values();
    let rows = patch.residual_rows();
    let mut out: Vec<(usize, f64)> = rows.iter().map(|&j| (j, 0.0)).collect();
    let value = |j: usize| if mesh.is_boundary(j) { g[j] } else { mu(j) };
    let spec = problem.spec();
    for &k in &patch.active_elements {
        let e = mesh.element(k);
        let local_rows: Vec<(usize, usize)> = (0..3)
            .filter_map(|r| rows.binary_search(&e[r]).ok().map(|pos| (r, pos)))
            .filter(|&(r, _)| !mesh.is_boundary(e[r]))
            .collect();
        if local_rows.is_empty() {
            continue;
        }
        let m = problem.decomposition().element_matrix(k, &coeffs);
        let load = crate::fem::local_load(mesh, k, &spec.source);
        let vals = [value(e[0]), value(e[1]), value(e[2])];
        for (r, pos) in local_rows {
            out[pos].1 += m[r][0] * vals[0] + m[r][1] * vals[1] + m[r][2] * vals[2] - scale * load[r];
        }
    }
    Ok(out)
}

/// Node and element sets of the mini-patch at `i` implied by a hard taper of the
/// constrained stiffness inverse, without forming it: interior rows of `A_II⁻¹` are
/// strictly positive, boundary rows are unit vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchShape {
    pub gamma_nodes: Vec<usize>,
    pub nodes: Vec<usize>,
    pub active_elements: Vec<usize>,
}

impl PatchShape {
    pub fn interior_count(&self, mesh: &TriMesh) -> usize {
        self.nodes.iter().filter(|&&j| !mesh.is_boundary(j)).count()
    }
}

pub fn patch_shape(mesh: &TriMesh, adjacency: &Adjacency, rho: f64, i: usize) -> PatchShape {
    let xi = mesh.node(i);
    let gamma_nodes: Vec<usize> = if mesh.is_boundary(i) {
        vec![i]
    } else {
        (0..mesh.n_nodes())
            .filter(|&j| j == i || (!mesh.is_boundary(j) && distance(xi, mesh.node(j)) < rho))
            .collect()
    };
    let mut nodes: BTreeSet<usize> = gamma_nodes.iter().copied().collect();
    for &j in &gamma_nodes {
        nodes.extend(adjacency.neighbors(j).iter().copied());
    }
    let nodes: Vec<usize> = nodes.into_iter().collect();
    let active_elements = elements_touching(mesh, &nodes);
    PatchShape {
        gamma_nodes,
        nodes,
        active_elements,
    }
}

/// `r^(i) = R_i Σ_j Γ_ij R_j` for the patch center `i`.
pub fn local_residual_term(
    patch: &MiniPatch,
    gamma: &TaperedPrecision,
    problem: &ForwardProblem,
    z: &[f64],
    mu: impl Fn(usize) -> f64,
) -> Result<f64> {
    if patch.gamma_fingerprint != gamma.fingerprint() {
        return Err(RelaxError::FingerprintMismatch {
            expected: patch.gamma_fingerprint,
            got: gamma.fingerprint(),
        });
    }
    if problem.mesh().is_boundary(patch.center) {
        return Ok(0.0);
    }
    let rows = local_residual_rows(patch, problem, z, mu)?;
    Ok(contract(patch.center, &rows, gamma))
}

fn contract(center: usize, rows: &[(usize, f64)], gamma: &TaperedPrecision) -> f64 {
    let ri = rows
        .iter()
        .find(|&&(j, _)| j == center)
        .map_or(0.0, |&(_, v)| v);
    let mut s = 0.0;
    let mut k = 0;
    for &(j, gij) in gamma.row(center) {
        while k < rows.len() && rows[k].0 < j {
            k += 1;
        }
        if k < rows.len() && rows[k].0 == j {
            s += gij * rows[k].1;
        }
    }
    ri * s
}

/// Local term computed from a full residual vector, for studies that already hold it.
pub fn local_term_from_residual(center: usize, residual: &[f64], gamma: &TaperedPrecision) -> f64 {
    let s: f64 = gamma.row(center).iter().map(|&(j, g)| g * residual[j]).sum();
    residual[center] * s
}

/// How patch centers are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchSampling {
    /// `P` centers uniform over all nodes, with replacement.
    Uniform(usize),
    /// Every node exactly once.
    Stratified,
}

/// Patch centers for one latent sample.
pub fn sample_centers<R: Rng + ?Sized>(n_nodes: usize, sampling: PatchSampling, rng: &mut R) -> Vec<usize> {
    match sampling {
        PatchSampling::Uniform(p) => (0..p).map(|_| rng.random_range(0..n_nodes)).collect(),
        PatchSampling::Stratified => (0..n_nodes).collect(),
    }
}

/// Hierarchical estimate of `Σ_i r_Γ^(i)`, averaged over the latent samples:
/// `(1/M) Σ_m N · mean_p r^(i_p)(z_m)`.
pub fn minipatch_estimator<R: Rng + ?Sized>(
    problem: &ForwardProblem,
    adjacency: &Adjacency,
    gamma: &TaperedPrecision,
    latents: &[Vec<f64>],
    mu: impl Fn(&[f64], usize) -> f64,
    sampling: PatchSampling,
    rng: &mut R,
) -> Result<f64> {
    if latents.is_empty() || sampling == PatchSampling::Uniform(0) {
        return Err(RelaxError::Invalid("M and P must be at least 1".into()));
    }
    let mesh = problem.mesh();
    let n = mesh.n_nodes();
    let mut total = 0.0;
    for z in latents {
        let centers = sample_centers(n, sampling, rng);
        let mut s = 0.0;
        for &i in &centers {
            let patch = build_minipatch(mesh, adjacency, gamma, i);
            s += local_residual_term(&patch, gamma, problem, z, |j| mu(z, j))?;
        }
        total += n as f64 * s / centers.len() as f64;
    }
    Ok(total / latents.len() as f64)
}

/// Strong-form operator parameters for the pointwise baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointwiseOperator {
    pub diffusion: f64,
    pub tau: [f64; 2],
    pub source_scale: f64,
}

impl PointwiseOperator {
    pub fn from_params(family: OperatorFamily, params: &[f64], source_scale: f64) -> Result<Self> {
        match (family, params.len()) {
            (OperatorFamily::Poisson, 0) => Ok(Self {
                diffusion: 1.0,
                tau: [0.0, 0.0],
                source_scale,
            }),
            (OperatorFamily::DiffusionTransport, 3) => Ok(Self {
                diffusion: params[0],
                tau: [params[1], params[2]],
                source_scale,
            }),
            _ => Err(RelaxError::Invalid(
                "pointwise residual supports poisson and constant diffusion-transport operators".into(),
            )),
        }
    }
}

/// Collocation residual with central finite differences of step `1e-4 · scale`.
pub fn pointwise_residual<R: Rng + ?Sized>(
    mu: impl Fn([f64; 2]) -> f64,
    spec: &ProblemSpec,
    op: PointwiseOperator,
    domain: Rect,
    n_int: usize,
    n_bnd: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_int == 0 || n_bnd == 0 {
        return Err(RelaxError::Invalid("collocation counts must be at least 1".into()));
    }
    let interior: Vec<[f64; 2]> = (0..n_int)
        .map(|_| {
            [
                rng.random_range(domain.x0..domain.x1),
                rng.random_range(domain.y0..domain.y1),
            ]
        })
        .collect();
    let boundary: Vec<[f64; 2]> = (0..n_bnd).map(|_| perimeter_point(domain, rng.random())).collect();
    Ok(pointwise_residual_at(&mu, spec, op, domain, &interior, &boundary))
}

/// Point at arc-length fraction `t ∈ [0, 1)` along the rectangle perimeter.
pub fn perimeter_point(r: Rect, t: f64) -> [f64; 2] {
    let (w, h) = (r.x1 - r.x0, r.y1 - r.y0);
    let mut s = t * 2.0 * (w + h);
    if s < w {
        return [r.x0 + s, r.y0];
    }
    s -= w;
    if s < h {
        return [r.x1, r.y0 + s];
    }
    s -= h;
    if s < w {
        return [r.x1 - s, r.y1];
    }
    s -= w;
    [r.x0, r.y1 - s.min(h)]
}

pub fn pointwise_residual_at(
    mu: &impl Fn([f64; 2]) -> f64,
    spec: &ProblemSpec,
    op: PointwiseOperator,
    domain: Rect,
    interior: &[[f64; 2]],
    boundary: &[[f64; 2]],
) -> f64 {
    let h = 1e-4 * (domain.x1 - domain.x0).max(domain.y1 - domain.y0);
    let source = |x: [f64; 2]| match &spec.source {
        crate::fem::ScalarField::Constant(c) => *c,
        crate::fem::ScalarField::Function(f) => f(x),
        crate::fem::ScalarField::Nodal(_) => f64::NAN,
    };
    let boundary_value = |x: [f64; 2]| match &spec.boundary {
        crate::fem::ScalarField::Constant(c) => *c,
        crate::fem::ScalarField::Function(f) => f(x),
        crate::fem::ScalarField::Nodal(_) => f64::NAN,
    };
    let mut int = 0.0;
    for &x in interior {
        let u = mu(x);
        let (xp, xm) = (mu([x[0] + h, x[1]]), mu([x[0] - h, x[1]]));
        let (yp, ym) = (mu([x[0], x[1] + h]), mu([x[0], x[1] - h]));
        let lap = (xp + xm + yp + ym - 4.0 * u) / (h * h);
        let grad = [(xp - xm) / (2.0 * h), (yp - ym) / (2.0 * h)];
        let strong = -op.diffusion * lap + op.tau[0] * grad[0] + op.tau[1] * grad[1];
        let d = strong - op.source_scale * source(x);
        int += d * d;
    }
    let mut bnd = 0.0;
    for &s in boundary {
        let d = mu(s) - boundary_value(s);
        bnd += d * d;
    }
    int / interior.len() as f64 + bnd / boundary.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{LatentMap, ScalarField};
    use crate::linalg::{factorize, FactorKind};
    use crate::mesh::{node_adjacency, structured_unit_square};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn transport(n: usize) -> ForwardProblem {
        let spec = ProblemSpec {
            source: ScalarField::Constant(1.0),
            boundary: ScalarField::Constant(0.0),
            family: OperatorFamily::DiffusionTransport,
        };
        ForwardProblem::new(structured_unit_square(n).unwrap(), spec, LatentMap::FixedDiffusion(1.0)).unwrap()
    }

    #[test]
    fn residual_norm_zero_at_exact_solution() {
        let p = transport(6);
        let z = [1.0, 1.0];
        let (l, f) = p.constrained_system(&z).unwrap();
        let a = factorize(&p.constrained_stiffness().unwrap(), FactorKind::Cholesky).unwrap();
        let u = p.solve(&z).unwrap();
        let mask = p.mesh().boundary_mask();
        assert!(full_residual_norm(&l, &u, &f, &a, mask).unwrap() < 1e-18);
        let zero = vec![0.0; u.len()];
        assert!(full_residual_norm(&l, &zero, &f, &a, mask).unwrap() > 0.0);
    }

    #[test]
    fn zero_epsilon_gives_zero_perturbation() {
        let a = factorize(&CsrMatrix::identity(4), FactorKind::Cholesky).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_perturbation(&a, 0.0, &mut rng).unwrap();
        assert!(s.w.iter().all(|&v| v == 0.0));
        assert!(sample_perturbation(&a, -1.0, &mut rng).is_err());
        let lu = factorize(&CsrMatrix::identity(4), FactorKind::Lu).unwrap();
        assert!(sample_perturbation(&lu, 1.0, &mut rng).is_err());
    }

    #[test]
    fn taper_extremes() {
        let p = transport(4);
        let a = factorize(&p.constrained_stiffness().unwrap(), FactorKind::Cholesky).unwrap();
        let full = build_tapered_precision(&a, p.mesh(), 1.5).unwrap();
        for i in 0..p.mesh().n_nodes() {
            assert_eq!(full.row(i).len(), p.mesh().n_nodes());
        }
        let diag = build_tapered_precision(&a, p.mesh(), 0.1).unwrap();
        for i in 0..p.mesh().n_nodes() {
            assert_eq!(diag.row(i).len(), 1);
            assert_eq!(diag.row(i)[0].0, i);
        }
        assert!(build_tapered_precision(&a, p.mesh(), 0.0).is_err());
    }

    #[test]
    fn tiny_radius_patch_is_node_plus_neighbours() {
        let p = transport(4);
        let adj = node_adjacency(p.mesh());
        let a = factorize(&p.constrained_stiffness().unwrap(), FactorKind::Cholesky).unwrap();
        let g = build_tapered_precision(&a, p.mesh(), 0.1).unwrap();
        let patch = build_minipatch(p.mesh(), &adj, &g, 12);
        assert_eq!(patch.gamma_nodes, vec![12]);
        assert_eq!(patch.halo_nodes, adj.neighbors(12));
        let mut set = vec![12];
        set.extend(adj.neighbors(12));
        assert_eq!(patch.active_elements, elements_touching(p.mesh(), &set));
    }

    #[test]
    fn fingerprint_mismatch_is_reported() {
        let p = transport(3);
        let adj = node_adjacency(p.mesh());
        let a = factorize(&p.constrained_stiffness().unwrap(), FactorKind::Cholesky).unwrap();
        let g1 = build_tapered_precision(&a, p.mesh(), 0.5).unwrap();
        let g2 = build_tapered_precision(&a, p.mesh(), 0.6).unwrap();
        let patch = build_minipatch(p.mesh(), &adj, &g1, 5);
        let r = local_residual_term(&patch, &g2, &p, &[1.0, 1.0], |_| 0.0);
        assert!(matches!(r, Err(RelaxError::FingerprintMismatch { .. })));
    }

    #[test]
    fn gamma_csv_round_trip() {
        let p = transport(3);
        let a = factorize(&p.constrained_stiffness().unwrap(), FactorKind::Cholesky).unwrap();
        let g = build_tapered_precision(&a, p.mesh(), 0.4).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let back = TaperedPrecision::read_csv(&buf[..], p.mesh(), 0.4).unwrap();
        assert_eq!(back, g);
        assert!(TaperedPrecision::cache_file_name(p.mesh(), 0.4).starts_with("gamma_"));
    }

    #[test]
    fn pointwise_null_and_constant_cases() {
        let spec = ProblemSpec {
            source: ScalarField::Constant(0.0),
            boundary: ScalarField::Constant(0.0),
            family: OperatorFamily::Poisson,
        };
        let op = PointwiseOperator::from_params(OperatorFamily::Poisson, &[], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(pointwise_residual(|_| 0.0, &spec, op, Rect::UNIT, 20, 20, &mut rng).unwrap(), 0.0);
        let spec1 = ProblemSpec {
            source: ScalarField::Constant(1.0),
            ..spec
        };
        assert_eq!(pointwise_residual(|_| 0.0, &spec1, op, Rect::UNIT, 20, 20, &mut rng).unwrap(), 1.0);
    }

    #[test]
    fn perimeter_walk_stays_on_boundary() {
        for k in 0..40 {
            let p = perimeter_point(Rect::UNIT, k as f64 / 40.0);
            assert!(Rect::UNIT.on_boundary(p, 1e-12));
        }
    }
}
