//! P1 finite-element assembly, Dirichlet constraints and the exact forward solve.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::linalg::{self, CsrMatrix, FactorKind, Factorization, LinalgError};
use crate::mesh::{MeshError, TriMesh};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("diffusion coefficient must be positive, got {0}")]
    NonPositiveDiffusion(f64),
    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("point ({0}, {1}) lies outside the mesh")]
    OutsideDomain(f64, f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, FemError>;

/// A real-valued field on the domain.
#[derive(Clone)]
pub enum ScalarField {
    Constant(f64),
    /// Nodal P1 coefficients.
    Nodal(Vec<f64>),
    Function(Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>),
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Nodal(v) => write!(f, "Nodal(len {})", v.len()),
            Self::Function(_) => write!(f, "Function"),
        }
    }
}

impl ScalarField {
    pub fn function(f: impl Fn([f64; 2]) -> f64 + Send + Sync + 'static) -> Self {
        Self::Function(Arc::new(f))
    }

    /// Value at node `i`.
    pub fn at_node(&self, mesh: &TriMesh, i: usize) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Nodal(v) => v[i],
            Self::Function(f) => f(mesh.node(i)),
        }
    }

    /// Value at the midpoint of the edge joining nodes `i` and `j`.
    fn at_midpoint(&self, mesh: &TriMesh, i: usize, j: usize) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Nodal(v) => 0.5 * (v[i] + v[j]),
            Self::Function(f) => {
                let (a, b) = (mesh.node(i), mesh.node(j));
                f([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])])
            }
        }
    }

    pub fn nodal_values(&self, mesh: &TriMesh) -> Vec<f64> {
        (0..mesh.n_nodes()).map(|i| self.at_node(mesh, i)).collect()
    }

    fn check(&self, mesh: &TriMesh, what: &'static str) -> Result<()> {
        if let Self::Nodal(v) = self {
            if v.len() != mesh.n_nodes() {
                return Err(FemError::Length {
                    what,
                    expected: mesh.n_nodes(),
                    got: v.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorFamily {
    /// `-Δu`; no parameters.
    Poisson,
    /// `-a Δu + τ·∇u` with `z = (a, τ1, τ2)`.
    DiffusionTransport,
    /// `-∇·(a∇u) + τ·∇u` with `z = (g_1..g_N, τ1, τ2)` and `a = exp(vertex mean of g)` per element.
    NodalLogDiffusionTransport,
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub source: ScalarField,
    pub boundary: ScalarField,
    pub family: OperatorFamily,
}

/// Gradients of the three P1 basis functions on element `k`, and its area.
pub fn basis_gradients(mesh: &TriMesh, k: usize) -> ([[f64; 2]; 3], f64) {
    let [a, b, c] = mesh.element(k);
    let (p0, p1, p2) = (mesh.node(a), mesh.node(b), mesh.node(c));
    let area = crate::mesh::signed_area(p0, p1, p2);
    let s = 0.5 / area;
    (
        [
            [(p1[1] - p2[1]) * s, (p2[0] - p1[0]) * s],
            [(p2[1] - p0[1]) * s, (p0[0] - p2[0]) * s],
            [(p0[1] - p1[1]) * s, (p1[0] - p0[0]) * s],
        ],
        area,
    )
}

pub type LocalMatrix = [[f64; 3]; 3];

pub fn local_stiffness(mesh: &TriMesh, k: usize) -> LocalMatrix {
    let (g, area) = basis_gradients(mesh, k);
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = area * (g[r][0] * g[c][0] + g[r][1] * g[c][1]);
        }
    }
    m
}

pub fn local_mass(mesh: &TriMesh, k: usize) -> LocalMatrix {
    let area = mesh.element_area(k);
    let mut m = [[area / 12.0; 3]; 3];
    for (r, row) in m.iter_mut().enumerate() {
        row[r] = area / 6.0;
    }
    m
}

/// `∫ (τ·∇φ_c) φ_r` on element `k`; row `r` is the test function.
pub fn local_transport(mesh: &TriMesh, k: usize, tau: [f64; 2]) -> LocalMatrix {
    let (g, area) = basis_gradients(mesh, k);
    let mut m = [[0.0; 3]; 3];
    for row in m.iter_mut() {
        for c in 0..3 {
            row[c] = area / 3.0 * (tau[0] * g[c][0] + tau[1] * g[c][1]);
        }
    }
    m
}

/// `∫ f φ_r` on element `k` by the mid-edge rule.
pub fn local_load(mesh: &TriMesh, k: usize, f: &ScalarField) -> [f64; 3] {
    let e = mesh.element(k);
    let area = mesh.element_area(k);
    // midpoint m_r is opposite vertex r; φ_r is 1/2 at the other two midpoints
    let m = [
        f.at_midpoint(mesh, e[1], e[2]),
        f.at_midpoint(mesh, e[2], e[0]),
        f.at_midpoint(mesh, e[0], e[1]),
    ];
    let w = area / 3.0 * 0.5;
    [w * (m[1] + m[2]), w * (m[2] + m[0]), w * (m[0] + m[1])]
}

/// Sparsity pattern spanned by the mesh elements, plus slot lookup per element.
fn element_pattern(mesh: &TriMesh) -> (CsrMatrix, Vec<[usize; 9]>) {
    let mut trip = Vec::with_capacity(9 * mesh.n_elements());
    for e in mesh.elements() {
        for &r in e {
            for &c in e {
                trip.push((r, c, 0.0));
            }
        }
    }
    let n = mesh.n_nodes();
    let pattern = CsrMatrix::from_triplets(n, n, &trip).expect("element indices are in range");
    let slots = mesh
        .elements()
        .iter()
        .map(|e| {
            let mut s = [0usize; 9];
            for r in 0..3 {
                let (cols, _) = pattern.row(e[r]);
                let offset = pattern.row_offsets()[e[r]];
                for c in 0..3 {
                    s[3 * r + c] = offset + cols.binary_search(&e[c]).expect("pattern entry");
                }
            }
            s
        })
        .collect();
    (pattern, slots)
}

fn scatter(pattern: &CsrMatrix, slots: &[[usize; 9]], locals: impl Iterator<Item = (usize, LocalMatrix)>) -> CsrMatrix {
    let mut m = pattern.clone();
    let v = m.values_mut();
    v.iter_mut().for_each(|x| *x = 0.0);
    for (k, local) in locals {
        for r in 0..3 {
            for c in 0..3 {
                v[slots[k][3 * r + c]] += local[r][c];
            }
        }
    }
    m
}

pub fn assemble_stiffness(mesh: &TriMesh) -> Result<CsrMatrix> {
    check_elements(mesh)?;
    let (pattern, slots) = element_pattern(mesh);
    Ok(scatter(
        &pattern,
        &slots,
        (0..mesh.n_elements()).map(|k| (k, local_stiffness(mesh, k))),
    ))
}

pub fn assemble_mass(mesh: &TriMesh) -> Result<CsrMatrix> {
    check_elements(mesh)?;
    let (pattern, slots) = element_pattern(mesh);
    Ok(scatter(
        &pattern,
        &slots,
        (0..mesh.n_elements()).map(|k| (k, local_mass(mesh, k))),
    ))
}

pub fn assemble_load(mesh: &TriMesh, spec: &ProblemSpec) -> Result<Vec<f64>> {
    spec.source.check(mesh, "source")?;
    let mut b = vec![0.0; mesh.n_nodes()];
    for k in 0..mesh.n_elements() {
        let local = local_load(mesh, k, &spec.source);
        for (r, &i) in mesh.element(k).iter().enumerate() {
            b[i] += local[r];
        }
    }
    if b.iter().any(|x| !x.is_finite()) {
        return Err(FemError::NonFinite("load vector"));
    }
    Ok(b)
}

fn check_elements(mesh: &TriMesh) -> Result<()> {
    for k in 0..mesh.n_elements() {
        if mesh.element_area(k) <= 0.0 {
            return Err(MeshError::DegenerateElement { element: k }.into());
        }
    }
    Ok(())
}

/// One component's contribution on one element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementTerm {
    pub component: usize,
    pub local: LocalMatrix,
}

/// `L[z] = base + Σ_k c_k(z) C_k`, stored element by element on a shared pattern.
#[derive(Debug, Clone)]
pub struct OperatorDecomposition {
    family: OperatorFamily,
    n_nodes: usize,
    n_components: usize,
    pattern: CsrMatrix,
    slots: Vec<[usize; 9]>,
    base_local: Vec<LocalMatrix>,
    terms: Vec<Vec<ElementTerm>>,
    /// Vertex lists, kept for the nodal-log coefficient map.
    elements: Vec<[usize; 3]>,
}

pub fn assemble_operator(mesh: &TriMesh, family: OperatorFamily) -> Result<OperatorDecomposition> {
    check_elements(mesh)?;
    let (pattern, slots) = element_pattern(mesh);
    let ne = mesh.n_elements();
    let zero = [[0.0; 3]; 3];
    let mut base_local = vec![zero; ne];
    let mut terms = vec![Vec::new(); ne];
    let n_components = match family {
        OperatorFamily::Poisson => 0,
        OperatorFamily::DiffusionTransport => 3,
        OperatorFamily::NodalLogDiffusionTransport => ne + 2,
    };
    for k in 0..ne {
        let stiff = local_stiffness(mesh, k);
        let t1 = local_transport(mesh, k, [1.0, 0.0]);
        let t2 = local_transport(mesh, k, [0.0, 1.0]);
        let first = match family {
            OperatorFamily::Poisson => {
                base_local[k] = stiff;
                continue;
            }
            OperatorFamily::DiffusionTransport => {
                terms[k].push(ElementTerm { component: 0, local: stiff });
                1
            }
            OperatorFamily::NodalLogDiffusionTransport => {
                terms[k].push(ElementTerm { component: k, local: stiff });
                ne
            }
        };
        terms[k].push(ElementTerm { component: first, local: t1 });
        terms[k].push(ElementTerm { component: first + 1, local: t2 });
    }
    Ok(OperatorDecomposition {
        family,
        n_nodes: mesh.n_nodes(),
        n_components,
        pattern,
        slots,
        base_local,
        terms,
        elements: mesh.elements().to_vec(),
    })
}

impl OperatorDecomposition {
    pub fn family(&self) -> OperatorFamily {
        self.family
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Length of the parameter vector `z`.
    pub fn n_params(&self) -> usize {
        match self.family {
            OperatorFamily::Poisson => 0,
            OperatorFamily::DiffusionTransport => 3,
            OperatorFamily::NodalLogDiffusionTransport => self.n_nodes + 2,
        }
    }

    pub fn pattern(&self) -> &CsrMatrix {
        &self.pattern
    }

    pub fn base_local(&self, k: usize) -> &LocalMatrix {
        &self.base_local[k]
    }

    pub fn element_terms(&self, k: usize) -> &[ElementTerm] {
        &self.terms[k]
    }

    fn check_params(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.n_params() {
            return Err(FemError::Length {
                what: "operator parameters",
                expected: self.n_params(),
                got: z.len(),
            });
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(FemError::NonFinite("operator parameters"));
        }
        Ok(())
    }

    /// Component coefficients `c(z)`.
    pub fn coefficients(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_params(z)?;
        Ok(match self.family {
            OperatorFamily::Poisson => Vec::new(),
            OperatorFamily::DiffusionTransport => {
                if z[0] <= 0.0 {
                    return Err(FemError::NonPositiveDiffusion(z[0]));
                }
                z.to_vec()
            }
            OperatorFamily::NodalLogDiffusionTransport => {
                let n = self.n_nodes;
                let mut c: Vec<f64> = self
                    .elements
                    .iter()
                    .map(|e| ((z[e[0]] + z[e[1]] + z[e[2]]) / 3.0).exp())
                    .collect();
                c.push(z[n]);
                c.push(z[n + 1]);
                c
            }
        })
    }

    /// Sparse rows of `∂c_k/∂z`: one list of `(param index, derivative)` per component.
    pub fn coefficient_jacobian(&self, z: &[f64]) -> Result<Vec<Vec<(usize, f64)>>> {
        let c = self.coefficients(z)?;
        Ok(match self.family {
            OperatorFamily::Poisson => Vec::new(),
            OperatorFamily::DiffusionTransport => (0..3).map(|k| vec![(k, 1.0)]).collect(),
            OperatorFamily::NodalLogDiffusionTransport => {
                let n = self.n_nodes;
                let mut jac: Vec<Vec<(usize, f64)>> = self
                    .elements
                    .iter()
                    .zip(&c)
                    .map(|(e, &ck)| e.iter().map(|&v| (v, ck / 3.0)).collect())
                    .collect();
                jac.push(vec![(n, 1.0)]);
                jac.push(vec![(n + 1, 1.0)]);
                jac
            }
        })
    }

    /// Element matrix of `base + Σ c_k C_k` on element `k`.
    pub fn element_matrix(&self, k: usize, coeffs: &[f64]) -> LocalMatrix {
        let mut m = self.base_local[k];
        for t in &self.terms[k] {
            let c = coeffs[t.component];
            for r in 0..3 {
                for s in 0..3 {
                    m[r][s] += c * t.local[r][s];
                }
            }
        }
        m
    }

    pub fn combine(&self, coeffs: &[f64]) -> Result<CsrMatrix> {
        if coeffs.len() != self.n_components {
            return Err(FemError::Length {
                what: "component coefficients",
                expected: self.n_components,
                got: coeffs.len(),
            });
        }
        Ok(scatter(
            &self.pattern,
            &self.slots,
            (0..self.slots.len()).map(|k| (k, self.element_matrix(k, coeffs))),
        ))
    }

    pub fn assemble(&self, z: &[f64]) -> Result<CsrMatrix> {
        self.combine(&self.coefficients(z)?)
    }

    pub fn base(&self) -> CsrMatrix {
        scatter(
            &self.pattern,
            &self.slots,
            self.base_local.iter().copied().enumerate(),
        )
    }

    pub fn component(&self, j: usize) -> CsrMatrix {
        scatter(
            &self.pattern,
            &self.slots,
            self.terms.iter().enumerate().flat_map(|(k, ts)| {
                ts.iter()
                    .filter(move |t| t.component == j)
                    .map(move |t| (k, t.local))
            }),
        )
    }

    /// `λᵀ C_k u` for every component.
    pub fn component_bilinear(&self, lambda: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_components];
        for (k, e) in self.elements.iter().enumerate() {
            for t in &self.terms[k] {
                let mut s = 0.0;
                for r in 0..3 {
                    for c in 0..3 {
                        s += lambda[e[r]] * t.local[r][c] * u[e[c]];
                    }
                }
                out[t.component] += s;
            }
        }
        out
    }
}

/// Maps a latent vector to operator parameters and a source scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatentMap {
    /// `z` is the operator parameter vector itself.
    Direct,
    /// `z = (τ1, τ2)` with fixed diffusion `a`.
    FixedDiffusion(f64),
    /// Scalar `z` multiplies the source; the operator is parameter-free.
    SourceScale,
}

/// A complete forward problem `L[z] u = f(z)`, `u = g` on the boundary.
#[derive(Debug, Clone)]
pub struct ForwardProblem {
    mesh: TriMesh,
    spec: ProblemSpec,
    decomposition: OperatorDecomposition,
    latent: LatentMap,
    load: Vec<f64>,
    boundary_values: Vec<f64>,
}

impl ForwardProblem {
    pub fn new(mesh: TriMesh, spec: ProblemSpec, latent: LatentMap) -> Result<Self> {
        spec.boundary.check(&mesh, "boundary")?;
        let decomposition = assemble_operator(&mesh, spec.family)?;
        let load = assemble_load(&mesh, &spec)?;
        let boundary_values = (0..mesh.n_nodes())
            .map(|i| {
                if mesh.is_boundary(i) {
                    spec.boundary.at_node(&mesh, i)
                } else {
                    0.0
                }
            })
            .collect();
        let p = Self {
            mesh,
            spec,
            decomposition,
            latent,
            load,
            boundary_values,
        };
        match latent {
            LatentMap::FixedDiffusion(a) if p.spec.family != OperatorFamily::DiffusionTransport || a <= 0.0 => {
                return Err(FemError::NonPositiveDiffusion(a));
            }
            LatentMap::SourceScale if p.spec.family != OperatorFamily::Poisson => {
                return Err(FemError::Length {
                    what: "source-scale operator parameters",
                    expected: 0,
                    got: p.decomposition.n_params(),
                });
            }
            _ => {}
        }
        Ok(p)
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn decomposition(&self) -> &OperatorDecomposition {
        &self.decomposition
    }

    pub fn latent_map(&self) -> LatentMap {
        self.latent
    }

    pub fn latent_dim(&self) -> usize {
        match self.latent {
            LatentMap::Direct => self.decomposition.n_params(),
            LatentMap::FixedDiffusion(_) => 2,
            LatentMap::SourceScale => 1,
        }
    }

    /// Dirichlet data at boundary nodes, zero elsewhere.
    pub fn boundary_values(&self) -> &[f64] {
        &self.boundary_values
    }

    /// Load vector for unit source scale.
    pub fn base_load(&self) -> &[f64] {
        &self.load
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim() {
            return Err(FemError::Length {
                what: "latent vector",
                expected: self.latent_dim(),
                got: z.len(),
            });
        }
        Ok(())
    }

    pub fn operator_params(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        Ok(match self.latent {
            LatentMap::Direct => z.to_vec(),
            LatentMap::FixedDiffusion(a) => vec![a, z[0], z[1]],
            LatentMap::SourceScale => Vec::new(),
        })
    }

    /// `∂(operator params)/∂z` as a dense `n_params x latent_dim` matrix.
    pub fn param_jacobian(&self) -> Vec<Vec<f64>> {
        let d = self.latent_dim();
        match self.latent {
            LatentMap::Direct => (0..d)
                .map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect())
                .collect(),
            LatentMap::FixedDiffusion(_) => vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            LatentMap::SourceScale => Vec::new(),
        }
    }

    pub fn source_scale(&self, z: &[f64]) -> f64 {
        match self.latent {
            LatentMap::SourceScale => z[0],
            _ => 1.0,
        }
    }

    pub fn coefficients(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decomposition.coefficients(&self.operator_params(z)?)
    }

    /// Unconstrained `L[z]`.
    pub fn operator(&self, z: &[f64]) -> Result<CsrMatrix> {
        self.decomposition.combine(&self.coefficients(z)?)
    }

    pub fn load(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        let s = self.source_scale(z);
        Ok(self.load.iter().map(|b| s * b).collect())
    }

    pub fn constrained_system(&self, z: &[f64]) -> Result<(CsrMatrix, Vec<f64>)> {
        let l = self.operator(z)?;
        let f = self.load(z)?;
        apply_dirichlet(&l, &f, &self.mesh, &self.boundary_values)
    }

    /// Dirichlet-constrained stiffness `blockdiag(I, A_II)`.
    pub fn constrained_stiffness(&self) -> Result<CsrMatrix> {
        let a = assemble_stiffness(&self.mesh)?;
        let zero = vec![0.0; self.mesh.n_nodes()];
        Ok(apply_dirichlet(&a, &zero, &self.mesh, &zero)?.0)
    }

    pub fn solve(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (l, f) = self.constrained_system(z)?;
        solve_forward(&l, &f)
    }

    /// Replaces boundary entries of `mu` by the Dirichlet data.
    pub fn with_boundary(&self, mu: &[f64]) -> Vec<f64> {
        mu.iter()
            .enumerate()
            .map(|(i, &m)| {
                if self.mesh.is_boundary(i) {
                    self.boundary_values[i]
                } else {
                    m
                }
            })
            .collect()
    }

    /// Weak-form residual `L[z]μ − f` on interior rows, zero on boundary rows.
    /// Boundary entries of `mu` are replaced by the Dirichlet data.
    pub fn residual(&self, z: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
        if mu.len() != self.mesh.n_nodes() {
            return Err(FemError::Length {
                what: "field",
                expected: self.mesh.n_nodes(),
                got: mu.len(),
            });
        }
        let l = self.operator(z)?;
        let f = self.load(z)?;
        let mut r = l.spmv(&self.with_boundary(mu))?;
        for (i, ri) in r.iter_mut().enumerate() {
            *ri = if self.mesh.is_boundary(i) { 0.0 } else { *ri - f[i] };
        }
        Ok(r)
    }
}

/// Strong Dirichlet rows with symmetric elimination of boundary columns.
/// `g` holds nodal values; only boundary entries are read.
pub fn apply_dirichlet(l: &CsrMatrix, f: &[f64], mesh: &TriMesh, g: &[f64]) -> Result<(CsrMatrix, Vec<f64>)> {
    let n = mesh.n_nodes();
    for (what, len) in [("operator rows", l.n_rows()), ("load", f.len()), ("boundary data", g.len())] {
        if len != n {
            return Err(FemError::Length { what, expected: n, got: len });
        }
    }
    let mut trip = Vec::with_capacity(l.nnz());
    let mut rhs = f.to_vec();
    for i in 0..n {
        if mesh.is_boundary(i) {
            trip.push((i, i, 1.0));
            rhs[i] = g[i];
            continue;
        }
        let (cols, vals) = l.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            if mesh.is_boundary(j) {
                rhs[i] -= v * g[j];
            } else {
                trip.push((i, j, v));
            }
        }
    }
    Ok((CsrMatrix::from_triplets(n, n, &trip)?, rhs))
}

/// Solves a constrained system; LU unless the matrix is symmetric.
pub fn solve_forward(l: &CsrMatrix, f: &[f64]) -> Result<Vec<f64>> {
    let kind = if l.is_symmetric(1e-14 * l.max_abs()) {
        FactorKind::Cholesky
    } else {
        FactorKind::Lu
    };
    let fac: Factorization = linalg::factorize(l, kind)?;
    Ok(fac.solve(f)?)
}

/// P1 interpolation of nodal field `u` at `x`.
pub fn interpolate(mesh: &TriMesh, u: &[f64], x: [f64; 2]) -> Result<f64> {
    let (k, bc) = mesh.locate(x).ok_or(FemError::OutsideDomain(x[0], x[1]))?;
    let e = mesh.element(k);
    Ok(bc[0] * u[e[0]] + bc[1] * u[e[1]] + bc[2] * u[e[2]])
}

/// `‖u_h − u‖_{L²}` for a nodal P1 field against an exact function, by a degree-4 rule.
pub fn l2_error(mesh: &TriMesh, u: &[f64], exact: impl Fn([f64; 2]) -> f64) -> f64 {
    // Six-point symmetric rule on the reference triangle (weights sum to 1).
    const RULE: [(f64, f64, f64); 2] = [
        (0.445948490915965, 0.108103018168070, 0.223381589678011),
        (0.091576213509771, 0.816847572980459, 0.109951743655322),
    ];
    let mut acc = 0.0;
    for k in 0..mesh.n_elements() {
        let e = mesh.element(k);
        let x = e.map(|i| mesh.node(i));
        let area = mesh.element_area(k);
        for &(a, b, w) in &RULE {
            for bc in [[a, a, b], [a, b, a], [b, a, a]] {
                let p = [
                    bc[0] * x[0][0] + bc[1] * x[1][0] + bc[2] * x[2][0],
                    bc[0] * x[0][1] + bc[1] * x[1][1] + bc[2] * x[2][1],
                ];
                let uh = bc[0] * u[e[0]] + bc[1] * u[e[1]] + bc[2] * u[e[2]];
                acc += w * area * (uh - exact(p)).powi(2);
            }
        }
    }
    acc.sqrt()
}

/// Sparse interpolation operator: row `s` evaluates a nodal field at `points[s]`.
pub fn interpolation_matrix(mesh: &TriMesh, points: &[[f64; 2]]) -> Result<CsrMatrix> {
    let mut trip = Vec::with_capacity(3 * points.len());
    for (s, &x) in points.iter().enumerate() {
        let (k, bc) = mesh.locate(x).ok_or(FemError::OutsideDomain(x[0], x[1]))?;
        for (r, &i) in mesh.element(k).iter().enumerate() {
            trip.push((s, i, bc[r]));
        }
    }
    Ok(CsrMatrix::from_triplets(points.len(), mesh.n_nodes(), &trip)?)
}

/// Writes `node_index,x,y,value` rows.
pub fn write_field_csv<W: Write>(mut out: W, mesh: &TriMesh, u: &[f64]) -> io::Result<()> {
    writeln!(out, "node_index,x,y,value")?;
    for (i, (p, v)) in mesh.nodes().iter().zip(u).enumerate() {
        writeln!(out, "{i},{:?},{:?},{:?}", p[0], p[1], v)?;
    }
    Ok(())
}
