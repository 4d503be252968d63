//! Constrained variational inference: Gaussian q(z), KL, likelihood, the penalised
//! objective, ε annealing and Adam.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::io::{self, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::fem::{interpolation_matrix, local_load, FemError, ForwardProblem, LatentMap, OperatorFamily, ScalarField};
use crate::linalg::{CsrMatrix, LinalgError};
use crate::mesh::{node_adjacency, Adjacency};
use crate::relax::{build_minipatch, perimeter_point, sample_centers, PatchSampling, TaperedPrecision};
use crate::surrogate::{stack_inputs, InputSpec, Mlp, NoiseModel, SurrogateError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("non-finite loss at step {step}: neg_loglik={neg_loglik}, kl={kl}, penalty={penalty}")]
    NonFinite {
        step: usize,
        neg_loglik: f64,
        kl: f64,
        penalty: f64,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ViError>;

/// `q(z) = N(m, S Sᵀ)` with `S` lower triangular, diagonal stored as logs.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVariational {
    pub mean: Vec<f64>,
    pub diag_log: Vec<f64>,
    /// Strictly lower entries, row-major: (1,0), (2,0), (2,1), ...
    pub lower: Vec<f64>,
}

/// Floor applied to `diag_log` when sampling outside the tape.
const DIAG_LOG_FLOOR: f64 = -700.0;

impl GaussianVariational {
    pub fn standard(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            diag_log: vec![0.0; d],
            lower: vec![0.0; d * d.saturating_sub(1) / 2],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn scale_matrix(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        let mut s = vec![vec![0.0; d]; d];
        let mut k = 0;
        for (i, row) in s.iter_mut().enumerate() {
            for v in row.iter_mut().take(i) {
                *v = self.lower[k];
                k += 1;
            }
            row[i] = self.diag_log[i].max(DIAG_LOG_FLOOR).exp();
        }
        s
    }

    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let s = self.scale_matrix();
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| (0..d).map(|k| s[i][k] * s[j][k]).sum()).collect())
            .collect()
    }

    pub fn marginal_sd(&self) -> Vec<f64> {
        let c = self.covariance();
        (0..self.dim()).map(|i| c[i][i].sqrt()).collect()
    }

    /// `z = m + S ξ`.
    pub fn transform(&self, xi: &[f64]) -> Vec<f64> {
        let s = self.scale_matrix();
        (0..self.dim())
            .map(|i| self.mean[i] + (0..=i).map(|k| s[i][k] * xi[k]).sum::<f64>())
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let xi: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        (self.transform(&xi), xi)
    }

    pub fn n_params(&self) -> usize {
        2 * self.dim() + self.lower.len()
    }
}

/// `KL(q ‖ N(0, I))`.
pub fn kl_to_standard_normal(q: &GaussianVariational) -> f64 {
    let d = q.dim() as f64;
    let m2: f64 = q.mean.iter().map(|x| x * x).sum();
    let tr: f64 = q.diag_log.iter().map(|l| (2.0 * l).exp()).sum::<f64>() + q.lower.iter().map(|x| x * x).sum::<f64>();
    0.5 * (m2 + tr - d - 2.0 * q.diag_log.iter().sum::<f64>())
}

/// Variational parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct QVars {
    pub mean: Var,
    pub diag_log: Var,
    pub lower: Option<Var>,
    d: usize,
}

impl QVars {
    pub fn record(q: &GaussianVariational, tape: &Tape) -> Self {
        Self {
            mean: tape.vector(q.mean.clone()),
            diag_log: tape.vector(q.diag_log.clone()),
            lower: (!q.lower.is_empty()).then(|| tape.vector(q.lower.clone())),
            d: q.dim(),
        }
    }

    /// Reparameterised `z = m + S ξ` as a `d x 1` vector.
    pub fn sample_with(&self, xi: &[f64]) -> Result<Var> {
        let tape = self.mean.tape();
        let xi_v = tape.constant(Tensor::vector(xi.to_vec()));
        let mut z = self.mean.add(&self.diag_log.exp().mul(&xi_v)?)?;
        if let Some(lower) = &self.lower {
            let mut trip = Vec::with_capacity(lower.shape().0);
            let mut k = 0;
            for i in 0..self.d {
                for &xj in xi.iter().take(i) {
                    trip.push((i, k, xj));
                    k += 1;
                }
            }
            let b = CsrMatrix::from_triplets(self.d, k, &trip)?;
            z = z.add(&lower.sparse_matvec(Arc::new(b))?)?;
        }
        Ok(z)
    }

    pub fn kl(&self) -> Result<Var> {
        let tape = self.mean.tape();
        let mut tr = self.diag_log.scale(2.0).exp().sum();
        if let Some(lower) = &self.lower {
            tr = tr.add(&lower.square().sum())?;
        }
        let s = self
            .mean
            .square()
            .sum()
            .add(&tr)?
            .sub(&self.diag_log.sum().scale(2.0))?
            .sub(&tape.constant(Tensor::scalar(self.d as f64)))?;
        Ok(s.scale(0.5))
    }

    pub fn all(&self) -> Vec<&Var> {
        let mut v = vec![&self.mean, &self.diag_log];
        if let Some(l) = &self.lower {
            v.push(l);
        }
        v
    }
}

/// Draws `(z, ξ)` from `q` on the tape.
pub fn sample_q<R: Rng + ?Sized>(q: &QVars, rng: &mut R) -> Result<(Var, Vec<f64>)> {
    let xi: Vec<f64> = (0..q.d).map(|_| rng.sample(StandardNormal)).collect();
    Ok((q.sample_with(&xi)?, xi))
}

/// Sensor locations and noisy field values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Observations {
    pub points: Vec<[f64; 2]>,
    pub values: Vec<f64>,
}

impl Observations {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `Σ_n log N(y_n | (Wμ)_n, σ²)`.
pub fn log_likelihood(y: &[f64], interp: &CsrMatrix, mu: &[f64], noise: NoiseModel) -> Result<f64> {
    let pred = interp.spmv(mu)?;
    let s2 = noise.variance();
    Ok(y
        .iter()
        .zip(&pred)
        .map(|(yi, pi)| -0.5 * (yi - pi).powi(2) / s2 - 0.5 * (2.0 * PI * s2).ln())
        .sum())
}

/// Geometric ε decay from `start` to `end` over `period` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub period: usize,
    pub cyclic: bool,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 0.1,
            end: 0.01,
            period: 1000,
            cyclic: true,
        }
    }
}

impl EpsilonSchedule {
    pub fn constant(eps: f64) -> Self {
        Self {
            start: eps,
            end: eps,
            period: 1,
            cyclic: false,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.period <= 1 {
            return self.end;
        }
        let t = if self.cyclic {
            step % self.period
        } else {
            step.min(self.period - 1)
        };
        let frac = t as f64 / (self.period - 1) as f64;
        self.start * (self.end / self.start).powf(frac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// One bias-corrected Adam step.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "adam: parameter and gradient lengths");
    if state.m.len() != params.len() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
        state.t = 0;
    }
    state.t += 1;
    let b1t = 1.0 - cfg.beta1.powi(state.t as i32);
    let b2t = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / b1t;
        let vh = state.v[i] / b2t;
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Which mechanism penalty enters the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    /// Tapered mini-patch estimate of `‖Lμ − f‖²_A`.
    WeakForm(PatchSampling),
    /// Strong-form collocation residual.
    Pointwise { n_int: usize, n_bnd: usize },
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Latent samples per step.
    pub samples: usize,
    pub penalty: Penalty,
    pub schedule: EpsilonSchedule,
    pub adam: AdamConfig,
    pub learn_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            samples: 1,
            penalty: Penalty::WeakForm(PatchSampling::Uniform(1)),
            schedule: EpsilonSchedule::default(),
            adam: AdamConfig::default(),
            learn_noise: true,
        }
    }
}

/// Everything that is optimised.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalModel {
    pub q: GaussianVariational,
    pub mlp: Mlp,
    pub noise: NoiseModel,
    pub input: InputSpec,
}

impl VariationalModel {
    /// `[mean, diag_log, lower, log_sigma, network]`.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = self.q.mean.clone();
        p.extend(&self.q.diag_log);
        p.extend(&self.q.lower);
        p.push(self.noise.log_sigma);
        p.extend(self.mlp.params_flat());
        p
    }

    pub fn set_params_flat(&mut self, p: &[f64]) {
        let d = self.q.dim();
        let nl = self.q.lower.len();
        self.q.mean.copy_from_slice(&p[..d]);
        self.q.diag_log.copy_from_slice(&p[d..2 * d]);
        self.q.lower.copy_from_slice(&p[2 * d..2 * d + nl]);
        self.noise.log_sigma = p[2 * d + nl];
        self.mlp.set_params_flat(&p[2 * d + nl + 1..]);
    }

    fn latent_input(&self, z: &[f64]) -> Option<Vec<f64>> {
        match self.input {
            InputSpec::CoordinatesAndLatent => Some(z.to_vec()),
            InputSpec::CoordinatesOnly => None,
        }
    }

    /// Surrogate field at all nodes, boundary entries replaced by the Dirichlet data.
    pub fn field(&self, problem: &ForwardProblem, z: &[f64]) -> Result<Vec<f64>> {
        let mu = self
            .mlp
            .eval_batch(&stack_inputs(problem.mesh().nodes(), self.latent_input(z).as_deref()))?;
        Ok(problem.with_boundary(&mu))
    }

    /// Posterior-predictive mean at `points` from `n` draws of `q`.
    pub fn predictive_mean<R: Rng + ?Sized>(
        &self,
        problem: &ForwardProblem,
        points: &[[f64; 2]],
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let w = interpolation_matrix(problem.mesh(), points)?;
        let mut acc = vec![0.0; points.len()];
        for _ in 0..n {
            let (z, _) = self.q.sample(rng);
            let pred = w.spmv(&self.field(problem, &z)?)?;
            acc.iter_mut().zip(&pred).for_each(|(a, p)| *a += p / n as f64);
        }
        Ok(acc)
    }
}

/// Random draws consumed by one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws {
    pub xi: Vec<Vec<f64>>,
    pub centers: Vec<Vec<usize>>,
    pub colloc_int: Vec<Vec<[f64; 2]>>,
    pub colloc_bnd: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub epsilon: f64,
    pub neg_loglik: f64,
    pub kl: f64,
    /// `(1/M) Σ_m` penalty estimate, before the `1/2ε²` weight.
    pub penalty: f64,
    pub total: f64,
}

/// Constant operators mapping surrogate outputs on `nodes` to residual rows.
#[derive(Debug)]
struct ResidualOps {
    eval_nodes: Tensor,
    sel: Arc<CsrMatrix>,
    offset: Tensor,
    base: Option<Arc<CsrMatrix>>,
    comps: Vec<usize>,
    stacked: Option<Arc<CsrMatrix>>,
    rep: Option<Arc<CsrMatrix>>,
    fold: Option<Arc<CsrMatrix>>,
    load: Tensor,
}

/// One local residual term.
#[derive(Debug)]
struct PatchOps {
    res: ResidualOps,
    gamma: Tensor,
    center_pos: usize,
}

/// Every local term at once: `Σ_i R_i (ΓR)_i = RᵀΓR` over interior rows.
#[derive(Debug)]
struct GlobalOps {
    res: ResidualOps,
    gamma: Arc<CsrMatrix>,
}

/// Constant operators for the likelihood.
#[derive(Debug)]
struct SensorOps {
    eval_nodes: Tensor,
    sel: Arc<CsrMatrix>,
    offset: Tensor,
    interp: Arc<CsrMatrix>,
    y: Tensor,
}

fn selection(
    problem: &ForwardProblem,
    nodes: &[usize],
) -> Result<(Tensor, Arc<CsrMatrix>, Tensor)> {
    let mesh = problem.mesh();
    let g = problem.boundary_values();
    let eval: Vec<usize> = nodes.iter().copied().filter(|&i| !mesh.is_boundary(i)).collect();
    let pts: Vec<[f64; 2]> = eval.iter().map(|&i| mesh.node(i)).collect();
    let mut trip = Vec::with_capacity(eval.len());
    let mut offset = vec![0.0; nodes.len()];
    let mut k = 0;
    for (pos, &i) in nodes.iter().enumerate() {
        if mesh.is_boundary(i) {
            offset[pos] = g[i];
        } else {
            trip.push((pos, k, 1.0));
            k += 1;
        }
    }
    Ok((
        stack_inputs(&pts, None),
        Arc::new(CsrMatrix::from_triplets(nodes.len(), eval.len(), &trip)?),
        Tensor::vector(offset),
    ))
}

/// Residual rows `rows` assembled from `elements`, with the surrogate evaluated on `nodes`.
fn residual_ops(problem: &ForwardProblem, rows: &[usize], nodes: &[usize], elements: &[usize]) -> Result<ResidualOps> {
    let mesh = problem.mesh();
    let dec = problem.decomposition();
    let col = |i: usize| nodes.binary_search(&i).expect("patch node");
    let nr = rows.len();
    let mut comp_pos: BTreeMap<usize, usize> = BTreeMap::new();
    for &k in elements {
        for t in dec.element_terms(k) {
            let next = comp_pos.len();
            comp_pos.entry(t.component).or_insert(next);
        }
    }
    let mut comps = vec![0usize; comp_pos.len()];
    for (&c, &p) in &comp_pos {
        comps[p] = c;
    }
    let nk = comps.len();
    let mut base = Vec::new();
    let mut stacked = Vec::new();
    let mut load = vec![0.0; nr];
    for &k in elements {
        let e = mesh.element(k);
        let local_load = local_load(mesh, k, &problem.spec().source);
        for r in 0..3 {
            let Ok(rp) = rows.binary_search(&e[r]) else { continue };
            load[rp] += local_load[r];
            for c in 0..3 {
                let cp = col(e[c]);
                let b = dec.base_local(k)[r][c];
                if b != 0.0 {
                    base.push((rp, cp, b));
                }
                for t in dec.element_terms(k) {
                    stacked.push((comp_pos[&t.component] * nr + rp, cp, t.local[r][c]));
                }
            }
        }
    }
    let (eval_nodes, sel, offset) = selection(problem, nodes)?;
    let m = |r: usize, c: usize, t: &[(usize, usize, f64)]| -> Result<Arc<CsrMatrix>> {
        Ok(Arc::new(CsrMatrix::from_triplets(r, c, t)?))
    };
    let (stacked, rep, fold) = if nk > 0 {
        let rep: Vec<_> = (0..nk * nr).map(|i| (i, i / nr, 1.0)).collect();
        let fold: Vec<_> = (0..nk * nr).map(|i| (i % nr, i, 1.0)).collect();
        (
            Some(m(nk * nr, nodes.len(), &stacked)?),
            Some(m(nk * nr, nk, &rep)?),
            Some(m(nr, nk * nr, &fold)?),
        )
    } else {
        (None, None, None)
    };
    Ok(ResidualOps {
        eval_nodes,
        sel,
        offset,
        base: if base.is_empty() { None } else { Some(m(nr, nodes.len(), &base)?) },
        comps,
        stacked,
        rep,
        fold,
        load: Tensor::vector(load),
    })
}

/// Builds and caches taped objectives for one problem and dataset.
pub struct Trainer<'a> {
    problem: &'a ForwardProblem,
    gamma: Option<&'a TaperedPrecision>,
    adjacency: Adjacency,
    sensors: Option<SensorOps>,
    patches: HashMap<usize, Arc<PatchOps>>,
    global: Option<Arc<GlobalOps>>,
    config: TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(
        problem: &'a ForwardProblem,
        data: &Observations,
        gamma: Option<&'a TaperedPrecision>,
        config: TrainConfig,
    ) -> Result<Self> {
        if config.samples == 0 {
            return Err(ViError::Config("latent samples per step must be at least 1".into()));
        }
        if matches!(config.penalty, Penalty::WeakForm(_)) && gamma.is_none() {
            return Err(ViError::Config("weak-form penalty needs a tapered precision".into()));
        }
        if matches!(config.penalty, Penalty::WeakForm(PatchSampling::Uniform(0))) {
            return Err(ViError::Config("patches per step must be at least 1".into()));
        }
        if data.points.len() != data.values.len() {
            return Err(ViError::Config("sensor points and values differ in length".into()));
        }
        let sensors = if data.is_empty() {
            None
        } else {
            let w = interpolation_matrix(problem.mesh(), &data.points)?;
            let mut nodes: Vec<usize> = w.col_indices().to_vec();
            nodes.sort_unstable();
            nodes.dedup();
            let pos: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(p, &i)| (i, p)).collect();
            let mut trip = Vec::with_capacity(w.nnz());
            for s in 0..w.n_rows() {
                let (cols, vals) = w.row(s);
                for (&c, &v) in cols.iter().zip(vals) {
                    trip.push((s, pos[&c], v));
                }
            }
            let (eval_nodes, sel, offset) = selection(problem, &nodes)?;
            Some(SensorOps {
                eval_nodes,
                sel,
                offset,
                interp: Arc::new(CsrMatrix::from_triplets(w.n_rows(), nodes.len(), &trip)?),
                y: Tensor::vector(data.values.clone()),
            })
        };
        Ok(Self {
            problem,
            gamma,
            adjacency: node_adjacency(problem.mesh()),
            sensors,
            patches: HashMap::new(),
            global: None,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Builds the local operators of every interior patch (or the whole-mesh pass) up front.
    pub fn prebuild_patches(&mut self) -> Result<()> {
        if self.gamma.is_none() {
            return Ok(());
        }
        if self.config.penalty == Penalty::WeakForm(PatchSampling::Stratified) {
            self.global_ops()?;
            return Ok(());
        }
        let mesh = self.problem.mesh();
        for i in 0..mesh.n_nodes() {
            if !mesh.is_boundary(i) {
                self.patch_ops(i)?;
            }
        }
        Ok(())
    }

    fn patch_ops(&mut self, center: usize) -> Result<Arc<PatchOps>> {
        if let Some(p) = self.patches.get(&center) {
            return Ok(p.clone());
        }
        let gamma = self.gamma.expect("checked at construction");
        let mesh = self.problem.mesh();
        let patch = build_minipatch(mesh, &self.adjacency, gamma, center);
        let rows: Vec<usize> = patch
            .gamma_nodes
            .iter()
            .copied()
            .filter(|&j| !mesh.is_boundary(j))
            .collect();
        let res = residual_ops(self.problem, &rows, &patch.nodes(), &patch.active_elements)?;
        let row = gamma.row(center);
        let gamma_vals: Vec<f64> = rows
            .iter()
            .map(|j| row.binary_search_by_key(j, |&(c, _)| c).map_or(0.0, |p| row[p].1))
            .collect();
        let ops = Arc::new(PatchOps {
            res,
            gamma: Tensor::vector(gamma_vals),
            center_pos: rows.binary_search(&center).expect("interior center is a residual row"),
        });
        self.patches.insert(center, ops.clone());
        Ok(ops)
    }

    fn global_ops(&mut self) -> Result<Arc<GlobalOps>> {
        if let Some(g) = &self.global {
            return Ok(g.clone());
        }
        let gamma = self.gamma.expect("checked at construction");
        let mesh = self.problem.mesh();
        let rows = mesh.interior_nodes();
        let nodes: Vec<usize> = (0..mesh.n_nodes()).collect();
        let elements: Vec<usize> = (0..mesh.n_elements()).collect();
        let res = residual_ops(self.problem, &rows, &nodes, &elements)?;
        let mut trip = Vec::new();
        for (rp, &i) in rows.iter().enumerate() {
            for &(j, v) in gamma.row(i) {
                if let Ok(cp) = rows.binary_search(&j) {
                    trip.push((rp, cp, v));
                }
            }
        }
        let ops = Arc::new(GlobalOps {
            res,
            gamma: Arc::new(CsrMatrix::from_triplets(rows.len(), rows.len(), &trip)?),
        });
        self.global = Some(ops.clone());
        Ok(ops)
    }

    /// Taped coefficients `c_k(z)` for the listed components.
    fn coefficients(&self, z: &Var, comps: &[usize]) -> Result<Var> {
        let tape = z.tape();
        let dec = self.problem.decomposition();
        let idx = Arc::new(comps.to_vec());
        match (self.problem.latent_map(), dec.family()) {
            (LatentMap::FixedDiffusion(a), _) => {
                let full = tape.constant(Tensor::vector(vec![a])).concat(z)?;
                Ok(full.gather(idx)?)
            }
            (LatentMap::Direct, OperatorFamily::DiffusionTransport) => Ok(z.gather(idx)?),
            (LatentMap::Direct, OperatorFamily::NodalLogDiffusionTransport) => {
                let ne = dec.n_components() - 2;
                let n = dec.n_nodes();
                let mut trip = Vec::new();
                let mut mask = vec![0.0; comps.len()];
                let elements = self.problem.mesh().elements();
                for (r, &c) in comps.iter().enumerate() {
                    if c < ne {
                        for &v in &elements[c] {
                            trip.push((r, v, 1.0 / 3.0));
                        }
                        mask[r] = 1.0;
                    } else {
                        trip.push((r, n + (c - ne), 1.0));
                    }
                }
                let avg = Arc::new(CsrMatrix::from_triplets(comps.len(), n + 2, &trip)?);
                let pre = z.sparse_matvec(avg)?;
                let inv: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
                let mask = tape.constant(Tensor::vector(mask));
                let inv = tape.constant(Tensor::vector(inv));
                Ok(pre.exp().mul(&mask)?.add(&pre.mul(&inv)?)?)
            }
            _ => Ok(tape.constant(Tensor::vector(Vec::new()))),
        }
    }

    fn source_scale(&self, z: &Var) -> Result<Var> {
        Ok(match self.problem.latent_map() {
            LatentMap::SourceScale => z.gather(Arc::new(vec![0]))?,
            _ => z.tape().constant(Tensor::scalar(1.0)),
        })
    }

    fn surrogate(&self, mlp: &crate::surrogate::MlpVars, input: InputSpec, coords: &Tensor, z: &Var) -> Result<Var> {
        let tape = z.tape();
        let c = tape.constant(coords.clone());
        let zin = match input {
            InputSpec::CoordinatesAndLatent => Some(z),
            InputSpec::CoordinatesOnly => None,
        };
        Ok(mlp.forward_points(&c, zin)?)
    }

    /// Taped residual rows of `ops` at latent `z`.
    fn residual(&self, ops: &ResidualOps, mlp: &crate::surrogate::MlpVars, input: InputSpec, z: &Var) -> Result<Var> {
        let tape = z.tape().clone();
        let mu_eval = self.surrogate(mlp, input, &ops.eval_nodes, z)?;
        let mu = mu_eval
            .reshape(ops.eval_nodes.rows, 1)?
            .sparse_matvec(ops.sel.clone())?
            .add(&tape.constant(ops.offset.clone()))?;
        let s = self.source_scale(z)?;
        let mut r = tape.constant(ops.load.clone()).mul_scalar(&s)?.scale(-1.0);
        if let Some(base) = &ops.base {
            r = r.add(&mu.sparse_matvec(base.clone())?)?;
        }
        if let (Some(st), Some(rep), Some(fold)) = (&ops.stacked, &ops.rep, &ops.fold) {
            let c = self.coefficients(z, &ops.comps)?;
            let y = mu.sparse_matvec(st.clone())?;
            let w = c.sparse_matvec(rep.clone())?;
            r = r.add(&y.mul(&w)?.sparse_matvec(fold.clone())?)?;
        }
        Ok(r)
    }

    fn local_term(
        &mut self,
        mlp: &crate::surrogate::MlpVars,
        input: InputSpec,
        z: &Var,
        center: usize,
    ) -> Result<Option<Var>> {
        if self.problem.mesh().is_boundary(center) {
            return Ok(None);
        }
        let ops = self.patch_ops(center)?;
        let r = self.residual(&ops.res, mlp, input, z)?;
        let ri = r.gather(Arc::new(vec![ops.center_pos]))?;
        let gr = r.dot(&z.tape().constant(ops.gamma.clone()))?;
        Ok(Some(ri.mul(&gr)?))
    }

    /// Sum of every local term, evaluated in one pass over the mesh.
    fn all_terms(&mut self, mlp: &crate::surrogate::MlpVars, input: InputSpec, z: &Var) -> Result<Var> {
        let ops = self.global_ops()?;
        let r = self.residual(&ops.res, mlp, input, z)?;
        Ok(r.dot(&r.sparse_matvec(ops.gamma.clone())?)?)
    }

    fn pointwise_term(
        &self,
        mlp: &crate::surrogate::MlpVars,
        input: InputSpec,
        z: &Var,
        interior: &[[f64; 2]],
        boundary: &[[f64; 2]],
    ) -> Result<Var> {
        let tape = z.tape().clone();
        let mesh = self.problem.mesh();
        let b = mesh.bounds();
        let h = 1e-4 * (b.x1 - b.x0).max(b.y1 - b.y0);
        let ni = interior.len();
        let mut pts = Vec::with_capacity(5 * ni + boundary.len());
        for d in [[0.0, 0.0], [h, 0.0], [-h, 0.0], [0.0, h], [0.0, -h]] {
            pts.extend(interior.iter().map(|p| [p[0] + d[0], p[1] + d[1]]));
        }
        pts.extend_from_slice(boundary);
        let out = self.surrogate(mlp, input, &stack_inputs(&pts, None), z)?;
        let part = |k: usize| out.slice(k * ni, ni);
        let (u, xp, xm, yp, ym) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?);
        let lap = xp.add(&xm)?.add(&yp)?.add(&ym)?.sub(&u.scale(4.0))?.scale(1.0 / (h * h));
        let gx = xp.sub(&xm)?.scale(0.5 / h);
        let gy = yp.sub(&ym)?.scale(0.5 / h);
        let (a, t1, t2) = match self.problem.decomposition().family() {
            OperatorFamily::Poisson => (tape.constant(Tensor::scalar(1.0)), None, None),
            OperatorFamily::DiffusionTransport => {
                let c = self.coefficients(z, &[0, 1, 2])?;
                (
                    c.gather(Arc::new(vec![0]))?,
                    Some(c.gather(Arc::new(vec![1]))?),
                    Some(c.gather(Arc::new(vec![2]))?),
                )
            }
            OperatorFamily::NodalLogDiffusionTransport => {
                return Err(ViError::Config(
                    "pointwise penalty needs a constant-coefficient operator".into(),
                ))
            }
        };
        let mut strong = lap.mul_scalar(&a)?.scale(-1.0);
        if let (Some(t1), Some(t2)) = (t1, t2) {
            strong = strong.add(&gx.mul_scalar(&t1)?)?.add(&gy.mul_scalar(&t2)?)?;
        }
        let src = |x: [f64; 2]| match &self.problem.spec().source {
            ScalarField::Constant(c) => *c,
            ScalarField::Function(f) => f(x),
            ScalarField::Nodal(v) => crate::fem::interpolate(mesh, v, x).unwrap_or(f64::NAN),
        };
        let bval = |x: [f64; 2]| match &self.problem.spec().boundary {
            ScalarField::Constant(c) => *c,
            ScalarField::Function(f) => f(x),
            ScalarField::Nodal(v) => crate::fem::interpolate(mesh, v, x).unwrap_or(f64::NAN),
        };
        let f = tape.constant(Tensor::vector(interior.iter().map(|&x| src(x)).collect()));
        let s = self.source_scale(z)?;
        let int = strong.sub(&f.mul_scalar(&s)?)?.square().mean();
        let g = tape.constant(Tensor::vector(boundary.iter().map(|&x| bval(x)).collect()));
        let bnd = out.slice(5 * ni, boundary.len())?.sub(&g)?.square().mean();
        Ok(int.add(&bnd)?)
    }

    pub fn draw<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> StepDraws {
        let m = self.config.samples;
        let n = self.problem.mesh().n_nodes();
        let mut draws = StepDraws {
            xi: Vec::with_capacity(m),
            centers: Vec::with_capacity(m),
            colloc_int: Vec::new(),
            colloc_bnd: Vec::new(),
        };
        let b = self.problem.mesh().bounds();
        for _ in 0..m {
            draws.xi.push((0..d).map(|_| rng.sample(StandardNormal)).collect());
            match self.config.penalty {
                Penalty::WeakForm(sampling) => draws.centers.push(sample_centers(n, sampling, rng)),
                Penalty::Pointwise { n_int, n_bnd } => {
                    draws.colloc_int.push(
                        (0..n_int)
                            .map(|_| [rng.random_range(b.x0..b.x1), rng.random_range(b.y0..b.y1)])
                            .collect(),
                    );
                    draws
                        .colloc_bnd
                        .push((0..n_bnd).map(|_| perimeter_point(b, rng.random())).collect());
                }
                Penalty::None => {}
            }
        }
        draws
    }

    /// Loss and its gradient in [`VariationalModel::params_flat`] order.
    pub fn objective(&mut self, model: &VariationalModel, draws: &StepDraws, epsilon: f64) -> Result<(StepReport, Vec<f64>)> {
        let tape = Tape::new();
        let q = QVars::record(&model.q, &tape);
        let log_sigma = tape.scalar(model.noise.log_sigma);
        let mlp = model.mlp.record(&tape);
        let m = draws.xi.len();
        let n_nodes = self.problem.mesh().n_nodes() as f64;
        let mut nll = tape.constant(Tensor::scalar(0.0));
        let mut pen = tape.constant(Tensor::scalar(0.0));
        for s in 0..m {
            let z = q.sample_with(&draws.xi[s])?;
            if let Some(ops) = &self.sensors {
                let mu_eval = self.surrogate(&mlp, model.input, &ops.eval_nodes, &z)?;
                let mu = mu_eval
                    .reshape(ops.eval_nodes.rows, 1)?
                    .sparse_matvec(ops.sel.clone())?
                    .add(&tape.constant(ops.offset.clone()))?;
                let pred = mu.sparse_matvec(ops.interp.clone())?;
                let resid = tape.constant(ops.y.clone()).sub(&pred)?;
                let n = ops.y.len() as f64;
                let inv_var = log_sigma.scale(-2.0).exp();
                let quad = resid.square().sum().mul(&inv_var)?.scale(0.5);
                let norm = log_sigma.scale(n).add(&tape.constant(Tensor::scalar(0.5 * n * (2.0 * PI).ln())))?;
                nll = nll.add(&quad.add(&norm)?)?;
            }
            match self.config.penalty {
                Penalty::WeakForm(PatchSampling::Stratified) => {
                    pen = pen.add(&self.all_terms(&mlp, model.input, &z)?)?;
                }
                Penalty::WeakForm(_) => {
                    let centers = &draws.centers[s];
                    let mut acc = tape.constant(Tensor::scalar(0.0));
                    for &c in centers {
                        if let Some(t) = self.local_term(&mlp, model.input, &z, c)? {
                            acc = acc.add(&t)?;
                        }
                    }
                    pen = pen.add(&acc.scale(n_nodes / centers.len() as f64))?;
                }
                Penalty::Pointwise { .. } => {
                    let t = self.pointwise_term(&mlp, model.input, &z, &draws.colloc_int[s], &draws.colloc_bnd[s])?;
                    pen = pen.add(&t)?;
                }
                Penalty::None => {}
            }
        }
        let nll = nll.scale(1.0 / m as f64);
        let pen = pen.scale(1.0 / m as f64);
        let kl = q.kl()?;
        let total = nll.add(&kl)?.add(&pen.scale(0.5 / (epsilon * epsilon)))?;
        let mut wrt = q.all();
        wrt.push(&log_sigma);
        let mlp_vars = mlp.all();
        wrt.extend(mlp_vars.iter().copied());
        let grads = tape.gradient(&total, &wrt)?;
        let mut flat: Vec<f64> = grads.iter().flat_map(|g| g.data.iter().copied()).collect();
        if !self.config.learn_noise {
            let d = model.q.dim();
            flat[2 * d + model.q.lower.len()] = 0.0;
        }
        let report = StepReport {
            epsilon,
            neg_loglik: nll.item(),
            kl: kl.item(),
            penalty: pen.item(),
            total: total.item(),
        };
        Ok((report, flat))
    }

    /// Draws randomness for `step` and evaluates the objective.
    pub fn objective_step<R: Rng + ?Sized>(
        &mut self,
        model: &VariationalModel,
        step: usize,
        rng: &mut R,
    ) -> Result<(StepReport, Vec<f64>)> {
        let draws = self.draw(model.q.dim(), rng);
        let eps = self.config.schedule.at(step);
        self.objective(model, &draws, eps)
    }

    /// Runs Adam under the ε schedule.
    pub fn train<R: Rng + ?Sized>(&mut self, model: &mut VariationalModel, rng: &mut R) -> Result<Vec<StepReport>> {
        let mut state = AdamState::default();
        let mut params = model.params_flat();
        let mut trace = Vec::with_capacity(self.config.iterations);
        for step in 0..self.config.iterations {
            let (report, grads) = self.objective_step(model, step, rng)?;
            if !report.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(ViError::NonFinite {
                    step,
                    neg_loglik: report.neg_loglik,
                    kl: report.kl,
                    penalty: report.penalty,
                });
            }
            let adam = self.config.adam;
            adam_update(&mut params, &grads, &mut state, &adam);
            model.set_params_flat(&params);
            trace.push(report);
        }
        Ok(trace)
    }
}

/// Writes `step,epsilon,neg_loglik,kl,penalty,total`.
pub fn write_trace_csv<W: Write>(mut out: W, trace: &[StepReport]) -> io::Result<()> {
    writeln!(out, "step,epsilon,neg_loglik,kl,penalty,total")?;
    for (i, r) in trace.iter().enumerate() {
        writeln!(out, "{i},{:?},{:?},{:?},{:?},{:?}", r.epsilon, r.neg_loglik, r.kl, r.penalty, r.total)?;
    }
    Ok(())
}
