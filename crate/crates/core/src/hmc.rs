//! Reference posterior: exact FEM likelihood, adjoint gradients, HMC with dual averaging.

use std::f64::consts::PI;
use std::io::{self, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::fem::{interpolation_matrix, FemError, ForwardProblem};
use crate::linalg::{factorize, FactorKind, Factorization, LinalgError, CsrMatrix};
use crate::surrogate::NoiseModel;
use crate::vi::Observations;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HmcError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("initial point has non-finite log posterior")]
    BadInitialPoint,
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, HmcError>;

/// `log p(z | y)` up to a constant, with a standard normal prior on `z`.
#[derive(Debug, Clone)]
pub struct Posterior<'a> {
    problem: &'a ForwardProblem,
    interp: CsrMatrix,
    y: Vec<f64>,
    noise: NoiseModel,
}

impl<'a> Posterior<'a> {
    pub fn new(problem: &'a ForwardProblem, data: &Observations, noise: NoiseModel) -> Result<Self> {
        if data.points.len() != data.values.len() {
            return Err(HmcError::Config("sensor points and values differ in length".into()));
        }
        Ok(Self {
            problem,
            interp: interpolation_matrix(problem.mesh(), &data.points)?,
            y: data.values.clone(),
            noise,
        })
    }

    pub fn dim(&self) -> usize {
        self.problem.latent_dim()
    }

    pub fn problem(&self) -> &ForwardProblem {
        self.problem
    }

    fn factor(&self, z: &[f64]) -> Result<(Factorization, Vec<f64>)> {
        let (l, f) = self.problem.constrained_system(z)?;
        let kind = if l.is_symmetric(1e-12) {
            FactorKind::Cholesky
        } else {
            FactorKind::Lu
        };
        Ok((factorize(&l, kind)?, f))
    }

    fn loglik(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let pred = self.interp.spmv(u)?;
        let s2 = self.noise.variance();
        let resid: Vec<f64> = self.y.iter().zip(&pred).map(|(y, p)| y - p).collect();
        let ll = resid
            .iter()
            .map(|r| -0.5 * r * r / s2 - 0.5 * (2.0 * PI * s2).ln())
            .sum();
        Ok((ll, resid))
    }

    pub fn log_posterior(&self, z: &[f64]) -> Result<f64> {
        let (fact, f) = self.factor(z)?;
        let u = fact.solve(&f)?;
        let prior = -0.5 * z.iter().map(|x| x * x).sum::<f64>();
        Ok(prior + self.loglik(&u)?.0)
    }

    /// Log posterior and its gradient via one forward and one adjoint solve.
    pub fn log_posterior_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (fact, f) = self.factor(z)?;
        let u = fact.solve(&f)?;
        let (ll, resid) = self.loglik(&u)?;
        let s2 = self.noise.variance();
        let mesh = self.problem.mesh();
        let mut v = self.interp.spmv_transpose(&resid)?;
        for (i, vi) in v.iter_mut().enumerate() {
            if mesh.is_boundary(i) {
                *vi = 0.0;
            } else {
                *vi /= s2;
            }
        }
        let lambda = fact.solve_transpose(&v)?;
        let d = self.dim();
        let mut grad: Vec<f64> = z.iter().map(|x| -x).collect();
        let dec = self.problem.decomposition();
        if dec.n_components() > 0 {
            let params = self.problem.operator_params(z)?;
            let bil = dec.component_bilinear(&lambda, &u);
            let cjac = dec.coefficient_jacobian(&params)?;
            let mut dparam = vec![0.0; dec.n_params()];
            for (k, row) in cjac.iter().enumerate() {
                for &(p, dc) in row {
                    dparam[p] -= bil[k] * dc;
                }
            }
            let pjac = self.problem.param_jacobian();
            for (p, row) in pjac.iter().enumerate() {
                for j in 0..d {
                    grad[j] += dparam[p] * row[j];
                }
            }
        }
        if let crate::fem::LatentMap::SourceScale = self.problem.latent_map() {
            let f0 = self.problem.base_load();
            grad[0] += lambda.iter().zip(f0).map(|(l, b)| l * b).sum::<f64>();
        }
        let prior = -0.5 * z.iter().map(|x| x * x).sum::<f64>();
        Ok((prior + ll, grad))
    }

    /// Forward solution at `z`.
    pub fn field(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (fact, f) = self.factor(z)?;
        Ok(fact.solve(&f)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmcConfig {
    pub n_samples: usize,
    pub n_burn: usize,
    pub n_leapfrog: usize,
    pub initial_step: f64,
    pub target_accept: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_burn: 500,
            n_leapfrog: 10,
            initial_step: 0.1,
            target_accept: 0.8,
        }
    }
}

/// Post burn-in draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub draws: Vec<Vec<f64>>,
    pub log_post: Vec<f64>,
    pub accepted: Vec<bool>,
    pub step_size: f64,
}

impl Chain {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted.iter().filter(|&&a| a).count() as f64 / self.accepted.len().max(1) as f64
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.draws.first().map_or(0, Vec::len);
        let n = self.draws.len() as f64;
        (0..d).map(|j| self.draws.iter().map(|z| z[j]).sum::<f64>() / n).collect()
    }

    pub fn sd(&self) -> Vec<f64> {
        let m = self.mean();
        let n = self.draws.len() as f64;
        m.iter()
            .enumerate()
            .map(|(j, mj)| (self.draws.iter().map(|z| (z[j] - mj).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
            .collect()
    }
}

/// Nesterov dual averaging on `log ε` toward a target acceptance probability.
#[derive(Debug, Clone, Copy)]
struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    t: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            target,
            h_bar: 0.0,
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            t: 0.0,
        }
    }

    fn update(&mut self, accept_prob: f64) -> f64 {
        self.t += 1.0;
        let w = 1.0 / (self.t + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_eps = self.mu - self.t.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.t.powf(-Self::KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
        self.log_eps.exp()
    }
}

/// Leapfrog trajectory from `(z, p)` with `grad` the log-posterior gradient at `z`.
/// Returns the end point, momentum, log posterior and gradient; `None` when a solve
/// fails or the energy is non-finite.
pub fn leapfrog(
    post: &Posterior<'_>,
    z: &[f64],
    grad: &[f64],
    p: &[f64],
    eps: f64,
    steps: usize,
) -> Option<(Vec<f64>, Vec<f64>, f64, Vec<f64>)> {
    let mut z = z.to_vec();
    let mut p = p.to_vec();
    let mut g = grad.to_vec();
    let mut lp = f64::NAN;
    for _ in 0..steps {
        p.iter_mut().zip(&g).for_each(|(pi, gi)| *pi += 0.5 * eps * gi);
        z.iter_mut().zip(&p).for_each(|(zi, pi)| *zi += eps * pi);
        let (l, gn) = post.log_posterior_and_grad(&z).ok()?;
        lp = l;
        g = gn;
        p.iter_mut().zip(&g).for_each(|(pi, gi)| *pi += 0.5 * eps * gi);
    }
    lp.is_finite().then_some((z, p, lp, g))
}

/// Runs HMC with identity mass; step size is tuned during burn-in and then frozen.
pub fn run_hmc<R: Rng + ?Sized>(post: &Posterior<'_>, z0: &[f64], cfg: &HmcConfig, rng: &mut R) -> Result<Chain> {
    if cfg.n_leapfrog == 0 || !(cfg.initial_step > 0.0) {
        return Err(HmcError::Config("leapfrog steps and initial step must be positive".into()));
    }
    let (mut lp, mut grad) = post.log_posterior_and_grad(z0)?;
    if !lp.is_finite() {
        return Err(HmcError::BadInitialPoint);
    }
    let mut z = z0.to_vec();
    let mut da = DualAveraging::new(cfg.initial_step, cfg.target_accept);
    let mut eps = cfg.initial_step;
    let mut chain = Chain {
        draws: Vec::with_capacity(cfg.n_samples),
        log_post: Vec::with_capacity(cfg.n_samples),
        accepted: Vec::with_capacity(cfg.n_samples),
        step_size: eps,
    };
    for it in 0..cfg.n_burn + cfg.n_samples {
        let p0: Vec<f64> = (0..z.len()).map(|_| rng.sample(StandardNormal)).collect();
        let k0 = 0.5 * p0.iter().map(|x| x * x).sum::<f64>();
        let (accept_prob, proposal) = match leapfrog(post, &z, &grad, &p0, eps, cfg.n_leapfrog) {
            Some((zn, pn, lpn, gn)) => {
                let k1 = 0.5 * pn.iter().map(|x| x * x).sum::<f64>();
                let log_ratio = lpn - k1 - (lp - k0);
                (log_ratio.min(0.0).exp(), Some((zn, lpn, gn)))
            }
            None => (0.0, None),
        };
        let accepted = match proposal {
            Some((zn, lpn, gn)) if rng.random::<f64>() < accept_prob => {
                z = zn;
                lp = lpn;
                grad = gn;
                true
            }
            _ => false,
        };
        if it < cfg.n_burn {
            eps = da.update(accept_prob);
            if it + 1 == cfg.n_burn {
                eps = da.log_eps_bar.exp();
            }
        } else {
            chain.draws.push(z.clone());
            chain.log_post.push(lp);
            chain.accepted.push(accepted);
        }
    }
    chain.step_size = eps;
    Ok(chain)
}

/// Writes `draw,z_1..z_d,log_post,accepted`.
pub fn write_chain_csv<W: Write>(mut out: W, chain: &Chain) -> io::Result<()> {
    let d = chain.draws.first().map_or(0, Vec::len);
    let mut header = vec!["draw".to_string()];
    header.extend((1..=d).map(|j| format!("z_{j}")));
    header.push("log_post".into());
    header.push("accepted".into());
    writeln!(out, "{}", header.join(","))?;
    for (k, z) in chain.draws.iter().enumerate() {
        let zs: Vec<String> = z.iter().map(|v| format!("{v:?}")).collect();
        writeln!(
            out,
            "{k},{},{:?},{}",
            zs.join(","),
            chain.log_post[k],
            u8::from(chain.accepted[k])
        )?;
    }
    Ok(())
}
