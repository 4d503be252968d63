//! Seeds, problem construction and synthetic sensor data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use weakform_core::fem::{interpolate, ForwardProblem, LatentMap, OperatorFamily, ProblemSpec, ScalarField};
use weakform_core::mesh::structured_unit_square;
use weakform_core::vi::Observations;

use crate::CliError;

/// Independent stream seed for `(base, tags...)`.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut x = base;
    for &t in tags {
        x = splitmix(x ^ splitmix(t.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    splitmix(x)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Constant diffusion `a`, latent `z = τ`, constant source, zero Dirichlet data.
pub fn transport_problem(n: usize, diffusion: f64, source: f64) -> Result<ForwardProblem, CliError> {
    let spec = ProblemSpec {
        source: ScalarField::Constant(source),
        boundary: ScalarField::Constant(0.0),
        family: OperatorFamily::DiffusionTransport,
    };
    Ok(ForwardProblem::new(
        structured_unit_square(n)?,
        spec,
        LatentMap::FixedDiffusion(diffusion),
    )?)
}

/// A simulated dataset and the truth it came from.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub train: Observations,
    pub validation: Observations,
    pub sigma_obs: f64,
    pub field_range: f64,
}

/// Exact field on a `2n` mesh at `true_z`, sampled at uniform interior points with
/// iid Gaussian noise.
#[allow(clippy::too_many_arguments)]
pub fn simulate_observations<R: Rng + ?Sized>(
    mesh_n: usize,
    true_z: &[f64],
    diffusion: f64,
    source: f64,
    sensor_count: usize,
    validation_count: usize,
    sigma: SigmaSpec,
    rng: &mut R,
) -> Result<Simulated, CliError> {
    let fine = transport_problem(2 * mesh_n, diffusion, source)?;
    let u = fine.solve(true_z)?;
    let (lo, hi) = u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let field_range = hi - lo;
    let sigma_obs = match sigma {
        SigmaSpec::Absolute(s) => s,
        SigmaSpec::FractionOfRange(f) => f * field_range,
    };
    let mut draw = |count: usize| -> Result<Observations, CliError> {
        let mut obs = Observations::default();
        while obs.points.len() < count {
            let p = [rng.random::<f64>(), rng.random::<f64>()];
            if p[0] <= 0.0 || p[1] <= 0.0 {
                continue;
            }
            let clean = interpolate(fine.mesh(), &u, p)?;
            let noise: f64 = rng.sample(StandardNormal);
            obs.points.push(p);
            obs.values.push(clean + sigma_obs * noise);
        }
        Ok(obs)
    };
    let train = draw(sensor_count)?;
    let validation = draw(validation_count)?;
    Ok(Simulated {
        train,
        validation,
        sigma_obs,
        field_range,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaSpec {
    Absolute(f64),
    FractionOfRange(f64),
}
