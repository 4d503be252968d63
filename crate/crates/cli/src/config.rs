//! Experiment configuration, read from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Experiment {
    TransportBip,
    TaperStudy,
    CoverageCurve,
    PointwiseCompare,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::TransportBip => "transport_bip",
            Self::TaperStudy => "taper_study",
            Self::CoverageCurve => "coverage_curve",
            Self::PointwiseCompare => "pointwise_compare",
        }
    }
}

/// All knobs of every experiment. Unused fields are ignored by a given experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<Experiment>,
    pub mesh_n: Vec<usize>,
    /// Target mean interior-node counts of a mini-patch.
    pub q_int: Vec<usize>,
    /// Taper radii for the taper study and coverage curve.
    pub rho: Vec<f64>,
    pub epsilon: Vec<f64>,
    /// Patch counts compared in the taper study.
    pub patch_counts: Vec<usize>,
    /// `M`.
    pub latent_samples: usize,
    /// `P`.
    pub patches_per_step: usize,
    /// Visit every node once per latent sample instead of drawing `P` centers.
    pub stratified_patches: bool,
    pub sensor_count: usize,
    pub validation_count: usize,
    /// `σ_obs` as a fraction of the true field range, unless `sigma_obs` is set.
    pub noise_fraction: f64,
    pub sigma_obs: Option<f64>,
    pub true_z: Vec<f64>,
    pub diffusion: f64,
    /// Constant source; defaults to 10 for inverse problems and 1 for the taper study.
    pub source: Option<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub iterations: usize,
    pub hidden: Vec<usize>,
    pub activation: String,
    /// Network output multiplier; defaults to the largest absolute training observation.
    pub output_scale: Option<f64>,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_period: usize,
    pub cyclic: bool,
    pub learning_rate: f64,
    pub hmc_samples: usize,
    pub hmc_burnin: usize,
    pub hmc_leapfrog: usize,
    pub hmc_step_size: f64,
    /// HMC is skipped on meshes finer than this.
    pub hmc_max_mesh_n: usize,
    pub predictive_samples: usize,
    pub perturbation_draws: usize,
    pub coverage_centers: usize,
    pub collocation_interior: usize,
    pub collocation_boundary: usize,
    pub write_traces: bool,
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            mesh_n: vec![16, 32, 64],
            q_int: vec![32, 64, 128],
            rho: vec![0.05, 0.1, 0.15, 0.2, 0.3, 0.45, 0.7, 1.0, 1.5],
            epsilon: vec![0.1, 0.01],
            patch_counts: vec![1, 10, 50],
            latent_samples: 1,
            patches_per_step: 1,
            stratified_patches: false,
            sensor_count: 50,
            validation_count: 50,
            noise_fraction: 0.05,
            sigma_obs: None,
            true_z: vec![1.0, 1.0],
            diffusion: 1.0,
            source: None,
            replicates: 10,
            seed: 0,
            iterations: 10_000,
            hidden: vec![32, 32],
            activation: "tanh".into(),
            output_scale: None,
            eps_start: 0.1,
            eps_end: 0.01,
            eps_period: 1000,
            cyclic: true,
            learning_rate: 1e-3,
            hmc_samples: 2000,
            hmc_burnin: 500,
            hmc_leapfrog: 10,
            hmc_step_size: 0.1,
            hmc_max_mesh_n: 64,
            predictive_samples: 100,
            perturbation_draws: 10,
            coverage_centers: 200,
            collocation_interior: 64,
            collocation_boundary: 32,
            write_traces: true,
            threads: 1,
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| bad(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn patch_sampling(&self) -> weakform_core::relax::PatchSampling {
        if self.stratified_patches {
            weakform_core::relax::PatchSampling::Stratified
        } else {
            weakform_core::relax::PatchSampling::Uniform(self.patches_per_step)
        }
    }

    pub fn source_for(&self, experiment: Experiment) -> f64 {
        self.source.unwrap_or(match experiment {
            Experiment::TaperStudy => 1.0,
            _ => 10.0,
        })
    }

    /// Checks the invariants the chosen experiment relies on.
    pub fn validate(&self, experiment: Experiment) -> Result<(), CliError> {
        if let Some(e) = self.experiment {
            if e != experiment {
                return Err(bad(format!(
                    "config is for `{}` but `{}` was requested",
                    e.name(),
                    experiment.name()
                )));
            }
        }
        if self.mesh_n.is_empty() || self.mesh_n.iter().any(|&n| n < 2) {
            return Err(bad("mesh_n must be a non-empty list of resolutions >= 2"));
        }
        if self.threads == 0 {
            return Err(bad("threads must be at least 1"));
        }
        if !(self.diffusion > 0.0) {
            return Err(bad("diffusion must be positive"));
        }
        if self.true_z.len() != 2 || self.true_z.iter().any(|v| !v.is_finite()) {
            return Err(bad("true_z must hold the two transport components"));
        }
        if !self.source_for(experiment).is_finite() {
            return Err(bad("source must be finite"));
        }
        match experiment {
            Experiment::TransportBip | Experiment::PointwiseCompare => self.validate_inverse(experiment),
            Experiment::TaperStudy => {
                if self.rho.is_empty() || self.rho.iter().any(|&r| !(r > 0.0)) {
                    return Err(bad("rho must be a non-empty list of positive radii"));
                }
                if self.epsilon.is_empty() || self.epsilon.iter().any(|&e| !(e >= 0.0)) {
                    return Err(bad("epsilon must be a non-empty list of non-negative scales"));
                }
                if self.patch_counts.is_empty() || self.patch_counts.contains(&0) {
                    return Err(bad("patch_counts must be a non-empty list of positive counts"));
                }
                if self.perturbation_draws < 2 {
                    return Err(bad("perturbation_draws must be at least 2"));
                }
                Ok(())
            }
            Experiment::CoverageCurve => {
                if self.rho.is_empty() || self.rho.iter().any(|&r| !(r > 0.0)) {
                    return Err(bad("rho must be a non-empty list of positive radii"));
                }
                if self.coverage_centers == 0 {
                    return Err(bad("coverage_centers must be positive"));
                }
                Ok(())
            }
        }
    }

    fn validate_inverse(&self, experiment: Experiment) -> Result<(), CliError> {
        if self.q_int.is_empty() || self.q_int.contains(&0) {
            return Err(bad("q_int must be a non-empty list of positive targets"));
        }
        if self.sensor_count == 0 || self.validation_count == 0 {
            return Err(bad("sensor and validation counts must be positive"));
        }
        match self.sigma_obs {
            Some(s) if !(s > 0.0) => return Err(bad("sigma_obs must be positive")),
            None if !(self.noise_fraction > 0.0) => return Err(bad("noise_fraction must be positive")),
            _ => {}
        }
        if self.replicates == 0 || self.latent_samples == 0 || self.patches_per_step == 0 {
            return Err(bad("replicates, latent_samples and patches_per_step must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(bad("hidden must be a non-empty list of positive widths"));
        }
        if weakform_core::surrogate::Activation::parse(&self.activation).is_none() {
            return Err(bad(format!("unknown activation `{}`", self.activation)));
        }
        if !(self.eps_start > 0.0 && self.eps_end > 0.0) || self.eps_period == 0 {
            return Err(bad("epsilon schedule needs positive start, end and period"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(bad("learning_rate must be positive"));
        }
        if matches!(self.output_scale, Some(s) if !(s > 0.0)) {
            return Err(bad("output_scale must be positive"));
        }
        if self.predictive_samples == 0 {
            return Err(bad("predictive_samples must be positive"));
        }
        if experiment == Experiment::TransportBip
            && (self.hmc_samples < 2 || self.hmc_leapfrog == 0 || !(self.hmc_step_size > 0.0))
        {
            return Err(bad("hmc needs >= 2 samples, >= 1 leapfrog step and a positive step size"));
        }
        if experiment == Experiment::PointwiseCompare && self.collocation_interior == 0 {
            return Err(bad("collocation_interior must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"mesh": [4]}"#),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn invariants() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate(Experiment::TransportBip).is_ok());
        c.sigma_obs = Some(0.0);
        assert!(c.validate(Experiment::TransportBip).is_err());
        let mut c = ExperimentConfig::default();
        c.mesh_n.clear();
        assert!(c.validate(Experiment::CoverageCurve).is_err());
        let mut c = ExperimentConfig::default();
        c.experiment = Some(Experiment::TaperStudy);
        assert!(c.validate(Experiment::TransportBip).is_err());
        assert!(c.validate(Experiment::TaperStudy).is_ok());
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in [
            Experiment::TransportBip,
            Experiment::TaperStudy,
            Experiment::CoverageCurve,
            Experiment::PointwiseCompare,
        ] {
            let json = serde_json::to_string(&e).unwrap();
            assert_eq!(json, format!("\"{}\"", e.name()));
        }
    }
}
