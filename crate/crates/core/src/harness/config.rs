use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::certify::{CampaignConfig, KeypointCriterion};
use crate::data::SceneParams;
use crate::error::{Error, Result};
use crate::perturbation::PerturbationSpec;
use crate::pipeline::{PruningMode, PruningSchedule, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub scene: SceneParams,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { scene: SceneParams::default(), n_train: 384, n_val: 64, n_test: 32, seed: 2024 }
    }
}

/// One training variant: pruning rule, final ratio and Wasserstein weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig {
    pub name: String,
    #[serde(default)]
    pub mode: PruningMode,
    pub rho: f64,
    pub lambda_w: f64,
}

impl ArmConfig {
    pub fn new(name: &str, mode: PruningMode, rho: f64, lambda_w: f64) -> Self {
        ArmConfig { name: name.to_string(), mode, rho, lambda_w }
    }

    /// `none` for unpruned arms, otherwise the pruning mode.
    pub fn rule(&self) -> &'static str {
        if self.rho == 0.0 {
            "none"
        } else {
            match self.mode {
                PruningMode::Usn => "usn",
                PruningMode::Random => "random",
            }
        }
    }

    /// Training configuration of this arm derived from the shared base.
    pub fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.schedule = PruningSchedule { rho: self.rho, ..base.schedule };
        cfg.weights.lambda_w = self.lambda_w;
        cfg.mode = self.mode;
        cfg.seed = seed;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyConfig {
    pub specs: Vec<PerturbationSpec>,
    pub criterion: KeypointCriterion,
    pub campaign: CampaignConfig,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            specs: vec![PerturbationSpec::brightness(1.0 / 255.0), PerturbationSpec::contrast(2.0 / 255.0)],
            criterion: KeypointCriterion::default(),
            campaign: CampaignConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisualizeConfig {
    /// Test images used for per-neuron statistics.
    pub images: usize,
    /// Perturbed copies per image and certification spec.
    pub samples_per_image: usize,
    pub seed: u64,
}

impl Default for VisualizeConfig {
    fn default() -> Self {
        VisualizeConfig { images: 32, samples_per_image: 8, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    /// Soft-argmax temperature of the CNN-small head.
    pub temperature: f64,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmConfig>,
    pub certify: CertifyConfig,
    pub visualize: VisualizeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig {
            epochs: 16,
            batch_size: 32,
            optimizer: crate::pipeline::OptimizerConfig::adam(3e-3),
            schedule: PruningSchedule { rho: 0.0, n_steps: 4, t_start: 3, t_end: 11, t_interval: 2 },
            ..TrainConfig::default()
        };
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            temperature: 1.0,
            train,
            seeds: vec![0, 1, 2],
            arms: default_arms(),
            certify: CertifyConfig::default(),
            visualize: VisualizeConfig::default(),
        }
    }
}

/// Unpruned baseline, USN and random pruning at ρ = 0.2, and the λ_W ∈ {0, 10}
/// ablation at ρ ∈ {0.1, 0.2}.
pub fn default_arms() -> Vec<ArmConfig> {
    vec![
        ArmConfig::new("none", PruningMode::Usn, 0.0, 10.0),
        ArmConfig::new("usn-0.1-w10", PruningMode::Usn, 0.1, 10.0),
        ArmConfig::new("usn-0.1-w0", PruningMode::Usn, 0.1, 0.0),
        ArmConfig::new("usn-0.2-w10", PruningMode::Usn, 0.2, 10.0),
        ArmConfig::new("usn-0.2-w0", PruningMode::Usn, 0.2, 0.0),
        ArmConfig::new("random-0.2-w10", PruningMode::Random, 0.2, 10.0),
    ]
}

/// The pruning-rate sweep ρ ∈ {0, 0.1, 0.2, 0.3} with USN pruning.
pub fn rho_sweep_arms(lambda_w: f64) -> Vec<ArmConfig> {
    [0.0, 0.1, 0.2, 0.3]
        .iter()
        .map(|&rho| ArmConfig::new(&format!("usn-{rho}-w{lambda_w}"), PruningMode::Usn, rho, lambda_w))
        .collect()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.scene.validate().map_err(|e| Error::config(e.to_string()))?;
        if self.dataset.n_train == 0 || self.dataset.n_val == 0 || self.dataset.n_test == 0 {
            return Err(Error::config("every dataset split needs at least one image"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.seeds.is_empty() || self.arms.is_empty() {
            return Err(Error::config("at least one seed and one arm are required"));
        }
        let mut names: Vec<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("arm names must be unique"));
        }
        for arm in &self.arms {
            if arm.name.is_empty() || arm.name.contains([',', '/', '\\', '"']) {
                return Err(Error::config(format!("invalid arm name {:?}", arm.name)));
            }
            arm.train_config(&self.train, 0).validate()?;
        }
        if self.certify.specs.is_empty() {
            return Err(Error::config("no certification perturbations configured"));
        }
        for s in &self.certify.specs {
            s.validate().map_err(|e| Error::config(e.to_string()))?;
        }
        KeypointCriterion::new(self.certify.criterion.delta)?;
        let c = &self.certify.campaign;
        if c.n_cells == 0 || c.falsify_samples == 0 {
            return Err(Error::config("campaign needs n_cells >= 1 and falsify_samples >= 1"));
        }
        Ok(())
    }

    /// Reads JSON, or TOML when the extension is `.toml`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text)?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn arm(&self, name: &str) -> Result<&ArmConfig> {
        self.arms
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::config(format!("no arm named {name:?}")))
    }
}
