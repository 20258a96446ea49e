//! One TOML document drives every pipeline stage. Each section maps onto
//! the owning module's config type, so file validation reuses the module
//! validators and a section's keys never drift from the code.
//!
//! Two presets ship in `configs/`: the desk profile (budgets sized for a
//! laptop CPU; also the built-in default) and the paper-scale profile.

use crate::dynmodel::TrainOptions;
use crate::env::RewardConfig;
use crate::icem::IcemConfig;
use crate::kinematics::{KinematicChain, Workspace};
use crate::plant::{ExciteParams, PlantParams};
use crate::ppo::PpoConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Residual-model training budget. The spec of the model itself (variant,
/// architecture, k, horizon, ...) is chosen per invocation; this section
/// only bounds how long a training run may work.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DynTraining {
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub updates_per_epoch: usize,
    /// Validation snippet count and unroll length for the eval metric.
    pub eval_snippets: usize,
    pub eval_horizon: usize,
}

impl Default for DynTraining {
    fn default() -> Self {
        DynTraining {
            max_epochs: 40,
            patience: 8,
            updates_per_epoch: 50,
            eval_snippets: 100,
            eval_horizon: 80,
        }
    }
}

impl DynTraining {
    pub fn to_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            max_epochs: self.max_epochs,
            patience: self.patience,
            updates_per_epoch: self.updates_per_epoch,
            eval_snippets: self.eval_snippets,
            eval_horizon: self.eval_horizon,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0
            || self.patience == 0
            || self.updates_per_epoch == 0
            || self.eval_snippets == 0
            || self.eval_horizon == 0
        {
            return Err(Error::Config("dynmodel: budget fields must be >= 1".into()));
        }
        Ok(())
    }
}

/// PPO hyperparameters plus the network shapes (the shapes live here, not
/// in [`PpoConfig`], because the policy is constructed by the caller).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoSection {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    #[serde(flatten)]
    pub cfg: PpoConfig,
}

impl Default for PpoSection {
    fn default() -> Self {
        PpoSection {
            actor_hidden: vec![128, 128],
            critic_hidden: vec![128, 128],
            cfg: PpoConfig::default(),
        }
    }
}

impl PpoSection {
    pub fn validate(&self) -> Result<()> {
        if self.actor_hidden.is_empty() || self.critic_hidden.is_empty() {
            return Err(Error::Config("ppo: hidden layer lists must be non-empty".into()));
        }
        if self.actor_hidden.iter().chain(&self.critic_hidden).any(|&w| w == 0) {
            return Err(Error::Config("ppo: hidden layer widths must be >= 1".into()));
        }
        self.cfg.validate()
    }
}

/// Shared evaluation set: every controller and backend faces the same
/// episodes, reproducible from the master seed alone.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub episodes: usize,
    pub list_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { episodes: 100, list_seed: 7001 }
    }
}

impl EvalSection {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("eval: episodes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolkitConfig {
    pub chain: KinematicChain,
    pub workspace: Workspace,
    pub plant: PlantParams,
    pub excite: ExciteParams,
    pub reward: RewardConfig,
    pub dynmodel: DynTraining,
    pub ppo: PpoSection,
    pub icem: IcemConfig,
    pub eval: EvalSection,
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        ToolkitConfig::desk()
    }
}

impl ToolkitConfig {
    /// Laptop-sized profile: small policy networks, 2 M PPO steps, the
    /// reduced planner population, a 100-episode evaluation list, and an
    /// early-stopping model-training budget.
    pub fn desk() -> ToolkitConfig {
        let mut ppo = PpoSection::default();
        ppo.cfg.checkpoint_every = 500_000;
        ppo.cfg.eval_every = 100_000;
        ToolkitConfig {
            chain: KinematicChain::default(),
            workspace: Workspace::default(),
            plant: PlantParams::default(),
            excite: ExciteParams::default(),
            reward: RewardConfig::default(),
            dynmodel: DynTraining::default(),
            ppo,
            icem: IcemConfig::desk(),
            eval: EvalSection::default(),
        }
    }

    /// Full-scale profile: deep policy networks, 400 M PPO steps across 128
    /// environments, the full planner population, a 500-episode list, and a
    /// patient model-training budget.
    pub fn paper() -> ToolkitConfig {
        let mut cfg = ToolkitConfig::desk();
        cfg.ppo = PpoSection {
            actor_hidden: vec![256, 256, 256, 256],
            critic_hidden: vec![256, 256, 256, 256, 256],
            cfg: PpoConfig {
                n_envs: 128,
                total_steps: 400_000_000,
                checkpoint_every: 50_000_000,
                eval_every: 10_000_000,
                ..PpoConfig::default()
            },
        };
        cfg.dynmodel = DynTraining {
            max_epochs: 1000,
            patience: 50,
            ..DynTraining::default()
        };
        cfg.icem = IcemConfig::default();
        cfg.eval = EvalSection { episodes: 500, list_seed: 7001 };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.chain.validate()?;
        self.workspace.validate()?;
        self.plant.validate()?;
        self.excite.validate()?;
        self.reward.validate()?;
        self.dynmodel.validate()?;
        self.ppo.validate()?;
        self.icem.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Parse and validate; any invalid parameter is rejected here, before a
    /// command starts working.
    pub fn load(path: &Path) -> Result<ToolkitConfig> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ToolkitConfig = toml::from_str(&body)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config encode: {e}")))
    }

    /// Config snapshot embedded into run manifests.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}
