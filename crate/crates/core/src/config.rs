//! Experiment configuration: a sectioned TOML file with typed scalars,
//! lists and nested tables. Every key has an explicit default, unknown keys
//! are rejected, and `AMENABLE_<SECTION>_<KEY>` environment variables
//! override file values (e.g. `AMENABLE_TRAINER_MAX_UPDATES=50`; keys of the
//! nested generator table use `AMENABLE_DATA_GENERATOR_<KEY>`).

use crate::controller::{PolicyRule, PolicyUpdateConfig};
use crate::error::{Error, Result};
use crate::nn::OptimizerKind;
use crate::reward::RewardConfig;
use crate::rng::derive_seed;
use crate::synthdata::GeneratorConfig;
use crate::tasks::{TaskKind, TaskSpec};
use crate::trainer::{TrainMode, TrainerConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ENV_PREFIX: &str = "AMENABLE_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

impl OptimizerChoice {
    pub fn kind(self) -> OptimizerKind {
        match self {
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
            OptimizerChoice::Adam => OptimizerKind::adam(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Load an existing dataset directory instead of generating.
    pub path: Option<String>,
    /// Derive the generator seed from the run's master seed; set false to
    /// pin `generator.seed` across seeds.
    pub derive_seed: bool,
    pub generator: GeneratorConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            derive_seed: true,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub base_channels: usize,
    /// Threshold converting mask probabilities to binary masks.
    pub seg_threshold: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            kind: TaskKind::Classification,
            base_channels: 6,
            seg_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub steps_per_episode: usize,
    pub episodes_per_update: usize,
    pub max_updates: usize,
    pub convergence_window: usize,
    pub convergence_tol: f64,
    pub predictor_reset_interval: usize,
    pub predictor_optimizer: OptimizerChoice,
    pub predictor_lr: f64,
    /// Frozen task-agnostic controller checkpoint for shaped mode.
    pub h_a_checkpoint: Option<String>,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            mode: TrainMode::TaskSpecific,
            batch_size: 32,
            steps_per_episode: 10,
            episodes_per_update: 4,
            max_updates: 200,
            convergence_window: 20,
            convergence_tol: 1e-3,
            predictor_reset_interval: 0,
            predictor_optimizer: OptimizerChoice::Adam,
            predictor_lr: 2e-3,
            h_a_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub rule: PolicyRule,
    pub lr: f64,
    pub entropy_coeff: f64,
    pub gamma: f64,
    pub clip_ratio: f64,
    pub surrogate_epochs: usize,
    pub baseline_alpha: f64,
    pub optimizer: OptimizerChoice,
    pub controller_channels: Vec<usize>,
    pub controller_dense: Vec<usize>,
    pub val_regression_weight: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        let d = PolicyUpdateConfig::default();
        PolicySection {
            rule: d.rule,
            lr: d.lr,
            entropy_coeff: d.entropy_coeff,
            gamma: d.gamma,
            clip_ratio: d.clip_ratio,
            surrogate_epochs: d.surrogate_epochs,
            baseline_alpha: d.baseline_alpha,
            optimizer: OptimizerChoice::Adam,
            controller_channels: vec![6, 12, 12],
            controller_dense: vec![48, 16],
            val_regression_weight: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Holdout rejection ratios, strictly increasing in [0, 1).
    pub ks: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: vec![0.0, 0.05, 0.10, 0.15, 0.20, 0.25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    /// Save a controller checkpoint every this many updates (0 = final only).
    pub checkpoint_interval: usize,
    pub write_svg: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "runs".into(),
            checkpoint_interval: 0,
            write_svg: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub task: TaskSection,
    pub trainer: TrainerSection,
    pub reward: RewardConfig,
    pub policy: PolicySection,
    pub evaluation: EvalSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn task_spec(&self) -> TaskSpec {
        match self.task.kind {
            TaskKind::Classification => TaskSpec::classification(self.task.base_channels),
            TaskKind::Segmentation => {
                TaskSpec::segmentation(self.task.base_channels, self.task.seg_threshold)
            }
            TaskKind::Reconstruction => TaskSpec::reconstruction(self.task.base_channels),
        }
    }

    pub fn policy_config(&self) -> PolicyUpdateConfig {
        PolicyUpdateConfig {
            rule: self.policy.rule,
            lr: self.policy.lr,
            entropy_coeff: self.policy.entropy_coeff,
            gamma: self.policy.gamma,
            clip_ratio: self.policy.clip_ratio,
            surrogate_epochs: self.policy.surrogate_epochs,
            baseline_alpha: self.policy.baseline_alpha,
            optimizer: self.policy.optimizer.kind(),
        }
    }

    pub fn trainer_config(&self, master_seed: u64) -> TrainerConfig {
        TrainerConfig {
            mode: self.trainer.mode,
            batch_size: self.trainer.batch_size,
            steps_per_episode: self.trainer.steps_per_episode,
            episodes_per_update: self.trainer.episodes_per_update,
            max_updates: self.trainer.max_updates,
            convergence_window: self.trainer.convergence_window,
            convergence_tol: self.trainer.convergence_tol,
            predictor_reset_interval: self.trainer.predictor_reset_interval,
            predictor_optimizer: self.trainer.predictor_optimizer.kind(),
            predictor_lr: self.trainer.predictor_lr,
            controller_channels: self.policy.controller_channels.clone(),
            controller_dense: self.policy.controller_dense.clone(),
            val_regression_weight: self.policy.val_regression_weight,
            reward: self.reward,
            policy: self.policy_config(),
            seed: master_seed,
        }
    }

    /// Generator config with the effective seed filled in.
    pub fn resolved_generator(&self, master_seed: u64) -> GeneratorConfig {
        let mut g = self.data.generator.clone();
        if self.data.derive_seed {
            g.seed = derive_seed(master_seed, "data");
        }
        g
    }

    /// A copy with every derived value pinned, suitable for embedding in a
    /// run manifest and regenerating the exact dataset later.
    pub fn resolved(&self, master_seed: u64) -> ExperimentConfig {
        let mut c = self.clone();
        c.data.generator = self.resolved_generator(master_seed);
        c.data.derive_seed = false;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.reward.s_rej) {
            return Err(Error::config(
                "reward.s_rej",
                format!("{} outside [0, 1)", self.reward.s_rej),
            ));
        }
        if !(0.0..=1.0).contains(&self.reward.phi) {
            return Err(Error::config(
                "reward.phi",
                format!("{} outside [0, 1]", self.reward.phi),
            ));
        }
        if !(0.0..=1.0).contains(&self.reward.alpha_r) {
            return Err(Error::config(
                "reward.alpha_r",
                format!("{} outside [0, 1]", self.reward.alpha_r),
            ));
        }
        if self.policy.controller_channels.is_empty() {
            return Err(Error::config(
                "policy.controller_channels",
                "need at least one encoder block",
            ));
        }
        let mut prev = -1.0;
        for &k in &self.evaluation.ks {
            if !(0.0..1.0).contains(&k) || k <= prev {
                return Err(Error::config(
                    "evaluation.ks",
                    format!("ratios must be strictly increasing in [0, 1), got {:?}", self.evaluation.ks),
                ));
            }
            prev = k;
        }
        Ok(())
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    let attempt = format!("v = {raw}");
    match attempt.parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `AMENABLE_*` overrides onto a parsed TOML table.
pub fn apply_env_overrides(
    table: &mut toml::Table,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<()> {
    for (name, value) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let Some((section_raw, key_raw)) = rest.split_once('_') else {
            return Err(Error::config(
                name.clone(),
                "expected AMENABLE_<SECTION>_<KEY>",
            ));
        };
        let section = section_raw.to_ascii_lowercase();
        let parsed = parse_env_value(&value);
        let section_table = table
            .entry(section.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(section.clone(), "section is not a table"))?;
        if section == "data" {
            if let Some(gen_key) = key_raw.strip_prefix("GENERATOR_") {
                let gen_table = section_table
                    .entry("generator".to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| {
                        Error::config("data.generator", "generator is not a table")
                    })?;
                gen_table.insert(gen_key.to_ascii_lowercase(), parsed);
                continue;
            }
        }
        section_table.insert(key_raw.to_ascii_lowercase(), parsed);
    }
    Ok(())
}

pub fn parse_config_with_env(
    text: &str,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
        path: "<config>".into(),
        message: e.to_string(),
    })?;
    apply_env_overrides(&mut table, vars)?;
    let cfg: ExperimentConfig =
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config {
                path: "<config>".into(),
                message: e.to_string(),
            })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a config file and applies process-environment overrides.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config_with_env(&text, std::env::vars()).map_err(|e| match e {
        Error::Config { path: p, message } if p == "<config>" => Error::Config {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}
