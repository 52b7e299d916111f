use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    GaussianMixture, InferenceGrid, MixtureConfig, NoiseSchedule, PretrainConfig, ScheduleConfig,
};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::nnet::NetworkSpec;
use crate::prefopt::PrefOptConfig;
use crate::reward::{RewardKind, RewardModel};

/// Version of the TOML layout below; bumped on any incompatible change.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Tailorpo,
    TailorpoG,
    D3po,
    PolicyGradient,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Tailorpo,
        Method::TailorpoG,
        Method::D3po,
        Method::PolicyGradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tailorpo => "tailorpo",
            Method::TailorpoG => "tailorpo-g",
            Method::D3po => "d3po",
            Method::PolicyGradient => "policy-gradient",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub kind: RewardKind,
    pub bandwidth: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            kind: RewardKind::TargetAffinity,
            bandwidth: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyGradientConfig {
    /// Decay of the running-mean reward baseline.
    pub baseline_decay: f64,
}

impl Default for PolicyGradientConfig {
    fn default() -> Self {
        Self {
            baseline_decay: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Log a metric row every this many pairs.
    pub every: usize,
    /// Samples per logged evaluation, spread evenly over conditions
    /// (rounded up to a whole number per condition).
    pub samples: usize,
    /// Samples per condition for the logged drift statistic.
    pub drift_samples: usize,
    /// Samples per condition for the final evaluation of a run.
    pub final_samples: usize,
    /// Evaluation noise seed, shared by every run so that methods and
    /// training seeds are compared on common noise.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 200,
            samples: 1000,
            drift_samples: 200,
            final_samples: 10_000,
            seed: 0xE7A1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub checkpoint_dir: PathBuf,
    pub metrics_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            checkpoint_dir: "runs/checkpoints".into(),
            metrics_dir: "runs/metrics".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub method: Method,
    /// Inference indices k on the DDIM grid at which pairs are formed.
    pub fine_tune_steps: Vec<usize>,
    /// Total preference pairs (transition samples for policy gradient).
    pub sample_budget: usize,
    /// Conditions drawn uniformly during fine-tuning.
    pub conditions: Vec<usize>,
    pub inference_steps: usize,
    pub network: NetworkSpec,
    pub schedule: ScheduleConfig,
    pub data: MixtureConfig,
    pub pretrain: PretrainConfig,
    pub prefopt: PrefOptConfig,
    pub guidance: GuidanceConfig,
    pub reward: RewardConfig,
    pub policy_gradient: PolicyGradientConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            method: Method::Tailorpo,
            fine_tune_steps: vec![20, 16, 12, 8, 4],
            sample_budget: 10_000,
            conditions: (0..8).collect(),
            inference_steps: 20,
            network: NetworkSpec::default(),
            schedule: ScheduleConfig::default(),
            data: MixtureConfig::default(),
            pretrain: PretrainConfig::default(),
            prefopt: PrefOptConfig::default(),
            guidance: GuidanceConfig::default(),
            reward: RewardConfig::default(),
            policy_gradient: PolicyGradientConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// `count` fine-tuned indices evenly spaced from the top of the grid.
pub fn uniform_fine_tune_steps(inference_steps: usize, count: usize) -> Vec<usize> {
    if count == 0 {
        return Vec::new();
    }
    let stride = inference_steps as f64 / count as f64;
    (0..count)
        .map(|i| inference_steps - (i as f64 * stride).round() as usize)
        .collect()
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.network.validate()?;
        self.prefopt.validate()?;
        self.guidance.validate()?;
        if self.sample_budget == 0 {
            return Err(Error::Config("sample_budget must be positive".into()));
        }
        if self.inference_steps == 0 || self.inference_steps > self.schedule.t_train {
            return Err(Error::Config(format!(
                "inference_steps {} must lie in 1..={}",
                self.inference_steps, self.schedule.t_train
            )));
        }
        let mut sorted = self.fine_tune_steps.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.fine_tune_steps.len() {
            return Err(Error::Config("fine_tune_steps contains duplicates".into()));
        }
        // k = 1 ends in the deterministic final step, whose log-probability is undefined.
        if let Some(&k) = self
            .fine_tune_steps
            .iter()
            .find(|&&k| k < 2 || k > self.inference_steps)
        {
            return Err(Error::Config(format!(
                "fine-tuned step {k} outside 2..={}",
                self.inference_steps
            )));
        }
        // TOML integers are signed.
        for (name, seed) in [
            ("seed", self.seed),
            ("pretrain.seed", self.pretrain.seed),
            ("eval.seed", self.eval.seed),
        ] {
            if i64::try_from(seed).is_err() {
                return Err(Error::Config(format!("{name} {seed} exceeds {}", i64::MAX)));
            }
        }
        if self.conditions.is_empty() {
            return Err(Error::Config("at least one condition is required".into()));
        }
        if let Some(&c) = self
            .conditions
            .iter()
            .find(|&&c| c >= self.network.num_conditions)
        {
            return Err(Error::Config(format!(
                "condition {c} outside the network's label set"
            )));
        }
        if self.data.modes != self.network.num_conditions {
            return Err(Error::Config(
                "data modes must equal network conditions".into(),
            ));
        }
        if self.network.time_steps != self.schedule.t_train {
            return Err(Error::Config(
                "network time steps must equal schedule length".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.policy_gradient.baseline_decay) {
            return Err(Error::Config("baseline_decay must lie in [0, 1)".into()));
        }
        if self.eval.every == 0 {
            return Err(Error::Config("eval.every must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn sched(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(&self.schedule)
    }

    pub fn grid(&self) -> Result<InferenceGrid> {
        InferenceGrid::uniform(self.schedule.t_train, self.inference_steps)
    }

    pub fn mixture(&self) -> Result<GaussianMixture> {
        GaussianMixture::new(self.data.clone())
    }

    pub fn reward_model(&self) -> Result<RewardModel> {
        RewardModel::antipodal(&self.mixture()?, self.reward.kind, self.reward.bandwidth)
    }

    /// Fine-tuned indices sorted from the noisiest step down.
    pub fn fine_tune_descending(&self) -> Vec<usize> {
        let mut v = self.fine_tune_steps.clone();
        v.sort_unstable_by(|a, b| b.cmp(a));
        v
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.paths.checkpoint_dir.join("pretrained.ckpt")
    }

    pub fn finetuned_path(&self) -> PathBuf {
        self.paths
            .checkpoint_dir
            .join(format!("{}-seed{}.ckpt", self.method.name(), self.seed))
    }

    pub fn metrics_path(&self, stem: &str) -> PathBuf {
        self.paths.metrics_dir.join(format!("{stem}.csv"))
    }
}
