//! Experiment configuration: a versioned JSON document with strict
//! validation, unknown keys rejected with path-qualified errors, and
//! documented defaults.

use fova_core::data::FederationConfig;
use fova_core::error::{Error, Result};
use fova_core::federation::Algo;
use fova_core::learner::{HyperParams, VoteMode};
use fova_core::mdp::{make_gridworld, make_random_mdp, MdpSpec};
use serde::{Deserialize, Serialize};

/// Default AWR weighting and temperature.
pub const DEFAULT_LAMBDA: f64 = 5.0;
pub const DEFAULT_BETA: f64 = 5.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MdpBlock {
    /// "gridworld" or "random".
    pub kind: String,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slip_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_states: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_actions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl MdpBlock {
    pub fn build(&self) -> Result<MdpSpec> {
        match self.kind.as_str() {
            "gridworld" => {
                let width = self
                    .width
                    .ok_or_else(|| Error::Config("mdp.width: required for gridworld".into()))?;
                let height = self
                    .height
                    .ok_or_else(|| Error::Config("mdp.height: required for gridworld".into()))?;
                let slip = self.slip_prob.unwrap_or(0.0);
                let goal = self.goal_reward.unwrap_or(1.0);
                make_gridworld(width, height, slip, goal, self.gamma)
            }
            "random" => {
                let n_states = self
                    .n_states
                    .ok_or_else(|| Error::Config("mdp.n_states: required for random".into()))?;
                let n_actions = self
                    .n_actions
                    .ok_or_else(|| Error::Config("mdp.n_actions: required for random".into()))?;
                let r_max = self.r_max.unwrap_or(1.0);
                let seed = self.seed.unwrap_or(0);
                make_random_mdp(n_states, n_actions, self.gamma, r_max, seed)
            }
            other => Err(Error::Config(format!(
                "mdp.kind: unknown kind `{other}` (expected gridworld or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClientBlock {
    pub quality: f64,
    pub n_transitions: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FederationBlock {
    pub n_clients: usize,
    pub per_client: Vec<ClientBlock>,
    #[serde(default = "default_mdp_ref")]
    pub mdp_ref: String,
}

fn default_mdp_ref() -> String {
    "mdp".into()
}

/// All optional; unset fields take library defaults, with `gamma` inherited
/// from the MDP block and `lambda = beta = 5`.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HyperBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_conf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improve_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improve_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2_q_weight: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VoteModeBlock {
    /// "expected_q" or "sampled_q".
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_seed: Option<u64>,
}

impl Default for VoteModeBlock {
    fn default() -> Self {
        Self {
            kind: "expected_q".into(),
            sample_seed: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub mdp: MdpBlock,
    pub federation: FederationBlock,
    #[serde(default)]
    pub hyper: HyperBlock,
    pub rounds: usize,
    #[serde(default = "default_algo")]
    pub algo: String,
    #[serde(default)]
    pub vote_mode: VoteModeBlock,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Continual mode: one quality label per phase, applied to all clients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_schedule: Option<Vec<f64>>,
    #[serde(default)]
    pub init_policy_from_behavior: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_delta: Option<f64>,
}

fn default_version() -> u32 {
    1
}

fn default_algo() -> String {
    "fova".into()
}

/// Parses and fully validates a config document. Unknown keys are rejected
/// with their JSON path; range violations name the offending field.
pub fn parse_config(source: &str) -> Result<ExperimentConfig> {
    let mut de = serde_json::Deserializer::from_str(source);
    let config: ExperimentConfig = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
    config.validate()?;
    Ok(config)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Config(format!(
                "version: unsupported value {}",
                self.version
            )));
        }
        if !(self.mdp.gamma > 0.0 && self.mdp.gamma < 1.0) {
            return Err(Error::Config(format!(
                "mdp.gamma: must lie in (0,1), got {}",
                self.mdp.gamma
            )));
        }
        self.mdp.build()?;
        if self.rounds == 0 {
            return Err(Error::Config("rounds: must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed required".into()));
        }
        Algo::from_tag(&self.algo)?;
        match self.vote_mode.kind.as_str() {
            "expected_q" => {}
            "sampled_q" => {
                if self.vote_mode.sample_seed.is_none() {
                    return Err(Error::Config(
                        "vote_mode.sample_seed: required for sampled_q".into(),
                    ));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "vote_mode.kind: unknown kind `{other}` (expected expected_q or sampled_q)"
                )))
            }
        }
        if let Some(g) = self.hyper.gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::Config(format!(
                    "hyper.gamma: must lie in (0,1), got {g}"
                )));
            }
        }
        self.federation_config().validate()?;
        self.hyper_params()?.validate().map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("hyper.{msg}")),
            other => other,
        })?;
        if let Some(schedule) = &self.quality_schedule {
            if schedule.is_empty() {
                return Err(Error::Config(
                    "quality_schedule: must be nonempty when present".into(),
                ));
            }
            for (i, q) in schedule.iter().enumerate() {
                if !(0.0..=1.0).contains(q) {
                    return Err(Error::Config(format!(
                        "quality_schedule[{i}]: quality {q} outside [0,1]"
                    )));
                }
            }
        }
        if let Some(s) = self.smoothing {
            if s < 0.0 {
                return Err(Error::Config(format!(
                    "smoothing: must be nonnegative, got {s}"
                )));
            }
        }
        if let Some(d) = self.coverage_delta {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Config(format!(
                    "coverage_delta: must lie in (0,1], got {d}"
                )));
            }
        }
        Ok(())
    }

    /// Hyperparameters with defaults applied; `gamma` defaults to the MDP's.
    pub fn hyper_params(&self) -> Result<HyperParams> {
        let d = HyperParams::default();
        Ok(HyperParams {
            alpha: self.hyper.alpha.unwrap_or(d.alpha),
            beta: self.hyper.beta.unwrap_or(DEFAULT_BETA),
            lambda: self.hyper.lambda.unwrap_or(DEFAULT_LAMBDA),
            gamma: self.hyper.gamma.unwrap_or(self.mdp.gamma),
            delta_conf: self.hyper.delta_conf.unwrap_or(d.delta_conf),
            zeta: self.hyper.zeta.unwrap_or(d.zeta),
            eval_tol: self.hyper.eval_tol.unwrap_or(d.eval_tol),
            eval_max_iter: self.hyper.eval_max_iter.unwrap_or(d.eval_max_iter),
            improve_steps: self.hyper.improve_steps.unwrap_or(d.improve_steps),
            improve_lr: self.hyper.improve_lr.unwrap_or(d.improve_lr),
            l2_q_weight: self.hyper.l2_q_weight.unwrap_or(d.l2_q_weight),
        })
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            n_clients: self.federation.n_clients,
            per_client: self
                .federation
                .per_client
                .iter()
                .map(|c| fova_core::data::ClientSpec {
                    quality: c.quality,
                    n_transitions: c.n_transitions,
                    seed: c.seed,
                })
                .collect(),
            mdp_ref: self.federation.mdp_ref.clone(),
        }
    }

    pub fn algo(&self) -> Result<Algo> {
        Algo::from_tag(&self.algo)
    }

    pub fn vote_mode(&self) -> Result<VoteMode> {
        match self.vote_mode.kind.as_str() {
            "expected_q" => Ok(VoteMode::ExpectedQ),
            "sampled_q" => Ok(VoteMode::SampledQ {
                sample_seed: self.vote_mode.sample_seed.ok_or_else(|| {
                    Error::Config("vote_mode.sample_seed: required for sampled_q".into())
                })?,
            }),
            other => Err(Error::Config(format!(
                "vote_mode.kind: unknown kind `{other}`"
            ))),
        }
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing.unwrap_or(fova_core::data::DEFAULT_SMOOTHING)
    }

    pub fn coverage_delta(&self) -> f64 {
        self.coverage_delta.unwrap_or(0.05)
    }

    /// Canonical serialized form of the validated document.
    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
