//! Versioned JSON run configuration.
//!
//! Field names follow the hyperparameter table, with units in the name and
//! angles in degrees. Unknown keys are rejected at every level. Overrides
//! (`--key value`) address either a unique leaf name, a dotted path such as
//! `train.learning_rate`, or one of a few short aliases (`workers`,
//! `episodes`, `mode`, `lr`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::behaviors::BehaviorSpec;
use crate::ddpg::{ActorObjective, MixConfig, TrainConfig, TrainSetup};
use crate::env::EnvConfig;
use crate::eval::{EvalSettings, MetricParams, Scenario};
use crate::htg::NoiseConfig;
use crate::nets::{ConvSpec, NetConfig};
use crate::observe::{ObsKind, ObservationMode};
use crate::par::Execution;
use crate::sim::{ArenaConfig, RewardParams};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("unsupported config version {found} (expected {CONFIG_VERSION})")]
    Version { found: u64 },
    #[error("unknown override key --{0}")]
    UnknownKey(String),
    #[error("override --{0} is ambiguous; use one of {1}")]
    AmbiguousKey(String, String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub reward_coeff_a: f64,
    pub rho_star_cm: f64,
    pub rho_max_cm: f64,
    pub theta_star_deg: f64,
    pub theta_max_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub noise_mu: f64,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArenaSection {
    pub episode_len: usize,
    pub fov_deg: f64,
    /// Speed cap per step.
    pub agent_speed_cm: f64,
    /// Steering cap per step.
    pub agent_steering_deg: f64,
    pub width_cm: f64,
    pub height_cm: f64,
    pub spawn_radius_min_cm: f64,
    pub spawn_radius_max_cm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSection {
    pub mode: ObsKind,
    pub raster_width: usize,
    pub raster_height: usize,
    pub vector_noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub norm_groups: usize,
    pub fc_size: usize,
    pub gru_size: usize,
    pub head_sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub num_agents: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub num_episodes: u64,
    pub htg_episode_len: usize,
    pub replay_buffer_size: usize,
    pub sequence_len: usize,
    pub update_interval: usize,
    pub gamma: f64,
    pub tau: f64,
    pub actor_episodes_per_cycle: u64,
    pub htg_episodes_per_cycle: u64,
    pub htg_seeding: bool,
    pub htg_until_episode: Option<u64>,
    pub actor_objective: ActorObjective,
    pub warmup_steps: Option<usize>,
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub runs: usize,
    pub steps: usize,
    pub rho_bound_cm: f64,
    pub scenarios: Vec<String>,
    pub execution: Execution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: Option<String>,
    /// Training target behavior, in scenario syntax.
    pub target: String,
    pub reward: RewardSection,
    pub noise: NoiseSection,
    pub arena: ArenaSection,
    pub observation: ObservationSection,
    pub net: NetSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = RewardParams::default();
        let a = ArenaConfig::default();
        let o = ObservationMode::default();
        let n = NetConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: None,
            target: "static".into(),
            reward: RewardSection {
                reward_coeff_a: r.a,
                rho_star_cm: r.rho_star,
                rho_max_cm: r.rho_max,
                theta_star_deg: r.theta_star.to_degrees(),
                theta_max_deg: 10.0,
            },
            noise: NoiseSection {
                noise_mu: t.noise.mu,
                noise_sigma: t.noise.sigma,
            },
            arena: ArenaSection {
                episode_len: a.episode_len,
                fov_deg: 90.0,
                agent_speed_cm: a.v_max,
                agent_steering_deg: 8.0,
                width_cm: a.width,
                height_cm: a.height,
                spawn_radius_min_cm: a.spawn_radius_min,
                spawn_radius_max_cm: a.spawn_radius_max,
            },
            observation: ObservationSection {
                mode: o.kind,
                raster_width: o.raster_width,
                raster_height: o.raster_height,
                vector_noise_std: o.vector_noise_std,
            },
            net: NetSection {
                conv1: n.conv1,
                conv2: n.conv2,
                norm_groups: n.norm_groups,
                fc_size: n.fc_size,
                gru_size: n.gru_size,
                head_sizes: n.head_sizes,
            },
            train: TrainSection {
                num_agents: t.workers,
                learning_rate: t.lr,
                batch_size: t.batch_size,
                num_episodes: t.episodes,
                htg_episode_len: t.htg_episode_len,
                replay_buffer_size: t.replay_capacity,
                sequence_len: t.seq_len,
                update_interval: t.update_interval,
                gamma: t.gamma,
                tau: t.tau,
                actor_episodes_per_cycle: t.mix.actor,
                htg_episodes_per_cycle: t.mix.htg,
                htg_seeding: t.htg_seeding,
                htg_until_episode: t.htg_until_episode,
                actor_objective: t.actor_objective,
                warmup_steps: t.warmup_steps,
                checkpoint_every: t.checkpoint_every,
            },
            eval: EvalSection {
                runs: 20,
                steps: 250,
                rho_bound_cm: 150.0,
                scenarios: ["circular:3:3:0.01", "circular:5:5:0.01", "circular:8:8:0.01", "circular:8:3:0.01", "waypoint:8:8"]
                    .map(String::from)
                    .to_vec(),
                execution: Execution::default(),
            },
        }
    }
}

const ALIASES: &[(&str, &str)] = &[
    ("workers", "train.num_agents"),
    ("episodes", "train.num_episodes"),
    ("lr", "train.learning_rate"),
    ("mode", "observation.mode"),
    ("runs", "eval.runs"),
    ("steps", "eval.steps"),
];

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let v: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_value(v)
    }

    fn from_value(v: Value) -> Result<Self, ConfigError> {
        match v.get("version").and_then(Value::as_u64) {
            Some(n) if n == CONFIG_VERSION as u64 => {}
            Some(n) => return Err(ConfigError::Version { found: n }),
            None => return Err(ConfigError::Parse("missing \"version\"".into())),
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `--key value` overrides. Values are read as JSON when they
    /// parse, otherwise as plain strings.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for (key, raw) in overrides {
            let path = resolve_key(&v, key)?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let mut slot = &mut v;
            for part in path.split('.') {
                slot = slot.get_mut(part).ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
            }
            *slot = value;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.train_setup()?.validate().map_err(invalid)?;
        let eval = self.eval_settings();
        if eval.runs == 0 || eval.steps == 0 {
            return Err(invalid("eval runs and steps must be positive".into()));
        }
        eval.metric.validate().map_err(invalid)?;
        for s in &self.eval.scenarios {
            let sc: Scenario = s.parse().map_err(|e: crate::behaviors::BehaviorError| invalid(e.to_string()))?;
            sc.target.validate(&eval.arena).map_err(|e| invalid(format!("scenario {s}: {e}")))?;
        }
        Ok(())
    }

    pub fn arena(&self) -> ArenaConfig {
        let a = &self.arena;
        ArenaConfig {
            width: a.width_cm,
            height: a.height_cm,
            spawn_radius_min: a.spawn_radius_min_cm,
            spawn_radius_max: a.spawn_radius_max_cm,
            fov: a.fov_deg.to_radians(),
            v_max: a.agent_speed_cm,
            w_max: a.agent_steering_deg.to_radians(),
            episode_len: a.episode_len,
        }
    }

    pub fn reward(&self) -> RewardParams {
        let r = &self.reward;
        RewardParams {
            a: r.reward_coeff_a,
            rho_star: r.rho_star_cm,
            rho_max: r.rho_max_cm,
            theta_star: r.theta_star_deg.to_radians(),
            theta_max: r.theta_max_deg.to_radians(),
        }
    }

    pub fn observation(&self) -> ObservationMode {
        let o = &self.observation;
        ObservationMode {
            kind: o.mode,
            raster_width: o.raster_width,
            raster_height: o.raster_height,
            vector_noise_std: o.vector_noise_std,
        }
    }

    pub fn net(&self) -> NetConfig {
        let n = &self.net;
        NetConfig {
            obs_kind: self.observation.mode,
            raster_width: self.observation.raster_width,
            raster_height: self.observation.raster_height,
            conv1: n.conv1,
            conv2: n.conv2,
            norm_groups: n.norm_groups,
            fc_size: n.fc_size,
            gru_size: n.gru_size,
            head_sizes: n.head_sizes.clone(),
        }
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            mu: self.noise.noise_mu,
            sigma: self.noise.noise_sigma,
        }
    }

    pub fn train_setup(&self) -> Result<TrainSetup, ConfigError> {
        let t = &self.train;
        let target: BehaviorSpec = self.target.parse().map_err(|e: crate::behaviors::BehaviorError| ConfigError::Invalid(e.to_string()))?;
        Ok(TrainSetup {
            env: EnvConfig {
                arena: self.arena(),
                reward: self.reward(),
                observation: self.observation(),
                target,
            },
            net: self.net(),
            train: TrainConfig {
                gamma: t.gamma,
                tau: t.tau,
                lr: t.learning_rate,
                batch_size: t.batch_size,
                seq_len: t.sequence_len,
                update_interval: t.update_interval,
                workers: t.num_agents,
                episodes: t.num_episodes,
                htg_episode_len: t.htg_episode_len,
                replay_capacity: t.replay_buffer_size,
                mix: MixConfig {
                    actor: t.actor_episodes_per_cycle,
                    htg: t.htg_episodes_per_cycle,
                },
                htg_seeding: t.htg_seeding,
                htg_until_episode: t.htg_until_episode,
                noise: self.noise(),
                actor_objective: t.actor_objective,
                warmup_steps: t.warmup_steps,
                checkpoint_every: t.checkpoint_every,
                seed: self.seed,
            },
        })
    }

    pub fn eval_settings(&self) -> EvalSettings {
        let arena = self.arena();
        let reward = self.reward();
        EvalSettings {
            metric: MetricParams::new(&arena, &reward, self.eval.rho_bound_cm),
            arena,
            reward,
            observation: self.observation(),
            runs: self.eval.runs,
            steps: self.eval.steps,
            seed: self.seed,
            execution: self.eval.execution,
        }
    }
}

fn leaf_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.push(path.clone());
            leaf_paths(child, &path, out);
        }
    }
}

fn resolve_key(v: &Value, key: &str) -> Result<String, ConfigError> {
    let key = key.replace('-', "_");
    if let Some((_, path)) = ALIASES.iter().find(|(a, _)| *a == key) {
        return Ok(path.to_string());
    }
    let mut paths = Vec::new();
    leaf_paths(v, "", &mut paths);
    if paths.contains(&key) {
        return Ok(key);
    }
    let hits: Vec<&String> = paths.iter().filter(|p| p.rsplit('.').next() == Some(key.as_str())).collect();
    match hits.as_slice() {
        [one] => Ok(one.to_string()),
        [] => Err(ConfigError::UnknownKey(key)),
        many => Err(ConfigError::AmbiguousKey(key, many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", "))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_reproduce_the_table() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["reward"]["rho_star_cm"], 50.0);
        assert_eq!(v["reward"]["theta_max_deg"], 10.0);
        assert_eq!(v["arena"]["fov_deg"], 90.0);
        assert_eq!(v["train"]["num_agents"], 10);
        assert_eq!(v["train"]["num_episodes"], 9000);
        assert_eq!(v["train"]["replay_buffer_size"], 3500);
        let setup = c.train_setup().unwrap();
        assert_eq!(setup.train, TrainConfig::default());
        assert_eq!(setup.env.reward, RewardParams::default());
        assert_eq!(setup.env.arena, ArenaConfig::default());
        assert_eq!(setup.net, NetConfig::default());
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_versions_rejected() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["train"]["learning_rat"] = 1.into();
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(ConfigError::Parse(_))));
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["version"] = 2.into();
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(ConfigError::Version { found: 2 })));
        assert!(matches!(RunConfig::from_json("{}"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn overrides_by_alias_leaf_and_path() {
        let c = RunConfig::default()
            .with_overrides(&ov(&[("workers", "1"), ("episodes", "5"), ("mode", "raster"), ("rho_star_cm", "60"), ("eval.runs", "3"), ("target", "circular:3:3:0.01")]))
            .unwrap();
        assert_eq!(c.train.num_agents, 1);
        assert_eq!(c.train.num_episodes, 5);
        assert_eq!(c.observation.mode, ObsKind::Raster);
        assert_eq!(c.reward.rho_star_cm, 60.0);
        assert_eq!(c.eval.runs, 3);
        assert_eq!(c.target, "circular:3:3:0.01");
        assert_eq!(c.net().obs_kind, ObsKind::Raster);
    }

    #[test]
    fn bad_overrides() {
        let c = RunConfig::default();
        assert!(matches!(c.with_overrides(&ov(&[("nope", "1")])), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.with_overrides(&ov(&[("channels", "4")])), Err(ConfigError::AmbiguousKey(..))));
        assert!(matches!(c.with_overrides(&ov(&[("gamma", "1.5")])), Err(ConfigError::Invalid(_))));
        assert!(matches!(c.with_overrides(&ov(&[("gamma", "fast")])), Err(ConfigError::Parse(_))));
        assert!(matches!(c.with_overrides(&ov(&[("target", "circular:30:3:0.01")])), Err(ConfigError::Invalid(_))));
    }
}
