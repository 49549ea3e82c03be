//! One tracking episode: world, target behavior, scene palette and the
//! current observation, advanced one command at a time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::behaviors::{target_action, BehaviorSpec, BehaviorState};
use crate::ddpg::Transition;
use crate::observe::{observe, randomize_scene, Observation, ObservationMode, SceneRandomization};
use crate::sim::{reward, spawn_episode, step_kinematics, ActionCommand, ArenaConfig, RelativeState, RewardParams, SimError, WorldState};

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub arena: ArenaConfig,
    pub reward: RewardParams,
    pub observation: ObservationMode,
    pub target: BehaviorSpec,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            arena: ArenaConfig::default(),
            reward: RewardParams::default(),
            observation: ObservationMode::default(),
            target: BehaviorSpec::stationary(),
        }
    }
}

/// Outcome of one environment step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub before: WorldState,
    pub after: WorldState,
    pub tracker_cmd: ActionCommand,
    pub target_cmd: ActionCommand,
    pub reward: f64,
}

#[derive(Clone, Debug)]
pub struct EpisodeState {
    pub world: WorldState,
    pub behavior: BehaviorState,
    pub scene: SceneRandomization,
    pub obs: Observation,
}

impl EpisodeState {
    /// Training reset: random spawn, random palette, random turn direction.
    pub fn reset<R: Rng + ?Sized>(env: &EnvConfig, rng: &mut R) -> Result<Self, SimError> {
        let world = spawn_episode(rng, &env.arena)?;
        Ok(Self::from_world(env, world, rng))
    }

    /// Starts from a given world (evaluation spawns, tests).
    pub fn from_world<R: Rng + ?Sized>(env: &EnvConfig, world: WorldState, rng: &mut R) -> Self {
        let scene = randomize_scene(rng);
        let behavior = BehaviorState::random(rng);
        let obs = observe(&world, &env.observation, &scene, &env.arena, env.reward.rho_star, rng);
        EpisodeState {
            world,
            behavior,
            scene,
            obs,
        }
    }

    pub fn relative(&self) -> RelativeState {
        self.world.relative()
    }

    /// Moves target and tracker simultaneously, then observes the new world.
    pub fn advance<R: Rng + ?Sized>(&mut self, cmd: ActionCommand, env: &EnvConfig, rng: &mut R) -> (Transition, StepInfo) {
        let before = self.world;
        let cmd = ActionCommand::new(cmd.v, cmd.w);
        let (target_cmd, behavior) = target_action(&env.target, &self.behavior, &self.world, &env.arena, rng);
        self.behavior = behavior;
        self.world = WorldState {
            tracker: step_kinematics(&before.tracker, cmd, &env.arena),
            target: step_kinematics(&before.target, target_cmd, &env.arena),
            step: before.step + 1,
        };
        let r = reward(&self.world.relative(), &env.reward);
        let next_obs = observe(&self.world, &env.observation, &self.scene, &env.arena, env.reward.rho_star, rng);
        let rel = before.relative();
        let transition = Transition {
            obs: std::mem::replace(&mut self.obs, next_obs.clone()),
            action: cmd,
            reward: r,
            next_obs,
            true_rho: rel.rho,
            true_theta: rel.theta,
        };
        let info = StepInfo {
            before,
            after: self.world,
            tracker_cmd: cmd,
            target_cmd,
            reward: r,
        };
        (transition, info)
    }
}
