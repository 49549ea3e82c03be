//! Heuristic trajectory generator: a hand-written tracking controller fed
//! with ground-truth relative state.
//!
//! Turning is proportional to the bearing error (saturating at half the field
//! of view); driving is proportional to the distance error and only happens
//! once the target is roughly centred. The turn term uses `sign(theta)` rather
//! than `sign(theta - theta_star)`, so the controller is only meaningful for
//! `theta_star == 0`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::sim::{ActionCommand, ArenaConfig, RelativeState, RewardParams};

#[derive(Clone, Debug, PartialEq)]
pub struct HtgParams {
    pub fov: f64,
    pub rho_star: f64,
    pub rho_max: f64,
    pub theta_star: f64,
    /// Bearing error below which the controller starts driving.
    pub theta_align_gate: f64,
}

pub const DEFAULT_ALIGN_GATE_DEG: f64 = 10.0;

impl HtgParams {
    pub fn new(arena: &ArenaConfig, reward: &RewardParams) -> Self {
        HtgParams {
            fov: arena.fov,
            rho_star: reward.rho_star,
            rho_max: reward.rho_max,
            theta_star: reward.theta_star,
            theta_align_gate: DEFAULT_ALIGN_GATE_DEG.to_radians(),
        }
    }
}

impl Default for HtgParams {
    fn default() -> Self {
        HtgParams::new(&ArenaConfig::default(), &RewardParams::default())
    }
}

/// Gaussian exploration noise added independently to each action component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { mu: 0.0, sigma: 0.5 }
    }
}

impl NoiseConfig {
    pub const NONE: NoiseConfig = NoiseConfig { mu: 0.0, sigma: 0.0 };

    /// One `(v, w)` noise draw. Always consumes two normal samples so the
    /// stream stays aligned whatever sigma is.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let a: f64 = unit.sample(rng);
        let b: f64 = unit.sample(rng);
        (self.mu + self.sigma * a, self.mu + self.sigma * b)
    }

    /// `cmd` plus noise, clamped back into the action box.
    pub fn perturb<R: Rng + ?Sized>(&self, cmd: ActionCommand, rng: &mut R) -> ActionCommand {
        let (dv, dw) = self.sample(rng);
        ActionCommand::new(cmd.v + dv, cmd.w + dw)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn htg_policy(rel: &RelativeState, p: &HtgParams) -> ActionCommand {
    let bearing_err = (rel.theta - p.theta_star).abs();
    let w = -(2.0 * bearing_err / p.fov).min(1.0) * sign(rel.theta);
    let dist_err = rel.rho - p.rho_star;
    let v = if bearing_err < p.theta_align_gate {
        (dist_err.abs() / p.rho_max).min(1.0) * sign(dist_err)
    } else {
        0.0
    };
    ActionCommand::new(v, w)
}

pub fn htg_noisy<R: Rng + ?Sized>(rel: &RelativeState, p: &HtgParams, noise: &NoiseConfig, rng: &mut R) -> ActionCommand {
    noise.perturb(htg_policy(rel, p), rng)
}
