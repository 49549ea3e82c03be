//! Scripted target motion.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::sim::{wrap_angle, ActionCommand, ArenaConfig, WorldState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BehaviorKind {
    Static,
    Circular,
    RandomWaypoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorSpec {
    pub kind: BehaviorKind,
    /// cm per step
    pub speed: f64,
    /// radians per step
    pub steering: f64,
    pub switch_prob: f64,
    pub waypoint_radius: f64,
}

pub const DEFAULT_SWITCH_PROB: f64 = 0.01;
pub const DEFAULT_WAYPOINT_RADIUS: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BehaviorError {
    #[error("unknown scenario {0:?}; expected static, circular:<speed>:<steering_deg>:<switch_prob> or waypoint:<speed>:<steering_deg>")]
    Parse(String),
    #[error("behavior exceeds limits: {0}")]
    Invalid(String),
}

impl BehaviorSpec {
    pub fn stationary() -> Self {
        BehaviorSpec {
            kind: BehaviorKind::Static,
            speed: 0.0,
            steering: 0.0,
            switch_prob: 0.0,
            waypoint_radius: DEFAULT_WAYPOINT_RADIUS,
        }
    }

    /// Constant speed and turn rate, flipping turn direction at random.
    pub fn circular(speed: f64, steering_deg: f64, switch_prob: f64) -> Self {
        BehaviorSpec {
            kind: BehaviorKind::Circular,
            speed,
            steering: steering_deg.to_radians(),
            switch_prob,
            waypoint_radius: DEFAULT_WAYPOINT_RADIUS,
        }
    }

    pub fn waypoint(speed: f64, steering_deg: f64) -> Self {
        BehaviorSpec {
            kind: BehaviorKind::RandomWaypoint,
            speed,
            steering: steering_deg.to_radians(),
            switch_prob: 0.0,
            waypoint_radius: DEFAULT_WAYPOINT_RADIUS,
        }
    }

    pub fn validate(&self, cfg: &ArenaConfig) -> Result<(), BehaviorError> {
        let eps = 1e-12;
        if !(0.0..=cfg.v_max + eps).contains(&self.speed) {
            return Err(BehaviorError::Invalid(format!("speed {} outside [0, {}]", self.speed, cfg.v_max)));
        }
        if !(0.0..=cfg.w_max + eps).contains(&self.steering) {
            return Err(BehaviorError::Invalid(format!(
                "steering {:.3} deg outside [0, {:.3}]",
                self.steering.to_degrees(),
                cfg.w_max.to_degrees()
            )));
        }
        if !(0.0..=1.0).contains(&self.switch_prob) {
            return Err(BehaviorError::Invalid(format!("switch_prob {} outside [0, 1]", self.switch_prob)));
        }
        if self.kind == BehaviorKind::RandomWaypoint && self.waypoint_radius <= 0.0 {
            return Err(BehaviorError::Invalid("waypoint_radius must be positive".into()));
        }
        Ok(())
    }
}

impl fmt::Display for BehaviorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            BehaviorKind::Static => write!(f, "static"),
            BehaviorKind::Circular => write!(f, "circular:{}:{}:{}", self.speed, self.steering.to_degrees(), self.switch_prob),
            BehaviorKind::RandomWaypoint => write!(f, "waypoint:{}:{}", self.speed, self.steering.to_degrees()),
        }
    }
}

impl FromStr for BehaviorSpec {
    type Err = BehaviorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || BehaviorError::Parse(s.to_string());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<f64, BehaviorError> {
            let v: f64 = parts.get(i).ok_or_else(err)?.parse().map_err(|_| err())?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err())
            }
        };
        match parts[0] {
            "static" if parts.len() == 1 => Ok(BehaviorSpec::stationary()),
            "circular" if parts.len() == 3 => Ok(BehaviorSpec::circular(num(1)?, num(2)?, DEFAULT_SWITCH_PROB)),
            "circular" if parts.len() == 4 => Ok(BehaviorSpec::circular(num(1)?, num(2)?, num(3)?)),
            "waypoint" if parts.len() == 3 => Ok(BehaviorSpec::waypoint(num(1)?, num(2)?)),
            _ => Err(err()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BehaviorState {
    /// +1 turns counter-clockwise, −1 clockwise.
    pub direction: i8,
    pub waypoint: Option<(f64, f64)>,
}

impl Default for BehaviorState {
    fn default() -> Self {
        BehaviorState {
            direction: 1,
            waypoint: None,
        }
    }
}

impl BehaviorState {
    /// Random initial turn direction.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        BehaviorState {
            direction: if rng.random_bool(0.5) { 1 } else { -1 },
            waypoint: None,
        }
    }
}

/// Next target command and behavior state.
pub fn target_action<R: Rng + ?Sized>(
    spec: &BehaviorSpec,
    state: &BehaviorState,
    world: &WorldState,
    cfg: &ArenaConfig,
    rng: &mut R,
) -> (ActionCommand, BehaviorState) {
    let mut next = *state;
    match spec.kind {
        BehaviorKind::Static => (ActionCommand::STOP, next),
        BehaviorKind::Circular => {
            let cmd = ActionCommand::new(spec.speed / cfg.v_max, f64::from(state.direction) * spec.steering / cfg.w_max);
            if spec.switch_prob > 0.0 && rng.random_bool(spec.switch_prob) {
                next.direction = -state.direction;
            }
            (cmd, next)
        }
        BehaviorKind::RandomWaypoint => {
            let pose = &world.target;
            let reached = |(wx, wy): (f64, f64)| (wx - pose.x).hypot(wy - pose.y) <= spec.waypoint_radius;
            let wp = match state.waypoint {
                Some(wp) if !reached(wp) => wp,
                _ => loop {
                    let wp = (rng.random_range(0.0..=cfg.width), rng.random_range(0.0..=cfg.height));
                    if !reached(wp) {
                        break wp;
                    }
                },
            };
            next.waypoint = Some(wp);
            let delta = wrap_angle((wp.1 - pose.y).atan2(wp.0 - pose.x) - pose.heading);
            let turn = delta.clamp(-spec.steering, spec.steering);
            let drive = spec.speed * delta.cos().max(0.0);
            let cmd = ActionCommand::new(drive / cfg.v_max, turn / cfg.w_max);
            (cmd, next)
        }
    }
}

/// Heading span of a full circle at `steering` rad/step, in steps.
pub fn steps_per_circle(steering: f64) -> usize {
    (2.0 * PI / steering).ceil() as usize
}
