//! Planar kinematic world: poses, spawning, unicycle integration, relative
//! geometry and the shaped tracking reward.
//!
//! Angle conventions used throughout the crate:
//!
//! * world headings are counter-clockwise from +x, wrapped to (−π, π];
//! * a positive angular command turns the body counter-clockwise (left);
//! * the bearing `theta` of the target is measured clockwise from the
//!   tracker's forward axis, so positive means the target is to the
//!   tracker's **right**, the same direction image columns grow in.
//!
//! With these conventions the heuristic steering law
//! `w = −min(2|θ|/FOV, 1)·sign(θ)` turns toward the target.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid arena config: {0}")]
    InvalidArena(String),
    #[error("invalid reward params: {0}")]
    InvalidReward(String),
}

/// Wraps an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose2D {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }
}

/// Range and bearing of the target in the tracker frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeState {
    pub rho: f64,
    pub theta: f64,
}

/// Normalized `(translational, angular)` command, each in [−1, 1].
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionCommand {
    pub v: f64,
    pub w: f64,
}

impl ActionCommand {
    /// Builds a command, clamping both components to [−1, 1].
    /// NaN components become 0.
    pub fn new(v: f64, w: f64) -> Self {
        let c = |x: f64| if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) };
        ActionCommand { v: c(v), w: c(w) }
    }

    pub const STOP: ActionCommand = ActionCommand { v: 0.0, w: 0.0 };
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArenaConfig {
    pub width: f64,
    pub height: f64,
    pub spawn_radius_min: f64,
    pub spawn_radius_max: f64,
    /// Field of view, radians.
    pub fov: f64,
    /// Speed cap, cm per step.
    pub v_max: f64,
    /// Turn-rate cap, radians per step.
    pub w_max: f64,
    pub episode_len: usize,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        ArenaConfig {
            width: 500.0,
            height: 500.0,
            spawn_radius_min: 30.0,
            spawn_radius_max: 150.0,
            fov: 90f64.to_radians(),
            v_max: 8.0,
            w_max: 8f64.to_radians(),
            episode_len: 250,
        }
    }
}

impl ArenaConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidArena(m.to_string()));
        let finite = [self.width, self.height, self.spawn_radius_min, self.spawn_radius_max, self.fov, self.v_max, self.w_max];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("all values must be finite");
        }
        if !(self.spawn_radius_min > 0.0 && self.spawn_radius_min <= self.spawn_radius_max) {
            return bad("need 0 < spawn_radius_min <= spawn_radius_max");
        }
        if self.spawn_radius_max >= self.width.min(self.height) / 2.0 {
            return bad("spawn_radius_max must be below half the smaller arena side");
        }
        if !(self.fov > 0.0 && self.fov <= PI) {
            return bad("fov must lie in (0, pi]");
        }
        if !(self.v_max > 0.0 && self.w_max > 0.0) {
            return bad("v_max and w_max must be positive");
        }
        if self.episode_len == 0 {
            return bad("episode_len must be positive");
        }
        Ok(())
    }

    pub fn clamp_position(&self, x: f64, y: f64) -> (f64, f64) {
        (x.clamp(0.0, self.width), y.clamp(0.0, self.height))
    }

    pub fn center(&self) -> (f64, f64) {
        (self.width / 2.0, self.height / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardParams {
    pub a: f64,
    pub rho_star: f64,
    pub rho_max: f64,
    pub theta_star: f64,
    pub theta_max: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            a: 0.1,
            rho_star: 50.0,
            rho_max: 20.0,
            theta_star: 0.0,
            theta_max: 10f64.to_radians(),
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.a > 0.0 && self.rho_max > 0.0 && self.theta_max > 0.0) {
            return Err(SimError::InvalidReward("A, rho_max and theta_max must be positive".into()));
        }
        if !(self.rho_star.is_finite() && self.theta_star.is_finite()) {
            return Err(SimError::InvalidReward("rho_star and theta_star must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub tracker: Pose2D,
    pub target: Pose2D,
    pub step: usize,
}

impl WorldState {
    pub fn relative(&self) -> RelativeState {
        relative_state(&self.tracker, &self.target)
    }
}

pub fn relative_state(tracker: &Pose2D, target: &Pose2D) -> RelativeState {
    let dx = target.x - tracker.x;
    let dy = target.y - tracker.y;
    let rho = dx.hypot(dy);
    let theta = if rho == 0.0 {
        0.0
    } else {
        wrap_angle(tracker.heading - dy.atan2(dx))
    };
    RelativeState { rho, theta }
}

/// Rotate first, then translate along the new heading; walls clamp.
pub fn step_kinematics(pose: &Pose2D, cmd: ActionCommand, cfg: &ArenaConfig) -> Pose2D {
    let cmd = ActionCommand::new(cmd.v, cmd.w);
    let heading = wrap_angle(pose.heading + cmd.w * cfg.w_max);
    let d = cmd.v * cfg.v_max;
    let (x, y) = cfg.clamp_position(pose.x + d * heading.cos(), pose.y + d * heading.sin());
    Pose2D { x, y, heading }
}

/// Uniform angle in (−π, π].
pub fn uniform_angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    wrap_angle(rng.random_range(-PI..PI))
}

/// Fresh training episode.
///
/// The tracker is drawn uniformly from the arena inset by
/// `spawn_radius_max`, so the whole spawn annulus lies inside the walls;
/// the target is drawn area-uniformly from the annulus at a uniform
/// bearing, so it frequently starts out of view.
pub fn spawn_episode<R: Rng + ?Sized>(rng: &mut R, cfg: &ArenaConfig) -> Result<WorldState, SimError> {
    cfg.validate()?;
    let m = cfg.spawn_radius_max;
    let tx = rng.random_range(m..=cfg.width - m);
    let ty = rng.random_range(m..=cfg.height - m);
    let heading = uniform_angle(rng);
    let (r2min, r2max) = (cfg.spawn_radius_min.powi(2), cfg.spawn_radius_max.powi(2));
    let r = rng.random_range(r2min..=r2max).sqrt();
    let phi = rng.random_range(-PI..PI);
    let (gx, gy) = cfg.clamp_position(tx + r * phi.cos(), ty + r * phi.sin());
    Ok(WorldState {
        tracker: Pose2D::new(tx, ty, heading),
        target: Pose2D::new(gx, gy, uniform_angle(rng)),
        step: 0,
    })
}

/// Evaluation spawn: the target sits `distance` straight ahead of the tracker.
pub fn spawn_in_front<R: Rng + ?Sized>(rng: &mut R, cfg: &ArenaConfig, distance: f64) -> Result<WorldState, SimError> {
    cfg.validate()?;
    let m = cfg.spawn_radius_max.max(distance);
    let (lo_x, hi_x) = (m.min(cfg.width / 2.0), (cfg.width - m).max(cfg.width / 2.0));
    let (lo_y, hi_y) = (m.min(cfg.height / 2.0), (cfg.height - m).max(cfg.height / 2.0));
    let tx = rng.random_range(lo_x..=hi_x);
    let ty = rng.random_range(lo_y..=hi_y);
    let heading = uniform_angle(rng);
    let (gx, gy) = cfg.clamp_position(tx + distance * heading.cos(), ty + distance * heading.sin());
    Ok(WorldState {
        tracker: Pose2D::new(tx, ty, heading),
        target: Pose2D::new(gx, gy, heading),
        step: 0,
    })
}

/// `A · max(0, 1 − |ρ−ρ*|/ρ_max) · max(0, 1 − |θ−θ*|/θ_max)`, in [0, A].
pub fn reward(rel: &RelativeState, p: &RewardParams) -> f64 {
    let r_rho = (1.0 - (rel.rho - p.rho_star).abs() / p.rho_max).max(0.0);
    let r_theta = (1.0 - (rel.theta - p.theta_star).abs() / p.theta_max).max(0.0);
    p.a * r_rho * r_theta
}

/// Boundary inclusive: `|θ| ≤ fov/2`.
pub fn in_fov(rel: &RelativeState, fov: f64) -> bool {
    rel.theta.abs() <= fov / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DEG: f64 = PI / 180.0;

    #[test]
    fn relative_state_examples() {
        let origin = Pose2D::new(0.0, 0.0, 0.0);
        let r = relative_state(&origin, &Pose2D::new(50.0, 0.0, 0.0));
        assert_eq!((r.rho, r.theta), (50.0, 0.0));
        // Target on the tracker's left has negative bearing.
        let r = relative_state(&origin, &Pose2D::new(0.0, 50.0, 0.0));
        assert_eq!(r.rho, 50.0);
        assert!((r.theta + PI / 2.0).abs() < 1e-15);
        let r = relative_state(&Pose2D::new(0.0, 0.0, 0.0), &Pose2D::new(0.0, -50.0, 0.0));
        assert!((r.theta - PI / 2.0).abs() < 1e-15);
        let r = relative_state(&Pose2D::new(10.0, 10.0, PI / 2.0), &Pose2D::new(10.0, 60.0, 0.0));
        assert_eq!(r.rho, 50.0);
        assert!(r.theta.abs() < 1e-15);
    }

    #[test]
    fn kinematics_examples() {
        let cfg = ArenaConfig::default();
        let p = step_kinematics(&Pose2D::new(0.0, 0.0, 0.0), ActionCommand::new(1.0, 0.0), &cfg);
        assert_eq!(p, Pose2D::new(8.0, 0.0, 0.0));
        let p = step_kinematics(&Pose2D::new(0.0, 0.0, 0.0), ActionCommand::new(0.0, 1.0), &cfg);
        assert_eq!((p.x, p.y), (0.0, 0.0));
        assert!((p.heading - 8.0 * DEG).abs() < 1e-15);
        let q = Pose2D::new(123.0, 45.0, 1.0);
        assert_eq!(step_kinematics(&q, ActionCommand::STOP, &cfg), q);
    }

    #[test]
    fn positive_turn_reduces_a_leftward_bearing() {
        let cfg = ArenaConfig::default();
        let tracker = Pose2D::new(250.0, 250.0, 0.0);
        let target = Pose2D::new(250.0, 300.0, 0.0);
        let before = relative_state(&tracker, &target).theta;
        let after = relative_state(&step_kinematics(&tracker, ActionCommand::new(0.0, 1.0), &cfg), &target).theta;
        assert!(before < 0.0 && after > before);
    }

    #[test]
    fn walls_clamp_position() {
        let cfg = ArenaConfig::default();
        let p = step_kinematics(&Pose2D::new(2.0, 499.0, PI / 2.0), ActionCommand::new(1.0, 0.0), &cfg);
        assert_eq!(p.y, 500.0);
        let p = step_kinematics(&Pose2D::new(2.0, 3.0, PI), ActionCommand::new(1.0, 0.0), &cfg);
        assert_eq!(p.x, 0.0);
    }

    #[test]
    fn reward_examples() {
        let p = RewardParams::default();
        let r = |rho: f64, deg: f64| reward(&RelativeState { rho, theta: deg * DEG }, &p);
        assert!((r(50.0, 0.0) - 0.1).abs() < 1e-12);
        assert_eq!(r(70.0, 0.0), 0.0);
        assert!((r(60.0, 5.0) - 0.025).abs() < 1e-12);
        assert!((r(40.0, -5.0) - 0.025).abs() < 1e-12);
    }

    #[test]
    fn fov_examples() {
        let fov = 90.0 * DEG;
        let rel = |deg: f64| RelativeState { rho: 50.0, theta: deg * DEG };
        assert!(in_fov(&rel(0.0), fov));
        assert!(!in_fov(&rel(46.0), fov));
        assert!(in_fov(&rel(45.0), fov));
        assert!(in_fov(&rel(-45.0), fov));
    }

    #[test]
    fn arena_validation() {
        let mut cfg = ArenaConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.spawn_radius_max = 260.0;
        assert!(cfg.validate().is_err());
        let cfg = ArenaConfig { fov: 4.0, ..ArenaConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ArenaConfig {
            spawn_radius_min: 200.0,
            ..ArenaConfig::default()
        };
        assert!(spawn_episode(&mut ChaCha8Rng::seed_from_u64(0), &cfg).is_err());
    }

    #[test]
    fn spawn_is_deterministic_per_seed() {
        let cfg = ArenaConfig::default();
        let a = spawn_episode(&mut ChaCha8Rng::seed_from_u64(42), &cfg).unwrap();
        let b = spawn_episode(&mut ChaCha8Rng::seed_from_u64(42), &cfg).unwrap();
        let c = spawn_episode(&mut ChaCha8Rng::seed_from_u64(43), &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.step, 0);
    }

    #[test]
    fn spawn_statistics() {
        let cfg = ArenaConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut visible = 0;
        let mut inner_half = 0;
        for _ in 0..n {
            let w = spawn_episode(&mut rng, &cfg).unwrap();
            let rel = w.relative();
            assert!(rel.rho >= cfg.spawn_radius_min - 1e-9 && rel.rho <= cfg.spawn_radius_max + 1e-9);
            assert!((0.0..=cfg.width).contains(&w.tracker.x) && (0.0..=cfg.height).contains(&w.target.y));
            if in_fov(&rel, cfg.fov) {
                visible += 1;
            }
            if rel.rho.powi(2) < (cfg.spawn_radius_min.powi(2) + cfg.spawn_radius_max.powi(2)) / 2.0 {
                inner_half += 1;
            }
        }
        // 90° of 360° visible; binomial std at n=1e4 is about 0.0043.
        let frac = visible as f64 / n as f64;
        assert!((frac - 0.25).abs() < 0.02, "visible fraction {frac}");
        // Area-uniform radius: half the samples fall inside the median-area radius.
        let frac = inner_half as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "inner fraction {frac}");
    }

    #[test]
    fn spawn_in_front_places_target_ahead() {
        let cfg = ArenaConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let w = spawn_in_front(&mut rng, &cfg, 50.0).unwrap();
            let rel = w.relative();
            assert!((rel.rho - 50.0).abs() < 1e-9);
            assert!(rel.theta.abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn reward_bounded_and_peaks_at_optimum(rho in 0.0f64..400.0, theta in -PI..PI) {
            let p = RewardParams::default();
            let r = reward(&RelativeState { rho, theta }, &p);
            prop_assert!((0.0..=p.a).contains(&r));
            if r == p.a {
                prop_assert!(rho == p.rho_star && theta == p.theta_star);
            }
        }

        #[test]
        fn reward_monotone_in_deviation(d1 in 0.0f64..40.0, d2 in 0.0f64..40.0, t1 in 0.0f64..0.3, t2 in 0.0f64..0.3) {
            let p = RewardParams::default();
            let (dlo, dhi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let (tlo, thi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let r = |d: f64, t: f64| reward(&RelativeState { rho: p.rho_star + d, theta: t }, &p);
            prop_assert!(r(dhi, tlo) <= r(dlo, tlo));
            prop_assert!(r(dlo, thi) <= r(dlo, tlo));
            let mirrored = reward(&RelativeState { rho: p.rho_star - dhi, theta: -thi }, &p);
            prop_assert!(mirrored <= r(dlo, tlo));
        }

        #[test]
        fn relative_state_of_self_is_zero_range(x in 0.0f64..500.0, y in 0.0f64..500.0, h in -PI..PI) {
            let p = Pose2D::new(x, y, h);
            prop_assert_eq!(relative_state(&p, &p).rho, 0.0);
        }

        #[test]
        fn heading_always_wrapped(h in -50.0f64..50.0, w in -1.0f64..1.0) {
            let cfg = ArenaConfig::default();
            let p = step_kinematics(&Pose2D::new(250.0, 250.0, h), ActionCommand::new(0.5, w), &cfg);
            prop_assert!(p.heading > -PI && p.heading <= PI);
        }

        #[test]
        fn opposite_commands_undo_each_other(h in -PI..PI, v in -1.0f64..1.0, w in -1.0f64..1.0) {
            let cfg = ArenaConfig::default();
            let (cx, cy) = cfg.center();
            let start = Pose2D::new(cx, cy, h);
            // pure rotation pair
            let r = step_kinematics(&step_kinematics(&start, ActionCommand::new(0.0, w), &cfg), ActionCommand::new(0.0, -w), &cfg);
            prop_assert!((r.x - cx).abs() < 1e-9 && (r.y - cy).abs() < 1e-9);
            prop_assert!(wrap_angle(r.heading - h).abs() < 1e-12);
            // pure translation pair
            let t = step_kinematics(&step_kinematics(&start, ActionCommand::new(v, 0.0), &cfg), ActionCommand::new(-v, 0.0), &cfg);
            prop_assert!((t.x - cx).abs() < 1e-9 && (t.y - cy).abs() < 1e-9);
        }
    }
}
