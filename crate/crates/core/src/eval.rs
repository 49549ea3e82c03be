//! Tracking quality metrics and the scenario runner.
//!
//! Every step is scored on the post-step world. A run's score is the mean
//! over its steps and a report's score is the mean over runs, both summed
//! in order so that [`metrics_oracle`] can reproduce them bit for bit from
//! the trajectory log.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::behaviors::BehaviorSpec;
use crate::env::{EnvConfig, EpisodeState};
use crate::htg::{htg_noisy, htg_policy, HtgParams, NoiseConfig};
use crate::nets::{actor_act, load_actor, zero_hidden, NetConfig, WeightsError};
use crate::observe::ObservationMode;
use crate::par::{map_indexed, Execution};
use crate::sim::{relative_state, spawn_in_front, ActionCommand, ArenaConfig, Pose2D, RelativeState, RewardParams, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricParams {
    pub rho_star: f64,
    pub theta_star: f64,
    pub fov: f64,
    /// Largest distance error that still counts as tracking.
    pub rho_bound: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            rho_star: 50.0,
            theta_star: 0.0,
            fov: 90f64.to_radians(),
            rho_bound: 150.0,
        }
    }
}

impl MetricParams {
    pub fn new(arena: &ArenaConfig, reward: &RewardParams, rho_bound: f64) -> Self {
        MetricParams {
            rho_star: reward.rho_star,
            theta_star: reward.theta_star,
            fov: arena.fov,
            rho_bound,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.rho_star >= 0.0 && self.rho_bound > 0.0 && self.fov > 0.0 && self.theta_star.is_finite()) {
            return Err("metric params need rho_star >= 0, rho_bound > 0, fov > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub p_rho: f64,
    pub p_theta: f64,
    pub p_c: f64,
    pub p_v: f64,
}

/// Scores are zero whenever the target is outside the field of view or its
/// distance error reaches `rho_bound`, where the distance score is zero anyway.
pub fn step_scores(rel: &RelativeState, p: &MetricParams) -> StepScore {
    let d_rho = (rel.rho - p.rho_star).abs();
    let d_theta = (rel.theta - p.theta_star).abs();
    if d_theta > p.fov / 2.0 || d_rho >= p.rho_bound {
        return StepScore::default();
    }
    let p_rho = (1.0 - d_rho / p.rho_bound).max(0.0);
    let p_theta = (1.0 - 2.0 * d_theta / p.fov).max(0.0);
    let p_c = (p_rho + p_theta) / 2.0;
    StepScore {
        p_rho,
        p_theta,
        p_c,
        p_v: if p_c > 0.0 { 1.0 } else { 0.0 },
    }
}

/// Running sum of scores, divided out at the end.
#[derive(Clone, Copy, Debug, Default)]
struct ScoreSum {
    sum: StepScore,
    n: usize,
}

impl ScoreSum {
    fn add(&mut self, s: &StepScore) {
        self.sum.p_rho += s.p_rho;
        self.sum.p_theta += s.p_theta;
        self.sum.p_c += s.p_c;
        self.sum.p_v += s.p_v;
        self.n += 1;
    }

    fn mean(&self) -> StepScore {
        let n = self.n as f64;
        StepScore {
            p_rho: self.sum.p_rho / n,
            p_theta: self.sum.p_theta / n,
            p_c: self.sum.p_c / n,
            p_v: self.sum.p_v / n,
        }
    }
}

pub enum EvalPolicy {
    Learned { net: NetConfig, actor: ParamSet<f32>, name: String },
    Htg,
    HtgNoisy(NoiseConfig),
    /// Uniform commands in [−1, 1]².
    Random,
    Stationary,
}

impl EvalPolicy {
    pub fn load(path: &Path) -> Result<Self, WeightsError> {
        let (net, actor) = load_actor(path)?;
        Ok(EvalPolicy::Learned {
            net,
            actor,
            name: "learned".into(),
        })
    }

    pub fn name(&self) -> &str {
        match self {
            EvalPolicy::Learned { name, .. } => name,
            EvalPolicy::Htg => "htg",
            EvalPolicy::HtgNoisy(_) => "htg-noisy",
            EvalPolicy::Random => "random",
            EvalPolicy::Stationary => "stationary",
        }
    }

    /// Built-in policies by name; weights files go through [`EvalPolicy::load`].
    pub fn builtin(name: &str, noise: NoiseConfig) -> Option<Self> {
        match name {
            "htg" => Some(EvalPolicy::Htg),
            "htg-noisy" => Some(EvalPolicy::HtgNoisy(noise)),
            "random" => Some(EvalPolicy::Random),
            "stationary" => Some(EvalPolicy::Stationary),
            _ => None,
        }
    }
}

impl fmt::Debug for EvalPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub target: BehaviorSpec,
}

impl FromStr for Scenario {
    type Err = crate::behaviors::BehaviorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let target: BehaviorSpec = s.parse()?;
        Ok(Scenario { name: s.to_string(), target })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub arena: ArenaConfig,
    pub reward: RewardParams,
    pub observation: ObservationMode,
    pub metric: MetricParams,
    pub runs: usize,
    pub steps: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            arena: ArenaConfig::default(),
            reward: RewardParams::default(),
            observation: ObservationMode::default(),
            metric: MetricParams::default(),
            runs: 20,
            steps: 250,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

/// One logged step: the world after the command was applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub run: usize,
    pub step: usize,
    pub tracker: Pose2D,
    pub target: Pose2D,
    pub rho: f64,
    pub theta: f64,
    pub action: ActionCommand,
    pub reward: f64,
    pub scores: StepScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub run: usize,
    pub steps: usize,
    pub mean: StepScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub policy: String,
    pub steps: usize,
    pub runs: Vec<RunScore>,
    pub mean: StepScore,
}

impl RunReport {
    pub fn run_count(&self) -> usize {
        self.runs.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Behavior(#[from] crate::behaviors::BehaviorError),
    #[error("invalid evaluation settings: {0}")]
    Settings(String),
    #[error("policy failed: {0}")]
    Policy(#[from] crate::autodiff::AutodiffError),
    #[error("trajectory log is empty")]
    EmptyLog,
    #[error("trajectory log line {line}: {message}")]
    BadLog { line: usize, message: String },
}

/// Per-run random stream, independent of how runs are scheduled.
fn run_rng(seed: u64, run: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(run as u64);
    r
}

enum PolicyState {
    Recurrent(Tensor<f32>),
    Stateless,
}

fn act<R: Rng + ?Sized>(policy: &EvalPolicy, state: &mut PolicyState, ep: &EpisodeState, htg: &HtgParams, rng: &mut R) -> Result<ActionCommand, EvalError> {
    Ok(match policy {
        EvalPolicy::Learned { net, actor, .. } => {
            let PolicyState::Recurrent(h) = state else { unreachable!("learned policy keeps a hidden state") };
            let (out, next) = actor_act(actor, net, &ep.obs, h)?;
            *h = next;
            ActionCommand::new(out[0], out[1])
        }
        EvalPolicy::Htg => htg_policy(&ep.relative(), htg),
        EvalPolicy::HtgNoisy(noise) => htg_noisy(&ep.relative(), htg, noise, rng),
        EvalPolicy::Random => ActionCommand::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)),
        EvalPolicy::Stationary => ActionCommand::STOP,
    })
}

fn run_one(policy: &EvalPolicy, env: &EnvConfig, settings: &EvalSettings, run: usize) -> Result<(RunScore, Vec<StepRecord>), EvalError> {
    let mut rng = run_rng(settings.seed, run);
    let world = spawn_in_front(&mut rng, &env.arena, env.reward.rho_star)?;
    let mut ep = EpisodeState::from_world(env, world, &mut rng);
    let htg = HtgParams::new(&env.arena, &env.reward);
    let mut state = match policy {
        EvalPolicy::Learned { net, .. } => PolicyState::Recurrent(zero_hidden(net, 1)),
        _ => PolicyState::Stateless,
    };
    let mut sum = ScoreSum::default();
    let mut log = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let cmd = act(policy, &mut state, &ep, &htg, &mut rng)?;
        let (_, info) = ep.advance(cmd, env, &mut rng);
        let rel = info.after.relative();
        let scores = step_scores(&rel, &settings.metric);
        sum.add(&scores);
        log.push(StepRecord {
            run,
            step,
            tracker: info.after.tracker,
            target: info.after.target,
            rho: rel.rho,
            theta: rel.theta,
            action: info.tracker_cmd,
            reward: info.reward,
            scores,
        });
    }
    Ok((
        RunScore {
            run,
            steps: settings.steps,
            mean: sum.mean(),
        },
        log,
    ))
}

fn aggregate(scenario: &str, policy: &str, steps: usize, runs: Vec<RunScore>) -> RunReport {
    let mut total = ScoreSum::default();
    for r in &runs {
        total.add(&r.mean);
    }
    RunReport {
        scenario: scenario.to_string(),
        policy: policy.to_string(),
        steps,
        mean: total.mean(),
        runs,
    }
}

/// Runs `settings.runs` evaluation episodes of `policy` against `scenario`.
/// The target starts at the desired distance straight ahead of the tracker.
/// Returns the report and the full step log in run order.
pub fn run_scenario(policy: &EvalPolicy, scenario: &Scenario, settings: &EvalSettings) -> Result<(RunReport, Vec<StepRecord>), EvalError> {
    if settings.runs == 0 || settings.steps == 0 {
        return Err(EvalError::Settings("runs and steps must be positive".into()));
    }
    settings.metric.validate().map_err(EvalError::Settings)?;
    scenario.target.validate(&settings.arena)?;
    let mut observation = settings.observation.clone();
    if let EvalPolicy::Learned { net, .. } = policy {
        observation.kind = net.obs_kind;
        observation.raster_width = net.raster_width;
        observation.raster_height = net.raster_height;
    }
    let env = EnvConfig {
        arena: settings.arena.clone(),
        reward: settings.reward.clone(),
        observation,
        target: scenario.target.clone(),
    };
    let results = map_indexed(settings.runs, settings.execution, |run| run_one(policy, &env, settings, run));
    let mut runs = Vec::with_capacity(settings.runs);
    let mut log = Vec::with_capacity(settings.runs * settings.steps);
    for r in results {
        let (score, steps) = r?;
        runs.push(score);
        log.extend(steps);
    }
    Ok((aggregate(&scenario.name, policy.name(), settings.steps, runs), log))
}

/// Recomputes a report from logged poses alone: relative state, step scores
/// and both averaging stages, without touching the stored scores.
pub fn metrics_oracle(log: &[StepRecord], p: &MetricParams, scenario: &str, policy: &str) -> Result<RunReport, EvalError> {
    if log.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let mut runs: Vec<(usize, Vec<[f64; 4]>)> = Vec::new();
    for rec in log {
        let rel = relative_state(&rec.tracker, &rec.target);
        let dr = (rel.rho - p.rho_star).abs();
        let dt = (rel.theta - p.theta_star).abs();
        let visible = dt <= p.fov / 2.0 && dr < p.rho_bound;
        let row = if visible {
            let a = f64::max(1.0 - dr / p.rho_bound, 0.0);
            let b = f64::max(1.0 - 2.0 * dt / p.fov, 0.0);
            let c = (a + b) / 2.0;
            [a, b, c, (c > 0.0) as u8 as f64]
        } else {
            [0.0; 4]
        };
        match runs.last_mut() {
            Some((run, rows)) if *run == rec.run => rows.push(row),
            _ => runs.push((rec.run, vec![row])),
        }
    }
    let column_means = |rows: &[[f64; 4]]| {
        let mut s = [0.0; 4];
        for r in rows {
            for k in 0..4 {
                s[k] += r[k];
            }
        }
        s.map(|v| v / rows.len() as f64)
    };
    let as_score = |v: [f64; 4]| StepScore {
        p_rho: v[0],
        p_theta: v[1],
        p_c: v[2],
        p_v: v[3],
    };
    let per_run: Vec<[f64; 4]> = runs.iter().map(|(_, rows)| column_means(rows)).collect();
    let steps = runs[0].1.len();
    Ok(RunReport {
        scenario: scenario.to_string(),
        policy: policy.to_string(),
        steps,
        mean: as_score(column_means(&per_run)),
        runs: runs
            .iter()
            .zip(&per_run)
            .map(|((run, rows), m)| RunScore {
                run: *run,
                steps: rows.len(),
                mean: as_score(*m),
            })
            .collect(),
    })
}

pub fn write_log<W: Write>(log: &[StepRecord], mut out: W) -> io::Result<()> {
    for rec in log {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_log<R: BufRead>(input: R) -> Result<Vec<StepRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let bad = |message: String| EvalError::BadLog { line: i + 1, message };
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?);
    }
    if out.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "scenario,policy,runs,steps,p_rho,p_theta,p_c,p_v";

pub fn write_csv<W: Write>(reports: &[RunReport], mut out: W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        let m = &r.mean;
        writeln!(
            out,
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4}",
            r.scenario,
            r.policy,
            r.run_count(),
            r.steps,
            m.p_rho,
            m.p_theta,
            m.p_c,
            m.p_v
        )?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EPS: f64 = 1e-10;

    fn close(s: StepScore, want: [f64; 4]) {
        let got = [s.p_rho, s.p_theta, s.p_c, s.p_v];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < EPS, "{got:?} vs {want:?}");
        }
    }

    fn rel(rho: f64, theta_deg: f64) -> RelativeState {
        RelativeState {
            rho,
            theta: theta_deg.to_radians(),
        }
    }

    #[test]
    fn hand_step_scores() {
        let p = MetricParams::default();
        close(step_scores(&rel(50.0, 0.0), &p), [1.0, 1.0, 1.0, 1.0]);
        close(step_scores(&rel(200.0, 0.0), &p), [0.0; 4]);
        close(step_scores(&rel(125.0, 22.5), &p), [0.5, 0.5, 0.5, 1.0]);
        close(step_scores(&rel(125.0, -22.5), &p), [0.5, 0.5, 0.5, 1.0]);
        // outside the field of view the distance score is zeroed too
        close(step_scores(&rel(50.0, 46.0), &p), [0.0; 4]);
        // both edges at once: visible, zero sub-scores, not counted
        close(step_scores(&RelativeState { rho: 200.0, theta: p.fov / 2.0 }, &p), [0.0; 4]);
        close(step_scores(&rel(20.0, 9.0), &p), [0.8, 0.8, 0.8, 1.0]);
    }

    proptest! {
        #[test]
        fn score_invariants(rho in 0.0..400.0f64, th in -3.2..3.2f64) {
            let s = step_scores(&RelativeState { rho, theta: th }, &MetricParams::default());
            for v in [s.p_rho, s.p_theta, s.p_c] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(s.p_v == 0.0 || s.p_v == 1.0);
            prop_assert_eq!(s.p_v == 0.0, s.p_c == 0.0);
            prop_assert!((s.p_c - (s.p_rho + s.p_theta) / 2.0).abs() < 1e-15);
        }

        #[test]
        fn scores_are_continuous_inside(rho in 0.0..190.0f64, th in -0.7..0.7f64) {
            let p = MetricParams::default();
            let a = step_scores(&RelativeState { rho, theta: th }, &p);
            let b = step_scores(&RelativeState { rho: rho + 1e-7, theta: th + 1e-7 }, &p);
            prop_assert!((a.p_rho - b.p_rho).abs() < 1e-6);
            prop_assert!((a.p_theta - b.p_theta).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_scores_aggregate_to_themselves() {
        let s = StepScore {
            p_rho: 0.3,
            p_theta: 0.7,
            p_c: 0.5,
            p_v: 1.0,
        };
        for n in 1..300 {
            let mut sum = ScoreSum::default();
            for _ in 0..n {
                sum.add(&s);
            }
            let m = sum.mean();
            for (a, b) in [(m.p_rho, s.p_rho), (m.p_theta, s.p_theta), (m.p_c, s.p_c), (m.p_v, s.p_v)] {
                assert!((a - b).abs() < 1e-13, "{n}: {a} vs {b}");
            }
        }
    }

    fn quick(runs: usize, steps: usize) -> EvalSettings {
        EvalSettings {
            runs,
            steps,
            seed: 3,
            ..EvalSettings::default()
        }
    }

    #[test]
    fn stationary_against_static_target_is_perfect() {
        let sc: Scenario = "static".parse().unwrap();
        let (r, _) = run_scenario(&EvalPolicy::Stationary, &sc, &quick(5, 100)).unwrap();
        close(r.mean, [1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn oracle_matches_streaming_and_survives_jsonl() {
        let sc: Scenario = "circular:5:5:0.01".parse().unwrap();
        let settings = quick(4, 60);
        let (report, log) = run_scenario(&EvalPolicy::HtgNoisy(NoiseConfig::default()), &sc, &settings).unwrap();
        let mut buf = Vec::new();
        write_log(&log, &mut buf).unwrap();
        let back = read_log(&buf[..]).unwrap();
        assert_eq!(back, log);
        let oracle = metrics_oracle(&back, &settings.metric, &sc.name, "htg-noisy").unwrap();
        assert_eq!(oracle, report);
    }

    #[test]
    fn oracle_hand_log() {
        let rec = |step, x: f64, y: f64| StepRecord {
            run: 0,
            step,
            tracker: Pose2D::new(0.0, 0.0, 0.0),
            target: Pose2D::new(x, y, 0.0),
            rho: 0.0,
            theta: 0.0,
            action: ActionCommand::STOP,
            reward: 0.0,
            scores: StepScore::default(),
        };
        // straight ahead at 50, straight ahead at 125, behind
        let log = [rec(0, 50.0, 0.0), rec(1, 125.0, 0.0), rec(2, -50.0, 0.0)];
        let r = metrics_oracle(&log, &MetricParams::default(), "hand", "none").unwrap();
        close(r.mean, [0.5, 2.0 / 3.0, (0.5 + 2.0 / 3.0) / 2.0, 2.0 / 3.0]);
        assert!(matches!(metrics_oracle(&[], &MetricParams::default(), "", ""), Err(EvalError::EmptyLog)));
        assert!(matches!(read_log(&b""[..]), Err(EvalError::EmptyLog)));
    }

    #[test]
    fn execution_modes_agree() {
        let sc: Scenario = "circular:3:3:0.01".parse().unwrap();
        let mut s = quick(6, 50);
        let (a, la) = run_scenario(&EvalPolicy::Random, &sc, &s).unwrap();
        s.execution = Execution::Sequential;
        let (b, lb) = run_scenario(&EvalPolicy::Random, &sc, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn csv_shape() {
        let sc: Scenario = "static".parse().unwrap();
        let (r, _) = run_scenario(&EvalPolicy::Htg, &sc, &quick(2, 10)).unwrap();
        let mut buf = Vec::new();
        write_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("static,htg,2,10,"));
        assert_eq!(lines[1].split(',').count(), 8);
    }

    #[test]
    fn missing_weights_is_an_error() {
        assert!(EvalPolicy::load(Path::new("/nonexistent/actor.bin")).is_err());
    }
}
