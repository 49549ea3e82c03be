use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{actor_objective, critic_loss, soft_update, ActorObjective, BatchTensors};
use super::replay::{ReplayBuffer, ReplayError, Source, Trajectory};
use super::schedule::{mix_schedule, MixConfig};
use crate::autodiff::{AdamState, AutodiffError, ParamFileError, ParamSet, Tensor};
use crate::env::{EnvConfig, EpisodeState};
use crate::htg::{htg_noisy, HtgParams, NoiseConfig};
use crate::nets::{actor_act, config_from_metadata, init_networks, save_actor, zero_hidden, NetConfig, NetworkSet};
use crate::sim::{ActionCommand, SimError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Environment steps between updates, per worker.
    pub update_interval: usize,
    pub workers: usize,
    /// Total episodes, learned-policy and heuristic together.
    pub episodes: u64,
    pub htg_episode_len: usize,
    /// Trajectories kept per worker.
    pub replay_capacity: usize,
    pub mix: MixConfig,
    pub htg_seeding: bool,
    /// Stop heuristic episodes from this global episode index on.
    pub htg_until_episode: Option<u64>,
    pub noise: NoiseConfig,
    pub actor_objective: ActorObjective,
    /// Stored steps required before the first update (default `batch_size * seq_len`).
    pub warmup_steps: Option<usize>,
    /// Episodes between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            tau: 0.01,
            lr: 1e-4,
            batch_size: 128,
            seq_len: 5,
            update_interval: 25,
            workers: 10,
            episodes: 9000,
            htg_episode_len: 70,
            replay_capacity: 3500,
            mix: MixConfig::default(),
            htg_seeding: true,
            htg_until_episode: None,
            noise: NoiseConfig::default(),
            actor_objective: ActorObjective::Ascend,
            warmup_steps: None,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(format!("tau {} outside (0, 1]", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err("learning rate must be positive".into());
        }
        let positive = [
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("update_interval", self.update_interval),
            ("workers", self.workers),
            ("htg_episode_len", self.htg_episode_len),
            ("replay_capacity", self.replay_capacity),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{name} must be positive"));
        }
        if self.episodes == 0 {
            return Err("episodes must be positive".into());
        }
        if self.noise.sigma.is_nan() || self.noise.sigma < 0.0 {
            return Err("noise sigma must be non-negative".into());
        }
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.batch_size * self.seq_len)
    }

    /// Which policy generates global episode `index`.
    pub fn source(&self, index: u64) -> Source {
        let seeding = self.htg_seeding && self.htg_until_episode.is_none_or(|until| index < until);
        if seeding {
            mix_schedule(index, &self.mix)
        } else {
            Source::Actor
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub env: EnvConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<(), String> {
        self.env.arena.validate().map_err(|e| e.to_string())?;
        self.env.reward.validate().map_err(|e| e.to_string())?;
        self.env.observation.validate()?;
        self.env.target.validate(&self.env.arena).map_err(|e| e.to_string())?;
        self.net.validate()?;
        if self.net.obs_kind != self.env.observation.kind {
            return Err("network and observation modes differ".into());
        }
        self.train.validate()
    }

    fn htg(&self) -> HtgParams {
        HtgParams::new(&self.env.arena, &self.env.reward)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("network error: {0}")]
    Net(AutodiffError),
    #[error(transparent)]
    Params(#[from] ParamFileError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::NonFinite { op } => TrainError::Divergence(format!("non-finite value in {op}")),
            other => TrainError::Net(other),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub worker: usize,
    pub source: Source,
    pub steps: usize,
    pub total_reward: f64,
    pub mean_reward: f64,
    /// Shared updates applied so far, all workers.
    pub updates: u64,
    /// Mean losses over this worker's updates during the episode.
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub aux_loss: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub aux_loss: f64,
    pub htg_windows: usize,
    pub update_index: u64,
}

struct Shared {
    actor: ParamSet<f32>,
    critic: ParamSet<f32>,
    actor_target: ParamSet<f32>,
    critic_target: ParamSet<f32>,
    adam_actor: AdamState<f32>,
    adam_critic: AdamState<f32>,
    updates: u64,
}

/// Shared parameters. Every update is applied and published under one lock,
/// so readers always copy a complete, consistent set.
pub struct SharedStore {
    inner: Mutex<Shared>,
}

impl SharedStore {
    pub fn new(nets: &NetworkSet<f32>) -> Self {
        SharedStore {
            inner: Mutex::new(Shared {
                adam_actor: AdamState::new(&nets.actor),
                adam_critic: AdamState::new(&nets.critic),
                actor: nets.actor.clone(),
                critic: nets.critic.clone(),
                actor_target: nets.actor_target.clone(),
                critic_target: nets.critic_target.clone(),
                updates: 0,
            }),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Shared> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Current online actor and critic.
    pub fn online(&self) -> (ParamSet<f32>, ParamSet<f32>) {
        let s = self.lock();
        (s.actor.clone(), s.critic.clone())
    }

    /// Current target actor and critic.
    pub fn targets(&self) -> (ParamSet<f32>, ParamSet<f32>) {
        let s = self.lock();
        (s.actor_target.clone(), s.critic_target.clone())
    }

    pub fn updates(&self) -> u64 {
        self.lock().updates
    }

    /// Adam on both networks, soft target update, then returns the new
    /// online sets and the update count.
    pub fn apply(&self, critic_grads: &ParamSet<f32>, actor_grads: &ParamSet<f32>, lr: f64, tau: f64) -> Result<(ParamSet<f32>, ParamSet<f32>, u64), TrainError> {
        let mut guard = self.lock();
        let s = &mut *guard;
        s.adam_critic.step(&mut s.critic, critic_grads, lr)?;
        s.adam_actor.step(&mut s.actor, actor_grads, lr)?;
        if !s.critic.is_finite() || !s.actor.is_finite() {
            return Err(TrainError::Divergence("non-finite parameters after update".into()));
        }
        soft_update(&mut s.critic_target, &s.critic, tau)?;
        soft_update(&mut s.actor_target, &s.actor, tau)?;
        s.updates += 1;
        Ok((s.actor.clone(), s.critic.clone(), s.updates))
    }

    pub fn checkpoint(&self, net: &NetConfig, episodes_done: u64) -> Checkpoint {
        let s = self.lock();
        Checkpoint {
            net: net.clone(),
            episodes_done,
            updates: s.updates,
            actor: s.actor.clone(),
            critic: s.critic.clone(),
            actor_target: s.actor_target.clone(),
            critic_target: s.critic_target.clone(),
            adam_actor: s.adam_actor.clone(),
            adam_critic: s.adam_critic.clone(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Self {
        SharedStore {
            inner: Mutex::new(Shared {
                actor: c.actor.clone(),
                critic: c.critic.clone(),
                actor_target: c.actor_target.clone(),
                critic_target: c.critic_target.clone(),
                adam_actor: c.adam_actor.clone(),
                adam_critic: c.adam_critic.clone(),
                updates: c.updates,
            }),
        }
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub episodes_done: u64,
    pub updates: u64,
    pub actor: ParamSet<f32>,
    pub critic: ParamSet<f32>,
    pub actor_target: ParamSet<f32>,
    pub critic_target: ParamSet<f32>,
    pub adam_actor: AdamState<f32>,
    pub adam_critic: AdamState<f32>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), ParamFileError> {
        let mut all = ParamSet::new();
        all.extend_prefixed("actor.", &self.actor);
        all.extend_prefixed("critic.", &self.critic);
        all.extend_prefixed("actor_target.", &self.actor_target);
        all.extend_prefixed("critic_target.", &self.critic_target);
        all.extend_prefixed("adam_actor.", &self.adam_actor.to_param_set());
        all.extend_prefixed("adam_critic.", &self.adam_critic.to_param_set());
        let meta = serde_json::json!({
            "role": "checkpoint",
            "net": self.net,
            "episodes_done": self.episodes_done,
            "updates": self.updates,
            "adam_actor_t": self.adam_actor.t,
            "adam_critic_t": self.adam_critic.t,
        });
        all.save(path, meta)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let (all, meta) = ParamSet::<f32>::load(path)?;
    let bad = |m: &str| TrainError::Config(format!("{}: {m}", path.display()));
    if meta.get("role").and_then(|r| r.as_str()) != Some("checkpoint") {
        return Err(bad("not a training checkpoint"));
    }
    let net = config_from_metadata(&meta).map_err(|e| bad(&e.to_string()))?;
    let num = |k: &str| meta.get(k).and_then(|v| v.as_u64()).ok_or_else(|| bad(&format!("missing {k}")));
    let actor = all.with_prefix("actor.");
    let critic = all.with_prefix("critic.");
    net.check_params(&actor, false).map_err(|e| bad(&e))?;
    net.check_params(&critic, true).map_err(|e| bad(&e))?;
    let adam_actor = AdamState::from_param_set(&all.with_prefix("adam_actor."), num("adam_actor_t")?, &actor)?;
    let adam_critic = AdamState::from_param_set(&all.with_prefix("adam_critic."), num("adam_critic_t")?, &critic)?;
    Ok(Checkpoint {
        episodes_done: num("episodes_done")?,
        updates: num("updates")?,
        actor_target: all.with_prefix("actor_target."),
        critic_target: all.with_prefix("critic_target."),
        actor,
        critic,
        adam_actor,
        adam_critic,
        net,
    })
}

#[allow(clippy::too_many_arguments)]
fn select_action<R: Rng + ?Sized>(
    source: Source,
    ep: &EpisodeState,
    hidden: &mut Tensor<f32>,
    actor: &ParamSet<f32>,
    net: &NetConfig,
    htg: &HtgParams,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Result<ActionCommand, TrainError> {
    match source {
        Source::Actor => {
            let (out, h) = actor_act(actor, net, &ep.obs, hidden)?;
            *hidden = h;
            Ok(noise.perturb(ActionCommand::new(out[0], out[1]), rng))
        }
        Source::Htg => Ok(htg_noisy(&ep.relative(), htg, noise, rng)),
    }
}

/// Full-length rollout of the noisy learned policy; the recurrent state
/// starts at zero and is carried across the episode.
pub fn collect_actor_episode<R: Rng + ?Sized>(
    env: &EnvConfig,
    net: &NetConfig,
    actor: &ParamSet<f32>,
    noise: &NoiseConfig,
    env_rng: &mut R,
    noise_rng: &mut R,
) -> Result<Trajectory, TrainError> {
    let htg = HtgParams::new(&env.arena, &env.reward);
    collect(env, net, actor, &htg, Source::Actor, env.arena.episode_len, noise, env_rng, noise_rng)
}

/// Short rollout of the noisy heuristic controller.
pub fn collect_htg_episode<R: Rng + ?Sized>(env: &EnvConfig, len: usize, noise: &NoiseConfig, env_rng: &mut R, noise_rng: &mut R) -> Result<Trajectory, TrainError> {
    let htg = HtgParams::new(&env.arena, &env.reward);
    let net = NetConfig::default();
    collect(env, &net, &ParamSet::new(), &htg, Source::Htg, len, noise, env_rng, noise_rng)
}

#[allow(clippy::too_many_arguments)]
fn collect<R: Rng + ?Sized>(
    env: &EnvConfig,
    net: &NetConfig,
    actor: &ParamSet<f32>,
    htg: &HtgParams,
    source: Source,
    len: usize,
    noise: &NoiseConfig,
    env_rng: &mut R,
    noise_rng: &mut R,
) -> Result<Trajectory, TrainError> {
    let mut ep = EpisodeState::reset(env, env_rng)?;
    let mut hidden = zero_hidden(net, 1);
    let mut transitions = Vec::with_capacity(len);
    for _ in 0..len {
        let cmd = select_action(source, &ep, &mut hidden, actor, net, htg, noise, noise_rng)?;
        transitions.push(ep.advance(cmd, env, env_rng).0);
    }
    Ok(Trajectory { source, transitions })
}

/// A training worker: local networks, replay and random streams.
pub struct Worker {
    pub id: usize,
    pub actor: ParamSet<f32>,
    pub critic: ParamSet<f32>,
    pub buffer: ReplayBuffer,
    env_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    steps: u64,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Worker {
    /// `epoch` separates the streams of resumed runs from the original.
    pub fn new(id: usize, store: &SharedStore, cfg: &TrainConfig, epoch: u64) -> Self {
        let (actor, critic) = store.online();
        let seed = cfg.seed.wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let base = 1 + 3 * id as u64;
        Worker {
            id,
            actor,
            critic,
            buffer: ReplayBuffer::new(cfg.replay_capacity),
            env_rng: stream(seed, base),
            noise_rng: stream(seed, base + 1),
            sample_rng: stream(seed, base + 2),
            steps: 0,
        }
    }

    /// Environment steps collected by this worker.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Runs one episode, updating through `store` every `update_interval`
    /// steps once the buffer is warm. The finished trajectory is stored.
    pub fn run_episode(&mut self, index: u64, setup: &TrainSetup, store: &SharedStore) -> Result<(EpisodeRecord, Vec<UpdateStats>), TrainError> {
        let cfg = &setup.train;
        let source = cfg.source(index);
        let len = match source {
            Source::Actor => setup.env.arena.episode_len,
            Source::Htg => cfg.htg_episode_len,
        };
        let htg = setup.htg();
        let mut ep = EpisodeState::reset(&setup.env, &mut self.env_rng)?;
        let mut hidden = zero_hidden(&setup.net, 1);
        let mut transitions = Vec::with_capacity(len);
        let mut stats = Vec::new();
        for _ in 0..len {
            let cmd = select_action(source, &ep, &mut hidden, &self.actor, &setup.net, &htg, &cfg.noise, &mut self.noise_rng)?;
            transitions.push(ep.advance(cmd, &setup.env, &mut self.env_rng).0);
            self.steps += 1;
            if self.steps.is_multiple_of(cfg.update_interval as u64) && self.buffer.steps() >= cfg.warmup() {
                if let Some(s) = composite_update(self, setup, store)? {
                    stats.push(s);
                }
            }
        }
        let traj = Trajectory { source, transitions };
        let total = traj.total_reward();
        let mean = |f: fn(&UpdateStats) -> f64| (!stats.is_empty()).then(|| stats.iter().map(f).sum::<f64>() / stats.len() as f64);
        let record = EpisodeRecord {
            episode: index,
            worker: self.id,
            source,
            steps: len,
            total_reward: total,
            mean_reward: total / len as f64,
            updates: stats.last().map_or_else(|| store.updates(), |s| s.update_index),
            critic_loss: mean(|s| s.critic_loss),
            actor_loss: mean(|s| s.actor_loss),
            aux_loss: mean(|s| s.aux_loss),
        };
        self.buffer.push(traj);
        Ok((record, stats))
    }
}

/// One composite update: critic loss, actor policy + auxiliary loss, shared
/// Adam step, target blend and resync of the worker's local copies. Returns
/// `None` when the buffer cannot yet supply a batch.
pub fn composite_update(worker: &mut Worker, setup: &TrainSetup, store: &SharedStore) -> Result<Option<UpdateStats>, TrainError> {
    let cfg = &setup.train;
    let batch = match worker.buffer.sample(cfg.batch_size, cfg.seq_len, &mut worker.sample_rng) {
        Ok(b) => b,
        Err(ReplayError::InsufficientData { .. } | ReplayError::NoWindow(_)) => return Ok(None),
    };
    let htg_windows = batch.sources.iter().filter(|&&s| s == Source::Htg).count();
    let bt = BatchTensors::<f32>::from_batch(&batch);
    let (actor_target, critic_target) = store.targets();
    let critic = critic_loss(&bt, &setup.net, &worker.critic, &critic_target, &actor_target, cfg.gamma)?;
    let actor = actor_objective(&bt, &setup.net, &worker.actor, &worker.critic, cfg.actor_objective)?;
    for (name, v) in [("critic", critic.loss), ("actor", actor.policy_loss), ("auxiliary", actor.aux_loss)] {
        if !v.is_finite() {
            return Err(TrainError::Divergence(format!("{name} loss is {v}")));
        }
    }
    let (a, c, n) = store.apply(&critic.grads, &actor.grads, cfg.lr, cfg.tau)?;
    worker.actor = a;
    worker.critic = c;
    Ok(Some(UpdateStats {
        critic_loss: critic.loss,
        actor_loss: actor.policy_loss,
        aux_loss: actor.aux_loss,
        htg_windows,
        update_index: n,
    }))
}

pub type ProgressFn = dyn Fn(&EpisodeRecord) + Send + Sync;

#[derive(Default, Clone)]
pub struct TrainOptions {
    /// Where the log, checkpoints and final weights go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Set to request a checkpoint-then-exit at the next episode boundary.
    pub stop: Option<Arc<AtomicBool>>,
    pub resume: Option<PathBuf>,
    pub progress: Option<Arc<ProgressFn>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpisodeRecord>,
    pub episodes_done: u64,
    pub updates: u64,
    pub interrupted: bool,
    pub actor: ParamSet<f32>,
    pub critic: ParamSet<f32>,
    /// Number of HTG windows in the first optimization batch of each worker.
    pub first_batch_htg_windows: Vec<Option<usize>>,
}

pub const LOG_FILE: &str = "train.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const ACTOR_FILE: &str = "actor.bin";
pub const CHECKPOINT_DIR: &str = "checkpoints";

struct Run<'a> {
    setup: &'a TrainSetup,
    store: SharedStore,
    next: AtomicU64,
    done: AtomicU64,
    stop: Arc<AtomicBool>,
    failed: AtomicBool,
    log: Option<Mutex<BufWriter<File>>>,
    records: Mutex<Vec<EpisodeRecord>>,
    out_dir: Option<PathBuf>,
    progress: Option<Arc<ProgressFn>>,
    ckpt_lock: Mutex<()>,
}

impl Run<'_> {
    fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let _g = self.ckpt_lock.lock().unwrap_or_else(|p| p.into_inner());
        let ck = self.store.checkpoint(&self.setup.net, self.done.load(Ordering::SeqCst));
        ck.save(path)?;
        Ok(())
    }

    fn worker_loop(&self, worker: &mut Worker, first_batch: &mut Option<usize>) -> Result<(), TrainError> {
        let cfg = &self.setup.train;
        loop {
            if self.stop.load(Ordering::SeqCst) || self.failed.load(Ordering::SeqCst) {
                return Ok(());
            }
            let index = self.next.fetch_add(1, Ordering::SeqCst);
            if index >= cfg.episodes {
                return Ok(());
            }
            let (record, stats) = worker.run_episode(index, self.setup, &self.store)?;
            if first_batch.is_none() {
                *first_batch = stats.first().map(|s| s.htg_windows);
            }
            if let Some(log) = &self.log {
                let mut w = log.lock().unwrap_or_else(|p| p.into_inner());
                let line = serde_json::to_string(&record).expect("record serializes");
                let path = self.out_dir.as_deref().unwrap_or(Path::new(LOG_FILE));
                writeln!(w, "{line}").map_err(io_err(path))?;
                w.flush().map_err(io_err(path))?;
            }
            if let Some(p) = &self.progress {
                p(&record);
            }
            self.records.lock().unwrap_or_else(|p| p.into_inner()).push(record);
            let done = self.done.fetch_add(1, Ordering::SeqCst) + 1;
            if let Some(dir) = &self.out_dir {
                if cfg.checkpoint_every > 0 && done.is_multiple_of(cfg.checkpoint_every) {
                    self.save_checkpoint(&dir.join(CHECKPOINT_DIR).join(format!("episode-{done:06}.bin")))?;
                }
            }
        }
    }
}

/// Runs training to `episodes` total episodes (or until `stop` is raised).
///
/// With one worker everything runs on the calling thread and the whole run
/// is bit-reproducible from the seed.
pub fn train(setup: &TrainSetup, opts: &TrainOptions) -> Result<TrainOutcome, TrainError> {
    setup.validate().map_err(TrainError::Config)?;
    let cfg = &setup.train;
    let (store, start) = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.net != setup.net {
                return Err(TrainError::Config("checkpoint network config differs from the run config".into()));
            }
            (SharedStore::from_checkpoint(&ck), ck.episodes_done)
        }
        None => {
            let mut rng = stream(cfg.seed, 0);
            (SharedStore::new(&init_networks(&mut rng, &setup.net)), 0)
        }
    };
    let log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(io_err(dir))?;
            let path = dir.join(LOG_FILE);
            let file = if opts.resume.is_some() {
                OpenOptions::new().create(true).append(true).open(&path)
            } else {
                File::create(&path)
            }
            .map_err(io_err(&path))?;
            Some(Mutex::new(BufWriter::new(file)))
        }
        None => None,
    };
    let run = Run {
        setup,
        store,
        next: AtomicU64::new(start),
        done: AtomicU64::new(start),
        stop: opts.stop.clone().unwrap_or_default(),
        failed: AtomicBool::new(false),
        log,
        records: Mutex::new(Vec::new()),
        out_dir: opts.out_dir.clone(),
        progress: opts.progress.clone(),
        ckpt_lock: Mutex::new(()),
    };
    let mut workers: Vec<Worker> = (0..cfg.workers).map(|id| Worker::new(id, &run.store, cfg, start)).collect();
    let mut first = vec![None; cfg.workers];
    let result: Result<(), TrainError> = if cfg.workers == 1 {
        run.worker_loop(&mut workers[0], &mut first[0])
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = workers
                .iter_mut()
                .zip(first.iter_mut())
                .map(|(w, f)| {
                    let run = &run;
                    scope.spawn(move || {
                        let r = run.worker_loop(w, f);
                        if r.is_err() {
                            run.failed.store(true, Ordering::SeqCst);
                        }
                        r
                    })
                })
                .collect();
            let mut out = Ok(());
            for h in handles {
                let r = h.join().unwrap_or_else(|_| Err(TrainError::Config("worker thread panicked".into())));
                if out.is_ok() {
                    out = r;
                }
            }
            out
        })
    };
    result?;
    let episodes_done = run.done.load(Ordering::SeqCst);
    let interrupted = episodes_done < cfg.episodes;
    if let Some(dir) = &run.out_dir {
        run.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        let (actor, _) = run.store.online();
        let info = serde_json::json!({ "episodes_done": episodes_done, "seed": cfg.seed });
        save_actor(&dir.join(ACTOR_FILE), &actor, &setup.net, info)?;
    }
    let (actor, critic) = run.store.online();
    let mut records = run.records.into_inner().unwrap_or_else(|p| p.into_inner());
    if cfg.workers > 1 {
        records.sort_by_key(|r| r.episode);
    }
    Ok(TrainOutcome {
        records,
        episodes_done,
        updates: run.store.updates(),
        interrupted,
        actor,
        critic,
        first_batch_htg_windows: first,
    })
}
