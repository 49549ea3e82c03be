//! Per-worker replay of whole episodes, sampled as fixed-length windows.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::observe::Observation;
use crate::sim::ActionCommand;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Actor,
    Htg,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Actor => "actor",
            Source::Htg => "htg",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: ActionCommand,
    pub reward: f64,
    pub next_obs: Observation,
    /// Ground truth at `obs`, used by the auxiliary loss.
    pub true_rho: f64,
    pub true_theta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub source: Source,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReplayError {
    #[error("replay holds {have} steps, need at least {need} before sampling")]
    InsufficientData { have: usize, need: usize },
    #[error("no trajectory is at least {0} steps long")]
    NoWindow(usize),
}

/// FIFO ring of trajectories.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    trajectories: VecDeque<Trajectory>,
    steps: usize,
}

/// `B` windows of `L` consecutive transitions, each from one trajectory.
#[derive(Clone, Debug)]
pub struct Batch {
    pub windows: Vec<Vec<Transition>>,
    pub sources: Vec<Source>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.windows.len()
    }

    pub fn seq_len(&self) -> usize {
        self.windows.first().map_or(0, |w| w.len())
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            trajectories: VecDeque::with_capacity(capacity.min(4096)),
            steps: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Stored transitions across all trajectories.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn count(&self, source: Source) -> usize {
        self.trajectories.iter().filter(|t| t.source == source).count()
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter()
    }

    /// Appends, evicting the oldest trajectory when full.
    pub fn push(&mut self, traj: Trajectory) {
        if self.trajectories.len() == self.capacity {
            if let Some(old) = self.trajectories.pop_front() {
                self.steps -= old.len();
            }
        }
        self.steps += traj.len();
        self.trajectories.push_back(traj);
    }

    /// Number of valid `(trajectory, start)` pairs for windows of length `l`.
    pub fn window_count(&self, l: usize) -> usize {
        self.trajectories.iter().map(|t| (t.len() + 1).saturating_sub(l)).sum()
    }

    /// Samples `b` windows of `l` steps uniformly over all valid
    /// `(trajectory, start)` pairs. Needs at least `b * l` stored steps.
    pub fn sample<R: Rng + ?Sized>(&self, b: usize, l: usize, rng: &mut R) -> Result<Batch, ReplayError> {
        let need = b * l;
        if self.steps < need {
            return Err(ReplayError::InsufficientData { have: self.steps, need });
        }
        let mut prefix = Vec::with_capacity(self.trajectories.len());
        let mut total = 0usize;
        for t in &self.trajectories {
            total += (t.len() + 1).saturating_sub(l);
            prefix.push(total);
        }
        if total == 0 {
            return Err(ReplayError::NoWindow(l));
        }
        let mut windows = Vec::with_capacity(b);
        let mut sources = Vec::with_capacity(b);
        for _ in 0..b {
            let u = rng.random_range(0..total);
            let ti = prefix.partition_point(|&p| p <= u);
            let start = u - if ti == 0 { 0 } else { prefix[ti - 1] };
            let traj = &self.trajectories[ti];
            windows.push(traj.transitions[start..start + l].to_vec());
            sources.push(traj.source);
        }
        Ok(Batch { windows, sources })
    }
}
