//! Asynchronous DDPG with heuristic replay seeding.
//!
//! Several workers each own an environment, local copies of the actor and
//! critic, a replay buffer and their random streams. Every `update_interval`
//! environment steps a worker samples windows from its buffer, computes
//! critic and actor gradients against its local copies, and hands them to
//! the [`SharedStore`], which applies them with Adam, blends the target
//! networks and publishes the result for the worker to copy back.

mod losses;
mod replay;
mod schedule;
mod trainer;

pub use losses::{
    actor_loss, actor_objective, actor_terms_graph, aux_graph, aux_loss, critic_loss, critic_loss_graph, critic_targets, normalized_truth, soft_update,
    ActorLossGrad, ActorObjective, ActorTerms, BatchTensors, LossGrad,
};
pub use replay::{Batch, ReplayBuffer, ReplayError, Source, Trajectory, Transition};
pub use schedule::{mix_schedule, MixConfig};
pub use trainer::{
    collect_actor_episode, collect_htg_episode, composite_update, load_checkpoint, train, Checkpoint, EpisodeRecord, SharedStore, TrainConfig, TrainError,
    TrainOptions, TrainOutcome, TrainSetup, UpdateStats, Worker, ACTOR_FILE, CHECKPOINT_DIR, CHECKPOINT_FILE, LOG_FILE,
};
