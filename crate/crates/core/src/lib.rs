//! Visual active tracking in a planar arena: simulator, observation
//! rendering, a small reverse-mode autodiff engine, recurrent actor-critic
//! networks, a hand-tuned tracking controller and distributed DDPG training.

pub mod autodiff;
pub mod behaviors;
pub mod config;
pub mod ddpg;
pub mod env;
pub mod eval;
pub mod gradcheck;
pub mod htg;
pub mod nets;
pub mod observe;
pub mod par;
pub mod plot;
pub mod sim;
