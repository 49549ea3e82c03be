//! Interleaving of learned-policy and heuristic episodes.

use serde::{Deserialize, Serialize};

use super::Source;

/// Repeating block of `actor` learned-policy episodes followed by `htg`
/// heuristic episodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    pub actor: u64,
    pub htg: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig { actor: 1, htg: 4 }
    }
}

impl MixConfig {
    pub const ACTOR_ONLY: MixConfig = MixConfig { actor: 1, htg: 0 };
}

/// Source of global episode `index`.
pub fn mix_schedule(index: u64, mix: &MixConfig) -> Source {
    let period = mix.actor + mix.htg;
    if mix.htg == 0 || period == 0 || index % period < mix.actor {
        Source::Actor
    } else {
        Source::Htg
    }
}
