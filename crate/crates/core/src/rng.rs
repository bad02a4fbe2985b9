//! Counter-based RNG stream splitting.
//!
//! One root seed generates the whole experiment. Every consumer of
//! randomness (an episode's world, an agent's action noise at step t, a
//! tie-break between two quotes) derives its own stream from a *path* of
//! integer tags hashed off the root. Streams are therefore:
//!
//! - reproducible: the same path always yields the same stream;
//! - independent of evaluation order: deriving a stream never advances
//!   any other stream;
//! - relabelable: permutation tests can remap agent slots to streams and
//!   hold "the world" (reference prices, customer draws) fixed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 finalizer; good diffusion for tag chains.
#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A point in the seed tree: the hash of the tag path from the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamId(u64);

impl StreamId {
    /// Root of the tree for a given experiment seed.
    pub fn root(seed: u64) -> Self {
        StreamId(splitmix64(seed ^ 0x5EED_0000_0000_0001))
    }

    /// Child stream under an integer tag.
    #[inline]
    pub fn child(self, tag: u64) -> Self {
        StreamId(splitmix64(self.0 ^ splitmix64(tag ^ 0xA5A5_A5A5_A5A5_A5A5)))
    }

    /// Child stream under a tag path.
    pub fn descend(self, tags: &[u64]) -> Self {
        tags.iter().fold(self, |id, &t| id.child(t))
    }

    /// Instantiate the stream as a seeded ChaCha12 generator.
    pub fn rng(self) -> ChaCha12Rng {
        let mut seed = [0u8; 32];
        let mut h = self.0;
        for chunk in seed.chunks_exact_mut(8) {
            h = splitmix64(h);
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        ChaCha12Rng::from_seed(seed)
    }

    /// A single u64 drawn from this stream without constructing the
    /// generator; used for order-invariant tie-break priorities.
    #[inline]
    pub fn priority(self) -> u64 {
        splitmix64(self.0 ^ 0xC0DE_C0DE_C0DE_C0DE)
    }
}

/// First-level tags under an experiment root.
pub mod tag {
    pub const EPISODE: u64 = 1;
    pub const WORLD: u64 = 2;
    pub const AGENT: u64 = 3;
    pub const TYPE: u64 = 4;
    pub const ACTION: u64 = 5;
    pub const PRIORITY: u64 = 6;
    pub const CUSTOMER: u64 = 7;
    pub const REFERENCE: u64 = 8;
    pub const INIT: u64 = 9;
    pub const UPDATE: u64 = 10;
    pub const CALIBRATOR: u64 = 11;
    pub const PROPOSAL: u64 = 12;
    pub const RESET: u64 = 13;
}

/// Seed context handed to an environment for one episode.
///
/// World streams are shared by every rollout of the episode; agent streams
/// go through a slot-to-stream map so a permutation test can relabel which
/// agent consumes which stream while leaving the world untouched.
#[derive(Debug, Clone)]
pub struct EpisodeCtx {
    world_root: StreamId,
    agent_root: StreamId,
    agent_map: Vec<usize>,
}

impl EpisodeCtx {
    /// Context for episode `episode_index` of the run rooted at `root`.
    pub fn new(root: StreamId, episode_index: u64, n_agents: usize) -> Self {
        let ep = root.child(tag::EPISODE).child(episode_index);
        EpisodeCtx {
            world_root: ep.child(tag::WORLD),
            agent_root: ep.child(tag::AGENT),
            agent_map: (0..n_agents).collect(),
        }
    }

    /// Same episode with agent slots relabeled: slot `i` consumes the
    /// streams of slot `map[i]`.
    pub fn with_agent_map(&self, map: Vec<usize>) -> Self {
        assert_eq!(map.len(), self.agent_map.len(), "agent map length");
        EpisodeCtx {
            world_root: self.world_root,
            agent_root: self.agent_root,
            agent_map: map,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.agent_map.len()
    }

    /// Stream shared by all agents (reference prices, customer draws, ...).
    pub fn world(&self, tags: &[u64]) -> StreamId {
        self.world_root.descend(tags)
    }

    /// Stream private to the agent occupying `slot`.
    pub fn agent(&self, slot: usize, tags: &[u64]) -> StreamId {
        self.agent_root.child(self.agent_map[slot] as u64).descend(tags)
    }
}
