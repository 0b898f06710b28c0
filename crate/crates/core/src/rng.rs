//! Named, seed-derived random streams.
//!
//! Every stochastic component of a run draws from its own stream, derived
//! from the run seed and a stream name (plus an optional index such as the
//! episode number). Turning a feature on or off therefore never shifts the
//! draws seen by any other feature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

pub const WEATHER: &str = "weather";
pub const WEATHER_PERTURB: &str = "weather_perturbation";
pub const OBS_NOISE: &str = "observation_noise";
pub const POLICY_SAMPLING: &str = "policy_sampling";
pub const ACTION_MASK: &str = "action_mask";
pub const VALIDATION: &str = "validation";
pub const POLICY_INIT: &str = "policy_init";
pub const RND_INIT: &str = "rnd_init";
pub const MINIBATCH_SHUFFLE: &str = "minibatch_shuffle";
pub const EVALUATION: &str = "evaluation";
pub const EVAL_PERTURB: &str = "evaluation_perturbation";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed of stream `name` (sub-indexed by `index`) from `root`.
pub fn derive_seed(root: u64, name: &str, index: u64) -> u64 {
    let a = splitmix64(root ^ fnv1a(name.as_bytes()));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// One record of the audit log: which stream was opened with which seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub name: String,
    pub index: u64,
    pub seed: u64,
}

/// Factory for the named streams of one run.
#[derive(Debug, Clone)]
pub struct RngStreams {
    root: u64,
    audit: Option<Vec<StreamRecord>>,
}

impl RngStreams {
    pub fn new(root: u64) -> Self {
        Self { root, audit: None }
    }

    /// Like [`RngStreams::new`], but remembers every stream handed out.
    pub fn audited(root: u64) -> Self {
        Self {
            root,
            audit: Some(Vec::new()),
        }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn seed_for(&self, name: &str, index: u64) -> u64 {
        derive_seed(self.root, name, index)
    }

    pub fn stream(&mut self, name: &str) -> StreamRng {
        self.indexed(name, 0)
    }

    pub fn indexed(&mut self, name: &str, index: u64) -> StreamRng {
        let seed = self.seed_for(name, index);
        if let Some(log) = self.audit.as_mut() {
            log.push(StreamRecord {
                name: name.to_string(),
                index,
                seed,
            });
        }
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn audit_log(&self) -> &[StreamRecord] {
        self.audit.as_deref().unwrap_or(&[])
    }
}

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}
