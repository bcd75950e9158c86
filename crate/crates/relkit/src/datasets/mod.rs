//! Seeded dataset generators with exact answer oracles. A dataset is a
//! pure function of (seed, split, count): scene `i` draws from its own
//! counter-derived RNG substream, so generation order and worker count
//! never change the corpus.

pub mod augment;
pub mod io;
pub mod physics;
pub mod soc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Corpus split tag, stored in dataset files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split code {code}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!(
                "unknown split {s:?} (expected train or test)"
            ))),
        }
    }
}

/// The RNG substream for one scene: seed picks the keystream family,
/// (split, index) pick a disjoint stream within it.
pub fn scene_rng(seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split.code() as u64) << 56) | index);
    rng
}

/// Either corpus kind under one file format. Physics corpora carry the
/// task they were generated for, since the training verb reads it from
/// the file rather than a flag.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Soc(soc::SocDataset),
    Physics {
        data: physics::PhysicsDataset,
        task: physics::PhysicsTask,
    },
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Soc(d) => d.records.len(),
            Dataset::Physics { data, .. } => data.records.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seed(&self) -> u64 {
        match self {
            Dataset::Soc(d) => d.seed,
            Dataset::Physics { data, .. } => data.seed,
        }
    }

    pub fn split(&self) -> Split {
        match self {
            Dataset::Soc(d) => d.split,
            Dataset::Physics { data, .. } => data.split,
        }
    }
}
