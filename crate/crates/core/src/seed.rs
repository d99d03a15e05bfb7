//! Named, independent random sub-streams derived from one master seed.
//!
//! Each concern (data generation, weight init, batch order, memory eviction,
//! replay draws) gets its own ChaCha stream so that changing how much
//! randomness one concern consumes never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Data,
    Init,
    BatchOrder,
    Eviction,
    Replay,
    Scenario,
}

impl Purpose {
    fn stream_id(self) -> u64 {
        match self {
            Purpose::Data => 1,
            Purpose::Init => 2,
            Purpose::BatchOrder => 3,
            Purpose::Eviction => 4,
            Purpose::Replay => 5,
            Purpose::Scenario => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn rng(&self, purpose: Purpose) -> Rng {
        self.rng_indexed(purpose, 0)
    }

    /// Stream for `purpose`, further split by `index` (e.g. a task number).
    pub fn rng_indexed(&self, purpose: Purpose, index: u64) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream((purpose.stream_id() << 32) | (index & 0xffff_ffff));
        rng
    }
}
