//! Keyed random substreams.
//!
//! Every random draw in a run comes from a ChaCha8 stream whose 256-bit key is
//! derived from `(master seed, replication, setting, region, purpose)`. ChaCha
//! is a counter-mode generator, so a stream is fully addressed by its key and
//! the draw index; adding a new purpose never shifts the draws of another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a substream is used for. The discriminant is part of the key, so
/// values must never be renumbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    EventTimes = 1,
    EventDamage = 2,
    Allocation = 3,
    CustomerMatching = 10,
    ReinsuranceMatching = 11,
    Attachment = 12,
    Entry = 13,
    Synthetic = 99,
}

/// Marker for keys that do not depend on the diversity setting (peril streams).
pub const ANY_SETTING: u64 = u64::MAX;
/// Marker for keys that do not depend on a region.
pub const NO_REGION: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master_seed: u64,
    pub replication: u64,
    pub setting: u64,
    pub region: u64,
    pub purpose: Purpose,
    /// Extra discriminator, e.g. the event ordinal for allocation streams.
    pub index: u64,
}

impl StreamKey {
    pub fn peril(master_seed: u64, replication: u64, region: usize, purpose: Purpose) -> Self {
        StreamKey {
            master_seed,
            replication,
            setting: ANY_SETTING,
            region: region as u64,
            purpose,
            index: 0,
        }
    }

    pub fn behavior(master_seed: u64, replication: u64, setting: usize, purpose: Purpose) -> Self {
        StreamKey {
            master_seed,
            replication,
            setting: setting as u64,
            region: NO_REGION,
            purpose,
            index: 0,
        }
    }

    pub fn with_index(mut self, index: u64) -> Self {
        self.index = index;
        self
    }

    /// 256-bit ChaCha key built by chaining SplitMix64 over the key fields.
    pub fn seed(&self) -> [u8; 32] {
        let mut state = splitmix64(self.master_seed ^ 0x6a09_e667_f3bc_c908);
        for field in [
            self.replication,
            self.setting,
            self.region,
            self.purpose as u64,
            self.index,
        ] {
            state = splitmix64(state ^ field);
        }
        let mut out = [0u8; 32];
        for chunk in out.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        out
    }

    pub fn stream(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.seed())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw on the open interval (0, 1); safe for `ln` and negative powers.
pub fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}
