//! Seeded entropy source standing in for the transmitter's hardware QRNG.
//!
//! Every consumer draws from a stream addressed by `(domain, index)`, so the
//! output of any stage depends only on the master seed and on what is being
//! sampled, never on how the work is partitioned.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_pcg::Pcg64Mcg;

/// Independent randomness domains. The tag values are part of the
/// reproducibility contract and must not change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    AliceTape = 0x414c_4943_4554_4150,
    Channel = 0x4348_414e_4e45_4c00,
    Coupling = 0x434f_5550_4c49_4e47,
    Balance = 0x4241_4c41_4e43_4500,
    DoubleClick = 0x4443_4c49_434b_0000,
    Reconcile = 0x5245_434f_4e43_494c,
    Verify = 0x5645_5249_4659_0000,
    Amplify = 0x414d_504c_4946_5900,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomSource {
    seed: u64,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A source for a sub-domain, independent of the parent and its siblings.
    pub fn derive(&self, domain: Domain) -> RandomSource {
        RandomSource::new(mix(self.seed ^ domain as u64, 0x9e37_79b9_7f4a_7c15))
    }

    /// Sequential stream number `index` within `domain`.
    pub fn stream(&self, domain: Domain, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, domain as u64));
        rng.set_stream(index);
        rng
    }

    /// Cheap per-slot generator. Slot-keyed draws make lookups of any slot
    /// order-independent.
    pub fn slot_rng(&self, slot: u64) -> Pcg64Mcg {
        Pcg64Mcg::seed_from_u64(mix(self.seed, slot))
    }
}

/// Bijective in `b` for fixed `a` (odd multiply, xor, odd multiply).
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a.rotate_left(17) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 31)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 29)
}
