use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::toeplitz::{seed_len, toeplitz_with, Method};
use super::{KeyBlock, VerifiedKey};
use crate::{Error, Result};

/// Tag width used for correctness verification.
pub const TAG_BITS: usize = 64;

/// `bits`-wide Toeplitz hash of `key`, with the matrix drawn from `hash_seed`.
pub fn verification_tag(key: &KeyBlock, hash_seed: u64, bits: usize) -> Result<KeyBlock> {
    if bits == 0 {
        return Err(Error::invalid("tag width must be positive"));
    }
    let n = key.len();
    if n == 0 {
        return Ok(KeyBlock::zeros(bits));
    }
    // Pad short keys so the tag can be wider than the key.
    let padded;
    let key = if n < bits {
        let mut k = key.clone();
        k.extend(&KeyBlock::zeros(bits - n));
        padded = k;
        &padded
    } else {
        key
    };
    let mut rng = ChaCha8Rng::seed_from_u64(hash_seed);
    let seed = KeyBlock::random(seed_len(key.len(), bits), &mut rng);
    toeplitz_with(key, bits, &seed, Method::Naive)
}

pub fn tag64(key: &KeyBlock, hash_seed: u64) -> u64 {
    verification_tag(key, hash_seed, TAG_BITS).expect("positive width").words()[0]
}

/// Compares 64-bit tags of the two keys.
pub fn verify_correctness(alice: &KeyBlock, bob: &KeyBlock, hash_seed: u64) -> Result<bool> {
    if alice.len() != bob.len() {
        return Err(Error::invalid("keys to verify differ in length"));
    }
    Ok(tag64(alice, hash_seed) == tag64(bob, hash_seed))
}

/// Bob's key, sealed once its tag matches Alice's.
pub fn verify_key(alice: &KeyBlock, bob: KeyBlock, hash_seed: u64) -> Result<Option<VerifiedKey>> {
    Ok(verify_correctness(alice, &bob, hash_seed)?.then(|| VerifiedKey::new(bob)))
}
