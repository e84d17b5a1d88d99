//! Classical post-processing: entropy, Cascade, verification and privacy
//! amplification.

mod bits;
pub mod cascade;
mod entropy;
pub mod toeplitz;
mod verify;

pub use bits::{KeyBlock, VerifiedKey};
pub use cascade::{cascade_correct, CascadeConfig, ReconciliationReport};
pub use entropy::binary_entropy;
pub use toeplitz::toeplitz_pa;
pub use toeplitz::seed_len;
pub use verify::{tag64, verification_tag, verify_correctness, verify_key, TAG_BITS};
