//! Simulation and classical post-processing for the three-state, one-decoy
//! efficient BB84 protocol over a lossy free-space link.
//!
//! The crate is organised along the data path:
//!
//! * [`encoder`] maps protocol commands to polarization states (Jones vectors).
//! * [`protocol`] holds the protocol parameters and Alice's random tape.
//! * [`channel`] models the link, the receiver and its detectors, and produces
//!   time tags. It also carries the closed-form rate model.
//! * [`sync`] turns raw time tags into sifted keys and decoy tallies.
//! * [`security`] bounds the vacuum and single-photon contributions and turns
//!   them into a secret key length.
//! * [`postproc`] implements Cascade, correctness verification and Toeplitz
//!   privacy amplification.
//! * [`config`], [`io`], [`analytic`], [`experiment`] and [`sweep`] tie the
//!   stages together into end-to-end runs.

pub mod analytic;
pub mod channel;
pub mod config;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod io;
pub mod postproc;
pub mod protocol;
pub mod rng;
pub mod security;
pub mod sweep;
pub mod sync;

pub use error::{Error, Result, Stage};
