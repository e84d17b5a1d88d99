//! Protocol parameterization and Alice's state-preparation tape.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::rng::{Domain, RandomSource};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intensity {
    Mu1,
    Mu2,
}

/// Operating point of the three-state one-decoy protocol.
///
/// Intensities are per basis; the decoy probability `p_mu1` is shared by both
/// bases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolParams {
    pub p_z_alice: f64,
    pub p_mu1: f64,
    pub mu1_z: f64,
    pub mu2_z: f64,
    pub mu1_x: f64,
    pub mu2_x: f64,
    pub p_z_bob: f64,
    pub clock_rate_hz: f64,
}

impl Default for ProtocolParams {
    /// The field-trial operating point (50 MHz source).
    fn default() -> Self {
        Self {
            p_z_alice: 0.9,
            p_mu1: 0.7,
            mu1_z: 0.56,
            mu2_z: 0.27,
            mu1_x: 0.69,
            mu2_x: 0.33,
            p_z_bob: 0.9,
            clock_rate_hz: 50e6,
        }
    }
}

impl ProtocolParams {
    /// Strict validity, as required by the security analysis.
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_z_alice", self.p_z_alice),
            ("p_mu1", self.p_mu1),
            ("p_z_bob", self.p_z_bob),
        ] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::invalid(format!("{name} = {p} must lie in (0, 1)")));
            }
        }
        for (basis, mu1, mu2) in [("z", self.mu1_z, self.mu2_z), ("x", self.mu1_x, self.mu2_x)] {
            if !(mu2 > 0.0 && mu1 > mu2 && mu1.is_finite()) {
                return Err(Error::invalid(format!(
                    "intensities must satisfy mu1 > mu2 > 0 in basis {basis} (got {mu1}, {mu2})"
                )));
            }
        }
        self.validate_clock()
    }

    /// Looser validity for sampling: degenerate probabilities (0 or 1) and
    /// equal intensities are allowed.
    pub fn validate_for_sampling(&self) -> Result<()> {
        for (name, p) in [
            ("p_z_alice", self.p_z_alice),
            ("p_mu1", self.p_mu1),
            ("p_z_bob", self.p_z_bob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} must lie in [0, 1]")));
            }
        }
        for mu in [self.mu1_z, self.mu2_z, self.mu1_x, self.mu2_x] {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(Error::invalid(format!("intensity {mu} must be finite and non-negative")));
            }
        }
        self.validate_clock()
    }

    fn validate_clock(&self) -> Result<()> {
        if !(self.clock_rate_hz > 0.0 && self.clock_rate_hz.is_finite()) {
            return Err(Error::invalid(format!("clock rate {} must be positive", self.clock_rate_hz)));
        }
        Ok(())
    }

    pub fn basis_prob(&self, basis: Basis) -> f64 {
        match basis {
            Basis::Z => self.p_z_alice,
            Basis::X => 1.0 - self.p_z_alice,
        }
    }

    pub fn bob_basis_prob(&self, basis: Basis) -> f64 {
        match basis {
            Basis::Z => self.p_z_bob,
            Basis::X => 1.0 - self.p_z_bob,
        }
    }

    pub fn intensity_prob(&self, intensity: Intensity) -> f64 {
        match intensity {
            Intensity::Mu1 => self.p_mu1,
            Intensity::Mu2 => 1.0 - self.p_mu1,
        }
    }

    pub fn mu(&self, basis: Basis, intensity: Intensity) -> f64 {
        match (basis, intensity) {
            (Basis::Z, Intensity::Mu1) => self.mu1_z,
            (Basis::Z, Intensity::Mu2) => self.mu2_z,
            (Basis::X, Intensity::Mu1) => self.mu1_x,
            (Basis::X, Intensity::Mu2) => self.mu2_x,
        }
    }

    /// `(mu1, mu2)` of a basis.
    pub fn intensities(&self, basis: Basis) -> (f64, f64) {
        (self.mu(basis, Intensity::Mu1), self.mu(basis, Intensity::Mu2))
    }

    /// Slot period in picoseconds.
    pub fn slot_period_ps(&self) -> f64 {
        1e12 / self.clock_rate_hz
    }
}

/// Ensemble-average mean photon number per pulse.
pub fn mean_photon_number(params: &ProtocolParams) -> f64 {
    [Basis::Z, Basis::X]
        .iter()
        .flat_map(|&b| [Intensity::Mu1, Intensity::Mu2].map(move |k| (b, k)))
        .map(|(b, k)| params.basis_prob(b) * params.intensity_prob(k) * params.mu(b, k))
        .sum()
}

/// Alice's choice for one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PulseRecord {
    pub slot: u64,
    pub basis: Basis,
    pub bit: u8,
    pub intensity: Intensity,
}

impl PulseRecord {
    /// Packed flag byte used by the binary record format:
    /// bit 0 = X basis, bit 1 = bit value, bit 2 = decoy intensity.
    pub fn flags(&self) -> u8 {
        (self.basis == Basis::X) as u8 | (self.bit & 1) << 1 | ((self.intensity == Intensity::Mu2) as u8) << 2
    }

    pub fn from_flags(slot: u64, flags: u8) -> Result<Self> {
        if flags & !0b111 != 0 {
            return Err(Error::invalid(format!("unknown flag bits {flags:#04x}")));
        }
        let basis = if flags & 1 == 1 { Basis::X } else { Basis::Z };
        let bit = (flags >> 1) & 1;
        if basis == Basis::X && bit == 1 {
            return Err(Error::invalid("X-basis record carries bit 1".to_string()));
        }
        let intensity = if flags & 4 == 4 { Intensity::Mu2 } else { Intensity::Mu1 };
        Ok(Self { slot, basis, bit, intensity })
    }
}

/// Alice's random tape.
///
/// Each slot is drawn from its own generator, consuming one uniform for the
/// basis, one for the bit (drawn but ignored in X) and one for the intensity,
/// in that order. Any slot can therefore be looked up without materialising
/// the ones before it.
#[derive(Debug, Clone, Copy)]
pub struct AliceTape {
    params: ProtocolParams,
    source: RandomSource,
}

impl AliceTape {
    pub fn new(params: ProtocolParams, master: &RandomSource) -> Result<Self> {
        params.validate_for_sampling()?;
        Ok(Self {
            params,
            source: master.derive(Domain::AliceTape),
        })
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    pub fn record(&self, slot: u64) -> PulseRecord {
        let mut rng = self.source.slot_rng(slot);
        let basis = if rng.random::<f64>() < self.params.p_z_alice {
            Basis::Z
        } else {
            Basis::X
        };
        let bit_draw = rng.random::<f64>() >= 0.5;
        let bit = if basis == Basis::Z { bit_draw as u8 } else { 0 };
        let intensity = if rng.random::<f64>() < self.params.p_mu1 {
            Intensity::Mu1
        } else {
            Intensity::Mu2
        };
        PulseRecord { slot, basis, bit, intensity }
    }
}

/// Columnar pulse train covering slots `start_slot..start_slot + len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PulseTrain {
    pub start_slot: u64,
    pub basis: Vec<Basis>,
    pub bit: Vec<u8>,
    pub intensity: Vec<Intensity>,
}

impl PulseTrain {
    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn get(&self, i: usize) -> PulseRecord {
        PulseRecord {
            slot: self.start_slot + i as u64,
            basis: self.basis[i],
            bit: self.bit[i],
            intensity: self.intensity[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = PulseRecord> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Record for an absolute slot index, if the train covers it.
    pub fn record(&self, slot: u64) -> Option<PulseRecord> {
        let i = slot.checked_sub(self.start_slot)? as usize;
        (i < self.len()).then(|| self.get(i))
    }

    fn push(&mut self, r: PulseRecord) {
        self.basis.push(r.basis);
        self.bit.push(r.bit);
        self.intensity.push(r.intensity);
    }
}

/// Samples slots `0..n_slots` of Alice's tape.
pub fn sample_pulse_train(n_slots: u64, params: &ProtocolParams, rng: &RandomSource) -> Result<PulseTrain> {
    sample_pulse_range(0, n_slots, params, rng)
}

pub fn sample_pulse_range(
    start_slot: u64,
    n_slots: u64,
    params: &ProtocolParams,
    rng: &RandomSource,
) -> Result<PulseTrain> {
    if n_slots == 0 {
        return Err(Error::invalid("pulse train needs at least one slot"));
    }
    let tape = AliceTape::new(*params, rng)?;
    let n = n_slots as usize;
    let mut train = PulseTrain {
        start_slot,
        basis: Vec::with_capacity(n),
        bit: Vec::with_capacity(n),
        intensity: Vec::with_capacity(n),
    };
    for slot in start_slot..start_slot + n_slots {
        train.push(tape.record(slot));
    }
    Ok(train)
}
