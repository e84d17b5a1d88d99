use serde::{Deserialize, Serialize};

use super::Detection;
use crate::channel::{channel_basis, channel_bit};
use crate::error::{Error, Result};
use crate::postproc::KeyBlock;
use crate::protocol::{Basis, Intensity, PulseRecord};
use crate::security::DecoyCounts;

/// A slot where both parties used the same basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiftedRecord {
    pub slot: u64,
    pub basis: Basis,
    pub alice_bit: u8,
    pub bob_bit: u8,
    pub intensity: Intensity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftResult {
    pub alice_key: KeyBlock,
    pub bob_key: KeyBlock,
    pub counts: DecoyCounts,
    pub records: Vec<SiftedRecord>,
}

/// Incremental sifter over slot-sorted chunks. Every detection must have a
/// matching announcement from Alice; announcements without a detection are
/// skipped.
#[derive(Debug, Clone)]
pub struct Sifter {
    alice_key: KeyBlock,
    bob_key: KeyBlock,
    counts: DecoyCounts,
    records: Option<Vec<SiftedRecord>>,
    last_alice: Option<u64>,
    last_bob: Option<u64>,
    detections: u64,
}

impl Sifter {
    pub fn new(keep_records: bool) -> Self {
        Self {
            alice_key: KeyBlock::zeros(0),
            bob_key: KeyBlock::zeros(0),
            counts: DecoyCounts::default(),
            records: keep_records.then(Vec::new),
            last_alice: None,
            last_bob: None,
            detections: 0,
        }
    }

    pub fn counts(&self) -> &DecoyCounts {
        &self.counts
    }

    pub fn n_z(&self) -> u64 {
        self.counts.n_z()
    }

    /// Resolved detections consumed so far.
    pub fn detections(&self) -> u64 {
        self.detections
    }

    pub fn push(&mut self, alice: &[PulseRecord], bob: &[Detection]) -> Result<()> {
        let mut a = alice.iter().peekable();
        for d in bob {
            if self.last_bob.is_some_and(|s| d.slot <= s) {
                return Err(Error::Integrity(format!("detections not strictly slot-ordered at slot {}", d.slot)));
            }
            self.last_bob = Some(d.slot);
            self.detections += 1;
            let rec = loop {
                let Some(r) = a.next() else {
                    return Err(Error::Integrity(format!("no transmitter record for detected slot {}", d.slot)));
                };
                if self.last_alice.is_some_and(|s| r.slot <= s) {
                    return Err(Error::Integrity(format!("two transmitter records for slot {}", r.slot)));
                }
                self.last_alice = Some(r.slot);
                match r.slot.cmp(&d.slot) {
                    std::cmp::Ordering::Less => continue,
                    std::cmp::Ordering::Equal => break *r,
                    std::cmp::Ordering::Greater => {
                        return Err(Error::Integrity(format!("no transmitter record for detected slot {}", d.slot)))
                    }
                }
            };
            if a.peek().is_some_and(|n| n.slot == rec.slot) {
                return Err(Error::Integrity(format!("two transmitter records for slot {}", rec.slot)));
            }
            let Some(bob_basis) = channel_basis(d.channel) else {
                return Err(Error::Integrity(format!("unknown detector channel {}", d.channel)));
            };
            if bob_basis != rec.basis {
                continue;
            }
            let bob_bit = channel_bit(d.channel);
            self.counts.record(rec.basis, rec.intensity, bob_bit != rec.bit);
            if rec.basis == Basis::Z {
                self.alice_key.push(rec.bit == 1);
                self.bob_key.push(bob_bit == 1);
            }
            if let Some(v) = self.records.as_mut() {
                v.push(SiftedRecord {
                    slot: rec.slot,
                    basis: rec.basis,
                    alice_bit: rec.bit,
                    bob_bit,
                    intensity: rec.intensity,
                });
            }
        }
        for r in a {
            if self.last_alice.is_some_and(|s| r.slot <= s) {
                return Err(Error::Integrity(format!("two transmitter records for slot {}", r.slot)));
            }
            self.last_alice = Some(r.slot);
        }
        Ok(())
    }

    pub fn finish(self, duration_s: f64) -> SiftResult {
        let mut counts = self.counts;
        counts.duration_s = duration_s;
        SiftResult {
            alice_key: self.alice_key,
            bob_key: self.bob_key,
            counts,
            records: self.records.unwrap_or_default(),
        }
    }
}

/// Sifts complete, slot-sorted record and detection lists.
pub fn sift(alice: &[PulseRecord], bob: &[Detection], duration_s: f64) -> Result<SiftResult> {
    let mut s = Sifter::new(true);
    s.push(alice, bob)?;
    Ok(s.finish(duration_s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(slot: u64, basis: Basis, bit: u8, intensity: Intensity) -> PulseRecord {
        PulseRecord { slot, basis, bit, intensity }
    }

    #[test]
    fn sorts_into_classes() {
        let alice = [
            rec(1, Basis::Z, 0, Intensity::Mu1),
            rec(2, Basis::Z, 1, Intensity::Mu2),
            rec(3, Basis::X, 0, Intensity::Mu1),
            rec(4, Basis::X, 0, Intensity::Mu2),
            rec(5, Basis::Z, 1, Intensity::Mu1),
            rec(6, Basis::Z, 1, Intensity::Mu1),
        ];
        let bob = [
            Detection { slot: 1, channel: 0 },
            Detection { slot: 2, channel: 0 },
            Detection { slot: 3, channel: 2 },
            Detection { slot: 4, channel: 3 },
            Detection { slot: 5, channel: 2 },
        ];
        let r = sift(&alice, &bob, 1.0).unwrap();
        assert_eq!(r.counts.n_z_mu1, 1);
        assert_eq!(r.counts.n_z_mu2, 1);
        assert_eq!(r.counts.m_z_mu2, 1);
        assert_eq!(r.counts.n_x_mu1, 1);
        assert_eq!(r.counts.m_x_mu1, 0);
        assert_eq!(r.counts.m_x_mu2, 1);
        assert_eq!(r.alice_key.len(), 2);
        assert_eq!(r.bob_key.hamming_distance(&r.alice_key).unwrap(), 1);
        assert_eq!(r.records.len(), 4);
        assert!(r.records.len() as u64 <= bob.len() as u64);
    }

    #[test]
    fn duplicate_alice_slot_is_integrity_error() {
        let alice = [rec(1, Basis::Z, 0, Intensity::Mu1), rec(1, Basis::Z, 1, Intensity::Mu1)];
        let bob = [Detection { slot: 1, channel: 0 }];
        assert!(matches!(sift(&alice, &bob, 1.0), Err(Error::Integrity(_))));
        assert!(matches!(sift(&alice, &[], 1.0), Err(Error::Integrity(_))));
    }

    #[test]
    fn missing_alice_record_is_integrity_error() {
        let alice = [rec(2, Basis::Z, 0, Intensity::Mu1)];
        assert!(matches!(sift(&alice, &[Detection { slot: 1, channel: 0 }], 1.0), Err(Error::Integrity(_))));
        assert!(matches!(sift(&alice, &[Detection { slot: 3, channel: 0 }], 1.0), Err(Error::Integrity(_))));
    }

    #[test]
    fn chunks_match_whole() {
        let alice: Vec<_> = (0..100).map(|s| rec(s, if s % 3 == 0 { Basis::X } else { Basis::Z }, 0, Intensity::Mu1)).collect();
        let bob: Vec<_> = (0..100).step_by(2).map(|s| Detection { slot: s, channel: (s % 4) as u8 }).collect();
        let whole = sift(&alice, &bob, 1.0).unwrap();
        let mut s = Sifter::new(true);
        s.push(&alice[..50], &bob[..25]).unwrap();
        s.push(&alice[50..], &bob[25..]).unwrap();
        assert_eq!(s.finish(1.0), whole);
    }
}
