use rand::RngExt;

use super::SlotTag;
use crate::channel::channel_basis;
use crate::error::{Error, Result};
use crate::protocol::Basis;
use crate::rng::{Domain, RandomSource};

/// A single resolved click per slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Detection {
    pub slot: u64,
    pub channel: u8,
}

/// Per-channel keep probability: the lowest efficiency within the channel's
/// basis divided by the channel's own.
pub fn keep_probabilities(efficiency: &[f64; 4]) -> Result<[f64; 4]> {
    if efficiency.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
        return Err(Error::invalid(format!("detector efficiencies must lie in (0, 1], got {efficiency:?}")));
    }
    let z = efficiency[0].min(efficiency[1]);
    let x = efficiency[2].min(efficiency[3]);
    Ok([z / efficiency[0], z / efficiency[1], x / efficiency[2], x / efficiency[3]])
}

/// Randomly discards clicks so that all channels of a basis look equally
/// efficient. The draw for a click depends only on its slot and channel.
pub fn balance_efficiency(tags: &[SlotTag], efficiency: &[f64; 4], source: &RandomSource) -> Result<Vec<SlotTag>> {
    let keep = keep_probabilities(efficiency)?;
    let src = source.derive(Domain::Balance);
    Ok(tags
        .iter()
        .filter(|t| {
            let Some(&k) = keep.get(t.channel as usize) else { return false };
            k >= 1.0 || src.slot_rng(t.slot.wrapping_mul(4) + t.channel as u64).random::<f64>() < k
        })
        .copied()
        .collect())
}

/// Reduces slot-sorted clicks to at most one detection per slot. With clicks
/// in both bases a basis is chosen uniformly first, then a uniform channel
/// within it.
pub fn resolve_double_clicks(tags: &[SlotTag], source: &RandomSource) -> Vec<Detection> {
    let src = source.derive(Domain::DoubleClick);
    let mut out = Vec::with_capacity(tags.len());
    let mut i = 0;
    while i < tags.len() {
        let slot = tags[i].slot;
        let mut j = i;
        let mut fired = [false; 4];
        while j < tags.len() && tags[j].slot == slot {
            if let Some(f) = fired.get_mut(tags[j].channel as usize) {
                *f = true;
            }
            j += 1;
        }
        i = j;
        let chans: Vec<u8> = (0..4u8).filter(|&c| fired[c as usize]).collect();
        let channel = match chans.len() {
            0 => continue,
            1 => chans[0],
            _ => {
                let mut rng = src.slot_rng(slot);
                let z = chans.iter().any(|&c| channel_basis(c) == Some(Basis::Z));
                let x = chans.iter().any(|&c| channel_basis(c) == Some(Basis::X));
                let basis = match (z, x) {
                    (true, true) => {
                        if rng.random::<bool>() {
                            Basis::Z
                        } else {
                            Basis::X
                        }
                    }
                    (true, false) => Basis::Z,
                    _ => Basis::X,
                };
                let pool: Vec<u8> = chans.into_iter().filter(|&c| channel_basis(c) == Some(basis)).collect();
                pool[rng.random_range(0..pool.len())]
            }
        };
        out.push(Detection { slot, channel });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(slot: u64, channel: u8) -> SlotTag {
        SlotTag { slot, channel, timestamp_ps: slot * 20_000 }
    }

    #[test]
    fn keep_ratios() {
        let k = keep_probabilities(&[0.85, 0.85, 0.9, 0.3]).unwrap();
        assert_eq!(k[0], 1.0);
        assert_eq!(k[1], 1.0);
        assert!((k[2] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(k[3], 1.0);
        assert_eq!(keep_probabilities(&[0.5; 4]).unwrap(), [1.0; 4]);
        assert!(keep_probabilities(&[0.0, 1.0, 1.0, 1.0]).is_err());
        assert!(keep_probabilities(&[1.1, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn balanced_thinning_rate() {
        let src = RandomSource::new(9);
        let tags: Vec<SlotTag> = (0..60_000).map(|s| tag(s, 2)).collect();
        let kept = balance_efficiency(&tags, &[0.85, 0.85, 0.9, 0.3], &src).unwrap();
        let frac = kept.len() as f64 / tags.len() as f64;
        assert!((frac - 1.0 / 3.0).abs() < 0.01, "{frac}");
        let equal = balance_efficiency(&tags, &[0.4; 4], &src).unwrap();
        assert_eq!(equal.len(), tags.len());
    }

    #[test]
    fn single_click_passes_through() {
        let d = resolve_double_clicks(&[tag(5, 0)], &RandomSource::new(1));
        assert_eq!(d, vec![Detection { slot: 5, channel: 0 }]);
    }

    #[test]
    fn duplicate_channel_is_one_click() {
        let d = resolve_double_clicks(&[tag(5, 3), tag(5, 3)], &RandomSource::new(1));
        assert_eq!(d, vec![Detection { slot: 5, channel: 3 }]);
    }

    #[test]
    fn deterministic_per_slot() {
        let tags = [tag(7, 0), tag(7, 1), tag(7, 2)];
        let a = resolve_double_clicks(&tags, &RandomSource::new(3));
        let b = resolve_double_clicks(&tags[..], &RandomSource::new(3));
        assert_eq!(a, b);
    }
}
