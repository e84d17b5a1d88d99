use super::SyncState;
use crate::channel::{TimeTag, CH_PPS};

/// A detector click assigned to a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotTag {
    pub slot: u64,
    pub channel: u8,
    pub timestamp_ps: u64,
}

/// Keeps clicks within `window_ps / 2` of their slot centre (closed
/// interval). PPS markers and clicks before slot 0 are dropped.
pub fn window_filter(tags: &[TimeTag], sync: &SyncState, window_ps: f64) -> Vec<SlotTag> {
    let half = window_ps / 2.0;
    // absorbs float rounding at the window edge
    let tol = 1e-6;
    tags.iter()
        .filter(|t| t.channel != CH_PPS)
        .filter_map(|t| {
            let (slot, resid) = sync.locate(t.timestamp_ps as f64);
            (slot >= 0 && resid.abs() <= half + tol).then_some(SlotTag {
                slot: slot as u64,
                channel: t.channel,
                timestamp_ps: t.timestamp_ps,
            })
        })
        .collect()
}

/// In-window and off-window (noise reference) click counts per channel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WindowStats {
    pub in_window: [u64; 4],
    /// Clicks between a quarter and a half period from the slot centre,
    /// where no signal arrives.
    pub off_window: [u64; 4],
}

impl WindowStats {
    pub fn merge(&mut self, o: &WindowStats) {
        for d in 0..4 {
            self.in_window[d] += o.in_window[d];
            self.off_window[d] += o.off_window[d];
        }
    }

    /// Noise expected inside a window of `window_ps`, per channel.
    pub fn noise_estimate(&self, window_ps: f64, period_ps: f64) -> [f64; 4] {
        self.off_window.map(|c| c as f64 * window_ps / (period_ps / 2.0))
    }
}

pub fn window_stats(tags: &[TimeTag], sync: &SyncState, window_ps: f64) -> WindowStats {
    let mut s = WindowStats::default();
    let p = sync.period();
    for t in tags.iter().filter(|t| (t.channel as usize) < 4) {
        let (slot, resid) = sync.locate(t.timestamp_ps as f64);
        if slot < 0 {
            continue;
        }
        let r = resid.abs();
        if r <= window_ps / 2.0 {
            s.in_window[t.channel as usize] += 1;
        }
        if r >= p / 4.0 {
            s.off_window[t.channel as usize] += 1;
        }
    }
    s
}
