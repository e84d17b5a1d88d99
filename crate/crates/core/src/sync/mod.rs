//! Receiver-side stream processing: clock recovery, windowing, efficiency
//! balancing, double-click resolution and sifting.

mod clock;
mod resolve;
mod sift;
mod window;

pub use clock::{recover_clock, SyncTracker};
pub use resolve::{balance_efficiency, resolve_double_clicks, Detection};
pub use sift::{sift, SiftResult, SiftedRecord, Sifter};
pub use window::{window_filter, window_stats, SlotTag, WindowStats};

pub use crate::security::DecoyCounts;

use serde::{Deserialize, Serialize};

/// Recovered mapping from receiver time to transmitter slots: slot `k` is
/// centred at `offset_ps + k * slot_period_ps * (1 + drift)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncState {
    pub offset_ps: f64,
    pub drift: f64,
    pub slot_period_ps: f64,
}

impl SyncState {
    pub fn period(&self) -> f64 {
        self.slot_period_ps * (1.0 + self.drift)
    }

    /// Nearest slot and the residual from its centre, in ps.
    pub fn locate(&self, t_ps: f64) -> (i64, f64) {
        let p = self.period();
        let slot = ((t_ps - self.offset_ps) / p).round();
        (slot as i64, t_ps - self.offset_ps - slot * p)
    }

    /// Receiver time of the centre of `slot`.
    pub fn slot_center(&self, slot: i64) -> f64 {
        self.offset_ps + slot as f64 * self.period()
    }
}
