//! Free-space link, receiver and detector model.

mod coupling;
mod detect;
mod rates;

pub use coupling::{sample_coupling_series, CouplingProcess};
pub use detect::{transmit_and_detect, Block, TagGenerator, SEGMENT_MS};
pub use rates::{
    expected_rates, measurement_probability, quantized_signal_fraction, signal_fraction, window_signal_noise_tradeoff, ExpectedRates,
    LinkPhysics, WindowTradeoff,
};

use serde::{Deserialize, Serialize};

use crate::protocol::Basis;
use crate::{Error, Result};

/// Detector channel ids as written to the tag stream.
pub const CH_Z0: u8 = 0;
pub const CH_Z1: u8 = 1;
pub const CH_XP: u8 = 2;
pub const CH_XM: u8 = 3;
pub const CH_PPS: u8 = 255;

pub fn channel_basis(ch: u8) -> Option<Basis> {
    match ch {
        CH_Z0 | CH_Z1 => Some(Basis::Z),
        CH_XP | CH_XM => Some(Basis::X),
        _ => None,
    }
}

/// Bit value a detector click stands for.
pub fn channel_bit(ch: u8) -> u8 {
    ch & 1
}

/// A detection event in the receiver's clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimeTag {
    pub timestamp_ps: u64,
    pub channel: u8,
}

impl TimeTag {
    pub fn new(timestamp_ps: u64, channel: u8) -> Self {
        Self { timestamp_ps, channel }
    }

    pub fn is_pps(&self) -> bool {
        self.channel == CH_PPS
    }
}

/// Statistics of the single-mode-fiber coupling efficiency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingModel {
    pub mean_efficiency: f64,
    pub lognormal_sigma: f64,
    pub correlation_time_s: f64,
    pub tip_tilt_corrected: bool,
}

/// Log-space sigma for which the 99.9th percentile sits at `peak_to_mean`
/// times the mean of a unit-mean log-normal.
fn sigma_for_peak(peak_to_mean: f64) -> f64 {
    const Z999: f64 = 3.090_232_306_167_813;
    Z999 - (Z999 * Z999 - 2.0 * peak_to_mean.ln()).sqrt()
}

impl CouplingModel {
    /// With tip-tilt correction: 14 dB mean coupling loss, peaks about 2.5x
    /// the mean.
    pub fn corrected() -> Self {
        Self {
            mean_efficiency: 10f64.powf(-1.4),
            lognormal_sigma: sigma_for_peak(2.5),
            correlation_time_s: 0.01,
            tip_tilt_corrected: true,
        }
    }

    /// Without correction: about 1% mean with much deeper fades.
    pub fn uncorrected() -> Self {
        Self {
            mean_efficiency: 0.01,
            lognormal_sigma: 0.8,
            correlation_time_s: 0.01,
            tip_tilt_corrected: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean_efficiency > 0.0 && self.mean_efficiency <= 1.0) {
            return Err(Error::invalid(format!(
                "coupling mean {} outside (0, 1]",
                self.mean_efficiency
            )));
        }
        if !(self.lognormal_sigma >= 0.0 && self.lognormal_sigma.is_finite()) {
            return Err(Error::invalid("coupling sigma must be finite and non-negative"));
        }
        if !(self.correlation_time_s > 0.0 && self.correlation_time_s.is_finite()) {
            return Err(Error::invalid("coupling correlation time must be positive"));
        }
        Ok(())
    }

    /// Efficiency for a unit-normal log-space state `x`, at a given mean.
    pub fn efficiency(&self, mean: f64, x: f64) -> f64 {
        let s = self.lognormal_sigma;
        (mean * (s * x - 0.5 * s * s).exp()).clamp(f64::MIN_POSITIVE, 1.0)
    }
}

impl Default for CouplingModel {
    fn default() -> Self {
        Self::corrected()
    }
}

/// Losses and background of the optical link.
///
/// `background_rate_hz` is the total noise rate inside the reference
/// detection window, dark counts included, summed over the four detectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkModel {
    pub fixed_loss_optics_db: f64,
    pub fixed_loss_analyzer_db: f64,
    pub coupling: CouplingModel,
    pub background_rate_hz: f64,
    #[serde(default)]
    pub extra_loss_db: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            fixed_loss_optics_db: 5.0,
            fixed_loss_analyzer_db: 5.0,
            coupling: CouplingModel::corrected(),
            background_rate_hz: 240.0,
            extra_loss_db: 0.0,
        }
    }
}

impl LinkModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("fixed_loss_optics_db", self.fixed_loss_optics_db),
            ("fixed_loss_analyzer_db", self.fixed_loss_analyzer_db),
            ("extra_loss_db", self.extra_loss_db),
            ("background_rate_hz", self.background_rate_hz),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        self.coupling.validate()
    }

    /// Transmission of everything except the fluctuating coupling.
    pub fn fixed_transmission(&self) -> f64 {
        10f64.powf(-(self.fixed_loss_optics_db + self.fixed_loss_analyzer_db + self.extra_loss_db) / 10.0)
    }

    /// Total mean loss in dB, coupling included.
    pub fn total_loss_db(&self) -> f64 {
        self.fixed_loss_optics_db + self.fixed_loss_analyzer_db + self.extra_loss_db
            - 10.0 * self.coupling.mean_efficiency.log10()
    }

    /// Same link with total loss `total_db`: extra loss is added above the
    /// current coupling loss, and below it the coupling mean is raised.
    pub fn with_total_loss(&self, total_db: f64) -> Result<Self> {
        if !total_db.is_finite() {
            return Err(Error::invalid("total loss must be finite"));
        }
        let extra = total_db - (self.total_loss_db() - self.extra_loss_db);
        if extra >= 0.0 {
            return Ok(Self {
                extra_loss_db: extra,
                ..*self
            });
        }
        let mean = self.coupling.mean_efficiency * 10f64.powf(-extra / 10.0);
        if mean > 1.0 + 1e-12 {
            return Err(Error::invalid(format!("total loss {total_db} dB is below the fixed losses")));
        }
        Ok(Self {
            extra_loss_db: 0.0,
            coupling: CouplingModel {
                mean_efficiency: mean.min(1.0),
                ..self.coupling
            },
            ..*self
        })
    }
}

/// Four single-photon detectors with a shared time-to-digital converter.
///
/// Channel order is Z0 (L), Z1 (R), X+ and X-. The loss budget and the
/// background rate of the link are quoted inside `reference_window_ps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorBank {
    pub efficiency: [f64; 4],
    pub dark_rate_hz: [f64; 4],
    pub window_ps: f64,
    pub reference_window_ps: f64,
    pub tdc_resolution_ps: u64,
    pub jitter_sigma_ps: f64,
    pub pulse_fwhm_ps: f64,
    /// Bloch-angle misalignment of the analyzer, per basis.
    #[serde(default)]
    pub misalignment_z: f64,
    #[serde(default)]
    pub misalignment_x: f64,
}

impl Default for DetectorBank {
    fn default() -> Self {
        Self {
            efficiency: [0.85, 0.85, 0.9, 0.3],
            dark_rate_hz: [200.0; 4],
            window_ps: 1000.0,
            reference_window_ps: 1000.0,
            tdc_resolution_ps: 81,
            jitter_sigma_ps: 30.0,
            pulse_fwhm_ps: 500.0,
            misalignment_z: 0.0,
            misalignment_x: 0.0,
        }
    }
}

pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

impl DetectorBank {
    pub fn validate(&self) -> Result<()> {
        for &e in &self.efficiency {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::invalid(format!("detector efficiency {e} outside (0, 1]")));
            }
        }
        for &d in &self.dark_rate_hz {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::invalid(format!("dark rate {d} must be non-negative")));
            }
        }
        if !(self.window_ps > 0.0 && self.reference_window_ps > 0.0) {
            return Err(Error::invalid("detection windows must be positive"));
        }
        if self.tdc_resolution_ps == 0 {
            return Err(Error::invalid("tdc resolution must be positive"));
        }
        if !(self.jitter_sigma_ps >= 0.0 && self.pulse_fwhm_ps >= 0.0) {
            return Err(Error::invalid("jitter and pulse width must be non-negative"));
        }
        if !(self.misalignment_z.is_finite() && self.misalignment_x.is_finite()) {
            return Err(Error::invalid("misalignment must be finite"));
        }
        Ok(())
    }

    /// Validity against a slot period: windows cannot exceed one slot.
    pub fn validate_for_period(&self, period_ps: f64) -> Result<()> {
        self.validate()?;
        if self.window_ps > period_ps + 1e-9 || self.reference_window_ps > period_ps + 1e-9 {
            return Err(Error::invalid(format!(
                "detection window exceeds the slot period of {period_ps} ps"
            )));
        }
        Ok(())
    }

    /// Arrival-time spread of signal clicks: pulse shape and detector jitter
    /// in quadrature.
    pub fn signal_sigma_ps(&self) -> f64 {
        (self.pulse_fwhm_ps / FWHM_PER_SIGMA).hypot(self.jitter_sigma_ps)
    }

    /// Smallest efficiency within the basis of `ch`.
    pub fn basis_min_efficiency(&self, ch: u8) -> f64 {
        let base = (ch as usize) & !1;
        self.efficiency[base].min(self.efficiency[base + 1])
    }

    pub fn misalignment(&self, basis: Basis) -> f64 {
        match basis {
            Basis::Z => self.misalignment_z,
            Basis::X => self.misalignment_x,
        }
    }
}

/// Receiver clock relative to the transmitter: Bob's clock reads
/// `t (1 + drift) + offset_ps` at transmitter time `t`, and its PPS input
/// arrives `pps_latency_ps` late.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReceiverClock {
    pub offset_ps: f64,
    pub drift: f64,
    pub pps_latency_ps: f64,
}

impl Default for ReceiverClock {
    fn default() -> Self {
        Self {
            offset_ps: 7350.0,
            drift: 2.0e-8,
            pps_latency_ps: 1200.0,
        }
    }
}

impl ReceiverClock {
    pub fn ideal() -> Self {
        Self {
            offset_ps: 0.0,
            drift: 0.0,
            pps_latency_ps: 0.0,
        }
    }

    pub fn validate(&self, period_ps: f64) -> Result<()> {
        if !(self.offset_ps >= 0.0 && self.offset_ps.is_finite()) {
            return Err(Error::invalid("clock offset must be finite and non-negative"));
        }
        if !(self.drift.abs() < 1e-6) {
            return Err(Error::invalid(format!("clock drift {} exceeds 1e-6", self.drift)));
        }
        if !(self.pps_latency_ps.abs() < period_ps / 2.0) {
            return Err(Error::invalid("PPS latency must be below half a slot period"));
        }
        Ok(())
    }

    /// Receiver time of transmitter time `t_ps`.
    pub fn to_receiver(&self, t_ps: f64) -> f64 {
        t_ps * (1.0 + self.drift) + self.offset_ps
    }

    /// Receiver time of the PPS edge for transmitter second `k`.
    pub fn pps_time(&self, k: u64) -> f64 {
        self.to_receiver(k as f64 * 1e12) + self.pps_latency_ps
    }
}

/// Piecewise-linear operating conditions over a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulePoint {
    pub t_s: f64,
    pub coupling_mean: f64,
    pub background_rate_hz: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule {
    pub points: Vec<SchedulePoint>,
}

impl Schedule {
    pub fn constant() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.points {
            if !(p.coupling_mean > 0.0 && p.coupling_mean <= 1.0) {
                return Err(Error::invalid(format!("schedule coupling {} outside (0, 1]", p.coupling_mean)));
            }
            if !(p.background_rate_hz >= 0.0 && p.t_s.is_finite()) {
                return Err(Error::invalid("schedule entries must be finite with non-negative background"));
            }
        }
        if self.points.windows(2).any(|w| w[1].t_s <= w[0].t_s) {
            return Err(Error::invalid("schedule times must be strictly increasing"));
        }
        Ok(())
    }

    /// `(coupling mean, background)` at time `t_s`, held constant outside the
    /// schedule and taken from `link` when the schedule is empty.
    pub fn at(&self, t_s: f64, link: &LinkModel) -> (f64, f64) {
        let pts = &self.points;
        match pts.len() {
            0 => (link.coupling.mean_efficiency, link.background_rate_hz),
            _ if t_s <= pts[0].t_s => (pts[0].coupling_mean, pts[0].background_rate_hz),
            n if t_s >= pts[n - 1].t_s => (pts[n - 1].coupling_mean, pts[n - 1].background_rate_hz),
            _ => {
                let i = pts.partition_point(|p| p.t_s <= t_s);
                let (a, b) = (&pts[i - 1], &pts[i]);
                let u = (t_s - a.t_s) / (b.t_s - a.t_s);
                (
                    a.coupling_mean + u * (b.coupling_mean - a.coupling_mean),
                    a.background_rate_hz + u * (b.background_rate_hz - a.background_rate_hz),
                )
            }
        }
    }

    /// The link with conditions at `t_s` substituted.
    pub fn link_at(&self, t_s: f64, link: &LinkModel) -> LinkModel {
        let (mean, bg) = self.at(t_s, link);
        let mut out = *link;
        out.coupling.mean_efficiency = mean;
        out.background_rate_hz = bg;
        out
    }
}
