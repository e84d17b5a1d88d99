//! Analytic parameter sweeps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::analytic::{evaluate, Scenario};
use crate::config::ExperimentConfig;
use crate::encoder::EncoderImperfection;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Total link loss in dB.
    Loss,
    /// Intrinsic encoder QBER.
    Qber,
    /// Target number of sifted Z bits.
    BlockSize,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(Axis::Loss),
            "qber" => Ok(Axis::Qber),
            "block-size" | "block_size" => Ok(Axis::BlockSize),
            _ => Err(Error::invalid(format!("unknown sweep axis {s:?} (loss, qber, block-size)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub tdr_hz: f64,
    pub qber_z: f64,
    pub qber_x: f64,
    pub sifted_bps: f64,
    pub skr_inf_bps: f64,
    pub skr_f_bps: f64,
}

/// The analytic scenario described by a configuration.
pub fn scenario_of(config: &ExperimentConfig) -> Scenario {
    Scenario {
        encoder: config.encoder,
        link: config.link,
        detectors: config.detectors,
        epsilons: config.epsilons,
        f_ec: config.run.f_ec,
        n_z_target: config.run.target_n_z.map_or(1e8, |n| n as f64),
    }
}

fn at(config: &ExperimentConfig, axis: Axis, x: f64) -> Result<Scenario> {
    let mut s = scenario_of(config);
    match axis {
        Axis::Loss => s.link = s.link.with_total_loss(x)?,
        Axis::Qber => {
            s.encoder = EncoderImperfection {
                theta_error: EncoderImperfection::for_intrinsic_qber(x)?.theta_error,
                ..s.encoder
            }
        }
        Axis::BlockSize => {
            if !(x >= 1.0) {
                return Err(Error::invalid("block size must be at least 1"));
            }
            s.n_z_target = x;
        }
    }
    Ok(s)
}

pub fn evaluate_at(config: &ExperimentConfig, axis: Axis, x: f64) -> Result<SweepPoint> {
    let p = evaluate(&config.protocol, &at(config, axis, x)?)?;
    Ok(SweepPoint {
        x,
        tdr_hz: p.rates.tdr_hz,
        qber_z: p.rates.qber_z,
        qber_x: p.rates.qber_x,
        sifted_bps: p.rates.sifted_rate_bps,
        skr_inf_bps: p.skr_inf,
        skr_f_bps: p.skr_f,
    })
}

/// Evaluates `from, from + step, ...` up to and including `to`.
pub fn sweep(config: &ExperimentConfig, axis: Axis, from: f64, to: f64, step: f64) -> Result<Vec<SweepPoint>> {
    if !(from.is_finite() && to.is_finite() && step > 0.0) || to < from {
        return Err(Error::invalid(format!("empty sweep range {from}..={to} step {step}")));
    }
    config.protocol.validate()?;
    let n = ((to - from) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| evaluate_at(config, axis, from + i as f64 * step)).collect()
}

/// Smallest `x` in `[lo, hi]` with no finite-size key, to within `tol`,
/// assuming the key rate only decreases along the axis. `None` when `hi`
/// still yields a key.
pub fn cutoff(config: &ExperimentConfig, axis: Axis, lo: f64, hi: f64, tol: f64) -> Result<Option<f64>> {
    if !(lo < hi && tol > 0.0) {
        return Err(Error::invalid("cutoff search needs lo < hi and a positive tolerance"));
    }
    let has_key = |x: f64| evaluate_at(config, axis, x).map(|p| p.skr_f_bps > 0.0);
    if has_key(hi)? {
        return Ok(None);
    }
    if !has_key(lo)? {
        return Ok(Some(lo));
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > tol {
        let m = 0.5 * (a + b);
        if has_key(m)? {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(Some(b))
}

pub const SWEEP_CSV_HEADER: &str = "x,tdr_hz,qber_z,qber_x,sifted_bps,skr_inf_bps,skr_f_bps";

pub fn write_sweep_csv<W: Write>(w: &mut W, points: &[SweepPoint]) -> Result<()> {
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            p.x, p.tdr_hz, p.qber_z, p.qber_x, p.sifted_bps, p.skr_inf_bps, p.skr_f_bps
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_range_rejected() {
        let c = ExperimentConfig::default();
        assert!(sweep(&c, Axis::Loss, 30.0, 20.0, 1.0).is_err());
        assert!(sweep(&c, Axis::Loss, 20.0, 30.0, 0.0).is_err());
    }

    #[test]
    fn loss_sweep_decreases() {
        let c = ExperimentConfig::default();
        let pts = sweep(&c, Axis::Loss, 20.0, 45.0, 1.0).unwrap();
        assert_eq!(pts.len(), 26);
        for w in pts.windows(2) {
            assert!(w[1].skr_f_bps <= w[0].skr_f_bps);
        }
    }

    #[test]
    fn axis_parsing() {
        assert_eq!("loss".parse::<Axis>().unwrap(), Axis::Loss);
        assert_eq!("block-size".parse::<Axis>().unwrap(), Axis::BlockSize);
        assert!("nope".parse::<Axis>().is_err());
    }
}
