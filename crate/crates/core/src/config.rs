//! Experiment configuration, read from and written to TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{DetectorBank, LinkModel, ReceiverClock, Schedule, SchedulePoint};
use crate::encoder::EncoderImperfection;
use crate::error::{Error, Result};
use crate::postproc::CascadeConfig;
use crate::protocol::ProtocolParams;
use crate::security::SecurityEpsilons;

/// Run control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Maximum acquisition time in whole seconds.
    pub duration_s: u64,
    /// TOML integers are signed, so seeds above `i64::MAX` cannot be written.
    pub master_seed: u64,
    /// Stop acquiring once this many sifted Z bits are collected.
    pub target_n_z: Option<u64>,
    /// Length of the summary aggregation intervals.
    pub interval_s: u64,
    /// Seconds of stream used for the initial clock lock.
    pub lock_s: u64,
    /// Reconciliation efficiency assumed where no reconciliation is run
    /// (per-interval rows, analytic evaluations).
    pub f_ec: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            duration_s: 60,
            master_seed: 1,
            target_n_z: None,
            interval_s: 240,
            lock_s: 10,
            f_ec: 1.06,
        }
    }
}

/// Optional artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Raw receiver time tags (`tags.bin`).
    pub write_tags: bool,
    /// Transmitter records for detected slots (`alice.bin`).
    pub write_alice: bool,
    /// Sifted key pair before reconciliation.
    pub write_sifted: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            write_tags: true,
            write_alice: true,
            write_sifted: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub protocol: ProtocolParams,
    pub encoder: EncoderImperfection,
    pub link: LinkModel,
    pub detectors: DetectorBank,
    pub clock: ReceiverClock,
    pub epsilons: SecurityEpsilons,
    pub cascade: CascadeConfig,
    pub output: OutputConfig,
    /// Time-varying coupling mean and background; empty means constant.
    pub schedule: Schedule,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.run.duration_s == 0 {
            return Err(Error::Config("run.duration_s must be positive".into()));
        }
        if self.run.interval_s == 0 {
            return Err(Error::Config("run.interval_s must be positive".into()));
        }
        if self.run.lock_s == 0 {
            return Err(Error::Config("run.lock_s must be positive".into()));
        }
        if self.run.target_n_z == Some(0) {
            return Err(Error::Config("run.target_n_z must be positive when set".into()));
        }
        if !(self.run.f_ec >= 1.0 && self.run.f_ec.is_finite()) {
            return Err(Error::Config("run.f_ec must be at least 1".into()));
        }
        self.protocol.validate()?;
        self.encoder.validate()?;
        self.link.validate()?;
        self.detectors.validate()?;
        let period = self.protocol.slot_period_ps();
        self.detectors.validate_for_period(period)?;
        self.clock.validate(period)?;
        self.epsilons.validate()?;
        self.cascade.validate()?;
        self.schedule.validate()?;
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Named starting points: `default` and `april18`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "april18" => Ok(Self::april18()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (expected default or april18)"))),
        }
    }

    /// Eight hours of daylight. Coupling improves towards the late afternoon
    /// (roughly 60 to 130 kHz total detection rate) and the background rises
    /// at sunset. The shape is a piecewise-linear approximation, not a fit to
    /// measured data.
    pub fn april18() -> Self {
        let pt = |t_s: f64, coupling_mean: f64, background_rate_hz: f64| SchedulePoint {
            t_s,
            coupling_mean,
            background_rate_hz,
        };
        Self {
            run: RunConfig {
                duration_s: 8 * 3600,
                ..RunConfig::default()
            },
            output: OutputConfig {
                write_tags: false,
                write_alice: false,
                write_sifted: false,
            },
            schedule: Schedule {
                points: vec![
                    pt(0.0, 0.0248, 240.0),
                    pt(7200.0, 0.032, 230.0),
                    pt(14400.0, 0.040, 200.0),
                    pt(21600.0, 0.047, 210.0),
                    pt(25200.0, 0.052, 260.0),
                    pt(28800.0, 0.054, 400.0),
                ],
            },
            ..Self::default()
        }
    }
}
