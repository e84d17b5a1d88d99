//! Closed-form pipeline: expected rates, decoy bounds and key length for a
//! run that stops after a target number of sifted Z bits.

use serde::{Deserialize, Serialize};

use crate::channel::{expected_rates, DetectorBank, ExpectedRates, LinkModel};
use crate::encoder::{Encoder, EncoderImperfection};
use crate::error::Result;
use crate::protocol::{Basis, ProtocolParams};
use crate::security::{analyze_counts, KeyBudget, Mode, RealCounts, SecurityEpsilons};

/// Everything except the protocol parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub encoder: EncoderImperfection,
    pub link: LinkModel,
    pub detectors: DetectorBank,
    pub epsilons: SecurityEpsilons,
    pub f_ec: f64,
    pub n_z_target: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            encoder: EncoderImperfection::ideal(),
            link: LinkModel::default(),
            detectors: DetectorBank::default(),
            epsilons: SecurityEpsilons::default(),
            f_ec: 1.06,
            n_z_target: 1e8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticPoint {
    pub rates: ExpectedRates,
    /// Acquisition time needed to reach the target; infinite when nothing is sifted.
    pub duration_s: f64,
    pub counts: RealCounts,
    pub finite: KeyBudget,
    pub asymptotic: KeyBudget,
    pub skr_f: f64,
    pub skr_inf: f64,
}

/// Expected outcome of a run at `params` that stops after
/// `scenario.n_z_target` sifted Z bits.
pub fn evaluate(params: &ProtocolParams, scenario: &Scenario) -> Result<AnalyticPoint> {
    let encoder = Encoder::new(scenario.encoder)?;
    evaluate_with(params, &encoder, scenario)
}

pub fn evaluate_with(params: &ProtocolParams, encoder: &Encoder, scenario: &Scenario) -> Result<AnalyticPoint> {
    let rates = expected_rates(params, encoder, &scenario.link, &scenario.detectors, scenario.detectors.window_ps)?;
    let per_s = rates.decoy.n(Basis::Z);
    if !(per_s > 0.0) || !(scenario.n_z_target > 0.0) {
        return Ok(AnalyticPoint {
            rates,
            duration_s: f64::INFINITY,
            counts: RealCounts::default(),
            finite: KeyBudget::default(),
            asymptotic: KeyBudget::default(),
            skr_f: 0.0,
            skr_inf: 0.0,
        });
    }
    let duration_s = scenario.n_z_target / per_s;
    let counts = rates.decoy.scaled(duration_s);
    let finite = analyze_counts(&counts, params, scenario.f_ec, &scenario.epsilons, Mode::Finite)?;
    let asymptotic = analyze_counts(&counts, params, scenario.f_ec, &scenario.epsilons, Mode::Asymptotic)?;
    Ok(AnalyticPoint {
        rates,
        duration_s,
        counts,
        finite,
        asymptotic,
        skr_f: finite.l as f64 / duration_s,
        skr_inf: asymptotic.l as f64 / duration_s,
    })
}
