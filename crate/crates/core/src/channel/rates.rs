//! Per-slot detection physics and the closed-form rate model built on it.

use serde::{Deserialize, Serialize};

use super::{channel_basis, DetectorBank, LinkModel, CH_XM, FWHM_PER_SIGMA};
use crate::encoder::{ideal_target, Encoder, JonesVector};
use crate::protocol::{Basis, Intensity, ProtocolParams};
use crate::security::RealCounts;
use crate::{Error, Result};

/// Fraction of a Gaussian arrival-time distribution inside a centred window.
pub fn signal_fraction(window_ps: f64, sigma_ps: f64) -> f64 {
    if sigma_ps == 0.0 {
        return 1.0;
    }
    libm::erf(window_ps / (2.0 * sigma_ps * std::f64::consts::SQRT_2))
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Antiderivative of the standard normal CDF.
fn normal_cdf_integral(x: f64) -> f64 {
    x * normal_cdf(x) + (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// [`signal_fraction`] for timestamps floored to `tdc_ps`, with the window
/// centred on the recorded timestamps. Slot phases are spread uniformly over
/// the TDC bins, so quantization adds uniform noise of width `tdc_ps`.
pub fn quantized_signal_fraction(window_ps: f64, sigma_ps: f64, tdc_ps: f64) -> f64 {
    let h = tdc_ps / 2.0;
    if h == 0.0 {
        return signal_fraction(window_ps, sigma_ps);
    }
    let a = window_ps / 2.0;
    if sigma_ps == 0.0 {
        return a.min(h) / h;
    }
    // mean over u in [-h, h] of P(|g - u| <= a), g ~ N(0, sigma^2)
    let mean_cdf = |c: f64| sigma_ps / (2.0 * h) * (normal_cdf_integral((c + h) / sigma_ps) - normal_cdf_integral((c - h) / sigma_ps));
    mean_cdf(a) - mean_cdf(-a)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowTradeoff {
    pub signal_fraction: f64,
    pub noise_fraction: f64,
}

/// Signal captured by a window around a Gaussian pulse, and the uniform noise
/// admitted relative to a reference window.
pub fn window_signal_noise_tradeoff(window_ps: f64, pulse_fwhm_ps: f64, reference_ps: f64) -> Result<WindowTradeoff> {
    if !(window_ps > 0.0 && reference_ps > 0.0 && pulse_fwhm_ps >= 0.0) {
        return Err(Error::invalid("window widths must be positive"));
    }
    Ok(WindowTradeoff {
        signal_fraction: signal_fraction(window_ps, pulse_fwhm_ps / FWHM_PER_SIGMA),
        noise_fraction: window_ps / reference_ps,
    })
}

/// Probability that a photon in `state`, routed to the basis of detector
/// `ch`, reaches that detector. Analyzer misalignment `delta` (Bloch angle)
/// swaps the two outputs of the basis with probability `sin^2(delta/2)`.
pub fn measurement_probability(state: &JonesVector, ch: u8, delta: f64) -> f64 {
    let basis = channel_basis(ch).expect("detector channel");
    let p = ideal_target(basis, ch & 1).overlap(state);
    let a = (delta / 2.0).sin().powi(2);
    (1.0 - a) * p + a * (1.0 - p)
}

/// Index of an Alice class: prepared state (Z0, Z1, X) times intensity.
pub fn class_index(basis: Basis, bit: u8, intensity: Intensity) -> usize {
    let s = match basis {
        Basis::Z => (bit & 1) as usize,
        Basis::X => 2,
    };
    s * 2 + (intensity == Intensity::Mu2) as usize
}

fn class_parts(c: usize) -> (Basis, u8, Intensity) {
    let (basis, bit) = match c / 2 {
        0 => (Basis::Z, 0),
        1 => (Basis::Z, 1),
        _ => (Basis::X, 0),
    };
    let k = if c % 2 == 0 { Intensity::Mu1 } else { Intensity::Mu2 };
    (basis, bit, k)
}

pub const N_CLASSES: usize = 6;

/// Quantities that fix the per-slot detection statistics for a link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkPhysics {
    /// Poisson mean at each detector, per unit coupling efficiency.
    pub lambda_unit: [[f64; 4]; N_CLASSES],
    pub class_prob: [f64; N_CLASSES],
    pub sigma_ps: f64,
    pub period_ps: f64,
    detectors: DetectorBank,
    p_z_bob: f64,
}

impl LinkPhysics {
    pub fn new(params: &ProtocolParams, encoder: &Encoder, link: &LinkModel, detectors: &DetectorBank) -> Result<Self> {
        params.validate_for_sampling()?;
        link.validate()?;
        let period_ps = params.slot_period_ps();
        detectors.validate_for_period(period_ps)?;
        let sigma_ps = detectors.signal_sigma_ps();
        // The loss budget refers to clicks inside the reference window.
        let f_ref = quantized_signal_fraction(detectors.reference_window_ps, sigma_ps, detectors.tdc_resolution_ps as f64);
        let fixed = link.fixed_transmission();
        let mut lambda_unit = [[0.0; 4]; N_CLASSES];
        let mut class_prob = [0.0; N_CLASSES];
        for (c, row) in lambda_unit.iter_mut().enumerate() {
            let (basis, bit, k) = class_parts(c);
            let bit_prob = if basis == Basis::Z { 0.5 } else { 1.0 };
            class_prob[c] = params.basis_prob(basis) * bit_prob * params.intensity_prob(k);
            let state = encoder.state(basis, bit);
            let mu = params.mu(basis, k) * encoder.intensity_factor(basis, bit);
            for (d, lam) in row.iter_mut().enumerate() {
                let b = channel_basis(d as u8).unwrap();
                *lam = mu * fixed * params.bob_basis_prob(b) * detectors.efficiency[d]
                    * measurement_probability(state, d as u8, detectors.misalignment(b))
                    / f_ref;
            }
        }
        Ok(Self {
            lambda_unit,
            class_prob,
            sigma_ps,
            period_ps,
            detectors: *detectors,
            p_z_bob: params.p_z_bob,
        })
    }

    pub fn detectors(&self) -> &DetectorBank {
        &self.detectors
    }

    /// Raw (all-time) noise rate per detector for a given in-window
    /// background figure.
    pub fn noise_raw_hz(&self, background_rate_hz: f64) -> Result<[f64; 4]> {
        let det = &self.detectors;
        let duty = det.reference_window_ps / self.period_ps;
        let dark_in_window: f64 = det.dark_rate_hz.iter().sum::<f64>() * duty;
        let sky_in_window = background_rate_hz - dark_in_window;
        if sky_in_window < -1e-9 * background_rate_hz.max(1.0) {
            return Err(Error::invalid(format!(
                "background {background_rate_hz} Hz is below the in-window dark count rate {dark_in_window} Hz"
            )));
        }
        let sky_raw = sky_in_window.max(0.0) / duty;
        // Unpolarized light splits evenly within a basis.
        let share: Vec<f64> = (0..4u8)
            .map(|d| {
                let b = channel_basis(d).unwrap();
                let pb = if b == Basis::Z { self.p_z_bob } else { 1.0 - self.p_z_bob };
                pb * 0.5 * det.efficiency[d as usize]
            })
            .collect();
        let total: f64 = share.iter().sum();
        let mut out = [0.0; 4];
        for d in 0..4 {
            out[d] = det.dark_rate_hz[d] + if total > 0.0 { sky_raw * share[d] / total } else { 0.0 };
        }
        Ok(out)
    }
}

/// Closed-form expectations for a link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedRates {
    /// In-window detections with signal renormalized by detector efficiency,
    /// plus raw noise.
    pub tdr_hz: f64,
    pub signal_hz: f64,
    pub noise_hz: f64,
    pub snr: f64,
    pub qber_z: f64,
    pub qber_x: f64,
    /// Raw sifted Z-basis bits per second (after balancing).
    pub sifted_rate_bps: f64,
    /// `tdr * P(sent Z | detected) * p_z_bob`.
    pub sifted_rate_renormalized_bps: f64,
    /// Per-second sifted detections and errors by basis and intensity.
    pub decoy: RealCounts,
}

/// Gauss-normal expectation on a fine grid; exact for sigma = 0.
fn coupling_expectation(link: &LinkModel, mut f: impl FnMut(f64) -> f64) -> f64 {
    let c = &link.coupling;
    if c.lognormal_sigma == 0.0 {
        return f(c.mean_efficiency);
    }
    const H: f64 = 0.02;
    const N: i32 = 450;
    let (mut acc, mut wsum) = (0.0, 0.0);
    for i in -N..=N {
        let x = i as f64 * H;
        let w = (-0.5 * x * x).exp();
        acc += w * f(c.efficiency(c.mean_efficiency, x));
        wsum += w;
    }
    acc / wsum
}

pub fn expected_rates(
    params: &ProtocolParams,
    encoder: &Encoder,
    link: &LinkModel,
    detectors: &DetectorBank,
    window_ps: f64,
) -> Result<ExpectedRates> {
    if !(window_ps > 0.0) {
        return Err(Error::invalid("window must be positive"));
    }
    let mut det = *detectors;
    det.window_ps = window_ps;
    let phys = LinkPhysics::new(params, encoder, link, &det)?;
    let clock = params.clock_rate_hz;
    let f_w = quantized_signal_fraction(window_ps, phys.sigma_ps, det.tdc_resolution_ps as f64);
    let noise_in = phys.noise_raw_hz(link.background_rate_hz)?.map(|r| r * window_ps / phys.period_ps);
    let keep: [f64; 4] = std::array::from_fn(|d| det.basis_min_efficiency(d as u8) / det.efficiency[d]);

    // signal[c][d]: in-window click rate of detector d from class c
    let mut signal = [[0.0; 4]; N_CLASSES];
    for c in 0..N_CLASSES {
        for d in 0..4 {
            let lam = phys.lambda_unit[c][d];
            signal[c][d] = clock * phys.class_prob[c] * f_w * coupling_expectation(link, |eta| -(-lam * eta).exp_m1());
        }
    }

    let signal_renorm: f64 = (0..4).map(|d| (0..N_CLASSES).map(|c| signal[c][d]).sum::<f64>() / det.efficiency[d]).sum();
    let noise: f64 = noise_in.iter().sum();

    let mut decoy = RealCounts { duration_s: 1.0, ..RealCounts::default() };
    for c in 0..N_CLASSES {
        let (basis, bit, k) = class_parts(c);
        let (lo, hi) = if basis == Basis::Z { (0, 2) } else { (2, 4) };
        for d in lo..hi {
            let wrong = match basis {
                Basis::Z => (d as u8 & 1) != bit,
                Basis::X => d as u8 == CH_XM,
            };
            let s = keep[d] * signal[c][d];
            // noise landing in a slot of this class
            let nz = keep[d] * noise_in[d] * phys.class_prob[c];
            decoy.add(basis, k, s + nz, if wrong { s + nz } else { 0.0 });
        }
    }

    let qz = decoy.m(Basis::Z) / decoy.n(Basis::Z);
    let qx = decoy.m(Basis::X) / decoy.n(Basis::X);
    let tdr = signal_renorm + noise;
    let z_share = (params.basis_prob(Basis::Z)
        * (params.p_mu1 * params.mu1_z + (1.0 - params.p_mu1) * params.mu2_z))
        / crate::protocol::mean_photon_number(params);
    Ok(ExpectedRates {
        tdr_hz: tdr,
        signal_hz: signal_renorm,
        noise_hz: noise,
        snr: if noise > 0.0 { signal_renorm / noise } else { f64::INFINITY },
        qber_z: if qz.is_finite() { qz } else { 0.0 },
        qber_x: if qx.is_finite() { qx } else { 0.0 },
        sifted_rate_bps: decoy.n(Basis::Z),
        sifted_rate_renormalized_bps: tdr * z_share * params.p_z_bob,
        decoy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderImperfection;
    use crate::protocol::mean_photon_number;
    use proptest::prelude::*;

    fn field_setup() -> (ProtocolParams, Encoder, LinkModel, DetectorBank) {
        (ProtocolParams::default(), Encoder::ideal(), LinkModel::default(), DetectorBank::default())
    }

    #[test]
    fn tdr_matches_product_formula() {
        let (p, e, l, d) = field_setup();
        let r = expected_rates(&p, &e, &l, &d, 1000.0).unwrap();
        let oracle = 50e6 * 0.4839 * 10f64.powf(-2.4);
        assert!((r.tdr_hz - oracle).abs() / oracle < 0.01, "{} vs {oracle}", r.tdr_hz);
        assert!((85e3..=110e3).contains(&r.tdr_hz));
    }

    #[test]
    fn snr_near_400() {
        let (p, e, l, d) = field_setup();
        let r = expected_rates(&p, &e, &l, &d, 1000.0).unwrap();
        assert!((r.noise_hz - 240.0).abs() < 1e-9);
        assert!((340.0..=460.0).contains(&r.snr), "{}", r.snr);
    }

    #[test]
    fn noiseless_limit() {
        let (p, e, mut l, mut d) = field_setup();
        l.background_rate_hz = 0.0;
        d.dark_rate_hz = [0.0; 4];
        let r = expected_rates(&p, &e, &l, &d, 1000.0).unwrap();
        assert_eq!(r.snr, f64::INFINITY);
        assert_eq!(r.qber_z, 0.0);
        assert_eq!(r.qber_x, 0.0);
        // weak enough that click probabilities are linear in the intensity
        l.coupling.mean_efficiency = 1e-7;
        let q = 0.004;
        let enc = Encoder::new(EncoderImperfection::for_intrinsic_qber(q).unwrap()).unwrap();
        let r = expected_rates(&p, &enc, &l, &d, 1000.0).unwrap();
        assert!((r.qber_z - q).abs() < 1e-8 * q, "{}", r.qber_z);
        assert!((r.qber_x - q).abs() < 1e-8 * q, "{}", r.qber_x);
    }

    #[test]
    fn sifted_rate_product_formula() {
        let (p, e, l, d) = field_setup();
        let r = expected_rates(&p, &e, &l, &d, 1000.0).unwrap();
        let tdr = 50e6 * mean_photon_number(&p) * 10f64.powf(-2.4);
        let z_share = 0.9 * (0.7 * 0.56 + 0.3 * 0.27) / 0.4839;
        let oracle = tdr * z_share * 0.9;
        assert!((r.sifted_rate_renormalized_bps - oracle).abs() / oracle < 0.01);
        assert!((r.sifted_rate_renormalized_bps - 76e3).abs() < 1.5e3);
        assert!((50e3..=150e3).contains(&r.sifted_rate_bps));
    }

    #[test]
    fn quantized_fraction_matches_averaged_shifts() {
        // midpoint rule over the bin offset, each term a shifted Gaussian window
        let oracle = |w: f64, sigma: f64, tdc: f64| {
            let n = 20_000;
            (0..n)
                .map(|i| {
                    let u = -tdc / 2.0 + tdc * (i as f64 + 0.5) / n as f64;
                    let z = |x: f64| 0.5 * libm::erfc(-x / (sigma * std::f64::consts::SQRT_2));
                    z(w / 2.0 - u) - z(-w / 2.0 - u)
                })
                .sum::<f64>()
                / n as f64
        };
        for (w, sigma, tdc) in [(500.0, 214.4, 81.0), (1000.0, 214.4, 81.0), (300.0, 40.0, 250.0), (50.0, 5.0, 81.0)] {
            let f = quantized_signal_fraction(w, sigma, tdc);
            assert!((f - oracle(w, sigma, tdc)).abs() < 1e-7, "{w} {sigma} {tdc}: {f}");
        }
        assert_eq!(quantized_signal_fraction(500.0, 214.4, 0.0), signal_fraction(500.0, 214.4));
        assert!((quantized_signal_fraction(500.0, 214.4, 1e-3) - signal_fraction(500.0, 214.4)).abs() < 1e-9);
        assert_eq!(quantized_signal_fraction(40.0, 0.0, 81.0), 40.0 / 81.0);
        assert_eq!(quantized_signal_fraction(100.0, 0.0, 81.0), 1.0);
    }

    #[test]
    fn window_tradeoff() {
        let t = window_signal_noise_tradeoff(500.0, 500.0, 1000.0).unwrap();
        assert!((t.signal_fraction - 0.761).abs() < 1e-3, "{}", t.signal_fraction);
        assert_eq!(t.noise_fraction, 0.5);
        let t = window_signal_noise_tradeoff(1e6, 500.0, 1000.0).unwrap();
        assert!((t.signal_fraction - 1.0).abs() < 1e-15);
        // erfinv(0.5) = 0.476936...
        let w = 500.0 / FWHM_PER_SIGMA * 2.0 * std::f64::consts::SQRT_2 * 0.476_936_276_204_469_9;
        let t = window_signal_noise_tradeoff(w, 500.0, 1000.0).unwrap();
        assert!((t.signal_fraction - 0.5).abs() < 1e-12);
        assert!(window_signal_noise_tradeoff(0.0, 500.0, 1000.0).is_err());
    }

    #[test]
    fn noise_below_darks_rejected() {
        let (p, e, mut l, d) = field_setup();
        l.background_rate_hz = 10.0;
        assert!(expected_rates(&p, &e, &l, &d, 1000.0).is_err());
    }

    proptest! {
        #[test]
        fn povm_sums_to_one(theta in 0.0..std::f64::consts::PI, phi in -3.1..3.1f64, delta in -1.0..1.0f64) {
            let psi = crate::encoder::encode_bloch(theta, phi).unwrap();
            for base in [0u8, 2] {
                let s = measurement_probability(&psi, base, delta) + measurement_probability(&psi, base + 1, delta);
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn tdr_decreases_with_loss(a in 0.0..20.0f64, extra in 0.01..5.0f64) {
            let (p, e, mut l, d) = field_setup();
            l.extra_loss_db = a;
            let r1 = expected_rates(&p, &e, &l, &d, 1000.0).unwrap();
            l.extra_loss_db = a + extra;
            let r2 = expected_rates(&p, &e, &l, &d, 1000.0).unwrap();
            prop_assert!(r2.tdr_hz < r1.tdr_hz);
        }

        #[test]
        fn wider_window_never_loses_signal(w in 1.0..20_000.0f64, dw in 0.0..1000.0f64) {
            let a = window_signal_noise_tradeoff(w, 500.0, 1000.0).unwrap();
            let b = window_signal_noise_tradeoff(w + dw, 500.0, 1000.0).unwrap();
            prop_assert!(b.signal_fraction >= a.signal_fraction);
        }
    }
}
