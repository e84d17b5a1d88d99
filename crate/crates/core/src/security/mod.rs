//! Finite-key security analysis of the one-decoy protocol.
//!
//! Bounds use per-basis intensities. Every concentration inequality is run at
//! `eps_1 = eps_sec / 19`; counts are handled as reals throughout so the same
//! code serves measured tallies and expected (analytic) counts.

mod optimize;

pub use optimize::{optimize_operating_point, OptimizeResult, SearchSpace};

use serde::{Deserialize, Serialize};

use crate::postproc::binary_entropy;
use crate::protocol::{Basis, Intensity, ProtocolParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecurityEpsilons {
    pub eps_sec: f64,
    pub eps_cor: f64,
}

impl Default for SecurityEpsilons {
    fn default() -> Self {
        Self {
            eps_sec: 1e-10,
            eps_cor: 1e-12,
        }
    }
}

impl SecurityEpsilons {
    pub fn validate(&self) -> Result<()> {
        for (name, e) in [("eps_sec", self.eps_sec), ("eps_cor", self.eps_cor)] {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::invalid(format!("{name} = {e} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    /// Failure probability allotted to each concentration inequality.
    pub fn eps_1(&self) -> f64 {
        self.eps_sec / 19.0
    }
}

/// Whether finite-statistics corrections are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Finite,
    Asymptotic,
}

/// Sifted detections (`n`) and errors (`m`) per basis and intensity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoyCounts {
    pub n_z_mu1: u64,
    pub n_z_mu2: u64,
    pub m_z_mu1: u64,
    pub m_z_mu2: u64,
    pub n_x_mu1: u64,
    pub n_x_mu2: u64,
    pub m_x_mu1: u64,
    pub m_x_mu2: u64,
    pub duration_s: f64,
}

impl DecoyCounts {
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            (self.n_z_mu1, self.m_z_mu1),
            (self.n_z_mu2, self.m_z_mu2),
            (self.n_x_mu1, self.m_x_mu1),
            (self.n_x_mu2, self.m_x_mu2),
        ];
        if pairs.iter().any(|(n, m)| m > n) {
            return Err(Error::Integrity("error count exceeds detection count".into()));
        }
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(Error::invalid("duration must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn record(&mut self, basis: Basis, intensity: Intensity, error: bool) {
        let (n, m) = match (basis, intensity) {
            (Basis::Z, Intensity::Mu1) => (&mut self.n_z_mu1, &mut self.m_z_mu1),
            (Basis::Z, Intensity::Mu2) => (&mut self.n_z_mu2, &mut self.m_z_mu2),
            (Basis::X, Intensity::Mu1) => (&mut self.n_x_mu1, &mut self.m_x_mu1),
            (Basis::X, Intensity::Mu2) => (&mut self.n_x_mu2, &mut self.m_x_mu2),
        };
        *n += 1;
        *m += error as u64;
    }

    pub fn merge(&mut self, other: &DecoyCounts) {
        self.n_z_mu1 += other.n_z_mu1;
        self.n_z_mu2 += other.n_z_mu2;
        self.m_z_mu1 += other.m_z_mu1;
        self.m_z_mu2 += other.m_z_mu2;
        self.n_x_mu1 += other.n_x_mu1;
        self.n_x_mu2 += other.n_x_mu2;
        self.m_x_mu1 += other.m_x_mu1;
        self.m_x_mu2 += other.m_x_mu2;
        self.duration_s += other.duration_s;
    }

    pub fn n_z(&self) -> u64 {
        self.n_z_mu1 + self.n_z_mu2
    }

    pub fn m_z(&self) -> u64 {
        self.m_z_mu1 + self.m_z_mu2
    }

    pub fn n_x(&self) -> u64 {
        self.n_x_mu1 + self.n_x_mu2
    }

    pub fn m_x(&self) -> u64 {
        self.m_x_mu1 + self.m_x_mu2
    }

    pub fn qber_z(&self) -> f64 {
        ratio(self.m_z(), self.n_z())
    }

    pub fn qber_x(&self) -> f64 {
        ratio(self.m_x(), self.n_x())
    }
}

fn ratio(m: u64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        m as f64 / n as f64
    }
}

/// [`DecoyCounts`] over the reals, for expected counts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RealCounts {
    pub n_z_mu1: f64,
    pub n_z_mu2: f64,
    pub m_z_mu1: f64,
    pub m_z_mu2: f64,
    pub n_x_mu1: f64,
    pub n_x_mu2: f64,
    pub m_x_mu1: f64,
    pub m_x_mu2: f64,
    pub duration_s: f64,
}

impl From<&DecoyCounts> for RealCounts {
    fn from(c: &DecoyCounts) -> Self {
        Self {
            n_z_mu1: c.n_z_mu1 as f64,
            n_z_mu2: c.n_z_mu2 as f64,
            m_z_mu1: c.m_z_mu1 as f64,
            m_z_mu2: c.m_z_mu2 as f64,
            n_x_mu1: c.n_x_mu1 as f64,
            n_x_mu2: c.n_x_mu2 as f64,
            m_x_mu1: c.m_x_mu1 as f64,
            m_x_mu2: c.m_x_mu2 as f64,
            duration_s: c.duration_s,
        }
    }
}

impl RealCounts {
    pub fn add(&mut self, basis: Basis, intensity: Intensity, n: f64, m: f64) {
        let (pn, pm) = match (basis, intensity) {
            (Basis::Z, Intensity::Mu1) => (&mut self.n_z_mu1, &mut self.m_z_mu1),
            (Basis::Z, Intensity::Mu2) => (&mut self.n_z_mu2, &mut self.m_z_mu2),
            (Basis::X, Intensity::Mu1) => (&mut self.n_x_mu1, &mut self.m_x_mu1),
            (Basis::X, Intensity::Mu2) => (&mut self.n_x_mu2, &mut self.m_x_mu2),
        };
        *pn += n;
        *pm += m;
    }

    pub fn get(&self, basis: Basis, intensity: Intensity) -> (f64, f64) {
        match (basis, intensity) {
            (Basis::Z, Intensity::Mu1) => (self.n_z_mu1, self.m_z_mu1),
            (Basis::Z, Intensity::Mu2) => (self.n_z_mu2, self.m_z_mu2),
            (Basis::X, Intensity::Mu1) => (self.n_x_mu1, self.m_x_mu1),
            (Basis::X, Intensity::Mu2) => (self.n_x_mu2, self.m_x_mu2),
        }
    }

    pub fn n(&self, basis: Basis) -> f64 {
        self.get(basis, Intensity::Mu1).0 + self.get(basis, Intensity::Mu2).0
    }

    pub fn m(&self, basis: Basis) -> f64 {
        self.get(basis, Intensity::Mu1).1 + self.get(basis, Intensity::Mu2).1
    }

    /// All counts multiplied by `k`, duration included.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            n_z_mu1: self.n_z_mu1 * k,
            n_z_mu2: self.n_z_mu2 * k,
            m_z_mu1: self.m_z_mu1 * k,
            m_z_mu2: self.m_z_mu2 * k,
            n_x_mu1: self.n_x_mu1 * k,
            n_x_mu2: self.n_x_mu2 * k,
            m_x_mu1: self.m_x_mu1 * k,
            m_x_mu2: self.m_x_mu2 * k,
            duration_s: self.duration_s * k,
        }
    }
}

/// Probability that a pulse from the two-intensity mixture holds `n` photons.
pub fn tau_n(n: u32, mu1: f64, mu2: f64, p_mu1: f64) -> f64 {
    let term = |mu: f64| {
        if mu == 0.0 {
            return if n == 0 { 1.0 } else { 0.0 };
        }
        // e^-mu mu^n / n! in log space
        let ln_fact: f64 = (1..=n).map(|k| (k as f64).ln()).sum();
        (-mu + n as f64 * mu.ln() - ln_fact).exp()
    };
    p_mu1 * term(mu1) + (1.0 - p_mu1) * term(mu2)
}

/// Hoeffding deviation `sqrt(n/2 ln(1/eps))`.
pub fn hoeffding_delta(n: f64, eps: f64) -> f64 {
    if n <= 0.0 {
        return 0.0;
    }
    (n / 2.0 * (1.0 / eps).ln()).sqrt()
}

/// `gamma(a, b, c, d)`, the finite-size correction to the phase error rate;
/// zero wherever its argument degenerates.
pub fn gamma(a: f64, b: f64, c: f64, d: f64) -> f64 {
    if !(c > 0.0 && d > 0.0 && b > 0.0 && b < 1.0) {
        return 0.0;
    }
    let bb = (1.0 - b) * b;
    let log_arg = (c + d) / (c * d * bb) * (21.0 / a).powi(2);
    if log_arg <= 1.0 {
        return 0.0;
    }
    let v = (c + d) * bb / (c * d * std::f64::consts::LN_2) * log_arg.log2();
    v.max(0.0).sqrt()
}

/// The chain of bounds leading to a secret key length.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KeyBudget {
    pub s_z0_low: f64,
    pub s_z0_up: f64,
    pub s_z1_low: f64,
    pub s_x1_low: f64,
    pub v_x1_up: f64,
    pub phi_z_up: f64,
    pub lambda_ec: f64,
    pub l: u64,
}

struct BasisBounds {
    s0_low: f64,
    s0_up: f64,
    s1_low: f64,
}

fn basis_bounds(counts: &RealCounts, params: &ProtocolParams, basis: Basis, eps1: f64, mode: Mode) -> BasisBounds {
    let (mu1, mu2) = params.intensities(basis);
    let (p1, p2) = (params.p_mu1, 1.0 - params.p_mu1);
    let (n1, _) = counts.get(basis, Intensity::Mu1);
    let (n2, _) = counts.get(basis, Intensity::Mu2);
    let (n_b, m_b) = (counts.n(basis), counts.m(basis));
    let delta = |x: f64| match mode {
        Mode::Finite => hoeffding_delta(x, eps1),
        Mode::Asymptotic => 0.0,
    };
    let d_n = delta(n_b);
    let n1_plus = mu1.exp() / p1 * (n1 + d_n);
    let n2_minus = mu2.exp() / p2 * (n2 - d_n);
    let tau0 = tau_n(0, mu1, mu2, p1);
    let tau1 = tau_n(1, mu1, mu2, p1);

    let s0_low = (tau0 * (mu1 * n2_minus - mu2 * n1_plus) / (mu1 - mu2)).clamp(0.0, n_b);
    let s0_up = (2.0 * (m_b + delta(m_b))).clamp(0.0, n_b);
    let s1_low = (tau1 * mu1
        * (n2_minus - (mu2 * mu2 / (mu1 * mu1)) * n1_plus - ((mu1 * mu1 - mu2 * mu2) / (mu1 * mu1)) * (s0_up / tau0))
        / (mu2 * (mu1 - mu2)))
        .clamp(0.0, n_b);
    BasisBounds { s0_low, s0_up, s1_low }
}

fn check_intensities(params: &ProtocolParams) -> Result<()> {
    for b in [Basis::Z, Basis::X] {
        let (mu1, mu2) = params.intensities(b);
        if !(mu1 > mu2 && mu2 > 0.0) {
            return Err(Error::invalid(format!("intensities must satisfy mu1 > mu2 > 0 (got {mu1}, {mu2})")));
        }
    }
    if !(params.p_mu1 > 0.0 && params.p_mu1 < 1.0) {
        return Err(Error::invalid("p_mu1 must lie in (0, 1)"));
    }
    Ok(())
}

/// Vacuum, single-photon and phase-error bounds. `lambda_ec` and `l` are
/// left at zero.
pub fn decoy_bounds(counts: &RealCounts, params: &ProtocolParams, eps: &SecurityEpsilons, mode: Mode) -> Result<KeyBudget> {
    check_intensities(params)?;
    eps.validate()?;
    let eps1 = eps.eps_1();
    let z = basis_bounds(counts, params, Basis::Z, eps1, mode);
    let x = basis_bounds(counts, params, Basis::X, eps1, mode);

    let (mu1, mu2) = params.intensities(Basis::X);
    let (p1, p2) = (params.p_mu1, 1.0 - params.p_mu1);
    let (_, mx1) = counts.get(Basis::X, Intensity::Mu1);
    let (_, mx2) = counts.get(Basis::X, Intensity::Mu2);
    let m_x = counts.m(Basis::X);
    let d_m = match mode {
        Mode::Finite => hoeffding_delta(m_x, eps1),
        Mode::Asymptotic => 0.0,
    };
    let tau1 = tau_n(1, mu1, mu2, p1);
    let m1_plus = mu1.exp() / p1 * (mx1 + d_m);
    let m2_minus = mu2.exp() / p2 * (mx2 - d_m);
    let v_x1_up = (tau1 * (m1_plus - m2_minus) / (mu1 - mu2)).clamp(0.0, m_x);

    let phi_z_up = if x.s1_low > 0.0 && z.s1_low > 0.0 {
        let b = v_x1_up / x.s1_low;
        let g = match mode {
            Mode::Finite => gamma(eps.eps_sec, b, z.s1_low, x.s1_low),
            Mode::Asymptotic => 0.0,
        };
        (b + g).clamp(0.0, 0.5)
    } else {
        0.5
    };

    Ok(KeyBudget {
        s_z0_low: z.s0_low,
        s_z0_up: z.s0_up,
        s_z1_low: z.s1_low,
        s_x1_low: x.s1_low,
        v_x1_up,
        phi_z_up,
        lambda_ec: 0.0,
        l: 0,
    })
}

/// `f_ec n_Z h(Q_Z)`.
pub fn ec_leakage(n_z: f64, q_z: f64, f_ec: f64) -> Result<f64> {
    Ok(f_ec * n_z * binary_entropy(q_z.clamp(0.0, 1.0))?)
}

/// Key length for a given error-correction leakage; fills `lambda_ec` and `l`.
pub fn key_length_with_leakage(budget: &KeyBudget, lambda_ec: f64, eps: &SecurityEpsilons, mode: Mode) -> Result<KeyBudget> {
    eps.validate()?;
    let h_phi = binary_entropy(budget.phi_z_up.clamp(0.0, 0.5))?;
    let mut rhs = budget.s_z0_low + budget.s_z1_low * (1.0 - h_phi) - lambda_ec;
    if mode == Mode::Finite {
        rhs -= 6.0 * (19.0 / eps.eps_sec).log2() + (2.0 / eps.eps_cor).log2();
    }
    Ok(KeyBudget {
        lambda_ec,
        l: if rhs > 0.0 { rhs.floor() as u64 } else { 0 },
        ..*budget
    })
}

/// Secret key length with `lambda_ec = f_ec n_Z h(q_z)`.
pub fn key_length(
    budget: &KeyBudget,
    counts: &RealCounts,
    q_z: f64,
    f_ec: f64,
    eps: &SecurityEpsilons,
    mode: Mode,
) -> Result<KeyBudget> {
    let lambda = ec_leakage(counts.n(Basis::Z), q_z, f_ec)?;
    key_length_with_leakage(budget, lambda, eps, mode)
}

/// Full chain from counts to a key budget.
pub fn analyze_counts(
    counts: &RealCounts,
    params: &ProtocolParams,
    f_ec: f64,
    eps: &SecurityEpsilons,
    mode: Mode,
) -> Result<KeyBudget> {
    let b = decoy_bounds(counts, params, eps, mode)?;
    let q = if counts.n(Basis::Z) > 0.0 { counts.m(Basis::Z) / counts.n(Basis::Z) } else { 0.0 };
    key_length(&b, counts, q, f_ec, eps, mode)
}

/// Bits per second.
pub fn skr(budget: &KeyBudget, duration_s: f64) -> Result<f64> {
    if !(duration_s > 0.0) {
        return Err(Error::invalid("duration must be positive"));
    }
    Ok(budget.l as f64 / duration_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_counts(scale: f64) -> RealCounts {
        RealCounts {
            n_z_mu1: 0.62e8 * scale,
            n_z_mu2: 0.15e8 * scale,
            m_z_mu1: 0.62e8 * 0.005 * scale,
            m_z_mu2: 0.15e8 * 0.006 * scale,
            n_x_mu1: 1.1e6 * scale,
            n_x_mu2: 0.22e6 * scale,
            m_x_mu1: 1.1e6 * 0.0025 * scale,
            m_x_mu2: 0.22e6 * 0.003 * scale,
            duration_s: 1500.0 * scale,
        }
    }

    #[test]
    fn tau_examples() {
        let t0 = tau_n(0, 0.56, 0.27, 0.7);
        assert!((t0 - (0.7 * (-0.56f64).exp() + 0.3 * (-0.27f64).exp())).abs() < 1e-15);
        assert!((t0 - 0.6289).abs() < 1e-4);
        assert_eq!(tau_n(0, 0.0, 0.0, 1.0), 1.0);
        assert_eq!(tau_n(3, 0.0, 0.0, 1.0), 0.0);
        let s: f64 = (0..=50).map(|n| tau_n(n, 0.56, 0.27, 0.7)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hoeffding_examples() {
        assert_eq!(hoeffding_delta(1e8, 1.0), 0.0);
        assert_eq!(hoeffding_delta(0.0, 1e-3), 0.0);
        let d = hoeffding_delta(1e8, 1e-10 / 19.0);
        let oracle = (1e8f64 / 2.0 * (19e10f64).ln()).sqrt();
        assert!((d - oracle).abs() < 1e-9);
        assert!((d - 36_034.0).abs() < 1.0, "{d}");
    }

    #[test]
    fn zero_detections_are_vacuous() {
        let b = decoy_bounds(&RealCounts::default(), &ProtocolParams::default(), &SecurityEpsilons::default(), Mode::Finite).unwrap();
        assert_eq!(b.s_z0_low, 0.0);
        assert_eq!(b.s_z0_up, 0.0);
        assert_eq!(b.s_z1_low, 0.0);
        assert_eq!(b.v_x1_up, 0.0);
        assert_eq!(b.phi_z_up, 0.5);
        let k = key_length(&b, &RealCounts::default(), 0.0, 1.06, &SecurityEpsilons::default(), Mode::Finite).unwrap();
        assert_eq!(k.l, 0);
    }

    #[test]
    fn rejects_inverted_intensities() {
        let p = ProtocolParams { mu1_x: 0.2, mu2_x: 0.3, ..Default::default() };
        assert!(decoy_bounds(&sample_counts(1.0), &p, &SecurityEpsilons::default(), Mode::Finite).is_err());
    }

    #[test]
    fn doubling_counts_increases_key() {
        let p = ProtocolParams::default();
        let e = SecurityEpsilons::default();
        let a = analyze_counts(&sample_counts(1.0), &p, 1.06, &e, Mode::Finite).unwrap();
        let b = analyze_counts(&sample_counts(2.0), &p, 1.06, &e, Mode::Finite).unwrap();
        assert!(a.l > 0);
        assert!(b.l as f64 > 2.0 * a.l as f64);
    }

    #[test]
    fn asymptotic_dominates_finite() {
        let p = ProtocolParams::default();
        let e = SecurityEpsilons::default();
        let c = sample_counts(0.3);
        let f = analyze_counts(&c, &p, 1.06, &e, Mode::Finite).unwrap();
        let a = analyze_counts(&c, &p, 1.06, &e, Mode::Asymptotic).unwrap();
        assert!(a.l >= f.l);
        assert!(a.s_z1_low >= f.s_z1_low);
        assert!(a.phi_z_up <= f.phi_z_up);
    }

    #[test]
    fn skr_rejects_zero_duration() {
        assert!(skr(&KeyBudget::default(), 0.0).is_err());
        let b = KeyBudget { l: 3000, ..Default::default() };
        assert_eq!(skr(&b, 1.5).unwrap(), 2000.0);
    }

    proptest! {
        #[test]
        fn tau_nonnegative_and_normalized(mu1 in 0.01..2.0f64, frac in 0.01..0.99f64, p in 0.01..0.99f64) {
            let mu2 = mu1 * frac;
            let mut s = 0.0;
            for n in 0..80 {
                let t = tau_n(n, mu1, mu2, p);
                prop_assert!(t >= 0.0);
                s += t;
            }
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn outputs_are_clamped(
            n in proptest::array::uniform8(0.0..1e7f64),
            mu1 in 0.2..1.0f64, frac in 0.1..0.9f64,
            p1 in 0.1..0.9f64,
        ) {
            let c = RealCounts {
                n_z_mu1: n[0], n_z_mu2: n[1], m_z_mu1: n[2].min(n[0]), m_z_mu2: n[3].min(n[1]),
                n_x_mu1: n[4], n_x_mu2: n[5], m_x_mu1: n[6].min(n[4]), m_x_mu2: n[7].min(n[5]),
                duration_s: 1.0,
            };
            let p = ProtocolParams { mu1_z: mu1, mu2_z: mu1 * frac, mu1_x: mu1, mu2_x: mu1 * frac, p_mu1: p1, ..Default::default() };
            for mode in [Mode::Finite, Mode::Asymptotic] {
                let b = analyze_counts(&c, &p, 1.1, &SecurityEpsilons::default(), mode).unwrap();
                for v in [b.s_z0_low, b.s_z0_up, b.s_z1_low, b.s_x1_low, b.v_x1_up, b.lambda_ec] {
                    prop_assert!(v >= 0.0 && v.is_finite());
                }
                prop_assert!((0.0..=0.5).contains(&b.phi_z_up));
            }
            let f = analyze_counts(&c, &p, 1.1, &SecurityEpsilons::default(), Mode::Finite).unwrap();
            let a = analyze_counts(&c, &p, 1.1, &SecurityEpsilons::default(), Mode::Asymptotic).unwrap();
            prop_assert!(a.l >= f.l);
        }

        #[test]
        fn key_length_monotone(q1 in 0.0..0.11f64, dq in 0.0..0.05f64, phi1 in 0.0..0.4f64, dphi in 0.0..0.1f64) {
            let c = sample_counts(1.0);
            let e = SecurityEpsilons::default();
            let base = KeyBudget { s_z0_low: 1e5, s_z1_low: 4e7, phi_z_up: phi1, ..Default::default() };
            let a = key_length(&base, &c, q1, 1.06, &e, Mode::Finite).unwrap();
            let b = key_length(&base, &c, q1 + dq, 1.06, &e, Mode::Finite).unwrap();
            prop_assert!(b.l <= a.l);
            let worse = KeyBudget { phi_z_up: (phi1 + dphi).min(0.5), ..base };
            let d = key_length(&worse, &c, q1, 1.06, &e, Mode::Finite).unwrap();
            prop_assert!(d.l <= a.l);
        }
    }
}
