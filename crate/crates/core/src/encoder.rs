//! Jones-calculus model of the polarization encoder.
//!
//! States are parameterised on the Bloch sphere by the colatitude `theta` and
//! the longitude `phi`: `cos(theta/2)|H> + e^{i phi} sin(theta/2)|V>`. The three
//! prepared states all sit on the equator:
//!
//! | command | state | theta | phi   |
//! |---------|-------|-------|-------|
//! | (Z, 0)  | L     | pi/2  | -pi/2 |
//! | (Z, 1)  | R     | pi/2  | pi/2  |
//! | (X, 0)  | +     | pi/2  | 0     |

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::protocol::Basis;
use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Normalized polarization state. The global phase is fixed so that `amp_h`
/// is real and non-negative (and `amp_v` real and positive when `amp_h` is 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JonesVector {
    amp_h: Complex64,
    amp_v: Complex64,
}

impl JonesVector {
    /// Normalizes `(h, v)` and fixes the global phase.
    pub fn new(h: Complex64, v: Complex64) -> Result<Self> {
        let norm = (h.norm_sqr() + v.norm_sqr()).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::invalid("Jones vector must have finite non-zero norm"));
        }
        let (h, v) = (h / norm, v / norm);
        let rot = if h.norm() > 0.0 {
            h.conj() / h.norm()
        } else {
            v.conj() / v.norm()
        };
        let mut h = h * rot;
        // exactly real after the rotation
        h.im = 0.0;
        Ok(Self { amp_h: h, amp_v: v * rot })
    }

    const fn raw(h: Complex64, v: Complex64) -> Self {
        Self { amp_h: h, amp_v: v }
    }

    pub fn amp_h(&self) -> Complex64 {
        self.amp_h
    }

    pub fn amp_v(&self) -> Complex64 {
        self.amp_v
    }

    pub const H: Self = Self::raw(Complex64::new(1.0, 0.0), ZERO);
    pub const V: Self = Self::raw(ZERO, Complex64::new(1.0, 0.0));
    pub const L: Self = Self::raw(Complex64::new(FRAC_1_SQRT_2, 0.0), Complex64::new(0.0, -FRAC_1_SQRT_2));
    pub const R: Self = Self::raw(Complex64::new(FRAC_1_SQRT_2, 0.0), Complex64::new(0.0, FRAC_1_SQRT_2));
    pub const PLUS: Self = Self::raw(Complex64::new(FRAC_1_SQRT_2, 0.0), Complex64::new(FRAC_1_SQRT_2, 0.0));
    pub const MINUS: Self = Self::raw(Complex64::new(FRAC_1_SQRT_2, 0.0), Complex64::new(-FRAC_1_SQRT_2, 0.0));

    /// `<self|other>`.
    pub fn inner(&self, other: &JonesVector) -> Complex64 {
        self.amp_h.conj() * other.amp_h + self.amp_v.conj() * other.amp_v
    }

    /// `|<self|other>|^2`.
    pub fn overlap(&self, other: &JonesVector) -> f64 {
        self.inner(other).norm_sqr()
    }

    /// The orthogonal state (antipode on the Bloch sphere).
    pub fn orthogonal(&self) -> JonesVector {
        // (-conj v, conj h), re-phased to the convention
        JonesVector::new(-self.amp_v.conj(), self.amp_h.conj()).expect("unit vector")
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amp_h.norm_sqr() + self.amp_v.norm_sqr()
    }

    /// Euclidean distance between the amplitude pairs.
    pub fn distance(&self, other: &JonesVector) -> f64 {
        ((self.amp_h - other.amp_h).norm_sqr() + (self.amp_v - other.amp_v).norm_sqr()).sqrt()
    }
}

/// Deviations of the encoder from its nominal settings.
///
/// `intensity_imbalance` is the relative excess of the mean photon number of
/// `|1>` over `|0>`; the pair average is kept at the nominal intensity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderImperfection {
    pub theta_error: f64,
    pub phi_error: f64,
    pub intensity_imbalance: f64,
}

impl EncoderImperfection {
    pub fn ideal() -> Self {
        Self::default()
    }

    /// Colatitude error whose prepared states have error probability `q`
    /// against their ideal targets.
    pub fn for_intrinsic_qber(q: f64) -> Result<Self> {
        if !(0.0..=0.5).contains(&q) {
            return Err(Error::invalid(format!("intrinsic qber {q} outside [0, 0.5]")));
        }
        Ok(Self {
            theta_error: (1.0 - 2.0 * q).acos(),
            ..Self::default()
        })
    }

    pub fn is_ideal(&self) -> bool {
        self.theta_error == 0.0 && self.phi_error == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_error.is_finite() && self.phi_error.is_finite()) {
            return Err(Error::invalid("encoder angle errors must be finite"));
        }
        if !(self.intensity_imbalance > -1.0 && self.intensity_imbalance.is_finite()) {
            return Err(Error::invalid(format!(
                "intensity imbalance {} must exceed -1",
                self.intensity_imbalance
            )));
        }
        Ok(())
    }
}

/// `cos(theta/2)|H> + e^{i phi} sin(theta/2)|V>`.
pub fn encode_bloch(theta: f64, phi: f64) -> Result<JonesVector> {
    if !(0.0..=PI).contains(&theta) {
        return Err(Error::invalid(format!("colatitude {theta} outside [0, pi]")));
    }
    if !(-PI..=PI).contains(&phi) {
        return Err(Error::invalid(format!("longitude {phi} outside [-pi, pi]")));
    }
    let (s, c) = (theta / 2.0).sin_cos();
    JonesVector::new(Complex64::new(c, 0.0), Complex64::from_polar(s, phi))
}

fn check_command(basis: Basis, bit: u8) -> Result<()> {
    match (basis, bit) {
        (Basis::Z, 0 | 1) | (Basis::X, 0) => Ok(()),
        (Basis::X, 1) => Err(Error::invalid("|-> is never prepared")),
        _ => Err(Error::invalid(format!("bit {bit} is not 0 or 1"))),
    }
}

/// Ideal state for a command. `(X, 1)` maps to `|->`, the state measured by
/// the X- detector.
pub fn ideal_target(basis: Basis, bit: u8) -> JonesVector {
    match (basis, bit) {
        (Basis::Z, 0) => JonesVector::L,
        (Basis::Z, _) => JonesVector::R,
        (Basis::X, 0) => JonesVector::PLUS,
        (Basis::X, _) => JonesVector::MINUS,
    }
}

fn wrap_phase(phi: f64) -> f64 {
    let w = (phi + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI && phi > 0.0 {
        PI
    } else {
        w
    }
}

fn reflect_colatitude(theta: f64, phi: f64) -> (f64, f64) {
    // Continuing past a pole lands on the opposite meridian.
    let t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        (2.0 * PI - t, wrap_phase(phi + PI))
    } else {
        (t, phi)
    }
}

/// State the encoder actually produces for a command.
pub fn command_to_state(basis: Basis, bit: u8, imperfection: &EncoderImperfection) -> Result<JonesVector> {
    check_command(basis, bit)?;
    imperfection.validate()?;
    if imperfection.is_ideal() {
        return Ok(ideal_target(basis, bit));
    }
    let phi0 = match (basis, bit) {
        (Basis::Z, 0) => -FRAC_PI_2,
        (Basis::Z, _) => FRAC_PI_2,
        (Basis::X, _) => 0.0,
    };
    let (theta, phi) = reflect_colatitude(FRAC_PI_2 + imperfection.theta_error, phi0 + imperfection.phi_error);
    encode_bloch(theta, wrap_phase(phi))
}

/// `10 log10(|<target|state>|^2 / |<target_perp|state>|^2)`, or `+inf` when
/// the orthogonal power vanishes exactly.
pub fn extinction_ratio(state: &JonesVector, target: &JonesVector) -> f64 {
    let along = target.overlap(state);
    let across = target.orthogonal().overlap(state);
    if across == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (along / across).log10()
    }
}

/// Error probability of a state with the given extinction ratio.
pub fn intrinsic_qber_from_er(er_db: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf(er_db / 10.0))
}

/// The three prepared states with their relative intensities, precomputed for
/// a given imperfection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Encoder {
    states: [JonesVector; 3],
    intensity: [f64; 3],
    imperfection: EncoderImperfection,
}

impl Encoder {
    pub fn new(imperfection: EncoderImperfection) -> Result<Self> {
        let eps = imperfection.intensity_imbalance;
        Ok(Self {
            states: [
                command_to_state(Basis::Z, 0, &imperfection)?,
                command_to_state(Basis::Z, 1, &imperfection)?,
                command_to_state(Basis::X, 0, &imperfection)?,
            ],
            intensity: [2.0 / (2.0 + eps), 2.0 * (1.0 + eps) / (2.0 + eps), 1.0],
            imperfection,
        })
    }

    pub fn ideal() -> Self {
        Self::new(EncoderImperfection::ideal()).expect("ideal encoder")
    }

    pub fn imperfection(&self) -> &EncoderImperfection {
        &self.imperfection
    }

    fn index(basis: Basis, bit: u8) -> usize {
        match basis {
            Basis::Z => (bit & 1) as usize,
            Basis::X => 2,
        }
    }

    /// Prepared state. X-basis commands always produce `|+>`.
    pub fn state(&self, basis: Basis, bit: u8) -> &JonesVector {
        &self.states[Self::index(basis, bit)]
    }

    /// Mean photon number of this state relative to the nominal intensity.
    pub fn intensity_factor(&self, basis: Basis, bit: u8) -> f64 {
        self.intensity[Self::index(basis, bit)]
    }
}
