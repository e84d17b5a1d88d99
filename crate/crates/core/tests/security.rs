use qkdsim_core::analytic::{evaluate, Scenario};
use qkdsim_core::channel::LinkModel;
use qkdsim_core::config::ExperimentConfig;
use qkdsim_core::encoder::EncoderImperfection;
use qkdsim_core::protocol::{Basis, Intensity, ProtocolParams};
use qkdsim_core::security::{
    decoy_bounds, optimize_operating_point, tau_n, Mode, RealCounts, SearchSpace, SecurityEpsilons,
};
use qkdsim_core::sweep::{cutoff, Axis};
use qkdsim_core::Error;

/// Expected sifted counts of a simple link with photon-number resolution:
/// transmission `eta`, noise probability `y0` per slot, misalignment `e_d`.
/// Returns the counts and the expected single-photon Z detections.
fn expected_counts(p: &ProtocolParams, eta: f64, y0: f64, e_d: f64, pulses: f64) -> (RealCounts, f64) {
    let mut c = RealCounts {
        duration_s: 1.0,
        ..Default::default()
    };
    let mut one_z = 0.0;
    for basis in [Basis::Z, Basis::X] {
        let sifted = p.basis_prob(basis) * p.bob_basis_prob(basis);
        for (k, pk) in [(Intensity::Mu1, p.p_mu1), (Intensity::Mu2, 1.0 - p.p_mu1)] {
            let mu = p.mu(basis, k);
            let mut pn = (-mu).exp();
            for n in 0..60u32 {
                if n > 0 {
                    pn *= mu / n as f64;
                }
                let y = 1.0 - (1.0 - y0) * (1.0 - eta).powi(n as i32);
                let det = pulses * sifted * pk * pn * y;
                let err = pulses * sifted * pk * pn * (e_d * (y - y0) + 0.5 * y0);
                c.add(basis, k, det, err);
                if basis == Basis::Z && n == 1 {
                    one_z += det;
                }
            }
        }
    }
    (c, one_z)
}

#[test]
fn asymptotic_single_photon_bound_is_sound() {
    let eta = 10f64.powf(-2.4);
    let mut gaps = Vec::new();
    for (mu1, mu2) in [(0.56, 0.27), (0.56, 0.1), (0.3, 0.1), (0.2, 0.05)] {
        let p = ProtocolParams {
            mu1_z: mu1,
            mu2_z: mu2,
            ..ProtocolParams::default()
        };
        let (c, one_z) = expected_counts(&p, eta, 4.8e-6, 0.0, 1e12);
        let b = decoy_bounds(&c, &p, &SecurityEpsilons::default(), Mode::Asymptotic).unwrap();
        assert!(b.s_z1_low <= one_z * (1.0 + 1e-12), "bound {} above truth {one_z}", b.s_z1_low);
        gaps.push((one_z - b.s_z1_low) / one_z);
    }
    // two-intensity bound: ~10% below truth at 0.56/0.27, tighter with a weaker decoy
    assert!(gaps[0] > 0.09 && gaps[0] < 0.11, "{gaps:?}");
    assert!(gaps[1] < gaps[0] && gaps[3] < 0.015, "{gaps:?}");

    // tau_1 Y_1 over the intensity mixture is the single-photon share
    let p = ProtocolParams::default();
    let (_, one_z) = expected_counts(&p, eta, 4.8e-6, 0.0, 1e12);
    let tau1 = tau_n(1, p.mu1_z, p.mu2_z, p.p_mu1);
    let y1 = 1.0 - (1.0 - 4.8e-6) * (1.0 - eta);
    let share = 1e12 * p.p_z_alice * p.p_z_bob * tau1 * y1;
    assert!((share - one_z).abs() / one_z < 1e-12);
}

fn scenario_with_qber(q: f64) -> Scenario {
    Scenario {
        encoder: EncoderImperfection::for_intrinsic_qber(q).unwrap(),
        ..Scenario::default()
    }
}

fn qber_z(c: &RealCounts) -> f64 {
    c.m(Basis::Z) / c.n(Basis::Z)
}

/// Intrinsic error that makes the modeled Q_Z equal `target`.
fn scenario_with_qber_z(target: f64) -> Scenario {
    let p = ProtocolParams::default();
    let (mut lo, mut hi) = (0.0, target);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        let q = qber_z(&evaluate(&p, &scenario_with_qber(mid)).unwrap().counts);
        if q < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    scenario_with_qber(0.5 * (lo + hi))
}

#[test]
fn field_point_is_close_to_optimal() {
    let s = scenario_with_qber_z(0.01);
    let p = ProtocolParams::default();
    let here = evaluate(&p, &s).unwrap();
    assert!((qber_z(&here.counts) - 0.01).abs() < 1e-6);
    let best = optimize_operating_point(&p, &s, &SearchSpace::default()).unwrap();
    assert!(best.skr >= here.skr_f);
    assert!(here.skr_f >= 0.9 * best.skr, "{} vs optimum {}", here.skr_f, best.skr);
}

#[test]
fn optimizer_is_deterministic() {
    let s = scenario_with_qber(0.005);
    let a = optimize_operating_point(&ProtocolParams::default(), &s, &SearchSpace::default()).unwrap();
    let b = optimize_operating_point(&ProtocolParams::default(), &s, &SearchSpace::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn lossless_noiseless_link_has_interior_mu1_optimum() {
    let mut s = Scenario::default();
    s.link = LinkModel {
        fixed_loss_optics_db: 0.0,
        fixed_loss_analyzer_db: 0.0,
        background_rate_hz: 0.0,
        ..LinkModel::default()
    };
    s.link.coupling.mean_efficiency = 1.0;
    s.link.coupling.lognormal_sigma = 0.0;
    s.detectors.dark_rate_hz = [0.0; 4];

    let best = optimize_operating_point(&ProtocolParams::default(), &s, &SearchSpace::default()).unwrap();
    let p = best.params;
    assert!(p.mu1_z > p.mu2_z && p.mu2_z > 0.0);

    // scan mu1 in Z at the optimum: rises, then falls
    let skr: Vec<f64> = (0..=40)
        .map(|i| {
            let mu1 = p.mu2_z + 0.01 + 0.025 * i as f64;
            evaluate(&ProtocolParams { mu1_z: mu1, ..p }, &s).unwrap().skr_f
        })
        .collect();
    let (imax, _) = skr.iter().enumerate().fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
    assert!(imax > 0 && imax < skr.len() - 1, "maximum at the scan edge ({imax}): {skr:?}");
    assert!(skr[0] < skr[imax] && skr[skr.len() - 1] < skr[imax]);
}

#[test]
fn sixty_db_is_infeasible() {
    let mut s = Scenario::default();
    s.link = s.link.with_total_loss(60.0).unwrap();
    assert_eq!(evaluate(&ProtocolParams::default(), &s).unwrap().finite.l, 0);
    let r = optimize_operating_point(&ProtocolParams::default(), &s, &SearchSpace::default());
    assert!(matches!(r, Err(Error::Infeasible(_))), "{r:?}");
}

#[test]
fn qber_sweep_loses_the_key_before_eleven_percent() {
    let c = ExperimentConfig::default();
    let x = cutoff(&c, Axis::Qber, 0.0, 0.11, 1e-5).unwrap().expect("cutoff below 11%");
    assert!(x > 0.01 && x < 0.11, "{x}");
    let below = qkdsim_core::sweep::evaluate_at(&c, Axis::Qber, x - 1e-4).unwrap();
    let above = qkdsim_core::sweep::evaluate_at(&c, Axis::Qber, x + 1e-4).unwrap();
    assert!(below.skr_f_bps > 0.0 && above.skr_f_bps == 0.0);
}

#[test]
fn finite_key_grows_with_block_size() {
    let c = ExperimentConfig::default();
    let pts = qkdsim_core::sweep::sweep(&c, Axis::BlockSize, 1e6, 1e9, 1e8).unwrap();
    for w in pts.windows(2) {
        assert!(w[1].skr_f_bps >= w[0].skr_f_bps);
        assert!(w[1].skr_f_bps <= w[1].skr_inf_bps);
    }
}
