//! Receiver-side processing on simulated streams: clock recovery, window
//! filtering, balancing, double clicks and sifting.

use qkdsim_core::channel::{
    transmit_and_detect, DetectorBank, LinkModel, ReceiverClock, Schedule, TagGenerator, TimeTag, CH_XP, CH_Z0, CH_Z1,
};
use qkdsim_core::encoder::Encoder;
use qkdsim_core::protocol::{sample_pulse_train, AliceTape, Basis, ProtocolParams};
use qkdsim_core::rng::RandomSource;
use qkdsim_core::sync::{
    balance_efficiency, recover_clock, resolve_double_clicks, sift, window_filter, SlotTag, SyncState,
};
use qkdsim_core::Error;

fn stream(clock: &ReceiverClock, link: &LinkModel, seconds: u64, seed: u64) -> Vec<TimeTag> {
    let params = ProtocolParams::default();
    let gen = TagGenerator::new(
        &params,
        &Encoder::ideal(),
        link,
        &DetectorBank::default(),
        &Schedule::constant(),
        clock,
        seconds,
        &RandomSource::new(seed),
    )
    .unwrap();
    gen.flat_map(|b| b.unwrap().tags).collect()
}

fn recover(tags: &[TimeTag]) -> Result<SyncState, Error> {
    let pps: Vec<u64> = tags.iter().filter(|t| t.is_pps()).map(|t| t.timestamp_ps).collect();
    recover_clock(tags, &pps, ProtocolParams::default().slot_period_ps(), 81.0)
}

#[test]
fn recovers_offset_and_drift() {
    let clock = ReceiverClock::default();
    let s = recover(&stream(&clock, &LinkModel::default(), 5, 3)).unwrap();
    assert!((s.offset_ps - 7350.0).abs() <= 81.0, "offset {}", s.offset_ps);
    assert!((s.drift - 2e-8).abs() < 2e-9, "drift {}", s.drift);
}

#[test]
fn ideal_clock_recovers_zero_offset() {
    let s = recover(&stream(&ReceiverClock::ideal(), &LinkModel::default(), 3, 4)).unwrap();
    assert!(s.offset_ps.abs() <= 81.0, "offset {}", s.offset_ps);
    assert!(s.drift.abs() < 2e-9, "drift {}", s.drift);
}

#[test]
fn noise_only_stream_does_not_lock() {
    let mut link = LinkModel::default();
    link.coupling.mean_efficiency = 1e-12;
    link.background_rate_hz = 50_000.0;
    let err = recover(&stream(&ReceiverClock::default(), &link, 3, 5)).unwrap_err();
    assert!(matches!(err, Error::NoLock { .. }), "{err}");
}

#[test]
fn background_only_sifted_key_is_random() {
    let mut params = ProtocolParams::default();
    params.p_z_bob = 0.5;
    let mut link = LinkModel::default();
    link.coupling.mean_efficiency = 1e-12;
    link.background_rate_hz = 2e6;
    let det = DetectorBank::default();
    let source = RandomSource::new(21);
    let train = sample_pulse_train(5_000_000, &params, &source).unwrap();
    let tags = transmit_and_detect(&train, &Encoder::ideal(), &params, &link, &det, &ReceiverClock::ideal(), &source).unwrap();
    let sync = SyncState {
        offset_ps: 40.5,
        drift: 0.0,
        slot_period_ps: params.slot_period_ps(),
    };
    let kept = balance_efficiency(&window_filter(&tags, &sync, 1000.0), &det.efficiency, &source).unwrap();
    let bob = resolve_double_clicks(&kept, &source);
    let alice: Vec<_> = bob.iter().map(|d| train.record(d.slot).unwrap()).collect();
    let r = sift(&alice, &bob, 0.1).unwrap();
    let n = r.counts.n_z();
    assert!(n > 10_000, "{n}");
    assert!((r.counts.qber_z() - 0.5).abs() < 0.02, "Q_Z {}", r.counts.qber_z());

    // balancing makes X+ and X- equally likely under unpolarized light
    let (xp, xm) = kept.iter().fold((0.0_f64, 0.0_f64), |(p, m), t| match t.channel {
        2 => (p + 1.0, m),
        3 => (p, m + 1.0),
        _ => (p, m),
    });
    let sigma = (xp + xm).sqrt() / 2.0;
    assert!((xp - xm).abs() / 2.0 < 5.0 * sigma, "{xp} vs {xm}");
}

fn slot_tags(slot: u64, chans: &[u8]) -> Vec<SlotTag> {
    chans
        .iter()
        .map(|&channel| SlotTag {
            slot,
            channel,
            timestamp_ps: slot * 20_000,
        })
        .collect()
}

#[test]
fn double_clicks_split_evenly() {
    const N: u64 = 100_000;
    let source = RandomSource::new(9);

    let within: Vec<SlotTag> = (0..N).flat_map(|s| slot_tags(s, &[CH_Z0, CH_Z1])).collect();
    let d = resolve_double_clicks(&within, &source);
    assert_eq!(d.len() as u64, N);
    let z0 = d.iter().filter(|d| d.channel == CH_Z0).count() as f64 / N as f64;
    assert!((z0 - 0.5).abs() < 0.01, "{z0}");

    let across: Vec<SlotTag> = (0..N).flat_map(|s| slot_tags(s, &[CH_Z0, CH_XP])).collect();
    let d = resolve_double_clicks(&across, &source);
    let z = d.iter().filter(|d| d.channel == CH_Z0).count() as f64 / N as f64;
    assert!((z - 0.5).abs() < 0.01, "{z}");
}

#[test]
fn sifting_against_the_tape_matches_truth_without_errors() {
    let params = ProtocolParams::default();
    let source = RandomSource::new(5);
    let tape = AliceTape::new(params, &source).unwrap();
    // Bob reads every slot in the basis Alice used, without error
    let bob: Vec<_> = (0..10_000u64)
        .map(|slot| {
            let r = tape.record(slot);
            let channel = match r.basis {
                Basis::Z => r.bit,
                Basis::X => CH_XP,
            };
            qkdsim_core::sync::Detection { slot, channel }
        })
        .collect();
    let alice: Vec<_> = bob.iter().map(|d| tape.record(d.slot)).collect();
    let r = sift(&alice, &bob, 1.0).unwrap();
    assert_eq!(r.counts.m_z() + r.counts.m_x(), 0);
    assert_eq!(r.counts.n_z() + r.counts.n_x(), 10_000);
    assert_eq!(r.alice_key, r.bob_key);
}
