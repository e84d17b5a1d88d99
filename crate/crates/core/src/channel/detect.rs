//! Monte Carlo transmission and detection, producing receiver time tags.

use rand::{Rng, RngExt};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Poisson, StandardNormal};

use super::rates::{class_index, LinkPhysics, N_CLASSES};
use super::{CouplingProcess, DetectorBank, LinkModel, ReceiverClock, Schedule, TimeTag, CH_PPS};
use crate::encoder::Encoder;
use crate::protocol::{AliceTape, ProtocolParams, PulseTrain};
use crate::rng::{Domain, RandomSource};
use crate::{Error, Result};

/// Length of the piecewise-constant coupling and noise segments.
pub const SEGMENT_MS: u64 = 1;
const SEGMENTS_PER_S: u64 = 1000 / SEGMENT_MS;
const DIRECT_STREAM: u64 = 1 << 63;

fn integral_clock(params: &ProtocolParams) -> Result<u64> {
    let hz = params.clock_rate_hz;
    if hz.fract() != 0.0 || !(1.0..=1e12).contains(&hz) {
        return Err(Error::invalid(format!("clock rate {hz} Hz must be a whole number of hertz")));
    }
    Ok(hz as u64)
}

fn segment_slots(seg: u64, clock_hz: u64) -> (u64, u64) {
    let lo = (seg as u128 * clock_hz as u128 / SEGMENTS_PER_S as u128) as u64;
    let hi = ((seg + 1) as u128 * clock_hz as u128 / SEGMENTS_PER_S as u128) as u64;
    (lo, hi)
}

const SEGMENT_PS: f64 = 1e9 * SEGMENT_MS as f64;

/// State shared by the sampling paths for one segment.
struct SegmentModel<'a> {
    phys: &'a LinkPhysics,
    clock: &'a ReceiverClock,
    tdc: u64,
    lam: [[f64; 4]; N_CLASSES],
}

impl SegmentModel<'_> {
    fn quantize(&self, t_alice_ps: f64) -> Option<u64> {
        let t = self.clock.to_receiver(t_alice_ps);
        (t >= 0.0).then(|| (t / self.tdc as f64).floor() as u64 * self.tdc)
    }

    fn signal_tag<R: Rng>(&self, slot: u64, ch: usize, rng: &mut R, out: &mut Vec<TimeTag>) {
        let z: f64 = StandardNormal.sample(rng);
        let t = slot as f64 * self.phys.period_ps + self.phys.sigma_ps * z;
        if let Some(ts) = self.quantize(t) {
            out.push(TimeTag::new(ts, ch as u8));
        }
    }

    /// Uniform noise clicks over `[t0, t0 + span)` (transmitter time, ps).
    fn noise<R: Rng>(&self, t0: f64, span: f64, noise_hz: &[f64; 4], rng: &mut R, out: &mut Vec<TimeTag>) {
        for (d, &rate) in noise_hz.iter().enumerate() {
            let mean = rate * span * 1e-12;
            if mean <= 0.0 {
                continue;
            }
            let n = Poisson::new(mean).expect("positive mean").sample(rng) as u64;
            for _ in 0..n {
                let t = t0 + rng.random::<f64>() * span;
                if let Some(ts) = self.quantize(t) {
                    out.push(TimeTag::new(ts, d as u8));
                }
            }
        }
    }
}

/// One PPS-delimited block of the receiver stream, sorted by time. The PPS
/// marker of the block is included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub index: u64,
    pub tags: Vec<TimeTag>,
}

/// Streaming tag source over a whole run.
///
/// Candidate slots are visited with geometric skips at the largest per-slot
/// click probability of the segment and thinned to the actual probability of
/// the slot's class, so only a small multiple of the detected slots is
/// touched.
pub struct TagGenerator {
    tape: AliceTape,
    phys: LinkPhysics,
    link: LinkModel,
    schedule: Schedule,
    clock: ReceiverClock,
    source: RandomSource,
    coupling: CouplingProcess<ChaCha8Rng>,
    clock_hz: u64,
    duration_s: u64,
    next_segment: u64,
    next_block: u64,
    pending: Vec<TimeTag>,
    margin_ps: f64,
}

impl TagGenerator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &ProtocolParams,
        encoder: &Encoder,
        link: &LinkModel,
        detectors: &DetectorBank,
        schedule: &Schedule,
        clock: &ReceiverClock,
        duration_s: u64,
        source: &RandomSource,
    ) -> Result<Self> {
        if duration_s == 0 {
            return Err(Error::invalid("duration must be positive"));
        }
        let clock_hz = integral_clock(params)?;
        let phys = LinkPhysics::new(params, encoder, link, detectors)?;
        clock.validate(phys.period_ps)?;
        schedule.validate()?;
        phys.noise_raw_hz(link.background_rate_hz)?;
        for p in &schedule.points {
            phys.noise_raw_hz(p.background_rate_hz)?;
        }
        let coupling = CouplingProcess::new(
            link.coupling,
            SEGMENT_MS as f64 * 1e-3,
            source.stream(Domain::Coupling, 0),
        )?;
        Ok(Self {
            tape: AliceTape::new(*params, source)?,
            margin_ps: 1e6 + 20.0 * phys.sigma_ps,
            phys,
            link: *link,
            schedule: schedule.clone(),
            clock: *clock,
            source: *source,
            coupling,
            clock_hz,
            duration_s,
            next_segment: 0,
            next_block: 0,
            pending: Vec::new(),
        })
    }

    pub fn duration_s(&self) -> u64 {
        self.duration_s
    }

    pub fn tape(&self) -> &AliceTape {
        &self.tape
    }

    fn pps_tag(&self, k: u64) -> TimeTag {
        let tdc = self.phys.detectors().tdc_resolution_ps;
        let t = self.clock.pps_time(k).max(0.0);
        TimeTag::new((t / tdc as f64).floor() as u64 * tdc, CH_PPS)
    }

    fn simulate_segment(&mut self, seg: u64) -> Result<()> {
        let t_mid = (seg as f64 + 0.5) * SEGMENT_MS as f64 * 1e-3;
        let (mean, bg) = self.schedule.at(t_mid, &self.link);
        let eta = self.coupling.next_at(mean);
        let noise_hz = self.phys.noise_raw_hz(bg)?;
        let model = SegmentModel {
            phys: &self.phys,
            clock: &self.clock,
            tdc: self.phys.detectors().tdc_resolution_ps,
            lam: self.phys.lambda_unit.map(|row| row.map(|l| l * eta)),
        };
        let mut rng = self.source.stream(Domain::Channel, seg);
        let (lo, hi) = segment_slots(seg, self.clock_hz);

        let p_class: [f64; N_CLASSES] = std::array::from_fn(|c| -(-model.lam[c].iter().sum::<f64>()).exp_m1());
        let p_max = p_class.iter().cloned().fold(0.0, f64::max);
        if p_max > 0.0 {
            let geo = Geometric::new(p_max).map_err(|e| Error::invalid(e.to_string()))?;
            let mut slot = lo.saturating_add(geo.sample(&mut rng));
            while slot < hi {
                let r = self.tape.record(slot);
                let c = class_index(r.basis, r.bit, r.intensity);
                if rng.random::<f64>() * p_max < p_class[c] {
                    emit_conditioned(&model, slot, &model.lam[c], &mut rng, &mut self.pending);
                }
                slot = slot.saturating_add(1).saturating_add(geo.sample(&mut rng));
            }
        }
        model.noise(seg as f64 * SEGMENT_PS, SEGMENT_PS, &noise_hz, &mut rng, &mut self.pending);
        Ok(())
    }

    /// Next block, or `None` once the final PPS block has been emitted.
    pub fn next_block(&mut self) -> Result<Option<Block>> {
        let k = self.next_block;
        if k > self.duration_s {
            return Ok(None);
        }
        let n_segments = self.duration_s * SEGMENTS_PER_S;
        let last = k == self.duration_s;
        let boundary = if last { u64::MAX } else { self.pps_tag(k + 1).timestamp_ps };
        while self.next_segment < n_segments
            && (last || self.clock.to_receiver(self.next_segment as f64 * SEGMENT_PS) < boundary as f64 + self.margin_ps)
        {
            self.simulate_segment(self.next_segment)?;
            self.next_segment += 1;
        }
        self.pending.sort_unstable();
        let split = self.pending.partition_point(|t| t.timestamp_ps < boundary);
        let mut tags: Vec<TimeTag> = self.pending.drain(..split).collect();
        let marker = self.pps_tag(k);
        let at = tags.partition_point(|t| *t < marker);
        tags.insert(at, marker);
        self.next_block += 1;
        Ok(Some(Block { index: k, tags }))
    }
}

impl Iterator for TagGenerator {
    type Item = Result<Block>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_block().transpose()
    }
}

/// Clicks for an accepted slot, conditioned on at least one detector firing.
fn emit_conditioned<R: Rng>(model: &SegmentModel<'_>, slot: u64, lam: &[f64; 4], rng: &mut R, out: &mut Vec<TimeTag>) {
    let mut tail = [0.0; 5];
    for d in (0..4).rev() {
        tail[d] = tail[d + 1] + lam[d];
    }
    let mut fired = false;
    for d in 0..4 {
        let p = -(-lam[d]).exp_m1();
        let prob = if fired { p } else { p / -(-tail[d]).exp_m1() };
        if prob > 0.0 && rng.random::<f64>() < prob {
            fired = true;
            model.signal_tag(slot, d, rng, out);
        }
    }
}

/// Slot-by-slot transmission of an explicit pulse train. Every slot draws
/// each detector independently, which makes this path slow but free of the
/// candidate-thinning machinery of [`TagGenerator`]. Returns detector tags
/// sorted by time; no PPS markers.
#[allow(clippy::too_many_arguments)]
pub fn transmit_and_detect(
    train: &PulseTrain,
    encoder: &Encoder,
    params: &ProtocolParams,
    link: &LinkModel,
    detectors: &DetectorBank,
    clock: &ReceiverClock,
    source: &RandomSource,
) -> Result<Vec<TimeTag>> {
    let clock_hz = integral_clock(params)?;
    let phys = LinkPhysics::new(params, encoder, link, detectors)?;
    clock.validate(phys.period_ps)?;
    let noise_hz = phys.noise_raw_hz(link.background_rate_hz)?;
    let mut coupling = CouplingProcess::new(link.coupling, SEGMENT_MS as f64 * 1e-3, source.stream(Domain::Coupling, 0))?;
    let slots_per_seg = clock_hz / SEGMENTS_PER_S;
    if slots_per_seg == 0 || clock_hz % SEGMENTS_PER_S != 0 {
        return Err(Error::invalid("direct transmission needs a whole number of slots per segment"));
    }
    let mut out = Vec::new();
    if train.is_empty() {
        return Ok(out);
    }
    let first_seg = train.start_slot / slots_per_seg;
    let last_seg = (train.start_slot + train.len() as u64 - 1) / slots_per_seg;
    for _ in 0..first_seg {
        coupling.next_at(link.coupling.mean_efficiency);
    }
    for seg in first_seg..=last_seg {
        let eta = coupling.next_at(link.coupling.mean_efficiency);
        let model = SegmentModel {
            phys: &phys,
            clock,
            tdc: detectors.tdc_resolution_ps,
            lam: phys.lambda_unit.map(|row| row.map(|l| l * eta)),
        };
        let p_click = model.lam.map(|row| row.map(|l| -(-l).exp_m1()));
        let mut rng = source.stream(Domain::Channel, DIRECT_STREAM | seg);
        let lo = (seg * slots_per_seg).max(train.start_slot);
        let hi = ((seg + 1) * slots_per_seg).min(train.start_slot + train.len() as u64);
        for slot in lo..hi {
            let r = train.get((slot - train.start_slot) as usize);
            let c = class_index(r.basis, r.bit, r.intensity);
            for d in 0..4 {
                if rng.random::<f64>() < p_click[c][d] {
                    model.signal_tag(slot, d, &mut rng, &mut out);
                }
            }
        }
        let t0 = lo as f64 * phys.period_ps;
        model.noise(t0, (hi - lo) as f64 * phys.period_ps, &noise_hz, &mut rng, &mut out);
    }
    out.sort_unstable();
    Ok(out)
}
