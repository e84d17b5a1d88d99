//! End-to-end runs: simulate the link, process the receiver stream, sift,
//! reconcile, verify and amplify, and write the artifacts.
//!
//! Artifacts written to the output directory:
//!
//! | file | content |
//! |------|---------|
//! | `config.toml` | the configuration used |
//! | `tags.bin`, `alice.bin` | raw receiver stream and announced transmitter records |
//! | `sifted_alice.key`, `sifted_bob.key` | sifted Z-basis keys before reconciliation |
//! | `final.key` | the secret key |
//! | `counts.json` | decoy tallies |
//! | `budget.json` | finite-size and asymptotic key budgets |
//! | `summary.json`, `summary.csv` | per-interval rows and run totals |
//! | `FAILED` | present only when the run aborted |

use std::io::{Read, Write};
use std::iter::Peekable;
use std::path::Path;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::channel::{TagGenerator, TimeTag};
use crate::config::ExperimentConfig;
use crate::encoder::Encoder;
use crate::error::{Error, Result, Stage, StageExt};
use crate::io::{self, AliceReader, TagReader};
use crate::postproc::{cascade_correct, seed_len, toeplitz_pa, verify_key, KeyBlock, ReconciliationReport, TAG_BITS};
use crate::protocol::{AliceTape, PulseRecord};
use crate::rng::{Domain, RandomSource};
use crate::security::{
    analyze_counts, decoy_bounds, ec_leakage, key_length_with_leakage, DecoyCounts, KeyBudget, Mode, RealCounts,
};
use crate::sync::{
    balance_efficiency, resolve_double_clicks, window_filter, window_stats, Detection, SlotTag, Sifter, SyncState,
    SyncTracker, WindowStats,
};

/// One aggregation interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub t_s: f64,
    /// In-window detections with the signal part renormalized by detector
    /// efficiency.
    pub tdr_hz: f64,
    /// Absent when no noise was observed.
    pub snr: Option<f64>,
    pub qber_z: f64,
    pub qber_x: f64,
    pub sifted_bps: f64,
    /// Key rate of the interval taken as a standalone block, with
    /// `run.f_ec` standing in for reconciliation.
    pub skr_inf_bps: f64,
    pub skr_f_bps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub duration_s: f64,
    pub n_z: u64,
    pub n_x: u64,
    pub qber_z: f64,
    pub qber_x: f64,
    /// `None` when reconciliation was skipped because no key was possible.
    pub reconciliation: Option<ReconciliationReport>,
    /// Error-correction leakage including the verification tag.
    pub lambda_ec: f64,
    pub l: u64,
    pub skr_f_bps: f64,
    pub skr_inf_bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub sync: SyncState,
    pub rows: Vec<SummaryRow>,
    pub totals: Totals,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    pub finite: KeyBudget,
    pub asymptotic: KeyBudget,
}

/// Splits a time-ordered tag stream at PPS markers. Block 0 holds everything
/// before the second marker.
#[derive(Debug, Default)]
struct Reblocker {
    current: Vec<TimeTag>,
    has_marker: bool,
}

impl Reblocker {
    fn push(&mut self, tag: TimeTag) -> Option<Vec<TimeTag>> {
        let mut out = None;
        if tag.is_pps() {
            if self.has_marker {
                out = Some(std::mem::take(&mut self.current));
            }
            self.has_marker = true;
        }
        self.current.push(tag);
        out
    }

    fn finish(self) -> Option<Vec<TimeTag>> {
        (!self.current.is_empty()).then_some(self.current)
    }
}

/// Transmitter records for announced detections.
trait AliceSource {
    fn records(&mut self, detections: &[Detection]) -> Result<Vec<PulseRecord>>;
}

struct TapeSource<W> {
    tape: AliceTape,
    writer: Option<W>,
}

impl<W: Write> AliceSource for TapeSource<W> {
    fn records(&mut self, detections: &[Detection]) -> Result<Vec<PulseRecord>> {
        let recs: Vec<PulseRecord> = detections.iter().map(|d| self.tape.record(d.slot)).collect();
        if let Some(w) = self.writer.as_mut() {
            io::write_alice(w, &recs).stage(Stage::Output)?;
        }
        Ok(recs)
    }
}

struct FileSource<R: Read> {
    reader: Peekable<AliceReader<R>>,
}

impl<R: Read> AliceSource for FileSource<R> {
    fn records(&mut self, detections: &[Detection]) -> Result<Vec<PulseRecord>> {
        let Some(last) = detections.last().map(|d| d.slot) else {
            return Ok(Vec::new());
        };
        let mut out = Vec::with_capacity(detections.len());
        while let Some(next) = self.reader.peek() {
            match next {
                Ok(r) if r.slot > last => break,
                _ => out.push(self.reader.next().expect("peeked")?),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct IntervalAcc {
    seconds: u64,
    window: WindowStats,
    counts: DecoyCounts,
}

/// Receiver-side processing of PPS blocks up to sifting.
struct Receiver<'a> {
    config: &'a ExperimentConfig,
    source: RandomSource,
    tracker: Option<SyncTracker>,
    lock_state: Option<SyncState>,
    pending: Vec<Vec<TimeTag>>,
    carry: Vec<SlotTag>,
    sifter: Sifter,
    intervals: Vec<IntervalAcc>,
    blocks: u64,
}

impl<'a> Receiver<'a> {
    fn new(config: &'a ExperimentConfig) -> Self {
        Self {
            config,
            source: RandomSource::new(config.run.master_seed),
            tracker: None,
            lock_state: None,
            pending: Vec::new(),
            carry: Vec::new(),
            sifter: Sifter::new(false),
            intervals: Vec::new(),
            blocks: 0,
        }
    }

    fn done(&self) -> bool {
        self.config.run.target_n_z.is_some_and(|t| self.sifter.n_z() >= t)
    }

    fn push_block(&mut self, block: Vec<TimeTag>, alice: &mut dyn AliceSource) -> Result<()> {
        if self.tracker.is_some() {
            return self.process(block, alice);
        }
        self.pending.push(block);
        if self.pending.len() as u64 >= self.config.run.lock_s {
            self.lock(alice)?;
        }
        Ok(())
    }

    fn lock(&mut self, alice: &mut dyn AliceSource) -> Result<()> {
        let blocks = std::mem::take(&mut self.pending);
        let tags: Vec<TimeTag> = blocks.iter().flatten().copied().collect();
        let pps: Vec<u64> = tags.iter().filter(|t| t.is_pps()).map(|t| t.timestamp_ps).collect();
        let det = &self.config.detectors;
        let tracker = SyncTracker::lock(&tags, &pps, self.config.protocol.slot_period_ps(), det.tdc_resolution_ps as f64)
            .stage(Stage::Sync)?;
        self.lock_state = Some(tracker.state());
        self.tracker = Some(tracker);
        for b in blocks {
            if self.done() {
                break;
            }
            self.process(b, alice)?;
        }
        Ok(())
    }

    fn interval_index(&self, block: u64) -> usize {
        let d = self.config.run.duration_s;
        (block.min(d - 1) / self.config.run.interval_s) as usize
    }

    fn process(&mut self, block: Vec<TimeTag>, alice: &mut dyn AliceSource) -> Result<()> {
        if self.done() {
            return Ok(());
        }
        let k = self.blocks;
        self.blocks += 1;
        let det = &self.config.detectors;
        let state = self.tracker.as_mut().expect("locked").update(&block);
        let stats = window_stats(&block, &state, det.window_ps);
        let kept = window_filter(&block, &state, det.window_ps);
        let balanced = balance_efficiency(&kept, &det.efficiency, &self.source).stage(Stage::Sift)?;

        let mut merged = std::mem::take(&mut self.carry);
        merged.extend(balanced);
        merged.sort_by_key(|t| (t.slot, t.channel));
        if let Some(last) = merged.last().map(|t| t.slot) {
            let split = merged.partition_point(|t| t.slot < last);
            self.carry = merged.split_off(split);
        }
        self.sift(&merged, k, stats, alice)
    }

    fn sift(&mut self, tags: &[SlotTag], k: u64, stats: WindowStats, alice: &mut dyn AliceSource) -> Result<()> {
        let detections = resolve_double_clicks(tags, &self.source);
        let records = alice.records(&detections)?;
        let before = *self.sifter.counts();
        self.sifter.push(&records, &detections).stage(Stage::Sift)?;
        let after = *self.sifter.counts();

        let idx = self.interval_index(k);
        if self.intervals.len() <= idx {
            self.intervals.resize(idx + 1, IntervalAcc::default());
        }
        let acc = &mut self.intervals[idx];
        if k < self.config.run.duration_s {
            acc.seconds += 1;
        }
        acc.window.merge(&stats);
        acc.counts.merge(&delta(&after, &before));
        Ok(())
    }

    /// Locks on a stream shorter than the lock period and releases the
    /// held-back final slot.
    fn finish(&mut self, alice: &mut dyn AliceSource) -> Result<()> {
        if self.tracker.is_none() {
            self.lock(alice)?;
        }
        if !self.done() && !self.carry.is_empty() {
            let carry = std::mem::take(&mut self.carry);
            let k = self.blocks.saturating_sub(1);
            self.sift(&carry, k, WindowStats::default(), alice)?;
        }
        Ok(())
    }

    fn duration_s(&self) -> u64 {
        self.blocks.min(self.config.run.duration_s)
    }
}

fn delta(after: &DecoyCounts, before: &DecoyCounts) -> DecoyCounts {
    DecoyCounts {
        n_z_mu1: after.n_z_mu1 - before.n_z_mu1,
        n_z_mu2: after.n_z_mu2 - before.n_z_mu2,
        m_z_mu1: after.m_z_mu1 - before.m_z_mu1,
        m_z_mu2: after.m_z_mu2 - before.m_z_mu2,
        n_x_mu1: after.n_x_mu1 - before.n_x_mu1,
        n_x_mu2: after.n_x_mu2 - before.n_x_mu2,
        m_x_mu1: after.m_x_mu1 - before.m_x_mu1,
        m_x_mu2: after.m_x_mu2 - before.m_x_mu2,
        duration_s: 0.0,
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn row(config: &ExperimentConfig, index: usize, acc: &IntervalAcc) -> Result<SummaryRow> {
    let secs = acc.seconds.max(1) as f64;
    let det = &config.detectors;
    let noise = acc.window.noise_estimate(det.window_ps, config.protocol.slot_period_ps());
    let mut signal = 0.0;
    for d in 0..4 {
        signal += (acc.window.in_window[d] as f64 - noise[d]).max(0.0) / det.efficiency[d];
    }
    let noise_total: f64 = noise.iter().sum();
    let mut counts = acc.counts;
    counts.duration_s = secs;
    let real = RealCounts::from(&counts);
    let skr = |mode| -> Result<f64> {
        Ok(analyze_counts(&real, &config.protocol, config.run.f_ec, &config.epsilons, mode)?.l as f64 / secs)
    };
    Ok(SummaryRow {
        t_s: (index as u64 * config.run.interval_s) as f64,
        tdr_hz: (signal + noise_total) / secs,
        snr: (noise_total > 0.0).then(|| signal / noise_total),
        qber_z: ratio(counts.m_z(), counts.n_z()),
        qber_x: ratio(counts.m_x(), counts.n_x()),
        sifted_bps: counts.n_z() as f64 / secs,
        skr_inf_bps: skr(Mode::Asymptotic)?,
        skr_f_bps: skr(Mode::Finite)?,
    })
}

/// Post-processing of the sifted keys and artifact output shared by the
/// simulation and re-analysis paths.
fn conclude(config: &ExperimentConfig, receiver: Receiver<'_>, out_dir: &Path) -> Result<RunSummary> {
    let sync = receiver.lock_state.expect("locked");
    let duration = receiver.duration_s().max(1) as f64;
    let rows = receiver
        .intervals
        .iter()
        .enumerate()
        .map(|(i, acc)| row(config, i, acc))
        .collect::<Result<Vec<_>>>()
        .stage(Stage::Decoy)?;
    let sifted = receiver.sifter.finish(duration);
    let counts = sifted.counts;

    if config.output.write_sifted {
        std::fs::write(out_dir.join("sifted_alice.key"), sifted.alice_key.to_bytes()).stage(Stage::Output)?;
        std::fs::write(out_dir.join("sifted_bob.key"), sifted.bob_key.to_bytes()).stage(Stage::Output)?;
    }

    let post = postprocess(config, &sifted.alice_key, &sifted.bob_key, &counts)?;
    let l = post.finite.l;
    let summary = RunSummary {
        sync,
        rows,
        totals: Totals {
            duration_s: duration,
            n_z: counts.n_z(),
            n_x: counts.n_x(),
            qber_z: counts.qber_z(),
            qber_x: counts.qber_x(),
            reconciliation: post.reconciliation,
            lambda_ec: post.finite.lambda_ec,
            l,
            skr_f_bps: l as f64 / duration,
            skr_inf_bps: post.asymptotic.l as f64 / duration,
        },
    };

    (|| -> Result<()> {
        write_key_artifacts(out_dir, &post, &counts)?;
        io::write_json(&out_dir.join("summary.json"), &summary)?;
        let mut csv = io::create(&out_dir.join("summary.csv"))?;
        io::write_summary_csv(&mut csv, &summary.rows)?;
        csv.flush()?;
        Ok(())
    })()
    .stage(Stage::Output)?;
    Ok(summary)
}

/// Outcome of reconciliation, verification and privacy amplification.
#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessOutcome {
    /// `None` when no key length could be positive even at the Shannon
    /// limit, in which case reconciliation is skipped and `lambda_ec` is the
    /// `run.f_ec` estimate.
    pub reconciliation: Option<ReconciliationReport>,
    pub finite: KeyBudget,
    pub asymptotic: KeyBudget,
    pub final_key: KeyBlock,
}

/// Reconciles, verifies and amplifies a sifted key pair. Public randomness
/// (shuffles, hash seeds) is derived from `run.master_seed`.
pub fn postprocess(
    config: &ExperimentConfig,
    alice_key: &KeyBlock,
    bob_key: &KeyBlock,
    counts: &DecoyCounts,
) -> Result<PostprocessOutcome> {
    counts.validate().stage(Stage::Decoy)?;
    if alice_key.len() as u64 != counts.n_z() || bob_key.len() != alice_key.len() {
        return Err(Error::Integrity(format!(
            "sifted keys ({} and {} bits) do not match n_Z = {}",
            alice_key.len(),
            bob_key.len(),
            counts.n_z()
        )))
        .stage(Stage::Reconcile);
    }
    let source = RandomSource::new(config.run.master_seed);
    let real = RealCounts::from(counts);
    let eps = &config.epsilons;
    let bounds_f = decoy_bounds(&real, &config.protocol, eps, Mode::Finite).stage(Stage::Decoy)?;
    let bounds_inf = decoy_bounds(&real, &config.protocol, eps, Mode::Asymptotic).stage(Stage::Decoy)?;
    let n_z = counts.n_z();
    let q_z = counts.qber_z();

    let ideal = ec_leakage(n_z as f64, q_z, 1.0).stage(Stage::Decoy)?;
    let possible = n_z > 0 && key_length_with_leakage(&bounds_f, ideal, eps, Mode::Finite)?.l > 0;
    if !possible {
        let lambda = ec_leakage(n_z as f64, q_z, config.run.f_ec).stage(Stage::Decoy)?;
        return Ok(PostprocessOutcome {
            reconciliation: None,
            finite: key_length_with_leakage(&bounds_f, lambda, eps, Mode::Finite)?,
            asymptotic: key_length_with_leakage(&bounds_inf, lambda, eps, Mode::Asymptotic)?,
            final_key: KeyBlock::zeros(0),
        });
    }

    let cascade_seed: u64 = source.stream(Domain::Reconcile, 0).random();
    let cascade = config.cascade.clone().with_seed(cascade_seed);
    let q_est = q_z.clamp(1e-4, 0.11);
    let (corrected, report) = cascade_correct(alice_key, bob_key, q_est, &cascade).stage(Stage::Reconcile)?;
    let verify_seed: u64 = source.stream(Domain::Verify, 0).random();
    let verified = verify_key(alice_key, corrected, verify_seed)
        .stage(Stage::Reconcile)?
        .ok_or_else(|| Error::Integrity("verification tags differ after reconciliation".into()))
        .stage(Stage::Reconcile)?;
    let lambda = (report.leaked_bits + TAG_BITS as u64) as f64;
    let finite = key_length_with_leakage(&bounds_f, lambda, eps, Mode::Finite).stage(Stage::Decoy)?;
    let asymptotic = key_length_with_leakage(&bounds_inf, lambda, eps, Mode::Asymptotic).stage(Stage::Decoy)?;
    let key = verified.into_inner();
    let l = finite.l as usize;
    let seed = KeyBlock::random(seed_len(key.len(), l), &mut source.stream(Domain::Amplify, 0));
    let final_key = toeplitz_pa(&key, l, &seed).stage(Stage::Amplify)?;
    Ok(PostprocessOutcome {
        reconciliation: Some(report),
        finite,
        asymptotic,
        final_key,
    })
}

/// Writes `final.key`, `counts.json` and `budget.json`.
pub fn write_key_artifacts(out_dir: &Path, post: &PostprocessOutcome, counts: &DecoyCounts) -> Result<()> {
    std::fs::write(out_dir.join("final.key"), post.final_key.to_bytes())?;
    io::write_json(&out_dir.join("counts.json"), counts)?;
    io::write_json(
        &out_dir.join("budget.json"),
        &Budgets {
            finite: post.finite,
            asymptotic: post.asymptotic,
        },
    )
}

fn prepare(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    config.validate().stage(Stage::Config)?;
    (|| -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let failed = out_dir.join("FAILED");
        if failed.exists() {
            std::fs::remove_file(failed)?;
        }
        std::fs::write(out_dir.join("config.toml"), config.to_toml_string()?)?;
        Ok(())
    })()
    .stage(Stage::Output)
}

fn mark_failure<T>(out_dir: &Path, r: Result<T>) -> Result<T> {
    if let Err(e) = &r {
        let _ = std::fs::write(out_dir.join("FAILED"), format!("{e}\n"));
    }
    r
}

/// Simulates a full run and post-processes it.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    prepare(config, out_dir)?;
    mark_failure(out_dir, simulate(config, out_dir))
}

fn simulate(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    let source = RandomSource::new(config.run.master_seed);
    let encoder = Encoder::new(config.encoder).stage(Stage::Sample)?;
    let mut generator = TagGenerator::new(
        &config.protocol,
        &encoder,
        &config.link,
        &config.detectors,
        &config.schedule,
        &config.clock,
        config.run.duration_s,
        &source,
    )
    .stage(Stage::Sample)?;
    let tape = *generator.tape();
    let mut tag_out = match config.output.write_tags {
        true => Some(io::create(&out_dir.join("tags.bin")).stage(Stage::Output)?),
        false => None,
    };
    let alice_out = match config.output.write_alice {
        true => Some(io::create(&out_dir.join("alice.bin")).stage(Stage::Output)?),
        false => None,
    };
    let mut alice = TapeSource { tape, writer: alice_out };
    let mut receiver = Receiver::new(config);
    let mut reblocker = Reblocker::default();

    let result = (|| -> Result<()> {
        'stream: while let Some(block) = generator.next_block().stage(Stage::Transmit)? {
            if let Some(w) = tag_out.as_mut() {
                io::write_tags(w, &block.tags).stage(Stage::Output)?;
            }
            for tag in block.tags {
                if let Some(b) = reblocker.push(tag) {
                    receiver.push_block(b, &mut alice)?;
                    if receiver.done() {
                        break 'stream;
                    }
                }
            }
        }
        if !receiver.done() {
            if let Some(b) = std::mem::take(&mut reblocker).finish() {
                receiver.push_block(b, &mut alice)?;
            }
            receiver.finish(&mut alice)?;
        }
        Ok(())
    })();
    // flush whatever was produced, even on failure
    let flushed = (|| -> Result<()> {
        if let Some(w) = tag_out.as_mut() {
            w.flush()?;
        }
        if let Some(w) = alice.writer.as_mut() {
            w.flush()?;
        }
        Ok(())
    })()
    .stage(Stage::Output);
    result?;
    flushed?;
    conclude(config, receiver, out_dir)
}

/// Re-runs the receiver side on recorded `tags.bin` and `alice.bin` files.
/// A tag file that is not in time order is sorted in memory first.
pub fn analyze_tags(tag_file: &Path, alice_file: &Path, config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    prepare(config, out_dir)?;
    mark_failure(out_dir, analyze(tag_file, alice_file, config, out_dir))
}

fn analyze(tag_file: &Path, alice_file: &Path, config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    let mut sorted = true;
    let mut prev: Option<TimeTag> = None;
    for t in TagReader::open(tag_file).stage(Stage::Sync)? {
        let t = t.stage(Stage::Sync)?;
        if prev.is_some_and(|p| t < p) {
            sorted = false;
            break;
        }
        prev = Some(t);
    }
    let mut alice = FileSource {
        reader: AliceReader::open(alice_file).stage(Stage::Sift)?.peekable(),
    };
    let mut receiver = Receiver::new(config);
    let mut reblocker = Reblocker::default();
    let mut feed = |tag: TimeTag, receiver: &mut Receiver<'_>, alice: &mut FileSource<_>| -> Result<bool> {
        if let Some(b) = reblocker.push(tag) {
            receiver.push_block(b, alice)?;
        }
        Ok(receiver.done())
    };
    if sorted {
        for t in TagReader::open(tag_file).stage(Stage::Sync)? {
            if feed(t.stage(Stage::Sync)?, &mut receiver, &mut alice)? {
                break;
            }
        }
    } else {
        let mut tags = io::read_tags(tag_file).stage(Stage::Sync)?;
        tags.sort_unstable();
        for t in tags {
            if feed(t, &mut receiver, &mut alice)? {
                break;
            }
        }
    }
    if !receiver.done() {
        if let Some(b) = reblocker.finish() {
            receiver.push_block(b, &mut alice)?;
        }
        receiver.finish(&mut alice)?;
    }
    conclude(config, receiver, out_dir)
}
