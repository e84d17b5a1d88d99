use super::SyncState;
use crate::channel::{TimeTag, CH_PPS};
use crate::error::{Error, Result};

const PPS_PERIOD_PS: f64 = 1e12;
const MIN_TAGS: usize = 1000;
const MIN_CONTRAST: f64 = 3.0;
const SMOOTH_BINS: usize = 3;
const MIN_SEGMENT_TAGS: usize = 200;
// the click set inside the search window can flip between two fixed points
const MAX_CENTROID_ITERATIONS: usize = 12;

/// Residual of `x` from the nearest multiple of `p`, in `(-p/2, p/2]`.
fn wrap(x: f64, p: f64) -> f64 {
    let r = x - (x / p).round() * p;
    if r <= -p / 2.0 {
        r + p
    } else {
        r
    }
}

/// Least-squares line `y = c0 + c1 x` with weights. Falls back to the
/// weighted mean when the abscissae do not spread.
fn weighted_line(points: &[(f64, f64, f64)]) -> (f64, f64) {
    let sw: f64 = points.iter().map(|p| p.2).sum();
    let mx = points.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = points.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = points.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    if points.len() < 2 || sxx <= 0.0 {
        return (my, 0.0);
    }
    let c1 = sxy / sxx;
    (my - c1 * mx, c1)
}

/// Fold residuals relative to `origin` onto one period and locate the peak.
/// Returns the peak phase (bin centre) and the histogram contrast.
fn fold_peak(times: &[f64], origin: f64, period: f64, tdc_ps: f64) -> (f64, f64) {
    let nbins = ((period / tdc_ps).ceil() as usize).max(8);
    let width = period / nbins as f64;
    let mut hist = vec![0.0f64; nbins];
    for &t in times {
        let ph = (t - origin).rem_euclid(period);
        hist[((ph / width) as usize).min(nbins - 1)] += 1.0;
    }
    let smoothed: Vec<f64> = (0..nbins)
        .map(|i| (0..=2 * SMOOTH_BINS).map(|k| hist[(i + nbins + k - SMOOTH_BINS) % nbins]).sum())
        .collect();
    let (peak, &max) = smoothed
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty histogram");
    let mean = smoothed.iter().sum::<f64>() / nbins as f64;
    ((peak as f64 + 0.5) * width, max / mean)
}

/// Mean residual of the tags near `center`, iterated to a fixed point.
/// Uniform background inside the symmetric search window does not move
/// the fixed point.
fn centroid(times: &[f64], origin: f64, period: f64, center: f64, half: f64) -> Option<(f64, usize)> {
    let mut c = center;
    let mut n = 0;
    for _ in 0..MAX_CENTROID_ITERATIONS {
        let (mut sum, mut count) = (0.0, 0usize);
        for &t in times {
            let r = wrap(t - origin - c, period);
            if r.abs() <= half {
                sum += r;
                count += 1;
            }
        }
        if count == 0 {
            return None;
        }
        n = count;
        let step = sum / count as f64;
        c += step;
        if step.abs() < 1e-2 {
            break;
        }
    }
    Some((c, n))
}

fn search_half_width(period: f64) -> f64 {
    (period / 4.0).min(1000.0)
}

/// Recovers slot timing from a receiver stream. PPS markers fix the coarse
/// origin and rate; the folded click histogram fixes the slot phase, and a
/// line through per-second phases refines the rate. The offset is the centre
/// of the recorded timestamps, which the TDC floors to its resolution, so it
/// sits about half a bin before the optical arrival time.
pub fn recover_clock(tags: &[TimeTag], pps: &[u64], nominal_period_ps: f64, tdc_ps: f64) -> Result<SyncState> {
    if !(nominal_period_ps > 0.0 && tdc_ps > 0.0 && tdc_ps < nominal_period_ps) {
        return Err(Error::invalid("slot period and TDC resolution must be positive, resolution below the period"));
    }
    if pps.len() < 2 {
        return Err(Error::invalid(format!("clock recovery needs at least 2 PPS markers, got {}", pps.len())));
    }
    let p0 = pps[0] as f64;
    let pps_points: Vec<(f64, f64, f64)> = pps
        .iter()
        .map(|&p| (((p as f64 - p0) / PPS_PERIOD_PS).round(), p as f64, 1.0))
        .collect();
    let (origin, rate) = weighted_line(&pps_points);
    let drift0 = rate / PPS_PERIOD_PS - 1.0;
    if !(drift0.abs() < 1e-6) {
        return Err(Error::invalid(format!("PPS markers imply drift {drift0:e}, beyond 1e-6")));
    }
    let times: Vec<f64> = tags.iter().filter(|t| t.channel != CH_PPS).map(|t| t.timestamp_ps as f64).collect();
    if times.len() < MIN_TAGS {
        return Err(Error::invalid(format!("clock recovery needs at least {MIN_TAGS} tags, got {}", times.len())));
    }

    let period0 = nominal_period_ps * (1.0 + drift0);
    let (peak, contrast) = fold_peak(&times, origin, period0, tdc_ps);
    if !(contrast >= MIN_CONTRAST) {
        return Err(Error::NoLock { contrast });
    }
    let half = search_half_width(nominal_period_ps);
    let (phase, _) = centroid(&times, origin, period0, peak, half).ok_or(Error::NoLock { contrast })?;

    // per-second phase drift
    let mut segments: Vec<(f64, f64, f64)> = Vec::new();
    let sec = PPS_PERIOD_PS * (1.0 + drift0);
    let mut start = 0;
    while start < times.len() {
        let k = ((times[start] - origin) / sec).floor();
        let mut end = start;
        while end < times.len() && ((times[end] - origin) / sec).floor() == k {
            end += 1;
        }
        let seg = &times[start..end];
        if seg.len() >= MIN_SEGMENT_TAGS {
            if let Some((c, n)) = centroid(seg, origin, period0, phase, half) {
                let mid = seg.iter().sum::<f64>() / seg.len() as f64 - origin;
                segments.push((mid, c - phase, n as f64));
            }
        }
        start = end.max(start + 1);
    }
    let (c0, slope) = if segments.len() >= 2 { weighted_line(&segments) } else { (0.0, 0.0) };
    let drift = (1.0 + drift0) * (1.0 + slope) - 1.0;
    let offset = origin + wrap(phase + c0, period0);
    Ok(SyncState {
        offset_ps: offset,
        drift,
        slot_period_ps: nominal_period_ps,
    })
}

/// Keeps a lock over a long stream: each block's phase residual is added to
/// a weighted line fit and the state is refitted.
#[derive(Debug, Clone)]
pub struct SyncTracker {
    base: SyncState,
    state: SyncState,
    points: Vec<(f64, f64, f64)>,
}

impl SyncTracker {
    /// Locks on an initial stretch of the stream.
    pub fn lock(tags: &[TimeTag], pps: &[u64], nominal_period_ps: f64, tdc_ps: f64) -> Result<Self> {
        let base = recover_clock(tags, pps, nominal_period_ps, tdc_ps)?;
        Ok(Self {
            base,
            state: base,
            points: Vec::new(),
        })
    }

    pub fn state(&self) -> SyncState {
        self.state
    }

    /// Refines the state with one more block and returns the state to use
    /// for it. Blocks with too few clicks leave the state unchanged.
    pub fn update(&mut self, tags: &[TimeTag]) -> SyncState {
        let half = search_half_width(self.base.slot_period_ps);
        let period = self.base.period();
        let origin = self.base.offset_ps;
        let times: Vec<f64> = tags.iter().filter(|t| t.channel != CH_PPS).map(|t| t.timestamp_ps as f64).collect();
        if times.len() < MIN_SEGMENT_TAGS {
            return self.state;
        }
        // start from the current fit so a slow walk cannot escape the search window
        let mid = times.iter().sum::<f64>() / times.len() as f64;
        let predicted = self.state.slot_center(self.state.locate(mid).0) - self.base.slot_center(self.base.locate(mid).0);
        if let Some((c, n)) = centroid(&times, origin, period, predicted, half) {
            self.points.push((mid - self.base.offset_ps, c, n as f64));
            let (c0, c1) = weighted_line(&self.points);
            self.state = SyncState {
                offset_ps: self.base.offset_ps + c0,
                drift: (1.0 + self.base.drift) * (1.0 + c1) - 1.0,
                slot_period_ps: self.base.slot_period_ps,
            };
        }
        self.state
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_range() {
        assert_eq!(wrap(10.0, 20.0), 10.0);
        assert_eq!(wrap(-10.0, 20.0), 10.0);
        assert!((wrap(35.0, 20.0) + 5.0).abs() < 1e-12);
    }

    #[test]
    fn line_fit_exact() {
        let pts: Vec<_> = (0..5).map(|i| (i as f64, 3.0 + 2.0 * i as f64, 1.0)).collect();
        let (a, b) = weighted_line(&pts);
        assert!((a - 3.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_short_input() {
        let tags: Vec<TimeTag> = (0..10).map(|i| TimeTag::new(i * 20_000, 0)).collect();
        assert!(recover_clock(&tags, &[0, 1_000_000_000_000], 20_000.0, 81.0).is_err());
        assert!(recover_clock(&tags, &[0], 20_000.0, 81.0).is_err());
    }
}
