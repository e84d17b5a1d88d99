use serde::{Deserialize, Serialize};

use crate::analytic::{evaluate_with, Scenario};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::protocol::ProtocolParams;

/// Grids searched by the optimizer. Intensities share one grid and the
/// probabilities (Alice's and Bob's basis choice, decoy choice) another.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub mu_min: f64,
    pub mu_max: f64,
    pub mu_step: f64,
    pub prob_min: f64,
    pub prob_max: f64,
    pub prob_step: f64,
    pub max_sweeps: u32,
    /// Number of step halvings in the final local refinement.
    pub refine_levels: u32,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            mu_min: 0.05,
            mu_max: 1.0,
            mu_step: 0.01,
            prob_min: 0.5,
            prob_max: 0.99,
            prob_step: 0.01,
            max_sweeps: 20,
            refine_levels: 4,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64, step: f64| lo.is_finite() && hi.is_finite() && step > 0.0 && lo <= hi;
        if !ok(self.mu_min, self.mu_max, self.mu_step) || self.mu_min <= 0.0 {
            return Err(Error::invalid("intensity grid must be a non-empty positive range with positive step"));
        }
        if !ok(self.prob_min, self.prob_max, self.prob_step) || self.prob_min <= 0.0 || self.prob_max >= 1.0 {
            return Err(Error::invalid("probability grid must be a non-empty range inside (0, 1) with positive step"));
        }
        Ok(())
    }

    fn bounds(&self, coord: usize) -> (f64, f64) {
        if coord < 4 {
            (self.mu_min, self.mu_max)
        } else {
            (self.prob_min, self.prob_max)
        }
    }

    fn grid(&self, coord: usize) -> Vec<f64> {
        let (lo, hi) = self.bounds(coord);
        let step = if coord < 4 { self.mu_step } else { self.prob_step };
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| lo + i as f64 * step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub params: ProtocolParams,
    pub skr: f64,
}

const COORDS: usize = 7;

fn get(p: &ProtocolParams, c: usize) -> f64 {
    match c {
        0 => p.mu1_z,
        1 => p.mu2_z,
        2 => p.mu1_x,
        3 => p.mu2_x,
        4 => p.p_z_alice,
        5 => p.p_mu1,
        _ => p.p_z_bob,
    }
}

fn set(p: &mut ProtocolParams, c: usize, v: f64) {
    match c {
        0 => p.mu1_z = v,
        1 => p.mu2_z = v,
        2 => p.mu1_x = v,
        3 => p.mu2_x = v,
        4 => p.p_z_alice = v,
        5 => p.p_mu1 = v,
        _ => p.p_z_bob = v,
    }
}

fn objective(p: &ProtocolParams, encoder: &Encoder, scenario: &Scenario) -> f64 {
    if p.validate().is_err() {
        return 0.0;
    }
    evaluate_with(p, encoder, scenario).map(|r| r.skr_f).unwrap_or(0.0)
}

/// Maximizes the modeled finite-size key rate by coordinate descent over
/// the grids, starting from `start`, followed by local step-halving. Ties
/// keep the smaller value.
pub fn optimize_operating_point(start: &ProtocolParams, scenario: &Scenario, space: &SearchSpace) -> Result<OptimizeResult> {
    space.validate()?;
    start.validate()?;
    let encoder = Encoder::new(scenario.encoder)?;
    let grids: Vec<Vec<f64>> = (0..COORDS).map(|c| space.grid(c)).collect();

    let mut best = *start;
    let mut best_skr = objective(&best, &encoder, scenario);
    for _ in 0..space.max_sweeps {
        let mut moved = false;
        for (c, grid) in grids.iter().enumerate() {
            let mut cand_best = best;
            let mut cand_skr = best_skr;
            for &v in grid {
                let mut p = best;
                set(&mut p, c, v);
                let s = objective(&p, &encoder, scenario);
                if s > cand_skr || (s == cand_skr && s > 0.0 && v < get(&cand_best, c)) {
                    cand_best = p;
                    cand_skr = s;
                }
            }
            if cand_best != best {
                moved = true;
                best = cand_best;
                best_skr = cand_skr;
            }
        }
        if !moved {
            break;
        }
    }

    for level in 1..=space.refine_levels {
        let scale = 0.5f64.powi(level as i32);
        for c in 0..COORDS {
            let step = if c < 4 { space.mu_step } else { space.prob_step } * scale;
            let (lo, hi) = space.bounds(c);
            loop {
                let mut improved = false;
                for dir in [-1.0, 1.0] {
                    let v = get(&best, c) + dir * step;
                    if v < lo || v > hi {
                        continue;
                    }
                    let mut p = best;
                    set(&mut p, c, v);
                    let s = objective(&p, &encoder, scenario);
                    if s > best_skr {
                        best = p;
                        best_skr = s;
                        improved = true;
                        break;
                    }
                }
                if !improved {
                    break;
                }
            }
        }
    }

    if !(best_skr > 0.0) {
        return Err(Error::Infeasible("no operating point in the search space yields a positive key rate".into()));
    }
    Ok(OptimizeResult { params: best, skr: best_skr })
}
