//! Cascade information reconciliation.
//!
//! Alice and Bob are separate objects that talk only through [`Transport`].
//! Bob drives the protocol: he asks for the parities of ranges of Alice's
//! (permuted) key, compares them with his own and corrects his bits. Only
//! Alice's answers carry information about the key; every parity bit and
//! verification tag bit she sends is counted as leaked.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{binary_entropy, tag64, KeyBlock};
use crate::rng::{Domain, RandomSource};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    /// Keys are reconciled in independent frames of at most this many bits.
    pub frame_bits: usize,
    /// Top-level block size of each scheduled pass, in units of `1/qber`.
    pub block_factors: Vec<f64>,
    /// Growth of the block size for passes beyond the schedule.
    pub extra_growth: f64,
    /// Passes allowed in total, including extra ones run after a failed
    /// frame check.
    pub max_passes: usize,
    /// Close each frame with a 64-bit tag comparison.
    pub frame_check: bool,
    /// Public randomness shared by both parties (shuffles, tag seeds).
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self::tuned()
    }
}

impl CascadeConfig {
    /// Four passes, `k1 = 0.73/q`, doubling.
    pub fn classic() -> Self {
        Self {
            frame_bits: 1 << 20,
            block_factors: vec![0.73, 1.46, 2.92, 5.84],
            extra_growth: 2.0,
            max_passes: 12,
            frame_check: true,
            seed: 0,
        }
    }

    /// Larger blocks than [`classic`](Self::classic): fewer first-pass
    /// parities, with back-tracking in the later passes catching the
    /// even-error blocks.
    pub fn tuned() -> Self {
        Self {
            block_factors: vec![1.2, 3.6, 7.2, 14.4],
            ..Self::classic()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_bits < 64 {
            return Err(Error::invalid("Cascade frames must hold at least 64 bits"));
        }
        if self.block_factors.is_empty() || self.block_factors.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::invalid("Cascade needs positive block factors"));
        }
        if self.max_passes < self.block_factors.len() || self.extra_growth < 1.0 {
            return Err(Error::invalid("max_passes must cover the schedule and growth must be >= 1"));
        }
        Ok(())
    }

    fn block_size(&self, pass: usize, q: f64, n: usize) -> usize {
        let k = match self.block_factors.get(pass) {
            Some(f) => (f / q).ceil(),
            None => {
                let last = self.block_factors.len() - 1;
                (self.block_factors[last] / q).ceil() * self.extra_growth.powi((pass - last) as i32)
            }
        };
        (k.min(n as f64) as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconciliationReport {
    pub leaked_bits: u64,
    pub passes: usize,
    pub corrected_errors: u64,
    /// `leaked_bits / (n h(corrected_errors / n))`; absent when nothing
    /// was corrected.
    pub f_ec_measured: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Parities { frame: u32, pass: u8, ranges: Vec<(u32, u32)> },
    Tag { frame: u32, round: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Parities(Vec<bool>),
    Tag(u64),
}

impl Response {
    /// Key-dependent bits carried by the message.
    pub fn leaked_bits(&self) -> u64 {
        match self {
            Response::Parities(p) => p.len() as u64,
            Response::Tag(_) => 64,
        }
    }
}

pub trait Transport {
    fn call(&mut self, req: Request) -> Result<Response>;
}

/// Frame boundaries shared by both parties.
fn frames(n: usize, frame_bits: usize) -> Vec<(usize, usize)> {
    if n == 0 {
        return Vec::new();
    }
    let count = n.div_ceil(frame_bits);
    (0..count).map(|f| (f * n / count, (f + 1) * n / count)).collect()
}

fn permutation(seed: u64, frame: u32, pass: u8, n: usize) -> Vec<u32> {
    let mut p: Vec<u32> = (0..n as u32).collect();
    if pass > 0 {
        let mut rng = RandomSource::new(seed).stream(Domain::Reconcile, ((frame as u64) << 8) | pass as u64);
        p.shuffle(&mut rng);
    }
    p
}

fn permuted(key: &KeyBlock, perm: &[u32]) -> KeyBlock {
    let mut out = KeyBlock::zeros(perm.len());
    for (q, &x) in perm.iter().enumerate() {
        if key.get(x as usize) {
            out.set(q, true);
        }
    }
    out
}

fn tag_seed(seed: u64, frame: u32, round: u8) -> u64 {
    use rand::RngExt;
    RandomSource::new(seed)
        .stream(Domain::Verify, ((frame as u64) << 8) | round as u64)
        .random()
}

/// Alice's side: answers parity and tag queries about her key.
pub struct AliceParty {
    key: KeyBlock,
    frames: Vec<(usize, usize)>,
    seed: u64,
    current: Option<(u32, KeyBlock)>,
    passes: HashMap<u8, KeyBlock>,
}

impl AliceParty {
    pub fn new(key: KeyBlock, config: &CascadeConfig) -> Self {
        Self {
            frames: frames(key.len(), config.frame_bits),
            key,
            seed: config.seed,
            current: None,
            passes: HashMap::new(),
        }
    }

    fn frame(&mut self, f: u32) -> Result<&KeyBlock> {
        if self.current.as_ref().map(|c| c.0) != Some(f) {
            let &(lo, hi) = self
                .frames
                .get(f as usize)
                .ok_or_else(|| Error::invalid(format!("unknown frame {f}")))?;
            self.current = Some((f, self.key.slice(lo, hi)));
            self.passes.clear();
        }
        Ok(&self.current.as_ref().unwrap().1)
    }

    pub fn handle(&mut self, req: Request) -> Result<Response> {
        match req {
            Request::Parities { frame, pass, ranges } => {
                self.frame(frame)?;
                if !self.passes.contains_key(&pass) {
                    let key = &self.current.as_ref().unwrap().1;
                    let bits = permuted(key, &permutation(self.seed, frame, pass, key.len()));
                    self.passes.insert(pass, bits);
                }
                let bits = &self.passes[&pass];
                let mut out = Vec::with_capacity(ranges.len());
                for (lo, hi) in ranges {
                    if lo > hi || hi as usize > bits.len() {
                        return Err(Error::invalid(format!("parity range {lo}..{hi} out of bounds")));
                    }
                    out.push(bits.parity_range(lo as usize, hi as usize));
                }
                Ok(Response::Parities(out))
            }
            Request::Tag { frame, round } => {
                let seed = tag_seed(self.seed, frame, round);
                Ok(Response::Tag(tag64(self.frame(frame)?, seed)))
            }
        }
    }
}

/// In-process transport to an [`AliceParty`], counting what Alice reveals.
pub struct LocalTransport {
    pub alice: AliceParty,
    pub revealed_bits: u64,
    pub messages: u64,
}

impl LocalTransport {
    pub fn new(alice: AliceParty) -> Self {
        Self {
            alice,
            revealed_bits: 0,
            messages: 0,
        }
    }
}

impl Transport for LocalTransport {
    fn call(&mut self, req: Request) -> Result<Response> {
        let resp = self.alice.handle(req)?;
        self.revealed_bits += resp.leaked_bits();
        self.messages += 1;
        Ok(resp)
    }
}

struct BobFrame<'a, T: Transport> {
    transport: &'a mut T,
    config: &'a CascadeConfig,
    frame: u32,
    n: usize,
    q: f64,
    sizes: Vec<usize>,
    perms: Vec<Vec<u32>>,
    invs: Vec<Vec<u32>>,
    bits: Vec<KeyBlock>,
    initial: Option<KeyBlock>,
    mismatch: Vec<Vec<bool>>,
    known: HashMap<(u8, u32, u32), bool>,
    odd: BTreeSet<(usize, u8, u32)>,
    leaked: u64,
    corrected: u64,
}

impl<T: Transport> BobFrame<'_, T> {
    fn parities(&mut self, pass: u8, ranges: Vec<(u32, u32)>) -> Result<Vec<bool>> {
        let expect = ranges.len();
        let resp = self.transport.call(Request::Parities {
            frame: self.frame,
            pass,
            ranges,
        })?;
        self.leaked += resp.leaked_bits();
        match resp {
            Response::Parities(p) if p.len() == expect => Ok(p),
            _ => Err(Error::Integrity("unexpected parity response".into())),
        }
    }

    fn block_range(&self, pass: usize, b: usize) -> (usize, usize) {
        let k = self.sizes[pass];
        (b * k, ((b + 1) * k).min(self.n))
    }

    fn set_mismatch(&mut self, pass: usize, b: usize, m: bool) {
        self.mismatch[pass][b] = m;
        let key = (self.sizes[pass], pass as u8, b as u32);
        if m {
            self.odd.insert(key);
        } else {
            self.odd.remove(&key);
        }
    }

    fn flip(&mut self, x: usize) {
        for r in 0..self.bits.len() {
            let q = if r == 0 { x } else { self.invs[r][x] as usize };
            self.bits[r].flip(q);
            let b = q / self.sizes[r];
            let m = !self.mismatch[r][b];
            self.set_mismatch(r, b, m);
        }
        self.corrected += 1;
    }

    /// Locates one error inside a block whose parities disagree.
    fn search(&mut self, pass: usize, mut lo: usize, mut hi: usize) -> Result<usize> {
        let p = pass as u8;
        let mut parent = self.known[&(p, lo as u32, hi as u32)];
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            let left = match self.known.get(&(p, lo as u32, mid as u32)) {
                Some(&v) => v,
                None => {
                    let v = self.parities(p, vec![(lo as u32, mid as u32)])?[0];
                    self.known.insert((p, lo as u32, mid as u32), v);
                    v
                }
            };
            if left != self.bits[pass].parity_range(lo, mid) {
                hi = mid;
                parent = left;
            } else {
                let right = parent ^ left;
                self.known.insert((p, mid as u32, hi as u32), right);
                lo = mid;
                parent = right;
            }
        }
        Ok(lo)
    }

    fn run_pass(&mut self) -> Result<()> {
        let pass = self.bits.len();
        if pass > u8::MAX as usize {
            return Err(Error::invalid("too many Cascade passes"));
        }
        let k = self.config.block_size(pass, self.q, self.n);
        let perm = permutation(self.config.seed, self.frame, pass as u8, self.n);
        let mut inv = vec![0u32; if pass == 0 { 0 } else { self.n }];
        if pass > 0 {
            for (q, &x) in perm.iter().enumerate() {
                inv[x as usize] = q as u32;
            }
        }
        let bits = match self.initial.take() {
            Some(identity) => identity,
            None => permuted(&self.bits[0], &perm),
        };
        self.sizes.push(k);
        self.bits.push(bits);
        self.perms.push(if pass == 0 { Vec::new() } else { perm });
        self.invs.push(inv);
        let nblocks = self.n.div_ceil(k);
        self.mismatch.push(vec![false; nblocks]);
        let ranges: Vec<(u32, u32)> = (0..nblocks)
            .map(|b| {
                let (lo, hi) = self.block_range(pass, b);
                (lo as u32, hi as u32)
            })
            .collect();
        let alice = self.parities(pass as u8, ranges.clone())?;
        for (b, (&(lo, hi), a)) in ranges.iter().zip(alice).enumerate() {
            self.known.insert((pass as u8, lo, hi), a);
            if a != self.bits[pass].parity_range(lo as usize, hi as usize) {
                self.set_mismatch(pass, b, true);
            }
        }
        while let Some(&(_, p, b)) = self.odd.iter().next() {
            let (lo, hi) = self.block_range(p as usize, b as usize);
            let q = self.search(p as usize, lo, hi)?;
            let x = if p == 0 { q } else { self.perms[p as usize][q] as usize };
            self.flip(x);
        }
        Ok(())
    }

    fn check(&mut self, round: u8) -> Result<bool> {
        let resp = self.transport.call(Request::Tag { frame: self.frame, round })?;
        self.leaked += resp.leaked_bits();
        match resp {
            Response::Tag(t) => Ok(t == tag64(&self.bits[0], tag_seed(self.config.seed, self.frame, round))),
            _ => Err(Error::Integrity("unexpected tag response".into())),
        }
    }
}

/// Bob's side of Cascade over an arbitrary transport.
pub fn reconcile<T: Transport>(
    bob: &KeyBlock,
    qber_estimate: f64,
    config: &CascadeConfig,
    transport: &mut T,
) -> Result<(KeyBlock, ReconciliationReport)> {
    config.validate()?;
    if !(qber_estimate > 0.0 && qber_estimate <= 0.11) {
        return Err(Error::invalid(format!("QBER estimate {qber_estimate} outside (0, 0.11]")));
    }
    let mut out = KeyBlock::default();
    let (mut leaked, mut corrected, mut max_passes) = (0u64, 0u64, 0usize);
    for (f, &(lo, hi)) in frames(bob.len(), config.frame_bits).iter().enumerate() {
        let mut st = BobFrame {
            transport: &mut *transport,
            config,
            frame: f as u32,
            n: hi - lo,
            q: qber_estimate,
            sizes: Vec::new(),
            perms: Vec::new(),
            invs: Vec::new(),
            bits: Vec::new(),
            initial: Some(bob.slice(lo, hi)),
            mismatch: Vec::new(),
            known: HashMap::new(),
            odd: BTreeSet::new(),
            leaked: 0,
            corrected: 0,
        };
        let mut ok = false;
        for pass in 0..config.max_passes {
            st.run_pass()?;
            let scheduled_done = pass + 1 >= config.block_factors.len();
            if scheduled_done {
                if !config.frame_check {
                    ok = true;
                    break;
                }
                let round = (pass + 1 - config.block_factors.len()) as u8;
                if st.check(round)? {
                    ok = true;
                    break;
                }
            }
        }
        if !ok {
            return Err(Error::ReconciliationFailed {
                passes: config.max_passes,
                residual: st.odd.len(),
            });
        }
        max_passes = max_passes.max(st.bits.len());
        leaked += st.leaked;
        corrected += st.corrected;
        out.extend(&st.bits[0]);
    }
    let n = bob.len();
    let h = if n > 0 { binary_entropy(corrected as f64 / n as f64)? } else { 0.0 };
    Ok((
        out,
        ReconciliationReport {
            leaked_bits: leaked,
            passes: max_passes,
            corrected_errors: corrected,
            f_ec_measured: (h > 0.0).then(|| leaked as f64 / (n as f64 * h)),
        },
    ))
}

/// Reconciles Bob's key against Alice's with in-process parties.
pub fn cascade_correct(
    alice: &KeyBlock,
    bob: &KeyBlock,
    qber_estimate: f64,
    config: &CascadeConfig,
) -> Result<(KeyBlock, ReconciliationReport)> {
    if alice.len() != bob.len() {
        return Err(Error::invalid("Cascade needs keys of equal length"));
    }
    let mut t = LocalTransport::new(AliceParty::new(alice.clone(), config));
    reconcile(bob, qber_estimate, config, &mut t)
}
