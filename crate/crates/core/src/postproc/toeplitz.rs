//! Toeplitz hashing over GF(2).
//!
//! For an `n`-bit input `x`, an `l`-bit output and a seed `s` of `n + l - 1`
//! bits, the matrix is `T[i][j] = s[i - j + n - 1]`, so
//! `y_i = sum_j x_j s[i + n - 1 - j]`, one entry of the linear convolution
//! of `x` and `s`.

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::KeyBlock;
use crate::{Error, Result};

pub fn seed_len(n: usize, l: usize) -> usize {
    (n + l).saturating_sub(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Word-parallel for small products, FFT otherwise.
    Auto,
    Naive,
    /// Chunked FFT convolution with transforms of `2^log2_size` points.
    Fft { log2_size: u32 },
}

const AUTO_NAIVE_LIMIT: u128 = 1 << 30;
const AUTO_FFT_LOG2: u32 = 24;

pub fn toeplitz_pa(key: &KeyBlock, out_len: usize, seed: &KeyBlock) -> Result<KeyBlock> {
    toeplitz_with(key, out_len, seed, Method::Auto)
}

pub fn toeplitz_with(key: &KeyBlock, out_len: usize, seed: &KeyBlock, method: Method) -> Result<KeyBlock> {
    let n = key.len();
    if out_len > n {
        return Err(Error::invalid(format!("output length {out_len} exceeds input length {n}")));
    }
    if out_len == 0 {
        return Ok(KeyBlock::zeros(0));
    }
    if seed.len() != seed_len(n, out_len) {
        return Err(Error::invalid(format!(
            "seed has {} bits, expected {}",
            seed.len(),
            seed_len(n, out_len)
        )));
    }
    match method {
        Method::Naive => Ok(naive(key, out_len, seed)),
        Method::Fft { log2_size } => fft(key, out_len, seed, log2_size),
        Method::Auto => {
            if (n as u128) * (out_len as u128) <= AUTO_NAIVE_LIMIT {
                Ok(naive(key, out_len, seed))
            } else {
                let need = (n.max(out_len) * 2).next_power_of_two().trailing_zeros();
                fft(key, out_len, seed, need.min(AUTO_FFT_LOG2))
            }
        }
    }
}

fn reversed(k: &KeyBlock) -> KeyBlock {
    let n = k.len();
    KeyBlock::from_bits((0..n).map(|j| k.get(n - 1 - j)))
}

/// `y_i = parity(rev(x) & s[i .. i + n])`.
fn naive(key: &KeyBlock, l: usize, seed: &KeyBlock) -> KeyBlock {
    let xr = reversed(key);
    let words = xr.words();
    let mut out = KeyBlock::zeros(l);
    for i in 0..l {
        let mut acc = 0u64;
        for (w, xw) in words.iter().enumerate() {
            acc ^= xw & seed.word_at(i + 64 * w);
        }
        if acc.count_ones() & 1 == 1 {
            out.set(i, true);
        }
    }
    out
}

fn fft(key: &KeyBlock, l: usize, seed: &KeyBlock, log2_size: u32) -> Result<KeyBlock> {
    if !(2..=30).contains(&log2_size) {
        return Err(Error::invalid(format!("FFT size 2^{log2_size} out of range")));
    }
    let n = key.len();
    let size = 1usize << log2_size;
    let (lc, cc) = (size / 2, size / 2);
    let n_out = l.div_ceil(lc);
    let n_in = n.div_ceil(cc);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut scratch = vec![Complex64::default(); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
    let mut z = vec![Complex64::default(); size];
    let mut acc = vec![Complex64::default(); size];
    let mut out = KeyBlock::zeros(l);
    let slen = seed.len() as i64;

    for o in 0..n_out {
        acc.iter_mut().for_each(|a| *a = Complex64::default());
        for c in 0..n_in {
            let base = (o * lc) as i64 - (c * cc) as i64 + n as i64 - 1;
            let w0 = base - (cc as i64 - 1);
            for (t, zt) in z.iter_mut().enumerate() {
                let si = w0 + t as i64;
                let wv = if t < lc + cc - 1 && (0..slen).contains(&si) && seed.get(si as usize) { 1.0 } else { 0.0 };
                let xi = c * cc + t;
                let xv = if t < cc && xi < n && key.get(xi) { 1.0 } else { 0.0 };
                *zt = Complex64::new(wv, xv);
            }
            fwd.process_with_scratch(&mut z, &mut scratch);
            for k in 0..size {
                let zk = z[k];
                let zc = z[(size - k) % size].conj();
                let wk = (zk + zc) * 0.5;
                let xk = (zk - zc) * Complex64::new(0.0, -0.5);
                acc[k] += wk * xk;
            }
        }
        inv.process_with_scratch(&mut acc, &mut scratch);
        let scale = 1.0 / size as f64;
        for a in 0..lc {
            let i = o * lc + a;
            if i >= l {
                break;
            }
            let v = acc[a + cc - 1].re * scale;
            let r = v.round();
            debug_assert!((v - r).abs() < 0.25, "convolution rounding error {v}");
            if (r as i64) & 1 == 1 {
                out.set(i, true);
            }
        }
    }
    Ok(out)
}
