use std::io::{Read, Write};

use rand::{Rng, RngExt};

use crate::{Error, Result};

/// Packed bit string. Bit `i` is bit `i % 64` of word `i / 64`; bits past
/// `len` are kept at zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct KeyBlock {
    words: Vec<u64>,
    len: usize,
}

fn words_for(len: usize) -> usize {
    len.div_ceil(64)
}

impl KeyBlock {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; words_for(len)],
            len,
        }
    }

    pub fn from_words(mut words: Vec<u64>, len: usize) -> Result<Self> {
        if words.len() != words_for(len) {
            return Err(Error::invalid(format!("{} words cannot hold exactly {len} bits", words.len())));
        }
        if len % 64 != 0 {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << (len % 64)) - 1;
            }
        }
        Ok(Self { words, len })
    }

    pub fn from_bits(bits: impl IntoIterator<Item = bool>) -> Self {
        let mut k = Self::default();
        for b in bits {
            k.push(b);
        }
        k
    }

    pub fn random<R: Rng>(len: usize, rng: &mut R) -> Self {
        let words = (0..words_for(len)).map(|_| rng.random::<u64>()).collect();
        Self::from_words(words, len).expect("sized")
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i >> 6] >> (i & 63)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        let m = 1u64 << (i & 63);
        if v {
            self.words[i >> 6] |= m;
        } else {
            self.words[i >> 6] &= !m;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        self.words[i >> 6] ^= 1u64 << (i & 63);
    }

    pub fn push(&mut self, v: bool) {
        if self.len % 64 == 0 {
            self.words.push(0);
        }
        self.len += 1;
        self.set(self.len - 1, v);
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.get(i))
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn parity(&self) -> bool {
        self.words.iter().fold(0u64, |a, w| a ^ w).count_ones() & 1 == 1
    }

    /// Parity of bits `lo..hi`.
    pub fn parity_range(&self, lo: usize, hi: usize) -> bool {
        assert!(lo <= hi && hi <= self.len);
        if lo == hi {
            return false;
        }
        let (wl, wh) = (lo >> 6, (hi - 1) >> 6);
        let lo_mask = !0u64 << (lo & 63);
        let hi_mask = !0u64 >> (63 - ((hi - 1) & 63));
        if wl == wh {
            return (self.words[wl] & lo_mask & hi_mask).count_ones() & 1 == 1;
        }
        let mut acc = (self.words[wl] & lo_mask) ^ (self.words[wh] & hi_mask);
        for w in &self.words[wl + 1..wh] {
            acc ^= w;
        }
        acc.count_ones() & 1 == 1
    }

    /// 64 bits starting at `start`, zero-padded past the end.
    #[inline]
    pub fn word_at(&self, start: usize) -> u64 {
        let (w, s) = (start >> 6, start & 63);
        let lo = self.words.get(w).copied().unwrap_or(0);
        if s == 0 {
            lo
        } else {
            let hi = self.words.get(w + 1).copied().unwrap_or(0);
            (lo >> s) | (hi << (64 - s))
        }
    }

    /// Bits `lo..hi` as a new block.
    pub fn slice(&self, lo: usize, hi: usize) -> KeyBlock {
        assert!(lo <= hi && hi <= self.len);
        let len = hi - lo;
        let words = (0..words_for(len)).map(|i| self.word_at(lo + 64 * i)).collect();
        KeyBlock::from_words(words, len).expect("sized")
    }

    pub fn extend(&mut self, other: &KeyBlock) {
        if self.len % 64 == 0 {
            self.words.extend_from_slice(&other.words);
            self.len += other.len;
            return;
        }
        for b in other.iter() {
            self.push(b);
        }
    }

    pub fn xor(&self, other: &KeyBlock) -> Result<KeyBlock> {
        if self.len != other.len {
            return Err(Error::invalid("xor of keys with different lengths"));
        }
        let words = self.words.iter().zip(&other.words).map(|(a, b)| a ^ b).collect();
        KeyBlock::from_words(words, self.len)
    }

    pub fn hamming_distance(&self, other: &KeyBlock) -> Result<u64> {
        Ok(self.xor(other)?.count_ones())
    }

    /// Serialized form: 8-byte little-endian bit count, then the bits packed
    /// little-endian (bit 0 is the least significant bit of the first byte).
    pub fn to_bytes(&self) -> Vec<u8> {
        let nbytes = self.len.div_ceil(8);
        let mut out = Vec::with_capacity(8 + nbytes);
        out.extend_from_slice(&(self.len as u64).to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.truncate(8 + nbytes);
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 8];
        r.read_exact(&mut head).map_err(|e| Error::Malformed {
            what: "key file",
            offset: 0,
            reason: format!("missing length header: {e}"),
        })?;
        let len = u64::from_le_bytes(head) as usize;
        let nbytes = len.div_ceil(8);
        let mut body = Vec::with_capacity(nbytes);
        r.take(nbytes as u64 + 1).read_to_end(&mut body)?;
        if body.len() != nbytes {
            return Err(Error::Malformed {
                what: "key file",
                offset: 8 + body.len().min(nbytes) as u64,
                reason: format!("expected {nbytes} payload bytes, found {}", body.len()),
            });
        }
        let mut words = Vec::with_capacity(words_for(len));
        for chunk in body.chunks(8) {
            let mut b = [0u8; 8];
            b[..chunk.len()].copy_from_slice(chunk);
            words.push(u64::from_le_bytes(b));
        }
        if len % 8 != 0 && body[nbytes - 1] >> (len % 8) != 0 {
            return Err(Error::Malformed {
                what: "key file",
                offset: 8 + nbytes as u64 - 1,
                reason: "padding bits are not zero".into(),
            });
        }
        Self::from_words(words, len)
    }
}

/// A key that passed correctness verification. Immutable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedKey(KeyBlock);

impl VerifiedKey {
    pub(crate) fn new(k: KeyBlock) -> Self {
        Self(k)
    }

    pub fn block(&self) -> &KeyBlock {
        &self.0
    }

    pub fn into_inner(self) -> KeyBlock {
        self.0
    }
}

impl AsRef<KeyBlock> for VerifiedKey {
    fn as_ref(&self) -> &KeyBlock {
        &self.0
    }
}
