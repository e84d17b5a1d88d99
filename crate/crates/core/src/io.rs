//! Binary record files and JSON/CSV artifacts.
//!
//! Both record files are little-endian sequences of 9-byte records: an
//! 8-byte unsigned integer followed by one byte. In `tags.bin` these are a
//! picosecond timestamp and a channel (0 = Z0, 1 = Z1, 2 = X+, 3 = X-,
//! 255 = PPS marker); in `alice.bin` a slot index and the packed flags of
//! [`PulseRecord::flags`].

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::channel::{TimeTag, CH_PPS};
use crate::error::{Error, Result};
use crate::experiment::SummaryRow;
use crate::protocol::PulseRecord;

pub const RECORD_BYTES: usize = 9;

fn encode(word: u64, byte: u8) -> [u8; RECORD_BYTES] {
    let mut r = [0u8; RECORD_BYTES];
    r[..8].copy_from_slice(&word.to_le_bytes());
    r[8] = byte;
    r
}

/// Reads raw 9-byte records, tracking the byte offset.
struct RecordReader<R> {
    inner: R,
    offset: u64,
    what: &'static str,
    done: bool,
}

impl<R: Read> RecordReader<R> {
    fn new(inner: R, what: &'static str) -> Self {
        Self { inner, offset: 0, what, done: false }
    }

    fn next_raw(&mut self) -> Option<Result<(u64, u64, u8)>> {
        if self.done {
            return None;
        }
        let mut buf = [0u8; RECORD_BYTES];
        let mut filled = 0;
        while filled < RECORD_BYTES {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            }
        }
        let at = self.offset;
        if filled == 0 {
            self.done = true;
            return None;
        }
        if filled < RECORD_BYTES {
            self.done = true;
            return Some(Err(Error::Malformed {
                what: self.what,
                offset: at,
                reason: format!("truncated record ({filled} of {RECORD_BYTES} bytes)"),
            }));
        }
        self.offset += RECORD_BYTES as u64;
        let word = u64::from_le_bytes(buf[..8].try_into().expect("8 bytes"));
        Some(Ok((at, word, buf[8])))
    }
}

/// Streaming reader for `tags.bin`.
pub struct TagReader<R> {
    raw: RecordReader<R>,
}

impl<R: Read> TagReader<R> {
    pub fn new(inner: R) -> Self {
        Self { raw: RecordReader::new(inner, "time-tag record") }
    }
}

impl TagReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(BufReader::with_capacity(1 << 20, File::open(path)?)))
    }
}

impl<R: Read> Iterator for TagReader<R> {
    type Item = Result<TimeTag>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.raw.next_raw()?.and_then(|(at, ts, ch)| {
            if ch > 3 && ch != CH_PPS {
                self.raw.done = true;
                return Err(Error::Malformed {
                    what: "time-tag record",
                    offset: at + 8,
                    reason: format!("unknown channel {ch}"),
                });
            }
            Ok(TimeTag::new(ts, ch))
        }))
    }
}

/// Streaming reader for `alice.bin`.
pub struct AliceReader<R> {
    raw: RecordReader<R>,
}

impl<R: Read> AliceReader<R> {
    pub fn new(inner: R) -> Self {
        Self { raw: RecordReader::new(inner, "transmitter record") }
    }
}

impl AliceReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(BufReader::with_capacity(1 << 20, File::open(path)?)))
    }
}

impl<R: Read> Iterator for AliceReader<R> {
    type Item = Result<PulseRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.raw.next_raw()?.and_then(|(at, slot, flags)| {
            PulseRecord::from_flags(slot, flags).map_err(|e| {
                self.raw.done = true;
                Error::Malformed {
                    what: "transmitter record",
                    offset: at + 8,
                    reason: e.to_string(),
                }
            })
        }))
    }
}

pub fn write_tags<W: Write>(w: &mut W, tags: &[TimeTag]) -> Result<()> {
    for t in tags {
        w.write_all(&encode(t.timestamp_ps, t.channel))?;
    }
    Ok(())
}

pub fn write_alice<W: Write>(w: &mut W, records: &[PulseRecord]) -> Result<()> {
    for r in records {
        w.write_all(&encode(r.slot, r.flags()))?;
    }
    Ok(())
}

pub fn read_tags(path: &Path) -> Result<Vec<TimeTag>> {
    TagReader::open(path)?.collect()
}

pub fn read_alice(path: &Path) -> Result<Vec<PulseRecord>> {
    AliceReader::open(path)?.collect()
}

/// Buffered file writer.
pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::with_capacity(1 << 20, File::create(path)?))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub const CSV_HEADER: &str = "t_s,tdr_hz,snr,qber_z,qber_x,sifted_bps,skr_inf_bps,skr_f_bps";

pub fn write_summary_csv<W: Write>(w: &mut W, rows: &[SummaryRow]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.t_s,
            r.tdr_hz,
            r.snr.map(|v| v.to_string()).unwrap_or_default(),
            r.qber_z, r.qber_x, r.sifted_bps, r.skr_inf_bps, r.skr_f_bps
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Basis, Intensity};

    #[test]
    fn tags_round_trip() {
        let tags = vec![TimeTag::new(0, CH_PPS), TimeTag::new(12_345, 2), TimeTag::new(u64::MAX, 3)];
        let mut buf = Vec::new();
        write_tags(&mut buf, &tags).unwrap();
        assert_eq!(buf.len(), 27);
        let back: Vec<TimeTag> = TagReader::new(&buf[..]).collect::<Result<_>>().unwrap();
        assert_eq!(back, tags);
    }

    #[test]
    fn truncated_tag_file_names_offset() {
        let mut buf = Vec::new();
        write_tags(&mut buf, &[TimeTag::new(1, 0), TimeTag::new(2, 1)]).unwrap();
        buf.truncate(13);
        let err = TagReader::new(&buf[..]).collect::<Result<Vec<_>>>().unwrap_err();
        assert!(matches!(err, Error::Malformed { offset: 9, .. }), "{err}");
    }

    #[test]
    fn bad_channel_rejected() {
        let mut buf = Vec::new();
        write_tags(&mut buf, &[TimeTag::new(1, 0), TimeTag::new(2, 7)]).unwrap();
        let err = TagReader::new(&buf[..]).collect::<Result<Vec<_>>>().unwrap_err();
        assert!(matches!(err, Error::Malformed { offset: 17, .. }));
    }

    #[test]
    fn alice_round_trip_and_bad_flags() {
        let recs = vec![
            PulseRecord { slot: 3, basis: Basis::Z, bit: 1, intensity: Intensity::Mu2 },
            PulseRecord { slot: 9, basis: Basis::X, bit: 0, intensity: Intensity::Mu1 },
        ];
        let mut buf = Vec::new();
        write_alice(&mut buf, &recs).unwrap();
        let back: Vec<PulseRecord> = AliceReader::new(&buf[..]).collect::<Result<_>>().unwrap();
        assert_eq!(back, recs);
        buf[17] = 0b011;
        let err = AliceReader::new(&buf[..]).collect::<Result<Vec<_>>>().unwrap_err();
        assert!(matches!(err, Error::Malformed { offset: 17, .. }));
    }
}
