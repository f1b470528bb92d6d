//! The little-endian `YLDH` container.
//!
//! Header: magic `YLDH`, version u32, record count u32, bands u32, bins u32,
//! intervals u32, record type u8 (0 synthetic samples, 1 external samples,
//! 2 named parameter tensors).
//!
//! Sample record: county i32, year i32, yield f32, grid f32 × bands·bins·intervals.
//! Parameter record: name length u32, UTF-8 name, rank u32, extents u32 × rank,
//! values f32 × product(extents). For parameter files the three header
//! extents hold the model input channels, height and width.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, HistogramSample, Provenance};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"YLDH";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 5 + 1;
const PARAMS_TYPE: u8 = 2;

/// Named `f32` tensors plus the model input extents they were trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFile {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Header {
    count: usize,
    dims: [usize; 3],
    kind: u8,
}

fn write_header(w: &mut impl Write, count: usize, dims: [usize; 3], kind: u8) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [count, dims[0], dims[1], dims[2]] {
        w.write_all(&to_u32(v)?.to_le_bytes())?;
    }
    w.write_all(&[kind])?;
    Ok(())
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| FormatError::Malformed(format!("{v} does not fit in u32")).into())
}

pub fn write_dataset_to(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    ds.validate()?;
    write_header(w, ds.len(), [ds.bands, ds.bins, ds.intervals], ds.provenance.code())?;
    let mut buf = Vec::with_capacity(12 + 4 * ds.bands * ds.bins * ds.intervals);
    for s in &ds.samples {
        buf.clear();
        buf.extend_from_slice(&s.county_id.to_le_bytes());
        buf.extend_from_slice(&s.year.to_le_bytes());
        buf.extend_from_slice(&s.yield_bu_ac.to_le_bytes());
        for v in s.grid.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_params_to(file: &ParamFile, w: &mut impl Write) -> Result<()> {
    write_header(w, file.tensors.len(), [file.channels, file.height, file.width], PARAMS_TYPE)?;
    for (name, t) in &file.tensors {
        w.write_all(&to_u32(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&to_u32(t.rank())?.to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&to_u32(e)?.to_le_bytes())?;
        }
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn write_params(file: &ParamFile, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params_to(file, &mut w)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn i32(&mut self) -> Option<i32> {
        self.take(4).map(|b| i32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let raw = self.take(n.checked_mul(4)?)?;
        Some(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        )
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn read_header(c: &mut Cursor) -> Result<Header, FormatError> {
    if c.bytes.len() >= 4 && &c.bytes[..4] != MAGIC {
        let found = c.bytes[..4].try_into().unwrap();
        return Err(FormatError::BadMagic { found });
    }
    if c.bytes.len() < HEADER_LEN {
        return Err(FormatError::TruncatedHeader);
    }
    c.take(4);
    let version = c.u32().unwrap();
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = c.u32().unwrap() as usize;
    let dims = [c.u32().unwrap() as usize, c.u32().unwrap() as usize, c.u32().unwrap() as usize];
    let kind = c.take(1).unwrap()[0];
    Ok(Header { count, dims, kind })
}

pub fn read_dataset_from(r: &mut impl Read) -> Result<Dataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_dataset(&bytes)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_dataset(&std::fs::read(path)?)
}

fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { bytes, pos: 0 };
    let h = read_header(&mut c)?;
    let provenance = match h.kind {
        0 => Provenance::Synthetic,
        1 => Provenance::External,
        found => {
            return Err(FormatError::RecordType {
                found,
                expected: "histogram samples",
            }
            .into())
        }
    };
    let [bands, bins, intervals] = h.dims;
    let per = bands
        .checked_mul(bins)
        .and_then(|v| v.checked_mul(intervals))
        .ok_or_else(|| FormatError::Malformed(format!("grid extents {:?} overflow", h.dims)))?;
    if per == 0 {
        return Err(FormatError::Malformed(format!("grid extents {:?} must be positive", h.dims)).into());
    }
    let record_len = 12 + 4 * per;
    if h.count.saturating_mul(record_len) > c.remaining() {
        let sample = c.remaining() / record_len;
        return Err(FormatError::Truncated { sample }.into());
    }
    let mut samples = Vec::with_capacity(h.count);
    for sample in 0..h.count {
        let truncated = || FormatError::Truncated { sample };
        let county_id = c.i32().ok_or_else(truncated)?;
        let year = c.i32().ok_or_else(truncated)?;
        let yield_bu_ac = c.f32().ok_or_else(truncated)?;
        let data = c.f32s(per).ok_or_else(truncated)?;
        let grid = Tensor::new(vec![bands, bins, intervals], data)
            .map_err(|e| FormatError::Malformed(format!("sample {sample}: {e}")))?;
        if !yield_bu_ac.is_finite() {
            return Err(FormatError::Malformed(format!("sample {sample}: non-finite yield")).into());
        }
        samples.push(HistogramSample {
            county_id,
            year,
            yield_bu_ac,
            grid,
        });
    }
    if c.remaining() > 0 {
        return Err(FormatError::TrailingBytes(c.remaining()).into());
    }
    Dataset::new(provenance, bands, bins, intervals, samples).map_err(|e| match e {
        Error::Dataset(msg) => FormatError::Malformed(msg).into(),
        other => other,
    })
}

pub fn read_params_from(r: &mut impl Read) -> Result<ParamFile> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_params(&bytes)
}

pub fn read_params(path: impl AsRef<Path>) -> Result<ParamFile> {
    parse_params(&std::fs::read(path)?)
}

fn parse_params(bytes: &[u8]) -> Result<ParamFile> {
    let mut c = Cursor { bytes, pos: 0 };
    let h = read_header(&mut c)?;
    if h.kind != PARAMS_TYPE {
        return Err(FormatError::RecordType {
            found: h.kind,
            expected: "params",
        }
        .into());
    }
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    for record in 0..h.count {
        let truncated = || FormatError::TruncatedRecord { record };
        let name_len = c.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(c.take(name_len).ok_or_else(truncated)?)
            .map_err(|_| FormatError::Malformed(format!("record {record}: name is not UTF-8")))?
            .to_string();
        let rank = c.u32().ok_or_else(truncated)? as usize;
        if rank > c.remaining() / 4 {
            return Err(truncated().into());
        }
        let shape = (0..rank)
            .map(|_| c.u32().map(|v| v as usize).ok_or_else(truncated))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| FormatError::Malformed(format!("record {record}: extents overflow")))?;
        let data = c.f32s(n).ok_or_else(truncated)?;
        let t = Tensor::new(shape, data).map_err(|e| FormatError::Malformed(format!("record {record} ({name}): {e}")))?;
        if tensors.iter().any(|(existing, _)| *existing == name) {
            return Err(FormatError::Malformed(format!("duplicate tensor name {name:?}")).into());
        }
        tensors.push((name, t));
    }
    if c.remaining() > 0 {
        return Err(FormatError::TrailingBytes(c.remaining()).into());
    }
    let [channels, height, width] = h.dims;
    Ok(ParamFile {
        channels,
        height,
        width,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| HistogramSample {
                county_id: i as i32,
                year: 2000 + (i % 3) as i32,
                yield_bu_ac: 30.5 + i as f32,
                grid: Tensor::new(vec![2, 3, 4], (0..24).map(|j| (i * 24 + j) as f32 * 0.125).collect()).unwrap(),
            })
            .collect();
        Dataset::new(Provenance::External, 2, 3, 4, samples).unwrap()
    }

    fn bytes_of(ds: &Dataset) -> Vec<u8> {
        let mut v = Vec::new();
        write_dataset_to(ds, &mut v).unwrap();
        v
    }

    #[test]
    fn header_layout() {
        let b = bytes_of(&tiny_dataset(1));
        assert_eq!(&b[..4], b"YLDH");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..24], [2u32, 3, 4].map(u32::to_le_bytes).concat().as_slice());
        assert_eq!(b[24], 1);
        assert_eq!(b.len(), HEADER_LEN + 12 + 24 * 4);
    }

    #[test]
    fn truncation_names_the_sample() {
        let b = bytes_of(&tiny_dataset(3));
        let cut = &b[..b.len() - 5];
        match read_dataset_from(&mut &cut[..]) {
            Err(Error::Format(FormatError::Truncated { sample })) => assert_eq!(sample, 2),
            other => panic!("{other:?}"),
        }
        match read_dataset_from(&mut &b[..10]) {
            Err(Error::Format(FormatError::TruncatedHeader)) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_version_and_trailing_bytes() {
        let mut b = bytes_of(&tiny_dataset(1));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_dataset_from(&mut &bad[..]),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(matches!(
            read_dataset_from(&mut &bad[..]),
            Err(Error::Format(FormatError::UnsupportedVersion(9)))
        ));
        b.push(0);
        assert!(matches!(
            read_dataset_from(&mut &b[..]),
            Err(Error::Format(FormatError::TrailingBytes(1)))
        ));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = tiny_dataset(0);
        let b = bytes_of(&ds);
        assert_eq!(b.len(), HEADER_LEN);
        assert_eq!(read_dataset_from(&mut &b[..]).unwrap(), ds);
    }

    #[test]
    fn params_round_trip_and_record_types_differ() {
        let file = ParamFile {
            channels: 11,
            height: 32,
            width: 34,
            tensors: vec![
                ("a.weight".into(), Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE]).unwrap()),
                ("b".into(), Tensor::new(vec![1], vec![0.1]).unwrap()),
            ],
        };
        let mut b = Vec::new();
        write_params_to(&file, &mut b).unwrap();
        assert_eq!(read_params_from(&mut &b[..]).unwrap(), file);
        assert!(matches!(
            read_dataset_from(&mut &b[..]),
            Err(Error::Format(FormatError::RecordType { found: 2, .. }))
        ));
        let ds = bytes_of(&tiny_dataset(1));
        assert!(matches!(
            read_params_from(&mut &ds[..]),
            Err(Error::Format(FormatError::RecordType { found: 1, .. }))
        ));
        let cut = &b[..b.len() - 2];
        assert!(matches!(
            read_params_from(&mut &cut[..]),
            Err(Error::Format(FormatError::TruncatedRecord { record: 1 }))
        ));
    }
}
