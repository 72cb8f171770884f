//! Binary checkpoints for single networks and ensembles.
//!
//! Layout (all little-endian):
//! `magic[4] | n_widths:u32 | widths:u32* | head:u32 | count:u64 | f64*`.
//! A single network has magic `BDK1` and `count = 1`; an ensemble uses `BDKE`
//! and stores `count` consecutive parameter vectors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Head, MlpSpec, ParamVector};
use crate::samplers::PosteriorEnsemble;

const MAGIC_SINGLE: &[u8; 4] = b"BDK1";
const MAGIC_ENSEMBLE: &[u8; 4] = b"BDKE";

fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], spec: &MlpSpec, count: u64) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&(spec.widths().len() as u32).to_le_bytes())?;
    for &n in spec.widths() {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    w.write_all(&spec.head().tag().to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    Ok(())
}

fn write_params<W: Write>(w: &mut W, p: &ParamVector) -> Result<()> {
    let mut buf = Vec::with_capacity(p.len() * 8);
    for v in p.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_header(c: &mut Cursor<'_>, magic: &[u8; 4]) -> Result<(MlpSpec, usize)> {
    if c.take(4)? != magic {
        return Err(Error::Format(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let n = c.u32()? as usize;
    if n < 2 || n > 1024 {
        return Err(Error::Format(format!("implausible layer count {n}")));
    }
    let widths = (0..n).map(|_| c.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let head = Head::from_tag(c.u32()?, *widths.last().unwrap())?;
    let spec = MlpSpec::new(widths, head)?;
    let count = c.u64()? as usize;
    Ok((spec, count))
}

fn read_params(c: &mut Cursor<'_>, n: usize) -> Result<ParamVector> {
    let bytes = c.take(n.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?;
    Ok(ParamVector::from_vec(
        bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
    ))
}

pub fn encode_params(spec: &MlpSpec, params: &ParamVector) -> Result<Vec<u8>> {
    params.check_len(spec)?;
    let mut out = Vec::new();
    write_header(&mut out, MAGIC_SINGLE, spec, 1)?;
    write_params(&mut out, params)?;
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<(MlpSpec, ParamVector)> {
    let mut c = Cursor { bytes, pos: 0 };
    let (spec, count) = read_header(&mut c, MAGIC_SINGLE)?;
    if count != 1 {
        return Err(Error::Format(format!("single-network file holds {count} vectors")));
    }
    let p = read_params(&mut c, spec.num_params())?;
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    Ok((spec, p))
}

pub fn encode_ensemble(ensemble: &PosteriorEnsemble) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_header(&mut out, MAGIC_ENSEMBLE, &ensemble.spec, ensemble.len() as u64)?;
    for s in &ensemble.samples {
        s.check_len(&ensemble.spec)?;
        write_params(&mut out, s)?;
    }
    Ok(out)
}

pub fn decode_ensemble(bytes: &[u8]) -> Result<PosteriorEnsemble> {
    let mut c = Cursor { bytes, pos: 0 };
    let (spec, count) = read_header(&mut c, MAGIC_ENSEMBLE)?;
    let need = count.saturating_mul(spec.num_params()).saturating_mul(8);
    if bytes.len() - c.pos != need {
        return Err(Error::Format(format!(
            "expected {need} payload bytes, found {}",
            bytes.len() - c.pos
        )));
    }
    let samples = (0..count)
        .map(|_| read_params(&mut c, spec.num_params()))
        .collect::<Result<Vec<_>>>()?;
    PosteriorEnsemble::from_samples(spec, samples, "checkpoint")
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_params(path: &Path, spec: &MlpSpec, params: &ParamVector) -> Result<()> {
    write_atomic(path, &encode_params(spec, params)?)
}

pub fn load_params(path: &Path) -> Result<(MlpSpec, ParamVector)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_params(&bytes)
}

pub fn save_ensemble(path: &Path, ensemble: &PosteriorEnsemble) -> Result<()> {
    write_atomic(path, &encode_ensemble(ensemble)?)
}

pub fn load_ensemble(path: &Path) -> Result<PosteriorEnsemble> {
    decode_ensemble(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> MlpSpec {
        MlpSpec::classifier(vec![2, 3, 2]).unwrap()
    }

    #[test]
    fn params_round_trip_bitwise() {
        let s = spec();
        let p = ParamVector::from_vec((0..s.num_params()).map(|i| (i as f64).sin() * 1e-300).collect());
        let (s2, p2) = decode_params(&encode_params(&s, &p).unwrap()).unwrap();
        assert_eq!(s, s2);
        assert!(p.iter().zip(p2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_corruption() {
        let s = spec();
        let bytes = encode_params(&s, &ParamVector::zeros_for(&s)).unwrap();
        assert!(decode_params(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_params(&bad).is_err());
        assert!(decode_ensemble(&bytes).is_err());
    }

    #[test]
    fn ensemble_round_trip() {
        let s = MlpSpec::new(vec![1, 4, 1], Head::RegressionMeanOnly).unwrap();
        let samples = (0..3)
            .map(|k| ParamVector::from_vec(vec![k as f64; s.num_params()]))
            .collect();
        let e = PosteriorEnsemble::from_samples(s, samples, "t").unwrap();
        let d = decode_ensemble(&encode_ensemble(&e).unwrap()).unwrap();
        assert_eq!(d.spec, e.spec);
        assert_eq!(d.samples, e.samples);
    }
}
