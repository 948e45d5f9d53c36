//! Binary containers for datasets (`SEGV`) and parameter sets (`SEGP`).
//!
//! All integers and floats are little-endian. Layout of `SEGV`:
//!
//! ```text
//! "SEGV" | version u16 | n_samples u32 | channels u8 | H u16 | W u16
//! per sample: C·H·W f32 (channel-major, row-major) | H·W u8 labels
//! CRC-32 (IEEE) of everything above, u32
//! ```
//!
//! `SEGP` shares the framing with a different body:
//!
//! ```text
//! "SEGP" | version u16 | n_tensors u32
//! per tensor: name_len u16 | name | rank u8 | dims u32 × rank | f32 payload
//! CRC-32
//! ```

use std::fs;
use std::path::Path;

use super::sample::Sample;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::params::Params;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"SEGV";
pub const PARAMS_MAGIC: [u8; 4] = *b"SEGP";
pub const FORMAT_VERSION: u16 = 1;

const DATASET_HEADER: usize = 4 + 2 + 4 + 1 + 2 + 2;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Malformed(what.into()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

/// Check magic, version and trailing CRC; return the body between header
/// magic/version and the checksum.
fn open_frame(bytes: &[u8], magic: [u8; 4]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("missing magic".into()));
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic { found, expected: magic });
    }
    if bytes.len() < 6 {
        return Err(Error::Truncated("missing version".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(&bytes[6..])
}

fn verify_crc(bytes: &[u8]) -> Result<()> {
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored == computed {
        Ok(())
    } else {
        Err(Error::ChecksumMismatch { stored, computed })
    }
}

fn finish(mut out: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn encode_dataset(samples: &[Sample]) -> Result<Vec<u8>> {
    let (c, h, w) = match samples.first() {
        Some(s) => {
            let (h, w) = s.dims();
            (s.channels(), h, w)
        }
        None => (0, 0, 0),
    };
    if c > u8::MAX as usize || h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Malformed(format!("sample geometry {c}x{h}x{w} exceeds the header fields")));
    }
    let n = u32::try_from(samples.len()).map_err(|_| Error::Malformed("too many samples".into()))?;
    let mut out = Vec::with_capacity(DATASET_HEADER + samples.len() * (c * h * w * 4 + h * w) + 4);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.push(c as u8);
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    for (i, s) in samples.iter().enumerate() {
        if s.channels() != c || s.dims() != (h, w) {
            return Err(Error::Malformed(format!(
                "sample {i} is {}x{:?}, expected {c}x({h}, {w})",
                s.channels(),
                s.dims()
            )));
        }
        for v in s.image().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(s.labels().data());
    }
    Ok(finish(out))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sample>> {
    let body = open_frame(bytes, DATASET_MAGIC)?;
    let mut r = Reader { buf: body, pos: 0 };
    let n = r.u32("n_samples")? as usize;
    let c = r.u8("channels")? as usize;
    let h = r.u16("height")? as usize;
    let w = r.u16("width")? as usize;
    let per_sample = c * h * w * 4 + h * w;
    let expected = DATASET_HEADER + n * per_sample + 4;
    if bytes.len() < expected {
        return Err(Error::Truncated(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after the checksum",
            bytes.len() - expected
        )));
    }
    verify_crc(bytes)?;
    if n > 0 && (c == 0 || h == 0 || w == 0) {
        return Err(Error::Malformed(format!("{n} samples with empty geometry {c}x{h}x{w}")));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let image = r.f32s(c * h * w, "image")?;
        let labels = r.take(h * w, "labels")?.to_vec();
        let sample = Sample::new(Tensor::new([c, h, w], image), LabelMap::new(h, w, labels))
            .map_err(|e| Error::Malformed(format!("sample {i}: {e}")))?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn write_dataset(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(samples)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    decode_dataset(&fs::read(path)?)
}

pub fn encode_params(params: &Params) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&PARAMS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let n = u32::try_from(params.len()).map_err(|_| Error::Malformed("too many tensors".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Malformed(format!("name `{name}` too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Malformed(format!("dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(finish(out))
}

pub fn decode_params(bytes: &[u8]) -> Result<Params> {
    let body = open_frame(bytes, PARAMS_MAGIC)?;
    if body.len() < 4 + 4 {
        return Err(Error::Truncated("missing tensor count or checksum".into()));
    }
    verify_crc(bytes)?;
    let body = &body[..body.len() - 4];
    let mut r = Reader { buf: body, pos: 0 };
    let n = r.u32("n_tensors")?;
    let mut params = Params::new();
    for _ in 0..n {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<_>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Malformed(format!("`{name}` shape overflows")))?;
        let data = r.f32s(numel, "tensor payload")?;
        let t = Tensor::try_new(shape, data).map_err(|e| Error::Malformed(format!("`{name}`: {e}")))?;
        params.push(name, t);
    }
    if r.pos != body.len() {
        return Err(Error::Malformed(format!("{} unread bytes", body.len() - r.pos)));
    }
    Ok(params)
}

pub fn write_params(params: &Params, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_params(params)?)?;
    Ok(())
}

pub fn read_params(path: impl AsRef<Path>) -> Result<Params> {
    decode_params(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::phantom::{generate_phantom, PhantomConfig};

    fn small_set() -> Vec<Sample> {
        generate_phantom(&PhantomConfig {
            n_samples: 3,
            size: 16,
            ..PhantomConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode_dataset(&small_set()).unwrap();
        assert_eq!(&bytes[..4], b"SEGV");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[3, 0, 0, 0]);
        assert_eq!(bytes[10], 3);
        assert_eq!(&bytes[11..15], &[16, 0, 16, 0]);
        assert_eq!(bytes.len(), 15 + 3 * (3 * 256 * 4 + 256) + 4);
    }

    #[test]
    fn dataset_round_trip_is_byte_exact() {
        let set = small_set();
        let bytes = encode_dataset(&set).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn empty_dataset() {
        let bytes = encode_dataset(&[]).unwrap();
        assert_eq!(bytes.len(), 15 + 4);
        assert!(decode_dataset(&bytes).unwrap().is_empty());
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode_dataset(&small_set()).unwrap();

        let mut bad = bytes.clone();
        bad[100] ^= 0x01;
        assert!(matches!(decode_dataset(&bad), Err(Error::ChecksumMismatch { .. })));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_dataset(&bad), Err(Error::UnsupportedVersion(2))));

        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 10]), Err(Error::Truncated(_))));
        assert!(matches!(decode_dataset(&bytes[..3]), Err(Error::Truncated(_))));

        assert!(matches!(
            decode_dataset(&encode_params(&Params::new()).unwrap()),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn params_round_trip() {
        let mut p = Params::new();
        p.push("enc0.conv1.w", Tensor::new([2, 1, 3, 3], (0..18).map(|i| i as f32 * -0.5).collect()));
        p.push("b", Tensor::new([2], vec![f32::MIN_POSITIVE, -0.0]));
        let bytes = encode_params(&p).unwrap();
        let back = decode_params(&bytes).unwrap();
        assert_eq!(encode_params(&back).unwrap(), bytes);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["enc0.conv1.w", "b"]);

        let mut bad = bytes.clone();
        let last = bad.len() - 6;
        bad[last] ^= 0x80;
        assert!(matches!(decode_params(&bad), Err(Error::ChecksumMismatch { .. })));
    }
}
