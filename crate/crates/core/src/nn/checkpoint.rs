//! Binary parameter checkpoint codec.
//!
//! Layout (little-endian): magic `SOCC`, version `u32`, then records of
//! name length `u16`, UTF-8 name, rank `u8`, `rank` dims as `u32`, and the
//! `f32` data, repeated to the end of the buffer.

use alloc::string::String;
use alloc::vec::Vec;

use super::params::NamedTensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SOCC";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let body: usize = tensors.iter().map(|t| 3 + t.name.len() + 4 * t.dims.len() + 4 * t.data.len()).sum();
    let mut out = Vec::with_capacity(8 + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for t in tensors {
        let Ok(len) = u16::try_from(t.name.len()) else {
            return Err(Error::Config(alloc::format!("tensor name of {} bytes is too long", t.name.len())));
        };
        let Ok(rank) = u8::try_from(t.dims.len()) else {
            return Err(Error::Config(alloc::format!("tensor {} has rank {}", t.name, t.dims.len())));
        };
        let count: u64 = t.dims.iter().map(|&d| d as u64).product();
        if count != t.data.len() as u64 {
            return Err(Error::Shape(alloc::format!("tensor {}: dims {:?} but {} values", t.name, t.dims, t.data.len())));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(rank);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                msg: alloc::format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad magic, expected SOCC".into() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse { offset: 4, msg: alloc::format!("unsupported checkpoint version {version}") });
    }
    let mut out = Vec::new();
    while r.pos < buf.len() {
        let start = r.pos;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name_off = r.pos;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::Parse { offset: name_off, msg: "tensor name is not UTF-8".into() })?;
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")?);
        }
        let count: u64 = dims.iter().map(|&d| d as u64).product();
        let bytes = count.checked_mul(4).filter(|&b| b <= (buf.len() - r.pos) as u64).ok_or_else(|| Error::Parse {
            offset: r.pos,
            msg: alloc::format!("tensor {name} (record at {start}) needs {count} values, buffer too short"),
        })?;
        let data = r
            .take(bytes as usize, "data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(NamedTensor { name, dims, data });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor { name: "a.weight".into(), dims: vec![2, 3], data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e30, -7.25] },
            NamedTensor { name: "b".into(), dims: vec![], data: vec![0.5] },
            NamedTensor { name: "empty".into(), dims: vec![0, 4], data: vec![] },
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[..4], b"SOCC");
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), t.len());
        for (a, b) in t.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dims, b.dims);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn layout_of_one_record() {
        let bytes = encode(&[NamedTensor { name: "w".into(), dims: vec![1], data: vec![1.0] }]).unwrap();
        let expect: Vec<u8> = [
            &b"SOCC"[..],
            &1u32.to_le_bytes(),
            &1u16.to_le_bytes(),
            b"w",
            &[1u8],
            &1u32.to_le_bytes(),
            &1.0f32.to_le_bytes(),
        ]
        .concat();
        assert_eq!(bytes, expect);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&sample()).unwrap();
        for cut in [2, 6, 10, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Parse { offset: 0, .. })));
    }
}
