//! Little-endian frame file formats: point clouds (`SPCL`), label grids
//! (`SOGT`), feature maps (`SFMP`), text calibration and binary PPM images.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use socc_core::coords::labels;
use socc_core::fusion::{CameraCalib, FeatureMap, Image, LidarPoint};
use socc_core::{Error as CoreError, OccupancyGrid, Result as CoreResult};

use crate::error::{Error, Result, WithPath};

pub const SPCL_MAGIC: &[u8; 4] = b"SPCL";
pub const SOGT_MAGIC: &[u8; 4] = b"SOGT";
pub const SFMP_MAGIC: &[u8; 4] = b"SFMP";

fn parse_err(offset: usize, msg: impl Into<String>) -> CoreError {
    CoreError::Parse { offset, msg: msg.into() }
}

/// Bounds-checked little-endian reader.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> CoreResult<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(parse_err(self.buf.len(), format!("truncated {what}: need {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 4]) -> CoreResult<()> {
        let got = self.take(4, "header")?;
        if got != want {
            return Err(parse_err(0, format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), std::str::from_utf8(want).unwrap())));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> CoreResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> CoreResult<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn finish(&self) -> CoreResult<()> {
        if !self.done() {
            return Err(parse_err(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Raw point cloud. Intensity is stored as recorded by the sensor.
pub fn encode_spcl(points: &[LidarPoint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 16 * points.len());
    out.extend_from_slice(SPCL_MAGIC);
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for v in [p.position[0], p.position[1], p.position[2], p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_spcl(buf: &[u8]) -> CoreResult<Vec<LidarPoint>> {
    let mut r = Reader::new(buf);
    r.magic(SPCL_MAGIC)?;
    let n = r.u32("point count")? as usize;
    if (buf.len() - r.pos) / 16 < n {
        return Err(parse_err(buf.len(), format!("truncated point data: header declares {n} points")));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos;
        let v = [r.f32("x")?, r.f32("y")?, r.f32("z")?, r.f32("intensity")?];
        if v.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(at, "non-finite point"));
        }
        points.push(LidarPoint { position: [v[0] as f64, v[1] as f64, v[2] as f64], intensity: v[3] as f64 });
    }
    r.finish()?;
    Ok(points)
}

pub fn encode_sogt(grid: &OccupancyGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + grid.labels().len());
    out.extend_from_slice(SOGT_MAGIC);
    for d in grid.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(grid.labels());
    out
}

pub fn decode_sogt(buf: &[u8]) -> CoreResult<OccupancyGrid> {
    let mut r = Reader::new(buf);
    r.magic(SOGT_MAGIC)?;
    let dims = [r.u32("dims")? as usize, r.u32("dims")? as usize, r.u32("dims")? as usize];
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| parse_err(4, "grid dims overflow"))?;
    let start = r.pos;
    let data = r.take(n, "label data")?;
    if let Some(i) = data.iter().position(|&l| l as usize >= labels::NUM_CLASSES && l != labels::VOID) {
        return Err(parse_err(start + i, format!("label {} out of range", data[i])));
    }
    r.finish()?;
    OccupancyGrid::from_labels(dims, data.to_vec())
}

pub fn encode_sfmp(maps: &[FeatureMap]) -> Vec<u8> {
    let mut out = Vec::new();
    for m in maps {
        out.extend_from_slice(SFMP_MAGIC);
        for v in [m.scale, m.channels, m.height, m.width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// One or more concatenated feature-map records.
pub fn decode_sfmp(buf: &[u8]) -> CoreResult<Vec<FeatureMap>> {
    let mut r = Reader::new(buf);
    let mut maps = Vec::new();
    while !r.done() {
        let at = r.pos;
        r.magic(SFMP_MAGIC).map_err(|e| match e {
            CoreError::Parse { msg, .. } if msg.starts_with("bad magic") => parse_err(at, msg),
            e => e,
        })?;
        let (scale, channels, height, width) = (r.u32("scale")?, r.u32("channels")?, r.u32("height")?, r.u32("width")?);
        let n = (channels as u64 * height as u64 * width as u64) as usize;
        if (buf.len() - r.pos) / 4 < n {
            return Err(parse_err(buf.len(), format!("truncated feature data: record at {at} declares {n} values")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f32("feature")?);
        }
        maps.push(FeatureMap::new(scale, channels, height, width, data).map_err(|e| parse_err(at, e.to_string()))?);
    }
    if maps.is_empty() {
        return Err(parse_err(0, "no feature-map records"));
    }
    Ok(maps)
}

/// `key = value` text; floats use the shortest round-trip form.
pub fn encode_calib(c: &CameraCalib) -> String {
    let join = |v: &mut dyn Iterator<Item = f64>| v.map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
    let mut s = String::new();
    writeln!(s, "K = {}", join(&mut c.k.iter().flatten().copied())).unwrap();
    writeln!(s, "T = {}", join(&mut c.t_cam_lidar.iter().flatten().copied())).unwrap();
    writeln!(s, "width = {}", c.width).unwrap();
    writeln!(s, "height = {}", c.height).unwrap();
    s
}

pub fn decode_calib(buf: &[u8]) -> CoreResult<CameraCalib> {
    let text = std::str::from_utf8(buf).map_err(|e| parse_err(e.valid_up_to(), "calibration is not UTF-8"))?;
    let (mut k, mut t, mut w, mut h) = (None, None, None, None);
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| parse_err(at, format!("expected key = value, got {body:?}")))?;
        let floats = |n: usize| -> CoreResult<Vec<f64>> {
            let v: Vec<f64> = value
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(at, format!("{}: {e}", key.trim())))?;
            if v.len() != n {
                return Err(parse_err(at, format!("{} needs {n} numbers, got {}", key.trim(), v.len())));
            }
            Ok(v)
        };
        let int = || value.trim().parse::<u32>().map_err(|e| parse_err(at, format!("{}: {e}", key.trim())));
        match key.trim() {
            "K" => k = Some(floats(9)?),
            "T" => t = Some(floats(16)?),
            "width" => w = Some(int()?),
            "height" => h = Some(int()?),
            other => return Err(parse_err(at, format!("unknown calibration key {other:?}"))),
        }
    }
    let missing = |name: &str| parse_err(buf.len(), format!("calibration is missing {name}"));
    let k = k.ok_or_else(|| missing("K"))?;
    let t = t.ok_or_else(|| missing("T"))?;
    let k: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| k[i * 3 + j]));
    let t: [[f64; 4]; 4] = std::array::from_fn(|i| std::array::from_fn(|j| t[i * 4 + j]));
    CameraCalib::new(k, t, w.ok_or_else(|| missing("width"))?, h.ok_or_else(|| missing("height"))?)
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Binary PPM with maxval 255. Header comments are allowed.
pub fn decode_ppm(buf: &[u8]) -> CoreResult<Image> {
    let mut pos = 0;
    let mut token = |what: &str| -> CoreResult<(usize, String)> {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(start, format!("missing {what}")));
        }
        Ok((start, String::from_utf8_lossy(&buf[start..pos]).into_owned()))
    };
    let (at, magic) = token("magic")?;
    if magic != "P6" {
        return Err(parse_err(at, format!("expected P6, got {magic:?}")));
    }
    let mut num = |what: &str| -> CoreResult<u32> {
        let (at, s) = token(what)?;
        s.parse().map_err(|_| parse_err(at, format!("bad {what} {s:?}")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max != 255 {
        return Err(parse_err(pos, format!("only maxval 255 is supported, got {max}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let n = w as usize * h as usize * 3;
    if buf.len() < start || buf.len() - start < n {
        return Err(parse_err(buf.len(), format!("truncated raster: need {n} bytes")));
    }
    if buf.len() - start > n {
        return Err(parse_err(start + n, "trailing bytes after raster"));
    }
    Image::new(w, h, buf[start..].to_vec())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, data).map_err(|e| Error::io(path, e))
}

pub fn read_spcl(path: &Path) -> Result<Vec<LidarPoint>> {
    decode_spcl(&read_bytes(path)?).at(path)
}

pub fn read_sogt(path: &Path) -> Result<OccupancyGrid> {
    decode_sogt(&read_bytes(path)?).at(path)
}

pub fn read_sfmp(path: &Path) -> Result<Vec<FeatureMap>> {
    decode_sfmp(&read_bytes(path)?).at(path)
}

pub fn read_calib(path: &Path) -> Result<CameraCalib> {
    decode_calib(&read_bytes(path)?).at(path)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&read_bytes(path)?).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offset(e: CoreError) -> usize {
        match e {
            CoreError::Parse { offset, .. } => offset,
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn spcl_layout() {
        let b = encode_spcl(&[LidarPoint { position: [1.0, 2.0, 3.0], intensity: 0.5 }]);
        assert_eq!(&b[..4], b"SPCL");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn truncated_spcl_reports_offset() {
        let b = encode_spcl(&[LidarPoint { position: [1.0, 2.0, 3.0], intensity: 0.5 }; 2]);
        assert_eq!(offset(decode_spcl(&b[..30]).unwrap_err()), 30);
        assert_eq!(offset(decode_spcl(&b[..2]).unwrap_err()), 2);
        assert_eq!(offset(decode_spcl(b"XPCL\0\0\0\0").unwrap_err()), 0);
    }

    #[test]
    fn sogt_rejects_bad_label() {
        let mut g = OccupancyGrid::free([2, 1, 1]);
        g.set([1, 0, 0], labels::VOID);
        let mut b = encode_sogt(&g);
        assert_eq!(decode_sogt(&b).unwrap(), g);
        b[17] = 40;
        assert_eq!(offset(decode_sogt(&b).unwrap_err()), 17);
    }

    #[test]
    fn sfmp_holds_several_maps() {
        let a = FeatureMap::new(4, 2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = FeatureMap::new(8, 1, 1, 1, vec![-0.5]).unwrap();
        let buf = encode_sfmp(&[a.clone(), b.clone()]);
        assert_eq!(decode_sfmp(&buf).unwrap(), vec![a, b]);
        assert!(decode_sfmp(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn calib_text_round_trip() {
        let t = [[0.0, -1.0, 0.0, 0.1], [0.0, 0.0, -1.0, 1.7], [1.0, 0.0, 0.0, 1e-3 / 3.0], [0.0, 0.0, 0.0, 1.0]];
        let c = CameraCalib::new([[101.3, 0.0, 160.5], [0.0, 99.9, 120.25], [0.0, 0.0, 1.0]], t, 320, 240).unwrap();
        assert_eq!(decode_calib(encode_calib(&c).as_bytes()).unwrap(), c);
        let bad = "K = 1 0 0 0 1 0 0 0 1\nT = 1 2\n";
        assert_eq!(offset(decode_calib(bad.as_bytes()).unwrap_err()), 22);
    }

    #[test]
    fn ppm_round_trip_and_truncation() {
        let mut img = Image::filled(3, 2, [1, 2, 3]);
        img.set_pixel(2, 1, [255, 0, 10]);
        let b = encode_ppm(&img);
        assert_eq!(decode_ppm(&b).unwrap(), img);
        assert!(decode_ppm(&b[..b.len() - 2]).is_err());
        assert_eq!(decode_ppm(b"P6\n# comment\n1 1\n255\n\x01\x02\x03").unwrap().pixel(0, 0), [1, 2, 3]);
    }
}
