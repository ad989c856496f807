//! LiDAR-camera fusion: projection into the image, bilinear sampling of
//! color and feature maps, and lifting the samples back onto the points.

mod augment;

pub use augment::{augment, AugmentConfig};

use alloc::vec::Vec;

use crate::coords::FusedPoint;
use crate::error::{bail, Result};

/// Pinhole intrinsics plus the rigid LiDAR-to-camera transform.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraCalib {
    pub k: [[f64; 3]; 3],
    /// Maps LiDAR-frame homogeneous points to the camera frame.
    pub t_cam_lidar: [[f64; 4]; 4],
    pub width: u32,
    pub height: u32,
}

impl CameraCalib {
    pub fn new(k: [[f64; 3]; 3], t_cam_lidar: [[f64; 4]; 4], width: u32, height: u32) -> Result<Self> {
        let c = Self { k, t_cam_lidar, width, height };
        c.validate()?;
        Ok(c)
    }

    pub fn fx(&self) -> f64 {
        self.k[0][0]
    }

    pub fn fy(&self) -> f64 {
        self.k[1][1]
    }

    pub fn cx(&self) -> f64 {
        self.k[0][2]
    }

    pub fn cy(&self) -> f64 {
        self.k[1][2]
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.k;
        if k.iter().flatten().any(|v| !v.is_finite()) || self.t_cam_lidar.iter().flatten().any(|v| !v.is_finite()) {
            bail!(MalformedInput, "calibration contains non-finite values");
        }
        if !(self.fx() > 0.0 && self.fy() > 0.0) {
            bail!(MalformedInput, "focal lengths must be positive, got {} and {}", self.fx(), self.fy());
        }
        if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            bail!(MalformedInput, "intrinsics must be zero-skew with last row [0, 0, 1]");
        }
        if self.width == 0 || self.height == 0 {
            bail!(MalformedInput, "image size {}x{} is empty", self.width, self.height);
        }
        let t = &self.t_cam_lidar;
        if t[3] != [0.0, 0.0, 0.0, 1.0] {
            bail!(MalformedInput, "extrinsic last row must be [0, 0, 0, 1]");
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|c| t[i][c] * t[j][c]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    bail!(MalformedInput, "extrinsic rotation is not orthonormal");
                }
            }
        }
        let r = |i: usize, j: usize| t[i][j];
        let det = r(0, 0) * (r(1, 1) * r(2, 2) - r(1, 2) * r(2, 1)) - r(0, 1) * (r(1, 0) * r(2, 2) - r(1, 2) * r(2, 0))
            + r(0, 2) * (r(1, 0) * r(2, 1) - r(1, 1) * r(2, 0));
        if (det - 1.0).abs() > 1e-6 {
            bail!(MalformedInput, "extrinsic rotation has determinant {det}, expected +1");
        }
        Ok(())
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let t = &self.t_cam_lidar;
        core::array::from_fn(|i| t[i][0] * p[0] + t[i][1] * p[1] + t[i][2] * p[2] + t[i][3])
    }

    /// Inverse rigid transform: `R^T (q - t)`.
    pub fn to_lidar(&self, q: [f64; 3]) -> [f64; 3] {
        let t = &self.t_cam_lidar;
        let d = [q[0] - t[0][3], q[1] - t[1][3], q[2] - t[2][3]];
        core::array::from_fn(|j| t[0][j] * d[0] + t[1][j] * d[1] + t[2][j] * d[2])
    }

    /// Pixel coordinates of a camera-frame point, without bounds checks.
    pub fn pixel_of(&self, q: [f64; 3]) -> (f64, f64) {
        (self.fx() * q[0] / q[2] + self.cx(), self.fy() * q[1] / q[2] + self.cy())
    }

    /// LiDAR-frame point seen at pixel `(u, v)` with camera depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let x = (u - self.cx()) / self.fx() * depth;
        let y = (v - self.cy()) / self.fy() * depth;
        self.to_lidar([x, y, depth])
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// A LiDAR return in the LiDAR frame; intensity normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub position: [f64; 3],
    pub intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub index: usize,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Projects every point into the image and keeps those with positive depth
/// that land inside `[0, W-1] x [0, H-1]`.
pub fn project(points: &[LidarPoint], calib: &CameraCalib) -> Vec<Projection> {
    points
        .iter()
        .enumerate()
        .filter_map(|(index, p)| {
            let q = calib.to_camera(p.position);
            if !(q[2] > 0.0) {
                return None;
            }
            let (u, v) = calib.pixel_of(q);
            calib.in_image(u, v).then_some(Projection { index, u, v, depth: q[2] })
        })
        .collect()
}

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize * 3 {
            bail!(MalformedInput, "{}x{} image needs {} bytes, got {}", width, height, width as usize * height as usize * 3, data.len());
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Corner indices and weights for bilinear interpolation on a `w x h` grid.
fn bilinear_taps(u: f64, v: f64, w: u32, h: u32) -> Result<[(usize, usize, f64); 4]> {
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        bail!(Contract, "sample ({u}, {v}) outside a {w}x{h} grid");
    }
    let (x0, y0) = (num_traits::Float::floor(u) as usize, num_traits::Float::floor(v) as usize);
    let (x1, y1) = ((x0 + 1).min(w as usize - 1), (y0 + 1).min(h as usize - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    Ok([
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ])
}

/// Bilinear RGB at continuous pixel `(u, v)`, normalized to `[0, 1]`.
/// Pixel centers sit at integer coordinates.
pub fn bilinear_sample(image: &Image, u: f64, v: f64) -> Result<[f64; 3]> {
    let taps = bilinear_taps(u, v, image.width, image.height)?;
    let mut out = [0.0; 3];
    for (x, y, w) in taps {
        if w == 0.0 {
            continue;
        }
        let p = image.pixel(x as u32, y as u32);
        for c in 0..3 {
            out[c] += w * p[c] as f64;
        }
    }
    Ok(out.map(|v| v / 255.0))
}

/// Per-pixel features at `1 / scale` of the image resolution, stored
/// channel-major: `data[(c * height + y) * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub scale: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(scale: u32, channels: u32, height: u32, width: u32, data: Vec<f32>) -> Result<Self> {
        if scale == 0 || height == 0 || width == 0 {
            bail!(MalformedInput, "feature map needs a positive scale and size");
        }
        if data.len() != (channels * height * width) as usize {
            bail!(MalformedInput, "feature map {channels}x{height}x{width} needs {} values, got {}", channels * height * width, data.len());
        }
        if data.iter().any(|v| !v.is_finite()) {
            bail!(MalformedInput, "feature map contains non-finite values");
        }
        Ok(Self { scale, channels, height, width, data })
    }

    pub fn at(&self, c: u32, y: u32, x: u32) -> f32 {
        self.data[((c * self.height + y) * self.width + x) as usize]
    }

    /// Bilinear sample of every channel at image pixel `(u, v)`, mapped to
    /// `(u / scale, v / scale)` and clamped to the map.
    pub fn sample(&self, u: f64, v: f64, out: &mut Vec<f32>) {
        let s = self.scale as f64;
        let fu = (u / s).clamp(0.0, (self.width - 1) as f64);
        let fv = (v / s).clamp(0.0, (self.height - 1) as f64);
        let taps = bilinear_taps(fu, fv, self.width, self.height).expect("clamped");
        for c in 0..self.channels {
            let v: f64 = taps.iter().map(|&(x, y, w)| w * self.at(c, y as u32, x as u32) as f64).sum();
            out.push(v as f32);
        }
    }
}

/// Paints every in-frustum point with `[R, G, B] ++ feature channels ++
/// [intensity]`; points that do not project are dropped.
pub fn fuse(scan: &[LidarPoint], image: &Image, feature_maps: Option<&[FeatureMap]>, calib: &CameraCalib) -> Result<Vec<FusedPoint>> {
    if image.width != calib.width || image.height != calib.height {
        bail!(
            MalformedInput,
            "image is {}x{} but calibration says {}x{}",
            image.width,
            image.height,
            calib.width,
            calib.height
        );
    }
    let maps = feature_maps.unwrap_or(&[]);
    let width = fused_width(maps);
    let mut out = Vec::new();
    for p in project(scan, calib) {
        let mut features = Vec::with_capacity(width);
        features.extend(bilinear_sample(image, p.u, p.v)?.iter().map(|&c| c as f32));
        for m in maps {
            m.sample(p.u, p.v, &mut features);
        }
        features.push(scan[p.index].intensity as f32);
        out.push(FusedPoint { position: scan[p.index].position, features });
    }
    Ok(out)
}

/// Feature width produced by [`fuse`].
pub fn fused_width(maps: &[FeatureMap]) -> usize {
    4 + maps.iter().map(|m| m.channels as usize).sum::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    const EYE: [[f64; 4]; 4] = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];

    fn calib() -> CameraCalib {
        CameraCalib::new([[100.0, 0.0, 320.0], [0.0, 100.0, 240.0], [0.0, 0.0, 1.0]], EYE, 640, 480).unwrap()
    }

    fn pt(x: f64, y: f64, z: f64) -> LidarPoint {
        LidarPoint { position: [x, y, z], intensity: 0.5 }
    }

    #[test]
    fn projection_examples() {
        let p = project(&[pt(0.0, 0.0, 5.0), pt(1.0, 0.0, 5.0), pt(0.0, 0.0, -1.0)], &calib());
        assert_eq!(p.len(), 2);
        assert_eq!((p[0].u, p[0].v, p[0].depth), (320.0, 240.0, 5.0));
        assert_eq!((p[1].index, p[1].u, p[1].v), (1, 340.0, 240.0));
    }

    #[test]
    fn projection_filters_outside_image() {
        let p = project(&[pt(100.0, 0.0, 5.0), pt(0.0, 0.0, 0.0)], &calib());
        assert!(p.is_empty());
    }

    #[test]
    fn calibration_validation() {
        let mut t = EYE;
        t[0][0] = -1.0;
        assert!(CameraCalib::new(calib().k, t, 10, 10).is_err());
        let mut k = calib().k;
        k[0][0] = 0.0;
        assert!(CameraCalib::new(k, EYE, 10, 10).is_err());
        let mut s = EYE;
        s[0][0] = 1.01;
        assert!(CameraCalib::new(calib().k, s, 10, 10).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let mut img = Image::filled(2, 2, [0, 0, 0]);
        img.set_pixel(0, 1, [255, 255, 255]);
        img.set_pixel(1, 1, [255, 255, 255]);
        assert_eq!(bilinear_sample(&img, 0.5, 0.5).unwrap(), [0.5; 3]);
        assert_eq!(bilinear_sample(&img, 0.0, 0.0).unwrap(), [0.0; 3]);
        assert_eq!(bilinear_sample(&img, 1.0, 1.0).unwrap(), [1.0; 3]);
        img.set_pixel(1, 0, [51, 102, 255]);
        assert_eq!(bilinear_sample(&img, 1.0, 0.0).unwrap(), [0.2, 0.4, 1.0]);
        assert!(bilinear_sample(&img, 1.5, 0.0).is_err());
        assert!(bilinear_sample(&img, -0.1, 0.0).is_err());
    }

    #[test]
    fn fuse_widths() {
        let c = calib();
        let img = Image::filled(640, 480, [255, 0, 0]);
        let scan = [pt(0.0, 0.0, 5.0), pt(0.0, 0.0, -5.0)];
        let f = fuse(&scan, &img, None, &c).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].features, vec![1.0, 0.0, 0.0, 0.5]);
        let map = FeatureMap::new(8, 8, 60, 80, vec![0.25; 8 * 60 * 80]).unwrap();
        let f = fuse(&scan, &img, Some(&[map]), &c).unwrap();
        assert_eq!(f[0].features.len(), 12);
        assert_eq!(f[0].features[3..11], [0.25; 8]);
        assert!(fuse(&[], &img, None, &c).unwrap().is_empty());
    }

    #[test]
    fn feature_map_scaled_lookup() {
        // Channel 0 holds its x index, so the sample reads u / scale.
        let (w, h) = (4u32, 2u32);
        let data = (0..w * h).map(|i| (i % w) as f32).collect();
        let m = FeatureMap::new(4, 1, h, w, data).unwrap();
        let mut out = vec![];
        m.sample(6.0, 0.0, &mut out);
        assert_eq!(out, vec![1.5]);
    }

    #[test]
    fn unproject_inverts_project() {
        let c = calib();
        let p = pt(0.3, -0.2, 4.0);
        let pr = project(&[p], &c)[0];
        let back = c.unproject(pr.u, pr.v, pr.depth);
        for i in 0..3 {
            assert!((back[i] - p.position[i]).abs() < 1e-12);
        }
    }
}
