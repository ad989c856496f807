//! Synthetic driving scenes built from boxes, vertical cylinders and a
//! banded ground plane, with ray-cast LiDAR, a flat-shaded camera image and
//! exactly voxelized ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use socc_core::coords::labels::{self, *};
use socc_core::fusion::{CameraCalib, FeatureMap, Image, LidarPoint};
use socc_core::{GridSpec, OccupancyGrid};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Vertical cylinder standing on `z0`.
    Cylinder { center: [f64; 2], radius: f64, z0: f64, z1: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub label: u8,
}

/// Horizontal plane `z = 0`: road for `|y| < road_half_width`, then a
/// sidewalk band, then terrain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ground {
    pub road_half_width: f64,
    pub sidewalk_width: f64,
}

impl Ground {
    pub fn label_at(&self, y: f64) -> u8 {
        let a = y.abs();
        if a < self.road_half_width {
            DRIVEABLE_SURFACE
        } else if a < self.road_half_width + self.sidewalk_width {
            SIDEWALK
        } else {
            TERRAIN
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub ground: Option<Ground>,
    pub primitives: Vec<Primitive>,
}

/// Nearest ray hit: distance, label, outward unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub label: u8,
    pub normal: [f64; 3],
}

const EPS: f64 = 1e-9;

fn ray_box(o: [f64; 3], d: [f64; 3], min: [f64; 3], max: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis = 0;
    let mut sign = -1.0;
    for a in 0..3 {
        if d[a].abs() < EPS {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
            continue;
        }
        let (mut n, mut f) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
        let mut s = -1.0;
        if n > f {
            std::mem::swap(&mut n, &mut f);
            s = 1.0;
        }
        if n > t0 {
            t0 = n;
            axis = a;
            sign = s;
        }
        t1 = t1.min(f);
    }
    if t0 > t1 || t0 <= EPS {
        return None;
    }
    let mut normal = [0.0; 3];
    normal[axis] = sign;
    Some((t0, normal))
}

fn ray_cylinder(o: [f64; 3], d: [f64; 3], c: [f64; 2], r: f64, z0: f64, z1: f64) -> Option<(f64, [f64; 3])> {
    let mut best: Option<(f64, [f64; 3])> = None;
    let mut consider = |t: f64, n: [f64; 3]| {
        if t > EPS && best.is_none_or(|(b, _)| t < b) {
            best = Some((t, n));
        }
    };
    let (px, py) = (o[0] - c[0], o[1] - c[1]);
    let a = d[0] * d[0] + d[1] * d[1];
    if a > EPS {
        let b = 2.0 * (px * d[0] + py * d[1]);
        let cc = px * px + py * py - r * r;
        let disc = b * b - 4.0 * a * cc;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / (2.0 * a);
            let z = o[2] + t * d[2];
            if z >= z0 && z <= z1 {
                let (x, y) = (px + t * d[0], py + t * d[1]);
                consider(t, [x / r, y / r, 0.0]);
            }
        }
    }
    for (zc, nz) in [(z1, 1.0), (z0, -1.0)] {
        if d[2].abs() > EPS {
            let t = (zc - o[2]) / d[2];
            let (x, y) = (px + t * d[0], py + t * d[1]);
            if x * x + y * y <= r * r {
                consider(t, [0.0, 0.0, nz]);
            }
        }
    }
    best
}

impl Scene {
    pub fn cast(&self, o: [f64; 3], d: [f64; 3], max_range: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut take = |t: f64, label: u8, normal: [f64; 3]| {
            if t <= max_range && best.is_none_or(|b| t < b.t) {
                best = Some(Hit { t, label, normal });
            }
        };
        if let Some(g) = &self.ground {
            if d[2] < -EPS && o[2] > 0.0 {
                let t = -o[2] / d[2];
                take(t, g.label_at(o[1] + t * d[1]), [0.0, 0.0, 1.0]);
            }
        }
        for p in &self.primitives {
            let hit = match p.shape {
                Shape::Box { min, max } => ray_box(o, d, min, max),
                Shape::Cylinder { center, radius, z0, z1 } => ray_cylinder(o, d, center, radius, z0, z1),
            };
            if let Some((t, n)) = hit {
                take(t, p.label, n);
            }
        }
        best
    }

    /// Exact voxelization: a voxel takes a primitive's label when their
    /// interiors overlap. Primitives are painted over the ground in order.
    pub fn voxelize(&self, spec: &GridSpec) -> OccupancyGrid {
        let mut g = OccupancyGrid::free(spec.dims);
        let r = spec.resolution;
        let lo = |a: usize, i: usize| spec.lower[a] + i as f64 * r;
        if let Some(ground) = &self.ground {
            let k = ((0.0 - spec.lower[2]) / r).floor();
            if k >= 0.0 && (k as usize) < spec.dims[2] {
                for x in 0..spec.dims[0] {
                    for y in 0..spec.dims[1] {
                        g.set([x, y, k as usize], ground.label_at(lo(1, y) + 0.5 * r));
                    }
                }
            }
        }
        let range = |a: usize, min: f64, max: f64| {
            let first = (((min - spec.lower[a]) / r).floor().max(0.0)) as usize;
            let last = (((max - spec.lower[a]) / r).ceil().max(0.0) as usize).min(spec.dims[a]);
            (first..last).filter(move |&i| lo(a, i) < max && lo(a, i) + r > min)
        };
        for p in &self.primitives {
            let (min, max) = match p.shape {
                Shape::Box { min, max } => (min, max),
                Shape::Cylinder { center, radius, z0, z1 } => {
                    ([center[0] - radius, center[1] - radius, z0], [center[0] + radius, center[1] + radius, z1])
                }
            };
            for x in range(0, min[0], max[0]) {
                for y in range(1, min[1], max[1]) {
                    if let Shape::Cylinder { center, radius, .. } = p.shape {
                        // Closest point of the voxel footprint to the axis.
                        let qx = center[0].clamp(lo(0, x), lo(0, x) + r);
                        let qy = center[1].clamp(lo(1, y), lo(1, y) + r);
                        if (qx - center[0]).powi(2) + (qy - center[1]).powi(2) >= radius * radius {
                            continue;
                        }
                    }
                    for z in range(2, min[2], max[2]) {
                        g.set([x, y, z], p.label);
                    }
                }
            }
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LidarSpec {
    pub beams: usize,
    pub elevation_deg: (f64, f64),
    pub azimuth_step_deg: f64,
    /// Sensor origin in the ego frame.
    pub origin: [f64; 3],
    pub max_range: f64,
    /// Raw intensity scale; stored intensities lie in `[0, intensity_max]`.
    pub intensity_max: f64,
    pub intensity_noise: f64,
    /// Horizontal sensor offsets from `origin`, one per accumulated sweep.
    /// All returns are expressed in the ego frame.
    pub sweep_offsets: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraSpec {
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
    pub position: [f64; 3],
    /// Downward tilt of the optical axis.
    pub pitch_deg: f64,
}

impl CameraSpec {
    /// Square-pixel pinhole looking along ego `+x`.
    pub fn calib(&self) -> CameraCalib {
        let fx = self.width as f64 / 2.0 / (self.hfov_deg.to_radians() / 2.0).tan();
        let k = [[fx, 0.0, (self.width as f64 - 1.0) / 2.0], [0.0, fx, (self.height as f64 - 1.0) / 2.0], [0.0, 0.0, 1.0]];
        let (s, c) = self.pitch_deg.to_radians().sin_cos();
        // Ego (x fwd, y left, z up) to camera (x right, y down, z fwd), then pitch.
        let r0 = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
        let rx = [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]];
        let r: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|m| rx[i][m] * r0[m][j]).sum()));
        let p = self.position;
        let mut t = [[0.0; 4]; 4];
        for i in 0..3 {
            t[i][..3].copy_from_slice(&r[i]);
            t[i][3] = -(r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]);
        }
        t[3][3] = 1.0;
        CameraCalib::new(k, t, self.width, self.height).expect("rotation built orthonormal")
    }
}

/// Inclusive count range.
pub type Count = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub grid: GridSpec,
    pub ground: Option<Ground>,
    /// Footprint region for objects: `[x_min, x_max, y_min, y_max]`.
    pub region: [f64; 4],
    /// Footprints never cover this ego-centered keep-out box (half sizes).
    pub keep_out: [f64; 2],
    pub vehicles: Count,
    pub thin_boxes: Count,
    pub cylinders: Count,
    /// Large manmade blocks beyond the sidewalk.
    pub buildings: Count,
    pub lidar: LidarSpec,
    pub camera: CameraSpec,
    /// Emit one feature map at this scale (block-mean color and depth).
    pub feature_scale: Option<u32>,
    /// Label ground-truth voxels outside the camera frustum as void.
    pub void_outside_camera: bool,
}

impl SceneSpec {
    /// Small scene in front of the sensor, 32 x 32 x 16 voxels.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            grid: GridSpec::new([0.0, -6.4, -1.0], [12.8, 6.4, 5.4], 0.4).expect("valid"),
            ground: Some(Ground { road_half_width: 3.0, sidewalk_width: 1.6 }),
            region: [2.5, 12.4, -6.2, 6.2],
            keep_out: [0.0, 0.0],
            vehicles: (1, 2),
            thin_boxes: (1, 2),
            cylinders: (1, 3),
            buildings: (0, 0),
            lidar: LidarSpec {
                beams: 32,
                elevation_deg: (-30.0, 10.0),
                azimuth_step_deg: 0.4,
                origin: [0.0, 0.0, 1.84],
                max_range: 70.0,
                intensity_max: 255.0,
                intensity_noise: 0.03,
                sweep_offsets: vec![[0.0, 0.0]],
            },
            camera: CameraSpec { width: 320, height: 240, hfov_deg: 110.0, position: [0.0, 0.0, 1.6], pitch_deg: 10.0 },
            feature_scale: None,
            void_outside_camera: true,
        }
    }

    /// Full 200 x 200 x 16 grid with a dense scan.
    pub fn full(seed: u64) -> Self {
        let mut s = Self::desk(seed);
        s.grid = GridSpec::default();
        s.region = [-39.0, 39.0, -39.0, 39.0];
        s.keep_out = [4.0, 3.0];
        s.vehicles = (25, 40);
        s.thin_boxes = (12, 20);
        s.cylinders = (25, 40);
        s.lidar.azimuth_step_deg = 0.1;
        s.camera.width = 640;
        s.camera.height = 480;
        s.camera.hfov_deg = 120.0;
        s
    }

    /// Full grid seen by 25 sweeps accumulated along the road and a camera
    /// at the rear edge, with extra clutter; roughly 30k input voxels.
    pub fn dense(seed: u64) -> Self {
        let mut s = Self::full(seed);
        s.vehicles = (37, 60);
        s.thin_boxes = (18, 30);
        s.cylinders = (37, 60);
        s.lidar.beams = 64;
        s.lidar.sweep_offsets =
            (0..25).map(|i| [-36.0 + 3.0 * i as f64, if i % 2 == 1 { 2.0 } else { -2.0 }]).collect();
        s.camera.position[0] = -39.0;
        s
    }
}

/// A generated frame: raw scan, image, calibration, ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFrame {
    pub scan: Vec<LidarPoint>,
    pub image: Image,
    pub calib: CameraCalib,
    pub gt: OccupancyGrid,
    pub feature_maps: Vec<FeatureMap>,
    pub scene: Scene,
}

pub fn class_color(label: u8) -> [u8; 3] {
    const PALETTE: [[u8; 3]; labels::NUM_CLASSES] = [
        [40, 40, 40],
        [255, 120, 50],
        [255, 192, 203],
        [255, 255, 0],
        [0, 150, 245],
        [0, 255, 255],
        [200, 180, 0],
        [255, 0, 0],
        [255, 240, 150],
        [135, 60, 0],
        [160, 32, 240],
        [255, 0, 255],
        [139, 137, 137],
        [75, 0, 75],
        [150, 240, 80],
        [230, 230, 250],
        [0, 175, 0],
        [135, 185, 235],
    ];
    PALETTE.get(label as usize).copied().unwrap_or([0, 0, 0])
}

fn class_intensity(label: u8) -> f64 {
    match label {
        DRIVEABLE_SURFACE => 0.1,
        SIDEWALK => 0.25,
        TERRAIN => 0.35,
        CAR | TRUCK | BUS | TRAILER | CONSTRUCTION_VEHICLE => 0.6,
        BICYCLE | MOTORCYCLE => 0.5,
        PEDESTRIAN => 0.4,
        TRAFFIC_CONE | BARRIER => 0.85,
        VEGETATION => 0.3,
        MANMADE => 0.7,
        _ => 0.5,
    }
}

fn uniform<R: Rng>(rng: &mut R, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        rng.gen_range(a..b)
    }
}

/// Object placement with footprint rejection.
struct Placer<'a> {
    spec: &'a SceneSpec,
    taken: Vec<[f64; 4]>,
}

impl Placer<'_> {
    fn place<R: Rng>(&mut self, rng: &mut R, size: [f64; 2], y_band: Option<(f64, f64)>) -> Option<[f64; 2]> {
        let [x0, x1, y0, y1] = self.spec.region;
        for _ in 0..60 {
            let cx = uniform(rng, (x0 + size[0] / 2.0, (x1 - size[0] / 2.0).max(x0 + size[0] / 2.0)));
            let cy = match y_band {
                Some((lo, hi)) => {
                    let y = uniform(rng, (lo + size[1] / 2.0, (hi - size[1] / 2.0).max(lo + size[1] / 2.0)));
                    if rng.gen_bool(0.5) {
                        y
                    } else {
                        -y
                    }
                }
                None => uniform(rng, (y0 + size[1] / 2.0, (y1 - size[1] / 2.0).max(y0 + size[1] / 2.0))),
            };
            let fp = [cx - size[0] / 2.0, cx + size[0] / 2.0, cy - size[1] / 2.0, cy + size[1] / 2.0];
            if fp[0] < x0 || fp[1] > x1 || fp[2] < y0 || fp[3] > y1 {
                continue;
            }
            let [kx, ky] = self.spec.keep_out;
            if kx > 0.0 && fp[0] < kx && fp[1] > -kx && fp[2] < ky && fp[3] > -ky {
                continue;
            }
            let clear = 1.0;
            let on_path = self.spec.lidar.sweep_offsets.iter().any(|o| {
                fp[0] < o[0] + clear && fp[1] > o[0] - clear && fp[2] < o[1] + clear && fp[3] > o[1] - clear
            });
            if on_path {
                continue;
            }
            let m = 0.3;
            if self.taken.iter().any(|t| fp[0] < t[1] + m && fp[1] > t[0] - m && fp[2] < t[3] + m && fp[3] > t[2] - m) {
                continue;
            }
            self.taken.push(fp);
            return Some([cx, cy]);
        }
        None
    }
}

pub fn build_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Scene {
    let mut scene = Scene { ground: spec.ground, primitives: Vec::new() };
    let mut placer = Placer { spec, taken: Vec::new() };
    let road = spec.ground.map_or(3.0, |g| g.road_half_width);
    let count = |rng: &mut ChaCha8Rng, c: Count| rng.gen_range(c.0..=c.1.max(c.0));

    let curb = road + spec.ground.map_or(0.0, |g| g.sidewalk_width);
    let far = spec.region[3].abs().max(spec.region[2].abs());
    for _ in 0..count(rng, spec.buildings) {
        let size = [uniform(rng, (8.0, 20.0)), uniform(rng, (4.0, 10.0))];
        let h = uniform(rng, (4.0, 8.0));
        if let Some(c) = placer.place(rng, size, Some((curb + 0.5, far))) {
            let min = [c[0] - size[0] / 2.0, c[1] - size[1] / 2.0, 0.0];
            let max = [c[0] + size[0] / 2.0, c[1] + size[1] / 2.0, h];
            scene.primitives.push(Primitive { shape: Shape::Box { min, max }, label: MANMADE });
        }
    }
    for _ in 0..count(rng, spec.vehicles) {
        let roll: f64 = rng.gen();
        let (label, l, w, h) = match roll {
            r if r < 0.55 => (CAR, (3.8, 4.8), (1.7, 2.0), (1.4, 1.7)),
            r if r < 0.68 => (TRUCK, (5.5, 7.5), (2.2, 2.5), (2.6, 3.2)),
            r if r < 0.75 => (BUS, (8.5, 10.5), (2.4, 2.6), (3.0, 3.4)),
            r if r < 0.81 => (TRAILER, (5.0, 7.0), (2.2, 2.5), (2.2, 2.8)),
            r if r < 0.86 => (CONSTRUCTION_VEHICLE, (4.0, 6.0), (2.2, 2.6), (2.5, 3.2)),
            r if r < 0.93 => (MOTORCYCLE, (1.8, 2.2), (0.6, 0.9), (1.1, 1.4)),
            _ => (BICYCLE, (1.6, 1.9), (0.5, 0.7), (1.0, 1.3)),
        };
        let size = [uniform(rng, l), uniform(rng, w)];
        let h = uniform(rng, h);
        if let Some(c) = placer.place(rng, size, Some((0.0, road))) {
            let min = [c[0] - size[0] / 2.0, c[1] - size[1] / 2.0, 0.0];
            let max = [c[0] + size[0] / 2.0, c[1] + size[1] / 2.0, h];
            scene.primitives.push(Primitive { shape: Shape::Box { min, max }, label });
        }
    }
    for _ in 0..count(rng, spec.thin_boxes) {
        let (label, l, w, h) = if rng.gen_bool(0.5) {
            (BARRIER, (2.0, 4.0), (0.3, 0.5), (0.8, 1.1))
        } else {
            (MANMADE, (3.0, 7.0), (0.4, 0.8), (2.0, 4.0))
        };
        let size = [uniform(rng, l), uniform(rng, w)];
        let h = uniform(rng, h);
        let band = (road, spec.region[3].abs().max(spec.region[2].abs()));
        if let Some(c) = placer.place(rng, size, Some(band)) {
            let min = [c[0] - size[0] / 2.0, c[1] - size[1] / 2.0, 0.0];
            let max = [c[0] + size[0] / 2.0, c[1] + size[1] / 2.0, h];
            scene.primitives.push(Primitive { shape: Shape::Box { min, max }, label });
        }
    }
    for _ in 0..count(rng, spec.cylinders) {
        let roll: f64 = rng.gen();
        let (label, r, h) = match roll {
            x if x < 0.4 => (PEDESTRIAN, (0.25, 0.35), (1.6, 1.9)),
            x if x < 0.6 => (TRAFFIC_CONE, (0.15, 0.25), (0.5, 0.8)),
            _ => (VEGETATION, (0.5, 1.1), (2.5, 4.8)),
        };
        let radius = uniform(rng, r);
        let h = uniform(rng, h);
        if let Some(c) = placer.place(rng, [2.0 * radius, 2.0 * radius], None) {
            scene.primitives.push(Primitive { shape: Shape::Cylinder { center: c, radius, z0: 0.0, z1: h }, label });
        }
    }
    scene
}

pub fn ray_cast_scan(scene: &Scene, l: &LidarSpec, rng: &mut ChaCha8Rng) -> Vec<LidarPoint> {
    let mut points = Vec::new();
    if l.beams == 0 || l.azimuth_step_deg <= 0.0 {
        return points;
    }
    let steps = (360.0 / l.azimuth_step_deg).round() as usize;
    for off in &l.sweep_offsets {
        let o = [l.origin[0] + off[0], l.origin[1] + off[1], l.origin[2]];
        for b in 0..l.beams {
            let f = if l.beams == 1 { 0.0 } else { b as f64 / (l.beams - 1) as f64 };
            let el = (l.elevation_deg.0 + f * (l.elevation_deg.1 - l.elevation_deg.0)).to_radians();
            for s in 0..steps {
                let az = (s as f64 * l.azimuth_step_deg).to_radians();
                let d = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
                if let Some(hit) = scene.cast(o, d, l.max_range) {
                    let p: [f64; 3] = std::array::from_fn(|a| (o[a] + hit.t * d[a]) as f32 as f64);
                    let i = (class_intensity(hit.label) + uniform(rng, (-l.intensity_noise, l.intensity_noise))).clamp(0.0, 1.0);
                    points.push(LidarPoint { position: p, intensity: (i * l.intensity_max) as f32 as f64 });
                }
            }
        }
    }
    points
}

/// Flat-shaded render plus the per-pixel hit distance (infinite for sky).
pub fn render(scene: &Scene, calib: &CameraCalib, max_range: f64) -> (Image, Vec<f64>) {
    let (w, h) = (calib.width, calib.height);
    let mut img = Image::filled(w, h, class_color(FREE));
    let mut depth = vec![f64::INFINITY; (w * h) as usize];
    let o = calib.to_lidar([0.0; 3]);
    for v in 0..h {
        for u in 0..w {
            let p = calib.unproject(u as f64, v as f64, 1.0);
            let d = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let d = d.map(|x| x / n);
            if let Some(hit) = scene.cast(o, d, max_range) {
                let shade = if hit.normal[2].abs() > 0.5 {
                    1.0
                } else if hit.normal[0].abs() > hit.normal[1].abs() {
                    0.8
                } else {
                    0.65
                };
                img.set_pixel(u, v, class_color(hit.label).map(|c| (c as f64 * shade).round() as u8));
                depth[(v * w + u) as usize] = hit.t;
            }
        }
    }
    (img, depth)
}

/// Block-mean color plus normalized inverse depth at `1 / scale` size.
pub fn feature_map(img: &Image, depth: &[f64], scale: u32, max_range: f64) -> Result<FeatureMap> {
    let (w, h) = (img.width.div_ceil(scale), img.height.div_ceil(scale));
    let mut data = vec![0.0f32; (4 * w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 4];
            let mut n = 0.0;
            for py in y * scale..((y + 1) * scale).min(img.height) {
                for px in x * scale..((x + 1) * scale).min(img.width) {
                    let c = img.pixel(px, py);
                    for k in 0..3 {
                        acc[k] += c[k] as f64 / 255.0;
                    }
                    let d = depth[(py * img.width + px) as usize];
                    acc[3] += if d.is_finite() { 1.0 - d / max_range } else { 0.0 };
                    n += 1.0;
                }
            }
            for k in 0..4 {
                data[((k * h + y) * w + x) as usize] = (acc[k as usize] / n) as f32;
            }
        }
    }
    Ok(FeatureMap::new(scale, 4, h, w, data)?)
}

/// Marks voxels whose center falls outside the camera frustum as void.
pub fn void_outside_camera(gt: &mut OccupancyGrid, spec: &GridSpec, calib: &CameraCalib) {
    let d = spec.dims;
    for x in 0..d[0] {
        for y in 0..d[1] {
            for z in 0..d[2] {
                let c = spec.voxel_center([x as i32, y as i32, z as i32]);
                let q = calib.to_camera(c);
                let inside = q[2] > 0.0 && {
                    let (u, v) = calib.pixel_of(q);
                    calib.in_image(u, v)
                };
                if !inside {
                    gt.set([x, y, z], VOID);
                }
            }
        }
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SynthFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = build_scene(spec, &mut rng);
    let scan = ray_cast_scan(&scene, &spec.lidar, &mut rng);
    let calib = spec.camera.calib();
    let (image, depth) = render(&scene, &calib, spec.lidar.max_range);
    let mut gt = scene.voxelize(&spec.grid);
    if spec.void_outside_camera {
        void_outside_camera(&mut gt, &spec.grid, &calib);
    }
    let feature_maps = match spec.feature_scale {
        Some(s) => vec![feature_map(&image, &depth, s, spec.lidar.max_range)?],
        None => Vec::new(),
    };
    Ok(SynthFrame { scan, image, calib, gt, feature_maps, scene })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ground_only(seed: u64) -> SceneSpec {
        let mut s = SceneSpec::desk(seed);
        s.vehicles = (0, 0);
        s.thin_boxes = (0, 0);
        s.cylinders = (0, 0);
        s.void_outside_camera = false;
        s
    }

    #[test]
    fn ground_plane_fills_one_layer() {
        let f = generate_scene(&ground_only(1)).unwrap();
        let d = f.gt.dims();
        for x in 0..d[0] {
            for y in 0..d[1] {
                for z in 0..d[2] {
                    assert_eq!(labels::is_occupied(f.gt.get([x, y, z])), z == 2, "voxel {x},{y},{z}");
                }
            }
        }
    }

    #[test]
    fn zero_beams_give_an_empty_scan() {
        let mut s = SceneSpec::desk(2);
        s.lidar.beams = 0;
        let f = generate_scene(&s).unwrap();
        assert!(f.scan.is_empty());
        assert!(f.gt.occupied_count() > 0);
    }

    #[test]
    fn no_primitives_is_a_valid_empty_scene() {
        let mut s = ground_only(3);
        s.ground = None;
        let f = generate_scene(&s).unwrap();
        assert!(f.scan.is_empty());
        assert_eq!(f.gt.occupied_count(), 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&SceneSpec::desk(7)).unwrap();
        let b = generate_scene(&SceneSpec::desk(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.scan, generate_scene(&SceneSpec::desk(8)).unwrap().scan);
    }

    #[test]
    fn box_voxelization_matches_overlap_rule() {
        let spec = GridSpec::new([0.0; 3], [4.0; 3], 1.0).unwrap();
        let scene = Scene {
            ground: None,
            primitives: vec![Primitive { shape: Shape::Box { min: [0.5, 1.0, 0.0], max: [2.0, 1.5, 3.5] }, label: CAR }],
        };
        let g = scene.voxelize(&spec);
        // x cells 0,1; y cell 1; z cells 0..4.
        assert_eq!(g.occupied_count(), 2 * 1 * 4);
        assert_eq!(g.get([1, 1, 3]), CAR);
        assert_eq!(g.get([2, 1, 0]), FREE);
    }

    #[test]
    fn cylinder_footprint_uses_closest_point() {
        let spec = GridSpec::new([0.0; 3], [4.0; 3], 1.0).unwrap();
        let scene = Scene {
            ground: None,
            primitives: vec![Primitive { shape: Shape::Cylinder { center: [2.0, 2.0], radius: 0.5, z0: 0.0, z1: 1.0 }, label: PEDESTRIAN }],
        };
        // The disc touches the four cells around the corner (2, 2).
        assert_eq!(scene.voxelize(&spec).occupied_count(), 4);
    }

    #[test]
    fn rays_hit_boxes_and_cylinders() {
        let scene = Scene {
            ground: None,
            primitives: vec![
                Primitive { shape: Shape::Box { min: [5.0, -1.0, 0.0], max: [6.0, 1.0, 2.0] }, label: CAR },
                Primitive { shape: Shape::Cylinder { center: [0.0, 3.0], radius: 1.0, z0: 0.0, z1: 2.0 }, label: VEGETATION },
            ],
        };
        let h = scene.cast([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], 100.0).unwrap();
        assert!((h.t - 5.0).abs() < 1e-12 && h.label == CAR && h.normal == [-1.0, 0.0, 0.0]);
        let h = scene.cast([0.0, 0.0, 1.0], [0.0, 1.0, 0.0], 100.0).unwrap();
        assert!((h.t - 2.0).abs() < 1e-12 && h.label == VEGETATION);
        assert!(scene.cast([0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], 100.0).is_none());
    }
}
