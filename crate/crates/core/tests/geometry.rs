use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socc_core::fusion::{fuse, project, CameraCalib, Image, LidarPoint};

const EYE: [[f64; 4]; 4] = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];

/// Rotation from a random unit quaternion plus a translation of up to 3 m.
fn random_rigid<R: Rng>(rng: &mut R) -> [[f64; 4]; 4] {
    let mut q = [0.0f64; 4];
    loop {
        q.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    let r = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    let mut t = EYE;
    for i in 0..3 {
        t[i][..3].copy_from_slice(&r[i]);
        t[i][3] = rng.gen_range(-3.0..3.0);
    }
    t
}

fn random_calib<R: Rng>(rng: &mut R) -> CameraCalib {
    let (w, h) = (rng.gen_range(64..1600), rng.gen_range(48..900));
    let f = rng.gen_range(100.0..1500.0);
    let k = [[f, 0.0, w as f64 / 2.0], [0.0, f * rng.gen_range(0.9..1.1), h as f64 / 2.0], [0.0, 0.0, 1.0]];
    CameraCalib::new(k, random_rigid(rng), w, h).unwrap()
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn hand_computed_projections() {
    let k = [[100.0, 0.0, 320.0], [0.0, 100.0, 240.0], [0.0, 0.0, 1.0]];
    let calib = CameraCalib::new(k, EYE, 640, 480).unwrap();
    let pts = [[0.0, 0.0, 5.0], [1.0, 0.0, 5.0]].map(|position| LidarPoint { position, intensity: 0.0 });
    let p = project(&pts, &calib);
    assert_eq!((p[0].u, p[0].v, p[0].depth), (320.0, 240.0, 5.0));
    assert_eq!((p[1].u, p[1].v, p[1].depth), (340.0, 240.0, 5.0));
}

#[test]
fn unprojection_inverts_projection_in_the_frustum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let calib = random_calib(&mut rng);
        for _ in 0..100 {
            let u = rng.gen_range(0.0..(calib.width - 1) as f64);
            let v = rng.gen_range(0.0..(calib.height - 1) as f64);
            let depth = rng.gen_range(0.5..80.0);
            let p = calib.unproject(u, v, depth);
            let pr = project(&[LidarPoint { position: p, intensity: 0.0 }], &calib);
            assert_eq!(pr.len(), 1, "in-frustum point was dropped");
            let back = calib.unproject(pr[0].u, pr[0].v, pr[0].depth);
            worst = worst.max(dist(p, back));
            worst = worst.max(dist(p, calib.to_lidar(calib.to_camera(p))));
        }
    }
    assert!(worst <= 1e-5, "round trip error {worst} m");
}

#[test]
fn projection_keeps_exactly_the_frustum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let calib = random_calib(&mut rng);
    let pts: Vec<LidarPoint> = (0..5000)
        .map(|_| LidarPoint { position: [0, 1, 2].map(|_| rng.gen_range(-30.0..30.0)), intensity: 0.0 })
        .collect();
    let kept: Vec<usize> = project(&pts, &calib).iter().map(|p| p.index).collect();
    let t = calib.t_cam_lidar;
    let want: Vec<usize> = pts
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let q: Vec<f64> = (0..3).map(|i| (0..3).map(|j| t[i][j] * p.position[j]).sum::<f64>() + t[i][3]).collect();
            let u = calib.k[0][0] * q[0] / q[2] + calib.k[0][2];
            let v = calib.k[1][1] * q[1] / q[2] + calib.k[1][2];
            q[2] > 0.0 && u >= 0.0 && v >= 0.0 && u <= (calib.width - 1) as f64 && v <= (calib.height - 1) as f64
        })
        .map(|(i, _)| i)
        .collect();
    assert!(!want.is_empty());
    assert_eq!(kept, want);
}

#[test]
fn fused_colors_follow_a_linear_ramp() {
    // Bilinear interpolation reproduces a linear image exactly, so red must
    // equal u / 255 and green v / 255 at every projected point.
    let (w, h) = (200u32, 150u32);
    let mut img = Image::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            img.set_pixel(x, y, [x as u8, y as u8, 7]);
        }
    }
    let k = [[120.0, 0.0, 100.0], [0.0, 120.0, 75.0], [0.0, 0.0, 1.0]];
    let calib = CameraCalib::new(k, EYE, w, h).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pts: Vec<LidarPoint> = (0..2000)
        .map(|_| LidarPoint {
            position: [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), rng.gen_range(-1.0..10.0)],
            intensity: rng.gen_range(0.0..1.0),
        })
        .collect();
    let fused = fuse(&pts, &img, None, &calib).unwrap();
    let proj = project(&pts, &calib);
    assert_eq!(fused.len(), proj.len());
    for (f, p) in fused.iter().zip(&proj) {
        assert_eq!(f.position, pts[p.index].position);
        assert!((f.features[0] as f64 - p.u / 255.0).abs() < 1e-6);
        assert!((f.features[1] as f64 - p.v / 255.0).abs() < 1e-6);
        assert!((f.features[2] as f64 - 7.0 / 255.0).abs() < 1e-6);
        assert_eq!(f.features[3], pts[p.index].intensity as f32);
    }
}

proptest! {
    #[test]
    fn non_rigid_extrinsics_are_rejected(seed in any::<u64>(), scale in 1.01f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = random_rigid(&mut rng);
        let i = rng.gen_range(0..3);
        let j = (0..3).max_by(|&a, &b| t[i][a].abs().total_cmp(&t[i][b].abs())).unwrap();
        t[i][j] *= scale;
        let k = [[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]];
        prop_assert!(CameraCalib::new(k, t, 100, 100).is_err());
    }

    #[test]
    fn random_rigid_extrinsics_are_accepted(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = [[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]];
        prop_assert!(CameraCalib::new(k, random_rigid(&mut rng), 100, 100).is_ok());
    }
}
