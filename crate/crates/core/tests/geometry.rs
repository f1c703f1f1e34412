use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weaklab_core::geometry::*;
use weaklab_core::synth::{generate_scene, SceneConfig};

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    Rotation3::new(axis.normalize() * rng.random_range(0.0..std::f64::consts::PI))
}

fn random_camera(rng: &mut ChaCha8Rng) -> CameraModel {
    CameraModel::looking(
        [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.5..2.5)],
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(-0.3..0.3),
        rng.random_range(60.0..200.0),
        rng.random_range(60.0..200.0),
        160,
        90,
    )
    .unwrap()
}

/// A point roughly in front of `cam`, anywhere in (or a bit past) its frustum.
fn point_in_front(rng: &mut ChaCha8Rng, cam: &CameraModel) -> Point3 {
    let u = rng.random_range(-20.0..180.0);
    let v = rng.random_range(-20.0..110.0);
    let depth = rng.random_range(0.5..30.0);
    cam.unproject(u, v, depth)
}

#[test]
fn rigid_motion_of_world_and_camera_leaves_hits_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let cam = random_camera(&mut rng);
        let rot = random_rotation(&mut rng);
        let shift =
            Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-5.0..5.0));
        let moved = cam.with_world_transform(&rot, &shift);
        moved.validate().unwrap();

        // hand-composed: camera coordinates of x' = rot x + shift are R rot^T (x' - shift) + t
        let r_hand: Matrix3<f64> = cam.rotation * rot.matrix().transpose();
        let t_hand = cam.translation - r_hand * shift;
        assert!((moved.rotation - r_hand).amax() < 1e-12);
        assert!((moved.translation - t_hand).amax() < 1e-9);

        for _ in 0..10 {
            let p = point_in_front(&mut rng, &cam);
            let q = rot * Vector3::from(p) + shift;
            let q = [q.x, q.y, q.z];
            let a = cam.project(&p);
            let b = moved.project(&q);
            let hand = {
                let pc = r_hand * Vector3::from(q) + t_hand;
                (cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy, pc.z)
            };
            match (a, b) {
                (Some(a), Some(b)) => {
                    for (x, y) in [(a.0, b.0), (a.1, b.1), (a.2, b.2), (a.0, hand.0), (a.1, hand.1), (a.2, hand.2)] {
                        assert!((x - y).abs() < 1e-7, "{a:?} {b:?} {hand:?}");
                    }
                }
                (None, None) => {}
                // only a point sitting exactly on the border may flip
                (a, b) => {
                    let (u, v) = (hand.0, hand.1);
                    let near = |x: f64, lim: f64| x.abs() < 1e-6 || (x - lim).abs() < 1e-6;
                    assert!(near(u, 160.0) || near(v, 90.0), "{a:?} vs {b:?}");
                }
            }
        }
        let c = moved.center();
        let expect = rot * Vector3::from(cam.center()) + shift;
        assert!((Vector3::from(c) - expect).amax() < 1e-9);
    }
}

#[test]
fn unproject_inverts_project() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for _ in 0..20 {
        let cam = random_camera(&mut rng);
        for _ in 0..50 {
            let p = point_in_front(&mut rng, &cam);
            if let Some((u, v, d)) = cam.project(&p) {
                let back = cam.unproject(u, v, d);
                for k in 0..3 {
                    assert!((back[k] - p[k]).abs() < 1e-6, "{back:?} vs {p:?}");
                }
                let ray = cam.ray_direction(u, v);
                let to_p = (Vector3::from(p) - Vector3::from(cam.center())).normalize();
                assert!((ray - to_p).amax() < 1e-9);
                checked += 1;
            }
        }
    }
    assert!(checked > 300, "only {checked} points landed in frame");
}

#[test]
fn scaling_along_the_ray_keeps_the_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let cam = random_camera(&mut rng);
        let (u, v) = (rng.random_range(0.0..160.0), rng.random_range(0.0..90.0));
        let near = cam.unproject(u, v, 1.0);
        let c = Vector3::from(cam.center());
        let s = rng.random_range(0.1..40.0);
        let far = c + (Vector3::from(near) - c) * s;
        let (u2, v2, d2) = cam.project(&[far.x, far.y, far.z]).expect("still in frame");
        assert!((u - u2).abs() < 1e-7 && (v - v2).abs() < 1e-7);
        assert!((d2 - s).abs() < 1e-9 * s.max(1.0));
    }
}

#[test]
fn points_behind_the_camera_never_project() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let cam = random_camera(&mut rng);
        let front = point_in_front(&mut rng, &cam);
        let c = Vector3::from(cam.center());
        let behind = c - (Vector3::from(front) - c);
        assert!(cam.project(&[behind.x, behind.y, behind.z]).is_none());
    }
}

/// Brute-force frustum membership from the camera's field of view.
fn in_frustum(cam: &CameraModel, p: &Point3) -> bool {
    let pc = cam.rotation * Vector3::from(*p) + cam.translation;
    if pc.z <= MIN_DEPTH {
        return false;
    }
    let (tx, ty) = (pc.x / pc.z, pc.y / pc.z);
    let (left, right) = (-cam.cx / cam.fx, (cam.width as f64 - cam.cx) / cam.fx);
    let (top, bottom) = (-cam.cy / cam.fy, (cam.height as f64 - cam.cy) / cam.fy);
    tx >= left && tx < right && ty >= top && ty < bottom
}

#[test]
fn camera_subset_matches_per_point_frustum_test() {
    let cfg = SceneConfig { num_cameras: 6, image_width: 96, image_height: 48, ..SceneConfig::default() };
    for seed in [1, 2] {
        let frame = generate_scene(&cfg, seed).unwrap();
        let subset = camera_subset(&frame);
        let brute: Vec<usize> = (0..frame.points.len())
            .filter(|&i| frame.cameras.iter().any(|c| in_frustum(c, &frame.points[i])))
            .collect();
        assert_eq!(subset, brute);
        assert!(!subset.is_empty() && subset.len() < frame.points.len());

        // nearest hit agrees with an explicit minimum over cameras
        let hits = nearest_hits(&frame.points, &frame.cameras);
        for i in (0..frame.points.len()).step_by(97) {
            let best = frame
                .cameras
                .iter()
                .filter_map(|c| c.project(&frame.points[i]).map(|h| h.2))
                .fold(f64::INFINITY, f64::min);
            match hits[i] {
                Some(h) => assert_eq!(h.depth, best),
                None => assert!(best.is_infinite()),
            }
        }
    }
}
