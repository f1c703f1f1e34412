//! Deterministic synthetic LiDAR + camera scenes.
//!
//! A scene is a (possibly tilted) ground plane plus boxes, vertical cylinders and
//! ellipsoidal blobs, each carrying a semantic class. LiDAR points are sampled on
//! primitive surfaces and kept only when the sensor sees them, so the camera rig
//! (mounted at the sensor) observes the same surfaces. Images are ray-cast from
//! the same primitives with a per-class albedo, per-object colour jitter and
//! per-pixel texture noise.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::container::Container;
use crate::error::{config_err, Error, Result};
use crate::geometry::{CameraModel, Point3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Plane,
    Box,
    Cylinder,
    Blob,
}

impl Shape {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "plane" => Shape::Plane,
            "box" => Shape::Box,
            "cylinder" => Shape::Cylinder,
            "blob" => Shape::Blob,
            other => return Err(config_err(format!("unknown shape `{other}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Plane => "plane",
            Shape::Box => "box",
            Shape::Cylinder => "cylinder",
            Shape::Blob => "blob",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttachMode {
    /// Placed touching the anchor's side.
    Side,
    /// Placed on top of the anchor (e.g. a crown on a trunk).
    Top,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attach {
    pub to: usize,
    pub mode: AttachMode,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub shape: Shape,
    pub count: usize,
    pub points_per_object: usize,
    /// Box: length, width, height. Cylinder: radius, radius, height. Blob: radii.
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
    pub clearance: f64,
    pub albedo: [f64; 3],
    pub intensity: f64,
    pub range: (f64, f64),
    pub attach: Option<Attach>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// `classes[0]` is the ground.
    pub classes: Vec<ClassSpec>,
    pub ground_points: usize,
    pub ground_extent: (f64, f64),
    pub noise_sigma: f64,
    pub max_tilt_deg: f64,
    pub sensor_height: f64,
    pub num_cameras: usize,
    pub camera_fov_deg: f64,
    pub camera_pitch_deg: f64,
    pub camera_yaw_offset_deg: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub texture_noise: f64,
    pub color_jitter: f64,
    pub color_band: f64,
    pub intensity_noise: f64,
    pub min_gap: f64,
    pub background: [f64; 3],
}

fn class(
    name: &str,
    shape: Shape,
    count: usize,
    ppo: usize,
    size_min: [f64; 3],
    size_max: [f64; 3],
    clearance: f64,
    albedo: [f64; 3],
    intensity: f64,
    range: (f64, f64),
) -> ClassSpec {
    ClassSpec {
        name: name.into(),
        shape,
        count,
        points_per_object: ppo,
        size_min,
        size_max,
        clearance,
        albedo,
        intensity,
        range,
        attach: None,
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        let mut pedestrian = class(
            "pedestrian",
            Shape::Cylinder,
            4,
            40,
            [0.25, 0.25, 1.5],
            [0.35, 0.35, 1.9],
            0.2,
            [0.85, 0.6, 0.25],
            0.45,
            (5.0, 22.0),
        );
        pedestrian.attach = Some(Attach { to: 1, mode: AttachMode::Side, probability: 0.5 });
        let mut vegetation = class(
            "vegetation",
            Shape::Blob,
            4,
            100,
            [1.0, 1.0, 0.9],
            [1.5, 1.5, 1.3],
            0.3,
            [0.2, 0.55, 0.2],
            0.35,
            (6.0, 24.0),
        );
        vegetation.attach = Some(Attach { to: 3, mode: AttachMode::Top, probability: 0.6 });
        SceneConfig {
            classes: vec![
                class("ground", Shape::Plane, 1, 0, [0.0; 3], [0.0; 3], 0.0, [0.35, 0.35, 0.38], 0.25, (0.0, 0.0)),
                class(
                    "car",
                    Shape::Box,
                    5,
                    120,
                    [3.6, 1.6, 1.3],
                    [4.6, 2.0, 1.7],
                    0.25,
                    [0.7, 0.15, 0.15],
                    0.6,
                    (5.0, 24.0),
                ),
                pedestrian,
                class(
                    "pole",
                    Shape::Cylinder,
                    4,
                    40,
                    [0.1, 0.1, 3.5],
                    [0.18, 0.18, 5.5],
                    0.2,
                    [0.55, 0.55, 0.6],
                    0.5,
                    (5.0, 24.0),
                ),
                vegetation,
                class(
                    "building",
                    Shape::Box,
                    2,
                    250,
                    [8.0, 1.5, 4.0],
                    [14.0, 3.0, 7.0],
                    0.2,
                    [0.6, 0.5, 0.4],
                    0.3,
                    (20.0, 27.0),
                ),
            ],
            ground_points: 1800,
            ground_extent: (3.0, 30.0),
            noise_sigma: 0.02,
            max_tilt_deg: 2.0,
            sensor_height: 1.8,
            num_cameras: 6,
            camera_fov_deg: 70.0,
            camera_pitch_deg: 4.0,
            camera_yaw_offset_deg: 0.0,
            image_width: 256,
            image_height: 128,
            texture_noise: 0.03,
            color_jitter: 0.08,
            color_band: 0.3,
            intensity_noise: 0.05,
            min_gap: 1.0,
            background: [0.55, 0.7, 0.9],
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Exact number of points each class receives per scene.
    pub fn class_point_counts(&self) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { self.ground_points } else { c.count * c.points_per_object })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 3 {
            return Err(config_err("need at least 3 classes (ground + 2 object classes)"));
        }
        if self.classes[0].shape != Shape::Plane {
            return Err(config_err("class 0 must be the ground plane"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(config_err("noise sigma must be a finite non-negative number"));
        }
        if !(self.ground_extent.0 >= 0.0 && self.ground_extent.1 > self.ground_extent.0) {
            return Err(config_err("ground extent must satisfy 0 <= min < max"));
        }
        if self.num_cameras == 0 || self.image_width < 2 || self.image_height < 2 {
            return Err(config_err("camera rig needs >= 1 camera and images of at least 2x2"));
        }
        if !(self.camera_fov_deg > 0.0 && self.camera_fov_deg < 179.0) {
            return Err(config_err("camera fov must lie in (0, 179) degrees"));
        }
        if self.sensor_height <= 0.0 {
            return Err(config_err("sensor height must be positive"));
        }
        if self.class_point_counts().iter().sum::<usize>() == 0 {
            return Err(config_err("scene would contain no points"));
        }
        for (i, c) in self.classes.iter().enumerate().skip(1) {
            if c.shape == Shape::Plane {
                return Err(config_err(format!("class `{}`: only class 0 may be a plane", c.name)));
            }
            if c.count > 0 && c.points_per_object == 0 {
                return Err(config_err(format!("class `{}`: points_per_object must be > 0", c.name)));
            }
            for k in 0..3 {
                if !(c.size_min[k] > 0.0 && c.size_max[k] >= c.size_min[k]) {
                    return Err(config_err(format!("class `{}`: invalid size range", c.name)));
                }
            }
            if !(c.range.0 > 0.0 && c.range.1 >= c.range.0) {
                return Err(config_err(format!("class `{}`: invalid placement range", c.name)));
            }
            if let Some(a) = &c.attach {
                if a.to == 0 || a.to >= i {
                    return Err(config_err(format!(
                        "class `{}`: attach target must be an earlier object class",
                        c.name
                    )));
                }
                if !(0.0..=1.0).contains(&a.probability) {
                    return Err(config_err(format!("class `{}`: attach probability outside [0,1]", c.name)));
                }
            }
        }
        Ok(())
    }

    pub fn cameras(&self) -> Result<Vec<CameraModel>> {
        let fx = (self.image_width as f64 / 2.0) / (self.camera_fov_deg.to_radians() / 2.0).tan();
        (0..self.num_cameras)
            .map(|k| {
                let yaw = self.camera_yaw_offset_deg.to_radians() + TAU * k as f64 / self.num_cameras as f64;
                let center = [0.1 * yaw.cos(), 0.1 * yaw.sin(), self.sensor_height];
                CameraModel::looking(
                    center,
                    yaw,
                    self.camera_pitch_deg.to_radians(),
                    fx,
                    fx,
                    self.image_width,
                    self.image_height,
                )
            })
            .collect()
    }
}

/// Ground plane `z = a x + b y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlane {
    pub a: f64,
    pub b: f64,
    pub extent: f64,
}

impl GroundPlane {
    pub fn z_at(&self, x: f64, y: f64) -> f64 {
        self.a * x + self.b * y
    }

    /// Unit normal pointing up.
    pub fn normal(&self) -> Vector3<f64> {
        Vector3::new(-self.a, -self.b, 1.0).normalize()
    }

    /// Unsigned orthogonal distance of `p` to the plane.
    pub fn distance(&self, p: &Point3) -> f64 {
        (p[2] - self.z_at(p[0], p[1])).abs() / (1.0 + self.a * self.a + self.b * self.b).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Object {
    pub class: usize,
    pub shape: Shape,
    pub center: [f64; 2],
    pub yaw: f64,
    /// Half extents (box), radius/radius/height (cylinder) or radii (blob).
    pub size: [f64; 3],
    /// z of the lowest point (box, cylinder) or of the centre (blob).
    pub base_z: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
struct Ray {
    o: Vector3<f64>,
    d: Vector3<f64>,
}

impl Object {
    /// Horizontal bounding radius.
    pub fn footprint(&self) -> f64 {
        match self.shape {
            Shape::Box => (self.size[0].powi(2) + self.size[1].powi(2)).sqrt(),
            Shape::Cylinder => self.size[0],
            Shape::Blob => self.size[0].max(self.size[1]),
            Shape::Plane => 0.0,
        }
    }

    pub fn top_z(&self) -> f64 {
        match self.shape {
            Shape::Box => self.base_z + 2.0 * self.size[2],
            Shape::Cylinder => self.base_z + self.size[2],
            Shape::Blob => self.base_z + self.size[2],
            Shape::Plane => self.base_z,
        }
    }

    fn to_local(&self, v: &Vector3<f64>, is_point: bool) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        let (x, y, z) =
            if is_point { (v.x - self.center[0], v.y - self.center[1], v.z - self.base_z) } else { (v.x, v.y, v.z) };
        Vector3::new(c * x + s * y, -s * x + c * y, z)
    }

    fn from_local(&self, v: &Vector3<f64>, is_point: bool) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        let w = Vector3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z);
        if is_point {
            w + Vector3::new(self.center[0], self.center[1], self.base_z)
        } else {
            w
        }
    }

    /// Nearest positive hit distance and world-space normal.
    fn intersect(&self, ray: &Ray) -> Option<(f64, Vector3<f64>)> {
        let o = self.to_local(&ray.o, true);
        let d = self.to_local(&ray.d, false);
        let (t, n) = match self.shape {
            Shape::Box => {
                let h = self.size;
                let lo = [-h[0], -h[1], 0.0];
                let hi = [h[0], h[1], 2.0 * h[2]];
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let mut axis0 = 0;
                let mut axis1 = 0;
                for k in 0..3 {
                    if d[k].abs() < 1e-15 {
                        if o[k] < lo[k] || o[k] > hi[k] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    if a > t0 {
                        t0 = a;
                        axis0 = k;
                    }
                    if b < t1 {
                        t1 = b;
                        axis1 = k;
                    }
                }
                if t0 > t1 || t1 <= 1e-9 {
                    return None;
                }
                let (t, axis) = if t0 > 1e-9 { (t0, axis0) } else { (t1, axis1) };
                let mut n = Vector3::zeros();
                n[axis] = if d[axis] > 0.0 { -1.0 } else { 1.0 };
                (t, n)
            }
            Shape::Cylinder => {
                let r = self.size[0];
                let hgt = self.size[2];
                let mut best: Option<(f64, Vector3<f64>)> = None;
                let a = d.x * d.x + d.y * d.y;
                if a > 1e-15 {
                    let b = 2.0 * (o.x * d.x + o.y * d.y);
                    let c = o.x * o.x + o.y * o.y - r * r;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                            let z = o.z + t * d.z;
                            if t > 1e-9 && (0.0..=hgt).contains(&z) && best.is_none_or(|(bt, _)| t < bt) {
                                let p = o + d * t;
                                best = Some((t, Vector3::new(p.x, p.y, 0.0) / r));
                            }
                        }
                    }
                }
                if d.z.abs() > 1e-15 {
                    for (zc, nz) in [(0.0, -1.0), (hgt, 1.0)] {
                        let t = (zc - o.z) / d.z;
                        let p = o + d * t;
                        if t > 1e-9 && p.x * p.x + p.y * p.y <= r * r && best.is_none_or(|(bt, _)| t < bt) {
                            best = Some((t, Vector3::new(0.0, 0.0, nz)));
                        }
                    }
                }
                best?
            }
            Shape::Blob => {
                let r = Vector3::from(self.size);
                let os = o.component_div(&r);
                let ds = d.component_div(&r);
                let a = ds.dot(&ds);
                let b = 2.0 * os.dot(&ds);
                let c = os.dot(&os) - 1.0;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)].into_iter().find(|&t| t > 1e-9)?;
                let p = o + d * t;
                (t, p.component_div(&r.component_mul(&r)).normalize())
            }
            Shape::Plane => return None,
        };
        Some((t, self.from_local(&n, false)))
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> Point3 {
        let local = match self.shape {
            Shape::Box => {
                let [hx, hy, hz] = self.size;
                let areas = [hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy];
                let face = pick_weighted(&areas, rng);
                let a: f64 = rng.random_range(-1.0..1.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                match face {
                    0 => Vector3::new(-hx, a * hy, (b + 1.0) * hz),
                    1 => Vector3::new(hx, a * hy, (b + 1.0) * hz),
                    2 => Vector3::new(a * hx, -hy, (b + 1.0) * hz),
                    3 => Vector3::new(a * hx, hy, (b + 1.0) * hz),
                    4 => Vector3::new(a * hx, b * hy, 0.0),
                    _ => Vector3::new(a * hx, b * hy, 2.0 * hz),
                }
            }
            Shape::Cylinder => {
                let r = self.size[0];
                let h = self.size[2];
                let lateral = TAU * r * h;
                let cap = PI * r * r;
                let face = pick_weighted(&[lateral, cap, cap], rng);
                let th: f64 = rng.random_range(0.0..TAU);
                match face {
                    0 => Vector3::new(r * th.cos(), r * th.sin(), rng.random_range(0.0..h)),
                    k => {
                        let rr = r * rng.random::<f64>().sqrt();
                        Vector3::new(rr * th.cos(), rr * th.sin(), if k == 1 { 0.0 } else { h })
                    }
                }
            }
            Shape::Blob => {
                let v =
                    Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
                let v: Vector3<f64> = v.normalize();
                v.component_mul(&Vector3::from(self.size))
            }
            Shape::Plane => Vector3::zeros(),
        };
        let p = self.from_local(&local, true);
        [p.x, p.y, p.z]
    }
}

fn pick_weighted(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// Everything needed to ray-cast a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    pub ground: Option<GroundPlane>,
    pub ground_color: [f64; 3],
    pub objects: Vec<Object>,
    pub background: [f64; 3],
    pub texture_noise: f64,
    pub seed: u64,
}

/// What a ray hit first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HitTarget {
    Ground,
    Object(usize),
}

impl SceneGeometry {
    fn cast(&self, ray: &Ray) -> Option<(f64, HitTarget, Vector3<f64>)> {
        let mut best: Option<(f64, HitTarget, Vector3<f64>)> = None;
        if let Some(g) = &self.ground {
            let denom = ray.d.z - g.a * ray.d.x - g.b * ray.d.y;
            if denom.abs() > 1e-15 {
                let t = (g.a * ray.o.x + g.b * ray.o.y - ray.o.z) / denom;
                let p = ray.o + ray.d * t;
                if t > 1e-9 && (p.x * p.x + p.y * p.y).sqrt() <= g.extent {
                    best = Some((t, HitTarget::Ground, g.normal()));
                }
            }
        }
        for (i, obj) in self.objects.iter().enumerate() {
            if let Some((t, n)) = obj.intersect(ray) {
                if best.is_none_or(|(bt, _, _)| t < bt) {
                    best = Some((t, HitTarget::Object(i), n));
                }
            }
        }
        best
    }

    fn visible_from(&self, origin: &Vector3<f64>, p: &Point3, target: HitTarget) -> bool {
        self.incidence(origin, p, target).is_some()
    }

    /// `|cos|` of the angle between the beam from `origin` and the surface normal
    /// at `p`, or `None` when `p` is not the first hit on `target`.
    fn incidence(&self, origin: &Vector3<f64>, p: &Point3, target: HitTarget) -> Option<f64> {
        let pv = Vector3::from(*p);
        let dist = (pv - origin).norm();
        if dist < 1e-9 {
            return None;
        }
        let ray = Ray { o: *origin, d: (pv - origin) / dist };
        match self.cast(&ray) {
            Some((t, hit, n)) if hit == target && (t - dist).abs() <= 1e-6 * dist.max(1.0) => Some(n.dot(&ray.d).abs()),
            _ => None,
        }
    }

    fn color_of(&self, target: HitTarget) -> [f64; 3] {
        match target {
            HitTarget::Ground => self.ground_color,
            HitTarget::Object(i) => self.objects[i].color,
        }
    }
}

/// Row-major `height x width x 3` image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&c);
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic standard-normal value for one pixel channel.
fn pixel_noise(seed: u64, camera: usize, x: usize, y: usize, ch: usize) -> f64 {
    let h = splitmix(seed ^ splitmix(((camera as u64) << 40) ^ ((y as u64) << 20) ^ ((x as u64) << 2) ^ ch as u64));
    let h2 = splitmix(h);
    let u1 = ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    let u2 = ((h2 >> 11) as f64) / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Ray-casts `geometry` through `camera`.
pub fn render_image(geometry: &SceneGeometry, camera: &CameraModel, camera_index: usize) -> Image {
    let mut img = Image::filled(camera.width, camera.height, geometry.background);
    let c = camera.center();
    let o = Vector3::from(c);
    let light = Vector3::new(0.3, 0.2, 0.93).normalize();
    for y in 0..camera.height {
        for x in 0..camera.width {
            let d = camera.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
            if let Some((_, target, n)) = geometry.cast(&Ray { o, d }) {
                let base = geometry.color_of(target);
                let shade = 0.92 + 0.08 * n.dot(&light).abs();
                let mut col = [0.0; 3];
                for ch in 0..3 {
                    let noise = geometry.texture_noise * pixel_noise(geometry.seed, camera_index, x, y, ch);
                    col[ch] = (base[ch] * shade + noise).clamp(0.0, 1.0);
                }
                img.set(x, y, col);
            }
        }
    }
    img
}

/// One generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub points: Vec<Point3>,
    pub intensity: Vec<f64>,
    pub gt_class: Vec<usize>,
    /// Object instance per point, `-1` for ground.
    pub instance: Vec<i64>,
    pub images: Vec<Image>,
    pub cameras: Vec<CameraModel>,
    pub num_classes: usize,
    /// True ground plane `(a, b)` of `z = a x + b y`.
    pub ground_plane: [f64; 2],
    pub seed: u64,
}

impl SceneFrame {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The frame restricted to `indices` (order kept).
    pub fn restrict(&self, indices: &[usize]) -> SceneFrame {
        SceneFrame {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            intensity: indices.iter().map(|&i| self.intensity[i]).collect(),
            gt_class: indices.iter().map(|&i| self.gt_class[i]).collect(),
            instance: indices.iter().map(|&i| self.instance[i]).collect(),
            images: self.images.clone(),
            cameras: self.cameras.clone(),
            num_classes: self.num_classes,
            ground_plane: self.ground_plane,
            seed: self.seed,
        }
    }

    pub fn ground(&self) -> GroundPlane {
        GroundPlane { a: self.ground_plane[0], b: self.ground_plane[1], extent: f64::INFINITY }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &c in &self.gt_class {
            h[c] += 1;
        }
        h
    }

    pub fn to_container(&self) -> Result<Container> {
        let n = self.points.len();
        let mut c = Container::new();
        c.push_text("kind", "scene")?;
        c.push_i64("seed", &[1], vec![self.seed as i64])?;
        c.push_i64("num_classes", &[1], vec![self.num_classes as i64])?;
        c.push_f64("points", &[n, 3], self.points.iter().flatten().copied().collect())?;
        c.push_f64("intensity", &[n], self.intensity.clone())?;
        c.push_i64("gt_class", &[n], self.gt_class.iter().map(|&v| v as i64).collect())?;
        c.push_i64("instance", &[n], self.instance.clone())?;
        c.push_f64("ground_plane", &[2], self.ground_plane.to_vec())?;
        c.push_i64("num_cameras", &[1], vec![self.cameras.len() as i64])?;
        for (k, (cam, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            c.push_f64(&format!("camera{k}.intrinsics"), &[4], vec![cam.fx, cam.fy, cam.cx, cam.cy])?;
            // row-major rotation
            let r: Vec<f64> =
                (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| cam.rotation[(i, j)]).collect();
            c.push_f64(&format!("camera{k}.rotation"), &[3, 3], r)?;
            c.push_f64(&format!("camera{k}.translation"), &[3], cam.translation.iter().copied().collect())?;
            c.push_f64(&format!("camera{k}.image"), &[img.height, img.width, 3], img.data.clone())?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.text("kind")? != "scene" {
            return Err(Error::Format("container is not a scene".into()));
        }
        let seed = c.i64("seed")?.1[0] as u64;
        let num_classes = c.i64("num_classes")?.1[0] as usize;
        let (shape, pts) = c.f64("points")?;
        if shape.len() != 2 || shape[1] != 3 {
            return Err(Error::Format("points must be N x 3".into()));
        }
        let points: Vec<Point3> = pts.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        let n = points.len();
        let intensity = c.f64("intensity")?.1.to_vec();
        let gt_class: Vec<usize> = c.i64("gt_class")?.1.iter().map(|&v| v as usize).collect();
        let instance = c.i64("instance")?.1.to_vec();
        if intensity.len() != n || gt_class.len() != n || instance.len() != n {
            return Err(Error::Format("per-point sections disagree in length".into()));
        }
        if gt_class.iter().any(|&g| g >= num_classes) {
            return Err(Error::Format("gt_class out of range".into()));
        }
        let gp = c.f64("ground_plane")?.1;
        let num_cameras = c.i64("num_cameras")?.1[0] as usize;
        let mut cameras = Vec::with_capacity(num_cameras);
        let mut images = Vec::with_capacity(num_cameras);
        for k in 0..num_cameras {
            let k_ = c.f64(&format!("camera{k}.intrinsics"))?.1;
            let r = c.f64(&format!("camera{k}.rotation"))?.1;
            let t = c.f64(&format!("camera{k}.translation"))?.1;
            let (ishape, data) = c.f64(&format!("camera{k}.image"))?;
            if ishape.len() != 3 || ishape[2] != 3 {
                return Err(Error::Format("image must be H x W x 3".into()));
            }
            let rot = nalgebra::Matrix3::from_row_slice(r);
            let cam =
                CameraModel::new(k_[0], k_[1], k_[2], k_[3], rot, Vector3::new(t[0], t[1], t[2]), ishape[1], ishape[0])
                    .map_err(|e| Error::Format(format!("camera {k}: {e}")))?;
            cameras.push(cam);
            images.push(Image { width: ishape[1], height: ishape[0], data: data.to_vec() });
        }
        Ok(SceneFrame {
            points,
            intensity,
            gt_class,
            instance,
            images,
            cameras,
            num_classes,
            ground_plane: [gp[0], gp[1]],
            seed,
        })
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform3(rng: &mut ChaCha8Rng, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = if hi[k] > lo[k] { rng.random_range(lo[k]..hi[k]) } else { lo[k] };
    }
    out
}

fn make_object(
    cfg: &SceneConfig,
    class: usize,
    center: [f64; 2],
    yaw: f64,
    dims: [f64; 3],
    ground: &GroundPlane,
    rng: &mut ChaCha8Rng,
) -> Object {
    let spec = &cfg.classes[class];
    let size = match spec.shape {
        Shape::Box => [dims[0] / 2.0, dims[1] / 2.0, dims[2] / 2.0],
        Shape::Cylinder => [dims[0], dims[0], dims[2]],
        _ => dims,
    };
    let ground_z = ground.z_at(center[0], center[1]);
    let base_z = match spec.shape {
        Shape::Blob => ground_z + spec.clearance + size[2],
        _ => ground_z + spec.clearance,
    };
    let mut color = spec.albedo;
    for ch in &mut color {
        *ch = (*ch + rng.random_range(-cfg.color_jitter..=cfg.color_jitter)).clamp(0.0, 1.0);
    }
    Object { class, shape: spec.shape, center, yaw, size, base_z, color }
}

fn overlaps(objects: &[Object], candidate: &Object, skip: Option<usize>, gap: f64) -> bool {
    objects.iter().enumerate().any(|(i, o)| {
        if Some(i) == skip {
            return false;
        }
        let dx = o.center[0] - candidate.center[0];
        let dy = o.center[1] - candidate.center[1];
        (dx * dx + dy * dy).sqrt() < o.footprint() + candidate.footprint() + gap
    })
}

/// Lays out the ground and objects for `seed`.
///
/// Layouts where some object is (almost) fully occluded from the sensor are
/// redrawn, so every object can receive its full point budget.
pub fn build_geometry(cfg: &SceneConfig, seed: u64) -> Result<SceneGeometry> {
    cfg.validate()?;
    let origin = Vector3::new(0.0, 0.0, cfg.sensor_height);
    for attempt in 0..64u64 {
        let mut rng = rng_for(seed, 16 + attempt);
        let geometry = layout(cfg, seed, &mut rng)?;
        // enough visible surface, and enough of it facing the beam that the
        // incidence-weighted sampler fills the point budget
        let visible = geometry.objects.iter().enumerate().all(|(oi, obj)| {
            let mut probe = rng_for(seed, 1000 + oi as u64);
            let cos: Vec<f64> = (0..96)
                .filter_map(|_| geometry.incidence(&origin, &obj.sample_surface(&mut probe), HitTarget::Object(oi)))
                .collect();
            cos.len() >= 8 && cos.iter().sum::<f64>() / 96.0 >= 0.01
        });
        if visible {
            return Ok(geometry);
        }
    }
    Err(config_err(format!("no layout with every object visible for scene {seed}; reduce object counts")))
}

fn layout(cfg: &SceneConfig, seed: u64, rng: &mut ChaCha8Rng) -> Result<SceneGeometry> {
    let tilt = if cfg.max_tilt_deg > 0.0 { rng.random_range(0.0..cfg.max_tilt_deg).to_radians() } else { 0.0 };
    let dir: f64 = rng.random_range(0.0..TAU);
    let slope = tilt.tan();
    let ground = GroundPlane {
        a: if tilt > 0.0 { slope * dir.cos() } else { 0.0 },
        b: if tilt > 0.0 { slope * dir.sin() } else { 0.0 },
        extent: cfg.ground_extent.1 + 10.0,
    };
    let mut objects: Vec<Object> = Vec::new();
    // anchor object index -> already has an attachment
    let mut anchored = Vec::<bool>::new();
    for (ci, spec) in cfg.classes.iter().enumerate().skip(1) {
        for _ in 0..spec.count {
            let mut placed = false;
            for _attempt in 0..400 {
                let dims = uniform3(rng, spec.size_min, spec.size_max);
                let attach_roll: f64 = rng.random();
                let yaw = rng.random_range(0.0..TAU);
                let anchor = spec.attach.as_ref().filter(|a| attach_roll < a.probability).and_then(|a| {
                    let free: Vec<usize> = objects
                        .iter()
                        .enumerate()
                        .filter(|(i, o)| o.class == a.to && !anchored[*i])
                        .map(|(i, _)| i)
                        .collect();
                    if free.is_empty() {
                        None
                    } else {
                        Some((free[rng.random_range(0..free.len())], a.mode))
                    }
                });
                let candidate = match anchor {
                    Some((ai, AttachMode::Side)) => {
                        let a = &objects[ai];
                        let own = match spec.shape {
                            Shape::Box => dims[1] / 2.0,
                            Shape::Cylinder => dims[0],
                            _ => dims[0],
                        };
                        let (lx, reach) = match a.shape {
                            Shape::Box => (rng.random_range(-0.7..0.7) * a.size[0], a.size[1] + own + 0.05),
                            _ => (0.0, a.footprint() + own + 0.05),
                        };
                        let (s, c) = a.yaw.sin_cos();
                        let at = |ly: f64| [a.center[0] + c * lx - s * ly, a.center[1] + s * lx + c * ly];
                        // the side facing the sensor
                        let (p, q) = (at(reach), at(-reach));
                        let center = if p[0].hypot(p[1]) <= q[0].hypot(q[1]) { p } else { q };
                        let obj = make_object(cfg, ci, center, yaw, dims, &ground, rng);
                        if overlaps(&objects, &obj, Some(ai), cfg.min_gap) {
                            continue;
                        }
                        Some((obj, ai))
                    }
                    Some((ai, AttachMode::Top)) => {
                        let a = &objects[ai];
                        let mut obj = make_object(cfg, ci, a.center, yaw, dims, &ground, rng);
                        obj.base_z = match obj.shape {
                            Shape::Blob => a.top_z() + 0.6 * obj.size[2],
                            _ => a.top_z(),
                        };
                        if overlaps(&objects, &obj, Some(ai), cfg.min_gap) {
                            continue;
                        }
                        Some((obj, ai))
                    }
                    None => {
                        let r = rng.random_range(spec.range.0..=spec.range.1);
                        let az = rng.random_range(0.0..TAU);
                        let obj = make_object(cfg, ci, [r * az.cos(), r * az.sin()], yaw, dims, &ground, rng);
                        if overlaps(&objects, &obj, None, cfg.min_gap) {
                            continue;
                        }
                        Some((obj, usize::MAX))
                    }
                };
                if let Some((obj, ai)) = candidate {
                    if ai != usize::MAX {
                        anchored[ai] = true;
                    }
                    objects.push(obj);
                    anchored.push(false);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(config_err(format!(
                    "could not place a `{}` object without overlap; reduce object counts or gaps",
                    spec.name
                )));
            }
        }
    }
    Ok(SceneGeometry {
        ground: Some(ground),
        ground_color: cfg.classes[0].albedo,
        objects,
        background: cfg.background,
        texture_noise: cfg.texture_noise,
        seed,
    })
}

/// Generates the scene for `seed`. Identical `(cfg, seed)` always yield identical frames.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneFrame> {
    let geometry = build_geometry(cfg, seed)?;
    let ground = geometry.ground.expect("generated scenes always have ground");
    let origin = Vector3::new(0.0, 0.0, cfg.sensor_height);
    let mut rng = rng_for(seed, 2);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| config_err(e.to_string()))?;
    let inoise = Normal::new(0.0, cfg.intensity_noise.max(0.0)).map_err(|e| config_err(e.to_string()))?;

    let mut points = Vec::new();
    let mut gt = Vec::new();
    let mut instance = Vec::new();
    for (oi, obj) in geometry.objects.iter().enumerate() {
        let want = cfg.classes[obj.class].points_per_object;
        let mut got = 0;
        let mut attempts = 0usize;
        while got < want {
            attempts += 1;
            if attempts > want * 400 + 4000 {
                return Err(Error::InvalidInput(format!(
                    "object {oi} ({}) is hidden from the sensor in scene {seed}",
                    cfg.classes[obj.class].name
                )));
            }
            let p = obj.sample_surface(&mut rng);
            // accepting with |cos| turns area-uniform samples into beam-uniform ones,
            // so grazing surfaces get few returns, as with a real scanner
            let accept: f64 = rng.random();
            if geometry.incidence(&origin, &p, HitTarget::Object(oi)).is_some_and(|c| accept < c) {
                points.push(p);
                gt.push(obj.class);
                instance.push(oi as i64);
                got += 1;
            }
        }
    }
    let (rmin, rmax) = cfg.ground_extent;
    let rmin = rmin.max(0.5);
    let mut got = 0;
    let mut attempts = 0usize;
    while got < cfg.ground_points {
        attempts += 1;
        if attempts > cfg.ground_points * 400 + 4000 {
            return Err(Error::InvalidInput(format!("ground hidden from the sensor in scene {seed}")));
        }
        // log-uniform range mimics the falloff of a spinning LiDAR
        let r = rmin * (rmax / rmin).powf(rng.random::<f64>());
        let az: f64 = rng.random_range(0.0..TAU);
        let (x, y) = (r * az.cos(), r * az.sin());
        let p = [x, y, ground.z_at(x, y)];
        if geometry.visible_from(&origin, &p, HitTarget::Ground) {
            points.push(p);
            gt.push(0);
            instance.push(-1);
            got += 1;
        }
    }
    // range noise along the beam
    if cfg.noise_sigma > 0.0 {
        for p in &mut points {
            let v = Vector3::from(*p) - origin;
            let r = v.norm();
            let q = origin + v * ((r + noise.sample(&mut rng)) / r);
            *p = [q.x, q.y, q.z];
        }
    }
    let intensity: Vec<f64> = gt
        .iter()
        .map(|&c| {
            let jitter = if cfg.intensity_noise > 0.0 { inoise.sample(&mut rng) } else { 0.0 };
            (cfg.classes[c].intensity + jitter).clamp(0.0, 1.0)
        })
        .collect();

    // shuffle so that point order carries no class information
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut rng);

    let cameras = cfg.cameras()?;
    let images = cameras.iter().enumerate().map(|(k, cam)| render_image(&geometry, cam, k)).collect();
    Ok(SceneFrame {
        points: order.iter().map(|&i| points[i]).collect(),
        intensity: order.iter().map(|&i| intensity[i]).collect(),
        gt_class: order.iter().map(|&i| gt[i]).collect(),
        instance: order.iter().map(|&i| instance[i]).collect(),
        images,
        cameras,
        num_classes: cfg.num_classes(),
        ground_plane: [ground.a, ground.b],
        seed,
    })
}

/// Whether `color` lies inside the colour band of `class`.
pub fn in_class_band(cfg: &SceneConfig, class: usize, color: [f64; 3]) -> bool {
    let a = cfg.classes[class].albedo;
    (0..3).all(|k| (color[k] - a[k]).abs() <= cfg.color_band)
}
