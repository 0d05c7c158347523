//! Synthetic driving-like scenes: a primitive-soup world, a pinhole renderer
//! and a LiDAR fan sharing the camera origin.
//!
//! Source and target domains render the same kind of world with different
//! palettes, so the 2D appearance shifts while the geometry statistics stay put.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{project_point, CameraIntrinsics, PixelIndex};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    GroundStrip,
    Box,
    Cylinder,
}

/// Axis-aligned primitive. Cylinders are vertical (axis along camera y) with
/// diameter `extent[0]` and height `extent[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePrimitive {
    pub kind: PrimitiveKind,
    pub class_id: usize,
    pub center: [f64; 3],
    pub extent: [f64; 3],
    pub albedo: [f64; 3],
}

impl ScenePrimitive {
    /// Nearest positive ray parameter of the intersection with a ray from the origin.
    pub fn intersect(&self, dir: [f64; 3]) -> Option<f64> {
        match self.kind {
            PrimitiveKind::GroundStrip | PrimitiveKind::Box => intersect_aabb(self.min(), self.max(), dir),
            PrimitiveKind::Cylinder => self.intersect_cylinder(dir),
        }
    }

    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] - 0.5 * self.extent[k])
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] + 0.5 * self.extent[k])
    }

    /// Whether a point lies inside (or on) the primitive's solid.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = (self.min(), self.max());
        match self.kind {
            PrimitiveKind::GroundStrip | PrimitiveKind::Box => (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k]),
            PrimitiveKind::Cylinder => {
                let r = 0.5 * self.extent[0];
                let (dx, dz) = (p[0] - self.center[0], p[2] - self.center[2]);
                p[1] >= lo[1] && p[1] <= hi[1] && dx * dx + dz * dz <= r * r
            }
        }
    }

    fn intersect_cylinder(&self, d: [f64; 3]) -> Option<f64> {
        let r = 0.5 * self.extent[0];
        let (lo, hi) = (self.min()[1], self.max()[1]);
        let (cx, cz) = (self.center[0], self.center[2]);
        let mut best: Option<f64> = None;
        let mut consider = |t: f64| {
            if t > 1e-9 && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        };
        // Lateral surface: |(t*dx - cx, t*dz - cz)| = r.
        let a = d[0] * d[0] + d[2] * d[2];
        if a > 0.0 {
            let b = -2.0 * (d[0] * cx + d[2] * cz);
            let c = cx * cx + cz * cz - r * r;
            let disc = b * b - 4.0 * a * c;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                    let y = t * d[1];
                    if y >= lo && y <= hi {
                        consider(t);
                    }
                }
            }
        }
        // Caps.
        if d[1] != 0.0 {
            for y in [lo, hi] {
                let t = y / d[1];
                let (px, pz) = (t * d[0] - cx, t * d[2] - cz);
                if px * px + pz * pz <= r * r {
                    consider(t);
                }
            }
        }
        best
    }
}

fn intersect_aabb(lo: [f64; 3], hi: [f64; 3], d: [f64; 3]) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for k in 0..3 {
        if d[k] == 0.0 {
            if 0.0 < lo[k] || 0.0 > hi[k] {
                return None;
            }
            continue;
        }
        let (a, b) = (lo[k] / d[k], hi[k] / d[k]);
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        t_near = t_near.max(a);
        t_far = t_far.min(b);
    }
    if t_near > t_far || t_far <= 1e-9 {
        return None;
    }
    // The camera never sits inside a primitive; an entry behind the origin is a miss.
    (t_near > 1e-9).then_some(t_near)
}

/// First primitive hit by a ray from the camera origin: `(index, t)`.
pub fn cast_ray(world: &[ScenePrimitive], dir: [f64; 3]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, prim) in world.iter().enumerate() {
        if let Some(t) = prim.intersect(dir) {
            if best.is_none_or(|(_, bt)| t < bt) {
                best = Some((i, t));
            }
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// Appearance transform of a domain: hue rotation about the gray axis, then a
/// brightness shift, then bounded uniform noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainStyle {
    pub hue_degrees: f64,
    pub brightness: f64,
    pub noise: f64,
}

impl DomainStyle {
    pub fn transform(&self, rgb: [f64; 3]) -> [f64; 3] {
        let theta = self.hue_degrees.to_radians();
        let (c, s) = (theta.cos(), theta.sin());
        let third = (1.0 - c) / 3.0;
        let root = (1.0f64 / 3.0).sqrt() * s;
        let m = [
            [c + third, third - root, third + root],
            [third + root, c + third, third - root],
            [third - root, third + root, c + third],
        ];
        std::array::from_fn(|i| {
            let v = m[i][0] * rgb[0] + m[i][1] * rgb[1] + m[i][2] * rgb[2] + self.brightness;
            v.clamp(0.0, 1.0)
        })
    }
}

/// Everything needed to generate a benchmark deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGenConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    pub n_rays: usize,
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub seed: u64,
    pub camera_height: f64,
    /// Number of primitives per object class (cars, buildings, poles, ...).
    pub objects_per_class: usize,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            num_classes: 6,
            height: 64,
            width: 64,
            focal: 40.0,
            n_rays: 4096,
            source_train: 200,
            source_val: 50,
            target_train: 200,
            target_val: 50,
            seed: 7,
            camera_height: 1.7,
            objects_per_class: 4,
            source_style: DomainStyle {
                hue_degrees: 0.0,
                brightness: 0.0,
                noise: 0.06,
            },
            target_style: DomainStyle {
                hue_degrees: 25.0,
                brightness: -0.05,
                noise: 0.06,
            },
        }
    }
}

impl SceneGenConfig {
    pub fn camera(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.height,
            self.width,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes must be in [2, 255], got {}", self.num_classes)));
        }
        if self.objects_per_class == 0 {
            return Err(Error::Config("objects_per_class must be at least 1".into()));
        }
        if self.n_rays == 0 {
            return Err(Error::Config("n_rays must be positive".into()));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::Config("image dimensions must fit in 16 bits".into()));
        }
        if !(self.camera_height > 0.0) {
            return Err(Error::Config("camera_height must be positive".into()));
        }
        for style in [&self.source_style, &self.target_style] {
            if !(style.noise >= 0.0) || !style.hue_degrees.is_finite() || !style.brightness.is_finite() {
                return Err(Error::Config("domain style values must be finite, noise non-negative".into()));
            }
        }
        self.camera().map(|_| ())
    }
}

/// What a class looks like and where it lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Road,
    Sidewalk,
    Terrain,
    Car,
    Building,
    Person,
    Truck,
    Tree,
    /// Poles and the background. Always the last class.
    Other,
}

const ROLE_CYCLE: [Role; 8] = [
    Role::Road,
    Role::Sidewalk,
    Role::Terrain,
    Role::Car,
    Role::Building,
    Role::Person,
    Role::Truck,
    Role::Tree,
];

fn role_of(class_id: usize, num_classes: usize) -> Role {
    if class_id + 1 == num_classes {
        Role::Other
    } else if class_id < ROLE_CYCLE.len() {
        ROLE_CYCLE[class_id]
    } else {
        // Ground roles appear once; later classes reuse the object roles with a tint.
        let objects = &ROLE_CYCLE[3..];
        objects[(class_id - ROLE_CYCLE.len()) % objects.len()]
    }
}

/// Class assigned to pixels whose ray escapes the world.
pub fn background_class(num_classes: usize) -> usize {
    num_classes - 1
}

const SKY: [f64; 3] = [0.55, 0.75, 0.95];

fn base_albedo(role: Role, class_id: usize, variant: usize) -> [f64; 3] {
    // Classes beyond the first cycle get a shifted tint so they stay distinguishable.
    let tint = (class_id / ROLE_CYCLE.len()) as f64 * 0.12;
    let base = match role {
        Role::Road => [0.30, 0.30, 0.32],
        Role::Sidewalk => [0.62, 0.58, 0.55],
        Role::Terrain => [0.35, 0.55, 0.25],
        Role::Car => [[0.75, 0.15, 0.12], [0.15, 0.25, 0.70], [0.80, 0.80, 0.78]][variant % 3],
        Role::Building => [0.65, 0.45, 0.30],
        Role::Person => [0.85, 0.35, 0.60],
        Role::Truck => [0.20, 0.55, 0.60],
        Role::Tree => [0.15, 0.38, 0.12],
        Role::Other => [0.90, 0.80, 0.15],
    };
    std::array::from_fn(|k| (base[k] + if k == 2 { tint } else { -tint * 0.5 }).clamp(0.0, 1.0))
}

fn jitter<R: Rng>(rng: &mut R, albedo: [f64; 3], amount: f64) -> [f64; 3] {
    std::array::from_fn(|k| (albedo[k] + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

const GROUND_THICKNESS: f64 = 0.05;
/// Sidewalks sit this far above the road surface.
const CURB_HEIGHT: f64 = 0.15;
const NEAR: f64 = 0.5;
const FAR: f64 = 60.0;
const LATERAL_LIMIT: f64 = 60.0;

/// Builds a random world in which every class owns at least one primitive.
pub fn generate_world(seed: u64, config: &SceneGenConfig) -> Result<Vec<ScenePrimitive>> {
    config.validate()?;
    let mut rng = seed::stream(seed, &[0x5747]);
    let c = config.num_classes;
    let roles: Vec<Role> = (0..c).map(|k| role_of(k, c)).collect();
    let ground_y = config.camera_height;
    let mut world = Vec::new();

    let ground_classes: Vec<usize> = [Role::Road, Role::Sidewalk, Role::Terrain]
        .iter()
        .filter_map(|r| roles.iter().position(|x| x == r))
        .collect();
    let road_half = rng.random_range(3.0..4.5);
    let walk_width = rng.random_range(1.5..3.0);
    // Band edges |x| for road, sidewalk, terrain; missing bands collapse outward.
    let edges = [road_half, road_half + walk_width, LATERAL_LIMIT];
    let ground_strip = |class_id: usize, x0: f64, x1: f64, rng: &mut rand_chacha::ChaCha8Rng, world: &mut Vec<ScenePrimitive>| {
        let albedo = jitter(rng, base_albedo(roles[class_id], class_id, 0), 0.04);
        let raise = if roles[class_id] == Role::Sidewalk { CURB_HEIGHT } else { 0.0 };
        world.push(ScenePrimitive {
            kind: PrimitiveKind::GroundStrip,
            class_id,
            center: [0.5 * (x0 + x1), ground_y + 0.5 * (GROUND_THICKNESS - raise), 0.5 * (NEAR + FAR)],
            extent: [x1 - x0, GROUND_THICKNESS + raise, FAR - NEAR],
            albedo,
        });
    };
    let mut inner = 0.0;
    let n_ground = ground_classes.len();
    let mut sidewalk_band = (road_half, road_half + walk_width);
    let mut terrain_band = (road_half + walk_width, LATERAL_LIMIT);
    for (k, &class_id) in ground_classes.iter().enumerate() {
        let outer = if k + 1 == n_ground { LATERAL_LIMIT } else { edges[k] };
        if k == 0 {
            ground_strip(class_id, -outer, outer, &mut rng, &mut world);
        } else {
            ground_strip(class_id, -outer, -inner, &mut rng, &mut world);
            ground_strip(class_id, inner, outer, &mut rng, &mut world);
        }
        match roles[class_id] {
            Role::Sidewalk => sidewalk_band = (inner, outer.min(inner + walk_width)),
            Role::Terrain => terrain_band = (inner, outer),
            _ => {}
        }
        inner = outer;
    }
    let road_edge = if n_ground > 1 { road_half } else { 3.5 };
    let curb = if n_ground > 1 { edges[1.min(n_ground - 1)] } else { road_half + walk_width };

    let side = |rng: &mut rand_chacha::ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    for class_id in 0..c {
        let role = roles[class_id];
        let count = match role {
            Role::Road | Role::Sidewalk | Role::Terrain => continue,
            Role::Building => config.objects_per_class + 2,
            _ => config.objects_per_class,
        };
        for _ in 0..count {
            let variant = rng.random_range(0..3);
            let albedo = jitter(&mut rng, base_albedo(role, class_id, variant), 0.06);
            let s = side(&mut rng);
            let (kind, center, extent) = match role {
                Role::Car | Role::Truck => {
                    let (w, h, l) = if role == Role::Car {
                        (rng.random_range(1.6..2.0), rng.random_range(1.3..1.7), rng.random_range(3.8..4.8))
                    } else {
                        (rng.random_range(2.3..2.7), rng.random_range(2.8..3.5), rng.random_range(6.0..9.0))
                    };
                    let lane = (road_edge - w / 2.0 - 0.3).max(0.0);
                    let x = rng.random_range(-lane..=lane);
                    let z = rng.random_range(5.0..40.0);
                    (PrimitiveKind::Box, [x, ground_y - h / 2.0, z], [w, h, l])
                }
                Role::Building => {
                    let depth = rng.random_range(4.0..8.0);
                    let h = rng.random_range(5.0..14.0);
                    let l = rng.random_range(6.0..16.0);
                    let setback = rng.random_range(2.0..5.0);
                    let x = s * (curb + setback + depth / 2.0);
                    let z = rng.random_range(6.0..50.0);
                    (PrimitiveKind::Box, [x, ground_y - h / 2.0, z], [depth, h, l])
                }
                Role::Person | Role::Other => {
                    let (r, h) = if role == Role::Person {
                        (rng.random_range(0.25..0.35), rng.random_range(1.5..1.9))
                    } else {
                        (rng.random_range(0.12..0.25), rng.random_range(3.0..5.5))
                    };
                    let (a, b) = sidewalk_band;
                    let x = s * rng.random_range(a + r..(b - r).max(a + r + 1e-3));
                    let z = rng.random_range(4.0..35.0);
                    (PrimitiveKind::Cylinder, [x, ground_y - h / 2.0, z], [2.0 * r, h, 2.0 * r])
                }
                Role::Tree => {
                    let r = rng.random_range(0.5..1.2);
                    let h = rng.random_range(3.0..6.0);
                    let (a, b) = terrain_band;
                    let x = s * rng.random_range(a + r + 0.5..(a + 8.0).min(b));
                    let z = rng.random_range(5.0..40.0);
                    (PrimitiveKind::Cylinder, [x, ground_y - h / 2.0, z], [2.0 * r, h, 2.0 * r])
                }
                Role::Road | Role::Sidewalk | Role::Terrain => unreachable!(),
            };
            world.push(ScenePrimitive {
                kind,
                class_id,
                center,
                extent,
                albedo,
            });
        }
    }
    for p in &world {
        if p.extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Config(format!("primitive with non-positive extent {:?}", p.extent)));
        }
    }
    Ok(world)
}

/// Renders an image and its label map by casting one ray per pixel center.
pub fn render_image(
    world: &[ScenePrimitive],
    camera: &CameraIntrinsics,
    style: &DomainStyle,
    num_classes: usize,
    seed: u64,
) -> (Array3<f32>, Array2<u8>) {
    let (h, w) = (camera.height, camera.width);
    let mut rng = seed::stream(seed, &[0x1236]);
    let mut image = Array3::zeros((h, w, 3));
    let mut labels = Array2::zeros((h, w));
    let background = background_class(num_classes);
    for row in 0..h {
        for col in 0..w {
            let (albedo, class_id) = match cast_ray(world, camera.pixel_ray(row, col)) {
                Some((i, _)) => (world[i].albedo, world[i].class_id),
                None => (SKY, background),
            };
            let color = style.transform(albedo);
            for k in 0..3 {
                let noise = if style.noise > 0.0 {
                    rng.random_range(-style.noise..=style.noise)
                } else {
                    0.0
                };
                image[[row, col, k]] = (color[k] + noise).clamp(0.0, 1.0) as f32;
            }
            labels[[row, col]] = class_id as u8;
        }
    }
    (image, labels)
}

/// One LiDAR sweep in the camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarSweep {
    pub points: Vec<[f32; 3]>,
    pub labels: Vec<u8>,
    pub pixel_of_point: Vec<PixelIndex>,
}

/// Fan directions of the sweep, each snapped to the pixel it falls in.
///
/// The fan is a regular azimuth/elevation grid over the camera frustum with a
/// seeded sub-step offset. Snapping each beam onto its pixel-center ray makes
/// every return share the primitive seen by that pixel.
pub fn lidar_beams(camera: &CameraIntrinsics, n_rays: usize, seed: u64) -> Vec<PixelIndex> {
    let mut rng = seed::stream(seed, &[0x11da]);
    let half_w = (camera.width as f64 - 0.5 - camera.cx).max(camera.cx + 0.5);
    let half_h = (camera.height as f64 - 0.5 - camera.cy).max(camera.cy + 0.5);
    let h_fov = 2.0 * (half_w / camera.focal).atan();
    let v_fov = 2.0 * (half_h / camera.focal).atan();
    let n_az = ((n_rays as f64 * h_fov / v_fov).sqrt().round() as usize).clamp(1, n_rays);
    let n_el = (n_rays / n_az).max(1);
    let (off_az, off_el): (f64, f64) = (rng.random(), rng.random());
    let mut beams = Vec::with_capacity(n_az * n_el);
    for e in 0..n_el {
        let el = v_fov / 2.0 - (e as f64 + off_el) * v_fov / n_el as f64;
        for a in 0..n_az {
            let az = -h_fov / 2.0 + (a as f64 + off_az) * h_fov / n_az as f64;
            let dir = [el.cos() * az.sin(), -el.sin(), el.cos() * az.cos()];
            if let Some(pixel) = project_point(dir, camera) {
                beams.push(pixel);
            }
        }
    }
    beams
}

/// Casts the LiDAR fan and keeps first returns inside the camera frustum.
pub fn sample_lidar(
    world: &[ScenePrimitive],
    camera: &CameraIntrinsics,
    n_rays: usize,
    seed: u64,
    scene_name: &str,
) -> Result<LidarSweep> {
    if n_rays == 0 {
        return Err(Error::Config("n_rays must be positive".into()));
    }
    let mut sweep = LidarSweep {
        points: Vec::new(),
        labels: Vec::new(),
        pixel_of_point: Vec::new(),
    };
    for beam in lidar_beams(camera, n_rays, seed) {
        let dir = camera.pixel_ray(beam.row, beam.col);
        let Some((i, t)) = cast_ray(world, dir) else { continue };
        let point = [(t * dir[0]) as f32, (t * dir[1]) as f32, (t * dir[2]) as f32];
        let stored = point.map(f64::from);
        let Some(pixel) = project_point(stored, camera) else { continue };
        if pixel != beam {
            return Err(Error::Generation {
                scene: scene_name.to_string(),
                reason: format!("return at {point:?} re-projects to {pixel:?}, beam was {beam:?}"),
            });
        }
        sweep.points.push(point);
        sweep.labels.push(world[i].class_id as u8);
        sweep.pixel_of_point.push(pixel);
    }
    if sweep.points.is_empty() {
        return Err(Error::Generation {
            scene: scene_name.to_string(),
            reason: "no LiDAR beam hit the world".into(),
        });
    }
    Ok(sweep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_plane_at_points;

    fn small_config() -> SceneGenConfig {
        SceneGenConfig {
            height: 32,
            width: 32,
            focal: 20.0,
            n_rays: 1000,
            ..SceneGenConfig::default()
        }
    }

    fn wall(z: f64, class_id: usize) -> ScenePrimitive {
        ScenePrimitive {
            kind: PrimitiveKind::Box,
            class_id,
            center: [0.0, 0.0, z + 0.05],
            extent: [1000.0, 1000.0, 0.1],
            albedo: [0.5, 0.5, 0.5],
        }
    }

    #[test]
    fn world_is_deterministic_and_seed_sensitive() {
        let cfg = small_config();
        let a = generate_world(7, &cfg).unwrap();
        assert_eq!(a, generate_world(7, &cfg).unwrap());
        assert_eq!(format!("{a:?}"), format!("{:?}", generate_world(7, &cfg).unwrap()));
        assert_ne!(format!("{a:?}"), format!("{:?}", generate_world(8, &cfg).unwrap()));
    }

    #[test]
    fn every_class_present() {
        for c in 2..=11 {
            let cfg = SceneGenConfig {
                num_classes: c,
                ..small_config()
            };
            for seed in 0..5 {
                let world = generate_world(seed, &cfg).unwrap();
                for class in 0..c {
                    assert!(world.iter().any(|p| p.class_id == class), "C={c} seed={seed} class {class} missing");
                }
                assert!(world.iter().all(|p| p.extent.iter().all(|&e| e > 0.0)));
            }
        }
    }

    #[test]
    fn ground_strips_do_not_overlap() {
        let world = generate_world(3, &small_config()).unwrap();
        let strips: Vec<_> = world.iter().filter(|p| p.kind == PrimitiveKind::GroundStrip).collect();
        for (i, a) in strips.iter().enumerate() {
            for b in &strips[i + 1..] {
                let overlap = a.min()[0].max(b.min()[0]) < a.max()[0].min(b.max()[0]);
                assert!(!overlap, "{a:?} overlaps {b:?}");
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SceneGenConfig {
            num_classes: 0,
            ..small_config()
        };
        assert!(matches!(generate_world(1, &cfg), Err(Error::Config(_))));
        let cfg = SceneGenConfig {
            objects_per_class: 0,
            ..small_config()
        };
        assert!(generate_world(1, &cfg).is_err());
    }

    #[test]
    fn plane_filling_frame_gives_single_label() {
        let cam = small_config().camera().unwrap();
        let style = SceneGenConfig::default().target_style;
        let (_, labels) = render_image(&[wall(5.0, 2)], &cam, &style, 6, 1);
        assert!(labels.iter().all(|&l| l == 2));
    }

    #[test]
    fn domains_share_labels_but_not_colors() {
        let cfg = small_config();
        let cam = cfg.camera().unwrap();
        let world = generate_world(4, &cfg).unwrap();
        let (img_s, lab_s) = render_image(&world, &cam, &cfg.source_style, 6, 9);
        let (img_t, lab_t) = render_image(&world, &cam, &cfg.target_style, 6, 9);
        assert_eq!(lab_s, lab_t);
        assert_ne!(img_s, img_t);
    }

    #[test]
    fn noiseless_box_pixels_equal_transformed_albedo() {
        let cam = small_config().camera().unwrap();
        let ground = ScenePrimitive {
            kind: PrimitiveKind::GroundStrip,
            class_id: 0,
            center: [0.0, 1.7 + 0.025, 30.0],
            extent: [100.0, 0.05, 59.0],
            albedo: [0.5, 0.5, 0.5],
        };
        let red = ScenePrimitive {
            kind: PrimitiveKind::Box,
            class_id: 3,
            center: [0.0, 0.5, 8.0],
            extent: [2.0, 2.0, 2.0],
            albedo: [0.8, 0.1, 0.1],
        };
        let style = DomainStyle {
            hue_degrees: 120.0,
            brightness: 0.05,
            noise: 0.0,
        };
        // A 120 degree rotation about the gray axis permutes channels: (r, g, b) -> (b, r, g).
        let expected = [0.1 + 0.05, 0.8 + 0.05, 0.1 + 0.05];
        let (img, labels) = render_image(&[ground, red], &cam, &style, 6, 0);
        let mut box_pixels = 0;
        for ((r, c), &l) in labels.indexed_iter() {
            if l == 3 {
                box_pixels += 1;
                for k in 0..3 {
                    assert!((img[[r, c, k]] as f64 - expected[k]).abs() < 1e-6);
                }
            }
        }
        assert!(box_pixels > 0);
    }

    #[test]
    fn frontal_plane_points_have_constant_depth() {
        let cam = small_config().camera().unwrap();
        let sweep = sample_lidar(&[wall(5.0, 1)], &cam, 500, 3, "wall").unwrap();
        assert!(!sweep.points.is_empty());
        assert!(sweep.points.iter().all(|p| p[2] == 5.0));
        assert!(sweep.labels.iter().all(|&l| l == 1));
    }

    /// Marches along the ray and tests solid membership, independent of the
    /// analytic intersection code.
    fn march_hits(world: &[ScenePrimitive], dir: [f64; 3]) -> bool {
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        let step = 0.01 / norm;
        let mut t = step;
        while t * dir[2] < 80.0 {
            let p = [t * dir[0], t * dir[1], t * dir[2]];
            if world.iter().any(|prim| prim.contains(p)) {
                return true;
            }
            t += step;
        }
        false
    }

    #[test]
    fn partial_world_point_count_matches_march_oracle() {
        let cam = small_config().camera().unwrap();
        // A box covering only the right half of the view; the rest is sky.
        let world = vec![ScenePrimitive {
            kind: PrimitiveKind::Box,
            class_id: 0,
            center: [6.0, 0.0, 10.0],
            extent: [10.0, 30.0, 1.0],
            albedo: [0.5; 3],
        }];
        let sweep = sample_lidar(&world, &cam, 1000, 5, "half").unwrap();
        let beams = lidar_beams(&cam, 1000, 5);
        let hits = beams
            .iter()
            .filter(|b| march_hits(&world, cam.pixel_ray(b.row, b.col)))
            .count();
        assert!(sweep.points.len() < 1000);
        assert_eq!(sweep.points.len(), hits);
    }

    #[test]
    fn empty_world_is_a_generation_error() {
        let cam = small_config().camera().unwrap();
        let err = sample_lidar(&[], &cam, 100, 0, "scene-17").unwrap_err();
        assert!(err.to_string().contains("scene-17"));
    }

    #[test]
    fn lidar_labels_agree_with_pixel_labels() {
        let cfg = small_config();
        let cam = cfg.camera().unwrap();
        for seed in 0..4 {
            let world = generate_world(seed, &cfg).unwrap();
            let (_, labels) = render_image(&world, &cam, &cfg.target_style, cfg.num_classes, seed);
            let sweep = sample_lidar(&world, &cam, cfg.n_rays, seed, "t").unwrap();
            assert!(sweep.points.len() <= cfg.n_rays);
            let sampled = sample_plane_at_points(labels.view(), &sweep.pixel_of_point).unwrap();
            assert_eq!(sampled, sweep.labels);
            for (p, px) in sweep.points.iter().zip(&sweep.pixel_of_point) {
                assert!(p[2] > 0.0);
                assert_eq!(project_point(p.map(f64::from), &cam), Some(*px));
            }
        }
    }
}
