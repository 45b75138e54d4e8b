//! Synthetic cluttered scenes built from analytic primitives: placement by
//! vertical drop to first contact, surface sampling with exact normals,
//! quarter-sphere camera trajectories, ray-cast depth and sensor noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fibonacci_sphere, DepthImage, Intrinsics, Mat3, Scene, Vec3};

/// Largest trajectory [`sample_viewpoints`] will generate.
pub const MAX_VIEWPOINTS: usize = 1 << 16;

/// Start height for the vertical probe rays used while dropping objects.
const PROBE_HEIGHT: f64 = 10.0;

/// Signed distance below which two sampled surfaces count as interpenetrating.
pub const CONTACT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Shape {
    /// Half extents along the local axes.
    Box { half: [f64; 3] },
    /// Axis along local z.
    Cylinder { radius: f64, half_height: f64 },
    Sphere { radius: f64 },
    /// Rectangle in the local xy plane, normal +z.
    Plane { half_x: f64, half_y: f64 },
}

impl Shape {
    pub fn name(&self) -> &'static str {
        match self {
            Shape::Box { .. } => "box",
            Shape::Cylinder { .. } => "cylinder",
            Shape::Sphere { .. } => "sphere",
            Shape::Plane { .. } => "plane",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims: Vec<f64> = match *self {
            Shape::Box { half } => half.to_vec(),
            Shape::Cylinder { radius, half_height } => vec![radius, half_height],
            Shape::Sphere { radius } => vec![radius],
            Shape::Plane { half_x, half_y } => vec![half_x, half_y],
        };
        if dims.iter().any(|d| !(*d > 0.0) || d.is_nan()) {
            return Err(Error::InvalidArgument(format!("{} dimensions must be positive", self.name())));
        }
        Ok(())
    }

    /// Radius of the bounding sphere about the local origin.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Box { half } => Vec3::from(half).norm(),
            Shape::Cylinder { radius, half_height } => radius.hypot(half_height),
            Shape::Sphere { radius } => radius,
            Shape::Plane { half_x, half_y } => half_x.hypot(half_y),
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Shape::Box { half: [a, b, c] } => 8.0 * (a * b + b * c + a * c),
            Shape::Cylinder { radius, half_height } => {
                2.0 * std::f64::consts::PI * radius * (2.0 * half_height + radius)
            }
            Shape::Sphere { radius } => 4.0 * std::f64::consts::PI * radius * radius,
            Shape::Plane { half_x, half_y } => 4.0 * half_x * half_y,
        }
    }

    /// Signed distance from a local-frame point (negative inside).
    pub fn sdf_local(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Box { half } => {
                let q = p.abs() - Vec3::from(half);
                q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
            }
            Shape::Cylinder { radius, half_height } => {
                let dx = p.xy().norm() - radius;
                let dz = p.z.abs() - half_height;
                dx.max(dz).min(0.0) + dx.max(0.0).hypot(dz.max(0.0))
            }
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Plane { half_x, half_y } => {
                let dx = (p.x.abs() - half_x).max(0.0);
                let dy = (p.y.abs() - half_y).max(0.0);
                Vec3::new(dx, dy, p.z).norm()
            }
        }
    }

    /// Entry and exit ray parameters in the local frame.
    pub fn intersect_local(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        match *self {
            Shape::Sphere { radius } => {
                let a = d.dot(d);
                let b = o.dot(d);
                let c = o.dot(o) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                // stable quadratic roots
                let q = if b > 0.0 { -(b + s) } else { -b + s };
                if q == 0.0 {
                    return Some((0.0, 0.0));
                }
                let (t0, t1) = (q / a, c / q);
                Some((t0.min(t1), t0.max(t1)))
            }
            Shape::Box { half } => slab(o, d, &Vec3::from(half)),
            Shape::Cylinder { radius, half_height } => {
                let (mut lo, mut hi) = axis_interval(o.z, d.z, half_height)?;
                let a = d.x * d.x + d.y * d.y;
                let c = o.x * o.x + o.y * o.y - radius * radius;
                if a == 0.0 {
                    if c > 0.0 {
                        return None;
                    }
                } else {
                    let b = o.x * d.x + o.y * d.y;
                    let disc = b * b - a * c;
                    if disc < 0.0 {
                        return None;
                    }
                    let s = disc.sqrt();
                    let q = if b > 0.0 { -(b + s) } else { -b + s };
                    let (t0, t1) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
                    lo = lo.max(t0.min(t1));
                    hi = hi.min(t0.max(t1));
                }
                (lo <= hi).then_some((lo, hi))
            }
            Shape::Plane { half_x, half_y } => {
                if d.z == 0.0 {
                    return None;
                }
                let t = -o.z / d.z;
                let p = o + d * t;
                (p.x.abs() <= half_x && p.y.abs() <= half_y).then_some((t, t))
            }
        }
    }

    /// Random point on the surface with its outward normal (local frame).
    fn sample_surface(&self, rng: &mut impl Rng) -> (Vec3, Vec3) {
        match *self {
            Shape::Sphere { radius } => {
                let n = unit_vector(rng);
                (n * radius, n)
            }
            Shape::Box { half } => {
                let [a, b, c] = half;
                let areas = [b * c, a * c, a * b];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 2;
                for (k, area) in areas.iter().enumerate() {
                    if pick < *area {
                        axis = k;
                        break;
                    }
                    pick -= area;
                }
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p = Vec3::new(
                    rng.random_range(-a..=a),
                    rng.random_range(-b..=b),
                    rng.random_range(-c..=c),
                );
                p[axis] = sign * half[axis];
                let mut n = Vec3::zeros();
                n[axis] = sign;
                (p, n)
            }
            Shape::Cylinder { radius, half_height } => {
                let side = 2.0 * half_height;
                let cap = radius / 2.0;
                if rng.random::<f64>() * (side + 2.0 * cap) < side {
                    let phi = rng.random_range(0.0..std::f64::consts::TAU);
                    let n = Vec3::new(phi.cos(), phi.sin(), 0.0);
                    let z = rng.random_range(-half_height..=half_height);
                    (Vec3::new(n.x * radius, n.y * radius, z), n)
                } else {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let r = radius * rng.random::<f64>().sqrt();
                    let phi = rng.random_range(0.0..std::f64::consts::TAU);
                    (Vec3::new(r * phi.cos(), r * phi.sin(), sign * half_height), Vec3::new(0.0, 0.0, sign))
                }
            }
            Shape::Plane { half_x, half_y } => (
                Vec3::new(rng.random_range(-half_x..=half_x), rng.random_range(-half_y..=half_y), 0.0),
                Vec3::z(),
            ),
        }
    }
}

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn axis_interval(o: f64, d: f64, half: f64) -> Option<(f64, f64)> {
    if d == 0.0 {
        return (o.abs() <= half).then_some((f64::NEG_INFINITY, f64::INFINITY));
    }
    let t0 = (-half - o) / d;
    let t1 = (half - o) / d;
    Some((t0.min(t1), t0.max(t1)))
}

fn slab(o: &Vec3, d: &Vec3, half: &Vec3) -> Option<(f64, f64)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for k in 0..3 {
        let (a, b) = axis_interval(o[k], d[k], half[k])?;
        lo = lo.max(a);
        hi = hi.min(b);
    }
    (lo <= hi).then_some((lo, hi))
}

/// A posed primitive; `object_id` 0 marks the table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Local-to-world rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub object_id: u32,
}

impl Primitive {
    pub fn new(shape: Shape, rotation: Mat3, translation: Vec3, object_id: u32) -> Self {
        Primitive {
            shape,
            rotation: std::array::from_fn(|k| rotation[(k / 3, k % 3)]),
            translation: translation.into(),
            object_id,
        }
    }

    pub fn rotation(&self) -> Mat3 {
        Mat3::from_row_slice(&self.rotation)
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::from(self.translation)
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.shape.sdf_local(&self.rotation().tr_mul(&(p - self.translation())))
    }

    /// Entry/exit parameters of the world ray `o + t d`.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        let r = self.rotation();
        self.shape
            .intersect_local(&r.tr_mul(&(o - self.translation())), &r.tr_mul(d))
    }

    /// Lowest world z of the primitive.
    pub fn min_z(&self) -> f64 {
        let r = self.rotation();
        let row = r.row(2);
        let c = self.translation[2];
        match self.shape {
            Shape::Box { half } => c - (0..3).map(|j| row[j].abs() * half[j]).sum::<f64>(),
            Shape::Cylinder { radius, half_height } => {
                let az = row[2].abs();
                c - az * half_height - radius * (1.0 - az * az).max(0.0).sqrt()
            }
            Shape::Sphere { radius } => c - radius,
            Shape::Plane { half_x, half_y } => c - row[0].abs() * half_x - row[1].abs() * half_y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneRecipe {
    /// Shapes drawn (with replacement) for each placed object.
    pub object_set: Vec<Shape>,
    pub count_min: usize,
    pub count_max: usize,
    /// Objects are centered within `[-w, w]^2`; the table spans the same square.
    pub workspace_half_extent: f64,
    pub seed: u64,
    /// Target spacing between surface samples, meters.
    pub point_spacing: f64,
    pub max_retries: usize,
    /// Objects whose top would end above this height are rejected.
    pub max_stack_height: f64,
    pub table: bool,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        SceneRecipe {
            object_set: vec![
                Shape::Box {
                    half: [0.02, 0.015, 0.025],
                },
                Shape::Box {
                    half: [0.01, 0.03, 0.01],
                },
                Shape::Cylinder {
                    radius: 0.012,
                    half_height: 0.03,
                },
                Shape::Sphere { radius: 0.02 },
                Shape::Sphere { radius: 0.012 },
                Shape::Cylinder {
                    radius: 0.025,
                    half_height: 0.015,
                },
            ],
            count_min: 6,
            count_max: 6,
            workspace_half_extent: 0.12,
            seed: 0,
            point_spacing: 0.006,
            max_retries: 100,
            max_stack_height: 0.25,
            table: true,
        }
    }
}

impl SceneRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.object_set.is_empty() {
            return Err(Error::InvalidArgument("recipe object set is empty".into()));
        }
        for s in &self.object_set {
            s.validate()?;
            if matches!(s, Shape::Plane { .. }) {
                return Err(Error::InvalidArgument("planes cannot be placed as objects".into()));
            }
        }
        if self.count_min == 0 || self.count_min > self.count_max {
            return Err(Error::InvalidArgument("recipe needs 1 <= count_min <= count_max".into()));
        }
        let positive = [self.workspace_half_extent, self.point_spacing, self.max_stack_height];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("recipe extents must be positive".into()));
        }
        Ok(())
    }
}

/// Generated scene plus the primitives it was sampled from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimScene {
    pub scene: Scene,
    /// Objects (ids from 1) followed by the table plane (id 0) if any.
    pub primitives: Vec<Primitive>,
}

fn stable_orientation(shape: &Shape, rng: &mut impl Rng) -> Mat3 {
    use std::f64::consts::{FRAC_PI_2, PI};
    let tilt = match shape {
        Shape::Box { .. } => {
            let options = [
                (0.0, 0.0),
                (FRAC_PI_2, 0.0),
                (-FRAC_PI_2, 0.0),
                (PI, 0.0),
                (0.0, FRAC_PI_2),
                (0.0, -FRAC_PI_2),
            ];
            let (roll, pitch) = options[rng.random_range(0..options.len())];
            crate::geometry::euler_to_rotation(0.0, pitch, roll)
        }
        Shape::Cylinder { .. } => {
            let roll = [0.0, FRAC_PI_2, PI][rng.random_range(0..3)];
            crate::geometry::euler_to_rotation(0.0, 0.0, roll)
        }
        Shape::Sphere { .. } | Shape::Plane { .. } => {
            let pitch = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
            let roll = rng.random_range(-PI..PI);
            crate::geometry::euler_to_rotation(0.0, pitch, roll)
        }
    };
    let yaw = rng.random_range(-PI..PI);
    crate::geometry::euler_to_rotation(yaw, 0.0, 0.0) * tilt
}

fn sample_count(shape: &Shape, spacing: f64) -> usize {
    ((shape.area() / (spacing * spacing)).ceil() as usize).max(1)
}

struct Placed {
    prim: Primitive,
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
}

/// Highest z of `prim` along the vertical through `(x, y)`.
fn top_along_vertical(prim: &Primitive, x: f64, y: f64) -> Option<f64> {
    let o = Vec3::new(x, y, PROBE_HEIGHT);
    prim.intersect(&o, &-Vec3::z()).map(|(t, _)| PROBE_HEIGHT - t)
}

fn bottom_along_vertical(prim: &Primitive, x: f64, y: f64) -> Option<f64> {
    let o = Vec3::new(x, y, -PROBE_HEIGHT);
    prim.intersect(&o, &Vec3::z()).map(|(t, _)| t - PROBE_HEIGHT)
}

/// Drops objects one at a time onto the table and each other. Each object
/// falls straight down from its random `(x, y)` until its first contact.
pub fn generate_scene(recipe: &SceneRecipe) -> Result<SimScene> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let count = rng.random_range(recipe.count_min..=recipe.count_max);
    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for index in 0..count {
        let shape = recipe.object_set[rng.random_range(0..recipe.object_set.len())];
        let id = index as u32 + 1;
        let mut attempt = 0;
        let object = loop {
            if attempt == recipe.max_retries {
                return Err(Error::Placement {
                    index,
                    shape: shape.name().into(),
                    attempts: attempt,
                });
            }
            attempt += 1;
            if let Some(p) = try_place(&shape, id, recipe, &placed, &mut rng) {
                break p;
            }
        };
        placed.push(object);
    }

    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut ids = Vec::new();
    for p in &placed {
        points.extend_from_slice(&p.points);
        normals.extend_from_slice(&p.normals);
        ids.extend(std::iter::repeat_n(p.prim.object_id, p.points.len()));
    }
    let mut primitives: Vec<Primitive> = placed.iter().map(|p| p.prim).collect();
    if recipe.table {
        let w = recipe.workspace_half_extent;
        let steps = (2.0 * w / recipe.point_spacing).floor() as usize;
        for i in 0..=steps {
            for j in 0..=steps {
                let q = Vec3::new(
                    -w + i as f64 * recipe.point_spacing,
                    -w + j as f64 * recipe.point_spacing,
                    0.0,
                );
                if primitives.iter().all(|prim| prim.sdf(&q) > 1e-6) {
                    points.push(q);
                    normals.push(Vec3::z());
                    ids.push(0);
                }
            }
        }
        primitives.push(Primitive::new(
            Shape::Plane { half_x: w, half_y: w },
            Mat3::identity(),
            Vec3::zeros(),
            0,
        ));
    }
    let scene = Scene::new(points, ids)?.with_normals(normals)?;
    Ok(SimScene { scene, primitives })
}

fn try_place(
    shape: &Shape,
    id: u32,
    recipe: &SceneRecipe,
    placed: &[Placed],
    rng: &mut ChaCha8Rng,
) -> Option<Placed> {
    let rotation = stable_orientation(shape, rng);
    let margin = recipe.workspace_half_extent - shape.bounding_radius();
    let (x, y) = if margin > 0.0 {
        (rng.random_range(-margin..=margin), rng.random_range(-margin..=margin))
    } else {
        (0.0, 0.0)
    };
    let mut prim = Primitive::new(*shape, rotation, Vec3::new(x, y, 0.0), id);
    let n = sample_count(shape, recipe.point_spacing);
    let local: Vec<(Vec3, Vec3)> = (0..n).map(|_| shape.sample_surface(rng)).collect();
    let points: Vec<Vec3> = local.iter().map(|(p, _)| rotation * p + prim.translation()).collect();
    let normals: Vec<Vec3> = local.iter().map(|(_, n)| (rotation * n).normalize()).collect();

    // lift needed to clear the table and every object below
    let mut lift = -prim.min_z();
    for other in placed {
        for q in &points {
            if let Some(top) = top_along_vertical(&other.prim, q.x, q.y) {
                lift = lift.max(top - q.z);
            }
        }
        for a in &other.points {
            if let Some(bottom) = bottom_along_vertical(&prim, a.x, a.y) {
                lift = lift.max(a.z - bottom);
            }
        }
    }
    prim.translation[2] += lift;
    let points: Vec<Vec3> = points.iter().map(|p| p + Vec3::z() * lift).collect();

    let top = points.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
    if top > recipe.max_stack_height {
        return None;
    }
    for other in placed {
        if points.iter().any(|p| other.prim.sdf(p) < -CONTACT_TOLERANCE)
            || other.points.iter().any(|p| prim.sdf(p) < -CONTACT_TOLERANCE)
        {
            return None;
        }
    }
    Some(Placed { prim, points, normals })
}

/// Camera pose: optical axis is the rotation's third column, image x/y
/// its first/second columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    /// Camera-to-world rotation, row-major.
    pub rotation: [f64; 9],
}

impl CameraPose {
    /// Looks from `position` at `target`. World +z is "up" (image rows run
    /// downward); for a vertical optical axis world +y stands in for up.
    pub fn look_at(position: Vec3, target: Vec3) -> Self {
        let forward = (target - position).normalize();
        let mut up = Vec3::z();
        if forward.cross(&up).norm() < 1e-9 {
            up = Vec3::y();
        }
        let x = forward.cross(&up).normalize();
        let y = forward.cross(&x);
        let r = Mat3::from_columns(&[x, y, forward]);
        CameraPose {
            position: position.into(),
            rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
        }
    }

    pub fn rotation(&self) -> Mat3 {
        Mat3::from_row_slice(&self.rotation)
    }

    pub fn position(&self) -> Vec3 {
        Vec3::from(self.position)
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation().tr_mul(&(p - self.position()))
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.position()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointSet {
    pub radius: f64,
    pub center: [f64; 3],
    pub poses: Vec<CameraPose>,
    /// Smallest angle between any two viewing directions, degrees.
    pub min_pairwise_angle_deg: f64,
}

/// Directions in the quarter-sphere `z >= 0, y >= 0`: a Fibonacci lattice is
/// filtered to the region and `count` members are picked at evenly spaced
/// lattice indices. A single viewpoint sits at the zenith.
pub fn quarter_sphere_directions(count: usize) -> Result<Vec<Vec3>> {
    if count == 0 || count > MAX_VIEWPOINTS {
        return Err(Error::InvalidArgument(format!(
            "viewpoint count {count} outside 1..={MAX_VIEWPOINTS}"
        )));
    }
    if count == 1 {
        return Ok(vec![Vec3::z()]);
    }
    let mut lattice = 4 * count;
    let candidates = loop {
        let dirs: Vec<Vec3> = fibonacci_sphere(lattice)
            .into_iter()
            .filter(|d| d.z >= 0.0 && d.y >= 0.0)
            .collect();
        if dirs.len() >= count {
            break dirs;
        }
        lattice += count / 8 + 1;
    };
    let n = candidates.len();
    Ok((0..count).map(|i| candidates[i * n / count]).collect())
}

pub fn min_pairwise_angle_deg(dirs: &[Vec3]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            let c = dirs[i].dot(&dirs[j]).clamp(-1.0, 1.0);
            best = best.min(c.acos());
        }
    }
    best.to_degrees()
}

/// Quarter-sphere camera trajectory around `center`, every camera looking at it.
pub fn sample_viewpoints(radius: f64, count: usize, center: Vec3) -> Result<ViewpointSet> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!("viewpoint radius {radius}")));
    }
    let dirs = quarter_sphere_directions(count)?;
    let poses = dirs
        .iter()
        .map(|d| CameraPose::look_at(center + d * radius, center))
        .collect();
    Ok(ViewpointSet {
        radius,
        center: center.into(),
        poses,
        min_pairwise_angle_deg: min_pairwise_angle_deg(&dirs),
    })
}

/// Ray-cast depth: each pixel stores the camera-frame z of the nearest
/// surface hit, or 0 on a miss.
pub fn render_depth(
    primitives: &[Primitive],
    pose: &CameraPose,
    intrinsics: Intrinsics,
    width: usize,
    height: usize,
) -> Result<DepthImage> {
    intrinsics.validate()?;
    let r = pose.rotation();
    let origin = pose.position();
    let mut depth = vec![0.0; width * height];
    depth
        .par_chunks_mut(width.max(1))
        .enumerate()
        .for_each(|(v, row)| {
            for (u, out) in row.iter_mut().enumerate() {
                // unit z in the camera frame, so the ray parameter is depth
                let dir = r * intrinsics.ray(u as f64, v as f64);
                let hit = primitives
                    .iter()
                    .filter_map(|p| p.intersect(&origin, &dir))
                    .filter_map(|(t0, _)| (t0 > 0.0).then_some(t0))
                    .fold(f64::INFINITY, f64::min);
                if hit.is_finite() {
                    *out = hit;
                }
            }
        });
    DepthImage::new(width, height, depth, intrinsics)
}

/// One global Gaussian offset (std `sigma_shift`) plus independent per-pixel
/// Gaussian noise (std `sigma_pixel`) on valid pixels, clamped at 0.
/// Pixels are visited row-major and only valid pixels draw per-pixel noise.
pub fn apply_depth_noise(d: &DepthImage, sigma_pixel: f64, sigma_shift: f64, seed: u64) -> Result<DepthImage> {
    if !(sigma_pixel >= 0.0 && sigma_shift >= 0.0) || !sigma_pixel.is_finite() || !sigma_shift.is_finite() {
        return Err(Error::InvalidArgument("noise sigmas must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = Normal::new(0.0, sigma_shift).unwrap().sample(&mut rng);
    let pixel = Normal::new(0.0, sigma_pixel).unwrap();
    let mut out = d.clone();
    for z in out.depth.iter_mut() {
        if *z > 0.0 {
            *z = (*z + shift + pixel.sample(&mut rng)).max(0.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            width: 640,
            height: 480,
            fx: 600.0,
            fy: 600.0,
            cx: 319.5,
            cy: 239.5,
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::backproject;

    #[test]
    fn single_box_rests_on_table() {
        let recipe = SceneRecipe {
            object_set: vec![Shape::Box {
                half: [0.02, 0.03, 0.04],
            }],
            count_min: 1,
            count_max: 1,
            ..Default::default()
        };
        let sim = generate_scene(&recipe).unwrap();
        let b = sim.primitives[0];
        let r = b.rotation();
        // vertical half extent of the chosen resting face
        let half_up: f64 = (0..3).map(|j| r[(2, j)].abs() * [0.02, 0.03, 0.04][j]).sum();
        assert!((b.translation[2] - half_up).abs() < 1e-12);
        assert!(b.min_z().abs() < 1e-12);
        assert!([0.02, 0.03, 0.04].iter().any(|h| (half_up - h).abs() < 1e-12));
        assert!(sim.scene.points.iter().all(|p| p.z >= -1e-12));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&SceneRecipe::default()).unwrap();
        let b = generate_scene(&SceneRecipe::default()).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&SceneRecipe {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn impossible_placement_names_the_object() {
        let recipe = SceneRecipe {
            object_set: vec![Shape::Sphere { radius: 0.05 }],
            count_min: 2,
            count_max: 2,
            max_stack_height: 0.11,
            workspace_half_extent: 0.05,
            max_retries: 5,
            ..Default::default()
        };
        match generate_scene(&recipe) {
            Err(Error::Placement { index, shape, attempts }) => {
                assert_eq!((index, shape.as_str(), attempts), (1, "sphere", 5));
            }
            other => panic!("expected placement error, got {other:?}"),
        }
    }

    #[test]
    fn single_viewpoint_is_the_zenith() {
        let v = sample_viewpoints(0.5, 1, Vec3::zeros()).unwrap();
        assert_eq!(v.poses.len(), 1);
        assert_eq!(v.poses[0].position(), Vec3::new(0.0, 0.0, 0.5));
        assert!(sample_viewpoints(0.5, 0, Vec3::zeros()).is_err());
        assert!(sample_viewpoints(0.5, MAX_VIEWPOINTS + 1, Vec3::zeros()).is_err());
    }

    #[test]
    fn trajectory_of_256_on_quarter_sphere() {
        let v = sample_viewpoints(1.0, 256, Vec3::zeros()).unwrap();
        assert_eq!(v.poses.len(), 256);
        for p in &v.poses {
            let pos = p.position();
            assert!((pos.norm() - 1.0).abs() < 1e-9);
            assert!(pos.z >= 0.0 && pos.y >= 0.0);
            // optical axis points at the center
            let axis = p.rotation().column(2).into_owned();
            assert!((axis + pos.normalize()).norm() < 1e-12);
        }
        assert!(v.min_pairwise_angle_deg >= 4.0, "{}", v.min_pairwise_angle_deg);
    }

    fn k() -> Intrinsics {
        Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 16.0,
            cy: 12.0,
        }
    }

    #[test]
    fn empty_scene_renders_zero() {
        let pose = CameraPose::look_at(Vec3::new(0.0, 0.0, 1.0), Vec3::zeros());
        let d = render_depth(&[], &pose, k(), 32, 24).unwrap();
        assert!(d.depth.iter().all(|z| *z == 0.0));
    }

    #[test]
    fn sphere_on_axis_center_depth() {
        let sphere = Primitive::new(Shape::Sphere { radius: 1.0 }, Mat3::identity(), Vec3::new(0.0, 0.0, -2.0), 1);
        let pose = CameraPose::look_at(Vec3::zeros(), Vec3::new(0.0, 0.0, -1.0));
        let d = render_depth(&[sphere], &pose, k(), 33, 25).unwrap();
        assert!((d.at(16, 12) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rendered_points_lie_on_primitives() {
        let sim = generate_scene(&SceneRecipe::default()).unwrap();
        let pose = CameraPose::look_at(Vec3::new(0.1, 0.3, 0.4), Vec3::zeros());
        let d = render_depth(&sim.primitives, &pose, k(), 32, 24).unwrap();
        let bp = backproject(&d);
        assert!(!bp.points.is_empty());
        for p in &bp.points {
            let w = pose.camera_to_world(p);
            let dist = sim.primitives.iter().map(|q| q.sdf(&w).abs()).fold(f64::INFINITY, f64::min);
            assert!(dist < 1e-6, "{dist}");
        }
    }

    #[test]
    fn noise_identity_and_invalid_pixels() {
        let mut d = DepthImage::filled(8, 8, 0.7, k()).unwrap();
        d.depth[3] = 0.0;
        assert_eq!(apply_depth_noise(&d, 0.0, 0.0, 4).unwrap(), d);
        let noisy = apply_depth_noise(&d, 0.01, 0.02, 4).unwrap();
        assert_eq!(noisy.depth[3], 0.0);
        assert_ne!(noisy, d);
        assert_eq!(noisy, apply_depth_noise(&d, 0.01, 0.02, 4).unwrap());
        assert!(apply_depth_noise(&d, -0.1, 0.0, 0).is_err());
    }

    #[test]
    fn ray_hits_cylinder_caps_and_sides() {
        let cyl = Shape::Cylinder {
            radius: 1.0,
            half_height: 2.0,
        };
        let (t0, t1) = cyl.intersect_local(&Vec3::new(0.0, 0.0, 5.0), &-Vec3::z()).unwrap();
        assert_eq!((t0, t1), (3.0, 7.0));
        let (t0, _) = cyl.intersect_local(&Vec3::new(-5.0, 0.0, 0.0), &Vec3::x()).unwrap();
        assert!((t0 - 4.0).abs() < 1e-12);
        assert!(cyl.intersect_local(&Vec3::new(-5.0, 0.0, 2.5), &Vec3::x()).is_none());
    }
}
