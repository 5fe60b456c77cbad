//! Synthetic labeled scenes built from surface-sampled primitives.

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Point, PointCloud, Rgb};
use crate::error::{MspError, Result};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum PrimitiveClass {
    Plane = 0,
    Box = 1,
    Sphere = 2,
    Cylinder = 3,
}

impl PrimitiveClass {
    pub const ALL: [PrimitiveClass; 4] =
        [PrimitiveClass::Plane, PrimitiveClass::Box, PrimitiveClass::Sphere, PrimitiveClass::Cylinder];
    pub const COUNT: usize = 4;

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveClass::Plane => "plane",
            PrimitiveClass::Box => "box",
            PrimitiveClass::Sphere => "sphere",
            PrimitiveClass::Cylinder => "cylinder",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    /// Primitive counts in class order plane, box, sphere, cylinder.
    pub counts: [usize; 4],
    pub points_per_primitive: usize,
    /// Side length of the square floor area primitives are placed on (m).
    pub extent: f64,
    /// Isotropic Gaussian noise, truncated at four sigma (m).
    pub noise_sigma: f64,
    pub colors: bool,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            counts: [1, 1, 1, 1],
            points_per_primitive: 256,
            extent: 3.0,
            noise_sigma: 0.005,
            colors: true,
            seed: 0,
        }
    }
}

/// Ideal surface a group of scene points was sampled from.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Square patch spanned by orthonormal `u`, `v`.
    Plane {
        center: Point,
        u: Vector3<f64>,
        v: Vector3<f64>,
        half_size: f64,
    },
    /// Box rotated by `yaw` about +z.
    Box {
        center: Point,
        yaw: f64,
        half_extents: Vector3<f64>,
    },
    Sphere {
        center: Point,
        radius: f64,
    },
    /// Open vertical cylinder (lateral surface only).
    Cylinder {
        center: Point,
        radius: f64,
        half_height: f64,
    },
}

impl Primitive {
    pub fn class(&self) -> PrimitiveClass {
        match self {
            Primitive::Plane { .. } => PrimitiveClass::Plane,
            Primitive::Box { .. } => PrimitiveClass::Box,
            Primitive::Sphere { .. } => PrimitiveClass::Sphere,
            Primitive::Cylinder { .. } => PrimitiveClass::Cylinder,
        }
    }

    /// Unsigned distance from `p` to the ideal surface.
    pub fn surface_distance(&self, p: &Point) -> f64 {
        match self {
            Primitive::Plane { center, u, v, half_size } => {
                let d = p - center;
                let n = u.cross(v);
                let du = (d.dot(u).abs() - half_size).max(0.0);
                let dv = (d.dot(v).abs() - half_size).max(0.0);
                (d.dot(&n).powi(2) + du * du + dv * dv).sqrt()
            }
            Primitive::Box { center, yaw, half_extents } => {
                let local = Rotation3::from_axis_angle(&Vector3::z_axis(), -yaw) * (p - center);
                let q = local.abs() - half_extents;
                let outside = q.map(|c| c.max(0.0)).norm();
                let inside = q.max().min(0.0);
                (outside + inside).abs()
            }
            Primitive::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            Primitive::Cylinder { center, radius, half_height } => {
                let d = p - center;
                let dr = (d.x.hypot(d.y) - radius).abs();
                let dz = (d.z.abs() - half_height).max(0.0);
                dr.hypot(dz)
            }
        }
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> Point {
        match self {
            Primitive::Plane { center, u, v, half_size } => {
                let a = rng.random_range(-half_size..=*half_size);
                let b = rng.random_range(-half_size..=*half_size);
                center + u * a + v * b
            }
            Primitive::Box { center, yaw, half_extents: h } => {
                // Faces in +/- pairs per axis, chosen by area.
                let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = i;
                        break;
                    }
                    pick -= a;
                }
                let mut local = Vector3::new(
                    rng.random_range(-h.x..=h.x),
                    rng.random_range(-h.y..=h.y),
                    rng.random_range(-h.z..=h.z),
                );
                local[axis] = if rng.random_bool(0.5) { h[axis] } else { -h[axis] };
                center + Rotation3::from_axis_angle(&Vector3::z_axis(), *yaw) * local
            }
            Primitive::Sphere { center, radius } => center + unit_vector(rng) * *radius,
            Primitive::Cylinder { center, radius, half_height } => {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let z = rng.random_range(-half_height..=*half_height);
                center + Vector3::new(radius * a.cos(), radius * a.sin(), z)
            }
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
        let n: f64 = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn random_primitive(class: PrimitiveClass, extent: f64, rng: &mut ChaCha8Rng) -> Primitive {
    let x = rng.random_range(0.0..=extent);
    let y = rng.random_range(0.0..=extent);
    let z = rng.random_range(0.3..=1.5);
    let center = Point::new(x, y, z);
    match class {
        PrimitiveClass::Plane => {
            let yaw: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (u, v) = if rng.random_bool(0.5) {
                (Vector3::new(yaw.cos(), yaw.sin(), 0.0), Vector3::new(-yaw.sin(), yaw.cos(), 0.0))
            } else {
                (Vector3::new(yaw.cos(), yaw.sin(), 0.0), Vector3::z())
            };
            Primitive::Plane { center, u, v, half_size: rng.random_range(0.3..=0.6) }
        }
        PrimitiveClass::Box => Primitive::Box {
            center,
            yaw: rng.random_range(0.0..std::f64::consts::TAU),
            half_extents: Vector3::new(
                rng.random_range(0.15..=0.35),
                rng.random_range(0.15..=0.35),
                rng.random_range(0.15..=0.35),
            ),
        },
        PrimitiveClass::Sphere => Primitive::Sphere { center, radius: rng.random_range(0.2..=0.4) },
        PrimitiveClass::Cylinder => Primitive::Cylinder {
            center,
            radius: rng.random_range(0.15..=0.3),
            half_height: rng.random_range(0.2..=0.45),
        },
    }
}

pub fn generate_scene(spec: &SyntheticSceneSpec) -> Result<PointCloud> {
    generate_scene_with_primitives(spec).map(|(cloud, _)| cloud)
}

/// Generate a scene and also return the primitives its points were drawn
/// from, in point order (`points_per_primitive` consecutive points each).
pub fn generate_scene_with_primitives(spec: &SyntheticSceneSpec) -> Result<(PointCloud, Vec<Primitive>)> {
    if spec.counts.iter().sum::<usize>() == 0 {
        return Err(MspError::InvalidSpec("scene needs at least one primitive".into()));
    }
    if spec.points_per_primitive == 0 {
        return Err(MspError::InvalidSpec("points_per_primitive must be >= 1".into()));
    }
    if !(spec.noise_sigma >= 0.0) || !(spec.extent >= 0.0) {
        return Err(MspError::InvalidSpec("noise and extent must be non-negative".into()));
    }
    let mut positions = Vec::new();
    let mut colors: Vec<Rgb> = Vec::new();
    let mut labels = Vec::new();
    let mut primitives = Vec::new();
    let classes = PrimitiveClass::ALL.iter().zip(spec.counts).flat_map(|(&c, n)| std::iter::repeat_n(c, n));
    for (idx, class) in classes.enumerate() {
        let mut rng = stream(spec.seed, &[tag::SCENE, idx as u64]);
        let prim = random_primitive(class, spec.extent, &mut rng);
        let base: Rgb = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        for _ in 0..spec.points_per_primitive {
            let mut p = prim.sample_surface(&mut rng);
            if spec.noise_sigma > 0.0 {
                p += truncated_noise(spec.noise_sigma, &mut rng);
            }
            positions.push(p);
            labels.push(class.id());
            if spec.colors {
                colors.push(base.map(|c| (c + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)));
            }
        }
        primitives.push(prim);
    }
    let mut cloud = PointCloud::new(positions)?.with_labels(labels)?;
    if spec.colors {
        cloud = cloud.with_colors(colors)?;
    }
    Ok((cloud, primitives))
}

/// Gaussian noise vector, resampled until its norm is within four sigma.
fn truncated_noise(sigma: f64, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::<f64>::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng))
            * sigma;
        if v.norm() <= 4.0 * sigma {
            return v;
        }
    }
}
