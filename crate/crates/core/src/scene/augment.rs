use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::PointCloud;
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rotation {
    /// Fixed angle about +z (radians).
    Fixed(f64),
    /// Angle drawn uniformly from [0, 2*pi) using the augmentation seed.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub jitter_sigma: f64,
    pub flip_x: bool,
    pub flip_y: bool,
    pub rotation: Rotation,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec { jitter_sigma: 0.0, flip_x: false, flip_y: false, rotation: Rotation::Fixed(0.0), seed: 0 }
    }
}

/// Mirror (x then y), rotate about the world z axis, then jitter.
/// Colors and labels pass through unchanged.
pub fn augment(cloud: &PointCloud, spec: &AugmentSpec) -> PointCloud {
    assert!(spec.jitter_sigma >= 0.0, "jitter sigma must be non-negative");
    let mut rng = stream(spec.seed, &[tag::AUGMENT]);
    let angle = match spec.rotation {
        Rotation::Fixed(a) => a,
        Rotation::Uniform => rng.random_range(0.0..std::f64::consts::TAU),
    };
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
    let jitter = (spec.jitter_sigma > 0.0).then(|| Normal::new(0.0, spec.jitter_sigma).unwrap());
    cloud.map_positions(|p| {
        let mut q = *p;
        if spec.flip_x {
            q.x = -q.x;
        }
        if spec.flip_y {
            q.y = -q.y;
        }
        if angle != 0.0 {
            q = rot * q;
        }
        if let Some(n) = &jitter {
            q += Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
        }
        q
    })
}
