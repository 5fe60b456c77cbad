//! Point-cloud data model, file formats, synthetic scenes and augmentation.

mod augment;
mod io;
mod synth;

pub use augment::{augment, AugmentSpec, Rotation};
pub use io::{load_cloud, save_cloud, CloudFormat};
pub use synth::{generate_scene, generate_scene_with_primitives, Primitive, PrimitiveClass, SyntheticSceneSpec};

use nalgebra::{Point3, Vector3};

use crate::error::{MspError, Result};

pub type Point = Point3<f64>;
pub type Rgb = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub fn from_points(points: &[Point]) -> Option<Aabb> {
        let first = points.first()?;
        let (min, max) = points.iter().fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        Some(Aabb { min, max })
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn center(&self) -> Point {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }
}

/// A scene: positions with optional per-point colors and class labels.
///
/// Constructed through [`PointCloud::new`] and the `with_*` builders, which
/// enforce the length invariants and keep the cached bounds current.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Point>,
    colors: Option<Vec<Rgb>>,
    labels: Option<Vec<u8>>,
    aabb: Aabb,
}

impl PointCloud {
    pub fn new(positions: Vec<Point>) -> Result<Self> {
        let aabb = Aabb::from_points(&positions)
            .ok_or_else(|| MspError::InvalidSpec("point cloud must be non-empty".into()))?;
        Ok(PointCloud { positions, colors: None, labels: None, aabb })
    }

    pub fn with_colors(mut self, colors: Vec<Rgb>) -> Result<Self> {
        if colors.len() != self.positions.len() {
            return Err(MspError::InvalidSpec(format!("{} colors for {} points", colors.len(), self.positions.len())));
        }
        self.colors = Some(colors);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.positions.len() {
            return Err(MspError::InvalidSpec(format!("{} labels for {} points", labels.len(), self.positions.len())));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[Rgb]> {
        self.colors.as_deref()
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn aabb(&self) -> &Aabb {
        &self.aabb
    }

    /// Replace positions (same count), recomputing bounds.
    pub(crate) fn map_positions(&self, f: impl FnMut(&Point) -> Point) -> PointCloud {
        let positions: Vec<Point> = self.positions.iter().map(f).collect();
        let aabb = Aabb::from_points(&positions).expect("non-empty");
        PointCloud { positions, colors: self.colors.clone(), labels: self.labels.clone(), aabb }
    }

    /// Sub-cloud at the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        let positions = indices.iter().map(|&i| self.positions[i]).collect();
        let mut out = PointCloud::new(positions)?;
        if let Some(c) = &self.colors {
            out.colors = Some(indices.iter().map(|&i| c[i]).collect());
        }
        if let Some(l) = &self.labels {
            out.labels = Some(indices.iter().map(|&i| l[i]).collect());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aabb_bounds_every_point() {
        let pts = vec![Point::new(1.0, -2.0, 0.5), Point::new(-1.0, 3.0, 0.0), Point::new(0.0, 0.0, 4.0)];
        let cloud = PointCloud::new(pts.clone()).unwrap();
        assert_eq!(cloud.aabb().min, Point::new(-1.0, -2.0, 0.0));
        assert_eq!(cloud.aabb().max, Point::new(1.0, 3.0, 4.0));
        assert!(pts.iter().all(|p| cloud.aabb().contains(p)));
    }

    #[test]
    fn rejects_empty_and_mismatched_attributes() {
        assert!(PointCloud::new(vec![]).is_err());
        let cloud = PointCloud::new(vec![Point::origin(); 2]).unwrap();
        assert!(cloud.clone().with_colors(vec![[0.0; 3]]).is_err());
        assert!(cloud.with_labels(vec![0, 1, 2]).is_err());
    }
}
