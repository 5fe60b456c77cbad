//! Uniform hash grid for fixed-radius neighbor queries.

use std::collections::HashMap;

use crate::scene::Point;

pub struct RadiusIndex<'a> {
    points: &'a [Point],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
}

impl<'a> RadiusIndex<'a> {
    /// `cell` should be at least the largest query radius.
    pub fn new(points: &'a [Point], cell: f64) -> Self {
        assert!(cell > 0.0);
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(p, cell)).or_default().push(i as u32);
        }
        RadiusIndex { points, cell, cells }
    }

    pub fn points(&self) -> &[Point] {
        self.points
    }

    /// Every point within `radius` of `center` (and possibly a few beyond it,
    /// up to one cell); callers apply the exact distance test.
    pub fn candidates(&self, center: &Point, radius: f64) -> impl Iterator<Item = usize> + '_ {
        debug_assert!(radius <= self.cell);
        let c = cell_of(center, self.cell);
        (-1..=1).flat_map(move |dx| {
            (-1..=1).flat_map(move |dy| {
                (-1..=1).flat_map(move |dz| {
                    self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]).into_iter().flatten().map(|&i| i as usize)
                })
            })
        })
    }

    /// Indices strictly within `radius`, ascending.
    pub fn within(&self, center: &Point, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        let mut out: Vec<usize> =
            self.candidates(center, radius).filter(|&i| (self.points[i] - center).norm_squared() < r2).collect();
        out.sort_unstable();
        out
    }
}

fn cell_of(p: &Point, cell: f64) -> [i64; 3] {
    std::array::from_fn(|a| (p[a] / cell).floor() as i64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = stream(5, &[]);
        let pts: Vec<Point> = (0..500)
            .map(|_| Point::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let index = RadiusIndex::new(&pts, 0.2);
        for c in pts.iter().take(50) {
            let brute: Vec<usize> = (0..pts.len()).filter(|&i| (pts[i] - c).norm_squared() < 0.04).collect();
            assert_eq!(index.within(c, 0.2), brute);
        }
    }
}
