//! Binary multi-scale 3D shape-context descriptors.
//!
//! The ball of radius `R` around a center is split into `n_theta` polar
//! sectors (measured from +z), `n_phi` azimuth sectors (`atan2(y, x)` in
//! `[0, 2pi)`) and `n_rad` log-warped radial shells. A bin is set when at
//! least one neighbor falls in it. Neighbors at distance exactly `R` and
//! points coinciding with the center are ignored.
//!
//! Flattened bin layout within one scale: `(b_theta * n_phi + b_phi) * n_rad + b_rad`.
//! Scales are concatenated in partition order.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{MspError, Result};
use crate::scene::Point;
use crate::spatial::RadiusIndex;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScPartition {
    pub n_theta: usize,
    pub n_phi: usize,
    pub n_rad: usize,
    pub radius: f64,
    pub xi: f64,
}

impl ScPartition {
    pub fn new(n_theta: usize, n_phi: usize, n_rad: usize, radius: f64, xi: f64) -> Result<Self> {
        let p = ScPartition { n_theta, n_phi, n_rad, radius, xi };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_theta == 0 || self.n_phi == 0 || self.n_rad == 0 {
            return Err(MspError::InvalidSpec("shape-context sector counts must be >= 1".into()));
        }
        if !(self.radius > 0.0) || !(self.xi > 0.0) {
            return Err(MspError::InvalidSpec("shape-context R and xi must be > 0".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_theta * self.n_phi * self.n_rad
    }

    pub fn flat(&self, (t, p, r): (usize, usize, usize)) -> usize {
        (t * self.n_phi + p) * self.n_rad + r
    }
}

/// The two-scale partition {2,4,3} + {4,8,5} with `R = 0.15`, `xi = 0.3`.
pub fn default_partitions() -> Vec<ScPartition> {
    vec![
        ScPartition { n_theta: 2, n_phi: 4, n_rad: 3, radius: 0.15, xi: 0.3 },
        ScPartition { n_theta: 4, n_phi: 8, n_rad: 5, radius: 0.15, xi: 0.3 },
    ]
}

pub fn descriptor_width(parts: &[ScPartition]) -> usize {
    parts.iter().map(ScPartition::bins).sum()
}

fn sector(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).floor() as usize).min(n - 1)
}

/// Bin of a neighbor at `offset` from the center, or `None` when it lies
/// outside the open ball or on the center itself.
pub fn bin_index(offset: &Vector3<f64>, part: &ScPartition) -> Option<(usize, usize, usize)> {
    let d = offset.norm();
    if d >= part.radius || d == 0.0 {
        return None;
    }
    let theta = (offset.z / d).clamp(-1.0, 1.0).acos();
    let phi = if offset.x == 0.0 && offset.y == 0.0 {
        0.0
    } else {
        let a = offset.y.atan2(offset.x);
        if a < 0.0 {
            a + TAU
        } else {
            a
        }
    };
    let log_xi = part.xi.ln();
    let rad = ((d + part.xi).ln() - log_xi) / ((part.radius + part.xi).ln() - log_xi);
    Some((sector(theta / PI, part.n_theta), sector(phi / TAU, part.n_phi), sector(rad, part.n_rad)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScDescriptor {
    pub bits: Vec<u8>,
}

impl ScDescriptor {
    pub fn occupied(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Single-scale descriptor by exhaustive scan of `positions`.
pub fn compute_shape_context(center: &Point, positions: &[Point], part: &ScPartition) -> ScDescriptor {
    let mut bits = vec![0u8; part.bins()];
    fill_bits(center, positions.iter(), part, &mut bits);
    ScDescriptor { bits }
}

fn fill_bits<'p>(center: &Point, neighbors: impl Iterator<Item = &'p Point>, part: &ScPartition, bits: &mut [u8]) {
    for p in neighbors {
        if let Some(b) = bin_index(&(p - center), part) {
            bits[part.flat(b)] = 1;
        }
    }
}

/// Row-major bit matrix, one row per center.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScMatrix {
    pub rows: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

impl ScMatrix {
    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.width..(i + 1) * self.width]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }
}

/// Multi-scale descriptors for every center, using a hash-grid neighbor
/// index over `positions`.
pub fn compute_multiscale_sc(centers: &[Point], positions: &[Point], parts: &[ScPartition]) -> Result<ScMatrix> {
    if parts.is_empty() {
        return Err(MspError::InvalidSpec("at least one shape-context partition required".into()));
    }
    for p in parts {
        p.validate()?;
    }
    let width = descriptor_width(parts);
    let max_r = parts.iter().map(|p| p.radius).fold(0.0, f64::max);
    let index = RadiusIndex::new(positions, max_r);
    let mut bits = vec![0u8; centers.len() * width];
    bits.par_chunks_mut(width.max(1)).zip(centers.par_iter()).for_each(|(row, center)| {
        let candidates: Vec<usize> = index.candidates(center, max_r).collect();
        let mut offset = 0;
        for part in parts {
            let bins = part.bins();
            fill_bits(center, candidates.iter().map(|&i| &positions[i]), part, &mut row[offset..offset + bins]);
            offset += bins;
        }
    });
    Ok(ScMatrix { rows: centers.len(), width, bits })
}

/// Text dump: center coordinates then the bits as 0/1, whitespace-separated.
pub fn format_dump(centers: &[Point], matrix: &ScMatrix) -> String {
    let mut out = String::new();
    for (i, c) in centers.iter().enumerate() {
        write!(out, "{} {} {}", c.x, c.y, c.z).unwrap();
        for b in matrix.row(i) {
            write!(out, " {b}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn part(t: usize, p: usize, r: usize) -> ScPartition {
        ScPartition::new(t, p, r, 0.15, 0.3).unwrap()
    }

    #[test]
    fn worked_example() {
        assert_eq!(bin_index(&Vector3::new(0.0, 0.0, 0.075), &part(2, 4, 3)), Some((0, 0, 1)));
    }

    #[test]
    fn south_pole_clamps_to_last_polar_sector() {
        for n in 1..6 {
            let b = bin_index(&Vector3::new(0.0, 0.0, -0.1), &part(n, 4, 3)).unwrap();
            assert_eq!(b.0, n - 1);
        }
    }

    #[test]
    fn ball_is_open_and_center_excluded() {
        let pt = part(2, 4, 3);
        assert_eq!(bin_index(&Vector3::new(0.15, 0.0, 0.0), &pt), None);
        assert_eq!(bin_index(&Vector3::zeros(), &pt), None);
        let just_inside = bin_index(&Vector3::new(0.15 * (1.0 - 1e-15), 0.0, 0.0), &pt).unwrap();
        assert_eq!(just_inside.2, 2);
    }

    #[test]
    fn azimuth_wraps_into_range() {
        let pt = part(1, 8, 1);
        // Just below the +x axis: phi close to 2pi lands in the last sector.
        let b = bin_index(&Vector3::new(0.1, -1e-14, 0.0), &pt).unwrap();
        assert_eq!(b.1, 7);
        let b = bin_index(&Vector3::new(-0.1, 0.01, 0.0), &pt).unwrap();
        assert_eq!(b.1, 3);
    }

    #[test]
    fn empty_neighborhood_is_all_zero() {
        let d = compute_shape_context(&Point::origin(), &[Point::new(1.0, 0.0, 0.0)], &part(2, 4, 3));
        assert_eq!(d.bits, vec![0; 24]);
    }

    #[test]
    fn saturated_neighborhood_is_all_one() {
        let pt = part(2, 4, 3);
        let mut pts = Vec::new();
        let log_span = (pt.radius + pt.xi).ln() - pt.xi.ln();
        for t in 0..pt.n_theta {
            for p in 0..pt.n_phi {
                for r in 0..pt.n_rad {
                    let theta = (t as f64 + 0.5) / pt.n_theta as f64 * PI;
                    let phi = (p as f64 + 0.5) / pt.n_phi as f64 * TAU;
                    let frac = (r as f64 + 0.5) / pt.n_rad as f64;
                    let d = (pt.xi.ln() + frac * log_span).exp() - pt.xi;
                    pts.push(Point::new(d * theta.sin() * phi.cos(), d * theta.sin() * phi.sin(), d * theta.cos()));
                }
            }
        }
        let desc = compute_shape_context(&Point::origin(), &pts, &pt);
        assert_eq!(desc.bits, vec![1; 24]);
    }

    #[test]
    fn default_width_is_184() {
        let parts = default_partitions();
        assert_eq!(descriptor_width(&parts), 184);
        let m = compute_multiscale_sc(&[Point::origin()], &[Point::new(0.01, 0.0, 0.0)], &parts).unwrap();
        assert_eq!(m.width, 184);
        assert_eq!(m.row(0).iter().map(|&b| b as usize).sum::<usize>(), 2);
    }

    #[test]
    fn degenerate_partition_is_any_neighbor() {
        let pt = ScPartition::new(1, 1, 1, 0.15, 0.3).unwrap();
        let centers = [Point::origin(), Point::new(5.0, 0.0, 0.0)];
        let m = compute_multiscale_sc(&centers, &[Point::new(0.1, 0.0, 0.0), Point::origin()], &[pt]).unwrap();
        assert_eq!(m.bits, vec![1, 0]);
    }

    #[test]
    fn invalid_partitions_rejected() {
        assert!(ScPartition::new(0, 1, 1, 0.1, 0.1).is_err());
        assert!(ScPartition::new(1, 1, 1, 0.0, 0.1).is_err());
        assert!(compute_multiscale_sc(&[], &[Point::origin()], &[]).is_err());
    }

    #[test]
    fn dump_format() {
        let pt = ScPartition::new(1, 1, 2, 0.15, 0.3).unwrap();
        let c = [Point::new(0.5, 1.0, -2.0)];
        let m = compute_multiscale_sc(&c, &[Point::new(0.51, 1.0, -2.0)], &[pt]).unwrap();
        assert_eq!(format_dump(&c, &m), "0.5 1 -2 1 0\n");
    }
}
