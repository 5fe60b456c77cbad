//! Block masking: partition space into cubes of side `w`, drop a fraction of
//! the occupied ones.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{MspError, Result};
use crate::rng::{fisher_yates_prefix, stream, tag};
use crate::scene::{Point, PointCloud};

pub type BlockIndex = [i64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub block_size: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(MspError::InvalidSpec(format!("mask ratio {} outside [0,1]", self.ratio)));
        }
        if !(self.block_size > 0.0) || !self.block_size.is_finite() {
            return Err(MspError::InvalidSpec(format!("block size {} must be > 0", self.block_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrid {
    pub origin: Point,
    pub block_size: f64,
    /// Number of blocks spanned along each axis; indices are clamped below it.
    pub dims: [i64; 3],
    /// Non-empty blocks only, in sorted index order.
    pub occupancy: BTreeMap<BlockIndex, Vec<usize>>,
}

impl BlockGrid {
    pub fn block_of(&self, p: &Point) -> BlockIndex {
        block_index(p, &self.origin, self.block_size, &self.dims)
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }
}

fn block_index(p: &Point, origin: &Point, w: f64, dims: &[i64; 3]) -> BlockIndex {
    std::array::from_fn(|a| {
        let i = ((p[a] - origin[a]) / w).floor() as i64;
        i.clamp(0, dims[a] - 1)
    })
}

pub fn build_block_grid(cloud: &PointCloud, block_size: f64) -> BlockGrid {
    assert!(block_size > 0.0, "block size must be positive");
    let aabb = cloud.aabb();
    let extent = aabb.extent();
    let dims = std::array::from_fn(|a| ((extent[a] / block_size).ceil() as i64).max(1));
    let mut occupancy: BTreeMap<BlockIndex, Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions().iter().enumerate() {
        occupancy.entry(block_index(p, &aabb.min, block_size, &dims)).or_default().push(i);
    }
    BlockGrid { origin: aabb.min, block_size, dims, occupancy }
}

/// Count of blocks to mask: `round(r * B)`, ties rounded up.
pub fn masked_block_count(ratio: f64, blocks: usize) -> usize {
    ((ratio * blocks as f64 + 0.5).floor() as usize).min(blocks)
}

pub fn select_masked_blocks(grid: &BlockGrid, ratio: f64, seed: u64) -> BTreeSet<BlockIndex> {
    let blocks: Vec<BlockIndex> = grid.occupancy.keys().copied().collect();
    let count = masked_block_count(ratio, blocks.len());
    let mut rng = stream(seed, &[tag::MASK]);
    fisher_yates_prefix(blocks.len(), count, &mut rng).into_iter().map(|i| blocks[i]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskResult {
    /// Sorted ascending.
    pub masked_idx: Vec<usize>,
    /// Sorted ascending.
    pub remaining_idx: Vec<usize>,
    pub masked_blocks: BTreeSet<BlockIndex>,
    pub grid: BlockGrid,
}

impl MaskResult {
    /// A partition with nothing masked.
    pub fn unmasked(cloud: &PointCloud) -> MaskResult {
        MaskResult {
            masked_idx: Vec::new(),
            remaining_idx: (0..cloud.len()).collect(),
            masked_blocks: BTreeSet::new(),
            grid: build_block_grid(cloud, f64::MAX.sqrt()),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.remaining_idx.is_empty()
    }

    /// Per-point membership flags.
    pub fn masked_flags(&self, n: usize) -> Vec<bool> {
        let mut flags = vec![false; n];
        for &i in &self.masked_idx {
            flags[i] = true;
        }
        flags
    }

    /// CSV of `index,masked` rows for reproducibility dumps.
    pub fn to_csv(&self) -> String {
        let n = self.masked_idx.len() + self.remaining_idx.len();
        let mut out = String::from("index,masked\n");
        for (i, m) in self.masked_flags(n).into_iter().enumerate() {
            writeln!(out, "{i},{}", u8::from(m)).unwrap();
        }
        out
    }
}

/// Partition a cloud; accepts a fully masked result.
pub fn apply_mask_allow_degenerate(cloud: &PointCloud, spec: &MaskSpec) -> Result<MaskResult> {
    spec.validate()?;
    let grid = build_block_grid(cloud, spec.block_size);
    let masked_blocks = select_masked_blocks(&grid, spec.ratio, spec.seed);
    let mut masked_idx = Vec::new();
    let mut remaining_idx = Vec::new();
    for (block, points) in &grid.occupancy {
        if masked_blocks.contains(block) {
            masked_idx.extend_from_slice(points);
        } else {
            remaining_idx.extend_from_slice(points);
        }
    }
    masked_idx.sort_unstable();
    remaining_idx.sort_unstable();
    Ok(MaskResult { masked_idx, remaining_idx, masked_blocks, grid })
}

/// Partition a cloud for training; an empty remaining set is an error.
pub fn apply_mask(cloud: &PointCloud, spec: &MaskSpec) -> Result<MaskResult> {
    let result = apply_mask_allow_degenerate(cloud, spec)?;
    if result.is_degenerate() {
        return Err(MspError::DegenerateMask(format!(
            "all {} blocks masked (ratio {})",
            result.grid.len(),
            spec.ratio
        )));
    }
    Ok(result)
}
