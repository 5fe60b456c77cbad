use rayon::prelude::*;

use crate::error::{MspError, Result};
use crate::scene::Point;

/// Neighbor lists, `k` per query, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnIndex {
    pub k: usize,
    pub idx: Vec<usize>,
}

impl KnnIndex {
    pub fn queries(&self) -> usize {
        self.idx.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }

    pub fn max_index(&self) -> Option<usize> {
        self.idx.iter().copied().max()
    }
}

/// The `min(k, |keys|)` nearest keys of each query, ordered by ascending
/// squared distance, ties broken by ascending key index.
pub fn knn_search(queries: &[Point], keys: &[Point], k: usize) -> Result<KnnIndex> {
    if keys.is_empty() {
        return Err(MspError::EmptyKeys);
    }
    let kk = k.min(keys.len());
    if kk == 0 {
        return Ok(KnnIndex { k: 0, idx: Vec::new() });
    }
    let rows: Vec<Vec<usize>> = queries
        .par_iter()
        .map(|q| {
            let mut cand: Vec<(f64, usize)> =
                keys.iter().enumerate().map(|(i, p)| ((p - q).norm_squared(), i)).collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if kk < cand.len() {
                cand.select_nth_unstable_by(kk - 1, cmp);
                cand.truncate(kk);
            }
            cand.sort_unstable_by(cmp);
            cand.into_iter().map(|(_, i)| i).collect()
        })
        .collect();
    Ok(KnnIndex { k: kk, idx: rows.concat() })
}
