//! Slow reference implementations used to cross-check the fast paths.
//! Each one is written from the defining formula with plain loops and no
//! shared helpers from the modules it verifies.

use std::f64::consts::{PI, TAU};

use crate::error::Result;
use crate::neural::ParamStore;
use crate::scene::Point;
use crate::shape_context::ScPartition;
use crate::tensor::Tensor;

/// Polar, azimuth and log-radial coordinates of `(dx, dy, dz)` normalized
/// to `[0, 1]`-ish fractions, or `None` outside the open ball / at the
/// center.
fn sc_fractions(dx: f64, dy: f64, dz: f64, radius: f64, xi: f64) -> Option<(f64, f64, f64)> {
    let d = (dx * dx + dy * dy + dz * dz).sqrt();
    if d == 0.0 || d >= radius {
        return None;
    }
    let theta = (dz / d).clamp(-1.0, 1.0).acos();
    let mut phi = if dx == 0.0 && dy == 0.0 { 0.0 } else { dy.atan2(dx) };
    if phi < 0.0 {
        phi += TAU;
    }
    let rad = ((d + xi).ln() - xi.ln()) / ((radius + xi).ln() - xi.ln());
    Some((theta / PI, phi / TAU, rad))
}

fn in_sector(fraction: f64, n: usize, b: usize) -> bool {
    let raw = (fraction * n as f64).floor();
    let s = if raw >= (n - 1) as f64 { n - 1 } else { raw as usize };
    s == b
}

/// Naive multi-scale descriptor: for every bin of every scale, scan every
/// point and test membership.
pub fn naive_shape_context(center: &Point, positions: &[Point], parts: &[ScPartition]) -> Vec<u8> {
    let mut out = Vec::new();
    for part in parts {
        for bt in 0..part.n_theta {
            for bp in 0..part.n_phi {
                for br in 0..part.n_rad {
                    let hit = positions.iter().any(|q| {
                        match sc_fractions(q.x - center.x, q.y - center.y, q.z - center.z, part.radius, part.xi) {
                            Some((t, p, r)) => {
                                in_sector(t, part.n_theta, bt)
                                    && in_sector(p, part.n_phi, bp)
                                    && in_sector(r, part.n_rad, br)
                            }
                            None => false,
                        }
                    });
                    out.push(u8::from(hit));
                }
            }
        }
    }
    out
}

/// k nearest keys per query by sorting all keys on (squared distance, index).
pub fn brute_knn(queries: &[Point], keys: &[Point], k: usize) -> Vec<Vec<usize>> {
    queries
        .iter()
        .map(|q| {
            let mut all: Vec<(f64, usize)> =
                keys.iter().enumerate().map(|(j, p)| ((p - q).norm_squared(), j)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

fn lin(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    (0..cols)
        .map(|c| {
            let mut s = b.map_or(0.0, |b| b.data()[c]);
            for r in 0..rows {
                s += x[r] * w.at(r, c);
            }
            s
        })
        .collect()
}

fn layer_norm(x: &[f64], g: &Tensor, b: &Tensor, eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| (v - mean) / (var + eps).sqrt() * g.data()[i] + b.data()[i]).collect()
}

/// Dense multi-head attention of every query over every key, with scores of
/// non-neighbors masked to `-inf`, relative positions applied per edge, then
/// residual, layer norm, feed-forward, residual, layer norm.
#[allow(clippy::too_many_arguments)]
pub fn dense_attention(
    params: &ParamStore,
    prefix: &str,
    heads: usize,
    ln_eps: f64,
    query: &Tensor,
    query_pos: &[Point],
    key: &Tensor,
    key_pos: &[Point],
    neighbors: &[Vec<usize>],
) -> Result<Tensor> {
    let g = |n: &str| params.get(&format!("{prefix}.{n}"));
    let c = query.cols();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Vec::with_capacity(query.numel());
    for i in 0..query.rows() {
        let xi = query.row(i);
        let q = lin(xi, g("q.w")?, Some(g("q.b")?));
        let mut mixed = vec![0.0; c];
        for h in 0..heads {
            let mut scores = vec![f64::NEG_INFINITY; key.rows()];
            for (j, s) in scores.iter_mut().enumerate() {
                if !neighbors[i].contains(&j) {
                    continue;
                }
                let rel = key_pos[j] - query_pos[i];
                let pe = lin(&[rel.x, rel.y, rel.z], g("pos.w")?, None);
                let kj = lin(key.row(j), g("k.w")?, Some(g("k.b")?));
                let mut dot = 0.0;
                for t in h * dh..(h + 1) * dh {
                    dot += q[t] * (kj[t] + pe[t]);
                }
                *s = dot * scale;
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            for (j, e) in ex.iter().enumerate() {
                if *e == 0.0 {
                    continue;
                }
                let vj = lin(key.row(j), g("v.w")?, Some(g("v.b")?));
                for t in h * dh..(h + 1) * dh {
                    mixed[t] += e / z * vj[t];
                }
            }
        }
        let o = lin(&mixed, g("o.w")?, Some(g("o.b")?));
        let r1: Vec<f64> = xi.iter().zip(&o).map(|(a, b)| a + b).collect();
        let z1 = layer_norm(&r1, g("ln1.g")?, g("ln1.b")?, ln_eps);
        let hdn: Vec<f64> = lin(&z1, g("ff1.w")?, Some(g("ff1.b")?)).into_iter().map(|v| v.max(0.0)).collect();
        let f = lin(&hdn, g("ff2.w")?, Some(g("ff2.b")?));
        let r2: Vec<f64> = z1.iter().zip(&f).map(|(a, b)| a + b).collect();
        out.extend(layer_norm(&r2, g("ln2.g")?, g("ln2.b")?, ln_eps));
    }
    Tensor::matrix(query.rows(), c, out)
}

/// Mean BCE of `sigmoid(x)` against `t`, one element at a time.
pub fn bce_loop(logits: &[f64], targets: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&x, &t) in logits.iter().zip(targets) {
        let p = 1.0 / (1.0 + (-x).exp());
        s += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
    }
    s / logits.len() as f64
}

pub fn mse_loop(pred: &[f64], target: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in pred.iter().zip(target) {
        s += (a - b) * (a - b);
    }
    s / pred.len() as f64
}

/// Mean `1 - cos` over rows of width `c`, skipping rows with a zero side.
pub fn cosine_loop(pred: &[f64], target: &[f64], c: usize) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0);
    for (p, t) in pred.chunks(c).zip(target.chunks(c)) {
        let (mut pp, mut tt, mut pt) = (0.0, 0.0, 0.0);
        for k in 0..c {
            pp += p[k] * p[k];
            tt += t[k] * t[k];
            pt += p[k] * t[k];
        }
        if pp > 0.0 && tt > 0.0 {
            s += 1.0 - pt / (pp.sqrt() * tt.sqrt());
            n += 1;
        }
    }
    (n > 0).then(|| s / n as f64)
}

/// Symmetric Chamfer of one predicted set against one target set: mean
/// nearest squared distance in each direction, summed.
pub fn chamfer_pair(pred: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let one_way = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        from.iter().map(|a| to.iter().map(|b| d2(a, b)).fold(f64::INFINITY, f64::min)).sum::<f64>() / from.len() as f64
    };
    one_way(pred, target) + one_way(target, pred)
}
