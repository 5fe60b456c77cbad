//! Encoder, mask queries, the three decoder variants and prediction heads.
//!
//! Parameter naming: everything under `encoder.` is the feature extractor
//! (tracked by the EMA target branch and kept for downstream use); `decoder.`
//! and `head.` are discarded after pre-training.

use nalgebra::Vector3;

use crate::config::{DecoderArch, MspConfig, Target};
use crate::error::{MspError, Result};
use crate::masking::MaskResult;
use crate::neural::{init_linear, knn_search, linear, Bound, KnnIndex, LocalAttentionBlock, ParamStore};
use crate::rng::{fisher_yates_prefix, stream, tag};
use crate::scene::{Point, PointCloud};
use crate::tensor::{Tape, Tensor, Var};

pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Debug, Clone, PartialEq)]
pub struct MspModel {
    pub config: MspConfig,
    pub params: ParamStore,
}

fn encoder_block(cfg: &MspConfig, i: usize) -> LocalAttentionBlock {
    block(cfg, format!("encoder.block{i}"))
}

fn block(cfg: &MspConfig, prefix: String) -> LocalAttentionBlock {
    LocalAttentionBlock { prefix, width: cfg.width, heads: cfg.heads, ln_eps: cfg.ln_eps }
}

/// Cross-attention (CA, CA++) or self-attention (SA) blocks of layer `l`.
fn decoder_block(cfg: &MspConfig, l: usize) -> LocalAttentionBlock {
    match cfg.arch {
        DecoderArch::Sa => block(cfg, format!("decoder.self{l}")),
        _ => block(cfg, format!("decoder.cross{l}")),
    }
}

fn refine_block(cfg: &MspConfig, l: usize) -> LocalAttentionBlock {
    block(cfg, format!("decoder.refine{l}"))
}

impl MspModel {
    pub fn init(config: &MspConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let c = cfg.width;
        let mut rng = stream(cfg.seed, &[tag::INIT]);
        let mut p = ParamStore::new();
        init_linear(&mut p, "encoder.embed", 6, c, true, &mut rng)?;
        for i in 0..cfg.encoder_blocks {
            encoder_block(cfg, i).init(&mut p, &mut rng)?;
        }
        p.insert("decoder.mask_token", Tensor::zeros(&[c]))?;
        init_linear(&mut p, "decoder.coord_embed", 3, c, false, &mut rng)?;
        for l in 0..cfg.decoder_blocks {
            if cfg.arch == DecoderArch::CaPlusPlus {
                refine_block(cfg, l).init(&mut p, &mut rng)?;
            }
            decoder_block(cfg, l).init(&mut p, &mut rng)?;
        }
        let shape_w = cfg.shape_head_width();
        if shape_w > 0 {
            init_linear(&mut p, "head.shape", c, shape_w, true, &mut rng)?;
        }
        if cfg.targets.has(Target::Color) {
            init_linear(&mut p, "head.color", c, 3, true, &mut rng)?;
        }
        if cfg.targets.has(Target::PointSet) {
            init_linear(&mut p, "head.pointset", c, 3 * cfg.pointset_k, true, &mut rng)?;
        }
        Ok(MspModel { config: config.clone(), params: p })
    }

    pub fn encoder_params(&self) -> ParamStore {
        self.params.filter_prefix(ENCODER_PREFIX)
    }
}

/// Per-point encoder input: offset from the centroid of the point's
/// neighborhood in `knn`, then RGB (zeros for colorless clouds). Only
/// translation-invariant geometry enters the encoder, so features cannot
/// key on where an object sits in the room.
fn encoder_input(cloud: &PointCloud, idx: &[usize], pos: &[Point], knn: &KnnIndex) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * 6);
    for (row, &i) in idx.iter().enumerate() {
        let nb = knn.row(row);
        let centroid = nb.iter().fold(Vector3::zeros(), |acc, &j| acc + pos[j].coords) / nb.len() as f64;
        let d = pos[row].coords - centroid;
        data.extend_from_slice(&[d.x, d.y, d.z]);
        match cloud.colors() {
            Some(rgb) => data.extend_from_slice(&rgb[i]),
            None => data.extend_from_slice(&[0.0; 3]),
        }
    }
    Tensor::matrix(idx.len(), 6, data).expect("row-major layout")
}

/// Encoder features `[|idx|, C]` for the points `idx` of `cloud`, which
/// attend only among themselves. `p` may bind either the online weights or
/// the EMA shadow (same names).
pub fn encode_points(cfg: &MspConfig, tape: &mut Tape, p: &Bound, cloud: &PointCloud, idx: &[usize]) -> Result<Var> {
    if idx.is_empty() {
        return Err(MspError::DegenerateMask("encoder input is empty".into()));
    }
    let pos: Vec<Point> = idx.iter().map(|&i| cloud.positions()[i]).collect();
    let knn = knn_search(&pos, &pos, cfg.k)?;
    let x = tape.constant(encoder_input(cloud, idx, &pos, &knn));
    let mut h = linear(tape, p, "encoder.embed", x, true)?;
    for i in 0..cfg.encoder_blocks {
        h = encoder_block(cfg, i).forward(tape, p, h, &pos, h, &pos, &knn)?;
    }
    Ok(h)
}

/// Encoder features over the remaining points of `mask`.
pub fn encode_remaining(
    cfg: &MspConfig,
    tape: &mut Tape,
    p: &Bound,
    cloud: &PointCloud,
    mask: &MaskResult,
) -> Result<Var> {
    if mask.remaining_idx.is_empty() {
        return Err(MspError::DegenerateMask("no remaining points to encode".into()));
    }
    encode_points(cfg, tape, p, cloud, &mask.remaining_idx)
}

/// `mask_token + coord_embed(p - center)` per masked position.
pub fn build_mask_queries(tape: &mut Tape, p: &Bound, center: &Point, positions: &[Point]) -> Result<Var> {
    let rel: Vec<f64> = positions
        .iter()
        .flat_map(|q| {
            let d = q - center;
            [d.x, d.y, d.z]
        })
        .collect();
    let rel = tape.constant(Tensor::matrix(positions.len(), 3, rel)?);
    let e = linear(tape, p, "decoder.coord_embed", rel, false)?;
    tape.add(e, p.get("decoder.mask_token")?)
}

/// Cross-attention decoding shared by CA and CA++. The first `refine`
/// layers refine the remaining features by self-attention before their
/// cross-attention block. Masked queries only ever attend to remaining
/// points, so masked outputs are independent of each other.
#[allow(clippy::too_many_arguments)]
pub fn decode_cross(
    cfg: &MspConfig,
    tape: &mut Tape,
    p: &Bound,
    queries: Var,
    query_pos: &[Point],
    remaining: Var,
    remaining_pos: &[Point],
    refine: usize,
) -> Result<(Var, KnnIndex)> {
    if remaining_pos.is_empty() {
        return Err(MspError::DegenerateMask("no remaining points for cross-attention".into()));
    }
    if refine > cfg.decoder_blocks {
        return Err(MspError::Contract(format!("{refine} refinement layers exceed depth {}", cfg.decoder_blocks)));
    }
    let knn_mr = knn_search(query_pos, remaining_pos, cfg.k)?;
    if query_pos.is_empty() {
        let empty = tape.constant(Tensor::zeros(&[0, cfg.width]));
        return Ok((empty, knn_mr));
    }
    let knn_rr = if refine > 0 { Some(knn_search(remaining_pos, remaining_pos, cfg.k)?) } else { None };
    let mut q = queries;
    let mut r = remaining;
    for l in 0..cfg.decoder_blocks {
        if let (true, Some(knn)) = (l < refine, &knn_rr) {
            r = refine_block(cfg, l).forward(tape, p, r, remaining_pos, r, remaining_pos, knn)?;
        }
        q = block(cfg, format!("decoder.cross{l}")).forward(tape, p, q, query_pos, r, remaining_pos, &knn_mr)?;
    }
    Ok((q, knn_mr))
}

pub fn decode_ca(
    cfg: &MspConfig,
    tape: &mut Tape,
    p: &Bound,
    queries: Var,
    query_pos: &[Point],
    remaining: Var,
    remaining_pos: &[Point],
) -> Result<(Var, KnnIndex)> {
    decode_cross(cfg, tape, p, queries, query_pos, remaining, remaining_pos, 0)
}

pub fn decode_ca_pp(
    cfg: &MspConfig,
    tape: &mut Tape,
    p: &Bound,
    queries: Var,
    query_pos: &[Point],
    remaining: Var,
    remaining_pos: &[Point],
) -> Result<(Var, KnnIndex)> {
    decode_cross(cfg, tape, p, queries, query_pos, remaining, remaining_pos, cfg.decoder_blocks)
}

/// Keypoints drawn for the SA decoder, as cloud indices (ascending).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaKeypoints {
    pub remaining: Vec<usize>,
    pub masked: Vec<usize>,
}

impl SaKeypoints {
    /// Union order used by the decoder: remaining keypoints, then masked.
    pub fn union(&self) -> Vec<usize> {
        self.remaining.iter().chain(&self.masked).copied().collect()
    }
}

/// Uniform sample of `count` points from the whole cloud, split by mask
/// membership. An attempt without masked keypoints is redrawn once.
pub fn sample_keypoints(cloud_len: usize, mask: &MaskResult, count: usize, seed: u64) -> Result<SaKeypoints> {
    if count < 2 {
        return Err(MspError::Contract("SA needs at least 2 keypoints".into()));
    }
    let flags = mask.masked_flags(cloud_len);
    for attempt in 0..2u64 {
        let mut rng = stream(seed, &[tag::KEYPOINTS, attempt]);
        let mut picked = fisher_yates_prefix(cloud_len, count.min(cloud_len), &mut rng);
        picked.sort_unstable();
        let (masked, remaining): (Vec<usize>, Vec<usize>) = picked.into_iter().partition(|&i| flags[i]);
        if !masked.is_empty() {
            return Ok(SaKeypoints { remaining, masked });
        }
    }
    Err(MspError::DegenerateMask("no masked point among the sampled keypoints".into()))
}

/// Self-attention decoding over sampled keypoints. Returns the keypoints,
/// the union k-NN graph (indices into `keypoints.union()`) and features of
/// the masked keypoints in `keypoints.masked` order.
#[allow(clippy::too_many_arguments)]
pub fn decode_sa(
    cfg: &MspConfig,
    tape: &mut Tape,
    p: &Bound,
    cloud: &PointCloud,
    mask: &MaskResult,
    remaining: Var,
    keypoint_count: usize,
    seed: u64,
) -> Result<(SaKeypoints, KnnIndex, Var)> {
    let kps = sample_keypoints(cloud.len(), mask, keypoint_count, seed)?;
    let rows: Vec<usize> = kps
        .remaining
        .iter()
        .map(|i| mask.remaining_idx.binary_search(i).expect("remaining keypoint is a remaining point"))
        .collect();
    let center = cloud.aabb().center();
    let masked_pos: Vec<Point> = kps.masked.iter().map(|&i| cloud.positions()[i]).collect();
    let queries = build_mask_queries(tape, p, &center, &masked_pos)?;
    let mut x = if rows.is_empty() {
        queries
    } else {
        let rf = tape.gather_rows(remaining, &rows)?;
        tape.concat_rows(&[rf, queries])?
    };
    let union = kps.union();
    let pos: Vec<Point> = union.iter().map(|&i| cloud.positions()[i]).collect();
    let knn = knn_search(&pos, &pos, cfg.k)?;
    for l in 0..cfg.decoder_blocks {
        x = decoder_block(cfg, l).forward(tape, p, x, &pos, x, &pos, &knn)?;
    }
    let n_r = kps.remaining.len();
    let masked_rows: Vec<usize> = (n_r..union.len()).collect();
    let out = tape.gather_rows(x, &masked_rows)?;
    Ok((kps, knn, out))
}

/// Decoder output for one scene: masked features plus which cloud points
/// they belong to (the supervised set).
#[derive(Debug, Clone)]
pub struct Decoded {
    pub features: Var,
    pub supervised: Vec<usize>,
    pub keypoints: Option<SaKeypoints>,
    pub graph: KnnIndex,
}

pub fn decode(
    cfg: &MspConfig,
    tape: &mut Tape,
    p: &Bound,
    cloud: &PointCloud,
    mask: &MaskResult,
    remaining: Var,
    keypoint_seed: u64,
) -> Result<Decoded> {
    match cfg.arch {
        DecoderArch::Sa => {
            let (kps, graph, features) = decode_sa(cfg, tape, p, cloud, mask, remaining, cfg.keypoints, keypoint_seed)?;
            Ok(Decoded { features, supervised: kps.masked.clone(), keypoints: Some(kps), graph })
        }
        arch => {
            let center = cloud.aabb().center();
            let qpos: Vec<Point> = mask.masked_idx.iter().map(|&i| cloud.positions()[i]).collect();
            let rpos: Vec<Point> = mask.remaining_idx.iter().map(|&i| cloud.positions()[i]).collect();
            let queries = build_mask_queries(tape, p, &center, &qpos)?;
            let refine = if arch == DecoderArch::CaPlusPlus { cfg.decoder_blocks } else { 0 };
            let (features, graph) = decode_cross(cfg, tape, p, queries, &qpos, remaining, &rpos, refine)?;
            Ok(Decoded { features, supervised: mask.masked_idx.clone(), keypoints: None, graph })
        }
    }
}

/// Raw head outputs for the supervised rows.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub sc_logits: Option<Var>,
    pub dsf: Option<Var>,
    pub color: Option<Var>,
    /// `[n, 3K]` center-relative offsets, `tanh` squashed and scaled by R.
    pub pointset: Option<Var>,
}

pub fn predict(cfg: &MspConfig, tape: &mut Tape, p: &Bound, features: Var) -> Result<HeadOutputs> {
    let mut out = HeadOutputs { sc_logits: None, dsf: None, color: None, pointset: None };
    if cfg.shape_head_width() > 0 {
        let shape = linear(tape, p, "head.shape", features, true)?;
        let mut col = 0;
        if cfg.targets.has(Target::Sc) {
            let w = crate::shape_context::descriptor_width(&cfg.sc_partitions);
            out.sc_logits = Some(tape.slice_cols(shape, 0, w)?);
            col = w;
        }
        if cfg.targets.has(Target::Dsf) {
            out.dsf = Some(tape.slice_cols(shape, col, cfg.width)?);
        }
    }
    if cfg.targets.has(Target::Color) {
        out.color = Some(linear(tape, p, "head.color", features, true)?);
    }
    if cfg.targets.has(Target::PointSet) {
        let raw = linear(tape, p, "head.pointset", features, true)?;
        let t = tape.tanh(raw);
        out.pointset = Some(tape.scale(t, cfg.pointset_radius));
    }
    Ok(out)
}
