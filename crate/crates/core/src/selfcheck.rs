//! Executable verification suites: every check recomputes its expectation
//! independently (reference loops, closed forms or finite differences) and
//! reports pass/fail with the measured quantity.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::config::{DecoderArch, MspConfig, Profile, RunConfig, Target, TargetSet};
use crate::error::Result;
use crate::masking::{apply_mask, apply_mask_allow_degenerate, masked_block_count, MaskSpec};
use crate::neural::{init_linear, knn_search, linear, Bound, EmaTracker, LocalAttentionBlock, ParamStore};
use crate::oracle::naive_shape_context;
use crate::pipeline::{
    build_mask_queries, decode, decode_cross, encode_remaining, load_checkpoint, loss_chamfer, loss_color, loss_dsf,
    loss_sc, pretrain, save_checkpoint, scene_loss, MspModel, PretrainOptions, TrainState,
};
use crate::probes::{pooled_leakage, LeakageReport};
use crate::rng::stream;
use crate::scene::{generate_scene, Point, PointCloud, SyntheticSceneSpec};
use crate::shape_context::{compute_multiscale_sc, default_partitions, descriptor_width};
use crate::tensor::{grad_check, Tape, Tensor, Var};

pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }

    fn from_result(name: impl Into<String>, r: Result<Check>) -> Check {
        let name = name.into();
        r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
        .collect()
}

/// Fast descriptors against the per-bin reference on `centers_per_scene`
/// points of each of `scenes` synthetic scenes, plus the 184-bin width.
pub fn descriptor_oracle(scenes: u64, centers_per_scene: usize) -> Check {
    let run = || -> Result<Check> {
        let parts = default_partitions();
        let width = descriptor_width(&parts);
        let mut compared = 0usize;
        let mut mismatched = 0usize;
        for s in 0..scenes {
            let cloud = generate_scene(&SyntheticSceneSpec {
                points_per_primitive: 96,
                extent: 1.2,
                seed: 7000 + s,
                ..SyntheticSceneSpec::default()
            })?;
            let mut rng = stream(s, &[0x5c]);
            // Half the centers on the cloud, half anywhere in its box.
            let aabb = *cloud.aabb();
            let centers: Vec<Point> = (0..centers_per_scene)
                .map(|i| {
                    if i % 2 == 0 {
                        cloud.positions()[rng.random_range(0..cloud.len())]
                    } else {
                        Point::from(std::array::from_fn::<f64, 3, _>(|a| rng.random_range(aabb.min[a]..=aabb.max[a])))
                    }
                })
                .collect();
            let fast = compute_multiscale_sc(&centers, cloud.positions(), &parts)?;
            for (i, c) in centers.iter().enumerate() {
                compared += 1;
                if fast.row(i) != naive_shape_context(c, cloud.positions(), &parts).as_slice() {
                    mismatched += 1;
                }
            }
        }
        Ok(Check::new(
            "descriptor oracle",
            mismatched == 0 && width == 184,
            format!("{compared} centers over {scenes} scenes, {mismatched} mismatched, width {width}"),
        ))
    };
    Check::from_result("descriptor oracle", run())
}

fn grad(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Check {
    match grad_check(f, inputs, GRAD_STEP, GRAD_TOL) {
        Ok(r) => Check::new(
            format!("grad {name}"),
            r.passed,
            format!("max rel error {:.2e} over {} coordinates", r.max_rel_error, r.checked),
        ),
        Err(e) => Check::new(format!("grad {name}"), false, format!("error: {e}")),
    }
}

/// Weighted sum of every output element with fixed random weights.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(uniform(&mut stream(seed, &[0x9e]), &shape, -1.0, 1.0));
    let m = tape.mul(v, w)?;
    Ok(tape.sum(m))
}

/// Finite-difference checks of each layer type the model is built from.
pub fn layer_gradients() -> Vec<Check> {
    let mut rng = stream(42, &[0x6c]);
    let x = uniform(&mut rng, &[4, 6], -1.5, 1.5);
    let mut checks = Vec::new();

    let mut lin = ParamStore::new();
    let built = init_linear(&mut lin, "fc", 6, 5, true, &mut rng);
    let fc_w = lin.get("fc.w").cloned();
    let fc_b = lin.get("fc.b").cloned();
    match (built, fc_w, fc_b) {
        (Ok(()), Ok(w), Ok(b)) => checks.push(grad("linear", &[x.clone(), w, b], |t, v| {
            let p = Bound::from_pairs([("fc.w".to_string(), v[1]), ("fc.b".to_string(), v[2])]);
            let o = linear(t, &p, "fc", v[0], true)?;
            project(t, o, 1)
        })),
        _ => checks.push(Check::new("grad linear", false, "could not build layer")),
    }

    let g = uniform(&mut rng, &[6], 0.5, 1.5);
    let b = uniform(&mut rng, &[6], -0.3, 0.3);
    checks.push(grad("layer norm", &[x.clone(), g, b], |t, v| {
        let o = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(t, o, 2)
    }));
    checks.push(grad("softmax", std::slice::from_ref(&x), |t, v| {
        let o = t.softmax_lastdim(v[0])?;
        project(t, o, 3)
    }));
    let off_zero =
        Tensor::new(vec![4, 6], x.data().iter().map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v }).collect())
            .expect("same shape");
    checks.push(grad("relu", &[off_zero], |t, v| {
        let o = t.relu(v[0]);
        project(t, o, 4)
    }));
    checks.push(grad("sigmoid and tanh", std::slice::from_ref(&x), |t, v| {
        let s = t.sigmoid(v[0]);
        let h = t.tanh(v[0]);
        let o = t.mul(s, h)?;
        project(t, o, 5)
    }));

    // The local attention block with every parameter perturbed off its
    // initialization.
    let block = LocalAttentionBlock::new("blk", 8, 2, 1e-5).expect("valid block");
    let mut store = ParamStore::new();
    if let Err(e) = block.init(&mut store, &mut rng) {
        checks.push(Check::new("grad attention block", false, format!("error: {e}")));
        return checks;
    }
    for (name, t) in store.iter_mut() {
        let around = if name.ends_with(".g") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = around + rng.random_range(-0.5..0.5);
        }
    }
    let qpos = random_points(&mut rng, 3);
    let kpos = random_points(&mut rng, 5);
    match knn_search(&qpos, &kpos, 3) {
        Ok(knn) => {
            let names: Vec<String> = store.names().map(str::to_string).collect();
            let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
            inputs.push(uniform(&mut rng, &[3, 8], -1.0, 1.0));
            inputs.push(uniform(&mut rng, &[5, 8], -1.0, 1.0));
            checks.push(grad("attention block", &inputs, |t, v| {
                let n = names.len();
                let p = Bound::from_pairs(names.iter().cloned().zip(v[..n].iter().copied()));
                let o = block.forward(t, &p, v[n], &qpos, v[n + 1], &kpos, &knn)?;
                project(t, o, 6)
            }));
        }
        Err(e) => checks.push(Check::new("grad attention block", false, format!("error: {e}"))),
    }

    let bits = Tensor::new(vec![4, 6], (0..24).map(|i| f64::from(i % 3 == 0)).collect()).expect("shape");
    let target = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    let sets: Vec<Vec<[f64; 3]>> =
        (0..4).map(|r| (0..=r).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()).collect();
    checks.push(grad("binary cross-entropy", std::slice::from_ref(&x), |t, v| loss_sc(t, v[0], &bits)));
    checks.push(grad("cosine", std::slice::from_ref(&x), |t, v| loss_dsf(t, v[0], &target)));
    let rgb = uniform(&mut rng, &[4, 3], 0.0, 1.0);
    checks.push(grad("color mse", &[uniform(&mut rng, &[4, 3], -1.0, 1.0)], |t, v| loss_color(t, v[0], &rgb)));
    checks.push(grad("chamfer", &[x], |t, v| loss_chamfer(t, v[0], &sets)));
    checks
}

/// A model small enough for exhaustive finite differences.
pub fn micro_config(arch: DecoderArch, targets: &[Target]) -> MspConfig {
    let mut c = MspConfig::profile(Profile::Desk);
    c.arch = arch;
    c.width = 8;
    c.heads = 2;
    c.encoder_blocks = 1;
    c.decoder_blocks = 1;
    c.k = 4;
    c.keypoints = 24;
    c.targets = TargetSet::new(targets);
    c.pointset_k = 4;
    c.pointset_radius = 0.3;
    c
}

fn micro_scene(seed: u64) -> Result<PointCloud> {
    generate_scene(&SyntheticSceneSpec { points_per_primitive: 10, extent: 0.6, seed, ..SyntheticSceneSpec::default() })
}

fn micro_mask_spec(seed: u64) -> MaskSpec {
    MaskSpec { ratio: 0.6, block_size: 0.3, seed }
}

fn model_gradient(name: String, cfg: &MspConfig) -> Check {
    let run = || -> Result<Check> {
        let model = MspModel::init(cfg)?;
        let shadow = model.encoder_params();
        let cloud = micro_scene(11)?;
        let mask = apply_mask(&cloud, &micro_mask_spec(11))?;
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
        Ok(grad(&name, &inputs, |t, v| {
            let p = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()));
            Ok(scene_loss(cfg, t, &p, &shadow, &cloud, &mask, 5)?.total)
        }))
    };
    Check::from_result(format!("grad {name}"), run())
}

/// End-to-end loss gradients per decoder architecture and per single target.
pub fn model_gradients() -> Vec<Check> {
    let mut checks = Vec::new();
    for arch in [DecoderArch::Ca, DecoderArch::CaPlusPlus, DecoderArch::Sa] {
        let cfg = micro_config(arch, &[Target::Sc, Target::Dsf, Target::Color]);
        checks.push(model_gradient(format!("model {}", arch), &cfg));
    }
    for t in [Target::Sc, Target::Dsf, Target::Color, Target::PointSet] {
        checks.push(model_gradient(format!("target {}", t.name()), &micro_config(DecoderArch::Sa, &[t])));
    }
    checks
}

/// Block index of `p` recomputed from the box without the grid code.
fn block_of(p: &Point, min: &Point, max: &Point, w: f64) -> [i64; 3] {
    std::array::from_fn(|a| {
        let blocks = (((max[a] - min[a]) / w).ceil() as i64).max(1);
        (((p[a] - min[a]) / w).floor() as i64).min(blocks - 1)
    })
}

/// Over `seeds` random clouds: the masked block count is `round(r * B)`
/// and the two index sets partition the cloud along block membership.
pub fn masking_exactness(seeds: u64, ratio: f64, block: f64) -> Check {
    let run = || -> Result<Check> {
        let mut failures = Vec::new();
        for seed in 0..seeds {
            let mut rng = stream(seed, &[0x3a5c]);
            let n = rng.random_range(20..400);
            let scale = rng.random_range(0.5..3.0);
            let pts: Vec<Point> = random_points(&mut rng, n).into_iter().map(|p| p * scale).collect();
            let cloud = PointCloud::new(pts)?;
            let m = apply_mask_allow_degenerate(&cloud, &MaskSpec { ratio, block_size: block, seed })?;
            let (min, max) = (cloud.aabb().min, cloud.aabb().max);
            let occupied: BTreeSet<[i64; 3]> =
                cloud.positions().iter().map(|p| block_of(p, &min, &max, block)).collect();
            let want = ((ratio * occupied.len() as f64) + 0.5).floor() as usize;
            let mut all: Vec<usize> = m.masked_idx.iter().chain(&m.remaining_idx).copied().collect();
            all.sort_unstable();
            let partition = all.iter().copied().eq(0..n);
            let masked: BTreeSet<usize> = m.masked_idx.iter().copied().collect();
            let by_block = cloud
                .positions()
                .iter()
                .enumerate()
                .all(|(i, p)| m.masked_blocks.contains(&block_of(p, &min, &max, block)) == masked.contains(&i));
            if m.masked_blocks.len() != want || !partition || !by_block {
                failures.push(seed);
            }
        }
        Ok(Check::new(
            "masking exactness",
            failures.is_empty() && masked_block_count(0.6, 10) == 6,
            format!("{seeds} seeds at r={ratio} w={block}, failing seeds {failures:?}"),
        ))
    };
    Check::from_result("masking exactness", run())
}

/// 100 updates at decay 0.999 from 0 toward a constant 1.
pub fn ema_closed_form() -> Check {
    let run = || -> Result<Check> {
        let mut online = ParamStore::new();
        online.insert("encoder.w", Tensor::zeros(&[3]))?;
        let mut ema = EmaTracker::new(&online, "encoder.", 0.999)?;
        online.get_mut("encoder.w").expect("inserted").data_mut().fill(1.0);
        for _ in 0..100 {
            ema.update(&online)?;
        }
        let want = 1.0 - 0.999f64.powi(100);
        let err =
            ema.shadow.get("encoder.w").expect("tracked").data().iter().map(|v| (v - want).abs()).fold(0.0, f64::max);
        Ok(Check::new("ema closed form", err <= 1e-12, format!("target {want:.15}, max error {err:.2e}")))
    };
    Check::from_result("ema closed form", run())
}

/// Analytic values of the three reconstruction losses.
pub fn loss_units() -> Check {
    let run = || -> Result<Check> {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 1, vec![0.0])?);
        let bce = loss_sc(&mut tape, z, &Tensor::matrix(1, 1, vec![1.0])?)?;
        let bce = tape.scalar(bce);

        let row = [0.3, -1.2, 0.7];
        let ortho = [1.2, 0.3, 0.0];
        let mut cos = Vec::new();
        for target in [row, ortho, row.map(|v| -v)] {
            let p = tape.constant(Tensor::matrix(1, 3, row.to_vec())?);
            let l = loss_dsf(&mut tape, p, &Tensor::matrix(1, 3, target.to_vec())?)?;
            cos.push(tape.scalar(l));
        }
        // One predicted and one target point a unit apart: 1 each way.
        let p = tape.constant(Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0])?);
        let chamfer = loss_chamfer(&mut tape, p, &[vec![[1.0, 0.0, 0.0]]])?;
        let chamfer = tape.scalar(chamfer);

        let errs = [
            (bce - std::f64::consts::LN_2).abs(),
            cos[0].abs(),
            (cos[1] - 1.0).abs(),
            (cos[2] - 2.0).abs(),
            (chamfer - 2.0).abs(),
        ];
        let worst = errs.iter().copied().fold(0.0, f64::max);
        Ok(Check::new(
            "loss unit values",
            worst <= 1e-9,
            format!("bce {bce:.12}, cosine {:.3}/{:.3}/{:.3}, chamfer {chamfer:.12}", cos[0], cos[1], cos[2]),
        ))
    };
    Check::from_result("loss unit values", run())
}

/// Leakage recall pooled over the desk profile's probe scenes.
pub fn leakage_report(seeds: usize, keep: &[f64]) -> Result<LeakageReport> {
    let run = RunConfig::new(Profile::Desk);
    let scenes = run.data.probe_scenes(run.msp.seed, run.probe.scenes)?;
    let seeds: Vec<u64> = (0..seeds as u64).collect();
    pooled_leakage(&run.msp, &scenes, keep, &seeds)
}

pub fn leakage_monotonicity(min_centers: usize, seeds: usize, margin: f64) -> Check {
    let run = || -> Result<Check> {
        let rep = leakage_report(seeds, &[1.0, 0.25, 0.05])?;
        let r: Vec<f64> = rep.rows.iter().map(|row| row.mean_recall).collect();
        let ok = r.windows(2).all(|w| w[0] - w[1] >= margin) && rep.rows[0].n_centers >= min_centers;
        Ok(Check::new(
            "leakage monotonicity",
            ok,
            format!(
                "recall {:.4} -> {:.4} -> {:.4} over {} centers, {seeds} seeds (margin {margin})",
                r[0], r[1], r[2], rep.rows[0].n_centers
            ),
        ))
    };
    Check::from_result("leakage monotonicity", run())
}

fn cross_outputs(
    cfg: &MspConfig,
    params: &ParamStore,
    queries: &Tensor,
    qpos: &[Point],
    rem: &Tensor,
    rpos: &[Point],
) -> Result<Tensor> {
    let refine = if cfg.arch == DecoderArch::CaPlusPlus { cfg.decoder_blocks } else { 0 };
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let q = tape.constant(queries.clone());
    let r = tape.constant(rem.clone());
    let (out, _) = decode_cross(cfg, &mut tape, &p, q, qpos, r, rpos, refine)?;
    Ok(tape.value(out).clone())
}

/// Cross-attention decoders: perturbing one masked query leaves every other
/// masked output bit-identical.
pub fn cross_attention_independence(arch: DecoderArch) -> Check {
    let name = format!("{} query independence", arch);
    let run = || -> Result<Check> {
        let mut cfg = micro_config(arch, &[Target::Sc]);
        cfg.decoder_blocks = 2;
        let params = MspModel::init(&cfg)?.params;
        let mut rng = stream(30, &[0x1d]);
        let (nq, nr) = (6, 10);
        let qpos = random_points(&mut rng, nq);
        let rpos = random_points(&mut rng, nr);
        let queries = uniform(&mut rng, &[nq, cfg.width], -1.0, 1.0);
        let rem = uniform(&mut rng, &[nr, cfg.width], -1.0, 1.0);
        let base = cross_outputs(&cfg, &params, &queries, &qpos, &rem, &rpos)?;
        let mut leaks = 0usize;
        let mut largest_self = 0.0f64;
        for j in 0..nq {
            let mut changed = queries.clone();
            for v in &mut changed.data_mut()[j * cfg.width..(j + 1) * cfg.width] {
                *v += rng.random_range(-3.0..3.0);
            }
            let out = cross_outputs(&cfg, &params, &changed, &qpos, &rem, &rpos)?;
            leaks += (0..nq).filter(|&i| i != j && out.row(i) != base.row(i)).count();
            let own = out.row(j).iter().zip(base.row(j)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            largest_self = largest_self.max(own);
        }
        Ok(Check::new(
            name.clone(),
            leaks == 0 && largest_self > 0.0,
            format!("{leaks} changed foreign rows over {nq} perturbations; own-row change up to {largest_self:.3e}"),
        ))
    };
    Check::from_result(name.clone(), run())
}

/// SA decoder: the attention graph only indexes sampled keypoints, which
/// are split correctly by mask membership.
pub fn sa_graph_on_keypoints() -> Check {
    let run = || -> Result<Check> {
        let mut cfg = micro_config(DecoderArch::Sa, &[Target::Sc]);
        cfg.keypoints = 12;
        let params = MspModel::init(&cfg)?.params;
        let mut bad = 0usize;
        for seed in 0..10 {
            let cloud = micro_scene(seed)?;
            let mask = apply_mask(&cloud, &micro_mask_spec(seed))?;
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false);
            let rem = encode_remaining(&cfg, &mut tape, &p, &cloud, &mask)?;
            let d = decode(&cfg, &mut tape, &p, &cloud, &mask, rem, seed)?;
            let Some(kps) = d.keypoints.as_ref() else {
                bad += 1;
                continue;
            };
            let masked: BTreeSet<usize> = mask.masked_idx.iter().copied().collect();
            let union = kps.union();
            let ok = d.graph.queries() == union.len()
                && d.graph.max_index().is_none_or(|m| m < union.len())
                && kps.masked.iter().all(|i| masked.contains(i))
                && kps.remaining.iter().all(|i| !masked.contains(i))
                && d.supervised == kps.masked
                && union.len() == cfg.keypoints.min(cloud.len());
            bad += usize::from(!ok);
        }
        Ok(Check::new("SA graph on keypoints", bad == 0, format!("{bad} of 10 scenes violate the keypoint graph")))
    };
    Check::from_result("SA graph on keypoints", run())
}

/// Mask queries carry no content beyond the shared token and position.
pub fn mask_query_sharing() -> Check {
    let run = || -> Result<Check> {
        let cfg = micro_config(DecoderArch::Ca, &[Target::Sc]);
        let params = MspModel::init(&cfg)?.params;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let a = Point::new(0.1, 0.2, 0.3);
        let q = build_mask_queries(&mut tape, &p, &Point::origin(), &[a, Point::new(0.9, 0.1, 0.4), a])?;
        let same = tape.value(q).row(0) == tape.value(q).row(2);
        Ok(Check::new("mask query sharing", same, "co-located masked points get identical queries"))
    };
    Check::from_result("mask query sharing", run())
}

/// Short training configuration on micro scenes.
pub fn micro_run(arch: DecoderArch) -> RunConfig {
    let mut run = RunConfig::new(Profile::Desk);
    run.msp = micro_config(arch, &[Target::Sc, Target::Dsf, Target::Color]);
    run.msp.epochs = 3;
    run.msp.batch_size = 2;
    run.msp.checkpoint_every = 2;
    run.data.scenes = 4;
    run.data.scene.points_per_primitive = 10;
    run.data.scene.extent = 0.6;
    run
}

/// save -> load -> save is byte-identical, and a run stopped, checkpointed
/// and resumed matches an unbroken one step for step.
pub fn persistence(work_dir: &Path) -> Check {
    let run = || -> Result<Check> {
        let cfg = micro_run(DecoderArch::CaPlusPlus);
        let scenes: Vec<PointCloud> = (0..cfg.data.scenes as u64).map(micro_scene).collect::<Result<_>>()?;
        let mut whole = TrainState::new(&cfg)?;
        let full = pretrain(&mut whole, &scenes, &PretrainOptions::default())?;

        let dir = work_dir.join("persistence");
        let opts = |stop| PretrainOptions { out_dir: Some(dir.clone()), stop_at: stop };
        let mut first = TrainState::new(&cfg)?;
        let head = pretrain(&mut first, &scenes, &opts(Some(3)))?;
        let a = dir.join("last.msp");
        let b = dir.join("resaved.msp");
        let mut resumed = load_checkpoint(&a)?;
        save_checkpoint(&resumed, &b)?;
        let read = |p: &Path| std::fs::read(p).map_err(|e| crate::MspError::io(p, e));
        let bytes_equal = read(&a)? == read(&b)?;
        let tail = pretrain(&mut resumed, &scenes, &opts(None))?;
        let joined: Vec<u64> = head.iter().chain(&tail).map(|m| m.loss_total.to_bits()).collect();
        let unbroken: Vec<u64> = full.iter().map(|m| m.loss_total.to_bits()).collect();
        let same_run = joined == unbroken
            && resumed.model.params.checksum() == whole.model.params.checksum()
            && resumed.ema.shadow.checksum() == whole.ema.shadow.checksum();
        Ok(Check::new(
            "persistence",
            bytes_equal && same_run,
            format!(
                "resave identical: {bytes_equal}; resumed {} + {} steps match unbroken {}: {same_run}",
                head.len(),
                tail.len(),
                full.len()
            ),
        ))
    };
    Check::from_result("persistence", run())
}

/// Everything short enough for routine use; long training experiments are
/// left to the dedicated commands.
pub fn run_all(work_dir: &Path) -> Vec<Check> {
    let mut checks = vec![descriptor_oracle(20, 50)];
    checks.extend(layer_gradients());
    checks.extend(model_gradients());
    checks.push(masking_exactness(100, 0.6, 0.3));
    checks.push(ema_closed_form());
    checks.push(loss_units());
    checks.push(leakage_monotonicity(100, 5, 0.05));
    checks.push(mask_query_sharing());
    checks.push(cross_attention_independence(DecoderArch::Ca));
    checks.push(cross_attention_independence(DecoderArch::CaPlusPlus));
    checks.push(sa_graph_on_keypoints());
    checks.push(persistence(work_dir));
    checks
}
