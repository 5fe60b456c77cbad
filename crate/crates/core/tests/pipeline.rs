//! The pretext task end to end: encoder, decoders, targets, losses, the
//! training loop and checkpoints.

mod common;

use std::collections::BTreeSet;

use common::{micro, micro_mask, micro_run, micro_scene, micro_scenes};
use msp_core::config::{DecoderArch, Target};
use msp_core::masking::MaskResult;
use msp_core::neural::{Bound, ParamStore};
use msp_core::oracle::{dense_attention, naive_shape_context};
use msp_core::pipeline::*;
use msp_core::scene::{Point, PointCloud};
use msp_core::tensor::{grad_check, Tape, Tensor};
use msp_core::MspError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
        .collect()
}

const ARCHS: [DecoderArch; 3] = [DecoderArch::Ca, DecoderArch::CaPlusPlus, DecoderArch::Sa];

// ---------------------------------------------------------------- encoder

#[test]
fn encoder_rows_follow_input_permutation() {
    let cfg = micro(DecoderArch::Ca, &[Target::Sc]);
    let model = MspModel::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Random continuous positions: no distance ties, so neighbor order is
    // unaffected by index order.
    let cloud = PointCloud::new(random_points(&mut rng, 30)).unwrap();
    let idx: Vec<usize> = (0..30).collect();
    let mut perm = idx.clone();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let run = |order: &[usize]| {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let f = encode_points(&cfg, &mut tape, &p, &cloud, order).unwrap();
        tape.value(f).clone()
    };
    let base = run(&idx);
    let permuted = run(&perm);
    for (row, &src) in perm.iter().enumerate() {
        assert_eq!(permuted.row(row), base.row(src));
    }
    assert_eq!(run(&idx), base, "repeat evaluation is bit-identical");
}

#[test]
fn single_remaining_point_attends_to_itself() {
    let cfg = micro(DecoderArch::Ca, &[Target::Sc]);
    let model = MspModel::init(&cfg).unwrap();
    let cloud = micro_scene(1);
    let i = 7;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let f = encode_points(&cfg, &mut tape, &p, &cloud, &[i]).unwrap();

    // Independent path: embedding by hand (a lone point is its own
    // neighborhood centroid, so the offset is zero), then the dense block
    // oracle with a one-element neighborhood.
    let q = cloud.positions()[i];
    let rgb = cloud.colors().unwrap()[i];
    let x = [0.0, 0.0, 0.0, rgb[0], rgb[1], rgb[2]];
    let w = model.params.get("encoder.embed.w").unwrap();
    let b = model.params.get("encoder.embed.b").unwrap();
    let emb: Vec<f64> = (0..cfg.width).map(|j| b.data()[j] + (0..6).map(|r| x[r] * w.at(r, j)).sum::<f64>()).collect();
    let mut h = Tensor::matrix(1, cfg.width, emb).unwrap();
    for blk in 0..cfg.encoder_blocks {
        h = dense_attention(
            &model.params,
            &format!("encoder.block{blk}"),
            cfg.heads,
            cfg.ln_eps,
            &h,
            &[q],
            &h,
            &[q],
            &[vec![0]],
        )
        .unwrap();
    }
    assert!(tape.value(f).max_abs_diff(&h) < 1e-10);
}

#[test]
fn empty_remaining_set_is_degenerate() {
    let cfg = micro(DecoderArch::Ca, &[Target::Sc]);
    let model = MspModel::init(&cfg).unwrap();
    let cloud = micro_scene(0);
    let mask =
        MaskResult { masked_idx: (0..cloud.len()).collect(), remaining_idx: vec![], ..MaskResult::unmasked(&cloud) };
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    assert!(matches!(encode_remaining(&cfg, &mut tape, &p, &cloud, &mask), Err(MspError::DegenerateMask(_))));
}

// ------------------------------------------------------------ mask queries

#[test]
fn mask_queries_share_the_token() {
    let cfg = micro(DecoderArch::Ca, &[Target::Sc]);
    let mut params = MspModel::init(&cfg).unwrap().params;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let token: Vec<f64> = (0..cfg.width).map(|_| rng.random_range(-1.0..1.0)).collect();
    params.get_mut("decoder.mask_token").unwrap().data_mut().copy_from_slice(&token);
    let center = Point::new(0.5, 0.5, 0.5);
    let pos = vec![Point::new(0.1, 0.2, 0.3), Point::new(0.9, 0.1, 0.4), Point::new(0.1, 0.2, 0.3)];

    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let q = build_mask_queries(&mut tape, &p, &center, &pos).unwrap();
    assert_eq!(tape.value(q).row(0), tape.value(q).row(2));

    params.get_mut("decoder.coord_embed.w").unwrap().data_mut().fill(0.0);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let q = build_mask_queries(&mut tape, &p, &center, &pos).unwrap();
    for i in 0..3 {
        assert_eq!(tape.value(q).row(i), &token[..]);
    }
}

#[test]
fn mask_token_gradient_is_sum_over_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pos = random_points(&mut rng, 5);
    let weights = random_matrix(&mut rng, 5, 8);
    let inputs = vec![random_matrix(&mut rng, 3, 8), Tensor::zeros(&[8])];
    let f = |tape: &mut Tape, v: &[msp_core::tensor::Var]| {
        let p =
            Bound::from_pairs([("decoder.coord_embed.w".to_string(), v[0]), ("decoder.mask_token".to_string(), v[1])]);
        let q = build_mask_queries(tape, &p, &Point::origin(), &pos)?;
        let w = tape.constant(weights.clone());
        let m = tape.mul(q, w)?;
        Ok(tape.sum(m))
    };
    let report = grad_check(f, &inputs, 1e-6, 1e-9).unwrap();
    assert!(report.passed, "{report:?}");

    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let g = tape.grad(vars[1]);
    for c in 0..8 {
        let col: f64 = (0..5).map(|r| weights.at(r, c)).sum();
        assert!((g.data()[c] - col).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------- decoders

/// Cross-decoder output for constant queries and remaining features.
fn cross_outputs(
    cfg: &msp_core::config::MspConfig,
    params: &ParamStore,
    queries: &Tensor,
    qpos: &[Point],
    rem: &Tensor,
    rpos: &[Point],
    refine: usize,
) -> Tensor {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let q = tape.constant(queries.clone());
    let r = tape.constant(rem.clone());
    let (out, graph) = decode_cross(cfg, &mut tape, &p, q, qpos, r, rpos, refine).unwrap();
    assert!(graph.idx.iter().all(|&i| i < rpos.len()), "keys are remaining points only");
    tape.value(out).clone()
}

#[test]
fn masked_outputs_are_independent_in_cross_attention() {
    for arch in [DecoderArch::Ca, DecoderArch::CaPlusPlus] {
        let mut cfg = micro(arch, &[Target::Sc]);
        cfg.decoder_blocks = 2;
        let params = MspModel::init(&cfg).unwrap().params;
        let refine = if arch == DecoderArch::CaPlusPlus { 2 } else { 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let qpos = random_points(&mut rng, 6);
        let rpos = random_points(&mut rng, 10);
        let queries = random_matrix(&mut rng, 6, cfg.width);
        let rem = random_matrix(&mut rng, 10, cfg.width);
        let base = cross_outputs(&cfg, &params, &queries, &qpos, &rem, &rpos, refine);
        for j in 0..6 {
            for zero in [false, true] {
                let mut changed = queries.clone();
                let row = &mut changed.data_mut()[j * cfg.width..(j + 1) * cfg.width];
                for v in row.iter_mut() {
                    *v = if zero { 0.0 } else { *v + rng.random_range(-3.0..3.0) };
                }
                let out = cross_outputs(&cfg, &params, &changed, &qpos, &rem, &rpos, refine);
                for i in (0..6).filter(|&i| i != j) {
                    assert_eq!(out.row(i), base.row(i), "{arch:?}: query {j} leaked into {i}");
                }
            }
        }
    }
}

#[test]
fn cross_decoders_on_zero_queries_return_empty() {
    for arch in [DecoderArch::Ca, DecoderArch::CaPlusPlus] {
        let cfg = micro(arch, &[Target::Sc]);
        let params = MspModel::init(&cfg).unwrap().params;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rpos = random_points(&mut rng, 5);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let q = tape.constant(Tensor::zeros(&[0, cfg.width]));
        let r = tape.constant(random_matrix(&mut rng, 5, cfg.width));
        let (out, _) = if arch == DecoderArch::Ca {
            decode_ca(&cfg, &mut tape, &p, q, &[], r, &rpos).unwrap()
        } else {
            decode_ca_pp(&cfg, &mut tape, &p, q, &[], r, &rpos).unwrap()
        };
        assert_eq!(tape.shape(out), &[0, cfg.width]);
    }
}

#[test]
fn identity_refinement_reduces_ca_pp_to_ca() {
    let mut cfg = micro(DecoderArch::CaPlusPlus, &[Target::Sc]);
    cfg.decoder_blocks = 2;
    cfg.ln_eps = 0.0;
    let mut params = MspModel::init(&cfg).unwrap().params;
    // Refinement blocks whose attention and feed-forward contribute nothing,
    // with unit norms: they map layer-normalized rows to themselves.
    for l in 0..2 {
        for part in ["o.w", "o.b", "ff2.w", "ff2.b"] {
            params.get_mut(&format!("decoder.refine{l}.{part}")).unwrap().data_mut().fill(0.0);
        }
    }
    let cloud = micro_scene(3);
    let mask = micro_mask(&cloud, 3);
    let qpos: Vec<Point> = mask.masked_idx.iter().map(|&i| cloud.positions()[i]).collect();
    let rpos: Vec<Point> = mask.remaining_idx.iter().map(|&i| cloud.positions()[i]).collect();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let rem = encode_remaining(&cfg, &mut tape, &p, &cloud, &mask).unwrap();
    let q = build_mask_queries(&mut tape, &p, &cloud.aabb().center(), &qpos).unwrap();
    let (pp, _) = decode_ca_pp(&cfg, &mut tape, &p, q, &qpos, rem, &rpos).unwrap();
    let (ca, _) = decode_ca(&cfg, &mut tape, &p, q, &qpos, rem, &rpos).unwrap();
    let diff = tape.value(pp).max_abs_diff(tape.value(ca));
    assert!(diff <= 1e-10, "{diff}");
}

#[test]
fn sa_graph_stays_on_keypoints() {
    let mut cfg = micro(DecoderArch::Sa, &[Target::Sc]);
    cfg.keypoints = 12;
    let params = MspModel::init(&cfg).unwrap().params;
    let cloud = micro_scene(5);
    let mask = micro_mask(&cloud, 5);
    let run = |cloud: &PointCloud| {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let rem = encode_remaining(&cfg, &mut tape, &p, cloud, &mask).unwrap();
        let d = decode(&cfg, &mut tape, &p, cloud, &mask, rem, 99).unwrap();
        (d.clone(), tape.value(d.features).clone())
    };
    let (d, out) = run(&cloud);
    let kps = d.keypoints.clone().unwrap();
    let union = kps.union();
    assert_eq!(union.len(), 12);
    assert!(d.graph.idx.iter().all(|&i| i < union.len()));
    assert_eq!(d.supervised, kps.masked);
    let masked: BTreeSet<usize> = mask.masked_idx.iter().copied().collect();
    assert!(kps.masked.iter().all(|i| masked.contains(i)));
    assert!(kps.remaining.iter().all(|i| !masked.contains(i)));

    // Moving a masked point that was not sampled (and does not span the
    // bounding box) must not change any decoder output.
    let outside: Vec<usize> = mask.masked_idx.iter().copied().filter(|i| !union.contains(i)).collect();
    let aabb = *cloud.aabb();
    let movable = outside
        .into_iter()
        .find(|&i| {
            let p = cloud.positions()[i];
            (0..3).all(|a| p[a] > aabb.min[a] + 0.02 && p[a] < aabb.max[a] - 0.02)
        })
        .expect("an interior masked point outside the keypoints");
    let mut pos = cloud.positions().to_vec();
    pos[movable].x += 0.01;
    let moved = PointCloud::new(pos).unwrap().with_colors(cloud.colors().unwrap().to_vec()).unwrap();
    assert_eq!(moved.aabb(), cloud.aabb());
    let (d2, out2) = run(&moved);
    assert_eq!(d2.keypoints, d.keypoints);
    assert_eq!(out2, out);
}

#[test]
fn sa_keypoints_saturate_and_repeat() {
    let cloud = micro_scene(2);
    let mask = micro_mask(&cloud, 2);
    let all = sample_keypoints(cloud.len(), &mask, cloud.len() + 10, 4).unwrap();
    assert_eq!(all.masked, mask.masked_idx);
    assert_eq!(all.remaining, mask.remaining_idx);
    assert_eq!(
        sample_keypoints(cloud.len(), &mask, 9, 4).unwrap(),
        sample_keypoints(cloud.len(), &mask, 9, 4).unwrap()
    );
    assert!(sample_keypoints(cloud.len(), &mask, 1, 4).is_err());
}

#[test]
fn sa_masked_share_matches_binomial_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cloud = PointCloud::new(random_points(&mut rng, 2000)).unwrap();
    let mask =
        msp_core::masking::apply_mask(&cloud, &msp_core::masking::MaskSpec { ratio: 0.6, block_size: 0.3, seed: 1 })
            .unwrap();
    let p = mask.masked_idx.len() as f64 / cloud.len() as f64;
    let count = 100;
    let seeds = 100;
    let mut masked = 0usize;
    for s in 0..seeds {
        let k = sample_keypoints(cloud.len(), &mask, count, s).unwrap();
        assert_eq!(k.masked.len() + k.remaining.len(), count);
        masked += k.masked.len();
    }
    let n = (count as u64 * seeds) as f64;
    let share = masked as f64 / n;
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!((share - p).abs() <= 3.0 * sigma, "share {share} vs p {p} (sigma {sigma})");
}

// ----------------------------------------------------------------- targets

#[test]
fn targets_match_their_definitions() {
    let cfg = micro(DecoderArch::Ca, &[Target::Sc, Target::Dsf, Target::Color, Target::PointSet]);
    let model = MspModel::init(&cfg).unwrap();
    let cloud = micro_scene(6);
    let points: Vec<usize> = (0..cloud.len()).step_by(3).collect();
    let shadow = model.encoder_params();
    let t = compute_targets(&cfg, &cloud, &points, &shadow).unwrap();

    let sc = t.sc.unwrap();
    for (row, &i) in points.iter().enumerate() {
        let want: Vec<f64> = naive_shape_context(&cloud.positions()[i], cloud.positions(), &cfg.sc_partitions)
            .into_iter()
            .map(f64::from)
            .collect();
        assert_eq!(sc.row(row), &want[..]);
    }

    let full = dsf_features(&cfg, &shadow, &cloud).unwrap();
    assert_eq!(t.dsf.unwrap(), full.gather_rows(&points));

    let color = t.color.unwrap();
    for (row, &i) in points.iter().enumerate() {
        assert_eq!(color.row(row), &cloud.colors().unwrap()[i][..]);
    }

    let sets = t.pointset.unwrap();
    for (set, &i) in sets.iter().zip(&points) {
        let c = cloud.positions()[i];
        let mut near: Vec<(f64, usize)> = (0..cloud.len())
            .filter(|&j| j != i)
            .map(|j| ((cloud.positions()[j] - c).norm(), j))
            .filter(|&(d, _)| d < cfg.pointset_radius)
            .collect();
        near.sort_by(|a, b| a.partial_cmp(b).unwrap());
        near.truncate(cfg.pointset_k);
        assert_eq!(set.len(), near.len());
        for (off, (_, j)) in set.iter().zip(near) {
            let d = cloud.positions()[j] - c;
            assert_eq!(off, &[d.x, d.y, d.z]);
        }
    }

    let plain = PointCloud::new(cloud.positions().to_vec()).unwrap();
    assert!(matches!(compute_targets(&cfg, &plain, &points, &shadow), Err(MspError::Config(_))));
}

#[test]
fn zero_decay_ema_copies_online_encoder() {
    let mut run = micro_run(DecoderArch::Ca);
    run.msp.ema_decay = 0.0;
    let scenes = micro_scenes(2);
    let mut state = TrainState::new(&run).unwrap();
    train_step(&mut state, &scenes, &[0, 1], 1e-2).unwrap();
    let online = state.model.encoder_params();
    assert_eq!(state.ema.shadow.checksum(), {
        let mut o = online.clone();
        for (_, t) in o.iter_mut() {
            t.set_requires_grad(false);
        }
        o.checksum()
    });
    let cloud = &scenes[0];
    let a = dsf_features(state.msp(), &state.ema.shadow, cloud).unwrap();
    let b = dsf_features(state.msp(), &online, cloud).unwrap();
    assert_eq!(a, b);
    assert!(state.ema.shadow.iter().all(|(_, t)| t.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0))));
}

// ------------------------------------------------------------------ losses

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_match_scalar_loops(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_matrix(&mut rng, rows, cols);
        let bits = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| f64::from(rng.random_bool(0.3))).collect()).unwrap();
        let pred = random_matrix(&mut rng, rows, cols);
        let target = random_matrix(&mut rng, rows, cols);
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let bce = loss_sc(&mut tape, l, &bits).unwrap();
        prop_assert!((tape.scalar(bce) - msp_core::oracle::bce_loop(logits.data(), bits.data())).abs() <= 1e-12);
        let p = tape.constant(pred.clone());
        let mse = loss_color(&mut tape, p, &target).unwrap();
        prop_assert!((tape.scalar(mse) - msp_core::oracle::mse_loop(pred.data(), target.data())).abs() <= 1e-12);
        let cos = loss_dsf(&mut tape, p, &target).unwrap();
        let want = msp_core::oracle::cosine_loop(pred.data(), target.data(), cols).unwrap();
        prop_assert!((tape.scalar(cos) - want).abs() <= 1e-12);
    }
}

#[test]
fn chamfer_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = 4;
    let pred = random_matrix(&mut rng, 3, 3 * k);
    let targets: Vec<Vec<[f64; 3]>> =
        (0..3).map(|i| (0..i + 2).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()).collect();
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = loss_chamfer(&mut tape, p, &targets).unwrap();
    let want: f64 = (0..3)
        .map(|i| {
            let set: Vec<[f64; 3]> = pred.row(i).chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            msp_core::oracle::chamfer_pair(&set, &targets[i])
        })
        .sum::<f64>()
        / 3.0;
    assert!((tape.scalar(l) - want).abs() < 1e-12);
}

#[test]
fn total_loss_is_weighted_sum_of_parts() {
    let all = [Target::Sc, Target::Dsf, Target::Color, Target::PointSet];
    for arch in ARCHS {
        let mut cfg = micro(arch, &all);
        cfg.targets.set_weight(Target::Color, 0.5);
        cfg.targets.set_weight(Target::PointSet, 2.0);
        let model = MspModel::init(&cfg).unwrap();
        let cloud = micro_scene(7);
        let mask = micro_mask(&cloud, 7);
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let sl = scene_loss(&cfg, &mut tape, &p, &model.encoder_params(), &cloud, &mask, 3).unwrap();
        let sum: f64 = all.iter().map(|&t| cfg.targets.weight(t) * tape.scalar(sl.parts[t as usize].unwrap())).sum();
        assert!((tape.scalar(sl.total) - sum).abs() <= 1e-9);
    }
    for t in all {
        let cfg = micro(DecoderArch::Ca, &[t]);
        let model = MspModel::init(&cfg).unwrap();
        let cloud = micro_scene(7);
        let mask = micro_mask(&cloud, 7);
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let sl = scene_loss(&cfg, &mut tape, &p, &model.encoder_params(), &cloud, &mask, 3).unwrap();
        assert_eq!(tape.scalar(sl.total), tape.scalar(sl.parts[t as usize].unwrap()));
    }
}

#[test]
fn train_metrics_decompose() {
    let mut run = micro_run(DecoderArch::Sa);
    run.msp.targets = msp_core::config::TargetSet::new(&[Target::Sc, Target::Dsf, Target::Color, Target::PointSet]);
    let scenes = micro_scenes(3);
    let mut state = TrainState::new(&run).unwrap();
    for step in 0..3 {
        let m = train_step(&mut state, &scenes, &[0, 1, 2], 1e-3).unwrap();
        let sum: f64 = m.losses.iter().map(|l| l.unwrap()).sum();
        assert!((m.loss_total - sum).abs() <= 1e-9, "step {step}");
        assert_eq!(m.step, step + 1);
    }
}

// -------------------------------------------------- end-to-end gradients

fn end_to_end_grad_check(cfg: &msp_core::config::MspConfig) {
    let model = MspModel::init(cfg).unwrap();
    let shadow = model.encoder_params();
    let cloud = micro_scene(11);
    let mask = micro_mask(&cloud, 11);
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let report = grad_check(
        |tape, vars| {
            let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            Ok(scene_loss(cfg, tape, &p, &shadow, &cloud, &mask, 5)?.total)
        },
        &inputs,
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{:?} {:?}: {report:?}", cfg.arch, cfg.targets);
}

#[test]
fn end_to_end_gradients_per_architecture() {
    for arch in ARCHS {
        end_to_end_grad_check(&micro(arch, &[Target::Sc, Target::Dsf, Target::Color]));
    }
}

#[test]
fn end_to_end_gradients_per_target() {
    for t in [Target::Sc, Target::Dsf, Target::Color, Target::PointSet] {
        end_to_end_grad_check(&micro(DecoderArch::Sa, &[t]));
    }
}

// ---------------------------------------------- training and persistence

#[test]
fn training_is_deterministic_and_writes_one_row_per_step() {
    let run = micro_run(DecoderArch::Sa);
    let scenes = micro_scenes(run.data.scenes);
    let dir = tempfile::tempdir().unwrap();
    let mut a = TrainState::new(&run).unwrap();
    let ha =
        pretrain(&mut a, &scenes, &PretrainOptions { out_dir: Some(dir.path().to_path_buf()), stop_at: None }).unwrap();
    let mut b = TrainState::new(&run).unwrap();
    let hb = pretrain(&mut b, &scenes, &PretrainOptions::default()).unwrap();
    let total = total_steps(&run.msp, scenes.len());
    assert_eq!(ha.len() as u64, total);
    let bits = |h: &[TrainMetrics]| h.iter().map(|m| m.loss_total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ha), bits(&hb));
    assert_eq!(a.model.params.checksum(), b.model.params.checksum());

    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count() as u64, total);
    assert!(dir.path().join("last.msp").exists());
    assert!(dir.path().join("ckpt_000002.msp").exists());
}

#[test]
fn resumed_run_matches_unbroken_run() {
    let run = micro_run(DecoderArch::CaPlusPlus);
    let scenes = micro_scenes(run.data.scenes);
    let mut whole = TrainState::new(&run).unwrap();
    let full = pretrain(&mut whole, &scenes, &PretrainOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let opts = |stop| PretrainOptions { out_dir: Some(dir.path().to_path_buf()), stop_at: stop };
    let mut first = TrainState::new(&run).unwrap();
    let head = pretrain(&mut first, &scenes, &opts(Some(3))).unwrap();
    let mut resumed = load_checkpoint(&dir.path().join("last.msp")).unwrap();
    assert_eq!(resumed, first);
    let tail = pretrain(&mut resumed, &scenes, &opts(None)).unwrap();

    let joined: Vec<u64> = head.iter().chain(&tail).map(|m| m.loss_total.to_bits()).collect();
    let unbroken: Vec<u64> = full.iter().map(|m| m.loss_total.to_bits()).collect();
    assert_eq!(joined, unbroken);
    assert_eq!(resumed.model.params.checksum(), whole.model.params.checksum());
    assert_eq!(resumed.ema.shadow.checksum(), whole.ema.shadow.checksum());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count() as u64 - 1, whole.step);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let run = micro_run(DecoderArch::Sa);
    let scenes = micro_scenes(2);
    let mut state = TrainState::new(&run).unwrap();
    train_step(&mut state, &scenes, &[0, 1], 1e-3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.msp");
    let b = dir.path().join("b.msp");
    save_checkpoint(&state, &a).unwrap();
    let back = load_checkpoint(&a).unwrap();
    assert_eq!(back.model.params.checksum(), state.model.params.checksum());
    assert_eq!(back.step, 1);
    assert_eq!(back.config, state.config);
    save_checkpoint(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let mut bytes = std::fs::read(&a).unwrap();
    bytes[0] = b'X';
    std::fs::write(&b, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&b), Err(MspError::Incompatible(_))));

    let mut c = read_container(&a).unwrap();
    let t = c.buffers.get_mut("param/decoder.mask_token").unwrap();
    *t = Tensor::zeros(&[t.numel() + 1]);
    write_container(&b, &c).unwrap();
    assert!(matches!(load_checkpoint(&b), Err(MspError::Incompatible(_))));

    std::fs::write(&b, &std::fs::read(&a).unwrap()[..200]).unwrap();
    assert!(matches!(load_checkpoint(&b), Err(MspError::Incompatible(_))));
}

#[test]
fn zero_epochs_leaves_the_initialization() {
    let mut run = micro_run(DecoderArch::Ca);
    run.msp.epochs = 0;
    let scenes = micro_scenes(2);
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(&run).unwrap();
    let h = pretrain(&mut state, &scenes, &PretrainOptions { out_dir: Some(dir.path().to_path_buf()), stop_at: None })
        .unwrap();
    assert!(h.is_empty());
    let back = load_checkpoint(&dir.path().join("last.msp")).unwrap();
    assert_eq!(back, TrainState::new(&run).unwrap());
}

#[test]
fn extracted_encoder_is_the_encoder() {
    let run = micro_run(DecoderArch::Ca);
    let state = TrainState::new(&run).unwrap();
    let enc = extract_encoder(&state);
    let want: Vec<&str> = state.model.params.names().filter(|n| n.starts_with(ENCODER_PREFIX)).collect();
    assert_eq!(enc.names().collect::<Vec<_>>(), want);
    assert!(!want.is_empty());

    let cloud = micro_scene(9);
    let mask = micro_mask(&cloud, 9);
    let features = |store: &ParamStore| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let f = encode_remaining(state.msp(), &mut tape, &p, &cloud, &mask).unwrap();
        tape.value(f).clone()
    };
    assert_eq!(features(&enc), features(&state.model.params));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.msp");
    save_encoder(&enc, &state.config, &path).unwrap();
    let (back, cfg) = load_encoder(&path).unwrap();
    assert_eq!(back.checksum(), enc.checksum());
    assert_eq!(cfg, state.config);
    let full = dir.path().join("full.msp");
    save_checkpoint(&state, &full).unwrap();
    assert_eq!(load_encoder(&full).unwrap().0.checksum(), enc.checksum());
}
