//! Per-scene forward/backward, the optimizer step and the pre-training loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use super::checkpoint::save_checkpoint;
use super::model::{decode, encode_remaining, predict, Decoded, MspModel, ENCODER_PREFIX};
use super::targets::{compute_targets, loss_chamfer, loss_color, loss_dsf, loss_sc, TargetBundle};
use crate::config::{MspConfig, RunConfig, Schedule, Target};
use crate::error::{MspError, Result};
use crate::masking::{apply_mask, MaskResult, MaskSpec};
use crate::neural::{AdamWConfig, AdamWState, Bound, EmaTracker, ParamStore};
use crate::rng::{derive_seed, fisher_yates_prefix, stream, tag};
use crate::scene::{augment, PointCloud};
use crate::tensor::{Tape, Var};

pub const METRICS_HEADER: &str = "step,loss_total,loss_sc,loss_dsf,loss_color,loss_pointset,lr,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub step: u64,
    pub loss_total: f64,
    /// Per-target losses in `Target::ALL` order; `None` when disabled.
    pub losses: [Option<f64>; 4],
    pub lr: f64,
    pub seconds: f64,
    pub scenes_used: usize,
}

impl TrainMetrics {
    pub fn csv_row(&self) -> String {
        let parts: Vec<String> = self.losses.iter().map(|l| l.map_or(String::new(), |v| v.to_string())).collect();
        format!("{},{},{},{},{:.3}", self.step, self.loss_total, parts.join(","), self.lr, self.seconds)
    }
}

/// Loss graph of one scene.
#[derive(Debug, Clone)]
pub struct SceneLoss {
    pub total: Var,
    pub parts: [Option<Var>; 4],
    pub decoded: Decoded,
    pub targets: TargetBundle,
}

/// Forward pass of one (already augmented) scene: encode the remaining
/// points, decode masked features, predict every enabled target and sum the
/// weighted losses.
pub fn scene_loss(
    cfg: &MspConfig,
    tape: &mut Tape,
    p: &Bound,
    shadow: &ParamStore,
    cloud: &PointCloud,
    mask: &MaskResult,
    keypoint_seed: u64,
) -> Result<SceneLoss> {
    if mask.masked_idx.is_empty() {
        return Err(MspError::DegenerateMask("nothing masked".into()));
    }
    let remaining = encode_remaining(cfg, tape, p, cloud, mask)?;
    let decoded = decode(cfg, tape, p, cloud, mask, remaining, keypoint_seed)?;
    let targets = compute_targets(cfg, cloud, &decoded.supervised, shadow)?;
    let heads = predict(cfg, tape, p, decoded.features)?;
    let mut parts: [Option<Var>; 4] = [None; 4];
    for t in cfg.targets.enabled() {
        let missing = || MspError::Contract(format!("{} head or target missing", t.name()));
        let loss = match t {
            Target::Sc => {
                loss_sc(tape, heads.sc_logits.ok_or_else(missing)?, targets.sc.as_ref().ok_or_else(missing)?)?
            }
            Target::Dsf => loss_dsf(tape, heads.dsf.ok_or_else(missing)?, targets.dsf.as_ref().ok_or_else(missing)?)?,
            Target::Color => {
                loss_color(tape, heads.color.ok_or_else(missing)?, targets.color.as_ref().ok_or_else(missing)?)?
            }
            Target::PointSet => {
                loss_chamfer(tape, heads.pointset.ok_or_else(missing)?, targets.pointset.as_ref().ok_or_else(missing)?)?
            }
        };
        parts[t as usize] = Some(loss);
    }
    let mut total: Option<Var> = None;
    for t in cfg.targets.enabled() {
        let l = parts[t as usize].expect("enabled target has a loss");
        let w = tape.scale(l, cfg.targets.weight(t));
        total = Some(match total {
            None => w,
            Some(acc) => tape.add(acc, w)?,
        });
    }
    Ok(SceneLoss { total: total.expect("at least one target enabled"), parts, decoded, targets })
}

/// Seeds used for one visit of scene `scene` at step `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisitSeeds {
    pub augment: u64,
    pub mask: u64,
    pub keypoints: u64,
}

pub fn visit_seeds(seed: u64, step: u64, scene: usize) -> VisitSeeds {
    let s = scene as u64;
    VisitSeeds {
        augment: derive_seed(seed, &[tag::AUGMENT, step, s]),
        mask: derive_seed(seed, &[tag::MASK, step, s]),
        keypoints: derive_seed(seed, &[tag::KEYPOINTS, step, s]),
    }
}

/// Augmented cloud and mask of one scene visit.
pub fn prepare_scene(cfg: &MspConfig, scene: &PointCloud, seeds: VisitSeeds) -> Result<(PointCloud, MaskResult)> {
    let cloud = augment(scene, &cfg.augment_spec(seeds.augment));
    let mask = apply_mask(&cloud, &MaskSpec { ratio: cfg.mask_ratio, block_size: cfg.mask_block, seed: seeds.mask })?;
    Ok((cloud, mask))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub model: MspModel,
    pub optimizer: AdamWState,
    pub ema: EmaTracker,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let cfg = &config.msp;
        let model = MspModel::init(cfg)?;
        let optimizer = AdamWState::new(
            AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
            &model.params,
        );
        let ema = EmaTracker::new(&model.params, ENCODER_PREFIX, cfg.ema_decay)?;
        Ok(TrainState { config: config.clone(), model, optimizer, ema, step: 0 })
    }

    pub fn msp(&self) -> &MspConfig {
        &self.config.msp
    }
}

struct SceneResult {
    total: f64,
    parts: [Option<f64>; 4],
    grads: BTreeMap<String, Vec<f64>>,
}

fn run_scene(state: &TrainState, scene: &PointCloud, scene_id: usize, step: u64) -> Result<Option<SceneResult>> {
    let cfg = state.msp();
    let seeds = visit_seeds(cfg.seed, step, scene_id);
    let attempt = (|| {
        let (cloud, mask) = prepare_scene(cfg, scene, seeds)?;
        let mut tape = Tape::with_precision(cfg.precision);
        let bound = state.model.params.bind(&mut tape, true);
        let sl = scene_loss(cfg, &mut tape, &bound, &state.ema.shadow, &cloud, &mask, seeds.keypoints)?;
        tape.backward(sl.total)?;
        Ok(SceneResult {
            total: tape.scalar(sl.total),
            parts: sl.parts.map(|v| v.map(|v| tape.scalar(v))),
            grads: bound.grads(&tape),
        })
    })();
    match attempt {
        Ok(r) => Ok(Some(r)),
        Err(e @ (MspError::DegenerateMask(_) | MspError::DegenerateTarget(_))) => {
            warn!("step {step}: scene {scene_id} skipped ({e})");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// One optimizer step over the scenes `batch` (indices into `scenes`):
/// per-scene losses and gradients, averaged over usable scenes, then AdamW
/// and the EMA update. Gradients are reduced in batch order, so results do
/// not depend on the worker count.
pub fn train_step(state: &mut TrainState, scenes: &[PointCloud], batch: &[usize], lr: f64) -> Result<TrainMetrics> {
    if batch.is_empty() {
        return Err(MspError::Contract("empty batch".into()));
    }
    let started = Instant::now();
    let step = state.step + 1;
    let results: Vec<Option<SceneResult>> =
        batch.par_iter().map(|&s| run_scene(state, &scenes[s], s, step)).collect::<Result<_>>()?;
    let used: Vec<SceneResult> = results.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(MspError::DegenerateMask(format!("every scene of step {step} is degenerate")));
    }
    let n = used.len() as f64;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut total = 0.0;
    let mut parts = [None; 4];
    for r in &used {
        total += r.total;
        for (acc, v) in parts.iter_mut().zip(r.parts) {
            if let Some(v) = v {
                *acc = Some(acc.unwrap_or(0.0) + v);
            }
        }
        for (name, g) in &r.grads {
            match grads.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(name.clone(), g.clone());
                }
            }
        }
    }
    let total = total / n;
    let parts = parts.map(|p| p.map(|v| v / n));
    if !total.is_finite() {
        return Err(MspError::NonFinite { step, detail: format!("loss_total = {total}") });
    }
    for g in grads.values_mut() {
        g.iter_mut().for_each(|v| *v /= n);
    }
    state.model.params.zero_grads();
    state.model.params.accumulate_grad_map(&grads)?;
    state.optimizer.step_with_lr(&mut state.model.params, lr)?;
    state.model.params.zero_grads();
    state.ema.update(&state.model.params)?;
    state.step = step;
    Ok(TrainMetrics {
        step,
        loss_total: total,
        losses: parts,
        lr,
        seconds: started.elapsed().as_secs_f64(),
        scenes_used: used.len(),
    })
}

pub fn steps_per_epoch(n_scenes: usize, batch: usize) -> usize {
    n_scenes.div_ceil(batch)
}

pub fn total_steps(cfg: &MspConfig, n_scenes: usize) -> u64 {
    (cfg.epochs * steps_per_epoch(n_scenes, cfg.batch_size)) as u64
}

/// Learning rate of 1-based step `step` out of `total`; cosine decays from
/// the base rate at step 1 towards 0 after the last step.
pub fn lr_at(cfg: &MspConfig, step: u64, total: u64) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            let t = (step.saturating_sub(1)) as f64 / total.max(1) as f64;
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Scene indices of 1-based step `step`: each epoch visits every scene
/// once in an order drawn from `(seed, epoch)`.
pub fn batch_for_step(cfg: &MspConfig, n_scenes: usize, step: u64) -> Vec<usize> {
    let spe = steps_per_epoch(n_scenes, cfg.batch_size) as u64;
    let epoch = (step - 1) / spe;
    let pos = ((step - 1) % spe) as usize;
    let order = fisher_yates_prefix(n_scenes, n_scenes, &mut stream(cfg.seed, &[tag::EPOCH, epoch]));
    let lo = pos * cfg.batch_size;
    order[lo..(lo + cfg.batch_size).min(n_scenes)].to_vec()
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    /// Directory for `metrics.csv`, periodic checkpoints and `last.msp`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed steps (for staged runs).
    pub stop_at: Option<u64>,
}

fn open_metrics(dir: &Path, resume_step: u64) -> Result<fs::File> {
    let path = dir.join("metrics.csv");
    let io = |e| MspError::io(&path, e);
    let mut kept = format!("{METRICS_HEADER}\n");
    if resume_step > 0 {
        if let Ok(old) = fs::read_to_string(&path) {
            for line in old.lines().skip(1) {
                let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s <= resume_step) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    fs::write(&path, kept).map_err(io)?;
    fs::OpenOptions::new().append(true).open(&path).map_err(io)
}

/// Run training from `state.step` to the configured end (or `stop_at`).
pub fn pretrain(state: &mut TrainState, scenes: &[PointCloud], opts: &PretrainOptions) -> Result<Vec<TrainMetrics>> {
    if scenes.is_empty() {
        return Err(MspError::Contract("pre-training needs at least one scene".into()));
    }
    let cfg = state.msp().clone();
    let total = total_steps(&cfg, scenes.len());
    let end = opts.stop_at.map_or(total, |s| s.min(total));
    let mut csv = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| MspError::io(dir, e))?;
            Some(open_metrics(dir, state.step)?)
        }
        None => None,
    };
    let mut history = Vec::new();
    while state.step < end {
        let step = state.step + 1;
        let batch = batch_for_step(&cfg, scenes.len(), step);
        let m = train_step(state, scenes, &batch, lr_at(&cfg, step, total))?;
        if step == 1 || step.is_multiple_of(10) || step == end {
            info!("step {step}/{total} loss {:.5} lr {:.2e}", m.loss_total, m.lr);
        }
        if let (Some(f), Some(dir)) = (csv.as_mut(), &opts.out_dir) {
            writeln!(f, "{}", m.csv_row()).map_err(|e| MspError::io(dir.join("metrics.csv"), e))?;
            if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every as u64) {
                save_checkpoint(state, &dir.join(format!("ckpt_{step:06}.msp")))?;
            }
        }
        history.push(m);
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(state, &dir.join("last.msp"))?;
    }
    Ok(history)
}
