//! Run configuration: typed settings plus the line-oriented `key = value`
//! text form used on disk, on the command line and inside checkpoints.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{MspError, Result};
use crate::masking::MaskSpec;
use crate::rng::{derive_seed, stream, tag};
use crate::scene::{generate_scene, AugmentSpec, PointCloud, Rotation, SyntheticSceneSpec};
use crate::shape_context::ScPartition;
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = MspError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(MspError::Config(format!("unknown profile '{s}' (desk|paper)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderArch {
    /// Masked queries cross-attend to remaining features only.
    Ca,
    /// As `Ca`, with remaining features refined by self-attention before
    /// every cross-attention block.
    CaPlusPlus,
    /// Self-attention over a sparse keypoint sample of the whole cloud.
    Sa,
}

impl FromStr for DecoderArch {
    type Err = MspError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ca" => Ok(DecoderArch::Ca),
            "ca++" | "capp" => Ok(DecoderArch::CaPlusPlus),
            "sa" => Ok(DecoderArch::Sa),
            _ => Err(MspError::Config(format!("unknown decoder architecture '{s}' (ca|ca++|sa)"))),
        }
    }
}

impl fmt::Display for DecoderArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderArch::Ca => "ca",
            DecoderArch::CaPlusPlus => "ca++",
            DecoderArch::Sa => "sa",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    Sc,
    Dsf,
    Color,
    PointSet,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Sc, Target::Dsf, Target::Color, Target::PointSet];

    pub fn name(self) -> &'static str {
        match self {
            Target::Sc => "sc",
            Target::Dsf => "dsf",
            Target::Color => "color",
            Target::PointSet => "pointset",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl FromStr for Target {
    type Err = MspError;
    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| MspError::Config(format!("unknown target '{s}' (sc|dsf|color|pointset)")))
    }
}

/// Enabled reconstruction targets and their loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSet {
    enabled: [bool; 4],
    pub weights: [f64; 4],
}

impl TargetSet {
    pub fn new(targets: &[Target]) -> Self {
        let mut enabled = [false; 4];
        for t in targets {
            enabled[t.slot()] = true;
        }
        TargetSet { enabled, weights: [1.0; 4] }
    }

    pub fn only(t: Target) -> Self {
        TargetSet::new(&[t])
    }

    pub fn has(&self, t: Target) -> bool {
        self.enabled[t.slot()]
    }

    pub fn weight(&self, t: Target) -> f64 {
        self.weights[t.slot()]
    }

    pub fn set_weight(&mut self, t: Target, w: f64) {
        self.weights[t.slot()] = w;
    }

    pub fn enabled(&self) -> impl Iterator<Item = Target> + '_ {
        Target::ALL.into_iter().filter(|t| self.has(*t))
    }

    pub fn is_empty(&self) -> bool {
        !self.enabled.iter().any(|&e| e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Everything the pretext model and its training loop depend on.
#[derive(Debug, Clone, PartialEq)]
pub struct MspConfig {
    pub mask_ratio: f64,
    pub mask_block: f64,
    pub sc_partitions: Vec<ScPartition>,
    pub arch: DecoderArch,
    pub width: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub k: usize,
    pub keypoints: usize,
    pub ln_eps: f64,
    pub targets: TargetSet,
    pub pointset_k: usize,
    pub pointset_radius: f64,
    pub ema_decay: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub precision: Precision,
    pub jitter: f64,
    pub flip: bool,
    pub rotate: bool,
}

impl MspConfig {
    pub fn profile(profile: Profile) -> Self {
        let (width, heads, encoder_blocks, decoder_blocks, keypoints, epochs) = match profile {
            Profile::Desk => (64, 4, 2, 2, 512, 300),
            Profile::Paper => (576, 12, 4, 6, 10_000, 600),
        };
        MspConfig {
            mask_ratio: 0.6,
            mask_block: 0.3,
            sc_partitions: crate::shape_context::default_partitions(),
            arch: DecoderArch::Sa,
            width,
            heads,
            encoder_blocks,
            decoder_blocks,
            k: 32,
            keypoints,
            ln_eps: 1e-5,
            targets: TargetSet::new(&[Target::Sc, Target::Dsf, Target::Color]),
            pointset_k: 200,
            pointset_radius: 0.15,
            ema_decay: 0.999,
            lr: 1e-3,
            weight_decay: 0.1,
            schedule: Schedule::Cosine,
            epochs,
            batch_size: 8,
            checkpoint_every: 100,
            seed: 0,
            precision: Precision::F64,
            jitter: 0.005,
            flip: true,
            rotate: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MspError::Config(m));
        MaskSpec { ratio: self.mask_ratio, block_size: self.mask_block, seed: 0 }
            .validate()
            .map_err(|e| MspError::Config(e.to_string()))?;
        if self.sc_partitions.is_empty() {
            return bad("at least one shape-context partition is required".into());
        }
        for p in &self.sc_partitions {
            p.validate().map_err(|e| MspError::Config(e.to_string()))?;
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("model width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.k == 0 {
            return bad("model.k must be >= 1".into());
        }
        if self.targets.is_empty() {
            return bad("at least one target must be enabled".into());
        }
        if self.arch == DecoderArch::Sa && self.keypoints < 2 {
            return bad("SA decoder needs at least 2 keypoints".into());
        }
        if self.targets.has(Target::PointSet) && (self.pointset_k == 0 || !(self.pointset_radius > 0.0)) {
            return bad("point-set target needs K >= 1 and R > 0".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema decay {} outside [0,1]", self.ema_decay));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.ln_eps >= 0.0) || !(self.jitter >= 0.0) {
            return bad("lr, weight decay, ln_eps and jitter must be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch must be >= 1".into());
        }
        Ok(())
    }

    /// Width of the shape-predictor output: SC logits then the DSF vector.
    pub fn shape_head_width(&self) -> usize {
        let sc =
            if self.targets.has(Target::Sc) { crate::shape_context::descriptor_width(&self.sc_partitions) } else { 0 };
        let dsf = if self.targets.has(Target::Dsf) { self.width } else { 0 };
        sc + dsf
    }

    /// Augmentation for one scene visit; flips are drawn from `seed`.
    pub fn augment_spec(&self, seed: u64) -> AugmentSpec {
        let mut rng = stream(seed, &[tag::AUGMENT]);
        AugmentSpec {
            jitter_sigma: self.jitter,
            flip_x: self.flip && rng.random::<bool>(),
            flip_y: self.flip && rng.random::<bool>(),
            rotation: if self.rotate { Rotation::Uniform } else { Rotation::Fixed(0.0) },
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub scenes: usize,
    pub scene: SyntheticSceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenes: 8,
            scene: SyntheticSceneSpec { points_per_primitive: 64, ..SyntheticSceneSpec::default() },
        }
    }
}

impl DataConfig {
    /// Scene `index` of the stream `purpose` under `seed`.
    fn scene_with(&self, seed: u64, purpose: u64, index: usize) -> Result<PointCloud> {
        generate_scene(&SyntheticSceneSpec { seed: derive_seed(seed, &[purpose, index as u64]), ..self.scene.clone() })
    }

    /// The pre-training set: `scenes` clouds drawn from `seed`.
    pub fn training_scenes(&self, seed: u64) -> Result<Vec<PointCloud>> {
        (0..self.scenes).map(|i| self.scene_with(seed, tag::SCENE, i)).collect()
    }

    /// Labeled scenes from a stream disjoint from the training set.
    pub fn probe_scenes(&self, seed: u64, count: usize) -> Result<Vec<PointCloud>> {
        (0..count).map(|i| self.scene_with(seed, tag::PROBE_SCENE, i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub train_fraction: f64,
    pub seeds: usize,
    pub scenes: usize,
    pub margin: f64,
    pub keep_fractions: Vec<f64>,
    pub leakage_seeds: usize,
    pub leakage_margin: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 200,
            lr: 1e-2,
            train_fraction: 0.5,
            seeds: 3,
            scenes: 8,
            margin: 0.03,
            keep_fractions: vec![1.0, 0.25, 0.05],
            leakage_seeds: 5,
            leakage_margin: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub msp: MspConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| MspError::Config(format!("cannot parse '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(MspError::Config(format!("expected boolean for '{key}', got '{value}'"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn new(profile: Profile) -> Self {
        RunConfig {
            profile,
            msp: MspConfig::profile(profile),
            data: DataConfig::default(),
            probe: ProbeConfig::default(),
        }
    }

    /// Parse `key = value` lines over the defaults of `profile`. A `profile`
    /// key in the text takes precedence over the argument; everything else
    /// is applied in file order. Unknown keys are errors.
    pub fn parse(text: &str, profile: Option<Profile>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MspError::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let file_profile =
            pairs.iter().rev().find(|(k, _)| k == "profile").map(|(_, v)| v.parse::<Profile>()).transpose()?;
        let mut cfg = RunConfig::new(file_profile.or(profile).unwrap_or(Profile::Desk));
        for (k, v) in pairs.iter().filter(|(k, _)| k != "profile") {
            cfg.set(k, v)?;
        }
        cfg.msp.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.msp;
        let d = &mut self.data;
        let p = &mut self.probe;
        match key {
            "profile" => {
                let prof: Profile = value.parse()?;
                if prof != self.profile {
                    return Err(MspError::Config("profile must be set before other keys".into()));
                }
            }
            "seed" => m.seed = parse(key, value)?,
            "precision" => m.precision = parse(key, value)?,
            "mask.r" => m.mask_ratio = parse(key, value)?,
            "mask.w" => m.mask_block = parse(key, value)?,
            "sc.R" => {
                let r = parse(key, value)?;
                m.sc_partitions.iter_mut().for_each(|q| q.radius = r);
            }
            "sc.xi" => {
                let xi = parse(key, value)?;
                m.sc_partitions.iter_mut().for_each(|q| q.xi = xi);
            }
            "sc.partitions" => {
                let (radius, xi) = m.sc_partitions.first().map_or((0.15, 0.3), |q| (q.radius, q.xi));
                m.sc_partitions = value
                    .split(';')
                    .map(|group| {
                        let n: Vec<usize> = parse_list(key, group)?;
                        match n[..] {
                            [t, ph, r] => ScPartition::new(t, ph, r, radius, xi),
                            _ => Err(MspError::Config(format!("partition '{group}' needs three counts"))),
                        }
                    })
                    .collect::<Result<_>>()?;
            }
            "model.arch" => m.arch = parse(key, value)?,
            "model.width" => m.width = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.encoder_blocks" => m.encoder_blocks = parse(key, value)?,
            "model.decoder_blocks" => m.decoder_blocks = parse(key, value)?,
            "model.k" => m.k = parse(key, value)?,
            "model.keypoints" => m.keypoints = parse(key, value)?,
            "model.ln_eps" => m.ln_eps = parse(key, value)?,
            "targets.enabled" => {
                let weights = m.targets.weights;
                m.targets = TargetSet::new(&parse_list::<Target>(key, value)?);
                m.targets.weights = weights;
            }
            "targets.w_sc" => m.targets.set_weight(Target::Sc, parse(key, value)?),
            "targets.w_dsf" => m.targets.set_weight(Target::Dsf, parse(key, value)?),
            "targets.w_color" => m.targets.set_weight(Target::Color, parse(key, value)?),
            "targets.w_pointset" => m.targets.set_weight(Target::PointSet, parse(key, value)?),
            "targets.pointset_k" => m.pointset_k = parse(key, value)?,
            "targets.pointset_R" => m.pointset_radius = parse(key, value)?,
            "ema.decay" => m.ema_decay = parse(key, value)?,
            "train.lr" => m.lr = parse(key, value)?,
            "train.wd" => m.weight_decay = parse(key, value)?,
            "train.schedule" => {
                m.schedule = match value {
                    "cosine" => Schedule::Cosine,
                    "constant" => Schedule::Constant,
                    _ => return Err(MspError::Config(format!("unknown schedule '{value}'"))),
                }
            }
            "train.epochs" => m.epochs = parse(key, value)?,
            "train.batch" => m.batch_size = parse(key, value)?,
            "train.checkpoint_every" => m.checkpoint_every = parse(key, value)?,
            "aug.jitter" => m.jitter = parse(key, value)?,
            "aug.flip" => m.flip = parse_bool(key, value)?,
            "aug.rotate" => m.rotate = parse_bool(key, value)?,
            "data.scenes" => d.scenes = parse(key, value)?,
            "data.points_per_primitive" => d.scene.points_per_primitive = parse(key, value)?,
            "data.primitives" => {
                let c: Vec<usize> = parse_list(key, value)?;
                d.scene.counts =
                    c.try_into().map_err(|_| MspError::Config("data.primitives needs four counts".into()))?;
            }
            "data.extent" => d.scene.extent = parse(key, value)?,
            "data.noise" => d.scene.noise_sigma = parse(key, value)?,
            "data.colors" => d.scene.colors = parse_bool(key, value)?,
            "probe.steps" => p.steps = parse(key, value)?,
            "probe.lr" => p.lr = parse(key, value)?,
            "probe.train_fraction" => p.train_fraction = parse(key, value)?,
            "probe.seeds" => p.seeds = parse(key, value)?,
            "probe.scenes" => p.scenes = parse(key, value)?,
            "probe.margin" => p.margin = parse(key, value)?,
            "leakage.keep" => p.keep_fractions = parse_list(key, value)?,
            "leakage.seeds" => p.leakage_seeds = parse(key, value)?,
            "leakage.margin" => p.leakage_margin = parse(key, value)?,
            _ => return Err(MspError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in documentation order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.msp;
        let d = &self.data;
        let p = &self.probe;
        let t = &m.targets;
        let first = m.sc_partitions.first();
        vec![
            ("profile", self.profile.to_string()),
            ("seed", m.seed.to_string()),
            ("precision", m.precision.name().to_string()),
            ("mask.r", m.mask_ratio.to_string()),
            ("mask.w", m.mask_block.to_string()),
            ("sc.R", first.map_or(0.15, |q| q.radius).to_string()),
            ("sc.xi", first.map_or(0.3, |q| q.xi).to_string()),
            (
                "sc.partitions",
                m.sc_partitions
                    .iter()
                    .map(|q| format!("{},{},{}", q.n_theta, q.n_phi, q.n_rad))
                    .collect::<Vec<_>>()
                    .join(";"),
            ),
            ("model.arch", m.arch.to_string()),
            ("model.width", m.width.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.encoder_blocks", m.encoder_blocks.to_string()),
            ("model.decoder_blocks", m.decoder_blocks.to_string()),
            ("model.k", m.k.to_string()),
            ("model.keypoints", m.keypoints.to_string()),
            ("model.ln_eps", m.ln_eps.to_string()),
            ("targets.enabled", t.enabled().map(Target::name).collect::<Vec<_>>().join(",")),
            ("targets.w_sc", t.weight(Target::Sc).to_string()),
            ("targets.w_dsf", t.weight(Target::Dsf).to_string()),
            ("targets.w_color", t.weight(Target::Color).to_string()),
            ("targets.w_pointset", t.weight(Target::PointSet).to_string()),
            ("targets.pointset_k", m.pointset_k.to_string()),
            ("targets.pointset_R", m.pointset_radius.to_string()),
            ("ema.decay", m.ema_decay.to_string()),
            ("train.lr", m.lr.to_string()),
            ("train.wd", m.weight_decay.to_string()),
            (
                "train.schedule",
                match m.schedule {
                    Schedule::Cosine => "cosine",
                    Schedule::Constant => "constant",
                }
                .to_string(),
            ),
            ("train.epochs", m.epochs.to_string()),
            ("train.batch", m.batch_size.to_string()),
            ("train.checkpoint_every", m.checkpoint_every.to_string()),
            ("aug.jitter", m.jitter.to_string()),
            ("aug.flip", m.flip.to_string()),
            ("aug.rotate", m.rotate.to_string()),
            ("data.scenes", d.scenes.to_string()),
            ("data.points_per_primitive", d.scene.points_per_primitive.to_string()),
            ("data.primitives", join(&d.scene.counts)),
            ("data.extent", d.scene.extent.to_string()),
            ("data.noise", d.scene.noise_sigma.to_string()),
            ("data.colors", d.scene.colors.to_string()),
            ("probe.steps", p.steps.to_string()),
            ("probe.lr", p.lr.to_string()),
            ("probe.train_fraction", p.train_fraction.to_string()),
            ("probe.seeds", p.seeds.to_string()),
            ("probe.scenes", p.scenes.to_string()),
            ("probe.margin", p.margin.to_string()),
            ("leakage.keep", join(&p.keep_fractions)),
            ("leakage.seeds", p.leakage_seeds.to_string()),
            ("leakage.margin", p.leakage_margin.to_string()),
        ]
    }

    /// Fully resolved text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        for prof in [Profile::Desk, Profile::Paper] {
            let cfg = RunConfig::new(prof);
            let back = RunConfig::parse(&cfg.to_text(), None).unwrap();
            assert_eq!(cfg, back);
        }
    }

    #[test]
    fn every_documented_key_is_settable() {
        let mut cfg = RunConfig::new(Profile::Desk);
        for (k, v) in RunConfig::new(Profile::Desk).entries() {
            cfg.set(k, &v).unwrap();
        }
        assert_eq!(cfg, RunConfig::new(Profile::Desk));
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("mask.ratio = 0.5", None).unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn profiles_differ_in_model_size() {
        let desk = MspConfig::profile(Profile::Desk);
        let paper = MspConfig::profile(Profile::Paper);
        assert_eq!((desk.width, desk.heads, desk.decoder_blocks, desk.keypoints), (64, 4, 2, 512));
        assert_eq!((paper.width, paper.heads, paper.decoder_blocks, paper.keypoints), (576, 12, 6, 10_000));
        assert_eq!(desk.k, 32);
        assert_eq!((desk.mask_ratio, desk.mask_block), (0.6, 0.3));
        assert_eq!(desk.ema_decay, 0.999);
        assert_eq!(desk.weight_decay, 0.1);
    }

    #[test]
    fn file_profile_and_overrides() {
        let cfg = RunConfig::parse(
            "# comment\nprofile = paper\nmodel.arch = ca++\ntargets.enabled = sc,pointset\nsc.R = 0.2\n",
            Some(Profile::Desk),
        )
        .unwrap();
        assert_eq!(cfg.profile, Profile::Paper);
        assert_eq!(cfg.msp.arch, DecoderArch::CaPlusPlus);
        assert!(cfg.msp.targets.has(Target::PointSet) && !cfg.msp.targets.has(Target::Dsf));
        assert!(cfg.msp.sc_partitions.iter().all(|p| p.radius == 0.2));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("targets.enabled = ", None).is_err());
        assert!(RunConfig::parse("model.heads = 5", None).is_err());
        assert!(RunConfig::parse("mask.r = abc", None).is_err());
        assert!(RunConfig::parse("just text", None).is_err());
    }

    #[test]
    fn shape_head_layout() {
        let mut m = MspConfig::profile(Profile::Desk);
        assert_eq!(m.shape_head_width(), 184 + 64);
        m.targets = TargetSet::only(Target::Color);
        assert_eq!(m.shape_head_width(), 0);
    }
}
