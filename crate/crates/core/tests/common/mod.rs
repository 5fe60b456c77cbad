#![allow(dead_code)]

use msp_core::config::{DecoderArch, MspConfig, Profile, RunConfig, Target, TargetSet};
use msp_core::masking::{apply_mask, MaskResult, MaskSpec};
use msp_core::scene::{generate_scene, PointCloud, SyntheticSceneSpec};

/// A model small enough for exhaustive finite differences.
pub fn micro(arch: DecoderArch, targets: &[Target]) -> MspConfig {
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

/// A compact labeled scene (about 40 points in under a meter).
pub fn micro_scene(seed: u64) -> PointCloud {
    generate_scene(&SyntheticSceneSpec { points_per_primitive: 10, extent: 0.6, seed, ..SyntheticSceneSpec::default() })
        .unwrap()
}

pub fn micro_mask(cloud: &PointCloud, seed: u64) -> MaskResult {
    apply_mask(cloud, &MaskSpec { ratio: 0.6, block_size: 0.3, seed }).unwrap()
}

/// Run configuration for short training runs on micro scenes.
pub fn micro_run(arch: DecoderArch) -> RunConfig {
    let mut run = RunConfig::new(Profile::Desk);
    run.msp = micro(arch, &[Target::Sc, Target::Dsf, Target::Color]);
    run.msp.epochs = 3;
    run.msp.batch_size = 2;
    run.msp.checkpoint_every = 2;
    run.data.scenes = 4;
    run.data.scene.points_per_primitive = 10;
    run.data.scene.extent = 0.6;
    run
}

pub fn micro_scenes(n: usize) -> Vec<PointCloud> {
    (0..n as u64).map(micro_scene).collect()
}
