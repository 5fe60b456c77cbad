//! Masked shape prediction: encoder, decoders, targets and training.

mod checkpoint;
mod model;
mod targets;
mod train;

pub use checkpoint::{
    extract_encoder, load_checkpoint, load_encoder, read_container, save_checkpoint, save_encoder, write_container,
    Container,
};
pub use model::{
    build_mask_queries, decode, decode_ca, decode_ca_pp, decode_cross, decode_sa, encode_points, encode_remaining,
    predict, sample_keypoints, Decoded, HeadOutputs, MspModel, SaKeypoints, ENCODER_PREFIX,
};
pub use targets::{
    compute_targets, dsf_features, loss_chamfer, loss_color, loss_dsf, loss_sc, pointset_targets, TargetBundle,
};
pub use train::{
    batch_for_step, lr_at, prepare_scene, pretrain, scene_loss, steps_per_epoch, total_steps, train_step, visit_seeds,
    PretrainOptions, SceneLoss, TrainMetrics, TrainState, VisitSeeds, METRICS_HEADER,
};
