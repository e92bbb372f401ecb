#![allow(dead_code)]

use m3l_core::config::RunConfig;
use m3l_core::data::{Dataset, SceneSpec};
use m3l_core::fusion::{FusionConfig, ModelKind, SegModel};
use m3l_core::semisup::TrainMode;

/// A run small enough for unit-speed training: 16x16 scenes resized to an
/// 8x8 model input, 24 training scenes of which 6 are labeled.
pub fn small_config(kind: ModelKind, mode: TrainMode) -> RunConfig {
    let tiny = SegModel::tiny(kind, FusionConfig::default()).unwrap();
    let mut c = RunConfig {
        model: kind,
        scene: SceneSpec {
            height: 16,
            width: 16,
            num_classes: 3,
            ..SceneSpec::default()
        },
        encoder: tiny.encoder.clone(),
        decoder: tiny.decoder.clone(),
        ..RunConfig::default()
    };
    c.data.train_size = 24;
    c.data.val_size = 8;
    c.data.test_size = 8;
    c.data.labeled_fraction = 0.25;
    c.trainer.mode = mode;
    c.trainer.batch_labeled = 4;
    c.trainer.batch_unlabeled = 4;
    c.trainer.total_iters = 10;
    c.trainer.eval_every = 5;
    c.trainer.eval_batch = 8;
    c.trainer.lr_encoder = 1e-3;
    c.trainer.lr_decoder = 3e-3;
    c.validate().unwrap();
    c
}

pub fn small_dataset(cfg: &RunConfig) -> Dataset {
    Dataset::synthetic(&cfg.scene, &cfg.data).unwrap()
}
