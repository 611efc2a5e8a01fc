//! Position-conditioned glyph classification: a 2×2 grid of glyphs and a
//! query index, with the index fused into the visual features as a
//! broadcast per-channel prior.

mod data;
mod model;
mod train;

pub use data::{
    export_dataset, gen_dataset, gen_dataset_with, import_dataset, index_free_accuracy_bound, render_glyph, render_grid, DatasetConfig,
    GridSample, GLYPHS, MAX_CLASSES, MIN_GLYPH_SIZE,
};
pub use model::{
    argmax, dominant_quadrant, locality_rate, shuffled_index_accuracy, toy_evaluate, toy_forward, Classifier, ToyArch, ToyModel,
    INPUT_CHANNELS,
};
pub use train::{toy_train, train_epoch, EpochStats, TrainConfig, TrainOutcome, TEST_SEED_SALT};
