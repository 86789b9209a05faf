//! Configuration, presets, the training loop, metrics and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod presets;
pub mod run;

pub use checkpoint::{checkpoint_load, checkpoint_save, TrainState};
pub use config::{DatasetKind, ExperimentConfig, OrthoRate, RefreshRate};
pub use metrics::{read_events, EpochRecord, Event, MetricsSink, RunMetrics};
pub use presets::{preset, preset_names};
pub use run::{
    ablation_grid, evaluate, init_state, load_datasets, lr_at_epoch, resume_experiment, run_experiment, run_with_data,
    AblationAxis, AblationCell,
};
