//! Data synthesis, patch sampling and the two training phases.

pub mod config;
pub mod records;
pub mod schedule;
pub mod synthetic;
pub mod trainer;

pub use config::{GanConfig, TrainConfig};
pub use records::{build_records, patch_variance, sample_patches, synth_lr_sequence, SampleRecord};
pub use schedule::{lr_schedule, Schedule};
pub use synthetic::{synth_patches, synth_video, SynthConfig};
pub use trainer::{
    reconstruct, train_gan, train_mse, DegradationTable, GanOutcome, GanStep, PinvSource, TableEntry, TrainOutcome,
};
