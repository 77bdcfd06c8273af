//! Sentence packing, the Adafactor optimizer and the training loop.

mod adafactor;
mod pack;
mod trainer;

pub use adafactor::{Adafactor, AdafactorHyper, LrSchedule};
pub use pack::{pack_batches, PackedBatch, PackingOutcome};
pub use trainer::{train, StepRecord, TrainLog, TrainOptions};
