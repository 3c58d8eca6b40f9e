//! Synthetic person-attribute corpus: generation, files, batches.

mod batch;
mod format;
mod generate;

pub use batch::{make_batches, prepare_example, Batch, Example, PhraseSample};
pub use format::{load_dataset, save_dataset, DATASET_VERSION, RECORDS_MAGIC};
pub use generate::{
    caption, generate_dataset, render, Attributes, DataConfig, Dataset, PersonRecord, Region, Slot,
};
