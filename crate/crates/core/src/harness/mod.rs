//! Deterministic training and evaluation at desk scale: synthetic data,
//! source-task pretraining, adaptation runs and report emission.

mod blob;
mod checkpoint;
mod data;
mod report;
mod schedule;
mod train;

pub use blob::{decode_tensor, encode_tensor, read_tensor, write_atomic, write_tensor, HEADER_LEN, MAGIC};
pub use checkpoint::{extract_backbone, load_backbone, load_checkpoint, save_checkpoint};
pub use data::{gen_synthetic, load_dataset, save_dataset, Dataset, Generator, SyntheticData, SyntheticTaskSpec};
pub use report::{collect_reports, emit_report, read_report, write_table, RunReport, CSV_HEADER, REPORT_DIR_ENV};
pub use schedule::LrSchedule;
pub use train::{evaluate, median, predict_all, pretrain, run, sgd_step, train, DataSource, StepOutcome, TrainConfig};
