/*!
Self-training multi-source domain adaptation through classifier
agreement. A shared feature extractor feeds a bank of per-source
classifier heads; after a source-only warm-start, unlabeled target
samples whose heads agree are pseudo-labeled, sorted into an
easy-to-hard curriculum by the average classifier margin, and trained
on in mini-batches alternating with source batches. The fraction of
target samples on which the heads agree doubles as the convergence cue,
so no target labels are needed for model selection.

The `examples/` directory has one runnable example per capability:
data generation, the full training loop, agreement/margin diagnostics,
gradient checking, proxy A-distance, category shift, and the
oracle/baseline comparisons. The `simpal` binary exposes the same
pipeline as subcommands (`gen-data`, `train`, `eval`,
`export-features`, `report`).
*/

pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod numeric;
pub mod objective;
pub mod trainer;

pub use config::RunConfig;
pub use data::{DomainDataset, ShiftConfig};
pub use model::{LogitMatrix, ModelParams};
pub use trainer::{TrainOptions, TrainingState};
