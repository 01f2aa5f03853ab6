//! Experiment configuration, protocol orchestration, checkpoints and reports.

mod checkpoint;
mod config;
mod output;
mod protocol;
mod results;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CheckpointHeader, TensorEntry,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{BackboneSettings, DatasetSource, EvalSettings, ExperimentConfig};
pub use output::{
    configure_threads, embeddings_csv, export_embeddings, training_log_csv, version_string, write_atomic,
    OutputDir, RunManifest, THREADS_ENV,
};
pub use protocol::{
    cell_from_meta, cell_split, checkpoint_meta, evaluate_cell, protocol_cells, run_protocol, shot_sweep,
    supervised_row, train_cell, Cell, ProtocolRun, TrainedCell,
};
pub use results::{digest_hex, AggregateRow, Method, ResultRow, ResultTable, CSV_COLUMNS};
