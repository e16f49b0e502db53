//! Data ingestion, serialization, and report emission: everything between
//! files on disk and the in-memory types.

mod ingest;
mod manifest;
mod model_io;
mod plot;
mod report;

pub use ingest::{ingest_csv, ingest_labels, read_label_file, GAP_SPLIT_HOURS};
pub use manifest::{DatasetManifest, FeatureKind, FeatureSpec};
pub use model_io::{load_model, save_model, SavedModel, MODEL_FILE_VERSION};
pub use plot::{
    emit_plot_data, plot_column_count, write_binary_label_csv, write_labels_csv,
    write_predictions_csv, write_sequence_csv,
};
pub use report::{AggregateMetrics, RunReport, SequenceMetrics, Timing};
