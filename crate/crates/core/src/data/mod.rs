//! Telemetry recordings, windowing, normalization and the synthetic
//! driving-simulator substitute.

mod channels;
mod dataset;
mod normalize;
mod recording;
pub mod synth;
mod windowing;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use channels::{channel_index, ChannelGroup, ChannelSelection, CHANNELS, NUM_CHANNELS, UNITS};
pub use dataset::{Dataset, Split};
pub use normalize::Normalizer;
pub use recording::{load_recording_csv, load_recordings, write_dataset, Area, Manifest, ManifestEntry, Recording};
pub use windowing::{make_windows, split_811, window_count, Window, WindowingConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed delimited file: {0}")]
    Csv(String),
    #[error("{file}: required channel '{channel}' is missing")]
    MissingChannel { file: String, channel: String },
    #[error("{file}: non-numeric value '{value}' at row {row}, column '{column}'")]
    NonNumeric {
        file: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("unknown area tag '{0}'")]
    UnknownArea(String),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("driver '{driver}' has no windows in the {split} split")]
    TooFewWindows { driver: String, split: String },
    #[error("infeasible driver profile: {0}")]
    InfeasibleProfile(String),
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
