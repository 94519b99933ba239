//! Ingestion, splitting, windowing, instance normalization and patching.

mod dataset;
mod patch;
mod window;

pub use dataset::{load_csv, CsvSchema, SeriesView, SplitBoundaries, Splits, TimeSeriesDataset};
pub(crate) use patch::patchify_into;
pub use patch::{patch_count, patchify, PatchSequence};
pub use window::{
    make_instances, windows_per_channel, ForecastInstance, NormStats, ShortViewPolicy, WindowSet,
    WindowSpec, STD_FLOOR,
};
