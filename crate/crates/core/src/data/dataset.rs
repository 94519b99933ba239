use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Column layout of an input CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvSchema {
    /// First line holds column names.
    pub has_header: bool,
    /// First column is a timestamp; it is kept as text and never parsed numerically.
    pub timestamp_column: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            has_header: true,
            timestamp_column: true,
        }
    }
}

/// `(train_end, val_end)` as exclusive step indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBoundaries {
    pub train_end: usize,
    pub val_end: usize,
}

impl SplitBoundaries {
    pub fn new(train_end: usize, val_end: usize) -> Self {
        Self { train_end, val_end }
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        if self.train_end == 0 || self.train_end >= self.val_end || self.val_end > total {
            return Err(Error::InvalidSplit(format!(
                "need 0 < train_end < val_end <= {total}, got ({}, {})",
                self.train_end, self.val_end
            )));
        }
        Ok(())
    }
}

/// A multichannel series, `values` shaped `T_total x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub values: Array2<f64>,
    pub timestamps: Option<Vec<String>>,
    pub channel_names: Vec<String>,
    pub split: Option<SplitBoundaries>,
}

impl TimeSeriesDataset {
    pub fn from_values(name: impl Into<String>, values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Empty("dataset has no rows or no channels".into()));
        }
        if let Some(((row, col), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "dataset value at row {}, channel {col}",
                row + 1
            )));
        }
        let channel_names = (0..values.ncols()).map(|c| format!("ch{c}")).collect();
        Ok(Self {
            name: name.into(),
            values,
            timestamps: None,
            channel_names,
            split: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn with_split(mut self, boundaries: SplitBoundaries) -> Result<Self> {
        boundaries.validate(self.len())?;
        self.split = Some(boundaries);
        Ok(self)
    }

    /// Whole-series view.
    pub fn view(&self) -> SeriesView<'_> {
        SeriesView {
            dataset: self,
            range: 0..self.len(),
        }
    }

    /// Splits into contiguous, disjoint train / validation / test views.
    pub fn split(&self, boundaries: SplitBoundaries) -> Result<Splits<'_>> {
        boundaries.validate(self.len())?;
        let view = |range| SeriesView {
            dataset: self,
            range,
        };
        Ok(Splits {
            train: view(0..boundaries.train_end),
            val: view(boundaries.train_end..boundaries.val_end),
            test: view(boundaries.val_end..self.len()),
        })
    }
}

/// A contiguous, read-only step range of a dataset.
#[derive(Debug, Clone)]
pub struct SeriesView<'a> {
    dataset: &'a TimeSeriesDataset,
    range: Range<usize>,
}

impl<'a> SeriesView<'a> {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn channels(&self) -> usize {
        self.dataset.channels()
    }

    pub fn dataset(&self) -> &'a TimeSeriesDataset {
        self.dataset
    }

    pub fn channel(&self, channel: usize) -> ArrayView1<'a, f64> {
        self.dataset
            .values
            .index_axis(Axis(1), channel)
            .slice_move(ndarray::s![self.range.clone()])
    }

    /// Chronological prefix holding `floor(fraction * len)` steps.
    pub fn few_shot_subset(&self, fraction: f64) -> Result<SeriesView<'a>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "few-shot fraction must lie in (0, 1], got {fraction}"
            )));
        }
        let keep = (fraction * self.len() as f64).floor() as usize;
        Ok(SeriesView {
            dataset: self.dataset,
            range: self.range.start..self.range.start + keep,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Splits<'a> {
    pub train: SeriesView<'a>,
    pub val: SeriesView<'a>,
    pub test: SeriesView<'a>,
}

/// Reads a CSV whose (optional) first column is a timestamp and whose
/// remaining columns are numeric channels, in column order.
pub fn load_csv(path: impl AsRef<Path>, schema: CsvSchema) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(false)
        .from_reader(file);

    let skip = usize::from(schema.timestamp_column);
    let mut names: Vec<String> = if schema.has_header {
        let headers = reader
            .headers()
            .map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
        headers.iter().skip(skip).map(str::to_string).collect()
    } else {
        Vec::new()
    };

    let mut data = Vec::new();
    let mut timestamps = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            column_name: String::new(),
            message: e.to_string(),
        })?;
        let channels = record.len().saturating_sub(skip);
        match width {
            None => width = Some(channels),
            Some(w) if w != channels => {
                return Err(Error::Parse {
                    row,
                    column: record.len(),
                    column_name: String::new(),
                    message: format!("expected {} columns, found {}", w + skip, record.len()),
                })
            }
            _ => {}
        }
        if schema.timestamp_column {
            timestamps.push(record.get(0).unwrap_or_default().to_string());
        }
        for (c, cell) in record.iter().enumerate().skip(skip) {
            let name = names.get(c - skip).cloned().unwrap_or_default();
            let value: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                column_name: name.clone(),
                message: format!("not a number: {cell:?}"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + 1,
                    column_name: name,
                    message: format!("missing or non-finite value: {cell:?}"),
                });
            }
            data.push(value);
        }
    }

    let channels = width.unwrap_or(0);
    if data.is_empty() || channels == 0 {
        return Err(Error::Empty(format!(
            "{} has no numeric rows",
            path.display()
        )));
    }
    let rows = data.len() / channels;
    let values = Array2::from_shape_vec((rows, channels), data)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    if names.len() != channels {
        names = (0..channels).map(|c| format!("ch{c}")).collect();
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(TimeSeriesDataset {
        name,
        values,
        timestamps: schema.timestamp_column.then_some(timestamps),
        channel_names: names,
        split: None,
    })
}
