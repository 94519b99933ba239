use serde::{Deserialize, Serialize};

use super::dataset::SeriesView;
use crate::{Error, Result};

/// Lower bound applied to the per-instance standard deviation.
pub const STD_FLOOR: f64 = 1e-5;

/// Instance-wise statistics of one lookback window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats {
        mean: 0.0,
        std: 1.0,
    };

    /// Population mean and standard deviation, std floored at [`STD_FLOOR`].
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        NormStats {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.std + self.mean
    }
}

/// One univariate training example: a normalized lookback and the raw
/// target that immediately follows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastInstance {
    /// Normalized lookback, length `L`.
    pub lookback: Vec<f64>,
    /// Raw-scale target, length `F`.
    pub target: Vec<f64>,
    pub channel: usize,
    /// Absolute dataset step of the first lookback value.
    pub start: usize,
    pub norm: NormStats,
}

impl ForecastInstance {
    pub fn normalized_target(&self) -> Vec<f64> {
        self.target
            .iter()
            .map(|&y| self.norm.normalize(y))
            .collect()
    }

    pub fn raw_lookback(&self) -> Vec<f64> {
        self.lookback
            .iter()
            .map(|&x| self.norm.denormalize(x))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(lookback: usize, horizon: usize, stride: usize) -> Self {
        Self {
            lookback,
            horizon,
            stride,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "lookback, horizon and stride must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// What to do with a view shorter than one full window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShortViewPolicy {
    #[default]
    Error,
    /// Return no instances and log a warning.
    Empty,
}

/// Number of windows per channel: `(len - L - F) / stride + 1`, or 0.
pub fn windows_per_channel(len: usize, spec: WindowSpec) -> usize {
    let span = spec.lookback + spec.horizon;
    if len < span || spec.stride == 0 {
        0
    } else {
        (len - span) / spec.stride + 1
    }
}

/// Lazily materialized windows over a view: one entry per (window, channel).
///
/// Training iterates over these indices instead of holding every instance in
/// memory, which matters for wide datasets.
#[derive(Debug, Clone)]
pub struct WindowSet<'a> {
    view: SeriesView<'a>,
    spec: WindowSpec,
    per_channel: usize,
}

impl<'a> WindowSet<'a> {
    pub fn new(view: SeriesView<'a>, spec: WindowSpec, policy: ShortViewPolicy) -> Result<Self> {
        spec.validate()?;
        let per_channel = windows_per_channel(view.len(), spec);
        if per_channel == 0 {
            let msg = format!(
                "view of {} steps is shorter than lookback {} + horizon {}",
                view.len(),
                spec.lookback,
                spec.horizon
            );
            match policy {
                ShortViewPolicy::Error => return Err(Error::InvalidArgument(msg)),
                ShortViewPolicy::Empty => log::warn!("{msg}; producing no instances"),
            }
        }
        Ok(Self {
            view,
            spec,
            per_channel,
        })
    }

    pub fn len(&self) -> usize {
        self.per_channel * self.view.channels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spec(&self) -> WindowSpec {
        self.spec
    }

    /// Instance `index`, ordered window-major then channel.
    pub fn get(&self, index: usize) -> ForecastInstance {
        assert!(index < self.len(), "window index {index} out of range");
        let channels = self.view.channels();
        let (window, channel) = (index / channels, index % channels);
        let offset = window * self.spec.stride;
        let series = self.view.channel(channel);
        let l = self.spec.lookback;
        let raw: Vec<f64> = series.slice(ndarray::s![offset..offset + l]).to_vec();
        let target = series
            .slice(ndarray::s![offset + l..offset + l + self.spec.horizon])
            .to_vec();
        let norm = NormStats::of(&raw);
        ForecastInstance {
            lookback: raw.iter().map(|&x| norm.normalize(x)).collect(),
            target,
            channel,
            start: self.view.range().start + offset,
            norm,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = ForecastInstance> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// Sliding windows over `view`, one normalized instance per (window, channel).
pub fn make_instances(
    view: &SeriesView<'_>,
    spec: WindowSpec,
    policy: ShortViewPolicy,
) -> Result<Vec<ForecastInstance>> {
    let set = WindowSet::new(view.clone(), spec, policy)?;
    Ok(set.iter().collect())
}
