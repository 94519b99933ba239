//! Synthetic multi-domain series with recurring discrete regimes.
//!
//! Every domain shares a sinusoidal base signal. On top of it, each domain
//! switches between regimes drawn from a pool that mixes regimes common to
//! all domains with regimes private to the domain. The regime schedule is
//! written next to each series so the ground truth can be recovered.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesDataset;
use crate::federation::{DatasetManifest, RunConfig};
use crate::seed::{stream, Purpose};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sine,
    Square,
    Sawtooth,
    Triangle,
}

impl Shape {
    const ALL: [Shape; 4] = [Shape::Sine, Shape::Square, Shape::Sawtooth, Shape::Triangle];

    /// One period on `phase` in cycles, amplitude 1.
    fn eval(self, phase: f64) -> f64 {
        let frac = phase - phase.floor();
        match self {
            Shape::Sine => (2.0 * PI * frac).sin(),
            Shape::Square => {
                if frac < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
            Shape::Sawtooth => 2.0 * frac - 1.0,
            Shape::Triangle => 1.0 - 4.0 * (frac - 0.5).abs(),
        }
    }
}

/// A recurring pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub shape: Shape,
    pub period: f64,
    pub amplitude: f64,
    pub offset: f64,
}

impl Regime {
    pub fn value(&self, step: usize) -> f64 {
        self.offset + self.amplitude * self.shape.eval(step as f64 / self.period)
    }
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub domains: usize,
    pub length: usize,
    pub channels: usize,
    pub seed: u64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_scale: f64,
    pub base_period: f64,
    pub base_amplitude: f64,
    /// Regimes available to every domain.
    pub shared_regimes: usize,
    /// Extra regimes per domain.
    pub private_regimes: usize,
    /// Probability that a segment uses a shared regime.
    pub shared_probability: f64,
    pub min_segment: usize,
    pub max_segment: usize,
    pub min_period: f64,
    pub max_period: f64,
    pub max_amplitude: f64,
    pub max_offset: f64,
    /// Fractions of the series used for training and validation.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            domains: 3,
            length: 2000,
            channels: 1,
            seed: 0,
            noise_scale: 0.1,
            base_period: 24.0,
            base_amplitude: 1.0,
            shared_regimes: 4,
            private_regimes: 2,
            shared_probability: 0.7,
            min_segment: 48,
            max_segment: 192,
            min_period: 6.0,
            max_period: 48.0,
            max_amplitude: 2.0,
            max_offset: 1.5,
            train_fraction: 0.7,
            val_fraction: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.domains == 0 || self.length == 0 || self.channels == 0 {
            return err("domains, length and channels must be positive");
        }
        if self.shared_regimes + self.private_regimes == 0 {
            return err("at least one regime is required");
        }
        if !(0.0..=1.0).contains(&self.shared_probability) {
            return err("shared_probability must lie in [0, 1]");
        }
        if self.min_segment == 0 || self.min_segment > self.max_segment {
            return err("segment bounds must satisfy 0 < min_segment <= max_segment");
        }
        if !(self.min_period > 0.0 && self.min_period <= self.max_period) || self.base_period <= 0.0
        {
            return err("periods must be positive with min_period <= max_period");
        }
        if !(self.noise_scale >= 0.0 && self.max_amplitude >= 0.0 && self.max_offset >= 0.0) {
            return err("noise, amplitude and offset bounds must be non-negative");
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t > 0.0 && v > 0.0 && t + v < 1.0) {
            return err(
                "train_fraction and val_fraction must be positive with a non-empty test share",
            );
        }
        Ok(())
    }

    /// `(train_end, val_end)` for the configured fractions.
    pub fn split_points(&self) -> (usize, usize) {
        let train_end = (self.train_fraction * self.length as f64).round() as usize;
        let val_end =
            ((self.train_fraction + self.val_fraction) * self.length as f64).round() as usize;
        (train_end, val_end)
    }
}

fn random_regime(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Regime {
    Regime {
        shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
        period: rng.random_range(spec.min_period..=spec.max_period),
        amplitude: rng.random_range(0.0..=spec.max_amplitude),
        offset: rng.random_range(-spec.max_offset..=spec.max_offset),
    }
}

/// One generated domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomain {
    pub name: String,
    /// `length x channels`.
    pub values: Array2<f64>,
    /// Regime id per step; shared regimes are `0..shared`, private ones follow.
    pub regime: Vec<usize>,
    /// Base signal per step and channel.
    pub base: Array2<f64>,
    /// Regime component per step and channel.
    pub component: Array2<f64>,
}

impl SyntheticDomain {
    pub fn dataset(&self) -> Result<TimeSeriesDataset> {
        TimeSeriesDataset::from_values(self.name.clone(), self.values.clone())
    }
}

/// Generates every domain; identical specs give identical output.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticDomain>> {
    spec.validate()?;
    let mut shared_rng = stream(spec.seed, Purpose::Synthetic, u64::MAX, 0);
    let shared: Vec<Regime> = (0..spec.shared_regimes)
        .map(|_| random_regime(spec, &mut shared_rng))
        .collect();
    let channel_phase: Vec<f64> = (0..spec.channels)
        .map(|c| c as f64 / spec.channels as f64)
        .collect();
    let noise =
        Normal::new(0.0, spec.noise_scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    (0..spec.domains)
        .map(|n| {
            let mut rng = stream(spec.seed, Purpose::Synthetic, n as u64, 0);
            let private: Vec<Regime> = (0..spec.private_regimes)
                .map(|_| random_regime(spec, &mut rng))
                .collect();
            let mut regime = Vec::with_capacity(spec.length);
            while regime.len() < spec.length {
                let use_shared = private.is_empty()
                    || (!shared.is_empty() && rng.random::<f64>() < spec.shared_probability);
                let id = if use_shared {
                    rng.random_range(0..shared.len())
                } else {
                    shared.len() + rng.random_range(0..private.len())
                };
                let len = rng.random_range(spec.min_segment..=spec.max_segment);
                regime.extend(std::iter::repeat_n(id, len.min(spec.length - regime.len())));
            }
            let pick = |id: usize| {
                if id < shared.len() {
                    shared[id]
                } else {
                    private[id - shared.len()]
                }
            };

            let mut base = Array2::zeros((spec.length, spec.channels));
            let mut component = Array2::zeros((spec.length, spec.channels));
            let mut values = Array2::zeros((spec.length, spec.channels));
            for t in 0..spec.length {
                for c in 0..spec.channels {
                    let b = spec.base_amplitude
                        * Shape::Sine.eval(t as f64 / spec.base_period + channel_phase[c]);
                    let r = pick(regime[t]).value(t);
                    base[[t, c]] = b;
                    component[[t, c]] = r;
                    let eps = if spec.noise_scale > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    values[[t, c]] = b + r + eps;
                }
            }
            Ok(SyntheticDomain {
                name: format!("domain_{n}"),
                values,
                regime,
                base,
                component,
            })
        })
        .collect()
}

/// Paths written for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct WrittenDomain {
    pub series: PathBuf,
    pub schedule: PathBuf,
}

/// Writes `{name}.csv`, `{name}_schedule.csv` for every domain and a
/// ready-to-run `config.toml` into `dir`.
pub fn write_domains(
    spec: &SyntheticSpec,
    domains: &[SyntheticDomain],
    dir: &Path,
    base_config: &RunConfig,
    manifest: &DatasetManifest,
) -> Result<Vec<WrittenDomain>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    let mut written = Vec::new();
    for d in domains {
        let series = dir.join(format!("{}.csv", d.name));
        let mut w = csv::Writer::from_path(&series).map_err(ser)?;
        let mut header = vec!["step".to_string()];
        header.extend((0..spec.channels).map(|c| format!("ch{c}")));
        w.write_record(&header).map_err(ser)?;
        for (t, row) in d.values.outer_iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(ser)?;
        }
        w.flush().map_err(|e| Error::io(&series, e))?;

        let schedule = dir.join(format!("{}_schedule.csv", d.name));
        let mut w = csv::Writer::from_path(&schedule).map_err(ser)?;
        let mut header = vec!["step".to_string(), "regime".to_string()];
        for c in 0..spec.channels {
            header.push(format!("base_ch{c}"));
            header.push(format!("regime_ch{c}"));
        }
        w.write_record(&header).map_err(ser)?;
        for t in 0..spec.length {
            let mut rec = vec![t.to_string(), d.regime[t].to_string()];
            for c in 0..spec.channels {
                rec.push(d.base[[t, c]].to_string());
                rec.push(d.component[[t, c]].to_string());
            }
            w.write_record(&rec).map_err(ser)?;
        }
        w.flush().map_err(|e| Error::io(&schedule, e))?;
        written.push(WrittenDomain { series, schedule });
    }

    let (train_end, val_end) = spec.split_points();
    let mut config = base_config.clone();
    config.datasets = domains
        .iter()
        .map(|d| DatasetManifest {
            name: d.name.clone(),
            path: PathBuf::from(format!("{}.csv", d.name)),
            train_end,
            val_end,
            ..manifest.clone()
        })
        .collect();
    let path = dir.join("config.toml");
    std::fs::write(&path, config.to_toml_string()?).map_err(|e| Error::io(&path, e))?;
    Ok(written)
}

/// Manifest defaults for synthetic domains: lookback 96, horizon 24.
pub fn default_manifest() -> DatasetManifest {
    DatasetManifest {
        name: String::new(),
        path: PathBuf::new(),
        train_end: 0,
        val_end: 0,
        lookback: 96,
        horizon: 24,
        patch_len: 4,
        batch_size: 32,
        train_stride: 1,
        eval_stride: 1,
        has_header: true,
        timestamp_column: true,
    }
}

/// In-memory federation input for generated domains.
pub fn domain_data(
    spec: &SyntheticSpec,
    domains: &[SyntheticDomain],
    manifest: &DatasetManifest,
) -> Result<Vec<crate::federation::DomainData>> {
    let (train_end, val_end) = spec.split_points();
    domains
        .iter()
        .map(|d| {
            let m = DatasetManifest {
                name: d.name.clone(),
                path: PathBuf::from(format!("{}.csv", d.name)),
                train_end,
                val_end,
                ..manifest.clone()
            };
            crate::federation::DomainData::new(m, d.dataset()?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_csv, CsvSchema};

    #[test]
    fn shapes_are_periodic_and_bounded() {
        for s in Shape::ALL {
            for i in 0..50 {
                let p = i as f64 * 0.137;
                assert!((s.eval(p) - s.eval(p + 3.0)).abs() < 1e-9);
                assert!(s.eval(p).abs() <= 1.0 + 1e-12);
            }
        }
        assert_eq!(Shape::Triangle.eval(0.5), 1.0);
        assert_eq!(Shape::Sawtooth.eval(0.0), -1.0);
    }

    #[test]
    fn generation_is_seeded() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|d| d.values.dim() == (2000, 1)));
        let other = generate(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a[0].values, other[0].values);
    }

    #[test]
    fn shared_regimes_recur_across_domains() {
        let spec = SyntheticSpec {
            shared_probability: 1.0,
            ..Default::default()
        };
        let d = generate(&spec).unwrap();
        assert!(d
            .iter()
            .all(|x| x.regime.iter().all(|&r| r < spec.shared_regimes)));
        let spec = SyntheticSpec {
            shared_regimes: 0,
            ..Default::default()
        };
        let d = generate(&spec).unwrap();
        assert!(d
            .iter()
            .all(|x| x.regime.iter().all(|&r| r < spec.private_regimes)));
    }

    #[test]
    fn zero_noise_series_is_recoverable_from_schedule() {
        let spec = SyntheticSpec {
            noise_scale: 0.0,
            channels: 2,
            length: 300,
            ..Default::default()
        };
        let domains = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = write_domains(
            &spec,
            &domains,
            dir.path(),
            &RunConfig::default(),
            &default_manifest(),
        )
        .unwrap();
        let series = load_csv(&written[1].series, CsvSchema::default()).unwrap();
        let mut sched = csv::Reader::from_path(&written[1].schedule).unwrap();
        for (t, rec) in sched.records().enumerate() {
            let rec = rec.unwrap();
            for c in 0..2 {
                let b: f64 = rec[2 + 2 * c].parse().unwrap();
                let r: f64 = rec[3 + 2 * c].parse().unwrap();
                assert_eq!(series.values[[t, c]], b + r);
            }
        }
        let config = RunConfig::load(&dir.path().join("config.toml")).unwrap();
        assert_eq!(config.datasets.len(), 3);
        assert_eq!(
            (config.datasets[0].train_end, config.datasets[0].val_end),
            (210, 240)
        );
        assert_eq!(config.datasets[2].path, dir.path().join("domain_2.csv"));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            SyntheticSpec {
                domains: 0,
                ..Default::default()
            },
            SyntheticSpec {
                min_segment: 10,
                max_segment: 5,
                ..Default::default()
            },
            SyntheticSpec {
                train_fraction: 0.9,
                val_fraction: 0.1,
                ..Default::default()
            },
            SyntheticSpec {
                shared_regimes: 0,
                private_regimes: 0,
                ..Default::default()
            },
        ] {
            assert!(generate(&spec).is_err());
        }
    }
}
