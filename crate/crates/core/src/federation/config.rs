use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CsvSchema, SplitBoundaries, WindowSpec};
use crate::model::{AdamConfig, Hyperparams, MetricScale, ModelConfig};
use crate::server::AlignmentConfig;
use crate::{Error, Result};

/// Environment variable naming the directory under which runs are written.
pub const OUTPUT_ROOT_ENV: &str = "PROTOFED_OUTPUT_ROOT";

/// How memories move between clients and server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Similarity clustering with shared and personalized blocks.
    #[default]
    Fedpm,
    /// Index-wise mean of the uploaded memories.
    Average,
    /// No communication at all.
    LocalOnly,
    /// Clustering with every slot given to the shared block.
    GlobalOnly,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Fedpm => "fedpm",
            Mode::Average => "average",
            Mode::LocalOnly => "local_only",
            Mode::GlobalOnly => "global_only",
        }
    }

    pub fn communicates(&self) -> bool {
        *self != Mode::LocalOnly
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    None,
    /// Normal with mean `mu` and standard deviation `lambda`.
    Gaussian,
    /// Laplace with location `mu` and scale `lambda`.
    Laplace,
    /// Exponential with rate `lambda`; `mu` is ignored.
    Exponential,
}

/// Noise added to uploaded prototype vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub mu: f64,
    pub lambda: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::None,
            mu: 0.0,
            lambda: 1.0,
        }
    }
}

impl NoiseSpec {
    pub fn gaussian(mu: f64, lambda: f64) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            mu,
            lambda,
        }
    }

    pub fn laplace(mu: f64, lambda: f64) -> Self {
        Self {
            kind: NoiseKind::Laplace,
            mu,
            lambda,
        }
    }

    pub fn exponential(lambda: f64) -> Self {
        Self {
            kind: NoiseKind::Exponential,
            mu: 0.0,
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != NoiseKind::None
            && !(self.lambda > 0.0 && self.lambda.is_finite() && self.mu.is_finite())
        {
            return Err(Error::Config(format!(
                "noise needs finite mu and lambda > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One domain's data and shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    /// CSV path; relative paths resolve against the config file's directory.
    pub path: PathBuf,
    pub train_end: usize,
    pub val_end: usize,
    #[serde(default = "defaults::lookback")]
    pub lookback: usize,
    #[serde(default = "defaults::horizon")]
    pub horizon: usize,
    #[serde(default = "defaults::patch_len")]
    pub patch_len: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::stride")]
    pub train_stride: usize,
    #[serde(default = "defaults::stride")]
    pub eval_stride: usize,
    #[serde(default = "defaults::yes")]
    pub has_header: bool,
    #[serde(default = "defaults::yes")]
    pub timestamp_column: bool,
}

impl DatasetManifest {
    pub fn split(&self) -> SplitBoundaries {
        SplitBoundaries::new(self.train_end, self.val_end)
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            has_header: self.has_header,
            timestamp_column: self.timestamp_column,
        }
    }

    pub fn train_windows(&self) -> WindowSpec {
        WindowSpec {
            lookback: self.lookback,
            horizon: self.horizon,
            stride: self.train_stride,
        }
    }

    pub fn eval_windows(&self) -> WindowSpec {
        WindowSpec {
            lookback: self.lookback,
            horizon: self.horizon,
            stride: self.eval_stride,
        }
    }
}

mod defaults {
    pub fn lookback() -> usize {
        96
    }
    pub fn horizon() -> usize {
        96
    }
    pub fn patch_len() -> usize {
        4
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn stride() -> usize {
        1
    }
    pub fn yes() -> bool {
        true
    }
    pub fn run_id() -> String {
        "run".into()
    }
}

/// Everything a simulation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(default = "defaults::run_id")]
    pub run_id: String,
    pub seed: u64,
    pub mode: Mode,
    /// Maximum communication rounds.
    pub rounds: usize,
    pub local_epochs: usize,
    /// Rounds without a lower averaged validation MSE before stopping.
    pub patience: usize,
    pub gamma: f64,
    pub delta: f64,
    pub beta: f64,
    pub memory_size: usize,
    pub dim: usize,
    pub learning_rate: f64,
    /// Hidden width of the MLP blocks; `2 * dim` when absent.
    pub hidden: Option<usize>,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub few_shot_fraction: f64,
    pub noise: NoiseSpec,
    pub metric_scale: MetricScale,
    /// Randomly permute memory rows before upload.
    pub permute_uploads: bool,
    pub usage_final_epoch_only: bool,
    /// Draw every client's encoder and decoder from the same stream, so
    /// clients with equal shapes start from identical weights.
    pub shared_model_init: bool,
    /// Write a checkpoint for every round, not only the best one.
    pub keep_all_checkpoints: bool,
    /// Write the server's round artifact next to each round's checkpoints.
    pub dump_artifacts: bool,
    /// Add wall-clock timings to round reports (breaks bitwise replay).
    pub record_timing: bool,
    pub output_root: Option<PathBuf>,
    pub datasets: Vec<DatasetManifest>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: defaults::run_id(),
            seed: 0,
            mode: Mode::Fedpm,
            rounds: 100,
            local_epochs: 5,
            patience: 10,
            gamma: 0.95,
            delta: 0.7,
            beta: 0.25,
            memory_size: 256,
            dim: 64,
            learning_rate: 1e-5,
            hidden: None,
            encoder_blocks: 2,
            decoder_blocks: 1,
            few_shot_fraction: 1.0,
            noise: NoiseSpec::default(),
            metric_scale: MetricScale::Normalized,
            permute_uploads: false,
            usage_final_epoch_only: false,
            shared_model_init: true,
            keep_all_checkpoints: false,
            dump_artifacts: false,
            record_timing: false,
            output_root: None,
            datasets: Vec::new(),
        }
    }
}

/// Keys that may be set even though they are absent from a serialized default.
const OPTIONAL_KEYS: &[&str] = &["hidden", "output_root"];

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file, resolving relative dataset paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for ds in &mut config.datasets {
            if ds.path.is_relative() {
                ds.path = base.join(&ds.path);
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Applies `key=value` overrides. Keys are dotted paths into the config
    /// (`noise.kind`, `datasets.0.horizon`); `datasets.*.key` sets every
    /// dataset. Unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        apply_overrides(self, overrides, OPTIONAL_KEYS)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
            ("patience", self.patience),
            ("memory_size", self.memory_size),
            ("dim", self.dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.few_shot_fraction > 0.0 && self.few_shot_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "few_shot_fraction must lie in (0, 1], got {}",
                self.few_shot_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.beta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(
                "beta must be non-negative and delta finite".into(),
            ));
        }
        self.noise.validate()?;
        if self.datasets.is_empty() {
            return Err(Error::Config("at least one dataset is required".into()));
        }
        for ds in &self.datasets {
            if ds.batch_size == 0 || ds.train_stride == 0 || ds.eval_stride == 0 {
                return Err(Error::Config(format!(
                    "dataset {}: batch size and strides must be positive",
                    ds.name
                )));
            }
            self.model_config(ds)
                .validate()
                .map_err(|e| Error::Config(format!("dataset {}: {e}", ds.name)))?;
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("dataset names must be unique".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, ds: &DatasetManifest) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden.unwrap_or(2 * self.dim),
            encoder_blocks: self.encoder_blocks,
            decoder_blocks: self.decoder_blocks,
            ..ModelConfig::new(
                ds.lookback,
                ds.horizon,
                ds.patch_len,
                self.dim,
                self.memory_size,
            )
        }
    }

    pub fn hyperparams(&self, ds: &DatasetManifest) -> Hyperparams {
        Hyperparams {
            beta: self.beta,
            adam: AdamConfig::with_lr(self.learning_rate),
            batch_size: ds.batch_size,
            usage_final_epoch_only: self.usage_final_epoch_only,
        }
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig {
            gamma: self.gamma,
            delta: self.delta,
            global_only: self.mode == Mode::GlobalOnly,
        }
    }

    /// `output_root` if set, else the environment variable, else `runs`.
    pub fn resolved_output_root(&self) -> PathBuf {
        self.output_root
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolved_output_root().join(&self.run_id)
    }
}

fn parse_value(raw: &str, current: Option<&toml::Value>) -> toml::Value {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"));
    match (parsed, current) {
        (Some(toml::Value::Integer(i)), Some(toml::Value::Float(_))) => {
            toml::Value::Float(i as f64)
        }
        (Some(v), Some(toml::Value::String(_))) if !v.is_str() => {
            toml::Value::String(raw.to_string())
        }
        (Some(v), _) => v,
        (None, _) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `key=value` overrides to any serializable value through its TOML
/// form. Keys absent from the serialized value are rejected unless listed in
/// `optional`.
pub fn apply_overrides<T, S>(value: &T, overrides: &[S], optional: &[&str]) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned + Clone,
    S: AsRef<str>,
{
    if overrides.is_empty() {
        return Ok(value.clone());
    }
    let mut root = toml::Value::try_from(value).map_err(|e| Error::Serialization(e.to_string()))?;
    for raw in overrides {
        let raw = raw.as_ref();
        let (key, value) = raw.split_once('=').ok_or_else(|| {
            Error::Config(format!("override `{raw}` is not of the form key=value"))
        })?;
        let path: Vec<&str> = key.trim().split('.').collect();
        set_path(&mut root, &path, value.trim(), key.trim(), optional)?;
    }
    root.try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn set_path(
    node: &mut toml::Value,
    path: &[&str],
    raw: &str,
    full_key: &str,
    optional: &[&str],
) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key `{full_key}`"));
    let (head, rest) = path.split_first().ok_or_else(unknown)?;
    match node {
        toml::Value::Table(table) => {
            if rest.is_empty() {
                let current = table.get(*head);
                if current.is_none() && !optional.contains(&full_key) {
                    return Err(unknown());
                }
                let value = parse_value(raw, current);
                table.insert((*head).to_string(), value);
                Ok(())
            } else {
                set_path(
                    table.get_mut(*head).ok_or_else(unknown)?,
                    rest,
                    raw,
                    full_key,
                    optional,
                )
            }
        }
        toml::Value::Array(items) if !rest.is_empty() => {
            if *head == "*" {
                for item in items.iter_mut() {
                    set_path(item, rest, raw, full_key, optional)?;
                }
                Ok(())
            } else {
                let i: usize = head.parse().map_err(|_| unknown())?;
                set_path(
                    items.get_mut(i).ok_or_else(unknown)?,
                    rest,
                    raw,
                    full_key,
                    optional,
                )
            }
        }
        _ => Err(unknown()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
        run_id = "demo"
        seed = 7

        [[datasets]]
        name = "a"
        path = "a.csv"
        train_end = 100
        val_end = 150

        [[datasets]]
        name = "b"
        path = "/data/b.csv"
        train_end = 100
        val_end = 150
        horizon = 24
    "#;

    #[test]
    fn defaults_follow_reference_settings() {
        let c = RunConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!((c.rounds, c.local_epochs, c.patience), (100, 5, 10));
        assert_eq!((c.gamma, c.delta, c.beta), (0.95, 0.7, 0.25));
        assert_eq!((c.memory_size, c.dim, c.learning_rate), (256, 64, 1e-5));
        assert_eq!(c.datasets[0].lookback, 96);
        assert_eq!(c.datasets[0].patch_len, 4);
        assert_eq!(c.datasets[1].horizon, 24);
        assert_eq!(c.mode, Mode::Fedpm);
        c.validate().unwrap();
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let c = RunConfig::from_toml_str(SAMPLE).unwrap();
        let o = c
            .with_overrides(&[
                "mode=local_only",
                "gamma=1",
                "noise.kind=gaussian",
                "datasets.*.horizon=12",
            ])
            .unwrap();
        assert_eq!(o.mode, Mode::LocalOnly);
        assert_eq!(o.gamma, 1.0);
        assert_eq!(o.noise.kind, NoiseKind::Gaussian);
        assert!(o.datasets.iter().all(|d| d.horizon == 12));
        let o = c
            .with_overrides(&["datasets.1.name=z", "hidden=16", "run_id=42"])
            .unwrap();
        assert_eq!(o.datasets[1].name, "z");
        assert_eq!(o.hidden, Some(16));
        assert_eq!(o.run_id, "42");

        for bad in [
            "gammma=1",
            "noise.sigma=2",
            "datasets.5.horizon=3",
            "mode",
            "mode=bogus",
        ] {
            assert!(
                matches!(c.with_overrides(&[bad]), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("rounds = 3\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml_str("noise = { kind = \"poisson\" }\n").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let c = RunConfig::from_toml_str(SAMPLE).unwrap();
        for o in [
            "rounds=0",
            "local_epochs=0",
            "patience=0",
            "gamma=1.5",
            "few_shot_fraction=0",
        ] {
            assert!(c.with_overrides(&[o]).unwrap().validate().is_err(), "{o}");
        }
        assert!(RunConfig::default().validate().is_err());
        let o = c
            .with_overrides(&["noise.kind=laplace", "noise.lambda=0"])
            .unwrap();
        assert!(o.validate().is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, SAMPLE).unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.datasets[0].path, dir.path().join("a.csv"));
        assert_eq!(c.datasets[1].path, PathBuf::from("/data/b.csv"));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::from_toml_str(SAMPLE).unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(c, back);
    }
}
