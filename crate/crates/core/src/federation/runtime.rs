use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetManifest, Mode, RunConfig};
use super::noise::inject_noise;
use super::report::{
    write_reports_jsonl, write_summary_csv, DomainRoundReport, DomainSummary, RoundReport,
};
use crate::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::data::{load_csv, ShortViewPolicy, TimeSeriesDataset, WindowSet};
use crate::memory::PrototypeMemory;
use crate::model::{ClientState, Metrics, ModelParams};
use crate::seed::{stream, Purpose};
use crate::server::{aggregate_average, align_memories, RoundArtifact};
use crate::{Error, Result};

/// A domain's dataset together with its manifest.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub manifest: DatasetManifest,
    pub dataset: TimeSeriesDataset,
}

impl DomainData {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let dataset = load_csv(&manifest.path, manifest.schema())?;
        Self::new(manifest.clone(), dataset)
    }

    pub fn new(manifest: DatasetManifest, dataset: TimeSeriesDataset) -> Result<Self> {
        let dataset = dataset
            .with_split(manifest.split())
            .map_err(|e| Error::Config(format!("dataset {}: {e}", manifest.name)))?;
        Ok(Self { manifest, dataset })
    }

    pub fn train(&self, few_shot_fraction: f64) -> Result<WindowSet<'_>> {
        let view = self
            .dataset
            .split(self.manifest.split())?
            .train
            .few_shot_subset(few_shot_fraction)?;
        WindowSet::new(view, self.manifest.train_windows(), ShortViewPolicy::Error)
    }

    pub fn val(&self) -> Result<WindowSet<'_>> {
        let view = self.dataset.split(self.manifest.split())?.val;
        WindowSet::new(view, self.manifest.eval_windows(), ShortViewPolicy::Error)
    }

    pub fn test(&self) -> Result<WindowSet<'_>> {
        let view = self.dataset.split(self.manifest.split())?.test;
        WindowSet::new(view, self.manifest.eval_windows(), ShortViewPolicy::Error)
    }
}

/// Stops after `patience` consecutive rounds without a strictly lower value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    pub stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records a round; returns whether it is the new best.
    pub fn observe(&mut self, round: usize, value: f64) -> bool {
        let better = !value.is_nan() && self.best.is_none_or(|(_, best)| value < best);
        if better {
            self.best = Some((round, value));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        better
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best_round(&self) -> Option<usize> {
        self.best.map(|(r, _)| r)
    }
}

/// Everything one round produced.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub report: RoundReport,
    /// Client states after local training, before the download.
    pub trained: Vec<ClientState>,
    pub validation: Vec<Metrics>,
    /// Memories installed on each client; `None` without communication.
    pub downloads: Vec<Option<PrototypeMemory>>,
    pub artifact: Option<RoundArtifact>,
}

/// Clients plus their data.
#[derive(Debug, Clone)]
pub struct Federation {
    pub config: RunConfig,
    pub domains: Vec<DomainData>,
    pub clients: Vec<ClientState>,
}

impl Federation {
    /// Validates the config and loads every dataset before any training.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let domains = config
            .datasets
            .iter()
            .map(DomainData::load)
            .collect::<Result<Vec<_>>>()?;
        Self::from_domains(config, domains)
    }

    /// Uses in-memory datasets; manifest paths are ignored.
    pub fn from_domains(config: RunConfig, domains: Vec<DomainData>) -> Result<Self> {
        config.validate()?;
        for d in &domains {
            for (part, set) in [
                ("train", d.train(config.few_shot_fraction)),
                ("validation", d.val()),
                ("test", d.test()),
            ] {
                let set = set.map_err(|e| {
                    Error::Config(format!("dataset {} {part} split: {e}", d.manifest.name))
                })?;
                if set.is_empty() {
                    return Err(Error::Config(format!(
                        "dataset {} has no {part} windows",
                        d.manifest.name
                    )));
                }
            }
        }
        let clients = domains
            .iter()
            .enumerate()
            .map(|(n, d)| {
                let memory = PrototypeMemory::init_with_rng(
                    config.memory_size,
                    config.dim,
                    &mut stream(config.seed, Purpose::MemoryInit, n as u64, 0),
                )?;
                ClientState::new(
                    d.manifest.name.clone(),
                    config.model_config(&d.manifest),
                    config.hyperparams(&d.manifest),
                    memory,
                    &mut stream(
                        config.seed,
                        Purpose::ModelInit,
                        if config.shared_model_init {
                            0
                        } else {
                            n as u64
                        },
                        0,
                    ),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            domains,
            clients,
        })
    }

    fn client_error(&self, n: usize, round: usize) -> impl Fn(Error) -> Error + '_ {
        move |e| Error::Client {
            domain: self.domains[n].manifest.name.clone(),
            round,
            source: Box::new(e),
        }
    }

    /// Local training, validation, upload, server update and download.
    pub fn run_round(&mut self, round: usize) -> Result<RoundOutcome> {
        let started = Instant::now();
        let config = &self.config;
        let (seed, epochs) = (config.seed, config.local_epochs);
        let (m, d) = (config.memory_size, config.dim);

        let results: Vec<Result<(crate::model::RoundTrainStats, Metrics)>> = self
            .clients
            .par_iter_mut()
            .zip(self.domains.par_iter())
            .enumerate()
            .map(|(n, (client, domain))| {
                let train = domain.train(config.few_shot_fraction)?;
                let mut rng = stream(seed, Purpose::Shuffle, n as u64, round as u64);
                let stats = client.train_round(&train, epochs, &mut rng)?;
                let val = client.evaluate(&domain.val()?, config.metric_scale)?;
                Ok((stats, val))
            })
            .collect();
        let mut stats = Vec::with_capacity(results.len());
        let mut validation = Vec::with_capacity(results.len());
        for (n, r) in results.into_iter().enumerate() {
            let (s, v) = r.map_err(self.client_error(n, round))?;
            stats.push(s);
            validation.push(v);
        }
        let trained = self.clients.clone();

        let n_domains = self.clients.len();
        let mut upload_bytes = vec![0; n_domains];
        let mut download_bytes = vec![0; n_domains];
        let mut downloads: Vec<Option<PrototypeMemory>> = vec![None; n_domains];
        let mut artifact = None;
        let mut composition = vec![(0usize, 0usize, 0usize); n_domains];

        if config.mode.communicates() {
            let mut received = Vec::with_capacity(n_domains);
            for (n, client) in self.clients.iter().enumerate() {
                let mut upload = inject_noise(
                    &client.memory,
                    &config.noise,
                    &mut stream(seed, Purpose::Noise, n as u64, round as u64),
                )
                .map_err(self.client_error(n, round))?;
                if config.permute_uploads {
                    let mut perm: Vec<usize> = (0..m).collect();
                    perm.shuffle(&mut stream(
                        seed,
                        Purpose::UploadPermutation,
                        n as u64,
                        round as u64,
                    ));
                    upload = upload.permuted(&perm);
                }
                let wire = upload.to_wire();
                upload_bytes[n] = wire.len();
                received.push(
                    PrototypeMemory::from_wire(&wire, m, d)?.with_domain(client.domain_id.clone()),
                );
            }

            let assembled: Vec<PrototypeMemory> = match config.mode {
                Mode::Average => {
                    let mean = aggregate_average(&received)?;
                    composition.fill((m, 0, 0));
                    vec![mean; n_domains]
                }
                _ => {
                    let out = align_memories(&received, &config.alignment(), seed, round as u64)?;
                    for (c, dom) in composition.iter_mut().zip(&out.artifact.domains) {
                        *c = (out.artifact.k, dom.personalized, dom.fresh);
                    }
                    artifact = Some(out.artifact);
                    out.memories
                }
            };

            for (n, global) in assembled.into_iter().enumerate() {
                let wire = global.to_wire();
                download_bytes[n] = wire.len();
                let installed = PrototypeMemory::from_wire(&wire, m, d)?
                    .with_provenance(global.provenance.clone())?;
                self.clients[n]
                    .install_memory(installed.clone())
                    .map_err(self.client_error(n, round))?;
                downloads[n] = Some(installed);
            }
        }

        let domains = (0..n_domains)
            .map(|n| DomainRoundReport {
                domain: self.domains[n].manifest.name.clone(),
                train_loss: stats[n].loss,
                steps: stats[n].steps,
                validation: validation[n],
                upload_bytes: upload_bytes[n],
                download_bytes: download_bytes[n],
                shared: composition[n].0,
                personalized: composition[n].1,
                fresh: composition[n].2,
            })
            .collect();
        let nf = n_domains as f64;
        let report = RoundReport {
            round,
            mode: config.mode,
            domains,
            avg_val_mse: validation.iter().map(|v| v.mse).sum::<f64>() / nf,
            avg_val_mae: validation.iter().map(|v| v.mae).sum::<f64>() / nf,
            improved: false,
            best_round: round,
            edges: artifact.as_ref().map_or(0, |a| a.edges),
            clusters: artifact.as_ref().map_or(0, |a| a.clusters.len()),
            shared: artifact
                .as_ref()
                .map_or(if config.mode == Mode::Average { m } else { 0 }, |a| a.k),
            wall_time_ms: config
                .record_timing
                .then(|| started.elapsed().as_millis() as u64),
        };
        Ok(RoundOutcome {
            report,
            trained,
            validation,
            downloads,
            artifact,
        })
    }

    fn checkpoints(&self, outcome: &RoundOutcome) -> Vec<Checkpoint> {
        (0..self.clients.len())
            .map(|n| Checkpoint {
                version: CHECKPOINT_VERSION,
                run_id: self.config.run_id.clone(),
                round: outcome.report.round,
                domain: self.domains[n].manifest.name.clone(),
                domain_index: n,
                client: outcome.trained[n].clone(),
                global_memory: outcome.downloads[n].clone(),
                validation: outcome.validation[n],
            })
            .collect()
    }

    /// Runs rounds until the round limit or early stop, then evaluates the
    /// best round's clients on the test split. With `run_dir`, writes the
    /// report stream, summary and checkpoints there.
    pub fn run(mut self, run_dir: Option<&Path>) -> Result<SimulationResult> {
        if let Some(dir) = run_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut stopper = EarlyStopper::new(self.config.patience);
        let mut reports = Vec::new();
        let mut best: Vec<Checkpoint> = Vec::new();
        let mut traffic = vec![0usize; self.clients.len()];
        let mut per_round = vec![(0usize, 0usize); self.clients.len()];
        let mut stopped_early = false;

        for round in 1..=self.config.rounds {
            let mut outcome = self.run_round(round)?;
            let improved = stopper.observe(round, outcome.report.avg_val_mse);
            outcome.report.improved = improved;
            outcome.report.best_round = stopper.best_round().unwrap_or(round);
            for (n, d) in outcome.report.domains.iter().enumerate() {
                traffic[n] += d.upload_bytes + d.download_bytes;
                per_round[n] = (d.upload_bytes, d.download_bytes);
            }
            log::info!(
                "round {round}: avg val mse {:.6}{}",
                outcome.report.avg_val_mse,
                if improved { " (best)" } else { "" }
            );
            let cks = self.checkpoints(&outcome);
            if let Some(dir) = run_dir {
                if self.config.keep_all_checkpoints {
                    for ck in &cks {
                        ck.save(dir)?;
                    }
                }
                if self.config.dump_artifacts {
                    if let Some(a) = &outcome.artifact {
                        let adir = dir.join("artifacts");
                        std::fs::create_dir_all(&adir).map_err(|e| Error::io(&adir, e))?;
                        let path = adir.join(format!("round_{round}.json"));
                        let text = serde_json::to_string(a)
                            .map_err(|e| Error::Serialization(e.to_string()))?;
                        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                    }
                }
            }
            if improved {
                best = cks;
            }
            reports.push(outcome.report);
            if stopper.should_stop() {
                stopped_early = round < self.config.rounds;
                break;
            }
        }

        let best_round = stopper.best_round().ok_or_else(|| {
            Error::NonFinite("validation loss never produced a usable round".into())
        })?;
        let mut summary = Vec::with_capacity(best.len());
        for (n, ck) in best.iter().enumerate() {
            let test = ck
                .client
                .evaluate(&self.domains[n].test()?, self.config.metric_scale)
                .map_err(self.client_error(n, best_round))?;
            let full = full_model_bytes(&ck.client.model, self.config.memory_size, self.config.dim);
            summary.push(DomainSummary {
                domain: ck.domain.clone(),
                horizon: self.domains[n].manifest.horizon,
                mse: test.mse,
                mae: test.mae,
                upload_bytes_per_round: per_round[n].0,
                download_bytes_per_round: per_round[n].1,
                total_bytes: traffic[n],
                full_model_bytes: full,
                payload_ratio: per_round[n].0 as f64 / full as f64,
            });
        }

        let mut files = None;
        if let Some(dir) = run_dir {
            if !self.config.keep_all_checkpoints {
                for ck in &best {
                    ck.save(dir)?;
                }
            }
            let reports_path = dir.join("reports.jsonl");
            write_reports_jsonl(&reports, &reports_path)?;
            let summary_path = dir.join("summary.csv");
            let file =
                std::fs::File::create(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
            write_summary_csv(&summary, file)?;
            files = Some(RunFiles {
                reports: reports_path,
                summary: summary_path,
                best_checkpoints: dir.join(best_round.to_string()),
            });
        }

        Ok(SimulationResult {
            reports,
            best_round,
            stopped_early,
            summary,
            best,
            files,
        })
    }
}

/// Bytes to transmit every trainable value of a client (model and memory) once.
pub fn full_model_bytes(model: &ModelParams, m: usize, d: usize) -> usize {
    8 * (model.parameter_count() + m * d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFiles {
    pub reports: PathBuf,
    pub summary: PathBuf,
    pub best_checkpoints: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub reports: Vec<RoundReport>,
    pub best_round: usize,
    pub stopped_early: bool,
    /// Test metrics and traffic per domain.
    pub summary: Vec<DomainSummary>,
    /// Best-round checkpoints, one per domain.
    pub best: Vec<Checkpoint>,
    pub files: Option<RunFiles>,
}

impl SimulationResult {
    pub fn mean_test_mse(&self) -> f64 {
        self.summary.iter().map(|s| s.mse).sum::<f64>() / self.summary.len() as f64
    }
}

/// Loads data, runs the federation and writes results under the configured
/// run directory when `write` is set.
pub fn run_simulation(config: &RunConfig, write: bool) -> Result<SimulationResult> {
    let dir = write.then(|| config.run_dir());
    Federation::new(config.clone())?.run(dir.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stop_after_worsening() {
        let mut s = EarlyStopper::new(1);
        assert!(s.observe(1, 1.0));
        assert!(!s.should_stop());
        assert!(!s.observe(2, 2.0));
        assert!(s.should_stop());
        assert_eq!(s.best_round(), Some(1));
    }

    #[test]
    fn early_stop_counts_consecutive_stale_rounds() {
        let mut s = EarlyStopper::new(2);
        s.observe(1, 3.0);
        s.observe(2, 3.0);
        assert!(!s.should_stop());
        assert!(s.observe(3, 2.0));
        s.observe(4, 2.5);
        assert!(!s.should_stop());
        s.observe(5, 2.0);
        assert!(s.should_stop());
        assert_eq!(s.best_round(), Some(3));
    }

    #[test]
    fn nan_never_becomes_best() {
        let mut s = EarlyStopper::new(3);
        assert!(!s.observe(0, f64::NAN));
        assert_eq!(s.best_round(), None);
        s.observe(1, 1.0);
        assert!(!s.observe(2, f64::NAN));
        assert_eq!(s.best_round(), Some(1));
    }
}
