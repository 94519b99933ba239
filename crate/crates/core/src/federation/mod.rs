//! Round orchestration: local training on every client, optional upload
//! noise, the server update, download, early stopping on the client-averaged
//! validation MSE, and test evaluation of the best round.

mod config;
mod noise;
mod report;
mod runtime;

pub use config::{
    apply_overrides, DatasetManifest, Mode, NoiseKind, NoiseSpec, RunConfig, OUTPUT_ROOT_ENV,
};
pub use noise::inject_noise;
pub use report::{
    read_reports_jsonl, write_reports_jsonl, write_summary_csv, DomainRoundReport, DomainSummary,
    RoundReport, SUMMARY_HEADER,
};
pub use runtime::{
    full_model_bytes, run_simulation, DomainData, EarlyStopper, Federation, RoundOutcome, RunFiles,
    SimulationResult,
};
