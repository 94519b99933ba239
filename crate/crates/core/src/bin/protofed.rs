//! Command-line driver: simulation, evaluation, memory inspection, synthetic
//! data generation and gradient checking.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
//! configuration error. Run output lands under `PROTOFED_OUTPUT_ROOT` unless
//! the config sets `output_root`.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use protofed::checkpoint::Checkpoint;
use protofed::federation::{
    apply_overrides, run_simulation, write_summary_csv, DomainData, RunConfig,
};
use protofed::gradcheck::{self, GradcheckOptions};
use protofed::inspect::{inspect, View};
use protofed::synthetic::{self, SyntheticSpec};
use protofed::Error;

#[derive(Parser)]
#[command(
    name = "protofed",
    version,
    about = "Federated forecasting with prototype memories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated simulation and write reports, summary and checkpoints.
    Simulate {
        /// Run config (TOML).
        config: PathBuf,
        /// Config overrides such as `mode=local_only` or `datasets.*.horizon=24`.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run without writing any files.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score saved checkpoints on the test split of each domain.
    Evaluate {
        config: PathBuf,
        /// Directory holding one checkpoint per domain.
        checkpoints: PathBuf,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Dump the prototypes of one checkpoint.
    InspectMemory {
        /// Checkpoint file, or a round directory together with `--domain`.
        checkpoint: PathBuf,
        #[arg(long)]
        domain: Option<String>,
        #[arg(long, value_enum, default_value_t = ViewArg::Local)]
        view: ViewArg,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Cosine threshold counted in the pairwise summary.
        #[arg(long, default_value_t = 0.7)]
        threshold: f64,
    },
    /// Write synthetic regime-switching domains and a matching config.
    GenSynthetic {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Generator spec (TOML); defaults are used when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Base run config copied into the generated `config.toml`.
        #[arg(long)]
        base_config: Option<PathBuf>,
        /// Spec overrides such as `domains=4` or `noise_scale=0`.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Perturb the analytic gradient of one group (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Local,
    Global,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

/// Failure with the exit status it maps to.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidSplit(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate {
            config,
            overrides,
            dry_run,
        } => simulate(&config, &overrides, dry_run),
        Command::Evaluate {
            config,
            checkpoints,
            overrides,
        } => evaluate(&config, &checkpoints, &overrides),
        Command::InspectMemory {
            checkpoint,
            domain,
            view,
            format,
            threshold,
        } => inspect_memory(&checkpoint, domain.as_deref(), view, format, threshold),
        Command::GenSynthetic {
            out,
            spec,
            base_config,
            overrides,
        } => gen_synthetic(&out, spec.as_deref(), base_config.as_deref(), &overrides),
        Command::Gradcheck {
            seed,
            trials,
            tolerance,
            corrupt,
        } => run_gradcheck(seed, trials, tolerance, corrupt),
    }
}

/// Loads, overrides and validates a config, and checks that every dataset
/// file exists, before any work starts.
fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, Failure> {
    let config = RunConfig::load(path).map_err(|e| match e {
        Error::Io { path, source } => {
            usage(format!("cannot read config {}: {source}", path.display()))
        }
        other => other.into(),
    })?;
    let config = config.with_overrides(overrides)?;
    config.validate()?;
    for ds in &config.datasets {
        if !ds.path.is_file() {
            return Err(usage(format!(
                "dataset {}: file not found: {}",
                ds.name,
                ds.path.display()
            )));
        }
    }
    Ok(config)
}

fn write_out(text: &str) -> Result<(), Failure> {
    io::stdout()
        .write_all(text.as_bytes())
        .map_err(|e| Failure::Runtime(format!("stdout: {e}")))
}

fn simulate(path: &Path, overrides: &[String], dry_run: bool) -> Result<(), Failure> {
    let config = load_config(path, overrides)?;
    let result = run_simulation(&config, !dry_run)?;
    log::info!(
        "{} rounds, best round {}{}",
        result.reports.len(),
        result.best_round,
        if result.stopped_early {
            " (stopped early)"
        } else {
            ""
        }
    );
    if let Some(files) = &result.files {
        log::info!("summary: {}", files.summary.display());
        log::info!("reports: {}", files.reports.display());
        log::info!("best checkpoints: {}", files.best_checkpoints.display());
    }
    let mut buf = Vec::new();
    write_summary_csv(&result.summary, &mut buf)?;
    write_out(&String::from_utf8_lossy(&buf))
}

fn evaluate(path: &Path, dir: &Path, overrides: &[String]) -> Result<(), Failure> {
    let config = load_config(path, overrides)?;
    if !dir.is_dir() {
        return Err(usage(format!(
            "checkpoint directory not found: {}",
            dir.display()
        )));
    }
    let checkpoints = Checkpoint::load_round(dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| Failure::Runtime(e.to_string());
    w.write_record(["domain", "round", "horizon", "mse", "mae"])
        .map_err(ser)?;
    for ds in &config.datasets {
        let ck = checkpoints
            .iter()
            .find(|c| c.domain == ds.name)
            .ok_or_else(|| {
                usage(format!(
                    "no checkpoint for dataset {} in {}",
                    ds.name,
                    dir.display()
                ))
            })?;
        let data = DomainData::load(ds)?;
        let metrics = ck.client.evaluate(&data.test()?, config.metric_scale)?;
        w.write_record([
            ds.name.clone(),
            ck.round.to_string(),
            ds.horizon.to_string(),
            metrics.mse.to_string(),
            metrics.mae.to_string(),
        ])
        .map_err(ser)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    write_out(&String::from_utf8_lossy(&bytes))
}

fn inspect_memory(
    path: &Path,
    domain: Option<&str>,
    view: ViewArg,
    format: Format,
    threshold: f64,
) -> Result<(), Failure> {
    let file = match (path.is_dir(), domain) {
        (true, Some(d)) => path.join(format!("{d}.json")),
        (true, None) => {
            return Err(usage(format!(
                "{} is a directory; pass --domain",
                path.display()
            )))
        }
        (false, _) => path.to_path_buf(),
    };
    if !file.is_file() {
        return Err(usage(format!("checkpoint not found: {}", file.display())));
    }
    let ck = Checkpoint::load(&file)?;
    if let Some(d) = domain {
        if ck.domain != d {
            return Err(usage(format!(
                "{} holds domain {}, not {d}",
                file.display(),
                ck.domain
            )));
        }
    }
    let view = match view {
        ViewArg::Local => View::Local,
        ViewArg::Global => View::Global,
    };
    let dump = inspect(&ck, view, threshold)?;
    match format {
        Format::Text => {
            let mut text = dump.summary_text();
            text.push_str("slot provenance usage frequency nearest cosine pattern[0..]\n");
            for r in &dump.records {
                let head: Vec<String> = r
                    .pattern
                    .iter()
                    .take(6)
                    .map(|v| format!("{v:.4}"))
                    .collect();
                text.push_str(&format!(
                    "{} {} {} {:.4} {} {} {}\n",
                    r.slot,
                    r.provenance.as_str(),
                    r.usage,
                    r.frequency,
                    r.nearest_slot.map_or("-".into(), |s| s.to_string()),
                    r.nearest_cosine.map_or("-".into(), |c| format!("{c:.4}")),
                    head.join(",")
                ));
            }
            write_out(&text)
        }
        Format::Csv => {
            let mut buf = Vec::new();
            dump.write_csv(&mut buf)?;
            write_out(&String::from_utf8_lossy(&buf))
        }
        Format::Json => {
            let text =
                serde_json::to_string_pretty(&dump).map_err(|e| Failure::Runtime(e.to_string()))?;
            write_out(&(text + "\n"))
        }
    }
}

fn gen_synthetic(
    out: &Path,
    spec_path: Option<&Path>,
    base_path: Option<&Path>,
    overrides: &[String],
) -> Result<(), Failure> {
    let spec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read spec {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    let spec: SyntheticSpec = apply_overrides(&spec, overrides, &[])?;
    spec.validate()?;
    let base = match base_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let domains = synthetic::generate(&spec)?;
    let written =
        synthetic::write_domains(&spec, &domains, out, &base, &synthetic::default_manifest())?;
    for w in &written {
        log::info!("wrote {} and {}", w.series.display(), w.schedule.display());
    }
    log::info!("wrote {}", out.join("config.toml").display());
    Ok(())
}

fn run_gradcheck(
    seed: u64,
    trials: usize,
    tolerance: f64,
    corrupt: Option<String>,
) -> Result<(), Failure> {
    if trials == 0 {
        return Err(usage("trials must be at least 1"));
    }
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(usage("tolerance must be positive"));
    }
    let options = GradcheckOptions {
        seed,
        trials,
        tolerance,
        corrupt,
        ..Default::default()
    };
    let report = gradcheck::run(&options)?;
    let mut text = String::new();
    for (group, err) in &report.max_relative_error {
        let status = if *err < tolerance { "ok" } else { "FAIL" };
        text.push_str(&format!("{group:<24} max_rel_err {err:.3e} {status}\n"));
    }
    let structural = report.structural_failures();
    text.push_str(&format!(
        "{} trials, tolerance {tolerance:.1e}, structural failures {structural}\n",
        report.trials.len()
    ));
    write_out(&text)?;
    if report.passed() {
        Ok(())
    } else {
        let groups: Vec<String> = report.failures().into_iter().map(|(g, _)| g).collect();
        Err(Failure::Runtime(format!(
            "gradient check failed for {}",
            if groups.is_empty() {
                "structural checks".to_string()
            } else {
                groups.join(", ")
            }
        )))
    }
}
