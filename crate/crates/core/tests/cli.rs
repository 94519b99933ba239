//! End-to-end checks of the `protofed` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protofed::checkpoint::Checkpoint;
use protofed::data::{patch_count, windows_per_channel, WindowSpec};
use protofed::federation::{read_reports_jsonl, RunConfig};
use protofed::memory::{wire_size, Provenance};

const SMALL: &[&str] = &[
    "seed=3",
    "rounds=2",
    "memory_size=16",
    "dim=8",
    "local_epochs=1",
    "learning_rate=0.001",
    "datasets.*.train_stride=8",
    "keep_all_checkpoints=true",
];

fn protofed(args: &[&str], root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_protofed"));
    cmd.args(args).env("RUST_LOG", "warn");
    if let Some(root) = root {
        cmd.env("PROTOFED_OUTPUT_ROOT", root);
    }
    cmd.output().expect("spawn protofed")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Generates synthetic domains under `dir` and returns the config path.
fn generate(dir: &Path) -> PathBuf {
    let out = protofed(
        &["gen-synthetic", "--out", dir.to_str().unwrap(), "seed=5"],
        None,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join("config.toml")
}

fn simulate(config: &Path, root: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", config.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    protofed(&args, Some(root))
}

fn run_dir(config: &Path, root: &Path) -> PathBuf {
    let run_id = RunConfig::load(config).unwrap().run_id;
    root.join(run_id)
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(code(&protofed(&["frobnicate"], None)), 2);
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = protofed(
        &["simulate", tmp.path().join("absent.toml").to_str().unwrap()],
        None,
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_dataset_file_names_the_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let config = generate(tmp.path());
    std::fs::remove_file(tmp.path().join("domain_1.csv")).unwrap();
    let out = simulate(&config, &tmp.path().join("runs"), &[]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(
        err.contains("domain_1") && err.contains("file not found"),
        "{err}"
    );
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn unknown_override_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = generate(tmp.path());
    let out = simulate(&config, &tmp.path().join("runs"), &["no_such_key=1"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn gen_synthetic_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a);
    generate(&b);
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n != "config.toml")
        .collect();
    names.sort();
    assert!(names.len() >= 3);
    for name in names {
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn simulate_writes_reports_with_measured_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let config = generate(&tmp.path().join("data"));
    let root = tmp.path().join("runs");
    let out = simulate(&config, &root, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = String::from_utf8(out.stdout).unwrap();
    assert!(summary.starts_with("domain,"), "{summary}");

    let dir = run_dir(&config, &root);
    let reports = read_reports_jsonl(&dir.join("reports.jsonl")).unwrap();
    assert_eq!(reports.len(), 2);
    for report in &reports {
        for d in &report.domains {
            assert_eq!(d.upload_bytes, wire_size(16, 8));
            assert_eq!(d.download_bytes, wire_size(16, 8));
            assert_eq!(d.shared + d.personalized + d.fresh, 16);
        }
    }
    assert_eq!(
        std::fs::read_to_string(dir.join("summary.csv")).unwrap(),
        summary
    );
}

#[test]
fn local_only_transfers_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let config = generate(&tmp.path().join("data"));
    let root = tmp.path().join("runs");
    let out = simulate(&config, &root, &["mode=local_only"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let reports = read_reports_jsonl(&run_dir(&config, &root).join("reports.jsonl")).unwrap();
    for report in &reports {
        assert!(report
            .domains
            .iter()
            .all(|d| d.upload_bytes == 0 && d.download_bytes == 0));
    }
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let config = generate(&tmp.path().join("data"));
    let root = tmp.path().join("runs");
    let out = simulate(&config, &root, &["--dry-run"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(!out.stdout.is_empty());
    assert!(!root.exists());
}

#[test]
fn evaluate_reproduces_the_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let config = generate(&tmp.path().join("data"));
    let root = tmp.path().join("runs");
    let sim = simulate(&config, &root, &[]);
    assert_eq!(code(&sim), 0, "{}", stderr(&sim));
    let dir = run_dir(&config, &root);
    let best = read_reports_jsonl(&dir.join("reports.jsonl"))
        .unwrap()
        .last()
        .unwrap()
        .best_round;

    let mut args = vec!["evaluate", config.to_str().unwrap()];
    let ck = dir.join(best.to_string());
    args.push(ck.to_str().unwrap());
    args.extend_from_slice(SMALL);
    let out = protofed(&args, Some(&root));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let eval = String::from_utf8(out.stdout).unwrap();
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert_eq!(domain_mse(&eval), domain_mse(&summary));
}

/// `(domain, mse)` pairs of a CSV with those columns.
fn domain_mse(text: &str) -> Vec<(String, String)> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().unwrap().clone();
    let idx = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (d, m) = (idx("domain"), idx("mse"));
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[d].to_string(), r[m].to_string())
        })
        .collect()
}

#[test]
fn inspect_memory_conserves_usage_and_shares_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let config_path = generate(&tmp.path().join("data"));
    let root = tmp.path().join("runs");
    let sim = simulate(&config_path, &root, &["shared_model_init=true"]);
    assert_eq!(code(&sim), 0, "{}", stderr(&sim));
    let dir = run_dir(&config_path, &root);
    let round_dir = dir.join("1");

    let config = RunConfig::load(&config_path).unwrap();
    let checkpoints = Checkpoint::load_round(&round_dir).unwrap();
    assert_eq!(checkpoints.len(), config.datasets.len());
    for (ck, ds) in checkpoints.iter().zip(&config.datasets) {
        let windows =
            windows_per_channel(ds.train_end, WindowSpec::new(ds.lookback, ds.horizon, 8));
        let patches = patch_count(ds.lookback, ds.patch_len) as u64;
        let total: u64 = ck.client.memory.usage.iter().sum();
        assert_eq!(total, windows as u64 * patches, "{}", ck.domain);
    }

    // Rows the server marked shared are identical in every domain's copy.
    let shared: Vec<Vec<Vec<f64>>> = checkpoints
        .iter()
        .map(|ck| {
            let g = ck.global_memory.as_ref().unwrap();
            g.vectors
                .rows()
                .into_iter()
                .zip(&g.provenance)
                .filter(|(_, p)| **p == Provenance::Shared)
                .map(|(r, _)| r.to_vec())
                .collect()
        })
        .collect();
    assert!(shared.windows(2).all(|w| w[0] == w[1]));

    let file = round_dir.join(format!("{}.json", checkpoints[0].domain));
    for view in ["local", "global"] {
        for format in ["text", "csv", "json"] {
            let out = protofed(
                &[
                    "inspect-memory",
                    file.to_str().unwrap(),
                    "--view",
                    view,
                    "--format",
                    format,
                ],
                None,
            );
            assert_eq!(code(&out), 0, "{view} {format}: {}", stderr(&out));
            assert!(!out.stdout.is_empty());
        }
    }
    let json = protofed(
        &["inspect-memory", file.to_str().unwrap(), "--format", "json"],
        None,
    );
    let value: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    let records = value["records"].as_array().unwrap();
    assert_eq!(records.len(), 16);
    let usage: u64 = records.iter().map(|r| r["usage"].as_u64().unwrap()).sum();
    assert_eq!(
        usage,
        checkpoints[0].client.memory.usage.iter().sum::<u64>()
    );

    let dir_without_domain = protofed(&["inspect-memory", round_dir.to_str().unwrap()], None);
    assert_eq!(code(&dir_without_domain), 2);
}

#[test]
fn gradcheck_passes_and_flags_corruption() {
    let ok = protofed(&["gradcheck", "--trials", "4"], None);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert_eq!(code(&protofed(&["gradcheck", "--trials", "0"], None)), 2);
    let bad = protofed(
        &["gradcheck", "--trials", "2", "--corrupt", "decoder.head"],
        None,
    );
    assert_eq!(code(&bad), 1);
    let text = String::from_utf8_lossy(&bad.stdout).into_owned() + &stderr(&bad);
    assert!(text.contains("decoder.head"), "{text}");
}
