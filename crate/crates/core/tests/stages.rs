//! End-to-end CLI tests: each stage is driven through the real binary, so
//! argument parsing, artifact handoff, stream discipline, and exit codes are
//! all exercised the way an operator sees them.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use common::{build_toy_artifacts, read_bytes, toy_config, toy_user_id, write_toy_corpus};
use motiverec_core::gateway::{Gateway, InstrumentedBackend, MockBackend, PromptSet, RetryPolicy};
use motiverec_core::pipeline::{Artifacts, Engine, IngestInputs};

const CONFIG_TOML: &str = "embedding_dim = 64\n\
bundle_window = 3\n\
bundle_stride = 2\n\
k_exploit = 2\n\
k_div = 2\n\
k_social = 2\n\
max_reflections = 1\n\
queries_per_plan = 3\n\
retrieval_depth = 30\n\
verdict_depth = 5\n\
top_k_eval = [5, 10]\n\
min_core = 2\n";

struct CliEnv {
    /// Keeps the backing temp directory alive for the test's duration.
    _dir: tempfile::TempDir,
    config: PathBuf,
    artifacts: PathBuf,
    inputs: IngestInputs,
}

fn cli_env(users: usize, items: usize, rounds: usize) -> CliEnv {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_toy_corpus(&dir.path().join("raw"), users, items, rounds);
    let config = dir.path().join("config.toml");
    std::fs::write(&config, CONFIG_TOML).unwrap();
    let artifacts = dir.path().join("artifacts");
    CliEnv { _dir: dir, config, artifacts, inputs }
}

fn run_cli(env: &CliEnv, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motiverec"))
        .args(args)
        .arg("--config")
        .arg(&env.config)
        .arg("--artifacts")
        .arg(&env.artifacts)
        .output()
        .expect("spawn motiverec")
}

fn run_stage(env: &CliEnv, args: &[&str]) -> Output {
    let out = run_cli(env, args);
    assert!(
        out.status.success(),
        "stage {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn ingest_args(env: &CliEnv) -> Vec<String> {
    vec![
        "ingest".into(),
        "--interactions".into(),
        env.inputs.interactions.display().to_string(),
        "--items".into(),
        env.inputs.items.as_ref().unwrap().display().to_string(),
    ]
}

fn stage_files(artifacts: &Path) -> Vec<PathBuf> {
    let a = Artifacts::new(artifacts);
    vec![
        a.dataset(),
        a.items(),
        a.index(),
        a.annotations(),
        a.recommendations(),
        a.eval_report_text(),
        a.eval_report_json(),
        a.ablation_report_text(),
        a.ablation_report_json(),
    ]
}

#[test]
fn full_run_produces_every_artifact_and_report() {
    let env = cli_env(8, 20, 8);
    let ingest_owned = ingest_args(&env);
    let ingest: Vec<&str> = ingest_owned.iter().map(String::as_str).collect();
    let out = run_stage(&env, &ingest);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("config fingerprint:"),
        "fingerprint note missing from stderr"
    );

    run_stage(&env, &["augment"]);
    run_stage(&env, &["annotate"]);
    run_stage(&env, &["recommend"]);
    let out = run_stage(&env, &["evaluate"]);
    let table = String::from_utf8_lossy(&out.stdout);
    for name in ["recall", "ndcg", "mrr", "coverage", "popularity", "users:"] {
        assert!(table.contains(name), "evaluate stdout missing {name}:\n{table}");
    }
    let out = run_stage(&env, &["ablate"]);
    let grid = String::from_utf8_lossy(&out.stdout);
    for variant in ["full", "no_annotation", "no_exploration", "no_reflection"] {
        assert!(grid.contains(variant), "ablate stdout missing {variant}");
    }

    for path in stage_files(&env.artifacts) {
        assert!(path.exists(), "missing artifact {}", path.display());
    }
}

#[test]
fn stage_reruns_are_byte_identical_through_the_cli() {
    let env = cli_env(6, 16, 8);
    let ingest_owned = ingest_args(&env);
    let ingest: Vec<&str> = ingest_owned.iter().map(String::as_str).collect();
    for stage in [&ingest[..], &["augment"], &["annotate"], &["recommend"], &["evaluate"]] {
        run_stage(&env, stage);
    }
    let artifacts = Artifacts::new(&env.artifacts);
    let before = [
        read_bytes(&artifacts.recommendations()),
        read_bytes(&artifacts.eval_report_text()),
        read_bytes(&artifacts.eval_report_json()),
    ];
    run_stage(&env, &["recommend"]);
    run_stage(&env, &["evaluate"]);
    let after = [
        read_bytes(&artifacts.recommendations()),
        read_bytes(&artifacts.eval_report_text()),
        read_bytes(&artifacts.eval_report_json()),
    ];
    assert_eq!(before, after, "stage rerun must not change artifact bytes");
}

#[test]
fn missing_artifacts_name_the_stage_to_run() {
    let env = cli_env(6, 16, 8);
    let ingest_owned = ingest_args(&env);
    let ingest: Vec<&str> = ingest_owned.iter().map(String::as_str).collect();
    for stage in [&ingest[..], &["augment"], &["annotate"]] {
        run_stage(&env, stage);
    }
    let out = run_cli(&env, &["evaluate"]);
    assert!(!out.status.success(), "evaluate must fail before recommend ran");
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("error:") && stderr.contains("`recommend`"),
        "stderr must name the missing stage:\n{stderr}"
    );
}

#[test]
fn single_user_query_prints_record_without_touching_batch_artifact() {
    let env = cli_env(8, 20, 8);
    let ingest_owned = ingest_args(&env);
    let ingest: Vec<&str> = ingest_owned.iter().map(String::as_str).collect();
    for stage in [&ingest[..], &["augment"], &["annotate"]] {
        run_stage(&env, stage);
    }
    let out = run_stage(&env, &["recommend", "--user", "u01", "--query", "zelkova quasar"]);
    let record: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("stdout is one JSON record");
    assert_eq!(record["user_id"], "u01");
    assert_eq!(record["query"], "zelkova quasar");
    let queries = record["plan"]["queries"].as_array().unwrap();
    assert!(
        queries
            .iter()
            .any(|q| q.as_str().is_some_and(|s| s.contains("zelkova") && s.contains("quasar"))),
        "explicit query missing from plan: {queries:?}"
    );
    assert!(record["ranking"]["entries"].as_array().is_some_and(|e| !e.is_empty()));
    assert!(
        !Artifacts::new(&env.artifacts).recommendations().exists(),
        "single-user mode must not write the batch artifact"
    );
}

#[test]
fn bad_arguments_fail_fast_with_exit_one() {
    let env = cli_env(4, 12, 6);
    let out = run_cli(&env, &["recommend", "--jobs", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    // --query without --user is a parser-level error (clap exits 2).
    let out = run_cli(&env, &["recommend", "--query", "anything"]);
    assert!(!out.status.success());
}

/// The jobs knob caps simultaneous backend calls: a wide thread pool with a
/// gateway admitting two in-flight requests never exceeds two, even while
/// the batch fans out across users.
#[test]
fn jobs_bound_backend_concurrency() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_toy_corpus(&dir.path().join("raw"), 16, 24, 8);
    let cfg = toy_config();
    let setup_gw = Arc::new(Gateway::mock(42, cfg.embedding_dim, 4));
    let artifacts = build_toy_artifacts(&dir.path().join("artifacts"), &cfg, &inputs, &setup_gw);

    let jobs = 2usize;
    let instr = Arc::new(InstrumentedBackend::new(MockBackend::new(42, cfg.embedding_dim)));
    let gateway = Arc::new(Gateway::new(
        instr.clone(),
        instr.clone(),
        PromptSet::builtin(),
        RetryPolicy::fast(),
        jobs,
    ));
    let engine = Engine::open(cfg, &artifacts, gateway).unwrap();

    let pool = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
    let (records, report) = pool.install(|| engine.recommend_all()).unwrap();
    assert_eq!(records.len(), 16);
    assert!(report.skipped.is_empty());
    assert!(toy_user_id(0) == records[0].user_id, "records are user-ordered");
    assert!(
        instr.peak_inflight() <= jobs,
        "peak in-flight {} exceeded jobs {}",
        instr.peak_inflight(),
        jobs
    );
}
