use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use al_core::rounds::{Clock, OracleKind, Project};
use al_core::synth::OracleKey;
use al_core::Label;
use al_service::{router, AppState, ServiceConfig, TokenConfig};
use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

fn al(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_al"))
        .args(args)
        .output()
        .expect("al runs")
}

fn ok(args: &[&str]) -> String {
    let out = al(args);
    assert!(
        out.status.success(),
        "al {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

struct Seeded {
    _tmp: TempDir,
    store: PathBuf,
    key: PathBuf,
}

/// A store taken through ingest, topics, seed sampling, seed labels and
/// dataset v1 entirely with CLI commands.
fn seeded() -> &'static Seeded {
    static SEEDED: OnceLock<Seeded> = OnceLock::new();
    SEEDED.get_or_init(|| {
        let tmp = TempDir::new().unwrap();
        let corpus = tmp.path().join("corpus");
        let store = tmp.path().join("store");
        let cfg = tmp.path().join("project.toml");
        std::fs::write(&cfg, "[train]\nepochs = 8\nlearning_rate = 0.5\n").unwrap();
        let key = corpus.join("oracle_key.json");
        let kept = corpus.join("focused.kept.jsonl");
        let p = s(&store);
        ok(&[
            "synth",
            "generate",
            "--n-focused",
            "500",
            "--n-deployment",
            "600",
        ]
        .into_iter()
        .chain(["--seed", "5", "--out", s(&corpus)])
        .collect::<Vec<_>>());
        ok(&["-p", p, "--clock", "logical", "init", "--config", s(&cfg)]);
        let filtered = ok(&[
            "-p",
            p,
            "filter",
            "--input",
            s(&corpus.join("focused.jsonl")),
            "--output",
            s(&kept),
        ]);
        assert!(filtered.starts_with("retained "), "{filtered}");
        ok(&["-p", p, "--clock", "logical", "ingest", s(&kept)]);
        ok(&[
            "-p",
            p,
            "--clock",
            "logical",
            "ingest",
            s(&corpus.join("deployment.jsonl")),
        ]);
        ok(&[
            "-p", p, "topics", "build", "--k", "8", "--seed", "3", "--top-n", "5",
        ]);
        ok(&["-p", p, "topics", "reduce", "--to", "6"]);
        let flagged = ok(&[
            "-p",
            p,
            "--clock",
            "logical",
            "topics",
            "flag",
            "--oracle-key",
            s(&key),
            "--per-topic",
            "6",
            "--threshold",
            "0.5",
        ]);
        assert!(!flagged.contains("[]"), "{flagged}");
        ok(&[
            "-p", p, "--clock", "logical", "sample", "seed", "--total", "90", "--floor", "1",
        ]);
        ok(&[
            "-p",
            p,
            "--clock",
            "logical",
            "labels",
            "simulate",
            "--oracle-key",
            s(&key),
        ]);
        ok(&["-p", p, "--clock", "logical", "dataset", "seed"]);
        Seeded {
            _tmp: tmp,
            store,
            key,
        }
    })
}

fn copy_store(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    std::fs::copy(from.join("events.jsonl"), to.join("events.jsonl")).unwrap();
}

fn events(dir: &Path) -> Vec<u8> {
    std::fs::read(dir.join("events.jsonl")).unwrap()
}

#[test]
fn run_emits_four_reproducible_reports() {
    let tmp = TempDir::new().unwrap();
    let config = workspace_file("configs/synth4.toml");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let printed = ok(&["run", "--config", s(&config), "--out", s(&a)]);
    assert!(printed.contains("Pattern Matching"), "{printed}");
    ok(&["run", "--config", s(&config), "--out", s(&b)]);

    let names = [
        "comparison.json",
        "comparison.txt",
        "round-01.json",
        "round-02.json",
        "round-03.json",
        "round-04.json",
    ];
    let mut listed: Vec<String> = std::fs::read_dir(a.join("reports"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    listed.sort();
    assert_eq!(listed, names);
    for name in names {
        let ra = std::fs::read(a.join("reports").join(name)).unwrap();
        let rb = std::fs::read(b.join("reports").join(name)).unwrap();
        assert!(ra == rb, "{name} differs between identical runs");
    }
    assert!(events(&a) == events(&b));

    // A row shaped like the published per-round table, at beta 1.3.
    let a_dir = s(&a);
    let table = ok(&[
        "-p", a_dir, "eval", "report", "--round", "4", "--beta", "1.3",
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2, "{table}");
    let header: Vec<&str> = lines[0].split('|').map(str::trim).collect();
    assert_eq!(
        header,
        [
            "Model",
            "TP",
            "TN",
            "FN",
            "FP",
            "Precision",
            "Recall",
            "F1",
            "F1Beta"
        ]
    );
    let cells: Vec<&str> = lines[1].split('|').map(str::trim).collect();
    assert_eq!(cells[0], "Round 4");
    let report: Value =
        serde_json::from_slice(&std::fs::read(a.join("reports/round-04.json")).unwrap()).unwrap();
    let c = &report["row"]["confusion"];
    let (tp, fp, fn_) = (
        c["tp"].as_f64().unwrap(),
        c["fp"].as_f64().unwrap(),
        c["fn"].as_f64().unwrap(),
    );
    for (i, key) in ["tp", "tn", "fn", "fp"].iter().enumerate() {
        assert_eq!(cells[1 + i], c[key].to_string());
    }
    // F-beta from counts: (1 + b^2) tp / ((1 + b^2) tp + b^2 fn + fp).
    let b2 = 1.3f64 * 1.3;
    let fbeta = (1.0 + b2) * tp / ((1.0 + b2) * tp + b2 * fn_ + fp);
    assert_eq!(cells[8], format!("{fbeta:.3}"));

    let json_row: Value = serde_json::from_str(&ok(&[
        "-p", a_dir, "eval", "report", "--round", "4", "--json",
    ]))
    .unwrap();
    assert_eq!(json_row["metrics"]["beta"], json!(1.3));
}

#[test]
fn run_config_errors_exit_3() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "rounds = 7\n").unwrap();
    let out = al(&[
        "run",
        "--config",
        s(&bad),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&out), 3);
    let missing = al(&["run", "--config", s(&tmp.path().join("nope.toml"))]);
    assert_eq!(code(&missing), 3);
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = TempDir::new().unwrap();
    let empty = s(tmp.path());
    assert_eq!(
        code(&al(&["-p", empty, "round", "status"])),
        3,
        "uninitialized store"
    );
    assert_eq!(code(&al(&["round", "frobnicate"])), 3, "usage error");
    assert_eq!(code(&al(&["--help"])), 0);

    let st = seeded();
    let dir = tmp.path().join("copy");
    copy_store(&st.store, &dir);
    let p = s(&dir);
    assert_eq!(code(&al(&["-p", p, "init"])), 3, "already initialized");
    assert_eq!(
        code(&al(&["-p", p, "round", "advance"])),
        1,
        "no active round"
    );
    assert_eq!(
        code(&al(&["-p", p, "round", "start", "--mode", "resume_best"])),
        1,
        "resume without a previous round"
    );

    // Finish a round so the evaluation set is populated, then try to author
    // a counterfactual from one of its records.
    ok(&["-p", p, "round", "start", "--max-per-batch", "20"]);
    ok(&["-p", p, "round", "advance", "--until", "labeling"]);
    ok(&["-p", p, "labels", "simulate", "--oracle-key", s(&st.key)]);
    ok(&["-p", p, "round", "advance", "--until", "complete"]);
    let project = Project::open(&dir, Clock::System).unwrap();
    let held_out = project
        .state()
        .evaluation
        .entries
        .keys()
        .next()
        .expect("deployment labels land in the evaluation set")
        .to_string();
    let out = al(&[
        "-p", p, "augment", "flip-neg", "--id", &held_out, "--span", "x",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("evaluation id(s) already belong"));
}

#[test]
fn dry_run_leaves_the_store_untouched() {
    let st = seeded();
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("copy");
    copy_store(&st.store, &dir);
    let p = s(&dir);
    let before = events(&dir);
    for args in [
        vec!["round", "start", "--mode", "from_scratch"],
        vec!["labels", "simulate", "--oracle-key", s(&st.key)],
        vec![
            "labels",
            "set",
            "--record",
            "x",
            "--label",
            "positive",
            "--oracle-id",
            "a",
        ],
        vec!["sample", "seed", "--total", "10"],
        vec!["eval", "report", "--compare"],
    ] {
        let mut full = vec!["-p", p, "--dry-run"];
        full.extend(args);
        let printed = ok(&full);
        assert!(printed.starts_with("dry run: would "), "{printed}");
    }
    assert!(events(&dir) == before);
    assert!(!dir.join("batches").exists());

    let fresh = tmp.path().join("fresh");
    ok(&["-p", s(&fresh), "--dry-run", "init"]);
    assert!(!fresh.join("events.jsonl").exists());
}

#[test]
fn mutating_commands_respect_the_store_lock() {
    let st = seeded();
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("copy");
    copy_store(&st.store, &dir);
    let p = s(&dir);
    let held = File::create(dir.join("al.lock")).unwrap();
    held.lock().unwrap();

    let out = al(&["-p", p, "round", "start"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
    // Readers do not take the lock.
    let status: Value = serde_json::from_str(&ok(&["-p", p, "round", "status"])).unwrap();
    assert_eq!(status["dataset_version"], json!(1));

    held.unlock().unwrap();
    ok(&["-p", p, "round", "start"]);
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder()
        .method(method)
        .uri(uri)
        .header("authorization", "Bearer tok-sim");
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

#[tokio::test(flavor = "multi_thread")]
async fn http_round_matches_cli_round_event_for_event() {
    let st = seeded();
    let tmp = TempDir::new().unwrap();
    let (via_cli, via_http) = (tmp.path().join("cli"), tmp.path().join("http"));
    copy_store(&st.store, &via_cli);
    copy_store(&st.store, &via_http);

    let p = s(&via_cli).to_string();
    let key = s(&st.key).to_string();
    tokio::task::spawn_blocking(move || {
        let l = ["-p", p.as_str(), "--clock", "logical"];
        let with = |rest: &[&str]| ok(&[&l[..], rest].concat());
        with(&[
            "round",
            "start",
            "--mode",
            "from_scratch",
            "--max-per-batch",
            "40",
        ]);
        with(&["train"]);
        with(&["predict"]);
        with(&[
            "labels",
            "simulate",
            "--oracle-key",
            &key,
            "--oracle-id",
            "sim",
        ]);
        with(&["round", "advance", "--until", "complete"]);
    })
    .await
    .unwrap();

    let mut config = ServiceConfig::new(
        &via_http,
        vec![TokenConfig {
            token: "tok-sim".into(),
            oracle_id: "sim".into(),
            kind: OracleKind::Simulated,
        }],
    );
    config.clock = Clock::logical();
    config.snapshot_every = u64::MAX;
    let app = router(AppState::open(&config).unwrap());
    let truth = OracleKey::load(&st.key).unwrap().truth;

    let (status, _) = call(
        &app,
        Method::POST,
        "/rounds",
        Some(json!({ "mode": "from_scratch", "config": { "max_per_batch": 40 } })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    for _ in 0..4 {
        let (status, body) = call(&app, Method::POST, "/rounds/1/advance", None).await;
        assert_eq!(status, StatusCode::OK, "{body}");
    }
    let mut labeled = 0;
    loop {
        let (_, item) = call(&app, Method::GET, "/queue/next", None).await;
        if item.is_null() {
            break;
        }
        let id = item["record"]["id"].as_str().unwrap().to_string();
        let label = Label::from_bool(truth[&al_core::RecordId::new(id.clone())]);
        let (status, body) = call(
            &app,
            Method::POST,
            "/labels",
            Some(json!({ "record_id": id, "label": label, "oracle_id": "sim" })),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        labeled += 1;
    }
    assert!(labeled > 0);
    for _ in 0..2 {
        let (status, body) = call(&app, Method::POST, "/rounds/1/advance", None).await;
        assert_eq!(status, StatusCode::OK, "{body}");
    }

    let (cli_log, http_log) = (events(&via_cli), events(&via_http));
    assert!(cli_log.len() > events(&st.store).len());
    if cli_log != http_log {
        let a = String::from_utf8_lossy(&cli_log);
        let b = String::from_utf8_lossy(&http_log);
        let first = a.lines().zip(b.lines()).position(|(x, y)| x != y);
        panic!(
            "event logs differ at line {first:?} ({} vs {} lines)",
            a.lines().count(),
            b.lines().count()
        );
    }
}
