//! End-to-end exercises of the `uaks` binary on a tiny synthetic corpus:
//! every subcommand, the staged pipeline with idempotent re-runs, and the
//! config validation errors.

use std::path::Path;
use std::process::{Command, Output};

fn uaks() -> Command {
    Command::new(env!("CARGO_BIN_EXE_uaks"))
}

fn run_ok(cmd: &mut Command) -> serde_json::Value {
    let out = cmd.output().expect("spawn uaks");
    if !out.status.success() {
        panic!(
            "command failed\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(&stdout).unwrap_or(serde_json::Value::Null)
}

fn run_err(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn uaks");
    assert!(
        !out.status.success(),
        "command unexpectedly succeeded: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    out
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
      "seed": 7,
      "loss": {"m": 2, "l_batch": 4},
      "pretrain": {"total_steps": 8, "warmup_steps": 2, "batch": 8},
      "finetune": {"batch": 4, "max_epochs": 2, "stop_patience": 3, "halve_patience": 2},
      "aud": {"units": 4, "iters": 3},
      "pseudo": {"n_min": 3, "n_max": 6, "cap_per_doc": 40},
      "arch": {"profile": "reduced", "embed_dim": 6, "query_hidden": 6, "query_layers": 1,
               "doc_hidden": 8, "doc_layers": 2, "proj_dim": 8, "dropout": 0.0,
               "downsample_after": 1},
      "synth": {"lexicon_size": 20, "word_len": [3, 4], "n_phones": 6, "frames_per_phone": 5,
                "n_docs": 12, "doc_len": 20, "noise_sigma": 0.2, "dim": 6,
                "frame_period": 0.02},
      "queries": {"count": 12, "orders": [1, 2]}
    }"#,
    )
    .unwrap();
    path
}

#[test]
fn subcommands_compose_into_the_full_flow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let corpus = dir.path().join("corpus");
    let manifest = corpus.join("manifest.json");

    run_ok(uaks().args(["synth", "--out-dir"]).arg(&corpus).arg("--config").arg(&cfg));
    assert!(manifest.is_file());
    assert!(corpus.join("alignments.ctm").is_file());
    assert!(corpus.join("phones.tsv").is_file());

    let queries = dir.path().join("queries.tsv");
    let refs = dir.path().join("refs.tsv");
    let summary = run_ok(
        uaks()
            .args(["prepare", "--count", "12", "--orders", "1,2"])
            .arg("--manifest")
            .arg(&manifest)
            .arg("--queries-out")
            .arg(&queries)
            .arg("--refs-out")
            .arg(&refs)
            .arg("--config")
            .arg(&cfg),
    );
    assert_eq!(summary["queries"], 12);

    let hmm = dir.path().join("aud.hmm");
    let summary = run_ok(
        uaks()
            .args(["aud-train"])
            .arg("--features")
            .arg(&manifest)
            .arg("--out")
            .arg(&hmm)
            .arg("--config")
            .arg(&cfg),
    );
    let history = summary["loglik_history"].as_array().unwrap();
    assert!(history.len() >= 2);

    let units = dir.path().join("units.tsv");
    run_ok(
        uaks()
            .args(["aud-label"])
            .arg("--model")
            .arg(&hmm)
            .arg("--features")
            .arg(&manifest)
            .arg("--out")
            .arg(&units)
            .arg("--config")
            .arg(&cfg),
    );

    let nmi = run_ok(
        uaks()
            .args(["nmi"])
            .arg("--units")
            .arg(&units)
            .arg("--phones")
            .arg(corpus.join("phones.tsv"))
            .arg("--config")
            .arg(&cfg),
    );
    let value = nmi["nmi"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&value), "nmi {value}");

    let index = dir.path().join("pseudo.tsv");
    let pocc = dir.path().join("pseudo_occ.tsv");
    run_ok(
        uaks()
            .args(["pseudo"])
            .arg("--transcripts")
            .arg(&units)
            .arg("--features")
            .arg(&manifest)
            .arg("--out-index")
            .arg(&index)
            .arg("--out-occurrences")
            .arg(&pocc)
            .arg("--config")
            .arg(&cfg),
    );

    let pre_ckpt = dir.path().join("pretrain.ckpt");
    run_ok(
        uaks()
            .args(["pretrain"])
            .arg("--index")
            .arg(&index)
            .arg("--occurrences")
            .arg(&pocc)
            .arg("--features")
            .arg(&manifest)
            .arg("--out")
            .arg(&pre_ckpt)
            .arg("--config")
            .arg(&cfg),
    );

    let model = dir.path().join("model.ckpt");
    let summary = run_ok(
        uaks()
            .args(["finetune"])
            .arg("--init")
            .arg(&pre_ckpt)
            .arg("--corpus")
            .arg(&manifest)
            .arg("--out")
            .arg(&model)
            .arg("--config")
            .arg(&cfg),
    );
    assert_eq!(summary["epochs"], 2);

    let hits = dir.path().join("hits.tsv");
    run_ok(
        uaks()
            .args(["search"])
            .arg("--ckpt")
            .arg(&model)
            .arg("--queries")
            .arg(&queries)
            .arg("--features")
            .arg(&manifest)
            .arg("--out")
            .arg(&hits)
            .arg("--config")
            .arg(&cfg),
    );

    let report = run_ok(
        uaks()
            .args(["score", "--sweep", "--bootstrap", "50"])
            .arg("--hits")
            .arg(&hits)
            .arg("--refs")
            .arg(&refs)
            .arg("--config")
            .arg(&cfg),
    );
    assert!(report["mtwv"].is_number());
    assert!(report["atwv"].is_number());
    assert!(report["zeta_star"].is_number());
    assert!(report["ci"]["lower"].is_number());
    assert!(report["per_query"].is_object());
}

#[test]
fn pipeline_is_idempotent_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");

    let first = run_ok(
        uaks()
            .args(["pipeline"])
            .arg("--out-dir")
            .arg(&out)
            .arg("--config")
            .arg(&cfg),
    );
    assert!(out.join("report.json").is_file());
    assert!(out.join("model.ckpt").is_file());
    assert!(out.join("hits.tsv").is_file());
    assert_ne!(first["score"], serde_json::json!("skipped"));

    // Unchanged inputs: every stage is skipped.
    let second = run_ok(
        uaks()
            .args(["pipeline"])
            .arg("--out-dir")
            .arg(&out)
            .arg("--config")
            .arg(&cfg),
    );
    for stage in [
        "synth", "prepare", "aud-train", "aud-label", "pseudo", "pretrain", "finetune",
        "search", "score",
    ] {
        assert_eq!(second[stage], serde_json::json!("skipped"), "stage {stage}");
    }

    // Tampering with an intermediate artifact names the owning stage.
    let units = out.join("units.tsv");
    let mut text = std::fs::read_to_string(&units).unwrap();
    text.push_str("tampered\t0\t0\t1\n");
    std::fs::write(&units, text).unwrap();
    let err = run_err(
        uaks()
            .args(["pipeline"])
            .arg("--out-dir")
            .arg(&out)
            .arg("--config")
            .arg(&cfg),
    );
    let stderr = String::from_utf8_lossy(&err.stderr);
    assert!(stderr.contains("aud-label"), "stderr: {stderr}");
    assert!(stderr.contains("--force"), "stderr: {stderr}");

    // --force rebuilds from the tampered point on.
    run_ok(
        uaks()
            .args(["pipeline", "--force"])
            .arg("--out-dir")
            .arg(&out)
            .arg("--config")
            .arg(&cfg),
    );
}

#[test]
fn pipeline_refuses_missing_upstream_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let err = run_err(
        uaks()
            .args(["pipeline", "--stages", "search"])
            .arg("--out-dir")
            .arg(&out)
            .arg("--config")
            .arg(&cfg),
    );
    let stderr = String::from_utf8_lossy(&err.stderr);
    assert!(stderr.contains("missing upstream artifact"), "stderr: {stderr}");
}

#[test]
fn config_defaults_echo_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "{}").unwrap();
    let out = uaks()
        .args(["pipeline", "--print-config", "--out-dir", "unused"])
        .arg("--config")
        .arg(&empty)
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("\"phi\": 0.7"), "{stdout}");
    assert!(stdout.contains("\"lambda\": 5.0"), "{stdout}");
    assert!(stdout.contains("\"m\": 4"), "{stdout}");
    assert!(stdout.contains("\"beta\": 999.9"), "{stdout}");

    let bad_phi = dir.path().join("bad_phi.json");
    std::fs::write(&bad_phi, r#"{"loss": {"phi": 0.4}}"#).unwrap();
    let err = run_err(
        uaks()
            .args(["pipeline", "--print-config", "--out-dir", "unused"])
            .arg("--config")
            .arg(&bad_phi),
    );
    assert!(String::from_utf8_lossy(&err.stderr).contains("phi"));

    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, r#"{"phi2": 0.7}"#).unwrap();
    let err = run_err(
        uaks()
            .args(["pipeline", "--print-config", "--out-dir", "unused"])
            .arg("--config")
            .arg(&unknown),
    );
    assert!(String::from_utf8_lossy(&err.stderr).contains("phi2"));
}
