use std::path::Path;
use std::process::{Command, Output};

fn ctxmod(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxmod"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn quad_gen_writes_manifest_and_payloads() {
    let dir = tempfile::tempdir().unwrap();
    ok(&ctxmod(dir.path(), &["quad", "gen", "--out", "d", "--n", "16", "--per-context", "100", "--seed", "1"]));
    let ds = ctxmod_quad::Dataset::open(&dir.path().join("d")).unwrap();
    assert_eq!(ds.contexts().len(), 7);
    assert_eq!(std::fs::metadata(dir.path().join("d/quad1.f32")).unwrap().len(), 100 * 16 * 16 * 3 * 4);
}

#[test]
fn unknown_flag_exits_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctxmod(dir.path(), &["quad", "gen", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(ctxmod(dir.path(), &["nosuch"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctxmod(dir.path(), &["sample", "--ckpt", "missing.ckpt", "--ctx", "obs"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
}

#[test]
fn compose_pipeline_writes_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&ctxmod(d, &["quad", "gen", "--out", "d", "--per-context", "40", "--double", "quad1+quad4"]));
    std::fs::write(d.join("train.cfg"), "epochs = 1\nbatch-size = 32\nhidden = 32\ndim-e = 8\ndeterministic = true\n").unwrap();
    ok(&ctxmod(d, &["--config", "train.cfg", "train", "--data", "d", "--out", "m.ckpt"]));
    let log = std::fs::read_to_string(d.join("m.ckpt.log.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "elbo_bpd", "recon_bpd", "kl"] {
        assert!(line.get(key).is_some(), "{key}");
    }

    let out = ctxmod(d, &["compose", "--ckpt", "m.ckpt", "--ctx", "quad1+quad4", "--count", "64", "--png", "o.png", "--raw", "o.f32"]);
    ok(&out);
    let png = image::open(d.join("o.png")).unwrap();
    assert_eq!((png.width(), png.height()), (8 * 17 + 1, 8 * 17 + 1));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["quadrants"]["targets"], serde_json::json!([0, 3]));

    ok(&ctxmod(d, &["grid", "--in", "o.f32", "--n", "16", "--grid", "8x8", "--png", "g.png"]));
    assert_eq!(std::fs::read(d.join("o.png")).unwrap(), std::fs::read(d.join("g.png")).unwrap());

    let single = ctxmod(d, &["compose", "--ckpt", "m.ckpt", "--ctx", "quad1"]);
    assert_eq!(single.status.code(), Some(1));

    ok(&ctxmod(d, &["eval", "--ckpt", "m.ckpt", "--data", "d", "--count", "16", "--out", "r.json", "--latex", "r.tex"]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert!(report["summary"]["generated.ood.mmd"]["mean"].is_number());
    assert!(std::fs::read_to_string(d.join("r.tex")).unwrap().contains("tabular"));
}

#[test]
fn ident_reports_checks() {
    let dir = tempfile::tempdir().unwrap();
    ok(&ctxmod(dir.path(), &["ident", "--samples", "4000", "--seed", "2", "--out", "id.json"]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("id.json")).unwrap()).unwrap();
    assert_eq!(report["assumptions"]["holds"], true);
    assert!(report["oracle"]["rel_error"].as_f64().unwrap() < 1e-10);
    assert!(report["permutation"]["found"].is_array());
}
