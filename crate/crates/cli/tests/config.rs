use std::collections::BTreeMap;

use ctxmod_cli::app::{parse, Command};
use ctxmod_cli::config::{config_hash, ConfigError, RunConfig};

fn argv(s: &str) -> Vec<String> {
    std::iter::once("ctxmod").chain(s.split_whitespace()).map(String::from).collect()
}

#[test]
fn parses_comments_and_normalises_keys() {
    let rc = RunConfig::parse("# run\nepochs = 3\n\nlambda_gl=0.1  # weight\n--seed = 7\n").unwrap();
    let keys: Vec<&str> = rc.entries.keys().map(String::as_str).collect();
    assert_eq!(keys, ["epochs", "lambda-gl", "seed"]);
    assert_eq!(rc.entries["lambda-gl"], "0.1");
}

#[test]
fn rejects_bad_lines() {
    assert_eq!(RunConfig::parse("epochs 3"), Err(ConfigError::Syntax { line: 1 }));
    assert_eq!(RunConfig::parse("a=1\na=2"), Err(ConfigError::Duplicate { line: 2, key: "a".into() }));
    assert_eq!(RunConfig::parse("bad key=1"), Err(ConfigError::Syntax { line: 1 }));
}

#[test]
fn unknown_and_boolean_keys() {
    let flags: BTreeMap<String, bool> = [("epochs".to_string(), false), ("deterministic".to_string(), true)].into();
    let rc = RunConfig::parse("epochs=3\ndeterministic=true").unwrap();
    assert_eq!(rc.to_args("train", &flags, &[]).unwrap(), ["--deterministic", "--epochs=3"]);
    assert_eq!(rc.to_args("train", &flags, &["epochs".into()]).unwrap(), ["--deterministic"]);
    let off = RunConfig::parse("deterministic=false").unwrap();
    assert!(off.to_args("train", &flags, &[]).unwrap().is_empty());
    let typo = RunConfig::parse("epoch=3").unwrap();
    assert!(matches!(typo.to_args("train", &flags, &[]), Err(ConfigError::UnknownKey { .. })));
    let notbool = RunConfig::parse("deterministic=yes").unwrap();
    assert!(matches!(notbool.to_args("train", &flags, &[]), Err(ConfigError::NotBool { .. })));
}

#[test]
fn file_values_apply_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "samples = 1234\nseed = 9\nestimator = logistic\n").unwrap();
    let (cli, resolved) = parse(&argv(&format!("--config {} ident --seed 4", cfg.display()))).unwrap();
    let Command::Ident(a) = cli.command else { panic!("expected ident") };
    assert_eq!((a.samples, a.seed), (1234, 4));
    assert_eq!(resolved["seed"], "4");
    assert_eq!(resolved["samples"], "1234");

    // Config placed after the subcommand works the same way.
    let (cli, _) = parse(&argv(&format!("ident --config {}", cfg.display()))).unwrap();
    let Command::Ident(a) = cli.command else { panic!("expected ident") };
    assert_eq!(a.seed, 9);
}

#[test]
fn nested_subcommand_and_renamed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("view.cfg");
    std::fs::write(&cfg, "in = data\nctx = quad2\npng = a.png\n").unwrap();
    let (cli, _) = parse(&argv(&format!("--config {} quad view --in other", cfg.display()))).unwrap();
    let Command::Quad { command: ctxmod_cli::app::QuadCommand::View(v) } = cli.command else { panic!() };
    assert_eq!(v.input, std::path::PathBuf::from("other"));
    assert_eq!(v.ctx.label(), "quad2");
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "sample = 10\n").unwrap();
    let err = parse(&argv(&format!("--config {} ident", cfg.display()))).unwrap_err();
    assert!(err.to_string().contains("unknown config key"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn hash_depends_on_values() {
    let a: BTreeMap<String, String> = [("seed".into(), "1".into())].into();
    let b: BTreeMap<String, String> = [("seed".into(), "2".into())].into();
    assert_eq!(config_hash(&a).len(), 64);
    assert_eq!(config_hash(&a), config_hash(&a.clone()));
    assert_ne!(config_hash(&a), config_hash(&b));
}
