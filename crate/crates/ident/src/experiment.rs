use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assumptions::{check_assumptions, AssumptionReport};
use crate::error::{IdentError, Result};
use crate::model::{GroundTruth, MBPair};
use crate::recover::{recover_from_simulation, recover_mb_oracle, SampleEstimator};

/// Largest `m` for the exhaustive permutation search.
pub const MAX_PERMUTATION_M: usize = 8;

fn permutations(m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..m).collect();
    heap(m, &mut current, &mut out);
    out
}

fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if k <= 1 {
        out.push(a.clone());
        return;
    }
    for i in 0..k - 1 {
        heap(k - 1, a, out);
        if k % 2 == 0 { a.swap(i, k - 1) } else { a.swap(0, k - 1) }
    }
    heap(k - 1, a, out);
}

/// Permutation `p` minimising the error of `estimate` against `truth.permute_columns(p)`.
pub fn best_permutation(estimate: &MBPair, truth: &MBPair) -> Result<(Vec<usize>, f64)> {
    let m = truth.m.ncols();
    if estimate.m.shape() != truth.m.shape() || estimate.b.shape() != truth.b.shape() {
        return Err(IdentError::Invalid("estimate and truth shapes differ".into()));
    }
    if m > MAX_PERMUTATION_M {
        return Err(IdentError::Invalid(format!("m = {m} exceeds {MAX_PERMUTATION_M}")));
    }
    let mut best = (Vec::new(), f64::INFINITY);
    for p in permutations(m) {
        let err = estimate.rel_error(&truth.permute_columns(&p));
        if err < best.1 {
            best = (p, err);
        }
    }
    Ok(best)
}

/// Ground truth with concept `k` taken from concept `perm[k]` of `gt`.
pub fn permute_concepts(gt: &GroundTruth, perm: &[usize]) -> GroundTruth {
    GroundTruth {
        atoms: gt.atoms.clone(),
        sigma_e: gt.sigma_e.clone(),
        supports: perm.iter().map(|&k| gt.supports[k].clone()).collect(),
        lambda: perm.iter().map(|&k| gt.lambda[k].clone()).collect(),
        mu: perm.iter().map(|&k| gt.mu[k].clone()).collect(),
        omega: perm.iter().map(|&k| gt.omega[k]).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentConfig {
    pub n: usize,
    pub m: usize,
    pub d_e: usize,
    pub samples: usize,
    pub omega: f64,
    pub seed: u64,
    pub estimator: SampleEstimator,
}

impl Default for IdentConfig {
    fn default() -> Self {
        Self { n: 3, m: 4, d_e: 8, samples: 50_000, omega: 1.0, seed: 0, estimator: SampleEstimator::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlrCheck {
    pub points: usize,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub m_hat: Vec<Vec<f64>>,
    pub b_hat: Vec<Vec<f64>>,
    pub rel_error: f64,
    pub condition: Vec<f64>,
    pub tau: f64,
    pub supports: Vec<Vec<usize>>,
    pub support_exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub hidden: Vec<usize>,
    pub found: Vec<usize>,
    pub rel_error: f64,
    pub identified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentReport {
    pub config: IdentConfig,
    pub ground_truth: GroundTruth,
    pub m_true: Vec<Vec<f64>>,
    pub b_true: Vec<Vec<f64>>,
    pub assumptions: AssumptionReport,
    pub llr: LlrCheck,
    /// Absent when the assumptions fail.
    pub oracle: Option<RecoveryReport>,
    pub sampled: Option<RecoveryReport>,
    pub permutation: Option<PermutationReport>,
}

fn rows(x: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `0.1 ·` the smallest nonzero `1/ω²`.
pub fn support_threshold(truth: &MBPair) -> f64 {
    0.1 * truth.m.iter().copied().filter(|v| *v != 0.0).fold(f64::INFINITY, f64::min)
}

fn recovery_report(estimate: &MBPair, condition: Vec<f64>, truth: &MBPair, tau: f64) -> RecoveryReport {
    let supports = estimate.supports(tau);
    RecoveryReport {
        m_hat: rows(&estimate.m),
        b_hat: rows(&estimate.b),
        rel_error: estimate.rel_error(truth),
        condition,
        tau,
        support_exact: supports == truth.supports(0.0),
        supports,
    }
}

/// Max `|llr_joint − llr_quadratic|` over random embeddings and every concept.
pub fn llr_agreement(gt: &GroundTruth, points: usize, seed: u64) -> Result<LlrCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let e = DVector::from_fn(gt.d_e(), |_, _| rng.random_range(-3.0..3.0));
        for j in 0..gt.m() {
            worst = worst.max((gt.llr_joint(j, &e)? - gt.llr_quadratic(j, &e)?).abs());
        }
    }
    Ok(LlrCheck { points, max_abs_diff: worst })
}

/// Runs an experiment on an explicit ground truth.
pub fn run_on(gt: &GroundTruth, config: IdentConfig) -> Result<IdentReport> {
    gt.validate()?;
    let truth = gt.mb();
    let assumptions = check_assumptions(&truth, config.seed);
    let llr = llr_agreement(gt, 32, config.seed)?;
    let mut report = IdentReport {
        config: config.clone(),
        ground_truth: gt.clone(),
        m_true: rows(&truth.m),
        b_true: rows(&truth.b),
        assumptions,
        llr,
        oracle: None,
        sampled: None,
        permutation: None,
    };
    if !report.assumptions.holds {
        return Ok(report);
    }
    let tau = support_threshold(&truth);
    let oracle = recover_mb_oracle(gt, config.seed)?;
    report.oracle = Some(recovery_report(&oracle.mb, oracle.condition, &truth, tau));
    let sampled = recover_from_simulation(gt, config.samples, config.estimator, config.seed)?;
    report.sampled = Some(recovery_report(&sampled.mb, sampled.condition, &truth, tau));

    if gt.m() <= MAX_PERMUTATION_M {
        let mut hidden: Vec<usize> = (0..gt.m()).collect();
        hidden.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed));
        let shuffled = permute_concepts(gt, &hidden);
        let est = recover_from_simulation(&shuffled, config.samples, config.estimator, config.seed.wrapping_add(1000))?;
        let (found, rel_error) = best_permutation(&est.mb, &truth)?;
        report.permutation = Some(PermutationReport { identified: found == hidden, hidden, found, rel_error });
    }
    Ok(report)
}

/// Random ground truth from the config, then [`run_on`].
pub fn run_experiment(config: IdentConfig) -> Result<IdentReport> {
    let supports = GroundTruth::default_supports(config.n, config.m);
    let gt = GroundTruth::random(config.n, config.d_e, supports, config.omega, config.seed)?;
    run_on(&gt, config)
}

impl IdentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
