use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IdentError, Result};
use crate::gaussian::Gaussian;
use crate::model::{Env, GroundTruth, MBPair, Samples};

/// Largest grid for the oracle fit before switching to random points.
const MAX_GRID: usize = 4096;
const GRID_LEVELS: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];

/// Estimate of `(M, B)` with one design condition number per concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub mb: MBPair,
    pub condition: Vec<f64>,
}

/// How the sample route turns draws into a log-likelihood ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleEstimator {
    /// Gaussian MLE per environment, plug-in ratio, then the grid fit.
    #[default]
    GaussianPlugIn,
    /// Logistic regression of environment vs observational draws on the quadratic features.
    Logistic,
}

/// Evaluation points in atom coordinates.
pub fn design_points(n: usize, seed: u64) -> Vec<DVector<f64>> {
    let full = GRID_LEVELS.len().checked_pow(n as u32).filter(|&c| c <= MAX_GRID);
    match full {
        Some(count) => (0..count)
            .map(|mut idx| {
                DVector::from_fn(n, |_, _| {
                    let v = GRID_LEVELS[idx % GRID_LEVELS.len()];
                    idx /= GRID_LEVELS.len();
                    v
                })
            })
            .collect(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..MAX_GRID)
                .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)))
                .collect()
        }
    }
}

/// `[u², u, 1]`.
fn features(u: &DVector<f64>) -> impl Iterator<Item = f64> + '_ {
    u.iter().map(|v| v * v).chain(u.iter().copied()).chain(std::iter::once(1.0))
}

fn design(points: &[DVector<f64>]) -> DMatrix<f64> {
    let n = points[0].len();
    let cols = 2 * n + 1;
    DMatrix::from_row_iterator(points.len(), cols, points.iter().flat_map(features))
}

fn condition_number(x: &DMatrix<f64>) -> f64 {
    let sv = x.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 { max / min } else { f64::INFINITY }
}

/// Least squares of `h` on `[u², u, 1]`; returns coefficients and the design condition number.
pub fn fit_quadratic(points: &[DVector<f64>], h: &[f64]) -> Result<(DVector<f64>, f64)> {
    if points.is_empty() || points.len() != h.len() {
        return Err(IdentError::Regression("need one target per design point".into()));
    }
    let x = design(points);
    let cond = condition_number(&x);
    if !cond.is_finite() || cond > 1e12 {
        return Err(IdentError::Regression(format!("design condition number {cond:.3e}")));
    }
    let y = DVector::from_column_slice(h);
    let coef = x
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| IdentError::Regression(e.to_string()))?;
    Ok((coef, cond))
}

fn assemble(n: usize, fits: Vec<(DVector<f64>, f64)>, quad_sign: f64, lin_sign: f64) -> Recovery {
    let m = fits.len();
    let mut mm = DMatrix::zeros(n, m);
    let mut b = DMatrix::zeros(n, m);
    let mut condition = Vec::with_capacity(m);
    for (j, (coef, cond)) in fits.into_iter().enumerate() {
        for i in 0..n {
            mm[(i, j)] = quad_sign * 2.0 * coef[i];
            b[(i, j)] = lin_sign * coef[n + i];
        }
        condition.push(cond);
    }
    Recovery { mb: MBPair { m: mm, b }, condition }
}

/// Fits `h_j(u) = Σ_i ½M_ij u_i² − B_ij u_i + const` to the exact log-likelihood ratio.
pub fn recover_mb_oracle(gt: &GroundTruth, seed: u64) -> Result<Recovery> {
    let points = design_points(gt.n(), seed);
    let embeddings: Vec<DVector<f64>> = points.iter().map(|u| gt.embedding_of(u)).collect();
    let fits = (0..gt.m())
        .map(|j| {
            let h = embeddings.iter().map(|e| gt.llr_joint(j, e)).collect::<Result<Vec<_>>>()?;
            fit_quadratic(&points, &h)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(gt.n(), fits, 1.0, -1.0))
}

/// Atom coordinates `A e` of every draw, one row per draw.
pub fn coords_of(atoms: &DMatrix<f64>, samples: &Samples) -> DMatrix<f64> {
    &samples.e * atoms.transpose()
}

fn gaussian_mle(u: &DMatrix<f64>) -> Result<Gaussian> {
    let count = u.nrows();
    if count < u.ncols() + 2 {
        return Err(IdentError::Regression(format!("{count} draws are too few")));
    }
    let mean = u.row_mean().transpose();
    let centred = DMatrix::from_fn(count, u.ncols(), |r, c| u[(r, c)] - mean[c]);
    let cov = centred.transpose() * &centred / (count as f64 - 1.0);
    Gaussian::new(mean, cov, "sample covariance")
}

/// Newton-Raphson logistic regression; returns coefficients and the Hessian condition number.
pub fn logistic_regression(x: &DMatrix<f64>, y: &[f64]) -> Result<(DVector<f64>, f64)> {
    let p = x.ncols();
    let mut w = DVector::zeros(p);
    for _ in 0..100 {
        let eta = x * &w;
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for r in 0..x.nrows() {
            let prob = 1.0 / (1.0 + (-eta[r]).exp());
            let row = x.row(r).transpose();
            grad += &row * (y[r] - prob);
            hess.ger(prob * (1.0 - prob), &row, &row, 1.0);
        }
        let cond = condition_number(&hess);
        if !cond.is_finite() || cond > 1e14 {
            return Err(IdentError::Regression(format!("Hessian condition number {cond:.3e}")));
        }
        let step = hess
            .clone()
            .cholesky()
            .ok_or_else(|| IdentError::Regression("Hessian is not positive definite".into()))?
            .solve(&grad);
        w += &step;
        if step.amax() < 1e-12 * (1.0 + w.amax()) {
            return Ok((w, cond));
        }
    }
    Err(IdentError::Regression("Newton iterations did not converge".into()))
}

/// Recovers `(M, B)` from draws of the observational and every single-concept environment.
///
/// `envs[j]` holds draws from `Env::Ivn(j)`. Only embeddings and the atom basis are used.
pub fn recover_mb_samples(
    atoms: &DMatrix<f64>,
    obs: &Samples,
    envs: &[Samples],
    estimator: SampleEstimator,
    seed: u64,
) -> Result<Recovery> {
    let n = atoms.nrows();
    let u0 = coords_of(atoms, obs);
    match estimator {
        SampleEstimator::GaussianPlugIn => {
            let p0 = gaussian_mle(&u0)?;
            let points = design_points(n, seed);
            let fits = envs
                .iter()
                .map(|s| {
                    let pj = gaussian_mle(&coords_of(atoms, s))?;
                    let h: Vec<f64> = points.iter().map(|u| p0.log_density(u) - pj.log_density(u)).collect();
                    fit_quadratic(&points, &h)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(assemble(n, fits, 1.0, -1.0))
        }
        SampleEstimator::Logistic => {
            let fits = envs
                .iter()
                .map(|s| {
                    let uj = coords_of(atoms, s);
                    let rows: Vec<DVector<f64>> = (0..u0.nrows())
                        .map(|r| u0.row(r).transpose())
                        .chain((0..uj.nrows()).map(|r| uj.row(r).transpose()))
                        .collect();
                    let y: Vec<f64> = (0..u0.nrows()).map(|_| 0.0).chain((0..uj.nrows()).map(|_| 1.0)).collect();
                    logistic_regression(&design(&rows), &y)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(assemble(n, fits, -1.0, 1.0))
        }
    }
}

/// Simulates every environment with `count` draws and runs [`recover_mb_samples`].
pub fn recover_from_simulation(
    gt: &GroundTruth,
    count: usize,
    estimator: SampleEstimator,
    seed: u64,
) -> Result<Recovery> {
    let obs = gt.simulate(Env::Obs, count, seed)?;
    let envs = (0..gt.m())
        .map(|j| gt.simulate(Env::Ivn(j), count, seed.wrapping_add(1 + j as u64)))
        .collect::<Result<Vec<_>>>()?;
    recover_mb_samples(&gt.atoms, &obs, &envs, estimator, seed)
}
