use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{IdentError, Result};

/// Multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

pub fn cholesky(cov: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let sym = (cov + cov.transpose()) * 0.5;
    Cholesky::new(sym).ok_or_else(|| IdentError::NotPositiveDefinite { what: what.to_string() })
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, what: &str) -> Result<Self> {
        let chol = cholesky(&cov, what)?;
        Ok(Self { mean, cov, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        let sol = self.chol.solve(&d);
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        -0.5 * (d.dot(&sol) + log_det + self.dim() as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + self.chol.l() * z
    }

    /// Distribution of the first `k` coordinates given the rest equal `value`.
    pub fn condition_tail(&self, k: usize, value: &DVector<f64>) -> Result<Gaussian> {
        let d = self.dim();
        let s11 = self.cov.view((0, 0), (k, k));
        let s12 = self.cov.view((0, k), (k, d - k));
        let s22 = self.cov.view((k, k), (d - k, d - k)).into_owned();
        let c22 = cholesky(&s22, "conditioning block")?;
        let gain = c22.solve(&s12.transpose()).transpose();
        let mean = self.mean.rows(0, k) + &gain * (value - self.mean.rows(k, d - k));
        let cov = s11 - &gain * s12.transpose();
        Gaussian::new(mean, cov, "conditional covariance")
    }
}
