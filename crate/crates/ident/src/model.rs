use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IdentError, Result};
use crate::gaussian::{cholesky, Gaussian};

/// A linear-Gaussian concept model.
///
/// Concept `j` reads the atoms in `supports[j]`: `c_j = C_j e + η_j` with the
/// rows of `C_j` equal to those atoms and `η_j ~ N(0, diag(lambda[j]))`.
/// Environment `j` conditions on a noisy observation of `c_j`:
/// `p_j(e) ∝ p_0(e) · N(mu[j]; C_j e, omega[j]² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `n × d_e`, one atom per row.
    pub atoms: DMatrix<f64>,
    pub supports: Vec<Vec<usize>>,
    pub sigma_e: DMatrix<f64>,
    pub lambda: Vec<DVector<f64>>,
    pub mu: Vec<DVector<f64>>,
    pub omega: Vec<f64>,
}

/// `M_ij = 1/ω_j²` and `B_ij = (μ_j)_i/ω_j²` on the support of concept `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MBPair {
    pub m: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl MBPair {
    /// `‖(M̂ − M, B̂ − B)‖_F / ‖(M, B)‖_F`.
    pub fn rel_error(&self, truth: &MBPair) -> f64 {
        let num = (&self.m - &truth.m).norm_squared() + (&self.b - &truth.b).norm_squared();
        let den = truth.m.norm_squared() + truth.b.norm_squared();
        (num / den).sqrt()
    }

    /// Columns reordered so that column `k` of the result is column `perm[k]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> MBPair {
        let pick = |x: &DMatrix<f64>| DMatrix::from_fn(x.nrows(), perm.len(), |i, k| x[(i, perm[k])]);
        MBPair { m: pick(&self.m), b: pick(&self.b) }
    }

    /// Atoms with `|M_ij| > tau`, per concept.
    pub fn supports(&self, tau: f64) -> Vec<Vec<usize>> {
        (0..self.m.ncols())
            .map(|j| (0..self.m.nrows()).filter(|&i| self.m[(i, j)].abs() > tau).collect())
            .collect()
    }
}

/// Observational or single-concept environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Env {
    Obs,
    Ivn(usize),
}

/// Joint draws of embeddings and stacked concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    /// `count × d_e`.
    pub e: DMatrix<f64>,
    /// `count × Σ_j |S^j|`, concepts stacked in index order.
    pub c: DMatrix<f64>,
}

/// Linear SEM over concept blocks in index order: `c_k = Σ_{l<k} α_{lk} c_l + ε_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSem {
    /// `alpha[k][l]` maps `c_l` into `c_k` (`|S^k| × |S^l|`), for `l < k`.
    pub alpha: Vec<Vec<DMatrix<f64>>>,
    pub eps_cov: Vec<DMatrix<f64>>,
}

impl GroundTruth {
    pub fn n(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn m(&self) -> usize {
        self.supports.len()
    }

    pub fn d_e(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(IdentError::Invalid(s));
        let (n, m, d) = (self.n(), self.m(), self.d_e());
        if n == 0 || m == 0 || d < n {
            return bad(format!("need 0 < n ≤ d_e and m > 0, got n={n}, m={m}, d_e={d}"));
        }
        if self.atoms.rank(1e-9) != n {
            return bad("atoms are linearly dependent".into());
        }
        let mut covered = vec![false; n];
        for (j, s) in self.supports.iter().enumerate() {
            if s.is_empty() || s.windows(2).any(|w| w[0] >= w[1]) || s.iter().any(|&i| i >= n) {
                return bad(format!("support {j} must be a sorted non-empty subset of [n]"));
            }
            s.iter().for_each(|&i| covered[i] = true);
            if self.mu[j].len() != s.len() || self.lambda[j].len() != s.len() {
                return bad(format!("concept {j}: mu and lambda must have |S^j| = {} entries", s.len()));
            }
            if !(self.omega[j] > 0.0) || self.lambda[j].iter().any(|v| !(*v > 0.0)) {
                return bad(format!("concept {j}: omega and lambda must be positive"));
            }
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return bad(format!("atom {i} is used by no concept"));
        }
        if self.mu.len() != m || self.lambda.len() != m || self.omega.len() != m {
            return bad("one mu, lambda and omega per concept".into());
        }
        if self.sigma_e.shape() != (d, d) {
            return bad("sigma_e must be d_e × d_e".into());
        }
        cholesky(&self.sigma_e, "sigma_e")?;
        Ok(())
    }

    /// Singletons for the first `n` concepts, then the full set, then the full set minus one atom.
    pub fn default_supports(n: usize, m: usize) -> Vec<Vec<usize>> {
        (0..m)
            .map(|j| {
                if j < n {
                    return vec![j];
                }
                let k = (j - n) % (n + 1);
                (0..n).filter(|&i| n == 1 || k == 0 || i != k - 1).collect()
            })
            .collect()
    }

    /// Random instance with unit-norm-ish atoms, a well-conditioned `Σ_e`,
    /// `μ` entries in `±[0.5, 1.5]` and the given `ω`.
    pub fn random(n: usize, d_e: usize, supports: Vec<Vec<usize>>, omega: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(rand_distr::StandardNormal);
        let atoms = DMatrix::from_fn(n, d_e, |_, _| normal(&mut rng) / (d_e as f64).sqrt());
        let l = DMatrix::from_fn(d_e, d_e, |_, _| normal(&mut rng) / (d_e as f64).sqrt());
        let sigma_e = &l * l.transpose() + DMatrix::identity(d_e, d_e) * 0.5;
        let lambda = supports
            .iter()
            .map(|s| DVector::from_fn(s.len(), |_, _| rng.random_range(0.1..0.5)))
            .collect();
        let mu = supports
            .iter()
            .map(|s| {
                DVector::from_fn(s.len(), |_, _| {
                    let v: f64 = rng.random_range(0.5..1.5);
                    if rng.random::<bool>() { v } else { -v }
                })
            })
            .collect();
        let m = supports.len();
        let gt = Self {
            atoms,
            supports,
            sigma_e,
            lambda,
            mu,
            omega: vec![omega; m],
        };
        gt.validate()?;
        Ok(gt)
    }

    /// Rows of `C_j`.
    pub fn c_matrix(&self, j: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.supports[j].len(), self.d_e(), |r, c| self.atoms[(self.supports[j][r], c)])
    }

    /// Stacked `C` over all concepts.
    pub fn c_stack(&self) -> DMatrix<f64> {
        let rows: Vec<usize> = self.supports.iter().flatten().copied().collect();
        DMatrix::from_fn(rows.len(), self.d_e(), |r, c| self.atoms[(rows[r], c)])
    }

    pub fn mb(&self) -> MBPair {
        let (n, m) = (self.n(), self.m());
        let mut mm = DMatrix::zeros(n, m);
        let mut b = DMatrix::zeros(n, m);
        for j in 0..m {
            let w2 = self.omega[j] * self.omega[j];
            for (r, &i) in self.supports[j].iter().enumerate() {
                mm[(i, j)] = 1.0 / w2;
                b[(i, j)] = self.mu[j][r] / w2;
            }
        }
        MBPair { m: mm, b }
    }

    pub fn prior(&self) -> Result<Gaussian> {
        Gaussian::new(DVector::zeros(self.d_e()), self.sigma_e.clone(), "sigma_e")
    }

    /// `p_j(e)`, obtained by conditioning the joint Gaussian of `(e, C_j e + ξ)`,
    /// `ξ ~ N(0, ω_j² I)`, on the second block equal to `μ_j`.
    pub fn env_distribution(&self, j: usize) -> Result<Gaussian> {
        let (d, k) = (self.d_e(), self.supports[j].len());
        let c = self.c_matrix(j);
        let se = &self.sigma_e;
        let mut cov = DMatrix::zeros(d + k, d + k);
        cov.view_mut((0, 0), (d, d)).copy_from(se);
        let cross = se * c.transpose();
        cov.view_mut((0, d), (d, k)).copy_from(&cross);
        cov.view_mut((d, 0), (k, d)).copy_from(&cross.transpose());
        let ccov = &c * se * c.transpose() + DMatrix::identity(k, k) * self.omega[j].powi(2);
        cov.view_mut((d, d), (k, k)).copy_from(&ccov);
        let joint = Gaussian::new(DVector::zeros(d + k), cov, "joint (e, c)")?;
        joint.condition_tail(d, &self.mu[j])
    }

    /// Block regression of each concept on its predecessors under the observational joint.
    pub fn sem(&self) -> Result<LinearSem> {
        let c = self.c_stack();
        let lam: Vec<f64> = self.lambda.iter().flat_map(|l| l.iter().copied()).collect();
        let cov = &c * &self.sigma_e * c.transpose() + DMatrix::from_diagonal(&DVector::from_vec(lam));
        let offsets: Vec<usize> = self
            .supports
            .iter()
            .scan(0, |acc, s| {
                let o = *acc;
                *acc += s.len();
                Some(o)
            })
            .collect();
        let mut alpha = Vec::with_capacity(self.m());
        let mut eps_cov = Vec::with_capacity(self.m());
        for k in 0..self.m() {
            let (ok, nk) = (offsets[k], self.supports[k].len());
            let skk = cov.view((ok, ok), (nk, nk)).into_owned();
            if ok == 0 {
                alpha.push(Vec::new());
                eps_cov.push(skk);
                continue;
            }
            let spp = cov.view((0, 0), (ok, ok)).into_owned();
            let skp = cov.view((ok, 0), (nk, ok)).into_owned();
            let coef = cholesky(&spp, "predecessor covariance")?.solve(&skp.transpose()).transpose();
            eps_cov.push(&skk - &coef * skp.transpose());
            alpha.push(
                (0..k)
                    .map(|l| coef.view((0, offsets[l]), (nk, self.supports[l].len())).into_owned())
                    .collect(),
            );
        }
        Ok(LinearSem { alpha, eps_cov })
    }

    /// Draws `(e, c)` from an environment.
    ///
    /// Observationally `e ~ N(0, Σ_e)` and `c = C e + η`. In environment `j`,
    /// `e ~ p_j(e)`, `c_j ~ N(μ_j, ω_j² I)` and every other concept follows the
    /// structural equations of [`GroundTruth::sem`].
    pub fn simulate(&self, env: Env, count: usize, seed: u64) -> Result<Samples> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim_c: usize = self.supports.iter().map(Vec::len).sum();
        let mut e = DMatrix::zeros(count, self.d_e());
        let mut c = DMatrix::zeros(count, dim_c);
        let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(rand_distr::StandardNormal);
        match env {
            Env::Obs => {
                let prior = self.prior()?;
                let cs = self.c_stack();
                let lam: Vec<f64> = self.lambda.iter().flat_map(|l| l.iter().copied()).collect();
                for r in 0..count {
                    let ev = prior.sample(&mut rng);
                    let cv = &cs * &ev + DVector::from_fn(dim_c, |i, _| lam[i].sqrt() * normal(&mut rng));
                    e.row_mut(r).copy_from(&ev.transpose());
                    c.row_mut(r).copy_from(&cv.transpose());
                }
            }
            Env::Ivn(j) => {
                if j >= self.m() {
                    return Err(IdentError::Invalid(format!("no concept {j}")));
                }
                let pj = self.env_distribution(j)?;
                let sem = self.sem()?;
                let chols = sem
                    .eps_cov
                    .iter()
                    .map(|s| cholesky(s, "exogenous covariance"))
                    .collect::<Result<Vec<_>>>()?;
                for r in 0..count {
                    let ev = pj.sample(&mut rng);
                    e.row_mut(r).copy_from(&ev.transpose());
                    let mut blocks: Vec<DVector<f64>> = Vec::with_capacity(self.m());
                    for k in 0..self.m() {
                        let nk = self.supports[k].len();
                        let z = DVector::from_fn(nk, |_, _| normal(&mut rng));
                        let v = if k == j {
                            &self.mu[j] + z * self.omega[j]
                        } else {
                            let mut v = chols[k].l() * z;
                            for (l, prev) in blocks.iter().enumerate() {
                                v += &sem.alpha[k][l] * prev;
                            }
                            v
                        };
                        blocks.push(v);
                    }
                    let flat: Vec<f64> = blocks.iter().flat_map(|b| b.iter().copied()).collect();
                    c.row_mut(r).copy_from(&DVector::from_vec(flat).transpose());
                }
            }
        }
        Ok(Samples { e, c })
    }

    /// `log p_0(e) − log p_j(e)` from the two Gaussian densities.
    pub fn llr_joint(&self, j: usize, e: &DVector<f64>) -> Result<f64> {
        Ok(self.prior()?.log_density(e) - self.env_distribution(j)?.log_density(e))
    }

    /// `½ (μ_j − C_j e)ᵀ Ω_j⁻¹ (μ_j − C_j e) + ½ log det(2πΩ_j) + log N(μ_j; 0, C_j Σ_e C_jᵀ + Ω_j)`.
    pub fn llr_quadratic(&self, j: usize, e: &DVector<f64>) -> Result<f64> {
        let c = self.c_matrix(j);
        let k = c.nrows();
        let w2 = self.omega[j].powi(2);
        let r = &self.mu[j] - &c * e;
        let quad = 0.5 * r.norm_squared() / w2;
        let log_det = 0.5 * k as f64 * (2.0 * std::f64::consts::PI * w2).ln();
        let marg_cov = &c * &self.sigma_e * c.transpose() + DMatrix::identity(k, k) * w2;
        let marg = Gaussian::new(DVector::zeros(k), marg_cov, "marginal of c_j")?;
        Ok(quad + log_det + marg.log_density(&self.mu[j]))
    }

    /// Embedding with atom coordinates `u` (minimum-norm preimage of `A e = u`).
    pub fn embedding_of(&self, u: &DVector<f64>) -> DVector<f64> {
        let a = &self.atoms;
        let gram = a * a.transpose();
        a.transpose() * gram.lu().solve(u).expect("atoms are independent")
    }

    /// Atom coordinates `u = A e`.
    pub fn coords(&self, e: &DVector<f64>) -> DVector<f64> {
        &self.atoms * e
    }
}
