//! Reduced-form SEM over concepts with per-target intervention slices.
//!
//! The coefficient matrix is organised in `w_eps × w_c` blocks; block `(k, j)`
//! carries the effect of `ε_k` on `c_j`, and `c = Aᵀ ε`.

use std::collections::BTreeSet;
use std::fmt;

use ctxmod_autodiff::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub m: usize,
    pub w_eps: usize,
    pub w_c: usize,
    pub w_exp: usize,
    pub h_exp: usize,
}

impl Default for ConceptSpec {
    fn default() -> Self {
        Self {
            m: 6,
            w_eps: 5,
            w_c: 5,
            w_exp: 15,
            h_exp: 2,
        }
    }
}

impl ConceptSpec {
    pub fn validate(&self) -> Result<()> {
        if [self.m, self.w_eps, self.w_c, self.w_exp, self.h_exp].contains(&0) {
            return Err(CoreError::Config(format!("concept widths must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn dim_eps(&self) -> usize {
        self.m * self.w_eps
    }

    pub fn dim_c(&self) -> usize {
        self.m * self.w_c
    }

    pub fn dim_z(&self) -> usize {
        self.m * self.w_exp
    }

    /// Layer sizes of one expressive MLP, interpolated from `w_exp` to `w_eps`.
    pub fn expressive_widths(&self) -> Vec<usize> {
        let (a, b) = (self.w_exp as f64, self.w_eps as f64);
        (0..=self.h_exp)
            .map(|i| (a + (b - a) * i as f64 / self.h_exp as f64).round() as usize)
            .collect()
    }
}

/// Intervened concept indices; empty means observational.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InterventionSet(BTreeSet<usize>);

impl InterventionSet {
    pub fn obs() -> Self {
        Self::default()
    }

    pub fn new(targets: impl IntoIterator<Item = usize>, m: usize) -> Result<Self> {
        let set: BTreeSet<usize> = targets.into_iter().collect();
        if let Some(&target) = set.iter().find(|&&t| t >= m) {
            return Err(CoreError::BadTarget { target, m });
        }
        Ok(Self(set))
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.contains(&j)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn check(&self, m: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t >= m) {
            Some(&target) => Err(CoreError::BadTarget { target, m }),
            None => Ok(()),
        }
    }

    /// Every subset of `[m]` with at most `max` elements, smallest first.
    pub fn all_up_to(m: usize, max: usize) -> Vec<Self> {
        let mut out = vec![Self::obs()];
        let mut frontier = vec![Self::obs()];
        for _ in 0..max.min(m) {
            let mut next = Vec::new();
            for s in &frontier {
                let start = s.0.iter().next_back().map_or(0, |&l| l + 1);
                for j in start..m {
                    let mut t = s.clone();
                    t.0.insert(j);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }
}

impl fmt::Display for InterventionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("{}");
        }
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Which parameter supplies block `(k, j)` of a context slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSource {
    Diag(usize),
    Zero,
    /// Block `j` of `beta_row_k`.
    Beta { k: usize, j: usize },
    Shared { k: usize, j: usize },
}

/// Block rule of the intervention layer; zeroing takes precedence over substitution.
pub fn block_source(k: usize, j: usize, targets: &InterventionSet) -> BlockSource {
    match (targets.contains(j), targets.contains(k)) {
        (true, _) if k == j => BlockSource::Diag(j),
        (true, _) => BlockSource::Zero,
        (false, true) => BlockSource::Beta { k, j },
        (false, false) => BlockSource::Shared { k, j },
    }
}

/// Column offset of block `j` inside `beta_row_k`, which omits block `k`.
fn beta_col(k: usize, j: usize, w_c: usize) -> usize {
    debug_assert_ne!(k, j);
    (if j < k { j } else { j - 1 }) * w_c
}

/// Plain-tensor SEM parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SemTensor {
    pub m: usize,
    pub w_eps: usize,
    pub w_c: usize,
    /// `(m·w_eps) × (m·w_c)`.
    pub a0: Tensor,
    /// `w_eps × ((m−1)·w_c)` per target.
    pub beta_row: Vec<Tensor>,
    /// `w_eps × w_c` per target.
    pub diag: Vec<Tensor>,
}

impl SemTensor {
    /// A0 ~ N(0, 1/(m·w_eps)); interventional blocks start as copies of A0.
    pub fn init<R: Rng + ?Sized>(spec: &ConceptSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let std = (1.0 / spec.dim_eps() as f64).sqrt();
        let a0 = Tensor::randn(&[spec.dim_eps(), spec.dim_c()], std, rng)?;
        Self::tied(spec.m, spec.w_eps, spec.w_c, a0)
    }

    /// Parameters whose interventional blocks equal the matching A0 blocks.
    pub fn tied(m: usize, w_eps: usize, w_c: usize, a0: Tensor) -> Result<Self> {
        if a0.shape() != [m * w_eps, m * w_c] {
            return Err(CoreError::Config(format!(
                "A0 shape {:?} does not match m={m}, w_eps={w_eps}, w_c={w_c}",
                a0.shape()
            )));
        }
        let mut s = Self {
            m,
            w_eps,
            w_c,
            beta_row: Vec::new(),
            diag: Vec::new(),
            a0,
        };
        for k in 0..m {
            s.diag.push(s.a0_block(k, k)?);
            if m > 1 {
                let row = s.a0.slice_axis(0, k * w_eps, w_eps)?;
                let parts: Vec<Tensor> = (0..m)
                    .filter(|&j| j != k)
                    .map(|j| row.slice_axis(1, j * w_c, w_c))
                    .collect::<std::result::Result<_, _>>()?;
                let refs: Vec<&Tensor> = parts.iter().collect();
                s.beta_row.push(Tensor::concat(&refs, 1)?);
            } else {
                s.beta_row.push(Tensor::zeros(&[w_eps, w_c])?);
            }
        }
        Ok(s)
    }

    pub fn a0_block(&self, k: usize, j: usize) -> Result<Tensor> {
        Ok(self
            .a0
            .slice_axis(0, k * self.w_eps, self.w_eps)?
            .slice_axis(1, j * self.w_c, self.w_c)?)
    }

    fn source_block(&self, src: BlockSource) -> Result<Tensor> {
        Ok(match src {
            BlockSource::Diag(j) => self.diag[j].clone(),
            BlockSource::Zero => Tensor::zeros(&[self.w_eps, self.w_c])?,
            BlockSource::Beta { k, j } => {
                self.beta_row[k].slice_axis(1, beta_col(k, j, self.w_c), self.w_c)?
            }
            BlockSource::Shared { k, j } => self.a0_block(k, j)?,
        })
    }

    /// The coefficient slice of a context.
    pub fn context_matrix(&self, targets: &InterventionSet) -> Result<Tensor> {
        targets.check(self.m)?;
        if targets.is_empty() {
            return Ok(self.a0.clone());
        }
        let (we, wc) = (self.w_eps, self.w_c);
        let mut out = Tensor::zeros(&[self.m * we, self.m * wc])?;
        let cols = self.m * wc;
        for k in 0..self.m {
            for j in 0..self.m {
                let block = self.source_block(block_source(k, j, targets))?;
                let dst = out.data_mut();
                for r in 0..we {
                    let row = (k * we + r) * cols + j * wc;
                    dst[row..row + wc].copy_from_slice(&block.data()[r * wc..(r + 1) * wc]);
                }
            }
        }
        Ok(out)
    }

    /// `c = A_Iᵀ ε` for a single vector or each row of a batch.
    pub fn apply(&self, targets: &InterventionSet, eps: &Tensor) -> Result<Tensor> {
        let a = self.context_matrix(targets)?;
        match eps.shape() {
            [d] if *d == self.m * self.w_eps => Ok(a.matmul_ex(true, &eps.reshape(&[*d, 1])?, false)?
                .reshape(&[self.m * self.w_c])?),
            [_, d] if *d == self.m * self.w_eps => Ok(eps.matmul(&a)?),
            s => Err(CoreError::Config(format!(
                "eps shape {s:?} does not match dim(ε)={}",
                self.m * self.w_eps
            ))),
        }
    }

    /// Compares every block of `candidate` with the block rule for `targets`.
    pub fn structural_check(&self, targets: &InterventionSet, candidate: &Tensor) -> StructuralReport {
        let (we, wc) = (self.w_eps, self.w_c);
        if candidate.shape() != [self.m * we, self.m * wc] {
            return StructuralReport::ShapeMismatch(candidate.shape().to_vec());
        }
        let cols = self.m * wc;
        for k in 0..self.m {
            for j in 0..self.m {
                let rule = expected_block(self, k, j, targets);
                for r in 0..we {
                    for s in 0..wc {
                        let got = candidate.data()[(k * we + r) * cols + j * wc + s];
                        let want = rule[r * wc + s];
                        if got.to_bits() != want.to_bits() {
                            return StructuralReport::Violation {
                                block: (k, j),
                                expected: block_source(k, j, targets),
                                max_abs_diff: (got - want).abs(),
                            };
                        }
                    }
                }
            }
        }
        StructuralReport::Pass
    }

    pub fn group_lasso(&self) -> f64 {
        let mut total = 0.0;
        for k in 0..self.m {
            for j in 0..self.m {
                let b = self.a0_block(k, j).expect("block in range");
                total += b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            }
        }
        total
    }

    pub fn l2(&self) -> f64 {
        self.a0.data().iter().map(|v| v * v).sum()
    }
}

/// The expected block values, re-derived from the parameters by direct indexing.
fn expected_block(s: &SemTensor, k: usize, j: usize, targets: &InterventionSet) -> Vec<f64> {
    let (we, wc) = (s.w_eps, s.w_c);
    let j_int = targets.contains(j);
    let k_int = targets.contains(k);
    (0..we * wc)
        .map(|i| {
            let (r, c) = (i / wc, i % wc);
            if j_int && k == j {
                s.diag[j].data()[r * wc + c]
            } else if j_int {
                0.0
            } else if k_int {
                let width = s.beta_row[k].shape()[1];
                let col = if j < k { j * wc } else { (j - 1) * wc };
                s.beta_row[k].data()[r * width + col + c]
            } else {
                s.a0.data()[(k * we + r) * s.m * wc + j * wc + c]
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum StructuralReport {
    Pass,
    ShapeMismatch(Vec<usize>),
    Violation {
        block: (usize, usize),
        expected: BlockSource,
        max_abs_diff: f64,
    },
}

impl StructuralReport {
    pub fn passed(&self) -> bool {
        matches!(self, StructuralReport::Pass)
    }
}

/// SEM parameters placed on a tape.
#[derive(Clone)]
pub struct SemVars<'t> {
    pub m: usize,
    pub w_eps: usize,
    pub w_c: usize,
    pub a0: Var<'t>,
    pub beta_row: Vec<Var<'t>>,
    pub diag: Vec<Var<'t>>,
}

impl<'t> SemVars<'t> {
    fn block(&self, src: BlockSource) -> Result<Var<'t>> {
        let (we, wc) = (self.w_eps, self.w_c);
        Ok(match src {
            BlockSource::Diag(j) => self.diag[j],
            BlockSource::Zero => self.a0.tape().constant(Tensor::zeros(&[we, wc])?),
            BlockSource::Beta { k, j } => self.beta_row[k].slice(1, beta_col(k, j, wc), wc)?,
            BlockSource::Shared { k, j } => self.a0.slice(0, k * we, we)?.slice(1, j * wc, wc)?,
        })
    }

    /// Differentiable context slice; the observational slice is A0 itself.
    pub fn context_matrix(&self, targets: &InterventionSet) -> Result<Var<'t>> {
        targets.check(self.m)?;
        if targets.is_empty() {
            return Ok(self.a0);
        }
        let columns = (0..self.m)
            .map(|j| {
                let blocks = (0..self.m)
                    .map(|k| self.block(block_source(k, j, targets)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Var::concat(&blocks, 0)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Var::concat(&columns, 1)?)
    }

    /// `Σ_blocks ‖A0_{kj}‖_F`, smoothed by a tiny constant so the gradient at zero is finite.
    pub fn group_lasso(&self) -> Result<Var<'t>> {
        let (we, wc) = (self.w_eps, self.w_c);
        let mut terms = Vec::with_capacity(self.m * self.m);
        for k in 0..self.m {
            let row = self.a0.slice(0, k * we, we)?;
            for j in 0..self.m {
                let b = row.slice(1, j * wc, wc)?;
                terms.push(b.square()?.sum()?.add_scalar(1e-12)?.sqrt()?.reshape(&[1])?);
            }
        }
        Ok(Var::concat(&terms, 0)?.sum()?)
    }

    pub fn l2(&self) -> Result<Var<'t>> {
        Ok(self.a0.square()?.sum()?)
    }
}
