use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::MBPair;

const RANK_TOL: f64 = 1e-9;
const NONZERO_TOL: f64 = 1e-9;

/// Outcome of the support and null-space conditions on `(M, B)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub n: usize,
    pub m: usize,
    /// Every atom is used by some concept.
    pub coverage: bool,
    /// No two concepts share a support.
    pub distinct_supports: bool,
    /// Pairs of concepts with identical supports.
    pub duplicate_pairs: Vec<(usize, usize)>,
    /// For all atoms `i ≠ k` some concept uses `i` but not `k`.
    pub atom_separation: bool,
    /// Ordered atom pairs `(i, k)` no concept separates.
    pub inseparable_atoms: Vec<(usize, usize)>,
    pub rank: usize,
    pub full_rank: bool,
    pub null_dim: usize,
    /// Certificate `v` with `M v = 0`, if one makes every entry of `B v` nonzero.
    pub v: Option<Vec<f64>>,
    pub bv: Option<Vec<f64>>,
    pub null_condition: bool,
    pub holds: bool,
}

fn supports_of(m: &DMatrix<f64>) -> Vec<Vec<usize>> {
    (0..m.ncols())
        .map(|j| (0..m.nrows()).filter(|&i| m[(i, j)].abs() > NONZERO_TOL).collect())
        .collect()
}

/// Orthonormal basis of `{v : M v = 0}`, one column per direction.
pub fn null_space(m: &DMatrix<f64>) -> DMatrix<f64> {
    let cols = m.ncols();
    // Pad to square so the SVD exposes every right singular vector.
    let mut padded = DMatrix::zeros(m.nrows().max(cols), cols);
    padded.view_mut((0, 0), m.shape()).copy_from(m);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested V");
    let scale = svd.singular_values.max().max(1.0);
    let null: Vec<DVector<f64>> = (0..cols)
        .filter(|&k| svd.singular_values[k] <= RANK_TOL * scale)
        .map(|k| vt.row(k).transpose())
        .collect();
    if null.is_empty() {
        DMatrix::zeros(cols, 0)
    } else {
        DMatrix::from_columns(&null)
    }
}

pub fn check_assumptions(mb: &MBPair, seed: u64) -> AssumptionReport {
    let (n, m) = mb.m.shape();
    let supports = supports_of(&mb.m);

    let coverage = (0..n).all(|i| supports.iter().any(|s| s.contains(&i)));
    let mut duplicate_pairs = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            if supports[a] == supports[b] {
                duplicate_pairs.push((a, b));
            }
        }
    }
    let mut inseparable_atoms = Vec::new();
    for i in 0..n {
        for k in 0..n {
            if i != k && !supports.iter().any(|s| s.contains(&i) && !s.contains(&k)) {
                inseparable_atoms.push((i, k));
            }
        }
    }

    let rank = mb.m.rank(RANK_TOL * mb.m.amax().max(1.0));
    let basis = null_space(&mb.m);
    let null_dim = basis.ncols();
    let certificate = match null_dim {
        0 => None,
        1 => Some(basis.column(0).into_owned()),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = DVector::from_fn(null_dim, |_, _| StandardNormal.sample(&mut rng));
            Some(&basis * w)
        }
    };
    let (v, bv, null_condition) = match certificate {
        Some(v) => {
            let bv = &mb.b * &v;
            let scale = mb.b.amax().max(1.0);
            let ok = bv.iter().all(|x| x.abs() > NONZERO_TOL * scale);
            (Some(v.iter().copied().collect()), Some(bv.iter().copied().collect()), ok)
        }
        None => (None, None, false),
    };

    let distinct_supports = duplicate_pairs.is_empty();
    let atom_separation = inseparable_atoms.is_empty();
    let full_rank = rank == n;
    AssumptionReport {
        n,
        m,
        coverage,
        distinct_supports,
        duplicate_pairs,
        atom_separation,
        inseparable_atoms,
        rank,
        full_rank,
        null_dim,
        v,
        bv,
        null_condition,
        holds: coverage && distinct_supports && atom_separation && full_rank && null_condition,
    }
}
