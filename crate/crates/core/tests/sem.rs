use ctxmod_autodiff::Tensor;
use ctxmod_core::sem::{block_source, BlockSource, ConceptSpec, InterventionSet, SemTensor, StructuralReport};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_sem(m: usize, w: usize, seed: u64) -> SemTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConceptSpec { m, w_eps: w, w_c: w, ..Default::default() };
    let mut s = SemTensor::init(&spec, &mut rng).unwrap();
    for j in 0..m {
        s.diag[j] = Tensor::randn(s.diag[j].shape(), 1.0, &mut rng).unwrap();
        s.beta_row[j] = Tensor::randn(s.beta_row[j].shape(), 1.0, &mut rng).unwrap();
    }
    s
}

#[test]
fn exhaustive_block_rule() {
    for m in 2..=4 {
        for w in 1..=2 {
            let s = random_sem(m, w, (m * 10 + w) as u64);
            for t in InterventionSet::all_up_to(m, 2) {
                let a = s.context_matrix(&t).unwrap();
                assert_eq!(s.structural_check(&t, &a), StructuralReport::Pass, "m={m} w={w} I={t}");
            }
            let obs = s.context_matrix(&InterventionSet::obs()).unwrap();
            assert!(obs.data().iter().zip(s.a0.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

#[test]
fn perturbed_block_is_named() {
    let s = random_sem(3, 2, 5);
    let t = InterventionSet::new([1], 3).unwrap();
    let mut a = s.context_matrix(&t).unwrap();
    // block (2, 1): row block 2, column block 1, first entry
    let cols = a.shape()[1];
    a.data_mut()[(2 * 2) * cols + 2] = 1e-9;
    match s.structural_check(&t, &a) {
        StructuralReport::Violation { block, expected, .. } => {
            assert_eq!(block, (2, 1));
            assert_eq!(expected, BlockSource::Zero);
        }
        other => panic!("expected a violation, got {other:?}"),
    }
}

#[test]
fn shared_blocks_identical_across_contexts() {
    let s = random_sem(4, 2, 8);
    for t in InterventionSet::all_up_to(4, 2) {
        let a = s.context_matrix(&t).unwrap();
        for k in 0..4 {
            for j in 0..4 {
                if let BlockSource::Shared { .. } = block_source(k, j, &t) {
                    let got = a.slice_axis(0, 2 * k, 2).unwrap().slice_axis(1, 2 * j, 2).unwrap();
                    assert_eq!(got, s.a0_block(k, j).unwrap());
                }
            }
        }
    }
}

#[test]
fn composition_merges_single_target_rules() {
    let s = random_sem(4, 1, 2);
    for j in 0..4 {
        for k in j + 1..4 {
            let both = s.context_matrix(&InterventionSet::new([j, k], 4).unwrap()).unwrap();
            let sj = s.context_matrix(&InterventionSet::new([j], 4).unwrap()).unwrap();
            let sk = s.context_matrix(&InterventionSet::new([k], 4).unwrap()).unwrap();
            for r in 0..4 {
                for c in 0..4 {
                    let got = both.get(&[r, c]).unwrap();
                    let want = if c == j || c == k {
                        if r == c { if c == j { sj.get(&[r, c]).unwrap() } else { sk.get(&[r, c]).unwrap() } } else { 0.0 }
                    } else if r == j {
                        sj.get(&[r, c]).unwrap()
                    } else if r == k {
                        sk.get(&[r, c]).unwrap()
                    } else {
                        s.a0.get(&[r, c]).unwrap()
                    };
                    assert_eq!(got, want);
                }
            }
        }
    }
}

#[test]
fn apply_dimension_mismatch() {
    let s = random_sem(2, 1, 0);
    assert!(s.apply(&InterventionSet::obs(), &Tensor::zeros(&[3]).unwrap()).is_err());
}

#[test]
fn regularisers() {
    let a0 = Tensor::new(&[2, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap();
    let s = SemTensor::tied(1, 2, 2, a0).unwrap();
    assert_eq!(s.group_lasso(), 5.0);
    assert_eq!(s.l2(), 25.0);
}

proptest! {
    #[test]
    fn apply_is_linear(alpha in -3.0f64..3.0, seed in 0u64..1000, mask in 0usize..8) {
        let s = random_sem(3, 2, seed);
        let t = InterventionSet::new((0..3).filter(|j| mask >> j & 1 == 1), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let eps = Tensor::randn(&[6], 1.0, &mut rng).unwrap();
        let lhs = s.apply(&t, &eps.scale(alpha)).unwrap();
        let rhs = s.apply(&t, &eps).unwrap().scale(alpha);
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }
}
