//! Every differentiable op paired with a generator of random smooth instances.
//!
//! Each case reduces the op output to a scalar through a fixed random
//! weighting, so a gradient check exercises the full vector-Jacobian product
//! rather than just the column sums.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvGeometry;
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub type ScalarFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

pub struct OpInstance {
    pub inputs: Vec<Tensor>,
    pub f: ScalarFn,
}

pub struct OpCase {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> OpInstance,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).expect("valid shape")
}

/// Entries bounded away from zero so kinks (relu) and poles (log) stay
/// further than any finite-difference step.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..2.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
    .expect("valid shape")
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..5)
}

/// Weighted sum `sum(out * w)` with `w` fixed when the instance is built.
fn weighted<F>(weights: Tensor, op: F) -> ScalarFn
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'static,
{
    Box::new(move |tape, v| {
        let out = op(tape, v)?;
        let w = tape.constant(weights.clone());
        out.mul(w)?.sum()
    })
}

fn unary_case(
    rng: &mut ChaCha8Rng,
    input: fn(&[usize], &mut ChaCha8Rng) -> Tensor,
    op: for<'t> fn(Var<'t>) -> Result<Var<'t>>,
) -> OpInstance {
    let shape = [dim(rng), dim(rng)];
    let x = input(&shape, rng);
    let out_shape = {
        let tape = Tape::new();
        op(tape.constant(x.clone())).expect("valid instance").shape()
    };
    OpInstance {
        inputs: vec![x],
        f: weighted(randn(&out_shape, rng), move |_, v| op(v[0])),
    }
}

pub fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                OpInstance {
                    inputs: vec![randn(&[r, c], rng), randn(&[c], rng)],
                    f: weighted(randn(&[r, c], rng), |_, v| v[0].add(v[1])),
                }
            },
        },
        OpCase {
            name: "sub",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                OpInstance {
                    inputs: vec![randn(&[r, 1], rng), randn(&[r, c], rng)],
                    f: weighted(randn(&[r, c], rng), |_, v| v[0].sub(v[1])),
                }
            },
        },
        OpCase {
            name: "mul",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                OpInstance {
                    inputs: vec![randn(&[r, c], rng), randn(&[r, c], rng)],
                    f: weighted(randn(&[r, c], rng), |_, v| v[0].mul(v[1])),
                }
            },
        },
        OpCase {
            name: "scale",
            build: |rng| {
                let s: f64 = rng.random_range(-3.0..3.0);
                let shape = [dim(rng), dim(rng)];
                OpInstance {
                    inputs: vec![randn(&shape, rng)],
                    f: weighted(randn(&shape, rng), move |_, v| v[0].scale(s)?.add_scalar(s)),
                }
            },
        },
        OpCase {
            name: "matmul",
            build: |rng| {
                let (m, k, n) = (dim(rng), dim(rng), dim(rng));
                let (ta, tb) = (rng.random::<bool>(), rng.random::<bool>());
                let a = randn(&if ta { [k, m] } else { [m, k] }, rng);
                let b = randn(&if tb { [n, k] } else { [k, n] }, rng);
                OpInstance {
                    inputs: vec![a, b],
                    f: weighted(randn(&[m, n], rng), move |_, v| v[0].matmul_ex(ta, v[1], tb)),
                }
            },
        },
        OpCase {
            name: "transpose",
            build: |rng| unary_case(rng, randn, |x| x.transpose()),
        },
        OpCase {
            name: "reshape",
            build: |rng| {
                let (a, b, c) = (dim(rng), dim(rng), dim(rng));
                OpInstance {
                    inputs: vec![randn(&[a, b * c], rng)],
                    f: weighted(randn(&[a * b, c], rng), move |_, v| v[0].reshape(&[a * b, c])),
                }
            },
        },
        OpCase {
            name: "slice",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng) + 2);
                let start = rng.random_range(0..c - 1);
                let len = rng.random_range(1..=c - start);
                OpInstance {
                    inputs: vec![randn(&[r, c], rng)],
                    f: weighted(randn(&[r, len], rng), move |_, v| v[0].slice(1, start, len)),
                }
            },
        },
        OpCase {
            name: "concat",
            build: |rng| {
                let (r, c1, c2) = (dim(rng), dim(rng), dim(rng));
                OpInstance {
                    inputs: vec![randn(&[r, c1], rng), randn(&[r, c2], rng)],
                    f: weighted(randn(&[r, c1 + c2], rng), |_, v| Var::concat(&[v[0], v[1]], 1)),
                }
            },
        },
        OpCase {
            name: "relu",
            build: |rng| unary_case(rng, away_from_zero, |x| x.relu()),
        },
        OpCase {
            name: "sigmoid",
            build: |rng| unary_case(rng, randn, |x| x.sigmoid()),
        },
        OpCase {
            name: "exp",
            build: |rng| unary_case(rng, randn, |x| x.exp()),
        },
        OpCase {
            name: "log",
            build: |rng| {
                unary_case(
                    rng,
                    |s, rng| Tensor::uniform(s, 0.2, 3.0, rng).expect("valid shape"),
                    |x| x.log(),
                )
            },
        },
        OpCase {
            name: "square",
            build: |rng| unary_case(rng, randn, |x| x.square()),
        },
        OpCase {
            name: "sqrt",
            build: |rng| {
                unary_case(
                    rng,
                    |s, rng| Tensor::uniform(s, 0.2, 3.0, rng).expect("valid shape"),
                    |x| x.sqrt(),
                )
            },
        },
        OpCase {
            name: "sum",
            build: |rng| {
                let shape = [dim(rng), dim(rng)];
                OpInstance {
                    inputs: vec![randn(&shape, rng)],
                    f: Box::new(|_, v| v[0].sum()?.square()),
                }
            },
        },
        OpCase {
            name: "mean",
            build: |rng| {
                let shape = [dim(rng), dim(rng)];
                OpInstance {
                    inputs: vec![randn(&shape, rng)],
                    f: Box::new(|_, v| v[0].mean()?.exp()),
                }
            },
        },
        OpCase {
            name: "broadcast",
            build: |rng| {
                let (a, b, c) = (dim(rng), dim(rng), dim(rng));
                OpInstance {
                    inputs: vec![randn(&[a, 1, c], rng)],
                    f: weighted(randn(&[a, b, c], rng), move |_, v| v[0].broadcast_to(&[a, b, c])),
                }
            },
        },
        OpCase {
            name: "conv2d",
            build: |rng| {
                let (c, o) = (dim(rng), dim(rng));
                let stride = rng.random_range(1..3);
                let padding = rng.random_range(0..2);
                let x = randn(&[2, c, 5, 6], rng);
                let w = randn(&[o, c, 3, 3], rng);
                let geom = ConvGeometry::new(stride, padding);
                let out_shape = {
                    let t = Tape::new();
                    let y = t.constant(x.clone()).conv2d(t.constant(w.clone()), geom);
                    y.expect("valid conv").shape()
                };
                OpInstance {
                    inputs: vec![x, w],
                    f: weighted(randn(&out_shape, rng), move |_, v| v[0].conv2d(v[1], geom)),
                }
            },
        },
        OpCase {
            name: "conv_transpose2d",
            build: |rng| {
                let (ci, co) = (dim(rng), dim(rng));
                let geom = ConvGeometry::new(2, 1);
                let x = randn(&[2, ci, 3, 4], rng);
                let w = randn(&[ci, co, 4, 4], rng);
                OpInstance {
                    inputs: vec![x, w],
                    f: weighted(randn(&[2, co, 6, 8], rng), move |_, v| {
                        v[0].conv_transpose2d(v[1], geom)
                    }),
                }
            },
        },
        OpCase {
            name: "reparameterize",
            build: |rng| {
                let shape = [dim(rng), dim(rng)];
                let noise = randn(&shape, rng);
                OpInstance {
                    inputs: vec![randn(&shape, rng), randn(&shape, rng)],
                    f: weighted(randn(&shape, rng), move |_, v| {
                        v[0].reparameterize(v[1], noise.clone())
                    }),
                }
            },
        },
        OpCase {
            name: "bce_with_logits",
            build: |rng| {
                let shape = [dim(rng), dim(rng)];
                let targets = Tensor::uniform(&shape, 0.0, 1.0, rng).expect("valid shape");
                OpInstance {
                    inputs: vec![randn(&shape, rng)],
                    f: weighted(randn(&shape, rng), move |_, v| {
                        v[0].scale(3.0)?.bce_with_logits(targets.clone())
                    }),
                }
            },
        },
    ]
}
