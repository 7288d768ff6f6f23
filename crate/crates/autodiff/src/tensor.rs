use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TensorError};

/// Dense row-major array of `f64`.
///
/// The shape may be empty, in which case the tensor is a scalar holding one
/// element. Every dimension is at least one.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} elements]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroDim(shape.to_vec()));
        }
        let expected = numel(shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernels whose output length is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Builds a tensor from a closure over flat indices.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Result<Self> {
        Self::new(shape, (0..numel(shape)).map(f).collect())
    }

    /// Independent `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        Self::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
    }

    /// Independent `U[lo, hi)` entries.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::InvalidArgument {
                    op: "from_rows",
                    reason: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the elements. Do not use on values owned by a live tape.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> Option<f64> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            off = off * d + i;
        }
        Some(self.data[off])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    pub(crate) fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::InvalidArgument {
                op,
                reason: format!("expected a matrix, got shape {:?}", self.shape),
            }),
        }
    }

    /// `op(self) * op(rhs)` where `op` optionally transposes.
    pub fn matmul_ex(&self, trans_a: bool, rhs: &Tensor, trans_b: bool) -> Result<Self> {
        let (ar, ac) = self.matrix_dims("matmul")?;
        let (br, bc) = rhs.matrix_dims("matmul")?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            if trans_a { (1, ac) } else { (ac, 1) },
            &rhs.data,
            if trans_b { (1, bc) } else { (bc, 1) },
            &mut out,
            false,
        );
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Self> {
        self.matmul_ex(false, rhs, false)
    }

    /// Copies `len` entries starting at `start` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::BadAxis {
                op: "slice",
                axis,
                rank,
            });
        }
        let end = start + len;
        if len == 0 || end > self.shape[axis] {
            return Err(TensorError::SliceOutOfBounds {
                shape: self.shape.clone(),
                axis,
                start,
                end,
            });
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let dim = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self::from_parts(shape, out))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::BadAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut total = 0;
        for p in parts {
            let compatible = p.rank() == rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += p.shape[axis];
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self::from_parts(shape, out))
    }

    /// Scatter-adds `src` into the `[start, start+len)` window of `axis`.
    pub(crate) fn add_into_slice(&mut self, src: &Tensor, axis: usize, start: usize) {
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let dim = self.shape[axis];
        let len = src.shape[axis];
        for o in 0..outer {
            let dst = (o * dim + start) * inner;
            let s = o * len * inner;
            for (d, v) in self.data[dst..dst + len * inner]
                .iter_mut()
                .zip(&src.data[s..s + len * inner])
            {
                *d += v;
            }
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Broadcasts to `shape` following the usual trailing-axis alignment rules.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let out_shape = broadcast_shape("broadcast", &self.shape, shape)?;
        if out_shape != shape {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        if self.shape == shape {
            return Ok(self.clone());
        }
        let idx = BroadcastIndex::new(&self.shape, shape);
        let data = (0..numel(shape)).map(|i| self.data[idx.map(i)]).collect();
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    /// Sums a broadcast gradient back down to `shape`.
    pub(crate) fn reduce_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let idx = BroadcastIndex::new(shape, &self.shape);
        let mut out = vec![0.0; numel(shape)];
        for (i, v) in self.data.iter().enumerate() {
            out[idx.map(i)] += v;
        }
        Tensor::from_parts(shape.to_vec(), out)
    }

    /// Elementwise binary op with broadcasting.
    pub fn zip_broadcast(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if self.shape == rhs.shape {
            let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self::from_parts(self.shape.clone(), data));
        }
        let shape = broadcast_shape(op, &self.shape, &rhs.shape)?;
        let n = numel(&shape);
        let data = if rhs.shape.len() <= shape.len() && is_suffix_broadcast(&rhs.shape, &shape) {
            let period = rhs.data.len();
            let ia = BroadcastIndex::new(&self.shape, &shape);
            (0..n).map(|i| f(self.data[ia.map(i)], rhs.data[i % period])).collect()
        } else {
            let ia = BroadcastIndex::new(&self.shape, &shape);
            let ib = BroadcastIndex::new(&rhs.shape, &shape);
            (0..n).map(|i| f(self.data[ia.map(i)], rhs.data[ib.map(i)])).collect()
        };
        Ok(Self::from_parts(shape, data))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Self> {
        self.zip_broadcast(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Self> {
        self.zip_broadcast(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Self> {
        self.zip_broadcast(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }
}

/// True when `small` equals the trailing dims of `big` after dropping leading ones.
fn is_suffix_broadcast(small: &[usize], big: &[usize]) -> bool {
    let lead = small.iter().take_while(|&&d| d == 1).count();
    let core = &small[lead..];
    big.ends_with(core)
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Maps flat indices of a broadcast output back to flat indices of an input.
struct BroadcastIndex {
    out_strides: Vec<usize>,
    in_strides: Vec<usize>,
}

impl BroadcastIndex {
    fn new(input: &[usize], output: &[usize]) -> Self {
        let rank = output.len();
        let pad = rank - input.len();
        let mut out_strides = vec![1; rank];
        let mut in_strides = vec![0; rank];
        let mut acc_out = 1;
        let mut acc_in = 1;
        for d in (0..rank).rev() {
            out_strides[d] = acc_out;
            acc_out *= output[d];
            if d >= pad {
                let dim = input[d - pad];
                in_strides[d] = if dim == 1 { 0 } else { acc_in };
                acc_in *= dim;
            }
        }
        Self {
            out_strides,
            in_strides,
        }
    }

    fn map(&self, mut flat: usize) -> usize {
        let mut off = 0;
        for (os, is) in self.out_strides.iter().zip(&self.in_strides) {
            let i = flat / os;
            flat %= os;
            off += i * is;
        }
        off
    }
}

/// `c (+)= a * b` for row/column-strided operands; wraps `matrixmultiply::dgemm`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let out = a.matmul(&Tensor::eye(2).unwrap()).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_transposes_agree_with_explicit_transpose() {
        let a = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0).unwrap();
        let b = Tensor::from_fn(&[3, 2], |i| (i as f64).sin()).unwrap();
        let lhs = a.matmul_ex(true, &b, false).unwrap();
        let rhs = a.transpose().unwrap().matmul(&b).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-14);
        let c = Tensor::from_fn(&[2, 4], |i| i as f64).unwrap();
        let lhs = a.matmul_ex(false, &c, true).unwrap();
        let rhs = a.matmul(&c.transpose().unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-14);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let err = a.matmul(&a).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn broadcasting_rules() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64).unwrap();
        let row = Tensor::new(&[3], vec![10.0, 20.0, 30.0]).unwrap();
        let col = Tensor::new(&[2, 1], vec![100.0, 200.0]).unwrap();
        assert_eq!(a.add(&row).unwrap().data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        assert_eq!(
            a.add(&col).unwrap().data(),
            &[100.0, 101.0, 102.0, 203.0, 204.0, 205.0]
        );
        assert!(a.add(&Tensor::zeros(&[2]).unwrap()).is_err());
        let g = Tensor::ones(&[2, 3]).unwrap();
        assert_eq!(g.reduce_to(&[3]).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.reduce_to(&[2, 1]).data(), &[3.0, 3.0]);
    }

    #[test]
    fn slice_and_concat_invert() {
        let a = Tensor::from_fn(&[2, 5, 3], |i| i as f64).unwrap();
        let l = a.slice_axis(1, 0, 2).unwrap();
        let r = a.slice_axis(1, 2, 3).unwrap();
        assert_eq!(Tensor::concat(&[&l, &r], 1).unwrap(), a);
        assert!(matches!(
            a.slice_axis(1, 4, 2),
            Err(TensorError::SliceOutOfBounds { .. })
        ));
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(Tensor::zeros(&[3, 0]), Err(TensorError::ZeroDim(_))));
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
