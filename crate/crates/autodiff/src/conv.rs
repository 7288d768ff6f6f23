//! im2col-based 2-D convolution kernels (NCHW layout).

use crate::error::{Result, TensorError};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if self.stride == 0 || padded < k {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }

    fn transposed_len(&self, len: usize, k: usize) -> Option<usize> {
        ((len - 1) * self.stride + k).checked_sub(2 * self.padding).filter(|&v| v > 0)
    }
}

/// Patch layout shared by im2col and col2im.
struct Patches {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    geom: ConvGeometry,
}

impl Patches {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (s, p) = (self.geom.stride as isize, self.geom.padding as isize);
        let cols = self.cols();
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for oi in 0..self.out_h {
                        let y = oi as isize * s - p + ki as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        for oj in 0..self.out_w {
                            let x = oj as isize * s - p + kj as isize;
                            if x < 0 || x >= self.width as isize {
                                continue;
                            }
                            let img = (c * self.height + y as usize) * self.width + x as usize;
                            f(row * cols + oi * self.out_w + oj, img);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        cols.iter_mut().for_each(|v| *v = 0.0);
        self.for_each(|ci, ii| cols[ci] = image[ii]);
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        self.for_each(|ci, ii| image[ii] += cols[ci]);
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(TensorError::InvalidArgument {
            op,
            reason: format!("expected a rank-4 tensor, got shape {s:?}"),
        }),
    }
}

fn conv_patches(x: &Tensor, w: &Tensor, geom: ConvGeometry) -> Result<(Patches, usize, usize)> {
    let [n, c, h, wd] = dims4("conv2d", x)?;
    let [o, wc, kh, kw] = dims4("conv2d", w)?;
    let mismatch = || TensorError::ShapeMismatch {
        op: "conv2d",
        lhs: x.shape().to_vec(),
        rhs: w.shape().to_vec(),
    };
    if wc != c {
        return Err(mismatch());
    }
    let out_h = geom.out_len(h, kh).ok_or_else(mismatch)?;
    let out_w = geom.out_len(wd, kw).ok_or_else(mismatch)?;
    Ok((
        Patches {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            out_h,
            out_w,
            geom,
        },
        n,
        o,
    ))
}

pub(crate) fn conv2d(x: &Tensor, w: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let (pt, n, o) = conv_patches(x, w, geom)?;
    let img = pt.channels * pt.height * pt.width;
    let (rows, cols) = (pt.rows(), pt.cols());
    let mut buf = vec![0.0; rows * cols];
    let mut out = vec![0.0; n * o * cols];
    for b in 0..n {
        pt.im2col(&x.data()[b * img..(b + 1) * img], &mut buf);
        gemm(
            o,
            rows,
            cols,
            w.data(),
            (rows, 1),
            &buf,
            (cols, 1),
            &mut out[b * o * cols..(b + 1) * o * cols],
            false,
        );
    }
    Ok(Tensor::from_parts(vec![n, o, pt.out_h, pt.out_w], out))
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    geom: ConvGeometry,
) -> Result<(Tensor, Tensor)> {
    let (pt, n, o) = conv_patches(x, w, geom)?;
    let img = pt.channels * pt.height * pt.width;
    let (rows, cols) = (pt.rows(), pt.cols());
    let mut buf = vec![0.0; rows * cols];
    let mut dcols = vec![0.0; rows * cols];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for b in 0..n {
        let g = &grad.data()[b * o * cols..(b + 1) * o * cols];
        pt.im2col(&x.data()[b * img..(b + 1) * img], &mut buf);
        // dW += g * cols^T
        gemm(o, cols, rows, g, (cols, 1), &buf, (1, cols), &mut dw, true);
        // dcols = W^T * g
        gemm(rows, o, cols, w.data(), (1, rows), g, (cols, 1), &mut dcols, false);
        pt.col2im(&dcols, &mut dx[b * img..(b + 1) * img]);
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
    ))
}

/// Geometry of a transposed convolution: `x` is `[n, c_in, h, w]`, the
/// kernel is `[c_in, c_out, kh, kw]`, and the patches describe the
/// forward convolution that maps the output back onto `x`.
fn transposed_patches(
    x: &Tensor,
    w: &Tensor,
    geom: ConvGeometry,
) -> Result<(Patches, usize, usize)> {
    let [n, c_in, h, wd] = dims4("conv_transpose2d", x)?;
    let [wc, c_out, kh, kw] = dims4("conv_transpose2d", w)?;
    let mismatch = || TensorError::ShapeMismatch {
        op: "conv_transpose2d",
        lhs: x.shape().to_vec(),
        rhs: w.shape().to_vec(),
    };
    if wc != c_in {
        return Err(mismatch());
    }
    let out_h = geom.transposed_len(h, kh).ok_or_else(mismatch)?;
    let out_w = geom.transposed_len(wd, kw).ok_or_else(mismatch)?;
    if geom.out_len(out_h, kh) != Some(h) || geom.out_len(out_w, kw) != Some(wd) {
        return Err(mismatch());
    }
    Ok((
        Patches {
            channels: c_out,
            height: out_h,
            width: out_w,
            kh,
            kw,
            out_h: h,
            out_w: wd,
            geom,
        },
        n,
        c_in,
    ))
}

pub(crate) fn conv_transpose2d(x: &Tensor, w: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let (pt, n, c_in) = transposed_patches(x, w, geom)?;
    let (rows, cols) = (pt.rows(), pt.cols());
    let img = pt.channels * pt.height * pt.width;
    let mut buf = vec![0.0; rows * cols];
    let mut out = vec![0.0; n * img];
    for b in 0..n {
        let xb = &x.data()[b * c_in * cols..(b + 1) * c_in * cols];
        // cols = W^T * x_b, W viewed as [c_in, rows]
        gemm(rows, c_in, cols, w.data(), (1, rows), xb, (cols, 1), &mut buf, false);
        pt.col2im(&buf, &mut out[b * img..(b + 1) * img]);
    }
    Ok(Tensor::from_parts(
        vec![n, pt.channels, pt.height, pt.width],
        out,
    ))
}

pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    geom: ConvGeometry,
) -> Result<(Tensor, Tensor)> {
    let (pt, n, c_in) = transposed_patches(x, w, geom)?;
    let (rows, cols) = (pt.rows(), pt.cols());
    let img = pt.channels * pt.height * pt.width;
    let mut buf = vec![0.0; rows * cols];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for b in 0..n {
        pt.im2col(&grad.data()[b * img..(b + 1) * img], &mut buf);
        let xb = &x.data()[b * c_in * cols..(b + 1) * c_in * cols];
        gemm(
            c_in,
            rows,
            cols,
            w.data(),
            (rows, 1),
            &buf,
            (cols, 1),
            &mut dx[b * c_in * cols..(b + 1) * c_in * cols],
            false,
        );
        gemm(c_in, cols, rows, xb, (cols, 1), &buf, (1, cols), &mut dw, true);
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
    ))
}
