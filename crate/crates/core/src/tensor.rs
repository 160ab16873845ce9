//! Dense row-major `f64` tensors and the forward kernels shared by the tape
//! and by the value-only code paths (soft targets, evaluation).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape {
                shape: vec![rows.len(), cols],
                reason: "ragged rows".into(),
            });
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Leading dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{op} expects a rank-2 tensor"),
            }),
        }
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{op} expects a rank-4 tensor"),
            }),
        }
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape == b.shape {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Tensor::new(vec![m, n], matmul_raw(&a.data, &b.data, m, k, n, false, false))
}

/// `op(A)[m,k] · op(B)[k,n]` where `op` optionally transposes the stored matrix.
pub(crate) fn matmul_raw(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    transpose_a: bool,
    transpose_b: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if transpose_a { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            if transpose_b {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// Euclidean norm of every row; fails on an exactly zero row.
pub(crate) fn row_norms(x: &Tensor) -> Result<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                Err(Error::ZeroNormRow { row: i })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Divides each row by its Euclidean norm.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norms = row_norms(x)?;
    Ok(normalize_with(x, &norms))
}

pub(crate) fn normalize_with(x: &Tensor, norms: &[f64]) -> Tensor {
    let c = x.cols();
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(idx, v)| v / norms[idx / c])
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Row-wise softmax of `x / tau`, with max subtraction.
pub fn softmax_rows(x: &Tensor, tau: f64) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        let row = x.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| ((v - max) / tau).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / sum));
    }
    debug_assert_eq!(data.len(), x.rows() * c);
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Output side length of a 3x3 convolution with the given stride and padding.
pub(crate) fn conv_out_side(side: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - kernel) / stride + 1
}

pub(crate) fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4("conv2d")?;
    let (o, c2, kh, kw) = w.dims4("conv2d")?;
    if c != c2 || b.shape != [o] || h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    let ho = conv_out_side(h, kh, stride, pad);
    let wo = conv_out_side(wd, kw, stride, pad);
    let mut out = vec![0.0; n * o * ho * wo];
    for s in 0..n {
        for oc in 0..o {
            let base = (s * o + oc) * ho * wo;
            out[base..base + ho * wo].fill(b.data[oc]);
            for ic in 0..c {
                let xin = &x.data[(s * c + ic) * h * wd..(s * c + ic + 1) * h * wd];
                let ker = &w.data[(oc * c + ic) * kh * kw..(oc * c + ic + 1) * kh * kw];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += ker[ky * kw + kx] * xin[iy as usize * wd + ix as usize];
                            }
                        }
                        out[base + oy * wo + ox] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], out)
}

/// Index of the largest entry in each row (first one on ties).
pub fn argmax_rows(x: &Tensor) -> Vec<usize> {
    (0..x.rows())
        .map(|i| {
            x.row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}
