#![allow(dead_code)]

use bke_core::Tensor;
use proptest::prelude::*;

/// Row-stochastic matrix with zero diagonal built from arbitrary positive weights.
pub fn stochastic_zero_diag(n: usize, weights: &[f64]) -> Tensor {
    let mut y = vec![0.0; n * n];
    for i in 0..n {
        let total: f64 = (0..n).filter(|&j| j != i).map(|j| weights[i * n + j]).sum();
        for j in (0..n).filter(|&j| j != i) {
            y[i * n + j] = weights[i * n + j] / total;
        }
    }
    Tensor::new(vec![n, n], y).unwrap()
}

/// Rows on the probability simplex.
pub fn simplex_rows(n: usize, k: usize, weights: &[f64]) -> Tensor {
    let mut p = weights[..n * k].to_vec();
    for row in p.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(vec![n, k], p).unwrap()
}

/// Solves `a x = b` by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan(a: &[f64], b: &[f64], n: usize, k: usize) -> Vec<f64> {
    let w = n + k;
    let mut m = vec![0.0; n * w];
    for i in 0..n {
        m[i * w..i * w + n].copy_from_slice(&a[i * n..(i + 1) * n]);
        m[i * w + n..(i + 1) * w].copy_from_slice(&b[i * k..(i + 1) * k]);
    }
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&x, &y| m[x * w + c].abs().total_cmp(&m[y * w + c].abs()))
            .unwrap();
        for j in 0..w {
            m.swap(c * w + j, piv * w + j);
        }
        let d = m[c * w + c];
        for j in 0..w {
            m[c * w + j] /= d;
        }
        for r in (0..n).filter(|&r| r != c) {
            let f = m[r * w + c];
            if f != 0.0 {
                for j in 0..w {
                    m[r * w + j] -= f * m[c * w + j];
                }
            }
        }
    }
    let mut x = vec![0.0; n * k];
    for i in 0..n {
        x[i * k..(i + 1) * k].copy_from_slice(&m[i * w + n..(i + 1) * w]);
    }
    x
}

/// Dense `(1 - omega) (I - omega Y)^-1 P` without any library solver.
pub fn soft_targets_oracle(y: &Tensor, p: &Tensor, omega: f64) -> Tensor {
    let (n, k) = (p.rows(), p.cols());
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = f64::from(u8::from(i == j)) - omega * y.at(i, j);
        }
    }
    let x = gauss_jordan(&a, p.data(), n, k);
    Tensor::new(vec![n, k], x.into_iter().map(|v| (1.0 - omega) * v).collect()).unwrap()
}

pub fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-scale..scale, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

/// Matrix whose rows all have norm at least ~0.1.
pub fn nonzero_rows(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    matrix(rows, cols, 3.0).prop_map(|mut t| {
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 0.1 {
                row[0] += 1.0;
            }
        }
        t
    })
}
