//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in creation order. [`Tape::backward`]
//! walks the records once in reverse, so the recorded graph is a DAG by
//! construction. Values that enter through [`Tape::constant`] or
//! [`Tape::detach`] are untracked: nothing downstream of them sends gradient
//! back to their origin.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Add(usize, usize),
    /// `[N, C] + [C]`, the bias row repeated over every sample.
    AddRow(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    MeanAll(usize),
    SumRows(usize),
    L2NormalizeRows(usize, Vec<f64>),
    SoftmaxRows(usize, f64),
    LogSoftmaxRows(usize, f64),
    Log(usize),
    Mul(usize, usize),
    GlobalAvgPool(usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// A single-threaded recording context.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (a parameter or anything we want gradients for).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Rc::new(value), Op::Leaf, true)
    }

    /// An input that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Rc::new(value), Op::Constant, false)
    }

    /// Same value as `v`, cut off from the graph behind it.
    pub fn detach(&self, v: Var) -> Result<Var> {
        let value = self.value(v)?;
        Ok(self.push(value, Op::Constant, false))
    }

    pub fn value(&self, v: Var) -> Result<Rc<Tensor>> {
        self.check(v)?;
        Ok(Rc::clone(&self.nodes.borrow()[v.index].value))
    }

    /// Whether gradient can flow from `v` back to some leaf.
    pub fn is_tracked(&self, v: Var) -> Result<bool> {
        self.check(v)?;
        Ok(self.nodes.borrow()[v.index].tracked)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.borrow().len() {
            Err(Error::ForeignVar)
        } else {
            Ok(())
        }
    }

    fn push(&self, value: Rc<Tensor>, op: Op, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn record(&self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let tracked = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.index].tracked)
        };
        Ok(self.push(Rc::new(value), op, tracked))
    }

    fn values<const K: usize>(&self, vars: [Var; K]) -> Result<[Rc<Tensor>; K]> {
        for v in vars {
            self.check(v)?;
        }
        let nodes = self.nodes.borrow();
        Ok(vars.map(|v| Rc::clone(&nodes[v.index].value)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let [av, bv] = self.values([a, b])?;
        let out = tensor::matmul(&av, &bv)?;
        self.record("matmul", out, Op::MatMul(a.index, b.index), &[a, b])
    }

    /// 2-D convolution of `x[N,C,H,W]` with `w[O,C,kh,kw]` plus per-channel bias `b[O]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [xv, wv, bv] = self.values([x, w, b])?;
        let out = tensor::conv2d(&xv, &wv, &bv, stride, pad)?;
        let op = Op::Conv2d {
            x: x.index,
            w: w.index,
            b: b.index,
            stride,
            pad,
        };
        self.record("conv2d", out, op, &[x, w, b])
    }

    /// Elementwise sum of equal shapes, or a rank-2 `[N, C]` plus a bias row `[C]`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let [av, bv] = self.values([a, b])?;
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
            let out = Tensor::new(av.shape().to_vec(), data)?;
            return self.record("add", out, Op::Add(a.index, b.index), &[a, b]);
        }
        if av.rank() == 2 && bv.rank() == 1 && av.cols() == bv.len() {
            let c = bv.len();
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + bv.data()[i % c])
                .collect();
            let out = Tensor::new(av.shape().to_vec(), data)?;
            return self.record("add", out, Op::AddRow(a.index, b.index), &[a, b]);
        }
        Err(Error::ShapeMismatch {
            op: "add",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let [av, bv] = self.values([a, b])?;
        tensor::same_shape("sub", &av, &bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.record("sub", out, Op::Sub(a.index, b.index), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let [av, bv] = self.values([a, b])?;
        tensor::same_shape("elementwise_mul", &av, &bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.record("elementwise_mul", out, Op::Mul(a.index, b.index), &[a, b])
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let [av] = self.values([a])?;
        let data = av.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.record("scale", out, Op::Scale(a.index, factor), &[a])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let [av] = self.values([a])?;
        let data = av.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.record("relu", out, Op::Relu(a.index), &[a])
    }

    /// Mean of every element, as a `[1]` tensor.
    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let [av] = self.values([a])?;
        let out = Tensor::scalar(av.data().iter().sum::<f64>() / av.len() as f64);
        self.record("mean_all", out, Op::MeanAll(a.index), &[a])
    }

    /// Sum across each row: `[N, ...] -> [N]`.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let [av] = self.values([a])?;
        let data = (0..av.rows()).map(|i| av.row(i).iter().sum()).collect();
        let out = Tensor::new(vec![av.rows()], data)?;
        self.record("sum_rows", out, Op::SumRows(a.index), &[a])
    }

    pub fn l2_normalize_rows(&self, a: Var) -> Result<Var> {
        let [av] = self.values([a])?;
        let norms = tensor::row_norms(&av)?;
        let out = tensor::normalize_with(&av, &norms);
        self.record("l2_normalize_rows", out, Op::L2NormalizeRows(a.index, norms), &[a])
    }

    /// Row-wise softmax of `a / tau`.
    pub fn softmax_rows(&self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("softmax temperature must be > 0, got {tau}")));
        }
        let [av] = self.values([a])?;
        let out = tensor::softmax_rows(&av, tau);
        self.record("softmax_rows", out, Op::SoftmaxRows(a.index, tau), &[a])
    }

    /// Row-wise log-softmax of `a / tau`, finite even where the softmax
    /// itself underflows.
    pub fn log_softmax_rows(&self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("softmax temperature must be > 0, got {tau}")));
        }
        let [av] = self.values([a])?;
        let (_, c) = av.dims2("log_softmax_rows")?;
        let mut data = Vec::with_capacity(av.len());
        for row in av.data().chunks(c) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / tau));
            let lse = m + row.iter().map(|&x| (x / tau - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&x| x / tau - lse));
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.record("log_softmax_rows", out, Op::LogSoftmaxRows(a.index, tau), &[a])
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let [av] = self.values([a])?;
        let data = av.data().iter().map(|x| x.ln()).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.record("log", out, Op::Log(a.index), &[a])
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&self, a: Var) -> Result<Var> {
        let [av] = self.values([a])?;
        let (n, c, h, w) = av.dims4("global_avg_pool")?;
        let hw = h * w;
        let data = av
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        self.record("global_avg_pool", out, Op::GlobalAvgPool(a.index), &[a])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let [av] = self.values([a])?;
        let out = av.reshaped(shape)?;
        self.record("reshape", out, Op::Reshape(a.index), &[a])
    }

    /// Gradients of `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.index].value.shape().to_vec();
        if shape != [1] {
            return Err(Error::NotScalar { shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf | Op::Constant) {
                grads[i] = Some(g);
                continue;
            }
            let out = &node.value;
            let val = |j: usize| -> &Tensor { &nodes[j].value };
            let mut send = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[j].tracked {
                    return;
                }
                let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                &Op::MatMul(a, b) => {
                    let (m, k) = (val(a).rows(), val(a).cols());
                    let n = val(b).cols();
                    send(a, &mut |s| {
                        let d = tensor::matmul_raw(&g, val(b).data(), m, n, k, false, true);
                        add_into(s, &d);
                    });
                    send(b, &mut |s| {
                        let d = tensor::matmul_raw(val(a).data(), &g, k, m, n, true, false);
                        add_into(s, &d);
                    });
                }
                &Op::Conv2d { x, w, b, stride, pad } => {
                    conv2d_backward(&g, val(x), val(w), stride, pad, &mut send, x, w, b);
                }
                &Op::Add(a, b) => {
                    send(a, &mut |s| add_into(s, &g));
                    send(b, &mut |s| add_into(s, &g));
                }
                &Op::AddRow(a, b) => {
                    send(a, &mut |s| add_into(s, &g));
                    send(b, &mut |s| {
                        let c = s.len();
                        for (idx, gv) in g.iter().enumerate() {
                            s[idx % c] += gv;
                        }
                    });
                }
                &Op::Sub(a, b) => {
                    send(a, &mut |s| add_into(s, &g));
                    send(b, &mut |s| s.iter_mut().zip(&g).for_each(|(d, gv)| *d -= gv));
                }
                &Op::Scale(a, factor) => {
                    send(a, &mut |s| s.iter_mut().zip(&g).for_each(|(d, gv)| *d += factor * gv));
                }
                &Op::Relu(a) => {
                    let x = val(a).data();
                    send(a, &mut |s| {
                        for ((d, gv), xv) in s.iter_mut().zip(&g).zip(x) {
                            if *xv > 0.0 {
                                *d += gv;
                            }
                        }
                    });
                }
                &Op::MeanAll(a) => {
                    let share = g[0] / val(a).len() as f64;
                    send(a, &mut |s| s.iter_mut().for_each(|d| *d += share));
                }
                &Op::SumRows(a) => {
                    let c = val(a).cols();
                    send(a, &mut |s| {
                        for (idx, d) in s.iter_mut().enumerate() {
                            *d += g[idx / c];
                        }
                    });
                }
                Op::L2NormalizeRows(a, norms) => {
                    let c = out.cols();
                    let y = out.data();
                    send(*a, &mut |s| {
                        for (r, norm) in norms.iter().enumerate() {
                            let ys = &y[r * c..(r + 1) * c];
                            let gs = &g[r * c..(r + 1) * c];
                            let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                            for j in 0..c {
                                s[r * c + j] += (gs[j] - ys[j] * dot) / norm;
                            }
                        }
                    });
                }
                &Op::SoftmaxRows(a, tau) => {
                    let c = out.cols();
                    let y = out.data();
                    send(a, &mut |s| {
                        for r in 0..out.rows() {
                            let ys = &y[r * c..(r + 1) * c];
                            let gs = &g[r * c..(r + 1) * c];
                            let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                            for j in 0..c {
                                s[r * c + j] += ys[j] * (gs[j] - dot) / tau;
                            }
                        }
                    });
                }
                &Op::LogSoftmaxRows(a, tau) => {
                    let c = out.cols();
                    let y = out.data();
                    send(a, &mut |s| {
                        for r in 0..out.rows() {
                            let gs = &g[r * c..(r + 1) * c];
                            let total: f64 = gs.iter().sum();
                            for j in 0..c {
                                s[r * c + j] += (gs[j] - y[r * c + j].exp() * total) / tau;
                            }
                        }
                    });
                }
                &Op::Log(a) => {
                    let x = val(a).data();
                    send(a, &mut |s| {
                        for ((d, gv), xv) in s.iter_mut().zip(&g).zip(x) {
                            *d += gv / xv;
                        }
                    });
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (val(a).data(), val(b).data());
                    send(a, &mut |s| {
                        for ((d, gv), o) in s.iter_mut().zip(&g).zip(bv) {
                            *d += gv * o;
                        }
                    });
                    send(b, &mut |s| {
                        for ((d, gv), o) in s.iter_mut().zip(&g).zip(av) {
                            *d += gv * o;
                        }
                    });
                }
                &Op::GlobalAvgPool(a) => {
                    let shape = val(a).shape();
                    let hw = shape[2] * shape[3];
                    send(a, &mut |s| {
                        for (idx, d) in s.iter_mut().enumerate() {
                            *d += g[idx / hw] / hw as f64;
                        }
                    });
                }
                &Op::Reshape(a) => {
                    send(a, &mut |s| add_into(s, &g));
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    g: &[f64],
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    send: &mut dyn FnMut(usize, &mut dyn FnMut(&mut [f64])),
    xi: usize,
    wi: usize,
    bi: usize,
) {
    let s = x.shape();
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let ks = w.shape();
    let (o, kh, kw) = (ks[0], ks[2], ks[3]);
    let ho = tensor::conv_out_side(h, kh, stride, pad);
    let wo = tensor::conv_out_side(wd, kw, stride, pad);
    let (xd, wdat) = (x.data(), w.data());

    // Visits every (input pixel, kernel tap, output pixel) triple once.
    let for_each_tap = |f: &mut dyn FnMut(usize, usize, usize)| {
        for smp in 0..n {
            for oc in 0..o {
                for ic in 0..c {
                    let kbase = (oc * c + ic) * kh * kw;
                    let xbase = (smp * c + ic) * h * wd;
                    let gbase = (smp * o + oc) * ho * wo;
                    for oy in 0..ho {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wo {
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    f(
                                        xbase + iy as usize * wd + ix as usize,
                                        kbase + ky * kw + kx,
                                        gbase + oy * wo + ox,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    send(xi, &mut |dx| for_each_tap(&mut |xp, kp, gp| dx[xp] += wdat[kp] * g[gp]));
    send(wi, &mut |dw| for_each_tap(&mut |xp, kp, gp| dw[kp] += xd[xp] * g[gp]));
    send(bi, &mut |db| {
        for smp in 0..n {
            for (oc, d) in db.iter_mut().enumerate() {
                let gbase = (smp * o + oc) * ho * wo;
                *d += g[gbase..gbase + ho * wo].iter().sum::<f64>();
            }
        }
    });
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Result<Tensor> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(Error::ForeignVar);
        }
        let shape = self.shapes[v.index].clone();
        match &self.grads[v.index] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Ok(Tensor::zeros(&shape)),
        }
    }

    pub fn wrt_all(&self, vars: &[Var]) -> Result<Vec<Tensor>> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }
}
