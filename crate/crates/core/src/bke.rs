//! Phase II: fine-tuning with soft targets ensembled from batch peers.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{EpochMetrics, MetricsReport};
use crate::models::{ModelBundle, Parameters};
use crate::optim::Sgd;
use crate::tensor::{self, Tensor};

/// How soft targets are obtained from `Ŷ` and `P`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// Solve `(I - ωŶ) X = P` and scale by `1 - ω`.
    ClosedForm,
    /// `Q_t = ωŶQ_{t-1} + (1 - ω)P` from `Q_0 = P`.
    Iterative(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BkeConfig {
    pub omega: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub tau: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub propagation: Propagation,
    /// Number of final epochs averaged in the report.
    pub eval_window: usize,
    pub positive_class: usize,
}

impl Default for BkeConfig {
    fn default() -> Self {
        BkeConfig {
            omega: 0.5,
            batch_size: 128,
            lambda: 8.0,
            tau: 1.0,
            epochs: 30,
            learning_rate: 0.15,
            momentum: 0.9,
            seed: 0,
            propagation: Propagation::ClosedForm,
            eval_window: 10,
            positive_class: 0,
        }
    }
}

impl BkeConfig {
    pub fn validate(&self) -> Result<()> {
        check_omega(self.omega)?;
        check_tau(self.tau)?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_window == 0 {
            return Err(Error::Config(
                "epochs, batch_size and eval_window must be >= 1".into(),
            ));
        }
        if let Propagation::Iterative(0) = self.propagation {
            return Err(Error::Config("iterative propagation needs at least 1 step".into()));
        }
        Ok(())
    }
}

fn check_omega(omega: f64) -> Result<()> {
    if (0.0..1.0).contains(&omega) {
        Ok(())
    } else {
        Err(Error::Config(format!("omega must lie in [0, 1), got {omega}")))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("tau must be > 0, got {tau}")))
    }
}

/// Raw cosine similarities with a zero diagonal, and their row-normalized
/// form.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub raw: Tensor,
    pub normalized: Tensor,
}

impl SimilarityMatrix {
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let raw = similarity_matrix(features)?;
        let normalized = normalize_similarity(&raw)?;
        Ok(SimilarityMatrix { raw, normalized })
    }
}

/// `Y_ij = cos(y_i, y_j)` for `i != j`, `Y_ii = 0`.
pub fn similarity_matrix(features: &Tensor) -> Result<Tensor> {
    let (n, _) = features.dims2("similarity_matrix")?;
    if n < 2 {
        return Err(Error::InvalidShape {
            shape: features.shape().to_vec(),
            reason: "batch similarity needs at least 2 samples".into(),
        });
    }
    let unit = tensor::l2_normalize_rows(features)?;
    let mut y = tensor::matmul_raw(unit.data(), unit.data(), n, unit.cols(), n, false, true);
    for i in 0..n {
        for j in 0..n {
            y[i * n + j] = if i == j { 0.0 } else { y[i * n + j].clamp(-1.0, 1.0) };
        }
    }
    Tensor::new(vec![n, n], y)
}

/// Off-diagonal softmax per row; the diagonal stays exactly 0.
pub fn normalize_similarity(raw: &Tensor) -> Result<Tensor> {
    let (n, m) = raw.dims2("normalize_similarity")?;
    if n != m || n < 2 {
        return Err(Error::InvalidShape {
            shape: raw.shape().to_vec(),
            reason: "expected a square matrix with at least 2 rows".into(),
        });
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = raw.row(i);
        let total: f64 = (0..n).filter(|&j| j != i).map(|j| row[j].exp()).sum();
        for j in (0..n).filter(|&j| j != i) {
            out[i * n + j] = row[j].exp() / total;
        }
    }
    Tensor::new(vec![n, n], out)
}

/// Row-wise softmax of `logits / tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMatrix {
    pub values: Tensor,
    pub tau: f64,
}

pub fn probabilities(logits: &Tensor, tau: f64) -> Result<ProbMatrix> {
    check_tau(tau)?;
    logits.dims2("probabilities")?;
    Ok(ProbMatrix {
        values: tensor::softmax_rows(logits, tau),
        tau,
    })
}

/// Detached soft targets; plain values that never live on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargets {
    pub values: Tensor,
    pub method: Propagation,
}

fn check_pair(yhat: &Tensor, p: &Tensor) -> Result<(usize, usize)> {
    let (n, m) = yhat.dims2("propagate")?;
    let (pn, k) = p.dims2("propagate")?;
    if n != m || pn != n {
        return Err(Error::ShapeMismatch {
            op: "propagate",
            lhs: yhat.shape().to_vec(),
            rhs: p.shape().to_vec(),
        });
    }
    Ok((n, k))
}

pub fn propagate_iterative(yhat: &Tensor, p: &Tensor, omega: f64, steps: usize) -> Result<SoftTargets> {
    let (n, k) = check_pair(yhat, p)?;
    check_omega(omega)?;
    if steps == 0 {
        return Err(Error::Config("iterative propagation needs at least 1 step".into()));
    }
    let mut q = p.data().to_vec();
    for _ in 0..steps {
        let mixed = tensor::matmul_raw(yhat.data(), &q, n, n, k, false, false);
        for ((qv, m), pv) in q.iter_mut().zip(mixed).zip(p.data()) {
            *qv = omega * m + (1.0 - omega) * pv;
        }
    }
    Ok(SoftTargets {
        values: Tensor::new(vec![n, k], q)?,
        method: Propagation::Iterative(steps),
    })
}

pub fn soft_targets_closed_form(yhat: &Tensor, p: &Tensor, omega: f64) -> Result<SoftTargets> {
    let (n, k) = check_pair(yhat, p)?;
    check_omega(omega)?;
    let a = DMatrix::from_fn(n, n, |i, j| {
        let identity = if i == j { 1.0 } else { 0.0 };
        identity - omega * yhat.at(i, j)
    });
    let rhs = DMatrix::from_row_slice(n, k, p.data());
    let x = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Solver(format!("I - omega*Yhat is singular (n = {n}, omega = {omega})")))?;
    let mut q = Vec::with_capacity(n * k);
    for i in 0..n {
        for j in 0..k {
            q.push((1.0 - omega) * x[(i, j)]);
        }
    }
    let values = Tensor::new(vec![n, k], q)?;
    if !values.is_finite() {
        return Err(Error::Solver("closed-form soft targets are not finite".into()));
    }
    Ok(SoftTargets {
        values,
        method: Propagation::ClosedForm,
    })
}

pub fn soft_targets(yhat: &Tensor, p: &Tensor, omega: f64, method: Propagation) -> Result<SoftTargets> {
    match method {
        Propagation::ClosedForm => soft_targets_closed_form(yhat, p, omega),
        Propagation::Iterative(t) => propagate_iterative(yhat, p, omega, t),
    }
}

/// Soft targets for a batch from its features and logits.
pub fn batch_soft_targets(features: &Tensor, logits: &Tensor, omega: f64, tau: f64, method: Propagation) -> Result<SoftTargets> {
    let yhat = SimilarityMatrix::from_features(features)?.normalized;
    let p = probabilities(logits, tau)?;
    soft_targets(&yhat, &p.values, omega, method)
}

/// Mean over rows of `KL(q_i || p_i)` with `0 ln 0 = 0`.
pub fn kl_rows(q: &Tensor, p: &Tensor) -> Result<f64> {
    let (n, _) = check_same(q, p)?;
    let total: f64 = q
        .data()
        .iter()
        .zip(p.data())
        .map(|(&qv, &pv)| if qv == 0.0 { 0.0 } else { qv * (qv.ln() - pv.ln()) })
        .sum();
    Ok(total / n as f64)
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let dims = a.dims2("kl")?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(dims)
}

fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        t.data_mut()[i * k + y] = 1.0;
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug)]
pub struct BkeLoss {
    pub cross_entropy: Var,
    /// Absent when no soft targets were supplied.
    pub kl: Option<Var>,
    pub total: Var,
}

/// `CE(softmax(l), y) + λτ² mean_i KL(Q_i || softmax(l_i/τ))`. The KL term is
/// skipped when `q` is `None`; `q` itself is a constant.
pub fn bke_loss(tape: &Tape, logits: Var, labels: &[usize], q: Option<&SoftTargets>, tau: f64, lambda: f64) -> Result<BkeLoss> {
    check_tau(tau)?;
    let lv = tape.value(logits)?;
    let (n, k) = lv.dims2("bke_loss")?;
    if labels.len() != n {
        return Err(Error::Config(format!("{} labels for {n} logits rows", labels.len())));
    }
    let targets = tape.constant(one_hot(labels, k)?);
    let log_p = tape.log_softmax_rows(logits, 1.0)?;
    let picked = tape.sum_rows(tape.mul(targets, log_p)?)?;
    let cross_entropy = tape.scale(tape.mean_all(picked)?, -1.0)?;
    let Some(q) = q else {
        return Ok(BkeLoss {
            cross_entropy,
            kl: None,
            total: cross_entropy,
        });
    };
    if q.values.shape() != lv.shape() {
        return Err(Error::ShapeMismatch {
            op: "bke_loss",
            lhs: q.values.shape().to_vec(),
            rhs: lv.shape().to_vec(),
        });
    }
    let q_log_q: f64 = q
        .values
        .data()
        .iter()
        .map(|&v| if v == 0.0 { 0.0 } else { v * v.ln() })
        .sum::<f64>()
        / n as f64;
    let qv = tape.constant(q.values.clone());
    let log_p_tau = tape.log_softmax_rows(logits, tau)?;
    let cross = tape.mean_all(tape.sum_rows(tape.mul(qv, log_p_tau)?)?)?;
    let kl = tape.add(tape.scale(cross, -1.0)?, tape.constant(Tensor::scalar(q_log_q)))?;
    let total = tape.add(cross_entropy, tape.scale(kl, lambda * tau * tau)?)?;
    Ok(BkeLoss {
        cross_entropy,
        kl: Some(kl),
        total,
    })
}

/// Builds the full Phase II loss from encoder features and logits already on
/// `tape`. Soft targets are computed from their values, so `features` only
/// reaches the loss through whatever else consumes it.
pub fn bke_graph(tape: &Tape, features: Var, logits: Var, labels: &[usize], config: &BkeConfig) -> Result<BkeLoss> {
    let n = labels.len();
    let q = if config.lambda == 0.0 || n < 2 {
        None
    } else {
        let f = tape.value(features)?;
        let l = tape.value(logits)?;
        Some(batch_soft_targets(&f, &l, config.omega, config.tau, config.propagation)?)
    };
    bke_loss(tape, logits, labels, q.as_ref(), config.tau, config.lambda)
}

/// Mean training losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTraining {
    pub epoch: usize,
    pub loss: f64,
    pub cross_entropy: f64,
    /// Mean KL over the batches that had one.
    pub kl: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    pub bundle: ModelBundle,
    pub training: Vec<EpochTraining>,
    pub history: Vec<EpochMetrics>,
    pub report: MetricsReport,
}

fn encoder_and_head_step(bundle: &mut ModelBundle, opt: &mut Sgd, images: &Tensor, labels: &[usize], config: &BkeConfig) -> Result<(f64, f64, Option<f64>)> {
    let head = bundle.head()?;
    let tape = Tape::new();
    let enc_vars = bundle.online_encoder.bind(&tape, true);
    let head_vars = head.bind(&tape, true);
    let x = tape.constant(images.clone());
    let y = bundle
        .online_encoder
        .forward(&tape, &enc_vars, x, bundle.specs.encoder.input_side)?;
    let l = head.forward(&tape, &head_vars, y)?;
    let loss = bke_graph(&tape, y, l, labels, config)?;
    let total = tape.value(loss.total)?.item();
    let ce = tape.value(loss.cross_entropy)?.item();
    let kl = loss.kl.map(|k| tape.value(k).map(|v| v.item())).transpose()?;
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "bke loss" });
    }
    let mut vars = enc_vars;
    vars.extend(head_vars);
    let grads = tape.backward(loss.total)?.wrt_all(&vars)?;
    let ModelBundle {
        online_encoder,
        classifier_head,
        ..
    } = bundle;
    let mut params = online_encoder.params_mut();
    params.extend(
        classifier_head
            .as_mut()
            .expect("head attached above")
            .params_mut(),
    );
    opt.step(params, &grads)?;
    Ok((total, ce, kl))
}

/// Logits for `indices`, computed in parallel chunks.
pub fn predict_logits(bundle: &ModelBundle, ds: &Dataset, indices: &[usize]) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let parts: Vec<Tensor> = indices
        .par_chunks(CHUNK)
        .map(|chunk| bundle.logits(&ds.batch(chunk)?))
        .collect::<Result<_>>()?;
    let k = bundle.head()?.spec.out_dim;
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(vec![indices.len(), k], data)
}

/// Test-set metrics of the current bundle.
pub fn evaluate(bundle: &ModelBundle, ds: &Dataset, indices: &[usize], positive_class: usize, epoch: usize) -> Result<EpochMetrics> {
    let logits = predict_logits(bundle, ds, indices)?;
    let predicted = tensor::argmax_rows(&logits);
    let probs = tensor::softmax_rows(&logits, 1.0);
    let scores: Vec<f64> = (0..probs.rows()).map(|i| probs.at(i, positive_class)).collect();
    EpochMetrics::evaluate(
        epoch,
        &predicted,
        &ds.labels_of(indices),
        &scores,
        ds.num_classes(),
        positive_class,
    )
}

/// Fine-tunes the encoder and a freshly attached head on `train_idx`,
/// evaluating on `test_idx` after every epoch.
pub fn finetune(
    mut bundle: ModelBundle,
    train: &Dataset,
    train_idx: &[usize],
    test: &Dataset,
    test_idx: &[usize],
    config: &BkeConfig,
) -> Result<FinetuneOutput> {
    config.validate()?;
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Empty("fine-tuning needs training and test images".into()));
    }
    let side = bundle.specs.encoder.input_side;
    for ds in [train, test] {
        if ds.height() != side || ds.width() != side {
            return Err(Error::Spec(format!(
                "dataset images are {}x{} but the encoder expects {side}x{side}",
                ds.height(),
                ds.width()
            )));
        }
    }
    if train.num_classes() != test.num_classes() {
        return Err(Error::Spec("train and test class lists differ".into()));
    }
    bundle.attach_classifier(train.num_classes())?;
    let mut opt = Sgd::new(config.learning_rate, config.momentum);
    let mut training = Vec::with_capacity(config.epochs);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let (mut loss, mut ce, mut kl, mut seen, mut kl_seen) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for (b, batch) in data::batches(train_idx, config.batch_size, config.seed, epoch as u64)
            .iter()
            .enumerate()
        {
            let images = train.batch(batch)?;
            let labels = train.labels_of(batch);
            let (l, c, k) = encoder_and_head_step(&mut bundle, &mut opt, &images, &labels, config)
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::Diverged(format!(
                        "non-finite value in {op} at epoch {epoch}, batch {b}"
                    )),
                    Error::ZeroNormRow { row } => Error::Diverged(format!(
                        "all-zero representation for sample {row} at epoch {epoch}, batch {b}"
                    )),
                    other => other,
                })?;
            let w = batch.len() as f64;
            loss += w * l;
            ce += w * c;
            seen += batch.len();
            if let Some(k) = k {
                kl += w * k;
                kl_seen += batch.len();
            }
        }
        training.push(EpochTraining {
            epoch,
            loss: loss / seen as f64,
            cross_entropy: ce / seen as f64,
            kl: if kl_seen == 0 { 0.0 } else { kl / kl_seen as f64 },
        });
        history.push(evaluate(&bundle, test, test_idx, config.positive_class, epoch)?);
    }
    let report = MetricsReport::from_history(&history, config.eval_window, config.positive_class)?;
    Ok(FinetuneOutput {
        bundle,
        training,
        history,
        report,
    })
}
