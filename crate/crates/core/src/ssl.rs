//! Phase I: self-supervised pretraining of the online network against an
//! EMA target network.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, ViewPair};
use crate::autodiff::{Tape, Var};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::models::{ModelBundle, ModelSpecs, Parameters};
use crate::optim::{self, Sgd};
use crate::rng;
use crate::tensor::Tensor;

/// Mean feature standard deviation below which an epoch counts as collapsed.
pub const COLLAPSE_STD: f64 = 1e-6;
/// Consecutive collapsed epochs that abort training.
pub const COLLAPSE_EPOCHS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub zeta: f64,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            epochs: 40,
            batch_size: 256,
            learning_rate: 0.05,
            momentum: 0.9,
            zeta: 0.996,
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::Config(format!("zeta must lie in [0, 1], got {}", self.zeta)));
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
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean over rows of `||a_i/|a_i| - b_i/|b_i|||^2`.
fn normalized_sq_distance(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let a_hat = tape.l2_normalize_rows(a)?;
    let b_hat = tape.l2_normalize_rows(b)?;
    let d = tape.sub(a_hat, b_hat)?;
    let sq = tape.mul(d, d)?;
    let per_row = tape.sum_rows(sq)?;
    tape.mean_all(per_row)
}

/// Cross-view loss between the online predictions of the two views.
/// Gradients reach both arguments.
pub fn cross_view_loss(tape: &Tape, q1: Var, q1_prime: Var) -> Result<Var> {
    normalized_sq_distance(tape, q1, q1_prime)
}

/// Cross-model loss between the online prediction and the target projection
/// of the same view. `z2` is detached here, so nothing upstream of it ever
/// receives a gradient.
pub fn cross_model_loss(tape: &Tape, q1_prime: Var, z2: Var) -> Result<Var> {
    let z2 = tape.detach(z2)?;
    normalized_sq_distance(tape, q1_prime, z2)
}

/// Mean over rows of `2 - 2 cos(a_i, b_i)`, computed directly on values.
pub fn cosine_form_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (n, m) = a.dims2("cosine_form_loss")?;
    if b.shape() != a.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_form_loss",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        let (ra, rb) = (&a.data()[i * m..(i + 1) * m], &b.data()[i * m..(i + 1) * m]);
        let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroNormRow { row: i });
        }
        total += 2.0 - 2.0 * dot / (na * nb);
    }
    Ok(total / n as f64)
}

/// Parameters of a bundle recorded on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub encoder: Vec<Var>,
    pub projector: Vec<Var>,
    pub predictor: Vec<Var>,
    pub target_encoder: Vec<Var>,
    pub target_projector: Vec<Var>,
}

impl BoundParams {
    /// Online parameters become leaves. Target parameters become leaves only
    /// when `track_target`, which is useful for checking they get no gradient.
    pub fn bind(bundle: &ModelBundle, tape: &Tape, track_target: bool) -> Self {
        BoundParams {
            encoder: bundle.online_encoder.bind(tape, true),
            projector: bundle.online_projector.bind(tape, true),
            predictor: bundle.predictor.bind(tape, true),
            target_encoder: bundle.target_encoder.bind(tape, track_target),
            target_projector: bundle.target_projector.bind(tape, track_target),
        }
    }

    /// Splits flat `[online..., target...]` vars in [`online_params`] /
    /// [`ModelBundle::target_params`] order.
    pub fn from_flat(bundle: &ModelBundle, vars: &[Var]) -> Result<Self> {
        let sizes = [
            bundle.online_encoder.params().len(),
            bundle.online_projector.params().len(),
            bundle.predictor.params().len(),
            bundle.target_encoder.params().len(),
            bundle.target_projector.params().len(),
        ];
        if vars.len() != sizes.iter().sum::<usize>() {
            return Err(Error::Config(format!(
                "expected {} parameter vars, got {}",
                sizes.iter().sum::<usize>(),
                vars.len()
            )));
        }
        let mut rest = vars;
        let mut take = |k: usize| {
            let (head, tail) = rest.split_at(k);
            rest = tail;
            head.to_vec()
        };
        Ok(BoundParams {
            encoder: take(sizes[0]),
            projector: take(sizes[1]),
            predictor: take(sizes[2]),
            target_encoder: take(sizes[3]),
            target_projector: take(sizes[4]),
        })
    }

    pub fn online(&self) -> Vec<Var> {
        [&self.encoder, &self.projector, &self.predictor]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }

    pub fn target(&self) -> Vec<Var> {
        [&self.target_encoder, &self.target_projector]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }
}

/// θ in the order used by [`BoundParams::online`] and the optimizer.
pub fn online_params(bundle: &ModelBundle) -> Vec<&Tensor> {
    let mut v = bundle.online_encoder.params();
    v.extend(bundle.online_projector.params());
    v.extend(bundle.predictor.params());
    v
}

/// Every graph node of one Phase I forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SslGraph {
    /// Online encoder features of the first view.
    pub features: Var,
    pub q1: Var,
    pub q1_prime: Var,
    pub z2: Var,
    pub loss_cv: Var,
    pub loss_cm: Var,
    pub loss_total: Var,
}

/// Builds both losses for views `v1`, `v2` of shape `[N,1,s,s]`.
pub fn build_graph(bundle: &ModelBundle, tape: &Tape, p: &BoundParams, v1: Var, v2: Var) -> Result<SslGraph> {
    let side = tape.value(v1)?.shape().get(2).copied().unwrap_or(0);
    let online = |v: Var| -> Result<(Var, Var)> {
        let y = bundle.online_encoder.forward(tape, &p.encoder, v, side)?;
        let z = bundle.online_projector.forward(tape, &p.projector, y)?;
        Ok((y, bundle.predictor.forward(tape, &p.predictor, z)?))
    };
    let (features, q1) = online(v1)?;
    let (_, q1_prime) = online(v2)?;
    let y2 = bundle.target_encoder.forward(tape, &p.target_encoder, v2, side)?;
    let z2 = bundle.target_projector.forward(tape, &p.target_projector, y2)?;
    let z2 = tape.detach(z2)?;
    let loss_cv = cross_view_loss(tape, q1, q1_prime)?;
    let loss_cm = cross_model_loss(tape, q1_prime, z2)?;
    let loss_total = tape.add(loss_cv, loss_cm)?;
    Ok(SslGraph {
        features,
        q1,
        q1_prime,
        z2,
        loss_cv,
        loss_cm,
        loss_total,
    })
}

#[derive(Clone, Debug)]
pub struct SslBatchOutputs {
    pub q1: Tensor,
    pub q1_prime: Tensor,
    /// Plain values; never attached to a tape.
    pub z2: Tensor,
    pub loss_cv: f64,
    pub loss_cm: f64,
    pub loss_total: f64,
    /// Mean over feature dimensions of the batch standard deviation of the
    /// online encoder features.
    pub feature_std: f64,
}

/// Stacks the views of each image into two `[N,1,s,s]` batches.
pub fn stack_views(pairs: &[ViewPair]) -> Result<(Tensor, Tensor)> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Empty("no views to stack".into()))?;
    let mut shape = vec![pairs.len()];
    shape.extend_from_slice(first.v1.shape());
    let mut a = Vec::with_capacity(pairs.len() * first.v1.len());
    let mut b = Vec::with_capacity(pairs.len() * first.v1.len());
    for p in pairs {
        a.extend_from_slice(p.v1.data());
        b.extend_from_slice(p.v2.data());
    }
    Ok((Tensor::new(shape.clone(), a)?, Tensor::new(shape, b)?))
}

/// Augments every image with its own `(seed, "augment", [epoch, index])`
/// stream, in parallel. The output order follows `indices`.
pub fn make_views(ds: &Dataset, indices: &[usize], view_side: usize, seed: u64, epoch: u64) -> Result<Vec<ViewPair>> {
    indices
        .par_iter()
        .map(|&i| {
            let mut r = rng::stream(seed, "augment", &[epoch, i as u64]);
            augment::make_view_pair(&ds.image(i), view_side, &mut r)
        })
        .collect()
}

fn feature_std(features: &Tensor) -> Result<f64> {
    let (n, d) = features.dims2("feature_std")?;
    let x = features.data();
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    Ok(total / d as f64)
}

/// One optimization step on the view batches: SGD on θ, then EMA on ψ.
pub fn ssl_step(bundle: &mut ModelBundle, opt: &mut Sgd, zeta: f64, v1: &Tensor, v2: &Tensor) -> Result<SslBatchOutputs> {
    let tape = Tape::new();
    let p = BoundParams::bind(bundle, &tape, false);
    let x1 = tape.constant(v1.clone());
    let x2 = tape.constant(v2.clone());
    let g = build_graph(bundle, &tape, &p, x1, x2)?;
    let value = |v: Var| -> Result<Tensor> { Ok((*tape.value(v)?).clone()) };
    let out = SslBatchOutputs {
        q1: value(g.q1)?,
        q1_prime: value(g.q1_prime)?,
        z2: value(g.z2)?,
        loss_cv: tape.value(g.loss_cv)?.item(),
        loss_cm: tape.value(g.loss_cm)?.item(),
        loss_total: tape.value(g.loss_total)?.item(),
        feature_std: feature_std(&*tape.value(g.features)?)?,
    };
    if !out.loss_total.is_finite() {
        return Err(Error::NonFinite { op: "ssl loss" });
    }
    let grads = tape.backward(g.loss_total)?.wrt_all(&p.online())?;

    let ModelBundle {
        online_encoder,
        online_projector,
        predictor,
        target_encoder,
        target_projector,
        ..
    } = bundle;
    let mut theta = online_encoder.params_mut();
    theta.extend(online_projector.params_mut());
    theta.extend(predictor.params_mut());
    opt.step(theta, &grads)?;

    let mut psi = target_encoder.params_mut();
    psi.extend(target_projector.params_mut());
    let mut mirror = online_encoder.params();
    mirror.extend(online_projector.params());
    optim::ema_update(psi, mirror, zeta)?;
    Ok(out)
}

/// Batch-size weighted epoch means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss_cv: f64,
    pub loss_cm: f64,
    pub loss_total: f64,
    pub feature_std: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub bundle: ModelBundle,
    pub log: Vec<EpochLoss>,
}

/// Trains a fresh bundle (seeded by `config.seed`) on `indices` of `ds`.
pub fn pretrain(ds: &Dataset, indices: &[usize], specs: &ModelSpecs, config: &SslConfig) -> Result<PretrainOutput> {
    let bundle = ModelBundle::init(specs, config.seed)?;
    pretrain_from(bundle, ds, indices, config)
}

/// Continues Phase I training of `bundle`.
pub fn pretrain_from(
    mut bundle: ModelBundle,
    ds: &Dataset,
    indices: &[usize],
    config: &SslConfig,
) -> Result<PretrainOutput> {
    config.validate()?;
    if indices.is_empty() {
        return Err(Error::Empty("pretraining needs at least one image".into()));
    }
    let side = bundle.specs.encoder.input_side;
    if ds.height() != side || ds.width() != side {
        return Err(Error::Spec(format!(
            "dataset images are {}x{} but the encoder expects {side}x{side}",
            ds.height(),
            ds.width()
        )));
    }
    let view_side = bundle.specs.encoder.view_side();
    let mut opt = Sgd::new(config.learning_rate, config.momentum);
    let mut log = Vec::with_capacity(config.epochs);
    let mut collapsed = 0;
    for epoch in 1..=config.epochs {
        let mut sums = [0.0; 4];
        let mut seen = 0usize;
        for (b, batch) in data::batches(indices, config.batch_size, config.seed, epoch as u64)
            .iter()
            .enumerate()
        {
            let views = make_views(ds, batch, view_side, config.seed, epoch as u64)?;
            let (v1, v2) = stack_views(&views)?;
            let out = ssl_step(&mut bundle, &mut opt, config.zeta, &v1, &v2).map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged(format!(
                    "non-finite value in {op} at epoch {epoch}, batch {b}"
                )),
                Error::ZeroNormRow { row } => Error::Diverged(format!(
                    "all-zero representation for sample {row} at epoch {epoch}, batch {b}"
                )),
                other => other,
            })?;
            let w = batch.len() as f64;
            sums[0] += w * out.loss_cv;
            sums[1] += w * out.loss_cm;
            sums[2] += w * out.loss_total;
            sums[3] += w * out.feature_std;
            seen += batch.len();
        }
        let n = seen as f64;
        let entry = EpochLoss {
            epoch,
            loss_cv: sums[0] / n,
            loss_cm: sums[1] / n,
            loss_total: sums[2] / n,
            feature_std: sums[3] / n,
        };
        log.push(entry);
        collapsed = if entry.feature_std < COLLAPSE_STD { collapsed + 1 } else { 0 };
        if collapsed >= COLLAPSE_EPOCHS {
            return Err(Error::Collapse(format!(
                "mean feature std below {COLLAPSE_STD:e} for {COLLAPSE_EPOCHS} consecutive epochs (epoch {epoch}: {:e})",
                entry.feature_std
            )));
        }
    }
    Ok(PretrainOutput { bundle, log })
}

/// `epoch,loss_cv,loss_cm,loss_total` with 17 significant digits.
pub fn loss_csv(log: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,loss_cv,loss_cm,loss_total\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{:.16e},{:.16e},{:.16e}",
            e.epoch, e.loss_cv, e.loss_cm, e.loss_total
        );
    }
    s
}

pub fn write_loss_csv(path: impl AsRef<Path>, log: &[EpochLoss]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_csv(log)).map_err(|e| Error::io(path, e))
}

/// Mean total loss of an untouched bundle over one augmented pass.
pub fn evaluate_loss(bundle: &ModelBundle, ds: &Dataset, indices: &[usize], seed: u64) -> Result<f64> {
    let views = make_views(ds, indices, bundle.specs.encoder.view_side(), seed, 0)?;
    let (v1, v2) = stack_views(&views)?;
    let tape = Tape::new();
    let p = BoundParams::bind(bundle, &tape, false);
    let x1 = tape.constant(v1);
    let x2 = tape.constant(v2);
    let g = build_graph(bundle, &tape, &p, x1, x2)?;
    Ok(tape.value(g.loss_total)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ConvStage, EncoderSpec, MlpSpec};

    fn tiny_specs() -> ModelSpecs {
        ModelSpecs {
            encoder: EncoderSpec {
                input_side: 8,
                stages: vec![ConvStage {
                    out_channels: 4,
                    stride: 2,
                }],
            },
            projector: MlpSpec::new(4, 6, 3),
            predictor: MlpSpec::new(3, 5, 3),
            head_hidden: 4,
        }
    }

    fn loss_of(a: &Tensor, b: &Tensor, f: fn(&Tape, Var, Var) -> Result<Var>) -> f64 {
        let t = Tape::new();
        let (x, y) = (t.leaf(a.clone()), t.leaf(b.clone()));
        let l = f(&t, x, y).unwrap();
        t.value(l).unwrap().item()
    }

    #[test]
    fn loss_equality_cases() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let orth = Tensor::from_rows(&[vec![-2.0, 1.0], vec![0.5, 3.0]]).unwrap();
        let neg = Tensor::new(vec![2, 2], a.data().iter().map(|v| -2.0 * v).collect()).unwrap();
        assert!(loss_of(&a, &a, cross_view_loss).abs() < 1e-12);
        assert!((loss_of(&a, &orth, cross_view_loss) - 2.0).abs() < 1e-12);
        assert!((loss_of(&a, &neg, cross_model_loss) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cross_model_blocks_target_gradient() {
        let t = Tape::new();
        let q = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let z = t.leaf(Tensor::from_rows(&[vec![0.3, -1.0]]).unwrap());
        let l = cross_model_loss(&t, q, z).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.wrt(z).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.wrt(q).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zeta_one_freezes_target() {
        let ds = data::synth_blobs(2, 8, 3).unwrap();
        let mut b = ModelBundle::init(&tiny_specs(), 1).unwrap();
        let psi0: Vec<Tensor> = b.target_params().into_iter().cloned().collect();
        let views = make_views(&ds, &[0, 1, 2, 3], 4, 1, 0).unwrap();
        let (v1, v2) = stack_views(&views).unwrap();
        let mut opt = Sgd::new(0.1, 0.9);
        for _ in 0..3 {
            ssl_step(&mut b, &mut opt, 1.0, &v1, &v2).unwrap();
        }
        let psi: Vec<Tensor> = b.target_params().into_iter().cloned().collect();
        assert_eq!(psi, psi0);
        assert_ne!(b.online_encoder.params()[0], &psi0[0]);
    }

    #[test]
    fn zeta_zero_copies_online() {
        let ds = data::synth_blobs(2, 8, 3).unwrap();
        let mut b = ModelBundle::init(&tiny_specs(), 1).unwrap();
        let views = make_views(&ds, &[0, 1, 2, 3], 4, 1, 0).unwrap();
        let (v1, v2) = stack_views(&views).unwrap();
        let mut opt = Sgd::new(0.1, 0.9);
        for _ in 0..2 {
            ssl_step(&mut b, &mut opt, 0.0, &v1, &v2).unwrap();
            assert_eq!(b.target_params(), b.online_mirror_params());
        }
    }

    #[test]
    fn csv_has_seventeen_digits() {
        let csv = loss_csv(&[EpochLoss {
            epoch: 1,
            loss_cv: 0.1,
            loss_cm: 1.0 / 3.0,
            loss_total: 0.1 + 1.0 / 3.0,
            feature_std: 1.0,
        }]);
        let row = csv.lines().nth(1).unwrap();
        let cm = row.split(',').nth(2).unwrap();
        assert_eq!(cm, "3.3333333333333331e-1");
        assert_eq!(cm.parse::<f64>().unwrap(), 1.0 / 3.0);
    }
}
