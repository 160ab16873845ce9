//! Central finite differences as an independent oracle for tape gradients.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::bke::{self, Propagation};
use crate::error::{Error, Result};
use crate::models::{ConvStage, EncoderSpec, MlpSpec, ModelBundle, ModelSpecs, Parameters};
use crate::rng;
use crate::ssl::{self, BoundParams};
use crate::tensor::Tensor;

/// Settings for comparing autodiff gradients against central differences.
///
/// The relative error of one component is `|auto - fd| / max(|auto|, |fd|, floor)`.
/// The floor keeps components whose true gradient is (near) zero from
/// turning finite-difference round-off into a huge relative error.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Added to every autodiff component before comparison. Only useful as a
    /// negative control: any non-trivial offset must make the check fail.
    pub gradient_offset: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            gradient_offset: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(parameter index, component index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub components: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Checks `f` at `params` with the given step and tolerance.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    GradCheck {
        step,
        tolerance,
        ..GradCheck::default()
    }
    .run(f, params)
}

impl GradCheck {
    pub fn run<F>(&self, f: F, params: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        if !(self.step > 0.0) {
            return Err(Error::Config(format!("step must be > 0, got {}", self.step)));
        }
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?.wrt_all(&vars)?;

        let eval = |ps: &[Tensor]| -> Result<f64> {
            let t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
            let v = t.value(f(&t, &vs)?)?.item();
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite {
                    op: "finite_difference",
                })
            }
        };

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: None,
            components: 0,
            tolerance: self.tolerance,
        };
        let mut probe = params.to_vec();
        for (pi, grad) in grads.iter().enumerate() {
            for j in 0..params[pi].len() {
                let orig = params[pi].data()[j];
                probe[pi].data_mut()[j] = orig + self.step;
                let plus = eval(&probe)?;
                probe[pi].data_mut()[j] = orig - self.step;
                let minus = eval(&probe)?;
                probe[pi].data_mut()[j] = orig;

                let numeric = (plus - minus) / (2.0 * self.step);
                let analytic = grad.data()[j] + self.gradient_offset;
                let abs = (analytic - numeric).abs();
                let rel = abs / analytic.abs().max(numeric.abs()).max(self.floor);
                report.components += 1;
                report.max_abs_error = report.max_abs_error.max(abs);
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = rel;
                    report.worst = Some((pi, j));
                }
            }
        }
        Ok(report)
    }
}

fn random_tensor(seed: u64, id: u64, shape: &[usize]) -> Tensor {
    let mut r = rng::stream(seed, "gradcheck", &[id]);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = StandardNormal.sample(&mut r);
    }
    t
}

/// A model small enough for finite differences over every parameter.
pub fn tiny_specs() -> ModelSpecs {
    ModelSpecs {
        encoder: EncoderSpec {
            input_side: 8,
            stages: vec![
                ConvStage {
                    out_channels: 3,
                    stride: 2,
                },
                ConvStage {
                    out_channels: 4,
                    stride: 1,
                },
            ],
        },
        projector: MlpSpec::new(4, 6, 3),
        predictor: MlpSpec::new(3, 5, 3),
        head_hidden: 4,
    }
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Checks the cross-view, cross-model, total self-supervised and batch
/// ensembling losses on small random instances.
pub fn loss_suite(check: &GradCheck, seed: u64) -> Result<Vec<SuiteEntry>> {
    let (n, m) = (4, 3);
    let q1 = random_tensor(seed, 0, &[n, m]);
    let q1p = random_tensor(seed, 1, &[n, m]);
    let z2 = random_tensor(seed, 2, &[n, m]);
    let mut out = Vec::new();

    let report = check.run(|t, v| ssl::cross_view_loss(t, v[0], v[1]), &[q1.clone(), q1p.clone()])?;
    out.push(SuiteEntry {
        name: "cross_view",
        report,
    });

    let report = check.run(
        |t, v| {
            let z = t.constant(z2.clone());
            ssl::cross_model_loss(t, v[0], z)
        },
        std::slice::from_ref(&q1p),
    )?;
    out.push(SuiteEntry {
        name: "cross_model",
        report,
    });

    let bundle = ssl_instance(seed)?;
    let v1 = random_tensor(seed, 3, &[2, 1, 4, 4]);
    let v2 = random_tensor(seed, 4, &[2, 1, 4, 4]);
    let theta: Vec<Tensor> = ssl::online_params(&bundle).into_iter().cloned().collect();
    let report = check.run(
        |t, v| {
            let mut all = v.to_vec();
            all.extend(bundle.target_encoder.bind(t, false));
            all.extend(bundle.target_projector.bind(t, false));
            let p = BoundParams::from_flat(&bundle, &all)?;
            let (x1, x2) = (t.constant(v1.clone()), t.constant(v2.clone()));
            Ok(ssl::build_graph(&bundle, t, &p, x1, x2)?.loss_total)
        },
        &theta,
    )?;
    out.push(SuiteEntry {
        name: "ssl_total",
        report,
    });

    let (logits, labels, q, tau, lambda) = bke_instance(seed)?;
    let report = check.run(
        |t, v| Ok(bke::bke_loss(t, v[0], &labels, Some(&q), tau, lambda)?.total),
        &[logits],
    )?;
    out.push(SuiteEntry {
        name: "bke",
        report,
    });
    Ok(out)
}

/// A tiny bundle whose target has drifted away from the online network.
fn ssl_instance(seed: u64) -> Result<ModelBundle> {
    let mut bundle = ModelBundle::init(&tiny_specs(), seed)?;
    for (k, p) in bundle.target_params_mut().into_iter().enumerate() {
        let noise = random_tensor(seed, 100 + k as u64, p.shape());
        for (a, b) in p.data_mut().iter_mut().zip(noise.data()) {
            *a += 0.1 * b;
        }
    }
    Ok(bundle)
}

/// Random 4x3 logits, labels and fixed soft targets built from random
/// features.
fn bke_instance(seed: u64) -> Result<(Tensor, Vec<usize>, bke::SoftTargets, f64, f64)> {
    let logits = random_tensor(seed, 5, &[4, 3]);
    let features = random_tensor(seed, 6, &[4, 5]);
    let labels = vec![0, 2, 1, 2];
    let tau = 2.0;
    let q = bke::batch_soft_targets(&features, &logits, 0.5, tau, Propagation::ClosedForm)?;
    Ok((logits, labels, q, tau, 8.0))
}

/// Largest absolute gradients that must be exactly zero: the self-supervised
/// loss with respect to the target parameters, and the batch ensembling loss
/// with respect to features that only feed the soft targets.
pub fn stop_gradient_suite(seed: u64) -> Result<(f64, f64)> {
    let bundle = ssl_instance(seed)?;
    let tape = Tape::new();
    let p = BoundParams::bind(&bundle, &tape, true);
    let x1 = tape.constant(random_tensor(seed, 3, &[2, 1, 4, 4]));
    let x2 = tape.constant(random_tensor(seed, 4, &[2, 1, 4, 4]));
    let g = ssl::build_graph(&bundle, &tape, &p, x1, x2)?;
    let grads = tape.backward(g.loss_total)?;
    let mut psi_max: f64 = 0.0;
    for v in p.target() {
        psi_max = grads.wrt(v)?.data().iter().fold(psi_max, |m, x| m.max(x.abs()));
    }

    let tape = Tape::new();
    let features = tape.leaf(random_tensor(seed, 6, &[4, 5]));
    let logits = tape.leaf(random_tensor(seed, 5, &[4, 3]));
    let config = bke::BkeConfig {
        tau: 2.0,
        ..bke::BkeConfig::default()
    };
    let loss = bke::bke_graph(&tape, features, logits, &[0, 2, 1, 2], &config)?;
    let grads = tape.backward(loss.total)?;
    let feature_max = grads
        .wrt(features)?
        .data()
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()));
    Ok((psi_max, feature_max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let report = finite_difference_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.mean_all(sq)
            },
            &[Tensor::scalar(3.0)],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.max_abs_error < 1e-9, "{report:?}");
        assert!(report.passed());
    }

    #[test]
    fn offset_gradient_is_caught() {
        let check = GradCheck {
            gradient_offset: 1e-2,
            ..GradCheck::default()
        };
        let report = check
            .run(
                |t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    t.mean_all(sq)
                },
                &[Tensor::scalar(3.0)],
            )
            .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn rejects_non_positive_step() {
        let r = finite_difference_check(|t, v| t.mean_all(v[0]), &[Tensor::scalar(1.0)], 0.0, 1e-4);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn loss_suite_passes_and_offset_fails() {
        for entry in loss_suite(&GradCheck::default(), 11).unwrap() {
            assert!(entry.report.passed(), "{}: {:?}", entry.name, entry.report);
        }
        let broken = GradCheck {
            gradient_offset: 1e-2,
            ..GradCheck::default()
        };
        for entry in loss_suite(&broken, 11).unwrap() {
            assert!(!entry.report.passed(), "{} passed with an offset", entry.name);
        }
    }

    #[test]
    fn stop_gradients_are_exact() {
        assert_eq!(stop_gradient_suite(3).unwrap(), (0.0, 0.0));
    }
}
