mod common;

use bke_core::autodiff::{Tape, Var};
use bke_core::gradcheck::{self, GradCheck};
use bke_core::ssl;
use bke_core::{Result, Tensor};
use common::{matrix, nonzero_rows};
use proptest::prelude::*;

/// `mean(out * w)` so every output component carries a distinct weight.
fn weighted(t: &Tape, out: Var, w: &Tensor) -> Result<Var> {
    let w = t.constant(w.clone());
    let prod = t.mul(out, w)?;
    t.mean_all(prod)
}

fn check<F>(f: F, params: &[Tensor]) -> f64
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    GradCheck::default().run(f, params).unwrap().max_rel_error
}

fn away_from_zero(t: Tensor) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&v| if v.abs() < 1e-2 { v + 0.05 } else { v })
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_and_bias(a in matrix(3, 4, 2.0), b in matrix(4, 2, 2.0), bias in matrix(1, 2, 1.0), w in matrix(3, 2, 1.0)) {
        let bias = bias.reshaped(&[2]).unwrap();
        let err = check(|t, v| {
            let m = t.matmul(v[0], v[1])?;
            let s = t.add(m, v[2])?;
            weighted(t, s, &w)
        }, &[a, b, bias]);
        prop_assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn elementwise_ops(a in matrix(2, 3, 2.0), b in matrix(2, 3, 2.0), w in matrix(2, 3, 1.0)) {
        let a = away_from_zero(a);
        let err = check(|t, v| {
            let d = t.sub(v[0], v[1])?;
            let m = t.mul(d, v[0])?;
            let r = t.relu(v[0])?;
            let s = t.add(m, r)?;
            let s = t.scale(s, 0.7)?;
            weighted(t, s, &w)
        }, &[a, b]);
        prop_assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn normalize_and_softmax(a in nonzero_rows(3, 4), w in matrix(3, 4, 1.0), tau in 0.5f64..4.0) {
        let err = check(|t, v| {
            let u = t.l2_normalize_rows(v[0])?;
            let s = t.softmax_rows(v[0], tau)?;
            let ls = t.log_softmax_rows(v[0], tau)?;
            let x = t.add(u, s)?;
            let x = t.add(x, ls)?;
            weighted(t, x, &w)
        }, &[a]);
        prop_assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn log_and_row_sums(a in matrix(3, 3, 1.0), w in matrix(1, 3, 1.0)) {
        let a = Tensor::new(vec![3, 3], a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
        let w = w.reshaped(&[3]).unwrap();
        let err = check(|t, v| {
            let l = t.log(v[0])?;
            let s = t.sum_rows(l)?;
            weighted(t, s, &w)
        }, &[a]);
        prop_assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn conv_pool_reshape(
        x in prop::collection::vec(-1.0f64..1.0, 2 * 2 * 5 * 5),
        k in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 3 * 3),
        b in prop::collection::vec(-0.5f64..0.5, 3),
        w in matrix(2, 3, 1.0),
        stride in 1usize..3,
    ) {
        let x = Tensor::new(vec![2, 2, 5, 5], x).unwrap();
        let k = Tensor::new(vec![3, 2, 3, 3], k).unwrap();
        let b = Tensor::new(vec![3], b).unwrap();
        let err = check(|t, v| {
            let c = t.conv2d(v[0], v[1], v[2], stride, 1)?;
            let p = t.global_avg_pool(c)?;
            let r = t.reshape(p, &[2, 3])?;
            weighted(t, r, &w)
        }, &[x, k, b]);
        prop_assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn loss_agrees_with_cosine_form(a in nonzero_rows(5, 4), b in nonzero_rows(5, 4)) {
        let t = Tape::new();
        let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
        let cv = t.value(ssl::cross_view_loss(&t, va, vb).unwrap()).unwrap().item();
        let cm = t.value(ssl::cross_model_loss(&t, va, vb).unwrap()).unwrap().item();
        let oracle = ssl::cosine_form_loss(&a, &b).unwrap();
        prop_assert!((cv - oracle).abs() <= 1e-12);
        prop_assert_eq!(cv, cm);
        prop_assert!((0.0..=4.0).contains(&cv));
    }

    #[test]
    fn loss_is_scale_invariant(a in nonzero_rows(3, 4), b in nonzero_rows(3, 4), s in 0.01f64..100.0) {
        let scaled = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v * s).collect()).unwrap();
        let t = Tape::new();
        let l1 = ssl::cross_view_loss(&t, t.leaf(a), t.leaf(b.clone())).unwrap();
        let l2 = ssl::cross_view_loss(&t, t.leaf(scaled), t.leaf(b)).unwrap();
        prop_assert!((t.value(l1).unwrap().item() - t.value(l2).unwrap().item()).abs() <= 1e-12);
    }
}

#[test]
fn loss_equality_cases() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0, -1.0], vec![0.5, 0.0, 3.0]]).unwrap();
    let neg = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| -2.0 * v).collect()).unwrap();
    let t = Tape::new();
    let same = ssl::cross_view_loss(&t, t.leaf(a.clone()), t.leaf(a.clone())).unwrap();
    let anti = ssl::cross_model_loss(&t, t.leaf(a), t.leaf(neg)).unwrap();
    assert!(t.value(same).unwrap().item().abs() <= 1e-10);
    assert!((t.value(anti).unwrap().item() - 4.0).abs() <= 1e-10);
}

#[test]
fn loss_suite_passes_for_several_seeds() {
    for seed in 0..3 {
        for entry in gradcheck::loss_suite(&GradCheck::default(), seed).unwrap() {
            assert!(entry.report.passed(), "seed {seed} {}: {:?}", entry.name, entry.report);
        }
        assert_eq!(gradcheck::stop_gradient_suite(seed).unwrap(), (0.0, 0.0));
    }
}

#[test]
fn finite_differences_catch_a_wrong_gradient() {
    let check = GradCheck {
        gradient_offset: 1e-3,
        ..GradCheck::default()
    };
    for entry in gradcheck::loss_suite(&check, 0).unwrap() {
        assert!(!entry.report.passed(), "{} should fail", entry.name);
    }
}
