use bke_core::optim::{self, Sgd};
use bke_core::Tensor;
use proptest::prelude::*;

fn vec_tensor(v: Vec<f64>) -> Tensor {
    Tensor::new(vec![v.len()], v).unwrap()
}

fn dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn update_stays_in_the_convex_hull(
        t in prop::collection::vec(-5.0f64..5.0, 8),
        o in prop::collection::vec(-5.0f64..5.0, 8),
        zeta in 0.0f64..=1.0,
    ) {
        let mut target = vec_tensor(t.clone());
        let online = vec_tensor(o.clone());
        optim::ema_update(vec![&mut target], vec![&online], zeta).unwrap();
        for ((&a, &b), &v) in t.iter().zip(&o).zip(target.data()) {
            prop_assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn frozen_online_weights_give_geometric_decay(
        t in prop::collection::vec(-5.0f64..5.0, 6),
        o in prop::collection::vec(-5.0f64..5.0, 6),
        zeta in 0.5f64..1.0,
        k in 1usize..=100,
    ) {
        let online = vec_tensor(o);
        let mut target = vec_tensor(t);
        let d0 = dist(&target, &online);
        for _ in 0..k {
            optim::ema_update(vec![&mut target], vec![&online], zeta).unwrap();
        }
        prop_assert!((dist(&target, &online) - zeta.powi(k as i32) * d0).abs() <= 1e-12);
    }
}

#[test]
fn extreme_rates_are_fixed_points() {
    let online = vec_tensor(vec![1.0, -2.0, 3.5]);
    let start = vec_tensor(vec![0.25, 7.0, -1.0]);
    let mut frozen = start.clone();
    let mut copied = start.clone();
    for _ in 0..10 {
        optim::ema_update(vec![&mut frozen], vec![&online], 1.0).unwrap();
        optim::ema_update(vec![&mut copied], vec![&online], 0.0).unwrap();
    }
    assert_eq!(frozen, start);
    assert_eq!(copied, online);
}

#[test]
fn invalid_rate_is_rejected() {
    let online = vec_tensor(vec![1.0]);
    let mut t = vec_tensor(vec![0.0]);
    assert!(optim::ema_update(vec![&mut t], vec![&online], 1.5).is_err());
}

#[test]
fn momentum_sgd_matches_the_recurrence() {
    let mut p = vec_tensor(vec![1.0, -1.0]);
    let mut opt = Sgd::new(0.1, 0.9);
    let g = vec_tensor(vec![0.5, 2.0]);
    let (mut v, mut want) = ([0.0, 0.0], [1.0, -1.0]);
    for _ in 0..5 {
        opt.step(vec![&mut p], std::slice::from_ref(&g)).unwrap();
        for i in 0..2 {
            v[i] = 0.9 * v[i] + g.data()[i];
            want[i] -= 0.1 * v[i];
        }
    }
    assert!(p.data().iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-15));
}
