use dgagan_core::losses::{
    discriminator_loss, discriminator_objective, generator_adversarial_loss, generator_objective, l1_loss, omega_schedule,
    weighted_l1, RegionWeights, DEGENERATE_WEIGHT_FLOOR, OMEGA_MAX, REAL_LABEL,
};
use dgagan_core::nn::{Init, ParamStore};
use dgagan_core::optim::{AdamConfig, AdamState};
use dgagan_core::{Graph, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

/// 2×2×2 patch: two lesion voxels, two white-matter voxels, four others.
fn eight_voxel_masks() -> (Tensor, Tensor) {
    let lesion = t(&[2, 2, 2], &[1., 1., 0., 0., 0., 0., 0., 0.]);
    // one WM voxel overlaps the lesion; the lesion wins there
    let wm = t(&[2, 2, 2], &[1., 0., 1., 1., 0., 0., 0., 0.]);
    (lesion, wm)
}

fn scalar_loss(f: impl Fn(&mut Graph) -> dgagan_core::Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).item().unwrap()
}

#[test]
fn adversarial_closed_forms() {
    let two_log2 = 2.0 * std::f64::consts::LN_2;
    let l_d = scalar_loss(|g| {
        let r = g.constant(Tensor::scalar(0.0));
        let f = g.constant(Tensor::scalar(0.0));
        discriminator_loss(g, r, f, 1.0).unwrap()
    });
    assert!((l_d - two_log2).abs() <= 1e-12);
    let l_g = scalar_loss(|g| {
        let f = g.constant(Tensor::scalar(0.0));
        generator_adversarial_loss(g, f).unwrap()
    });
    assert!((l_g - std::f64::consts::LN_2).abs() <= 1e-12);
    let perfect = scalar_loss(|g| {
        let r = g.constant(Tensor::scalar(800.0));
        let f = g.constant(Tensor::scalar(-800.0));
        discriminator_loss(g, r, f, 1.0).unwrap()
    });
    assert!(perfect.is_finite() && perfect < 1e-300);
    assert_eq!(REAL_LABEL, 0.9);
}

#[test]
fn smoothed_loss_uses_soft_real_target() {
    let s = 1.3f64;
    let got = scalar_loss(|g| {
        let r = g.constant(Tensor::scalar(s));
        let f = g.constant(Tensor::scalar(-0.4));
        discriminator_loss(g, r, f, 0.9).unwrap()
    });
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let expected = -(0.9 * sig(s).ln() + (1.0 - sig(-0.4)).ln());
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn tied_logits_minimize_at_half() {
    let loss = |s: f64| {
        scalar_loss(|g| {
            let r = g.constant(Tensor::scalar(s));
            let f = g.constant(Tensor::scalar(s));
            discriminator_loss(g, r, f, 1.0).unwrap()
        })
    };
    let best = (-200..=200)
        .map(|i| i as f64 * 0.01)
        .min_by(|a, b| loss(*a).total_cmp(&loss(*b)))
        .unwrap();
    assert!(best.abs() < 1e-12);
}

#[test]
fn region_weights_eight_voxel_example() {
    let (lesion, wm) = eight_voxel_masks();
    let rw = RegionWeights::new(&lesion, &wm).unwrap();
    assert_eq!((rw.m, rw.m_lesion, rw.m_wm, rw.m_other), (8, 2, 2, 4));
    assert_eq!(rw.weights.data(), &[0.75, 0.75, 0.75, 0.75, 0.5, 0.5, 0.5, 0.5]);
    assert!(!rw.degenerate);
}

#[test]
fn weighted_l1_eight_voxel_example() {
    let (lesion, wm) = eight_voxel_masks();
    let rw = RegionWeights::new(&lesion, &wm).unwrap();
    let residual = |scale: f64| {
        scalar_loss(|g| {
            let y = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
            let p = g.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| if i % 2 == 0 { scale } else { -scale }));
            weighted_l1(g, y, p, &rw).unwrap()
        })
    };
    assert_eq!(residual(1.0), 0.3125);
    assert_eq!(residual(2.0), 0.625);
    assert_eq!(residual(0.0), 0.0);
}

#[test]
fn single_region_patches_are_floored() {
    let zeros = Tensor::zeros(&[2, 2, 2]);
    let ones = Tensor::ones(&[2, 2, 2]);
    for (lesion, wm) in [(&zeros, &zeros), (&ones, &zeros), (&zeros, &ones)] {
        let rw = RegionWeights::new(lesion, wm).unwrap();
        assert!(rw.degenerate);
        assert!(rw.weights.data().iter().all(|&w| w == DEGENERATE_WEIGHT_FLOOR));
    }
    assert!(RegionWeights::new(&t(&[2], &[0.5, 0.0]), &t(&[2], &[0.0, 0.0])).is_err());
}

#[test]
fn weighted_l1_gradient_direction() {
    let (lesion, wm) = eight_voxel_masks();
    let rw = RegionWeights::new(&lesion, &wm).unwrap();
    let y = t(&[1, 2, 2, 2], &[0.3, -0.2, 0.9, 0.1, -0.7, 0.5, 0.2, -0.1]);
    let mut g = Graph::new();
    let yv = g.constant(y.clone());
    let pv = g.leaf(Tensor::zeros(&[1, 2, 2, 2]));
    let l = weighted_l1(&mut g, yv, pv, &rw).unwrap();
    let grads = g.backward(l).unwrap();
    for (i, d) in grads.get(pv).unwrap().data().iter().enumerate() {
        let expected = -(rw.weights.data()[i] / 16.0) * y.data()[i].signum();
        assert!((d - expected).abs() < 1e-15);
    }
}

#[test]
fn omega_schedule_values() {
    let at = |e| omega_schedule(e, 300);
    assert_eq!([at(0), at(99), at(200), at(300)], [0.0, 0.0, 10.0, 10.0]);
    assert!((at(150) - 5.0).abs() < 1e-12);
    assert!((omega_schedule(15, 30) - 5.0).abs() < 1e-12);
    let mut prev = 0.0;
    for e in 0..=330 {
        let w = at(e);
        assert!(w >= prev && (0.0..=OMEGA_MAX).contains(&w));
        prev = w;
    }
}

#[test]
fn objectives() {
    let v = scalar_loss(|g| {
        let adv = g.constant(Tensor::scalar(0.7));
        let l1 = g.constant(Tensor::scalar(0.001));
        generator_objective(g, adv, l1, 1800.0).unwrap()
    });
    assert!((v - 2.5).abs() < 1e-12);
    let pure = scalar_loss(|g| {
        let adv = g.constant(Tensor::scalar(0.7));
        let l1 = g.constant(Tensor::scalar(0.3));
        generator_objective(g, adv, l1, 0.0).unwrap()
    });
    assert_eq!(pure, 0.7);
    let off = scalar_loss(|g| {
        let l_d = g.constant(Tensor::scalar(1.1));
        let l_e = g.constant(Tensor::scalar(0.4));
        discriminator_objective(g, l_d, Some(l_e), 0.0).unwrap()
    });
    assert_eq!(off, 1.1);
}

#[test]
fn l1_is_mean_absolute_error() {
    let v = scalar_loss(|g| {
        let a = g.constant(t(&[4], &[0.0, 1.0, 2.0, 3.0]));
        let b = g.constant(t(&[4], &[1.0, 1.0, 0.0, 3.5]));
        l1_loss(g, a, b).unwrap()
    });
    assert_eq!(v, (1.0 + 0.0 + 2.0 + 0.5) / 4.0);
}

fn one_param_store(value: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("theta", Tensor::scalar(value)).unwrap();
    s
}

#[test]
fn adam_single_step_closed_form() {
    let mut params = one_param_store(0.0);
    let mut state = AdamState::new(&params);
    let cfg = AdamConfig::new(0.1, 0.0);
    state.step(&cfg, &mut params, &[Tensor::scalar(1.0)]).unwrap();
    // m̂ = v̂ = 1 after bias correction
    let expected = -0.1 / (1.0 + 1e-8);
    assert!((params.iter().next().unwrap().value.item().unwrap() - expected).abs() <= 1e-12);
    assert_eq!((cfg.beta1, cfg.beta2, cfg.eps), (0.5, 0.999, 1e-8));
}

#[test]
fn adam_zero_gradient_and_coupled_decay() {
    let mut params = one_param_store(0.25);
    let mut state = AdamState::new(&params);
    state.step(&AdamConfig::new(0.1, 0.0), &mut params, &[Tensor::scalar(0.0)]).unwrap();
    assert_eq!(params.iter().next().unwrap().value.item().unwrap(), 0.25);

    // decay alone acts like a gradient of λθ
    let mut decayed = one_param_store(2.0);
    let mut state = AdamState::new(&decayed);
    state.step(&AdamConfig::new(0.1, 0.5), &mut decayed, &[Tensor::scalar(0.0)]).unwrap();
    let mut plain = one_param_store(2.0);
    let mut state = AdamState::new(&plain);
    state.step(&AdamConfig::new(0.1, 0.0), &mut plain, &[Tensor::scalar(1.0)]).unwrap();
    assert_eq!(decayed, plain);

    assert!(state.step(&AdamConfig::new(0.1, 0.0), &mut plain, &[]).is_err());
}

#[test]
fn adam_treats_parameters_independently() {
    let mut init = Init::new(3);
    let mut params = ParamStore::new();
    params.add("a", Tensor::full(&[3], 0.5)).unwrap();
    params.add("b", Tensor::full(&[3], 0.5)).unwrap();
    let mut state = AdamState::new(&params);
    for _ in 0..5 {
        let g = Tensor::from_fn(&[3], |_| init.standard_normal());
        state.step(&AdamConfig::new(0.01, 1e-3), &mut params, &[g.clone(), g]).unwrap();
    }
    let v: Vec<_> = params.iter().map(|p| p.value.clone()).collect();
    assert_eq!(v[0], v[1]);
    assert!(state.v.iter().all(|t| t.data().iter().all(|&x| x >= 0.0)));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn region_counts_partition_the_patch(bits in proptest::collection::vec(0u8..4, 27)) {
        let lesion = Tensor::from_fn(&[3, 3, 3], |i| (bits[i] & 1) as f64);
        let wm = Tensor::from_fn(&[3, 3, 3], |i| ((bits[i] >> 1) & 1) as f64);
        let rw = RegionWeights::new(&lesion, &wm).unwrap();
        prop_assert_eq!(rw.m_lesion + rw.m_wm + rw.m_other, rw.m);
        if !rw.degenerate {
            for i in 0..27 {
                let count = if lesion.data()[i] == 1.0 { rw.m_lesion } else if wm.data()[i] == 1.0 { rw.m_wm } else { rw.m_other };
                prop_assert_eq!(rw.weights.data()[i], 1.0 - count as f64 / 27.0);
            }
        }
        prop_assert!(rw.weights.data().iter().all(|w| (0.0..=1.0).contains(w)));
    }
}
