use dgagan_core::attention::{
    attention_supervision, attention_supervision_loss, extract_attention, gradcam_map, gradcam_weights,
    min_max_normalize, AttentionSummary, GradCamWeights,
};
use dgagan_core::models::{Discriminator, DiscriminatorConfig, ScoreHead};
use dgagan_core::nn::{Bound, Init, ParamStore};
use dgagan_core::{Graph, Result, Tensor, Var};
use proptest::prelude::*;

fn noise(shape: &[usize], seed: u64) -> Tensor {
    let mut init = Init::new(seed);
    Tensor::from_fn(shape, |_| init.standard_normal())
}

/// Score = c · GAP(tap channel 0).
struct ChannelZero {
    params: ParamStore,
    scale: f64,
}

impl ChannelZero {
    fn new(scale: f64) -> Self {
        Self {
            params: ParamStore::new(),
            scale,
        }
    }
}

impl ScoreHead for ChannelZero {
    fn head_params(&self) -> &ParamStore {
        &self.params
    }

    fn head(&self, g: &mut Graph, _: &Bound, tap: Var) -> Result<Var> {
        let c0 = g.slice_channels(tap, 0, 1)?;
        let pooled = g.global_avg_pool(c0)?;
        let s = g.reshape(pooled, &[])?;
        g.mul_scalar(s, self.scale)
    }
}

fn small() -> DiscriminatorConfig {
    let mut cfg = DiscriminatorConfig::guided(2, 4);
    cfg.attention_reduction = 2;
    cfg
}

fn raw_map(head: &impl ScoreHead, tap: &Tensor) -> Tensor {
    let w = gradcam_weights(head, tap).unwrap();
    let mut g = Graph::new();
    let t = g.constant(tap.clone());
    let a = gradcam_map(&mut g, t, &w).unwrap();
    g.value(a).clone()
}

#[test]
fn channel_zero_oracle() {
    let tap = noise(&[3, 4, 5, 6], 1);
    let n = 120.0;
    let w = gradcam_weights(&ChannelZero::new(1.0), &tap).unwrap();
    assert!((w.0[0] - 1.0 / n).abs() < 1e-15);
    assert_eq!(&w.0[1..], &[0.0, 0.0]);
    let a = raw_map(&ChannelZero::new(1.0), &tap);
    assert_eq!(a.shape(), &[1, 4, 5, 6]);
    for (got, f) in a.data().iter().zip(&tap.data()[..120]) {
        assert!((got - f.max(0.0) / n).abs() <= 1e-10);
    }
}

#[test]
fn score_scaling_scales_raw_map_and_leaves_normalized_map() {
    let tap = noise(&[2, 4, 4, 4], 2);
    let mask = Tensor::zeros(&[8, 8, 8]);
    let base = extract_attention(&ChannelZero::new(1.0), &tap, [8, 8, 8]).unwrap();
    for c in [0.5, 3.0, 250.0] {
        let scaled = extract_attention(&ChannelZero::new(c), &tap, [8, 8, 8]).unwrap();
        for (a, b) in scaled.raw.data().iter().zip(base.raw.data()) {
            assert!((a - c * b).abs() <= 1e-12 * c.max(1.0));
        }
        assert!(scaled.upsampled.max_abs_diff(&base.upsampled) <= 1e-9);
    }
    assert_eq!(base.upsampled.shape(), mask.shape());
}

#[test]
fn discriminator_weight_examples() {
    let mut d = Discriminator::new(small(), 3).unwrap();
    let tap = noise(&[4, 5, 5, 5], 4);
    let w = gradcam_weights(&d, &tap).unwrap();
    assert_eq!(w.0.len(), 4);

    let id = d.params.find("dense.weight").unwrap();
    *d.params.get_mut(id) = d.params.get(id).scale(2.0);
    let doubled = gradcam_weights(&d, &tap).unwrap();
    for (a, b) in doubled.0.iter().zip(&w.0) {
        assert!((a - 2.0 * b).abs() < 1e-15);
    }

    *d.params.get_mut(id) = Tensor::zeros(d.params.get(id).shape());
    assert!(gradcam_weights(&d, &tap).unwrap().0.iter().all(|&v| v == 0.0));
}

#[test]
fn map_examples() {
    let f = Tensor::from_fn(&[2, 2, 2, 2], |i| (i % 5) as f64 * 0.3);
    let mut g = Graph::new();
    let t = g.constant(f.clone());
    let a = gradcam_map(&mut g, t, &GradCamWeights(vec![1.0, 0.0])).unwrap();
    assert_eq!(g.value(a).data(), &f.data()[..8]);
    let z = gradcam_map(&mut g, t, &GradCamWeights(vec![0.0, 0.0])).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    let c = g.constant(Tensor::full(&[2, 2, 2, 2], 0.8));
    let cancel = gradcam_map(&mut g, c, &GradCamWeights(vec![1.0, -1.0])).unwrap();
    assert!(g.value(cancel).data().iter().all(|&v| v == 0.0));
    assert!(gradcam_map(&mut g, t, &GradCamWeights(vec![1.0])).is_err());
}

#[test]
fn supervision_loss_examples() {
    let mut mask = Tensor::zeros(&[4, 4, 4]);
    for i in [0, 5, 21, 42, 63] {
        mask.data_mut()[i] = 1.0;
    }
    let mut g = Graph::new();
    let exact = g.constant(mask.clone().scale(3.0).reshape(&[1, 4, 4, 4]).unwrap());
    let l = attention_supervision_loss(&mut g, exact, &mask).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);

    let zero = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let l = attention_supervision_loss(&mut g, zero, &mask).unwrap();
    assert!((g.value(l).item().unwrap() - 5.0 / 64.0).abs() < 1e-15);

    let mut bad = mask.clone();
    bad.data_mut()[1] = 0.5;
    assert!(attention_supervision_loss(&mut g, zero, &bad).is_err());
}

#[test]
fn supervision_gradient_reaches_the_tap_kernel() {
    let d = Discriminator::new(small(), 5).unwrap();
    let x = noise(&[1, 8, 8, 8], 6);
    let y = noise(&[1, 8, 8, 8], 7);
    let mask = Tensor::from_fn(&[8, 8, 8], |i| if i % 7 == 0 || i % 11 == 0 { 1.0 } else { 0.0 });
    let id = d.params.find("block4.kernel").unwrap();

    let mut g = Graph::new();
    let p = d.params.bind(&mut g, false);
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let out = d.forward(&mut g, &p, xv, yv).unwrap();
    let w = gradcam_weights(&d, g.value(out.tap)).unwrap();

    let fd = dgagan_core::gradcheck::finite_difference_check(
        |g, k| {
            let mut p = d.params.bind(g, false);
            p.substitute(id, k);
            let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
            let out = d.forward(g, &p, xv, yv)?;
            let map = gradcam_map(g, out.tap, &w)?;
            attention_supervision_loss(g, map, &mask)
        },
        d.params.get(id),
        1e-6,
    )
    .unwrap();
    assert!(fd.max_relative_error <= 1e-3, "{}", fd.max_relative_error);
    assert!(fd.analytic.iter().any(|&v| v != 0.0));
}

#[test]
fn flat_map_normalizes_to_zero() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::full(&[1, 2, 2, 2], 0.0));
    let n = min_max_normalize(&mut g, a).unwrap();
    assert!(g.value(n).data().iter().all(|&v| v == 0.0));
}

#[test]
fn summary_ratio() {
    let map = Tensor::new(&[4], vec![1.0, 1.0, 0.25, 0.25]).unwrap();
    let mask = Tensor::new(&[4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let s = AttentionSummary::new(&map, &mask).unwrap();
    assert_eq!((s.mean_inside, s.mean_outside, s.ratio), (1.0, 0.25, 4.0));
    assert!(AttentionSummary::new(&map, &Tensor::zeros(&[4])).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn map_is_non_negative_and_loss_bounded(seed in 0u64..10_000, fill in 0.0f64..0.6) {
        let tap = noise(&[3, 3, 3, 3], seed);
        let w = GradCamWeights(noise(&[3], seed + 1).into_data());
        let mask = noise(&[6, 6, 6], seed + 2).map(|v| if v < fill - 0.5 { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let t = g.constant(tap);
        let a = gradcam_map(&mut g, t, &w).unwrap();
        prop_assert!(g.value(a).data().iter().all(|&v| v >= 0.0));
        let (l, up) = attention_supervision(&mut g, a, &mask).unwrap();
        prop_assert_eq!(&g.shape(up)[1..], mask.shape());
        let l = g.value(l).item().unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
    }
}
