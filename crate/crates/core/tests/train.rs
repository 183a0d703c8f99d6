use dgagan_core::dataset::{build_samples, fold_partition, TrainingSample};
use dgagan_core::losses::omega_schedule;
use dgagan_core::models::ModelVariant;
use dgagan_core::phantom::{generate_phantom_cohort, PhantomConfig};
use dgagan_core::train::{sample_patches, Models, Patch, TrainConfig, Trainer};

fn samples() -> Vec<TrainingSample> {
    let cohort = generate_phantom_cohort(&PhantomConfig::new(3, [24; 3], 11)).unwrap();
    build_samples(&cohort, &[0, 1, 2]).unwrap()
}

fn lesion_patch(variant: ModelVariant, s: &TrainingSample) -> Patch {
    let roi = variant.spec().t0_roi_channel;
    sample_patches(s, [16; 3], roi)
        .unwrap()
        .into_iter()
        .max_by(|a, b| a.lesion.sum().total_cmp(&b.lesion.sum()))
        .unwrap()
}

fn short(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        ..TrainConfig::desk(seed)
    }
}

#[test]
fn phases_touch_only_their_own_network() {
    let s = samples();
    let cfg = short(1);
    let patch = lesion_patch(ModelVariant::Dgagan, &s[0]);
    let mut m = Models::new(ModelVariant::Dgagan, &cfg).unwrap();
    let (g0, d0) = (m.generator.params.clone(), m.discriminator.as_ref().unwrap().params.clone());
    let pass = m.generator_pass(&patch.x).unwrap();
    let fake = pass.fake().clone();
    m.discriminator_phase(&cfg, &patch, &fake, 5.0).unwrap();
    let d1 = m.discriminator.as_ref().unwrap().params.clone();
    assert_eq!(m.generator.params, g0);
    assert_ne!(d1, d0);
    m.generator_update(&cfg, pass, &patch).unwrap();
    assert_eq!(m.discriminator.as_ref().unwrap().params, d1);
    assert_ne!(m.generator.params, g0);
}

#[test]
fn zero_weight_removes_attention_from_the_update() {
    let s = samples();
    let cfg = short(2);
    let patch = lesion_patch(ModelVariant::Dgagan, &s[1]);
    let step = |guided: bool, omega: f64| {
        let mut m = Models::new(ModelVariant::Dgagan, &cfg).unwrap();
        m.spec.guided_attention = guided;
        let metrics = m.train_step(&cfg, &patch, omega).unwrap();
        (m.discriminator.unwrap().params, metrics)
    };
    let (with_loss, metrics) = step(true, 0.0);
    let (without_loss, _) = step(false, 0.0);
    assert!(metrics.l_e.is_some());
    assert_eq!(with_loss, without_loss);
    let (weighted, _) = step(true, 10.0);
    assert_ne!(weighted, without_loss);
}

#[test]
fn one_step_stays_finite_for_every_variant() {
    let s = samples();
    let cfg = short(3);
    for v in ModelVariant::ALL {
        let patch = lesion_patch(v, &s[2]);
        let mut m = Models::new(v, &cfg).unwrap();
        let metrics = m.train_step(&cfg, &patch, 10.0).unwrap();
        assert!(metrics.l1.is_finite());
        assert!(m.generator.params.iter().all(|p| p.value.all_finite()));
        if let Some(d) = &m.discriminator {
            assert!(d.params.iter().all(|p| p.value.all_finite()));
        }
        assert_eq!(metrics.l_d.is_some(), v != ModelVariant::Unet);
        assert_eq!(metrics.l_g_adv.is_some(), v != ModelVariant::Unet);
        assert_eq!(metrics.l_e.is_some(), v == ModelVariant::Dgagan);
    }
}

#[test]
fn validation_subjects_are_refused() {
    let s = samples();
    let mut t = Trainer::new(ModelVariant::Unet, short(4), 0).unwrap();
    let all: Vec<&TrainingSample> = s.iter().collect();
    assert!(t.run_epoch(&all).is_err());
    assert_eq!(t.epochs_done, 0);
}

#[test]
fn training_is_deterministic_and_logs_training_subjects() {
    let s = samples();
    let (train, val) = fold_partition(&s, 2);
    let run = || {
        let mut t = Trainer::new(ModelVariant::Dgagan, short(5), 2).unwrap();
        let logs: Vec<_> = (0..2).map(|_| t.run_epoch(&train).unwrap()).collect();
        (logs, t.models.generator.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    for m in &a {
        assert_eq!(m.steps, train.len() * 8);
        assert!(m.subjects.iter().all(|s| val.iter().all(|v| &v.subject != s)));
        assert_eq!(m.omega, omega_schedule(m.epoch - 1, 2));
    }
    let (c, _) = {
        let mut t = Trainer::new(ModelVariant::Dgagan, short(6), 2).unwrap();
        (t.run_epoch(&train).unwrap(), ())
    };
    assert_ne!(c.l1, a[0].l1);
}

#[test]
fn unet_log_has_no_adversarial_terms() {
    let s = samples();
    let (train, _) = fold_partition(&s, 0);
    let mut t = Trainer::new(ModelVariant::Unet, short(7), 0).unwrap();
    let m = t.run_epoch(&train).unwrap();
    assert!(m.l_d.is_none() && m.l_g_adv.is_none() && m.l_e.is_none());
    assert!(m.attention_ratio.is_none());
    assert!(t.models.discriminator.is_none());
}

#[test]
fn config_validation() {
    let mut c = TrainConfig::desk(0);
    c.lr_d = 0.0;
    assert!(Trainer::new(ModelVariant::Cgan, c, 0).is_err());
    let mut c = TrainConfig::desk(0);
    c.epochs = 0;
    assert!(Trainer::new(ModelVariant::Cgan, c, 0).is_err());
    let full = TrainConfig::full_size(0);
    assert_eq!((full.epochs, full.patch, full.lr_g, full.lr_d), (300, [128; 3], 2e-4, 1e-5));
    assert_eq!((full.weight_decay_g, full.weight_decay_d), (7e-8, 1e-5));
}
