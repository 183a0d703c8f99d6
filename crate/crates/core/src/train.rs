//! Alternating discriminator/generator optimization of the compared models.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionSummary};
use crate::augment::augment;
use crate::dataset::{input_channels, TrainingSample};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, RegionWeights};
use crate::models::{
    DiscriminatorConfig, DiscriminatorKind, Discriminator, Generator, GeneratorConfig, L1Kind,
    ModelVariant, VariantSpec,
};
use crate::nn::Bound;
use crate::optim::{AdamConfig, AdamState};
use crate::patch::split_patches;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// Network widths and attention settings; the knobs that separate a desk
/// run from the full-size protocol.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelScale {
    pub generator_levels: usize,
    pub generator_channels: usize,
    pub discriminator_channels: usize,
    pub attention_reduction: usize,
    /// Key/value max-pool factor inside the generator self-attention.
    pub generator_kv_pool: usize,
    /// Key/value max-pool factor inside the discriminator self-attention.
    pub discriminator_kv_pool: usize,
    /// Dilation per block of the guided discriminator; the last block is the tap.
    pub discriminator_dilations: Vec<usize>,
    pub discriminator_tap_norm: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub weight_decay_g: f64,
    pub weight_decay_d: f64,
    /// Smoothed target of real pairs in the discriminator loss.
    pub real_label: f64,
    pub patch: [usize; 3],
    pub augment: bool,
    pub seed: u64,
    pub scale: ModelScale,
}

impl TrainConfig {
    /// Full-size protocol: 300 epochs on 128³ patches.
    pub fn full_size(seed: u64) -> Self {
        Self {
            epochs: 300,
            lr_d: 1e-5,
            patch: [128; 3],
            scale: ModelScale {
                generator_levels: 6,
                generator_channels: 16,
                discriminator_channels: 32,
                attention_reduction: 8,
                generator_kv_pool: 1,
                discriminator_kv_pool: 1,
                discriminator_dilations: alloc::vec![1, 1, 2, 4, 8],
                discriminator_tap_norm: false,
            },
            ..Self::desk(seed)
        }
    }

    /// 30 epochs on 16³ patches with narrow networks. The discriminator
    /// rate is raised so that the attention supervision takes hold within
    /// the short schedule.
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 30,
            lr_g: 2e-4,
            lr_d: 1e-3,
            weight_decay_g: 7e-8,
            weight_decay_d: 1e-5,
            real_label: losses::REAL_LABEL,
            patch: [16; 3],
            augment: true,
            seed,
            scale: ModelScale {
                generator_levels: 4,
                generator_channels: 8,
                discriminator_channels: 8,
                attention_reduction: 4,
                generator_kv_pool: 1,
                discriminator_kv_pool: 4,
                // Dilations of 4 and 8 reach past a 16³ patch; an undilated
                // tap keeps the map sharp enough to cover small lesions.
                discriminator_dilations: alloc::vec![1, 1, 2, 2, 1],
                discriminator_tap_norm: true,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_g, self.lr_d, self.weight_decay_g, self.weight_decay_d];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(invalid("learning rates and weight decays must be positive"));
        }
        if self.scale.discriminator_dilations.is_empty() {
            return Err(invalid("guided discriminator needs at least one block"));
        }
        if self.epochs == 0 {
            return Err(invalid("at least one epoch is required"));
        }
        if !(self.real_label > 0.0 && self.real_label <= 1.0) {
            return Err(invalid("real label must lie in (0, 1]"));
        }
        let div = 1usize << self.scale.generator_levels.saturating_sub(1);
        if self.patch.iter().any(|&p| p == 0 || p % div != 0) {
            return Err(invalid(alloc::format!(
                "patch {:?} not divisible by {div} for a {}-level generator",
                self.patch,
                self.scale.generator_levels
            )));
        }
        Ok(())
    }

    pub fn generator_config(&self, variant: ModelVariant) -> GeneratorConfig {
        let spec = variant.spec();
        let mut cfg = GeneratorConfig::desk(input_channels(spec.t0_roi_channel), self.scale.generator_channels);
        cfg.levels = self.scale.generator_levels;
        cfg.attention_reduction = self.scale.attention_reduction;
        cfg.attention_kv_pool = self.scale.generator_kv_pool;
        if spec.generator_attention {
            cfg = cfg.with_attention();
        }
        cfg
    }

    pub fn discriminator_config(&self, variant: ModelVariant) -> Option<DiscriminatorConfig> {
        let spec = variant.spec();
        let c_in = input_channels(spec.t0_roi_channel) + 1;
        let c = self.scale.discriminator_channels;
        let mut cfg = match spec.discriminator? {
            DiscriminatorKind::GuidedDilated => {
                let mut cfg = DiscriminatorConfig::guided(c_in, c);
                let n = self.scale.discriminator_dilations.len();
                cfg.channels = alloc::vec![c; n];
                cfg.dilations = self.scale.discriminator_dilations.clone();
                cfg.tap_layer = n.saturating_sub(1);
                cfg.tap_norm = self.scale.discriminator_tap_norm;
                cfg
            }
            DiscriminatorKind::Plain => DiscriminatorConfig::plain(c_in, c),
        };
        cfg.attention_reduction = self.scale.attention_reduction;
        cfg.attention_kv_pool = self.scale.discriminator_kv_pool;
        Some(cfg)
    }
}

/// One training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `[C, p, p, p]` generator input.
    pub x: Tensor,
    /// `[1, p, p, p]` target.
    pub y: Tensor,
    /// `[p, p, p]` target-time lesion mask.
    pub lesion: Tensor,
    /// `[p, p, p]` white-matter mask.
    pub wm: Tensor,
}

/// Loss components of one step; adversarial terms are absent for the U-Net.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub l_d: Option<f64>,
    pub l_g_adv: Option<f64>,
    pub l1: f64,
    pub l_e: Option<f64>,
    pub omega: f64,
    pub attention: Option<AttentionSummary>,
}

/// Result of a discriminator update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorStep {
    pub l_d: f64,
    pub l_e: Option<f64>,
    pub attention: Option<AttentionSummary>,
}

/// Generator forward pass whose graph is reused by the generator update.
pub struct GeneratorPass {
    graph: Graph,
    bound: Bound,
    x: Var,
    fake: Var,
}

impl GeneratorPass {
    pub fn fake(&self) -> &Tensor {
        self.graph.value(self.fake)
    }
}

/// Networks and optimizer state of one variant.
#[derive(Debug, Clone)]
pub struct Models {
    pub variant: ModelVariant,
    pub spec: VariantSpec,
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    pub adam_g: AdamState,
    pub adam_d: Option<AdamState>,
}

fn finite(v: f64, term: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { op: term })
    }
}

impl Models {
    pub fn new(variant: ModelVariant, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(cfg.generator_config(variant), derive_seed(cfg.seed, &[1]))?;
        let discriminator = cfg
            .discriminator_config(variant)
            .map(|dc| Discriminator::new(dc, derive_seed(cfg.seed, &[2])))
            .transpose()?;
        let adam_g = AdamState::new(&generator.params);
        let adam_d = discriminator.as_ref().map(|d| AdamState::new(&d.params));
        Ok(Self {
            variant,
            spec: variant.spec(),
            generator,
            discriminator,
            adam_g,
            adam_d,
        })
    }

    pub fn generator_pass(&self, x: &Tensor) -> Result<GeneratorPass> {
        let mut graph = Graph::new();
        let bound = self.generator.params.bind(&mut graph, true);
        let x = graph.constant(x.clone());
        let fake = self.generator.forward(&mut graph, &bound, x)?;
        Ok(GeneratorPass { graph, bound, x, fake })
    }

    /// Discriminator update on `(x, y)` versus the detached `fake`:
    /// `L_D + ω·L_e`, with `L_e` on the real pass for the guided variant.
    pub fn discriminator_phase(
        &mut self,
        cfg: &TrainConfig,
        patch: &Patch,
        fake: &Tensor,
        omega: f64,
    ) -> Result<DiscriminatorStep> {
        let (Some(d), Some(adam)) = (self.discriminator.as_mut(), self.adam_d.as_mut()) else {
            return Err(invalid(alloc::format!("{} has no discriminator", self.variant)));
        };
        let mut g = Graph::new();
        let p = d.params.bind(&mut g, true);
        let x = g.constant(patch.x.clone());
        let y = g.constant(patch.y.clone());
        let f = g.constant(fake.clone());
        let real = d.forward(&mut g, &p, x, y)?;
        let fake_out = d.forward(&mut g, &p, x, f)?;
        let l_d = losses::discriminator_loss(&mut g, real.score, fake_out.score, cfg.real_label)?;
        let (l_e, summary) = if self.spec.guided_attention {
            let w = attention::gradcam_weights(&*d, g.value(real.tap))?;
            let map = attention::gradcam_map(&mut g, real.tap, &w)?;
            let (loss, up) = attention::attention_supervision(&mut g, map, &patch.lesion)?;
            (Some(loss), AttentionSummary::new(g.value(up), &patch.lesion))
        } else {
            (None, None)
        };
        let total = losses::discriminator_objective(&mut g, l_d, l_e, omega)?;
        let l_d_value = finite(g.value(l_d).item()?, "L_D")?;
        let l_e_value = l_e.map(|v| g.value(v).item()).transpose()?;
        if let Some(v) = l_e_value {
            finite(v, "L_e")?;
        }
        let mut grads = g.backward(total)?;
        let grads = p.gradients(&d.params, &mut grads);
        adam.step(&AdamConfig::new(cfg.lr_d, cfg.weight_decay_d), &mut d.params, &grads)?;
        Ok(DiscriminatorStep {
            l_d: l_d_value,
            l_e: l_e_value,
            attention: summary,
        })
    }

    /// Generator update from a prepared pass: `L_G_adv + λ·L_l1` (L1 only
    /// for the U-Net). Returns `(L_G_adv, L_l1)`.
    pub fn generator_update(&mut self, cfg: &TrainConfig, pass: GeneratorPass, patch: &Patch) -> Result<(Option<f64>, f64)> {
        let GeneratorPass {
            mut graph,
            bound,
            x,
            fake,
        } = pass;
        let g = &mut graph;
        let y = g.constant(patch.y.clone());
        let l1 = match self.spec.l1 {
            L1Kind::Plain => losses::l1_loss(g, y, fake)?,
            L1Kind::RegionWeighted => {
                let rw = RegionWeights::new(&patch.lesion, &patch.wm)?;
                losses::weighted_l1(g, y, fake, &rw)?
            }
        };
        let adv = match &self.discriminator {
            Some(d) => {
                let pd = d.params.bind(g, false);
                let out = d.forward(g, &pd, x, fake)?;
                Some(losses::generator_adversarial_loss(g, out.score)?)
            }
            None => None,
        };
        let total = match adv {
            Some(a) => losses::generator_objective(g, a, l1, self.spec.lambda_l1)?,
            None => g.mul_scalar(l1, self.spec.lambda_l1)?,
        };
        let l1_value = finite(g.value(l1).item()?, "L_l1")?;
        let adv_value = adv.map(|a| g.value(a).item()).transpose()?;
        if let Some(v) = adv_value {
            finite(v, "L_G_adv")?;
        }
        let mut grads = g.backward(total)?;
        let grads = bound.gradients(&self.generator.params, &mut grads);
        self.adam_g
            .step(&AdamConfig::new(cfg.lr_g, cfg.weight_decay_g), &mut self.generator.params, &grads)?;
        Ok((adv_value, l1_value))
    }

    /// One full step: discriminator first (when present), then generator.
    pub fn train_step(&mut self, cfg: &TrainConfig, patch: &Patch, omega: f64) -> Result<StepMetrics> {
        let pass = self.generator_pass(&patch.x)?;
        let d = if self.discriminator.is_some() {
            let fake = pass.fake().clone();
            Some(self.discriminator_phase(cfg, patch, &fake, omega)?)
        } else {
            None
        };
        let (l_g_adv, l1) = self.generator_update(cfg, pass, patch)?;
        Ok(StepMetrics {
            l_d: d.map(|d| d.l_d),
            l_g_adv,
            l1,
            l_e: d.and_then(|d| d.l_e),
            omega,
            attention: d.and_then(|d| d.attention),
        })
    }
}

/// Cuts every grid patch out of a (possibly augmented) sample.
pub fn sample_patches(sample: &TrainingSample, patch: [usize; 3], roi_channel: bool) -> Result<Vec<Patch>> {
    let grid = split_patches(sample.extents(), patch)?;
    let x = sample.input(roi_channel);
    grid.starts()
        .into_iter()
        .map(|s| {
            Ok(Patch {
                x: grid.extract(&x, s)?,
                y: grid.extract(&sample.target, s)?,
                lesion: grid.extract(&sample.lesion, s)?,
                wm: grid.extract(&sample.wm, s)?,
            })
        })
        .collect()
}

/// Per-epoch means of the step metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub l_d: Option<f64>,
    pub l_g_adv: Option<f64>,
    pub l1: f64,
    pub l_e: Option<f64>,
    pub omega: f64,
    pub steps: usize,
    /// Mean Grad-CAM inside/outside ratio over the steps where defined.
    pub attention_ratio: Option<f64>,
    /// Subjects of the samples visited, in visiting order.
    pub subjects: Vec<String>,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Training state of one variant on one fold.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub models: Models,
    pub fold: usize,
    /// Number of completed epochs.
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(variant: ModelVariant, config: TrainConfig, fold: usize) -> Result<Self> {
        let models = Models::new(variant, &config)?;
        Ok(Self {
            config,
            models,
            fold,
            epochs_done: 0,
        })
    }

    pub fn variant(&self) -> ModelVariant {
        self.models.variant
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.config.epochs
    }

    /// One pass over `train` in a seeded order, every sample freshly
    /// augmented and cut into its patch grid.
    pub fn run_epoch(&mut self, train: &[&TrainingSample]) -> Result<EpochMetrics> {
        if let Some(s) = train.iter().find(|s| s.fold == self.fold) {
            return Err(invalid(alloc::format!(
                "validation subject {} offered for training on fold {}",
                s.subject,
                self.fold
            )));
        }
        let epoch = self.epochs_done;
        let cfg = self.config.clone();
        let omega = losses::omega_schedule(epoch, cfg.epochs);
        let keys = [self.fold as u64, epoch as u64];
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[keys[0], keys[1], u64::MAX])));
        let (mut l_d, mut l_g, mut l1, mut l_e, mut ratio) =
            (Mean::default(), Mean::default(), Mean::default(), Mean::default(), Mean::default());
        let mut subjects = Vec::with_capacity(order.len());
        let mut steps = 0;
        let roi = self.models.spec.t0_roi_channel;
        for (pos, &i) in order.iter().enumerate() {
            let sample = train[i];
            let sample = if cfg.augment {
                augment(sample, derive_seed(cfg.seed, &[keys[0], keys[1], pos as u64]))?
            } else {
                sample.clone()
            };
            subjects.push(sample.subject.clone());
            for (k, patch) in sample_patches(&sample, cfg.patch, roi)?.iter().enumerate() {
                let m = self.models.train_step(&cfg, patch, omega).map_err(|e| match e {
                    Error::NonFinite { op } => Error::Diverged {
                        term: op,
                        epoch: epoch + 1,
                        subject: sample.subject.clone(),
                        patch: k,
                    },
                    other => other,
                })?;
                l_d.push(m.l_d);
                l_g.push(m.l_g_adv);
                l1.push(Some(m.l1));
                l_e.push(m.l_e);
                ratio.push(m.attention.map(|a| a.ratio).filter(|r| r.is_finite()));
                steps += 1;
            }
        }
        self.epochs_done += 1;
        Ok(EpochMetrics {
            epoch: epoch + 1,
            l_d: l_d.get(),
            l_g_adv: l_g.get(),
            l1: l1.get().unwrap_or(0.0),
            l_e: l_e.get(),
            omega,
            steps,
            attention_ratio: ratio.get(),
            subjects,
        })
    }
}
