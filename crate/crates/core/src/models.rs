//! Generators and discriminators of the four compared methods.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeometry;
use crate::nn::{
    Bound, Conv3d, Dense, Downsample, Init, InstanceNorm, ParamStore, SelfAttention,
    SelfAttentionSpec,
};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f64 = 0.2;

/// The four compared methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ModelVariant {
    Unet,
    Cgan,
    Cfsagan,
    Dgagan,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [Self::Unet, Self::Cgan, Self::Cfsagan, Self::Dgagan];

    pub fn name(self) -> &'static str {
        match self {
            Self::Unet => "unet",
            Self::Cgan => "cgan",
            Self::Cfsagan => "cfsagan",
            Self::Dgagan => "dgagan",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Unet => "3D UNet",
            Self::Cgan => "3D cGAN",
            Self::Cfsagan => "CF-SAGAN",
            Self::Dgagan => "DGAGAN",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }

    /// Loss stack and model composition of this method.
    pub fn spec(self) -> VariantSpec {
        match self {
            Self::Unet => VariantSpec {
                generator_attention: false,
                discriminator: None,
                l1: L1Kind::Plain,
                lambda_l1: 1.0,
                guided_attention: false,
                t0_roi_channel: true,
            },
            Self::Cgan => VariantSpec {
                generator_attention: false,
                discriminator: Some(DiscriminatorKind::Plain),
                l1: L1Kind::Plain,
                lambda_l1: 300.0,
                guided_attention: false,
                t0_roi_channel: true,
            },
            Self::Cfsagan => VariantSpec {
                generator_attention: true,
                discriminator: Some(DiscriminatorKind::Plain),
                l1: L1Kind::RegionWeighted,
                lambda_l1: 1800.0,
                guided_attention: false,
                t0_roi_channel: true,
            },
            Self::Dgagan => VariantSpec {
                generator_attention: true,
                discriminator: Some(DiscriminatorKind::GuidedDilated),
                l1: L1Kind::RegionWeighted,
                lambda_l1: 1800.0,
                guided_attention: true,
                t0_roi_channel: true,
            },
        }
    }
}

impl core::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum L1Kind {
    /// Mean absolute error.
    Plain,
    /// Per-patch region-weighted L1 over lesion / white matter / other.
    RegionWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum DiscriminatorKind {
    /// Strided convolution stack.
    Plain,
    /// Stride-1 dilated stack with self-attention before the Grad-CAM tap.
    GuidedDilated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantSpec {
    pub generator_attention: bool,
    pub discriminator: Option<DiscriminatorKind>,
    pub l1: L1Kind,
    /// Weight of the L1 term; for the U-Net it multiplies the only loss.
    pub lambda_l1: f64,
    /// Registers the attention supervision loss on the discriminator.
    pub guided_attention: bool,
    /// Appends the t0 lesion mask to the modality stack.
    pub t0_roi_channel: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GeneratorConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub convs_per_level: usize,
    /// Decoder levels (0 = full resolution) followed by self-attention.
    pub self_attention_levels: Vec<usize>,
    pub attention_reduction: usize,
    pub attention_kv_pool: usize,
}

impl GeneratorConfig {
    /// Desk-scale U-Net: 4 levels, single convolution per level.
    pub fn desk(in_channels: usize, base_channels: usize) -> Self {
        Self {
            levels: 4,
            base_channels,
            in_channels,
            convs_per_level: 1,
            self_attention_levels: Vec::new(),
            attention_reduction: 8,
            attention_kv_pool: 1,
        }
    }

    /// The same configuration with attention after the two coarsest decoder
    /// levels.
    pub fn with_attention(mut self) -> Self {
        let top = self.levels.saturating_sub(2);
        self.self_attention_levels = (top.saturating_sub(1)..=top).rev().collect();
        self.self_attention_levels.dedup();
        self
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Required divisor of every spatial extent.
    pub fn extent_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv3d,
    norm: Option<InstanceNorm>,
    slope: f64,
}

impl ConvBlock {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = self.conv.forward(g, p, x)?;
        if let Some(n) = &self.norm {
            h = n.forward(g, p, h)?;
        }
        if self.slope == 0.0 {
            g.relu(h)
        } else {
            g.leaky_relu(h, self.slope)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_block(
    store: &mut ParamStore,
    init: &mut Init,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    geom: ConvGeometry,
    norm: bool,
    slope: f64,
) -> Result<ConvBlock> {
    let conv = Conv3d::new(store, init, name, c_in, c_out, k, geom, !norm)?;
    let norm = if norm {
        Some(InstanceNorm::new(store, &format!("{name}.norm"), c_out)?)
    } else {
        None
    };
    Ok(ConvBlock { conv, norm, slope })
}

/// Encoder–decoder with skip connections and a tanh output.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    encoder: Vec<Vec<ConvBlock>>,
    decoder: Vec<Vec<ConvBlock>>,
    attention: Vec<Option<SelfAttention>>,
    downsample: Downsample,
    head: Conv3d,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        if config.levels < 1 || config.base_channels == 0 || config.convs_per_level == 0 {
            return Err(invalid("generator needs >= 1 level, channel and convolution"));
        }
        if let Some(&l) = config.self_attention_levels.iter().find(|&&l| l + 1 >= config.levels) {
            return Err(invalid(format!("no decoder level {l} in a {}-level generator", config.levels)));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let same = ConvGeometry::same(3, 1);
        let mut encoder = Vec::new();
        for level in 0..config.levels {
            let c_out = config.channels(level);
            let mut c_in = if level == 0 { config.in_channels } else { config.channels(level - 1) };
            let mut blocks = Vec::new();
            for i in 0..config.convs_per_level {
                let name = format!("enc{level}.{i}");
                blocks.push(conv_block(&mut params, &mut init, &name, c_in, c_out, 3, same, true, LEAKY_SLOPE)?);
                c_in = c_out;
            }
            encoder.push(blocks);
        }
        let mut decoder = Vec::new();
        let mut attention = Vec::new();
        for level in 0..config.levels.saturating_sub(1) {
            let c_out = config.channels(level);
            let mut c_in = config.channels(level + 1) + c_out;
            let mut blocks = Vec::new();
            for i in 0..config.convs_per_level {
                let name = format!("dec{level}.{i}");
                blocks.push(conv_block(&mut params, &mut init, &name, c_in, c_out, 3, same, true, 0.0)?);
                c_in = c_out;
            }
            decoder.push(blocks);
            attention.push(if config.self_attention_levels.contains(&level) {
                let spec = SelfAttentionSpec {
                    channels: c_out,
                    reduction: config.attention_reduction,
                    kv_pool: config.attention_kv_pool,
                };
                Some(SelfAttention::new(&mut params, &mut init, &format!("dec{level}.attn"), spec)?)
            } else {
                None
            });
        }
        let head = Conv3d::new(
            &mut params,
            &mut init,
            "head",
            config.channels(0),
            1,
            1,
            ConvGeometry::UNIT,
            true,
        )?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            attention,
            downsample: Downsample::MaxPool,
            head,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let div = self.config.extent_divisor();
        if shape.len() != 4 || shape[0] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "generator",
                expected: alloc::vec![self.config.in_channels, div, div, div],
                found: shape.to_vec(),
            });
        }
        if shape[1..].iter().any(|&e| e == 0 || e % div != 0) {
            return Err(invalid(format!(
                "generator: extents {:?} not divisible by {div}",
                &shape[1..]
            )));
        }
        Ok(())
    }

    /// `[C_in, D, H, W] -> [1, D, H, W]` in `[-1, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut h = x;
        for (level, blocks) in self.encoder.iter().enumerate() {
            if level > 0 {
                h = self.downsample.forward(g, p, h)?;
            }
            for b in blocks {
                h = b.forward(g, p, h)?;
            }
            skips.push(h);
        }
        for level in (0..self.decoder.len()).rev() {
            let up = g.upsample_nearest(h, 2)?;
            h = g.concat(&[up, skips[level]])?;
            for b in &self.decoder[level] {
                h = b.forward(g, p, h)?;
            }
            if let Some(attn) = &self.attention[level] {
                h = attn.forward(g, p, h)?;
            }
        }
        let out = self.head.forward(g, p, h)?;
        g.tanh(out)
    }

    /// Convenience inference pass on a plain tensor.
    pub fn predict(&self, x: &crate::Tensor) -> Result<crate::Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DiscriminatorConfig {
    pub kind: DiscriminatorKind,
    pub in_channels: usize,
    /// Output channels of each convolution block.
    pub channels: Vec<usize>,
    /// Dilation per block (guided discriminator only).
    pub dilations: Vec<usize>,
    /// Block whose activation is the Grad-CAM tap; self-attention runs
    /// immediately before it in the guided discriminator.
    pub tap_layer: usize,
    pub attention_reduction: usize,
    pub attention_kv_pool: usize,
    /// Instance-normalizes the tap block (guided discriminator only).
    pub tap_norm: bool,
}

impl DiscriminatorConfig {
    pub fn guided(in_channels: usize, channels: usize) -> Self {
        let dilations = alloc::vec![1, 1, 2, 4, 8];
        Self {
            kind: DiscriminatorKind::GuidedDilated,
            in_channels,
            channels: alloc::vec![channels; dilations.len()],
            tap_layer: dilations.len() - 1,
            dilations,
            attention_reduction: 8,
            attention_kv_pool: 1,
            tap_norm: false,
        }
    }

    /// Strided baseline with the same channel schedule.
    pub fn plain(in_channels: usize, channels: usize) -> Self {
        Self {
            kind: DiscriminatorKind::Plain,
            in_channels,
            channels: alloc::vec![channels; 5],
            dilations: alloc::vec![1; 5],
            tap_layer: 4,
            attention_reduction: 8,
            attention_kv_pool: 1,
            tap_norm: false,
        }
    }

    /// Analytic per-axis receptive field of the guided stack at the tap,
    /// ignoring self-attention: `1 + Σ dilation·(k − 1)`.
    pub fn tap_receptive_field(&self) -> usize {
        1 + self.dilations[..=self.tap_layer].iter().map(|d| d * 2).sum::<usize>()
    }
}

/// Number of stride-2 blocks in the plain discriminator.
const PLAIN_STRIDED: usize = 3;

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    blocks: Vec<ConvBlock>,
    attention: Option<SelfAttention>,
    dense: Dense,
}

/// Score and Grad-CAM tap of one discriminator pass.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorOutput {
    /// Pre-sigmoid realness logit, shape `[]`.
    pub score: Var,
    /// Activation of the tap layer, `[K, d, h, w]`.
    pub tap: Var,
}

/// Anything whose score is a function of a recorded tap activation.
pub trait ScoreHead {
    fn head_params(&self) -> &ParamStore;

    /// Maps the tap activation to the scalar score.
    fn head(&self, g: &mut Graph, p: &Bound, tap: Var) -> Result<Var>;
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        let n = config.channels.len();
        if n == 0 || config.tap_layer >= n || config.dilations.len() != n {
            return Err(invalid("discriminator: channel/dilation schedules and tap layer disagree"));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let mut blocks = Vec::with_capacity(n);
        let mut attention = None;
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.channels.iter().enumerate() {
            let name = format!("block{i}");
            let block = match config.kind {
                DiscriminatorKind::GuidedDilated => {
                    if i == config.tap_layer {
                        let spec = SelfAttentionSpec {
                            channels: c_in,
                            reduction: config.attention_reduction,
                            kv_pool: config.attention_kv_pool,
                        };
                        attention = Some(SelfAttention::new(&mut params, &mut init, "attn", spec)?);
                    }
                    let geom = ConvGeometry::same(3, config.dilations[i]);
                    // No normalization on the input block; the tap only on request.
                    let norm = i != 0 && (i != config.tap_layer || config.tap_norm);
                    conv_block(&mut params, &mut init, &name, c_in, c_out, 3, geom, norm, LEAKY_SLOPE)?
                }
                DiscriminatorKind::Plain => {
                    let (k, geom) = if i < PLAIN_STRIDED {
                        (4, ConvGeometry::strided(2, 1))
                    } else {
                        (3, ConvGeometry::same(3, 1))
                    };
                    let norm = i != 0 && i != config.tap_layer;
                    conv_block(&mut params, &mut init, &name, c_in, c_out, k, geom, norm, LEAKY_SLOPE)?
                }
            };
            blocks.push(block);
            c_in = c_out;
        }
        let dense = Dense::new(&mut params, &mut init, "dense", c_in, 1)?;
        Ok(Self {
            config,
            params,
            blocks,
            attention,
            dense,
        })
    }

    /// Runs the blocks up to and including the tap layer.
    pub fn tap_forward(&self, g: &mut Graph, p: &Bound, input: Var) -> Result<Var> {
        let c = g.value(input).dims4("discriminator")?[0];
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "discriminator",
                expected: alloc::vec![self.config.in_channels],
                found: alloc::vec![c],
            });
        }
        let mut h = input;
        for (i, b) in self.blocks[..=self.config.tap_layer].iter().enumerate() {
            if i == self.config.tap_layer {
                if let Some(attn) = &self.attention {
                    h = attn.forward(g, p, h)?;
                }
            }
            h = b.forward(g, p, h)?;
        }
        Ok(h)
    }

    /// Conditions on `x` by channel concatenation and scores `image`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, image: Var) -> Result<DiscriminatorOutput> {
        if g.shape(x)[1..] != g.shape(image)[1..] {
            return Err(Error::ShapeMismatch {
                op: "discriminator",
                expected: g.shape(x).to_vec(),
                found: g.shape(image).to_vec(),
            });
        }
        let input = g.concat(&[x, image])?;
        let tap = self.tap_forward(g, p, input)?;
        let score = self.head(g, p, tap)?;
        Ok(DiscriminatorOutput { score, tap })
    }
}

impl ScoreHead for Discriminator {
    fn head_params(&self) -> &ParamStore {
        &self.params
    }

    fn head(&self, g: &mut Graph, p: &Bound, tap: Var) -> Result<Var> {
        let mut h = tap;
        for b in &self.blocks[self.config.tap_layer + 1..] {
            h = b.forward(g, p, h)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let s = self.dense.forward(g, p, pooled)?;
        g.reshape(s, &[])
    }
}
