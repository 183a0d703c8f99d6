//! Parameterized layers.
//!
//! Parameters live in a [`ParamStore`] owned by the model. A forward pass
//! binds the store onto a [`Graph`] (as leaves when training, constants
//! otherwise) and layers look their tensors up through the resulting
//! [`Bound`] table.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::kernels::ConvGeometry;
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named parameter tensors of one model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(invalid(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on `g`, as gradient leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Replaces all values, checking names and shapes against the current
    /// layout.
    pub fn load(&mut self, params: Vec<Param>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(invalid(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                params.len()
            )));
        }
        for (slot, p) in self.params.iter_mut().zip(params) {
            if slot.name != p.name {
                return Err(invalid(format!("expected parameter {}, found {}", slot.name, p.name)));
            }
            p.value.expect_shape(slot.value.shape(), "load parameters")?;
            slot.value = p.value;
        }
        Ok(())
    }
}

/// Graph variables of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Routes parameter `id` to another variable of the same graph.
    pub fn substitute(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = v;
    }

    /// Per-parameter gradients in store order; parameters the loss did not
    /// reach get zeros.
    pub fn gradients(&self, store: &ParamStore, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.iter())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        standard_normal(&mut self.rng)
    }

    /// Zero-mean normal with variance `2 / fan_in`.
    pub fn fan_in_normal(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = math::sqrt(2.0 / fan_in as f64);
        Tensor::from_fn(shape, |_| std * standard_normal(&mut self.rng))
    }
}

/// Box–Muller draw from N(0, 1).
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        geom: ConvGeometry,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in * k * k * k;
        let kernel = store.add(
            format!("{name}.kernel"),
            init.fan_in_normal(&[c_out, c_in, k, k, k], fan_in),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?)
        } else {
            None
        };
        Ok(Self { kernel, bias, geom })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv3d(x, p.var(self.kernel), self.geom)?;
        match self.bias {
            Some(b) => g.bias_add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-sample, per-channel normalization with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            scale: store.add(format!("{name}.scale"), Tensor::ones(&[channels]))?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[channels]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.instance_norm(x, p.var(self.scale), p.var(self.shift), NORM_EPS)
    }
}

/// Fully connected layer on a vector.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                init.fan_in_normal(&[outputs, inputs], inputs),
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]))?,
            inputs,
            outputs,
        })
    }

    /// `[inputs] -> [outputs]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let col = g.reshape(x, &[self.inputs, 1])?;
        let y = g.matmul(p.var(self.weight), col)?;
        let y = g.reshape(y, &[self.outputs])?;
        g.add(y, p.var(self.bias))
    }
}

/// Shape parameters of a self-attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfAttentionSpec {
    pub channels: usize,
    /// Query/key channels are `channels / reduction`.
    pub reduction: usize,
    /// Keys and values are max-pooled by this factor per axis before the
    /// similarity product; 1 attends over every position.
    pub kv_pool: usize,
}

/// Gated non-local self-attention: `γ · attend(x) + x`, with `γ` starting
/// at zero so a fresh block is the identity.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub spec: SelfAttentionSpec,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub gamma: ParamId,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        spec: SelfAttentionSpec,
    ) -> Result<Self> {
        let c = spec.channels;
        if spec.reduction == 0 || c % spec.reduction != 0 || c / spec.reduction == 0 {
            return Err(invalid(format!(
                "self-attention: {c} channels not divisible by reduction {}",
                spec.reduction
            )));
        }
        if spec.kv_pool == 0 {
            return Err(invalid("self-attention: kv_pool must be >= 1"));
        }
        let cq = c / spec.reduction;
        Ok(Self {
            spec,
            query: store.add(format!("{name}.query"), init.fan_in_normal(&[cq, c, 1, 1, 1], c))?,
            key: store.add(format!("{name}.key"), init.fan_in_normal(&[cq, c, 1, 1, 1], c))?,
            value: store.add(format!("{name}.value"), init.fan_in_normal(&[c, c, 1, 1, 1], c))?,
            gamma: store.add(format!("{name}.gamma"), Tensor::scalar(0.0))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let [c, d, h, w] = g.value(x).dims4("self_attention")?;
        if c != self.spec.channels {
            return Err(Error::ShapeMismatch {
                op: "self_attention",
                expected: alloc::vec![self.spec.channels, d, h, w],
                found: g.shape(x).to_vec(),
            });
        }
        let n = d * h * w;
        let cq = c / self.spec.reduction;
        let pooled = if self.spec.kv_pool > 1 {
            g.max_pool(x, self.spec.kv_pool)?
        } else {
            x
        };
        let m = g.value(pooled).numel() / c;
        let q = g.conv3d(x, p.var(self.query), ConvGeometry::UNIT)?;
        let q = g.reshape(q, &[cq, n])?;
        let k = g.conv3d(pooled, p.var(self.key), ConvGeometry::UNIT)?;
        let k = g.reshape(k, &[cq, m])?;
        let v = g.conv3d(pooled, p.var(self.value), ConvGeometry::UNIT)?;
        let v = g.reshape(v, &[c, m])?;
        let o = g.attention(q, k, v)?;
        let o = g.reshape(o, &[c, d, h, w])?;
        let gated = g.mul(o, p.var(self.gamma))?;
        g.add(gated, x)
    }
}

/// Factor-2 spatial reduction used by encoders.
#[derive(Debug, Clone)]
pub enum Downsample {
    MaxPool,
    StridedConv(Conv3d),
}

impl Downsample {
    pub fn strided_conv(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self::StridedConv(Conv3d::new(
            store,
            init,
            name,
            channels,
            channels,
            2,
            ConvGeometry::strided(2, 0),
            true,
        )?))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Self::MaxPool => g.max_pool(x, 2),
            Self::StridedConv(conv) => {
                let dims = g.value(x).dims4("downsample")?;
                if dims[1..].iter().any(|e| e % 2 != 0) {
                    return Err(Error::Domain {
                        op: "downsample",
                        detail: format!("odd extents {:?}", &dims[1..]),
                    });
                }
                conv.forward(g, p, x)
            }
        }
    }
}
