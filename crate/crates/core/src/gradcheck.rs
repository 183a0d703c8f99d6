//! Central finite-difference verification of reverse-mode gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::tensor::Tensor;

/// Denominator floor for relative errors.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval(f: &impl Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    g.value(out).item()
}

/// Compares `backward` against `(f(x + εe) − f(x − εe)) / 2ε` for every
/// coordinate of `at`. `f` must build a scalar from its input variable.
pub fn finite_difference_check(
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
    at: &Tensor,
    eps: f64,
) -> Result<GradCheck> {
    if !(eps > 0.0) {
        return Err(crate::error::invalid("finite difference step must be positive"));
    }
    let mut g = Graph::new();
    let x = g.leaf(at.clone());
    let out = f(&mut g, x)?;
    let mut grads = g.backward(out)?;
    let analytic = grads
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(at.shape()))
        .into_data();

    let mut numeric = Vec::with_capacity(at.numel());
    let mut probe = at.clone();
    for i in 0..at.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * eps));
    }

    let mut max_relative_error = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        if !a.is_finite() || !n.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference_check" });
        }
        let denom = math::abs(a).max(math::abs(n)).max(REL_FLOOR);
        let rel = math::abs(a - n) / denom;
        if rel > max_relative_error {
            max_relative_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheck {
        max_relative_error,
        worst_index,
        analytic,
        numeric,
    })
}

/// Step used by the operation suite.
pub const SUITE_EPS: f64 = 1e-5;
/// Largest relative error the suite accepts.
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Random evaluation points per operation.
pub const SUITE_POINTS: usize = 10;

/// Worst relative error of one operation over all suite points.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_relative_error: f64,
    pub points: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= SUITE_TOLERANCE
    }
}

mod suite {
    use alloc::boxed::Box;
    use alloc::vec;
    use alloc::vec::Vec;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{finite_difference_check, SuiteResult, SUITE_EPS, SUITE_POINTS};
    use crate::attention;
    use crate::error::Result;
    use crate::graph::{Activation, Graph, Var};
    use crate::kernels::ConvGeometry;
    use crate::losses::{self, RegionWeights};
    use crate::nn::{Init, ParamStore, SelfAttention, SelfAttentionSpec};
    use crate::tensor::Tensor;

    type Rng8 = ChaCha8Rng;
    type Build = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

    pub(super) struct Case {
        pub name: &'static str,
        shape: Vec<usize>,
        range: (f64, f64),
        /// Draws the fixed operands of one point and returns the function.
        make: Box<dyn Fn(&mut Rng8) -> Build>,
    }

    fn uniform(rng: &mut Rng8, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    fn case(
        name: &'static str,
        shape: &[usize],
        make: impl Fn(&mut Rng8) -> Build + 'static,
    ) -> Case {
        Case {
            name,
            shape: shape.to_vec(),
            range: (-1.0, 1.0),
            make: Box::new(make),
        }
    }

    fn positive(mut c: Case) -> Case {
        c.range = (0.5, 2.0);
        c
    }

    /// Same-shape operand fixed for the point.
    fn with_operand(
        name: &'static str,
        shape: &[usize],
        lo: f64,
        hi: f64,
        op: fn(&mut Graph, Var, Var) -> Result<Var>,
    ) -> Case {
        let s = shape.to_vec();
        case(name, shape, move |rng| {
            let b = uniform(rng, &s, lo, hi);
            Box::new(move |g, x| {
                let bv = g.constant(b.clone());
                op(g, x, bv)
            })
        })
    }

    fn unary(name: &'static str, shape: &[usize], op: fn(&mut Graph, Var) -> Result<Var>) -> Case {
        case(name, shape, move |_| Box::new(move |g, x| op(g, x)))
    }

    fn conv_case(name: &'static str, geom: ConvGeometry, k: usize, wrt_kernel: bool) -> Case {
        let (input, kernel) = (vec![2, 6, 6, 6], vec![2, 2, k, k, k]);
        let shape = if wrt_kernel { kernel.clone() } else { input.clone() };
        case(name, &shape, move |rng| {
            let other = if wrt_kernel {
                uniform(rng, &input, -1.0, 1.0)
            } else {
                uniform(rng, &kernel, -1.0, 1.0)
            };
            Box::new(move |g, x| {
                let o = g.constant(other.clone());
                if wrt_kernel {
                    g.conv3d(o, x, geom)
                } else {
                    g.conv3d(x, o, geom)
                }
            })
        })
    }

    fn self_attention(wrt_gamma: bool, kv_pool: usize) -> Case {
        let name = match (wrt_gamma, kv_pool) {
            (true, _) => "self_attention (gamma)",
            (false, 1) => "self_attention (input)",
            _ => "self_attention (input, pooled keys)",
        };
        let x_shape = [2, 4, 4, 4];
        let shape: &[usize] = if wrt_gamma { &[] } else { &x_shape };
        case(name, shape, move |rng| {
            let mut store = ParamStore::new();
            let mut init = Init::new(rng.random());
            let spec = SelfAttentionSpec {
                channels: 2,
                reduction: 2,
                kv_pool,
            };
            let sa = SelfAttention::new(&mut store, &mut init, "sa", spec).expect("valid spec");
            *store.get_mut(sa.gamma) = Tensor::scalar(rng.random_range(0.3..1.0));
            let x = uniform(rng, &x_shape, -1.0, 1.0);
            Box::new(move |g, v| {
                let mut p = store.bind(g, false);
                let input = if wrt_gamma {
                    p.substitute(sa.gamma, v);
                    g.constant(x.clone())
                } else {
                    v
                };
                sa.forward(g, &p, input)
            })
        })
    }

    fn mask(rng: &mut Rng8, shape: &[usize], p: f64) -> Tensor {
        Tensor::from_fn(shape, |_| f64::from(u8::from(rng.random_bool(p))))
    }

    pub(super) fn cases() -> Vec<Case> {
        let v = [2usize, 3, 4];
        vec![
            with_operand("add", &v, -1.0, 1.0, Graph::add),
            with_operand("sub", &v, -1.0, 1.0, Graph::sub),
            with_operand("mul", &v, -1.0, 1.0, Graph::mul),
            with_operand("div (numerator)", &v, 0.5, 1.5, Graph::div),
            positive(with_operand("div (denominator)", &v, -1.0, 1.0, |g, x, b| g.div(b, x))),
            unary("add_scalar", &v, |g, x| g.add_scalar(x, 0.7)),
            unary("mul_scalar", &v, |g, x| g.mul_scalar(x, -1.3)),
            unary("neg", &v, Graph::neg),
            unary("abs", &v, Graph::abs),
            unary("square", &v, Graph::square),
            positive(unary("log", &v, Graph::log)),
            unary("exp", &v, Graph::exp),
            unary("softplus", &v, Graph::softplus),
            unary("relu", &v, Graph::relu),
            unary("leaky_relu", &v, |g, x| g.leaky_relu(x, 0.2)),
            unary("tanh", &v, Graph::tanh),
            unary("sigmoid", &v, Graph::sigmoid),
            unary("activation (leaky)", &v, |g, x| g.activation(x, Activation::LeakyRelu(0.1))),
            unary("softmax (axis 1)", &v, |g, x| g.softmax(x, 1)),
            unary("softmax (axis 2)", &v, |g, x| g.softmax(x, 2)),
            unary("sum", &v, Graph::sum),
            unary("mean", &v, Graph::mean),
            unary("max", &v, Graph::max),
            unary("min", &v, Graph::min),
            unary("reshape", &v, |g, x| g.reshape(x, &[6, 4])),
            unary("transpose", &[3, 5], Graph::transpose),
            case("matmul (left)", &[3, 4], |rng| {
                let b = uniform(rng, &[4, 5], -1.0, 1.0);
                Box::new(move |g, x| {
                    let bv = g.constant(b.clone());
                    g.matmul(x, bv)
                })
            }),
            case("matmul (right)", &[4, 5], |rng| {
                let a = uniform(rng, &[3, 4], -1.0, 1.0);
                Box::new(move |g, x| {
                    let av = g.constant(a.clone());
                    g.matmul(av, x)
                })
            }),
            case("attention (query)", &[2, 7], |rng| attention_op(rng, 0)),
            case("attention (key)", &[2, 5], |rng| attention_op(rng, 1)),
            case("attention (value)", &[3, 5], |rng| attention_op(rng, 2)),
            conv_case("conv3d (input, dilation 1)", ConvGeometry::same(3, 1), 3, false),
            conv_case("conv3d (kernel, dilation 1)", ConvGeometry::same(3, 1), 3, true),
            conv_case("conv3d (input, dilation 2)", ConvGeometry::same(3, 2), 3, false),
            conv_case("conv3d (kernel, dilation 2)", ConvGeometry::same(3, 2), 3, true),
            conv_case("conv3d (input, dilation 4)", ConvGeometry::same(3, 4), 3, false),
            conv_case("conv3d (kernel, dilation 4)", ConvGeometry::same(3, 4), 3, true),
            conv_case("conv3d (input, stride 2)", ConvGeometry::strided(2, 1), 4, false),
            conv_case("conv3d (kernel, stride 2)", ConvGeometry::strided(2, 1), 4, true),
            conv_case("conv3d (input, pointwise)", ConvGeometry::UNIT, 1, false),
            case("bias_add", &[3], |rng| {
                let x = uniform(rng, &[3, 2, 2, 2], -1.0, 1.0);
                Box::new(move |g, b| {
                    let xv = g.constant(x.clone());
                    g.bias_add(xv, b)
                })
            }),
            instance_norm(0),
            instance_norm(1),
            instance_norm(2),
            unary("global_avg_pool", &[3, 2, 3, 2], Graph::global_avg_pool),
            unary("max_pool", &[2, 4, 4, 4], |g, x| g.max_pool(x, 2)),
            unary("upsample_trilinear", &[2, 3, 2, 3], |g, x| g.upsample_trilinear(x, [5, 4, 7])),
            unary("upsample_nearest", &[2, 2, 2, 2], |g, x| g.upsample_nearest(x, 2)),
            case("concat", &[2, 2, 2, 2], |rng| {
                let other = uniform(rng, &[1, 2, 2, 2], -1.0, 1.0);
                Box::new(move |g, x| {
                    let o = g.constant(other.clone());
                    g.concat(&[o, x])
                })
            }),
            unary("slice_channels", &[4, 2, 2, 2], |g, x| g.slice_channels(x, 1, 2)),
            self_attention(false, 1),
            self_attention(false, 2),
            self_attention(true, 1),
            case("l1", &[1, 4, 4, 4], |rng| {
                let y = uniform(rng, &[1, 4, 4, 4], -1.0, 1.0);
                Box::new(move |g, x| {
                    let yv = g.constant(y.clone());
                    losses::l1_loss(g, yv, x)
                })
            }),
            case("weighted_l1", &[1, 4, 4, 4], |rng| {
                let y = uniform(rng, &[1, 4, 4, 4], -1.0, 1.0);
                let lesion = mask(rng, &[4, 4, 4], 0.2);
                let wm = mask(rng, &[4, 4, 4], 0.4);
                let rw = RegionWeights::new(&lesion, &wm).expect("binary masks");
                Box::new(move |g, x| {
                    let yv = g.constant(y.clone());
                    losses::weighted_l1(g, yv, x, &rw)
                })
            }),
            case("discriminator_loss", &[2], |_| {
                Box::new(|g, s| {
                    let real = g.slice_channels(s, 0, 1)?;
                    let fake = g.slice_channels(s, 1, 1)?;
                    let real = g.reshape(real, &[])?;
                    let fake = g.reshape(fake, &[])?;
                    losses::discriminator_loss(g, real, fake, 0.9)
                })
            }),
            unary("generator_adversarial_loss", &[], losses::generator_adversarial_loss),
            case("attention supervision (L_e)", &[3, 4, 4, 4], |rng| {
                let w = attention::GradCamWeights((0..3).map(|_| rng.random_range(0.2..1.0)).collect());
                let lesion = mask(rng, &[6, 6, 6], 0.3);
                Box::new(move |g, tap| {
                    let map = attention::gradcam_map(g, tap, &w)?;
                    attention::attention_supervision_loss(g, map, &lesion)
                })
            }),
        ]
    }

    fn attention_op(rng: &mut Rng8, which: usize) -> Build {
        let q = uniform(rng, &[2, 7], -1.0, 1.0);
        let k = uniform(rng, &[2, 5], -1.0, 1.0);
        let v = uniform(rng, &[3, 5], -1.0, 1.0);
        Box::new(move |g, x| {
            let mut ops = [q.clone(), k.clone(), v.clone()].map(|t| g.constant(t));
            ops[which] = x;
            g.attention(ops[0], ops[1], ops[2])
        })
    }

    fn instance_norm(which: usize) -> Case {
        let name = ["instance_norm (input)", "instance_norm (scale)", "instance_norm (shift)"][which];
        let (xs, cs) = ([2usize, 3, 2, 3], [2usize]);
        let shape: &[usize] = if which == 0 { &xs } else { &cs };
        case(name, shape, move |rng| {
            let ops = [
                uniform(rng, &xs, -1.0, 1.0),
                uniform(rng, &cs, 0.5, 1.5),
                uniform(rng, &cs, -0.5, 0.5),
            ];
            Box::new(move |g, v| {
                let mut vars = ops.clone().map(|t| g.constant(t));
                vars[which] = v;
                g.instance_norm(vars[0], vars[1], vars[2], 1e-5)
            })
        })
    }

    /// Worst relative error of `case` over the suite points; each point
    /// projects the output on fixed random weights to get a scalar.
    pub(super) fn run(case: &Case, rng: &mut Rng8) -> Result<SuiteResult> {
        let mut worst: f64 = 0.0;
        for _ in 0..SUITE_POINTS {
            let at = uniform(rng, &case.shape, case.range.0, case.range.1);
            let f = (case.make)(rng);
            let out_shape = {
                let mut g = Graph::new();
                let x = g.constant(at.clone());
                let y = f(&mut g, x)?;
                g.shape(y).to_vec()
            };
            let proj = uniform(rng, &out_shape, 0.5, 1.5);
            let check = finite_difference_check(
                |g, x| {
                    let y = f(g, x)?;
                    let w = g.constant(proj.clone());
                    let wy = g.mul(w, y)?;
                    g.sum(wy)
                },
                &at,
                SUITE_EPS,
            )?;
            worst = worst.max(check.max_relative_error);
        }
        Ok(SuiteResult {
            name: case.name,
            max_relative_error: worst,
            points: SUITE_POINTS,
        })
    }

    pub(super) fn rng(seed: u64) -> Rng8 {
        Rng8::seed_from_u64(seed)
    }
}

/// Names of the operations covered by [`run_suite`].
pub fn suite_names() -> Vec<&'static str> {
    suite::cases().iter().map(|c| c.name).collect()
}

/// Finite-difference check of every differentiable operation at
/// [`SUITE_POINTS`] random points each.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = suite::rng(seed);
    suite::cases().iter().map(|c| suite::run(c, &mut rng)).collect()
}
