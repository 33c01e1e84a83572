//! Gated convolution with spectrally normalized weights.
//!
//! ```text
//! gating  = sigmoid(SN(conv_g(input)))
//! feature = phi(SN(conv_f(input)))
//! output  = feature ⊙ gating
//! ```
//!
//! Only weight tensors are normalized; biases are added after the
//! normalized convolution. Spectral-norm vectors are treated as constants
//! during differentiation.

use rand::Rng;

use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower bound on the spectral-norm divisor.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    LeakyRelu,
    Identity,
}

impl Activation {
    pub const LEAKY_SLOPE: f64 = 0.2;

    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::LeakyRelu => g.leaky_relu(x, T::lit(Self::LEAKY_SLOPE)),
            Activation::Identity => x,
        }
    }
}

/// Persistent left/right singular-vector estimates for one weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

fn normalize<T: Scalar>(x: &mut [T]) {
    let n = x.iter().map(|&a| a * a).sum::<T>().sqrt().max(T::lit(SIGMA_FLOOR));
    for a in x {
        *a /= n;
    }
}

impl<T: Scalar> SpectralState<T> {
    /// Random unit vectors for a weight tensor of the given shape.
    pub fn random<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        let mut u: Vec<T> = (0..rows).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
        let mut v: Vec<T> = (0..cols).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
        normalize(&mut u);
        normalize(&mut v);
        Self { u, v }
    }

    /// Runs `iterations` power-iteration steps on the `Cout × (Cin·k·k)`
    /// matricization of `weights`.
    pub fn iterate(&mut self, weights: &Tensor<T>, iterations: usize) {
        let rows = weights.shape()[0];
        let cols = weights.len() / rows;
        let w = weights.data();
        for _ in 0..iterations {
            let mut v = vec![T::zero(); cols];
            for (r, row) in w.chunks(cols).enumerate() {
                let ur = self.u[r];
                for (vc, &x) in v.iter_mut().zip(row) {
                    *vc += ur * x;
                }
            }
            normalize(&mut v);
            let mut u: Vec<T> = w
                .chunks(cols)
                .map(|row| row.iter().zip(&v).map(|(&a, &b)| a * b).sum())
                .collect();
            normalize(&mut u);
            self.u = u;
            self.v = v;
        }
    }

    /// `uᵀ W v`, the current largest-singular-value estimate.
    pub fn sigma(&self, weights: &Tensor<T>) -> T {
        let cols = self.v.len();
        weights
            .data()
            .chunks(cols)
            .zip(&self.u)
            .map(|(row, &ur)| ur * row.iter().zip(&self.v).map(|(&a, &b)| a * b).sum::<T>())
            .sum()
    }
}

/// Divides `weights` by the power-iteration estimate of its largest singular
/// value after advancing `state` by `iterations` steps.
///
/// An all-zero tensor is returned unchanged because the divisor is clamped
/// at [`SIGMA_FLOOR`].
pub fn spectral_normalize<T: Scalar>(
    weights: &Tensor<T>,
    iterations: usize,
    state: &mut SpectralState<T>,
) -> Result<Tensor<T>> {
    if !weights.all_finite() {
        return Err(Error::Range {
            context: "spectral_normalize weights must be finite".into(),
            value: f64::NAN,
            min: f64::NEG_INFINITY,
            max: f64::INFINITY,
        });
    }
    if iterations == 0 {
        return Err(Error::Config("spectral normalization needs at least one iteration".into()));
    }
    let rows = weights.shape()[0];
    if state.u.len() != rows || state.v.len() * rows != weights.len() {
        return Err(Error::Shape {
            context: "spectral state".into(),
            expected: format!("u of {rows}, v of {}", weights.len() / rows.max(1)),
            actual: format!("u of {}, v of {}", state.u.len(), state.v.len()),
        });
    }
    state.iterate(weights, iterations);
    let sigma = state.sigma(weights).max(T::lit(SIGMA_FLOOR));
    Ok(weights.map(|x| x / sigma))
}

/// Graph vars of the tensors making up one gated convolution.
#[derive(Clone, Copy, Debug)]
pub struct GatedVars {
    pub feature_weights: Var,
    pub feature_bias: Var,
    pub gate_weights: Var,
    pub gate_bias: Var,
}

/// Intermediate tensors of one gated convolution.
#[derive(Clone, Copy, Debug)]
pub struct GatedNodes {
    pub output: Var,
    pub feature: Var,
    pub gating: Var,
}

/// Records one gated convolution on `g` with fixed spectral states.
pub fn gated_conv_graph<T: Scalar>(
    g: &mut Graph<T>,
    input: Var,
    vars: GatedVars,
    feature_sn: &SpectralState<T>,
    gate_sn: &SpectralState<T>,
    geom: ConvGeom,
    activation: Activation,
) -> GatedNodes {
    let wf = g.spectral_norm(vars.feature_weights, feature_sn.u.clone(), feature_sn.v.clone());
    let f = g.conv2d(input, wf, Some(vars.feature_bias), geom);
    let feature = activation.apply(g, f);
    let wg = g.spectral_norm(vars.gate_weights, gate_sn.u.clone(), gate_sn.v.clone());
    let gl = g.conv2d(input, wg, Some(vars.gate_bias), geom);
    let gating = g.sigmoid(gl);
    let output = g.mul(feature, gating);
    GatedNodes {
        output,
        feature,
        gating,
    }
}

/// Weights, biases and geometry of a standalone gated convolution.
#[derive(Clone, Debug)]
pub struct GatedConvParams<T> {
    /// `[Cout, Cin, k, k]`
    pub feature_weights: Tensor<T>,
    pub gate_weights: Tensor<T>,
    pub feature_bias: Tensor<T>,
    pub gate_bias: Tensor<T>,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub activation: Activation,
}

impl<T: Scalar> GatedConvParams<T> {
    pub fn in_channels(&self) -> usize {
        self.feature_weights.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.feature_weights.shape()[0]
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::same(self.kernel, self.stride, self.dilation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::Config("stride and dilation must be positive".into()));
        }
        let want = [self.out_channels(), self.in_channels(), self.kernel, self.kernel];
        for (name, t) in [("feature_weights", &self.feature_weights), ("gate_weights", &self.gate_weights)] {
            if t.shape() != want {
                return Err(Error::Shape {
                    context: name.into(),
                    expected: format!("{want:?}"),
                    actual: format!("{:?}", t.shape()),
                });
            }
            if !t.all_finite() {
                return Err(Error::Config(format!("{name} contains non-finite values")));
            }
        }
        for (name, t) in [("feature_bias", &self.feature_bias), ("gate_bias", &self.gate_bias)] {
            if t.shape() != [self.out_channels()] {
                return Err(Error::Shape {
                    context: name.into(),
                    expected: format!("[{}]", self.out_channels()),
                    actual: format!("{:?}", t.shape()),
                });
            }
        }
        Ok(())
    }
}

/// Output of [`GatedConvLayer::forward`].
#[derive(Clone, Debug)]
pub struct GatedForward<T> {
    pub output: Tensor<T>,
    pub feature: Tensor<T>,
    pub gating: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct GatedConvGrads<T> {
    pub input: Tensor<T>,
    pub feature_weights: Tensor<T>,
    pub gate_weights: Tensor<T>,
    pub feature_bias: Tensor<T>,
    pub gate_bias: Tensor<T>,
}

struct ForwardCache<T> {
    graph: Graph<T>,
    input: Var,
    vars: GatedVars,
    output: Var,
}

/// A self-contained gated convolution layer with explicit forward/backward.
///
/// The spectral-norm state is mutated by every forward call, so a layer must
/// not be shared between concurrent forwards.
pub struct GatedConvLayer<T> {
    pub params: GatedConvParams<T>,
    pub feature_sn: SpectralState<T>,
    pub gate_sn: SpectralState<T>,
    /// Power-iteration steps per forward pass.
    pub sn_iterations: usize,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> GatedConvLayer<T> {
    pub fn new<R: Rng>(params: GatedConvParams<T>, rng: &mut R) -> Result<Self> {
        params.validate()?;
        let feature_sn = SpectralState::random(params.feature_weights.shape(), rng);
        let gate_sn = SpectralState::random(params.gate_weights.shape(), rng);
        Ok(Self {
            params,
            feature_sn,
            gate_sn,
            sn_iterations: 1,
            cache: None,
        })
    }

    /// Advances both spectral states, then evaluates the layer. With
    /// `cache = true` the intermediate graph is kept for [`Self::backward`].
    pub fn forward(&mut self, input: &Tensor<T>, cache: bool) -> Result<GatedForward<T>> {
        if input.shape().len() != 4 {
            return Err(Error::Shape {
                context: "gated_conv_forward input".into(),
                expected: "rank-4 [N, C, H, W]".into(),
                actual: format!("{:?}", input.shape()),
            });
        }
        let cin = self.params.in_channels();
        if input.shape()[1] != cin {
            return Err(Error::Shape {
                context: "gated_conv_forward input channels".into(),
                expected: cin.to_string(),
                actual: input.shape()[1].to_string(),
            });
        }
        if self.sn_iterations > 0 {
            self.feature_sn.iterate(&self.params.feature_weights, self.sn_iterations);
            self.gate_sn.iterate(&self.params.gate_weights, self.sn_iterations);
        }
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let vars = GatedVars {
            feature_weights: g.leaf(self.params.feature_weights.clone()),
            feature_bias: g.leaf(self.params.feature_bias.clone()),
            gate_weights: g.leaf(self.params.gate_weights.clone()),
            gate_bias: g.leaf(self.params.gate_bias.clone()),
        };
        let nodes = gated_conv_graph(
            &mut g,
            x,
            vars,
            &self.feature_sn,
            &self.gate_sn,
            self.params.geom(),
            self.params.activation,
        );
        let out = GatedForward {
            output: g.value(nodes.output).clone(),
            feature: g.value(nodes.feature).clone(),
            gating: g.value(nodes.gating).clone(),
        };
        self.cache = cache.then_some(ForwardCache {
            graph: g,
            input: x,
            vars,
            output: nodes.output,
        });
        Ok(out)
    }

    /// Gradients of `Σ upstream ⊙ output` for the most recent cached forward.
    /// The cache is consumed.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<GatedConvGrads<T>> {
        let Some(mut c) = self.cache.take() else {
            return Err(Error::Usage("backward called without a cached forward pass".into()));
        };
        if upstream.shape() != c.graph.value(c.output).shape() {
            return Err(Error::Shape {
                context: "gated_conv_backward upstream".into(),
                expected: format!("{:?}", c.graph.value(c.output).shape()),
                actual: format!("{:?}", upstream.shape()),
            });
        }
        let weighted = c.graph.mul_const(c.output, upstream.clone());
        let root = c.graph.sum(weighted);
        let grads = c.graph.backward(root);
        let get = |v: Var, like: &Tensor<T>| grads.of(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()));
        Ok(GatedConvGrads {
            input: get(c.input, c.graph.value(c.input)),
            feature_weights: get(c.vars.feature_weights, &self.params.feature_weights),
            gate_weights: get(c.vars.gate_weights, &self.params.gate_weights),
            feature_bias: get(c.vars.feature_bias, &self.params.feature_bias),
            gate_bias: get(c.vars.gate_bias, &self.params.gate_bias),
        })
    }
}
