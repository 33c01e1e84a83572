//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation.

use std::collections::HashMap;

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::ssim::{ssim_grad_x, ssim_index, SsimParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    SpectralNorm {
        w: Var,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
        clamped: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    MulConst {
        x: Var,
        c: Tensor<T>,
    },
    SubConst(Var),
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Concat(Vec<Var>),
    Upsample2(Var),
    PadZero(Var),
    Crop(Var),
    ChannelNormalize {
        x: Var,
        eps: T,
    },
    Sum(Var),
    Ssim {
        x: Var,
        target: Tensor<T>,
        params: SsimParams,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every leaf and parameter node.
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    /// Parameter gradients in graph insertion order. Parameters the loss
    /// does not depend on are omitted.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.leaves.get(&v.0).map(|g| (*id, g)))
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts a trainable parameter; repeated calls with the same id reuse
    /// the node so gradients accumulate correctly.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { x, w, b, geom }, ng)
    }

    /// `w / (uᵀ W v)` with `u`, `v` held constant.
    ///
    /// The divisor is clamped below at `1e-12`, so an all-zero tensor passes
    /// through unchanged.
    pub fn spectral_norm(&mut self, w: Var, u: Vec<T>, v: Vec<T>) -> Var {
        let wt = self.value(w);
        let rows = wt.shape()[0];
        let cols = wt.len() / rows;
        let mut sigma = T::zero();
        for (r, row) in wt.data().chunks(cols).enumerate() {
            let dot: T = row.iter().zip(&v).map(|(&a, &b)| a * b).sum();
            sigma += u[r] * dot;
        }
        let floor = T::lit(1e-12);
        let clamped = sigma < floor;
        let sigma = sigma.max(floor);
        let out = wt.map(|x| x / sigma);
        let ng = self.ng(w);
        self.push(
            out,
            Op::SpectralNorm {
                w,
                u,
                v,
                sigma,
                clamped,
            },
            ng,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let ng = self.ng(x);
        self.push(out, Op::Affine { x, scale }, ng)
    }

    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Var {
        let out = self.value(x).zip_map(&c, |a, b| a * b);
        let ng = self.ng(x);
        self.push(out, Op::MulConst { x, c }, ng)
    }

    /// `x - c` for a constant tensor `c`.
    pub fn sub_const(&mut self, x: Var, c: &Tensor<T>) -> Var {
        let out = self.value(x).zip_map(c, |a, b| a - b);
        let ng = self.ng(x);
        self.push(out, Op::SubConst(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let ng = self.ng(x);
        self.push(out, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        let ng = self.ng(x);
        self.push(out, Op::Softplus(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        let ng = self.ng(x);
        self.push(out, Op::Abs(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let ng = self.ng(x);
        self.push(out, Op::Square(x), ng)
    }

    /// Channel-axis concatenation of NCHW tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let channels: Vec<usize> = xs.iter().map(|&v| self.value(v).dims4().1).collect();
        let ctot: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(n * ctot * h * w);
        for i in 0..n {
            for &v in xs {
                let t = self.value(v);
                assert_eq!(t.dims4().2, h, "concat height mismatch");
                assert_eq!(t.dims4().3, w, "concat width mismatch");
                data.extend_from_slice(t.image(i));
            }
        }
        let out = Tensor::from_vec(&[n, ctot, h, w], data).expect("concat shape");
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(out, Op::Concat(xs.to_vec()), ng)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[n, c, h2, w2]);
        let dst = out.data_mut();
        for p in 0..n * c {
            for y in 0..h2 {
                let srow = &src[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                let drow = &mut dst[(p * h2 + y) * w2..(p * h2 + y + 1) * w2];
                for (xo, d) in drow.iter_mut().enumerate() {
                    *d = srow[xo / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Upsample2(x), ng)
    }

    /// Zero-pads at the bottom and right up to `h×w`.
    pub fn pad_to(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (n, c, h0, w0) = self.value(x).dims4();
        if (h0, w0) == (h, w) {
            return x;
        }
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let src = self.value(x).data();
        for p in 0..n * c {
            for y in 0..h0 {
                out.data_mut()[(p * h + y) * w..(p * h + y) * w + w0]
                    .copy_from_slice(&src[(p * h0 + y) * w0..(p * h0 + y + 1) * w0]);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::PadZero(x), ng)
    }

    /// Keeps the top-left `h×w` window.
    pub fn crop_to(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (n, c, h0, w0) = self.value(x).dims4();
        if (h0, w0) == (h, w) {
            return x;
        }
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let src = self.value(x).data();
        for p in 0..n * c {
            for y in 0..h {
                out.data_mut()[(p * h + y) * w..(p * h + y + 1) * w]
                    .copy_from_slice(&src[(p * h0 + y) * w0..(p * h0 + y) * w0 + w]);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Crop(x), ng)
    }

    /// Rescales each pixel's channel vector to unit length:
    /// `x / sqrt(|x|² + eps)`.
    pub fn channel_normalize(&mut self, x: Var, eps: T) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let mut out = self.value(x).clone();
        let hw = h * w;
        for i in 0..n {
            let img = &mut out.data_mut()[i * c * hw..(i + 1) * c * hw];
            for p in 0..hw {
                let mut s = eps;
                for ch in 0..c {
                    s += img[ch * hw + p] * img[ch * hw + p];
                }
                let inv = T::one() / s.sqrt();
                for ch in 0..c {
                    img[ch * hw + p] *= inv;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::ChannelNormalize { x, eps }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// Mean over all `H×W` planes of the windowed SSIM index against a
    /// constant target.
    pub fn ssim(&mut self, x: Var, target: Tensor<T>, params: SsimParams) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(target.shape(), self.value(x).shape());
        let hw = h * w;
        let xv = self.value(x).data();
        let mut total = T::zero();
        for p in 0..n * c {
            total += ssim_index(&xv[p * hw..(p + 1) * hw], &target.data()[p * hw..(p + 1) * hw], h, w, params);
        }
        let out = Tensor::scalar(total / T::lit((n * c) as f64));
        let ng = self.ng(x);
        self.push(out, Op::Ssim { x, target, params }, ng)
    }

    /// Backpropagates from a single-element node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        let mut leaves = HashMap::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, t: Tensor<T>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf | Op::Param => {
                    leaves.insert(i, g);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let cg = conv2d_backward(self.value(*x), self.value(*w), &g, *geom, self.ng(*x));
                    if let Some(dx) = cg.input {
                        acc(*x, dx);
                    }
                    acc(*w, cg.weight);
                    if let Some(b) = b {
                        acc(*b, cg.bias);
                    }
                }
                Op::SpectralNorm {
                    w,
                    u,
                    v,
                    sigma,
                    clamped,
                } => {
                    let wt = self.value(*w);
                    let mut dw = g.map(|x| x / *sigma);
                    if !clamped {
                        let inner: T = g.data().iter().zip(wt.data()).map(|(&a, &b)| a * b).sum();
                        let coef = inner / (*sigma * *sigma);
                        let cols = v.len();
                        for (r, row) in dw.data_mut().chunks_mut(cols).enumerate() {
                            for (c, d) in row.iter_mut().enumerate() {
                                *d -= coef * u[r] * v[c];
                            }
                        }
                    }
                    acc(*w, dw);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Affine { x, scale } => acc(*x, g.map(|v| v * *scale)),
                Op::MulConst { x, c } => acc(*x, g.zip_map(c, |a, b| a * b)),
                Op::SubConst(x) => acc(*x, g),
                Op::LeakyRelu { x, slope } => {
                    acc(*x, g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { gv * *slope }))
                }
                Op::Sigmoid(x) => acc(*x, g.zip_map(&node.value, |gv, s| gv * s * (T::one() - s))),
                Op::Softplus(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| gv * sigmoid(xv))),
                Op::Abs(x) => acc(
                    *x,
                    g.zip_map(self.value(*x), |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    }),
                ),
                Op::Square(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| T::lit(2.0) * gv * xv)),
                Op::Concat(xs) => {
                    let (n, ctot, h, w) = g.dims4();
                    let hw = h * w;
                    let mut offset = 0;
                    for &v in xs {
                        let c = self.value(v).dims4().1;
                        if self.ng(v) {
                            let mut part = Vec::with_capacity(n * c * hw);
                            for i in 0..n {
                                let base = i * ctot * hw + offset * hw;
                                part.extend_from_slice(&g.data()[base..base + c * hw]);
                            }
                            acc(v, Tensor::from_vec(&[n, c, h, w], part).expect("concat grad"));
                        }
                        offset += c;
                    }
                }
                Op::Upsample2(x) => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let w2 = 2 * w;
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    let src = g.data();
                    for p in 0..n * c {
                        for y in 0..2 * h {
                            let srow = &src[(p * 2 * h + y) * w2..(p * 2 * h + y + 1) * w2];
                            let drow = &mut dx.data_mut()[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                            for (xo, &v) in srow.iter().enumerate() {
                                drow[xo / 2] += v;
                            }
                        }
                    }
                    acc(*x, dx);
                }
                Op::PadZero(x) => {
                    let (n, c, h0, w0) = self.value(*x).dims4();
                    let (_, _, h, w) = g.dims4();
                    let mut dx = Tensor::zeros(&[n, c, h0, w0]);
                    for p in 0..n * c {
                        for y in 0..h0 {
                            dx.data_mut()[(p * h0 + y) * w0..(p * h0 + y + 1) * w0]
                                .copy_from_slice(&g.data()[(p * h + y) * w..(p * h + y) * w + w0]);
                        }
                    }
                    acc(*x, dx);
                }
                Op::Crop(x) => {
                    let (n, c, h0, w0) = self.value(*x).dims4();
                    let (_, _, h, w) = g.dims4();
                    let mut dx = Tensor::zeros(&[n, c, h0, w0]);
                    for p in 0..n * c {
                        for y in 0..h {
                            dx.data_mut()[(p * h0 + y) * w0..(p * h0 + y) * w0 + w]
                                .copy_from_slice(&g.data()[(p * h + y) * w..(p * h + y + 1) * w]);
                        }
                    }
                    acc(*x, dx);
                }
                Op::ChannelNormalize { x, eps } => {
                    let (n, c, h, w) = g.dims4();
                    let hw = h * w;
                    let xv = self.value(*x).data();
                    let yv = node.value.data();
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    for i in 0..n {
                        let base = i * c * hw;
                        for p in 0..hw {
                            let mut s = *eps;
                            let mut yg = T::zero();
                            for ch in 0..c {
                                let k = base + ch * hw + p;
                                s += xv[k] * xv[k];
                                yg += yv[k] * g.data()[k];
                            }
                            let inv = T::one() / s.sqrt();
                            for ch in 0..c {
                                let k = base + ch * hw + p;
                                dx.data_mut()[k] = (g.data()[k] - yv[k] * yg) * inv;
                            }
                        }
                    }
                    acc(*x, dx);
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    acc(*x, Tensor::full(self.value(*x).shape(), gv));
                }
                Op::Ssim { x, target, params } => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let hw = h * w;
                    let up = g.data()[0] / T::lit((n * c) as f64);
                    let xv = self.value(*x).data();
                    let mut dx = Vec::with_capacity(n * c * hw);
                    for p in 0..n * c {
                        dx.extend(ssim_grad_x(
                            &xv[p * hw..(p + 1) * hw],
                            &target.data()[p * hw..(p + 1) * hw],
                            h,
                            w,
                            *params,
                            up,
                        ));
                    }
                    acc(*x, Tensor::from_vec(&[n, c, h, w], dx).expect("ssim grad"));
                }
            }
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort_by_key(|(_, v)| v.0);
        Gradients { leaves, params }
    }
}
