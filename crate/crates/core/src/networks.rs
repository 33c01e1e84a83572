//! The three networks of the pipeline and the shared encoder-decoder
//! skeleton they are built from.
//!
//! All parameters live in one [`ParamStore`]. Forward passes record onto a
//! [`Graph`] and never mutate the store; spectral-norm power-iteration
//! results are returned as pending updates instead.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvGeom;
use crate::data::{BoundaryMap, DepthMap, NormalMap, RgbImage};
use crate::error::{Error, Result};
use crate::gated::{gated_conv_graph, Activation, GatedVars, SpectralState};
use crate::graph::{Graph, Var};
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cold-start power iterations run when a gated layer is created.
pub const SN_WARMUP_ITERATIONS: usize = 30;

const KERNEL: usize = 3;
const NORMAL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub depth_levels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth_levels: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth_levels == 0 {
            return Err(Error::Config("base_channels and depth_levels must be positive".into()));
        }
        if self.depth_levels > 8 || self.base_channels << (self.depth_levels - 1) > 512 {
            return Err(Error::Config(format!(
                "base_channels·2^(depth_levels−1) must not exceed 512 (got {}·2^{})",
                self.base_channels,
                self.depth_levels - 1
            )));
        }
        Ok(())
    }

    /// Spatial sizes are padded up to a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth_levels
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Everything that determines the parameter layout of a [`Pipeline`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub network: NetworkConfig,
    /// Gated convolutions in the completion network; plain ones otherwise.
    pub use_sa: bool,
    /// Whether the boundary-consistency network exists.
    pub use_bc: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            use_sa: true,
            use_bc: true,
        }
    }
}

/// How spectral-norm state is treated during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnMode {
    /// One warm-started power iteration per layer; the advanced vectors are
    /// returned as pending updates.
    Update,
    /// Stored vectors are used as they are.
    Frozen,
}

/// Per-forward bookkeeping.
pub struct Ctx<'a, T> {
    pub g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    sn: SnMode,
    /// New spectral-norm vectors to write back after the step.
    pub sn_updates: Vec<(ParamId, Tensor<T>)>,
    /// Gating tensors of every gated block, in execution order.
    pub gatings: Vec<(String, Var)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, sn: SnMode) -> Self {
        Self {
            g,
            store,
            sn,
            sn_updates: Vec::new(),
            gatings: Vec::new(),
        }
    }

    fn param(&mut self, id: ParamId) -> Var {
        self.g.param(id, self.store.get(id))
    }

    fn spectral_state(&mut self, weights: ParamId, u: ParamId, v: ParamId) -> SpectralState<T> {
        let mut state = SpectralState {
            u: self.store.get(u).data().to_vec(),
            v: self.store.get(v).data().to_vec(),
        };
        if self.sn == SnMode::Update {
            state.iterate(self.store.get(weights), 1);
            let (nu, nv) = (state.u.len(), state.v.len());
            self.sn_updates.push((u, Tensor::from_vec(&[nu], state.u.clone()).expect("sn shape")));
            self.sn_updates.push((v, Tensor::from_vec(&[nv], state.v.clone()).expect("sn shape")));
        }
        state
    }
}

#[derive(Clone, Debug)]
struct SnIds {
    u: ParamId,
    v: ParamId,
}

#[derive(Clone, Debug)]
enum BlockKind {
    Plain,
    Gated {
        gate_w: ParamId,
        gate_b: ParamId,
        feature_sn: SnIds,
        gate_sn: SnIds,
    },
}

/// A single plain or gated convolution followed by its activation.
#[derive(Clone, Debug)]
struct Block {
    name: String,
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
    activation: Activation,
    kind: BlockKind,
}

struct BlockSpec {
    name: String,
    cin: usize,
    cout: usize,
    stride: usize,
    activation: Activation,
    gated: bool,
    feature_bias: f64,
}

impl Block {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, s: BlockSpec) -> Self {
        let shape = [s.cout, s.cin, KERNEL, KERNEL];
        let w = store.insert(format!("{}.weight", s.name), kaiming_uniform(&shape, Activation::LEAKY_SLOPE, rng), true);
        let b = store.insert(format!("{}.bias", s.name), Tensor::full(&[s.cout], T::lit(s.feature_bias)), true);
        let kind = if s.gated {
            let gate_w = store.insert(format!("{}.gate_weight", s.name), kaiming_uniform(&shape, 1.0, rng), true);
            let gate_b = store.insert(format!("{}.gate_bias", s.name), Tensor::zeros(&[s.cout]), true);
            let mut sn = |which: &str, weights: ParamId| {
                let mut st = SpectralState::<T>::random(&shape, rng);
                st.iterate(store.get(weights), SN_WARMUP_ITERATIONS);
                let u = store.insert(format!("{}.{which}_sn_u", s.name), Tensor::from_vec(&[st.u.len()], st.u).expect("u"), false);
                let v = store.insert(format!("{}.{which}_sn_v", s.name), Tensor::from_vec(&[st.v.len()], st.v).expect("v"), false);
                SnIds { u, v }
            };
            let feature_sn = sn("feature", w);
            let gate_sn = sn("gate", gate_w);
            BlockKind::Gated {
                gate_w,
                gate_b,
                feature_sn,
                gate_sn,
            }
        } else {
            BlockKind::Plain
        };
        Self {
            name: s.name,
            w,
            b,
            geom: ConvGeom::same(KERNEL, s.stride, 1),
            activation: s.activation,
            kind,
        }
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.param(self.w);
        let b = ctx.param(self.b);
        match &self.kind {
            BlockKind::Plain => {
                let y = ctx.g.conv2d(x, w, Some(b), self.geom);
                self.activation.apply(ctx.g, y)
            }
            BlockKind::Gated {
                gate_w,
                gate_b,
                feature_sn,
                gate_sn,
            } => {
                let vars = GatedVars {
                    feature_weights: w,
                    feature_bias: b,
                    gate_weights: ctx.param(*gate_w),
                    gate_bias: ctx.param(*gate_b),
                };
                let fs = ctx.spectral_state(self.w, feature_sn.u, feature_sn.v);
                let gs = ctx.spectral_state(*gate_w, gate_sn.u, gate_sn.v);
                let nodes = gated_conv_graph(ctx.g, x, vars, &fs, &gs, self.geom, self.activation);
                ctx.gatings.push((self.name.clone(), nodes.gating));
                nodes.output
            }
        }
    }

    fn is_gated(&self) -> bool {
        matches!(self.kind, BlockKind::Gated { .. })
    }
}

/// Encoder-decoder with stride-2 downsampling, nearest-neighbour upsampling
/// and concatenated skip connections. Produces `base_channels` features at
/// input resolution.
#[derive(Clone, Debug)]
struct UNet {
    stem: Block,
    down: Vec<(Block, Block)>,
    up: Vec<Block>,
}

impl UNet {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: NetworkConfig,
        input_channels: usize,
        gated: bool,
    ) -> Self {
        let spec = |name: String, cin, cout, stride| BlockSpec {
            name,
            cin,
            cout,
            stride,
            activation: Activation::LeakyRelu,
            gated,
            feature_bias: 0.0,
        };
        let stem = Block::new(store, rng, spec(format!("{prefix}.enc0"), input_channels, cfg.channels(0), 1));
        let mut down = Vec::new();
        for l in 1..cfg.depth_levels {
            let (cin, c) = (cfg.channels(l - 1), cfg.channels(l));
            let a = Block::new(store, rng, spec(format!("{prefix}.enc{l}a"), cin, c, 2));
            let b = Block::new(store, rng, spec(format!("{prefix}.enc{l}b"), c, c, 1));
            down.push((a, b));
        }
        let mut up = Vec::new();
        for l in (0..cfg.depth_levels - 1).rev() {
            let cin = cfg.channels(l + 1) + cfg.channels(l);
            up.push(Block::new(store, rng, spec(format!("{prefix}.dec{l}"), cin, cfg.channels(l), 1)));
        }
        Self { stem, down, up }
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let mut skips = vec![self.stem.forward(ctx, x)];
        for (a, b) in &self.down {
            let y = a.forward(ctx, *skips.last().expect("stem"));
            skips.push(b.forward(ctx, y));
        }
        let mut cur = skips.pop().expect("deepest level");
        for block in &self.up {
            let skip = skips.pop().expect("matching skip");
            let up = ctx.g.upsample2(cur);
            let cat = ctx.g.concat(&[up, skip]);
            cur = block.forward(ctx, cat);
        }
        cur
    }

    fn blocks(&self) -> impl Iterator<Item = &Block> {
        std::iter::once(&self.stem)
            .chain(self.down.iter().flat_map(|(a, b)| [a, b]))
            .chain(self.up.iter())
    }
}

fn head_spec(name: &str, cin: usize, cout: usize, gated: bool, feature_bias: f64) -> BlockSpec {
    BlockSpec {
        name: name.to_string(),
        cin,
        cout,
        stride: 1,
        activation: Activation::Identity,
        gated,
        feature_bias,
    }
}

/// RGB → surface normals and occlusion boundaries, plain convolutions.
#[derive(Clone, Debug)]
pub struct RepresentationNet {
    body: UNet,
    normal_head: Block,
    boundary_head: Block,
}

/// Raw and completed depth plus the representations feeding completion.
#[derive(Clone, Copy, Debug)]
pub struct RepresentationVars {
    /// `[N, 3, H, W]`, unit length per pixel.
    pub normals: Var,
    /// `[N, 1, H, W]` in `[0, 1]`.
    pub boundary: Var,
}

impl RepresentationNet {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: NetworkConfig) -> Self {
        let c = cfg.base_channels;
        Self {
            body: UNet::new(store, rng, "repr", cfg, 3, false),
            normal_head: Block::new(store, rng, head_spec("repr.normal_head", c, 3, false, 0.0)),
            boundary_head: Block::new(store, rng, head_spec("repr.boundary_head", c, 1, false, 0.0)),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, rgb: Var) -> RepresentationVars {
        let f = self.body.forward(ctx, rgb);
        let n = self.normal_head.forward(ctx, f);
        let normals = ctx.g.channel_normalize(n, T::lit(NORMAL_EPS));
        let b = self.boundary_head.forward(ctx, f);
        let boundary = ctx.g.sigmoid(b);
        RepresentationVars { normals, boundary }
    }
}

/// RGB, raw depth, normals and boundaries → complete depth.
#[derive(Clone, Debug)]
pub struct CompletionNet {
    body: UNet,
    head: Block,
}

/// Initial output bias; softplus(4) ≈ 4 m sits inside typical indoor range.
const DEPTH_BIAS_INIT: f64 = 4.0;

impl CompletionNet {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: NetworkConfig, gated: bool) -> Self {
        Self {
            body: UNet::new(store, rng, "completion", cfg, 8, gated),
            head: Block::new(store, rng, head_spec("completion.head", cfg.base_channels, 1, gated, DEPTH_BIAS_INIT)),
        }
    }

    /// `input` is the 8-channel concatenation rgb ‖ raw ‖ normals ‖ boundary.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, input: Var) -> Var {
        let f = self.body.forward(ctx, input);
        let d = self.head.forward(ctx, f);
        ctx.g.softplus(d)
    }

    pub fn gated_block_count(&self) -> usize {
        self.body.blocks().chain(std::iter::once(&self.head)).filter(|b| b.is_gated()).count()
    }
}

/// Complete depth → occlusion boundaries, plain convolutions.
#[derive(Clone, Debug)]
pub struct BoundaryNet {
    body: UNet,
    head: Block,
}

impl BoundaryNet {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: NetworkConfig) -> Self {
        Self {
            body: UNet::new(store, rng, "boundary", cfg, 1, false),
            head: Block::new(store, rng, head_spec("boundary.head", cfg.base_channels, 1, false, 0.0)),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, depth: Var) -> Var {
        let f = self.body.forward(ctx, depth);
        let b = self.head.forward(ctx, f);
        ctx.g.sigmoid(b)
    }
}

/// A batch of network inputs in NCHW layout.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[N, 3, H, W]`
    pub rgb: Tensor<T>,
    /// `[N, 1, H, W]`, zero where missing.
    pub raw: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn single(rgb: &RgbImage<T>, raw: &DepthMap<T>) -> Result<Self> {
        Self::new(&[(rgb, raw)])
    }

    pub fn new(items: &[(&RgbImage<T>, &DepthMap<T>)]) -> Result<Self> {
        let Some(&(first, _)) = items.first() else {
            return Err(Error::Usage("empty batch".into()));
        };
        let (h, w) = first.dims();
        let mut rgb = Vec::with_capacity(items.len() * 3 * h * w);
        let mut raw = Vec::with_capacity(items.len() * h * w);
        for (r, d) in items {
            check_dims("rgb", r.dims(), "raw depth", d.dims())?;
            check_dims("first rgb", (h, w), "rgb", r.dims())?;
            rgb.extend_from_slice(r.values());
            raw.extend_from_slice(d.values());
        }
        let n = items.len();
        Ok(Self {
            rgb: Tensor::from_vec(&[n, 3, h, w], rgb)?,
            raw: Tensor::from_vec(&[n, 1, h, w], raw)?,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let (n, _, h, w) = self.rgb.dims4();
        (n, h, w)
    }
}

fn check_dims(a: &str, da: (usize, usize), b: &str, db: (usize, usize)) -> Result<()> {
    if da != db {
        return Err(Error::DimensionMismatch {
            first_name: a.into(),
            first: da,
            second_name: b.into(),
            second: db,
        });
    }
    Ok(())
}

/// Graph nodes of a full pipeline forward pass, all at input resolution.
#[derive(Clone, Debug)]
pub struct PipelineVars {
    pub normals: Var,
    pub boundary: Var,
    pub depth: Var,
    /// Boundary-consistency prediction on `depth`, when that network exists.
    pub consistency: Option<Var>,
}

/// Ground-truth representations substituted for the predicted ones.
pub struct TeacherInputs<T> {
    pub normals: Tensor<T>,
    pub boundary: Tensor<T>,
}

/// The representation, completion and boundary-consistency networks with
/// their parameters.
#[derive(Clone, Debug)]
pub struct Pipeline<T> {
    config: PipelineConfig,
    store: ParamStore<T>,
    representation: RepresentationNet,
    completion: CompletionNet,
    boundary: Option<BoundaryNet>,
}

/// Inference outputs for one image.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub depth: DepthMap<T>,
    pub normals: NormalMap<T>,
    pub boundary: BoundaryMap<T>,
}

impl<T: Scalar> Pipeline<T> {
    /// Freshly initialized networks; identical seeds give identical weights.
    pub fn new(config: PipelineConfig, seed: u64) -> Result<Self> {
        config.network.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = config.network;
        let representation = RepresentationNet::new(&mut store, &mut rng, cfg);
        let completion = CompletionNet::new(&mut store, &mut rng, cfg, config.use_sa);
        let boundary = config.use_bc.then(|| BoundaryNet::new(&mut store, &mut rng, cfg));
        Ok(Self {
            config,
            store,
            representation,
            completion,
            boundary,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn gated_block_count(&self) -> usize {
        self.completion.gated_block_count()
    }

    /// Names of the network a parameter belongs to: `repr`, `completion` or
    /// `boundary`.
    pub fn network_of(name: &str) -> &str {
        name.split('.').next().unwrap_or("")
    }

    /// Records the whole pipeline on `ctx`. Inputs are padded to the
    /// network's size multiple and every output is cropped back.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, batch: &Batch<T>, teacher: Option<&TeacherInputs<T>>) -> PipelineVars {
        let (_, h, w) = batch.dims();
        let (ph, pw) = self.padded(h, w);
        let rgb = ctx.g.constant(batch.rgb.clone());
        let raw = ctx.g.constant(batch.raw.clone());
        let rgb_p = ctx.g.pad_to(rgb, ph, pw);
        let raw_p = ctx.g.pad_to(raw, ph, pw);
        let reps = self.representation.forward(ctx, rgb_p);
        let (normals_in, boundary_in) = match teacher {
            Some(t) => {
                let n = ctx.g.constant(t.normals.clone());
                let b = ctx.g.constant(t.boundary.clone());
                (ctx.g.pad_to(n, ph, pw), ctx.g.pad_to(b, ph, pw))
            }
            None => (reps.normals, reps.boundary),
        };
        let input = ctx.g.concat(&[rgb_p, raw_p, normals_in, boundary_in]);
        let depth_p = self.completion.forward(ctx, input);
        let consistency = self.boundary.as_ref().map(|net| {
            let c = net.forward(ctx, depth_p);
            ctx.g.crop_to(c, h, w)
        });
        PipelineVars {
            normals: ctx.g.crop_to(reps.normals, h, w),
            boundary: ctx.g.crop_to(reps.boundary, h, w),
            depth: ctx.g.crop_to(depth_p, h, w),
            consistency,
        }
    }

    fn padded(&self, h: usize, w: usize) -> (usize, usize) {
        let m = self.config.network.size_multiple();
        (h.div_ceil(m) * m, w.div_ceil(m) * m)
    }

    /// Runs one of the sub-networks in inference mode on a padded input.
    fn run<R>(&self, input: Tensor<T>, f: impl FnOnce(&mut Ctx<'_, T>, Var) -> R) -> (Graph<T>, R, Vec<(String, Var)>) {
        let mut g = Graph::new();
        let (_, _, h, w) = input.dims4();
        let (ph, pw) = self.padded(h, w);
        let (out, gatings) = {
            let mut ctx = Ctx::new(&mut g, &self.store, SnMode::Frozen);
            let x = ctx.g.constant(input);
            let xp = ctx.g.pad_to(x, ph, pw);
            let out = f(&mut ctx, xp);
            (out, ctx.gatings)
        };
        (g, out, gatings)
    }

    /// Predicted normals and boundaries from RGB.
    pub fn representation_forward(&self, rgb: &RgbImage<T>) -> Result<(NormalMap<T>, BoundaryMap<T>)> {
        let (h, w) = rgb.dims();
        let input = Tensor::from_vec(&[1, 3, h, w], rgb.values().to_vec())?;
        let (mut g, reps, _) = self.run(input, |ctx, x| self.representation.forward(ctx, x));
        let n = g.crop_to(reps.normals, h, w);
        let b = g.crop_to(reps.boundary, h, w);
        Ok((to_normals(g.value(n), h, w)?, BoundaryMap::new(h, w, g.value(b).data().to_vec())?))
    }

    fn completion_input(
        rgb: &RgbImage<T>,
        raw: &DepthMap<T>,
        normals: &NormalMap<T>,
        boundary: &BoundaryMap<T>,
    ) -> Result<Tensor<T>> {
        let (h, w) = rgb.dims();
        check_dims("rgb", (h, w), "raw depth", raw.dims())?;
        check_dims("rgb", (h, w), "normals", normals.dims())?;
        check_dims("rgb", (h, w), "boundary", boundary.dims())?;
        let hw = h * w;
        let n = normals.values();
        let planes = [
            &rgb.values()[..hw],
            &rgb.values()[hw..2 * hw],
            &rgb.values()[2 * hw..],
            raw.values(),
            &n[..hw],
            &n[hw..2 * hw],
            &n[2 * hw..],
            boundary.values(),
        ];
        Ok(Tensor::stack(&planes, 1, h, w).reshape(&[1, 8, h, w])?)
    }

    /// Completion network alone on given representations.
    pub fn completion_forward(
        &self,
        rgb: &RgbImage<T>,
        raw: &DepthMap<T>,
        normals: &NormalMap<T>,
        boundary: &BoundaryMap<T>,
    ) -> Result<DepthMap<T>> {
        let (h, w) = rgb.dims();
        let input = Self::completion_input(rgb, raw, normals, boundary)?;
        let (mut g, d, _) = self.run(input, |ctx, x| self.completion.forward(ctx, x));
        let d = g.crop_to(d, h, w);
        DepthMap::new(h, w, g.value(d).data().to_vec())
    }

    /// Gating tensor of every gated block, captured during an ordinary
    /// completion forward. Maps are at each block's own resolution.
    pub fn attention_maps(
        &self,
        rgb: &RgbImage<T>,
        raw: &DepthMap<T>,
        normals: &NormalMap<T>,
        boundary: &BoundaryMap<T>,
    ) -> Result<Vec<(String, Tensor<T>)>> {
        let input = Self::completion_input(rgb, raw, normals, boundary)?;
        let (g, _, gatings) = self.run(input, |ctx, x| self.completion.forward(ctx, x));
        Ok(gatings.into_iter().map(|(name, v)| (name, g.value(v).clone())).collect())
    }

    /// Boundary-consistency network on a complete depth map.
    pub fn boundary_forward(&self, depth: &DepthMap<T>) -> Result<BoundaryMap<T>> {
        let Some(net) = &self.boundary else {
            return Err(Error::Usage("pipeline was built without the boundary-consistency network".into()));
        };
        let (h, w) = depth.dims();
        let input = Tensor::from_vec(&[1, 1, h, w], depth.values().to_vec())?;
        let (mut g, b, _) = self.run(input, |ctx, x| net.forward(ctx, x));
        let b = g.crop_to(b, h, w);
        BoundaryMap::new(h, w, g.value(b).data().to_vec())
    }

    /// Full inference: representations from RGB, then completion.
    pub fn predict(&self, rgb: &RgbImage<T>, raw: &DepthMap<T>) -> Result<Prediction<T>> {
        let (h, w) = rgb.dims();
        let batch = Batch::single(rgb, raw)?;
        let mut g = Graph::new();
        let vars = {
            let mut ctx = Ctx::new(&mut g, &self.store, SnMode::Frozen);
            self.forward(&mut ctx, &batch, None)
        };
        Ok(Prediction {
            depth: DepthMap::new(h, w, g.value(vars.depth).data().to_vec())?,
            normals: to_normals(g.value(vars.normals), h, w)?,
            boundary: BoundaryMap::new(h, w, g.value(vars.boundary).data().to_vec())?,
        })
    }

    pub fn complete(&self, rgb: &RgbImage<T>, raw: &DepthMap<T>) -> Result<DepthMap<T>> {
        Ok(self.predict(rgb, raw)?.depth)
    }
}

fn to_normals<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<NormalMap<T>> {
    let hw = h * w;
    let values = t.data()[..3 * hw].to_vec();
    let valid = (0..hw)
        .map(|p| {
            let n2: f64 = (0..3).map(|c| values[c * hw + p].as_f64().powi(2)).sum();
            (n2.sqrt() - 1.0).abs() <= 1e-4
        })
        .collect();
    NormalMap::new(h, w, values, valid)
}
