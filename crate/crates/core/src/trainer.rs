//! Joint optimization of the pipeline, finite-difference gradient audits and
//! the four-way ablation.
//!
//! Every random choice of step `k` (which samples, where to crop) is drawn
//! from a generator keyed by `(seed, k)`, so a run resumed from a checkpoint
//! at step `k` continues exactly as an uninterrupted one.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{load_manifest_samples, make_synthetic_scene, Sample, SceneConfig};
use crate::edge::binarize;
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::losses::{graph_losses, total_loss, LossReport, LossVars, LossWeights, Targets};
use crate::metrics::{aggregate, evaluate_with, MetricsReport, METRIC_HEADERS, METRIC_NAMES};
use crate::networks::{Batch, Ctx, NetworkConfig, Pipeline, PipelineConfig, SnMode, TeacherInputs};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamId;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Gated blocks in the completion network; plain blocks otherwise.
    pub use_sa: bool,
    pub use_ssim: bool,
    /// Instantiates and trains the boundary-consistency network.
    pub use_bc: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_sa: true,
            use_ssim: true,
            use_bc: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub loss_weights: LossWeights,
    /// Progress callback period; the log itself has one record per step.
    pub log_every: u64,
    pub network: NetworkConfig,
    /// Square training crop side. Smaller images are used whole.
    pub patch_size: usize,
    /// Feed ground-truth normals and boundaries to the completion network
    /// instead of the predicted ones.
    pub teacher_forcing: bool,
    /// Train against `gt_boundary > threshold` instead of the continuous map.
    pub binarize_boundary: Option<f64>,
    pub lr_schedule: LrSchedule,
    /// Last-step learning rate under [`LrSchedule::Cosine`], as a fraction
    /// of `learning_rate`.
    pub final_lr_fraction: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `learning_rate` over `steps`.
    #[default]
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            learning_rate: 1e-3,
            seed: 0,
            ablation: Ablation::default(),
            loss_weights: LossWeights::default(),
            log_every: 100,
            network: NetworkConfig::default(),
            patch_size: 64,
            teacher_forcing: false,
            binarize_boundary: None,
            lr_schedule: LrSchedule::Cosine,
            final_lr_fraction: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 || self.patch_size == 0 {
            return Err(Error::Config("steps, batch_size, log_every and patch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config(format!("final_lr_fraction must be in [0, 1], got {}", self.final_lr_fraction)));
        }
        if let Some(t) = self.binarize_boundary {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::Config(format!("binarize_boundary must be in [0, 1), got {t}")));
            }
        }
        self.loss_weights.validate()?;
        self.network.validate()
    }

    /// Loss weights after applying the ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss_weights;
        if !self.ablation.use_ssim {
            w.lambda_s = 0.0;
        }
        if !self.ablation.use_bc {
            w.lambda_bc = 0.0;
        }
        w
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            network: self.network,
            use_sa: self.ablation.use_sa,
            use_bc: self.ablation.use_bc,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate)
    }

    /// Learning rate used for update number `step` (0-based).
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = (step as f64 / self.steps.saturating_sub(1).max(1) as f64).min(1.0);
                let c = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * c)
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Number of updates completed, starting at 1.
    pub step: u64,
    pub l_sa: f64,
    pub l_s: f64,
    pub l_bc: f64,
    pub l_n: f64,
    pub l_b: f64,
    pub total: f64,
    pub wall_clock_s: f64,
}

impl LogRecord {
    fn new(step: u64, r: &LossReport, wall_clock_s: f64) -> Self {
        Self {
            step,
            l_sa: r.l_sa,
            l_s: r.l_s,
            l_bc: r.l_bc,
            l_n: r.l_n,
            l_b: r.l_b,
            total: r.total,
            wall_clock_s,
        }
    }
}

/// Writes records as newline-delimited JSON.
pub fn write_log(out: &mut dyn Write, records: &[LogRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Mean total loss over the first and last `window` records.
pub fn smoothed_endpoints(log: &[LogRecord], window: usize) -> Option<(f64, f64)> {
    let w = window.min(log.len());
    if w == 0 {
        return None;
    }
    let mean = |r: &[LogRecord]| r.iter().map(|x| x.total).sum::<f64>() / w as f64;
    Some((mean(&log[..w]), mean(&log[log.len() - w..])))
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stateful trainer over an in-memory dataset.
pub struct Trainer<T> {
    config: TrainConfig,
    pipeline: Pipeline<T>,
    adam: Adam<T>,
    step: u64,
    samples: Vec<Sample<T>>,
    patch: (usize, usize),
    started: Instant,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, samples: Vec<Sample<T>>) -> Result<Self> {
        config.validate()?;
        let pipeline = Pipeline::new(config.pipeline_config(), config.seed)?;
        let adam = Adam::new(config.adam(), pipeline.params());
        Self::assemble(config, samples, pipeline, adam, 0)
    }

    /// Continues a run from a checkpoint written by [`Self::checkpoint`].
    pub fn resume(config: TrainConfig, samples: Vec<Sample<T>>, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let pipeline = Pipeline::from_checkpoint(ck, &config.pipeline_config())?;
        let state: AdamState = match ck.meta.get("adam") {
            Some(json) => serde_json::from_str(json).map_err(|e| Error::Integrity(format!("optimizer metadata: {e}")))?,
            None => return Err(Error::Integrity("checkpoint carries no optimizer state".into())),
        };
        if state.t != ck.step {
            return Err(Error::Integrity(format!(
                "optimizer has {} updates but checkpoint is at step {}",
                state.t, ck.step
            )));
        }
        let adam = Adam::import(config.adam(), state.t, pipeline.params(), ck)?;
        Self::assemble(config, samples, pipeline, adam, ck.step)
    }

    fn assemble(config: TrainConfig, mut samples: Vec<Sample<T>>, pipeline: Pipeline<T>, adam: Adam<T>, step: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Usage("training dataset is empty".into()));
        }
        for s in &samples {
            s.check_invariants()?;
        }
        if let Some(t) = config.binarize_boundary {
            for s in &mut samples {
                s.gt_boundary = binarize(&s.gt_boundary, t);
            }
        }
        let min_h = samples.iter().map(|s| s.dims().0).min().unwrap_or(0);
        let min_w = samples.iter().map(|s| s.dims().1).min().unwrap_or(0);
        let patch = (config.patch_size.min(min_h), config.patch_size.min(min_w));
        let window = config.loss_weights.ssim_window;
        if patch.0 < window || patch.1 < window {
            return Err(Error::TooSmall {
                context: "training patch".into(),
                height: patch.0,
                width: patch.1,
                min: window,
            });
        }
        Ok(Self {
            config,
            pipeline,
            adam,
            step,
            samples,
            patch,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn pipeline(&self) -> &Pipeline<T> {
        &self.pipeline
    }

    pub fn pipeline_mut(&mut self) -> &mut Pipeline<T> {
        &mut self.pipeline
    }

    pub fn into_pipeline(self) -> Pipeline<T> {
        self.pipeline
    }

    /// Updates completed so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Dataset indices for the `k`-th draw: epoch-wise shuffled passes.
    fn sample_index(&self, k: u64) -> usize {
        let n = self.samples.len() as u64;
        let epoch = k / n;
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut step_rng(self.config.seed, (1 << 40) | epoch));
        order[(k % n) as usize]
    }

    fn batch_for(&self, step: u64) -> Vec<Sample<T>> {
        let mut rng = step_rng(self.config.seed, step);
        let bs = self.config.batch_size as u64;
        let (ph, pw) = self.patch;
        (0..bs)
            .map(|j| {
                let s = &self.samples[self.sample_index(step * bs + j)];
                let (h, w) = s.dims();
                let y0 = rng.gen_range(0..=h - ph);
                let x0 = rng.gen_range(0..=w - pw);
                s.crop(y0, x0, ph, pw)
            })
            .collect()
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<LogRecord> {
        let step = self.step;
        let crops = self.batch_for(step);
        let refs: Vec<&Sample<T>> = crops.iter().collect();
        let items: Vec<_> = crops.iter().map(|s| (&s.rgb, &s.raw_depth)).collect();
        let batch = Batch::new(&items)?;
        let targets = Targets::new(&refs)?;
        let teacher = self.config.teacher_forcing.then(|| TeacherInputs {
            normals: targets.normals.clone(),
            boundary: targets.boundary.clone(),
        });
        let weights = self.config.effective_weights();

        let mut g = Graph::new();
        let (vars, sn_updates) = {
            let mut ctx = Ctx::new(&mut g, self.pipeline.params(), SnMode::Update);
            let out = self.pipeline.forward(&mut ctx, &batch, teacher.as_ref());
            let sn = std::mem::take(&mut ctx.sn_updates);
            (graph_losses(ctx.g, &out, &targets, &weights), sn)
        };
        let report = total_loss(&vars.components(&g), &weights).map_err(|e| match e {
            Error::NonFinite { term, .. } => Error::NonFinite { term, step: step + 1 },
            e => e,
        })?;
        if !g.value(vars.total).data()[0].is_finite() {
            return Err(Error::NonFinite {
                term: "total".into(),
                step: step + 1,
            });
        }
        let grads = g.backward(vars.total);
        let pg = param_grads(&grads, &self.pipeline)?;
        let store = self.pipeline.params_mut();
        for (id, value) in sn_updates {
            *store.get_mut(id) = value;
        }
        self.adam.config.learning_rate = self.config.learning_rate_at(step);
        self.adam.step(store, &pg);
        self.step += 1;
        Ok(LogRecord::new(self.step, &report, self.started.elapsed().as_secs_f64()))
    }

    /// Runs until `config.steps` updates are done. `progress` sees every
    /// `log_every`-th record and the last one.
    pub fn run(&mut self, mut progress: impl FnMut(&LogRecord)) -> Result<Vec<LogRecord>> {
        let mut log = Vec::new();
        while self.step < self.config.steps {
            let r = self.step()?;
            if r.step % self.config.log_every == 0 || r.step == self.config.steps {
                progress(&r);
            }
            log.push(r);
        }
        Ok(log)
    }

    /// Parameters, optimizer moments, and the training configuration.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.pipeline.to_checkpoint(self.step);
        ck.tensors.extend(self.adam.export(self.pipeline.params()));
        let state = AdamState {
            config: self.adam.config,
            t: self.adam.t,
        };
        ck.meta.insert("adam".into(), serde_json::to_string(&state).expect("adam state"));
        ck.meta.insert("train".into(), serde_json::to_string(&self.config).expect("train config"));
        ck.meta.insert("scalar".into(), format!("\"{}\"", T::NAME));
        ck
    }
}

#[derive(Serialize, Deserialize)]
struct AdamState {
    config: AdamConfig,
    t: u64,
}

fn param_grads<'a, T: Scalar>(grads: &'a Gradients<T>, pipeline: &Pipeline<T>) -> Result<Vec<(ParamId, &'a crate::tensor::Tensor<T>)>> {
    let out: Vec<_> = grads.params().collect();
    for (id, g) in &out {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(pipeline.params().name(*id).to_string()));
        }
    }
    Ok(out)
}

/// Trains from scratch on `samples`.
pub fn train<T: Scalar>(config: &TrainConfig, samples: Vec<Sample<T>>, progress: impl FnMut(&LogRecord)) -> Result<(Trainer<T>, Vec<LogRecord>)> {
    let mut trainer = Trainer::new(config.clone(), samples)?;
    let log = trainer.run(progress)?;
    Ok((trainer, log))
}

/// Trains on the samples listed in a manifest, writing the final checkpoint
/// to `out` and the NDJSON log next to it (`<out>.log.ndjson`).
pub fn train_manifest(config: &TrainConfig, manifest: &Path, out: &Path, progress: impl FnMut(&LogRecord)) -> Result<Vec<LogRecord>> {
    let samples: Vec<Sample<f32>> = load_manifest_samples(manifest)?;
    let (trainer, log) = train(config, samples, progress)?;
    trainer.checkpoint().write(out)?;
    let log_path = out.with_extension("log.ndjson");
    let mut f = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    write_log(&mut f, &log).map_err(|e| Error::io(&log_path, e))?;
    Ok(log)
}

/// Which scalar the audit differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Total,
    LSa,
    LS,
    LBc,
    LN,
    LB,
}

impl Objective {
    pub const ALL: [Objective; 6] = [Self::Total, Self::LSa, Self::LS, Self::LBc, Self::LN, Self::LB];

    fn pick(self, v: &LossVars) -> Option<Var> {
        match self {
            Self::Total => Some(v.total),
            Self::LSa => Some(v.l_sa),
            Self::LS => Some(v.l_s),
            Self::LBc => v.l_bc,
            Self::LN => Some(v.l_n),
            Self::LB => Some(v.l_b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub size: usize,
    pub network: NetworkConfig,
    pub ablation: Ablation,
    pub loss_weights: LossWeights,
    pub teacher_forcing: bool,
    pub params_per_network: usize,
    /// Central-difference step, default 1e-5. Differences are always
    /// evaluated at 64 bits.
    pub step: Option<f64>,
    /// Pass threshold on relative error; defaults to 1e-3 at 64 bits, 1e-2
    /// at 32.
    pub threshold: Option<f64>,
    pub objective: Objective,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 16,
            network: NetworkConfig {
                base_channels: 4,
                depth_levels: 2,
            },
            ablation: Ablation::default(),
            loss_weights: LossWeights::default(),
            teacher_forcing: false,
            params_per_network: 20,
            step: None,
            threshold: None,
            objective: Objective::Total,
        }
    }
}

/// Denominator floor for relative errors of near-zero gradients.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub scalar: String,
    pub objective: Objective,
    pub step: f64,
    pub threshold: f64,
    pub max_relative_error: f64,
    pub passed: bool,
    /// Parameters whose relative error reached the threshold or whose
    /// analytic gradient is not finite.
    pub failures: Vec<String>,
    /// L2 norm of the analytic gradient per network (`repr`, `completion`,
    /// `boundary`).
    pub gradient_norms: BTreeMap<String, f64>,
    pub entries: Vec<GradcheckEntry>,
}

/// One fixed sample with its supervision, ready to evaluate an objective.
struct Problem<T> {
    batch: Batch<T>,
    targets: Targets<T>,
    teacher: Option<TeacherInputs<T>>,
    weights: LossWeights,
    objective: Objective,
}

impl<T: Scalar> Problem<T> {
    fn new(sample: &Sample<T>, teacher_forcing: bool, weights: LossWeights, objective: Objective) -> Result<Self> {
        let targets = Targets::new(&[sample])?;
        let teacher = teacher_forcing.then(|| TeacherInputs {
            normals: targets.normals.clone(),
            boundary: targets.boundary.clone(),
        });
        Ok(Self {
            batch: Batch::single(&sample.rgb, &sample.raw_depth)?,
            targets,
            teacher,
            weights,
            objective,
        })
    }

    fn graph(&self, p: &Pipeline<T>) -> Result<(Graph<T>, Var)> {
        let mut g = Graph::new();
        let vars = {
            let mut ctx = Ctx::new(&mut g, p.params(), SnMode::Frozen);
            let out = p.forward(&mut ctx, &self.batch, self.teacher.as_ref());
            graph_losses(ctx.g, &out, &self.targets, &self.weights)
        };
        let root = self
            .objective
            .pick(&vars)
            .ok_or_else(|| Error::Usage("objective needs the boundary-consistency network".into()))?;
        Ok((g, root))
    }
}

/// Compares analytic and central-difference gradients on one synthetic
/// `size × size` scene with spectral-norm vectors frozen.
///
/// `corrupt` names a parameter whose analytic gradient is deliberately
/// perturbed; it exists to exercise the failure path.
pub fn gradcheck<T: Scalar>(config: &GradcheckConfig, corrupt: Option<&str>) -> Result<GradcheckReport> {
    let pconfig = PipelineConfig {
        network: config.network,
        use_sa: config.ablation.use_sa,
        use_bc: config.ablation.use_bc,
    };
    let mut weights = config.loss_weights;
    if !config.ablation.use_ssim {
        weights.lambda_s = 0.0;
    }
    if !config.ablation.use_bc {
        weights.lambda_bc = 0.0;
    }
    weights.validate()?;
    let h = config.step.unwrap_or(1e-5);
    let threshold = config.threshold.unwrap_or(if T::NAME == "f64" { 1e-3 } else { 1e-2 });

    let scene = make_synthetic_scene::<f64>(config.seed, 32.max(config.size), 32.max(config.size), &SceneConfig::default())?;
    let sample: Sample<T> = scene.crop(0, 0, config.size, config.size).cast();
    let problem = Problem::new(&sample, config.teacher_forcing, weights, config.objective)?;
    // differences are taken at 64 bits on the same (rounded) inputs and
    // parameters, so they stay meaningful when T is narrower
    let wide_problem = Problem::new(&sample.cast::<f64>(), config.teacher_forcing, weights, config.objective)?;
    let pipeline = Pipeline::<T>::new(pconfig, config.seed)?;
    let mut wide = Pipeline::<f64>::new(pconfig, config.seed)?;
    for id in pipeline.params().ids() {
        *wide.params_mut().get_mut(id) = pipeline.params().get(id).cast();
    }

    let (g, root) = problem.graph(&pipeline)?;
    let grads = g.backward(root);
    let mut analytic: BTreeMap<ParamId, Vec<f64>> = grads
        .params()
        .map(|(id, t)| (id, t.data().iter().map(|v| v.as_f64()).collect()))
        .collect();
    drop(g);

    let mut failures = Vec::new();
    let mut gradient_norms = BTreeMap::new();
    for (id, values) in &analytic {
        let name = pipeline.params().name(*id);
        if values.iter().any(|v| !v.is_finite()) && !failures.iter().any(|f| f == name) {
            failures.push(name.to_string());
        }
        let net = Pipeline::<T>::network_of(name).to_string();
        *gradient_norms.entry(net).or_insert(0.0) += values.iter().map(|v| v * v).sum::<f64>();
    }
    for v in gradient_norms.values_mut() {
        *v = v.sqrt();
    }
    if let Some(name) = corrupt {
        let id = pipeline
            .params()
            .id(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))?;
        for v in analytic.entry(id).or_insert_with(|| vec![0.0; pipeline.params().get(id).len()]) {
            *v = 1.5 * *v + 1e-2;
        }
    }

    // ≥ params_per_network random (tensor, element) picks per network,
    // always including every element tensor of a corrupted parameter.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut by_net: BTreeMap<String, Vec<ParamId>> = BTreeMap::new();
    for id in pipeline.params().trainable_ids() {
        let net = Pipeline::<T>::network_of(pipeline.params().name(id)).to_string();
        by_net.entry(net).or_default().push(id);
    }
    let mut picks: Vec<(ParamId, usize)> = Vec::new();
    for ids in by_net.values() {
        for _ in 0..config.params_per_network {
            let id = ids[rng.gen_range(0..ids.len())];
            picks.push((id, rng.gen_range(0..pipeline.params().get(id).len())));
        }
    }
    if let Some(id) = corrupt.and_then(|n| pipeline.params().id(n)) {
        picks.push((id, 0));
    }

    let mut entries = Vec::with_capacity(picks.len());
    for (id, index) in picks {
        let original = wide.params().get(id).data()[index];
        let mut probe = |delta: f64| -> Result<f64> {
            wide.params_mut().get_mut(id).data_mut()[index] = original + delta;
            let (g, root) = wide_problem.graph(&wide)?;
            Ok(g.value(root).data()[0])
        };
        let plus = probe(h)?;
        let minus = probe(-h)?;
        wide.params_mut().get_mut(id).data_mut()[index] = original;
        let numeric = (plus - minus) / ((original + h) - (original - h));
        let a = analytic.get(&id).map_or(0.0, |v| v[index]);
        let relative_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
        let name = pipeline.params().name(id).to_string();
        if (!(relative_error < threshold)) && !failures.contains(&name) {
            failures.push(name.clone());
        }
        entries.push(GradcheckEntry {
            name,
            index,
            analytic: a,
            numeric,
            relative_error,
        });
    }
    let max_relative_error = entries.iter().map(|e| e.relative_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        scalar: T::NAME.into(),
        objective: config.objective,
        step: h,
        threshold,
        max_relative_error,
        passed: failures.is_empty(),
        failures,
        gradient_norms,
        entries,
    })
}

/// Sizes of a synthetic train / held-out split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSplit {
    pub train: usize,
    pub eval: usize,
    /// Square image side.
    pub size: usize,
}

impl Default for SyntheticSplit {
    fn default() -> Self {
        Self {
            train: 10,
            eval: 10,
            size: 64,
        }
    }
}

/// Disjoint training and held-out scenes for one seed group. Scene seeds
/// are `group·2^20 + i` for training and `group·2^20 + 2^19 + i` held out.
pub fn synthetic_split<T: Scalar>(group: u64, split: SyntheticSplit, scene: &SceneConfig) -> Result<(Vec<Sample<T>>, Vec<Sample<T>>)> {
    if split.train == 0 || split.eval == 0 || split.train > 1 << 19 || split.eval > 1 << 19 {
        return Err(Error::Config("split sizes must be in 1..=2^19".into()));
    }
    let base = group << 20;
    let make = |s: u64| make_synthetic_scene(s, split.size, split.size, scene);
    let train = (0..split.train as u64).map(|i| make(base + i)).collect::<Result<Vec<_>>>()?;
    let eval = (0..split.eval as u64).map(|i| make(base + (1 << 19) + i)).collect::<Result<Vec<_>>>()?;
    Ok((train, eval))
}

/// Row labels of the ablation table, in order.
pub const ABLATION_LABELS: [&str; 4] = ["W/O-SA", "SA", "SA+SSIM", "SA+SSIM+BC"];

/// Ablation switches for one row label.
pub fn ablation_variant(label: &str) -> Option<Ablation> {
    let (use_sa, use_ssim, use_bc) = match label {
        "W/O-SA" => (false, false, false),
        "SA" => (true, false, false),
        "SA+SSIM" => (true, true, false),
        "SA+SSIM+BC" => (true, true, true),
        _ => return None,
    };
    Some(Ablation { use_sa, use_ssim, use_bc })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub metrics: MetricsReport,
    pub final_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Fixed-width text table with one row per variant and the eight metric
    /// columns.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12}", "variant");
        for h in METRIC_HEADERS {
            s.push_str(&format!(" {h:>9}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:<12}", r.label));
            for v in r.metrics.values() {
                s.push_str(&format!(" {v:>9.4}"));
            }
            s.push('\n');
        }
        s
    }

    /// Header `variant,<metric names>` then one CSV line per row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("variant,{}\n", METRIC_NAMES.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.metrics.values().iter().map(|v| format!("{v}")).collect();
            s.push_str(&format!("{},{}\n", r.label, vals.join(",")));
        }
        s
    }
}

/// Evaluates full-image predictions against ground truth.
pub fn evaluate_pipeline<T: Scalar>(pipeline: &Pipeline<T>, samples: &[Sample<T>], weights: &LossWeights) -> Result<MetricsReport> {
    let reports = samples
        .iter()
        .map(|s| {
            let pred = pipeline.complete(&s.rgb, &s.raw_depth)?;
            evaluate_with(&pred, &s.gt_depth, weights.ssim_params())
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&reports)
}

/// Trains the four variants with the same seed and data, then evaluates
/// each on `eval`. With `parallel`, the variants train on separate threads;
/// results do not depend on it.
pub fn ablation_suite<T: Scalar>(base: &TrainConfig, train_set: &[Sample<T>], eval: &[Sample<T>], parallel: bool) -> Result<AblationTable> {
    if eval.is_empty() {
        return Err(Error::Usage("evaluation dataset is empty".into()));
    }
    let run = |label: &str| -> Result<AblationRow> {
        let mut config = base.clone();
        config.ablation = ablation_variant(label).expect("known label");
        let (trainer, log) = train(&config, train_set.to_vec(), |_| {})?;
        Ok(AblationRow {
            label: label.to_string(),
            metrics: evaluate_pipeline(trainer.pipeline(), eval, &config.loss_weights)?,
            final_total: log.last().map_or(f64::NAN, |r| r.total),
        })
    };
    let rows = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = ABLATION_LABELS.iter().map(|l| s.spawn(|| run(l))).collect();
            handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect::<Result<Vec<_>>>()
        })?
    } else {
        ABLATION_LABELS.iter().map(|l| run(l)).collect::<Result<Vec<_>>>()?
    };
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            steps: 3,
            network: NetworkConfig {
                base_channels: 4,
                depth_levels: 2,
            },
            patch_size: 32,
            ..TrainConfig::default()
        }
    }

    fn scenes(n: u64) -> Vec<Sample<f32>> {
        (0..n).map(|s| make_synthetic_scene(s, 40, 40, &SceneConfig::default()).unwrap()).collect()
    }

    #[test]
    fn ablation_switches_zero_weights() {
        let mut c = tiny();
        c.ablation = ablation_variant("SA").unwrap();
        let w = c.effective_weights();
        assert_eq!((w.lambda_s, w.lambda_bc), (0.0, 0.0));
        assert!(!c.pipeline_config().use_bc);
        assert_eq!(ablation_variant("W/O-SA").unwrap().use_sa, false);
        assert!(ablation_variant("bogus").is_none());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig {
            steps: 5,
            ..TrainConfig::default()
        };
        assert_eq!(c.learning_rate_at(0), 1e-3);
        assert!((c.learning_rate_at(2) - 0.5 * (1e-3 + 1e-5)).abs() < 1e-15);
        assert!((c.learning_rate_at(4) - 1e-5).abs() < 1e-18);
        let flat = TrainConfig {
            lr_schedule: LrSchedule::Constant,
            ..c
        };
        assert_eq!(flat.learning_rate_at(4), 1e-3);
        assert!(TrainConfig { final_lr_fraction: 1.5, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn degenerate_weights_make_total_equal_l_sa() {
        let mut c = tiny();
        c.ablation.use_ssim = false;
        c.ablation.use_bc = false;
        c.loss_weights.lambda_n = 0.0;
        c.loss_weights.lambda_b = 0.0;
        let (_, log) = train(&c, scenes(2), |_| {}).unwrap();
        assert_eq!(log.len(), 3);
        for r in &log {
            assert_eq!(r.total, r.l_sa);
        }
    }

    #[test]
    fn rejects_empty_and_invalid() {
        assert!(matches!(Trainer::<f32>::new(tiny(), vec![]), Err(Error::Usage(_))));
        let mut c = tiny();
        c.learning_rate = 0.0;
        assert!(matches!(Trainer::new(c, scenes(1)), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_loss_aborts_with_step_and_term() {
        let mut trainer = Trainer::new(tiny(), scenes(1)).unwrap();
        let store = trainer.pipeline_mut().params_mut();
        let id = store.id("completion.head.bias").unwrap();
        store.get_mut(id).data_mut()[0] = f32::NAN;
        match trainer.step() {
            Err(Error::NonFinite { term, step }) => {
                assert_eq!(step, 1);
                assert_eq!(term, "l_sa");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn log_round_trips_as_ndjson() {
        let r = LogRecord {
            step: 1,
            l_sa: 0.5,
            l_s: 0.25,
            l_bc: 0.0,
            l_n: 1.0,
            l_b: 0.125,
            total: 0.75,
            wall_clock_s: 0.0,
        };
        let mut buf = Vec::new();
        write_log(&mut buf, &[r, r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: LogRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn gradcheck_detects_corruption() {
        let config = GradcheckConfig {
            params_per_network: 3,
            ..GradcheckConfig::default()
        };
        let ok = gradcheck::<f64>(&config, None).unwrap();
        assert!(ok.passed, "{ok:?}");
        let bad = gradcheck::<f64>(&config, Some("completion.enc0.bias")).unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.failures, vec!["completion.enc0.bias".to_string()]);
    }
}
