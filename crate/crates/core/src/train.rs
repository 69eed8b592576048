//! Losses, AdamW, the learning-rate schedule and the patch training loop.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{upsample_values, Graph, Var};
use crate::memory::{Category, MemoryLedger};
use crate::metrics::{confusion, multiclass_report, report, Confusion, MetricsReport};
use crate::nets::{AggregatorSpec, Architecture, Model};
use crate::patch::{
    extract_patches, fill_zblock_for_inference, fuse_add, fuse_concat_seg, make_global_patch, sample_patches,
    zblock_var, PatchGrid, PatchPlan, ZBlock,
};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Classification,
    Segmentation,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "cls",
            Task::Segmentation => "seg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cls" | "classification" => Some(Task::Classification),
            "seg" | "segmentation" => Some(Task::Segmentation),
            _ => None,
        }
    }

    pub fn accum_cap(self) -> usize {
        match self {
            Task::Classification => 3,
            Task::Segmentation => 2,
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Task::Classification => 1e-3,
            Task::Segmentation => 1e-4,
        }
    }
}

pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub grid: PatchGrid,
    pub plan: PatchPlan,
    pub use_global: bool,
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Number of optimizer steps the schedule spans.
    pub total_steps: usize,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub seed: u64,
    pub memory_budget_bytes: Option<u64>,
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// Every violated constraint, or nothing.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.accum_steps == 0 || self.accum_steps > self.task.accum_cap() {
            v.push(format!(
                "accum_steps: {} outside [1, {}]",
                self.accum_steps,
                self.task.accum_cap()
            ));
        }
        if self.warmup_steps >= self.total_steps {
            v.push(format!(
                "warmup_steps: {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            v.push("batch_size: must be at least 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            v.push(format!("base_lr: {} must be positive", self.base_lr));
        }
        let a = &self.adam;
        if !(a.weight_decay.is_finite() && a.weight_decay >= 0.0) {
            v.push(format!("weight_decay: {} must be nonnegative", a.weight_decay));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            v.push("adam betas must lie in [0, 1)".into());
        }
        if !(a.eps > 0.0) {
            v.push("adam eps must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Optimizer steps issued by one outer step.
    pub fn steps_per_outer(&self) -> usize {
        self.plan.iters.div_ceil(self.accum_steps)
    }
}

/// Warmup then linear decay.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (w, t) = (cfg.warmup_steps as f64, cfg.total_steps as f64);
    let s = step as f64;
    if step < cfg.warmup_steps {
        cfg.base_lr * (s + 1.0) / w
    } else {
        (cfg.base_lr * (t - s) / (t - w)).max(0.0)
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<E: Element = f32> {
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
    pub step: u64,
}

impl<E: Element> OptimizerState<E> {
    pub fn new(model: &Model<E>) -> Self {
        let z: Vec<Tensor<E>> = model.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: z.clone(),
            v: z,
            step: 0,
        }
    }

    pub fn nbytes(&self) -> u64 {
        self.m.iter().chain(&self.v).map(Tensor::nbytes).sum()
    }
}

/// Decoupled-weight-decay Adam update from the model's accumulated
/// gradients, which are zeroed afterwards.
pub fn adamw_step<E: Element>(model: &mut Model<E>, state: &mut OptimizerState<E>, lr: f64, cfg: &AdamConfig) -> Result<()> {
    for (name, g) in model.names().iter().zip(model.grads()) {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let n = model.values().len();
    for i in 0..n {
        let grad = model.grads()[i].data().to_vec();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = model.values_mut()[i].data_mut();
        for j in 0..p.len() {
            let gj = grad[j].as_f64();
            let mj = cfg.beta1 * m[j].as_f64() + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j].as_f64() + (1.0 - cfg.beta2) * gj * gj;
            m[j] = E::of(mj);
            v[j] = E::of(vj);
            let update = (mj / c1) / ((vj / c2).sqrt() + cfg.eps) + cfg.weight_decay * p[j].as_f64();
            p[j] = E::of(p[j].as_f64() - lr * update);
        }
    }
    model.zero_grads();
    Ok(())
}

pub fn cross_entropy_loss<E: Element>(g: &mut Graph<E>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

pub fn bce_loss<E: Element>(g: &mut Graph<E>, logits: Var, targets: Var) -> Result<Var> {
    g.bce_with_logits(logits, targets)
}

pub fn dice_loss<E: Element>(g: &mut Graph<E>, probs: Var, targets: Var) -> Result<Var> {
    g.dice_loss(probs, targets, DICE_SMOOTH)
}

/// BCE on logits plus Dice on sigmoid probabilities.
pub fn seg_loss<E: Element>(g: &mut Graph<E>, logits: Var, targets: Var) -> Result<Var> {
    let bce = bce_loss(g, logits, targets)?;
    let probs = g.sigmoid(logits);
    let dice = dice_loss(g, probs, targets)?;
    g.add(bce, dice)
}

/// Aggregator matching a backbone, grid and fusion choice.
pub fn aggregator_spec(task: Task, backbone: &Architecture, grid: &PatchGrid, use_global: bool, num_classes: usize) -> Result<AggregatorSpec> {
    match (task, backbone) {
        (Task::Classification, Architecture::ClsBackbone(s)) => Ok(AggregatorSpec::Cls {
            rows: grid.rows,
            cols: grid.cols,
            feature_dim: s.out_channels,
            num_classes,
        }),
        (Task::Segmentation, Architecture::SegBackbone(s)) => Ok(AggregatorSpec::Seg {
            height: grid.height,
            width: grid.width,
            in_channels: if use_global { 2 * s.out_channels } else { s.out_channels },
        }),
        _ => Err(Error::Build(format!("backbone {backbone:?} does not fit task {task:?}"))),
    }
}

/// Supervision for one batch.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Labels(&'a [usize]),
    /// One `[1, M, N]` binary mask per image.
    Masks(&'a [&'a Tensor]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub outer_step: usize,
    pub inner_iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub peak_bytes: u64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "outer_step,inner_iter,lr,loss,peak_bytes";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6e},{:.6},{}",
            self.outer_step, self.inner_iter, self.lr, self.loss, self.peak_bytes
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean inner-iteration loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub metrics: Option<MetricsReport>,
    pub peak_bytes: u64,
    pub wall_seconds: f64,
}

/// Sizes of the buffers one outer step allocates, in elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct StepSizes {
    pub data: u64,
    pub zcache: u64,
    pub theta1_patches: u64,
    pub theta1_global: u64,
    pub theta2: u64,
}

pub const PHASE_SETUP: &str = "setup";
pub const PHASE_LOAD: &str = "load-batch";
pub const PHASE_ZINIT: &str = "z-init";
pub const PHASE_THETA1: &str = "theta1-forward";
pub const PHASE_GLOBAL: &str = "global-forward";
pub const PHASE_THETA2: &str = "theta2-forward";
pub const PHASE_BACKWARD: &str = "backward";
pub const PHASE_STEP: &str = "optimizer-step";
pub const PHASE_RELEASE: &str = "release-batch";

pub struct Trainer {
    pub cfg: TrainConfig,
    pub backbone: Model,
    pub aggregator: Model,
    opt_backbone: OptimizerState,
    opt_aggregator: OptimizerState,
    pub ledger: MemoryLedger,
    rng: ChaCha8Rng,
    /// Optimizer steps taken.
    pub step: usize,
    pub outer: usize,
    pub log: Vec<LogRow>,
    /// Logits of the most recent inner iteration.
    pub last_logits: Option<Tensor>,
    /// Sampled cells per image at every inner iteration of the last outer step.
    pub last_samples: Vec<Vec<Vec<usize>>>,
    /// Optional record of the schedule, for inspection in tests.
    pub trace: Option<StepTrace>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepTrace {
    /// `(outer_step, inner_iter)` after which each optimizer step ran.
    pub steps_after: Vec<(usize, usize)>,
    /// All parameter values at the start of every inner iteration.
    pub params_at_iter: Vec<Vec<f32>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, backbone: Model, aggregator: Model) -> Result<Self> {
        cfg.validate()?;
        let expect = aggregator_spec(
            cfg.task,
            &backbone.arch,
            &cfg.grid,
            cfg.use_global,
            match &aggregator.arch {
                Architecture::Aggregator(AggregatorSpec::Cls { num_classes, .. }) => *num_classes,
                _ => 1,
            },
        )?;
        if aggregator.arch != Architecture::Aggregator(expect) {
            return Err(Error::Build(format!(
                "aggregator {:?} does not match expected {expect:?}",
                aggregator.arch
            )));
        }
        let input = backbone.arch.input_shape(1);
        if input[1..] != [cfg.grid.channels, cfg.grid.patch_h(), cfg.grid.patch_w()] {
            return Err(Error::Build(format!(
                "backbone input {input:?} does not match grid patches"
            )));
        }
        let mut ledger = MemoryLedger::with_budget(cfg.memory_budget_bytes);
        ledger.alloc(Category::Parameters, backbone.param_bytes() + aggregator.param_bytes(), PHASE_SETUP)?;
        let opt_backbone = OptimizerState::new(&backbone);
        let opt_aggregator = OptimizerState::new(&aggregator);
        ledger.alloc(Category::OptimizerState, opt_backbone.nbytes() + opt_aggregator.nbytes(), PHASE_SETUP)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5A3D_1E2B_9C4F_7061);
        Ok(Self {
            cfg,
            backbone,
            aggregator,
            opt_backbone,
            opt_aggregator,
            ledger,
            rng,
            step: 0,
            outer: 0,
            log: Vec::new(),
            last_logits: None,
            last_samples: Vec::new(),
            trace: None,
        })
    }

    fn param_bytes(&self) -> u64 {
        self.backbone.param_bytes() + self.aggregator.param_bytes()
    }

    pub(crate) fn step_sizes(task: Task, backbone: &Architecture, aggregator: &Architecture, grid: &PatchGrid, plan: &PatchPlan, use_global: bool, batch: usize) -> StepSizes {
        let b = batch as u64;
        let (c, ph, pw) = (grid.channels as u64, grid.patch_h() as u64, grid.patch_w() as u64);
        let (m, n) = (grid.height as u64, grid.width as u64);
        let k = plan.k as u64;
        let patch_px = c * ph * pw;
        let global_px = if use_global { b * patch_px } else { 0 };
        let (zsize, cell) = match backbone.output_shape(1).as_slice() {
            &[_, d] => ((d * grid.cells()) as u64, d as u64),
            &[_, ch, _, _] => (ch as u64 * m * n, ch as u64 * ph * pw),
            _ => unreachable!("backbone outputs are rank 2 or 4"),
        };
        let targets = match task {
            Task::Classification => b,
            Task::Segmentation => b * m * n,
        };
        let theta1_patches = b * k * patch_px + backbone.stash_elements(batch * plan.k);
        let theta1_global = if use_global { b * patch_px + backbone.stash_elements(batch) } else { 0 };
        // Z base constant, reshaped fresh features, scatter output.
        let mut theta2 = b * zsize + b * k * cell + b * zsize;
        if use_global {
            theta2 += match task {
                Task::Classification => b * cell + 2 * b * zsize,
                Task::Segmentation => b * zsize + 2 * b * zsize,
            };
        }
        theta2 += aggregator.stash_elements(batch);
        theta2 += match task {
            Task::Classification => 1,
            // target constant, bce, sigmoid, dice, sum
            Task::Segmentation => b * m * n + 1 + b * m * n + 1 + 1,
        };
        StepSizes {
            data: b * c * m * n + global_px + targets,
            zcache: b * zsize,
            theta1_patches,
            theta1_global,
            theta2,
        }
    }

    /// One outer step over a batch: `J` inner iterations of
    /// sample, extract, update Z, aggregate, loss, backward, with an optimizer
    /// step every `accum_steps` iterations and at the end.
    pub fn train_outer_step(&mut self, images: &[&Tensor], targets: Targets) -> Result<Vec<f64>> {
        let cfg = self.cfg.clone();
        let grid = cfg.grid;
        let plan = cfg.plan;
        let b = images.len();
        match (cfg.task, targets) {
            (Task::Classification, Targets::Labels(l)) if l.len() == b => {}
            (Task::Segmentation, Targets::Masks(mk)) if mk.len() == b => {
                for mask in mk {
                    if mask.shape() != [1, grid.height, grid.width] {
                        return Err(Error::dim(format!("mask {:?} does not match image", mask.shape())));
                    }
                }
            }
            _ => return Err(Error::contract("targets do not match task or batch size")),
        }
        if b == 0 {
            return Err(Error::contract("empty batch"));
        }
        let sizes = Self::step_sizes(cfg.task, &self.backbone.arch, &self.aggregator.arch, &grid, &plan, cfg.use_global, b);
        self.ledger.alloc(Category::Data, 4 * sizes.data, PHASE_LOAD)?;
        let globals: Vec<Tensor> = if cfg.use_global {
            images.iter().map(|x| make_global_patch(x, &grid)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let target_tensor = match targets {
            Targets::Masks(mk) => {
                let data: Vec<f32> = mk.iter().flat_map(|t| t.data().iter().copied()).collect();
                Some(Tensor::new(vec![b, 1, grid.height, grid.width], data)?)
            }
            Targets::Labels(_) => None,
        };

        let mut zs: Vec<ZBlock> = match self.backbone.arch.output_shape(1).as_slice() {
            &[_, d] => vec![ZBlock::grid(grid.rows, grid.cols, d); b],
            &[_, ch, _, _] => vec![ZBlock::canvas(&grid, ch); b],
            _ => unreachable!("backbone outputs are rank 2 or 4"),
        };
        self.ledger.alloc(Category::ZCache, 4 * sizes.zcache, PHASE_ZINIT)?;

        let mut seen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); b];
        let mut losses = Vec::with_capacity(plan.iters);
        let mut window = 0;
        self.last_samples = vec![Vec::new(); b];
        for j in 0..plan.iters {
            if let Some(tr) = self.trace.as_mut() {
                let all = self.backbone.values().iter().chain(self.aggregator.values());
                tr.params_at_iter.push(all.flat_map(|t| t.data().iter().copied()).collect());
            }
            let mut picks = Vec::with_capacity(b);
            for (i, s) in seen.iter_mut().enumerate() {
                let p = sample_patches(&mut self.rng, &plan, s)?;
                s.extend(p.iter().copied());
                self.last_samples[i].push(p.clone());
                picks.push(p);
            }

            let mut g = Graph::<f32>::new();
            let pb = self.backbone.bind(&mut g);
            let pa = self.aggregator.bind(&mut g);
            let mut pix = Vec::with_capacity(b * plan.k * grid.channels * grid.patch_h() * grid.patch_w());
            for (x, p) in images.iter().zip(&picks) {
                pix.extend(extract_patches(x, &grid, p)?);
            }
            let pv = g.input(Tensor::new(vec![b * plan.k, grid.channels, grid.patch_h(), grid.patch_w()], pix)?);
            let feats = self.backbone.forward(&mut g, &pb, pv)?;
            let mut live = g.stash_bytes();
            debug_assert_eq!(live, 4 * sizes.theta1_patches);
            self.ledger.alloc(Category::Activations, live, PHASE_THETA1)?;

            let gfeat = if cfg.use_global {
                let gv = g.input(Tensor::stack(
                    &globals
                        .iter()
                        .map(|t| t.clone().reshaped(&[1, grid.channels, grid.patch_h(), grid.patch_w()]))
                        .collect::<Result<Vec<_>>>()?,
                )?);
                let f = self.backbone.forward(&mut g, &pb, gv)?;
                let now = g.stash_bytes();
                self.ledger.alloc(Category::Activations, now - live, PHASE_GLOBAL)?;
                live = now;
                Some(f)
            } else {
                None
            };

            let cell_shape = zs[0].cell_shape();
            for (i, z) in zs.iter_mut().enumerate() {
                let rows: Vec<Tensor> = (0..plan.k)
                    .map(|r| g.value(feats).slab(i * plan.k + r)?.reshaped(&cell_shape))
                    .collect::<Result<_>>()?;
                z.update(&picks[i], &rows)?;
            }
            let zv = zblock_var(&mut g, &zs, feats)?;
            let loss = match cfg.task {
                Task::Classification => {
                    let fused = match gfeat {
                        Some(f) => fuse_add(&mut g, zv, f)?,
                        None => zv,
                    };
                    let logits = self.aggregator.forward(&mut g, &pa, fused)?;
                    self.last_logits = Some(g.value(logits).clone());
                    let Targets::Labels(labels) = targets else { unreachable!() };
                    cross_entropy_loss(&mut g, logits, labels)?
                }
                Task::Segmentation => {
                    let fused = match gfeat {
                        Some(f) => fuse_concat_seg(&mut g, zv, f)?,
                        None => zv,
                    };
                    let logits = self.aggregator.forward(&mut g, &pa, fused)?;
                    self.last_logits = Some(g.value(logits).clone());
                    let tv = g.input(target_tensor.clone().expect("masks present"));
                    seg_loss(&mut g, logits, tv)?
                }
            };
            let now = g.stash_bytes();
            self.ledger.alloc(Category::Activations, now - live, PHASE_THETA2)?;
            live = now;
            debug_assert_eq!(live, 4 * (sizes.theta1_patches + sizes.theta1_global + sizes.theta2));

            if window == 0 {
                self.ledger.alloc(Category::Gradients, self.param_bytes(), PHASE_BACKWARD)?;
            }
            g.backward(loss)?;
            self.backbone.absorb_grads(&g, &pb)?;
            self.aggregator.absorb_grads(&g, &pa)?;
            let loss_value = g.value(loss).data()[0] as f64;
            drop(g);
            self.ledger.free(Category::Activations, live, PHASE_BACKWARD)?;
            losses.push(loss_value);

            window += 1;
            let lr = lr_at(self.step, &cfg);
            if window == cfg.accum_steps || j + 1 == plan.iters {
                if self.step >= cfg.total_steps {
                    return Err(Error::Plan(format!(
                        "schedule of {} optimizer steps exhausted",
                        cfg.total_steps
                    )));
                }
                adamw_step(&mut self.backbone, &mut self.opt_backbone, lr, &cfg.adam)?;
                adamw_step(&mut self.aggregator, &mut self.opt_aggregator, lr, &cfg.adam)?;
                self.ledger.free(Category::Gradients, self.param_bytes(), PHASE_STEP)?;
                if let Some(tr) = self.trace.as_mut() {
                    tr.steps_after.push((self.outer, j));
                }
                self.step += 1;
                window = 0;
            }
            self.log.push(LogRow {
                outer_step: self.outer,
                inner_iter: j,
                lr,
                loss: loss_value,
                peak_bytes: self.ledger.peak(),
            });
        }

        self.ledger.free(Category::ZCache, 4 * sizes.zcache, PHASE_RELEASE)?;
        self.ledger.free(Category::Data, 4 * sizes.data, PHASE_RELEASE)?;
        self.outer += 1;
        Ok(losses)
    }

    pub fn train_outer_step_cls(&mut self, images: &[&Tensor], labels: &[usize]) -> Result<Vec<f64>> {
        self.train_outer_step(images, Targets::Labels(labels))
    }

    pub fn train_outer_step_seg(&mut self, images: &[&Tensor], masks: &[&Tensor]) -> Result<Vec<f64>> {
        self.train_outer_step(images, Targets::Masks(masks))
    }

    pub fn optimizer_states(&self) -> (&OptimizerState, &OptimizerState) {
        (&self.opt_backbone, &self.opt_aggregator)
    }
}

/// Inference setup shared by evaluation and prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSetup {
    pub task: Task,
    pub grid: PatchGrid,
    pub use_global: bool,
    /// Patches per backbone pass when filling Z.
    pub chunk: usize,
}

/// Logits for one image from a fully computed Z: `[1, K]` or `[1, 1, M, N]`.
pub fn predict_logits<E: Element>(backbone: &Model<E>, aggregator: &Model<E>, x: &Tensor<E>, setup: &EvalSetup) -> Result<Tensor<E>> {
    let grid = setup.grid;
    let z = fill_zblock_for_inference(backbone, x, &grid, setup.chunk)?;
    let mut g = Graph::<E>::new();
    let pb = backbone.bind_frozen(&mut g);
    let pa = aggregator.bind_frozen(&mut g);
    let mut shape = vec![1];
    shape.extend_from_slice(z.storage().shape());
    let zv = g.input(z.storage().clone().reshaped(&shape)?);
    let fused = if setup.use_global {
        let gp = make_global_patch(x, &grid)?.reshaped(&[1, grid.channels, grid.patch_h(), grid.patch_w()])?;
        let gv = g.input(gp);
        let f = backbone.forward(&mut g, &pb, gv)?;
        match setup.task {
            Task::Classification => fuse_add(&mut g, zv, f)?,
            Task::Segmentation => fuse_concat_seg(&mut g, zv, f)?,
        }
    } else {
        zv
    };
    let y = aggregator.forward(&mut g, &pa, fused)?;
    Ok(g.value(y).clone())
}

/// Prediction for one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Class(usize),
    /// Binary mask at target resolution.
    Mask(Vec<bool>),
}

/// Evaluation targets: labels, or full-resolution `[1, H, W]` masks which
/// may be an integer multiple of the model's output size.
#[derive(Clone, Copy, Debug)]
pub enum EvalTargets<'a> {
    Labels(&'a [usize], usize),
    Masks(&'a [&'a Tensor]),
}

pub fn evaluate(
    backbone: &Model,
    aggregator: &Model,
    images: &[&Tensor],
    targets: EvalTargets,
    setup: &EvalSetup,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let mut preds = Vec::with_capacity(images.len());
    match targets {
        EvalTargets::Labels(labels, num_classes) => {
            if labels.len() != images.len() {
                return Err(Error::contract("one label per image required"));
            }
            let mut classes = Vec::with_capacity(images.len());
            for x in images {
                let y = predict_logits(backbone, aggregator, x, setup)?;
                let c = argmax(y.data());
                classes.push(c);
                preds.push(Prediction::Class(c));
            }
            Ok((multiclass_report(&classes, labels, num_classes)?, preds))
        }
        EvalTargets::Masks(masks) => {
            if masks.len() != images.len() {
                return Err(Error::contract("one mask per image required"));
            }
            let mut total = Confusion::default();
            for (x, mask) in images.iter().zip(masks) {
                let y = predict_logits(backbone, aggregator, x, setup)?;
                let (h, w) = (y.shape()[2], y.shape()[3]);
                let (th, tw) = (mask.shape()[1], mask.shape()[2]);
                if th % h != 0 || tw % w != 0 {
                    return Err(Error::dim(format!("prediction {h}x{w} vs mask {th}x{tw}")));
                }
                let up = upsample_values(&y, th / h, tw / w);
                // sigmoid(x) > 0.5 exactly when x > 0
                let p: Vec<bool> = up.data().iter().map(|&v| v > 0.0).collect();
                let t: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
                total.add(&confusion(&p, &t)?);
                preds.push(Prediction::Mask(p));
            }
            Ok((report(&total)?, preds))
        }
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
