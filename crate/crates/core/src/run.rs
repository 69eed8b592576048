//! Declarative runs: a flat `key=value` config, the epoch loop around
//! [`Trainer`], and the artifacts a run leaves behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{load_dataset, Dataset, Samples};
use crate::error::{Error, Result};
use crate::graph::avgpool_values_hw;
use crate::memory::{compare_modes, estimate_peak, ConfigEstimate, EstimateConfig};
use crate::metrics::MetricsReport;
use crate::nets::{build_aggregator, build_backbone_cls, build_backbone_seg, Architecture, BackboneSpec, Model};
use crate::patch::{PatchGrid, PatchPlan};
use crate::tensor::Tensor;
use crate::train::{
    aggregator_spec, evaluate, AdamConfig, EvalSetup, EvalTargets, LogRow, Prediction, Targets, Task, TrainConfig,
    TrainReport, Trainer,
};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub data: PathBuf,
    /// Held-out set for the final metrics; the training set when absent.
    pub test_data: Option<PathBuf>,
    pub out: PathBuf,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub sample_rate: f64,
    pub inner_iters: usize,
    pub use_global_patch: bool,
    pub base_lr: f64,
    /// Defaults to 5% of the optimizer steps.
    pub warmup_steps: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub seed: u64,
    pub memory_budget_bytes: Option<u64>,
    pub weight_decay: f64,
    pub widths: Vec<usize>,
    /// Feature width `d` for classification, map channels `C` for segmentation.
    pub feature_dim: usize,
    pub stem_stride: usize,
    /// Area-average images (and max-pool training masks) by this factor first.
    pub downsample: usize,
    pub eval_chunk: usize,
}

const KEYS: &[&str] = &[
    "task",
    "data",
    "test_data",
    "out",
    "grid_rows",
    "grid_cols",
    "sample_rate",
    "inner_iters",
    "use_global_patch",
    "base_lr",
    "warmup_steps",
    "epochs",
    "batch_size",
    "accum_steps",
    "seed",
    "memory_budget_bytes",
    "weight_decay",
    "widths",
    "feature_dim",
    "stem_stride",
    "downsample",
    "eval_chunk",
];

impl RunConfig {
    /// Defaults for a task; paths still need filling in.
    pub fn new(task: Task) -> Self {
        let cls = task == Task::Classification;
        Self {
            task,
            data: PathBuf::new(),
            test_data: None,
            out: PathBuf::new(),
            grid_rows: 4,
            grid_cols: 4,
            sample_rate: 0.25,
            inner_iters: if cls { 3 } else { 2 },
            use_global_patch: true,
            base_lr: task.default_lr(),
            warmup_steps: None,
            epochs: 10,
            batch_size: 4,
            accum_steps: task.accum_cap(),
            seed: 0,
            memory_budget_bytes: None,
            weight_decay: AdamConfig::default().weight_decay,
            widths: if cls { vec![16, 32, 64] } else { vec![16, 32] },
            feature_dim: if cls { 64 } else { 8 },
            stem_stride: 1,
            downsample: 1,
            eval_chunk: 4,
        }
    }

    /// Parse a config file; every problem is reported at once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut errors = Vec::new();
        let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    let k = k.trim();
                    if !KEYS.contains(&k) {
                        errors.push(format!("line {}: unknown key `{k}`", ln + 1));
                    } else if kv.insert(k, v.trim()).is_some() {
                        errors.push(format!("line {}: duplicate key `{k}`", ln + 1));
                    }
                }
                None => errors.push(format!("line {}: expected key=value", ln + 1)),
            }
        }
        let task = match kv.get("task").map(|s| Task::parse(s)) {
            Some(Some(t)) => t,
            Some(None) => {
                errors.push(format!("task: `{}` is not cls or seg", kv["task"]));
                Task::Classification
            }
            None => {
                errors.push("task: missing".into());
                Task::Classification
            }
        };
        let mut cfg = Self::new(task);
        for (&k, &v) in &kv {
            if let Err(e) = cfg.set(k, v) {
                errors.push(e);
            }
        }
        if !kv.contains_key("data") {
            errors.push("data: missing".into());
        }
        if !kv.contains_key("out") {
            errors.push("out: missing".into());
        }
        errors.extend(cfg.violations());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse `{v}`"))
        }
        match key {
            "task" => {}
            "data" => self.data = PathBuf::from(v),
            "test_data" => self.test_data = Some(PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "grid_rows" => self.grid_rows = num(key, v)?,
            "grid_cols" => self.grid_cols = num(key, v)?,
            "sample_rate" => self.sample_rate = num(key, v)?,
            "inner_iters" => self.inner_iters = num(key, v)?,
            "use_global_patch" => self.use_global_patch = num(key, v)?,
            "base_lr" => self.base_lr = num(key, v)?,
            "warmup_steps" => self.warmup_steps = Some(num(key, v)?),
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "accum_steps" => self.accum_steps = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "memory_budget_bytes" => self.memory_budget_bytes = Some(num(key, v)?),
            "weight_decay" => self.weight_decay = num(key, v)?,
            "widths" => {
                self.widths = v
                    .split(',')
                    .map(|w| num(key, w.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "feature_dim" => self.feature_dim = num(key, v)?,
            "stem_stride" => self.stem_stride = num(key, v)?,
            "downsample" => self.downsample = num(key, v)?,
            "eval_chunk" => self.eval_chunk = num(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task={}", self.task.name());
        let _ = writeln!(s, "data={}", self.data.display());
        if let Some(t) = &self.test_data {
            let _ = writeln!(s, "test_data={}", t.display());
        }
        let _ = writeln!(s, "out={}", self.out.display());
        let _ = writeln!(s, "grid_rows={}", self.grid_rows);
        let _ = writeln!(s, "grid_cols={}", self.grid_cols);
        let _ = writeln!(s, "sample_rate={}", self.sample_rate);
        let _ = writeln!(s, "inner_iters={}", self.inner_iters);
        let _ = writeln!(s, "use_global_patch={}", self.use_global_patch);
        let _ = writeln!(s, "base_lr={}", self.base_lr);
        if let Some(w) = self.warmup_steps {
            let _ = writeln!(s, "warmup_steps={w}");
        }
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "accum_steps={}", self.accum_steps);
        let _ = writeln!(s, "seed={}", self.seed);
        if let Some(b) = self.memory_budget_bytes {
            let _ = writeln!(s, "memory_budget_bytes={b}");
        }
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(s, "widths={}", widths.join(","));
        let _ = writeln!(s, "feature_dim={}", self.feature_dim);
        let _ = writeln!(s, "stem_stride={}", self.stem_stride);
        let _ = writeln!(s, "downsample={}", self.downsample);
        let _ = writeln!(s, "eval_chunk={}", self.eval_chunk);
        s
    }

    /// Constraints checkable without the dataset.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.grid_rows == 0 || self.grid_cols == 0 {
            v.push("grid_rows/grid_cols: must be at least 1".into());
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            v.push(format!("sample_rate: {} outside (0, 1]", self.sample_rate));
        }
        if self.inner_iters == 0 {
            v.push("inner_iters: must be at least 1".into());
        }
        if self.epochs == 0 {
            v.push("epochs: must be at least 1".into());
        }
        if self.downsample == 0 {
            v.push("downsample: must be at least 1".into());
        }
        if self.eval_chunk == 0 {
            v.push("eval_chunk: must be at least 1".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            v.push("widths: need positive stage widths".into());
        }
        if self.task == Task::Classification && self.widths.last() != Some(&self.feature_dim) {
            v.push("feature_dim: must equal the last classification width".into());
        }
        if self.task == Task::Segmentation && self.widths.len() != 2 {
            v.push("widths: segmentation backbone takes exactly two widths".into());
        }
        if self.grid_rows > 0 && self.grid_cols > 0 && self.sample_rate > 0.0 && self.sample_rate <= 1.0 {
            let cells = self.grid_rows * self.grid_cols;
            let k = ((self.sample_rate * cells as f64 + 1e-9).floor() as usize).max(1);
            if k * self.inner_iters > cells {
                v.push(format!(
                    "inner_iters: {} iterations of {k} patches exceed the {cells} grid cells",
                    self.inner_iters
                ));
            }
        }
        // Schedule fields are checked by TrainConfig with a placeholder size.
        let probe = TrainConfig {
            task: self.task,
            grid: PatchGrid::new(1, 1, 1, 1, 1).expect("unit grid"),
            plan: PatchPlan { rate: 1.0, k: 1, iters: 1, cells: 1 },
            use_global: self.use_global_patch,
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps.unwrap_or(0),
            total_steps: usize::MAX,
            batch_size: self.batch_size,
            accum_steps: self.accum_steps,
            seed: self.seed,
            memory_budget_bytes: self.memory_budget_bytes,
            adam: AdamConfig {
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
        };
        v.extend(probe.violations());
        v
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Optimizer steps for `n` training samples.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size) * self.inner_iters.div_ceil(self.accum_steps)
    }

    pub fn warmup_for(&self, total: usize) -> usize {
        self.warmup_steps.unwrap_or(total / 20)
    }

    fn backbone_spec(&self, patch: (usize, usize)) -> BackboneSpec {
        BackboneSpec {
            in_channels: 1,
            widths: self.widths.clone(),
            out_channels: self.feature_dim,
            patch,
            stem_stride: if self.task == Task::Classification { self.stem_stride } else { 1 },
        }
    }

    /// Grid over the (possibly downsampled) images.
    pub fn grid_for(&self, height: usize, width: usize) -> Result<PatchGrid> {
        if !height.is_multiple_of(self.downsample) || !width.is_multiple_of(self.downsample) {
            return Err(Error::Config(vec![format!(
                "downsample: {} does not divide {height}x{width}",
                self.downsample
            )]));
        }
        PatchGrid::new(1, height / self.downsample, width / self.downsample, self.grid_rows, self.grid_cols)
    }

    /// Architectures for images of the given full size.
    pub fn architectures(&self, height: usize, width: usize, num_classes: usize) -> Result<(Architecture, Architecture)> {
        let grid = self.grid_for(height, width)?;
        let spec = self.backbone_spec((grid.patch_h(), grid.patch_w()));
        let backbone = match self.task {
            Task::Classification => Architecture::ClsBackbone(spec),
            Task::Segmentation => Architecture::SegBackbone(spec),
        };
        backbone.validate()?;
        let agg = aggregator_spec(self.task, &backbone, &grid, self.use_global_patch, num_classes)?;
        Ok((backbone, Architecture::Aggregator(agg)))
    }

    pub fn eval_setup(&self, height: usize, width: usize) -> Result<EvalSetup> {
        Ok(EvalSetup {
            task: self.task,
            grid: self.grid_for(height, width)?,
            use_global: self.use_global_patch,
            chunk: self.eval_chunk,
        })
    }
}

/// Area-average a `[C, H, W]` image by `f` in both directions.
pub fn downsample_image(x: &Tensor, f: usize) -> Tensor {
    if f == 1 {
        return x.clone();
    }
    let s = x.shape();
    let t = x.clone().reshaped(&[1, s[0], s[1], s[2]]).expect("same size");
    let out = avgpool_values_hw(&t, f, f);
    let o = out.shape().to_vec();
    out.reshaped(&o[1..]).expect("same size")
}

/// Max-pool a `[C, H, W]` binary mask by `f`: a coarse pixel is foreground
/// when any fine pixel under it is.
pub fn downsample_mask(m: &Tensor, f: usize) -> Tensor {
    if f == 1 {
        return m.clone();
    }
    let s = m.shape();
    let (c, h, w) = (s[0], s[1] / f, s[2] / f);
    let src = m.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let mut best = f32::NEG_INFINITY;
        for dy in 0..f {
            for dx in 0..f {
                best = best.max(src[(ch * s[1] + y * f + dy) * s[2] + x * f + dx]);
            }
        }
        best
    })
}

/// Everything a finished (or budget-aborted) run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub train_config: Option<TrainConfig>,
    pub backbone: Model,
    pub aggregator: Model,
    pub log: Vec<LogRow>,
    pub report: TrainReport,
    pub ledger_table: String,
    pub live_peak: u64,
    pub estimate: Option<ConfigEstimate>,
    pub predictions: Vec<Prediction>,
    /// Set when training stopped on the memory budget.
    pub aborted: Option<Error>,
}

fn num_classes(ds: &Dataset) -> usize {
    match ds.samples {
        Samples::Cls(_) => ds.manifest.classes,
        Samples::Seg(_) => 1,
    }
}

/// Evaluate models on a dataset at full mask resolution.
pub fn evaluate_dataset(cfg: &RunConfig, backbone: &Model, aggregator: &Model, ds: &Dataset) -> Result<(MetricsReport, Vec<Prediction>)> {
    let setup = cfg.eval_setup(ds.manifest.height, ds.manifest.width)?;
    let images: Vec<Tensor> = (0..ds.len()).map(|i| downsample_image(ds.image(i), cfg.downsample)).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    match &ds.samples {
        Samples::Cls(s) => {
            let labels: Vec<usize> = s.iter().map(|x| x.label).collect();
            evaluate(backbone, aggregator, &refs, EvalTargets::Labels(&labels, ds.manifest.classes), &setup)
        }
        Samples::Seg(s) => {
            let masks: Vec<&Tensor> = s.iter().map(|x| &x.mask).collect();
            evaluate(backbone, aggregator, &refs, EvalTargets::Masks(&masks), &setup)
        }
    }
}

/// Train on `train`, then evaluate on `test` (or `train`). Progress lines go
/// to `progress`.
pub fn train_on(cfg: &RunConfig, train: &Dataset, test: Option<&Dataset>, mut progress: impl FnMut(&str)) -> Result<RunOutcome> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    if train.manifest.task != cfg.task {
        return Err(Error::Config(vec![format!(
            "task: config says {} but the dataset holds {}",
            cfg.task.name(),
            train.manifest.task.name()
        )]));
    }
    let start = Instant::now();
    let (h, w) = (train.manifest.height, train.manifest.width);
    let classes = num_classes(train);
    let grid = cfg.grid_for(h, w)?;
    let plan = PatchPlan::new(&grid, cfg.sample_rate, cfg.inner_iters)?;
    let (bb_arch, agg_arch) = cfg.architectures(h, w, classes)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let backbone: Model = match &bb_arch {
        Architecture::ClsBackbone(s) => build_backbone_cls(s.clone(), &mut init_rng)?,
        Architecture::SegBackbone(s) => build_backbone_seg(s.clone(), &mut init_rng)?,
        Architecture::Aggregator(_) => unreachable!("backbone architecture"),
    };
    let Architecture::Aggregator(agg_spec) = agg_arch else { unreachable!("aggregator architecture") };
    let aggregator: Model = build_aggregator(agg_spec, &mut init_rng)?;

    let n = train.len();
    let total_steps = cfg.total_steps(n);
    let tcfg = TrainConfig {
        task: cfg.task,
        grid,
        plan,
        use_global: cfg.use_global_patch,
        base_lr: cfg.base_lr,
        warmup_steps: cfg.warmup_for(total_steps),
        total_steps,
        batch_size: cfg.batch_size,
        accum_steps: cfg.accum_steps,
        seed: cfg.seed,
        memory_budget_bytes: cfg.memory_budget_bytes,
        adam: AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    };
    let batch = cfg.batch_size.min(n);
    let estimate = estimate_peak(&EstimateConfig::new(
        cfg.task,
        bb_arch.clone(),
        grid,
        plan,
        batch,
        cfg.accum_steps,
        cfg.use_global_patch,
        classes,
    )?)?;
    progress(&format!(
        "grid {}x{} patch {}x{} k={} J={} steps={} estimated peak {} B",
        grid.rows,
        grid.cols,
        grid.patch_h(),
        grid.patch_w(),
        plan.k,
        plan.iters,
        total_steps,
        estimate.peak_bytes
    ));

    let mut outcome = RunOutcome {
        config: cfg.clone(),
        train_config: Some(tcfg.clone()),
        backbone: backbone.clone(),
        aggregator: aggregator.clone(),
        log: Vec::new(),
        report: TrainReport {
            epoch_losses: Vec::new(),
            metrics: None,
            peak_bytes: 0,
            wall_seconds: 0.0,
        },
        ledger_table: String::new(),
        live_peak: 0,
        estimate: Some(estimate),
        predictions: Vec::new(),
        aborted: None,
    };
    let mut trainer = match Trainer::new(tcfg, backbone, aggregator) {
        Ok(t) => t,
        Err(e @ Error::Budget(_)) => {
            outcome.aborted = Some(e);
            return Ok(outcome);
        }
        Err(e) => return Err(e),
    };

    // Training inputs at model resolution.
    let images: Vec<Tensor> = (0..n).map(|i| downsample_image(train.image(i), cfg.downsample)).collect();
    let masks: Vec<Tensor> = match &train.samples {
        Samples::Seg(s) => s.iter().map(|x| downsample_mask(&x.mask, cfg.downsample)).collect(),
        Samples::Cls(_) => Vec::new(),
    };
    let labels: Vec<usize> = match &train.samples {
        Samples::Cls(s) => s.iter().map(|x| x.label).collect(),
        Samples::Seg(_) => Vec::new(),
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let result = match cfg.task {
                Task::Classification => {
                    let ls: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    trainer.train_outer_step(&xs, Targets::Labels(&ls))
                }
                Task::Segmentation => {
                    let ms: Vec<&Tensor> = chunk.iter().map(|&i| &masks[i]).collect();
                    trainer.train_outer_step(&xs, Targets::Masks(&ms))
                }
            };
            match result {
                Ok(losses) => {
                    sum += losses.iter().sum::<f64>();
                    count += losses.len();
                }
                Err(e @ Error::Budget(_)) => {
                    outcome.aborted = Some(e);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if count > 0 {
            let mean = sum / count as f64;
            progress(&format!("epoch {} loss {mean:.6}", epoch + 1));
            outcome.report.epoch_losses.push(mean);
        }
    }

    outcome.live_peak = trainer.ledger.peak();
    outcome.ledger_table = trainer.ledger.report_table();
    outcome.log = std::mem::take(&mut trainer.log);
    outcome.report.peak_bytes = outcome.live_peak;
    outcome.backbone = trainer.backbone;
    outcome.aggregator = trainer.aggregator;
    if outcome.aborted.is_none() {
        let (metrics, preds) = evaluate_dataset(cfg, &outcome.backbone, &outcome.aggregator, test.unwrap_or(train))?;
        progress(&format!("metrics {}", metrics.csv_row()));
        outcome.report.metrics = Some(metrics);
        outcome.predictions = preds;
    }
    outcome.report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(outcome)
}

/// Save models plus the config that rebuilds their architectures.
pub fn save_checkpoint(dir: &Path, cfg: &RunConfig, backbone: &Model, aggregator: &Model) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    backbone.save(&dir.join("backbone"))?;
    aggregator.save(&dir.join("aggregator"))?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`] for images of the given
/// size and class count.
pub fn load_checkpoint(dir: &Path, height: usize, width: usize, num_classes: usize) -> Result<(RunConfig, Model, Model)> {
    let text = std::fs::read_to_string(dir.join("config.txt"))
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join("config.txt").display())))?;
    let cfg = RunConfig::parse(&text)?;
    let (bb, agg) = cfg.architectures(height, width, num_classes)?;
    let backbone = Model::load(bb, &dir.join("backbone"))?;
    let aggregator = Model::load(agg, &dir.join("aggregator"))?;
    Ok((cfg, backbone, aggregator))
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const LOG_FILE: &str = "train_log.csv";
pub const MEMORY_FILE: &str = "memory_report.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";

pub fn metrics_csv(m: &MetricsReport) -> String {
    format!("{}\n{}\n", MetricsReport::CSV_HEADER, m.csv_row())
}

/// Write checkpoint, log, memory report and (when present) metrics.
pub fn write_artifacts(outcome: &RunOutcome) -> Result<()> {
    let out = &outcome.config.out;
    std::fs::create_dir_all(out)?;
    save_checkpoint(&out.join(CHECKPOINT_DIR), &outcome.config, &outcome.backbone, &outcome.aggregator)?;
    let mut log = String::from(LogRow::CSV_HEADER);
    log.push('\n');
    for row in &outcome.log {
        log.push_str(&row.csv());
        log.push('\n');
    }
    std::fs::write(out.join(LOG_FILE), log)?;
    let mut mem = String::new();
    let _ = writeln!(mem, "live peak bytes: {}", outcome.live_peak);
    if let Some(est) = &outcome.estimate {
        let _ = writeln!(mem, "estimated peak bytes: {}", est.peak_bytes);
        if outcome.aborted.is_none() {
            let _ = writeln!(mem, "difference: {}", est.peak_bytes as i128 - outcome.live_peak as i128);
        }
    }
    if let Some(e) = &outcome.aborted {
        let _ = writeln!(mem, "aborted: {e}");
    }
    mem.push('\n');
    mem.push_str(&outcome.ledger_table);
    std::fs::write(out.join(MEMORY_FILE), mem)?;
    if let Some(m) = &outcome.report.metrics {
        std::fs::write(out.join(METRICS_FILE), metrics_csv(m))?;
    }
    Ok(())
}

/// Load data named by the config, train, write artifacts.
pub fn execute(cfg: &RunConfig, progress: impl FnMut(&str)) -> Result<RunOutcome> {
    let train = load_dataset(&cfg.data)?;
    let test = cfg.test_data.as_deref().map(load_dataset).transpose()?;
    let outcome = train_on(cfg, &train, test.as_ref(), progress)?;
    write_artifacts(&outcome)?;
    Ok(outcome)
}

/// Memory comparison for a config without training.
pub fn memory_report(cfg: &RunConfig, height: usize, width: usize, num_classes: usize, batch: usize) -> Result<String> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    let grid = cfg.grid_for(height, width)?;
    let plan = PatchPlan::new(&grid, cfg.sample_rate, cfg.inner_iters)?;
    let (bb, _) = cfg.architectures(height, width, num_classes)?;
    let est = EstimateConfig::new(cfg.task, bb, grid, plan, batch, cfg.accum_steps, cfg.use_global_patch, num_classes)?;
    Ok(compare_modes(&est)?.table())
}
