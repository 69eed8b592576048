use crate::error::Result;
use crate::memory::{Category, MemoryLedger};
use crate::nets::Architecture;
use crate::patch::{PatchGrid, PatchPlan};
use crate::train::{self, aggregator_spec, Task, Trainer};

/// A training configuration as far as memory is concerned.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateConfig {
    pub task: Task,
    pub backbone: Architecture,
    pub aggregator: Architecture,
    pub grid: PatchGrid,
    pub plan: PatchPlan,
    pub batch: usize,
    pub accum_steps: usize,
    pub use_global: bool,
}

impl EstimateConfig {
    /// Derive the aggregator from the backbone, grid and fusion choice.
    pub fn new(task: Task, backbone: Architecture, grid: PatchGrid, plan: PatchPlan, batch: usize, accum_steps: usize, use_global: bool, num_classes: usize) -> Result<Self> {
        let agg = aggregator_spec(task, &backbone, &grid, use_global, num_classes)?;
        Ok(Self {
            task,
            backbone,
            aggregator: Architecture::Aggregator(agg),
            grid,
            plan,
            batch,
            accum_steps,
            use_global,
        })
    }

    /// The same backbone applied to the whole image at once: a `1x1` grid,
    /// every patch, one inner iteration, no global patch.
    pub fn full_image(&self) -> Result<Self> {
        let g = self.grid;
        let grid = PatchGrid::new(g.channels, g.height, g.width, 1, 1)?;
        let num_classes = match &self.aggregator {
            Architecture::Aggregator(crate::nets::AggregatorSpec::Cls { num_classes, .. }) => *num_classes,
            _ => 1,
        };
        Self::new(
            self.task,
            self.backbone.with_patch((g.height, g.width)),
            grid,
            PatchPlan::new(&grid, 1.0, 1)?,
            self.batch,
            self.accum_steps,
            false,
            num_classes,
        )
    }
}

/// Predicted byte totals after each event of one outer step.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigEstimate {
    pub config: EstimateConfig,
    pub peak_bytes: u64,
    /// `(phase, live total after the event)` in execution order.
    pub phases: Vec<(&'static str, u64)>,
    pub parameter_bytes: u64,
    pub data_bytes: u64,
    pub zcache_bytes: u64,
    pub theta1_patch_bytes: u64,
    pub theta1_global_bytes: u64,
    pub theta2_bytes: u64,
}

impl ConfigEstimate {
    /// Peak of the activations category alone.
    pub fn activation_peak(&self) -> u64 {
        self.theta1_patch_bytes + self.theta1_global_bytes + self.theta2_bytes
    }
}

/// Replay the allocation sequence of the trainer symbolically. Every outer
/// step starts from the same state, so one step determines the peak.
pub fn estimate_peak(cfg: &EstimateConfig) -> Result<ConfigEstimate> {
    let params = 4 * (cfg.backbone.param_count() + cfg.aggregator.param_count()) as u64;
    let s = Trainer::step_sizes(cfg.task, &cfg.backbone, &cfg.aggregator, &cfg.grid, &cfg.plan, cfg.use_global, cfg.batch);
    let mut l = MemoryLedger::new();
    let mut phases = Vec::new();
    let mut ev = |l: &mut MemoryLedger, c: Category, d: i64, p: &'static str| -> Result<()> {
        l.record(c, d, p)?;
        phases.push((p, l.total()));
        Ok(())
    };
    ev(&mut l, Category::Parameters, params as i64, train::PHASE_SETUP)?;
    ev(&mut l, Category::OptimizerState, 2 * params as i64, train::PHASE_SETUP)?;
    ev(&mut l, Category::Data, 4 * s.data as i64, train::PHASE_LOAD)?;
    ev(&mut l, Category::ZCache, 4 * s.zcache as i64, train::PHASE_ZINIT)?;
    let act = 4 * (s.theta1_patches + s.theta1_global + s.theta2) as i64;
    let mut window = 0;
    for j in 0..cfg.plan.iters {
        ev(&mut l, Category::Activations, 4 * s.theta1_patches as i64, train::PHASE_THETA1)?;
        if cfg.use_global {
            ev(&mut l, Category::Activations, 4 * s.theta1_global as i64, train::PHASE_GLOBAL)?;
        }
        ev(&mut l, Category::Activations, 4 * s.theta2 as i64, train::PHASE_THETA2)?;
        if window == 0 {
            ev(&mut l, Category::Gradients, params as i64, train::PHASE_BACKWARD)?;
        }
        ev(&mut l, Category::Activations, -act, train::PHASE_BACKWARD)?;
        window += 1;
        if window == cfg.accum_steps || j + 1 == cfg.plan.iters {
            ev(&mut l, Category::Gradients, -(params as i64), train::PHASE_STEP)?;
            window = 0;
        }
    }
    ev(&mut l, Category::ZCache, -4 * s.zcache as i64, train::PHASE_RELEASE)?;
    ev(&mut l, Category::Data, -4 * s.data as i64, train::PHASE_RELEASE)?;
    Ok(ConfigEstimate {
        config: cfg.clone(),
        peak_bytes: l.peak(),
        phases,
        parameter_bytes: params,
        data_bytes: 4 * s.data,
        zcache_bytes: 4 * s.zcache,
        theta1_patch_bytes: 4 * s.theta1_patches,
        theta1_global_bytes: 4 * s.theta1_global,
        theta2_bytes: 4 * s.theta2,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeComparison {
    pub full: ConfigEstimate,
    pub patch: ConfigEstimate,
}

impl ModeComparison {
    pub fn full_image_peak(&self) -> u64 {
        self.full.activation_peak()
    }

    pub fn patch_mode_peak(&self) -> u64 {
        self.patch.activation_peak()
    }

    /// Patch-mode over full-image activation peak.
    pub fn ratio(&self) -> f64 {
        self.patch_mode_peak() as f64 / self.full_image_peak() as f64
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<22} {:>16} {:>16}\n", "quantity", "full_image", "patch_mode");
        let rows = [
            ("theta1_patch_bytes", self.full.theta1_patch_bytes, self.patch.theta1_patch_bytes),
            ("theta1_global_bytes", self.full.theta1_global_bytes, self.patch.theta1_global_bytes),
            ("theta2_bytes", self.full.theta2_bytes, self.patch.theta2_bytes),
            ("zcache_bytes", self.full.zcache_bytes, self.patch.zcache_bytes),
            ("activation_peak", self.full_image_peak(), self.patch_mode_peak()),
            ("total_peak", self.full.peak_bytes, self.patch.peak_bytes),
        ];
        for (name, a, b) in rows {
            out += &format!("{name:<22} {a:>16} {b:>16}\n");
        }
        out += &format!("{:<22} {:>16.4}\n", "activation_ratio", self.ratio());
        out
    }
}

/// Activation and total peaks of patch-mode training against the same
/// backbone trained on whole images.
pub fn compare_modes(cfg: &EstimateConfig) -> Result<ModeComparison> {
    Ok(ModeComparison {
        full: estimate_peak(&cfg.full_image()?)?,
        patch: estimate_peak(cfg)?,
    })
}
