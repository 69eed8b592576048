use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use patchgrad::data::{gen_cls, gen_seg, load_dataset, save_dataset, DatasetManifest};
use patchgrad::gradcheck::{run_suite, SUITE_EPS, SUITE_TOL};
use patchgrad::run::{self, RunConfig};
use patchgrad::train::Task;

// Training frees and reallocates multi-megabyte buffers every iteration; the
// system allocator hands those pages back to the kernel each time.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_CHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_BUDGET: u8 = 3;

#[derive(Parser)]
#[command(name = "patchgrad", version, about = "Patch-based training of large images under a memory budget")]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs. Falls back to PATCHGRAD_THREADS.
    #[arg(long, global = true, env = "PATCHGRAD_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Cls,
    Seg,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Cls => Task::Classification,
            TaskArg::Seg => Task::Segmentation,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side length.
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Classes for the counting task.
        #[arg(long, default_value_t = 5)]
        classes: usize,
    },
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the metrics CSV here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op and both composed networks.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Estimate peak memory for a config without training.
    MemReport {
        #[arg(long)]
        config: PathBuf,
        /// Image height and width; read from the dataset manifest when omitted.
        #[arg(long, num_args = 2, value_names = ["H", "W"])]
        size: Option<Vec<usize>>,
        #[arg(long, default_value_t = 5)]
        classes: usize,
    },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }
}

/// Exit code for a library error.
fn classify(e: patchgrad::Error) -> Failure {
    use patchgrad::Error as E;
    let code = match &e {
        E::Budget(_) => EXIT_BUDGET,
        E::Config(_) | E::Format(_) | E::Io(_) | E::Contract(_) | E::Build(_) | E::Plan(_) => EXIT_USAGE,
        _ => EXIT_CHECK,
    };
    Failure {
        code,
        error: anyhow::Error::new(e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData {
            task,
            out,
            count,
            seed,
            size,
            classes,
        } => {
            if count == 0 {
                return Err(Failure::usage(anyhow!("count must be ≥ 1")));
            }
            let ds = match Task::from(task) {
                Task::Classification => gen_cls(seed, count, size, size, classes),
                Task::Segmentation => gen_seg(seed, count, size, size),
            }
            .map_err(classify)?;
            save_dataset(&ds, &out)
                .map_err(classify)
                .map_err(|f| Failure::usage(f.error.context(format!("writing {}", out.display()))))?;
            println!("wrote {count} samples to {}", out.display());
            Ok(())
        }
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let outcome = run::execute(&cfg, |line| println!("{line}")).map_err(classify)?;
            println!("artifacts in {}", cfg.out.display());
            match outcome.aborted {
                Some(e) => Err(classify(e)),
                None => Ok(()),
            }
        }
        Command::Eval { checkpoint, data, out } => {
            let ds = load_dataset(&data).map_err(classify)?;
            let m = &ds.manifest;
            let classes = if m.task == Task::Classification { m.classes } else { 1 };
            let (cfg, bb, agg) = run::load_checkpoint(&checkpoint, m.height, m.width, classes).map_err(classify)?;
            let (report, _) = run::evaluate_dataset(&cfg, &bb, &agg, &ds).map_err(classify)?;
            let csv = run::metrics_csv(&report);
            print!("{csv}");
            if let Some(path) = out {
                std::fs::write(&path, &csv)
                    .with_context(|| format!("writing {}", path.display()))
                    .map_err(Failure::usage)?;
            }
            Ok(())
        }
        Command::GradCheck { trials, seed } => {
            let entries = run_suite::<f64>(trials.max(1), seed, SUITE_EPS, SUITE_TOL).map_err(classify)?;
            let mut failed = 0;
            println!("op,trials,checked,skipped,max_rel_err,status");
            for e in &entries {
                let r = &e.report;
                println!(
                    "{},{},{},{},{:.3e},{}",
                    e.name,
                    e.trials,
                    r.checked,
                    r.skipped,
                    r.max_rel_err,
                    if r.pass { "pass" } else { "FAIL" }
                );
                failed += usize::from(!r.pass);
            }
            if failed > 0 {
                return Err(Failure {
                    code: EXIT_CHECK,
                    error: anyhow!("{failed} gradient checks failed"),
                });
            }
            Ok(())
        }
        Command::MemReport { config, size, classes } => {
            let cfg = load_config(&config)?;
            let (h, w, k) = match size {
                Some(s) => (s[0], s[1], classes),
                None => {
                    let manifest = read_manifest(&cfg.data)?;
                    let k = if manifest.task == Task::Classification { manifest.classes } else { 1 };
                    (manifest.height, manifest.width, k)
                }
            };
            let k = if cfg.task == Task::Classification { k } else { 1 };
            print!("{}", run::memory_report(&cfg, h, w, k, cfg.batch_size).map_err(classify)?);
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::usage)?;
    RunConfig::parse(&text).map_err(|e| match e {
        patchgrad::Error::Config(v) => Failure::usage(anyhow!("invalid config:\n  {}", v.join("\n  "))),
        other => classify(other),
    })
}

fn read_manifest(dir: &Path) -> Result<DatasetManifest, Failure> {
    let text = std::fs::read_to_string(dir.join("manifest.txt"))
        .with_context(|| format!("no dataset manifest in {}; pass --size", dir.display()))
        .map_err(Failure::usage)?;
    DatasetManifest::parse(&text).map_err(classify)
}
