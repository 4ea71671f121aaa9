//! `dmad`: build banks, train, evaluate and score from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dmad_core::memory_bank::Mode;
use dmad_core::pipeline::{self, RunConfig};
use dmad_core::synth::{self, SynthSpec};

#[derive(Parser, Debug)]
#[command(
    name = "dmad",
    version,
    about = "Dual memory bank anomaly detection over patch features"
)]
struct Cli {
    /// Run configuration (JSON). Relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Unsupervised,
    SemiSupervised,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Unsupervised => Mode::Unsupervised,
            ModeArg::SemiSupervised => Mode::SemiSupervised,
        }
    }
}

/// Flags that take precedence over the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true)]
    train_manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    test_manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    outlier_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    bank_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the normal and abnormal memory banks.
    BuildBanks,
    /// Train the scorer against existing banks.
    Train,
    /// Score the test manifest and write the report.
    Eval,
    /// Score a single feature file.
    Score {
        feature: PathBuf,
        /// Write the full-resolution anomaly map as a one-channel `.dmft` grid.
        #[arg(long)]
        pixel_map: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    SynthGen {
        /// Generator spec (JSON); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a bank's kind, size, provenance and per-dimension statistics.
    InspectBank { path: PathBuf },
    /// Run the component ablation grid on the configured data.
    Ablate {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut value = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => serde_json::json!({}),
    };
    if let Some(mode) = cli.overrides.mode {
        let mode = serde_json::to_value(Mode::from(mode))?;
        value
            .as_object_mut()
            .context("config must be a JSON object")?
            .insert("mode".into(), mode);
        // mode-dependent defaults follow the flag, so drop a conflicting train.mode
        if let Some(train) = value.get_mut("train").and_then(|t| t.as_object_mut()) {
            train.remove("mode");
        }
    }
    let mut cfg = RunConfig::from_json_value(value)?;
    if let Some(dir) = cli.config.as_deref().and_then(Path::parent) {
        cfg.paths.rebase(dir);
    }

    let o = &cli.overrides;
    let set = |slot: &mut PathBuf, v: &Option<PathBuf>| {
        if let Some(v) = v {
            *slot = v.clone();
        }
    };
    set(&mut cfg.paths.train_manifest, &o.train_manifest);
    set(&mut cfg.paths.test_manifest, &o.test_manifest);
    set(&mut cfg.paths.bank_dir, &o.bank_dir);
    set(&mut cfg.paths.checkpoint, &o.checkpoint);
    set(&mut cfg.paths.report, &o.report);
    if let Some(d) = &o.outlier_dir {
        cfg.paths.outlier_dir = Some(d.clone());
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cfg.deterministic {
        cfg.threads = 1;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the worker pool")
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::SynthGen { spec, out } => {
            let mut s = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .with_context(|| format!("reading spec {}", p.display()))?;
                    serde_json::from_str::<SynthSpec>(&text)
                        .with_context(|| format!("parsing spec {}", p.display()))?
                }
                None => SynthSpec::default(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let written = synth::generate(&s, out)?;
            println!("train manifest: {}", written.train_manifest.display());
            println!("test manifest: {}", written.test_manifest.display());
            println!("outliers: {}", written.outlier_dir.display());
            return Ok(());
        }
        Command::InspectBank { path } => {
            let summary = pipeline::inspect_bank(path)
                .with_context(|| format!("inspecting {}", path.display()))?;
            print!("{summary}");
            return Ok(());
        }
        _ => {}
    }

    let cfg = load_config(&cli)?;
    init_threads(cfg.threads)?;
    match &cli.command {
        Command::BuildBanks => {
            let built = pipeline::build_banks(&cfg)?;
            print!("{built}");
            println!("banks written to {}", cfg.paths.bank_dir.display());
        }
        Command::Train => {
            let out = pipeline::train_stage(&cfg)?;
            let means = dmad_core::learner::train::epoch_means(&out.log);
            if let (Some(first), Some(last)) = (means.first(), means.last()) {
                println!("epoch mean loss: first {first:.6}, last {last:.6}");
            }
            println!("checkpoint: {}", cfg.paths.checkpoint.display());
            println!("loss log: {}", cfg.paths.loss_log.display());
        }
        Command::Eval => {
            let report = pipeline::evaluate(&cfg)?;
            print!("{}", report.to_csv());
            println!("report: {}", cfg.paths.report.display());
        }
        Command::Score { feature, pixel_map } => {
            let (grid, map) = pipeline::score_file(&cfg, feature)?;
            println!("image score: {:.6}", map.image_score);
            if let Some(out) = pixel_map {
                pipeline::write_pixel_map(&map, &grid.object_id, &grid.image_id, out)?;
                println!("pixel map: {}", out.display());
            }
        }
        Command::Ablate { out } => {
            let results = pipeline::run_ablation(&cfg, &pipeline::ablation_grid(), out)?;
            let table = pipeline::ablation_csv(&results);
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("ablation.csv");
            std::fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
            print!("{table}");
        }
        Command::SynthGen { .. } | Command::InspectBank { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DMAD_LOG", "warn")).init();
    let cli = Cli::parse();
    if cli.config.as_ref().is_some_and(|p| !p.is_file()) {
        eprintln!(
            "error: config file {} does not exist",
            cli.config.as_ref().unwrap().display()
        );
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
