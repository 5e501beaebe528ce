//! `convadapt` command-line front end.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 data error,
//! 3 numerical failure.

mod jobs;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use convadapt::checkpoint::Checkpoint;
use convadapt::data::parse_augmentations;
use convadapt::training::{EvalOptions, OptimizerKind, Phase};
use convadapt::{
    AdapterConfig, Architecture, CellMode, Error, NetworkSpec, Result, SweepConfig, SynthSpec,
    TrainConfig,
};
use jobs::{Job, RunManifest};

#[derive(Parser)]
#[command(name = "convadapt", version, about = "Low-rank adapters for convolutional segmentation networks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic hemorrhage dataset.
    Synth {
        /// JSON synthesis spec; omitted fields take their defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a network from scratch.
    Pretrain {
        #[arg(long, default_value = "multiview")]
        model: Architecture,
        /// Channel width of the first level.
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Fine-tune a base checkpoint by freezing blocks or with adapters.
    Finetune {
        /// When given, must match the checkpoint's architecture.
        #[arg(long)]
        model: Option<Architecture>,
        /// `freeze:<strategy>` or `adapter:<method>:<rank>`.
        #[arg(long)]
        mode: CellMode,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a checkpoint (plus optional adapter) on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Apply a seeded gamma remap to each test volume.
        #[arg(long)]
        contrast_seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Cross-validated grid of fine-tuning runs; resumes finished cells.
    Sweep {
        #[arg(long)]
        protocol: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Pretrained base checkpoint every cell starts from.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker processes running cells in parallel.
        #[arg(long, env = "CONVADAPT_THREADS", default_value_t = 1)]
        jobs: usize,
    },
    /// Print per-layer and total trainable parameter counts.
    Params {
        #[arg(long, default_value = "multiview")]
        model: Architecture,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        /// Read the architecture from a base checkpoint instead.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        mode: CellMode,
        #[arg(long)]
        json: bool,
    },
    /// Fold an adapter into its base weights.
    Merge {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Re-execute a finished run from its config.json into a new directory.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    #[command(hide = true)]
    SweepCell {
        #[arg(long)]
        sweep_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mode: CellMode,
        #[arg(long)]
        fold: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config used as the starting point for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Contrast views per slice in the mixed loss.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Comma-separated subset of contrast,hflip,elastic.
    #[arg(long, value_delimiter = ',')]
    augment: Option<Vec<String>>,
    #[arg(long)]
    max_steps: Option<usize>,
}

impl TrainArgs {
    fn resolve(&self, phase: Phase) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => read_json::<TrainConfig>(path)?,
            None if phase == Phase::Pretrain => TrainConfig::pretrain(),
            None => TrainConfig::finetune(),
        };
        cfg.phase = phase;
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.views {
            cfg.views = v;
        }
        if let Some(v) = self.optimizer {
            cfg.optimizer = v;
        }
        if let Some(names) = &self.augment {
            cfg.augment = parse_augmentations(names)?;
        }
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Config files are user input: a malformed one is a usage error.
fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        Error::Shape(_) | Error::Data(_) | Error::Io { .. } | Error::Json { .. } => 2,
    }
}

fn params(model: Architecture, channels: usize, ckpt: Option<&Path>, mode: CellMode, json: bool) -> Result<()> {
    let mut net = jobs::audit_network(NetworkSpec::new(model, channels), ckpt)?;
    match mode {
        CellMode::Freeze { strategy } => {
            net.apply_strategy(strategy)?;
        }
        CellMode::Adapter { method, rank } => {
            net.freeze_all();
            net.attach_adapters(&AdapterConfig::new(method, rank), 0)?;
        }
    }
    let rows = net.audit();
    let total = net.trainable_count();
    if json {
        let value = serde_json::json!({
            "mode": jobs::mode_arg(&mode),
            "layers": rows.iter().map(|r| serde_json::json!({
                "layer": r.layer, "c_in": r.c_in, "c_out": r.c_out,
                "kernel": [r.kernel.0, r.kernel.1], "trainable": r.trainable,
            })).collect::<Vec<_>>(),
            "total": total,
            "base_total": net.base_param_count(),
        });
        println!("{}", serde_json::to_string_pretty(&value).expect("json"));
    } else {
        println!("{:<14} {:>5} {:>6} {:>6} {:>10}", "layer", "c_in", "c_out", "kernel", "trainable");
        for r in &rows {
            println!(
                "{:<14} {:>5} {:>6} {:>6} {:>10}",
                r.layer,
                r.c_in,
                r.c_out,
                format!("{}x{}", r.kernel.0, r.kernel.1),
                r.trainable
            );
        }
        println!("total trainable: {total} (base network: {})", net.base_param_count());
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    let (job, force) = match cmd {
        Cmd::Synth { spec, out, force } => {
            let spec: SynthSpec = read_json(&spec)?;
            spec.validate()?;
            (Job::Synth { spec, out }, force)
        }
        Cmd::Pretrain { model, channels, data, out, force, train } => {
            let network = NetworkSpec::new(model, channels);
            network.validate()?;
            let train = train.resolve(Phase::Pretrain)?;
            (Job::Pretrain { network, data, train, out }, force)
        }
        Cmd::Finetune { model, mode, data, ckpt, out, force, train } => {
            if let Some(model) = model {
                let found = Checkpoint::read(&ckpt)?.manifest.network.arch;
                if found != model {
                    return Err(Error::Data(format!(
                        "checkpoint {} holds a {found} network, not {model}",
                        ckpt.display()
                    )));
                }
            }
            let train = train.resolve(Phase::Finetune)?;
            (Job::Finetune { mode, data, ckpt, train, out }, force)
        }
        Cmd::Eval { ckpt, adapter, data, out, contrast_seed, force } => {
            let options = EvalOptions { contrast_seed };
            (Job::Eval { ckpt, adapter, data, options, out }, force)
        }
        Cmd::Sweep { protocol, data, ckpt, out, jobs } => {
            let protocol: SweepConfig = read_json(&protocol)?;
            protocol.validate()?;
            (Job::Sweep { protocol, data, ckpt, jobs, out }, false)
        }
        Cmd::Merge { ckpt, adapter, out, force } => (Job::Merge { ckpt, adapter, out }, force),
        Cmd::Rerun { manifest, out, force } => {
            let mut job = RunManifest::read(&manifest)?.job;
            job.set_out(out);
            (job, force)
        }
        Cmd::Params { model, channels, ckpt, mode, json } => {
            return params(model, channels, ckpt.as_deref(), mode, json);
        }
        Cmd::SweepCell { sweep_dir, data, ckpt, mode, fold } => {
            return jobs::sweep_cell(&sweep_dir, &data, &ckpt, mode, fold);
        }
    };
    job.run(force)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
