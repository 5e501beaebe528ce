//! Fully resolved commands. A `Job` is what gets recorded in `config.json` and
//! what `rerun` executes, so it must carry every setting that affects output.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::time::Instant;

use convadapt::checkpoint::{
    load_adapter, load_base, save_adapter, save_base, write_atomic, Checkpoint,
};
use convadapt::data::{generate_synthetic, read_dataset, write_dataset};
use convadapt::training::{
    aggregate, finetune_adapter_with_hook, finetune_freeze_with_hook, pretrain_with_hook,
    run_cell, CellKey, CellResult, EpochRecord, EvalOptions,
};
use convadapt::{
    AdapterConfig, CellMode, Error, FoldSplit, Network, NetworkSpec, Result, SegVolume,
    SweepConfig, SynthSpec, TrainConfig,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    Synth {
        spec: SynthSpec,
        out: PathBuf,
    },
    Pretrain {
        network: NetworkSpec,
        data: PathBuf,
        train: TrainConfig,
        out: PathBuf,
    },
    Finetune {
        mode: CellMode,
        data: PathBuf,
        ckpt: PathBuf,
        train: TrainConfig,
        out: PathBuf,
    },
    Eval {
        ckpt: PathBuf,
        adapter: Option<PathBuf>,
        data: PathBuf,
        options: EvalOptions,
        out: PathBuf,
    },
    Sweep {
        protocol: SweepConfig,
        data: PathBuf,
        ckpt: PathBuf,
        jobs: usize,
        out: PathBuf,
    },
    Merge {
        ckpt: PathBuf,
        adapter: PathBuf,
        out: PathBuf,
    },
}

/// Record written to `<out>/config.json` once a command completes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_secs: f64,
    pub job: Job,
}

pub const MANIFEST_FILE: &str = "config.json";

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

impl Job {
    pub fn out(&self) -> &Path {
        match self {
            Job::Synth { out, .. }
            | Job::Pretrain { out, .. }
            | Job::Finetune { out, .. }
            | Job::Eval { out, .. }
            | Job::Sweep { out, .. }
            | Job::Merge { out, .. } => out,
        }
    }

    pub fn set_out(&mut self, dir: PathBuf) {
        match self {
            Job::Synth { out, .. }
            | Job::Pretrain { out, .. }
            | Job::Finetune { out, .. }
            | Job::Eval { out, .. }
            | Job::Sweep { out, .. }
            | Job::Merge { out, .. } => *out = dir,
        }
    }

    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Job::Synth { .. } => vec![],
            Job::Pretrain { data, .. } => vec![data.clone()],
            Job::Finetune { data, ckpt, .. } | Job::Sweep { data, ckpt, .. } => {
                vec![data.clone(), ckpt.clone()]
            }
            Job::Eval { ckpt, adapter, data, .. } => {
                let mut v = vec![ckpt.clone()];
                v.extend(adapter.clone());
                v.push(data.clone());
                v
            }
            Job::Merge { ckpt, adapter, .. } => vec![ckpt.clone(), adapter.clone()],
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Job::Synth { spec, .. } => Some(spec.seed),
            Job::Pretrain { train, .. } | Job::Finetune { train, .. } => Some(train.seed),
            Job::Eval { options, .. } => options.contrast_seed,
            Job::Sweep { protocol, .. } => Some(protocol.seed),
            Job::Merge { .. } => None,
        }
    }

    /// Refuses to write into a non-empty directory (unless forced) or into
    /// one of the inputs. Sweeps may resume into their own directory.
    pub fn check_out(&self, force: bool) -> Result<()> {
        let out = self.out();
        let canon = |p: &Path| fs::canonicalize(p).ok();
        if let Some(o) = canon(out) {
            for input in self.inputs() {
                if let Some(i) = canon(&input) {
                    if o.starts_with(&i) || i.starts_with(&o) {
                        return Err(Error::Config(format!(
                            "output {} overlaps input {}",
                            out.display(),
                            input.display()
                        )));
                    }
                }
            }
        }
        let non_empty = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
        if non_empty && !force && !matches!(self, Job::Sweep { .. }) {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to write into it)",
                out.display()
            )));
        }
        Ok(())
    }

    pub fn run(&self, force: bool) -> Result<()> {
        self.check_out(force)?;
        let start = Instant::now();
        let out = self.out().to_path_buf();
        fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        let outputs = match self {
            Job::Synth { spec, out } => {
                let vols = generate_synthetic(spec)?;
                write_dataset(&vols, out)?;
                log::info!("wrote {} volumes to {}", vols.len(), out.display());
                vec![out.clone()]
            }
            Job::Pretrain { network, data, train, out } => {
                let data = read_dataset(data)?;
                let mut net = Network::build(network, train.seed)?;
                let mut log = EpochLog::create(out)?;
                pretrain_with_hook(&mut net, &data, train, &mut |r, _| log.record(r))?;
                let dir = out.join("checkpoints").join("base");
                save_base(&net, &dir)?;
                vec![dir, log.path]
            }
            Job::Finetune { mode, data, ckpt, train, out } => {
                let data = read_dataset(data)?;
                let mut net = load_base(ckpt)?;
                let input_spec = net.spec();
                let mut log = EpochLog::create(out)?;
                let dir = match *mode {
                    CellMode::Freeze { strategy } => {
                        finetune_freeze_with_hook(&mut net, &data, strategy, train, &mut |r, _| {
                            log.record(r)
                        })?;
                        log::info!("{mode}: {} trainable parameters", net.trainable_count());
                        // Keep the input's trainability record; only weights change.
                        let keep = input_spec
                            .blocks
                            .iter()
                            .filter(|b| b.trainable)
                            .map(|b| b.name.clone())
                            .collect();
                        net.set_trainable(&keep)?;
                        let dir = out.join("checkpoints").join("base");
                        save_base(&net, &dir)?;
                        dir
                    }
                    CellMode::Adapter { method, rank } => {
                        let cfg = AdapterConfig::new(method, rank);
                        finetune_adapter_with_hook(&mut net, &data, &cfg, train, &mut |r, _| {
                            log.record(r)
                        })?;
                        log::info!("{mode}: {} trainable parameters", net.trainable_count());
                        let dir = out.join("checkpoints").join("adapter");
                        save_adapter(&net, &dir)?;
                        dir
                    }
                };
                vec![dir, log.path]
            }
            Job::Eval { ckpt, adapter, data, options, out } => {
                let data = read_dataset(data)?;
                let mut net = load_base(ckpt)?;
                if let Some(a) = adapter {
                    load_adapter(&mut net, a)?;
                }
                let report = convadapt::training::evaluate(&net, &data, options)?;
                let reports = out.join("reports");
                report.write(&reports, "report")?;
                if let Some(d) = report.all.mean_dice {
                    println!("mean Dice {d:.4} over {} patients", report.all.count);
                }
                ["report.csv", "report.json", "report_volumes.csv"]
                    .iter()
                    .map(|f| reports.join(f))
                    .collect()
            }
            Job::Sweep { protocol, data, ckpt, jobs, out } => {
                run_sweep(protocol, data, ckpt, *jobs, out)?;
                vec![out.join("cells"), out.join("reports")]
            }
            Job::Merge { ckpt, adapter, out } => {
                let mut net = load_base(ckpt)?;
                load_adapter(&mut net, adapter)?;
                net.merge_adapters()?;
                let dir = out.join("checkpoints").join("base");
                save_base(&net, &dir)?;
                vec![dir]
            }
        };
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.seed(),
            inputs: self.inputs(),
            outputs,
            wall_secs: start.elapsed().as_secs_f64(),
            job: self.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())
    }
}

/// Per-epoch lines appended to `<out>/log.txt` as training runs.
struct EpochLog {
    path: PathBuf,
    file: fs::File,
}

impl EpochLog {
    fn create(out: &Path) -> Result<Self> {
        let path = out.join("log.txt");
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        Ok(Self { path, file })
    }

    fn record(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.file, "{}", r.log_line()).map_err(|e| io_err(&self.path, e))
    }
}

const PROTOCOL_FILE: &str = "protocol.json";

fn cell_path(out: &Path, cell: &CellKey) -> PathBuf {
    out.join("cells").join(format!("{}.json", cell.key()))
}

/// Runs one cell and stores its result; used in-process and by workers.
pub fn run_one_cell(
    protocol: &SweepConfig,
    data: &[SegVolume],
    base: &Network,
    cell: &CellKey,
    out: &Path,
) -> Result<()> {
    let ids: Vec<&str> = data.iter().map(|v| v.patient_id.as_str()).collect();
    let split = FoldSplit::round_robin(&ids, protocol.folds, protocol.seed)?;
    let result = run_cell(base, data, &split, cell, protocol)?;
    let text = serde_json::to_string_pretty(&result).expect("cell result serializes");
    write_atomic(&cell_path(out, cell), text.as_bytes())
}

fn run_sweep(protocol: &SweepConfig, data_dir: &Path, ckpt: &Path, jobs: usize, out: &Path) -> Result<()> {
    protocol.validate()?;
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    // A resumed sweep must use the protocol its finished cells were run with.
    let proto_path = out.join(PROTOCOL_FILE);
    if proto_path.exists() {
        let text = fs::read_to_string(&proto_path).map_err(|e| io_err(&proto_path, e))?;
        let previous: SweepConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", proto_path.display())))?;
        if &previous != protocol {
            return Err(Error::Config(format!(
                "{} holds a sweep with a different protocol",
                out.display()
            )));
        }
    } else {
        let text = serde_json::to_string_pretty(protocol).expect("protocol serializes");
        write_atomic(&proto_path, text.as_bytes())?;
    }
    fs::create_dir_all(out.join("cells")).map_err(|e| io_err(out, e))?;

    let cells = protocol.cells();
    let pending: Vec<CellKey> = cells.iter().copied().filter(|c| !cell_path(out, c).exists()).collect();
    log::info!("{} of {} cells to run", pending.len(), cells.len());
    let data = read_dataset(data_dir)?;
    let base = load_base(ckpt)?;
    if jobs == 1 {
        for cell in &pending {
            log::info!("cell {}", cell.key());
            run_one_cell(protocol, &data, &base, cell, out)?;
        }
    } else {
        run_workers(&pending, data_dir, ckpt, jobs, out)?;
    }

    let results = cells
        .iter()
        .map(|c| {
            let p = cell_path(out, c);
            let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
            serde_json::from_str::<CellResult>(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&results).write(&out.join("reports"))
}

/// Fans cells out to child processes, at most `jobs` at a time.
fn run_workers(pending: &[CellKey], data: &Path, ckpt: &Path, jobs: usize, out: &Path) -> Result<()> {
    let exe = std::env::current_exe().map_err(|e| Error::Config(format!("cannot locate executable: {e}")))?;
    let mut running: Vec<(CellKey, Child)> = Vec::new();
    let mut worst = 0;
    let mut queue = pending.iter();
    loop {
        while running.len() < jobs {
            let Some(cell) = queue.next() else { break };
            let child = Command::new(&exe)
                .arg("sweep-cell")
                .arg("--sweep-dir")
                .arg(out)
                .arg("--data")
                .arg(data)
                .arg("--ckpt")
                .arg(ckpt)
                .arg("--mode")
                .arg(mode_arg(&cell.mode))
                .arg("--fold")
                .arg(cell.fold.to_string())
                .spawn()
                .map_err(|e| Error::Config(format!("cannot spawn worker: {e}")))?;
            running.push((*cell, child));
        }
        if running.is_empty() {
            break;
        }
        let (cell, mut child) = running.remove(0);
        let status = child.wait().map_err(|e| Error::Config(format!("worker failed: {e}")))?;
        if !status.success() {
            let code = status.code().unwrap_or(2);
            log::error!("cell {} failed with exit code {code}", cell.key());
            worst = worst.max(code);
        }
    }
    match worst {
        0 => Ok(()),
        3 => Err(Error::Numerical("a sweep cell hit a non-finite loss".into())),
        1 => Err(Error::Config("a sweep cell was misconfigured".into())),
        _ => Err(Error::Data("a sweep cell failed".into())),
    }
}

/// Inverse of `CellMode::from_str`.
pub fn mode_arg(mode: &CellMode) -> String {
    match mode {
        CellMode::Freeze { strategy } => format!("freeze:{strategy}"),
        CellMode::Adapter { method, rank } => format!("adapter:{}:{rank}", method.key()),
    }
}

/// Worker side of `run_workers`: reads the stored protocol and runs one cell.
pub fn sweep_cell(sweep_dir: &Path, data: &Path, ckpt: &Path, mode: CellMode, fold: usize) -> Result<()> {
    let proto_path = sweep_dir.join(PROTOCOL_FILE);
    let text = fs::read_to_string(&proto_path).map_err(|e| io_err(&proto_path, e))?;
    let protocol: SweepConfig =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", proto_path.display())))?;
    let data = read_dataset(data)?;
    let base = load_base(ckpt)?;
    run_one_cell(&protocol, &data, &base, &CellKey { mode, fold }, sweep_dir)
}

/// Network a params audit should describe: from a checkpoint when given.
pub fn audit_network(spec: NetworkSpec, ckpt: Option<&Path>) -> Result<Network> {
    match ckpt {
        Some(dir) => convadapt::checkpoint::network_from_base(&Checkpoint::read(dir)?),
        None => Network::build(&spec, 0),
    }
}
