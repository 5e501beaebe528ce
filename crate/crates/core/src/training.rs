//! Pretraining, both fine-tuning families, evaluation and the cross-validated
//! rank sweep.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterMethod};
use crate::backbones::{FreezeStrategy, Network};
use crate::data::{adjust_contrast, augment_slice, make_views, AugmentKind, AugmentParams, SegVolume};
use crate::error::{Error, Result};
use crate::losses::{batch_loss_and_grad, blood_volume, dice, LossClasses};
use crate::report::{bin_labels, mean_std, stratify_report, EvalReport, PatientScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" | "sgd-momentum" => Ok(OptimizerKind::SgdMomentum),
            _ => Err(Error::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub phase: Phase,
    /// Contrast views per slice, counting the original.
    pub views: usize,
    /// Augmentations re-sampled every time a slice is drawn.
    pub augment: Vec<AugmentKind>,
    pub loss_classes: LossClasses,
    /// Stop after this many optimizer steps, whatever the epoch count.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::finetune()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            epochs: 60,
            learning_rate: 1e-3,
            batch_size: 2,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            phase: Phase::Pretrain,
            views: 3,
            augment: Vec::new(),
            loss_classes: LossClasses::default(),
            max_steps: None,
        }
    }

    pub fn finetune() -> Self {
        Self {
            epochs: 20,
            phase: Phase::Finetune,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.views == 0 {
            return Err(Error::Config("views must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// First-order optimizer with per-parameter state keyed by slot name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    momentum: f64,
    t: i32,
    state: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn step(&mut self, net: &mut Network) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for slot in net.params_mut() {
            let n = slot.value.len();
            let (m, v) = self
                .state
                .entry(slot.name)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            match self.kind {
                OptimizerKind::Adam => {
                    for i in 0..n {
                        let g = slot.grad[i];
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        slot.value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    for ((mi, g), w) in m.iter_mut().zip(slot.grad.iter()).zip(slot.value.iter_mut()) {
                        *mi = self.momentum * *mi + g;
                        *w -= self.lr * *mi;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-slice mixed loss over the epoch.
    pub mean_loss: f64,
    pub steps: usize,
    pub wall_secs: f64,
}

impl EpochRecord {
    /// `epoch mean_loss wall_secs`, as written to `log.txt`.
    pub fn log_line(&self) -> String {
        format!("{} {:.6} {:.3}", self.epoch, self.mean_loss, self.wall_secs)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Called after every epoch; an error aborts training.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &Network) -> Result<()> + 'a;

/// Trains whatever is currently trainable in `net` on every slice of `data`.
pub fn train(net: &mut Network, data: &[SegVolume], cfg: &TrainConfig) -> Result<TrainLog> {
    train_with_hook(net, data, cfg, &mut |_, _| Ok(()))
}

pub fn train_with_hook(
    net: &mut Network,
    data: &[SegVolume],
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for v in data {
        v.validate()?;
    }
    let mut samples: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, v)| (0..v.slices()).map(move |s| (i, s)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let params = AugmentParams::default();
    let mut log = TrainLog::default();
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    for epoch in 0..cfg.epochs {
        if log.steps >= budget {
            break;
        }
        let start = Instant::now();
        samples.shuffle(&mut rng);
        let (mut loss_sum, mut seen, mut steps) = (0.0, 0usize, 0usize);
        for chunk in samples.chunks(cfg.batch_size) {
            if log.steps >= budget {
                break;
            }
            let (x, masks, weights) = assemble_batch(data, chunk, cfg, &params, &mut rng)?;
            net.zero_grad();
            let (probs, tape) = net.forward_train(&x)?;
            let mask_views: Vec<_> = masks.iter().map(|m| m.view()).collect();
            let (loss, mut grad) =
                batch_loss_and_grad(&probs, &mask_views, &weights, cfg.loss_classes)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became {loss} at epoch {epoch}, step {}",
                    log.steps
                )));
            }
            // Average over slices so the step size does not depend on batch size.
            let scale = 1.0 / chunk.len() as f64;
            grad *= scale;
            net.backward(&tape, &grad)?;
            opt.step(net);
            loss_sum += loss;
            seen += chunk.len();
            steps += 1;
            log.steps += 1;
        }
        let rec = EpochRecord {
            epoch,
            mean_loss: loss_sum / seen.max(1) as f64,
            steps,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: loss {:.5} ({steps} steps)", rec.mean_loss);
        hook(&rec, net)?;
        log.epochs.push(rec);
    }
    net.zero_grad();
    Ok(log)
}

type Batch = (Array4<f64>, Vec<Array2<f64>>, Vec<f64>);

fn assemble_batch(
    data: &[SegVolume],
    chunk: &[(usize, usize)],
    cfg: &TrainConfig,
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let (_, h, w) = data[chunk[0].0].image.dim();
    let n = chunk.len() * cfg.views;
    let mut x = Array4::zeros((n, 1, h, w));
    let mut masks = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut row = 0;
    for &(v, sl) in chunk {
        let vol = &data[v];
        if vol.image.dim().1 != h || vol.image.dim().2 != w {
            return Err(Error::Shape(format!(
                "{} has {:?} slices, batch expects {h}x{w}",
                vol.patient_id,
                (vol.image.dim().1, vol.image.dim().2)
            )));
        }
        let (img, mask) = if cfg.augment.is_empty() {
            (vol.slice_image(sl), vol.slice_mask(sl))
        } else {
            augment_slice(
                vol.slice_image(sl).view(),
                vol.mask.index_axis(ndarray::Axis(0), sl),
                &cfg.augment,
                params,
                rng,
            )
        };
        let target = mask.mapv(f64::from);
        let set = make_views(img.view(), cfg.views, rng.random())?;
        for (view, wgt) in set.views.iter().zip(&set.weights) {
            x.slice_mut(s![row, 0, .., ..]).assign(view);
            masks.push(target.clone());
            weights.push(*wgt);
            row += 1;
        }
    }
    Ok((x, masks, weights))
}

fn check_phase(cfg: &TrainConfig, phase: Phase) -> Result<()> {
    if cfg.phase != phase {
        return Err(Error::Config(format!(
            "training config is for {:?}, expected {phase:?}",
            cfg.phase
        )));
    }
    Ok(())
}

/// Trains every parameter of an adapter-free network.
pub fn pretrain(net: &mut Network, data: &[SegVolume], cfg: &TrainConfig) -> Result<TrainLog> {
    pretrain_with_hook(net, data, cfg, &mut |_, _| Ok(()))
}

pub fn pretrain_with_hook(
    net: &mut Network,
    data: &[SegVolume],
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<TrainLog> {
    check_phase(cfg, Phase::Pretrain)?;
    if net.has_adapters() {
        return Err(Error::Config("pretraining expects a network without adapters".into()));
    }
    net.apply_strategy(FreezeStrategy::All)?;
    train_with_hook(net, data, cfg, hook)
}

/// Fine-tunes the blocks selected by `strategy`; everything else stays fixed.
pub fn finetune_freeze(
    net: &mut Network,
    data: &[SegVolume],
    strategy: FreezeStrategy,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    finetune_freeze_with_hook(net, data, strategy, cfg, &mut |_, _| Ok(()))
}

pub fn finetune_freeze_with_hook(
    net: &mut Network,
    data: &[SegVolume],
    strategy: FreezeStrategy,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<TrainLog> {
    check_phase(cfg, Phase::Finetune)?;
    if net.has_adapters() {
        return Err(Error::Config(
            "freeze fine-tuning expects a network without adapters".into(),
        ));
    }
    net.apply_strategy(strategy)?;
    train_with_hook(net, data, cfg, hook)
}

/// Attaches fresh adapters to every convolution and trains only those.
pub fn finetune_adapter(
    net: &mut Network,
    data: &[SegVolume],
    adapter: &AdapterConfig,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    finetune_adapter_with_hook(net, data, adapter, cfg, &mut |_, _| Ok(()))
}

pub fn finetune_adapter_with_hook(
    net: &mut Network,
    data: &[SegVolume],
    adapter: &AdapterConfig,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<TrainLog> {
    check_phase(cfg, Phase::Finetune)?;
    net.detach_adapters();
    net.attach_adapters(adapter, cfg.seed)?;
    train_with_hook(net, data, cfg, hook)
}

/// Contrast treatment of test volumes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// When set, each volume gets one seeded gamma remap before inference.
    pub contrast_seed: Option<u64>,
}

/// Slice-wise argmax prediction for a whole volume.
pub fn predict_volume(net: &Network, vol: &SegVolume) -> Result<Array3<u8>> {
    predict_volume_with(net, vol, None)
}

fn predict_volume_with(net: &Network, vol: &SegVolume, gamma: Option<f64>) -> Result<Array3<u8>> {
    let mut out = Array3::zeros(vol.mask.dim());
    for s in 0..vol.slices() {
        let mut img = vol.slice_image(s);
        if let Some(g) = gamma {
            img = adjust_contrast(img.view(), g);
        }
        let pred = net.predict_image(img.view())?.predict();
        out.index_axis_mut(ndarray::Axis(0), s).assign(&pred);
    }
    Ok(out)
}

pub fn score_volume(net: &Network, vol: &SegVolume, opts: &EvalOptions) -> Result<PatientScore> {
    vol.validate()?;
    let gamma = opts.contrast_seed.map(|seed| {
        // Mix the patient id into the seed so volumes get distinct draws.
        let h = vol
            .patient_id
            .bytes()
            .fold(seed ^ 0x9e37_79b9_7f4a_7c15, |a, b| a.rotate_left(7) ^ u64::from(b));
        let p = AugmentParams::default();
        ChaCha8Rng::seed_from_u64(h).random_range(p.gamma_range[0]..=p.gamma_range[1])
    });
    let pred = predict_volume_with(net, vol, gamma)?;
    Ok(PatientScore {
        patient_id: vol.patient_id.clone(),
        dice: dice(vol.mask.view(), pred.view())?,
        annotated_ml: blood_volume(vol.mask.view(), &vol.geom)?,
        predicted_ml: blood_volume(pred.view(), &vol.geom)?,
    })
}

pub fn evaluate(net: &Network, data: &[SegVolume], opts: &EvalOptions) -> Result<EvalReport> {
    let scores = data
        .iter()
        .map(|v| score_volume(net, v, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(stratify_report(&scores))
}

/// Seeded round-robin assignment of patients to folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn round_robin<S: AsRef<str>>(ids: &[S], folds: usize, seed: u64) -> Result<Self> {
        if folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
        }
        if ids.len() < folds {
            return Err(Error::Config(format!(
                "{} patients cannot fill {folds} folds",
                ids.len()
            )));
        }
        let mut order: Vec<&str> = ids.iter().map(AsRef::as_ref).collect();
        order.sort_unstable();
        order.dedup();
        if order.len() != ids.len() {
            return Err(Error::Data("patient ids are not unique".into()));
        }
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let assignments = order
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id.to_string(), i % folds))
            .collect();
        Ok(Self { folds, assignments })
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// (training, test) volumes for one held-out fold.
    pub fn split<'a>(
        &self,
        data: &'a [SegVolume],
        test_fold: usize,
    ) -> Result<(Vec<&'a SegVolume>, Vec<&'a SegVolume>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for v in data {
            match self.fold_of(&v.patient_id) {
                Some(f) if f == test_fold => test.push(v),
                Some(_) => train.push(v),
                None => {
                    return Err(Error::Data(format!(
                        "patient {} has no fold assignment",
                        v.patient_id
                    )))
                }
            }
        }
        Ok((train, test))
    }
}

/// What a sweep cell fine-tunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CellMode {
    Freeze { strategy: FreezeStrategy },
    Adapter { method: AdapterMethod, rank: usize },
}

impl CellMode {
    pub fn label(&self) -> String {
        match self {
            CellMode::Freeze { strategy } => format!("freeze-{strategy}"),
            CellMode::Adapter { method, rank } => format!("adapter-{}-r{rank}", method.key()),
        }
    }
}

impl fmt::Display for CellMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// `freeze:<strategy>` or `adapter:<method>:<rank>`.
impl FromStr for CellMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["freeze", strategy] => Ok(CellMode::Freeze {
                strategy: strategy.parse()?,
            }),
            ["adapter", method, rank] => {
                let rank: usize = rank
                    .parse()
                    .map_err(|_| Error::Config(format!("rank `{rank}` is not an integer")))?;
                if rank == 0 {
                    return Err(Error::Config("rank must be positive".into()));
                }
                Ok(CellMode::Adapter {
                    method: method.parse()?,
                    rank,
                })
            }
            _ => Err(Error::Config(format!(
                "mode `{s}` must be freeze:<strategy> or adapter:<method>:<rank>"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub mode: CellMode,
    pub fold: usize,
}

impl CellKey {
    /// Stable file-name key, e.g. `adapter-dorac-r64-fold0`.
    pub fn key(&self) -> String {
        format!("{}-fold{}", self.mode.label(), self.fold)
    }
}

pub const DEFAULT_RANKS: [usize; 8] = [2, 4, 8, 16, 32, 64, 96, 128];

fn default_ranks() -> Vec<usize> {
    DEFAULT_RANKS.to_vec()
}
fn default_folds() -> usize {
    3
}
fn default_true() -> bool {
    true
}

/// Cross-validation protocol (the JSON sweep file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub methods: Vec<AdapterMethod>,
    #[serde(default = "default_ranks")]
    pub ranks: Vec<usize>,
    #[serde(default)]
    pub strategies: Vec<FreezeStrategy>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "TrainConfig::finetune")]
    pub train: TrainConfig,
    /// Apply a seeded contrast remap to test volumes.
    #[serde(default = "default_true")]
    pub test_contrast: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: AdapterMethod::ALL.to_vec(),
            ranks: default_ranks(),
            strategies: Vec::new(),
            folds: 3,
            seed: 0,
            train: TrainConfig::finetune(),
            test_contrast: true,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        check_phase(&self.train, Phase::Finetune)?;
        if self.folds < 2 {
            return Err(Error::Config("a sweep needs at least 2 folds".into()));
        }
        if self.methods.is_empty() && self.strategies.is_empty() {
            return Err(Error::Config(
                "protocol lists neither adapter methods nor freeze strategies".into(),
            ));
        }
        if !self.methods.is_empty() && self.ranks.is_empty() {
            return Err(Error::Config("protocol lists methods but no ranks".into()));
        }
        if self.ranks.contains(&0) {
            return Err(Error::Config("ranks must be positive".into()));
        }
        Ok(())
    }

    pub fn modes(&self) -> Vec<CellMode> {
        let mut out: Vec<CellMode> = self
            .strategies
            .iter()
            .map(|&strategy| CellMode::Freeze { strategy })
            .collect();
        for &method in &self.methods {
            for &rank in &self.ranks {
                out.push(CellMode::Adapter { method, rank });
            }
        }
        out
    }

    /// Every (mode, fold) cell of the grid.
    pub fn cells(&self) -> Vec<CellKey> {
        self.modes()
            .into_iter()
            .flat_map(|mode| (0..self.folds).map(move |fold| CellKey { mode, fold }))
            .collect()
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            contrast_seed: self.test_contrast.then_some(self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: String,
    pub cell: CellKey,
    pub scores: Vec<PatientScore>,
    pub trainable_params: usize,
    pub final_loss: Option<f64>,
}

/// Fine-tunes a copy of `base` on the training folds of one cell and scores
/// the held-out fold.
pub fn run_cell(
    base: &Network,
    data: &[SegVolume],
    split: &FoldSplit,
    cell: &CellKey,
    cfg: &SweepConfig,
) -> Result<CellResult> {
    let (train_set, test_set) = split.split(data, cell.fold)?;
    let train_set: Vec<SegVolume> = train_set.into_iter().cloned().collect();
    let mut net = base.clone();
    net.detach_adapters();
    let log = match cell.mode {
        CellMode::Freeze { strategy } => finetune_freeze(&mut net, &train_set, strategy, &cfg.train)?,
        CellMode::Adapter { method, rank } => finetune_adapter(
            &mut net,
            &train_set,
            &AdapterConfig::new(method, rank),
            &cfg.train,
        )?,
    };
    let opts = cfg.eval_options();
    let scores = test_set
        .into_iter()
        .map(|v| score_volume(&net, v, &opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(CellResult {
        key: cell.key(),
        cell: *cell,
        scores,
        trainable_params: net.trainable_count(),
        final_loss: log.final_loss(),
    })
}

/// One row of a comparison table: all held-out patients of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: CellMode,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPoint {
    pub method: AdapterMethod,
    pub rank: usize,
    pub alpha: f64,
    pub count: usize,
    pub mean_dice: Option<f64>,
    pub std_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub rank_series: Vec<RankPoint>,
}

/// Merges cell results by mode; each mode's folds together cover every patient once.
pub fn aggregate(results: &[CellResult]) -> SweepSummary {
    let mut by_mode: BTreeMap<CellMode, Vec<PatientScore>> = BTreeMap::new();
    let mut sorted: Vec<&CellResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.cell);
    for r in sorted {
        by_mode
            .entry(r.cell.mode)
            .or_default()
            .extend(r.scores.iter().cloned());
    }
    let rows: Vec<SweepRow> = by_mode
        .into_iter()
        .map(|(mode, scores)| SweepRow {
            mode,
            report: stratify_report(&scores),
        })
        .collect();
    let rank_series = rows
        .iter()
        .filter_map(|row| match row.mode {
            CellMode::Adapter { method, rank } => Some(RankPoint {
                method,
                rank,
                alpha: AdapterConfig::new(method, rank).alpha,
                count: row.report.all.count,
                mean_dice: row.report.all.mean_dice,
                std_dice: row.report.all.std_dice,
            }),
            CellMode::Freeze { .. } => None,
        })
        .collect();
    SweepSummary { rows, rank_series }
}

/// Runs every cell of the protocol in order and aggregates.
pub fn crossval(data: &[SegVolume], cfg: &SweepConfig, base: &Network) -> Result<SweepSummary> {
    cfg.validate()?;
    let ids: Vec<&str> = data.iter().map(|v| v.patient_id.as_str()).collect();
    let split = FoldSplit::round_robin(&ids, cfg.folds, cfg.seed)?;
    let results = cfg
        .cells()
        .iter()
        .map(|c| run_cell(base, data, &split, c, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&results))
}

fn cell_text(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
        _ => "-".into(),
    }
}

impl SweepSummary {
    /// Wide table: one row per mode, one column per volume bin plus `All`.
    pub fn table_csv(&self, adapters: bool) -> String {
        let mut out = String::from("mode");
        for b in bin_labels() {
            out.push_str(&format!(",\"{b}\""));
        }
        out.push_str(",All\n");
        for row in &self.rows {
            if matches!(row.mode, CellMode::Adapter { .. }) != adapters {
                continue;
            }
            out.push_str(&row.mode.label());
            for b in &row.report.bins {
                out.push(',');
                out.push_str(&cell_text(b.mean_dice, b.std_dice));
            }
            out.push(',');
            out.push_str(&cell_text(row.report.all.mean_dice, row.report.all.std_dice));
            out.push('\n');
        }
        out
    }

    pub fn rank_csv(&self) -> String {
        let mut out = String::from("method,rank,alpha,count,mean_dice,std_dice\n");
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for p in &self.rank_series {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.method.key(),
                p.rank,
                p.alpha,
                p.count,
                fmt(p.mean_dice),
                fmt(p.std_dice)
            ));
        }
        out
    }

    /// Writes per-mode reports plus the comparison tables under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for row in &self.rows {
            row.report.write(dir, &row.mode.label())?;
        }
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        if self.rows.iter().any(|r| matches!(r.mode, CellMode::Freeze { .. })) {
            put("table_strategies.csv", self.table_csv(false))?;
        }
        if !self.rank_series.is_empty() {
            put("table_adapters.csv", self.table_csv(true))?;
            put("rank_vs_dice.csv", self.rank_csv())?;
        }
        let p = dir.join("summary.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(&p, e))?;
        put("summary.json", json)
    }
}

/// Mean training-set Dice of a network (no contrast remap).
pub fn mean_dice(net: &Network, data: &[SegVolume]) -> Result<f64> {
    let report = evaluate(net, data, &EvalOptions::default())?;
    let dice: Vec<f64> = report.patients.iter().map(|p| p.dice).collect();
    mean_std(&dice)
        .0
        .ok_or_else(|| Error::Data("cannot score an empty set".into()))
}
