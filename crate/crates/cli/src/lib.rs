//! `segpipe` command-line driver: configuration, subcommands and exit codes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use segpipe_core::augment::{self, AugmentConfig, AugmentError, OfflineRun};
use segpipe_core::dataset::{self, DatasetError, Split};
use segpipe_core::losses::{self, LossError, LossInput, LossOp, LossWeights};
use segpipe_core::metrics::{self, MetricsError, ReportOptions};
use segpipe_core::optim::{self, LrSchedule, OptimError, OptimizerKind, ToyProblem};
use segpipe_core::{rng, BinaryMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    ValidationFailure = 1,
    IoFailure = 2,
    InvariantViolation = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub struct CliError {
    pub status: ExitStatus,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            status: ExitStatus::ValidationFailure,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            status: ExitStatus::IoFailure,
            message: message.into(),
        }
    }

    pub fn invariant(message: impl Into<String>) -> Self {
        Self {
            status: ExitStatus::InvariantViolation,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => Self::io(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::Dataset(d) => d.into(),
            AugmentError::Io { .. } | AugmentError::Image { .. } => Self::io(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Io { .. } => Self::io(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<OptimError> for CliError {
    fn from(e: OptimError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        Self::validation(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub alpha: f64,
    pub min_overlap: f64,
    pub retries: usize,
    pub pastes_per_class: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentConfig::default();
        Self {
            alpha: d.alpha,
            min_overlap: d.min_overlap,
            retries: d.retries,
            pastes_per_class: d.pastes_per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub bce: f64,
    pub dice: f64,
    pub lovasz: f64,
    pub epsilon: f64,
    /// Raw weights for Brain, CSP, LV.
    pub class_weights: [f64; 3],
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossWeights::default();
        Self {
            bce: d.bce,
            dice: d.dice,
            lovasz: d.lovasz,
            epsilon: d.epsilon,
            class_weights: [
                d.class_weights[&0],
                d.class_weights[&1],
                d.class_weights[&2],
            ],
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            bce: self.bce,
            dice: self.dice,
            lovasz: self.lovasz,
            epsilon: self.epsilon,
            class_weights: self.class_weights.iter().copied().enumerate().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub iou_thresholds: Vec<f64>,
    pub penalize_misses: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            iou_thresholds: metrics::coco_thresholds(),
            penalize_misses: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_dir: PathBuf,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub patient_id_pattern: String,
    pub augmentation: AugmentSection,
    pub loss: LossSection,
    pub evaluation: EvaluationSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data"),
            ratios: [0.70, 0.15, 0.15],
            seed: 42,
            patient_id_pattern: dataset::DEFAULT_PATIENT_PATTERN.to_string(),
            augmentation: AugmentSection::default(),
            loss: LossSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "segpipe",
    version,
    about = "Fetal-head segmentation data and evaluation pipeline"
)]
pub struct Cli {
    /// TOML configuration file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Patient-level train/val/test split.
    Split(SplitArgs),
    /// Offline domain-guided copy-paste on a training split.
    Augment(AugmentArgs),
    /// Finite-difference check of the loss gradients.
    Losscheck(LosscheckArgs),
    /// Optimizer selection and toy convergence curves.
    Optdemo(OptdemoArgs),
    /// COCO-style evaluation of predictions against labels.
    Evaluate(EvaluateArgs),
    /// Print the effective configuration.
    Config,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub dataset_dir: Option<PathBuf>,
    /// Comma-separated train,val,test ratios.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub patient_id_pattern: Option<String>,
    /// Only write the manifest and listings, no per-split copies.
    #[arg(long)]
    pub no_copy: bool,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Defaults to `<out-dir>/train`.
    #[arg(long)]
    pub train_dir: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub min_overlap: Option<f64>,
    #[arg(long)]
    pub retries: Option<usize>,
    #[arg(long)]
    pub pastes_per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LosscheckArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub composite_tolerance: f64,
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

#[derive(Debug, Args)]
pub struct OptdemoArgs {
    #[arg(long, default_value = "quadratic")]
    pub problem: String,
    /// `auto`, `musgd` or `adamw`.
    #[arg(long, default_value = "auto")]
    pub optimizer: String,
    #[arg(long, default_value_t = 300)]
    pub epochs: u64,
    #[arg(long, default_value_t = 2654)]
    pub n_train: u64,
    #[arg(long, default_value_t = 16)]
    pub batch: u64,
    #[arg(long, default_value_t = 3)]
    pub n_classes: u64,
    /// Learning rate when the optimizer is chosen explicitly.
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub penalize_misses: bool,
}

/// Command output: text for stdout plus the exit status.
#[derive(Debug)]
pub struct Outcome {
    pub stdout: String,
    pub status: ExitStatus,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Self {
            stdout,
            status: ExitStatus::Success,
        }
    }
}

pub fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let mut config = effective_config(cli)?;
    match &cli.command {
        Command::Split(args) => cmd_split(&mut config, args, &cli.out_dir),
        Command::Augment(args) => cmd_augment(&mut config, args, &cli.out_dir, cli.jobs),
        Command::Losscheck(args) => cmd_losscheck(&config, args),
        Command::Optdemo(args) => cmd_optdemo(&config, args, &cli.out_dir),
        Command::Evaluate(args) => cmd_evaluate(&mut config, args, &cli.out_dir),
        Command::Config => Ok(Outcome::ok(config.to_toml())),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

pub fn cmd_split(config: &mut PipelineConfig, args: &SplitArgs, out_dir: &Path) -> Result<Outcome> {
    if let Some(dir) = &args.dataset_dir {
        config.dataset_dir = dir.clone();
    }
    if let Some(r) = &args.ratios {
        config.ratios = [r[0], r[1], r[2]];
    }
    if let Some(p) = &args.patient_id_pattern {
        config.patient_id_pattern = p.clone();
    }
    if !config.dataset_dir.is_dir() {
        return Err(CliError::io(format!(
            "{}: not a directory",
            config.dataset_dir.display()
        )));
    }
    let pattern = dataset::patient_pattern(&config.patient_id_pattern)?;
    let records = dataset::load_records(&config.dataset_dir, &pattern)?;
    let assignment = dataset::stratified_patient_split(&records, config.ratios, config.seed)?;
    create_dir(out_dir)?;
    let manifest = dataset::write_split_manifest(&assignment, &records, out_dir)?;
    if !args.no_copy {
        dataset::materialize_splits(&assignment, &records, &config.dataset_dir, out_dir)?;
    }
    for split in Split::ALL {
        log::info!(
            "{}: {} images",
            split.name(),
            manifest.split(split).num_images
        );
    }
    Ok(Outcome::ok(manifest.table()))
}

pub fn cmd_augment(
    config: &mut PipelineConfig,
    args: &AugmentArgs,
    out_dir: &Path,
    jobs: usize,
) -> Result<Outcome> {
    let section = &mut config.augmentation;
    if let Some(v) = args.alpha {
        section.alpha = v;
    }
    if let Some(v) = args.min_overlap {
        section.min_overlap = v;
    }
    if let Some(v) = args.retries {
        section.retries = v;
    }
    if let Some(v) = args.pastes_per_class {
        section.pastes_per_class = v;
    }
    let train_dir = args
        .train_dir
        .clone()
        .unwrap_or_else(|| out_dir.join("train"));
    if !train_dir.is_dir() {
        return Err(CliError::io(format!(
            "{}: not a directory",
            train_dir.display()
        )));
    }
    let aug_config = AugmentConfig {
        alpha: section.alpha,
        min_overlap: section.min_overlap,
        retries: section.retries,
        pastes_per_class: section.pastes_per_class,
        jobs,
    };
    let run = augment::run_offline(&train_dir, &aug_config, config.seed)?;
    let r = run.report();
    let mut out = String::new();
    if matches!(run, OfflineRun::AlreadyAugmented(_)) {
        out.push_str("already augmented; nothing to do\n");
    }
    let _ = writeln!(
        out,
        "acceptors {}  attempts {}  accepted {}  rejected {}  new images {}",
        r.acceptors,
        r.attempts,
        r.accepted,
        r.rejected,
        r.augmented_images.len()
    );
    for (class, t) in &r.per_class {
        let _ = writeln!(
            out,
            "{class:<6} attempts {}  accepted {}  rejected {}",
            t.attempts, t.accepted, t.rejected
        );
    }
    Ok(Outcome::ok(out))
}

/// Random logits in [-3, 3] and a Bernoulli(0.4) target.
fn random_input(rng: &mut impl Rng, size: usize) -> Result<LossInput> {
    let n = size * size;
    let logits = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let bits = (0..n).map(|_| rng.random_bool(0.4)).collect();
    let target =
        BinaryMask::from_bits(size, size, bits).map_err(|e| CliError::validation(e.to_string()))?;
    Ok(LossInput::new(logits, target, rng.random_range(0..3))?)
}

pub fn cmd_losscheck(config: &PipelineConfig, args: &LosscheckArgs) -> Result<Outcome> {
    if args.trials == 0 {
        return Err(CliError::validation("trials must be at least 1"));
    }
    if args.size == 0 || args.step.is_nan() || args.step <= 0.0 {
        return Err(CliError::validation("size and step must be positive"));
    }
    let weights = config.loss.weights();
    let mut rng = rng::stream(config.seed, "losscheck");
    let ops = [
        (LossOp::Bce, args.tolerance),
        (LossOp::Dice, args.tolerance),
        (LossOp::Composite, args.composite_tolerance),
    ];
    let mut worst = [0.0f64; 3];
    for _ in 0..args.trials {
        let mut input = random_input(&mut rng, args.size)?;
        // Move away from Lovász sort ties so the finite differences stay on one linear piece.
        while losses::hinge_kink_gap(&input.logits, &input.target) <= 10.0 * args.step {
            for v in &mut input.logits {
                *v += rng.random_range(-1e-3..1e-3);
            }
        }
        for (k, (op, _)) in ops.iter().enumerate() {
            op.evaluate(&input, &weights)?;
            let flip = if args.inject_sign_flip { -1.0 } else { 1.0 };
            let eval = |logits: &[f64]| {
                let probe = LossInput {
                    logits: logits.to_vec(),
                    ..input.clone()
                };
                let g = op.evaluate(&probe, &weights).expect("shape checked");
                (g.value, g.gradient.iter().map(|v| flip * v).collect())
            };
            worst[k] = worst[k].max(losses::gradcheck_fn(eval, &input.logits, args.step));
        }
    }
    let mut out = String::new();
    let mut failed = false;
    for (k, (op, tol)) in ops.iter().enumerate() {
        let pass = worst[k] <= *tol;
        failed |= !pass;
        let _ = writeln!(
            out,
            "{:<9} max_rel_err {:.3e}  tol {:.0e}  {}",
            op.name(),
            worst[k],
            tol,
            if pass { "ok" } else { "FAIL" }
        );
    }
    let _ = writeln!(out, "{} trials of {}x{}", args.trials, args.size, args.size);
    Ok(Outcome {
        stdout: out,
        status: if failed {
            ExitStatus::InvariantViolation
        } else {
            ExitStatus::Success
        },
    })
}

/// Learning rate with at most six decimals and no trailing zeros.
pub fn format_lr(lr: f64) -> String {
    let s = format!("{lr:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn cmd_optdemo(config: &PipelineConfig, args: &OptdemoArgs, out_dir: &Path) -> Result<Outcome> {
    let problem: ToyProblem = args.problem.parse()?;
    let mut out = String::new();
    let (kind, lr) = match args.optimizer.as_str() {
        "auto" => {
            let choice =
                optim::select_optimizer(args.epochs, args.n_train, args.batch, args.n_classes)?;
            let _ = writeln!(
                out,
                "{} lr={} (I={})",
                choice.kind,
                format_lr(choice.learning_rate),
                choice.iterations
            );
            (choice.kind, choice.learning_rate)
        }
        "musgd" => (OptimizerKind::MuSgd, args.lr),
        "adamw" => (OptimizerKind::AdamW, args.lr),
        other => return Err(CliError::validation(format!("unknown optimizer {other:?}"))),
    };
    let curve = optim::toy_train(problem, kind, lr, args.steps, config.seed)?;
    let schedule = LrSchedule::new(lr, lr * 0.01, args.epochs.max(1), Vec::new())?;

    create_dir(out_dir)?;
    let mut loss_csv = String::from("step,loss\n");
    for (i, v) in curve.iter().enumerate() {
        let _ = writeln!(loss_csv, "{i},{v}");
    }
    let mut lr_csv = String::from("epoch,lr\n");
    for e in 0..=args.epochs {
        let _ = writeln!(lr_csv, "{e},{}", schedule.lr_at(e));
    }
    write_file(&out_dir.join("loss.csv"), &loss_csv)?;
    write_file(&out_dir.join("lr.csv"), &lr_csv)?;
    let _ = writeln!(
        out,
        "{} on {:?}: loss {:.6e} -> {:.6e} over {} steps",
        kind,
        problem,
        curve[0],
        curve[curve.len() - 1],
        args.steps
    );
    Ok(Outcome::ok(out))
}

pub fn cmd_evaluate(
    config: &mut PipelineConfig,
    args: &EvaluateArgs,
    out_dir: &Path,
) -> Result<Outcome> {
    if args.penalize_misses {
        config.evaluation.penalize_misses = true;
    }
    if !args.gt_dir.is_dir() {
        return Err(CliError::io(format!(
            "{}: not a directory",
            args.gt_dir.display()
        )));
    }
    let any_id = Regex::new("^(.*)$").expect("valid regex");
    let records = dataset::load_records(&args.gt_dir, &any_id)?;
    let dims = records
        .iter()
        .map(|r| (r.image_id.clone(), [r.width, r.height]))
        .collect();
    let (gts, images) = metrics::ground_truth_from_records(&records)?;
    let dets = metrics::load_predictions(&args.predictions, &dims)?;
    let options = ReportOptions {
        thresholds: config.evaluation.iou_thresholds.clone(),
        penalize_misses: config.evaluation.penalize_misses,
    };
    let report = metrics::build_report(&dets, &gts, &images, &options)?;
    report.write_all(out_dir)?;
    Ok(Outcome::ok(report.to_text()))
}
