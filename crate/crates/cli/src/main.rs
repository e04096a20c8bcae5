//! Command-line front end for the hieradv toolkit.
//!
//! Subcommands cover the full pipeline: generate a label tree, sample a
//! synthetic dataset over it, train a classifier (optionally with the
//! coarse-to-fine curriculum), run single attacks or whole suites, and
//! inspect artifacts. Every command is a pure function of its flags and
//! input files: fixed seeds give byte-identical outputs.
//!
//! Exit codes: 0 success, 1 validation error, 2 I/O error. Human-readable
//! chatter goes to stderr; machine output (JSON/CSV) goes to stdout or to
//! the requested files.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use hieradv::attacks::{AttackKind, AttackSpec, NhaVariant};
use hieradv::bench::{default_suite, evaluate_attack, render_csv, run_suite};
use hieradv::curriculum::{
    chat_train, clean_train, curriculum_start, fat_train, make_schedule, trades_train, FatConfig,
    HeadTransfer, ScheduleMode, StageReport, TradesConfig,
};
use hieradv::hierarchy::{Hierarchy, TreeFileError};
use hieradv::net::{
    load_checkpoint, save_checkpoint, AdamConfig, AdamState, CheckpointError, Classifier, Mlp,
};
use hieradv::seed::derive_seed;
use hieradv::synth::{
    gen_data, load_manifest, load_split, write_dataset_dir, DataParams, SampleSpec, SynthError,
};

#[derive(Parser)]
#[command(name = "hieradv", version, about = "Hierarchy-aware adversarial robustness toolkit")]
struct Cli {
    /// Worker threads for attack/bench evaluation (results are identical for
    /// any worker count).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a balanced label tree built from branching factors.
    GenTree(GenTreeArgs),
    /// Sample a synthetic dataset over a tree and write a dataset directory.
    GenData(GenDataArgs),
    /// Train a classifier, optionally with the coarse-to-fine curriculum.
    Train(TrainArgs),
    /// Run one attack over a dataset split and report the metrics.
    Attack(AttackArgs),
    /// Run an attack suite over a dataset split and write a full report.
    Bench(BenchArgs),
    /// Validate a tree file and print its level sizes.
    ValidateTree(ValidateTreeArgs),
    /// Print the architecture stored in a checkpoint.
    InspectModel(InspectModelArgs),
}

#[derive(Args)]
struct GenTreeArgs {
    /// Children per node at each stratum, coarsest first, e.g. 2,2,2.
    #[arg(long, value_delimiter = ',', required = true)]
    branching: Vec<usize>,
    /// Output tree file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    /// Tree file the labels refer to.
    #[arg(long)]
    tree: PathBuf,
    /// Feature dimension.
    #[arg(long)]
    dim: usize,
    /// Center-offset sigma per stratum, coarsest first, e.g. 0.3,0.1.
    #[arg(long, value_delimiter = ',', required = true)]
    sigma_levels: Vec<f64>,
    /// Within-leaf sample noise sigma.
    #[arg(long)]
    noise: f64,
    /// Samples per leaf (balanced mode).
    #[arg(long, conflicts_with = "long_tail", required_unless_present = "long_tail")]
    samples: Option<usize>,
    /// Long-tail mode: ALPHA,MIN_SAMPLES,TOTAL (Pareto-distributed counts).
    #[arg(long, value_name = "ALPHA,MIN,TOTAL")]
    long_tail: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum TrainerArg {
    Clean,
    Fat,
    Trades,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum CurriculumArg {
    /// Train the leaf stratum directly.
    None,
    /// Coarse-to-fine stages with warm-started heads.
    Chat,
    /// Coarse-to-fine stages with freshly initialized heads (ablation).
    Scratch,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ScheduleArg {
    Exp,
    Linear,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Tree file; the path is recorded in the checkpoint.
    #[arg(long)]
    tree: PathBuf,
    #[arg(long, value_enum, default_value_t = TrainerArg::Clean)]
    trainer: TrainerArg,
    #[arg(long, value_enum, default_value_t = CurriculumArg::None)]
    curriculum: CurriculumArg,
    /// Stage schedule shape (curriculum modes only).
    #[arg(long, value_enum, default_value_t = ScheduleArg::Exp)]
    schedule: ScheduleArg,
    /// Total optimizer steps.
    #[arg(long)]
    iters: usize,
    /// Perturbation budget for fat/trades; accepts decimals or k/255.
    #[arg(long, default_value = "8/255", value_parser = parse_fraction)]
    eps: f64,
    /// Perturbation step size for fat/trades; accepts decimals or k/255.
    #[arg(long, default_value = "2/255", value_parser = parse_fraction)]
    alpha: f64,
    /// Replays per minibatch (fat).
    #[arg(long, default_value_t = 4)]
    replays: usize,
    /// Robustness weight (trades).
    #[arg(long, default_value_t = TradesConfig::DEFAULT_BETA)]
    beta: f64,
    /// Inner maximization steps (trades).
    #[arg(long, default_value_t = 4)]
    inner_steps: usize,
    /// Hidden layer widths of the extractor, e.g. 32 or 64,32.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    hidden: Vec<usize>,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    minibatch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    /// Checkpoint file (from train).
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Attack kind: PGD, LHA, GHA, or NHA.
    #[arg(long)]
    attack: String,
    /// Target severity (stratum height) for LHA/GHA/NHA.
    #[arg(long, default_value_t = 0)]
    h: usize,
    #[arg(long, default_value = "8/255", value_parser = parse_fraction)]
    eps: f64,
    #[arg(long, default_value = "1/255", value_parser = parse_fraction)]
    alpha: f64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Node-logit aggregation for NHA.
    #[arg(long, value_enum, default_value_t = NhaVariantArg::Max)]
    nha_variant: NhaVariantArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file for the record (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum NhaVariantArg {
    Max,
    Exact,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// "default" for the standard sweep, or a JSON file with an AttackSpec array.
    #[arg(long, default_value = "default")]
    suite: String,
    /// Budget for the default suite.
    #[arg(long, default_value = "8/255", value_parser = parse_fraction)]
    eps: f64,
    /// Iterations for the default suite.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output report file (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the records as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateTreeArgs {
    #[arg(long)]
    tree: PathBuf,
}

#[derive(Args)]
struct InspectModelArgs {
    #[arg(long)]
    model: PathBuf,
}

/// Validation failures exit 1, I/O failures exit 2.
enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    fn validation(e: impl Display) -> Self {
        CliError::Validation(e.to_string())
    }

    fn io(e: impl Display) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TreeFileError> for CliError {
    fn from(e: TreeFileError) -> Self {
        match e {
            TreeFileError::Io(_) => CliError::io(e),
            _ => CliError::validation(e),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => CliError::io(e),
            _ => CliError::validation(e),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io(_) => CliError::io(e),
            _ => CliError::validation(e),
        }
    }
}

impl From<hieradv::curriculum::TrainError> for CliError {
    fn from(e: hieradv::curriculum::TrainError) -> Self {
        CliError::validation(e)
    }
}

impl From<hieradv::bench::BenchError> for CliError {
    fn from(e: hieradv::bench::BenchError) -> Self {
        CliError::validation(e)
    }
}

impl From<hieradv::attacks::AttackError> for CliError {
    fn from(e: hieradv::attacks::AttackError) -> Self {
        CliError::validation(e)
    }
}

/// Parses "0.0314", "8/255", or "1/2" exactly as written.
fn parse_fraction(s: &str) -> Result<f64, String> {
    let v = if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|_| format!("bad numerator in '{s}'"))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|_| format!("bad denominator in '{s}'"))?;
        if d == 0.0 {
            return Err(format!("zero denominator in '{s}'"));
        }
        n / d
    } else {
        s.parse().map_err(|_| format!("bad number '{s}'"))?
    };
    if !v.is_finite() {
        return Err(format!("'{s}' is not finite"));
    }
    Ok(v)
}

fn write_machine_output(path: Option<&Path>, content: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, content).map_err(CliError::io),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn pretty_json<T: serde::Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report serialization cannot fail");
    text.push('\n');
    text
}

fn cmd_gen_tree(args: &GenTreeArgs) -> Result<(), CliError> {
    let tree = hieradv::synth::gen_tree(&args.branching)?;
    tree.save(&args.out).map_err(CliError::io)?;
    eprintln!(
        "wrote tree with level sizes {:?} to {}",
        tree.level_sizes(),
        args.out.display()
    );
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let tree = Hierarchy::load(&args.tree)?;
    let samples = match (&args.samples, &args.long_tail) {
        (Some(n), None) => SampleSpec::PerLeaf(*n),
        (None, Some(spec)) => {
            let parts: Vec<&str> = spec.split(',').collect();
            if parts.len() != 3 {
                return Err(CliError::Validation(format!(
                    "--long-tail expects ALPHA,MIN,TOTAL, got '{spec}'"
                )));
            }
            let alpha: f64 = parts[0]
                .trim()
                .parse()
                .map_err(|_| CliError::Validation(format!("bad alpha '{}'", parts[0])))?;
            let min_samples: usize = parts[1]
                .trim()
                .parse()
                .map_err(|_| CliError::Validation(format!("bad min '{}'", parts[1])))?;
            let total: usize = parts[2]
                .trim()
                .parse()
                .map_err(|_| CliError::Validation(format!("bad total '{}'", parts[2])))?;
            SampleSpec::LongTail {
                alpha,
                min_samples,
                total,
            }
        }
        _ => {
            return Err(CliError::Validation(
                "exactly one of --samples or --long-tail is required".into(),
            ))
        }
    };
    let params = DataParams {
        dim: args.dim,
        sigma_levels: args.sigma_levels.clone(),
        noise_sigma: args.noise,
        samples,
        seed: args.seed,
    };
    let splits = gen_data(&tree, &params)?;
    write_dataset_dir(&args.out_dir, &splits, &params, &args.tree.to_string_lossy())?;
    eprintln!(
        "wrote dataset ({} train / {} val / {} test) to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let tree = Hierarchy::load(&args.tree)?;
    let manifest = load_manifest(&args.data)?;
    let data = load_split(&args.data, "train")?;
    let labels = data.labels.clone();
    let mut dims = vec![manifest.dim];
    dims.extend_from_slice(&args.hidden);

    let trainer = match args.trainer {
        TrainerArg::Clean => hieradv::curriculum::TrainerKind::Clean {
            minibatch: args.minibatch,
        },
        TrainerArg::Fat => hieradv::curriculum::TrainerKind::Fat(FatConfig {
            epsilon: args.eps,
            alpha: args.alpha,
            replays: args.replays,
            minibatch: args.minibatch,
        }),
        TrainerArg::Trades => hieradv::curriculum::TrainerKind::Trades(TradesConfig {
            beta: args.beta,
            epsilon: args.eps,
            inner_alpha: args.alpha,
            inner_steps: args.inner_steps,
            minibatch: args.minibatch,
        }),
    };
    let adam = AdamConfig {
        lr: args.lr,
        ..AdamConfig::default()
    };
    let extractor_seed = derive_seed(args.seed, &[1]);
    let train_seed = derive_seed(args.seed, &[3]);

    let (classifier, reports) = match args.curriculum {
        CurriculumArg::None => {
            let mut c = Classifier::new(
                Mlp::new(&dims, extractor_seed),
                tree.num_leaves(),
                derive_seed(args.seed, &[2]),
            );
            let mut opt = AdamState::new(&c, adam);
            let final_loss = match &trainer {
                hieradv::curriculum::TrainerKind::Clean { minibatch } => clean_train(
                    &mut c,
                    &data,
                    &labels,
                    *minibatch,
                    args.iters,
                    &mut opt,
                    train_seed,
                )?,
                hieradv::curriculum::TrainerKind::Fat(cfg) => {
                    fat_train(&mut c, &data, &labels, cfg, args.iters, &mut opt, train_seed)?
                }
                hieradv::curriculum::TrainerKind::Trades(cfg) => {
                    trades_train(&mut c, &data, &labels, cfg, args.iters, &mut opt, train_seed)?
                }
            };
            let report = StageReport {
                stage: 0,
                height: 0,
                iterations: args.iters,
                final_loss,
            };
            (c, vec![report])
        }
        CurriculumArg::Chat | CurriculumArg::Scratch => {
            let mode = match args.schedule {
                ScheduleArg::Exp => ScheduleMode::Exponential,
                ScheduleArg::Linear => ScheduleMode::Linear,
            };
            let schedule = make_schedule(args.iters, tree.num_levels(), mode)?;
            let transfer = match args.curriculum {
                CurriculumArg::Chat => HeadTransfer::WarmUp,
                _ => HeadTransfer::Scratch,
            };
            let mut c = curriculum_start(&dims, &tree, extractor_seed);
            let reports = chat_train(
                &mut c, &tree, &data, &labels, &schedule, &trainer, adam, transfer, train_seed,
            )?;
            (c, reports)
        }
    };

    save_checkpoint(&classifier, &args.tree.to_string_lossy(), 0, &args.out)?;
    print!("{}", pretty_json(&reports));
    eprintln!(
        "trained {} stage(s), final loss {:.6}; checkpoint at {}",
        reports.len(),
        reports.last().map(|r| r.final_loss).unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn load_model_and_tree(model: &Path) -> Result<(Classifier, Hierarchy), CliError> {
    let (classifier, tree_path, _) = load_checkpoint(model)?;
    let tree = Hierarchy::load(Path::new(&tree_path))?;
    Ok((classifier, tree))
}

fn cmd_attack(args: &AttackArgs) -> Result<(), CliError> {
    let (classifier, tree) = load_model_and_tree(&args.model)?;
    let data = load_split(&args.data, args.split.name())?;
    let kind = match args.attack.to_uppercase().as_str() {
        "PGD" => AttackKind::Pgd,
        "LHA" => AttackKind::Lha,
        "GHA" => AttackKind::Gha,
        "NHA" => AttackKind::Nha,
        other => {
            return Err(CliError::Validation(format!(
                "unknown attack '{other}' (expected PGD, LHA, GHA, or NHA)"
            )))
        }
    };
    let mut spec = AttackSpec::at_height(kind, args.h, args.eps, args.alpha, args.steps);
    spec.nha_variant = match args.nha_variant {
        NhaVariantArg::Max => NhaVariant::Max,
        NhaVariantArg::Exact => NhaVariant::Exact,
    };
    spec.validate(&tree)?;
    let record = evaluate_attack(&classifier, &tree, &data, &spec, args.seed)?;
    write_machine_output(args.out.as_deref(), &pretty_json(&record))?;
    eprintln!(
        "{} on {} instances: robust accuracy {:.4}, average mistake {:.4}",
        record.attack.label(),
        record.n_evaluated,
        record.robust_accuracy,
        record.average_mistake
    );
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let (classifier, tree) = load_model_and_tree(&args.model)?;
    let data = load_split(&args.data, args.split.name())?;
    let specs = if args.suite == "default" {
        default_suite(&tree, args.eps, args.steps)
    } else {
        let text = fs::read_to_string(&args.suite).map_err(CliError::io)?;
        serde_json::from_str::<Vec<AttackSpec>>(&text)
            .map_err(|e| CliError::Validation(format!("malformed suite file: {e}")))?
    };
    for spec in &specs {
        spec.validate(&tree)?;
    }
    let report = run_suite(&classifier, &tree, &data, &specs, args.seed)?;
    if let Some(csv_path) = &args.csv {
        fs::write(csv_path, render_csv(&report.records)).map_err(CliError::io)?;
    }
    write_machine_output(args.out.as_deref(), &pretty_json(&report))?;
    eprintln!(
        "{} attacks over {} instances: worst-case robust accuracy {:.4}, worst-case average mistake {:.4}",
        report.records.len(),
        report.summary.n_evaluated,
        report.summary.robust_accuracy,
        report.summary.average_mistake
    );
    Ok(())
}

fn cmd_validate_tree(args: &ValidateTreeArgs) -> Result<(), CliError> {
    let tree = Hierarchy::load(&args.tree)?;
    let summary = serde_json::json!({
        "num_levels": tree.num_levels(),
        "level_sizes": tree.level_sizes(),
        "num_leaves": tree.num_leaves(),
    });
    println!("{summary}");
    eprintln!(
        "OK: {} levels, level sizes {:?}",
        tree.num_levels(),
        tree.level_sizes()
    );
    Ok(())
}

fn cmd_inspect_model(args: &InspectModelArgs) -> Result<(), CliError> {
    let (classifier, tree_path, current_height) = load_checkpoint(&args.model)?;
    let layer_dims: Vec<usize> = classifier
        .extractor
        .layers
        .iter()
        .map(|l| l.out_dim)
        .collect();
    let summary = serde_json::json!({
        "input_dim": classifier.extractor.layers.first().map(|l| l.in_dim).unwrap_or(0),
        "layer_dims": layer_dims,
        "feat_dim": classifier.head.feat_dim,
        "n_classes": classifier.head.n_classes,
        "tree_path": tree_path,
        "current_height": current_height,
    });
    println!("{summary}");
    eprintln!(
        "classifier with {} extractor layer(s), {} classes",
        classifier.extractor.layers.len(),
        classifier.head.n_classes
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenTree(args) => cmd_gen_tree(args),
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Bench(args) => cmd_bench(args),
        Command::ValidateTree(args) => cmd_validate_tree(args),
        Command::InspectModel(args) => cmd_inspect_model(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.workers == 0 {
        eprintln!("error: --workers must be >= 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
    {
        eprintln!("error: cannot configure worker pool: {e}");
        return ExitCode::from(1);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
