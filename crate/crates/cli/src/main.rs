use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use reviewkd::data::{cifar_root, load_cifar, CifarVariant, Dataset, Split, SyntheticConfig, DATA_ROOT_ENV};
use reviewkd::experiments::{
    emit_report, render, AblationResult, Experiment, Report, ReportFormat, ResultsStore, StageGridResult,
};
use reviewkd::nets::{arch, arch_names, summarize};
use reviewkd::train::{evaluate, train_distill, train_plain, Checkpoint, Teacher, TrainOptions};
use reviewkd::types::{config_hash, validate_config, DistillConfig, ExperimentConfig, Mechanism, TrainSchedule};

/// Exit status when every run finished but some grid or ladder cell failed.
const CELL_FAILURE: u8 = 2;

#[derive(Parser)]
#[command(name = "reviewkd", version, about = "Train stage-partitioned CNNs with cross-stage feature distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print registered architectures with stage and parameter counts.
    ListArchs {
        #[arg(long, default_value_t = 100)]
        classes: usize,
    },
    /// Train one student, plainly or under a distillation mechanism.
    Train(TrainArgs),
    /// Print the test accuracy of a saved checkpoint.
    Eval(EvalArgs),
    /// Single-pair distillation for every (student stage, teacher stage).
    StageGrid(ExperimentArgs),
    /// The six-row mechanism ablation ladder.
    Ablate(ExperimentArgs),
    /// Re-render a finished experiment from its stored result.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    dataset: DatasetKind,
    /// Directory holding the CIFAR binary archives.
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    /// Synthetic class count.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 60)]
    train_per_class: usize,
    #[arg(long, default_value_t = 40)]
    test_per_class: usize,
    #[arg(long, default_value_t = 16)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

struct Data {
    train: Dataset,
    test: Dataset,
    classes: usize,
}

impl DataArgs {
    fn variant(&self) -> Option<CifarVariant> {
        match self.dataset {
            DatasetKind::Synthetic => None,
            DatasetKind::Cifar10 => Some(CifarVariant::Cifar10),
            DatasetKind::Cifar100 => Some(CifarVariant::Cifar100),
        }
    }

    fn synthetic(&self, train_per_class: usize) -> SyntheticConfig {
        SyntheticConfig::hard(self.classes, train_per_class, self.test_per_class, self.image_size, self.data_seed)
    }

    fn load(&self) -> Result<Data> {
        let (train, test) = match self.variant() {
            None => self.synthetic(self.train_per_class).generate()?,
            Some(v) => {
                let root = cifar_root(self.data_root.as_deref())
                    .with_context(|| format!("CIFAR needs --data-root or {DATA_ROOT_ENV}"))?;
                (load_cifar(&root, v, Split::Train)?, load_cifar(&root, v, Split::Test)?)
            }
        };
        let classes = train.classes();
        Ok(Data { train, test, classes })
    }

    fn test_split(&self) -> Result<Dataset> {
        Ok(match self.variant() {
            None => self.synthetic(self.train_per_class).generate()?.1,
            Some(v) => {
                let root = cifar_root(self.data_root.as_deref())
                    .with_context(|| format!("CIFAR needs --data-root or {DATA_ROOT_ENV}"))?;
                load_cifar(&root, v, Split::Test)?
            }
        })
    }
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (i, j) = s.split_once(',').ok_or("expected STUDENT,TEACHER")?;
    let stage = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((stage(i)?, stage(j)?))
}

#[derive(Args)]
struct SetupArgs {
    /// YAML file with distillation and schedule fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// 240 epochs, batch 128, lr 0.1 decayed by 0.1 at 150, 180 and 210.
    #[arg(long, conflicts_with = "config")]
    paper_schedule: bool,
    /// Overrides the epoch count; decay milestones beyond it are dropped.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mechanism: Option<Mechanism>,
    #[arg(long = "lambda")]
    lambda_weight: Option<f64>,
    #[arg(long)]
    abf: Option<bool>,
    #[arg(long)]
    hcl: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    pyramid_levels: Option<Vec<usize>>,
    /// Student and teacher stage as `i,j`, for skd and skd_review.
    #[arg(long, value_parser = parse_pair)]
    stage_pair: Option<(usize, usize)>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "tiny-resnet-8")]
    student: String,
    #[arg(long, default_value = "tiny-wrn-40-2")]
    teacher: String,
    /// Frozen teacher weights; trained and cached in the results directory when omitted.
    #[arg(long)]
    teacher_checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    teacher_seed: u64,
    /// Train the teacher on a larger synthetic pool of this many records per class.
    #[arg(long)]
    teacher_train_per_class: Option<usize>,
    #[arg(long, default_value = "results")]
    results: PathBuf,
    /// Print one line per epoch.
    #[arg(long, short)]
    verbose: bool,
    #[command(flatten)]
    data: DataArgs,
}

impl SetupArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig {
                distill: DistillConfig::default(),
                schedule: if self.paper_schedule {
                    TrainSchedule::full()
                } else {
                    TrainSchedule::desk()
                },
            },
        };
        if let Some(e) = self.epochs {
            c.schedule.epochs = e;
            c.schedule.decay_start_epoch = c.schedule.decay_start_epoch.min(e);
        }
        if let Some(b) = self.batch_size {
            c.schedule.batch_size = b;
        }
        if let Some(lr) = self.lr {
            c.schedule.base_lr = lr;
        }
        let d = &mut c.distill;
        if let Some(m) = self.mechanism {
            d.mechanism = m;
        }
        if let Some(l) = self.lambda_weight {
            d.lambda_weight = l;
        }
        if let Some(a) = self.abf {
            d.use_abf = a;
        }
        if let Some(h) = self.hcl {
            d.use_hcl = h;
        }
        if let Some(levels) = &self.pyramid_levels {
            d.pyramid_levels = levels.clone();
        }
        if self.stage_pair.is_some() {
            d.stage_pair = self.stage_pair;
        }
        if let Some(s) = self.seed {
            d.seed = s;
        }
        c.schedule.validate()?;
        c.distill = validate_config(c.distill)?;
        Ok(c)
    }

    fn options(&self) -> TrainOptions {
        TrainOptions {
            progress: self.verbose,
            ..TrainOptions::default()
        }
    }

    /// Loads the teacher checkpoint, or trains one with plain cross-entropy
    /// and caches it under the results directory.
    fn teacher(&self, data: &Data, schedule: &TrainSchedule) -> Result<Checkpoint> {
        if let Some(path) = &self.teacher_checkpoint {
            let ck = Checkpoint::load(path)?;
            if ck.arch.num_classes != data.classes {
                bail!("{}: teacher has {} classes, data has {}", path.display(), ck.arch.num_classes, data.classes);
            }
            return Ok(ck);
        }
        let pool = match (self.teacher_train_per_class, self.data.variant()) {
            (Some(n), None) => Some(self.data.synthetic(n).generate()?.0),
            (Some(_), Some(_)) => bail!("--teacher-train-per-class applies to synthetic data only"),
            (None, _) => None,
        };
        let train = pool.as_ref().unwrap_or(&data.train);
        let hash = config_hash(&DistillConfig::plain(self.teacher_seed), schedule);
        let path = self
            .results
            .join("teachers")
            .join(format!("{}-{}-{}.ckpt", self.teacher, &train.checksum()[..12], &hash[..12]));
        if path.exists() {
            eprintln!("using cached teacher {}", path.display());
            return Ok(Checkpoint::load(&path)?);
        }
        eprintln!("training teacher {} on {} records", self.teacher, train.len());
        let spec = arch(&self.teacher, data.classes)?;
        let out = train_plain(&spec, schedule, train, &data.test, self.teacher_seed, &self.options())?;
        out.best.save(&path)?;
        eprintln!("teacher best accuracy {:.2}, saved to {}", out.best.accuracy, path.display());
        Ok(out.best)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    setup: SetupArgs,
    /// Where to write the best student checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    setup: SetupArgs,
    /// Seeds per cell, counting up from --seed.
    #[arg(long, default_value_t = 3)]
    repeats: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExperimentKind {
    StageGrid,
    Ablation,
}

impl ExperimentKind {
    fn name(self) -> &'static str {
        match self {
            ExperimentKind::StageGrid => "stage-grid",
            ExperimentKind::Ablation => "ablation",
        }
    }
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, value_enum)]
    experiment: ExperimentKind,
    /// csv, markdown or png.
    #[arg(long, default_value = "markdown")]
    format: String,
    #[arg(long, default_value = "results")]
    results: PathBuf,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn summary_path(results: &Path, kind: ExperimentKind) -> PathBuf {
    results.join("reports").join(format!("{}.json", kind.name()))
}

enum Outcome {
    Grid(StageGridResult),
    Ablation(AblationResult),
}

impl Outcome {
    fn report(&self) -> Report<'_> {
        match self {
            Outcome::Grid(g) => Report::Grid(g),
            Outcome::Ablation(a) => Report::Ablation(a),
        }
    }

    fn any_failed(&self) -> bool {
        match self {
            Outcome::Grid(g) => g.any_failed(),
            Outcome::Ablation(a) => a.any_failed(),
        }
    }

    fn load(results: &Path, kind: ExperimentKind) -> Result<Self> {
        let path = summary_path(results, kind);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(match kind {
            ExperimentKind::StageGrid => Outcome::Grid(serde_json::from_str(&text)?),
            ExperimentKind::Ablation => Outcome::Ablation(serde_json::from_str(&text)?),
        })
    }
}

fn list_archs(classes: usize) -> Result<ExitCode> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{:<20} {:>6} {:>12}  channels", "name", "stages", "parameters")?;
    for name in arch_names() {
        let s = summarize(name, classes)?;
        writeln!(out, "{:<20} {:>6} {:>12}  {:?}", s.name, s.stages, s.parameters, s.channels)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn train(args: &TrainArgs) -> Result<ExitCode> {
    let setup = &args.setup;
    let config = setup.resolve()?;
    let data = setup.data.load()?;
    let spec = arch(&setup.student, data.classes)?;
    let mut options = setup.options();
    let seed = config.distill.seed;
    let mechanism = config.distill.mechanism;
    options.checkpoint = Some(args.checkpoint.clone().unwrap_or_else(|| {
        setup
            .results
            .join("checkpoints")
            .join(format!("{}-{mechanism}-seed{seed}.ckpt", setup.student))
    }));
    let out = if mechanism == Mechanism::None {
        train_plain(&spec, &config.schedule, &data.train, &data.test, seed, &options)?
    } else {
        let ck = setup.teacher(&data, &config.schedule)?;
        let (net, store) = ck.restore()?;
        let teacher = Teacher { net: &net, store: &store };
        train_distill(&spec, Some(teacher), &config.distill, &config.schedule, &data.train, &data.test, &options)?
    };
    ResultsStore::new(&setup.results).save("train", &format!("{}-{mechanism}", setup.student), seed, &out.record)?;
    println!(
        "{} {mechanism} seed {seed}: final {:.2}, best {:.2} ({:.1}s)",
        setup.student, out.record.final_accuracy, out.record.best_accuracy, out.record.wall_time_s
    );
    if let Some(path) = &options.checkpoint {
        println!("best checkpoint: {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(args: &EvalArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (net, store) = ck.restore()?;
    let test = args.data.test_split()?;
    if test.classes() != ck.arch.num_classes {
        bail!("checkpoint has {} classes, data has {}", ck.arch.num_classes, test.classes());
    }
    let acc = evaluate(&net, &store, &test, args.batch_size)?;
    println!("{} on {}: {acc:.2}% top-1", ck.arch.name, test.name());
    Ok(ExitCode::SUCCESS)
}

fn experiment(args: &ExperimentArgs, kind: ExperimentKind) -> Result<ExitCode> {
    let setup = &args.setup;
    let mut config = setup.resolve()?;
    if kind == ExperimentKind::StageGrid && setup.config.is_none() && setup.hcl.is_none() {
        config.distill.use_hcl = false;
    }
    if args.repeats == 0 {
        bail!("--repeats must be >= 1");
    }
    let data = setup.data.load()?;
    let spec = arch(&setup.student, data.classes)?;
    let ck = setup.teacher(&data, &config.schedule)?;
    let (net, store) = ck.restore()?;
    let base = config.distill.seed;
    let mut exp = Experiment::new(
        spec,
        Teacher { net: &net, store: &store },
        &data.train,
        &data.test,
        config.schedule.clone(),
        config.distill.clone(),
        (base..base + args.repeats).collect(),
        Some(ResultsStore::new(&setup.results)),
    );
    exp.options = setup.options();
    let outcome = match kind {
        ExperimentKind::StageGrid => Outcome::Grid(exp.run_stage_grid()?),
        ExperimentKind::Ablation => Outcome::Ablation(exp.run_ablation()?),
    };
    eprintln!("{} runs executed, the rest reused from {}", exp.runs_executed(), setup.results.display());
    let json = match &outcome {
        Outcome::Grid(g) => serde_json::to_string_pretty(g)?,
        Outcome::Ablation(a) => serde_json::to_string_pretty(a)?,
    };
    let summary = summary_path(&setup.results, kind);
    reviewkd::io::write_atomic(&summary, json.as_bytes())?;
    for format in [ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Png] {
        emit_report(outcome.report(), format, &summary.with_extension(format.extension()))?;
    }
    std::io::stdout().write_all(&render(outcome.report(), ReportFormat::Markdown)?)?;
    Ok(exit_for(&outcome))
}

fn report(args: &ReportArgs) -> Result<ExitCode> {
    let format: ReportFormat = args.format.parse()?;
    let outcome = Outcome::load(&args.results, args.experiment)?;
    match &args.out {
        Some(path) => emit_report(outcome.report(), format, path)?,
        None if format == ReportFormat::Png => bail!("png output needs --out"),
        None => std::io::stdout().write_all(&render(outcome.report(), format)?)?,
    }
    Ok(exit_for(&outcome))
}

fn exit_for(outcome: &Outcome) -> ExitCode {
    if outcome.any_failed() {
        eprintln!("some cells failed; see the report");
        ExitCode::from(CELL_FAILURE)
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::ListArchs { classes } => list_archs(*classes),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::StageGrid(a) => experiment(a, ExperimentKind::StageGrid),
        Command::Ablate(a) => experiment(a, ExperimentKind::Ablation),
        Command::Report(a) => report(a),
    };
    result.unwrap_or_else(|e| {
        let broken_pipe = e
            .downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe);
        if broken_pipe {
            return ExitCode::SUCCESS;
        }
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
