//! Command-line experiments: classifier training, GAN training, attacks,
//! evaluation tables, sweeps and timing.

pub mod commands;
pub mod config;
pub mod grid;
pub mod plot;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use odeadv::data::{Dataset, Resize};

use config::{parse_budget, ExperimentConfig, GeneratorKind, SubsetSize, DATA_DIR_ENV};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING_DATA: u8 = 3;

/// Raised when dataset files are absent; maps to exit code 3.
#[derive(Debug)]
pub struct MissingData(pub Vec<PathBuf>);

impl std::fmt::Display for MissingData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing dataset file(s):")?;
        for p in &self.0 {
            write!(f, " {}", p.display())?;
        }
        Ok(())
    }
}

impl std::error::Error for MissingData {}

#[derive(Parser, Debug)]
#[command(name = "odeadv", version, about = "Adversarial attacks with neural-ODE generators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding the dataset files (also `ODEADV_DATA_DIR`).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(short, long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_dataset)]
    pub dataset: Option<Dataset>,
    /// 28→32 resize for Fashion-MNIST: bilinear or zero_pad.
    #[arg(long, value_parser = parse_resize)]
    pub resize: Option<Resize>,
    /// Training images used (a count or "full").
    #[arg(long, value_parser = parse_subset)]
    pub subset_size: Option<SubsetSize>,
    /// Test images used (a count or "full").
    #[arg(long, value_parser = parse_subset)]
    pub test_size: Option<SubsetSize>,
    /// Training epochs (classifier epochs for train-classifier).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Test-time budget, e.g. 15/255 or 0.0588.
    #[arg(long, value_parser = parse_eps)]
    pub eps: Option<f32>,
    /// Generator training budget.
    #[arg(long, value_parser = parse_eps)]
    pub eps_train: Option<f32>,
    /// Targeted mode towards this class.
    #[arg(long)]
    pub target_class: Option<usize>,
}

fn parse_eps(s: &str) -> Result<f32, String> {
    parse_budget(s).map_err(|e| e.to_string())
}

fn parse_subset(s: &str) -> Result<SubsetSize, String> {
    SubsetSize::parse(s).map_err(|e| e.to_string())
}

fn parse_dataset(s: &str) -> Result<Dataset, String> {
    match s {
        "fmnist" => Ok(Dataset::Fmnist),
        "cifar10" => Ok(Dataset::Cifar10),
        _ => Err(format!("unknown dataset {s:?} (fmnist, cifar10)")),
    }
}

fn parse_resize(s: &str) -> Result<Resize, String> {
    match s {
        "bilinear" => Ok(Resize::Bilinear),
        "zero_pad" => Ok(Resize::ZeroPad),
        _ => Err(format!("unknown resize {s:?} (bilinear, zero_pad)")),
    }
}

fn parse_generator_kind(s: &str) -> Result<GeneratorKind, String> {
    match s {
        "node" => Ok(GeneratorKind::Node),
        "advgan" => Ok(GeneratorKind::Advgan),
        _ => Err(format!("unknown generator {s:?} (node, advgan)")),
    }
}

/// `name=path`.
#[derive(Clone, Debug, PartialEq)]
pub struct Named {
    pub name: String,
    pub path: PathBuf,
}

fn parse_named(s: &str) -> Result<Named, String> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok(Named { name: n.into(), path: p.into() }),
        _ => {
            // A bare path is named after its file stem.
            let path = PathBuf::from(s);
            let name =
                path.file_stem().and_then(|x| x.to_str()).ok_or_else(|| format!("bad model spec {s:?}"))?.to_string();
            Ok(Named { name, path })
        }
    }
}

/// `source:name=path`, a generator trained against `source`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourcedGenerator {
    pub source: String,
    pub name: String,
    pub path: PathBuf,
}

fn parse_sourced(s: &str) -> Result<SourcedGenerator, String> {
    let (source, rest) = s.split_once(':').ok_or_else(|| format!("expected source:name=path, got {s:?}"))?;
    let n = parse_named(rest)?;
    Ok(SourcedGenerator { source: source.into(), name: n.name, path: n.path })
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train target classifiers and record their clean accuracy.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        /// smallcnn_a, smallcnn_b, smallcnn_c or all.
        #[arg(long, default_value = "all")]
        arch: String,
    },
    /// Train a perturbation generator against a classifier.
    TrainAdvgan {
        #[command(flatten)]
        common: Common,
        /// Classifier checkpoint attacked during training.
        #[arg(long)]
        source: PathBuf,
        #[arg(long, value_parser = parse_generator_kind)]
        generator: Option<GeneratorKind>,
    },
    /// Run one attack against one classifier.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// fgsm, ifgsm, mifgsm, nifgsm or generator.
        #[arg(long, default_value = "ifgsm")]
        method: String,
        /// Generator checkpoint for --method generator.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Also write a class-by-target PNG grid (clean images on the diagonal).
        #[arg(long)]
        grid: bool,
    },
    /// White-box table of every gradient attack and the given generators on one classifier.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Generators as name=path (repeatable).
        #[arg(long = "generator", value_parser = parse_named)]
        generators: Vec<Named>,
        /// Gradient attacks to include.
        #[arg(long, value_delimiter = ',', default_value = "fgsm,ifgsm,mifgsm,nifgsm")]
        methods: Vec<String>,
    },
    /// Transfer matrix from source to target classifiers.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Source classifiers as name=path (repeatable).
        #[arg(long = "source", value_parser = parse_named, required = true)]
        sources: Vec<Named>,
        /// Target classifiers as name=path (repeatable).
        #[arg(long = "target", value_parser = parse_named, required = true)]
        targets: Vec<Named>,
        /// Generators as source:name=path (repeatable).
        #[arg(long = "generator", value_parser = parse_sourced)]
        generators: Vec<SourcedGenerator>,
        #[arg(long, value_delimiter = ',', default_value = "fgsm,ifgsm,mifgsm,nifgsm")]
        methods: Vec<String>,
    },
    /// Attack quality against the number of Euler steps.
    SweepNodeSteps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7,8,9")]
        steps: Vec<usize>,
    },
    /// Transfer quality against the generator training budget.
    SweepEpsTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        /// Transfer targets as name=path (repeatable).
        #[arg(long = "target", value_parser = parse_named, required = true)]
        targets: Vec<Named>,
        #[arg(long, value_delimiter = ',', value_parser = parse_eps, default_value = "5/255,10/255,15/255")]
        eps_train_values: Vec<f32>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Attack quality over a grid of GAN and hinge loss weights.
    SweepLossWeights {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,0.1,0.01,0.001,0.0001")]
        values: Vec<f64>,
    },
    /// Wall-clock generation time of generators versus I-FGSM.
    Timing {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Generators as name=path (repeatable).
        #[arg(long = "generator", value_parser = parse_named, required = true)]
        generators: Vec<Named>,
        #[arg(long, default_value_t = 2)]
        repeats: usize,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::TrainClassifier { common, .. }
            | Command::TrainAdvgan { common, .. }
            | Command::Attack { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Transfer { common, .. }
            | Command::SweepNodeSteps { common, .. }
            | Command::SweepEpsTrain { common, .. }
            | Command::SweepLossWeights { common, .. }
            | Command::Timing { common, .. } => common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainClassifier { .. } => "train-classifier",
            Command::TrainAdvgan { .. } => "train-advgan",
            Command::Attack { .. } => "attack",
            Command::Evaluate { .. } => "evaluate",
            Command::Transfer { .. } => "transfer",
            Command::SweepNodeSteps { .. } => "sweep-node-steps",
            Command::SweepEpsTrain { .. } => "sweep-eps-train",
            Command::SweepLossWeights { .. } => "sweep-loss-weights",
            Command::Timing { .. } => "timing",
        }
    }
}

/// Builds the effective configuration: defaults, then the file, then
/// `ODEADV_DATA_DIR`, then flags.
pub fn resolve_config(common: &Common, classifier_epochs: bool) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()) {
        cfg.data_dir = dir.into();
    }
    if let Some(v) = &common.data_dir {
        cfg.data_dir = v.clone();
    }
    if let Some(v) = &common.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
        cfg.classifier.seed = v;
    }
    if let Some(v) = common.dataset {
        cfg.dataset = v;
    }
    if let Some(v) = common.resize {
        cfg.resize = v;
    }
    if let Some(v) = common.subset_size {
        cfg.subset_size = v;
    }
    if let Some(v) = common.test_size {
        cfg.test_size = v;
    }
    // Classifiers train and report on the full splits unless told otherwise.
    if classifier_epochs {
        cfg.subset_size = common.subset_size.unwrap_or(SubsetSize::Full);
        cfg.test_size = common.test_size.unwrap_or(SubsetSize::Full);
    }
    if let Some(v) = common.epochs {
        if classifier_epochs {
            cfg.classifier.epochs = v;
        } else {
            cfg.gan.epochs = v;
        }
    }
    if let Some(v) = common.eps {
        cfg.budget.eps_test = v;
    }
    if let Some(v) = common.eps_train {
        cfg.budget.eps_train = v;
    }
    if common.target_class.is_some() {
        cfg.target_class = common.target_class;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Logs to stderr and `run.log` in the output directory.
fn init_logging(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let level = std::env::var("ODEADV_LOG").ok().and_then(|v| v.parse().ok()).unwrap_or(log::LevelFilter::Info);
    let file = fern::log_file(dir.join("run.log"))?;
    let res = fern::Dispatch::new()
        .format(|out, msg, rec| out.finish(format_args!("[{} {}] {}", rec.level(), rec.target(), msg)))
        .level(level)
        .chain(std::io::stderr())
        .chain(file)
        .apply();
    // A second run in the same process keeps the first logger.
    if res.is_err() {
        log::debug!("logger already installed");
    }
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cmd = &cli.command;
    let cfg = resolve_config(cmd.common(), matches!(cmd, Command::TrainClassifier { .. }))?;
    init_logging(&cfg.output_dir)?;
    cfg.write_snapshot()?;
    let missing: Vec<PathBuf> =
        commands::dataset_files(cfg.dataset, &cfg.data_dir).into_iter().filter(|p| !p.is_file()).collect();
    if !missing.is_empty() {
        return Err(MissingData(missing).into());
    }
    log::info!("{} -> {}", cmd.name(), cfg.output_dir.display());
    commands::dispatch(cmd, &cfg)
}

/// Parses `args`, runs the subcommand and maps failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<MissingData>()) {
                ExitCode::from(EXIT_MISSING_DATA)
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}
