//! Subcommand pipelines.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use log::{info, warn};
use odeadv::data::{self, Dataset, Split};
use odeadv::metrics::{self, AttackMethod, Source};
use odeadv::models::train_classifier;
use odeadv::training::{self, TrainOutcome};
use odeadv::{
    AdvGanConfig, AdvGanGenerator, AdversarialGenerator, Arch, Classifier, ClassifierSpec, Discriminator, EvalReport,
    GradAttack, ImageBatch, LabelSpec, NodeGenerator, TargetModel, VectorFieldConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GeneratorKind, SubsetSize};
use crate::{grid, plot, Command, MissingData, Named};

pub const NUM_CLASSES: usize = 10;

pub fn dispatch(cmd: &Command, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    match cmd {
        Command::TrainClassifier { arch, .. } => train_classifiers(cfg, arch, cfg.subset_size, cfg.test_size),
        Command::TrainAdvgan { source, generator, .. } => {
            train_advgan(cfg, source, generator.unwrap_or(cfg.gan.generator))
        }
        Command::Attack { model, method, generator, grid, .. } => {
            attack(cfg, model, method, generator.as_deref(), *grid)
        }
        Command::Evaluate { model, generators, methods, .. } => evaluate(cfg, model, generators, methods),
        Command::Transfer { sources, targets, generators, methods, .. } => {
            let sources: Vec<(String, &Path)> = sources.iter().map(|n| (n.name.clone(), n.path.as_path())).collect();
            let gens: Vec<(String, String, &Path)> =
                generators.iter().map(|g| (g.source.clone(), g.name.clone(), g.path.as_path())).collect();
            transfer(cfg, &sources, targets, &gens, methods)
        }
        Command::SweepNodeSteps { source, steps, .. } => sweep_node_steps(cfg, source, steps),
        Command::SweepEpsTrain { source, targets, eps_train_values, seeds, .. } => {
            sweep_eps_train(cfg, source, targets, eps_train_values, seeds)
        }
        Command::SweepLossWeights { source, values, .. } => sweep_loss_weights(cfg, source, values),
        Command::Timing { model, generators, repeats, .. } => timing(cfg, model, generators, *repeats),
    }
}

/// Dataset files expected in `dir`.
pub fn dataset_files(dataset: Dataset, dir: &Path) -> Vec<PathBuf> {
    match dataset {
        Dataset::Fmnist => data::FMNIST_FILES.iter().map(|f| dir.join(f)).collect(),
        Dataset::Cifar10 => {
            let (mut train, test) = data::cifar_files(dir);
            train.push(test);
            train
        }
    }
}

/// Loads both splits, truncated to the first `train`/`test` samples.
pub fn load_data(cfg: &ExperimentConfig, train: SubsetSize, test: SubsetSize) -> anyhow::Result<Split> {
    let missing: Vec<PathBuf> =
        dataset_files(cfg.dataset, &cfg.data_dir).into_iter().filter(|p| !p.is_file()).collect();
    if !missing.is_empty() {
        return Err(MissingData(missing).into());
    }
    let split = data::load(cfg.dataset, &cfg.data_dir, cfg.resize)?;
    let (nt, ne) = (train.limit(split.train.len()), test.limit(split.test.len()));
    info!("data: {} train / {} test images from {}", nt, ne, cfg.data_dir.display());
    Ok(Split { train: split.train.take(nt), test: split.test.take(ne) })
}

pub fn load_classifier(path: &Path) -> anyhow::Result<TargetModel> {
    let m = TargetModel::load(path).with_context(|| format!("loading classifier {}", path.display()))?;
    if let Some(acc) = m.clean_accuracy {
        info!("{} ({}) clean accuracy {:.4}", m.spec.arch, path.display(), acc);
    }
    Ok(m)
}

/// Loads either generator kind from its checkpoint.
pub fn load_generator(path: &Path) -> anyhow::Result<Box<dyn AdversarialGenerator>> {
    match NodeGenerator::load(path) {
        Ok(g) => Ok(Box::new(g)),
        Err(node_err) => match AdvGanGenerator::load(path) {
            Ok(g) => Ok(Box::new(g)),
            Err(_) => Err(anyhow!(node_err).context(format!("loading generator {}", path.display()))),
        },
    }
}

fn check_channels(model: &TargetModel, data: &ImageBatch) -> anyhow::Result<()> {
    if model.spec.in_channels != data.channels() {
        bail!("{} expects {} channels, data has {}", model.spec.arch, model.spec.in_channels, data.channels());
    }
    Ok(())
}

/// Report name of a trained generator.
pub fn generator_label(kind: GeneratorKind, eps_train: f32, eps_test: f32) -> String {
    match kind {
        GeneratorKind::Advgan => "advgan".into(),
        GeneratorKind::Node if eps_train == eps_test => "node-advgan".into(),
        GeneratorKind::Node => "node-advgan-t".into(),
    }
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}

/// Writes `{stem}.csv` and a readable `{stem}.txt`, and prints the table.
pub fn emit_report(report: &EvalReport, dir: &Path, stem: &str) -> anyhow::Result<()> {
    report.write_csv(&dir.join(format!("{stem}.csv")))?;
    let table = report.to_table();
    std::fs::write(dir.join(format!("{stem}.txt")), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifierLogRow {
    pub arch: String,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub arch: String,
    pub clean_accuracy: f64,
    pub epochs: usize,
    pub train_n: usize,
    pub test_n: usize,
    pub seconds: f64,
}

fn train_classifiers(
    cfg: &ExperimentConfig,
    arch: &str,
    train_n: SubsetSize,
    test_n: SubsetSize,
) -> anyhow::Result<()> {
    let archs = if arch == "all" {
        Arch::ALL.to_vec()
    } else {
        vec![Arch::parse(arch).ok_or_else(|| anyhow!("unknown architecture {arch:?}"))?]
    };
    let split = load_data(cfg, train_n, test_n)?;
    let mut log_rows = Vec::new();
    let mut acc_rows = Vec::new();
    for arch in archs {
        let spec = ClassifierSpec { arch, in_channels: split.train.channels(), num_classes: NUM_CLASSES };
        let start = Instant::now();
        let model = train_classifier(spec, &split.train, &split.test, &cfg.classifier, |epoch, loss| {
            log_rows.push(ClassifierLogRow { arch: arch.name().into(), epoch, loss });
        })?;
        let path = cfg.output_dir.join(format!("{}.ckpt", arch.name()));
        model.save(&path)?;
        let acc = model.clean_accuracy.unwrap_or(f64::NAN);
        info!("{arch}: clean accuracy {acc:.4}, saved {}", path.display());
        acc_rows.push(AccuracyRow {
            arch: arch.name().into(),
            clean_accuracy: acc,
            epochs: cfg.classifier.epochs,
            train_n: split.train.len(),
            test_n: split.test.len(),
            seconds: start.elapsed().as_secs_f64(),
        });
        write_rows(&cfg.output_dir.join("classifier_log.csv"), &log_rows)?;
        write_rows(&cfg.output_dir.join("accuracy.csv"), &acc_rows)?;
    }
    for r in &acc_rows {
        println!("{:<12} clean accuracy {:.4}", r.arch, r.clean_accuracy);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub generator: String,
    pub source: String,
    pub epochs: usize,
    pub train_n: usize,
    pub eps_train: f32,
    pub eps_test: f32,
    pub seed: u64,
    pub seconds: f64,
}

pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const DISCRIMINATOR_FILE: &str = "discriminator.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.csv";

fn fit<G: odeadv::Generator + 'static>(
    mut gen: G,
    cfg: &ExperimentConfig,
    target: &TargetModel,
    train: &ImageBatch,
    dir: &Path,
) -> anyhow::Result<(Box<dyn AdversarialGenerator>, TrainOutcome)> {
    let mut disc = Discriminator::new(train.channels(), cfg.seed.wrapping_add(1))?;
    let log_path = dir.join(TRAIN_LOG_FILE);
    if log_path.exists() {
        std::fs::remove_file(&log_path)?;
    }
    let mut log_err = None;
    let outcome = training::train_adversarial_generator(
        &mut gen,
        &mut disc,
        target,
        train,
        &cfg.train_config(),
        &cfg.weights,
        |row| {
            if let Err(e) = training::append_log(&log_path, std::slice::from_ref(row)) {
                log_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    gen.save(&dir.join(GENERATOR_FILE))?;
    disc.save(&dir.join(DISCRIMINATOR_FILE))?;
    Ok((Box::new(gen), outcome))
}

/// Trains a generator into `dir` (checkpoints, log and summary). With
/// `reuse`, a finished run already in `dir` is loaded instead.
pub fn train_generator(
    cfg: &ExperimentConfig,
    kind: GeneratorKind,
    target: &TargetModel,
    train: &ImageBatch,
    dir: &Path,
    reuse: bool,
) -> anyhow::Result<(Box<dyn AdversarialGenerator>, TrainSummary)> {
    std::fs::create_dir_all(dir)?;
    let summary_path = dir.join(TRAIN_SUMMARY_FILE);
    let label = generator_label(kind, cfg.budget.eps_train, cfg.budget.eps_test);
    if reuse && summary_path.is_file() && dir.join(GENERATOR_FILE).is_file() {
        let rows: Vec<TrainSummary> = read_rows(&summary_path)?;
        if let Some(s) = rows.into_iter().next() {
            if s.epochs == cfg.gan.epochs && s.eps_train == cfg.budget.eps_train && s.seed == cfg.seed {
                info!("reusing {} from {}", s.generator, dir.display());
                return Ok((load_generator(&dir.join(GENERATOR_FILE))?, s));
            }
        }
    }
    check_channels(target, train)?;
    let c = train.channels();
    let (gen, outcome) = match kind {
        GeneratorKind::Node => {
            let gen = NodeGenerator::new(VectorFieldConfig::new(c), cfg.node, cfg.seed)?;
            fit(gen, cfg, target, train, dir)?
        }
        GeneratorKind::Advgan => {
            let gen =
                AdvGanGenerator::new(AdvGanConfig { in_channels: c, res_blocks: cfg.gan.advgan_res_blocks }, cfg.seed);
            fit(gen, cfg, target, train, dir)?
        }
    };
    let summary = TrainSummary {
        generator: label,
        source: target.spec.arch.name().into(),
        epochs: cfg.gan.epochs,
        train_n: train.len(),
        eps_train: cfg.budget.eps_train,
        eps_test: cfg.budget.eps_test,
        seed: cfg.seed,
        seconds: outcome.seconds,
    };
    write_rows(&summary_path, std::slice::from_ref(&summary))?;
    info!("{} trained in {:.1}s", summary.generator, summary.seconds);
    Ok((gen, summary))
}

fn train_advgan(cfg: &ExperimentConfig, source: &Path, kind: GeneratorKind) -> anyhow::Result<()> {
    let target = load_classifier(source)?;
    let split = load_data(cfg, cfg.subset_size, cfg.test_size)?;
    let spec = cfg.label_spec().check(target.num_classes())?;
    let (gen, summary) = train_generator(cfg, kind, &target, &split.train, &cfg.output_dir, false)?;
    let name = target.spec.arch.name().to_string();
    let src = Source {
        name: name.clone(),
        methods: vec![AttackMethod::Generator {
            name: summary.generator.clone(),
            gen: gen.as_ref(),
            eps: cfg.budget.eps_test,
        }],
    };
    let report = metrics::transfer_matrix(&[src], &[(name, &target as &dyn Classifier)], &split.test, spec)?;
    emit_report(&report, &cfg.output_dir, "eval")
}

fn gradient_method<'a>(
    name: &str,
    cfg: &ExperimentConfig,
    model: &'a dyn Classifier,
) -> anyhow::Result<AttackMethod<'a>> {
    let attack =
        GradAttack::parse(name).ok_or_else(|| anyhow!("unknown attack {name:?} (fgsm, ifgsm, mifgsm, nifgsm)"))?;
    Ok(AttackMethod::Gradient { attack, cfg: cfg.grad_config(), model })
}

/// The first test sample of each class, in class order.
pub fn one_per_class(test: &ImageBatch, k: usize) -> anyhow::Result<ImageBatch> {
    let labels = test.require_labels("image grid")?;
    let idx = (0..k)
        .map(|c| labels.iter().position(|&y| y == c).ok_or_else(|| anyhow!("no test sample of class {c}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(test.select(&idx))
}

fn attack(
    cfg: &ExperimentConfig,
    model: &Path,
    method: &str,
    generator: Option<&Path>,
    want_grid: bool,
) -> anyhow::Result<()> {
    let target = load_classifier(model)?;
    let split = load_data(cfg, SubsetSize::Count(0), cfg.test_size)?;
    check_channels(&target, &split.test)?;
    let spec = cfg.label_spec().check(target.num_classes())?;
    let loaded;
    let m = if method == "generator" {
        let path = generator.ok_or_else(|| anyhow!("--method generator needs --generator"))?;
        loaded = load_generator(path)?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("generator").to_string();
        AttackMethod::Generator { name, gen: loaded.as_ref(), eps: cfg.budget.eps_test }
    } else {
        gradient_method(method, cfg, &target)?
    };
    let name = target.spec.arch.name().to_string();
    let src = Source { name: name.clone(), methods: vec![m] };
    let report = metrics::transfer_matrix(&[src], &[(name, &target as &dyn Classifier)], &split.test, spec)?;
    emit_report(&report, &cfg.output_dir, "eval")?;
    if want_grid {
        let k = target.num_classes();
        let clean = one_per_class(&split.test, k)?;
        let method = &grid_method(cfg, method, generator, &target)?;
        let mut cells = Vec::with_capacity(k * k);
        let mut columns = Vec::with_capacity(k);
        for t in 0..k {
            columns.push(method.run(&clean, LabelSpec::Targeted(t))?);
        }
        for row in 0..k {
            for (t, col) in columns.iter().enumerate() {
                let src = if row == t { &clean } else { col };
                cells.push(src.slice(row, row + 1));
            }
        }
        let path = cfg.output_dir.join("grid.png");
        grid::write_grid(&path, &ImageBatch::concat(&cells)?, k, k)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

/// The attack again, for the grid (the report consumed the first value).
fn grid_method<'a>(
    cfg: &ExperimentConfig,
    method: &str,
    generator: Option<&Path>,
    target: &'a TargetModel,
) -> anyhow::Result<GridMethod<'a>> {
    if method == "generator" {
        let path = generator.ok_or_else(|| anyhow!("--method generator needs --generator"))?;
        Ok(GridMethod::Generator(load_generator(path)?, cfg.budget.eps_test))
    } else {
        Ok(GridMethod::Gradient(gradient_method(method, cfg, target)?))
    }
}

enum GridMethod<'a> {
    Gradient(AttackMethod<'a>),
    Generator(Box<dyn AdversarialGenerator>, f32),
}

impl GridMethod<'_> {
    /// Generators ignore the target class: they were trained for one mode.
    fn run(&self, x: &ImageBatch, spec: LabelSpec) -> anyhow::Result<ImageBatch> {
        Ok(match self {
            GridMethod::Gradient(m) => m.run(x, spec)?,
            GridMethod::Generator(g, eps) => g.generate(x, *eps)?,
        })
    }
}

fn load_generators(named: &[Named]) -> anyhow::Result<Vec<(String, Box<dyn AdversarialGenerator>)>> {
    named.iter().map(|n| Ok((n.name.clone(), load_generator(&n.path)?))).collect()
}

fn evaluate(cfg: &ExperimentConfig, model: &Path, generators: &[Named], methods: &[String]) -> anyhow::Result<()> {
    let target = load_classifier(model)?;
    let split = load_data(cfg, SubsetSize::Count(0), cfg.test_size)?;
    check_channels(&target, &split.test)?;
    let spec = cfg.label_spec().check(target.num_classes())?;
    let clean_acc = target.accuracy(&split.test)?;
    info!("{} clean accuracy on {} test images: {:.4}", target.spec.arch, split.test.len(), clean_acc);
    let gens = load_generators(generators)?;
    let mut ms = methods.iter().map(|m| gradient_method(m, cfg, &target)).collect::<anyhow::Result<Vec<_>>>()?;
    for (name, g) in &gens {
        ms.push(AttackMethod::Generator { name: name.clone(), gen: g.as_ref(), eps: cfg.budget.eps_test });
    }
    let name = target.spec.arch.name().to_string();
    let report = metrics::transfer_matrix(
        &[Source { name: name.clone(), methods: ms }],
        &[(name, &target as &dyn Classifier)],
        &split.test,
        spec,
    )?;
    emit_report(&report, &cfg.output_dir, "eval")
}

fn transfer(
    cfg: &ExperimentConfig,
    sources: &[(String, &Path)],
    targets: &[Named],
    generators: &[(String, String, &Path)],
    methods: &[String],
) -> anyhow::Result<()> {
    let split = load_data(cfg, SubsetSize::Count(0), cfg.test_size)?;
    let src_models =
        sources.iter().map(|(n, p)| Ok((n.clone(), load_classifier(p)?))).collect::<anyhow::Result<Vec<_>>>()?;
    let tgt_models =
        targets.iter().map(|n| Ok((n.name.clone(), load_classifier(&n.path)?))).collect::<anyhow::Result<Vec<_>>>()?;
    for (_, m) in src_models.iter().chain(&tgt_models) {
        check_channels(m, &split.test)?;
    }
    for (s, n, _) in generators {
        if !src_models.iter().any(|(name, _)| name == s) {
            bail!("generator {n} names unknown source {s}");
        }
    }
    let gens = generators
        .iter()
        .map(|(s, n, p)| Ok((s.clone(), n.clone(), load_generator(p)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let spec = cfg.label_spec().check(NUM_CLASSES)?;
    let mut srcs = Vec::new();
    for (name, model) in &src_models {
        let mut ms = methods.iter().map(|m| gradient_method(m, cfg, model)).collect::<anyhow::Result<Vec<_>>>()?;
        for (s, n, g) in &gens {
            if s == name {
                ms.push(AttackMethod::Generator { name: n.clone(), gen: g.as_ref(), eps: cfg.budget.eps_test });
            }
        }
        srcs.push(Source { name: name.clone(), methods: ms });
    }
    let tgts: Vec<(String, &dyn Classifier)> =
        tgt_models.iter().map(|(n, m)| (n.clone(), m as &dyn Classifier)).collect();
    let report = metrics::transfer_matrix(&srcs, &tgts, &split.test, spec)?;
    emit_report(&report, &cfg.output_dir, "transfer")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepsRow {
    pub steps: usize,
    pub asr: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub train_seconds: f64,
}

fn sweep_node_steps(cfg: &ExperimentConfig, source: &Path, steps: &[usize]) -> anyhow::Result<()> {
    let target = load_classifier(source)?;
    let split = load_data(cfg, cfg.subset_size, cfg.test_size)?;
    let spec = cfg.label_spec().check(target.num_classes())?;
    let mut rows = Vec::new();
    for &n in steps {
        let mut c = cfg.clone();
        c.node.steps = n;
        c.validate()?;
        let (gen, summary) = train_generator(
            &c,
            GeneratorKind::Node,
            &target,
            &split.train,
            &cfg.output_dir.join(format!("steps_{n}")),
            true,
        )?;
        let adv = gen.generate(&split.test, c.budget.eps_test)?;
        let s = metrics::score(&target, &split.test, &adv, spec)?;
        info!("N={n}: asr {:.4} psnr {:.3}", s.asr, s.psnr);
        rows.push(StepsRow { steps: n, asr: s.asr, psnr: s.psnr, ssim: s.ssim, train_seconds: summary.seconds });
        write_rows(&cfg.output_dir.join("sweep_node_steps.csv"), &rows)?;
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.steps as f64).collect();
    plot::dual_axis(
        &cfg.output_dir.join("sweep_node_steps.svg"),
        "ASR and PSNR against Euler steps N",
        "N",
        &xs,
        ("ASR (%)", &rows.iter().map(|r| 100.0 * r.asr).collect::<Vec<_>>()),
        ("PSNR (dB)", &rows.iter().map(|r| r.psnr).collect::<Vec<_>>()),
    )?;
    for r in &rows {
        println!("N={:<2} asr {:>6.2}% psnr {:.3} ssim {:.4}", r.steps, 100.0 * r.asr, r.psnr, r.ssim);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsTrainRow {
    pub eps_train: f32,
    pub eps_train_255: f64,
    pub seed: u64,
    pub target: String,
    pub whitebox: bool,
    pub asr: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsTrainSummary {
    pub eps_train: f32,
    pub eps_train_255: f64,
    pub target: String,
    pub runs: usize,
    pub median_asr: f64,
    pub median_psnr: f64,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if s.is_empty() {
        return f64::NAN;
    }
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Medians over seeds per (budget, target), in first-seen order.
pub fn summarize_eps(rows: &[EpsTrainRow]) -> Vec<EpsTrainSummary> {
    let mut keys: Vec<(f32, String)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(e, t)| *e == r.eps_train && *t == r.target) {
            keys.push((r.eps_train, r.target.clone()));
        }
    }
    keys.into_iter()
        .map(|(e, t)| {
            let sel: Vec<&EpsTrainRow> = rows.iter().filter(|r| r.eps_train == e && r.target == t).collect();
            EpsTrainSummary {
                eps_train: e,
                eps_train_255: sel[0].eps_train_255,
                target: t,
                runs: sel.len(),
                median_asr: median(&sel.iter().map(|r| r.asr).collect::<Vec<_>>()),
                median_psnr: median(&sel.iter().map(|r| r.psnr).collect::<Vec<_>>()),
            }
        })
        .collect()
}

fn sweep_eps_train(
    cfg: &ExperimentConfig,
    source: &Path,
    targets: &[Named],
    eps_values: &[f32],
    seeds: &[u64],
) -> anyhow::Result<()> {
    let src = load_classifier(source)?;
    let tgts =
        targets.iter().map(|n| Ok((n.name.clone(), load_classifier(&n.path)?))).collect::<anyhow::Result<Vec<_>>>()?;
    let split = load_data(cfg, cfg.subset_size, cfg.test_size)?;
    let spec = cfg.label_spec().check(src.num_classes())?;
    let src_name = src.spec.arch.name().to_string();
    let mut evals: Vec<(String, &TargetModel)> = vec![(src_name.clone(), &src)];
    evals.extend(tgts.iter().map(|(n, m)| (n.clone(), m)));
    let mut rows = Vec::new();
    for &eps_train in eps_values {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.budget.eps_train = eps_train;
            c.seed = seed;
            c.validate()?;
            let k = f64::from(eps_train) * 255.0;
            let dir = cfg.output_dir.join(format!("eps{:.0}_seed{seed}", k));
            let (gen, _) = train_generator(&c, GeneratorKind::Node, &src, &split.train, &dir, true)?;
            let adv = gen.generate(&split.test, c.budget.eps_test)?;
            for (name, model) in &evals {
                let s = metrics::score(*model, &split.test, &adv, spec)?;
                info!("eps_train {k:.1}/255 seed {seed} -> {name}: asr {:.4} psnr {:.3}", s.asr, s.psnr);
                rows.push(EpsTrainRow {
                    eps_train,
                    eps_train_255: (k * 1e4).round() / 1e4,
                    seed,
                    target: name.clone(),
                    whitebox: *name == src_name,
                    asr: s.asr,
                    psnr: s.psnr,
                    ssim: s.ssim,
                });
            }
            write_rows(&cfg.output_dir.join("sweep_eps_train.csv"), &rows)?;
        }
    }
    let summary = summarize_eps(&rows);
    write_rows(&cfg.output_dir.join("sweep_eps_train_summary.csv"), &summary)?;
    let mut asr_series = Vec::new();
    let mut psnr_series = Vec::new();
    for (name, _) in &evals {
        let sel: Vec<&EpsTrainSummary> = summary.iter().filter(|s| &s.target == name).collect();
        let label = if *name == src_name { format!("{name} (white-box)") } else { name.clone() };
        asr_series.push((label.clone(), sel.iter().map(|s| (s.eps_train_255, 100.0 * s.median_asr)).collect()));
        psnr_series.push((label, sel.iter().map(|s| (s.eps_train_255, s.median_psnr)).collect()));
    }
    plot::line_panels(
        &cfg.output_dir.join("sweep_eps_train.svg"),
        "eps_train (x/255)",
        &[("median ASR (%)", asr_series), ("median PSNR (dB)", psnr_series)],
    )?;
    for s in &summary {
        println!(
            "eps_train {:>5.1}/255 {:<24} median asr {:>6.2}% median psnr {:.3} ({} runs)",
            s.eps_train_255,
            s.target,
            100.0 * s.median_asr,
            s.median_psnr,
            s.runs
        );
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightsRow {
    pub w_gan: f64,
    pub w_hinge: f64,
    pub asr: f64,
    pub ssim: f64,
    pub average: f64,
}

fn sweep_loss_weights(cfg: &ExperimentConfig, source: &Path, values: &[f64]) -> anyhow::Result<()> {
    let target = load_classifier(source)?;
    let split = load_data(cfg, cfg.subset_size, cfg.test_size)?;
    let spec = cfg.label_spec().check(target.num_classes())?;
    let mut rows = Vec::new();
    for (i, &a) in values.iter().enumerate() {
        for (j, &b) in values.iter().enumerate() {
            let mut c = cfg.clone();
            c.weights.w_gan = a;
            c.weights.w_hinge = b;
            c.validate()?;
            let dir = cfg.output_dir.join(format!("gan{i}_hinge{j}"));
            let (gen, _) = train_generator(&c, GeneratorKind::Node, &target, &split.train, &dir, true)?;
            let adv = gen.generate(&split.test, c.budget.eps_test)?;
            let s = metrics::score(&target, &split.test, &adv, spec)?;
            rows.push(WeightsRow { w_gan: a, w_hinge: b, asr: s.asr, ssim: s.ssim, average: 0.5 * (s.asr + s.ssim) });
            write_rows(&cfg.output_dir.join("sweep_loss_weights.csv"), &rows)?;
        }
    }
    let labels: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
    let n = values.len();
    let grid_of = |f: &dyn Fn(&WeightsRow) -> f64| -> Vec<Vec<f64>> {
        rows.chunks(n).map(|r| r.iter().map(f).collect()).collect()
    };
    for (stem, title, g) in [
        ("heatmap_asr", "ASR", grid_of(&|r| r.asr)),
        ("heatmap_ssim", "SSIM", grid_of(&|r| r.ssim)),
        ("heatmap_average", "(ASR + SSIM) / 2", grid_of(&|r| r.average)),
    ] {
        plot::heatmap(&cfg.output_dir.join(format!("{stem}.svg")), title, "hinge weight", "GAN weight", &labels, &g)?;
    }
    for r in &rows {
        println!("gan {:<8} hinge {:<8} asr {:>6.2}% ssim {:.4}", r.w_gan, r.w_hinge, 100.0 * r.asr, r.ssim);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub model: String,
    pub n: usize,
    pub repeat: usize,
    pub seconds: f64,
    pub ms_per_image: f64,
}

fn timing(cfg: &ExperimentConfig, model: &Path, generators: &[Named], repeats: usize) -> anyhow::Result<()> {
    if repeats == 0 {
        bail!("--repeats must be positive");
    }
    let target = load_classifier(model)?;
    let split = load_data(cfg, SubsetSize::Count(0), cfg.test_size)?;
    check_channels(&target, &split.test)?;
    let spec = cfg.label_spec().check(target.num_classes())?;
    let gens = load_generators(generators)?;
    let mut methods =
        vec![AttackMethod::Gradient { attack: GradAttack::Ifgsm, cfg: cfg.grad_config(), model: &target }];
    for (name, g) in &gens {
        methods.push(AttackMethod::Generator { name: name.clone(), gen: g.as_ref(), eps: cfg.budget.eps_test });
    }
    let n = split.test.len();
    let mut rows = Vec::new();
    for m in &methods {
        for r in 0..repeats {
            let (secs, _) = metrics::time_generation(m, &split.test, spec)?;
            info!("{} repeat {}: {:.3}s", m.name(), r + 1, secs);
            rows.push(TimingRow {
                method: m.name(),
                model: target.spec.arch.name().into(),
                n,
                repeat: r + 1,
                seconds: secs,
                ms_per_image: if n > 0 { 1e3 * secs / n as f64 } else { 0.0 },
            });
        }
    }
    write_rows(&cfg.output_dir.join("timing.csv"), &rows)?;
    let best = |name: &str| rows.iter().filter(|r| r.method == name).map(|r| r.seconds).fold(f64::INFINITY, f64::min);
    let base = best(GradAttack::Ifgsm.name());
    for m in &methods {
        let t = best(&m.name());
        println!("{:<16} {:>9.3}s  ({:.1}x vs ifgsm)", m.name(), t, base / t);
    }
    if gens.iter().any(|(name, _)| best(name) >= base) {
        warn!("a generator was not faster than {}-step I-FGSM", cfg.grad.n_iter);
    }
    Ok(())
}
