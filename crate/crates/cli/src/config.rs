//! Experiment configuration: TOML file, flag overrides, snapshot.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use odeadv::data::{Dataset, Resize};
use odeadv::models::ClassifierTrainConfig;
use odeadv::{per255, AttackBudget, GradAttackConfig, LabelSpec, LossWeights, NodeConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable that overrides `data_dir`.
pub const DATA_DIR_ENV: &str = "ODEADV_DATA_DIR";
pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum FullTag {
    Full,
}

/// A sample count or the whole split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubsetSize {
    Count(usize),
    #[serde(with = "full_tag")]
    Full,
}

mod full_tag {
    use super::FullTag;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        FullTag::Full.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        FullTag::deserialize(d).map(|_| ())
    }
}

impl SubsetSize {
    pub fn limit(self, n: usize) -> usize {
        match self {
            SubsetSize::Count(k) => k.min(n),
            SubsetSize::Full => n,
        }
    }

    pub fn parse(s: &str) -> anyhow::Result<Self> {
        if s == "full" {
            return Ok(SubsetSize::Full);
        }
        Ok(SubsetSize::Count(s.parse().with_context(|| format!("subset size must be a count or \"full\", got {s:?}"))?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Node,
    Advgan,
}

/// GAN training settings (budgets, seed and label mode live elsewhere).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanSection {
    pub generator: GeneratorKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub beta1: f64,
    pub augment: bool,
    pub advgan_res_blocks: usize,
}

impl Default for GanSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            generator: GeneratorKind::Node,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_halve_every: t.lr_halve_every,
            beta1: t.beta1,
            augment: t.augment,
            advgan_res_blocks: 4,
        }
    }
}

/// Gradient-attack settings; the budget is `budget.eps_test`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradSection {
    pub step_size: f32,
    pub n_iter: usize,
    pub decay: f32,
}

impl Default for GradSection {
    fn default() -> Self {
        let g = GradAttackConfig::default();
        Self { step_size: g.step_size, n_iter: g.n_iter, decay: g.decay }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    pub data_dir: PathBuf,
    pub resize: Resize,
    /// Training images used for GAN training and sweeps.
    pub subset_size: SubsetSize,
    /// Test images used for evaluation.
    pub test_size: SubsetSize,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Untargeted when absent.
    pub target_class: Option<usize>,
    pub budget: AttackBudget,
    pub weights: LossWeights,
    pub node: NodeConfig,
    pub gan: GanSection,
    pub grad: GradSection,
    pub classifier: ClassifierTrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: Dataset::Fmnist,
            data_dir: PathBuf::from("data/fmnist"),
            resize: Resize::Bilinear,
            subset_size: SubsetSize::Count(10_000),
            test_size: SubsetSize::Count(2_000),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            target_class: None,
            budget: AttackBudget::default(),
            weights: LossWeights::default(),
            node: NodeConfig::default(),
            gan: GanSection::default(),
            grad: GradSection::default(),
            classifier: ClassifierTrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn label_spec(&self) -> LabelSpec {
        self.target_class.map_or(LabelSpec::Untargeted, LabelSpec::Targeted)
    }

    pub fn grad_config(&self) -> GradAttackConfig {
        GradAttackConfig {
            eps: self.budget.eps_test,
            step_size: self.grad.step_size,
            n_iter: self.grad.n_iter,
            decay: self.grad.decay,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.gan.epochs,
            batch_size: self.gan.batch_size,
            lr: self.gan.lr,
            lr_halve_every: self.gan.lr_halve_every,
            beta1: self.gan.beta1,
            eps_train: self.budget.eps_train,
            eps_test: self.budget.eps_test,
            label_spec: self.label_spec(),
            seed: self.seed,
            augment: self.gan.augment,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        AttackBudget::new(self.budget.eps_test, self.budget.eps_train)?;
        self.weights.validate()?;
        self.node.validate()?;
        self.grad_config().validate()?;
        self.train_config().validate()?;
        if self.classifier.epochs == 0 {
            bail!("classifier.epochs must be positive");
        }
        Ok(())
    }

    /// Writes `config.toml` into the output directory.
    pub fn write_snapshot(&self) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("creating output directory {}", self.output_dir.display()))?;
        let path = self.output_dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Parses a budget given either as a real (`0.0392`) or as `k/255`.
pub fn parse_budget(s: &str) -> anyhow::Result<f32> {
    let v = match s.split_once('/') {
        Some((k, d)) => {
            let k: f64 = k.trim().parse().with_context(|| format!("bad budget {s:?}"))?;
            let d: f64 = d.trim().parse().with_context(|| format!("bad budget {s:?}"))?;
            if d == 255.0 {
                per255(k)
            } else {
                (k / d) as f32
            }
        }
        None => s.trim().parse().with_context(|| format!("bad budget {s:?}"))?,
    };
    if !(v > 0.0 && v <= 1.0) {
        bail!("budget {s} must lie in (0, 1]");
    }
    Ok(v)
}
