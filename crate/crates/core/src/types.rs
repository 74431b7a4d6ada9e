//! Images, perturbations, budgets and the two clipping projections every
//! attack ends with.

use odeadv_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `k / 255` as an intensity, the unit budgets are quoted in.
pub fn per255(k: f64) -> f32 {
    (k / 255.0) as f32
}

/// A batch of `(B, C, H, W)` images in `[0, 1]` with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Tensor<f32>,
    labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn new(data: Tensor<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        let (b, c, _, _) = data.dims4()?;
        if c != 1 && c != 3 {
            return Err(Error::Dimension(format!("expected 1 or 3 channels, got {c}")));
        }
        if let Some(v) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Dimension(format!("intensity {v} outside [0, 1]")));
        }
        if let Some(l) = &labels {
            if l.len() != b {
                return Err(Error::Label(format!("{} labels for {b} images", l.len())));
            }
        }
        Ok(Self { data, labels })
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Labels, or a label error naming `what` needed them.
    pub fn require_labels(&self, what: &str) -> Result<&[usize]> {
        self.labels().ok_or_else(|| Error::Label(format!("{what} needs ground-truth labels")))
    }

    pub fn into_parts(self) -> (Tensor<f32>, Option<Vec<usize>>) {
        (self.data, self.labels)
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    /// Same labels, new pixels (which must still lie in `[0, 1]`).
    pub fn with_data(&self, data: Tensor<f32>) -> Result<Self> {
        self.data.same_shape(&data)?;
        Self::new(data, self.labels.clone())
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self { data: self.data.slice_rows(start, end), labels: self.labels.as_ref().map(|l| l[start..end].to_vec()) }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            data: self.data.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// The first `n` images (or all of them if there are fewer).
    pub fn take(&self, n: usize) -> Self {
        self.slice(0, n.min(self.len()))
    }

    pub fn concat(parts: &[Self]) -> Result<Self> {
        let data = Tensor::concat_rows(&parts.iter().map(|p| &p.data).collect::<Vec<_>>())?;
        let labels = if parts.iter().all(|p| p.labels.is_some()) {
            Some(parts.iter().flat_map(|p| p.labels.clone().unwrap_or_default()).collect())
        } else {
            None
        };
        Ok(Self { data, labels })
    }

    /// Consecutive sub-batches of at most `size` images.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Self> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |s| self.slice(s, (s + size).min(self.len())))
    }
}

/// A displacement `δ` bounded elementwise by `budget`.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    data: Tensor<f32>,
    budget: f32,
}

impl Perturbation {
    /// Clips `raw` into `[-budget, budget]`.
    pub fn clipped(raw: &Tensor<f32>, budget: f32) -> Result<Self> {
        if !(budget >= 0.0) {
            return Err(Error::Config(format!("budget must be nonnegative, got {budget}")));
        }
        Ok(Self { data: clip_elementwise(raw, -budget, budget)?, budget })
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn budget(&self) -> f32 {
        self.budget
    }
}

/// The test budget `ε` and the (possibly smaller) training budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub eps_test: f32,
    pub eps_train: f32,
}

impl AttackBudget {
    pub fn new(eps_test: f32, eps_train: f32) -> Result<Self> {
        let ok = |e: f32| e > 0.0 && e <= 1.0;
        if !ok(eps_test) || !ok(eps_train) {
            return Err(Error::Config(format!("budgets must lie in (0, 1], got {eps_test} / {eps_train}")));
        }
        Ok(Self { eps_test, eps_train })
    }
}

impl Default for AttackBudget {
    fn default() -> Self {
        Self { eps_test: per255(15.0), eps_train: per255(15.0) }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "target_class", rename_all = "lowercase")]
pub enum LabelSpec {
    /// Succeed when the prediction differs from the true label.
    #[default]
    Untargeted,
    /// Succeed when the prediction equals the given class.
    Targeted(usize),
}

impl LabelSpec {
    pub fn check(self, num_classes: usize) -> Result<Self> {
        match self {
            LabelSpec::Targeted(t) if t >= num_classes => {
                Err(Error::Label(format!("target class {t} out of range for {num_classes} classes")))
            }
            _ => Ok(self),
        }
    }

    pub fn mode_name(self) -> &'static str {
        match self {
            LabelSpec::Untargeted => "untargeted",
            LabelSpec::Targeted(_) => "targeted",
        }
    }

    pub fn target(self) -> Option<usize> {
        match self {
            LabelSpec::Untargeted => None,
            LabelSpec::Targeted(t) => Some(t),
        }
    }
}

/// `min(max(v, lo), hi)` elementwise.
pub fn clip_elementwise<T: Scalar>(v: &Tensor<T>, lo: T, hi: T) -> Result<Tensor<T>> {
    if lo > hi {
        return Err(Error::InvalidRange { lo: lo.as_f64(), hi: hi.as_f64() });
    }
    Ok(v.map(|x| x.max(lo).min(hi)))
}

/// `clip(x + δ, 0, 1)`, keeping the labels of `x`.
pub fn apply_perturbation(x: &ImageBatch, delta: &Perturbation) -> Result<ImageBatch> {
    if x.data.shape() != delta.data.shape() {
        return Err(Error::Dimension(format!(
            "image shape {:?} vs perturbation shape {:?}",
            x.data.shape(),
            delta.data.shape()
        )));
    }
    let sum = x.data.zip_map(&delta.data, |a, b| a + b)?;
    Ok(ImageBatch { data: clip_elementwise(&sum, 0.0, 1.0)?, labels: x.labels.clone() })
}

/// Projects `candidate` onto the `ε` ball around `x` and then onto `[0, 1]`.
pub fn project(x: &Tensor<f32>, candidate: &Tensor<f32>, eps: f32) -> Result<Tensor<f32>> {
    Ok(x.zip_map(candidate, |a, b| (a + (b - a).clamp(-eps, eps)).clamp(0.0, 1.0))?)
}
