//! Gradient-sign attacks: FGSM and its iterative, momentum and Nesterov
//! variants.
//!
//! Every iterate is projected back onto the `ε` ball around the clean input
//! and onto `[0, 1]`, so the raw travel of `n_iter · step_size` never leaks
//! past the budget.

use log::warn;
use odeadv_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::types::{apply_perturbation, per255, ImageBatch, LabelSpec, Perturbation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradAttackConfig {
    pub eps: f32,
    pub step_size: f32,
    pub n_iter: usize,
    /// Momentum decay `μ` (momentum and Nesterov variants only).
    pub decay: f32,
}

impl Default for GradAttackConfig {
    fn default() -> Self {
        Self { eps: per255(15.0), step_size: per255(2.0), n_iter: 10, decay: 1.0 }
    }
}

impl GradAttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size <= self.eps) {
            return Err(Error::Config(format!("need 0 < step_size <= eps, got {} / {}", self.step_size, self.eps)));
        }
        if self.n_iter == 0 {
            return Err(Error::Config("n_iter must be at least 1".into()));
        }
        if !(self.decay >= 0.0) {
            return Err(Error::Config(format!("decay must be nonnegative, got {}", self.decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradAttack {
    Fgsm,
    Ifgsm,
    Mifgsm,
    Nifgsm,
}

impl GradAttack {
    pub const ALL: [GradAttack; 4] = [GradAttack::Fgsm, GradAttack::Ifgsm, GradAttack::Mifgsm, GradAttack::Nifgsm];

    pub fn name(self) -> &'static str {
        match self {
            GradAttack::Fgsm => "fgsm",
            GradAttack::Ifgsm => "ifgsm",
            GradAttack::Mifgsm => "mifgsm",
            GradAttack::Nifgsm => "nifgsm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn run(
        self,
        model: &dyn Classifier,
        x: &ImageBatch,
        spec: LabelSpec,
        cfg: &GradAttackConfig,
    ) -> Result<ImageBatch> {
        match self {
            GradAttack::Fgsm => fgsm(model, x, spec, cfg.eps),
            GradAttack::Ifgsm => ifgsm(model, x, spec, cfg),
            GradAttack::Mifgsm => mifgsm(model, x, spec, cfg),
            GradAttack::Nifgsm => nifgsm(model, x, spec, cfg),
        }
    }
}

/// Elementwise sign with `sign(0) = 0`.
pub fn sign(v: &Tensor<f32>) -> Tensor<f32> {
    v.map(|x| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

fn check_inputs(model: &dyn Classifier, x: &ImageBatch, spec: LabelSpec) -> Result<()> {
    spec.check(model.num_classes())?;
    if spec == LabelSpec::Untargeted {
        x.require_labels("an untargeted attack")?;
    }
    Ok(())
}

/// One signed step of size `eps`.
pub fn fgsm(model: &dyn Classifier, x: &ImageBatch, spec: LabelSpec, eps: f32) -> Result<ImageBatch> {
    check_inputs(model, x, spec)?;
    let g = model.loss_grad(x, spec)?;
    let step = sign(&g).map(|s| s * eps);
    apply_perturbation(x, &Perturbation::clipped(&step, eps)?)
}

/// `clip01(x0 + clip(x_n - x0 + step·dir, ±eps))`.
fn projected_step(x0: &Tensor<f32>, xn: &Tensor<f32>, dir: &Tensor<f32>, step: f32, eps: f32) -> Result<Tensor<f32>> {
    let mut out = x0.clone();
    for (((o, &a), &b), &s) in out.data_mut().iter_mut().zip(x0.data()).zip(xn.data()).zip(dir.data()) {
        let d = ((b - a) + step * s).clamp(-eps, eps);
        *o = (a + d).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Divides each sample of `g` by its L1 norm; all-zero samples stay zero.
fn l1_normalize(g: &Tensor<f32>) -> Tensor<f32> {
    let mut out = g.clone();
    let n = g.row_len();
    let mut dead = 0;
    for row in out.data_mut().chunks_mut(n.max(1)) {
        let l1: f64 = row.iter().map(|v| v.abs() as f64).sum();
        if l1 == 0.0 {
            dead += 1;
            continue;
        }
        let inv = (1.0 / l1) as f32;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    if dead > 0 {
        warn!("{dead} sample(s) had an all-zero gradient; their normalized gradient is zero");
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum Variant {
    Plain,
    Momentum,
    Nesterov,
}

fn iterate(
    model: &dyn Classifier,
    x: &ImageBatch,
    spec: LabelSpec,
    cfg: &GradAttackConfig,
    v: Variant,
) -> Result<ImageBatch> {
    cfg.validate()?;
    check_inputs(model, x, spec)?;
    let x0 = x.data();
    let mut xn = x.clone();
    let mut momentum = Tensor::zeros(x0.shape());
    for _ in 0..cfg.n_iter {
        let at = match v {
            Variant::Nesterov => {
                let k = cfg.step_size * cfg.decay;
                let look = xn.data().zip_map(&momentum, |a, m| (a + k * m).clamp(0.0, 1.0))?;
                xn.with_data(look)?
            }
            _ => xn.clone(),
        };
        let g = model.loss_grad(&at, spec)?;
        let dir = match v {
            Variant::Plain => g,
            Variant::Momentum | Variant::Nesterov => {
                let ng = l1_normalize(&g);
                momentum = momentum.zip_map(&ng, |m, d| cfg.decay * m + d)?;
                momentum.clone()
            }
        };
        let next = projected_step(x0, xn.data(), &sign(&dir), cfg.step_size, cfg.eps)?;
        xn = xn.with_data(next)?;
    }
    Ok(xn)
}

pub fn ifgsm(model: &dyn Classifier, x: &ImageBatch, spec: LabelSpec, cfg: &GradAttackConfig) -> Result<ImageBatch> {
    iterate(model, x, spec, cfg, Variant::Plain)
}

pub fn mifgsm(model: &dyn Classifier, x: &ImageBatch, spec: LabelSpec, cfg: &GradAttackConfig) -> Result<ImageBatch> {
    iterate(model, x, spec, cfg, Variant::Momentum)
}

/// Momentum iteration with the gradient taken at the lookahead point
/// `x_n + step_size·μ·g_n` (clipped to the pixel range).
pub fn nifgsm(model: &dyn Classifier, x: &ImageBatch, spec: LabelSpec, cfg: &GradAttackConfig) -> Result<ImageBatch> {
    iterate(model, x, spec, cfg, Variant::Nesterov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_examples() {
        let v = Tensor::new(&[3], vec![2.3f32, -0.1, 0.0]).unwrap();
        assert_eq!(sign(&v).data(), &[1.0, -1.0, 0.0]);
        assert_eq!(sign(&sign(&v)), sign(&v));
        assert!(sign(&Tensor::zeros(&[4])).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(GradAttackConfig::default().validate().is_ok());
        assert!(GradAttackConfig { step_size: 0.5, ..Default::default() }.validate().is_err());
        assert!(GradAttackConfig { n_iter: 0, ..Default::default() }.validate().is_err());
        assert!(GradAttackConfig { decay: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn l1_normalization_per_sample() {
        let g = Tensor::new(&[2, 2], vec![1.0f32, -3.0, 0.0, 0.0]).unwrap();
        assert_eq!(l1_normalize(&g).data(), &[0.25, -0.75, 0.0, 0.0]);
    }
}
