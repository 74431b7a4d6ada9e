//! Generator and discriminator objectives.
//!
//! Each loss has a plain value function and a graph node with an exact
//! backward rule. Batch reduction is the arithmetic mean throughout.

use odeadv_autograd::{CustomOp, Graph, NodeId, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// CW confidence floor `κ`.
    pub kappa: f64,
    /// Hinge threshold `c` on the per-sample L2 norm.
    pub c_hinge: f64,
    /// Weight `α` of the GAN term.
    pub w_gan: f64,
    /// Weight `β` of the hinge term.
    pub w_hinge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { kappa: 0.0, c_hinge: 0.1, w_gan: 0.01, w_hinge: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.c_hinge >= 0.0) {
            return Err(Error::Config(format!(
                "kappa and c_hinge must be nonnegative, got {} / {}",
                self.kappa, self.c_hinge
            )));
        }
        Ok(())
    }
}

/// Which class is pushed down and which competitor is pulled up.
#[derive(Clone, Debug)]
enum CwMode {
    /// Gap `f_true - max_{i != true} f_i`.
    Untargeted(Vec<usize>),
    /// Gap `max_{i != t} f_i - f_t`.
    Targeted(usize),
}

/// Index of the largest entry other than `skip` (lowest index on ties).
fn best_other<T: Scalar>(row: &[T], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if i != skip && (best == usize::MAX || v > row[best]) {
            best = i;
        }
    }
    best
}

/// Per-sample `(gap, plus index, minus index)`; the gap is `f[plus] - f[minus]`.
fn cw_terms<T: Scalar>(logits: &Tensor<T>, mode: &CwMode) -> Result<Vec<(T, usize, usize)>> {
    let (b, k) = logits.dims2()?;
    if k < 2 {
        return Err(Error::Config(format!("CW loss needs at least two classes, got {k}")));
    }
    (0..b)
        .map(|n| {
            let row = logits.row(n);
            let (plus, minus) = match mode {
                CwMode::Untargeted(y) => {
                    let t = *y.get(n).ok_or_else(|| Error::Label(format!("{} labels for batch of {b}", y.len())))?;
                    if t >= k {
                        return Err(Error::Label(format!("label {t} out of range for {k} classes")));
                    }
                    (t, best_other(row, t))
                }
                CwMode::Targeted(t) => {
                    if *t >= k {
                        return Err(Error::Label(format!("target {t} out of range for {k} classes")));
                    }
                    (best_other(row, *t), *t)
                }
            };
            Ok((row[plus] - row[minus], plus, minus))
        })
        .collect()
}

fn cw_value<T: Scalar>(terms: &[(T, usize, usize)], kappa: f64) -> f64 {
    let s: f64 = terms.iter().map(|(gap, _, _)| gap.as_f64().max(kappa)).sum();
    s / terms.len().max(1) as f64
}

/// Mean over the batch of `max(f_true - max_{i != true} f_i, κ)`.
pub fn cw_untargeted<T: Scalar>(logits: &Tensor<T>, y: &[usize], kappa: f64) -> Result<f64> {
    Ok(cw_value(&cw_terms(logits, &CwMode::Untargeted(y.to_vec()))?, kappa))
}

/// Mean over the batch of `max(max_{i != t} f_i - f_t, κ)`.
pub fn cw_targeted<T: Scalar>(logits: &Tensor<T>, target: usize, kappa: f64) -> Result<f64> {
    Ok(cw_value(&cw_terms(logits, &CwMode::Targeted(target))?, kappa))
}

/// Per-sample Euclidean norms of the flattened rows of `delta`.
pub fn sample_l2<T: Scalar>(delta: &Tensor<T>) -> Vec<f64> {
    let n = delta.row_len().max(1);
    delta.data().chunks(n).map(|r| r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()).collect()
}

/// Mean over the batch of `max(0, ‖δ‖₂ - c)`.
pub fn hinge_penalty<T: Scalar>(delta: &Tensor<T>, c: f64) -> f64 {
    let norms = sample_l2(delta);
    norms.iter().map(|n| (n - c).max(0.0)).sum::<f64>() / norms.len().max(1) as f64
}

/// `½·mean((D(x_adv) - 1)²)`.
pub fn lsgan_generator<T: Scalar>(d_fake: &Tensor<T>) -> f64 {
    0.5 * d_fake.data().iter().map(|d| (d.as_f64() - 1.0).powi(2)).sum::<f64>() / d_fake.len().max(1) as f64
}

/// `½·mean((D(x) - 1)²) + ½·mean(D(x_adv)²)`.
pub fn lsgan_discriminator<T: Scalar>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> f64 {
    lsgan_generator(d_real)
        + 0.5 * d_fake.data().iter().map(|d| d.as_f64().powi(2)).sum::<f64>() / d_fake.len().max(1) as f64
}

/// `cw + α·gan + β·hinge`.
pub fn generator_total(cw: f64, gan: f64, hinge: f64, w: &LossWeights) -> f64 {
    cw + w.w_gan * gan + w.w_hinge * hinge
}

struct CwOp<T> {
    terms: Vec<(T, usize, usize)>,
    kappa: f64,
}

impl<T: Scalar> CustomOp<T> for CwOp<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let mut out = Tensor::zeros(inputs[0].shape());
        let k = inputs[0].row_len();
        let scale = grad.item() / T::from_f64(self.terms.len() as f64);
        for (n, &(gap, plus, minus)) in self.terms.iter().enumerate() {
            // Strictly above the floor the gap itself is the loss.
            if gap.as_f64() > self.kappa {
                out.data_mut()[n * k + plus] += scale;
                out.data_mut()[n * k + minus] -= scale;
            }
        }
        vec![Some(out)]
    }
}

fn cw_node<T: Scalar>(g: &mut Graph<T>, logits: NodeId, mode: CwMode, kappa: f64) -> Result<NodeId> {
    let terms = cw_terms(g.value(logits), &mode)?;
    let value = Tensor::scalar(T::from_f64(cw_value(&terms, kappa)));
    Ok(g.custom(&[logits], value, Box::new(CwOp { terms, kappa })))
}

pub fn cw_untargeted_node<T: Scalar>(g: &mut Graph<T>, logits: NodeId, y: &[usize], kappa: f64) -> Result<NodeId> {
    cw_node(g, logits, CwMode::Untargeted(y.to_vec()), kappa)
}

pub fn cw_targeted_node<T: Scalar>(g: &mut Graph<T>, logits: NodeId, target: usize, kappa: f64) -> Result<NodeId> {
    cw_node(g, logits, CwMode::Targeted(target), kappa)
}

struct HingeOp {
    norms: Vec<f64>,
    c: f64,
}

impl<T: Scalar> CustomOp<T> for HingeOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let delta = inputs[0];
        let n = delta.row_len().max(1);
        let g = grad.item().as_f64() / self.norms.len() as f64;
        let mut out = Tensor::zeros(delta.shape());
        for ((o, d), &norm) in out.data_mut().chunks_mut(n).zip(delta.data().chunks(n)).zip(&self.norms) {
            if norm > self.c && norm > 0.0 {
                let k = T::from_f64(g / norm);
                o.iter_mut().zip(d).for_each(|(o, &v)| *o = k * v);
            }
        }
        vec![Some(out)]
    }
}

pub fn hinge_node<T: Scalar>(g: &mut Graph<T>, delta: NodeId, c: f64) -> NodeId {
    let norms = sample_l2(g.value(delta));
    let v = norms.iter().map(|n| (n - c).max(0.0)).sum::<f64>() / norms.len().max(1) as f64;
    g.custom(&[delta], Tensor::scalar(T::from_f64(v)), Box::new(HingeOp { norms, c }))
}

/// `½·mean((d - target)²)` with gradient `(d - target)/B`.
struct HalfMse {
    target: f64,
}

impl<T: Scalar> CustomOp<T> for HalfMse {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let d = inputs[0];
        let k = T::from_f64(grad.item().as_f64() / d.len().max(1) as f64);
        let t = T::from_f64(self.target);
        vec![Some(d.map(|v| k * (v - t)))]
    }
}

fn half_mse<T: Scalar>(g: &mut Graph<T>, d: NodeId, target: f64) -> NodeId {
    let v = g.value(d);
    let value = 0.5 * v.data().iter().map(|x| (x.as_f64() - target).powi(2)).sum::<f64>() / v.len().max(1) as f64;
    g.custom(&[d], Tensor::scalar(T::from_f64(value)), Box::new(HalfMse { target }))
}

pub fn lsgan_generator_node<T: Scalar>(g: &mut Graph<T>, d_fake: NodeId) -> NodeId {
    half_mse(g, d_fake, 1.0)
}

pub fn lsgan_discriminator_node<T: Scalar>(g: &mut Graph<T>, d_real: NodeId, d_fake: NodeId) -> Result<NodeId> {
    let r = half_mse(g, d_real, 1.0);
    let f = half_mse(g, d_fake, 0.0);
    Ok(g.add(r, f)?)
}

pub fn generator_total_node<T: Scalar>(
    g: &mut Graph<T>,
    cw: NodeId,
    gan: NodeId,
    hinge: NodeId,
    w: &LossWeights,
) -> Result<NodeId> {
    let a = g.scale(gan, T::from_f64(w.w_gan));
    let b = g.scale(hinge, T::from_f64(w.w_hinge));
    let s = g.add(cw, a)?;
    Ok(g.add(s, b)?)
}
