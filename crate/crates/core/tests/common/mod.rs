#![allow(dead_code)]

use odeadv::{Classifier, ImageBatch, LabelSpec, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform images in `[0,1]` with labels in `0..10`.
pub fn random_batch(seed: u64, n: usize, c: usize, hw: usize) -> ImageBatch {
    let mut r = rng(seed);
    let data = Tensor::from_fn(&[n, c, hw, hw], |_| r.gen::<f32>());
    let labels = (0..n).map(|_| r.gen_range(0..10)).collect();
    ImageBatch::new(data, Some(labels)).unwrap()
}

/// Linear softmax model `logits = W x + b` with its gradient written out by hand.
pub struct LinearSoftmax {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub k: usize,
    pub d: usize,
    /// Multiplies the attack loss; used for scale-invariance checks.
    pub loss_scale: f64,
}

impl LinearSoftmax {
    pub fn random(seed: u64, k: usize, d: usize) -> Self {
        let mut r = rng(seed);
        Self {
            w: (0..k * d).map(|_| r.gen_range(-1.0..1.0)).collect(),
            b: (0..k).map(|_| r.gen_range(-0.5..0.5)).collect(),
            k,
            d,
            loss_scale: 1.0,
        }
    }

    fn logits_row(&self, x: &[f32]) -> Vec<f64> {
        (0..self.k)
            .map(|i| {
                self.b[i] + self.w[i * self.d..(i + 1) * self.d].iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>()
            })
            .collect()
    }
}

impl Classifier for LinearSoftmax {
    fn num_classes(&self) -> usize {
        self.k
    }

    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n * self.k);
        for i in 0..n {
            out.extend(self.logits_row(x.row(i)).into_iter().map(|v| v as f32));
        }
        Ok(Tensor::new(&[n, self.k], out)?)
    }

    /// Untargeted: `∇ Σ CE(y)`. Targeted: `−∇ Σ CE(t)`.
    fn loss_grad(&self, x: &ImageBatch, spec: LabelSpec) -> Result<Tensor<f32>> {
        let n = x.len();
        let mut g = vec![0f32; n * self.d];
        for i in 0..n {
            let z = self.logits_row(x.data().row(i));
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let (cls, sgn) = match spec {
                LabelSpec::Untargeted => (x.require_labels("grad")?[i], 1.0),
                LabelSpec::Targeted(t) => (t, -1.0),
            };
            for j in 0..self.d {
                let mut acc = 0.0;
                for c in 0..self.k {
                    let p = e[c] / s - if c == cls { 1.0 } else { 0.0 };
                    acc += p * self.w[c * self.d + j];
                }
                g[i * self.d + j] = (sgn * self.loss_scale * acc) as f32;
            }
        }
        Ok(Tensor::new(x.data().shape(), g)?)
    }
}

/// A model whose attack-loss gradient is the same field everywhere.
pub struct ConstGrad(pub f32);

impl Classifier for ConstGrad {
    fn num_classes(&self) -> usize {
        10
    }

    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(Tensor::zeros(&[x.shape()[0], 10]))
    }

    fn loss_grad(&self, x: &ImageBatch, _: LabelSpec) -> Result<Tensor<f32>> {
        Ok(Tensor::full(x.data().shape(), self.0))
    }
}

/// `J(x) = ½ Σ a_i (x_i − c_i)²`, so `∇J = a ⊙ (x − c)`.
pub struct Quadratic {
    pub a: Vec<f32>,
    pub c: Vec<f32>,
}

impl Classifier for Quadratic {
    fn num_classes(&self) -> usize {
        10
    }

    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(Tensor::zeros(&[x.shape()[0], 10]))
    }

    fn loss_grad(&self, x: &ImageBatch, _: LabelSpec) -> Result<Tensor<f32>> {
        let d = self.a.len();
        Ok(x.data().clone().map_index(|i, v| self.a[i % d] * (v - self.c[i % d])))
    }
}

trait MapIndex {
    fn map_index(self, f: impl Fn(usize, f32) -> f32) -> Self;
}

impl MapIndex for Tensor<f32> {
    fn map_index(mut self, f: impl Fn(usize, f32) -> f32) -> Self {
        for (i, v) in self.data_mut().iter_mut().enumerate() {
            *v = f(i, *v);
        }
        self
    }
}

pub fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
