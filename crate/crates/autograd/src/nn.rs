//! Parameter storage and the handful of layers the models are built from.

use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvGeometry;
use crate::error::Result;
use crate::graph::{BatchStats, Graph, NodeId, NormStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as running normalization statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameters and buffers owned by one model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct ParamSet<T = f32> {
    entries: Vec<Param<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

/// Graph handles for every entry of a [`ParamSet`] bound into one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Index<ParamId> for Bound {
    type Output = NodeId;
    fn index(&self, id: ParamId) -> &NodeId {
        &self.ids[id.0]
    }
}

impl Bound {
    pub fn node_ids(&self) -> &[NodeId] {
        &self.ids
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.entries.push(Param { name: name.into(), kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[Param<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries.iter().enumerate().filter(|(_, p)| p.kind == ParamKind::Trainable).map(|(i, _)| ParamId(i))
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|p| p.kind == ParamKind::Trainable).map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.all_finite())
    }

    /// Places every entry on the graph. Trainable entries become variables
    /// when `with_grad` is set; everything else is a constant.
    pub fn bind(&self, g: &mut Graph<T>, with_grad: bool) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|p| {
                if with_grad && p.kind == ParamKind::Trainable {
                    g.variable(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { ids }
    }

    /// Folds observed batch statistics into running estimates:
    /// `running = (1 - momentum)·running + momentum·observed`.
    pub fn absorb_batch_stats(&mut self, stats: &[BatchStats<T>], momentum: T) {
        for s in stats {
            let keep = T::one() - momentum;
            for (r, &m) in self.entries[s.tag].value.data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + momentum * m;
            }
            for (r, &v) in self.entries[s.tag + 1].value.data_mut().iter_mut().zip(&s.var) {
                *r = keep * *r + momentum * v;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param { name: p.name.clone(), kind: p.kind, value: p.value.cast() })
                .collect(),
        }
    }
}

fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..=bound)))
}

/// 2-D convolution layer; weights use a uniform `±1/sqrt(fan_in)` init.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        geom: ConvGeometry,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_c * kernel * kernel) as f64).sqrt();
        let weight =
            ps.add(format!("{name}.weight"), ParamKind::Trainable, uniform(rng, &[out_c, in_c, kernel, kernel], bound));
        let bias = bias.then(|| ps.add(format!("{name}.bias"), ParamKind::Trainable, uniform(rng, &[out_c], bound)));
        Self { weight, bias, geom }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.geom)
    }
}

/// Fully connected layer on `(B, in)` inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamSet<T>, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = ps.add(format!("{name}.weight"), ParamKind::Trainable, uniform(rng, &[out, inp], bound));
        let bias = ps.add(format!("{name}.bias"), ParamKind::Trainable, uniform(rng, &[out], bound));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.linear(x, p[self.weight], Some(p[self.bias]))
    }
}

/// Batch normalization over NCHW channels with running statistics stored as
/// buffers (`running_mean` immediately followed by `running_var`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), ParamKind::Trainable, Tensor::full(&[channels], T::one()));
        let beta = ps.add(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels]));
        let running_mean = ps.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels]));
        let running_var = ps.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&[channels], T::one()));
        Self { gamma, beta, running_mean, running_var }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        p: &Bound,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let eps = T::from_f64(Self::EPS);
        match mode {
            Mode::Train => {
                g.batch_norm(x, p[self.gamma], p[self.beta], NormStats::Batch { tag: self.running_mean.0 }, eps)
            }
            Mode::Eval => g.batch_norm(
                x,
                p[self.gamma],
                p[self.beta],
                NormStats::Fixed { mean: ps.get(self.running_mean).data(), var: ps.get(self.running_var).data() },
                eps,
            ),
        }
    }
}
