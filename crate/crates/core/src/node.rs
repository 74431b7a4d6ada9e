//! Neural-ODE perturbation generator.
//!
//! The state starts at the clean image, `v(0) = x`, and follows a learned
//! vector field for time `T` with explicit Euler steps. The generator output
//! is the displacement `G(x) = v(T) - x`; training and test phases clip it to
//! their respective budgets.

use std::path::Path;

use odeadv_autograd::{BatchNorm2d, Bound, Conv2d, ConvGeometry, Graph, Mode, NodeId, ParamSet, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::generator::Generator;

/// Layout of the dilated convolutional vector field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorFieldConfig {
    /// Image channels `C`; the first layer also sees one time channel.
    pub in_channels: usize,
    /// Widths of the hidden layers; the last layer always emits `C` channels.
    pub layer_channels: Vec<usize>,
    /// One dilation per layer (hidden layers plus the output layer).
    pub dilations: Vec<usize>,
    pub kernel: usize,
}

impl VectorFieldConfig {
    pub fn new(in_channels: usize) -> Self {
        Self { in_channels, layer_channels: vec![32, 64, 64, 64, 32], dilations: vec![1, 3, 3, 3, 3, 1], kernel: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.len() != self.layer_channels.len() + 1 {
            return Err(Error::Config(format!(
                "{} dilations for {} layers",
                self.dilations.len(),
                self.layer_channels.len() + 1
            )));
        }
        if self.kernel.is_multiple_of(2) || self.dilations.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("kernel must be odd and dilations positive".into()));
        }
        Ok(())
    }

    /// `(input, output, dilation)` for every layer.
    pub fn layers(&self) -> Vec<(usize, usize, usize)> {
        let mut widths = vec![self.in_channels + 1];
        widths.extend(&self.layer_channels);
        widths.push(self.in_channels);
        widths.windows(2).zip(&self.dilations).map(|(w, &d)| (w[0], w[1], d)).collect()
    }
}

/// Side length of the input window one output pixel depends on.
pub fn receptive_field(cfg: &VectorFieldConfig) -> usize {
    1 + cfg.dilations.iter().map(|d| (cfg.kernel - 1) * d).sum::<usize>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    /// Integration horizon `T`.
    pub horizon: f64,
    /// Number of Euler steps `N`.
    pub steps: usize,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self { horizon: 0.05, steps: 5 }
    }
}

impl NodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.horizon > 0.0) {
            return Err(Error::Config(format!(
                "need steps >= 1 and horizon > 0, got {} / {}",
                self.steps, self.horizon
            )));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }
}

/// A state an explicit Euler step can advance.
pub trait OdeState: Sized {
    /// `self + h·dv`.
    fn euler_step(&self, h: f64, dv: &Self) -> Result<Self>;
    fn is_finite(&self) -> bool;
}

impl OdeState for f64 {
    fn euler_step(&self, h: f64, dv: &Self) -> Result<Self> {
        Ok(self + h * dv)
    }
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
}

impl<T: Scalar> OdeState for Tensor<T> {
    fn euler_step(&self, h: f64, dv: &Self) -> Result<Self> {
        let h = T::from_f64(h);
        Ok(self.zip_map(dv, |v, d| v + h * d)?)
    }
    fn is_finite(&self) -> bool {
        self.all_finite()
    }
}

/// `v_{k+1} = v_k + h·field(v_k, k·h)` for `k = 0..N`, returning `v_N`.
pub fn euler_integrate<S: OdeState>(mut field: impl FnMut(&S, f64) -> Result<S>, x0: S, cfg: &NodeConfig) -> Result<S> {
    cfg.validate()?;
    let h = cfg.step_size();
    let mut v = x0;
    for k in 0..cfg.steps {
        let dv = field(&v, k as f64 * h)?;
        if !dv.is_finite() {
            return Err(Error::NonFinite(format!("vector field output at Euler step {k}")));
        }
        v = v.euler_step(h, &dv)?;
    }
    Ok(v)
}

/// The learned vector field: Conv+BN+ReLU hidden layers and a bare
/// output convolution, padding equal to dilation so `H×W` is preserved.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VectorField {
    layers: Vec<(Conv2d, Option<BatchNorm2d>)>,
}

impl VectorField {
    pub fn build<T: Scalar>(cfg: &VectorFieldConfig, ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let specs = cfg.layers();
        let last = specs.len() - 1;
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(i, (inp, out, d))| {
                let pad = d * (cfg.kernel - 1) / 2;
                let conv = Conv2d::new(
                    ps,
                    &format!("field.{i}.conv"),
                    inp,
                    out,
                    cfg.kernel,
                    ConvGeometry::new(1, pad, d),
                    true,
                    rng,
                );
                let bn = (i != last).then(|| BatchNorm2d::new(ps, &format!("field.{i}.bn"), out));
                (conv, bn)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn conv_weight(&self, layer: usize) -> odeadv_autograd::ParamId {
        self.layers[layer].0.weight
    }

    /// `dv/dt` at state `v` and time `t`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        p: &Bound,
        v: NodeId,
        t: f64,
        mode: Mode,
    ) -> Result<NodeId> {
        let (b, _, h, w) = g.value(v).dims4()?;
        let time = g.constant(Tensor::full(&[b, 1, h, w], T::from_f64(t)));
        let mut y = g.concat_channels(&[v, time])?;
        for (conv, bn) in &self.layers {
            y = conv.forward(g, p, y)?;
            if let Some(bn) = bn {
                y = bn.forward(g, ps, p, y, mode)?;
                y = g.relu(y);
            }
        }
        Ok(y)
    }
}

/// A vector field together with its integration settings and weights.
pub struct NodeGenerator {
    pub field_cfg: VectorFieldConfig,
    pub node_cfg: NodeConfig,
    pub params: ParamSet<f32>,
    pub field: VectorField,
    /// Training budget the weights were fitted under, if trained.
    pub eps_train: Option<f32>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    field_cfg: VectorFieldConfig,
    node_cfg: NodeConfig,
    params: ParamSet<f32>,
    eps_train: Option<f32>,
}

impl NodeGenerator {
    pub fn new(field_cfg: VectorFieldConfig, node_cfg: NodeConfig, seed: u64) -> Result<Self> {
        node_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let field = VectorField::build(&field_cfg, &mut params, &mut rng)?;
        Ok(Self { field_cfg, node_cfg, params, field, eps_train: None })
    }

    /// Field evaluation outside any training graph (running statistics).
    pub fn vector_field_eval(&self, h: &Tensor<f32>, t: f64) -> Result<Tensor<f32>> {
        self.check_channels(h)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let v = g.constant(h.clone());
        let out = self.field.forward(&mut g, &self.params, &p, v, t, Mode::Eval)?;
        Ok(g.value(out).clone())
    }

    fn check_channels<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.field_cfg.in_channels {
            return Err(Error::Dimension(format!("field expects {} channels, got {c}", self.field_cfg.in_channels)));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let rec = NodeRecord {
            field_cfg: self.field_cfg.clone(),
            node_cfg: self.node_cfg,
            params: self.params.clone(),
            eps_train: self.eps_train,
        };
        checkpoint::save(path, checkpoint::Kind::Generator, &("node", rec))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tag, rec): (String, NodeRecord) = checkpoint::load(path, checkpoint::Kind::Generator)?;
        if tag != "node" {
            return Err(Error::Checkpoint(format!("{} holds a {tag} generator", path.display())));
        }
        let mut gen = Self::new(rec.field_cfg, rec.node_cfg, 0)?;
        checkpoint::check_layout(&gen.params, &rec.params)?;
        gen.params = rec.params;
        gen.eps_train = rec.eps_train;
        Ok(gen)
    }
}

impl Generator for NodeGenerator {
    fn name(&self) -> &'static str {
        "node"
    }

    fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    fn set_eps_train(&mut self, eps: f32) {
        self.eps_train = Some(eps);
    }

    /// Unrolled Euler integration on the graph; returns `v(T) - x`.
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        p: &Bound,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        self.check_channels(g.value(x))?;
        let h = self.node_cfg.step_size();
        let mut v = x;
        for k in 0..self.node_cfg.steps {
            let dv = self.field.forward(g, ps, p, v, k as f64 * h, mode)?;
            if !g.value(dv).all_finite() {
                return Err(Error::NonFinite(format!("vector field output at Euler step {k}")));
            }
            let step = g.scale(dv, T::from_f64(h));
            v = g.add(v, step)?;
        }
        Ok(g.sub(v, x)?)
    }

    fn save(&self, path: &Path) -> Result<()> {
        NodeGenerator::save(self, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_field_examples() {
        assert_eq!(receptive_field(&VectorFieldConfig::new(1)), 29);
        let one = VectorFieldConfig { in_channels: 1, layer_channels: vec![], dilations: vec![1], kernel: 3 };
        assert_eq!(receptive_field(&one), 3);
        let two = VectorFieldConfig { in_channels: 1, layer_channels: vec![4], dilations: vec![1, 1], kernel: 3 };
        assert_eq!(receptive_field(&two), 5);
    }

    #[test]
    fn layer_widths() {
        let l = VectorFieldConfig::new(3).layers();
        assert_eq!(l.first(), Some(&(4, 32, 1)));
        assert_eq!(l.last(), Some(&(32, 3, 1)));
        assert_eq!(l.len(), 6);
    }

    #[test]
    fn euler_closed_forms() {
        let cfg = NodeConfig::default();
        let v = euler_integrate(|v: &f64, _| Ok(*v), 1.0, &cfg).unwrap();
        assert!((v - 1.01f64.powi(5)).abs() < 1e-15);
        assert_eq!(euler_integrate(|_: &f64, _| Ok(0.0), 0.3, &cfg).unwrap(), 0.3);
        let c = euler_integrate(|_: &f64, _| Ok(1.0), 0.0, &cfg).unwrap();
        assert!((c - 0.05).abs() < 1e-15);
        assert!(euler_integrate(|_: &f64, _| Ok(f64::NAN), 0.0, &cfg).is_err());
        assert!(euler_integrate(|v: &f64, _| Ok(*v), 1.0, &NodeConfig { horizon: 0.05, steps: 0 }).is_err());
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let gen = NodeGenerator::new(VectorFieldConfig::new(1), NodeConfig::default(), 0).unwrap();
        assert!(matches!(gen.vector_field_eval(&Tensor::zeros(&[1, 3, 8, 8]), 0.0), Err(Error::Dimension(_))));
    }
}
