//! The generator interface shared by the ODE generator and the AdvGAN-style
//! encoder/decoder baseline, and the test-phase clipping.

use std::path::Path;

use odeadv_autograd::{BatchNorm2d, Bound, Conv2d, ConvGeometry, Graph, Mode, NodeId, ParamSet, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::types::{apply_perturbation, ImageBatch, Perturbation};

/// Images per graph when generating outside training.
pub const GEN_BATCH: usize = 32;

/// A trainable map from images to raw (unclipped) perturbations.
pub trait Generator: Send + Sync {
    fn name(&self) -> &'static str;
    fn params(&self) -> &ParamSet<f32>;
    fn params_mut(&mut self) -> &mut ParamSet<f32>;
    fn set_eps_train(&mut self, eps: f32);
    /// Raw `G(x)` on the graph.
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        p: &Bound,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId>;
    fn save(&self, path: &Path) -> Result<()>;
}

/// Unclipped `G(x)` in evaluation mode.
pub fn generate_raw<G: Generator + ?Sized>(gen: &G, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    let b = x.shape().first().copied().unwrap_or(0);
    for s in (0..b).step_by(GEN_BATCH) {
        let chunk = x.slice_rows(s, (s + GEN_BATCH).min(b));
        let mut g = Graph::new();
        let p = gen.params().bind(&mut g, false);
        let xi = g.constant(chunk);
        let out = gen.forward(&mut g, gen.params(), &p, xi, Mode::Eval)?;
        parts.push(g.value(out).clone());
    }
    if parts.is_empty() {
        return Ok(x.clone());
    }
    Ok(Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?)
}

/// Test phase: `clip(x + clip(G(x), ±eps), 0, 1)`.
pub fn generate_adversarial<G: Generator + ?Sized>(gen: &G, x: &ImageBatch, eps: f32) -> Result<ImageBatch> {
    let raw = generate_raw(gen, x.data())?;
    apply_perturbation(x, &Perturbation::clipped(&raw, eps)?)
}

/// Object-safe view of a trained generator used by evaluation code.
pub trait AdversarialGenerator: Send + Sync {
    fn generate(&self, x: &ImageBatch, eps: f32) -> Result<ImageBatch>;
}

impl<G: Generator> AdversarialGenerator for G {
    fn generate(&self, x: &ImageBatch, eps: f32) -> Result<ImageBatch> {
        generate_adversarial(self, x, eps)
    }
}

struct Block {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl Block {
    fn new(
        ps: &mut ParamSet<f32>,
        name: &str,
        i: usize,
        o: usize,
        k: usize,
        geom: ConvGeometry,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), i, o, k, geom, false, rng),
            bn: BatchNorm2d::new(ps, &format!("{name}.bn"), o),
        }
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        p: &Bound,
        x: NodeId,
        mode: Mode,
        relu: bool,
    ) -> Result<NodeId> {
        let y = self.conv.forward(g, p, x)?;
        let y = self.bn.forward(g, ps, p, y, mode)?;
        Ok(if relu { g.relu(y) } else { y })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvGanConfig {
    pub in_channels: usize,
    pub res_blocks: usize,
}

/// Encoder / residual bottleneck / decoder generator ending in `tanh`.
pub struct AdvGanGenerator {
    pub cfg: AdvGanConfig,
    pub params: ParamSet<f32>,
    pub eps_train: Option<f32>,
    enc: [Block; 3],
    res: Vec<[Block; 2]>,
    dec: [Block; 2],
    out: Conv2d,
}

#[derive(Serialize, Deserialize)]
struct AdvGanRecord {
    cfg: AdvGanConfig,
    params: ParamSet<f32>,
    eps_train: Option<f32>,
}

impl AdvGanGenerator {
    pub fn new(cfg: AdvGanConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let c = cfg.in_channels;
        let same = ConvGeometry::new(1, 1, 1);
        let down = ConvGeometry::new(2, 1, 1);
        let enc = [
            Block::new(&mut ps, "enc0", c, 8, 3, same, &mut rng),
            Block::new(&mut ps, "enc1", 8, 16, 4, down, &mut rng),
            Block::new(&mut ps, "enc2", 16, 32, 4, down, &mut rng),
        ];
        let res = (0..cfg.res_blocks)
            .map(|i| {
                [
                    Block::new(&mut ps, &format!("res{i}.a"), 32, 32, 3, same, &mut rng),
                    Block::new(&mut ps, &format!("res{i}.b"), 32, 32, 3, same, &mut rng),
                ]
            })
            .collect();
        let dec = [
            Block::new(&mut ps, "dec0", 32, 16, 3, same, &mut rng),
            Block::new(&mut ps, "dec1", 16, 8, 3, same, &mut rng),
        ];
        let out = Conv2d::new(&mut ps, "out", 8, c, 3, same, true, &mut rng);
        Self { cfg, params: ps, eps_train: None, enc, res, dec, out }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tag, rec): (String, AdvGanRecord) = checkpoint::load(path, checkpoint::Kind::Generator)?;
        if tag != "advgan" {
            return Err(Error::Checkpoint(format!("{} holds a {tag} generator", path.display())));
        }
        let mut gen = Self::new(rec.cfg, 0);
        checkpoint::check_layout(&gen.params, &rec.params)?;
        gen.params = rec.params;
        gen.eps_train = rec.eps_train;
        Ok(gen)
    }
}

impl Generator for AdvGanGenerator {
    fn name(&self) -> &'static str {
        "advgan"
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

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        p: &Bound,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let mut h = x;
        for b in &self.enc {
            h = b.forward(g, ps, p, h, mode, true)?;
        }
        for [a, b] in &self.res {
            let y = a.forward(g, ps, p, h, mode, true)?;
            let y = b.forward(g, ps, p, y, mode, false)?;
            h = g.add(h, y)?;
        }
        for b in &self.dec {
            h = g.upsample2(h)?;
            h = b.forward(g, ps, p, h, mode, true)?;
        }
        let y = self.out.forward(g, p, h)?;
        Ok(g.tanh(y))
    }

    fn save(&self, path: &Path) -> Result<()> {
        let rec = AdvGanRecord { cfg: self.cfg, params: self.params.clone(), eps_train: self.eps_train };
        checkpoint::save(path, checkpoint::Kind::Generator, &("advgan", rec))
    }
}
