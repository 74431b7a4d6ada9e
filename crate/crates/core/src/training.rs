//! Alternating GAN training of a perturbation generator against a frozen
//! classifier.
//!
//! Per batch: clip `G(x)` to the training budget, form `x_adv`, take one
//! discriminator step on (clean = real, `x_adv` = fake), then one generator
//! step on `cw + α·gan + β·hinge`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::info;
use odeadv_autograd::{
    Adam, AdamConfig, BatchNorm2d, Bound, Conv2d, ConvGeometry, Graph, Linear, Mode, NodeId, ParamSet, Scalar, Tensor,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::pad_crop;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::losses::{self, LossWeights};
use crate::models::TargetModel;
use crate::types::{per255, ImageBatch, LabelSpec};

/// Three 4×4 stride-2 convolutions (8, 16, 32 channels) with LeakyReLU,
/// normalization on the last two, and a sigmoid unit on top.
pub struct Discriminator {
    pub in_channels: usize,
    pub params: ParamSet<f32>,
    convs: [Conv2d; 3],
    bns: [BatchNorm2d; 2],
    fc: Linear,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Discriminator {
    /// Built for 32×32 inputs.
    pub fn new(in_channels: usize, seed: u64) -> Result<Self> {
        if in_channels != 1 && in_channels != 3 {
            return Err(Error::Config(format!("discriminator takes 1 or 3 channels, got {in_channels}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let geom = ConvGeometry::new(2, 1, 1);
        let convs = [
            Conv2d::new(&mut ps, "d.conv0", in_channels, 8, 4, geom, true, &mut rng),
            Conv2d::new(&mut ps, "d.conv1", 8, 16, 4, geom, false, &mut rng),
            Conv2d::new(&mut ps, "d.conv2", 16, 32, 4, geom, false, &mut rng),
        ];
        let bns = [BatchNorm2d::new(&mut ps, "d.bn1", 16), BatchNorm2d::new(&mut ps, "d.bn2", 32)];
        let fc = Linear::new(&mut ps, "d.fc", 32 * 4 * 4, 1, &mut rng);
        Ok(Self { in_channels, params: ps, convs, bns, fc })
    }

    /// `(B, 1)` scores in `[0, 1]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        p: &Bound,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let slope = T::from_f64(LEAKY_SLOPE);
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, p, h)?;
            if i > 0 {
                h = self.bns[i - 1].forward(g, ps, p, h, mode)?;
            }
            h = g.leaky_relu(h, slope);
        }
        let b = g.shape(h)[0];
        let flat = g.value(h).row_len();
        h = g.reshape(h, &[b, flat])?;
        let y = self.fc.forward(g, p, h)?;
        Ok(g.sigmoid(y))
    }

    /// Scores in evaluation mode.
    pub fn score(&self, x: &Tensor<f32>) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let out = self.forward(&mut g, &self.params, &p, xi, Mode::Eval)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, checkpoint::Kind::Discriminator, &(self.in_channels, &self.params))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (c, params): (usize, ParamSet<f32>) = checkpoint::load(path, checkpoint::Kind::Discriminator)?;
        let mut d = Self::new(c, 0)?;
        checkpoint::check_layout(&d.params, &params)?;
        d.params = params;
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate for both networks.
    pub lr: f64,
    /// The learning rate halves every this many epochs.
    pub lr_halve_every: usize,
    /// First-moment decay of Adam.
    pub beta1: f64,
    pub eps_train: f32,
    pub eps_test: f32,
    pub label_spec: LabelSpec,
    pub seed: u64,
    /// Pad-4 random crops on every batch.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 0.002,
            lr_halve_every: 60,
            beta1: 0.5,
            eps_train: per255(15.0),
            eps_test: per255(15.0),
            label_spec: LabelSpec::Untargeted,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || self.lr_halve_every == 0 {
            return Err(Error::Config("epochs, batch size, learning rate and halving period must be positive".into()));
        }
        crate::types::AttackBudget::new(self.eps_test, self.eps_train)?;
        Ok(())
    }

    /// Learning rate during the 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.lr_halve_every) as i32)
    }
}

/// Per-epoch batch means of every loss term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub cw_loss: f64,
    pub gan_loss: f64,
    pub hinge_loss: f64,
    pub d_loss: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub log: Vec<TrainLogRow>,
    pub seconds: f64,
}

/// Appends log rows to a CSV file, writing the header when the file is new.
pub fn append_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<TrainLogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Trains `gen` and `disc` in place. `target` is only read.
pub fn train_adversarial_generator<G: Generator>(
    gen: &mut G,
    disc: &mut Discriminator,
    target: &TargetModel,
    data: &ImageBatch,
    cfg: &TrainConfig,
    w: &LossWeights,
    mut on_epoch: impl FnMut(&TrainLogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    w.validate()?;
    let spec = cfg.label_spec.check(target.spec.num_classes)?;
    let labels = match spec {
        LabelSpec::Untargeted => Some(data.require_labels("untargeted GAN training")?),
        LabelSpec::Targeted(_) => data.labels(),
    };
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = |lr| AdamConfig { lr, beta1: cfg.beta1, ..Default::default() };
    let mut opt_g = Adam::new(adam(cfg.lr));
    let mut opt_d = Adam::new(adam(cfg.lr));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let momentum = BatchNorm2d::MOMENTUM as f32;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        opt_g.set_lr(lr);
        opt_d.set_lr(lr);
        order.shuffle(&mut rng);
        let mut sums = [0f64; 4];
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            // Batch-statistics normalization needs two samples.
            if idx.len() < 2 {
                continue;
            }
            let mut x = data.data().select_rows(idx);
            if cfg.augment {
                x = pad_crop(&x, 4, &mut rng)?;
            }
            let y: Option<Vec<usize>> = labels.map(|l| idx.iter().map(|&i| l[i]).collect());

            let mut g = Graph::new();
            let pg = gen.params().bind(&mut g, true);
            let xi = g.constant(x.clone());
            let raw = gen.forward(&mut g, gen.params(), &pg, xi, Mode::Train)?;
            let delta = g.clamp(raw, -cfg.eps_train, cfg.eps_train);
            let sum = g.add(xi, delta)?;
            let x_adv = g.clamp(sum, 0.0, 1.0);
            let gap = g.value(x_adv).zip_map(&x, |a, b| (a - b).abs())?.max_abs();
            if gap > cfg.eps_train + 1e-6 {
                return Err(Error::NonFinite(format!("training perturbation {gap} exceeds budget at batch {bi}")));
            }
            let gen_stats = g.take_batch_stats();

            let d_loss = {
                let mut gd = Graph::new();
                let pd = disc.params.bind(&mut gd, true);
                let real = gd.constant(x.clone());
                let fake = gd.constant(g.value(x_adv).clone());
                let d_real = disc.forward(&mut gd, &disc.params, &pd, real, Mode::Train)?;
                let d_fake = disc.forward(&mut gd, &disc.params, &pd, fake, Mode::Train)?;
                let loss = losses::lsgan_discriminator_node(&mut gd, d_real, d_fake)?;
                let v = gd.value(loss).item() as f64;
                let stats = gd.take_batch_stats();
                let mut grads = gd.backward(loss)?;
                opt_d.step(&mut disc.params, &pd, &mut grads);
                disc.params.absorb_batch_stats(&stats, momentum);
                v
            };

            let pd = disc.params.bind(&mut g, false);
            let d_fake = disc.forward(&mut g, &disc.params, &pd, x_adv, Mode::Train)?;
            let _ = g.take_batch_stats();
            let pt = target.params.bind(&mut g, false);
            let logits = target.forward(&mut g, &target.params, &pt, x_adv, Mode::Eval)?;
            let cw = match (spec, &y) {
                (LabelSpec::Targeted(t), _) => losses::cw_targeted_node(&mut g, logits, t, w.kappa)?,
                (LabelSpec::Untargeted, Some(y)) => losses::cw_untargeted_node(&mut g, logits, y, w.kappa)?,
                (LabelSpec::Untargeted, None) => unreachable!("labels checked above"),
            };
            let gan = losses::lsgan_generator_node(&mut g, d_fake);
            let hinge = losses::hinge_node(&mut g, delta, w.c_hinge);
            let total = losses::generator_total_node(&mut g, cw, gan, hinge, w)?;
            let vals = [cw, gan, hinge].map(|n| g.value(n).item() as f64);
            if !vals.iter().chain([&d_loss]).all(|v| v.is_finite()) || !g.value(total).all_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {} batch {bi}", epoch + 1)));
            }
            let mut grads = g.backward(total)?;
            opt_g.step(gen.params_mut(), &pg, &mut grads);
            gen.params_mut().absorb_batch_stats(&gen_stats, momentum);
            if !gen.params().all_finite() {
                return Err(Error::NonFinite(format!("generator weights at epoch {} batch {bi}", epoch + 1)));
            }

            for (s, v) in sums.iter_mut().zip([vals[0], vals[1], vals[2], d_loss]) {
                *s += v;
            }
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let row = TrainLogRow {
            epoch: epoch + 1,
            cw_loss: sums[0] / n,
            gan_loss: sums[1] / n,
            hinge_loss: sums[2] / n,
            d_loss: sums[3] / n,
            lr,
        };
        info!(
            "{} epoch {} cw {:.4} gan {:.4} hinge {:.4} d {:.4} ({:.0}s)",
            gen.name(),
            row.epoch,
            row.cw_loss,
            row.gan_loss,
            row.hinge_loss,
            row.d_loss,
            start.elapsed().as_secs_f64()
        );
        on_epoch(&row);
        log.push(row);
    }
    gen.set_eps_train(cfg.eps_train);
    Ok(TrainOutcome { log, seconds: start.elapsed().as_secs_f64() })
}

/// Writes a plain-text line per log row, for humans.
pub fn format_log(rows: &[TrainLogRow], mut out: impl Write) -> std::io::Result<()> {
    for r in rows {
        writeln!(
            out,
            "epoch {:>3}  cw {:.5}  gan {:.5}  hinge {:.5}  d {:.5}  lr {}",
            r.epoch, r.cw_loss, r.gan_loss, r.hinge_loss, r.d_loss, r.lr
        )?;
    }
    Ok(())
}
