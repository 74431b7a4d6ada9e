//! The classifier zoo attacked in experiments, plus its training loop and
//! checkpoints.
//!
//! Three small CNNs with deliberately different topology: a plain
//! conv/pool stack, a residual network, and a densely connected network.
//! Per-channel input normalization is folded into the model, so every
//! public entry point takes raw `[0, 1]` pixels.

use std::path::Path;

use log::{info, warn};
use odeadv_autograd::{
    Adam, AdamConfig, BatchNorm2d, Bound, Conv2d, ConvGeometry, Graph, Linear, Mode, NodeId, ParamSet, Reduction,
    Scalar, Tensor,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::pad_crop;
use crate::error::{Error, Result};
use crate::types::{ImageBatch, LabelSpec};

/// Read-only access to a differentiable classifier.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    /// Pre-softmax scores `(B, K)` in evaluation mode.
    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;

    /// Gradient of the attack loss `J` with respect to the pixels of `x`.
    ///
    /// Untargeted: `J` is the summed cross-entropy against the true labels.
    /// Targeted: `J` is minus the summed cross-entropy against the target, so
    /// ascending `J` always moves toward attack success.
    fn loss_grad(&self, x: &ImageBatch, spec: LabelSpec) -> Result<Tensor<f32>>;

    fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Plain stack: four 3×3 convs in two pooled stages, then two dense layers.
    SmallcnnA,
    /// Residual: stem, one identity block, one strided block with a 1×1 shortcut.
    SmallcnnB,
    /// Dense: stem, three concatenating layers, a 1×1 transition.
    SmallcnnC,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::SmallcnnA, Arch::SmallcnnB, Arch::SmallcnnC];

    pub fn name(self) -> &'static str {
        match self {
            Arch::SmallcnnA => "smallcnn_a",
            Arch::SmallcnnB => "smallcnn_b",
            Arch::SmallcnnC => "smallcnn_c",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub arch: Arch,
    pub in_channels: usize,
    pub num_classes: usize,
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        inp: usize,
        out: usize,
        k: usize,
        geom: ConvGeometry,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = Conv2d::new(ps, &format!("{name}.conv"), inp, out, k, geom, false, rng);
        let bn = BatchNorm2d::new(ps, &format!("{name}.bn"), out);
        Self { conv, bn }
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        p: &Bound,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let y = self.conv.forward(g, p, x)?;
        Ok(self.bn.forward(g, ps, p, y, mode)?)
    }
}

#[allow(clippy::large_enum_variant)]
enum Body {
    A {
        convs: Vec<ConvBn>,
        fc1: Linear,
        fc2: Linear,
    },
    B {
        stem: ConvBn,
        b1: [ConvBn; 2],
        b2: [ConvBn; 2],
        short: ConvBn,
        fc: Linear,
    },
    C {
        stem: Conv2d,
        dense: Vec<(BatchNorm2d, Conv2d)>,
        trans_bn: BatchNorm2d,
        trans: Conv2d,
        out_bn: BatchNorm2d,
        fc: Linear,
    },
}

const SAME: ConvGeometry = ConvGeometry { stride: 1, padding: 1, dilation: 1 };

fn build_body<T: Scalar>(spec: &ClassifierSpec, ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Body {
    let c = spec.in_channels;
    let k = spec.num_classes;
    match spec.arch {
        Arch::SmallcnnA => {
            let widths = [(c, 32), (32, 32), (32, 64), (64, 64)];
            let convs = widths
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| ConvBn::new(ps, &format!("conv{i}"), a, b, 3, SAME, rng))
                .collect();
            let fc1 = Linear::new(ps, "fc1", 64 * 8 * 8, 128, rng);
            let fc2 = Linear::new(ps, "fc2", 128, k, rng);
            Body::A { convs, fc1, fc2 }
        }
        Arch::SmallcnnB => {
            let stem = ConvBn::new(ps, "stem", c, 32, 3, SAME, rng);
            let b1 =
                [ConvBn::new(ps, "block1.a", 32, 32, 3, SAME, rng), ConvBn::new(ps, "block1.b", 32, 32, 3, SAME, rng)];
            let b2 = [
                ConvBn::new(ps, "block2.a", 32, 64, 3, ConvGeometry::new(2, 1, 1), rng),
                ConvBn::new(ps, "block2.b", 64, 64, 3, SAME, rng),
            ];
            let short = ConvBn::new(ps, "block2.short", 32, 64, 1, ConvGeometry::new(2, 0, 1), rng);
            let fc = Linear::new(ps, "fc", 64, k, rng);
            Body::B { stem, b1, b2, short, fc }
        }
        Arch::SmallcnnC => {
            let (stem_c, growth) = (32, 24);
            let stem = Conv2d::new(ps, "stem", c, stem_c, 3, SAME, false, rng);
            let dense = (0..3)
                .map(|i| {
                    let inp = stem_c + i * growth;
                    let bn = BatchNorm2d::new(ps, &format!("dense{i}.bn"), inp);
                    let conv = Conv2d::new(ps, &format!("dense{i}.conv"), inp, growth, 3, SAME, false, rng);
                    (bn, conv)
                })
                .collect();
            let total = stem_c + 3 * growth;
            let trans_bn = BatchNorm2d::new(ps, "trans.bn", total);
            let trans = Conv2d::new(ps, "trans.conv", total, 48, 1, ConvGeometry::default(), false, rng);
            let out_bn = BatchNorm2d::new(ps, "out.bn", 48);
            let fc = Linear::new(ps, "fc", 48, k, rng);
            Body::C { stem, dense, trans_bn, trans, out_bn, fc }
        }
    }
}

/// A classifier with its weights, folded normalization and metadata.
pub struct TargetModel {
    pub spec: ClassifierSpec,
    pub params: ParamSet<f32>,
    /// Per-channel mean and standard deviation of the training split.
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
    pub clean_accuracy: Option<f64>,
    body: Body,
}

#[derive(Serialize, Deserialize)]
struct ClassifierRecord {
    spec: ClassifierSpec,
    params: ParamSet<f32>,
    norm_mean: Vec<f32>,
    norm_std: Vec<f32>,
    clean_accuracy: Option<f64>,
}

impl TargetModel {
    /// Freshly initialized model with identity normalization.
    pub fn new(spec: ClassifierSpec, seed: u64) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let body = build_body(&spec, &mut params, &mut rng);
        let c = spec.in_channels;
        Ok(Self { spec, params, norm_mean: vec![0.0; c], norm_std: vec![1.0; c], clean_accuracy: None, body })
    }

    /// Graph forward from raw pixels to logits, with the model's parameters
    /// already bound into `g` as `p` (taken from `ps`).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        p: &Bound,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let scale: Vec<T> = self.norm_std.iter().map(|&s| T::from_f64(1.0 / s as f64)).collect();
        let shift: Vec<T> =
            self.norm_mean.iter().zip(&self.norm_std).map(|(&m, &s)| T::from_f64(-(m as f64) / s as f64)).collect();
        let x = g.channel_affine(x, &scale, &shift)?;
        match &self.body {
            Body::A { convs, fc1, fc2 } => {
                let mut h = x;
                for (i, cb) in convs.iter().enumerate() {
                    h = cb.forward(g, ps, p, h, mode)?;
                    h = g.relu(h);
                    if i % 2 == 1 {
                        h = g.max_pool2(h)?;
                    }
                }
                let b = g.shape(h)[0];
                let flat = g.value(h).row_len();
                h = g.reshape(h, &[b, flat])?;
                h = fc1.forward(g, p, h)?;
                h = g.relu(h);
                Ok(fc2.forward(g, p, h)?)
            }
            Body::B { stem, b1, b2, short, fc } => {
                let s = stem.forward(g, ps, p, x, mode)?;
                let s = g.relu(s);
                let y = b1[0].forward(g, ps, p, s, mode)?;
                let y = g.relu(y);
                let y = b1[1].forward(g, ps, p, y, mode)?;
                let y = g.add(y, s)?;
                let s = g.relu(y);
                let y = b2[0].forward(g, ps, p, s, mode)?;
                let y = g.relu(y);
                let y = b2[1].forward(g, ps, p, y, mode)?;
                let sc = short.forward(g, ps, p, s, mode)?;
                let y = g.add(y, sc)?;
                let y = g.relu(y);
                let y = g.global_avg_pool(y)?;
                Ok(fc.forward(g, p, y)?)
            }
            Body::C { stem, dense, trans_bn, trans, out_bn, fc } => {
                let mut feats = stem.forward(g, p, x)?;
                for (bn, conv) in dense {
                    let y = bn.forward(g, ps, p, feats, mode)?;
                    let y = g.relu(y);
                    let y = conv.forward(g, p, y)?;
                    feats = g.concat_channels(&[feats, y])?;
                }
                let y = trans_bn.forward(g, ps, p, feats, mode)?;
                let y = g.relu(y);
                let y = trans.forward(g, p, y)?;
                let y = g.avg_pool2(y)?;
                let y = out_bn.forward(g, ps, p, y, mode)?;
                let y = g.relu(y);
                let y = g.global_avg_pool(y)?;
                Ok(fc.forward(g, p, y)?)
            }
        }
    }

    /// [`Classifier::loss_grad`] evaluated in any scalar type, with the given
    /// copy of the parameters.
    pub fn loss_grad_with<T: Scalar>(
        &self,
        ps: &ParamSet<T>,
        x: &Tensor<T>,
        labels: Option<&[usize]>,
        spec: LabelSpec,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let xi = g.variable(x.clone());
        let logits = self.forward(&mut g, ps, &p, xi, Mode::Eval)?;
        let j = attack_loss(&mut g, logits, labels, spec)?;
        let mut grads = g.backward(j)?;
        Ok(grads.take(xi).unwrap_or_else(|| Tensor::zeros(x.shape())))
    }

    /// Multiply-accumulate count of one forward pass on a `32×32` image.
    pub fn forward_macs(&self) -> u64 {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, self.spec.in_channels, 32, 32]));
        let _ = self.forward(&mut g, &self.params, &p, x, Mode::Eval);
        g.forward_macs()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let rec = ClassifierRecord {
            spec: self.spec,
            params: self.params.clone(),
            norm_mean: self.norm_mean.clone(),
            norm_std: self.norm_std.clone(),
            clean_accuracy: self.clean_accuracy,
        };
        checkpoint::save(path, checkpoint::Kind::Classifier, &rec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rec: ClassifierRecord = checkpoint::load(path, checkpoint::Kind::Classifier)?;
        let mut model = Self::new(rec.spec, 0)?;
        checkpoint::check_layout(&model.params, &rec.params)?;
        model.params = rec.params;
        model.norm_mean = rec.norm_mean;
        model.norm_std = rec.norm_std;
        model.clean_accuracy = rec.clean_accuracy;
        Ok(model)
    }

    /// Fraction of `data` classified correctly.
    pub fn accuracy(&self, data: &ImageBatch) -> Result<f64> {
        let labels = data.require_labels("accuracy")?;
        let mut correct = 0usize;
        let mut offset = 0;
        for chunk in data.chunks(EVAL_BATCH) {
            let pred = self.predict(chunk.data())?;
            correct += pred.iter().zip(&labels[offset..]).filter(|(p, y)| p == y).count();
            offset += chunk.len();
        }
        Ok(correct as f64 / data.len().max(1) as f64)
    }
}

/// Batch size used for inference over whole datasets.
pub const EVAL_BATCH: usize = 250;

/// The scalar `J` whose input gradient drives the gradient-sign attacks.
pub fn attack_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    labels: Option<&[usize]>,
    spec: LabelSpec,
) -> Result<NodeId> {
    let b = g.shape(logits)[0];
    match spec {
        LabelSpec::Untargeted => {
            let y = labels.ok_or_else(|| Error::Label("untargeted attack needs ground-truth labels".into()))?;
            Ok(g.cross_entropy(logits, y, Reduction::Sum)?)
        }
        LabelSpec::Targeted(t) => {
            let ce = g.cross_entropy(logits, &vec![t; b], Reduction::Sum)?;
            Ok(g.scale(ce, -T::one()))
        }
    }
}

impl Classifier for TargetModel {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let out = self.forward(&mut g, &self.params, &p, xi, Mode::Eval)?;
        Ok(g.value(out).clone())
    }

    fn loss_grad(&self, x: &ImageBatch, spec: LabelSpec) -> Result<Tensor<f32>> {
        spec.check(self.spec.num_classes)?;
        self.loss_grad_with(&self.params, x.data(), x.labels(), spec)
    }
}

/// Per-channel mean and standard deviation over a dataset.
pub fn channel_stats(data: &Tensor<f32>) -> Result<(Vec<f32>, Vec<f32>)> {
    let (b, c, h, w) = data.dims4()?;
    let plane = h * w;
    let mut mean = vec![0f64; c];
    let mut sq = vec![0f64; c];
    for (i, p) in data.data().chunks(plane).enumerate() {
        let ch = i % c;
        for &v in p {
            mean[ch] += v as f64;
            sq[ch] += (v as f64) * (v as f64);
        }
    }
    let n = (b * plane) as f64;
    let mut std = vec![0f32; c];
    let mut m32 = vec![0f32; c];
    for ch in 0..c {
        let m = mean[ch] / n;
        m32[ch] = m as f32;
        std[ch] = ((sq[ch] / n - m * m).max(1e-12)).sqrt() as f32;
    }
    Ok((m32, std))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Below this clean test accuracy a warning is logged.
    pub accuracy_floor: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 128, lr: 1e-3, seed: 0, accuracy_floor: 0.88 }
    }
}

/// Trains a classifier with cross-entropy, Adam and pad-4 random crops, then
/// records its clean accuracy on `test`.
pub fn train_classifier(
    spec: ClassifierSpec,
    train: &ImageBatch,
    test: &ImageBatch,
    cfg: &ClassifierTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TargetModel> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let labels = train.require_labels("classifier training")?;
    let mut model = TargetModel::new(spec, cfg.seed)?;
    let (mean, std) = channel_stats(train.data())?;
    model.norm_mean = mean;
    model.norm_std = std;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let x = pad_crop(&train.data().select_rows(idx), 4, &mut rng)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let xi = g.constant(x);
            let logits = model.forward(&mut g, &model.params, &p, xi, Mode::Train)?;
            let loss = g.cross_entropy(logits, &y, Reduction::Mean)?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("classifier loss, epoch {epoch}")));
            }
            total += lv;
            batches += 1;
            let stats = g.take_batch_stats();
            let mut grads = g.backward(loss)?;
            opt.step(&mut model.params, &p, &mut grads);
            model.params.absorb_batch_stats(&stats, BatchNorm2d::MOMENTUM as f32);
        }
        let mean_loss = total / batches.max(1) as f64;
        info!("{} epoch {} loss {:.4}", spec.arch, epoch + 1, mean_loss);
        on_epoch(epoch + 1, mean_loss);
    }
    let acc = model.accuracy(test)?;
    model.clean_accuracy = Some(acc);
    if acc < cfg.accuracy_floor {
        warn!("{} clean accuracy {:.4} is below the floor {:.2}", spec.arch, acc, cfg.accuracy_floor);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_distinct_architectures() {
        let x = Tensor::full(&[2, 1, 32, 32], 0.5f32);
        let mut sizes = Vec::new();
        for arch in Arch::ALL {
            let m = TargetModel::new(ClassifierSpec { arch, in_channels: 1, num_classes: 10 }, 1).unwrap();
            assert_eq!(m.logits(&x).unwrap().shape(), &[2, 10]);
            sizes.push(m.params.num_trainable());
        }
        sizes.dedup();
        assert_eq!(sizes.len(), 3);
        assert_eq!(Arch::parse("smallcnn_b"), Some(Arch::SmallcnnB));
    }

    #[test]
    fn channel_stats_of_known_data() {
        let t = Tensor::new(&[2, 1, 1, 2], vec![0.0f32, 1.0, 0.0, 1.0]).unwrap();
        let (m, s) = channel_stats(&t).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-7 && (s[0] - 0.5).abs() < 1e-7);
    }
}
