//! Attack success, image similarity and timing.

use std::path::Path;
use std::time::Instant;

use log::warn;
use odeadv_autograd::{par, Tensor};
use serde::{Deserialize, Serialize};

use crate::attacks::{GradAttack, GradAttackConfig};
use crate::error::{Error, Result};
use crate::generator::AdversarialGenerator;
use crate::models::{Classifier, EVAL_BATCH};
use crate::types::{ImageBatch, LabelSpec};

/// Fraction of samples whose prediction differs from the true label, over
/// all samples.
pub fn asr_untargeted(pred: &[usize], y: &[usize]) -> Result<f64> {
    if pred.len() != y.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", pred.len(), y.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyDenominator("no samples".into()));
    }
    Ok(pred.iter().zip(y).filter(|(p, y)| p != y).count() as f64 / pred.len() as f64)
}

/// Fraction of samples predicted as `target`, over samples whose true label
/// is not already `target`.
pub fn asr_targeted(pred: &[usize], y: &[usize], target: usize) -> Result<f64> {
    if pred.len() != y.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", pred.len(), y.len())));
    }
    let eligible: Vec<_> = pred.iter().zip(y).filter(|(_, &y)| y != target).collect();
    if eligible.is_empty() {
        return Err(Error::EmptyDenominator(format!("every sample already belongs to target class {target}")));
    }
    Ok(eligible.iter().filter(|(&p, _)| p == target).count() as f64 / eligible.len() as f64)
}

fn check_pair(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<(usize, usize, usize, usize)> {
    if x.shape() != y.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(x.dims4()?)
}

/// Per-sample `10·log10(1 / MSE)` in dB; identical images give `+∞`.
pub fn psnr(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<Vec<f64>> {
    let (b, ..) = check_pair(x, y)?;
    let n = x.row_len();
    Ok((0..b)
        .map(|i| {
            let mse =
                x.row(i).iter().zip(y.row(i)).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n as f64;
            if mse == 0.0 {
                f64::INFINITY
            } else {
                -10.0 * mse.log10()
            }
        })
        .collect())
}

/// Mean of the finite entries and the number of infinite ones left out.
pub fn mean_finite(v: &[f64]) -> (f64, usize) {
    let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    let skipped = v.len() - finite.len();
    if finite.is_empty() {
        return (f64::INFINITY, skipped);
    }
    (finite.iter().sum::<f64>() / finite.len() as f64, skipped)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid separable filtering of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize, k: &[f64]) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, k);
    let my = filter_valid(&y, h, w, k);
    let mxx = filter_valid(&prod(&x, &x), h, w, k);
    let myy = filter_valid(&prod(&y, &y), h, w, k);
    let mxy = filter_valid(&prod(&x, &y), h, w, k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    total / mx.len() as f64
}

/// Per-sample single-scale SSIM (11×11 Gaussian window, σ = 1.5, data range
/// 1), averaged over channels and valid window positions.
pub fn ssim(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<Vec<f64>> {
    let (b, c, h, w) = check_pair(x, y)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "{h}x{w} images are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_kernel();
    let plane = h * w;
    Ok(par::map_range(b, |i| {
        (0..c)
            .map(|ch| {
                let off = (i * c + ch) * plane;
                ssim_plane(&x.data()[off..off + plane], &y.data()[off..off + plane], h, w, &k)
            })
            .sum::<f64>()
            / c as f64
    }))
}

/// One line of an evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub attack: String,
    pub source: String,
    pub target: String,
    pub mode: String,
    pub target_class: Option<usize>,
    pub asr: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub time_s: f64,
    pub n: usize,
    pub whitebox_flag: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const ASR_NOTE: &str =
    "ASR denominator: all test samples (untargeted); samples whose true class is not the target (targeted)";

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Config("refusing to write an empty report".into()));
        }
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(Self { rows: r.deserialize().collect::<std::result::Result<Vec<_>, _>>()? })
    }

    /// Fixed-width table with `*` marking white-box rows.
    pub fn to_table(&self) -> String {
        let mut s = format!("# {ASR_NOTE}\n");
        s.push_str(&format!(
            "{:<14} {:<12} {:<12} {:<11} {:>6} {:>8} {:>8} {:>7} {:>9} {:>6}\n",
            "attack", "source", "target", "mode", "class", "asr%", "psnr", "ssim", "time_s", "n"
        ));
        for r in &self.rows {
            let class = r.target_class.map(|c| c.to_string()).unwrap_or_else(|| "-".into());
            let star = if r.whitebox_flag { "*" } else { "" };
            s.push_str(&format!(
                "{:<14} {:<12} {:<12} {:<11} {:>6} {:>8} {:>8.3} {:>7.4} {:>9.3} {:>6}\n",
                r.attack,
                r.source,
                r.target,
                r.mode,
                class,
                format!("{:.2}{star}", 100.0 * r.asr),
                r.psnr,
                r.ssim,
                r.time_s,
                r.n
            ));
        }
        s
    }
}

/// ASR of `adv` on `model`, plus mean PSNR and SSIM against `clean`.
pub struct Scores {
    pub asr: f64,
    pub psnr: f64,
    pub psnr_infinite: usize,
    pub ssim: f64,
}

pub fn score(model: &dyn Classifier, clean: &ImageBatch, adv: &ImageBatch, spec: LabelSpec) -> Result<Scores> {
    let y = clean.require_labels("attack evaluation")?;
    let mut pred = Vec::with_capacity(adv.len());
    for chunk in adv.chunks(EVAL_BATCH) {
        pred.extend(model.predict(chunk.data())?);
    }
    let asr = match spec {
        LabelSpec::Untargeted => asr_untargeted(&pred, y)?,
        LabelSpec::Targeted(t) => asr_targeted(&pred, y, t)?,
    };
    let (psnr, psnr_infinite) = mean_finite(&psnr(clean.data(), adv.data())?);
    if psnr_infinite > 0 {
        warn!("{psnr_infinite} unperturbed sample(s) left out of the PSNR mean");
    }
    let s = ssim(clean.data(), adv.data())?;
    let ssim = s.iter().sum::<f64>() / s.len().max(1) as f64;
    Ok(Scores { asr, psnr, psnr_infinite, ssim })
}

/// Images per gradient-attack call.
pub const ATTACK_BATCH: usize = 100;

/// A way of producing adversarial images from clean ones.
pub enum AttackMethod<'a> {
    Gradient { attack: GradAttack, cfg: GradAttackConfig, model: &'a dyn Classifier },
    Generator { name: String, gen: &'a dyn AdversarialGenerator, eps: f32 },
}

impl AttackMethod<'_> {
    pub fn name(&self) -> String {
        match self {
            AttackMethod::Gradient { attack, .. } => attack.name().to_string(),
            AttackMethod::Generator { name, .. } => name.clone(),
        }
    }

    pub fn run(&self, x: &ImageBatch, spec: LabelSpec) -> Result<ImageBatch> {
        match self {
            AttackMethod::Gradient { attack, cfg, model } => {
                let parts =
                    x.chunks(ATTACK_BATCH).map(|c| attack.run(*model, &c, spec, cfg)).collect::<Result<Vec<_>>>()?;
                ImageBatch::concat(&parts)
            }
            AttackMethod::Generator { gen, eps, .. } => gen.generate(x, *eps),
        }
    }
}

/// Wall-clock seconds to attack all of `test`, and the adversarial images.
pub fn time_generation(method: &AttackMethod<'_>, test: &ImageBatch, spec: LabelSpec) -> Result<(f64, ImageBatch)> {
    if test.is_empty() {
        warn!("timing {} on an empty test set", method.name());
        return Ok((0.0, test.clone()));
    }
    let start = Instant::now();
    let adv = method.run(test, spec)?;
    Ok((start.elapsed().as_secs_f64(), adv))
}

/// Attacks crafted on one source model.
pub struct Source<'a> {
    pub name: String,
    pub methods: Vec<AttackMethod<'a>>,
}

/// Every source method evaluated against every target model. Rows where the
/// source and target coincide are flagged as white-box.
pub fn transfer_matrix(
    sources: &[Source<'_>],
    targets: &[(String, &dyn Classifier)],
    test: &ImageBatch,
    spec: LabelSpec,
) -> Result<EvalReport> {
    if sources.is_empty() || targets.is_empty() {
        return Err(Error::Config("need at least one source and one target model".into()));
    }
    let mut report = EvalReport::default();
    for src in sources {
        for method in &src.methods {
            let (secs, adv) = time_generation(method, test, spec)?;
            for (tname, model) in targets {
                let s = score(*model, test, &adv, spec)?;
                report.rows.push(EvalRow {
                    attack: method.name(),
                    source: src.name.clone(),
                    target: tname.clone(),
                    mode: spec.mode_name().into(),
                    target_class: spec.target(),
                    asr: s.asr,
                    psnr: s.psnr,
                    ssim: s.ssim,
                    time_s: secs,
                    n: test.len(),
                    whitebox_flag: *tname == src.name,
                });
            }
        }
    }
    Ok(report)
}
