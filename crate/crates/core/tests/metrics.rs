mod common;

use common::{random_batch, rng, LinearSoftmax};
use odeadv::metrics::{
    asr_targeted, asr_untargeted, mean_finite, psnr, ssim, time_generation, transfer_matrix, AttackMethod, EvalReport,
    EvalRow, Source,
};
use odeadv::{Classifier, GradAttack, GradAttackConfig, LabelSpec};
use odeadv::Tensor;
use proptest::prelude::*;
use rand::Rng;

/// Textbook SSIM: full 2-D Gaussian window, valid positions only, f64
/// throughout, mean over positions and channels.
fn reference_ssim(x: &[f32], y: &[f32], c: usize, h: usize, w: usize) -> f64 {
    const WIN: usize = 11;
    let sigma = 1.5f64;
    let mut k = [[0f64; WIN]; WIN];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let at = |img: &[f32], r: usize, s: usize| img[ch * h * w + r * w + s] as f64;
        for r in 0..=h - WIN {
            for s in 0..=w - WIN {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let wt = k[i][j] / total;
                        let (a, b) = (at(x, r + i, s + j), at(y, r + i, s + j));
                        mx += wt * a;
                        my += wt * b;
                        xx += wt * a * a;
                        yy += wt * b * b;
                        xy += wt * a * b;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

#[test]
fn ssim_matches_reference_on_random_pairs() {
    let mut r = rng(21);
    for i in 0..50 {
        let c = if i % 2 == 0 { 1 } else { 3 };
        let a = random_batch(100 + i, 1, c, 32);
        // Mix of unrelated pairs and small perturbations.
        let b = if i % 3 == 0 {
            random_batch(200 + i, 1, c, 32).data().clone()
        } else {
            Tensor::from_fn(a.data().shape(), |j| (a.data().data()[j] + r.gen_range(-0.1f32..0.1)).clamp(0.0, 1.0))
        };
        let got = ssim(a.data(), &b).unwrap()[0];
        let want = reference_ssim(a.data().data(), b.data(), c, 32, 32);
        assert!((got - want).abs() < 1e-4, "pair {i}: {got} vs {want}");
    }
}

#[test]
fn closed_forms() {
    let x = Tensor::full(&[1, 1, 32, 32], 0.5f32);
    let y = x.map(|v| v + 15.0 / 255.0);
    assert!((psnr(&x, &y).unwrap()[0] - 24.609).abs() < 1e-3);
    assert!((psnr(&x, &y).unwrap()[0] - 20.0 * (255.0f64 / 15.0).log10()).abs() < 1e-4);
    assert!(psnr(&x, &x).unwrap()[0].is_infinite());
    let zero = Tensor::zeros(&[1, 1, 32, 32]);
    let one = Tensor::full(&[1, 1, 32, 32], 1.0f32);
    assert!(psnr(&zero, &one).unwrap()[0].abs() < 1e-12);
    assert!((ssim(&zero, &one).unwrap()[0] - 9.999e-5).abs() < 1e-6);
    let r = random_batch(5, 2, 3, 32);
    assert!(ssim(r.data(), r.data()).unwrap().iter().all(|v| (v - 1.0).abs() < 1e-6));
    assert!(ssim(&Tensor::zeros(&[1, 1, 8, 8]), &Tensor::zeros(&[1, 1, 8, 8])).is_err());
    assert!(psnr(&zero, &Tensor::zeros(&[1, 1, 16, 16])).is_err());
}

#[test]
fn asr_conventions() {
    assert_eq!(asr_untargeted(&[1, 2, 3, 4], &[1, 0, 3, 0]).unwrap(), 0.5);
    assert!(asr_untargeted(&[], &[]).is_err());
    // The two class-2 samples are excluded from the denominator.
    assert_eq!(asr_targeted(&[2, 2, 2, 0], &[0, 2, 2, 1], 2).unwrap(), 0.5);
    assert!(asr_targeted(&[2, 2], &[2, 2], 2).is_err());
    assert_eq!(mean_finite(&[1.0, f64::INFINITY, 3.0]), (2.0, 1));
}

fn row(i: usize) -> EvalRow {
    EvalRow {
        attack: "ifgsm".into(),
        source: "a".into(),
        target: format!("t{i}"),
        mode: "targeted".into(),
        target_class: Some(i % 10),
        asr: 0.25,
        psnr: 30.5,
        ssim: 0.9,
        time_s: 1.5,
        n: 100,
        whitebox_flag: i == 0,
    }
}

#[test]
fn report_csv_layout_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let report = EvalReport { rows: (0..18).map(row).collect() };
    report.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 19);
    assert_eq!(lines[0], "attack,source,target,mode,target_class,asr,psnr,ssim,time_s,n,whitebox_flag");
    assert_eq!(EvalReport::read_csv(&path).unwrap(), report);
    assert!(report.to_table().contains("25.00*"));
    assert!(EvalReport::default().write_csv(&path).is_err());
}

#[test]
fn transfer_matrix_layout_and_scores() {
    let (a, b) = (LinearSoftmax::random(1, 10, 256), LinearSoftmax::random(2, 10, 256));
    let x = random_batch(3, 12, 1, 16);
    let cfg = GradAttackConfig::default();
    let methods = [GradAttack::Fgsm, GradAttack::Ifgsm]
        .into_iter()
        .map(|attack| AttackMethod::Gradient { attack, cfg, model: &a as &dyn Classifier })
        .collect();
    let sources = [Source { name: "a".into(), methods }];
    let targets: [(String, &dyn Classifier); 2] = [("a".into(), &a), ("b".into(), &b)];
    let report = transfer_matrix(&sources, &targets, &x, LabelSpec::Untargeted).unwrap();
    assert_eq!(report.rows.len(), 4);
    for row in &report.rows {
        assert_eq!(row.whitebox_flag, row.target == "a");
        assert_eq!((row.n, row.mode.as_str(), row.target_class), (12, "untargeted", None));
        let attack = GradAttack::parse(&row.attack).unwrap();
        let adv = attack.run(&a, &x, LabelSpec::Untargeted, &cfg).unwrap();
        let model: &dyn Classifier = if row.target == "a" { &a } else { &b };
        let want = asr_untargeted(&model.predict(adv.data()).unwrap(), x.labels().unwrap()).unwrap();
        assert_eq!(row.asr, want);
    }
    assert!(transfer_matrix(&sources, &[], &x, LabelSpec::Untargeted).is_err());

    let empty = x.slice(0, 0);
    let m = AttackMethod::Gradient { attack: GradAttack::Fgsm, cfg, model: &a };
    let (secs, adv) = time_generation(&m, &empty, LabelSpec::Untargeted).unwrap();
    assert_eq!((secs, adv.len()), (0.0, 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric(seed in 0u64..10_000) {
        let a = random_batch(seed, 2, 1, 16);
        let b = random_batch(seed + 1, 2, 1, 16);
        prop_assert_eq!(psnr(a.data(), b.data()).unwrap(), psnr(b.data(), a.data()).unwrap());
        let (s1, s2) = (ssim(a.data(), b.data()).unwrap(), ssim(b.data(), a.data()).unwrap());
        for (u, v) in s1.iter().zip(&s2) {
            prop_assert!((u - v).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(u));
        }
    }

    #[test]
    fn psnr_falls_as_uniform_perturbation_grows(k1 in 1u32..30, k2 in 1u32..30) {
        prop_assume!(k1 != k2);
        let x = Tensor::full(&[1, 1, 12, 12], 0.4f32);
        let p = |k: u32| psnr(&x, &x.map(|v| v + k as f32 / 255.0)).unwrap()[0];
        prop_assert_eq!(k1 < k2, p(k1) > p(k2));
    }

    #[test]
    fn untargeted_asr_ignores_label_permutation(
        pairs in proptest::collection::vec((0usize..10, 0usize..10), 1..50),
        shift in 1usize..10,
    ) {
        let (pred, y): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let perm = |v: &[usize]| v.iter().map(|c| (c + shift) % 10).collect::<Vec<_>>();
        prop_assert_eq!(asr_untargeted(&pred, &y).unwrap(), asr_untargeted(&perm(&pred), &perm(&y)).unwrap());
    }
}
