mod common;

use common::{max_abs_diff, random_batch, ConstGrad, LinearSoftmax, Quadratic};
use odeadv::attacks::{fgsm, ifgsm, mifgsm, nifgsm, sign};
use odeadv::{per255, GradAttack, GradAttackConfig, ImageBatch, LabelSpec, Tensor};
use proptest::prelude::*;

const EPS: f32 = 15.0 / 255.0;

fn cfg(step: f32, n_iter: usize, decay: f32) -> GradAttackConfig {
    GradAttackConfig { eps: EPS, step_size: step, n_iter, decay }
}

fn half_batch(n: usize) -> ImageBatch {
    ImageBatch::new(Tensor::full(&[n, 1, 4, 4], 0.5), Some(vec![0; n])).unwrap()
}

#[test]
fn fgsm_follows_a_positive_gradient() {
    // Only class 1 has positive weights, and the sample's label is 0, so
    // the untargeted gradient W^T(p − e_0) is positive at every pixel.
    let d = 16;
    let mut m = LinearSoftmax { w: vec![0.0; 2 * d], b: vec![0.0; 2], k: 2, d, loss_scale: 1.0 };
    m.w[d..].iter_mut().for_each(|w| *w = 1.0);
    let x = half_batch(1);
    let adv = fgsm(&m, &x, LabelSpec::Untargeted, EPS).unwrap();
    // ∂J/∂x_j = Σ_c (p_c − 1[c=y]) w_cj = p_1 > 0.
    assert!(adv.data().data().iter().all(|&v| v == 0.5 + EPS));
}

#[test]
fn zero_gradient_or_budget_leaves_input() {
    let x = random_batch(1, 3, 1, 4);
    let z = ConstGrad(0.0);
    for attack in GradAttack::ALL {
        let adv = attack.run(&z, &x, LabelSpec::Untargeted, &GradAttackConfig::default()).unwrap();
        assert_eq!(adv.data(), x.data(), "{}", attack.name());
    }
    assert_eq!(fgsm(&ConstGrad(1.0), &x, LabelSpec::Untargeted, 0.0).unwrap().data(), x.data());
}

#[test]
fn ifgsm_saturates_at_the_budget() {
    let x = half_batch(2);
    let adv = ifgsm(&ConstGrad(1.0), &x, LabelSpec::Untargeted, &cfg(per255(2.0), 10, 1.0)).unwrap();
    for &v in adv.data().data() {
        assert!((v - (0.5 + EPS)).abs() < 1e-7);
    }
}

#[test]
fn reduction_chain_is_bitwise() {
    let m = LinearSoftmax::random(3, 10, 3 * 8 * 8);
    let x = random_batch(4, 5, 3, 8);
    for spec in [LabelSpec::Untargeted, LabelSpec::Targeted(2)] {
        let f = fgsm(&m, &x, spec, EPS).unwrap();
        let i1 = ifgsm(&m, &x, spec, &cfg(EPS, 1, 1.0)).unwrap();
        assert_eq!(f.data(), i1.data());

        let c0 = cfg(per255(2.0), 10, 0.0);
        let i = ifgsm(&m, &x, spec, &c0).unwrap();
        let mi = mifgsm(&m, &x, spec, &c0).unwrap();
        let ni = nifgsm(&m, &x, spec, &c0).unwrap();
        assert_eq!(i.data(), mi.data());
        assert_eq!(mi.data(), ni.data());
    }
}

#[test]
fn first_nesterov_step_matches_momentum() {
    let m = LinearSoftmax::random(5, 10, 64);
    let x = random_batch(6, 4, 1, 8);
    let c = cfg(per255(2.0), 1, 1.0);
    assert_eq!(
        nifgsm(&m, &x, LabelSpec::Untargeted, &c).unwrap().data(),
        mifgsm(&m, &x, LabelSpec::Untargeted, &c).unwrap().data()
    );
}

#[test]
fn momentum_on_a_fixed_field_keeps_its_sign() {
    // After three steps the momentum is 3·g/‖g‖₁, which has the sign of g, so
    // the trajectory equals I-FGSM's.
    let x = random_batch(7, 2, 1, 4);
    let c = cfg(per255(2.0), 3, 1.0);
    for g in [0.3f32, -2.0] {
        let a = mifgsm(&ConstGrad(g), &x, LabelSpec::Untargeted, &c).unwrap();
        let b = ifgsm(&ConstGrad(g), &x, LabelSpec::Untargeted, &c).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Momentum (and optionally Nesterov) recurrence written out in f64.
fn hand_recurrence(
    q: &Quadratic,
    x0: &[f32],
    per_sample: usize,
    n: usize,
    step: f64,
    eps: f64,
    mu: f64,
    nesterov: bool,
) -> Vec<f64> {
    let d = x0.len();
    let x0: Vec<f64> = x0.iter().map(|&v| v as f64).collect();
    let mut x = x0.clone();
    let mut g = vec![0.0; d];
    for _ in 0..n {
        let at: Vec<f64> =
            if nesterov { (0..d).map(|i| (x[i] + step * mu * g[i]).clamp(0.0, 1.0)).collect() } else { x.clone() };
        let grad: Vec<f64> = (0..d).map(|i| q.a[i] as f64 * (at[i] - q.c[i] as f64)).collect();
        for (gs, grs) in g.chunks_mut(per_sample).zip(grad.chunks(per_sample)) {
            let l1: f64 = grs.iter().map(|v| v.abs()).sum();
            for (gi, v) in gs.iter_mut().zip(grs) {
                *gi = mu * *gi + if l1 > 0.0 { v / l1 } else { 0.0 };
            }
        }
        for i in 0..d {
            let delta = (x[i] - x0[i] + step * sgn(g[i])).clamp(-eps, eps);
            x[i] = (x0[i] + delta).clamp(0.0, 1.0);
        }
    }
    x
}

#[test]
fn momentum_three_step_hand_recurrence() {
    // Mixed-sign curvature: descending coordinates overshoot their centre and
    // the momentum term decides the direction afterwards.
    let a = vec![1.0, -1.0, -2.0, 0.5, -0.25, 3.0, -1.0, 1.0];
    let c = vec![0.3, 0.51, 0.49, 0.7, 0.505, 0.2, 0.9, 0.0];
    let x0 = vec![0.5f32; 8];
    let q = Quadratic { a, c };
    let x = ImageBatch::new(Tensor::new(&[2, 1, 2, 2], x0.clone()).unwrap(), Some(vec![0, 0])).unwrap();
    for (mu, nesterov) in [(1.0, false), (0.5, false), (0.0, false), (1.0, true)] {
        let cf = GradAttackConfig { eps: EPS, step_size: per255(2.0), n_iter: 3, decay: mu as f32 };
        let got = if nesterov {
            nifgsm(&q, &x, LabelSpec::Untargeted, &cf)
        } else {
            mifgsm(&q, &x, LabelSpec::Untargeted, &cf)
        }
        .unwrap();
        let want = hand_recurrence(&q, &x0, 4, 3, per255(2.0) as f64, EPS as f64, mu, nesterov);
        for (g, w) in got.data().data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-6, "mu {mu} nesterov {nesterov}: {g} vs {w}");
        }
    }
}

#[test]
fn targeted_steps_raise_the_target_logit() {
    let m = LinearSoftmax::random(8, 10, 64);
    let x = random_batch(9, 6, 1, 8);
    let before = odeadv::Classifier::logits(&m, x.data()).unwrap();
    let adv = fgsm(&m, &x, LabelSpec::Targeted(4), per255(2.0)).unwrap();
    let after = odeadv::Classifier::logits(&m, adv.data()).unwrap();
    let margin = |l: &Tensor<f32>, i: usize| {
        let r = l.row(i);
        r[4] - r.iter().enumerate().filter(|(c, _)| *c != 4).map(|(_, v)| *v).fold(f32::MIN, f32::max)
    };
    let improved = (0..6).filter(|&i| margin(&after, i) > margin(&before, i)).count();
    assert!(improved >= 5, "only {improved} of 6 samples moved towards the target");
}

#[test]
fn missing_labels_are_rejected() {
    let m = LinearSoftmax::random(1, 10, 16);
    let x = ImageBatch::new(Tensor::full(&[1, 1, 4, 4], 0.5), None).unwrap();
    assert!(fgsm(&m, &x, LabelSpec::Untargeted, EPS).is_err());
    assert!(fgsm(&m, &x, LabelSpec::Targeted(1), EPS).is_ok());
    assert!(fgsm(&m, &x, LabelSpec::Targeted(10), EPS).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attacks_respect_budget_and_pixel_range(seed in 0u64..1000, eps_k in 1.0f64..20.0, n_iter in 1usize..6) {
        let eps = per255(eps_k);
        let m = LinearSoftmax::random(seed, 10, 3 * 6 * 6);
        let x = random_batch(seed + 1, 3, 3, 6);
        let c = GradAttackConfig { eps, step_size: eps / 3.0, n_iter, decay: 1.0 };
        for attack in GradAttack::ALL {
            for spec in [LabelSpec::Untargeted, LabelSpec::Targeted(3)] {
                let adv = attack.run(&m, &x, spec, &c).unwrap();
                prop_assert!(max_abs_diff(adv.data(), x.data()) <= eps + 1e-6);
                prop_assert!(adv.data().data().iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert_eq!(adv.labels(), x.labels());
            }
        }
    }

    #[test]
    fn sign_ignores_positive_loss_scaling(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let mut m = LinearSoftmax::random(seed, 10, 36);
        let x = random_batch(seed + 2, 2, 1, 6);
        let c = cfg(per255(2.0), 4, 1.0);
        let a = (fgsm(&m, &x, LabelSpec::Untargeted, EPS).unwrap(), ifgsm(&m, &x, LabelSpec::Untargeted, &c).unwrap());
        m.loss_scale = scale;
        let b = (fgsm(&m, &x, LabelSpec::Untargeted, EPS).unwrap(), ifgsm(&m, &x, LabelSpec::Untargeted, &c).unwrap());
        prop_assert_eq!(a.0.data(), b.0.data());
        prop_assert_eq!(a.1.data(), b.1.data());
    }

    #[test]
    fn sign_is_idempotent(v in proptest::collection::vec(-5.0f32..5.0, 1..40)) {
        let t = Tensor::new(&[v.len()], v).unwrap();
        let s = sign(&t);
        let twice = sign(&s);
        prop_assert_eq!(twice.data(), s.data());
        prop_assert!(s.data().iter().all(|x| [-1.0, 0.0, 1.0].contains(x)));
    }

    #[test]
    fn attacks_are_deterministic(seed in 0u64..1000) {
        let m = LinearSoftmax::random(seed, 10, 36);
        let x = random_batch(seed + 3, 2, 1, 6);
        for attack in GradAttack::ALL {
            let c = GradAttackConfig::default();
            let a = attack.run(&m, &x, LabelSpec::Untargeted, &c).unwrap();
            let b = attack.run(&m, &x, LabelSpec::Untargeted, &c).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }
    }
}
