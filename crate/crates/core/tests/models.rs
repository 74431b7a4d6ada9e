mod common;

use common::{random_batch, rng};
use odeadv::autograd::{Graph, Mode, ParamSet};
use odeadv::checkpoint::{self, Kind};
use odeadv::models::{attack_loss, train_classifier, ClassifierTrainConfig};
use odeadv::training::Discriminator;
use odeadv::{
    AdvGanConfig, AdvGanGenerator, Arch, Classifier, ClassifierSpec, Generator, LabelSpec, NodeConfig, NodeGenerator,
    TargetModel, Tensor, VectorFieldConfig,
};
use rand::Rng;

fn spec(arch: Arch, c: usize) -> ClassifierSpec {
    ClassifierSpec { arch, in_channels: c, num_classes: 10 }
}

/// A model with non-trivial normalization and batch-norm statistics.
fn model(arch: Arch, c: usize, seed: u64) -> TargetModel {
    let mut m = TargetModel::new(spec(arch, c), seed).unwrap();
    m.norm_mean = (0..c).map(|i| 0.2 + 0.1 * i as f32).collect();
    m.norm_std = (0..c).map(|i| 0.3 + 0.05 * i as f32).collect();
    let mut r = rng(seed);
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        let name = m.params.entries()[id.index()].name.clone();
        if name.ends_with("running_mean") || name.ends_with("running_var") {
            for v in m.params.get_mut(id).data_mut() {
                *v = if name.ends_with("var") { r.gen_range(0.5..2.0) } else { r.gen_range(-0.3..0.3) };
            }
        }
    }
    m
}

#[test]
fn logits_shape_and_duplicates() {
    for arch in Arch::ALL {
        for c in [1, 3] {
            let m = model(arch, c, 1);
            let x = random_batch(2, 3, c, 32);
            let dup = x.select(&[0, 1, 0]);
            let l = m.logits(dup.data()).unwrap();
            assert_eq!(l.shape(), &[3, 10]);
            assert_eq!(l.row(0), l.row(2), "{arch}");
        }
    }
}

#[test]
fn normalization_is_folded_into_the_model() {
    for arch in Arch::ALL {
        let m = model(arch, 3, 3);
        let mut plain = model(arch, 3, 3);
        plain.norm_mean = vec![0.0; 3];
        plain.norm_std = vec![1.0; 3];
        let x = random_batch(4, 4, 3, 32);
        let normalized = Tensor::from_fn(x.data().shape(), |i| {
            let ch = (i / 1024) % 3;
            (x.data().data()[i] - m.norm_mean[ch]) / m.norm_std[ch]
        });
        let a = m.logits(x.data()).unwrap();
        let b = plain.logits(&normalized).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-5 * (1.0 + v.abs()), "{arch}: {u} vs {v}");
        }
    }
}

fn loss_f64(m: &TargetModel, ps: &ParamSet<f64>, x: &Tensor<f64>, y: &[usize], spec: LabelSpec) -> f64 {
    let mut g = Graph::new();
    let p = ps.bind(&mut g, false);
    let xi = g.constant(x.clone());
    let l = m.forward(&mut g, ps, &p, xi, Mode::Eval).unwrap();
    let j = attack_loss(&mut g, l, Some(y), spec).unwrap();
    g.value(j).item()
}

#[test]
fn input_gradient_matches_central_differences() {
    let mut r = rng(5);
    for arch in Arch::ALL {
        let m = model(arch, 1, 6);
        let ps: ParamSet<f64> = m.params.cast();
        let batch = random_batch(7, 2, 1, 32);
        let x: Tensor<f64> = batch.data().cast();
        let y = batch.labels().unwrap().to_vec();
        for spec in [LabelSpec::Untargeted, LabelSpec::Targeted(3)] {
            let grad = m.loss_grad_with(&ps, &x, Some(&y), spec).unwrap();
            let grad32 = m.loss_grad(&batch, spec).unwrap();
            for _ in 0..8 {
                let i = r.gen_range(0..x.len());
                let h = 1e-6;
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut q = x.clone();
                q.data_mut()[i] -= h;
                let numeric = (loss_f64(&m, &ps, &p, &y, spec) - loss_f64(&m, &ps, &q, &y, spec)) / (2.0 * h);
                let a = grad.data()[i];
                let scale = a.abs().max(numeric.abs()).max(1e-6);
                assert!((a - numeric).abs() / scale < 1e-3, "{arch} pixel {i}: {a} vs {numeric}");
                assert!((grad32.data()[i] as f64 - a).abs() / scale < 1e-3, "{arch} f32 path at pixel {i}");
            }
        }
    }
}

#[test]
fn constant_model_has_zero_gradient() {
    let mut m = TargetModel::new(spec(Arch::SmallcnnA, 1), 1).unwrap();
    let ids: Vec<_> = m.params.trainable_ids().collect();
    for id in ids {
        m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let g = m.loss_grad(&random_batch(1, 2, 1, 32), LabelSpec::Untargeted).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let x = random_batch(8, 3, 1, 32);
    for arch in Arch::ALL {
        let mut m = model(arch, 1, 9);
        m.clean_accuracy = Some(0.9);
        let p = dir.path().join(format!("{arch}.ckpt"));
        m.save(&p).unwrap();
        let back = TargetModel::load(&p).unwrap();
        assert_eq!(back.logits(x.data()).unwrap().data(), m.logits(x.data()).unwrap().data());
        assert_eq!((back.norm_mean, back.norm_std, back.clean_accuracy), (m.norm_mean, m.norm_std, m.clean_accuracy));
    }

    let mut node = NodeGenerator::new(VectorFieldConfig::new(1), NodeConfig { horizon: 0.05, steps: 3 }, 2).unwrap();
    node.set_eps_train(10.0 / 255.0);
    let p = dir.path().join("node.ckpt");
    node.save(&p).unwrap();
    let back = NodeGenerator::load(&p).unwrap();
    assert_eq!(back.node_cfg, node.node_cfg);
    assert_eq!(back.eps_train, Some(10.0 / 255.0));
    let raw = |g: &NodeGenerator| odeadv::generate_raw(g, x.data()).unwrap();
    assert_eq!(raw(&back).data(), raw(&node).data());
    assert!(AdvGanGenerator::load(&p).is_err());
    assert!(TargetModel::load(&p).is_err());

    let adv = AdvGanGenerator::new(AdvGanConfig { in_channels: 1, res_blocks: 2 }, 3);
    let p = dir.path().join("advgan.ckpt");
    Generator::save(&adv, &p).unwrap();
    let back = AdvGanGenerator::load(&p).unwrap();
    assert_eq!(
        odeadv::generate_raw(&back, x.data()).unwrap().data(),
        odeadv::generate_raw(&adv, x.data()).unwrap().data()
    );
    assert!(NodeGenerator::load(&p).is_err());

    let d = Discriminator::new(1, 4).unwrap();
    let p = dir.path().join("d.ckpt");
    d.save(&p).unwrap();
    assert_eq!(Discriminator::load(&p).unwrap().score(x.data()).unwrap(), d.score(x.data()).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    model(Arch::SmallcnnA, 1, 1).save(&p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    std::fs::write(&p, &bad).unwrap();
    assert!(TargetModel::load(&p).is_err());
    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(TargetModel::load(&p).is_err());
    checkpoint::save(&p, Kind::Classifier, &7u32).unwrap();
    assert!(TargetModel::load(&p).is_err());
    assert!(TargetModel::load(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn discriminator_geometry() {
    let d = Discriminator::new(3, 1).unwrap();
    let s = d.score(&Tensor::full(&[4, 3, 32, 32], 0.3)).unwrap();
    assert_eq!(s.len(), 4);
    assert!(s.iter().all(|v| *v > 0.0 && *v < 1.0 && *v == s[0]));
}

#[test]
fn classifier_training_is_seeded() {
    let train = random_batch(10, 48, 1, 32);
    let test = random_batch(11, 20, 1, 32);
    let cfg = ClassifierTrainConfig { epochs: 1, batch_size: 16, lr: 1e-3, seed: 4, accuracy_floor: 0.0 };
    let run = || {
        let mut losses = Vec::new();
        let m = train_classifier(spec(Arch::SmallcnnB, 1), &train, &test, &cfg, |_, l| losses.push(l)).unwrap();
        (m.clean_accuracy, losses, m.logits(test.data()).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2.data(), b.2.data());
    let zero = ClassifierTrainConfig { epochs: 0, ..cfg };
    assert!(train_classifier(spec(Arch::SmallcnnA, 1), &train, &test, &zero, |_, _| {}).is_err());
}
