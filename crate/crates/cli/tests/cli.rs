use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn odeadv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odeadv")).args(args).env_remove("ODEADV_DATA_DIR").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn idx(dir: &Path, stem: &str, n: usize, r: &mut ChaCha8Rng) {
    let mut img = Vec::new();
    for v in [2051u32, n as u32, 28, 28] {
        img.extend(v.to_be_bytes());
    }
    img.extend((0..n * 784).map(|_| r.gen::<u8>()));
    let mut lab = Vec::new();
    for v in [2049u32, n as u32] {
        lab.extend(v.to_be_bytes());
    }
    lab.extend((0..n).map(|i| (i % 10) as u8));
    std::fs::write(dir.join(format!("{stem}-images-idx3-ubyte")), img).unwrap();
    std::fs::write(dir.join(format!("{stem}-labels-idx1-ubyte")), lab).unwrap();
}

/// A 40/20 image IDX fixture with labels cycling through the classes.
fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    idx(dir.path(), "train", 40, &mut r);
    idx(dir.path(), "t10k", 20, &mut r);
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&odeadv(&["no-such-command"])), 2);
    assert_eq!(code(&odeadv(&["attack", "--model", "m.ckpt", "--bogus"])), 2);
    assert_eq!(code(&odeadv(&[])), 2);
    assert_eq!(code(&odeadv(&["--help"])), 0);
}

#[test]
fn missing_data_exits_3() {
    let out_dir = tempfile::tempdir().unwrap();
    let out = odeadv(&["train-classifier", "--data-dir", "/nonexistent/fmnist", "-o", s(out_dir.path())]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-images-idx3-ubyte"));
}

#[test]
fn invalid_configs_are_rejected() {
    let data = fixture();
    let out_dir = tempfile::tempdir().unwrap();
    let out = odeadv(&["train-classifier", "--data-dir", s(data.path()), "--eps", "2", "-o", s(out_dir.path())]);
    // Out-of-range flag values are usage errors.
    assert_eq!(code(&out), 2);
    let bad = out_dir.path().join("bad.toml");
    for text in ["no_such_key = 1\n", "[budget]\neps_test = 2.0\neps_train = 0.05\n"] {
        std::fs::write(&bad, text).unwrap();
        let out =
            odeadv(&["train-classifier", "--config", s(&bad), "--data-dir", s(data.path()), "-o", s(out_dir.path())]);
        assert_eq!(code(&out), 1, "{text}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn end_to_end_on_a_tiny_fixture() {
    let data = fixture();
    let work = tempfile::tempdir().unwrap();
    let cls = work.path().join("cls");
    let out = odeadv(&[
        "train-classifier",
        "--arch",
        "smallcnn_a",
        "--epochs",
        "1",
        "--data-dir",
        s(data.path()),
        "-o",
        s(&cls),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["smallcnn_a.ckpt", "accuracy.csv", "config.toml", "run.log", "classifier_log.csv"] {
        assert!(cls.join(f).exists(), "{f} missing");
    }
    let snap = std::fs::read_to_string(cls.join("config.toml")).unwrap();
    assert!(snap.contains("subset_size = \"full\"") && snap.contains("test_size = \"full\""), "{snap}");
    let ckpt = cls.join("smallcnn_a.ckpt");

    let atk = work.path().join("attack");
    let out = odeadv(&[
        "attack",
        "--model",
        s(&ckpt),
        "--method",
        "fgsm",
        "--grid",
        "--data-dir",
        s(data.path()),
        "--test-size",
        "20",
        "-o",
        s(&atk),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval = std::fs::read_to_string(atk.join("eval.csv")).unwrap();
    assert!(eval.starts_with("attack,source,target,mode,target_class,asr,psnr,ssim,time_s,n,whitebox_flag"));
    assert!(eval.lines().nth(1).unwrap().starts_with("fgsm,smallcnn_a,smallcnn_a,untargeted,,"));
    let grid = image::open(atk.join("grid.png")).unwrap();
    assert!(grid.width() > 300 && grid.width() == grid.height());

    // Re-running from the snapshot reproduces the configuration.
    let again = work.path().join("again");
    let snap = atk.join("config.toml");
    let out = odeadv(&["attack", "--config", s(&snap), "--model", s(&ckpt), "--method", "fgsm", "-o", s(&again)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let strip = |p: &Path| {
        let mut v: toml::Table = std::fs::read_to_string(p).unwrap().parse().unwrap();
        v.remove("output_dir");
        v
    };
    assert_eq!(strip(&snap), strip(&again.join("config.toml")));
    assert_eq!(
        std::fs::read_to_string(again.join("eval.csv"))
            .unwrap()
            .lines()
            .nth(1)
            .map(|l| l.split(',').take(6).collect::<Vec<_>>()),
        eval.lines().nth(1).map(|l| l.split(',').take(6).collect::<Vec<_>>())
    );

    let gan = work.path().join("gan");
    let out = odeadv(&[
        "train-advgan",
        "--source",
        s(&ckpt),
        "--epochs",
        "1",
        "--subset-size",
        "8",
        "--test-size",
        "10",
        "--data-dir",
        s(data.path()),
        "-o",
        s(&gan),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(gan.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(gan.join("generator.ckpt").exists() && gan.join("train_summary.csv").exists());
    let eval = std::fs::read_to_string(gan.join("eval.csv")).unwrap();
    assert!(eval.lines().nth(1).unwrap().starts_with("node-advgan,"), "{eval}");
}
