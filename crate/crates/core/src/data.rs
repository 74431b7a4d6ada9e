//! Dataset readers (IDX and CIFAR-10 binary), resizing and augmentation.

use std::path::{Path, PathBuf};

use odeadv_autograd::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ImageBatch;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const CIFAR_RECORD: usize = 3073;

/// How 28×28 images are brought to 32×32.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resize {
    #[default]
    Bilinear,
    ZeroPad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Fmnist,
    Cifar10,
}

pub struct Split {
    pub train: ImageBatch,
    pub test: ImageBatch,
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), offset, msg: msg.into() }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(path, at, "truncated header"))
}

/// Decodes an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(path, 0, format!("bad image magic {magic}, expected {IDX_IMAGES_MAGIC}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() != need {
        return Err(parse_err(path, bytes.len().min(need), format!("expected {need} bytes, file has {}", bytes.len())));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(path, 0, format!("bad label magic {magic}, expected {IDX_LABELS_MAGIC}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(parse_err(
            path,
            bytes.len().min(8 + n),
            format!("expected {} bytes, file has {}", 8 + n, bytes.len()),
        ));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Bilinear resampling with half-pixel centers (edges clamped).
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
        }
    }
    out
}

fn zero_pad(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let (top, left) = ((oh - h) / 2, (ow - w) / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..h {
        out[(y + top) * ow + left..][..w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

fn load_idx_pair(images: &Path, labels: &Path, resize: Resize) -> Result<ImageBatch> {
    let (n, rows, cols, px) = parse_idx_images(&read(images)?, images)?;
    let y = parse_idx_labels(&read(labels)?, labels)?;
    if y.len() != n {
        return Err(parse_err(labels, 4, format!("{} labels for {n} images", y.len())));
    }
    if rows > 32 || cols > 32 {
        return Err(parse_err(images, 8, format!("{rows}x{cols} images exceed 32x32")));
    }
    let mut data = Vec::with_capacity(n * 1024);
    let mut img = vec![0f32; rows * cols];
    for chunk in px.chunks(rows * cols) {
        img.iter_mut().zip(chunk).for_each(|(d, &b)| *d = b as f32 / 255.0);
        data.extend(match resize {
            Resize::Bilinear => resize_bilinear(&img, rows, cols, 32, 32),
            Resize::ZeroPad => zero_pad(&img, rows, cols, 32, 32),
        });
    }
    ImageBatch::new(Tensor::new(&[n, 1, 32, 32], data)?, Some(y))
}

pub const FMNIST_FILES: [&str; 4] =
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];

/// Fashion-MNIST from the four uncompressed IDX files in `dir`.
pub fn load_fmnist(dir: &Path, resize: Resize) -> Result<Split> {
    let f = |i: usize| dir.join(FMNIST_FILES[i]);
    Ok(Split { train: load_idx_pair(&f(0), &f(1), resize)?, test: load_idx_pair(&f(2), &f(3), resize)? })
}

/// Decodes one CIFAR-10 binary batch file.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<ImageBatch> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(parse_err(
            path,
            bytes.len() - bytes.len() % CIFAR_RECORD,
            format!("size {} is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(parse_err(path, i * CIFAR_RECORD, format!("label byte {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    ImageBatch::new(Tensor::new(&[n, 3, 32, 32], data)?, Some(labels))
}

pub fn cifar_files(dir: &Path) -> (Vec<PathBuf>, PathBuf) {
    ((1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(), dir.join("test_batch.bin"))
}

/// CIFAR-10 from `data_batch_{1..5}.bin` and `test_batch.bin` in `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Split> {
    let (train_files, test_file) = cifar_files(dir);
    let parts = train_files.iter().map(|p| parse_cifar_batch(&read(p)?, p)).collect::<Result<Vec<_>>>()?;
    Ok(Split { train: ImageBatch::concat(&parts)?, test: parse_cifar_batch(&read(&test_file)?, &test_file)? })
}

pub fn load(dataset: Dataset, dir: &Path, resize: Resize) -> Result<Split> {
    match dataset {
        Dataset::Fmnist => load_fmnist(dir, resize),
        Dataset::Cifar10 => load_cifar10(dir),
    }
}

/// Zero-pads every image by `pad` pixels and crops back to the original size
/// at a random offset per image.
pub fn pad_crop<R: Rng>(x: &Tensor<f32>, pad: usize, rng: &mut R) -> Result<Tensor<f32>> {
    let (b, c, h, w) = x.dims4()?;
    let mut out = Tensor::zeros(x.shape());
    for n in 0..b {
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        for ch in 0..c {
            let base = (n * c + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        out.data_mut()[base + y * w + xx] = x.data()[base + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn constant_survives_resize() {
        let img = vec![0.37f32; 28 * 28];
        assert!(resize_bilinear(&img, 28, 28, 32, 32).iter().all(|&v| (v - 0.37).abs() < 1e-6));
        let padded = zero_pad(&img, 28, 28, 32, 32);
        assert_eq!(padded.iter().filter(|&&v| v == 0.0).count(), 32 * 32 - 28 * 28);
    }

    #[test]
    fn idx_headers() {
        let p = Path::new("mem");
        let mut ok = 2051u32.to_be_bytes().to_vec();
        ok.extend(1u32.to_be_bytes());
        ok.extend(2u32.to_be_bytes());
        ok.extend(2u32.to_be_bytes());
        ok.extend([0, 255, 128, 7]);
        let (n, r, c, px) = parse_idx_images(&ok, p).unwrap();
        assert_eq!((n, r, c, px.len()), (1, 2, 2, 4));
        let mut bad = ok.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad, p), Err(Error::Parse { offset: 0, .. })));
        assert!(parse_idx_images(&ok[..18], p).is_err());
        assert!(parse_idx_labels(&ok, p).is_err());
    }

    #[test]
    fn cifar_records() {
        let p = Path::new("mem");
        let mut rec = vec![3u8];
        rec.extend([255u8; 3072]);
        let b = parse_cifar_batch(&rec, p).unwrap();
        assert_eq!(b.labels(), Some(&[3][..]));
        assert!(b.data().data().iter().all(|&v| v == 1.0));
        assert!(parse_cifar_batch(&rec[..3000], p).is_err());
    }

    #[test]
    fn crop_with_zero_pad_keeps_shape() {
        let x = Tensor::full(&[3, 1, 5, 5], 1.0f32);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let y = pad_crop(&x, 2, &mut rng).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(pad_crop(&x, 0, &mut rng).unwrap() == x);
    }
}
