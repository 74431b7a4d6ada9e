//! 8-bit PNG dumps of image batches laid out on a grid.

use std::path::Path;

use anyhow::{bail, Context};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use odeadv::ImageBatch;

/// Pixels of background between tiles.
pub const GAP: u32 = 2;

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `images` row-major into a `rows`×`cols` grid.
pub fn write_grid(path: &Path, images: &ImageBatch, rows: usize, cols: usize) -> anyhow::Result<()> {
    if images.len() != rows * cols {
        bail!("grid of {rows}x{cols} needs {} images, got {}", rows * cols, images.len());
    }
    let (_, c, h, w) = images.data().dims4()?;
    let (h32, w32) = (h as u32, w as u32);
    let width = cols as u32 * (w32 + GAP) + GAP;
    let height = rows as u32 * (h32 + GAP) + GAP;
    let px =
        |i: usize, ch: usize, y: u32, x: u32| images.data().data()[((i * c + ch) * h + y as usize) * w + x as usize];
    let origin = |i: usize| (GAP + (i % cols) as u32 * (w32 + GAP), GAP + (i / cols) as u32 * (h32 + GAP));
    let res = match c {
        1 => {
            let mut img: GrayImage = ImageBuffer::from_pixel(width, height, Luma([255]));
            for i in 0..images.len() {
                let (ox, oy) = origin(i);
                for y in 0..h32 {
                    for x in 0..w32 {
                        img.put_pixel(ox + x, oy + y, Luma([to_u8(px(i, 0, y, x))]));
                    }
                }
            }
            img.save(path)
        }
        3 => {
            let mut img: RgbImage = ImageBuffer::from_pixel(width, height, Rgb([255, 255, 255]));
            for i in 0..images.len() {
                let (ox, oy) = origin(i);
                for y in 0..h32 {
                    for x in 0..w32 {
                        img.put_pixel(ox + x, oy + y, Rgb([0, 1, 2].map(|ch| to_u8(px(i, ch, y, x)))));
                    }
                }
            }
            img.save(path)
        }
        _ => bail!("cannot render {c} channels"),
    };
    res.with_context(|| format!("writing {}", path.display()))
}
