//! im2col convolution kernels (forward and both backward products).
//!
//! Each image is lowered to a `(C·kh·kw) × (Ho·Wo)` column matrix and
//! multiplied against the `(Co) × (C·kh·kw)` weight matrix. Columns are not
//! cached between forward and backward; the backward pass re-lowers the input.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::par;
use crate::scalar::{matmul, Scalar};

/// Images handled per work item. Fixed so that weight-gradient partial sums
/// are reduced in the same order regardless of thread count.
const GROUP: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1 }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self { stride, padding, dilation }
    }

    /// Output extent along one axis, or `None` if the kernel does not fit.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        if self.stride == 0 || self.dilation == 0 || kernel == 0 {
            return None;
        }
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.padding).checked_sub(span).map(|v| v / self.stride + 1)
    }
}

/// Shapes of one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub geom: ConvGeometry,
}

impl ConvShape {
    pub fn infer(x: &[usize], w: &[usize], geom: ConvGeometry) -> Result<Self> {
        let (&[batch, in_c, in_h, in_w], &[out_c, w_in, k_h, k_w]) = (x, w) else {
            return Err(TensorError::Geometry(format!("conv2d expects rank-4 input and weight, got {x:?} and {w:?}")));
        };
        if w_in != in_c {
            return Err(TensorError::Geometry(format!(
                "conv2d weight expects {w_in} input channels, input has {in_c}"
            )));
        }
        let (Some(out_h), Some(out_w)) = (geom.out_len(in_h, k_h), geom.out_len(in_w, k_w)) else {
            return Err(TensorError::Geometry(format!(
                "kernel {k_h}x{k_w} with {geom:?} does not fit input {in_h}x{in_w}"
            )));
        };
        Ok(Self { batch, in_c, in_h, in_w, out_c, k_h, k_w, out_h, out_w, geom })
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn out_image(&self) -> usize {
        self.out_c * self.out_plane()
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_c, self.out_h, self.out_w]
    }
}

/// Valid output-column range `[lo, hi)` for kernel tap offset `off` when
/// `stride == 1`.
#[inline]
fn valid_span(off: isize, in_w: usize, out_w: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = ((in_w as isize - off).max(0) as usize).min(out_w);
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], s: &ConvShape, cols: &mut [T]) {
    let g = s.geom;
    let plane = s.out_plane();
    for ci in 0..s.in_c {
        let src_c = &x[ci * s.in_h * s.in_w..(ci + 1) * s.in_h * s.in_w];
        for ky in 0..s.k_h {
            for kx in 0..s.k_w {
                let row = (ci * s.k_h + ky) * s.k_w + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let off_x = (kx * g.dilation) as isize - g.padding as isize;
                for oy in 0..s.out_h {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let drow = &mut dst[oy * s.out_w..(oy + 1) * s.out_w];
                    if iy < 0 || iy >= s.in_h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &src_c[iy as usize * s.in_w..(iy as usize + 1) * s.in_w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(off_x, s.in_w, s.out_w);
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        let a = (lo as isize + off_x) as usize;
                        drow[lo..hi].copy_from_slice(&src[a..a + (hi - lo)]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + off_x;
                            *d = if ix >= 0 && ix < s.in_w as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into an image (adjoint of `im2col`).
fn col2im<T: Scalar>(cols: &[T], s: &ConvShape, x: &mut [T]) {
    let g = s.geom;
    let plane = s.out_plane();
    x.fill(T::zero());
    for ci in 0..s.in_c {
        let dst_c = &mut x[ci * s.in_h * s.in_w..(ci + 1) * s.in_h * s.in_w];
        for ky in 0..s.k_h {
            for kx in 0..s.k_w {
                let row = (ci * s.k_h + ky) * s.k_w + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let off_x = (kx * g.dilation) as isize - g.padding as isize;
                for oy in 0..s.out_h {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= s.in_h as isize {
                        continue;
                    }
                    let srow = &src[oy * s.out_w..(oy + 1) * s.out_w];
                    let drow = &mut dst_c[iy as usize * s.in_w..(iy as usize + 1) * s.in_w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(off_x, s.in_w, s.out_w);
                        let a = (lo as isize + off_x) as usize;
                        for (d, &v) in drow[a..a + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = (ox * g.stride) as isize + off_x;
                            if ix >= 0 && ix < s.in_w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, s: &ConvShape) -> Vec<T> {
    let mut out = vec![T::zero(); s.batch * s.out_image()];
    let (k, plane, img_out, img_in) = (s.col_rows(), s.out_plane(), s.out_image(), s.in_image());
    par::for_each_chunk_mut(&mut out, GROUP * img_out, |gi, chunk| {
        let mut cols = vec![T::zero(); k * plane];
        for (j, y) in chunk.chunks_mut(img_out).enumerate() {
            let b = gi * GROUP + j;
            im2col(&x[b * img_in..(b + 1) * img_in], s, &mut cols);
            matmul(s.out_c, k, plane, w, false, &cols, false, y, false);
            if let Some(bias) = bias {
                for (row, &bv) in y.chunks_mut(plane).zip(bias) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
    });
    out
}

/// Gradient w.r.t. the input image batch.
pub fn conv2d_backward_input<T: Scalar>(dy: &[T], w: &[T], s: &ConvShape) -> Vec<T> {
    let mut dx = vec![T::zero(); s.batch * s.in_image()];
    let (k, plane, img_out, img_in) = (s.col_rows(), s.out_plane(), s.out_image(), s.in_image());
    par::for_each_chunk_mut(&mut dx, GROUP * img_in, |gi, chunk| {
        let mut dcols = vec![T::zero(); k * plane];
        for (j, dxi) in chunk.chunks_mut(img_in).enumerate() {
            let b = gi * GROUP + j;
            matmul(k, s.out_c, plane, w, true, &dy[b * img_out..(b + 1) * img_out], false, &mut dcols, false);
            col2im(&dcols, s, dxi);
        }
    });
    dx
}

/// Gradient w.r.t. the weight tensor.
pub fn conv2d_backward_weight<T: Scalar>(dy: &[T], x: &[T], s: &ConvShape) -> Vec<T> {
    let (k, plane, img_out, img_in) = (s.col_rows(), s.out_plane(), s.out_image(), s.in_image());
    let groups = s.batch.div_ceil(GROUP);
    let partials = par::map_range(groups, |gi| {
        let mut cols = vec![T::zero(); k * plane];
        let mut dw = vec![T::zero(); s.out_c * k];
        for b in gi * GROUP..((gi + 1) * GROUP).min(s.batch) {
            im2col(&x[b * img_in..(b + 1) * img_in], s, &mut cols);
            matmul(s.out_c, plane, k, &dy[b * img_out..(b + 1) * img_out], false, &cols, true, &mut dw, true);
        }
        dw
    });
    let mut total = vec![T::zero(); s.out_c * k];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Gradient w.r.t. the bias vector.
pub fn conv2d_backward_bias<T: Scalar>(dy: &[T], s: &ConvShape) -> Vec<T> {
    let plane = s.out_plane();
    let mut db = vec![T::zero(); s.out_c];
    for img in dy.chunks(s.out_image()) {
        for (d, row) in db.iter_mut().zip(img.chunks(plane)) {
            *d += row.iter().copied().sum::<T>();
        }
    }
    db
}
