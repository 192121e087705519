//! im2col / col2im kernels behind the `conv2d` graph op.

use super::scalar::{gemm, Scalar};

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// `None` when the kernel does not fit the padded input.
    pub fn new(c_in: usize, h: usize, w: usize, kernel: usize, stride: usize, padding: usize) -> Option<Self> {
        if kernel == 0 || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            kernel,
            stride,
            padding,
            out_h: (h + 2 * padding - kernel) / stride + 1,
            out_w: (w + 2 * padding - kernel) / stride + 1,
        })
    }

    /// Rows of the unfolded matrix, `c_in·k²`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfold one `[c_in, h, w]` image into a `[c_in·k², out_h·out_w]` matrix.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    if g.is_pointwise() {
        return input.to_vec();
    }
    let k = g.kernel;
    let l = g.out_len();
    let mut col = vec![T::zero(); g.patch_len() * l];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * l..(row + 1) * l];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Fold a column-gradient matrix back onto an image gradient (accumulating).
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, out: &mut [T]) {
    if g.is_pointwise() {
        for (o, &c) in out.iter_mut().zip(col) {
            *o += c;
        }
        return;
    }
    let k = g.kernel;
    let l = g.out_len();
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * l..(row + 1) * l];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a whole batch. Returns the output and the per-sample
/// unfolded inputs for reuse in backward.
pub fn conv_forward<T: Scalar>(
    input: &[T],
    batch: usize,
    weight: &[T],
    c_out: usize,
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> (Vec<T>, Vec<Vec<T>>) {
    let in_len = g.c_in * g.h * g.w;
    let l = g.out_len();
    let kk = g.patch_len();
    let mut out = vec![T::zero(); batch * c_out * l];
    let mut cols = Vec::with_capacity(batch);
    for n in 0..batch {
        let col = im2col(&input[n * in_len..(n + 1) * in_len], g);
        let dst = &mut out[n * c_out * l..(n + 1) * c_out * l];
        gemm(c_out, kk, l, weight, false, &col, false, dst, false);
        if let Some(b) = bias {
            for (oc, &bv) in b.iter().enumerate() {
                dst[oc * l..(oc + 1) * l].iter_mut().for_each(|v| *v += bv);
            }
        }
        cols.push(col);
    }
    (out, cols)
}

/// Gradients for input, weight and bias, each present when requested.
pub type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

/// Gradients of a batch convolution. Any of the three outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    grad_out: &[T],
    batch: usize,
    weight: &[T],
    c_out: usize,
    cols: &[Vec<T>],
    g: &ConvGeometry,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let in_len = g.c_in * g.h * g.w;
    let l = g.out_len();
    let kk = g.patch_len();
    let mut dx = want_input.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = want_weight.then(|| vec![T::zero(); c_out * kk]);
    let mut db = want_bias.then(|| vec![T::zero(); c_out]);
    let mut dcol = if want_input {
        vec![T::zero(); kk * l]
    } else {
        Vec::new()
    };
    for n in 0..batch {
        let dy = &grad_out[n * c_out * l..(n + 1) * c_out * l];
        if let Some(dw) = dw.as_mut() {
            gemm(c_out, l, kk, dy, false, &cols[n], true, dw, true);
        }
        if let Some(db) = db.as_mut() {
            for (oc, d) in db.iter_mut().enumerate() {
                *d += dy[oc * l..(oc + 1) * l].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(kk, c_out, l, weight, true, dy, false, &mut dcol, false);
            col2im(&dcol, g, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    (dx, dw, db)
}
