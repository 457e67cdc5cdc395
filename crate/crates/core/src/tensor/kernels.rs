//! Forward and backward kernels on raw NCHW buffers.
//!
//! These are the tape-free building blocks; [`Tape`](super::Tape) records which
//! of them ran and replays the backward halves. Convolutions lower to GEMM via
//! im2col.

use super::Scalar;

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output columns `ox` whose input column `ox*stride + k - padding` is in range.
    fn valid_cols(&self, k: usize) -> (usize, usize) {
        let (s, p, ow) = (self.stride as isize, self.padding as isize, self.out_width() as isize);
        let k = k as isize;
        let lo = ((p - k).max(0) + s - 1) / s;
        let hi = ((self.width as isize - 1 + p - k).div_euclid(s) + 1).clamp(0, ow);
        (lo.min(hi) as usize, hi as usize)
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let src = &x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize || lo >= hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let ix0 = lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&srow[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (o, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = srow[ix0 + o * g.stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let dst = &mut dx[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize || lo >= hi {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * ow..(oy + 1) * ow];
                    let ix0 = lo * g.stride + kj - g.padding;
                    for (o, v) in line[lo..hi].iter().enumerate() {
                        drow[ix0 + o * g.stride] = drow[ix0 + o * g.stride] + *v;
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * plane;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * plane]
    };
    for b in 0..g.batch {
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        for (co, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        let xb = &x[b * in_len..(b + 1) * in_len];
        let rhs = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        T::gemm(
            g.out_channels,
            g.patch_len(),
            plane,
            kernel,
            false,
            rhs,
            false,
            T::one(),
            dst,
        );
    }
    out
}

/// Gradients of a convolution. Each requested buffer is accumulated into
/// (not overwritten), so callers pass zeroed or partially accumulated slots.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    kernel: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dkernel: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * plane;
    let patch = g.patch_len();
    if let Some(db) = dbias {
        for b in 0..g.batch {
            for co in 0..g.out_channels {
                let s: T = dout[b * out_len + co * plane..b * out_len + (co + 1) * plane]
                    .iter()
                    .copied()
                    .sum();
                db[co] = db[co] + s;
            }
        }
    }
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    if let Some(dk) = dkernel {
        for b in 0..g.batch {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let rhs = if pointwise {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            let dy = &dout[b * out_len..(b + 1) * out_len];
            // dK (Cout x P) += dY (Cout x HW) * cols^T (HW x P)
            T::gemm(g.out_channels, plane, patch, dy, false, rhs, true, T::one(), dk);
        }
    }
    if let Some(dx) = dx {
        for b in 0..g.batch {
            let dy = &dout[b * out_len..(b + 1) * out_len];
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                T::gemm(patch, g.out_channels, plane, kernel, true, dy, false, T::one(), dxb);
            } else {
                T::gemm(
                    patch,
                    g.out_channels,
                    plane,
                    kernel,
                    true,
                    dy,
                    false,
                    T::zero(),
                    &mut cols,
                );
                col2im_add(g, &cols, dxb);
            }
        }
    }
}

/// 2x2 / stride-2 max pooling. Returns the pooled values and, per output
/// element, the flat input index of the winning element. Ties go to the
/// first element in row-major window order.
pub fn maxpool2x2_forward<T: Scalar>(
    x: &[T],
    batch_channels: usize,
    height: usize,
    width: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(batch_channels * oh * ow);
    let mut argmax = Vec::with_capacity(batch_channels * oh * ow);
    for p in 0..batch_channels {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * width + 2 * ox;
                let candidates = [top, top + 1, top + width, top + width + 1];
                let mut best = candidates[0];
                for &c in &candidates[1..] {
                    if x[c] > x[best] {
                        best = c;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
}

/// Stride-2 transposed convolution with a `[Cin, Cout, 2, 2]` kernel. Each
/// input pixel scatters into its own 2x2 output block, so windows never overlap.
pub fn transposed_conv2x2_forward<T: Scalar>(g: &UpGeometry, x: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.height * g.width;
    let (oh, ow) = (2 * g.height, 2 * g.width);
    let rows = g.out_channels * 4;
    let mut cols = vec![T::zero(); rows * plane];
    let mut out = vec![T::zero(); g.batch * g.out_channels * oh * ow];
    for b in 0..g.batch {
        let xb = &x[b * g.in_channels * plane..(b + 1) * g.in_channels * plane];
        // cols (Cout*4 x HW) = K^T (Cout*4 x Cin) * X (Cin x HW)
        T::gemm(
            rows,
            g.in_channels,
            plane,
            kernel,
            true,
            xb,
            false,
            T::zero(),
            &mut cols,
        );
        let ob = &mut out[b * g.out_channels * oh * ow..(b + 1) * g.out_channels * oh * ow];
        for co in 0..g.out_channels {
            for a in 0..2 {
                for c in 0..2 {
                    let src = &cols[(co * 4 + a * 2 + c) * plane..(co * 4 + a * 2 + c + 1) * plane];
                    for i in 0..g.height {
                        let orow = co * oh * ow + (2 * i + a) * ow + c;
                        for j in 0..g.width {
                            ob[orow + 2 * j] = src[i * g.width + j] + bias[co];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn transposed_conv2x2_backward<T: Scalar>(
    g: &UpGeometry,
    x: &[T],
    kernel: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dkernel: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let plane = g.height * g.width;
    let (oh, ow) = (2 * g.height, 2 * g.width);
    let rows = g.out_channels * 4;
    let out_len = g.out_channels * oh * ow;
    let in_len = g.in_channels * plane;
    if let Some(db) = dbias {
        for b in 0..g.batch {
            for co in 0..g.out_channels {
                let start = b * out_len + co * oh * ow;
                let s: T = dout[start..start + oh * ow].iter().copied().sum();
                db[co] = db[co] + s;
            }
        }
    }
    if dx.is_none() && dkernel.is_none() {
        return;
    }
    let mut dcols = vec![T::zero(); rows * plane];
    let mut dx = dx;
    let mut dkernel = dkernel;
    for b in 0..g.batch {
        let db = &dout[b * out_len..(b + 1) * out_len];
        for co in 0..g.out_channels {
            for a in 0..2 {
                for c in 0..2 {
                    let dst = &mut dcols[(co * 4 + a * 2 + c) * plane..(co * 4 + a * 2 + c + 1) * plane];
                    for i in 0..g.height {
                        let orow = co * oh * ow + (2 * i + a) * ow + c;
                        for j in 0..g.width {
                            dst[i * g.width + j] = db[orow + 2 * j];
                        }
                    }
                }
            }
        }
        let xb = &x[b * in_len..(b + 1) * in_len];
        if let Some(dk) = dkernel.as_deref_mut() {
            // dK (Cin x Cout*4) += X (Cin x HW) * dcols^T (HW x Cout*4)
            T::gemm(g.in_channels, plane, rows, xb, false, &dcols, true, T::one(), dk);
        }
        if let Some(dxa) = dx.as_deref_mut() {
            // dX (Cin x HW) += K (Cin x Cout*4) * dcols (Cout*4 x HW)
            T::gemm(
                g.in_channels,
                rows,
                plane,
                kernel,
                false,
                &dcols,
                false,
                T::one(),
                &mut dxa[b * in_len..(b + 1) * in_len],
            );
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
