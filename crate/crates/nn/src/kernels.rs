//! Raw convolution and pooling kernels on NCHW buffers. No autodiff here;
//! `graph` wires these into forward/backward passes.

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution over an `h×w` image.
    pub fn conv(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= kernel && w + 2 * pad >= kernel, "kernel larger than padded input");
        Self {
            channels,
            height: h,
            width: w,
            kernel,
            stride,
            pad,
            out_h: (h + 2 * pad - kernel) / stride + 1,
            out_w: (w + 2 * pad - kernel) / stride + 1,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one `C×H×W` image into a `(C·k·k) × (out_h·out_w)` patch matrix.
pub fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let k = g.kernel;
    let n_out = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * n_out);
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let shift = kx as isize - g.pad as isize;
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize + shift;
                            *d = if ix >= 0 && ix < g.width as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix >= 0 && ix < g.width as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate a patch matrix back into an image.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let k = g.kernel;
    let n_out = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Bin `[start, end)` of adaptive average pooling for output index `i`.
#[inline]
pub fn pool_bin(i: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = i * in_len / out_len;
    let end = ((i + 1) * in_len).div_ceil(out_len);
    (start, end)
}

pub fn adaptive_avg_pool<T: Real>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = pool_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = pool_bin(ox, w, ow);
                let mut acc = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += src[y * w + xx];
                    }
                }
                out[(p * oh + oy) * ow + ox] = acc / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward<T: Real>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = pool_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = pool_bin(ox, w, ow);
                let share = dy[(p * oh + oy) * ow + ox] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dst[y * w + xx] += share;
                    }
                }
            }
        }
    }
}
