//! Cross-correlation via im2col + GEMM.

use alloc::vec;
use alloc::vec::Vec;

use super::{Scalar, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: [usize; 4], kernel: [usize; 4], stride: usize, pad: usize) -> Result<Self, TensorError> {
        let [batch, in_ch, height, width] = input;
        let [out_ch, k_in, kh, kw] = kernel;
        if k_in != in_ch {
            return Err(TensorError::Dimension {
                op: "conv2d",
                axis: "kernel I vs input C",
                expected: in_ch,
                found: k_in,
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        if height + 2 * pad < kh {
            return Err(TensorError::Dimension {
                op: "conv2d",
                axis: "H (padded) vs KH",
                expected: kh,
                found: height + 2 * pad,
            });
        }
        if width + 2 * pad < kw {
            return Err(TensorError::Dimension {
                op: "conv2d",
                axis: "W (padded) vs KW",
                expected: kw,
                found: width + 2 * pad,
            });
        }
        Ok(Self {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    /// 1×1, stride 1, no padding: the image itself is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox·stride + kx − pad` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi_excl = (self.width + self.pad).saturating_sub(kx).div_ceil(self.stride);
        let hi = hi_excl.min(self.out_w);
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, image: &[T], col: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.in_ch {
            let src = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * self.width..(iy as usize + 1) * self.width];
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        if lo < hi {
                            let ix0 = lo * self.stride + kx - self.pad;
                            if self.stride == 1 {
                                drow[lo..hi].copy_from_slice(&srow[ix0..ix0 + hi - lo]);
                            } else {
                                for (d, s) in drow[lo..hi].iter_mut().zip(srow[ix0..].iter().step_by(self.stride)) {
                                    *d = *s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, col: &[T], image: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.in_ch {
            let dst = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    let ix0 = lo * self.stride + kx - self.pad;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * self.width..(iy as usize + 1) * self.width];
                        let srow = &src[oy * self.out_w + lo..oy * self.out_w + hi];
                        if self.stride == 1 {
                            drow[ix0..ix0 + hi - lo]
                                .iter_mut()
                                .zip(srow)
                                .for_each(|(d, &v)| *d += v);
                        } else {
                            for (d, &v) in drow[ix0..].iter_mut().step_by(self.stride).zip(srow) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, input: &[T], kernel: &[T]) -> Vec<T> {
        let plane = self.out_plane();
        let patch = self.patch();
        let mut out = vec![T::zero(); self.batch * self.out_ch * plane];
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); patch * plane]
        };
        for b in 0..self.batch {
            let image = &input[b * self.in_image()..(b + 1) * self.in_image()];
            let cols: &[T] = if self.is_pointwise() {
                image
            } else {
                self.im2col(image, &mut col);
                &col
            };
            let dst = &mut out[b * self.out_ch * plane..(b + 1) * self.out_ch * plane];
            T::gemm(
                self.out_ch,
                patch,
                plane,
                T::one(),
                kernel,
                patch as isize,
                1,
                cols,
                plane as isize,
                1,
                T::zero(),
                dst,
                plane as isize,
                1,
            );
        }
        out
    }

    /// Accumulates input and kernel gradients for upstream gradient `grad_out`.
    pub fn backward<T: Scalar>(
        &self,
        input: &[T],
        kernel: &[T],
        grad_out: &[T],
        grad_input: Option<&mut [T]>,
        grad_kernel: Option<&mut [T]>,
    ) {
        let plane = self.out_plane();
        let patch = self.patch();
        let mut col = vec![T::zero(); if self.is_pointwise() { 0 } else { patch * plane }];
        let mut dcol = vec![T::zero(); patch * plane];
        let mut grad_input = grad_input;
        let mut grad_kernel = grad_kernel;
        for b in 0..self.batch {
            let gy = &grad_out[b * self.out_ch * plane..(b + 1) * self.out_ch * plane];
            if let Some(gk) = grad_kernel.as_deref_mut() {
                let image = &input[b * self.in_image()..(b + 1) * self.in_image()];
                let cols: &[T] = if self.is_pointwise() {
                    image
                } else {
                    self.im2col(image, &mut col);
                    &col
                };
                // dK (O×P) += dY (O×N) · colᵀ (N×P)
                T::gemm(
                    self.out_ch,
                    plane,
                    patch,
                    T::one(),
                    gy,
                    plane as isize,
                    1,
                    cols,
                    1,
                    plane as isize,
                    T::one(),
                    gk,
                    patch as isize,
                    1,
                );
            }
            if let Some(gx) = grad_input.as_deref_mut() {
                // dcol (P×N) = Kᵀ (P×O) · dY (O×N)
                T::gemm(
                    patch,
                    self.out_ch,
                    plane,
                    T::one(),
                    kernel,
                    1,
                    patch as isize,
                    gy,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    plane as isize,
                    1,
                );
                let dst = &mut gx[b * self.in_image()..(b + 1) * self.in_image()];
                if self.is_pointwise() {
                    dst.iter_mut().zip(&dcol).for_each(|(d, &s)| *d += s);
                } else {
                    self.col2im_add(&dcol, dst);
                }
            }
        }
    }
}
