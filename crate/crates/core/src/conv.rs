//! 2-D convolution kernels: cross-correlation, its transpose, and the
//! kernel-gradient needed to train transposed convolutions.
//!
//! Both directions are lowered onto one batched matrix product
//! (im2col / col2im), so the 64-bit accumulation contract of
//! [`Tensor::matmul`] carries over to every convolution.
//!
//! Layout conventions (identical memory layout lets one kernel tensor serve
//! both directions, making `conv_transpose2d(·, k)` the exact adjoint of
//! `conv2d(·, k)`):
//! - `conv2d` kernel: `[F_out, C_in, kh, kw]`
//! - `conv_transpose2d` kernel: `[C_in, F_out, kh, kw]`

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, Tensor};
use rayon::prelude::*;

struct ConvGeom {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
}

fn conv2d_geom<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let geom_err = |reason| Error::ConvGeometry {
        input: input.shape().to_vec(),
        kernel: kernel.shape().to_vec(),
        stride,
        pad,
        reason,
    };
    if input.rank() != 4 || kernel.rank() != 4 {
        return Err(geom_err("conv2d operates on rank-4 tensors"));
    }
    if stride == 0 {
        return Err(geom_err("stride must be positive"));
    }
    let (n, c, h, w) = dims4(input);
    let (f, kc, kh, kw) = dims4(kernel);
    if kc != c {
        return Err(geom_err("kernel channel count does not match input"));
    }
    let span_h = h + 2 * pad;
    let span_w = w + 2 * pad;
    if kh > span_h || kw > span_w {
        return Err(geom_err("kernel larger than padded input"));
    }
    if (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
        return Err(geom_err("non-integral output extent"));
    }
    Ok(ConvGeom {
        batch: n,
        in_ch: c,
        in_h: h,
        in_w: w,
        out_ch: f,
        kh,
        kw,
        out_h: (span_h - kh) / stride + 1,
        out_w: (span_w - kw) / stride + 1,
    })
}

fn conv_transpose2d_geom<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let geom_err = |reason| Error::ConvGeometry {
        input: input.shape().to_vec(),
        kernel: kernel.shape().to_vec(),
        stride,
        pad,
        reason,
    };
    if input.rank() != 4 || kernel.rank() != 4 {
        return Err(geom_err("conv_transpose2d operates on rank-4 tensors"));
    }
    if stride == 0 {
        return Err(geom_err("stride must be positive"));
    }
    let (n, c, h, w) = dims4(input);
    let (kc, f, kh, kw) = dims4(kernel);
    if kc != c {
        return Err(geom_err("kernel channel count does not match input"));
    }
    let out_h = ((h - 1) * stride + kh) as isize - 2 * pad as isize;
    let out_w = ((w - 1) * stride + kw) as isize - 2 * pad as isize;
    if out_h <= 0 || out_w <= 0 {
        return Err(geom_err("non-positive output extent"));
    }
    Ok(ConvGeom {
        batch: n,
        in_ch: c,
        in_h: h,
        in_w: w,
        out_ch: f,
        kh,
        kw,
        out_h: out_h as usize,
        out_w: out_w as usize,
    })
}

fn dims4<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

/// Gathers padded input patches: `cols[(c,ky,kx), (n,oy,ox)]`.
fn im2col<T: Scalar>(input: &Tensor<T>, g: &ConvGeom, stride: usize, pad: usize) -> Vec<T> {
    let (h, w) = (g.in_h, g.in_w);
    let (out_h, out_w) = (g.out_h, g.out_w);
    let cols_w = g.batch * out_h * out_w;
    let mut cols = vec![T::zero(); g.in_ch * g.kh * g.kw * cols_w];
    let data = input.data();
    cols.par_chunks_mut(cols_w).enumerate().for_each(|(r, row)| {
        let kx = r % g.kw;
        let ky = (r / g.kw) % g.kh;
        let c = r / (g.kw * g.kh);
        for n in 0..g.batch {
            let src_plane = &data[(n * g.in_ch + c) * h * w..(n * g.in_ch + c + 1) * h * w];
            let dst_plane = &mut row[n * out_h * out_w..(n + 1) * out_h * out_w];
            for oy in 0..out_h {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for ox in 0..out_w {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    dst_plane[oy * out_w + ox] = src_plane[iy as usize * w + ix as usize];
                }
            }
        }
    });
    cols
}

/// Standard strided cross-correlation with zero padding.
///
/// `input [N,C,H,W]`, `kernel [F,C,kh,kw]` -> `[N,F,H',W']` with
/// `H' = (H + 2·pad - kh)/stride + 1`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv2d_geom(input, kernel, stride, pad)?;
    let cols = im2col(input, &g, stride, pad);
    let ckk = g.in_ch * g.kh * g.kw;
    let cols_w = g.batch * g.out_h * g.out_w;
    // out_all[f, (n,oy,ox)] = kernel[f,:] · cols[:, (n,oy,ox)]
    let mut out_all = vec![T::zero(); g.out_ch * cols_w];
    matmul_into(kernel.data(), &cols, g.out_ch, ckk, cols_w, &mut out_all);
    let plane = g.out_h * g.out_w;
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    for n in 0..g.batch {
        for f in 0..g.out_ch {
            let src = &out_all[f * cols_w + n * plane..f * cols_w + (n + 1) * plane];
            out[(n * g.out_ch + f) * plane..(n * g.out_ch + f + 1) * plane].copy_from_slice(src);
        }
    }
    Tensor::from_vec(&[g.batch, g.out_ch, g.out_h, g.out_w], out)
}

/// Transposed convolution (the adjoint of [`conv2d`] under the Frobenius
/// inner product): every input pixel scatters a kernel-weighted stamp into
/// the output.
///
/// `input [N,C,H,W]`, `kernel [C,F,kh,kw]` -> `[N,F,H',W']` with
/// `H' = (H - 1)·stride - 2·pad + kh`.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_transpose2d_geom(input, kernel, stride, pad)?;
    let hw = g.in_h * g.in_w;
    let rows = g.batch * hw;
    // a[(n,iy,ix), c] = input[n,c,iy,ix]
    let mut a = vec![T::zero(); rows * g.in_ch];
    let data = input.data();
    for n in 0..g.batch {
        for c in 0..g.in_ch {
            let plane = &data[(n * g.in_ch + c) * hw..(n * g.in_ch + c + 1) * hw];
            for (p, &v) in plane.iter().enumerate() {
                a[(n * hw + p) * g.in_ch + c] = v;
            }
        }
    }
    let fkk = g.out_ch * g.kh * g.kw;
    let mut cols = vec![T::zero(); rows * fkk];
    matmul_into(&a, kernel.data(), rows, g.in_ch, fkk, &mut cols);
    // col2im scatter, each sample written independently.
    let out_plane = g.out_h * g.out_w;
    let mut out = vec![T::zero(); g.batch * g.out_ch * out_plane];
    out.par_chunks_mut(g.out_ch * out_plane)
        .enumerate()
        .for_each(|(n, out_sample)| {
            for iy in 0..g.in_h {
                for ix in 0..g.in_w {
                    let col = &cols[(n * hw + iy * g.in_w + ix) * fkk..(n * hw + iy * g.in_w + ix + 1) * fkk];
                    for f in 0..g.out_ch {
                        for ky in 0..g.kh {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= g.out_h as isize {
                                continue;
                            }
                            for kx in 0..g.kw {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= g.out_w as isize {
                                    continue;
                                }
                                out_sample[f * out_plane + oy as usize * g.out_w + ox as usize] +=
                                    col[f * g.kh * g.kw + ky * g.kw + kx];
                            }
                        }
                    }
                }
            }
        });
    Tensor::from_vec(&[g.batch, g.out_ch, g.out_h, g.out_w], out)
}

/// Gradient of [`conv_transpose2d`] with respect to its kernel.
///
/// `input` and `grad_out` are the forward input `[N,C,H,W]` and the gradient
/// at the forward output `[N,F,H',W']`; the result has the kernel's shape
/// `[C,F,kh,kw]`.
pub fn conv_transpose2d_kernel_grad<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernel_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if kernel_shape.len() != 4 {
        return Err(Error::InvalidShape {
            op: "conv_transpose2d_kernel_grad",
            shape: kernel_shape.to_vec(),
            reason: "kernel shape must have rank 4",
        });
    }
    let kernel_probe = Tensor::<T>::zeros(kernel_shape);
    let g = conv_transpose2d_geom(input, &kernel_probe, stride, pad)?;
    let expect = [g.batch, g.out_ch, g.out_h, g.out_w];
    if grad_out.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d_kernel_grad",
            left: grad_out.shape().to_vec(),
            right: expect.to_vec(),
        });
    }
    let hw = g.in_h * g.in_w;
    let rows = g.batch * hw;
    let fkk = g.out_ch * g.kh * g.kw;
    // colsg[(n,iy,ix), (f,ky,kx)] = grad_out[n,f,iy·s+ky-p, ix·s+kx-p]
    let mut colsg = vec![T::zero(); rows * fkk];
    let gdata = grad_out.data();
    let out_plane = g.out_h * g.out_w;
    colsg.par_chunks_mut(fkk).enumerate().for_each(|(r, row)| {
        let n = r / hw;
        let iy = (r % hw) / g.in_w;
        let ix = r % g.in_w;
        for f in 0..g.out_ch {
            let gplane = &gdata[(n * g.out_ch + f) * out_plane..(n * g.out_ch + f + 1) * out_plane];
            for ky in 0..g.kh {
                let oy = (iy * stride + ky) as isize - pad as isize;
                if oy < 0 || oy >= g.out_h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ox = (ix * stride + kx) as isize - pad as isize;
                    if ox < 0 || ox >= g.out_w as isize {
                        continue;
                    }
                    row[f * g.kh * g.kw + ky * g.kw + kx] =
                        gplane[oy as usize * g.out_w + ox as usize];
                }
            }
        }
    });
    // x_all[c, (n,iy,ix)] = input[n,c,iy,ix]
    let mut x_all = vec![T::zero(); g.in_ch * rows];
    let xdata = input.data();
    for n in 0..g.batch {
        for c in 0..g.in_ch {
            let plane = &xdata[(n * g.in_ch + c) * hw..(n * g.in_ch + c + 1) * hw];
            x_all[c * rows + n * hw..c * rows + (n + 1) * hw].copy_from_slice(plane);
        }
    }
    let mut grad = vec![T::zero(); g.in_ch * fkk];
    matmul_into(&x_all, &colsg, g.in_ch, rows, fkk, &mut grad);
    Tensor::from_vec(kernel_shape, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_kernel_doubles_input() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0f32]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), x.scale(2.0).data());
    }

    #[test]
    fn counting_kernel() {
        let x = Tensor::<f32>::ones(&[1, 1, 4, 4]);
        let k = Tensor::<f32>::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &k, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn non_integral_output_rejected() {
        let x = Tensor::<f32>::ones(&[1, 1, 5, 5]);
        let k = Tensor::<f32>::ones(&[1, 1, 2, 2]);
        assert!(matches!(
            conv2d(&x, &k, 2, 0),
            Err(Error::ConvGeometry { .. })
        ));
    }

    #[test]
    fn single_pixel_scatter_is_cropped_kernel() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0f32]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 4, 4], (1..=16).map(|v| v as f32).collect()).unwrap();
        let y = conv_transpose2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // pad 1 crops one ring off the 4x4 stamp: rows 1..3, cols 1..3
        assert_eq!(y.data(), &[6.0, 7.0, 10.0, 11.0]);
    }

    #[test]
    fn zeros_in_zeros_out() {
        let x = Tensor::<f32>::zeros(&[2, 3, 4, 4]);
        let k = Tensor::<f32>::ones(&[3, 2, 4, 4]);
        let y = conv_transpose2d(&x, &k, 2, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_positive_output_rejected() {
        let x = Tensor::<f32>::ones(&[1, 1, 1, 1]);
        let k = Tensor::<f32>::ones(&[1, 1, 2, 2]);
        assert!(matches!(
            conv_transpose2d(&x, &k, 1, 1),
            Err(Error::ConvGeometry { .. })
        ));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::<f32>::ones(&[1, 3, 4, 4]);
        let k = Tensor::<f32>::ones(&[2, 2, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1, 1), Err(Error::ConvGeometry { .. })));
    }
}
