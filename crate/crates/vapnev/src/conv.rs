//! Raw convolution kernels on NHWC buffers.
//!
//! Three primitives cover both directions: `conv_forward` (gather),
//! `conv_grad_input` (scatter) and `conv_grad_kernel`. Transposed
//! convolution is the scatter primitive applied forward, so the adjoint
//! identity <conv(x), y> == <x, deconv(y)> holds by construction.
//!
//! Layouts: input [N,H,W,C], kernel [kh,kw,C,F], output [N,h,w,F].

use crate::error::{Error, Result};
use crate::linalg::{gemm, gemm_a_bt, gemm_at_b};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    /// No padding; output shrinks by the kernel extent.
    Valid,
    /// Zero padding so that out = ceil(in / stride); when the total padding
    /// is odd the extra pixel goes on the bottom/right.
    Same,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub f: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn resolve(
        in_shape: &[usize],
        k_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if in_shape.len() != 4 {
            return Err(Error::shape(format!("conv input must be NHWC, got {:?}", in_shape)));
        }
        if k_shape.len() != 4 {
            return Err(Error::shape(format!("conv kernel must be [kh,kw,C,F], got {:?}", k_shape)));
        }
        if stride == 0 {
            return Err(Error::contract("stride must be >= 1".to_string()));
        }
        let (n, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (kh, kw, kc, f) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
        if kc != c {
            return Err(Error::shape(format!(
                "kernel expects {} input channels, input has {}",
                kc, c
            )));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::shape(format!(
                        "kernel {}x{} larger than input {}x{}",
                        kh, kw, h, w
                    )));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let out_h = (h + stride - 1) / stride;
                let out_w = (w + stride - 1) / stride;
                let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
                if kh > h + pad_h || kw > w + pad_w {
                    return Err(Error::shape(format!(
                        "kernel {}x{} larger than padded input",
                        kh, kw
                    )));
                }
                // floor division: odd padding puts the extra pixel bottom/right
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
        };
        Ok(ConvGeom { n, h, w, c, kh, kw, f, stride, out_h, out_w, pad_top, pad_left })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.out_h, self.out_w, self.f]
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }
}

/// Lower input patches into a [n*out_h*out_w, kh*kw*c] matrix.
fn im2col<E: Scalar>(input: &[E], g: &ConvGeom) -> Vec<E> {
    let rows = g.n * g.out_h * g.out_w;
    let cols = g.patch_len();
    let mut m = vec![E::zero(); rows * cols];
    let mut row = 0usize;
    for img in 0..g.n {
        let base = img * g.h * g.w * g.c;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut m[row * cols..(row + 1) * cols];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = base + ((iy as usize * g.w) + ix as usize) * g.c;
                        let d0 = (ky * g.kw + kx) * g.c;
                        dst[d0..d0 + g.c].copy_from_slice(&input[src..src + g.c]);
                    }
                }
                row += 1;
            }
        }
    }
    m
}

/// Scatter a [n*out_h*out_w, kh*kw*c] matrix back onto the input grid,
/// accumulating overlaps. Exact adjoint of `im2col`.
fn col2im<E: Scalar>(cols_mat: &[E], g: &ConvGeom, out: &mut [E]) {
    let cols = g.patch_len();
    let mut row = 0usize;
    for img in 0..g.n {
        let base = img * g.h * g.w * g.c;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src_row = &cols_mat[row * cols..(row + 1) * cols];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = base + ((iy as usize * g.w) + ix as usize) * g.c;
                        let s0 = (ky * g.kw + kx) * g.c;
                        for ch in 0..g.c {
                            out[dst + ch] += src_row[s0 + ch];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// out[n,oy,ox,f] = sum_{ky,kx,c} in[n, oy*s+ky-pt, ox*s+kx-pl, c] * k[ky,kx,c,f]
pub fn conv_forward<E: Scalar>(input: &[E], kernel: &[E], g: &ConvGeom) -> Vec<E> {
    let cols = im2col(input, g);
    let rows = g.n * g.out_h * g.out_w;
    let mut out = vec![E::zero(); rows * g.f];
    gemm(&cols, kernel, &mut out, rows, g.patch_len(), g.f);
    out
}

/// Gradient w.r.t. the convolution input; also the forward pass of the
/// transposed convolution.
pub fn conv_grad_input<E: Scalar>(out_grad: &[E], kernel: &[E], g: &ConvGeom) -> Vec<E> {
    let rows = g.n * g.out_h * g.out_w;
    let mut cols_mat = vec![E::zero(); rows * g.patch_len()];
    // d(cols) = gout * K^T
    gemm_a_bt(out_grad, kernel, &mut cols_mat, rows, g.patch_len(), g.f);
    let mut din = vec![E::zero(); g.n * g.h * g.w * g.c];
    col2im(&cols_mat, g, &mut din);
    din
}

/// Gradient w.r.t. the kernel.
pub fn conv_grad_kernel<E: Scalar>(input: &[E], out_grad: &[E], g: &ConvGeom) -> Vec<E> {
    let cols = im2col(input, g);
    let rows = g.n * g.out_h * g.out_w;
    let mut dk = vec![E::zero(); g.patch_len() * g.f];
    gemm_at_b(&cols, out_grad, &mut dk, rows, g.patch_len(), g.f);
    dk
}

/// Geometry of a transposed convolution: input [N,h,w,F], kernel
/// [kh,kw,C,F], output [N,(h-1)*s+kh,(w-1)*s+kw,C]. Expressed as the conv
/// whose input-gradient it is.
pub fn deconv_geom(in_shape: &[usize], k_shape: &[usize], stride: usize) -> Result<ConvGeom> {
    if in_shape.len() != 4 || k_shape.len() != 4 {
        return Err(Error::shape(format!(
            "deconv expects NHWC input and [kh,kw,C,F] kernel, got {:?} / {:?}",
            in_shape, k_shape
        )));
    }
    if stride == 0 {
        return Err(Error::contract("stride must be >= 1".to_string()));
    }
    let (n, h, w, f_in) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (kh, kw, c, f) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
    if f != f_in {
        return Err(Error::shape(format!(
            "deconv kernel expects {} input channels, input has {}",
            f, f_in
        )));
    }
    let big_h = (h - 1) * stride + kh;
    let big_w = (w - 1) * stride + kw;
    Ok(ConvGeom {
        n,
        h: big_h,
        w: big_w,
        c,
        kh,
        kw,
        f,
        stride,
        out_h: h,
        out_w: w,
        pad_top: 0,
        pad_left: 0,
    })
}
