//! n-D convolution (spatial rank 2 or 3) via im2col + GEMM.
//!
//! Layout: input `[C_in, spatial...]`, kernels `[C_out, C_in, k...]`,
//! output `[C_out, spatial'...]`. "Same" padding is zero-padding.

use std::sync::Arc;

use super::{numel_of, Tensor};
use crate::error::{FireError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output extent is `ceil(in / stride)`.
    Same,
    /// No padding; kernel stays fully inside the input.
    Valid,
}

#[derive(Clone)]
struct ConvGeometry {
    rank: usize,
    c_in: usize,
    c_out: usize,
    in_sp: Vec<usize>,
    k_sp: Vec<usize>,
    out_sp: Vec<usize>,
    pad: Vec<usize>,
    stride: usize,
}

impl ConvGeometry {
    fn k_prod(&self) -> usize {
        numel_of(&self.k_sp)
    }
    fn out_prod(&self) -> usize {
        numel_of(&self.out_sp)
    }
    fn in_prod(&self) -> usize {
        numel_of(&self.in_sp)
    }
}

fn geometry<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    if stride == 0 {
        return Err(FireError::InvalidArgument("conv_nd: stride must be >= 1".into()));
    }
    let ish = input.shape();
    let ksh = kernels.shape();
    if ish.len() < 3 || ksh.len() != ish.len() + 1 || ksh[1] != ish[0] {
        return Err(FireError::ShapeMismatch {
            op: "conv_nd",
            lhs: ish.to_vec(),
            rhs: ksh.to_vec(),
        });
    }
    let rank = ish.len() - 1;
    if rank != 2 && rank != 3 {
        return Err(FireError::InvalidShape {
            op: "conv_nd",
            shape: ish.to_vec(),
            reason: "supported spatial ranks are 2 and 3".into(),
        });
    }
    let in_sp = ish[1..].to_vec();
    let k_sp = ksh[2..].to_vec();
    let mut out_sp = vec![0usize; rank];
    let mut pad = vec![0usize; rank];
    for a in 0..rank {
        match padding {
            Padding::Same => {
                out_sp[a] = in_sp[a].div_ceil(stride);
                let total =
                    ((out_sp[a] - 1) * stride + k_sp[a]).saturating_sub(in_sp[a]);
                pad[a] = total / 2;
            }
            Padding::Valid => {
                if in_sp[a] < k_sp[a] {
                    return Err(FireError::InvalidShape {
                        op: "conv_nd",
                        shape: ish.to_vec(),
                        reason: format!("input smaller than kernel {k_sp:?} with valid padding"),
                    });
                }
                out_sp[a] = (in_sp[a] - k_sp[a]) / stride + 1;
            }
        }
    }
    Ok(ConvGeometry {
        rank,
        c_in: ish[0],
        c_out: ksh[0],
        in_sp,
        k_sp,
        out_sp,
        pad,
        stride,
    })
}

/// Fill one im2col row segment along the innermost axis.
///
/// `dst` has `w_out` entries; source positions are `ox*stride + kx - pad`.
#[inline]
fn fill_inner_axis<S: Scalar>(
    dst: &mut [S],
    src_row: &[S],
    w_out: usize,
    stride: usize,
    kx: usize,
    pad: usize,
) {
    let w_in = src_row.len();
    if stride == 1 {
        let shift = kx as isize - pad as isize;
        let lo = (-shift).max(0).min(w_out as isize) as usize;
        let hi = (w_in as isize - shift).clamp(0, w_out as isize) as usize;
        if hi <= lo {
            dst.fill(S::zero());
            return;
        }
        dst[..lo].fill(S::zero());
        dst[hi..].fill(S::zero());
        let s0 = (lo as isize + shift) as usize;
        dst[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
    } else {
        for (ox, d) in dst.iter_mut().enumerate().take(w_out) {
            let ix = (ox * stride + kx) as isize - pad as isize;
            *d = if ix >= 0 && (ix as usize) < w_in {
                src_row[ix as usize]
            } else {
                S::zero()
            };
        }
    }
}

/// Scatter-add transpose of [`fill_inner_axis`].
#[inline]
fn scatter_inner_axis<S: Scalar>(
    src: &[S],
    dst_row: &mut [S],
    w_out: usize,
    stride: usize,
    kx: usize,
    pad: usize,
) {
    let w_in = dst_row.len();
    for (ox, v) in src.iter().enumerate().take(w_out) {
        let ix = (ox * stride + kx) as isize - pad as isize;
        if ix >= 0 && (ix as usize) < w_in {
            dst_row[ix as usize] += *v;
        }
    }
}

/// Lower the input into the `[C_in * prod(k), prod(out)]` column matrix.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeometry, cols: &mut [S]) {
    let o_num = g.out_prod();
    match g.rank {
        2 => {
            let (h, w) = (g.in_sp[0], g.in_sp[1]);
            let (kh, kw) = (g.k_sp[0], g.k_sp[1]);
            let (ho, wo) = (g.out_sp[0], g.out_sp[1]);
            for ci in 0..g.c_in {
                let chan = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row0 = ((ci * kh + ky) * kw + kx) * o_num;
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad[0] as isize;
                            let dst = &mut cols[row0 + oy * wo..row0 + (oy + 1) * wo];
                            if iy < 0 || iy as usize >= h {
                                dst.fill(S::zero());
                            } else {
                                let src_row = &chan[iy as usize * w..(iy as usize + 1) * w];
                                fill_inner_axis(dst, src_row, wo, g.stride, kx, g.pad[1]);
                            }
                        }
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (g.in_sp[0], g.in_sp[1], g.in_sp[2]);
            let (kd, kh, kw) = (g.k_sp[0], g.k_sp[1], g.k_sp[2]);
            let (do_, ho, wo) = (g.out_sp[0], g.out_sp[1], g.out_sp[2]);
            for ci in 0..g.c_in {
                let chan = &x[ci * d * h * w..(ci + 1) * d * h * w];
                for kz in 0..kd {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let row0 = (((ci * kd + kz) * kh + ky) * kw + kx) * o_num;
                            for oz in 0..do_ {
                                let iz = (oz * g.stride + kz) as isize - g.pad[0] as isize;
                                for oy in 0..ho {
                                    let base = row0 + (oz * ho + oy) * wo;
                                    let dst = &mut cols[base..base + wo];
                                    let iy =
                                        (oy * g.stride + ky) as isize - g.pad[1] as isize;
                                    if iz < 0
                                        || iz as usize >= d
                                        || iy < 0
                                        || iy as usize >= h
                                    {
                                        dst.fill(S::zero());
                                    } else {
                                        let off = (iz as usize * h + iy as usize) * w;
                                        let src_row = &chan[off..off + w];
                                        fill_inner_axis(
                                            dst, src_row, wo, g.stride, kx, g.pad[2],
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

/// Transpose of [`im2col`]: accumulates column gradients back onto the input.
fn col2im<S: Scalar>(cols: &[S], g: &ConvGeometry, dx: &mut [S]) {
    let o_num = g.out_prod();
    match g.rank {
        2 => {
            let (h, w) = (g.in_sp[0], g.in_sp[1]);
            let (kh, kw) = (g.k_sp[0], g.k_sp[1]);
            let (ho, wo) = (g.out_sp[0], g.out_sp[1]);
            for ci in 0..g.c_in {
                let chan = &mut dx[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row0 = ((ci * kh + ky) * kw + kx) * o_num;
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad[0] as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let src = &cols[row0 + oy * wo..row0 + (oy + 1) * wo];
                            let dst_row = &mut chan[iy as usize * w..(iy as usize + 1) * w];
                            scatter_inner_axis(src, dst_row, wo, g.stride, kx, g.pad[1]);
                        }
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (g.in_sp[0], g.in_sp[1], g.in_sp[2]);
            let (kd, kh, kw) = (g.k_sp[0], g.k_sp[1], g.k_sp[2]);
            let (do_, ho, wo) = (g.out_sp[0], g.out_sp[1], g.out_sp[2]);
            for ci in 0..g.c_in {
                let chan = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
                for kz in 0..kd {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let row0 = (((ci * kd + kz) * kh + ky) * kw + kx) * o_num;
                            for oz in 0..do_ {
                                let iz = (oz * g.stride + kz) as isize - g.pad[0] as isize;
                                if iz < 0 || iz as usize >= d {
                                    continue;
                                }
                                for oy in 0..ho {
                                    let iy =
                                        (oy * g.stride + ky) as isize - g.pad[1] as isize;
                                    if iy < 0 || iy as usize >= h {
                                        continue;
                                    }
                                    let base = row0 + (oz * ho + oy) * wo;
                                    let src = &cols[base..base + wo];
                                    let off = (iz as usize * h + iy as usize) * w;
                                    let dst_row = &mut chan[off..off + w];
                                    scatter_inner_axis(
                                        src, dst_row, wo, g.stride, kx, g.pad[2],
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

impl<S: Scalar> Tensor<S> {
    /// n-D convolution of `[C_in, spatial...]` with kernels
    /// `[C_out, C_in, k...]`; differentiable w.r.t. input and kernels.
    pub fn conv_nd(
        &self,
        kernels: &Tensor<S>,
        stride: usize,
        padding: Padding,
    ) -> Result<Tensor<S>> {
        let geo = geometry(self, kernels, stride, padding)?;
        let k_rows = geo.c_in * geo.k_prod();
        let o_num = geo.out_prod();

        // A 1x1 stride-1 convolution reads the input matrix directly.
        let pointwise = geo.k_prod() == 1 && geo.stride == 1;
        let cols: Arc<Vec<S>> = if pointwise {
            self.data_arc()
        } else {
            let mut cols = vec![S::zero(); k_rows * o_num];
            im2col(self.data(), &geo, &mut cols);
            Arc::new(cols)
        };

        let mut out = vec![S::zero(); geo.c_out * o_num];
        unsafe {
            S::gemm(
                geo.c_out,
                k_rows,
                o_num,
                S::one(),
                kernels.data().as_ptr(),
                k_rows as isize,
                1,
                cols.as_ptr(),
                o_num as isize,
                1,
                S::zero(),
                out.as_mut_ptr(),
                o_num as isize,
                1,
            );
        }

        let mut out_shape = vec![geo.c_out];
        out_shape.extend_from_slice(&geo.out_sp);

        let w = kernels.data_arc();
        Tensor::from_op("conv_nd", out_shape, out, &[self, kernels], {
            let geo = geo.clone();
            move |g_out, needs| {
                let dx = needs[0].then(|| {
                    // d_cols = W^T @ g_out, then scatter back onto the input.
                    let mut cg = vec![S::zero(); k_rows * o_num];
                    unsafe {
                        S::gemm(
                            k_rows,
                            geo.c_out,
                            o_num,
                            S::one(),
                            w.as_ptr(),
                            1,
                            k_rows as isize,
                            g_out.as_ptr(),
                            o_num as isize,
                            1,
                            S::zero(),
                            cg.as_mut_ptr(),
                            o_num as isize,
                            1,
                        );
                    }
                    if pointwise {
                        cg
                    } else {
                        let mut dx = vec![S::zero(); geo.c_in * geo.in_prod()];
                        col2im(&cg, &geo, &mut dx);
                        dx
                    }
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![S::zero(); geo.c_out * k_rows];
                    unsafe {
                        S::gemm(
                            geo.c_out,
                            o_num,
                            k_rows,
                            S::one(),
                            g_out.as_ptr(),
                            o_num as isize,
                            1,
                            cols.as_ptr(),
                            1,
                            o_num as isize,
                            S::zero(),
                            dw.as_mut_ptr(),
                            k_rows as isize,
                            1,
                        );
                    }
                    dw
                });
                vec![dx, dw]
            }
        })
    }
}

/// Residual block parameters: two same-padded convolutions of equal width.
#[derive(Clone)]
pub struct ResBlockParams<S: Scalar> {
    pub w1: Tensor<S>,
    pub w2: Tensor<S>,
}

/// CycleGAN-style residual block:
/// `x + IN(conv(act(IN(conv(x)))))`, shape-preserving.
pub fn resnet_block<S: Scalar>(
    input: &Tensor<S>,
    params: &ResBlockParams<S>,
    activation: super::ops::Activation,
    eps: f64,
) -> Result<Tensor<S>> {
    let width = input.shape()[0];
    if params.w1.shape()[1] != width || params.w1.shape()[0] != width {
        return Err(FireError::ShapeMismatch {
            op: "resnet_block",
            lhs: params.w1.shape().to_vec(),
            rhs: input.shape().to_vec(),
        });
    }
    let y = input.conv_nd(&params.w1, 1, Padding::Same)?;
    let y = y.instance_norm(eps)?;
    let y = y.activation(activation);
    let y = y.conv_nd(&params.w2, 1, Padding::Same)?;
    let y = y.instance_norm(eps)?;
    input.add(&y)
}

/// Keeps closures `Send + Sync` when capturing shared input buffers.
#[allow(dead_code)]
fn assert_send_sync<T: Send + Sync>(_: &T) {}
#[allow(dead_code)]
fn _check<S: Scalar>(a: &Arc<Vec<S>>) {
    assert_send_sync(a);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::<f64>::new(
            &[1, 5, 5],
            (0..25).map(|i| i as f64 * 0.13 - 1.0).collect(),
        )
        .unwrap();
        let k = Tensor::<f64>::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = x.conv_nd(&k, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn one_hot_centered_kernel_is_identity() {
        let x = Tensor::<f64>::new(
            &[1, 6, 6],
            (0..36).map(|i| (i as f64).sin()).collect(),
        )
        .unwrap();
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = Tensor::<f64>::new(&[1, 1, 3, 3], kd).unwrap();
        let y = x.conv_nd(&k, 1, Padding::Same).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn paper_scale_output_shape() {
        let x = Tensor::<f32>::zeros(&[1, 64, 64]);
        let k = Tensor::<f32>::zeros(&[64, 1, 7, 7]);
        let y = x.conv_nd(&k, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[64, 64, 64]);
    }

    #[test]
    fn all_ones_valid_conv_sums_window() {
        let x = Tensor::<f64>::full(&[1, 8, 8], 1.0);
        let k = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = x.conv_nd(&k, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 6, 6]);
        assert!(y.data().iter().all(|v| *v == 9.0));
    }

    #[test]
    fn stride_two_downsamples() {
        let x = Tensor::<f32>::zeros(&[3, 32, 32]);
        let k = Tensor::<f32>::zeros(&[8, 3, 3, 3]);
        let y = x.conv_nd(&k, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[8, 16, 16]);
    }

    #[test]
    fn conv3d_shapes() {
        let x = Tensor::<f32>::zeros(&[2, 8, 8, 8]);
        let k = Tensor::<f32>::zeros(&[4, 2, 3, 3, 3]);
        let y = x.conv_nd(&k, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[4, 4, 4, 4]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f32>::zeros(&[2, 8, 8]);
        let k = Tensor::<f32>::zeros(&[4, 3, 3, 3]);
        let err = x.conv_nd(&k, 1, Padding::Same).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 8, 8]") && msg.contains("[4, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let x = Tensor::<f64>::new(&[2, 4, 4], (0..32).map(|i| i as f64 * 0.1).collect()).unwrap();
        let p = ResBlockParams {
            w1: Tensor::zeros(&[2, 2, 3, 3]),
            w2: Tensor::zeros(&[2, 2, 3, 3]),
        };
        let y = resnet_block(&x, &p, crate::tensor::Activation::Relu, 1e-5).unwrap();
        assert_eq!(y.data(), x.data());
    }
}
