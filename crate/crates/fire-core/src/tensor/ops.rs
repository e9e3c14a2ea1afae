//! Differentiable tensor operations (everything except convolution).

use std::sync::Arc;

use super::{ensure_same_shape, numel_of, strides_of, Tensor};
use crate::error::{FireError, Result};
use crate::scalar::{s, Scalar};

/// Pointwise nonlinearity selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Tanh,
    Relu,
    /// Negative-side slope.
    LeakyRelu(f64),
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        ensure_same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a + *b)
            .collect();
        Tensor::from_op("add", self.shape().to_vec(), data, &[self, other], {
            move |g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.to_vec()),
                ]
            }
        })
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        ensure_same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a - *b)
            .collect();
        Tensor::from_op("sub", self.shape().to_vec(), data, &[self, other], {
            move |g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|v| -*v).collect()),
                ]
            }
        })
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        ensure_same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a * *b)
            .collect();
        let a = self.data_arc();
        let b = other.data_arc();
        Tensor::from_op("mul", self.shape().to_vec(), data, &[self, other], {
            move |g, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(b.iter()).map(|(g, b)| *g * *b).collect()),
                    needs[1].then(|| g.iter().zip(a.iter()).map(|(g, a)| *g * *a).collect()),
                ]
            }
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor<S> {
        let c = s::<S>(factor);
        let data = self.data().iter().map(|v| *v * c).collect();
        Tensor::from_op("scale", self.shape().to_vec(), data, &[self], {
            move |g, _| vec![Some(g.iter().map(|v| *v * c).collect())]
        })
        .expect("scale of finite tensor by finite factor")
    }

    pub fn neg(&self) -> Tensor<S> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, v: f64) -> Tensor<S> {
        let c = s::<S>(v);
        let data = self.data().iter().map(|x| *x + c).collect();
        Tensor::from_op("add_scalar", self.shape().to_vec(), data, &[self], {
            move |g, _| vec![Some(g.to_vec())]
        })
        .expect("add_scalar of finite tensor")
    }

    /// Sum of all elements, as a scalar tensor (shape `[]`).
    pub fn sum(&self) -> Result<Tensor<S>> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![], vec![total], &[self], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    /// Arithmetic mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Result<Tensor<S>> {
        let n = self.numel();
        let inv = S::one() / s::<S>(n as f64);
        let total: S = self.data().iter().copied().sum();
        Tensor::from_op("mean", vec![], vec![total * inv], &[self], move |g, _| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }

    /// Root-mean-square difference `sqrt(mean((a - b)^2))` as a scalar
    /// tensor. At a perfect match the (sub)gradient is zero.
    pub fn rms(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        ensure_same_shape("rms", self, other)?;
        let n = self.numel();
        let inv_n = S::one() / s::<S>(n as f64);
        let mut acc = S::zero();
        for (a, b) in self.data().iter().zip(other.data()) {
            let d = *a - *b;
            acc += d * d;
        }
        let r = (acc * inv_n).sqrt();
        let a = self.data_arc();
        let b = other.data_arc();
        Tensor::from_op("rms", vec![], vec![r], &[self, other], move |g, needs| {
            if r == S::zero() {
                // Subgradient at the minimum.
                return vec![
                    needs[0].then(|| vec![S::zero(); n]),
                    needs[1].then(|| vec![S::zero(); n]),
                ];
            }
            let c = g[0] * inv_n / r;
            let da: Vec<S> = a
                .iter()
                .zip(b.iter())
                .map(|(a, b)| c * (*a - *b))
                .collect();
            vec![
                needs[0].then(|| da.clone()),
                needs[1].then(|| da.iter().map(|v| -*v).collect()),
            ]
        })
    }

    pub fn activation(&self, kind: Activation) -> Tensor<S> {
        match kind {
            Activation::Tanh => self.tanh_act(),
            Activation::Relu => self.leaky_relu(0.0),
            Activation::LeakyRelu(alpha) => self.leaky_relu(alpha),
        }
    }

    pub fn tanh_act(&self) -> Tensor<S> {
        let data: Vec<S> = self.data().iter().map(|v| v.tanh()).collect();
        let y = Arc::new(data.clone());
        Tensor::from_op("tanh", self.shape().to_vec(), data, &[self], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(y.iter())
                    .map(|(g, y)| *g * (S::one() - *y * *y))
                    .collect(),
            )]
        })
        .expect("tanh output is finite")
    }

    pub fn relu(&self) -> Tensor<S> {
        self.leaky_relu(0.0)
    }

    /// LeakyReLU with the given negative-side slope; the subgradient at
    /// exactly zero is the slope.
    pub fn leaky_relu(&self, alpha: f64) -> Tensor<S> {
        let a = s::<S>(alpha);
        let data = self
            .data()
            .iter()
            .map(|v| if *v > S::zero() { *v } else { *v * a })
            .collect();
        let x = self.data_arc();
        Tensor::from_op(
            "leaky_relu",
            self.shape().to_vec(),
            data,
            &[self],
            move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, x)| if *x > S::zero() { *g } else { *g * a })
                        .collect(),
                )]
            },
        )
        .expect("leaky_relu output is finite")
    }

    /// Per-channel standardization of a `[C, spatial...]` tensor to zero
    /// mean and unit variance (population variance, stabilized by `eps`).
    pub fn instance_norm(&self, eps: f64) -> Result<Tensor<S>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(FireError::InvalidShape {
                op: "instance_norm",
                shape: shape.to_vec(),
                reason: "expected [channels, spatial...]".into(),
            });
        }
        let channels = shape[0];
        let nsp = numel_of(&shape[1..]);
        if nsp < 2 {
            return Err(FireError::InvalidShape {
                op: "instance_norm",
                shape: shape.to_vec(),
                reason: "spatial size per channel must be >= 2".into(),
            });
        }
        let epsv = s::<S>(eps);
        let inv_n = S::one() / s::<S>(nsp as f64);
        let x = self.data();
        let mut out = vec![S::zero(); x.len()];
        let mut inv_std = vec![S::zero(); channels];
        for c in 0..channels {
            let xs = &x[c * nsp..(c + 1) * nsp];
            let mean: S = xs.iter().copied().sum::<S>() * inv_n;
            let var: S = xs
                .iter()
                .map(|v| {
                    let d = *v - mean;
                    d * d
                })
                .sum::<S>()
                * inv_n;
            let is = S::one() / (var + epsv).sqrt();
            inv_std[c] = is;
            for (o, v) in out[c * nsp..(c + 1) * nsp].iter_mut().zip(xs) {
                *o = (*v - mean) * is;
            }
        }
        let y = Arc::new(out.clone());
        Tensor::from_op(
            "instance_norm",
            shape.to_vec(),
            out,
            &[self],
            move |g, _| {
                let mut dx = vec![S::zero(); g.len()];
                for c in 0..channels {
                    let gs = &g[c * nsp..(c + 1) * nsp];
                    let ys = &y[c * nsp..(c + 1) * nsp];
                    let g_mean: S = gs.iter().copied().sum::<S>() * inv_n;
                    let gy_mean: S = gs
                        .iter()
                        .zip(ys)
                        .map(|(g, y)| *g * *y)
                        .sum::<S>()
                        * inv_n;
                    let is = inv_std[c];
                    for ((d, g), y) in dx[c * nsp..(c + 1) * nsp].iter_mut().zip(gs).zip(ys) {
                        *d = is * (*g - g_mean - *y * gy_mean);
                    }
                }
                vec![Some(dx)]
            },
        )
    }

    /// Reduce `[C, spatial...]` to a length-`C` vector of per-channel means.
    pub fn global_avg_pool(&self) -> Result<Tensor<S>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(FireError::InvalidShape {
                op: "global_avg_pool",
                shape: shape.to_vec(),
                reason: "expected [channels, spatial...]".into(),
            });
        }
        let channels = shape[0];
        let nsp = numel_of(&shape[1..]);
        let inv_n = S::one() / s::<S>(nsp as f64);
        let x = self.data();
        let out: Vec<S> = (0..channels)
            .map(|c| x[c * nsp..(c + 1) * nsp].iter().copied().sum::<S>() * inv_n)
            .collect();
        Tensor::from_op("global_avg_pool", vec![channels], out, &[self], move |g, _| {
            let mut dx = vec![S::zero(); channels * nsp];
            for c in 0..channels {
                let gv = g[c] * inv_n;
                for d in dx[c * nsp..(c + 1) * nsp].iter_mut() {
                    *d = gv;
                }
            }
            vec![Some(dx)]
        })
    }

    /// Fully-connected layer `w @ x + b` for a flat input vector.
    pub fn dense(&self, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let k = self.numel();
        if self.shape().len() != 1 || w.shape().len() != 2 || w.shape()[1] != k {
            return Err(FireError::ShapeMismatch {
                op: "dense",
                lhs: w.shape().to_vec(),
                rhs: self.shape().to_vec(),
            });
        }
        let m = w.shape()[0];
        if b.shape() != [m] {
            return Err(FireError::ShapeMismatch {
                op: "dense",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let x = self.data();
        let wd = w.data();
        let mut out = b.data().to_vec();
        for i in 0..m {
            let row = &wd[i * k..(i + 1) * k];
            let mut acc = S::zero();
            for (wv, xv) in row.iter().zip(x) {
                acc += *wv * *xv;
            }
            out[i] += acc;
        }
        let xa = self.data_arc();
        let wa = w.data_arc();
        Tensor::from_op("dense", vec![m], out, &[self, w, b], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![S::zero(); k];
                for i in 0..m {
                    let gv = g[i];
                    for (d, wv) in dx.iter_mut().zip(&wa[i * k..(i + 1) * k]) {
                        *d += gv * *wv;
                    }
                }
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![S::zero(); m * k];
                for i in 0..m {
                    let gv = g[i];
                    for (d, xv) in dw[i * k..(i + 1) * k].iter_mut().zip(xa.iter()) {
                        *d = gv * *xv;
                    }
                }
                dw
            });
            let db = needs[2].then(|| g.to_vec());
            vec![dx, dw, db]
        })
    }

    /// Stack two `[C, spatial...]` tensors along the channel axis.
    pub fn concat_channels(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape().len() < 2
            || other.shape().len() != self.shape().len()
            || self.shape()[1..] != other.shape()[1..]
        {
            return Err(FireError::ShapeMismatch {
                op: "concat_channels",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let ca = self.shape()[0];
        let cb = other.shape()[0];
        let na = self.numel();
        let mut shape = self.shape().to_vec();
        shape[0] = ca + cb;
        let mut data = Vec::with_capacity(na + other.numel());
        data.extend_from_slice(self.data());
        data.extend_from_slice(other.data());
        Tensor::from_op("concat_channels", shape, data, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g[..na].to_vec()),
                needs[1].then(|| g[na..].to_vec()),
            ]
        })
    }

    /// Broadcast-add a per-channel bias to a `[C, spatial...]` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = self.shape();
        if shape.is_empty() || bias.shape() != [shape[0]] {
            return Err(FireError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: shape.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let channels = shape[0];
        let nsp = numel_of(&shape[1..]);
        let mut data = self.data().to_vec();
        for c in 0..channels {
            let bv = bias.data()[c];
            for v in data[c * nsp..(c + 1) * nsp].iter_mut() {
                *v += bv;
            }
        }
        Tensor::from_op("add_channel_bias", shape.to_vec(), data, &[self, bias], {
            move |g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| {
                        (0..channels)
                            .map(|c| g[c * nsp..(c + 1) * nsp].iter().copied().sum())
                            .collect()
                    }),
                ]
            }
        })
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<S>> {
        if numel_of(new_shape) != self.numel() {
            return Err(FireError::InvalidShape {
                op: "reshape",
                shape: new_shape.to_vec(),
                reason: format!("cannot hold {} elements", self.numel()),
            });
        }
        Tensor::from_op(
            "reshape",
            new_shape.to_vec(),
            self.data().to_vec(),
            &[self],
            move |g, _| vec![Some(g.to_vec())],
        )
    }

    /// Apply an `[n, n+1]` affine matrix to an `[n, spatial...]` coordinate
    /// grid in homogeneous form: `out[r, p] = sum_c M[r,c] * grid[c,p] + M[r,n]`.
    pub fn affine_apply(&self, grid: &Tensor<S>) -> Result<Tensor<S>> {
        let ms = self.shape();
        let gs = grid.shape();
        if ms.len() != 2 || ms[1] != ms[0] + 1 || gs.is_empty() || gs[0] != ms[0] {
            return Err(FireError::ShapeMismatch {
                op: "affine_apply",
                lhs: ms.to_vec(),
                rhs: gs.to_vec(),
            });
        }
        let n = ms[0];
        let npts = numel_of(&gs[1..]);
        let m = self.data();
        let g = grid.data();
        let mut out = vec![S::zero(); n * npts];
        for r in 0..n {
            let row = &m[r * (n + 1)..(r + 1) * (n + 1)];
            let dst = &mut out[r * npts..(r + 1) * npts];
            for (c, coef) in row.iter().take(n).enumerate() {
                let src = &g[c * npts..(c + 1) * npts];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += *coef * *v;
                }
            }
            let t = row[n];
            for d in dst.iter_mut() {
                *d += t;
            }
        }
        let ma = self.data_arc();
        let ga = grid.data_arc();
        Tensor::from_op("affine_apply", gs.to_vec(), out, &[self, grid], move |go, needs| {
            let dm = needs[0].then(|| {
                let mut dm = vec![S::zero(); n * (n + 1)];
                for r in 0..n {
                    let gr = &go[r * npts..(r + 1) * npts];
                    for c in 0..n {
                        let src = &ga[c * npts..(c + 1) * npts];
                        let mut acc = S::zero();
                        for (g, v) in gr.iter().zip(src) {
                            acc += *g * *v;
                        }
                        dm[r * (n + 1) + c] = acc;
                    }
                    dm[r * (n + 1) + n] = gr.iter().copied().sum();
                }
                dm
            });
            let dg = needs[1].then(|| {
                let mut dg = vec![S::zero(); n * npts];
                for r in 0..n {
                    let gr = &go[r * npts..(r + 1) * npts];
                    for c in 0..n {
                        let coef = ma[r * (n + 1) + c];
                        let dst = &mut dg[c * npts..(c + 1) * npts];
                        for (d, g) in dst.iter_mut().zip(gr) {
                            *d += coef * *g;
                        }
                    }
                }
                dg
            });
            vec![dm, dg]
        })
    }

    /// Multi-linear resample of a `[C, spatial...]` tensor onto new spatial
    /// extents, align-corners convention. `target == source` is an exact
    /// identity; constants are preserved exactly.
    pub fn resize_linear(&self, target: &[usize]) -> Result<Tensor<S>> {
        let shape = self.shape();
        if shape.len() < 2 || shape.len() - 1 != target.len() {
            return Err(FireError::InvalidShape {
                op: "resize_linear",
                shape: shape.to_vec(),
                reason: format!("expected [channels, spatial...] matching target rank {}", target.len()),
            });
        }
        if target.iter().any(|&e| e == 0) {
            return Err(FireError::InvalidShape {
                op: "resize_linear",
                shape: target.to_vec(),
                reason: "target extents must be positive".into(),
            });
        }
        let rank = target.len();
        if rank > 3 {
            return Err(FireError::InvalidShape {
                op: "resize_linear",
                shape: shape.to_vec(),
                reason: "supported spatial ranks are 1..=3".into(),
            });
        }
        let src_sp = &shape[1..];
        if src_sp == target {
            // Bit-exact identity.
            return Tensor::from_op(
                "resize_linear",
                shape.to_vec(),
                self.data().to_vec(),
                &[self],
                move |g, _| vec![Some(g.to_vec())],
            );
        }
        let channels = shape[0];

        // Per-axis interpolation taps: lo index, hi index, fraction.
        let taps: Vec<Vec<(usize, usize, S)>> = (0..rank)
            .map(|a| axis_taps::<S>(src_sp[a], target[a]))
            .collect();

        let src_strides = strides_of(src_sp);
        let n_src = numel_of(src_sp);
        let n_dst = numel_of(target);
        let x = self.data();
        let mut out = vec![S::zero(); channels * n_dst];

        let mut dst_idx = vec![0usize; rank];
        for c in 0..channels {
            let xs = &x[c * n_src..(c + 1) * n_src];
            let os = &mut out[c * n_dst..(c + 1) * n_dst];
            dst_idx.iter_mut().for_each(|v| *v = 0);
            for o in os.iter_mut() {
                *o = interp_nested(xs, &src_strides, &taps, &dst_idx);
                // Advance the multi-index, last axis fastest.
                for a in (0..rank).rev() {
                    dst_idx[a] += 1;
                    if dst_idx[a] < target[a] {
                        break;
                    }
                    dst_idx[a] = 0;
                }
            }
        }

        let target_v = target.to_vec();
        let mut out_shape = vec![channels];
        out_shape.extend_from_slice(target);
        Tensor::from_op("resize_linear", out_shape, out, &[self], move |g, _| {
            let mut dx = vec![S::zero(); channels * n_src];
            let mut dst_idx = vec![0usize; rank];
            for c in 0..channels {
                let gs = &g[c * n_dst..(c + 1) * n_dst];
                let dxs = &mut dx[c * n_src..(c + 1) * n_src];
                dst_idx.iter_mut().for_each(|v| *v = 0);
                for gv in gs.iter() {
                    scatter_corners(dxs, &src_strides, &taps, &dst_idx, *gv);
                    for a in (0..rank).rev() {
                        dst_idx[a] += 1;
                        if dst_idx[a] < target_v[a] {
                            break;
                        }
                        dst_idx[a] = 0;
                    }
                }
            }
            vec![Some(dx)]
        })
    }
}

/// Align-corners source taps for resizing an axis of length `src` to `dst`.
fn axis_taps<S: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, S)> {
    (0..dst)
        .map(|o| {
            let pos = if dst == 1 {
                // Degenerate axis: sample the center.
                (src as f64 - 1.0) / 2.0
            } else {
                o as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let frac = pos - lo as f64;
            if frac == 0.0 {
                (lo, lo, S::zero())
            } else {
                (lo, (lo + 1).min(src - 1), s::<S>(frac))
            }
        })
        .collect()
}

/// Nested-lerp multi-linear interpolation; exact for constants and at
/// integer positions.
fn interp_nested<S: Scalar>(
    x: &[S],
    strides: &[usize],
    taps: &[Vec<(usize, usize, S)>],
    idx: &[usize],
) -> S {
    fn rec<S: Scalar>(
        x: &[S],
        strides: &[usize],
        taps: &[Vec<(usize, usize, S)>],
        idx: &[usize],
        axis: usize,
        offset: usize,
    ) -> S {
        if axis == taps.len() {
            return x[offset];
        }
        let (lo, hi, f) = taps[axis][idx[axis]];
        let a = rec(x, strides, taps, idx, axis + 1, offset + lo * strides[axis]);
        if f == S::zero() {
            return a;
        }
        let b = rec(x, strides, taps, idx, axis + 1, offset + hi * strides[axis]);
        a + f * (b - a)
    }
    rec(x, strides, taps, idx, 0, 0)
}

/// Transpose of [`interp_nested`]: distributes `g` onto the corner points
/// with product weights.
fn scatter_corners<S: Scalar>(
    dx: &mut [S],
    strides: &[usize],
    taps: &[Vec<(usize, usize, S)>],
    idx: &[usize],
    g: S,
) {
    fn rec<S: Scalar>(
        dx: &mut [S],
        strides: &[usize],
        taps: &[Vec<(usize, usize, S)>],
        idx: &[usize],
        axis: usize,
        offset: usize,
        w: S,
    ) {
        if axis == taps.len() {
            dx[offset] += w;
            return;
        }
        let (lo, hi, f) = taps[axis][idx[axis]];
        if f == S::zero() {
            rec(dx, strides, taps, idx, axis + 1, offset + lo * strides[axis], w);
        } else {
            rec(
                dx,
                strides,
                taps,
                idx,
                axis + 1,
                offset + lo * strides[axis],
                w * (S::one() - f),
            );
            rec(dx, strides, taps, idx, axis + 1, offset + hi * strides[axis], w * f);
        }
    }
    rec(dx, strides, taps, idx, 0, 0, g);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rms_examples() {
        let a = Tensor::<f64>::new(&[2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::<f64>::new(&[2], vec![0.0, 0.0]).unwrap();
        assert_relative_eq!(a.rms(&b).unwrap().item(), 1.0);
        assert_eq!(a.rms(&a).unwrap().item(), 0.0);

        let a = Tensor::<f64>::new(&[2], vec![2.0, 0.0]).unwrap();
        assert_relative_eq!(a.rms(&b).unwrap().item(), 2.0_f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn rms_shape_mismatch_errors() {
        let a = Tensor::<f64>::zeros(&[2]);
        let b = Tensor::<f64>::zeros(&[3]);
        assert!(a.rms(&b).is_err());
    }

    #[test]
    fn dense_examples() {
        // identity weights, zero bias
        let x = Tensor::<f64>::new(&[2], vec![3.0, -1.0]).unwrap();
        let w = Tensor::<f64>::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[2]);
        assert_eq!(x.dense(&w, &b).unwrap().data(), x.data());

        // zero weights pass the bias through
        let w0 = Tensor::<f64>::zeros(&[2, 2]);
        let bv = Tensor::<f64>::new(&[2], vec![0.5, -2.0]).unwrap();
        assert_eq!(x.dense(&w0, &bv).unwrap().data(), bv.data());

        // hand multiply: x=[1,2], W=[[1,1],[0,2]], b=[0,1] -> [3,5]
        let x = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::<f64>::new(&[2, 2], vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        let b = Tensor::<f64>::new(&[2], vec![0.0, 1.0]).unwrap();
        assert_eq!(x.dense(&w, &b).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn activations_match_definitions() {
        let x = Tensor::<f64>::new(&[2], vec![-1.0, 2.0]).unwrap();
        let y = x.leaky_relu(0.2);
        assert_eq!(y.data(), &[-0.2, 2.0]);

        let z = Tensor::<f64>::zeros(&[3]).tanh_act();
        assert_eq!(z.data(), &[0.0; 3]);

        let big = Tensor::<f64>::new(&[2], vec![6.0, -6.0]).unwrap().tanh_act();
        assert!(big.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn instance_norm_examples() {
        // constant channel -> zeros
        let x = Tensor::<f64>::full(&[1, 4], 3.5);
        let y = x.instance_norm(1e-5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));

        // channel [0, 2] -> approximately [-1, 1]
        let x = Tensor::<f64>::new(&[1, 2], vec![0.0, 2.0]).unwrap();
        let y = x.instance_norm(1e-9).unwrap();
        assert_relative_eq!(y.data()[0], -1.0, max_relative = 1e-6);
        assert_relative_eq!(y.data()[1], 1.0, max_relative = 1e-6);

        // per-channel mean ~ 0 on arbitrary input
        let x = Tensor::<f64>::new(&[2, 3], vec![1.0, 5.0, -2.0, 0.25, 0.5, 8.0]).unwrap();
        let y = x.instance_norm(1e-5).unwrap();
        for c in 0..2 {
            let m: f64 = y.data()[c * 3..(c + 1) * 3].iter().sum::<f64>() / 3.0;
            assert!(m.abs() <= 1e-6);
        }
    }

    #[test]
    fn instance_norm_rejects_degenerate_spatial() {
        let x = Tensor::<f64>::zeros(&[3, 1]);
        assert!(x.instance_norm(1e-5).is_err());
    }

    #[test]
    fn global_avg_pool_examples() {
        let x = Tensor::<f64>::full(&[2, 3, 3], 0.75);
        assert_eq!(x.global_avg_pool().unwrap().data(), &[0.75, 0.75]);

        let a = Tensor::<f64>::zeros(&[2, 4, 4]).global_avg_pool().unwrap();
        let b = Tensor::<f64>::zeros(&[2, 9, 9]).global_avg_pool().unwrap();
        assert_eq!(a.shape(), b.shape());

        let x = Tensor::<f64>::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_relative_eq!(x.global_avg_pool().unwrap().data()[0], 2.5);
    }

    #[test]
    fn resize_linear_examples() {
        // identity when target == source
        let x = Tensor::<f64>::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x.resize_linear(&[3]).unwrap().data(), x.data());

        // constant stays constant
        let x = Tensor::<f64>::full(&[1, 4, 4], 0.3);
        let y = x.resize_linear(&[9, 7]).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.3));

        // 1-D ramp [0,1] to length 3 -> [0, 0.5, 1]
        let x = Tensor::<f64>::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let y = x.resize_linear(&[3]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn concat_and_bias() {
        let a = Tensor::<f64>::full(&[1, 2, 2], 1.0);
        let b = Tensor::<f64>::full(&[2, 2, 2], 2.0);
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        assert_eq!(c.data()[0..4], [1.0; 4]);
        assert_eq!(c.data()[4..12], [2.0; 8]);

        let bias = Tensor::<f64>::new(&[3], vec![1.0, -1.0, 0.0]).unwrap();
        let d = c.add_channel_bias(&bias).unwrap();
        assert_eq!(d.data()[0..4], [2.0; 4]);
        assert_eq!(d.data()[4..8], [1.0; 4]);
        assert_eq!(d.data()[8..12], [2.0; 4]);
    }

    #[test]
    fn affine_apply_identity_is_exact() {
        let m = Tensor::<f64>::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let grid = Tensor::<f64>::new(&[2, 2, 2], vec![-1.0, 1.0, -0.3, 0.7, 0.2, -0.9, 1.0, -1.0])
            .unwrap();
        let out = m.affine_apply(&grid).unwrap();
        assert_eq!(out.data(), grid.data());
    }

    #[test]
    fn affine_apply_translation() {
        let m = Tensor::<f64>::new(&[2, 3], vec![1.0, 0.0, 0.25, 0.0, 1.0, -0.5]).unwrap();
        let grid = Tensor::<f64>::zeros(&[2, 1, 1]);
        let out = m.affine_apply(&grid).unwrap();
        assert_eq!(out.data(), &[0.25, -0.5]);
    }
}
