//! Normalized-coordinate spatial transformations.
//!
//! Every image axis spans `[-1, 1]` with the align-corners convention: the
//! first and last grid indices map exactly to -1 and +1. A [`SampleGrid`]
//! is a backward map — `output(p) = input(grid(p))` — so composing
//! transformations multiplies into a single grid and the image is
//! resampled once.
//!
//! All coordinate containers wrap [`Tensor`]s, so grids built from network
//! outputs stay differentiable end-to-end.

use std::sync::Arc;

use crate::error::{FireError, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Border policy for sampling outside `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Border {
    /// Clamp to the edge value (default; avoids dark halos under large
    /// affine moves).
    #[default]
    Clamp,
    /// Out-of-range corners read as zero.
    Zeros,
}

/// An `n x (n+1)` matrix acting on homogeneous normalized coordinates.
#[derive(Debug, Clone)]
pub struct AffineMatrix<S: Scalar = f32> {
    dim: usize,
    entries: Tensor<S>,
}

impl<S: Scalar> AffineMatrix<S> {
    /// `[I | 0]`: the identity transformation.
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![S::zero(); dim * (dim + 1)];
        for r in 0..dim {
            data[r * (dim + 1) + r] = S::one();
        }
        AffineMatrix {
            dim,
            entries: Tensor::new(&[dim, dim + 1], data).expect("identity entries are finite"),
        }
    }

    /// Wrap an `[n, n+1]` tensor (e.g. a network head output).
    pub fn from_tensor(entries: Tensor<S>) -> Result<Self> {
        let sh = entries.shape().to_vec();
        if sh.len() != 2 || sh[1] != sh[0] + 1 || sh[0] < 1 || sh[0] > 3 {
            return Err(FireError::InvalidShape {
                op: "affine_matrix",
                shape: sh,
                reason: "expected [n, n+1] with n in 1..=3".into(),
            });
        }
        Ok(AffineMatrix {
            dim: sh[0],
            entries,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &Tensor<S> {
        &self.entries
    }

    /// Determinant of the linear part.
    pub fn linear_det(&self) -> S {
        let n = self.dim;
        let e = self.entries.data();
        let at = |r: usize, c: usize| e[r * (n + 1) + c];
        match n {
            1 => at(0, 0),
            2 => at(0, 0) * at(1, 1) - at(0, 1) * at(1, 0),
            3 => {
                at(0, 0) * (at(1, 1) * at(2, 2) - at(1, 2) * at(2, 1))
                    - at(0, 1) * (at(1, 0) * at(2, 2) - at(1, 2) * at(2, 0))
                    + at(0, 2) * (at(1, 0) * at(2, 1) - at(1, 1) * at(2, 0))
            }
            _ => unreachable!(),
        }
    }

    /// Exact inverse, for ground-truth bookkeeping (not differentiable).
    pub fn inverse(&self) -> Result<AffineMatrix<S>> {
        let n = self.dim;
        let e = self.entries.data();
        let at = |r: usize, c: usize| e[r * (n + 1) + c].to_f64();
        let det = self.linear_det().to_f64();
        if det.abs() < 1e-12 {
            return Err(FireError::InvalidArgument(
                "affine matrix is singular".into(),
            ));
        }
        // inv(L) and -inv(L) t
        let mut inv = vec![0.0f64; n * n];
        match n {
            1 => inv[0] = 1.0 / at(0, 0),
            2 => {
                inv[0] = at(1, 1) / det;
                inv[1] = -at(0, 1) / det;
                inv[2] = -at(1, 0) / det;
                inv[3] = at(0, 0) / det;
            }
            3 => {
                let m = |r: usize, c: usize| at(r, c);
                let cof = [
                    m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1),
                    m(0, 2) * m(2, 1) - m(0, 1) * m(2, 2),
                    m(0, 1) * m(1, 2) - m(0, 2) * m(1, 1),
                    m(1, 2) * m(2, 0) - m(1, 0) * m(2, 2),
                    m(0, 0) * m(2, 2) - m(0, 2) * m(2, 0),
                    m(0, 2) * m(1, 0) - m(0, 0) * m(1, 2),
                    m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0),
                    m(0, 1) * m(2, 0) - m(0, 0) * m(2, 1),
                    m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0),
                ];
                for (i, c) in cof.iter().enumerate() {
                    inv[i] = c / det;
                }
            }
            _ => unreachable!(),
        }
        let mut data = vec![S::zero(); n * (n + 1)];
        for r in 0..n {
            let mut t = 0.0;
            for c in 0..n {
                data[r * (n + 1) + c] = s::<S>(inv[r * n + c]);
                t += inv[r * n + c] * at(c, n);
            }
            data[r * (n + 1) + n] = s::<S>(-t);
        }
        AffineMatrix::from_tensor(Tensor::new(&[n, n + 1], data)?)
    }
}

/// Per-grid-point displacement vectors in normalized units; the zero field
/// is the identity transformation.
#[derive(Debug, Clone)]
pub struct DisplacementField<S: Scalar = f32> {
    tensor: Tensor<S>,
}

impl<S: Scalar> DisplacementField<S> {
    /// Wrap an `[n, grid...]` tensor with `n` matching the grid rank.
    pub fn from_tensor(tensor: Tensor<S>) -> Result<Self> {
        let sh = tensor.shape();
        if sh.len() < 2 || sh[0] != sh.len() - 1 || sh[0] > 3 {
            return Err(FireError::InvalidShape {
                op: "displacement_field",
                shape: sh.to_vec(),
                reason: "expected [n, g1..gn] with n in 1..=3".into(),
            });
        }
        Ok(DisplacementField { tensor })
    }

    pub fn zero(grid_shape: &[usize]) -> Self {
        let mut sh = vec![grid_shape.len()];
        sh.extend_from_slice(grid_shape);
        DisplacementField {
            tensor: Tensor::zeros(&sh),
        }
    }

    pub fn rank(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn grid_shape(&self) -> &[usize] {
        &self.tensor.shape()[1..]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }

    pub fn mean_abs(&self) -> f64 {
        let n = self.tensor.numel() as f64;
        self.tensor
            .data()
            .iter()
            .map(|v| v.abs().to_f64())
            .sum::<f64>()
            / n
    }
}

/// One target coordinate per output grid point (backward map).
#[derive(Debug, Clone)]
pub struct SampleGrid<S: Scalar = f32> {
    tensor: Tensor<S>,
}

impl<S: Scalar> SampleGrid<S> {
    pub fn from_tensor(tensor: Tensor<S>) -> Result<Self> {
        let sh = tensor.shape();
        if sh.len() < 2 || sh[0] != sh.len() - 1 || sh[0] > 3 {
            return Err(FireError::InvalidShape {
                op: "sample_grid",
                shape: sh.to_vec(),
                reason: "expected [n, g1..gn] with n in 1..=3".into(),
            });
        }
        Ok(SampleGrid { tensor })
    }

    pub fn rank(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.tensor.shape()[1..]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }
}

/// Align-corners identity grid: index `i` along an axis of extent `e` maps
/// to `-1 + 2i/(e-1)`. Extents below 2 are rejected.
pub fn identity_grid<S: Scalar>(shape: &[usize]) -> Result<SampleGrid<S>> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(FireError::InvalidShape {
            op: "identity_grid",
            shape: shape.to_vec(),
            reason: "supported ranks are 1..=3".into(),
        });
    }
    if shape.iter().any(|&e| e < 2) {
        return Err(FireError::InvalidShape {
            op: "identity_grid",
            shape: shape.to_vec(),
            reason: "every extent must be >= 2".into(),
        });
    }
    let rank = shape.len();
    let npts: usize = shape.iter().product();
    let mut data = vec![S::zero(); rank * npts];
    let mut idx = vec![0usize; rank];
    for p in 0..npts {
        for (a, &i) in idx.iter().enumerate() {
            data[a * npts + p] = s::<S>(-1.0 + 2.0 * i as f64 / (shape[a] - 1) as f64);
        }
        advance(&mut idx, shape);
    }
    let mut sh = vec![rank];
    sh.extend_from_slice(shape);
    SampleGrid::from_tensor(Tensor::new(&sh, data)?)
}

/// `p' = A [p; 1]` over the identity grid of `shape`.
pub fn affine_grid<S: Scalar>(a: &AffineMatrix<S>, shape: &[usize]) -> Result<SampleGrid<S>> {
    if a.dim() != shape.len() {
        return Err(FireError::ShapeMismatch {
            op: "affine_grid",
            lhs: a.entries().shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let base = identity_grid::<S>(shape)?;
    SampleGrid::from_tensor(a.entries().affine_apply(base.tensor())?)
}

/// `p' = p + u(p)`; `u` is linearly resized to `shape` first.
pub fn displacement_grid<S: Scalar>(
    u: &DisplacementField<S>,
    shape: &[usize],
) -> Result<SampleGrid<S>> {
    if u.rank() != shape.len() {
        return Err(FireError::ShapeMismatch {
            op: "displacement_grid",
            lhs: u.tensor().shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let base = identity_grid::<S>(shape)?;
    let resized = u.tensor().resize_linear(shape)?;
    SampleGrid::from_tensor(base.tensor().add(&resized)?)
}

/// Single composed backward map `p' = A [(p + u(p)); 1]`, equivalent to
/// warping with the displacement and then the affine in image space but
/// with only one resampling. With `u = 0` this is bit-equal to
/// [`affine_grid`]; with `A = I` it is bit-equal to [`displacement_grid`].
pub fn compose<S: Scalar>(
    a: &AffineMatrix<S>,
    u: &DisplacementField<S>,
    shape: &[usize],
) -> Result<SampleGrid<S>> {
    if a.dim() != u.rank() || a.dim() != shape.len() {
        return Err(FireError::ShapeMismatch {
            op: "compose",
            lhs: a.entries().shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let shifted = displacement_grid(u, shape)?;
    SampleGrid::from_tensor(a.entries().affine_apply(shifted.tensor())?)
}

/// Normalized coordinate -> continuous array index, snapping float noise
/// onto exact integers so identity grids reproduce images bit-exactly.
#[inline]
fn to_index<S: Scalar>(coord: S, extent: usize) -> S {
    let scale = s::<S>((extent - 1) as f64 / 2.0);
    let idx = (coord + S::one()) * scale;
    let nearest = idx.round();
    let tol = s::<S>(8.0) * S::epsilon() * idx.abs().max(S::one());
    if (idx - nearest).abs() <= tol {
        nearest
    } else {
        idx
    }
}

struct Tap {
    lo: isize,
    frac: f64,
    /// False when the clamp policy froze the coordinate (outside range).
    slope: bool,
}

fn taps_for_point<S: Scalar>(
    grid: &[S],
    npts: usize,
    p: usize,
    in_sp: &[usize],
    border: Border,
    taps: &mut [Tap],
) {
    for (a, tap) in taps.iter_mut().enumerate() {
        let extent = in_sp[a];
        let idx = to_index(grid[a * npts + p], extent);
        let idx_f = idx.to_f64();
        match border {
            Border::Clamp => {
                let max = (extent - 1) as f64;
                let inside = (0.0..=max).contains(&idx_f);
                let c = idx_f.clamp(0.0, max);
                let lo = (c.floor() as isize).min(extent as isize - 1);
                *tap = Tap {
                    lo,
                    frac: c - lo as f64,
                    slope: inside,
                };
            }
            Border::Zeros => {
                let lo = idx_f.floor();
                *tap = Tap {
                    lo: lo as isize,
                    frac: idx_f - lo,
                    slope: true,
                };
            }
        }
    }
}

#[inline]
fn corner_value<S: Scalar>(chan: &[S], in_sp: &[usize], strides: &[usize], pos: &[isize]) -> S {
    let mut off = 0usize;
    for (a, &i) in pos.iter().enumerate() {
        if i < 0 || i as usize >= in_sp[a] {
            return S::zero();
        }
        off += i as usize * strides[a];
    }
    chan[off]
}

/// Nested-lerp interpolation at one point: exact for constants and at
/// snapped integer indices.
fn interp_point<S: Scalar>(
    chan: &[S],
    in_sp: &[usize],
    strides: &[usize],
    taps: &[Tap],
    border: Border,
) -> S {
    fn rec<S: Scalar>(
        chan: &[S],
        in_sp: &[usize],
        strides: &[usize],
        taps: &[Tap],
        border: Border,
        axis: usize,
        pos: &mut [isize],
    ) -> S {
        if axis == taps.len() {
            return corner_value(chan, in_sp, strides, pos);
        }
        let t = &taps[axis];
        let hi = clamp_hi(t.lo, in_sp[axis], border);
        pos[axis] = t.lo;
        let a = rec(chan, in_sp, strides, taps, border, axis + 1, pos);
        if t.frac == 0.0 {
            return a;
        }
        pos[axis] = hi;
        let b = rec(chan, in_sp, strides, taps, border, axis + 1, pos);
        a + s::<S>(t.frac) * (b - a)
    }
    let mut pos = [0isize; 3];
    rec(chan, in_sp, strides, taps, border, 0, &mut pos[..taps.len()])
}

#[inline]
fn clamp_hi(lo: isize, extent: usize, border: Border) -> isize {
    match border {
        Border::Clamp => (lo + 1).min(extent as isize - 1),
        Border::Zeros => lo + 1,
    }
}

/// Multi-linear resampling of `image` at `grid` coordinates, differentiable
/// w.r.t. both the image values and the grid coordinates.
pub fn sample<S: Scalar>(
    image: &Tensor<S>,
    grid: &SampleGrid<S>,
    border: Border,
) -> Result<Tensor<S>> {
    let ish = image.shape();
    let rank = grid.rank();
    if ish.len() != rank + 1 {
        return Err(FireError::ShapeMismatch {
            op: "sample",
            lhs: ish.to_vec(),
            rhs: grid.tensor().shape().to_vec(),
        });
    }
    let channels = ish[0];
    let in_sp = ish[1..].to_vec();
    let out_sp = grid.out_shape().to_vec();
    let n_in: usize = in_sp.iter().product();
    let n_out: usize = out_sp.iter().product();
    let strides = crate::tensor::strides_of(&in_sp);

    let img = image.data();
    let g = grid.tensor().data();
    let mut out = vec![S::zero(); channels * n_out];
    let mut taps: Vec<Tap> = (0..rank)
        .map(|_| Tap {
            lo: 0,
            frac: 0.0,
            slope: true,
        })
        .collect();
    for p in 0..n_out {
        taps_for_point(g, n_out, p, &in_sp, border, &mut taps);
        for c in 0..channels {
            let chan = &img[c * n_in..(c + 1) * n_in];
            out[c * n_out + p] = interp_point(chan, &in_sp, &strides, &taps, border);
        }
    }

    let mut out_shape = vec![channels];
    out_shape.extend_from_slice(&out_sp);

    let img_arc = image.data_arc();
    let grid_arc = grid.tensor().data_arc();
    let in_sp_c = in_sp.clone();
    Tensor::from_op(
        "sample",
        out_shape,
        out,
        &[image, grid.tensor()],
        move |g_out, needs| {
            let mut d_img = needs[0].then(|| vec![S::zero(); channels * n_in]);
            let mut d_grid = needs[1].then(|| vec![S::zero(); rank * n_out]);
            let mut taps: Vec<Tap> = (0..rank)
                .map(|_| Tap {
                    lo: 0,
                    frac: 0.0,
                    slope: true,
                })
                .collect();
            let mut pos = [0isize; 3];
            let mut wv = [0.0f64; 3];
            for p in 0..n_out {
                taps_for_point(&grid_arc, n_out, p, &in_sp_c, border, &mut taps);
                // Enumerate the 2^rank corners once per point. Corners with
                // zero weight still matter for the coordinate gradient: at
                // frac == 0 the derivative along an axis is the one-sided
                // corner difference.
                for bits in 0..(1usize << rank) {
                    let mut w = 1.0f64;
                    let mut valid = true;
                    for (a, t) in taps.iter().enumerate() {
                        let hi_side = bits >> a & 1 == 1;
                        wv[a] = if hi_side { t.frac } else { 1.0 - t.frac };
                        w *= wv[a];
                        let i = if hi_side {
                            clamp_hi(t.lo, in_sp_c[a], border)
                        } else {
                            t.lo
                        };
                        pos[a] = i;
                        if i < 0 || i as usize >= in_sp_c[a] {
                            valid = false;
                        }
                    }
                    let mut off = 0usize;
                    if valid {
                        for (a, &i) in pos.iter().take(rank).enumerate() {
                            off += i as usize * strides[a];
                        }
                    }
                    if let Some(di) = d_img.as_mut() {
                        if valid && w != 0.0 {
                            for c in 0..channels {
                                di[c * n_in + off] += s::<S>(w) * g_out[c * n_out + p];
                            }
                        }
                    }
                    if let Some(dg) = d_grid.as_mut() {
                        // sum_c v(corner) * g_out, zero for out-of-range
                        // corners (they read as zero under either policy:
                        // clamp never lands here, zeros reads 0)
                        let v_sum: S = if valid {
                            (0..channels)
                                .map(|c| img_arc[c * n_in + off] * g_out[c * n_out + p])
                                .sum()
                        } else {
                            S::zero()
                        };
                        if v_sum != S::zero() {
                            for (a, t) in taps.iter().enumerate() {
                                if !t.slope {
                                    continue;
                                }
                                // product of the other axes' weights
                                let mut w_other = 1.0f64;
                                for (b, wb) in wv.iter().take(rank).enumerate() {
                                    if b != a {
                                        w_other *= *wb;
                                    }
                                }
                                if w_other == 0.0 {
                                    continue;
                                }
                                let hi_side = bits >> a & 1 == 1;
                                let sign = if hi_side { 1.0 } else { -1.0 };
                                let scale = (in_sp_c[a] - 1) as f64 / 2.0;
                                dg[a * n_out + p] += v_sum * s::<S>(sign * w_other * scale);
                            }
                        }
                    }
                }
            }
            vec![d_img, d_grid]
        },
    )
}

/// Nearest-neighbor resampling (not differentiable); keeps binary masks
/// strictly binary. Coordinates are clamped to the image.
pub fn sample_nearest<S: Scalar>(image: &Tensor<S>, grid: &SampleGrid<S>) -> Result<Tensor<S>> {
    let ish = image.shape();
    let rank = grid.rank();
    if ish.len() != rank + 1 {
        return Err(FireError::ShapeMismatch {
            op: "sample_nearest",
            lhs: ish.to_vec(),
            rhs: grid.tensor().shape().to_vec(),
        });
    }
    let channels = ish[0];
    let in_sp = &ish[1..];
    let n_in: usize = in_sp.iter().product();
    let out_sp = grid.out_shape().to_vec();
    let n_out: usize = out_sp.iter().product();
    let strides = crate::tensor::strides_of(in_sp);
    let g = grid.tensor().data();
    let img = image.data();
    let mut out = vec![S::zero(); channels * n_out];
    for p in 0..n_out {
        let mut off = 0usize;
        for a in 0..rank {
            let idx = to_index(g[a * n_out + p], in_sp[a]).round().to_f64();
            let i = (idx.max(0.0) as usize).min(in_sp[a] - 1);
            off += i * strides[a];
        }
        for c in 0..channels {
            out[c * n_out + p] = img[c * n_in + off];
        }
    }
    let mut out_shape = vec![channels];
    out_shape.extend_from_slice(&out_sp);
    Tensor::new(&out_shape, out)
}

/// Sum over interior points and components of the squared discrete
/// Laplacian (unit grid spacing); zero exactly on affine fields.
pub fn bending_energy<S: Scalar>(u: &DisplacementField<S>) -> Result<Tensor<S>> {
    let sh = u.tensor().shape().to_vec();
    let rank = u.rank();
    let grid = &sh[1..];
    if grid.iter().any(|&e| e < 3) {
        return Err(FireError::InvalidShape {
            op: "bending_energy",
            shape: sh,
            reason: "every grid extent must be >= 3".into(),
        });
    }
    let npts: usize = grid.iter().product();
    let strides = crate::tensor::strides_of(grid);
    let x = u.tensor().data();

    // Interior multi-indices.
    let interior: Vec<usize> = interior_points(grid, &strides);
    let two_r = s::<S>(2.0 * rank as f64);
    let mut energy = S::zero();
    let mut laps: Vec<S> = Vec::with_capacity(interior.len() * rank);
    for comp in 0..rank {
        let chan = &x[comp * npts..(comp + 1) * npts];
        for &p in &interior {
            let mut lap = -two_r * chan[p];
            for &st in &strides {
                lap += chan[p - st] + chan[p + st];
            }
            energy += lap * lap;
            laps.push(lap);
        }
    }
    let grid_v = grid.to_vec();
    let strides_v = strides.clone();
    Tensor::from_op("bending_energy", vec![], vec![energy], &[u.tensor()], {
        move |g, _| {
            let g0 = g[0];
            let interior = interior_points(&grid_v, &strides_v);
            let mut du = vec![S::zero(); rank * npts];
            let two = s::<S>(2.0);
            let two_r = s::<S>(2.0 * rank as f64);
            for comp in 0..rank {
                let dchan = &mut du[comp * npts..(comp + 1) * npts];
                for (k, &p) in interior.iter().enumerate() {
                    let t = two * g0 * laps[comp * interior.len() + k];
                    dchan[p] -= two_r * t;
                    for &st in &strides_v {
                        dchan[p - st] += t;
                        dchan[p + st] += t;
                    }
                }
            }
            vec![Some(du)]
        }
    })
}

/// Linear offsets of all interior points (every axis in `1..extent-1`).
fn interior_points(grid: &[usize], strides: &[usize]) -> Vec<usize> {
    let mut pts = Vec::new();
    let rank = grid.len();
    let mut idx = vec![1usize; rank];
    'outer: loop {
        let off: usize = idx.iter().zip(strides).map(|(i, s)| i * s).sum();
        pts.push(off);
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < grid[a] - 1 {
                continue 'outer;
            }
            idx[a] = 1;
            if a == 0 {
                break 'outer;
            }
        }
        if rank == 0 {
            break;
        }
    }
    pts
}

/// Dense scalar field over the interior of a grid.
#[derive(Debug, Clone)]
pub struct ScalarMap<S: Scalar = f32> {
    pub shape: Vec<usize>,
    pub values: Vec<S>,
}

/// Per-interior-point determinant of the central-difference Jacobian of
/// the map `p -> p'`, in normalized units. Identity grids give exactly 1;
/// negative values flag folding.
pub fn jacobian_det_map<S: Scalar>(grid: &SampleGrid<S>) -> Result<ScalarMap<S>> {
    let rank = grid.rank();
    let out_sp = grid.out_shape().to_vec();
    if out_sp.iter().any(|&e| e < 2) {
        return Err(FireError::InvalidShape {
            op: "jacobian_det_map",
            shape: grid.tensor().shape().to_vec(),
            reason: "every extent must be >= 2".into(),
        });
    }
    let npts: usize = out_sp.iter().product();
    let strides = crate::tensor::strides_of(&out_sp);
    let g = grid.tensor().data();
    let interior_shape: Vec<usize> = out_sp.iter().map(|&e| e.saturating_sub(2)).collect();
    let interior = if interior_shape.iter().any(|&e| e == 0) {
        Vec::new()
    } else {
        interior_points(&out_sp, &strides)
    };
    let mut values = Vec::with_capacity(interior.len());
    let mut jac = [[0.0f64; 3]; 3];
    for &p in &interior {
        for (r, row) in jac.iter_mut().enumerate().take(rank) {
            let chan = &g[r * npts..(r + 1) * npts];
            for (a, cell) in row.iter_mut().enumerate().take(rank) {
                let h = 2.0 / (out_sp[a] - 1) as f64;
                *cell =
                    (chan[p + strides[a]].to_f64() - chan[p - strides[a]].to_f64()) / (2.0 * h);
            }
        }
        let det = match rank {
            1 => jac[0][0],
            2 => jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0],
            3 => {
                jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
                    - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
                    + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0])
            }
            _ => unreachable!(),
        };
        values.push(s::<S>(det));
    }
    Ok(ScalarMap {
        shape: interior_shape,
        values,
    })
}

fn advance(idx: &mut [usize], shape: &[usize]) {
    for a in (0..idx.len()).rev() {
        idx[a] += 1;
        if idx[a] < shape[a] {
            return;
        }
        idx[a] = 0;
    }
}

/// Keeps shared buffers usable inside `Send + Sync` closures.
#[allow(dead_code)]
fn _assert_send_sync<S: Scalar>(a: &Arc<Vec<S>>) {
    fn check<T: Send + Sync>(_: &T) {}
    check(a);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_grid_endpoints() {
        let g = identity_grid::<f64>(&[3]).unwrap();
        assert_eq!(g.tensor().data(), &[-1.0, 0.0, 1.0]);

        let g = identity_grid::<f64>(&[2, 2]).unwrap();
        // axis 0 coords then axis 1 coords, row-major points
        assert_eq!(g.tensor().data(), &[-1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn identity_grid_rejects_tiny_extents() {
        assert!(identity_grid::<f64>(&[1, 4]).is_err());
    }

    #[test]
    fn sampling_identity_grid_is_exact() {
        let img = Tensor::<f32>::new(
            &[2, 5, 7],
            (0..70).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap();
        let g = identity_grid::<f32>(&[5, 7]).unwrap();
        let out = sample(&img, &g, Border::Clamp).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn affine_identity_matches_identity_grid() {
        let a = AffineMatrix::<f64>::identity(2);
        let g = affine_grid(&a, &[4, 6]).unwrap();
        let id = identity_grid::<f64>(&[4, 6]).unwrap();
        assert_eq!(g.tensor().data(), id.tensor().data());
    }

    #[test]
    fn affine_translation_shifts_coordinates() {
        let mut e = AffineMatrix::<f64>::identity(2).entries().data().to_vec();
        e[2] = 0.25; // translate axis 0
        e[5] = -0.5; // translate axis 1
        let a = AffineMatrix::from_tensor(Tensor::new(&[2, 3], e).unwrap()).unwrap();
        let g = affine_grid(&a, &[3, 3]).unwrap();
        let id = identity_grid::<f64>(&[3, 3]).unwrap();
        for p in 0..9 {
            assert_relative_eq!(g.tensor().data()[p], id.tensor().data()[p] + 0.25);
            assert_relative_eq!(g.tensor().data()[9 + p], id.tensor().data()[9 + p] - 0.5);
        }
    }

    #[test]
    fn pure_scale_halves_coordinates() {
        let e = vec![0.5, 0.0, 0.0, 0.0, 0.5, 0.0];
        let a = AffineMatrix::from_tensor(Tensor::new(&[2, 3], e).unwrap()).unwrap();
        let g = affine_grid(&a, &[3, 3]).unwrap();
        let id = identity_grid::<f64>(&[3, 3]).unwrap();
        for (gv, iv) in g.tensor().data().iter().zip(id.tensor().data()) {
            assert_relative_eq!(*gv, iv * 0.5);
        }
    }

    #[test]
    fn displacement_grid_zero_is_identity() {
        let u = DisplacementField::<f64>::zero(&[4, 4]);
        let g = displacement_grid(&u, &[4, 4]).unwrap();
        let id = identity_grid::<f64>(&[4, 4]).unwrap();
        assert_eq!(g.tensor().data(), id.tensor().data());
    }

    #[test]
    fn constant_field_resizes_to_constant() {
        let mut data = vec![0.5f64; 16];
        data.extend(vec![0.0f64; 16]);
        let u =
            DisplacementField::from_tensor(Tensor::new(&[2, 4, 4], data).unwrap()).unwrap();
        let g = displacement_grid(&u, &[16, 16]).unwrap();
        let id = identity_grid::<f64>(&[16, 16]).unwrap();
        for p in 0..256 {
            assert_eq!(g.tensor().data()[p], id.tensor().data()[p] + 0.5);
            assert_eq!(g.tensor().data()[256 + p], id.tensor().data()[256 + p]);
        }
    }

    #[test]
    fn compose_degenerate_cases_are_bit_equal() {
        let mut e = AffineMatrix::<f64>::identity(2).entries().data().to_vec();
        e[0] = 0.9;
        e[2] = 0.1;
        e[4] = 1.1;
        let a = AffineMatrix::from_tensor(Tensor::new(&[2, 3], e).unwrap()).unwrap();

        let zero = DisplacementField::<f64>::zero(&[5, 5]);
        let c = compose(&a, &zero, &[5, 5]).unwrap();
        let direct = affine_grid(&a, &[5, 5]).unwrap();
        assert_eq!(c.tensor().data(), direct.tensor().data());

        let mut ud = vec![0.0f64; 50];
        for (i, v) in ud.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f64 * 0.01 - 0.05;
        }
        let u = DisplacementField::from_tensor(Tensor::new(&[2, 5, 5], ud).unwrap()).unwrap();
        let c = compose(&AffineMatrix::identity(2), &u, &[5, 5]).unwrap();
        let direct = displacement_grid(&u, &[5, 5]).unwrap();
        assert_eq!(c.tensor().data(), direct.tensor().data());
    }

    #[test]
    fn compose_translations_add() {
        let mut e = AffineMatrix::<f64>::identity(2).entries().data().to_vec();
        e[2] = 0.3;
        let a = AffineMatrix::from_tensor(Tensor::new(&[2, 3], e).unwrap()).unwrap();
        let mut ud = vec![0.2f64; 25];
        ud.extend(vec![0.0f64; 25]);
        let u = DisplacementField::from_tensor(Tensor::new(&[2, 5, 5], ud).unwrap()).unwrap();
        let c = compose(&a, &u, &[5, 5]).unwrap();
        let id = identity_grid::<f64>(&[5, 5]).unwrap();
        for p in 0..25 {
            assert_relative_eq!(
                c.tensor().data()[p],
                id.tensor().data()[p] + 0.5,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn bending_energy_examples() {
        // zero field
        let u = DisplacementField::<f64>::zero(&[5, 5]);
        assert_eq!(bending_energy(&u).unwrap().item(), 0.0);

        // affine field: u = B p + c has vanishing second differences
        let id = identity_grid::<f64>(&[6, 6]).unwrap();
        let affine_u = id.tensor().scale(0.3).add_scalar(0.05);
        let u = DisplacementField::from_tensor(affine_u).unwrap();
        assert!(bending_energy(&u).unwrap().item().abs() <= 1e-12);

        // 1-D quadratic: u(x_i) = i^2 on 7 points -> energy 5 * 2^2 = 20
        let vals: Vec<f64> = (0..7).map(|i| (i * i) as f64).collect();
        let u = DisplacementField::from_tensor(Tensor::new(&[1, 7], vals).unwrap()).unwrap();
        assert_eq!(bending_energy(&u).unwrap().item(), 20.0);
    }

    #[test]
    fn bending_energy_rejects_small_grids() {
        let u = DisplacementField::<f64>::zero(&[2, 5]);
        assert!(bending_energy(&u).is_err());
    }

    #[test]
    fn jacobian_of_identity_is_one() {
        let g = identity_grid::<f64>(&[6, 6]).unwrap();
        let map = jacobian_det_map(&g).unwrap();
        assert_eq!(map.shape, vec![4, 4]);
        for v in &map.values {
            assert_relative_eq!(*v, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn jacobian_of_uniform_scale() {
        let e = vec![0.7, 0.0, 0.0, 0.0, 0.7, 0.0];
        let a = AffineMatrix::from_tensor(Tensor::new(&[2, 3], e).unwrap()).unwrap();
        let g = affine_grid(&a, &[7, 7]).unwrap();
        for v in &jacobian_det_map(&g).unwrap().values {
            assert_relative_eq!(*v, 0.49, max_relative = 1e-9);
        }
    }

    #[test]
    fn jacobian_detects_one_dimensional_fold() {
        // p' = -p via u = -2p
        let id = identity_grid::<f64>(&[9]).unwrap();
        let u = DisplacementField::from_tensor(id.tensor().scale(-2.0)).unwrap();
        let g = displacement_grid(&u, &[9]).unwrap();
        for v in &jacobian_det_map(&g).unwrap().values {
            assert_relative_eq!(*v, -1.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn sample_constant_image_stays_constant() {
        let img = Tensor::<f64>::full(&[1, 4, 4], 0.35);
        let mut gd = vec![0.123f64; 18];
        for (i, v) in gd.iter_mut().enumerate() {
            *v = ((i * 7 % 13) as f64 / 13.0) * 1.6 - 0.8;
        }
        let g = SampleGrid::from_tensor(Tensor::new(&[2, 3, 3], gd).unwrap()).unwrap();
        let out = sample(&img, &g, Border::Clamp).unwrap();
        for v in out.data() {
            assert_eq!(*v, 0.35);
        }
    }

    #[test]
    fn sample_translation_is_exact_on_linear_images() {
        // f(y, x) = 0.25 y + 0.5 x sampled at a shifted grid equals the
        // shifted linear function on the interior.
        let n = 9usize;
        let mut img = vec![0.0f64; n * n];
        let id = identity_grid::<f64>(&[n, n]).unwrap();
        let coords = id.tensor().data();
        for p in 0..n * n {
            img[p] = 0.25 * coords[p] + 0.5 * coords[n * n + p];
        }
        let img = Tensor::new(&[1, n, n], img).unwrap();

        let delta = [0.25, -0.25];
        let mut gd = coords.to_vec();
        for p in 0..n * n {
            gd[p] += delta[0];
            gd[n * n + p] += delta[1];
        }
        let g = SampleGrid::from_tensor(Tensor::new(&[2, n, n], gd).unwrap()).unwrap();
        let out = sample(&img, &g, Border::Clamp).unwrap();
        for p in 0..n * n {
            let py = coords[p] + delta[0];
            let px = coords[n * n + p] + delta[1];
            if py.abs() <= 0.99 && px.abs() <= 0.99 {
                let expect = 0.25 * py + 0.5 * px;
                assert!((out.data()[p] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sample_grid_gradient_at_exact_corners_is_one_sided() {
        // At a coordinate exactly on a grid point the interpolant has a
        // kink; the gradient must be the right-side corner difference
        // times the normalized-to-index scale, not a function value.
        let img = Tensor::<f64>::new(&[1, 4], vec![0.0, 1.0, 3.0, 6.0]).unwrap();
        let coord = -1.0 + 2.0 / 3.0; // index 1 of extent 4
        let gt = Tensor::<f64>::new(&[1, 1], vec![coord]).unwrap().requires_grad();
        let sg = SampleGrid::from_tensor(gt.clone()).unwrap();
        let out = sample(&img, &sg, Border::Clamp).unwrap();
        assert_eq!(out.data(), &[1.0]);
        out.sum().unwrap().backward().unwrap();
        // (v[2] - v[1]) * (4 - 1) / 2 = 2 * 1.5 = 3
        assert_eq!(gt.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn zeros_border_fades_outside() {
        let img = Tensor::<f64>::full(&[1, 4, 4], 1.0);
        // one far-outside coordinate
        let gd = vec![5.0, 5.0];
        let g = SampleGrid::from_tensor(Tensor::new(&[2, 1, 1], gd).unwrap()).unwrap();
        assert_eq!(sample(&img, &g, Border::Zeros).unwrap().data(), &[0.0]);
        assert_eq!(sample(&img, &g, Border::Clamp).unwrap().data(), &[1.0]);
    }

    #[test]
    fn affine_compose_associates_with_matrix_product() {
        // Sampling through grid(A) then grid(B) equals sampling once
        // through the composed-map grid on linear images.
        let n = 11usize;
        let id = identity_grid::<f64>(&[n, n]).unwrap();
        let coords = id.tensor().data().to_vec();
        let mut img = vec![0.0f64; n * n];
        for p in 0..n * n {
            img[p] = 0.3 * coords[p] - 0.2 * coords[n * n + p] + 0.1;
        }
        let img = Tensor::new(&[1, n, n], img).unwrap();

        let a = AffineMatrix::from_tensor(
            Tensor::new(&[2, 3], vec![0.9, 0.05, 0.1, -0.04, 1.05, -0.08]).unwrap(),
        )
        .unwrap();
        let b = AffineMatrix::from_tensor(
            Tensor::new(&[2, 3], vec![1.1, -0.02, -0.05, 0.03, 0.95, 0.06]).unwrap(),
        )
        .unwrap();

        // two-pass: warp through A then through B
        let once = sample(&img, &affine_grid(&a, &[n, n]).unwrap(), Border::Clamp).unwrap();
        let twice = sample(&once, &affine_grid(&b, &[n, n]).unwrap(), Border::Clamp).unwrap();

        // single pass through the product map p -> A(B p) (backward maps
        // compose inner-to-outer)
        let ae = a.entries().data();
        let be = b.entries().data();
        let mut prod = vec![0.0f64; 6];
        for r in 0..2 {
            for c in 0..2 {
                prod[r * 3 + c] = ae[r * 3] * be[c] + ae[r * 3 + 1] * be[3 + c];
            }
            prod[r * 3 + 2] = ae[r * 3] * be[2] + ae[r * 3 + 1] * be[5] + ae[r * 3 + 2];
        }
        let ab = AffineMatrix::from_tensor(Tensor::new(&[2, 3], prod).unwrap()).unwrap();
        let direct = sample(&img, &affine_grid(&ab, &[n, n]).unwrap(), Border::Clamp).unwrap();

        for p in 0..n * n {
            let y = coords[p];
            let x = coords[n * n + p];
            // stay well inside so neither pass touches the border
            if y.abs() <= 0.6 && x.abs() <= 0.6 {
                assert!(
                    (twice.data()[p] - direct.data()[p]).abs() <= 1e-6,
                    "mismatch at {p}: {} vs {}",
                    twice.data()[p],
                    direct.data()[p]
                );
            }
        }
    }
}
