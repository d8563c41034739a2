//! Minimal 3D convolution engine with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so training runs in `f32` while gradient checks
//! run the identical code in `f64`. Feature maps are channel-major `(C, H, W, D)` buffers.
//! Convolutions use replicate padding, so a constant input stays constant through every
//! layer.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `C = alpha * A * B + beta * C` for strided row/column layouts.
    ///
    /// # Safety
    /// All pointers must be valid for the extents implied by the dimensions and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits the float type")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A matrix operand: a slice plus (row stride, column stride).
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

fn max_offset(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c (m x n, row-major) = a (m x k) * b (k x n) + beta * c`.
pub(crate) fn gemm<T: Real>(m: usize, k: usize, n: usize, a: Mat<T>, b: Mat<T>, beta: T, c: &mut [T]) {
    assert!(a.data.len() >= max_offset(m, k, a.rs, a.cs));
    assert!(b.data.len() >= max_offset(k, n, b.rs, b.cs));
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: extents were checked above; `c` is exclusively borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Channel-major feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature<T> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> Feature<T> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![T::zero(); channels * dims.iter().product::<usize>()],
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn add_assign(&mut self, other: &Feature<T>) {
        assert_eq!(self.dims, other.dims);
        assert_eq!(self.channels, other.channels);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks channels of `a` then `b`.
    pub fn concat(a: &Feature<T>, b: &Feature<T>) -> Feature<T> {
        assert_eq!(a.dims, b.dims);
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Feature {
            channels: a.channels + b.channels,
            dims: a.dims,
            data,
        }
    }

    /// Inverse of [`Feature::concat`] for gradients.
    pub fn split(self, first: usize) -> (Feature<T>, Feature<T>) {
        let v = self.voxels();
        let mut data = self.data;
        let rest = data.split_off(first * v);
        (
            Feature {
                channels: first,
                dims: self.dims,
                data,
            },
            Feature {
                channels: self.channels - first,
                dims: self.dims,
                data: rest,
            },
        )
    }

    /// Extends the grid to `dims` by repeating the last slice along each axis.
    pub fn pad_replicate(&self, dims: [usize; 3]) -> Feature<T> {
        if dims == self.dims {
            return self.clone();
        }
        let [h, w, d] = self.dims;
        let mut out = Feature::zeros(self.channels, dims);
        for c in 0..self.channels {
            for i in 0..dims[0] {
                for j in 0..dims[1] {
                    let src = ((c * h + i.min(h - 1)) * w + j.min(w - 1)) * d;
                    let dst = ((c * dims[0] + i) * dims[1] + j) * dims[2];
                    for k in 0..dims[2] {
                        out.data[dst + k] = self.data[src + k.min(d - 1)];
                    }
                }
            }
        }
        out
    }

    /// Keeps the leading `dims` block.
    pub fn crop(&self, dims: [usize; 3]) -> Feature<T> {
        if dims == self.dims {
            return self.clone();
        }
        let [h, w, d] = self.dims;
        let mut out = Feature::zeros(self.channels, dims);
        for c in 0..self.channels {
            for i in 0..dims[0] {
                for j in 0..dims[1] {
                    let src = ((c * h + i) * w + j) * d;
                    let dst = ((c * dims[0] + i) * dims[1] + j) * dims[2];
                    out.data[dst..dst + dims[2]].copy_from_slice(&self.data[src..src + dims[2]]);
                }
            }
        }
        out
    }

    /// Zero-extends to `dims`; the adjoint of [`Feature::crop`].
    pub fn pad_zero(&self, dims: [usize; 3]) -> Feature<T> {
        if dims == self.dims {
            return self.clone();
        }
        let [h, w, d] = self.dims;
        let mut out = Feature::zeros(self.channels, dims);
        for c in 0..self.channels {
            for i in 0..h {
                for j in 0..w {
                    let src = ((c * h + i) * w + j) * d;
                    let dst = ((c * dims[0] + i) * dims[1] + j) * dims[2];
                    out.data[dst..dst + d].copy_from_slice(&self.data[src..src + d]);
                }
            }
        }
        out
    }

    /// Adjoint of [`Feature::pad_replicate`]: folds the padded border back onto the edge.
    pub fn fold_replicate(&self, dims: [usize; 3]) -> Feature<T> {
        if dims == self.dims {
            return self.clone();
        }
        let [ph, pw, pd] = self.dims;
        let [h, w, d] = dims;
        let mut out = Feature::zeros(self.channels, dims);
        for c in 0..self.channels {
            for i in 0..ph {
                for j in 0..pw {
                    let src = ((c * ph + i) * pw + j) * pd;
                    let dst = ((c * h + i.min(h - 1)) * w + j.min(w - 1)) * d;
                    for k in 0..pd {
                        out.data[dst + k.min(d - 1)] += self.data[src + k];
                    }
                }
            }
        }
        out
    }
}

/// Parameter location of one convolution inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight_offset: usize,
}

impl Conv3d {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.pow(3)
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    fn bias_offset(&self) -> usize {
        self.weight_offset + self.weight_len()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        dims.map(|n| (n + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source index along one axis for every (kernel tap, output position), clamped.
    fn taps(&self, n_in: usize, n_out: usize) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.kernel * n_out);
        for kk in 0..self.kernel {
            for o in 0..n_out {
                let pos = (o * self.stride + kk) as isize - self.pad as isize;
                t.push(pos.clamp(0, n_in as isize - 1) as usize);
            }
        }
        t
    }

    fn im2col<T: Real>(&self, x: &Feature<T>, out: [usize; 3]) -> Vec<T> {
        let [h, w, d] = x.dims;
        let nvox: usize = out.iter().product();
        let k = self.kernel;
        let (t0, t1, t2) = (self.taps(h, out[0]), self.taps(w, out[1]), self.taps(d, out[2]));
        let mut col = vec![T::zero(); self.patch_len() * nvox];
        let mut row = 0;
        for c in 0..self.in_channels {
            let xc = &x.data[c * h * w * d..(c + 1) * h * w * d];
            for k0 in 0..k {
                for k1 in 0..k {
                    for k2 in 0..k {
                        let dst = &mut col[row * nvox..(row + 1) * nvox];
                        let tz = &t2[k2 * out[2]..(k2 + 1) * out[2]];
                        let mut o = 0;
                        for &i in &t0[k0 * out[0]..(k0 + 1) * out[0]] {
                            for &j in &t1[k1 * out[1]..(k1 + 1) * out[1]] {
                                let base = (i * w + j) * d;
                                for &z in tz {
                                    dst[o] = xc[base + z];
                                    o += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Real>(&self, col: &[T], dims: [usize; 3], out: [usize; 3]) -> Feature<T> {
        let [h, w, d] = dims;
        let nvox: usize = out.iter().product();
        let k = self.kernel;
        let (t0, t1, t2) = (self.taps(h, out[0]), self.taps(w, out[1]), self.taps(d, out[2]));
        let mut x = Feature::zeros(self.in_channels, dims);
        let mut row = 0;
        for c in 0..self.in_channels {
            let xc = &mut x.data[c * h * w * d..(c + 1) * h * w * d];
            for k0 in 0..k {
                for k1 in 0..k {
                    for k2 in 0..k {
                        let src = &col[row * nvox..(row + 1) * nvox];
                        let tz = &t2[k2 * out[2]..(k2 + 1) * out[2]];
                        let mut o = 0;
                        for &i in &t0[k0 * out[0]..(k0 + 1) * out[0]] {
                            for &j in &t1[k1 * out[1]..(k1 + 1) * out[1]] {
                                let base = (i * w + j) * d;
                                for &z in tz {
                                    xc[base + z] += src[o];
                                    o += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        x
    }

    /// Returns the output and the column buffer needed by [`Conv3d::backward`].
    pub fn forward<T: Real>(&self, params: &[T], x: &Feature<T>) -> (Feature<T>, Vec<T>) {
        assert_eq!(x.channels, self.in_channels);
        let out = self.out_dims(x.dims);
        let nvox: usize = out.iter().product();
        let col = if self.is_pointwise() {
            x.data.clone()
        } else {
            self.im2col(x, out)
        };
        let weight = &params[self.weight_offset..self.bias_offset()];
        let bias = &params[self.bias_offset()..self.bias_offset() + self.out_channels];
        let mut y = Feature::zeros(self.out_channels, out);
        for (co, chunk) in y.data.chunks_mut(nvox).enumerate() {
            chunk.fill(bias[co]);
        }
        let kk = self.patch_len();
        gemm(
            self.out_channels,
            kk,
            nvox,
            Mat { data: weight, rs: kk, cs: 1 },
            Mat { data: &col, rs: nvox, cs: 1 },
            T::one(),
            &mut y.data,
        );
        (y, col)
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        col: &[T],
        in_dims: [usize; 3],
        dy: &Feature<T>,
        grads: &mut [T],
        need_input_grad: bool,
    ) -> Option<Feature<T>> {
        let nvox = dy.voxels();
        let kk = self.patch_len();
        {
            let (gw, gb) = grads[self.weight_offset..self.bias_offset() + self.out_channels]
                .split_at_mut(self.weight_len());
            gemm(
                self.out_channels,
                nvox,
                kk,
                Mat { data: &dy.data, rs: nvox, cs: 1 },
                Mat { data: col, rs: 1, cs: nvox },
                T::one(),
                gw,
            );
            for (co, g) in gb.iter_mut().enumerate() {
                *g += dy.data[co * nvox..(co + 1) * nvox].iter().copied().sum::<T>();
            }
        }
        if !need_input_grad {
            return None;
        }
        let weight = &params[self.weight_offset..self.bias_offset()];
        let mut dcol = vec![T::zero(); kk * nvox];
        gemm(
            kk,
            self.out_channels,
            nvox,
            Mat { data: weight, rs: 1, cs: kk },
            Mat { data: &dy.data, rs: nvox, cs: 1 },
            T::zero(),
            &mut dcol,
        );
        if self.is_pointwise() {
            Some(Feature {
                channels: self.in_channels,
                dims: in_dims,
                data: dcol,
            })
        } else {
            Some(self.col2im(&dcol, in_dims, dy.dims))
        }
    }
}

pub fn leaky_relu<T: Real>(x: &mut Feature<T>, slope: T) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// Backward of [`leaky_relu`] given its output `y` (the sign is unchanged by the map).
pub fn leaky_relu_backward<T: Real>(y: &Feature<T>, dy: &mut Feature<T>, slope: T) {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v < T::zero() {
            *g *= slope;
        }
    }
}

/// One-dimensional linear interpolation weights with half-pixel centers
/// (`src = (o + 0.5) * n_in / n_out - 0.5`, clamped to the grid).
#[derive(Debug, Clone)]
struct AxisInterp {
    taps: Vec<(usize, usize, f64)>,
}

impl AxisInterp {
    fn new(n_in: usize, n_out: usize) -> Self {
        let ratio = n_in as f64 / n_out as f64;
        let taps = (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect();
        Self { taps }
    }
}

fn interp_axis<T: Real>(x: &Feature<T>, axis: usize, n_out: usize) -> Feature<T> {
    let map = AxisInterp::new(x.dims[axis], n_out);
    let mut dims = x.dims;
    dims[axis] = n_out;
    // View as (outer, n, inner) along `axis`.
    let outer: usize = x.channels * x.dims[..axis].iter().product::<usize>();
    let inner: usize = x.dims[axis + 1..].iter().product();
    let n_in = x.dims[axis];
    let mut out = Feature::zeros(x.channels, dims);
    for b in 0..outer {
        let src = &x.data[b * n_in * inner..(b + 1) * n_in * inner];
        let dst = &mut out.data[b * n_out * inner..(b + 1) * n_out * inner];
        for (o, &(i0, i1, w)) in map.taps.iter().enumerate() {
            let (w1, w0) = (T::lit(w), T::lit(1.0 - w));
            for t in 0..inner {
                dst[o * inner + t] = w0 * src[i0 * inner + t] + w1 * src[i1 * inner + t];
            }
        }
    }
    out
}

fn interp_axis_adjoint<T: Real>(dy: &Feature<T>, axis: usize, n_in: usize) -> Feature<T> {
    let n_out = dy.dims[axis];
    let map = AxisInterp::new(n_in, n_out);
    let mut dims = dy.dims;
    dims[axis] = n_in;
    let outer: usize = dy.channels * dy.dims[..axis].iter().product::<usize>();
    let inner: usize = dy.dims[axis + 1..].iter().product();
    let mut dx = Feature::zeros(dy.channels, dims);
    for b in 0..outer {
        let src = &dy.data[b * n_out * inner..(b + 1) * n_out * inner];
        let dst = &mut dx.data[b * n_in * inner..(b + 1) * n_in * inner];
        for (o, &(i0, i1, w)) in map.taps.iter().enumerate() {
            let (w1, w0) = (T::lit(w), T::lit(1.0 - w));
            for t in 0..inner {
                let g = src[o * inner + t];
                dst[i0 * inner + t] += w0 * g;
                dst[i1 * inner + t] += w1 * g;
            }
        }
    }
    dx
}

/// Separable trilinear resampling to `dims`.
pub fn resize<T: Real>(x: &Feature<T>, dims: [usize; 3]) -> Feature<T> {
    let mut y = x.clone();
    for axis in 0..3 {
        if y.dims[axis] != dims[axis] {
            y = interp_axis(&y, axis, dims[axis]);
        }
    }
    y
}

/// Adjoint of [`resize`] from `in_dims`.
pub fn resize_backward<T: Real>(dy: &Feature<T>, in_dims: [usize; 3]) -> Feature<T> {
    let mut g = dy.clone();
    for axis in (0..3).rev() {
        if g.dims[axis] != in_dims[axis] {
            g = interp_axis_adjoint(&g, axis, in_dims[axis]);
        }
    }
    g
}
