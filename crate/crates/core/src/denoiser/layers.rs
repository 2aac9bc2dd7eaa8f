//! Layers with hand-written backward passes.
//!
//! Every layer keeps its own gradient buffers; `backward` accumulates into
//! them and returns the gradient with respect to the layer input. Inputs
//! are `(N, C, H, W)` arrays in standard layout.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Axis, Ix1, Ix2};
use rand::Rng;

use crate::tensor::Real;

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: ndarray::ArrayD<F>,
    pub grad: ndarray::ArrayD<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: ndarray::ArrayD<F>) -> Self {
        let grad = ndarray::ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let value = ndarray::ArrayD::from_shape_simple_fn(shape, || {
            F::of(rng.random_range(-bound..=bound))
        });
        Self::new(value)
    }

    fn zeros(shape: &[usize]) -> Self {
        Self::new(ndarray::ArrayD::zeros(shape))
    }

    fn filled(shape: &[usize], v: F) -> Self {
        Self::new(ndarray::ArrayD::from_elem(shape, v))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    fn mat(&self) -> ArrayView2<'_, F> {
        self.value.view().into_dimensionality::<Ix2>().expect("2-d parameter")
    }

    fn grad_mat(&mut self) -> ArrayViewMut2<'_, F> {
        self.grad
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("2-d parameter")
    }

    fn vec(&self) -> ndarray::ArrayView1<'_, F> {
        self.value.view().into_dimensionality::<Ix1>().expect("1-d parameter")
    }

    fn grad_vec(&mut self) -> ndarray::ArrayViewMut1<'_, F> {
        self.grad
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("1-d parameter")
    }
}

pub fn silu<F: Real>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

/// d silu(x) / dx.
pub fn silu_grad<F: Real>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s * (F::one() + x * (F::one() - s))
}

/// `dy * silu'(x)`, in place on `dy`.
pub fn silu_backward<F: Real, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
    dy: &mut ndarray::Array<F, D>,
) {
    dy.zip_mut_with(x, |g, &v| *g *= silu_grad(v));
}

/// 2D convolution with square kernel, implemented as im2col + GEMM.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl<F: Real> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::uniform(&[out_channels, fan_in], 1.0 / (fan_in as f64).sqrt(), rng),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn zeroed(mut self) -> Self {
        self.weight.value.fill(F::zero());
        self
    }

    pub fn params_mut(&mut self) -> [&mut Param<F>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<F>; 2] {
        [&self.weight, &self.bias]
    }

    fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let mut y = Array4::<F>::zeros((n, self.out_channels, oh, ow));
        let mut col = Array2::<F>::zeros((c * self.kernel * self.kernel, oh * ow));
        let weight = self.weight.mat();
        let bias = self.bias.vec();
        for (xi, mut yi) in x.outer_iter().zip(y.outer_iter_mut()) {
            let mut yi = yi
                .view_mut()
                .into_shape_with_order((self.out_channels, oh * ow))
                .expect("contiguous output");
            for (mut row, &b) in yi.outer_iter_mut().zip(bias.iter()) {
                row.fill(b);
            }
            if self.is_pointwise() {
                let xi = xi.into_shape_with_order((c, h * w)).expect("contiguous input");
                general_mat_mul(F::one(), &weight, &xi, F::one(), &mut yi);
            } else {
                self.im2col(xi.as_slice().expect("standard layout"), (c, h, w), &mut col);
                general_mat_mul(F::one(), &weight, &col, F::one(), &mut yi);
            }
        }
        y
    }

    /// Accumulates weight/bias gradients; returns dL/dx when `input_grad` is set.
    pub fn backward(&mut self, x: &Array4<F>, dy: &Array4<F>, input_grad: bool) -> Option<Array4<F>> {
        let (n, c, h, w) = x.dim();
        let (_, oc, oh, ow) = dy.dim();
        let k2 = self.kernel * self.kernel;
        let mut col = Array2::<F>::zeros((c * k2, oh * ow));
        let mut dcol = Array2::<F>::zeros((c * k2, oh * ow));
        let mut dx = input_grad.then(|| Array4::<F>::zeros((n, c, h, w)));
        let weight = self.weight.value.clone().into_dimensionality::<Ix2>().expect("2-d");
        {
            let mut db = self.bias.grad_vec();
            for dyi in dy.outer_iter() {
                for (g, plane) in db.iter_mut().zip(dyi.outer_iter()) {
                    *g += plane.sum();
                }
            }
        }
        let mut wgrad = std::mem::take(&mut self.weight.grad)
            .into_dimensionality::<Ix2>()
            .expect("2-d");
        let dw = &mut wgrad;
        for (i, (xi, dyi)) in x.outer_iter().zip(dy.outer_iter()).enumerate() {
            let dyi = dyi.into_shape_with_order((oc, oh * ow)).expect("contiguous grad");
            if self.is_pointwise() {
                let xi = xi.into_shape_with_order((c, h * w)).expect("contiguous input");
                general_mat_mul(F::one(), &dyi, &xi.t(), F::one(), dw);
                if let Some(dx) = dx.as_mut() {
                    let mut dxi = dx
                        .index_axis_mut(Axis(0), i)
                        .into_shape_with_order((c, h * w))
                        .expect("contiguous");
                    general_mat_mul(F::one(), &weight.t(), &dyi, F::zero(), &mut dxi);
                }
            } else {
                self.im2col(xi.as_slice().expect("standard layout"), (c, h, w), &mut col);
                general_mat_mul(F::one(), &dyi, &col.t(), F::one(), dw);
                if let Some(dx) = dx.as_mut() {
                    general_mat_mul(F::one(), &weight.t(), &dyi, F::zero(), &mut dcol);
                    let mut dxi = dx.index_axis_mut(Axis(0), i);
                    self.col2im(
                        dcol.as_slice().expect("standard layout"),
                        (c, h, w),
                        dxi.as_slice_mut().expect("standard layout"),
                    );
                }
            }
        }
        self.weight.grad = wgrad.into_dyn();
        dx
    }

    fn im2col(&self, x: &[F], (c, h, w): (usize, usize, usize), col: &mut Array2<F>) {
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let col = col.as_slice_mut().expect("standard layout");
        let ohw = oh * ow;
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let dst = &mut col[row * ohw..(row + 1) * ohw];
                    let (lo, hi) = valid_range(kx, s, p, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out.fill(F::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        out[..lo].fill(F::zero());
                        out[hi..].fill(F::zero());
                        if s == 1 {
                            let start = (lo + kx) as isize - p;
                            let start = start as usize;
                            out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (ox, v) in out.iter_mut().enumerate().take(hi).skip(lo) {
                                *v = src[((ox * s + kx) as isize - p) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[F], (c, h, w): (usize, usize, usize), x: &mut [F]) {
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let ohw = oh * ow;
        for ch in 0..c {
            let plane = &mut x[ch * h * w..(ch + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let src = &col[row * ohw..(row + 1) * ohw];
                    let (lo, hi) = valid_range(kx, s, p, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let g = &src[oy * ow..(oy + 1) * ow];
                        for ox in lo..hi {
                            dst[((ox * s + kx) as isize - p) as usize] += g[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox * s + kx - p` lies in `0..w`.
fn valid_range(kx: usize, s: usize, p: isize, w: usize, ow: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < ow && ((lo * s + kx) as isize) < p {
        lo += 1;
    }
    let mut hi = ow;
    while hi > lo && ((hi - 1) * s + kx) as isize - p >= w as isize {
        hi -= 1;
    }
    (lo, hi)
}

/// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x upsampling).
#[derive(Debug, Clone, PartialEq)]
pub struct Upsample2x<F> {
    /// `(C_in, C_out * 4)`, columns ordered `(c_out, dy, dx)`.
    pub weight: Param<F>,
    pub bias: Param<F>,
    in_channels: usize,
    out_channels: usize,
}

impl<F: Real> Upsample2x<F> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_channels as f64).sqrt();
        Self {
            weight: Param::uniform(&[in_channels, out_channels * 4], bound, rng),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
        }
    }

    pub fn params_mut(&mut self) -> [&mut Param<F>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<F>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "upsample input channels");
        let oc = self.out_channels;
        let mut y = Array4::<F>::zeros((n, oc, 2 * h, 2 * w));
        let mut z = Array2::<F>::zeros((oc * 4, h * w));
        let weight = self.weight.mat();
        let bias = self.bias.vec();
        for (xi, mut yi) in x.outer_iter().zip(y.outer_iter_mut()) {
            let xi = xi.into_shape_with_order((c, h * w)).expect("contiguous input");
            general_mat_mul(F::one(), &weight.t(), &xi, F::zero(), &mut z);
            let z = z.as_slice().expect("standard layout");
            let yi = yi.as_slice_mut().expect("standard layout");
            for co in 0..oc {
                let b = bias[co];
                for a in 0..2 {
                    for d in 0..2 {
                        let zrow = &z[((co * 4) + a * 2 + d) * h * w..][..h * w];
                        for i in 0..h {
                            let out = &mut yi[(co * 2 * h + 2 * i + a) * 2 * w..][..2 * w];
                            for j in 0..w {
                                out[2 * j + d] = zrow[i * w + j] + b;
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let oc = self.out_channels;
        let mut dz = Array2::<F>::zeros((oc * 4, h * w));
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        let weight = self.weight.value.clone().into_dimensionality::<Ix2>().expect("2-d");
        for (i, (xi, dyi)) in x.outer_iter().zip(dy.outer_iter()).enumerate() {
            {
                let mut db = self.bias.grad_vec();
                for (g, plane) in db.iter_mut().zip(dyi.outer_iter()) {
                    *g += plane.sum();
                }
            }
            let dyi = dyi.as_slice().expect("standard layout");
            {
                let dzs = dz.as_slice_mut().expect("standard layout");
                for co in 0..oc {
                    for a in 0..2 {
                        for d in 0..2 {
                            let zrow = &mut dzs[((co * 4) + a * 2 + d) * h * w..][..h * w];
                            for r in 0..h {
                                let g = &dyi[(co * 2 * h + 2 * r + a) * 2 * w..][..2 * w];
                                for j in 0..w {
                                    zrow[r * w + j] = g[2 * j + d];
                                }
                            }
                        }
                    }
                }
            }
            let xi = xi.into_shape_with_order((c, h * w)).expect("contiguous input");
            general_mat_mul(F::one(), &xi, &dz.t(), F::one(), &mut self.weight.grad_mat());
            let mut dxi = dx
                .index_axis_mut(Axis(0), i)
                .into_shape_with_order((c, h * w))
                .expect("contiguous");
            general_mat_mul(F::one(), &weight, &dz, F::zero(), &mut dxi);
        }
        dx
    }
}

/// Group normalization with a per-channel affine transform.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    groups: usize,
    eps: f64,
}

pub struct GroupNormCache<F> {
    xhat: Array4<F>,
    inv_std: Vec<F>,
}

impl<F> GroupNormCache<F> {
    /// The normalized (pre-affine) input.
    pub fn normalized(&self) -> &Array4<F> {
        &self.xhat
    }
}

/// Largest divisor of `channels` not exceeding `groups`.
pub fn clamp_groups(groups: usize, channels: usize) -> usize {
    (1..=groups.min(channels).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl<F: Real> GroupNorm<F> {
    pub fn new(groups: usize, channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], F::one()),
            beta: Param::zeros(&[channels]),
            groups: clamp_groups(groups, channels),
            eps: 1e-5,
        }
    }

    pub fn params_mut(&mut self) -> [&mut Param<F>; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> [&Param<F>; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, GroupNormCache<F>) {
        let (n, c, h, w) = x.dim();
        let cpg = c / self.groups;
        let group_len = cpg * h * w;
        let mut xhat = x.to_owned();
        let mut y = Array4::<F>::zeros((n, c, h, w));
        let mut inv_std = Vec::with_capacity(n * self.groups);
        let gamma = self.gamma.vec();
        let beta = self.beta.vec();
        let eps = F::of(self.eps);
        let xs = xhat.as_slice_mut().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        for (gi, (block, out)) in xs
            .chunks_mut(group_len)
            .zip(ys.chunks_mut(group_len))
            .enumerate()
        {
            let len = F::of(group_len as f64);
            let mean = block.iter().copied().sum::<F>() / len;
            let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / len;
            let inv = F::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let first_channel = (gi % self.groups) * cpg;
            for (k, (xc, oc)) in block.chunks_mut(h * w).zip(out.chunks_mut(h * w)).enumerate() {
                let (g, b) = (gamma[first_channel + k], beta[first_channel + k]);
                for (v, o) in xc.iter_mut().zip(oc.iter_mut()) {
                    *v = (*v - mean) * inv;
                    *o = *v * g + b;
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &GroupNormCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (_, c, h, w) = dy.dim();
        let cpg = c / self.groups;
        let hw = h * w;
        let group_len = cpg * hw;
        let gamma = self.gamma.value.clone().into_dimensionality::<Ix1>().expect("1-d");
        let mut dgamma = Array1::<F>::zeros(c);
        let mut dbeta = Array1::<F>::zeros(c);
        let mut dx = Array4::<F>::zeros(dy.raw_dim());
        let xs = cache.xhat.as_slice().expect("standard layout");
        let dys = dy.as_slice().expect("standard layout");
        let dxs = dx.as_slice_mut().expect("standard layout");
        let len = F::of(group_len as f64);
        for (gi, ((xb, gb), db)) in xs
            .chunks(group_len)
            .zip(dys.chunks(group_len))
            .zip(dxs.chunks_mut(group_len))
            .enumerate()
        {
            let first_channel = (gi % self.groups) * cpg;
            let mut sum_g = F::zero();
            let mut sum_gx = F::zero();
            for (k, (xc, gc)) in xb.chunks(hw).zip(gb.chunks(hw)).enumerate() {
                let ch = first_channel + k;
                let (mut dg, mut dbt) = (F::zero(), F::zero());
                for (&xv, &gv) in xc.iter().zip(gc) {
                    dg += gv * xv;
                    dbt += gv;
                }
                dgamma[ch] += dg;
                dbeta[ch] += dbt;
                sum_g += dbt * gamma[ch];
                sum_gx += dg * gamma[ch];
            }
            let mean_g = sum_g / len;
            let mean_gx = sum_gx / len;
            let inv = cache.inv_std[gi];
            for (k, ((xc, gc), dc)) in xb.chunks(hw).zip(gb.chunks(hw)).zip(db.chunks_mut(hw)).enumerate() {
                let gm = gamma[first_channel + k];
                for ((&xv, &gv), d) in xc.iter().zip(gc).zip(dc.iter_mut()) {
                    *d = inv * (gv * gm - mean_g - xv * mean_gx);
                }
            }
        }
        self.gamma.grad_vec().zip_mut_with(&dgamma, |a, &b| *a += b);
        self.beta.grad_vec().zip_mut_with(&dbeta, |a, &b| *a += b);
        dx
    }
}

/// Fully connected layer on `(N, in)` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `(out, in)`.
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::uniform(&[outputs, inputs], 1.0 / (inputs as f64).sqrt(), rng),
            bias: Param::zeros(&[outputs]),
        }
    }

    pub fn params_mut(&mut self) -> [&mut Param<F>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<F>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight.mat().t());
        y += &self.bias.vec();
        y
    }

    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        general_mat_mul(F::one(), &dy.t(), x, F::one(), &mut self.weight.grad_mat());
        self.bias.grad_vec().zip_mut_with(&dy.sum_axis(Axis(0)), |a, &b| *a += b);
        dy.dot(&self.weight.mat())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random4(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    /// Direct convolution oracle.
    fn conv_naive(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (conv.out_size(h), conv.out_size(w));
        let k = conv.kernel;
        let wt = conv.weight.mat();
        Array4::from_shape_fn((n, conv.out_channels, oh, ow), |(b, o, y, xx)| {
            let mut acc = conv.bias.vec()[o];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (y * conv.stride + ky) as isize - conv.padding as isize;
                        let ix = (xx * conv.stride + kx) as isize - conv.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt[[o, (ci * k + ky) * k + kx]] * x[[b, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, s, p, &mut rng);
            conv.bias.value.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            let x = random4((2, 3, 6, 8), &mut rng);
            let got = conv.forward(&x);
            let want = conv_naive(&conv, &x);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Checks `backward` of a layer with scalar objective sum(y * r).
    fn check_input_grad(
        forward: &dyn Fn(&Array4<f64>) -> Array4<f64>,
        analytic: &Array4<f64>,
        x: &Array4<f64>,
        r: &Array4<f64>,
    ) {
        let h = 1e-6;
        for idx in [0usize, 7, 19, x.len() - 1] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fp = (forward(&xp) * r).sum();
            let fm = (forward(&xm) * r).sum();
            let num = (fp - fm) / (2.0 * h);
            let ana = analytic.as_slice().unwrap()[idx];
            assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()), "idx {idx}: {num} vs {ana}");
        }
    }

    #[test]
    fn conv_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, s, p, &mut rng);
            let x = random4((2, 2, 6, 6), &mut rng);
            let y = conv.forward(&x);
            let r = Array4::from_shape_simple_fn(y.raw_dim(), || rng.random_range(-1.0..1.0));
            let dx = conv.backward(&x, &r, true).unwrap();
            let frozen = conv.clone();
            check_input_grad(&|x| frozen.forward(x), &dx, &x, &r);
        }
    }

    #[test]
    fn upsample_input_gradient_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut up = Upsample2x::<f64>::new(3, 2, &mut rng);
        let x = random4((2, 3, 3, 4), &mut rng);
        let y = up.forward(&x);
        assert_eq!(y.dim(), (2, 2, 6, 8));
        let r = Array4::from_shape_simple_fn(y.raw_dim(), || rng.random_range(-1.0..1.0));
        let dx = up.backward(&x, &r);
        let frozen = up.clone();
        check_input_grad(&|x| frozen.forward(x), &dx, &x, &r);
    }

    #[test]
    fn groupnorm_normalizes_and_backprops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut gn = GroupNorm::<f64>::new(2, 4);
        gn.gamma.value.mapv_inplace(|_| rng.random_range(0.5..1.5));
        let x = random4((2, 4, 3, 3), &mut rng);
        let (y, cache) = gn.forward(&x);
        let xs = cache.normalized().as_slice().unwrap();
        for g in xs.chunks(2 * 9) {
            let mean: f64 = g.iter().sum::<f64>() / g.len() as f64;
            let var: f64 = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / g.len() as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
        }
        let r = Array4::from_shape_simple_fn(y.raw_dim(), || rng.random_range(-1.0..1.0));
        let dx = gn.backward(&cache, &r);
        let frozen = gn.clone();
        check_input_grad(&|x| frozen.forward(x).0, &dx, &x, &r);
    }

    #[test]
    fn groups_clamped_to_divisor() {
        assert_eq!(clamp_groups(8, 4), 4);
        assert_eq!(clamp_groups(8, 12), 6);
        assert_eq!(clamp_groups(8, 1), 1);
        assert_eq!(clamp_groups(8, 64), 8);
    }

    #[test]
    fn silu_derivative() {
        for x in [-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let num = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((num - silu_grad(x)).abs() < 1e-8);
        }
    }
}
