//! Convolution, normalization, linear and activation layers with analytic
//! backward passes. Layouts: feature maps are HWC ([`LatentGrid`]), conv
//! weights are `[out, kh, kw, in]` so the innermost loop runs over the
//! contiguous channel dimension on both sides.

use super::{Mat, Tensor};
use crate::{fl, LatentGrid, Scalar};
use rand::Rng;

#[inline]
pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
pub fn silu_grad_scalar<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

pub fn silu_grid<T: Scalar>(x: &LatentGrid<T>) -> LatentGrid<T> {
    x.map(silu_scalar)
}

/// dL/dx for y = silu(x), given dL/dy and the cached input.
pub fn silu_grid_backward<T: Scalar>(x: &LatentGrid<T>, dy: &LatentGrid<T>) -> LatentGrid<T> {
    x.zip_map(dy, |xv, d| d * silu_grad_scalar(xv)).expect("silu shapes")
}

/// Fully connected layer, weight stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            w: Tensor::randn(&[out_dim, in_dim], std, rng),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: Tensor::zeros(&[out_dim, in_dim]),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    /// y = W·x + b for a single vector.
    pub fn forward_vec(&self, x: &[T]) -> Vec<T> {
        let (out_dim, in_dim) = (self.out_dim(), self.in_dim());
        debug_assert_eq!(x.len(), in_dim);
        let mut y = self.b.data().to_vec();
        for o in 0..out_dim {
            let wrow = &self.w.data()[o * in_dim..(o + 1) * in_dim];
            let mut acc = T::zero();
            for (&wv, &xv) in wrow.iter().zip(x) {
                acc += wv * xv;
            }
            y[o] += acc;
        }
        y
    }

    /// Backward for the single-vector forward; returns dL/dx.
    pub fn backward_vec(&self, x: &[T], dy: &[T], grad: &mut Linear<T>) -> Vec<T> {
        let (out_dim, in_dim) = (self.out_dim(), self.in_dim());
        let mut dx = vec![T::zero(); in_dim];
        for o in 0..out_dim {
            let d = dy[o];
            grad.b.data_mut()[o] += d;
            let wrow = &self.w.data()[o * in_dim..(o + 1) * in_dim];
            let gwrow = &mut grad.w.data_mut()[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                gwrow[i] += d * x[i];
                dx[i] += d * wrow[i];
            }
        }
        dx
    }

    /// Row-wise application to a token matrix.
    pub fn forward_rows(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = Mat::zeros(x.rows, self.out_dim());
        for r in 0..x.rows {
            let out = self.forward_vec(x.row(r));
            y.row_mut(r).copy_from_slice(&out);
        }
        y
    }
}

/// 2-D convolution over HWC grids; weight `[kh, kw, in, out]` so the output
/// channel runs innermost and each tap is a rank-1 update the compiler can
/// vectorize (no float reductions in the hot loop).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            w: Tensor::kaiming(&[kernel, kernel, in_ch, out_ch], fan_in, rng),
            b: Tensor::zeros(&[out_ch]),
            stride,
            pad,
        }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            w: Tensor::zeros(&[kernel, kernel, in_ch, out_ch]),
            b: Tensor::zeros(&[out_ch]),
            stride,
            pad,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.w.shape()[3]
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_ch(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn out_size(&self, in_size: usize) -> usize {
        (in_size + 2 * self.pad - self.kernel()) / self.stride + 1
    }

    /// Flat index of the weight block for tap (ky, kx).
    #[inline]
    fn tap_base(&self, ky: usize, kx: usize) -> usize {
        (ky * self.kernel() + kx) * self.in_ch() * self.out_ch()
    }

    pub fn forward(&self, x: &LatentGrid<T>) -> LatentGrid<T> {
        let (h, w, cin) = x.shape();
        debug_assert_eq!(cin, self.in_ch(), "conv input channels");
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let (cout, k) = (self.out_ch(), self.kernel());
        let mut out = LatentGrid::zeros(oh, ow, cout);
        let wdata = self.w.data();
        let bdata = self.b.data();
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = (oy * ow + ox) * cout;
                let ocell = &mut out.values_mut()[obase..obase + cout];
                ocell.copy_from_slice(bdata);
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xcell = x.cell(iy as usize, ix as usize);
                        let tap = &wdata[self.tap_base(ky, kx)..self.tap_base(ky, kx) + cin * cout];
                        for (i, &xv) in xcell.iter().enumerate() {
                            let wrow = &tap[i * cout..(i + 1) * cout];
                            for (o, &wv) in ocell.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Backward pass; accumulates weight/bias grads and returns dL/dx.
    pub fn backward(
        &self,
        x: &LatentGrid<T>,
        dy: &LatentGrid<T>,
        grad: &mut Conv2d<T>,
    ) -> LatentGrid<T> {
        let (h, w, cin) = x.shape();
        let (oh, ow, cout) = dy.shape();
        debug_assert_eq!(cout, self.out_ch());
        let k = self.kernel();
        let mut dx = LatentGrid::zeros(h, w, cin);
        let wdata = self.w.data();

        // transposed taps [ky][kx][out][in] so dx is also a rank-1 update
        let mut wt = vec![T::zero(); wdata.len()];
        for ky in 0..k {
            for kx in 0..k {
                let base = self.tap_base(ky, kx);
                for i in 0..cin {
                    for o in 0..cout {
                        wt[base + o * cin + i] = wdata[base + i * cout + o];
                    }
                }
            }
        }

        for oy in 0..oh {
            for ox in 0..ow {
                let dcell = dy.cell(oy, ox);
                for (gb, &d) in grad.b.data_mut().iter_mut().zip(dcell) {
                    *gb += d;
                }
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let (iy, ix) = (iy as usize, ix as usize);
                        let base = self.tap_base(ky, kx);
                        let xbase = (iy * w + ix) * cin;
                        let xcell = &x.values()[xbase..xbase + cin];
                        let gtap = &mut grad.w.data_mut()[base..base + cin * cout];
                        for (i, &xv) in xcell.iter().enumerate() {
                            let grow = &mut gtap[i * cout..(i + 1) * cout];
                            for (g, &d) in grow.iter_mut().zip(dcell) {
                                *g += xv * d;
                            }
                        }
                        let dxcell = &mut dx.values_mut()[xbase..xbase + cin];
                        let wtap = &wt[base..base + cin * cout];
                        for (o, &d) in dcell.iter().enumerate() {
                            let wrow = &wtap[o * cin..(o + 1) * cin];
                            for (dxv, &wv) in dxcell.iter_mut().zip(wrow) {
                                *dxv += d * wv;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Group normalization over (H, W, C/groups) slices with learned scale/shift.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm<T> {
    pub groups: usize,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

/// Largest of {8, 4, 2, 1} dividing the channel count.
pub fn norm_groups(channels: usize) -> usize {
    for g in [8usize, 4, 2, 1] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

/// Saved statistics for the GroupNorm backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache<T> {
    pub xhat: LatentGrid<T>,
    pub inv_std: Vec<T>,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(channels: usize) -> Self {
        let mut gamma = Tensor::zeros(&[channels]);
        gamma.fill(T::one());
        Self {
            groups: norm_groups(channels),
            gamma,
            beta: Tensor::zeros(&[channels]),
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &LatentGrid<T>) -> (LatentGrid<T>, GroupNormCache<T>) {
        let (h, w, c) = x.shape();
        debug_assert_eq!(c, self.channels());
        let gsize = c / self.groups;
        let n_per_group = h * w * gsize;
        let cells = h * w;
        let mut xhat = LatentGrid::zeros(h, w, c);
        let mut inv_std = vec![T::zero(); self.groups];
        let mut out = LatentGrid::zeros(h, w, c);
        for g in 0..self.groups {
            let c0 = g * gsize;
            let mut mean = T::zero();
            for cell in 0..cells {
                let row = &x.values()[cell * c + c0..cell * c + c0 + gsize];
                for &v in row {
                    mean += v;
                }
            }
            mean = mean / fl::<T>(n_per_group as f64);
            let mut var = T::zero();
            for cell in 0..cells {
                let row = &x.values()[cell * c + c0..cell * c + c0 + gsize];
                for &v in row {
                    let d = v - mean;
                    var += d * d;
                }
            }
            var = var / fl::<T>(n_per_group as f64);
            let istd = T::one() / (var + fl::<T>(self.eps)).sqrt();
            inv_std[g] = istd;
            let gamma = &self.gamma.data()[c0..c0 + gsize];
            let beta = &self.beta.data()[c0..c0 + gsize];
            for cell in 0..cells {
                let src = &x.values()[cell * c + c0..cell * c + c0 + gsize];
                let base = cell * c + c0;
                for i in 0..gsize {
                    let xh = (src[i] - mean) * istd;
                    xhat.values_mut()[base + i] = xh;
                    out.values_mut()[base + i] = gamma[i] * xh + beta[i];
                }
            }
        }
        (out, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &GroupNormCache<T>,
        dy: &LatentGrid<T>,
        grad: &mut GroupNorm<T>,
    ) -> LatentGrid<T> {
        let (h, w, c) = dy.shape();
        let gsize = c / self.groups;
        let n = fl::<T>((h * w * gsize) as f64);
        let cells = h * w;
        let mut dx = LatentGrid::zeros(h, w, c);

        // per-channel parameter grads
        for cell in 0..cells {
            let dyr = &dy.values()[cell * c..(cell + 1) * c];
            let xhr = &cache.xhat.values()[cell * c..(cell + 1) * c];
            for cc in 0..c {
                grad.gamma.data_mut()[cc] += dyr[cc] * xhr[cc];
                grad.beta.data_mut()[cc] += dyr[cc];
            }
        }

        for g in 0..self.groups {
            let c0 = g * gsize;
            let istd = cache.inv_std[g];
            let gamma = &self.gamma.data()[c0..c0 + gsize];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for cell in 0..cells {
                let base = cell * c + c0;
                let dyr = &dy.values()[base..base + gsize];
                let xhr = &cache.xhat.values()[base..base + gsize];
                for i in 0..gsize {
                    let dxhat = dyr[i] * gamma[i];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhr[i];
                }
            }
            for cell in 0..cells {
                let base = cell * c + c0;
                for i in 0..gsize {
                    let dxhat = dy.values()[base + i] * gamma[i];
                    let xh = cache.xhat.values()[base + i];
                    dx.values_mut()[base + i] =
                        (dxhat * n - sum_dxhat - xh * sum_dxhat_xhat) * istd / n;
                }
            }
        }
        dx
    }
}

/// Per-token layer normalization over the channel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Mat<T>,
    pub inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(channels: usize) -> Self {
        let mut gamma = Tensor::zeros(&[channels]);
        gamma.fill(T::one());
        Self {
            gamma,
            beta: Tensor::zeros(&[channels]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, LayerNormCache<T>) {
        let c = x.cols;
        let n = fl::<T>(c as f64);
        let mut xhat = Mat::zeros(x.rows, c);
        let mut inv_std = vec![T::zero(); x.rows];
        let mut out = Mat::zeros(x.rows, c);
        for r in 0..x.rows {
            let row = x.row(r);
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean = mean / n;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var / n;
            let istd = T::one() / (var + fl::<T>(self.eps)).sqrt();
            inv_std[r] = istd;
            for cc in 0..c {
                let xh = (row[cc] - mean) * istd;
                xhat.set(r, cc, xh);
                out.set(r, cc, self.gamma.data()[cc] * xh + self.beta.data()[cc]);
            }
        }
        (out, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Mat<T>, grad: &mut LayerNorm<T>) -> Mat<T> {
        let c = dy.cols;
        let n = fl::<T>(c as f64);
        let mut dx = Mat::zeros(dy.rows, c);
        for r in 0..dy.rows {
            let istd = cache.inv_std[r];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for cc in 0..c {
                let d = dy.get(r, cc);
                let xh = cache.xhat.get(r, cc);
                grad.gamma.data_mut()[cc] += d * xh;
                grad.beta.data_mut()[cc] += d;
                let dxhat = d * self.gamma.data()[cc];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xh;
            }
            for cc in 0..c {
                let dxhat = dy.get(r, cc) * self.gamma.data()[cc];
                let xh = cache.xhat.get(r, cc);
                dx.set(r, cc, (dxhat * n - sum_dxhat - xh * sum_dxhat_xhat) * istd / n);
            }
        }
        dx
    }
}

/// Bias-corrected Adam update for one parameter tensor.
#[allow(clippy::too_many_arguments)]
pub fn adam_update_tensor<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
) {
    let b1 = fl::<T>(beta1);
    let b2 = fl::<T>(beta2);
    let one = T::one();
    let bc1 = fl::<T>(1.0 - beta1.powi(step as i32));
    let bc2 = fl::<T>(1.0 - beta2.powi(step as i32));
    let lr_t = fl::<T>(lr);
    let eps_t = fl::<T>(eps);
    for i in 0..param.len() {
        let g = grad.data()[i];
        let mi = b1 * m.data()[i] + (one - b1) * g;
        let vi = b2 * v.data()[i] + (one - b2) * g * g;
        m.data_mut()[i] = mi;
        v.data_mut()[i] = vi;
        let mhat = mi / bc1;
        let vhat = vi / bc2;
        param.data_mut()[i] = param.data()[i] - lr_t * mhat / (vhat.sqrt() + eps_t);
    }
}

/// Nearest-neighbor 2x spatial upsampling.
pub fn upsample2_nearest<T: Scalar>(x: &LatentGrid<T>) -> LatentGrid<T> {
    let (h, w, c) = x.shape();
    LatentGrid::from_fn(h * 2, w * 2, c, |y, xw, cc| x.get(y / 2, xw / 2, cc))
}

/// Backward of nearest 2x upsampling: sum gradients over each 2x2 block.
pub fn upsample2_nearest_backward<T: Scalar>(dy: &LatentGrid<T>) -> LatentGrid<T> {
    let (h2, w2, c) = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = LatentGrid::zeros(h, w, c);
    for y in 0..h2 {
        for xw in 0..w2 {
            for cc in 0..c {
                let v = dx.get(y / 2, xw / 2, cc) + dy.get(y, xw, cc);
                dx.set(y / 2, xw / 2, cc, v);
            }
        }
    }
    dx
}

/// Concatenate two grids along the channel axis.
pub fn concat_channels<T: Scalar>(a: &LatentGrid<T>, b: &LatentGrid<T>) -> LatentGrid<T> {
    assert_eq!((a.height(), a.width()), (b.height(), b.width()), "concat spatial dims");
    let (h, w, ca) = a.shape();
    let cb = b.channels();
    let mut out = LatentGrid::zeros(h, w, ca + cb);
    let cells = h * w;
    for cell in 0..cells {
        let dst = &mut out.values_mut()[cell * (ca + cb)..(cell + 1) * (ca + cb)];
        dst[..ca].copy_from_slice(&a.values()[cell * ca..(cell + 1) * ca]);
        dst[ca..].copy_from_slice(&b.values()[cell * cb..(cell + 1) * cb]);
    }
    out
}

/// Split a channel-concatenated gradient back into the two parts.
pub fn split_channels<T: Scalar>(d: &LatentGrid<T>, ca: usize) -> (LatentGrid<T>, LatentGrid<T>) {
    let (h, w, c) = d.shape();
    let cb = c - ca;
    let mut da = LatentGrid::zeros(h, w, ca);
    let mut db = LatentGrid::zeros(h, w, cb);
    let cells = h * w;
    for cell in 0..cells {
        let src = &d.values()[cell * c..(cell + 1) * c];
        da.values_mut()[cell * ca..(cell + 1) * ca].copy_from_slice(&src[..ca]);
        db.values_mut()[cell * cb..(cell + 1) * cb].copy_from_slice(&src[ca..]);
    }
    (da, db)
}
