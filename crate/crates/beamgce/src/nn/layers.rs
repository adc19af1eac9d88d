//! Layer primitives with explicit forward and backward passes.
//!
//! Activations are `(batch, channels, height, width)` in standard layout with
//! height = `n_t` and width = `n_r`. Convolutions use TensorFlow-style `same`
//! padding: `out = ceil(in / stride)` with the extra pad cell, when the total
//! is odd, placed at the end of the axis. The gradient-penalty double-backward
//! pass reuses the same convolution primitives, so only `forward`,
//! `backward_input` and `weight_grad` exist as building blocks.

use ndarray::prelude::*;
use rand::Rng;

/// Training / evaluation switch. Dropout and batch statistics only act in
/// [`Mode::Train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer, `y = x W^T + b`, with `w` of shape `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Option<Array1<f64>>,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| {
            std * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let b = bias.then(|| Array1::zeros(out_dim));
        Self { w, b }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        if let Some(b) = &self.b {
            y += &b.view().insert_axis(Axis(0));
        }
        y
    }

    /// Returns `(dx, dw, db)` for upstream gradient `dy`.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Option<Array1<f64>>) {
        let dw = dy.t().dot(x);
        let db = self.b.as_ref().map(|_| dy.sum_axis(Axis(0)));
        let dx = dy.dot(&self.w);
        (dx, dw, db)
    }

    pub fn backward_input(&self, dy: &Array2<f64>) -> Array2<f64> {
        dy.dot(&self.w)
    }
}

/// 2D convolution with `same` padding at a fixed stride.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(out_channels, in_channels, kh, kw)`.
    pub w: Array4<f64>,
    pub b: Option<Array1<f64>>,
    pub stride: usize,
}

fn same_pad(input: usize, kernel: usize, stride: usize) -> (usize, usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2, total - total / 2)
}

impl Conv2d {
    pub fn init<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = Array4::from_shape_fn((out_ch, in_ch, kernel.0, kernel.1), |_| {
            std * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let b = bias.then(|| Array1::zeros(out_ch));
        Self { w, b, stride }
    }

    pub fn out_hw(&self, ih: usize, iw: usize) -> (usize, usize) {
        (
            same_pad(ih, self.w.dim().2, self.stride).0,
            same_pad(iw, self.w.dim().3, self.stride).0,
        )
    }

    fn im2col(&self, x: &Array4<f64>) -> (Array2<f64>, (usize, usize)) {
        let (b, ic, ih, iw) = x.dim();
        let (_, _, kh, kw) = self.w.dim();
        let (oh, ph0, _) = same_pad(ih, kh, self.stride);
        let (ow, pw0, _) = same_pad(iw, kw, self.stride);
        let xs = x.as_slice().expect("standard layout");
        let mut col = Array2::<f64>::zeros((b * oh * ow, ic * kh * kw));
        let cs = col.as_slice_mut().expect("standard layout");
        let ck = ic * kh * kw;
        for bi in 0..b {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let row = ((bi * oh + ohi) * ow + owi) * ck;
                    for ci in 0..ic {
                        let xbase = (bi * ic + ci) * ih;
                        for khi in 0..kh {
                            let h = (ohi * self.stride + khi) as isize - ph0 as isize;
                            let dst = row + (ci * kh + khi) * kw;
                            if h < 0 || h as usize >= ih {
                                continue;
                            }
                            let xrow = (xbase + h as usize) * iw;
                            for kwi in 0..kw {
                                let w = (owi * self.stride + kwi) as isize - pw0 as isize;
                                if w < 0 || w as usize >= iw {
                                    continue;
                                }
                                cs[dst + kwi] = xs[xrow + w as usize];
                            }
                        }
                    }
                }
            }
        }
        (col, (oh, ow))
    }

    fn forward_impl(&self, x: &Array4<f64>, with_bias: bool) -> Array4<f64> {
        let (b, _, _, _) = x.dim();
        let (oc, ic, kh, kw) = self.w.dim();
        let (col, (oh, ow)) = self.im2col(x);
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((oc, ic * kh * kw))
            .expect("contiguous weights");
        let y_mat = col.dot(&w_mat.t()); // (b*oh*ow, oc)
        let mut y = Array4::<f64>::zeros((b, oc, oh, ow));
        {
            let ys = y.as_slice_mut().expect("standard layout");
            let ym = y_mat.as_slice().expect("standard layout");
            for bi in 0..b {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let src = ((bi * oh + ohi) * ow + owi) * oc;
                        for oci in 0..oc {
                            ys[((bi * oc + oci) * oh + ohi) * ow + owi] = ym[src + oci];
                        }
                    }
                }
            }
        }
        if with_bias {
            if let Some(bias) = &self.b {
                for oci in 0..oc {
                    y.slice_mut(s![.., oci, .., ..]).mapv_inplace(|v| v + bias[oci]);
                }
            }
        }
        y
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward_impl(x, true)
    }

    /// Forward through the linear part only (no bias): the adjoint of
    /// [`Conv2d::backward_input`], used by the gradient-penalty double
    /// backward.
    pub fn forward_nobias(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward_impl(x, false)
    }

    fn dy_as_mat(dy: &Array4<f64>) -> Array2<f64> {
        let (b, oc, oh, ow) = dy.dim();
        let mut m = Array2::<f64>::zeros((b * oh * ow, oc));
        let ms = m.as_slice_mut().expect("standard layout");
        let ds = dy.as_slice().expect("standard layout");
        for bi in 0..b {
            for oci in 0..oc {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        ms[((bi * oh + ohi) * ow + owi) * oc + oci] =
                            ds[((bi * oc + oci) * oh + ohi) * ow + owi];
                    }
                }
            }
        }
        m
    }

    /// Weight (and bias) gradient given the layer input and the upstream
    /// gradient at the layer output. Also used for the double-backward pass
    /// of the gradient penalty, where `input` is a perturbation rather than
    /// an activation.
    pub fn weight_grad(
        &self,
        input: &Array4<f64>,
        dy: &Array4<f64>,
    ) -> (Array4<f64>, Option<Array1<f64>>) {
        let (oc, ic, kh, kw) = self.w.dim();
        let (col, _) = self.im2col(input);
        let dy_mat = Self::dy_as_mat(dy);
        let dw_mat = dy_mat.t().dot(&col); // (oc, ic*kh*kw)
        let dw = dw_mat
            .into_shape_with_order((oc, ic, kh, kw))
            .expect("weight gradient shape");
        let db = self
            .b
            .as_ref()
            .map(|_| {
                Array1::from_shape_fn(oc, |oci| dy.slice(s![.., oci, .., ..]).sum())
            });
        (dw, db)
    }

    /// Gradient with respect to the input (the adjoint of `forward` without
    /// bias). `input_hw` is the height/width the forward pass consumed.
    pub fn backward_input(&self, dy: &Array4<f64>, input_hw: (usize, usize)) -> Array4<f64> {
        let (b, oc, oh, ow) = dy.dim();
        let (_, ic, kh, kw) = self.w.dim();
        let (ih, iw) = input_hw;
        let (_, ph0, _) = same_pad(ih, kh, self.stride);
        let (_, pw0, _) = same_pad(iw, kw, self.stride);
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((oc, ic * kh * kw))
            .expect("contiguous weights");
        let dy_mat = Self::dy_as_mat(dy);
        let dcol = dy_mat.dot(&w_mat); // (b*oh*ow, ic*kh*kw)
        let mut dx = Array4::<f64>::zeros((b, ic, ih, iw));
        let dxs = dx.as_slice_mut().expect("standard layout");
        let dcs = dcol.as_slice().expect("standard layout");
        let ck = ic * kh * kw;
        for bi in 0..b {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let row = ((bi * oh + ohi) * ow + owi) * ck;
                    for ci in 0..ic {
                        let xbase = (bi * ic + ci) * ih;
                        for khi in 0..kh {
                            let h = (ohi * self.stride + khi) as isize - ph0 as isize;
                            if h < 0 || h as usize >= ih {
                                continue;
                            }
                            let xrow = (xbase + h as usize) * iw;
                            let src = row + (ci * kh + khi) * kw;
                            for kwi in 0..kw {
                                let w = (owi * self.stride + kwi) as isize - pw0 as isize;
                                if w < 0 || w as usize >= iw {
                                    continue;
                                }
                                dxs[xrow + w as usize] += dcs[src + kwi];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Per-channel batch normalization over `(batch, height, width)`.
///
/// Running statistics follow the convention
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub enum BnCache {
    Train {
        xhat: Array4<f64>,
        inv_std: Array1<f64>,
    },
    Eval,
}

/// Batch statistics produced in training mode; fed back via
/// [`BatchNorm2d::absorb`] to update the running averages.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum,
            eps: 1e-5,
        }
    }

    /// Forward pass without touching running statistics. Training mode
    /// additionally returns the batch statistics for [`BatchNorm2d::absorb`].
    pub fn compute(&self, x: &Array4<f64>, mode: Mode) -> (Array4<f64>, BnCache, Option<BnStats>) {
        let (b, c, h, w) = x.dim();
        match mode {
            Mode::Train => {
                let n = (b * h * w) as f64;
                let mut mean = Array1::<f64>::zeros(c);
                let mut var = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let sl = x.slice(s![.., ci, .., ..]);
                    let m = sl.sum() / n;
                    mean[ci] = m;
                    var[ci] = sl.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                }
                let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
                let mut xhat = x.clone();
                for ci in 0..c {
                    let (m, is) = (mean[ci], inv_std[ci]);
                    xhat.slice_mut(s![.., ci, .., ..])
                        .mapv_inplace(|v| (v - m) * is);
                }
                let mut y = xhat.clone();
                for ci in 0..c {
                    let (g, be) = (self.gamma[ci], self.beta[ci]);
                    y.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| g * v + be);
                }
                (y, BnCache::Train { xhat, inv_std }, Some(BnStats { mean, var }))
            }
            Mode::Eval => {
                let mut y = x.clone();
                for ci in 0..c {
                    let is = 1.0 / (self.running_var[ci] + self.eps).sqrt();
                    let (m, g, be) = (self.running_mean[ci], self.gamma[ci], self.beta[ci]);
                    y.slice_mut(s![.., ci, .., ..])
                        .mapv_inplace(|v| g * (v - m) * is + be);
                }
                (y, BnCache::Eval, None)
            }
        }
    }

    /// Fold batch statistics into the running averages.
    pub fn absorb(&mut self, stats: Option<BnStats>) {
        if let Some(st) = stats {
            for ci in 0..self.running_mean.len() {
                self.running_mean[ci] =
                    self.momentum * self.running_mean[ci] + (1.0 - self.momentum) * st.mean[ci];
                self.running_var[ci] =
                    self.momentum * self.running_var[ci] + (1.0 - self.momentum) * st.var[ci];
            }
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> (Array4<f64>, BnCache) {
        let (y, cache, stats) = self.compute(x, mode);
        self.absorb(stats);
        (y, cache)
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(
        &self,
        cache: &BnCache,
        dy: &Array4<f64>,
    ) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
        let (b, c, h, w) = dy.dim();
        match cache {
            BnCache::Train { xhat, inv_std } => {
                let n = (b * h * w) as f64;
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let dys = dy.slice(s![.., ci, .., ..]);
                    let xs = xhat.slice(s![.., ci, .., ..]);
                    dbeta[ci] = dys.sum();
                    dgamma[ci] = dys.iter().zip(xs.iter()).map(|(a, b)| a * b).sum();
                }
                let mut dx = Array4::<f64>::zeros(dy.dim());
                for ci in 0..c {
                    let g = self.gamma[ci];
                    let is = inv_std[ci];
                    let sum_dy = dbeta[ci];
                    let sum_dy_xhat = dgamma[ci];
                    let dys = dy.slice(s![.., ci, .., ..]);
                    let xs = xhat.slice(s![.., ci, .., ..]);
                    let mut dxs = dx.slice_mut(s![.., ci, .., ..]);
                    ndarray::Zip::from(&mut dxs)
                        .and(&dys)
                        .and(&xs)
                        .for_each(|o, &d, &xh| {
                            *o = g * is * (d - sum_dy / n - xh * sum_dy_xhat / n);
                        });
                }
                (dx, dgamma, dbeta)
            }
            BnCache::Eval => {
                let mut dx = dy.clone();
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let is = 1.0 / (self.running_var[ci] + self.eps).sqrt();
                    let g = self.gamma[ci];
                    dbeta[ci] = dy.slice(s![.., ci, .., ..]).sum();
                    dx.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| v * g * is);
                    // dgamma in eval mode is rarely needed; fill it anyway.
                    dgamma[ci] = 0.0;
                }
                (dx, dgamma, dbeta)
            }
        }
    }
}

/// ReLU returning the output and a slope mask usable for backward passes.
pub fn relu(x: &Array4<f64>) -> (Array4<f64>, Array4<f64>) {
    let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    (x * &mask, mask)
}

pub fn relu2(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    (x * &mask, mask)
}

/// LeakyReLU with the given negative slope; returns output and slope mask.
pub fn leaky_relu(x: &Array4<f64>, alpha: f64) -> (Array4<f64>, Array4<f64>) {
    let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { alpha });
    (x * &mask, mask)
}

/// Inverted dropout: kept entries are scaled by `1/(1-p)` during training.
pub fn dropout_mask<R: Rng + ?Sized>(
    dim: (usize, usize, usize, usize),
    p: f64,
    rng: &mut R,
) -> Array4<f64> {
    let keep = 1.0 - p;
    Array4::from_shape_fn(dim, |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2x(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let v = x[[bi, ci, hi, wi]];
                    y[[bi, ci, 2 * hi, 2 * wi]] = v;
                    y[[bi, ci, 2 * hi + 1, 2 * wi]] = v;
                    y[[bi, ci, 2 * hi, 2 * wi + 1]] = v;
                    y[[bi, ci, 2 * hi + 1, 2 * wi + 1]] = v;
                }
            }
        }
    }
    y
}

/// Adjoint of [`upsample2x`]: sums each 2x2 cell.
pub fn upsample2x_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    dx[[bi, ci, hi, wi]] = dy[[bi, ci, 2 * hi, 2 * wi]]
                        + dy[[bi, ci, 2 * hi + 1, 2 * wi]]
                        + dy[[bi, ci, 2 * hi, 2 * wi + 1]]
                        + dy[[bi, ci, 2 * hi + 1, 2 * wi + 1]];
                }
            }
        }
    }
    dx
}

/// Zero padding `(left, right, top, bottom)` on the trailing two axes.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPad2d {
    pub left: usize,
    pub right: usize,
    pub top: usize,
    pub bottom: usize,
}

impl ZeroPad2d {
    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let mut y = Array4::<f64>::zeros((b, c, h + self.top + self.bottom, w + self.left + self.right));
        y.slice_mut(s![
            ..,
            ..,
            self.top..self.top + h,
            self.left..self.left + w
        ])
        .assign(x);
        y
    }

    pub fn backward(&self, dy: &Array4<f64>) -> Array4<f64> {
        let (b, c, hp, wp) = dy.dim();
        let (h, w) = (hp - self.top - self.bottom, wp - self.left - self.right);
        let _ = (b, c);
        dy.slice(s![
            ..,
            ..,
            self.top..self.top + h,
            self.left..self.left + w
        ])
        .to_owned()
    }
}

/// Learnable embedding of a binary label as a dense vector.
#[derive(Debug, Clone)]
pub struct Embedding {
    /// `(2, dim)` table.
    pub table: Array2<f64>,
}

impl Embedding {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let table = Array2::from_shape_fn((2, dim), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        Self { table }
    }

    pub fn forward(&self, labels: &[u8]) -> Array2<f64> {
        let dim = self.table.ncols();
        Array2::from_shape_fn((labels.len(), dim), |(b, j)| {
            self.table[[labels[b] as usize, j]]
        })
    }

    pub fn backward(&self, labels: &[u8], dy: &Array2<f64>) -> Array2<f64> {
        let mut dt = Array2::<f64>::zeros(self.table.dim());
        for (b, &l) in labels.iter().enumerate() {
            for j in 0..self.table.ncols() {
                dt[[l as usize, j]] += dy[[b, j]];
            }
        }
        dt
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn same_pad_matches_expected_arithmetic() {
        // stride 2, kernel 3: 64 -> 32 with (0,1) padding.
        assert_eq!(same_pad(64, 3, 2), (32, 0, 1));
        // stride 2, kernel 3 on odd input: 17 -> 9 with (1,1).
        assert_eq!(same_pad(17, 3, 2), (9, 1, 1));
        // stride 1, kernel 4: size preserved with (1,2).
        assert_eq!(same_pad(32, 4, 1), (32, 1, 2));
    }

    #[test]
    fn conv_forward_matches_naive() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let conv = Conv2d::init(3, 5, (3, 3), 2, true, 0.5, &mut rng);
        let x = Array4::from_shape_fn((2, 3, 7, 5), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let y = conv.forward(&x);
        let (oh, ow) = conv.out_hw(7, 5);
        assert_eq!(y.dim(), (2, 5, oh, ow));

        // Naive direct convolution.
        let (_, ph0, _) = same_pad(7, 3, 2);
        let (_, pw0, _) = same_pad(5, 3, 2);
        for bi in 0..2 {
            for oc in 0..5 {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = conv.b.as_ref().unwrap()[oc];
                        for ic in 0..3 {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    let h = (ohi * 2 + kh) as isize - ph0 as isize;
                                    let w = (owi * 2 + kw) as isize - pw0 as isize;
                                    if h < 0 || h >= 7 || w < 0 || w >= 5 {
                                        continue;
                                    }
                                    acc += x[[bi, ic, h as usize, w as usize]]
                                        * conv.w[[oc, ic, kh, kw]];
                                }
                            }
                        }
                        assert!((acc - y[[bi, oc, ohi, owi]]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_backward_input_is_adjoint_of_forward() {
        // <conv(x), dy> == <x, conv_backward_input(dy)> for bias-free conv.
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let conv = Conv2d::init(2, 4, (4, 4), 1, false, 0.3, &mut rng);
        let x = Array4::from_shape_fn((3, 2, 6, 5), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let y = conv.forward(&x);
        let dy = Array4::from_shape_fn(y.dim(), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let dx = conv.backward_input(&dy, (6, 5));
        let lhs: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_weight_grad_matches_finite_difference() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut conv = Conv2d::init(2, 3, (3, 3), 2, true, 0.4, &mut rng);
        let x = Array4::from_shape_fn((2, 2, 5, 4), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let y = conv.forward(&x);
        let dy = Array4::from_shape_fn(y.dim(), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let (dw, db) = conv.weight_grad(&x, &dy);
        let loss = |c: &Conv2d| -> f64 { c.forward(&x).iter().zip(dy.iter()).map(|(a, b)| a * b).sum() };
        let h = 1e-6;
        for &(oc, ic, kh, kw) in &[(0usize, 0usize, 0usize, 0usize), (2, 1, 2, 1), (1, 0, 1, 2)] {
            let orig = conv.w[[oc, ic, kh, kw]];
            conv.w[[oc, ic, kh, kw]] = orig + h;
            let up = loss(&conv);
            conv.w[[oc, ic, kh, kw]] = orig - h;
            let down = loss(&conv);
            conv.w[[oc, ic, kh, kw]] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - dw[[oc, ic, kh, kw]]).abs() < 1e-5 * fd.abs().max(1.0),
                "dw mismatch {fd} vs {}",
                dw[[oc, ic, kh, kw]]
            );
        }
        let db = db.unwrap();
        for oc in 0..3 {
            let want: f64 = dy.slice(s![.., oc, .., ..]).sum();
            assert!((db[oc] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_train_backward_matches_finite_difference() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut bn = BatchNorm2d::new(3, 0.8);
        bn.gamma = Array1::from_vec(vec![1.2, 0.7, 1.5]);
        bn.beta = Array1::from_vec(vec![0.1, -0.2, 0.4]);
        let x = Array4::from_shape_fn((4, 3, 2, 2), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let dy = Array4::from_shape_fn((4, 3, 2, 2), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let mut bn2 = bn.clone();
        let (_, cache) = bn2.forward(&x, Mode::Train);
        let (dx, dgamma, dbeta) = bn2.backward(&cache, &dy);

        let loss = |bn: &BatchNorm2d, x: &Array4<f64>| -> f64 {
            let mut b = bn.clone();
            let (y, _) = b.forward(x, Mode::Train);
            y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        // dx probe.
        for &idx in &[(0usize, 0usize, 0usize, 0usize), (3, 2, 1, 1), (2, 1, 0, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let up = loss(&bn, &xp);
            xp[idx] -= 2.0 * h;
            let down = loss(&bn, &xp);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - dx[idx]).abs() < 1e-4 * fd.abs().max(1.0),
                "dx mismatch {fd} vs {}",
                dx[idx]
            );
        }
        // dgamma / dbeta probes.
        for ci in 0..3 {
            let mut bp = bn.clone();
            bp.gamma[ci] += h;
            let up = loss(&bp, &x);
            bp.gamma[ci] -= 2.0 * h;
            let down = loss(&bp, &x);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dgamma[ci]).abs() < 1e-5 * fd.abs().max(1.0));

            let mut bp = bn.clone();
            bp.beta[ci] += h;
            let up = loss(&bp, &x);
            bp.beta[ci] -= 2.0 * h;
            let down = loss(&bp, &x);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dbeta[ci]).abs() < 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn upsample_roundtrip_shapes_and_adjoint() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((1, 2, 3, 2), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let y = upsample2x(&x);
        assert_eq!(y.dim(), (1, 2, 6, 4));
        let dy = Array4::from_shape_fn((1, 2, 6, 4), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let dx = upsample2x_backward(&dy);
        let lhs: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn zeropad_pads_trailing_edges() {
        let x = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, h, w)| (h * 2 + w) as f64 + 1.0);
        let pad = ZeroPad2d { left: 0, right: 1, top: 0, bottom: 1 };
        let y = pad.forward(&x);
        assert_eq!(y.dim(), (1, 1, 3, 3));
        assert_eq!(y[[0, 0, 0, 0]], 1.0);
        assert_eq!(y[[0, 0, 1, 1]], 4.0);
        assert_eq!(y[[0, 0, 2, 2]], 0.0);
        assert_eq!(y[[0, 0, 0, 2]], 0.0);
        let back = pad.backward(&y);
        assert_eq!(back, x);
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mask = dropout_mask((10, 4, 8, 8), 0.25, &mut rng);
        let kept = mask.iter().filter(|&&v| v > 0.0).count();
        let frac = kept as f64 / mask.len() as f64;
        assert!((frac - 0.75).abs() < 0.03, "keep fraction {frac}");
        for &v in mask.iter() {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_rows_differ() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let e = Embedding::init(10, &mut rng);
        let out = e.forward(&[0, 1]);
        let d: f64 = (0..10).map(|j| (out[[0, j]] - out[[1, j]]).powi(2)).sum();
        assert!(d > 0.0);
        let dy = Array2::ones((2, 10));
        let dt = e.backward(&[0, 1], &dy);
        assert_eq!(dt.sum(), 20.0);
    }
}
