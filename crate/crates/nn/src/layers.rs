//! Layers with explicit forward/backward passes. Each layer caches what its
//! backward needs; gradients accumulate until `zero_grad`.

use crate::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Param, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Anything owning trainable parameters; what the optimizer and the weight
/// format operate on.
pub trait Params<T: Real> {
    /// Visit trainable parameters in a deterministic order.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
    /// Visit persistent state (parameters plus buffers) for serialization.
    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.visit_params(prefix, &mut |name, p| f(name, &mut p.value));
    }
}

/// Single-input layer with an explicit backward pass.
pub trait Module<T: Real>: Params<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T>;
    /// Propagate `grad_out`, accumulating parameter gradients; returns the
    /// gradient with respect to the input of the last `forward`.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T>;
}

/// Zero the gradients of every parameter.
pub fn zero_grad<T: Real>(m: &mut dyn Params<T>) {
    m.visit_params("", &mut |_, p| p.zero_grad());
}

#[cfg(debug_assertions)]
fn check_finite<T: Real>(t: &Tensor<T>, what: &str) {
    debug_assert!(t.is_finite(), "non-finite values after {what}");
}
#[cfg(not(debug_assertions))]
fn check_finite<T: Real>(_t: &Tensor<T>, _what: &str) {}

// ---------------------------------------------------------------------------

pub struct Linear<T> {
    pub w: Param<T>,
    pub b: Param<T>,
    cache_x: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(w: Tensor<T>, b: Tensor<T>) -> Self {
        assert_eq!(w.shape.len(), 2);
        assert_eq!(b.shape, vec![w.shape[0]]);
        Self {
            w: Param::new(w),
            b: Param::new(b),
            cache_x: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.w.value.shape[1]
    }
    pub fn out_features(&self) -> usize {
        self.w.value.shape[0]
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Tensor<T> {
        let (n, d_in) = (x.shape[0], x.inner());
        let d_out = self.out_features();
        assert_eq!(d_in, self.in_features(), "linear input width");
        let mut y = Tensor::zeros(&[n, d_out]);
        gemm_nt(n, d_in, d_out, &x.data, &self.w.value.data, &mut y.data);
        for row in y.data.chunks_exact_mut(d_out) {
            for (v, b) in row.iter_mut().zip(self.b.value.data.iter()) {
                *v += *b;
            }
        }
        self.cache_x = Some(x.clone());
        check_finite(&y, "linear");
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.cache_x.as_ref().expect("forward before backward");
        let (n, d_in) = (x.shape[0], x.inner());
        let d_out = self.out_features();
        assert_eq!(grad.shape, vec![n, d_out]);
        gemm_tn(
            d_out,
            n,
            d_in,
            &grad.data,
            &x.data,
            &mut self.w.grad.data,
        );
        for row in grad.data.chunks_exact(d_out) {
            for (g, b) in row.iter().zip(self.b.grad.data.iter_mut()) {
                *b += *g;
            }
        }
        let mut dx = Tensor::zeros(&x.shape);
        gemm_nn(n, d_out, d_in, &grad.data, &self.w.value.data, &mut dx.data);
        dx
    }

}

// ---------------------------------------------------------------------------

/// 2D convolution, NCHW, square-free kernels allowed, zero padding.
pub struct Conv2d<T> {
    pub w: Param<T>, // [oc, ic, kh, kw]
    pub b: Param<T>, // [oc]
    pub stride: usize,
    pub pad: usize,
    cache_x: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(w: Tensor<T>, b: Tensor<T>, stride: usize, pad: usize) -> Self {
        assert_eq!(w.shape.len(), 4);
        assert_eq!(b.shape, vec![w.shape[0]]);
        Self {
            w: Param::new(w),
            b: Param::new(b),
            stride,
            pad,
            cache_x: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let kh = self.w.value.shape[2];
        let kw = self.w.value.shape[3];
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, ic: usize, col: &mut [T]) {
        let kh = self.w.value.shape[2];
        let kw = self.w.value.shape[3];
        let (oh, ow) = self.out_hw(h, w);
        let n_cols = oh * ow;
        let s = self.stride;
        let p = self.pad as i64;
        for c in 0..ic {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &mut col[((c * kh + ky) * kw + kx) * n_cols..][..n_cols];
                    let mut idx = 0;
                    for oy in 0..oh {
                        let sy = (oy * s) as i64 + ky as i64 - p;
                        if sy < 0 || sy >= h as i64 {
                            for _ in 0..ow {
                                row[idx] = T::zero();
                                idx += 1;
                            }
                            continue;
                        }
                        let base = sy as usize * w;
                        for ox in 0..ow {
                            let sx = (ox * s) as i64 + kx as i64 - p;
                            row[idx] = if sx < 0 || sx >= w as i64 {
                                T::zero()
                            } else {
                                plane[base + sx as usize]
                            };
                            idx += 1;
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[T], h: usize, w: usize, ic: usize, dx: &mut [T]) {
        let kh = self.w.value.shape[2];
        let kw = self.w.value.shape[3];
        let (oh, ow) = self.out_hw(h, w);
        let n_cols = oh * ow;
        let s = self.stride;
        let p = self.pad as i64;
        for c in 0..ic {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &col[((c * kh + ky) * kw + kx) * n_cols..][..n_cols];
                    let mut idx = 0;
                    for oy in 0..oh {
                        let sy = (oy * s) as i64 + ky as i64 - p;
                        if sy < 0 || sy >= h as i64 {
                            idx += ow;
                            continue;
                        }
                        let base = sy as usize * w;
                        for ox in 0..ow {
                            let sx = (ox * s) as i64 + kx as i64 - p;
                            if sx >= 0 && sx < w as i64 {
                                plane[base + sx as usize] += row[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Params<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Tensor<T> {
        let [n, ic, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
        let oc = self.w.value.shape[0];
        assert_eq!(ic, self.w.value.shape[1], "conv2d input channels");
        let (oh, ow) = self.out_hw(h, w);
        let k = ic * self.w.value.shape[2] * self.w.value.shape[3];
        let n_cols = oh * ow;
        let mut y = Tensor::zeros(&[n, oc, oh, ow]);
        let mut col = vec![T::zero(); k * n_cols];
        for s in 0..n {
            self.im2col(&x.data[s * ic * h * w..], h, w, ic, &mut col);
            let ys = &mut y.data[s * oc * n_cols..(s + 1) * oc * n_cols];
            gemm_nn(oc, k, n_cols, &self.w.value.data, &col, ys);
            for o in 0..oc {
                let bv = self.b.value.data[o];
                for v in &mut ys[o * n_cols..(o + 1) * n_cols] {
                    *v += bv;
                }
            }
        }
        self.cache_x = Some(x.clone());
        check_finite(&y, "conv2d");
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.cache_x.as_ref().expect("forward before backward");
        let [n, ic, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
        let oc = self.w.value.shape[0];
        let (oh, ow) = self.out_hw(h, w);
        let k = ic * self.w.value.shape[2] * self.w.value.shape[3];
        let n_cols = oh * ow;
        assert_eq!(grad.shape, vec![n, oc, oh, ow]);

        let mut dx = Tensor::zeros(&x.shape);
        let mut col = vec![T::zero(); k * n_cols];
        let mut dcol = vec![T::zero(); k * n_cols];
        for s in 0..n {
            let gs = &grad.data[s * oc * n_cols..(s + 1) * oc * n_cols];
            // Weight and bias gradients.
            self.im2col(&x.data[s * ic * h * w..], h, w, ic, &mut col);
            gemm_nt(oc, n_cols, k, gs, &col, &mut self.w.grad.data);
            for o in 0..oc {
                let mut acc = T::zero();
                for g in &gs[o * n_cols..(o + 1) * n_cols] {
                    acc += *g;
                }
                self.b.grad.data[o] += acc;
            }
            // Input gradient.
            for v in &mut dcol {
                *v = T::zero();
            }
            gemm_tn(k, oc, n_cols, &self.w.value.data, gs, &mut dcol);
            self.col2im_add(&dcol, h, w, ic, &mut dx.data[s * ic * h * w..]);
        }
        dx
    }

}

// ---------------------------------------------------------------------------

/// 1D temporal convolution, NCL layout, valid padding, stride 1.
pub struct Conv1d<T> {
    pub w: Param<T>, // [oc, ic, kw]
    pub b: Param<T>, // [oc]
    cache_x: Option<Tensor<T>>,
}

impl<T: Real> Conv1d<T> {
    pub fn new(w: Tensor<T>, b: Tensor<T>) -> Self {
        assert_eq!(w.shape.len(), 3);
        assert_eq!(b.shape, vec![w.shape[0]]);
        Self {
            w: Param::new(w),
            b: Param::new(b),
            cache_x: None,
        }
    }
}

impl<T: Real> Params<T> for Conv1d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

impl<T: Real> Module<T> for Conv1d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Tensor<T> {
        let [n, ic, l] = [x.shape[0], x.shape[1], x.shape[2]];
        let [oc, wic, kw] = [
            self.w.value.shape[0],
            self.w.value.shape[1],
            self.w.value.shape[2],
        ];
        assert_eq!(ic, wic, "conv1d input channels");
        assert!(l >= kw, "conv1d window {l} < kernel {kw}");
        let ol = l - kw + 1;
        let mut y = Tensor::zeros(&[n, oc, ol]);
        for s in 0..n {
            let xs = &x.data[s * ic * l..(s + 1) * ic * l];
            let ys = &mut y.data[s * oc * ol..(s + 1) * oc * ol];
            for o in 0..oc {
                let yrow = &mut ys[o * ol..(o + 1) * ol];
                for v in yrow.iter_mut() {
                    *v = self.b.value.data[o];
                }
                for c in 0..ic {
                    let xrow = &xs[c * l..(c + 1) * l];
                    for kk in 0..kw {
                        let wv = self.w.value.data[(o * ic + c) * kw + kk];
                        for t in 0..ol {
                            yrow[t] += wv * xrow[t + kk];
                        }
                    }
                }
            }
        }
        self.cache_x = Some(x.clone());
        check_finite(&y, "conv1d");
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.cache_x.as_ref().expect("forward before backward");
        let [n, ic, l] = [x.shape[0], x.shape[1], x.shape[2]];
        let [oc, _, kw] = [
            self.w.value.shape[0],
            self.w.value.shape[1],
            self.w.value.shape[2],
        ];
        let ol = l - kw + 1;
        assert_eq!(grad.shape, vec![n, oc, ol]);
        let mut dx = Tensor::zeros(&x.shape);
        for s in 0..n {
            let xs = &x.data[s * ic * l..(s + 1) * ic * l];
            let gs = &grad.data[s * oc * ol..(s + 1) * oc * ol];
            let dxs = &mut dx.data[s * ic * l..(s + 1) * ic * l];
            for o in 0..oc {
                let grow = &gs[o * ol..(o + 1) * ol];
                let mut acc = T::zero();
                for g in grow {
                    acc += *g;
                }
                self.b.grad.data[o] += acc;
                for c in 0..ic {
                    let xrow = &xs[c * l..(c + 1) * l];
                    let dxrow = &mut dxs[c * l..(c + 1) * l];
                    for kk in 0..kw {
                        let widx = (o * ic + c) * kw + kk;
                        let wv = self.w.value.data[widx];
                        let mut wg = T::zero();
                        for t in 0..ol {
                            wg += grow[t] * xrow[t + kk];
                            dxrow[t + kk] += grow[t] * wv;
                        }
                        self.w.grad.data[widx] += wg;
                    }
                }
            }
        }
        dx
    }

}

// ---------------------------------------------------------------------------

/// Batch normalization over (N, H, W) per channel; batch statistics in
/// training mode, running statistics at inference. Momentum 0.1.
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    xhat: Tensor<T>,
    invstd: Vec<T>,
    train: bool,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::from_vec(&[channels], vec![T::one(); channels])),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::from_vec(&[channels], vec![T::one(); channels]),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }
}

impl<T: Real> Params<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma.value);
        f(&format!("{prefix}.beta"), &mut self.beta.value);
        f(&format!("{prefix}.running_mean"), &mut self.running_mean);
        f(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let [n, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
        assert_eq!(c, self.gamma.value.numel(), "batchnorm channels");
        let plane = h * w;
        let group = n * plane;
        let mut y = Tensor::zeros(&x.shape);
        let mut xhat = Tensor::zeros(&x.shape);
        let mut invstds = vec![T::zero(); c];
        for ch in 0..c {
            let (mean, var) = if mode == Mode::Train {
                let mut mean = T::zero();
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for v in &x.data[base..base + plane] {
                        mean += *v;
                    }
                }
                mean /= T::from_f64(group as f64);
                let mut var = T::zero();
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for v in &x.data[base..base + plane] {
                        let d = *v - mean;
                        var += d * d;
                    }
                }
                var /= T::from_f64(group as f64);
                let mom = T::from_f64(self.momentum);
                self.running_mean.data[ch] =
                    (T::one() - mom) * self.running_mean.data[ch] + mom * mean;
                self.running_var.data[ch] =
                    (T::one() - mom) * self.running_var.data[ch] + mom * var;
                (mean, var)
            } else {
                (self.running_mean.data[ch], self.running_var.data[ch])
            };
            let invstd = T::one() / (var + T::from_f64(self.eps)).sqrt();
            invstds[ch] = invstd;
            let g = self.gamma.value.data[ch];
            let b = self.beta.value.data[ch];
            for s in 0..n {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (x.data[i] - mean) * invstd;
                    xhat.data[i] = xh;
                    y.data[i] = g * xh + b;
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            invstd: invstds,
            train: mode == Mode::Train,
        });
        check_finite(&y, "batchnorm2d");
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.as_ref().expect("forward before backward");
        let [n, c, h, w] = [
            grad.shape[0],
            grad.shape[1],
            grad.shape[2],
            grad.shape[3],
        ];
        let plane = h * w;
        let group = T::from_f64((n * plane) as f64);
        let mut dx = Tensor::zeros(&grad.shape);
        for ch in 0..c {
            let g = self.gamma.value.data[ch];
            let invstd = cache.invstd[ch];
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for s in 0..n {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    sum_dy += grad.data[i];
                    sum_dy_xhat += grad.data[i] * cache.xhat.data[i];
                }
            }
            self.beta.grad.data[ch] += sum_dy;
            self.gamma.grad.data[ch] += sum_dy_xhat;
            if cache.train {
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for i in base..base + plane {
                        let term = group * grad.data[i]
                            - sum_dy
                            - cache.xhat.data[i] * sum_dy_xhat;
                        dx.data[i] = g * invstd / group * term;
                    }
                }
            } else {
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for i in base..base + plane {
                        dx.data[i] = g * invstd * grad.data[i];
                    }
                }
            }
        }
        dx
    }

}

// ---------------------------------------------------------------------------

pub struct ReLU<T> {
    cache_y: Option<Tensor<T>>,
}

impl<T> Default for ReLU<T> {
    fn default() -> Self {
        Self { cache_y: None }
    }
}

impl<T: Real> Params<T> for ReLU<T> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

impl<T: Real> Module<T> for ReLU<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Tensor<T> {
        let mut y = x.clone();
        for v in &mut y.data {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        self.cache_y = Some(y.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let y = self.cache_y.as_ref().expect("forward before backward");
        let mut dx = grad.clone();
        for (d, yv) in dx.data.iter_mut().zip(y.data.iter()) {
            if *yv <= T::zero() {
                *d = T::zero();
            }
        }
        dx
    }

}

// ---------------------------------------------------------------------------

/// Max pooling, valid, square kernel.
pub struct MaxPool2d<T> {
    pub k: usize,
    pub stride: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>, // (input shape, argmax flat indices)
    _marker: std::marker::PhantomData<T>,
}

impl<T> MaxPool2d<T> {
    pub fn new(k: usize, stride: usize) -> Self {
        Self {
            k,
            stride,
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Real> Params<T> for MaxPool2d<T> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

impl<T: Real> Module<T> for MaxPool2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Tensor<T> {
        let [n, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
        let oh = (h - self.k) / self.stride + 1;
        let ow = (w - self.k) / self.stride + 1;
        let mut y = Tensor::zeros(&[n, c, oh, ow]);
        let mut arg = vec![0usize; n * c * oh * ow];
        let mut oi = 0;
        for s in 0..n {
            for ch in 0..c {
                let plane = &x.data[(s * c + ch) * h * w..][..h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0;
                        for ky in 0..self.k {
                            for kx in 0..self.k {
                                let i = (oy * self.stride + ky) * w + ox * self.stride + kx;
                                if plane[i] > best {
                                    best = plane[i];
                                    best_i = (s * c + ch) * h * w + i;
                                }
                            }
                        }
                        y.data[oi] = best;
                        arg[oi] = best_i;
                        oi += 1;
                    }
                }
            }
        }
        self.cache = Some((x.shape.clone(), arg));
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let (shape, arg) = self.cache.as_ref().expect("forward before backward");
        let mut dx = Tensor::zeros(shape);
        for (g, &i) in grad.data.iter().zip(arg.iter()) {
            dx.data[i] += *g;
        }
        dx
    }

}

// ---------------------------------------------------------------------------

/// Nearest-neighbour 2x upsampling.
pub struct UpsampleNearest2<T> {
    cache_in_shape: Option<Vec<usize>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T> Default for UpsampleNearest2<T> {
    fn default() -> Self {
        Self {
            cache_in_shape: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Real> Params<T> for UpsampleNearest2<T> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

impl<T: Real> Module<T> for UpsampleNearest2<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Tensor<T> {
        let [n, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
        let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        for nc in 0..n * c {
            let src = &x.data[nc * h * w..][..h * w];
            let dst = &mut y.data[nc * 4 * h * w..][..4 * h * w];
            for yy in 0..2 * h {
                let sy = yy / 2;
                for xx in 0..2 * w {
                    dst[yy * 2 * w + xx] = src[sy * w + xx / 2];
                }
            }
        }
        self.cache_in_shape = Some(x.shape.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let shape = self.cache_in_shape.as_ref().expect("forward before backward");
        let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
        let mut dx = Tensor::zeros(shape);
        for nc in 0..n * c {
            let src = &grad.data[nc * 4 * h * w..][..4 * h * w];
            let dst = &mut dx.data[nc * h * w..][..h * w];
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
                }
            }
        }
        dx
    }

}

// ---------------------------------------------------------------------------

/// Softmax over the spatial extent (H*W) of each (sample, channel) plane.
pub struct SoftmaxSpatial<T> {
    cache_y: Option<Tensor<T>>,
}

impl<T> Default for SoftmaxSpatial<T> {
    fn default() -> Self {
        Self { cache_y: None }
    }
}

impl<T: Real> Params<T> for SoftmaxSpatial<T> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

impl<T: Real> Module<T> for SoftmaxSpatial<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Tensor<T> {
        let [n, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
        let plane = h * w;
        let mut y = Tensor::zeros(&x.shape);
        for nc in 0..n * c {
            let src = &x.data[nc * plane..][..plane];
            let dst = &mut y.data[nc * plane..][..plane];
            let mut mx = T::neg_infinity();
            for v in src {
                if *v > mx {
                    mx = *v;
                }
            }
            let mut sum = T::zero();
            for (d, v) in dst.iter_mut().zip(src.iter()) {
                *d = (*v - mx).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        self.cache_y = Some(y.clone());
        check_finite(&y, "softmax-spatial");
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let y = self.cache_y.as_ref().expect("forward before backward");
        let [n, c, h, w] = [y.shape[0], y.shape[1], y.shape[2], y.shape[3]];
        let plane = h * w;
        let mut dx = Tensor::zeros(&y.shape);
        for nc in 0..n * c {
            let ys = &y.data[nc * plane..][..plane];
            let gs = &grad.data[nc * plane..][..plane];
            let ds = &mut dx.data[nc * plane..][..plane];
            let mut dot = T::zero();
            for (g, yv) in gs.iter().zip(ys.iter()) {
                dot += *g * *yv;
            }
            for i in 0..plane {
                ds[i] = ys[i] * (gs[i] - dot);
            }
        }
        dx
    }

}

// ---------------------------------------------------------------------------

/// Chain of layers applied in order.
pub struct Sequential<T> {
    pub layers: Vec<Box<dyn Module<T>>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Box<dyn Module<T>>>) -> Self {
        Self { layers }
    }
}

impl<T: Real> Params<T> for Sequential<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&format!("{prefix}.{i}"), f);
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_state(&format!("{prefix}.{i}"), f);
        }
    }
}

impl<T: Real> Module<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, mode);
        }
        cur
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mut cur = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur);
        }
        cur
    }

}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_clips_negatives() {
        let mut r = ReLU::default();
        let x = Tensor::from_vec(&[1, 3], vec![-1.0f64, 0.0, 2.0]);
        let y = r.forward(&x, Mode::Train);
        assert_eq!(y.data, vec![0.0, 0.0, 2.0]);
        let g = r.backward(&Tensor::from_vec(&[1, 3], vec![1.0, 1.0, 1.0]));
        assert_eq!(g.data, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn identity_1x1_conv_preserves_input() {
        // One input channel, one output channel, 1x1 kernel of weight 1.
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0f64]);
        let b = Tensor::zeros(&[1]);
        let mut conv = Conv2d::new(w, b, 1, 0);
        let x = Tensor::from_vec(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = conv.forward(&x, Mode::Train);
        assert_eq!(y.data, x.data);
        assert_eq!(y.shape, x.shape);
    }

    #[test]
    fn conv2d_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ic, oc, kh, kw) = (2, 3, 3, 3);
        let (h, w) = (5, 5);
        let (stride, pad) = (1, 1);
        let wt: Tensor<f64> = init::he_normal(&mut rng, &[oc, ic, kh, kw], ic * kh * kw);
        let b: Tensor<f64> = init::he_normal(&mut rng, &[oc], 4);
        let x: Tensor<f64> = init::he_normal(&mut rng, &[1, ic, h, w], 4);
        let mut conv = Conv2d::new(wt.clone(), b.clone(), stride, pad);
        let y = conv.forward(&x, Mode::Train);

        // Six nested loops, straight from the definition.
        let (oh, ow) = conv.out_hw(h, w);
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data[o];
                    for c in 0..ic {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = (oy * stride + ky) as i64 - pad as i64;
                                let sx = (ox * stride + kx) as i64 - pad as i64;
                                if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                                    acc += wt.data[((o * ic + c) * kh + ky) * kw + kx]
                                        * x.data[(c * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    let got = y.data[(o * oh + oy) * ow + ox];
                    assert!((got - acc).abs() < 1e-6, "({o},{oy},{ox}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn strided_conv_output_is_ceil_division() {
        // 3x3 stride-2 pad-1 halves spatial dims, rounding up.
        let w = Tensor::<f64>::zeros(&[4, 3, 3, 3]);
        let conv = Conv2d::new(w, Tensor::zeros(&[4]), 2, 1);
        assert_eq!(conv.out_hw(96, 128), (48, 64));
        assert_eq!(conv.out_hw(75, 100), (38, 50));
        assert_eq!(conv.out_hw(19, 25), (10, 13));
    }

    #[test]
    fn softmax_spatial_sums_to_one_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f64> = init::he_normal(&mut rng, &[3, 1, 4, 5], 1);
        let mut sm = SoftmaxSpatial::default();
        let y = sm.forward(&x, Mode::Train);
        for s in 0..3 {
            let sum: f64 = y.data[s * 20..(s + 1) * 20].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert!(y.data.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn linear_weight_gradient_for_sum_loss() {
        // loss = sum(y) through a linear layer: dW[o,i] = sum_batch x[s,i].
        let w = Tensor::from_vec(&[2, 3], vec![0.1f64; 6]);
        let b = Tensor::zeros(&[2]);
        let mut lin = Linear::new(w, b);
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let _ = lin.forward(&x, Mode::Train);
        let g = Tensor::from_vec(&[2, 2], vec![1.0; 4]);
        let _ = lin.backward(&g);
        // Column sums of x are (5, 7, 9) for each output row.
        assert_eq!(lin.w.grad.data, vec![5.0, 7.0, 9.0, 5.0, 7.0, 9.0]);
        assert_eq!(lin.b.grad.data, vec![2.0, 2.0]);
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let w = Tensor::from_vec(&[2, 3], vec![0.1f64; 6]);
        let mut lin = Linear::new(w, Tensor::zeros(&[2]));
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]);
        let g = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]);
        let _ = lin.forward(&x, Mode::Train);
        let _ = lin.backward(&g);
        let once = lin.w.grad.data.clone();
        let _ = lin.forward(&x, Mode::Train);
        let _ = lin.backward(&g);
        for (a, b) in lin.w.grad.data.iter().zip(once.iter()) {
            assert_eq!(*a, 2.0 * b);
        }
        zero_grad(&mut lin);
        assert!(lin.w.grad.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batchnorm_uses_batch_then_running_statistics() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]);
        let y = bn.forward(&x, Mode::Train);
        // Batch stats: mean 4, var 5 -> normalized output mean 0.
        let mean: f64 = y.data.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((bn.running_mean.data[0] - 0.4).abs() < 1e-12);

        // Inference path uses the running statistics instead.
        let y2 = bn.forward(&x, Mode::Infer);
        let rm = bn.running_mean.data[0];
        let rv = bn.running_var.data[0];
        let want = (1.0 - rm) / (rv + 1e-5).sqrt();
        assert!((y2.data[0] - want).abs() < 1e-9);
    }

    #[test]
    fn maxpool_and_upsample_shapes() {
        let x = Tensor::from_vec(
            &[1, 1, 4, 4],
            (0..16).map(|i| i as f64).collect::<Vec<_>>(),
        );
        let mut mp = MaxPool2d::new(2, 2);
        let y = mp.forward(&x, Mode::Train);
        assert_eq!(y.shape, vec![1, 1, 2, 2]);
        assert_eq!(y.data, vec![5.0, 7.0, 13.0, 15.0]);
        let dx = mp.backward(&Tensor::from_vec(&[1, 1, 2, 2], vec![1.0; 4]));
        assert_eq!(dx.data.iter().filter(|v| **v == 1.0).count(), 4);

        let mut up = UpsampleNearest2::default();
        let y = up.forward(&x, Mode::Train);
        assert_eq!(y.shape, vec![1, 1, 8, 8]);
        assert_eq!(y.data[0], 0.0);
        assert_eq!(y.data[1], 0.0);
        assert_eq!(y.data[2], 1.0);
        let dx = up.backward(&Tensor::from_vec(&[1, 1, 8, 8], vec![1.0; 64]));
        assert!(dx.data.iter().all(|v| *v == 4.0));
    }
}
