//! Layers with hand-written backward passes.
//!
//! `forward` takes its input by value and returns the output together with
//! whatever the backward pass needs; `backward` consumes that cache, adds
//! parameter gradients into [`Param::grad`] and returns the input gradient.

use rand::Rng;

use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
            shape: shape.to_vec(),
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(v);
        p
    }

    /// Uniform on `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            *v = T::of(rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Visitor over named parameters, shared by the optimizer and checkpoints.
pub type Visit<'a, T> = &'a mut dyn FnMut(&str, &Param<T>);
pub type VisitMut<'a, T> = &'a mut dyn FnMut(&str, &mut Param<T>);

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait Module<T: Scalar> {
    type Cache;

    fn forward(&self, x: Tensor<T>) -> (Tensor<T>, Self::Cache);

    fn backward(&mut self, cache: Self::Cache, grad: Tensor<T>) -> Tensor<T>;

    fn infer(&self, x: Tensor<T>) -> Tensor<T> {
        self.forward(x).0
    }

    fn visit(&self, prefix: &str, f: Visit<'_, T>);

    fn visit_mut(&mut self, prefix: &str, f: VisitMut<'_, T>);
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

pub struct ConvCache<T> {
    input: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// Square kernel with "same" padding (`kernel / 2`).
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            weight: Param::uniform(&[cout, cin, kernel, kernel], bound, rng),
            bias: Param::uniform(&[cout], bound, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.pad - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    /// Valid output-column range for kernel offset `kx` when `stride == 1`.
    fn valid_span(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = wo.min((w + self.pad).saturating_sub(kx));
        (lo, hi.max(lo))
    }

    /// Samples per im2col chunk, sized so a chunk's column matrix stays in cache.
    fn chunk_samples(&self, plane: usize) -> usize {
        (CHUNK_COLUMNS / plane.max(1)).max(1)
    }

    /// Lays out every receptive field of samples `first..first + count` as a
    /// column of a `[patch, count * ho * wo]` matrix.
    fn im2col(&self, x: &Tensor<T>, first: usize, count: usize, cols: &mut Vec<T>) {
        let [_, c, h, w] = x.shape();
        let (ho, wo) = self.output_size(h, w);
        let (k, s, pad) = (self.kernel, self.stride, self.pad);
        let n = ho * wo;
        let width = count * n;
        cols.clear();
        cols.resize(c * k * k * width, T::zero());
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * width;
                    let (lo, hi) = self.valid_span(kx, w, wo);
                    for bi in 0..count {
                        let plane = &x.data()[((first + bi) * c + ci) * h * w..][..h * w];
                        let dst = &mut cols[row + bi * n..][..n];
                        for oy in 0..ho {
                            let iy = oy * s + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let src = &plane[(iy - pad) * w..][..w];
                            let d = &mut dst[oy * wo..][..wo];
                            if s == 1 {
                                if lo < hi {
                                    d[lo..hi].copy_from_slice(&src[lo + kx - pad..hi + kx - pad]);
                                }
                            } else {
                                for (ox, dv) in d.iter_mut().enumerate() {
                                    let ix = ox * s + kx;
                                    if ix >= pad && ix - pad < w {
                                        *dv = src[ix - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`], accumulating into samples `first..` of `x`.
    fn col2im(&self, cols: &[T], first: usize, count: usize, x: &mut Tensor<T>) {
        let [_, c, h, w] = x.shape();
        let (ho, wo) = self.output_size(h, w);
        let (k, s, pad) = (self.kernel, self.stride, self.pad);
        let n = ho * wo;
        let width = count * n;
        let data = x.data_mut();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * width;
                    let (lo, hi) = self.valid_span(kx, w, wo);
                    for bi in 0..count {
                        let plane = &mut data[((first + bi) * c + ci) * h * w..][..h * w];
                        let src = &cols[row + bi * n..][..n];
                        for oy in 0..ho {
                            let iy = oy * s + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let dst = &mut plane[(iy - pad) * w..][..w];
                            let sv = &src[oy * wo..][..wo];
                            if s == 1 {
                                if lo < hi {
                                    let d = &mut dst[lo + kx - pad..hi + kx - pad];
                                    for (a, &g) in d.iter_mut().zip(&sv[lo..hi]) {
                                        *a += g;
                                    }
                                }
                            } else {
                                for (ox, &g) in sv.iter().enumerate() {
                                    let ix = ox * s + kx;
                                    if ix >= pad && ix - pad < w {
                                        dst[ix - pad] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Target width of one im2col chunk.
const CHUNK_COLUMNS: usize = 1024;

impl<T: Scalar> Module<T> for Conv2d<T> {
    type Cache = ConvCache<T>;

    fn forward(&self, x: Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        let [b, c, h, w] = x.shape();
        assert_eq!(c, self.cin, "conv expects {} input channels", self.cin);
        let (ho, wo) = self.output_size(h, w);
        let n = ho * wo;
        let kdim = self.patch_len();
        let step = self.chunk_samples(n);
        let mut y = Tensor::zeros([b, self.cout, ho, wo]);
        let mut cols = Vec::new();
        let mut prod = Vec::new();
        for first in (0..b).step_by(step) {
            let count = step.min(b - first);
            let width = count * n;
            self.im2col(&x, first, count, &mut cols);
            prod.resize(self.cout * width, T::zero());
            gemm(
                T::one(),
                MatRef::new(&self.weight.value, self.cout, kdim),
                MatRef::new(&cols, kdim, width),
                T::zero(),
                &mut prod,
            );
            let out = y.data_mut();
            for bi in 0..count {
                for co in 0..self.cout {
                    let bias = self.bias.value[co];
                    let src = &prod[co * width + bi * n..][..n];
                    let dst = &mut out[((first + bi) * self.cout + co) * n..][..n];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bias;
                    }
                }
            }
        }
        (y, ConvCache { input: x })
    }

    fn backward(&mut self, cache: ConvCache<T>, grad: Tensor<T>) -> Tensor<T> {
        let x = cache.input;
        let [b, cout, ho, wo] = grad.shape();
        let n = ho * wo;
        let kdim = self.patch_len();
        let step = self.chunk_samples(n);
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = Vec::new();
        let mut gm = Vec::new();
        for first in (0..b).step_by(step) {
            let count = step.min(b - first);
            let width = count * n;
            gm.resize(cout * width, T::zero());
            for bi in 0..count {
                for co in 0..cout {
                    let src = &grad.data()[((first + bi) * cout + co) * n..][..n];
                    gm[co * width + bi * n..][..n].copy_from_slice(src);
                    self.bias.grad[co] += src.iter().copied().sum::<T>();
                }
            }
            self.im2col(&x, first, count, &mut cols);
            gemm(
                T::one(),
                MatRef::new(&gm, cout, width),
                MatRef::new(&cols, kdim, width).t(),
                T::one(),
                &mut self.weight.grad,
            );
            gemm(
                T::one(),
                MatRef::new(&self.weight.value, cout, kdim).t(),
                MatRef::new(&gm, cout, width),
                T::zero(),
                &mut cols,
            );
            self.col2im(&cols, first, count, &mut dx);
        }
        dx
    }

    fn visit(&self, prefix: &str, f: Visit<'_, T>) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: VisitMut<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm<T> {
    groups: usize,
    channels: usize,
    eps: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

pub struct NormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<f64>,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(
            groups >= 1 && channels % groups == 0,
            "{channels} channels do not split into {groups} groups"
        );
        GroupNorm {
            groups,
            channels,
            eps: 1e-6,
            gamma: Param::full(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
        }
    }

    /// `max(1, channels / group_size)` groups.
    pub fn with_group_size(channels: usize, group_size: usize) -> Self {
        let groups = (channels / group_size.max(1)).max(1);
        let groups = if channels % groups == 0 { groups } else { 1 };
        Self::new(groups, channels)
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn forward_ref(&self, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let [b, c, h, w] = x.shape();
        assert_eq!(c, self.channels, "group norm expects {} channels", self.channels);
        let per = c / self.groups;
        let glen = per * h * w;
        let plane = h * w;
        let mut normalized = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(b * self.groups);
        for bi in 0..b {
            for g in 0..self.groups {
                let off = (bi * c + g * per) * plane;
                let src = &x.data()[off..off + glen];
                let mean = src.iter().map(|v| v.f64()).sum::<f64>() / glen as f64;
                let var = src
                    .iter()
                    .map(|v| {
                        let d = v.f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / glen as f64;
                let is = 1.0 / (var + self.eps).sqrt();
                inv_std.push(is);
                let (m, s) = (T::of(mean), T::of(is));
                let nd = &mut normalized.data_mut()[off..off + glen];
                for (d, &v) in nd.iter_mut().zip(src) {
                    *d = (v - m) * s;
                }
                for ci in 0..per {
                    let ch = g * per + ci;
                    let (ga, be) = (self.gamma.value[ch], self.beta.value[ch]);
                    let r = ci * plane..(ci + 1) * plane;
                    let yd = &mut y.data_mut()[off..off + glen][r.clone()];
                    for (o, &n) in yd.iter_mut().zip(&normalized.data()[off..off + glen][r]) {
                        *o = n * ga + be;
                    }
                }
            }
        }
        (y, NormCache { normalized, inv_std })
    }
}

impl<T: Scalar> Module<T> for GroupNorm<T> {
    type Cache = NormCache<T>;

    fn forward(&self, x: Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        self.forward_ref(&x)
    }

    fn backward(&mut self, cache: NormCache<T>, grad: Tensor<T>) -> Tensor<T> {
        let [b, c, h, w] = grad.shape();
        let per = c / self.groups;
        let plane = h * w;
        let glen = per * plane;
        let xh = cache.normalized.data();
        let mut dx = Tensor::zeros(grad.shape());
        for bi in 0..b {
            for g in 0..self.groups {
                let off = (bi * c + g * per) * plane;
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for ci in 0..per {
                    let ch = g * per + ci;
                    let ga = self.gamma.value[ch].f64();
                    let base = off + ci * plane;
                    let (mut gg, mut gb) = (0.0, 0.0);
                    for i in base..base + plane {
                        let dy = grad.data()[i].f64();
                        let n = xh[i].f64();
                        gg += dy * n;
                        gb += dy;
                        sum_d += dy * ga;
                        sum_dx += dy * ga * n;
                    }
                    self.gamma.grad[ch] += T::of(gg);
                    self.beta.grad[ch] += T::of(gb);
                }
                let is = cache.inv_std[bi * self.groups + g];
                let (md, mdx) = (sum_d / glen as f64, sum_dx / glen as f64);
                for ci in 0..per {
                    let ga = self.gamma.value[g * per + ci].f64();
                    let base = off + ci * plane;
                    for i in base..base + plane {
                        let dn = grad.data()[i].f64() * ga;
                        dx.data_mut()[i] = T::of(is * (dn - md - xh[i].f64() * mdx));
                    }
                }
            }
        }
        dx
    }

    fn visit(&self, prefix: &str, f: Visit<'_, T>) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: VisitMut<'_, T>) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// `t / (1 + e^{-t})`.
pub fn swish<T: Scalar>(t: T) -> T {
    t * sigmoid(t)
}

fn sigmoid<T: Scalar>(t: T) -> T {
    T::one() / (T::one() + (-t).exp())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Swish;

impl<T: Scalar> Module<T> for Swish {
    type Cache = Tensor<T>;

    fn forward(&self, x: Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        (x.map(swish), x)
    }

    fn backward(&mut self, x: Tensor<T>, grad: Tensor<T>) -> Tensor<T> {
        grad.zip_map(&x, |g, t| {
            let s = sigmoid(t);
            g * (s + t * s * (T::one() - s))
        })
        .expect("cached input matches gradient")
    }

    fn visit(&self, _: &str, _: Visit<'_, T>) {}

    fn visit_mut(&mut self, _: &str, _: VisitMut<'_, T>) {}
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Tanh;

impl<T: Scalar> Module<T> for Tanh {
    type Cache = Tensor<T>;

    fn forward(&self, x: Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let y = x.map(|v| v.tanh());
        (y.clone(), y)
    }

    fn infer(&self, x: Tensor<T>) -> Tensor<T> {
        x.map(|v| v.tanh())
    }

    fn backward(&mut self, y: Tensor<T>, grad: Tensor<T>) -> Tensor<T> {
        grad.zip_map(&y, |g, y| g * (T::one() - y * y))
            .expect("cached output matches gradient")
    }

    fn visit(&self, _: &str, _: Visit<'_, T>) {}

    fn visit_mut(&mut self, _: &str, _: VisitMut<'_, T>) {}
}

/// Nearest-neighbour ×2 upsampling.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upsample;

impl<T: Scalar> Module<T> for Upsample {
    type Cache = ();

    fn forward(&self, x: Tensor<T>) -> (Tensor<T>, ()) {
        let [b, c, h, w] = x.shape();
        let mut y = Tensor::zeros([b, c, 2 * h, 2 * w]);
        let out = y.data_mut();
        for p in 0..b * c {
            let src = &x.data()[p * h * w..][..h * w];
            let dst = &mut out[p * 4 * h * w..][..4 * h * w];
            for iy in 0..h {
                for ix in 0..w {
                    let v = src[iy * w + ix];
                    let o = 2 * iy * 2 * w + 2 * ix;
                    dst[o] = v;
                    dst[o + 1] = v;
                    dst[o + 2 * w] = v;
                    dst[o + 2 * w + 1] = v;
                }
            }
        }
        (y, ())
    }

    fn backward(&mut self, _: (), grad: Tensor<T>) -> Tensor<T> {
        let [b, c, h2, w2] = grad.shape();
        let (h, w) = (h2 / 2, w2 / 2);
        let mut dx = Tensor::zeros([b, c, h, w]);
        let out = dx.data_mut();
        for p in 0..b * c {
            let src = &grad.data()[p * h2 * w2..][..h2 * w2];
            let dst = &mut out[p * h * w..][..h * w];
            for iy in 0..h {
                for ix in 0..w {
                    let o = 2 * iy * w2 + 2 * ix;
                    dst[iy * w + ix] = src[o] + src[o + 1] + src[o + w2] + src[o + w2 + 1];
                }
            }
        }
        dx
    }

    fn visit(&self, _: &str, _: Visit<'_, T>) {}

    fn visit_mut(&mut self, _: &str, _: VisitMut<'_, T>) {}
}

/// GroupNorm → Swish → 3×3 conv, twice, plus a residual path that is a 1×1
/// convolution when the width changes.
#[derive(Debug, Clone)]
pub struct ResBlock<T> {
    pub norm1: GroupNorm<T>,
    pub conv1: Conv2d<T>,
    pub norm2: GroupNorm<T>,
    pub conv2: Conv2d<T>,
    pub skip: Option<Conv2d<T>>,
}

pub struct ResCache<T> {
    norm1: NormCache<T>,
    act1: Tensor<T>,
    conv1: ConvCache<T>,
    norm2: NormCache<T>,
    act2: Tensor<T>,
    conv2: ConvCache<T>,
    skip: Option<ConvCache<T>>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, group_size: usize, rng: &mut R) -> Self {
        ResBlock {
            norm1: GroupNorm::with_group_size(cin, group_size),
            conv1: Conv2d::new(cin, cout, 3, 1, rng),
            norm2: GroupNorm::with_group_size(cout, group_size),
            conv2: Conv2d::new(cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(cin, cout, 1, 1, rng)),
        }
    }
}

impl<T: Scalar> Module<T> for ResBlock<T> {
    type Cache = ResCache<T>;

    fn forward(&self, x: Tensor<T>) -> (Tensor<T>, ResCache<T>) {
        let (h, norm1) = self.norm1.forward_ref(&x);
        let (h, act1) = Module::forward(&Swish, h);
        let (h, conv1) = self.conv1.forward(h);
        let (h, norm2) = self.norm2.forward(h);
        let (h, act2) = Module::forward(&Swish, h);
        let (mut h, conv2) = self.conv2.forward(h);
        let (res, skip) = match &self.skip {
            Some(conv) => {
                let (r, c) = conv.forward(x);
                (r, Some(c))
            }
            None => (x, None),
        };
        h.add_assign(&res).expect("residual shapes agree");
        (
            h,
            ResCache {
                norm1,
                act1,
                conv1,
                norm2,
                act2,
                conv2,
                skip,
            },
        )
    }

    fn backward(&mut self, cache: ResCache<T>, grad: Tensor<T>) -> Tensor<T> {
        let mut dres = match (&mut self.skip, cache.skip) {
            (Some(conv), Some(c)) => conv.backward(c, grad.clone()),
            _ => grad.clone(),
        };
        let g = self.conv2.backward(cache.conv2, grad);
        let g = Swish.backward(cache.act2, g);
        let g = self.norm2.backward(cache.norm2, g);
        let g = self.conv1.backward(cache.conv1, g);
        let g = Swish.backward(cache.act1, g);
        let g = self.norm1.backward(cache.norm1, g);
        dres.add_assign(&g).expect("residual shapes agree");
        dres
    }

    fn visit(&self, prefix: &str, f: Visit<'_, T>) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&join(prefix, "skip"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: VisitMut<'_, T>) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&join(prefix, "skip"), f);
        }
    }
}

/// Single-head self-attention over spatial positions with a residual add.
#[derive(Debug, Clone)]
pub struct AttentionBlock<T> {
    pub norm: GroupNorm<T>,
    pub qkv: Conv2d<T>,
    pub proj: Conv2d<T>,
}

pub struct AttnCache<T> {
    norm: NormCache<T>,
    qkv_in: ConvCache<T>,
    qkv: Tensor<T>,
    weights: Vec<T>,
    proj: ConvCache<T>,
}

impl<T: Scalar> AttentionBlock<T> {
    pub fn new<R: Rng + ?Sized>(width: usize, group_size: usize, rng: &mut R) -> Self {
        AttentionBlock {
            norm: GroupNorm::with_group_size(width, group_size),
            qkv: Conv2d::new(width, 3 * width, 1, 1, rng),
            proj: Conv2d::new(width, width, 1, 1, rng),
        }
    }

    /// Row-stochastic attention weights `[batch][query * n + key]` for `x`.
    pub fn attention_weights(&self, x: &Tensor<T>) -> Vec<T> {
        let (h, _) = self.norm.forward_ref(x);
        let (qkv, _) = self.qkv.forward(h);
        let mut weights = Vec::new();
        for bi in 0..x.batch() {
            weights.extend(self.sample_weights(&qkv, bi));
        }
        weights
    }

    fn sample_weights(&self, qkv: &Tensor<T>, bi: usize) -> Vec<T> {
        let c = self.norm.channels;
        let n = qkv.plane_len();
        let s = qkv.sample(bi);
        let (q, k) = (&s[..c * n], &s[c * n..2 * c * n]);
        let scale = T::of(1.0 / (c as f64).sqrt());
        let mut a = vec![T::zero(); n * n];
        gemm(
            scale,
            MatRef::new(q, c, n).t(),
            MatRef::new(k, c, n),
            T::zero(),
            &mut a,
        );
        for row in a.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        a
    }
}

impl<T: Scalar> Module<T> for AttentionBlock<T> {
    type Cache = AttnCache<T>;

    fn forward(&self, x: Tensor<T>) -> (Tensor<T>, AttnCache<T>) {
        let [b, c, hh, ww] = x.shape();
        let n = hh * ww;
        let (h, norm) = self.norm.forward_ref(&x);
        let (qkv, qkv_in) = self.qkv.forward(h);
        let mut attended = Tensor::zeros([b, c, hh, ww]);
        let mut weights = Vec::with_capacity(b * n * n);
        for bi in 0..b {
            let a = self.sample_weights(&qkv, bi);
            let v = &qkv.sample(bi)[2 * c * n..];
            gemm(
                T::one(),
                MatRef::new(v, c, n),
                MatRef::new(&a, n, n).t(),
                T::zero(),
                attended.sample_mut(bi),
            );
            weights.extend(a);
        }
        let (mut y, proj) = self.proj.forward(attended);
        y.add_assign(&x).expect("residual shapes agree");
        (
            y,
            AttnCache {
                norm,
                qkv_in,
                qkv,
                weights,
                proj,
            },
        )
    }

    fn backward(&mut self, cache: AttnCache<T>, grad: Tensor<T>) -> Tensor<T> {
        let [b, c, hh, ww] = grad.shape();
        let n = hh * ww;
        let scale = T::of(1.0 / (c as f64).sqrt());
        let d_att = self.proj.backward(cache.proj, grad.clone());
        let mut dqkv = Tensor::zeros([b, 3 * c, hh, ww]);
        let mut da = vec![T::zero(); n * n];
        for bi in 0..b {
            let a = &cache.weights[bi * n * n..][..n * n];
            let s = cache.qkv.sample(bi);
            let (q, k, v) = (&s[..c * n], &s[c * n..2 * c * n], &s[2 * c * n..]);
            let dout = d_att.sample(bi);
            let dst = dqkv.sample_mut(bi);
            let (dq, rest) = dst.split_at_mut(c * n);
            let (dk, dv) = rest.split_at_mut(c * n);
            gemm(
                T::one(),
                MatRef::new(dout, c, n),
                MatRef::new(a, n, n),
                T::zero(),
                dv,
            );
            gemm(
                T::one(),
                MatRef::new(dout, c, n).t(),
                MatRef::new(v, c, n),
                T::zero(),
                &mut da,
            );
            for (drow, arow) in da.chunks_mut(n).zip(a.chunks(n)) {
                let dot: T = drow.iter().zip(arow).map(|(&d, &p)| d * p).sum();
                for (d, &p) in drow.iter_mut().zip(arow) {
                    *d = p * (*d - dot);
                }
            }
            gemm(
                scale,
                MatRef::new(k, c, n),
                MatRef::new(&da, n, n).t(),
                T::zero(),
                dq,
            );
            gemm(
                scale,
                MatRef::new(q, c, n),
                MatRef::new(&da, n, n),
                T::zero(),
                dk,
            );
        }
        drop(cache.qkv);
        let dh = self.qkv.backward(cache.qkv_in, dqkv);
        let mut dx = self.norm.backward(cache.norm, dh);
        dx.add_assign(&grad).expect("residual shapes agree");
        dx
    }

    fn visit(&self, prefix: &str, f: Visit<'_, T>) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: VisitMut<'_, T>) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

#[derive(Debug, Clone)]
pub enum Block<T> {
    Conv(Conv2d<T>),
    Norm(GroupNorm<T>),
    Swish,
    Tanh,
    Upsample,
    Res(ResBlock<T>),
    Attention(AttentionBlock<T>),
}

pub enum BlockCache<T> {
    Conv(ConvCache<T>),
    Norm(NormCache<T>),
    Swish(Tensor<T>),
    Tanh(Tensor<T>),
    Upsample,
    Res(ResCache<T>),
    Attention(AttnCache<T>),
}

impl<T: Scalar> Block<T> {
    fn name(&self) -> &'static str {
        match self {
            Block::Conv(_) => "conv",
            Block::Norm(_) => "norm",
            Block::Swish => "swish",
            Block::Tanh => "tanh",
            Block::Upsample => "up",
            Block::Res(_) => "res",
            Block::Attention(_) => "attn",
        }
    }
}

impl<T: Scalar> Module<T> for Block<T> {
    type Cache = BlockCache<T>;

    fn forward(&self, x: Tensor<T>) -> (Tensor<T>, BlockCache<T>) {
        match self {
            Block::Conv(l) => {
                let (y, c) = l.forward(x);
                (y, BlockCache::Conv(c))
            }
            Block::Norm(l) => {
                let (y, c) = l.forward(x);
                (y, BlockCache::Norm(c))
            }
            Block::Swish => {
                let (y, c) = Module::forward(&Swish, x);
                (y, BlockCache::Swish(c))
            }
            Block::Tanh => {
                let (y, c) = Module::forward(&Tanh, x);
                (y, BlockCache::Tanh(c))
            }
            Block::Upsample => (Module::forward(&Upsample, x).0, BlockCache::Upsample),
            Block::Res(l) => {
                let (y, c) = l.forward(x);
                (y, BlockCache::Res(c))
            }
            Block::Attention(l) => {
                let (y, c) = l.forward(x);
                (y, BlockCache::Attention(c))
            }
        }
    }

    fn backward(&mut self, cache: BlockCache<T>, grad: Tensor<T>) -> Tensor<T> {
        match (self, cache) {
            (Block::Conv(l), BlockCache::Conv(c)) => l.backward(c, grad),
            (Block::Norm(l), BlockCache::Norm(c)) => l.backward(c, grad),
            (Block::Swish, BlockCache::Swish(c)) => Swish.backward(c, grad),
            (Block::Tanh, BlockCache::Tanh(c)) => Tanh.backward(c, grad),
            (Block::Upsample, BlockCache::Upsample) => Upsample.backward((), grad),
            (Block::Res(l), BlockCache::Res(c)) => l.backward(c, grad),
            (Block::Attention(l), BlockCache::Attention(c)) => l.backward(c, grad),
            (b, _) => panic!("cache does not belong to a {} block", b.name()),
        }
    }

    fn infer(&self, x: Tensor<T>) -> Tensor<T> {
        match self {
            Block::Tanh => Module::infer(&Tanh, x),
            _ => self.forward(x).0,
        }
    }

    fn visit(&self, prefix: &str, f: Visit<'_, T>) {
        match self {
            Block::Conv(l) => l.visit(prefix, f),
            Block::Norm(l) => l.visit(prefix, f),
            Block::Res(l) => l.visit(prefix, f),
            Block::Attention(l) => l.visit(prefix, f),
            Block::Swish | Block::Tanh | Block::Upsample => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: VisitMut<'_, T>) {
        match self {
            Block::Conv(l) => l.visit_mut(prefix, f),
            Block::Norm(l) => l.visit_mut(prefix, f),
            Block::Res(l) => l.visit_mut(prefix, f),
            Block::Attention(l) => l.visit_mut(prefix, f),
            Block::Swish | Block::Tanh | Block::Upsample => {}
        }
    }
}

/// A chain of blocks; parameters are named `<index>.<kind>.<param>`.
#[derive(Debug, Clone, Default)]
pub struct Sequential<T> {
    blocks: Vec<Block<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Sequential { blocks: Vec::new() }
    }

    pub fn push(&mut self, block: Block<T>) -> &mut Self {
        self.blocks.push(block);
        self
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block<T>] {
        &mut self.blocks
    }
}

impl<T: Scalar> Module<T> for Sequential<T> {
    type Cache = Vec<BlockCache<T>>;

    fn forward(&self, mut x: Tensor<T>) -> (Tensor<T>, Vec<BlockCache<T>>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(x);
            caches.push(c);
            x = y;
        }
        (x, caches)
    }

    fn backward(&mut self, caches: Vec<BlockCache<T>>, mut grad: Tensor<T>) -> Tensor<T> {
        assert_eq!(caches.len(), self.blocks.len(), "one cache per block");
        for (b, c) in self.blocks.iter_mut().zip(caches).rev() {
            grad = b.backward(c, grad);
        }
        grad
    }

    fn infer(&self, mut x: Tensor<T>) -> Tensor<T> {
        for b in &self.blocks {
            x = b.infer(x);
        }
        x
    }

    fn visit(&self, prefix: &str, f: Visit<'_, T>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("{i}.{}", b.name())), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: VisitMut<'_, T>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let name = format!("{i}.{}", b.name());
            b.visit_mut(&join(prefix, &name), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn randn(shape: [usize; 4], r: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.sample(StandardNormal)).collect()).unwrap()
    }

    /// Direct 7-loop convolution.
    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [b, c, h, w] = x.shape();
        let (ho, wo) = conv.output_size(h, w);
        let k = conv.kernel;
        let mut y = Tensor::zeros([b, conv.cout, ho, wo]);
        for bi in 0..b {
            for co in 0..conv.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = conv.bias.value[co];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += conv.weight.value[((co * c + ci) * k + ky) * k + kx]
                                        * x.data()[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        y.data_mut()[((bi * conv.cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut r = rng();
        for (k, s, h) in [(3, 1, 5), (3, 2, 6), (1, 1, 4), (3, 2, 7)] {
            let conv = Conv2d::<f64>::new(3, 4, k, s, &mut r);
            let x = randn([2, 3, h, h + 1], &mut r);
            let (y, _) = conv.forward(x.clone());
            let z = naive_conv(&conv, &x);
            assert_eq!(y.shape(), z.shape());
            for (a, b) in y.data().iter().zip(z.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn swish_values() {
        assert_eq!(swish(0.0f64), 0.0);
        assert!((swish(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn group_count_follows_group_size() {
        assert_eq!(GroupNorm::<f32>::with_group_size(64, 32).groups(), 2);
        assert_eq!(GroupNorm::<f32>::with_group_size(32, 32).groups(), 1);
        assert_eq!(GroupNorm::<f32>::with_group_size(4, 32).groups(), 1);
        assert_eq!(GroupNorm::<f32>::with_group_size(192, 32).groups(), 6);
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let mut r = rng();
        let gn = GroupNorm::<f64>::new(2, 4);
        let x = randn([3, 4, 5, 5], &mut r).map(|v| 3.0 * v + 7.0);
        let (y, _) = gn.forward(x);
        for s in y.data().chunks(2 * 25) {
            let m = s.iter().sum::<f64>() / s.len() as f64;
            let v = s.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / s.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_final_conv_makes_res_block_a_projected_identity() {
        let mut r = rng();
        for (cin, cout) in [(4, 4), (4, 8)] {
            let mut block = ResBlock::<f64>::new(cin, cout, 4, &mut r);
            block.conv2.weight.value.fill(0.0);
            block.conv2.bias.value.fill(0.0);
            let x = randn([2, cin, 4, 4], &mut r);
            let (y, _) = block.forward(x.clone());
            let expect = match &block.skip {
                Some(s) => s.forward(x).0,
                None => x,
            };
            assert_eq!(y, expect);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut r = rng();
        let attn = AttentionBlock::<f64>::new(8, 4, &mut r);
        let x = randn([2, 8, 3, 4], &mut r);
        let w = attn.attention_weights(&x);
        assert_eq!(w.len(), 2 * 12 * 12);
        for row in w.chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn attention_over_one_position_returns_values() {
        let mut r = rng();
        let attn = AttentionBlock::<f64>::new(4, 4, &mut r);
        let x = randn([1, 4, 1, 1], &mut r);
        let (h, _) = attn.norm.forward_ref(&x);
        let (qkv, _) = attn.qkv.forward(h);
        let v = qkv.narrow_channels(8, 4).unwrap();
        let (mut expect, _) = attn.proj.forward(v);
        expect.add_assign(&x).unwrap();
        let (y, _) = attn.forward(x);
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_with_constant_keys_is_uniform() {
        let mut r = rng();
        let mut attn = AttentionBlock::<f64>::new(4, 4, &mut r);
        // zero the key rows of the projection so every key equals its bias
        for co in 4..8 {
            for ci in 0..4 {
                attn.qkv.weight.value[co * 4 + ci] = 0.0;
            }
        }
        let w = attn.attention_weights(&randn([1, 4, 3, 3], &mut r));
        for p in w {
            assert!((p - 1.0 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut r = rng();
        let x = randn([2, 3, 3, 4], &mut r);
        let g = randn([2, 3, 6, 8], &mut r);
        let (y, _) = Module::forward(&Upsample, x.clone());
        let dx = Upsample.backward((), g.clone());
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    /// Checks `backward` of a module against central differences of
    /// `<forward(x), probe>` for the input and every parameter.
    fn fd_check<M: Module<f64> + Clone>(module: &M, x: Tensor<f64>, r: &mut ChaCha8Rng) {
        let (y, cache) = module.forward(x.clone());
        let probe = randn(y.shape(), r);
        let objective = |m: &M, x: Tensor<f64>| -> f64 {
            let (y, _) = m.forward(x);
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut m = module.clone();
        m.visit_mut("", &mut |_, p| p.zero_grad());
        let dx = m.backward(cache, probe.clone());
        let h = 1e-5;
        let close = |a: f64, fd: f64, what: &str| {
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "{what}: analytic {a} vs fd {fd}");
        };
        for i in (0..x.len()).step_by(3) {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut q = x.clone();
            q.data_mut()[i] -= h;
            let fd = (objective(module, p) - objective(module, q)) / (2.0 * h);
            close(dx.data()[i], fd, &format!("input[{i}]"));
        }
        let mut grads = Vec::new();
        m.visit("", &mut |name, p| grads.push((name.to_string(), p.grad.clone())));
        for (name, grad) in grads {
            for i in (0..grad.len()).step_by(5) {
                let bump = |delta: f64| {
                    let mut mm = module.clone();
                    mm.visit_mut("", &mut |n, p| {
                        if n == name {
                            p.value[i] += delta;
                        }
                    });
                    objective(&mm, x.clone())
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                close(grad[i], fd, &format!("{name}[{i}]"));
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut r = rng();
        fd_check(&Conv2d::new(3, 4, 3, 1, &mut r), randn([2, 3, 5, 4], &mut r), &mut r);
        fd_check(&Conv2d::new(3, 2, 3, 2, &mut r), randn([2, 3, 6, 5], &mut r), &mut r);
        fd_check(&Conv2d::new(3, 2, 1, 1, &mut r), randn([1, 3, 3, 3], &mut r), &mut r);
    }

    #[test]
    fn group_norm_gradients() {
        let mut r = rng();
        let mut gn = GroupNorm::new(2, 4);
        gn.gamma = Param::uniform(&[4], 2.0, &mut r);
        gn.beta = Param::uniform(&[4], 1.0, &mut r);
        fd_check(&gn, randn([2, 4, 3, 3], &mut r), &mut r);
    }

    #[test]
    fn pointwise_gradients() {
        let mut r = rng();
        fd_check(&Block::Swish, randn([2, 2, 3, 3], &mut r), &mut r);
        fd_check(&Block::Tanh, randn([2, 2, 3, 3], &mut r), &mut r);
        fd_check(&Block::Upsample, randn([2, 2, 3, 3], &mut r), &mut r);
    }

    #[test]
    fn res_block_gradients() {
        let mut r = rng();
        fd_check(&ResBlock::new(4, 4, 2, &mut r), randn([2, 4, 4, 4], &mut r), &mut r);
        fd_check(&ResBlock::new(2, 4, 2, &mut r), randn([2, 2, 4, 3], &mut r), &mut r);
    }

    #[test]
    fn attention_gradients() {
        let mut r = rng();
        fd_check(&AttentionBlock::new(4, 2, &mut r), randn([2, 4, 3, 3], &mut r), &mut r);
    }

    #[test]
    fn sequential_gradients_and_names() {
        let mut r = rng();
        let mut s = Sequential::new();
        s.push(Block::Conv(Conv2d::new(2, 4, 3, 1, &mut r)))
            .push(Block::Res(ResBlock::new(4, 4, 2, &mut r)))
            .push(Block::Upsample)
            .push(Block::Tanh);
        let mut names = Vec::new();
        s.visit("net", &mut |n, _| names.push(n.to_string()));
        assert_eq!(names[0], "net.0.conv.weight");
        assert!(names.contains(&"net.1.res.norm2.gamma".to_string()));
        fd_check(&s, randn([1, 2, 3, 3], &mut r), &mut r);
        let x = randn([1, 2, 3, 3], &mut r);
        assert_eq!(s.infer(x.clone()), s.forward(x).0);
    }
}
