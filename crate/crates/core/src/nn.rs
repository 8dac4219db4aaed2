//! Convolution, pooling, normalization and activation primitives with
//! hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during a training-mode
//! forward. Inference-mode forwards leave the cache empty, so `backward`
//! must follow a `forward(.., Mode::Train)` on the same layer.

use matrixmultiply::dgemm;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Forward-pass mode. Normalization uses batch statistics in `Train` and
/// running statistics in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named block of scalars. Running statistics of normalization layers are
/// stored as non-trainable params so that checkpoints capture them.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Param {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: Vec<f64>) -> Self {
        Param {
            trainable: false,
            ..Param::new(value)
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns parameters.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    /// Trainable scalars only; normalization running statistics are excluded.
    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }
}

fn pair_default_one() -> (usize, usize) {
    (1, 1)
}

/// Static description of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    #[serde(default = "pair_default_one")]
    pub stride: (usize, usize),
    #[serde(default)]
    pub padding: (usize, usize),
    #[serde(default = "pair_default_one")]
    pub dilation: (usize, usize),
    #[serde(default = "default_true")]
    pub has_bias: bool,
}

fn default_true() -> bool {
    true
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            has_bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    /// `floor((in + 2 pad - dilation (kernel - 1) - 1) / stride) + 1`, or
    /// `None` when the dilated kernel does not fit inside the padded input.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        fn axis(n: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
            let span = d * (k - 1) + 1;
            let padded = n + 2 * p;
            if padded < span || s == 0 {
                None
            } else {
                Some((padded - span) / s + 1)
            }
        }
        Some((
            axis(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0)?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }

    pub fn num_parameters(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.in_channels * self.out_channels
            + if self.has_bias { self.out_channels } else { 0 }
    }

    fn validate(&self) -> Result<()> {
        let positive = self.in_channels > 0
            && self.out_channels > 0
            && self.kernel.0 > 0
            && self.kernel.1 > 0
            && self.stride.0 > 0
            && self.stride.1 > 0
            && self.dilation.0 > 0
            && self.dilation.1 > 0;
        if positive {
            Ok(())
        } else {
            Err(Error::config(format!("invalid convolution {:?}", self)))
        }
    }
}

/// Index arithmetic shared by convolution (im2col on the input) and
/// transposed convolution (col2im onto the output).
///
/// `big` is the spatially larger side (convolution input), `small` the side
/// whose positions enumerate the kernel windows (convolution output).
#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    dil: (usize, usize),
    big: (usize, usize),
    small: (usize, usize),
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.k.0 * self.k.1
    }

    /// Writes the `[C*kh*kw, rows*small_w]` patch matrix for small-side rows `r0..r1`.
    fn im2col(&self, big: &[f64], r0: usize, r1: usize, cols: &mut [f64]) {
        let (bh, bw) = self.big;
        let sw = self.small.1;
        let width = (r1 - r0) * sw;
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &big[c * bh * bw..(c + 1) * bh * bw];
            for ky in 0..self.k.0 {
                for kx in 0..self.k.1 {
                    let dst = &mut cols[row * width..(row + 1) * width];
                    let mut idx = 0;
                    for oy in r0..r1 {
                        let iy = (oy * self.stride.0 + ky * self.dil.0) as isize - self.pad.0 as isize;
                        if iy < 0 || iy >= bh as isize {
                            dst[idx..idx + sw].iter_mut().for_each(|v| *v = 0.0);
                            idx += sw;
                            continue;
                        }
                        let src = &plane[iy as usize * bw..(iy as usize + 1) * bw];
                        let d = &mut dst[idx..idx + sw];
                        let (lo, hi) = self.valid_columns(kx);
                        d[..lo].iter_mut().for_each(|v| *v = 0.0);
                        d[hi..].iter_mut().for_each(|v| *v = 0.0);
                        let off = kx * self.dil.1;
                        if lo < hi && self.stride.1 == 1 {
                            let start = lo + off - self.pad.1;
                            d[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (ox, v) in d.iter_mut().enumerate().take(hi).skip(lo) {
                                *v = src[ox * self.stride.1 + off - self.pad.1];
                            }
                        }
                        idx += sw;
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters-adds the patch matrix back onto `big`.
    fn col2im(&self, cols: &[f64], r0: usize, r1: usize, big: &mut [f64]) {
        let (bh, bw) = self.big;
        let sw = self.small.1;
        let width = (r1 - r0) * sw;
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &mut big[c * bh * bw..(c + 1) * bh * bw];
            for ky in 0..self.k.0 {
                for kx in 0..self.k.1 {
                    let src = &cols[row * width..(row + 1) * width];
                    let mut idx = 0;
                    for oy in r0..r1 {
                        let iy = (oy * self.stride.0 + ky * self.dil.0) as isize - self.pad.0 as isize;
                        if iy < 0 || iy >= bh as isize {
                            idx += sw;
                            continue;
                        }
                        let dst = &mut plane[iy as usize * bw..(iy as usize + 1) * bw];
                        let s = &src[idx..idx + sw];
                        let (lo, hi) = self.valid_columns(kx);
                        let off = kx * self.dil.1;
                        if lo < hi && self.stride.1 == 1 {
                            let start = lo + off - self.pad.1;
                            for (d, v) in dst[start..start + hi - lo].iter_mut().zip(&s[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for (ox, v) in s.iter().enumerate().take(hi).skip(lo) {
                                dst[ox * self.stride.1 + off - self.pad.1] += v;
                            }
                        }
                        idx += sw;
                    }
                    row += 1;
                }
            }
        }
    }

    /// Range of small-side columns whose tap `kx` lands inside the big side.
    fn valid_columns(&self, kx: usize) -> (usize, usize) {
        let (st, off, pad, bw, sw) = (self.stride.1, kx * self.dil.1, self.pad.1, self.big.1, self.small.1);
        let lo = if off >= pad { 0 } else { (pad - off).div_ceil(st) };
        // ox * st + off - pad <= bw - 1
        let hi = if off > bw - 1 + pad {
            0
        } else {
            ((bw - 1 + pad - off) / st + 1).min(sw)
        };
        (lo.min(hi), hi)
    }

    /// Small-side rows per band so that one patch matrix stays around 16 MiB.
    fn band_rows(&self) -> usize {
        const BUDGET: usize = 1 << 21;
        (BUDGET / (self.rows() * self.small.1).max(1)).clamp(1, self.small.0.max(1))
    }
}

/// `c[m x n] (+)= a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover every strided access
    // of the m x k, k x n and m x n operands.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn kaiming_uniform(rng: &mut impl Rng, fan_in: f64, len: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in.max(1.0)).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

/// 2D convolution with stride, zero padding and dilation.
#[derive(Debug, Clone)]
pub struct Conv2d {
    spec: ConvSpec,
    /// `[out, in, kh, kw]`
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let fan_in = (spec.in_channels * spec.kernel.0 * spec.kernel.1) as f64;
        let len = spec.in_channels * spec.out_channels * spec.kernel.0 * spec.kernel.1;
        Ok(Conv2d {
            spec,
            weight: Param::new(kaiming_uniform(rng, fan_in, len)),
            bias: spec.has_bias.then(|| Param::new(vec![0.0; spec.out_channels])),
            input: None,
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    fn geometry(&self, h: usize, w: usize) -> Result<Geometry> {
        let (oh, ow) = self.spec.output_size(h, w).ok_or_else(|| {
            Error::shape(format!(
                "{}x{} input is smaller than the {:?} kernel support of {:?}",
                h, w, self.spec.kernel, self.spec
            ))
        })?;
        Ok(Geometry {
            channels: self.spec.in_channels,
            k: self.spec.kernel,
            stride: self.spec.stride,
            pad: self.spec.padding,
            dil: self.spec.dilation,
            big: (h, w),
            small: (oh, ow),
        })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        if c != self.spec.in_channels {
            return Err(Error::config(format!(
                "convolution expects {} input channels, got {}",
                self.spec.in_channels, c
            )));
        }
        let g = self.geometry(h, w)?;
        let (oh, ow) = g.small;
        let cout = self.spec.out_channels;
        let kdim = g.rows();
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        let band = g.band_rows();
        let mut cols = vec![0.0; kdim * band * ow];
        for i in 0..n {
            let src = x.sample(i);
            let dst = out.sample_mut(i);
            let mut r0 = 0;
            while r0 < oh {
                let r1 = (r0 + band).min(oh);
                let width = (r1 - r0) * ow;
                g.im2col(src, r0, r1, &mut cols[..kdim * width]);
                gemm(
                    cout,
                    kdim,
                    width,
                    &self.weight.value,
                    kdim,
                    1,
                    &cols,
                    width,
                    1,
                    0.0,
                    &mut dst[r0 * ow..],
                    oh * ow,
                );
                r0 = r1;
            }
            if let Some(b) = &self.bias {
                for (co, plane) in dst.chunks_mut(oh * ow).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b.value[co]);
                }
            }
        }
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::State("convolution backward without a training forward".into()))?;
        let [n, _, h, w] = x.shape();
        let g = self.geometry(h, w)?;
        let (oh, ow) = g.small;
        let cout = self.spec.out_channels;
        let kdim = g.rows();
        let mut dx = Tensor::zeros(x.shape());
        let band = g.band_rows();
        let mut cols = vec![0.0; kdim * band * ow];
        let mut dcols = vec![0.0; kdim * band * ow];
        for i in 0..n {
            let src = x.sample(i);
            let grad_out = dy.sample(i);
            let mut r0 = 0;
            while r0 < oh {
                let r1 = (r0 + band).min(oh);
                let width = (r1 - r0) * ow;
                g.im2col(src, r0, r1, &mut cols[..kdim * width]);
                // dW += dY_band * cols^T
                gemm(
                    cout,
                    width,
                    kdim,
                    &grad_out[r0 * ow..],
                    oh * ow,
                    1,
                    &cols,
                    1,
                    width,
                    1.0,
                    &mut self.weight.grad,
                    kdim,
                );
                // dcols = W^T * dY_band
                gemm(
                    kdim,
                    cout,
                    width,
                    &self.weight.value,
                    1,
                    kdim,
                    &grad_out[r0 * ow..],
                    oh * ow,
                    1,
                    0.0,
                    &mut dcols,
                    width,
                );
                g.col2im(&dcols[..kdim * width], r0, r1, dx.sample_mut(i));
                r0 = r1;
            }
            if let Some(b) = &mut self.bias {
                for (co, plane) in grad_out.chunks(oh * ow).enumerate() {
                    b.grad[co] += plane.iter().sum::<f64>();
                }
            }
        }
        Ok(dx)
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Transposed convolution whose output size is exactly `stride * input`.
///
/// The full transposed convolution spans `(in - 1) * stride - 2 pad + k`
/// positions; the remaining `stride + 2 pad - k` rows (the output padding)
/// are appended at the bottom/right. Construction fails when a trailing
/// output row would receive no kernel tap.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    spec: ConvSpec,
    /// `[in, out, kh, kw]`
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl ConvTranspose2d {
    pub fn new(spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        if spec.dilation != (1, 1) {
            return Err(Error::config("dilated transposed convolution is not supported"));
        }
        for (k, s, p) in [
            (spec.kernel.0, spec.stride.0, spec.padding.0),
            (spec.kernel.1, spec.stride.1, spec.padding.1),
        ] {
            if s + 2 * p < k {
                return Err(Error::config(format!(
                    "transposed convolution k={k}, stride={s}, padding={p} overshoots {s}x upsampling"
                )));
            }
            if k < p + s {
                return Err(Error::config(format!(
                    "transposed convolution k={k}, stride={s}, padding={p} leaves trailing output rows uncovered; \
                     {s}x upsampling needs k >= padding + stride"
                )));
            }
        }
        let fan_in = (spec.in_channels * spec.kernel.0 * spec.kernel.1) as f64 / (spec.stride.0 * spec.stride.1) as f64;
        let len = spec.in_channels * spec.out_channels * spec.kernel.0 * spec.kernel.1;
        Ok(ConvTranspose2d {
            spec,
            weight: Param::new(kaiming_uniform(rng, fan_in, len)),
            bias: spec.has_bias.then(|| Param::new(vec![0.0; spec.out_channels])),
            input: None,
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h * self.spec.stride.0, w * self.spec.stride.1)
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        Geometry {
            channels: self.spec.out_channels,
            k: self.spec.kernel,
            stride: self.spec.stride,
            pad: self.spec.padding,
            dil: (1, 1),
            big: self.output_size(h, w),
            small: (h, w),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        if c != self.spec.in_channels {
            return Err(Error::config(format!(
                "transposed convolution expects {} input channels, got {}",
                self.spec.in_channels, c
            )));
        }
        let g = self.geometry(h, w);
        let (oh, ow) = g.big;
        let cin = self.spec.in_channels;
        let kdim = g.rows();
        let mut out = Tensor::zeros([n, self.spec.out_channels, oh, ow]);
        let band = g.band_rows();
        let mut cols = vec![0.0; kdim * band * w];
        for i in 0..n {
            let src = x.sample(i);
            let mut r0 = 0;
            while r0 < h {
                let r1 = (r0 + band).min(h);
                let width = (r1 - r0) * w;
                // cols = W^T * x_band, W viewed as [in, kdim]
                gemm(
                    kdim,
                    cin,
                    width,
                    &self.weight.value,
                    1,
                    kdim,
                    &src[r0 * w..],
                    h * w,
                    1,
                    0.0,
                    &mut cols,
                    width,
                );
                g.col2im(&cols[..kdim * width], r0, r1, out.sample_mut(i));
                r0 = r1;
            }
            if let Some(b) = &self.bias {
                for (co, plane) in out.sample_mut(i).chunks_mut(oh * ow).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b.value[co]);
                }
            }
        }
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::State("transposed convolution backward without a training forward".into()))?;
        let [n, _, h, w] = x.shape();
        let g = self.geometry(h, w);
        let (oh, ow) = g.big;
        let cin = self.spec.in_channels;
        let kdim = g.rows();
        let mut dx = Tensor::zeros(x.shape());
        let band = g.band_rows();
        let mut dcols = vec![0.0; kdim * band * w];
        for i in 0..n {
            let src = x.sample(i);
            let grad_out = dy.sample(i);
            let mut r0 = 0;
            while r0 < h {
                let r1 = (r0 + band).min(h);
                let width = (r1 - r0) * w;
                g.im2col(grad_out, r0, r1, &mut dcols[..kdim * width]);
                // dx_band = W * dcols
                gemm(
                    cin,
                    kdim,
                    width,
                    &self.weight.value,
                    kdim,
                    1,
                    &dcols,
                    width,
                    1,
                    0.0,
                    &mut dx.sample_mut(i)[r0 * w..],
                    h * w,
                );
                // dW += x_band * dcols^T
                gemm(
                    cin,
                    width,
                    kdim,
                    &src[r0 * w..],
                    h * w,
                    1,
                    &dcols,
                    1,
                    width,
                    1.0,
                    &mut self.weight.grad,
                    kdim,
                );
                r0 = r1;
            }
            if let Some(b) = &mut self.bias {
                for (co, plane) in grad_out.chunks(oh * ow).enumerate() {
                    b.grad[co] += plane.iter().sum::<f64>();
                }
            }
        }
        Ok(dx)
    }
}

impl Parameterized for ConvTranspose2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Max pooling with `-inf` padding.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        ConvSpec::new(1, 1, self.kernel)
            .stride(self.stride)
            .padding(self.padding)
            .output_size(h, w)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = self
            .output_size(h, w)
            .ok_or_else(|| Error::shape(format!("{h}x{w} input too small for pooling")))?;
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = Vec::with_capacity(out.len());
        let p = self.padding as isize;
        for nc in 0..n * c {
            let plane = &x.data()[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out.data_mut()[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if plane[idx] > best || best_idx == usize::MAX {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                    argmax.push(nc * h * w + best_idx);
                }
            }
        }
        self.cache = (mode == Mode::Train).then(|| (argmax, x.shape()));
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let (argmax, shape) = self
            .cache
            .take()
            .ok_or_else(|| Error::State("pooling backward without a training forward".into()))?;
        let mut dx = Tensor::zeros(shape);
        let data = dx.data_mut();
        for (g, &idx) in dy.data().iter().zip(&argmax) {
            data[idx] += g;
        }
        Ok(dx)
    }
}

/// Per-channel batch normalization with a learned scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: Param::buffer(vec![0.0; channels]),
            running_var: Param::buffer(vec![1.0; channels]),
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        if c != self.channels {
            return Err(Error::config(format!(
                "normalization over {} channels applied to {} channels",
                self.channels, c
            )));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let (mean, var) = if mode == Mode::Train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for i in 0..n {
                for (ch, m) in mean.iter_mut().enumerate() {
                    *m += x.plane(i, ch).iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for i in 0..n {
                for ch in 0..c {
                    let m = mean[ch];
                    var[ch] += x.plane(i, ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            for ch in 0..c {
                let unbiased = if count > 1.0 {
                    var[ch] * count / (count - 1.0)
                } else {
                    var[ch]
                };
                self.running_mean.value[ch] =
                    (1.0 - self.momentum) * self.running_mean.value[ch] + self.momentum * mean[ch];
                self.running_var.value[ch] =
                    (1.0 - self.momentum) * self.running_var.value[ch] + self.momentum * unbiased;
            }
            (mean, var)
        } else {
            (self.running_mean.value.clone(), self.running_var.value.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for i in 0..n {
            for ch in 0..c {
                let (m, s) = (mean[ch], inv_std[ch]);
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                let src = x.plane(i, ch);
                let xh = xhat.plane_mut(i, ch);
                for (d, &v) in xh.iter_mut().zip(src) {
                    *d = (v - m) * s;
                }
                let xh = xhat.plane(i, ch).to_vec();
                for (o, v) in out.plane_mut(i, ch).iter_mut().zip(xh) {
                    *o = g * v + b;
                }
            }
        }
        self.cache = (mode == Mode::Train).then_some(BnCache {
            xhat,
            inv_std,
            batch_stats: true,
        });
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("normalization backward without a training forward".into()))?;
        let [n, c, h, w] = dy.shape();
        let m = (n * h * w) as f64;
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..n {
                for (g, xh) in dy.plane(i, ch).iter().zip(cache.xhat.plane(i, ch)) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
            }
            self.beta.grad[ch] += sum_dy;
            self.gamma.grad[ch] += sum_dy_xhat;
            let scale = self.gamma.value[ch] * cache.inv_std[ch];
            for i in 0..n {
                let g = dy.plane(i, ch).to_vec();
                let xh = cache.xhat.plane(i, ch).to_vec();
                for ((d, g), xh) in dx.plane_mut(i, ch).iter_mut().zip(g).zip(xh) {
                    *d = if cache.batch_stats {
                        scale * (g - sum_dy / m - xh * sum_dy_xhat / m)
                    } else {
                        scale * g
                    };
                }
            }
        }
        Ok(dx)
    }
}

impl Parameterized for BatchNorm2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    output: Option<Tensor>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let y = x.map(|v| v.max(0.0));
        self.output = (mode == Mode::Train).then(|| y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let y = self
            .output
            .take()
            .ok_or_else(|| Error::State("activation backward without a training forward".into()))?;
        let mut dx = dy.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
            if v <= 0.0 {
                *d = 0.0;
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid {
    output: Option<Tensor>,
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Sigmoid {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let y = x.map(sigmoid);
        self.output = (mode == Mode::Train).then(|| y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let y = self
            .output
            .take()
            .ok_or_else(|| Error::State("activation backward without a training forward".into()))?;
        let mut dx = dy.clone();
        for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
            *d *= s * (1.0 - s);
        }
        Ok(dx)
    }
}

/// Convolution followed by ReLU; the pattern for every convolution that is
/// not followed by normalization.
#[derive(Debug, Clone)]
pub struct ConvRelu {
    pub conv: Conv2d,
    relu: Relu,
}

impl ConvRelu {
    pub fn new(spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        Ok(ConvRelu {
            conv: Conv2d::new(spec, rng)?,
            relu: Relu::default(),
        })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv.forward(x, mode)?;
        Ok(self.relu.forward(&y, mode))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let d = self.relu.backward(dy)?;
        self.conv.backward(&d)
    }
}

impl Parameterized for ConvRelu {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params_mut(f)
    }
}

/// Normalization followed by ReLU.
#[derive(Debug, Clone)]
pub struct BnRelu {
    pub bn: BatchNorm2d,
    relu: Relu,
}

impl BnRelu {
    pub fn new(channels: usize) -> Self {
        BnRelu {
            bn: BatchNorm2d::new(channels),
            relu: Relu::default(),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.bn.forward(x, mode)?;
        Ok(self.relu.forward(&y, mode))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let d = self.relu.backward(dy)?;
        self.bn.backward(&d)
    }
}

impl Parameterized for BnRelu {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.bn.visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bn.visit_params_mut(f)
    }
}
