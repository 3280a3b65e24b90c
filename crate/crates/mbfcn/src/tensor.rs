//! Dense 4-D tensors (batch, channel, height, width) and the forward/adjoint
//! kernels the detector is built from.
//!
//! Training and inference run in `f32`; every kernel is also instantiable at
//! `f64`, which the finite-difference gradient checker uses.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Scalar types tensors can hold. Implemented for `f32` and `f64`.
pub trait Element:
    Copy
    + PartialOrd
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
}

macro_rules! impl_element {
    ($t:ty) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn minimum(self, other: Self) -> Self {
                if self < other {
                    self
                } else {
                    other
                }
            }
        }
    };
}

impl_element!(f32);
impl_element!(f64);

/// Dense row-major (n, c, h, w) tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: [usize; 4],
    data: Vec<E>,
    grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: [usize; 4], data: Vec<E>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Config(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                len
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::ZERO; len],
            grad: None,
        }
    }

    pub fn full(shape: [usize; 4], value: E) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
            grad: None,
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
            grad: None,
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> E {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: E) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    /// Allocates (if needed) and zeroes the gradient buffer.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = E::ZERO),
            None => self.grad = Some(vec![E::ZERO; self.data.len()]),
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[E]) {
        assert_eq!(delta.len(), self.data.len());
        let g = self
            .grad
            .get_or_insert_with(|| vec![E::ZERO; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    pub fn drop_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise conversion to another scalar type.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }
}

fn ensure_finite<E: Element>(t: &Tensor<E>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}

/// Spatial size of a convolution output along one axis.
#[inline]
pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    (size + 2 * pad - dilation * (k - 1) - 1) / stride + 1
}

/// Cross-correlation of `input` (n, c_in, h, w) with `weight`
/// (c_out, c_in, kh, kw) plus a per-output-channel bias.
pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &[E],
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<Tensor<E>> {
    if stride == 0 || dilation == 0 {
        return Err(Error::Config(format!(
            "conv2d stride {stride} and dilation {dilation} must be >= 1"
        )));
    }
    let [n, c_in, h, w] = input.shape();
    let [c_out, wc_in, kh, kw] = weight.shape();
    if c_in != wc_in {
        return Err(Error::Config(format!(
            "conv2d channel mismatch: input has {c_in} channels, weight expects {wc_in}"
        )));
    }
    if bias.len() != c_out {
        return Err(Error::Config(format!(
            "conv2d bias length {} does not match {c_out} output channels",
            bias.len()
        )));
    }
    if h + 2 * pad < dilation * (kh - 1) + 1 || w + 2 * pad < dilation * (kw - 1) + 1 {
        return Err(Error::Config(format!(
            "conv2d kernel {kh}x{kw} (dilation {dilation}) does not fit input {h}x{w} with pad {pad}"
        )));
    }
    ensure_finite(weight, "conv2d weight")?;
    if bias.iter().any(|b| !b.is_finite()) {
        return Err(Error::Numeric("non-finite values in conv2d bias".into()));
    }

    let oh = conv_out_size(h, kh, stride, pad, dilation);
    let ow = conv_out_size(w, kw, stride, pad, dilation);
    let mut out = Tensor::zeros([n, c_out, oh, ow]);

    // Each output plane is accumulated tap by tap in fixed (ci, ky, kx)
    // order, so per-element summation matches the nested-loop definition
    // bit for bit. Planes are independent, which keeps the parallel split
    // over output channels deterministic.
    let in_planes: Vec<&[E]> = (0..n * c_in)
        .map(|p| &input.data[p * h * w..(p + 1) * h * w])
        .collect();
    crate::parallel::for_each_plane(&mut out.data, oh * ow, |plane_idx, out_plane| {
        let bn = plane_idx / c_out;
        let co = plane_idx % c_out;
        for ci in 0..c_in {
            let in_plane = in_planes[bn * c_in + ci];
            for ky in 0..kh {
                let wrow = weight.idx(co, ci, ky, 0);
                for kx in 0..kw {
                    let wv = weight.data[wrow + kx];
                    let x_off = kx * dilation;
                    // Valid ox range: 0 <= ox*stride + kx*dilation - pad < w.
                    let ox_lo = pad.saturating_sub(x_off).div_ceil(stride).min(ow);
                    let ox_hi = if w + pad > x_off {
                        (((w + pad - x_off - 1) / stride) + 1).min(ow)
                    } else {
                        0
                    };
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let base = ox_lo + x_off - pad;
                            for (o, x) in out_row[ox_lo..ox_hi]
                                .iter_mut()
                                .zip(&in_row[base..base + (ox_hi - ox_lo)])
                            {
                                *o += wv * *x;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wv * in_row[ox * stride + x_off - pad];
                            }
                        }
                    }
                }
            }
        }
        let b = bias[co];
        for o in out_plane.iter_mut() {
            *o += b;
        }
    });
    Ok(out)
}

/// Adjoint of [`conv2d`]: gradients w.r.t. input, weight, and bias.
pub fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    pad: usize,
    dilation: usize,
    grad_out: &[E],
) -> (Tensor<E>, Tensor<E>, Vec<E>) {
    let [n, c_in, h, w] = input.shape();
    let [c_out, _, kh, kw] = weight.shape();
    let oh = conv_out_size(h, kh, stride, pad, dilation);
    let ow = conv_out_size(w, kw, stride, pad, dilation);

    let mut g_in = Tensor::zeros([n, c_in, h, w]);
    let mut g_w = Tensor::zeros(weight.shape());
    let mut g_b = vec![E::ZERO; c_out];

    let valid_ox = |x_off: usize| {
        let lo = pad.saturating_sub(x_off).div_ceil(stride).min(ow);
        let hi = if w + pad > x_off {
            (((w + pad - x_off - 1) / stride) + 1).min(ow)
        } else {
            0
        };
        (lo, hi)
    };

    // Input gradient: each (bn, ci) plane is an independent task.
    crate::parallel::for_each_plane(&mut g_in.data, h * w, |plane_idx, gin_plane| {
        let bn = plane_idx / c_in;
        let ci = plane_idx % c_in;
        for co in 0..c_out {
            let gout_plane = &grad_out[(bn * c_out + co) * oh * ow..(bn * c_out + co + 1) * oh * ow];
            for ky in 0..kh {
                let wrow = weight.idx(co, ci, ky, 0);
                for kx in 0..kw {
                    let wv = weight.data[wrow + kx];
                    let x_off = kx * dilation;
                    let (ox_lo, ox_hi) = valid_ox(x_off);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let gin_row = &mut gin_plane[iy as usize * w..(iy as usize + 1) * w];
                        let gout_row = &gout_plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let base = ox_lo + x_off - pad;
                            for (g, x) in gout_row[ox_lo..ox_hi]
                                .iter()
                                .zip(gin_row[base..base + (ox_hi - ox_lo)].iter_mut())
                            {
                                *x += wv * *g;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                gin_row[ox * stride + x_off - pad] += wv * gout_row[ox];
                            }
                        }
                    }
                }
            }
        }
    });

    // Weight and bias gradients: one task per output channel.
    let w_chunk = c_in * kh * kw;
    crate::parallel::for_each_plane_pair(
        &mut g_w.data,
        w_chunk,
        &mut g_b,
        1,
        |co, gw_chunk, gb| {
            for bn in 0..n {
                let gout_plane =
                    &grad_out[(bn * c_out + co) * oh * ow..(bn * c_out + co + 1) * oh * ow];
                for g in gout_plane {
                    gb[0] += *g;
                }
                for ci in 0..c_in {
                    let in_plane = &input.data[(bn * c_in + ci) * h * w..(bn * c_in + ci + 1) * h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let x_off = kx * dilation;
                            let (ox_lo, ox_hi) = valid_ox(x_off);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let mut acc = E::ZERO;
                            for oy in 0..oh {
                                let iy =
                                    (oy * stride + ky * dilation) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let in_row =
                                    &in_plane[iy as usize * w..(iy as usize + 1) * w];
                                let gout_row = &gout_plane[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    let base = ox_lo + x_off - pad;
                                    for (g, x) in gout_row[ox_lo..ox_hi]
                                        .iter()
                                        .zip(&in_row[base..base + (ox_hi - ox_lo)])
                                    {
                                        acc += *g * *x;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        acc += gout_row[ox] * in_row[ox * stride + x_off - pad];
                                    }
                                }
                            }
                            gw_chunk[(ci * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        },
    );
    (g_in, g_w, g_b)
}

/// Elementwise max(0, x).
pub fn relu<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let mut out = input.clone();
    out.drop_grad();
    for v in out.data_mut() {
        if *v < E::ZERO {
            *v = E::ZERO;
        }
    }
    out
}

/// Adjoint of [`relu`]: passes gradient where the forward input was > 0.
pub fn relu_backward<E: Element>(input: &Tensor<E>, grad_out: &[E]) -> Tensor<E> {
    let mut g = Tensor::zeros(input.shape());
    for i in 0..input.len() {
        if input.data()[i] > E::ZERO {
            g.data[i] = grad_out[i];
        }
    }
    g
}

/// Windowed maximum. Returns the output and, per output element, the flat
/// input index of its argmax (ties resolved to the first in row-major order).
pub fn max_pool2d<E: Element>(
    input: &Tensor<E>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<E>, Vec<usize>)> {
    if k == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "max_pool2d window {k} and stride {stride} must be >= 1"
        )));
    }
    let [n, c, h, w] = input.shape();
    if h < k || w < k {
        return Err(Error::Config(format!(
            "max_pool2d window {k} does not fit input {h}x{w}"
        )));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0usize; out.len()];

    for bn in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = input.at(bn, ci, oy * stride, ox * stride);
                    let mut best_i = input.idx(bn, ci, oy * stride, ox * stride);
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = input.idx(bn, ci, oy * stride + ky, ox * stride + kx);
                            if input.data[i] > best {
                                best = input.data[i];
                                best_i = i;
                            }
                        }
                    }
                    let oi = out.idx(bn, ci, oy, ox);
                    out.data[oi] = best;
                    argmax[oi] = best_i;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Adjoint of [`max_pool2d`]: routes gradient to the cached argmax positions.
pub fn max_pool2d_backward<E: Element>(
    input_shape: [usize; 4],
    argmax: &[usize],
    grad_out: &[E],
) -> Tensor<E> {
    let mut g = Tensor::zeros(input_shape);
    for (i, &src) in argmax.iter().enumerate() {
        g.data[src] += grad_out[i];
    }
    g
}

/// One-dimensional bilinear interpolation weights for up-sampling factor `f`.
/// The 2-D kernel is the outer product of this vector with itself.
pub fn bilinear_filler_1d(f: usize) -> Result<Vec<f64>> {
    if f < 2 {
        return Err(Error::Config(format!(
            "bilinear filler factor {f} must be >= 2"
        )));
    }
    let k = 2 * f - (f % 2);
    let c = (2 * f - 1 - (f % 2)) as f64 / (2 * f) as f64;
    Ok((0..k)
        .map(|i| 1.0 - (i as f64 / f as f64 - c).abs())
        .collect())
}

/// Fixed 2-D bilinear kernel, shaped (1, 1, k, k). Never trained.
pub fn bilinear_filler<E: Element>(f: usize) -> Result<Tensor<E>> {
    let row = bilinear_filler_1d(f)?;
    let k = row.len();
    let mut data = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            data.push(E::from_f64(row[i] * row[j]));
        }
    }
    Tensor::new([1, 1, k, k], data)
}

/// Kernel size and implied padding of the factor-`f` transposed convolution,
/// chosen so the output is exactly `f`x the input spatial size.
pub fn upsample_geometry(f: usize) -> (usize, usize) {
    let k = 2 * f - (f % 2);
    let pad = (k - f).div_ceil(2);
    (k, pad)
}

/// Per-channel transposed convolution with the fixed bilinear kernel:
/// stride `f`, output spatial size exactly `f*h` x `f*w`.
pub fn bilinear_upsample<E: Element>(input: &Tensor<E>, f: usize) -> Result<Tensor<E>> {
    let kernel = bilinear_filler::<E>(f)?;
    let (k, pad) = upsample_geometry(f);
    let [n, c, h, w] = input.shape();
    let oh = f * h;
    let ow = f * w;
    let mut out = Tensor::zeros([n, c, oh, ow]);

    for bn in 0..n {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let v = input.at(bn, ci, iy, ix);
                    for ky in 0..k {
                        let oy = (iy * f + ky) as isize - pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ox = (ix * f + kx) as isize - pad as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            let oi = out.idx(bn, ci, oy as usize, ox as usize);
                            out.data[oi] += v * kernel.data[ky * k + kx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_upsample`]; the kernel is fixed so gradient flows to
/// the input only.
pub fn bilinear_upsample_backward<E: Element>(
    input_shape: [usize; 4],
    f: usize,
    grad_out: &[E],
) -> Tensor<E> {
    let kernel = bilinear_filler::<E>(f).expect("factor validated in forward");
    let (k, pad) = upsample_geometry(f);
    let [n, c, h, w] = input_shape;
    let oh = f * h;
    let ow = f * w;
    let mut g = Tensor::zeros(input_shape);

    for bn in 0..n {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let mut acc = E::ZERO;
                    for ky in 0..k {
                        let oy = (iy * f + ky) as isize - pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ox = (ix * f + kx) as isize - pad as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            let oi = ((bn * c + ci) * oh + oy as usize) * ow + ox as usize;
                            acc += grad_out[oi] * kernel.data[ky * k + kx];
                        }
                    }
                    let ii = g.idx(bn, ci, iy, ix);
                    g.data[ii] = acc;
                }
            }
        }
    }
    g
}

/// Concatenates along the channel axis; all inputs must share (n, h, w).
pub fn concat_channels<E: Element>(inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    if inputs.is_empty() {
        return Err(Error::Config("concat_channels needs at least one input".into()));
    }
    let [n, _, h, w] = inputs[0].shape();
    for t in inputs.iter().skip(1) {
        let [tn, _, th, tw] = t.shape();
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::Config(format!(
                "concat_channels spatial mismatch: {:?} vs {:?} (resample before fusing)",
                inputs[0].shape(),
                t.shape()
            )));
        }
    }
    let c_total: usize = inputs.iter().map(|t| t.c()).sum();
    let mut out = Tensor::zeros([n, c_total, h, w]);
    let plane = h * w;
    for bn in 0..n {
        let mut c_off = 0;
        for t in inputs {
            let src = &t.data[bn * t.c() * plane..(bn + 1) * t.c() * plane];
            let dst_start = (bn * c_total + c_off) * plane;
            out.data[dst_start..dst_start + src.len()].copy_from_slice(src);
            c_off += t.c();
        }
    }
    Ok(out)
}

/// Adjoint of [`concat_channels`]: slices the gradient back per input.
pub fn concat_channels_backward<E: Element>(
    input_shapes: &[[usize; 4]],
    grad_out: &[E],
) -> Vec<Tensor<E>> {
    let n = input_shapes[0][0];
    let h = input_shapes[0][2];
    let w = input_shapes[0][3];
    let plane = h * w;
    let c_total: usize = input_shapes.iter().map(|s| s[1]).sum();
    let mut grads: Vec<Tensor<E>> = input_shapes.iter().map(|&s| Tensor::zeros(s)).collect();
    for bn in 0..n {
        let mut c_off = 0;
        for (gi, &shape) in input_shapes.iter().enumerate() {
            let c = shape[1];
            let src_start = (bn * c_total + c_off) * plane;
            let dst_start = bn * c * plane;
            grads[gi].data[dst_start..dst_start + c * plane]
                .copy_from_slice(&grad_out[src_start..src_start + c * plane]);
            c_off += c;
        }
    }
    grads
}

/// Per-pair softmax over channel pairs (2a, 2a+1) = (background, face) for
/// anchor slot `a`, computed with max-subtraction.
pub fn softmax_pair<E: Element>(logits: &Tensor<E>) -> Result<Tensor<E>> {
    let [n, c, h, w] = logits.shape();
    if c % 2 != 0 {
        return Err(Error::Config(format!(
            "softmax_pair needs an even channel count, got {c}"
        )));
    }
    let mut out = Tensor::zeros([n, c, h, w]);
    for bn in 0..n {
        for pair in 0..c / 2 {
            for y in 0..h {
                for x in 0..w {
                    let i0 = logits.idx(bn, 2 * pair, y, x);
                    let i1 = logits.idx(bn, 2 * pair + 1, y, x);
                    let l0 = logits.data[i0];
                    let l1 = logits.data[i1];
                    let m = l0.maximum(l1);
                    let e0 = (l0 - m).exp();
                    let e1 = (l1 - m).exp();
                    let s = e0 + e1;
                    out.data[i0] = e0 / s;
                    out.data[i1] = e1 / s;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`softmax_pair`] given the forward probabilities.
pub fn softmax_pair_backward<E: Element>(probs: &Tensor<E>, grad_out: &[E]) -> Tensor<E> {
    let [n, c, h, w] = probs.shape();
    let mut g = Tensor::zeros([n, c, h, w]);
    for bn in 0..n {
        for pair in 0..c / 2 {
            for y in 0..h {
                for x in 0..w {
                    let i0 = probs.idx(bn, 2 * pair, y, x);
                    let i1 = probs.idx(bn, 2 * pair + 1, y, x);
                    let p0 = probs.data[i0];
                    let p1 = probs.data[i1];
                    let dot = grad_out[i0] * p0 + grad_out[i1] * p1;
                    g.data[i0] = p0 * (grad_out[i0] - dot);
                    g.data[i1] = p1 * (grad_out[i1] - dot);
                }
            }
        }
    }
    g
}

/// SGD with momentum and weight decay:
/// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
pub fn sgd_step<E: Element>(
    param: &mut Tensor<E>,
    velocity: &mut [E],
    lr: E,
    momentum: E,
    weight_decay: E,
) {
    assert_eq!(velocity.len(), param.len());
    let grad = param
        .grad
        .as_ref()
        .expect("sgd_step requires populated gradients");
    for i in 0..velocity.len() {
        velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * param.data[i];
    }
    for i in 0..velocity.len() {
        param.data[i] -= lr * velocity[i];
    }
}

/// Bilinear image resize (half-pixel sampling, edge clamped). Preprocessing
/// only; not differentiable.
pub fn resize_bilinear(input: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let [n, c, h, w] = input.shape();
    if (out_h, out_w) == (h, w) {
        return input.clone();
    }
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for bn in 0..n {
        for ci in 0..c {
            for oy in 0..out_h {
                let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let wy = fy - y0 as f32;
                for ox in 0..out_w {
                    let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let wx = fx - x0 as f32;
                    let v00 = input.at(bn, ci, y0, x0);
                    let v01 = input.at(bn, ci, y0, x1);
                    let v10 = input.at(bn, ci, y1, x0);
                    let v11 = input.at(bn, ci, y1, x1);
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    let oi = out.idx(bn, ci, oy, ox);
                    out.data[oi] = top + (bot - top) * wy;
                }
            }
        }
    }
    out
}

/// Mirrors the width axis.
pub fn flip_horizontal(input: &Tensor<f32>) -> Tensor<f32> {
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for bn in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let oi = out.idx(bn, ci, y, x);
                    out.data[oi] = input.at(bn, ci, y, w - 1 - x);
                }
            }
        }
    }
    out
}

/// Zero-pads on the bottom/right to the requested size.
pub fn pad_bottom_right(input: &Tensor<f32>, new_h: usize, new_w: usize) -> Tensor<f32> {
    let [n, c, h, w] = input.shape();
    assert!(new_h >= h && new_w >= w);
    if (new_h, new_w) == (h, w) {
        return input.clone();
    }
    let mut out = Tensor::zeros([n, c, new_h, new_w]);
    for bn in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let src = input.idx(bn, ci, y, 0);
                let dst = out.idx(bn, ci, y, 0);
                out.data[dst..dst + w].copy_from_slice(&input.data[src..src + w]);
            }
        }
    }
    out
}
