//! Neural building blocks: valid 2-D convolution, depth-wise and plain
//! cross-correlation, fully connected layers, inference batch norm and 1×1
//! heads.
//!
//! All convolutions use cross-correlation orientation (the kernel is not
//! flipped), stride 1 and no padding. Dot products accumulate in `f64` and
//! round once to `f32` per output element.

use crate::error::{Error, Result};
use crate::exec::{for_each_chunk, Exec};
use crate::tensor::Tensor;

/// Bias-free convolution kernel `P×C×kh×kw`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel(Tensor);

impl ConvKernel {
    pub fn new(weights: Tensor) -> Result<Self> {
        weights.dims4()?;
        Ok(ConvKernel(weights))
    }

    pub fn weights(&self) -> &Tensor {
        &self.0
    }

    pub fn into_inner(self) -> Tensor {
        self.0
    }

    /// `(out_channels, in_channels, kh, kw)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4().expect("rank checked at construction")
    }

    pub fn out_channels(&self) -> usize {
        self.dims().0
    }
}

/// Fully connected layer `y = W·x + b` with `W: out×in`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    weights: Tensor,
    bias: Tensor,
}

impl FcLayer {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let out = match *weights.shape() {
            [out, _] => out,
            _ => return Err(Error::Rank { expected: 2, shape: weights.shape().to_vec() }),
        };
        if bias.shape() != [out] {
            return Err(Error::shapes(weights.shape(), bias.shape()));
        }
        Ok(FcLayer { weights, bias })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn in_width(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_width(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        linear(x, &self.weights, &self.bias)
    }
}

/// `W·x + b`, `f64` accumulation.
pub(crate) fn linear(x: &[f32], w: &Tensor, b: &Tensor) -> Result<Vec<f32>> {
    let (out, inp) = match *w.shape() {
        [o, i] => (o, i),
        _ => return Err(Error::Rank { expected: 2, shape: w.shape().to_vec() }),
    };
    if x.len() != inp || b.len() != out {
        return Err(Error::shapes(w.shape(), &[x.len()]));
    }
    let wd = w.data();
    Ok((0..out)
        .map(|o| {
            let row = &wd[o * inp..(o + 1) * inp];
            let acc: f64 = row.iter().zip(x).map(|(&a, &v)| a as f64 * v as f64).sum();
            (acc + b.data()[o] as f64) as f32
        })
        .collect())
}

/// Inference-mode batch norm parameters over `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
}

pub const DEFAULT_BN_EPS: f32 = 1e-5;

impl BatchNormParams {
    pub fn new(gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor, eps: f32) -> Result<Self> {
        let c = gamma.len();
        for t in [&gamma, &beta, &running_mean, &running_var] {
            if t.shape() != [c] {
                return Err(Error::shapes(&[c], t.shape()));
            }
        }
        if running_var.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidArgument("running variance must be non-negative".into()));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument("batch norm eps must be positive".into()));
        }
        Ok(BatchNormParams { gamma, beta, running_mean, running_var, eps })
    }

    /// gamma = 1, beta = 0, mean = 0, var = 1.
    pub fn identity(channels: usize) -> Result<Self> {
        Self::new(
            Tensor::full(vec![channels], 1.0)?,
            Tensor::zeros(vec![channels])?,
            Tensor::zeros(vec![channels])?,
            Tensor::full(vec![channels], 1.0)?,
            DEFAULT_BN_EPS,
        )
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` with `out = scale·x + shift`.
    pub(crate) fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let inv = 1.0 / (self.running_var.data()[c] as f64 + self.eps as f64).sqrt();
                let g = self.gamma.data()[c] as f64;
                (g * inv, self.beta.data()[c] as f64 - g * inv * self.running_mean.data()[c] as f64)
            })
            .collect()
    }
}

fn output_dims(h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
    if kh > h || kw > w {
        return Err(Error::KernelTooLarge { kernel: (kh, kw), input: (h, w) });
    }
    Ok((h - kh + 1, w - kw + 1))
}

/// Valid cross-correlation of one input channel plane with one kernel plane,
/// accumulated into `acc` (`oh×ow`).
#[inline]
#[allow(clippy::too_many_arguments)]
fn correlate_plane(acc: &mut [f64], input: &[f32], w: usize, kernel: &[f32], kh: usize, kw: usize, oh: usize, ow: usize) {
    for i in 0..oh {
        let out_row = &mut acc[i * ow..(i + 1) * ow];
        for u in 0..kh {
            let in_row = &input[(i + u) * w..(i + u) * w + w];
            let k_row = &kernel[u * kw..(u + 1) * kw];
            for (j, o) in out_row.iter_mut().enumerate() {
                let win = &in_row[j..j + kw];
                let mut s = 0f64;
                for (&k, &x) in k_row.iter().zip(win) {
                    s += k as f64 * x as f64;
                }
                *o += s;
            }
        }
    }
}

pub fn conv2d_valid(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    conv2d_valid_with(input, kernel, Exec::Sequential)
}

/// `out[p][i][j] = Σ_{c,u,v} k[p][c][u][v] · x[c][i+u][j+v]`.
pub fn conv2d_valid_with(input: &Tensor, kernel: &ConvKernel, exec: Exec) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let (p, kc, kh, kw) = kernel.dims();
    if kc != c {
        return Err(Error::shapes(kernel.weights().shape(), input.shape()));
    }
    let (oh, ow) = output_dims(h, w, kh, kw)?;
    let plane = oh * ow;
    let mut out = vec![0f32; p * plane];
    let x = input.data();
    let k = kernel.weights().data();
    for_each_chunk(exec, &mut out, plane, |po, dst| {
        let mut acc = vec![0f64; plane];
        for ci in 0..c {
            let kp = &k[(po * c + ci) * kh * kw..(po * c + ci + 1) * kh * kw];
            correlate_plane(&mut acc, &x[ci * h * w..(ci + 1) * h * w], w, kp, kh, kw, oh, ow);
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = a as f32;
        }
    });
    Ok(Tensor::from_parts(vec![p, oh, ow], out))
}

fn check_corr(search: &Tensor, template: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (c, h, w) = search.dims3()?;
    let (tc, th, tw) = template.dims3()?;
    if tc != c {
        return Err(Error::shapes(template.shape(), search.shape()));
    }
    let (oh, ow) = output_dims(h, w, th, tw)?;
    Ok((c, h, w, th, tw, oh, ow))
}

pub fn depthwise_corr(search: &Tensor, template: &Tensor) -> Result<Tensor> {
    depthwise_corr_with(search, template, Exec::Sequential)
}

/// DW-XCorr: each template channel correlates with its own search channel.
pub fn depthwise_corr_with(search: &Tensor, template: &Tensor, exec: Exec) -> Result<Tensor> {
    let (c, h, w, th, tw, oh, ow) = check_corr(search, template)?;
    let plane = oh * ow;
    let mut out = vec![0f32; c * plane];
    let (x, t) = (search.data(), template.data());
    for_each_chunk(exec, &mut out, plane, |ci, dst| {
        let mut acc = vec![0f64; plane];
        correlate_plane(&mut acc, &x[ci * h * w..(ci + 1) * h * w], w, &t[ci * th * tw..(ci + 1) * th * tw], th, tw, oh, ow);
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = a as f32;
        }
    });
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

/// XCorr: single-channel similarity map, the template used as one
/// `1×C×η×ω` kernel.
pub fn xcorr(search: &Tensor, template: &Tensor) -> Result<Tensor> {
    check_corr(search, template)?;
    let mut shape = vec![1];
    shape.extend_from_slice(template.shape());
    conv2d_valid(search, &ConvKernel::new(template.reshape(shape)?)?)
}

/// Three FC layers with ReLU after the first two.
pub fn mlp3_forward(input: &[f32], layers: &[FcLayer; 3]) -> Result<Vec<f32>> {
    let h1: Vec<f32> = layers[0].forward(input)?.into_iter().map(|v| v.max(0.0)).collect();
    let h2: Vec<f32> = layers[1].forward(&h1)?.into_iter().map(|v| v.max(0.0)).collect();
    layers[2].forward(&h2)
}

pub fn batchnorm_infer(t: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if p.channels() != c {
        return Err(Error::shapes(&[p.channels()], t.shape()));
    }
    let plane = h * w;
    let affine = p.affine();
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let (s, b) = affine[i / plane];
            (s * x as f64 + b) as f32
        })
        .collect();
    Ok(Tensor::from_parts(t.shape().to_vec(), data))
}

/// Per-position linear map across channels with a `K×P×1×1` kernel.
pub fn head1x1(c: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let (_, _, kh, kw) = kernel.dims();
    if (kh, kw) != (1, 1) {
        return Err(Error::shapes(kernel.weights().shape(), &[kernel.out_channels(), c.shape()[0], 1, 1]));
    }
    conv2d_valid(c, kernel)
}
