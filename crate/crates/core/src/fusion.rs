//! Asymmetric convolution fusion of a template map `C×η×ω` with a larger
//! search map `C×H×W`.
//!
//! Convolving the channel-wise concatenation `[z; x_i]` of the template with
//! every template-sized search window `x_i`, using a joined kernel
//! `[θ_z θ_x]`, is the same linear map as `θ_z∗z + θ_x∗x_i`. Because every
//! window shares `θ_x`, the second term over all windows is a single valid
//! convolution `θ_x∗x`, and the first term is one `P×1×1` vector that is
//! broadcast over the grid:
//!
//! ```text
//! c = ReLU( θ_z∗z  +_b  θ_x∗x  +_b  prior(box) )
//! ```
//!
//! [`naive_concat_corr`] computes the left-hand side window by window and is
//! kept as the correctness oracle and the benchmark baseline.
//! [`acm_forward`] computes the decomposed form. The template-only terms can
//! be computed once with [`acm_cache_template`] and reused on every search
//! map with [`acm_apply_search`].

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Exec};
use crate::nn::{batchnorm_infer, conv2d_valid_with, mlp3_forward, BatchNormParams, ConvKernel, FcLayer};
use crate::tensor::{broadcast_add, relu, Tensor};

/// Side length that box width/height are divided by before the FC stack.
pub const DEFAULT_BOX_SCALE: f32 = 255.0;

/// Three-layer FC embedding of a box `(width, height)` into `P` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBranch {
    pub layers: [FcLayer; 3],
    pub box_scale: f32,
}

impl PriorBranch {
    pub fn new(layers: [FcLayer; 3]) -> Result<Self> {
        if layers[0].in_width() != 2 {
            return Err(Error::InvalidArgument(format!(
                "prior branch takes (width, height), first layer expects {} inputs",
                layers[0].in_width()
            )));
        }
        if layers[1].in_width() != layers[0].out_width() || layers[2].in_width() != layers[1].out_width() {
            return Err(Error::InvalidArgument("prior branch layer widths do not chain".into()));
        }
        Ok(PriorBranch { layers, box_scale: DEFAULT_BOX_SCALE })
    }

    pub fn out_width(&self) -> usize {
        self.layers[2].out_width()
    }

    /// Prior embedding reshaped to `P×1×1`.
    pub fn embed(&self, bbox: (f32, f32)) -> Result<Tensor> {
        let (w, h) = bbox;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::NonPositiveBox(w, h));
        }
        let v = mlp3_forward(&[w / self.box_scale, h / self.box_scale], &self.layers)?;
        let p = v.len();
        Tensor::new(vec![p, 1, 1], v)
    }
}

/// Where batch norm sits relative to the ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormOrder {
    #[default]
    BeforeRelu,
    AfterRelu,
}

/// ACM parameters: `θ_z, θ_x ∈ R^{P×C×η×ω}` plus optional prior branch and
/// inference batch norm over the `P` output channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub theta_z: ConvKernel,
    pub theta_x: ConvKernel,
    pub prior: Option<PriorBranch>,
    pub norm: Option<BatchNormParams>,
    pub norm_order: NormOrder,
}

impl FusionWeights {
    pub fn new(theta_z: ConvKernel, theta_x: ConvKernel) -> Result<Self> {
        if theta_z.dims() != theta_x.dims() {
            return Err(Error::shapes(theta_z.weights().shape(), theta_x.weights().shape()));
        }
        Ok(FusionWeights { theta_z, theta_x, prior: None, norm: None, norm_order: NormOrder::default() })
    }

    pub fn with_prior(mut self, prior: PriorBranch) -> Result<Self> {
        if prior.out_width() != self.out_channels() {
            return Err(Error::shapes(&[prior.out_width()], &[self.out_channels()]));
        }
        self.prior = Some(prior);
        Ok(self)
    }

    pub fn with_norm(mut self, norm: BatchNormParams, order: NormOrder) -> Result<Self> {
        if norm.channels() != self.out_channels() {
            return Err(Error::shapes(&[norm.channels()], &[self.out_channels()]));
        }
        self.norm = Some(norm);
        self.norm_order = order;
        Ok(self)
    }

    pub fn out_channels(&self) -> usize {
        self.theta_z.out_channels()
    }

    /// `(C, η, ω)` every template must have.
    pub fn template_dims(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.theta_z.dims();
        (c, h, w)
    }

    fn check_template(&self, template: &Tensor) -> Result<()> {
        let dims = template.dims3()?;
        if dims != self.template_dims() {
            let (c, h, w) = self.template_dims();
            return Err(Error::shapes(template.shape(), &[c, h, w]));
        }
        Ok(())
    }

    fn check_search(&self, search: &Tensor) -> Result<()> {
        let (c, h, w) = search.dims3()?;
        let (tc, th, tw) = self.template_dims();
        if c != tc {
            return Err(Error::shapes(search.shape(), &[tc, th, tw]));
        }
        if th > h || tw > w {
            return Err(Error::KernelTooLarge { kernel: (th, tw), input: (h, w) });
        }
        Ok(())
    }
}

/// Counts kernel invocations made through the fusion entry points.
#[derive(Debug, Default)]
pub struct OpCounter {
    convs: AtomicUsize,
    fc_stacks: AtomicUsize,
}

impl OpCounter {
    pub fn convs(&self) -> usize {
        self.convs.load(Ordering::Relaxed)
    }

    pub fn fc_stacks(&self) -> usize {
        self.fc_stacks.load(Ordering::Relaxed)
    }

    fn conv(c: Option<&OpCounter>) {
        if let Some(c) = c {
            c.convs.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn fc(c: Option<&OpCounter>) {
        if let Some(c) = c {
            c.fc_stacks.fetch_add(1, Ordering::Relaxed);
        }
    }
}

/// Template-side terms, computed once per template and reusable on any
/// number of search maps.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateCache {
    /// `θ_z∗z`, shape `P×1×1`
    pub z_term: Tensor,
    /// Prior embedding, shape `P×1×1`
    pub prior_term: Option<Tensor>,
}

/// Concatenation oracle: per window, stack `[z; x_i]` to `2C×η×ω` and
/// convolve with the joined `P×2C×η×ω` kernel. Linear only (no prior, norm or
/// ReLU).
pub fn naive_concat_corr(template: &Tensor, search: &Tensor, w: &FusionWeights) -> Result<Tensor> {
    naive_concat_corr_with(template, search, w, Exec::Sequential)
}

pub fn naive_concat_corr_with(template: &Tensor, search: &Tensor, w: &FusionWeights, exec: Exec) -> Result<Tensor> {
    w.check_template(template)?;
    w.check_search(search)?;
    let (p, c, kh, kw) = w.theta_z.dims();
    let (_, h, sw) = search.dims3()?;
    let (oh, ow) = (h - kh + 1, sw - kw + 1);
    let block = c * kh * kw;

    // template channels first, then window channels
    let (tz, tx) = (w.theta_z.weights().data(), w.theta_x.weights().data());
    let mut joined = Vec::with_capacity(p * 2 * block);
    for po in 0..p {
        joined.extend_from_slice(&tz[po * block..(po + 1) * block]);
        joined.extend_from_slice(&tx[po * block..(po + 1) * block]);
    }
    let joined = ConvKernel::new(Tensor::from_parts(vec![p, 2 * c, kh, kw], joined))?;

    let x = search.data();
    let windows = map_indexed(exec, oh * ow, |win| -> Result<Vec<f32>> {
        let (i, j) = (win / ow, win % ow);
        let mut stacked = Vec::with_capacity(2 * block);
        stacked.extend_from_slice(template.data());
        for ci in 0..c {
            for u in 0..kh {
                let row = (ci * h + i + u) * sw + j;
                stacked.extend_from_slice(&x[row..row + kw]);
            }
        }
        let stacked = Tensor::from_parts(vec![2 * c, kh, kw], stacked);
        Ok(conv2d_valid_with(&stacked, &joined, Exec::Sequential)?.into_data())
    });
    let mut out = vec![0f32; p * oh * ow];
    for (win, v) in windows.into_iter().enumerate() {
        for (po, val) in v?.into_iter().enumerate() {
            out[po * oh * ow + win] = val;
        }
    }
    Ok(Tensor::from_parts(vec![p, oh, ow], out))
}

fn cache_template(
    template: &Tensor,
    w: &FusionWeights,
    bbox: Option<(f32, f32)>,
    exec: Exec,
    counter: Option<&OpCounter>,
) -> Result<TemplateCache> {
    w.check_template(template)?;
    let prior_term = match (&w.prior, bbox) {
        (Some(prior), Some(b)) => {
            OpCounter::fc(counter);
            Some(prior.embed(b)?)
        }
        (Some(_), None) => return Err(Error::MissingBox),
        (None, Some(_)) => return Err(Error::InvalidArgument("box given but no prior branch is configured".into())),
        (None, None) => None,
    };
    OpCounter::conv(counter);
    let z_term = conv2d_valid_with(template, &w.theta_z, exec)?;
    Ok(TemplateCache { z_term, prior_term })
}

fn apply_search(
    cache: &TemplateCache,
    search: &Tensor,
    w: &FusionWeights,
    apply_relu: bool,
    exec: Exec,
    counter: Option<&OpCounter>,
) -> Result<Tensor> {
    w.check_search(search)?;
    let p = w.out_channels();
    if cache.z_term.shape() != [p, 1, 1] {
        return Err(Error::shapes(cache.z_term.shape(), &[p, 1, 1]));
    }
    if cache.prior_term.is_some() != w.prior.is_some() {
        return Err(Error::InvalidArgument("cache prior term does not match fusion weights".into()));
    }
    OpCounter::conv(counter);
    let x_term = conv2d_valid_with(search, &w.theta_x, exec)?;
    let mut out = broadcast_add(&cache.z_term, &x_term)?;
    if let Some(prior) = &cache.prior_term {
        out = broadcast_add(&out, prior)?;
    }
    let norm = w.norm.as_ref();
    if let (Some(n), NormOrder::BeforeRelu) = (norm, w.norm_order) {
        out = batchnorm_infer(&out, n)?;
    }
    if apply_relu {
        out = relu(&out);
    }
    if let (Some(n), NormOrder::AfterRelu) = (norm, w.norm_order) {
        out = batchnorm_infer(&out, n)?;
    }
    Ok(out)
}

pub fn acm_cache_template(template: &Tensor, w: &FusionWeights, bbox: Option<(f32, f32)>) -> Result<TemplateCache> {
    cache_template(template, w, bbox, Exec::Sequential, None)
}

pub fn acm_apply_search(cache: &TemplateCache, search: &Tensor, w: &FusionWeights, apply_relu: bool) -> Result<Tensor> {
    apply_search(cache, search, w, apply_relu, Exec::Sequential, None)
}

/// [`acm_apply_search`] that records kernel invocations in `counter`.
pub fn acm_apply_search_counted(
    cache: &TemplateCache,
    search: &Tensor,
    w: &FusionWeights,
    apply_relu: bool,
    counter: &OpCounter,
) -> Result<Tensor> {
    apply_search(cache, search, w, apply_relu, Exec::Sequential, Some(counter))
}

/// Full ACM forward pass; `bbox` is `(width, height)` and is required
/// exactly when `w.prior` is set.
pub fn acm_forward(template: &Tensor, search: &Tensor, w: &FusionWeights, bbox: Option<(f32, f32)>, apply_relu: bool) -> Result<Tensor> {
    acm_forward_with(template, search, w, bbox, apply_relu, Exec::Sequential)
}

pub fn acm_forward_with(
    template: &Tensor,
    search: &Tensor,
    w: &FusionWeights,
    bbox: Option<(f32, f32)>,
    apply_relu: bool,
    exec: Exec,
) -> Result<Tensor> {
    w.check_search(search)?;
    let cache = cache_template(template, w, bbox, exec, None)?;
    apply_search(&cache, search, w, apply_relu, exec, None)
}

pub fn acm_forward_counted(
    template: &Tensor,
    search: &Tensor,
    w: &FusionWeights,
    bbox: Option<(f32, f32)>,
    apply_relu: bool,
    counter: &OpCounter,
) -> Result<Tensor> {
    let cache = cache_template(template, w, bbox, Exec::Sequential, Some(counter))?;
    apply_search(&cache, search, w, apply_relu, Exec::Sequential, Some(counter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform_vec};

    fn rt(seed: u64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), uniform_vec(&mut stream(seed, 77, 0), n, 1.0)).unwrap()
    }

    fn weights(seed: u64, p: usize, c: usize, kh: usize, kw: usize) -> FusionWeights {
        FusionWeights::new(ConvKernel::new(rt(seed, &[p, c, kh, kw])).unwrap(), ConvKernel::new(rt(seed + 1, &[p, c, kh, kw])).unwrap())
            .unwrap()
    }

    fn prior(seed: u64, hidden: usize, p: usize) -> PriorBranch {
        let fc = |s: u64, o: usize, i: usize| FcLayer::new(rt(s, &[o, i]), rt(s + 100, &[o])).unwrap();
        PriorBranch::new([fc(seed, hidden, 2), fc(seed + 1, hidden, hidden), fc(seed + 2, p, hidden)]).unwrap()
    }

    #[test]
    fn single_window_is_joined_conv() {
        let w = weights(1, 3, 2, 3, 2);
        let z = rt(3, &[2, 3, 2]);
        let x = rt(4, &[2, 3, 2]);
        let out = naive_concat_corr(&z, &x, &w).unwrap();
        assert_eq!(out.shape(), &[3, 1, 1]);
        let mut stacked = z.data().to_vec();
        stacked.extend_from_slice(x.data());
        let mut joined = Vec::new();
        for p in 0..3 {
            joined.extend_from_slice(&w.theta_z.weights().data()[p * 12..(p + 1) * 12]);
            joined.extend_from_slice(&w.theta_x.weights().data()[p * 12..(p + 1) * 12]);
        }
        let direct = crate::nn::conv2d_valid(
            &Tensor::new(vec![4, 3, 2], stacked).unwrap(),
            &ConvKernel::new(Tensor::new(vec![3, 4, 3, 2], joined).unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(out, direct);
    }

    #[test]
    fn zero_theta_x_is_spatially_constant() {
        let mut w = weights(5, 4, 3, 2, 2);
        w.theta_x = ConvKernel::new(Tensor::zeros(vec![4, 3, 2, 2]).unwrap()).unwrap();
        let z = rt(6, &[3, 2, 2]);
        let x = rt(7, &[3, 6, 5]);
        let out = acm_forward(&z, &x, &w, None, true).unwrap();
        let zt = relu(&crate::nn::conv2d_valid(&z, &w.theta_z).unwrap());
        let plane = 5 * 4;
        for p in 0..4 {
            assert!(out.data()[p * plane..(p + 1) * plane].iter().all(|&v| v == zt.data()[p]));
        }
    }

    #[test]
    fn prior_shifts_each_channel_uniformly() {
        let base = weights(8, 3, 2, 2, 3);
        let with = base.clone().with_prior(prior(10, 5, 3)).unwrap();
        let z = rt(11, &[2, 2, 3]);
        let x = rt(12, &[2, 5, 6]);
        let a = acm_forward(&z, &x, &with, Some((40.0, 60.0)), false).unwrap();
        let b = acm_forward(&z, &x, &base, None, false).unwrap();
        let pr = with.prior.as_ref().unwrap().embed((40.0, 60.0)).unwrap();
        let plane = 4 * 4;
        for p in 0..3 {
            for k in 0..plane {
                let d = a.data()[p * plane + k] - b.data()[p * plane + k];
                assert!((d - pr.data()[p]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn box_errors() {
        let w = weights(13, 2, 1, 1, 1).with_prior(prior(14, 3, 2)).unwrap();
        let z = rt(15, &[1, 1, 1]);
        let x = rt(16, &[1, 3, 3]);
        assert!(matches!(acm_forward(&z, &x, &w, None, true), Err(Error::MissingBox)));
        assert!(matches!(acm_forward(&z, &x, &w, Some((0.0, 3.0)), true), Err(Error::NonPositiveBox(..))));
        let plain = weights(13, 2, 1, 1, 1);
        assert!(acm_forward(&z, &x, &plain, Some((1.0, 1.0)), true).is_err());
    }

    #[test]
    fn shape_errors() {
        let w = weights(17, 2, 3, 3, 3);
        let z = rt(18, &[3, 3, 3]);
        assert!(matches!(acm_forward(&z, &rt(19, &[2, 5, 5]), &w, None, true), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(acm_forward(&z, &rt(19, &[3, 2, 5]), &w, None, true), Err(Error::KernelTooLarge { .. })));
        assert!(matches!(acm_forward(&rt(20, &[3, 2, 2]), &rt(19, &[3, 5, 5]), &w, None, true), Err(Error::ShapeMismatch { .. })));
        let other = ConvKernel::new(rt(1, &[2, 3, 2, 3])).unwrap();
        assert!(FusionWeights::new(w.theta_z.clone(), other).is_err());
    }

    #[test]
    fn cached_path_is_bitwise_identical_and_uses_one_conv() {
        let w = weights(21, 4, 2, 3, 3)
            .with_prior(prior(22, 6, 4))
            .unwrap()
            .with_norm(BatchNormParams::identity(4).unwrap(), NormOrder::BeforeRelu)
            .unwrap();
        let z = rt(23, &[2, 3, 3]);
        let cache = acm_cache_template(&z, &w, Some((30.0, 20.0))).unwrap();
        for k in 0..10 {
            let x = rt(100 + k, &[2, 7 + k as usize % 3, 8]);
            let counter = OpCounter::default();
            let cached = acm_apply_search_counted(&cache, &x, &w, true, &counter).unwrap();
            assert_eq!(counter.convs(), 1);
            assert_eq!(counter.fc_stacks(), 0);
            let full = acm_forward(&z, &x, &w, Some((30.0, 20.0)), true).unwrap();
            assert_eq!(cached.bits(), full.bits());
        }
        let counter = OpCounter::default();
        acm_forward_counted(&z, &rt(1, &[2, 5, 5]), &w, Some((30.0, 20.0)), true, &counter).unwrap();
        assert_eq!((counter.convs(), counter.fc_stacks()), (2, 1));
    }

    #[test]
    fn zero_template_gives_zero_z_term() {
        let w = weights(24, 3, 2, 2, 2);
        let cache = acm_cache_template(&Tensor::zeros(vec![2, 2, 2]).unwrap(), &w, None).unwrap();
        assert!(cache.z_term.data().iter().all(|&v| v == 0.0));
        let mut w0 = w.clone();
        w0.theta_x = ConvKernel::new(Tensor::zeros(vec![3, 2, 2, 2]).unwrap()).unwrap();
        let out = acm_apply_search(&cache, &rt(25, &[2, 4, 4]), &w0, false).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn norm_order_flag() {
        let mut bn = BatchNormParams::identity(2).unwrap();
        bn.beta = Tensor::from_vec(vec![-5.0, -5.0]).unwrap();
        let w = weights(26, 2, 1, 1, 1);
        let z = rt(27, &[1, 1, 1]);
        let x = rt(28, &[1, 3, 3]);
        let before = acm_forward(&z, &x, &w.clone().with_norm(bn.clone(), NormOrder::BeforeRelu).unwrap(), None, true).unwrap();
        assert!(before.data().iter().all(|&v| v == 0.0));
        let after = acm_forward(&z, &x, &w.with_norm(bn, NormOrder::AfterRelu).unwrap(), None, true).unwrap();
        assert!(after.data().iter().all(|&v| v < -4.0));
    }

    #[test]
    fn parallel_paths_match() {
        let w = weights(29, 3, 2, 2, 3);
        let z = rt(30, &[2, 2, 3]);
        let x = rt(31, &[2, 7, 9]);
        let a = naive_concat_corr_with(&z, &x, &w, Exec::Sequential).unwrap();
        let b = naive_concat_corr_with(&z, &x, &w, Exec::Parallel).unwrap();
        assert_eq!(a.bits(), b.bits());
        let a = acm_forward_with(&z, &x, &w, None, true, Exec::Sequential).unwrap();
        let b = acm_forward_with(&z, &x, &w, None, true, Exec::Parallel).unwrap();
        assert_eq!(a.bits(), b.bits());
    }
}
