//! Randomised comparison of the decomposed fusion against the per-window
//! concatenation baseline.

use rand::RngExt;

use crate::error::Result;
use crate::exec::{map_indexed, Exec};
use crate::fusion::{acm_forward, naive_concat_corr, FusionWeights};
use crate::nn::ConvKernel;
use crate::rng::{self, tag};
use crate::tensor::Tensor;

pub const MAX_CHANNELS: usize = 8;
pub const MAX_KERNEL: usize = 5;
pub const MAX_SIDE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialShape {
    pub c: usize,
    pub eta: usize,
    pub omega: usize,
    pub h: usize,
    pub w: usize,
    pub p: usize,
}

impl TrialShape {
    pub fn output_shape(&self) -> [usize; 3] {
        [self.p, self.h - self.eta + 1, self.w - self.omega + 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub index: usize,
    pub shape: TrialShape,
    pub output_shape: Vec<usize>,
    pub max_diff: f64,
}

/// Draws `C, P ∈ [1, 8]`, `η, ω ∈ [1, 5]`, `H ∈ [η, 12]`, `W ∈ [ω, 12]`.
pub fn random_shape(r: &mut rng::StreamRng) -> TrialShape {
    let c = r.random_range(1..=MAX_CHANNELS);
    let eta = r.random_range(1..=MAX_KERNEL);
    let omega = r.random_range(1..=MAX_KERNEL);
    let h = r.random_range(eta..=MAX_SIDE);
    let w = r.random_range(omega..=MAX_SIDE);
    let p = r.random_range(1..=MAX_CHANNELS);
    TrialShape { c, eta, omega, h, w, p }
}

/// One trial; everything is drawn from stream `(seed, SHAPES, index)`.
pub fn equivalence_trial(seed: u64, index: usize) -> Result<TrialResult> {
    let mut r = rng::stream(seed, tag::SHAPES, index as u64);
    let shape = random_shape(&mut r);
    let TrialShape { c, eta, omega, h, w, p } = shape;
    let mut draw = |dims: Vec<usize>| {
        let n = dims.iter().product();
        Tensor::new(dims, rng::uniform_vec(&mut r, n, 1.0))
    };
    let theta_z = ConvKernel::new(draw(vec![p, c, eta, omega])?)?;
    let theta_x = ConvKernel::new(draw(vec![p, c, eta, omega])?)?;
    let template = draw(vec![c, eta, omega])?;
    let search = draw(vec![c, h, w])?;
    let weights = FusionWeights::new(theta_z, theta_x)?;
    let acm = acm_forward(&template, &search, &weights, None, false)?;
    let naive = naive_concat_corr(&template, &search, &weights)?;
    Ok(TrialResult { index, shape, output_shape: acm.shape().to_vec(), max_diff: acm.max_abs_diff(&naive)? })
}

/// Trials `0..n`; results are identical in either mode.
pub fn equivalence_trials(seed: u64, n: usize, exec: Exec) -> Result<Vec<TrialResult>> {
    map_indexed(exec, n, |i| equivalence_trial(seed, i)).into_iter().collect()
}
