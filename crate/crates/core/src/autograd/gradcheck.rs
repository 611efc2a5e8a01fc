//! Central-difference gradient checks.

use crate::error::{Error, Result};
use crate::fusion::{FusionWeights, NormOrder, PriorBranch};
use crate::nn::{BatchNormParams, ConvKernel, FcLayer};
use crate::rng::{self, tag, StreamRng};
use crate::tensor::Tensor;

use super::blocks::{acm_block, AcmParams};
use super::graph::{Graph, ParamSet, Var};

/// Central differences `(f(p + eps·e_i) − f(p − eps·e_i)) / (2·eps)`.
///
/// Perturbed values are stored as `f32`; the divisor is the actual
/// difference of the two stored values so rounding of `p ± eps` does not
/// bias the quotient.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, p: &Tensor, eps: f32) -> Tensor {
    let mut data = p.data().to_vec();
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let orig = data[i];
        let (hi, lo) = (orig + eps, orig - eps);
        data[i] = hi;
        let fh = f(&Tensor::from_parts(p.shape().to_vec(), data.clone()));
        data[i] = lo;
        let fl = f(&Tensor::from_parts(p.shape().to_vec(), data.clone()));
        data[i] = orig;
        out.push(((fh - fl) / (hi as f64 - lo as f64)) as f32);
    }
    Tensor::from_parts(p.shape().to_vec(), out)
}

/// `|a − n| / max(|a|, |n|, 1e-2)`: relative, with an absolute floor for
/// near-zero gradients.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// coordinates whose perturbation flips a ReLU
    pub skipped: usize,
    pub passed: bool,
}

/// A loss built on a fresh tape from the current parameter values.
pub type LossFn<'a> = dyn Fn(&mut Graph, &ParamSet) -> Result<Var> + 'a;

/// Compares backward-pass gradients of every parameter in `set` against
/// central differences of the `f64` loss.
pub fn check_gradients(name: &str, set: &ParamSet, build: &LossFn<'_>, eps: f32, tol: f64, inject_fault: bool) -> Result<GradCheckReport> {
    let eval = |s: &ParamSet| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let loss = build(&mut g, s)?;
        Ok((g.scalar_f64(loss), g.relu_pattern()))
    };
    let mut analytic = set.clone();
    {
        let mut g = Graph::new();
        let loss = build(&mut g, &analytic)?;
        g.backward(loss, &mut analytic)?;
    }
    let (_, base_pattern) = eval(set)?;

    let mut work = set.clone();
    let (mut max_err, mut checked, mut skipped) = (0f64, 0usize, 0usize);
    for id in set.ids() {
        let value = set.value(id).clone();
        for i in 0..value.len() {
            let mut a = analytic.get(id).grad.data()[i] as f64;
            if inject_fault && i == 0 {
                a = a * 1.5 + 0.1;
            }
            let orig = value.data()[i];
            let (hi, lo) = (orig + eps, orig - eps);
            let mut eval_at = |v: f32| -> Result<(f64, Vec<bool>)> {
                let mut d = value.data().to_vec();
                d[i] = v;
                work.set_value(id, Tensor::new(value.shape().to_vec(), d)?)?;
                let r = eval(&work);
                work.set_value(id, value.clone())?;
                r
            };
            let (fh, ph) = eval_at(hi)?;
            let (fl, pl) = eval_at(lo)?;
            if ph != base_pattern || pl != base_pattern {
                skipped += 1;
                continue;
            }
            let numeric = (fh - fl) / (hi as f64 - lo as f64);
            max_err = max_err.max(relative_error(a, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport { name: name.to_string(), max_rel_err: max_err, checked, skipped, passed: checked > 0 && max_err < tol })
}

fn rand_tensor(rng: &mut StreamRng, shape: &[usize], bound: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), rng::uniform_vec(rng, n, bound))
}

/// Values bounded away from zero, for ReLU inputs.
fn away_from_zero(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    rand_tensor(rng, shape, 1.0).map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
}

fn fc(rng: &mut StreamRng, out: usize, inp: usize) -> FcLayer {
    FcLayer::new(rand_tensor(rng, &[out, inp], 1.0), rand_tensor(rng, &[out], 0.5)).expect("shapes consistent")
}

/// Every differentiable op plus the composed ACM block, each under a
/// randomized small configuration derived from `seed`.
pub fn gradcheck_suite(seed: u64, eps: f32, tol: f64, inject_fault: bool) -> Result<Vec<GradCheckReport>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let mut reports = Vec::new();
    let mut case = 0u64;
    let mut next_rng = || {
        case += 1;
        rng::stream(seed, tag::GRADCHECK, case)
    };
    let mut run = |name: &str, set: ParamSet, build: &LossFn<'_>| -> Result<()> {
        reports.push(check_gradients(name, &set, build, eps, tol, inject_fault)?);
        Ok(())
    };

    // Weighted-sum readout so every output element carries a distinct weight.
    fn readout(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
        g.dot_const(y, w.clone())
    }

    {
        let mut r = next_rng();
        let mut s = ParamSet::new();
        let x = s.add("x", rand_tensor(&mut r, &[2, 5, 5], 1.0));
        let k = s.add("k", rand_tensor(&mut r, &[3, 2, 3, 3], 1.0));
        let w = rand_tensor(&mut r, &[3, 3, 3], 1.0);
        run("conv2d_valid", s, &|g, s| {
            let (xv, kv) = (g.param(s, x), g.param(s, k));
            let y = g.conv2d(xv, kv)?;
            readout(g, y, &w)
        })?;
    }
    {
        let mut r = next_rng();
        let mut s = ParamSet::new();
        let x = s.add("search", rand_tensor(&mut r, &[3, 6, 5], 1.0));
        let t = s.add("template", rand_tensor(&mut r, &[3, 3, 2], 1.0));
        let w = rand_tensor(&mut r, &[3, 4, 4], 1.0);
        run("depthwise_corr", s, &|g, s| {
            let (xv, tv) = (g.param(s, x), g.param(s, t));
            let y = g.depthwise_corr(xv, tv)?;
            readout(g, y, &w)
        })?;
    }
    {
        let mut r = next_rng();
        let mut s = ParamSet::new();
        let x = s.add("search", rand_tensor(&mut r, &[2, 5, 6], 1.0));
        let t = s.add("template", rand_tensor(&mut r, &[2, 2, 3], 1.0));
        let w = rand_tensor(&mut r, &[1, 4, 4], 1.0);
        run("xcorr", s, &|g, s| {
            let (xv, tv) = (g.param(s, x), g.param(s, t));
            let y = g.xcorr(xv, tv)?;
            readout(g, y, &w)
        })?;
    }
    {
        let mut r = next_rng();
        let mut s = ParamSet::new();
        let a = s.add("a", rand_tensor(&mut r, &[3, 1, 1], 1.0));
        let b = s.add("b", rand_tensor(&mut r, &[3, 2, 4], 1.0));
        let w = rand_tensor(&mut r, &[3, 2, 4], 1.0);
        run("broadcast_add", s, &|g, s| {
            let (av, bv) = (g.param(s, a), g.param(s, b));
            let y = g.add(av, bv)?;
            readout(g, y, &w)
        })?;
    }
    {
        let mut r = next_rng();
        let mut s = ParamSet::new();
        let x = s.add("x", away_from_zero(&mut r, &[4, 3]));
        let w = rand_tensor(&mut r, &[4, 3], 1.0);
        run("relu", s, &|g, s| {
            let xv = g.param(s, x);
            let y = g.relu(xv);
            readout(g, y, &w)
        })?;
    }
    {
        let mut r = next_rng();
        let mut s = ParamSet::new();
        let x = s.add("x", rand_tensor(&mut r, &[2], 1.0));
        let layers = [(5, 2), (4, 5), (3, 4)].map(|(o, i)| {
            let l = fc(&mut r, o, i);
            (s.add("w", l.weights().clone()), s.add("b", l.bias().clone()))
        });
        let w = rand_tensor(&mut r, &[3], 1.0);
        run("mlp3", s, &|g, s| {
            let xv = g.param(s, x);
            let vars = layers.map(|(wi, bi)| (g.param(s, wi), g.param(s, bi)));
            let y = g.mlp3(xv, vars)?;
            readout(g, y, &w)
        })?;
    }
    {
        let mut r = next_rng();
        let mut s = ParamSet::new();
        let x = s.add("x", rand_tensor(&mut r, &[3, 2, 3], 1.0));
        let stats = BatchNormParams::new(
            rand_tensor(&mut r, &[3], 1.0),
            rand_tensor(&mut r, &[3], 1.0),
            rand_tensor(&mut r, &[3], 0.5),
            rand_tensor(&mut r, &[3], 0.5).map(|v| v.abs() + 0.5),
            crate::nn::DEFAULT_BN_EPS,
        )?;
        let gamma = s.add("gamma", stats.gamma.clone());
        let beta = s.add("beta", stats.beta.clone());
        let w = rand_tensor(&mut r, &[3, 2, 3], 1.0);
        run("batchnorm_infer", s, &|g, s| {
            let (xv, gv, bv) = (g.param(s, x), g.param(s, gamma), g.param(s, beta));
            let y = g.batchnorm(xv, gv, bv, &stats)?;
            readout(g, y, &w)
        })?;
    }
    {
        let mut r = next_rng();
        let mut s = ParamSet::new();
        let x = s.add("x", rand_tensor(&mut r, &[4, 3, 3], 1.0));
        let k = s.add("k", rand_tensor(&mut r, &[2, 4, 1, 1], 1.0));
        let w = rand_tensor(&mut r, &[2, 3, 3], 1.0);
        run("head1x1", s, &|g, s| {
            let (xv, kv) = (g.param(s, x), g.param(s, k));
            let y = g.head1x1(xv, kv)?;
            readout(g, y, &w)
        })?;
    }
    {
        let mut r = next_rng();
        let mut s = ParamSet::new();
        let logits = s.add("logits", rand_tensor(&mut r, &[5], 2.0));
        run("softmax_xent", s, &|g, s| {
            let l = g.param(s, logits);
            g.softmax_xent(l, 3)
        })?;
    }
    {
        let mut r = next_rng();
        let (c, kh, kw, h, w, p, hidden) = (2, 2, 3, 5, 6, 4, 6);
        let fw = FusionWeights::new(
            ConvKernel::new(rand_tensor(&mut r, &[p, c, kh, kw], 0.6))?,
            ConvKernel::new(rand_tensor(&mut r, &[p, c, kh, kw], 0.6))?,
        )?
        .with_prior(PriorBranch::new([fc(&mut r, hidden, 2), fc(&mut r, hidden, hidden), fc(&mut r, p, hidden)])?)?
        .with_norm(
            BatchNormParams::new(
                rand_tensor(&mut r, &[p], 1.0).map(|v| v + 1.5),
                rand_tensor(&mut r, &[p], 0.5),
                rand_tensor(&mut r, &[p], 0.2),
                rand_tensor(&mut r, &[p], 0.5).map(|v| v.abs() + 0.5),
                crate::nn::DEFAULT_BN_EPS,
            )?,
            NormOrder::BeforeRelu,
        )?;
        let template = rand_tensor(&mut r, &[c, kh, kw], 1.0);
        let search = rand_tensor(&mut r, &[c, h, w], 1.0);
        let mut s = ParamSet::new();
        let acm = AcmParams::register(&mut s, "acm", &fw);
        run("acm_forward", s, &|g, s| {
            let (z, x) = (g.input(template.clone()), g.input(search.clone()));
            let fused = acm_block(g, s, &acm, z, x, Some((90.0, 140.0)), true)?;
            let pooled = g.mean_spatial(fused)?;
            g.softmax_xent(pooled, 1)
        })?;
    }
    Ok(reports)
}
