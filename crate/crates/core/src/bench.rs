//! Wall-clock comparison of the concatenation baseline, the decomposed ACM
//! forward pass and the cached template path.
//!
//! Every measurement is the median of `reps` timed calls after `warmup`
//! untimed calls, on a monotonic clock, strictly sequential.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::fusion::{acm_apply_search, acm_cache_template, acm_forward, naive_concat_corr, FusionWeights, PriorBranch};
use crate::nn::{ConvKernel, FcLayer};
use crate::rng::{self, tag, StreamRng};
use crate::tensor::Tensor;

pub const MIN_REPS: usize = 20;
pub const MIN_WARMUP: usize = 3;
pub const CSV_HEADER: &str = "C,eta,omega,H,W,P,reps,naive_ns,acm_ns,cached_ns,speedup";
pub const CONFIG_HEADER: &str = "C,eta,omega,H,W,P";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub c: usize,
    pub eta: usize,
    pub omega: usize,
    pub h: usize,
    pub w: usize,
    pub p: usize,
}

impl BenchConfig {
    pub fn positions(&self) -> usize {
        (self.h - self.eta + 1) * (self.w - self.omega + 1)
    }

    fn validate(&self) -> Result<()> {
        if [self.c, self.eta, self.omega, self.h, self.w, self.p].contains(&0) {
            return Err(Error::InvalidArgument(format!("zero dimension in {self:?}")));
        }
        if self.eta > self.h || self.omega > self.w {
            return Err(Error::KernelTooLarge { kernel: (self.eta, self.omega), input: (self.h, self.w) });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    /// hidden width of the prior FC stack; `None` runs without a prior
    pub prior_hidden: Option<usize>,
    pub tol: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { reps: MIN_REPS, warmup: MIN_WARMUP, seed: 7, prior_hidden: Some(256), tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub naive_ns: f64,
    pub acm_ns: f64,
    pub cached_ns: f64,
    pub reps: usize,
    pub speedup_naive_over_acm: f64,
}

/// Median wall time of `f` in nanoseconds.
pub fn median_ns<T>(warmup: usize, reps: usize, mut f: impl FnMut() -> T) -> f64 {
    for _ in 0..warmup {
        black_box(f());
    }
    let mut times: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            black_box(f());
            // a zero reading would break the positivity invariant on coarse clocks
            (t.elapsed().as_nanos() as f64).max(1.0)
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    }
}

fn rand_tensor(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    Tensor::from_parts(shape.to_vec(), rng::uniform_vec(r, shape.iter().product(), 1.0))
}

fn fc(r: &mut StreamRng, out: usize, inp: usize) -> Result<FcLayer> {
    FcLayer::new(rand_tensor(r, &[out, inp]), rand_tensor(r, &[out]))
}

struct Inputs {
    template: Tensor,
    search: Tensor,
    linear: FusionWeights,
    full: FusionWeights,
    bbox: Option<(f32, f32)>,
}

fn make_inputs(cfg: &BenchConfig, opts: &BenchOptions, index: u64) -> Result<Inputs> {
    let mut r = rng::stream(opts.seed, tag::BENCH, index);
    let BenchConfig { c, eta, omega, h, w, p } = *cfg;
    let linear = FusionWeights::new(
        ConvKernel::new(rand_tensor(&mut r, &[p, c, eta, omega]))?,
        ConvKernel::new(rand_tensor(&mut r, &[p, c, eta, omega]))?,
    )?;
    let template = rand_tensor(&mut r, &[c, eta, omega]);
    let search = rand_tensor(&mut r, &[c, h, w]);
    let (full, bbox) = match opts.prior_hidden {
        Some(hid) => {
            let prior = PriorBranch::new([fc(&mut r, hid, 2)?, fc(&mut r, hid, hid)?, fc(&mut r, p, hid)?])?;
            (linear.clone().with_prior(prior)?, Some((64.0, 48.0)))
        }
        None => (linear.clone(), None),
    };
    Ok(Inputs { template, search, linear, full, bbox })
}

/// Checks agreement of the three paths, then times each one.
pub fn bench_one(cfg: &BenchConfig, opts: &BenchOptions, index: u64) -> Result<BenchResult> {
    cfg.validate()?;
    if opts.reps < MIN_REPS || opts.warmup < MIN_WARMUP {
        return Err(Error::InvalidArgument(format!("need reps >= {MIN_REPS} and warmup >= {MIN_WARMUP}")));
    }
    let inp = make_inputs(cfg, opts, index)?;

    let naive = naive_concat_corr(&inp.template, &inp.search, &inp.linear)?;
    let linear = acm_forward(&inp.template, &inp.search, &inp.linear, None, false)?;
    let diff = naive.max_abs_diff(&linear)?;
    if !(diff <= opts.tol) {
        return Err(Error::Disagreement { diff, tol: opts.tol });
    }
    let cache = acm_cache_template(&inp.template, &inp.full, inp.bbox)?;
    let cached = acm_apply_search(&cache, &inp.search, &inp.full, false)?;
    let full = acm_forward(&inp.template, &inp.search, &inp.full, inp.bbox, false)?;
    let diff = cached.max_abs_diff(&full)?;
    if !(diff <= opts.tol) {
        return Err(Error::Disagreement { diff, tol: opts.tol });
    }

    let naive_ns = median_ns(opts.warmup, opts.reps, || naive_concat_corr(&inp.template, &inp.search, &inp.linear));
    let acm_ns = median_ns(opts.warmup, opts.reps, || acm_forward(&inp.template, &inp.search, &inp.full, inp.bbox, false));
    let cached_ns = median_ns(opts.warmup, opts.reps, || acm_apply_search(&cache, &inp.search, &inp.full, false));
    Ok(BenchResult { config: *cfg, naive_ns, acm_ns, cached_ns, reps: opts.reps, speedup_naive_over_acm: naive_ns / acm_ns })
}

pub fn bench_compare(configs: &[BenchConfig], opts: &BenchOptions) -> Result<Vec<BenchResult>> {
    configs.iter().enumerate().map(|(i, c)| bench_one(c, opts, i as u64)).collect()
}

pub fn results_csv(results: &[BenchResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in results {
        let c = r.config;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{:.0},{:.0},{:.0},{:.4}",
            c.c, c.eta, c.omega, c.h, c.w, c.p, r.reps, r.naive_ns, r.acm_ns, r.cached_ns, r.speedup_naive_over_acm
        )
        .expect("writing to a String");
    }
    s
}

/// Parses `C,eta,omega,H,W,P` rows (header required).
pub fn parse_configs(text: &str) -> Result<Vec<BenchConfig>> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty config file".into()))?;
    if header.replace(' ', "") != CONFIG_HEADER {
        return Err(Error::Format(format!("expected header {CONFIG_HEADER:?}, got {header:?}")));
    }
    lines
        .map(|line| {
            let v: Vec<usize> = line
                .split(',')
                .map(|f| f.trim().parse().map_err(|e| Error::Format(format!("bad field {f:?}: {e}"))))
                .collect::<Result<_>>()?;
            let [c, eta, omega, h, w, p] = v[..] else {
                return Err(Error::Format(format!("row {line:?} needs 6 fields")));
            };
            let cfg = BenchConfig { c, eta, omega, h, w, p };
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Naive-path time against output-position count over a sweep of search
/// sizes at a fixed kernel; returns `(points, slope)`.
pub fn naive_scaling(c: usize, k: usize, p: usize, grid_sides: &[usize], opts: &BenchOptions) -> Result<(Vec<(f64, f64)>, f64)> {
    let opts = BenchOptions { prior_hidden: None, ..*opts };
    let mut points = Vec::with_capacity(grid_sides.len());
    for (i, &side) in grid_sides.iter().enumerate() {
        let cfg = BenchConfig { c, eta: k, omega: k, h: side + k - 1, w: side + k - 1, p };
        cfg.validate()?;
        let inp = make_inputs(&cfg, &opts, i as u64)?;
        let ns = median_ns(opts.warmup, opts.reps, || naive_concat_corr(&inp.template, &inp.search, &inp.linear));
        points.push((cfg.positions() as f64, ns));
    }
    let slope = loglog_slope(&points);
    Ok((points, slope))
}
