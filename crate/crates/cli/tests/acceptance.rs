//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.
//!
//! Trains the toy model twice and times the C=64, 29x29 fusion, so expect a
//! minute or two.

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use acm_core::analysis::{channel_diversity, discriminability, heatmap_pgm, ExcludeBox, MinMaxScope};
use acm_core::autograd::gradcheck_suite;
use acm_core::bench::{bench_one, naive_scaling, BenchConfig, BenchOptions};
use acm_core::eqcheck::random_shape;
use acm_core::fusion::{acm_apply_search, acm_cache_template, acm_forward, naive_concat_corr, FusionWeights, PriorBranch};
use acm_core::nn::{depthwise_corr, ConvKernel, FcLayer};
use acm_core::rng::{self, tag};
use acm_core::toy::{index_free_accuracy_bound, locality_rate, shuffled_index_accuracy, toy_train, TrainConfig};
use acm_core::{tsr, Tensor};

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: String) -> Verdict {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn acm_bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_acm")).args(args).output().expect("spawn acm")
}

fn rand_tensor(r: &mut rng::StreamRng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), rng::uniform_vec(r, shape.iter().product(), 1.0)).unwrap()
}

fn equivalence() -> Verdict {
    let t = Instant::now();
    let out = acm_bin(&["eqcheck", "--trials", "100", "--seed", "7"]);
    let secs = t.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout);
    let worst =
        text.lines().find_map(|l| l.strip_prefix("max_abs_diff = ")).and_then(|v| v.parse::<f64>().ok()).ok_or("no max_abs_diff line")?;
    ensure(
        out.status.code() == Some(0) && worst <= 1e-4 && secs < 10.0,
        format!("100 trials, max |diff| {worst:.3e} <= 1e-4, {secs:.2}s < 10s"),
    )
}

fn shape_law() -> Verdict {
    for i in 0..50u64 {
        let mut r = rng::stream(2, tag::SHAPES, i);
        let s = random_shape(&mut r);
        let kernel = |r: &mut rng::StreamRng| ConvKernel::new(rand_tensor(r, &[s.p, s.c, s.eta, s.omega])).unwrap();
        let (tz, tx) = (kernel(&mut r), kernel(&mut r));
        let fc = |r: &mut rng::StreamRng, o: usize, n: usize| FcLayer::new(rand_tensor(r, &[o, n]), rand_tensor(r, &[o])).unwrap();
        let prior = PriorBranch::new([fc(&mut r, 4, 2), fc(&mut r, 4, 4), fc(&mut r, s.p, 4)]).unwrap();
        let plain = FusionWeights::new(tz, tx).unwrap();
        let with_prior = plain.clone().with_prior(prior).unwrap();
        let z = rand_tensor(&mut r, &[s.c, s.eta, s.omega]);
        let x = rand_tensor(&mut r, &[s.c, s.h, s.w]);
        let (oh, ow) = (s.h - s.eta + 1, s.w - s.omega + 1);
        let cache = acm_cache_template(&z, &with_prior, Some((30.0, 40.0))).unwrap();
        let outputs = [
            (s.p, acm_forward(&z, &x, &plain, None, false).unwrap()),
            (s.p, acm_forward(&z, &x, &plain, None, true).unwrap()),
            (s.p, acm_forward(&z, &x, &with_prior, Some((30.0, 40.0)), true).unwrap()),
            (s.p, acm_apply_search(&cache, &x, &with_prior, true).unwrap()),
            (s.p, naive_concat_corr(&z, &x, &plain).unwrap()),
            (s.c, depthwise_corr(&x, &z).unwrap()),
        ];
        for (ch, t) in outputs {
            if t.shape() != [ch, oh, ow] {
                return Err(format!("config {i} {s:?}: got {:?}, want {:?}", t.shape(), [ch, oh, ow]));
            }
        }
    }
    Ok("50 configs x 6 fusion outputs have shape channels x (H-eta+1) x (W-omega+1)".into())
}

fn gradients() -> Verdict {
    let t = Instant::now();
    let reports = gradcheck_suite(7, 1e-2, 1e-2, false).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    ensure(
        failed.is_empty() && secs < 30.0,
        format!("{} cases, max rel err {worst:.2e} < 1e-2, {secs:.2}s < 30s, failed {failed:?}", reports.len()),
    )
}

/// Sampling slack on a 1000-sample test set: two binomial standard deviations
/// at p = 0.5.
const ABLATION_SLACK: f64 = 0.03;

fn toy_and_locality() -> (Verdict, Verdict) {
    let t = Instant::now();
    let cfg = TrainConfig::default();
    let with_index = match toy_train(&cfg) {
        Ok(o) => o,
        Err(e) => return (Err(e.to_string()), Err("training failed".into())),
    };
    let ablated = match toy_train(&TrainConfig { ablate_index: true, ..cfg }) {
        Ok(o) => o,
        Err(e) => return (Err(e.to_string()), Err("training failed".into())),
    };
    let secs = t.elapsed().as_secs_f64();
    let bound = index_free_accuracy_bound(cfg.classes).unwrap();
    let shuffled = shuffled_index_accuracy(&with_index.model, &with_index.test_set, cfg.seed).unwrap();
    let (acc, abl) = (with_index.test_accuracy, ablated.test_accuracy);
    let toy = ensure(
        acc >= 0.95 && abl <= bound + ABLATION_SLACK && acc - shuffled >= 0.4 && secs < 300.0,
        format!(
            "K={} {} epochs: accuracy {acc:.3} >= 0.95, ablated {abl:.3} <= index-free bound {bound:.3} + {ABLATION_SLACK}, \
             shuffled-index {shuffled:.3} (gap {:.3} >= 0.4), {secs:.0}s < 300s",
            cfg.classes,
            cfg.epochs,
            acc - shuffled
        ),
    );
    let loc = locality_rate(&with_index.model, &with_index.test_set).unwrap();
    (toy, ensure(loc >= 0.80, format!("queried quadrant dominant in {loc:.3} of test samples >= 0.80")))
}

fn e<T>(r: acm_core::Result<T>) -> Result<T, String> {
    r.map_err(|err| err.to_string())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-6
}

fn analysis_protocol() -> Verdict {
    #[rustfmt::skip]
    let small = Tensor::new(vec![2, 3, 3], vec![
        1.0, 0.0, 0.0,  0.0, 2.0, 0.0,  0.0, 0.0, 3.0,
        0.0, 1.0, 0.0,  1.0, 0.0, 1.0,  0.0, 1.0, 4.0,
    ]).unwrap();
    let mut d = vec![0.125f32; 8 * 25];
    for ch in 0..8 {
        d[ch * 25 + 12] = (ch + 1) as f32;
        d[ch * 25 + 4] = 2.0 * (8 - ch) as f32;
    }
    let large = Tensor::new(vec![8, 5, 5], d).unwrap();
    let sb = ExcludeBox { r0: 0, c0: 0, r1: 1, c1: 1 };
    let lb = ExcludeBox { r0: 1, c0: 1, r1: 3, c1: 3 };
    let s_joint = e(discriminability(&small, (1, 1), sb, MinMaxScope::Joint))?;
    let s_chan = e(discriminability(&small, (1, 1), sb, MinMaxScope::PerChannel))?;
    let l_joint = e(discriminability(&large, (2, 2), lb, MinMaxScope::Joint))?;
    let checks = [
        s_joint.distractor_pos == (2, 2) && l_joint.distractor_pos == (0, 4),
        close(s_joint.cosine.unwrap_or(f64::NAN), 0.6),
        close(s_joint.euclidean_norm01, 1.0625f64.sqrt()),
        close(s_chan.euclidean_norm01, (10.0f64 / 9.0).sqrt()),
        close(e(channel_diversity(&small))?.mean, 0.875),
        close(l_joint.cosine.unwrap_or(f64::NAN), 10.0 / 17.0),
        close(l_joint.euclidean_norm01, 540f64.sqrt() / 15.875),
        close(e(channel_diversity(&large))?.mean, 81.0 / 128.0),
    ];
    if let Some(i) = checks.iter().position(|ok| !ok) {
        return Err(format!("hand-worked oracle check {i} failed"));
    }
    for alpha in [0.25f32, 7.0] {
        let s = large.scale(alpha);
        let r = e(discriminability(&s, (2, 2), lb, MinMaxScope::Joint))?;
        let ok = close(r.cosine.unwrap_or(f64::NAN), l_joint.cosine.unwrap())
            && close(r.euclidean_norm01, l_joint.euclidean_norm01)
            && close(e(channel_diversity(&s))?.mean, 81.0 / 128.0);
        if !ok {
            return Err(format!("not invariant under scale {alpha}"));
        }
    }
    for i in 0..1000u64 {
        let mut r = rng::stream(23, tag::DATA, i);
        let m = Tensor::new(vec![4, 5, 5], rng::uniform_vec(&mut r, 100, 1.0).into_iter().map(f32::abs).collect()).unwrap();
        let mean = e(channel_diversity(&m))?.mean;
        if !(mean > 0.0 && mean <= 1.0) {
            return Err(format!("random map {i}: diversity mean {mean}"));
        }
    }
    Ok("2x3x3 and 8x5x5 oracles to 1e-6, scale invariance, 1000 random maps in (0,1]".into())
}

fn performance() -> Verdict {
    let opts = BenchOptions { prior_hidden: None, ..Default::default() };
    let large = BenchConfig { c: 64, eta: 5, omega: 5, h: 29, w: 29, p: 64 };
    let big = e(bench_one(&large, &opts, 0))?;
    let sides = [4, 8, 16, 32];
    let (_, slope) = e(naive_scaling(16, 3, 16, &sides, &opts))?;
    let small = BenchConfig { c: 64, eta: 5, omega: 5, h: 6, w: 6, p: 64 };
    let cached = e(bench_one(&small, &BenchOptions { prior_hidden: Some(256), reps: 60, ..Default::default() }, 1))?;
    ensure(
        big.naive_ns > big.acm_ns && slope >= 0.9 && cached.cached_ns < cached.acm_ns,
        format!(
            "naive {:.1}ms > acm {:.1}ms at C=64 k=5 H=29 P=64; naive log-log slope {slope:.2} >= 0.9; \
             cached {:.0}us < uncached {:.0}us with prior",
            big.naive_ns / 1e6,
            big.acm_ns / 1e6,
            cached.cached_ns / 1e3,
            cached.acm_ns / 1e3
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng::stream(31, tag::DATA, 0);
    let t = rand_tensor(&mut r, &[3, 4, 5]);
    let path = dir.path().join("t.tsr");
    tsr::write(&t, &path).map_err(|e| e.to_string())?;
    let back = tsr::read(&path).map_err(|e| e.to_string())?;
    if back.bits() != t.bits() || back.shape() != t.shape() {
        return Err("TSR round trip changed bits".into());
    }
    for prefix in ["a", "b"] {
        let out = dir.path().join(prefix);
        let status = acm_bin(&["heatmap", "--map", path.to_str().unwrap(), "--out", out.to_str().unwrap()]).status;
        if !status.success() {
            return Err("heatmap command failed".into());
        }
        let toy = dir.path().join(format!("toy_{prefix}"));
        let status =
            acm_bin(&["toytrain", "--epochs", "2", "--n-train", "60", "--n-test", "20", "--out-dir", toy.to_str().unwrap()]).status;
        if !status.success() {
            return Err("toytrain command failed".into());
        }
    }
    let same = |a: &str, b: &str| fs::read(dir.path().join(a)).ok() == fs::read(dir.path().join(b)).ok();
    if !(same("a.csv", "b.csv") && same("a.pgm", "b.pgm") && same("toy_a/curves.csv", "toy_b/curves.csv")) {
        return Err("identical seeds produced different files".into());
    }
    let eq_a = acm_bin(&["eqcheck", "--trials", "10", "--seed", "5"]).stdout;
    let eq_b = acm_bin(&["eqcheck", "--trials", "10", "--seed", "5"]).stdout;
    if eq_a != eq_b {
        return Err("eqcheck stdout differs between runs".into());
    }
    let pgm = heatmap_pgm(&Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap()).map_err(|e| e.to_string())?;
    ensure(
        pgm == [b"P5\n2 2\n255\n".as_slice(), &[0, 85, 170, 255]].concat(),
        "TSR bit-exact; heatmap CSV/PGM, training curves and eqcheck stdout byte-identical; PGM [0,1;2,3] -> 0,85,170,255".into(),
    )
}

fn main() {
    let start = Instant::now();
    let (toy, locality) = toy_and_locality();
    let results: [(&str, Verdict); 8] = [
        ("equivalence", equivalence()),
        ("shape law", shape_law()),
        ("gradient suite", gradients()),
        ("toy prior fusion", toy),
        ("fusion locality", locality),
        ("analysis protocol", analysis_protocol()),
        ("performance ordering", performance()),
        ("determinism and formats", determinism()),
    ];
    let mut failed = 0;
    for (i, (name, verdict)) in results.iter().enumerate() {
        match verdict {
            Ok(msg) => println!("criterion {} {name}: PASS ({msg})", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({msg})", i + 1)
            }
        }
    }
    let total = Duration::from_secs(start.elapsed().as_secs());
    println!("{}/8 criteria passed in {}s", 8 - failed, total.as_secs());
    if failed > 0 {
        std::process::exit(1);
    }
}
