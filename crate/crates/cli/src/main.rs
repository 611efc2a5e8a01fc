//! `acm`: equivalence and gradient checks, benchmarks, the indexed-grid toy
//! experiment and feature-map analysis.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.

mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use acm_core::analysis::{channel_diversity, discriminability, heatmap_export, ExcludeBox, MinMaxScope};
use acm_core::autograd::gradcheck_suite;
use acm_core::bench::{bench_compare, parse_configs, results_csv, BenchOptions, MIN_REPS, MIN_WARMUP};
use acm_core::eqcheck::equivalence_trials;
use acm_core::exec::{set_threads, Exec};
use acm_core::toy::{index_free_accuracy_bound, locality_rate, shuffled_index_accuracy, toy_train, TrainConfig, MAX_CLASSES};
use acm_core::{tsr, Error, Tensor};
use clap::{Args, Parser, Subcommand};

use config::Echo;

#[derive(Parser)]
#[command(name = "acm", version, about = "Asymmetric convolution fusion toolkit")]
struct Cli {
    /// Print the resolved configuration and exit without running.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compare the decomposed fusion with the concatenation baseline on random shapes.
    Eqcheck(EqArgs),
    /// Analytic vs. central-difference gradients for every op.
    Gradcheck(GradArgs),
    /// Time the baseline, decomposed and cached fusion paths.
    Bench(BenchArgs),
    /// Train the index-conditioned glyph classifier.
    Toytrain(ToyArgs),
    /// Discriminability and channel diversity of a C×H×W map.
    Analyze(AnalyzeArgs),
    /// Write the L1 heatmap of a map as CSV and PGM.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct EqArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Worker threads for independent trials; output is identical for any value.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-2)]
    eps: f32,
    #[arg(long, default_value_t = 1e-2)]
    tol: f64,
    /// Corrupt one analytic gradient per case; every case should then fail.
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// CSV with header `C,eta,omega,H,W,P`.
    #[arg(long)]
    configs: PathBuf,
    #[arg(long, default_value_t = MIN_REPS)]
    reps: usize,
    #[arg(long, default_value_t = MIN_WARMUP)]
    warmup: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Hidden width of the prior FC stack; 0 disables the prior.
    #[arg(long, default_value_t = 256)]
    prior_hidden: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.03)]
    lr: f32,
    #[arg(long)]
    ablate_index: bool,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long, default_value_t = 0.3)]
    activity_penalty: f32,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    map: PathBuf,
    /// Target position `r,c`.
    #[arg(long, value_parser = parse_pair)]
    target: (usize, usize),
    /// Inclusive exclusion box `r0,c0,r1,c1`.
    #[arg(long, value_parser = parse_box)]
    exclude: ExcludeBox,
    /// Min-max normalise each channel separately.
    #[arg(long)]
    per_channel_norm: bool,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    map: PathBuf,
    /// Output prefix; `.csv` and `.pgm` are appended.
    #[arg(long)]
    out: PathBuf,
}

fn parse_list(s: &str, n: usize) -> Result<Vec<usize>, String> {
    let v = s.split(',').map(|f| f.trim().parse::<usize>().map_err(|e| format!("{f:?}: {e}"))).collect::<Result<Vec<_>, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} comma-separated integers"));
    }
    Ok(v)
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let v = parse_list(s, 2)?;
    Ok((v[0], v[1]))
}

fn parse_box(s: &str) -> Result<ExcludeBox, String> {
    let v = parse_list(s, 4)?;
    if v[0] > v[2] || v[1] > v[3] {
        return Err("box corners must satisfy r0 <= r1 and c0 <= c1".into());
    }
    Ok(ExcludeBox { r0: v[0], c0: v[1], r1: v[2], c1: v[3] })
}

enum Failure {
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Disagreement { .. } => Failure::Check(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn eqcheck(a: &EqArgs, dump: bool) -> Outcome {
    print!("{}", Echo::new("eqcheck").set("trials", a.trials).set("seed", a.seed).set("tol", a.tol).set("threads", a.threads).render());
    if a.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    if !(a.tol.is_finite() && a.tol >= 0.0) {
        return Err(usage("--tol must be a finite non-negative number"));
    }
    if a.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    if dump {
        return Ok(());
    }
    let exec = if a.threads > 1 {
        set_threads(a.threads);
        Exec::Parallel
    } else {
        Exec::Sequential
    };
    let results = equivalence_trials(a.seed, a.trials, exec)?;
    println!("trial,C,eta,omega,H,W,P,max_abs_diff");
    let mut worst = 0f64;
    let mut failed = 0usize;
    for r in &results {
        let s = r.shape;
        println!("{},{},{},{},{},{},{},{:e}", r.index, s.c, s.eta, s.omega, s.h, s.w, s.p, r.max_diff);
        worst = worst.max(r.max_diff);
        if r.max_diff.is_nan() || r.max_diff > a.tol {
            failed += 1;
        }
    }
    println!("max_abs_diff = {worst:e}");
    if failed > 0 {
        println!("FAIL {failed}/{} trials above tol {:e}", results.len(), a.tol);
        return Err(Failure::Check(format!("{failed} trials exceeded tolerance")));
    }
    println!("PASS {} trials", results.len());
    Ok(())
}

fn gradcheck(a: &GradArgs, dump: bool) -> Outcome {
    print!(
        "{}",
        Echo::new("gradcheck").set("seed", a.seed).set("eps", a.eps).set("tol", a.tol).set("inject_fault", a.inject_fault).render()
    );
    if !(a.eps.is_finite() && a.eps > 0.0) {
        return Err(usage("--eps must be a finite positive number"));
    }
    if !(a.tol.is_finite() && a.tol > 0.0) {
        return Err(usage("--tol must be positive"));
    }
    if dump {
        return Ok(());
    }
    let reports = gradcheck_suite(a.seed, a.eps, a.tol, a.inject_fault)?;
    println!("case,checked,skipped,max_rel_err,status");
    for r in &reports {
        println!("{},{},{},{:e},{}", r.name, r.checked, r.skipped, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        println!("FAIL {failed}/{} cases", reports.len());
        return Err(Failure::Check(format!("{failed} gradient cases failed")));
    }
    println!("PASS {} cases", reports.len());
    Ok(())
}

fn bench(a: &BenchArgs, dump: bool) -> Outcome {
    print!(
        "{}",
        Echo::new("bench")
            .set("configs", a.configs.display())
            .set("reps", a.reps)
            .set("warmup", a.warmup)
            .opt("out", a.out.as_ref().map(|p| p.display()))
            .set("seed", a.seed)
            .set("prior_hidden", a.prior_hidden)
            .set("tol", a.tol)
            .render()
    );
    if a.reps < MIN_REPS || a.warmup < MIN_WARMUP {
        return Err(usage(format!("--reps must be >= {MIN_REPS} and --warmup >= {MIN_WARMUP}")));
    }
    let text = fs::read_to_string(&a.configs).map_err(|e| usage(format!("{}: {e}", a.configs.display())))?;
    let configs = parse_configs(&text)?;
    if configs.is_empty() {
        return Err(usage("config file has no rows"));
    }
    if dump {
        return Ok(());
    }
    let opts = BenchOptions {
        reps: a.reps,
        warmup: a.warmup,
        seed: a.seed,
        prior_hidden: (a.prior_hidden > 0).then_some(a.prior_hidden),
        tol: a.tol,
    };
    let results = bench_compare(&configs, &opts)?;
    let csv = results_csv(&results);
    print!("{csv}");
    if let Some(out) = &a.out {
        fs::write(out, &csv).map_err(|e| usage(format!("{}: {e}", out.display())))?;
    }
    Ok(())
}

fn toytrain(a: &ToyArgs, dump: bool) -> Outcome {
    let cfg = TrainConfig {
        seed: a.seed,
        n_train: a.n_train,
        n_test: a.n_test,
        classes: a.classes,
        epochs: a.epochs,
        lr: a.lr,
        ablate_index: a.ablate_index,
        activity_penalty: a.activity_penalty,
        ..Default::default()
    };
    print!(
        "{}",
        Echo::new("toytrain")
            .set("seed", cfg.seed)
            .set("classes", cfg.classes)
            .set("epochs", cfg.epochs)
            .set("lr", cfg.lr)
            .set("ablate_index", cfg.ablate_index)
            .set("n_train", cfg.n_train)
            .set("n_test", cfg.n_test)
            .set("glyph_size", cfg.glyph_size)
            .set("noise_std", cfg.noise_std)
            .set("activity_penalty", cfg.activity_penalty)
            .set("out_dir", a.out_dir.display())
            .render()
    );
    if cfg.classes < 2 || cfg.classes > MAX_CLASSES {
        return Err(usage(format!("--classes must be in 2..={MAX_CLASSES}")));
    }
    if cfg.epochs == 0 || cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(usage("--epochs, --n-train and --n-test must be positive"));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) || !(cfg.activity_penalty.is_finite() && cfg.activity_penalty >= 0.0) {
        return Err(usage("--lr must be positive and --activity-penalty non-negative"));
    }
    if dump {
        return Ok(());
    }
    let out = toy_train(&cfg)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| usage(format!("{}: {e}", a.out_dir.display())))?;
    fs::write(a.out_dir.join("curves.csv"), out.curve_csv()).map_err(Error::from)?;
    out.model.save(a.out_dir.join("model"))?;
    for e in &out.curve {
        println!("epoch {} train_loss {:.6} train_accuracy {:.4}", e.epoch, e.train_loss, e.train_accuracy);
    }
    println!("test_accuracy = {:.4}", out.test_accuracy);
    if cfg.ablate_index {
        println!("index_free_bound = {:.4}", index_free_accuracy_bound(cfg.classes)?);
    } else {
        println!("locality = {:.4}", locality_rate(&out.model, &out.test_set)?);
        println!("shuffled_index_accuracy = {:.4}", shuffled_index_accuracy(&out.model, &out.test_set, cfg.seed)?);
    }
    Ok(())
}

fn read_map(path: &PathBuf) -> Result<Tensor, Failure> {
    let t = tsr::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    t.dims3()?;
    Ok(t)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

fn analyze(a: &AnalyzeArgs, dump: bool) -> Outcome {
    let b = a.exclude;
    print!(
        "{}",
        Echo::new("analyze")
            .set("map", a.map.display())
            .set("target", format!("{},{}", a.target.0, a.target.1))
            .set("exclude", format!("{},{},{},{}", b.r0, b.c0, b.r1, b.c1))
            .set("per_channel_norm", a.per_channel_norm)
            .render()
    );
    let map = read_map(&a.map)?;
    if dump {
        return Ok(());
    }
    let scope = if a.per_channel_norm { MinMaxScope::PerChannel } else { MinMaxScope::Joint };
    let rep = discriminability(&map, a.target, a.exclude, scope)?;
    let div = match channel_diversity(&map) {
        Ok(d) => Some(d),
        Err(Error::NonPositiveMax) => {
            eprintln!("warning: map has no positive response; channel diversity left empty");
            None
        }
        Err(e) => return Err(e.into()),
    };
    println!("cosine,euclidean_norm01,target_r,target_c,distractor_r,distractor_c,diversity_mean,diversity_per_channel");
    let per_channel = div
        .as_ref()
        .map(|d| d.per_channel_max_normalized.iter().map(|v| format!("{v:.9}")).collect::<Vec<_>>().join(";"))
        .unwrap_or_default();
    println!(
        "{},{:.9},{},{},{},{},{},{}",
        fmt_opt(rep.cosine),
        rep.euclidean_norm01,
        rep.target_pos.0,
        rep.target_pos.1,
        rep.distractor_pos.0,
        rep.distractor_pos.1,
        fmt_opt(div.as_ref().map(|d| d.mean)),
        per_channel
    );
    Ok(())
}

fn heatmap(a: &HeatmapArgs, dump: bool) -> Outcome {
    print!("{}", Echo::new("heatmap").set("map", a.map.display()).set("out", a.out.display()).render());
    let map = read_map(&a.map)?;
    if dump {
        return Ok(());
    }
    let (csv, pgm) = heatmap_export(&map, &a.out)?;
    println!("wrote {}", csv.display());
    println!("wrote {}", pgm.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let dump = cli.dump_config;
    let outcome = match &cli.cmd {
        Cmd::Eqcheck(a) => eqcheck(a, dump),
        Cmd::Gradcheck(a) => gradcheck(a, dump),
        Cmd::Bench(a) => bench(a, dump),
        Cmd::Toytrain(a) => toytrain(a, dump),
        Cmd::Analyze(a) => analyze(a, dump),
        Cmd::Heatmap(a) => heatmap(a, dump),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
