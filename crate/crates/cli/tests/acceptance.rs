//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (no libtest harness) so the summary is always
//! printed; exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use coheragg::aggregates::{pad_weight, AggregateKind, AggregateSpec, PaddedWeight};
use coheragg::consensus::{
    reconcile, solve_mean, ConsensusConfig, ConsensusDistribution, ConsensusEntry, ConsensusProblem, LevelForecast,
    Method, OptimizerConfig,
};
use coheragg::evaluation::{crps_gaussian, crps_quadrature};
use coheragg::forecasters::{ForecasterConfig, ForecasterKind, GaussianForecast};
use coheragg::SplitSpec;
use coheragg_cli::config::{DatasetConfig, EvalConfig, LevelConfig, Segment};
use coheragg_cli::pipeline::{self, RunOutput};
use coheragg_cli::synthetic::SyntheticSpec;
use coheragg_cli::ExperimentConfig;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(elapsed: Duration, limit_secs: f64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_secs, || {
        format!("runtime {:.2}s exceeds {limit_secs}s", elapsed.as_secs_f64())
    })
}

fn bundled_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("synthetic.json")
}

// ---------------------------------------------------------------------------
// 1. identity fixed point

fn identity_fixed_point() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = AggregateSpec::base();
    let r = 64;
    let (mut worst_mu, mut worst_var) = (0.0f64, 0.0f64);
    for trial in 0..100 {
        let means: Vec<f64> = (0..r).map(|_| rng.random_range(-10.0..10.0)).collect();
        let stds: Vec<f64> = (0..r).map(|_| rng.random_range(0.1..5.0)).collect();
        let f = GaussianForecast::new(0, "base", means.clone(), stds.clone()).map_err(|e| e.to_string())?;
        let cfg = ConsensusConfig {
            rank: 4,
            optimizer: OptimizerConfig { seed: trial, ..Default::default() },
        };
        let q = reconcile(&[LevelForecast { spec: &base, forecast: &f, alpha: 1.0 }], r, &cfg)
            .map_err(|e| e.to_string())?;
        for (a, b) in q.mean().iter().zip(&means) {
            worst_mu = worst_mu.max((a - b).abs());
        }
        for (v, s) in q.marginal_variances().iter().zip(&stds) {
            worst_var = worst_var.max((v - s * s).abs() / (s * s));
        }
    }
    check(worst_mu <= 1e-9, || format!("max |mu* - mu_hat| = {worst_mu:.3e}"))?;
    check(worst_var <= 1e-5, || format!("max relative variance error = {worst_var:.3e}"))?;
    within_time(started.elapsed(), 5.0)?;
    Ok(format!(
        "100 trials, R=64: max |dmu| {worst_mu:.1e}, max rel dvar {worst_var:.1e}, {:.2}s",
        started.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 2. mean solver against coordinate descent

fn random_problem(rng: &mut ChaCha8Rng) -> ConsensusProblem {
    let r = rng.random_range(1..=6usize);
    let divisors: Vec<usize> = (2..=r).filter(|k| r % k == 0).collect();
    let levels = if divisors.is_empty() { 1 } else { rng.random_range(1..=3usize) };
    let mut entries = Vec::new();
    let mut push = |rng: &mut ChaCha8Rng, level: usize, weight: PaddedWeight, alpha: f64| {
        entries.push(ConsensusEntry {
            level,
            weight,
            mean: rng.random_range(-5.0..5.0),
            std: rng.random_range(0.1..3.0),
            alpha,
        });
    };
    for t in 0..r {
        let mut w = vec![0.0; r];
        w[t] = 1.0;
        push(rng, 0, PaddedWeight::from_dense(&w), 1.0);
    }
    for level in 1..levels {
        let k = divisors[rng.random_range(0..divisors.len())];
        let kind = match rng.random_range(0..3) {
            0 => AggregateKind::Average,
            1 if k.is_multiple_of(2) => AggregateKind::Halfdiff,
            _ => AggregateKind::Trend,
        };
        let spec = AggregateSpec::new(kind, k).expect("valid kind for k >= 2");
        let alpha = rng.random_range(0.1..20.0);
        for j in 0..r / k {
            push(rng, level, pad_weight(&spec, j, r).expect("divisible"), alpha);
        }
    }
    ConsensusProblem::new(r, 0, entries).expect("base level covers every step")
}

/// Cyclic coordinate descent; each update is the exact 1-D minimizer of the
/// weighted quadratic.
fn coordinate_descent(problem: &ConsensusProblem, tol: f64) -> Vec<f64> {
    let r = problem.horizon();
    let dense: Vec<Vec<f64>> = problem.entries().iter().map(|e| e.weight.to_dense()).collect();
    let mut mu = vec![0.0; r];
    for _ in 0..10_000_000 {
        let mut biggest = 0.0f64;
        for t in 0..r {
            let (mut num, mut den) = (0.0, 0.0);
            for (e, a) in problem.entries().iter().zip(&dense) {
                if a[t] == 0.0 {
                    continue;
                }
                let w = e.alpha / (e.std * e.std);
                let rest: f64 = (0..r).filter(|&s| s != t).map(|s| a[s] * mu[s]).sum();
                num += w * a[t] * (e.mean - rest);
                den += w * a[t] * a[t];
            }
            let new = num / den;
            biggest = biggest.max((new - mu[t]).abs());
            mu[t] = new;
        }
        if biggest < tol {
            break;
        }
    }
    mu
}

fn mean_solver_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let p = random_problem(&mut rng);
        let mu = solve_mean(&p).map_err(|e| e.to_string())?;
        let oracle = coordinate_descent(&p, 1e-12);
        for (a, b) in mu.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
        let f0 = p.mean_objective(&mu);
        for _ in 0..1000 {
            let scale = 10f64.powf(rng.random_range(-6.0..0.0));
            let d: Vec<f64> = mu.iter().map(|m| m + scale * rng.random_range(-1.0..1.0)).collect();
            let f = p.mean_objective(&d);
            check(f0 <= f, || format!("problem {i}: perturbation lowers objective {f0} -> {f}"))?;
        }
    }
    check(worst <= 1e-8, || format!("max |mu* - oracle| = {worst:.3e}"))?;
    within_time(started.elapsed(), 10.0)?;
    Ok(format!(
        "200 problems: max |mu* - oracle| {worst:.1e}, 200k perturbations never lower, {:.2}s",
        started.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 3. marginals against dense quadratic form and Monte-Carlo

fn marginal_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let diag = ConsensusDistribution::independent(vec![0.0], vec![1.0])
        .map_err(|e| e.to_string())?
        .diagnostics()
        .clone();
    let (mut worst_dense, mut worst_mc) = (0.0f64, 0.0f64);
    let samples = 1_000_000;
    for i in 0..100 {
        let r = rng.random_range(1..=32usize);
        let k = [0, 1, 4][i % 3];
        let mu = (0..r).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sigma = (0..r).map(|_| rng.random_range(0.1..2.0)).collect();
        let factor = (0..r).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let q = ConsensusDistribution::new(mu, sigma, factor, diag.clone()).map_err(|e| e.to_string())?;
        let a: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = q.marginalize(&PaddedWeight::from_dense(&a)).map_err(|e| e.to_string())?;

        let cov = q.dense_covariance().map_err(|e| e.to_string())?;
        let av = DVector::from_vec(a);
        let dense = (av.transpose() * &cov * &av)[(0, 0)];
        worst_dense = worst_dense.max((m.variance - dense).abs() / dense.max(1.0));

        // x = L z with z ~ N(0, I); a^T x = (L^T a)^T z.
        let l = cov.cholesky().ok_or("dense covariance not positive definite")?.l();
        let w = l.transpose() * &av;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..samples {
            let v: f64 = w.iter().map(|wi| wi * rng.sample::<f64, _>(StandardNormal)).sum();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / samples as f64;
        let var = sum_sq / samples as f64 - mean * mean;
        worst_mc = worst_mc.max((var - m.variance).abs() / m.variance);
    }
    check(worst_dense <= 1e-10, || format!("dense mismatch {worst_dense:.3e}"))?;
    check(worst_mc <= 0.015, || format!("Monte-Carlo mismatch {:.2}%", 100.0 * worst_mc))?;
    within_time(started.elapsed(), 60.0)?;
    Ok(format!(
        "100 distributions: dense {worst_dense:.1e}, Monte-Carlo worst {:.2}%, {:.2}s",
        100.0 * worst_mc,
        started.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 4. constructed R=2 instance

fn covariance_stationarity() -> Outcome {
    let started = Instant::now();
    let base = AggregateSpec::base();
    let avg = AggregateSpec::new(AggregateKind::Average, 2).map_err(|e| e.to_string())?;
    let fb = GaussianForecast::new(0, "base", vec![0.0, 0.0], vec![1.0, 1.0]).map_err(|e| e.to_string())?;
    let fa = GaussianForecast::new(1, "average_2", vec![0.0], vec![0.1f64.sqrt()]).map_err(|e| e.to_string())?;
    let levels = [
        LevelForecast { spec: &base, forecast: &fb, alpha: 1.0 },
        LevelForecast { spec: &avg, forecast: &fa, alpha: 1.0 },
    ];
    let q = reconcile(&levels, 2, &ConsensusConfig { rank: 1, optimizer: OptimizerConfig::default() })
        .map_err(|e| e.to_string())?;
    let cov = q.dense_covariance().map_err(|e| e.to_string())?;
    let c = cov[(0, 1)];
    check((c + 0.8).abs() <= 2e-2, || format!("implied covariance {c}"))?;
    let agg = q.marginalize_dense(&[0.5, 0.5]).map_err(|e| e.to_string())?.variance;
    let rel = [(cov[(0, 0)] - 1.0).abs(), (cov[(1, 1)] - 1.0).abs(), (agg - 0.1).abs() / 0.1];
    let worst = rel.iter().copied().fold(0.0, f64::max);
    check(worst <= 1e-3, || format!("marginal targets off by {worst:.2e} relative"))?;
    let diag = reconcile(&levels, 2, &ConsensusConfig { rank: 0, optimizer: OptimizerConfig::default() })
        .map_err(|e| e.to_string())?;
    let (f1, f0) = (q.diagnostics().objective, diag.diagnostics().objective);
    check(f0 > f1, || format!("k=0 objective {f0} not above k=1 objective {f1}"))?;
    within_time(started.elapsed(), 5.0)?;
    Ok(format!(
        "c = {c:.4}, marginals within {worst:.1e}, objective k=1 {f1:.2e} < k=0 {f0:.4}, {:.2}s",
        started.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 5. CRPS

fn crps_correctness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let mu = rng.random_range(-10.0..10.0);
        let sigma = rng.random_range(0.05..5.0);
        // The 1e5-node midpoint grid reaches about 4.4 sd; beyond that its
        // truncation error alone exceeds the tolerance.
        let y = mu + sigma * rng.random_range(-4.0..4.0);
        let n = Normal::new(mu, sigma).map_err(|e| e.to_string())?;
        let quad = crps_quadrature(|p| n.inverse_cdf(p), y, 100_000).map_err(|e| e.to_string())?;
        let closed = crps_gaussian(mu, sigma, y).map_err(|e| e.to_string())?;
        worst = worst.max((quad - closed).abs());
    }
    check(worst <= 1e-6, || format!("closed form vs quadrature {worst:.3e}"))?;

    let exact = (2.0 - 2f64.sqrt()) / (2.0 * std::f64::consts::PI).sqrt();
    let at_zero = crps_gaussian(0.0, 1.0, 0.0).map_err(|e| e.to_string())?;
    check((at_zero - exact).abs() <= 1e-9, || format!("CRPS(0,1,0) = {at_zero}, expected {exact}"))?;

    // Propriety: under y ~ N(0,1) the true forecast scores best; paired
    // differences must exceed three standard errors.
    let ys: Vec<f64> = (0..200_000).map(|_| rng.sample(StandardNormal)).collect();
    for (mu, sigma) in [(0.3, 1.0), (0.0, 1.5), (0.0, 0.7), (-0.2, 1.2)] {
        let d: Vec<f64> = ys
            .iter()
            .map(|&y| crps_gaussian(mu, sigma, y).unwrap() - crps_gaussian(0.0, 1.0, y).unwrap())
            .collect();
        let n = d.len() as f64;
        let m = d.iter().sum::<f64>() / n;
        let se = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        check(m > 3.0 * se, || format!("N({mu},{sigma}) margin {m:.2e} within 3 se {se:.2e}"))?;
    }
    Ok(format!(
        "max |closed - quadrature| {worst:.1e} over 1000 draws, CRPS(0,1,0) exact, propriety holds, {:.2}s",
        started.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 6. synthetic directional reproduction

fn synthetic_run(seed: u64, dir: &Path) -> Result<(RunOutput, Duration), String> {
    let spec = SyntheticSpec { seed, ..Default::default() };
    let data = dir.join(format!("synthetic_{seed}.csv"));
    let file = std::fs::File::create(&data).map_err(|e| e.to_string())?;
    spec.write_csv(std::io::BufWriter::new(file)).map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::load(&bundled_config()).map_err(|e| e.to_string())?;
    cfg.dataset.path = data;
    cfg.seed = seed;
    cfg.output_dir = dir.join(format!("run_{seed}"));
    let started = Instant::now();
    let out = pipeline::cmd_run(cfg).map_err(|e| format!("seed {seed}: {e}"))?;
    Ok((out, started.elapsed()))
}

fn directional_reproduction() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let unseen: Vec<(&str, usize)> = ["average", "halfdiff"]
        .iter()
        .flat_map(|k| [4, 8, 24].map(|w| (*k, w)))
        .collect();
    let mut base_wins = 0;
    let mut wins: BTreeMap<String, usize> = unseen.iter().map(|(k, w)| (format!("{k}_{w}"), 0)).collect();
    let mut slowest = 0.0f64;
    for seed in 0..10 {
        let (out, elapsed) = synthetic_run(seed, tmp.path())?;
        within_time(elapsed, 60.0)?;
        slowest = slowest.max(elapsed.as_secs_f64());
        let baseline = out.baseline_report.as_ref().ok_or("no base level in the bundled config")?;
        let crps = |report: &coheragg::ScoreReport, level: &str, k: usize| {
            report.row(level, k).map(|r| r.crps).ok_or(format!("missing {level} K={k} row"))
        };
        if crps(&out.consensus_report, "base", 1)? < crps(baseline, "base", 1)? {
            base_wins += 1;
        }
        for (kind, k) in &unseen {
            if crps(&out.consensus_report, kind, *k)? < crps(baseline, kind, *k)? {
                *wins.get_mut(&format!("{kind}_{k}")).expect("key") += 1;
            }
        }
    }
    let detail = wins.iter().map(|(k, v)| format!("{k} {v}/10")).collect::<Vec<_>>().join(", ");
    check(base_wins >= 8, || format!("base level wins {base_wins}/10 (need 8); unseen: {detail}"))?;
    check(wins.values().all(|&w| w >= 7), || {
        format!("some unseen aggregate wins < 7/10: {detail}")
    })?;
    Ok(format!("base {base_wins}/10; {detail}; slowest run {slowest:.2}s"))
}

// ---------------------------------------------------------------------------
// 7. over-estimated variance under correlated steps

fn correlated_config(data: PathBuf, seed: u64, out: PathBuf) -> ExperimentConfig {
    let clim = ForecasterConfig::new(ForecasterKind::Climatology);
    let level = |spec: AggregateSpec| LevelConfig { aggregate: spec, forecaster: clim, alpha: None };
    ExperimentConfig {
        dataset: DatasetConfig { path: data, columns: coheragg::ColumnSpec::value("y") },
        split: SplitSpec { train: 5600, val: 800, test: 1600, history: 336, horizon: 168 },
        levels: vec![
            level(AggregateSpec::base()),
            level(AggregateSpec::new(AggregateKind::Average, 6).expect("valid")),
            level(AggregateSpec::new(AggregateKind::Average, 12).expect("valid")),
        ],
        alpha: Default::default(),
        consensus: ConsensusConfig {
            rank: 4,
            optimizer: OptimizerConfig { method: Method::Lbfgs, ..Default::default() },
        },
        eval: EvalConfig::default(),
        segment: Segment::Test,
        stride: None,
        seed,
        workers: 1,
        output_dir: out,
    }
}

fn overestimated_variance() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let k = 6;
    let spec = AggregateSpec::new(AggregateKind::Halfdiff, k).map_err(|e| e.to_string())?;
    let mut closer = 0;
    let mut lines = Vec::new();
    for seed in 0..10 {
        let data = tmp.path().join(format!("ar_{seed}.csv"));
        let synth = SyntheticSpec { amplitude: 0.0, phi: 0.95, seed, ..Default::default() };
        let file = std::fs::File::create(&data).map_err(|e| e.to_string())?;
        synth.write_csv(std::io::BufWriter::new(file)).map_err(|e| e.to_string())?;
        let out = pipeline::execute(correlated_config(data, seed, tmp.path().join("unused")))
            .map_err(|e| format!("seed {seed}: {e}"))?;
        let (mut truth, mut cons, mut base) = (Vec::new(), Vec::new(), Vec::new());
        for w in &out.windows {
            let r = w.truth.len();
            let b = &w.forecasts[0];
            let indep = ConsensusDistribution::independent(b.means.clone(), b.stds.clone()).map_err(|e| e.to_string())?;
            for j in 0..r / k {
                let a = pad_weight(&spec, j, r).map_err(|e| e.to_string())?;
                truth.push(a.dot(&w.truth));
                cons.push(w.consensus.marginalize(&a).map_err(|e| e.to_string())?.variance);
                base.push(indep.marginalize(&a).map_err(|e| e.to_string())?.variance);
            }
        }
        let n = truth.len() as f64;
        let m = truth.iter().sum::<f64>() / n;
        let empirical = truth.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        let c = cons.iter().sum::<f64>() / n;
        let b = base.iter().sum::<f64>() / n;
        if (c - empirical).abs() < (b - empirical).abs() {
            closer += 1;
        }
        lines.push(format!("{empirical:.2}/{c:.2}/{b:.2}"));
    }
    let detail = format!("halfdiff_{k} empirical/consensus/independent: {}", lines.join(" "));
    check(closer >= 9, || format!("consensus closer in {closer}/10; {detail}"))?;
    Ok(format!("consensus closer in {closer}/10; {detail}"))
}

// ---------------------------------------------------------------------------
// 8. determinism

fn snapshot(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv" || e == "json" || e == "svg") {
                let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
                files.insert(path.strip_prefix(dir).expect("inside dir").to_path_buf(), bytes);
            }
        }
    }
    Ok(files)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::load(&bundled_config()).map_err(|e| e.to_string())?;
    cfg.output_dir = tmp.path().join("out");
    pipeline::cmd_run(cfg.clone()).map_err(|e| e.to_string())?;
    let first = snapshot(&cfg.output_dir)?;
    pipeline::cmd_run(cfg.clone()).map_err(|e| e.to_string())?;
    let second = snapshot(&cfg.output_dir)?;
    check(first.len() > 10, || format!("only {} artifacts written", first.len()))?;
    check(first.keys().eq(second.keys()), || "artifact sets differ".into())?;
    let differing: Vec<_> = first.iter().filter(|(k, v)| second[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    check(differing.is_empty(), || format!("differing artifacts: {}", differing.join(", ")))?;
    Ok(format!("{} CSV/JSON/SVG artifacts byte-identical across two runs", first.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("identity fixed point", identity_fixed_point),
        ("mean solver oracle", mean_solver_oracle),
        ("covariance marginal oracle", marginal_oracle),
        ("covariance stationarity", covariance_stationarity),
        ("CRPS correctness", crps_correctness),
        ("synthetic directional reproduction", directional_reproduction),
        ("over-estimated variance", overestimated_variance),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || id.ends_with(f.as_str())) {
            continue;
        }
        match run() {
            Ok(detail) => println!("{id} [{name}]: PASS - {detail}"),
            Err(why) => {
                failed += 1;
                println!("{id} [{name}]: FAIL - {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
