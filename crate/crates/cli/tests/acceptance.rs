//! Acceptance checks, one PASS/FAIL line each. Exits nonzero if any fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stsc::commands::{self, GRADCHECK_EPS, GRADCHECK_TOL};
use stsc::config::RunConfig;
use stsc_core::metrics::auc;
use stsc_core::model::{ema_update, init_params, HeadMode};
use stsc_core::relation::relation_matrix;
use stsc_core::temporal::{binarize, stable_substructures, AdjacencyMatrix};
use stsc_core::trainer::LossSwitches;
use stsc_core::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit: Duration) -> String {
    format!("{:.1}s of {:.0}s budget", elapsed.as_secs_f64(), limit.as_secs_f64())
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let (checks, ok) = commands::gradcheck(0, 100, false).expect("gradcheck suite");
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
    let fast = elapsed < Duration::from_secs(60);
    outcome(
        ok && fast && checks.iter().all(|c| c.instances >= 100),
        format!(
            "4 terms x {} instances, eps {GRADCHECK_EPS:e}, worst relative error {worst:.2e} (tol {GRADCHECK_TOL:e}), {}",
            checks[0].instances,
            within(elapsed, Duration::from_secs(60))
        ),
    )
}

fn random_graph(rng: &mut ChaCha8Rng, b: usize) -> AdjacencyMatrix {
    let density = rng.random_range(0.1..0.9);
    let mut bits = vec![false; b * b];
    for i in 0..b {
        for j in i + 1..b {
            bits[i * b + j] = rng.random_bool(density);
        }
    }
    AdjacencyMatrix::from_bits(bits, (0..b as u64).collect(), 0.5).expect("adjacency")
}

/// Every vertex subset that is connected under the intersection edges and
/// has no intersection edge leaving it.
fn enumerate_components(a: &AdjacencyMatrix, p: &AdjacencyMatrix) -> Vec<Vec<usize>> {
    let b = a.size();
    let both = |i: usize, j: usize| a.has_edge(i, j) && p.has_edge(i, j);
    let members = |m: u32| (0..b).filter(move |i| m & (1 << i) != 0);
    let connected = |m: u32| {
        let mut seen = 1u32 << m.trailing_zeros();
        loop {
            let grown = members(m).filter(|&j| members(seen).any(|i| both(i, j))).fold(seen, |s, j| s | 1 << j);
            if grown == seen {
                return seen == m;
            }
            seen = grown;
        }
    };
    let closed = |m: u32| members(m).all(|i| (0..b).all(|j| m & (1 << j) != 0 || !both(i, j)));
    let mut out: Vec<Vec<usize>> = (1u32..1 << b)
        .filter(|&m| m.count_ones() >= 2 && connected(m) && closed(m))
        .map(|m| members(m).collect())
        .collect();
    out.sort();
    out
}

fn graph_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for b in 1..=8 {
        for _ in 0..200 {
            let a = random_graph(&mut rng, b);
            let p = random_graph(&mut rng, b);
            if stable_substructures(&a, &p).expect("aligned").components != enumerate_components(&a, &p) {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("1600 pairs (B = 1..8), {mismatches} mismatches, {}", within(elapsed, Duration::from_secs(10))),
    )
}

fn relation_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut norm_err, mut scale_err, mut monotone) = (0.0f64, 0.0f64, true);
    for _ in 0..200 {
        let b = rng.random_range(2..=12);
        let k = rng.random_range(1..=8);
        let f = Tensor::new(vec![b, k], (0..b * k).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let ids: Vec<u64> = (0..b as u64).collect();
        let r = relation_matrix(&f, &ids).unwrap();
        for i in 0..b {
            let norm = r.values.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            norm_err = norm_err.max((norm - 1.0).abs());
        }
        for s in [0.1, 1.0, 10.0] {
            let rs = relation_matrix(&f.scale(s), &ids).unwrap();
            scale_err = scale_err.max(rs.values.sub(&r.values).unwrap().max_abs());
        }
        let t1 = rng.random_range(-1.0..1.0);
        let t2 = rng.random_range(t1..=1.0);
        let (lo, hi) = (binarize(&r, t1), binarize(&r, t2));
        monotone &= hi.edges().all(|(i, j)| lo.has_edge(i, j));
    }
    outcome(
        norm_err <= 1e-9 && scale_err <= 1e-9 && monotone,
        format!("max |row norm - 1| {norm_err:.1e}, max scale drift {scale_err:.1e}, monotone in tau: {monotone}"),
    )
}

fn ema_closed_form() -> Outcome {
    let student = init_params(&[4, 6, 3], HeadMode::SingleLabel, 1).unwrap();
    let teacher0 = init_params(&[4, 6, 3], HeadMode::SingleLabel, 2).unwrap();
    let mut worst = 0.0f64;
    for alpha in [0.0, 0.5, 0.99, 1.0] {
        let mut teacher = teacher0.clone();
        for t in 1..=100 {
            teacher = ema_update(&teacher, &student, alpha).unwrap();
            let at = f64::powi(alpha, t);
            for ((th, t0), s) in teacher.tensors().iter().zip(teacher0.tensors()).zip(student.tensors()) {
                for ((&v, &v0), &sv) in th.data().iter().zip(t0.data()).zip(s.data()) {
                    worst = worst.max((v - (at * v0 + (1.0 - at) * sv)).abs());
                }
            }
        }
    }
    outcome(worst <= 1e-12, format!("max deviation {worst:.1e} over alpha in {{0, 0.5, 0.99, 1}}, t <= 100"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct SslRuns {
    baseline: Vec<f64>,
    full: Vec<f64>,
    /// Final / epoch-0 mean relation distance of each full run.
    distance_ratio: Vec<f64>,
    elapsed: Duration,
}

fn ssl_runs() -> SslRuns {
    let start = Instant::now();
    let base = RunConfig::default();
    let (mut baseline, mut full, mut distance_ratio) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5 {
        let cfg = base.with_seed(seed);
        let b = commands::train_in_memory(&cfg.with_switches(LossSwitches::NONE)).expect("baseline run");
        let f = commands::train_in_memory(&cfg.with_switches(LossSwitches::ALL)).expect("full run");
        baseline.push(b.test.accuracy);
        full.push(f.test.accuracy);
        let h = f.fit.history();
        distance_ratio.push(h.last().unwrap().relation_distance / h[0].relation_distance);
    }
    SslRuns {
        baseline,
        full,
        distance_ratio,
        elapsed: start.elapsed(),
    }
}

fn ssl_benefit(r: &SslRuns) -> Outcome {
    let (b, f) = (median(r.baseline.clone()), median(r.full.clone()));
    let budget = Duration::from_secs(600);
    outcome(
        f - b >= 0.03 - 1e-12 && r.elapsed < budget,
        format!(
            "median test accuracy {f:.3} full vs {b:.3} supervised-only (gain {:+.3}); per seed full {:?} baseline {:?}; {}",
            f - b,
            r.full,
            r.baseline,
            within(r.elapsed, budget)
        ),
    )
}

fn relation_distance_shrinks(r: &SslRuns) -> Outcome {
    let worst = r.distance_ratio.iter().cloned().fold(0.0, f64::max);
    let shown: Vec<String> = r.distance_ratio.iter().map(|x| format!("{x:.3}")).collect();
    outcome(worst < 0.5, format!("final / epoch-0 relation distance per seed [{}]", shown.join(", ")))
}

fn ablation_ordering() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let rows = commands::ablate_runs(&cfg, &LossSwitches::grid(), threads).expect("ablation grid");
    let med = |s: LossSwitches| rows.iter().find(|r| r.switches == s).expect("grid row").median_of(|m| m.auc);
    let full = med(LossSwitches::ALL);
    let singles = [
        LossSwitches { use_lc: true, use_lsc: false, use_ltc: false },
        LossSwitches { use_lc: false, use_lsc: true, use_ltc: false },
        LossSwitches { use_lc: false, use_lsc: false, use_ltc: true },
    ];
    let single_aucs: Vec<String> = singles.iter().map(|&s| format!("{} {:.4}", commands::switches_label(s), med(s))).collect();
    outcome(
        singles.iter().all(|&s| full >= med(s)),
        format!(
            "median AUC full {full:.4} vs {}; {} seeds, {:.0}s",
            single_aucs.join(", "),
            cfg.seeds,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut sets = 0;
    for n in 2..=200 {
        for _ in 0..3 {
            let levels = rng.random_range(2..=20);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
                continue;
            }
            sets += 1;
            if auc(&scores, &labels).unwrap() != pair_count_auc(&scores, &labels) {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{sets} tied score sets with n in 2..=200, {mismatches} inexact"))
}

fn determinism() -> Outcome {
    let root = std::env::temp_dir().join(format!("stsc-acceptance-{}", std::process::id()));
    let first: PathBuf = root.join("first");
    let second: PathBuf = root.join("second");
    commands::train(&RunConfig::default(), &first, false).expect("first run");
    let replay = RunConfig::load(&first.join("manifest.txt")).expect("manifest");
    commands::train(&replay, &second, false).expect("second run");
    let a = std::fs::read(first.join("metrics.csv")).unwrap();
    let b = std::fs::read(second.join("metrics.csv")).unwrap();
    let _ = std::fs::remove_dir_all(&root);
    outcome(a == b && !a.is_empty(), format!("metrics.csv {} bytes, identical: {}", a.len(), a == b))
}

/// `(name, trend, check)`. Trend criteria measure a training outcome on
/// synthetic data; their FAIL is printed but only fatal under
/// `STSC_ACCEPTANCE_STRICT=1`.
type Check<'a> = (&'static str, bool, Box<dyn Fn() -> Outcome + 'a>);

fn main() {
    let strict = std::env::var("STSC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let ssl = ssl_runs();
    let checks: Vec<Check> = vec![
        ("1 gradient correctness", false, Box::new(gradients)),
        ("2 substructure oracle", false, Box::new(graph_oracle)),
        ("3 relation invariants", false, Box::new(relation_invariants)),
        ("4 EMA closed form", false, Box::new(ema_closed_form)),
        ("5 SSL benefit on rings", true, Box::new(|| ssl_benefit(&ssl))),
        ("6 ablation ordering", true, Box::new(ablation_ordering)),
        ("7 relation distance shrinks", true, Box::new(|| relation_distance_shrinks(&ssl))),
        ("8 AUC oracle", false, Box::new(auc_oracle)),
        ("9 determinism", false, Box::new(determinism)),
    ];
    let (mut failed, mut fatal) = (0, 0);
    for (name, trend, check) in &checks {
        let o = check();
        if !o.pass {
            failed += 1;
            if strict || !trend {
                fatal += 1;
            }
        }
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if fatal > 0 {
        std::process::exit(1);
    }
}
