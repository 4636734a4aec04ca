//! Subcommand implementations. Each returns what it wrote so tests and the
//! acceptance harness can inspect results without re-reading files.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use stsc_core::data::{gen_blobs, gen_multilabel, gen_rings_with, split, Dataset, Split};
use stsc_core::gradcheck::{loss_term_suite, TermCheck};
use stsc_core::metrics::MetricsReport;
use stsc_core::model::ModelParams;
use stsc_core::trainer::{evaluate_params, fit, FitResult, LossSwitches};

use crate::config::{DatasetKind, DatasetSpec, RunConfig, TOOL_VERSION};
use crate::formats::{self, MetricsLog};

/// Builds the dataset a config describes; generators are seeded with `seed`.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    Ok(match spec.kind {
        DatasetKind::Rings => gen_rings_with(spec.n, spec.rings, spec.noise, seed)?,
        DatasetKind::Blobs => gen_blobs(spec.n, spec.dim, spec.classes, spec.separation, spec.noise, seed)?,
        DatasetKind::Multilabel => gen_multilabel(spec.n, spec.dim, spec.classes, seed)?,
        DatasetKind::Csv => {
            let path = spec.path.as_ref().context("dataset = csv needs dataset_path")?;
            formats::load_csv(path, Some(spec.classes), spec.image)?
        }
    })
}

pub fn prepare(cfg: &RunConfig) -> Result<(Dataset, Split)> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset, cfg.train.seed)?;
    let parts = split(&data, &cfg.split)?;
    Ok((data, parts))
}

pub struct TrainOutcome {
    pub fit: FitResult,
    /// The best checkpoint, or the final weights when no epoch ran.
    pub selected: ModelParams,
    pub test: MetricsReport,
}

/// Runs one training job without touching the filesystem.
pub fn train_in_memory(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (data, parts) = prepare(cfg)?;
    let fit = fit(&data, &parts, &cfg.arch, &cfg.train, &mut |_| {})?;
    finish(cfg, &data, &parts, fit)
}

fn finish(cfg: &RunConfig, data: &Dataset, parts: &Split, fit: FitResult) -> Result<TrainOutcome> {
    let test_set = data.subset(&parts.test)?;
    let selected = match &fit.best {
        Some(b) => b.params.clone(),
        None => fit.state.eval_params(cfg.train.eval_model).clone(),
    };
    let test = evaluate_params(&selected, &test_set)?;
    Ok(TrainOutcome { fit, selected, test })
}

fn epoch_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}")
}

/// `train`: writes the manifest first, then per-epoch logs and dumps, then
/// checkpoints and split reports.
pub fn train(cfg: &RunConfig, out: &Path, verbose: bool) -> Result<TrainOutcome> {
    let mut manifest = cfg.clone();
    manifest.out = out.to_path_buf();
    manifest.tool_version = Some(TOOL_VERSION.to_string());
    let (data, parts) = prepare(cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    formats::write_text(&out.join("manifest.txt"), &manifest.to_text())?;

    let mut log = MetricsLog::create(&out.join("metrics.csv"))?;
    let mut failure: Option<anyhow::Error> = None;
    let fit = fit(&data, &parts, &cfg.arch, &cfg.train, &mut |rep| {
        if failure.is_some() {
            return;
        }
        let name = epoch_name(rep.record.epoch);
        let mut step = || -> Result<()> {
            log.push(rep.record)?;
            formats::save_substructures(&out.join("substructures").join(format!("{name}.txt")), rep.substructures)?;
            if let Some((rs, rt)) = rep.first_batch_relations {
                let dir = out.join("relations");
                formats::save_relation_csv(&dir.join(format!("{name}_student.csv")), &rs.batch_ids, &rs.values)?;
                formats::save_relation_csv(&dir.join(format!("{name}_teacher.csv")), &rt.batch_ids, &rt.values)?;
            }
            Ok(())
        };
        if let Err(e) = step() {
            failure = Some(e);
        }
        if verbose {
            let r = rep.record;
            eprintln!(
                "epoch {:>4}  l_s {:.4}  l_c {:.5}  l_sc {:.5}  l_tc {:.5}  k {:>4}  val acc {:.4} auc {:.4}",
                r.epoch, r.l_s, r.l_c, r.l_sc, r.l_tc, r.substructures, r.val.accuracy, r.val.auc
            );
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let ckpt = out.join("checkpoints");
    let last = fit.state.history.len().saturating_sub(1);
    formats::save_checkpoint(&ckpt.join("final"), fit.state.eval_params(cfg.train.eval_model), last)?;
    if let Some(b) = &fit.best {
        formats::save_checkpoint(&ckpt.join("best"), &b.params, b.epoch)?;
    }
    let outcome = finish(cfg, &data, &parts, fit)?;
    let val = evaluate_params(&outcome.selected, &data.subset(&parts.val)?)?;
    let report = |m: &MetricsReport| format!("{}\n{}\n", formats::REPORT_HEADER, formats::report_row(m));
    formats::write_text(&out.join("val.csv"), &report(&val))?;
    formats::write_text(&out.join("test.csv"), &report(&outcome.test))?;
    Ok(outcome)
}

/// Which split `eval` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
    All,
}

/// `eval`: scores a saved checkpoint on a split of the configured dataset.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, which: EvalSplit) -> Result<MetricsReport> {
    let stem = checkpoint.with_extension("");
    let (params, _) = formats::load_checkpoint(&stem)?;
    let (data, parts) = prepare(cfg)?;
    if params.input_dim() != data.dim() {
        bail!(
            "checkpoint expects {} input features but the dataset has {}",
            params.input_dim(),
            data.dim()
        );
    }
    if params.num_classes() != data.classes() || params.head_mode != data.labels.head_mode() {
        bail!(
            "checkpoint predicts {} classes ({:?}) but the dataset has {} ({:?})",
            params.num_classes(),
            params.head_mode,
            data.classes(),
            data.labels.head_mode()
        );
    }
    let rows: Vec<usize> = match which {
        EvalSplit::Train => parts.labeled.iter().chain(&parts.unlabeled).copied().collect(),
        EvalSplit::Val => parts.val.clone(),
        EvalSplit::Test => parts.test.clone(),
        EvalSplit::All => (0..data.len()).collect(),
    };
    if rows.is_empty() {
        bail!("the {which:?} split is empty");
    }
    Ok(evaluate_params(&params, &data.subset(&rows)?)?)
}

/// One ablation configuration over all seeds.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub switches: LossSwitches,
    /// Test metrics per seed, in seed order.
    pub runs: Vec<MetricsReport>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationRow {
    pub fn median_of(&self, f: impl Fn(&MetricsReport) -> f64) -> f64 {
        median(self.runs.iter().map(f).collect())
    }
}

pub fn switches_label(s: LossSwitches) -> String {
    let mut parts = vec!["L_s"];
    if s.use_lc {
        parts.push("L_c");
    }
    if s.use_lsc {
        parts.push("L_sc");
    }
    if s.use_ltc {
        parts.push("L_tc");
    }
    parts.join("+")
}

pub const ABLATION_HEADER: &str = "config,use_lc,use_lsc,use_ltc,seeds,accuracy,sensitivity,specificity,auc,f1";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let sw = r.switches;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            switches_label(sw),
            sw.use_lc as u8,
            sw.use_lsc as u8,
            sw.use_ltc as u8,
            r.runs.len(),
            r.median_of(|m| m.accuracy),
            r.median_of(|m| m.sensitivity),
            r.median_of(|m| m.specificity),
            r.median_of(|m| m.auc),
            r.median_of(|m| m.f1),
        ));
    }
    s
}

/// Trains `grid × seeds` runs on worker threads and returns the rows in grid
/// order. Seeds are `cfg.train.seed, +1, …`.
pub fn ablate_runs(cfg: &RunConfig, grid: &[LossSwitches], threads: usize) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..cfg.seeds).map(move |s| (g, s))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<MetricsReport>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = threads.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(g, s)) = jobs.get(i) else { break };
                let run = cfg.with_seed(cfg.train.seed + s as u64).with_switches(grid[g]);
                let r = train_in_memory(&run).map(|o| o.test);
                results.lock().expect("ablation results lock")[i] = Some(r);
            });
        }
    });
    let mut results = results.into_inner().expect("ablation results lock").into_iter();
    let mut rows = Vec::with_capacity(grid.len());
    for &switches in grid {
        let mut runs = Vec::with_capacity(cfg.seeds);
        for _ in 0..cfg.seeds {
            runs.push(results.next().flatten().context("ablation job did not finish")??);
        }
        rows.push(AblationRow { switches, runs });
    }
    Ok(rows)
}

/// `ablate`: the eight-configuration grid, written to `ablation.csv` plus a
/// per-seed `ablation_runs.csv`.
pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let rows = ablate_runs(cfg, &LossSwitches::grid(), threads)?;
    let mut manifest = cfg.clone();
    manifest.out = out.to_path_buf();
    manifest.tool_version = Some(TOOL_VERSION.to_string());
    formats::write_text(&out.join("manifest.txt"), &manifest.to_text())?;
    formats::write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    let mut per = format!("config,seed,{}\n", formats::REPORT_HEADER);
    for r in &rows {
        for (i, m) in r.runs.iter().enumerate() {
            per.push_str(&format!(
                "{},{},{}\n",
                switches_label(r.switches),
                cfg.train.seed + i as u64,
                formats::report_row(m)
            ));
        }
    }
    formats::write_text(&out.join("ablation_runs.csv"), &per)?;
    Ok(rows)
}

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// `gradcheck`: one line per loss term; `Ok(false)` when any term fails.
pub fn gradcheck(seed: u64, instances: usize, corrupt: bool) -> Result<(Vec<TermCheck>, bool)> {
    let fault = corrupt.then_some(("square", 1.5));
    let checks = loss_term_suite(seed, instances, GRADCHECK_EPS, fault)?;
    let ok = checks.iter().all(|c| c.passes(GRADCHECK_TOL));
    Ok((checks, ok))
}

pub fn gradcheck_line(c: &TermCheck) -> String {
    format!(
        "{:<5} instances {:>4}  max relative error {:.3e}  {}",
        c.term,
        c.instances,
        c.max_relative_error,
        if c.passes(GRADCHECK_TOL) { "PASS" } else { "FAIL" }
    )
}

/// `heatmap`: PGM renderings of an epoch's relation snapshots. Returns the
/// written paths (student, teacher, |difference|).
pub fn heatmap(run_dir: &Path, epoch: usize) -> Result<Vec<PathBuf>> {
    let dir = run_dir.join("relations");
    let name = epoch_name(epoch);
    let student = dir.join(format!("{name}_student.csv"));
    let teacher = dir.join(format!("{name}_teacher.csv"));
    if !student.exists() || !teacher.exists() {
        bail!("no relation snapshot for epoch {epoch} under {}", dir.display());
    }
    let (_, rs) = formats::load_relation_csv(&student)?;
    let (_, rt) = formats::load_relation_csv(&teacher)?;
    let diff = rs.sub(&rt)?.map(f64::abs);
    let mut written = Vec::new();
    for (tag, m) in [("student", &rs), ("teacher", &rt), ("diff", &diff)] {
        let p = dir.join(format!("{name}_{tag}.pgm"));
        formats::save_pgm(&p, &m.map(|v| v.max(0.0)))?;
        written.push(p);
    }
    Ok(written)
}

/// `gen-data`: writes the configured dataset as CSV.
pub fn gen_data(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    let data = load_dataset(&cfg.dataset, cfg.train.seed)?;
    formats::save_csv(path, &data)?;
    Ok(data)
}
