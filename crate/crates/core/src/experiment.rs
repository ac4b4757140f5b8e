//! Config-driven experiment suites: one run per (method, seed), resumable
//! by content hash, plus offline reports rebuilt from the run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::policy::{check_enumerable, PolicyModel, TabularSoftmax, TinyMlp};
use crate::rif::FilterConfig;
use crate::risk::{risk_trace, RiskMode, TraceConfig, TracePoint, IDENTITY_TOLERANCE};
use crate::seed;
use crate::task::{generate_task_stream, StreamConfig, TaskStream};
use crate::trainer::{
    compute_metrics, pretrain_base, run_continual, run_mtl, ContinualOptions, EstimatorConfig, Metrics,
    OptimizerConfig, PerfMatrix, PretrainConfig, RunRecord, TrainConfig,
};
use crate::estimators::KlMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Tabular,
    Mlp { hidden: usize },
}

impl PolicySpec {
    pub fn build(&self, stream: &TaskStream) -> Result<PolicyModel> {
        let (vocab, len, dim) = (stream.vocab.clone(), stream.max_len(), stream.context_dim());
        Ok(match self {
            PolicySpec::Tabular => PolicyModel::Tabular(TabularSoftmax::new(vocab, len, stream.n_buckets, dim)?),
            PolicySpec::Mlp { hidden } => PolicyModel::Mlp(TinyMlp::new(vocab, len, dim, *hidden)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: String,
    pub estimator: EstimatorConfig,
    pub optimizer: OptimizerConfig,
    /// Screen each task's examples before training on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterConfig>,
    /// Train on all tasks jointly instead of in sequence.
    #[serde(default)]
    pub joint: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Drop the KL penalty.
    #[serde(default)]
    pub kl_off: bool,
    /// Direct-answer format: no think block, accuracy-only reward.
    #[serde(default)]
    pub format_off: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_parallel() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub stream: StreamConfig,
    pub policy: PolicySpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    pub methods: Vec<MethodConfig>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub ablation: Ablation,
    /// Save θ every this many steps within a task (0: task boundaries only).
    #[serde(default)]
    pub snapshot_every: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads for the suite.
    #[serde(default = "default_parallel")]
    pub parallel: usize,
}

impl ExperimentConfig {
    /// Parses JSON, reporting the path of the offending field on failure,
    /// then checks every semantic constraint.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Schema(vec![format!("{path}: {}", e.inner())])
        })?;
        let errs = cfg.validate();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Schema(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.seeds.is_empty() {
            errs.push("seeds: at least one seed required".into());
        }
        if self.methods.is_empty() {
            errs.push("methods: at least one method required".into());
        }
        if self.parallel == 0 {
            errs.push("parallel: must be at least 1".into());
        }
        if let PolicySpec::Mlp { hidden: 0 } = self.policy {
            errs.push("policy.hidden: must be positive".into());
        }
        let stream = self.effective_stream();
        errs.extend(stream.validate().into_iter().map(|e| format!("stream.{e}")));
        let mut names = std::collections::HashSet::new();
        for (i, m) in self.methods.iter().enumerate() {
            let at = format!("methods[{i}]");
            if m.name.is_empty() || !m.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_".contains(c)) {
                errs.push(format!("{at}.name: {:?} must be non-empty [A-Za-z0-9_-]", m.name));
            }
            if !names.insert(&m.name) {
                errs.push(format!("{at}.name: duplicate method name {:?}", m.name));
            }
            errs.extend(m.estimator.validate().into_iter().map(|e| format!("{at}.estimator.{e}")));
            errs.extend(m.optimizer.validate().into_iter().map(|e| format!("{at}.optimizer.{e}")));
            if let Some(f) = &m.filter {
                errs.extend(f.validate().into_iter().map(|e| format!("{at}.filter.{e}")));
                if m.joint {
                    errs.push(format!("{at}.filter: filtering applies to sequential runs only"));
                }
            }
            let kl = self.effective_estimator(m).kl_config();
            if let Some(kl) = kl {
                if kl.mode == KlMode::Exact && errs.is_empty() {
                    if let Err(e) = check_enumerable(&stream.vocab().unwrap(), stream.max_len(), kl.enumeration_limit) {
                        errs.push(format!("{at}.estimator.kl_mode: exact KL impossible here ({e}); use monte_carlo"));
                    }
                }
            }
        }
        errs
    }

    pub fn effective_stream(&self) -> StreamConfig {
        if self.ablation.format_off {
            self.stream.with_format_off()
        } else {
            self.stream.clone()
        }
    }

    pub fn effective_estimator(&self, m: &MethodConfig) -> EstimatorConfig {
        let mut e = m.estimator.clone();
        if self.ablation.kl_off {
            e.kl_enabled = false;
        }
        e
    }

    /// Everything that determines one run's output.
    pub fn slice(&self, method: &MethodConfig, seed: u64) -> RunSlice {
        RunSlice {
            experiment: self.name.clone(),
            stream: self.effective_stream(),
            policy: self.policy.clone(),
            pretrain: self.pretrain.clone(),
            method: MethodConfig {
                estimator: self.effective_estimator(method),
                ..method.clone()
            },
            seed,
            snapshot_every: self.snapshot_every,
        }
    }
}

/// Configuration of a single run; its hash keys resumption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSlice {
    pub experiment: String,
    pub stream: StreamConfig,
    pub policy: PolicySpec,
    pub pretrain: PretrainConfig,
    pub method: MethodConfig,
    pub seed: u64,
    pub snapshot_every: usize,
}

const STREAM_SEED: u64 = 1;
const BASE_SEED: u64 = 2;
const RUN_SEED: u64 = 3;

impl RunSlice {
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// The task stream; shared by every method at this seed.
    pub fn stream(&self) -> Result<TaskStream> {
        generate_task_stream(&self.stream, seed::derive(self.seed, &[STREAM_SEED]))
    }

    /// Seed of the training run proper, after pretraining.
    pub fn run_seed(&self) -> u64 {
        seed::derive(self.seed, &[RUN_SEED])
    }

    pub fn execute(&self) -> Result<RunRecord> {
        let stream = self.stream()?;
        let policy = self.policy.build(&stream)?;
        let theta0 = pretrain_base(&policy, &stream, &self.pretrain, seed::derive(self.seed, &[BASE_SEED]))?;
        let cfg = TrainConfig {
            estimator: self.method.estimator.clone(),
            optimizer: self.method.optimizer.clone(),
            snapshot_every: self.snapshot_every,
        };
        let run_seed = self.run_seed();
        let snapshot = serde_json::to_value(self)?;
        if self.method.joint {
            run_mtl(&self.method.name, &policy, &theta0, &stream.tasks, &cfg, run_seed, snapshot)
        } else {
            let options = ContinualOptions {
                filter: self.method.filter.as_ref(),
            };
            run_continual(&self.method.name, &policy, &theta0, &stream.tasks, &cfg, run_seed, &options, snapshot)
        }
        .map(|mut r| {
            r.seed = self.seed;
            r
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub method: String,
    pub seed: u64,
    pub dir: PathBuf,
    /// Already complete with a matching hash; nothing was trained.
    pub reused: bool,
    pub failure: Option<String>,
}

pub fn run_dir(out: &Path, method: &str, seed: u64) -> PathBuf {
    out.join(method).join(format!("seed_{seed}"))
}

const HASH_FILE: &str = "config.sha256";

fn is_complete_with_hash(dir: &Path, hash: &str) -> bool {
    let status_ok = fs::read_to_string(dir.join("status.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .is_some_and(|v| v["complete"] == serde_json::Value::Bool(true));
    status_ok && fs::read_to_string(dir.join(HASH_FILE)).is_ok_and(|h| h.trim() == hash)
}

/// Runs every (method, seed) pair on a pool of `parallel` workers. Runs
/// whose directory already holds a complete record with the same config
/// hash are skipped.
pub fn run_suite(cfg: &ExperimentConfig, out: &Path, parallel: usize) -> Result<Vec<RunOutcome>> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Schema(errs));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("experiment.json"), cfg.to_json()?)?;
    let jobs: Vec<RunSlice> = cfg
        .methods
        .iter()
        .flat_map(|m| cfg.seeds.iter().map(move |&s| cfg.slice(m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|slice| {
                let dir = run_dir(out, &slice.method.name, slice.seed);
                let hash = slice.hash()?;
                if is_complete_with_hash(&dir, &hash) {
                    return Ok(RunOutcome {
                        method: slice.method.name.clone(),
                        seed: slice.seed,
                        dir,
                        reused: true,
                        failure: None,
                    });
                }
                if dir.exists() {
                    fs::remove_dir_all(&dir)?;
                }
                let record = slice.execute()?;
                record.save(&dir)?;
                fs::write(dir.join(HASH_FILE), &hash)?;
                Ok(RunOutcome {
                    method: slice.method.name.clone(),
                    seed: slice.seed,
                    dir,
                    reused: false,
                    failure: record.failure,
                })
            })
            .collect()
    })
}

/// Median and interquartile range over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub iqr: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Summary {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Summary {
        median: quantile(&v, 0.5),
        iqr: quantile(&v, 0.75) - quantile(&v, 0.25),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub n_seeds: usize,
    /// Final accuracy per task.
    pub tasks: Vec<Summary>,
    pub avg_acc: Summary,
    pub fm: Summary,
    /// Training instances seen, as a fraction of the full stream (filtered runs only).
    pub data_kept: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub n_tasks: usize,
    pub rows: Vec<TableRow>,
}

/// Loaded run plus the metrics recomputed from its `perf_matrix.csv`.
#[derive(Clone, Debug)]
pub struct CheckedRun {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub metrics: Metrics,
}

pub const METRIC_TOLERANCE: f64 = 1e-9;

/// Loads a run directory and checks the stored metrics against the
/// performance matrix.
pub fn load_checked(dir: &Path) -> Result<CheckedRun> {
    let record = RunRecord::load(dir)?;
    if !record.is_complete() {
        return Err(invalid(format!(
            "{} is not a complete run: {}",
            dir.display(),
            record.failure.as_deref().unwrap_or("missing rows")
        )));
    }
    let perf = PerfMatrix::read_csv(&dir.join("perf_matrix.csv"))?;
    let metrics = compute_metrics(&perf)?;
    let stored: Metrics = serde_json::from_str(&fs::read_to_string(dir.join("metrics.json"))?)?;
    if (stored.avg_acc - metrics.avg_acc).abs() > METRIC_TOLERANCE || (stored.fm - metrics.fm).abs() > METRIC_TOLERANCE {
        return Err(Error::Integrity(format!(
            "{}: metrics.json {:?} disagrees with perf_matrix.csv {:?}",
            dir.display(),
            stored,
            metrics
        )));
    }
    Ok(CheckedRun {
        dir: dir.to_path_buf(),
        record,
        metrics,
    })
}

/// Finds run directories (those with a `status.json`) under `roots`.
pub fn discover_runs(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        if dir.join("status.json").is_file() {
            out.push(dir.to_path_buf());
            return Ok(());
        }
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for e in entries {
            walk(&e, out)?;
        }
        Ok(())
    }
    let mut out = Vec::new();
    for r in roots {
        walk(r, &mut out)?;
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Table over runs grouped by method, rows in order of first appearance
/// after sorting by method name.
pub fn make_table(runs: &[CheckedRun]) -> Result<ReportTable> {
    let first = runs.first().ok_or_else(|| invalid("no runs to tabulate"))?;
    let n_tasks = first.record.perf.n_tasks;
    if let Some(r) = runs.iter().find(|r| r.record.perf.n_tasks != n_tasks) {
        return Err(invalid(format!(
            "{} has {} tasks, expected {n_tasks}",
            r.dir.display(),
            r.record.perf.n_tasks
        )));
    }
    let mut by_method: BTreeMap<&str, Vec<&CheckedRun>> = BTreeMap::new();
    for r in runs {
        by_method.entry(&r.record.method).or_default().push(r);
    }
    let rows = by_method
        .into_iter()
        .map(|(method, group)| {
            let col = |f: &dyn Fn(&CheckedRun) -> f64| summarize(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            let tasks = (0..n_tasks)
                .map(|j| col(&|r| r.record.perf.final_row().unwrap()[j]))
                .collect();
            let data_kept = group.iter().all(|r| !r.record.filters.is_empty()).then(|| {
                col(&|r| {
                    let kept: usize = r.record.filters.iter().map(|f| f.n_kept).sum();
                    let total: usize = r.record.filters.iter().map(|f| f.n_input).sum();
                    kept as f64 / total as f64
                })
            });
            TableRow {
                method: method.to_string(),
                n_seeds: group.len(),
                tasks,
                avg_acc: col(&|r| r.metrics.avg_acc),
                fm: col(&|r| r.metrics.fm),
                data_kept,
            }
        })
        .collect();
    Ok(ReportTable { n_tasks, rows })
}

impl ReportTable {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["method".to_string(), "seeds".to_string()];
        h.extend((0..self.n_tasks).map(|j| format!("task_{j}")));
        h.extend(["avg_acc", "fm", "data_kept"].map(String::from));
        h
    }

    fn cells(&self, row: &TableRow) -> Vec<String> {
        let fmt = |s: &Summary| format!("{:.4} ± {:.4}", s.median, s.iqr);
        let mut c = vec![row.method.clone(), row.n_seeds.to_string()];
        c.extend(row.tasks.iter().map(fmt));
        c.push(fmt(&row.avg_acc));
        c.push(fmt(&row.fm));
        c.push(row.data_kept.as_ref().map(fmt).unwrap_or_default());
        c
    }

    /// RFC 4180 CSV with separate median and IQR columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["method".to_string(), "seeds".to_string()];
        for name in (0..self.n_tasks).map(|j| format!("task_{j}")).chain(["avg_acc", "fm", "data_kept"].map(String::from)) {
            header.push(format!("{name}_median"));
            header.push(format!("{name}_iqr"));
        }
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.method.clone(), row.n_seeds.to_string()];
            for s in row.tasks.iter().chain([&row.avg_acc, &row.fm]) {
                rec.push(s.median.to_string());
                rec.push(s.iqr.to_string());
            }
            match &row.data_kept {
                Some(s) => rec.extend([s.median.to_string(), s.iqr.to_string()]),
                None => rec.extend([String::new(), String::new()]),
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Column-aligned plain-text rendering (median ± IQR).
    pub fn render_text(&self) -> String {
        let mut table = vec![self.header()];
        table.extend(self.rows.iter().map(|r| self.cells(r)));
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// Exact-mode attestation written next to a risk trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub points: usize,
    pub exact_points: usize,
    pub monte_carlo_samples: usize,
    pub enumeration_limit: u64,
    pub identity_tolerance: f64,
    /// Largest residual among exact-mode probes.
    pub max_exact_residual: f64,
    /// All exact-mode residuals are within tolerance; Monte Carlo residuals are not asserted.
    pub identity_holds: bool,
}

/// Rebuilds the stream of a run and writes `risk_trace.csv` and
/// `risk_summary.json` into its directory.
pub fn make_risk_report(dir: &Path, cfg: &TraceConfig) -> Result<(Vec<TracePoint>, RiskSummary)> {
    let record = RunRecord::load(dir)?;
    let slice: RunSlice = serde_json::from_value(record.config.clone())?;
    let stream = slice.stream()?;
    let points = risk_trace(&record, &stream.tasks, cfg)?;
    let mut w = csv::Writer::from_path(dir.join("risk_trace.csv"))?;
    w.write_record([
        "task", "step", "R_sft", "E_R_rft", "var_r", "eps1", "delta", "error_term", "residual", "mode", "residual_asserted",
    ])?;
    for p in &points {
        let exact = p.mode == RiskMode::Exact;
        w.write_record([
            p.task.to_string(),
            p.step.to_string(),
            p.r_sft.to_string(),
            p.e_r_rft.to_string(),
            p.var_r.to_string(),
            p.eps1.to_string(),
            p.delta.to_string(),
            p.error_term.to_string(),
            p.max_abs_residual.to_string(),
            if exact { "exact" } else { "monte_carlo" }.to_string(),
            exact.to_string(),
        ])?;
    }
    w.flush()?;
    let exact: Vec<&TracePoint> = points.iter().filter(|p| p.mode == RiskMode::Exact).collect();
    let max_exact_residual = exact.iter().map(|p| p.max_abs_residual).fold(0.0, f64::max);
    let summary = RiskSummary {
        points: points.len(),
        exact_points: exact.len(),
        monte_carlo_samples: cfg.risk.mc_samples,
        enumeration_limit: cfg.risk.enumeration_limit,
        identity_tolerance: IDENTITY_TOLERANCE,
        max_exact_residual,
        identity_holds: max_exact_residual <= IDENTITY_TOLERANCE,
    };
    fs::write(dir.join("risk_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok((points, summary))
}
