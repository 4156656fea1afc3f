//! Run persistence and result aggregation: per-run directories with
//! manifests and checkpoints, a resumable sweep executor, POVE summary
//! tables with FDR-controlled significance, paired comparisons against a
//! baseline variation, signal correlation matrices, and learning-curve files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{Dataset, SplitSpec};
use crate::encoder::{EncoderConfig, Vocabulary};
use crate::signals::Signal;
use crate::stats::{self, PairedOutcome, PairedSample, Tail};
use crate::tape::ParameterSet;
use crate::train::{self, RunResult, TrainOptions, TrainingVariation};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad manifest at {path}: {msg}")]
    BadManifest { path: PathBuf, msg: String },
    #[error("config hash mismatch: {found} in {path} vs expected {expected}")]
    ConfigMismatch { path: PathBuf, found: String, expected: String },
    #[error("paired runs disagree on splits for run {run}: {a} vs {b}")]
    SplitMismatch { run: usize, a: String, b: String },
    #[error("no completed runs found for variation {0}")]
    NoRuns(String),
    #[error("{failed} of {total} sweep jobs failed; first error: {first}")]
    SweepFailures { failed: usize, total: usize, first: String },
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ReportError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.to_path_buf(), source }
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub run_index: usize,
    pub variation: TrainingVariation,
    pub split_hash: String,
    /// Digest of the full resolved configuration that produced this run.
    pub config_hash: String,
    pub complete: bool,
}

/// A completed run as read back from disk.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub manifest: RunManifest,
    pub result: RunResult,
    pub dir: PathBuf,
}

/// Append-only on-disk store: `<root>/<variation label>/run_<index>/` holds
/// manifest.json, result.json, metrics.tsv, and ckpt.bin.
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, variation: &TrainingVariation, run_index: usize) -> PathBuf {
        self.root
            .join(format!("{}__{}", variation.target, variation.label()))
            .join(format!("run_{run_index:03}"))
    }

    /// Whether a run already finished (its manifest says complete).
    pub fn is_complete(&self, variation: &TrainingVariation, run_index: usize) -> bool {
        let path = self.run_dir(variation, run_index).join("manifest.json");
        fs::read_to_string(&path)
            .ok()
            .and_then(|s| serde_json::from_str::<RunManifest>(&s).ok())
            .map_or(false, |m| m.complete)
    }

    pub fn save_run(
        &self,
        result: &RunResult,
        params: &ParameterSet<f32>,
        master_seed: u64,
        config_hash: &str,
    ) -> Result<PathBuf> {
        let dir = self.run_dir(&result.variation, result.run_index);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;

        let result_path = dir.join("result.json");
        fs::write(&result_path, serde_json::to_vec_pretty(result)?).map_err(io_err(&result_path))?;

        let metrics_path = dir.join("metrics.tsv");
        let mut out = String::from("epoch\tphase\tsignal\tmse\n");
        for epoch in &result.epochs {
            for (phase, table) in [("train", &epoch.train_mse), ("val", &epoch.val_mse)] {
                for (sig, mse) in table {
                    out.push_str(&format!("{}\t{phase}\t{sig}\t{mse:.17e}\n", epoch.epoch));
                }
            }
        }
        fs::write(&metrics_path, out).map_err(io_err(&metrics_path))?;

        let header = serde_json::to_string(&serde_json::json!({
            "format": "wordsig-run/1",
            "variation": result.variation,
            "run_index": result.run_index,
        }))?;
        checkpoint::save(&dir.join("ckpt.bin"), &header, params)?;

        // manifest last: its presence with complete=true marks the run done
        let manifest = RunManifest {
            format_version: MANIFEST_VERSION,
            master_seed,
            run_index: result.run_index,
            variation: result.variation.clone(),
            split_hash: result.split_hash.clone(),
            config_hash: config_hash.to_string(),
            complete: true,
        };
        let manifest_path = dir.join("manifest.json");
        fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&manifest_path))?;
        Ok(dir)
    }

    /// Read every completed run, verifying that all runs share one config hash.
    pub fn load_all(&self) -> Result<Vec<RunRecord>> {
        let mut records = Vec::new();
        if !self.root.exists() {
            return Ok(records);
        }
        let mut expected_hash: Option<String> = None;
        let mut var_dirs: Vec<PathBuf> = fs::read_dir(&self.root)
            .map_err(io_err(&self.root))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        var_dirs.sort();
        for var_dir in var_dirs {
            let mut run_dirs: Vec<PathBuf> = fs::read_dir(&var_dir)
                .map_err(io_err(&var_dir))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_dir())
                .collect();
            run_dirs.sort();
            for dir in run_dirs {
                let manifest_path = dir.join("manifest.json");
                if !manifest_path.exists() {
                    continue; // incomplete run; resumable later
                }
                let raw = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
                let manifest: RunManifest = serde_json::from_str(&raw).map_err(|e| {
                    ReportError::BadManifest { path: manifest_path.clone(), msg: e.to_string() }
                })?;
                if !manifest.complete {
                    continue;
                }
                match &expected_hash {
                    None => expected_hash = Some(manifest.config_hash.clone()),
                    Some(h) if *h != manifest.config_hash => {
                        return Err(ReportError::ConfigMismatch {
                            path: manifest_path,
                            found: manifest.config_hash,
                            expected: h.clone(),
                        });
                    }
                    _ => {}
                }
                let result_path = dir.join("result.json");
                let raw = fs::read_to_string(&result_path).map_err(io_err(&result_path))?;
                let result: RunResult = serde_json::from_str(&raw)?;
                records.push(RunRecord { manifest, result, dir });
            }
        }
        Ok(records)
    }
}

// ---------------------------------------------------------------------------
// Sweep executor
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SweepJob {
    pub variation: TrainingVariation,
    pub run_index: usize,
}

/// Cartesian job list: every variation for every run index.
pub fn sweep_jobs(variations: &[TrainingVariation], runs: usize) -> Vec<SweepJob> {
    let mut jobs = Vec::with_capacity(variations.len() * runs);
    for variation in variations {
        for run_index in 0..runs {
            jobs.push(SweepJob { variation: variation.clone(), run_index });
        }
    }
    jobs
}

#[derive(Debug, Default)]
pub struct SweepSummary {
    pub executed: usize,
    pub skipped: usize,
}

/// Run all jobs, skipping completed ones, with at most `workers` in flight.
/// Each worker owns its single-threaded numerics; only whole runs run in
/// parallel, so every run stays bit-reproducible.
pub fn execute_sweep(
    store: &RunStore,
    dataset: &Dataset,
    vocab: &Vocabulary,
    encoder_cfg: &EncoderConfig,
    encoder_params: &ParameterSet<f32>,
    jobs: &[SweepJob],
    base_opts: &TrainOptions,
    config_hash: &str,
    workers: usize,
) -> Result<SweepSummary> {
    let pending: Vec<&SweepJob> = jobs
        .iter()
        .filter(|j| !store.is_complete(&j.variation, j.run_index))
        .collect();
    let skipped = jobs.len() - pending.len();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    let outcomes: Vec<std::result::Result<(), String>> = pool.install(|| {
        pending
            .par_iter()
            .map(|job| {
                let opts = TrainOptions { run_index: job.run_index, ..base_opts.clone() };
                let (result, params) =
                    train::train_run(dataset, vocab, encoder_cfg, encoder_params, &job.variation, &opts)
                        .map_err(|e| format!("{}/run {}: {e}", job.variation.label(), job.run_index))?;
                store
                    .save_run(&result, &params, opts.master_seed, config_hash)
                    .map_err(|e| format!("{}/run {}: {e}", job.variation.label(), job.run_index))?;
                Ok(())
            })
            .collect()
    });

    let failures: Vec<&String> = outcomes.iter().filter_map(|o| o.as_ref().err()).collect();
    if let Some(first) = failures.first() {
        return Err(ReportError::SweepFailures {
            failed: failures.len(),
            total: pending.len(),
            first: (*first).clone(),
        });
    }
    Ok(SweepSummary { executed: pending.len(), skipped })
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

fn group_by_variation(records: &[RunRecord]) -> BTreeMap<TrainingVariation, Vec<&RunRecord>> {
    let mut groups: BTreeMap<TrainingVariation, Vec<&RunRecord>> = BTreeMap::new();
    for rec in records {
        groups.entry(rec.result.variation.clone()).or_default().push(rec);
    }
    for runs in groups.values_mut() {
        runs.sort_by_key(|r| r.result.run_index);
    }
    groups
}

#[derive(Clone, Debug, Serialize)]
pub struct PoveSummaryRow {
    pub variation: String,
    pub target: Signal,
    pub signal: Signal,
    pub runs: usize,
    pub mean_pove: f64,
    pub t: f64,
    pub p: f64,
    pub significant: bool,
}

/// Mean POVE per (variation, signal) with a one-sided test of mean POVE > 0,
/// FDR-controlled across all rows of the table.
pub fn pove_summary(records: &[RunRecord], q: f64) -> Result<Vec<PoveSummaryRow>> {
    let groups = group_by_variation(records);
    let mut rows = Vec::new();
    let mut pvalues = Vec::new();
    for (variation, runs) in &groups {
        let mut by_signal: BTreeMap<Signal, Vec<f64>> = BTreeMap::new();
        for rec in runs {
            for (&sig, &pove) in &rec.result.final_pove {
                by_signal.entry(sig).or_default().push(pove);
            }
        }
        for (sig, values) in by_signal {
            if values.len() < 2 {
                continue;
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let (t, p) = stats::one_sample_ttest_tailed(&values, 0.0, Tail::Greater)?;
            rows.push(PoveSummaryRow {
                variation: variation.label(),
                target: variation.target,
                signal: sig,
                runs: values.len(),
                mean_pove: mean,
                t,
                p,
                significant: false,
            });
            pvalues.push(p);
        }
    }
    if rows.is_empty() {
        return Ok(rows);
    }
    let rejected = stats::bhy_adjust(&pvalues, q)?;
    for (row, rej) in rows.iter_mut().zip(rejected) {
        row.significant = rej;
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRow {
    pub target: Signal,
    pub variation: String,
    pub baseline: String,
    pub runs: usize,
    pub mean_delta: f64,
    /// t statistic; absent when the difference was deterministic.
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub deterministic: bool,
    pub significant: bool,
}

/// Paired comparison of each multi-signal variation against the target-only
/// baseline, pairing runs by index (and verifying the splits agree). Tests
/// whether the variation's POVE on the target exceeds the baseline's.
pub fn compare_to_baselines(records: &[RunRecord], q: f64) -> Result<Vec<ComparisonRow>> {
    let groups = group_by_variation(records);
    let mut rows = Vec::new();
    let mut pvalues = Vec::new();
    let mut testable = Vec::new();
    for (variation, runs) in &groups {
        if variation.included.len() < 2 {
            continue;
        }
        let baseline_var = TrainingVariation::singleton(variation.target);
        let baseline = match groups.get(&baseline_var) {
            Some(b) => b,
            None => continue,
        };
        let by_index: BTreeMap<usize, &RunRecord> =
            baseline.iter().map(|r| (r.result.run_index, *r)).collect();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for rec in runs {
            let base = match by_index.get(&rec.result.run_index) {
                Some(b) => b,
                None => continue,
            };
            if base.result.split_hash != rec.result.split_hash {
                return Err(ReportError::SplitMismatch {
                    run: rec.result.run_index,
                    a: rec.result.split_hash.clone(),
                    b: base.result.split_hash.clone(),
                });
            }
            if let (Some(&va), Some(&vb)) = (
                rec.result.final_pove.get(&variation.target),
                base.result.final_pove.get(&variation.target),
            ) {
                a.push(va);
                b.push(vb);
            }
        }
        if a.len() < 2 {
            continue;
        }
        let n = a.len();
        let mean_delta = a.iter().zip(&b).map(|(x, y)| x - y).sum::<f64>() / n as f64;
        let sample = PairedSample::new(a, b)?;
        match stats::paired_ttest_tailed(&sample, Tail::Greater)? {
            PairedOutcome::Test { t, p } => {
                rows.push(ComparisonRow {
                    target: variation.target,
                    variation: variation.label(),
                    baseline: baseline_var.label(),
                    runs: n,
                    mean_delta,
                    t: Some(t),
                    p: Some(p),
                    deterministic: false,
                    significant: false,
                });
                pvalues.push(p);
                testable.push(rows.len() - 1);
            }
            PairedOutcome::DeterministicallyDifferent { mean_diff } => {
                rows.push(ComparisonRow {
                    target: variation.target,
                    variation: variation.label(),
                    baseline: baseline_var.label(),
                    runs: n,
                    mean_delta: mean_diff,
                    t: None,
                    p: None,
                    deterministic: true,
                    significant: false,
                });
            }
        }
    }
    if !pvalues.is_empty() {
        let rejected = stats::bhy_adjust(&pvalues, q)?;
        for (&idx, rej) in testable.iter().zip(rejected) {
            rows[idx].significant = rej;
        }
    }
    Ok(rows)
}

pub fn write_pove_summary(path: &Path, rows: &[PoveSummaryRow]) -> Result<()> {
    let mut out = String::from("variation\ttarget\tsignal\truns\tmean_pove\tt\tp\tsignificant\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6e}\t{}\n",
            r.variation,
            r.target,
            r.signal,
            r.runs,
            r.mean_pove,
            r.t,
            r.p,
            if r.significant { "*" } else { "" }
        ));
    }
    fs::write(path, out).map_err(io_err(path))?;
    Ok(())
}

pub fn write_comparisons(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut out =
        String::from("target\tvariation\tbaseline\truns\tmean_delta\tt\tp\tdeterministic\tsignificant\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\n",
            r.target,
            r.variation,
            r.baseline,
            r.runs,
            r.mean_delta,
            r.t.map_or(String::new(), |t| format!("{t:.6}")),
            r.p.map_or(String::new(), |p| format!("{p:.6e}")),
            if r.deterministic { "yes" } else { "no" },
            if r.significant { "*" } else { "" }
        ));
    }
    fs::write(path, out).map_err(io_err(path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Correlations
// ---------------------------------------------------------------------------

/// Pearson correlations between all signal pairs of the averaged,
/// standardized series, over content words with both values present.
pub fn correlation_matrix(dataset: &Dataset) -> Result<Vec<(Signal, Signal, f64)>> {
    let all: Vec<usize> = dataset.sentence_ids();
    let split = SplitSpec {
        run_index: 0,
        master_seed: 0,
        test_sentences: Default::default(),
        train_sentences: all,
    };
    let (averaged, _) = crate::data::standardize_and_average(dataset, &split)?;
    let mut out = Vec::new();
    for (i, &a) in dataset.signals.iter().enumerate() {
        for &b in &dataset.signals[i + 1..] {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for sent in &dataset.sentences {
                for (w, tok) in sent.tokens.iter().enumerate() {
                    if !tok.is_content() {
                        continue;
                    }
                    if let (Some(x), Some(y)) = (averaged.get(sent.id, w, a), averaged.get(sent.id, w, b)) {
                        xs.push(x);
                        ys.push(y);
                    }
                }
            }
            if xs.len() >= 2 {
                out.push((a, b, stats::pearson(&xs, &ys)?));
            }
        }
    }
    Ok(out)
}

pub fn write_correlations(path: &Path, rows: &[(Signal, Signal, f64)]) -> Result<()> {
    let mut out = String::from("signal_a\tsignal_b\tr\n");
    for (a, b, r) in rows {
        out.push_str(&format!("{a}\t{b}\t{r:.4}\n"));
    }
    fs::write(path, out).map_err(io_err(path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Learning curves
// ---------------------------------------------------------------------------

/// Mean train/val MSE per epoch across a variation's runs, for one signal.
fn mean_curve(runs: &[&RunRecord], signal: Signal) -> Vec<(usize, f64, f64)> {
    let epochs = runs.iter().map(|r| r.result.epochs.len()).min().unwrap_or(0);
    (0..epochs)
        .filter_map(|e| {
            let mut train = Vec::new();
            let mut val = Vec::new();
            for r in runs {
                let m = &r.result.epochs[e];
                if let (Some(&t), Some(&v)) = (m.train_mse.get(&signal), m.val_mse.get(&signal)) {
                    train.push(t);
                    val.push(v);
                }
            }
            if train.is_empty() {
                return None;
            }
            let tm = train.iter().sum::<f64>() / train.len() as f64;
            let vm = val.iter().sum::<f64>() / val.len() as f64;
            Some((e, tm, vm))
        })
        .collect()
}

/// For each signal trained both alone and inside `joint`, write three curve
/// files: the independent series, the joint series, and their per-epoch
/// difference (joint minus independent).
pub fn write_curves(dir: &Path, records: &[RunRecord], joint: &TrainingVariation) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let groups = group_by_variation(records);
    let joint_runs = groups
        .get(joint)
        .ok_or_else(|| ReportError::NoRuns(joint.label()))?;
    let mut written = Vec::new();
    for &sig in &joint.included {
        let indep_var = TrainingVariation::singleton(sig);
        let indep_runs = match groups.get(&indep_var) {
            Some(r) => r,
            None => continue,
        };
        let indep = mean_curve(indep_runs, sig);
        let joint_c = mean_curve(joint_runs, sig);
        let series: [(&str, &Vec<(usize, f64, f64)>); 2] =
            [("independent", &indep), ("joint", &joint_c)];
        for (name, curve) in series {
            let path = dir.join(format!("{sig}_{name}.tsv"));
            let mut out = String::from("epoch\ttrain_mse\tval_mse\n");
            for (e, t, v) in curve.iter() {
                out.push_str(&format!("{e}\t{t:.17e}\t{v:.17e}\n"));
            }
            fs::write(&path, out).map_err(io_err(&path))?;
            written.push(path);
        }
        let path = dir.join(format!("{sig}_difference.tsv"));
        let mut out = String::from("epoch\ttrain_mse_delta\tval_mse_delta\n");
        for ((e, jt, jv), (_, it, iv)) in joint_c.iter().zip(indep.iter()) {
            out.push_str(&format!("{e}\t{:.17e}\t{:.17e}\n", jt - it, jv - iv));
        }
        fs::write(&path, out).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

/// Best ERP combination per target: the multi-signal variation with the
/// highest mean POVE on that target.
pub fn best_combination(records: &[RunRecord], target: Signal) -> Option<TrainingVariation> {
    let groups = group_by_variation(records);
    groups
        .iter()
        .filter(|(v, runs)| v.target == target && v.included.len() > 1 && !runs.is_empty())
        .map(|(v, runs)| {
            let mean = runs
                .iter()
                .filter_map(|r| r.result.final_pove.get(&target))
                .sum::<f64>()
                / runs.len() as f64;
            (v.clone(), mean)
        })
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(v, _)| v)
}

/// Plain-text report over a results directory; returns the written files.
pub fn write_report(store: &RunStore, out_dir: &Path, q: f64) -> Result<Vec<PathBuf>> {
    let records = store.load_all()?;
    if records.is_empty() {
        return Err(ReportError::NoRuns(store.root().display().to_string()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();

    let summary = pove_summary(&records, q)?;
    let path = out_dir.join("pove_summary.tsv");
    write_pove_summary(&path, &summary)?;
    written.push(path);

    let comparisons = compare_to_baselines(&records, q)?;
    let path = out_dir.join("comparisons.tsv");
    write_comparisons(&path, &comparisons)?;
    written.push(path);

    // curve files for the largest variation that has singleton counterparts
    let groups = group_by_variation(&records);
    if let Some(joint) = groups
        .keys()
        .filter(|v| {
            v.included.len() > 1
                && v.included
                    .iter()
                    .any(|&s| groups.contains_key(&TrainingVariation::singleton(s)))
        })
        .max_by_key(|v| v.included.len())
        .cloned()
    {
        let mut files = write_curves(&out_dir.join("curves"), &records, &joint)?;
        written.append(&mut files);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::EpochMetrics;

    fn fake_result(variation: TrainingVariation, run_index: usize, pove: f64) -> RunResult {
        let mut final_pove = BTreeMap::new();
        for &s in &variation.included {
            final_pove.insert(s, pove);
        }
        let mut epochs = Vec::new();
        for e in 0..3 {
            let mut train_mse = BTreeMap::new();
            let mut val_mse = BTreeMap::new();
            for &s in &variation.included {
                train_mse.insert(s, 1.0 / (e + 1) as f64);
                val_mse.insert(s, 1.2 / (e + 1) as f64);
            }
            epochs.push(EpochMetrics { epoch: e, train_mse, val_mse });
        }
        RunResult {
            run_index,
            variation,
            split_hash: format!("hash-{run_index}"),
            epochs,
            final_pove,
        }
    }

    fn store_with_runs(dir: &Path, results: &[RunResult]) -> RunStore {
        let store = RunStore::new(dir);
        for r in results {
            let mut params: ParameterSet<f32> = ParameterSet::new();
            params.insert("dec.conv.b", crate::tensor::Tensor::zeros(vec![2]));
            store.save_run(r, &params, 7, "cfg-hash").unwrap();
        }
        store
    }

    #[test]
    fn save_and_load_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let v = TrainingVariation::singleton(Signal::N400);
        let store = store_with_runs(tmp.path(), &[fake_result(v.clone(), 0, 0.1)]);
        assert!(store.is_complete(&v, 0));
        assert!(!store.is_complete(&v, 1));
        let records = store.load_all().unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].result.final_pove[&Signal::N400], 0.1);
    }

    #[test]
    fn mismatched_config_hash_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let store = RunStore::new(tmp.path());
        let mut params: ParameterSet<f32> = ParameterSet::new();
        params.insert("x", crate::tensor::Tensor::zeros(vec![1]));
        let a = fake_result(TrainingVariation::singleton(Signal::N400), 0, 0.1);
        let b = fake_result(TrainingVariation::singleton(Signal::P600), 0, 0.1);
        store.save_run(&a, &params, 7, "hash-one").unwrap();
        store.save_run(&b, &params, 7, "hash-two").unwrap();
        assert!(matches!(store.load_all(), Err(ReportError::ConfigMismatch { .. })));
    }

    #[test]
    fn pove_summary_flags_consistent_gains() {
        let tmp = tempfile::tempdir().unwrap();
        let v = TrainingVariation::singleton(Signal::N400);
        let results: Vec<RunResult> = (0..10)
            .map(|i| fake_result(v.clone(), i, 0.2 + 0.001 * i as f64))
            .collect();
        let store = store_with_runs(tmp.path(), &results);
        let rows = pove_summary(&store.load_all().unwrap(), 0.01).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].significant, "p = {}", rows[0].p);
        assert!((rows[0].mean_pove - 0.2045).abs() < 1e-12);
    }

    #[test]
    fn comparisons_pair_by_run_index() {
        let tmp = tempfile::tempdir().unwrap();
        let single = TrainingVariation::singleton(Signal::N400);
        let joint =
            TrainingVariation::new(vec![Signal::N400, Signal::P600], Signal::N400).unwrap();
        let mut results = Vec::new();
        for i in 0..8 {
            results.push(fake_result(single.clone(), i, 0.25 * (i % 3) as f64));
            results.push(fake_result(joint.clone(), i, 0.5 + 0.25 * (i % 3) as f64));
        }
        let store = store_with_runs(tmp.path(), &results);
        let rows = compare_to_baselines(&store.load_all().unwrap(), 0.01).unwrap();
        assert_eq!(rows.len(), 1);
        // identical +0.5 shift on every pair is deterministic improvement
        assert!(rows[0].deterministic);
        assert!((rows[0].mean_delta - 0.5).abs() < 1e-12);
    }

    #[test]
    fn split_mismatch_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let single = TrainingVariation::singleton(Signal::N400);
        let joint =
            TrainingVariation::new(vec![Signal::N400, Signal::P600], Signal::N400).unwrap();
        let mut results = Vec::new();
        for i in 0..3 {
            results.push(fake_result(single.clone(), i, 0.1));
            let mut r = fake_result(joint.clone(), i, 0.2);
            r.split_hash = format!("other-{i}");
            results.push(r);
        }
        let store = store_with_runs(tmp.path(), &results);
        assert!(matches!(
            compare_to_baselines(&store.load_all().unwrap(), 0.01),
            Err(ReportError::SplitMismatch { .. })
        ));
    }

    #[test]
    fn curve_files_cover_all_three_series() {
        let tmp = tempfile::tempdir().unwrap();
        let single = TrainingVariation::singleton(Signal::N400);
        let joint =
            TrainingVariation::new(vec![Signal::N400, Signal::P600], Signal::N400).unwrap();
        let mut results = Vec::new();
        for i in 0..2 {
            results.push(fake_result(single.clone(), i, 0.1));
            results.push(fake_result(joint.clone(), i, 0.2));
        }
        let store = store_with_runs(tmp.path(), &results);
        let records = store.load_all().unwrap();
        let dir = tmp.path().join("curves");
        let files = write_curves(&dir, &records, &joint).unwrap();
        let names: Vec<String> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert!(names.contains(&"N400_independent.tsv".to_string()));
        assert!(names.contains(&"N400_joint.tsv".to_string()));
        assert!(names.contains(&"N400_difference.tsv".to_string()));
        // P600 has no singleton runs, so no curves for it
        assert!(!names.iter().any(|n| n.starts_with("P600")));
        let diff = fs::read_to_string(dir.join("N400_difference.tsv")).unwrap();
        assert_eq!(diff.lines().count(), 4); // header + 3 epochs
    }

    #[test]
    fn best_combination_picks_highest_mean() {
        let tmp = tempfile::tempdir().unwrap();
        let a = TrainingVariation::new(vec![Signal::N400, Signal::P600], Signal::N400).unwrap();
        let b = TrainingVariation::new(vec![Signal::Elan, Signal::N400], Signal::N400).unwrap();
        let mut results = Vec::new();
        for i in 0..3 {
            results.push(fake_result(a.clone(), i, 0.3));
            results.push(fake_result(b.clone(), i, 0.1));
        }
        let store = store_with_runs(tmp.path(), &results);
        let best = best_combination(&store.load_all().unwrap(), Signal::N400).unwrap();
        assert_eq!(best, a);
    }

    #[test]
    fn sweep_jobs_cover_product() {
        let vars = vec![
            TrainingVariation::singleton(Signal::N400),
            TrainingVariation::singleton(Signal::P600),
        ];
        let jobs = sweep_jobs(&vars, 3);
        assert_eq!(jobs.len(), 6);
    }
}
