//! Evaluation harness: sampler × budget sweeps over a dataset manifest,
//! per-pair records, summary reports and recall-vs-memory plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::estimator::{EpochLog, EstimatorModel};
use crate::geometry::{ground_truth_overlap, registration_rmse, PointCloud, RigidTransform, DEFAULT_OVERLAP_RADIUS};
use crate::io::manifest::Manifest;
use crate::io::synth::Regime;
use crate::pipeline::{run_pair, DescriptorKind, Method, PipelineConfig, ScoreSource};
use crate::seed::derive_seed;

/// Version tag written as the first line of every CSV the harness emits.
pub const SCHEMA_LINE: &str = "#schema=1";

pub const DEFAULT_BUDGETS: [f64; 5] = [0.1, 0.2, 0.4, 0.7, 1.0];

/// Area under the precision-recall curve with step interpolation: the mean
/// of precision@rank over the ranks of the positives, scores sorted
/// descending with ties broken by lower index.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "average_precision",
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("score {i} is not finite")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::invalid("average precision needs at least one positive label"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// One (pair, sampler, budget) outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub pair_id: String,
    pub regime: Regime,
    pub method: Method,
    pub budget: f64,
    pub peak_bytes: usize,
    pub sampling_peak_bytes: usize,
    pub registration_peak_bytes: usize,
    pub success: bool,
    /// `None` when registration produced no transform or the run failed.
    pub rmse: Option<f64>,
    pub rotation_error: Option<f64>,
    pub translation_error: Option<f64>,
    /// Overlap-classification AP of the estimator's sampled points.
    pub overlap_ap: Option<f64>,
    /// Empty on success; the error message for runs that failed.
    pub error: String,
}

pub const RECORD_COLUMNS: [&str; 13] = [
    "pair_id",
    "regime",
    "method",
    "budget",
    "peak_bytes",
    "sampling_peak_bytes",
    "registration_peak_bytes",
    "success",
    "rmse",
    "rotation_error",
    "translation_error",
    "overlap_ap",
    "error",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let location = e
        .position()
        .map(|p| format!("line {}", p.line()))
        .unwrap_or_else(|| "unknown".into());
    Error::Parse {
        path: path.to_path_buf(),
        location,
        message: e.to_string(),
    }
}

/// Serialises rows after the schema line.
fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{SCHEMA_LINE}").map_err(|e| Error::io(path, e))?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(|e| csv_error(path, e))?;
        for r in rows {
            w.write_record(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn sort_records(records: &mut [ExperimentRecord]) {
    records.sort_by(|a, b| {
        (a.regime, &a.pair_id, a.method)
            .cmp(&(b.regime, &b.pair_id, b.method))
            .then(a.budget.total_cmp(&b.budget))
    });
}

pub fn write_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let rows: Vec<Vec<String>> = sorted
        .iter()
        .map(|r| {
            vec![
                r.pair_id.clone(),
                r.regime.name().into(),
                r.method.name().into(),
                r.budget.to_string(),
                r.peak_bytes.to_string(),
                r.sampling_peak_bytes.to_string(),
                r.registration_peak_bytes.to_string(),
                (r.success as u8).to_string(),
                opt(r.rmse),
                opt(r.rotation_error),
                opt(r.translation_error),
                opt(r.overlap_ap),
                r.error.clone(),
            ]
        })
        .collect();
    write_csv(path, &RECORD_COLUMNS, &rows)
}

fn check_schema(path: &Path, text: &str) -> Result<()> {
    match text.lines().next() {
        Some(line) if line.trim() == SCHEMA_LINE => Ok(()),
        _ => Err(Error::Parse {
            path: path.to_path_buf(),
            location: "line 1".into(),
            message: format!("expected '{SCHEMA_LINE}'"),
        }),
    }
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    check_schema(path, &text)?;
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != RECORD_COLUMNS {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            location: "line 2".into(),
            message: "unexpected record columns".into(),
        });
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let bad = |col: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            location: format!("line {line}"),
            message: format!("column {}: {msg}", RECORD_COLUMNS[col]),
        };
        let num = |col: usize| -> Result<f64> { row[col].parse().map_err(|_| bad(col, format!("bad number '{}'", &row[col]))) };
        let int = |col: usize| -> Result<usize> { row[col].parse().map_err(|_| bad(col, format!("bad integer '{}'", &row[col]))) };
        let optional = |col: usize| -> Result<Option<f64>> {
            if row[col].is_empty() {
                Ok(None)
            } else {
                num(col).map(Some)
            }
        };
        out.push(ExperimentRecord {
            pair_id: row[0].to_string(),
            regime: row[1].parse().map_err(|e: Error| bad(1, e.to_string()))?,
            method: row[2].parse().map_err(|e: Error| bad(2, e.to_string()))?,
            budget: num(3)?,
            peak_bytes: int(4)?,
            sampling_peak_bytes: int(5)?,
            registration_peak_bytes: int(6)?,
            success: match &row[7] {
                "1" => true,
                "0" => false,
                other => return Err(bad(7, format!("expected 0 or 1, got '{other}'"))),
            },
            rmse: optional(8)?,
            rotation_error: optional(9)?,
            translation_error: optional(10)?,
            overlap_ap: optional(11)?,
            error: row[12].to_string(),
        });
    }
    Ok(out)
}

/// Methods, budgets and pipeline settings of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub budgets: Vec<f64>,
    pub pipeline: PipelineConfig,
    pub overlap_radius: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            budgets: DEFAULT_BUDGETS.to_vec(),
            pipeline: PipelineConfig::default(),
            overlap_radius: DEFAULT_OVERLAP_RADIUS,
            seed: 0,
        }
    }
}

pub const SWEEP_CONFIG_KEYS: &[&str] = &[
    "methods",
    "budgets",
    "seed",
    "overlap_radius",
    "recall_rmse",
    "iterations",
    "inlier_radius",
    "sample_size",
    "descriptor",
    "descriptor_neighbors",
    "histogram_bins",
    "score_source",
    "keep_raw_on_sampled",
];

/// Comma-separated list; repeated entries are kept once, first occurrence wins.
fn parse_list<T: PartialEq>(raw: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for item in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let v = parse(item)?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

pub fn parse_methods(raw: &str) -> Result<Vec<Method>> {
    parse_list(raw, |s| s.parse())
}

pub fn parse_budgets(raw: &str) -> Result<Vec<f64>> {
    let b = parse_list(raw, |s| {
        s.parse::<f64>()
            .map_err(|_| Error::Config(format!("bad budget '{s}'")))
    })?;
    if b.is_empty() || b.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
        return Err(Error::Config(format!("budgets must be fractions in (0, 1]: '{raw}'")));
    }
    Ok(b)
}

impl SweepConfig {
    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        if let Some(m) = kv.get_str("methods") {
            self.methods = parse_methods(m).map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(b) = kv.get_str("budgets") {
            self.budgets = parse_budgets(b)?;
        }
        kv.read_into("seed", &mut self.seed)?;
        kv.read_into("overlap_radius", &mut self.overlap_radius)?;
        let p = &mut self.pipeline;
        kv.read_into("recall_rmse", &mut p.recall_rmse)?;
        kv.read_into("iterations", &mut p.registration.iterations)?;
        kv.read_into("inlier_radius", &mut p.registration.inlier_radius)?;
        kv.read_into("sample_size", &mut p.registration.sample_size)?;
        kv.read_into("descriptor_neighbors", &mut p.registration.descriptor_neighbors)?;
        kv.read_into("histogram_bins", &mut p.registration.histogram_bins)?;
        kv.read_into("keep_raw_on_sampled", &mut p.propagation.keep_raw_on_sampled)?;
        match kv.get_str("descriptor") {
            None => {}
            Some("handcrafted") => p.registration.descriptor = DescriptorKind::Handcrafted,
            Some("encoder") => p.registration.descriptor = DescriptorKind::Encoder,
            Some(other) => return Err(Error::Config(format!("unknown descriptor '{other}'"))),
        }
        match kv.get_str("score_source") {
            None => {}
            Some("combined") => p.propagation.source = ScoreSource::Combined,
            Some("overlap") => p.propagation.source = ScoreSource::OverlapOnly,
            Some(other) => return Err(Error::Config(format!("unknown score_source '{other}'"))),
        }
        Ok(())
    }
}

/// Runs the pipeline for one pair and turns the outcome (or failure) into
/// a record.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_pair(
    pair_id: &str,
    regime: Regime,
    src: &PointCloud,
    tgt: &PointCloud,
    t_true: &RigidTransform,
    method: Method,
    budget: f64,
    model: Option<&EstimatorModel>,
    cfg: &SweepConfig,
    seed: u64,
) -> ExperimentRecord {
    let mut rec = ExperimentRecord {
        pair_id: pair_id.to_string(),
        regime,
        method,
        budget,
        peak_bytes: 0,
        sampling_peak_bytes: 0,
        registration_peak_bytes: 0,
        success: false,
        rmse: None,
        rotation_error: None,
        translation_error: None,
        overlap_ap: None,
        error: String::new(),
    };
    let outcome = (|| -> Result<()> {
        let run = run_pair(src, tgt, method, budget, model, &cfg.pipeline, seed)?;
        rec.peak_bytes = run.ledger.reported();
        rec.sampling_peak_bytes = run.ledger.sampling_peak();
        rec.registration_peak_bytes = run.ledger.registration_peak();
        if let Some(t) = &run.registration.transform {
            let rmse = registration_rmse(t, t_true, src)?;
            rec.rmse = Some(rmse);
            rec.success = rmse < cfg.pipeline.recall_rmse;
            rec.rotation_error = Some(t.rotation_error(t_true));
            rec.translation_error = Some(t.translation_error(t_true));
        }
        if let Some(scores) = &run.scores {
            rec.overlap_ap = overlap_ap(src, tgt, t_true, &scores.src, &scores.tgt, cfg.overlap_radius)?;
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        log::warn!("{pair_id} {method} {budget}: {e}");
        rec.error = e.to_string();
    }
    rec
}

/// AP of the predicted overlap probabilities of both sampled sets against
/// the ground-truth labels; `None` when no sampled point overlaps.
pub fn overlap_ap(
    src: &PointCloud,
    tgt: &PointCloud,
    t_true: &RigidTransform,
    scored_src: &crate::estimator::ScoredCloud,
    scored_tgt: &crate::estimator::ScoredCloud,
    radius: f64,
) -> Result<Option<f64>> {
    let (ls, lt) = ground_truth_overlap(src, tgt, t_true, radius)?;
    let labels: Vec<bool> = scored_src
        .sampled_ids
        .iter()
        .map(|&i| ls.labels[i])
        .chain(scored_tgt.sampled_ids.iter().map(|&i| lt.labels[i]))
        .collect();
    if !labels.iter().any(|&l| l) {
        return Ok(None);
    }
    let scores: Vec<f64> = scored_src.overlap.iter().chain(&scored_tgt.overlap).copied().collect();
    average_precision(&scores, &labels).map(Some)
}

/// Every (pair, method, budget) combination of the manifest. Pair-level
/// failures become failed records; only a missing model aborts.
pub fn sweep(manifest: &Manifest, model: Option<&EstimatorModel>, cfg: &SweepConfig) -> Result<Vec<ExperimentRecord>> {
    if model.is_none() {
        if let Some(m) = cfg.methods.iter().find(|m| m.needs_model()) {
            return Err(Error::Checkpoint(format!("method {m} needs a trained checkpoint")));
        }
    }
    let mut records = Vec::with_capacity(manifest.entries.len() * cfg.methods.len() * cfg.budgets.len());
    for (pi, entry) in manifest.entries.iter().enumerate() {
        let loaded = manifest.load_pair(entry);
        for &method in &cfg.methods {
            for &budget in &cfg.budgets {
                let seed = derive_seed(cfg.seed, pi as u64, 0);
                let rec = match &loaded {
                    Ok((src, tgt)) => {
                        evaluate_pair(&entry.pair_id, entry.regime, src, tgt, &entry.t_true, method, budget, model, cfg, seed)
                    }
                    Err(e) => ExperimentRecord {
                        pair_id: entry.pair_id.clone(),
                        regime: entry.regime,
                        method,
                        budget,
                        peak_bytes: 0,
                        sampling_peak_bytes: 0,
                        registration_peak_bytes: 0,
                        success: false,
                        rmse: None,
                        rotation_error: None,
                        translation_error: None,
                        overlap_ap: None,
                        error: e.to_string(),
                    },
                };
                records.push(rec);
            }
        }
        log::info!("evaluated {} ({}/{})", entry.pair_id, pi + 1, manifest.entries.len());
    }
    sort_records(&mut records);
    Ok(records)
}

/// Aggregate of one (regime, method, budget) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub regime: Regime,
    pub method: Method,
    pub budget: f64,
    pub pairs: usize,
    pub successes: usize,
    pub recall: f64,
    pub mean_peak_bytes: f64,
    /// Mean over records that carry an AP value.
    pub mean_overlap_ap: Option<f64>,
}

pub const SUMMARY_COLUMNS: [&str; 8] = [
    "regime",
    "method",
    "budget",
    "pairs",
    "successes",
    "recall",
    "mean_peak_bytes",
    "mean_overlap_ap",
];

pub fn summarize(records: &[ExperimentRecord]) -> Vec<SummaryRow> {
    #[derive(Default)]
    struct Acc {
        pairs: usize,
        successes: usize,
        bytes: f64,
        ap_sum: f64,
        ap_count: usize,
    }
    let mut cells: BTreeMap<(Regime, Method, u64), (f64, Acc)> = BTreeMap::new();
    for r in records {
        let (_, acc) = cells
            .entry((r.regime, r.method, r.budget.to_bits()))
            .or_insert_with(|| (r.budget, Acc::default()));
        acc.pairs += 1;
        acc.successes += r.success as usize;
        acc.bytes += r.peak_bytes as f64;
        if let Some(ap) = r.overlap_ap {
            acc.ap_sum += ap;
            acc.ap_count += 1;
        }
    }
    let mut rows: Vec<SummaryRow> = cells
        .into_iter()
        .map(|((regime, method, _), (budget, a))| SummaryRow {
            regime,
            method,
            budget,
            pairs: a.pairs,
            successes: a.successes,
            recall: a.successes as f64 / a.pairs as f64,
            mean_peak_bytes: a.bytes / a.pairs as f64,
            mean_overlap_ap: (a.ap_count > 0).then(|| a.ap_sum / a.ap_count as f64),
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.regime, a.method)
            .cmp(&(b.regime, b.method))
            .then(a.budget.total_cmp(&b.budget))
    });
    rows
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let data: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.regime.name().into(),
                r.method.name().into(),
                r.budget.to_string(),
                r.pairs.to_string(),
                r.successes.to_string(),
                r.recall.to_string(),
                r.mean_peak_bytes.to_string(),
                opt(r.mean_overlap_ap),
            ]
        })
        .collect();
    write_csv(path, &SUMMARY_COLUMNS, &data)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// Recall (y) against mean peak memory in MiB (x), one polyline per method.
pub fn recall_memory_svg(rows: &[SummaryRow], regime: Regime) -> String {
    let (w, h, margin) = (640.0, 420.0, 60.0);
    let rows: Vec<&SummaryRow> = rows.iter().filter(|r| r.regime == regime).collect();
    let mib = |b: f64| b / (1024.0 * 1024.0);
    let max_x = rows.iter().map(|r| mib(r.mean_peak_bytes)).fold(0.0, f64::max).max(1e-9) * 1.05;
    let px = |x: f64| margin + x / max_x * (w - 2.0 * margin);
    let py = |y: f64| h - margin - y * (h - 2.0 * margin);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">registration recall vs peak memory ({})</text>"#,
        w / 2.0,
        regime.name()
    );
    let (x0, y0, x1, y1) = (px(0.0), py(0.0), px(max_x), py(1.0));
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.1}</text>"#,
            x0 - 6.0,
            py(v) + 4.0
        );
        let xv = max_x * v;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{xv:.2}</text>"#,
            px(xv),
            y0 + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">peak memory (MiB)</text>"#,
        w / 2.0,
        h - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">recall</text>"#,
        h / 2.0,
        h / 2.0
    );
    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.dedup();
    for (mi, method) in methods.iter().enumerate() {
        let color = PALETTE[mi % PALETTE.len()];
        let mut pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.method == *method)
            .map(|r| (mib(r.mean_peak_bytes), r.recall))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        for &(x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = margin + 16.0 * mi as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            w - margin - 140.0,
            method.name()
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Reads a records CSV and writes `summary.csv` plus one SVG per regime
/// into `out_dir`. Output depends only on the records file.
pub fn report(records_path: &Path, out_dir: &Path) -> Result<Vec<SummaryRow>> {
    let records = read_records(records_path)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows = summarize(&records);
    write_summary(&out_dir.join("summary.csv"), &rows)?;
    let mut regimes: Vec<Regime> = rows.iter().map(|r| r.regime).collect();
    regimes.dedup();
    for regime in regimes {
        let path = out_dir.join(format!("recall_memory_{}.svg", regime.name()));
        fs::write(&path, recall_memory_svg(&rows, regime)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

pub const TRAINING_LOG_COLUMNS: [&str; 9] = [
    "epoch",
    "total",
    "circle",
    "overlap",
    "matchability",
    "matching_accuracy",
    "w_circle",
    "w_overlap",
    "w_matchability",
];

pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                e.total.to_string(),
                e.components.circle.to_string(),
                e.components.overlap.to_string(),
                e.components.matchability.to_string(),
                e.matching_accuracy.to_string(),
                e.weights.circle.to_string(),
                e.weights.overlap.to_string(),
                e.weights.matchability.to_string(),
            ]
        })
        .collect();
    write_csv(path, &TRAINING_LOG_COLUMNS, &rows)
}
