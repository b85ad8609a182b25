//! Run records and the comparison tables built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mtl_lab::architectures::{ArchitectureSpec, Model};
use mtl_lab::experiments::Variant;
use mtl_lab::io_util::{read_json, write_atomic};
use mtl_lab::metrics::MetricsReport;
use mtl_lab::synthdata::{colorize_mask, encode_ppm, hstack, load_dataset, Split};
use mtl_lab::trainer::{load_checkpoint, predict_segmentation};
use serde::{Deserialize, Serialize};

use crate::Invalid;

pub const RUN_FILE: &str = "run.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Summary written next to every trained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Variant name, or `custom` for an explicit architecture.
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    pub dataset: PathBuf,
    pub dataset_fingerprint: String,
    pub params: u64,
    pub architecture: ArchitectureSpec,
    pub metrics: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
}

/// Directory holding one variant/seed run under a `compare` output.
pub fn run_dir(root: &Path, variant: &str, seed: u64) -> PathBuf {
    root.join(variant).join(format!("seed-{seed}"))
}

/// Reads every `<root>/<variant>/seed-<n>/run.json`, sorted by path.
pub fn collect_runs(root: &Path) -> anyhow::Result<Vec<(PathBuf, RunRecord)>> {
    let mut paths = Vec::new();
    let variants = std::fs::read_dir(root).map_err(|e| Invalid(format!("{}: {e}", root.display())))?;
    for v in variants {
        let v = v?.path();
        if !v.is_dir() {
            continue;
        }
        for s in std::fs::read_dir(&v)? {
            let p = s?.path().join(RUN_FILE);
            if p.is_file() {
                paths.push(p);
            }
        }
    }
    paths.sort();
    let mut runs = Vec::new();
    for p in paths {
        let record: RunRecord = read_json(&p)?;
        runs.push((p.parent().expect("run file has a parent").to_path_buf(), record));
    }
    Ok(runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Md,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Md => "md",
        }
    }
}

impl FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "md" => Ok(Format::Md),
            other => Err(format!("unknown report format `{other}` (csv, json, md)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub label: String,
    pub params: u64,
    /// Per-column median over seeds; columns a variant lacks are absent.
    pub median: BTreeMap<String, f64>,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub dataset_fingerprint: String,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
}

fn metric_values(m: &MetricsReport) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = m.per_class_iou.iter().map(|(k, x)| (format!("iou_{k}"), *x)).collect();
    v.extend(m.mean_iou.map(|x| ("mean_iou".to_string(), x)));
    v.extend(m.per_class_ap.iter().map(|(k, x)| (format!("ap_{k}"), *x)));
    v.extend(m.mean_ap.map(|x| ("mean_ap".to_string(), x)));
    v.extend(m.depth_accuracy.map(|x| ("depth_accuracy".to_string(), x)));
    v.extend(m.motion_iou.map(|x| ("motion_iou".to_string(), x)));
    v
}

fn column_rank(name: &str) -> usize {
    match name {
        n if n.starts_with("iou_") => 0,
        "mean_iou" => 1,
        n if n.starts_with("ap_") => 2,
        "mean_ap" => 3,
        "depth_accuracy" => 4,
        _ => 5,
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn label_of(variant: &str) -> String {
    Variant::from_str(variant)
        .map(|v| v.label().to_string())
        .unwrap_or_else(|_| variant.to_string())
}

/// Tabulates runs by variant. `variants` fixes row order and demands a run
/// for each; otherwise rows follow the catalog order.
pub fn build_report(runs: &[RunRecord], variants: Option<&[String]>) -> Result<ComparisonReport, Invalid> {
    let mut by_variant: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        by_variant.entry(r.variant.as_str()).or_default().push(r);
    }
    let order: Vec<String> = match variants {
        Some(list) => {
            for v in list {
                if !by_variant.contains_key(v.as_str()) {
                    return Err(Invalid(format!("no completed run for variant `{v}`")));
                }
            }
            list.to_vec()
        }
        None => {
            let mut names: Vec<String> = Variant::ALL
                .iter()
                .map(|v| v.name().to_string())
                .filter(|n| by_variant.contains_key(n.as_str()))
                .collect();
            let custom: Vec<String> = by_variant
                .keys()
                .filter(|k| !names.iter().any(|n| n == *k))
                .map(|k| k.to_string())
                .collect();
            names.extend(custom);
            names
        }
    };
    if order.is_empty() {
        return Err(Invalid("no completed runs to report".into()));
    }

    let mut fingerprints: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for v in &order {
        for r in &by_variant[v.as_str()] {
            fingerprints
                .entry(&r.dataset_fingerprint)
                .or_default()
                .push(format!("{}/seed-{}", r.variant, r.seed));
        }
    }
    if fingerprints.len() > 1 {
        let detail: Vec<String> = fingerprints
            .iter()
            .map(|(fp, runs)| format!("{} on {}", runs.join(", "), &fp[..fp.len().min(12)]))
            .collect();
        return Err(Invalid(format!(
            "runs were trained on different datasets: {}",
            detail.join("; ")
        )));
    }

    let mut columns: Vec<String> = Vec::new();
    let mut rows = Vec::new();
    for v in &order {
        let mut seeds = by_variant[v.as_str()].clone();
        seeds.sort_by_key(|r| r.seed);
        let params = seeds[0].params;
        if let Some(r) = seeds.iter().find(|r| r.params != params) {
            return Err(Invalid(format!(
                "variant `{v}` seed {} has {} params, seed {} has {params}",
                r.seed, r.params, seeds[0].seed
            )));
        }
        let per_seed: Vec<SeedResult> = seeds
            .iter()
            .map(|r| SeedResult {
                seed: r.seed,
                values: metric_values(&r.metrics).into_iter().collect(),
            })
            .collect();
        let mut gathered: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &per_seed {
            for (k, x) in &s.values {
                gathered.entry(k.clone()).or_default().push(*x);
                if !columns.contains(k) {
                    columns.push(k.clone());
                }
            }
        }
        rows.push(ReportRow {
            variant: v.clone(),
            label: label_of(v),
            params,
            median: gathered.iter().map(|(k, xs)| (k.clone(), median(xs))).collect(),
            per_seed,
        });
    }
    columns.sort_by(|a, b| column_rank(a).cmp(&column_rank(b)).then(a.cmp(b)));
    Ok(ComparisonReport {
        dataset_fingerprint: fingerprints.into_keys().next().unwrap_or_default().to_string(),
        columns,
        rows,
        created_unix: None,
    })
}

fn cell(v: Option<&f64>, empty: &str) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| empty.to_string())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,label,params");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", csv_field(&r.variant), csv_field(&r.label), r.params);
            for c in &self.columns {
                out.push(',');
                out.push_str(&cell(r.median.get(c), ""));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Model | Params |");
        for c in &self.columns {
            let _ = write!(out, " {c} |");
        }
        out.push_str("\n|---|---:|");
        for _ in &self.columns {
            out.push_str("---:|");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "| {} | {} |", r.label, r.params);
            for c in &self.columns {
                let _ = write!(out, " {} |", cell(r.median.get(c), "-"));
            }
            out.push('\n');
        }
        let seeds: usize = self.rows.iter().map(|r| r.per_seed.len()).max().unwrap_or(0);
        let _ = write!(
            out,
            "\nMedians over up to {seeds} seed(s). Dataset {}.\n",
            &self.dataset_fingerprint[..self.dataset_fingerprint.len().min(16)]
        );
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
            Format::Md => self.to_markdown(),
        }
    }
}

/// Writes `comparison.<ext>` for each format and returns the paths written.
pub fn emit_report(report: &ComparisonReport, formats: &[Format], out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for &f in formats {
        let path = out.join(format!("comparison.{}", f.extension()));
        write_atomic(&path, report.render(f).as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

/// Side-by-side PPMs of the first `count` validation samples: frame, ground
/// truth, then one prediction per variant with a segmentation head.
pub fn render_predictions(
    runs: &[(PathBuf, RunRecord)],
    order: &[String],
    count: usize,
    out: &Path,
) -> anyhow::Result<Vec<PathBuf>> {
    let mut models: Vec<Model> = Vec::new();
    let mut dataset_path: Option<&Path> = None;
    for v in order {
        let Some((dir, record)) = runs.iter().filter(|(_, r)| &r.variant == v).min_by_key(|(_, r)| r.seed) else {
            continue;
        };
        if record.metrics.mean_iou.is_none() {
            continue;
        }
        models.push(load_checkpoint(&dir.join(CHECKPOINT_DIR), Some(&record.architecture))?.model);
        dataset_path.get_or_insert(&record.dataset);
    }
    let Some(dataset_path) = dataset_path else {
        return Ok(Vec::new());
    };
    let ds = load_dataset(dataset_path)?;
    let val = ds.split(Split::Val);
    let samples = &val[..count.min(val.len())];
    let size = ds.spec().image_size;
    let mut predictions = Vec::new();
    for m in &models {
        predictions.push(predict_segmentation(m, samples)?);
    }
    let mut written = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let mut panels = vec![s.frame_curr.clone(), colorize_mask(&s.seg, size)];
        panels.extend(predictions.iter().map(|p| colorize_mask(&p[i], size)));
        let path = out.join("renders").join(format!("val-{i:03}.ppm"));
        write_atomic(&path, &encode_ppm(&hstack(&panels)))?;
        written.push(path);
    }
    Ok(written)
}
