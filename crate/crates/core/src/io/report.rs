//! Evaluation reports: one CSV row per (patient, scan, organ, observer pair)
//! plus per-patient aggregate rows, and a markdown summary laid out like a
//! results table (per-organ mean ± stddev).
//!
//! CSV numbers use Rust's shortest round-trip `f64` formatting, so a report
//! read back with [`read_report_csv`] carries the exact values. Undefined
//! values are written as `-`. Aggregate rows use scan `*`, organ
//! `aggregate` and carry the `aggregate` flag. Markdown shows DSC ×100 with
//! one decimal and areas/volumes with one decimal. Standard deviations are
//! population (divide by n).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::metrics::SurfaceDscBreakdown;

pub const CSV_HEADER: [&str; 15] = [
    "patient",
    "scan",
    "organ",
    "pair",
    "surface_dsc",
    "tau_mm",
    "tau_quantized_mm",
    "volumetric_dsc",
    "overlap_area_1_mm2",
    "overlap_area_2_mm2",
    "total_area_1_mm2",
    "total_area_2_mm2",
    "volume_1_mm3",
    "volume_2_mm3",
    "flags",
];

pub const SUMMARY_CSV_HEADER: [&str; 9] = [
    "organ",
    "pair",
    "n",
    "surface_dsc_mean",
    "surface_dsc_stddev",
    "volumetric_dsc_mean",
    "volumetric_dsc_stddev",
    "mean_area_mm2",
    "mean_volume_mm3",
];

pub const AGGREGATE_ORGAN: &str = "aggregate";
pub const AGGREGATE_SCAN: &str = "*";
pub const FLAG_AGGREGATE: &str = "aggregate";
/// Some relevant organ had no usable row; the aggregate covers the rest.
pub const FLAG_INCOMPLETE: &str = "incomplete";
pub const FLAG_SURFACE_UNDEFINED: &str = "surface_undefined";
pub const FLAG_VOLUMETRIC_UNDEFINED: &str = "volumetric_undefined";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportRow {
    pub patient: String,
    pub scan: String,
    pub organ: String,
    pub pair: String,
    pub surface_dsc: Option<f64>,
    pub tau_mm: Option<f64>,
    pub tau_quantized_mm: Option<f64>,
    pub volumetric_dsc: Option<f64>,
    pub overlap_area_1_mm2: Option<f64>,
    pub overlap_area_2_mm2: Option<f64>,
    pub total_area_1_mm2: Option<f64>,
    pub total_area_2_mm2: Option<f64>,
    pub volume_1_mm3: Option<f64>,
    pub volume_2_mm3: Option<f64>,
    pub flags: Vec<String>,
}

impl ReportRow {
    #[allow(clippy::too_many_arguments)]
    pub fn from_metrics(
        patient: &str,
        scan: &str,
        organ: &str,
        pair: &str,
        surface: &SurfaceDscBreakdown,
        volumetric_dsc: Option<f64>,
        volume_1_mm3: f64,
        volume_2_mm3: f64,
    ) -> Self {
        let mut flags = Vec::new();
        if surface.value.is_none() {
            flags.push(FLAG_SURFACE_UNDEFINED.to_string());
        }
        if volumetric_dsc.is_none() {
            flags.push(FLAG_VOLUMETRIC_UNDEFINED.to_string());
        }
        ReportRow {
            patient: patient.into(),
            scan: scan.into(),
            organ: organ.into(),
            pair: pair.into(),
            surface_dsc: surface.value,
            tau_mm: Some(surface.tau_mm),
            tau_quantized_mm: Some(surface.quantized_tau_mm),
            volumetric_dsc,
            overlap_area_1_mm2: Some(surface.overlap_area_1),
            overlap_area_2_mm2: Some(surface.overlap_area_2),
            total_area_1_mm2: Some(surface.total_area_1),
            total_area_2_mm2: Some(surface.total_area_2),
            volume_1_mm3: Some(volume_1_mm3),
            volume_2_mm3: Some(volume_2_mm3),
            flags,
        }
    }

    /// A row whose case could not be evaluated; every value is undefined.
    pub fn failed(patient: &str, scan: &str, organ: &str, pair: &str, flag: &str) -> Self {
        ReportRow {
            patient: patient.into(),
            scan: scan.into(),
            organ: organ.into(),
            pair: pair.into(),
            flags: vec![flag.to_string()],
            ..Default::default()
        }
    }

    pub fn is_aggregate(&self) -> bool {
        self.flags.iter().any(|f| f == FLAG_AGGREGATE)
    }

    fn areas(&self) -> Option<[f64; 4]> {
        Some([
            self.overlap_area_1_mm2?,
            self.overlap_area_2_mm2?,
            self.total_area_1_mm2?,
            self.total_area_2_mm2?,
        ])
    }

    fn sort_key(&self) -> (&str, &str, &str, &str) {
        (&self.patient, &self.scan, &self.organ, &self.pair)
    }
}

/// Per-organ rows and per-patient aggregates, both sorted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<ReportRow>,
}

impl EvaluationReport {
    /// Sorts `rows` and derives one aggregate per (patient, pair): overlap
    /// and total areas of the relevant organs (over all of the patient's
    /// scans) are summed before dividing.
    pub fn build(mut rows: Vec<ReportRow>, relevant: impl Fn(&str) -> Vec<String>) -> Self {
        rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let mut groups: BTreeMap<(&str, &str), Vec<&ReportRow>> = BTreeMap::new();
        for r in &rows {
            groups.entry((&r.patient, &r.pair)).or_default().push(r);
        }
        let aggregates = groups
            .into_iter()
            .map(|((patient, pair), group)| {
                let (mut num, mut den) = (0.0, 0.0);
                let mut sums = [0.0f64; 4];
                let mut incomplete = false;
                for organ in relevant(patient) {
                    let mut found = false;
                    for r in group.iter().filter(|r| r.organ == organ) {
                        match r.areas() {
                            Some(a) => {
                                found = true;
                                num += a[0] + a[1];
                                den += a[2] + a[3];
                                for (s, v) in sums.iter_mut().zip(a) {
                                    *s += v;
                                }
                            }
                            None => incomplete = true,
                        }
                    }
                    incomplete |= !found;
                }
                let mut flags = vec![FLAG_AGGREGATE.to_string()];
                if incomplete {
                    flags.push(FLAG_INCOMPLETE.to_string());
                }
                let value = (den > 0.0).then(|| num / den);
                if value.is_none() {
                    flags.push(FLAG_SURFACE_UNDEFINED.to_string());
                }
                ReportRow {
                    patient: patient.to_string(),
                    scan: AGGREGATE_SCAN.into(),
                    organ: AGGREGATE_ORGAN.into(),
                    pair: pair.to_string(),
                    surface_dsc: value,
                    overlap_area_1_mm2: Some(sums[0]),
                    overlap_area_2_mm2: Some(sums[1]),
                    total_area_1_mm2: Some(sums[2]),
                    total_area_2_mm2: Some(sums[3]),
                    flags,
                    ..Default::default()
                }
            })
            .collect();
        EvaluationReport { rows, aggregates }
    }

    /// Per-(organ, pair) statistics followed by one aggregate line per pair.
    pub fn summary(&self) -> Vec<SummaryLine> {
        let mut groups: BTreeMap<(&str, &str), Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((&r.organ, &r.pair)).or_default().push(r);
        }
        let mut out: Vec<SummaryLine> = groups
            .into_iter()
            .map(|((organ, pair), rows)| SummaryLine {
                organ: organ.into(),
                pair: pair.into(),
                n: rows.len(),
                surface_dsc: Stat::of(rows.iter().filter_map(|r| r.surface_dsc)),
                volumetric_dsc: Stat::of(rows.iter().filter_map(|r| r.volumetric_dsc)),
                mean_area_mm2: Stat::of(rows.iter().filter_map(|r| r.total_area_1_mm2)).map(|s| s.mean),
                mean_volume_mm3: Stat::of(rows.iter().filter_map(|r| r.volume_1_mm3)).map(|s| s.mean),
            })
            .collect();
        let mut agg: BTreeMap<&str, Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.aggregates {
            agg.entry(&r.pair).or_default().push(r);
        }
        for (pair, rows) in agg {
            out.push(SummaryLine {
                organ: AGGREGATE_ORGAN.into(),
                pair: pair.into(),
                n: rows.len(),
                surface_dsc: Stat::of(rows.iter().filter_map(|r| r.surface_dsc)),
                volumetric_dsc: None,
                mean_area_mm2: None,
                mean_volume_mm3: None,
            });
        }
        out
    }
}

/// Mean and population standard deviation of the defined values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub stddev: f64,
}

impl Stat {
    pub fn of(values: impl Iterator<Item = f64>) -> Option<Stat> {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().fold(0.0, |a, x| a + x) / n;
        let var = v.iter().fold(0.0, |a, x| a + (x - mean) * (x - mean)) / n;
        Some(Stat {
            n: v.len(),
            mean,
            stddev: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryLine {
    pub organ: String,
    pub pair: String,
    /// Rows in the group, defined or not.
    pub n: usize,
    pub surface_dsc: Option<Stat>,
    pub volumetric_dsc: Option<Stat>,
    pub mean_area_mm2: Option<f64>,
    pub mean_volume_mm3: Option<f64>,
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x}"))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", x * 100.0))
}

fn pct_stat(s: Option<Stat>) -> String {
    s.map_or_else(
        || "-".to_string(),
        |s| format!("{:.1} ± {:.1}", s.mean * 100.0, s.stddev * 100.0),
    )
}

fn one_decimal(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"))
}

fn csv_bytes(header: &[&str], records: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in records {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Row CSV: per-organ rows, then aggregate rows.
pub fn render_csv(r: &EvaluationReport) -> Vec<u8> {
    csv_bytes(
        &CSV_HEADER,
        r.rows.iter().chain(&r.aggregates).map(|row| {
            vec![
                row.patient.clone(),
                row.scan.clone(),
                row.organ.clone(),
                row.pair.clone(),
                num(row.surface_dsc),
                num(row.tau_mm),
                num(row.tau_quantized_mm),
                num(row.volumetric_dsc),
                num(row.overlap_area_1_mm2),
                num(row.overlap_area_2_mm2),
                num(row.total_area_1_mm2),
                num(row.total_area_2_mm2),
                num(row.volume_1_mm3),
                num(row.volume_2_mm3),
                row.flags.join(";"),
            ]
        }),
    )
}

pub fn render_summary_csv(r: &EvaluationReport) -> Vec<u8> {
    csv_bytes(
        &SUMMARY_CSV_HEADER,
        r.summary().into_iter().map(|s| {
            vec![
                s.organ,
                s.pair,
                s.n.to_string(),
                num(s.surface_dsc.map(|s| s.mean)),
                num(s.surface_dsc.map(|s| s.stddev)),
                num(s.volumetric_dsc.map(|s| s.mean)),
                num(s.volumetric_dsc.map(|s| s.stddev)),
                num(s.mean_area_mm2),
                num(s.mean_volume_mm3),
            ]
        }),
    )
}

pub fn render_markdown(r: &EvaluationReport) -> String {
    let mut out = String::new();
    out.push_str("# Evaluation summary\n\n");
    out.push_str("DSC values in percent, mean ± stddev over cases.\n\n");
    out.push_str("| Organ | Pair | n | Surface DSC (%) | Volumetric DSC (%) | Mean surface area (mm²) | Mean volume (mm³) |\n");
    out.push_str("|---|---|---:|---:|---:|---:|---:|\n");
    for s in r.summary() {
        let organ = if s.organ == AGGREGATE_ORGAN {
            "**Aggregate**".to_string()
        } else {
            s.organ.clone()
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            organ,
            s.pair,
            s.n,
            pct_stat(s.surface_dsc),
            pct_stat(s.volumetric_dsc),
            one_decimal(s.mean_area_mm2),
            one_decimal(s.mean_volume_mm3),
        );
    }
    out.push_str("\n## Per-patient aggregate surface DSC\n\n");
    out.push_str("| Patient | Pair | Surface DSC (%) | Flags |\n");
    out.push_str("|---|---|---:|---|\n");
    for a in &r.aggregates {
        let flags: Vec<&str> = a
            .flags
            .iter()
            .map(String::as_str)
            .filter(|f| *f != FLAG_AGGREGATE)
            .collect();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            a.patient,
            a.pair,
            pct(a.surface_dsc),
            if flags.is_empty() { "-".to_string() } else { flags.join(", ") },
        );
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    std::fs::write(path, bytes).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// CSV writes the row table; markdown writes the summary.
pub fn write_report(r: &EvaluationReport, format: ReportFormat, path: &Path) -> Result<(), ReportError> {
    match format {
        ReportFormat::Csv => write_file(path, &render_csv(r)),
        ReportFormat::Markdown => write_file(path, render_markdown(r).as_bytes()),
    }
}

/// Summary only: markdown or summary CSV.
pub fn write_summary(r: &EvaluationReport, format: ReportFormat, path: &Path) -> Result<(), ReportError> {
    match format {
        ReportFormat::Csv => write_file(path, &render_summary_csv(r)),
        ReportFormat::Markdown => write_file(path, render_markdown(r).as_bytes()),
    }
}

pub fn read_report_csv(path: &Path) -> Result<EvaluationReport, ReportError> {
    let bytes = std::fs::read(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_report_csv(&bytes).map_err(|message| ReportError::Parse {
        path: path.to_path_buf(),
        message,
    })
}

pub fn parse_report_csv(bytes: &[u8]) -> Result<EvaluationReport, String> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = rd.headers().map_err(|e| e.to_string())?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(format!("unexpected header: {}", header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut report = EvaluationReport::default();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let line = i + 2;
        let field = |j: usize| -> Result<Option<f64>, String> {
            match &rec[j] {
                "-" => Ok(None),
                s => s
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| format!("line {line}: column {}: not a number: {s:?}", CSV_HEADER[j])),
            }
        };
        let row = ReportRow {
            patient: rec[0].to_string(),
            scan: rec[1].to_string(),
            organ: rec[2].to_string(),
            pair: rec[3].to_string(),
            surface_dsc: field(4)?,
            tau_mm: field(5)?,
            tau_quantized_mm: field(6)?,
            volumetric_dsc: field(7)?,
            overlap_area_1_mm2: field(8)?,
            overlap_area_2_mm2: field(9)?,
            total_area_1_mm2: field(10)?,
            total_area_2_mm2: field(11)?,
            volume_1_mm3: field(12)?,
            volume_2_mm3: field(13)?,
            flags: rec[14]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect(),
        };
        if row.is_aggregate() {
            report.aggregates.push(row);
        } else {
            report.rows.push(row);
        }
    }
    Ok(report)
}
