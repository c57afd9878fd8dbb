//! Batch driver behind the `surfdice` binary.
//!
//! Exit codes: 0 success, 1 configuration or input failure (nothing
//! evaluated), 2 partial failure (some cases failed; the report lists them
//! and stderr has one line per error).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::calibrate::{calibrate_organ_tolerances, CalibrationScan, Weighting, DEFAULT_PERCENTILE};
use crate::grid::{Axis, Mask, MultiOrganSegmentation};
use crate::io::manifest::{load_manifest, DatasetManifest, ScanEntry};
use crate::io::nifti::read_mask;
use crate::io::report::{
    read_report_csv, write_report, write_summary, EvaluationReport, ReportFormat, ReportRow,
};
use crate::metrics::{surface_dsc, volumetric_dsc, ToleranceSpec};
use crate::perturb::{
    augmentation_sweep, mirror_with_label_swap, translation_sweep, AugmentationConfig,
    MaskInterpolation, SweepPoint,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "surfdice", version, about = "Surface Dice at tolerance for 3D segmentation masks")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "SURFDICE_JOBS")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score candidate observers against a reference observer.
    Evaluate(EvaluateArgs),
    /// Derive per-organ tolerances from inter-observer variation.
    Calibrate(CalibrateArgs),
    /// Metric sensitivity to translations, augmentation and mirroring.
    Perturb(PerturbArgs),
    /// Summarise an evaluation report CSV.
    Table(TableArgs),
}

#[derive(Debug, Args)]
pub struct ToleranceArgs {
    /// Tolerance spec JSON (e.g. written by `calibrate`).
    #[arg(long)]
    pub tolerances: Option<PathBuf>,
    /// Tolerance for organs without an entry in --tolerances.
    #[arg(long)]
    pub default_tau_mm: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub tolerance: ToleranceArgs,
    #[arg(long)]
    pub reference: String,
    /// Candidate observers (default: every other observer).
    #[arg(long)]
    pub candidate: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "csv")]
    pub format: Vec<ReportFormat>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory; receives `tolerances.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
    pub percentile: f64,
    /// Every surface element votes once instead of by its area.
    #[arg(long)]
    pub unweighted_percentile: bool,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub tolerance: ToleranceArgs,
    #[arg(long)]
    pub reference: String,
    /// Augmentation config JSON (default: the standard ranges).
    #[arg(long)]
    pub augmentation: Option<PathBuf>,
    /// Overrides the config's seed; required without --augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "linear")]
    pub mask_warp: MaskInterpolation,
    /// Largest whole-voxel x translation in the sweep.
    #[arg(long, default_value_t = 4)]
    pub max_shift: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "csv")]
    pub format: Vec<ReportFormat>,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    /// Report CSV written by `evaluate`.
    pub report: PathBuf,
    #[arg(long, default_value = "md")]
    pub format: ReportFormat,
    /// Output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A configuration error that stops the run with exit code 1.
#[derive(Debug)]
struct Fatal(String);

impl<E: std::fmt::Display> From<E> for Fatal {
    fn from(e: E) -> Self {
        Fatal(e.to_string())
    }
}

/// One failed case, printed as a single stderr line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseError {
    pub patient: String,
    pub scan: String,
    pub organ: String,
    pub pair: String,
    pub kind: String,
    pub message: String,
}

impl std::fmt::Display for CaseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "error: patient={} scan={} organ={} pair={} kind={}: {}",
            self.patient, self.scan, self.organ, self.pair, self.kind, self.message
        )
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_FAILURE
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn run(cli: Cli) -> u8 {
    let jobs = match cli.jobs {
        Some(0) => {
            eprintln!("error: --jobs must be at least 1");
            return EXIT_FAILURE;
        }
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_FAILURE;
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Evaluate(a) => cmd_evaluate(a, jobs),
        Command::Calibrate(a) => cmd_calibrate(a, jobs),
        Command::Perturb(a) => cmd_perturb(a, jobs),
        Command::Table(a) => cmd_table(a),
    });
    match result {
        Ok(code) => code,
        Err(Fatal(msg)) => {
            eprintln!("error: {msg}");
            EXIT_FAILURE
        }
    }
}

fn load_tolerances(t: &ToleranceArgs) -> Result<ToleranceSpec, Fatal> {
    let mut spec = match &t.tolerances {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Fatal(format!("{}: {e}", path.display())))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize::<_, ToleranceSpec>(de)
                .map_err(|e| Fatal(format!("{}: {}: {}", path.display(), e.path(), e.inner())))?
        }
        None => ToleranceSpec::default(),
    };
    if let Some(tau) = t.default_tau_mm {
        spec.default_tau = Some(tau);
    }
    if t.tolerances.is_none() && t.default_tau_mm.is_none() {
        return Err(Fatal("one of --tolerances or --default-tau-mm is required".into()));
    }
    spec.validate()?;
    Ok(spec)
}

fn create_out_dir(dir: &Path) -> Result<(), Fatal> {
    std::fs::create_dir_all(dir).map_err(|e| Fatal(format!("{}: {e}", dir.display())))
}

#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    jobs: usize,
    unix_time_s: u64,
    settings: T,
    outputs: Vec<String>,
    case_errors: &'a [CaseError],
}

fn write_sidecar<T: Serialize>(
    dir: &Path,
    command: &'static str,
    jobs: usize,
    settings: T,
    outputs: Vec<String>,
    case_errors: &[CaseError],
) -> Result<(), Fatal> {
    let record = RunRecord {
        tool: "surfdice",
        version: env!("CARGO_PKG_VERSION"),
        command,
        jobs,
        unix_time_s: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        settings,
        outputs,
        case_errors,
    };
    let path = dir.join("run.json");
    let text = serde_json::to_string_pretty(&record)?;
    std::fs::write(&path, text + "\n").map_err(|e| Fatal(format!("{}: {e}", path.display())))
}

fn report_errors(errors: &[CaseError]) -> u8 {
    for e in errors {
        eprintln!("{e}");
    }
    if errors.is_empty() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    }
}

fn pair_name(reference: &str, candidate: &str) -> String {
    format!("{reference}/{candidate}")
}

struct Task<'a> {
    scan: &'a ScanEntry,
    organ: &'a str,
    candidate: &'a str,
}

/// Scores every (scan, organ, candidate) against `reference`. Rows come
/// back sorted; per-case failures become flagged rows plus a [`CaseError`].
pub fn evaluate_dataset(
    manifest: &DatasetManifest,
    tolerances: &ToleranceSpec,
    reference: &str,
    candidates: &[String],
) -> (EvaluationReport, Vec<CaseError>) {
    let empty = BTreeMap::new();
    let mut tasks = Vec::new();
    for scan in &manifest.scans {
        let ref_organs = scan.segmentations.get(reference).unwrap_or(&empty);
        for cand in candidates {
            let Some(cand_organs) = scan.segmentations.get(cand) else {
                continue;
            };
            let organs: std::collections::BTreeSet<&String> =
                ref_organs.keys().chain(cand_organs.keys()).collect();
            for organ in organs {
                tasks.push(Task {
                    scan,
                    organ,
                    candidate: cand,
                });
            }
        }
    }

    let results: Vec<(ReportRow, Option<CaseError>)> = tasks
        .par_iter()
        .map(|t| {
            let pair = pair_name(reference, t.candidate);
            let fail = |kind: &str, message: String| {
                (
                    ReportRow::failed(&t.scan.patient_id, &t.scan.scan_id, t.organ, &pair, kind),
                    Some(CaseError {
                        patient: t.scan.patient_id.clone(),
                        scan: t.scan.scan_id.clone(),
                        organ: t.organ.to_string(),
                        pair: pair.clone(),
                        kind: kind.to_string(),
                        message,
                    }),
                )
            };
            let path_of = |obs: &str| t.scan.segmentations.get(obs).and_then(|m| m.get(t.organ));
            let Some(ref_path) = path_of(reference) else {
                return fail("missing_reference", format!("no {reference} segmentation"));
            };
            let Some(cand_path) = path_of(t.candidate) else {
                return fail("missing_candidate", format!("no {} segmentation", t.candidate));
            };
            let Some(tau) = tolerances.tolerance_for(t.organ) else {
                return fail("no_tolerance", "organ has no tolerance and no default is set".into());
            };
            let a = match read_mask(ref_path) {
                Ok(m) => m,
                Err(e) => return fail("read_error", e.to_string()),
            };
            let b = match read_mask(cand_path) {
                Ok(m) => m,
                Err(e) => return fail("read_error", e.to_string()),
            };
            let surface = match surface_dsc(&a, &b, tau) {
                Ok(s) => s,
                Err(e) => return fail("metric_error", e.to_string()),
            };
            let vol = match volumetric_dsc(&a, &b) {
                Ok(v) => v,
                Err(e) => return fail("metric_error", e.to_string()),
            };
            let row = ReportRow::from_metrics(
                &t.scan.patient_id,
                &t.scan.scan_id,
                t.organ,
                &pair,
                &surface,
                vol,
                a.volume(),
                b.volume(),
            );
            (row, None)
        })
        .collect();

    let mut rows = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for (row, err) in results {
        rows.push(row);
        errors.extend(err);
    }
    errors.sort_by(|a, b| {
        (&a.patient, &a.scan, &a.organ, &a.pair).cmp(&(&b.patient, &b.scan, &b.organ, &b.pair))
    });
    let report = EvaluationReport::build(rows, |p| manifest.relevant_organs(p));
    (report, errors)
}

fn resolve_candidates(
    manifest: &DatasetManifest,
    reference: &str,
    requested: &[String],
) -> Result<Vec<String>, Fatal> {
    let observers = manifest.observers();
    if !observers.contains(reference) {
        return Err(Fatal(format!("reference observer {reference:?} is not in the manifest")));
    }
    let candidates: Vec<String> = if requested.is_empty() {
        observers.into_iter().filter(|o| o != reference).collect()
    } else {
        for c in requested {
            if c == reference {
                return Err(Fatal(format!("candidate {c:?} equals the reference observer")));
            }
            if !observers.contains(c) {
                return Err(Fatal(format!("candidate observer {c:?} is not in the manifest")));
            }
        }
        let mut c = requested.to_vec();
        c.sort();
        c.dedup();
        c
    };
    if candidates.is_empty() {
        return Err(Fatal("no candidate observers".into()));
    }
    Ok(candidates)
}

fn cmd_evaluate(a: &EvaluateArgs, jobs: usize) -> Result<u8, Fatal> {
    let manifest = load_manifest(&a.manifest)?;
    let tolerances = load_tolerances(&a.tolerance)?;
    let candidates = resolve_candidates(&manifest, &a.reference, &a.candidate)?;
    create_out_dir(&a.out)?;

    let (report, errors) = evaluate_dataset(&manifest, &tolerances, &a.reference, &candidates);
    let mut outputs = Vec::new();
    for &format in &a.format {
        let name = format!("report.{}", format.extension());
        write_report(&report, format, &a.out.join(&name))?;
        outputs.push(name);
    }
    info!(
        "evaluated {} rows, {} patient aggregates, {} errors",
        report.rows.len(),
        report.aggregates.len(),
        errors.len()
    );
    write_sidecar(
        &a.out,
        "evaluate",
        jobs,
        serde_json::json!({
            "manifest": a.manifest,
            "reference": a.reference,
            "candidates": candidates,
            "tolerances": tolerances,
        }),
        outputs,
        &errors,
    )?;
    Ok(report_errors(&errors))
}

fn cmd_calibrate(a: &CalibrateArgs, jobs: usize) -> Result<u8, Fatal> {
    let manifest = load_manifest(&a.manifest)?;
    if manifest.observers().len() < 2 {
        return Err(Fatal("calibration needs at least two observers".into()));
    }
    create_out_dir(&a.out)?;

    let loaded: Vec<(usize, String, String, Result<Mask, String>)> = manifest
        .scans
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.segmentations.iter().flat_map(move |(obs, organs)| {
                organs
                    .iter()
                    .map(move |(organ, path)| (i, obs.clone(), organ.clone(), path.clone()))
            })
        })
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(i, obs, organ, path)| {
            let m = read_mask(&path).map_err(|e| e.to_string());
            (i, obs, organ, m)
        })
        .collect();

    let mut scans: Vec<CalibrationScan> = manifest
        .scans
        .iter()
        .map(|s| CalibrationScan {
            scan_id: format!("{}/{}", s.patient_id, s.scan_id),
            observers: BTreeMap::new(),
        })
        .collect();
    let mut errors = Vec::new();
    for (i, obs, organ, mask) in loaded {
        match mask {
            Ok(m) => {
                scans[i].observers.entry(obs).or_default().insert(organ, m);
            }
            Err(message) => errors.push(CaseError {
                patient: manifest.scans[i].patient_id.clone(),
                scan: manifest.scans[i].scan_id.clone(),
                organ,
                pair: obs,
                kind: "read_error".into(),
                message,
            }),
        }
    }

    let weighting = if a.unweighted_percentile {
        Weighting::Unweighted
    } else {
        Weighting::Area
    };
    let outcome = calibrate_organ_tolerances(&scans, a.percentile, weighting)?;
    for w in &outcome.warnings {
        warn!("{w}");
    }
    let path = a.out.join("tolerances.json");
    let text = serde_json::to_string_pretty(&outcome.tolerances)? + "\n";
    std::fs::write(&path, text).map_err(|e| Fatal(format!("{}: {e}", path.display())))?;

    let mut table = String::from("organ\ttau_mm\tsamples\tobserver_pairs\n");
    for (organ, c) in &outcome.organs {
        let _ = writeln!(table, "{organ}\t{}\t{}\t{}", c.tau_mm, c.sample_count, c.pair_count);
    }
    print!("{table}");
    write_sidecar(
        &a.out,
        "calibrate",
        jobs,
        serde_json::json!({
            "manifest": a.manifest,
            "percentile": a.percentile,
            "weighting": if a.unweighted_percentile { "unweighted" } else { "area" },
            "warnings": outcome.warnings,
        }),
        vec!["tolerances.json".into()],
        &errors,
    )?;
    Ok(report_errors(&errors))
}

/// One line of the perturbation sensitivity table.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    pub patient: String,
    pub scan: String,
    pub organ: String,
    pub perturbation: String,
    pub point: SweepPoint,
}

pub const SENSITIVITY_HEADER: [&str; 10] = [
    "patient",
    "scan",
    "organ",
    "perturbation",
    "magnitude",
    "surface_dsc",
    "tau_mm",
    "tau_quantized_mm",
    "volumetric_dsc",
    "flags",
];

/// Augmentation-chain magnitudes: fractions of the configured ranges.
pub const CHAIN_MAGNITUDES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn sensitivity_for_scan(
    scan: &ScanEntry,
    reference: &str,
    manifest: &DatasetManifest,
    tolerances: &ToleranceSpec,
    config: &AugmentationConfig,
    args: &PerturbArgs,
) -> (Vec<SensitivityRow>, Vec<CaseError>) {
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let err = |organ: &str, kind: &str, message: String| CaseError {
        patient: scan.patient_id.clone(),
        scan: scan.scan_id.clone(),
        organ: organ.to_string(),
        pair: reference.to_string(),
        kind: kind.to_string(),
        message,
    };
    let Some(organs) = scan.segmentations.get(reference) else {
        return (rows, errors);
    };
    let mut masks = BTreeMap::new();
    for (organ, path) in organs {
        match read_mask(path) {
            Ok(m) => {
                masks.insert(organ.clone(), m);
            }
            Err(e) => errors.push(err(organ, "read_error", e.to_string())),
        }
    }
    let mut push = |organ: &str, kind: &str, points: Vec<SweepPoint>| {
        rows.extend(points.into_iter().map(|point| SensitivityRow {
            patient: scan.patient_id.clone(),
            scan: scan.scan_id.clone(),
            organ: organ.to_string(),
            perturbation: kind.to_string(),
            point,
        }));
    };
    let ks: Vec<usize> = (0..=args.max_shift).collect();
    for (organ, m) in &masks {
        let Some(tau) = tolerances.tolerance_for(organ) else {
            errors.push(err(organ, "no_tolerance", "organ has no tolerance and no default is set".into()));
            continue;
        };
        match translation_sweep(m, Axis::X, &ks, tau) {
            Ok(p) => push(organ, "translate_x_voxels", p),
            Err(e) => errors.push(err(organ, "metric_error", e.to_string())),
        }
        match augmentation_sweep(m, config, &CHAIN_MAGNITUDES, tau, args.mask_warp) {
            Ok(p) => push(organ, "augmentation_chain", p),
            Err(e) => errors.push(err(organ, "metric_error", e.to_string())),
        }
    }

    // mirror with label swap: each organ against the mirrored copy of itself
    let grids_agree = masks.values().next().is_some_and(|first| {
        masks
            .values()
            .all(|m| m.shape() == first.shape() && m.spacing() == first.spacing())
    });
    if grids_agree {
        let first = masks.values().next().expect("non-empty");
        let (shape, spacing) = (first.shape(), first.spacing());
        match MultiOrganSegmentation::new(shape, spacing, masks.clone()) {
            Ok(seg) => {
                let mirrored = mirror_with_label_swap(&seg, &manifest.taxonomy, Axis::X);
                for (organ, original) in seg.channels() {
                    let Some(tau) = tolerances.tolerance_for(organ) else {
                        continue;
                    };
                    let Some(swapped) = mirrored.channel(organ) else {
                        errors.push(err(
                            organ,
                            "missing_partner",
                            "mirror partner is not segmented".into(),
                        ));
                        continue;
                    };
                    let point = surface_dsc(original, swapped, tau).and_then(|s| {
                        Ok(SweepPoint {
                            magnitude: 1.0,
                            surface: s,
                            volumetric: volumetric_dsc(original, swapped)?,
                        })
                    });
                    match point {
                        Ok(p) => push(organ, "mirror_swap", vec![p]),
                        Err(e) => errors.push(err(organ, "metric_error", e.to_string())),
                    }
                }
            }
            Err(e) => errors.push(err("*", "grid_mismatch", e.to_string())),
        }
    } else if !masks.is_empty() {
        errors.push(err("*", "grid_mismatch", "organ masks do not share one grid; mirror skipped".into()));
    }
    (rows, errors)
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x}"))
}

pub fn render_sensitivity_csv(rows: &[SensitivityRow]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(SENSITIVITY_HEADER).expect("in-memory write");
    for r in rows {
        let s = &r.point.surface;
        let flags = if s.value.is_none() { "surface_undefined" } else { "" };
        w.write_record([
            r.patient.clone(),
            r.scan.clone(),
            r.organ.clone(),
            r.perturbation.clone(),
            format!("{}", r.point.magnitude),
            num(s.value),
            num(Some(s.tau_mm)),
            num(Some(s.quantized_tau_mm)),
            num(r.point.volumetric),
            flags.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn render_sensitivity_markdown(rows: &[SensitivityRow]) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", x * 100.0));
    let mut out = String::from("# Metric sensitivity\n\nDSC values in percent.\n\n");
    out.push_str("| Patient | Scan | Organ | Perturbation | Magnitude | τ (mm) | Surface DSC (%) | Volumetric DSC (%) |\n");
    out.push_str("|---|---|---|---|---:|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            r.patient,
            r.scan,
            r.organ,
            r.perturbation,
            r.point.magnitude,
            r.point.surface.quantized_tau_mm,
            pct(r.point.surface.value),
            pct(r.point.volumetric),
        );
    }
    out
}

fn cmd_perturb(a: &PerturbArgs, jobs: usize) -> Result<u8, Fatal> {
    let manifest = load_manifest(&a.manifest)?;
    let tolerances = load_tolerances(&a.tolerance)?;
    if !manifest.observers().contains(&a.reference) {
        return Err(Fatal(format!("reference observer {:?} is not in the manifest", a.reference)));
    }
    let mut config = match &a.augmentation {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Fatal(format!("{}: {e}", path.display())))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize::<_, AugmentationConfig>(de)
                .map_err(|e| Fatal(format!("{}: {}: {}", path.display(), e.path(), e.inner())))?
        }
        None => {
            let seed = a
                .seed
                .ok_or_else(|| Fatal("--seed is required without --augmentation".into()))?;
            AugmentationConfig::standard(seed)
        }
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    create_out_dir(&a.out)?;

    let per_scan: Vec<(Vec<SensitivityRow>, Vec<CaseError>)> = manifest
        .scans
        .par_iter()
        .map(|s| sensitivity_for_scan(s, &a.reference, &manifest, &tolerances, &config, a))
        .collect();
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (r, e) in per_scan {
        rows.extend(r);
        errors.extend(e);
    }
    rows.sort_by(|x, y| {
        (&x.patient, &x.scan, &x.organ, &x.perturbation)
            .cmp(&(&y.patient, &y.scan, &y.organ, &y.perturbation))
            .then(x.point.magnitude.total_cmp(&y.point.magnitude))
    });

    let mut outputs = Vec::new();
    for &format in &a.format {
        let name = format!("sensitivity.{}", format.extension());
        let bytes = match format {
            ReportFormat::Csv => render_sensitivity_csv(&rows),
            ReportFormat::Markdown => render_sensitivity_markdown(&rows).into_bytes(),
        };
        let path = a.out.join(&name);
        std::fs::write(&path, bytes).map_err(|e| Fatal(format!("{}: {e}", path.display())))?;
        outputs.push(name);
    }
    write_sidecar(
        &a.out,
        "perturb",
        jobs,
        serde_json::json!({
            "manifest": a.manifest,
            "reference": a.reference,
            "augmentation": config,
            "mask_warp": a.mask_warp,
            "max_shift": a.max_shift,
            "chain_magnitudes": CHAIN_MAGNITUDES,
            "tolerances": tolerances,
        }),
        outputs,
        &errors,
    )?;
    Ok(report_errors(&errors))
}

fn cmd_table(a: &TableArgs) -> Result<u8, Fatal> {
    let report = read_report_csv(&a.report)?;
    match &a.out {
        Some(path) => write_summary(&report, a.format, path)?,
        None => {
            let bytes = match a.format {
                ReportFormat::Csv => crate::io::report::render_summary_csv(&report),
                ReportFormat::Markdown => crate::io::report::render_markdown(&report).into_bytes(),
            };
            use std::io::Write;
            std::io::stdout().write_all(&bytes)?;
        }
    }
    Ok(EXIT_OK)
}
