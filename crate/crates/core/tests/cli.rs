mod common;

use std::path::Path;

use common::*;
use surfdice::grid::{GridShape, Mask, Spacing};
use surfdice::io::nifti::write_mask;
use surfdice::io::report::parse_report_csv;

fn write_manifest(dir: &Path, doc: serde_json::Value) -> String {
    let p = dir.join("manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn save(dir: &Path, rel: &str, m: &Mask) -> String {
    let p = dir.join(rel);
    std::fs::create_dir_all(p.parent().unwrap()).unwrap();
    write_mask(m, &p).unwrap();
    rel.to_string()
}

fn slab(shape: GridShape, sp: Spacing, x0: usize) -> Mask {
    Mask::from_fn(shape, sp, |x, y, z| (x0..x0 + 6).contains(&x) && (2..12).contains(&y) && (1..7).contains(&z))
}

#[test]
fn identical_observers_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let sp = Spacing::new(1.0, 1.0, 2.0).unwrap();
    let s = GridShape::new(16, 14, 8).unwrap();
    let m = slab(s, sp, 3);
    let doc = serde_json::json!({"patients": [{"patient_id": "p", "scan_id": "s", "segmentations": {
        "a": {"Brainstem": save(dir.path(), "a.nii", &m)},
        "b": {"Brainstem": save(dir.path(), "b.nii.gz", &m)}}}]});
    let manifest = write_manifest(dir.path(), doc);
    let out = dir.path().join("out");
    let (code, _, err) = run_cli(&["evaluate", "--manifest", &manifest, "--default-tau-mm", "2",
        "--reference", "a", "--out", out.to_str().unwrap(), "--format", "csv,md", "--jobs", "2"]);
    assert_eq!(code, 0, "{err}");
    let r = parse_report_csv(&std::fs::read(out.join("report.csv")).unwrap()).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.rows[0].surface_dsc, Some(1.0));
    assert_eq!(r.rows[0].volumetric_dsc, Some(1.0));
    assert_eq!(r.rows[0].pair, "a/b");
    assert_eq!(r.aggregates[0].surface_dsc, Some(1.0));
    let md = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(md.contains("| Brainstem | a/b | 1 | 100.0 ± 0.0 | 100.0 ± 0.0 |"), "{md}");
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "evaluate");
    assert_eq!(run["jobs"], 2);
}

#[test]
fn missing_candidate_organ_is_flagged_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_two_patient_fixture(dir.path());
    // drop one organ from the candidate
    let mut doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&fx.manifest).unwrap()).unwrap();
    doc["patients"][0]["segmentations"]["cand"].as_object_mut().unwrap().remove("Parotid-Rt");
    let manifest = write_manifest(dir.path(), doc);
    let out = dir.path().join("out");
    let (code, _, err) = run_cli(&["evaluate", "--manifest", &manifest, "--default-tau-mm", "1.5",
        "--reference", "ref", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.lines().any(|l| l.contains("organ=Parotid-Rt") && l.contains("missing_candidate")), "{err}");
    let r = parse_report_csv(&std::fs::read(out.join("report.csv")).unwrap()).unwrap();
    let row = r.rows.iter().find(|r| r.patient == "p1" && r.organ == "Parotid-Rt").unwrap();
    assert_eq!(row.flags, vec!["missing_candidate".to_string()]);
    assert_eq!(row.surface_dsc, None);
    let agg = r.aggregates.iter().find(|a| a.patient == "p1").unwrap();
    assert!(agg.flags.contains(&"incomplete".to_string()));
}

#[test]
fn fixture_report_matches_oracle_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_two_patient_fixture(dir.path());
    let tol = dir.path().join("tol.json");
    std::fs::write(&tol, r#"{"organ_tolerances_mm": {"Brainstem": 2.0, "Parotid-Lt": 1.0}, "default_tau_mm": 1.5}"#).unwrap();
    let out = dir.path().join("out");
    let (code, _, err) = run_cli(&["evaluate", "--manifest", fx.manifest.to_str().unwrap(),
        "--tolerances", tol.to_str().unwrap(), "--reference", "ref", "--candidate", "cand",
        "--out", out.to_str().unwrap(), "--jobs", "3"]);
    assert_eq!(code, 0, "{err}");
    let r = parse_report_csv(&std::fs::read(out.join("report.csv")).unwrap()).unwrap();
    let tau = |o: &str| match o { "Brainstem" => 2.0, "Parotid-Lt" => 1.0, _ => 1.5 };
    for patient in ["p1", "p2"] {
        let (mut num, mut den) = (0.0, 0.0);
        for row in r.rows.iter().filter(|r| r.patient == patient) {
            let key = |o: &str| (patient.to_string(), o.to_string(), row.organ.clone());
            let want = oracle_surface_dsc(&fx.masks[&key("ref")], &fx.masks[&key("cand")], tau(&row.organ));
            assert_eq!(row.tau_mm, Some(tau(&row.organ)));
            match (row.surface_dsc, want.value) {
                (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-9 * y.max(1e-300), "{x} vs {y}"),
                (x, y) => assert_eq!(x, y),
            }
            num += want.overlap_1 + want.overlap_2;
            den += want.total_1 + want.total_2;
        }
        let agg = r.aggregates.iter().find(|a| a.patient == patient).unwrap().surface_dsc.unwrap();
        assert!((agg - num / den).abs() <= 1e-9, "{patient}: {agg} vs {}", num / den);
    }
    // the missed parotid scores 0, the empty candidate is a defined value
    let missed = r.rows.iter().find(|r| r.patient == "p2" && r.organ == "Parotid-Lt").unwrap();
    assert_eq!((missed.surface_dsc, missed.volumetric_dsc), (Some(0.0), Some(0.0)));
}

#[test]
fn configuration_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_two_patient_fixture(dir.path());
    let m = fx.manifest.to_str().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["evaluate", "--manifest", m, "--default-tau-mm", "1", "--reference", "ref", "--candidate", "ref", "--out", o],
        vec!["evaluate", "--manifest", m, "--reference", "ref", "--out", o],
        vec!["evaluate", "--manifest", m, "--default-tau-mm", "-1", "--reference", "ref", "--out", o],
        vec!["evaluate", "--manifest", "/nonexistent/manifest.json", "--default-tau-mm", "1", "--reference", "ref", "--out", o],
        vec!["evaluate", "--manifest", m, "--default-tau-mm", "1", "--reference", "nobody", "--out", o],
        vec!["evaluate", "--manifest", m, "--default-tau-mm", "1", "--reference", "ref", "--out", o, "--jobs", "0"],
        vec!["perturb", "--manifest", m, "--default-tau-mm", "1", "--reference", "ref", "--out", o],
        vec!["table", "/nonexistent/report.csv"],
    ];
    for args in cases {
        let (code, _, err) = run_cli(&args);
        assert_eq!(code, 1, "{args:?}: {err}");
        assert!(err.starts_with("error"), "{err}");
    }
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"patients": [{"patient_id": "p", "scan_id": "s", "segmentations": {"a": {"Spleen": "x.nii"}}}]}"#).unwrap();
    let (code, _, err) = run_cli(&["evaluate", "--manifest", bad.to_str().unwrap(), "--default-tau-mm", "1", "--reference", "a", "--out", o]);
    assert_eq!(code, 1);
    assert!(err.contains("Spleen"), "{err}");
}

#[test]
fn jobs_env_fallback_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_two_patient_fixture(dir.path());
    let out = dir.path().join("o");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_surfdice"))
        .args(["evaluate", "--manifest", fx.manifest.to_str().unwrap(), "--default-tau-mm", "1",
            "--reference", "ref", "--out", out.to_str().unwrap()])
        .env("SURFDICE_JOBS", "3")
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["jobs"], 3);
}

/// Area-weighted nearest-rank percentile over all-pairs distances pooled in
/// both directions.
fn oracle_tau(a: &Mask, b: &Mask, q: f64) -> f64 {
    let sp = a.spacing();
    let (sa, sb) = (oracle_surface(a), oracle_surface(b));
    let mut samples = Vec::new();
    for (from, to) in [(&sa, &sb), (&sb, &sa)] {
        for (p, area) in from.iter() {
            let d = to.iter().map(|(r, _)| raster_distance(*p, *r, &sp)).fold(f64::INFINITY, f64::min);
            samples.push((d, *area));
        }
    }
    samples.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let total: f64 = samples.iter().map(|s| s.1).sum();
    let mut acc = 0.0;
    for (d, w) in &samples {
        acc += w;
        if acc >= q * total * (1.0 - 1e-12) {
            return *d;
        }
    }
    samples.last().unwrap().0
}

#[test]
fn calibrate_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let sp = Spacing::isotropic(1.0).unwrap();
    let s = GridShape::new(20, 14, 8).unwrap();
    let a = slab(s, sp, 4);
    let b = slab(s, sp, 5);
    let doc = serde_json::json!({"patients": [{"patient_id": "p", "scan_id": "s", "segmentations": {
        "x": {"Brainstem": save(dir.path(), "x/bs.nii", &a), "Mandible": save(dir.path(), "x/md.nii", &a),
              "Lens-Lt": save(dir.path(), "x/lens.nii", &a)},
        "y": {"Brainstem": save(dir.path(), "y/bs.nii", &b), "Mandible": save(dir.path(), "y/md.nii", &a)}}}]});
    let manifest = write_manifest(dir.path(), doc);
    let out = dir.path().join("cal");
    let (code, stdout, err) = run_cli(&["calibrate", "--manifest", &manifest, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let spec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("tolerances.json")).unwrap()).unwrap();
    let tol = &spec["organ_tolerances_mm"];
    assert_eq!(tol["Mandible"], 0.0);
    assert_eq!(tol["Brainstem"].as_f64().unwrap(), oracle_tau(&a, &b, 0.95));
    assert!(tol.get("Lens-Lt").is_none(), "organ with one observer must be omitted");
    assert!(err.contains("Lens-Lt"), "expected a warning naming the organ: {err}");
    assert!(stdout.contains("Brainstem\t"));
    assert_eq!(spec["percentile"], 0.95);

    // the output feeds straight back into evaluate
    let eval_out = dir.path().join("ev");
    let (code, _, err) = run_cli(&["evaluate", "--manifest", &manifest, "--tolerances", out.join("tolerances.json").to_str().unwrap(),
        "--default-tau-mm", "1", "--reference", "x", "--out", eval_out.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}"); // Lens-Lt missing for y
    let r = parse_report_csv(&std::fs::read(eval_out.join("report.csv")).unwrap()).unwrap();
    let bs = r.rows.iter().find(|r| r.organ == "Brainstem").unwrap();
    assert_eq!(bs.surface_dsc, Some(1.0), "τ at the 95th percentile of a unit shift covers the shift");

    // unweighted variant runs and is recorded
    let (code, _, _) = run_cli(&["calibrate", "--manifest", &manifest, "--out", out.to_str().unwrap(), "--unweighted-percentile"]);
    assert_eq!(code, 0);
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["settings"]["weighting"], "unweighted");
}

#[test]
fn calibrate_needs_two_observers() {
    let dir = tempfile::tempdir().unwrap();
    let m = slab(GridShape::new(12, 14, 8).unwrap(), Spacing::isotropic(1.0).unwrap(), 2);
    let doc = serde_json::json!({"patients": [{"patient_id": "p", "scan_id": "s",
        "segmentations": {"x": {"Brainstem": save(dir.path(), "x.nii", &m)}}}]});
    let manifest = write_manifest(dir.path(), doc);
    let (code, _, err) = run_cli(&["calibrate", "--manifest", &manifest, "--out", dir.path().join("c").to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("two observers"));
}

#[test]
fn perturb_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let sp = Spacing::isotropic(1.0).unwrap();
    let s = GridShape::new(30, 16, 10).unwrap();
    // mirror-symmetric phantom: parotids are reflections of each other
    let lt = Mask::from_fn(s, sp, |x, y, z| (3..9).contains(&x) && (4..10).contains(&y) && (2..7).contains(&z));
    let rt = lt.flipped(surfdice::grid::Axis::X);
    let bs = Mask::from_fn(s, sp, |x, y, z| (12..18).contains(&x) && (3..12).contains(&y) && (1..9).contains(&z));
    let doc = serde_json::json!({"patients": [{"patient_id": "p", "scan_id": "s", "segmentations": {"r": {
        "Parotid-Lt": save(dir.path(), "lt.nii", &lt), "Parotid-Rt": save(dir.path(), "rt.nii", &rt),
        "Brainstem": save(dir.path(), "bs.nii", &bs)}}}]});
    let manifest = write_manifest(dir.path(), doc);
    let out = dir.path().join("pt");
    let args = ["perturb", "--manifest", &manifest, "--default-tau-mm", "1.5", "--reference", "r",
        "--seed", "7", "--out", out.to_str().unwrap(), "--format", "csv,md"];
    let (code, _, err) = run_cli(&args);
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(out.join("sensitivity.csv")).unwrap();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    let value = |r: &csv::StringRecord| r[5].parse::<f64>().unwrap();

    for organ in ["Parotid-Lt", "Parotid-Rt", "Brainstem"] {
        let of = |kind: &str| rows.iter().filter(|r| &r[2] == organ && &r[3] == kind).collect::<Vec<_>>();
        let shifts = of("translate_x_voxels");
        assert_eq!(shifts.len(), 5);
        assert_eq!(value(shifts[0]), 1.0);
        assert!(shifts.windows(2).all(|w| value(w[1]) <= value(w[0])), "{organ}: not monotone");
        let chain = of("augmentation_chain");
        assert_eq!(&chain[0][4], "0");
        assert_eq!(value(chain[0]), 1.0, "{organ}: zero-magnitude chain");
    }
    for organ in ["Parotid-Lt", "Parotid-Rt"] {
        let m = rows.iter().find(|r| &r[2] == organ && &r[3] == "mirror_swap").unwrap();
        assert_eq!(value(m), 1.0, "{organ}: symmetric phantom");
    }
    assert!(std::fs::read_to_string(out.join("sensitivity.md")).unwrap().contains("| p | s | Brainstem | translate_x_voxels | 0 |"));

    // deterministic per seed and independent of --jobs
    let again = dir.path().join("pt2");
    let mut args2 = args.to_vec();
    let a2 = again.to_str().unwrap().to_string();
    args2[10] = &a2;
    args2.extend(["--jobs", "1"]);
    let (code, _, err) = run_cli(&args2);
    assert_eq!(code, 0, "{args2:?}: {err}");
    assert_eq!(std::fs::read(again.join("sensitivity.csv")).unwrap(), text.as_bytes());
}

#[test]
fn table_renders_summary() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.csv");
    std::fs::write(&report, "\
patient,scan,organ,pair,surface_dsc,tau_mm,tau_quantized_mm,volumetric_dsc,overlap_area_1_mm2,overlap_area_2_mm2,total_area_1_mm2,total_area_2_mm2,volume_1_mm3,volume_2_mm3,flags
p1,s,Brainstem,a/b,0.9,1,1,0.8,9,9,10,10,100,90,
p2,s,Brainstem,a/b,0.7,1,1,-,7,7,10,10,300,10,volumetric_undefined
p1,*,aggregate,a/b,0.9,-,-,-,9,9,10,10,-,-,aggregate
p2,*,aggregate,a/b,0.7,-,-,-,7,7,10,10,-,-,aggregate
").unwrap();
    let (code, md, err) = run_cli(&["table", report.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(md.contains("| Brainstem | a/b | 2 | 80.0 ± 10.0 | 80.0 ± 0.0 | 10.0 | 200.0 |"), "{md}");
    assert!(md.contains("| **Aggregate** | a/b | 2 | 80.0 ± 10.0 | - | - | - |"), "{md}");
    assert!(md.contains("| p2 | a/b | 70.0 | - |"), "{md}");

    let out = dir.path().join("summary.csv");
    let (code, _, _) = run_cli(&["table", report.to_str().unwrap(), "--format", "csv", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "organ,pair,n,surface_dsc_mean,surface_dsc_stddev,volumetric_dsc_mean,volumetric_dsc_stddev,mean_area_mm2,mean_volume_mm3");
    let f: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&f[..3], ["Brainstem", "a/b", "2"]);
    assert!((f[3].parse::<f64>().unwrap() - 0.8).abs() < 1e-15);
    assert!((f[4].parse::<f64>().unwrap() - 0.1).abs() < 1e-15);
    assert_eq!((f[5], f[6]), ("0.8", "0"));

    std::fs::write(&report, "not,a,report\n").unwrap();
    assert_eq!(run_cli(&["table", report.to_str().unwrap()]).0, 1);
}
