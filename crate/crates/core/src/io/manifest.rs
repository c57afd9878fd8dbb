//! Dataset manifest: which mask files belong to which patient, scan,
//! observer and organ.
//!
//! ```json
//! {
//!   "taxonomy": { "organs": ["Brainstem", "Parotid-Lt", "Parotid-Rt"],
//!                 "pairs": [["Parotid-Lt", "Parotid-Rt"]] },
//!   "patients": [
//!     { "patient_id": "p1", "scan_id": "s1", "ct_path": "p1/ct.nii.gz",
//!       "segmentations": { "rad1": { "Brainstem": "p1/rad1/brainstem.nii.gz" } } }
//!   ],
//!   "relevant_organs": { "p1": ["Brainstem"] }
//! }
//! ```
//!
//! `taxonomy` defaults to the 21 head-and-neck organs. Relative paths are
//! resolved against the manifest's directory. The schema lives in
//! `docs/manifest.schema.json`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::grid::Taxonomy;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("{pointer}: organ {organ:?} is not in the taxonomy")]
    UnknownOrgan { pointer: String, organ: String },
    #[error("{pointer}: duplicate path {path} (first used at {first})")]
    DuplicatePath {
        pointer: String,
        path: PathBuf,
        first: String,
    },
    #[error("{pointer}: duplicate scan {patient}/{scan}")]
    DuplicateScan {
        pointer: String,
        patient: String,
        scan: String,
    },
    #[error("{pointer}: unknown patient {patient:?}")]
    UnknownPatient { pointer: String, patient: String },
    #[error("/taxonomy: {0}")]
    Taxonomy(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    #[serde(default)]
    taxonomy: Option<RawTaxonomy>,
    patients: Vec<RawScan>,
    #[serde(default)]
    relevant_organs: Option<BTreeMap<String, Vec<String>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTaxonomy {
    organs: Vec<String>,
    #[serde(default)]
    pairs: Vec<(String, String)>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScan {
    patient_id: String,
    scan_id: String,
    #[serde(default)]
    ct_path: Option<String>,
    segmentations: BTreeMap<String, BTreeMap<String, String>>,
}

/// One CT scan and its segmentations, paths resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanEntry {
    pub patient_id: String,
    pub scan_id: String,
    pub ct_path: Option<PathBuf>,
    /// observer id → organ → mask path
    pub segmentations: BTreeMap<String, BTreeMap<String, PathBuf>>,
}

impl ScanEntry {
    pub fn observers(&self) -> impl Iterator<Item = &str> {
        self.segmentations.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub taxonomy: Taxonomy,
    pub scans: Vec<ScanEntry>,
    relevant_organs: BTreeMap<String, Vec<String>>,
}

impl DatasetManifest {
    /// Organs that count towards `patient`'s aggregate: the explicit list
    /// if given, else every organ segmented in any of the patient's scans.
    pub fn relevant_organs(&self, patient: &str) -> Vec<String> {
        if let Some(list) = self.relevant_organs.get(patient) {
            return list.clone();
        }
        let set: BTreeSet<&String> = self
            .scans
            .iter()
            .filter(|s| s.patient_id == patient)
            .flat_map(|s| s.segmentations.values().flat_map(|m| m.keys()))
            .collect();
        set.into_iter().cloned().collect()
    }

    /// Every observer id, sorted.
    pub fn observers(&self) -> BTreeSet<String> {
        self.scans
            .iter()
            .flat_map(|s| s.segmentations.keys().cloned())
            .collect()
    }
}

/// JSON pointer token escaping.
fn token(s: &str) -> String {
    s.replace('~', "~0").replace('/', "~1")
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&token(key)),
            Segment::Enum { variant } => out.push_str(&token(variant)),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse_manifest(&text, base)
}

/// Parses and validates manifest JSON; relative paths are joined to `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<DatasetManifest, ManifestError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawManifest = serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = pointer_of(e.path());
        ManifestError::Schema {
            pointer: if pointer.is_empty() { "/".into() } else { pointer },
            message: e.into_inner().to_string(),
        }
    })?;

    let taxonomy = match raw.taxonomy {
        Some(t) => Taxonomy::new(t.organs, t.pairs).map_err(ManifestError::Taxonomy)?,
        None => Taxonomy::default(),
    };

    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };

    let mut used: HashMap<PathBuf, String> = HashMap::new();
    let mut claim = |path: &PathBuf, pointer: String| -> Result<(), ManifestError> {
        if let Some(first) = used.get(path) {
            return Err(ManifestError::DuplicatePath {
                pointer,
                path: path.clone(),
                first: first.clone(),
            });
        }
        used.insert(path.clone(), pointer);
        Ok(())
    };

    let mut seen_scans = BTreeSet::new();
    let mut scans = Vec::with_capacity(raw.patients.len());
    for (i, s) in raw.patients.into_iter().enumerate() {
        if !seen_scans.insert((s.patient_id.clone(), s.scan_id.clone())) {
            return Err(ManifestError::DuplicateScan {
                pointer: format!("/patients/{i}"),
                patient: s.patient_id,
                scan: s.scan_id,
            });
        }
        let ct_path = match &s.ct_path {
            Some(p) => {
                let p = resolve(p);
                claim(&p, format!("/patients/{i}/ct_path"))?;
                Some(p)
            }
            None => None,
        };
        let mut segmentations = BTreeMap::new();
        for (observer, organs) in &s.segmentations {
            let mut resolved = BTreeMap::new();
            for (organ, p) in organs {
                let pointer = format!("/patients/{i}/segmentations/{}/{}", token(observer), token(organ));
                if !taxonomy.contains(organ) {
                    return Err(ManifestError::UnknownOrgan {
                        pointer,
                        organ: organ.clone(),
                    });
                }
                let p = resolve(p);
                claim(&p, pointer)?;
                resolved.insert(organ.clone(), p);
            }
            segmentations.insert(observer.clone(), resolved);
        }
        scans.push(ScanEntry {
            patient_id: s.patient_id,
            scan_id: s.scan_id,
            ct_path,
            segmentations,
        });
    }

    let relevant_organs = raw.relevant_organs.unwrap_or_default();
    for (patient, organs) in &relevant_organs {
        let pointer = format!("/relevant_organs/{}", token(patient));
        if !scans.iter().any(|s| &s.patient_id == patient) {
            return Err(ManifestError::UnknownPatient {
                pointer,
                patient: patient.clone(),
            });
        }
        for (j, organ) in organs.iter().enumerate() {
            if !taxonomy.contains(organ) {
                return Err(ManifestError::UnknownOrgan {
                    pointer: format!("{pointer}/{j}"),
                    organ: organ.clone(),
                });
            }
        }
    }

    Ok(DatasetManifest {
        taxonomy,
        scans,
        relevant_organs,
    })
}
