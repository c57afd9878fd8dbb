//! File formats: NIfTI-1 volumes, the dataset manifest and evaluation
//! reports.

pub mod manifest;
pub mod nifti;
pub mod report;

pub use manifest::{load_manifest, parse_manifest, DatasetManifest, ManifestError, ScanEntry};
pub use nifti::{read_ct, read_mask, read_nifti, write_ct, write_mask, NiftiError, NiftiImage};
pub use report::{
    read_report_csv, write_report, write_summary, EvaluationReport, ReportError, ReportFormat,
    ReportRow,
};
