//! Volumetric Dice, the slice-sparse Dice estimate, tolerance quantization,
//! surface Dice at tolerance τ and per-patient aggregation.
//!
//! Undefined metric values (both inputs empty, zero denominators) are `None`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::{distance_transform, distances_to_other_surface};
use crate::grid::{union_boxes, validate_compatible, GridError, Mask, Spacing};
use crate::surface::{extract_surface, NeighborAreaTable, SurfaceError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("case {case}: {source}")]
    CaseGrid {
        case: usize,
        #[source]
        source: GridError,
    },
    #[error("tolerance must be finite and >= 0, got {0}")]
    InvalidTolerance(f64),
    #[error("no surface DSC breakdown for relevant organ {0:?}")]
    MissingOrgan(String),
}

impl From<SurfaceError> for MetricError {
    fn from(e: SurfaceError) -> Self {
        match e {
            SurfaceError::SpacingMismatch(g) => MetricError::Grid(g),
        }
    }
}

/// `2|a ∩ b| / (|a| + |b|)`; `None` when both masks are empty.
pub fn volumetric_dsc(a: &Mask, b: &Mask) -> Result<Option<f64>, MetricError> {
    validate_compatible(a, b)?;
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(None);
    }
    // the voxel volume cancels; counting keeps the ratio exact
    Ok(Some(2.0 * both as f64 / (na + nb) as f64))
}

/// Volumetric Dice estimated from slice-sparse ground truth: intersections
/// are restricted to each case's labelled region and summed over all cases
/// before dividing.
pub fn sparse_volumetric_dsc(
    cases: &[(crate::grid::SparseLabels, Mask)],
) -> Result<Option<f64>, MetricError> {
    // (2|∩|, |gt| + |pred|, voxel volume) per case
    let mut terms = Vec::with_capacity(cases.len());
    for (case, (gt, pred)) in cases.iter().enumerate() {
        validate_compatible(gt.labelled(), pred)
            .map_err(|source| MetricError::CaseGrid { case, source })?;
        let (mut both, mut n) = (0usize, 0usize);
        for ((&l, &g), &p) in gt
            .labelled()
            .data()
            .iter()
            .zip(gt.values().data())
            .zip(pred.data())
        {
            if !l {
                continue;
            }
            n += g as usize + p as usize;
            both += (g && p) as usize;
        }
        terms.push((2 * both, n, pred.spacing().voxel_volume()));
    }
    // With one voxel size the volume cancels and integer counts are exact;
    // mixed voxel sizes are weighted by physical volume.
    let uniform = terms.windows(2).all(|w| w[0].2 == w[1].2);
    let (num, den) = if uniform {
        let (num, den) = terms.iter().fold((0, 0), |(a, b), t| (a + t.0, b + t.1));
        (num as f64, den as f64)
    } else {
        terms.iter().fold((0.0, 0.0), |(a, b), t| {
            (a + t.0 as f64 * t.2, b + t.1 as f64 * t.2)
        })
    };
    Ok((den > 0.0).then(|| num / den))
}

/// Default enumeration radius for [`quantize_tolerance`].
pub fn default_max_radius(tau: f64, spacing: &Spacing) -> f64 {
    tau + 2.0 * spacing.max()
}

/// Rounds `tau` to the nearest achievable inter-voxel distance
/// `sqrt((n1·dx)² + (n2·dy)² + (n3·dz)²)`, `n ∈ ℕ³`, enumerating offsets up
/// to `max_radius`. Ties go to the smaller distance.
pub fn quantize_tolerance(tau: f64, spacing: &Spacing, max_radius: f64) -> f64 {
    let d = spacing.as_array();
    let limit = d.map(|di| (max_radius / di).ceil().max(0.0) as u64);
    let mut best = 0.0f64;
    let mut best_gap = tau.abs();
    for n3 in 0..=limit[2] {
        let t3 = n3 as f64 * d[2];
        for n2 in 0..=limit[1] {
            let t2 = n2 as f64 * d[1];
            for n1 in 0..=limit[0] {
                let t1 = n1 as f64 * d[0];
                let dist = ((t1 * t1 + t2 * t2) + t3 * t3).sqrt();
                let gap = (dist - tau).abs();
                if gap < best_gap || (gap == best_gap && dist < best) {
                    best = dist;
                    best_gap = gap;
                }
            }
        }
    }
    best
}

/// Organ → tolerance (mm), with an optional fallback.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ToleranceSpec {
    #[serde(rename = "organ_tolerances_mm")]
    pub per_organ: BTreeMap<String, f64>,
    #[serde(
        rename = "default_tau_mm",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub default_tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub percentile: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<String>,
}

impl ToleranceSpec {
    pub fn uniform(tau: f64) -> Self {
        ToleranceSpec {
            default_tau: Some(tau),
            ..Default::default()
        }
    }

    pub fn tolerance_for(&self, organ: &str) -> Option<f64> {
        self.per_organ.get(organ).copied().or(self.default_tau)
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        for &t in self.per_organ.values().chain(self.default_tau.iter()) {
            if !(t.is_finite() && t >= 0.0) {
                return Err(MetricError::InvalidTolerance(t));
            }
        }
        Ok(())
    }
}

/// Everything surface Dice is computed from, kept for auditing and for
/// per-patient aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDscBreakdown {
    /// Area of surface 1 within the tolerance of surface 2 (mm²).
    pub overlap_area_1: f64,
    pub overlap_area_2: f64,
    pub total_area_1: f64,
    pub total_area_2: f64,
    pub tau_mm: f64,
    pub quantized_tau_mm: f64,
    pub value: Option<f64>,
}

impl SurfaceDscBreakdown {
    fn from_areas(o1: f64, o2: f64, t1: f64, t2: f64, tau: f64, q: f64) -> Self {
        let den = t1 + t2;
        SurfaceDscBreakdown {
            overlap_area_1: o1,
            overlap_area_2: o2,
            total_area_1: t1,
            total_area_2: t2,
            tau_mm: tau,
            quantized_tau_mm: q,
            value: (den > 0.0).then(|| (o1 + o2) / den),
        }
    }
}

/// Surface Dice of `a` and `b` at tolerance `tau` (mm).
///
/// `tau` is first rounded into the image's inter-voxel distance set. An
/// element counts as overlapping when its distance to the other surface is
/// `<=` the rounded tolerance. Both masks empty gives an undefined value;
/// exactly one empty gives 0.
pub fn surface_dsc(a: &Mask, b: &Mask, tau: f64) -> Result<SurfaceDscBreakdown, MetricError> {
    validate_compatible(a, b)?;
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(MetricError::InvalidTolerance(tau));
    }
    let spacing = a.spacing();
    let q = quantize_tolerance(tau, &spacing, default_max_radius(tau, &spacing));

    // Surfaces are cropped to the union box; out-of-grid voxels are
    // background anyway, so the result is identical to the full grid.
    let Some(bbox) = union_boxes(a.bounding_box(0), b.bounding_box(0)) else {
        return Ok(SurfaceDscBreakdown::from_areas(0.0, 0.0, 0.0, 0.0, tau, q));
    };
    let (a, b) = (a.crop(&bbox), b.crop(&bbox));

    let table = NeighborAreaTable::new(spacing);
    let sa = extract_surface(&a, &table)?;
    let sb = extract_surface(&b, &table)?;
    let raster = sa.raster_shape();
    let da = distance_transform(&sa, raster, spacing);
    let db = distance_transform(&sb, raster, spacing);

    let overlap = |pairs: Vec<(f64, f64)>| -> f64 {
        pairs
            .into_iter()
            .filter(|&(_, d)| d <= q)
            .map(|(area, _)| area)
            .fold(0.0, |acc, a| acc + a)
    };
    let o1 = overlap(distances_to_other_surface(&sa, &db));
    let o2 = overlap(distances_to_other_surface(&sb, &da));
    Ok(SurfaceDscBreakdown::from_areas(
        o1,
        o2,
        sa.total_area(),
        sb.total_area(),
        tau,
        q,
    ))
}

/// Area-weighted surface Dice over a patient's relevant organs: overlap and
/// total areas are summed before dividing.
pub fn aggregate_surface_dsc<S: AsRef<str>>(
    breakdowns: &BTreeMap<String, SurfaceDscBreakdown>,
    relevant: &[S],
) -> Result<Option<f64>, MetricError> {
    let (mut num, mut den) = (0.0, 0.0);
    for organ in relevant {
        let organ = organ.as_ref();
        let b = breakdowns
            .get(organ)
            .ok_or_else(|| MetricError::MissingOrgan(organ.to_string()))?;
        num += b.overlap_area_1 + b.overlap_area_2;
        den += b.total_area_1 + b.total_area_2;
    }
    Ok((den > 0.0).then(|| num / den))
}
