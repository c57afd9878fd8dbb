//! Organ-specific tolerances from inter-observer variation.
//!
//! Surface-to-surface distances between every pair of observers are pooled
//! per organ (both directions, each element weighted by its area) and the
//! tolerance is the 95th percentile of that population.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::{distance_transform, distances_to_other_surface};
use crate::grid::{union_boxes, validate_compatible, GridError, Mask};
use crate::metrics::ToleranceSpec;
use crate::surface::{extract_surface, NeighborAreaTable, SurfaceError};

/// Percentile used for organ tolerances.
pub const DEFAULT_PERCENTILE: f64 = 0.95;

/// Relative slack on the cumulative-weight comparison, so that e.g.
/// `0.95 · 100` unit weights reaches rank 95 despite rounding.
const RANK_REL_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrateError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("cannot collect distances from an empty segmentation")]
    EmptySegmentation,
    #[error("distance sample set is empty")]
    EmptySampleSet,
    #[error("percentile must lie in (0, 1], got {0}")]
    InvalidPercentile(f64),
}

impl From<SurfaceError> for CalibrateError {
    fn from(e: SurfaceError) -> Self {
        match e {
            SurfaceError::SpacingMismatch(g) => CalibrateError::Grid(g),
        }
    }
}

/// How samples vote in the percentile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Each surface element votes with its area in mm².
    #[default]
    Area,
    /// Each surface element votes once.
    Unweighted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceSample {
    pub distance: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleProvenance {
    pub scan_id: String,
    pub observer_a: String,
    pub observer_b: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistanceSampleSet {
    pub organ: String,
    pub samples: Vec<DistanceSample>,
    pub provenance: Vec<SampleProvenance>,
}

impl DistanceSampleSet {
    pub fn new(organ: impl Into<String>) -> Self {
        DistanceSampleSet {
            organ: organ.into(),
            ..Default::default()
        }
    }

    pub fn extend(&mut self, batch: Vec<DistanceSample>, provenance: SampleProvenance) {
        self.samples.extend(batch);
        self.provenance.push(provenance);
    }
}

/// Distances from each surface to the other, pooled: elements of `a` with
/// their distance to `b`'s surface followed by elements of `b` with their
/// distance to `a`'s.
pub fn collect_interobserver_distances(
    a: &Mask,
    b: &Mask,
) -> Result<Vec<DistanceSample>, CalibrateError> {
    validate_compatible(a, b)?;
    let (Some(ba), Some(bb)) = (a.bounding_box(0), b.bounding_box(0)) else {
        return Err(CalibrateError::EmptySegmentation);
    };
    let bbox = union_boxes(Some(ba), Some(bb)).expect("both boxes present");
    let (a, b) = (a.crop(&bbox), b.crop(&bbox));
    let spacing = a.spacing();
    let table = NeighborAreaTable::new(spacing);
    let sa = extract_surface(&a, &table)?;
    let sb = extract_surface(&b, &table)?;
    let raster = sa.raster_shape();
    let da = distance_transform(&sa, raster, spacing);
    let db = distance_transform(&sb, raster, spacing);
    Ok(distances_to_other_surface(&sa, &db)
        .into_iter()
        .chain(distances_to_other_surface(&sb, &da))
        .map(|(weight, distance)| DistanceSample { distance, weight })
        .collect())
}

/// Weighted nearest-rank percentile: the smallest distance `d` whose
/// cumulative weight (samples `<= d`) reaches `q` of the total.
pub fn tolerance_percentile(
    samples: &[DistanceSample],
    q: f64,
    weighting: Weighting,
) -> Result<f64, CalibrateError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(CalibrateError::InvalidPercentile(q));
    }
    if samples.is_empty() {
        return Err(CalibrateError::EmptySampleSet);
    }
    let weight = |s: &DistanceSample| match weighting {
        Weighting::Area => s.weight,
        Weighting::Unweighted => 1.0,
    };
    let mut sorted: Vec<&DistanceSample> = samples.iter().collect();
    // full (distance, weight) order makes the float sums independent of
    // input order
    sorted.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.weight.total_cmp(&b.weight))
    });
    let total: f64 = sorted.iter().map(|s| weight(s)).fold(0.0, |a, w| a + w);
    let target = q * total * (1.0 - RANK_REL_EPS);

    let mut cumulative = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let d = sorted[i].distance;
        while i < sorted.len() && sorted[i].distance == d {
            cumulative += weight(sorted[i]);
            i += 1;
        }
        if cumulative >= target {
            return Ok(d);
        }
    }
    Ok(sorted.last().expect("non-empty").distance)
}

/// One scan's segmentations: observer id → organ → mask.
#[derive(Debug, Clone)]
pub struct CalibrationScan {
    pub scan_id: String,
    pub observers: BTreeMap<String, BTreeMap<String, Mask>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrganCalibration {
    pub tau_mm: f64,
    pub sample_count: usize,
    pub pair_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub tolerances: ToleranceSpec,
    pub organs: BTreeMap<String, OrganCalibration>,
    pub warnings: Vec<String>,
}

/// Pools distances per organ over all scans and observer pairs, then takes
/// the `q` percentile. Organs without a usable pair are omitted with a
/// warning.
pub fn calibrate_organ_tolerances(
    scans: &[CalibrationScan],
    q: f64,
    weighting: Weighting,
) -> Result<CalibrationOutcome, CalibrateError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(CalibrateError::InvalidPercentile(q));
    }
    let mut pools: BTreeMap<String, DistanceSampleSet> = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut organs_seen = std::collections::BTreeSet::new();

    for scan in scans {
        let observers: Vec<(&String, &BTreeMap<String, Mask>)> = scan.observers.iter().collect();
        for organs in scan.observers.values() {
            organs_seen.extend(organs.keys().cloned());
        }
        for (i, (obs_a, organs_a)) in observers.iter().enumerate() {
            for (obs_b, organs_b) in &observers[i + 1..] {
                for (organ, mask_a) in organs_a.iter() {
                    let Some(mask_b) = organs_b.get(organ) else {
                        continue;
                    };
                    match collect_interobserver_distances(mask_a, mask_b) {
                        Ok(batch) => {
                            let prov = SampleProvenance {
                                scan_id: scan.scan_id.clone(),
                                observer_a: obs_a.to_string(),
                                observer_b: obs_b.to_string(),
                                count: batch.len(),
                            };
                            pools
                                .entry(organ.clone())
                                .or_insert_with(|| DistanceSampleSet::new(organ.clone()))
                                .extend(batch, prov);
                        }
                        Err(e) => {
                            let msg = format!(
                                "scan {}: organ {organ}: observers {obs_a}/{obs_b} skipped: {e}",
                                scan.scan_id
                            );
                            warn!("{msg}");
                            warnings.push(msg);
                        }
                    }
                }
            }
        }
    }

    let mut tolerances = ToleranceSpec {
        percentile: Some(q),
        ..Default::default()
    };
    let mut organs = BTreeMap::new();
    for organ in organs_seen {
        let Some(pool) = pools.get(&organ) else {
            let msg = format!("organ {organ}: no observer pair with both segmentations; omitted");
            warn!("{msg}");
            warnings.push(msg);
            continue;
        };
        let tau = tolerance_percentile(&pool.samples, q, weighting)?;
        tolerances.per_organ.insert(organ.clone(), tau);
        for p in &pool.provenance {
            tolerances.provenance.push(format!(
                "{organ}: scan {} observers {}/{} ({} samples)",
                p.scan_id, p.observer_a, p.observer_b, p.count
            ));
        }
        organs.insert(
            organ,
            OrganCalibration {
                tau_mm: tau,
                sample_count: pool.samples.len(),
                pair_count: pool.provenance.len(),
            },
        );
    }
    Ok(CalibrationOutcome {
        tolerances,
        organs,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridShape, Spacing};

    fn unit() -> Spacing {
        Spacing::isotropic(1.0).unwrap()
    }

    fn unit_samples(d: &[f64]) -> Vec<DistanceSample> {
        d.iter()
            .map(|&distance| DistanceSample {
                distance,
                weight: 1.0,
            })
            .collect()
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(
            tolerance_percentile(&unit_samples(&[0.0; 10]), 0.95, Weighting::Area).unwrap(),
            0.0
        );
        let hundred: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(
            tolerance_percentile(&unit_samples(&hundred), 0.95, Weighting::Area).unwrap(),
            95.0
        );
        let weighted = vec![
            DistanceSample {
                distance: 1.0,
                weight: 9.0,
            },
            DistanceSample {
                distance: 10.0,
                weight: 1.0,
            },
        ];
        assert_eq!(
            tolerance_percentile(&weighted, 0.95, Weighting::Area).unwrap(),
            10.0
        );
        // per point: 1 of 2 samples at 1.0 is below 0.95
        assert_eq!(
            tolerance_percentile(&weighted, 0.5, Weighting::Unweighted).unwrap(),
            1.0
        );
        assert_eq!(
            tolerance_percentile(&weighted, 0.9, Weighting::Area).unwrap(),
            1.0
        );
    }

    #[test]
    fn percentile_errors() {
        assert_eq!(
            tolerance_percentile(&[], 0.95, Weighting::Area),
            Err(CalibrateError::EmptySampleSet)
        );
        assert!(matches!(
            tolerance_percentile(&unit_samples(&[1.0]), 0.0, Weighting::Area),
            Err(CalibrateError::InvalidPercentile(_))
        ));
        assert!(tolerance_percentile(&unit_samples(&[1.0]), 1.0, Weighting::Area).is_ok());
    }

    #[test]
    fn identical_observers_give_zero_distances() {
        let s = GridShape::cube(6).unwrap();
        let m = Mask::from_fn(s, unit(), |x, y, z| x > 1 && y < 4 && z == 2);
        let d = collect_interobserver_distances(&m, &m).unwrap();
        assert!(!d.is_empty());
        assert!(d.iter().all(|s| s.distance == 0.0 && s.weight > 0.0));
    }

    #[test]
    fn three_apart_fixture_pools_symmetrically() {
        let s = GridShape::new(6, 3, 3).unwrap();
        let a = Mask::from_voxels(s, unit(), &[[1, 1, 1]]).unwrap();
        let b = Mask::from_voxels(s, unit(), &[[4, 1, 1]]).unwrap();
        let d = collect_interobserver_distances(&a, &b).unwrap();
        let mut dist: Vec<f64> = d.iter().map(|s| s.distance).collect();
        dist.sort_by(f64::total_cmp);
        let mut expected = vec![2.0; 8];
        expected.extend([3.0; 8]);
        assert_eq!(dist, expected);
        let w0 = d[0].weight;
        assert!(d.iter().all(|s| s.weight == w0));
    }

    #[test]
    fn empty_segmentation_is_rejected() {
        let s = GridShape::cube(3).unwrap();
        let a = Mask::from_voxels(s, unit(), &[[1, 1, 1]]).unwrap();
        assert_eq!(
            collect_interobserver_distances(&a, &Mask::empty(s, unit())),
            Err(CalibrateError::EmptySegmentation)
        );
    }

    fn scan(id: &str, observers: &[(&str, &[(&str, Mask)])]) -> CalibrationScan {
        CalibrationScan {
            scan_id: id.into(),
            observers: observers
                .iter()
                .map(|(o, organs)| {
                    (
                        o.to_string(),
                        organs
                            .iter()
                            .map(|(n, m)| (n.to_string(), m.clone()))
                            .collect(),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn calibration_with_identical_observers_is_zero() {
        let s = GridShape::cube(8).unwrap();
        let m1 = Mask::from_fn(s, unit(), |x, y, z| x + y + z < 8);
        let m2 = Mask::from_fn(s, unit(), |x, _, _| x > 5);
        let organs = [("Brainstem", m1), ("Mandible", m2)];
        let out = calibrate_organ_tolerances(
            &[scan("s1", &[("A", &organs), ("B", &organs)])],
            DEFAULT_PERCENTILE,
            Weighting::Area,
        )
        .unwrap();
        assert_eq!(out.tolerances.per_organ.len(), 2);
        assert!(out.tolerances.per_organ.values().all(|&t| t == 0.0));
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn missing_organ_is_omitted_with_warning() {
        let s = GridShape::cube(5).unwrap();
        let m = Mask::from_voxels(s, unit(), &[[2, 2, 2]]).unwrap();
        let out = calibrate_organ_tolerances(
            &[scan(
                "s1",
                &[("A", &[("Lens-Lt", m.clone()), ("Orbit-Lt", m.clone())]), ("B", &[("Lens-Lt", m)])],
            )],
            DEFAULT_PERCENTILE,
            Weighting::Area,
        )
        .unwrap();
        assert!(out.tolerances.per_organ.contains_key("Lens-Lt"));
        assert!(!out.tolerances.per_organ.contains_key("Orbit-Lt"));
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].contains("Orbit-Lt"));
    }

    #[test]
    fn pooling_across_scans_is_concatenation() {
        let s = GridShape::cube(8).unwrap();
        let a1 = Mask::from_fn(s, unit(), |x, y, z| x < 4 && y < 4 && z < 4);
        let b1 = a1.translated([1, 0, 0]);
        let a2 = Mask::from_fn(s, unit(), |x, y, z| x < 3 && y < 5 && z > 2);
        let b2 = a2.translated([0, 2, 1]);
        let mut pooled = collect_interobserver_distances(&a1, &b1).unwrap();
        pooled.extend(collect_interobserver_distances(&a2, &b2).unwrap());
        let expected = tolerance_percentile(&pooled, 0.95, Weighting::Area).unwrap();

        let out = calibrate_organ_tolerances(
            &[
                scan("s1", &[("A", &[("Brain", a1)]), ("B", &[("Brain", b1)])]),
                scan("s2", &[("A", &[("Brain", a2)]), ("B", &[("Brain", b2)])]),
            ],
            0.95,
            Weighting::Area,
        )
        .unwrap();
        assert_eq!(out.tolerances.per_organ["Brain"], expected);
        assert_eq!(out.organs["Brain"].pair_count, 2);
        assert_eq!(out.organs["Brain"].sample_count, pooled.len());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn percentile_monotone_in_q(
                d in proptest::collection::vec((0.0f64..50.0, 0.01f64..5.0), 1..60),
                q1 in 0.01f64..1.0,
                q2 in 0.01f64..1.0,
            ) {
                let samples: Vec<DistanceSample> = d
                    .into_iter()
                    .map(|(distance, weight)| DistanceSample { distance, weight })
                    .collect();
                let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
                for w in [Weighting::Area, Weighting::Unweighted] {
                    let a = tolerance_percentile(&samples, lo, w).unwrap();
                    let b = tolerance_percentile(&samples, hi, w).unwrap();
                    prop_assert!(a <= b);
                }
            }

            #[test]
            fn percentile_order_invariant(
                d in proptest::collection::vec((0.0f64..50.0, 0.01f64..5.0), 1..40),
                seed in any::<u64>(),
            ) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let samples: Vec<DistanceSample> = d
                    .into_iter()
                    .map(|(distance, weight)| DistanceSample { distance, weight })
                    .collect();
                let mut shuffled = samples.clone();
                shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                for w in [Weighting::Area, Weighting::Unweighted] {
                    prop_assert_eq!(
                        tolerance_percentile(&samples, 0.95, w).unwrap(),
                        tolerance_percentile(&shuffled, 0.95, w).unwrap()
                    );
                }
            }
        }
    }
}
