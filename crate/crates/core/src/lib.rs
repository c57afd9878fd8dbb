//! Surface- and volume-based agreement metrics for 3D binary segmentation
//! masks.
//!
//! The centrepiece is surface Dice at tolerance τ: both mask surfaces are
//! extracted on the half-voxel-shifted raster with a 256-entry
//! marching-cubes area table, an exact Euclidean distance transform gives
//! every surface element its distance to the other surface, and the areas
//! within τ are summed. Everything runs in time linear in the voxel count.
//!
//! Around that core the crate provides tolerance calibration from
//! inter-observer segmentations, per-patient aggregation, an augmentation
//! and perturbation harness, NIfTI-1 and report I/O, and the batch driver
//! behind the `surfdice` binary.


pub mod calibrate;
pub mod cli;
pub mod distance;
pub mod grid;
pub mod io;
mod mc_table;
pub mod metrics;
pub mod perturb;
pub mod surface;

pub use distance::{distance_transform, distances_to_other_surface, DistanceMap};
pub use grid::{
    validate_compatible, Axis, CtVolume, GridError, GridShape, Mask, MultiOrganSegmentation,
    SparseLabels, Spacing, Taxonomy, VoxelBox,
};
pub use metrics::{
    aggregate_surface_dsc, quantize_tolerance, sparse_volumetric_dsc, surface_dsc,
    volumetric_dsc, MetricError, SurfaceDscBreakdown, ToleranceSpec,
};
pub use surface::{
    extract_surface, total_surface_area, NeighborAreaTable, SurfaceElement, SurfaceElementList,
};
