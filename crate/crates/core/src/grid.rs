//! Voxel grid data model: spacing, shapes, binary masks, CT volumes,
//! multi-organ segmentations and slice-sparse labels.
//!
//! All dense grids use the same linear layout: `x` varies fastest, then `y`,
//! then `z`, i.e. `index = x + nx * (y + ny * z)`. Surface extraction, the
//! distance transform and NIfTI I/O all rely on this order.

use std::collections::BTreeMap;

use thiserror::Error;

/// Relative tolerance used when comparing spacings of two grids.
pub const SPACING_REL_TOL: f64 = 1e-6;

/// Spatial axis of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid spacing {value} along {axis}: must be finite and > 0")]
    InvalidSpacing { axis: Axis, value: f64 },
    #[error("invalid grid shape {nx}x{ny}x{nz}: every axis needs at least one voxel")]
    InvalidShape { nx: usize, ny: usize, nz: usize },
    #[error("data length {got} does not match grid of {expected} voxels")]
    LengthMismatch { expected: usize, got: usize },
    #[error("shape mismatch along {axis}: {a} vs {b}")]
    ShapeMismatch { axis: Axis, a: usize, b: usize },
    #[error("spacing mismatch along {axis}: {a} vs {b}")]
    SpacingMismatch { axis: Axis, a: f64, b: f64 },
    #[error("sparse labels: foreground voxel ({x},{y},{z}) lies outside the labelled region")]
    ValuesOutsideLabelled { x: usize, y: usize, z: usize },
    #[error("sparse labels: labelled voxel ({x},{y},{z}) is not part of a fully labelled slice")]
    PartialSlice { x: usize, y: usize, z: usize },
    #[error("segmentation channel {organ:?} does not match the segmentation grid: {source}")]
    ChannelGrid {
        organ: String,
        #[source]
        source: Box<GridError>,
    },
}

/// Physical voxel size in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Spacing {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self, GridError> {
        for (axis, value) in Axis::ALL.into_iter().zip([dx, dy, dz]) {
            if !(value.is_finite() && value > 0.0) {
                return Err(GridError::InvalidSpacing { axis, value });
            }
        }
        Ok(Spacing { dx, dy, dz })
    }

    pub fn isotropic(d: f64) -> Result<Self, GridError> {
        Spacing::new(d, d, d)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }

    pub fn from_array(a: [f64; 3]) -> Result<Self, GridError> {
        Spacing::new(a[0], a[1], a[2])
    }

    pub fn get(&self, axis: Axis) -> f64 {
        self.as_array()[axis.index()]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    pub fn max(&self) -> f64 {
        self.dx.max(self.dy).max(self.dz)
    }

    /// Multiplies every component by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self, GridError> {
        Spacing::new(self.dx * s, self.dy * s, self.dz * s)
    }

    /// Per-axis relative comparison at [`SPACING_REL_TOL`]; reports the first
    /// offending axis.
    pub fn check_close(&self, other: &Spacing) -> Result<(), GridError> {
        for axis in Axis::ALL {
            let (a, b) = (self.get(axis), other.get(axis));
            if (a - b).abs() > SPACING_REL_TOL * a.abs().max(b.abs()) {
                return Err(GridError::SpacingMismatch { axis, a, b });
            }
        }
        Ok(())
    }
}

/// Voxel counts per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl GridShape {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self, GridError> {
        let ok = nx > 0
            && ny > 0
            && nz > 0
            && nx.checked_mul(ny).and_then(|p| p.checked_mul(nz)).is_some();
        if !ok {
            return Err(GridError::InvalidShape { nx, ny, nz });
        }
        Ok(GridShape { nx, ny, nz })
    }

    pub fn cube(n: usize) -> Result<Self, GridError> {
        GridShape::new(n, n, n)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn get(&self, axis: Axis) -> usize {
        self.as_array()[axis.index()]
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.nx;
        let rest = index / self.nx;
        [x, rest % self.ny, rest / self.ny]
    }

    pub fn check_equal(&self, other: &GridShape) -> Result<(), GridError> {
        for axis in Axis::ALL {
            let (a, b) = (self.get(axis), other.get(axis));
            if a != b {
                return Err(GridError::ShapeMismatch { axis, a, b });
            }
        }
        Ok(())
    }

    /// Physical length of the grid diagonal measured between the outermost
    /// shifted-raster points, `sqrt(sum((n_i * d_i)^2))`.
    pub fn diameter(&self, spacing: &Spacing) -> f64 {
        let ex = self.nx as f64 * spacing.dx;
        let ey = self.ny as f64 * spacing.dy;
        let ez = self.nz as f64 * spacing.dz;
        (ex * ex + ey * ey + ez * ez).sqrt()
    }
}

/// Inclusive voxel index box `lo[a]..=hi[a]` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoxelBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl VoxelBox {
    pub fn shape(&self) -> GridShape {
        GridShape {
            nx: self.hi[0] - self.lo[0] + 1,
            ny: self.hi[1] - self.lo[1] + 1,
            nz: self.hi[2] - self.lo[2] + 1,
        }
    }

    pub fn union(&self, other: &VoxelBox) -> VoxelBox {
        let mut out = *self;
        for a in 0..3 {
            out.lo[a] = out.lo[a].min(other.lo[a]);
            out.hi[a] = out.hi[a].max(other.hi[a]);
        }
        out
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }
}

/// Union of two optional boxes; `None` is the empty box.
pub fn union_boxes(a: Option<VoxelBox>, b: Option<VoxelBox>) -> Option<VoxelBox> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.union(&b)),
        (a, None) => a,
        (None, b) => b,
    }
}

/// Checks that two masks live on the same grid.
pub fn validate_compatible(a: &Mask, b: &Mask) -> Result<(), GridError> {
    a.shape.check_equal(&b.shape)?;
    a.spacing.check_close(&b.spacing)
}

/// Binary occupancy grid with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: GridShape,
    spacing: Spacing,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: GridShape, spacing: Spacing, data: Vec<bool>) -> Result<Self, GridError> {
        if data.len() != shape.len() {
            return Err(GridError::LengthMismatch {
                expected: shape.len(),
                got: data.len(),
            });
        }
        Ok(Mask {
            shape,
            spacing,
            data,
        })
    }

    pub fn empty(shape: GridShape, spacing: Spacing) -> Self {
        Mask {
            shape,
            spacing,
            data: vec![false; shape.len()],
        }
    }

    pub fn from_fn(
        shape: GridShape,
        spacing: Spacing,
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.nz {
            for y in 0..shape.ny {
                for x in 0..shape.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Mask {
            shape,
            spacing,
            data,
        }
    }

    /// Builds a mask with the listed voxels set.
    pub fn from_voxels(
        shape: GridShape,
        spacing: Spacing,
        voxels: &[[usize; 3]],
    ) -> Result<Self, GridError> {
        let mut m = Mask::empty(shape, spacing);
        for &[x, y, z] in voxels {
            if x >= shape.nx || y >= shape.ny || z >= shape.nz {
                return Err(GridError::InvalidShape {
                    nx: x + 1,
                    ny: y + 1,
                    nz: z + 1,
                });
            }
            m.set(x, y, z, true);
        }
        Ok(m)
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn into_data(self) -> Vec<bool> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.shape.index(x, y, z)]
    }

    /// Like [`Mask::get`] but treats every out-of-grid position as background.
    #[inline]
    pub fn get_padded(&self, x: isize, y: isize, z: isize) -> bool {
        if x < 0 || y < 0 || z < 0 {
            return false;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= self.shape.nx || y >= self.shape.ny || z >= self.shape.nz {
            return false;
        }
        self.get(x, y, z)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.shape.index(x, y, z);
        self.data[i] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Physical volume in mm³.
    pub fn volume(&self) -> f64 {
        self.count() as f64 * self.spacing.voxel_volume()
    }

    pub fn with_spacing(&self, spacing: Spacing) -> Mask {
        Mask {
            shape: self.shape,
            spacing,
            data: self.data.clone(),
        }
    }

    /// Smallest box holding all foreground, grown by `pad_voxels` and clamped
    /// to the grid. `None` for an empty mask.
    pub fn bounding_box(&self, pad_voxels: usize) -> Option<VoxelBox> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &v) in self.data.iter().enumerate() {
            if v {
                any = true;
                let c = self.shape.coords(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        if !any {
            return None;
        }
        let dims = self.shape.as_array();
        for a in 0..3 {
            lo[a] = lo[a].saturating_sub(pad_voxels);
            hi[a] = (hi[a] + pad_voxels).min(dims[a] - 1);
        }
        Some(VoxelBox { lo, hi })
    }

    /// Copies the voxels inside `b` into a new mask of the box's shape.
    pub fn crop(&self, b: &VoxelBox) -> Mask {
        let shape = b.shape();
        Mask::from_fn(shape, self.spacing, |x, y, z| {
            self.get(x + b.lo[0], y + b.lo[1], z + b.lo[2])
        })
    }

    /// Shifts the content by whole voxels; voxels moved out of the grid are
    /// dropped and vacated voxels become background.
    pub fn translated(&self, offset: [isize; 3]) -> Mask {
        let s = self.shape;
        Mask::from_fn(s, self.spacing, |x, y, z| {
            self.get_padded(
                x as isize - offset[0],
                y as isize - offset[1],
                z as isize - offset[2],
            )
        })
    }

    /// Reflects the mask along `axis`.
    pub fn flipped(&self, axis: Axis) -> Mask {
        let s = self.shape;
        Mask::from_fn(s, self.spacing, |x, y, z| match axis {
            Axis::X => self.get(s.nx - 1 - x, y, z),
            Axis::Y => self.get(x, s.ny - 1 - y, z),
            Axis::Z => self.get(x, y, s.nz - 1 - z),
        })
    }

    pub fn union(&self, other: &Mask) -> Result<Mask, GridError> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask, GridError> {
        self.zip_with(other, |a, b| a && b)
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Result<Mask, GridError> {
        validate_compatible(self, other)?;
        Ok(Mask {
            shape: self.shape,
            spacing: self.spacing,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Dense CT intensities in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    shape: GridShape,
    spacing: Spacing,
    data: Vec<f32>,
}

impl CtVolume {
    pub fn new(shape: GridShape, spacing: Spacing, data: Vec<f32>) -> Result<Self, GridError> {
        if data.len() != shape.len() {
            return Err(GridError::LengthMismatch {
                expected: shape.len(),
                got: data.len(),
            });
        }
        Ok(CtVolume {
            shape,
            spacing,
            data,
        })
    }

    pub fn filled(shape: GridShape, spacing: Spacing, value: f32) -> Self {
        CtVolume {
            shape,
            spacing,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(
        shape: GridShape,
        spacing: Spacing,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.nz {
            for y in 0..shape.ny {
                for x in 0..shape.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        CtVolume {
            shape,
            spacing,
            data,
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.shape.index(x, y, z)]
    }
}

/// Organ naming plus left/right pairing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    organs: Vec<String>,
    pairs: Vec<(String, String)>,
}

const DEFAULT_UNPAIRED: [&str; 5] = ["Brain", "Brainstem", "Mandible", "Spinal-Canal", "Spinal-Cord"];
const DEFAULT_PAIRED: [&str; 8] = [
    "Cochlea",
    "Lacrimal",
    "Lens",
    "Lung",
    "Optic-Nerve",
    "Orbit",
    "Parotid",
    "Submandibular",
];

impl Taxonomy {
    /// `pairs` hold `(left, right)` names that must both be listed in `organs`.
    pub fn new(organs: Vec<String>, pairs: Vec<(String, String)>) -> Result<Self, String> {
        let mut seen = std::collections::BTreeSet::new();
        for o in &organs {
            if !seen.insert(o.as_str()) {
                return Err(format!("duplicate organ {o:?} in taxonomy"));
            }
        }
        let mut paired = std::collections::BTreeSet::new();
        for (l, r) in &pairs {
            for n in [l, r] {
                if !seen.contains(n.as_str()) {
                    return Err(format!("paired organ {n:?} is not in the taxonomy"));
                }
                if !paired.insert(n.as_str()) {
                    return Err(format!("organ {n:?} appears in more than one pair"));
                }
            }
            if l == r {
                return Err(format!("organ {l:?} cannot be paired with itself"));
            }
        }
        Ok(Taxonomy { organs, pairs })
    }

    pub fn organs(&self) -> &[String] {
        &self.organs
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn contains(&self, organ: &str) -> bool {
        self.organs.iter().any(|o| o == organ)
    }

    /// Mirror partner of `organ`, if it is one side of a left/right pair.
    pub fn partner(&self, organ: &str) -> Option<&str> {
        self.pairs.iter().find_map(|(l, r)| {
            if l == organ {
                Some(r.as_str())
            } else if r == organ {
                Some(l.as_str())
            } else {
                None
            }
        })
    }
}

impl Default for Taxonomy {
    /// The 21 head-and-neck organs at risk with their `-Lt`/`-Rt` pairs.
    fn default() -> Self {
        let mut organs: Vec<String> = DEFAULT_UNPAIRED.iter().map(|s| s.to_string()).collect();
        let mut pairs = Vec::new();
        for base in DEFAULT_PAIRED {
            let (l, r) = (format!("{base}-Lt"), format!("{base}-Rt"));
            organs.push(l.clone());
            organs.push(r.clone());
            pairs.push((l, r));
        }
        organs.sort();
        Taxonomy { organs, pairs }
    }
}

/// Possibly overlapping organ masks sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiOrganSegmentation {
    shape: GridShape,
    spacing: Spacing,
    channels: BTreeMap<String, Mask>,
}

impl MultiOrganSegmentation {
    pub fn new(
        shape: GridShape,
        spacing: Spacing,
        channels: BTreeMap<String, Mask>,
    ) -> Result<Self, GridError> {
        for (organ, m) in &channels {
            m.shape
                .check_equal(&shape)
                .and_then(|_| m.spacing.check_close(&spacing))
                .map_err(|e| GridError::ChannelGrid {
                    organ: organ.clone(),
                    source: Box::new(e),
                })?;
        }
        Ok(MultiOrganSegmentation {
            shape,
            spacing,
            channels,
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn channels(&self) -> &BTreeMap<String, Mask> {
        &self.channels
    }

    pub fn channel(&self, organ: &str) -> Option<&Mask> {
        self.channels.get(organ)
    }

    pub fn into_channels(self) -> BTreeMap<String, Mask> {
        self.channels
    }
}

/// Ground truth that is only defined on whole slices of the volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLabels {
    labelled: Mask,
    values: Mask,
}

impl SparseLabels {
    /// Validates that `values ⊆ labelled` and that `labelled` is a union of
    /// complete axial, coronal or sagittal planes.
    pub fn new(labelled: Mask, values: Mask) -> Result<Self, GridError> {
        validate_compatible(&labelled, &values)?;
        let s = labelled.shape;
        for (i, (&l, &v)) in labelled.data.iter().zip(&values.data).enumerate() {
            if v && !l {
                let [x, y, z] = s.coords(i);
                return Err(GridError::ValuesOutsideLabelled { x, y, z });
            }
        }

        let mut full_x = vec![true; s.nx];
        let mut full_y = vec![true; s.ny];
        let mut full_z = vec![true; s.nz];
        for (i, &l) in labelled.data.iter().enumerate() {
            if !l {
                let [x, y, z] = s.coords(i);
                full_x[x] = false;
                full_y[y] = false;
                full_z[z] = false;
            }
        }
        for (i, &l) in labelled.data.iter().enumerate() {
            let [x, y, z] = s.coords(i);
            if l && !(full_x[x] || full_y[y] || full_z[z]) {
                return Err(GridError::PartialSlice { x, y, z });
            }
        }
        Ok(SparseLabels { labelled, values })
    }

    /// Ground truth defined on the whole grid.
    pub fn dense(values: Mask) -> Self {
        let labelled = Mask::from_fn(values.shape, values.spacing, |_, _, _| true);
        SparseLabels { labelled, values }
    }

    pub fn labelled(&self) -> &Mask {
        &self.labelled
    }

    pub fn values(&self) -> &Mask {
        &self.values
    }
}
