//! Geometric and intensity augmentation, also used as a metric-sensitivity
//! harness.
//!
//! Displacement fields use pull-back semantics: the warped image at voxel
//! `p` samples the source at `p + u(p)` (all displacements in mm). In-plane
//! builders leave the z component at exactly zero.
//!
//! Random numbers come from ChaCha8 (`rand_chacha`), whose stream is stable
//! across platforms. Every stochastic function takes an explicit seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{
    Axis, CtVolume, GridError, GridShape, Mask, MultiOrganSegmentation, Spacing, Taxonomy,
};
use crate::metrics::{surface_dsc, volumetric_dsc, MetricError, SurfaceDscBreakdown};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
}

/// Dense displacement field in mm, one vector per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    shape: GridShape,
    spacing: Spacing,
    disp: Vec<[f64; 3]>,
}

impl DeformationField {
    pub fn zero(shape: GridShape, spacing: Spacing) -> Self {
        DeformationField::constant(shape, spacing, [0.0; 3])
    }

    pub fn constant(shape: GridShape, spacing: Spacing, v: [f64; 3]) -> Self {
        DeformationField {
            shape,
            spacing,
            disp: vec![v; shape.len()],
        }
    }

    pub fn new(
        shape: GridShape,
        spacing: Spacing,
        disp: Vec<[f64; 3]>,
    ) -> Result<Self, GridError> {
        if disp.len() != shape.len() {
            return Err(GridError::LengthMismatch {
                expected: shape.len(),
                got: disp.len(),
            });
        }
        Ok(DeformationField {
            shape,
            spacing,
            disp,
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn displacements(&self) -> &[[f64; 3]] {
        &self.disp
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.disp[self.shape.index(x, y, z)]
    }

    fn check_grid(&self, shape: GridShape, spacing: Spacing) -> Result<(), GridError> {
        self.shape.check_equal(&shape)?;
        self.spacing.check_close(&spacing)
    }

    /// Displacement at fractional voxel coordinates, trilinear with edge
    /// clamping.
    fn sample_clamped(&self, p: [f64; 3]) -> [f64; 3] {
        let dims = self.shape.as_array();
        let mut out = [0.0; 3];
        for_each_corner(p, |c, w| {
            let idx = [0, 1, 2].map(|a| c[a].clamp(0, dims[a] as isize - 1) as usize);
            let v = self.get(idx[0], idx[1], idx[2]);
            for a in 0..3 {
                out[a] += w * v[a];
            }
        });
        out
    }
}

/// Calls `f(corner, weight)` for every trilinear corner of `p` with non-zero
/// weight.
#[inline]
fn for_each_corner(p: [f64; 3], mut f: impl FnMut([isize; 3], f64)) {
    let base = p.map(|v| v.floor());
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    for b in 0..8u8 {
        let mut w = 1.0;
        let mut c = [0isize; 3];
        for a in 0..3 {
            let hi = (b >> a) & 1 == 1;
            w *= if hi { frac[a] } else { 1.0 - frac[a] };
            c[a] = base[a] as isize + hi as isize;
        }
        if w != 0.0 {
            f(c, w);
        }
    }
}

/// In-plane affine parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    /// Translation in voxels along x and y.
    pub translation_px: [f64; 2],
    pub rotation_deg: f64,
    pub scale: f64,
    /// x-shear proportional to y.
    pub shear: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            translation_px: [0.0, 0.0],
            rotation_deg: 0.0,
            scale: 1.0,
            shear: 0.0,
        }
    }

    /// Row-major 2x2 linear part: rotation · scale · shear.
    fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.scale;
        let h = self.shear;
        // R · diag(k, k) · [[1, h], [0, 1]]
        [[c * k, c * k * h - s * k], [s * k, s * k * h + c * k]]
    }
}

/// Dense field of the in-plane affine map about the volume's xy centre:
/// `u(p) = (A - I)(p - c) + t`.
pub fn affine_field(params: &AffineParams, shape: GridShape, spacing: Spacing) -> DeformationField {
    let m = params.linear();
    let dm = [[m[0][0] - 1.0, m[0][1]], [m[1][0], m[1][1] - 1.0]];
    let cx = (shape.nx as f64 - 1.0) * 0.5 * spacing.dx;
    let cy = (shape.ny as f64 - 1.0) * 0.5 * spacing.dy;
    let t = [
        params.translation_px[0] * spacing.dx,
        params.translation_px[1] * spacing.dy,
    ];
    let mut disp = Vec::with_capacity(shape.len());
    for _z in 0..shape.nz {
        for y in 0..shape.ny {
            let ry = y as f64 * spacing.dy - cy;
            for x in 0..shape.nx {
                let rx = x as f64 * spacing.dx - cx;
                disp.push([
                    dm[0][0] * rx + dm[0][1] * ry + t[0],
                    dm[1][0] * rx + dm[1][1] * ry + t[1],
                    0.0,
                ]);
            }
        }
    }
    DeformationField {
        shape,
        spacing,
        disp,
    }
}

/// Random in-plane displacements on a regular control lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLattice {
    dims: [usize; 3],
    pitch_mm: [f64; 3],
    values: Vec<[f64; 2]>,
}

impl ControlLattice {
    /// Lattice with control points at `k · pitch` covering a grid of `shape`
    /// (at least two points per axis).
    pub fn covering(shape: GridShape, spacing: Spacing, pitch_mm: [f64; 3]) -> Self {
        let extent = [
            (shape.nx as f64 - 1.0) * spacing.dx,
            (shape.ny as f64 - 1.0) * spacing.dy,
            (shape.nz as f64 - 1.0) * spacing.dz,
        ];
        let dims = [0, 1, 2].map(|a| ((extent[a] / pitch_mm[a]).ceil() as usize + 1).max(2));
        ControlLattice {
            dims,
            pitch_mm,
            values: vec![[0.0; 2]; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn pitch_mm(&self) -> [f64; 3] {
        self.pitch_mm
    }

    pub fn values(&self) -> &[[f64; 2]] {
        &self.values
    }

    pub fn fill_constant(&mut self, v: [f64; 2]) {
        self.values.iter_mut().for_each(|c| *c = v);
    }

    /// I.i.d. N(0, σ²) x and y displacements, drawn in lattice order.
    pub fn fill_gaussian(&mut self, sigma_mm: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma_mm.max(0.0)).expect("finite sigma");
        for c in &mut self.values {
            *c = [normal.sample(&mut rng), normal.sample(&mut rng)];
        }
    }

    /// Cubic B-spline coefficients interpolating the control values
    /// (mirror boundary), per component.
    pub fn spline_coefficients(&self) -> Vec<[f64; 2]> {
        let mut coef = self.values.clone();
        let [kx, ky, kz] = self.dims;
        let mut line = Vec::new();
        for axis in 0..3 {
            let (n, stride) = match axis {
                0 => (kx, 1),
                1 => (ky, kx),
                _ => (kz, kx * ky),
            };
            for start in 0..coef.len() {
                let pos = [start % kx, (start / kx) % ky, start / (kx * ky)];
                if pos[axis] != 0 {
                    continue;
                }
                for comp in 0..2 {
                    line.clear();
                    line.extend((0..n).map(|i| coef[start + i * stride][comp]));
                    solve_bspline_interpolation(&mut line);
                    for (i, v) in line.iter().enumerate() {
                        coef[start + i * stride][comp] = *v;
                    }
                }
            }
        }
        coef
    }

    /// Dense field by separable cubic B-spline evaluation.
    pub fn densify(&self, shape: GridShape, spacing: Spacing) -> DeformationField {
        let coef = self.spline_coefficients();
        let [kx, ky, kz] = self.dims;
        let taps = |n: usize, d: f64, pitch: f64, k: usize| -> Vec<([usize; 4], [f64; 4])> {
            (0..n)
                .map(|i| bspline_taps(i as f64 * d / pitch, k))
                .collect()
        };
        let tx = taps(shape.nx, spacing.dx, self.pitch_mm[0], kx);
        let ty = taps(shape.ny, spacing.dy, self.pitch_mm[1], ky);
        let tz = taps(shape.nz, spacing.dz, self.pitch_mm[2], kz);

        // x: (kx, ky, kz) → (nx, ky, kz)
        let mut s1 = vec![[0.0; 2]; shape.nx * ky * kz];
        for c in 0..ky * kz {
            for (x, (idx, w)) in tx.iter().enumerate() {
                let mut acc = [0.0; 2];
                for t in 0..4 {
                    let v = coef[idx[t] + kx * c];
                    acc[0] += w[t] * v[0];
                    acc[1] += w[t] * v[1];
                }
                s1[x + shape.nx * c] = acc;
            }
        }
        // y: → (nx, ny, kz)
        let mut s2 = vec![[0.0; 2]; shape.nx * shape.ny * kz];
        for c in 0..kz {
            for (y, (idx, w)) in ty.iter().enumerate() {
                for x in 0..shape.nx {
                    let mut acc = [0.0; 2];
                    for t in 0..4 {
                        let v = s1[x + shape.nx * (idx[t] + ky * c)];
                        acc[0] += w[t] * v[0];
                        acc[1] += w[t] * v[1];
                    }
                    s2[x + shape.nx * (y + shape.ny * c)] = acc;
                }
            }
        }
        // z: → (nx, ny, nz)
        let plane = shape.nx * shape.ny;
        let mut disp = vec![[0.0; 3]; shape.len()];
        disp.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
            let (idx, w) = &tz[z];
            for (xy, out) in slab.iter_mut().enumerate() {
                let mut acc = [0.0; 2];
                for t in 0..4 {
                    let v = s2[xy + plane * idx[t]];
                    acc[0] += w[t] * v[0];
                    acc[1] += w[t] * v[1];
                }
                *out = [acc[0], acc[1], 0.0];
            }
        });
        DeformationField {
            shape,
            spacing,
            disp,
        }
    }
}

/// Cubic B-spline basis weights for local coordinate `u ∈ [0, 1)`.
#[inline]
pub fn bspline_weights(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Mirror-reflected coefficient indices and weights at lattice coordinate
/// `t` on a lattice of `k >= 2` points.
fn bspline_taps(t: f64, k: usize) -> ([usize; 4], [f64; 4]) {
    let i = (t.floor().max(0.0) as usize).min(k - 2);
    let u = t - i as f64;
    let mirror = |j: isize| -> usize {
        let last = k as isize - 1;
        let j = if j < 0 { -j } else { j };
        let j = if j > last { 2 * last - j } else { j };
        j as usize
    };
    let base = i as isize - 1;
    (
        [mirror(base), mirror(base + 1), mirror(base + 2), mirror(base + 3)],
        bspline_weights(u),
    )
}

/// Solves `(c[j-1] + 4 c[j] + c[j+1]) / 6 = v[j]` in place with mirrored
/// ends (`c[-1] = c[1]`, `c[n] = c[n-2]`), so the spline passes through the
/// samples.
fn solve_bspline_interpolation(v: &mut [f64]) {
    let n = v.len();
    if n < 2 {
        return;
    }
    let diag = 4.0 / 6.0;
    let off = 1.0 / 6.0;
    // tridiagonal rows: lower[j], diag, upper[j]
    let mut upper = vec![off; n];
    let mut lower = vec![off; n];
    upper[0] = 2.0 * off;
    lower[n - 1] = 2.0 * off;
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = upper[0] / diag;
    dp[0] = v[0] / diag;
    for j in 1..n {
        let m = diag - lower[j] * cp[j - 1];
        cp[j] = if j < n - 1 { upper[j] / m } else { 0.0 };
        dp[j] = (v[j] - lower[j] * dp[j - 1]) / m;
    }
    v[n - 1] = dp[n - 1];
    for j in (0..n - 1).rev() {
        v[j] = dp[j] - cp[j] * v[j + 1];
    }
}

/// Elastic in-plane field: Gaussian control vectors at `pitch_mm` densified
/// by cubic B-spline interpolation. Zero sigma gives the zero field.
pub fn elastic_field(
    sigma_mm: f64,
    pitch_mm: [f64; 3],
    shape: GridShape,
    spacing: Spacing,
    seed: u64,
) -> DeformationField {
    if sigma_mm == 0.0 {
        return DeformationField::zero(shape, spacing);
    }
    let mut lattice = ControlLattice::covering(shape, spacing, pitch_mm);
    lattice.fill_gaussian(sigma_mm, seed);
    lattice.densify(shape, spacing)
}

/// `result(p) = outer(p) + inner(p + outer(p))`: the point is moved by
/// `outer` first and then by `inner`. The augmentation chain composes
/// `compose_fields(affine, elastic)`. `inner` is sampled trilinearly with
/// edge clamping.
pub fn compose_fields(
    outer: &DeformationField,
    inner: &DeformationField,
) -> Result<DeformationField, GridError> {
    inner.check_grid(outer.shape, outer.spacing)?;
    let s = outer.shape;
    let d = outer.spacing.as_array();
    let disp = outer
        .disp
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let c = s.coords(i);
            let p = [0, 1, 2].map(|a| c[a] as f64 + u[a] / d[a]);
            let v = inner.sample_clamped(p);
            [u[0] + v[0], u[1] + v[1], u[2] + v[2]]
        })
        .collect();
    Ok(DeformationField {
        shape: s,
        spacing: outer.spacing,
        disp,
    })
}

/// Interpolation used when warping binary masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskInterpolation {
    /// Trilinear interpolation of {0, 1} then threshold at 0.5.
    #[default]
    Linear,
    Nearest,
}

impl std::str::FromStr for MaskInterpolation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(MaskInterpolation::Linear),
            "nearest" => Ok(MaskInterpolation::Nearest),
            other => Err(format!("unknown mask interpolation {other:?}")),
        }
    }
}

fn displaced(shape: GridShape, spacing: Spacing, i: usize, u: [f64; 3]) -> [f64; 3] {
    let c = shape.coords(i);
    let d = spacing.as_array();
    [0, 1, 2].map(|a| c[a] as f64 + u[a] / d[a])
}

/// Trilinear resampling with zero padding outside the volume.
pub fn warp_ct(v: &CtVolume, f: &DeformationField) -> Result<CtVolume, GridError> {
    f.check_grid(v.shape(), v.spacing())?;
    let s = v.shape();
    let dims = s.as_array();
    let data = f
        .disp
        .par_iter()
        .enumerate()
        .map(|(i, &u)| {
            let p = displaced(s, v.spacing(), i, u);
            let mut acc = 0.0f64;
            for_each_corner(p, |c, w| {
                if (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < dims[a]) {
                    acc += w * v.get(c[0] as usize, c[1] as usize, c[2] as usize) as f64;
                }
            });
            acc as f32
        })
        .collect();
    CtVolume::new(s, v.spacing(), data)
}

pub fn warp_mask(
    m: &Mask,
    f: &DeformationField,
    mode: MaskInterpolation,
) -> Result<Mask, GridError> {
    f.check_grid(m.shape(), m.spacing())?;
    let s = m.shape();
    let data = f
        .disp
        .par_iter()
        .enumerate()
        .map(|(i, &u)| {
            let p = displaced(s, m.spacing(), i, u);
            match mode {
                MaskInterpolation::Linear => {
                    let mut acc = 0.0;
                    for_each_corner(p, |c, w| {
                        if m.get_padded(c[0], c[1], c[2]) {
                            acc += w;
                        }
                    });
                    acc >= 0.5
                }
                MaskInterpolation::Nearest => {
                    let c = p.map(|v| (v + 0.5).floor() as isize);
                    m.get_padded(c[0], c[1], c[2])
                }
            }
        })
        .collect();
    Mask::new(s, m.spacing(), data)
}

/// Reflects every channel along `axis` and exchanges left/right partners.
pub fn mirror_with_label_swap(
    seg: &MultiOrganSegmentation,
    taxonomy: &Taxonomy,
    axis: Axis,
) -> MultiOrganSegmentation {
    let channels: BTreeMap<String, Mask> = seg
        .channels()
        .iter()
        .map(|(name, m)| {
            let target = taxonomy.partner(name).unwrap_or(name).to_string();
            (target, m.flipped(axis))
        })
        .collect();
    MultiOrganSegmentation::new(seg.shape(), seg.spacing(), channels)
        .expect("flipped channels share the original grid")
}

/// Reflects a CT volume along `axis`.
pub fn mirror_ct(v: &CtVolume, axis: Axis) -> CtVolume {
    let s = v.shape();
    CtVolume::from_fn(s, v.spacing(), |x, y, z| match axis {
        Axis::X => v.get(s.nx - 1 - x, y, z),
        Axis::Y => v.get(x, s.ny - 1 - y, z),
        Axis::Z => v.get(x, y, s.nz - 1 - z),
    })
}

/// Adds i.i.d. N(0, σ²) noise. Each z slice draws from its own ChaCha8
/// stream (`stream = z`), so the result does not depend on threading.
pub fn add_noise(v: &CtVolume, sigma_hu: f64, seed: u64) -> CtVolume {
    if sigma_hu == 0.0 {
        return v.clone();
    }
    let s = v.shape();
    let plane = s.nx * s.ny;
    let normal = Normal::new(0.0, sigma_hu).expect("finite sigma");
    let mut data = v.data().to_vec();
    data.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(z as u64);
        for value in slab {
            *value = (*value as f64 + normal.sample(&mut rng)) as f32;
        }
    });
    CtVolume::new(s, v.spacing(), data).expect("same length")
}

/// Augmentation ranges. Ranges are symmetric about the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub translation_px: f64,
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub shear: f64,
    pub mirror_probability: f64,
    pub elastic_control_spacing_mm: [f64; 3],
    pub elastic_sigma_mm: f64,
    pub noise_sigma_hu: f64,
    pub seed: u64,
}

impl AugmentationConfig {
    /// The head-and-neck training ranges with the given seed.
    pub fn standard(seed: u64) -> Self {
        AugmentationConfig {
            translation_px: 32.0,
            rotation_deg: 9.0,
            scale_min: 0.8,
            scale_max: 1.2,
            shear: 0.1,
            mirror_probability: 0.5,
            elastic_control_spacing_mm: [100.0; 3],
            elastic_sigma_mm: 5.0,
            noise_sigma_hu: 20.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        let bad = |msg: &str| Err(PerturbError::InvalidConfig(msg.to_string()));
        let nonneg = [
            self.translation_px,
            self.rotation_deg,
            self.shear,
            self.elastic_sigma_mm,
            self.noise_sigma_hu,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("ranges and sigmas must be finite and >= 0");
        }
        if !(self.scale_min > 0.0 && self.scale_min <= 1.0 && self.scale_max >= 1.0) {
            return bad("scale range must satisfy 0 < scale_min <= 1 <= scale_max");
        }
        if !self.scale_max.is_finite() {
            return bad("scale_max must be finite");
        }
        if !(0.0..=1.0).contains(&self.mirror_probability) {
            return bad("mirror_probability must lie in [0, 1]");
        }
        if self
            .elastic_control_spacing_mm
            .iter()
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return bad("elastic_control_spacing_mm must be > 0");
        }
        Ok(())
    }

    /// Geometric ranges shrunk (or grown) by `m`; `m = 0` is the identity
    /// chain. Mirroring and noise are disabled.
    pub fn scaled_geometry(&self, m: f64) -> Self {
        AugmentationConfig {
            translation_px: self.translation_px * m,
            rotation_deg: self.rotation_deg * m,
            scale_min: 1.0 - (1.0 - self.scale_min) * m,
            scale_max: 1.0 + (self.scale_max - 1.0) * m,
            shear: self.shear * m,
            mirror_probability: 0.0,
            elastic_sigma_mm: self.elastic_sigma_mm * m,
            noise_sigma_hu: 0.0,
            ..self.clone()
        }
    }

    pub fn sample_affine(&self, rng: &mut impl Rng) -> AffineParams {
        let sym = |rng: &mut dyn rand::RngCore, r: f64| {
            if r > 0.0 {
                rng.gen_range(-r..=r)
            } else {
                0.0
            }
        };
        let tx = sym(rng, self.translation_px);
        let ty = sym(rng, self.translation_px);
        let rotation_deg = sym(rng, self.rotation_deg);
        let scale = if self.scale_max > self.scale_min {
            rng.gen_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        let shear = sym(rng, self.shear);
        AffineParams {
            translation_px: [tx, ty],
            rotation_deg,
            scale,
            shear,
        }
    }
}

/// Parameters drawn for one augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationDraw {
    pub mirrored: bool,
    pub affine: AffineParams,
    pub elastic_seed: u64,
    pub noise_seed: u64,
}

impl AugmentationDraw {
    pub fn sample(config: &AugmentationConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mirrored = config.mirror_probability > 0.0 && rng.gen_bool(config.mirror_probability);
        let affine = config.sample_affine(&mut rng);
        AugmentationDraw {
            mirrored,
            affine,
            elastic_seed: rng.gen(),
            noise_seed: rng.gen(),
        }
    }

    /// Combined spatial field: affine first, then elastic.
    pub fn field(
        &self,
        config: &AugmentationConfig,
        shape: GridShape,
        spacing: Spacing,
    ) -> DeformationField {
        let affine = affine_field(&self.affine, shape, spacing);
        let elastic = elastic_field(
            config.elastic_sigma_mm,
            config.elastic_control_spacing_mm,
            shape,
            spacing,
            self.elastic_seed,
        );
        compose_fields(&affine, &elastic).expect("fields share the grid")
    }
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub ct: Option<CtVolume>,
    pub segmentation: MultiOrganSegmentation,
    pub draw: AugmentationDraw,
}

/// Full augmentation: optional mirror with label swap, one combined
/// deformation applied to CT and masks, then CT noise.
pub fn augment(
    ct: Option<&CtVolume>,
    seg: &MultiOrganSegmentation,
    taxonomy: &Taxonomy,
    config: &AugmentationConfig,
    mask_mode: MaskInterpolation,
) -> Result<Augmented, PerturbError> {
    config.validate()?;
    if let Some(ct) = ct {
        ct.shape().check_equal(&seg.shape())?;
        ct.spacing().check_close(&seg.spacing())?;
    }
    let draw = AugmentationDraw::sample(config);
    let (mut ct, mut seg) = (ct.cloned(), seg.clone());
    if draw.mirrored {
        seg = mirror_with_label_swap(&seg, taxonomy, Axis::X);
        ct = ct.map(|v| mirror_ct(&v, Axis::X));
    }
    let field = draw.field(config, seg.shape(), seg.spacing());
    let channels = seg
        .channels()
        .iter()
        .map(|(k, m)| Ok((k.clone(), warp_mask(m, &field, mask_mode)?)))
        .collect::<Result<BTreeMap<_, _>, GridError>>()?;
    let seg = MultiOrganSegmentation::new(seg.shape(), seg.spacing(), channels)?;
    let ct = match ct {
        Some(v) => Some(add_noise(&warp_ct(&v, &field)?, config.noise_sigma_hu, draw.noise_seed)),
        None => None,
    };
    Ok(Augmented {
        ct,
        segmentation: seg,
        draw,
    })
}

/// One point of a sensitivity sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub magnitude: f64,
    pub surface: SurfaceDscBreakdown,
    pub volumetric: Option<f64>,
}

/// Translates `reference` by `k` whole voxels along `axis` for each `k` and
/// scores the copy against the original.
pub fn translation_sweep(
    reference: &Mask,
    axis: Axis,
    ks: &[usize],
    tau_mm: f64,
) -> Result<Vec<SweepPoint>, PerturbError> {
    ks.iter()
        .map(|&k| {
            let mut offset = [0isize; 3];
            offset[axis.index()] = k as isize;
            let moved = reference.translated(offset);
            Ok(SweepPoint {
                magnitude: k as f64,
                surface: surface_dsc(reference, &moved, tau_mm)?,
                volumetric: volumetric_dsc(reference, &moved)?,
            })
        })
        .collect()
}

/// Warps `reference` with the geometric chain of `config.scaled_geometry(m)`
/// for each magnitude `m` and scores it against the original.
pub fn augmentation_sweep(
    reference: &Mask,
    config: &AugmentationConfig,
    magnitudes: &[f64],
    tau_mm: f64,
    mask_mode: MaskInterpolation,
) -> Result<Vec<SweepPoint>, PerturbError> {
    magnitudes
        .iter()
        .map(|&m| {
            let cfg = config.scaled_geometry(m);
            cfg.validate()?;
            let field = AugmentationDraw::sample(&cfg).field(&cfg, reference.shape(), reference.spacing());
            let warped = warp_mask(reference, &field, mask_mode)?;
            Ok(SweepPoint {
                magnitude: m,
                surface: surface_dsc(reference, &warped, tau_mm)?,
                volumetric: volumetric_dsc(reference, &warped)?,
            })
        })
        .collect()
}
