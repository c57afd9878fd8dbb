//! Surface extraction on the half-voxel-shifted raster.
//!
//! Shifted-raster point `(i, j, k)` sits between voxels `i - 1` and `i` along
//! x (likewise for y and z), at physical position `((i - ½)dx, (j - ½)dy,
//! (k - ½)dz)` when voxel centres sit at integer multiples of the spacing.
//! A grid of `nx × ny × nz` voxels therefore has `(nx+1)(ny+1)(nz+1)` raster
//! points; voxels outside the grid count as background.
//!
//! Each raster point sees 8 voxels. Their states form the configuration code:
//! bit `b` is the voxel at offset `(b & 1, (b >> 1) & 1, (b >> 2) & 1)` from the
//! point's lower neighbour `(i - 1, j - 1, k - 1)`.

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{GridError, Mask, Spacing};
use crate::mc_table::TRIANGLES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurfaceError {
    #[error("area table spacing does not match mask spacing: {0}")]
    SpacingMismatch(#[from] GridError),
}

/// Position of each marching-cubes corner in the triangle table's numbering.
const MC_CORNERS: [[u8; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs joined by each marching-cubes edge.
const MC_EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

fn config_bit(corner: [u8; 3]) -> u8 {
    corner[0] | (corner[1] << 1) | (corner[2] << 2)
}

/// Translates a configuration code into the triangle table's case index.
fn table_case(config: u8) -> usize {
    MC_CORNERS
        .iter()
        .enumerate()
        .filter(|(_, &c)| config & (1 << config_bit(c)) != 0)
        .fold(0usize, |acc, (k, _)| acc | (1 << k))
}

/// Triangles (physical mm coordinates relative to the dual cell's lower
/// corner) that marching cubes emits for `config`. Vertices sit at edge
/// midpoints.
pub fn config_triangles(config: u8, spacing: &Spacing) -> Vec<[[f64; 3]; 3]> {
    let d = spacing.as_array();
    let row = &TRIANGLES[table_case(config)];
    let vertex = |edge: i8| -> [f64; 3] {
        let [a, b] = MC_EDGES[edge as usize];
        let (ca, cb) = (MC_CORNERS[a], MC_CORNERS[b]);
        [0, 1, 2].map(|ax| 0.5 * (ca[ax] as f64 + cb[ax] as f64) * d[ax])
    };
    row.chunks_exact(3)
        .take_while(|t| t[0] >= 0)
        .map(|t| [vertex(t[0]), vertex(t[1]), vertex(t[2])])
        .collect()
}

pub fn triangle_area(t: &[[f64; 3]; 3]) -> f64 {
    let u = [t[1][0] - t[0][0], t[1][1] - t[0][1], t[1][2] - t[0][2]];
    let v = [t[2][0] - t[0][0], t[2][1] - t[0][1], t[2][2] - t[0][2]];
    let c = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    0.5 * (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
}

/// Surface area (mm²) contributed by each of the 256 neighbour configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborAreaTable {
    spacing: Spacing,
    area: [f64; 256],
}

impl NeighborAreaTable {
    pub fn new(spacing: Spacing) -> Self {
        let mut area = [0.0; 256];
        for (config, slot) in area.iter_mut().enumerate() {
            *slot = config_triangles(config as u8, &spacing)
                .iter()
                .map(triangle_area)
                .fold(0.0, |acc, a| acc + a);
        }
        NeighborAreaTable { spacing, area }
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    #[inline]
    pub fn area(&self, config: u8) -> f64 {
        self.area[config as usize]
    }

    pub fn areas(&self) -> &[f64; 256] {
        &self.area
    }

    /// `config,area_mm2` lines for auditing the table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,area_mm2\n");
        for (c, a) in self.area.iter().enumerate() {
            out.push_str(&format!("{c},{a}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceElement {
    pub raster_index: [usize; 3],
    pub config: u8,
    pub area: f64,
}

impl SurfaceElement {
    /// Physical position in mm (voxel `(0,0,0)` centred at the origin).
    pub fn position(&self, spacing: &Spacing) -> [f64; 3] {
        let d = spacing.as_array();
        [0, 1, 2].map(|a| (self.raster_index[a] as f64 - 0.5) * d[a])
    }
}

/// Surface elements of one mask in raster-lexicographic order (x fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceElementList {
    raster_shape: [usize; 3],
    spacing: Spacing,
    elements: Vec<SurfaceElement>,
    total_area: f64,
}

impl SurfaceElementList {
    pub fn raster_shape(&self) -> [usize; 3] {
        self.raster_shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn elements(&self) -> &[SurfaceElement] {
        &self.elements
    }

    pub fn total_area(&self) -> f64 {
        self.total_area
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// Configuration code of shifted-raster point `(i, j, k)`.
#[inline]
pub fn neighbor_config(m: &Mask, i: usize, j: usize, k: usize) -> u8 {
    let mut code = 0u8;
    for b in 0..8u8 {
        let x = i as isize - 1 + (b & 1) as isize;
        let y = j as isize - 1 + ((b >> 1) & 1) as isize;
        let z = k as isize - 1 + ((b >> 2) & 1) as isize;
        if m.get_padded(x, y, z) {
            code |= 1 << b;
        }
    }
    code
}

pub fn extract_surface(
    m: &Mask,
    table: &NeighborAreaTable,
) -> Result<SurfaceElementList, SurfaceError> {
    table.spacing.check_close(&m.spacing())?;
    let s = m.shape();
    let raster_shape = [s.nx + 1, s.ny + 1, s.nz + 1];

    let slabs: Vec<Vec<SurfaceElement>> = (0..raster_shape[2])
        .into_par_iter()
        .map(|k| {
            let mut out = Vec::new();
            for j in 0..raster_shape[1] {
                for i in 0..raster_shape[0] {
                    let config = neighbor_config(m, i, j, k);
                    if config == 0 || config == 255 {
                        continue;
                    }
                    let area = table.area(config);
                    if area > 0.0 {
                        out.push(SurfaceElement {
                            raster_index: [i, j, k],
                            config,
                            area,
                        });
                    }
                }
            }
            out
        })
        .collect();

    let elements: Vec<SurfaceElement> = slabs.into_iter().flatten().collect();
    let total_area = elements.iter().map(|e| e.area).fold(0.0, |acc, a| acc + a);
    Ok(SurfaceElementList {
        raster_shape,
        spacing: m.spacing(),
        elements,
        total_area,
    })
}

pub fn total_surface_area(m: &Mask, table: &NeighborAreaTable) -> Result<f64, SurfaceError> {
    Ok(extract_surface(m, table)?.total_area)
}

/// Area of all voxel faces separating foreground from background (grid
/// boundary included). This is the naive face-counting estimator.
pub fn exposed_face_area(m: &Mask) -> f64 {
    let s = m.shape();
    let sp = m.spacing();
    let face = [sp.dy * sp.dz, sp.dx * sp.dz, sp.dx * sp.dy];
    let mut faces = [0usize; 3];
    for z in 0..s.nz {
        for y in 0..s.ny {
            for x in 0..s.nx {
                if !m.get(x, y, z) {
                    continue;
                }
                let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                faces[0] += (!m.get_padded(xi - 1, yi, zi)) as usize
                    + (!m.get_padded(xi + 1, yi, zi)) as usize;
                faces[1] += (!m.get_padded(xi, yi - 1, zi)) as usize
                    + (!m.get_padded(xi, yi + 1, zi)) as usize;
                faces[2] += (!m.get_padded(xi, yi, zi - 1)) as usize
                    + (!m.get_padded(xi, yi, zi + 1)) as usize;
            }
        }
    }
    (0..3).map(|a| faces[a] as f64 * face[a]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;

    fn unit() -> Spacing {
        Spacing::isotropic(1.0).unwrap()
    }

    #[test]
    fn table_extremes_are_zero_and_entries_nonnegative() {
        let t = NeighborAreaTable::new(Spacing::new(0.8, 1.1, 2.5).unwrap());
        assert_eq!(t.area(0), 0.0);
        assert_eq!(t.area(255), 0.0);
        assert!(t.areas().iter().all(|&a| a >= 0.0));
        assert!(t.areas()[1..255].iter().all(|&a| a > 0.0));
    }

    #[test]
    fn single_corner_area_matches_midpoint_triangle() {
        let t = NeighborAreaTable::new(unit());
        let direct = triangle_area(&[[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]]);
        let expected = 3f64.sqrt() / 8.0;
        assert!((direct - expected).abs() < 1e-15);
        for b in 0..8 {
            assert!((t.area(1 << b) - expected).abs() < 1e-15);
            assert!((t.area(255 - (1 << b)) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn full_face_config_gives_cross_section() {
        let sp = Spacing::new(1.0, 1.0, 2.0).unwrap();
        let t = NeighborAreaTable::new(sp);
        // corners with z offset 0: bits 0..3
        let bottom = 0b0000_1111;
        let tris = config_triangles(bottom, &sp);
        assert!(tris.iter().flatten().all(|v| (v[2] - 1.0).abs() < 1e-15));
        assert!((t.area(bottom) - 1.0).abs() < 1e-12);
        assert!((t.area(0b1111_0000) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn complement_symmetry_for_simple_configs() {
        let t = NeighborAreaTable::new(Spacing::new(0.7, 1.9, 3.1).unwrap());
        for c in 0..=255u8 {
            let ones = c.count_ones();
            if ones <= 1 || ones >= 7 {
                assert_eq!(t.area(c), t.area(255 - c), "config {c}");
            }
        }
    }

    #[test]
    fn empty_and_single_voxel() {
        let t = NeighborAreaTable::new(unit());
        let s = GridShape::cube(4).unwrap();
        let empty = extract_surface(&Mask::empty(s, unit()), &t).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.total_area(), 0.0);

        let one = Mask::from_voxels(s, unit(), &[[1, 1, 1]]).unwrap();
        let surf = extract_surface(&one, &t).unwrap();
        assert_eq!(surf.len(), 8);
        assert!(surf.elements().iter().all(|e| e.config.count_ones() == 1));
        assert!((surf.total_area() - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn full_mask_has_boundary_surface() {
        let t = NeighborAreaTable::new(unit());
        let m = Mask::from_fn(GridShape::cube(3).unwrap(), unit(), |_, _, _| true);
        let surf = extract_surface(&m, &t).unwrap();
        assert!(!surf.is_empty());
        assert!(surf.total_area() > 0.0);
    }

    #[test]
    fn spacing_mismatch_is_rejected() {
        let t = NeighborAreaTable::new(unit());
        let m = Mask::empty(GridShape::cube(2).unwrap(), Spacing::new(1.0, 1.0, 2.0).unwrap());
        assert!(extract_surface(&m, &t).is_err());
    }

    #[test]
    fn positions_lie_on_shifted_raster() {
        let sp = Spacing::new(0.9, 1.2, 2.5).unwrap();
        let t = NeighborAreaTable::new(sp);
        let m = Mask::from_voxels(GridShape::cube(4).unwrap(), sp, &[[1, 2, 3], [2, 2, 3]]).unwrap();
        for e in extract_surface(&m, &t).unwrap().elements() {
            let p = e.position(&sp);
            for (a, d) in sp.as_array().into_iter().enumerate() {
                let n = (p[a] - 0.5 * d) / d;
                assert!((n - n.round()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_dump_has_256_rows() {
        let csv = NeighborAreaTable::new(unit()).to_csv();
        assert_eq!(csv.lines().count(), 257);
        assert!(csv.starts_with("config,area_mm2\n0,0\n"));
    }

    #[test]
    fn area_scales_quadratically() {
        let sp = Spacing::new(0.6, 0.9, 1.7).unwrap();
        let m = Mask::from_fn(GridShape::cube(6).unwrap(), sp, |x, y, z| {
            (x + 2 * y + z) % 3 == 0 && x > 0
        });
        let a = total_surface_area(&m, &NeighborAreaTable::new(sp)).unwrap();
        let sp2 = sp.scaled(2.5).unwrap();
        let b = total_surface_area(&m.with_spacing(sp2), &NeighborAreaTable::new(sp2)).unwrap();
        assert!((b - a * 6.25).abs() < 1e-9 * b);
    }
}
