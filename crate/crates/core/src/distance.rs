//! Exact anisotropic Euclidean distance transform on the shifted raster.
//!
//! Uses the separable lower-envelope-of-parabolas method of Felzenszwalb and
//! Huttenlocher: one 1D pass per axis over squared physical distances. Each
//! pass is linear in the number of raster points.
//!
//! Squared distances accumulate as `((Δx·dx)² + (Δy·dy)²) + (Δz·dz)²`. The
//! tolerance set enumerated in [`crate::metrics::quantize_tolerance`] uses the
//! same association, so a raster distance and the tolerance it is compared
//! against are bit-identical whenever they describe the same offset.

use rayon::prelude::*;

use crate::grid::Spacing;
use crate::surface::SurfaceElementList;

/// Distance in mm from every raster point to the nearest source surface
/// point. Points with no source (empty surface) hold `f64::INFINITY`, and
/// [`DistanceMap::is_empty_source`] is set.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    shape: [usize; 3],
    spacing: Spacing,
    dist: Vec<f64>,
    empty_source: bool,
}

impl DistanceMap {
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn is_empty_source(&self) -> bool {
        self.empty_source
    }

    pub fn values(&self) -> &[f64] {
        &self.dist
    }

    #[inline]
    pub fn get(&self, p: [usize; 3]) -> f64 {
        self.dist[p[0] + self.shape[0] * (p[1] + self.shape[1] * p[2])]
    }
}

/// Distance transform of `source` over a raster of `raster_shape` points.
///
/// # Panics
///
/// Panics if a source element lies outside `raster_shape`.
pub fn distance_transform(
    source: &SurfaceElementList,
    raster_shape: [usize; 3],
    spacing: Spacing,
) -> DistanceMap {
    let [nx, ny, nz] = raster_shape;
    let n = nx * ny * nz;
    if source.is_empty() {
        return DistanceMap {
            shape: raster_shape,
            spacing,
            dist: vec![f64::INFINITY; n],
            empty_source: true,
        };
    }

    let mut sq = vec![f64::INFINITY; n];
    for e in source.elements() {
        let [i, j, k] = e.raster_index;
        assert!(
            i < nx && j < ny && k < nz,
            "surface element {:?} outside raster {:?}",
            e.raster_index,
            raster_shape
        );
        sq[i + nx * (j + ny * k)] = 0.0;
    }

    // x: contiguous lines
    sq.par_chunks_mut(nx).for_each_init(Scratch::default, |s, line| {
        s.transform(line, spacing.dx);
    });

    // y: columns inside each z slab
    if ny > 1 {
        sq.par_chunks_mut(nx * ny)
            .for_each_init(Scratch::default, |s, slab| {
                s.line.resize(ny, 0.0);
                for x in 0..nx {
                    let mut line = std::mem::take(&mut s.line);
                    for (y, v) in line.iter_mut().enumerate() {
                        *v = slab[x + nx * y];
                    }
                    s.transform(&mut line, spacing.dy);
                    for (y, v) in line.iter().enumerate() {
                        slab[x + nx * y] = *v;
                    }
                    s.line = line;
                }
            });
    }

    // z: transpose into (x, y)-major lines, transform, scatter back
    if nz > 1 {
        let plane = nx * ny;
        let mut lines = vec![0.0; n];
        {
            let src = &sq;
            lines
                .par_chunks_mut(nz)
                .enumerate()
                .for_each_init(Scratch::default, |s, (xy, line)| {
                    for (z, v) in line.iter_mut().enumerate() {
                        *v = src[xy + plane * z];
                    }
                    s.transform(line, spacing.dz);
                });
        }
        sq.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
            for (xy, v) in slab.iter_mut().enumerate() {
                *v = lines[xy * nz + z];
            }
        });
    }

    let dist = sq.into_par_iter().map(f64::sqrt).collect();
    DistanceMap {
        shape: raster_shape,
        spacing,
        dist,
        empty_source: false,
    }
}

/// Pairs each element of `own` with its area and its distance to the surface
/// that produced `other_map`, in `own`'s order.
pub fn distances_to_other_surface(
    own: &SurfaceElementList,
    other_map: &DistanceMap,
) -> Vec<(f64, f64)> {
    own.elements()
        .iter()
        .map(|e| (e.area, other_map.get(e.raster_index)))
        .collect()
}

#[derive(Default)]
struct Scratch {
    sites: Vec<usize>,
    bounds: Vec<f64>,
    values: Vec<f64>,
    line: Vec<f64>,
}

impl Scratch {
    /// In-place 1D squared-distance transform of `f` (sample pitch `d` mm):
    /// `out[q] = min_v f[v] + ((q - v)·d)²`. Infinite entries are not sites.
    fn transform(&mut self, f: &mut [f64], d: f64) {
        let n = f.len();
        self.sites.clear();
        self.bounds.clear();
        self.values.clear();
        self.values.extend_from_slice(f);
        let g = &self.values;

        let pos = |q: usize| q as f64 * d;
        let mut first = None;
        for (q, &v) in g.iter().enumerate() {
            if v.is_finite() {
                first = Some(q);
                break;
            }
        }
        let Some(first) = first else {
            return;
        };

        self.sites.push(first);
        self.bounds.push(f64::NEG_INFINITY);
        self.bounds.push(f64::INFINITY);
        for q in first + 1..n {
            if !g[q].is_finite() {
                continue;
            }
            let pq = pos(q);
            let mut s;
            loop {
                let v = *self.sites.last().unwrap();
                let pv = pos(v);
                s = ((g[q] + pq * pq) - (g[v] + pv * pv)) / (2.0 * (pq - pv));
                let k = self.sites.len() - 1;
                if s <= self.bounds[k] && k > 0 {
                    self.sites.pop();
                    self.bounds.pop();
                } else {
                    break;
                }
            }
            let k = self.sites.len() - 1;
            if s <= self.bounds[k] {
                // k == 0: the new parabola dominates the whole line
                self.sites[0] = q;
            } else {
                self.sites.push(q);
                let last = self.bounds.len() - 1;
                self.bounds[last] = s;
                self.bounds.push(f64::INFINITY);
            }
        }

        let mut k = 0;
        for (q, out) in f.iter_mut().enumerate() {
            let pq = pos(q);
            while self.bounds[k + 1] < pq {
                k += 1;
            }
            let v = self.sites[k];
            let t = (q as f64 - v as f64) * d;
            *out = g[v] + t * t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridShape, Mask};
    use crate::surface::{extract_surface, NeighborAreaTable};

    fn brute_1d(f: &[f64], d: f64) -> Vec<f64> {
        (0..f.len())
            .map(|q| {
                f.iter()
                    .enumerate()
                    .filter(|(_, v)| v.is_finite())
                    .map(|(v, &fv)| {
                        let t = (q as f64 - v as f64) * d;
                        fv + t * t
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn one_dimensional_pass_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut s = Scratch::default();
        for _ in 0..500 {
            let n = rng.gen_range(1..20);
            let d = rng.gen_range(0.3..3.0);
            let f: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        rng.gen_range(0.0..30.0)
                    } else {
                        f64::INFINITY
                    }
                })
                .collect();
            let expected = brute_1d(&f, d);
            let mut got = f.clone();
            s.transform(&mut got, d);
            for (a, b) in got.iter().zip(&expected) {
                if b.is_infinite() {
                    assert!(a.is_infinite());
                } else {
                    assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
                }
            }
        }
    }

    fn point_source(raster: [usize; 3], sp: Spacing, at: [usize; 3]) -> SurfaceElementList {
        // a single voxel whose lower raster corner is `at` gives 8 elements;
        // use a mask and keep only the matching element
        let shape = GridShape::new(raster[0] - 1, raster[1] - 1, raster[2] - 1).unwrap();
        let m = Mask::from_voxels(shape, sp, &[at]).unwrap();
        let full = extract_surface(&m, &NeighborAreaTable::new(sp)).unwrap();
        assert!(full.elements().iter().any(|e| e.raster_index == at));
        full
    }

    #[test]
    fn axis_aligned_examples() {
        let sp = Spacing::isotropic(1.0).unwrap();
        let src = point_source([6, 6, 3], sp, [0, 0, 0]);
        let map = distance_transform(&src, [6, 6, 3], sp);
        // nearest source raster point to (4,5,0) is (1,1,0)
        assert_eq!(map.get([4, 5, 0]), 5.0);
        assert_eq!(map.get([0, 0, 0]), 0.0);

        let sp = Spacing::new(1.0, 1.0, 2.5).unwrap();
        let src = point_source([3, 3, 6], sp, [0, 0, 0]);
        let map = distance_transform(&src, [3, 3, 6], sp);
        // nearest source point to (0,0,3) is (0,0,1)
        assert_eq!(map.get([0, 0, 3]), 5.0);
    }

    #[test]
    fn empty_source_is_flagged() {
        let sp = Spacing::isotropic(1.0).unwrap();
        let m = Mask::empty(GridShape::cube(3).unwrap(), sp);
        let src = extract_surface(&m, &NeighborAreaTable::new(sp)).unwrap();
        let map = distance_transform(&src, [4, 4, 4], sp);
        assert!(map.is_empty_source());
        assert!(map.values().iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn two_voxels_three_apart() {
        let sp = Spacing::isotropic(1.0).unwrap();
        let t = NeighborAreaTable::new(sp);
        let s = GridShape::new(6, 3, 3).unwrap();
        let a = Mask::from_voxels(s, sp, &[[1, 1, 1]]).unwrap();
        let b = Mask::from_voxels(s, sp, &[[4, 1, 1]]).unwrap();
        let sa = extract_surface(&a, &t).unwrap();
        let sb = extract_surface(&b, &t).unwrap();
        let mb = distance_transform(&sb, sa.raster_shape(), sp);
        let mut d: Vec<f64> = distances_to_other_surface(&sa, &mb)
            .into_iter()
            .map(|(_, d)| d)
            .collect();
        d.sort_by(f64::total_cmp);
        assert_eq!(d, vec![2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]);

        let ma = distance_transform(&sa, sa.raster_shape(), sp);
        assert!(distances_to_other_surface(&sa, &ma).iter().all(|&(_, d)| d == 0.0));
    }
}
