//! Brute-force reference implementations and fixtures shared by the
//! integration tests. Nothing here calls the distance transform or the
//! library's surface extraction; only the marching-cubes triangulation of a
//! single configuration is borrowed.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use surfdice::grid::{GridShape, Mask, Spacing};
use surfdice::io::nifti::write_mask;
use surfdice::surface::config_triangles;

/// (raster index, area) of every surface element, by direct neighbourhood
/// inspection.
pub fn oracle_surface(m: &Mask) -> Vec<([i64; 3], f64)> {
    let s = m.shape();
    let sp = m.spacing();
    let inside = |x: i64, y: i64, z: i64| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < s.nx
            && (y as usize) < s.ny
            && (z as usize) < s.nz
            && m.get(x as usize, y as usize, z as usize)
    };
    let mut out = Vec::new();
    for k in 0..=s.nz as i64 {
        for j in 0..=s.ny as i64 {
            for i in 0..=s.nx as i64 {
                let mut config = 0u8;
                for b in 0..8 {
                    let (ox, oy, oz) = ((b & 1) as i64, ((b >> 1) & 1) as i64, ((b >> 2) & 1) as i64);
                    if inside(i - 1 + ox, j - 1 + oy, k - 1 + oz) {
                        config |= 1 << b;
                    }
                }
                if config == 0 || config == 255 {
                    continue;
                }
                let area: f64 = config_triangles(config, &sp)
                    .iter()
                    .map(|t| {
                        let u = [t[1][0] - t[0][0], t[1][1] - t[0][1], t[1][2] - t[0][2]];
                        let v = [t[2][0] - t[0][0], t[2][1] - t[0][1], t[2][2] - t[0][2]];
                        let c = [
                            u[1] * v[2] - u[2] * v[1],
                            u[2] * v[0] - u[0] * v[2],
                            u[0] * v[1] - u[1] * v[0],
                        ];
                        0.5 * (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
                    })
                    .sum();
                out.push(([i, j, k], area));
            }
        }
    }
    out
}

#[inline]
pub fn raster_distance(a: [i64; 3], b: [i64; 3], sp: &Spacing) -> f64 {
    let t = [
        (a[0] - b[0]) as f64 * sp.dx,
        (a[1] - b[1]) as f64 * sp.dy,
        (a[2] - b[2]) as f64 * sp.dz,
    ];
    (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt()
}

/// Nearest achievable inter-voxel distance to `tau`, ties to the smaller.
pub fn oracle_quantize(tau: f64, sp: &Spacing) -> f64 {
    let d = [sp.dx, sp.dy, sp.dz];
    let reach = tau + d.iter().cloned().fold(0.0, f64::max);
    let n = d.map(|di| (reach / di).ceil() as i64 + 1);
    let mut best = 0.0f64;
    for a in 0..=n[0] {
        for b in 0..=n[1] {
            for c in 0..=n[2] {
                let v = raster_distance([a, b, c], [0, 0, 0], sp);
                let (gv, gb) = ((v - tau).abs(), (best - tau).abs());
                if gv < gb || (gv == gb && v < best) {
                    best = v;
                }
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleDsc {
    pub overlap_1: f64,
    pub overlap_2: f64,
    pub total_1: f64,
    pub total_2: f64,
    pub value: Option<f64>,
}

/// Surface Dice by all-pairs distances between surface elements.
pub fn oracle_surface_dsc(a: &Mask, b: &Mask, tau: f64) -> OracleDsc {
    let sp = a.spacing();
    let q = oracle_quantize(tau, &sp);
    let sa = oracle_surface(a);
    let sb = oracle_surface(b);
    let overlap = |from: &[([i64; 3], f64)], to: &[([i64; 3], f64)]| -> f64 {
        from.iter()
            .filter(|(p, _)| to.iter().any(|(r, _)| raster_distance(*p, *r, &sp) <= q))
            .map(|(_, area)| area)
            .sum()
    };
    let o1 = overlap(&sa, &sb);
    let o2 = overlap(&sb, &sa);
    let t1: f64 = sa.iter().map(|e| e.1).sum();
    let t2: f64 = sb.iter().map(|e| e.1).sum();
    let den = t1 + t2;
    OracleDsc {
        overlap_1: o1,
        overlap_2: o2,
        total_1: t1,
        total_2: t2,
        value: (den > 0.0).then(|| (o1 + o2) / den),
    }
}

pub fn oracle_volumetric_dsc(a: &Mask, b: &Mask) -> Option<f64> {
    let na = a.data().iter().filter(|&&v| v).count();
    let nb = b.data().iter().filter(|&&v| v).count();
    let both = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
    (na + nb > 0).then(|| 2.0 * both as f64 / (na + nb) as f64)
}

/// Exposed voxel faces times face area.
pub fn face_count_area(m: &Mask) -> f64 {
    let s = m.shape();
    let sp = m.spacing();
    let get = |x: i64, y: i64, z: i64| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < s.nx
            && (y as usize) < s.ny
            && (z as usize) < s.nz
            && m.get(x as usize, y as usize, z as usize)
    };
    let mut area = 0.0;
    for z in 0..s.nz as i64 {
        for y in 0..s.ny as i64 {
            for x in 0..s.nx as i64 {
                if !get(x, y, z) {
                    continue;
                }
                for (dx, dy, dz, face) in [
                    (1, 0, 0, sp.dy * sp.dz),
                    (-1, 0, 0, sp.dy * sp.dz),
                    (0, 1, 0, sp.dx * sp.dz),
                    (0, -1, 0, sp.dx * sp.dz),
                    (0, 0, 1, sp.dx * sp.dy),
                    (0, 0, -1, sp.dx * sp.dy),
                ] {
                    if !get(x + dx, y + dy, z + dz) {
                        area += face;
                    }
                }
            }
        }
    }
    area
}

/// Ball of radius `r` mm centred in a grid with a 2-voxel margin; voxel
/// centres at `(i + ½)·d`.
pub fn ball(r: f64, sp: Spacing) -> Mask {
    let d = [sp.dx, sp.dy, sp.dz];
    let n = d.map(|di| (2.0 * r / di).ceil() as usize + 4);
    let c = [0, 1, 2].map(|a| n[a] as f64 * d[a] / 2.0);
    let shape = GridShape::new(n[0], n[1], n[2]).unwrap();
    Mask::from_fn(shape, sp, |x, y, z| {
        let p = [x, y, z];
        let r2: f64 = (0..3)
            .map(|a| {
                let t = (p[a] as f64 + 0.5) * d[a] - c[a];
                t * t
            })
            .sum();
        r2 <= r * r
    })
}

/// Solid sphere filling 40% of an n³ unit grid, optionally off-centre.
pub fn grid_sphere(n: usize, offset: f64) -> Mask {
    let sp = Spacing::isotropic(1.0).unwrap();
    let c = n as f64 / 2.0 + offset;
    let r = 0.4 * n as f64;
    Mask::from_fn(GridShape::cube(n).unwrap(), sp, |x, y, z| {
        let t = [x as f64 + 0.5 - c, y as f64 + 0.5 - c, z as f64 + 0.5 - c];
        t[0] * t[0] + t[1] * t[1] + t[2] * t[2] <= r * r
    })
}

pub fn random_spacing(rng: &mut impl Rng) -> Spacing {
    Spacing::new(
        rng.gen_range(0.4..3.0),
        rng.gen_range(0.4..3.0),
        rng.gen_range(0.4..3.0),
    )
    .unwrap()
}

/// Random blobby mask: a few boxes plus salt noise.
pub fn random_mask(rng: &mut impl Rng, shape: GridShape, sp: Spacing) -> Mask {
    let n = shape.as_array();
    let mut m = Mask::empty(shape, sp);
    let boxes = rng.gen_range(0..4);
    for _ in 0..boxes {
        let lo = n.map(|k| rng.gen_range(0..k));
        let hi = [0, 1, 2].map(|a| rng.gen_range(lo[a]..n[a]) + 1);
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    m.set(x, y, z, true);
                }
            }
        }
    }
    let salt = rng.gen_range(0.0..0.15);
    for z in 0..n[2] {
        for y in 0..n[1] {
            for x in 0..n[0] {
                if rng.gen_bool(salt) {
                    let v = m.get(x, y, z);
                    m.set(x, y, z, !v);
                }
            }
        }
    }
    m
}

/// `m` with each voxel flipped with probability `p`.
pub fn jitter(rng: &mut impl Rng, m: &Mask, p: f64) -> Mask {
    let s = m.shape();
    Mask::from_fn(s, m.spacing(), |x, y, z| m.get(x, y, z) ^ rng.gen_bool(p))
}

/// Two-patient dataset on disk: observers `ref` and `cand`, organs
/// Brainstem, Parotid-Lt and Parotid-Rt.
pub struct Fixture {
    pub manifest: PathBuf,
    /// (patient, observer, organ) → mask
    pub masks: BTreeMap<(String, String, String), Mask>,
}

pub fn write_two_patient_fixture(dir: &Path) -> Fixture {
    let sp = Spacing::new(1.0, 1.25, 2.0).unwrap();
    let shape = GridShape::new(20, 16, 10).unwrap();
    let boxed = |lo: [usize; 3], hi: [usize; 3]| {
        Mask::from_fn(shape, sp, move |x, y, z| {
            (lo[0]..hi[0]).contains(&x) && (lo[1]..hi[1]).contains(&y) && (lo[2]..hi[2]).contains(&z)
        })
    };
    let mut masks = BTreeMap::new();
    let mut put = |p: &str, o: &str, organ: &str, m: Mask| {
        masks.insert((p.to_string(), o.to_string(), organ.to_string()), m);
    };
    // p1: identical brainstem, parotids shifted by one and three voxels
    put("p1", "ref", "Brainstem", boxed([8, 5, 2], [12, 10, 8]));
    put("p1", "cand", "Brainstem", boxed([8, 5, 2], [12, 10, 8]));
    put("p1", "ref", "Parotid-Lt", boxed([2, 3, 3], [6, 8, 6]));
    put("p1", "cand", "Parotid-Lt", boxed([3, 3, 3], [7, 8, 6]));
    put("p1", "ref", "Parotid-Rt", boxed([14, 3, 3], [18, 8, 6]));
    put("p1", "cand", "Parotid-Rt", boxed([14, 6, 3], [18, 11, 6]));
    // p2: a grown brainstem and a missed parotid
    put("p2", "ref", "Brainstem", boxed([7, 4, 2], [12, 10, 7]));
    put("p2", "cand", "Brainstem", boxed([7, 4, 2], [13, 11, 8]));
    put("p2", "ref", "Parotid-Lt", boxed([1, 2, 2], [6, 7, 6]));
    put("p2", "cand", "Parotid-Lt", Mask::empty(shape, sp));
    put("p2", "ref", "Parotid-Rt", boxed([13, 2, 2], [18, 7, 6]));
    put("p2", "cand", "Parotid-Rt", boxed([13, 2, 2], [18, 7, 5]));

    let mut patients = Vec::new();
    for p in ["p1", "p2"] {
        let mut segs = serde_json::Map::new();
        for o in ["ref", "cand"] {
            let mut organs = serde_json::Map::new();
            for ((pp, oo, organ), m) in &masks {
                if pp == p && oo == o {
                    let rel = format!("{p}/{o}/{organ}.nii.gz");
                    std::fs::create_dir_all(dir.join(p).join(o)).unwrap();
                    write_mask(m, &dir.join(&rel)).unwrap();
                    organs.insert(organ.clone(), rel.into());
                }
            }
            segs.insert(o.to_string(), organs.into());
        }
        patients.push(serde_json::json!({
            "patient_id": p,
            "scan_id": "s1",
            "segmentations": segs,
        }));
    }
    let manifest = dir.join("manifest.json");
    let doc = serde_json::json!({ "patients": patients });
    std::fs::write(&manifest, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    Fixture { manifest, masks }
}

/// Runs the `surfdice` binary; returns (exit code, stdout, stderr).
pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_surfdice"))
        .args(args)
        .env_remove("SURFDICE_JOBS")
        .output()
        .expect("spawn surfdice");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}
