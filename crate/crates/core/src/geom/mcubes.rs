//! Marching cubes over a sampled scalar field.
//!
//! The 256-case triangulation table is derived once at startup from the cube
//! topology instead of being embedded: on every face the iso-contour crosses
//! 0, 2 or 4 edges, ambiguous faces always separate the inside corners, and
//! the per-face segments chain into closed loops that are fanned into
//! triangles. Neighbouring cells see the same corner signs on a shared face,
//! so the rule is consistent across the grid.

use super::{Aabb, GeomError, TriangleMesh, Vec3};
use std::collections::HashMap;
use std::sync::OnceLock;

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
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

// Corner cycles, counter-clockwise seen from outside the cube.
const FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [3, 7, 6, 2],
    [0, 4, 7, 3],
    [1, 2, 6, 5],
];

type CaseTable = Vec<Vec<[u8; 3]>>;

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("corners share an edge")
}

fn case_triangles(case: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| case & (1 << c) != 0;
    let mut next = [usize::MAX; 12];
    for face in FACES {
        // (edge, is_entry) in cyclic order around the face.
        let mut crossings = Vec::with_capacity(4);
        for k in 0..4 {
            let (a, b) = (face[k], face[(k + 1) % 4]);
            if inside(a) != inside(b) {
                crossings.push((edge_between(a, b), inside(b)));
            }
        }
        for (k, &(edge, entry)) in crossings.iter().enumerate() {
            if entry {
                let (exit, is_entry) = crossings[(k + 1) % crossings.len()];
                debug_assert!(!is_entry);
                next[exit] = edge;
            }
        }
    }
    let mut visited = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || visited[start] {
            continue;
        }
        let mut cycle = Vec::new();
        let mut e = start;
        while !visited[e] {
            visited[e] = true;
            cycle.push(e as u8);
            e = next[e];
        }
        for i in 1..cycle.len().saturating_sub(1) {
            tris.push([cycle[0], cycle[i + 1], cycle[i]]);
        }
    }
    tris
}

fn case_table() -> &'static CaseTable {
    static TABLE: OnceLock<CaseTable> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(case_triangles).collect())
}

/// Extracts the zero level set of `sdf` inside `bounds` on a grid with
/// `resolution` cells per axis. Negative values are inside.
pub fn extract_surface<F>(sdf: F, bounds: &Aabb, resolution: usize) -> Result<TriangleMesh, GeomError>
where
    F: Fn(&Vec3) -> f64,
{
    extract(sdf, bounds, resolution, false)
}

/// Same as [`extract_surface`] for a 1-Lipschitz field. Blocks of cells
/// whose centre lies farther from the surface than their half-diagonal are
/// skipped without evaluating their corners.
pub fn extract_surface_lipschitz<F>(sdf: F, bounds: &Aabb, resolution: usize) -> Result<TriangleMesh, GeomError>
where
    F: Fn(&Vec3) -> f64,
{
    extract(sdf, bounds, resolution, true)
}

const BLOCK: usize = 4;

fn extract<F>(sdf: F, bounds: &Aabb, resolution: usize, prune: bool) -> Result<TriangleMesh, GeomError>
where
    F: Fn(&Vec3) -> f64,
{
    if resolution < 2 {
        return Err(GeomError::Resolution(resolution));
    }
    let ext = bounds.extent();
    if ext.iter().any(|&e| !(e > 0.0)) {
        return Err(GeomError::DegenerateBounds);
    }
    let n = resolution;
    let np = n + 1;
    let step = [ext[0] / n as f64, ext[1] / n as f64, ext[2] / n as f64];
    let grid_point = |i: usize, j: usize, k: usize| {
        Vec3::new(
            bounds.min[0] + i as f64 * step[0],
            bounds.min[1] + j as f64 * step[1],
            bounds.min[2] + k as f64 * step[2],
        )
    };
    let at = |i: usize, j: usize, k: usize| (i * np + j) * np + k;

    let mut values = vec![f64::NAN; np * np * np];
    let table = case_table();
    let min_area2 = 1e-24 * (step[0] * step[1] + step[1] * step[2] + step[0] * step[2]).powi(2);
    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<usize, usize> = HashMap::new();
    let nb = n.div_ceil(BLOCK);
    for bi in 0..nb {
        for bj in 0..nb {
            for bk in 0..nb {
                let lo = [bi * BLOCK, bj * BLOCK, bk * BLOCK];
                let hi = [(lo[0] + BLOCK).min(n), (lo[1] + BLOCK).min(n), (lo[2] + BLOCK).min(n)];
                if prune {
                    let a = grid_point(lo[0], lo[1], lo[2]);
                    let b = grid_point(hi[0], hi[1], hi[2]);
                    let centre = (a + b) * 0.5;
                    let half_diag = (b - a).norm() * 0.5;
                    if sdf(&centre).abs() > half_diag * (1.0 + 1e-9) + 1e-12 {
                        continue;
                    }
                }
                for i in lo[0]..hi[0] {
                    for j in lo[1]..hi[1] {
                        for k in lo[2]..hi[2] {
                            let mut case = 0usize;
                            let mut corner_vals = [0.0; 8];
                            for (c, off) in CORNERS.iter().enumerate() {
                                let idx = at(i + off[0], j + off[1], k + off[2]);
                                let mut v = values[idx];
                                if v.is_nan() {
                                    v = sdf(&grid_point(i + off[0], j + off[1], k + off[2]));
                                    values[idx] = v;
                                }
                                corner_vals[c] = v;
                                if v < 0.0 {
                                    case |= 1 << c;
                                }
                            }
                            if case == 0 || case == 255 {
                                continue;
                            }
                            for tri in &table[case] {
                                let mut ids = [0usize; 3];
                                for (slot, &local) in tri.iter().enumerate() {
                                    let [ca, cb] = EDGES[local as usize];
                                    let (oa, ob) = (CORNERS[ca], CORNERS[cb]);
                                    let axis = (0..3).find(|&a| oa[a] != ob[a]).unwrap_or(0);
                                    let low = if oa[axis] == 0 { oa } else { ob };
                                    let key = at(i + low[0], j + low[1], k + low[2]) * 3 + axis;
                                    ids[slot] = *edge_vertex.entry(key).or_insert_with(|| {
                                        let pa = grid_point(i + oa[0], j + oa[1], k + oa[2]);
                                        let pb = grid_point(i + ob[0], j + ob[1], k + ob[2]);
                                        let (va, vb) = (corner_vals[ca], corner_vals[cb]);
                                        let t = va / (va - vb);
                                        mesh.vertices.push(pa + (pb - pa) * t);
                                        mesh.vertices.len() - 1
                                    });
                                }
                                if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
                                    continue;
                                }
                                let (a, b, c) = (mesh.vertices[ids[0]], mesh.vertices[ids[1]], mesh.vertices[ids[2]]);
                                if (b - a).cross(&(c - a)).norm_squared() <= min_area2 {
                                    continue;
                                }
                                mesh.triangles.push(ids);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(mesh)
}
