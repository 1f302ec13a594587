//! Iso-surface extraction from voxel grids.
//!
//! Voxel values are samples at integer lattice points; a point is inside when
//! its value exceeds the iso level. Instead of the usual 256-entry case
//! table, each cube is handled by contouring its six faces (marching squares
//! with the asymptotic decider on saddle faces) and chaining the face
//! segments into closed loops, which are fan-triangulated. Two cubes that
//! share a face derive identical segments on it, so the surface is closed
//! wherever the grid boundary is outside.

use std::collections::HashMap;

use super::{MetricError, VoxelGrid};
use crate::geometry::{Point3, TriangleMesh};

/// Corner `i` of a cube sits at offset `(i & 1, (i >> 1) & 1, (i >> 2) & 1)`.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Face corner cycles, counter-clockwise about the outward face normal.
const FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2], // -x
    [1, 3, 7, 5], // +x
    [0, 1, 5, 4], // -y
    [2, 6, 7, 3], // +y
    [0, 2, 3, 1], // -z
    [4, 5, 7, 6], // +z
];

struct Extractor<'a> {
    grid: &'a VoxelGrid,
    iso: f64,
    vertices: Vec<Point3>,
    /// (linear index of the lower lattice point, axis) → vertex index.
    edge_vertex: HashMap<(usize, u8), usize>,
    faces: Vec<[usize; 3]>,
}

impl Extractor<'_> {
    fn value(&self, p: [usize; 3]) -> f64 {
        self.grid.get(p[0], p[1], p[2]) as f64
    }

    fn inside(&self, p: [usize; 3]) -> bool {
        self.value(p) > self.iso
    }

    /// Vertex on the lattice edge between adjacent points `a` and `b`.
    fn edge_vertex(&mut self, a: [usize; 3], b: [usize; 3]) -> usize {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let axis = (0..3)
            .find(|&k| lo[k] != hi[k])
            .expect("adjacent lattice points") as u8;
        let key = (self.grid.index(lo[0], lo[1], lo[2]), axis);
        if let Some(&v) = self.edge_vertex.get(&key) {
            return v;
        }
        let (vl, vh) = (self.value(lo), self.value(hi));
        let t = ((self.iso - vl) / (vh - vl)).clamp(0.0, 1.0);
        let mut p = Point3::new(lo[0] as f64, lo[1] as f64, lo[2] as f64);
        p[axis as usize] += t;
        let idx = self.vertices.len();
        self.vertices.push(p);
        self.edge_vertex.insert(key, idx);
        idx
    }

    fn cube(&mut self, origin: [usize; 3]) {
        let at = |c: usize| {
            let o = CORNERS[c];
            [origin[0] + o[0], origin[1] + o[1], origin[2] + o[2]]
        };
        let inside: [bool; 8] = std::array::from_fn(|c| self.inside(at(c)));
        if inside.iter().all(|&b| b) || inside.iter().all(|&b| !b) {
            return;
        }

        // Directed segments (start vertex, end vertex), each running from a
        // crossing where the face boundary leaves the inside region to the
        // crossing where it next re-enters (or previously entered, on saddle
        // faces whose inside corners are separated).
        let mut segments: Vec<(usize, usize)> = Vec::with_capacity(12);
        for face in FACES {
            let ins = face.map(|c| inside[c]);
            let crossings: Vec<usize> = (0..4).filter(|&k| ins[k] != ins[(k + 1) % 4]).collect();
            if crossings.is_empty() {
                continue;
            }
            let vertex_of =
                |this: &mut Self, k: usize| this.edge_vertex(at(face[k]), at(face[(k + 1) % 4]));
            if crossings.len() == 2 {
                let (leave, enter) = if ins[crossings[0]] {
                    (crossings[0], crossings[1])
                } else {
                    (crossings[1], crossings[0])
                };
                let (s, e) = (vertex_of(self, leave), vertex_of(self, enter));
                segments.push((s, e));
            } else {
                let v = face.map(|c| self.value(at(c)));
                let connected = saddle_value(v) > self.iso;
                for leave in (0..4).filter(|&k| ins[k]) {
                    let enter = if connected {
                        (leave + 1) % 4
                    } else {
                        (leave + 3) % 4
                    };
                    let (s, e) = (vertex_of(self, leave), vertex_of(self, enter));
                    segments.push((s, e));
                }
            }
        }

        // Every crossing starts exactly one segment and ends exactly one.
        let mut used = vec![false; segments.len()];
        for first in 0..segments.len() {
            if used[first] {
                continue;
            }
            let mut lp = Vec::with_capacity(6);
            let mut cur = first;
            loop {
                used[cur] = true;
                lp.push(segments[cur].0);
                let end = segments[cur].1;
                match (0..segments.len()).find(|&j| !used[j] && segments[j].0 == end) {
                    Some(next) => cur = next,
                    None => break,
                }
            }
            // Loops run against the outward orientation of the surface, so
            // triangles are emitted reversed.
            for i in 1..lp.len().saturating_sub(1) {
                self.faces.push([lp[0], lp[i + 1], lp[i]]);
            }
        }
    }
}

/// Value of the bilinear interpolant at the saddle point of a face whose
/// corners are given in cyclic order.
fn saddle_value(v: [f64; 4]) -> f64 {
    (v[0] * v[2] - v[1] * v[3]) / ((v[0] + v[2]) - (v[1] + v[3]))
}

/// Extracts the surface `{value = iso}` as a triangle mesh in lattice
/// coordinates, with outward-facing triangles (normals point toward lower
/// values).
pub fn marching_cubes(grid: &VoxelGrid, iso: f64) -> Result<TriangleMesh, MetricError> {
    if !(iso > 0.0 && iso < 1.0) {
        return Err(MetricError::InvalidConfig(format!(
            "iso value {iso} outside (0, 1)"
        )));
    }
    let above = grid.values().iter().any(|&v| v as f64 > iso);
    let below = grid.values().iter().any(|&v| v as f64 <= iso);
    let [nx, ny, nz] = grid.dims();
    if !(above && below) || nx < 2 || ny < 2 || nz < 2 {
        return Err(MetricError::EmptySurface);
    }
    let mut ex = Extractor {
        grid,
        iso,
        vertices: Vec::new(),
        edge_vertex: HashMap::new(),
        faces: Vec::new(),
    };
    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                ex.cube([x, y, z]);
            }
        }
    }
    if ex.faces.is_empty() {
        return Err(MetricError::EmptySurface);
    }
    Ok(TriangleMesh::new(ex.vertices, ex.faces)?)
}
