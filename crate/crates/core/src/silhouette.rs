//! Binary silhouettes of posed meshes and their comparison with masks.
//!
//! Pixel `(i, j)` (column, row) has its center at image coordinates
//! `(i, j)`. A pixel is set when its center is covered by at least one
//! projected triangle; centers exactly on an edge follow the top-left rule,
//! so a pixel on an edge shared by two triangles is claimed by exactly one
//! of them. There is no depth test: coverage is all a silhouette needs.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point2, ProjectionMatrix, TriangleMesh, DEGENERATE_DEPTH};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("vertex {vertex} projects with depth {depth} (behind or on the camera plane)")]
    BehindCamera { vertex: usize, depth: f64 },
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("mask dimensions differ: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid mask: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl RenderError {
    pub fn code(&self) -> &'static str {
        match self {
            RenderError::BehindCamera { .. } => "BehindCamera",
            RenderError::EmptyMesh => "EmptyMesh",
            RenderError::DimensionMismatch { .. } => "DimensionMismatch",
            RenderError::Parse(_) => "ParseError",
            RenderError::Io(_) => "IoError",
        }
    }
}

/// Row-major binary image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, RenderError> {
        if bits.len() != width * height {
            return Err(RenderError::Parse(format!(
                "{} bits for a {width}×{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn<F: Fn(usize, usize) -> bool>(width: usize, height: usize, f: F) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Inclusive `(min_x, min_y, max_x, max_y)` of set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut out: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    out = Some(match out {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        out
    }

    /// Copy moved by `(dx, dy)` pixels; pixels shifted in from outside are clear.
    pub fn shifted(&self, dx: i64, dy: i64) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            let (sx, sy) = (x as i64 - dx, y as i64 - dy);
            sx >= 0
                && sy >= 0
                && (sx as usize) < self.width
                && (sy as usize) < self.height
                && self.get(sx as usize, sy as usize)
        })
    }

    /// Binary PGM (`P5`, maxval 255): set pixels are 255, clear ones 0.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<(), RenderError> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    /// Reads a binary PGM (`P5`); any nonzero sample is set.
    pub fn read_pgm<R: BufRead>(mut r: R) -> Result<Self, RenderError> {
        let mut tokens = Vec::with_capacity(4);
        let mut token = String::new();
        let mut in_comment = false;
        // Header: magic, width, height, maxval, then one whitespace byte.
        while tokens.len() < 4 {
            let mut byte = [0u8; 1];
            if r.read(&mut byte)? == 0 {
                return Err(RenderError::Parse("truncated PGM header".into()));
            }
            let c = byte[0] as char;
            if in_comment {
                in_comment = c != '\n';
                continue;
            }
            if c == '#' {
                in_comment = true;
            } else if c.is_ascii_whitespace() {
                if !token.is_empty() {
                    tokens.push(std::mem::take(&mut token));
                }
            } else {
                token.push(c);
            }
        }
        if tokens[0] != "P5" {
            return Err(RenderError::Parse(format!(
                "unsupported magic '{}'",
                tokens[0]
            )));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| RenderError::Parse(format!("bad header value '{s}'")))
        };
        let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
        if maxval == 0 || maxval > 65535 {
            return Err(RenderError::Parse(format!("bad maxval {maxval}")));
        }
        let bytes_per = if maxval > 255 { 2 } else { 1 };
        let mut data = vec![0u8; width * height * bytes_per];
        r.read_exact(&mut data)
            .map_err(|_| RenderError::Parse("truncated PGM data".into()))?;
        let bits = data
            .chunks_exact(bytes_per)
            .map(|c| c.iter().any(|&b| b != 0))
            .collect();
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, RenderError> {
        Self::read_pgm(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), RenderError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_pgm(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Edge function of `p` against the directed edge `a → b`; positive on the
/// left in image coordinates (y down). Always evaluated with the endpoints
/// in lexicographic order so both triangles sharing an edge see exactly
/// negated values.
fn edge_function(a: Point2, b: Point2, p: Point2) -> f64 {
    let forward = (a.x, a.y) <= (b.x, b.y);
    let (s, t) = if forward { (a, b) } else { (b, a) };
    let v = (t.x - s.x) * (p.y - s.y) - (t.y - s.y) * (p.x - s.x);
    if forward {
        v
    } else {
        -v
    }
}

/// Top or left edge of a positively oriented triangle.
fn is_top_left(a: Point2, b: Point2) -> bool {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

fn rasterize_triangle(mask: &mut BinaryMask, tri: [Point2; 3]) {
    let [a, mut b, mut c] = tri;
    let area = edge_function(a, b, c);
    if area == 0.0 || !area.is_finite() {
        return;
    }
    if area < 0.0 {
        std::mem::swap(&mut b, &mut c);
    }
    let (w, h) = (mask.width as f64, mask.height as f64);
    let min_x = a.x.min(b.x).min(c.x).ceil().max(0.0);
    let max_x = a.x.max(b.x).max(c.x).floor().min(w - 1.0);
    let min_y = a.y.min(b.y).min(c.y).ceil().max(0.0);
    let max_y = a.y.max(b.y).max(c.y).floor().min(h - 1.0);
    if min_x > max_x || min_y > max_y {
        return;
    }
    let edges = [(a, b), (b, c), (c, a)];
    let top_left = edges.map(|(p, q)| is_top_left(p, q));
    for y in min_y as usize..=max_y as usize {
        for x in min_x as usize..=max_x as usize {
            let p = Point2::new(x as f64, y as f64);
            let covered = edges.iter().zip(&top_left).all(|(&(s, t), &tl)| {
                let e = edge_function(s, t, p);
                e > 0.0 || (e == 0.0 && tl)
            });
            if covered {
                mask.set(x, y, true);
            }
        }
    }
}

/// Renders the silhouette of `mesh` under the projection `p`.
pub fn render_silhouette(
    mesh: &TriangleMesh,
    p: &ProjectionMatrix,
    width: usize,
    height: usize,
) -> Result<BinaryMask, RenderError> {
    if mesh.faces().is_empty() {
        return Err(RenderError::EmptyMesh);
    }
    let projected: Vec<Point2> = mesh
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let h = p.apply(v);
            if !(h.z > DEGENERATE_DEPTH) {
                return Err(RenderError::BehindCamera {
                    vertex: i,
                    depth: h.z,
                });
            }
            Ok(Point2::new(h.x / h.z, h.y / h.z))
        })
        .collect::<Result<_, _>>()?;
    let mut mask = BinaryMask::new(width, height);
    for f in mesh.faces() {
        rasterize_triangle(&mut mask, f.map(|i| projected[i]));
    }
    Ok(mask)
}

/// `|a ∧ b| / |a ∨ b|`; two empty masks give 0.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, RenderError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(RenderError::DimensionMismatch {
            left: (a.width, a.height),
            right: (b.width, b.height),
        });
    }
    let (inter, union) = a
        .bits
        .iter()
        .zip(&b.bits)
        .fold((0usize, 0usize), |(i, u), (&x, &y)| {
            (i + (x && y) as usize, u + (x || y) as usize)
        });
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Closed boundary polylines of the set region, traced through the
/// midpoints between pixel centers (marching squares). Each loop keeps the
/// set region on its right in image coordinates; diagonal-only contacts
/// are treated as separate regions.
pub fn outline(mask: &BinaryMask) -> Vec<Vec<[f64; 2]>> {
    let inside = |x: i64, y: i64| {
        x >= 0
            && y >= 0
            && (x as usize) < mask.width
            && (y as usize) < mask.height
            && mask.get(x as usize, y as usize)
    };
    // Lattice edge key: (x, y, axis) of its lower endpoint.
    type Key = (i64, i64, u8);
    let key = |p: (i64, i64), q: (i64, i64)| -> Key {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        (lo.0, lo.1, (hi.1 != lo.1) as u8)
    };
    let mut next: BTreeMap<Key, Key> = BTreeMap::new();
    for cy in -1..mask.height as i64 {
        for cx in -1..mask.width as i64 {
            let corners = [(cx, cy), (cx + 1, cy), (cx + 1, cy + 1), (cx, cy + 1)];
            let ins = corners.map(|(x, y)| inside(x, y));
            let crossings = (0..4).filter(|&k| ins[k] != ins[(k + 1) % 4]).count();
            if crossings == 0 {
                continue;
            }
            let edge_key = |k: usize| key(corners[k], corners[(k + 1) % 4]);
            for leave in (0..4).filter(|&k| ins[k] && !ins[(k + 1) % 4]) {
                let enter = if crossings == 2 {
                    (0..4).find(|&k| !ins[k] && ins[(k + 1) % 4]).unwrap()
                } else {
                    (leave + 3) % 4
                };
                next.insert(edge_key(leave), edge_key(enter));
            }
        }
    }
    let point = |k: Key| -> [f64; 2] {
        if k.2 == 0 {
            [k.0 as f64 + 0.5, k.1 as f64]
        } else {
            [k.0 as f64, k.1 as f64 + 0.5]
        }
    };
    let mut loops = Vec::new();
    while let Some((&start, _)) = next.iter().next() {
        let mut lp = Vec::new();
        let mut cur = start;
        while let Some(n) = next.remove(&cur) {
            lp.push(point(cur));
            cur = n;
        }
        loops.push(lp);
    }
    loops
}
