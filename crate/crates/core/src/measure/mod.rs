//! Polygonal flux trees on the periodic box `Q_L x [-T, T]`.
//!
//! A measure is a finite set of affine segments, each carrying a constant
//! positive flux upward from its tail node to its head node. Winding around
//! the torus is explicit: the unwrapped displacement of a segment is
//! `head.pos + lift * L - tail.pos`.

mod io;
mod topology;
mod validate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{torus_distance_sq, wrap_coord, TorusPoint};

pub use io::TreeFile;
pub use topology::{classify_regular, detect_loops, merge_coincident, Cycle, RegularityReport};
pub use validate::{validate, ValidationReport, Violation};

/// Relative tolerance used when comparing fluxes of float-valued measures.
pub const FLUX_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub pos: TorusPoint,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub tail: usize,
    pub head: usize,
    pub flux: f64,
    pub lift: [i32; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolygonalMeasure {
    pub l: f64,
    pub t: f64,
    pub nodes: Vec<Node>,
    pub segments: Vec<Segment>,
    /// External node identifiers, kept so that files round-trip. Empty means
    /// the default `n<index>` labels.
    pub labels: Vec<String>,
}

impl PolygonalMeasure {
    pub fn new(l: f64, t: f64) -> Result<Self> {
        if !(l > 0.0 && l.is_finite() && t > 0.0 && t.is_finite()) {
            return Err(Error::domain(format!("box must have L > 0 and T > 0, got L={l}, T={t}")));
        }
        Ok(Self { l, t, nodes: Vec::new(), segments: Vec::new(), labels: Vec::new() })
    }

    /// Adds a node, storing the canonical representative of its position.
    pub fn add_node(&mut self, pos: TorusPoint, z: f64) -> usize {
        self.nodes.push(Node { pos: pos.wrapped(self.l), z });
        if !self.labels.is_empty() {
            self.labels.push(format!("n{}", self.nodes.len() - 1));
        }
        self.nodes.len() - 1
    }

    pub fn add_segment(&mut self, tail: usize, head: usize, flux: f64, lift: [i32; 2]) -> usize {
        self.segments.push(Segment { tail, head, flux, lift });
        self.segments.len() - 1
    }

    pub fn node_label(&self, i: usize) -> String {
        self.labels.get(i).cloned().unwrap_or_else(|| format!("n{i}"))
    }

    pub fn dz(&self, s: &Segment) -> f64 {
        self.nodes[s.head].z - self.nodes[s.tail].z
    }

    /// Unwrapped horizontal displacement from tail to head.
    pub fn displacement(&self, s: &Segment) -> [f64; 2] {
        let a = self.nodes[s.tail].pos;
        let b = self.nodes[s.head].pos;
        [b.x + s.lift[0] as f64 * self.l - a.x, b.y + s.lift[1] as f64 * self.l - a.y]
    }

    /// Horizontal velocity `dX/dz` of the segment.
    pub fn velocity(&self, s: &Segment) -> [f64; 2] {
        let d = self.displacement(s);
        let dz = self.dz(s);
        [d[0] / dz, d[1] / dz]
    }

    /// Unwrapped point of the segment at height `z` (tail representative).
    pub fn point_at_unwrapped(&self, s: &Segment, z: f64) -> [f64; 2] {
        let a = self.nodes[s.tail];
        let d = self.displacement(s);
        let f = (z - a.z) / self.dz(s);
        [a.pos.x + f * d[0], a.pos.y + f * d[1]]
    }

    pub fn point_at(&self, s: &Segment, z: f64) -> TorusPoint {
        let [x, y] = self.point_at_unwrapped(s, z);
        TorusPoint::new(x, y).wrapped(self.l)
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        let z = self.nodes[node].z;
        (z.abs() - self.t).abs() <= 1e-12 * self.t
    }

    /// Incoming and outgoing segment lists per node.
    pub fn incidence(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut inc = vec![(Vec::new(), Vec::new()); self.nodes.len()];
        for (i, s) in self.segments.iter().enumerate() {
            inc[s.head].0.push(i);
            inc[s.tail].1.push(i);
        }
        inc
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes.len()];
        for s in &self.segments {
            deg[s.tail] += 1;
            deg[s.head] += 1;
        }
        deg
    }

    /// Total flux crossing height `z`, with the limit-from-below convention.
    pub fn flux_at(&self, z: f64) -> f64 {
        pairwise_sum(
            &self
                .segments
                .iter()
                .filter(|s| self.nodes[s.tail].z < z && z <= self.nodes[s.head].z)
                .map(|s| s.flux)
                .collect::<Vec<_>>(),
        )
    }

    /// The horizontal slice at height `z`.
    ///
    /// Segments are taken with `z_tail < z <= z_head`, so at a node height
    /// the slice is the limit from below. Crossing points closer than
    /// `1e-12 L` are merged into one atom.
    pub fn slice_at(&self, z: f64) -> Result<DiracSlice> {
        if !(z > -self.t && z < self.t) {
            return Err(Error::domain(format!("slice height {z} outside (-T, T) = (-{t}, {t})", t = self.t)));
        }
        Ok(self.slice_with(|zt, zh| zt < z && z <= zh, z))
    }

    /// Trace at the top face, `lim_{z -> T^-}`.
    pub fn trace_top(&self) -> DiracSlice {
        let t = self.t;
        self.slice_with(|zt, zh| zt < t && t <= zh, t)
    }

    /// Trace at the bottom face, `lim_{z -> -T^+}`.
    pub fn trace_bottom(&self) -> DiracSlice {
        let t = -self.t;
        self.slice_with(|zt, zh| zt <= t && t < zh, t)
    }

    fn slice_with(&self, keep: impl Fn(f64, f64) -> bool, z: f64) -> DiracSlice {
        let atoms = self
            .segments
            .iter()
            .filter(|s| keep(self.nodes[s.tail].z, self.nodes[s.head].z))
            .map(|s| Atom { pos: self.point_at(s, z), weight: s.flux })
            .collect();
        DiracSlice::merged(self.l, atoms, 1e-12 * self.l)
    }

    /// Total flux leaving the bottom trace.
    pub fn total_flux(&self) -> f64 {
        let inc = self.incidence();
        let sources: Vec<f64> = self.segments.iter().filter(|s| inc[s.tail].0.is_empty()).map(|s| s.flux).collect();
        pairwise_sum(&sources)
    }

    /// Distinct node heights, sorted.
    pub fn node_heights(&self) -> Vec<f64> {
        let mut zs: Vec<f64> = self.nodes.iter().map(|n| n.z).collect();
        zs.sort_by(f64::total_cmp);
        zs.dedup();
        zs
    }

    /// Translates every node by `(dx, dy)` on the torus, keeping the
    /// unwrapped displacement of every segment.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mut out = self.clone();
        let mut shifts = vec![[0i32; 2]; self.nodes.len()];
        for (i, n) in out.nodes.iter_mut().enumerate() {
            let (p, k) = TorusPoint::new(n.pos.x + dx, n.pos.y + dy).wrap_with_shift(self.l);
            n.pos = p;
            shifts[i] = k;
        }
        for s in &mut out.segments {
            s.lift[0] += shifts[s.head][0] - shifts[s.tail][0];
            s.lift[1] += shifts[s.head][1] - shifts[s.tail][1];
        }
        out
    }

    /// Moves node `i` to the unwrapped position `pos`, re-canonicalizing and
    /// fixing the lifts of incident segments.
    pub fn set_node_unwrapped(&mut self, i: usize, pos: [f64; 2]) {
        let (x, kx) = wrap_coord(pos[0], self.l);
        let (y, ky) = wrap_coord(pos[1], self.l);
        self.nodes[i].pos = TorusPoint::new(x, y);
        for s in &mut self.segments {
            if s.head == i {
                s.lift[0] += kx;
                s.lift[1] += ky;
            }
            if s.tail == i {
                s.lift[0] -= kx;
                s.lift[1] -= ky;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub pos: TorusPoint,
    pub weight: f64,
}

/// A horizontal slice `sum_i phi_i delta_{X_i}` on the torus of side `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiracSlice {
    pub l: f64,
    pub atoms: Vec<Atom>,
}

impl DiracSlice {
    /// Builds a slice, checking that weights are positive and points
    /// pairwise distinct.
    pub fn new(l: f64, atoms: Vec<Atom>) -> Result<Self> {
        if !(l > 0.0) {
            return Err(Error::domain("slice width must be positive"));
        }
        if let Some(a) = atoms.iter().find(|a| !(a.weight > 0.0 && a.weight.is_finite())) {
            return Err(Error::domain(format!("atom weight must be positive, got {}", a.weight)));
        }
        let merged = Self::merged(l, atoms.clone(), 0.0);
        if merged.atoms.len() != atoms.len() {
            return Err(Error::domain("slice atoms must be pairwise distinct"));
        }
        Ok(merged)
    }

    /// Builds a slice, summing the weights of atoms closer than `tol`.
    pub fn merged(l: f64, atoms: Vec<Atom>, tol: f64) -> Self {
        let mut atoms: Vec<Atom> = atoms
            .into_iter()
            .map(|a| {
                let mut p = a.pos.wrapped(l);
                // points within tol of the seam are snapped onto it
                if l - p.x <= tol {
                    p.x = 0.0;
                }
                if l - p.y <= tol {
                    p.y = 0.0;
                }
                Atom { pos: p, weight: a.weight }
            })
            .collect();
        atoms.sort_by(|a, b| a.pos.x.total_cmp(&b.pos.x).then(a.pos.y.total_cmp(&b.pos.y)));
        let tol_sq = tol * tol;
        let mut out: Vec<Atom> = Vec::with_capacity(atoms.len());
        'next: for a in atoms {
            for b in out.iter_mut().rev() {
                if a.pos.x - b.pos.x > tol {
                    break;
                }
                if torus_distance_sq(a.pos, b.pos, l) <= tol_sq {
                    b.weight += a.weight;
                    continue 'next;
                }
            }
            out.push(a);
        }
        Self { l, atoms: out }
    }

    pub fn mass(&self) -> f64 {
        pairwise_sum(&self.atoms.iter().map(|a| a.weight).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// `sum_i sqrt(phi_i)`.
    pub fn sqrt_mass(&self) -> f64 {
        pairwise_sum(&self.atoms.iter().map(|a| a.weight.sqrt()).collect::<Vec<_>>())
    }
}

/// Uniform bucketing of the torus cross-section, used to find candidate
/// pairs without an all-pairs scan.
pub(crate) struct CellGrid {
    g: usize,
    h: f64,
}

impl CellGrid {
    pub(crate) fn new(l: f64, items: usize) -> Self {
        let g = ((items as f64).sqrt().ceil() as usize).clamp(1, 512);
        Self { g, h: l / g as f64 }
    }

    pub(crate) fn len(&self) -> usize {
        self.g * self.g
    }

    fn range(&self, lo: f64, hi: f64) -> Vec<usize> {
        let (a, b) = ((lo / self.h).floor() as i64, (hi / self.h).floor() as i64);
        let g = self.g as i64;
        if b - a + 1 >= g {
            (0..self.g).collect()
        } else {
            (a..=b).map(|i| i.rem_euclid(g) as usize).collect()
        }
    }

    /// Cells meeting the box `[x0, x1] x [y0, y1]` (unwrapped coordinates).
    pub(crate) fn cells(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> Vec<usize> {
        let ys = self.range(y0, y1);
        self.range(x0, x1).into_iter().flat_map(|i| ys.iter().map(move |&j| i * self.g + j)).collect()
    }

    /// Cells meeting the horizontal shadow of segment `s`, padded by `pad`.
    pub(crate) fn segment_cells(&self, m: &PolygonalMeasure, s: &Segment, pad: f64) -> Vec<usize> {
        let a = m.nodes[s.tail].pos;
        let d = m.displacement(s);
        let (x0, x1) = (a.x.min(a.x + d[0]), a.x.max(a.x + d[0]));
        let (y0, y1) = (a.y.min(a.y + d[1]), a.y.max(a.y + d[1]));
        self.cells(x0 - pad, x1 + pad, y0 - pad, y1 + pad)
    }
}

/// Pairwise (cascade) summation; deterministic for a fixed input order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}
