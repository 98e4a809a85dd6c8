use std::fmt;

use serde::Serialize;

use std::collections::HashSet;

use super::{CellGrid, PolygonalMeasure, FLUX_RTOL};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DanglingReference {
        segment: usize,
    },
    NonFinite {
        what: String,
    },
    NodeOutsideBox {
        node: usize,
        z: f64,
    },
    /// `z(tail) >= z(head)`.
    DegenerateSegment {
        segment: usize,
        dz: f64,
    },
    NonPositiveFlux {
        segment: usize,
        flux: f64,
    },
    /// `sum(in) - sum(out)` at an interior node with both kinds of segments.
    Kirchhoff {
        node: usize,
        residual: f64,
    },
    /// Two segments meet away from a shared endpoint.
    Overlap {
        first: usize,
        second: usize,
        z: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DanglingReference { segment } => write!(f, "segment {segment} references a missing node"),
            Violation::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Violation::NodeOutsideBox { node, z } => write!(f, "node {node} at z={z} lies outside [-T, T]"),
            Violation::DegenerateSegment { segment, dz } => {
                write!(f, "inverted/degenerate segment {segment} (dz = {dz})")
            }
            Violation::NonPositiveFlux { segment, flux } => write!(f, "segment {segment} has non-positive flux {flux}"),
            Violation::Kirchhoff { node, residual } => write!(f, "Kirchhoff residual {residual:e} at node {node}"),
            Violation::Overlap { first, second, z } => {
                write!(f, "segments {first} and {second} intersect at z={z} away from a shared node")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn kirchhoff_residual(&self, node: usize) -> Option<f64> {
        self.violations.iter().find_map(|v| match v {
            Violation::Kirchhoff { node: n, residual } if *n == node => Some(*residual),
            _ => None,
        })
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "no violations");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Lists every violated invariant of `m`. Never fails; an empty report means
/// the measure is admissible.
pub fn validate(m: &PolygonalMeasure) -> ValidationReport {
    let mut out = Vec::new();
    let n = m.nodes.len();
    for (i, node) in m.nodes.iter().enumerate() {
        if !(node.pos.x.is_finite() && node.pos.y.is_finite() && node.z.is_finite()) {
            out.push(Violation::NonFinite { what: format!("node {i}") });
        } else if node.z.abs() > m.t * (1.0 + 1e-12) {
            out.push(Violation::NodeOutsideBox { node: i, z: node.z });
        }
    }
    let mut structural_ok = true;
    for (i, s) in m.segments.iter().enumerate() {
        if s.tail >= n || s.head >= n {
            out.push(Violation::DanglingReference { segment: i });
            structural_ok = false;
            continue;
        }
        if !s.flux.is_finite() {
            out.push(Violation::NonFinite { what: format!("flux of segment {i}") });
        } else if s.flux <= 0.0 {
            out.push(Violation::NonPositiveFlux { segment: i, flux: s.flux });
        }
        let dz = m.dz(s);
        if !(dz > 0.0) {
            out.push(Violation::DegenerateSegment { segment: i, dz });
            structural_ok = false;
        }
    }
    if !structural_ok {
        return ValidationReport { violations: out };
    }

    for (node, (incoming, outgoing)) in m.incidence().iter().enumerate() {
        if incoming.is_empty() || outgoing.is_empty() || m.is_boundary(node) {
            continue;
        }
        let fin: f64 = incoming.iter().map(|&s| m.segments[s].flux).sum();
        let fout: f64 = outgoing.iter().map(|&s| m.segments[s].flux).sum();
        let residual = fin - fout;
        if residual.abs() > FLUX_RTOL * fin.abs().max(fout.abs()) {
            out.push(Violation::Kirchhoff { node, residual });
        }
    }

    out.extend(find_overlaps(m));
    ValidationReport { violations: out }
}

/// Tests every pair of segments whose horizontal shadows share a grid cell
/// and whose height ranges overlap.
fn find_overlaps(m: &PolygonalMeasure) -> Vec<Violation> {
    let grid = CellGrid::new(m.l, m.segments.len());
    let pad = 1e-9 * m.l;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); grid.len()];
    for (i, s) in m.segments.iter().enumerate() {
        for c in grid.segment_cells(m, s, pad) {
            buckets[c].push(i);
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for bucket in &buckets {
        for (k, &a) in bucket.iter().enumerate() {
            let sa = &m.segments[a];
            let za = (m.nodes[sa.tail].z, m.nodes[sa.head].z);
            for &b in &bucket[k + 1..] {
                let sb = &m.segments[b];
                if m.nodes[sb.tail].z > za.1 || m.nodes[sb.head].z < za.0 {
                    continue;
                }
                if !seen.insert((a.min(b), a.max(b))) {
                    continue;
                }
                if let Some(z) = intersection(m, a.min(b), a.max(b)) {
                    out.push(Violation::Overlap { first: a.min(b), second: a.max(b), z });
                }
            }
        }
    }
    out.sort_by_key(|v| match v {
        Violation::Overlap { first, second, .. } => (*first, *second),
        _ => unreachable!(),
    });
    out
}

fn intersection(m: &PolygonalMeasure, a: usize, b: usize) -> Option<f64> {
    let (sa, sb) = (&m.segments[a], &m.segments[b]);
    let lo = m.nodes[sa.tail].z.max(m.nodes[sb.tail].z);
    let hi = m.nodes[sa.head].z.min(m.nodes[sb.head].z);
    if hi < lo {
        return None;
    }
    let l = m.l;
    let tol = 1e-12 * l.max(1.0);
    let pa = |z| m.point_at_unwrapped(sa, z);
    let pb = |z| m.point_at_unwrapped(sb, z);
    let diff = |z: f64| {
        let (u, v) = (pa(z), pb(z));
        [u[0] - v[0], u[1] - v[1]]
    };
    let d0 = diff(lo);
    let d1 = diff(hi);

    // parameters s in [0, 1] where d(s) lies on the lattice L Z^2
    let mut hits: Vec<f64> = Vec::new();
    let on_lattice = |v: f64| (v - l * (v / l).round()).abs() <= tol;
    let dd = [d1[0] - d0[0], d1[1] - d0[1]];
    if dd[0].abs() <= tol && dd[1].abs() <= tol {
        if on_lattice(d0[0]) && on_lattice(d0[1]) {
            // coincident along the whole common range
            if hi > lo {
                return Some(0.5 * (lo + hi));
            }
            hits.push(0.0);
        }
    } else {
        let axis = if dd[0].abs() >= dd[1].abs() { 0 } else { 1 };
        let other = 1 - axis;
        let (v0, v1) = (d0[axis], d1[axis]);
        let (kmin, kmax) = ((v0.min(v1) - tol) / l, (v0.max(v1) + tol) / l);
        let mut k = kmin.ceil();
        while k <= kmax.floor() {
            let s = ((k * l - v0) / (v1 - v0)).clamp(0.0, 1.0);
            let w = d0[other] + s * dd[other];
            if on_lattice(w) {
                hits.push(s);
            }
            k += 1.0;
        }
    }
    for s in hits {
        let z = lo + s * (hi - lo);
        if !shared_endpoint(m, sa.tail, sa.head, sb.tail, sb.head, z) {
            return Some(z);
        }
    }
    None
}

fn shared_endpoint(m: &PolygonalMeasure, at: usize, ah: usize, bt: usize, bh: usize, z: f64) -> bool {
    let tol = 1e-12 * m.t.max(1.0);
    [at, ah].iter().any(|&x| (x == bt || x == bh) && (m.nodes[x].z - z).abs() <= tol)
}
