use std::collections::{HashMap, VecDeque};

use serde::Serialize;

use super::{CellGrid, PolygonalMeasure, Segment};
use crate::error::{Error, Result};
use crate::geometry::{min_image, torus_distance_sq, TorusPoint};

/// A cycle of the undirected support graph, as a list of segment indices.
pub type Cycle = Vec<usize>;

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Joins the two classes, keeping the smaller index as root.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        true
    }
}

/// Fundamental cycle basis of the undirected support multigraph (nodes are
/// junctions, edges are segments). Empty exactly when the support is a
/// forest.
pub fn detect_loops(m: &PolygonalMeasure) -> Vec<Cycle> {
    let n = m.nodes.len();
    let mut uf = UnionFind::new(n);
    let mut tree_adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut extra = Vec::new();
    for (i, s) in m.segments.iter().enumerate() {
        if uf.union(s.tail, s.head) {
            tree_adj[s.tail].push((s.head, i));
            tree_adj[s.head].push((s.tail, i));
        } else {
            extra.push(i);
        }
    }
    extra
        .into_iter()
        .map(|e| {
            let s = &m.segments[e];
            let mut cycle = tree_path(&tree_adj, s.tail, s.head);
            cycle.push(e);
            cycle
        })
        .collect()
}

fn tree_path(adj: &[Vec<(usize, usize)>], from: usize, to: usize) -> Vec<usize> {
    let mut prev: HashMap<usize, (usize, usize)> = HashMap::new();
    let mut queue = VecDeque::from([from]);
    prev.insert(from, (from, usize::MAX));
    while let Some(v) = queue.pop_front() {
        if v == to {
            break;
        }
        for &(w, e) in &adj[v] {
            if let std::collections::hash_map::Entry::Vacant(slot) = prev.entry(w) {
                slot.insert((v, e));
                queue.push_back(w);
            }
        }
    }
    let mut path = Vec::new();
    let mut v = to;
    while v != from {
        let (p, e) = prev[&v];
        path.push(e);
        v = p;
    }
    path.reverse();
    path
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityReport {
    /// Always true for this data model (finitely many affine segments).
    pub finite_polygonal: bool,
    /// Interior nodes lying on more than three segments, with their degree.
    pub junction_violations: Vec<(usize, usize)>,
    /// Present when a grid size was requested.
    pub n_regular: Option<bool>,
    pub trace_issues: Vec<String>,
}

impl RegularityReport {
    pub fn is_regular(&self) -> bool {
        self.finite_polygonal && self.junction_violations.is_empty()
    }

    pub fn is_n_regular(&self) -> bool {
        self.is_regular() && self.n_regular == Some(true)
    }
}

const TRACE_TOL: f64 = 1e-9;

/// Regularity classification: finite polygonal, triple junctions only, and
/// optionally traces equal to `Phi N^-2 sum delta_{X_j}` on an `N x N` grid of
/// spacing `L / N` at both `z = +-T`.
pub fn classify_regular(m: &PolygonalMeasure, n: Option<usize>) -> RegularityReport {
    let junction_violations =
        m.degrees().into_iter().enumerate().filter(|&(i, d)| d > 3 && !m.is_boundary(i)).collect();
    let mut trace_issues = Vec::new();
    let n_regular = n.map(|n| {
        let top = m.trace_top();
        let bottom = m.trace_bottom();
        let a = check_grid_trace(&top, n, m.l, "top", &mut trace_issues);
        let b = check_grid_trace(&bottom, n, m.l, "bottom", &mut trace_issues);
        if let (Some(oa), Some(ob)) = (a, b) {
            let spacing = m.l / n as f64;
            let d = min_image(oa, ob, spacing);
            if d[0].abs() > TRACE_TOL * m.l || d[1].abs() > TRACE_TOL * m.l {
                trace_issues.push("top and bottom traces sit on different grids".into());
            }
            let (pa, pb) = (top.mass(), bottom.mass());
            if (pa - pb).abs() > TRACE_TOL * pa.max(pb) {
                trace_issues.push(format!("trace masses differ: {pa} vs {pb}"));
            }
        }
        trace_issues.is_empty()
    });
    RegularityReport { finite_polygonal: true, junction_violations, n_regular, trace_issues }
}

/// Returns the grid offset when `trace` is a uniform `n x n` grid measure.
fn check_grid_trace(
    trace: &super::DiracSlice,
    n: usize,
    l: f64,
    side: &str,
    issues: &mut Vec<String>,
) -> Option<TorusPoint> {
    if trace.atoms.len() != n * n {
        issues.push(format!("{side} trace has {} atoms, expected {}", trace.atoms.len(), n * n));
        return None;
    }
    let phi = trace.mass();
    let w = phi / (n * n) as f64;
    let spacing = l / n as f64;
    let origin = trace.atoms[0].pos;
    let mut ok = true;
    for a in &trace.atoms {
        if (a.weight - w).abs() > TRACE_TOL * w {
            issues.push(format!("{side} trace atom weight {} differs from Phi/N^2 = {w}", a.weight));
            ok = false;
            break;
        }
        let d = min_image(origin, a.pos, spacing);
        if d[0].abs() > TRACE_TOL * l || d[1].abs() > TRACE_TOL * l {
            issues
                .push(format!("{side} trace atom at ({}, {}) is off the grid of spacing {spacing}", a.pos.x, a.pos.y));
            ok = false;
            break;
        }
    }
    ok.then_some(origin)
}

/// Normalizes superimposed pieces: merges nodes closer than `tol`, splits
/// segments at nodes lying on their interior, and fuses segments with equal
/// endpoints and winding into one segment carrying the summed flux.
pub fn merge_coincident(m: &PolygonalMeasure, tol: f64) -> Result<PolygonalMeasure> {
    if !(tol >= 0.0) {
        return Err(Error::domain("merge tolerance must be non-negative"));
    }
    let l = m.l;
    let n = m.nodes.len();

    // 1. node clusters
    let mut uf = UnionFind::new(n);
    let tol_sq = tol * tol;
    let node_grid = CellGrid::new(l, n);
    let mut node_cells: Vec<Vec<usize>> = vec![Vec::new(); node_grid.len()];
    for (i, node) in m.nodes.iter().enumerate() {
        let p = node.pos;
        for c in node_grid.cells(p.x - tol, p.x + tol, p.y - tol, p.y + tol) {
            for &j in &node_cells[c] {
                if (m.nodes[j].z - node.z).abs() <= tol && torus_distance_sq(m.nodes[j].pos, p, l) <= tol_sq {
                    uf.union(i, j);
                }
            }
        }
        node_cells[node_grid.cells(p.x, p.x, p.y, p.y)[0]].push(i);
    }
    let mut shift = vec![[0i32; 2]; n];
    let mut rep = vec![0usize; n];
    for i in 0..n {
        let r = uf.find(i);
        rep[i] = r;
        let (pi, pr) = (m.nodes[i].pos, m.nodes[r].pos);
        shift[i] = [((pi.x - pr.x) / l).round() as i32, ((pi.y - pr.y) / l).round() as i32];
    }
    let mut segs: Vec<Segment> = m
        .segments
        .iter()
        .map(|s| Segment {
            tail: rep[s.tail],
            head: rep[s.head],
            flux: s.flux,
            lift: [s.lift[0] + shift[s.head][0] - shift[s.tail][0], s.lift[1] + shift[s.head][1] - shift[s.tail][1]],
        })
        .collect();

    let mut out = PolygonalMeasure { segments: Vec::new(), ..m.clone() };
    for (i, s) in segs.iter().enumerate() {
        if !(out.dz(s) > 0.0) {
            return Err(Error::Structural(format!("segment {i} would become degenerate (dz = {})", out.dz(s))));
        }
    }

    // 2. split at interior nodes
    let live: Vec<usize> = (0..n).filter(|&i| rep[i] == i).collect();
    let grid = CellGrid::new(l, live.len());
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); grid.len()];
    for &v in &live {
        let p = m.nodes[v].pos;
        for c in grid.cells(p.x - tol, p.x + tol, p.y - tol, p.y + tol) {
            buckets[c].push(v);
        }
    }
    let mut split = Vec::with_capacity(segs.len());
    for s in segs.drain(..) {
        let (zt, zh) = (out.nodes[s.tail].z, out.nodes[s.head].z);
        let mut cuts: Vec<(usize, [i32; 2])> = Vec::new();
        let mut cells = grid.segment_cells(&out, &s, tol);
        cells.sort_unstable();
        cells.dedup();
        for c in cells {
            for &v in &buckets[c] {
                let zv = out.nodes[v].z;
                if !(zv > zt + tol && zv < zh - tol) || cuts.iter().any(|&(u, _)| u == v) {
                    continue;
                }
                let p = out.point_at_unwrapped(&s, zv);
                let q = out.nodes[v].pos;
                let k = [((p[0] - q.x) / l).round(), ((p[1] - q.y) / l).round()];
                let (ex, ey) = (p[0] - q.x - k[0] * l, p[1] - q.y - k[1] * l);
                if ex * ex + ey * ey <= tol_sq {
                    cuts.push((v, [k[0] as i32, k[1] as i32]));
                }
            }
        }
        cuts.sort_by(|a, b| out.nodes[a.0].z.total_cmp(&out.nodes[b.0].z));
        if cuts.is_empty() {
            split.push(s);
            continue;
        }
        let mut tail = s.tail;
        let mut tail_shift = [0i32; 2];
        for (v, k) in cuts {
            split.push(Segment { tail, head: v, flux: s.flux, lift: [k[0] - tail_shift[0], k[1] - tail_shift[1]] });
            tail = v;
            tail_shift = k;
        }
        split.push(Segment {
            tail,
            head: s.head,
            flux: s.flux,
            lift: [s.lift[0] - tail_shift[0], s.lift[1] - tail_shift[1]],
        });
    }

    // 3. fuse duplicates, keeping first-occurrence order
    let mut slot: HashMap<(usize, usize, [i32; 2]), usize> = HashMap::new();
    for s in split {
        match slot.get(&(s.tail, s.head, s.lift)) {
            Some(&k) => out.segments[k].flux += s.flux,
            None => {
                slot.insert((s.tail, s.head, s.lift), out.segments.len());
                out.segments.push(s);
            }
        }
    }

    // 4. drop nodes that were merged away
    if live.len() != n {
        let mut new_index = vec![usize::MAX; n];
        for (k, &i) in live.iter().enumerate() {
            new_index[i] = k;
        }
        out.nodes = live.iter().map(|&i| m.nodes[i]).collect();
        if !m.labels.is_empty() {
            out.labels = live.iter().map(|&i| m.labels[i].clone()).collect();
        }
        for s in &mut out.segments {
            s.tail = new_index[s.tail];
            s.head = new_index[s.head];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::fixtures::*;
    use crate::measure::validate;

    fn diamond() -> PolygonalMeasure {
        let mut m = PolygonalMeasure::new(1.0, 1.0).unwrap();
        let a = m.add_node(TorusPoint::new(0.5, 0.5), -1.0);
        let b = m.add_node(TorusPoint::new(0.5, 0.5), -0.5);
        let c = m.add_node(TorusPoint::new(0.3, 0.5), 0.0);
        let d = m.add_node(TorusPoint::new(0.7, 0.5), 0.0);
        let e = m.add_node(TorusPoint::new(0.5, 0.5), 0.5);
        let f = m.add_node(TorusPoint::new(0.5, 0.5), 1.0);
        m.add_segment(a, b, 1.0, [0, 0]);
        m.add_segment(b, c, 0.5, [0, 0]);
        m.add_segment(b, d, 0.5, [0, 0]);
        m.add_segment(c, e, 0.5, [0, 0]);
        m.add_segment(d, e, 0.5, [0, 0]);
        m.add_segment(e, f, 1.0, [0, 0]);
        m
    }

    #[test]
    fn tree_has_no_loops() {
        assert!(detect_loops(&y_junction((1.0, 0.5, 0.5), 0.2, 0.0)).is_empty());
    }

    #[test]
    fn diamond_has_one_four_cycle() {
        let loops = detect_loops(&diamond());
        assert_eq!(loops.len(), 1);
        let mut c = loops[0].clone();
        c.sort();
        assert_eq!(c, vec![1, 2, 3, 4]);
    }

    #[test]
    fn disjoint_trees_have_no_loops() {
        let mut m = vertical(1.0, 1.0, 1.0, TorusPoint::new(0.2, 0.2));
        let a = m.add_node(TorusPoint::new(0.7, 0.7), -1.0);
        let b = m.add_node(TorusPoint::new(0.7, 0.7), 1.0);
        m.add_segment(a, b, 1.0, [0, 0]);
        assert!(detect_loops(&m).is_empty());
    }

    #[test]
    fn four_way_junction_violates_regularity() {
        let mut m = y_junction((1.0, 0.25, 0.25), 0.2, 0.0);
        let j = 1;
        let c = m.add_node(TorusPoint::new(0.5, 0.3), 1.0);
        m.add_segment(j, c, 0.5, [0, 0]);
        m.segments[0].flux = 1.0;
        let r = classify_regular(&m, None);
        assert_eq!(r.junction_violations, vec![(j, 4)]);
        assert!(!r.is_regular());
    }

    fn grid_columns(n: usize, perturb: f64) -> PolygonalMeasure {
        let mut m = PolygonalMeasure::new(1.0, 1.0).unwrap();
        let h = 1.0 / n as f64;
        for i in 0..n {
            for j in 0..n {
                let p = TorusPoint::new(i as f64 * h, j as f64 * h);
                let a = m.add_node(p, -1.0);
                let q = if i + j == 0 { TorusPoint::new(p.x + perturb, p.y) } else { p };
                let b = m.add_node(q, 1.0);
                m.add_segment(a, b, 1.0 / (n * n) as f64, [0, 0]);
            }
        }
        m
    }

    #[test]
    fn straight_columns_are_n_regular() {
        let r = classify_regular(&grid_columns(3, 0.0), Some(3));
        assert!(r.is_n_regular(), "{:?}", r.trace_issues);
        assert_eq!(classify_regular(&grid_columns(3, 0.0), Some(2)).n_regular, Some(false));
    }

    #[test]
    fn off_grid_trace_detected() {
        let r = classify_regular(&grid_columns(2, 1e-3), Some(2));
        assert_eq!(r.n_regular, Some(false));
        assert!(r.is_regular());
    }

    #[test]
    fn identical_segments_fuse() {
        let mut m = vertical(1.0, 1.0, 0.5, TorusPoint::new(0.5, 0.5));
        m.add_segment(0, 1, 0.5, [0, 0]);
        let out = merge_coincident(&m, 0.0).unwrap();
        assert_eq!(out.segments.len(), 1);
        assert_eq!(out.segments[0].flux, 1.0);
        assert!(validate(&out).is_empty());
    }

    #[test]
    fn clean_tree_is_fixed_point() {
        let m = y_junction((1.0, 0.5, 0.5), 0.2, 0.0);
        assert_eq!(merge_coincident(&m, 1e-9).unwrap(), m);
    }

    #[test]
    fn overlapping_collinear_pieces_split_and_fuse() {
        // two curves leave the same node straight up; one stops halfway
        let mut m = PolygonalMeasure::new(1.0, 1.0).unwrap();
        let a = m.add_node(TorusPoint::new(0.5, 0.5), -1.0);
        let mid = m.add_node(TorusPoint::new(0.5, 0.5), 0.0);
        let top = m.add_node(TorusPoint::new(0.5, 0.5), 1.0);
        let side = m.add_node(TorusPoint::new(0.8, 0.5), 1.0);
        m.add_segment(a, top, 0.5, [0, 0]);
        m.add_segment(a, mid, 0.5, [0, 0]);
        m.add_segment(mid, side, 0.5, [0, 0]);
        let out = merge_coincident(&m, 1e-12).unwrap();
        assert!(validate(&out).is_empty(), "{}", validate(&out));
        assert_eq!(out.segments.len(), 3);
        let trunk = out.segments.iter().find(|s| s.tail == a).unwrap();
        assert_eq!(trunk.flux, 1.0);
        assert!(out.degrees().iter().all(|&d| d <= 3));
    }

    #[test]
    fn merging_nodes_fixes_lifts() {
        // the second copy of the node sits one period away
        let mut m = PolygonalMeasure::new(1.0, 1.0).unwrap();
        let a = m.add_node(TorusPoint::new(0.0, 0.5), -1.0);
        let b = m.add_node(TorusPoint::new(1.0 - 1e-14, 0.5), 0.0);
        let c = m.add_node(TorusPoint::new(0.0, 0.5), 0.0);
        let d = m.add_node(TorusPoint::new(0.1, 0.5), 1.0);
        m.add_segment(a, b, 1.0, [-1, 0]);
        m.add_segment(c, d, 1.0, [0, 0]);
        let out = merge_coincident(&m, 1e-12).unwrap();
        assert_eq!(out.nodes.len(), 3);
        for s in &out.segments {
            let d = out.displacement(s);
            assert!(d[0].abs() < 0.2, "{d:?}");
        }
        assert!(validate(&out).is_empty());
    }

    #[test]
    fn collapse_to_flat_segment_is_structural_error() {
        let mut m = PolygonalMeasure::new(1.0, 1.0).unwrap();
        let a = m.add_node(TorusPoint::new(0.5, 0.5), 0.0);
        let b = m.add_node(TorusPoint::new(0.5, 0.5), 1e-6);
        m.add_segment(a, b, 1.0, [0, 0]);
        assert!(matches!(merge_coincident(&m, 1e-3), Err(Error::Structural(_))));
    }
}
