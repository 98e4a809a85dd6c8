//! Dyadic branching constructions.
//!
//! Level `n >= 1` lives on `[x_{n-1}, x_n]` with `x_n = T (1 - 3^-n)`. Its
//! squares have side `L_n = L / (2^n N)` and corners `L_n (i, j)`. The curve
//! of square `(i, j)` starts at its parent's corner `(i*, j*)` with
//! `i* = 2 floor(i / 2)`, moves in `j` until the mid height `x_n - T_n / 2`
//! and then in `i`, reaching its own corner at `x_n`. Curves sharing a piece
//! are superimposed in the raw output and fused by [`merge_coincident`].
//!
//! Two details differ from the bare level scheme. The `N^2` grid points at
//! `z = 0` would otherwise be 4-valent once both halves are glued, so each
//! carries a vertical trunk over `|z| <= T / 6` and level 1 is compressed to
//! `[T / 6, x_1]`. Beyond `depth` the leaves run vertically up to `z = T`.

use serde::Serialize;

use crate::energy::K_STAR;
use crate::error::{Error, Result};
use crate::geometry::{min_image, TorusPoint};
use crate::measure::{merge_coincident, DiracSlice, PolygonalMeasure};

/// Which trace the symmetric construction exposes at `z = +-T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum TraceConvention {
    /// The dyadic tree up to `depth`; traces on the `2^depth N` grid.
    #[default]
    Refined,
    /// The midplane grid extended vertically; traces on the `N` grid.
    Base,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Boundary {
    Uniform,
    /// Boundary atoms on the `2^depth N` corner grid.
    Explicit(DiracSlice),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildSpec {
    pub phi: f64,
    pub l: f64,
    pub t: f64,
    /// `None` selects [`optimal_n`].
    pub n: Option<usize>,
    pub depth: usize,
    pub boundary: Boundary,
    pub trace: TraceConvention,
}

impl BuildSpec {
    pub fn uniform(phi: f64, l: f64, t: f64, n: Option<usize>, depth: usize) -> Self {
        Self { phi, l, t, n, depth, boundary: Boundary::Uniform, trace: TraceConvention::Refined }
    }

    pub fn resolved_n(&self) -> usize {
        self.n.unwrap_or_else(|| optimal_n(self.phi, self.l, self.t))
    }

    fn check(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !(pos(self.phi) && pos(self.l) && pos(self.t)) {
            return Err(Error::domain("build needs Phi, L, T > 0"));
        }
        if self.n == Some(0) || self.depth == 0 {
            return Err(Error::domain("build needs N >= 1 and depth >= 1"));
        }
        if self.depth > 20 {
            return Err(Error::domain(format!("depth {} is beyond any representable refinement", self.depth)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    Top,
    Bottom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Build {
    pub measure: PolygonalMeasure,
    pub n: usize,
    pub depth: usize,
    /// Grid size of the traces at `z = +-T` (one-sided builds: the
    /// supported face only).
    pub trace_n: usize,
    /// Energy the levels beyond `depth` would add at most, summed from the
    /// level-wise estimates.
    pub tail_energy_bound: f64,
}

/// `floor(1 + Phi^(1/6) L^(2/3) / T^(2/3))`, with values within `1e-12` of
/// an integer snapped before flooring so exact powers are not lost to
/// rounding.
pub fn optimal_n(phi: f64, l: f64, t: f64) -> usize {
    let x = 1.0 + phi.powf(1.0 / 6.0) * (l / t).powf(2.0 / 3.0);
    let r = x.round();
    let x = if (x - r).abs() <= 1e-12 * x { r } else { x };
    x.floor() as usize
}

/// Per-side energy bound `4 K* N T sqrt(Phi) / L^2 + 6 Phi / (N^2 T)`.
pub fn one_sided_energy_bound(phi: f64, l: f64, t: f64, n: usize) -> f64 {
    let n = n as f64;
    4.0 * K_STAR * n * t * phi.sqrt() / (l * l) + 6.0 * phi / (n * n * t)
}

fn tail_bound(phi: f64, l: f64, t: f64, n: usize, depth: usize) -> f64 {
    let n = n as f64;
    let d = depth as i32;
    4.0 * K_STAR * n * t * phi.sqrt() * (2.0f64 / 3.0).powi(d) / (l * l) + 6.0 * phi * 0.75f64.powi(d) / (n * n * t)
}

/// Fluxes of the `(2^depth N)^2` finest squares, row-major in `(i, j)`.
fn finest_fluxes(spec: &BuildSpec, n: usize) -> Result<Vec<f64>> {
    let side = (1usize << spec.depth) * n;
    match &spec.boundary {
        Boundary::Uniform => Ok(vec![spec.phi / (side * side) as f64; side * side]),
        Boundary::Explicit(slice) => {
            if slice.l != spec.l {
                return Err(Error::domain("boundary slice width differs from L"));
            }
            let mass = slice.mass();
            if (mass - spec.phi).abs() > 1e-12 * spec.phi.max(mass) {
                return Err(Error::domain(format!("boundary mass {mass} differs from Phi = {}", spec.phi)));
            }
            let h = spec.l / side as f64;
            let mut out = vec![0.0; side * side];
            for a in &slice.atoms {
                let (fi, fj) = (a.pos.x / h, a.pos.y / h);
                let (i, j) = (fi.round(), fj.round());
                let snapped = TorusPoint::new(i * h, j * h);
                let d = min_image(a.pos, snapped, spec.l);
                if d[0].abs() > 1e-9 * spec.l || d[1].abs() > 1e-9 * spec.l {
                    return Err(Error::domain(format!(
                        "boundary atom at ({}, {}) is not on the {side} x {side} dyadic grid",
                        a.pos.x, a.pos.y
                    )));
                }
                let (i, j) = ((i as usize) % side, (j as usize) % side);
                out[i * side + j] += a.weight;
            }
            Ok(out)
        }
    }
}

/// Sums the finest fluxes into the `(2^level N)^2` squares of each level.
fn level_fluxes(fine: &[f64], n: usize, depth: usize) -> Vec<Vec<f64>> {
    let mut levels = vec![fine.to_vec()];
    for lvl in (0..depth).rev() {
        let side = (1usize << lvl) * n;
        let child = &levels[0];
        let mut cur = vec![0.0; side * side];
        for i in 0..2 * side {
            for j in 0..2 * side {
                cur[(i / 2) * side + j / 2] += child[i * 2 * side + j];
            }
        }
        levels.insert(0, cur);
    }
    levels
}

/// The top half of the construction, supported on `[0, T]`, without merging.
/// Segments shared by sibling curves appear once per curve.
fn top_half_raw(spec: &BuildSpec, n: usize, fluxes: &[Vec<f64>]) -> PolygonalMeasure {
    let (l, t, depth) = (spec.l, spec.t, spec.depth);
    let mut m = PolygonalMeasure::new(l, t).expect("checked spec");
    let x = |k: usize| t * (1.0 - 3f64.powi(-(k as i32)));
    let tau = t / 6.0;

    // start node of every level-0 square, then of every level-n curve end
    let mut ends: Vec<Option<usize>> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let f = fluxes[0][i * n + j];
            if f > 0.0 {
                let p = TorusPoint::new(i as f64 * l / n as f64, j as f64 * l / n as f64);
                let a = m.add_node(p, 0.0);
                let b = m.add_node(p, tau);
                m.add_segment(a, b, f, [0, 0]);
                ends.push(Some(b));
            } else {
                ends.push(None);
            }
        }
    }
    for lvl in 1..=depth {
        let side = (1usize << lvl) * n;
        let ln = l / side as f64;
        let tn = 2.0 * t / 3f64.powi(lvl as i32);
        let zs_end = x(lvl);
        let zm = zs_end - tn / 2.0;
        let mut mids: std::collections::HashMap<(usize, usize), usize> = Default::default();
        let mut next = vec![None; side * side];
        for i in 0..side {
            for j in 0..side {
                let f = fluxes[lvl][i * side + j];
                if f <= 0.0 {
                    continue;
                }
                let parent = ends[(i / 2) * (side / 2) + j / 2].expect("parent carries the child's flux");
                let istar = 2 * (i / 2);
                let mid = *mids
                    .entry((istar, j))
                    .or_insert_with(|| m.add_node(TorusPoint::new(istar as f64 * ln, j as f64 * ln), zm));
                let end = m.add_node(TorusPoint::new(i as f64 * ln, j as f64 * ln), zs_end);
                m.add_segment(parent, mid, f, [0, 0]);
                m.add_segment(mid, end, f, [0, 0]);
                next[i * side + j] = Some(end);
            }
        }
        ends = next;
    }
    let side = (1usize << depth) * n;
    for (k, e) in ends.iter().enumerate() {
        if let Some(e) = *e {
            let top = m.add_node(m.nodes[e].pos, t);
            m.add_segment(e, top, fluxes[depth][k], [0, 0]);
        }
    }
    debug_assert_eq!(ends.len(), side * side);
    m
}

/// The midplane grid extended vertically over `[0, T]`.
fn top_half_base(spec: &BuildSpec, n: usize, fluxes: &[Vec<f64>]) -> PolygonalMeasure {
    let mut m = PolygonalMeasure::new(spec.l, spec.t).expect("checked spec");
    for i in 0..n {
        for j in 0..n {
            let f = fluxes[0][i * n + j];
            if f > 0.0 {
                let p = TorusPoint::new(i as f64 * spec.l / n as f64, j as f64 * spec.l / n as f64);
                let a = m.add_node(p, 0.0);
                let b = m.add_node(p, spec.t);
                m.add_segment(a, b, f, [0, 0]);
            }
        }
    }
    m
}

/// Reflection `z -> -z`; segments are reversed so flux still points up.
fn mirrored(m: &PolygonalMeasure) -> PolygonalMeasure {
    let mut out = m.clone();
    for node in &mut out.nodes {
        node.z = -node.z;
    }
    for s in &mut out.segments {
        std::mem::swap(&mut s.tail, &mut s.head);
        s.lift = [-s.lift[0], -s.lift[1]];
    }
    out
}

/// Disjoint union, identifying nodes of `b` that coincide with nodes of `a`
/// at `z = 0`.
fn glue(a: &PolygonalMeasure, b: &PolygonalMeasure) -> PolygonalMeasure {
    let mut out = a.clone();
    let mut at_zero: std::collections::HashMap<(u64, u64), usize> = Default::default();
    for (i, node) in a.nodes.iter().enumerate() {
        if node.z == 0.0 {
            at_zero.insert((node.pos.x.to_bits(), node.pos.y.to_bits()), i);
        }
    }
    let map: Vec<usize> = b
        .nodes
        .iter()
        .map(|node| {
            if node.z == 0.0 {
                if let Some(&i) = at_zero.get(&(node.pos.x.to_bits(), node.pos.y.to_bits())) {
                    return i;
                }
            }
            out.add_node(node.pos, node.z)
        })
        .collect();
    for s in &b.segments {
        out.add_segment(map[s.tail], map[s.head], s.flux, s.lift);
    }
    out
}

fn half(spec: &BuildSpec, side: Side, raw: bool) -> Result<Build> {
    spec.check()?;
    let n = spec.resolved_n();
    let fine = finest_fluxes(spec, n)?;
    let fluxes = level_fluxes(&fine, n, spec.depth);
    let (top, trace_n) = match spec.trace {
        TraceConvention::Refined => (top_half_raw(spec, n, &fluxes), (1usize << spec.depth) * n),
        TraceConvention::Base => (top_half_base(spec, n, &fluxes), n),
    };
    let top = if raw { top } else { merge_coincident(&top, 0.0)? };
    let measure = match side {
        Side::Top => top,
        Side::Bottom => mirrored(&top),
    };
    let tail_energy_bound = match spec.trace {
        TraceConvention::Refined => tail_bound(spec.phi, spec.l, spec.t, n, spec.depth),
        TraceConvention::Base => 0.0,
    };
    Ok(Build { measure, n, depth: spec.depth, trace_n, tail_energy_bound })
}

/// One half of the construction, supported on `[0, T]` (top) or `[-T, 0]`
/// (bottom) inside the full box.
pub fn build_one_sided(spec: &BuildSpec, side: Side) -> Result<Build> {
    half(spec, side, false)
}

/// Like [`build_one_sided`] before superimposed pieces are fused.
pub fn build_one_sided_raw(spec: &BuildSpec, side: Side) -> Result<Build> {
    half(spec, side, true)
}

/// Both halves glued at `z = 0`, where the slice is the midplane grid.
pub fn build_symmetric(spec: &BuildSpec) -> Result<Build> {
    let top = half(spec, Side::Top, false)?;
    let bottom = mirrored(&top.measure);
    let measure = glue(&bottom, &top.measure);
    Ok(Build { measure, tail_energy_bound: 2.0 * top.tail_energy_bound, ..top })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::total_energy;
    use crate::measure::{classify_regular, detect_loops, validate, Atom};

    #[test]
    fn optimal_n_examples() {
        assert_eq!(optimal_n(1.0, 1.0, 1.0), 2);
        assert_eq!(optimal_n(1.0, 1.0, 0.001), 101);
        assert_eq!(optimal_n(64.0, 1.0, 1.0), 3);
    }

    #[test]
    fn depth_one_single_square() {
        let b = build_one_sided(&BuildSpec::uniform(1.0, 1.0, 1.0, Some(1), 1), Side::Top).unwrap();
        let s = b.measure.slice_at(2.0 / 3.0).unwrap();
        assert_eq!(s.len(), 4);
        for a in &s.atoms {
            assert!((a.weight - 0.25).abs() < 1e-15);
        }
        assert!(validate(&b.measure).is_empty());
        assert_eq!(b.trace_n, 2);
    }

    #[test]
    fn raw_build_has_superimposed_pieces() {
        let spec = BuildSpec::uniform(1.0, 1.0, 1.0, Some(1), 2);
        let raw = build_one_sided_raw(&spec, Side::Top).unwrap().measure;
        assert!(!validate(&raw).is_empty());
        let before = *raw.degrees().iter().max().unwrap();
        let merged = merge_coincident(&raw, 1e-12).unwrap();
        assert!(before > 3);
        let r = classify_regular(&merged, None);
        assert!(r.is_regular(), "{:?}", r.junction_violations);
        assert!(validate(&merged).is_empty());
    }

    #[test]
    fn symmetric_builds_are_regular_and_within_bound() {
        for n in 1..=4 {
            for depth in 1..=4 {
                let b = build_symmetric(&BuildSpec::uniform(1.0, 1.0, 1.0, Some(n), depth)).unwrap();
                let m = &b.measure;
                assert!(validate(m).is_empty(), "N={n} depth={depth}: {}", validate(m));
                assert!(detect_loops(m).is_empty());
                let r = classify_regular(m, Some(b.trace_n));
                assert!(r.is_n_regular(), "N={n} depth={depth}: {r:?}");
                let e = total_energy(m).unwrap().total;
                let bound = 2.0 * one_sided_energy_bound(1.0, 1.0, 1.0, n);
                assert!(e <= bound, "N={n} depth={depth}: {e} > {bound}");
                let mid = m.slice_at(0.0).unwrap();
                assert_eq!(mid.len(), n * n);
                let w = 1.0 / (n * n) as f64;
                for a in &mid.atoms {
                    assert!((a.weight - w).abs() <= 1e-15);
                    let (gx, gy) = (a.pos.x * n as f64, a.pos.y * n as f64);
                    assert!((gx - gx.round()).abs() < 1e-12 && (gy - gy.round()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn symmetric_build_is_mirror_symmetric() {
        let b = build_symmetric(&BuildSpec::uniform(1.0, 1.0, 1.0, Some(2), 3)).unwrap();
        for z in [0.05, 0.2, 1.0 / 3.0, 0.5, 0.7, 0.95] {
            let (a, c) = (b.measure.slice_at(z).unwrap(), b.measure.slice_at(-z).unwrap());
            assert_eq!(a.len(), c.len());
            for (p, q) in a.atoms.iter().zip(&c.atoms) {
                assert!((p.pos.x - q.pos.x).abs() < 1e-12 && (p.pos.y - q.pos.y).abs() < 1e-12);
                assert!((p.weight - q.weight).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slice_flux_is_constant() {
        let b = build_symmetric(&BuildSpec::uniform(1.0, 1.0, 0.5, Some(3), 4)).unwrap();
        for k in 1..40 {
            let z = -0.5 + k as f64 / 40.0;
            assert!((b.measure.slice_at(z).unwrap().mass() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_sided_bound() {
        for n in 1..=4 {
            for depth in 1..=4 {
                let b = build_one_sided(&BuildSpec::uniform(2.0, 1.5, 0.7, Some(n), depth), Side::Bottom).unwrap();
                let e = total_energy(&b.measure).unwrap().total;
                assert!(e <= one_sided_energy_bound(2.0, 1.5, 0.7, n));
                assert!(b.measure.nodes.iter().all(|nd| nd.z <= 0.0));
            }
        }
    }

    #[test]
    fn explicit_boundary() {
        let grid = |i: f64, j: f64, w: f64| Atom { pos: TorusPoint::new(i / 4.0, j / 4.0), weight: w };
        let slice = DiracSlice::new(1.0, vec![grid(0.0, 1.0, 0.3), grid(3.0, 3.0, 0.5), grid(1.0, 2.0, 0.2)]).unwrap();
        let spec =
            BuildSpec { boundary: Boundary::Explicit(slice.clone()), ..BuildSpec::uniform(1.0, 1.0, 1.0, Some(2), 1) };
        let b = build_symmetric(&spec).unwrap();
        assert!(validate(&b.measure).is_empty());
        assert!(classify_regular(&b.measure, None).is_regular());
        let top = b.measure.trace_top();
        assert_eq!(top.len(), 3);
        assert!((top.mass() - 1.0).abs() < 1e-15);

        let off = DiracSlice::new(1.0, vec![Atom { pos: TorusPoint::new(0.1, 0.0), weight: 1.0 }]).unwrap();
        let spec = BuildSpec { boundary: Boundary::Explicit(off), ..BuildSpec::uniform(1.0, 1.0, 1.0, Some(2), 1) };
        assert!(matches!(build_symmetric(&spec), Err(Error::Domain(_))));
    }

    #[test]
    fn base_trace_convention() {
        let spec = BuildSpec { trace: TraceConvention::Base, ..BuildSpec::uniform(1.0, 1.0, 1.0, Some(3), 2) };
        let b = build_symmetric(&spec).unwrap();
        assert_eq!(b.trace_n, 3);
        assert!(classify_regular(&b.measure, Some(3)).is_n_regular());
    }

    #[test]
    fn tail_bound_shrinks_with_depth() {
        let s = |d| build_symmetric(&BuildSpec::uniform(1.0, 1.0, 1.0, Some(2), d)).unwrap().tail_energy_bound;
        assert!(s(4) < s(3) && s(3) < s(2));
    }

    #[test]
    fn invalid_specs() {
        assert!(build_symmetric(&BuildSpec::uniform(0.0, 1.0, 1.0, None, 1)).is_err());
        assert!(build_symmetric(&BuildSpec::uniform(1.0, 1.0, 1.0, Some(0), 1)).is_err());
        assert!(build_symmetric(&BuildSpec::uniform(1.0, 1.0, 1.0, Some(1), 0)).is_err());
    }
}
