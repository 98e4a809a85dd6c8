//! Rounding of regular measures to fluxes in `(2 pi / k) N`.
//!
//! Sink fluxes at the top are rounded first, in depth-first order from the
//! lowest node of each component so that the sinks of any subtree are
//! consecutive. The rounding is greedy: the first value is rounded down, each
//! later one down if the running surplus is positive and up otherwise, and
//! the last one takes whatever keeps the total exact. Nodes are then visited
//! from the top down; a node with several incoming segments splits its
//! outgoing total among them by the same rule applied to proportional
//! targets. All bookkeeping is in integer quanta.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::measure::{validate, PolygonalMeasure};

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMeasure {
    pub measure: PolygonalMeasure,
    /// `2 pi / k`.
    pub quantum: f64,
    /// Flux of each segment in quanta.
    pub quanta: Vec<u64>,
}

impl QuantizedMeasure {
    /// Integer Kirchhoff residuals `in - out` at interior nodes; all zero by
    /// construction.
    pub fn kirchhoff_residuals(&self) -> Vec<(usize, i128)> {
        let m = &self.measure;
        m.incidence()
            .iter()
            .enumerate()
            .filter(|(i, (inc, out))| !inc.is_empty() && !out.is_empty() && !m.is_boundary(*i))
            .map(|(i, (inc, out))| {
                let fin: i128 = inc.iter().map(|&s| self.quanta[s] as i128).sum();
                let fout: i128 = out.iter().map(|&s| self.quanta[s] as i128).sum();
                (i, fin - fout)
            })
            .filter(|&(_, r)| r != 0)
            .collect()
    }
}

fn near_integer(x: f64) -> Option<u64> {
    let r = x.round();
    ((x - r).abs() <= 1e-9 * x.abs().max(1.0) && r >= 0.0).then_some(r as u64)
}

/// Splits `total` quanta among `targets` (in quanta, summing to `total` up
/// to rounding). Targets that are integers to `1e-9` are kept exactly.
fn distribute(targets: &[f64], total: u64) -> Vec<u64> {
    let mut out = Vec::with_capacity(targets.len());
    let mut surplus = 0.0;
    let mut used: u64 = 0;
    for (i, &t) in targets.iter().enumerate() {
        if i + 1 == targets.len() {
            out.push(total.saturating_sub(used));
            break;
        }
        let q = match near_integer(t) {
            Some(q) => q,
            None if i == 0 || surplus > 0.0 => t.floor() as u64,
            None => t.ceil() as u64,
        };
        surplus += q as f64 - t;
        used += q;
        out.push(q);
    }
    out
}

/// Rounds every flux of `m` to a multiple of `2 pi / k` with exact integer
/// Kirchhoff balance and unchanged total flux.
pub fn quantize(m: &PolygonalMeasure, k: f64) -> Result<QuantizedMeasure> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::domain(format!("k must be positive, got {k}")));
    }
    let report = validate(m);
    if !report.is_empty() {
        return Err(Error::Invalid(report));
    }
    let quantum = 2.0 * std::f64::consts::PI / k;
    let phi = m.total_flux();
    let total = near_integer(phi / quantum)
        .ok_or_else(|| Error::Precondition(format!("k Phi = {} is not in 2 pi N", k * phi)))?;

    let inc = m.incidence();
    let sinks = sink_order(m, &inc);
    let targets: Vec<f64> = sinks.iter().map(|&s| m.segments[s].flux / quantum).collect();
    let mut quanta: Vec<Option<u64>> = vec![None; m.segments.len()];
    for (&s, q) in sinks.iter().zip(distribute(&targets, total)) {
        quanta[s] = Some(q);
    }

    let mut order: Vec<usize> = (0..m.nodes.len()).collect();
    order.sort_by(|&a, &b| m.nodes[b].z.total_cmp(&m.nodes[a].z).then(a.cmp(&b)));
    for v in order {
        let (incoming, outgoing) = &inc[v];
        if incoming.is_empty() || outgoing.is_empty() {
            continue;
        }
        let q_out: u64 = outgoing.iter().map(|&s| quanta[s].expect("outgoing segments end higher up")).sum();
        let t_sum: f64 = incoming.iter().map(|&s| m.segments[s].flux).sum();
        let targets: Vec<f64> = incoming.iter().map(|&s| m.segments[s].flux * q_out as f64 / t_sum).collect();
        for (&s, q) in incoming.iter().zip(distribute(&targets, q_out)) {
            quanta[s] = Some(q);
        }
    }

    let quanta: Vec<u64> = quanta.into_iter().map(|q| q.expect("every segment reached")).collect();
    if let Some(s) = quanta.iter().position(|&q| q == 0) {
        return Err(Error::QuantizationUnderflow { segment: s, flux: m.segments[s].flux });
    }
    let mut measure = m.clone();
    for (seg, &q) in measure.segments.iter_mut().zip(&quanta) {
        seg.flux = q as f64 * quantum;
    }
    Ok(QuantizedMeasure { measure, quantum, quanta })
}

/// Segments without a continuation above their head, listed in depth-first
/// order from the lowest node of each connected component.
fn sink_order(m: &PolygonalMeasure, inc: &[(Vec<usize>, Vec<usize>)]) -> Vec<usize> {
    let n = m.nodes.len();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (i, s) in m.segments.iter().enumerate() {
        adj[s.tail].push((s.head, i));
        adj[s.head].push((s.tail, i));
    }
    let mut roots: Vec<usize> = (0..n).collect();
    roots.sort_by(|&a, &b| m.nodes[a].z.total_cmp(&m.nodes[b].z).then(a.cmp(&b)));
    let mut seen_node = vec![false; n];
    let mut seen_seg = HashSet::new();
    let mut out = Vec::new();
    for r in roots {
        if seen_node[r] {
            continue;
        }
        let mut stack = vec![r];
        seen_node[r] = true;
        while let Some(v) = stack.pop() {
            let mut children = Vec::new();
            for &(w, e) in &adj[v] {
                if seen_seg.insert(e) {
                    if m.segments[e].head == w && inc[w].1.is_empty() {
                        out.push(e);
                    }
                    if !seen_node[w] {
                        seen_node[w] = true;
                        children.push(w);
                    }
                }
            }
            // lowest segment index is explored first
            stack.extend(children.into_iter().rev());
        }
    }
    out
}
