//! Local minimization of the energy at fixed topology.
//!
//! Node positions enter only through the transport term, which is a convex
//! quadratic in unwrapped coordinates; [`solve_positions`] minimizes it
//! exactly by elimination along the tree. Heights are handled by projected,
//! diagonally preconditioned gradient descent ([`descend_heights`]).
//! [`optimize`] alternates the two.
//!
//! A node is free when it is neither on a face `z = +-T` nor a terminal of
//! degree one.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::energy::{energy_between, raw_energy, K_STAR};
use crate::error::{Error, Result};
use crate::geometry::{torus_distance_sq, wrap_coord, TorusPoint};
use crate::measure::{detect_loops, validate, PolygonalMeasure};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizeOptions {
    /// Outer iterations of [`optimize`], or steps of [`descend_heights`].
    pub max_iters: usize,
    /// Scale of the preconditioned height step; 1 is a diagonal Newton step.
    pub height_step: f64,
    /// Stop once the relative energy decrease of an iteration is below this.
    pub tol: f64,
    /// Height descent also stops when the projected gradient norm is below
    /// this.
    pub grad_tol: f64,
    pub freeze_heights: bool,
    /// Copy the cheaper half onto the other at the end. Requires a mirror
    /// symmetric input.
    pub symmetrize: bool,
    /// Seed for perturbation restarts.
    pub seed: u64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            height_step: 1.0,
            tol: 1e-10,
            grad_tol: 1e-9,
            freeze_heights: false,
            symmetrize: false,
            seed: 0,
        }
    }
}

impl OptimizeOptions {
    fn check(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iters == 0 || !(self.height_step > 0.0) || !(self.grad_tol >= 0.0) {
            return Err(Error::domain("optimizer needs tol > 0, max_iters >= 1, height_step > 0, grad_tol >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIters,
    /// Backtracking found no acceptable step; the best iterate is returned.
    StepUnderflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub energy: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Optimized {
    pub measure: PolygonalMeasure,
    pub trace: Vec<TraceRow>,
    pub status: Status,
}

impl Optimized {
    pub fn energy(&self) -> f64 {
        self.trace.last().map(|r| r.energy).unwrap_or(f64::NAN)
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,energy,grad_norm\n");
        for r in &self.trace {
            out.push_str(&format!("{},{:.17e},{:.6e}\n", r.iter, r.energy, r.grad_norm));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct HeightDescent {
    pub measure: PolygonalMeasure,
    pub steps: usize,
    pub status: Status,
}

/// Energy gradient with respect to the coordinates `(x, y, z)` of the free
/// nodes, listed in `nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub nodes: Vec<usize>,
    pub values: Vec<[f64; 3]>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.values.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn position_norm(&self) -> f64 {
        self.values.iter().map(|g| g[0] * g[0] + g[1] * g[1]).sum::<f64>().sqrt()
    }

    pub fn height_norm(&self) -> f64 {
        self.values.iter().map(|g| g[2] * g[2]).sum::<f64>().sqrt()
    }
}

pub fn free_nodes(m: &PolygonalMeasure) -> Vec<bool> {
    let deg = m.degrees();
    (0..m.nodes.len()).map(|i| deg[i] >= 2 && !m.is_boundary(i)).collect()
}

/// Analytic gradient of the energy over the free node coordinates.
pub fn energy_gradient(m: &PolygonalMeasure) -> Gradient {
    let free = free_nodes(m);
    let inv = 1.0 / (m.l * m.l);
    let mut g = vec![[0.0; 3]; m.nodes.len()];
    for s in &m.segments {
        let dz = m.dz(s);
        let d = m.displacement(s);
        let d2 = d[0] * d[0] + d[1] * d[1];
        let gz = (K_STAR * s.flux.sqrt() - s.flux * d2 / (dz * dz)) * inv;
        let c = 2.0 * s.flux / dz * inv;
        for k in 0..2 {
            g[s.head][k] += c * d[k];
            g[s.tail][k] -= c * d[k];
        }
        g[s.head][2] += gz;
        g[s.tail][2] -= gz;
    }
    let nodes: Vec<usize> = (0..m.nodes.len()).filter(|&i| free[i]).collect();
    let values = nodes.iter().map(|&i| g[i]).collect();
    Gradient { nodes, values }
}

fn check_tree(m: &PolygonalMeasure) -> Result<()> {
    let report = validate(m);
    if !report.is_empty() {
        return Err(Error::Invalid(report));
    }
    let loops = detect_loops(m);
    if !loops.is_empty() {
        return Err(Error::UnsupportedTopology(format!("support contains {} independent cycle(s)", loops.len())));
    }
    Ok(())
}

/// Moves every node to an unwrapped position at once and repairs lifts.
fn place_nodes(m: &mut PolygonalMeasure, moves: &[(usize, [f64; 2])]) {
    let mut shift = vec![[0i32; 2]; m.nodes.len()];
    for &(i, [x, y]) in moves {
        let (x, kx) = wrap_coord(x, m.l);
        let (y, ky) = wrap_coord(y, m.l);
        m.nodes[i].pos = TorusPoint::new(x, y);
        shift[i] = [kx, ky];
    }
    for s in &mut m.segments {
        for k in 0..2 {
            s.lift[k] += shift[s.head][k] - shift[s.tail][k];
        }
    }
}

/// Places every free node at the exact minimizer of the transport term with
/// heights, fluxes and fixed nodes held.
pub fn solve_positions(m: &PolygonalMeasure) -> Result<PolygonalMeasure> {
    check_tree(m)?;
    relax_positions(m)
}

fn relax_positions(m: &PolygonalMeasure) -> Result<PolygonalMeasure> {
    let free = free_nodes(m);
    let n = m.nodes.len();
    // Node v satisfies diag[v] u_v - sum_free w u_o = rhs[v].
    let mut diag = vec![0.0; n];
    let mut rhs = vec![[0.0; 2]; n];
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut anchored = vec![false; n];
    for s in &m.segments {
        let w = s.flux / m.dz(s);
        let off = [s.lift[0] as f64 * m.l, s.lift[1] as f64 * m.l];
        for (v, o, sign) in [(s.tail, s.head, 1.0), (s.head, s.tail, -1.0)] {
            if !free[v] {
                continue;
            }
            diag[v] += w;
            rhs[v][0] += sign * w * off[0];
            rhs[v][1] += sign * w * off[1];
            if free[o] {
                adj[v].push((o, w));
            } else {
                let p = m.nodes[o].pos;
                rhs[v][0] += w * p.x;
                rhs[v][1] += w * p.y;
                anchored[v] = true;
            }
        }
    }

    let mut solved = vec![[0.0; 2]; n];
    let mut visited = vec![false; n];
    // u_v = gain[v] u_parent + bias[v]
    let mut gain = vec![0.0; n];
    let mut bias = vec![[0.0; 2]; n];
    for root in 0..n {
        if !free[root] || visited[root] {
            continue;
        }
        let mut order = Vec::new();
        let mut parent = HashMap::new();
        let mut stack = vec![root];
        visited[root] = true;
        while let Some(v) = stack.pop() {
            order.push(v);
            for &(o, w) in &adj[v] {
                if !visited[o] {
                    visited[o] = true;
                    parent.insert(o, (v, w));
                    stack.push(o);
                }
            }
        }
        if !order.iter().any(|&v| anchored[v]) {
            return Err(Error::Underdetermined(format!(
                "free component containing node {root} has no fixed neighbour"
            )));
        }
        let (a, r) = (&mut diag, &mut rhs);
        for &v in order.iter().rev() {
            let g = parent.get(&v).map_or(0.0, |&(_, w)| w / a[v]);
            gain[v] = g;
            bias[v] = [r[v][0] / a[v], r[v][1] / a[v]];
            if let Some(&(p, w)) = parent.get(&v) {
                a[p] -= w * g;
                r[p][0] += w * bias[v][0];
                r[p][1] += w * bias[v][1];
            }
        }
        for &v in &order {
            let up = parent.get(&v).map_or([0.0; 2], |&(p, _)| solved[p]);
            solved[v] = [gain[v] * up[0] + bias[v][0], gain[v] * up[1] + bias[v][1]];
        }
    }

    let mut out = m.clone();
    let moves: Vec<(usize, [f64; 2])> = (0..n).filter(|&v| free[v]).map(|v| (v, solved[v])).collect();
    place_nodes(&mut out, &moves);
    Ok(out)
}

/// Height-only view of a measure with positions frozen.
struct Heights {
    /// `K* sqrt(phi) / L^2` and `phi |dX|^2 / L^2` per segment.
    a: Vec<f64>,
    b: Vec<f64>,
    ends: Vec<(usize, usize)>,
    movable: Vec<bool>,
    gap: f64,
    span: f64,
}

impl Heights {
    fn new(m: &PolygonalMeasure, pinned: &[bool]) -> Self {
        let free = free_nodes(m);
        let inv = 1.0 / (m.l * m.l);
        let mut a = Vec::with_capacity(m.segments.len());
        let mut b = Vec::with_capacity(m.segments.len());
        for s in &m.segments {
            let d = m.displacement(s);
            a.push(K_STAR * s.flux.sqrt() * inv);
            b.push(s.flux * (d[0] * d[0] + d[1] * d[1]) * inv);
        }
        Self {
            a,
            b,
            ends: m.segments.iter().map(|s| (s.tail, s.head)).collect(),
            movable: (0..m.nodes.len()).map(|i| free[i] && !pinned.get(i).copied().unwrap_or(false)).collect(),
            gap: 1e-6 * m.t,
            span: 2.0 * m.t,
        }
    }

    fn energy(&self, z: &[f64]) -> f64 {
        self.ends
            .iter()
            .enumerate()
            .map(|(i, &(t, h))| {
                let dz = z[h] - z[t];
                self.a[i] * dz + if self.b[i] == 0.0 { 0.0 } else { self.b[i] / dz }
            })
            .sum()
    }

    /// Gradient and diagonal curvature-based scaling.
    fn gradient(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = z.len();
        let mut g = vec![0.0; n];
        let mut hess = vec![0.0; n];
        let mut floor = vec![0.0; n];
        for (i, &(t, h)) in self.ends.iter().enumerate() {
            let dz = z[h] - z[t];
            let d = self.a[i] - self.b[i] / (dz * dz);
            let c = 2.0 * self.b[i] / (dz * dz * dz);
            g[h] += d;
            g[t] -= d;
            for v in [t, h] {
                hess[v] += c;
                floor[v] += self.a[i] / dz.max(self.gap);
            }
        }
        for v in 0..n {
            if !self.movable[v] {
                g[v] = 0.0;
            }
            hess[v] = hess[v].max(floor[v]);
        }
        (g, hess)
    }

    fn slack(&self, z: &[f64], i: usize) -> f64 {
        let (t, h) = self.ends[i];
        z[h] - z[t] - self.gap
    }

    /// Search direction, the largest feasible step along it, and the norm of
    /// the projected gradient.
    ///
    /// A constraint within `1e-3` of the minimum gap whose endpoints would
    /// approach each other is treated as binding. Nodes joined by binding
    /// constraints move rigidly, driven by their summed gradient; a cluster
    /// containing an immovable node stays put.
    fn direction(&self, z: &[f64], g: &[f64], hess: &[f64], scale: f64) -> (Vec<f64>, f64, f64) {
        let n = z.len();
        let near: Vec<usize> = (0..self.ends.len()).filter(|&i| self.slack(z, i) <= 1e-3 * self.gap).collect();
        let mut binding = vec![false; self.ends.len()];
        // start from the single-node steps, then lump until no near-active
        // constraint closes
        let mut p: Vec<f64> = (0..n).map(|v| if self.movable[v] { -scale * g[v] / hess[v] } else { 0.0 }).collect();
        let mut resid;
        loop {
            let mut changed = false;
            for &i in &near {
                let (t, h) = self.ends[i];
                if !binding[i] && p[h] - p[t] < 0.0 {
                    binding[i] = true;
                    changed = true;
                }
            }
            let mut root: Vec<usize> = (0..n).collect();
            for &i in &near {
                if binding[i] {
                    let (t, h) = self.ends[i];
                    let (rt, rh) = (find(&mut root, t), find(&mut root, h));
                    root[rt.max(rh)] = rt.min(rh);
                }
            }
            let mut sum_g = vec![0.0; n];
            let mut sum_h = vec![0.0; n];
            let mut pinned = vec![false; n];
            for v in 0..n {
                let r = find(&mut root, v);
                sum_g[r] += g[v];
                sum_h[r] += hess[v];
                pinned[r] |= !self.movable[v];
            }
            resid = 0.0;
            for r in 0..n {
                if root[r] == r && !pinned[r] {
                    resid += sum_g[r] * sum_g[r];
                }
            }
            for v in 0..n {
                let r = find(&mut root, v);
                p[v] = if pinned[r] || sum_h[r] <= 0.0 { 0.0 } else { -scale * sum_g[r] / sum_h[r] };
            }
            if !changed {
                break;
            }
        }
        let mut max_step = f64::INFINITY;
        for (i, &(t, h)) in self.ends.iter().enumerate() {
            let rate = p[h] - p[t];
            if !binding[i] && rate < 0.0 {
                max_step = max_step.min(self.slack(z, i).max(0.0) / -rate);
            }
        }
        (p, max_step, f64::sqrt(resid))
    }
}

fn find(root: &mut [usize], mut v: usize) -> usize {
    while root[v] != v {
        root[v] = root[root[v]];
        v = root[v];
    }
    v
}

fn descend(m: &PolygonalMeasure, opts: &OptimizeOptions, pinned: &[bool], resolve: bool) -> Result<HeightDescent> {
    let mut cur = if resolve { relax_positions(m)? } else { m.clone() };
    let mut hp = Heights::new(&cur, pinned);
    let mut z: Vec<f64> = cur.nodes.iter().map(|n| n.z).collect();
    let mut e = hp.energy(&z);
    let mut status = Status::MaxIters;
    let mut steps = 0;
    // Barzilai-Borwein memory for the reduced problem
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for _ in 0..opts.max_iters {
        let (g, mut hess) = hp.gradient(&z);
        if resolve {
            // the fixed-position curvature is far stiffer than the reduced one
            hess.iter_mut().for_each(|h| *h = 1.0);
        }
        let (p, max_step, pnorm) = hp.direction(&z, &g, &hess, opts.height_step);
        let slope: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
        if pnorm <= opts.grad_tol || slope >= 0.0 {
            status = Status::Converged;
            break;
        }
        let first = if !resolve {
            1.0
        } else if let Some((z0, g0)) = &prev {
            let (mut ss, mut sy) = (0.0, 0.0);
            for v in 0..z.len() {
                let (sv, yv) = (z[v] - z0[v], g[v] - g0[v]);
                ss += sv * sv;
                sy += sv * yv;
            }
            if sy > 0.0 {
                ss / sy
            } else {
                0.01 * hp.span / pnorm
            }
        } else {
            0.01 * hp.span / pnorm
        };
        prev = resolve.then(|| (z.clone(), g.clone()));
        let mut alpha = max_step.min(first);
        let mut accepted = None;
        while alpha > 1e-16 {
            let trial: Vec<f64> = z.iter().zip(&p).map(|(zi, pi)| zi + alpha * pi).collect();
            if (0..hp.ends.len()).all(|i| hp.slack(&trial, i) >= -1e-9 * hp.gap) {
                let (cand, et) = if resolve {
                    let mut c = cur.clone();
                    for (node, &zi) in c.nodes.iter_mut().zip(&trial) {
                        node.z = zi;
                    }
                    let c = relax_positions(&c)?;
                    let et = Heights::new(&c, pinned).energy(&trial);
                    (Some(c), et)
                } else {
                    (None, hp.energy(&trial))
                };
                if et <= e + 1e-4 * alpha * slope {
                    accepted = Some((trial, cand, et));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((trial, cand, et)) = accepted else {
            status = Status::StepUnderflow;
            break;
        };
        steps += 1;
        let stalled = e - et <= f64::EPSILON * e.abs();
        if let Some(c) = cand {
            hp = Heights::new(&c, pinned);
            cur = c;
        }
        z = trial;
        e = et;
        if stalled {
            // a decrease predicted below roundoff means the iterate is as
            // stationary as the energy can resolve
            let resolved = -slope <= 1e3 * f64::EPSILON * e.abs();
            status = if resolved { Status::Converged } else { Status::StepUnderflow };
            break;
        }
    }
    for (node, zi) in cur.nodes.iter_mut().zip(z) {
        node.z = zi;
    }
    Ok(HeightDescent { measure: cur, steps, status })
}

/// First-order residual at the free nodes: the position gradient together
/// with the projected height gradient, in which nodes held at the minimum
/// gap by a binding constraint are lumped.
pub fn stationarity_residual(m: &PolygonalMeasure) -> f64 {
    let hp = Heights::new(m, &[]);
    let z: Vec<f64> = m.nodes.iter().map(|n| n.z).collect();
    let (g, hess) = hp.gradient(&z);
    let (_, _, height) = hp.direction(&z, &g, &hess, 1.0);
    energy_gradient(m).position_norm().hypot(height)
}

/// Projected gradient descent on free node heights with positions held,
/// keeping every segment at least `1e-6 T` tall.
pub fn descend_heights(m: &PolygonalMeasure, opts: &OptimizeOptions) -> Result<HeightDescent> {
    opts.check()?;
    check_tree(m)?;
    descend(m, opts, &[], false)
}

/// Alternates exact position solves with height descent on the energy
/// reduced over positions, until the relative energy decrease of an
/// iteration drops below `tol`.
pub fn optimize(m: &PolygonalMeasure, opts: &OptimizeOptions) -> Result<Optimized> {
    opts.check()?;
    check_tree(m)?;
    let mirror = if opts.symmetrize { Some(Mirror::of(m)?) } else { None };
    let pinned: Vec<bool> = match &mirror {
        Some(mm) => (0..m.nodes.len()).map(|v| mm.node[v] == v).collect(),
        None => Vec::new(),
    };
    let grad_norm = |m: &PolygonalMeasure| {
        let g = energy_gradient(m);
        if opts.freeze_heights {
            g.position_norm()
        } else {
            g.norm()
        }
    };

    let mut cur = m.clone();
    let mut e = raw_energy(&cur)?.total;
    let mut trace = vec![TraceRow { iter: 0, energy: e, grad_norm: grad_norm(&cur) }];
    let mut status = Status::MaxIters;
    let inner = OptimizeOptions { max_iters: 20, ..opts.clone() };
    for iter in 1..=opts.max_iters {
        let mut next = relax_positions(&cur)?;
        let mut step_status = Status::Converged;
        if !opts.freeze_heights {
            let d = descend(&next, &inner, &pinned, true)?;
            step_status = d.status;
            next = d.measure;
        }
        let en = raw_energy(&next)?.total;
        // the exact position solve can only lower the energy; guard roundoff
        if en > e {
            status = Status::Converged;
            break;
        }
        let decrease = e - en;
        cur = next;
        e = en;
        trace.push(TraceRow { iter, energy: e, grad_norm: grad_norm(&cur) });
        if decrease <= opts.tol * e.abs() {
            status = if step_status == Status::StepUnderflow { step_status } else { Status::Converged };
            break;
        }
    }
    if let Some(mm) = mirror {
        let sym = mm.symmetrize(&cur)?;
        let es = raw_energy(&sym)?.total;
        if es <= e {
            cur = sym;
            e = es;
            let iter = trace.last().map_or(0, |r| r.iter) + 1;
            trace.push(TraceRow { iter, energy: e, grad_norm: grad_norm(&cur) });
        }
    }
    Ok(Optimized { measure: cur, trace, status })
}

/// Runs [`optimize`] from the input and from `restarts` copies with
/// randomly perturbed free heights, returning the lowest-energy result.
pub fn optimize_with_restarts(m: &PolygonalMeasure, opts: &OptimizeOptions, restarts: usize) -> Result<Optimized> {
    let free = free_nodes(m);
    let results: Vec<Result<Optimized>> = (0..=restarts)
        .into_par_iter()
        .map(|r| {
            let mut start = m.clone();
            if r > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(r as u64));
                perturb_heights(&mut start, &free, &mut rng);
            }
            optimize(&start, opts)
        })
        .collect();
    let mut best: Option<Optimized> = None;
    for res in results {
        let o = res?;
        if best.as_ref().is_none_or(|b| o.energy() < b.energy()) {
            best = Some(o);
        }
    }
    Ok(best.expect("at least one run"))
}

fn perturb_heights(m: &mut PolygonalMeasure, free: &[bool], rng: &mut impl Rng) {
    let inc = m.incidence();
    let gap = 1e-6 * m.t;
    for v in 0..m.nodes.len() {
        if !free[v] {
            continue;
        }
        let lo = inc[v].0.iter().map(|&s| m.nodes[m.segments[s].tail].z).fold(-m.t, f64::max) + gap;
        let hi = inc[v].1.iter().map(|&s| m.nodes[m.segments[s].head].z).fold(m.t, f64::min) - gap;
        if lo < hi {
            m.nodes[v].z = rng.random_range(lo..hi);
        }
    }
}

/// Node and segment correspondence under `z -> -z`.
struct Mirror {
    node: Vec<usize>,
    segment: Vec<usize>,
}

impl Mirror {
    fn of(m: &PolygonalMeasure) -> Result<Self> {
        let fail = |what: String| Error::Precondition(format!("input is not mirror symmetric: {what}"));
        let ztol = 1e-12 * m.t;
        let ptol = (1e-9 * m.l).powi(2);
        let mut by_height: Vec<usize> = (0..m.nodes.len()).collect();
        by_height.sort_by(|&a, &b| m.nodes[a].z.total_cmp(&m.nodes[b].z));
        let mut node = vec![usize::MAX; m.nodes.len()];
        for v in 0..m.nodes.len() {
            let target = -m.nodes[v].z;
            let start = by_height.partition_point(|&w| m.nodes[w].z < target - ztol);
            node[v] = by_height[start..]
                .iter()
                .take_while(|&&w| m.nodes[w].z <= target + ztol)
                .copied()
                .find(|&w| torus_distance_sq(m.nodes[v].pos, m.nodes[w].pos, m.l) <= ptol)
                .ok_or_else(|| fail(format!("node {v} has no mirror image")))?;
        }
        let mut index = HashMap::new();
        for (i, s) in m.segments.iter().enumerate() {
            index.insert((s.tail, s.head, s.lift), i);
        }
        let mut segment = Vec::with_capacity(m.segments.len());
        for (i, s) in m.segments.iter().enumerate() {
            let key = (node[s.head], node[s.tail], [-s.lift[0], -s.lift[1]]);
            match index.get(&key) {
                Some(&j) if j != i && (m.segments[j].flux - s.flux).abs() <= 1e-12 * s.flux => segment.push(j),
                Some(&j) if j == i => return Err(fail(format!("segment {i} crosses the midplane"))),
                _ => return Err(fail(format!("segment {i} has no mirror image"))),
            }
        }
        Ok(Self { node, segment })
    }

    /// Replaces the costlier half by the reflection of the cheaper one.
    fn symmetrize(&self, m: &PolygonalMeasure) -> Result<PolygonalMeasure> {
        let lower = energy_between(m, -m.t, 0.0)?.total;
        let upper = energy_between(m, 0.0, m.t)?.total;
        let keep_upper = upper <= lower;
        let replaced = |z: f64| if keep_upper { z < 0.0 } else { z > 0.0 };
        let mut out = m.clone();
        for v in 0..m.nodes.len() {
            if self.node[v] != v && replaced(m.nodes[v].z) {
                let src = m.nodes[self.node[v]];
                out.nodes[v].pos = src.pos;
                out.nodes[v].z = -src.z;
            }
        }
        for (i, s) in m.segments.iter().enumerate() {
            if replaced(m.nodes[s.tail].z + m.nodes[s.head].z) {
                let src = m.segments[self.segment[i]].lift;
                out.segments[i].lift = [-src[0], -src[1]];
            }
        }
        Ok(out)
    }
}

/// Optimal junction of one source and two sinks found by exhaustive search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Junction {
    pub position: [f64; 2],
    pub height: f64,
    pub energy: f64,
}

/// Grid search for the junction point of a source `(x, y, z)` feeding two
/// sinks with the given fluxes, in unwrapped coordinates of a box of width
/// `l`. The search covers the bounding box of the three points between the
/// source height and the lower sink, with `grid` points per non-degenerate
/// axis. A zero-flux sink is dropped.
pub fn brute_force_junction(l: f64, source: [f64; 3], sinks: [[f64; 3]; 2], fluxes: [f64; 2], grid: usize) -> Junction {
    let inv = 1.0 / (l * l);
    let seg = |phi: f64, a: [f64; 3], b: [f64; 3]| -> f64 {
        let dz = b[2] - a[2];
        let d2 = (b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2);
        if phi == 0.0 {
            0.0
        } else if dz > 0.0 {
            (K_STAR * phi.sqrt() * dz + phi * d2 / dz) * inv
        } else if dz == 0.0 && d2 == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    };
    let live: Vec<usize> = (0..2).filter(|&i| fluxes[i] > 0.0).collect();
    if live.len() < 2 {
        let energy = live.first().map_or(0.0, |&i| seg(fluxes[i], source, sinks[i]));
        return Junction { position: [source[0], source[1]], height: source[2], energy };
    }
    let total = fluxes[0] + fluxes[1];
    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        if hi - lo <= 1e-14 * l.max(hi.abs()) || grid < 2 {
            vec![lo]
        } else {
            (0..grid).map(|i| lo + (hi - lo) * i as f64 / (grid - 1) as f64).collect()
        }
    };
    let span = |k: usize| {
        let v = [source[k], sinks[0][k], sinks[1][k]];
        (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    };
    let (x0, x1) = span(0);
    let (y0, y1) = span(1);
    let xs = axis(x0, x1);
    let ys = axis(y0, y1);
    let zs = axis(source[2], sinks[0][2].min(sinks[1][2]));
    zs.par_iter()
        .map(|&z| {
            let mut best = Junction { position: [xs[0], ys[0]], height: z, energy: f64::INFINITY };
            for &x in &xs {
                for &y in &ys {
                    let j = [x, y, z];
                    let e = seg(total, source, j) + seg(fluxes[0], j, sinks[0]) + seg(fluxes[1], j, sinks[1]);
                    if e < best.energy {
                        best = Junction { position: [x, y], height: z, energy: e };
                    }
                }
            }
            best
        })
        .reduce_with(|a, b| if b.energy < a.energy { b } else { a })
        .expect("non-empty grid")
}
