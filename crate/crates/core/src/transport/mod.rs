//! Quadratic Wasserstein distances between horizontal slices on the torus.
//!
//! Distances carry the mass-prefactor convention: for slices of common mass
//! `M`, `W2^2 = M * min E_P |x - y|^2` over probability couplings `P` of the
//! normalized slices, i.e. the cost `sum_ij pi_ij |x_i - y_j|^2` of an
//! unnormalized plan. [`Convention::Probability`] divides by `M`; the two
//! agree for unit mass.

mod simplex;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{torus_distance_sq, TorusPoint};
use crate::measure::{pairwise_sum, Atom, DiracSlice, PolygonalMeasure};
use simplex::Transportation;

/// Integer resolution of the scaled supplies.
const MASS_SCALE: i64 = 1_000_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Convention {
    #[default]
    MassWeighted,
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanEntry {
    pub source: usize,
    pub target: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TransportPlan {
    pub pairs: Vec<PlanEntry>,
}

impl TransportPlan {
    pub fn source_marginal(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for p in &self.pairs {
            out[p.source] += p.mass;
        }
        out
    }

    pub fn target_marginal(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for p in &self.pairs {
            out[p.target] += p.mass;
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("source_idx,target_idx,mass\n");
        for p in &self.pairs {
            s.push_str(&format!("{},{},{:e}\n", p.source, p.target, p.mass));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct W2Result {
    pub value: f64,
    pub plan: TransportPlan,
}

pub fn w2_squared(a: &DiracSlice, b: &DiracSlice) -> Result<W2Result> {
    w2_squared_with(a, b, Convention::MassWeighted)
}

pub fn w2_squared_with(a: &DiracSlice, b: &DiracSlice, convention: Convention) -> Result<W2Result> {
    if a.l != b.l {
        return Err(Error::domain(format!("slices live on different tori (L={} vs {})", a.l, b.l)));
    }
    let (ma, mb) = (a.mass(), b.mass());
    if (ma - mb).abs() > 1e-12 * ma.max(mb) {
        return Err(Error::domain(format!("slice masses differ: {ma} vs {mb}")));
    }
    if a.is_empty() && b.is_empty() {
        return Ok(W2Result { value: 0.0, plan: TransportPlan::default() });
    }
    let (n, m) = (a.len(), b.len());
    let mut cost = Vec::with_capacity(n * m);
    for x in &a.atoms {
        for y in &b.atoms {
            cost.push(torus_distance_sq(x.pos, y.pos, a.l));
        }
    }
    let supply = scaled_supplies(&a.atoms, ma);
    let demand = scaled_supplies(&b.atoms, ma);
    let flow = Transportation::new(n, m, &cost).solve(&supply, &demand);

    let unit = ma / MASS_SCALE as f64;
    let mut pairs = Vec::new();
    let mut terms = Vec::new();
    for (e, &f) in flow.iter().enumerate() {
        if f > 0 {
            let mass = f as f64 * unit;
            pairs.push(PlanEntry { source: e / m, target: e % m, mass });
            terms.push(mass * cost[e]);
        }
    }
    let mut value = pairwise_sum(&terms);
    if convention == Convention::Probability {
        value /= ma;
    }
    Ok(W2Result { value, plan: TransportPlan { pairs } })
}

/// Weights scaled to sum to exactly [`MASS_SCALE`] by largest-remainder
/// rounding, so every atom is off by less than one unit.
fn scaled_supplies(atoms: &[Atom], total: f64) -> Vec<i64> {
    let exact: Vec<f64> = atoms.iter().map(|a| a.weight / total * MASS_SCALE as f64).collect();
    let mut q: Vec<i64> = exact.iter().map(|x| x.floor() as i64).collect();
    let rest = MASS_SCALE - q.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&i, &j| (exact[j] - q[j] as f64).total_cmp(&(exact[i] - q[i] as f64)));
    let n = q.len() as i64;
    for (k, &i) in order.iter().enumerate() {
        // rest lies in [0, n) unless the weights were far from summing to total
        q[i] += rest / n + i64::from((k as i64) < rest.rem_euclid(n));
    }
    q
}

/// `M x M` cell-center atoms of weight `phi / M^2`, the discrete stand-in
/// for `phi L^-2 dx'`.
pub fn lebesgue_grid(l: f64, phi: f64, grid_m: usize) -> DiracSlice {
    let h = l / grid_m as f64;
    let w = phi / (grid_m * grid_m) as f64;
    let atoms = (0..grid_m)
        .flat_map(|i| {
            (0..grid_m)
                .map(move |j| Atom { pos: TorusPoint::new((i as f64 + 0.5) * h, (j as f64 + 0.5) * h), weight: w })
        })
        .collect();
    DiracSlice { l, atoms }
}

/// `W2^2(a, Phi L^-2 dx')` with Lebesgue measure replaced by
/// [`lebesgue_grid`]. The grid sits within `L / (sqrt 2 M)` of every point,
/// so the distance itself is off by at most that much.
pub fn w2_to_lebesgue(a: &DiracSlice, grid_m: usize) -> Result<f64> {
    if grid_m < 8 {
        return Err(Error::domain(format!("Lebesgue grid needs M >= 8, got {grid_m}")));
    }
    let grid = lebesgue_grid(a.l, a.mass(), grid_m);
    Ok(w2_squared(a, &grid)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HolderEntry {
    pub z1: f64,
    pub z2: f64,
    pub w2: f64,
    pub bound: f64,
    /// `bound - w2`; negative means a violation.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HolderReport {
    pub entries: Vec<HolderEntry>,
}

impl HolderReport {
    pub fn violations(&self) -> usize {
        self.entries.iter().filter(|e| e.margin < 0.0).count()
    }

    pub fn min_margin(&self) -> f64 {
        self.entries.iter().map(|e| e.margin).fold(f64::INFINITY, f64::min)
    }
}

/// Checks `W2^2(mu_z, mu_z~) <= L^2 I |z - z~| + 1e-9` for each pair.
pub fn holder_check(m: &PolygonalMeasure, energy: f64, pairs: &[(f64, f64)]) -> Result<HolderReport> {
    let entries = pairs
        .iter()
        .map(|&(z1, z2)| {
            let w2 = w2_squared(&m.slice_at(z1)?, &m.slice_at(z2)?)?.value;
            let bound = m.l * m.l * energy * (z1 - z2).abs() + 1e-9;
            Ok(HolderEntry { z1, z2, w2, bound, margin: bound - w2 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HolderReport { entries })
}
