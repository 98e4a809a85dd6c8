//! Experiment harnesses and random instance generators.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::Serialize;

use crate::builder::{build_symmetric, optimal_n, BuildSpec};
use crate::energy::total_energy;
use crate::error::{Error, Result};
use crate::geometry::TorusPoint;
use crate::measure::{validate, Atom, DiracSlice, PolygonalMeasure};
use crate::optimizer::{optimize, OptimizeOptions};
use crate::transport::{holder_check, w2_to_lebesgue};

/// Random binary tree with one source on the bottom face and `leaves` sinks
/// on the top face of `Q_l x [-t, t]`. Fluxes sum to one; junction heights,
/// offsets and splits are random. Samples that fail validation are redrawn.
pub fn random_tree(l: f64, t: f64, leaves: usize, rng: &mut impl Rng) -> PolygonalMeasure {
    assert!(leaves >= 1, "a tree needs at least one leaf");
    loop {
        let mut m = PolygonalMeasure::new(l, t).expect("positive box");
        let mut shifts = Vec::new();
        let root = [rng.random_range(0.0..l), rng.random_range(0.0..l)];
        let r = push_node(&mut m, &mut shifts, root, -t);
        grow(&mut m, &mut shifts, rng, r, root, 1.0, leaves);
        if validate(&m).is_empty() {
            return m;
        }
    }
}

fn push_node(m: &mut PolygonalMeasure, shifts: &mut Vec<[i32; 2]>, u: [f64; 2], z: f64) -> usize {
    let (p, k) = TorusPoint::new(u[0], u[1]).wrap_with_shift(m.l);
    shifts.push(k);
    m.add_node(p, z)
}

fn link(m: &mut PolygonalMeasure, shifts: &[[i32; 2]], tail: usize, head: usize, flux: f64) {
    let lift = [shifts[head][0] - shifts[tail][0], shifts[head][1] - shifts[tail][1]];
    m.add_segment(tail, head, flux, lift);
}

fn grow(
    m: &mut PolygonalMeasure,
    shifts: &mut Vec<[i32; 2]>,
    rng: &mut impl Rng,
    from: usize,
    u: [f64; 2],
    flux: f64,
    leaves: usize,
) {
    let (l, t) = (m.l, m.t);
    let z0 = m.nodes[from].z;
    let mut jitter = |s: f64| [u[0] + rng.random_range(-s..s) * l, u[1] + rng.random_range(-s..s) * l];
    if leaves == 1 {
        let leaf = push_node(m, shifts, jitter(0.3), t);
        link(m, shifts, from, leaf, flux);
        return;
    }
    let uj = jitter(0.2);
    let zj = z0 + rng.random_range(0.15..0.5) * (t - z0);
    let j = push_node(m, shifts, uj, zj);
    link(m, shifts, from, j, flux);
    let left = rng.random_range(1..leaves);
    let w = rng.random_range(0.2..0.8);
    grow(m, shifts, rng, j, uj, flux * w, left);
    grow(m, shifts, rng, j, uj, flux - flux * w, leaves - left);
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_sweep(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo && n >= 2) {
        return Err(Error::domain(format!("log sweep needs 0 < lo < hi and n >= 2, got {lo}, {hi}, {n}")));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect())
}

/// Least squares fit of `y = slope x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// One cell of the uniform symmetric construction with `N` from
/// [`optimal_n`]: a single-square build in the box of side `L / N` with flux
/// `Phi / N^2`. The full `N x N` build is `N^2` translated copies of it, and
/// since the energy carries `L^-2` its value equals the full build's.
pub fn scaling_cell(phi: f64, l: f64, t: f64, depth: usize) -> Result<(usize, PolygonalMeasure)> {
    let n = optimal_n(phi, l, t);
    let nf = n as f64;
    let spec = BuildSpec::uniform(phi / (nf * nf), l / nf, t, Some(1), depth);
    Ok((n, build_symmetric(&spec)?.measure))
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingPoint {
    pub t: f64,
    pub n: usize,
    pub raw_energy: f64,
    pub opt_energy: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRun {
    pub phi: f64,
    pub l: f64,
    pub depth: usize,
    pub points: Vec<ScalingPoint>,
    /// Fit of `ln I = slope ln T + ln intercept` on the raw energies.
    pub slope: f64,
    pub intercept: f64,
    /// Set when some point has `N < 2`, outside the `T^{1/3}` regime.
    pub regime_warning: bool,
}

impl ScalingRun {
    /// `T,N,raw_energy,opt_energy` rows followed by a `slope=` footer;
    /// `header` lines are written first as `#` comments.
    pub fn to_csv(&self, header: &[String]) -> String {
        let mut out: String = header.iter().map(|h| format!("# {h}\n")).collect();
        out.push_str("T,N,raw_energy,opt_energy\n");
        for p in &self.points {
            let opt = p.opt_energy.map(|e| format!("{e:.12e}")).unwrap_or_default();
            out.push_str(&format!("{:.12e},{},{:.12e},{opt}\n", p.t, p.n, p.raw_energy));
        }
        out.push_str(&format!("slope={:.6},intercept={:.6}\n", self.slope, self.intercept));
        out
    }
}

/// Energies of the symmetric construction over the sweep `ts`, optionally
/// locally optimized, with a log-log fit of the raw energies.
pub fn run_scaling(
    phi: f64,
    l: f64,
    ts: &[f64],
    depth: usize,
    optimize_with: Option<&OptimizeOptions>,
) -> Result<ScalingRun> {
    if ts.len() < 2 || ts.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::domain("scaling sweep needs at least two increasing T values"));
    }
    let points = ts
        .par_iter()
        .map(|&t| {
            let (n, cell) = scaling_cell(phi, l, t, depth)?;
            let raw = total_energy(&cell)?.total;
            let opt = match optimize_with {
                Some(o) => Some(optimize(&cell, o)?.energy()),
                None => None,
            };
            Ok(ScalingPoint { t, n, raw_energy: raw, opt_energy: opt })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = points.iter().map(|p| p.t.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.raw_energy.ln()).collect();
    let (slope, b) = linear_fit(&xs, &ys);
    let regime_warning = points.iter().any(|p| p.n < 2);
    Ok(ScalingRun { phi, l, depth, points, slope, intercept: b.exp(), regime_warning })
}

/// `(2 pi)^{-1/3}`, the lower bound for `(sum sqrt(phi_i))^{2/3} W_2^{2/3}`
/// over unit-mass atomic slices on the unit torus.
pub fn interpolation_constant() -> f64 {
    (2.0 * PI).powf(-1.0 / 3.0)
}

/// `(sum sqrt(phi_i))^{2/3} (W_2^2(a, Lebesgue))^{1/3}`.
pub fn interpolation_product(a: &DiracSlice, grid_m: usize) -> Result<f64> {
    Ok(a.sqrt_mass().powf(2.0 / 3.0) * w2_to_lebesgue(a, grid_m)?.cbrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct InterpolationReport {
    pub trials: usize,
    pub atoms_max: usize,
    pub grid_m: usize,
    pub seed: u64,
    pub min_product: f64,
    pub argmin_trial: usize,
    pub constant: f64,
}

/// Random unit-mass slices on the unit torus, each with a uniform number of
/// atoms in `1..=atoms_max`, flat Dirichlet weights and uniform positions.
/// Trial `i` draws from stream `i` of a ChaCha8 generator seeded with `seed`.
pub fn run_interpolation_check(
    trials: usize,
    atoms_max: usize,
    grid_m: usize,
    seed: u64,
) -> Result<InterpolationReport> {
    if trials == 0 || atoms_max == 0 {
        return Err(Error::domain("need at least one trial and one atom"));
    }
    let products = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let n = rng.random_range(1..=atoms_max);
            let w: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let s: f64 = w.iter().sum();
            let atoms = w
                .iter()
                .map(|wi| Atom { pos: TorusPoint::new(rng.random::<f64>(), rng.random::<f64>()), weight: wi / s })
                .collect();
            interpolation_product(&DiracSlice::merged(1.0, atoms, 1e-12), grid_m)
        })
        .collect::<Result<Vec<_>>>()?;
    let (argmin, min) =
        products.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &p)| if p < acc.1 { (i, p) } else { acc });
    Ok(InterpolationReport {
        trials,
        atoms_max,
        grid_m,
        seed,
        min_product: min,
        argmin_trial: argmin,
        constant: interpolation_constant(),
    })
}

/// For a nonincreasing positive sequence with `c0 = sum gamma` and
/// `C0 = sum sqrt(gamma)`, the margins
/// `sum_{i <= N} gamma_i - (c0 - C0 sqrt(c0 / N))` for `N = 1..=len`.
pub fn lemsqrt_margins(gamma: &[f64]) -> Vec<f64> {
    let c0: f64 = gamma.iter().sum();
    let big_c0: f64 = gamma.iter().map(|g| g.sqrt()).sum();
    let mut partial = 0.0;
    gamma
        .iter()
        .enumerate()
        .map(|(i, g)| {
            partial += g;
            partial - (c0 - big_c0 * (c0 / (i + 1) as f64).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LemsqrtReport {
    pub trials: usize,
    pub seed: u64,
    pub inequalities: usize,
    pub violations: usize,
    /// Smallest margin relative to `c0`.
    pub min_relative_margin: f64,
}

/// Random nonincreasing sequences of length `1..=200` drawn from
/// exponential, power-law and two-level distributions with random total.
pub fn lemsqrt_check(trials: usize, seed: u64) -> LemsqrtReport {
    let results: Vec<(usize, usize, f64)> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let n = rng.random_range(1..=200usize);
            let scale = rng.random_range(1e-3..1e3);
            let mut g: Vec<f64> = match i % 3 {
                0 => (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect(),
                1 => {
                    let p = rng.random_range(0.1..4.0);
                    (0..n).map(|_| rng.random_range(1e-6..1.0f64).powf(p)).collect()
                }
                _ => {
                    let k = rng.random_range(1..=n);
                    let small = rng.random_range(1e-6..1.0);
                    (0..n).map(|j| if j < k { 1.0 } else { small }).collect()
                }
            };
            g.iter_mut().for_each(|v| *v *= scale);
            g.sort_by(|a, b| b.total_cmp(a));
            let c0: f64 = g.iter().sum();
            let margins = lemsqrt_margins(&g);
            let bad = margins.iter().filter(|&&m| m < -1e-12 * c0).count();
            let min = margins.iter().fold(f64::INFINITY, |a, &m| a.min(m / c0));
            (margins.len(), bad, min)
        })
        .collect();
    LemsqrtReport {
        trials,
        seed,
        inequalities: results.iter().map(|r| r.0).sum(),
        violations: results.iter().map(|r| r.1).sum(),
        min_relative_margin: results.iter().map(|r| r.2).fold(f64::INFINITY, f64::min),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HolderRun {
    pub constructed: usize,
    pub optimized: usize,
    pub pairs_per_measure: usize,
    pub seed: u64,
    pub checks: usize,
    pub violations: usize,
    pub min_margin: f64,
}

/// Slice pairs drawn uniformly from the height range of the support.
fn random_pairs(m: &PolygonalMeasure, count: usize, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    let hs = m.node_heights();
    let lo = hs.iter().copied().fold(f64::INFINITY, f64::min).max(-m.t);
    let hi = hs.iter().copied().fold(f64::NEG_INFINITY, f64::max).min(m.t);
    let eps = 1e-9 * m.t;
    (0..count).map(|_| (rng.random_range(lo + eps..hi - eps), rng.random_range(lo + eps..hi - eps))).collect()
}

/// `W_2^2(mu_z, mu_z~) <= L^2 I(mu) |z - z~|` on `constructed` symmetric
/// builds with varying `(Phi, L, T, N, depth)` and `optimized` local minima
/// of random trees, `pairs` slice pairs each.
pub fn run_holder_check(constructed: usize, optimized: usize, pairs: usize, seed: u64) -> Result<HolderRun> {
    let reports = (0..constructed + optimized)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let m = if i < constructed {
                let phi = [1.0, 2.0, 0.5][i % 3];
                let l = [1.0, 2.0][i % 2];
                let t = [1.0, 0.5, 0.25, 2.0][i % 4];
                let n = 1 + i % 3;
                let depth = 1 + (i / 3) % 3;
                build_symmetric(&BuildSpec::uniform(phi, l, t, Some(n), depth))?.measure
            } else {
                let leaves = rng.random_range(2..=6);
                let tree = random_tree(1.0, 1.0, leaves, &mut rng);
                optimize(&tree, &OptimizeOptions::default())?.measure
            };
            let energy = total_energy(&m)?.total;
            holder_check(&m, energy, &random_pairs(&m, pairs, &mut rng))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HolderRun {
        constructed,
        optimized,
        pairs_per_measure: pairs,
        seed,
        checks: reports.iter().map(|r| r.entries.len()).sum(),
        violations: reports.iter().map(|r| r.violations()).sum(),
        min_margin: reports.iter().map(|r| r.min_margin()).fold(f64::INFINITY, f64::min),
    })
}

/// A rayon pool capped by `BRANCHFLOW_THREADS` when it is set to a positive
/// integer.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("BRANCHFLOW_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::domain(format!("cannot start worker pool: {e}")))
}
