//! Exact evaluation of the limit functional on polygonal measures.
//!
//! Each segment with flux `phi`, height span `dz` and unwrapped horizontal
//! displacement `dX` contributes
//!
//! ```text
//! (K* sqrt(phi) dz + phi |dX|^2 / dz) / L^2
//! ```

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::{pairwise_sum, validate, PolygonalMeasure, Segment};

/// Optimal wall energy `8 sqrt(pi) / 3`.
pub const K_STAR: f64 = 16.0 / (3.0 * std::f64::consts::FRAC_2_SQRT_PI);

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentEnergy {
    pub segment: usize,
    pub perimeter: f64,
    pub transport: f64,
}

impl SegmentEnergy {
    pub fn total(&self) -> f64 {
        self.perimeter + self.transport
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub perimeter: f64,
    pub transport: f64,
    pub per_segment: Vec<SegmentEnergy>,
}

impl EnergyBreakdown {
    fn from_parts(per_segment: Vec<SegmentEnergy>) -> Self {
        let perimeter = pairwise_sum(&per_segment.iter().map(|s| s.perimeter).collect::<Vec<_>>());
        let transport = pairwise_sum(&per_segment.iter().map(|s| s.transport).collect::<Vec<_>>());
        Self { total: perimeter + transport, perimeter, transport, per_segment }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("energy serialization cannot fail")
    }
}

/// Perimeter and transport parts for flux `phi` over height `dz` with squared
/// horizontal displacement `d2`, in a box of width `l`.
#[inline]
pub fn segment_terms(phi: f64, dz: f64, d2: f64, l: f64) -> (f64, f64) {
    let inv = 1.0 / (l * l);
    let transport = if d2 == 0.0 { 0.0 } else { phi * d2 / dz * inv };
    (K_STAR * phi.sqrt() * dz * inv, transport)
}

pub fn segment_energy(m: &PolygonalMeasure, index: usize) -> Result<SegmentEnergy> {
    let s = m.segments.get(index).ok_or_else(|| Error::domain(format!("no segment {index}")))?;
    let dz = m.dz(s);
    if !(dz > 0.0) {
        return Err(Error::domain(format!("segment {index} has non-positive height span {dz}")));
    }
    Ok(terms_of(m, index, s))
}

fn terms_of(m: &PolygonalMeasure, index: usize, s: &Segment) -> SegmentEnergy {
    let d = m.displacement(s);
    let (perimeter, transport) = segment_terms(s.flux, m.dz(s), d[0] * d[0] + d[1] * d[1], m.l);
    SegmentEnergy { segment: index, perimeter, transport }
}

/// `I(mu)` of an admissible measure; an invalid measure yields
/// [`Error::Invalid`] with the full report.
pub fn total_energy(m: &PolygonalMeasure) -> Result<EnergyBreakdown> {
    let report = validate(m);
    if !report.is_empty() {
        return Err(Error::Invalid(report));
    }
    raw_energy(m)
}

/// Sums the segment energies without the admissibility check. Only requires
/// every segment to point upward; superimposed segments are counted
/// separately.
pub fn raw_energy(m: &PolygonalMeasure) -> Result<EnergyBreakdown> {
    let per_segment = m.segments.iter().enumerate().map(|(i, _)| segment_energy(m, i)).collect::<Result<Vec<_>>>()?;
    Ok(EnergyBreakdown::from_parts(per_segment))
}

/// Energy of the restriction to `Q_L x [z1, z2]`; segments crossing either
/// plane are cut proportionally.
pub fn energy_between(m: &PolygonalMeasure, z1: f64, z2: f64) -> Result<EnergyBreakdown> {
    if !(z1 < z2) {
        return Err(Error::domain(format!("energy window needs z1 < z2, got [{z1}, {z2}]")));
    }
    let mut per_segment = Vec::new();
    for (i, s) in m.segments.iter().enumerate() {
        let full = segment_energy(m, i)?;
        let (zt, zh) = (m.nodes[s.tail].z, m.nodes[s.head].z);
        let lo = zt.max(z1);
        let hi = zh.min(z2);
        if hi <= lo {
            continue;
        }
        // both terms are linear in the covered height
        let f = if lo == zt && hi == zh { 1.0 } else { (hi - lo) / (zh - zt) };
        per_segment.push(SegmentEnergy { segment: i, perimeter: full.perimeter * f, transport: full.transport * f });
    }
    Ok(EnergyBreakdown::from_parts(per_segment))
}

/// `K* sqrt(Phi) H / L^2`, where `Phi` is the flux leaving the sources and
/// `H` the height extent of the support (`2T` for measures spanning the
/// box). Bounds the perimeter term from below whenever every slice in that
/// range carries `Phi`.
pub fn subadditive_lower_bound(m: &PolygonalMeasure) -> f64 {
    if m.segments.is_empty() {
        return 0.0;
    }
    let (lo, hi) = m
        .segments
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(m.nodes[s.tail].z), hi.max(m.nodes[s.head].z)));
    K_STAR * m.total_flux().sqrt() * (hi - lo) / (m.l * m.l)
}
