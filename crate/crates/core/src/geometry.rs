//! Periodic geometry of the horizontal cross-section `R^2 / L Z^2`.

use serde::{Deserialize, Serialize};

/// A point of the flat torus of side `L`. The side length is carried by the
/// context (the owning measure or slice), not by the point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    pub x: f64,
    pub y: f64,
}

impl TorusPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Canonical representative with both coordinates in `[0, L)`.
    pub fn wrapped(self, l: f64) -> Self {
        Self::new(wrap_coord(self.x, l).0, wrap_coord(self.y, l).0)
    }

    /// Like [`TorusPoint::wrapped`], also returning the integer lattice shift
    /// `k` such that `self = wrapped + k L`.
    pub fn wrap_with_shift(self, l: f64) -> (Self, [i32; 2]) {
        let (x, kx) = wrap_coord(self.x, l);
        let (y, ky) = wrap_coord(self.y, l);
        (Self::new(x, y), [kx, ky])
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Reduce `v` into `[0, l)`, returning the representative and the number of
/// periods removed. Values that round up to `l` are snapped to `0`.
pub fn wrap_coord(v: f64, l: f64) -> (f64, i32) {
    let k = (v / l).floor();
    let mut r = v - k * l;
    let mut k = k as i32;
    if r >= l {
        r -= l;
        k += 1;
    }
    if r < 0.0 {
        r = 0.0;
    }
    (r, k)
}

/// Minimum-image displacement `q - p` on the torus, componentwise in
/// `[-L/2, L/2]`.
pub fn min_image(p: TorusPoint, q: TorusPoint, l: f64) -> [f64; 2] {
    let f = |d: f64| d - l * (d / l).round();
    [f(q.x - p.x), f(q.y - p.y)]
}

/// Periodic distance `min_k |p - q + L k|`, searched over the nine nearest
/// lattice shifts of the canonical representatives.
pub fn torus_distance(p: TorusPoint, q: TorusPoint, l: f64) -> f64 {
    torus_distance_sq(p, q, l).sqrt()
}

pub fn torus_distance_sq(p: TorusPoint, q: TorusPoint, l: f64) -> f64 {
    let a = p.wrapped(l);
    let b = q.wrapped(l);
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let mut best = f64::INFINITY;
    for kx in -1..=1 {
        for ky in -1..=1 {
            let ex = dx + kx as f64 * l;
            let ey = dy + ky as f64 * l;
            best = best.min(ex * ex + ey * ey);
        }
    }
    best
}
