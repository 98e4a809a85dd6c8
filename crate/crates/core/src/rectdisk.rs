//! A unit-determinant map morphing a `w x h` rectangle into the disk of the
//! same area as the height runs from `z_minus` to `z_plus`.
//!
//! In normalized coordinates (center at the origin, area `pi`, height
//! `t in [0, 1]`) the map is `P_t o diag(g, 1/g)` where `g` interpolates from
//! 1 to `sqrt(h/w)` and `P_t` acts on the sector `0 <= theta <= pi/4` by
//! `r -> r lambda cos(t theta)`, `theta -> tan(t theta) / (t lambda^2)`, and
//! on the rest of the plane by the symmetries of the square.

use std::f64::consts::{FRAC_PI_4, PI};

use serde::Serialize;

use crate::error::{Error, Result};

pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RectDiskParams {
    pub center: [f64; 2],
    pub w: f64,
    pub h: f64,
    pub z_minus: f64,
    pub z_plus: f64,
}

impl RectDiskParams {
    pub fn new(center: [f64; 2], w: f64, h: f64, z_minus: f64, z_plus: f64) -> Result<Self> {
        let ok = [w, h, z_minus, z_plus, center[0], center[1]].iter().all(|v| v.is_finite())
            && w > 0.0
            && h > 0.0
            && z_minus < z_plus
            && (w / h + h / w).is_finite();
        if !ok {
            return Err(Error::domain(format!(
                "rectangle needs w, h > 0 and z_minus < z_plus, got w={w}, h={h}, z=[{z_minus}, {z_plus}]"
            )));
        }
        Ok(Self { center, w, h, z_minus, z_plus })
    }

    /// `w/h + h/w`.
    pub fn aspect(&self) -> f64 {
        self.w / self.h + self.h / self.w
    }

    fn scale(&self) -> f64 {
        (PI / (self.w * self.h)).sqrt()
    }

    fn height(&self, x3: f64) -> Result<f64> {
        if !(x3 >= self.z_minus && x3 <= self.z_plus) {
            return Err(Error::domain(format!("height {x3} outside [{}, {}]", self.z_minus, self.z_plus)));
        }
        Ok((x3 - self.z_minus) / (self.z_plus - self.z_minus))
    }

    fn g(&self, t: f64) -> f64 {
        (1.0 - t) + (self.h / self.w).sqrt() * t
    }
}

/// `lambda(t) = sqrt(tan(pi t / 4) / (pi t / 4))`, with `lambda(0) = 1`.
pub fn lambda(t: f64) -> f64 {
    let a = FRAC_PI_4 * t;
    if a.abs() < 1e-4 {
        // tan(a)/a = 1 + a^2/3 + 2a^4/15
        (1.0 + a * a / 3.0 + 2.0 * a.powi(4) / 15.0).sqrt()
    } else {
        (a.tan() / a).sqrt()
    }
}

/// Angular part of the sector map, `tan(t theta) / (t lambda(t)^2)`.
pub fn sector_angle(theta: f64, t: f64) -> f64 {
    let l2 = lambda(t).powi(2);
    if t.abs() < 1e-8 {
        theta / l2
    } else {
        (t * theta).tan() / (t * l2)
    }
}

fn sector_angle_inverse(phi: f64, t: f64) -> f64 {
    let l2 = lambda(t).powi(2);
    if t.abs() < 1e-8 {
        phi * l2
    } else {
        (phi * t * l2).atan() / t
    }
}

/// An element of the symmetry group of the square, taking a point into the
/// sector `0 <= y <= x`.
#[derive(Clone, Copy)]
struct Sym {
    sx: f64,
    sy: f64,
    swap: bool,
}

impl Sym {
    fn reducing(p: [f64; 2]) -> Self {
        Sym {
            sx: if p[0] < 0.0 { -1.0 } else { 1.0 },
            sy: if p[1] < 0.0 { -1.0 } else { 1.0 },
            swap: p[1].abs() > p[0].abs(),
        }
    }

    fn apply(self, p: [f64; 2]) -> [f64; 2] {
        let q = [self.sx * p[0], self.sy * p[1]];
        if self.swap {
            [q[1], q[0]]
        } else {
            q
        }
    }

    fn undo(self, p: [f64; 2]) -> [f64; 2] {
        let q = if self.swap { [p[1], p[0]] } else { p };
        [self.sx * q[0], self.sy * q[1]]
    }

    fn matrix(self) -> Mat2 {
        let m = [[self.sx, 0.0], [0.0, self.sy]];
        if self.swap {
            [m[1], m[0]]
        } else {
            m
        }
    }
}

fn polar(p: [f64; 2], t: f64) -> [f64; 2] {
    let s = Sym::reducing(p);
    let q = s.apply(p);
    let r = q[0].hypot(q[1]);
    let theta = q[1].atan2(q[0]);
    let rh = r * lambda(t) * (t * theta).cos();
    let th = sector_angle(theta, t);
    s.undo([rh * th.cos(), rh * th.sin()])
}

fn polar_inverse(p: [f64; 2], t: f64) -> [f64; 2] {
    let s = Sym::reducing(p);
    let q = s.apply(p);
    let rh = q[0].hypot(q[1]);
    let theta = sector_angle_inverse(q[1].atan2(q[0]), t);
    let r = rh / (lambda(t) * (t * theta).cos());
    s.undo([r * theta.cos(), r * theta.sin()])
}

fn polar_jacobian(p: [f64; 2], t: f64) -> Mat2 {
    let s = Sym::reducing(p);
    let q = s.apply(p);
    let theta = if q == [0.0, 0.0] { 0.0 } else { q[1].atan2(q[0]) };
    let lam = lambda(t);
    let c = lam * (t * theta).cos();
    let dc = -lam * t * (t * theta).sin();
    let df = 1.0 / ((t * theta).cos().powi(2) * lam * lam);
    let th = sector_angle(theta, t);
    // rotate into polar frame, differentiate, rotate back
    let inner = [[c, dc], [0.0, c * df]];
    let rot = |a: f64| [[a.cos(), -a.sin()], [a.sin(), a.cos()]];
    let rt = rot(-theta);
    let j = mul(rot(th), mul(inner, rt));
    let sm = s.matrix();
    mul(transpose(sm), mul(j, sm))
}

fn mul(a: Mat2, b: Mat2) -> Mat2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn transpose(a: Mat2) -> Mat2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

pub fn det(a: Mat2) -> f64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

/// Image of `x` at height `x3`.
pub fn rect_disk_map(p: &RectDiskParams, x: [f64; 2], x3: f64) -> Result<[f64; 2]> {
    let t = p.height(x3)?;
    let (s, g) = (p.scale(), p.g(t));
    let n = [s * (x[0] - p.center[0]) * g, s * (x[1] - p.center[1]) / g];
    let y = polar(n, t);
    Ok([p.center[0] + y[0] / s, p.center[1] + y[1] / s])
}

/// Jacobian of [`rect_disk_map`] in the plane variables. At the center,
/// where it depends on direction, the limit along the first axis is
/// returned.
pub fn map_jacobian(p: &RectDiskParams, x: [f64; 2], x3: f64) -> Result<Mat2> {
    let t = p.height(x3)?;
    let (s, g) = (p.scale(), p.g(t));
    let n = [s * (x[0] - p.center[0]) * g, s * (x[1] - p.center[1]) / g];
    Ok(mul(polar_jacobian(n, t), [[g, 0.0], [0.0, 1.0 / g]]))
}

/// Inverse of [`rect_disk_map`] at height `y3`.
pub fn rect_disk_inverse(p: &RectDiskParams, y: [f64; 2], y3: f64) -> Result<[f64; 2]> {
    let t = p.height(y3)?;
    if !(y[0].is_finite() && y[1].is_finite()) {
        return Err(Error::domain("point is not finite"));
    }
    let (s, g) = (p.scale(), p.g(t));
    let n = polar_inverse([s * (y[0] - p.center[0]), s * (y[1] - p.center[1])], t);
    Ok([p.center[0] + n[0] / (s * g), p.center[1] + n[1] * g / s])
}

#[derive(Debug, Clone, Serialize)]
pub struct MapCheck {
    pub samples: usize,
    pub max_det_error: f64,
    pub max_fd_error: f64,
    pub max_roundtrip_error: f64,
    pub max_boundary_error: f64,
    pub max_plane_lipschitz: f64,
    pub max_height_lipschitz: f64,
}

/// Samples the map at `samples` points of the rectangle at each of the
/// heights `t in {0, 0.3, 0.7, 1}` and measures the determinant, the
/// agreement of the analytic and finite-difference Jacobians, the round
/// trip, the image of the boundary at the top and the Lipschitz constants.
pub fn map_check(p: &RectDiskParams, samples: usize, rng: &mut impl rand::Rng) -> Result<MapCheck> {
    let mut out = MapCheck {
        samples,
        max_det_error: 0.0,
        max_fd_error: 0.0,
        max_roundtrip_error: 0.0,
        max_boundary_error: 0.0,
        max_plane_lipschitz: 0.0,
        max_height_lipschitz: 0.0,
    };
    let dz = p.z_plus - p.z_minus;
    let size = p.w.max(p.h);
    for t in [0.0, 0.3, 0.7, 1.0] {
        let x3 = p.z_minus + t * dz;
        for _ in 0..samples {
            let x = [p.center[0] + p.w * (rng.random::<f64>() - 0.5), p.center[1] + p.h * (rng.random::<f64>() - 0.5)];
            let j = map_jacobian(p, x, x3)?;
            let e = 1e-6 * size;
            let (s, g) = (p.scale(), p.g(t));
            let n = [s * (x[0] - p.center[0]) * g, s * (x[1] - p.center[1]) / g];
            // the Jacobian jumps across the diagonals, so skip stencils crossing one
            let near_diagonal = (n[0].abs() - n[1].abs()).abs() < 10.0 * s * e * g.max(1.0 / g);
            out.max_det_error = out.max_det_error.max((det(j) - 1.0).abs());
            let mut fd_err: f64 = 0.0;
            for k in (0..2).filter(|_| !near_diagonal) {
                let (mut a, mut b) = (x, x);
                a[k] += e;
                b[k] -= e;
                let (ua, ub) = (rect_disk_map(p, a, x3)?, rect_disk_map(p, b, x3)?);
                for i in 0..2 {
                    let fd = (ua[i] - ub[i]) / (2.0 * e);
                    fd_err = fd_err.max((fd - j[i][k]).abs());
                }
            }
            let jnorm = j.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            out.max_fd_error = out.max_fd_error.max(fd_err / jnorm.max(1.0));
            out.max_plane_lipschitz = out.max_plane_lipschitz.max(jnorm);

            let y = rect_disk_map(p, x, x3)?;
            let back = rect_disk_inverse(p, y, x3)?;
            let rt = (back[0] - x[0]).hypot(back[1] - x[1]);
            out.max_roundtrip_error = out.max_roundtrip_error.max(rt / size.max(1.0));

            let ez = 1e-6 * dz;
            let (lo, hi) = ((x3 - ez).max(p.z_minus), (x3 + ez).min(p.z_plus));
            let (ul, uh) = (rect_disk_map(p, x, lo)?, rect_disk_map(p, x, hi)?);
            let d3 = (uh[0] - ul[0]).hypot(uh[1] - ul[1]) / (hi - lo);
            out.max_height_lipschitz = out.max_height_lipschitz.max(d3 * dz / p.h);
        }
    }
    let radius = (p.w * p.h / PI).sqrt();
    for _ in 0..samples {
        let u = rng.random::<f64>() - 0.5;
        let side = rng.random_range(0..4);
        let x = match side {
            0 => [p.w / 2.0, u * p.h],
            1 => [-p.w / 2.0, u * p.h],
            2 => [u * p.w, p.h / 2.0],
            _ => [u * p.w, -p.h / 2.0],
        };
        let y = rect_disk_map(p, [p.center[0] + x[0], p.center[1] + x[1]], p.z_plus)?;
        let r = (y[0] - p.center[0]).hypot(y[1] - p.center[1]);
        out.max_boundary_error = out.max_boundary_error.max((r - radius).abs());
    }
    Ok(out)
}
