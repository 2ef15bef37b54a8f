//! Dynamical systems on the circle and the two-torus, with their hyperbolicity data.
//!
//! [`ExpandingMap1D`] is a degree-`k` circle map `x -> k x + a s(x) mod 1`.
//! [`ToralMap`] is a unimodular integer matrix plus a small trigonometric
//! vector-field perturbation, `x -> A x + eps g(x) mod 1`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{line_angle, normalize, wrap, wrap_delta};

/// Resolution of the grid on which `inf |T'|`, `H` and invertibility are checked.
pub const EVAL_GRID: usize = 4096;

/// Grid resolution of the cone certificate for toral maps.
pub const CONE_GRID: usize = 256;

const BRANCH_TOL: f64 = 1e-12;

/// Periodic perturbation profile `s` for circle maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape1D {
    /// `sin(2 pi f x)`
    Sin { freq: u32 },
    /// `cos(2 pi f x)`
    Cos { freq: u32 },
    /// `sgn(sin 2 pi x) |sin 2 pi x|^(1 + e) / (2 pi (1 + e))`, whose derivative
    /// `|sin 2 pi x|^e cos 2 pi x` is only `e`-Hölder.
    HolderSin { exponent: f64 },
}

impl Shape1D {
    fn value(&self, x: f64) -> f64 {
        match *self {
            Shape1D::Sin { freq } => (2.0 * PI * freq as f64 * x).sin(),
            Shape1D::Cos { freq } => (2.0 * PI * freq as f64 * x).cos(),
            Shape1D::HolderSin { exponent } => {
                let s = (2.0 * PI * x).sin();
                s.signum() * s.abs().powf(1.0 + exponent) / (2.0 * PI * (1.0 + exponent))
            }
        }
    }

    fn derivative(&self, x: f64) -> f64 {
        match *self {
            Shape1D::Sin { freq } => {
                let w = 2.0 * PI * freq as f64;
                w * (w * x).cos()
            }
            Shape1D::Cos { freq } => {
                let w = 2.0 * PI * freq as f64;
                -w * (w * x).sin()
            }
            Shape1D::HolderSin { exponent } => {
                (2.0 * PI * x).sin().abs().powf(exponent) * (2.0 * PI * x).cos()
            }
        }
    }

    /// `sup |s''|`, available for the smooth shapes only.
    fn sup_second_derivative(&self) -> Option<f64> {
        match *self {
            Shape1D::Sin { freq } | Shape1D::Cos { freq } => Some((2.0 * PI * freq as f64).powi(2)),
            Shape1D::HolderSin { .. } => None,
        }
    }

    /// Hölder exponent of the derivative.
    fn derivative_exponent(&self) -> f64 {
        match *self {
            Shape1D::HolderSin { exponent } => exponent.min(1.0),
            _ => 1.0,
        }
    }
}

/// Uniformly expanding circle map of class `C^{1+alpha}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandingMap1D {
    pub degree: u32,
    pub amplitude: f64,
    pub shape: Shape1D,
    /// `1 / inf |T'|`.
    pub lambda: f64,
    /// Hölder exponent of `T'`.
    pub alpha: f64,
    /// Distortion constant: `|T'(x)| <= |T'(y)| exp(H d(x, y)^alpha)`.
    pub distortion: f64,
}

/// Build a circle map and compute its contraction and distortion constants.
pub fn make_expanding_map(degree: i64, amplitude: f64, shape: Shape1D) -> Result<ExpandingMap1D> {
    if degree < 1 {
        return Err(Error::InvalidDegree(degree));
    }
    if !amplitude.is_finite() {
        return Err(Error::InvalidInput(format!("amplitude {amplitude}")));
    }
    if let Shape1D::HolderSin { exponent } = shape {
        if !(exponent > 0.0 && exponent <= 1.0) {
            return Err(Error::InvalidInput(format!("Hölder exponent {exponent} not in (0, 1]")));
        }
    }
    let mut map = ExpandingMap1D {
        degree: degree as u32,
        amplitude,
        shape,
        lambda: 0.0,
        alpha: if amplitude == 0.0 { 1.0 } else { shape.derivative_exponent() },
        distortion: 0.0,
    };
    let inf = (0..EVAL_GRID)
        .map(|i| map.derivative(i as f64 / EVAL_GRID as f64))
        .fold(f64::INFINITY, f64::min);
    if !(inf > 1.0) {
        return Err(Error::NotExpanding { inf_derivative: inf });
    }
    map.lambda = 1.0 / inf;
    map.distortion = if amplitude == 0.0 {
        0.0
    } else if let (Some(s2), true) = (shape.sup_second_derivative(), map.alpha == 1.0) {
        amplitude.abs() * s2 / inf
    } else {
        dyadic_log_holder(|x| map.derivative(x).ln(), map.alpha, 3..=12, 1024)
    };
    Ok(map)
}

/// Max over dyadic scales `2^-j` and `base_points` equally spaced base points of
/// `|f(x + 2^-j) - f(x)| / 2^{-j alpha}`.
pub(crate) fn dyadic_log_holder<F: Fn(f64) -> f64 + Sync>(
    f: F,
    alpha: f64,
    scales: std::ops::RangeInclusive<u32>,
    base_points: usize,
) -> f64 {
    scales
        .map(|j| {
            let s = 0.5f64.powi(j as i32);
            let denom = s.powf(alpha);
            (0..base_points)
                .map(|b| {
                    let x = b as f64 / base_points as f64;
                    (f(wrap(x + s)) - f(x)).abs() / denom
                })
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

impl ExpandingMap1D {
    /// Lift `F(x) = k x + a s(x)`, increasing with `F(x + 1) = F(x) + k`.
    #[inline]
    pub fn lift(&self, x: f64) -> f64 {
        self.degree as f64 * x + self.amplitude * self.shape.value(x)
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        wrap(self.lift(x))
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        self.degree as f64 + self.amplitude * self.shape.derivative(x)
    }

    /// `lambda^alpha`.
    pub fn lambda_alpha(&self) -> f64 {
        self.lambda.powf(self.alpha)
    }

    /// Solve `F(z) = target` for `z` in `[lo, hi]`, where `F` is increasing.
    fn solve_lift(&self, target: f64, mut lo: f64, mut hi: f64, x: f64) -> Result<f64> {
        let mut z = 0.5 * (lo + hi);
        for _ in 0..200 {
            let r = self.lift(z) - target;
            if r.abs() <= BRANCH_TOL {
                return Ok(z);
            }
            if r > 0.0 {
                hi = z;
            } else {
                lo = z;
            }
            let newton = z - r / self.derivative(z);
            z = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if hi - lo < 1e-16 {
                break;
            }
        }
        let r = self.lift(z) - target;
        if r.abs() <= BRANCH_TOL {
            Ok(z)
        } else {
            Err(Error::BranchSolveFailure { x })
        }
    }

    /// The `k` preimages of `x`, ordered by their lift coordinate in `[0, 1)`.
    pub fn inverse_branches(&self, x: f64) -> Result<Vec<f64>> {
        let x = wrap(x);
        let f0 = self.lift(0.0);
        let m0 = (f0 - x).ceil();
        (0..self.degree)
            .map(|i| {
                let target = x + m0 + i as f64;
                let z = self.solve_lift(target, 0.0, 1.0, x)?;
                Ok(if z >= 1.0 { z - 1.0 } else { z })
            })
            .collect()
    }

    /// Preimages of `x` and `y` paired branch by branch, so that
    /// `d(x_i, y_i) <= lambda d(x, y)`.
    ///
    /// The `y` preimages are obtained by continuing each `x` branch along the
    /// shortest arc from `x` to `y`.
    pub fn paired_branches(&self, x: f64, y: f64) -> Result<Vec<(f64, f64)>> {
        let x = wrap(x);
        let delta = wrap_delta(y - x);
        let f0 = self.lift(0.0);
        let m0 = (f0 - x).ceil();
        let reach = self.lambda * delta.abs() + 1e-12;
        (0..self.degree)
            .map(|i| {
                let target = x + m0 + i as f64;
                let zx = self.solve_lift(target, 0.0, 1.0, x)?;
                let zy = self.solve_lift(target + delta, zx - reach, zx + reach, y)?;
                Ok((wrap(zx), wrap(zy)))
            })
            .collect()
    }
}

/// One term `coef * trig(2 pi (p x + q y))` of a perturbation vector field,
/// acting on `component` (0 for the first coordinate, 1 for the second).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub component: usize,
    pub sine: bool,
    pub freq: [i32; 2],
    pub coef: f64,
}

/// Truncated trigonometric vector field on the torus.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Shape2D {
    pub terms: Vec<TrigTerm>,
}

impl Shape2D {
    /// `(sin 2 pi y, 0)`.
    pub fn sin_y() -> Self {
        Shape2D {
            terms: vec![TrigTerm {
                component: 0,
                sine: true,
                freq: [0, 1],
                coef: 1.0,
            }],
        }
    }

    pub fn value(&self, p: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for t in &self.terms {
            let phase = 2.0 * PI * (t.freq[0] as f64 * p[0] + t.freq[1] as f64 * p[1]);
            out[t.component] += t.coef * if t.sine { phase.sin() } else { phase.cos() };
        }
        out
    }

    /// Jacobian, row-major `[[d g0/dx, d g0/dy], [d g1/dx, d g1/dy]]`.
    pub fn jacobian(&self, p: [f64; 2]) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for t in &self.terms {
            let phase = 2.0 * PI * (t.freq[0] as f64 * p[0] + t.freq[1] as f64 * p[1]);
            let d = if t.sine { phase.cos() } else { -phase.sin() };
            out[t.component][0] += t.coef * d * 2.0 * PI * t.freq[0] as f64;
            out[t.component][1] += t.coef * d * 2.0 * PI * t.freq[1] as f64;
        }
        out
    }

    /// `sup |g|` (Euclidean) over the torus, bounded by summing coefficients per component.
    pub fn sup_bound(&self) -> f64 {
        let mut c = [0.0f64; 2];
        for t in &self.terms {
            c[t.component] += t.coef.abs();
        }
        c[0].hypot(c[1])
    }
}

pub type Mat2 = [[f64; 2]; 2];

#[inline]
pub fn mat_vec(m: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

#[inline]
pub fn mat_inv(m: &Mat2) -> Mat2 {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
}

/// Hyperbolic toral map `x -> A x + eps g(x) mod 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToralMap {
    pub matrix: [[i64; 2]; 2],
    pub epsilon: f64,
    pub shape: Shape2D,
    pub lambda_u: f64,
    pub lambda_s: f64,
    /// Unit unstable eigendirection of the linear part, first component >= 0.
    pub e_u: [f64; 2],
    /// Unit stable eigendirection of the linear part, first component >= 0.
    pub e_s: [f64; 2],
    /// Grid-minimum of `|DT e_s|` over the computed stable field, less a 1% margin.
    pub lambda0: f64,
    /// Grid-maximum of `|DT e_s|`; the stable contraction in the working metric.
    pub stable_contraction: f64,
    /// Cone certificate on the [`CONE_GRID`] grid.
    pub cone: ConeField,
}

/// Field of cones around the unstable direction.
///
/// The cone at every cell is centred on the linear unstable direction; only the
/// certificate is resolved per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeField {
    pub grid: usize,
    pub center_angle: f64,
    pub half_aperture: f64,
    /// Worst ratio (image half-angle / aperture) over the grid.
    pub worst_ratio: f64,
    pub strongly_preserved: bool,
}

impl ConeField {
    /// Whether a direction lies in the cone (the cone is the same at every point).
    pub fn contains(&self, dir: [f64; 2]) -> bool {
        let c = [self.center_angle.cos(), self.center_angle.sin()];
        line_angle(c, dir) < self.half_aperture
    }

    pub fn center(&self) -> [f64; 2] {
        [self.center_angle.cos(), self.center_angle.sin()]
    }
}

const CONE_MARGIN: f64 = 0.95;

pub fn make_toral_map(matrix: [[i64; 2]; 2], epsilon: f64, shape: Shape2D) -> Result<ToralMap> {
    let det = matrix[0][0] * matrix[1][1] - matrix[0][1] * matrix[1][0];
    if det.abs() != 1 {
        return Err(Error::NotUnimodular(det));
    }
    let trace = matrix[0][0] + matrix[1][1];
    if trace.abs() <= 2 {
        return Err(Error::NotHyperbolic { trace_abs: trace.abs() });
    }
    let (tr, d) = (trace as f64, det as f64);
    let disc = (tr * tr - 4.0 * d).sqrt();
    let mu_big = if tr > 0.0 { (tr + disc) / 2.0 } else { (tr - disc) / 2.0 };
    let mu_small = d / mu_big;
    let a = matrix.map(|r| r.map(|v| v as f64));
    let e_u = eigvec(&a, mu_big);
    let e_s = eigvec(&a, mu_small);

    let mut map = ToralMap {
        matrix,
        epsilon,
        shape,
        lambda_u: mu_big.abs(),
        lambda_s: mu_small.abs(),
        e_u,
        e_s,
        lambda0: mu_small.abs(),
        stable_contraction: mu_small.abs(),
        cone: ConeField {
            grid: CONE_GRID,
            center_angle: e_u[1].atan2(e_u[0]),
            half_aperture: 0.0,
            worst_ratio: 0.0,
            strongly_preserved: false,
        },
    };

    let gap = line_angle(e_u, e_s);
    map.cone.half_aperture = (0.45 * gap).min(0.5);
    map.check_invertible()?;
    map.certify_cone()?;

    if epsilon != 0.0 {
        let fields = direction_fields(&map, 64, 40)?;
        let (lo, hi) = map.stable_norm_range(&fields.stable);
        map.lambda0 = 0.99 * lo;
        map.stable_contraction = hi;
    } else {
        map.lambda0 = 0.99 * map.lambda_s;
    }
    if map.stable_contraction >= 1.0 {
        return Err(Error::ConeViolation(format!(
            "stable direction not contracted: |DT e_s| up to {}",
            map.stable_contraction
        )));
    }
    Ok(map)
}

fn eigvec(a: &Mat2, mu: f64) -> [f64; 2] {
    // (A - mu) v = 0; pick the better-conditioned row.
    let r0 = [a[0][1], mu - a[0][0]];
    let r1 = [mu - a[1][1], a[1][0]];
    let v = if r0[0].hypot(r0[1]) >= r1[0].hypot(r1[1]) { r0 } else { r1 };
    let v = normalize(v);
    if v[0] < 0.0 || (v[0] == 0.0 && v[1] < 0.0) {
        [-v[0], -v[1]]
    } else {
        v
    }
}

impl ToralMap {
    pub fn linear(&self) -> Mat2 {
        self.matrix.map(|r| r.map(|v| v as f64))
    }

    /// The unwrapped image `A x + eps g(x)`.
    #[inline]
    pub fn lift(&self, p: [f64; 2]) -> [f64; 2] {
        let a = &self.matrix;
        let mut out = [
            a[0][0] as f64 * p[0] + a[0][1] as f64 * p[1],
            a[1][0] as f64 * p[0] + a[1][1] as f64 * p[1],
        ];
        if self.epsilon != 0.0 {
            let g = self.shape.value(p);
            out[0] += self.epsilon * g[0];
            out[1] += self.epsilon * g[1];
        }
        out
    }

    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let q = self.lift(p);
        [wrap(q[0]), wrap(q[1])]
    }

    #[inline]
    pub fn differential(&self, p: [f64; 2]) -> Mat2 {
        let mut m = self.linear();
        if self.epsilon != 0.0 {
            let j = self.shape.jacobian(p);
            for r in 0..2 {
                for c in 0..2 {
                    m[r][c] += self.epsilon * j[r][c];
                }
            }
        }
        m
    }

    /// Preimage of `p` by Newton iteration on the lift, started from `A^{-1} p`.
    pub fn inverse(&self, p: [f64; 2]) -> Result<[f64; 2]> {
        let ainv = mat_inv(&self.linear());
        let mut z = mat_vec(&ainv, p);
        if self.epsilon == 0.0 {
            return Ok([wrap(z[0]), wrap(z[1])]);
        }
        for _ in 0..50 {
            let f = self.lift(z);
            let r = [f[0] - p[0], f[1] - p[1]];
            if r[0].abs().max(r[1].abs()) < 1e-14 {
                return Ok([wrap(z[0]), wrap(z[1])]);
            }
            let step = mat_vec(&mat_inv(&self.differential(z)), r);
            z = [z[0] - step[0], z[1] - step[1]];
        }
        let f = self.lift(z);
        if (f[0] - p[0]).abs().max((f[1] - p[1]).abs()) < 1e-11 {
            Ok([wrap(z[0]), wrap(z[1])])
        } else {
            Err(Error::NoConvergence(format!("toral inverse at {p:?}")))
        }
    }

    /// `max_x |T(x) - T1(x)|` on an `n x n` grid, in torus distance.
    pub fn c0_distance(&self, other: &ToralMap, n: usize) -> f64 {
        (0..n * n)
            .map(|k| {
                let p = [(k / n) as f64 / n as f64, (k % n) as f64 / n as f64];
                crate::geometry::torus_dist(self.apply(p), other.apply(p))
            })
            .fold(0.0, f64::max)
    }

    fn check_invertible(&self) -> Result<()> {
        if self.epsilon == 0.0 {
            return Ok(());
        }
        let n = CONE_GRID;
        let sign = det2(&self.differential([0.0, 0.0])).signum();
        let bad = (0..n * n).into_par_iter().find_first(|&k| {
            let p = [(k / n) as f64 / n as f64, (k % n) as f64 / n as f64];
            det2(&self.differential(p)) * sign <= 0.0
        });
        match bad {
            Some(k) => Err(Error::ConeViolation(format!(
                "differential degenerates near grid point {k}"
            ))),
            None => Ok(()),
        }
    }

    fn certify_cone(&mut self) -> Result<()> {
        let n = CONE_GRID;
        let c = self.cone.center_angle;
        let ap = self.cone.half_aperture;
        let center = [c.cos(), c.sin()];
        let rays = [
            [(c - ap).cos(), (c - ap).sin()],
            [(c + ap).cos(), (c + ap).sin()],
            center,
        ];
        let worst = (0..n * n)
            .into_par_iter()
            .map(|k| {
                let p = [(k / n) as f64 / n as f64, (k % n) as f64 / n as f64];
                let dt = self.differential(p);
                rays.iter()
                    .map(|r| line_angle(center, mat_vec(&dt, *r)) / ap)
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max);
        self.cone.worst_ratio = worst;
        self.cone.strongly_preserved = worst <= CONE_MARGIN;
        if self.cone.strongly_preserved {
            Ok(())
        } else {
            Err(Error::ConeViolation(format!(
                "image cone reaches {:.3} of the aperture",
                worst
            )))
        }
    }

    fn stable_norm_range(&self, stable: &DirectionField) -> (f64, f64) {
        let n = stable.n;
        (0..n * n)
            .map(|k| {
                let p = stable.node(k);
                mat_vec(&self.differential(p), stable.dir_at_node(k))
            })
            .map(|v| v[0].hypot(v[1]))
            .fold((f64::INFINITY, 0.0), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }
}

#[inline]
fn det2(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Line field on an `n x n` grid of nodes `(i/n, j/n)`; angles live in `(-pi/2, pi/2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionField {
    pub n: usize,
    pub angles: Vec<f64>,
}

impl DirectionField {
    pub fn constant(n: usize, dir: [f64; 2]) -> Self {
        DirectionField {
            n,
            angles: vec![line_to_angle(dir); n * n],
        }
    }

    #[inline]
    pub fn node(&self, k: usize) -> [f64; 2] {
        [(k / self.n) as f64 / self.n as f64, (k % self.n) as f64 / self.n as f64]
    }

    #[inline]
    pub fn dir_at_node(&self, k: usize) -> [f64; 2] {
        let a = self.angles[k];
        [a.cos(), a.sin()]
    }

    /// Bilinear interpolation in the doubled-angle representation.
    pub fn dir_at(&self, p: [f64; 2]) -> [f64; 2] {
        let n = self.n;
        let sx = wrap(p[0]) * n as f64;
        let sy = wrap(p[1]) * n as f64;
        let (i0, j0) = (sx.floor() as usize % n, sy.floor() as usize % n);
        let (tx, ty) = (sx - sx.floor(), sy - sy.floor());
        let (i1, j1) = ((i0 + 1) % n, (j0 + 1) % n);
        let mut acc = [0.0; 2];
        for (i, j, w) in [
            (i0, j0, (1.0 - tx) * (1.0 - ty)),
            (i1, j0, tx * (1.0 - ty)),
            (i0, j1, (1.0 - tx) * ty),
            (i1, j1, tx * ty),
        ] {
            let a = 2.0 * self.angles[i * n + j];
            acc[0] += w * a.cos();
            acc[1] += w * a.sin();
        }
        let a = 0.5 * acc[1].atan2(acc[0]);
        [a.cos(), a.sin()]
    }

    /// Largest angle between this field and `other` over the nodes (same grid).
    pub fn max_angle_to(&self, other: &DirectionField) -> f64 {
        self.angles
            .iter()
            .zip(&other.angles)
            .map(|(a, b)| line_angle([a.cos(), a.sin()], [b.cos(), b.sin()]))
            .fold(0.0, f64::max)
    }
}

#[inline]
fn line_to_angle(v: [f64; 2]) -> f64 {
    let mut a = v[1].atan2(v[0]);
    if a > PI / 2.0 {
        a -= PI;
    } else if a <= -PI / 2.0 {
        a += PI;
    }
    a
}

/// Result of [`direction_fields`].
#[derive(Debug, Clone)]
pub struct DirectionFields {
    pub unstable: DirectionField,
    pub stable: DirectionField,
    /// Largest ratio of successive angle-field distances observed.
    pub eta: f64,
    /// Successive distances of the unstable iteration.
    pub unstable_steps: Vec<f64>,
    /// Successive distances of the stable iteration.
    pub stable_steps: Vec<f64>,
}

const FIELD_TOL: f64 = 1e-10;
// Distances below this are round-off and carry no contraction evidence.
const FIELD_FLOOR: f64 = 1e-13;

/// Unstable and stable line fields by forward (resp. backward) iteration of the
/// generic initial field `(1, 0)` under `DT`.
pub fn direction_fields(map: &ToralMap, grid_size: usize, iterations: usize) -> Result<DirectionFields> {
    if iterations == 0 {
        return Err(Error::NoConvergence("zero iterations give no contraction evidence".into()));
    }
    if grid_size == 0 {
        return Err(Error::InvalidInput("grid_size must be positive".into()));
    }
    let n = grid_size;
    let seed = [1.0, 0.0];
    // Per node: the k-th iterate direction for k = 0..=iterations.
    let per_node: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let p = [(k / n) as f64 / n as f64, (k % n) as f64 / n as f64];
            // backward orbit for the unstable field
            let mut back = Vec::with_capacity(iterations);
            let mut q = p;
            for _ in 0..iterations {
                q = map.inverse(q)?;
                back.push(map.differential(q));
            }
            // forward orbit for the stable field
            let mut fwd = Vec::with_capacity(iterations);
            let mut q = p;
            for _ in 0..iterations {
                fwd.push(mat_inv(&map.differential(q)));
                q = map.apply(q);
            }
            let mut un = Vec::with_capacity(iterations + 1);
            let mut st = Vec::with_capacity(iterations + 1);
            for m in 0..=iterations {
                let mut v = seed;
                for d in back[..m].iter().rev() {
                    v = normalize(mat_vec(d, v));
                }
                un.push(line_to_angle(v));
                let mut w = seed;
                for d in fwd[..m].iter().rev() {
                    w = normalize(mat_vec(d, w));
                }
                st.push(line_to_angle(w));
            }
            Ok((un, st))
        })
        .collect();
    let per_node: Vec<(Vec<f64>, Vec<f64>)> = per_node.into_iter().collect::<Result<_>>()?;

    let steps = |pick: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<f64> {
        (0..iterations)
            .map(|m| {
                per_node
                    .iter()
                    .map(|node| {
                        let a = pick(node);
                        line_angle([a[m].cos(), a[m].sin()], [a[m + 1].cos(), a[m + 1].sin()])
                    })
                    .fold(0.0, f64::max)
            })
            .collect()
    };
    let unstable_steps = steps(&|node| &node.0);
    let stable_steps = steps(&|node| &node.1);

    let mut eta: f64 = 0.0;
    for seq in [&unstable_steps, &stable_steps] {
        // skip the first step: the seed is arbitrary
        for w in seq.windows(2).skip(1) {
            if w[0] <= FIELD_TOL.max(FIELD_FLOOR) {
                break;
            }
            if w[1] > FIELD_FLOOR {
                let r = w[1] / w[0];
                if r >= 1.0 {
                    return Err(Error::NoConvergence(format!(
                        "angle iteration stopped contracting at distance {:e}",
                        w[0]
                    )));
                }
                eta = eta.max(r);
            }
        }
    }
    if iterations == 1 {
        eta = f64::NAN;
    }

    let unstable = DirectionField {
        n,
        angles: per_node.iter().map(|(u, _)| u[iterations]).collect(),
    };
    let stable = DirectionField {
        n,
        angles: per_node.iter().map(|(_, s)| s[iterations]).collect(),
    };
    Ok(DirectionFields {
        unstable,
        stable,
        eta,
        unstable_steps,
        stable_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CAT: [[i64; 2]; 2] = [[2, 1], [1, 1]];

    #[test]
    fn doubling_map_constants() {
        let m = make_expanding_map(2, 0.0, Shape1D::Sin { freq: 1 }).unwrap();
        assert_eq!(m.lambda, 0.5);
        assert_eq!(m.distortion, 0.0);
    }

    #[test]
    fn perturbed_doubling_constants() {
        let m = make_expanding_map(2, 0.1, Shape1D::Sin { freq: 1 }).unwrap();
        let inf = 2.0 - 0.2 * PI;
        assert!((m.lambda - 1.0 / inf).abs() < 1e-12);
        assert!((m.lambda - 0.7290).abs() < 1e-4);
        assert!((m.distortion - 0.4 * PI * PI / inf).abs() < 1e-12);
        assert!((m.distortion - 2.878).abs() < 1e-3);
        assert_eq!(m.alpha, 1.0);
    }

    #[test]
    fn degree_one_is_not_expanding() {
        assert!(matches!(
            make_expanding_map(1, 0.0, Shape1D::Sin { freq: 1 }),
            Err(Error::NotExpanding { .. })
        ));
        assert!(matches!(
            make_expanding_map(0, 0.0, Shape1D::Sin { freq: 1 }),
            Err(Error::InvalidDegree(0))
        ));
        assert!(matches!(
            make_expanding_map(2, 0.5, Shape1D::Sin { freq: 1 }),
            Err(Error::NotExpanding { .. })
        ));
    }

    #[test]
    fn holder_map_uses_dyadic_distortion() {
        let m = make_expanding_map(3, 0.2, Shape1D::HolderSin { exponent: 0.5 }).unwrap();
        assert_eq!(m.alpha, 0.5);
        assert!(m.distortion > 0.0 && m.distortion.is_finite());
    }

    #[test]
    fn doubling_branches() {
        let m = make_expanding_map(2, 0.0, Shape1D::Sin { freq: 1 }).unwrap();
        let b = m.inverse_branches(0.5).unwrap();
        assert!((b[0] - 0.25).abs() < 1e-12 && (b[1] - 0.75).abs() < 1e-12);
        let b = m.inverse_branches(0.0).unwrap();
        assert!(b[0].abs() < 1e-12 && (b[1] - 0.5).abs() < 1e-12);
        let pairs = m.paired_branches(0.5, 0.6).unwrap();
        assert!((pairs[0].0 - 0.25).abs() < 1e-12 && (pairs[0].1 - 0.30).abs() < 1e-12);
        assert!((pairs[1].0 - 0.75).abs() < 1e-12 && (pairs[1].1 - 0.80).abs() < 1e-12);
        for (a, b) in pairs {
            assert!((crate::geometry::circle_dist(a, b) - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn branches_invert_and_pair() {
        let m = make_expanding_map(3, 0.15, Shape1D::Cos { freq: 2 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x: f64 = rng.gen();
            let y: f64 = rng.gen();
            let br = m.inverse_branches(x).unwrap();
            assert_eq!(br.len(), 3);
            assert!(br.windows(2).all(|w| w[0] < w[1]));
            for z in &br {
                assert!(crate::geometry::circle_dist(m.apply(*z), x) < 1e-10);
            }
            let d = crate::geometry::circle_dist(x, y);
            for (a, b) in m.paired_branches(x, y).unwrap() {
                assert!(crate::geometry::circle_dist(a, b) <= m.lambda * d + 1e-12);
            }
        }
    }

    #[test]
    fn cat_map_eigendata() {
        let m = make_toral_map(CAT, 0.0, Shape2D::default()).unwrap();
        assert!((m.lambda_u - 2.618034).abs() < 1e-6);
        assert!((m.lambda_s - 0.381966).abs() < 1e-6);
        assert!((m.e_u[1] / m.e_u[0] - 0.618034).abs() < 1e-6);
        assert!((m.lambda_u * m.lambda_s - 1.0).abs() < 1e-12);
        assert!(m.cone.strongly_preserved);
    }

    #[test]
    fn parabolic_matrix_rejected() {
        assert!(matches!(
            make_toral_map([[1, 1], [0, 1]], 0.0, Shape2D::default()),
            Err(Error::NotHyperbolic { trace_abs: 2 })
        ));
        assert!(matches!(
            make_toral_map([[2, 0], [0, 1]], 0.0, Shape2D::default()),
            Err(Error::NotUnimodular(2))
        ));
    }

    #[test]
    fn perturbed_cat_map_certified() {
        let m = make_toral_map(CAT, 0.01, Shape2D::sin_y()).unwrap();
        assert!(m.cone.strongly_preserved);
        assert!(m.lambda0 > 0.3 && m.lambda0 < m.lambda_s);
        assert!(m.stable_contraction < 1.0);
    }

    #[test]
    fn strong_perturbation_breaks_cone() {
        assert!(matches!(
            make_toral_map(CAT, 0.5, Shape2D::sin_y()),
            Err(Error::ConeViolation(_))
        ));
    }

    #[test]
    fn toral_inverse_roundtrip() {
        let m = make_toral_map(CAT, 0.02, Shape2D::sin_y()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = [rng.gen(), rng.gen()];
            let q = m.inverse(p).unwrap();
            assert!(crate::geometry::torus_dist(m.apply(q), p) < 1e-10);
        }
    }

    #[test]
    fn linear_fields_match_eigendirections() {
        let m = make_toral_map(CAT, 0.0, Shape2D::default()).unwrap();
        let f = direction_fields(&m, 16, 20).unwrap();
        for k in 0..256 {
            let u = f.unstable.dir_at_node(k);
            let s = f.stable.dir_at_node(k);
            assert!((u[1] / u[0] - 0.618034).abs() < 1e-6);
            assert!((s[1] / s[0] + 1.618034).abs() < 1e-6);
        }
        let ratio = m.lambda_s / m.lambda_u;
        assert!((f.eta - ratio).abs() < 0.01, "eta {} vs {}", f.eta, ratio);
    }

    #[test]
    fn perturbed_fields_near_linear() {
        let lin = make_toral_map(CAT, 0.0, Shape2D::default()).unwrap();
        let m = make_toral_map(CAT, 0.01, Shape2D::sin_y()).unwrap();
        let f = direction_fields(&m, 32, 30).unwrap();
        for k in 0..32 * 32 {
            assert!(line_angle(f.unstable.dir_at_node(k), lin.e_u) < 0.05);
            assert!(line_angle(f.stable.dir_at_node(k), lin.e_s) < 0.05);
            // adapted contraction along the computed stable field
            let v = mat_vec(&m.differential(f.stable.node(k)), f.stable.dir_at_node(k));
            assert!(v[0].hypot(v[1]) <= m.stable_contraction + 1e-12);
        }
        assert!(f.eta < lin.lambda_s / lin.lambda_u + 0.05);
    }

    #[test]
    fn zero_iterations_rejected() {
        let m = make_toral_map(CAT, 0.0, Shape2D::default()).unwrap();
        assert!(matches!(direction_fields(&m, 8, 0), Err(Error::NoConvergence(_))));
    }
}
