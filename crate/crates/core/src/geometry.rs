//! Circle and torus arithmetic plus periodic interpolation on uniform grids.

/// Largest torus distance on the unit square torus, `sqrt(2)/2`.
pub const TORUS_DIAMETER: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Reduce to the fundamental domain `[0, 1)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let r = x - x.floor();
    // x.floor() can round such that r == 1.0 for tiny negative x
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed shortest displacement, in `[-1/2, 1/2)`.
#[inline]
pub fn wrap_delta(d: f64) -> f64 {
    let r = wrap(d + 0.5) - 0.5;
    if r < -0.5 {
        r + 1.0
    } else {
        r
    }
}

#[inline]
pub fn circle_dist(a: f64, b: f64) -> f64 {
    wrap_delta(b - a).abs()
}

#[inline]
pub fn torus_delta(p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    [wrap_delta(q[0] - p[0]), wrap_delta(q[1] - p[1])]
}

#[inline]
pub fn torus_dist(p: [f64; 2], q: [f64; 2]) -> f64 {
    let d = torus_delta(p, q);
    d[0].hypot(d[1])
}

#[inline]
pub fn wrap2(p: [f64; 2]) -> [f64; 2] {
    [wrap(p[0]), wrap(p[1])]
}

/// Angle between two lines (not rays), in `[0, pi/2]`.
#[inline]
pub fn line_angle(a: [f64; 2], b: [f64; 2]) -> f64 {
    let cross = a[0] * b[1] - a[1] * b[0];
    let dot = a[0] * b[0] + a[1] * b[1];
    cross.abs().atan2(dot.abs())
}

#[inline]
pub fn normalize(v: [f64; 2]) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    [v[0] / n, v[1] / n]
}

/// Periodic cubic spline through equally spaced samples on `[0, 1)`.
///
/// Sample `i` sits at `i / n`. The interpolant is C2 and exact on trigonometric
/// data to fourth order in the spacing.
#[derive(Debug, Clone)]
pub struct PeriodicSpline {
    values: Vec<f64>,
    // second derivatives at the nodes, scaled by h^2 / 6
    moments: Vec<f64>,
}

impl PeriodicSpline {
    pub fn new(values: &[f64]) -> Self {
        let n = values.len();
        assert!(n >= 3, "periodic spline needs at least 3 samples");
        // M_{i-1} + 4 M_i + M_{i+1} = y_{i+1} - 2 y_i + y_{i-1}, with M scaled by h^2/6.
        let rhs: Vec<f64> = (0..n)
            .map(|i| values[(i + 1) % n] - 2.0 * values[i] + values[(i + n - 1) % n])
            .collect();
        let moments = solve_cyclic_141(&rhs);
        Self {
            values: values.to_vec(),
            moments,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        let s = wrap(x) * n as f64;
        let i = (s.floor() as usize).min(n - 1);
        let t = s - i as f64;
        let j = (i + 1) % n;
        let u = 1.0 - t;
        // y = u y_i + t y_j + (u^3 - u) m_i + (t^3 - t) m_j with m = M h^2 / 6
        u * self.values[i]
            + t * self.values[j]
            + (u * u * u - u) * self.moments[i]
            + (t * t * t - t) * self.moments[j]
    }
}

/// Solve the cyclic system `x_{i-1} + 4 x_i + x_{i+1} = r_i`.
fn solve_cyclic_141(rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    // Sherman-Morrison on top of a Thomas solve for the tridiagonal part.
    let gamma = -4.0;
    let mut diag = vec![4.0; n];
    diag[0] -= gamma;
    diag[n - 1] -= 1.0 / gamma;
    let x = thomas(&diag, rhs);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = 1.0;
    let z = thomas(&diag, &u);
    let v0 = 1.0;
    let vn = 1.0 / gamma;
    let fact = (v0 * x[0] + vn * x[n - 1]) / (1.0 + v0 * z[0] + vn * z[n - 1]);
    x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect()
}

fn thomas(diag: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = 1.0 / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - c[i - 1];
        c[i] = 1.0 / m;
        d[i] = (rhs[i] - d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Neumaier compensated sum in iteration order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in it {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
