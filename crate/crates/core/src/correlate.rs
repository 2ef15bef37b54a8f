//! Observables, leafwise Hölder seminorms, correlation sequences and decay fits.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::compensated_sum;
use crate::foliated::RailMeasure;
use crate::maps::{DirectionField, ToralMap};
use crate::transport::DiscreteMeasure;

/// Correlations with absolute value at or below this are not fitted.
pub const NOISE_FLOOR: f64 = 1e-12;
const MIN_FIT_POINTS: usize = 4;
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservableClass {
    Smooth,
    StableHolder,
    UnstableHolder,
    Rough,
}

/// `c cos(2 pi k.x) + s sin(2 pi k.x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub k: [i64; 2],
    pub cos: f64,
    pub sin: f64,
}

#[derive(Clone)]
enum Rule {
    Trig(Vec<Mode>),
    Func(Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>),
}

/// Bounded function on the torus (or on the circle through the first coordinate).
#[derive(Clone)]
pub struct Observable {
    pub name: String,
    pub class: ObservableClass,
    rule: Rule,
    /// `(beta, seminorm)` estimates recorded by [`Observable::record_seminorm`].
    pub seminorms: Vec<(f64, f64)>,
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Observable")
            .field("name", &self.name)
            .field("class", &self.class)
            .field("modes", &self.modes())
            .finish()
    }
}

const BOUND_GRID: usize = 64;

impl Observable {
    /// Checks finiteness on a 64 x 64 grid.
    pub fn new<F>(name: &str, class: ObservableClass, f: F) -> Result<Self>
    where
        F: Fn([f64; 2]) -> f64 + Send + Sync + 'static,
    {
        let obs = Observable {
            name: name.to_string(),
            class,
            rule: Rule::Func(Arc::new(f)),
            seminorms: Vec::new(),
        };
        for i in 0..BOUND_GRID {
            for j in 0..BOUND_GRID {
                let p = [i as f64 / BOUND_GRID as f64, j as f64 / BOUND_GRID as f64];
                let v = obs.eval(p);
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!("{name} is not finite at {p:?}")));
                }
            }
        }
        Ok(obs)
    }

    pub fn trig(name: &str, modes: Vec<Mode>) -> Self {
        Observable {
            name: name.to_string(),
            class: ObservableClass::Smooth,
            rule: Rule::Trig(modes),
            seminorms: Vec::new(),
        }
    }

    pub fn cos_mode(k: [i64; 2]) -> Self {
        Self::trig(&format!("cos({},{})", k[0], k[1]), vec![Mode { k, cos: 1.0, sin: 0.0 }])
    }

    pub fn constant(c: f64) -> Self {
        Self::trig("const", vec![Mode { k: [0, 0], cos: c, sin: 0.0 }])
    }

    /// Indicator of `{x < 1/2}`.
    pub fn half_indicator() -> Self {
        Observable {
            name: "indicator".into(),
            class: ObservableClass::Rough,
            rule: Rule::Func(Arc::new(|p: [f64; 2]| if crate::geometry::wrap(p[0]) < 0.5 { 1.0 } else { 0.0 })),
            seminorms: Vec::new(),
        }
    }

    /// `exp(a cos 2 pi (x + phase_x) + b sin 2 pi (y + phase_y))`, with every
    /// Fourier mode present.
    pub fn exp_trig(a: f64, b: f64, phase: [f64; 2]) -> Self {
        Observable {
            name: format!("exp-trig({a},{b})"),
            class: ObservableClass::Smooth,
            rule: Rule::Func(Arc::new(move |p: [f64; 2]| {
                (a * (2.0 * PI * (p[0] + phase[0])).cos() + b * (2.0 * PI * (p[1] + phase[1])).sin()).exp()
            })),
            seminorms: Vec::new(),
        }
    }

    /// Trigonometric modes, when the observable is a trigonometric polynomial.
    pub fn modes(&self) -> Option<&[Mode]> {
        match &self.rule {
            Rule::Trig(m) => Some(m),
            Rule::Func(_) => None,
        }
    }

    #[inline]
    pub fn eval(&self, p: [f64; 2]) -> f64 {
        match &self.rule {
            Rule::Trig(modes) => modes
                .iter()
                .map(|m| {
                    let a = 2.0 * PI * (m.k[0] as f64 * p[0] + m.k[1] as f64 * p[1]);
                    m.cos * a.cos() + m.sin * a.sin()
                })
                .sum(),
            Rule::Func(f) => f(p),
        }
    }

    pub fn record_seminorm(&mut self, beta: f64, value: f64) {
        self.seminorms.retain(|(b, _)| *b != beta);
        self.seminorms.push((beta, value));
    }

    pub fn seminorm(&self, beta: f64) -> Option<f64> {
        self.seminorms.iter().find(|(b, _)| *b == beta).map(|(_, v)| *v)
    }
}

/// Pointwise linear combination `a f + b g`.
pub fn combine(a: f64, f: &Observable, b: f64, g: &Observable) -> Observable {
    let (f, g) = (f.clone(), g.clone());
    Observable {
        name: format!("{a}*{} + {b}*{}", f.name, g.name),
        class: if f.class == g.class { f.class } else { ObservableClass::Rough },
        rule: Rule::Func(Arc::new(move |p| a * f.eval(p) + b * g.eval(p))),
        seminorms: Vec::new(),
    }
}

/// Per-scale profile of a leafwise Hölder quotient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeminormProfile {
    pub scales: Vec<f64>,
    pub per_scale: Vec<f64>,
    /// Max of the profile, or infinity when it still grows past 2x at the finest scales.
    pub value: f64,
}

const SEMINORM_BASE: usize = 64;
const CURVE_STEP: f64 = 1e-3;

fn follow(field: &DirectionField, p: [f64; 2], s: f64) -> [f64; 2] {
    let steps = (s / CURVE_STEP).ceil().max(1.0) as usize;
    let h = s / steps as f64;
    let mut q = p;
    let mut prev = field.dir_at(q);
    for _ in 0..steps {
        let mut d1 = field.dir_at(q);
        if d1[0] * prev[0] + d1[1] * prev[1] < 0.0 {
            d1 = [-d1[0], -d1[1]];
        }
        let mid = [q[0] + 0.5 * h * d1[0], q[1] + 0.5 * h * d1[1]];
        let mut d2 = field.dir_at(mid);
        if d2[0] * d1[0] + d2[1] * d1[1] < 0.0 {
            d2 = [-d2[0], -d2[1]];
        }
        q = [q[0] + h * d2[0], q[1] + h * d2[1]];
        prev = d2;
    }
    q
}

/// `max |f(x) - f(x + s e(x))| / s^beta` per scale, over base points whose
/// horizontal spacing shrinks with the scale.
pub fn leafwise_holder_seminorm(f: &Observable, field: &DirectionField, beta: f64, scales: &[f64]) -> Result<SeminormProfile> {
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0)) || scales.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput("scales must be positive and decreasing".into()));
    }
    let ny = SEMINORM_BASE;
    let per_scale: Vec<f64> = scales
        .iter()
        .map(|&s| {
            // columns dense enough that some base point sits within s/4 of any vertical line
            let nx = SEMINORM_BASE.max((4.0 / s).ceil() as usize);
            (0..nx * ny)
                .into_par_iter()
                .map(|k| {
                    let p = [(k / ny) as f64 / nx as f64 + 0.5 / nx as f64, (k % ny) as f64 / ny as f64 + 0.3 / ny as f64];
                    let q = follow(field, p, s);
                    (f.eval(p) - f.eval(q)).abs() / s.powf(beta)
                })
                .reduce(|| 0.0, f64::max)
        })
        .collect();
    let m = per_scale.len();
    let diverging = m >= 2 && per_scale[m - 1] > 2.0 * per_scale[m - 2];
    let value = if diverging {
        f64::INFINITY
    } else {
        per_scale.iter().cloned().fold(0.0, f64::max)
    };
    Ok(SeminormProfile {
        scales: scales.to_vec(),
        per_scale,
        value,
    })
}

fn integral(mu: &DiscreteMeasure, f: &Observable) -> f64 {
    let parts: Vec<f64> = mu
        .points()
        .par_chunks(CHUNK)
        .zip(mu.weights().par_chunks(CHUNK))
        .map(|(p, w)| compensated_sum(p.iter().zip(w).map(|(p, w)| w * f.eval(*p))))
        .collect();
    compensated_sum(parts)
}

/// `C_n = int f o T^n g dmu - int f dmu int g dmu` for `n = 0..=n_max`.
///
/// Summation order is fixed by point index, so results do not depend on the thread count.
pub fn correlation_sequence(map: &ToralMap, f: &Observable, g: &Observable, mu: &DiscreteMeasure, n_max: usize) -> Result<Vec<f64>> {
    if n_max < 1 {
        return Err(Error::InvalidInput("n_max must be at least 1".into()));
    }
    let mean = integral(mu, f) * integral(mu, g);
    let parts: Vec<Vec<f64>> = mu
        .points()
        .par_chunks(CHUNK)
        .zip(mu.weights().par_chunks(CHUNK))
        .map(|(pts, ws)| {
            let mut rows = vec![Vec::with_capacity(pts.len()); n_max + 1];
            for (p, w) in pts.iter().zip(ws) {
                let gw = w * g.eval(*p);
                let mut q = *p;
                for row in rows.iter_mut() {
                    row.push(f.eval(q) * gw);
                    q = map.apply(q);
                }
            }
            rows.into_iter().map(compensated_sum).collect()
        })
        .collect();
    Ok((0..=n_max)
        .map(|n| compensated_sum(parts.iter().map(|c| c[n])) - mean)
        .collect())
}

/// `C_n` in transfer form: `int f d(T^n_* (g mu)) - int f dmu int g dmu`, with
/// the pushforward carried out on the rail family of `mu`.
///
/// Unlike [`correlation_sequence`], no grid has to resolve `f o T^n`.
pub fn transfer_correlation_sequence(map: &ToralMap, f: &Observable, g: &Observable, mu: &RailMeasure, n_max: usize) -> Result<Vec<f64>> {
    if n_max < 1 {
        return Err(Error::InvalidInput("n_max must be at least 1".into()));
    }
    let fe = |p: [f64; 2]| f.eval(p);
    let mean = mu.integrate(fe) * mu.integrate(|p| g.eval(p));
    let mut nu = mu.weighted(|p| g.eval(p));
    let mut out = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        out.push(nu.integrate(fe) - mean);
        if n < n_max {
            nu = nu.push_forward(map);
        }
    }
    Ok(out)
}

/// Uniform quadrature on the `n x n` dyadic-friendly grid `(i/n, j/n)`.
pub fn lebesgue_grid(n: usize) -> DiscreteMeasure {
    DiscreteMeasure::uniform_grid(2, n)
}

/// First `n` such that `C_m` vanishes for trigonometric `f`, `g` under the linear
/// part of `map` for every `m >= n`.
pub fn escape_time(map: &ToralMap, f: &Observable, g: &Observable) -> Result<usize> {
    let (fm, gm) = match (f.modes(), g.modes()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::InvalidInput("escape time needs trigonometric observables".into())),
    };
    let a = map.matrix;
    let ks: Vec<[i128; 2]> = fm.iter().filter(|m| m.k != [0, 0]).map(|m| [m.k[0] as i128, m.k[1] as i128]).collect();
    let ls: Vec<[i128; 2]> = gm.iter().filter(|m| m.k != [0, 0]).map(|m| [m.k[0] as i128, m.k[1] as i128]).collect();
    let lmax = ls.iter().map(|l| l[0].abs().max(l[1].abs())).max().unwrap_or(0);
    let mut cur = ks.clone();
    let mut last_hit: Option<usize> = None;
    let mut growing = 0;
    let mut prev_min = 0i128;
    for n in 0..200 {
        if cur.iter().any(|k| ls.iter().any(|l| (k[0] == l[0] && k[1] == l[1]) || (k[0] == -l[0] && k[1] == -l[1]))) {
            last_hit = Some(n);
        }
        let min = cur.iter().map(|k| k[0].abs().max(k[1].abs())).min().unwrap_or(i128::MAX);
        if min > lmax && min > prev_min {
            growing += 1;
            if growing >= 4 {
                return Ok(last_hit.map_or(0, |n| n + 1));
            }
        } else {
            growing = 0;
        }
        prev_min = min;
        // k -> A^T k
        cur = cur
            .iter()
            .map(|k| {
                [
                    a[0][0] as i128 * k[0] + a[1][0] as i128 * k[1],
                    a[0][1] as i128 * k[0] + a[1][1] as i128 * k[1],
                ]
            })
            .collect();
    }
    Err(Error::NoConvergence("frequencies did not escape within 200 steps".into()))
}

/// Log-linear fit `|C_n| ~ C r^n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub prefactor: f64,
    pub rate: f64,
    pub window: (usize, usize),
    /// Root-mean-square residual of the regression in log space.
    pub residual: f64,
    pub used: usize,
}

pub fn fit_decay(values: &[f64]) -> Result<DecayFit> {
    fit_decay_window(values, 0, values.len().saturating_sub(1))
}

/// Fit over indices `first..=last`, skipping entries at or below [`NOISE_FLOOR`].
pub fn fit_decay_window(values: &[f64], first: usize, last: usize) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .filter(|(n, v)| *n >= first && *n <= last && v.abs() > NOISE_FLOOR && v.is_finite())
        .map(|(n, v)| (n as f64, v.abs().ln()))
        .collect();
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientData {
            usable: pts.len(),
            needed: MIN_FIT_POINTS,
        });
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / m).sqrt();
    Ok(DecayFit {
        prefactor: intercept.exp(),
        rate: slope.exp(),
        window: (first, last),
        residual,
        used: pts.len(),
    })
}
