//! Transfer operator of an expanding circle map acting on grid-sampled Hölder
//! densities, the cone constants that drive its contraction, and the
//! correlation-decay experiment built on top of it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compensated_sum, PeriodicSpline};
use crate::maps::{dyadic_log_holder, ExpandingMap1D};

/// Default number of grid samples.
pub const DEFAULT_GRID: usize = 4096;

/// Dyadic scales `2^-3 .. 2^-12` used by the Hölder estimators.
pub const HOLDER_SCALES: std::ops::RangeInclusive<u32> = 3..=12;
/// Base points per dyadic scale.
pub const HOLDER_BASE_POINTS: usize = 256;

/// Positive density on the circle, sampled at `i / N`.
///
/// Between samples the density is the periodic cubic spline through them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderDensity {
    samples: Vec<f64>,
    alpha: f64,
}

/// Trapezoid rule on the periodic grid: the sample mean.
pub fn periodic_integral(samples: &[f64]) -> f64 {
    compensated_sum(samples.iter().copied()) / samples.len() as f64
}

impl HolderDensity {
    /// Normalizes the samples to unit integral.
    pub fn from_samples(samples: Vec<f64>, alpha: f64) -> Result<Self> {
        if samples.len() < 3 {
            return Err(Error::InvalidInput("need at least 3 samples".into()));
        }
        if let Some(v) = samples.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!("density sample {v} is not positive")));
        }
        let integral = periodic_integral(&samples);
        Ok(HolderDensity {
            samples: samples.into_iter().map(|v| v / integral).collect(),
            alpha,
        })
    }

    pub fn from_fn<F: Fn(f64) -> f64>(n: usize, alpha: f64, f: F) -> Result<Self> {
        Self::from_samples((0..n).map(|i| f(i as f64 / n as f64)).collect(), alpha)
    }

    pub fn constant(n: usize, alpha: f64) -> Self {
        HolderDensity {
            samples: vec![1.0; n],
            alpha,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn integral(&self) -> f64 {
        periodic_integral(&self.samples)
    }

    pub fn min(&self) -> f64 {
        self.samples.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn spline(&self) -> PeriodicSpline {
        PeriodicSpline::new(&self.samples)
    }

    /// Split `rho = tau * 1 + (1 - tau) * rest`; `None` when `rest` would not be positive.
    pub fn split_off_constant(&self, tau: f64) -> Option<HolderDensity> {
        let rest: Vec<f64> = self.samples.iter().map(|v| (v - tau) / (1.0 - tau)).collect();
        if rest.iter().all(|v| *v > 0.0) {
            Some(HolderDensity {
                samples: rest,
                alpha: self.alpha,
            })
        } else {
            None
        }
    }
}

/// Empirical log-Hölder constant: max over dyadic sample pairs of
/// `|log rho(x) - log rho(y)| / d(x, y)^alpha`.
pub fn holder_log_constant(rho: &HolderDensity, alpha: f64) -> f64 {
    let logs: Vec<f64> = rho.samples.iter().map(|v| v.ln()).collect();
    holder_constant_of_samples(&logs, alpha)
}

/// Hölder seminorm estimate of periodic grid samples over the dyadic scales.
pub fn holder_constant_of_samples(samples: &[f64], alpha: f64) -> f64 {
    let n = samples.len();
    let on_grid = n % HOLDER_BASE_POINTS == 0 && n % (1 << HOLDER_SCALES.end()) == 0;
    if on_grid {
        // every base point and every offset is a grid node
        HOLDER_SCALES
            .map(|j| {
                let step = n >> j;
                let stride = n / HOLDER_BASE_POINTS;
                let denom = 0.5f64.powi(j as i32).powf(alpha);
                (0..HOLDER_BASE_POINTS)
                    .map(|b| {
                        let i = b * stride;
                        (samples[(i + step) % n] - samples[i]).abs() / denom
                    })
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    } else {
        let spline = PeriodicSpline::new(samples);
        dyadic_log_holder(|x| spline.eval(x), alpha, HOLDER_SCALES, HOLDER_BASE_POINTS)
    }
}

/// `sup |f| + Hol_alpha(f)` on grid samples.
pub fn holder_norm_of_samples(samples: &[f64], alpha: f64) -> f64 {
    samples.iter().fold(0.0f64, |m, v| m.max(v.abs())) + holder_constant_of_samples(samples, alpha)
}

/// The transfer operator `L rho(x) = sum_{T z = x} rho(z) / |T'(z)|` on an
/// `N`-point grid, with the preimages of every node cached.
#[derive(Debug, Clone)]
pub struct TransferOperator {
    n: usize,
    degree: usize,
    // node-major: preimage and 1 / |T'| at the preimage
    preimages: Vec<(f64, f64)>,
}

impl TransferOperator {
    pub fn new(map: &ExpandingMap1D, n: usize) -> Result<Self> {
        let rows: Vec<Result<Vec<(f64, f64)>>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = i as f64 / n as f64;
                Ok(map
                    .inverse_branches(x)?
                    .into_iter()
                    .map(|z| (z, 1.0 / map.derivative(z).abs()))
                    .collect())
            })
            .collect();
        let mut preimages = Vec::with_capacity(n * map.degree as usize);
        for r in rows {
            preimages.extend(r?);
        }
        Ok(TransferOperator {
            n,
            degree: map.degree as usize,
            preimages,
        })
    }

    pub fn grid(&self) -> usize {
        self.n
    }

    /// Apply to arbitrary (possibly signed) samples, without renormalization.
    pub fn apply_samples(&self, samples: &[f64]) -> Vec<f64> {
        assert_eq!(samples.len(), self.n, "sample count must match the operator grid");
        let spline = PeriodicSpline::new(samples);
        self.preimages
            .par_chunks(self.degree)
            .map(|pre| pre.iter().map(|(z, w)| spline.eval(*z) * w).sum())
            .collect()
    }

    /// Apply to a density; returns the renormalized image and the
    /// pre-normalization integral.
    pub fn apply(&self, rho: &HolderDensity) -> Result<(HolderDensity, f64)> {
        let out = self.apply_samples(&rho.samples);
        let integral = periodic_integral(&out);
        if out.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidInput(
                "transfer image lost positivity; the grid is too coarse for this density".into(),
            ));
        }
        Ok((
            HolderDensity {
                samples: out.into_iter().map(|v| v / integral).collect(),
                alpha: rho.alpha,
            },
            integral,
        ))
    }
}

/// One application of the transfer operator, renormalized to unit integral.
pub fn transfer_apply(map: &ExpandingMap1D, rho: &HolderDensity) -> Result<HolderDensity> {
    let op = TransferOperator::new(map, rho.len())?;
    op.apply(rho).map(|(d, _)| d)
}

/// Constants of the Hölder cone argument.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeConstants {
    pub lambda_alpha: f64,
    pub distortion: f64,
    /// `K0 = 2 lambda^alpha H / (1 - lambda^alpha)`.
    pub k0: f64,
    /// Smallest `n0 >= 1` with `2 lambda^(n0 alpha) <= lambda^alpha / (1 - lambda^alpha)`.
    pub n0: u32,
    /// Coupling mass `exp(-K0) / 2`.
    pub tau: f64,
    /// `(1 - tau)^(1 / n0)`.
    pub theta: f64,
}

impl ConeConstants {
    pub fn from_rates(lambda_alpha: f64, distortion: f64) -> Self {
        assert!(lambda_alpha > 0.0 && lambda_alpha < 1.0, "lambda^alpha must lie in (0, 1)");
        let ratio = lambda_alpha / (1.0 - lambda_alpha);
        let k0 = 2.0 * ratio * distortion;
        let mut n0 = 1u32;
        while 2.0 * lambda_alpha.powi(n0 as i32) > ratio {
            n0 += 1;
        }
        let tau = 0.5 * (-k0).exp();
        ConeConstants {
            lambda_alpha,
            distortion,
            k0,
            n0,
            tau,
            theta: (1.0 - tau).powf(1.0 / n0 as f64),
        }
    }

    /// `h(K) = (K + H) lambda^alpha`, the cone parameter after one application.
    pub fn h(&self, k: f64) -> f64 {
        (k + self.distortion) * self.lambda_alpha
    }
}

pub fn cone_constants(map: &ExpandingMap1D) -> ConeConstants {
    ConeConstants::from_rates(map.lambda_alpha(), map.distortion)
}

/// Outcome of [`invariant_density`].
#[derive(Debug, Clone)]
pub struct InvariantDensity {
    pub density: HolderDensity,
    pub residual: f64,
    pub iterations: usize,
    /// Measured log-Hölder constant of the fixed point.
    pub log_holder: f64,
    /// `K0 / 2`, the cone the fixed point must belong to.
    pub cone_bound: f64,
    /// `log_holder <= 1.1 * K0 / 2`.
    pub regularity_ok: bool,
}

const STALL_LIMIT: usize = 50;

/// Iterate the transfer operator from the constant density until
/// `sup |L rho - rho| <= tol`.
pub fn invariant_density(map: &ExpandingMap1D, tol: f64) -> Result<InvariantDensity> {
    invariant_density_on(map, tol, DEFAULT_GRID)
}

pub fn invariant_density_on(map: &ExpandingMap1D, tol: f64, n: usize) -> Result<InvariantDensity> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance {tol} must be positive")));
    }
    let op = TransferOperator::new(map, n)?;
    let mut rho = HolderDensity::constant(n, map.alpha);
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    let mut iterations = 0;
    let residual = loop {
        let (next, _) = op.apply(&rho)?;
        iterations += 1;
        let residual = next
            .samples
            .iter()
            .zip(&rho.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        rho = next;
        if residual <= tol {
            break residual;
        }
        if residual < best {
            best = residual;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= STALL_LIMIT {
                return Err(Error::NoConvergence(format!(
                    "transfer iteration stalled at residual {best:e} (tol {tol:e})"
                )));
            }
        }
    };
    let constants = cone_constants(map);
    let log_holder = holder_log_constant(&rho, map.alpha);
    let cone_bound = constants.k0 / 2.0;
    Ok(InvariantDensity {
        density: rho,
        residual,
        iterations,
        log_holder,
        cone_bound,
        regularity_ok: log_holder <= 1.1 * cone_bound + 1e-12,
    })
}

/// Fraction `a` in `rho = (a g / |g|_alpha + b) rho0`.
pub const DECAY_PERTURBATION: f64 = 0.25;

/// Correlations `C_n = int f o T^n g dmu0 - int f dmu0 int g dmu0` for `n = 0..=n_max`.
///
/// `g` is encoded as the density `rho = (a g / |g|_alpha + b) rho0` and `C_n`
/// is read off `|g|_alpha / a * int f (L^n rho - L^n rho0) dm`.
pub fn expanding_decay<F, G>(
    map: &ExpandingMap1D,
    invariant: &HolderDensity,
    f: F,
    g: G,
    n_max: usize,
) -> Result<Vec<f64>>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    if n_max < 1 {
        return Err(Error::InvalidInput("n_max must be at least 1".into()));
    }
    let n = invariant.len();
    let op = TransferOperator::new(map, n)?;
    let xs: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let fs: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let gs: Vec<f64> = xs.iter().map(|&x| g(x)).collect();
    let rho0 = invariant.samples();
    let g_norm = holder_norm_of_samples(&gs, map.alpha);
    if g_norm == 0.0 {
        return Ok(vec![0.0; n_max + 1]);
    }
    let scale = DECAY_PERTURBATION / g_norm;
    let g_mean = periodic_integral(&gs.iter().zip(rho0).map(|(g, r)| g * r).collect::<Vec<_>>());
    let b = 1.0 - scale * g_mean;
    let mut rho: Vec<f64> = gs.iter().zip(rho0).map(|(g, r)| (scale * g + b) * r).collect();
    let mut base: Vec<f64> = rho0.to_vec();
    let mut out = Vec::with_capacity(n_max + 1);
    for step in 0..=n_max {
        if step > 0 {
            rho = op.apply_samples(&rho);
            base = op.apply_samples(&base);
        }
        let diff: Vec<f64> = fs
            .iter()
            .zip(rho.iter().zip(&base))
            .map(|(f, (r, b))| f * (r - b))
            .collect();
        out.push(periodic_integral(&diff) / scale);
    }
    Ok(out)
}

/// Long-orbit histogram of a circle map on the `n`-point grid (nearest node).
///
/// Runs `orbits` independent orbits of `steps` points each after a burn-in.
pub fn birkhoff_histogram(
    map: &ExpandingMap1D,
    n: usize,
    orbits: usize,
    steps: usize,
    burn_in: usize,
    seed: u64,
) -> Vec<f64> {
    let counts = (0..orbits)
        .into_par_iter()
        .fold(
            || vec![0u64; n],
            |mut acc, k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut x: f64 = rng.gen();
                for _ in 0..burn_in {
                    x = map.apply(x);
                }
                for _ in 0..steps {
                    x = map.apply(x);
                    acc[((x * n as f64).round() as usize) % n] += 1;
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; n],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let total = (orbits * steps) as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{make_expanding_map, Shape1D};
    use std::f64::consts::PI;

    fn doubling() -> ExpandingMap1D {
        make_expanding_map(2, 0.0, Shape1D::Sin { freq: 1 }).unwrap()
    }

    fn perturbed() -> ExpandingMap1D {
        make_expanding_map(2, 0.1, Shape1D::Sin { freq: 1 }).unwrap()
    }

    #[test]
    fn lebesgue_invariant_under_doubling() {
        let out = transfer_apply(&doubling(), &HolderDensity::constant(1024, 1.0)).unwrap();
        assert!(out.samples().iter().all(|v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn doubling_halves_frequency() {
        let rho = HolderDensity::from_fn(DEFAULT_GRID, 1.0, |x| 1.0 + 0.5 * (4.0 * PI * x).cos()).unwrap();
        let out = transfer_apply(&doubling(), &rho).unwrap();
        for (i, v) in out.samples().iter().enumerate() {
            let x = i as f64 / DEFAULT_GRID as f64;
            assert!((v - (1.0 + 0.5 * (2.0 * PI * x).cos())).abs() < 1e-9);
        }
    }

    #[test]
    fn mass_conserved_before_normalization() {
        let map = perturbed();
        let op = TransferOperator::new(&map, DEFAULT_GRID).unwrap();
        let rho = HolderDensity::from_fn(DEFAULT_GRID, 1.0, |x| (0.7 * (2.0 * PI * x).sin() + 0.3 * (6.0 * PI * x).cos()).exp())
            .unwrap();
        let (_, integral) = op.apply(&rho).unwrap();
        assert!((integral - rho.integral()).abs() < 1e-10, "drift {}", integral - 1.0);
    }

    #[test]
    fn cone_constants_examples() {
        let c = ConeConstants::from_rates(0.5, 1.0);
        assert_eq!(c.k0, 2.0);
        assert_eq!(c.n0, 1);
        assert!((c.tau - 0.5 * (-2.0f64).exp()).abs() < 1e-15);
        assert!((c.tau - 0.06767).abs() < 1e-5);
        assert!((c.theta - 0.93233).abs() < 1e-5);
        let c = ConeConstants::from_rates(0.5, 0.0);
        assert_eq!(c.k0, 0.0);
        assert!((c.h(3.0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn n0_is_minimal() {
        for la in [0.1, 0.3, 0.5, 0.729, 0.9, 0.99] {
            let c = ConeConstants::from_rates(la, 1.0);
            let ratio = la / (1.0 - la);
            assert!(2.0 * la.powi(c.n0 as i32) <= ratio);
            if c.n0 > 1 {
                assert!(2.0 * la.powi(c.n0 as i32 - 1) > ratio);
            }
        }
    }

    #[test]
    fn holder_constant_examples() {
        let c = HolderDensity::constant(DEFAULT_GRID, 1.0);
        assert_eq!(holder_log_constant(&c, 1.0), 0.0);
        let rho = HolderDensity::from_fn(DEFAULT_GRID, 1.0, |x| (2.0 * PI * x).sin().exp()).unwrap();
        let k = holder_log_constant(&rho, 1.0);
        assert!((k - 2.0 * PI).abs() / (2.0 * PI) < 0.02, "K = {k}");
        // off-grid path agrees
        let rho = HolderDensity::from_fn(1000, 1.0, |x| (2.0 * PI * x).sin().exp()).unwrap();
        let k = holder_log_constant(&rho, 1.0);
        assert!((k - 2.0 * PI).abs() / (2.0 * PI) < 0.02, "K = {k}");
    }

    #[test]
    fn doubling_invariant_density_is_lebesgue() {
        let inv = invariant_density(&doubling(), 1e-12).unwrap();
        assert!(inv.residual <= 1e-12);
        assert!(inv.density.samples().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(inv.regularity_ok);
    }

    #[test]
    fn perturbed_invariant_density() {
        let inv = invariant_density_on(&perturbed(), 1e-11, 1024).unwrap();
        assert!(inv.residual <= 1e-11);
        assert!(inv.density.min() > 0.0);
        assert!((inv.density.integral() - 1.0).abs() < 1e-12);
        assert!(inv.regularity_ok, "{} vs {}", inv.log_holder, inv.cone_bound);
    }

    #[test]
    fn unreachable_tolerance_stalls() {
        let r = invariant_density_on(&perturbed(), 1e-30, 256);
        assert!(matches!(r, Err(Error::NoConvergence(_))));
        assert!(invariant_density(&perturbed(), 0.0).is_err());
    }

    #[test]
    fn doubling_fourier_correlations() {
        let map = doubling();
        let inv = HolderDensity::constant(DEFAULT_GRID, 1.0);
        let c = expanding_decay(&map, &inv, |x| (2.0 * PI * x).cos(), |x| (2.0 * PI * x).cos(), 10).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-6), "{c:?}");
        let c = expanding_decay(&map, &inv, |_| 1.0, |_| 1.0, 5).unwrap();
        assert!(c.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn split_off_constant_keeps_positivity() {
        let map = perturbed();
        let k = cone_constants(&map);
        let rho = HolderDensity::from_fn(DEFAULT_GRID, 1.0, |x| (0.5 * (2.0 * PI * x).cos()).exp()).unwrap();
        let rest = rho.split_off_constant(k.tau).unwrap();
        assert!((rest.integral() - 1.0).abs() < 1e-12);
        assert!(rho.split_off_constant(0.999).is_none());
    }
}
