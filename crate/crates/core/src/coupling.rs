//! Partial couplings of foliated measures along stable leaves, their
//! iteration into a global coupling, and the resulting `D_s^beta` bound.

use serde::{Deserialize, Serialize};

use crate::densities::ConeConstants;
use crate::error::{Error, Result};
use crate::foliated::{
    grid_measure, leaf_pushforward_with, leaf_rates, FoliatedMeasure, LeafRates, LeafSegment, RailChart,
};
use crate::geometry::{torus_delta, wrap_delta, TORUS_DIAMETER};
use crate::maps::{direction_fields, DirectionField, ToralMap};
use crate::transport::{exact_cost, CostSpec};

/// Default floor for the working regularity bound `K0`.
pub const K0_FLOOR: f64 = 2.0;
const MAX_SHRINK: usize = 20;
const MAX_RESTARTS: usize = 20;
// below this a path length is roundoff
const PATH_ROUNDOFF: f64 = 1e-12;

/// Shortest stable translations between block centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StablePaths {
    pub blocks_per_side: usize,
    pub centers: Vec<[f64; 2]>,
    /// Row-major signed shift `t` with `c_a + t e_s` within `delta_minus / 100` of `c_b`.
    pub shifts: Vec<f64>,
    /// Largest `|t|` over all pairs.
    pub l0_tilde: f64,
}

const SEARCH_LIMIT: i64 = 200_000;

/// Search, for every ordered pair of blocks, the shortest stable segment from
/// one centre returning within `delta_minus / 100` (unstable distance) of the other.
pub fn stable_paths(map: &ToralMap, blocks_per_side: usize, delta_minus: f64) -> Result<StablePaths> {
    let chart = RailChart::new(map);
    let n = blocks_per_side;
    let centers: Vec<[f64; 2]> = (0..n * n)
        .map(|b| {
            let (i, j) = (b % n, b / n);
            chart.point((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) * chart.length / n as f64)
        })
        .collect();
    let (eu, es) = (map.e_u, map.e_s);
    // (1, 0) = a e_u + b e_s
    let det = eu[0] * es[1] - eu[1] * es[0];
    let (a1, b1) = (es[1] / det, -eu[1] / det);
    let tol = delta_minus / 100.0;
    let mut shifts = vec![0.0; n * n * n * n];
    for a in 0..n * n {
        for b in 0..n * n {
            if a == b {
                continue;
            }
            let (ca, cb) = (centers[a], centers[b]);
            let dy = wrap_delta(cb[1] - ca[1]);
            let mut best: Option<f64> = None;
            for step in 0..SEARCH_LIMIT {
                let ks: &[i64] = if step == 0 { &[0] } else { &[step, -step] };
                let mut any_closer = false;
                for &k in ks {
                    let tk = (dy + k as f64) / es[1];
                    if let Some(b) = best {
                        if tk.abs() - 1.0 / es[1].abs() > b.abs() {
                            continue;
                        }
                    }
                    any_closer = true;
                    let dx = wrap_delta(ca[0] + tk * es[0] - cb[0]);
                    // the crossing point is c_b + dx (1, 0)
                    if (dx * a1).abs() <= tol {
                        let t = tk - dx * b1;
                        if best.map_or(true, |b| t.abs() < b.abs()) {
                            best = Some(t);
                        }
                    }
                }
                if !any_closer {
                    break;
                }
            }
            match best {
                Some(t) => shifts[a * n * n + b] = t,
                None => {
                    return Err(Error::HolonomyOutOfRange {
                        l0: SEARCH_LIMIT as f64 / es[1].abs(),
                    })
                }
            }
        }
    }
    let l0_tilde = shifts.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    Ok(StablePaths {
        blocks_per_side,
        centers,
        shifts,
        l0_tilde,
    })
}

impl StablePaths {
    pub fn shift(&self, a: usize, b: usize) -> f64 {
        self.shifts[a * self.centers.len() + b]
    }

    pub fn block_of(&self, chart: &RailChart, p: [f64; 2]) -> usize {
        let n = self.blocks_per_side;
        let (x, s) = chart.coords(p);
        let i = ((x * n as f64) as usize).min(n - 1);
        let j = ((s / chart.length * n as f64) as usize).min(n - 1);
        i + n * j
    }
}

/// Scales and constants of the partial-coupling construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingParams {
    pub blocks_per_side: usize,
    pub delta_minus: f64,
    pub delta_plus: f64,
    /// Initial cap on the tent height as a fraction of the local density.
    pub tent_fraction: f64,
    /// Working regularity bound; residuals must stay within `2 k0`.
    pub k0: f64,
    pub n0: u32,
    pub l0: f64,
    pub alpha0_cap: f64,
    pub rates: LeafRates,
    pub paths: StablePaths,
    /// Max angle between the computed stable field and the linear stable direction.
    pub stable_field_angle: f64,
}

impl CouplingParams {
    /// Defaults: 8 x 8 blocks, `delta- = 0.1`, `delta+ = 0.45`, `K0 = max(formula, K0_FLOOR)`.
    pub fn for_map(map: &ToralMap, beta: f64) -> Result<Self> {
        Self::with_scales(map, beta, 8, 0.1, 0.45)
    }

    pub fn with_scales(
        map: &ToralMap,
        beta: f64,
        blocks_per_side: usize,
        delta_minus: f64,
        delta_plus: f64,
    ) -> Result<Self> {
        if !(delta_minus > 0.0 && delta_plus >= delta_minus) {
            return Err(Error::InvalidInput("need 0 < delta- <= delta+".into()));
        }
        let rates = leaf_rates(map, beta)?;
        let cone = ConeConstants::from_rates(rates.lambda_prime, rates.h_est);
        let paths = stable_paths(map, blocks_per_side, delta_minus)?;
        let linear_l0 = paths.l0_tilde + 2.0 * delta_plus;
        let (l0, stable_field_angle) = if map.epsilon == 0.0 {
            (linear_l0, 0.0)
        } else {
            let fields = direction_fields(map, 64, 40)?;
            let linear = DirectionField::constant(64, map.e_s);
            (2.0 * linear_l0, fields.stable.max_angle_to(&linear))
        };
        Ok(CouplingParams {
            blocks_per_side,
            delta_minus,
            delta_plus,
            tent_fraction: 0.5,
            k0: cone.k0.max(K0_FLOOR),
            n0: cone.n0,
            l0,
            alpha0_cap: 1.0,
            rates,
            paths,
            stable_field_angle,
        })
    }
}

/// One matched pair of leaf slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePair {
    pub source_segment: usize,
    /// Arclength of the tent centre on the source segment.
    pub source_arclength: f64,
    pub target_segment: usize,
    pub target_arclength: f64,
    pub mass: f64,
    /// Tent height before the pair weight is applied.
    pub height: f64,
    /// Largest stable-path length used by the pair, error term included.
    pub path_length: f64,
    /// Mass-weighted mean of `path^beta`.
    pub mean_cost: f64,
}

/// Mass-`tau` coupling concentrated near the diagonal of the stable foliation.
#[derive(Debug, Clone)]
pub struct PartialCoupling {
    pub tau: f64,
    /// Coupled mass per unit transverse mass (the measured `tau~`).
    pub slice_mass: f64,
    pub pairs: Vec<SlicePair>,
    /// `(mu_i - p_i gamma) / (1 - tau)`.
    pub residual1: FoliatedMeasure,
    pub residual2: FoliatedMeasure,
    /// First and second marginals of the coupling as weighted points (mass `tau`).
    pub source_marginal: Vec<([f64; 2], f64)>,
    pub target_marginal: Vec<([f64; 2], f64)>,
    pub blocks: (usize, usize),
    pub stable_shift: f64,
    pub tent_fraction: f64,
    /// Holonomy mismatch bound added to every path length.
    pub holonomy_error: f64,
}

impl PartialCoupling {
    /// `sum mass * mean_cost`.
    pub fn cost(&self) -> f64 {
        self.pairs.iter().map(|p| p.mass * p.mean_cost).sum()
    }

    pub fn max_path_length(&self) -> f64 {
        self.pairs.iter().map(|p| p.path_length).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy)]
struct Slice {
    seg: usize,
    s: f64,
    t: f64,
}

fn solve2(a: [f64; 2], b: [f64; 2], r: [f64; 2]) -> Option<(f64, f64)> {
    // x a + y b = r
    let det = a[0] * b[1] - a[1] * b[0];
    if det.abs() < 1e-14 {
        return None;
    }
    Some(((r[0] * b[1] - r[1] * b[0]) / det, (a[0] * r[1] - a[1] * r[0]) / det))
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Segments crossing the stable disc `c + t e_s`, `|t| <= radius`, away from their ends.
fn disc_slices(mu: &FoliatedMeasure, c: [f64; 2], es: [f64; 2], radius: f64, margin: f64) -> Vec<Slice> {
    let mut out = Vec::new();
    for (k, seg) in mu.segments.iter().enumerate() {
        let r0 = torus_delta(c, seg.base);
        for a in -1..=1 {
            for b in -1..=1 {
                let r = [r0[0] + a as f64, r0[1] + b as f64];
                // r + s dir = t e_s
                if let Some((s, t)) = solve2(seg.dir, [-es[0], -es[1]], [-r[0], -r[1]]) {
                    if s >= margin && s <= seg.length - margin && t.abs() <= radius {
                        out.push(Slice { seg: k, s, t });
                    }
                }
            }
        }
    }
    out
}

/// Monotone coupling of two weighted 1D families, total mass `m`.
fn monotone_pairs(xs: &[(f64, f64)], ys: &[(f64, f64)], m: f64) -> Vec<(usize, usize, f64)> {
    let mut ix: Vec<usize> = (0..xs.len()).collect();
    let mut iy: Vec<usize> = (0..ys.len()).collect();
    ix.sort_by(|a, b| xs[*a].0.total_cmp(&xs[*b].0));
    iy.sort_by(|a, b| ys[*a].0.total_cmp(&ys[*b].0));
    let tx: f64 = xs.iter().map(|v| v.1).sum();
    let ty: f64 = ys.iter().map(|v| v.1).sum();
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    let mut rx = xs[ix[0]].1 / tx;
    let mut ry = ys[iy[0]].1 / ty;
    while i < ix.len() && j < iy.len() {
        let q = rx.min(ry);
        if q > 0.0 {
            out.push((ix[i], iy[j], q * m));
        }
        rx -= q;
        ry -= q;
        if rx <= 1e-15 && i < ix.len() {
            i += 1;
            if i < ix.len() {
                rx = xs[ix[i]].1 / tx;
            }
        }
        if ry <= 1e-15 && j < iy.len() {
            j += 1;
            if j < iy.len() {
                ry = ys[iy[j]].1 / ty;
            }
        }
    }
    out
}

fn node_masses(seg: &LeafSegment) -> Vec<f64> {
    let h = seg.step();
    let last = seg.density.len() - 1;
    seg.density
        .iter()
        .enumerate()
        .map(|(k, d)| seg.weight * d * if k == 0 || k == last { 0.5 * h } else { h })
        .collect()
}

fn quad_weight(k: usize, n: usize, h: f64) -> f64 {
    if k == 0 || k + 1 == n {
        0.5 * h
    } else {
        h
    }
}

/// Rebuild a segment from absolute node masses.
fn from_node_masses(seg: &LeafSegment, masses: &[f64]) -> Result<LeafSegment> {
    let h = seg.step();
    let n = masses.len();
    let abs: Vec<f64> = masses.iter().enumerate().map(|(k, m)| m / quad_weight(k, n, h)).collect();
    if abs.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::ConeViolation("coupling removed all local mass".into()));
    }
    let mut out = seg.clone();
    let total: f64 = masses.iter().sum();
    out.density = abs.iter().map(|v| v / total).collect();
    out.weight = total;
    Ok(out)
}

/// Per-segment map of node removals, for unit slice mass.
type Removal = std::collections::BTreeMap<usize, Vec<f64>>;

struct Plan {
    pairs: Vec<SlicePair>,
    remove1: Removal,
    remove2: Removal,
    // unit-mass marginals
    source_points: Vec<([f64; 2], f64)>,
    target_points: Vec<([f64; 2], f64)>,
    blocks: (usize, usize),
    shift: f64,
    holonomy_error: f64,
}

fn block_masses(mu: &FoliatedMeasure, chart: &RailChart, paths: &StablePaths) -> Vec<f64> {
    let mut acc = vec![0.0; paths.centers.len()];
    for (p, m) in mu.sample_masses() {
        acc[paths.block_of(chart, p)] += m;
    }
    acc
}

fn build_plan(mu1: &FoliatedMeasure, mu2: &FoliatedMeasure, map: &ToralMap, params: &CouplingParams) -> Result<Plan> {
    let chart = RailChart::new(map);
    let paths = &params.paths;
    let nb = paths.centers.len();
    let floor = 1.0 / nb as f64;
    let m1 = block_masses(mu1, &chart, paths);
    let m2 = block_masses(mu2, &chart, paths);
    let common = (0..nb)
        .filter(|&b| m1[b] >= floor && m2[b] >= floor)
        .max_by(|&a, &b| m1[a].min(m2[a]).total_cmp(&m1[b].min(m2[b])));
    let argmax = |m: &[f64]| (0..nb).max_by(|&a, &b| m[a].total_cmp(&m[b])).expect("blocks exist");
    let (b1, b2) = match common {
        Some(b) => (b, b),
        None => (argmax(&m1), argmax(&m2)),
    };
    if m1[b1] < floor || m2[b2] < floor {
        return Err(Error::NoOverlap { blocks: nb });
    }
    let shift = if b1 == b2 { 0.0 } else { paths.shift(b1, b2) };
    let es = map.e_s;
    let h_leaf = crate::foliated::H_LEAF;
    let tent_radius = params.delta_minus / 10.0;
    let sin_gap = crate::geometry::line_angle(map.e_u, es).sin();
    let margin = tent_radius + 2.0 * params.delta_minus / 100.0 / sin_gap + 2.0 * h_leaf;
    let s1 = disc_slices(mu1, paths.centers[b1], es, params.delta_minus, margin);
    let s2 = disc_slices(mu2, paths.centers[b2], es, params.delta_minus, margin);
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::NoOverlap { blocks: nb });
    }
    let eta1: Vec<(f64, f64)> = s1.iter().map(|s| (s.t, mu1.segments[s.seg].weight)).collect();
    let eta2: Vec<(f64, f64)> = s2.iter().map(|s| (s.t, mu2.segments[s.seg].weight)).collect();
    let w1: f64 = eta1.iter().map(|v| v.1).sum();
    let w2: f64 = eta2.iter().map(|v| v.1).sum();
    let m_tilde = w1.min(w2);
    let matched = monotone_pairs(&eta1, &eta2, m_tilde);

    let beta = mu1.beta;
    let holonomy_error = params.stable_field_angle * params.l0;
    let mut pairs = Vec::with_capacity(matched.len());
    let mut remove1 = Removal::new();
    let mut remove2 = Removal::new();
    let mut source_points = Vec::new();
    let mut target_points = Vec::new();
    for (ix, iy, gamma) in matched {
        let (x, y) = (s1[ix], s2[iy]);
        let seg1 = &mu1.segments[x.seg];
        let seg2 = &mu2.segments[y.seg];
        let (h1, n1) = (seg1.step(), seg1.density.len());
        let (h2, n2) = (seg2.step(), seg2.density.len());
        let tent: Vec<f64> = (0..n1)
            .map(|k| (1.0 - (k as f64 * h1 - x.s).abs() / tent_radius).max(0.0))
            .collect();
        let unit_integral: f64 = tent.iter().enumerate().map(|(k, v)| v * quad_weight(k, n1, h1)).sum();
        let height = 1.0 / unit_integral;
        let y_point = seg2.point(y.s);
        let r1 = remove1.entry(x.seg).or_insert_with(|| vec![0.0; n1]);
        let r2 = remove2.entry(y.seg).or_insert_with(|| vec![0.0; n2]);
        let (mut max_path, mut cost_acc) = (0.0f64, 0.0);
        for k in (0..n1).filter(|&k| tent[k] > 0.0) {
            let node_mass = gamma * height * tent[k] * quad_weight(k, n1, h1);
            r1[k] += node_mass;
            let z = seg1.point_unwrapped(k as f64 * h1);
            source_points.push((seg1.point(k as f64 * h1), node_mass));
            let q = [z[0] + shift * es[0], z[1] + shift * es[1]];
            let rel = torus_delta(y_point, q);
            let r = [rel[0] + y.s * seg2.dir[0], rel[1] + y.s * seg2.dir[1]];
            let t2 = -cross(r, seg2.dir) / cross(es, seg2.dir);
            let sigma = dot([r[0] + t2 * es[0], r[1] + t2 * es[1]], seg2.dir);
            if !(0.0..=seg2.length).contains(&sigma) {
                return Err(Error::HolonomyOutOfRange { l0: params.l0 });
            }
            let mut path = (shift + t2).abs() + holonomy_error;
            if path < PATH_ROUNDOFF {
                path = 0.0;
            }
            if path > params.l0 {
                return Err(Error::HolonomyOutOfRange { l0: params.l0 });
            }
            max_path = max_path.max(path);
            cost_acc += node_mass * path.powf(beta);
            let f = sigma / h2;
            let k0 = (f.floor() as usize).min(n2 - 2);
            let t = f - k0 as f64;
            r2[k0] += node_mass * (1.0 - t);
            r2[k0 + 1] += node_mass * t;
            target_points.push((seg2.point(sigma), node_mass));
        }
        pairs.push(SlicePair {
            source_segment: x.seg,
            source_arclength: x.s,
            target_segment: y.seg,
            target_arclength: y.s,
            mass: gamma,
            height,
            path_length: max_path,
            mean_cost: cost_acc / gamma,
        });
    }
    Ok(Plan {
        pairs,
        remove1,
        remove2,
        source_points,
        target_points,
        blocks: (b1, b2),
        shift,
        holonomy_error,
    })
}

/// Largest slice mass keeping every node above `(1 - fraction)` of its mass.
fn mass_cap(mu: &FoliatedMeasure, removal: &Removal, fraction: f64) -> f64 {
    let mut cap = f64::INFINITY;
    for (&k, r) in removal {
        let masses = node_masses(&mu.segments[k]);
        for (m, r) in masses.iter().zip(r) {
            if *r > 0.0 {
                cap = cap.min(fraction * m / r);
            }
        }
    }
    cap
}

fn residual(mu: &FoliatedMeasure, removal: &Removal, slice_mass: f64, tau: f64) -> Result<FoliatedMeasure> {
    let mut out = mu.clone();
    for (&k, r) in removal {
        let masses: Vec<f64> = node_masses(&mu.segments[k])
            .iter()
            .zip(r)
            .map(|(m, r)| m - slice_mass * r)
            .collect();
        out.segments[k] = from_node_masses(&mu.segments[k], &masses)?;
    }
    out.segments.iter_mut().for_each(|s| s.weight /= 1.0 - tau);
    out.declared_k = out.regularity().k_density;
    Ok(out)
}

/// Couple part of `mu1` with part of `mu2` along stable paths of length at most `L0`.
///
/// With `target_tau`, the coupled mass is scaled down to exactly that value
/// when feasible; otherwise the largest admissible mass is used.
pub fn partial_couple(
    mu1: &FoliatedMeasure,
    mu2: &FoliatedMeasure,
    map: &ToralMap,
    params: &CouplingParams,
    target_tau: Option<f64>,
) -> Result<PartialCoupling> {
    for mu in [mu1, mu2] {
        let k = mu.regularity().k_density;
        if k > params.k0 * (1.0 + 1e-9) {
            return Err(Error::ConeViolation(format!(
                "input leaf constant {k} exceeds K0 = {}",
                params.k0
            )));
        }
    }
    let plan = build_plan(mu1, mu2, map, params)?;
    let transverse: f64 = plan.pairs.iter().map(|p| p.mass).sum();
    let mut fraction = params.tent_fraction;
    for _ in 0..MAX_SHRINK {
        let cap = mass_cap(mu1, &plan.remove1, fraction).min(mass_cap(mu2, &plan.remove2, fraction));
        let mut slice_mass = cap;
        if let Some(t) = target_tau {
            if t > transverse * cap {
                return Err(Error::Infeasible(format!(
                    "requested coupled mass {t} exceeds the feasible {}",
                    transverse * cap
                )));
            }
            slice_mass = t / transverse;
        }
        let tau = transverse * slice_mass;
        let r1 = residual(mu1, &plan.remove1, slice_mass, tau)?;
        let r2 = residual(mu2, &plan.remove2, slice_mass, tau)?;
        let bound = 2.0 * params.k0;
        if r1.declared_k <= bound && r2.declared_k <= bound {
            let scale = |pts: &[([f64; 2], f64)]| pts.iter().map(|(p, m)| (*p, m * slice_mass)).collect();
            let mut pairs = plan.pairs.clone();
            pairs.iter_mut().for_each(|p| p.mass *= slice_mass);
            return Ok(PartialCoupling {
                tau,
                slice_mass,
                pairs,
                residual1: r1,
                residual2: r2,
                source_marginal: scale(&plan.source_points),
                target_marginal: scale(&plan.target_points),
                blocks: plan.blocks,
                stable_shift: plan.shift,
                tent_fraction: fraction,
                holonomy_error: plan.holonomy_error,
            });
        }
        if target_tau.is_some() {
            return Err(Error::Infeasible("requested mass breaks residual regularity".into()));
        }
        fraction *= 0.5;
    }
    Err(Error::ConeViolation("no tent height keeps the residuals within 2 K0".into()))
}

/// `beta0`, the series bound and the decay rule for given coupling constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnosovConstants {
    pub beta: f64,
    pub tau: f64,
    pub n0: u32,
    pub l0: f64,
    pub lambda0: f64,
    /// Stable contraction used by the decay rule.
    pub lambda: f64,
    pub beta0: f64,
    /// `(1 - tau) lambda0^(-beta n0)`.
    pub ratio: f64,
    /// `tau L0^beta / (1 - ratio)`, infinite when the series diverges.
    pub series_bound: f64,
}

impl AnosovConstants {
    /// `C lambda^(beta n)`.
    pub fn decay(&self, n: u32) -> f64 {
        self.series_bound * self.lambda.powf(self.beta * n as f64)
    }
}

/// Closed-form constants; `alpha0_cap` bounds `beta0` from above.
pub fn anosov_constants_with(lambda0: f64, lambda: f64, beta: f64, tau: f64, n0: u32, l0: f64, alpha0_cap: f64) -> Result<AnosovConstants> {
    if !(tau > 0.0 && tau < 1.0) || n0 == 0 {
        return Err(Error::InvalidInput(format!("need tau in (0, 1) and n0 >= 1, got {tau}, {n0}")));
    }
    let beta0 = alpha0_cap.min((1.0 - tau).ln() / (n0 as f64 * lambda0.ln()));
    let ratio = (1.0 - tau) * lambda0.powf(-beta * n0 as f64);
    let series_bound = if ratio < 1.0 {
        tau * l0.powf(beta) / (1.0 - ratio)
    } else {
        f64::INFINITY
    };
    Ok(AnosovConstants {
        beta,
        tau,
        n0,
        l0,
        lambda0,
        lambda,
        beta0,
        ratio,
        series_bound,
    })
}

pub fn anosov_constants(map: &ToralMap, beta: f64, tau: f64, n0: u32, l0: f64) -> Result<AnosovConstants> {
    anosov_constants_with(map.lambda0, map.stable_contraction, beta, tau, n0, l0, 1.0)
}

/// Summary of a [`stable_coupling`] run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub rounds: usize,
    pub tau: f64,
    /// `tau (1 - tau)^j`.
    pub masses: Vec<f64>,
    /// Recorded cost of round `j`, pulled back by `j n0` steps.
    pub costs: Vec<f64>,
    /// Mean `d_s^beta` of the pairs of round `j` before pulling back.
    pub mean_costs: Vec<f64>,
    /// Sum of the recorded costs plus the closed-form tail after the last round.
    pub ds_bound: f64,
    /// `sum costs + residual mass * diam^beta`: bounds `D^beta` without the tail series.
    pub d_beta_bound: f64,
    pub closed_form_bound: f64,
    pub residual_mass: f64,
    pub beta: f64,
    pub beta0: f64,
    pub lambda0: f64,
    pub n0: u32,
    pub l0: f64,
    pub k0: f64,
    pub max_path_length: f64,
    pub holonomy_error: f64,
    /// Times the run restarted with a smaller `tau`.
    pub restarts: usize,
}

/// Round-by-round marginals and the final residuals, for reconstruction checks.
#[derive(Debug, Clone)]
pub struct CouplingTrace {
    pub source: Vec<Vec<([f64; 2], f64)>>,
    pub target: Vec<Vec<([f64; 2], f64)>>,
    pub residual1: FoliatedMeasure,
    pub residual2: FoliatedMeasure,
}

/// Rounds `j = 0..=rounds` of coupling and `n0`-step pushforward of the residuals.
pub fn stable_coupling(
    mu1: &FoliatedMeasure,
    mu2: &FoliatedMeasure,
    map: &ToralMap,
    beta: f64,
    rounds: usize,
    params: &CouplingParams,
) -> Result<(CouplingReport, CouplingTrace)> {
    if rounds < 1 {
        return Err(Error::InvalidInput("rounds must be at least 1".into()));
    }
    if mu1.beta != beta || mu2.beta != beta {
        return Err(Error::InvalidInput("measures carry a different exponent".into()));
    }
    let n0 = params.n0;
    let mut tau: Option<f64> = None;
    let mut restarts = 0;
    'restart: loop {
        let mut a = mu1.clone();
        let mut b = mu2.clone();
        let mut couplings = Vec::with_capacity(rounds + 1);
        for j in 0..=rounds {
            let pc = match partial_couple(&a, &b, map, params, tau) {
                Ok(pc) => pc,
                Err(Error::Infeasible(_)) if restarts < MAX_RESTARTS => {
                    let feasible = partial_couple(&a, &b, map, params, None)?.tau;
                    tau = Some(feasible);
                    restarts += 1;
                    continue 'restart;
                }
                Err(e) => return Err(e),
            };
            if j == 0 && tau.is_none() {
                tau = Some(pc.tau);
                let c = anosov_constants_with(map.lambda0, map.stable_contraction, beta, pc.tau, n0, params.l0, params.alpha0_cap)?;
                if beta >= c.beta0 || c.ratio >= 1.0 {
                    return Err(Error::DivergentSeries { ratio: c.ratio });
                }
            }
            if j < rounds {
                a = leaf_pushforward_with(map, &pc.residual1, n0 as usize, params.rates)?;
                b = leaf_pushforward_with(map, &pc.residual2, n0 as usize, params.rates)?;
            }
            couplings.push(pc);
        }
        let tau = tau.expect("set in round 0");
        let c = anosov_constants_with(map.lambda0, map.stable_contraction, beta, tau, n0, params.l0, params.alpha0_cap)?;
        if beta >= c.beta0 || c.ratio >= 1.0 {
            return Err(Error::DivergentSeries { ratio: c.ratio });
        }
        let mut masses = Vec::new();
        let mut costs = Vec::new();
        let mut mean_costs = Vec::new();
        let mut left = 1.0;
        for (j, pc) in couplings.iter().enumerate() {
            let mean = pc.cost() / pc.tau;
            let pull = map.lambda0.powf(-(j as f64) * beta * n0 as f64);
            masses.push(tau * left);
            costs.push(tau * left * mean * pull);
            mean_costs.push(mean);
            left *= 1.0 - tau;
        }
        let tail = tau * params.l0.powf(beta) * c.ratio.powi(rounds as i32 + 1) / (1.0 - c.ratio);
        let spent: f64 = costs.iter().sum();
        let last = couplings.last().expect("at least one round");
        let report = CouplingReport {
            rounds,
            tau,
            masses,
            costs,
            mean_costs,
            ds_bound: spent + tail,
            d_beta_bound: spent + left * TORUS_DIAMETER.powf(beta),
            closed_form_bound: c.series_bound,
            residual_mass: left,
            beta,
            beta0: c.beta0,
            lambda0: map.lambda0,
            n0,
            l0: params.l0,
            k0: params.k0,
            max_path_length: couplings.iter().map(|p| p.max_path_length()).fold(0.0, f64::max),
            holonomy_error: last.holonomy_error,
            restarts,
        };
        let trace = CouplingTrace {
            source: couplings.iter().map(|p| p.source_marginal.clone()).collect(),
            target: couplings.iter().map(|p| p.target_marginal.clone()).collect(),
            residual1: last.residual1.clone(),
            residual2: last.residual2.clone(),
        };
        return Ok((report, trace));
    }
}

fn pull_back(map: &ToralMap, pts: &[([f64; 2], f64)], steps: usize, scale: f64) -> Result<Vec<([f64; 2], f64)>> {
    use rayon::prelude::*;
    pts.par_iter()
        .map(|(p, m)| {
            let mut q = *p;
            for _ in 0..steps {
                q = map.inverse(q)?;
            }
            Ok((q, m * scale))
        })
        .collect()
}

/// `W1` between `mu` and its reconstruction from a coupling trace, both
/// deposited on the `grid x grid` node grid.
pub fn reconstruction_error(
    map: &ToralMap,
    mu: &FoliatedMeasure,
    report: &CouplingReport,
    trace: &CouplingTrace,
    first: bool,
    grid: usize,
) -> Result<f64> {
    let n0 = report.n0 as usize;
    let tau = report.tau;
    let mut pts = Vec::new();
    let mut left = 1.0;
    let rounds = if first { &trace.source } else { &trace.target };
    for (j, r) in rounds.iter().enumerate() {
        pts.extend(pull_back(map, r, j * n0, left)?);
        left *= 1.0 - tau;
    }
    let residual = if first { &trace.residual1 } else { &trace.residual2 };
    pts.extend(pull_back(map, &residual.sample_masses(), report.rounds * n0, left)?);
    let lhs = grid_measure(&mu.sample_masses(), grid);
    let rhs = grid_measure(&pts, grid);
    exact_cost(&lhs, &rhs, &CostSpec::TorusDistance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foliated::{lebesgue_foliated, reweight, H_LEAF};
    use crate::maps::{make_toral_map, Shape2D};

    fn cat() -> ToralMap {
        make_toral_map([[2, 1], [1, 1]], 0.0, Shape2D::sin_y()).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let c = anosov_constants_with(0.381966, 0.381966, 0.1, 0.3, 2, 2.0, 1.0).unwrap();
        assert!((c.ratio - 0.8486).abs() < 1e-4, "{}", c.ratio);
        assert!((c.series_bound - 2.124).abs() < 2e-3, "{}", c.series_bound);
        let c = anosov_constants_with(0.381966, 0.381966, 0.1, 0.3, 2, 2.0, 1.0).unwrap();
        assert!((c.beta0 - 0.1853).abs() < 1e-4, "{}", c.beta0);
        let tiny = anosov_constants_with(0.381966, 0.381966, 0.1, 1e-9, 2, 2.0, 1.0).unwrap();
        assert!(tiny.beta0 < 1e-8);
        let at = anosov_constants_with(0.381966, 0.381966, c.beta0, 0.3, 2, 2.0, 1.0).unwrap();
        assert!((at.ratio - 1.0).abs() < 1e-12);
        assert!(anosov_constants_with(0.38, 0.38, 0.1, 1.0, 2, 2.0, 1.0).is_err());
        assert!((c.decay(0) - c.series_bound).abs() < 1e-15);
    }

    #[test]
    fn tent_integral_closed_form() {
        // h delta- / 10 for a tent fully inside the leaf
        let (h, dm) = (2.0, 0.1);
        let n = 2001;
        let step = 0.2 / (n - 1) as f64;
        let vals: Vec<f64> = (0..n).map(|k| (h - 10.0 * h / dm * (k as f64 * step - 0.1).abs()).max(0.0)).collect();
        let integral: f64 = vals.iter().enumerate().map(|(k, v)| v * quad_weight(k, n, step)).sum();
        assert!((integral - h * dm / 10.0).abs() < 1e-12);
    }

    #[test]
    fn paths_return_near_centres() {
        let map = cat();
        let paths = stable_paths(&map, 4, 0.1).unwrap();
        let chart = RailChart::new(&map);
        let _ = chart;
        for a in 0..16 {
            for b in 0..16 {
                if a == b {
                    continue;
                }
                let t = paths.shift(a, b);
                let (ca, cb) = (paths.centers[a], paths.centers[b]);
                let q = [ca[0] + t * map.e_s[0], ca[1] + t * map.e_s[1]];
                let d = torus_delta(cb, q);
                // unstable offset only
                assert!((d[0] * map.e_s[1] - d[1] * map.e_s[0]).abs() <= 1e-3 + 1e-12);
                assert!(t.abs() <= paths.l0_tilde);
            }
        }
    }

    #[test]
    fn symmetric_coupling() {
        let map = cat();
        let beta = 0.001;
        let params = CouplingParams::for_map(&map, beta).unwrap();
        let mu = lebesgue_foliated(&map, 64, beta);
        let pc = partial_couple(&mu, &mu, &map, &params, None).unwrap();
        assert!(pc.tau > 0.0 && pc.tau < 1.0);
        assert!(pc.cost() < 1e-12, "{}", pc.cost());
        for (a, b) in pc.residual1.segments.iter().zip(&pc.residual2.segments) {
            assert!((a.weight - b.weight).abs() < 1e-12);
            assert!(a.density.iter().zip(&b.density).all(|(x, y)| (x - y).abs() < 1e-9));
        }
        assert!((pc.residual1.mass() - 1.0).abs() < 1e-10);
        let m: f64 = pc.source_marginal.iter().map(|(_, m)| m).sum();
        assert!((m - pc.tau).abs() < 1e-12);
        assert!(pc.residual1.regularity().k_density <= 2.0 * params.k0 * 1.1);
    }

    #[test]
    fn coupling_lebesgue_with_reweighted() {
        let map = cat();
        let beta = 0.0005;
        let params = CouplingParams::for_map(&map, beta).unwrap();
        let mu1 = lebesgue_foliated(&map, 64, beta);
        let mu2 = reweight(&mu1, |p| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * p[0]).cos()).unwrap();
        let pc = partial_couple(&mu1, &mu2, &map, &params, None).unwrap();
        assert!(pc.pairs.iter().all(|p| p.path_length <= params.l0));
        let (report, trace) = stable_coupling(&mu1, &mu2, &map, beta, 2, &params).unwrap();
        assert!((report.residual_mass - (1.0 - report.tau).powi(3)).abs() < 1e-12);
        assert!(report.ds_bound <= report.closed_form_bound);
        let err = reconstruction_error(&map, &mu1, &report, &trace, true, 32).unwrap();
        assert!(err <= 3.0 * H_LEAF, "{err}");
        let err = reconstruction_error(&map, &mu2, &report, &trace, false, 32).unwrap();
        assert!(err <= 3.0 * H_LEAF, "{err}");
    }

    #[test]
    fn divergent_series_rejected() {
        let map = cat();
        let beta = 0.5;
        let params = CouplingParams::for_map(&map, beta).unwrap();
        let mu = lebesgue_foliated(&map, 32, beta);
        let r = stable_coupling(&mu, &mu, &map, beta, 1, &params);
        assert!(matches!(r, Err(Error::DivergentSeries { .. })), "{r:?}");
    }
}
