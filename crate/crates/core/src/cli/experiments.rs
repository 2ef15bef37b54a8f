use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;

use super::config::{CostKind, ExperimentConfig, MethodKind};
use super::io::read_measure;
use super::{Cell, ExperimentReport, Table, Threshold};
use crate::correlate::{
    correlation_sequence, escape_time, fit_decay_window, lebesgue_grid, transfer_correlation_sequence, DecayFit,
    Observable,
};
use crate::coupling::{reconstruction_error, stable_coupling as couple, CouplingParams};
use crate::densities::{birkhoff_histogram, cone_constants, expanding_decay as decay_1d, invariant_density_on};
use crate::error::{Error, Result};
use crate::foliated::{lebesgue_foliated, reweight, srb_estimate_with, srb_rails, SrbOptions, H_LEAF};
use crate::maps::{direction_fields, make_expanding_map, make_toral_map, DirectionField, ToralMap};
use crate::transport::{
    circle_w1, cost_matrix, exact_cost, exact_plan, sinkhorn_plan, CostSpec, DiscreteMeasure, TransportPlan,
};

const INVARIANT_TOL: f64 = 1e-12;
const BIRKHOFF_ORBITS: usize = 1000;
const BIRKHOFF_BURN_IN: usize = 100;
const ORACLE_TOL: f64 = 1e-6;
const RECONSTRUCTION_GRID: usize = 44;
const C0_GRID: usize = 256;
const SINKHORN_TOL: f64 = 1e-9;

fn report(config: &ExperimentConfig, table: Table) -> ExperimentReport {
    ExperimentReport {
        experiment: config.experiment,
        config: config.clone(),
        constants: BTreeMap::new(),
        fits: json!({}),
        thresholds: Vec::new(),
        pass: false,
        details: json!({}),
        wall_clock_seconds: 0.0,
        table,
    }
}

fn constants(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Fit, or `None` when fewer than four entries of the window clear the noise floor.
fn fit_or_floor(values: &[f64], first: usize, last: usize) -> Result<Option<DecayFit>> {
    match fit_decay_window(values, first, last) {
        Ok(f) => Ok(Some(f)),
        Err(Error::InsufficientData { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn fit_json(fit: &Option<DecayFit>) -> serde_json::Value {
    match fit {
        Some(f) => serde_json::to_value(f).expect("fit serializes"),
        None => json!({ "below_noise_floor": true }),
    }
}

fn torus_map(config: &ExperimentConfig, epsilon: f64) -> Result<ToralMap> {
    let t = &config.torus_map;
    make_toral_map(t.matrix, epsilon, t.shape.clone())
}

fn srb_options(config: &ExperimentConfig) -> SrbOptions {
    SrbOptions {
        rails: config.grids.rails,
        ..SrbOptions::default()
    }
}

fn circle_triangle(x: f64, c: f64) -> f64 {
    crate::geometry::circle_dist(x, c)
}

pub(super) fn expanding_decay(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let c = &config.circle_map;
    let map = make_expanding_map(c.degree, c.amplitude, c.shape)?;
    let cone = cone_constants(&map);
    let n = config.grids.density;
    let inv = invariant_density_on(&map, INVARIANT_TOL, n)?;
    let n_max = config.n_max();
    // Lipschitz observables: Hölder for every exponent
    let f = |x: f64| (std::f64::consts::PI * x).sin().abs();
    let g = |x: f64| circle_triangle(x, 0.3);
    let cs = decay_1d(&map, &inv.density, f, g, n_max)?;
    let last = n_max.min(20);
    let fit = fit_or_floor(&cs, 2, last)?;

    let total = config.birkhoff_samples();
    let steps = total.div_ceil(BIRKHOFF_ORBITS);
    let hist = birkhoff_histogram(&map, n, BIRKHOFF_ORBITS, steps, BIRKHOFF_BURN_IN, config.seed);
    let nodes: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let points: Vec<[f64; 2]> = nodes.iter().map(|&x| [x, 0.0]).collect();
    let density = DiscreteMeasure::normalized(1, points.clone(), inv.density.samples().to_vec())?;
    let empirical = DiscreteMeasure::normalized(1, points, hist)?;
    let birkhoff_w1 = circle_w1(&density, &empirical);

    let mut table = Table::new(&["n", "correlation", "abs_correlation", "theta_power"]);
    for (k, v) in cs.iter().enumerate() {
        table.push(vec![
            Cell::Int(k as i64),
            Cell::Num(*v),
            Cell::Num(v.abs()),
            Cell::Num(cone.theta.powi(k as i32)),
        ]);
    }
    let mut r = report(config, table);
    r.constants = constants(&[
        ("lambda", map.lambda),
        ("alpha", map.alpha),
        ("distortion", map.distortion),
        ("lambda_alpha", cone.lambda_alpha),
        ("k0", cone.k0),
        ("n0", cone.n0 as f64),
        ("tau", cone.tau),
        ("theta", cone.theta),
        ("fit_prefactor", fit.map_or(f64::NAN, |f| f.prefactor)),
        ("fit_rate", fit.map_or(f64::NAN, |f| f.rate)),
    ]);
    r.fits = json!({ "correlation": fit_json(&fit) });
    r.details = json!({
        "invariant_residual": inv.residual,
        "invariant_iterations": inv.iterations,
        "invariant_log_holder": inv.log_holder,
        "birkhoff_samples": BIRKHOFF_ORBITS * steps,
        "birkhoff_w1": birkhoff_w1,
    });
    r.thresholds = vec![
        Threshold::at_most("fitted_rate", fit.map_or(0.0, |f| f.rate), cone.theta + 0.05),
        Threshold::at_most("invariant_log_holder", inv.log_holder, 0.5 * cone.k0 * 1.1),
        Threshold::at_most("birkhoff_w1", birkhoff_w1, 2.0 / n as f64),
    ];
    Ok(r)
}

/// The smooth pair used by the Anosov decay experiment; every Fourier mode is present.
pub fn correlation_observables() -> (Observable, Observable) {
    (
        Observable::exp_trig(0.5, 0.3, [0.1, 0.2]),
        Observable::exp_trig(0.4, -0.6, [0.35, 0.05]),
    )
}

pub(super) fn anosov_decay(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let eps = config.torus_map.epsilon;
    let map = torus_map(config, eps)?;
    let beta = config.beta();
    let n_max = config.n_max();
    let (f, g) = correlation_observables();
    let cs = if eps == 0.0 {
        correlation_sequence(&map, &f, &g, &lebesgue_grid(config.grids.quadrature), n_max)?
    } else {
        let mu = srb_rails(&map, config.grids.srb_steps, srb_options(config));
        transfer_correlation_sequence(&map, &f, &g, &mu, n_max)?
    };
    let last = n_max.min(12);
    let fit = fit_or_floor(&cs, 2, last)?;
    let rate = map.stable_contraction.powf(beta);

    let mut table = Table::new(&["n", "correlation", "abs_correlation", "envelope"]);
    for (k, v) in cs.iter().enumerate() {
        table.push(vec![
            Cell::Int(k as i64),
            Cell::Num(*v),
            Cell::Num(v.abs()),
            Cell::Num(rate.powi(k as i32)),
        ]);
    }
    let mut r = report(config, table);
    r.thresholds.push(Threshold::at_most("fitted_rate", fit.map_or(0.0, |f| f.rate), rate * 1.25));
    let mut details = json!({});
    if eps == 0.0 {
        let a = Observable::cos_mode([1, 0]);
        let b = Observable::cos_mode([2, 1]);
        let escape = escape_time(&map, &a, &b)?;
        let trig = correlation_sequence(&map, &a, &b, &lebesgue_grid(config.grids.quadrature), n_max)?;
        let past = trig[escape.min(trig.len())..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        r.thresholds.push(Threshold::at_most("trig_past_escape", past, ORACLE_TOL));
        details = json!({ "trig_escape_time": escape, "trig_correlations": trig });
    }
    r.constants = constants(&[
        ("lambda_u", map.lambda_u),
        ("lambda_s", map.lambda_s),
        ("lambda0", map.lambda0),
        ("stable_contraction", map.stable_contraction),
        ("beta", beta),
        ("rate_bound", rate),
        ("fit_prefactor", fit.map_or(f64::NAN, |f| f.prefactor)),
        ("fit_rate", fit.map_or(f64::NAN, |f| f.rate)),
    ]);
    r.fits = json!({ "correlation": fit_json(&fit) });
    r.details = details;
    Ok(r)
}

pub(super) fn stable_coupling(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let map = torus_map(config, config.torus_map.epsilon)?;
    let beta = config.beta();
    let rounds = config.rounds();
    let params = CouplingParams::for_map(&map, beta)?;
    let mu1 = lebesgue_foliated(&map, config.grids.leaves, beta);
    let mu2 = reweight(&mu1, |p| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * p[0]).cos())?;
    let (rep, trace) = couple(&mu1, &mu2, &map, beta, rounds, &params)?;
    let rec1 = reconstruction_error(&map, &mu1, &rep, &trace, true, RECONSTRUCTION_GRID)?;
    let rec2 = reconstruction_error(&map, &mu2, &rep, &trace, false, RECONSTRUCTION_GRID)?;

    let mut table = Table::new(&["round", "mass", "cost", "mean_cost", "coupled_mass", "residual_mass"]);
    let mut coupled = 0.0;
    for j in 0..rep.masses.len() {
        coupled += rep.masses[j];
        table.push(vec![
            Cell::Int(j as i64),
            Cell::Num(rep.masses[j]),
            Cell::Num(rep.costs[j]),
            Cell::Num(rep.mean_costs[j]),
            Cell::Num(coupled),
            Cell::Num((1.0 - rep.tau).powi(j as i32 + 1)),
        ]);
    }
    let mut r = report(config, table);
    r.constants = constants(&[
        ("tau", rep.tau),
        ("n0", rep.n0 as f64),
        ("l0", rep.l0),
        ("k0", rep.k0),
        ("beta", beta),
        ("beta0", rep.beta0),
        ("lambda0", rep.lambda0),
        ("closed_form_bound", rep.closed_form_bound),
        ("ds_bound", rep.ds_bound),
    ]);
    let expected = (1.0 - rep.tau).powi(rounds as i32 + 1);
    r.thresholds = vec![
        Threshold::at_most("residual_mass_identity", (rep.residual_mass - expected).abs(), 1e-12),
        Threshold::at_most("max_path_length", rep.max_path_length, rep.l0),
        Threshold::at_most("ds_bound", rep.ds_bound, rep.closed_form_bound),
        Threshold::at_most("reconstruction_w1_source", rec1, 3.0 * H_LEAF),
        Threshold::at_most("reconstruction_w1_target", rec2, 3.0 * H_LEAF),
    ];
    r.details = json!({ "coupling": rep });
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityRow {
    pub epsilon: f64,
    pub c0_distance: f64,
    pub w1: f64,
}

fn srb_coarse(config: &ExperimentConfig, map: &ToralMap, steps: usize) -> Result<DiscreteMeasure> {
    Ok(srb_estimate_with(map, steps, config.grids.srb, srb_options(config))?.aggregate(config.grids.transport))
}

/// `W1` between the SRB estimate of each perturbed map and the unperturbed one,
/// plus the estimator floor `W1(mu0 at steps, mu0 at steps + 1)`.
pub fn stability_rows(config: &ExperimentConfig) -> Result<(Vec<StabilityRow>, f64)> {
    let base = torus_map(config, 0.0)?;
    let steps = config.grids.srb_steps;
    let mu0 = srb_coarse(config, &base, steps)?;
    let next = srb_coarse(config, &base, steps + 1)?;
    let floor = exact_cost(&mu0, &next, &CostSpec::TorusDistance)?.max(1e-12);
    let mut rows = Vec::new();
    for &eps in &config.epsilons() {
        let map = torus_map(config, eps)?;
        let w1 = if eps == 0.0 {
            exact_cost(&mu0, &srb_coarse(config, &map, steps)?, &CostSpec::TorusDistance)?
        } else {
            exact_cost(&srb_coarse(config, &map, steps)?, &mu0, &CostSpec::TorusDistance)?
        };
        rows.push(StabilityRow {
            epsilon: eps,
            c0_distance: map.c0_distance(&base, C0_GRID),
            w1,
        });
    }
    Ok((rows, floor))
}

/// Least-squares `log y = log c + s log x`.
fn loglog_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let m = pts.len() as f64;
    let lx: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    ((my - slope * mx).exp(), slope)
}

pub(super) fn stability(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let (rows, floor) = stability_rows(config)?;
    let mut table = Table::new(&["epsilon", "c0_distance", "w1"]);
    for row in &rows {
        table.push(vec![Cell::Num(row.epsilon), Cell::Num(row.c0_distance), Cell::Num(row.w1)]);
    }
    let positive: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.epsilon > 0.0 && r.w1 > 0.0)
        .map(|r| (r.c0_distance, r.w1))
        .collect();
    if positive.len() < 2 {
        return Err(Error::InsufficientData {
            usable: positive.len(),
            needed: 2,
        });
    }
    let (c_prime, slope) = loglog_fit(&positive);
    let mut sorted: Vec<&StabilityRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
    // worst drop between consecutive epsilons, negative when increasing
    let worst_drop = sorted
        .windows(2)
        .map(|w| w[0].w1 - w[1].w1)
        .fold(f64::NEG_INFINITY, f64::max);
    let zero = rows.iter().filter(|r| r.epsilon == 0.0).map(|r| r.w1).fold(0.0f64, f64::max);

    let mut r = report(config, table);
    r.constants = constants(&[
        ("floor", floor),
        ("beta_prime", slope),
        ("c_prime", c_prime),
        ("srb_steps", config.grids.srb_steps as f64),
        ("transport_grid", config.grids.transport as f64),
    ]);
    r.fits = json!({ "loglog": { "prefactor": c_prime, "exponent": slope, "points": positive.len() } });
    r.thresholds = vec![
        Threshold::at_most("monotone_drop", worst_drop, floor),
        Threshold::above("fitted_exponent", slope, 0.5),
    ];
    if rows.iter().any(|r| r.epsilon == 0.0) {
        r.thresholds.push(Threshold::at_most("zero_row", zero, floor));
    }
    r.details = json!({ "rows": rows });
    Ok(r)
}

fn ot_cost(config: &ExperimentConfig, kind: CostKind, beta: f64, half_width: f64, dim: u8) -> Result<CostSpec> {
    match kind {
        CostKind::D => Ok(CostSpec::TorusDistance),
        CostKind::DBeta => CostSpec::power(beta),
        CostKind::Stable => {
            if dim != 2 {
                return Err(Error::InvalidInput("the stable cost needs measures on the torus".into()));
            }
            let map = torus_map(config, config.torus_map.epsilon)?;
            let field = if map.epsilon == 0.0 {
                DirectionField::constant(64, map.e_s)
            } else {
                direction_fields(&map, 64, 40)?.stable
            };
            CostSpec::stable(beta, Arc::new(field), half_width)
        }
    }
}

/// Solve the transport problem of an `ot` config.
pub(super) fn ot_solve(config: &ExperimentConfig) -> Result<(DiscreteMeasure, DiscreteMeasure, TransportPlan)> {
    let ot = config.ot.as_ref().ok_or_else(|| Error::Config("missing `ot` block".into()))?;
    let mu = read_measure(&ot.mu)?.measure;
    let nu = read_measure(&ot.nu)?.measure;
    if mu.dim() != nu.dim() {
        return Err(Error::InvalidInput("measures live on different spaces".into()));
    }
    let spec = ot_cost(config, ot.cost, ot.beta, ot.half_width, mu.dim())?;
    let cost = cost_matrix(&mu, &nu, &spec);
    let plan = match ot.method {
        MethodKind::Exact => exact_plan(&mu, &nu, &cost)?,
        MethodKind::Sinkhorn => sinkhorn_plan(&mu, &nu, &cost, ot.regularization, SINKHORN_TOL)?,
    };
    Ok((mu, nu, plan))
}

pub(super) fn ot(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let (mu, nu, plan) = ot_solve(config)?;
    let exact = config.ot.as_ref().map(|o| o.method) == Some(MethodKind::Exact);
    let mut table = Table::new(&["source", "target", "mass"]);
    for &(i, j, m) in &plan.entries {
        table.push(vec![Cell::Int(i as i64), Cell::Int(j as i64), Cell::Num(m)]);
    }
    let gap = plan.duality_gap(&mu, &nu);
    let marginal = plan.marginal_error(&mu, &nu);
    let mut r = report(config, table);
    r.constants = constants(&[
        ("cost", plan.cost),
        ("duality_gap", gap),
        ("marginal_error", marginal),
        ("source_points", mu.len() as f64),
        ("target_points", nu.len() as f64),
    ]);
    r.thresholds.push(Threshold::at_most("marginal_error", marginal, 1e-8));
    if exact {
        r.thresholds.push(Threshold::at_most("duality_gap", gap.abs(), 1e-9));
    }
    r.details = json!({ "cost": plan.cost, "method": plan.method });
    Ok(r)
}
