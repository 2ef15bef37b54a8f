use std::f64::consts::PI;
use std::sync::OnceLock;

use proptest::prelude::*;

use fol_lab::cli::{format_measure, parse_measure};
use fol_lab::correlate::{combine, correlation_sequence, fit_decay, lebesgue_grid, Observable};
use fol_lab::coupling::anosov_constants_with;
use fol_lab::densities::{cone_constants, holder_log_constant, ConeConstants, HolderDensity, TransferOperator};
use fol_lab::foliated::{leaf_pushforward, lebesgue_foliated, reweight};
use fol_lab::maps::{make_expanding_map, make_toral_map, ExpandingMap1D, Shape1D, Shape2D, ToralMap};
use fol_lab::transport::{circle_w1, cost_matrix, exact_cost, exact_plan, CostSpec, DiscreteMeasure};

const GRID: usize = 1024;

fn circle_map() -> &'static (ExpandingMap1D, TransferOperator) {
    static CELL: OnceLock<(ExpandingMap1D, TransferOperator)> = OnceLock::new();
    CELL.get_or_init(|| {
        let map = make_expanding_map(2, 0.1, Shape1D::Sin { freq: 1 }).unwrap();
        let op = TransferOperator::new(&map, GRID).unwrap();
        (map, op)
    })
}

fn cat(eps: f64) -> ToralMap {
    make_toral_map([[2, 1], [1, 1]], eps, Shape2D::sin_y()).unwrap()
}

fn log_density(coefs: &[(f64, f64)]) -> HolderDensity {
    HolderDensity::from_fn(GRID, 1.0, |x| {
        coefs
            .iter()
            .enumerate()
            .map(|(k, (a, b))| {
                let w = 2.0 * PI * (k + 1) as f64;
                a * (w * x).cos() + b * (w * x).sin()
            })
            .sum::<f64>()
            .exp()
    })
    .unwrap()
}

fn measure(dim: u8) -> impl Strategy<Value = DiscreteMeasure> {
    prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.05..1.0f64), 1..12).prop_map(move |v| {
        let pts = v.iter().map(|(x, y, _)| [*x, if dim == 1 { 0.0 } else { *y }]).collect();
        DiscreteMeasure::normalized(dim, pts, v.iter().map(|t| t.2).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn transfer_conserves_mass(coefs in prop::collection::vec((-0.5..0.5f64, -0.5..0.5f64), 1..4)) {
        let (_, op) = circle_map();
        let rho = log_density(&coefs);
        let (_, integral) = op.apply(&rho).unwrap();
        prop_assert!((integral - rho.integral()).abs() < 1e-9);
    }

    #[test]
    fn cone_is_contracted(coefs in prop::collection::vec((-0.8..0.8f64, -0.8..0.8f64), 1..4)) {
        let (map, op) = circle_map();
        let cone = cone_constants(map);
        let rho = log_density(&coefs);
        let k = holder_log_constant(&rho, 1.0);
        let (img, _) = op.apply(&rho).unwrap();
        prop_assert!(holder_log_constant(&img, 1.0) <= cone.h(k) * 1.05);
    }

    #[test]
    fn cone_constants_are_consistent(la in 0.01..0.99f64, h in 0.0..5.0f64) {
        let c = ConeConstants::from_rates(la, h);
        prop_assert!(c.tau > 0.0 && c.tau <= 0.5);
        prop_assert!(c.theta > 0.0 && c.theta <= 1.0);
        if c.tau > 1e-15 {
            prop_assert!(c.theta < 1.0);
        }
        prop_assert!(2.0 * la.powi(c.n0 as i32) <= la / (1.0 - la));
        if c.n0 > 1 {
            prop_assert!(2.0 * la.powi(c.n0 as i32 - 1) > la / (1.0 - la));
        }
        // h maps the K0 cone strictly inside itself
        prop_assert!(c.h(c.k0) <= c.k0 + 1e-12);
    }

    #[test]
    fn exact_plans_satisfy_contracts(a in measure(2), b in measure(2), beta in 0.2..1.0f64) {
        let spec = CostSpec::power(beta).unwrap();
        let plan = exact_plan(&a, &b, &cost_matrix(&a, &b, &spec)).unwrap();
        prop_assert!(plan.marginal_error(&a, &b) <= 1e-8);
        prop_assert!(plan.duality_gap(&a, &b).abs() <= 1e-9);
        prop_assert!(plan.entries.iter().all(|e| e.2 >= 0.0));
    }

    #[test]
    fn w1_is_a_metric(a in measure(2), b in measure(2), c in measure(2)) {
        let d = |x: &DiscreteMeasure, y: &DiscreteMeasure| exact_cost(x, y, &CostSpec::TorusDistance).unwrap();
        let (ab, ba, bc, ac) = (d(&a, &b), d(&b, &a), d(&b, &c), d(&a, &c));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ac <= ab + bc + 1e-12);
        prop_assert!(d(&a, &a).abs() < 1e-12);
    }

    #[test]
    fn circle_formula_matches_solver(a in measure(1), b in measure(1)) {
        let exact = exact_cost(&a, &b, &CostSpec::TorusDistance).unwrap();
        prop_assert!((circle_w1(&a, &b) - exact).abs() <= 1e-8);
    }

    #[test]
    fn csv_round_trip(mu in measure(2)) {
        let back = parse_measure(&format_measure(&mu)).unwrap();
        prop_assert!(back.warning.is_none());
        prop_assert_eq!(back.measure.points(), mu.points());
        prop_assert_eq!(back.measure.weights(), mu.weights());
    }

    #[test]
    fn aggregation_keeps_mass(mu in measure(2), n in 2usize..20) {
        let total: f64 = mu.aggregate(n).weights().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_geometric_fit(c in 0.1..10.0f64, r in 0.05..0.95f64) {
        let v: Vec<f64> = (0..10).map(|n| c * r.powi(n)).collect();
        let fit = fit_decay(&v).unwrap();
        prop_assert!((fit.rate - r).abs() < 1e-9 && (fit.prefactor / c - 1.0).abs() < 1e-9);
    }

    #[test]
    fn series_bound_closed_form(tau in 0.01..0.5f64, beta in 0.001..0.5f64, n0 in 1u32..4, l0 in 0.5..5.0f64) {
        let c = anosov_constants_with(0.38, 0.38, beta, tau, n0, l0, 1.0).unwrap();
        let ratio = (1.0 - tau) * 0.38f64.powf(-beta * n0 as f64);
        prop_assert!((c.ratio - ratio).abs() < 1e-14);
        prop_assert_eq!(ratio < 1.0, beta < c.beta0);
        if ratio < 1.0 {
            prop_assert!((c.series_bound - tau * l0.powf(beta) / (1.0 - ratio)).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn correlations_ignore_constants_and_are_bilinear(a in -2.0..2.0f64, b in -2.0..2.0f64, shift in -3.0..3.0f64) {
        let map = cat(0.01);
        let mu = lebesgue_grid(48);
        let f1 = Observable::exp_trig(0.3, 0.2, [0.1, 0.4]);
        let f2 = Observable::cos_mode([1, 2]);
        let g = Observable::cos_mode([0, 1]);
        let c1 = correlation_sequence(&map, &f1, &g, &mu, 3).unwrap();
        let c2 = correlation_sequence(&map, &f2, &g, &mu, 3).unwrap();
        let mix = correlation_sequence(&map, &combine(a, &f1, b, &f2), &g, &mu, 3).unwrap();
        let shifted = correlation_sequence(&map, &combine(1.0, &f1, shift, &Observable::constant(1.0)), &g, &mu, 3).unwrap();
        for n in 0..=3 {
            prop_assert!((mix[n] - (a * c1[n] + b * c2[n])).abs() < 1e-10);
            prop_assert!((shifted[n] - c1[n]).abs() < 1e-10);
        }
    }

    #[test]
    fn reweighting_adds_constants(amp in 0.05..0.6f64, phase in 0.0..1.0f64) {
        let map = cat(0.0);
        let leb = lebesgue_foliated(&map, 16, 1.0);
        let base = reweight(&leb, |p| (0.3 * (2.0 * PI * (p[0] + phase)).sin()).exp()).unwrap();
        let rho = |p: [f64; 2]| 1.0 + amp * (2.0 * PI * (p[1] - phase)).cos();
        let c = reweight(&leb, rho).unwrap().regularity().k_density;
        let both = reweight(&base, rho).unwrap();
        prop_assert!(both.regularity().k_density <= base.regularity().k_density + c + 1e-9);
        prop_assert!((both.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pushforward_keeps_mass(eps in 0.0..0.02f64) {
        let map = cat(eps);
        let mu = lebesgue_foliated(&map, 8, 1.0);
        let out = leaf_pushforward(&map, &mu, 2).unwrap();
        prop_assert!((out.mass() - 1.0).abs() < 1e-10);
        prop_assert!(out.segments.iter().all(|s| s.weight > 0.0));
    }
}
