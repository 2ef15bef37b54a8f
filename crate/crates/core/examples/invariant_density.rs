//! Invariant density of a perturbed doubling map and the decay of its correlations.
//!
//! ```text
//! cargo run --release --example invariant_density
//! ```
use std::f64::consts::PI;

use fol_lab::correlate::fit_decay_window;
use fol_lab::densities::{cone_constants, expanding_decay, invariant_density};
use fol_lab::geometry::circle_dist;
use fol_lab::maps::{make_expanding_map, Shape1D};

fn main() -> fol_lab::Result<()> {
    let map = make_expanding_map(2, 0.1, Shape1D::Sin { freq: 1 })?;
    let cone = cone_constants(&map);
    println!("lambda^alpha = {:.4}  H = {:.4}", cone.lambda_alpha, cone.distortion);
    println!("K0 = {:.4}  n0 = {}  tau = {:.3e}  1 - theta = {:.3e}", cone.k0, cone.n0, cone.tau, 1.0 - cone.theta);

    let inv = invariant_density(&map, 1e-12)?;
    let s = inv.density.samples();
    let (lo, hi) = s.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!(
        "fixed point after {} steps: residual {:.1e}, range [{lo:.4}, {hi:.4}], log-Holder {:.4} (cone {:.4})",
        inv.iterations, inv.residual, inv.log_holder, inv.cone_bound
    );

    let c = expanding_decay(&map, &inv.density, |x| (PI * x).sin().abs(), |x| circle_dist(x, 0.3), 20)?;
    for (n, v) in c.iter().enumerate().step_by(4) {
        println!("  C_{n:<2} = {v:+.3e}");
    }
    let fit = fit_decay_window(&c, 2, 20)?;
    println!("fitted rate {:.4}, guaranteed rate theta = {}", fit.rate, cone.theta);
    Ok(())
}
