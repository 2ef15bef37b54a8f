//! Coupling two foliated measures along stable leaves.
//!
//! ```text
//! cargo run --release --example coupling
//! ```
use std::f64::consts::PI;

use fol_lab::coupling::{reconstruction_error, stable_coupling, CouplingParams};
use fol_lab::foliated::{lebesgue_foliated, reweight};
use fol_lab::maps::{make_toral_map, Shape2D};

fn main() -> fol_lab::Result<()> {
    let map = make_toral_map([[2, 1], [1, 1]], 0.0, Shape2D::sin_y())?;
    let beta = 5e-4;
    let mu1 = lebesgue_foliated(&map, 128, beta);
    let mu2 = reweight(&mu1, |p| 1.0 + 0.5 * (2.0 * PI * p[0]).cos())?;

    let params = CouplingParams::for_map(&map, beta)?;
    println!("blocks {}^2, K0 {:.3}, n0 {}, L0 {:.2}", params.blocks_per_side, params.k0, params.n0, params.l0);

    let (report, trace) = stable_coupling(&mu1, &mu2, &map, beta, 3, &params)?;
    println!("tau {:.4e}  beta0 {:.4e}  restarts {}", report.tau, report.beta0, report.restarts);
    for j in 0..report.masses.len() {
        println!("  round {j}: mass {:.4e}  cost {:.4e}", report.masses[j], report.costs[j]);
    }
    println!(
        "residual {:.6}  bound {:.6} <= closed form {:.6}",
        report.residual_mass, report.ds_bound, report.closed_form_bound
    );
    let err = reconstruction_error(&map, &mu1, &report, &trace, true, 44)?;
    println!("reconstruction W1 of the first marginal: {err:.2e}");
    Ok(())
}
