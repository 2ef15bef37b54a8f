//! Correlation decay for the cat map and a small perturbation of it.
//!
//! ```text
//! cargo run --release --example correlations
//! ```
use fol_lab::correlate::{
    correlation_sequence, escape_time, fit_decay_window, lebesgue_grid, leafwise_holder_seminorm,
    transfer_correlation_sequence, Observable,
};
use fol_lab::foliated::{srb_rails, SrbOptions};
use fol_lab::maps::{direction_fields, make_toral_map, Shape2D};

fn main() -> fol_lab::Result<()> {
    let cat = make_toral_map([[2, 1], [1, 1]], 0.0, Shape2D::sin_y())?;
    let f = Observable::cos_mode([1, 0]);
    let g = Observable::cos_mode([2, 1]);
    let esc = escape_time(&cat, &f, &g)?;
    let c = correlation_sequence(&cat, &f, &g, &lebesgue_grid(128), 8)?;
    println!("trig pair: nonzero up to n = {esc}, then {:.1e}", c[esc + 1..].iter().fold(0.0f64, |m, v| m.max(v.abs())));

    let map = make_toral_map([[2, 1], [1, 1]], 0.01, Shape2D::sin_y())?;
    let fields = direction_fields(&map, 64, 40)?;
    let smooth = Observable::exp_trig(0.4, 0.3, [0.1, 0.7]);
    let rough = Observable::half_indicator();
    for obs in [&smooth, &rough] {
        let prof = leafwise_holder_seminorm(obs, &fields.unstable, 0.5, &[1e-1, 1e-2, 1e-3])?;
        println!("{}: unstable 0.5-seminorm {:.4}", obs.name, prof.value);
    }

    let rails = srb_rails(&map, 20, SrbOptions::default());
    let c = transfer_correlation_sequence(&map, &smooth, &Observable::cos_mode([0, 1]), &rails, 10)?;
    for (n, v) in c.iter().enumerate() {
        println!("  C_{n:<2} = {v:+.3e}");
    }
    let fit = fit_decay_window(&c, 1, 10)?;
    println!("fitted rate {:.4}", fit.rate);
    Ok(())
}
