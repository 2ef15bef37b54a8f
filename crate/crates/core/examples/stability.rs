//! How far the SRB measure moves as the perturbation grows.
//!
//! ```text
//! cargo run --release --example stability
//! ```
use fol_lab::cli::{stability_rows, ExperimentConfig, ExperimentId};

fn main() -> fol_lab::Result<()> {
    let mut cfg = ExperimentConfig::new(ExperimentId::Stability);
    // coarser than the default run
    cfg.grids.srb = 60;
    cfg.grids.transport = 20;
    cfg.grids.rails = 256;
    cfg.grids.srb_steps = 12;
    cfg.epsilons = Some(vec![0.0, 0.005, 0.01, 0.02, 0.04]);
    let (rows, floor) = stability_rows(&cfg)?;
    println!("floor {floor:.2e}");
    println!("{:>8} {:>12} {:>12} {:>10}", "eps", "C0 dist", "W1", "W1/eps");
    for r in &rows {
        let ratio = if r.epsilon > 0.0 { r.w1 / r.epsilon } else { 0.0 };
        println!("{:>8} {:>12.4e} {:>12.4e} {:>10.4}", r.epsilon, r.c0_distance, r.w1, ratio);
    }
    Ok(())
}
