//! Exact and entropic transport between two point clouds on the torus.
//!
//! ```text
//! cargo run --release --example transport
//! ```
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fol_lab::transport::{circle_w1, cost_matrix, exact_cost, exact_plan, sinkhorn_plan, CostSpec, DiscreteMeasure};

fn cloud(rng: &mut ChaCha8Rng, n: usize, dim: u8) -> DiscreteMeasure {
    let pts = (0..n).map(|_| [rng.gen(), if dim == 1 { 0.0 } else { rng.gen() }]).collect();
    let w = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    DiscreteMeasure::normalized(dim, pts, w).unwrap()
}

fn main() -> fol_lab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = cloud(&mut rng, 40, 2);
    let b = cloud(&mut rng, 40, 2);

    for beta in [1.0, 0.5, 0.1] {
        let cost = cost_matrix(&a, &b, &CostSpec::power(beta)?);
        let plan = exact_plan(&a, &b, &cost)?;
        let sk = sinkhorn_plan(&a, &b, &cost, 1e-3, 1e-9)?;
        println!(
            "beta {beta:<4} exact {:.6} (gap {:.1e}, {} arcs)  sinkhorn {:.6} (marginals {:.1e})",
            plan.cost,
            plan.duality_gap(&a, &b),
            plan.entries.len(),
            sk.cost,
            sk.marginal_error(&a, &b)
        );
    }

    // on the circle W1 has a closed form
    let x = cloud(&mut rng, 40, 1);
    let y = cloud(&mut rng, 40, 1);
    println!("circle W1: formula {:.12}  solver {:.12}", circle_w1(&x, &y), exact_cost(&x, &y, &CostSpec::TorusDistance)?);
    Ok(())
}
