//! Invariant line fields and the SRB measure of a perturbed cat map.
//!
//! ```text
//! cargo run --release --example srb_measure
//! ```
use fol_lab::foliated::{leaf_pushforward, lebesgue_foliated, srb_estimate};
use fol_lab::maps::{direction_fields, make_toral_map, Shape2D};
use fol_lab::transport::{exact_cost, CostSpec};

fn main() -> fol_lab::Result<()> {
    let cat = make_toral_map([[2, 1], [1, 1]], 0.0, Shape2D::sin_y())?;
    let map = make_toral_map([[2, 1], [1, 1]], 0.01, Shape2D::sin_y())?;

    let fields = direction_fields(&map, 64, 40)?;
    let lin = direction_fields(&cat, 64, 40)?;
    println!(
        "line fields: contraction {:.4}, tilt from linear: unstable {:.2e}, stable {:.2e}",
        fields.eta,
        fields.unstable.max_angle_to(&lin.unstable),
        fields.stable.max_angle_to(&lin.stable)
    );

    let mu = lebesgue_foliated(&map, 32, 1.0);
    for steps in [1, 2, 3] {
        let out = leaf_pushforward(&map, &mu, steps)?;
        let reg = out.regularity();
        println!(
            "T^{steps}: {} segments, mass {:.12}, K_density {:.4}",
            out.segments.len(),
            out.mass(),
            reg.k_density
        );
    }

    let srb = srb_estimate(&map, 16, 38)?;
    let leb = srb_estimate(&cat, 16, 38)?;
    println!("W1(SRB eps=0.01, Lebesgue) = {:.4e}", exact_cost(&srb, &leb, &CostSpec::TorusDistance)?);
    Ok(())
}
