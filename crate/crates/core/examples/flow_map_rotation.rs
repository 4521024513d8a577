//! Flow map of a rigid rotation: the Jacobian determinant drifts as (1 + ω²τ²)^k.

use varislip::diagnostics::flow_map_report;
use varislip::fluid_model::{FluidGrid, VelocityField};
use varislip::geometry::CellClassification;
use varislip::stepper::{update_flow_map, FlowMap};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (omega, tau) = (0.5, 1e-3);
    let grid = FluidGrid::unit(32);
    let cls = CellClassification::all_fluid(&grid);
    let v = VelocityField::from_fn(&grid, &cls, |p| [-omega * (p[1] - 0.5), omega * (p[0] - 0.5)]);
    let mut fm = FlowMap::new(&grid, &cls, &[], 0.0);
    for k in 1..=100 {
        fm = update_flow_map(&fm, &v, &grid, &cls, tau, None)?;
        if k % 20 == 0 {
            let rep = flow_map_report(&fm);
            let exact = (1.0 + omega * omega * tau * tau).powi(k);
            println!("k {k:>3}  det ∈ [{:.9}, {:.9}]  exact {exact:.9}  Lipschitz {:.6}", rep.min_det, rep.max_det, rep.max_lipschitz);
        }
    }
    Ok(())
}
