//! Divergence-free correction of a velocity field around an embedded disc.

use std::f64::consts::PI;

use varislip::fluid_model::{divergence, fluid_dissipation_form, project_divergence_free, FluidGrid, FluidParams, VelocityField};
use varislip::geometry::classify_polygon;
use varislip::linalg::max_abs;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid = FluidGrid::unit(48);
    let disc: Vec<[f64; 2]> = (0..192).map(|k| {
        let t = 2.0 * PI * k as f64 / 192.0;
        [0.5 + 0.2 * t.cos(), 0.5 + 0.2 * t.sin()]
    }).collect();
    let cls = classify_polygon(&disc, &grid)?;
    let v = VelocityField::from_fn(&grid, &cls, |p| [1.0 + p[1], (2.0 * p[0]).sin()]);
    let pv = project_divergence_free(&grid, &v, &cls)?;
    let prm = FluidParams::default();
    println!("active cells {}", cls.num_active());
    println!("max |div| before {:.3e}, after {:.3e}", max_abs(&divergence(&grid, &v, &cls)?), max_abs(&divergence(&grid, &pv, &cls)?));
    println!("dissipation before {:.5e}, after {:.5e}", fluid_dissipation_form(&grid, &v, &cls, &prm)?, fluid_dissipation_form(&grid, &pv, &cls, &prm)?);
    Ok(())
}
