//! Interface geometry of a sheared square: normals, surface weights, cell
//! labels, the injectivity residual and the wall distance.

use std::sync::Arc;

use varislip::fluid_model::FluidGrid;
use varislip::geometry::{build_interface, ciarlet_necas_residual, classify_cells, min_separation, CellLabel};
use varislip::solid_model::{DeformationField, SolidGrid};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sg = Arc::new(SolidGrid::new(16, 16, 0.3, 0.3, [0.35, 0.35])?);
    let eta = DeformationField::from_map(sg, |x| [x[0] + 0.4 * (x[1] - 0.5), x[1]]);
    let iface = build_interface(&eta)?;
    println!("{} interface points, total weight {:.6} (sheared perimeter {:.6})", iface.len(), iface.total_weight(), 0.6 + 0.6 * 1.16f64.sqrt());
    for i in [0, iface.len() / 4, iface.len() / 2] {
        println!("  point {:?} normal {:?} weight {:.4}", iface.points[i], iface.normals[i], iface.weights[i]);
    }
    let grid = FluidGrid::unit(40);
    let cls = classify_cells(&iface, &grid)?;
    println!(
        "cells: fluid {} cut {} solid {}; fluid area {:.6}",
        cls.count(CellLabel::Fluid), cls.count(CellLabel::Cut), cls.count(CellLabel::Solid), cls.fluid_area
    );
    println!("injectivity residual {:.2e}", ciarlet_necas_residual(&eta, 256));
    println!("distance to the container walls {:.4}", min_separation(&iface, &grid));
    Ok(())
}
