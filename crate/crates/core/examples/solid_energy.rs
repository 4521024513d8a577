//! Elastic energy of a bent block, its gradient and a finite-difference check.

use std::sync::Arc;

use varislip::solid_model::{energy_gradient, eval_energy, DeformationField, MaterialParams, RegularizerConfig, SolidGrid};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid = Arc::new(SolidGrid::new(16, 16, 1.0, 1.0, [0.0, 0.0])?);
    let mat = MaterialParams::default();
    let reg = RegularizerConfig { kappa: 1e-4, ..RegularizerConfig::default() };
    let eta = DeformationField::from_map(grid.clone(), |x| [x[0] + 0.05 * (3.0 * x[1]).sin(), x[1] + 0.1 * x[0] * x[0]]);
    let e = eval_energy(&eta, &mat, &reg)?;
    println!("strain {:.6e}  det {:.6e}  second gradient {:.6e}  regularizer {:.6e}  total {:.6e}",
        e.strain_term, e.det_term, e.grad2_term, e.regularizer_term, e.total);

    let g = energy_gradient(&eta, &mat, &reg)?;
    let dir: Vec<[f64; 2]> = eta.positions().iter().map(|p| [p[1] * p[1], -p[0]]).collect();
    let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum();
    let s = 1e-6;
    let at = |t: f64| -> Result<f64, Box<dyn std::error::Error>> {
        let moved = eta.positions().iter().zip(&dir).map(|(p, d)| [p[0] + t * d[0], p[1] + t * d[1]]).collect();
        Ok(eval_energy(&DeformationField::new(grid.clone(), moved), &mat, &reg)?.total)
    };
    let fd = (at(s)? - at(-s)?) / (2.0 * s);
    println!("directional derivative: analytic {analytic:.10e}  central difference {fd:.10e}");
    Ok(())
}
