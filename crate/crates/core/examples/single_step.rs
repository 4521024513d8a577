//! Assembles and solves one constrained step, then reports the solver state.

use varislip::cli_io::scenario_config;
use varislip::fluid_model::project_divergence_free;
use varislip::geometry::{build_interface, classify_cells};
use varislip::stepper::{assemble_step, solve_step, DelayWindow, FlowMap};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = scenario_config("falling_disc")?;
    cfg.solid.nx = 8;
    cfg.solid.ny = 8;
    cfg.fluid.cells = [24, 24];
    let model = cfg.build_model()?;
    let init = cfg.build_initial(&model)?;
    let iface = build_interface(&init.eta0)?;
    let cls = classify_cells(&iface, &model.fluid_grid)?;
    let v0 = project_divergence_free(&model.fluid_grid, &init.v0, &cls)?;
    let fm = FlowMap::new(&model.fluid_grid, &cls, &iface.points, 0.0);
    let win = DelayWindow::initial(&init.eta_star, &v0, &model.fluid_grid, &cls, &fm, cfg.step.steps_per_window())?;
    let problem = assemble_step(&model, &cfg.step, &init.eta0, &win, &fm, 1)?;
    println!(
        "{} unknowns, constraints: {} coupling, {} wall, {} divergence",
        problem.num_unknowns(), problem.num_coupling, problem.num_wall, problem.num_div
    );
    let sol = solve_step(&problem, &cfg.step.solver, model.fluid_grid.dx)?;
    println!("converged {} in {} iterations", sol.converged, sol.iterations);
    println!("objective {:.12e} (warm start {:.12e})", sol.objective, sol.objective_start);
    println!(
        "residuals: coupling {:.1e}, wall {:.1e}, divergence {:.1e}; min det {:.6}",
        sol.coupling_residual, sol.wall_residual, sol.divergence_residual, sol.min_det
    );
    Ok(())
}
