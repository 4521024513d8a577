//! Per-step energy budgets and the summed energy estimate of a short run.

use varislip::cli_io::scenario_config;
use varislip::diagnostics::{budget_discrepancy, check_energy_chain, reassemble_budgets, EnergyBudget};
use varislip::stepper::run_simulation;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = scenario_config("falling_disc")?;
    cfg.solid.nx = 10;
    cfg.solid.ny = 10;
    cfg.fluid.cells = [30, 30];
    cfg.override_steps(20)?;
    let model = cfg.build_model()?;
    let init = cfg.build_initial(&model)?;
    let traj = run_simulation(&model, &cfg.step, &init)?;
    let budgets: Vec<EnergyBudget> = traj.steps.iter().map(|s| s.budget).collect();

    println!("{}", EnergyBudget::COLUMNS.join(" "));
    for b in &budgets {
        let v = b.values();
        println!("{}", v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" "));
    }
    let chain = check_energy_chain(&budgets, traj.initial_energy.total, 1e-9);
    println!("summed estimate holds: {} (worst excess {:.2e})", chain.pass, chain.worst_excess);
    let again = reassemble_budgets(&model, &cfg.step, &traj)?;
    println!("independent reassembly differs by {:.1e}", budget_discrepancy(&budgets, &again));
    Ok(())
}
