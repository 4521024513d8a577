//! Runs the falling-disc scenario and writes its output files.
//!
//! `cargo run --release --example falling_disc -- [steps] [output_dir]`
//! Pass `full` as the first argument for the 32² / 96² reference size.

use varislip::cli_io::{run_config, scenario_config, write_outputs, RunOutput};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let arg = std::env::args().nth(1).unwrap_or_else(|| "40".into());
    let mut cfg = scenario_config("falling_disc")?;
    if arg != "full" {
        cfg.solid.nx = 12;
        cfg.solid.ny = 12;
        cfg.fluid.cells = [36, 36];
        cfg.override_steps(arg.parse()?)?;
    }
    let out = run_config(&cfg)?;
    let RunOutput::Simulation { trajectory, report, .. } = &out else { unreachable!() };
    for rec in trajectory.steps.iter().step_by(10) {
        let c = rec.eta.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        let n = rec.eta.len() as f64;
        println!(
            "k {:>4}  t {:.3}  centroid ({:.5}, {:.5})  E {:.6e}  max|v| {:.3e}",
            rec.k, rec.time, c[0] / n, c[1] / n, rec.budget.state_energy(), rec.velocity.max_norm()
        );
    }
    print!("{}", report.render());
    let dir = std::env::args().nth(2).unwrap_or_else(|| "falling_disc_out".into());
    write_outputs(std::path::Path::new(&dir), &cfg, &out)?;
    println!("outputs written to {dir}");
    Ok(())
}
