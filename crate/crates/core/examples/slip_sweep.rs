//! Tangential interface jump of the sheared block as the slip coefficient grows.

use varislip::cli_io::{scenario_config, sweep, SweepSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut base = scenario_config("sheared_block")?;
    base.checks = vec!["coupling".into()];
    let steps: usize = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(20);
    base.override_steps(steps)?;
    let spec = SweepSpec { slip: vec![0.1, 1.0, 10.0, 100.0], ..SweepSpec::default() };
    for row in sweep(&base, &spec, None)? {
        println!(
            "slip {:>6}  mean tangential jump {:.4e}  max normal residual {:.1e}",
            row.slip, row.mean_tangential_jump, row.max_coupling_residual
        );
    }
    Ok(())
}
