//! Builds a run from a TOML document layered over a scenario's defaults.

use varislip::cli_io::{config_to_toml, parse_config, run_config};

const DOC: &str = r#"
scenario = "falling_disc"
seed = 7
checks = ["energy", "coupling"]

[solid]
nx = 10
ny = 10

[fluid]
cells = [30, 30]
nu = 0.5

[step]
t_end = 0.02

[step.force]
type = "oscillating"
value = [0.0, -1.0]
omega = 60.0
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = parse_config(DOC)?;
    println!("resolved configuration:\n{}", config_to_toml(&cfg)?);
    let out = run_config(&cfg)?;
    println!("{} steps completed", out.steps_completed());
    print!("{}", out.verification().render());
    Ok(())
}
