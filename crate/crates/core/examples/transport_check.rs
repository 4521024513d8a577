//! Transport identity for a prescribed shrinking disc at two resolutions.

use varislip::cli_io::{run_transport, scenario_config};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut last = None;
    for m in [24, 48, 96] {
        let mut cfg = scenario_config("shrinking_disc_transport")?;
        cfg.fluid.cells = [m, m];
        let rep = run_transport(&cfg)?;
        let err = rep.reference_error.unwrap_or(f64::NAN);
        let ratio = last.map(|e: f64| e / err).unwrap_or(f64::NAN);
        println!("{m:>3}²  max relative error {err:.3e}  consistency {:.3e}  ratio {ratio:.2}", rep.consistency_error);
        last = Some(err);
    }
    Ok(())
}
