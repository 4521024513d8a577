use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use varislip::cli_io::*;
use varislip::diagnostics::{CheckCategory, EnergyBudget};
use varislip::error::SimError;

const SMALL: &str = "\
[solid]
nx = 8
ny = 8

[fluid]
cells = [24, 24]

[step]
h_delay = 2e-3
t_end = 1e-2
";

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["varislip"];
    full.extend_from_slice(args);
    main(full)
}

fn hashes(dir: &Path) -> Vec<(String, String)> {
    let mut names: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let digest = Sha256::digest(fs::read(dir.join(&n)).unwrap());
            (n, digest.iter().map(|b| format!("{b:02x}")).collect())
        })
        .collect()
}

#[test]
fn empty_document_gives_the_default_scenario() {
    assert_eq!(parse_config("").unwrap(), scenario_config("falling_disc").unwrap());
}

#[test]
fn partial_tables_merge_over_scenario_defaults() {
    let c = parse_config("scenario = \"sheared_block\"\n[fluid]\nnu = 0.5\n").unwrap();
    let base = scenario_config("sheared_block").unwrap();
    assert_eq!(c.fluid.nu, 0.5);
    assert_eq!(c.fluid.cells, base.fluid.cells);
    assert_eq!(c.step, base.step);
    // a tagged table replaces the default variant as a whole
    let c = parse_config("[step.force]\ntype = \"zero\"\n").unwrap();
    assert_eq!(c.step.force, varislip::stepper::Force::Zero);
}

#[test]
fn delay_must_be_a_multiple_of_the_step() {
    let err = parse_config("[step]\nh_delay = 2.5e-3\n").unwrap_err();
    assert!(matches!(&err, SimError::ValidationError(m) if m.contains("integer multiple")), "{err}");
}

#[test]
fn unknown_keys_report_their_line() {
    let err = parse_config("seed = 1\n\n[fluid]\nviscosity = 0.3\n").unwrap_err();
    match err {
        SimError::ParseError { location, message } => {
            assert!(location.contains("line 4"), "{location}");
            assert!(message.contains("viscosity"), "{message}");
        }
        other => panic!("{other}"),
    }
    let err = parse_config("scenario = \"nope\"\n").unwrap_err();
    assert!(err.to_string().contains("falling_disc"), "{err}");
}

#[test]
fn every_scenario_round_trips_through_toml() {
    for (name, _) in SCENARIOS {
        let c = scenario_config(name).unwrap();
        c.validate().unwrap();
        let text = config_to_toml(&c).unwrap();
        assert_eq!(parse_config(&text).unwrap(), c, "{name}");
    }
}

#[test]
fn unknown_check_names_are_rejected() {
    let err = parse_config("checks = [\"energy\", \"speed\"]\n").unwrap_err();
    assert!(err.to_string().contains("speed"));
    let c = parse_config("checks = [\"energy\", \"flowmap\", \"energy\"]\n").unwrap();
    assert_eq!(c.categories().unwrap(), vec![CheckCategory::Energy, CheckCategory::FlowMap]);
}

#[test]
fn zero_step_run_writes_a_header_only_budget() {
    let mut c = parse_config(SMALL).unwrap();
    c.override_steps(0).unwrap();
    let out = run_config(&c).unwrap();
    assert_eq!(out.steps_completed(), 0);
    let RunOutput::Simulation { trajectory, .. } = &out else { panic!() };
    let text = budget_csv(trajectory);
    assert_eq!(text, format!("{}\n", EnergyBudget::COLUMNS.join(",")));
}

#[test]
fn ten_step_run_files_and_determinism() {
    let c = parse_config(SMALL).unwrap();
    let out = run_config(&c).unwrap();
    assert!(out.abort().is_none());
    assert!(out.verification().passed(), "{}", out.verification().render());
    let files = render_outputs(&c, &out).unwrap();
    let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(names, ["metadata.toml", "budget.csv", "diagnostics.csv", "snapshots.txt", "verification.txt"]);
    let budget = &files[1].1;
    let lines: Vec<&str> = budget.lines().collect();
    assert_eq!(lines.len(), 11);
    assert!(lines.iter().all(|l| l.split(',').count() == 15));
    assert!(files[2].1.lines().all(|l| l.split(',').count() == DIAGNOSTIC_COLUMNS.len()));
    // snapshots at steps 0 and 10
    assert_eq!(files[3].1.matches("[snapshot]").count(), 2);

    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_outputs(a.path(), &c, &out).unwrap();
    write_outputs(b.path(), &c, &run_config(&c).unwrap()).unwrap();
    assert_eq!(hashes(a.path()), hashes(b.path()));
    let meta = read_metadata(a.path()).unwrap();
    assert_eq!(meta.schema_version, SCHEMA_VERSION);
    assert_eq!(meta.steps_completed, 10);
    assert_eq!(meta.config, c);
}

#[test]
fn cli_lists_scenarios_and_rejects_missing_files() {
    assert_eq!(cli(&["scenarios"]), 0);
    assert_eq!(cli(&["run", "--config", "/nonexistent/varislip.toml"]), 1);
    assert_eq!(cli(&["run"]), 1);
    assert_eq!(cli(&["frobnicate"]), 1);
    assert_eq!(cli(&["run", "--scenario", "falling_disc", "--check", "bogus"]), 1);
}

#[test]
fn cli_run_verify_and_tamper() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = tmp.path().join("run");
    let (cfg_s, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(cli(&["run", "--config", cfg_s, "--output", out_s, "--steps", "6"]), 0);
    assert_eq!(read_metadata(&out).unwrap().steps_completed, 6);
    assert_eq!(cli(&["verify", "--output", out_s]), 0);

    let path = out.join("budget.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut cells: Vec<String> = lines[3].split(',').map(str::to_string).collect();
    let elastic: f64 = cells[2].parse().unwrap();
    cells[2] = format!("{:e}", elastic + 1e-3);
    lines[3] = cells.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert_eq!(cli(&["verify", "--output", out_s, "--check", "energy"]), 2);
    let rep = varislip::cli_io::verify_dir(&out, &[CheckCategory::Energy]).unwrap();
    let failed: Vec<&str> = rep.failures().map(|f| f.name.as_str()).collect();
    assert!(failed.contains(&"stored_budget.elastic"), "{failed:?}");
    assert!(failed.contains(&"stored_energy_chain_excess"), "{failed:?}");
    // the tampered column is invisible to the unrelated check groups
    assert_eq!(cli(&["verify", "--output", out_s, "--check", "flowmap"]), 0);
}

#[test]
fn output_root_defaults_to_the_environment_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    // only this test reads the variable
    unsafe { std::env::set_var(OUTPUT_DIR_ENV, tmp.path()) };
    assert_eq!(cli(&["run", "--config", cfg.to_str().unwrap(), "--steps", "2", "--check", "coupling"]), 0);
    assert!(tmp.path().join("falling_disc").join("metadata.toml").exists());
}

#[test]
fn transport_scenario_writes_its_table() {
    let c = parse_config("scenario = \"shrinking_disc_transport\"\n[fluid]\ncells = [48, 48]\n").unwrap();
    let out = run_config(&c).unwrap();
    assert!(out.verification().passed(), "{}", out.verification().render());
    let files = render_outputs(&c, &out).unwrap();
    let table = &files.iter().find(|f| f.0 == "transport.csv").unwrap().1;
    assert_eq!(table.lines().next().unwrap(), TRANSPORT_COLUMNS.join(","));
    assert_eq!(table.lines().count(), 100);
}

#[test]
fn sweep_expands_the_cartesian_product() {
    let base = parse_config(SMALL).unwrap();
    let spec = SweepSpec { tau: vec![1e-3, 5e-4], slip: vec![1.0, 10.0, 100.0], ..SweepSpec::default() };
    let cfgs = sweep_configs(&base, &spec);
    assert_eq!(cfgs.len(), 6);
    assert_eq!((cfgs[1].step.dt_tau, cfgs[1].fluid.slip_coefficient), (1e-3, 10.0));
    assert_eq!((cfgs[3].step.dt_tau, cfgs[3].fluid.slip_coefficient), (5e-4, 1.0));
    assert!(cfgs.iter().all(|c| c.step.h_delay == base.step.h_delay));

    let mut short = base.clone();
    short.override_steps(2).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let rows = sweep(&short, &SweepSpec { slip: vec![1.0, 10.0], ..SweepSpec::default() }, Some(tmp.path())).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.verified && r.steps == 2));
    let table = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(tmp.path().join("run_001").join("budget.csv").exists());
}
