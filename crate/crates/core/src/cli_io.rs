//! Configuration, scenario library, run driver, output files and the
//! command-line front end.
//!
//! Output files of a simulation run:
//!
//! * `metadata.toml`: schema and code version, completion status and the
//!   full configuration echo (a run directory is self-describing).
//! * `budget.csv`: one row per step, columns [`EnergyBudget::COLUMNS`].
//! * `diagnostics.csv`: one row per step, columns [`DIAGNOSTIC_COLUMNS`].
//! * `snapshots.txt`: `key=value` records at the snapshot times.
//! * `verification.txt`: one line per check.
//!
//! The transport scenario writes `transport.csv` instead of the budget,
//! diagnostics and snapshot files.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    check_energy_chain, check_transport, coupling_series, max_relative_comparison_gap, mean_tangential_jump,
    shrinking_disc_samples, verify_trajectory, CheckCategory, CheckResult, CheckThresholds, EnergyBudget,
    TransportReport, VerificationReport,
};
use crate::error::{Result, SimError};
use crate::fluid_model::{FluidGrid, FluidParams, VelocityField};
use crate::geometry::{classify_polygon, CellClassification};
use crate::solid_model::{stress_free_stretch, DeformationField, MaterialParams, SolidGrid, Vec2};
use crate::stepper::{run_simulation, Force, InitialData, Model, SolverConfig, StepConfig, Trajectory};

/// Version of the output file layout; bumped on any column or key change.
pub const SCHEMA_VERSION: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const OUTPUT_DIR_ENV: &str = "VARISLIP_OUTPUT_DIR";

/// Column order of `diagnostics.csv`.
pub const DIAGNOSTIC_COLUMNS: [&str; 20] = [
    "step",
    "time",
    "iterations",
    "factorizations",
    "converged",
    "decrement",
    "projected_gradient",
    "coupling_residual",
    "linearization_defect",
    "divergence_residual",
    "min_det",
    "cn_residual",
    "min_separation",
    "flow_det_min",
    "flow_det_max",
    "flow_lipschitz",
    "tangential_jump",
    "multiplier_coupling",
    "multiplier_wall",
    "multiplier_divergence",
];

/// Column order of `transport.csv`.
pub const TRANSPORT_COLUMNS: [&str; 4] = ["time", "difference_quotient", "transport_rhs", "reference"];

/// Solid body: grid, material, regularizer order and initial placement.
///
/// The reference body is the rectangle `image_size / stretch` with
/// `stretch` defaulting to the stress-free stretch of the material, so the
/// initial state is a uniformly stretched, rotated copy centered at
/// `center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolidSection {
    pub nx: usize,
    pub ny: usize,
    pub image_size: Vec2,
    pub center: Vec2,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stretch: Option<f64>,
    #[serde(default)]
    pub rotation: f64,
    pub elastic_tensor: [[f64; 3]; 3],
    pub det_exponent: f64,
    pub grad2_exponent: f64,
    pub rho_s: f64,
    pub det_weight: f64,
    pub grad2_weight: f64,
    pub reg_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidSection {
    pub cells: [usize; 2],
    pub lo: Vec2,
    pub hi: Vec2,
    pub nu: f64,
    pub rho_f: f64,
    pub slip_coefficient: f64,
    pub k0_order: usize,
}

/// Initial fluid velocity before the divergence projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FluidInit {
    Zero,
    Uniform { value: Vec2 },
    /// Rigid rotation `omega·(−(y − c_y), x − c_x)`.
    Rotation { omega: f64, center: Vec2 },
    /// `(rate·(y − center), 0)`.
    Shear { rate: f64, center: f64 },
}

impl FluidInit {
    pub fn eval(&self, x: Vec2) -> Vec2 {
        match *self {
            FluidInit::Zero => [0.0, 0.0],
            FluidInit::Uniform { value } => value,
            FluidInit::Rotation { omega, center } => [-omega * (x[1] - center[1]), omega * (x[0] - center[0])],
            FluidInit::Shear { rate, center } => [rate * (x[1] - center), 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    /// Uniform initial solid rate `η_*`.
    pub solid_velocity: Vec2,
    pub fluid_velocity: FluidInit,
    /// Amplitude of seeded uniform noise added to `v₀` on active cells.
    #[serde(default)]
    pub noise: f64,
}

/// Prescribed shrinking disc for the transport scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSection {
    pub center: Vec2,
    pub initial_radius: f64,
    pub rate: f64,
    pub sample_dt: f64,
    pub t_end: f64,
}

impl Default for TransportSection {
    fn default() -> Self {
        Self { center: [0.5, 0.5], initial_radius: 0.3, rate: -0.1, sample_dt: 0.01, t_end: 1.0 }
    }
}

/// Complete, validated run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub scenario: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Check groups run after the simulation: `all` or any of
    /// `energy`, `coupling`, `transport`, `flowmap`.
    pub checks: Vec<String>,
    /// Write a snapshot every this many steps (plus the initial state).
    pub snapshot_every: usize,
    pub solid: SolidSection,
    pub fluid: FluidSection,
    pub step: StepConfig,
    pub initial: InitialSection,
    #[serde(default)]
    pub transport: TransportSection,
}

/// Built-in scenarios with a one-line description.
pub const SCENARIOS: [(&str, &str); 4] = [
    ("falling_disc", "heavy square body sinking under gravity in a closed box"),
    ("sheared_block", "block in a linear shear force field, used for slip sweeps"),
    ("shrinking_disc_transport", "prescribed shrinking disc, transport identity check"),
    ("colliding_disc", "body driven into the bottom wall, stops before contact"),
];

fn base_config(name: &str) -> SimulationConfig {
    let mat = MaterialParams::default().with_stiffness(10.0);
    SimulationConfig {
        scenario: name.to_string(),
        seed: 0,
        output_dir: None,
        checks: vec!["all".into()],
        snapshot_every: 20,
        solid: SolidSection {
            nx: 32,
            ny: 32,
            image_size: [0.3, 0.3],
            center: [0.5, 0.6],
            stretch: None,
            rotation: 0.0,
            elastic_tensor: mat.elastic_tensor,
            det_exponent: mat.det_exponent,
            grad2_exponent: mat.grad2_exponent,
            rho_s: 2.0,
            det_weight: mat.det_weight,
            grad2_weight: mat.grad2_weight,
            reg_order: 3,
        },
        fluid: FluidSection {
            cells: [96, 96],
            lo: [0.0, 0.0],
            hi: [1.0, 1.0],
            nu: 0.1,
            rho_f: 1.0,
            slip_coefficient: 1.0,
            k0_order: 2,
        },
        step: StepConfig {
            dt_tau: 1e-3,
            h_delay: 1e-2,
            kappa: 1e-4,
            a0_exponent: 1.0,
            t_end: 0.2,
            force: Force::Constant { value: [0.0, -1.0] },
            solver: SolverConfig::default(),
        },
        initial: InitialSection { solid_velocity: [0.0, 0.0], fluid_velocity: FluidInit::Zero, noise: 0.0 },
        transport: TransportSection::default(),
    }
}

/// Default configuration of a built-in scenario.
pub fn scenario_config(name: &str) -> Result<SimulationConfig> {
    let mut c = base_config(name);
    match name {
        "falling_disc" => {}
        "sheared_block" => {
            c.solid.nx = 16;
            c.solid.ny = 16;
            c.solid.center = [0.5, 0.5];
            c.fluid.cells = [48, 48];
            c.step.t_end = 0.05;
            c.step.force = Force::Shear { amplitude: 4.0, center: 0.5 };
            c.initial.fluid_velocity = FluidInit::Shear { rate: 0.4, center: 0.5 };
            c.snapshot_every = 10;
        }
        "shrinking_disc_transport" => {
            c.step.t_end = 0.0;
            c.step.force = Force::Zero;
        }
        "colliding_disc" => {
            c.solid.nx = 16;
            c.solid.ny = 16;
            c.solid.center = [0.5, 0.19];
            c.solid.rho_s = 5.0;
            c.fluid.cells = [48, 48];
            c.fluid.nu = 0.01;
            c.step.kappa = 1e-6;
            c.step.t_end = 0.2;
            c.step.force = Force::Constant { value: [0.0, -200.0] };
            c.initial.solid_velocity = [0.0, -2.0];
            c.snapshot_every = 10;
        }
        _ => {
            let names: Vec<&str> = SCENARIOS.iter().map(|s| s.0).collect();
            return Err(SimError::ValidationError(format!(
                "unknown scenario `{name}` (known: {})",
                names.join(", ")
            )));
        }
    }
    Ok(c)
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let replace_whole = matches!(&v, toml::Value::Table(t) if t.contains_key("type"));
                match b.get_mut(&k) {
                    Some(slot) if !replace_whole => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn locate_key(text: &str, message: &str) -> String {
    let key = message.split('`').nth(1).and_then(|k| k.rsplit('.').next()).unwrap_or("");
    if !key.is_empty() {
        for (i, line) in text.lines().enumerate() {
            let t = line.trim_start();
            if t.starts_with(key) && t[key.len()..].trim_start().starts_with('=') {
                return format!("line {}, key `{key}`", i + 1);
            }
        }
        return format!("key `{key}`");
    }
    "document".into()
}

/// Parses a TOML document over the defaults of its scenario
/// (`falling_disc` when absent) and validates the result.
pub fn parse_config(text: &str) -> Result<SimulationConfig> {
    let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| SimError::ParseError {
        location: e.span().map_or("document".into(), |s| format!("line {}", line_of(text, s.start))),
        message: e.message().to_string(),
    })?;
    let name = match doc.get("scenario") {
        None => "falling_disc".to_string(),
        Some(toml::Value::String(s)) => s.clone(),
        Some(_) => {
            return Err(SimError::ParseError {
                location: locate_key(text, "`scenario`"),
                message: "scenario must be a string".into(),
            })
        }
    };
    let base = scenario_config(&name)?;
    let mut value = toml::Value::try_from(&base)
        .map_err(|e| SimError::ValidationError(format!("cannot encode scenario defaults: {e}")))?;
    merge(&mut value, toml::Value::Table(doc));
    let cfg: SimulationConfig = value.try_into().map_err(|e: toml::de::Error| {
        let message = e.message().to_string();
        SimError::ParseError { location: locate_key(text, &message), message }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical TOML text of a configuration; `parse_config` reads it back
/// to an equal value.
pub fn config_to_toml(cfg: &SimulationConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| SimError::ValidationError(format!("cannot encode configuration: {e}")))
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        scenario_config(&self.scenario)?;
        self.categories()?;
        if self.snapshot_every == 0 {
            return Err(SimError::ValidationError("snapshot_every must be positive".into()));
        }
        if self.is_transport() {
            let t = &self.transport;
            if !(t.initial_radius > 0.0 && t.sample_dt > 0.0 && t.t_end > 2.0 * t.sample_dt) {
                return Err(SimError::ValidationError(
                    "transport needs initial_radius > 0, sample_dt > 0 and t_end > 2·sample_dt".into(),
                ));
            }
            if t.initial_radius + t.rate.min(0.0) * t.t_end <= 0.0 {
                return Err(SimError::ValidationError("transport disc radius must stay positive".into()));
            }
            return self.fluid_grid().map(|_| ());
        }
        self.step.validate()?;
        self.build_model()?.validate()?;
        Ok(())
    }

    pub fn is_transport(&self) -> bool {
        self.scenario == "shrinking_disc_transport"
    }

    pub fn categories(&self) -> Result<Vec<CheckCategory>> {
        let mut set = BTreeSet::new();
        for c in &self.checks {
            let parsed = CheckCategory::parse(c).ok_or_else(|| {
                SimError::ValidationError(format!("unknown check `{c}` (use all|energy|coupling|transport|flowmap)"))
            })?;
            set.extend(parsed);
        }
        Ok(set.into_iter().collect())
    }

    pub fn material(&self) -> MaterialParams {
        let s = &self.solid;
        MaterialParams {
            elastic_tensor: s.elastic_tensor,
            det_exponent: s.det_exponent,
            grad2_exponent: s.grad2_exponent,
            rho_s: s.rho_s,
            det_weight: s.det_weight,
            grad2_weight: s.grad2_weight,
        }
    }

    pub fn fluid_grid(&self) -> Result<FluidGrid> {
        FluidGrid::new(self.fluid.lo, self.fluid.hi, self.fluid.cells[0], self.fluid.cells[1])
    }

    fn stretch(&self) -> f64 {
        self.solid.stretch.unwrap_or_else(|| stress_free_stretch(&self.material()))
    }

    pub fn build_model(&self) -> Result<Model> {
        let material = self.material();
        material.validate()?;
        let lam = self.stretch();
        if !(lam > 0.0) {
            return Err(SimError::ValidationError("solid.stretch must be positive".into()));
        }
        let s = &self.solid;
        let grid = SolidGrid::new(s.nx, s.ny, s.image_size[0] / lam, s.image_size[1] / lam, [0.0, 0.0])?;
        let f = &self.fluid;
        Ok(Model {
            solid_grid: Arc::new(grid),
            material,
            reg_order: s.reg_order,
            fluid_grid: self.fluid_grid()?,
            fluid: FluidParams {
                nu: f.nu,
                rho_f: f.rho_f,
                slip_coefficient: f.slip_coefficient,
                kappa: self.step.kappa,
                k0_order: f.k0_order,
            },
        })
    }

    /// Initial deformation, solid rate and (unprojected) fluid velocity.
    pub fn build_initial(&self, model: &Model) -> Result<InitialData> {
        let lam = self.stretch();
        let s = &self.solid;
        let sg = model.solid_grid.clone();
        let half = [0.5 * s.image_size[0] / lam, 0.5 * s.image_size[1] / lam];
        let (sn, cs) = s.rotation.sin_cos();
        let eta0 = DeformationField::from_map(sg.clone(), |x| {
            let d = [lam * (x[0] - half[0]), lam * (x[1] - half[1])];
            [s.center[0] + cs * d[0] - sn * d[1], s.center[1] + sn * d[0] + cs * d[1]]
        });
        let boundary: Vec<Vec2> = sg.boundary_nodes.iter().map(|&b| eta0.positions()[b]).collect();
        let grid = &model.fluid_grid;
        let cls = classify_polygon(&boundary, grid)?;
        let mut v0 = VelocityField::from_fn(grid, &cls, |x| self.initial.fluid_velocity.eval(x));
        if self.initial.noise != 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let a = self.initial.noise.abs();
            for c in 0..grid.num_cells() {
                let d: Vec2 = [rng.random_range(-a..=a), rng.random_range(-a..=a)];
                if v0.active[c] {
                    v0.values[c][0] += d[0];
                    v0.values[c][1] += d[1];
                }
            }
        }
        Ok(InitialData { eta0, eta_star: vec![self.initial.solid_velocity; sg.num_nodes()], v0 })
    }

    /// Sets `t_end` to `steps·τ`; the result must still span whole windows.
    pub fn override_steps(&mut self, steps: usize) -> Result<()> {
        if self.is_transport() {
            self.transport.t_end = steps as f64 * self.transport.sample_dt;
        } else {
            self.step.t_end = steps as f64 * self.step.dt_tau;
        }
        self.validate()
    }
}

/// Result of running a configuration.
#[derive(Debug, Clone)]
pub enum RunOutput {
    Simulation { model: Model, step: StepConfig, trajectory: Box<Trajectory>, report: VerificationReport },
    Transport { report: TransportReport, verification: VerificationReport },
}

impl RunOutput {
    pub fn verification(&self) -> &VerificationReport {
        match self {
            RunOutput::Simulation { report, .. } => report,
            RunOutput::Transport { verification, .. } => verification,
        }
    }

    pub fn abort(&self) -> Option<&SimError> {
        match self {
            RunOutput::Simulation { trajectory, .. } => trajectory.abort.as_ref(),
            RunOutput::Transport { .. } => None,
        }
    }

    pub fn steps_completed(&self) -> usize {
        match self {
            RunOutput::Simulation { trajectory, .. } => trajectory.steps.len(),
            RunOutput::Transport { report, .. } => report.times.len(),
        }
    }
}

/// Relative tolerance of both transport checks. The cut-cell volume and
/// the boundary polygon each carry a grid-dependent error.
pub const TRANSPORT_TOLERANCE: f64 = 0.02;

/// Transport scenario: the shrinking disc against `d/dt|Ω| = 2πr·r′`.
pub fn run_transport(cfg: &SimulationConfig) -> Result<TransportReport> {
    let grid = cfg.fluid_grid()?;
    let t = &cfg.transport;
    let n = (t.t_end / t.sample_dt).round() as usize;
    let times: Vec<f64> = (0..=n).map(|i| i as f64 * t.sample_dt).collect();
    let samples = shrinking_disc_samples(&grid, t.center, t.initial_radius, t.rate, &times)?;
    let (r0, rate) = (t.initial_radius, t.rate);
    let reference = move |s: f64| 2.0 * std::f64::consts::PI * (r0 + rate * s) * rate;
    Ok(check_transport(&grid, &samples, &|_, _| 1.0, &|_, _| 0.0, Some(&reference)))
}

/// Runs a validated configuration and the configured checks.
pub fn run_config(cfg: &SimulationConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let categories = cfg.categories()?;
    if cfg.is_transport() {
        let report = run_transport(cfg)?;
        let mut verification = VerificationReport::default();
        if categories.contains(&CheckCategory::Transport) {
            verification.checks.push(CheckResult::at_most(
                "transport_consistency",
                CheckCategory::Transport,
                report.consistency_error,
                TRANSPORT_TOLERANCE,
            ));
            verification.checks.push(CheckResult::at_most(
                "transport_reference",
                CheckCategory::Transport,
                report.reference_error.unwrap_or(f64::INFINITY),
                TRANSPORT_TOLERANCE,
            ));
        }
        return Ok(RunOutput::Transport { report, verification });
    }
    let model = cfg.build_model()?;
    let init = cfg.build_initial(&model)?;
    let trajectory = run_simulation(&model, &cfg.step, &init)?;
    let report = verify_trajectory(&model, &cfg.step, &trajectory, &categories, &CheckThresholds::default())?;
    Ok(RunOutput::Simulation { model, step: cfg.step.clone(), trajectory: Box::new(trajectory), report })
}

/// Contents of `metadata.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub schema_version: u32,
    pub code_version: String,
    pub steps_completed: usize,
    /// Abort reason, empty when the run reached its end time.
    pub abort: String,
    pub files: Vec<String>,
    pub config: SimulationConfig,
}

fn fmt_f(v: f64) -> String {
    format!("{v:e}")
}

fn csv(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

/// Budget file contents.
pub fn budget_csv(traj: &Trajectory) -> String {
    csv(
        &EnergyBudget::COLUMNS,
        traj.steps.iter().map(|s| {
            let mut row = vec![s.k.to_string(), fmt_f(s.time)];
            row.extend(s.budget.values().iter().map(|&v| fmt_f(v)));
            row
        }),
    )
}

/// Diagnostics file contents.
pub fn diagnostics_csv(traj: &Trajectory, grid: &FluidGrid) -> Result<String> {
    let coupling = coupling_series(traj, grid)?;
    Ok(csv(
        &DIAGNOSTIC_COLUMNS,
        traj.steps.iter().zip(&coupling).map(|(s, c)| {
            let st = &s.stats;
            vec![
                s.k.to_string(),
                fmt_f(s.time),
                st.iterations.to_string(),
                st.factorizations.to_string(),
                st.converged.to_string(),
                fmt_f(st.decrement),
                fmt_f(st.projected_gradient),
                fmt_f(st.coupling_residual),
                fmt_f(st.linearization_defect),
                fmt_f(st.divergence_residual),
                fmt_f(st.min_det),
                fmt_f(st.cn_residual),
                fmt_f(st.min_separation),
                fmt_f(st.flow_det_min),
                fmt_f(st.flow_det_max),
                fmt_f(st.flow_lipschitz),
                fmt_f(c.tangential_jump),
                fmt_f(s.multiplier_norms[0]),
                fmt_f(s.multiplier_norms[1]),
                fmt_f(s.multiplier_norms[2]),
            ]
        }),
    ))
}

fn join_vec2(v: &[Vec2]) -> String {
    let mut s = String::with_capacity(v.len() * 48);
    for (i, p) in v.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&fmt_f(p[0]));
        s.push(' ');
        s.push_str(&fmt_f(p[1]));
    }
    s
}

fn join_f(v: &[f64]) -> String {
    v.iter().map(|&x| fmt_f(x)).collect::<Vec<_>>().join(" ")
}

/// One snapshot: state at a sample time, velocity zero-extended.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRecord {
    pub step: usize,
    pub time: f64,
    pub eta: Vec<Vec2>,
    pub interface: Vec<Vec2>,
    pub velocity: Vec<Vec2>,
    pub pressure: Vec<f64>,
    pub labels: String,
}

impl SnapshotRecord {
    fn new(
        step: usize,
        time: f64,
        eta: &[Vec2],
        interface: Vec<Vec2>,
        v: &VelocityField,
        cls: &CellClassification,
        pressure: Vec<f64>,
    ) -> Self {
        let velocity = (0..cls.labels.len()).map(|c| if cls.is_active(c) { v.values[c] } else { [0.0, 0.0] }).collect();
        Self {
            step,
            time,
            eta: eta.to_vec(),
            interface,
            velocity,
            pressure,
            labels: cls.labels.iter().map(|l| l.code()).collect(),
        }
    }

    pub fn render(&self) -> String {
        format!(
            "[snapshot]\nstep={}\ntime={}\neta={}\ninterface={}\nlabels={}\nvelocity={}\npressure={}\n\n",
            self.step,
            fmt_f(self.time),
            join_vec2(&self.eta),
            join_vec2(&self.interface),
            self.labels,
            join_vec2(&self.velocity),
            join_f(&self.pressure),
        )
    }
}

/// Snapshots at step 0 and every `every` steps, plus the last step.
pub fn snapshots(traj: &Trajectory, every: usize) -> Vec<SnapshotRecord> {
    let grid = &traj.solid_grid;
    let iface = |eta: &[Vec2]| grid.boundary_nodes.iter().map(|&b| eta[b]).collect::<Vec<_>>();
    let mut out = vec![SnapshotRecord::new(
        0,
        0.0,
        &traj.initial_eta,
        iface(&traj.initial_eta),
        &traj.initial_velocity,
        &traj.initial_cls,
        vec![0.0; traj.initial_cls.labels.len()],
    )];
    let n = traj.steps.len();
    for (i, s) in traj.steps.iter().enumerate() {
        if s.k % every == 0 || i + 1 == n {
            out.push(SnapshotRecord::new(s.k, s.time, &s.eta, s.interface.clone(), &s.velocity, &s.cls, s.pressure.clone()));
        }
    }
    out
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    fs::write(&p, contents).map_err(|e| SimError::io(format!("writing {}", p.display()), e))?;
    Ok(p)
}

/// Text of every output file, keyed by file name, in write order.
pub fn render_outputs(cfg: &SimulationConfig, out: &RunOutput) -> Result<Vec<(String, String)>> {
    let mut files: Vec<(String, String)> = Vec::new();
    match out {
        RunOutput::Simulation { model, trajectory, .. } => {
            files.push(("budget.csv".into(), budget_csv(trajectory)));
            files.push(("diagnostics.csv".into(), diagnostics_csv(trajectory, &model.fluid_grid)?));
            let snaps: String = snapshots(trajectory, cfg.snapshot_every).iter().map(|s| s.render()).collect();
            files.push(("snapshots.txt".into(), snaps));
        }
        RunOutput::Transport { report, .. } => {
            let t = &cfg.transport;
            let rows = report.times.iter().enumerate().map(|(i, &time)| {
                let exact = 2.0 * std::f64::consts::PI * (t.initial_radius + t.rate * time) * t.rate;
                vec![
                    fmt_f(time),
                    fmt_f(report.difference_quotient[i]),
                    fmt_f(report.transport_rhs[i]),
                    fmt_f(exact),
                ]
            });
            files.push(("transport.csv".into(), csv(&TRANSPORT_COLUMNS, rows)));
        }
    }
    files.push(("verification.txt".into(), out.verification().render()));
    let meta = Metadata {
        schema_version: SCHEMA_VERSION,
        code_version: CODE_VERSION.to_string(),
        steps_completed: out.steps_completed(),
        abort: out.abort().map(|e| e.to_string()).unwrap_or_default(),
        files: files.iter().map(|f| f.0.clone()).collect(),
        config: cfg.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| SimError::ValidationError(format!("cannot encode metadata: {e}")))?;
    files.insert(0, ("metadata.toml".into(), text));
    Ok(files)
}

/// Writes all output files into `dir` (created if missing).
pub fn write_outputs(dir: &Path, cfg: &SimulationConfig, out: &RunOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| SimError::io(format!("creating {}", dir.display()), e))?;
    render_outputs(cfg, out)?.iter().map(|(name, text)| write_file(dir, name, text)).collect()
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            SimError::Io { context: format!("file not found: {}", path.display()), message: e.to_string() }
        } else {
            SimError::io(format!("reading {}", path.display()), e)
        }
    })
}

pub fn read_metadata(dir: &Path) -> Result<Metadata> {
    let text = read_file(&dir.join("metadata.toml"))?;
    let meta: Metadata = toml::from_str(&text).map_err(|e| SimError::ParseError {
        location: format!("{}: {}", dir.join("metadata.toml").display(), e.span().map_or(0, |s| line_of(&text, s.start))),
        message: e.message().to_string(),
    })?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(SimError::ValidationError(format!(
            "output schema {} is not supported (expected {SCHEMA_VERSION})",
            meta.schema_version
        )));
    }
    Ok(meta)
}

fn column_category(file: &str, column: &str) -> CheckCategory {
    match (file, column) {
        ("transport.csv", _) => CheckCategory::Transport,
        ("diagnostics.csv", c) if c.starts_with("flow_") => CheckCategory::FlowMap,
        (
            "diagnostics.csv",
            "coupling_residual" | "linearization_defect" | "cn_residual" | "min_separation" | "tangential_jump"
            | "multiplier_coupling",
        ) => CheckCategory::Coupling,
        _ => CheckCategory::Energy,
    }
}

fn split_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
    (header, lines.map(|l| l.split(',').map(str::to_string).collect()).collect())
}

/// Compares a stored CSV file column by column with its regenerated text;
/// the value of each check is the number of mismatching rows.
fn compare_csv(file: &str, stored: &str, fresh: &str, cats: &[CheckCategory], rep: &mut VerificationReport) {
    let (h_s, rows_s) = split_csv(stored);
    let (h_f, rows_f) = split_csv(fresh);
    let stem = file.trim_end_matches(".csv");
    if h_s != h_f || rows_s.len() != rows_f.len() {
        let cat = column_category(file, "");
        rep.checks.push(CheckResult {
            name: format!("stored_{stem}.layout"),
            category: cat,
            value: 1.0,
            threshold: 0.0,
            pass: false,
        });
        return;
    }
    for (ci, col) in h_f.iter().enumerate() {
        let cat = column_category(file, col);
        if !cats.contains(&cat) {
            continue;
        }
        let bad = rows_s.iter().zip(&rows_f).filter(|(a, b)| a.get(ci) != b.get(ci)).count();
        rep.checks.push(CheckResult::at_most(&format!("stored_{stem}.{col}"), cat, bad as f64, 0.0));
    }
}

/// Checks that can be made from the stored budget file alone.
fn stored_budget_checks(text: &str, initial_energy: f64, rep: &mut VerificationReport) {
    let (header, rows) = split_csv(text);
    let parsed: Option<Vec<EnergyBudget>> = rows
        .iter()
        .map(|r| {
            if r.len() != header.len() || r.len() != EnergyBudget::COLUMNS.len() {
                return None;
            }
            let step = r[0].parse().ok()?;
            let mut v = [0.0; 13];
            for (t, slot) in v.iter_mut().enumerate() {
                *slot = r[t + 2].parse().ok()?;
            }
            Some(EnergyBudget::from_values(step, v))
        })
        .collect();
    let Some(budgets) = parsed else {
        rep.checks.push(CheckResult {
            name: "stored_budget.parse".into(),
            category: CheckCategory::Energy,
            value: 1.0,
            threshold: 0.0,
            pass: false,
        });
        return;
    };
    let th = CheckThresholds::default();
    let gap = if budgets.is_empty() { 0.0 } else { max_relative_comparison_gap(&budgets) };
    rep.checks.push(CheckResult::at_most("stored_comparison_gap", CheckCategory::Energy, gap, th.comparison_rel));
    let chain = check_energy_chain(&budgets, initial_energy, th.comparison_rel);
    rep.checks.push(CheckResult::at_most("stored_energy_chain_excess", CheckCategory::Energy, chain.worst_excess, 0.0));
}

/// Verifies a run directory: checks the stored budget, reruns the echoed
/// configuration and compares every stored file with the regenerated one,
/// then reruns the selected diagnostics.
pub fn verify_dir(dir: &Path, categories: &[CheckCategory]) -> Result<VerificationReport> {
    let meta = read_metadata(dir)?;
    let mut cfg = meta.config.clone();
    cfg.checks = categories.iter().map(|c| c.name().to_string()).collect();
    let out = run_config(&cfg)?;
    let mut rep = VerificationReport::default();
    if let RunOutput::Simulation { trajectory, .. } = &out {
        if categories.contains(&CheckCategory::Energy) {
            let stored = read_file(&dir.join("budget.csv"))?;
            stored_budget_checks(&stored, trajectory.initial_energy.total, &mut rep);
        }
    }
    let fresh = render_outputs(&meta.config, &out)?;
    for (name, text) in &fresh {
        if name.ends_with(".csv") {
            let stored = read_file(&dir.join(name))?;
            compare_csv(name, &stored, text, categories, &mut rep);
        } else if name == "snapshots.txt" && categories.contains(&CheckCategory::Energy) {
            let stored = read_file(&dir.join(name))?;
            let bad = stored.lines().zip(text.lines()).filter(|(a, b)| a != b).count()
                + stored.lines().count().abs_diff(text.lines().count());
            rep.checks.push(CheckResult::at_most("stored_snapshots", CheckCategory::Energy, bad as f64, 0.0));
        }
    }
    if meta.steps_completed != out.steps_completed() {
        rep.checks.push(CheckResult {
            name: "stored_steps_completed".into(),
            category: CheckCategory::Energy,
            value: meta.steps_completed as f64,
            threshold: out.steps_completed() as f64,
            pass: false,
        });
    }
    rep.checks.extend(out.verification().checks.iter().cloned());
    Ok(rep)
}

/// Parameter grid for [`sweep`]; an empty list keeps the configured value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepSpec {
    pub tau: Vec<f64>,
    pub h: Vec<f64>,
    pub kappa: Vec<f64>,
    pub slip: Vec<f64>,
}

/// Summary of one sweep member.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub h: f64,
    pub kappa: f64,
    pub slip: f64,
    pub steps: usize,
    pub abort: String,
    pub max_comparison_gap: f64,
    pub max_coupling_residual: f64,
    pub max_linearization_defect: f64,
    pub mean_tangential_jump: f64,
    pub flow_det_drift: f64,
    pub final_energy: f64,
    pub verified: bool,
}

pub const SWEEP_COLUMNS: [&str; 13] = [
    "tau",
    "h",
    "kappa",
    "slip",
    "steps",
    "abort",
    "max_comparison_gap",
    "max_coupling_residual",
    "max_linearization_defect",
    "mean_tangential_jump",
    "flow_det_drift",
    "final_energy",
    "verified",
];

fn or_base(list: &[f64], base: f64) -> Vec<f64> {
    if list.is_empty() {
        vec![base]
    } else {
        list.to_vec()
    }
}

/// Configurations of the Cartesian product of the sweep lists, in
/// `tau`-major order.
pub fn sweep_configs(base: &SimulationConfig, spec: &SweepSpec) -> Vec<SimulationConfig> {
    let mut out = Vec::new();
    for &tau in &or_base(&spec.tau, base.step.dt_tau) {
        for &h in &or_base(&spec.h, base.step.h_delay) {
            for &kappa in &or_base(&spec.kappa, base.step.kappa) {
                for &slip in &or_base(&spec.slip, base.fluid.slip_coefficient) {
                    let mut c = base.clone();
                    c.step.dt_tau = tau;
                    c.step.h_delay = h;
                    c.step.kappa = kappa;
                    c.fluid.slip_coefficient = slip;
                    out.push(c);
                }
            }
        }
    }
    out
}

/// Summary row of a finished simulation.
pub fn summarize(cfg: &SimulationConfig, out: &RunOutput) -> Result<SweepRow> {
    let RunOutput::Simulation { model, trajectory: traj, report, .. } = out else {
        return Err(SimError::ValidationError("sweeps need a simulation scenario".into()));
    };
    let budgets: Vec<EnergyBudget> = traj.steps.iter().map(|s| s.budget).collect();
    let coupling = coupling_series(traj, &model.fluid_grid)?;
    let fold_max = |f: &dyn Fn(&crate::stepper::StepRecord) -> f64| traj.steps.iter().map(f).fold(0.0, f64::max);
    Ok(SweepRow {
        tau: cfg.step.dt_tau,
        h: cfg.step.h_delay,
        kappa: cfg.step.kappa,
        slip: cfg.fluid.slip_coefficient,
        steps: traj.steps.len(),
        abort: traj.abort.as_ref().map(|e| e.to_string()).unwrap_or_default(),
        max_comparison_gap: if budgets.is_empty() { 0.0 } else { max_relative_comparison_gap(&budgets) },
        max_coupling_residual: fold_max(&|s| s.stats.coupling_residual),
        max_linearization_defect: fold_max(&|s| s.stats.linearization_defect),
        mean_tangential_jump: mean_tangential_jump(&coupling),
        flow_det_drift: fold_max(&|s| (s.stats.flow_det_min - 1.0).abs().max((s.stats.flow_det_max - 1.0).abs())),
        final_energy: traj.steps.last().map_or(traj.initial_energy.total, |s| s.budget.state_energy()),
        verified: report.passed(),
    })
}

/// Runs every member of a sweep sequentially. With `dir`, member `i` is
/// written to `dir/run_{i:03}` and the summary to `dir/sweep.csv`.
pub fn sweep(base: &SimulationConfig, spec: &SweepSpec, dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (i, cfg) in sweep_configs(base, spec).iter().enumerate() {
        let out = run_config(cfg)?;
        if let Some(d) = dir {
            write_outputs(&d.join(format!("run_{i:03}")), cfg, &out)?;
        }
        rows.push(summarize(cfg, &out)?);
    }
    if let Some(d) = dir {
        let text = csv(
            &SWEEP_COLUMNS,
            rows.iter().map(|r| {
                vec![
                    fmt_f(r.tau),
                    fmt_f(r.h),
                    fmt_f(r.kappa),
                    fmt_f(r.slip),
                    r.steps.to_string(),
                    format!("\"{}\"", r.abort.replace('"', "'")),
                    fmt_f(r.max_comparison_gap),
                    fmt_f(r.max_coupling_residual),
                    fmt_f(r.max_linearization_defect),
                    fmt_f(r.mean_tangential_jump),
                    fmt_f(r.flow_det_drift),
                    fmt_f(r.final_energy),
                    r.verified.to_string(),
                ]
            }),
        );
        fs::create_dir_all(d).map_err(|e| SimError::io(format!("creating {}", d.display()), e))?;
        write_file(d, "sweep.csv", &text)?;
    }
    Ok(rows)
}

#[derive(Debug, Parser)]
#[command(name = "varislip", version, about = "Fluid-structure interaction with Navier slip by minimizing movements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a simulation and write its output directory.
    Run(CommonArgs),
    /// Re-check a run directory; exit status 2 if any check fails.
    Verify(CommonArgs),
    /// Run a parameter grid over tau, h, kappa and the slip coefficient.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated time steps
        #[arg(long, value_delimiter = ',')]
        tau: Vec<f64>,
        /// Comma-separated delay lengths
        #[arg(long, value_delimiter = ',')]
        h: Vec<f64>,
        /// Comma-separated regularizer weights
        #[arg(long, value_delimiter = ',')]
        kappa: Vec<f64>,
        /// Comma-separated slip coefficients
        #[arg(long, value_delimiter = ',')]
        slip: Vec<f64>,
    },
    /// List built-in scenarios.
    Scenarios,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scenario, used when no configuration file is given.
    #[arg(long)]
    scenario: Option<String>,
    /// Output (or, for verify, run) directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Number of steps, overriding the end time.
    #[arg(long)]
    steps: Option<usize>,
    /// Checks to run: all|energy|coupling|transport|flowmap.
    #[arg(long, default_value = "all")]
    check: String,
    /// Seed for the initial perturbation, overriding the configuration
    #[arg(long)]
    seed: Option<u64>,
}

fn load_config(args: &CommonArgs) -> Result<SimulationConfig> {
    let mut cfg = match (&args.config, &args.scenario) {
        (Some(path), _) => parse_config(&read_file(path)?)?,
        (None, Some(name)) => scenario_config(name)?,
        (None, None) => {
            return Err(SimError::ValidationError("either --config or --scenario is required".into()));
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.checks = vec![args.check.clone()];
    if let Some(n) = args.steps {
        cfg.override_steps(n)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(args: &CommonArgs, cfg: Option<&SimulationConfig>) -> Result<PathBuf> {
    if let Some(o) = &args.output {
        return Ok(o.clone());
    }
    if let Some(d) = cfg.and_then(|c| c.output_dir.as_ref()) {
        return Ok(PathBuf::from(d));
    }
    let root = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("varislip_out"));
    match cfg {
        Some(c) => Ok(root.join(&c.scenario)),
        None => Err(SimError::ValidationError("verify needs --output, --config or --scenario".into())),
    }
}

fn report_status(rep: &VerificationReport) -> i32 {
    for f in rep.failures() {
        eprintln!("check failed: {} ({}): {:e} > {:e}", f.name, f.category.name(), f.value, f.threshold);
    }
    if rep.passed() {
        0
    } else {
        2
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Scenarios => {
            for (name, about) in SCENARIOS {
                println!("{name:<26} {about}");
            }
            Ok(0)
        }
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let dir = output_dir(&args, Some(&cfg))?;
            let out = run_config(&cfg)?;
            write_outputs(&dir, &cfg, &out)?;
            println!("wrote {} ({} steps)", dir.display(), out.steps_completed());
            if let Some(e) = out.abort() {
                eprintln!("run stopped after step {}: {e}", out.steps_completed());
                return Ok(1);
            }
            Ok(report_status(out.verification()))
        }
        Command::Verify(args) => {
            let cfg = if args.config.is_some() || args.scenario.is_some() { Some(load_config(&args)?) } else { None };
            let dir = output_dir(&args, cfg.as_ref())?;
            let cats = CheckCategory::parse(&args.check).ok_or_else(|| {
                SimError::ValidationError(format!("unknown check `{}`", args.check))
            })?;
            let rep = verify_dir(&dir, &cats)?;
            print!("{}", rep.render());
            Ok(report_status(&rep))
        }
        Command::Sweep { common, tau, h, kappa, slip } => {
            let cfg = load_config(&common)?;
            let dir = output_dir(&common, Some(&cfg))?;
            let rows = sweep(&cfg, &SweepSpec { tau, h, kappa, slip }, Some(&dir))?;
            println!("wrote {} ({} runs)", dir.join("sweep.csv").display(), rows.len());
            Ok(if rows.iter().all(|r| r.verified) { 0 } else { 2 })
        }
    }
}

/// Command-line entry point; returns the process exit status
/// (0 success, 2 verification failure, 1 runtime error).
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
