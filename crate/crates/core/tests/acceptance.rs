//! Acceptance criteria at full size. Prints one PASS/FAIL line per
//! criterion and exits nonzero if any criterion failed. Runs without the
//! test harness so the lines are never captured.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use varislip::cli_io::*;
use varislip::diagnostics::*;
use varislip::error::SimError;
use varislip::fluid_model::{project_divergence_free, FluidGrid, VelocityField};
use varislip::geometry::{build_interface, classify_cells, CellClassification};
use varislip::linalg::max_abs;
use varislip::solid_model::*;
use varislip::stepper::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn simulate(cfg: &SimulationConfig) -> (Model, Box<Trajectory>, VerificationReport) {
    match run_config(cfg).expect("run") {
        RunOutput::Simulation { model, trajectory, report, .. } => (model, trajectory, report),
        RunOutput::Transport { .. } => unreachable!("simulation scenario"),
    }
}

fn random_deformation(grid: std::sync::Arc<SolidGrid>, rng: &mut ChaCha8Rng) -> DeformationField {
    let c: [f64; 8] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let th = rng.random_range(-0.5..0.5f64);
    let (s, co) = th.sin_cos();
    DeformationField::from_map(grid, |x| {
        let u = [
            x[0] + c[0] * (PI * x[1]).sin() + c[1] * (2.0 * PI * x[0]).cos() + c[2] * x[0] * x[1] + c[3] * x[1] * x[1],
            x[1] + c[4] * (PI * x[0]).sin() + c[5] * (PI * x[1]).cos() + c[6] * x[0] * x[0] + c[7] * x[0] * x[1],
        ];
        [co * u[0] - s * u[1] + 0.2, s * u[0] + co * u[1] + 0.1]
    })
}

/// Fourth-order central difference. The nodal-Hessian term has third
/// derivatives of order 1e9 along rough nodal directions, which puts the
/// three-point truncation error near 1e-4 at any step size above roundoff.
fn central(f: &dyn Fn(f64) -> f64, s: f64) -> f64 {
    (8.0 * (f(s) - f(-s)) - (f(2.0 * s) - f(-2.0 * s))) / (12.0 * s)
}

fn criterion_1() -> Outcome {
    let grid = std::sync::Arc::new(SolidGrid::new(16, 16, 1.0, 1.0, [0.0, 0.0]).unwrap());
    let mat = MaterialParams::default().with_stiffness(3.0);
    let reg = RegularizerConfig { kappa: 1e-3, ..RegularizerConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = grid.num_nodes();
    let dot = |a: &[Vec2], b: &[Vec2]| a.iter().zip(b).map(|(p, q)| p[0] * q[0] + p[1] * q[1]).sum::<f64>();
    let (mut worst_e, mut worst_r): (f64, f64) = (0.0, 0.0);
    for _ in 0..10 {
        let eta = random_deformation(grid.clone(), &mut rng);
        let ge = energy_gradient(&eta, &mat, &reg).unwrap();
        let b: Vec<Vec2> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let gr = dissipation_gradient(&eta, &b, &mat, &reg).unwrap();
        for _ in 0..10 {
            let d: Vec<Vec2> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let s = 1e-6;
            let shift = |base: &[Vec2], t: f64| -> Vec<Vec2> { base.iter().zip(&d).map(|(p, q)| [p[0] + t * q[0], p[1] + t * q[1]]).collect() };
            let e = |t: f64| eval_energy(&DeformationField::new(grid.clone(), shift(eta.positions(), t)), &mat, &reg).unwrap().total;
            let fd = central(&e, s);
            let an = dot(&ge, &d);
            worst_e = worst_e.max((fd - an).abs() / an.abs());
            let r = |t: f64| eval_dissipation(&eta, &shift(&b, t), &mat, &reg).unwrap();
            let fd = central(&r, s);
            let an = dot(&gr, &d);
            worst_r = worst_r.max((fd - an).abs() / an.abs());
        }
    }
    outcome(worst_e < 1e-5 && worst_r < 1e-5, format!("max relative error: energy {worst_e:.2e}, dissipation {worst_r:.2e} (< 1e-5)"))
}

struct MainRun {
    model: Model,
    cfg: SimulationConfig,
    traj: Box<Trajectory>,
    files: Vec<(String, String)>,
}

fn main_run() -> MainRun {
    let cfg = scenario_config("falling_disc").unwrap();
    let out = run_config(&cfg).unwrap();
    let files = render_outputs(&cfg, &out).unwrap();
    let RunOutput::Simulation { model, trajectory, .. } = out else { unreachable!() };
    MainRun { model, cfg, traj: trajectory, files }
}

fn criterion_2(run: &MainRun) -> Outcome {
    let t = &run.traj;
    let mut worst = f64::NEG_INFINITY;
    let mut ok = t.steps.len() == 200 && t.abort.is_none();
    for s in &t.steps {
        let b = &s.budget;
        ok &= b.comparison_gap <= 1e-9 * b.objective.abs();
        worst = worst.max(b.comparison_gap / b.objective.abs());
    }
    outcome(ok, format!("{} steps, max (J_k − J_start)/|J| = {worst:.2e} (≤ 1e-9)", t.steps.len()))
}

fn criterion_3(run: &MainRun) -> Outcome {
    let re = reassemble_budgets(&run.model, &run.cfg.step, &run.traj).unwrap();
    let chain = check_energy_chain(&re, run.traj.initial_energy.total, 0.0);
    let jmax = re.iter().map(|b| b.objective.abs()).fold(0.0, f64::max);
    let excess = chain.lhs.iter().zip(&chain.rhs).map(|(l, r)| l - r).fold(f64::NEG_INFINITY, f64::max);
    let allowed = 200.0 * 1e-9 * jmax;
    outcome(
        excess <= allowed && !re.is_empty(),
        format!("max (lhs − rhs) = {excess:.2e}, allowed {allowed:.2e}, reassembly discrepancy {:.1e}",
            budget_discrepancy(&run.traj.steps.iter().map(|s| s.budget).collect::<Vec<_>>(), &re)),
    )
}

fn criterion_4(run: &MainRun) -> Outcome {
    let series = coupling_series(&run.traj, &run.model.fluid_grid).unwrap();
    let normal = series.iter().map(|c| c.normal_residual).fold(0.0, f64::max);
    let mut defects = Vec::new();
    for tau in [1e-3, 5e-4, 2.5e-4] {
        let mut c = scenario_config("falling_disc").unwrap();
        c.step.dt_tau = tau;
        c.step.t_end = 0.02;
        c.checks = vec!["flowmap".into()];
        let (_, traj, _) = simulate(&c);
        assert!(traj.abort.is_none(), "{:?}", traj.abort);
        defects.push(traj.steps.iter().map(|s| s.stats.linearization_defect).fold(0.0, f64::max));
    }
    let ratios = [defects[0] / defects[1], defects[1] / defects[2]];
    outcome(
        normal < 1e-7 && ratios.iter().all(|r| *r >= 1.8),
        format!("max normal residual {normal:.2e} (< 1e-7); defects {:.2e} {:.2e} {:.2e}, ratios {:.2} {:.2} (≥ 1.8)",
            defects[0], defects[1], defects[2], ratios[0], ratios[1]),
    )
}

fn criterion_5(run: &MainRun) -> Outcome {
    let lo = run.traj.steps.iter().map(|s| s.stats.flow_det_min).fold(f64::INFINITY, f64::min);
    let hi = run.traj.steps.iter().map(|s| s.stats.flow_det_max).fold(f64::NEG_INFINITY, f64::max);
    let g = FluidGrid::unit(32);
    let cls = CellClassification::all_fluid(&g);
    let v = VelocityField::from_fn(&g, &cls, |p| [-0.5 * (p[1] - 0.5), 0.5 * (p[0] - 0.5)]);
    let mut fm = FlowMap::new(&g, &cls, &[], 0.0);
    for _ in 0..100 {
        fm = update_flow_map(&fm, &v, &g, &cls, 1e-3, None).unwrap();
    }
    let rot = flow_map_report(&fm);
    outcome(
        lo >= 0.9 && hi <= 1.1 && rot.min_det >= 0.9999 && rot.max_det <= 1.0001,
        format!("run det ∈ [{lo:.6}, {hi:.6}] (⊂ [0.9, 1.1]); rotation det ∈ [{:.7}, {:.7}] (⊂ [0.9999, 1.0001])", rot.min_det, rot.max_det),
    )
}

fn criterion_6() -> Outcome {
    let error = |m: usize| {
        let mut c = scenario_config("shrinking_disc_transport").unwrap();
        c.fluid.cells = [m, m];
        run_transport(&c).unwrap().reference_error.unwrap()
    };
    let start = Instant::now();
    let (coarse, fine) = (error(48), error(96));
    let secs = start.elapsed().as_secs_f64();
    outcome(
        fine < 0.02 && coarse / fine >= 1.7,
        format!("96² error {fine:.2e} (< 2%), 48² error {coarse:.2e}, ratio {:.2} (≥ 1.7), {secs:.1} s", coarse / fine),
    )
}

fn criterion_7() -> Outcome {
    let mut jumps = Vec::new();
    for slip in [0.1, 1.0, 10.0, 100.0] {
        let mut c = scenario_config("sheared_block").unwrap();
        c.fluid.slip_coefficient = slip;
        c.checks = vec!["flowmap".into()];
        let (model, traj, _) = simulate(&c);
        assert!(traj.abort.is_none(), "{:?}", traj.abort);
        jumps.push(mean_tangential_jump(&coupling_series(&traj, &model.fluid_grid).unwrap()));
    }
    let ok = jumps.windows(2).all(|w| w[1] < w[0]);
    outcome(ok, format!("mean tangential jump {:.3e} > {:.3e} > {:.3e} > {:.3e}", jumps[0], jumps[1], jumps[2], jumps[3]))
}

fn criterion_8() -> Outcome {
    let mut c = scenario_config("falling_disc").unwrap();
    c.solid.nx = 16;
    c.solid.ny = 16;
    c.fluid.cells = [48, 48];
    c.step.t_end = 0.05;
    c.step.force = Force::Zero;
    c.checks = vec!["flowmap".into()];
    let mut rest = c.clone();
    rest.solid.stretch = Some(1.0);
    rest.solid.det_weight = 0.0;
    rest.solid.grad2_weight = 0.0;
    let (_, traj, _) = simulate(&rest);
    let mut disp: f64 = 0.0;
    let mut vmax: f64 = 0.0;
    for s in &traj.steps {
        for (p, q) in s.eta.iter().zip(&traj.initial_eta) {
            disp = disp.max((p[0] - q[0]).abs().max((p[1] - q[1]).abs()));
        }
        vmax = vmax.max(s.velocity.max_norm());
    }
    let rest_ok = traj.abort.is_none() && traj.steps.len() == 50 && disp < 1e-8 && vmax < 1e-8;

    let mut moving = c;
    moving.solid.stretch = Some(1.08 * stress_free_stretch(&moving.material()));
    moving.initial.fluid_velocity = FluidInit::Rotation { omega: 0.5, center: [0.5, 0.5] };
    // the solid starts at rest: initial solid velocity is converted into
    // elastic energy by inertia, which no stored-energy bound excludes
    moving.initial.solid_velocity = [0.0, 0.0];
    let (_, traj2, _) = simulate(&moving);
    let mut last = traj2.initial_energy.total;
    let mut worst_rise = f64::NEG_INFINITY;
    for s in &traj2.steps {
        let e = s.budget.state_energy();
        worst_rise = worst_rise.max(e - last);
        last = e;
    }
    let mono_ok = traj2.abort.is_none() && worst_rise <= 0.0;
    outcome(
        rest_ok && mono_ok,
        format!("(a) max displacement {disp:.1e}, max |v| {vmax:.1e} (< 1e-8); (b) largest step increase of E + reg {worst_rise:.2e} (≤ 0)"),
    )
}

fn criterion_9(run: &MainRun) -> Outcome {
    let cn = run.traj.steps.iter().map(|s| s.stats.cn_residual.abs()).fold(0.0, f64::max);
    let sep = run.traj.steps.iter().map(|s| s.stats.min_separation).fold(f64::INFINITY, f64::min);
    let mut c = scenario_config("colliding_disc").unwrap();
    c.checks = vec!["flowmap".into()];
    let (_, traj, _) = simulate(&c);
    let contact = matches!(traj.abort, Some(SimError::ContactImminent { .. }));
    let cn_c = traj.steps.iter().map(|s| s.stats.cn_residual.abs()).fold(0.0, f64::max);
    let sep_c = traj.steps.iter().map(|s| s.stats.min_separation).fold(f64::INFINITY, f64::min);
    outcome(
        cn < 1e-6 && sep > 0.0 && contact && cn_c <= 1e-4 && sep_c > 0.0,
        format!(
            "main run: CN {cn:.1e}, separation {sep:.3}; colliding: aborted with contact = {contact} after {} steps, CN {cn_c:.1e}, separation {sep_c:.2e}",
            traj.steps.len()
        ),
    )
}

/// Null-space Newton on the assembled step: the objective and gradient are
/// evaluated through the public term functions, the null space comes from
/// the eigendecomposition of AᵀA and the energy Hessian from differences of
/// the energy gradient.
fn oracle_minimize(p: &StepProblem) -> Vec<f64> {
    let n = p.num_unknowns();
    let dense = |rows: Vec<Vec<f64>>, r: usize, c: usize| DMatrix::from_fn(r, c, |i, j| rows[i][j]);
    let a = dense(p.constraints.dense(), p.num_constraints(), n);
    let q = dense(p.quadratic().dense(), n, n);
    let eig = (a.transpose() * &a).symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] < 1e-12 * top).collect();
    let basis = DMatrix::from_fn(n, cols.len(), |i, j| eig.eigenvectors[(i, cols[j])]);
    let nu = p.num_solid_unknowns();
    let sgrid = p.eta_prev.grid.clone();
    let energy_grad = |z: &DVector<f64>| -> DVector<f64> {
        let eta = DeformationField::new(sgrid.clone(), p.eta_prev.positions().iter().enumerate().map(|(i, x)| [x[0] + z[2 * i], x[1] + z[2 * i + 1]]).collect());
        DVector::from_vec(flatten(&energy_gradient(&eta, &p.material, &p.reg).unwrap()))
    };
    let obj = |z: &DVector<f64>| p.objective(z.as_slice()).unwrap();
    let mut z = DVector::zeros(n);
    for _ in 0..30 {
        let g = basis.transpose() * DVector::from_vec(p.gradient(z.as_slice()).unwrap());
        if g.amax() < 1e-13 {
            break;
        }
        let mut h = q.clone();
        let s = 1e-6;
        for k in 0..nu {
            let mut zp = z.clone();
            zp[k] += s;
            let mut zm = z.clone();
            zm[k] -= s;
            let col = (energy_grad(&zp) - energy_grad(&zm)) / (2.0 * s);
            for i in 0..nu {
                h[(i, k)] += col[i];
            }
        }
        let h = 0.5 * (&h + h.transpose());
        let hr = basis.transpose() * h * &basis;
        let dy = hr.lu().solve(&(-&g)).expect("reduced Hessian is invertible");
        let dz = &basis * dy;
        let j0 = obj(&z);
        let mut t = 1.0;
        while obj(&(&z + t * &dz)) > j0 && t > 1e-8 {
            t *= 0.5;
        }
        z += t * dz;
    }
    z.as_slice().to_vec()
}

fn criterion_10() -> Outcome {
    let mut c = scenario_config("falling_disc").unwrap();
    c.solid.nx = 8;
    c.solid.ny = 8;
    c.fluid.cells = [24, 24];
    c.initial.solid_velocity = [0.05, -0.2];
    c.initial.fluid_velocity = FluidInit::Rotation { omega: 0.5, center: [0.5, 0.5] };
    let model = c.build_model().unwrap();
    let init = c.build_initial(&model).unwrap();
    let iface = build_interface(&init.eta0).unwrap();
    let cls = classify_cells(&iface, &model.fluid_grid).unwrap();
    let v0 = project_divergence_free(&model.fluid_grid, &init.v0, &cls).unwrap();
    let fm = FlowMap::new(&model.fluid_grid, &cls, &iface.points, 0.0);
    let win = DelayWindow::initial(&init.eta_star, &v0, &model.fluid_grid, &cls, &fm, c.step.steps_per_window()).unwrap();
    let p = assemble_step(&model, &c.step, &init.eta0, &win, &fm, 1).unwrap();
    let ours = solve_step(&p, &c.step.solver, model.fluid_grid.dx).unwrap();
    let oracle = oracle_minimize(&p);
    let (jo, js) = (p.objective(&oracle).unwrap(), ours.objective);
    let rel_j = (jo - js).abs() / js.abs();
    let diff: Vec<f64> = oracle.iter().zip(&ours.z).map(|(a, b)| a - b).collect();
    let dist = p.energy_norm_sq(&diff).sqrt();
    let size = p.energy_norm_sq(&ours.z).sqrt();
    let feas = max_abs(&p.constraints.mul_vec(&oracle));
    outcome(
        rel_j < 1e-6 && dist < 1e-4 * size,
        format!("objective gap {rel_j:.1e} (< 1e-6), energy-norm distance {dist:.1e} = {:.1e}·‖z‖ (< 1e-4), oracle feasibility {feas:.1e}", dist / size),
    )
}

fn criterion_11(run: &MainRun) -> Outcome {
    let cfg = scenario_config("falling_disc").unwrap();
    let out = run_config(&cfg).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for (dir, files) in [(a.path(), &run.files), (b.path(), &render_outputs(&cfg, &out).unwrap())] {
        for (name, text) in files {
            std::fs::write(dir.join(name), text).unwrap();
        }
    }
    let mut differing = Vec::new();
    for (name, _) in &run.files {
        if std::fs::read(a.path().join(name)).unwrap() != std::fs::read(b.path().join(name)).unwrap() {
            differing.push(name.clone());
        }
    }
    outcome(differing.is_empty(), format!("{} files compared, differing: {differing:?}", run.files.len()))
}

/// Final budget row of the reference falling_disc run, recorded from the
/// first verified run of this implementation.
const LOCKED_FINAL_ELASTIC: f64 = 3.468578947371965e-2;
const LOCKED_FINAL_OBJECTIVE: f64 = 3.468570956192901e-2;

fn regression_lock(run: &MainRun) -> Outcome {
    let last = run.traj.steps.last().expect("steps").budget;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let (de, dj) = (rel(last.elastic, LOCKED_FINAL_ELASTIC), rel(last.objective, LOCKED_FINAL_OBJECTIVE));
    outcome(de < 1e-12 && dj < 1e-12, format!("final elastic off by {de:.1e}, objective off by {dj:.1e} (< 1e-12)"))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut timed = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!("criterion {id:>2} {:<4} {name}: {} [{secs:.1} s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o, secs));
    };
    timed(1, "gradient consistency", &mut criterion_1);
    let t = Instant::now();
    let run = main_run();
    println!("main falling_disc run: {} steps in {:.1} s", run.traj.steps.len(), t.elapsed().as_secs_f64());
    timed(2, "per-step comparison inequality", &mut || criterion_2(&run));
    timed(3, "summed energy estimate", &mut || criterion_3(&run));
    timed(4, "coupling constraint and linearization defect", &mut || criterion_4(&run));
    timed(5, "flow-map determinant", &mut || criterion_5(&run));
    timed(6, "transport identity", &mut criterion_6);
    timed(7, "slip monotonicity", &mut criterion_7);
    timed(8, "trivial equilibria", &mut criterion_8);
    timed(9, "injectivity and no contact", &mut || criterion_9(&run));
    timed(10, "oracle equivalence", &mut criterion_10);
    timed(11, "determinism", &mut || criterion_11(&run));

    let lock = regression_lock(&run);
    println!("falling_disc regression lock: {} {}", if lock.pass { "PASS" } else { "FAIL" }, lock.detail);

    println!("\nsummary:");
    for (id, name, o, _) in &results {
        println!("  criterion {id:>2}: {} {name}", if o.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
    assert!(lock.pass, "regression lock: {}", lock.detail);
}
