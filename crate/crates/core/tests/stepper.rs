use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use varislip::cli_io::{scenario_config, FluidInit, SimulationConfig};
use varislip::fluid_model::*;
use varislip::geometry::{build_interface, classify_cells, CellClassification, CellLabel};
use varislip::linalg::{dot, max_abs};
use varislip::solid_model::*;
use varislip::stepper::*;

/// Falling body at desk scale: 8² solid nodes in a 24² box, two slots per window.
fn small_config() -> SimulationConfig {
    let mut c = scenario_config("falling_disc").unwrap();
    c.solid.nx = 8;
    c.solid.ny = 8;
    c.fluid.cells = [24, 24];
    c.step.h_delay = 2e-3;
    c.step.t_end = 4e-3;
    c
}

fn setup(c: &SimulationConfig) -> (Model, InitialData) {
    let model = c.build_model().unwrap();
    let init = c.build_initial(&model).unwrap();
    (model, init)
}

/// First-step problem with the initial window and flow map.
fn first_problem(model: &Model, cfg: &StepConfig, init: &InitialData, eta_prev: &DeformationField) -> StepProblem {
    let iface = build_interface(eta_prev).unwrap();
    let cls = classify_cells(&iface, &model.fluid_grid).unwrap();
    let v0 = project_divergence_free(&model.fluid_grid, &init.v0, &cls).unwrap();
    let fm = FlowMap::new(&model.fluid_grid, &cls, &iface.points, 0.0);
    let win = DelayWindow::initial(&init.eta_star, &v0, &model.fluid_grid, &cls, &fm, cfg.steps_per_window()).unwrap();
    assemble_step(model, cfg, eta_prev, &win, &fm, 1).unwrap()
}

fn rest_config() -> SimulationConfig {
    let mut c = small_config();
    c.step.force = Force::Zero;
    c.initial.fluid_velocity = FluidInit::Zero;
    c.initial.solid_velocity = [0.0, 0.0];
    c
}

#[test]
fn warm_start_objective_is_the_stored_energy() {
    let c = rest_config();
    let (model, init) = setup(&c);
    let p = first_problem(&model, &c.step, &init, &init.eta0);
    let z = vec![0.0; p.num_unknowns()];
    let e = eval_energy(&init.eta0, &model.material, &model.regularizer(&c.step)).unwrap();
    let j = p.objective(&z).unwrap();
    assert!((j - e.total).abs() < 1e-14 * e.total.abs(), "{j} vs {}", e.total);
    assert!(e.regularizer_term >= 0.0);
}

#[test]
fn constraint_rows_count_interface_walls_and_cells() {
    let c = small_config();
    let (model, init) = setup(&c);
    let p = first_problem(&model, &c.step, &init, &init.eta0);
    let g = &model.fluid_grid;
    let mut walls = 0;
    for cell in 0..g.num_cells() {
        if p.cls.is_active(cell) {
            let (i, j) = g.cell_ij(cell);
            walls += [i == 0, i + 1 == g.mx, j == 0, j + 1 == g.my].iter().filter(|b| **b).count();
        }
    }
    assert_eq!(p.num_coupling, p.interface.len());
    assert_eq!(p.num_coupling, 4 * (c.solid.nx - 1));
    assert_eq!(p.num_wall, walls);
    assert_eq!(p.num_div, p.cls.num_active());
    assert_eq!(p.num_constraints(), p.num_coupling + p.num_wall + p.num_div);
    assert_eq!(p.num_unknowns(), 2 * model.solid_grid.num_nodes() + 2 * p.cls.num_active());
}

/// Perturbed deformation, nonzero windows and force, random unknowns.
fn generic_problem() -> (StepProblem, Model, StepConfig, Vec<f64>) {
    let mut c = small_config();
    c.initial.solid_velocity = [0.1, -0.2];
    c.initial.fluid_velocity = FluidInit::Rotation { omega: 0.7, center: [0.5, 0.5] };
    c.step.force = Force::Oscillating { value: [0.3, -1.0], omega: 5.0 };
    let (model, init) = setup(&c);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let eta_prev = DeformationField::new(
        model.solid_grid.clone(),
        init.eta0.positions().iter().map(|p| [p[0] + rng.random_range(-1e-3..1e-3), p[1] + rng.random_range(-1e-3..1e-3)]).collect(),
    );
    let p = first_problem(&model, &c.step, &init, &eta_prev);
    let nu = p.num_solid_unknowns();
    let z: Vec<f64> = (0..p.num_unknowns())
        .map(|i| if i < nu { rng.random_range(-2e-4..2e-4) } else { rng.random_range(-0.3..0.3) })
        .collect();
    (p, model, c.step, z)
}

#[test]
fn objective_matches_recomputation_from_the_module_forms() {
    let (p, model, cfg, z) = generic_problem();
    let tau = cfg.dt_tau;
    let h = cfg.h_delay;
    let reg = model.regularizer(&cfg);
    let fluid = model.fluid_params(&cfg);
    let grid = &model.fluid_grid;
    let eta = p.eta_from(&z);
    let rate: Vec<Vec2> = eta.positions().iter().zip(p.eta_prev.positions()).map(|(a, b)| [(a[0] - b[0]) / tau, (a[1] - b[1]) / tau]).collect();
    let vel = p.velocity_from(&z);

    let energy = eval_energy(&eta, &model.material, &reg).unwrap().total;
    let dissipation = tau * eval_dissipation(&p.eta_prev, &rate, &model.material, &reg).unwrap();
    let w = model.solid_grid.weights();
    let rho_s = model.material.rho_s;
    let mut solid_inertia = 0.0;
    let mut solid_force = 0.0;
    for i in 0..rate.len() {
        let d = [rate[i][0] - p.w_s[i][0], rate[i][1] - p.w_s[i][1]];
        solid_inertia += rho_s * tau / (2.0 * h) * w[i] * (d[0] * d[0] + d[1] * d[1]);
        let f = cfg.force.slot_average(0.0, tau, p.eta_prev.positions()[i]);
        solid_force -= rho_s * tau * w[i] * (f[0] * rate[i][0] + f[1] * rate[i][1]);
    }
    let on_iface: Vec<Vec2> = p.interface.nodes.iter().map(|&n| rate[n]).collect();
    let slip = tau * slip_boundary_form(grid, &vel, &p.cls, &p.interface, &on_iface, &fluid).unwrap();
    let viscous = 0.5 * tau * fluid_dissipation_form(grid, &vel, &p.cls, &fluid).unwrap();
    // flow-map samples are still at their reference positions in step 1
    let fm = FlowMap::new(grid, &p.cls, &p.interface.points, 0.0);
    let mut fluid_inertia = 0.0;
    let mut fluid_force = 0.0;
    for s in 0..fm.len() {
        let vi = interpolate(grid, &p.cls, &vel, fm.positions[s]).unwrap();
        let d = [vi[0] - p.w_f[s][0], vi[1] - p.w_f[s][1]];
        fluid_inertia += fluid.rho_f * tau / (2.0 * h) * fm.weights[s] * (d[0] * d[0] + d[1] * d[1]);
        let f = cfg.force.slot_average(0.0, tau, fm.positions[s]);
        fluid_force -= tau * fluid.rho_f * fm.weights[s] * (f[0] * vi[0] + f[1] * vi[1]);
    }
    let total = energy + dissipation + solid_inertia + solid_force + slip + viscous + fluid_inertia + fluid_force;
    let j = p.objective(&z).unwrap();
    assert!((j - total).abs() < 1e-12 * total.abs().max(1.0), "{j} vs {total}");

    let terms = p.terms(&z).unwrap();
    for (a, b) in [
        (terms.solid_dissipation, dissipation),
        (terms.slip, slip),
        (terms.viscous, viscous),
        (terms.fluid_inertia, fluid_inertia),
        (terms.fluid_force, fluid_force),
    ] {
        assert!((a - b).abs() < 1e-12 * b.abs().max(1e-12), "{a} vs {b}");
    }

    // quadratic representation J = E(η_{k−1} + u) + ½zᵀQz + cᵀz + const
    let quad = energy + 0.5 * p.energy_norm_sq(&z) + dot(p.linear(), &z) + p.constant();
    assert!((quad - j).abs() < 1e-11 * j.abs().max(1.0), "{quad} vs {j}");
}

#[test]
fn objective_gradient_matches_central_differences() {
    let (p, _, _, z) = generic_problem();
    let g = p.gradient(&z).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let nu = p.num_solid_unknowns();
    for _ in 0..3 {
        let d: Vec<f64> = (0..z.len()).map(|i| if i < nu { rng.random_range(-1e-3..1e-3) } else { rng.random_range(-1.0..1.0) }).collect();
        let s = 1e-4;
        let at = |t: f64| p.objective(&z.iter().zip(&d).map(|(a, b)| a + t * b).collect::<Vec<_>>()).unwrap();
        let fd = (at(s) - at(-s)) / (2.0 * s);
        let an = dot(&g, &d);
        assert!((fd - an).abs() < 1e-6 * an.abs().max(1e-8), "{fd} vs {an}");
    }
}

#[test]
fn quiescent_strain_only_state_stays_at_rest() {
    let mut c = rest_config();
    c.solid.stretch = Some(1.0);
    c.solid.det_weight = 0.0;
    c.solid.grad2_weight = 0.0;
    let (model, init) = setup(&c);
    let p = first_problem(&model, &c.step, &init, &init.eta0);
    let threshold = model.fluid_grid.dx;
    let sol = solve_step(&p, &c.step.solver, threshold).unwrap();
    assert!(sol.converged);
    assert!(sol.iterations <= 1, "{} iterations", sol.iterations);
    assert!(max_abs(&sol.z) < 1e-14, "{}", max_abs(&sol.z));
    assert!(sol.velocity.max_norm() < 1e-14);
}

#[test]
fn solved_step_satisfies_comparison_and_constraints() {
    let (p, model, cfg, _) = generic_problem();
    let sol = solve_step(&p, &cfg.solver, model.fluid_grid.dx).unwrap();
    assert!(sol.converged);
    assert!(sol.objective <= sol.objective_start + 1e-12 * sol.objective.abs().max(1.0));
    let r = p.constraints.mul_vec(&sol.z);
    assert!(max_abs(&r) < 1e-10, "{}", max_abs(&r));
    assert!(sol.coupling_residual < 1e-10 && sol.divergence_residual < 1e-10);
    // active cells touching the container have zero wall-normal velocity
    assert!(sol.wall_residual < 1e-10);
    assert!(sol.min_det > 0.0);
    let b = step_budget(&p, &sol);
    assert_eq!(b.comparison_gap, sol.objective - sol.objective_start);
}

fn all_fluid_flow_map(m: usize) -> (FluidGrid, CellClassification, FlowMap) {
    let g = FluidGrid::unit(m);
    let cls = CellClassification::all_fluid(&g);
    let fm = FlowMap::new(&g, &cls, &[], 0.0);
    (g, cls, fm)
}

#[test]
fn constant_velocity_translates_samples() {
    let (g, cls, fm) = all_fluid_flow_map(16);
    let v = VelocityField::from_fn(&g, &cls, |_| [0.3, -0.2]);
    let out = update_flow_map(&fm, &v, &g, &cls, 0.01, None).unwrap();
    for (p, x) in out.positions.iter().zip(&fm.reference) {
        assert!((p[0] - x[0] - 0.003).abs() < 1e-15 && (p[1] - x[1] + 0.002).abs() < 1e-15);
    }
    let (lo, hi) = out.det_range();
    assert!((lo - 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
}

#[test]
fn zero_velocity_leaves_the_flow_map_bitwise_unchanged() {
    let (g, cls, fm) = all_fluid_flow_map(12);
    let out = update_flow_map(&fm, &VelocityField::zeros(&cls), &g, &cls, 0.05, None).unwrap();
    assert_eq!(out.positions, fm.reference);
    let (lo, hi) = out.det_range();
    assert!((lo - 1.0).abs() < 1e-15 && (hi - 1.0).abs() < 1e-15);
}

#[test]
fn rotation_step_has_the_explicit_euler_determinant() {
    let (g, cls, fm) = all_fluid_flow_map(16);
    let (omega, dt) = (0.5, 1e-3);
    let v = VelocityField::from_fn(&g, &cls, |p| [-omega * (p[1] - 0.5), omega * (p[0] - 0.5)]);
    let mut cur = fm;
    for k in 1..=100 {
        cur = update_flow_map(&cur, &v, &g, &cls, dt, None).unwrap();
        let (lo, hi) = cur.det_range();
        let want = (1.0 + omega * omega * dt * dt).powi(k);
        assert!((lo - want).abs() < 1e-10 && (hi - want).abs() < 1e-10, "step {k}: {lo} {hi} vs {want}");
    }
    let (lo, hi) = cur.det_range();
    assert!(lo >= 0.9999 && hi <= 1.0001);
}

#[test]
fn initial_window_repeats_the_initial_rates() {
    let (g, cls, fm) = all_fluid_flow_map(10);
    let v0 = VelocityField::from_fn(&g, &cls, |p| [p[1], -p[0]]);
    let eta_star = vec![[0.4, -0.1]; 9];
    let win = DelayWindow::initial(&eta_star, &v0, &g, &cls, &fm, 5).unwrap();
    assert_eq!(win.slots(), 5);
    assert!(win.w_s.iter().all(|s| s == &eta_star));
    for slot in &win.w_f {
        for (w, x) in slot.iter().zip(&fm.reference) {
            assert!((w[0] - x[1]).abs() < 1e-14 && (w[1] + x[0]).abs() < 1e-14);
        }
    }
}

#[test]
fn quiescent_window_advances_to_zero_rates() {
    let (g, cls, fm) = all_fluid_flow_map(10);
    let eta = vec![[0.2, 0.3]; 9];
    let v = VelocityField::zeros(&cls);
    let steps: Vec<WindowStep<'_>> = (0..4).map(|_| WindowStep { eta_prev: &eta, eta: &eta, velocity: &v, cls: &cls }).collect();
    let win = advance_delay_window(&steps, &fm, &g, 1e-3, 1).unwrap();
    assert_eq!(win.index, 1);
    assert!(win.w_s.iter().flatten().all(|w| *w == [0.0, 0.0]));
    assert!(win.w_f.iter().flatten().all(|w| *w == [0.0, 0.0]));
}

#[test]
fn steady_rotation_window_preserves_fluid_kinetic_energy() {
    let (g, cls, fm) = all_fluid_flow_map(20);
    let omega = 1.0;
    let v = VelocityField::from_fn(&g, &cls, |p| [-omega * (p[1] - 0.5), omega * (p[0] - 0.5)]);
    let eta = vec![[0.0, 0.0]; 4];
    let steps: Vec<WindowStep<'_>> = (0..10).map(|_| WindowStep { eta_prev: &eta, eta: &eta, velocity: &v, cls: &cls }).collect();
    let win = advance_delay_window(&steps, &fm, &g, 1e-3, 1).unwrap();
    let reference: f64 = fm.reference.iter().zip(&fm.weights).map(|(x, w)| {
        let u = interpolate(&g, &cls, &v, *x).unwrap();
        w * (u[0] * u[0] + u[1] * u[1])
    }).sum();
    for slot in &win.w_f {
        let e: f64 = slot.iter().zip(&fm.weights).map(|(u, w)| w * (u[0] * u[0] + u[1] * u[1])).sum();
        assert!((e - reference).abs() < 1e-3 * reference, "{e} vs {reference}");
    }
}

#[test]
fn zero_length_run_has_no_steps() {
    let mut c = small_config();
    c.step.t_end = 0.0;
    let (model, init) = setup(&c);
    let traj = run_simulation(&model, &c.step, &init).unwrap();
    assert!(traj.steps.is_empty());
    assert!(traj.abort.is_none());
    assert_eq!(traj.final_time(), 0.0);
    assert_eq!(traj.initial_eta, init.eta0.positions());
}

#[test]
fn unforced_run_does_not_gain_stored_energy() {
    let mut c = rest_config();
    c.solid.stretch = Some(1.08 * stress_free_stretch(&c.material()));
    c.initial.fluid_velocity = FluidInit::Rotation { omega: 0.5, center: [0.5, 0.5] };
    c.step.t_end = 0.03;
    let (model, init) = setup(&c);
    let traj = run_simulation(&model, &c.step, &init).unwrap();
    assert!(traj.abort.is_none(), "{:?}", traj.abort);
    let mut last = traj.initial_energy.total;
    for rec in &traj.steps {
        let e = rec.budget.state_energy();
        assert!(e <= last + 1e-12 * last.abs(), "step {}: {e} > {last}", rec.k);
        last = e;
    }
    assert!(last < traj.initial_energy.total);
}

/// Final-state values of the 16-step desk-scale falling body, recorded from
/// this implementation.
const REGRESSION_ELASTIC: f64 = 3.46807422515880912e-2;
const REGRESSION_OBJECTIVE: f64 = 3.46805766592775677e-2;
const REGRESSION_CENTROID_Y: f64 = 5.99973321834889717e-1;

#[test]
fn small_falling_body_regression() {
    let mut c = small_config();
    c.step.t_end = 0.016;
    let (model, init) = setup(&c);
    let traj = run_simulation(&model, &c.step, &init).unwrap();
    assert!(traj.abort.is_none(), "{:?}", traj.abort);
    assert_eq!(traj.steps.len(), 16);
    let last = traj.steps.last().unwrap();
    let cy = last.eta.iter().map(|p| p[1]).sum::<f64>() / last.eta.len() as f64;
    println!("elastic {:.17e} objective {:.17e} centroid {:.17e}", last.budget.elastic, last.budget.objective, cy);
    assert!((last.budget.elastic - REGRESSION_ELASTIC).abs() < 1e-9 * REGRESSION_ELASTIC.abs());
    assert!((last.budget.objective - REGRESSION_OBJECTIVE).abs() < 1e-9 * REGRESSION_OBJECTIVE.abs());
    assert!((cy - REGRESSION_CENTROID_Y).abs() < 1e-12);
    assert!(cy < 0.6, "body sinks");
    for rec in &traj.steps {
        assert!(rec.stats.converged);
        assert!(rec.budget.comparison_gap <= 1e-12 * rec.budget.objective.abs().max(1.0));
        assert!(rec.cls.count(CellLabel::Solid) > 0);
    }
}
