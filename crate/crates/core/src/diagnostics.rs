//! Verification layer.
//!
//! Everything here is recomputed from stored states (deformations,
//! velocities, classifications) with the module-level energy and
//! dissipation forms, never from the assembled step matrices. The only
//! stepper pieces reused are the flow-map and delay-window domain types,
//! which are rebuilt from the stored velocities.

use crate::error::Result;
use crate::fluid_model::{fluid_dissipation_form, interpolate, FluidGrid, VelocityField};
use crate::geometry::{build_interface, polygon_area, CellClassification, InterfaceGeometry};
use crate::solid_model::{
    det_stress, eval_dissipation, eval_energy, grad2_stress, strain_stress, DeformationField, Mat2, MaterialParams,
    Vec2,
};
use crate::stepper::{
    advance_delay_window, update_flow_map, DelayWindow, FlowMap, Model, StepConfig, Trajectory, WindowStep,
};

/// Per-step terms of the discrete energy estimate.
///
/// Left-side terms: `elastic`, `regularizer` (state values) and the rates
/// `solid_kinetic_rate`, `fluid_kinetic_rate`, `viscous_dissipation`,
/// `solid_dissipation`, `slip_dissipation`. Right-side terms:
/// `window_rate_*` and `force_work_*`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyBudget {
    pub step: usize,
    pub elastic: f64,
    pub regularizer: f64,
    pub solid_kinetic_rate: f64,
    pub fluid_kinetic_rate: f64,
    pub viscous_dissipation: f64,
    pub solid_dissipation: f64,
    pub slip_dissipation: f64,
    pub window_rate_solid: f64,
    pub window_rate_fluid: f64,
    pub force_work_solid: f64,
    pub force_work_fluid: f64,
    /// `J(η_k, v_k) − J(η_{k−1}, 0)`.
    pub comparison_gap: f64,
    /// `J(η_k, v_k)`.
    pub objective: f64,
}

impl EnergyBudget {
    /// Column order of the budget file. `time` follows `step`.
    pub const COLUMNS: [&'static str; 15] = [
        "step",
        "time",
        "elastic",
        "regularizer",
        "solid_kinetic_rate",
        "fluid_kinetic_rate",
        "viscous_dissipation",
        "solid_dissipation",
        "slip_dissipation",
        "window_rate_solid",
        "window_rate_fluid",
        "force_work_solid",
        "force_work_fluid",
        "comparison_gap",
        "objective",
    ];

    /// Real-valued fields in column order (without `step` and `time`).
    pub fn values(&self) -> [f64; 13] {
        [
            self.elastic,
            self.regularizer,
            self.solid_kinetic_rate,
            self.fluid_kinetic_rate,
            self.viscous_dissipation,
            self.solid_dissipation,
            self.slip_dissipation,
            self.window_rate_solid,
            self.window_rate_fluid,
            self.force_work_solid,
            self.force_work_fluid,
            self.comparison_gap,
            self.objective,
        ]
    }

    pub fn from_values(step: usize, v: [f64; 13]) -> Self {
        Self {
            step,
            elastic: v[0],
            regularizer: v[1],
            solid_kinetic_rate: v[2],
            fluid_kinetic_rate: v[3],
            viscous_dissipation: v[4],
            solid_dissipation: v[5],
            slip_dissipation: v[6],
            window_rate_solid: v[7],
            window_rate_fluid: v[8],
            force_work_solid: v[9],
            force_work_fluid: v[10],
            comparison_gap: v[11],
            objective: v[12],
        }
    }

    pub fn state_energy(&self) -> f64 {
        self.elastic + self.regularizer
    }

    /// Rate terms accumulated on the left side of the estimate.
    pub fn left_rates(&self) -> f64 {
        self.solid_kinetic_rate
            + self.fluid_kinetic_rate
            + self.viscous_dissipation
            + self.solid_dissipation
            + self.slip_dissipation
    }

    /// Data terms accumulated on the right side of the estimate.
    pub fn right_rates(&self) -> f64 {
        self.window_rate_solid + self.window_rate_fluid + self.force_work_solid + self.force_work_fluid
    }

    pub fn min_dissipation(&self) -> f64 {
        self.viscous_dissipation.min(self.solid_dissipation).min(self.slip_dissipation)
    }
}

/// Left and right sides of the summed estimate after every step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyChainReport {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    /// `rhs − lhs`; negative values are violations.
    pub slack: Vec<f64>,
    /// Allowed violation after each step.
    pub allowance: Vec<f64>,
    /// Largest `(lhs − rhs) − allowance`, nonpositive when the chain holds.
    pub worst_excess: f64,
    pub pass: bool,
}

/// Checks `E_k + reg_k + Σ_{j≤k} left rates ≤ E_0 + reg_0 + Σ_{j≤k} right rates`.
///
/// The allowance after step `k` is `rel_tol·Σ_{j≤k} max(1, |J_j|)`, the
/// accumulated per-step solver tolerance.
pub fn check_energy_chain(budgets: &[EnergyBudget], initial_energy: f64, rel_tol: f64) -> EnergyChainReport {
    let mut acc_l = 0.0;
    let mut acc_r = 0.0;
    let mut allow = 0.0;
    let mut rep = EnergyChainReport {
        lhs: Vec::with_capacity(budgets.len()),
        rhs: Vec::with_capacity(budgets.len()),
        slack: Vec::with_capacity(budgets.len()),
        allowance: Vec::with_capacity(budgets.len()),
        worst_excess: f64::NEG_INFINITY,
        pass: true,
    };
    for b in budgets {
        acc_l += b.left_rates();
        acc_r += b.right_rates();
        allow += rel_tol * b.objective.abs().max(1.0);
        let lhs = b.state_energy() + acc_l;
        let rhs = initial_energy + acc_r;
        rep.lhs.push(lhs);
        rep.rhs.push(rhs);
        rep.slack.push(rhs - lhs);
        rep.allowance.push(allow);
        rep.worst_excess = rep.worst_excess.max(lhs - rhs - allow);
    }
    rep.pass = rep.worst_excess <= 0.0 || budgets.is_empty();
    if budgets.is_empty() {
        rep.worst_excess = 0.0;
    }
    rep
}

/// Largest per-step comparison gap relative to `max(1, |J|)`.
pub fn max_relative_comparison_gap(budgets: &[EnergyBudget]) -> f64 {
    budgets.iter().map(|b| b.comparison_gap / b.objective.abs().max(1.0)).fold(f64::NEG_INFINITY, f64::max)
}

/// Recomputes every budget entry from the stored trajectory.
///
/// Flow maps and delay windows are rebuilt from the stored velocities,
/// then each term is evaluated with the module-level forms.
pub fn reassemble_budgets(model: &Model, cfg: &StepConfig, traj: &Trajectory) -> Result<Vec<EnergyBudget>> {
    let grid = &model.fluid_grid;
    let sgrid = &model.solid_grid;
    let mat = &model.material;
    let reg = model.regularizer(cfg);
    let fluid = model.fluid_params(cfg);
    let tau = cfg.dt_tau;
    let h = cfg.h_delay;
    let slots = cfg.steps_per_window();
    let w = sgrid.weights();
    let rho_s = mat.rho_s;
    let rho_f = fluid.rho_f;
    let state = |k: usize| -> &[Vec2] {
        if k == 0 {
            &traj.initial_eta
        } else {
            &traj.steps[k - 1].eta
        }
    };
    let eta0 = DeformationField::new(sgrid.clone(), traj.initial_eta.clone());
    let iface0 = build_interface(&eta0)?;
    let mut fm = FlowMap::new(grid, &traj.initial_cls, &iface0.points, 0.0);
    let mut window = DelayWindow::initial(&traj.initial_solid_rate, &traj.initial_velocity, grid, &traj.initial_cls, &fm, slots)?;
    let mut out = Vec::with_capacity(traj.steps.len());
    for (idx, rec) in traj.steps.iter().enumerate() {
        let k = idx + 1;
        let eta_prev = DeformationField::new(sgrid.clone(), state(k - 1).to_vec());
        let eta = DeformationField::new(sgrid.clone(), rec.eta.clone());
        let iface_prev = build_interface(&eta_prev)?;
        if (k - 1) % slots == 0 && k > 1 {
            fm = FlowMap::new(grid, &rec.cls, &iface_prev.points, (k - 1) as f64 * tau);
            let steps: Vec<WindowStep<'_>> = (k - slots..k)
                .map(|j| WindowStep {
                    eta_prev: state(j - 1),
                    eta: state(j),
                    velocity: &traj.steps[j - 1].velocity,
                    cls: &traj.steps[j - 1].cls,
                })
                .collect();
            window = advance_delay_window(&steps, &fm, grid, tau, (k - 1) / slots)?;
        }
        let slot = (k - 1) % slots;
        let (w_s, w_f) = (&window.w_s[slot], &window.w_f[slot]);
        let t0 = (k - 1) as f64 * tau;
        let r: Vec<Vec2> = rec
            .eta
            .iter()
            .zip(state(k - 1))
            .map(|(a, b)| [(a[0] - b[0]) / tau, (a[1] - b[1]) / tau])
            .collect();
        let energy = eval_energy(&eta, mat, &reg)?;
        let energy_prev = eval_energy(&eta_prev, mat, &reg)?;
        let solid_dissipation = tau * eval_dissipation(&eta_prev, &r, mat, &reg)?;
        let slip = tau * slip_term(grid, &rec.velocity, &rec.cls, &iface_prev, &r, fluid.slip_coefficient)?;
        let viscous = 0.5 * tau * fluid_dissipation_form(grid, &rec.velocity, &rec.cls, &fluid)?;

        let (mut kin_s, mut win_s, mut fw_s, mut inert_s, mut force_s) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..r.len() {
            let f = cfg.force.slot_average(t0, t0 + tau, state(k - 1)[i]);
            kin_s += w[i] * sq(r[i]);
            win_s += w[i] * sq(w_s[i]);
            fw_s += w[i] * sq(f);
            inert_s += w[i] * sq([r[i][0] - w_s[i][0], r[i][1] - w_s[i][1]]);
            force_s += w[i] * (f[0] * r[i][0] + f[1] * r[i][1]);
        }
        let (mut kin_f, mut win_f, mut fw_f, mut inert_f, mut force_f) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for s in 0..fm.len() {
            let p = fm.positions[s];
            let v = interpolate(grid, &rec.cls, &rec.velocity, p)?;
            let f = cfg.force.slot_average(t0, t0 + tau, p);
            let ws = fm.weights[s];
            kin_f += ws * sq(v);
            win_f += ws * sq(w_f[s]);
            fw_f += ws * sq(f);
            inert_f += ws * sq([v[0] - w_f[s][0], v[1] - w_f[s][1]]);
            force_f += ws * (f[0] * v[0] + f[1] * v[1]);
        }
        let objective = energy.total
            + solid_dissipation
            + rho_s * tau / (2.0 * h) * inert_s
            - rho_s * tau * force_s
            + slip
            + viscous
            + rho_f * tau / (2.0 * h) * inert_f
            - tau * rho_f * force_f;
        let start = energy_prev.total + rho_s * tau / (2.0 * h) * win_s + rho_f * tau / (2.0 * h) * win_f;
        out.push(EnergyBudget {
            step: k,
            elastic: energy.total - energy.regularizer_term,
            regularizer: energy.regularizer_term,
            solid_kinetic_rate: rho_s * tau / (8.0 * h) * kin_s,
            fluid_kinetic_rate: rho_f * tau / (8.0 * h) * kin_f,
            viscous_dissipation: viscous,
            solid_dissipation,
            slip_dissipation: slip,
            window_rate_solid: rho_s * tau / h * win_s,
            window_rate_fluid: rho_f * tau / h * win_f,
            force_work_solid: 2.0 * rho_s * tau * h * fw_s,
            force_work_fluid: 2.0 * rho_f * tau * h * fw_f,
            comparison_gap: objective - start,
            objective,
        });
        let iface = build_interface(&eta)?;
        fm = update_flow_map(&fm, &rec.velocity, grid, &rec.cls, tau, Some(&iface.points))?;
    }
    Ok(out)
}

fn sq(v: Vec2) -> f64 {
    v[0] * v[0] + v[1] * v[1]
}

fn slip_term(
    grid: &FluidGrid,
    v: &VelocityField,
    cls: &CellClassification,
    iface: &InterfaceGeometry,
    rate: &[Vec2],
    a: f64,
) -> Result<f64> {
    if a == 0.0 {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (i, &node) in iface.nodes.iter().enumerate() {
        let vi = interpolate(grid, cls, v, iface.points[i])?;
        s += iface.weights[i] * sq([rate[node][0] - vi[0], rate[node][1] - vi[1]]);
    }
    Ok(0.5 * a * s)
}

/// Largest entrywise discrepancy between two budget series.
///
/// Entries are compared relative to `max(|a|, |b|)`, except the comparison
/// gap, which is a difference of two objective values and is compared
/// relative to `max(1, |J|)`.
pub fn budget_discrepancy(a: &[EnergyBudget], b: &[EnergyBudget]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.step != y.step {
            return f64::INFINITY;
        }
        let (vx, vy) = (x.values(), y.values());
        for t in 0..vx.len() {
            let scale = if t == 11 { x.objective.abs().max(1.0) } else { vx[t].abs().max(vy[t].abs()) };
            if scale > 0.0 {
                worst = worst.max((vx[t] - vy[t]).abs() / scale);
            }
        }
    }
    worst
}

/// One state of a moving domain for the transport check: its boundary
/// polygon (counter-clockwise) with outward normal velocity at each vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportSample {
    pub time: f64,
    /// Cell classification of the complement (fluid fractions); the
    /// domain's volume is read off as `Σ (1 − fraction)·cell area`.
    pub cls: CellClassification,
    pub boundary: Vec<Vec2>,
    pub normal_velocity: Vec<f64>,
}

/// Outcome of [`check_transport`] at the interior sample times.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportReport {
    pub times: Vec<f64>,
    /// Central difference quotient of `∫_{Ω(t)} u`.
    pub difference_quotient: Vec<f64>,
    /// `∫_{Ω(t)} ∂_t u + ∫_{∂Ω(t)} u·V_n`.
    pub transport_rhs: Vec<f64>,
    /// Max relative gap between the two.
    pub consistency_error: f64,
    /// Max relative error of the transport side against the reference, if given.
    pub reference_error: Option<f64>,
}

/// Compares `d/dt ∫_{Ω(t)} u` with the transport formula along a sampled
/// domain trajectory.
///
/// Volume integrals use the cell classification (cut fraction at the cell
/// center value of `u`), the boundary integral uses the trapezoidal rule on
/// the polygon edges with the edge normal velocity taken as the average of
/// its vertex values.
pub fn check_transport(
    grid: &FluidGrid,
    samples: &[TransportSample],
    u: &dyn Fn(f64, Vec2) -> f64,
    du_dt: &dyn Fn(f64, Vec2) -> f64,
    reference: Option<&dyn Fn(f64) -> f64>,
) -> TransportReport {
    let volume = |s: &TransportSample, f: &dyn Fn(f64, Vec2) -> f64| -> f64 {
        (0..grid.num_cells()).map(|c| (1.0 - s.cls.fraction[c]) * grid.cell_area() * f(s.time, grid.cell_center(c))).sum()
    };
    let integrals: Vec<f64> = samples.iter().map(|s| volume(s, u)).collect();
    let mut rep = TransportReport {
        times: Vec::new(),
        difference_quotient: Vec::new(),
        transport_rhs: Vec::new(),
        consistency_error: 0.0,
        reference_error: reference.map(|_| 0.0),
    };
    for i in 1..samples.len().saturating_sub(1) {
        let s = &samples[i];
        let dq = (integrals[i + 1] - integrals[i - 1]) / (samples[i + 1].time - samples[i - 1].time);
        let n = s.boundary.len();
        let mut flux = 0.0;
        for e in 0..n {
            let (a, b) = (s.boundary[e], s.boundary[(e + 1) % n]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            let ua = u(s.time, a) * s.normal_velocity[e];
            let ub = u(s.time, b) * s.normal_velocity[(e + 1) % n];
            flux += 0.5 * len * (ua + ub);
        }
        let rhs = volume(s, du_dt) + flux;
        let scale = dq.abs().max(rhs.abs()).max(1e-300);
        rep.consistency_error = rep.consistency_error.max((dq - rhs).abs() / scale);
        if let (Some(r), Some(err)) = (reference, rep.reference_error.as_mut()) {
            let exact = r(s.time);
            *err = err.max((rhs - exact).abs() / exact.abs().max(1e-300));
        }
        rep.times.push(s.time);
        rep.difference_quotient.push(dq);
        rep.transport_rhs.push(rhs);
    }
    rep
}

/// Domain trajectory of a disc of radius `r(t) = r0 + rate·t` about
/// `center`, sampled at `times`. The boundary polygon has vertices spaced
/// about one cell width apart at the initial radius, so its geometric
/// error is tied to the grid.
pub fn shrinking_disc_samples(
    grid: &FluidGrid,
    center: Vec2,
    r0: f64,
    rate: f64,
    times: &[f64],
) -> Result<Vec<TransportSample>> {
    let n = ((2.0 * std::f64::consts::PI * r0 / grid.dx.min(grid.dy)).ceil() as usize).max(8);
    times
        .iter()
        .map(|&t| {
            let r = r0 + rate * t;
            let boundary: Vec<Vec2> = (0..n)
                .map(|i| {
                    let th = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    [center[0] + r * th.cos(), center[1] + r * th.sin()]
                })
                .collect();
            let cls = crate::geometry::classify_polygon(&boundary, grid)?;
            Ok(TransportSample { time: t, cls, boundary, normal_velocity: vec![rate; n] })
        })
        .collect()
}

/// Transport check on a solved run's solid domain with `u ≡ 1`: the
/// difference quotient of `|η_k(Q)|` against the boundary flux of the
/// solid rate, evaluated on the midpoint polygon. Polygon area is
/// quadratic in the vertices, so the two agree up to rounding for any
/// correct flux quadrature. Returns the max gap over steps, relative to the
/// largest unsigned boundary flux.
pub fn solid_area_transport_error(traj: &Trajectory) -> Result<f64> {
    let grid = &traj.solid_grid;
    let state = |k: usize| -> &[Vec2] {
        if k == 0 {
            &traj.initial_eta
        } else {
            &traj.steps[k - 1].eta
        }
    };
    let boundary = |k: usize| -> Vec<Vec2> { grid.boundary_nodes.iter().map(|&b| state(k)[b]).collect() };
    let tau = traj.tau;
    let mut dq = Vec::new();
    let mut flux = Vec::new();
    let mut scale: f64 = 1e-300;
    for k in 1..=traj.steps.len() {
        let (p0, p1) = (boundary(k - 1), boundary(k));
        dq.push((polygon_area(&p1) - polygon_area(&p0)) / tau);
        let mid: Vec<Vec2> = p0.iter().zip(&p1).map(|(a, b)| [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]).collect();
        let vel: Vec<Vec2> = p0.iter().zip(&p1).map(|(a, b)| [(b[0] - a[0]) / tau, (b[1] - a[1]) / tau]).collect();
        let m = mid.len();
        let (mut f, mut f_abs) = (0.0, 0.0);
        for e in 0..m {
            let e1 = (e + 1) % m;
            let (a, b) = (mid[e], mid[e1]);
            // outward normal of a counter-clockwise edge, scaled by its length
            let nrm = [b[1] - a[1], -(b[0] - a[0])];
            let fe = 0.5 * ((vel[e][0] + vel[e1][0]) * nrm[0] + (vel[e][1] + vel[e1][1]) * nrm[1]);
            f += fe;
            f_abs += fe.abs();
        }
        flux.push(f);
        // a nearly area-preserving motion has a tiny net flux, so errors are
        // measured against the total unsigned boundary flux
        scale = scale.max(f_abs);
    }
    Ok(dq.iter().zip(&flux).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale)
}

/// Normal and tangential parts of `(η_k − η_{k−1})/τ − v_k∘η_{k−1}` on the
/// interface of `η_{k−1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingReport {
    /// Max-norm of the normal component.
    pub normal_residual: f64,
    /// Weighted RMS of the tangential component (the slip jump).
    pub tangential_jump: f64,
}

pub fn check_coupling(
    eta: &[Vec2],
    eta_prev: &[Vec2],
    v: &VelocityField,
    cls: &CellClassification,
    grid: &FluidGrid,
    interface: &InterfaceGeometry,
    tau: f64,
) -> Result<CouplingReport> {
    let mut normal: f64 = 0.0;
    let (mut tj, mut wsum) = (0.0, 0.0);
    for (i, &node) in interface.nodes.iter().enumerate() {
        let r = [(eta[node][0] - eta_prev[node][0]) / tau, (eta[node][1] - eta_prev[node][1]) / tau];
        let vi = interpolate(grid, cls, v, interface.points[i])?;
        let j = [r[0] - vi[0], r[1] - vi[1]];
        let n = interface.normals[i];
        let t = interface.tangents[i];
        normal = normal.max((j[0] * n[0] + j[1] * n[1]).abs());
        let jt = j[0] * t[0] + j[1] * t[1];
        tj += interface.weights[i] * jt * jt;
        wsum += interface.weights[i];
    }
    Ok(CouplingReport { normal_residual: normal, tangential_jump: if wsum > 0.0 { (tj / wsum).sqrt() } else { 0.0 } })
}

/// Coupling report of every step of a run.
pub fn coupling_series(traj: &Trajectory, grid: &FluidGrid) -> Result<Vec<CouplingReport>> {
    let mut out = Vec::with_capacity(traj.steps.len());
    for (idx, rec) in traj.steps.iter().enumerate() {
        let prev = if idx == 0 { &traj.initial_eta } else { &traj.steps[idx - 1].eta };
        let eta_prev = DeformationField::new(traj.solid_grid.clone(), prev.clone());
        let iface = build_interface(&eta_prev)?;
        out.push(check_coupling(&rec.eta, prev, &rec.velocity, &rec.cls, grid, &iface, traj.tau)?);
    }
    Ok(out)
}

/// Time average of the tangential jump over a run.
pub fn mean_tangential_jump(series: &[CouplingReport]) -> f64 {
    if series.is_empty() {
        return 0.0;
    }
    series.iter().map(|c| c.tangential_jump).sum::<f64>() / series.len() as f64
}

/// Smooth analytic deformation `η(t, x)` for the strong-form residual.
pub trait AnalyticDeformation {
    fn eval(&self, t: f64, x: Vec2) -> Vec2;
}

impl<F: Fn(f64, Vec2) -> Vec2> AnalyticDeformation for F {
    fn eval(&self, t: f64, x: Vec2) -> Vec2 {
        self(t, x)
    }
}

/// Bulk solid operator evaluated with nested central differences of
/// spacing `d` in space and time:
///
/// `ρ_s ∂_tt η − div(∂_F e + ∂_{∇∂_tη} r) + div²(∂_{∇²η} e)`
///
/// where `e` is the strain + barrier + second-gradient density and `r` the
/// dissipation density `|∇∂_tηᵀ∇η + ∇ηᵀ∇∂_tη|²`. Accurate to `O(d²)`.
pub fn bulk_operator(eta: &dyn AnalyticDeformation, mat: &MaterialParams, t: f64, x: Vec2, d: f64) -> Vec2 {
    let at = |tt: f64, p: Vec2| eta.eval(tt, p);
    let grad = |tt: f64, p: Vec2| -> Mat2 {
        let (a, b) = (at(tt, [p[0] + d, p[1]]), at(tt, [p[0] - d, p[1]]));
        let (c, e) = (at(tt, [p[0], p[1] + d]), at(tt, [p[0], p[1] - d]));
        [
            [(a[0] - b[0]) / (2.0 * d), (c[0] - e[0]) / (2.0 * d)],
            [(a[1] - b[1]) / (2.0 * d), (c[1] - e[1]) / (2.0 * d)],
        ]
    };
    let hess = |tt: f64, p: Vec2| -> [f64; 6] {
        let c = at(tt, p);
        let (xp, xm) = (at(tt, [p[0] + d, p[1]]), at(tt, [p[0] - d, p[1]]));
        let (yp, ym) = (at(tt, [p[0], p[1] + d]), at(tt, [p[0], p[1] - d]));
        let pp = at(tt, [p[0] + d, p[1] + d]);
        let pm = at(tt, [p[0] + d, p[1] - d]);
        let mp = at(tt, [p[0] - d, p[1] + d]);
        let mm = at(tt, [p[0] - d, p[1] - d]);
        let d2 = d * d;
        let f = |k: usize| {
            [
                (xp[k] - 2.0 * c[k] + xm[k]) / d2,
                (pp[k] - pm[k] - mp[k] + mm[k]) / (4.0 * d2),
                (yp[k] - 2.0 * c[k] + ym[k]) / d2,
            ]
        };
        let (a, b) = (f(0), f(1));
        [a[0], a[1], a[2], b[0], b[1], b[2]]
    };
    // first Piola-type stress including the viscous part
    let stress = |p: Vec2| -> Mat2 {
        let f = grad(t, p);
        let s1 = strain_stress(mat, &f);
        let s2 = det_stress(mat, &f);
        let (gp, gm) = (grad(t + d, p), grad(t - d, p));
        let g = [
            [(gp[0][0] - gm[0][0]) / (2.0 * d), (gp[0][1] - gm[0][1]) / (2.0 * d)],
            [(gp[1][0] - gm[1][0]) / (2.0 * d), (gp[1][1] - gm[1][1]) / (2.0 * d)],
        ];
        let gtf = [
            [g[0][0] * f[0][0] + g[1][0] * f[1][0], g[0][0] * f[0][1] + g[1][0] * f[1][1]],
            [g[0][1] * f[0][0] + g[1][1] * f[1][0], g[0][1] * f[0][1] + g[1][1] * f[1][1]],
        ];
        let m = [[2.0 * gtf[0][0], gtf[0][1] + gtf[1][0]], [gtf[0][1] + gtf[1][0], 2.0 * gtf[1][1]]];
        let mut out = [[0.0; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                let fm = f[r][0] * m[0][c] + f[r][1] * m[1][c];
                out[r][c] = s1[r][c] + s2[r][c] + 4.0 * fm;
            }
        }
        out
    };
    let hyper = |p: Vec2| grad2_stress(mat, &hess(t, p));
    let mut res = [0.0; 2];
    let (sxp, sxm) = (stress([x[0] + d, x[1]]), stress([x[0] - d, x[1]]));
    let (syp, sym) = (stress([x[0], x[1] + d]), stress([x[0], x[1] - d]));
    let hc = hyper(x);
    let (hxp, hxm) = (hyper([x[0] + d, x[1]]), hyper([x[0] - d, x[1]]));
    let (hyp, hym) = (hyper([x[0], x[1] + d]), hyper([x[0], x[1] - d]));
    let hpp = hyper([x[0] + d, x[1] + d]);
    let hpm = hyper([x[0] + d, x[1] - d]);
    let hmp = hyper([x[0] - d, x[1] + d]);
    let hmm = hyper([x[0] - d, x[1] - d]);
    let (ep, ec, em) = (at(t + d, x), at(t, x), at(t - d, x));
    let d2 = d * d;
    for k in 0..2 {
        let div_p = (sxp[k][0] - sxm[k][0]) / (2.0 * d) + (syp[k][1] - sym[k][1]) / (2.0 * d);
        let o = 3 * k;
        let div2_h = (hxp[o] - 2.0 * hc[o] + hxm[o]) / d2
            + (hpp[o + 1] - hpm[o + 1] - hmp[o + 1] + hmm[o + 1]) / (4.0 * d2)
            + (hyp[o + 2] - 2.0 * hc[o + 2] + hym[o + 2]) / d2;
        let acc = (ep[k] - 2.0 * ec[k] + em[k]) / d2;
        res[k] = mat.rho_s * acc - div_p + div2_h;
    }
    res
}

/// Residual of the bulk solid equation `bulk_operator = ρ_s f` at interior
/// points of a uniform `n × n` grid on `[lo, hi]²` (boundary rows excluded).
pub fn strong_form_solid_residual(
    eta: &dyn AnalyticDeformation,
    mat: &MaterialParams,
    force: &dyn Fn(f64, Vec2) -> Vec2,
    t: f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> Vec<Vec2> {
    let d = (hi - lo) / (n - 1) as f64;
    let mut out = Vec::with_capacity((n - 2) * (n - 2));
    for j in 1..n - 1 {
        for i in 1..n - 1 {
            let x = [lo + i as f64 * d, lo + j as f64 * d];
            let b = bulk_operator(eta, mat, t, x, d);
            let f = force(t, x);
            out.push([b[0] - mat.rho_s * f[0], b[1] - mat.rho_s * f[1]]);
        }
    }
    out
}

/// Extremes of the flow-map Jacobian estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowMapReport {
    pub min_det: f64,
    pub max_det: f64,
    pub max_lipschitz: f64,
}

pub fn flow_map_report(fm: &FlowMap) -> FlowMapReport {
    let (min_det, max_det) = fm.det_range();
    FlowMapReport { min_det, max_det, max_lipschitz: fm.max_lipschitz() }
}

/// Check groups selectable on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CheckCategory {
    Energy,
    Coupling,
    Transport,
    FlowMap,
}

impl CheckCategory {
    pub const ALL: [CheckCategory; 4] =
        [CheckCategory::Energy, CheckCategory::Coupling, CheckCategory::Transport, CheckCategory::FlowMap];

    pub fn name(self) -> &'static str {
        match self {
            CheckCategory::Energy => "energy",
            CheckCategory::Coupling => "coupling",
            CheckCategory::Transport => "transport",
            CheckCategory::FlowMap => "flowmap",
        }
    }

    pub fn parse(s: &str) -> Option<Vec<CheckCategory>> {
        match s {
            "all" => Some(Self::ALL.to_vec()),
            "energy" => Some(vec![CheckCategory::Energy]),
            "coupling" => Some(vec![CheckCategory::Coupling]),
            "transport" => Some(vec![CheckCategory::Transport]),
            "flowmap" => Some(vec![CheckCategory::FlowMap]),
            _ => None,
        }
    }
}

/// One line of the verification report: `value ≤ threshold` passes.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub category: CheckCategory,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CheckResult {
    pub fn at_most(name: &str, category: CheckCategory, value: f64, threshold: f64) -> Self {
        Self { name: name.to_string(), category, value, threshold, pass: value <= threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.pass)
    }

    /// `name category value threshold PASS|FAIL`, one line per check.
    pub fn render(&self) -> String {
        let mut s = String::from("# check category value threshold status\n");
        for c in &self.checks {
            s.push_str(&format!(
                "{} {} {:.9e} {:.9e} {}\n",
                c.name,
                c.category.name(),
                c.value,
                c.threshold,
                if c.pass { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}

/// Thresholds of the built-in run checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckThresholds {
    pub comparison_rel: f64,
    pub budget_rel: f64,
    pub coupling: f64,
    pub cn_residual: f64,
    /// `det ∇Φ ∈ [1 − flow_det, 1 + flow_det]`.
    pub flow_det: f64,
    pub transport_rel: f64,
}

impl Default for CheckThresholds {
    fn default() -> Self {
        Self {
            comparison_rel: 1e-9,
            budget_rel: 1e-10,
            coupling: 1e-7,
            cn_residual: 1e-6,
            flow_det: 0.1,
            transport_rel: 1e-6,
        }
    }
}

/// Runs the selected checks on a completed trajectory.
pub fn verify_trajectory(
    model: &Model,
    cfg: &StepConfig,
    traj: &Trajectory,
    categories: &[CheckCategory],
    th: &CheckThresholds,
) -> Result<VerificationReport> {
    let mut rep = VerificationReport::default();
    let budgets: Vec<EnergyBudget> = traj.steps.iter().map(|s| s.budget).collect();
    let on = |c: CheckCategory| categories.contains(&c);
    if on(CheckCategory::Energy) {
        let gap = if budgets.is_empty() { 0.0 } else { max_relative_comparison_gap(&budgets) };
        rep.checks.push(CheckResult::at_most("comparison_gap", CheckCategory::Energy, gap, th.comparison_rel));
        let e0 = traj.initial_energy.total;
        let chain = check_energy_chain(&budgets, e0, th.comparison_rel);
        rep.checks.push(CheckResult::at_most("energy_chain_excess", CheckCategory::Energy, chain.worst_excess, 0.0));
        let neg = budgets.iter().map(|b| -b.min_dissipation()).fold(0.0, f64::max);
        rep.checks.push(CheckResult::at_most("negative_dissipation", CheckCategory::Energy, neg, 0.0));
        let re = reassemble_budgets(model, cfg, traj)?;
        rep.checks.push(CheckResult::at_most(
            "budget_reassembly",
            CheckCategory::Energy,
            budget_discrepancy(&budgets, &re),
            th.budget_rel,
        ));
    }
    if on(CheckCategory::Coupling) {
        let series = coupling_series(traj, &model.fluid_grid)?;
        let normal = series.iter().map(|c| c.normal_residual).fold(0.0, f64::max);
        rep.checks.push(CheckResult::at_most("coupling_normal_residual", CheckCategory::Coupling, normal, th.coupling));
        let cn = traj.steps.iter().map(|s| s.stats.cn_residual.abs()).fold(0.0, f64::max);
        rep.checks.push(CheckResult::at_most("ciarlet_necas_residual", CheckCategory::Coupling, cn, th.cn_residual));
        let sep = traj.steps.iter().map(|s| s.stats.min_separation).fold(f64::INFINITY, f64::min);
        let sep = if sep.is_finite() { sep } else { 1.0 };
        rep.checks.push(CheckResult::at_most("negative_separation", CheckCategory::Coupling, -sep, 0.0));
    }
    if on(CheckCategory::Transport) {
        let e = solid_area_transport_error(traj)?;
        rep.checks.push(CheckResult::at_most("solid_area_transport", CheckCategory::Transport, e, th.transport_rel));
    }
    if on(CheckCategory::FlowMap) {
        let drift = traj
            .steps
            .iter()
            .map(|s| (s.stats.flow_det_min - 1.0).abs().max((s.stats.flow_det_max - 1.0).abs()))
            .fold(0.0, f64::max);
        rep.checks.push(CheckResult::at_most("flow_det_drift", CheckCategory::FlowMap, drift, th.flow_det));
    }
    Ok(rep)
}
