//! Minimizing-movement time stepping.
//!
//! Each step minimizes the incremental functional over the solid increment
//! `u = η − η_{k−1}` and the fluid velocity `v` subject to the homogeneous
//! linear constraints (interface coupling, wall impermeability, discrete
//! incompressibility). The warm start `(u, v) = (0, 0)` is always feasible.
//! Steps are grouped into delay windows of length `h`; the rates of the
//! previous window act as frozen inertial history.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diagnostics::EnergyBudget;
use crate::error::{Result, SimError};
use crate::fluid_model::{
    interpolate, interpolation_matrix, project_divergence_free, project_kernel, weighted_gram, FluidGrid,
    FluidOperators, FluidParams, VelocityField,
};
use crate::geometry::{
    build_interface, ciarlet_necas_residual, classify_cells, fluid_centroid, min_separation, signed_distance,
    CellClassification, InterfaceGeometry,
};
use crate::linalg::{dot, max_abs, Csr, Ldlt, Triplets};
use crate::solid_model::{
    accumulate_energy_hessian_psd, det2, dissipation_matrix, energy_gradient, eval_dissipation, eval_energy,
    hessian_radius, reg_matrix, DeformationField, EnergyBreakdown, Mat2, MaterialParams,
    RegularizerConfig, SolidGrid, Vec2, WindowMatrix,
};

/// Time-dependent body force `f(t, x)` acting on both phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Force {
    #[default]
    Zero,
    Constant { value: Vec2 },
    /// `(amplitude·(y − center), 0)`.
    Shear { amplitude: f64, center: f64 },
    /// `value·cos(omega·t)`.
    Oscillating { value: Vec2, omega: f64 },
}

impl Force {
    pub fn eval(&self, t: f64, x: Vec2) -> Vec2 {
        match *self {
            Force::Zero => [0.0, 0.0],
            Force::Constant { value } => value,
            Force::Shear { amplitude, center } => [amplitude * (x[1] - center), 0.0],
            Force::Oscillating { value, omega } => {
                let c = (omega * t).cos();
                [c * value[0], c * value[1]]
            }
        }
    }

    /// `(1/(t1−t0))∫_{t0}^{t1} f(t, x) dt` by three-point Gauss–Legendre,
    /// exact for the built-in forces up to quadrature error in `cos`.
    pub fn slot_average(&self, t0: f64, t1: f64, x: Vec2) -> Vec2 {
        if !matches!(self, Force::Oscillating { .. }) {
            return self.eval(t0, x);
        }
        let (m, r) = (0.5 * (t0 + t1), 0.5 * (t1 - t0));
        let g = (0.6f64).sqrt();
        let mut s = [0.0, 0.0];
        for (node, w) in [(-g, 5.0 / 9.0), (0.0, 8.0 / 9.0), (g, 5.0 / 9.0)] {
            let f = self.eval(m + r * node, x);
            s[0] += 0.5 * w * f[0];
            s[1] += 0.5 * w * f[1];
        }
        s
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            Force::Zero => true,
            Force::Constant { value } | Force::Oscillating { value, .. } => value == [0.0, 0.0],
            Force::Shear { amplitude, .. } => amplitude == 0.0,
        }
    }
}

/// Tolerances and safeguards of the per-step solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Stop when the Newton decrement falls below `grad_tol·max(1, |J|)`.
    pub grad_tol: f64,
    /// Accepted max-norm residual of the linear constraints.
    pub constraint_tol: f64,
    /// Maximum number of matrix factorizations per step.
    pub max_outer: usize,
    /// Maximum number of Newton iterations per step.
    pub max_inner: usize,
    /// Initial relative diagonal shift of the KKT factorization.
    pub penalty_init: f64,
    /// Growth of that shift after a failed factorization.
    pub penalty_growth: f64,
    pub backtrack: f64,
    pub armijo: f64,
    /// Smallest admissible nodal `det ∇η` during the line search.
    pub min_det: f64,
    pub cn_tolerance: f64,
    pub cn_resolution: usize,
    /// Contact threshold in units of the fluid cell size.
    pub contact_cells: f64,
    pub refinement_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-14,
            constraint_tol: 1e-10,
            max_outer: 6,
            max_inner: 60,
            penalty_init: 1e-10,
            penalty_growth: 100.0,
            backtrack: 0.5,
            armijo: 1e-4,
            min_det: 1e-3,
            cn_tolerance: 1e-6,
            cn_resolution: 512,
            contact_cells: 1.0,
            refinement_steps: 10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grad_tol", self.grad_tol),
            ("constraint_tol", self.constraint_tol),
            ("penalty_init", self.penalty_init),
            ("min_det", self.min_det),
            ("cn_tolerance", self.cn_tolerance),
            ("armijo", self.armijo),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(SimError::ValidationError(format!("solver.{name} must be positive")));
            }
        }
        if !(self.penalty_growth > 1.0) {
            return Err(SimError::ValidationError("solver.penalty_growth must exceed 1".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(SimError::ValidationError("solver.backtrack must lie in (0, 1)".into()));
        }
        if self.max_inner == 0 || self.max_outer == 0 || self.cn_resolution < 8 || self.contact_cells < 0.0 {
            return Err(SimError::ValidationError(
                "solver iteration caps must be positive, cn_resolution ≥ 8, contact_cells ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

/// Time-discretization parameters: `τ`, `h`, `κ`, `a0`, `T` and the force.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub dt_tau: f64,
    pub h_delay: f64,
    pub kappa: f64,
    pub a0_exponent: f64,
    pub t_end: f64,
    pub force: Force,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn integer_ratio(a: f64, b: f64) -> Option<usize> {
    let r = a / b;
    let n = r.round();
    ((r - n).abs() <= 1e-9 * r.abs().max(1.0) && n >= 0.0).then_some(n as usize)
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_tau > 0.0) || !(self.h_delay > 0.0) {
            return Err(SimError::ValidationError("dt_tau and h_delay must be positive".into()));
        }
        if !(self.kappa >= 0.0) || !(self.a0_exponent > 0.0) || !(self.t_end >= 0.0) {
            return Err(SimError::ValidationError("kappa ≥ 0, a0_exponent > 0 and t_end ≥ 0 required".into()));
        }
        match integer_ratio(self.h_delay, self.dt_tau) {
            Some(n) if n >= 1 => {}
            _ => {
                return Err(SimError::ValidationError(format!(
                    "h_delay = {} must be an integer multiple of dt_tau = {}",
                    self.h_delay, self.dt_tau
                )))
            }
        }
        if integer_ratio(self.t_end, self.h_delay).is_none() {
            return Err(SimError::ValidationError(format!(
                "t_end = {} must be an integer multiple of h_delay = {}",
                self.t_end, self.h_delay
            )));
        }
        self.solver.validate()
    }

    /// Number of `τ`-slots in one delay window.
    pub fn steps_per_window(&self) -> usize {
        integer_ratio(self.h_delay, self.dt_tau).unwrap_or(1).max(1)
    }

    pub fn num_steps(&self) -> usize {
        integer_ratio(self.t_end, self.h_delay).unwrap_or(0) * self.steps_per_window()
    }
}

/// Spatial model: solid grid and material, fluid grid and parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub solid_grid: Arc<SolidGrid>,
    pub material: MaterialParams,
    /// Order of the high-order regularizer on the solid.
    pub reg_order: usize,
    pub fluid_grid: FluidGrid,
    pub fluid: FluidParams,
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        self.material.validate()?;
        self.fluid.validate()?;
        if self.reg_order == 0 || self.reg_order + 1 > self.solid_grid.nx.min(self.solid_grid.ny) {
            return Err(SimError::ValidationError("regularizer order must be in 1..grid size".into()));
        }
        Ok(())
    }

    /// Regularizer settings at the run's `κ` and `a0`.
    pub fn regularizer(&self, cfg: &StepConfig) -> RegularizerConfig {
        RegularizerConfig { kappa: cfg.kappa, a0: cfg.a0_exponent, order: self.reg_order }
    }

    /// Fluid parameters with the run's `κ`.
    pub fn fluid_params(&self, cfg: &StepConfig) -> FluidParams {
        FluidParams { kappa: cfg.kappa, ..self.fluid }
    }

    fn contact_threshold(&self, solver: &SolverConfig) -> f64 {
        solver.contact_cells * self.fluid_grid.dx.max(self.fluid_grid.dy)
    }
}

/// Initial data: deformation, initial solid velocity `η_*` and fluid velocity `v₀`.
#[derive(Debug, Clone)]
pub struct InitialData {
    pub eta0: DeformationField,
    pub eta_star: Vec<Vec2>,
    pub v0: VelocityField,
}

/// Lagrangian samples of the fluid flow map over one delay window.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap {
    /// Sample points `X` on the window-initial fluid domain.
    pub reference: Vec<Vec2>,
    /// Quadrature weight of each sample (fluid area of its cell).
    pub weights: Vec<f64>,
    /// Current positions `Φ(t, X)`.
    pub positions: Vec<Vec2>,
    /// Least-squares Jacobian estimate per sample.
    pub jacobians: Vec<Mat2>,
    /// Whether the sample's neighbors span the plane.
    pub jacobian_valid: Vec<bool>,
    neighbors: Vec<Vec<usize>>,
    pub start_time: f64,
}

impl FlowMap {
    /// Identity flow map sampled at the fluid centroids of the active cells.
    pub fn new(grid: &FluidGrid, cls: &CellClassification, solid_boundary: &[Vec2], start_time: f64) -> Self {
        let mut sample_of = vec![usize::MAX; grid.num_cells()];
        let mut reference = Vec::new();
        let mut weights = Vec::new();
        for c in 0..grid.num_cells() {
            if !cls.is_active(c) {
                continue;
            }
            sample_of[c] = reference.len();
            let p = if cls.fraction[c] < 1.0 { fluid_centroid(solid_boundary, grid, c) } else { grid.cell_center(c) };
            reference.push(p);
            weights.push(cls.fraction[c] * grid.cell_area());
        }
        let mut neighbors = Vec::with_capacity(reference.len());
        for c in 0..grid.num_cells() {
            if sample_of[c] == usize::MAX {
                continue;
            }
            let mut nb = Vec::with_capacity(8);
            for dj in -1..=1 {
                for di in -1..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    if let Some(n) = grid.neighbor(c, di, dj) {
                        if sample_of[n] != usize::MAX {
                            nb.push(sample_of[n]);
                        }
                    }
                }
            }
            neighbors.push(nb);
        }
        Self::from_samples(reference, weights, neighbors, start_time)
    }

    /// Identity flow map on explicit samples with a given neighbor graph.
    pub fn from_samples(reference: Vec<Vec2>, weights: Vec<f64>, neighbors: Vec<Vec<usize>>, start_time: f64) -> Self {
        let n = reference.len();
        let mut fm = Self {
            positions: reference.clone(),
            reference,
            weights,
            jacobians: vec![[[1.0, 0.0], [0.0, 1.0]]; n],
            jacobian_valid: vec![true; n],
            neighbors,
            start_time,
        };
        fm.refresh_jacobians();
        fm
    }

    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }

    fn refresh_jacobians(&mut self) {
        for s in 0..self.reference.len() {
            let (x0, p0) = (self.reference[s], self.positions[s]);
            let mut a = [[0.0; 2]; 2];
            let mut b = [[0.0; 2]; 2];
            for &n in &self.neighbors[s] {
                let dx = [self.reference[n][0] - x0[0], self.reference[n][1] - x0[1]];
                let dp = [self.positions[n][0] - p0[0], self.positions[n][1] - p0[1]];
                for r in 0..2 {
                    for c in 0..2 {
                        a[r][c] += dx[r] * dx[c];
                        b[r][c] += dp[r] * dx[c];
                    }
                }
            }
            let da = det2(&a);
            let tr = a[0][0] + a[1][1];
            if !(da > 1e-6 * tr * tr) {
                self.jacobian_valid[s] = false;
                continue;
            }
            let inv = [[a[1][1] / da, -a[0][1] / da], [-a[1][0] / da, a[0][0] / da]];
            let mut j = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    j[r][c] = b[r][0] * inv[0][c] + b[r][1] * inv[1][c];
                }
            }
            self.jacobians[s] = j;
            self.jacobian_valid[s] = true;
        }
    }

    /// `(min det, max det)` over samples with a valid Jacobian estimate.
    pub fn det_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (j, ok) in self.jacobians.iter().zip(&self.jacobian_valid) {
            if *ok {
                let d = det2(j);
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
        if lo > hi {
            (1.0, 1.0)
        } else {
            (lo, hi)
        }
    }

    /// Largest spectral norm among the Jacobian estimates.
    pub fn max_lipschitz(&self) -> f64 {
        let mut m: f64 = 0.0;
        for (j, ok) in self.jacobians.iter().zip(&self.jacobian_valid) {
            if *ok {
                let a = j[0][0] * j[0][0] + j[1][0] * j[1][0];
                let b = j[0][0] * j[0][1] + j[1][0] * j[1][1];
                let c = j[0][1] * j[0][1] + j[1][1] * j[1][1];
                let l = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
                m = m.max(l.sqrt());
            }
        }
        if m == 0.0 {
            1.0
        } else {
            m
        }
    }
}

/// `Φ_k = (id + dt·v)∘Φ_{k−1}` with `v` interpolated on its classification.
///
/// When `solid_boundary` is given, samples more than one cell inside the
/// solid polygon raise [`SimError::SampleEscaped`]; samples more than one
/// cell outside the container always do.
pub fn update_flow_map(
    fm: &FlowMap,
    v: &VelocityField,
    grid: &FluidGrid,
    cls: &CellClassification,
    dt: f64,
    solid_boundary: Option<&[Vec2]>,
) -> Result<FlowMap> {
    let mut out = fm.clone();
    for p in out.positions.iter_mut() {
        let w = interpolate(grid, cls, v, *p)?;
        p[0] += dt * w[0];
        p[1] += dt * w[1];
    }
    let tol = grid.dx.max(grid.dy);
    let bbox = solid_boundary.map(|pts| {
        pts.iter().fold([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], |b, p| {
            [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])]
        })
    });
    for (index, p) in out.positions.iter().enumerate() {
        let outside = (grid.x0 - p[0]).max(p[0] - grid.x1).max(grid.y0 - p[1]).max(p[1] - grid.y1);
        if outside > tol {
            return Err(SimError::SampleEscaped { index, distance: outside });
        }
        if let (Some(pts), Some(b)) = (solid_boundary, bbox) {
            if p[0] > b[0] + tol && p[0] < b[2] - tol && p[1] > b[1] + tol && p[1] < b[3] - tol {
                let d = signed_distance(pts, *p);
                if d < -tol {
                    return Err(SimError::SampleEscaped { index, distance: -d });
                }
            }
        }
    }
    out.refresh_jacobians();
    Ok(out)
}

/// Frozen rate history of one delay window, one entry per `τ`-slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayWindow {
    pub index: usize,
    pub start_time: f64,
    /// Solid rate per slot and node.
    pub w_s: Vec<Vec<Vec2>>,
    /// Fluid velocity per slot, on the flow-map samples of this window.
    pub w_f: Vec<Vec<Vec2>>,
}

impl DelayWindow {
    /// First window: constant slots `η_*` and `v₀` (sampled on the flow map).
    pub fn initial(
        eta_star: &[Vec2],
        v0: &VelocityField,
        grid: &FluidGrid,
        cls: &CellClassification,
        fm: &FlowMap,
        slots: usize,
    ) -> Result<Self> {
        let wf: Vec<Vec2> = fm.reference.iter().map(|&p| interpolate(grid, cls, v0, p)).collect::<Result<_>>()?;
        Ok(Self { index: 0, start_time: fm.start_time, w_s: vec![eta_star.to_vec(); slots], w_f: vec![wf; slots] })
    }

    pub fn slots(&self) -> usize {
        self.w_s.len()
    }
}

/// One solved step of the previous window, as needed for the rollover.
#[derive(Debug, Clone, Copy)]
pub struct WindowStep<'a> {
    pub eta_prev: &'a [Vec2],
    pub eta: &'a [Vec2],
    pub velocity: &'a VelocityField,
    /// Classification on which `velocity` lives.
    pub cls: &'a CellClassification,
}

/// Builds the next window from the solved steps of the previous one.
///
/// Solid slots are the difference quotients of the solved deformations.
/// Fluid slots follow each new sample backward through the previous window
/// (`P_{m−1} + τ v_m(P_{m−1}) = P_m`, solved by fixed-point iteration) and
/// record the velocity that moved it in slot `m`.
pub fn advance_delay_window(
    steps: &[WindowStep<'_>],
    fm_new: &FlowMap,
    grid: &FluidGrid,
    tau: f64,
    index: usize,
) -> Result<DelayWindow> {
    let slots = steps.len();
    let w_s = steps
        .iter()
        .map(|s| s.eta.iter().zip(s.eta_prev).map(|(a, b)| [(a[0] - b[0]) / tau, (a[1] - b[1]) / tau]).collect())
        .collect();
    let mut w_f = vec![vec![[0.0; 2]; fm_new.len()]; slots];
    for (k, &y) in fm_new.reference.iter().enumerate() {
        let mut p = y;
        for m in (0..slots).rev() {
            let st = &steps[m];
            let mut q = p;
            let mut vel = [0.0; 2];
            for _ in 0..6 {
                vel = interpolate(grid, st.cls, st.velocity, q)?;
                q = [p[0] - tau * vel[0], p[1] - tau * vel[1]];
            }
            w_f[m][k] = vel;
            p = q;
        }
    }
    Ok(DelayWindow { index, start_time: fm_new.start_time, w_s, w_f })
}

/// Individual terms of the incremental functional at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    /// `E(η)` including `κ^{a0}·reg(η)²`.
    pub energy: EnergyBreakdown,
    /// `τ·R(η_{k−1}, u/τ)` including `κτ·reg(u/τ)²`.
    pub solid_dissipation: f64,
    pub solid_inertia: f64,
    pub solid_force: f64,
    pub slip: f64,
    /// `(τ/2)(ν‖εv‖² + κ‖D^{k0}v‖²)`.
    pub viscous: f64,
    pub fluid_inertia: f64,
    pub fluid_force: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.energy.total
            + self.solid_dissipation
            + self.solid_inertia
            + self.solid_force
            + self.slip
            + self.viscous
            + self.fluid_inertia
            + self.fluid_force
    }
}

/// Assembled constrained minimization for one step.
#[derive(Debug, Clone)]
pub struct StepProblem {
    pub step: usize,
    pub tau: f64,
    pub h: f64,
    pub material: MaterialParams,
    pub reg: RegularizerConfig,
    pub fluid: FluidParams,
    pub fluid_grid: FluidGrid,
    pub eta_prev: DeformationField,
    pub interface: InterfaceGeometry,
    pub cls: CellClassification,
    pub ops: FluidOperators,
    /// Interpolation at the interface points `η_{k−1}(∂Q)`.
    pub interp_interface: Csr,
    /// Interpolation at the flow-map positions `Φ_{k−1}X`.
    pub interp_samples: Csr,
    pub sample_weights: Vec<f64>,
    pub w_s: Vec<Vec2>,
    pub w_f: Vec<Vec2>,
    /// Slot-averaged force at `η_{k−1}` nodes and at the flow-map positions.
    pub force_solid: Vec<Vec2>,
    pub force_fluid: Vec<Vec2>,
    /// Rows: coupling, then walls, then divergence.
    pub constraints: Csr,
    pub num_coupling: usize,
    pub num_wall: usize,
    pub num_div: usize,
    quad: Csr,
    lin: Vec<f64>,
    constant: f64,
}

/// Assembles step `k` (1-based) from `η_{k−1}`, the current window and the
/// flow map `Φ_{k−1}`.
pub fn assemble_step(
    model: &Model,
    cfg: &StepConfig,
    eta_prev: &DeformationField,
    window: &DelayWindow,
    fm: &FlowMap,
    k: usize,
) -> Result<StepProblem> {
    eta_prev.check_admissible()?;
    let tau = cfg.dt_tau;
    let h = cfg.h_delay;
    let slot = (k - 1) % window.slots();
    let t0 = (k - 1) as f64 * tau;
    let reg = model.regularizer(cfg);
    let fluid = model.fluid_params(cfg);
    let grid = &model.fluid_grid;
    let sgrid = &*model.solid_grid;
    let mat = &model.material;

    let interface = build_interface(eta_prev)?;
    let cls = classify_cells(&interface, grid)?;
    let ops = FluidOperators::new(grid, &cls, fluid.k0_order)?;
    let interp_interface = interpolation_matrix(grid, &cls, &ops.dofs, &interface.points)?;
    let interp_samples = interpolation_matrix(grid, &cls, &ops.dofs, &fm.positions)?;

    let nn = sgrid.num_nodes();
    let nu = 2 * nn;
    let nv = ops.num_unknowns();
    let n = nu + nv;
    let w = sgrid.weights();
    let force_solid: Vec<Vec2> = eta_prev.positions().iter().map(|&p| cfg.force.slot_average(t0, t0 + tau, p)).collect();
    let force_fluid: Vec<Vec2> = fm.positions.iter().map(|&p| cfg.force.slot_average(t0, t0 + tau, p)).collect();
    let w_s = window.w_s[slot].clone();
    let w_f = window.w_f[slot].clone();
    if w_f.len() != fm.len() || w_s.len() != nn {
        return Err(SimError::ValidationError("delay window does not match the flow map or solid grid".into()));
    }

    let mut q = Triplets::new(n, n);
    let mut lin = vec![0.0; n];
    let mut constant = 0.0;

    q.extend_scaled(&dissipation_matrix(eta_prev).to_triplets(), 2.0 / tau, 0, 0);
    if reg.kappa != 0.0 {
        let r = reg_matrix(sgrid, reg.order);
        for i in 0..r.nrows {
            for (j, val) in r.row(i) {
                q.push(2 * i, 2 * j, 2.0 * reg.kappa / tau * val);
                q.push(2 * i + 1, 2 * j + 1, 2.0 * reg.kappa / tau * val);
            }
        }
    }
    let rho_s = mat.rho_s;
    for i in 0..nn {
        for c in 0..2 {
            q.push(2 * i + c, 2 * i + c, rho_s * w[i] / (tau * h));
            lin[2 * i + c] -= rho_s / h * w[i] * w_s[i][c] + rho_s * w[i] * force_solid[i][c];
        }
        constant += rho_s * tau / (2.0 * h) * w[i] * (w_s[i][0] * w_s[i][0] + w_s[i][1] * w_s[i][1]);
    }

    if fluid.slip_coefficient != 0.0 {
        let mut b = Triplets::new(interp_interface.nrows, n);
        for (i, &node) in interface.nodes.iter().enumerate() {
            for c in 0..2 {
                b.push(2 * i + c, 2 * node + c, 1.0 / tau);
                for (col, val) in interp_interface.row(2 * i + c) {
                    b.push(2 * i + c, nu + col, -val);
                }
            }
        }
        let bw: Vec<f64> = (0..interp_interface.nrows).map(|r| interface.weights[r / 2]).collect();
        q.extend_scaled(&weighted_gram(&b.to_csr(), &bw).to_triplets(), fluid.slip_coefficient * tau, 0, 0);
    }

    q.extend_scaled(&ops.viscous_matrix().to_triplets(), tau * fluid.nu, nu, nu);
    if fluid.kappa != 0.0 {
        q.extend_scaled(&ops.reg_matrix().to_triplets(), tau * fluid.kappa, nu, nu);
    }
    let rho_f = fluid.rho_f;
    let sw: Vec<f64> = (0..interp_samples.nrows).map(|r| fm.weights[r / 2]).collect();
    q.extend_scaled(&weighted_gram(&interp_samples, &sw).to_triplets(), rho_f * tau / h, nu, nu);
    let mut target = vec![0.0; interp_samples.nrows];
    for s in 0..fm.len() {
        for c in 0..2 {
            target[2 * s + c] = sw[2 * s] * (rho_f * tau / h * w_f[s][c] + tau * rho_f * force_fluid[s][c]);
        }
        constant += rho_f * tau / (2.0 * h) * fm.weights[s] * (w_f[s][0] * w_f[s][0] + w_f[s][1] * w_f[s][1]);
    }
    for (j, val) in interp_samples.mul_t_vec(&target).into_iter().enumerate() {
        lin[nu + j] -= val;
    }

    let num_coupling = interface.len();
    let num_wall = ops.wall.nrows;
    let num_div = ops.div.nrows;
    let mut a = Triplets::new(num_coupling + num_wall + num_div, n);
    for (i, &node) in interface.nodes.iter().enumerate() {
        let nrm = interface.normals[i];
        for c in 0..2 {
            a.push(i, 2 * node + c, nrm[c] / tau);
            for (col, val) in interp_interface.row(2 * i + c) {
                a.push(i, nu + col, -nrm[c] * val);
            }
        }
    }
    a.extend_scaled(&ops.wall.to_triplets(), 1.0, num_coupling, nu);
    a.extend_scaled(&ops.div.to_triplets(), 1.0, num_coupling + num_wall, nu);

    Ok(StepProblem {
        step: k,
        tau,
        h,
        material: mat.clone(),
        reg,
        fluid,
        fluid_grid: grid.clone(),
        eta_prev: eta_prev.clone(),
        interface,
        cls,
        ops,
        interp_interface,
        interp_samples,
        sample_weights: fm.weights.clone(),
        w_s,
        w_f,
        force_solid,
        force_fluid,
        constraints: a.to_csr(),
        num_coupling,
        num_wall,
        num_div,
        quad: q.to_csr(),
        lin,
        constant,
    })
}

impl StepProblem {
    pub fn num_solid_unknowns(&self) -> usize {
        2 * self.eta_prev.grid.num_nodes()
    }

    pub fn num_unknowns(&self) -> usize {
        self.num_solid_unknowns() + self.ops.num_unknowns()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.nrows
    }

    /// Quadratic part `Q` of the objective: `J = E(η_{k−1}+u) + ½zᵀQz + cᵀz + const`.
    pub fn quadratic(&self) -> &Csr {
        &self.quad
    }

    pub fn linear(&self) -> &[f64] {
        &self.lin
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn eta_from(&self, z: &[f64]) -> DeformationField {
        let p: Vec<Vec2> = self
            .eta_prev
            .positions()
            .iter()
            .enumerate()
            .map(|(i, p)| [p[0] + z[2 * i], p[1] + z[2 * i + 1]])
            .collect();
        DeformationField::new(self.eta_prev.grid.clone(), p)
    }

    pub fn velocity_from(&self, z: &[f64]) -> VelocityField {
        self.ops.dofs.scatter(&z[self.num_solid_unknowns()..], &self.cls, self.step as f64 * self.tau)
    }

    /// Solid rate `u/τ` per node.
    pub fn rate_from(&self, z: &[f64]) -> Vec<Vec2> {
        let nu = self.num_solid_unknowns();
        z[..nu].chunks_exact(2).map(|c| [c[0] / self.tau, c[1] / self.tau]).collect()
    }

    /// Term-by-term evaluation of the functional.
    pub fn terms(&self, z: &[f64]) -> Result<ObjectiveTerms> {
        let nu = self.num_solid_unknowns();
        let (tau, h) = (self.tau, self.h);
        let v = &z[nu..];
        let eta = self.eta_from(z);
        let energy = eval_energy(&eta, &self.material, &self.reg)?;
        let r = self.rate_from(z);
        let solid_dissipation = tau * eval_dissipation(&self.eta_prev, &r, &self.material, &self.reg)?;
        let w = self.eta_prev.grid.weights();
        let rho_s = self.material.rho_s;
        let (mut inertia, mut force) = (0.0, 0.0);
        for i in 0..r.len() {
            let d = [r[i][0] - self.w_s[i][0], r[i][1] - self.w_s[i][1]];
            inertia += w[i] * (d[0] * d[0] + d[1] * d[1]);
            force += w[i] * (self.force_solid[i][0] * r[i][0] + self.force_solid[i][1] * r[i][1]);
        }
        let slip = if self.fluid.slip_coefficient == 0.0 {
            0.0
        } else {
            let iv = self.interp_interface.mul_vec(v);
            let mut s = 0.0;
            for (i, &node) in self.interface.nodes.iter().enumerate() {
                let j = [r[node][0] - iv[2 * i], r[node][1] - iv[2 * i + 1]];
                s += self.interface.weights[i] * (j[0] * j[0] + j[1] * j[1]);
            }
            0.5 * self.fluid.slip_coefficient * tau * s
        };
        let mut viscous = self.fluid.nu * self.ops.viscous_energy(v);
        if self.fluid.kappa != 0.0 {
            viscous += self.fluid.kappa * self.ops.reg_energy(v);
        }
        let is = self.interp_samples.mul_vec(v);
        let (mut fi, mut ff) = (0.0, 0.0);
        for s in 0..self.sample_weights.len() {
            let d = [is[2 * s] - self.w_f[s][0], is[2 * s + 1] - self.w_f[s][1]];
            fi += self.sample_weights[s] * (d[0] * d[0] + d[1] * d[1]);
            ff += self.sample_weights[s] * (self.force_fluid[s][0] * is[2 * s] + self.force_fluid[s][1] * is[2 * s + 1]);
        }
        let rho_f = self.fluid.rho_f;
        Ok(ObjectiveTerms {
            energy,
            solid_dissipation,
            solid_inertia: rho_s * tau / (2.0 * h) * inertia,
            solid_force: -rho_s * tau * force,
            slip,
            viscous: 0.5 * tau * viscous,
            fluid_inertia: rho_f * tau / (2.0 * h) * fi,
            fluid_force: -tau * rho_f * ff,
        })
    }

    pub fn objective(&self, z: &[f64]) -> Result<f64> {
        Ok(self.terms(z)?.total())
    }

    pub fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        let eta = self.eta_from(z);
        let ge = energy_gradient(&eta, &self.material, &self.reg)?;
        let mut g = self.quad.mul_vec(z);
        for (gi, ci) in g.iter_mut().zip(&self.lin) {
            *gi += ci;
        }
        for (i, e) in ge.iter().enumerate() {
            g[2 * i] += e[0];
            g[2 * i + 1] += e[1];
        }
        Ok(g)
    }

    /// `zᵀQz`, the norm induced by the quadratic part of the functional.
    pub fn energy_norm_sq(&self, z: &[f64]) -> f64 {
        self.quad.quad(z)
    }

    /// Quadratic part plus the positive-semidefinite projection of the
    /// energy Hessian at `eta`.
    pub fn newton_matrix(&self, eta: &DeformationField) -> Csr {
        let grid = &*eta.grid;
        let mut wm = WindowMatrix::new(grid, hessian_radius(self.reg.order));
        accumulate_energy_hessian_psd(eta, &self.material, &mut wm);
        let rw = self.reg.energy_weight();
        if rw != 0.0 {
            wm.add_scalar_csr(&reg_matrix(grid, self.reg.order), 2.0 * rw);
        }
        let mut t = self.quad.to_triplets();
        let n = self.num_unknowns();
        t.ncols = n;
        t.nrows = n;
        t.extend_scaled(&wm.to_triplets(), 1.0, 0, 0);
        t.to_csr()
    }
}

/// Symmetrically scaled, regularized KKT factorization with iterative
/// refinement against the unregularized system.
struct Kkt {
    n: usize,
    m: usize,
    mat: Csr,
    scale: Vec<f64>,
    ldlt: Ldlt,
}

impl Kkt {
    fn new(mat: Csr, a: &Csr, delta: f64) -> Result<Self> {
        let n = mat.nrows;
        let m = a.nrows;
        let diag = mat.diagonal();
        let dmax = diag.iter().cloned().fold(0.0, f64::max);
        let floor = 1e-14 * dmax.max(1e-300);
        let dsafe: Vec<f64> = diag.iter().map(|d| d.max(floor)).collect();
        let mut scale = vec![0.0; n + m];
        for i in 0..n {
            scale[i] = 1.0 / dsafe[i].sqrt();
        }
        for r in 0..m {
            let s: f64 = a.row(r).map(|(j, v)| v * v / dsafe[j]).sum();
            scale[n + r] = if s > 0.0 { 1.0 / s.sqrt() } else { 1.0 };
        }
        let mut t = Triplets::new(n + m, n + m);
        for i in 0..n {
            for (j, v) in mat.row(i) {
                t.push(i, j, v * scale[i] * scale[j]);
            }
            t.push(i, i, delta);
        }
        for r in 0..m {
            for (j, v) in a.row(r) {
                let sv = v * scale[n + r] * scale[j];
                t.push(n + r, j, sv);
                t.push(j, n + r, sv);
            }
            t.push(n + r, n + r, -delta);
        }
        let ldlt = Ldlt::factor(&t.to_csr())?;
        Ok(Self { n, m, mat, scale, ldlt })
    }

    fn apply(&self, a: &Csr, x: &[f64]) -> Vec<f64> {
        let (xz, xl) = x.split_at(self.n);
        let mut top = self.mat.mul_vec(xz);
        for (t, v) in top.iter_mut().zip(a.mul_t_vec(xl)) {
            *t += v;
        }
        top.extend(a.mul_vec(xz));
        top
    }

    fn solve_scaled(&self, rhs: &[f64]) -> Vec<f64> {
        let b: Vec<f64> = rhs.iter().zip(&self.scale).map(|(r, s)| r * s).collect();
        let y = self.ldlt.solve(&b);
        y.iter().zip(&self.scale).map(|(y, s)| y * s).collect()
    }

    fn solve(&self, a: &Csr, rhs: &[f64], steps: usize) -> Vec<f64> {
        let bn = max_abs(rhs).max(1e-300);
        let mut x = self.solve_scaled(rhs);
        let mut last = f64::INFINITY;
        for _ in 0..steps {
            let ax = self.apply(a, &x);
            let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, v)| b - v).collect();
            let rn = max_abs(&r);
            if rn <= 1e-15 * bn || rn >= 0.5 * last {
                break;
            }
            last = rn;
            let dx = self.solve_scaled(&r);
            for (xi, di) in x.iter_mut().zip(dx) {
                *xi += di;
            }
        }
        debug_assert_eq!(x.len(), self.n + self.m);
        x
    }
}

/// Solved step.
#[derive(Debug, Clone)]
pub struct StepSolution {
    pub eta: DeformationField,
    pub velocity: VelocityField,
    /// Pressure per cell (divergence multiplier, zero mean over active cells, zero on Solid cells).
    pub pressure: Vec<f64>,
    pub coupling_multipliers: Vec<f64>,
    /// Max-norms of the coupling, wall and divergence multipliers.
    pub multiplier_norms: [f64; 3],
    pub z: Vec<f64>,
    pub terms: ObjectiveTerms,
    pub objective: f64,
    /// `J(η_{k−1}, 0)`.
    pub objective_start: f64,
    pub iterations: usize,
    pub factorizations: usize,
    pub converged: bool,
    pub decrement: f64,
    pub projected_gradient: f64,
    pub coupling_residual: f64,
    pub wall_residual: f64,
    pub divergence_residual: f64,
    pub min_det: f64,
    /// Interface of the solved deformation.
    pub interface: InterfaceGeometry,
    pub min_separation: f64,
}

impl StepSolution {
    pub fn ensure_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(SimError::MaxIterations { iterations: self.iterations, decrement: self.decrement })
        }
    }
}

/// Relative Newton decrement below which an iterate whose progress is lost
/// in rounding counts as stationary.
const STATIONARY_DECREMENT: f64 = 1e-9;

/// Minimizes the step functional by a damped Newton method on the
/// constraint null space, started from `(η_{k−1}, 0)`.
///
/// The KKT matrix uses the quadratic part plus the projected energy Hessian
/// and is refactored only when convergence slows, since the increment is
/// small relative to the nonlinearity of `E`. Every accepted iterate
/// decreases the functional, so the comparison inequality holds by
/// construction.
pub fn solve_step(problem: &StepProblem, solver: &SolverConfig, contact_threshold: f64) -> Result<StepSolution> {
    let n = problem.num_unknowns();
    let a = &problem.constraints;
    let mut z = vec![0.0; n];
    let start = problem.terms(&z)?;
    let j_start = start.total();
    let mut j = j_start;
    let mut delta = solver.penalty_init;
    let mut factorizations = 0;
    let factor_at = |eta: &DeformationField, delta: &mut f64, count: &mut usize| -> Result<Kkt> {
        let mat = problem.newton_matrix(eta);
        let mut last = None;
        for _ in 0..solver.max_outer {
            *count += 1;
            match Kkt::new(mat.clone(), a, *delta) {
                Ok(k) => return Ok(k),
                Err(e) => {
                    last = Some(e);
                    *delta *= solver.penalty_growth;
                }
            }
        }
        Err(last.unwrap_or_else(|| SimError::SingularSystem("KKT factorization failed".into())))
    };
    let mut kkt = factor_at(&problem.eta_prev, &mut delta, &mut factorizations)?;
    let m = a.nrows;
    let mut lambda = vec![0.0; m];
    let mut converged = false;
    let mut iterations = 0;
    let mut decrement = 0.0;
    let mut prev_dec = f64::INFINITY;
    let mut g = problem.gradient(&z)?;
    while iterations < solver.max_inner {
        let mut rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        rhs.extend(a.mul_vec(&z).into_iter().map(|v| -v));
        let sol = kkt.solve(a, &rhs, solver.refinement_steps);
        let dz = &sol[..n];
        lambda.copy_from_slice(&sol[n..]);
        let dec = -dot(&g, dz);
        decrement = dec.max(0.0);
        let tol = solver.grad_tol * j.abs().max(1.0);
        if dec <= tol {
            converged = true;
            break;
        }
        let mut alpha = 1.0;
        let mut backtracks = 0;
        let accepted = loop {
            let trial: Vec<f64> = z.iter().zip(dz).map(|(x, d)| x + alpha * d).collect();
            let eta = problem.eta_from(&trial);
            if eta.min_det() >= solver.min_det {
                if let Ok(jt) = problem.objective(&trial) {
                    if jt <= j - solver.armijo * alpha * dec {
                        break Some((trial, jt));
                    }
                }
            }
            alpha *= solver.backtrack;
            backtracks += 1;
            if backtracks > 60 {
                break None;
            }
        };
        iterations += 1;
        match accepted {
            Some((trial, jt)) => {
                // a decrease lost in the rounding of J leaves nothing
                // measurable to gain
                let stalled = j - jt <= 64.0 * f64::EPSILON * j.abs().max(1.0);
                z = trial;
                j = jt;
                if stalled && dec <= STATIONARY_DECREMENT * j.abs().max(1.0) {
                    converged = true;
                    break;
                }
            }
            None => {
                // below rounding of J: stationary to working precision
                if dec <= STATIONARY_DECREMENT * j.abs().max(1.0) {
                    converged = true;
                    break;
                }
                return Err(SimError::LineSearchFailed { iterations: backtracks });
            }
        }
        g = problem.gradient(&z)?;
        if iterations >= 2 && dec > 0.1 * prev_dec && factorizations < solver.max_outer {
            kkt = factor_at(&problem.eta_from(&z), &mut delta, &mut factorizations)?;
        }
        prev_dec = dec;
    }

    let residual = a.mul_vec(&z);
    if max_abs(&residual) > solver.constraint_tol {
        z = project_kernel(a, &z, 1e-14)?;
    }
    // make u exactly the difference of the stored positions
    for (i, p) in problem.eta_prev.positions().iter().enumerate() {
        for c in 0..2 {
            z[2 * i + c] = (p[c] + z[2 * i + c]) - p[c];
        }
    }
    let g = problem.gradient(&z)?;
    let residual = a.mul_vec(&z);
    let nc = problem.num_coupling;
    let nw = problem.num_wall;
    let mut pg = g.clone();
    for (p, v) in pg.iter_mut().zip(a.mul_t_vec(&lambda)) {
        *p += v;
    }
    let eta = problem.eta_from(&z);
    let velocity = problem.velocity_from(&z);
    let terms = problem.terms(&z)?;
    let grid = &problem.fluid_grid;
    let cell_area = grid.cell_area();
    let mut pressure = vec![0.0; grid.num_cells()];
    let (mut mean, mut wsum) = (0.0, 0.0);
    for (d, &c) in problem.ops.dofs.dof_to_cell.iter().enumerate() {
        let p = -lambda[nc + nw + d] / (problem.tau * cell_area);
        pressure[c] = p;
        mean += problem.ops.cell_weight[d] * p;
        wsum += problem.ops.cell_weight[d];
    }
    mean /= wsum;
    for &c in &problem.ops.dofs.dof_to_cell {
        pressure[c] -= mean;
    }
    let interface = build_interface(&eta)?;
    let separation = min_separation(&interface, grid);
    if separation < contact_threshold {
        return Err(SimError::ContactImminent { separation, threshold: contact_threshold });
    }
    Ok(StepSolution {
        min_det: eta.min_det(),
        eta,
        velocity,
        pressure,
        coupling_multipliers: lambda[..nc].to_vec(),
        multiplier_norms: [max_abs(&lambda[..nc]), max_abs(&lambda[nc..nc + nw]), max_abs(&lambda[nc + nw..])],
        objective: terms.total(),
        terms,
        z,
        objective_start: j_start,
        iterations,
        factorizations,
        converged,
        decrement,
        projected_gradient: max_abs(&pg),
        coupling_residual: max_abs(&residual[..nc]),
        wall_residual: max_abs(&residual[nc..nc + nw]),
        divergence_residual: max_abs(&residual[nc + nw..]),
        interface,
        min_separation: separation,
    })
}

/// Budget entries of a solved step, each taken from the assembled terms.
pub fn step_budget(problem: &StepProblem, sol: &StepSolution) -> EnergyBudget {
    let (tau, h) = (problem.tau, problem.h);
    let rho_s = problem.material.rho_s;
    let rho_f = problem.fluid.rho_f;
    let w = problem.eta_prev.grid.weights();
    let r = problem.rate_from(&sol.z);
    let is = problem.interp_samples.mul_vec(&sol.z[problem.num_solid_unknowns()..]);
    let sq = |v: &Vec2| v[0] * v[0] + v[1] * v[1];
    let sum_w = |ws: &[f64], f: &dyn Fn(usize) -> f64| -> f64 { ws.iter().enumerate().map(|(i, wi)| wi * f(i)).sum() };
    let sw = &problem.sample_weights;
    EnergyBudget {
        step: problem.step,
        elastic: sol.terms.energy.total - sol.terms.energy.regularizer_term,
        regularizer: sol.terms.energy.regularizer_term,
        solid_kinetic_rate: rho_s * tau / (8.0 * h) * sum_w(w, &|i| sq(&r[i])),
        fluid_kinetic_rate: rho_f * tau / (8.0 * h) * sum_w(sw, &|s| is[2 * s] * is[2 * s] + is[2 * s + 1] * is[2 * s + 1]),
        viscous_dissipation: sol.terms.viscous,
        solid_dissipation: sol.terms.solid_dissipation,
        slip_dissipation: sol.terms.slip,
        window_rate_solid: rho_s * tau / h * sum_w(w, &|i| sq(&problem.w_s[i])),
        window_rate_fluid: rho_f * tau / h * sum_w(sw, &|s| sq(&problem.w_f[s])),
        force_work_solid: 2.0 * rho_s * tau * h * sum_w(w, &|i| sq(&problem.force_solid[i])),
        force_work_fluid: 2.0 * rho_f * tau * h * sum_w(sw, &|s| sq(&problem.force_fluid[s])),
        comparison_gap: sol.objective - sol.objective_start,
        objective: sol.objective,
    }
}

/// Per-step solver and geometry statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub iterations: usize,
    pub factorizations: usize,
    pub converged: bool,
    pub decrement: f64,
    pub projected_gradient: f64,
    pub coupling_residual: f64,
    /// Coupling residual with `v` re-evaluated at the solved interface `η_k(∂Q)`.
    pub linearization_defect: f64,
    pub divergence_residual: f64,
    pub min_det: f64,
    pub cn_residual: f64,
    pub min_separation: f64,
    pub flow_det_min: f64,
    pub flow_det_max: f64,
    pub flow_lipschitz: f64,
}

/// Record of one accepted step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub k: usize,
    pub time: f64,
    pub eta: Vec<Vec2>,
    pub velocity: VelocityField,
    /// Classification of `Ω_{k−1}`, on which `velocity` lives.
    pub cls: CellClassification,
    pub pressure: Vec<f64>,
    pub coupling_multipliers: Vec<f64>,
    pub multiplier_norms: [f64; 3],
    pub budget: EnergyBudget,
    /// Interface polyline of `η_k`.
    pub interface: Vec<Vec2>,
    pub stats: StepStats,
}

/// Complete run: initial state, step records and the abort reason, if any.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub tau: f64,
    pub h: f64,
    pub solid_grid: Arc<SolidGrid>,
    pub initial_eta: Vec<Vec2>,
    /// `η_*`, the solid rate of the first delay window.
    pub initial_solid_rate: Vec<Vec2>,
    /// Divergence-projected `v₀`.
    pub initial_velocity: VelocityField,
    pub initial_cls: CellClassification,
    pub initial_energy: EnergyBreakdown,
    pub steps: Vec<StepRecord>,
    pub abort: Option<SimError>,
}

impl Trajectory {
    pub fn final_time(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.time)
    }

    fn eta_at_index(&self, k: usize) -> &[Vec2] {
        if k == 0 {
            &self.initial_eta
        } else {
            &self.steps[k - 1].eta
        }
    }

    fn slot(&self, t: f64) -> (usize, f64) {
        let s = t / self.tau;
        let k = s.ceil().max(0.0) as usize;
        (k.min(self.steps.len()), s)
    }

    /// Piecewise constant interpolant `η(t) = η_k` for `t ∈ ((k−1)τ, kτ]`.
    pub fn eta_piecewise_constant(&self, t: f64) -> Vec<Vec2> {
        let (k, _) = self.slot(t);
        self.eta_at_index(k).to_vec()
    }

    /// Left-shifted interpolant `η(t) = η_{k−1}` for `t ∈ ((k−1)τ, kτ]`, equal to `η_k` at `t = kτ`.
    pub fn eta_piecewise_constant_left(&self, t: f64) -> Vec<Vec2> {
        let s = t / self.tau;
        let k = (s.floor().max(0.0) as usize).min(self.steps.len());
        self.eta_at_index(k).to_vec()
    }

    /// Piecewise affine interpolant between consecutive records.
    pub fn eta_piecewise_affine(&self, t: f64) -> Vec<Vec2> {
        let (k, s) = self.slot(t);
        if k == 0 {
            return self.initial_eta.clone();
        }
        let theta = (s - (k - 1) as f64).clamp(0.0, 1.0);
        let (a, b) = (self.eta_at_index(k - 1), self.eta_at_index(k));
        a.iter().zip(b).map(|(p, q)| [p[0] + theta * (q[0] - p[0]), p[1] + theta * (q[1] - p[1])]).collect()
    }
}

/// Maximum coupling residual with `v` evaluated at the solved interface.
fn linearization_defect(problem: &StepProblem, sol: &StepSolution) -> Result<f64> {
    let r = problem.rate_from(&sol.z);
    let pos = sol.eta.positions();
    let mut worst: f64 = 0.0;
    for (i, &node) in problem.interface.nodes.iter().enumerate() {
        let v = interpolate(&problem.fluid_grid, &problem.cls, &sol.velocity, pos[node])?;
        let n = problem.interface.normals[i];
        worst = worst.max(((r[node][0] - v[0]) * n[0] + (r[node][1] - v[1]) * n[1]).abs());
    }
    Ok(worst)
}

/// Runs the scheme from the initial data until `t_end`, contact or failure.
///
/// Configuration and initial-data errors are returned directly; errors
/// during stepping end the run and are stored in [`Trajectory::abort`].
pub fn run_simulation(model: &Model, cfg: &StepConfig, init: &InitialData) -> Result<Trajectory> {
    cfg.validate()?;
    model.validate()?;
    init.eta0.check_admissible()?;
    let grid = &model.fluid_grid;
    let reg = model.regularizer(cfg);
    let iface0 = build_interface(&init.eta0)?;
    let cls0 = classify_cells(&iface0, grid)?;
    if !init.eta0.inside_box([grid.x0, grid.y0], [grid.x1, grid.y1]) {
        return Err(SimError::ValidationError("initial solid leaves the container".into()));
    }
    let mut v0 = VelocityField::zeros(&cls0);
    for c in 0..grid.num_cells() {
        if cls0.is_active(c) {
            v0.values[c] = init.v0.values[c];
        }
    }
    let v0 = project_divergence_free(grid, &v0, &cls0)?;
    let slots = cfg.steps_per_window();
    let tau = cfg.dt_tau;
    let mut fm = FlowMap::new(grid, &cls0, &iface0.points, 0.0);
    let mut window = DelayWindow::initial(&init.eta_star, &v0, grid, &cls0, &fm, slots)?;
    let mut traj = Trajectory {
        tau,
        h: cfg.h_delay,
        solid_grid: model.solid_grid.clone(),
        initial_eta: init.eta0.positions().to_vec(),
        initial_solid_rate: init.eta_star.clone(),
        initial_velocity: v0,
        initial_cls: cls0,
        initial_energy: eval_energy(&init.eta0, &model.material, &reg)?,
        steps: Vec::new(),
        abort: None,
    };
    let threshold = model.contact_threshold(&cfg.solver);
    let mut eta = init.eta0.clone();
    for k in 1..=cfg.num_steps() {
        let outcome = (|| -> Result<(StepRecord, FlowMap, Option<DelayWindow>, DeformationField)> {
            let mut new_window = None;
            let mut fm_cur = fm.clone();
            if (k - 1) % slots == 0 && k > 1 {
                let iface = build_interface(&eta)?;
                let cls = classify_cells(&iface, grid)?;
                fm_cur = FlowMap::new(grid, &cls, &iface.points, (k - 1) as f64 * tau);
                let recs = &traj.steps[k - 1 - slots..k - 1];
                let steps: Vec<WindowStep<'_>> = recs
                    .iter()
                    .enumerate()
                    .map(|(m, rec)| WindowStep {
                        eta_prev: traj.eta_at_index(k - 1 - slots + m),
                        eta: &rec.eta,
                        velocity: &rec.velocity,
                        cls: &rec.cls,
                    })
                    .collect();
                new_window = Some(advance_delay_window(&steps, &fm_cur, grid, tau, (k - 1) / slots)?);
            }
            let win = new_window.as_ref().unwrap_or(&window);
            let problem = assemble_step(model, cfg, &eta, win, &fm_cur, k)?;
            let sol = solve_step(&problem, &cfg.solver, threshold)?;
            let cn = ciarlet_necas_residual(&sol.eta, cfg.solver.cn_resolution);
            if cn.abs() > cfg.solver.cn_tolerance {
                return Err(SimError::InjectivityViolated { residual: cn, tolerance: cfg.solver.cn_tolerance });
            }
            let fm_next =
                update_flow_map(&fm_cur, &sol.velocity, grid, &problem.cls, tau, Some(&sol.interface.points))?;
            let (dmin, dmax) = fm_next.det_range();
            let stats = StepStats {
                iterations: sol.iterations,
                factorizations: sol.factorizations,
                converged: sol.converged,
                decrement: sol.decrement,
                projected_gradient: sol.projected_gradient,
                coupling_residual: sol.coupling_residual,
                linearization_defect: linearization_defect(&problem, &sol)?,
                divergence_residual: sol.divergence_residual,
                min_det: sol.min_det,
                cn_residual: cn,
                min_separation: sol.min_separation,
                flow_det_min: dmin,
                flow_det_max: dmax,
                flow_lipschitz: fm_next.max_lipschitz(),
            };
            let record = StepRecord {
                k,
                time: k as f64 * tau,
                eta: sol.eta.positions().to_vec(),
                velocity: sol.velocity.clone(),
                cls: problem.cls.clone(),
                pressure: sol.pressure.clone(),
                coupling_multipliers: sol.coupling_multipliers.clone(),
                multiplier_norms: sol.multiplier_norms,
                budget: step_budget(&problem, &sol),
                interface: sol.interface.points.clone(),
                stats,
            };
            Ok((record, fm_next, new_window, sol.eta))
        })();
        match outcome {
            Ok((record, fm_next, new_window, eta_next)) => {
                if let Some(w) = new_window {
                    window = w;
                }
                fm = fm_next;
                eta = eta_next;
                traj.steps.push(record);
            }
            Err(e) => {
                traj.abort = Some(e);
                break;
            }
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_fractional_window() {
        let cfg = StepConfig {
            dt_tau: 1e-3,
            h_delay: 2.5e-3,
            kappa: 0.0,
            a0_exponent: 1.0,
            t_end: 1e-2,
            force: Force::Zero,
            solver: SolverConfig::default(),
        };
        assert!(matches!(cfg.validate(), Err(SimError::ValidationError(m)) if m.contains("integer multiple")));
    }

    #[test]
    fn slot_average_of_constant_force_is_exact() {
        let f = Force::Constant { value: [0.0, -1.0] };
        assert_eq!(f.slot_average(0.0, 0.1, [0.3, 0.3]), [0.0, -1.0]);
        let o = Force::Oscillating { value: [1.0, 0.0], omega: 2.0 };
        let avg = o.slot_average(0.0, 0.5, [0.0, 0.0]);
        assert!((avg[0] - (1.0f64).sin() / 1.0).abs() < 1e-6);
    }


    fn small_disc(steps: usize) -> (Model, StepConfig, InitialData) {
        let material = MaterialParams { rho_s: 2.0, ..MaterialParams::default() }.with_stiffness(10.0);
        let lam = crate::solid_model::stress_free_stretch(&material);
        let side = 0.3 / lam;
        let sg = Arc::new(SolidGrid::new(8, 8, side, side, [0.0, 0.0]).unwrap());
        let eta0 = DeformationField::from_map(sg.clone(), |x| [lam * x[0] + 0.35, lam * x[1] + 0.45]);
        let fluid_grid = FluidGrid::unit(24);
        let cls = CellClassification::all_fluid(&fluid_grid);
        let model = Model { solid_grid: sg.clone(), material, reg_order: 3, fluid_grid, fluid: FluidParams::default() };
        let cfg = StepConfig {
            dt_tau: 1e-3,
            h_delay: 2e-3,
            kappa: 1e-4,
            a0_exponent: 1.0,
            t_end: steps as f64 * 1e-3,
            force: Force::Constant { value: [0.0, -1.0] },
            solver: SolverConfig::default(),
        };
        let init = InitialData { eta0, eta_star: vec![[0.0; 2]; sg.num_nodes()], v0: VelocityField::zeros(&cls) };
        (model, cfg, init)
    }

    #[test]
    fn falling_disc_smoke_run() {
        let (model, cfg, init) = small_disc(4);
        let traj = run_simulation(&model, &cfg, &init).unwrap();
        assert!(traj.abort.is_none(), "{:?}", traj.abort);
        assert_eq!(traj.steps.len(), 4);
        for rec in &traj.steps {
            assert!(rec.stats.converged);
            assert!(rec.budget.comparison_gap <= 1e-12 * rec.budget.objective.abs().max(1.0));
            assert!(rec.stats.coupling_residual < 1e-9);
            assert!(rec.stats.divergence_residual < 1e-9);
        }
        let y0 = traj.initial_eta.iter().map(|p| p[1]).sum::<f64>();
        let y1 = traj.steps[3].eta.iter().map(|p| p[1]).sum::<f64>();
        assert!(y1 < y0, "body should sink under gravity");
    }
}
