//! Collocated finite-difference fluid on the fixed background grid.
//!
//! Velocities and pressure multipliers live at cell centers. A velocity is
//! carried only on active (Fluid or Cut) cells and is extended by zero into
//! the solid. Operators are assembled as sparse matrices over the active
//! degrees of freedom `2·d + component`, where `d` enumerates active cells.

use crate::error::{Result, SimError};
use crate::geometry::{CellClassification, InterfaceGeometry};
use crate::linalg::{conjugate_gradient, max_abs, Csr, Triplets};
use crate::solid_model::Vec2;

/// Uniform rectangular grid over the container `[x0,x1] × [y0,y1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidGrid {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub mx: usize,
    pub my: usize,
    pub dx: f64,
    pub dy: f64,
}

impl FluidGrid {
    pub fn new(lo: Vec2, hi: Vec2, mx: usize, my: usize) -> Result<Self> {
        if mx < 2 || my < 2 || !(hi[0] > lo[0] && hi[1] > lo[1]) {
            return Err(SimError::ValidationError("fluid grid needs ≥ 2 cells and a non-empty box".into()));
        }
        Ok(Self {
            x0: lo[0],
            y0: lo[1],
            x1: hi[0],
            y1: hi[1],
            mx,
            my,
            dx: (hi[0] - lo[0]) / mx as f64,
            dy: (hi[1] - lo[1]) / my as f64,
        })
    }

    pub fn unit(m: usize) -> Self {
        Self::new([0.0, 0.0], [1.0, 1.0], m, m).expect("valid unit grid")
    }

    pub fn num_cells(&self) -> usize {
        self.mx * self.my
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    #[inline]
    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i + self.mx * j
    }

    #[inline]
    pub fn cell_ij(&self, c: usize) -> (usize, usize) {
        (c % self.mx, c / self.mx)
    }

    pub fn cell_center(&self, c: usize) -> Vec2 {
        let (i, j) = self.cell_ij(c);
        [self.x0 + (i as f64 + 0.5) * self.dx, self.y0 + (j as f64 + 0.5) * self.dy]
    }

    /// Neighbor in direction `(di, dj)`, or `None` at the container edge.
    pub fn neighbor(&self, c: usize, di: isize, dj: isize) -> Option<usize> {
        let (i, j) = self.cell_ij(c);
        let (a, b) = (i as isize + di, j as isize + dj);
        if a < 0 || b < 0 || a >= self.mx as isize || b >= self.my as isize {
            None
        } else {
            Some(self.cell_index(a as usize, b as usize))
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }
}

/// Physical fluid parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidParams {
    pub nu: f64,
    pub rho_f: f64,
    pub slip_coefficient: f64,
    pub kappa: f64,
    pub k0_order: usize,
}

impl Default for FluidParams {
    fn default() -> Self {
        Self { nu: 0.1, rho_f: 1.0, slip_coefficient: 1.0, kappa: 0.0, k0_order: 2 }
    }
}

impl FluidParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) {
            return Err(SimError::ValidationError("nu must be positive".into()));
        }
        if !(self.rho_f > 0.0) || self.slip_coefficient < 0.0 || self.kappa < 0.0 {
            return Err(SimError::ValidationError("rho_f > 0, slip_coefficient ≥ 0, kappa ≥ 0 required".into()));
        }
        Ok(())
    }
}

/// Cell-centered velocity, zero on inactive cells.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub values: Vec<Vec2>,
    pub active: Vec<bool>,
    pub time: f64,
}

impl VelocityField {
    pub fn zeros(cls: &CellClassification) -> Self {
        let n = cls.labels.len();
        Self { values: vec![[0.0; 2]; n], active: (0..n).map(|c| cls.is_active(c)).collect(), time: 0.0 }
    }

    /// Samples `f` at the centers of active cells.
    pub fn from_fn(grid: &FluidGrid, cls: &CellClassification, f: impl Fn(Vec2) -> Vec2) -> Self {
        let mut v = Self::zeros(cls);
        for c in 0..grid.num_cells() {
            if v.active[c] {
                v.values[c] = f(grid.cell_center(c));
            }
        }
        v
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt()).fold(0.0, f64::max)
    }
}

/// Numbering of active cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    pub cell_to_dof: Vec<Option<usize>>,
    pub dof_to_cell: Vec<usize>,
}

impl DofMap {
    pub fn new(cls: &CellClassification) -> Self {
        let mut cell_to_dof = vec![None; cls.labels.len()];
        let mut dof_to_cell = Vec::new();
        for c in 0..cls.labels.len() {
            if cls.is_active(c) {
                cell_to_dof[c] = Some(dof_to_cell.len());
                dof_to_cell.push(c);
            }
        }
        Self { cell_to_dof, dof_to_cell }
    }

    pub fn num_cells(&self) -> usize {
        self.dof_to_cell.len()
    }

    /// Number of scalar unknowns (two per active cell).
    pub fn len(&self) -> usize {
        2 * self.dof_to_cell.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dof_to_cell.is_empty()
    }

    pub fn gather(&self, v: &VelocityField) -> Vec<f64> {
        self.dof_to_cell.iter().flat_map(|&c| v.values[c]).collect()
    }

    pub fn scatter(&self, x: &[f64], cls: &CellClassification, time: f64) -> VelocityField {
        let mut v = VelocityField::zeros(cls);
        v.time = time;
        for (d, &c) in self.dof_to_cell.iter().enumerate() {
            v.values[c] = [x[2 * d], x[2 * d + 1]];
        }
        v
    }
}

/// Sparse operators of the fluid on one classification.
#[derive(Debug, Clone)]
pub struct FluidOperators {
    pub dofs: DofMap,
    /// Rows `3d + (0, 1, 2)` give `(ε11, ε22, √2·ε12)` at active cell `d`.
    pub eps: Csr,
    /// Quadrature weight of each active cell (fluid fraction × cell area).
    pub cell_weight: Vec<f64>,
    /// Rows of the high-order regularizer with per-row weights.
    pub reg: Csr,
    pub reg_weight: Vec<f64>,
    /// Discrete divergence, one row per active cell.
    pub div: Csr,
    /// Wall impermeability rows and their `(cell, side)` labels.
    pub wall: Csr,
    pub wall_sides: Vec<(usize, WallSide)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WallSide {
    West,
    East,
    South,
    North,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// One-directional first-derivative weights at an active cell: centered when
/// both neighbors are active, one-sided with one, empty otherwise.
fn derivative_weights(
    grid: &FluidGrid,
    cls: &CellClassification,
    c: usize,
    axis: usize,
) -> Vec<(usize, f64)> {
    let h = if axis == 0 { grid.dx } else { grid.dy };
    let (di, dj) = if axis == 0 { (1, 0) } else { (0, 1) };
    let fwd = grid.neighbor(c, di, dj).filter(|&n| cls.is_active(n));
    let bwd = grid.neighbor(c, -di, -dj).filter(|&n| cls.is_active(n));
    match (bwd, fwd) {
        (Some(b), Some(f)) => vec![(b, -0.5 / h), (f, 0.5 / h)],
        (None, Some(f)) => vec![(c, -1.0 / h), (f, 1.0 / h)],
        (Some(b), None) => vec![(b, -1.0 / h), (c, 1.0 / h)],
        (None, None) => Vec::new(),
    }
}

impl FluidOperators {
    pub fn new(grid: &FluidGrid, cls: &CellClassification, k0_order: usize) -> Result<Self> {
        let dofs = DofMap::new(cls);
        if dofs.is_empty() {
            return Err(SimError::SingularSystem("no active fluid cells".into()));
        }
        let nd = dofs.num_cells();
        let nv = 2 * nd;
        let dof = |c: usize| dofs.cell_to_dof[c].expect("active cell");
        let area = grid.cell_area();

        let mut eps = Triplets::new(3 * nd, nv);
        let mut cell_weight = Vec::with_capacity(nd);
        let s2 = std::f64::consts::SQRT_2;
        for (d, &c) in dofs.dof_to_cell.iter().enumerate() {
            cell_weight.push(cls.fraction[c] * area);
            let wx = derivative_weights(grid, cls, c, 0);
            let wy = derivative_weights(grid, cls, c, 1);
            for &(n, w) in &wx {
                eps.push(3 * d, 2 * dof(n), w); // ∂x v1
                eps.push(3 * d + 2, 2 * dof(n) + 1, 0.5 * s2 * w); // ∂x v2
            }
            for &(n, w) in &wy {
                eps.push(3 * d + 1, 2 * dof(n) + 1, w); // ∂y v2
                eps.push(3 * d + 2, 2 * dof(n), 0.5 * s2 * w); // ∂y v1
            }
        }

        let mut reg = Triplets::new(0, nv);
        let mut reg_rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut reg_weight = Vec::new();
        if k0_order == 0 {
            for d in 0..nd {
                for comp in 0..2 {
                    reg_rows.push(vec![(2 * d + comp, 1.0)]);
                    reg_weight.push(area);
                }
            }
        } else {
            for a in 0..=k0_order {
                let b = k0_order - a;
                let mult = binomial(k0_order, a);
                let scale = grid.dx.powi(a as i32) * grid.dy.powi(b as i32);
                for j in 0..grid.my.saturating_sub(b) {
                    for i in 0..grid.mx.saturating_sub(a) {
                        let mut cells = Vec::with_capacity((a + 1) * (b + 1));
                        let mut ok = true;
                        for l in 0..=b {
                            for m in 0..=a {
                                let cc = grid.cell_index(i + m, j + l);
                                if !cls.is_active(cc) {
                                    ok = false;
                                }
                                let cx = binomial(a, m) * if (a - m) % 2 == 0 { 1.0 } else { -1.0 };
                                let cy = binomial(b, l) * if (b - l) % 2 == 0 { 1.0 } else { -1.0 };
                                cells.push((cc, cx * cy / scale));
                            }
                        }
                        if !ok {
                            continue;
                        }
                        for comp in 0..2 {
                            reg_rows.push(cells.iter().map(|&(cc, w)| (2 * dof(cc) + comp, w)).collect());
                            reg_weight.push(mult * area);
                        }
                    }
                }
            }
        }
        reg.nrows = reg_rows.len();
        for (r, row) in reg_rows.iter().enumerate() {
            for &(col, w) in row {
                reg.push(r, col, w);
            }
        }

        let mut div = Triplets::new(nd, nv);
        for (d, &c) in dofs.dof_to_cell.iter().enumerate() {
            for (axis, (di, dj)) in [(0usize, (1isize, 0isize)), (1, (0, 1))] {
                let h = if axis == 0 { grid.dx } else { grid.dy };
                for (sgn, off) in [(1.0, 1isize), (-1.0, -1isize)] {
                    // face value (v_c + v_n)/2 with zero extension; wall faces carry no flux
                    if let Some(n) = grid.neighbor(c, di * off, dj * off) {
                        div.push(d, 2 * d + axis, sgn * 0.5 / h);
                        if cls.is_active(n) {
                            div.push(d, 2 * dof(n) + axis, sgn * 0.5 / h);
                        }
                    }
                }
            }
        }

        let mut wall = Triplets::new(0, nv);
        let mut wall_sides = Vec::new();
        for (d, &c) in dofs.dof_to_cell.iter().enumerate() {
            let (i, j) = grid.cell_ij(c);
            let sides = [
                (i == 0, WallSide::West, 0usize),
                (i + 1 == grid.mx, WallSide::East, 0),
                (j == 0, WallSide::South, 1),
                (j + 1 == grid.my, WallSide::North, 1),
            ];
            for (hit, side, axis) in sides {
                if hit {
                    wall.nrows += 1;
                    wall.push(wall.nrows - 1, 2 * d + axis, 1.0);
                    wall_sides.push((c, side));
                }
            }
        }

        Ok(Self {
            dofs,
            eps: eps.to_csr(),
            cell_weight,
            reg: reg.to_csr(),
            reg_weight,
            div: div.to_csr(),
            wall: wall.to_csr(),
            wall_sides,
        })
    }

    pub fn num_unknowns(&self) -> usize {
        self.dofs.len()
    }

    /// `Σ w|εv|²` on the flat active vector.
    pub fn viscous_energy(&self, x: &[f64]) -> f64 {
        let e = self.eps.mul_vec(x);
        (0..self.cell_weight.len())
            .map(|d| self.cell_weight[d] * (e[3 * d].powi(2) + e[3 * d + 1].powi(2) + e[3 * d + 2].powi(2)))
            .sum()
    }

    pub fn reg_energy(&self, x: &[f64]) -> f64 {
        let r = self.reg.mul_vec(x);
        r.iter().zip(&self.reg_weight).map(|(v, w)| w * v * v).sum()
    }

    /// Matrix `K` with `viscous_energy(x) = xᵀKx`.
    pub fn viscous_matrix(&self) -> Csr {
        weighted_gram(&self.eps, &(0..self.eps.nrows).map(|r| self.cell_weight[r / 3]).collect::<Vec<_>>())
    }

    pub fn reg_matrix(&self) -> Csr {
        weighted_gram(&self.reg, &self.reg_weight)
    }
}

/// `Aᵀ diag(w) A`.
pub fn weighted_gram(a: &Csr, w: &[f64]) -> Csr {
    let mut t = Triplets::new(a.ncols, a.ncols);
    for r in 0..a.nrows {
        let row: Vec<(usize, f64)> = a.row(r).collect();
        for &(i, vi) in &row {
            for &(j, vj) in &row {
                t.push(i, j, w[r] * vi * vj);
            }
        }
    }
    t.to_csr()
}

/// Bilinear interpolation weights from active cell centers. When the
/// surrounding 2×2 block of cell centers (clamped into the grid, so points
/// near the container walls extrapolate) is fully active the weights are
/// exact for affine fields; otherwise they are renormalized over the active
/// cells among the four nearest, falling back to the nearest active cell in
/// the surrounding 3×3 block.
pub fn interpolation_weights(grid: &FluidGrid, cls: &CellClassification, p: Vec2) -> Result<Vec<(usize, f64)>> {
    let fx = (p[0] - grid.x0) / grid.dx - 0.5;
    let fy = (p[1] - grid.y0) / grid.dy - 0.5;
    let outside = fx < -1.0 || fy < -1.0 || fx > grid.mx as f64 || fy > grid.my as f64;
    if !outside {
        let bi = (fx.floor() as isize).clamp(0, grid.mx as isize - 2) as usize;
        let bj = (fy.floor() as isize).clamp(0, grid.my as isize - 2) as usize;
        let block = [
            grid.cell_index(bi, bj),
            grid.cell_index(bi + 1, bj),
            grid.cell_index(bi, bj + 1),
            grid.cell_index(bi + 1, bj + 1),
        ];
        if block.iter().all(|&c| cls.is_active(c)) {
            let (tx, ty) = (fx - bi as f64, fy - bj as f64);
            let w = [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty];
            return Ok(block.iter().zip(w).filter(|(_, w)| *w != 0.0).map(|(&c, w)| (c, w)).collect());
        }
    }
    let i0 = fx.floor();
    let j0 = fy.floor();
    let (tx, ty) = (fx - i0, fy - j0);
    let (i0, j0) = (i0 as isize, j0 as isize);
    let mut out = Vec::with_capacity(4);
    let mut total = 0.0;
    for (di, dj, w) in [(0, 0, (1.0 - tx) * (1.0 - ty)), (1, 0, tx * (1.0 - ty)), (0, 1, (1.0 - tx) * ty), (1, 1, tx * ty)] {
        let (i, j) = (i0 + di, j0 + dj);
        if i < 0 || j < 0 || i >= grid.mx as isize || j >= grid.my as isize {
            continue;
        }
        let c = grid.cell_index(i as usize, j as usize);
        if cls.is_active(c) && w > 0.0 {
            out.push((c, w));
            total += w;
        }
    }
    if total > 1e-12 {
        for e in out.iter_mut() {
            e.1 /= total;
        }
        return Ok(out);
    }
    let ci = (((p[0] - grid.x0) / grid.dx).floor() as isize).clamp(0, grid.mx as isize - 1);
    let cj = (((p[1] - grid.y0) / grid.dy).floor() as isize).clamp(0, grid.my as isize - 1);
    let mut best: Option<(f64, usize)> = None;
    for dj in -1..=1 {
        for di in -1..=1 {
            let (i, j) = (ci + di, cj + dj);
            if i < 0 || j < 0 || i >= grid.mx as isize || j >= grid.my as isize {
                continue;
            }
            let c = grid.cell_index(i as usize, j as usize);
            if cls.is_active(c) {
                let q = grid.cell_center(c);
                let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
                if best.map_or(true, |b| d < b.0) {
                    best = Some((d, c));
                }
            }
        }
    }
    match best {
        Some((_, c)) => Ok(vec![(c, 1.0)]),
        None => Err(SimError::InterpolationOutOfDomain { x: p[0], y: p[1] }),
    }
}

/// Interpolates a cell-centered velocity at `p`.
pub fn interpolate(grid: &FluidGrid, cls: &CellClassification, v: &VelocityField, p: Vec2) -> Result<Vec2> {
    let w = interpolation_weights(grid, cls, p)?;
    let mut r = [0.0, 0.0];
    for (c, a) in w {
        r[0] += a * v.values[c][0];
        r[1] += a * v.values[c][1];
    }
    Ok(r)
}

/// Interpolation matrix (2 rows per point) onto active degrees of freedom.
pub fn interpolation_matrix(
    grid: &FluidGrid,
    cls: &CellClassification,
    dofs: &DofMap,
    points: &[Vec2],
) -> Result<Csr> {
    let mut t = Triplets::new(2 * points.len(), dofs.len());
    for (k, p) in points.iter().enumerate() {
        for (c, w) in interpolation_weights(grid, cls, *p)? {
            let d = dofs.cell_to_dof[c].expect("active");
            t.push(2 * k, 2 * d, w);
            t.push(2 * k + 1, 2 * d + 1, w);
        }
    }
    Ok(t.to_csr())
}

/// Symmetric gradient `(∇v + ∇vᵀ)/2` at every cell (zero on inactive cells).
pub fn symmetric_gradient(grid: &FluidGrid, v: &VelocityField, cls: &CellClassification) -> Result<Vec<[[f64; 2]; 2]>> {
    let ops = FluidOperators::new(grid, cls, 0)?;
    let e = ops.eps.mul_vec(&ops.dofs.gather(v));
    let mut out = vec![[[0.0; 2]; 2]; grid.num_cells()];
    let s2 = std::f64::consts::SQRT_2;
    for (d, &c) in ops.dofs.dof_to_cell.iter().enumerate() {
        let o = e[3 * d + 2] / s2;
        out[c] = [[e[3 * d], o], [o, e[3 * d + 1]]];
    }
    Ok(out)
}

/// Discrete divergence at every cell (zero on inactive cells).
pub fn divergence(grid: &FluidGrid, v: &VelocityField, cls: &CellClassification) -> Result<Vec<f64>> {
    let ops = FluidOperators::new(grid, cls, 0)?;
    let d = ops.div.mul_vec(&ops.dofs.gather(v));
    let mut out = vec![0.0; grid.num_cells()];
    for (k, &c) in ops.dofs.dof_to_cell.iter().enumerate() {
        out[c] = d[k];
    }
    Ok(out)
}

/// `ν·Σ w|εv|² + κ·Σ w|D^{k0}v|²` over active cells.
pub fn fluid_dissipation_form(
    grid: &FluidGrid,
    v: &VelocityField,
    cls: &CellClassification,
    params: &FluidParams,
) -> Result<f64> {
    let ops = FluidOperators::new(grid, cls, params.k0_order)?;
    let x = ops.dofs.gather(v);
    let mut r = params.nu * ops.viscous_energy(&x);
    if params.kappa != 0.0 {
        r += params.kappa * ops.reg_energy(&x);
    }
    Ok(r)
}

/// `(a/2)·Σ w·|b − v|²` over interface points.
pub fn slip_boundary_form(
    grid: &FluidGrid,
    v: &VelocityField,
    cls: &CellClassification,
    interface: &InterfaceGeometry,
    solid_rate_on_boundary: &[Vec2],
    params: &FluidParams,
) -> Result<f64> {
    if params.slip_coefficient == 0.0 {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (k, p) in interface.points.iter().enumerate() {
        let vi = interpolate(grid, cls, v, *p)?;
        let j = [solid_rate_on_boundary[k][0] - vi[0], solid_rate_on_boundary[k][1] - vi[1]];
        s += interface.weights[k] * (j[0] * j[0] + j[1] * j[1]);
    }
    Ok(0.5 * params.slip_coefficient * s)
}

/// Orthogonal projection (active-cell inner product) onto the kernel of
/// the discrete divergence.
pub fn project_divergence_free(grid: &FluidGrid, v: &VelocityField, cls: &CellClassification) -> Result<VelocityField> {
    let ops = FluidOperators::new(grid, cls, 0)?;
    let x = ops.dofs.gather(v);
    let y = project_kernel(&ops.div, &x, 1e-13)?;
    Ok(ops.dofs.scatter(&y, cls, v.time))
}

/// `x − Aᵀ(AAᵀ)⁺Ax`, computed with conjugate gradients on the consistent
/// semidefinite system.
pub fn project_kernel(a: &Csr, x: &[f64], rel_tol: f64) -> Result<Vec<f64>> {
    let r = a.mul_vec(x);
    let scale = max_abs(&r);
    if scale == 0.0 {
        return Ok(x.to_vec());
    }
    let at = a.transpose();
    let apply = |y: &[f64]| a.mul_vec(&at.mul_vec(y));
    let mut out = x.to_vec();
    let mut rn = scale;
    // a few restarts absorb the loss of orthogonality on long runs
    for _ in 0..4 {
        if rn <= rel_tol * scale.max(1.0) * 1e-3 {
            break;
        }
        let r = a.mul_vec(&out);
        let (y, _) = conjugate_gradient(apply, &r, rel_tol * crate::linalg::norm(&r).max(1e-300), 20 * a.nrows + 100);
        let corr = at.mul_vec(&y);
        let next: Vec<f64> = out.iter().zip(corr).map(|(o, c)| o - c).collect();
        let next_rn = max_abs(&a.mul_vec(&next));
        if next_rn >= rn {
            break;
        }
        out = next;
        rn = next_rn;
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(SimError::SingularSystem("projection produced non-finite values".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::classify_polygon;

    #[test]
    fn interior_divergence_of_linear_fields() {
        let g = FluidGrid::unit(8);
        let cls = CellClassification::all_fluid(&g);
        let v = VelocityField::from_fn(&g, &cls, |p| [p[0], p[1]]);
        let d = divergence(&g, &v, &cls).unwrap();
        for c in 0..g.num_cells() {
            let (i, j) = g.cell_ij(c);
            if i > 0 && j > 0 && i < 7 && j < 7 {
                assert!((d[c] - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interpolation_reproduces_affine_fields_inside() {
        let g = FluidGrid::unit(10);
        let sq = vec![[0.3, 0.3], [0.7, 0.3], [0.7, 0.7], [0.3, 0.7]];
        let cls = classify_polygon(&sq, &g).unwrap();
        let v = VelocityField::from_fn(&g, &cls, |p| [2.0 * p[0] - p[1], 1.0 + p[1]]);
        let r = interpolate(&g, &cls, &v, [0.12, 0.17]).unwrap();
        assert!((r[0] - (0.24 - 0.17)).abs() < 1e-12 && (r[1] - 1.17).abs() < 1e-12);
    }

    #[test]
    fn projection_kills_divergence() {
        let g = FluidGrid::unit(12);
        let cls = CellClassification::all_fluid(&g);
        let v = VelocityField::from_fn(&g, &cls, |p| [(3.0 * p[0]).sin() * p[1], p[0] * p[0]]);
        let pv = project_divergence_free(&g, &v, &cls).unwrap();
        let d = divergence(&g, &pv, &cls).unwrap();
        assert!(max_abs(&d) < 1e-8);
    }
}
