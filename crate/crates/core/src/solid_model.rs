//! Second-gradient viscoelastic solid on a structured reference grid.
//!
//! The reference body `Q` is a rectangle sampled by `nx × ny` nodes. First
//! and second derivatives use second-order difference stencils (centered in
//! the interior, one-sided on the boundary) and integrals use nodal
//! trapezoidal weights. All gradients are exact derivatives of the discrete
//! functionals.

use std::sync::{Arc, OnceLock};

use crate::error::{Result, SimError};
use crate::linalg::{Csr, Triplets};

pub type Vec2 = [f64; 2];
/// Row-major 2×2 matrix, `m[r][c]`.
pub type Mat2 = [[f64; 2]; 2];

/// Sparse weights of one derivative at one node: `(node, coefficient)`.
pub type Stencil = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
pub struct NodeStencils {
    pub dx: Stencil,
    pub dy: Stencil,
    pub dxx: Stencil,
    pub dxy: Stencil,
    pub dyy: Stencil,
}

/// Structured grid over the rectangular reference body.
#[derive(Debug, Clone)]
pub struct SolidGrid {
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    pub origin: Vec2,
    pub boundary_mask: Vec<bool>,
    /// Boundary nodes in counter-clockwise order starting at the origin corner.
    pub boundary_nodes: Vec<usize>,
    /// Unit reference normal at each entry of `boundary_nodes`, pointing into
    /// the body (from the surrounding fluid into the solid). Corner normals
    /// are the normalized average of the two adjacent sides.
    pub reference_normal: Vec<Vec2>,
    pub reference_area: f64,
    weights: Vec<f64>,
    stencils: Vec<NodeStencils>,
}

fn first_derivative_1d(n: usize, h: f64, k: usize) -> Vec<(usize, f64)> {
    if k == 0 {
        vec![(0, -1.5 / h), (1, 2.0 / h), (2, -0.5 / h)]
    } else if k == n - 1 {
        vec![(n - 3, 0.5 / h), (n - 2, -2.0 / h), (n - 1, 1.5 / h)]
    } else {
        vec![(k - 1, -0.5 / h), (k + 1, 0.5 / h)]
    }
}

fn second_derivative_1d(n: usize, h: f64, k: usize) -> Vec<(usize, f64)> {
    let s = 1.0 / (h * h);
    if k == 0 {
        vec![(0, 2.0 * s), (1, -5.0 * s), (2, 4.0 * s), (3, -s)]
    } else if k == n - 1 {
        vec![(n - 4, -s), (n - 3, 4.0 * s), (n - 2, -5.0 * s), (n - 1, 2.0 * s)]
    } else {
        vec![(k - 1, s), (k, -2.0 * s), (k + 1, s)]
    }
}

impl SolidGrid {
    /// Grid on `[origin, origin + (lx, ly)]` with `nx × ny` nodes.
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64, origin: Vec2) -> Result<Self> {
        if nx < 4 || ny < 4 {
            return Err(SimError::ValidationError(format!(
                "solid grid needs at least 4 nodes per direction, got {nx}x{ny}"
            )));
        }
        if !(lx > 0.0 && ly > 0.0) {
            return Err(SimError::ValidationError("solid extents must be positive".into()));
        }
        let hx = lx / (nx - 1) as f64;
        let hy = ly / (ny - 1) as f64;
        let idx = |i: usize, j: usize| i + nx * j;
        let mut boundary_nodes = Vec::with_capacity(2 * (nx + ny) - 4);
        for i in 0..nx {
            boundary_nodes.push(idx(i, 0));
        }
        for j in 1..ny {
            boundary_nodes.push(idx(nx - 1, j));
        }
        for i in (0..nx - 1).rev() {
            boundary_nodes.push(idx(i, ny - 1));
        }
        for j in (1..ny - 1).rev() {
            boundary_nodes.push(idx(0, j));
        }
        let mut boundary_mask = vec![false; nx * ny];
        for &b in &boundary_nodes {
            boundary_mask[b] = true;
        }
        let reference_normal = boundary_nodes
            .iter()
            .map(|&b| {
                let (i, j) = (b % nx, b / nx);
                let mut n = [0.0f64, 0.0];
                if i == 0 {
                    n[0] += 1.0;
                }
                if i == nx - 1 {
                    n[0] -= 1.0;
                }
                if j == 0 {
                    n[1] += 1.0;
                }
                if j == ny - 1 {
                    n[1] -= 1.0;
                }
                let l = (n[0] * n[0] + n[1] * n[1]).sqrt();
                [n[0] / l, n[1] / l]
            })
            .collect();
        let mut weights = vec![0.0; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let wx = if i == 0 || i == nx - 1 { 0.5 } else { 1.0 };
                let wy = if j == 0 || j == ny - 1 { 0.5 } else { 1.0 };
                weights[idx(i, j)] = hx * hy * wx * wy;
            }
        }
        let mut stencils = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let d1x = first_derivative_1d(nx, hx, i);
                let d1y = first_derivative_1d(ny, hy, j);
                let d2x = second_derivative_1d(nx, hx, i);
                let d2y = second_derivative_1d(ny, hy, j);
                let mut dxy = Vec::with_capacity(9);
                for &(b, cy) in &d1y {
                    for &(a, cx) in &d1x {
                        dxy.push((idx(a, b), cx * cy));
                    }
                }
                stencils.push(NodeStencils {
                    dx: d1x.iter().map(|&(a, c)| (idx(a, j), c)).collect(),
                    dy: d1y.iter().map(|&(b, c)| (idx(i, b), c)).collect(),
                    dxx: d2x.iter().map(|&(a, c)| (idx(a, j), c)).collect(),
                    dyy: d2y.iter().map(|&(b, c)| (idx(i, b), c)).collect(),
                    dxy,
                });
            }
        }
        Ok(Self {
            nx,
            ny,
            hx,
            hy,
            origin,
            boundary_mask,
            boundary_nodes,
            reference_normal,
            reference_area: lx * ly,
            weights,
            stencils,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.nx * j
    }

    pub fn reference_point(&self, node: usize) -> Vec2 {
        let (i, j) = (node % self.nx, node / self.nx);
        [self.origin[0] + i as f64 * self.hx, self.origin[1] + j as f64 * self.hy]
    }

    /// Nodal trapezoidal quadrature weights (sum to `reference_area`).
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn stencils(&self, node: usize) -> &NodeStencils {
        &self.stencils[node]
    }

    /// Reference length of the boundary segment from `boundary_nodes[k]` to
    /// `boundary_nodes[k + 1]` (cyclic).
    pub fn boundary_segment_length(&self, k: usize) -> f64 {
        let m = self.boundary_nodes.len();
        let a = self.reference_point(self.boundary_nodes[k]);
        let b = self.reference_point(self.boundary_nodes[(k + 1) % m]);
        ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
    }

    /// Outward reference normal of boundary segment `k` (pointing away from
    /// the body).
    pub fn segment_outer_normal(&self, k: usize) -> Vec2 {
        let m = self.boundary_nodes.len();
        let a = self.reference_point(self.boundary_nodes[k]);
        let b = self.reference_point(self.boundary_nodes[(k + 1) % m]);
        let t = [b[0] - a[0], b[1] - a[1]];
        let l = (t[0] * t[0] + t[1] * t[1]).sqrt();
        // counter-clockwise traversal: the outside lies to the right
        [t[1] / l, -t[0] / l]
    }
}

/// Symmetric positive-definite stiffness acting on strains in Mandel form
/// `(S11, S22, √2·S12)`, plus barrier and second-gradient exponents.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialParams {
    pub elastic_tensor: [[f64; 3]; 3],
    /// Exponent `a` of the determinant barrier `(det ∇η)^(-a)`.
    pub det_exponent: f64,
    /// Exponent `q` of the second-gradient term `|∇²η|^q / q`.
    pub grad2_exponent: f64,
    pub rho_s: f64,
    /// Scales the determinant barrier; 0 switches it off for surrogate studies.
    pub det_weight: f64,
    /// Scales the second-gradient term; 0 switches it off.
    pub grad2_weight: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            elastic_tensor: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            det_exponent: 5.0,
            grad2_exponent: 4.0,
            rho_s: 1.0,
            det_weight: 1.0,
            grad2_weight: 1.0,
        }
    }
}

impl MaterialParams {
    pub fn with_stiffness(mut self, c: f64) -> Self {
        self.elastic_tensor = [[c, 0.0, 0.0], [0.0, c, 0.0], [0.0, 0.0, c]];
        self
    }

    /// Strain-only energy: barrier and second-gradient terms disabled.
    pub fn strain_only(mut self) -> Self {
        self.det_weight = 0.0;
        self.grad2_weight = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.elastic_tensor;
        for r in 0..3 {
            for s in 0..3 {
                if (c[r][s] - c[s][r]).abs() > 1e-12 * (c[r][s].abs() + c[s][r].abs() + 1.0) {
                    return Err(SimError::ValidationError("elastic_tensor must be symmetric".into()));
                }
            }
        }
        let m = nalgebra::Matrix3::from_fn(|r, s| c[r][s]);
        let min_eig = m.symmetric_eigen().eigenvalues.min();
        if min_eig <= 0.0 {
            return Err(SimError::ValidationError(format!(
                "elastic_tensor must be positive definite (smallest eigenvalue {min_eig:e})"
            )));
        }
        let q = self.grad2_exponent;
        if q <= 2.0 {
            return Err(SimError::ValidationError("grad2_exponent q must exceed 2".into()));
        }
        let a_min = 2.0 * q / (q - 2.0);
        if self.det_exponent <= a_min {
            return Err(SimError::ValidationError(format!(
                "det_exponent must exceed 2q/(q-2) = {a_min}"
            )));
        }
        if self.rho_s <= 0.0 {
            return Err(SimError::ValidationError("rho_s must be positive".into()));
        }
        if self.det_weight < 0.0 || self.grad2_weight < 0.0 {
            return Err(SimError::ValidationError("energy weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// High-order regularizer `κ^{a0}·|η|²_{order}` and `κ·|b|²_{order}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerConfig {
    pub kappa: f64,
    pub a0: f64,
    pub order: usize,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self { kappa: 0.0, a0: 1.0, order: 3 }
    }
}

impl RegularizerConfig {
    /// The prefactor `κ^{a0}` of the energy regularizer.
    pub fn energy_weight(&self) -> f64 {
        if self.kappa == 0.0 {
            0.0
        } else {
            self.kappa.powf(self.a0)
        }
    }
}

/// Nodal positions of the deformation on a shared grid.
#[derive(Debug, Clone)]
pub struct DeformationField {
    pub grid: Arc<SolidGrid>,
    positions: Vec<Vec2>,
    cached_grad: OnceLock<Vec<Mat2>>,
}

impl DeformationField {
    pub fn new(grid: Arc<SolidGrid>, positions: Vec<Vec2>) -> Self {
        assert_eq!(positions.len(), grid.num_nodes());
        Self { grid, positions, cached_grad: OnceLock::new() }
    }

    pub fn identity(grid: Arc<SolidGrid>) -> Self {
        let p = (0..grid.num_nodes()).map(|k| grid.reference_point(k)).collect();
        Self::new(grid, p)
    }

    /// `x ↦ map(x)` evaluated at every reference node.
    pub fn from_map(grid: Arc<SolidGrid>, map: impl Fn(Vec2) -> Vec2) -> Self {
        let p = (0..grid.num_nodes()).map(|k| map(grid.reference_point(k))).collect();
        Self::new(grid, p)
    }

    pub fn positions(&self) -> &[Vec2] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [Vec2] {
        self.cached_grad = OnceLock::new();
        &mut self.positions
    }

    pub fn into_positions(self) -> Vec<Vec2> {
        self.positions
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.positions)
    }

    pub fn from_flat(grid: Arc<SolidGrid>, x: &[f64]) -> Self {
        Self::new(grid, unflatten(x))
    }

    /// Stencil gradient `∇η` at every node (cached).
    pub fn gradients(&self) -> &[Mat2] {
        self.cached_grad.get_or_init(|| {
            (0..self.grid.num_nodes()).map(|k| nodal_gradient(&self.grid, &self.positions, k)).collect()
        })
    }

    /// Smallest nodal `det ∇η`.
    pub fn min_det(&self) -> f64 {
        self.gradients().iter().map(det2).fold(f64::INFINITY, f64::min)
    }

    pub fn check_admissible(&self) -> Result<()> {
        for (k, f) in self.gradients().iter().enumerate() {
            let d = det2(f);
            if !(d > 0.0) {
                return Err(SimError::DegenerateJacobian { node: k, det: d });
            }
        }
        Ok(())
    }

    /// Checks that every image point lies in the box `[lo, hi]`.
    pub fn inside_box(&self, lo: Vec2, hi: Vec2) -> bool {
        self.positions.iter().all(|p| p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1])
    }
}

pub fn flatten(v: &[Vec2]) -> Vec<f64> {
    v.iter().flat_map(|p| [p[0], p[1]]).collect()
}

pub fn unflatten(x: &[f64]) -> Vec<Vec2> {
    x.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

#[inline]
pub fn det2(f: &Mat2) -> f64 {
    f[0][0] * f[1][1] - f[0][1] * f[1][0]
}

/// Cofactor matrix `det(F)·F^{-T}`.
#[inline]
pub fn cof2(f: &Mat2) -> Mat2 {
    [[f[1][1], -f[1][0]], [-f[0][1], f[0][0]]]
}

fn apply_stencil(st: &Stencil, field: &[Vec2]) -> Vec2 {
    let mut r = [0.0, 0.0];
    for &(n, c) in st {
        r[0] += c * field[n][0];
        r[1] += c * field[n][1];
    }
    r
}

/// `∇η` at a node: `F[c][d] = ∂_d η_c`.
pub fn nodal_gradient(grid: &SolidGrid, field: &[Vec2], node: usize) -> Mat2 {
    let st = grid.stencils(node);
    let gx = apply_stencil(&st.dx, field);
    let gy = apply_stencil(&st.dy, field);
    [[gx[0], gy[0]], [gx[1], gy[1]]]
}

/// Second derivatives at a node ordered `(xx₁, xy₁, yy₁, xx₂, xy₂, yy₂)`.
pub fn nodal_hessian(grid: &SolidGrid, field: &[Vec2], node: usize) -> [f64; 6] {
    let st = grid.stencils(node);
    let xx = apply_stencil(&st.dxx, field);
    let xy = apply_stencil(&st.dxy, field);
    let yy = apply_stencil(&st.dyy, field);
    [xx[0], xy[0], yy[0], xx[1], xy[1], yy[1]]
}

const GRAD2_METRIC: [f64; 6] = [1.0, 2.0, 1.0, 1.0, 2.0, 1.0];

/// Mandel vector of a symmetric 2×2 matrix.
#[inline]
fn mandel(s: &Mat2) -> [f64; 3] {
    [s[0][0], s[1][1], std::f64::consts::SQRT_2 * s[0][1]]
}

#[inline]
fn from_mandel(v: [f64; 3]) -> Mat2 {
    let o = v[2] / std::f64::consts::SQRT_2;
    [[v[0], o], [o, v[1]]]
}

#[inline]
fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut c = [[0.0; 2]; 2];
    for r in 0..2 {
        for s in 0..2 {
            c[r][s] = a[r][0] * b[0][s] + a[r][1] * b[1][s];
        }
    }
    c
}

#[inline]
fn transpose(a: &Mat2) -> Mat2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

fn mat_vec3(c: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        c[0][0] * v[0] + c[0][1] * v[1] + c[0][2] * v[2],
        c[1][0] * v[0] + c[1][1] * v[1] + c[1][2] * v[2],
        c[2][0] * v[0] + c[2][1] * v[1] + c[2][2] * v[2],
    ]
}

/// Green–St-Venant-type strain `FᵀF − I`.
#[inline]
pub fn strain(f: &Mat2) -> Mat2 {
    let mut s = mat_mul(&transpose(f), f);
    s[0][0] -= 1.0;
    s[1][1] -= 1.0;
    s
}

/// Strain density `(1/8)·s·C·s` with `s` the Mandel form of `FᵀF − I`.
pub fn strain_density(mat: &MaterialParams, f: &Mat2) -> f64 {
    let s = mandel(&strain(f));
    let cs = mat_vec3(&mat.elastic_tensor, s);
    0.125 * (s[0] * cs[0] + s[1] * cs[1] + s[2] * cs[2])
}

/// `∂/∂F` of the strain density: `½·F·T` with `T` the tensor form of `C·s`.
pub fn strain_stress(mat: &MaterialParams, f: &Mat2) -> Mat2 {
    let t = from_mandel(mat_vec3(&mat.elastic_tensor, mandel(&strain(f))));
    let ft = mat_mul(f, &t);
    [[0.5 * ft[0][0], 0.5 * ft[0][1]], [0.5 * ft[1][0], 0.5 * ft[1][1]]]
}

pub fn det_density(mat: &MaterialParams, f: &Mat2) -> f64 {
    mat.det_weight * det2(f).powf(-mat.det_exponent)
}

pub fn det_stress(mat: &MaterialParams, f: &Mat2) -> Mat2 {
    let a = mat.det_exponent;
    let j = det2(f);
    let s = -mat.det_weight * a * j.powf(-a - 1.0);
    let c = cof2(f);
    [[s * c[0][0], s * c[0][1]], [s * c[1][0], s * c[1][1]]]
}

fn grad2_metric_norm(z: &[f64; 6]) -> f64 {
    (0..6).map(|t| GRAD2_METRIC[t] * z[t] * z[t]).sum()
}

pub fn grad2_density(mat: &MaterialParams, z: &[f64; 6]) -> f64 {
    if mat.grad2_weight == 0.0 {
        return 0.0;
    }
    let q = mat.grad2_exponent;
    mat.grad2_weight * grad2_metric_norm(z).powf(0.5 * q) / q
}

/// `∂/∂(∇²η)` of the second-gradient density.
pub fn grad2_stress(mat: &MaterialParams, z: &[f64; 6]) -> [f64; 6] {
    let m = grad2_metric_norm(z);
    if mat.grad2_weight == 0.0 || m == 0.0 {
        return [0.0; 6];
    }
    let s = mat.grad2_weight * m.powf(0.5 * mat.grad2_exponent - 1.0);
    std::array::from_fn(|t| s * GRAD2_METRIC[t] * z[t])
}

#[inline]
fn flat4(m: &Mat2) -> [f64; 4] {
    [m[0][0], m[0][1], m[1][0], m[1][1]]
}

#[inline]
fn unflat4(v: [f64; 4]) -> Mat2 {
    [[v[0], v[1]], [v[2], v[3]]]
}

/// Exact Hessian of strain + barrier densities with respect to
/// `(F11, F12, F21, F22)`.
pub fn first_order_density_hessian(mat: &MaterialParams, f: &Mat2) -> [[f64; 4]; 4] {
    let t = from_mandel(mat_vec3(&mat.elastic_tensor, mandel(&strain(f))));
    let a = mat.det_exponent;
    let j = det2(f);
    let cof = flat4(&cof2(f));
    let mut h = [[0.0; 4]; 4];
    for k in 0..4 {
        let mut e = [0.0; 4];
        e[k] = 1.0;
        let em = unflat4(e);
        // dS = EᵀF + FᵀE, dT = tensor(C · mandel(dS))
        let ds = {
            let a1 = mat_mul(&transpose(&em), f);
            let a2 = mat_mul(&transpose(f), &em);
            [[a1[0][0] + a2[0][0], a1[0][1] + a2[0][1]], [a1[1][0] + a2[1][0], a1[1][1] + a2[1][1]]]
        };
        let dt = from_mandel(mat_vec3(&mat.elastic_tensor, mandel(&ds)));
        let p1 = mat_mul(&em, &t);
        let p2 = mat_mul(f, &dt);
        let strain_col = [
            0.5 * (p1[0][0] + p2[0][0]),
            0.5 * (p1[0][1] + p2[0][1]),
            0.5 * (p1[1][0] + p2[1][0]),
            0.5 * (p1[1][1] + p2[1][1]),
        ];
        let cof_e = flat4(&cof2(&em));
        let cof_dot_e = cof[k];
        for r in 0..4 {
            let det_col = if mat.det_weight == 0.0 {
                0.0
            } else {
                mat.det_weight
                    * (a * (a + 1.0) * j.powf(-a - 2.0) * cof_dot_e * cof[r] - a * j.powf(-a - 1.0) * cof_e[r])
            };
            h[r][k] = strain_col[r] + det_col;
        }
    }
    h
}

/// Exact Hessian of the second-gradient density in `z`.
pub fn grad2_density_hessian(mat: &MaterialParams, z: &[f64; 6]) -> [[f64; 6]; 6] {
    let mut h = [[0.0; 6]; 6];
    let m = grad2_metric_norm(z);
    if mat.grad2_weight == 0.0 || m == 0.0 {
        return h;
    }
    let q = mat.grad2_exponent;
    let s1 = mat.grad2_weight * m.powf(0.5 * q - 1.0);
    let s2 = mat.grad2_weight * (q - 2.0) * m.powf(0.5 * q - 2.0);
    let wz: [f64; 6] = std::array::from_fn(|t| GRAD2_METRIC[t] * z[t]);
    for r in 0..6 {
        for c in 0..6 {
            h[r][c] = s2 * wz[r] * wz[c];
        }
        h[r][r] += s1 * GRAD2_METRIC[r];
    }
    h
}

/// Per-term breakdown of the discrete energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub strain_term: f64,
    pub det_term: f64,
    pub grad2_term: f64,
    pub regularizer_term: f64,
    pub total: f64,
}

/// Discrete elastic energy with the high-order regularizer.
pub fn eval_energy(eta: &DeformationField, mat: &MaterialParams, reg: &RegularizerConfig) -> Result<EnergyBreakdown> {
    eta.check_admissible()?;
    let grid = &*eta.grid;
    let w = grid.weights();
    let grads = eta.gradients();
    let (mut es, mut ed, mut eg) = (0.0, 0.0, 0.0);
    for k in 0..grid.num_nodes() {
        let f = &grads[k];
        es += w[k] * strain_density(mat, f);
        ed += w[k] * det_density(mat, f);
        if mat.grad2_weight != 0.0 {
            eg += w[k] * grad2_density(mat, &nodal_hessian(grid, eta.positions(), k));
        }
    }
    let rw = reg.energy_weight();
    let er = if rw == 0.0 { 0.0 } else { rw * reg_seminorm_sq(grid, reg.order, eta.positions()) };
    Ok(EnergyBreakdown { strain_term: es, det_term: ed, grad2_term: eg, regularizer_term: er, total: es + ed + eg + er })
}

fn scatter(st: &Stencil, coef: Vec2, out: &mut [Vec2]) {
    for &(n, c) in st {
        out[n][0] += c * coef[0];
        out[n][1] += c * coef[1];
    }
}

/// Exact gradient of [`eval_energy`] with respect to nodal positions.
pub fn energy_gradient(eta: &DeformationField, mat: &MaterialParams, reg: &RegularizerConfig) -> Result<Vec<Vec2>> {
    eta.check_admissible()?;
    let grid = &*eta.grid;
    let w = grid.weights();
    let grads = eta.gradients();
    let mut g = vec![[0.0; 2]; grid.num_nodes()];
    for k in 0..grid.num_nodes() {
        let f = &grads[k];
        let ps = strain_stress(mat, f);
        let pd = if mat.det_weight == 0.0 { [[0.0; 2]; 2] } else { det_stress(mat, f) };
        let p = [[w[k] * (ps[0][0] + pd[0][0]), w[k] * (ps[0][1] + pd[0][1])], [
            w[k] * (ps[1][0] + pd[1][0]),
            w[k] * (ps[1][1] + pd[1][1]),
        ]];
        let st = grid.stencils(k);
        scatter(&st.dx, [p[0][0], p[1][0]], &mut g);
        scatter(&st.dy, [p[0][1], p[1][1]], &mut g);
        if mat.grad2_weight != 0.0 {
            let z = nodal_hessian(grid, eta.positions(), k);
            let s = grad2_stress(mat, &z);
            scatter(&st.dxx, [w[k] * s[0], w[k] * s[3]], &mut g);
            scatter(&st.dxy, [w[k] * s[1], w[k] * s[4]], &mut g);
            scatter(&st.dyy, [w[k] * s[2], w[k] * s[5]], &mut g);
        }
    }
    let rw = reg.energy_weight();
    if rw != 0.0 {
        let rg = reg_seminorm_gradient(grid, reg.order, eta.positions());
        for (gi, ri) in g.iter_mut().zip(rg) {
            gi[0] += rw * ri[0];
            gi[1] += rw * ri[1];
        }
    }
    Ok(g)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Forward-difference blocks of total order `order`: for each split
/// `(a, b)` with `a + b = order`, its multiplicity and the per-node weights
/// of `Δx^a Δy^b / (hx^a hy^b)` over an `(a+1) × (b+1)` block.
fn reg_blocks(grid: &SolidGrid, order: usize) -> Vec<(usize, usize, f64, Vec<(usize, usize, f64)>)> {
    let mut out = Vec::new();
    for a in 0..=order {
        let b = order - a;
        if a + 1 > grid.nx || b + 1 > grid.ny {
            continue;
        }
        let mult = binomial(order, a);
        let mut coeffs = Vec::new();
        let sx = grid.hx.powi(a as i32);
        let sy = grid.hy.powi(b as i32);
        for m in 0..=a {
            for l in 0..=b {
                let cx = binomial(a, m) * if (a - m) % 2 == 0 { 1.0 } else { -1.0 };
                let cy = binomial(b, l) * if (b - l) % 2 == 0 { 1.0 } else { -1.0 };
                coeffs.push((m, l, cx * cy / (sx * sy)));
            }
        }
        out.push((a, b, mult, coeffs));
    }
    out
}

/// Discrete seminorm `Σ_{a+b=k} C(k,a) Σ_blocks hx·hy·|Δx^a Δy^b u|²` of a
/// vector field on the grid.
pub fn reg_seminorm_sq(grid: &SolidGrid, order: usize, u: &[Vec2]) -> f64 {
    let area = grid.hx * grid.hy;
    let mut total = 0.0;
    for (a, b, mult, coeffs) in reg_blocks(grid, order) {
        for j in 0..grid.ny - b {
            for i in 0..grid.nx - a {
                let mut d = [0.0, 0.0];
                for &(m, l, c) in &coeffs {
                    let p = u[grid.index(i + m, j + l)];
                    d[0] += c * p[0];
                    d[1] += c * p[1];
                }
                total += mult * area * (d[0] * d[0] + d[1] * d[1]);
            }
        }
    }
    total
}

pub fn reg_seminorm_gradient(grid: &SolidGrid, order: usize, u: &[Vec2]) -> Vec<Vec2> {
    let area = grid.hx * grid.hy;
    let mut g = vec![[0.0; 2]; u.len()];
    for (a, b, mult, coeffs) in reg_blocks(grid, order) {
        for j in 0..grid.ny - b {
            for i in 0..grid.nx - a {
                let mut d = [0.0, 0.0];
                for &(m, l, c) in &coeffs {
                    let p = u[grid.index(i + m, j + l)];
                    d[0] += c * p[0];
                    d[1] += c * p[1];
                }
                let s = 2.0 * mult * area;
                for &(m, l, c) in &coeffs {
                    let n = grid.index(i + m, j + l);
                    g[n][0] += s * c * d[0];
                    g[n][1] += s * c * d[1];
                }
            }
        }
    }
    g
}

/// Scalar matrix `M` with `reg_seminorm_sq(u) = Σ_c u_cᵀ M u_c`.
pub fn reg_matrix(grid: &SolidGrid, order: usize) -> Csr {
    let n = grid.num_nodes();
    let area = grid.hx * grid.hy;
    let mut t = Triplets::new(n, n);
    for (a, b, mult, coeffs) in reg_blocks(grid, order) {
        for j in 0..grid.ny - b {
            for i in 0..grid.nx - a {
                for &(m1, l1, c1) in &coeffs {
                    let n1 = grid.index(i + m1, j + l1);
                    for &(m2, l2, c2) in &coeffs {
                        t.push(n1, grid.index(i + m2, j + l2), mult * area * c1 * c2);
                    }
                }
            }
        }
    }
    t.to_csr()
}

fn sym_rate(g: &Mat2, f: &Mat2) -> Mat2 {
    let a = mat_mul(&transpose(g), f);
    [[2.0 * a[0][0], a[0][1] + a[1][0]], [a[1][0] + a[0][1], 2.0 * a[1][1]]]
}

/// Discrete dissipation `Σ w·|∇bᵀ∇η + ∇ηᵀ∇b|² + κ·|b|²_{order}`.
pub fn eval_dissipation(
    eta_anchor: &DeformationField,
    rate: &[Vec2],
    _mat: &MaterialParams,
    reg: &RegularizerConfig,
) -> Result<f64> {
    let grid = &*eta_anchor.grid;
    check_shape(grid, rate)?;
    let w = grid.weights();
    let grads = eta_anchor.gradients();
    let mut r = 0.0;
    for k in 0..grid.num_nodes() {
        let gb = nodal_gradient(grid, rate, k);
        let m = sym_rate(&gb, &grads[k]);
        r += w[k] * (m[0][0] * m[0][0] + m[0][1] * m[0][1] + m[1][0] * m[1][0] + m[1][1] * m[1][1]);
    }
    if reg.kappa != 0.0 {
        r += reg.kappa * reg_seminorm_sq(grid, reg.order, rate);
    }
    Ok(r)
}

fn check_shape(grid: &SolidGrid, rate: &[Vec2]) -> Result<()> {
    if rate.len() != grid.num_nodes() {
        return Err(SimError::ValidationError(format!(
            "rate field has {} nodes, grid has {}",
            rate.len(),
            grid.num_nodes()
        )));
    }
    Ok(())
}

/// Gradient of [`eval_dissipation`] in the rate.
pub fn dissipation_gradient(
    eta_anchor: &DeformationField,
    rate: &[Vec2],
    _mat: &MaterialParams,
    reg: &RegularizerConfig,
) -> Result<Vec<Vec2>> {
    let grid = &*eta_anchor.grid;
    check_shape(grid, rate)?;
    let w = grid.weights();
    let grads = eta_anchor.gradients();
    let mut g = vec![[0.0; 2]; grid.num_nodes()];
    for k in 0..grid.num_nodes() {
        let f = &grads[k];
        let gb = nodal_gradient(grid, rate, k);
        let m = sym_rate(&gb, f);
        let fm = mat_mul(f, &m);
        let s = 4.0 * w[k];
        let st = grid.stencils(k);
        scatter(&st.dx, [s * fm[0][0], s * fm[1][0]], &mut g);
        scatter(&st.dy, [s * fm[0][1], s * fm[1][1]], &mut g);
    }
    if reg.kappa != 0.0 {
        let rg = reg_seminorm_gradient(grid, reg.order, rate);
        for (gi, ri) in g.iter_mut().zip(rg) {
            gi[0] += reg.kappa * ri[0];
            gi[1] += reg.kappa * ri[1];
        }
    }
    Ok(g)
}

/// Symmetric matrix `P` on flat rate vectors with
/// `Σ w·|∇bᵀ∇η + ∇ηᵀ∇b|² = bᵀ P b` (regularizer excluded).
pub fn dissipation_matrix(eta_anchor: &DeformationField) -> Csr {
    let grid = &*eta_anchor.grid;
    let n = grid.num_nodes();
    let w = grid.weights();
    let grads = eta_anchor.gradients();
    let mut t = Triplets::new(2 * n, 2 * n);
    for k in 0..n {
        let f = &grads[k];
        // M(G) for the four unit G; |M|² = gᵀ K g
        let cols: [Mat2; 4] = std::array::from_fn(|q| sym_rate(&unflat4(std::array::from_fn(|r| (r == q) as u8 as f64)), f));
        let mut kmat = [[0.0; 4]; 4];
        for p in 0..4 {
            for q in 0..4 {
                let (a, b) = (&cols[p], &cols[q]);
                kmat[p][q] = a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1];
            }
        }
        let st = grid.stencils(k);
        // G entry p = (component c, direction d) ↦ stencil on dof 2·node + c
        let ent: [(&Stencil, usize); 4] = [(&st.dx, 0), (&st.dy, 0), (&st.dx, 1), (&st.dy, 1)];
        for p in 0..4 {
            for q in 0..4 {
                let kv = w[k] * kmat[p][q];
                if kv == 0.0 {
                    continue;
                }
                for &(n1, c1) in ent[p].0 {
                    for &(n2, c2) in ent[q].0 {
                        t.push(2 * n1 + ent[p].1, 2 * n2 + ent[q].1, kv * c1 * c2);
                    }
                }
            }
        }
    }
    t.to_csr()
}

/// `DE(η₁)⟨η₁−η₀⟩ − E(η₁) + E(η₀) + c1·‖∇η₁ − ∇η₀‖²`.
pub fn check_nonconvexity_estimate(
    eta1: &DeformationField,
    eta0: &DeformationField,
    mat: &MaterialParams,
    reg: &RegularizerConfig,
    c1: f64,
) -> Result<f64> {
    let e1 = eval_energy(eta1, mat, reg)?.total;
    let e0 = eval_energy(eta0, mat, reg)?.total;
    let g1 = energy_gradient(eta1, mat, reg)?;
    let de: f64 = g1
        .iter()
        .zip(eta1.positions().iter().zip(eta0.positions()))
        .map(|(g, (p1, p0))| g[0] * (p1[0] - p0[0]) + g[1] * (p1[1] - p0[1]))
        .sum();
    let w = eta1.grid.weights();
    let (f1, f0) = (eta1.gradients(), eta0.gradients());
    let dist: f64 = (0..w.len())
        .map(|k| {
            let mut s = 0.0;
            for r in 0..2 {
                for c in 0..2 {
                    s += (f1[k][r][c] - f0[k][r][c]).powi(2);
                }
            }
            w[k] * s
        })
        .sum();
    Ok(de - e1 + e0 + c1 * dist)
}

/// Smallest generalized eigenvalue of `(mass + R-form)` against the discrete
/// `W^{1,2}` form `mass + Σ w|∇b|²` at the anchor `η`: a discrete Korn
/// constant. Dense, intended for small grids.
pub fn korn_constant(eta: &DeformationField) -> f64 {
    let grid = &*eta.grid;
    let n = grid.num_nodes();
    let w = grid.weights();
    let p = dissipation_matrix(eta).dense();
    let mut a = nalgebra::DMatrix::<f64>::zeros(2 * n, 2 * n);
    let mut b = nalgebra::DMatrix::<f64>::zeros(2 * n, 2 * n);
    for r in 0..2 * n {
        for c in 0..2 * n {
            a[(r, c)] = p[r][c];
        }
        a[(r, r)] += w[r / 2];
        b[(r, r)] += w[r / 2];
    }
    for k in 0..n {
        let st = grid.stencils(k);
        for comp in 0..2 {
            for d in [&st.dx, &st.dy] {
                for &(n1, c1) in d {
                    for &(n2, c2) in d {
                        b[(2 * n1 + comp, 2 * n2 + comp)] += w[k] * c1 * c2;
                    }
                }
            }
        }
    }
    let l = b.cholesky().expect("W^{1,2} form is positive definite").l();
    let linv = l.clone().try_inverse().expect("invertible factor");
    let c = &linv * a * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    c.symmetric_eigen().eigenvalues.min()
}

/// Stretch `λ` at which the uniform dilation `F = λI` is stationary for the
/// strain + barrier density. For isotropic stiffness this state is
/// stress-free.
pub fn stress_free_stretch(mat: &MaterialParams) -> f64 {
    let c = &mat.elastic_tensor;
    let csum = c[0][0] + c[0][1] + c[1][0] + c[1][1];
    let a = mat.det_exponent;
    let dw = mat.det_weight;
    let de = |l: f64| 0.5 * (l * l - 1.0) * l * csum - 2.0 * a * dw * l.powf(-2.0 * a - 1.0);
    if dw == 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (1.0, 2.0);
    while de(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if de(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Window-indexed accumulator for nodal Hessians: every node couples only to
/// nodes within `radius` grid steps, so entries live at fixed offsets.
#[derive(Debug, Clone)]
pub struct WindowMatrix {
    nx: usize,
    ny: usize,
    radius: usize,
    width: usize,
    data: Vec<f64>,
}

impl WindowMatrix {
    pub fn new(grid: &SolidGrid, radius: usize) -> Self {
        let width = 2 * radius + 1;
        Self { nx: grid.nx, ny: grid.ny, radius, width, data: vec![0.0; grid.num_nodes() * width * width * 4] }
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    fn slot(&self, n1: usize, c1: usize, n2: usize, c2: usize) -> usize {
        let (i1, j1) = ((n1 % self.nx) as isize, (n1 / self.nx) as isize);
        let (i2, j2) = ((n2 % self.nx) as isize, (n2 / self.nx) as isize);
        let r = self.radius as isize;
        let di = i2 - i1 + r;
        let dj = j2 - j1 + r;
        debug_assert!(di >= 0 && dj >= 0 && (di as usize) < self.width && (dj as usize) < self.width);
        ((n1 * self.width + dj as usize) * self.width + di as usize) * 4 + 2 * c1 + c2
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, v: f64) {
        let s = self.slot(row / 2, row % 2, col / 2, col % 2);
        self.data[s] += v;
    }

    pub fn add_csr(&mut self, m: &Csr, scale: f64) {
        for r in 0..m.nrows {
            for (c, v) in m.row(r) {
                self.add(r, c, scale * v);
            }
        }
    }

    /// Adds `scale·M ⊗ I₂` for a scalar nodal matrix `M`.
    pub fn add_scalar_csr(&mut self, m: &Csr, scale: f64) {
        for r in 0..m.nrows {
            for (c, v) in m.row(r) {
                self.add(2 * r, 2 * c, scale * v);
                self.add(2 * r + 1, 2 * c + 1, scale * v);
            }
        }
    }

    pub fn add_diag(&mut self, dof: usize, v: f64) {
        self.add(dof, dof, v);
    }

    pub fn to_triplets(&self) -> Triplets {
        let n = self.nx * self.ny;
        let mut t = Triplets::new(2 * n, 2 * n);
        let r = self.radius as isize;
        for n1 in 0..n {
            let (i1, j1) = ((n1 % self.nx) as isize, (n1 / self.nx) as isize);
            for dj in 0..self.width {
                let j2 = j1 + dj as isize - r;
                if j2 < 0 || j2 >= self.ny as isize {
                    continue;
                }
                for di in 0..self.width {
                    let i2 = i1 + di as isize - r;
                    if i2 < 0 || i2 >= self.nx as isize {
                        continue;
                    }
                    let n2 = i2 as usize + self.nx * j2 as usize;
                    let base = ((n1 * self.width + dj) * self.width + di) * 4;
                    for c1 in 0..2 {
                        for c2 in 0..2 {
                            t.push(2 * n1 + c1, 2 * n2 + c2, self.data[base + 2 * c1 + c2]);
                        }
                    }
                }
            }
        }
        t
    }
}

fn project_psd(h: [[f64; 4]; 4]) -> nalgebra::Matrix4<f64> {
    let m = nalgebra::Matrix4::from_fn(|r, c| 0.5 * (h[r][c] + h[c][r]));
    let eig = m.symmetric_eigen();
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    &eig.eigenvectors * nalgebra::Matrix4::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Adds the positive-semidefinite projection of the energy Hessian (strain,
/// barrier and second-gradient terms, each node's local block clamped
/// separately) into `out`. The regularizer is quadratic and handled by
/// [`reg_matrix`].
pub fn accumulate_energy_hessian_psd(eta: &DeformationField, mat: &MaterialParams, out: &mut WindowMatrix) {
    let grid = &*eta.grid;
    let w = grid.weights();
    let grads = eta.gradients();
    for k in 0..grid.num_nodes() {
        let st = grid.stencils(k);
        let h4 = project_psd(first_order_density_hessian(mat, &grads[k]));
        let ent4: [(&Stencil, usize); 4] = [(&st.dx, 0), (&st.dy, 0), (&st.dx, 1), (&st.dy, 1)];
        for p in 0..4 {
            for q in 0..4 {
                let kv = w[k] * h4[(p, q)];
                if kv == 0.0 {
                    continue;
                }
                for &(n1, c1) in ent4[p].0 {
                    for &(n2, c2) in ent4[q].0 {
                        out.add(2 * n1 + ent4[p].1, 2 * n2 + ent4[q].1, kv * c1 * c2);
                    }
                }
            }
        }
        if mat.grad2_weight != 0.0 {
            let z = nodal_hessian(grid, eta.positions(), k);
            let h6 = grad2_density_hessian(mat, &z);
            let ent6: [(&Stencil, usize); 6] =
                [(&st.dxx, 0), (&st.dxy, 0), (&st.dyy, 0), (&st.dxx, 1), (&st.dxy, 1), (&st.dyy, 1)];
            for p in 0..6 {
                for q in 0..6 {
                    let kv = w[k] * h6[p][q];
                    if kv == 0.0 {
                        continue;
                    }
                    for &(n1, c1) in ent6[p].0 {
                        for &(n2, c2) in ent6[q].0 {
                            out.add(2 * n1 + ent6[p].1, 2 * n2 + ent6[q].1, kv * c1 * c2);
                        }
                    }
                }
            }
        }
    }
}

/// Stencil reach needed by [`WindowMatrix`] for the solid operators.
pub fn hessian_radius(order: usize) -> usize {
    order.max(3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(n: usize) -> Arc<SolidGrid> {
        Arc::new(SolidGrid::new(n, n, 1.0, 1.0, [0.0, 0.0]).unwrap())
    }

    #[test]
    fn weights_sum_to_area() {
        let g = SolidGrid::new(7, 5, 2.0, 0.5, [0.1, 0.2]).unwrap();
        let s: f64 = g.weights().iter().sum();
        assert!((s - 1.0).abs() < 1e-14);
        assert_eq!(g.boundary_nodes.len(), 2 * (7 + 5) - 4);
    }

    #[test]
    fn stencils_are_exact_on_cubics() {
        let g = unit_grid(6);
        let f = |p: Vec2| [p[0].powi(3) + p[0] * p[1], p[1].powi(2) * p[0]];
        let eta = DeformationField::from_map(Arc::new(g.as_ref().clone()), f);
        for k in 0..g.num_nodes() {
            let [x, y] = g.reference_point(k);
            let z = nodal_hessian(&g, eta.positions(), k);
            // xx of x³+xy is 6x; cubic boundary second differences are exact
            assert!((z[0] - 6.0 * x).abs() < 1e-9, "{} vs {}", z[0], 6.0 * x);
            assert!((z[1] - 1.0).abs() < 1e-9);
            assert!((z[5] - 2.0 * x).abs() < 1e-9);
            assert!((z[4] - 2.0 * y).abs() < 1e-9);
        }
    }

    #[test]
    fn too_small_grid_is_rejected() {
        assert!(SolidGrid::new(3, 8, 1.0, 1.0, [0.0, 0.0]).is_err());
    }

    #[test]
    fn density_hessian_matches_gradient_differences() {
        let mat = MaterialParams::default().with_stiffness(3.0);
        let f: Mat2 = [[1.1, 0.2], [-0.1, 0.9]];
        let h = first_order_density_hessian(&mat, &f);
        let eps = 1e-6;
        for k in 0..4 {
            let mut fp = flat4(&f);
            let mut fm = flat4(&f);
            fp[k] += eps;
            fm[k] -= eps;
            let sp = flat4(&strain_stress(&mat, &unflat4(fp)));
            let dp = flat4(&det_stress(&mat, &unflat4(fp)));
            let sm = flat4(&strain_stress(&mat, &unflat4(fm)));
            let dm = flat4(&det_stress(&mat, &unflat4(fm)));
            for r in 0..4 {
                let fd = (sp[r] + dp[r] - sm[r] - dm[r]) / (2.0 * eps);
                assert!((fd - h[r][k]).abs() < 1e-5 * (1.0 + fd.abs()), "{r},{k}: {fd} vs {}", h[r][k]);
            }
        }
    }

    #[test]
    fn stress_free_stretch_zeroes_nodal_stress() {
        let mat = MaterialParams::default().with_stiffness(10.0);
        let l = stress_free_stretch(&mat);
        let f = [[l, 0.0], [0.0, l]];
        let p = strain_stress(&mat, &f);
        let d = det_stress(&mat, &f);
        for r in 0..2 {
            for c in 0..2 {
                assert!((p[r][c] + d[r][c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn window_matrix_round_trips_dissipation_matrix() {
        let g = unit_grid(6);
        let eta = DeformationField::from_map(g.clone(), |p| [p[0] + 0.1 * p[1], p[1]]);
        let p = dissipation_matrix(&eta);
        let mut w = WindowMatrix::new(&g, hessian_radius(3));
        w.add_csr(&p, 1.0);
        let back = w.to_triplets().to_csr();
        let x: Vec<f64> = (0..p.ncols).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = p.mul_vec(&x);
        let b = back.mul_vec(&x);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12 * (1.0 + u.abs()));
        }
    }
}
