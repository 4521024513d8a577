//! Deformed-interface geometry and domain bookkeeping on the background grid.

use crate::error::{Result, SimError};
use crate::fluid_model::FluidGrid;
use crate::solid_model::{cof2, DeformationField, Vec2};

/// Image of the reference boundary with cofactor normals and surface weights.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceGeometry {
    /// Images of the boundary nodes, counter-clockwise.
    pub points: Vec<Vec2>,
    /// Unit normals pointing from the fluid into the solid.
    pub normals: Vec<Vec2>,
    /// Normals rotated by +90°.
    pub tangents: Vec<Vec2>,
    /// Surface-measure weights; each point receives half of each adjacent
    /// segment's weight.
    pub weights: Vec<f64>,
    /// Solid node index of each point.
    pub nodes: Vec<usize>,
}

impl InterfaceGeometry {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[inline]
fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
fn norm(a: Vec2) -> f64 {
    dot(a, a).sqrt()
}

fn mat_vec(m: &[[f64; 2]; 2], v: Vec2) -> Vec2 {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

/// Builds the deformed interface from the boundary nodes of `eta`.
pub fn build_interface(eta: &DeformationField) -> Result<InterfaceGeometry> {
    eta.check_admissible()?;
    let grid = &*eta.grid;
    let grads = eta.gradients();
    let pos = eta.positions();
    let m = grid.boundary_nodes.len();
    let mut points = Vec::with_capacity(m);
    let mut normals = Vec::with_capacity(m);
    let mut tangents = Vec::with_capacity(m);
    for (k, &node) in grid.boundary_nodes.iter().enumerate() {
        points.push(pos[node]);
        let c = cof2(&grads[node]);
        let n = mat_vec(&c, grid.reference_normal[k]);
        let l = norm(n);
        let n = [n[0] / l, n[1] / l];
        normals.push(n);
        tangents.push([-n[1], n[0]]);
    }
    let mut weights = vec![0.0; m];
    for k in 0..m {
        let (a, b) = (grid.boundary_nodes[k], grid.boundary_nodes[(k + 1) % m]);
        let fa = &grads[a];
        let fb = &grads[b];
        let fmid = [
            [0.5 * (fa[0][0] + fb[0][0]), 0.5 * (fa[0][1] + fb[0][1])],
            [0.5 * (fa[1][0] + fb[1][0]), 0.5 * (fa[1][1] + fb[1][1])],
        ];
        let w = grid.boundary_segment_length(k) * norm(mat_vec(&cof2(&fmid), grid.segment_outer_normal(k)));
        weights[k] += 0.5 * w;
        weights[(k + 1) % m] += 0.5 * w;
    }
    if let Some((a, b)) = first_self_intersection(&points) {
        return Err(SimError::SelfIntersecting { a, b });
    }
    Ok(InterfaceGeometry { points, normals, tangents, weights, nodes: grid.boundary_nodes.clone() })
}

fn segments_intersect(p1: Vec2, p2: Vec2, q1: Vec2, q2: Vec2) -> bool {
    let d1 = cross(sub(p2, p1), sub(q1, p1));
    let d2 = cross(sub(p2, p1), sub(q2, p1));
    let d3 = cross(sub(q2, q1), sub(p1, q1));
    let d4 = cross(sub(q2, q1), sub(p2, q1));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |a: Vec2, b: Vec2, p: Vec2, d: f64| {
        d == 0.0
            && p[0] >= a[0].min(b[0])
            && p[0] <= a[0].max(b[0])
            && p[1] >= a[1].min(b[1])
            && p[1] <= a[1].max(b[1])
    };
    on(p1, p2, q1, d1) || on(p1, p2, q2, d2) || on(q1, q2, p1, d3) || on(q1, q2, p2, d4)
}

/// First pair of non-adjacent intersecting segments of a closed polyline.
pub fn first_self_intersection(points: &[Vec2]) -> Option<(usize, usize)> {
    let m = points.len();
    let bbox = |k: usize| {
        let (a, b) = (points[k], points[(k + 1) % m]);
        (a[0].min(b[0]), a[0].max(b[0]), a[1].min(b[1]), a[1].max(b[1]))
    };
    let boxes: Vec<_> = (0..m).map(bbox).collect();
    for a in 0..m {
        for b in a + 2..m {
            if a == 0 && b == m - 1 {
                continue;
            }
            let (ba, bb) = (boxes[a], boxes[b]);
            if ba.1 < bb.0 || bb.1 < ba.0 || ba.3 < bb.2 || bb.3 < ba.2 {
                continue;
            }
            if segments_intersect(points[a], points[(a + 1) % m], points[b], points[(b + 1) % m]) {
                return Some((a, b));
            }
        }
    }
    None
}

/// Signed shoelace area (positive for counter-clockwise polygons).
pub fn polygon_area(points: &[Vec2]) -> f64 {
    let m = points.len();
    let mut s = 0.0;
    for k in 0..m {
        s += cross(points[k], points[(k + 1) % m]);
    }
    0.5 * s
}

pub fn polygon_perimeter(points: &[Vec2]) -> f64 {
    let m = points.len();
    (0..m).map(|k| norm(sub(points[(k + 1) % m], points[k]))).sum()
}

/// Winding number of a closed polyline around `p`.
pub fn winding_number(points: &[Vec2], p: Vec2) -> i32 {
    let m = points.len();
    let mut w = 0;
    for k in 0..m {
        let a = points[k];
        let b = points[(k + 1) % m];
        if a[1] <= p[1] {
            if b[1] > p[1] && cross(sub(b, a), sub(p, a)) > 0.0 {
                w += 1;
            }
        } else if b[1] <= p[1] && cross(sub(b, a), sub(p, a)) < 0.0 {
            w -= 1;
        }
    }
    w
}

/// Rasterized `∫ (w − 1)₊ + (−w)₊` over pixel centers of an `res × res`
/// raster covering the polygon's bounding box: the area counted more than
/// once (or with reversed orientation) by the shoelace formula.
pub fn winding_excess(points: &[Vec2], res: usize) -> f64 {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let dx = (x1 - x0) / res as f64;
    let dy = (y1 - y0) / res as f64;
    if !(dx > 0.0 && dy > 0.0) {
        return 0.0;
    }
    let m = points.len();
    let mut excess = 0.0;
    let mut crossings: Vec<(f64, i32)> = Vec::new();
    for r in 0..res {
        let y = y0 + (r as f64 + 0.5) * dy;
        crossings.clear();
        for k in 0..m {
            let a = points[k];
            let b = points[(k + 1) % m];
            let dir = if a[1] <= y && b[1] > y {
                1
            } else if a[1] > y && b[1] <= y {
                -1
            } else {
                continue;
            };
            let t = (y - a[1]) / (b[1] - a[1]);
            crossings.push((a[0] + t * (b[0] - a[0]), dir));
        }
        crossings.sort_by(|u, v| u.0.total_cmp(&v.0));
        // winding of a point = Σ of directions of crossings to its right
        let mut w: i32 = crossings.iter().map(|c| c.1).sum();
        let mut ci = 0;
        for c in 0..res {
            let x = x0 + (c as f64 + 0.5) * dx;
            while ci < crossings.len() && crossings[ci].0 < x {
                w -= crossings[ci].1;
                ci += 1;
            }
            let e = (w - 1).max(0) + (-w).max(0);
            excess += e as f64;
        }
    }
    excess * dx * dy
}

/// Sum of the exact signed areas of the deformed grid cells (the integral
/// of the bilinear interpolant's Jacobian determinant).
pub fn deformed_cell_area(eta: &DeformationField) -> f64 {
    let g = &*eta.grid;
    let p = eta.positions();
    let mut s = 0.0;
    for j in 0..g.ny - 1 {
        for i in 0..g.nx - 1 {
            let p00 = p[g.index(i, j)];
            let p10 = p[g.index(i + 1, j)];
            let p11 = p[g.index(i + 1, j + 1)];
            let p01 = p[g.index(i, j + 1)];
            s += 0.5 * cross(sub(p11, p00), sub(p01, p10));
        }
    }
    s
}

/// `∫_Q det∇η − |η(Q)|`, with the image area from the shoelace formula
/// corrected by rasterized winding numbers at `res × res`.
pub fn ciarlet_necas_residual(eta: &DeformationField, res: usize) -> f64 {
    let grid = &*eta.grid;
    let pos = eta.positions();
    let boundary: Vec<Vec2> = grid.boundary_nodes.iter().map(|&n| pos[n]).collect();
    let shoelace = polygon_area(&boundary);
    let excess = if first_self_intersection(&boundary).is_some() { winding_excess(&boundary, res) } else { 0.0 };
    deformed_cell_area(eta) - (shoelace - excess)
}

/// Cell label on the background grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellLabel {
    Fluid,
    Solid,
    Cut,
}

impl CellLabel {
    pub fn code(self) -> char {
        match self {
            CellLabel::Fluid => 'F',
            CellLabel::Solid => 'S',
            CellLabel::Cut => 'C',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellClassification {
    pub mx: usize,
    pub my: usize,
    pub labels: Vec<CellLabel>,
    /// Fluid area fraction per cell: 1 for Fluid, 0 for Solid, in (0, 1) for Cut.
    pub fraction: Vec<f64>,
    pub fluid_area: f64,
}

impl CellClassification {
    /// Whole container is fluid.
    pub fn all_fluid(grid: &FluidGrid) -> Self {
        let n = grid.num_cells();
        Self {
            mx: grid.mx,
            my: grid.my,
            labels: vec![CellLabel::Fluid; n],
            fraction: vec![1.0; n],
            fluid_area: grid.area(),
        }
    }

    #[inline]
    pub fn is_active(&self, c: usize) -> bool {
        self.labels[c] != CellLabel::Solid
    }

    pub fn num_active(&self) -> usize {
        self.labels.iter().filter(|l| **l != CellLabel::Solid).count()
    }

    pub fn count(&self, label: CellLabel) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

/// Sutherland–Hodgman clip of `poly` against the half-plane `coord(axis) ≷ v`.
fn clip_half(poly: &[Vec2], axis: usize, v: f64, keep_greater: bool) -> Vec<Vec2> {
    let inside = |p: Vec2| if keep_greater { p[axis] >= v } else { p[axis] <= v };
    let m = poly.len();
    let mut out = Vec::with_capacity(m + 4);
    for k in 0..m {
        let cur = poly[k];
        let prev = poly[(k + m - 1) % m];
        let (ci, pi) = (inside(cur), inside(prev));
        if ci != pi {
            let t = (v - prev[axis]) / (cur[axis] - prev[axis]);
            let mut q = [prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])];
            q[axis] = v;
            out.push(q);
        }
        if ci {
            out.push(cur);
        }
    }
    out
}

/// `poly ∩ [x0,x1]×[y0,y1]` as a polygon (empty when the overlap is degenerate).
pub fn clip_to_box(poly: &[Vec2], x0: f64, x1: f64, y0: f64, y1: f64) -> Vec<Vec2> {
    let mut p = clip_half(poly, 0, x0, true);
    for (axis, v, keep) in [(0, x1, false), (1, y0, true), (1, y1, false)] {
        if p.is_empty() {
            return p;
        }
        p = clip_half(&p, axis, v, keep);
    }
    if p.len() < 3 {
        p.clear();
    }
    p
}

/// Area of `poly ∩ [x0,x1]×[y0,y1]` for a counter-clockwise simple polygon.
pub fn clipped_area(poly: &[Vec2], x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let p = clip_to_box(poly, x0, x1, y0, y1);
    if p.is_empty() {
        0.0
    } else {
        polygon_area(&p)
    }
}

/// Area-weighted centroid of a counter-clockwise polygon.
pub fn polygon_centroid(points: &[Vec2]) -> Vec2 {
    let m = points.len();
    let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for k in 0..m {
        let (p, q) = (points[k], points[(k + 1) % m]);
        let c = cross(p, q);
        a += c;
        cx += (p[0] + q[0]) * c;
        cy += (p[1] + q[1]) * c;
    }
    if a.abs() < 1e-300 {
        let n = m.max(1) as f64;
        return [points.iter().map(|p| p[0]).sum::<f64>() / n, points.iter().map(|p| p[1]).sum::<f64>() / n];
    }
    [cx / (3.0 * a), cy / (3.0 * a)]
}

/// Centroid of the part of cell `c` lying outside the solid polygon.
pub fn fluid_centroid(solid: &[Vec2], grid: &FluidGrid, c: usize) -> Vec2 {
    let center = grid.cell_center(c);
    let (i, j) = grid.cell_ij(c);
    let (x0, y0) = (grid.x0 + i as f64 * grid.dx, grid.y0 + j as f64 * grid.dy);
    let part = clip_to_box(solid, x0, x0 + grid.dx, y0, y0 + grid.dy);
    if part.is_empty() {
        return center;
    }
    let a_s = polygon_area(&part);
    let a = grid.dx * grid.dy;
    if a - a_s <= 1e-14 * a {
        return center;
    }
    let cs = polygon_centroid(&part);
    [(a * center[0] - a_s * cs[0]) / (a - a_s), (a * center[1] - a_s * cs[1]) / (a - a_s)]
}

const CUT_EPS: f64 = 1e-12;

/// Classifies background cells against a closed counter-clockwise solid
/// polygon by exact clipping.
pub fn classify_polygon(points: &[Vec2], grid: &FluidGrid) -> Result<CellClassification> {
    if let Some((a, b)) = first_self_intersection(points) {
        return Err(SimError::SelfIntersecting { a, b });
    }
    let mut cls = CellClassification::all_fluid(grid);
    let (mut bx0, mut bx1, mut by0, mut by1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        bx0 = bx0.min(p[0]);
        bx1 = bx1.max(p[0]);
        by0 = by0.min(p[1]);
        by1 = by1.max(p[1]);
    }
    let ci0 = (((bx0 - grid.x0) / grid.dx).floor().max(0.0) as usize).min(grid.mx);
    let ci1 = (((bx1 - grid.x0) / grid.dx).ceil().max(0.0) as usize).min(grid.mx);
    let cj0 = (((by0 - grid.y0) / grid.dy).floor().max(0.0) as usize).min(grid.my);
    let cj1 = (((by1 - grid.y0) / grid.dy).ceil().max(0.0) as usize).min(grid.my);
    let cell_area = grid.dx * grid.dy;
    let mut solid_area = 0.0;
    for j in cj0..cj1 {
        for i in ci0..ci1 {
            let (x0, y0) = (grid.x0 + i as f64 * grid.dx, grid.y0 + j as f64 * grid.dy);
            let a = clipped_area(points, x0, x0 + grid.dx, y0, y0 + grid.dy);
            let s = (a / cell_area).clamp(0.0, 1.0);
            let c = grid.cell_index(i, j);
            if s <= CUT_EPS {
                continue;
            }
            solid_area += a;
            if s >= 1.0 - CUT_EPS {
                cls.labels[c] = CellLabel::Solid;
                cls.fraction[c] = 0.0;
            } else {
                cls.labels[c] = CellLabel::Cut;
                cls.fraction[c] = 1.0 - s;
            }
        }
    }
    cls.fluid_area = grid.area() - solid_area;
    Ok(cls)
}

/// Classification of the container cells against the solid bounded by `interface`.
pub fn classify_cells(interface: &InterfaceGeometry, container: &FluidGrid) -> Result<CellClassification> {
    classify_polygon(&interface.points, container)
}

/// Anything that exposes boundary samples for distance computations.
pub trait BoundarySamples {
    /// Points densely sampling the boundary.
    fn boundary_samples(&self) -> Vec<Vec2>;
    /// Distance targets: polygon vertices, or a point cloud when
    /// [`BoundarySamples::closed`] is false.
    fn boundary_polyline(&self) -> Vec<Vec2>;
    fn closed(&self) -> bool {
        true
    }
}

/// Closed polygon given by its vertices; each edge is sampled with
/// [`Polygon::PER_EDGE`] points.
pub struct Polygon<'a>(pub &'a [Vec2]);

impl Polygon<'_> {
    pub const PER_EDGE: usize = 16;
}

impl BoundarySamples for Polygon<'_> {
    fn boundary_samples(&self) -> Vec<Vec2> {
        let p = self.0;
        let m = p.len();
        let mut out = Vec::with_capacity(m * Self::PER_EDGE);
        for k in 0..m {
            let (a, b) = (p[k], p[(k + 1) % m]);
            for s in 0..Self::PER_EDGE {
                let t = s as f64 / Self::PER_EDGE as f64;
                out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
            }
        }
        out
    }

    fn boundary_polyline(&self) -> Vec<Vec2> {
        self.0.to_vec()
    }
}

/// A classification paired with its grid: Cut-cell centers sample the boundary.
pub struct ClassifiedDomain<'a> {
    pub cls: &'a CellClassification,
    pub grid: &'a FluidGrid,
}

impl BoundarySamples for ClassifiedDomain<'_> {
    fn boundary_samples(&self) -> Vec<Vec2> {
        (0..self.cls.labels.len())
            .filter(|&c| self.cls.labels[c] == CellLabel::Cut)
            .map(|c| self.grid.cell_center(c))
            .collect()
    }

    fn boundary_polyline(&self) -> Vec<Vec2> {
        self.boundary_samples()
    }

    fn closed(&self) -> bool {
        false
    }
}

fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> (f64, f64) {
    let ab = sub(b, a);
    let l2 = dot(ab, ab);
    let t = if l2 > 0.0 { (dot(sub(p, a), ab) / l2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    (norm(sub(p, q)), t)
}

fn distance_to_set(p: Vec2, target: &[Vec2], closed: bool) -> f64 {
    let m = target.len();
    if m == 1 || !closed {
        return target.iter().map(|q| norm(sub(p, *q))).fold(f64::INFINITY, f64::min);
    }
    (0..m).map(|k| point_segment_distance(p, target[k], target[(k + 1) % m]).0).fold(f64::INFINITY, f64::min)
}

/// Symmetric max–min distance between boundary samples of `a` and `b`.
pub fn hausdorff_distance<A: BoundarySamples + ?Sized, B: BoundarySamples + ?Sized>(a: &A, b: &B) -> f64 {
    let (sa, sb) = (a.boundary_samples(), b.boundary_samples());
    let (pa, pb) = (a.boundary_polyline(), b.boundary_polyline());
    let closed_a = a.closed() && pa.len() >= 3;
    let closed_b = b.closed() && pb.len() >= 3;
    let h_ab = sa.iter().map(|p| distance_to_set(*p, &pb, closed_b)).fold(0.0, f64::max);
    let h_ba = sb.iter().map(|p| distance_to_set(*p, &pa, closed_a)).fold(0.0, f64::max);
    h_ab.max(h_ba)
}

fn segment_segment_closest(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> (f64, f64, f64) {
    // candidates: endpoints against the other segment (exact when disjoint)
    if segments_intersect(a0, a1, b0, b1) {
        let d1 = cross(sub(a1, a0), sub(b0, a0));
        let d2 = cross(sub(a1, a0), sub(b1, a0));
        let t = if d1 != d2 { d1 / (d1 - d2) } else { 0.0 };
        let q = [b0[0] + t * (b1[0] - b0[0]), b0[1] + t * (b1[1] - b0[1])];
        let (_, s) = point_segment_distance(q, a0, a1);
        return (0.0, s, t);
    }
    let mut best = (f64::INFINITY, 0.0, 0.0);
    let (d, t) = point_segment_distance(a0, b0, b1);
    if d < best.0 {
        best = (d, 0.0, t);
    }
    let (d, t) = point_segment_distance(a1, b0, b1);
    if d < best.0 {
        best = (d, 1.0, t);
    }
    let (d, s) = point_segment_distance(b0, a0, a1);
    if d < best.0 {
        best = (d, s, 0.0);
    }
    let (d, s) = point_segment_distance(b1, a0, a1);
    if d < best.0 {
        best = (d, s, 1.0);
    }
    best
}

/// Minimum of the wall distance and the self-distance of the interface
/// across fluid gaps. Segment pairs count only if the path between their
/// closest points along the interface is more than twice their Euclidean
/// distance and each segment faces the other through the fluid.
pub fn min_separation(interface: &InterfaceGeometry, container: &FluidGrid) -> f64 {
    min_separation_polygon(&interface.points, container)
}

pub fn min_separation_polygon(points: &[Vec2], container: &FluidGrid) -> f64 {
    let m = points.len();
    let mut best = f64::INFINITY;
    for p in points {
        best = best
            .min(p[0] - container.x0)
            .min(container.x1 - p[0])
            .min(p[1] - container.y0)
            .min(container.y1 - p[1]);
    }
    best = best.max(0.0);
    let mut arc = vec![0.0; m + 1];
    for k in 0..m {
        arc[k + 1] = arc[k] + norm(sub(points[(k + 1) % m], points[k]));
    }
    let total = arc[m];
    let inward = |k: usize| {
        let t = sub(points[(k + 1) % m], points[k]);
        let l = norm(t);
        [-t[1] / l, t[0] / l]
    };
    for a in 0..m {
        let (a0, a1) = (points[a], points[(a + 1) % m]);
        for b in a + 2..m {
            if a == 0 && b == m - 1 {
                continue;
            }
            let (b0, b1) = (points[b], points[(b + 1) % m]);
            let (d, s, t) = segment_segment_closest(a0, a1, b0, b1);
            if d >= best {
                continue;
            }
            let sa = arc[a] + s * (arc[a + 1] - arc[a]);
            let sb = arc[b] + t * (arc[b + 1] - arc[b]);
            let along = (sb - sa).abs().min(total - (sb - sa).abs());
            if along <= 2.0 * d {
                continue;
            }
            let pa = [a0[0] + s * (a1[0] - a0[0]), a0[1] + s * (a1[1] - a0[1])];
            let pb = [b0[0] + t * (b1[0] - b0[0]), b0[1] + t * (b1[1] - b0[1])];
            let dv = sub(pb, pa);
            if d > 0.0 && (dot(inward(a), dv) > 0.0 || dot(inward(b), [-dv[0], -dv[1]]) > 0.0) {
                continue;
            }
            best = d;
        }
    }
    best
}

/// Signed distance of `p` to a closed polygon: negative inside.
pub fn signed_distance(points: &[Vec2], p: Vec2) -> f64 {
    let d = distance_to_set(p, points, true);
    if winding_number(points, p) != 0 {
        -d
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: f64, y0: f64, s: f64) -> Vec<Vec2> {
        vec![[x0, y0], [x0 + s, y0], [x0 + s, y0 + s], [x0, y0 + s]]
    }

    #[test]
    fn clipping_recovers_unit_area() {
        let p = square(0.25, 0.25, 0.5);
        assert!((clipped_area(&p, 0.0, 1.0, 0.0, 1.0) - 0.25).abs() < 1e-15);
        assert!((clipped_area(&p, 0.5, 1.0, 0.5, 1.0) - 0.0625).abs() < 1e-15);
        assert_eq!(clipped_area(&p, 0.8, 1.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn winding_of_square() {
        let p = square(0.0, 0.0, 1.0);
        assert_eq!(winding_number(&p, [0.5, 0.5]), 1);
        assert_eq!(winding_number(&p, [1.5, 0.5]), 0);
        assert!(winding_excess(&p, 64) == 0.0);
    }

    #[test]
    fn self_intersection_detects_bowtie() {
        let bow = vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(first_self_intersection(&bow).is_some());
        assert!(first_self_intersection(&square(0.0, 0.0, 1.0)).is_none());
    }
}
