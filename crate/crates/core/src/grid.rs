//! Node-centred structured grid on a rectangle, discrete calculus and
//! trapezoidal quadrature.
//!
//! Node `(i, j)` sits at `(i·dx, j·dy)` and is stored at `j·nx + i`.
//! Derivatives use second-order central differences in the interior and
//! second-order one-sided stencils on the boundary, so every operator
//! needed by the Galerkin projection is defined up to the boundary.
//! Inner products use the tensor trapezoidal rule, which makes the POD
//! weights explicit: `dx·dy` times 1, ½ or ¼ for interior, edge and
//! corner nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One side of the rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryTag {
    /// `x = 0`
    Inlet,
    /// `x = lx`
    Outlet,
    /// `y = 0`
    Bottom,
    /// `y = ly`
    Top,
}

impl BoundaryTag {
    pub const ALL: [BoundaryTag; 4] = [
        BoundaryTag::Inlet,
        BoundaryTag::Outlet,
        BoundaryTag::Bottom,
        BoundaryTag::Top,
    ];

    /// Exact outward unit normal of the side.
    pub fn normal(self) -> [f64; 2] {
        match self {
            BoundaryTag::Inlet => [-1.0, 0.0],
            BoundaryTag::Outlet => [1.0, 0.0],
            BoundaryTag::Bottom => [0.0, -1.0],
            BoundaryTag::Top => [0.0, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BoundaryTag::Inlet => "inlet",
            BoundaryTag::Outlet => "outlet",
            BoundaryTag::Bottom => "bottom",
            BoundaryTag::Top => "top",
        }
    }
}

impl std::str::FromStr for BoundaryTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inlet" => Ok(BoundaryTag::Inlet),
            "outlet" => Ok(BoundaryTag::Outlet),
            "bottom" => Ok(BoundaryTag::Bottom),
            "top" => Ok(BoundaryTag::Top),
            other => Err(Error::config(format!(
                "unknown boundary tag `{other}` (expected inlet, outlet, bottom or top)"
            ))),
        }
    }
}

/// Uniform node-centred grid on `[0, lx] × [0, ly]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredGrid2D {
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
}

impl StructuredGrid2D {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::dim(format!(
                "grid needs at least 3 nodes per axis, got {nx}x{ny}"
            )));
        }
        if !(lx.is_finite() && ly.is_finite() && lx > 0.0 && ly > 0.0) {
            return Err(Error::dim(format!(
                "grid extents must be positive and finite, got {lx}x{ly}"
            )));
        }
        Ok(Self { nx, ny, lx, ly })
    }

    /// `n × n` nodes on the unit square.
    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(n, n, 1.0, 1.0)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn lx(&self) -> f64 {
        self.lx
    }

    pub fn ly(&self) -> f64 {
        self.ly
    }

    pub fn dx(&self) -> f64 {
        self.lx / (self.nx - 1) as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / (self.ny - 1) as f64
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn x(&self, i: usize) -> f64 {
        if i == self.nx - 1 {
            self.lx
        } else {
            i as f64 * self.dx()
        }
    }

    pub fn y(&self, j: usize) -> f64 {
        if j == self.ny - 1 {
            self.ly
        } else {
            j as f64 * self.dy()
        }
    }

    /// Single tag of a boundary node, `None` for interior nodes. Corners are
    /// tagged with the vertical side they lie on; for quadrature they still
    /// belong to both adjacent sides (see [`Self::side_nodes`]).
    pub fn boundary_tag(&self, i: usize, j: usize) -> Option<BoundaryTag> {
        if i == 0 {
            Some(BoundaryTag::Inlet)
        } else if i == self.nx - 1 {
            Some(BoundaryTag::Outlet)
        } else if j == 0 {
            Some(BoundaryTag::Bottom)
        } else if j == self.ny - 1 {
            Some(BoundaryTag::Top)
        } else {
            None
        }
    }

    /// Node indices along a side, ordered by increasing coordinate, corners
    /// included.
    pub fn side_nodes(&self, tag: BoundaryTag) -> Vec<usize> {
        match tag {
            BoundaryTag::Inlet => (0..self.ny).map(|j| self.index(0, j)).collect(),
            BoundaryTag::Outlet => (0..self.ny).map(|j| self.index(self.nx - 1, j)).collect(),
            BoundaryTag::Bottom => (0..self.nx).map(|i| self.index(i, 0)).collect(),
            BoundaryTag::Top => (0..self.nx).map(|i| self.index(i, self.ny - 1)).collect(),
        }
    }

    /// 1D trapezoid weights matching [`Self::side_nodes`].
    pub fn side_weights(&self, tag: BoundaryTag) -> Vec<f64> {
        let (n, h) = match tag {
            BoundaryTag::Inlet | BoundaryTag::Outlet => (self.ny, self.dy()),
            BoundaryTag::Bottom | BoundaryTag::Top => (self.nx, self.dx()),
        };
        trapezoid_weights(n, h)
    }

    pub fn side_length(&self, tag: BoundaryTag) -> f64 {
        match tag {
            BoundaryTag::Inlet | BoundaryTag::Outlet => self.ly,
            BoundaryTag::Bottom | BoundaryTag::Top => self.lx,
        }
    }

    /// Tensor trapezoid weights for every node.
    pub fn quadrature_weights(&self) -> Vec<f64> {
        let wx = trapezoid_weights(self.nx, self.dx());
        let wy = trapezoid_weights(self.ny, self.dy());
        let mut w = Vec::with_capacity(self.len());
        for wyj in &wy {
            for wxi in &wx {
                w.push(wxi * wyj);
            }
        }
        w
    }

    /// Node coordinates in storage order.
    pub fn coordinates(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.ny).flat_map(move |j| (0..self.nx).map(move |i| (self.x(i), self.y(j))))
    }

    pub(crate) fn check_same(&self, other: &StructuredGrid2D) -> Result<()> {
        if self != other {
            return Err(Error::dim(format!(
                "grid mismatch: {}x{} on {}x{} vs {}x{} on {}x{}",
                self.nx, self.ny, self.lx, self.ly, other.nx, other.ny, other.lx, other.ly
            )));
        }
        Ok(())
    }
}

fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

/// Node-centred scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: StructuredGrid2D,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: StructuredGrid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::dim(format!(
                "scalar field needs {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite scalar value at node {k}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: StructuredGrid2D) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn(grid: StructuredGrid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = grid.coordinates().map(|(x, y)| f(x, y)).collect();
        Self { grid, values }
    }

    pub(crate) fn from_raw(grid: StructuredGrid2D, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &StructuredGrid2D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Node-centred 2D vector field stored as the u block followed by the v block.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField2D {
    grid: StructuredGrid2D,
    values: Vec<f64>,
}

impl VectorField2D {
    pub fn new(grid: StructuredGrid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != 2 * grid.len() {
            return Err(Error::dim(format!(
                "vector field needs {} values, got {}",
                2 * grid.len(),
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite vector value at entry {k}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: StructuredGrid2D) -> Self {
        Self {
            grid,
            values: vec![0.0; 2 * grid.len()],
        }
    }

    pub fn from_fn(grid: StructuredGrid2D, f: impl Fn(f64, f64) -> [f64; 2]) -> Self {
        let n = grid.len();
        let mut values = vec![0.0; 2 * n];
        for (k, (x, y)) in grid.coordinates().enumerate() {
            let [u, v] = f(x, y);
            values[k] = u;
            values[n + k] = v;
        }
        Self { grid, values }
    }

    pub fn from_components(u: &ScalarField, v: &ScalarField) -> Result<Self> {
        u.grid.check_same(&v.grid)?;
        let mut values = Vec::with_capacity(2 * u.values.len());
        values.extend_from_slice(&u.values);
        values.extend_from_slice(&v.values);
        Ok(Self {
            grid: u.grid,
            values,
        })
    }

    pub(crate) fn from_raw(grid: StructuredGrid2D, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), 2 * grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &StructuredGrid2D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn u(&self) -> &[f64] {
        &self.values[..self.grid.len()]
    }

    pub fn v(&self) -> &[f64] {
        &self.values[self.grid.len()..]
    }

    pub fn component(&self, c: usize) -> ScalarField {
        let n = self.grid.len();
        ScalarField::from_raw(self.grid, self.values[c * n..(c + 1) * n].to_vec())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

// ---------------------------------------------------------------------------
// 1D stencils
// ---------------------------------------------------------------------------

// Stencils are written in differences so constants give exactly zero.

#[inline]
fn first_derivative(get: impl Fn(usize) -> f64, k: usize, n: usize, h: f64) -> f64 {
    if k == 0 {
        (4.0 * (get(1) - get(0)) - (get(2) - get(0))) / (2.0 * h)
    } else if k == n - 1 {
        (4.0 * (get(n - 1) - get(n - 2)) - (get(n - 1) - get(n - 3))) / (2.0 * h)
    } else {
        (get(k + 1) - get(k - 1)) / (2.0 * h)
    }
}

#[inline]
fn second_derivative(get: impl Fn(usize) -> f64, k: usize, n: usize, h: f64) -> f64 {
    let h2 = h * h;
    if k > 0 && k < n - 1 {
        ((get(k - 1) - get(k)) + (get(k + 1) - get(k))) / h2
    } else if n < 4 {
        // three nodes only: the single available stencil
        ((get(0) - get(1)) + (get(2) - get(1))) / h2
    } else if k == 0 {
        (-5.0 * (get(1) - get(0)) + 4.0 * (get(2) - get(0)) - (get(3) - get(0))) / h2
    } else {
        (-5.0 * (get(n - 2) - get(n - 1)) + 4.0 * (get(n - 3) - get(n - 1)) - (get(n - 4) - get(n - 1))) / h2
    }
}

pub(crate) fn d_dx(grid: &StructuredGrid2D, f: &[f64]) -> Vec<f64> {
    let (nx, ny, h) = (grid.nx, grid.ny, grid.dx());
    let mut out = vec![0.0; nx * ny];
    for j in 0..ny {
        let row = &f[j * nx..(j + 1) * nx];
        for i in 0..nx {
            out[j * nx + i] = first_derivative(|k| row[k], i, nx, h);
        }
    }
    out
}

pub(crate) fn d_dy(grid: &StructuredGrid2D, f: &[f64]) -> Vec<f64> {
    let (nx, ny, h) = (grid.nx, grid.ny, grid.dy());
    let mut out = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            out[j * nx + i] = first_derivative(|k| f[k * nx + i], j, ny, h);
        }
    }
    out
}

pub(crate) fn laplacian_raw(grid: &StructuredGrid2D, f: &[f64]) -> Vec<f64> {
    let (nx, ny) = (grid.nx, grid.ny);
    let (hx, hy) = (grid.dx(), grid.dy());
    let mut out = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let fxx = second_derivative(|k| f[j * nx + k], i, nx, hx);
            let fyy = second_derivative(|k| f[k * nx + i], j, ny, hy);
            out[j * nx + i] = fxx + fyy;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Field operators
// ---------------------------------------------------------------------------

pub fn gradient(f: &ScalarField) -> VectorField2D {
    let mut values = d_dx(&f.grid, &f.values);
    values.extend(d_dy(&f.grid, &f.values));
    VectorField2D::from_raw(f.grid, values)
}

pub fn divergence(v: &VectorField2D) -> ScalarField {
    let mut out = d_dx(&v.grid, v.u());
    for (o, dv) in out.iter_mut().zip(d_dy(&v.grid, v.v())) {
        *o += dv;
    }
    ScalarField::from_raw(v.grid, out)
}

pub fn laplacian_scalar(f: &ScalarField) -> ScalarField {
    ScalarField::from_raw(f.grid, laplacian_raw(&f.grid, &f.values))
}

/// Component-wise Laplacian, i.e. `∇·∇v`.
pub fn laplacian_vector(v: &VectorField2D) -> VectorField2D {
    let mut values = laplacian_raw(&v.grid, v.u());
    values.extend(laplacian_raw(&v.grid, v.v()));
    VectorField2D::from_raw(v.grid, values)
}

/// Velocity gradient `(∇v)_ab = ∂_b v_a`.
#[derive(Clone, Debug)]
pub struct VelocityGradient {
    pub dudx: Vec<f64>,
    pub dudy: Vec<f64>,
    pub dvdx: Vec<f64>,
    pub dvdy: Vec<f64>,
}

pub fn velocity_gradient(v: &VectorField2D) -> VelocityGradient {
    VelocityGradient {
        dudx: d_dx(&v.grid, v.u()),
        dudy: d_dy(&v.grid, v.u()),
        dvdx: d_dx(&v.grid, v.v()),
        dvdy: d_dy(&v.grid, v.v()),
    }
}

/// `∇·(η (∇v)ᵀ)` with the row-wise divergence `(∇·T)_a = Σ_b ∂_b T_ab`.
/// Passing `None` for `eta` gives `∇·(∇v)ᵀ`.
pub fn div_grad_transpose(v: &VectorField2D, eta: Option<&ScalarField>) -> Result<VectorField2D> {
    if let Some(eta) = eta {
        v.grid.check_same(&eta.grid)?;
    }
    let g = velocity_gradient(v);
    let scale = |f: Vec<f64>| -> Vec<f64> {
        match eta {
            Some(eta) => f.iter().zip(&eta.values).map(|(a, e)| a * e).collect(),
            None => f,
        }
    };
    // ((∇v)ᵀ)_ab = ∂_a v_b
    let txx = scale(g.dudx);
    let txy = scale(g.dvdx);
    let tyx = scale(g.dudy);
    let tyy = scale(g.dvdy);
    let mut x = d_dx(&v.grid, &txx);
    for (o, d) in x.iter_mut().zip(d_dy(&v.grid, &txy)) {
        *o += d;
    }
    let mut y = d_dx(&v.grid, &tyx);
    for (o, d) in y.iter_mut().zip(d_dy(&v.grid, &tyy)) {
        *o += d;
    }
    x.extend(y);
    Ok(VectorField2D::from_raw(v.grid, x))
}

/// `∇·(u ⊗ w)` with `(u⊗w)_ab = u_a w_b` and the divergence taken over the
/// first index, so component `b` is `∂_x(u_x w_b) + ∂_y(u_y w_b)`, i.e.
/// `(u·∇)w + w(∇·u)`: `u` is the advecting field.
pub fn div_outer_product(u: &VectorField2D, w: &VectorField2D) -> Result<VectorField2D> {
    u.grid.check_same(&w.grid)?;
    let grid = u.grid;
    let mut values = Vec::with_capacity(2 * grid.len());
    for comp in [w.u(), w.v()] {
        let fx: Vec<f64> = comp.iter().zip(u.u()).map(|(a, b)| a * b).collect();
        let fy: Vec<f64> = comp.iter().zip(u.v()).map(|(a, b)| a * b).collect();
        let mut out = d_dx(&grid, &fx);
        for (o, d) in out.iter_mut().zip(d_dy(&grid, &fy)) {
            *o += d;
        }
        values.extend(out);
    }
    Ok(VectorField2D::from_raw(grid, values))
}

/// Pointwise product `η v`.
pub fn scale_vector(eta: &ScalarField, v: &VectorField2D) -> Result<VectorField2D> {
    eta.grid.check_same(&v.grid)?;
    let n = v.grid.len();
    let values = v
        .values
        .iter()
        .enumerate()
        .map(|(k, x)| x * eta.values[k % n])
        .collect();
    Ok(VectorField2D::from_raw(v.grid, values))
}

/// 2D curl `∂_x v − ∂_y u`.
pub fn curl(v: &VectorField2D) -> ScalarField {
    let mut out = d_dx(&v.grid, v.v());
    for (o, d) in out.iter_mut().zip(d_dy(&v.grid, v.u())) {
        *o -= d;
    }
    ScalarField::from_raw(v.grid, out)
}

// ---------------------------------------------------------------------------
// Quadrature
// ---------------------------------------------------------------------------

pub(crate) fn weighted_dot(w: &[f64], f: &[f64], g: &[f64]) -> f64 {
    w.iter().zip(f).zip(g).map(|((w, f), g)| w * f * g).sum()
}

/// Trapezoidal `L²(Ω)` inner product of two scalar fields.
pub fn inner_product(f: &ScalarField, g: &ScalarField) -> Result<f64> {
    f.grid.check_same(&g.grid)?;
    Ok(weighted_dot(&f.grid.quadrature_weights(), &f.values, &g.values))
}

/// Trapezoidal `L²(Ω)` inner product of two vector fields.
pub fn inner_product_vector(f: &VectorField2D, g: &VectorField2D) -> Result<f64> {
    f.grid.check_same(&g.grid)?;
    let w = f.grid.quadrature_weights();
    Ok(weighted_dot(&w, f.u(), g.u()) + weighted_dot(&w, f.v(), g.v()))
}

pub(crate) fn boundary_dot(grid: &StructuredGrid2D, tags: &[BoundaryTag], f: &[f64], g: &[f64]) -> f64 {
    let mut total = 0.0;
    for &tag in tags {
        let nodes = grid.side_nodes(tag);
        let w = grid.side_weights(tag);
        total += nodes
            .iter()
            .zip(&w)
            .map(|(&k, w)| w * f[k] * g[k])
            .sum::<f64>();
    }
    total
}

fn check_tags(tags: &[BoundaryTag]) -> Result<()> {
    if tags.is_empty() {
        return Err(Error::config("boundary inner product needs at least one boundary tag"));
    }
    Ok(())
}

/// Trapezoidal `L²(Γ)` inner product over the listed sides.
pub fn boundary_inner_product(f: &ScalarField, g: &ScalarField, tags: &[BoundaryTag]) -> Result<f64> {
    f.grid.check_same(&g.grid)?;
    check_tags(tags)?;
    Ok(boundary_dot(&f.grid, tags, &f.values, &g.values))
}

pub fn boundary_inner_product_vector(
    f: &VectorField2D,
    g: &VectorField2D,
    tags: &[BoundaryTag],
) -> Result<f64> {
    f.grid.check_same(&g.grid)?;
    check_tags(tags)?;
    Ok(boundary_dot(&f.grid, tags, f.u(), g.u()) + boundary_dot(&f.grid, tags, f.v(), g.v()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit(n: usize) -> StructuredGrid2D {
        StructuredGrid2D::unit_square(n).unwrap()
    }

    #[test]
    fn rejects_small_grids() {
        assert!(matches!(StructuredGrid2D::new(2, 5, 1.0, 1.0), Err(Error::Dimension(_))));
        assert!(StructuredGrid2D::new(3, 3, 1.0, 0.0).is_err());
    }

    #[test]
    fn every_boundary_node_has_one_tag() {
        let g = StructuredGrid2D::new(5, 4, 2.0, 1.0).unwrap();
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let on_boundary = i == 0 || j == 0 || i == g.nx() - 1 || j == g.ny() - 1;
                assert_eq!(g.boundary_tag(i, j).is_some(), on_boundary);
            }
        }
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let g = unit(9);
        let f = ScalarField::from_fn(g, |_, _| 3.5);
        assert!(gradient(&f).values().iter().all(|&v| v == 0.0));
        assert!(laplacian_scalar(&f).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_exact_on_linear() {
        let g = unit(11);
        let f = ScalarField::from_fn(g, |x, y| 2.0 * x + 3.0 * y);
        let grad = gradient(&f);
        for (&gx, &gy) in grad.u().iter().zip(grad.v()) {
            assert!((gx - 2.0).abs() < 1e-12);
            assert!((gy - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_exact_cases() {
        let g = unit(9);
        let c = VectorField2D::from_fn(g, |_, _| [1.5, -2.0]);
        assert!(divergence(&c).values().iter().all(|&v| v == 0.0));
        let v = VectorField2D::from_fn(g, |x, y| [x, -y]);
        assert!(divergence(&v).max_abs() < 1e-12);
    }

    #[test]
    fn laplacian_exact_on_quadratics() {
        let g = unit(9);
        let lin = ScalarField::from_fn(g, |x, y| 1.0 + 2.0 * x - y);
        assert!(laplacian_scalar(&lin).max_abs() < 1e-10);
        let q = ScalarField::from_fn(g, |x, y| x * x + y * y);
        for v in laplacian_scalar(&q).values() {
            assert!((v - 4.0).abs() < 1e-9, "{v}");
        }
    }

    fn max_err_dsin(n: usize) -> f64 {
        let g = unit(n);
        let f = ScalarField::from_fn(g, |x, _| (2.0 * PI * x).sin());
        let grad = gradient(&f);
        g.coordinates()
            .zip(grad.u())
            .map(|((x, _), d)| (d - 2.0 * PI * (2.0 * PI * x).cos()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_second_order_refinement() {
        let e1 = max_err_dsin(33);
        let e2 = max_err_dsin(65);
        let e3 = max_err_dsin(129);
        assert!(e1 / e2 > 3.5 && e2 / e3 > 3.5, "{e1} {e2} {e3}");
        // error constant from the coarse grid (10% slack) bounds the fine grid: e ≤ C·h²
        let c = 1.1 * e1 * 32.0 * 32.0;
        assert!(e3 <= c / (128.0 * 128.0), "{e1} {e3}");
    }

    fn max_err_lap(n: usize) -> f64 {
        let g = unit(n);
        let s = |x: f64, y: f64| (2.0 * PI * x).sin() * (2.0 * PI * y).sin();
        let f = ScalarField::from_fn(g, s);
        let lap = laplacian_scalar(&f);
        g.coordinates()
            .zip(lap.values())
            .map(|((x, y), l)| (l + 8.0 * PI * PI * s(x, y)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn laplacian_second_order_refinement() {
        let (e1, e2, e3) = (max_err_lap(33), max_err_lap(65), max_err_lap(129));
        assert!(e1 / e2 > 3.5 && e2 / e3 > 3.5, "{e1} {e2} {e3}");
    }

    #[test]
    fn inner_products_exact_cases() {
        let g = unit(7);
        let one = ScalarField::from_fn(g, |_, _| 1.0);
        let x = ScalarField::from_fn(g, |x, _| x);
        assert!((inner_product(&one, &one).unwrap() - 1.0).abs() < 1e-14);
        assert!((inner_product(&one, &x).unwrap() - 0.5).abs() < 1e-14);

        let g = unit(129);
        let s = ScalarField::from_fn(g, |x, y| (PI * x).sin() * (PI * y).sin());
        assert!((inner_product(&s, &s).unwrap() - 0.25).abs() < 1e-4);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = ScalarField::zeros(unit(5));
        let b = ScalarField::zeros(unit(6));
        assert!(matches!(inner_product(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn boundary_inner_product_cases() {
        let g = unit(9);
        let one = ScalarField::from_fn(g, |_, _| 1.0);
        let zero = ScalarField::zeros(g);
        for tag in BoundaryTag::ALL {
            assert!((boundary_inner_product(&one, &one, &[tag]).unwrap() - 1.0).abs() < 1e-14);
        }
        assert_eq!(boundary_inner_product(&one, &zero, &[BoundaryTag::Top]).unwrap(), 0.0);
        assert!(boundary_inner_product(&one, &one, &[]).is_err());

        let g = unit(129);
        let s = ScalarField::from_fn(g, |x, _| (PI * x).sin());
        let v = boundary_inner_product(&s, &s, &[BoundaryTag::Bottom]).unwrap();
        assert!((v - 0.5).abs() < 1e-4);
    }

    #[test]
    fn div_outer_product_matches_advective_form_for_solenoidal_field() {
        // (u·∇)u for u = (y, 0) is zero; ∇·u = 0 so ∇·(u⊗u) = 0 exactly
        let g = unit(9);
        let u = VectorField2D::from_fn(g, |_, y| [y, 0.0]);
        let d = div_outer_product(&u, &u).unwrap();
        assert!(d.max_abs() < 1e-12);
    }

    #[test]
    fn div_outer_product_first_argument_advects() {
        // u = (1, 0), w = (0, x): (u·∇)w = (0, 1), (w·∇)u = 0
        let g = unit(9);
        let u = VectorField2D::from_fn(g, |_, _| [1.0, 0.0]);
        let w = VectorField2D::from_fn(g, |x, _| [0.0, x]);
        let d = div_outer_product(&u, &w).unwrap();
        assert!(d.u().iter().all(|v| v.abs() < 1e-12));
        assert!(d.v().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(div_outer_product(&w, &u).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn grad_transpose_is_gradient_of_divergence_for_quadratics() {
        // v = (x², xy): ∇·v = 3x, ∇(∇·v) = (3, 0)
        let g = unit(9);
        let v = VectorField2D::from_fn(g, |x, y| [x * x, x * y]);
        let d = div_grad_transpose(&v, None).unwrap();
        for (a, b) in d.u().iter().zip(d.v()) {
            assert!((a - 3.0).abs() < 1e-9 && b.abs() < 1e-9, "{a} {b}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn inner_product_symmetric_bilinear_positive(
                f in prop::collection::vec(-1.0f64..1.0, 25),
                g in prop::collection::vec(-1.0f64..1.0, 25),
                alpha in -3.0f64..3.0,
            ) {
                let grid = StructuredGrid2D::unit_square(5).unwrap();
                let f = ScalarField::new(grid, f).unwrap();
                let g = ScalarField::new(grid, g).unwrap();
                let fg = inner_product(&f, &g).unwrap();
                let gf = inner_product(&g, &f).unwrap();
                prop_assert!((fg - gf).abs() < 1e-14);
                let af = ScalarField::new(grid, f.values().iter().map(|v| alpha * v).collect()).unwrap();
                prop_assert!((inner_product(&af, &g).unwrap() - alpha * fg).abs() < 1e-12);
                if f.max_abs() > 0.0 {
                    prop_assert!(inner_product(&f, &f).unwrap() > 0.0);
                }
            }

            #[test]
            fn operators_annihilate_constants(c in -10.0f64..10.0) {
                let grid = StructuredGrid2D::new(6, 5, 2.0, 1.0).unwrap();
                let f = ScalarField::from_fn(grid, |_, _| c);
                prop_assert!(gradient(&f).max_abs() < 1e-12);
                prop_assert!(laplacian_scalar(&f).max_abs() < 1e-10);
                let v = VectorField2D::from_fn(grid, |_, _| [c, -c]);
                prop_assert!(divergence(&v).max_abs() < 1e-12);
            }
        }
    }
}
