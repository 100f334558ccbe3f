//! Reduced Galerkin operators of the momentum equation, the pressure Poisson
//! equation, the eddy-viscosity tensors and the boundary penalty.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    boundary_dot, curl, d_dx, d_dy, div_grad_transpose, div_outer_product, gradient,
    laplacian_vector, scale_vector, weighted_dot, BoundaryTag, ScalarField, StructuredGrid2D,
    VectorField2D,
};
use crate::io::{fmt_f64, ContainerReader, ContainerWriter};
use crate::pod::{field_weights, PodBasis};
use crate::snapshots::FieldKind;
use crate::tensor::Tensor3;

const OPS_MAGIC: &str = "DDROM-OPS";
const OPS_VERSION: &str = "v1";

/// Dirichlet velocity imposed weakly on one side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirichletBoundary {
    pub tag: BoundaryTag,
    pub value: [f64; 2],
}

/// Boundary data entering the reduced operators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundaryConditions {
    pub dirichlet: Vec<DirichletBoundary>,
    /// Vector field `R` of the PPE boundary term `L_i = (χ_i, n·R)_Γ`; `None`
    /// leaves `L = 0`.
    pub pressure_flux: Option<VectorField2D>,
}

/// Penalty operators of one Dirichlet side: `E_ij = (φ_i, φ_j)_Γk` and
/// `D_i = (φ_i, Û)_Γk` with `Û` the unit direction of the boundary value and
/// `U_BC,k = |U|` its magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyOperator {
    pub tag: BoundaryTag,
    pub direction: [f64; 2],
    pub magnitude: f64,
    pub length: f64,
    pub e: DMatrix<f64>,
    pub d: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentumOperators {
    pub m: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub bt: DMatrix<f64>,
    pub c: Tensor3,
    pub h: DMatrix<f64>,
    pub penalty: Vec<PenaltyOperator>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpeOperators {
    pub d: DMatrix<f64>,
    pub g: Tensor3,
    pub n: DMatrix<f64>,
    pub l: DVector<f64>,
}

/// `C_T1, C_T2` are `r × N_νt × r`; `C_T3, C_T4` are `q × N_νt × r`.
#[derive(Clone, Debug, PartialEq)]
pub struct TurbulenceTensors {
    pub ct1: Tensor3,
    pub ct2: Tensor3,
    pub ct3: Tensor3,
    pub ct4: Tensor3,
}

/// Complete operator set at one pair of dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedOperators {
    pub momentum: MomentumOperators,
    pub ppe: PpeOperators,
    pub turbulence: Option<TurbulenceTensors>,
}

/// Operators at `(r, q)` together with the enriched set at `(d, h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnrichedOperators {
    pub reduced: ReducedOperators,
    pub enriched: ReducedOperators,
}

struct VelocityData {
    phi: Vec<VectorField2D>,
    lap: Vec<VectorField2D>,
    gradt: Vec<VectorField2D>,
    curl: Vec<Vec<f64>>,
    wv: Vec<f64>,
}

impl VelocityData {
    fn new(basis: &PodBasis, r: usize) -> Result<Self> {
        let phi: Vec<VectorField2D> = (0..r).map(|i| basis.vector_mode(i)).collect::<Result<_>>()?;
        let lap = phi.par_iter().map(laplacian_vector).collect();
        let gradt = phi
            .par_iter()
            .map(|p| div_grad_transpose(p, None))
            .collect::<Result<_>>()?;
        let curl = phi.iter().map(|p| curl(p).into_values()).collect();
        Ok(Self {
            phi,
            lap,
            gradt,
            curl,
            wv: field_weights(basis.grid(), FieldKind::Velocity),
        })
    }

    fn dot(&self, a: &VectorField2D, b: &VectorField2D) -> f64 {
        weighted_dot(&self.wv, a.values(), b.values())
    }
}

struct PressureData {
    chi: Vec<ScalarField>,
    grad: Vec<VectorField2D>,
}

impl PressureData {
    fn new(basis: &PodBasis, q: usize) -> Result<Self> {
        let chi: Vec<ScalarField> = (0..q).map(|i| basis.scalar_mode(i)).collect::<Result<_>>()?;
        let grad = chi.iter().map(gradient).collect();
        Ok(Self { chi, grad })
    }
}

fn check_bases(u: &PodBasis, p: &PodBasis, r: usize, q: usize) -> Result<StructuredGrid2D> {
    if u.kind() != FieldKind::Velocity {
        return Err(Error::dim("velocity operators need a velocity basis"));
    }
    if p.kind() != FieldKind::Pressure {
        return Err(Error::dim("pressure operators need a pressure basis"));
    }
    u.grid().check_same(p.grid())?;
    if r > u.n_modes() {
        return Err(Error::dim(format!(
            "velocity dimension {r} exceeds the {} available modes",
            u.n_modes()
        )));
    }
    if q > p.n_modes() {
        return Err(Error::dim(format!(
            "pressure dimension {q} exceeds the {} available modes",
            p.n_modes()
        )));
    }
    Ok(*u.grid())
}

/// `conv[j][k] = ∇·(φ_j ⊗ φ_k)`.
fn convection_fields(vel: &VelocityData) -> Result<Vec<Vec<VectorField2D>>> {
    let r = vel.phi.len();
    (0..r)
        .into_par_iter()
        .map(|j| (0..r).map(|k| div_outer_product(&vel.phi[j], &vel.phi[k])).collect())
        .collect()
}

fn matrix(n: usize, m: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> DMatrix<f64> {
    let entries: Vec<f64> = (0..n * m).into_par_iter().map(|k| f(k % n, k / n)).collect();
    DMatrix::from_vec(n, m, entries)
}

fn tensor(n0: usize, n1: usize, n2: usize, f: impl Fn(usize, usize, usize) -> f64 + Sync) -> Tensor3 {
    let entries: Vec<f64> = (0..n0 * n1 * n2)
        .into_par_iter()
        .map(|idx| f(idx / (n1 * n2), (idx / n2) % n1, idx % n2))
        .collect();
    Tensor3::from_vec([n0, n1, n2], entries).expect("shape matches")
}

fn penalty_operators(vel: &VelocityData, grid: &StructuredGrid2D, bc: &BoundaryConditions) -> Result<Vec<PenaltyOperator>> {
    let r = vel.phi.len();
    let mut seen = Vec::new();
    bc.dirichlet
        .iter()
        .map(|dbc| {
            if seen.contains(&dbc.tag) {
                return Err(Error::config(format!(
                    "boundary `{}` has more than one Dirichlet value",
                    dbc.tag.name()
                )));
            }
            seen.push(dbc.tag);
            if !(dbc.value[0].is_finite() && dbc.value[1].is_finite()) {
                return Err(Error::config("Dirichlet value must be finite"));
            }
            let magnitude = dbc.value[0].hypot(dbc.value[1]);
            let direction = if magnitude > 0.0 {
                [dbc.value[0] / magnitude, dbc.value[1] / magnitude]
            } else {
                [1.0, 0.0]
            };
            let tags = [dbc.tag];
            let bdot = |a: &VectorField2D, b: &VectorField2D| {
                boundary_dot(grid, &tags, a.u(), b.u()) + boundary_dot(grid, &tags, a.v(), b.v())
            };
            let unit = VectorField2D::from_fn(*grid, |_, _| direction);
            Ok(PenaltyOperator {
                tag: dbc.tag,
                direction,
                magnitude,
                length: grid.side_length(dbc.tag),
                e: matrix(r, r, |i, j| bdot(&vel.phi[i], &vel.phi[j])),
                d: DVector::from_iterator(r, vel.phi.iter().map(|p| bdot(p, &unit))),
            })
        })
        .collect()
}

fn momentum_from(
    vel: &VelocityData,
    pre: &PressureData,
    conv: &[Vec<VectorField2D>],
    grid: &StructuredGrid2D,
    bc: &BoundaryConditions,
) -> Result<MomentumOperators> {
    let r = vel.phi.len();
    let q = pre.chi.len();
    Ok(MomentumOperators {
        m: matrix(r, r, |i, j| vel.dot(&vel.phi[i], &vel.phi[j])),
        b: matrix(r, r, |i, j| vel.dot(&vel.phi[i], &vel.lap[j])),
        bt: matrix(r, r, |i, j| vel.dot(&vel.phi[i], &vel.gradt[j])),
        c: tensor(r, r, r, |i, j, k| vel.dot(&vel.phi[i], &conv[j][k])),
        h: matrix(r, q, |i, j| vel.dot(&vel.phi[i], &pre.grad[j])),
        penalty: penalty_operators(vel, grid, bc)?,
    })
}

/// `n × ∇χ` on each side as the scalar `n_x ∂_y χ − n_y ∂_x χ`.
fn tangential_derivative(grid: &StructuredGrid2D, chi: &ScalarField, tag: BoundaryTag) -> Vec<f64> {
    let [nx, ny] = tag.normal();
    let dx = d_dx(grid, chi.values());
    let dy = d_dy(grid, chi.values());
    dx.iter().zip(&dy).map(|(gx, gy)| nx * gy - ny * gx).collect()
}

fn ppe_from(
    vel: &VelocityData,
    pre: &PressureData,
    conv: &[Vec<VectorField2D>],
    grid: &StructuredGrid2D,
    bc: &BoundaryConditions,
) -> Result<PpeOperators> {
    let r = vel.phi.len();
    let q = pre.chi.len();
    let tang: Vec<Vec<Vec<f64>>> = pre
        .chi
        .iter()
        .map(|c| BoundaryTag::ALL.iter().map(|&t| tangential_derivative(grid, c, t)).collect())
        .collect();
    let n = matrix(q, r, |i, j| {
        BoundaryTag::ALL
            .iter()
            .enumerate()
            .map(|(s, &t)| boundary_dot(grid, &[t], &tang[i][s], &vel.curl[j]))
            .sum()
    });
    let l = match &bc.pressure_flux {
        None => DVector::zeros(q),
        Some(rf) => {
            grid.check_same(rf.grid())?;
            DVector::from_iterator(
                q,
                pre.chi.iter().map(|c| {
                    BoundaryTag::ALL
                        .iter()
                        .map(|&t| {
                            let [nx, ny] = t.normal();
                            let nr: Vec<f64> =
                                rf.u().iter().zip(rf.v()).map(|(a, b)| nx * a + ny * b).collect();
                            boundary_dot(grid, &[t], c.values(), &nr)
                        })
                        .sum::<f64>()
                }),
            )
        }
    };
    Ok(PpeOperators {
        d: matrix(q, q, |i, j| vel.dot(&pre.grad[i], &pre.grad[j])),
        g: tensor(q, r, r, |i, j, k| vel.dot(&pre.grad[i], &conv[j][k])),
        n,
        l,
    })
}

fn turbulence_from(vel: &VelocityData, pre: &PressureData, nut: &PodBasis, n_nut: usize) -> Result<TurbulenceTensors> {
    if nut.kind() != FieldKind::EddyViscosity {
        return Err(Error::dim("turbulence tensors need an eddy-viscosity basis"));
    }
    if n_nut > nut.n_modes() {
        return Err(Error::dim(format!(
            "eddy-viscosity dimension {n_nut} exceeds the {} available modes",
            nut.n_modes()
        )));
    }
    vel.phi[0].grid().check_same(nut.grid())?;
    let r = vel.phi.len();
    let q = pre.chi.len();
    let eta: Vec<ScalarField> = (0..n_nut).map(|i| nut.scalar_mode(i)).collect::<Result<_>>()?;
    // [j][k]: η_j Δφ_k and ∇·(η_j (∇φ_k)ᵀ)
    let pairs: Vec<(VectorField2D, VectorField2D)> = (0..n_nut * r)
        .into_par_iter()
        .map(|idx| {
            let (j, k) = (idx / r, idx % r);
            Ok((
                scale_vector(&eta[j], &vel.lap[k])?,
                div_grad_transpose(&vel.phi[k], Some(&eta[j]))?,
            ))
        })
        .collect::<Result<_>>()?;
    let p = |j: usize, k: usize| &pairs[j * r + k];
    Ok(TurbulenceTensors {
        ct1: tensor(r, n_nut, r, |i, j, k| vel.dot(&vel.phi[i], &p(j, k).0)),
        ct2: tensor(r, n_nut, r, |i, j, k| vel.dot(&vel.phi[i], &p(j, k).1)),
        ct3: tensor(q, n_nut, r, |i, j, k| vel.dot(&pre.grad[i], &p(j, k).0)),
        ct4: tensor(q, n_nut, r, |i, j, k| vel.dot(&pre.grad[i], &p(j, k).1)),
    })
}

/// Momentum operators from the first `r` velocity and `q` pressure modes.
pub fn assemble_momentum(
    basis_u: &PodBasis,
    basis_p: &PodBasis,
    r: usize,
    q: usize,
    bc: &BoundaryConditions,
) -> Result<MomentumOperators> {
    let grid = check_bases(basis_u, basis_p, r, q)?;
    let vel = VelocityData::new(basis_u, r)?;
    let pre = PressureData::new(basis_p, q)?;
    momentum_from(&vel, &pre, &convection_fields(&vel)?, &grid, bc)
}

pub fn assemble_ppe(
    basis_u: &PodBasis,
    basis_p: &PodBasis,
    r: usize,
    q: usize,
    bc: &BoundaryConditions,
) -> Result<PpeOperators> {
    let grid = check_bases(basis_u, basis_p, r, q)?;
    let vel = VelocityData::new(basis_u, r)?;
    let pre = PressureData::new(basis_p, q)?;
    ppe_from(&vel, &pre, &convection_fields(&vel)?, &grid, bc)
}

pub fn assemble_turbulence(
    basis_u: &PodBasis,
    basis_p: &PodBasis,
    basis_nut: &PodBasis,
    r: usize,
    q: usize,
    n_nut: usize,
) -> Result<TurbulenceTensors> {
    check_bases(basis_u, basis_p, r, q)?;
    let vel = VelocityData::new(basis_u, r)?;
    let pre = PressureData::new(basis_p, q)?;
    turbulence_from(&vel, &pre, basis_nut, n_nut)
}

/// Bases feeding the operator assembly.
#[derive(Clone, Copy, Debug)]
pub struct Bases<'a> {
    pub velocity: &'a PodBasis,
    pub pressure: &'a PodBasis,
    pub eddy_viscosity: Option<&'a PodBasis>,
}

/// Full operator set at `(r, q)`; turbulence tensors when an eddy-viscosity
/// basis is given and `n_nut > 0`.
pub fn assemble(bases: Bases<'_>, r: usize, q: usize, n_nut: usize, bc: &BoundaryConditions) -> Result<ReducedOperators> {
    let grid = check_bases(bases.velocity, bases.pressure, r, q)?;
    let vel = VelocityData::new(bases.velocity, r)?;
    let pre = PressureData::new(bases.pressure, q)?;
    let conv = convection_fields(&vel)?;
    let turbulence = match (bases.eddy_viscosity, n_nut) {
        (Some(nut), n) if n > 0 => Some(turbulence_from(&vel, &pre, nut, n)?),
        (None, n) if n > 0 => {
            return Err(Error::config("N_nut > 0 requires an eddy-viscosity basis"))
        }
        _ => None,
    };
    Ok(ReducedOperators {
        momentum: momentum_from(&vel, &pre, &conv, &grid, bc)?,
        ppe: ppe_from(&vel, &pre, &conv, &grid, bc)?,
        turbulence,
    })
}

/// Operators at `(d, h)` and their leading `(r, q)` blocks.
#[allow(clippy::too_many_arguments)]
pub fn assemble_enriched(
    bases: Bases<'_>,
    r: usize,
    q: usize,
    d: usize,
    h: usize,
    n_nut: usize,
    bc: &BoundaryConditions,
) -> Result<EnrichedOperators> {
    if d < r || h < q {
        return Err(Error::config(format!(
            "enriched dimensions must satisfy d ≥ r and h ≥ q (got d = {d}, r = {r}, h = {h}, q = {q})"
        )));
    }
    let enriched = assemble(bases, d, h, n_nut, bc)?;
    let reduced = enriched.restrict(r, q)?;
    Ok(EnrichedOperators { reduced, enriched })
}

fn restrict_matrix(m: &DMatrix<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    m.view((0, 0), (rows, cols)).into_owned()
}

impl ReducedOperators {
    pub fn r(&self) -> usize {
        self.momentum.m.nrows()
    }

    pub fn q(&self) -> usize {
        self.ppe.d.nrows()
    }

    pub fn n_nut(&self) -> usize {
        self.turbulence.as_ref().map_or(0, |t| t.ct1.dims()[1])
    }

    /// Leading `(r, q)` sub-blocks of every operator.
    pub fn restrict(&self, r: usize, q: usize) -> Result<ReducedOperators> {
        if r > self.r() || q > self.q() {
            return Err(Error::dim(format!(
                "cannot restrict ({}, {}) operators to ({r}, {q})",
                self.r(),
                self.q()
            )));
        }
        let mo = &self.momentum;
        let pp = &self.ppe;
        let nt = self.n_nut();
        Ok(ReducedOperators {
            momentum: MomentumOperators {
                m: restrict_matrix(&mo.m, r, r),
                b: restrict_matrix(&mo.b, r, r),
                bt: restrict_matrix(&mo.bt, r, r),
                c: mo.c.restrict(r, r, r)?,
                h: restrict_matrix(&mo.h, r, q),
                penalty: mo
                    .penalty
                    .iter()
                    .map(|p| PenaltyOperator {
                        e: restrict_matrix(&p.e, r, r),
                        d: p.d.rows(0, r).into_owned(),
                        ..p.clone()
                    })
                    .collect(),
            },
            ppe: PpeOperators {
                d: restrict_matrix(&pp.d, q, q),
                g: pp.g.restrict(q, r, r)?,
                n: restrict_matrix(&pp.n, q, r),
                l: pp.l.rows(0, q).into_owned(),
            },
            turbulence: match &self.turbulence {
                None => None,
                Some(t) => Some(TurbulenceTensors {
                    ct1: t.ct1.restrict(r, nt, r)?,
                    ct2: t.ct2.restrict(r, nt, r)?,
                    ct3: t.ct3.restrict(q, nt, r)?,
                    ct4: t.ct4.restrict(q, nt, r)?,
                }),
            },
        })
    }

    /// Largest absolute difference to another operator set of the same shape.
    pub fn max_difference(&self, other: &ReducedOperators) -> Result<f64> {
        if self.r() != other.r() || self.q() != other.q() || self.n_nut() != other.n_nut() {
            return Err(Error::dim("operator sets have different dimensions"));
        }
        let md = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).abs().max();
        let td = |a: &Tensor3, b: &Tensor3| {
            a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        };
        let (a, b) = (&self.momentum, &other.momentum);
        let mut worst = md(&a.m, &b.m)
            .max(md(&a.b, &b.b))
            .max(md(&a.bt, &b.bt))
            .max(td(&a.c, &b.c))
            .max(md(&a.h, &b.h));
        for (p, o) in a.penalty.iter().zip(&b.penalty) {
            worst = worst.max(md(&p.e, &o.e)).max((&p.d - &o.d).abs().max());
        }
        let (a, b) = (&self.ppe, &other.ppe);
        worst = worst
            .max(md(&a.d, &b.d))
            .max(td(&a.g, &b.g))
            .max(md(&a.n, &b.n))
            .max((&a.l - &b.l).abs().max());
        if let (Some(a), Some(b)) = (&self.turbulence, &other.turbulence) {
            worst = worst
                .max(td(&a.ct1, &b.ct1))
                .max(td(&a.ct2, &b.ct2))
                .max(td(&a.ct3, &b.ct3))
                .max(td(&a.ct4, &b.ct4));
        }
        Ok(worst)
    }

    /// `‖u_r|_Γ_D − U_BC‖_{L²(Γ_D)}` summed over the penalised sides.
    pub fn boundary_mismatch(&self, a: &[f64]) -> f64 {
        let av = DVector::from_column_slice(&a[..self.r()]);
        self.momentum
            .penalty
            .iter()
            .map(|p| {
                let quad = av.dot(&(&p.e * &av));
                quad - 2.0 * p.magnitude * p.d.dot(&av) + p.magnitude * p.magnitude * p.length
            })
            .sum::<f64>()
            .max(0.0)
            .sqrt()
    }
}

// ---------------------------------------------------------------------------
// Archive
// ---------------------------------------------------------------------------

/// Header `DDROM-OPS v1 r q n_nut n_penalty` followed by one
/// `tag:ux:uy` token per penalised side. Payload, in order: M, B, B_T, C, H,
/// per side (length, E, D), D, G, N, L, then C_T1..C_T4 when `n_nut > 0`.
/// Matrices are column-major, tensors row-major in `(i, j, k)`.
pub fn write_operators(ops: &ReducedOperators, path: impl AsRef<Path>) -> Result<()> {
    let mo = &ops.momentum;
    let mut header = format!(
        "{OPS_MAGIC} {OPS_VERSION} {} {} {} {}",
        ops.r(),
        ops.q(),
        ops.n_nut(),
        mo.penalty.len()
    );
    for p in &mo.penalty {
        header.push_str(&format!(
            " {}:{}:{}",
            p.tag.name(),
            fmt_f64(p.magnitude * p.direction[0]),
            fmt_f64(p.magnitude * p.direction[1])
        ));
    }
    let mut w = ContainerWriter::new(&header);
    for m in [&mo.m, &mo.b, &mo.bt] {
        w.slice(m.as_slice());
    }
    w.slice(mo.c.data());
    w.slice(mo.h.as_slice());
    for p in &mo.penalty {
        w.f64(p.length);
        w.slice(p.e.as_slice());
        w.slice(p.d.as_slice());
    }
    w.slice(ops.ppe.d.as_slice());
    w.slice(ops.ppe.g.data());
    w.slice(ops.ppe.n.as_slice());
    w.slice(ops.ppe.l.as_slice());
    if let Some(t) = &ops.turbulence {
        for x in [&t.ct1, &t.ct2, &t.ct3, &t.ct4] {
            w.slice(x.data());
        }
    }
    w.write_to(path.as_ref())
}

pub fn read_operators(path: impl AsRef<Path>) -> Result<ReducedOperators> {
    let mut rd = ContainerReader::open(path.as_ref(), OPS_MAGIC, OPS_VERSION)?;
    let r: usize = rd.field(0, "r")?;
    let q: usize = rd.field(1, "q")?;
    let nt: usize = rd.field(2, "n_nut")?;
    let np: usize = rd.field(3, "n_penalty")?;
    rd.expect_field_count(4 + np)?;
    let mut sides = Vec::with_capacity(np);
    for s in 0..np {
        let tok = rd.fields()[4 + s].clone();
        let bad = || Error::Format {
            offset: 0,
            message: format!("malformed penalty token `{tok}`"),
        };
        let parts: Vec<&str> = tok.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let tag: BoundaryTag = parts[0].parse().map_err(|_| bad())?;
        let ux: f64 = parts[1].parse().map_err(|_| bad())?;
        let uy: f64 = parts[2].parse().map_err(|_| bad())?;
        sides.push((tag, [ux, uy]));
    }
    let mat = |rd: &mut ContainerReader, n: usize, m: usize| -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_vec(n, m, rd.vec(n * m)?))
    };
    let m = mat(&mut rd, r, r)?;
    let b = mat(&mut rd, r, r)?;
    let bt = mat(&mut rd, r, r)?;
    let c = Tensor3::from_vec([r, r, r], rd.vec(r * r * r)?)?;
    let h = mat(&mut rd, r, q)?;
    let mut penalty = Vec::with_capacity(np);
    for (tag, value) in sides {
        let length = rd.f64()?;
        let e = mat(&mut rd, r, r)?;
        let d = DVector::from_vec(rd.vec(r)?);
        let magnitude = value[0].hypot(value[1]);
        let direction = if magnitude > 0.0 {
            [value[0] / magnitude, value[1] / magnitude]
        } else {
            [1.0, 0.0]
        };
        penalty.push(PenaltyOperator {
            tag,
            direction,
            magnitude,
            length,
            e,
            d,
        });
    }
    let d = mat(&mut rd, q, q)?;
    let g = Tensor3::from_vec([q, r, r], rd.vec(q * r * r)?)?;
    let n = mat(&mut rd, q, r)?;
    let l = DVector::from_vec(rd.vec(q)?);
    let turbulence = if nt > 0 {
        Some(TurbulenceTensors {
            ct1: Tensor3::from_vec([r, nt, r], rd.vec(r * nt * r)?)?,
            ct2: Tensor3::from_vec([r, nt, r], rd.vec(r * nt * r)?)?,
            ct3: Tensor3::from_vec([q, nt, r], rd.vec(q * nt * r)?)?,
            ct4: Tensor3::from_vec([q, nt, r], rd.vec(q * nt * r)?)?,
        })
    } else {
        None
    };
    rd.finish()?;
    Ok(ReducedOperators {
        momentum: MomentumOperators {
            m,
            b,
            bt,
            c,
            h,
            penalty,
        },
        ppe: PpeOperators { d, g, n, l },
        turbulence,
    })
}
