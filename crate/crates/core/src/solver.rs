//! Time integration of the reduced velocity–pressure system with optional
//! eddy-viscosity and correction closures.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::ReducedOperators;

/// Which closures enter the reduced system.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RomMode {
    #[default]
    Standard,
    /// Eddy-viscosity closure `g = 𝒢(a, ν)`.
    Physics,
    /// Correction closure `τ = 𝓜(a, b, ν)`.
    Purely,
    /// Both.
    Hybrid,
}

impl RomMode {
    pub fn name(self) -> &'static str {
        match self {
            RomMode::Standard => "standard",
            RomMode::Physics => "physics",
            RomMode::Purely => "purely",
            RomMode::Hybrid => "hybrid",
        }
    }

    pub fn uses_eddy_viscosity(self) -> bool {
        matches!(self, RomMode::Physics | RomMode::Hybrid)
    }

    pub fn uses_correction(self) -> bool {
        matches!(self, RomMode::Purely | RomMode::Hybrid)
    }
}

impl std::str::FromStr for RomMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(RomMode::Standard),
            "physics" => Ok(RomMode::Physics),
            "purely" => Ok(RomMode::Purely),
            "hybrid" => Ok(RomMode::Hybrid),
            other => Err(Error::config(format!(
                "unknown ROM mode `{other}` (expected standard, physics, purely or hybrid)"
            ))),
        }
    }
}

/// How closure outputs are coupled to the Newton iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosureCoupling {
    /// Evaluated once per step at the previous converged state.
    #[default]
    Lagged,
    /// Re-evaluated at every Newton iterate; its Jacobian is taken by finite
    /// differences.
    Implicit,
}

/// Everything a closure may depend on.
#[derive(Clone, Copy, Debug)]
pub struct ClosureInput<'a> {
    /// Time level the residual is formed for.
    pub level: usize,
    /// Time of that level.
    pub t: f64,
    pub nu: f64,
    pub a: &'a [f64],
    pub b: &'a [f64],
    /// Converged states `(a, b)` preceding `(a, b)`, oldest first.
    pub history: &'a [(Vec<f64>, Vec<f64>)],
}

/// A map from reduced state to eddy-viscosity coefficients or corrections.
pub trait Closure: Send + Sync {
    fn output_dim(&self) -> usize;
    fn evaluate(&self, input: &ClosureInput<'_>) -> Result<Vec<f64>>;
}

/// Closure read from a table indexed by time level.
#[derive(Clone, Debug, PartialEq)]
pub struct TableClosure {
    rows: Vec<Vec<f64>>,
}

impl TableClosure {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Closure("table rows have different lengths".into()));
        }
        Ok(Self { rows })
    }
}

impl Closure for TableClosure {
    fn output_dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn evaluate(&self, input: &ClosureInput<'_>) -> Result<Vec<f64>> {
        self.rows.get(input.level).cloned().ok_or_else(|| {
            Error::Closure(format!(
                "table closure has {} rows, level {} requested",
                self.rows.len(),
                input.level
            ))
        })
    }
}

/// Time-independent closure, e.g. a fixed forcing for stress tests.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantClosure(pub Vec<f64>);

impl Closure for ConstantClosure {
    fn output_dim(&self) -> usize {
        self.0.len()
    }

    fn evaluate(&self, _input: &ClosureInput<'_>) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

#[derive(Clone, Default)]
pub struct ClosureHooks {
    pub mode: RomMode,
    pub eddy_viscosity: Option<Arc<dyn Closure>>,
    pub correction: Option<Arc<dyn Closure>>,
    pub coupling: ClosureCoupling,
}

impl std::fmt::Debug for ClosureHooks {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClosureHooks")
            .field("mode", &self.mode)
            .field("eddy_viscosity", &self.eddy_viscosity.is_some())
            .field("correction", &self.correction.is_some())
            .field("coupling", &self.coupling)
            .finish()
    }
}

impl ClosureHooks {
    pub fn standard() -> Self {
        Self::default()
    }

    pub fn validate(&self, ops: &ReducedOperators) -> Result<()> {
        let (r, q) = (ops.r(), ops.q());
        match (self.mode.uses_eddy_viscosity(), &self.eddy_viscosity) {
            (true, None) => {
                return Err(Error::config(format!(
                    "{} mode needs an eddy-viscosity model",
                    self.mode.name()
                )))
            }
            (true, Some(g)) => {
                if ops.turbulence.is_none() {
                    return Err(Error::config("eddy-viscosity closure needs turbulence tensors"));
                }
                if g.output_dim() != ops.n_nut() {
                    return Err(Error::dim(format!(
                        "eddy-viscosity model outputs {} coefficients, operators expect {}",
                        g.output_dim(),
                        ops.n_nut()
                    )));
                }
            }
            _ => {}
        }
        match (self.mode.uses_correction(), &self.correction) {
            (true, None) => {
                return Err(Error::config(format!(
                    "{} mode needs a correction model",
                    self.mode.name()
                )))
            }
            (true, Some(t)) if t.output_dim() != r + q => {
                return Err(Error::dim(format!(
                    "correction model outputs {}, system has r + q = {}",
                    t.output_dim(),
                    r + q
                )))
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub dt: f64,
    pub n_steps: usize,
    /// Penalty weight of the weak Dirichlet conditions.
    pub penalty: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// `‖x‖∞` beyond which the run is declared blown up.
    pub blowup_limit: f64,
    /// Newton-matrix condition number reported as ill-conditioned.
    pub condition_threshold: f64,
    /// Re-solve the pressure equation for `b(t0)` before the first step.
    pub correct_initial_pressure: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            n_steps: 100,
            penalty: 0.0,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            blowup_limit: 1e8,
            condition_threshold: 1e8,
            correct_initial_pressure: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::config("solver dt must be positive"));
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::config("newton_tol must be positive"));
        }
        if self.newton_max_iter == 0 {
            return Err(Error::config("newton_max_iter must be at least 1"));
        }
        if !(self.penalty >= 0.0) {
            return Err(Error::config("penalty must be non-negative"));
        }
        Ok(())
    }
}

/// Reduced state `(t, a, b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RomState {
    pub t: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Time-derivative approximation used for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeScheme<'a> {
    /// `(a − a₋₁)/Δt`
    BackwardEuler { a_prev: &'a [f64] },
    /// `(3a − 4a₋₁ + a₋₂)/(2Δt)`
    Bdf2 { a_prev: &'a [f64], a_prev2: &'a [f64] },
    /// No time derivative (algebraic residual only).
    Steady,
}

impl TimeScheme<'_> {
    fn derivative(&self, a: &[f64], dt: f64) -> Vec<f64> {
        match self {
            TimeScheme::BackwardEuler { a_prev } => a.iter().zip(a_prev.iter()).map(|(x, p)| (x - p) / dt).collect(),
            TimeScheme::Bdf2 { a_prev, a_prev2 } => a
                .iter()
                .zip(a_prev.iter())
                .zip(a_prev2.iter())
                .map(|((x, p), pp)| (3.0 * x - 4.0 * p + pp) / (2.0 * dt))
                .collect(),
            TimeScheme::Steady => vec![0.0; a.len()],
        }
    }

    fn coefficient(&self, dt: f64) -> f64 {
        match self {
            TimeScheme::BackwardEuler { .. } => 1.0 / dt,
            TimeScheme::Bdf2 { .. } => 1.5 / dt,
            TimeScheme::Steady => 0.0,
        }
    }
}

/// Closure values entering one residual evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClosureValues<'a> {
    pub g: Option<&'a [f64]>,
    pub tau: Option<&'a [f64]>,
}

fn mat_vec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(x)).iter().copied().collect()
}

/// Residual of the reduced system, momentum rows first:
///
/// `M ȧ − ν(B + B_T)a + aᵀCa + Hb − τ_pen Σ_k (U_k D^k − E^k a) − gᵀ(C_T1 + C_T2)a + τ_u`
/// `Db + aᵀGa − gᵀ(C_T3 + C_T4)a − νNa − L + τ_p`
pub fn residual(
    ops: &ReducedOperators,
    nu: f64,
    penalty: f64,
    a: &[f64],
    b: &[f64],
    scheme: TimeScheme<'_>,
    dt: f64,
    closure: ClosureValues<'_>,
) -> Vec<f64> {
    let (r, q) = (ops.r(), ops.q());
    let mo = &ops.momentum;
    let pp = &ops.ppe;
    let mut out = vec![0.0; r + q];

    let adot = scheme.derivative(a, dt);
    let m_adot = mat_vec(&mo.m, &adot);
    let visc = mat_vec(&(&mo.b + &mo.bt), a);
    let conv = mo.c.contract(a, a);
    let hb = mat_vec(&mo.h, b);
    for i in 0..r {
        out[i] = m_adot[i] - nu * visc[i] + conv[i] + hb[i];
    }
    for p in &mo.penalty {
        let ea = mat_vec(&p.e, a);
        for i in 0..r {
            out[i] -= penalty * (p.magnitude * p.d[i] - ea[i]);
        }
    }
    let db = mat_vec(&pp.d, b);
    let ga = pp.g.contract(a, a);
    let na = mat_vec(&pp.n, a);
    for i in 0..q {
        out[r + i] = db[i] + ga[i] - nu * na[i] - pp.l[i];
    }
    if let (Some(g), Some(t)) = (closure.g, &ops.turbulence) {
        let t12: Vec<f64> = t.ct1.contract(g, a).iter().zip(t.ct2.contract(g, a)).map(|(x, y)| x + y).collect();
        let t34: Vec<f64> = t.ct3.contract(g, a).iter().zip(t.ct4.contract(g, a)).map(|(x, y)| x + y).collect();
        for i in 0..r {
            out[i] -= t12[i];
        }
        for i in 0..q {
            out[r + i] -= t34[i];
        }
    }
    if let Some(tau) = closure.tau {
        for (o, t) in out.iter_mut().zip(tau) {
            *o += t;
        }
    }
    out
}

/// Analytic Jacobian of [`residual`] with respect to `(a, b)` at fixed
/// closure values.
#[allow(clippy::too_many_arguments)]
pub fn jacobian(
    ops: &ReducedOperators,
    nu: f64,
    penalty: f64,
    a: &[f64],
    scheme: TimeScheme<'_>,
    dt: f64,
    g: Option<&[f64]>,
) -> DMatrix<f64> {
    let (r, q) = (ops.r(), ops.q());
    let mo = &ops.momentum;
    let pp = &ops.ppe;
    let mut j = DMatrix::zeros(r + q, r + q);
    let c0 = scheme.coefficient(dt);
    for i in 0..r {
        for m in 0..r {
            let mut v = c0 * mo.m[(i, m)] - nu * (mo.b[(i, m)] + mo.bt[(i, m)]);
            for k in 0..r {
                v += (mo.c.get(i, m, k) + mo.c.get(i, k, m)) * a[k];
            }
            for p in &mo.penalty {
                v += penalty * p.e[(i, m)];
            }
            j[(i, m)] = v;
        }
        for m in 0..q {
            j[(i, r + m)] = mo.h[(i, m)];
        }
    }
    for i in 0..q {
        for m in 0..r {
            let mut v = -nu * pp.n[(i, m)];
            for k in 0..r {
                v += (pp.g.get(i, m, k) + pp.g.get(i, k, m)) * a[k];
            }
            j[(r + i, m)] = v;
        }
        for m in 0..q {
            j[(r + i, r + m)] = pp.d[(i, m)];
        }
    }
    if let (Some(g), Some(t)) = (g, &ops.turbulence) {
        for (jn, gj) in g.iter().enumerate() {
            for m in 0..r {
                for i in 0..r {
                    j[(i, m)] -= gj * (t.ct1.get(i, jn, m) + t.ct2.get(i, jn, m));
                }
                for i in 0..q {
                    j[(r + i, m)] -= gj * (t.ct3.get(i, jn, m) + t.ct4.get(i, jn, m));
                }
            }
        }
    }
    j
}

/// 2-norm condition number `σ_max/σ_min`.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// How a run ended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    /// The state became non-finite or exceeded the blow-up limit while
    /// advancing to `step`; `last_state` is the last finite converged state.
    BlowUp {
        step: usize,
        t: f64,
        reason: String,
        last_state: RomState,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub nu: f64,
    pub mode: RomMode,
    pub states: Vec<RomState>,
    /// Newton iterations per step (0 for the initial state).
    pub newton_iters: Vec<usize>,
    /// Final residual ∞-norm per step.
    pub residual_norms: Vec<f64>,
    pub max_condition: f64,
    pub ill_conditioned: bool,
    /// Steps that stopped at machine precision above `newton_tol`.
    pub roundoff_limited_steps: usize,
    pub outcome: Outcome,
}

impl Trajectory {
    pub fn is_blowup(&self) -> bool {
        matches!(self.outcome, Outcome::BlowUp { .. })
    }

    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }

    pub fn a_rows(&self) -> Vec<Vec<f64>> {
        self.states.iter().map(|s| s.a.clone()).collect()
    }

    pub fn b_rows(&self) -> Vec<Vec<f64>> {
        self.states.iter().map(|s| s.b.clone()).collect()
    }
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct StepContext<'a> {
    ops: &'a ReducedOperators,
    hooks: &'a ClosureHooks,
    nu: f64,
    cfg: &'a SolverConfig,
}

impl StepContext<'_> {
    fn closures(
        &self,
        level: usize,
        t: f64,
        a: &[f64],
        b: &[f64],
        history: &[(Vec<f64>, Vec<f64>)],
    ) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
        let input = ClosureInput {
            level,
            t,
            nu: self.nu,
            a,
            b,
            history,
        };
        let g = match (&self.hooks.eddy_viscosity, self.hooks.mode.uses_eddy_viscosity()) {
            (Some(m), true) => Some(m.evaluate(&input)?),
            _ => None,
        };
        let tau = match (&self.hooks.correction, self.hooks.mode.uses_correction()) {
            (Some(m), true) => Some(m.evaluate(&input)?),
            _ => None,
        };
        for v in g.iter().chain(tau.iter()) {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Closure(format!("closure produced a non-finite value at level {level}")));
            }
        }
        Ok((g, tau))
    }

    fn residual(&self, a: &[f64], b: &[f64], scheme: TimeScheme<'_>, g: Option<&[f64]>, tau: Option<&[f64]>) -> Vec<f64> {
        residual(self.ops, self.nu, self.cfg.penalty, a, b, scheme, self.cfg.dt, ClosureValues { g, tau })
    }

    /// Finite-difference Jacobian of the closure contribution
    /// `−g(x)ᵀ(C_T)a + τ(x)` with `a` held at its current value in the
    /// turbulence product (its explicit dependence is in the analytic part).
    fn closure_jacobian(
        &self,
        level: usize,
        t: f64,
        x: &[f64],
        history: &[(Vec<f64>, Vec<f64>)],
        g0: Option<&[f64]>,
        tau0: Option<&[f64]>,
    ) -> Result<DMatrix<f64>> {
        let (r, q) = (self.ops.r(), self.ops.q());
        let n = r + q;
        let a0 = &x[..r];
        let contribution = |g: Option<&[f64]>, tau: Option<&[f64]>| -> Vec<f64> {
            let mut out = vec![0.0; n];
            if let (Some(g), Some(tt)) = (g, &self.ops.turbulence) {
                let t12 = tt.ct1.contract(g, a0);
                let t12b = tt.ct2.contract(g, a0);
                let t34 = tt.ct3.contract(g, a0);
                let t34b = tt.ct4.contract(g, a0);
                for i in 0..r {
                    out[i] -= t12[i] + t12b[i];
                }
                for i in 0..q {
                    out[r + i] -= t34[i] + t34b[i];
                }
            }
            if let Some(tau) = tau {
                for (o, v) in out.iter_mut().zip(tau) {
                    *o += v;
                }
            }
            out
        };
        let base = contribution(g0, tau0);
        let mut jac = DMatrix::zeros(n, n);
        for m in 0..n {
            let h = 1e-7 * x[m].abs().max(1.0);
            let mut xp = x.to_vec();
            xp[m] += h;
            let (g, tau) = self.closures(level, t, &xp[..r], &xp[r..], history)?;
            let c = contribution(g.as_deref(), tau.as_deref());
            for i in 0..n {
                jac[(i, m)] = (c[i] - base[i]) / h;
            }
        }
        Ok(jac)
    }
}

enum StepResult {
    Converged { x: Vec<f64>, iters: usize, res: f64, cond: f64, roundoff: bool },
    BlowUp(String),
}

fn newton_step(
    ctx: &StepContext<'_>,
    level: usize,
    t: f64,
    x0: &[f64],
    scheme: TimeScheme<'_>,
    history: &[(Vec<f64>, Vec<f64>)],
) -> Result<StepResult> {
    let (r, _q) = (ctx.ops.r(), ctx.ops.q());
    let cfg = ctx.cfg;
    let implicit = ctx.hooks.coupling == ClosureCoupling::Implicit;
    // lagged closures see the last converged state
    let (g_lag, tau_lag) = if implicit {
        (None, None)
    } else {
        ctx.closures(level, t, &x0[..r], &x0[r..], &history[..history.len().saturating_sub(1)])?
    };
    let mut x = x0.to_vec();
    let mut res_norm = f64::INFINITY;
    for iter in 0..=cfg.newton_max_iter {
        let (g, tau) = if implicit {
            ctx.closures(level, t, &x[..r], &x[r..], history)?
        } else {
            (g_lag.clone(), tau_lag.clone())
        };
        let res = ctx.residual(&x[..r], &x[r..], scheme, g.as_deref(), tau.as_deref());
        res_norm = inf_norm(&res);
        if !res_norm.is_finite() {
            return Ok(StepResult::BlowUp(format!("non-finite residual at Newton iteration {iter}")));
        }
        let mut jac = jacobian(ctx.ops, ctx.nu, cfg.penalty, &x[..r], scheme, cfg.dt, g.as_deref());
        if implicit && (g.is_some() || tau.is_some()) {
            jac += ctx.closure_jacobian(level, t, &x, history, g.as_deref(), tau.as_deref())?;
        }
        if res_norm <= cfg.newton_tol {
            return Ok(StepResult::Converged {
                x,
                iters: iter,
                res: res_norm,
                cond: condition_number(&jac),
                roundoff: false,
            });
        }
        if iter == cfg.newton_max_iter {
            break;
        }
        let rhs = -DVector::from_vec(res);
        let dx = match jac.clone().lu().solve(&rhs) {
            Some(dx) => dx,
            None => {
                return Err(Error::StepFailure {
                    step: level,
                    t,
                    iterations: iter,
                    residual: res_norm,
                    state: x,
                })
            }
        };
        let step_size = dx.amax();
        for (xi, d) in x.iter_mut().zip(dx.iter()) {
            *xi += d;
        }
        let xn = inf_norm(&x);
        if !xn.is_finite() || xn > cfg.blowup_limit {
            return Ok(StepResult::BlowUp(format!(
                "state norm {xn:.3e} exceeds the blow-up limit {:.1e}",
                cfg.blowup_limit
            )));
        }
        // the update no longer changes the iterate: residual is at round-off
        if step_size <= 64.0 * f64::EPSILON * xn.max(1.0) {
            let (g, tau) = if implicit {
                ctx.closures(level, t, &x[..r], &x[r..], history)?
            } else {
                (g_lag.clone(), tau_lag.clone())
            };
            let res = ctx.residual(&x[..r], &x[r..], scheme, g.as_deref(), tau.as_deref());
            let rn = inf_norm(&res);
            let scale = residual_scale(ctx, &x) + tau.as_deref().map_or(0.0, inf_norm);
            if rn <= cfg.newton_tol.max(64.0 * f64::EPSILON * scale) {
                return Ok(StepResult::Converged {
                    x,
                    iters: iter + 1,
                    res: rn,
                    cond: condition_number(&jac),
                    roundoff: rn > cfg.newton_tol,
                });
            }
        }
    }
    Err(Error::StepFailure {
        step: level,
        t,
        iterations: cfg.newton_max_iter,
        residual: res_norm,
        state: x,
    })
}

/// Magnitude of the largest individual term of the residual, used to judge
/// whether a residual is at round-off level.
fn residual_scale(ctx: &StepContext<'_>, x: &[f64]) -> f64 {
    let r = ctx.ops.r();
    let xn = inf_norm(x).max(1.0);
    let mo = &ctx.ops.momentum;
    let mut s = (mo.m.amax() / ctx.cfg.dt + ctx.nu * (mo.b.amax() + mo.bt.amax())) * xn
        + mo.c.max_abs() * xn * xn
        + mo.h.amax() * xn
        + ctx.ops.ppe.d.amax() * xn
        + ctx.ops.ppe.g.max_abs() * xn * xn;
    for p in &mo.penalty {
        s += ctx.cfg.penalty * (p.e.amax() * xn + p.magnitude * p.d.amax());
    }
    s * (r as f64)
}

/// Solves the pressure equation for `b` at fixed `a` (initial consistency).
fn correct_pressure(ctx: &StepContext<'_>, t0: f64, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let (r, q) = (ctx.ops.r(), ctx.ops.q());
    let (g, tau) = ctx.closures(0, t0, a, b, &[])?;
    let zero_b = vec![0.0; q];
    let res = ctx.residual(a, &zero_b, TimeScheme::Steady, g.as_deref(), tau.as_deref());
    let rhs = -DVector::from_column_slice(&res[r..]);
    match ctx.ops.ppe.d.clone().lu().solve(&rhs) {
        Some(bv) => Ok(bv.iter().copied().collect()),
        None => Ok(b.to_vec()),
    }
}

/// Integrates from `initial` with an implicit-Euler first step followed by
/// BDF2, Newton at every step.
pub fn solve(
    initial: &RomState,
    ops: &ReducedOperators,
    hooks: &ClosureHooks,
    nu: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    hooks.validate(ops)?;
    let (r, q) = (ops.r(), ops.q());
    if initial.a.len() != r || initial.b.len() != q {
        return Err(Error::dim(format!(
            "initial state has ({}, {}) coefficients, operators are ({r}, {q})",
            initial.a.len(),
            initial.b.len()
        )));
    }
    let ctx = StepContext { ops, hooks, nu, cfg };
    let mut b0 = initial.b.clone();
    if cfg.correct_initial_pressure && q > 0 {
        b0 = correct_pressure(&ctx, initial.t, &initial.a, &initial.b)?;
    }
    let mut traj = Trajectory {
        nu,
        mode: hooks.mode,
        states: vec![RomState {
            t: initial.t,
            a: initial.a.clone(),
            b: b0.clone(),
        }],
        newton_iters: vec![0],
        residual_norms: vec![0.0],
        max_condition: 0.0,
        ill_conditioned: false,
        roundoff_limited_steps: 0,
        outcome: Outcome::Completed,
    };
    let mut history: Vec<(Vec<f64>, Vec<f64>)> = vec![(initial.a.clone(), b0)];
    for n in 1..=cfg.n_steps {
        let t = initial.t + n as f64 * cfg.dt;
        let prev = traj.states.last().expect("non-empty");
        let x0: Vec<f64> = prev.a.iter().chain(prev.b.iter()).copied().collect();
        let a_prev = prev.a.clone();
        let a_prev2 = if n >= 2 { Some(traj.states[n - 2].a.clone()) } else { None };
        let scheme = match &a_prev2 {
            None => TimeScheme::BackwardEuler { a_prev: &a_prev },
            Some(a2) => TimeScheme::Bdf2 { a_prev: &a_prev, a_prev2: a2 },
        };
        match newton_step(&ctx, n, t, &x0, scheme, &history)? {
            StepResult::Converged { x, iters, res, cond, roundoff } => {
                traj.max_condition = traj.max_condition.max(cond);
                if roundoff {
                    traj.roundoff_limited_steps += 1;
                }
                let state = RomState {
                    t,
                    a: x[..r].to_vec(),
                    b: x[r..].to_vec(),
                };
                history.push((state.a.clone(), state.b.clone()));
                traj.states.push(state);
                traj.newton_iters.push(iters);
                traj.residual_norms.push(res);
            }
            StepResult::BlowUp(reason) => {
                traj.outcome = Outcome::BlowUp {
                    step: n,
                    t,
                    reason,
                    last_state: traj.states.last().expect("non-empty").clone(),
                };
                break;
            }
        }
    }
    traj.ill_conditioned = traj.max_condition > cfg.condition_threshold;
    Ok(traj)
}

/// One row of a penalty sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltySweepRow {
    pub penalty: f64,
    /// Boundary mismatch at the final state (`NaN` if the run failed).
    pub mismatch: f64,
    /// Newton-matrix condition number at the initial state.
    pub condition: f64,
    pub ill_conditioned: bool,
    pub status: String,
}

/// Runs the solver for each penalty weight and reports
/// `‖u_r|_Γ_D − U_BC‖_{L²(Γ_D)}` at the final time.
pub fn sweep_penalty(
    initial: &RomState,
    ops: &ReducedOperators,
    hooks: &ClosureHooks,
    nu: f64,
    cfg: &SolverConfig,
    penalties: &[f64],
) -> Result<Vec<PenaltySweepRow>> {
    penalties
        .iter()
        .map(|&tau| {
            let c = SolverConfig { penalty: tau, ..cfg.clone() };
            let jac0 = jacobian(
                ops,
                nu,
                tau,
                &initial.a,
                TimeScheme::Bdf2 { a_prev: &initial.a, a_prev2: &initial.a },
                c.dt,
                None,
            );
            let condition = condition_number(&jac0);
            let (mismatch, status) = match solve(initial, ops, hooks, nu, &c) {
                Ok(tr) if !tr.is_blowup() => (
                    ops.boundary_mismatch(&tr.states.last().expect("non-empty").a),
                    "completed".to_string(),
                ),
                Ok(_) => (f64::NAN, "blow_up".to_string()),
                Err(Error::StepFailure { step, .. }) => (f64::NAN, format!("newton_failure_at_step_{step}")),
                Err(e) => return Err(e),
            };
            Ok(PenaltySweepRow {
                penalty: tau,
                mismatch,
                condition,
                ill_conditioned: condition > cfg.condition_threshold,
                status,
            })
        })
        .collect()
}

/// Writes `t, a_1..a_r, b_1..b_q, newton_iters, residual_norm`; on blow-up
/// also writes `<path>.blowup.json`.
pub fn write_trajectory_csv(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let (r, q) = traj.states.first().map_or((0, 0), |s| (s.a.len(), s.b.len()));
    let mut header = vec!["t".to_string()];
    header.extend((1..=r).map(|i| format!("a_{i}")));
    header.extend((1..=q).map(|i| format!("b_{i}")));
    header.push("newton_iters".into());
    header.push("residual_norm".into());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (k, s) in traj.states.iter().enumerate() {
        let mut rec = vec![format!("{:?}", s.t)];
        rec.extend(s.a.iter().chain(&s.b).map(|v| format!("{v:?}")));
        rec.push(traj.newton_iters[k].to_string());
        rec.push(format!("{:?}", traj.residual_norms[k]));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let sidecar = blowup_sidecar_path(path);
    if let Outcome::BlowUp { .. } = &traj.outcome {
        let json = serde_json::json!({
            "nu": traj.nu,
            "mode": traj.mode,
            "outcome": traj.outcome,
            "max_condition": traj.max_condition,
            "steps_completed": traj.states.len() - 1,
        });
        fs::write(&sidecar, serde_json::to_string_pretty(&json)?).map_err(|e| Error::io(&sidecar, e))?;
    } else if sidecar.exists() {
        fs::remove_file(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    }
    Ok(())
}

pub fn blowup_sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".blowup.json");
    s.into()
}

/// Reads the `(t, a, b)` rows of a trajectory CSV.
pub fn read_trajectory_csv(path: impl AsRef<Path>) -> Result<Vec<RomState>> {
    let path = path.as_ref();
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rd.headers().map_err(|e| csv_error(path, e))?.clone();
    let r = headers.iter().filter(|h| h.starts_with("a_")).count();
    let q = headers.iter().filter(|h| h.starts_with("b_")).count();
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let vals: Vec<f64> = rec
            .iter()
            .take(1 + r + q)
            .map(|v| v.parse::<f64>().map_err(|_| Error::Data(format!("bad number `{v}` in {}", path.display()))))
            .collect::<Result<_>>()?;
        out.push(RomState {
            t: vals[0],
            a: vals[1..1 + r].to_vec(),
            b: vals[1 + r..].to_vec(),
        });
    }
    Ok(out)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{MomentumOperators, PpeOperators};
    use crate::tensor::Tensor3;

    /// `ȧ = −λ a` with a trivial pressure row `b = 0`.
    fn decay_ops(lambda: f64, nu: f64) -> ReducedOperators {
        ReducedOperators {
            momentum: MomentumOperators {
                m: DMatrix::identity(1, 1),
                b: DMatrix::from_element(1, 1, -lambda / nu),
                bt: DMatrix::zeros(1, 1),
                c: Tensor3::zeros(1, 1, 1),
                h: DMatrix::zeros(1, 1),
                penalty: vec![],
            },
            ppe: PpeOperators {
                d: DMatrix::identity(1, 1),
                g: Tensor3::zeros(1, 1, 1),
                n: DMatrix::zeros(1, 1),
                l: DVector::zeros(1),
            },
            turbulence: None,
        }
    }

    #[test]
    fn zero_state_zero_residual() {
        let ops = decay_ops(2.0, 0.1);
        let r = residual(&ops, 0.1, 0.0, &[0.0], &[0.0], TimeScheme::Bdf2 { a_prev: &[0.0], a_prev2: &[0.0] }, 0.1, ClosureValues::default());
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn scalar_decay_residual_is_bdf2_formula() {
        let (lambda, nu, dt) = (3.0, 0.01, 0.1);
        let ops = decay_ops(lambda, nu);
        let (a, a1, a2) = (0.7, 0.8, 0.9);
        let r = residual(&ops, nu, 0.0, &[a], &[0.0], TimeScheme::Bdf2 { a_prev: &[a1], a_prev2: &[a2] }, dt, ClosureValues::default());
        let expected = (3.0 * a - 4.0 * a1 + a2) / (2.0 * dt) + lambda * a;
        assert!((r[0] - expected).abs() < 1e-13);
    }

    fn decay_error(dt: f64) -> f64 {
        let lambda = 2.0;
        let ops = decay_ops(lambda, 1.0);
        let t_end = 1.0;
        let cfg = SolverConfig {
            dt,
            n_steps: (t_end / dt).round() as usize,
            ..Default::default()
        };
        let init = RomState { t: 0.0, a: vec![1.0], b: vec![0.0] };
        let tr = solve(&init, &ops, &ClosureHooks::standard(), 1.0, &cfg).unwrap();
        (tr.states.last().unwrap().a[0] - (-lambda * t_end).exp()).abs()
    }

    #[test]
    fn bdf2_is_second_order() {
        let (e1, e2, e3) = (decay_error(0.02), decay_error(0.01), decay_error(0.005));
        assert!(e1 / e2 >= 3.5 && e2 / e3 >= 3.5, "{e1} {e2} {e3}");
    }

    fn quadratic_ops() -> ReducedOperators {
        let mut ops = decay_ops(1.0, 1.0);
        let c = Tensor3::from_fn(2, 2, 2, |i, j, k| 0.3 * (i as f64 + 1.0) - 0.2 * j as f64 + 0.1 * k as f64);
        ops.momentum = MomentumOperators {
            m: DMatrix::identity(2, 2),
            b: DMatrix::from_row_slice(2, 2, &[-1.0, 0.2, -0.2, -2.0]),
            bt: DMatrix::zeros(2, 2),
            c,
            h: DMatrix::from_row_slice(2, 1, &[0.5, -0.1]),
            penalty: vec![],
        };
        ops.ppe = PpeOperators {
            d: DMatrix::from_element(1, 1, 2.0),
            g: Tensor3::from_fn(1, 2, 2, |_, j, k| 0.1 + j as f64 * 0.05 - k as f64 * 0.02),
            n: DMatrix::from_row_slice(1, 2, &[0.3, -0.4]),
            l: DVector::from_element(1, 0.01),
        };
        ops
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let ops = quadratic_ops();
        let (a1, a2) = ([0.4, -0.3], [0.5, -0.2]);
        let scheme = TimeScheme::Bdf2 { a_prev: &a1, a_prev2: &a2 };
        let x = [0.35, -0.25, 0.1];
        let j = jacobian(&ops, 0.7, 0.0, &x[..2], scheme, 0.05, None);
        for m in 0..3 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[m] += h;
            xm[m] -= h;
            let rp = residual(&ops, 0.7, 0.0, &xp[..2], &xp[2..], scheme, 0.05, ClosureValues::default());
            let rm = residual(&ops, 0.7, 0.0, &xm[..2], &xm[2..], scheme, 0.05, ClosureValues::default());
            for i in 0..3 {
                let fd = (rp[i] - rm[i]) / (2.0 * h);
                assert!((fd - j[(i, m)]).abs() < 1e-7, "({i},{m}) {fd} {}", j[(i, m)]);
            }
        }
    }

    #[test]
    fn newton_converges_quadratically() {
        let ops = quadratic_ops();
        let cfg = SolverConfig { dt: 0.05, n_steps: 5, ..Default::default() };
        let ctx = StepContext { ops: &ops, hooks: &ClosureHooks::standard(), nu: 0.7, cfg: &cfg };
        let a1 = [0.4, -0.3];
        let a2 = [0.5, -0.2];
        let scheme = TimeScheme::Bdf2 { a_prev: &a1, a_prev2: &a2 };
        let mut x = vec![0.4, -0.3, 0.0];
        let mut norms = vec![];
        for _ in 0..8 {
            let res = ctx.residual(&x[..2], &x[2..], scheme, None, None);
            norms.push(inf_norm(&res));
            if norms.last().unwrap() < &1e-14 {
                break;
            }
            let j = jacobian(&ops, 0.7, 0.0, &x[..2], scheme, 0.05, None);
            let dx = j.lu().solve(&-DVector::from_vec(res)).unwrap();
            for (xi, d) in x.iter_mut().zip(dx.iter()) {
                *xi += d;
            }
        }
        let k = norms.iter().position(|r| *r < 1e-4).unwrap();
        for w in norms[k..].windows(2) {
            if w[1] > 1e-14 {
                assert!(w[1] <= 10.0 * w[0] * w[0], "{norms:?}");
            }
        }
    }

    #[test]
    fn deterministic_trajectories() {
        let ops = quadratic_ops();
        let cfg = SolverConfig { dt: 0.05, n_steps: 20, ..Default::default() };
        let init = RomState { t: 0.0, a: vec![0.4, -0.3], b: vec![0.0] };
        let a = solve(&init, &ops, &ClosureHooks::standard(), 0.7, &cfg).unwrap();
        let b = solve(&init, &ops, &ClosureHooks::standard(), 0.7, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn growth_is_reported_as_blowup() {
        // ȧ = 20a passes the limit near t = 0.7
        let ops = decay_ops(-20.0, 1.0);
        let cfg = SolverConfig { dt: 0.01, n_steps: 300, blowup_limit: 1e6, ..Default::default() };
        let init = RomState { t: 0.0, a: vec![1.0], b: vec![0.0] };
        let tr = match solve(&init, &ops, &ClosureHooks::standard(), 1.0, &cfg) {
            Ok(tr) => tr,
            Err(e) => panic!("expected a blow-up diagnostic, got {e}"),
        };
        assert!(tr.is_blowup());
        if let Outcome::BlowUp { step, last_state, .. } = &tr.outcome {
            assert!(*step < 300);
            assert!(last_state.a[0].is_finite());
        }
    }

    #[test]
    fn table_closure_reproduces_forced_solution() {
        // ȧ + λa + τ = 0 with τ chosen so a(t) = cos(t) exactly under BDF2
        let lambda = 1.0;
        let ops = decay_ops(lambda, 1.0);
        let dt = 0.01;
        let n = 50;
        let a_exact: Vec<f64> = (0..=n).map(|k| (k as f64 * dt).cos()).collect();
        let rows: Vec<Vec<f64>> = (0..=n)
            .map(|k| {
                let adot = match k {
                    0 => 0.0,
                    1 => (a_exact[1] - a_exact[0]) / dt,
                    _ => (3.0 * a_exact[k] - 4.0 * a_exact[k - 1] + a_exact[k - 2]) / (2.0 * dt),
                };
                vec![-(adot + lambda * a_exact[k]), 0.0]
            })
            .collect();
        let hooks = ClosureHooks {
            mode: RomMode::Purely,
            correction: Some(Arc::new(TableClosure::new(rows).unwrap())),
            ..Default::default()
        };
        let cfg = SolverConfig { dt, n_steps: n, ..Default::default() };
        let init = RomState { t: 0.0, a: vec![1.0], b: vec![0.0] };
        let tr = solve(&init, &ops, &hooks, 1.0, &cfg).unwrap();
        for (s, e) in tr.states.iter().zip(&a_exact) {
            assert!((s.a[0] - e).abs() < 1e-10);
        }
    }

    #[test]
    fn hooks_are_validated() {
        let ops = decay_ops(1.0, 1.0);
        let hooks = ClosureHooks { mode: RomMode::Hybrid, ..Default::default() };
        assert!(hooks.validate(&ops).is_err());
        let cfg = SolverConfig::default();
        let init = RomState { t: 0.0, a: vec![1.0], b: vec![0.0] };
        assert!(solve(&init, &ops, &hooks, 1.0, &cfg).is_err());
    }

    #[test]
    fn trajectory_csv_and_sidecar() {
        let ops = decay_ops(-20.0, 1.0);
        let cfg = SolverConfig { dt: 0.01, n_steps: 300, blowup_limit: 1e6, ..Default::default() };
        let init = RomState { t: 0.0, a: vec![1.0], b: vec![0.0] };
        let tr = solve(&init, &ops, &ClosureHooks::standard(), 1.0, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        write_trajectory_csv(&tr, &p).unwrap();
        let back = read_trajectory_csv(&p).unwrap();
        assert_eq!(back, tr.states);
        let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(blowup_sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(side["outcome"]["status"], "blow_up");
    }
}
