//! Hamiltonians on the cotangent bundle of the simplex and their vector fields.
//!
//! A [`PhasePoint`] stores a position `q` and momentum `p`. Depending on the
//! chart these are `(rho, S)`, `(rho, psi)` or the pair `(f, g)`. The vector
//! field is `(dq/dt, dp/dt) = (dH/dp, -dH/dq)` and the free constant in every
//! potential equation is set to zero.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rates::{check_reference, ReferenceRates};
use crate::theta::{theta_at, theta_partial_at, ThetaKind, Which};

/// Coordinates of a phase point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chart {
    /// Density and potential `(rho, S)`.
    RhoS,
    /// Density and dual potential `(rho, psi)`.
    RhoPsi,
    /// Schrödinger pair `(f, g)`.
    Fg,
}

impl Chart {
    pub fn name(self) -> &'static str {
        match self {
            Chart::RhoS => "rho-S",
            Chart::RhoPsi => "rho-psi",
            Chart::Fg => "f-g",
        }
    }

    /// CSV column prefixes for position and momentum.
    pub fn labels(self) -> (&'static str, &'static str) {
        match self {
            Chart::RhoS => ("rho", "S"),
            Chart::RhoPsi => ("rho", "psi"),
            Chart::Fg => ("f", "g"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub chart: Chart,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhasePoint {
    pub fn rho_s(rho: Vec<f64>, s: Vec<f64>) -> Self {
        PhasePoint {
            chart: Chart::RhoS,
            q: rho,
            p: s,
        }
    }

    pub fn rho_psi(rho: Vec<f64>, psi: Vec<f64>) -> Self {
        PhasePoint {
            chart: Chart::RhoPsi,
            q: rho,
            p: psi,
        }
    }

    pub fn fg(f: Vec<f64>, g: Vec<f64>) -> Self {
        PhasePoint {
            chart: Chart::Fg,
            q: f,
            p: g,
        }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// The density carried by this point (`f * g` in the Schrödinger chart).
    pub fn density(&self) -> Vec<f64> {
        match self.chart {
            Chart::Fg => self.q.iter().zip(&self.p).map(|(f, g)| f * g).collect(),
            _ => self.q.clone(),
        }
    }
}

type ScalarFn = dyn Fn(f64) -> f64 + Send + Sync;

/// Convex dual `u*` with derivative, used by the generalized bridge Hamiltonian.
#[derive(Clone)]
pub enum ConvexDual {
    /// `u*(x) = e^x - 1`, dual to relative entropy.
    Entropy,
    /// `u*(x) = x + x^2 / 2`, dual to the chi-square divergence.
    Quadratic,
    Custom {
        name: String,
        f: Arc<ScalarFn>,
        df: Arc<ScalarFn>,
    },
}

impl fmt::Debug for ConvexDual {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConvexDual::Entropy => write!(f, "Entropy"),
            ConvexDual::Quadratic => write!(f, "Quadratic"),
            ConvexDual::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl ConvexDual {
    /// Custom dual, checked for `u*(0) = 0`, `du*(0) = 1` and monotone `du*`.
    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let d = ConvexDual::Custom {
            name: name.into(),
            f: Arc::new(f),
            df: Arc::new(df),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn value(&self, x: f64) -> Result<f64> {
        match self {
            ConvexDual::Entropy => Ok(guarded_exp(x)? - 1.0),
            ConvexDual::Quadratic => Ok(x + 0.5 * x * x),
            ConvexDual::Custom { f, .. } => finite(f(x), "u*"),
        }
    }

    pub fn deriv(&self, x: f64) -> Result<f64> {
        match self {
            ConvexDual::Entropy => guarded_exp(x),
            ConvexDual::Quadratic => Ok(1.0 + x),
            ConvexDual::Custom { df, .. } => finite(df(x), "du*"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v0 = self.value(0.0)?;
        let d0 = self.deriv(0.0)?;
        if v0.abs() > 1e-12 || (d0 - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "convex dual needs u*(0) = 0 and du*(0) = 1, got {v0} and {d0}"
            )));
        }
        let mut prev = f64::NEG_INFINITY;
        for k in -500..=500 {
            let x = k as f64 * 0.01;
            let d = self.deriv(x)?;
            if d < prev - 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "du* decreases near x = {x}; dual is not convex"
                )));
            }
            prev = d;
        }
        Ok(())
    }
}

fn finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonfiniteValue(what.to_string()))
    }
}

/// `exp(x)` that fails instead of overflowing for `|x| > 700`.
pub fn guarded_exp(x: f64) -> Result<f64> {
    if !(x.abs() <= 700.0) {
        return Err(Error::NonfiniteValue(format!("exp({x}) outside the |x| <= 700 guard")));
    }
    Ok(x.exp())
}

/// User supplied node potential `V(rho, t)` with its gradient in `rho`.
pub trait PotentialFn: Send + Sync + fmt::Debug {
    fn value(&self, rho: &[f64], t: f64) -> f64;
    fn gradient(&self, rho: &[f64], t: f64, out: &mut [f64]);
}

#[derive(Debug, Clone)]
pub enum NodePotential {
    /// `sum_i rho_i V_i`.
    Linear(Vec<f64>),
    /// `sum_ij rho_i rho_j W_ij`.
    Quadratic(DMatrix<f64>),
    Custom(Arc<dyn PotentialFn>),
}

impl NodePotential {
    fn dim_ok(&self, n: usize) -> bool {
        match self {
            NodePotential::Linear(v) => v.len() == n,
            NodePotential::Quadratic(w) => w.nrows() == n && w.ncols() == n,
            NodePotential::Custom(_) => true,
        }
    }

    pub fn value(&self, rho: &[f64], t: f64) -> f64 {
        match self {
            NodePotential::Linear(v) => v.iter().zip(rho).map(|(a, b)| a * b).sum(),
            NodePotential::Quadratic(w) => {
                let n = rho.len();
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        s += rho[i] * rho[j] * w[(i, j)];
                    }
                }
                s
            }
            NodePotential::Custom(c) => c.value(rho, t),
        }
    }

    /// Adds the gradient in `rho` to `out`.
    pub fn add_gradient(&self, rho: &[f64], t: f64, out: &mut [f64]) {
        match self {
            NodePotential::Linear(v) => {
                for (o, x) in out.iter_mut().zip(v) {
                    *o += x;
                }
            }
            NodePotential::Quadratic(w) => {
                let n = rho.len();
                for i in 0..n {
                    for j in 0..n {
                        out[i] += (w[(i, j)] + w[(j, i)]) * rho[j];
                    }
                }
            }
            NodePotential::Custom(c) => {
                let mut g = vec![0.0; out.len()];
                c.gradient(rho, t, &mut g);
                for (o, x) in out.iter_mut().zip(g) {
                    *o += x;
                }
            }
        }
    }
}

/// Sign of the Fisher information term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// `H = K - beta I`; `beta = 1/8` gives the Fisher-regularized bridge.
    Bridge,
    /// `H = K + beta I`, the Madelung-type system.
    Madelung,
}

#[derive(Debug, Clone)]
pub enum Variant {
    /// Kinetic energy `1/4 sum_ij (S_i - S_j)^2 theta_ij w_ij`.
    OtKinetic { theta: ThetaKind },
    /// Bridge Hamiltonian in `(rho, S)` coordinates.
    SbpEntropic { m: ReferenceRates },
    /// Bridge Hamiltonian `sum_i sum_j u*(psi_j - psi_i) m_ij rho_i`.
    SbpPsi { m: ReferenceRates, dual: ConvexDual },
    /// Kinetic energy with a Fisher information term.
    FisherOt {
        theta: ThetaKind,
        theta_fisher: ThetaKind,
        beta: f64,
        coupling: Coupling,
    },
    /// `1/(2q) sum_ij |S_i - S_j|^q theta_ij w_ij`.
    LpKinetic { theta: ThetaKind, q: f64 },
    /// `sum_ij f_i m_ij g_j`.
    SchrodingerFg { m: ReferenceRates },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::OtKinetic { .. } => "ot_kinetic",
            Variant::SbpEntropic { .. } => "sbp_entropic",
            Variant::SbpPsi { .. } => "sbp_psi",
            Variant::FisherOt { .. } => "fisher_ot",
            Variant::LpKinetic { .. } => "lp_kinetic",
            Variant::SchrodingerFg { .. } => "schrodinger_fg",
        }
    }

    pub fn chart(&self) -> Chart {
        match self {
            Variant::SbpPsi { .. } => Chart::RhoPsi,
            Variant::SchrodingerFg { .. } => Chart::Fg,
            _ => Chart::RhoS,
        }
    }

    pub fn reference(&self) -> Option<&ReferenceRates> {
        match self {
            Variant::SbpEntropic { m } | Variant::SbpPsi { m, .. } | Variant::SchrodingerFg { m } => Some(m),
            _ => None,
        }
    }

    /// Whether the variant uses upwind weights somewhere.
    pub fn has_kinks(&self) -> bool {
        match self {
            Variant::OtKinetic { theta } | Variant::LpKinetic { theta, .. } => *theta == ThetaKind::Upwind,
            Variant::FisherOt {
                theta, theta_fisher, ..
            } => *theta == ThetaKind::Upwind || *theta_fisher == ThetaKind::Upwind,
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HamiltonianSpec {
    pub graph: Graph,
    pub variant: Variant,
    pub potential: Vec<NodePotential>,
}

impl HamiltonianSpec {
    pub fn new(graph: Graph, variant: Variant) -> Result<Self> {
        match &variant {
            Variant::FisherOt { beta, .. } if !(*beta >= 0.0 && beta.is_finite()) => {
                return Err(Error::InvalidParameter(format!("beta must be >= 0, got {beta}")));
            }
            Variant::LpKinetic { q, .. } if !(*q > 1.0 && q.is_finite()) => {
                return Err(Error::InvalidParameter(format!("q must be > 1, got {q}")));
            }
            Variant::SbpPsi { dual, .. } => dual.validate()?,
            _ => {}
        }
        if let Some(m) = variant.reference() {
            let mut times = vec![0.0];
            if let Some(p) = m.period() {
                times.extend((1..8).map(|k| p * k as f64 / 8.0));
            }
            check_reference(&graph, m.as_ref(), &times)?;
        }
        Ok(HamiltonianSpec {
            graph,
            variant,
            potential: Vec::new(),
        })
    }

    pub fn with_potential(mut self, v: NodePotential) -> Result<Self> {
        if self.variant.chart() == Chart::Fg {
            return Err(Error::InvalidParameter(
                "node potentials are not defined in the (f, g) chart".into(),
            ));
        }
        if !v.dim_ok(self.graph.node_count()) {
            return Err(Error::DimensionMismatch {
                expected: self.graph.node_count(),
                got: 0,
            });
        }
        self.potential.push(v);
        Ok(self)
    }

    pub fn chart(&self) -> Chart {
        self.variant.chart()
    }

    fn check_state(&self, x: &PhasePoint) -> Result<()> {
        let n = self.graph.node_count();
        if x.chart != self.chart() {
            return Err(Error::ChartMismatch {
                expected: self.chart().name(),
                got: x.chart.name(),
            });
        }
        for len in [x.q.len(), x.p.len()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, got: len });
            }
        }
        if let Some(k) = x.q.iter().chain(&x.p).position(|v| !v.is_finite()) {
            return Err(Error::NonfiniteValue(format!("state component {k}")));
        }
        let needs_interior = matches!(self.variant, Variant::SbpEntropic { .. } | Variant::FisherOt { .. });
        if needs_interior {
            if let Some(i) = x.q.iter().position(|&r| !(r > 0.0)) {
                return Err(Error::BoundaryDensity(i));
            }
        }
        Ok(())
    }
}

// |d|^(q-2) d, with the q = 2 case exact.
fn lp_flux(d: f64, q: f64) -> f64 {
    if q == 2.0 {
        d
    } else if d == 0.0 {
        0.0
    } else {
        d.abs().powf(q - 2.0) * d
    }
}

fn lp_energy(d: f64, q: f64) -> f64 {
    if q == 2.0 {
        0.5 * d * d
    } else {
        d.abs().powf(q) / q
    }
}

fn kinetic_h(g: &Graph, rho: &[f64], s: &[f64], kind: ThetaKind, q: f64) -> Result<f64> {
    let mut h = 0.0;
    for e in g.edges() {
        let d = s[e.i] - s[e.j];
        let th = theta_at(kind, rho[e.i], rho[e.j], d, (e.i, e.j))?;
        h += lp_energy(d, q) * th * e.w;
    }
    Ok(h)
}

fn kinetic_field(
    g: &Graph,
    rho: &[f64],
    s: &[f64],
    kind: ThetaKind,
    q: f64,
    dr: &mut [f64],
    ds: &mut [f64],
) -> Result<()> {
    for e in g.edges() {
        let (i, j) = (e.i, e.j);
        let d = s[i] - s[j];
        let th = theta_at(kind, rho[i], rho[j], d, (i, j))?;
        let flux = e.w * lp_flux(d, q) * th;
        dr[i] += flux;
        dr[j] -= flux;
        let a = e.w * lp_energy(d, q);
        if a != 0.0 {
            ds[i] -= a * theta_partial_at(kind, rho[i], rho[j], d, Which::First, (i, j))?;
            ds[j] -= a * theta_partial_at(kind, rho[i], rho[j], d, Which::Second, (i, j))?;
        }
    }
    Ok(())
}

fn check_interior(rho: &[f64]) -> Result<()> {
    match rho.iter().position(|&r| !(r > 0.0)) {
        Some(i) => Err(Error::BoundaryDensity(i)),
        None => Ok(()),
    }
}

/// `I(rho) = 1/2 sum over ordered neighbour pairs of (log rho_i - log rho_j)^2 theta_ij w~_ij`.
///
/// An upwind weight takes its direction from the log-density difference.
pub fn fisher_information(g: &Graph, rho: &[f64], kind: ThetaKind) -> Result<f64> {
    g.check_len(rho.len())?;
    check_interior(rho)?;
    let mut s = 0.0;
    for e in g.edges() {
        let dl = rho[e.i].ln() - rho[e.j].ln();
        let th = theta_at(kind, rho[e.i], rho[e.j], dl, (e.i, e.j))?;
        s += dl * dl * th * e.w_fisher;
    }
    Ok(s)
}

/// Gradient of [`fisher_information`] in `rho`.
pub fn fisher_information_gradient(g: &Graph, rho: &[f64], kind: ThetaKind) -> Result<Vec<f64>> {
    g.check_len(rho.len())?;
    check_interior(rho)?;
    let mut out = vec![0.0; rho.len()];
    for e in g.edges() {
        let (i, j) = (e.i, e.j);
        let dl = rho[i].ln() - rho[j].ln();
        let th = theta_at(kind, rho[i], rho[j], dl, (i, j))?;
        let di = theta_partial_at(kind, rho[i], rho[j], dl, Which::First, (i, j))?;
        let dj = theta_partial_at(kind, rho[i], rho[j], dl, Which::Second, (i, j))?;
        out[i] += e.w_fisher * (2.0 * dl * th / rho[i] + dl * dl * di);
        out[j] += e.w_fisher * (-2.0 * dl * th / rho[j] + dl * dl * dj);
    }
    Ok(out)
}

fn coupling_sign(c: Coupling) -> f64 {
    match c {
        Coupling::Bridge => -1.0,
        Coupling::Madelung => 1.0,
    }
}

/// Value of the Hamiltonian at `x` and time `t`.
pub fn eval_h(spec: &HamiltonianSpec, x: &PhasePoint, t: f64) -> Result<f64> {
    spec.check_state(x)?;
    let g = &spec.graph;
    let n = g.node_count();
    let (q, p) = (&x.q, &x.p);
    let mut h = match &spec.variant {
        Variant::OtKinetic { theta } => kinetic_h(g, q, p, *theta, 2.0)?,
        Variant::LpKinetic { theta, q: qe } => kinetic_h(g, q, p, *theta, *qe)?,
        Variant::FisherOt {
            theta,
            theta_fisher,
            beta,
            coupling,
        } => kinetic_h(g, q, p, *theta, 2.0)? + coupling_sign(*coupling) * beta * fisher_information(g, q, *theta_fisher)?,
        Variant::SbpEntropic { m } => {
            let m = m.at(t);
            let mut h = 0.0;
            for i in 0..n {
                h += m[(i, i)] * q[i];
                for &(j, _) in g.neighbors(i) {
                    h += guarded_exp(p[j] - p[i])? * m[(i, j)] * (q[i] * q[j]).sqrt();
                }
            }
            h
        }
        Variant::SbpPsi { m, dual } => {
            let m = m.at(t);
            let mut h = 0.0;
            for i in 0..n {
                for &(j, _) in g.neighbors(i) {
                    h += dual.value(p[j] - p[i])? * m[(i, j)] * q[i];
                }
            }
            h
        }
        Variant::SchrodingerFg { m } => {
            let m = m.at(t);
            let mut h = 0.0;
            for i in 0..n {
                for j in 0..n {
                    h += q[i] * m[(i, j)] * p[j];
                }
            }
            h
        }
    };
    for v in &spec.potential {
        h += v.value(q, t);
    }
    finite(h, "Hamiltonian value")
}

/// `(dq/dt, dp/dt) = (dH/dp, -dH/dq)` at `x` and time `t`.
pub fn vector_field(spec: &HamiltonianSpec, x: &PhasePoint, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.check_state(x)?;
    let g = &spec.graph;
    let n = g.node_count();
    let (q, p) = (&x.q, &x.p);
    let mut dq = vec![0.0; n];
    let mut dp = vec![0.0; n];
    match &spec.variant {
        Variant::OtKinetic { theta } => kinetic_field(g, q, p, *theta, 2.0, &mut dq, &mut dp)?,
        Variant::LpKinetic { theta, q: qe } => kinetic_field(g, q, p, *theta, *qe, &mut dq, &mut dp)?,
        Variant::FisherOt {
            theta,
            theta_fisher,
            beta,
            coupling,
        } => {
            kinetic_field(g, q, p, *theta, 2.0, &mut dq, &mut dp)?;
            let gi = fisher_information_gradient(g, q, *theta_fisher)?;
            let c = coupling_sign(*coupling) * beta;
            for i in 0..n {
                dp[i] -= c * gi[i];
            }
        }
        Variant::SbpEntropic { m } => {
            let m = m.at(t);
            for i in 0..n {
                dp[i] -= m[(i, i)];
                for &(j, _) in g.neighbors(i) {
                    let e = guarded_exp(p[j] - p[i])? * m[(i, j)] * (q[i] * q[j]).sqrt();
                    dq[i] -= e;
                    dq[j] += e;
                    dp[i] -= 0.5 * e / q[i];
                    dp[j] -= 0.5 * e / q[j];
                }
            }
        }
        Variant::SbpPsi { m, dual } => {
            let m = m.at(t);
            for i in 0..n {
                for &(j, _) in g.neighbors(i) {
                    let d = p[j] - p[i];
                    let flow = dual.deriv(d)? * m[(i, j)] * q[i];
                    dq[i] -= flow;
                    dq[j] += flow;
                    dp[i] -= dual.value(d)? * m[(i, j)];
                }
            }
        }
        Variant::SchrodingerFg { m } => {
            let m = m.at(t);
            for i in 0..n {
                for j in 0..n {
                    dq[j] += m[(i, j)] * q[i];
                    dp[i] -= m[(i, j)] * p[j];
                }
            }
        }
    }
    if !spec.potential.is_empty() {
        let mut gv = vec![0.0; n];
        for v in &spec.potential {
            v.add_gradient(q, t, &mut gv);
        }
        for i in 0..n {
            dp[i] -= gv[i];
        }
    }
    if let Some(k) = dq.iter().chain(&dp).position(|v| !v.is_finite()) {
        return Err(Error::NonfiniteValue(format!("vector field component {k}")));
    }
    Ok((dq, dp))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - difference|` over all components, divided by
    /// `max(1, max |analytic|, max |difference|)`.
    pub max_rel_deviation: f64,
    /// Component index of the worst deviation; `n..2n` are momentum entries.
    pub worst_component: usize,
    pub analytic: (Vec<f64>, Vec<f64>),
    pub finite_difference: (Vec<f64>, Vec<f64>),
    pub passed: bool,
}

/// Tolerance used by [`grad_check`] to set `passed`.
pub const GRAD_CHECK_TOL: f64 = 1e-5;

/// Compares [`vector_field`] against central differences of [`eval_h`].
///
/// Steps are `h * max(1, |x_k|)`. Upwind variants refuse states within `10 h`
/// of a branch boundary.
pub fn grad_check(spec: &HamiltonianSpec, x: &PhasePoint, t: f64, h: f64) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {h}")));
    }
    spec.check_state(x)?;
    if spec.variant.has_kinks() {
        let margin = 10.0 * h;
        let fisher_upwind = matches!(
            spec.variant,
            Variant::FisherOt {
                theta_fisher: ThetaKind::Upwind,
                ..
            }
        );
        let kinetic_upwind = matches!(
            spec.variant,
            Variant::OtKinetic {
                theta: ThetaKind::Upwind
            } | Variant::LpKinetic {
                theta: ThetaKind::Upwind,
                ..
            } | Variant::FisherOt {
                theta: ThetaKind::Upwind,
                ..
            }
        );
        for e in spec.graph.edges() {
            if kinetic_upwind && (x.p[e.i] - x.p[e.j]).abs() <= margin {
                return Err(Error::KinkProximity { i: e.i, j: e.j, margin });
            }
            if fisher_upwind && (x.q[e.i].ln() - x.q[e.j].ln()).abs() <= margin {
                return Err(Error::KinkProximity { i: e.i, j: e.j, margin });
            }
        }
    }
    let analytic = vector_field(spec, x, t)?;
    let n = x.dim();
    let mut fd_q = vec![0.0; n];
    let mut fd_p = vec![0.0; n];
    let mut y = x.clone();
    for k in 0..n {
        let hp = h * x.p[k].abs().max(1.0);
        y.p[k] = x.p[k] + hp;
        let hi = eval_h(spec, &y, t)?;
        y.p[k] = x.p[k] - hp;
        let lo = eval_h(spec, &y, t)?;
        y.p[k] = x.p[k];
        fd_q[k] = (hi - lo) / (2.0 * hp);

        let hq = h * x.q[k].abs().max(1.0);
        y.q[k] = x.q[k] + hq;
        let hi = eval_h(spec, &y, t)?;
        y.q[k] = x.q[k] - hq;
        let lo = eval_h(spec, &y, t)?;
        y.q[k] = x.q[k];
        fd_p[k] = -(hi - lo) / (2.0 * hq);
    }
    let a: Vec<f64> = analytic.0.iter().chain(&analytic.1).copied().collect();
    let b: Vec<f64> = fd_q.iter().chain(&fd_p).copied().collect();
    let scale = a.iter().chain(&b).fold(1.0f64, |m, v| m.max(v.abs()));
    let (worst, dev) = a
        .iter()
        .zip(&b)
        .map(|(u, v)| (u - v).abs() / scale)
        .enumerate()
        .fold((0, 0.0), |acc, (k, d)| if d > acc.1 { (k, d) } else { acc });
    Ok(GradCheckReport {
        max_rel_deviation: dev,
        worst_component: worst,
        analytic,
        finite_difference: (fd_q, fd_p),
        passed: dev <= GRAD_CHECK_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::ConstantRates;

    fn two_node() -> Graph {
        Graph::path(2).unwrap()
    }

    fn unit_rates(g: &Graph) -> ReferenceRates {
        ConstantRates::from_graph(g).shared()
    }

    #[test]
    fn ot_constant_potential_has_only_potential_energy() {
        let g = Graph::complete(3).unwrap();
        let spec = HamiltonianSpec::new(g, Variant::OtKinetic { theta: ThetaKind::Average })
            .unwrap()
            .with_potential(NodePotential::Linear(vec![1.0, 2.0, 3.0]))
            .unwrap();
        let x = PhasePoint::rho_s(vec![0.2, 0.3, 0.5], vec![0.7; 3]);
        assert!((eval_h(&spec, &x, 0.0).unwrap() - 2.3).abs() < 1e-15);
        let (dr, _) = vector_field(&spec, &x, 0.0).unwrap();
        assert!(dr.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sbp_psi_zero_at_constant_psi() {
        let g = two_node();
        let m = unit_rates(&g);
        let spec = HamiltonianSpec::new(g, Variant::SbpPsi { m, dual: ConvexDual::Entropy }).unwrap();
        let x = PhasePoint::rho_psi(vec![0.75, 0.25], vec![0.0, 0.0]);
        assert_eq!(eval_h(&spec, &x, 0.0).unwrap(), 0.0);
        let (dr, dpsi) = vector_field(&spec, &x, 0.0).unwrap();
        assert!((dr[0] + 0.5).abs() < 1e-15 && (dr[1] - 0.5).abs() < 1e-15);
        assert_eq!(dpsi, vec![0.0, 0.0]);
    }

    #[test]
    fn fisher_uniform_is_zero() {
        let g = Graph::complete(3).unwrap();
        let spec = HamiltonianSpec::new(
            g.clone(),
            Variant::FisherOt {
                theta: ThetaKind::Average,
                theta_fisher: ThetaKind::Average,
                beta: 0.125,
                coupling: Coupling::Bridge,
            },
        )
        .unwrap();
        let x = PhasePoint::rho_s(vec![1.0 / 3.0; 3], vec![0.4; 3]);
        assert!(eval_h(&spec, &x, 0.0).unwrap().abs() < 1e-15);
        assert_eq!(fisher_information(&g, &[1.0 / 3.0; 3], ThetaKind::Logarithmic).unwrap(), 0.0);
    }

    #[test]
    fn fisher_two_node_value() {
        let g = two_node();
        let i = fisher_information(&g, &[0.75, 0.25], ThetaKind::Average).unwrap();
        // Direct sum over both orientations.
        let l3 = 3f64.ln();
        let direct = 0.5 * (l3 * l3 * 0.5 + l3 * l3 * 0.5);
        assert!((i - direct).abs() < 1e-15);
        assert!((i - 0.60347).abs() < 1e-5);
    }

    #[test]
    fn fisher_gradient_matches_differences() {
        let g = Graph::complete(4).unwrap();
        let rho = [0.1, 0.2, 0.3, 0.4];
        for kind in [ThetaKind::Average, ThetaKind::Logarithmic, ThetaKind::Upwind] {
            let gr = fisher_information_gradient(&g, &rho, kind).unwrap();
            for k in 0..4 {
                let h = 1e-7;
                let mut a = rho;
                let mut b = rho;
                a[k] += h;
                b[k] -= h;
                let fd = (fisher_information(&g, &a, kind).unwrap() - fisher_information(&g, &b, kind).unwrap()) / (2.0 * h);
                assert!((fd - gr[k]).abs() < 1e-6 * gr[k].abs().max(1.0), "{kind:?} {k}");
            }
        }
    }

    #[test]
    fn exp_guard() {
        let g = two_node();
        let m = unit_rates(&g);
        let spec = HamiltonianSpec::new(g, Variant::SbpEntropic { m }).unwrap();
        let x = PhasePoint::rho_s(vec![0.5, 0.5], vec![0.0, 701.0]);
        assert!(matches!(eval_h(&spec, &x, 0.0), Err(Error::NonfiniteValue(_))));
    }

    #[test]
    fn chart_mismatch() {
        let g = two_node();
        let spec = HamiltonianSpec::new(g, Variant::OtKinetic { theta: ThetaKind::Average }).unwrap();
        let x = PhasePoint::fg(vec![0.5, 0.5], vec![1.0, 1.0]);
        assert!(matches!(eval_h(&spec, &x, 0.0), Err(Error::ChartMismatch { .. })));
    }

    #[test]
    fn quadratic_potential_gradient() {
        let g = Graph::complete(3).unwrap();
        let w = DMatrix::identity(3, 3) * 0.5;
        let spec = HamiltonianSpec::new(g, Variant::OtKinetic { theta: ThetaKind::Average })
            .unwrap()
            .with_potential(NodePotential::Quadratic(w))
            .unwrap();
        let x = PhasePoint::rho_s(vec![0.2, 0.3, 0.5], vec![0.0, 0.4, -0.1]);
        let r = grad_check(&spec, &x, 0.0, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn invalid_parameters() {
        let g = two_node();
        assert!(HamiltonianSpec::new(g.clone(), Variant::LpKinetic { theta: ThetaKind::Average, q: 1.0 }).is_err());
        assert!(HamiltonianSpec::new(
            g.clone(),
            Variant::FisherOt {
                theta: ThetaKind::Average,
                theta_fisher: ThetaKind::Average,
                beta: -1.0,
                coupling: Coupling::Bridge
            }
        )
        .is_err());
        assert!(ConvexDual::custom("bad", |x: f64| -x * x + x, |x: f64| 1.0 - 2.0 * x).is_err());
        assert!(ConvexDual::custom("cosh", |x: f64| x.sinh(), |x: f64| x.cosh()).is_err());
    }

    #[test]
    fn kink_proximity_reported() {
        let g = two_node();
        let spec = HamiltonianSpec::new(g, Variant::OtKinetic { theta: ThetaKind::Upwind }).unwrap();
        let x = PhasePoint::rho_s(vec![0.5, 0.5], vec![0.0, 1e-7]);
        assert!(matches!(grad_check(&spec, &x, 0.0, 1e-6), Err(Error::KinkProximity { .. })));
    }
}
