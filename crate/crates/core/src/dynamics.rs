//! Time integration, chart changes and Floquet analysis.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::gauge_normalize;
use crate::hamiltonian::{eval_h, vector_field, Chart, HamiltonianSpec, PhasePoint};
use crate::rates::Generator;

/// Largest allowed `|S_i|` before a run is declared blown up.
pub const BLOWUP_POTENTIAL: f64 = 1e6;
/// Most negative density entry tolerated mid-run.
pub const BLOWUP_DENSITY: f64 = -1e-9;
/// Largest `|sum rho - 1|` allowed at a stored step.
pub const MASS_DEFECT_TOL: f64 = 1e-9;

const IMPLICIT_MAX_ITER: usize = 50;
const IMPLICIT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Rk4,
    ImplicitMidpoint,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rk4 => "rk4",
            Method::ImplicitMidpoint => "implicit_midpoint",
        }
    }

    /// Global order of accuracy.
    pub fn order(self) -> i32 {
        match self {
            Method::Rk4 => 4,
            Method::ImplicitMidpoint => 2,
        }
    }
}

/// Number of steps used for `[t0, t1]` with nominal step `dt`.
pub fn step_count(t0: f64, t1: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t1 >= t0) || !dt.is_finite() || !t1.is_finite() || !t0.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "need dt > 0 and t1 >= t0, got dt = {dt}, [{t0}, {t1}]"
        )));
    }
    Ok(((t1 - t0) / dt).round().max(if t1 > t0 { 1.0 } else { 0.0 }) as usize)
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub chart: Chart,
    pub times: Vec<f64>,
    /// Stored states; potentials are shifted to sum to zero except in the
    /// `(f, g)` chart.
    pub states: Vec<PhasePoint>,
    pub hamiltonian: Vec<f64>,
    pub mass_defect: Vec<f64>,
    pub min_density: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> &PhasePoint {
        self.states.last().expect("trajectory has at least the initial state")
    }

    /// `max_k |H(t_k) - H(t_0)|`.
    pub fn max_h_drift(&self) -> f64 {
        let h0 = self.hamiltonian[0];
        self.hamiltonian.iter().map(|h| (h - h0).abs()).fold(0.0, f64::max)
    }

    pub fn max_mass_defect(&self) -> f64 {
        self.mass_defect.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IntegrationConfig {
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
    pub method: Method,
    /// Store every `stride`-th step (the final step is always stored).
    pub stride: usize,
}

impl IntegrationConfig {
    pub fn new(t0: f64, t1: f64, dt: f64, method: Method) -> Self {
        IntegrationConfig {
            t0,
            t1,
            dt,
            method,
            stride: 1,
        }
    }
}

fn axpy(x: &PhasePoint, a: f64, d: &(Vec<f64>, Vec<f64>)) -> PhasePoint {
    PhasePoint {
        chart: x.chart,
        q: x.q.iter().zip(&d.0).map(|(u, v)| u + a * v).collect(),
        p: x.p.iter().zip(&d.1).map(|(u, v)| u + a * v).collect(),
    }
}

/// Advances `x` by one step of size `dt` from time `t`.
pub fn step(spec: &HamiltonianSpec, method: Method, x: &PhasePoint, t: f64, dt: f64) -> Result<PhasePoint> {
    match method {
        Method::Rk4 => {
            let k1 = vector_field(spec, x, t)?;
            let k2 = vector_field(spec, &axpy(x, 0.5 * dt, &k1), t + 0.5 * dt)?;
            let k3 = vector_field(spec, &axpy(x, 0.5 * dt, &k2), t + 0.5 * dt)?;
            let k4 = vector_field(spec, &axpy(x, dt, &k3), t + dt)?;
            let comb = |a: &[f64], b: &[f64], c: &[f64], d: &[f64]| -> Vec<f64> {
                (0..a.len()).map(|i| (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i]) / 6.0).collect()
            };
            let inc = (comb(&k1.0, &k2.0, &k3.0, &k4.0), comb(&k1.1, &k2.1, &k3.1, &k4.1));
            Ok(axpy(x, dt, &inc))
        }
        Method::ImplicitMidpoint => {
            let tm = t + 0.5 * dt;
            let mut y = axpy(x, dt, &vector_field(spec, x, t)?);
            let mut converged = false;
            for _ in 0..IMPLICIT_MAX_ITER {
                let mid = midpoint(x, &y);
                let next = axpy(x, dt, &vector_field(spec, &mid, tm)?);
                let diff = max_diff(&next, &y);
                let scale = next.q.iter().chain(&next.p).fold(1.0f64, |m, v| m.max(v.abs()));
                y = next;
                if diff <= IMPLICIT_TOL * scale {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::NonconvergentImplicitStep(t));
            }
            // One more sweep once inside the tolerance.
            let mid = midpoint(x, &y);
            Ok(axpy(x, dt, &vector_field(spec, &mid, tm)?))
        }
    }
}

fn midpoint(a: &PhasePoint, b: &PhasePoint) -> PhasePoint {
    PhasePoint {
        chart: a.chart,
        q: a.q.iter().zip(&b.q).map(|(u, v)| 0.5 * (u + v)).collect(),
        p: a.p.iter().zip(&b.p).map(|(u, v)| 0.5 * (u + v)).collect(),
    }
}

fn max_diff(a: &PhasePoint, b: &PhasePoint) -> f64 {
    a.q.iter()
        .zip(&b.q)
        .chain(a.p.iter().zip(&b.p))
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max)
}

fn check_blowup(x: &PhasePoint, t: f64) -> Result<()> {
    if let Some(k) = x.q.iter().chain(&x.p).position(|v| !v.is_finite()) {
        return Err(Error::BlowUp {
            t,
            reason: format!("component {k} is not finite"),
        });
    }
    if x.chart != Chart::Fg {
        if let Some((i, v)) = x.p.iter().enumerate().find(|(_, v)| v.abs() > BLOWUP_POTENTIAL) {
            return Err(Error::BlowUp {
                t,
                reason: format!("|S_{i}| = {} exceeds 1e6", v.abs()),
            });
        }
    }
    let rho = x.density();
    if let Some((i, v)) = rho.iter().enumerate().find(|(_, v)| **v < BLOWUP_DENSITY) {
        return Err(Error::BlowUp {
            t,
            reason: format!("rho_{i} = {v} is negative"),
        });
    }
    Ok(())
}

fn stored(x: &PhasePoint) -> PhasePoint {
    let mut y = x.clone();
    if y.chart != Chart::Fg {
        gauge_normalize(&mut y.p);
    }
    y
}

/// Integrates the Hamiltonian flow of `spec` from `init`.
///
/// Fails with [`Error::BlowUp`] on non-finite values, `|S_i| > 1e6` or
/// `rho_i < -1e-9`, and with [`Error::MassDefect`] if a stored step drifts off
/// the simplex by more than `1e-9`.
pub fn integrate_with(spec: &HamiltonianSpec, init: &PhasePoint, cfg: &IntegrationConfig) -> Result<Trajectory> {
    let n = step_count(cfg.t0, cfg.t1, cfg.dt)?;
    let dt = if n == 0 { 0.0 } else { (cfg.t1 - cfg.t0) / n as f64 };
    let stride = cfg.stride.max(1);
    // Validates chart, dimensions and interiority.
    vector_field(spec, init, cfg.t0)?;
    let mut traj = Trajectory {
        chart: init.chart,
        times: Vec::with_capacity(n / stride + 2),
        states: Vec::with_capacity(n / stride + 2),
        hamiltonian: Vec::with_capacity(n / stride + 2),
        mass_defect: Vec::with_capacity(n / stride + 2),
        min_density: Vec::with_capacity(n / stride + 2),
    };
    let mut record = |x: &PhasePoint, t: f64| -> Result<()> {
        let rho = x.density();
        let defect = (rho.iter().sum::<f64>() - 1.0).abs();
        if defect > MASS_DEFECT_TOL {
            return Err(Error::MassDefect { t, defect });
        }
        traj.times.push(t);
        traj.hamiltonian.push(eval_h(spec, x, t)?);
        traj.mass_defect.push(defect);
        traj.min_density.push(rho.iter().copied().fold(f64::INFINITY, f64::min));
        traj.states.push(stored(x));
        Ok(())
    };
    let mut x = init.clone();
    record(&x, cfg.t0)?;
    for k in 0..n {
        let t = cfg.t0 + k as f64 * dt;
        x = step(spec, cfg.method, &x, t, dt).map_err(|e| match e {
            Error::NonfiniteValue(r) => Error::BlowUp { t, reason: r },
            other => other,
        })?;
        let t_next = cfg.t0 + (k + 1) as f64 * dt;
        check_blowup(&x, t_next)?;
        if (k + 1) % stride == 0 || k + 1 == n {
            record(&x, t_next)?;
        }
    }
    Ok(traj)
}

pub fn integrate(spec: &HamiltonianSpec, init: &PhasePoint, t0: f64, t1: f64, dt: f64, method: Method) -> Result<Trajectory> {
    integrate_with(spec, init, &IntegrationConfig::new(t0, t1, dt, method))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopfColeDirection {
    /// `(rho, psi) -> (rho, S)` with `S = psi - log(rho) / 2`.
    ToS,
    /// `(rho, S) -> (rho, psi)`.
    ToPsi,
}

/// Result of a chart change that fixes the potential gauge.
#[derive(Debug, Clone, PartialEq)]
pub struct Gauged {
    pub state: PhasePoint,
    /// Constant subtracted from the potential to make it sum to zero.
    pub shift: f64,
}

fn interior(rho: &[f64]) -> Result<()> {
    match rho.iter().position(|&r| !(r > 0.0)) {
        Some(i) => Err(Error::BoundaryDensity(i)),
        None => Ok(()),
    }
}

fn expect_chart(x: &PhasePoint, chart: Chart) -> Result<()> {
    if x.chart != chart {
        return Err(Error::ChartMismatch {
            expected: chart.name(),
            got: x.chart.name(),
        });
    }
    Ok(())
}

/// Hopf-Cole change between `(rho, psi)` and `(rho, S)`.
///
/// `ToS` gauge-normalizes the result and records the shift; `ToPsi` adds
/// `shift` back so that a round trip is the identity.
pub fn hopf_cole(x: &PhasePoint, direction: HopfColeDirection, shift: f64) -> Result<Gauged> {
    interior(&x.q)?;
    match direction {
        HopfColeDirection::ToS => {
            expect_chart(x, Chart::RhoPsi)?;
            let mut s: Vec<f64> = x.p.iter().zip(&x.q).map(|(psi, r)| psi - 0.5 * r.ln()).collect();
            let shift = gauge_normalize(&mut s);
            Ok(Gauged {
                state: PhasePoint::rho_s(x.q.clone(), s),
                shift,
            })
        }
        HopfColeDirection::ToPsi => {
            expect_chart(x, Chart::RhoS)?;
            let psi = x.p.iter().zip(&x.q).map(|(s, r)| s + shift + 0.5 * r.ln()).collect();
            Ok(Gauged {
                state: PhasePoint::rho_psi(x.q.clone(), psi),
                shift: 0.0,
            })
        }
    }
}

/// Sign convention of the Madelung transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MadelungConvention {
    /// `f = sqrt(rho) e^{-S}`, `g = sqrt(rho) e^{S}`.
    Sbp,
    /// `f = sqrt(rho) e^{S}`, `g = sqrt(rho) e^{-S}`.
    Fisher,
}

impl MadelungConvention {
    fn sign(self) -> f64 {
        match self {
            MadelungConvention::Sbp => -1.0,
            MadelungConvention::Fisher => 1.0,
        }
    }
}

/// `(rho, S) -> (f, g)`; a `(rho, psi)` point is first taken through Hopf-Cole.
pub fn madelung(x: &PhasePoint, convention: MadelungConvention) -> Result<PhasePoint> {
    interior(&x.q)?;
    let s: Vec<f64> = match x.chart {
        Chart::RhoS => x.p.clone(),
        Chart::RhoPsi => x.p.iter().zip(&x.q).map(|(psi, r)| psi - 0.5 * r.ln()).collect(),
        Chart::Fg => {
            return Err(Error::ChartMismatch {
                expected: Chart::RhoS.name(),
                got: Chart::Fg.name(),
            })
        }
    };
    let c = convention.sign();
    let mut f = Vec::with_capacity(x.q.len());
    let mut g = Vec::with_capacity(x.q.len());
    for (r, si) in x.q.iter().zip(&s) {
        let sr = r.sqrt();
        f.push(sr * (c * si).exp());
        g.push(sr * (-c * si).exp());
    }
    Ok(PhasePoint::fg(f, g))
}

/// Inverse of [`madelung`], returning a gauge-normalized `(rho, S)` point.
pub fn madelung_inverse(x: &PhasePoint, convention: MadelungConvention) -> Result<Gauged> {
    expect_chart(x, Chart::Fg)?;
    let mut rho = Vec::with_capacity(x.q.len());
    let mut s = Vec::with_capacity(x.q.len());
    let c = convention.sign();
    for (i, (f, g)) in x.q.iter().zip(&x.p).enumerate() {
        let r = f * g;
        if !(r > 0.0) {
            return Err(Error::NonpositiveFg(i, r));
        }
        rho.push(r);
        s.push(c * 0.5 * (f / g).ln());
    }
    let shift = gauge_normalize(&mut s);
    Ok(Gauged {
        state: PhasePoint::rho_s(rho, s),
        shift,
    })
}

/// Trajectories of the linear system `f' = m^T f`, `g' = -m g`.
#[derive(Debug, Clone)]
pub struct SchrodingerPair {
    pub times: Vec<f64>,
    pub f: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
}

fn rk4_linear(
    m: &dyn Generator,
    y0: &[f64],
    t0: f64,
    n: usize,
    dt: f64,
    rhs: impl Fn(&DMatrix<f64>, &DVector<f64>) -> DVector<f64>,
) -> Vec<Vec<f64>> {
    let mut y = DVector::from_column_slice(y0);
    let mut out = vec![y0.to_vec()];
    for k in 0..n {
        let t = t0 + k as f64 * dt;
        let (ma, mb, mc) = (m.at(t), m.at(t + 0.5 * dt), m.at(t + dt));
        let k1 = rhs(&ma, &y);
        let k2 = rhs(&mb, &(&y + &k1 * (0.5 * dt)));
        let k3 = rhs(&mb, &(&y + &k2 * (0.5 * dt)));
        let k4 = rhs(&mc, &(&y + &k3 * dt));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        out.push(y.iter().copied().collect());
    }
    out
}

/// Solves the forward equation for `f` from `f0` and the backward equation for
/// `g` from its terminal value `g_terminal` at `t1`.
///
/// `g` is integrated forward in reversed time `tau = t1 - t` with the negated
/// field.
pub fn schrodinger_evolve(
    m: &dyn Generator,
    f0: &[f64],
    g_terminal: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<SchrodingerPair> {
    let n = m.dim();
    for len in [f0.len(), g_terminal.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    let steps = step_count(t0, t1, dt)?;
    let h = if steps == 0 { 0.0 } else { (t1 - t0) / steps as f64 };
    let f = rk4_linear(m, f0, t0, steps, h, |q, y| q.tr_mul(y));
    let reversed = ReversedTime { inner: m, t1 };
    let mut g = rk4_linear(&reversed, g_terminal, 0.0, steps, h, |q, y| q * y);
    g.reverse();
    let times = (0..=steps).map(|k| t0 + k as f64 * h).collect();
    Ok(SchrodingerPair { times, f, g })
}

#[derive(Debug)]
struct ReversedTime<'a> {
    inner: &'a dyn Generator,
    t1: f64,
}

impl Generator for ReversedTime<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn fill(&self, tau: f64, out: &mut DMatrix<f64>) {
        self.inner.fill(self.t1 - tau, out)
    }
}

/// `sum_ij f_i m_ij g_j`.
pub fn bilinear_h(m: &DMatrix<f64>, f: &[f64], g: &[f64]) -> f64 {
    let (fv, gv) = (DVector::from_column_slice(f), DVector::from_column_slice(g));
    fv.dot(&(m * gv))
}

/// Canonical transforms that can be checked for symplecticity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// `(rho, psi) -> (rho, psi - log(rho) / 2)`.
    HopfCole,
    /// `(rho, S) -> (f, g)`. The fisher convention is canonical with `g` as
    /// the position, so its output is ordered `(g, f)`.
    Madelung(MadelungConvention),
}

// The raw map, without gauge fixing: the gauge shift depends on the state and
// is only constant along the simplex.
fn apply_raw(t: Transform, x: &[f64], n: usize) -> Vec<f64> {
    let (q, p) = x.split_at(n);
    match t {
        Transform::Identity => x.to_vec(),
        Transform::HopfCole => {
            let mut out = q.to_vec();
            out.extend(p.iter().zip(q).map(|(psi, r)| psi - 0.5 * r.ln()));
            out
        }
        Transform::Madelung(conv) => {
            let c = conv.sign();
            let f = q.iter().zip(p).map(|(r, s)| r.sqrt() * (c * s).exp());
            let g = q.iter().zip(p).map(|(r, s)| r.sqrt() * (-c * s).exp());
            match conv {
                MadelungConvention::Sbp => f.chain(g).collect(),
                MadelungConvention::Fisher => g.chain(f).collect(),
            }
        }
    }
}

/// `max |D^T J D - J|` for the central-difference Jacobian `D` of `transform`
/// at `x`, with steps `h * max(1, |x_k|)`.
pub fn symplectic_check(transform: Transform, x: &PhasePoint, h: f64) -> Result<f64> {
    interior(&x.q)?;
    let n = x.dim();
    let z: Vec<f64> = x.q.iter().chain(&x.p).copied().collect();
    let dim = 2 * n;
    let mut d = DMatrix::zeros(dim, dim);
    if transform == Transform::Identity {
        d.fill_with_identity();
    } else {
        let mut zp = z.clone();
        for k in 0..dim {
            let mut hk = h * z[k].abs().max(1.0);
            if k < n {
                hk = hk.min(0.5 * z[k]);
            }
            zp[k] = z[k] + hk;
            let hi = apply_raw(transform, &zp, n);
            zp[k] = z[k] - hk;
            let lo = apply_raw(transform, &zp, n);
            zp[k] = z[k];
            for r in 0..dim {
                d[(r, k)] = (hi[r] - lo[r]) / (2.0 * hk);
            }
        }
    }
    let mut j = DMatrix::zeros(dim, dim);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    let resid = d.transpose() * &j * &d - &j;
    Ok(resid.amax())
}

/// Fundamental solution of `rho' = rho Q(t)` over one period.
#[derive(Debug, Clone)]
pub struct Monodromy {
    pub period: f64,
    /// `X(T)` with `rho(T) = rho(0) X(T)`.
    pub matrix: DMatrix<f64>,
    pub multipliers: Vec<Complex<f64>>,
    /// `mu_i = log(lambda_i) / T` (principal branch).
    pub exponents: Vec<Complex<f64>>,
    /// Indices with `|lambda - 1| <= 1e-6`.
    pub periodic: Vec<usize>,
    /// Indices with `|lambda + 1| <= 1e-6`.
    pub antiperiodic: Vec<usize>,
    /// Normalized left fixed vector of `X(T)` when it is a probability vector.
    pub periodic_density: Option<Vec<f64>>,
}

pub const FLOQUET_TOL: f64 = 1e-6;

/// Integrates `X' = X Q(t)`, `X(0) = I` over one period with RK4.
pub fn monodromy(m: &dyn Generator, dt: f64) -> Result<Monodromy> {
    let period = m
        .period()
        .ok_or_else(|| Error::InvalidParameter("monodromy needs a periodic generator".into()))?;
    let steps = step_count(0.0, period, dt)?;
    let h = period / steps as f64;
    let n = m.dim();
    let mut x = DMatrix::<f64>::identity(n, n);
    for k in 0..steps {
        let t = k as f64 * h;
        let (qa, qb, qc) = (m.at(t), m.at(t + 0.5 * h), m.at(t + h));
        let k1 = &x * &qa;
        let k2 = (&x + &k1 * (0.5 * h)) * &qb;
        let k3 = (&x + &k2 * (0.5 * h)) * &qb;
        let k4 = (&x + &k3 * h) * &qc;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    let multipliers: Vec<Complex<f64>> = x.clone().complex_eigenvalues().iter().copied().collect();
    let exponents = multipliers.iter().map(|l| l.ln() / period).collect();
    let one = Complex::new(1.0, 0.0);
    let periodic: Vec<usize> = (0..n).filter(|&i| (multipliers[i] - one).norm() <= FLOQUET_TOL).collect();
    let antiperiodic = (0..n).filter(|&i| (multipliers[i] + one).norm() <= FLOQUET_TOL).collect();
    let periodic_density = if periodic.is_empty() { None } else { left_fixed_density(&x) };
    Ok(Monodromy {
        period,
        matrix: x,
        multipliers,
        exponents,
        periodic,
        antiperiodic,
        periodic_density,
    })
}

// Left null vector of X - I, normalized to sum one, if all entries share a sign.
fn left_fixed_density(x: &DMatrix<f64>) -> Option<Vec<f64>> {
    let n = x.nrows();
    let a = x.transpose() - DMatrix::identity(n, n);
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let k = (0..n).min_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))?;
    let v: Vec<f64> = vt.row(k).iter().copied().collect();
    let s: f64 = v.iter().sum();
    if s.abs() < 1e-300 {
        return None;
    }
    let rho: Vec<f64> = v.iter().map(|x| x / s).collect();
    if rho.iter().all(|&r| r >= -1e-12) {
        Some(rho)
    } else {
        None
    }
}
