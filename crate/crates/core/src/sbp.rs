//! Schrödinger bridges on graphs, path-space relative entropy, periodic and
//! stationary constructions, and Markov-condition diagnostics.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{self, step_count, Method};
use crate::error::{Error, Result};
use crate::graph::{gauge_normalize, Graph};
use crate::hamiltonian::{vector_field, Chart, HamiltonianSpec, PhasePoint, Variant};
use crate::markov::{build_rate_matrix, step_propagator, RateKind, RateMatrix};
use crate::par::{map_indexed, ExecMode};
use crate::rates::{check_reference, Generator, ReferenceRates};
use crate::theta::ThetaKind;

/// Relative entropy `sum_i a_i log(a_i / b_i)`.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() } else { 0.0 })
        .sum()
}

fn logsumexp(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

fn check_marginal(name: &'static str, rho: &[f64], n: usize) -> Result<()> {
    if rho.len() != n {
        return Err(Error::InvalidMarginal(name, format!("length {} for {n} nodes", rho.len())));
    }
    if let Some(i) = rho.iter().position(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::InvalidMarginal(name, format!("entry {i} is {}; must be positive", rho[i])));
    }
    let s: f64 = rho.iter().sum();
    if (s - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidMarginal(name, format!("sums to {s}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BridgeProblem {
    pub graph: Graph,
    pub reference: ReferenceRates,
    pub rho0: Vec<f64>,
    pub rho1: Vec<f64>,
    /// Initial law of the reference process; defaults to `rho0`.
    pub reference_initial: Option<Vec<f64>>,
    pub t0: f64,
    pub t1: f64,
}

impl BridgeProblem {
    pub fn new(graph: Graph, reference: ReferenceRates, rho0: Vec<f64>, rho1: Vec<f64>) -> Self {
        BridgeProblem {
            graph,
            reference,
            rho0,
            rho1,
            reference_initial: None,
            t0: 0.0,
            t1: 1.0,
        }
    }

    pub fn reference_initial(&self) -> &[f64] {
        self.reference_initial.as_deref().unwrap_or(&self.rho0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BridgeConfig {
    /// L1 tolerance on the terminal marginal.
    pub tol: f64,
    pub max_iter: usize,
    pub dt: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            tol: 1e-8,
            max_iter: 200,
            dt: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BridgeSolution {
    pub times: Vec<f64>,
    /// Forward factor, including the reference initial law: `rho = f * g`.
    pub f: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
    /// Bridged rates `m_ij g_j / g_i` on the grid.
    pub m_hat: Vec<DMatrix<f64>>,
    /// Reference rates on the grid.
    pub m: Vec<DMatrix<f64>>,
    pub iterations: usize,
    /// L1 residuals of the initial and terminal marginals.
    pub residuals: (f64, f64),
    pub residual_history: Vec<f64>,
    /// Dual lower bound on `H(P|R)` after each iteration; nondecreasing.
    pub dual_history: Vec<f64>,
    /// `H(P|R)` of the converged coupling.
    pub entropy: f64,
    /// `H(rho0 | reference initial law)`.
    pub initial_kl: f64,
    /// Trapezoid value of the relative entropy rate integral.
    pub entropy_rate_integral: f64,
    reference: ReferenceRates,
}

impl BridgeSolution {
    /// `H(P|R)` minus each dual value; nonincreasing and zero at the optimum.
    pub fn dual_gaps(&self) -> Vec<f64> {
        self.dual_history.iter().map(|d| self.entropy - d).collect()
    }

    /// The bridged process as a generator on the solve horizon.
    pub fn generator(&self) -> BridgedRates {
        BridgedRates {
            reference: self.reference.clone(),
            times: self.times.clone(),
            g: self.g.clone(),
        }
    }
}

/// Bridged rates at arbitrary times.
///
/// Between grid points `g(t)` is recovered from the next stored value with one
/// partial RK4 step of the reference propagator.
#[derive(Debug, Clone)]
pub struct BridgedRates {
    reference: ReferenceRates,
    times: Vec<f64>,
    g: Vec<Vec<f64>>,
}

impl BridgedRates {
    pub fn g_at(&self, t: f64) -> Result<Vec<f64>> {
        let last = self.times.len() - 1;
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            return Ok(self.g[0].clone());
        }
        if k > last {
            return Ok(self.g[last].clone());
        }
        if t == self.times[k - 1] {
            return Ok(self.g[k - 1].clone());
        }
        let p = step_propagator(self.reference.as_ref(), t, self.times[k] - t)?;
        Ok((p * DVector::from_column_slice(&self.g[k])).iter().copied().collect())
    }
}

impl Generator for BridgedRates {
    fn dim(&self) -> usize {
        self.reference.dim()
    }

    fn fill(&self, t: f64, out: &mut DMatrix<f64>) {
        match self.g_at(t) {
            Ok(g) => {
                self.reference.fill(t, out);
                h_transform(out, &g);
            }
            Err(_) => out.fill(f64::NAN),
        }
    }

    fn period(&self) -> Option<f64> {
        None
    }
}

/// `m_ij <- m_ij g_j / g_i` off the diagonal, diagonal reset to minus the row sum.
pub fn h_transform(m: &mut DMatrix<f64>, g: &[f64]) {
    let n = m.nrows();
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            if i != j {
                m[(i, j)] *= g[j] / g[i];
                s += m[(i, j)];
            }
        }
        m[(i, i)] = -s;
    }
}

/// Solves the bridge between `rho0` and `rho1` for the reference process by
/// iterative proportional fitting of the boundary factors.
///
/// The coupling is `f0(x) K(x, y) g1(y)` with `K` the reference propagator over
/// the horizon. Starting from `f0 = reference initial law`, each iteration sets
/// `g1 = rho1 / (K^T f0)` and then `f0 = rho0 / (K g1)`, in log space. The
/// factors are then expanded over the grid with the per-step propagators.
pub fn solve_bridge(p: &BridgeProblem, cfg: &BridgeConfig) -> Result<BridgeSolution> {
    let g = &p.graph;
    let n = g.node_count();
    check_marginal("rho0", &p.rho0, n)?;
    check_marginal("rho1", &p.rho1, n)?;
    let rt = p.reference_initial().to_vec();
    check_marginal("reference_initial", &rt, n)?;
    let steps = step_count(p.t0, p.t1, cfg.dt)?;
    if steps == 0 {
        return Err(Error::InvalidParameter("bridge horizon must be positive".into()));
    }
    let h = (p.t1 - p.t0) / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|k| p.t0 + k as f64 * h).collect();
    check_reference(g, p.reference.as_ref(), &times)?;
    let m = p.reference.as_ref();

    let mut props = Vec::with_capacity(steps);
    let mut kmat = DMatrix::<f64>::identity(n, n);
    for k in 0..steps {
        let pk = step_propagator(m, times[k], h)?;
        kmat = kmat * &pk;
        props.push(pk);
    }
    let logk = kmat.map(|v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY });
    let l0: Vec<f64> = p.rho0.iter().map(|r| r.ln()).collect();
    let l1: Vec<f64> = p.rho1.iter().map(|r| r.ln()).collect();
    let lrt: Vec<f64> = rt.iter().map(|r| r.ln()).collect();

    let mut lf = lrt.clone();
    let mut lg = vec![0.0; n];
    let mut residual_history = Vec::new();
    let mut dual_history = Vec::new();
    let mut iterations = 0;
    let mut res1 = f64::INFINITY;
    while iterations < cfg.max_iter {
        iterations += 1;
        for j in 0..n {
            lg[j] = l1[j] - logsumexp((0..n).map(|i| logk[(i, j)] + lf[i]));
        }
        for i in 0..n {
            lf[i] = l0[i] - logsumexp((0..n).map(|j| logk[(i, j)] + lg[j]));
        }
        res1 = (0..n)
            .map(|j| {
                let lm = lg[j] + logsumexp((0..n).map(|i| logk[(i, j)] + lf[i]));
                (lm.exp() - p.rho1[j]).abs()
            })
            .sum();
        residual_history.push(res1);
        let dual: f64 = (0..n).map(|i| p.rho0[i] * (lf[i] - lrt[i]) + p.rho1[i] * lg[i]).sum();
        dual_history.push(dual);
        if res1 <= cfg.tol {
            break;
        }
    }
    if !(res1 <= cfg.tol) {
        return Err(Error::NonConvergence {
            iterations,
            residual: res1,
            history: residual_history,
        });
    }
    let res0: f64 = (0..n)
        .map(|i| {
            let lm = lf[i] + logsumexp((0..n).map(|j| logk[(i, j)] + lg[j]));
            (lm.exp() - p.rho0[i]).abs()
        })
        .sum();

    let mut f = Vec::with_capacity(steps + 1);
    f.push(lf.iter().map(|x| x.exp()).collect::<Vec<f64>>());
    for pk in &props {
        let next = pk.tr_mul(&DVector::from_column_slice(f.last().unwrap()));
        f.push(next.iter().copied().collect());
    }
    let mut gs = vec![Vec::new(); steps + 1];
    gs[steps] = lg.iter().map(|x| x.exp()).collect();
    for k in (0..steps).rev() {
        let prev = &props[k] * DVector::from_column_slice(&gs[k + 1]);
        gs[k] = prev.iter().copied().collect();
    }
    let rho: Vec<Vec<f64>> = f
        .iter()
        .zip(&gs)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect())
        .collect();

    let mut m_hat = Vec::with_capacity(steps + 1);
    let mut m_grid = Vec::with_capacity(steps + 1);
    for (k, &t) in times.iter().enumerate() {
        if let Some(i) = gs[k].iter().position(|&v| !(v > 0.0)) {
            return Err(Error::NonPositiveDensity {
                t,
                node: i,
                value: gs[k][i],
            });
        }
        let mk = m.at(t);
        let mut mh = mk.clone();
        h_transform(&mut mh, &gs[k]);
        let checked = RateMatrix::diagnose(mh).into_valid(t)?;
        m_hat.push(checked);
        m_grid.push(mk);
    }
    let initial_kl = kl_divergence(&p.rho0, &rt);
    let entropy = dual_history.last().copied().unwrap_or(0.0);
    let entropy_rate_integral = relative_entropy_rate(&times, &rho, &m_hat, &m_grid)?;
    Ok(BridgeSolution {
        times,
        f,
        g: gs,
        rho,
        m_hat,
        m: m_grid,
        iterations,
        residuals: (res0, res1),
        residual_history,
        dual_history,
        entropy,
        initial_kl,
        entropy_rate_integral,
        reference: p.reference.clone(),
    })
}

/// `u(x) = x log x - x + 1`.
pub fn entropy_u(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x * x.ln() - x + 1.0
    }
}

/// `int sum_i rho_i sum_j u(m_hat_ij / m_ij) m_ij dt` by the trapezoid rule on `times`.
pub fn relative_entropy_rate(times: &[f64], rho: &[Vec<f64>], m_hat: &[DMatrix<f64>], m: &[DMatrix<f64>]) -> Result<f64> {
    let k = times.len();
    if rho.len() != k || m_hat.len() != k || m.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: rho.len().min(m_hat.len()).min(m.len()),
        });
    }
    let mut vals = Vec::with_capacity(k);
    for s in 0..k {
        let n = rho[s].len();
        let mut v = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (a, b) = (m_hat[s][(i, j)], m[s][(i, j)]);
                if b > 0.0 {
                    if a < 0.0 {
                        return Err(Error::InvalidParameter(format!("negative bridged rate {a}")));
                    }
                    row += entropy_u(a / b) * b;
                } else if a > 0.0 {
                    return Err(Error::SupportMismatch(i, j));
                }
            }
            v += rho[s][i] * row;
        }
        vals.push(v);
    }
    Ok((1..k).map(|s| 0.5 * (vals[s] + vals[s - 1]) * (times[s] - times[s - 1])).sum())
}

/// Upper limit on enumerated paths.
pub const MAX_PATHS: f64 = 1e7;

/// Exact relative entropy between the discretized bridged chain and the
/// discretized reference, by enumerating every path of `n_steps` steps.
pub fn path_entropy_bruteforce(p: &BridgeProblem, sol: &BridgeSolution, n_steps: usize, mode: ExecMode) -> Result<f64> {
    let bridged = sol.generator();
    path_entropy_between(
        &p.graph,
        &bridged,
        p.reference.as_ref(),
        &p.rho0,
        p.reference_initial(),
        (p.t0, p.t1),
        n_steps,
        mode,
    )
}

fn step_matrix(g: &Graph, m: &DMatrix<f64>, h: f64, step: usize) -> Result<DMatrix<f64>> {
    let n = g.node_count();
    let mut pi = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut out = 0.0;
        for &(j, _) in g.neighbors(i) {
            let r = m[(i, j)];
            if !(r >= 0.0) {
                return Err(Error::InvalidGenerator {
                    t: f64::NAN,
                    violations: 1,
                    first: format!("rate {r} from {i} to {j}"),
                });
            }
            pi[(i, j)] = h * r;
            out += h * r;
        }
        pi[(i, i)] = 1.0 - out;
        if pi[(i, i)] < 0.0 {
            return Err(Error::NegativeStepProbability {
                node: i,
                step,
                value: pi[(i, i)],
            });
        }
    }
    Ok(pi)
}

/// Path-space relative entropy `sum_gamma P(gamma) log(P(gamma) / R(gamma))`
/// between the chains with one-step matrices `I + h Q(t_k)` at left endpoints.
#[allow(clippy::too_many_arguments)]
pub fn path_entropy_between(
    g: &Graph,
    p_rates: &dyn Generator,
    r_rates: &dyn Generator,
    p_init: &[f64],
    r_init: &[f64],
    horizon: (f64, f64),
    n_steps: usize,
    mode: ExecMode,
) -> Result<f64> {
    let n = g.node_count();
    let max_deg = (0..n).map(|i| g.neighbors(i).len()).max().unwrap_or(0);
    let count = ((max_deg + 1) as f64).powi(n_steps as i32);
    if count > MAX_PATHS {
        return Err(Error::PathExplosion(count));
    }
    let h = (horizon.1 - horizon.0) / n_steps as f64;
    let mut lp = Vec::with_capacity(n_steps);
    let mut lr = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let t = horizon.0 + k as f64 * h;
        let pp = step_matrix(g, &p_rates.at(t), h, k)?;
        let pr = step_matrix(g, &r_rates.at(t), h, k)?;
        lp.push(pp.map(|v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }));
        lr.push(pr.map(|v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }));
    }
    // Successor lists: the node itself and its neighbours.
    let succ: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut v = vec![i];
            v.extend(g.neighbors(i).iter().map(|&(j, _)| j));
            v
        })
        .collect();

    // Prefixes of the first few steps are distributed over workers.
    let mut prefixes: Vec<(usize, usize, f64, f64)> = Vec::new();
    for x0 in 0..n {
        if p_init[x0] > 0.0 {
            if !(r_init[x0] > 0.0) {
                return Err(Error::SupportMismatch(x0, x0));
            }
            prefixes.push((0, x0, p_init[x0].ln(), r_init[x0].ln()));
        }
    }
    while prefixes.len() < 256 && prefixes.first().is_some_and(|p| p.0 < n_steps) {
        let mut next = Vec::with_capacity(prefixes.len() * (max_deg + 1));
        for &(k, x, a, b) in &prefixes {
            for &y in &succ[x] {
                let da = lp[k][(x, y)];
                if da == f64::NEG_INFINITY {
                    continue;
                }
                let db = lr[k][(x, y)];
                if db == f64::NEG_INFINITY {
                    return Err(Error::SupportMismatch(x, y));
                }
                next.push((k + 1, y, a + da, b + db));
            }
        }
        prefixes = next;
    }

    fn walk(
        k: usize,
        x: usize,
        a: f64,
        b: f64,
        lp: &[DMatrix<f64>],
        lr: &[DMatrix<f64>],
        succ: &[Vec<usize>],
    ) -> std::result::Result<f64, (usize, usize)> {
        if k == lp.len() {
            return Ok(a.exp() * (a - b));
        }
        let mut s = 0.0;
        for &y in &succ[x] {
            let da = lp[k][(x, y)];
            if da == f64::NEG_INFINITY {
                continue;
            }
            let db = lr[k][(x, y)];
            if db == f64::NEG_INFINITY {
                return Err((x, y));
            }
            s += walk(k + 1, y, a + da, b + db, lp, lr, succ)?;
        }
        Ok(s)
    }

    let parts = map_indexed(mode, prefixes.len(), |i| {
        let (k, x, a, b) = prefixes[i];
        walk(k, x, a, b, &lp, &lr, &succ)
    });
    let mut total = 0.0;
    for part in parts {
        total += part.map_err(|(x, y)| Error::SupportMismatch(x, y))?;
    }
    Ok(total)
}

/// A periodic interior density `t -> rho(t)`.
pub trait PeriodicDensity: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn period(&self) -> f64;
    fn rho(&self, t: f64) -> Vec<f64>;

    /// Analytic time derivative, if known.
    fn drho(&self, _t: f64) -> Option<Vec<f64>> {
        None
    }
}

/// Time derivative of `d`: analytic when available, otherwise a fourth-order
/// central difference with spacing `T / 1024`.
pub fn density_derivative(d: &dyn PeriodicDensity, t: f64) -> Vec<f64> {
    if let Some(v) = d.drho(t) {
        return v;
    }
    let h = d.period() / 1024.0;
    let (a, b, c, e) = (d.rho(t - 2.0 * h), d.rho(t - h), d.rho(t + h), d.rho(t + 2.0 * h));
    (0..a.len())
        .map(|i| (a[i] - 8.0 * b[i] + 8.0 * c[i] - e[i]) / (12.0 * h))
        .collect()
}

/// Which edges carry the constructed rates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoopSupport {
    /// All pairs; requires a complete graph. The loop runs `0 -> 1 -> ... -> 0`.
    Complete,
    /// Only the edges of the given Hamiltonian cycle.
    Cycle(Vec<usize>),
}

/// Periodic generator reproducing a prescribed periodic density:
/// `Q(t) = K m0(t) + m*(t)` where `rho m0 = 0` and `m*` carries the loop flux.
#[derive(Debug, Clone)]
pub struct PeriodicRates {
    density: Arc<dyn PeriodicDensity>,
    cycle: Vec<usize>,
    complete: bool,
    pub k: f64,
}

const PERIODIC_SAMPLES: usize = 1024;
const PERIODIC_MARGIN: f64 = 1e-9;
/// Factor applied to the smallest feasible `K` so that rates stay valid
/// between the sampled times.
pub const PERIODIC_SAFETY: f64 = 1.05;

impl PeriodicRates {
    fn loop_fluxes(&self, rho: &[f64], drho: &[f64]) -> Vec<f64> {
        // x_j carries mass from cycle[j] to cycle[j + 1]; the closing flux is zero.
        let n = self.cycle.len();
        let mut x = vec![0.0; n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += drho[self.cycle[j]];
            x[j] = -acc;
        }
        x[n - 1] = 0.0;
        let _ = rho;
        x
    }

    fn kernel_rate(&self, rho_i: f64) -> f64 {
        let n = self.cycle.len();
        if self.complete {
            1.0 / ((n - 1) as f64 * rho_i)
        } else {
            1.0 / rho_i
        }
    }

    /// Smallest loop rate over the sampled period for scale `k`.
    fn min_loop_rate(&self, k: f64) -> f64 {
        let n = self.cycle.len();
        let t_per = self.density.period();
        let mut mn = f64::INFINITY;
        for s in 0..PERIODIC_SAMPLES {
            let t = t_per * s as f64 / PERIODIC_SAMPLES as f64;
            let rho = self.density.rho(t);
            let drho = density_derivative(self.density.as_ref(), t);
            let x = self.loop_fluxes(&rho, &drho);
            for j in 0..n {
                let i = self.cycle[j];
                mn = mn.min(k * self.kernel_rate(rho[i]) + x[j] / rho[i]);
            }
        }
        mn
    }
}

impl Generator for PeriodicRates {
    fn dim(&self) -> usize {
        self.density.dim()
    }

    fn fill(&self, t: f64, out: &mut DMatrix<f64>) {
        let n = self.cycle.len();
        out.fill(0.0);
        let rho = self.density.rho(t);
        let drho = density_derivative(self.density.as_ref(), t);
        if self.complete {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        out[(i, j)] = self.k * self.kernel_rate(rho[i]);
                    }
                }
            }
        } else {
            for j in 0..n {
                let (a, b) = (self.cycle[j], self.cycle[(j + 1) % n]);
                out[(a, b)] += self.k * self.kernel_rate(rho[a]);
            }
        }
        let x = self.loop_fluxes(&rho, &drho);
        for j in 0..n {
            let (a, b) = (self.cycle[j], self.cycle[(j + 1) % n]);
            out[(a, b)] += x[j] / rho[a];
        }
        for i in 0..n {
            let s: f64 = (0..n).filter(|&j| j != i).map(|j| out[(i, j)]).sum();
            out[(i, i)] = -s;
        }
    }

    fn period(&self) -> Option<f64> {
        Some(self.density.period())
    }
}

/// Builds periodic rates whose master equation is solved by `density`.
///
/// When `k` is `None` the scale is the smallest value keeping every loop rate
/// at least `1e-9` on `T / 1024` samples (powers of two, then bisection to
/// `1e-3` relative), multiplied by [`PERIODIC_SAFETY`].
pub fn periodic_rate_from_density(
    g: &Graph,
    density: Arc<dyn PeriodicDensity>,
    support: LoopSupport,
    k: Option<f64>,
) -> Result<PeriodicRates> {
    let n = g.node_count();
    if density.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: density.dim(),
        });
    }
    if !(density.period() > 0.0) {
        return Err(Error::InvalidParameter("density period must be positive".into()));
    }
    let (cycle, complete) = match support {
        LoopSupport::Complete => {
            if g.edges().len() != n * (n - 1) / 2 || n < 2 {
                return Err(Error::NoCycleSupport);
            }
            ((0..n).collect::<Vec<_>>(), true)
        }
        LoopSupport::Cycle(c) => {
            let mut seen = vec![false; n];
            if c.len() != n || n < 2 {
                return Err(Error::NoCycleSupport);
            }
            for &v in &c {
                if v >= n || seen[v] {
                    return Err(Error::NoCycleSupport);
                }
                seen[v] = true;
            }
            if (0..n).any(|j| !g.has_edge(c[j], c[(j + 1) % n])) {
                return Err(Error::NoCycleSupport);
            }
            (c, false)
        }
    };
    for s in 0..PERIODIC_SAMPLES {
        let t = density.period() * s as f64 / PERIODIC_SAMPLES as f64;
        let rho = density.rho(t);
        if let Some(i) = rho.iter().position(|&r| !(r > 0.0)) {
            return Err(Error::NonPositiveDensity { t, node: i, value: rho[i] });
        }
    }
    let mut rates = PeriodicRates {
        density,
        cycle,
        complete,
        k: 0.0,
    };
    let feasible = |r: &PeriodicRates, k: f64| r.min_loop_rate(k) >= PERIODIC_MARGIN;
    if let Some(k) = k {
        if !(k >= 0.0) {
            return Err(Error::InvalidParameter(format!("K must be non-negative, got {k}")));
        }
        rates.k = k;
        return Ok(rates);
    }
    let Some(e) = (0..=30).find(|&e| feasible(&rates, 2f64.powi(e))) else {
        return Err(Error::PeriodicScaleNotFound);
    };
    let mut hi = 2f64.powi(e);
    let mut lo = if e == 0 { 0.0 } else { hi / 2.0 };
    for _ in 0..200 {
        if hi - lo <= 1e-3 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if feasible(&rates, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    rates.k = hi * PERIODIC_SAFETY;
    Ok(rates)
}

/// Stationary law `rho Q = 0`, `sum rho = 1` of an irreducible generator.
pub fn stationary_distribution(q: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = q.nrows();
    let mut a = q.transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::InvalidParameter("generator has no unique stationary law".into()))?;
    Ok(x.iter().copied().collect())
}

/// Tolerance on `|rho* m|` accepted by [`stationary_point`].
pub const STATIONARY_TOL: f64 = 1e-10;

/// The fixed point `(rho*, S*)` of the bridge flow with `S* = -log(rho*) / 2`.
pub fn stationary_point(m: &dyn Generator, t: f64, rho_star: &[f64]) -> Result<PhasePoint> {
    let q = m.at(t);
    if rho_star.len() != q.nrows() {
        return Err(Error::DimensionMismatch {
            expected: q.nrows(),
            got: rho_star.len(),
        });
    }
    if let Some(i) = rho_star.iter().position(|&r| !(r > 0.0)) {
        return Err(Error::BoundaryDensity(i));
    }
    let r = DVector::from_column_slice(rho_star);
    let res = q.tr_mul(&r).amax();
    if res > STATIONARY_TOL {
        return Err(Error::NotStationary(res));
    }
    let mut s: Vec<f64> = rho_star.iter().map(|r| -0.5 * r.ln()).collect();
    gauge_normalize(&mut s);
    Ok(PhasePoint::rho_s(rho_star.to_vec(), s))
}

fn rate_kind_for(spec: &HamiltonianSpec) -> Result<RateKind> {
    match &spec.variant {
        Variant::SbpEntropic { .. } | Variant::SbpPsi { .. } | Variant::SchrodingerFg { .. } => Ok(RateKind::Sbp),
        Variant::OtKinetic { theta } | Variant::LpKinetic { theta, .. } | Variant::FisherOt { theta, .. } => {
            if *theta == ThetaKind::Upwind {
                Err(Error::NonsmoothSpec("an upwind kinetic energy"))
            } else {
                Ok(RateKind::ThetaGeneral(*theta))
            }
        }
    }
}

/// Step used by [`markov_condition_residual`].
pub const MARKOV_FD_STEP: f64 = 1e-4;

/// `d/dt Q_ij` along the Hamiltonian flow through `x` at time `t`.
///
/// Computed as a central difference of the induced rate matrix along the
/// tangent `(1, dx/dt)` with step `1e-4`. A time-homogeneous Markov solution
/// has zero residual.
pub fn markov_condition_residual(spec: &HamiltonianSpec, x: &PhasePoint, t: f64) -> Result<DMatrix<f64>> {
    let kind = rate_kind_for(spec)?;
    let (dq, dp) = vector_field(spec, x, t)?;
    let e = MARKOV_FD_STEP;
    let shift = |s: f64| PhasePoint {
        chart: x.chart,
        q: x.q.iter().zip(&dq).map(|(a, b)| a + s * b).collect(),
        p: x.p.iter().zip(&dp).map(|(a, b)| a + s * b).collect(),
    };
    let hi = build_rate_matrix(kind, spec, &shift(e), t + e)?.q;
    let lo = build_rate_matrix(kind, spec, &shift(-e), t - e)?.q;
    Ok((hi - lo) / (2.0 * e))
}

/// For every edge `(i, j)`, `d/dt log c_ij` along the bridge flow where
/// `c_ij = e^{psi_i - psi_j}` and `e^{psi_i} = e^{S_i} sqrt(rho_i)`:
///
/// `-sum_k c_ki m_ik + sum_l c_lj m_jl + m_jj - m_ii`, sums over neighbours.
///
/// Zero on every edge when `e^{S_i} sqrt(rho_i)` is constant.
pub fn cij_condition_residual(g: &Graph, m: &DMatrix<f64>, rho: &[f64], s: &[f64]) -> Result<DMatrix<f64>> {
    let n = g.node_count();
    g.check_len(rho.len())?;
    g.check_len(s.len())?;
    if let Some(i) = rho.iter().position(|&r| !(r > 0.0)) {
        return Err(Error::BoundaryDensity(i));
    }
    let psi: Vec<f64> = s.iter().zip(rho).map(|(s, r)| s + 0.5 * r.ln()).collect();
    let c = |a: usize, b: usize| (psi[a] - psi[b]).exp();
    let mut out = DMatrix::zeros(n, n);
    for e in g.edges() {
        for (i, j) in [(e.i, e.j), (e.j, e.i)] {
            let a: f64 = g.neighbors(i).iter().map(|&(k, _)| c(k, i) * m[(i, k)]).sum();
            let b: f64 = g.neighbors(j).iter().map(|&(l, _)| c(l, j) * m[(j, l)]).sum();
            out[(i, j)] = -a + b + m[(j, j)] - m[(i, i)];
        }
    }
    Ok(out)
}

/// Outcome of following the dual-potential bridge flow against a periodic
/// reference from the reference density at time zero.
#[derive(Debug, Clone)]
pub struct PeriodicityEvidence {
    /// Sign of `d(psi_a - psi_b)/dt` at the first step.
    pub initial_sign: f64,
    /// Whether that sign was the same at every computed step.
    pub sign_constant: bool,
    pub min_abs_gap_rate: f64,
    pub steps: usize,
    /// Time at which the run stopped because the gap left `[-cap, cap]` or the
    /// flow overflowed.
    pub stopped_at: Option<f64>,
    /// `max_t |rho(t) - rho_ref(t)|` over the computed steps.
    pub max_reference_error: f64,
    /// `|rho(T) - rho(0)|` when a full period was computed.
    pub period_error: Option<f64>,
}

/// Integrates the dual-potential bridge flow of `spec` (which must be an
/// `SbpPsi` spec whose reference generates `reference_density`) over one
/// period from `(rho_ref(0), psi0)` and records the sign of
/// `d(psi_a - psi_b)/dt`.
pub fn periodicity_evidence(
    spec: &HamiltonianSpec,
    reference_density: &dyn PeriodicDensity,
    psi0: &[f64],
    pair: (usize, usize),
    dt: f64,
    gap_cap: f64,
) -> Result<PeriodicityEvidence> {
    if spec.chart() != Chart::RhoPsi {
        return Err(Error::ChartMismatch {
            expected: Chart::RhoPsi.name(),
            got: spec.chart().name(),
        });
    }
    let period = reference_density.period();
    let steps = step_count(0.0, period, dt)?;
    let h = period / steps as f64;
    let (a, b) = pair;
    let mut x = PhasePoint::rho_psi(reference_density.rho(0.0), psi0.to_vec());
    let rate = |x: &PhasePoint, t: f64| -> Result<f64> {
        let (_, dpsi) = vector_field(spec, x, t)?;
        Ok(dpsi[a] - dpsi[b])
    };
    let r0 = rate(&x, 0.0)?;
    let initial_sign = if r0 > 0.0 {
        1.0
    } else if r0 < 0.0 {
        -1.0
    } else {
        0.0
    };
    let mut ev = PeriodicityEvidence {
        initial_sign,
        sign_constant: true,
        min_abs_gap_rate: r0.abs(),
        steps: 0,
        stopped_at: None,
        max_reference_error: 0.0,
        period_error: None,
    };
    for k in 0..steps {
        let t = k as f64 * h;
        let next = match dynamics::step(spec, Method::Rk4, &x, t, h) {
            Ok(v) => v,
            Err(Error::NonfiniteValue(_)) => {
                ev.stopped_at = Some(t);
                break;
            }
            Err(e) => return Err(e),
        };
        x = next;
        let t1 = t + h;
        ev.steps = k + 1;
        let gap = x.p[a] - x.p[b];
        let r = match rate(&x, t1) {
            Ok(r) => r,
            Err(Error::NonfiniteValue(_)) => {
                ev.stopped_at = Some(t1);
                break;
            }
            Err(e) => return Err(e),
        };
        let sign = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        if sign != initial_sign {
            ev.sign_constant = false;
        }
        ev.min_abs_gap_rate = ev.min_abs_gap_rate.min(r.abs());
        let rr = reference_density.rho(t1);
        let err = x.q.iter().zip(&rr).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        ev.max_reference_error = ev.max_reference_error.max(err);
        if !(gap.abs() <= gap_cap) {
            ev.stopped_at = Some(t1);
            break;
        }
    }
    if ev.stopped_at.is_none() {
        let r0 = reference_density.rho(0.0);
        ev.period_error = Some(x.q.iter().zip(&r0).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max));
    }
    Ok(ev)
}
