//! Rate matrices induced by a flow, propagators and path sampling.
//!
//! All matrices use the row convention `d rho / dt = rho Q`, with `Q_ij` the
//! rate of jumping from `i` to `j`. Each construction below is the unique
//! edge-local generator whose master equation reproduces the density equation
//! of the corresponding Hamiltonian flow.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_count, Trajectory};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::hamiltonian::{vector_field, Chart, HamiltonianSpec, PhasePoint, Variant};
use crate::par::{try_map_indexed, ExecMode};
use crate::rates::Generator;
use crate::theta::ThetaKind;

pub const OFF_DIAG_TOL: f64 = 1e-12;
pub const DIAG_TOL: f64 = 1e-12;
pub const ROW_SUM_TOL: f64 = 1e-10;

/// Which generator to read off a phase point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    /// `Q_ij = w_ij (S_j - S_i)^+`: jump towards higher potential.
    UpwindOt,
    /// `Q_ij = m_ij g_j / g_i`, the bridged reference rates.
    Sbp,
    /// Split of the symmetric-weight flux into both orientations.
    ThetaGeneral(ThetaKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    NegativeOffDiagonal,
    PositiveDiagonal,
    RowSum,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at ({}, {}): {}", self.kind, self.i, self.j, self.value)
    }
}

/// A rate matrix together with its Kolmogorov validity report.
#[derive(Debug, Clone)]
pub struct RateMatrix {
    pub q: DMatrix<f64>,
    pub violations: Vec<Violation>,
    /// Entries within tolerance of zero on the wrong side, set to zero.
    pub clamped: usize,
}

impl RateMatrix {
    /// Checks and clamps `q`.
    pub fn diagnose(mut q: DMatrix<f64>) -> Self {
        let n = q.nrows();
        let mut violations = Vec::new();
        let mut clamped = 0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                let v = q[(i, j)];
                if !v.is_finite() {
                    violations.push(Violation {
                        kind: ViolationKind::NonFinite,
                        i,
                        j,
                        value: v,
                    });
                    continue;
                }
                row += v;
                if i != j && v < 0.0 {
                    if v >= -OFF_DIAG_TOL {
                        q[(i, j)] = 0.0;
                        clamped += 1;
                    } else {
                        violations.push(Violation {
                            kind: ViolationKind::NegativeOffDiagonal,
                            i,
                            j,
                            value: v,
                        });
                    }
                }
                if i == j && v > 0.0 {
                    if v <= DIAG_TOL {
                        q[(i, j)] = 0.0;
                        clamped += 1;
                    } else {
                        violations.push(Violation {
                            kind: ViolationKind::PositiveDiagonal,
                            i,
                            j,
                            value: v,
                        });
                    }
                }
            }
            if row.abs() > ROW_SUM_TOL {
                violations.push(Violation {
                    kind: ViolationKind::RowSum,
                    i,
                    j: i,
                    value: row,
                });
            }
        }
        RateMatrix {
            q,
            violations,
            clamped,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_valid(self, t: f64) -> Result<DMatrix<f64>> {
        if let Some(first) = self.violations.first() {
            return Err(Error::InvalidGenerator {
                t,
                violations: self.violations.len(),
                first: first.to_string(),
            });
        }
        Ok(self.q)
    }
}

/// `Q_ij = w_ij (S_j - S_i)^+` on edges, `Q_ii = sum_j w_ij (S_i - S_j)^-`.
pub fn upwind_ot_rates(g: &Graph, s: &[f64]) -> Result<DMatrix<f64>> {
    g.check_len(s.len())?;
    Ok(crate::rates::matrix_from_edges(g, |i, j| {
        g.weight(i, j).unwrap_or(0.0) * (s[j] - s[i]).max(0.0)
    }))
}

/// Generator whose master equation is `rho_i' = sum_j w_ij v_ij theta_ij`.
///
/// For the average weight the flux splits as `Q_ij = w_ij v_ji / 2`; for the
/// logarithmic mean as `Q_ij = -w_ij v_ij / (log rho_i - log rho_j)`, falling
/// back to the average split when the densities nearly coincide. Either may
/// have negative off-diagonal entries.
pub fn theta_general_rates(g: &Graph, kind: ThetaKind, rho: &[f64], v: impl Fn(usize, usize) -> f64) -> Result<DMatrix<f64>> {
    g.check_len(rho.len())?;
    let mut err = None;
    let q = crate::rates::matrix_from_edges(g, |i, j| {
        let w = g.weight(i, j).unwrap_or(0.0);
        let vij = v(i, j);
        match kind {
            ThetaKind::Average => 0.5 * w * -vij,
            ThetaKind::Upwind => w * (-vij).max(0.0),
            ThetaKind::Logarithmic => {
                if !(rho[i] > 0.0) || !(rho[j] > 0.0) {
                    err.get_or_insert(Error::BoundaryDensity(if rho[i] > 0.0 { j } else { i }));
                    return f64::NAN;
                }
                let eta = (rho[i] - rho[j]) / (rho[i] + rho[j]);
                if eta.abs() < 1e-6 {
                    0.5 * w * -vij
                } else {
                    -w * vij / (rho[i].ln() - rho[j].ln())
                }
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(q),
    }
}

/// Reads the generator of kind `kind` off the phase point `x` at time `t`.
///
/// The upwind and general kinds use the graph of `spec` and, for an `L^p`
/// kinetic energy, the velocity `|S_i - S_j|^(q-2) (S_i - S_j)`. The bridge kind
/// needs a bridge Hamiltonian with reference rates.
pub fn build_rate_matrix(kind: RateKind, spec: &HamiltonianSpec, x: &PhasePoint, t: f64) -> Result<RateMatrix> {
    let g = &spec.graph;
    g.check_len(x.q.len())?;
    g.check_len(x.p.len())?;
    let q = match kind {
        RateKind::UpwindOt | RateKind::ThetaGeneral(_) => {
            if x.chart != Chart::RhoS {
                return Err(Error::ChartMismatch {
                    expected: Chart::RhoS.name(),
                    got: x.chart.name(),
                });
            }
            let qexp = match spec.variant {
                Variant::LpKinetic { q, .. } => q,
                _ => 2.0,
            };
            let s = &x.p;
            let vel = |i: usize, j: usize| {
                let d = s[i] - s[j];
                if qexp == 2.0 || d == 0.0 {
                    d
                } else {
                    d.abs().powf(qexp - 2.0) * d
                }
            };
            match kind {
                RateKind::UpwindOt => theta_general_rates(g, ThetaKind::Upwind, &x.q, vel)?,
                RateKind::ThetaGeneral(th) => theta_general_rates(g, th, &x.q, vel)?,
                RateKind::Sbp => unreachable!(),
            }
        }
        RateKind::Sbp => {
            let m = spec
                .variant
                .reference()
                .ok_or_else(|| Error::InvalidParameter("bridge rates need reference rates".into()))?
                .at(t);
            match (&spec.variant, x.chart) {
                (Variant::SbpEntropic { .. }, Chart::RhoS) => {
                    if let Some(i) = x.q.iter().position(|&r| !(r > 0.0)) {
                        return Err(Error::BoundaryDensity(i));
                    }
                    // g_i = sqrt(rho_i) e^{S_i}.
                    let (rho, s) = (&x.q, &x.p);
                    let mut err = None;
                    let q = crate::rates::matrix_from_edges(g, |i, j| {
                        let e = s[j] - s[i];
                        if e.abs() > 700.0 {
                            err.get_or_insert(Error::NonfiniteValue(format!("exp({e})")));
                        }
                        e.exp() * (rho[j] / rho[i]).sqrt() * m[(i, j)]
                    });
                    if let Some(e) = err {
                        return Err(e);
                    }
                    q
                }
                (Variant::SbpPsi { dual, .. }, Chart::RhoPsi) => {
                    let psi = &x.p;
                    let mut err = None;
                    let q = crate::rates::matrix_from_edges(g, |i, j| match dual.deriv(psi[j] - psi[i]) {
                        Ok(d) => d * m[(i, j)],
                        Err(e) => {
                            err.get_or_insert(e);
                            f64::NAN
                        }
                    });
                    if let Some(e) = err {
                        return Err(e);
                    }
                    q
                }
                (Variant::SchrodingerFg { .. }, Chart::Fg) => {
                    let gv = &x.p;
                    if let Some(i) = gv.iter().position(|&v| !(v > 0.0)) {
                        return Err(Error::NonpositiveFg(i, gv[i]));
                    }
                    crate::rates::matrix_from_edges(g, |i, j| m[(i, j)] * gv[j] / gv[i])
                }
                _ => {
                    return Err(Error::ChartMismatch {
                        expected: spec.chart().name(),
                        got: x.chart.name(),
                    })
                }
            }
        }
    };
    Ok(RateMatrix::diagnose(q))
}

/// `rho Q`.
pub fn master_rhs(q: &DMatrix<f64>, rho: &[f64]) -> Vec<f64> {
    let r = DVector::from_column_slice(rho);
    q.tr_mul(&r).iter().copied().collect()
}

fn valid_at(m: &dyn Generator, t: f64) -> Result<DMatrix<f64>> {
    RateMatrix::diagnose(m.at(t)).into_valid(t)
}

/// One RK4 step of `P' = P Q(t)` from the identity over `[t, t + h]`.
pub fn step_propagator(m: &dyn Generator, t: f64, h: f64) -> Result<DMatrix<f64>> {
    let n = m.dim();
    let (qa, qb, qc) = (valid_at(m, t)?, valid_at(m, t + 0.5 * h)?, valid_at(m, t + h)?);
    let x = DMatrix::<f64>::identity(n, n);
    let k1 = &x * &qa;
    let k2 = (&x + &k1 * (0.5 * h)) * &qb;
    let k3 = (&x + &k2 * (0.5 * h)) * &qb;
    let k4 = (&x + &k3 * h) * &qc;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

#[derive(Debug, Clone)]
pub struct Propagator {
    pub matrix: DMatrix<f64>,
    /// Entries in `[-1e-9, 0)` set to zero.
    pub clipped: usize,
}

/// Transition matrix `P_{s,t}` solving `d/dt P = P Q(t)`, `P_{s,s} = I`.
pub fn propagator(m: &dyn Generator, s: f64, t: f64, dt: f64) -> Result<Propagator> {
    let n = step_count(s, t, dt)?;
    let h = if n == 0 { 0.0 } else { (t - s) / n as f64 };
    let dim = m.dim();
    let mut p = DMatrix::<f64>::identity(dim, dim);
    for k in 0..n {
        p = p * step_propagator(m, s + k as f64 * h, h)?;
    }
    let mut clipped = 0;
    for v in p.iter_mut() {
        if *v < 0.0 {
            if *v >= -1e-9 {
                *v = 0.0;
                clipped += 1;
            } else {
                return Err(Error::InvalidGenerator {
                    t,
                    violations: 1,
                    first: format!("propagator entry {v} below -1e-9; reduce dt"),
                });
            }
        }
    }
    Ok(Propagator { matrix: p, clipped })
}

/// Solves `rho' = rho Q(t)` with RK4, returning `(t_k, rho(t_k))` at every step.
pub fn master_equation(m: &dyn Generator, rho0: &[f64], t0: f64, t1: f64, dt: f64) -> Result<Vec<(f64, Vec<f64>)>> {
    if rho0.len() != m.dim() {
        return Err(Error::DimensionMismatch {
            expected: m.dim(),
            got: rho0.len(),
        });
    }
    let n = step_count(t0, t1, dt)?;
    let h = if n == 0 { 0.0 } else { (t1 - t0) / n as f64 };
    let mut rho = rho0.to_vec();
    let mut out = Vec::with_capacity(n + 1);
    out.push((t0, rho.clone()));
    for k in 0..n {
        let t = t0 + k as f64 * h;
        let (qa, qb, qc) = (valid_at(m, t)?, valid_at(m, t + 0.5 * h)?, valid_at(m, t + h)?);
        let k1 = master_rhs(&qa, &rho);
        let y2: Vec<f64> = (0..rho.len()).map(|i| rho[i] + 0.5 * h * k1[i]).collect();
        let k2 = master_rhs(&qb, &y2);
        let y3: Vec<f64> = (0..rho.len()).map(|i| rho[i] + 0.5 * h * k2[i]).collect();
        let k3 = master_rhs(&qb, &y3);
        let y4: Vec<f64> = (0..rho.len()).map(|i| rho[i] + h * k3[i]).collect();
        let k4 = master_rhs(&qc, &y4);
        for i in 0..rho.len() {
            rho[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out.push((t0 + (k + 1) as f64 * h, rho.clone()));
    }
    Ok(out)
}

/// One sampled path: start node and `(time, from, to)` jumps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSample {
    pub path: usize,
    /// Seed of this path's own random stream.
    pub seed: u64,
    pub start: usize,
    pub jumps: Vec<(f64, usize, usize)>,
}

impl PathSample {
    /// Node occupied at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.jumps.partition_point(|&(tj, _, _)| tj <= t);
        if k == 0 {
            self.start
        } else {
            self.jumps[k - 1].2
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub particles: usize,
    pub t0: f64,
    pub t1: f64,
    pub seed: u64,
    /// Multiplier on the grid maximum of `|Q_ii|`.
    pub safety: f64,
    /// Explicit uniformization rate; required for discontinuous generators.
    pub rate_bound: Option<f64>,
    pub grid_points: usize,
    pub mode: ExecMode,
}

impl SamplerConfig {
    pub fn new(particles: usize, t0: f64, t1: f64, seed: u64) -> Self {
        SamplerConfig {
            particles,
            t0,
            t1,
            seed,
            safety: 1.2,
            rate_bound: None,
            grid_points: 1000,
            mode: ExecMode::default(),
        }
    }
}

/// Per-path seed derived from the run seed and the path index (SplitMix64).
pub fn path_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniformization rate: `safety * max |Q_ii|` over an even grid on `[t0, t1]`.
pub fn rate_bound(m: &dyn Generator, cfg: &SamplerConfig) -> Result<f64> {
    if let Some(b) = cfg.rate_bound {
        if !(b >= 0.0 && b.is_finite()) {
            return Err(Error::InvalidParameter(format!("rate bound {b}")));
        }
        return Ok(b);
    }
    if !m.continuous() {
        return Err(Error::RateBoundRequired);
    }
    let k = cfg.grid_points.max(1);
    let mut mx: f64 = 0.0;
    for s in 0..=k {
        let t = cfg.t0 + (cfg.t1 - cfg.t0) * s as f64 / k as f64;
        let q = valid_at(m, t)?;
        for i in 0..q.nrows() {
            mx = mx.max(-q[(i, i)]);
        }
    }
    Ok(cfg.safety * mx)
}

fn draw_categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// Samples `particles` independent paths of the chain with generator `m` and
/// initial law `rho0` by thinning a Poisson clock of rate `Lambda`.
pub fn sample_paths(m: &dyn Generator, rho0: &[f64], cfg: &SamplerConfig) -> Result<Vec<PathSample>> {
    let n = m.dim();
    if rho0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: rho0.len() });
    }
    if rho0.iter().any(|&r| !(r >= 0.0)) || (rho0.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter("initial law must be a probability vector".into()));
    }
    if !(cfg.t1 >= cfg.t0) {
        return Err(Error::InvalidParameter("sampling horizon must have t1 >= t0".into()));
    }
    let lambda = rate_bound(m, cfg)?;
    let clock = if lambda > 0.0 { Some(Exp::new(lambda).map_err(|e| Error::InvalidParameter(e.to_string()))?) } else { None };
    try_map_indexed(cfg.mode, cfg.particles, |idx| {
        let seed = path_seed(cfg.seed, idx as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = draw_categorical(rho0, rng.random::<f64>());
        let mut path = PathSample {
            path: idx,
            seed,
            start,
            jumps: Vec::new(),
        };
        let Some(clock) = clock else { return Ok(path) };
        let mut q = DMatrix::zeros(n, n);
        let mut state = start;
        let mut t = cfg.t0;
        loop {
            t += clock.sample(&mut rng);
            if t > cfg.t1 {
                break;
            }
            m.fill(t, &mut q);
            let rate = -q[(state, state)];
            if !rate.is_finite() || rate < -DIAG_TOL {
                return Err(Error::InvalidGenerator {
                    t,
                    violations: 1,
                    first: format!("diagonal rate {} at node {state}", q[(state, state)]),
                });
            }
            if rate > lambda * (1.0 + 1e-12) {
                return Err(Error::RateBoundExceeded { t, rate, bound: lambda });
            }
            let u = rng.random::<f64>() * lambda;
            if u >= rate {
                continue;
            }
            // Pick the target proportionally to Q_ij.
            let v = rng.random::<f64>() * rate;
            let mut acc = 0.0;
            let mut target = None;
            let mut last = None;
            for j in 0..n {
                if j == state {
                    continue;
                }
                let r = q[(state, j)];
                if r < -OFF_DIAG_TOL {
                    return Err(Error::InvalidGenerator {
                        t,
                        violations: 1,
                        first: format!("negative rate {r} from {state} to {j}"),
                    });
                }
                if r > 0.0 {
                    acc += r;
                    last = Some(j);
                    if v < acc && target.is_none() {
                        target = Some(j);
                    }
                }
            }
            if let Some(j) = target.or(last) {
                path.jumps.push((t, state, j));
                state = j;
            }
        }
        Ok(path)
    })
}

/// Fraction of paths in each node at time `t`.
pub fn empirical_density(samples: &[PathSample], n: usize, t: f64) -> Vec<f64> {
    let mut counts = vec![0usize; n];
    for s in samples {
        counts[s.state_at(t)] += 1;
    }
    let m = samples.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / m).collect()
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Generator frozen along a computed trajectory.
///
/// States between stored times are reconstructed by cubic Hermite
/// interpolation using the Hamiltonian vector field as derivative data, and
/// the rate matrix of the requested kind is read off the interpolated state.
/// If that fails the matrix is filled with NaN, which every consumer rejects.
#[derive(Debug, Clone)]
pub struct FrozenTrajectory {
    spec: HamiltonianSpec,
    kind: RateKind,
    times: Vec<f64>,
    states: Vec<PhasePoint>,
    derivs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl FrozenTrajectory {
    pub fn new(spec: &HamiltonianSpec, kind: RateKind, traj: &Trajectory) -> Result<Self> {
        let mut derivs = Vec::with_capacity(traj.len());
        for (x, &t) in traj.states.iter().zip(&traj.times) {
            let (dq, mut dp) = vector_field(spec, x, t)?;
            if x.chart != Chart::Fg {
                crate::graph::gauge_normalize(&mut dp);
            }
            derivs.push((dq, dp));
        }
        Ok(FrozenTrajectory {
            spec: spec.clone(),
            kind,
            times: traj.times.clone(),
            states: traj.states.clone(),
            derivs,
        })
    }

    /// Interpolated phase point at `t` (clamped to the stored range).
    pub fn state_at(&self, t: f64) -> PhasePoint {
        let last = self.times.len() - 1;
        if last == 0 || t <= self.times[0] {
            return self.states[0].clone();
        }
        if t >= self.times[last] {
            return self.states[last].clone();
        }
        let k = self.times.partition_point(|&s| s <= t).saturating_sub(1).min(last - 1);
        let (ta, tb) = (self.times[k], self.times[k + 1]);
        let h = tb - ta;
        let s = (t - ta) / h;
        let (h00, h10, h01, h11) = (
            2.0 * s.powi(3) - 3.0 * s * s + 1.0,
            s.powi(3) - 2.0 * s * s + s,
            -2.0 * s.powi(3) + 3.0 * s * s,
            s.powi(3) - s * s,
        );
        let interp = |a: &[f64], b: &[f64], da: &[f64], db: &[f64]| -> Vec<f64> {
            (0..a.len())
                .map(|i| h00 * a[i] + h10 * h * da[i] + h01 * b[i] + h11 * h * db[i])
                .collect()
        };
        let (xa, xb) = (&self.states[k], &self.states[k + 1]);
        let (da, db) = (&self.derivs[k], &self.derivs[k + 1]);
        PhasePoint {
            chart: xa.chart,
            q: interp(&xa.q, &xb.q, &da.0, &db.0),
            p: interp(&xa.p, &xb.p, &da.1, &db.1),
        }
    }
}

impl Generator for FrozenTrajectory {
    fn dim(&self) -> usize {
        self.spec.graph.node_count()
    }

    fn fill(&self, t: f64, out: &mut DMatrix<f64>) {
        let x = self.state_at(t);
        match build_rate_matrix(self.kind, &self.spec, &x, t) {
            Ok(r) => out.copy_from(&r.q),
            Err(_) => out.fill(f64::NAN),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::ConstantRates;

    fn two_node_spec(theta: ThetaKind) -> HamiltonianSpec {
        HamiltonianSpec::new(Graph::path(2).unwrap(), Variant::OtKinetic { theta }).unwrap()
    }

    #[test]
    fn upwind_two_node() {
        let spec = two_node_spec(ThetaKind::Upwind);
        let x = PhasePoint::rho_s(vec![0.5, 0.5], vec![1.0, 0.0]);
        let r = build_rate_matrix(RateKind::UpwindOt, &spec, &x, 0.0).unwrap();
        assert!(r.is_valid());
        assert_eq!(r.q, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, -1.0]));
        // Reproduces the density equation of the upwind flow.
        let (dr, _) = vector_field(&spec, &x, 0.0).unwrap();
        assert_eq!(master_rhs(&r.q, &x.q), dr);
    }

    #[test]
    fn average_split_is_flagged() {
        let spec = two_node_spec(ThetaKind::Average);
        let x = PhasePoint::rho_s(vec![0.5, 0.5], vec![1.0, 0.0]);
        let r = build_rate_matrix(RateKind::ThetaGeneral(ThetaKind::Average), &spec, &x, 0.0).unwrap();
        assert!(!r.is_valid());
        assert!(r
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::NegativeOffDiagonal && (v.i, v.j) == (0, 1)));
        let (dr, _) = vector_field(&spec, &x, 0.0).unwrap();
        let flow = master_rhs(&r.q, &x.q);
        assert!((flow[0] - dr[0]).abs() < 1e-15 && (flow[1] - dr[1]).abs() < 1e-15);
    }

    #[test]
    fn log_mean_split_matches_flow() {
        let g = Graph::complete(3).unwrap();
        let spec = HamiltonianSpec::new(g, Variant::OtKinetic { theta: ThetaKind::Logarithmic }).unwrap();
        let x = PhasePoint::rho_s(vec![0.2, 0.3, 0.5], vec![0.3, -0.1, 0.4]);
        let r = build_rate_matrix(RateKind::ThetaGeneral(ThetaKind::Logarithmic), &spec, &x, 0.0).unwrap();
        let (dr, _) = vector_field(&spec, &x, 0.0).unwrap();
        let flow = master_rhs(&r.q, &x.q);
        for i in 0..3 {
            assert!((flow[i] - dr[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn clamping_counts() {
        let q = DMatrix::from_row_slice(2, 2, &[0.0, -1e-13, 1.0, -1.0]);
        let r = RateMatrix::diagnose(q);
        assert!(r.is_valid());
        assert_eq!(r.clamped, 1);
    }

    #[test]
    fn propagator_closed_form() {
        let g = Graph::path(2).unwrap();
        let m = ConstantRates::from_graph(&g);
        let p = propagator(&m, 0.0, 1.0, 1e-3).unwrap().matrix;
        let e = (-2.0f64).exp();
        let exact = DMatrix::from_row_slice(2, 2, &[0.5 + 0.5 * e, 0.5 - 0.5 * e, 0.5 - 0.5 * e, 0.5 + 0.5 * e]);
        assert!((p - exact).amax() < 1e-12);
        let id = propagator(&m, 0.3, 0.3, 1e-3).unwrap().matrix;
        assert_eq!(id, DMatrix::identity(2, 2));
    }

    #[test]
    fn zero_generator_paths_constant() {
        let m = ConstantRates::new(DMatrix::zeros(3, 3));
        let cfg = SamplerConfig::new(50, 0.0, 1.0, 7);
        let paths = sample_paths(&m, &[0.2, 0.3, 0.5], &cfg).unwrap();
        assert!(paths.iter().all(|p| p.jumps.is_empty()));
    }

    #[test]
    fn sampler_is_deterministic_across_modes() {
        let g = Graph::cycle(4).unwrap();
        let m = ConstantRates::from_graph(&g);
        let mut cfg = SamplerConfig::new(200, 0.0, 2.0, 11);
        cfg.mode = ExecMode::Sequential;
        let a = sample_paths(&m, &[0.25; 4], &cfg).unwrap();
        cfg.mode = ExecMode::Parallel;
        let b = sample_paths(&m, &[0.25; 4], &cfg).unwrap();
        assert_eq!(a, b);
        for p in &a {
            let mut cur = p.start;
            for &(_, from, to) in &p.jumps {
                assert_eq!(from, cur);
                assert!(g.has_edge(from, to));
                cur = to;
            }
        }
    }

    #[test]
    fn rate_bound_is_enforced() {
        let g = Graph::path(2).unwrap();
        let m = ConstantRates::from_graph(&g);
        let mut cfg = SamplerConfig::new(100, 0.0, 5.0, 1);
        cfg.rate_bound = Some(0.5);
        assert!(matches!(
            sample_paths(&m, &[0.5, 0.5], &cfg),
            Err(Error::RateBoundExceeded { .. })
        ));
    }

    #[test]
    fn empirical_indicator() {
        let p = PathSample {
            path: 0,
            seed: 0,
            start: 2,
            jumps: vec![(0.5, 2, 1)],
        };
        assert_eq!(empirical_density(&[p.clone()], 3, 0.1), vec![0.0, 0.0, 1.0]);
        assert_eq!(empirical_density(&[p], 3, 0.5), vec![0.0, 1.0, 0.0]);
    }
}
