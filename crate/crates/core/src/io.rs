//! CSV and JSON exports.

use std::io::Write;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dynamics::{Monodromy, Trajectory};
use crate::error::Result;
use crate::markov::{PathSample, RateKind, RateMatrix, Violation};
use crate::sbp::BridgeSolution;

fn header(n: usize, labels: (&str, &str)) -> Vec<String> {
    let mut h = vec!["time".to_string()];
    h.extend((0..n).map(|i| format!("{}_{i}", labels.0)));
    h.extend((0..n).map(|i| format!("{}_{i}", labels.1)));
    h.push("H".into());
    h.push("mass_defect".into());
    h
}

fn fmt(x: f64) -> String {
    format!("{x:e}")
}

/// One row per stored step: `time, <q>_i.., <p>_i.., H, mass_defect`, where
/// the column prefixes follow the chart (`rho, S` in the density chart).
pub fn write_trajectory_csv<W: Write>(w: W, traj: &Trajectory) -> Result<()> {
    let n = traj.states.first().map_or(0, |x| x.dim());
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header(n, traj.chart.labels()))?;
    for k in 0..traj.len() {
        let x = &traj.states[k];
        let mut row = vec![fmt(traj.times[k])];
        row.extend(x.q.iter().map(|&v| fmt(v)));
        row.extend(x.p.iter().map(|&v| fmt(v)));
        row.push(fmt(traj.hamiltonian[k]));
        row.push(fmt(traj.mass_defect[k]));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Densities in the trajectory schema. Potential and `H` columns are written
/// when given and left empty otherwise; the mass defect is `|sum rho - 1|`.
pub fn write_density_csv<W: Write>(
    w: W,
    times: &[f64],
    rho: &[Vec<f64>],
    potential: Option<&[Vec<f64>]>,
    h: Option<&[f64]>,
) -> Result<()> {
    let n = rho.first().map_or(0, |r| r.len());
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header(n, ("rho", "S")))?;
    for (k, &t) in times.iter().enumerate() {
        let mut row = vec![fmt(t)];
        row.extend(rho[k].iter().map(|&v| fmt(v)));
        match potential {
            Some(s) => row.extend(s[k].iter().map(|&v| fmt(v))),
            None => row.extend(std::iter::repeat_n(String::new(), n)),
        }
        row.push(h.map_or(String::new(), |h| fmt(h[k])));
        row.push(fmt((rho[k].iter().sum::<f64>() - 1.0).abs()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// One JSON object per line: `{"path", "seed", "start", "jumps": [[t, from, to], ..]}`.
pub fn write_paths_jsonl<W: Write>(mut w: W, paths: &[PathSample]) -> Result<()> {
    for p in paths {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct BridgeReport {
    pub iterations: usize,
    /// L1 residuals of the initial and terminal marginals.
    pub residuals: [f64; 2],
    pub residual_history: Vec<f64>,
    /// `H(P|R)` minus the dual bound after each iteration.
    pub objective_gap: Vec<f64>,
    pub entropy: f64,
    pub initial_kl: f64,
    pub entropy_rate_integral: f64,
    pub grid: Vec<f64>,
    pub f: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
    pub m_hat: Vec<Vec<Vec<f64>>>,
}

impl BridgeReport {
    /// Keeps every `stride`-th grid point and the last one.
    pub fn new(sol: &BridgeSolution, stride: usize) -> Self {
        let n = sol.times.len();
        let stride = stride.max(1);
        let keep: Vec<usize> = (0..n).filter(|k| k % stride == 0 || *k == n - 1).collect();
        let pick = |v: &Vec<Vec<f64>>| keep.iter().map(|&k| v[k].clone()).collect::<Vec<_>>();
        BridgeReport {
            iterations: sol.iterations,
            residuals: [sol.residuals.0, sol.residuals.1],
            residual_history: sol.residual_history.clone(),
            objective_gap: sol.dual_gaps(),
            entropy: sol.entropy,
            initial_kl: sol.initial_kl,
            entropy_rate_integral: sol.entropy_rate_integral,
            grid: keep.iter().map(|&k| sol.times[k]).collect(),
            f: pick(&sol.f),
            g: pick(&sol.g),
            rho: pick(&sol.rho),
            m_hat: keep.iter().map(|&k| matrix_rows(&sol.m_hat[k])).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TimedViolation {
    pub t: f64,
    #[serde(flatten)]
    pub violation: Violation,
}

/// Kolmogorov validity of a generator along a run.
#[derive(Debug, Clone, Serialize)]
pub struct RatesReport {
    pub kind: RateKind,
    pub valid: bool,
    pub checked_times: usize,
    pub clamped: usize,
    pub violations: Vec<TimedViolation>,
    /// Rate matrix at the first checked time.
    pub initial: Vec<Vec<f64>>,
}

impl RatesReport {
    pub fn new(kind: RateKind) -> Self {
        RatesReport {
            kind,
            valid: true,
            checked_times: 0,
            clamped: 0,
            violations: Vec::new(),
            initial: Vec::new(),
        }
    }

    pub fn record(&mut self, t: f64, r: &RateMatrix) {
        if self.checked_times == 0 {
            self.initial = matrix_rows(&r.q);
        }
        self.checked_times += 1;
        self.clamped += r.clamped;
        self.valid &= r.is_valid();
        self.violations.extend(r.violations.iter().map(|v| TimedViolation { t, violation: v.clone() }));
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FloquetReport {
    pub period: f64,
    /// `[re, im]` pairs.
    pub multipliers: Vec<[f64; 2]>,
    pub exponents: Vec<[f64; 2]>,
    pub unit_circle: Vec<bool>,
    pub periodic: Vec<usize>,
    pub antiperiodic: Vec<usize>,
    pub periodic_density: Option<Vec<f64>>,
}

impl From<&Monodromy> for FloquetReport {
    fn from(m: &Monodromy) -> Self {
        FloquetReport {
            period: m.period,
            multipliers: m.multipliers.iter().map(|z| [z.re, z.im]).collect(),
            exponents: m.exponents.iter().map(|z| [z.re, z.im]).collect(),
            unit_circle: (0..m.multipliers.len())
                .map(|i| m.periodic.contains(&i) || m.antiperiodic.contains(&i))
                .collect(),
            periodic: m.periodic.clone(),
            antiperiodic: m.antiperiodic.clone(),
            periodic_density: m.periodic_density.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate, Method};
    use crate::graph::Graph;
    use crate::hamiltonian::{HamiltonianSpec, PhasePoint, Variant};
    use crate::theta::ThetaKind;

    #[test]
    fn trajectory_csv_layout() {
        let g = Graph::path(2).unwrap();
        let spec = HamiltonianSpec::new(g, Variant::OtKinetic { theta: ThetaKind::Logarithmic }).unwrap();
        let x = PhasePoint::rho_s(vec![0.4, 0.6], vec![0.1, -0.1]);
        let traj = integrate(&spec, &x, 0.0, 0.1, 0.05, Method::Rk4).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "time,rho_0,rho_1,S_0,S_1,H,mass_defect");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0e0,4e-1,6e-1,"));
    }

    #[test]
    fn paths_jsonl_layout() {
        let p = PathSample {
            path: 3,
            seed: 7,
            start: 1,
            jumps: vec![(0.5, 1, 0)],
        };
        let mut buf = Vec::new();
        write_paths_jsonl(&mut buf, &[p]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"path\":3,\"seed\":7,\"start\":1,\"jumps\":[[0.5,1,0]]}\n"
        );
    }
}
