use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use hamgraph::catalog::{BuiltReference, ReferenceSpec, Scenario};
use hamgraph::dynamics::{
    bilinear_h, integrate_with, monodromy, symplectic_check, IntegrationConfig, MadelungConvention, Trajectory,
    Transform,
};
use hamgraph::graph::gauge_normalize;
use hamgraph::hamiltonian::vector_field;
use hamgraph::io::{
    write_density_csv, write_paths_jsonl, write_trajectory_csv, BridgeReport, FloquetReport, RatesReport,
};
use hamgraph::markov::{
    build_rate_matrix, empirical_density, master_equation, sample_paths, total_variation, FrozenTrajectory,
    PathSample, RateKind, RateMatrix, SamplerConfig,
};
use hamgraph::sbp::{
    cij_condition_residual, markov_condition_residual, path_entropy_bruteforce, solve_bridge,
    stationary_distribution, stationary_point, BridgeConfig, BridgeProblem, BridgeSolution,
};
use hamgraph::{
    Chart, Error, ExecMode, FnRates, Generator, Graph, HamiltonianSpec, PhasePoint, ThetaKind, Variant,
};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::{Failure, Options};

pub struct Context<'a> {
    pub scenario: &'a Scenario,
    pub options: &'a Options,
    pub out: &'a Path,
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 5,
        message: format!("{}: {e}", path.display()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_failure(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| io_failure(path, e))
}

fn graph(sc: &Scenario) -> Result<Graph, Failure> {
    sc.graph.build().map_err(|e| Failure::config(format!("graph: {e}")))
}

fn hamiltonian(sc: &Scenario, g: &Graph) -> Result<Option<HamiltonianSpec>, Failure> {
    sc.hamiltonian
        .as_ref()
        .map(|h| h.build(g).map_err(|e| Failure::config(format!("hamiltonian: {e}"))))
        .transpose()
}

fn reference(sc: &Scenario, g: &Graph) -> Result<Option<BuiltReference>, Failure> {
    sc.reference_spec()
        .map(|r| r.build(g).map_err(|e| Failure::config(format!("reference: {e}"))))
        .transpose()
}

fn is_homogeneous(sc: &Scenario) -> bool {
    matches!(
        sc.reference_spec(),
        Some(ReferenceSpec::GraphWeights | ReferenceSpec::Constant { .. })
    )
}

fn default_rate_kind(spec: &HamiltonianSpec) -> RateKind {
    match &spec.variant {
        Variant::OtKinetic { theta } | Variant::LpKinetic { theta, .. } | Variant::FisherOt { theta, .. } => {
            if *theta == ThetaKind::Upwind {
                RateKind::UpwindOt
            } else {
                RateKind::ThetaGeneral(*theta)
            }
        }
        _ => RateKind::Sbp,
    }
}

fn initial_point(sc: &Scenario, spec: &HamiltonianSpec) -> Result<PhasePoint, Failure> {
    let init = sc
        .initial
        .as_ref()
        .ok_or_else(|| Failure::config("missing key `initial` (an initial phase point is required)"))?;
    if sc.marginals.is_some() {
        return Err(Failure::config("give exactly one of `initial` and `marginals`"));
    }
    let x = init.point();
    if x.chart != spec.chart() {
        return Err(Failure::config(format!(
            "initial.chart: {} does not match the {} Hamiltonian chart {}",
            x.chart.name(),
            spec.variant.name(),
            spec.chart().name()
        )));
    }
    let n = spec.graph.node_count();
    if x.q.len() != n || x.p.len() != n {
        return Err(Failure::config(format!("initial: expected {n} entries in `q` and `p`")));
    }
    Ok(x)
}

/// Integrates the geodesic and checks its rate matrices at every stored step.
fn run_geodesic(ctx: &Context) -> Result<(HamiltonianSpec, PhasePoint, Trajectory, RateKind), Failure> {
    let sc = ctx.scenario;
    let g = graph(sc)?;
    let spec = hamiltonian(sc, &g)?.ok_or_else(|| Failure::config("missing key `hamiltonian`"))?;
    let x0 = initial_point(sc, &spec)?;
    let cfg = IntegrationConfig {
        t0: sc.horizon[0],
        t1: sc.horizon[1],
        dt: sc.dt,
        method: sc.method,
        stride: sc.stride.max(1),
    };
    let traj = integrate_with(&spec, &x0, &cfg).map_err(Failure::run)?;
    write_trajectory_csv(create(&ctx.out.join("trajectory.csv"))?, &traj).map_err(Failure::run)?;
    let kind = sc.rates.unwrap_or_else(|| default_rate_kind(&spec));
    let mut report = RatesReport::new(kind);
    for (x, &t) in traj.states.iter().zip(&traj.times) {
        let r = build_rate_matrix(kind, &spec, x, t).map_err(Failure::run)?;
        report.record(t, &r);
    }
    write_json(&ctx.out.join("rates.json"), &report)?;
    if let Some(v) = report.violations.first() {
        return Err(Failure::run(Error::InvalidGenerator {
            t: v.t,
            violations: report.violations.len(),
            first: v.violation.to_string(),
        }));
    }
    Ok((spec, x0, traj, kind))
}

fn sample(ctx: &Context, m: &dyn Generator, rho0: &[f64]) -> Result<Vec<PathSample>, Failure> {
    let sc = ctx.scenario;
    let s = &sc.sampler;
    let mut cfg = SamplerConfig::new(s.particles, sc.horizon[0], sc.horizon[1], s.seed);
    cfg.rate_bound = s.rate_bound;
    cfg.mode = ExecMode::Parallel;
    let paths = sample_paths(m, rho0, &cfg).map_err(Failure::run)?;
    write_paths_jsonl(create(&ctx.out.join("paths.jsonl"))?, &paths).map_err(Failure::run)?;
    Ok(paths)
}

pub fn geodesic(ctx: &Context) -> Result<(), Failure> {
    let (spec, x0, traj, kind) = run_geodesic(ctx)?;
    let frozen = FrozenTrajectory::new(&spec, kind, &traj).map_err(Failure::run)?;
    let paths = sample(ctx, &frozen, &x0.density())?;
    let report = json!({
        "command": "geodesic",
        "variant": spec.variant.name(),
        "rate_kind": kind,
        "valid_rates": true,
        "stored_steps": traj.len(),
        "max_h_drift": traj.max_h_drift(),
        "max_mass_defect": traj.max_mass_defect(),
        "min_density": traj.min_density.iter().copied().fold(f64::INFINITY, f64::min),
        "paths": paths.len(),
    });
    write_json(&ctx.out.join("report.json"), &report)
}

fn bridge_problem(ctx: &Context) -> Result<BridgeProblem, Failure> {
    let sc = ctx.scenario;
    let mg = sc
        .marginals
        .as_ref()
        .ok_or_else(|| Failure::config("missing key `marginals` (rho0 and rho1 are required)"))?;
    if sc.initial.is_some() {
        return Err(Failure::config("give exactly one of `initial` and `marginals`"));
    }
    let g = graph(sc)?;
    let built = reference(sc, &g)?.ok_or_else(|| Failure::config("missing key `reference`"))?;
    let mut p = BridgeProblem::new(g, built.rates, mg.rho0.clone(), mg.rho1.clone());
    p.reference_initial = mg.reference_initial.clone();
    p.t0 = sc.horizon[0];
    p.t1 = sc.horizon[1];
    Ok(p)
}

fn solve(ctx: &Context, p: &BridgeProblem) -> Result<BridgeSolution, Failure> {
    let cfg = BridgeConfig {
        tol: ctx.options.tol,
        max_iter: 200,
        dt: ctx.scenario.dt,
    };
    match solve_bridge(p, &cfg) {
        Ok(s) => Ok(s),
        Err(Error::InvalidMarginal(name, why)) => Err(Failure::config(format!("marginals.{name}: {why}"))),
        Err(Error::NonConvergence {
            iterations,
            residual,
            history,
        }) => {
            let report = json!({
                "command": "bridge",
                "status": "nonconvergence",
                "iterations": iterations,
                "residual": residual,
                "residual_history": history,
            });
            write_json(&ctx.out.join("report.json"), &report)?;
            Err(Failure {
                code: 3,
                message: format!(
                    "bridge did not converge in {iterations} iterations (residual {residual:e}); history: {history:?}"
                ),
            })
        }
        Err(e) => Err(Failure::run(e)),
    }
}

pub fn bridge(ctx: &Context) -> Result<(), Failure> {
    let p = bridge_problem(ctx)?;
    let sol = solve(ctx, &p)?;
    write_json(&ctx.out.join("bridge.json"), &BridgeReport::new(&sol, ctx.scenario.stride))?;

    let potentials: Vec<Vec<f64>> = sol
        .f
        .iter()
        .zip(&sol.g)
        .map(|(f, g)| {
            let mut s: Vec<f64> = f.iter().zip(g).map(|(a, b)| 0.5 * (b / a).ln()).collect();
            gauge_normalize(&mut s);
            s
        })
        .collect();
    let h: Vec<f64> = (0..sol.times.len()).map(|k| bilinear_h(&sol.m[k], &sol.f[k], &sol.g[k])).collect();
    write_density_csv(
        create(&ctx.out.join("trajectory.csv"))?,
        &sol.times,
        &sol.rho,
        Some(&potentials),
        Some(&h),
    )
    .map_err(Failure::run)?;

    let mut rates = RatesReport::new(RateKind::Sbp);
    for (mh, &t) in sol.m_hat.iter().zip(&sol.times) {
        rates.record(t, &RateMatrix::diagnose(mh.clone()));
    }
    write_json(&ctx.out.join("rates.json"), &rates)?;

    let formula = sol.initial_kl + sol.entropy_rate_integral;
    let oracle = match ctx.options.oracle {
        None => Value::Null,
        Some(n) => {
            let b = path_entropy_bruteforce(&p, &sol, n, ExecMode::Parallel).map_err(|e| match e {
                Error::PathExplosion(_) | Error::NegativeStepProbability { .. } => {
                    Failure::config(format!("--oracle {n}: {e}"))
                }
                e => Failure::run(e),
            })?;
            json!({
                "steps": n,
                "brute_force": b,
                "formula": formula,
                "gap": (b - formula).abs(),
                "gap_times_steps": (b - formula).abs() * n as f64,
            })
        }
    };
    let report = json!({
        "command": "bridge",
        "status": "ok",
        "iterations": sol.iterations,
        "residuals": [sol.residuals.0, sol.residuals.1],
        "residual_history": sol.residual_history,
        "objective_gap": sol.dual_gaps(),
        "entropy": sol.entropy,
        "initial_kl": sol.initial_kl,
        "entropy_rate_integral": sol.entropy_rate_integral,
        "formula": formula,
        "oracle": oracle,
    });
    write_json(&ctx.out.join("report.json"), &report)
}

pub fn simulate(ctx: &Context) -> Result<(), Failure> {
    let sc = ctx.scenario;
    let (source, generator, rho0): (&str, Arc<dyn Generator>, Vec<f64>) = if sc.marginals.is_some() {
        let p = bridge_problem(ctx)?;
        let sol = solve(ctx, &p)?;
        ("bridge", Arc::new(sol.generator()), p.rho0.clone())
    } else if sc.initial.is_some() {
        let (spec, x0, traj, kind) = run_geodesic(ctx)?;
        let frozen = FrozenTrajectory::new(&spec, kind, &traj).map_err(Failure::run)?;
        ("geodesic", Arc::new(frozen), x0.density())
    } else {
        let g = graph(sc)?;
        let built = reference(sc, &g)?
            .ok_or_else(|| Failure::config("simulate needs `marginals`, `initial` or `reference`"))?;
        let n = g.node_count();
        let rho0 = match (&sc.initial_density, &built.density) {
            (Some(r), _) => r.clone(),
            (None, Some(d)) => d.rho(sc.horizon[0]),
            (None, None) => vec![1.0 / n as f64; n],
        };
        if rho0.len() != n {
            return Err(Failure::config(format!("initial_density: expected {n} entries")));
        }
        ("reference", built.rates, rho0)
    };
    let paths = sample(ctx, generator.as_ref(), &rho0)?;
    let (t0, t1) = (sc.horizon[0], sc.horizon[1]);
    let exact = master_equation(generator.as_ref(), &rho0, t0, t1, sc.dt).map_err(Failure::run)?;
    let n = rho0.len();
    let k = sc.sampler.checkpoints.max(1);
    let mut times = vec![t0];
    let mut empirical = vec![empirical_density(&paths, n, t0)];
    let mut rows = Vec::with_capacity(k);
    let mut max_tv = 0.0f64;
    for c in 1..=k {
        let (t, ref master) = exact[(exact.len() - 1) * c / k];
        let emp = empirical_density(&paths, n, t);
        let tv = total_variation(&emp, master);
        max_tv = max_tv.max(tv);
        rows.push(json!({"t": t, "tv": tv, "empirical": emp, "master_equation": master}));
        times.push(t);
        empirical.push(emp);
    }
    write_density_csv(create(&ctx.out.join("trajectory.csv"))?, &times, &empirical, None, None)
        .map_err(Failure::run)?;
    let m = sc.sampler.particles.max(1) as f64;
    let report = json!({
        "command": "simulate",
        "source": source,
        "particles": sc.sampler.particles,
        "seed": sc.sampler.seed,
        "tv_bound": 3.0 * (2.0 / m).sqrt(),
        "max_tv": max_tv,
        "checkpoints": rows,
    });
    write_json(&ctx.out.join("report.json"), &report)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, &b| a.max(b.abs()))
}

fn err_value(e: Error) -> Value {
    json!({ "error": e.to_string() })
}

pub fn analyze(ctx: &Context) -> Result<(), Failure> {
    let sc = ctx.scenario;
    let g = graph(sc)?;
    let spec = hamiltonian(sc, &g)?;
    let built = reference(sc, &g)?;
    let x0 = match &spec {
        Some(s) if sc.initial.is_some() => Some(initial_point(sc, s)?),
        _ => None,
    };
    let (t0, t1) = (sc.horizon[0], sc.horizon[1]);
    let mut report = Map::new();
    report.insert("command".into(), json!("analyze"));
    let mut stationary_density = None;

    if let Some(b) = &built {
        let periodic: Option<Arc<dyn Generator>> = match b.rates.period() {
            Some(_) => Some(b.rates.clone()),
            None if is_homogeneous(sc) && t1 > t0 => {
                let inner = b.rates.clone();
                Some(Arc::new(FnRates::new(inner.dim(), Some(t1 - t0), move |t, out| inner.fill(t, out))))
            }
            None => None,
        };
        if let Some(m) = periodic {
            let v = match monodromy(m.as_ref(), sc.dt) {
                Ok(mono) => {
                    let r = FloquetReport::from(&mono);
                    let flags = r.unit_circle.iter().filter(|&&f| f).count();
                    let mut v = serde_json::to_value(r).map_err(|e| Failure::run(e.into()))?;
                    v["unit_circle_count"] = json!(flags);
                    v
                }
                Err(e) => err_value(e),
            };
            report.insert("floquet".into(), v);
        }
        if is_homogeneous(sc) {
            let q = b.rates.at(t0);
            let v = match stationary_distribution(&q).and_then(|pi| {
                let x = stationary_point(b.rates.as_ref(), t0, &pi)?;
                let s = HamiltonianSpec::new(g.clone(), Variant::SbpEntropic { m: b.rates.clone() })?;
                let (dr, ds) = vector_field(&s, &x, t0)?;
                let cij = cij_condition_residual(&g, &q, &x.q, &x.p)?.amax();
                Ok((pi, max_abs(&dr).max(max_abs(&ds)), cij))
            }) {
                Ok((pi, vf, cij)) => {
                    stationary_density = Some(pi.clone());
                    json!({"rho_star": pi, "vector_field_residual": vf, "cij_residual": cij})
                }
                Err(e) => err_value(e),
            };
            report.insert("stationary".into(), v);
        }
    }

    if let (Some(spec), Some(x)) = (&spec, &x0) {
        let v = match markov_condition_residual(spec, x, t0) {
            Ok(r) => json!({"max_abs_dq_dt": r.amax()}),
            Err(Error::NonsmoothSpec(what)) => json!({"skipped": format!("{what} is not differentiable")}),
            Err(e) => err_value(e),
        };
        report.insert("markov_condition".into(), v);
    }

    let base = match (&x0, &sc.marginals, stationary_density) {
        (Some(x), _, _) if x.chart != Chart::Fg => Some(PhasePoint::rho_s(x.q.clone(), x.p.clone())),
        (_, Some(m), _) => Some(PhasePoint::rho_s(m.rho0.clone(), vec![0.0; m.rho0.len()])),
        (_, _, Some(pi)) => {
            let n = pi.len();
            Some(PhasePoint::rho_s(pi, vec![0.0; n]))
        }
        _ => {
            let n = g.node_count();
            Some(PhasePoint::rho_s(vec![1.0 / n as f64; n], vec![0.0; n]))
        }
    };
    if let Some(x) = base {
        let psi = PhasePoint::rho_psi(x.q.clone(), x.p.clone());
        let checks = [
            ("hopf_cole", symplectic_check(Transform::HopfCole, &psi, 1e-5)),
            ("madelung", symplectic_check(Transform::Madelung(MadelungConvention::Sbp), &x, 1e-5)),
            (
                "madelung_fisher",
                symplectic_check(Transform::Madelung(MadelungConvention::Fisher), &x, 1e-5),
            ),
        ];
        let mut v = Map::new();
        let mut passed = true;
        for (name, c) in checks {
            match c {
                Ok(r) => {
                    passed &= r <= 1e-6;
                    v.insert(name.into(), json!(r));
                }
                Err(e) => {
                    passed = false;
                    v.insert(name.into(), err_value(e));
                }
            }
        }
        v.insert("tolerance".into(), json!(1e-6));
        v.insert("passed".into(), json!(passed));
        report.insert("symplectic".into(), Value::Object(v));
    }
    write_json(&ctx.out.join("report.json"), &Value::Object(report))
}
