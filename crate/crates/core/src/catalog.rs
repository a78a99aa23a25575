//! Serializable scenario descriptions and the built-in examples.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::Method;
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphSpec};
use crate::hamiltonian::{Chart, ConvexDual, Coupling, HamiltonianSpec, NodePotential, PhasePoint, Variant};
use crate::markov::RateKind;
use crate::rates::{ConstantRates, ReferenceRates};
use crate::sbp::{periodic_rate_from_density, stationary_distribution, LoopSupport, PeriodicDensity};
use crate::theta::ThetaKind;

/// `rho(t) = (1/2 + cos(t)/4, 1/2 - cos(t)/4)`, period `2 pi`.
#[derive(Debug, Clone, Copy)]
pub struct TwoNodeCos;

impl PeriodicDensity for TwoNodeCos {
    fn dim(&self) -> usize {
        2
    }

    fn period(&self) -> f64 {
        2.0 * PI
    }

    fn rho(&self, t: f64) -> Vec<f64> {
        let c = 0.25 * t.cos();
        vec![0.5 + c, 0.5 - c]
    }

    fn drho(&self, t: f64) -> Option<Vec<f64>> {
        let s = 0.25 * t.sin();
        Some(vec![-s, s])
    }
}

/// A circle in the simplex centred at `(1/3, 1/3, 1/3)`, period `2 pi`.
#[derive(Debug, Clone, Copy)]
pub struct ThreeNodeCircle;

const A: f64 = 0.204_124_145_231_931_5; // 1 / (2 sqrt 6)
const B: f64 = 0.117_851_130_197_757_92; // 1 / (6 sqrt 2)

impl PeriodicDensity for ThreeNodeCircle {
    fn dim(&self) -> usize {
        3
    }

    fn period(&self) -> f64 {
        2.0 * PI
    }

    fn rho(&self, t: f64) -> Vec<f64> {
        let (s, c) = t.sin_cos();
        let third = 1.0 / 3.0;
        vec![A * c + B * s + third, -A * c + B * s + third, -2.0 * B * s + third]
    }

    fn drho(&self, t: f64) -> Option<Vec<f64>> {
        let (s, c) = t.sin_cos();
        Some(vec![-A * s + B * c, A * s + B * c, -2.0 * B * c])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedDensity {
    TwoNodeCos,
    ThreeNodeCircle,
}

impl NamedDensity {
    pub fn density(self) -> Arc<dyn PeriodicDensity> {
        match self {
            NamedDensity::TwoNodeCos => Arc::new(TwoNodeCos),
            NamedDensity::ThreeNodeCircle => Arc::new(ThreeNodeCircle),
        }
    }
}

/// Reference generator as written in a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// `m_ij = w_ij` on every edge.
    GraphWeights,
    /// Constant matrix; the diagonal is recomputed from the rows.
    Constant { matrix: Vec<Vec<f64>> },
    /// Rates built to reproduce a named periodic density.
    Periodic {
        density: NamedDensity,
        /// Hamiltonian cycle carrying the rates; all pairs when absent.
        #[serde(default)]
        cycle: Option<Vec<usize>>,
        #[serde(default)]
        k: Option<f64>,
    },
}

/// A built reference together with the periodic density it reproduces.
#[derive(Debug, Clone)]
pub struct BuiltReference {
    pub rates: ReferenceRates,
    pub density: Option<Arc<dyn PeriodicDensity>>,
}

impl ReferenceSpec {
    pub fn build(&self, g: &Graph) -> Result<BuiltReference> {
        let n = g.node_count();
        match self {
            ReferenceSpec::GraphWeights => Ok(BuiltReference {
                rates: ConstantRates::from_graph(g).shared(),
                density: None,
            }),
            ReferenceSpec::Constant { matrix } => {
                if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: matrix.len(),
                    });
                }
                let mut q = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { matrix[i][j] });
                for i in 0..n {
                    let s: f64 = q.row(i).sum();
                    q[(i, i)] = -s;
                }
                Ok(BuiltReference {
                    rates: ConstantRates::new(q).shared(),
                    density: None,
                })
            }
            ReferenceSpec::Periodic { density, cycle, k } => {
                let d = density.density();
                let support = match cycle {
                    Some(c) => LoopSupport::Cycle(c.clone()),
                    None => LoopSupport::Complete,
                };
                let rates = periodic_rate_from_density(g, d.clone(), support, *k)?;
                Ok(BuiltReference {
                    rates: Arc::new(rates),
                    density: Some(d),
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualSpec {
    #[default]
    Entropy,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum VariantSpec {
    OtKinetic {
        theta: ThetaKind,
    },
    LpKinetic {
        theta: ThetaKind,
        q: f64,
    },
    FisherOt {
        theta: ThetaKind,
        theta_fisher: ThetaKind,
        beta: f64,
        coupling: Coupling,
    },
    SbpEntropic {
        reference: ReferenceSpec,
    },
    SbpPsi {
        reference: ReferenceSpec,
        #[serde(default)]
        dual: DualSpec,
    },
    SchrodingerFg {
        reference: ReferenceSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    Linear { v: Vec<f64> },
    Quadratic { w: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianConfig {
    #[serde(flatten)]
    pub variant: VariantSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub potential: Vec<PotentialSpec>,
}

impl HamiltonianConfig {
    pub fn build(&self, g: &Graph) -> Result<HamiltonianSpec> {
        let variant = match &self.variant {
            VariantSpec::OtKinetic { theta } => Variant::OtKinetic { theta: *theta },
            VariantSpec::LpKinetic { theta, q } => Variant::LpKinetic { theta: *theta, q: *q },
            VariantSpec::FisherOt {
                theta,
                theta_fisher,
                beta,
                coupling,
            } => Variant::FisherOt {
                theta: *theta,
                theta_fisher: *theta_fisher,
                beta: *beta,
                coupling: *coupling,
            },
            VariantSpec::SbpEntropic { reference } => Variant::SbpEntropic {
                m: reference.build(g)?.rates,
            },
            VariantSpec::SbpPsi { reference, dual } => Variant::SbpPsi {
                m: reference.build(g)?.rates,
                dual: match dual {
                    DualSpec::Entropy => ConvexDual::Entropy,
                    DualSpec::Quadratic => ConvexDual::Quadratic,
                },
            },
            VariantSpec::SchrodingerFg { reference } => Variant::SchrodingerFg {
                m: reference.build(g)?.rates,
            },
        };
        let mut spec = HamiltonianSpec::new(g.clone(), variant)?;
        let n = g.node_count();
        for p in &self.potential {
            let v = match p {
                PotentialSpec::Linear { v } => NodePotential::Linear(v.clone()),
                PotentialSpec::Quadratic { w } => {
                    if w.len() != n || w.iter().any(|r| r.len() != n) {
                        return Err(Error::DimensionMismatch {
                            expected: n,
                            got: w.len(),
                        });
                    }
                    NodePotential::Quadratic(DMatrix::from_fn(n, n, |i, j| w[i][j]))
                }
            };
            spec = spec.with_potential(v)?;
        }
        Ok(spec)
    }

    /// The reference of a bridge variant, if any.
    pub fn reference(&self) -> Option<&ReferenceSpec> {
        match &self.variant {
            VariantSpec::SbpEntropic { reference }
            | VariantSpec::SbpPsi { reference, .. }
            | VariantSpec::SchrodingerFg { reference } => Some(reference),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub chart: Chart,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl InitialState {
    pub fn point(&self) -> PhasePoint {
        PhasePoint {
            chart: self.chart,
            q: self.q.clone(),
            p: self.p.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Marginals {
    pub rho0: Vec<f64>,
    pub rho1: Vec<f64>,
    /// Initial law of the reference process; `rho0` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_initial: Option<Vec<f64>>,
}

fn default_horizon() -> [f64; 2] {
    [0.0, 1.0]
}

fn default_dt() -> f64 {
    1e-3
}

fn default_particles() -> usize {
    10_000
}

fn default_checkpoints() -> usize {
    10
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSettings {
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    /// Explicit uniformization rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_bound: Option<f64>,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            particles: default_particles(),
            seed: 0,
            checkpoints: default_checkpoints(),
            rate_bound: None,
        }
    }
}

/// A complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub graph: GraphSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hamiltonian: Option<HamiltonianConfig>,
    /// Reference generator for bridges, simulation and analysis when no
    /// bridge Hamiltonian provides one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginals: Option<Marginals>,
    /// Initial law for simulating a reference chain; defaults to the periodic
    /// density at the start time, or uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_density: Option<Vec<f64>>,
    #[serde(default = "default_horizon")]
    pub horizon: [f64; 2],
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Generator read off a geodesic; chosen from the Hamiltonian when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<RateKind>,
    #[serde(default)]
    pub sampler: SamplerSettings,
}

impl Scenario {
    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    fn base(name: &str, graph: &Graph) -> Self {
        Scenario {
            name: Some(name.to_string()),
            graph: graph.to_spec(),
            hamiltonian: None,
            reference: None,
            initial: None,
            marginals: None,
            initial_density: None,
            horizon: default_horizon(),
            dt: default_dt(),
            method: Method::Rk4,
            stride: 1,
            rates: None,
            sampler: SamplerSettings::default(),
        }
    }

    /// The reference generator: the scenario's own, else the Hamiltonian's.
    pub fn reference_spec(&self) -> Option<&ReferenceSpec> {
        self.reference
            .as_ref()
            .or_else(|| self.hamiltonian.as_ref().and_then(|h| h.reference()))
    }
}

pub const BUILTIN_SCENARIOS: [&str; 6] = [
    "two-node-periodic",
    "three-node-circle",
    "two-node-bridge",
    "stationary-bridge",
    "upwind-geodesic",
    "average-counterexample",
];

/// Constant reference on `K_3` used by the stationary bridge scenario.
pub fn stationary_bridge_rates() -> Vec<Vec<f64>> {
    vec![vec![0.0, 1.0, 0.5], vec![0.25, 0.0, 1.5], vec![2.0, 0.75, 0.0]]
}

pub fn builtin(name: &str) -> Option<Scenario> {
    let s = match name {
        "two-node-periodic" => {
            let g = Graph::path(2).ok()?;
            let mut s = Scenario::base(name, &g);
            s.reference = Some(ReferenceSpec::Periodic {
                density: NamedDensity::TwoNodeCos,
                cycle: None,
                k: None,
            });
            s.horizon = [0.0, 2.0 * PI];
            s
        }
        "three-node-circle" => {
            let g = Graph::complete(3).ok()?;
            let mut s = Scenario::base(name, &g);
            s.reference = Some(ReferenceSpec::Periodic {
                density: NamedDensity::ThreeNodeCircle,
                cycle: None,
                k: None,
            });
            s.horizon = [0.0, 2.0 * PI];
            s
        }
        "two-node-bridge" => {
            let g = Graph::path(2).ok()?;
            let mut s = Scenario::base(name, &g);
            s.reference = Some(ReferenceSpec::GraphWeights);
            s.marginals = Some(Marginals {
                rho0: vec![0.8, 0.2],
                rho1: vec![0.3, 0.7],
                reference_initial: Some(vec![0.5, 0.5]),
            });
            s
        }
        "stationary-bridge" => {
            let g = Graph::complete(3).ok()?;
            let mut s = Scenario::base(name, &g);
            let matrix = stationary_bridge_rates();
            let built = ReferenceSpec::Constant { matrix: matrix.clone() }.build(&g).ok()?;
            let pi = stationary_distribution(&built.rates.at(0.0)).ok()?;
            s.reference = Some(ReferenceSpec::Constant { matrix });
            s.marginals = Some(Marginals {
                rho0: pi.clone(),
                rho1: pi,
                reference_initial: None,
            });
            s
        }
        "upwind-geodesic" => {
            let g = Graph::path(2).ok()?;
            let mut s = Scenario::base(name, &g);
            s.hamiltonian = Some(HamiltonianConfig {
                variant: VariantSpec::OtKinetic {
                    theta: ThetaKind::Upwind,
                },
                potential: Vec::new(),
            });
            s.initial = Some(InitialState {
                chart: Chart::RhoS,
                q: vec![0.4, 0.6],
                p: vec![0.25, -0.25],
            });
            s.rates = Some(RateKind::UpwindOt);
            s
        }
        "average-counterexample" => {
            // With equal densities the averaged weight splits the flux evenly,
            // so the edge carries a negative rate against the flow.
            let g = Graph::path(2).ok()?;
            let mut s = Scenario::base(name, &g);
            s.hamiltonian = Some(HamiltonianConfig {
                variant: VariantSpec::OtKinetic {
                    theta: ThetaKind::Average,
                },
                potential: Vec::new(),
            });
            s.initial = Some(InitialState {
                chart: Chart::RhoS,
                q: vec![0.5, 0.5],
                p: vec![0.5, -0.5],
            });
            s.rates = Some(RateKind::ThetaGeneral(ThetaKind::Average));
            s
        }
        _ => return None,
    };
    Some(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densities_are_normalized_and_interior() {
        for d in [NamedDensity::TwoNodeCos.density(), NamedDensity::ThreeNodeCircle.density()] {
            for k in 0..100 {
                let t = k as f64 * 0.07;
                let r = d.rho(t);
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
                assert!(r.iter().all(|&x| x > 0.05));
                let dr = d.drho(t).unwrap();
                let h = 1e-6;
                let (a, b) = (d.rho(t + h), d.rho(t - h));
                for i in 0..r.len() {
                    assert!(((a[i] - b[i]) / (2.0 * h) - dr[i]).abs() < 1e-8);
                }
            }
        }
        assert!((A - 1.0 / (2.0 * 6f64.sqrt())).abs() < 1e-16);
        assert!((B - 1.0 / (6.0 * 2f64.sqrt())).abs() < 1e-16);
    }

    #[test]
    fn builtins_round_trip() {
        for name in BUILTIN_SCENARIOS {
            let s = builtin(name).unwrap();
            let text = serde_json::to_string(&s).unwrap();
            assert_eq!(Scenario::from_json(&text).unwrap(), s, "{name}");
        }
        assert!(builtin("nope").is_none());
    }

    #[test]
    fn stationary_scenario_marginal_is_stationary() {
        let s = builtin("stationary-bridge").unwrap();
        let g = s.graph.build().unwrap();
        let m = s.reference.unwrap().build(&g).unwrap().rates.at(0.0);
        let pi = s.marginals.unwrap().rho0;
        let r = m.tr_mul(&nalgebra::DVector::from_column_slice(&pi));
        assert!(r.amax() < 1e-15);
    }

    #[test]
    fn config_parse_names_unknown_key() {
        let text = r#"{"graph": {"nodes": 2, "edges": [[0, 1, 1.0]]}, "horizn": [0, 1]}"#;
        let e = Scenario::from_json(text).unwrap_err().to_string();
        assert!(e.contains("horizn"), "{e}");
        let text = r#"{"graph": {"nodes": 2, "edges": [[0, 1, 1.0]]},
            "hamiltonian": {"variant": "ot_kinetic", "theta": "logmean"}}"#;
        let s = Scenario::from_json(text).unwrap();
        let spec = s.hamiltonian.unwrap().build(&s.graph.build().unwrap()).unwrap();
        assert_eq!(spec.variant.name(), "ot_kinetic");
    }
}
