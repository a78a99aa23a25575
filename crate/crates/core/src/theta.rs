//! Density-dependent edge weights and their partial derivatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the mass on an edge is interpolated from the two endpoint densities.
///
/// `Upwind` picks the density on the side the flow leaves from; the direction
/// is passed separately to [`theta`] as `dir_ij`, usually `S_i - S_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ThetaKind {
    #[serde(rename = "upwind")]
    Upwind,
    #[serde(rename = "average")]
    Average,
    #[serde(rename = "logmean")]
    Logarithmic,
}

impl ThetaKind {
    pub fn is_symmetric(self) -> bool {
        !matches!(self, ThetaKind::Upwind)
    }

    pub fn name(self) -> &'static str {
        match self {
            ThetaKind::Upwind => "upwind",
            ThetaKind::Average => "average",
            ThetaKind::Logarithmic => "logmean",
        }
    }
}

/// Which argument a partial derivative is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    First,
    Second,
}

const SERIES_CUTOFF: f64 = 1e-6;

fn log_mean(a: f64, b: f64) -> f64 {
    let m = 0.5 * (a + b);
    let eta = (a - b) / (a + b);
    if eta.abs() < SERIES_CUTOFF {
        let e2 = eta * eta;
        m * (1.0 - e2 / 3.0 - 4.0 * e2 * e2 / 45.0)
    } else {
        (a - b) / (a.ln() - b.ln())
    }
}

// d/da of the logarithmic mean L(a, b).
fn log_mean_da(a: f64, b: f64) -> f64 {
    let eta = (a - b) / (a + b);
    if eta.abs() < SERIES_CUTOFF {
        // L = m g(eta) with m = (a+b)/2, dm/da = 1/2, deta/da = (1 - eta)/(a + b).
        let e2 = eta * eta;
        let g = 1.0 - e2 / 3.0 - 4.0 * e2 * e2 / 45.0;
        let dg = -2.0 * eta / 3.0 - 16.0 * eta * e2 / 45.0;
        0.5 * g + 0.5 * (1.0 - eta) * dg
    } else {
        let l = (a - b) / (a.ln() - b.ln());
        l / (a - b) * (1.0 - l / a)
    }
}

fn check_nonneg(a: f64, b: f64) -> Result<()> {
    if !(a >= 0.0 && b >= 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "theta needs finite non-negative densities, got ({a}, {b})"
        )));
    }
    Ok(())
}

/// Edge weight `theta_ij` for densities `rho_i`, `rho_j`.
pub fn theta(kind: ThetaKind, rho_i: f64, rho_j: f64, dir_ij: f64) -> Result<f64> {
    theta_at(kind, rho_i, rho_j, dir_ij, (0, 0))
}

pub(crate) fn theta_at(
    kind: ThetaKind,
    rho_i: f64,
    rho_j: f64,
    dir_ij: f64,
    nodes: (usize, usize),
) -> Result<f64> {
    check_nonneg(rho_i, rho_j)?;
    Ok(match kind {
        ThetaKind::Average => 0.5 * (rho_i + rho_j),
        ThetaKind::Logarithmic => {
            if rho_i <= 0.0 {
                return Err(Error::BoundaryDensity(nodes.0));
            }
            if rho_j <= 0.0 {
                return Err(Error::BoundaryDensity(nodes.1));
            }
            log_mean(rho_i, rho_j)
        }
        ThetaKind::Upwind => {
            if dir_ij > 0.0 {
                rho_j
            } else {
                rho_i
            }
        }
    })
}

/// Partial derivative of [`theta`] with respect to one of its density arguments.
///
/// The upwind weight is differentiated branchwise.
pub fn theta_partial(kind: ThetaKind, rho_i: f64, rho_j: f64, dir_ij: f64, which: Which) -> Result<f64> {
    theta_partial_at(kind, rho_i, rho_j, dir_ij, which, (0, 0))
}

pub(crate) fn theta_partial_at(
    kind: ThetaKind,
    rho_i: f64,
    rho_j: f64,
    dir_ij: f64,
    which: Which,
    nodes: (usize, usize),
) -> Result<f64> {
    check_nonneg(rho_i, rho_j)?;
    Ok(match kind {
        ThetaKind::Average => 0.5,
        ThetaKind::Logarithmic => {
            if rho_i <= 0.0 {
                return Err(Error::BoundaryDensity(nodes.0));
            }
            if rho_j <= 0.0 {
                return Err(Error::BoundaryDensity(nodes.1));
            }
            match which {
                Which::First => log_mean_da(rho_i, rho_j),
                Which::Second => log_mean_da(rho_j, rho_i),
            }
        }
        ThetaKind::Upwind => {
            let first = dir_ij <= 0.0;
            match which {
                Which::First if first => 1.0,
                Which::Second if !first => 1.0,
                _ => 0.0,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn average_value() {
        assert_relative_eq!(theta(ThetaKind::Average, 0.2, 0.4, 0.0).unwrap(), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn log_mean_diagonal() {
        let v = theta(ThetaKind::Logarithmic, 0.37, 0.37, 0.0).unwrap();
        assert_relative_eq!(v, 0.37, epsilon = 1e-15);
    }

    #[test]
    fn log_mean_value() {
        let v = theta(ThetaKind::Logarithmic, 0.2, 0.4, 0.0).unwrap();
        assert_relative_eq!(v, 0.2 / std::f64::consts::LN_2, epsilon = 1e-14);
        assert!((v - 0.288539).abs() < 1e-6);
    }

    #[test]
    fn log_mean_series_matches_closed_form_at_cutoff() {
        let a: f64 = 0.3;
        for eta in [2e-6f64, 5e-6, 1e-5] {
            let b = a * (1.0 - eta) / (1.0 + eta);
            let closed = (a - b) / (a.ln() - b.ln());
            let e2 = eta * eta;
            let series = 0.5 * (a + b) * (1.0 - e2 / 3.0 - 4.0 * e2 * e2 / 45.0);
            assert!((closed - series).abs() < 1e-10 * a);
        }
    }

    #[test]
    fn log_mean_rejects_zero_mass() {
        assert!(matches!(
            theta(ThetaKind::Logarithmic, 0.0, 0.4, 0.0),
            Err(Error::BoundaryDensity(_))
        ));
    }

    #[test]
    fn upwind_branches() {
        assert_eq!(theta(ThetaKind::Upwind, 0.2, 0.7, -1.0).unwrap(), 0.2);
        assert_eq!(theta(ThetaKind::Upwind, 0.2, 0.7, 1.0).unwrap(), 0.7);
        assert_eq!(theta(ThetaKind::Upwind, 0.2, 0.7, 0.0).unwrap(), 0.2);
        assert_eq!(theta_partial(ThetaKind::Upwind, 0.2, 0.7, -1.0, Which::First).unwrap(), 1.0);
        assert_eq!(theta_partial(ThetaKind::Upwind, 0.2, 0.7, -1.0, Which::Second).unwrap(), 0.0);
        assert_eq!(theta_partial(ThetaKind::Upwind, 0.2, 0.7, 1.0, Which::Second).unwrap(), 1.0);
    }

    #[test]
    fn partials_match_central_differences() {
        let h = 1e-6;
        for kind in [ThetaKind::Average, ThetaKind::Logarithmic] {
            for &(a, b) in &[(0.2, 0.4), (0.05, 0.9), (0.6, 0.1)] {
                let fd_a = (theta(kind, a + h, b, 0.0).unwrap() - theta(kind, a - h, b, 0.0).unwrap()) / (2.0 * h);
                let fd_b = (theta(kind, a, b + h, 0.0).unwrap() - theta(kind, a, b - h, 0.0).unwrap()) / (2.0 * h);
                let da = theta_partial(kind, a, b, 0.0, Which::First).unwrap();
                let db = theta_partial(kind, a, b, 0.0, Which::Second).unwrap();
                assert!((da - fd_a).abs() <= 1e-6 * da.abs().max(1e-12), "{kind:?} {a} {b}");
                assert!((db - fd_b).abs() <= 1e-6 * db.abs().max(1e-12), "{kind:?} {a} {b}");
            }
        }
    }

    #[test]
    fn log_mean_partial_near_diagonal_is_half() {
        let d = theta_partial(ThetaKind::Logarithmic, 0.3, 0.3 + 1e-9, 0.0, Which::First).unwrap();
        assert!((d - 0.5).abs() < 1e-8);
    }
}
