//! Time-dependent rate matrices.
//!
//! Matrices follow the row convention: `q[(i, j)]` is the jump rate from `i`
//! to `j`, rows sum to zero, and densities evolve as `d rho / dt = rho Q`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::Graph;

/// A generator `t -> Q(t)`.
///
/// Implementations must be pure: the same `t` always yields the same matrix.
pub trait Generator: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// Writes `Q(t)` into `out`, which has shape `dim x dim`.
    fn fill(&self, t: f64, out: &mut DMatrix<f64>);

    fn at(&self, t: f64) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        self.fill(t, &mut m);
        m
    }

    fn period(&self) -> Option<f64> {
        None
    }

    /// Whether `Q(t)` is continuous in `t`. Uniformization bounds sampled on a
    /// grid are only trusted for continuous generators.
    fn continuous(&self) -> bool {
        true
    }
}

/// Shared handle to reference rates `m(t)`.
pub type ReferenceRates = Arc<dyn Generator>;

#[derive(Debug, Clone)]
pub struct ConstantRates {
    pub q: DMatrix<f64>,
}

impl ConstantRates {
    pub fn new(q: DMatrix<f64>) -> Self {
        ConstantRates { q }
    }

    /// Rates `m_ij = w_ij` on every edge of `g`.
    pub fn from_graph(g: &Graph) -> Self {
        ConstantRates {
            q: matrix_from_edges(g, |i, j| g.weight(i, j).unwrap_or(0.0)),
        }
    }

    pub fn shared(self) -> ReferenceRates {
        Arc::new(self)
    }
}

impl Generator for ConstantRates {
    fn dim(&self) -> usize {
        self.q.nrows()
    }

    fn fill(&self, _t: f64, out: &mut DMatrix<f64>) {
        out.copy_from(&self.q);
    }
}

type FillFn = dyn Fn(f64, &mut DMatrix<f64>) + Send + Sync;

/// Generator given by a closure.
#[derive(Clone)]
pub struct FnRates {
    n: usize,
    period: Option<f64>,
    f: Arc<FillFn>,
}

impl FnRates {
    pub fn new(n: usize, period: Option<f64>, f: impl Fn(f64, &mut DMatrix<f64>) + Send + Sync + 'static) -> Self {
        FnRates {
            n,
            period,
            f: Arc::new(f),
        }
    }

    pub fn shared(self) -> ReferenceRates {
        Arc::new(self)
    }
}

impl fmt::Debug for FnRates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnRates")
            .field("n", &self.n)
            .field("period", &self.period)
            .finish_non_exhaustive()
    }
}

impl Generator for FnRates {
    fn dim(&self) -> usize {
        self.n
    }

    fn fill(&self, t: f64, out: &mut DMatrix<f64>) {
        (self.f)(t, out)
    }

    fn period(&self) -> Option<f64> {
        self.period
    }
}

/// Rate matrix with `q_ij = rate(i, j)` on edges and diagonal `-sum_j q_ij`.
pub fn matrix_from_edges(g: &Graph, mut rate: impl FnMut(usize, usize) -> f64) -> DMatrix<f64> {
    let n = g.node_count();
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut s = 0.0;
        for &(j, _) in g.neighbors(i) {
            let r = rate(i, j);
            q[(i, j)] = r;
            s += r;
        }
        q[(i, i)] = -s;
    }
    q
}

/// Checks that `m(t)` is a valid reference generator on `g` at the given times:
/// non-negative off-diagonal entries supported on edges, zero row sums, and
/// periodicity when a period is declared.
pub fn check_reference(g: &Graph, m: &dyn Generator, times: &[f64]) -> Result<()> {
    let n = g.node_count();
    if m.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: m.dim(),
        });
    }
    let mut q = DMatrix::zeros(n, n);
    let mut qp = DMatrix::zeros(n, n);
    for &t in times {
        m.fill(t, &mut q);
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                let v = q[(i, j)];
                if !v.is_finite() {
                    return Err(Error::NonfiniteValue(format!("m[{i}][{j}] at t = {t}")));
                }
                row += v;
                if i != j {
                    if v < 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "reference rate m[{i}][{j}] = {v} < 0 at t = {t}"
                        )));
                    }
                    if v != 0.0 && !g.has_edge(i, j) {
                        return Err(Error::InvalidParameter(format!(
                            "reference rate m[{i}][{j}] is off the graph at t = {t}"
                        )));
                    }
                }
            }
            if row.abs() > 1e-12 * (1.0 + q[(i, i)].abs()) {
                return Err(Error::InvalidParameter(format!(
                    "reference row {i} sums to {row} at t = {t}"
                )));
            }
        }
        if let Some(p) = m.period() {
            m.fill(t + p, &mut qp);
            let d = (&q - &qp).amax();
            if d > 1e-10 {
                return Err(Error::InvalidParameter(format!(
                    "reference rates differ by {d} across one period at t = {t}"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_matrix_rows_sum_to_zero() {
        let g = Graph::complete(4).unwrap();
        let q = matrix_from_edges(&g, |i, j| (i + 2 * j) as f64);
        for i in 0..4 {
            assert_eq!(q.row(i).sum(), 0.0);
        }
        check_reference(&g, &ConstantRates::new(q), &[0.0]).unwrap();
    }

    #[test]
    fn off_graph_rates_rejected() {
        let g = Graph::path(3).unwrap();
        let mut q = DMatrix::zeros(3, 3);
        q[(0, 2)] = 1.0;
        q[(0, 0)] = -1.0;
        assert!(check_reference(&g, &ConstantRates::new(q), &[0.0]).is_err());
    }

    #[test]
    fn period_mismatch_rejected() {
        let g = Graph::path(2).unwrap();
        let m = FnRates::new(2, Some(1.0), |t, q| {
            q[(0, 1)] = 1.0 + t;
            q[(0, 0)] = -1.0 - t;
            q[(1, 0)] = 1.0;
            q[(1, 1)] = -1.0;
        });
        assert!(check_reference(&g, &m, &[0.0]).is_err());
    }
}
