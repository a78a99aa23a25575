//! Weighted graphs, densities on their nodes, and discrete calculus.
//!
//! Nodes are 0-based. Every edge is stored once with `i < j`; a [`SkewField`]
//! holds the value on that orientation and `v_ji = -v_ij` is implied.
//! Gradients use `(grad S)_ij = S_i - S_j`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::theta::{theta_at, ThetaKind};

/// Tolerance on `sum(rho) = 1`.
pub const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub w: f64,
    /// Weight used by the Fisher information term. Equals `w` unless given.
    pub w_fisher: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<Edge>,
    // For every node: (neighbour, edge index).
    adj: Vec<Vec<(usize, usize)>>,
}

/// One raw edge as read from input: endpoints, weight, optional Fisher weight.
pub type RawEdge = (usize, usize, f64, Option<f64>);

/// Builds a [`Graph`], rejecting self loops, bad weights and disconnected input.
///
/// An unordered pair may appear twice only if both listings carry the same
/// weights, in which case it is reported as a duplicate; differing weights are
/// reported as asymmetric.
pub fn validate_graph(n: usize, raw: &[RawEdge]) -> Result<Graph> {
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let mut seen: HashMap<(usize, usize), (f64, f64)> = HashMap::new();
    let mut edges = Vec::with_capacity(raw.len());
    for &(a, b, w, wf) in raw {
        if a >= n || b >= n {
            return Err(Error::NodeOutOfRange(a, b, n));
        }
        if a == b {
            return Err(Error::SelfLoop(a));
        }
        let wf = wf.unwrap_or(w);
        for x in [w, wf] {
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::NonpositiveWeight(a, b, x));
            }
        }
        let key = (a.min(b), a.max(b));
        if let Some(&(w0, wf0)) = seen.get(&key) {
            if w0 != w {
                return Err(Error::AsymmetricWeight(key.0, key.1, w0, w));
            }
            if wf0 != wf {
                return Err(Error::AsymmetricWeight(key.0, key.1, wf0, wf));
            }
            return Err(Error::DuplicateEdge(key.0, key.1));
        }
        seen.insert(key, (w, wf));
        edges.push(Edge {
            i: key.0,
            j: key.1,
            w,
            w_fisher: wf,
        });
    }
    edges.sort_by_key(|e| (e.i, e.j));
    let mut adj = vec![Vec::new(); n];
    for (k, e) in edges.iter().enumerate() {
        adj[e.i].push((e.j, k));
        adj[e.j].push((e.i, k));
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    let g = Graph { n, edges, adj };
    let comps = g.component_count();
    if comps > 1 {
        return Err(Error::DisconnectedGraph(comps));
    }
    Ok(g)
}

impl Graph {
    /// Convenience constructor with Fisher weights equal to the edge weights.
    pub fn new(n: usize, edges: &[(usize, usize, f64)]) -> Result<Graph> {
        let raw: Vec<RawEdge> = edges.iter().map(|&(i, j, w)| (i, j, w, None)).collect();
        validate_graph(n, &raw)
    }

    /// Complete graph on `n` nodes with unit weights.
    pub fn complete(n: usize) -> Result<Graph> {
        let mut e = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                e.push((i, j, 1.0));
            }
        }
        Graph::new(n, &e)
    }

    /// Path `0 - 1 - ... - (n-1)` with unit weights.
    pub fn path(n: usize) -> Result<Graph> {
        let e: Vec<_> = (1..n).map(|i| (i - 1, i, 1.0)).collect();
        Graph::new(n, &e)
    }

    /// Cycle on `n >= 3` nodes with unit weights.
    pub fn cycle(n: usize) -> Result<Graph> {
        let mut e: Vec<_> = (1..n).map(|i| (i - 1, i, 1.0)).collect();
        e.push((0, n - 1, 1.0));
        Graph::new(n, &e)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Neighbours of `i` as `(neighbour, edge index)`, sorted by neighbour.
    pub fn neighbors(&self, i: usize) -> &[(usize, usize)] {
        &self.adj[i]
    }

    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        self.adj
            .get(i)?
            .binary_search_by_key(&j, |&(nb, _)| nb)
            .ok()
            .map(|p| self.adj[i][p].1)
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.edge_index(i, j).map(|k| self.edges[k].w)
    }

    pub fn fisher_weight(&self, i: usize, j: usize) -> Option<f64> {
        self.edge_index(i, j).map(|k| self.edges[k].w_fisher)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edge_index(i, j).is_some()
    }

    fn component_count(&self) -> usize {
        let mut comp = vec![usize::MAX; self.n];
        let mut count = 0;
        for s in 0..self.n {
            if comp[s] != usize::MAX {
                continue;
            }
            let mut stack = vec![s];
            comp[s] = count;
            while let Some(u) = stack.pop() {
                for &(v, _) in &self.adj[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = count;
                        stack.push(v);
                    }
                }
            }
            count += 1;
        }
        count
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: len,
            });
        }
        Ok(())
    }

    pub fn to_spec(&self) -> GraphSpec {
        GraphSpec {
            nodes: self.n,
            edges: self
                .edges
                .iter()
                .map(|e| {
                    if e.w_fisher == e.w {
                        vec![e.i as f64, e.j as f64, e.w]
                    } else {
                        vec![e.i as f64, e.j as f64, e.w, e.w_fisher]
                    }
                })
                .collect(),
        }
    }
}

/// JSON form of a graph: `{"nodes": N, "edges": [[i, j, w, optional w_fisher], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub nodes: usize,
    pub edges: Vec<Vec<f64>>,
}

impl GraphSpec {
    pub fn build(&self) -> Result<Graph> {
        let mut raw = Vec::with_capacity(self.edges.len());
        for e in &self.edges {
            if !(e.len() == 3 || e.len() == 4) {
                return Err(Error::InvalidParameter(format!(
                    "edge entries must be [i, j, w] or [i, j, w, w_fisher], got {e:?}"
                )));
            }
            let idx = |x: f64| -> Result<usize> {
                if x >= 0.0 && x.fract() == 0.0 && x < usize::MAX as f64 {
                    Ok(x as usize)
                } else {
                    Err(Error::InvalidParameter(format!("bad node index {x}")))
                }
            };
            raw.push((idx(e[0])?, idx(e[1])?, e[2], e.get(3).copied()));
        }
        validate_graph(self.nodes, &raw)
    }

    pub fn from_json(s: &str) -> Result<Graph> {
        let spec: GraphSpec = serde_json::from_str(s)?;
        spec.build()
    }
}

/// Checks that `rho` is a probability vector of the right length.
pub fn check_density(g: &Graph, rho: &[f64]) -> Result<()> {
    g.check_len(rho.len())?;
    if let Some((i, &v)) = rho.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("density entry {i} is {v}")));
    }
    let s: f64 = rho.iter().sum();
    if (s - 1.0).abs() > MASS_TOL {
        return Err(Error::InvalidParameter(format!("density sums to {s}, not 1")));
    }
    Ok(())
}

pub fn is_interior(rho: &[f64]) -> bool {
    rho.iter().all(|&r| r > 0.0)
}

/// Shifts `s` so that its entries sum to zero and returns the shift subtracted.
pub fn gauge_normalize(s: &mut [f64]) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    for x in s.iter_mut() {
        *x -= mean;
    }
    mean
}

/// Antisymmetric edge field, one value per edge in the `i < j` orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewField {
    pub values: Vec<f64>,
}

impl SkewField {
    pub fn zeros(g: &Graph) -> Self {
        SkewField {
            values: vec![0.0; g.edges.len()],
        }
    }

    /// Value on the oriented edge `(i, j)`; `None` if the edge is absent.
    pub fn get(&self, g: &Graph, i: usize, j: usize) -> Option<f64> {
        let k = g.edge_index(i, j)?;
        Some(if i < j { self.values[k] } else { -self.values[k] })
    }

    /// Sets `v_ij` (and hence `v_ji = -v_ij`).
    pub fn set(&mut self, g: &Graph, i: usize, j: usize, v: f64) -> Result<()> {
        let k = g
            .edge_index(i, j)
            .ok_or_else(|| Error::InvalidParameter(format!("no edge ({i}, {j})")))?;
        self.values[k] = if i < j { v } else { -v };
        Ok(())
    }

    pub fn axpy(&self, alpha: f64, other: &SkewField) -> SkewField {
        SkewField {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        }
    }

    fn check(&self, g: &Graph) -> Result<()> {
        if self.values.len() != g.edges.len() {
            return Err(Error::DimensionMismatch {
                expected: g.edges.len(),
                got: self.values.len(),
            });
        }
        Ok(())
    }
}

pub fn graph_gradient(g: &Graph, s: &[f64]) -> Result<SkewField> {
    g.check_len(s.len())?;
    Ok(SkewField {
        values: g.edges.iter().map(|e| s[e.i] - s[e.j]).collect(),
    })
}

// theta on every edge for the stored orientation, with v_ij as upwind direction.
fn edge_thetas(g: &Graph, rho: &[f64], v: &SkewField, kind: ThetaKind) -> Result<Vec<f64>> {
    g.edges
        .iter()
        .zip(&v.values)
        .map(|(e, &vij)| theta_at(kind, rho[e.i], rho[e.j], vij, (e.i, e.j)))
        .collect()
}

/// `d_j = -sum_l w_jl v_jl theta_jl`, with the upwind side taken from `v`.
pub fn divergence(g: &Graph, rho: &[f64], v: &SkewField, kind: ThetaKind) -> Result<Vec<f64>> {
    g.check_len(rho.len())?;
    v.check(g)?;
    let th = edge_thetas(g, rho, v, kind)?;
    let mut d = vec![0.0; g.n];
    for (k, e) in g.edges.iter().enumerate() {
        let flux = e.w * v.values[k] * th[k];
        d[e.i] -= flux;
        d[e.j] += flux;
    }
    Ok(d)
}

/// `<u, v> = 1/2 sum over ordered neighbour pairs of u v theta w`.
///
/// For the upwind kind the direction is read from `v`.
pub fn inner_product(g: &Graph, u: &SkewField, v: &SkewField, rho: &[f64], kind: ThetaKind) -> Result<f64> {
    g.check_len(rho.len())?;
    u.check(g)?;
    v.check(g)?;
    let th = edge_thetas(g, rho, v, kind)?;
    // Both orientations contribute the same product, cancelling the 1/2.
    Ok(g.edges
        .iter()
        .enumerate()
        .map(|(k, e)| u.values[k] * v.values[k] * th[k] * e.w)
        .sum())
}

/// Splits `v` into `grad S + u` with `u` divergence free.
///
/// The weighted Laplacian must be positive on the complement of constants, so
/// the split uses a symmetric weight; an upwind `kind` is replaced by the
/// average.
pub fn hodge_decompose(g: &Graph, rho: &[f64], v: &SkewField, kind: ThetaKind) -> Result<(Vec<f64>, SkewField)> {
    g.check_len(rho.len())?;
    v.check(g)?;
    if let Some(i) = rho.iter().position(|&r| !(r > 0.0)) {
        return Err(Error::BoundaryDensity(i));
    }
    let kind = if kind == ThetaKind::Upwind { ThetaKind::Average } else { kind };
    let th = edge_thetas(g, rho, v, kind)?;
    let n = g.n;
    // (L + 11^T / n) S = -div v, where L is the Laplacian weighted by w theta.
    let mut a = DMatrix::from_element(n, n, 1.0 / n as f64);
    for (k, e) in g.edges.iter().enumerate() {
        let c = e.w * th[k];
        a[(e.i, e.i)] += c;
        a[(e.j, e.j)] += c;
        a[(e.i, e.j)] -= c;
        a[(e.j, e.i)] -= c;
    }
    let div = divergence(g, rho, v, kind)?;
    let mut rhs = DVector::from_iterator(n, div.iter().map(|d| -d));
    let mean = rhs.mean();
    rhs.add_scalar_mut(-mean);
    let chol = a.cholesky().ok_or(Error::SingularLaplacian)?;
    let sol = chol.solve(&rhs);
    let mut s: Vec<f64> = sol.iter().copied().collect();
    gauge_normalize(&mut s);
    let grad = graph_gradient(g, &s)?;
    let u = v.axpy(-1.0, &grad);
    Ok((s, u))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_errors() {
        assert!(Graph::path(3).is_ok());
        assert!(matches!(
            Graph::new(4, &[(0, 1, 1.0), (2, 3, 1.0)]),
            Err(Error::DisconnectedGraph(2))
        ));
        assert!(matches!(Graph::new(2, &[(0, 0, 1.0)]), Err(Error::SelfLoop(0))));
        assert!(matches!(
            Graph::new(2, &[(0, 1, -1.0)]),
            Err(Error::NonpositiveWeight(..))
        ));
        assert!(matches!(
            Graph::new(2, &[(0, 1, 1.0), (1, 0, 2.0)]),
            Err(Error::AsymmetricWeight(..))
        ));
        assert!(matches!(
            Graph::new(2, &[(0, 1, 1.0), (1, 0, 1.0)]),
            Err(Error::DuplicateEdge(0, 1))
        ));
        assert!(matches!(Graph::new(2, &[(0, 2, 1.0)]), Err(Error::NodeOutOfRange(..))));
    }

    #[test]
    fn json_round_trip() {
        let g = GraphSpec::from_json(r#"{"nodes": 3, "edges": [[0, 1, 1.0], [1, 2, 2.0, 0.5]]}"#).unwrap();
        assert_eq!(g.weight(2, 1), Some(2.0));
        assert_eq!(g.fisher_weight(1, 2), Some(0.5));
        assert_eq!(g.fisher_weight(0, 1), Some(1.0));
        let back = g.to_spec().build().unwrap();
        assert_eq!(back, g);
        assert!(GraphSpec::from_json(r#"{"nodes": 2, "edges": [[0, 1.5, 1.0]]}"#).is_err());
    }

    #[test]
    fn gradient_examples() {
        let g = Graph::path(2).unwrap();
        let v = graph_gradient(&g, &[1.0, 0.0]).unwrap();
        assert_eq!(v.get(&g, 0, 1), Some(1.0));
        assert_eq!(v.get(&g, 1, 0), Some(-1.0));
        let c = graph_gradient(&Graph::complete(4).unwrap(), &[0.3; 4]).unwrap();
        assert!(c.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn divergence_two_node() {
        let g = Graph::path(2).unwrap();
        let v = SkewField { values: vec![1.0] };
        let d = divergence(&g, &[0.5, 0.5], &v, ThetaKind::Average).unwrap();
        assert_eq!(d, vec![-0.5, 0.5]);
    }

    #[test]
    fn inner_product_two_node() {
        let g = Graph::path(2).unwrap();
        let v = SkewField { values: vec![2.0] };
        let ip = inner_product(&g, &v, &v, &[0.5, 0.5], ThetaKind::Average).unwrap();
        // Direct loop over ordered pairs.
        let mut direct = 0.0;
        for (i, j) in [(0, 1), (1, 0)] {
            let vij = v.get(&g, i, j).unwrap();
            direct += 0.5 * vij * vij * 0.5 * 1.0;
        }
        assert!((ip - 2.0).abs() < 1e-15);
        assert!((ip - direct).abs() < 1e-15);
    }

    #[test]
    fn circulation_is_divergence_free() {
        let g = Graph::cycle(3).unwrap();
        let mut v = SkewField::zeros(&g);
        v.set(&g, 0, 1, 1.0).unwrap();
        v.set(&g, 1, 2, 1.0).unwrap();
        v.set(&g, 2, 0, 1.0).unwrap();
        let rho = [1.0 / 3.0; 3];
        let (s, u) = hodge_decompose(&g, &rho, &v, ThetaKind::Average).unwrap();
        assert!(s.iter().all(|x| x.abs() < 1e-12));
        for k in 0..3 {
            assert!((u.values[k] - v.values[k]).abs() < 1e-12);
        }
        let d = divergence(&g, &rho, &u, ThetaKind::Average).unwrap();
        assert!(d.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn gradient_decomposes_to_itself() {
        let g = Graph::complete(4).unwrap();
        let rho = [0.1, 0.2, 0.3, 0.4];
        let mut s = vec![0.5, -1.0, 2.0, 0.25];
        gauge_normalize(&mut s);
        let v = graph_gradient(&g, &s).unwrap();
        for kind in [ThetaKind::Average, ThetaKind::Logarithmic, ThetaKind::Upwind] {
            let (s2, u) = hodge_decompose(&g, &rho, &v, kind).unwrap();
            for i in 0..4 {
                assert!((s[i] - s2[i]).abs() < 1e-10);
            }
            assert!(u.values.iter().all(|x| x.abs() < 1e-10));
        }
    }

    #[test]
    fn decomposition_rejects_boundary_density() {
        let g = Graph::path(2).unwrap();
        let v = SkewField { values: vec![1.0] };
        assert!(matches!(
            hodge_decompose(&g, &[1.0, 0.0], &v, ThetaKind::Average),
            Err(Error::BoundaryDensity(1))
        ));
    }
}
