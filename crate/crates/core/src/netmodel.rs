//! Network topology and combination matrices.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;

/// Undirected, connected graph. Every node is its own neighbor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    adjacency: Vec<bool>,
}

impl Topology {
    /// Builds a topology from a 0/1 adjacency matrix. The diagonal is forced
    /// to 1; the matrix must be square, symmetric and connected.
    pub fn from_adjacency<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Topology("adjacency matrix is empty".into()));
        }
        let mut adjacency = vec![false; n * n];
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != n {
                return Err(Error::Topology(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 => adjacency[i * n + j] = true,
                    other => {
                        return Err(Error::Topology(format!(
                            "entry ({i}, {j}) is {other}, expected 0 or 1"
                        )))
                    }
                }
            }
            adjacency[i * n + i] = true;
        }
        let topo = Self { n, adjacency };
        topo.validate()?;
        Ok(topo)
    }

    pub fn fully_connected(n: usize) -> Result<Self> {
        let rows = vec![vec![1u8; n]; n];
        Self::from_adjacency(&rows)
    }

    /// Star graph with node 0 as the hub.
    pub fn star(n: usize) -> Result<Self> {
        let rows: Vec<Vec<u8>> = (0..n)
            .map(|i| (0..n).map(|j| u8::from(i == 0 || j == 0 || i == j)).collect())
            .collect();
        Self::from_adjacency(&rows)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n;
        for i in 0..n {
            for j in (i + 1)..n {
                if self.adjacency[i * n + j] != self.adjacency[j * n + i] {
                    return Err(Error::Topology(format!(
                        "adjacency is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::Topology(format!(
                "graph is disconnected (node {k} unreachable from node 0)"
            )));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn is_linked(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j]
    }

    /// Neighborhood of `i`, including `i` itself.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.is_linked(i, j))
    }

    /// `|N_i|`, counting the node itself.
    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    /// Number of ordered pairs `(i, j)`, `i != j`, that share a link.
    pub fn directed_links(&self) -> usize {
        (0..self.n).map(|i| self.degree(i) - 1).sum()
    }

    pub fn adjacency_rows(&self) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| u8::from(self.is_linked(i, j))).collect())
            .collect()
    }
}

/// Row-stochastic weights `gamma_ij` supported on the neighborhoods.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinationMatrix {
    weights: DMatrix<f64>,
}

impl CombinationMatrix {
    /// Wraps raw weights without checking them; see [`validate_combination`].
    pub fn from_weights(weights: DMatrix<f64>) -> Self {
        Self { weights }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weights: DMatrix::identity(n, n),
        }
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    pub fn size(&self) -> usize {
        self.weights.nrows()
    }
}

/// Whether `n_i` in the Metropolis rule counts the node itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegreeConvention {
    #[default]
    Inclusive,
    Exclusive,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationRule {
    Uniform,
    #[default]
    Metropolis,
    RelativeDegree,
}

pub fn build_weights(
    topo: &Topology,
    rule: CombinationRule,
    degree: DegreeConvention,
) -> CombinationMatrix {
    match rule {
        CombinationRule::Uniform => build_uniform_weights(topo),
        CombinationRule::Metropolis => build_metropolis_weights(topo, degree),
        CombinationRule::RelativeDegree => build_relative_degree_weights(topo),
    }
}

/// `gamma_ij = 1 / |N_i|` on the neighborhood.
pub fn build_uniform_weights(topo: &Topology) -> CombinationMatrix {
    let n = topo.node_count();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let share = 1.0 / topo.degree(i) as f64;
        for j in topo.neighbors(i) {
            w[(i, j)] = share;
        }
    }
    CombinationMatrix { weights: w }
}

/// `gamma_ij = 1 / max(n_i, n_j)` off the diagonal, residual on the diagonal.
pub fn build_metropolis_weights(topo: &Topology, degree: DegreeConvention) -> CombinationMatrix {
    let n = topo.node_count();
    let count = |i: usize| match degree {
        DegreeConvention::Inclusive => topo.degree(i),
        DegreeConvention::Exclusive => topo.degree(i) - 1,
    };
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut off = 0.0;
        for j in topo.neighbors(i).filter(|&j| j != i) {
            let g = 1.0 / count(i).max(count(j)) as f64;
            w[(i, j)] = g;
            off += g;
        }
        w[(i, i)] = 1.0 - off;
    }
    CombinationMatrix { weights: w }
}

/// `gamma_ij = n_j / sum_{k in N_i} n_k` with inclusive degrees.
pub fn build_relative_degree_weights(topo: &Topology) -> CombinationMatrix {
    let n = topo.node_count();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let total: usize = topo.neighbors(i).map(|k| topo.degree(k)).sum();
        for j in topo.neighbors(i) {
            w[(i, j)] = topo.degree(j) as f64 / total as f64;
        }
    }
    CombinationMatrix { weights: w }
}

/// `Gamma' = delta I + (1 - delta) Gamma`.
pub fn apply_confidence(gamma: &CombinationMatrix, delta: f64) -> Result<CombinationMatrix> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Domain(format!(
            "confidence must lie in [0, 1], got {delta}"
        )));
    }
    let n = gamma.size();
    let weights = DMatrix::identity(n, n) * delta + &gamma.weights * (1.0 - delta);
    Ok(CombinationMatrix { weights })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    Shape,
    RowSum,
    Negative,
    Support,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::Shape => "shape",
            ViolationKind::RowSum => "row-sum",
            ViolationKind::Negative => "negative",
            ViolationKind::Support => "support",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Violation {
    pub row: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} violation in row {}", self.kind.as_str(), self.row)
    }
}

/// Checks shape, row sums, nonnegativity and neighborhood support; reports
/// the first violation found, scanning row by row.
pub fn validate_combination(
    gamma: &CombinationMatrix,
    topo: &Topology,
) -> std::result::Result<(), Violation> {
    let n = topo.node_count();
    if gamma.weights.shape() != (n, n) {
        return Err(Violation {
            row: 0,
            kind: ViolationKind::Shape,
        });
    }
    for i in 0..n {
        let row = gamma.weights.row(i);
        for j in 0..n {
            let g = row[j];
            if g < 0.0 {
                return Err(Violation {
                    row: i,
                    kind: ViolationKind::Negative,
                });
            }
            if g != 0.0 && !topo.is_linked(i, j) {
                return Err(Violation {
                    row: i,
                    kind: ViolationKind::Support,
                });
            }
        }
        if (row.sum() - 1.0).abs() > ROW_SUM_TOL {
            return Err(Violation {
                row: i,
                kind: ViolationKind::RowSum,
            });
        }
    }
    Ok(())
}
