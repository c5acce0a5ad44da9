//! Weighted directed communication networks and their spectral data.
//!
//! Conventions used throughout the crate:
//!
//! - `a_ij > 0` means agent `i` receives the state of agent `j` (information
//!   flows from `j` to `i`).
//! - The Laplacian is `L = Δ − A` with `Δ_ii = Σ_j a_ij`, so `L·1 = 0`.
//! - `γ_L` is the unit left null vector of `L` (`γ_Lᵀ L = 0`); it is the
//!   consensus direction and weights every consensus value.

use std::collections::VecDeque;

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

/// Relative tolerance used to decide that an eigenvalue is zero.
const ZERO_EIGENVALUE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("a network needs at least two agents, got {0}")]
    TooFewAgents(usize),

    #[error("weight matrix is not square: {rows} x {cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("agent {agent} lists neighbor {neighbor}, but only {n_agents} agents exist")]
    NeighborOutOfRange {
        agent: usize,
        neighbor: usize,
        n_agents: usize,
    },

    #[error("agent {0} lists itself as a neighbor (self-loops are not allowed)")]
    SelfLoop(usize),

    #[error("weight a[{i}][{j}] = {value} is negative or not finite")]
    InvalidWeight { i: usize, j: usize, value: f64 },

    #[error("edge weight must be positive and finite, got {0}")]
    InvalidEdgeWeight(f64),

    #[error("network is not connected: no agent reaches every other agent")]
    Disconnected,

    #[error("zero eigenvalue of the Laplacian has multiplicity {0}, expected 1")]
    DegenerateNullSpace(usize),

    #[error("weights are not symmetric at ({i}, {j})")]
    NotSymmetric { i: usize, j: usize },
}

/// A weighted directed graph over `N ≥ 2` agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    weights: DMatrix<f64>,
    /// `in_neighbors[i]` lists `(j, a_ij)` for every `a_ij > 0`, ascending in `j`.
    in_neighbors: Vec<Vec<(usize, f64)>>,
}

impl Network {
    /// Builds a network from a full weight matrix.
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self, GraphError> {
        let (rows, cols) = weights.shape();
        if rows != cols {
            return Err(GraphError::NotSquare { rows, cols });
        }
        if rows < 2 {
            return Err(GraphError::TooFewAgents(rows));
        }
        for i in 0..rows {
            for j in 0..cols {
                let value = weights[(i, j)];
                if !value.is_finite() || value < 0.0 {
                    return Err(GraphError::InvalidWeight { i, j, value });
                }
            }
            if weights[(i, i)] != 0.0 {
                return Err(GraphError::SelfLoop(i));
            }
        }
        let in_neighbors = (0..rows)
            .map(|i| {
                (0..cols)
                    .filter(|&j| weights[(i, j)] > 0.0)
                    .map(|j| (j, weights[(i, j)]))
                    .collect()
            })
            .collect();
        Ok(Self {
            weights,
            in_neighbors,
        })
    }

    /// Builds a network from per-agent in-neighbor lists (zero-based indices)
    /// with one common edge weight.
    ///
    /// Duplicate entries in a list are merged.
    pub fn from_neighbor_lists(lists: &[Vec<usize>], weight: f64) -> Result<Self, GraphError> {
        let n = lists.len();
        if n < 2 {
            return Err(GraphError::TooFewAgents(n));
        }
        if !(weight.is_finite() && weight > 0.0) {
            return Err(GraphError::InvalidEdgeWeight(weight));
        }
        let mut weights = DMatrix::zeros(n, n);
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                if j >= n {
                    return Err(GraphError::NeighborOutOfRange {
                        agent: i,
                        neighbor: j,
                        n_agents: n,
                    });
                }
                if j == i {
                    return Err(GraphError::SelfLoop(i));
                }
                weights[(i, j)] = weight;
            }
        }
        Self::from_weights(weights)
    }

    /// Complete graph with every off-diagonal weight equal to `weight`.
    pub fn all_to_all(n: usize, weight: f64) -> Result<Self, GraphError> {
        let lists: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| j != i).collect())
            .collect();
        Self::from_neighbor_lists(&lists, weight)
    }

    pub fn n_agents(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    /// `(j, a_ij)` pairs for the agents `i` listens to.
    pub fn in_neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.in_neighbors[i]
    }

    /// Number of directed edges (`a_ij > 0`).
    pub fn edge_count(&self) -> usize {
        self.in_neighbors.iter().map(Vec::len).sum()
    }

    /// Largest number of in-neighbors of any agent.
    pub fn max_in_degree(&self) -> usize {
        self.in_neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Same topology with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, GraphError> {
        Self::from_weights(&self.weights * factor)
    }

    /// Same topology with every present edge set to weight 1.
    pub fn unit_weights(&self) -> Self {
        let weights = self.weights.map(|w| if w > 0.0 { 1.0 } else { 0.0 });
        Self::from_weights(weights).expect("topology of a valid network is valid")
    }

    /// Diagonal matrix of weighted degrees `Δ_ii = Σ_j a_ij`.
    pub fn out_degree(&self) -> DMatrix<f64> {
        let n = self.n_agents();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                self.in_neighbors[i].iter().map(|&(_, w)| w).sum()
            } else {
                0.0
            }
        })
    }

    /// `L = Δ − A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        self.out_degree() - &self.weights
    }

    /// True if some root agent reaches every other agent along the direction
    /// of information flow.
    pub fn is_connected(&self) -> bool {
        let n = self.n_agents();
        // followers[j] = agents that receive from j
        let mut followers = vec![Vec::new(); n];
        for (i, list) in self.in_neighbors.iter().enumerate() {
            for &(j, _) in list {
                followers[j].push(i);
            }
        }
        (0..n).any(|root| {
            let mut seen = vec![false; n];
            seen[root] = true;
            let mut queue = VecDeque::from([root]);
            let mut reached = 1;
            while let Some(j) = queue.pop_front() {
                for &i in &followers[j] {
                    if !seen[i] {
                        seen[i] = true;
                        reached += 1;
                        queue.push_back(i);
                    }
                }
            }
            reached == n
        })
    }

    /// True if every agent's weighted in-degree equals its weighted out-degree.
    pub fn is_balanced(&self) -> bool {
        let n = self.n_agents();
        let scale = self.weights.amax().max(1.0);
        (0..n).all(|i| {
            let row: f64 = self.weights.row(i).sum();
            let col: f64 = self.weights.column(i).sum();
            (row - col).abs() <= 1e-12 * scale * n as f64
        })
    }

    /// True if `a_ij == a_ji` for all pairs.
    pub fn is_symmetric(&self) -> bool {
        self.asymmetric_pair().is_none()
    }

    fn asymmetric_pair(&self) -> Option<(usize, usize)> {
        let n = self.n_agents();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .find(|&(i, j)| self.weights[(i, j)] != self.weights[(j, i)])
    }

    /// Spectral quantities used by the error bounds and consensus formulas.
    pub fn spectral(&self) -> Result<SpectralData, GraphError> {
        if !self.is_connected() {
            return Err(GraphError::Disconnected);
        }
        let n = self.n_agents();
        let laplacian = self.laplacian();
        let out_degree = self.out_degree();
        let scale = laplacian.amax().max(1.0);

        let mut eigenvalues: Vec<Complex<f64>> = laplacian
            .clone()
            .complex_eigenvalues()
            .iter()
            .copied()
            .collect();
        eigenvalues.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        let zeros = eigenvalues
            .iter()
            .filter(|z| z.norm() <= ZERO_EIGENVALUE_TOL * scale)
            .count();
        if zeros != 1 {
            return Err(GraphError::DegenerateNullSpace(zeros));
        }
        let lambda2 = eigenvalues[1].re;
        let lambda2_modulus = eigenvalues[1].norm();

        let gamma_l = left_null_vector(&laplacian);

        let symmetric_part = (&laplacian + laplacian.transpose()) * 0.5;
        let mut sym_eigs: Vec<f64> = symmetric_part
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .collect();
        sym_eigs.sort_by(f64::total_cmp);
        let lambda2_hat = sym_eigs[1];

        let projection = DMatrix::identity(n, n) - &gamma_l * gamma_l.transpose();

        Ok(SpectralData {
            laplacian,
            out_degree,
            gamma_l,
            lambda2,
            lambda2_modulus,
            lambda2_hat,
            eigenvalues,
            projection,
            balanced: self.is_balanced(),
        })
    }

    /// Directed incidence data, one column per edge `a_ij > 0`, ordered by
    /// `(receiver i, sender j)`. Column entries: `+1` at the receiver, `−1` at
    /// the sender. `W = coupling · diag(a_ij)`, so `B̃ W Bᵀ = coupling · L`.
    pub fn incidence(&self, coupling: f64) -> IncidenceData {
        let edges: Vec<Edge> = self
            .in_neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, list)| {
                list.iter().map(move |&(j, w)| Edge {
                    receiver: i,
                    sender: j,
                    weight: w,
                })
            })
            .collect();
        IncidenceData::from_edges(self.n_agents(), edges, coupling)
    }

    /// Undirected incidence data for a symmetric network: one column per
    /// unordered pair `{i, j}`, `i < j`, with `+1` at `i` and `−1` at `j`.
    /// Here `B W Bᵀ = coupling · L`.
    pub fn undirected_incidence(&self, coupling: f64) -> Result<IncidenceData, GraphError> {
        if let Some((i, j)) = self.asymmetric_pair() {
            return Err(GraphError::NotSymmetric { i, j });
        }
        let n = self.n_agents();
        let edges = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.weights[(i, j)] > 0.0)
            .map(|(i, j)| Edge {
                receiver: i,
                sender: j,
                weight: self.weights[(i, j)],
            })
            .collect();
        Ok(IncidenceData::from_edges(n, edges, coupling))
    }
}

/// Unit left null vector of `laplacian`, sign fixed so that its
/// largest-magnitude entry is positive.
fn left_null_vector(laplacian: &DMatrix<f64>) -> DVector<f64> {
    let svd = laplacian.transpose().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty spectrum");
    let mut gamma: DVector<f64> = v_t.row(k).transpose();
    gamma /= gamma.norm();
    let pivot = gamma.iamax();
    if gamma[pivot] < 0.0 {
        gamma.neg_mut();
    }
    gamma
}

/// Laplacian spectrum, consensus direction and projection of a connected network.
#[derive(Debug, Clone)]
pub struct SpectralData {
    pub laplacian: DMatrix<f64>,
    pub out_degree: DMatrix<f64>,
    /// Unit left null vector of `L`, entries nonnegative.
    pub gamma_l: DVector<f64>,
    /// Real part of the second eigenvalue when sorted by real part.
    pub lambda2: f64,
    /// Modulus of that same eigenvalue; equals `lambda2` for real spectra.
    pub lambda2_modulus: f64,
    /// Second-smallest eigenvalue of `(L + Lᵀ)/2`.
    pub lambda2_hat: f64,
    /// Eigenvalues of `L`, ascending by real part.
    pub eigenvalues: Vec<Complex<f64>>,
    /// `Π = I − γ_L γ_Lᵀ`.
    pub projection: DMatrix<f64>,
    pub balanced: bool,
}

impl SpectralData {
    pub fn n_agents(&self) -> usize {
        self.gamma_l.len()
    }

    /// `Σ_i (γ_L)_i`.
    pub fn gamma_sum(&self) -> f64 {
        self.gamma_l.sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub receiver: usize,
    pub sender: usize,
    pub weight: f64,
}

/// Incidence matrix `B`, its positive part `B̃` and the edge weight matrix `W`.
#[derive(Debug, Clone)]
pub struct IncidenceData {
    pub edges: Vec<Edge>,
    pub incidence: DMatrix<f64>,
    pub incoming: DMatrix<f64>,
    pub edge_weights: DMatrix<f64>,
}

impl IncidenceData {
    fn from_edges(n: usize, edges: Vec<Edge>, coupling: f64) -> Self {
        let m = edges.len();
        let mut incidence = DMatrix::zeros(n, m);
        let mut edge_weights = DMatrix::zeros(m, m);
        for (e, edge) in edges.iter().enumerate() {
            incidence[(edge.receiver, e)] = 1.0;
            incidence[(edge.sender, e)] = -1.0;
            edge_weights[(e, e)] = coupling * edge.weight;
        }
        let incoming = incidence.map(|b: f64| b.max(0.0));
        Self {
            edges,
            incidence,
            incoming,
            edge_weights,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// `B̃ W Bᵀ`.
    pub fn directed_laplacian(&self) -> DMatrix<f64> {
        &self.incoming * &self.edge_weights * self.incidence.transpose()
    }

    /// `B W Bᵀ`.
    pub fn symmetric_laplacian(&self) -> DMatrix<f64> {
        &self.incidence * &self.edge_weights * self.incidence.transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn five_agent_lists() -> Vec<Vec<usize>> {
        vec![
            vec![1, 4],
            vec![0, 2, 3, 4],
            vec![0, 1, 3],
            vec![0, 1, 4],
            vec![0, 3],
        ]
    }

    #[test]
    fn builds_table_network() {
        let net = Network::from_neighbor_lists(&five_agent_lists(), 1.0).unwrap();
        assert_eq!(net.n_agents(), 5);
        assert_eq!(
            net.edge_count(),
            five_agent_lists().iter().map(Vec::len).sum::<usize>()
        );
        assert_eq!(net.edge_count(), 14);
        assert_eq!(net.weight(0, 1), 1.0);
        assert_eq!(net.weight(0, 2), 0.0);
        assert_eq!(net.weight(1, 4), 1.0);
    }

    #[test]
    fn two_agent_graph() {
        let net = Network::from_neighbor_lists(&[vec![1], vec![0]], 1.0).unwrap();
        assert_eq!(
            net.weights(),
            &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
        );
        assert_eq!(
            net.laplacian(),
            DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])
        );
    }

    #[test]
    fn rejects_bad_neighbor_lists() {
        assert_eq!(
            Network::from_neighbor_lists(&[vec![1], vec![2]], 1.0),
            Err(GraphError::NeighborOutOfRange {
                agent: 1,
                neighbor: 2,
                n_agents: 2
            })
        );
        assert_eq!(
            Network::from_neighbor_lists(&[vec![0], vec![0]], 1.0),
            Err(GraphError::SelfLoop(0))
        );
        assert_eq!(
            Network::from_neighbor_lists(&[vec![]], 1.0),
            Err(GraphError::TooFewAgents(1))
        );
        assert!(Network::from_neighbor_lists(&[vec![1], vec![0]], 0.0).is_err());
        let mut w = DMatrix::zeros(2, 2);
        w[(0, 1)] = -1.0;
        assert!(matches!(
            Network::from_weights(w),
            Err(GraphError::InvalidWeight { .. })
        ));
    }

    #[test]
    fn one_way_pair_is_rooted() {
        // agent 1 listens to agent 2, agent 2 listens to nobody: agent 2 is a root
        let net = Network::from_neighbor_lists(&[vec![1], vec![]], 1.0).unwrap();
        assert!(net.is_connected());
        assert!(!net.is_balanced());
    }

    #[test]
    fn two_isolated_pairs_are_disconnected() {
        let net = Network::from_neighbor_lists(&[vec![1], vec![0], vec![3], vec![2]], 1.0).unwrap();
        assert!(!net.is_connected());
        assert_eq!(net.spectral().unwrap_err(), GraphError::Disconnected);
    }

    #[test]
    fn two_sinks_are_disconnected() {
        // agents 1 and 2 both listen only to agent 3 -> agent 3 is the root
        let rooted = Network::from_neighbor_lists(&[vec![2], vec![2], vec![]], 1.0).unwrap();
        assert!(rooted.is_connected());
        // agent 3 listens to both, nobody listens to anyone else -> two roots
        let split = Network::from_neighbor_lists(&[vec![], vec![], vec![0, 1]], 1.0).unwrap();
        assert!(!split.is_connected());
    }

    #[test]
    fn table_network_laplacian_row() {
        let net = Network::from_neighbor_lists(&five_agent_lists(), 1.0).unwrap();
        let l = net.laplacian();
        let row: Vec<f64> = l.row(0).iter().copied().collect();
        assert_eq!(row, vec![2.0, -1.0, 0.0, 0.0, -1.0]);
        for i in 0..5 {
            assert!(l.row(i).sum().abs() <= 1e-12);
        }
        assert!(net.is_connected());
        assert!(!net.is_balanced());
    }

    #[test]
    fn all_to_all_laplacian() {
        let net = Network::all_to_all(3, 1.0).unwrap();
        let l = net.laplacian();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(l[(i, j)], if i == j { 2.0 } else { -1.0 });
            }
        }
        assert!(net.is_connected());
        assert!(net.is_balanced());
    }

    #[test]
    fn two_agent_spectrum() {
        let net = Network::from_neighbor_lists(&[vec![1], vec![0]], 1.0).unwrap();
        let s = net.spectral().unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(s.gamma_l[0], h, epsilon = 1e-12);
        assert_abs_diff_eq!(s.gamma_l[1], h, epsilon = 1e-12);
        assert_abs_diff_eq!(s.lambda2, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.lambda2_hat, 2.0, epsilon = 1e-12);
        assert!(s.balanced);
    }

    #[test]
    fn complete_graph_lambda2_equals_coupling() {
        // weight K/N on the complete graph has eigenvalues {0, K, ..., K}
        for n in 2..=7 {
            let k = 1.7;
            let net = Network::all_to_all(n, k / n as f64).unwrap();
            let s = net.spectral().unwrap();
            // independent check: dense symmetric eigensolve
            let mut direct: Vec<f64> = net
                .laplacian()
                .symmetric_eigenvalues()
                .iter()
                .copied()
                .collect();
            direct.sort_by(f64::total_cmp);
            assert_abs_diff_eq!(direct[1], k, epsilon = 1e-10);
            assert_abs_diff_eq!(s.lambda2, k, epsilon = 1e-10);
            assert_abs_diff_eq!(s.lambda2_hat, k, epsilon = 1e-10);
        }
    }

    #[test]
    fn table_network_spectrum() {
        let net = Network::from_neighbor_lists(&five_agent_lists(), 1.0).unwrap();
        let s = net.spectral().unwrap();
        let expected = [0.6527, 0.2670, 0.0890, 0.3264, 0.6231];
        for (g, e) in s.gamma_l.iter().zip(expected) {
            assert_abs_diff_eq!(*g, e, epsilon = 1e-4);
        }
        assert_abs_diff_eq!(s.lambda2, 2.382, epsilon = 1e-3);
        assert_abs_diff_eq!(s.lambda2_modulus, s.lambda2, epsilon = 1e-9);
        let residual = s.gamma_l.transpose() * &s.laplacian;
        assert!(residual.amax() <= 1e-10);
        assert_abs_diff_eq!(s.gamma_l.norm(), 1.0, epsilon = 1e-12);
        let p2 = &s.projection * &s.projection;
        assert!((p2 - &s.projection).amax() <= 1e-10);
        assert!((&s.projection * &s.gamma_l).amax() <= 1e-10);
    }

    #[test]
    fn directed_cycle_has_complex_spectrum() {
        let net = Network::from_neighbor_lists(&[vec![2], vec![0], vec![1]], 1.0).unwrap();
        let s = net.spectral().unwrap();
        // eigenvalues 0, 1.5 ± i·√3/2
        assert_abs_diff_eq!(s.lambda2, 1.5, epsilon = 1e-10);
        assert_abs_diff_eq!(s.lambda2_modulus, 3f64.sqrt(), epsilon = 1e-10);
        let third = 1.0 / 3f64.sqrt();
        for g in s.gamma_l.iter() {
            assert_abs_diff_eq!(*g, third, epsilon = 1e-10);
        }
    }

    #[test]
    fn incidence_two_agents() {
        let net = Network::from_neighbor_lists(&[vec![1], vec![0]], 1.0).unwrap();
        let inc = net.incidence(1.0);
        assert_eq!(inc.edge_count(), 2);
        assert_eq!(
            inc.directed_laplacian(),
            DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])
        );
    }

    #[test]
    fn incidence_table_network() {
        let net = Network::from_neighbor_lists(&five_agent_lists(), 1.0).unwrap();
        let inc = net.incidence(1.0);
        assert_eq!(inc.edge_count(), 14);
        assert_eq!(inc.edges[0].receiver, 0);
        assert_eq!(inc.edges[0].sender, 1);
        assert!((inc.directed_laplacian() - net.laplacian()).amax() <= 1e-10);
        for e in 0..inc.edge_count() {
            let col = inc.incidence.column(e);
            assert_eq!(col.iter().filter(|&&b| b == 1.0).count(), 1);
            assert_eq!(col.iter().filter(|&&b| b == -1.0).count(), 1);
        }
    }

    #[test]
    fn undirected_incidence_reproduces_laplacian() {
        let net = Network::all_to_all(3, 1.0).unwrap();
        let inc = net.undirected_incidence(1.0).unwrap();
        assert_eq!(inc.edge_count(), 3);
        assert!((inc.symmetric_laplacian() - net.laplacian()).amax() <= 1e-10);

        let directed = Network::from_neighbor_lists(&five_agent_lists(), 1.0).unwrap();
        assert!(matches!(
            directed.undirected_incidence(1.0),
            Err(GraphError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn incidence_coupling_scales_laplacian() {
        let net = Network::from_neighbor_lists(&five_agent_lists(), 1.0).unwrap();
        let inc = net.incidence(0.5);
        assert!((inc.directed_laplacian() - net.laplacian() * 0.5).amax() <= 1e-12);
    }
}
