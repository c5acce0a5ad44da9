//! Discrete n-th order average consensus (NODAC).
//!
//! Stage 1 diffuses and absorbs the n-th backward difference of the local
//! input; every further stage diffuses and accumulates the stage below it.
//! The top stage tracks the average of polynomial inputs of degree n−1 with
//! zero steady error.

use std::collections::VecDeque;

use thiserror::Error;

use crate::graph::Network;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodacError {
    #[error("order must be at least 1")]
    ZeroOrder,

    #[error("difference of order {order} needs {needed} samples, got {got}")]
    InsufficientHistory {
        order: usize,
        needed: usize,
        got: usize,
    },

    #[error("row {row} of the weight matrix sums to {sum}, must stay below 1 for a stable update")]
    UnstableWeights { row: usize, sum: f64 },

    #[error("input has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Backward difference `Σ_{m=0..n} (−1)^m C(n,m) u(k−m)` over the last `n+1`
/// entries of `history` (oldest first).
pub fn nth_difference(history: &[f64], order: usize) -> Result<f64, NodacError> {
    let needed = order + 1;
    if history.len() < needed {
        return Err(NodacError::InsufficientHistory {
            order,
            needed,
            got: history.len(),
        });
    }
    Ok(backward_difference(history.iter().rev().copied(), order))
}

/// `newest_first` yields `u(k), u(k−1), …`.
fn backward_difference(newest_first: impl Iterator<Item = f64>, order: usize) -> f64 {
    let mut coeff = 1.0;
    let mut acc = 0.0;
    for (m, u) in newest_first.take(order + 1).enumerate() {
        acc += coeff * u;
        // C(n, m+1) = C(n, m)·(n−m)/(m+1), alternating sign
        coeff *= -((order - m) as f64) / (m + 1) as f64;
    }
    acc
}

/// Uniform weights `ε = 1/(max_in_degree + 1)` on the topology of `net`.
pub fn discrete_weights(net: &Network) -> Network {
    let eps = 1.0 / (net.max_in_degree() as f64 + 1.0);
    net.unit_weights()
        .scaled(eps)
        .expect("positive scale of a valid network")
}

/// Stage values `x_i^[l](k)` and the input samples the next difference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct NodacState {
    /// `stages[l][i]` is stage `l+1` of agent `i`.
    pub stages: Vec<Vec<f64>>,
    /// Last `n+1` input vectors, oldest first.
    pub input_history: VecDeque<Vec<f64>>,
    pub step: usize,
}

impl NodacState {
    /// All stages zero and the input history padded with `u = 0`, so the
    /// first differences see a zero past rather than a missing one.
    pub fn new(order: usize, n_agents: usize) -> Result<Self, NodacError> {
        if order == 0 {
            return Err(NodacError::ZeroOrder);
        }
        Ok(Self {
            stages: vec![vec![0.0; n_agents]; order],
            input_history: (0..order).map(|_| vec![0.0; n_agents]).collect(),
            step: 0,
        })
    }

    pub fn order(&self) -> usize {
        self.stages.len()
    }

    pub fn n_agents(&self) -> usize {
        self.stages[0].len()
    }

    /// `x^[n](k)`, the tracking output.
    pub fn top_stage(&self) -> &[f64] {
        self.stages.last().expect("order >= 1")
    }
}

/// NODAC protocol of fixed order on a fixed network.
#[derive(Debug, Clone)]
pub struct Nodac {
    net: Network,
    order: usize,
}

impl Nodac {
    pub fn new(net: Network, order: usize) -> Result<Self, NodacError> {
        if order == 0 {
            return Err(NodacError::ZeroOrder);
        }
        for row in 0..net.n_agents() {
            let sum: f64 = net.in_neighbors(row).iter().map(|&(_, a)| a).sum();
            if sum >= 1.0 {
                return Err(NodacError::UnstableWeights { row, sum });
            }
        }
        Ok(Self { net, order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn initial_state(&self) -> NodacState {
        NodacState::new(self.order, self.net.n_agents()).expect("order validated")
    }

    /// Consumes `u(k)` and returns the state at `k+1`.
    pub fn step(&self, state: &NodacState, input: &[f64]) -> Result<NodacState, NodacError> {
        let n = self.net.n_agents();
        if input.len() != n {
            return Err(NodacError::DimensionMismatch {
                expected: n,
                got: input.len(),
            });
        }
        if state.order() != self.order || state.n_agents() != n {
            return Err(NodacError::DimensionMismatch {
                expected: self.order * n,
                got: state.order() * state.n_agents(),
            });
        }

        let mut history = state.input_history.clone();
        history.push_back(input.to_vec());
        while history.len() > self.order + 1 {
            history.pop_front();
        }

        let mut stages: Vec<Vec<f64>> = Vec::with_capacity(self.order);
        for (l, x) in state.stages.iter().enumerate() {
            let next: Vec<f64> = (0..n)
                .map(|i| {
                    let diffusion: f64 = self
                        .net
                        .in_neighbors(i)
                        .iter()
                        .map(|&(j, a)| a * (x[j] - x[i]))
                        .sum();
                    let feed = if l == 0 {
                        backward_difference(history.iter().rev().map(|u| u[i]), self.order)
                    } else {
                        stages[l - 1][i]
                    };
                    x[i] + diffusion + feed
                })
                .collect();
            stages.push(next);
        }

        Ok(NodacState {
            stages,
            input_history: history,
            step: state.step + 1,
        })
    }
}
