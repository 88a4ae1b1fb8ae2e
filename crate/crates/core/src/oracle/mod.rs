//! Exact tabular solution of the single-queue relaxed scheduling problem.
//!
//! The state is the queue length `s ∈ [0, max_queue]`. Each step the arm is
//! either left on the low action (`a = 0`, serves up to `r0` units) or given
//! the high action (`a = 1`, serves up to `r1` units). After service one unit
//! arrives with probability `beta`:
//!
//! ```text
//! s' = min(s - served(s, a) + 1, max_queue)   w.p. beta
//! s' = s - served(s, a)                       w.p. 1 - beta
//! served(s, a) = min(s, r_a)
//! ```
//!
//! The per-step reward of the λ-relaxed problem is
//!
//! ```text
//! (1 + mu_r) * served(s, a) + mu_l * [s > 0 and a = 0] - lambda * a
//! ```
//!
//! so an empty queue earns nothing apart from the activation cost. The `mu_l`
//! term is the service-regularity multiplier entering as a constant shift on
//! the passive branch of a non-empty queue.
//!
//! [`value_iterate`] solves the discounted Bellman equation; [`lemmas`] checks
//! the structural properties (concave value, threshold policy, nested inactive
//! sets); [`index`] computes reference Whittle indices by bisection on λ.

pub mod index;
pub mod lemmas;
pub mod sweep;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use index::{index_table, whittle_index, IndexTable};
pub use lemmas::{
    check_concavity, check_indexability, check_threshold, ConcavityReport, IndexabilityReport,
    IndexabilityViolation, ThresholdReport,
};

/// Sup-norm stopping tolerance for value iteration.
pub const DEFAULT_TOLERANCE: f64 = 1e-9;
/// Width of the λ bracket returned by [`whittle_index`].
pub const DEFAULT_BISECTION_TOLERANCE: f64 = 1e-6;
/// Numeric slack used by the structural checks.
pub const STRUCTURE_SLACK: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 200_000;

/// Relative width below which `Q_high` and `Q_low` are treated as tied.
/// Ties go to the low action.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("value iteration did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("state {state} outside 0..={max_queue}")]
    StateOutOfRange { state: usize, max_queue: usize },

    #[error("state {state} always inactive on bracket [{lo}, {hi}]")]
    AlwaysInactive { state: usize, lo: f64, hi: f64 },

    #[error("state {state} always active on bracket [{lo}, {hi}]")]
    AlwaysActive { state: usize, lo: f64, hi: f64 },

    #[error("lambda grid must be non-negative and strictly increasing (bad entry at {position})")]
    InvalidGrid { position: usize },
}

/// Discretized single-UE constrained MDP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularMdp {
    pub max_queue: usize,
    /// Units served by the low action.
    #[serde(default)]
    pub r0: usize,
    /// Units served by the high action.
    #[serde(default = "default_r1")]
    pub r1: usize,
    /// Per-step arrival probability of one unit.
    pub beta: f64,
    pub gamma: f64,
    /// Throughput multiplier.
    #[serde(default)]
    pub mu_r: f64,
    /// Service-regularity multiplier.
    #[serde(default)]
    pub mu_l: f64,
}

fn default_r1() -> usize {
    1
}

impl TabularMdp {
    /// Unit-service instance (`r0 = 0`, `r1 = 1`) without multipliers.
    pub fn unit(max_queue: usize, beta: f64, gamma: f64) -> Self {
        Self {
            max_queue,
            r0: 0,
            r1: 1,
            beta,
            gamma,
            mu_r: 0.0,
            mu_l: 0.0,
        }
    }

    pub fn with_multipliers(mut self, mu_r: f64, mu_l: f64) -> Self {
        self.mu_r = mu_r;
        self.mu_l = mu_l;
        self
    }

    pub fn validate(&self) -> Result<(), MdpError> {
        let bad = |field, reason: &str| {
            Err(MdpError::InvalidParameter {
                field,
                reason: reason.to_string(),
            })
        };
        if self.max_queue == 0 {
            return bad("max_queue", "must be at least 1");
        }
        if self.r0 >= self.r1 {
            return bad("r1", "must exceed r0");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta", "must lie in [0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in (0, 1)");
        }
        if !(self.mu_r >= 0.0 && self.mu_r.is_finite()) {
            return bad("mu_r", "must be finite and non-negative");
        }
        if !(self.mu_l >= 0.0 && self.mu_l.is_finite()) {
            return bad("mu_l", "must be finite and non-negative");
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.max_queue + 1
    }

    fn service(&self, action: usize) -> usize {
        if action == 0 {
            self.r0
        } else {
            self.r1
        }
    }

    /// Units actually removed from the queue.
    pub fn served(&self, state: usize, action: usize) -> usize {
        state.min(self.service(action))
    }

    pub fn reward(&self, state: usize, action: usize, lambda: f64) -> f64 {
        let mut r = (1.0 + self.mu_r) * self.served(state, action) as f64;
        if state > 0 && action == 0 {
            r += self.mu_l;
        }
        r - lambda * action as f64
    }

    /// Successor states as `[(no_arrival, 1 - beta), (arrival, beta)]`.
    pub fn transitions(&self, state: usize, action: usize) -> [(usize, f64); 2] {
        let base = state - self.served(state, action);
        let up = (base + 1).min(self.max_queue);
        [(base, 1.0 - self.beta), (up, self.beta)]
    }

    /// `[Q_low, Q_high]` at `state` under `values`.
    pub fn q_values(&self, values: &[f64], state: usize, lambda: f64) -> [f64; 2] {
        let mut q = [0.0; 2];
        for (action, slot) in q.iter_mut().enumerate() {
            let future: f64 = self
                .transitions(state, action)
                .iter()
                .map(|&(next, p)| p * values[next])
                .sum();
            *slot = self.reward(state, action, lambda) + self.gamma * future;
        }
        q
    }
}

/// Greedy choice with ties resolved towards the low action.
pub(crate) fn greedy_action(q: [f64; 2]) -> u8 {
    let scale = 1.0 + q[0].abs().max(q[1].abs());
    u8::from(q[1] - q[0] > TIE_EPS * scale)
}

/// Converged solution of the λ-relaxed problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub lambda: f64,
    pub values: Vec<f64>,
    /// Optimal action per state, 0 = low, 1 = high.
    pub policy: Vec<u8>,
    /// `Q_high - Q_low` per state.
    pub advantage: Vec<f64>,
    /// Sup-norm Bellman residual of `values`.
    pub residual: f64,
    pub iterations: usize,
}

impl ValueTable {
    /// Build a table directly, e.g. for checking hand-made fixtures.
    pub fn from_parts(lambda: f64, values: Vec<f64>, policy: Vec<u8>) -> Self {
        let advantage = vec![0.0; values.len()];
        Self {
            lambda,
            values,
            policy,
            advantage,
            residual: 0.0,
            iterations: 0,
        }
    }

    pub fn max_queue(&self) -> usize {
        self.values.len().saturating_sub(1)
    }

    pub fn inactive_set(&self) -> Vec<usize> {
        self.policy
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == 0)
            .map(|(s, _)| s)
            .collect()
    }
}

/// Discounted value iteration from `V = 0`.
///
/// Stops once successive iterates differ by at most `tol` in sup norm; the
/// returned residual is the Bellman residual of the final iterate, which is at
/// most `gamma * tol`.
pub fn value_iterate(
    mdp: &TabularMdp,
    lambda: f64,
    tol: f64,
    max_iters: usize,
) -> Result<ValueTable, MdpError> {
    mdp.validate()?;
    if !(tol > 0.0) {
        return Err(MdpError::InvalidParameter {
            field: "tol",
            reason: "must be positive".into(),
        });
    }
    if max_iters == 0 {
        return Err(MdpError::InvalidParameter {
            field: "max_iters",
            reason: "must be at least 1".into(),
        });
    }
    if !lambda.is_finite() {
        return Err(MdpError::InvalidParameter {
            field: "lambda",
            reason: "must be finite".into(),
        });
    }

    let n = mdp.num_states();
    let mut values = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut delta = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        delta = 0.0;
        for s in 0..n {
            let q = mdp.q_values(&values, s, lambda);
            next[s] = q[0].max(q[1]);
            delta = delta.max((next[s] - values[s]).abs());
        }
        std::mem::swap(&mut values, &mut next);
        if delta <= tol {
            break;
        }
    }
    if delta > tol {
        return Err(MdpError::NotConverged {
            iterations,
            residual: delta,
        });
    }

    let mut policy = Vec::with_capacity(n);
    let mut advantage = Vec::with_capacity(n);
    let mut residual: f64 = 0.0;
    for s in 0..n {
        let q = mdp.q_values(&values, s, lambda);
        residual = residual.max((q[0].max(q[1]) - values[s]).abs());
        policy.push(greedy_action(q));
        advantage.push(q[1] - q[0]);
    }
    Ok(ValueTable {
        lambda,
        values,
        policy,
        advantage,
        residual,
        iterations,
    })
}

/// [`value_iterate`] with the default tolerance and iteration cap.
pub fn solve(mdp: &TabularMdp, lambda: f64) -> Result<ValueTable, MdpError> {
    value_iterate(mdp, lambda, DEFAULT_TOLERANCE, DEFAULT_MAX_ITERS)
}
