//! Reference Whittle indices by bisection on the activation cost.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{greedy_action, value_iterate, MdpError, TabularMdp, DEFAULT_MAX_ITERS};

/// Value-iteration tolerance used inside the bisection. Tighter than the
/// default so the sign of `Q_high - Q_low` is reliable near the crossing.
const INNER_TOLERANCE: f64 = 1e-11;

fn is_active(mdp: &TabularMdp, state: usize, lambda: f64) -> Result<bool, MdpError> {
    let vt = value_iterate(mdp, lambda, INNER_TOLERANCE, DEFAULT_MAX_ITERS)?;
    let q = mdp.q_values(&vt.values, state, lambda);
    Ok(greedy_action(q) == 1)
}

/// λ at which both actions are optimal at `state`, to within `tol`.
///
/// The bracket must contain the crossing: `state` active at `bracket.0` and
/// passive at `bracket.1`.
pub fn whittle_index(
    mdp: &TabularMdp,
    state: usize,
    bracket: (f64, f64),
    tol: f64,
) -> Result<f64, MdpError> {
    mdp.validate()?;
    if state > mdp.max_queue {
        return Err(MdpError::StateOutOfRange {
            state,
            max_queue: mdp.max_queue,
        });
    }
    let (mut lo, mut hi) = bracket;
    if !(lo < hi) || !(tol > 0.0) {
        return Err(MdpError::InvalidParameter {
            field: "bracket",
            reason: format!("need lo < hi and tol > 0, got [{lo}, {hi}] tol {tol}"),
        });
    }
    if !is_active(mdp, state, lo)? {
        return Err(MdpError::AlwaysInactive { state, lo, hi });
    }
    if is_active(mdp, state, hi)? {
        return Err(MdpError::AlwaysActive { state, lo, hi });
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if is_active(mdp, state, mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Whittle index for every state of an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexTable {
    pub index: Vec<f64>,
    pub tolerance: f64,
}

impl IndexTable {
    /// Index at `state`, saturating at the last tabulated state.
    pub fn get(&self, state: usize) -> f64 {
        self.index[state.min(self.index.len() - 1)]
    }

    pub fn is_monotone(&self) -> bool {
        self.index
            .windows(2)
            .all(|w| w[1] >= w[0] - self.tolerance)
    }

    /// Writes `state,index` rows under a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "state,index")?;
        for (s, w) in self.index.iter().enumerate() {
            writeln!(out, "{s},{w}")?;
        }
        Ok(())
    }
}

/// Indices for all states. A state passive over the whole bracket is reported
/// at `bracket.0`, one active over the whole bracket at `bracket.1`.
pub fn index_table(mdp: &TabularMdp, bracket: (f64, f64), tol: f64) -> Result<IndexTable, MdpError> {
    let index = (0..mdp.num_states())
        .map(|s| match whittle_index(mdp, s, bracket, tol) {
            Ok(w) => Ok(w),
            Err(MdpError::AlwaysInactive { .. }) => Ok(bracket.0),
            Err(MdpError::AlwaysActive { .. }) => Ok(bracket.1),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(IndexTable {
        index,
        tolerance: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{solve, DEFAULT_BISECTION_TOLERANCE};

    const TOL: f64 = DEFAULT_BISECTION_TOLERANCE;

    #[test]
    fn empty_queue_is_never_worth_activating() {
        let mdp = TabularMdp::unit(20, 0.3, 0.9);
        assert!(matches!(
            whittle_index(&mdp, 0, (0.0, 3.0), TOL),
            Err(MdpError::AlwaysInactive { state: 0, .. })
        ));
        let w0 = whittle_index(&mdp, 0, (-1.0, 3.0), TOL).unwrap();
        assert!(w0.abs() <= TOL);
    }

    #[test]
    fn reference_instance_index_at_ten() {
        // Unit service without multipliers: serving now versus later breaks
        // even exactly when the activation cost equals the unit reward.
        // Cross-checked by a λ scan with step 5e-4, where state 10 first turns
        // passive at 1.0005.
        let mdp = TabularMdp::unit(20, 0.3, 0.9);
        let w = whittle_index(&mdp, 10, (0.0, 3.0), TOL).unwrap();
        assert!((w - 1.0).abs() <= TOL, "{w}");
    }

    #[test]
    fn bisection_agrees_with_policy_scan() {
        let mdp = TabularMdp {
            max_queue: 8,
            r0: 0,
            r1: 8,
            beta: 0.5,
            gamma: 0.9,
            mu_r: 0.0,
            mu_l: 0.0,
        };
        for s in [2usize, 5] {
            let w = whittle_index(&mdp, s, (0.0, 10.0), TOL).unwrap();
            let step = 1e-3;
            let flip = (0..10_000)
                .map(|k| k as f64 * step)
                .find(|&l| solve(&mdp, l).unwrap().policy[s] == 0)
                .unwrap();
            assert!((flip - w).abs() <= step + TOL, "state {s}: scan {flip} bisect {w}");
        }
    }

    #[test]
    fn indices_are_ordered_by_queue_length() {
        let mdp = TabularMdp {
            max_queue: 8,
            r0: 0,
            r1: 8,
            beta: 0.5,
            gamma: 0.9,
            mu_r: 0.0,
            mu_l: 0.0,
        };
        let table = index_table(&mdp, (-1.0, 20.0), TOL).unwrap();
        assert!(table.is_monotone());
        assert!(table.index[1] < table.index[4]);
        assert!(table.index[4] < table.index[8]);
    }

    #[test]
    fn bracket_errors() {
        let mdp = TabularMdp::unit(5, 0.3, 0.9);
        assert!(matches!(
            whittle_index(&mdp, 3, (-5.0, 0.5), TOL),
            Err(MdpError::AlwaysActive { .. })
        ));
        assert!(matches!(
            whittle_index(&mdp, 9, (0.0, 2.0), TOL),
            Err(MdpError::StateOutOfRange { .. })
        ));
        assert!(whittle_index(&mdp, 3, (2.0, 1.0), TOL).is_err());
    }

    #[test]
    fn csv_export() {
        let table = IndexTable {
            index: vec![0.0, 0.5, 1.25],
            tolerance: 1e-6,
        };
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "state,index\n0,0\n1,0.5\n2,1.25\n");
    }
}
