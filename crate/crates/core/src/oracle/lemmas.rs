//! Structural checks on converged value tables.

use serde::{Deserialize, Serialize};

use super::{solve, MdpError, TabularMdp, ValueTable, STRUCTURE_SLACK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcavityReport {
    pub holds: bool,
    /// `(s, excess)` where `V(s+1) - V(s)` exceeds `V(s) - V(s-1)` by `excess`.
    pub violations: Vec<(usize, f64)>,
}

/// True iff the forward differences of `V` are non-increasing up to
/// [`STRUCTURE_SLACK`].
pub fn check_concavity(vt: &ValueTable) -> ConcavityReport {
    let v = &vt.values;
    let violations: Vec<(usize, f64)> = (1..v.len().saturating_sub(1))
        .filter_map(|s| {
            let excess = (v[s + 1] - v[s]) - (v[s] - v[s - 1]);
            (excess > STRUCTURE_SLACK).then_some((s, excess))
        })
        .collect();
    ConcavityReport {
        holds: violations.is_empty(),
        violations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub holds: bool,
    /// First active state; `max_queue + 1` when the policy is all passive.
    pub threshold: Option<usize>,
    /// Passive states found at or above the first active state.
    pub violations: Vec<usize>,
}

pub fn check_threshold(vt: &ValueTable) -> ThresholdReport {
    let first_active = vt
        .policy
        .iter()
        .position(|&a| a == 1)
        .unwrap_or(vt.policy.len());
    let violations: Vec<usize> = (first_active..vt.policy.len())
        .filter(|&s| vt.policy[s] == 0)
        .collect();
    let holds = violations.is_empty();
    ThresholdReport {
        holds,
        threshold: holds.then_some(first_active),
        violations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IndexabilityViolation {
    /// `state` is passive at `lambda_lo` but active at the larger `lambda_hi`.
    NotNested {
        lambda_lo: f64,
        lambda_hi: f64,
        state: usize,
    },
    /// `DV` grew by more than `delta / gamma` between adjacent grid points.
    DvBound {
        lambda_lo: f64,
        lambda_hi: f64,
        state: usize,
        excess: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexabilityReport {
    pub holds: bool,
    pub nested: bool,
    pub dv_bound_holds: bool,
    /// Largest `DV_{λ+δ}(s) - DV_λ(s) - δ/γ` over all adjacent pairs and states;
    /// `-inf` for a single-point grid.
    pub max_dv_excess: f64,
    pub violations: Vec<IndexabilityViolation>,
}

/// Service difference `V(s - served(s, 1)) - V(s - served(s, 0))`.
pub fn service_difference(mdp: &TabularMdp, vt: &ValueTable, state: usize) -> f64 {
    let v = &vt.values;
    v[state - mdp.served(state, 1)] - v[state - mdp.served(state, 0)]
}

pub fn validate_grid(grid: &[f64]) -> Result<(), MdpError> {
    for (i, &l) in grid.iter().enumerate() {
        if !(l >= 0.0 && l.is_finite()) || (i > 0 && l <= grid[i - 1]) {
            return Err(MdpError::InvalidGrid { position: i });
        }
    }
    Ok(())
}

/// Solves the problem at every grid point and checks that inactive sets are
/// nested and that the service difference satisfies the `δ/γ` growth bound.
pub fn check_indexability(
    mdp: &TabularMdp,
    lambda_grid: &[f64],
) -> Result<IndexabilityReport, MdpError> {
    validate_grid(lambda_grid)?;
    let tables = lambda_grid
        .iter()
        .map(|&l| solve(mdp, l))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(indexability_from_tables(mdp, &tables))
}

/// Same as [`check_indexability`] on already solved tables, ordered by λ.
pub fn indexability_from_tables(mdp: &TabularMdp, tables: &[ValueTable]) -> IndexabilityReport {
    let mut violations = Vec::new();
    let mut max_dv_excess = f64::NEG_INFINITY;
    for pair in tables.windows(2) {
        let (lo, hi) = (&pair[0], &pair[1]);
        let delta = hi.lambda - lo.lambda;
        for s in 0..lo.policy.len() {
            if lo.policy[s] == 0 && hi.policy[s] == 1 {
                violations.push(IndexabilityViolation::NotNested {
                    lambda_lo: lo.lambda,
                    lambda_hi: hi.lambda,
                    state: s,
                });
            }
            let growth = service_difference(mdp, hi, s) - service_difference(mdp, lo, s);
            let excess = growth - delta / mdp.gamma;
            max_dv_excess = max_dv_excess.max(excess);
            if excess > STRUCTURE_SLACK {
                violations.push(IndexabilityViolation::DvBound {
                    lambda_lo: lo.lambda,
                    lambda_hi: hi.lambda,
                    state: s,
                    excess,
                });
            }
        }
    }
    let nested = !violations
        .iter()
        .any(|v| matches!(v, IndexabilityViolation::NotNested { .. }));
    let dv_bound_holds = !violations
        .iter()
        .any(|v| matches!(v, IndexabilityViolation::DvBound { .. }));
    IndexabilityReport {
        holds: nested && dv_bound_holds,
        nested,
        dv_bound_holds,
        max_dv_excess,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increasing_differences_are_flagged() {
        let vt = ValueTable::from_parts(0.0, vec![0.0, 1.0, 3.0], vec![0, 0, 0]);
        let report = check_concavity(&vt);
        assert!(!report.holds);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].0, 1);
    }

    #[test]
    fn linear_values_are_concave() {
        let vt = ValueTable::from_parts(0.0, vec![0.0, 1.0, 2.0, 3.0], vec![0; 4]);
        assert!(check_concavity(&vt).holds);
    }

    #[test]
    fn all_passive_policy_has_degenerate_threshold() {
        let vt = ValueTable::from_parts(0.0, vec![0.0; 6], vec![0; 6]);
        let report = check_threshold(&vt);
        assert!(report.holds);
        assert_eq!(report.threshold, Some(6));
    }

    #[test]
    fn non_step_policy_is_rejected() {
        let vt = ValueTable::from_parts(0.0, vec![0.0; 5], vec![0, 1, 0, 1, 1]);
        let report = check_threshold(&vt);
        assert!(!report.holds);
        assert_eq!(report.violations, vec![2]);
        assert_eq!(report.threshold, None);
    }

    #[test]
    fn solved_tables_satisfy_structure() {
        let mdp = TabularMdp::unit(12, 0.4, 0.9).with_multipliers(0.8, 0.6);
        for lambda in [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0] {
            let vt = solve(&mdp, lambda).unwrap();
            assert!(check_concavity(&vt).holds, "lambda {lambda}");
            assert!(check_threshold(&vt).holds, "lambda {lambda}");
        }
    }

    #[test]
    fn single_point_grid_is_vacuous() {
        let mdp = TabularMdp::unit(8, 0.3, 0.9);
        let report = check_indexability(&mdp, &[1.0]).unwrap();
        assert!(report.holds);
        assert!(report.violations.is_empty());
        assert_eq!(report.max_dv_excess, f64::NEG_INFINITY);
    }

    #[test]
    fn grid_must_increase() {
        let mdp = TabularMdp::unit(8, 0.3, 0.9);
        assert_eq!(
            check_indexability(&mdp, &[0.0, 0.5, 0.5]).unwrap_err(),
            MdpError::InvalidGrid { position: 2 }
        );
        assert!(check_indexability(&mdp, &[-0.1, 0.5]).is_err());
    }

    #[test]
    fn uniform_grid_is_indexable() {
        let mdp = TabularMdp::unit(20, 0.6, 0.95).with_multipliers(1.2, 0.4);
        let grid: Vec<f64> = (0..20).map(|i| 3.0 * i as f64 / 19.0).collect();
        let report = check_indexability(&mdp, &grid).unwrap();
        assert!(report.holds, "{:?}", report.violations);
    }

    #[test]
    fn reversed_policies_break_nesting() {
        let mdp = TabularMdp::unit(3, 0.5, 0.9);
        let lo = ValueTable::from_parts(0.0, vec![0.0; 4], vec![0, 0, 1, 1]);
        let hi = ValueTable::from_parts(1.0, vec![0.0; 4], vec![0, 1, 1, 1]);
        let report = indexability_from_tables(&mdp, &[lo, hi]);
        assert!(!report.nested);
        assert!(!report.holds);
    }
}
