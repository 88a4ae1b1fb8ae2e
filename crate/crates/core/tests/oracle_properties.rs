//! Structural properties of the tabular solution, checked against an
//! independent policy-enumeration solver.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use windex_core::oracle::sweep::{uniform_grid, verify_value_tables, InstanceSampler, Lemma};
use windex_core::oracle::{
    check_concavity, check_indexability, check_threshold, index_table, solve, value_iterate,
    whittle_index, TabularMdp,
};

/// Exact value of a stationary policy: solves `(I - γ P_π) V = r_π`.
fn policy_value(mdp: &TabularMdp, policy: &[u8], lambda: f64) -> DVector<f64> {
    let n = mdp.num_states();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        let act = policy[s] as usize;
        r[s] = mdp.reward(s, act, lambda);
        for (next, p) in mdp.transitions(s, act) {
            a[(s, next)] -= mdp.gamma * p;
        }
    }
    a.lu().solve(&r).expect("I - γP is nonsingular")
}

/// Best of all `2^n` stationary deterministic policies, compared by the sum
/// of state values.
fn enumerate_optimal(mdp: &TabularMdp, lambda: f64) -> (Vec<u8>, DVector<f64>) {
    let n = mdp.num_states();
    let mut best: Option<(Vec<u8>, DVector<f64>)> = None;
    for mask in 0u32..(1 << n) {
        let policy: Vec<u8> = (0..n).map(|s| ((mask >> s) & 1) as u8).collect();
        let v = policy_value(mdp, &policy, lambda);
        if best.as_ref().is_none_or(|(_, bv)| v.sum() > bv.sum()) {
            best = Some((policy, v));
        }
    }
    best.unwrap()
}

fn small_instances(count: usize, seed: u64) -> Vec<TabularMdp> {
    InstanceSampler {
        max_queue: (2, 8),
        ..InstanceSampler::default()
    }
    .instances(count, seed)
}

#[test]
fn greedy_policy_matches_enumeration() {
    let lambdas = [0.15, 0.7, 1.3, 2.2];
    for (k, mdp) in small_instances(10, 11).iter().enumerate() {
        let lambda = lambdas[k % lambdas.len()];
        let vt = solve(mdp, lambda).unwrap();
        let (policy, v) = enumerate_optimal(mdp, lambda);
        assert_eq!(vt.policy, policy, "{mdp:?} at λ={lambda}");
        for s in 0..mdp.num_states() {
            assert!((vt.values[s] - v[s]).abs() < 1e-7, "{mdp:?} s={s}");
        }
    }
}

#[test]
fn enumerated_optimum_dominates_every_policy() {
    let mdp = TabularMdp::unit(5, 0.4, 0.85).with_multipliers(0.5, 0.3);
    let (_, best) = enumerate_optimal(&mdp, 0.9);
    for mask in 0u32..(1 << mdp.num_states()) {
        let p: Vec<u8> = (0..mdp.num_states()).map(|s| ((mask >> s) & 1) as u8).collect();
        let v = policy_value(&mdp, &p, 0.9);
        for s in 0..mdp.num_states() {
            assert!(v[s] <= best[s] + 1e-9);
        }
    }
}

#[test]
fn reference_instance_policy() {
    // Passive only on the empty queue at λ = 0.5.
    let mdp = TabularMdp::unit(20, 0.3, 0.9);
    let vt = solve(&mdp, 0.5).unwrap();
    assert_eq!(vt.policy[0], 0);
    assert!(vt.policy[1..].iter().all(|&a| a == 1));
    let w = whittle_index(&mdp, 10, (0.0, 3.0), 1e-9).unwrap();
    assert!((w - 1.0).abs() < 1e-6, "{w}");
}

#[test]
fn bulk_service_indices_frozen() {
    // Reference values from a separate solver.
    let frozen = [
        0.0, 0.1818, 0.5124, 0.9647, 1.5166, 2.1499, 2.8499, 3.6045, 8.0,
    ];
    let mdp = TabularMdp {
        max_queue: 8,
        r0: 0,
        r1: 8,
        beta: 0.5,
        gamma: 0.9,
        mu_r: 0.0,
        mu_l: 0.0,
    };
    let t = index_table(&mdp, (-1.0, 50.0), 1e-9).unwrap();
    for (s, w) in frozen.iter().enumerate() {
        assert!((t.index[s] - w).abs() < 1e-4, "s={s}: {} vs {w}", t.index[s]);
    }
    assert!(t.is_monotone());
}

#[test]
fn corrupted_table_names_the_lemma() {
    let mdp = TabularMdp::unit(10, 0.3, 0.9);
    let grid = uniform_grid(0.0, 2.0, 5);
    let mut tables: Vec<_> = grid.iter().map(|&l| solve(&mdp, l).unwrap()).collect();
    assert!(verify_value_tables(&mdp, &tables).passed());
    tables[2].values[5] += 1.0;
    let r = verify_value_tables(&mdp, &tables);
    assert!(r.failures.iter().any(|(l, _)| *l == Lemma::Concavity));
    tables[2].values[5] -= 1.0;
    // Active everywhere but the empty queue at λ = 0.5.
    assert!(tables[1].policy[1..].iter().all(|&a| a == 1));
    tables[1].policy[9] = 0;
    let r = verify_value_tables(&mdp, &tables);
    assert!(r.failures.iter().any(|(l, _)| *l == Lemma::Threshold));
}

fn arb_mdp() -> impl Strategy<Value = TabularMdp> {
    (2usize..=16, 0.05f64..0.9, 0.8f64..0.99, 0.0f64..2.0, 0.0f64..2.0).prop_map(
        |(m, beta, gamma, mu_r, mu_l)| TabularMdp::unit(m, beta, gamma).with_multipliers(mu_r, mu_l),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn value_is_concave_and_policy_threshold(mdp in arb_mdp(), lambda in 0.0f64..3.0) {
        let vt = solve(&mdp, lambda).unwrap();
        prop_assert!(check_concavity(&vt).holds);
        prop_assert!(check_threshold(&vt).holds);
        prop_assert!(vt.residual < 1e-8);
    }

    #[test]
    fn inactive_sets_nest(mdp in arb_mdp()) {
        let r = check_indexability(&mdp, &uniform_grid(0.0, 3.0, 31)).unwrap();
        prop_assert!(r.holds, "{:?}", r.violations);
        prop_assert!(r.max_dv_excess <= 1e-8);
    }

    #[test]
    fn values_fall_as_lambda_rises(mdp in arb_mdp(), l in 0.0f64..2.0, d in 0.01f64..1.0) {
        let lo = solve(&mdp, l).unwrap();
        let hi = solve(&mdp, l + d).unwrap();
        for (a, b) in lo.values.iter().zip(&hi.values) {
            prop_assert!(b <= &(a + 1e-9));
            // Activation cost grows by at most d per step.
            prop_assert!(a - b <= d / (1.0 - mdp.gamma) + 1e-9);
        }
    }

    #[test]
    fn tolerance_controls_residual(mdp in arb_mdp(), tol in 1e-10f64..1e-4) {
        let vt = value_iterate(&mdp, 0.5, tol, 1_000_000).unwrap();
        prop_assert!(vt.residual <= tol);
    }

    #[test]
    fn indices_are_monotone_without_regularity_term(mdp in arb_mdp()) {
        // A positive mu_l pays the passive action on non-empty queues, which
        // can push those indices below the empty-queue index.
        let mdp = mdp.with_multipliers(mdp.mu_r, 0.0);
        let t = index_table(&mdp, (-1.0, 10.0), 1e-7).unwrap();
        prop_assert!(t.is_monotone(), "{:?}", t.index);
    }
}
