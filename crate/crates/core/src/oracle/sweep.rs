//! Randomized structural sweeps over tabular instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lemmas::{check_concavity, check_threshold, indexability_from_tables, validate_grid};
use super::{solve, MdpError, TabularMdp, ValueTable};

/// Parameter box from which sweep instances are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSampler {
    pub max_queue: (usize, usize),
    pub beta: (f64, f64),
    pub gamma: (f64, f64),
    pub mu: (f64, f64),
    #[serde(default)]
    pub r0: usize,
    #[serde(default = "one")]
    pub r1: usize,
}

fn one() -> usize {
    1
}

impl Default for InstanceSampler {
    fn default() -> Self {
        Self {
            max_queue: (2, 30),
            beta: (0.05, 0.9),
            gamma: (0.8, 0.99),
            mu: (0.0, 2.0),
            r0: 0,
            r1: 1,
        }
    }
}

impl InstanceSampler {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> TabularMdp {
        TabularMdp {
            max_queue: rng.random_range(self.max_queue.0..=self.max_queue.1),
            r0: self.r0,
            r1: self.r1,
            beta: rng.random_range(self.beta.0..=self.beta.1),
            gamma: rng.random_range(self.gamma.0..=self.gamma.1),
            mu_r: rng.random_range(self.mu.0..=self.mu.1),
            mu_l: rng.random_range(self.mu.0..=self.mu.1),
        }
    }

    /// `count` instances from a seeded stream.
    pub fn instances(&self, count: usize, seed: u64) -> Vec<TabularMdp> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample(&mut rng)).collect()
    }
}

/// `points` equally spaced values on `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        n => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lemma {
    Concavity,
    Threshold,
    Nesting,
    DvBound,
}

impl std::fmt::Display for Lemma {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Lemma::Concavity => "concavity",
            Lemma::Threshold => "threshold",
            Lemma::Nesting => "nesting",
            Lemma::DvBound => "dv_bound",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub mdp: TabularMdp,
    /// Lemmas that failed, each with the first λ where it did.
    pub failures: Vec<(Lemma, f64)>,
    pub max_dv_excess: f64,
}

impl InstanceReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks every lemma on already solved tables ordered by λ.
pub fn verify_value_tables(mdp: &TabularMdp, tables: &[ValueTable]) -> InstanceReport {
    let mut failures: Vec<(Lemma, f64)> = Vec::new();
    let mut note = |lemma: Lemma, lambda: f64| {
        if !failures.iter().any(|(l, _)| *l == lemma) {
            failures.push((lemma, lambda));
        }
    };
    for vt in tables {
        if !check_concavity(vt).holds {
            note(Lemma::Concavity, vt.lambda);
        }
        if !check_threshold(vt).holds {
            note(Lemma::Threshold, vt.lambda);
        }
    }
    let idx = indexability_from_tables(mdp, tables);
    for v in &idx.violations {
        match *v {
            super::IndexabilityViolation::NotNested { lambda_lo, .. } => {
                note(Lemma::Nesting, lambda_lo)
            }
            super::IndexabilityViolation::DvBound { lambda_lo, .. } => {
                note(Lemma::DvBound, lambda_lo)
            }
        }
    }
    InstanceReport {
        mdp: *mdp,
        failures,
        max_dv_excess: idx.max_dv_excess,
    }
}

/// Solves `mdp` along `grid` and checks every lemma.
pub fn verify_instance(mdp: &TabularMdp, grid: &[f64]) -> Result<InstanceReport, MdpError> {
    validate_grid(grid)?;
    let tables = grid
        .iter()
        .map(|&l| solve(mdp, l))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(verify_value_tables(mdp, &tables))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub instances: Vec<InstanceReport>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.instances.iter().all(InstanceReport::passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &InstanceReport> {
        self.instances.iter().filter(|r| !r.passed())
    }

    pub fn max_dv_excess(&self) -> f64 {
        self.instances
            .iter()
            .map(|r| r.max_dv_excess)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Verifies every instance in parallel. Results keep the input order.
pub fn sweep(instances: &[TabularMdp], grid: &[f64]) -> Result<SweepReport, MdpError> {
    use rayon::prelude::*;
    let instances = instances
        .par_iter()
        .map(|mdp| verify_instance(mdp, grid))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepReport { instances })
}
