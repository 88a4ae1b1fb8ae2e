//! Index scheduling for many UEs, classical baselines and the slicing harness.
//!
//! Every decision ranks the UEs of a slice by weight, gives the top `R` the
//! high grant and the rest the low grant (or nothing when the budget cannot
//! cover low grants for everyone). Ties go to the lower UE id and NaN weights
//! rank last.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    CapacityTable, ChannelSpec, EnvError, ServiceClass, ServiceClassSpec, UeRngs, UeSim, UeState,
    CQI_MAX,
};
use crate::metrics::{tpt_target, tpt_violated, MetricsError, MetricsReport, Recorder};
use crate::net::{InputNorm, NetError, WhittleNetwork};
use crate::oracle::{index_table, IndexTable, MdpError, TabularMdp};

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("invalid scenario: `{field}` {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("UE {ue} ({class}) has no index model")]
    MissingModel { ue: usize, class: ServiceClass },
    #[error("UE {ue} is {ue_class} but its model was trained for {model_class}")]
    ModelClassMismatch {
        ue: usize,
        ue_class: ServiceClass,
        model_class: ServiceClass,
    },
    #[error("unknown scheduler `{0}`")]
    UnknownScheduler(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SchedError {
    SchedError::Invalid {
        field,
        reason: reason.into(),
    }
}

// ---------------------------------------------------------------------------
// Index models

/// Anything that maps a UE state to a scalar priority.
pub trait IndexModel: Send + Sync {
    fn index(&self, ue: &UeState) -> f64;
}

impl IndexModel for WhittleNetwork {
    /// Non-finite features rank the UE last.
    fn index(&self, ue: &UeState) -> f64 {
        self.forward(&ue.features()).unwrap_or(f64::NEG_INFINITY)
    }
}

/// Index from the tabular unit-service model of the UE's class.
///
/// The queue is measured in high-grant units, `ceil(buffer / high capacity)`,
/// and the violation features enter as a Lagrangian correction:
///
/// ```text
/// (1 + κ·v_tpt)·w(q) + κ·(v_tsls + tsls / L)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct OracleIndex {
    pub table: IndexTable,
    pub capacity: CapacityTable,
    pub high_rbs: u32,
    pub tsls_bound: u32,
    pub kappa: f64,
}

/// Queue states of the oracle model.
pub const ORACLE_MAX_QUEUE: usize = 20;
/// Discount of the oracle model.
pub const ORACLE_GAMMA: f64 = 0.9;
/// Arrival probabilities are capped here to keep the model away from the
/// always-full regime.
pub const ORACLE_MAX_LOAD: f64 = 0.95;

impl OracleIndex {
    pub fn for_class(
        spec: &ServiceClassSpec,
        capacity: &CapacityTable,
        high_rbs: u32,
    ) -> Result<Self, SchedError> {
        let unit = capacity.mean(CQI_MAX, high_rbs);
        let load = if unit > 0.0 {
            spec.traffic.mean_bytes_per_tti() / unit
        } else {
            ORACLE_MAX_LOAD
        };
        let mdp = TabularMdp::unit(ORACLE_MAX_QUEUE, load.clamp(0.0, ORACLE_MAX_LOAD), ORACLE_GAMMA);
        let table = index_table(&mdp, (0.0, 10.0), 1e-6)?;
        Ok(Self {
            table,
            capacity: capacity.clone(),
            high_rbs,
            tsls_bound: spec.tsls_bound_l,
            kappa: 1.0,
        })
    }

    pub fn queue_units(&self, ue: &UeState) -> usize {
        let unit = self.capacity.mean(ue.cqi, self.high_rbs);
        if ue.buffer_bytes == 0 {
            0
        } else if unit <= 0.0 {
            ORACLE_MAX_QUEUE
        } else {
            ((ue.buffer_bytes as f64 / unit).ceil() as usize).min(self.table.index.len() - 1)
        }
    }
}

impl IndexModel for OracleIndex {
    fn index(&self, ue: &UeState) -> f64 {
        let w = self.table.get(self.queue_units(ue));
        (1.0 + self.kappa * ue.v_tpt) * w
            + self.kappa * (ue.v_tsls + ue.tsls as f64 / self.tsls_bound as f64)
    }
}

// ---------------------------------------------------------------------------
// Allocation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grant {
    High,
    Low,
    Zero,
}

/// RBs per grant level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbProfile {
    pub high_rbs: u32,
    pub low_rbs: u32,
    pub zero_rbs: u32,
}

impl Default for RbProfile {
    fn default() -> Self {
        Self {
            high_rbs: 9,
            low_rbs: 2,
            zero_rbs: 0,
        }
    }
}

impl RbProfile {
    pub fn rbs(&self, grant: Grant) -> u32 {
        match grant {
            Grant::High => self.high_rbs,
            Grant::Low => self.low_rbs,
            Grant::Zero => self.zero_rbs,
        }
    }

    /// `floor(rbgs / high_rbs)`.
    pub fn default_top_r(&self, rbgs: u32) -> u32 {
        rbgs.checked_div(self.high_rbs).unwrap_or(0)
    }

    /// Grant for the UEs outside the top `R`: low when the budget covers it,
    /// zero otherwise.
    pub fn rest_grant(&self, n: usize, top_r: u32, rbgs: u32) -> Grant {
        let r = (top_r as usize).min(n);
        let need = r as u64 * self.high_rbs as u64 + (n - r) as u64 * self.low_rbs as u64;
        if need <= rbgs as u64 {
            Grant::Low
        } else {
            Grant::Zero
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationDecision {
    pub tti: u64,
    pub grants: Vec<Grant>,
    pub weights: Vec<f64>,
}

impl AllocationDecision {
    pub fn rbs_used(&self, profile: &RbProfile) -> u64 {
        self.grants.iter().map(|&g| profile.rbs(g) as u64).sum()
    }

    pub fn high_count(&self) -> usize {
        self.grants.iter().filter(|&&g| g == Grant::High).count()
    }
}

/// Positions of the `top_r` largest weights, ties to the lower position and
/// NaN ranked below everything.
pub fn select_top_r(weights: &[f64], top_r: usize) -> Vec<bool> {
    let key = |w: f64| if w.is_nan() { f64::NEG_INFINITY } else { w };
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        key(weights[b])
            .partial_cmp(&key(weights[a]))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut chosen = vec![false; weights.len()];
    for &i in order.iter().take(top_r) {
        chosen[i] = true;
    }
    chosen
}

fn decide(tti: u64, weights: Vec<f64>, top_r: u32, rest: Grant) -> AllocationDecision {
    let grants = select_top_r(&weights, top_r as usize)
        .into_iter()
        .map(|hi| if hi { Grant::High } else { rest })
        .collect();
    AllocationDecision {
        tti,
        grants,
        weights,
    }
}

/// Ranks UEs by their models' indices; the top `R` get the high grant.
pub fn windex_allocate(
    tti: u64,
    states: &[UeState],
    models: &[&dyn IndexModel],
    top_r: u32,
    rest: Grant,
) -> AllocationDecision {
    let weights = states.iter().zip(models).map(|(s, m)| m.index(s)).collect();
    decide(tti, weights, top_r, rest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedulerKind {
    #[serde(rename = "windex")]
    Windex,
    #[serde(rename = "oracle")]
    Oracle,
    #[serde(rename = "maxweight")]
    MaxWeight,
    #[serde(rename = "maxcqi")]
    MaxCqi,
    #[serde(rename = "pf")]
    PropFair,
    #[serde(rename = "rr")]
    RoundRobin,
}

impl SchedulerKind {
    pub const BASELINES: [SchedulerKind; 4] =
        [Self::MaxWeight, Self::MaxCqi, Self::PropFair, Self::RoundRobin];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Windex => "windex",
            Self::Oracle => "oracle",
            Self::MaxWeight => "maxweight",
            Self::MaxCqi => "maxcqi",
            Self::PropFair => "pf",
            Self::RoundRobin => "rr",
        }
    }

    pub fn is_index(self) -> bool {
        matches!(self, Self::Windex | Self::Oracle)
    }
}

impl std::fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SchedulerKind {
    type Err = SchedError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "windex" => Ok(Self::Windex),
            "oracle" => Ok(Self::Oracle),
            "maxweight" => Ok(Self::MaxWeight),
            "maxcqi" => Ok(Self::MaxCqi),
            "pf" => Ok(Self::PropFair),
            "rr" => Ok(Self::RoundRobin),
            other => Err(SchedError::UnknownScheduler(other.to_string())),
        }
    }
}

/// State the baselines carry between TTIs.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineHistory {
    /// EWMA of CQI per UE, for proportional fair.
    pub avg_cqi: Vec<f64>,
    pub pf_alpha: f64,
    /// Round-robin start position.
    pub rr_cursor: usize,
}

impl BaselineHistory {
    pub fn new(states: &[UeState], pf_alpha: f64) -> Self {
        Self {
            avg_cqi: states.iter().map(|s| s.cqi as f64).collect(),
            pf_alpha,
            rr_cursor: 0,
        }
    }

    /// Folds the CQIs seen this TTI into the PF averages.
    pub fn observe(&mut self, cqis: &[u8]) {
        for (a, &c) in self.avg_cqi.iter_mut().zip(cqis) {
            *a = (1.0 - self.pf_alpha) * *a + self.pf_alpha * c as f64;
        }
    }

    pub fn advance_rr(&mut self, by: usize, n: usize) {
        if n > 0 {
            self.rr_cursor = (self.rr_cursor + by) % n;
        }
    }
}

/// Baseline weights: CQI, CQI over its average, CQI times backlog, or the
/// round-robin rotation starting at the cursor.
pub fn baseline_weights(
    kind: SchedulerKind,
    states: &[UeState],
    history: &BaselineHistory,
) -> Result<Vec<f64>, SchedError> {
    let n = states.len();
    Ok(match kind {
        SchedulerKind::MaxCqi => states.iter().map(|s| s.cqi as f64).collect(),
        SchedulerKind::PropFair => states
            .iter()
            .zip(&history.avg_cqi)
            .map(|(s, a)| s.cqi as f64 / a)
            .collect(),
        SchedulerKind::MaxWeight => states
            .iter()
            .map(|s| s.cqi as f64 * s.buffer_bytes as f64)
            .collect(),
        SchedulerKind::RoundRobin => (0..n)
            .map(|i| -(((i + n - history.rr_cursor % n.max(1)) % n.max(1)) as f64))
            .collect(),
        other => {
            return Err(SchedError::UnknownScheduler(format!(
                "{other} is not a baseline"
            )))
        }
    })
}

pub fn baseline_allocate(
    kind: SchedulerKind,
    tti: u64,
    states: &[UeState],
    history: &BaselineHistory,
    top_r: u32,
    rest: Grant,
) -> Result<AllocationDecision, SchedError> {
    Ok(decide(tti, baseline_weights(kind, states, history)?, top_r, rest))
}

/// Clamped proportional update of one violation feature from the fraction of
/// violating TTIs in the last window; decays by `η·v` after a clean window.
pub fn update_feature(v: f64, frac: f64, eta: f64) -> f64 {
    if frac > 0.0 {
        (v + eta * frac).clamp(0.0, 1.0)
    } else {
        (v - eta * v).clamp(0.0, 1.0)
    }
}

/// Updates `(v_tpt, v_tsls)` of `ue` from window violation fractions.
pub fn update_violation_features(ue: &mut UeState, frac_tpt: f64, frac_tsls: f64, eta: f64) {
    ue.v_tpt = update_feature(ue.v_tpt, frac_tpt, eta);
    ue.v_tsls = update_feature(ue.v_tsls, frac_tsls, eta);
}

// ---------------------------------------------------------------------------
// Scenarios

/// A group of identical UEs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UeGroup {
    pub class: ServiceClass,
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default)]
    pub channel: ChannelSpec,
    /// Index network for this class.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub tpt_bound_b: Option<f64>,
    #[serde(default)]
    pub tsls_bound_l: Option<u32>,
}

fn one() -> usize {
    1
}
fn d_window() -> u64 {
    1
}
fn d_eta() -> f64 {
    0.05
}
fn d_pf_alpha() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: String,
    pub total_rbgs: u32,
    #[serde(default)]
    pub rb_profile: RbProfile,
    /// High grants per decision; `floor(total_rbgs / high_rbs)` when absent.
    #[serde(default)]
    pub top_r: Option<u32>,
    pub horizon: u64,
    /// TTIs a decision is held for.
    #[serde(default = "d_window")]
    pub window: u64,
    /// Step size of the violation-feature update.
    #[serde(default = "d_eta")]
    pub eta: f64,
    #[serde(default = "d_pf_alpha")]
    pub pf_alpha: f64,
    /// Round-robin rotates every this many TTIs.
    #[serde(default = "one_u64")]
    pub rr_period: u64,
    /// Throughput bound for every UE unless a group overrides it.
    #[serde(default)]
    pub tpt_bound_b: Option<f64>,
    #[serde(default)]
    pub capacity: Option<CapacityTable>,
    pub ues: Vec<UeGroup>,
}

fn one_u64() -> u64 {
    1
}

/// One UE of an expanded scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct UeSpec {
    pub id: usize,
    pub service: ServiceClassSpec,
    pub channel: ChannelSpec,
    pub model: Option<PathBuf>,
}

impl ScenarioSpec {
    pub fn top_r(&self) -> u32 {
        self.top_r
            .unwrap_or_else(|| self.rb_profile.default_top_r(self.total_rbgs))
    }

    pub fn capacity(&self) -> CapacityTable {
        self.capacity.clone().unwrap_or_default()
    }

    pub fn num_ues(&self) -> usize {
        self.ues.iter().map(|g| g.count).sum()
    }

    pub fn expand(&self) -> Vec<UeSpec> {
        let mut out = Vec::with_capacity(self.num_ues());
        for g in &self.ues {
            let mut service = g.class.default_spec();
            if let Some(b) = g.tpt_bound_b.or(self.tpt_bound_b) {
                service.tpt_bound_b = b;
            }
            if let Some(l) = g.tsls_bound_l {
                service.tsls_bound_l = l;
            }
            for _ in 0..g.count {
                out.push(UeSpec {
                    id: out.len(),
                    service: service.clone(),
                    channel: g.channel.clone(),
                    model: g.model.clone(),
                });
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), SchedError> {
        let n = self.num_ues();
        if n == 0 {
            return Err(invalid("ues", "at least one UE is required"));
        }
        let p = &self.rb_profile;
        if !(p.high_rbs > p.low_rbs && p.low_rbs >= p.zero_rbs) {
            return Err(invalid("rb_profile", "need high > low >= zero"));
        }
        let r = self.top_r() as usize;
        if r == 0 {
            return Err(invalid("top_r", "must be at least 1 (total_rbgs below one high grant?)"));
        }
        if r > n {
            return Err(invalid("top_r", format!("{r} exceeds the {n} UEs")));
        }
        if r as u64 * p.high_rbs as u64 > self.total_rbgs as u64 {
            return Err(invalid("top_r", "high grants exceed total_rbgs"));
        }
        if self.window == 0 || self.rr_period == 0 {
            return Err(invalid("window", "window and rr_period must be at least 1"));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(invalid("eta", "must lie in (0, 1]"));
        }
        if !(self.pf_alpha > 0.0 && self.pf_alpha <= 1.0) {
            return Err(invalid("pf_alpha", "must lie in (0, 1]"));
        }
        if let Some(c) = &self.capacity {
            c.validate()?;
        }
        for u in self.expand() {
            u.service.validate()?;
            u.channel.validate()?;
        }
        Ok(())
    }
}

/// One slice: the UEs of `classes`, `rbgs` RBGs and an inner scheduler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slice {
    #[serde(default)]
    pub name: String,
    pub classes: Vec<ServiceClass>,
    pub rbgs: u32,
    pub scheduler: SchedulerKind,
    #[serde(default)]
    pub top_r: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceConfig {
    pub slices: Vec<Slice>,
}

impl SliceConfig {
    pub fn validate(&self, spec: &ScenarioSpec) -> Result<(), SchedError> {
        let total: u64 = self.slices.iter().map(|s| s.rbgs as u64).sum();
        if total != spec.total_rbgs as u64 {
            return Err(invalid(
                "slices",
                format!("shares sum to {total}, expected {}", spec.total_rbgs),
            ));
        }
        for ue in spec.expand() {
            let owners = self
                .slices
                .iter()
                .filter(|s| s.classes.contains(&ue.service.class))
                .count();
            if owners != 1 {
                return Err(invalid(
                    "slices",
                    format!("class {} must belong to exactly one slice", ue.service.class),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Unsliced(SchedulerKind),
    Sliced(SliceConfig),
}

impl Policy {
    pub fn label(&self) -> String {
        match self {
            Policy::Unsliced(k) => k.as_str().to_string(),
            Policy::Sliced(cfg) => {
                let inner: Vec<&str> = cfg.slices.iter().map(|s| s.scheduler.as_str()).collect();
                format!("sliced({})", inner.join(","))
            }
        }
    }

    fn kinds(&self) -> Vec<SchedulerKind> {
        match self {
            Policy::Unsliced(k) => vec![*k],
            Policy::Sliced(cfg) => cfg.slices.iter().map(|s| s.scheduler).collect(),
        }
    }
}

/// Index networks per UE, aligned with [`ScenarioSpec::expand`].
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub nets: Vec<Option<WhittleNetwork>>,
}

impl ModelSet {
    /// Loads every UE's model file, resolving paths against `base_dir`.
    pub fn load(spec: &ScenarioSpec, base_dir: &Path) -> Result<Self, SchedError> {
        let nets = spec
            .expand()
            .iter()
            .map(|u| {
                u.model
                    .as_ref()
                    .map(|p| WhittleNetwork::load(&base_dir.join(p)))
                    .transpose()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { nets })
    }

    /// The same network for every UE of each class.
    pub fn per_class(spec: &ScenarioSpec, nets: &[(ServiceClass, WhittleNetwork)]) -> Self {
        Self {
            nets: spec
                .expand()
                .iter()
                .map(|u| {
                    nets.iter()
                        .find(|(c, _)| *c == u.service.class)
                        .map(|(_, n)| n.clone())
                })
                .collect(),
        }
    }
}

/// Per-TTI snapshot handed to trace callbacks.
#[derive(Debug, Clone, PartialEq)]
pub struct TtiRecord {
    pub tti: u64,
    pub grants: Vec<Grant>,
    pub states: Vec<UeState>,
    pub served: Vec<u64>,
}

struct SliceRuntime {
    ues: Vec<usize>,
    rbgs: u32,
    kind: SchedulerKind,
    top_r: u32,
    rest: Grant,
    history: BaselineHistory,
}

/// Runs `policy` on `spec` for the full horizon.
pub fn run_scenario(
    spec: &ScenarioSpec,
    policy: &Policy,
    models: &ModelSet,
    seed: u64,
    base_dir: &Path,
) -> Result<MetricsReport, SchedError> {
    run_scenario_traced(spec, policy, models, seed, base_dir, 1, |_| {})
}

/// [`run_scenario`] with a per-TTI callback and `jobs` inference workers.
pub fn run_scenario_traced(
    spec: &ScenarioSpec,
    policy: &Policy,
    models: &ModelSet,
    seed: u64,
    base_dir: &Path,
    jobs: usize,
    mut on_tti: impl FnMut(&TtiRecord),
) -> Result<MetricsReport, SchedError> {
    spec.validate()?;
    if let Policy::Sliced(cfg) = policy {
        cfg.validate(spec)?;
    }
    let ue_specs = spec.expand();
    let n = ue_specs.len();
    let capacity = spec.capacity();
    let profile = spec.rb_profile;

    // Index models, checked before anything runs.
    let kinds = policy.kinds();
    let mut index_models: Vec<Option<Box<dyn IndexModel>>> = (0..n).map(|_| None).collect();
    for u in &ue_specs {
        let uses = |k: SchedulerKind| match policy {
            Policy::Unsliced(x) => *x == k,
            Policy::Sliced(cfg) => cfg
                .slices
                .iter()
                .any(|s| s.scheduler == k && s.classes.contains(&u.service.class)),
        };
        if uses(SchedulerKind::Windex) {
            let net = models
                .nets
                .get(u.id)
                .and_then(|m| m.as_ref())
                .ok_or(SchedError::MissingModel {
                    ue: u.id,
                    class: u.service.class,
                })?;
            if let Some(mc) = net.class {
                if mc != u.service.class {
                    return Err(SchedError::ModelClassMismatch {
                        ue: u.id,
                        ue_class: u.service.class,
                        model_class: mc,
                    });
                }
            }
            index_models[u.id] = Some(Box::new(net.clone()));
        } else if uses(SchedulerKind::Oracle) {
            index_models[u.id] = Some(Box::new(OracleIndex::for_class(
                &u.service,
                &capacity,
                profile.high_rbs,
            )?));
        }
    }
    debug_assert!(kinds.iter().all(|k| !k.is_index()) || index_models.iter().any(Option::is_some));

    let mut sims: Vec<UeSim> = Vec::with_capacity(n);
    for u in &ue_specs {
        let mut rngs = UeRngs::new(seed, u.id as u64);
        let channel = u.channel.build(base_dir, &mut rngs.channel)?;
        sims.push(UeSim::new(u.service.clone(), channel, rngs));
    }

    let slices: Vec<(Vec<usize>, u32, SchedulerKind, Option<u32>)> = match policy {
        Policy::Unsliced(k) => vec![((0..n).collect(), spec.total_rbgs, *k, Some(spec.top_r()))],
        Policy::Sliced(cfg) => cfg
            .slices
            .iter()
            .map(|s| {
                let ues = ue_specs
                    .iter()
                    .filter(|u| s.classes.contains(&u.service.class))
                    .map(|u| u.id)
                    .collect();
                (ues, s.rbgs, s.scheduler, s.top_r)
            })
            .collect(),
    };
    let initial: Vec<UeState> = sims.iter().map(|s| s.state).collect();
    let mut runtimes: Vec<SliceRuntime> = slices
        .into_iter()
        .map(|(ues, rbgs, kind, top_r)| {
            let top_r = top_r
                .unwrap_or_else(|| profile.default_top_r(rbgs))
                .min(ues.len() as u32);
            let rest = profile.rest_grant(ues.len(), top_r, rbgs);
            let states: Vec<UeState> = ues.iter().map(|&i| initial[i]).collect();
            SliceRuntime {
                history: BaselineHistory::new(&states, spec.pf_alpha),
                ues,
                rbgs,
                kind,
                top_r,
                rest,
            }
        })
        .collect();

    let pool = if jobs > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| invalid("jobs", e.to_string()))?,
        )
    } else {
        None
    };

    let classes: Vec<ServiceClass> = ue_specs.iter().map(|u| u.service.class).collect();
    let mut recorder = Recorder::new(policy.label(), seed, spec.horizon, &classes);
    let mut grants = vec![Grant::Zero; n];
    let mut win_tpt = vec![0u64; n];
    let mut win_tsls = vec![0u64; n];
    let mut win_len = 0u64;

    for tti in 0..spec.horizon {
        // Decide.
        for rt in &mut runtimes {
            let decide_now = !rt.kind.is_index() || tti % spec.window == 0;
            if !decide_now {
                continue;
            }
            let states: Vec<UeState> = rt.ues.iter().map(|&i| sims[i].state).collect();
            let decision = if rt.kind.is_index() {
                let models: Vec<&dyn IndexModel> = rt
                    .ues
                    .iter()
                    .map(|&i| index_models[i].as_deref().expect("model resolved above"))
                    .collect();
                let weights: Vec<f64> = match &pool {
                    Some(pool) => pool.install(|| {
                        states
                            .par_iter()
                            .zip(models.par_iter())
                            .map(|(s, m)| m.index(s))
                            .collect()
                    }),
                    None => states.iter().zip(&models).map(|(s, m)| m.index(s)).collect(),
                };
                decide(tti, weights, rt.top_r, rt.rest)
            } else {
                baseline_allocate(rt.kind, tti, &states, &rt.history, rt.top_r, rt.rest)?
            };
            debug_assert!(decision.rbs_used(&profile) <= rt.rbgs as u64);
            for (&i, &g) in rt.ues.iter().zip(&decision.grants) {
                grants[i] = g;
            }
        }
        debug_assert!(grants.iter().map(|&g| profile.rbs(g) as u64).sum::<u64>() <= spec.total_rbgs as u64);

        // Serve and account.
        let mut served = vec![0u64; n];
        let mut cqis = vec![0u8; n];
        for (i, sim) in sims.iter_mut().enumerate() {
            let g = grants[i];
            let out = sim.step(profile.rbs(g), g == Grant::High, &capacity);
            let target = tpt_target(&out, sim.spec.tpt_bound_b, capacity.mean(out.cqi, profile.high_rbs));
            let tsls = sim.state.tsls;
            recorder.record(tti, i, out.served_bytes, target, tsls, sim.spec.tsls_bound_l)?;
            win_tpt[i] += u64::from(tpt_violated(out.served_bytes, target));
            win_tsls[i] += u64::from(tsls > sim.spec.tsls_bound_l);
            served[i] = out.served_bytes;
            cqis[i] = out.cqi;
        }
        win_len += 1;

        // Baseline bookkeeping.
        for rt in &mut runtimes {
            let slice_cqis: Vec<u8> = rt.ues.iter().map(|&i| cqis[i]).collect();
            rt.history.observe(&slice_cqis);
            if (tti + 1) % spec.rr_period == 0 {
                rt.history.advance_rr(rt.top_r as usize, rt.ues.len());
            }
        }

        // Violation features at the end of each decision window.
        if (tti + 1) % spec.window == 0 {
            for (i, sim) in sims.iter_mut().enumerate() {
                let w = win_len as f64;
                update_violation_features(
                    &mut sim.state,
                    win_tpt[i] as f64 / w,
                    win_tsls[i] as f64 / w,
                    spec.eta,
                );
            }
            win_tpt.iter_mut().for_each(|c| *c = 0);
            win_tsls.iter_mut().for_each(|c| *c = 0);
            win_len = 0;
        }

        on_tti(&TtiRecord {
            tti,
            grants: grants.clone(),
            states: sims.iter().map(|s| s.state).collect(),
            served,
        });
    }
    Ok(recorder.finalize())
}

// ---------------------------------------------------------------------------
// Inference benchmark

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl Percentiles {
    pub fn from_samples(mut us: Vec<f64>) -> Self {
        if us.is_empty() {
            return Self {
                p50_us: 0.0,
                p90_us: 0.0,
                p99_us: 0.0,
                max_us: 0.0,
            };
        }
        us.sort_by(|a, b| a.total_cmp(b));
        let at = |q: f64| us[((us.len() as f64 * q).ceil() as usize).clamp(1, us.len()) - 1];
        Self {
            p50_us: at(0.50),
            p90_us: at(0.90),
            p99_us: at(0.99),
            max_us: *us.last().unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub ues: usize,
    pub threads: usize,
    pub iterations: usize,
    /// One forward pass.
    pub single: Percentiles,
    /// Indices for all UEs.
    pub batch: Percentiles,
}

/// Times forward passes of a randomly initialized network with a non-zero
/// head, once per UE and for all `ues` UEs spread over `threads` workers.
pub fn bench_inference(
    ues: usize,
    threads: usize,
    iterations: usize,
    seed: u64,
) -> Result<BenchReport, SchedError> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = WhittleNetwork::new(InputNorm::new(50_000.0, 10.0), &mut rng);
    for p in net.params_mut().iter_mut().skip(crate::net::NUM_PARAMS - 9) {
        *p = rng.random_range(-0.5..0.5);
    }
    let states: Vec<UeState> = (0..ues.max(1))
        .map(|_| UeState {
            buffer_bytes: rng.random_range(0..50_000),
            cqi: rng.random_range(1..=15),
            tsls: rng.random_range(0..20),
            v_tpt: rng.random(),
            v_tsls: rng.random(),
        })
        .collect();
    let threads = threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid("threads", e.to_string()))?;

    let mut sink = 0.0;
    let warmup = (iterations / 10).max(10);
    let mut single = Vec::with_capacity(iterations);
    for k in 0..warmup + iterations {
        let s = &states[k % states.len()];
        let t = Instant::now();
        sink += std::hint::black_box(net.index(std::hint::black_box(s)));
        let dt = t.elapsed().as_secs_f64() * 1e6;
        if k >= warmup {
            single.push(dt);
        }
    }
    let mut batch = Vec::with_capacity(iterations);
    for k in 0..warmup + iterations {
        let t = Instant::now();
        let w: Vec<f64> = if threads == 1 {
            states.iter().map(|s| net.index(s)).collect()
        } else {
            pool.install(|| states.par_iter().map(|s| net.index(s)).collect())
        };
        let dt = t.elapsed().as_secs_f64() * 1e6;
        sink += std::hint::black_box(w)[0];
        if k >= warmup {
            batch.push(dt);
        }
    }
    std::hint::black_box(sink);
    Ok(BenchReport {
        ues: states.len(),
        threads,
        iterations,
        single: Percentiles::from_samples(single),
        batch: Percentiles::from_samples(batch),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>);
    impl IndexModel for Fixed {
        fn index(&self, ue: &UeState) -> f64 {
            self.0[ue.buffer_bytes as usize]
        }
    }

    fn tagged(n: usize) -> Vec<UeState> {
        (0..n)
            .map(|i| UeState {
                buffer_bytes: i as u64,
                ..UeState::new(10)
            })
            .collect()
    }

    #[test]
    fn sole_ue_gets_high() {
        let m = Fixed(vec![-5.0]);
        let d = windex_allocate(0, &tagged(1), &[&m], 1, Grant::Low);
        assert_eq!(d.grants, vec![Grant::High]);
    }

    #[test]
    fn ties_go_to_lower_ids() {
        let m = Fixed(vec![1.0; 5]);
        let models: Vec<&dyn IndexModel> = vec![&m; 5];
        let d = windex_allocate(0, &tagged(5), &models, 2, Grant::Zero);
        assert_eq!(
            d.grants,
            vec![Grant::High, Grant::High, Grant::Zero, Grant::Zero, Grant::Zero]
        );
    }

    #[test]
    fn highest_index_wins() {
        let m = Fixed(vec![2.0, 0.5, 1.1]);
        let models: Vec<&dyn IndexModel> = vec![&m; 3];
        let d = windex_allocate(0, &tagged(3), &models, 1, Grant::Low);
        assert_eq!(d.grants, vec![Grant::High, Grant::Low, Grant::Low]);
    }

    #[test]
    fn nan_ranks_last() {
        assert_eq!(select_top_r(&[f64::NAN, -1e300, 0.0], 2), vec![false, true, true]);
    }

    #[test]
    fn max_cqi_ties_and_empty_max_weight() {
        let states = tagged(3);
        let h = BaselineHistory::new(&states, 0.01);
        let d = baseline_allocate(SchedulerKind::MaxCqi, 0, &states, &h, 1, Grant::Low).unwrap();
        assert_eq!(d.grants[0], Grant::High);
        // UE 0 has an empty buffer: never chosen while others are backlogged.
        let d = baseline_allocate(SchedulerKind::MaxWeight, 0, &states, &h, 2, Grant::Low).unwrap();
        assert_eq!(d.grants, vec![Grant::Low, Grant::High, Grant::High]);
        assert!(baseline_allocate(SchedulerKind::Windex, 0, &states, &h, 1, Grant::Low).is_err());
    }

    #[test]
    fn round_robin_rotates() {
        let states = tagged(4);
        let mut h = BaselineHistory::new(&states, 0.01);
        let mut served = [0; 4];
        for t in 0..8 {
            let d = baseline_allocate(SchedulerKind::RoundRobin, t, &states, &h, 1, Grant::Zero).unwrap();
            for (i, g) in d.grants.iter().enumerate() {
                served[i] += usize::from(*g == Grant::High);
            }
            h.advance_rr(1, 4);
        }
        assert_eq!(served, [2, 2, 2, 2]);
    }

    #[test]
    fn pf_favors_above_average() {
        let mut states = tagged(2);
        let mut h = BaselineHistory::new(&states, 0.5);
        h.avg_cqi = vec![12.0, 4.0];
        states[0].cqi = 12;
        states[1].cqi = 6;
        let d = baseline_allocate(SchedulerKind::PropFair, 0, &states, &h, 1, Grant::Low).unwrap();
        assert_eq!(d.grants[1], Grant::High);
        h.observe(&[14, 4]);
        assert_eq!(h.avg_cqi, vec![13.0, 4.0]);
    }

    #[test]
    fn feature_updates() {
        assert_eq!(update_feature(0.0, 0.0, 0.05), 0.0);
        assert_eq!(update_feature(0.0, 1.0, 0.1), 0.1);
        assert_eq!(update_feature(0.95, 1.0, 0.1), 1.0);
        assert!((update_feature(0.5, 0.0, 0.1) - 0.45).abs() < 1e-15);
    }

    #[test]
    fn half_violating_windows() {
        // Ten windows, each with every other TTI violating.
        let window = [1u8, 0, 1, 0, 1, 0, 1, 0];
        let frac = window.iter().map(|&x| x as f64).sum::<f64>() / window.len() as f64;
        let mut v = 0.0;
        let mut expected = 0.0;
        for _ in 0..10 {
            v = update_feature(v, frac, 0.1);
            expected += 0.1 * 0.5;
            assert!((v - expected).abs() < 1e-12);
        }
        assert!((v - 0.5).abs() < 1e-12);
        // Alternating clean and fully violating windows.
        let mut v = 0.0f64;
        let mut script = Vec::new();
        for k in 0..10 {
            v = update_feature(v, if k % 2 == 0 { 1.0 } else { 0.0 }, 0.1);
            script.push(v);
        }
        let mut want = Vec::new();
        let mut w = 0.0f64;
        for k in 0..10 {
            w = if k % 2 == 0 { (w + 0.1).min(1.0) } else { w * 0.9 };
            want.push(w);
        }
        for (a, b) in script.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_budget() {
        let p = RbProfile::default();
        assert_eq!(p.default_top_r(25), 2);
        assert_eq!(p.default_top_r(17), 1);
        assert_eq!(p.rest_grant(3, 2, 25), Grant::Low);
        assert_eq!(p.rest_grant(6, 1, 17), Grant::Zero);
    }

    #[test]
    fn oracle_index_orders_queues() {
        let spec = ServiceClass::Xr.default_spec();
        let o = OracleIndex::for_class(&spec, &CapacityTable::default(), 9).unwrap();
        assert!(o.table.is_monotone());
        let empty = UeState::new(12);
        let full = UeState {
            buffer_bytes: 5_000,
            ..empty
        };
        assert!(o.index(&full) > o.index(&empty));
        let late = UeState { tsls: 8, ..full };
        assert!(o.index(&late) > o.index(&full));
    }

    fn tiny_scenario() -> ScenarioSpec {
        ScenarioSpec {
            name: "t".into(),
            total_rbgs: 17,
            rb_profile: RbProfile::default(),
            top_r: None,
            horizon: 200,
            window: 1,
            eta: 0.05,
            pf_alpha: 0.01,
            rr_period: 1,
            tpt_bound_b: Some(0.7),
            capacity: None,
            ues: vec![
                UeGroup {
                    class: ServiceClass::Embb,
                    count: 2,
                    channel: ChannelSpec::default(),
                    model: None,
                    tpt_bound_b: None,
                    tsls_bound_l: None,
                },
                UeGroup {
                    class: ServiceClass::Urllc,
                    count: 1,
                    channel: ChannelSpec::default(),
                    model: None,
                    tpt_bound_b: None,
                    tsls_bound_l: None,
                },
            ],
        }
    }

    #[test]
    fn horizon_zero_is_empty() {
        let mut s = tiny_scenario();
        s.horizon = 0;
        let r = run_scenario(&s, &Policy::Unsliced(SchedulerKind::MaxCqi), &ModelSet::default(), 1, Path::new(".")).unwrap();
        assert_eq!(r.total_samples(), 0);
    }

    #[test]
    fn single_backlogged_ue_never_waits() {
        let mut s = tiny_scenario();
        s.ues.truncate(1);
        s.ues[0].count = 1;
        let r = run_scenario(&s, &Policy::Unsliced(SchedulerKind::Oracle), &ModelSet::default(), 3, Path::new(".")).unwrap();
        assert_eq!(r.ues[0].tsls_violations, 0);
        assert_eq!(r.ues[0].max_tsls, 0);
    }

    #[test]
    fn windex_requires_models() {
        let s = tiny_scenario();
        let err = run_scenario(&s, &Policy::Unsliced(SchedulerKind::Windex), &ModelSet::default(), 1, Path::new("."));
        assert!(matches!(err, Err(SchedError::MissingModel { ue: 0, .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let wrong = WhittleNetwork::new(InputNorm::identity(), &mut rng).with_class(ServiceClass::Xr);
        let models = ModelSet {
            nets: vec![Some(wrong); 3],
        };
        let err = run_scenario(&s, &Policy::Unsliced(SchedulerKind::Windex), &models, 1, Path::new("."));
        assert!(matches!(err, Err(SchedError::ModelClassMismatch { .. })));
    }

    #[test]
    fn budget_holds_every_tti() {
        let s = tiny_scenario();
        for kind in [SchedulerKind::Oracle, SchedulerKind::MaxWeight, SchedulerKind::RoundRobin] {
            run_scenario_traced(&s, &Policy::Unsliced(kind), &ModelSet::default(), 5, Path::new("."), 1, |rec| {
                let used: u32 = rec.grants.iter().map(|&g| s.rb_profile.rbs(g)).sum();
                assert!(used <= s.total_rbgs);
                assert!(rec.grants.iter().filter(|&&g| g == Grant::High).count() <= s.top_r() as usize);
            })
            .unwrap();
        }
    }

    #[test]
    fn slice_shares_must_cover_budget() {
        let s = tiny_scenario();
        let cfg = SliceConfig {
            slices: vec![Slice {
                name: "all".into(),
                classes: vec![ServiceClass::Embb, ServiceClass::Urllc],
                rbgs: 16,
                scheduler: SchedulerKind::RoundRobin,
                top_r: None,
            }],
        };
        assert!(cfg.validate(&s).is_err());
        let cfg = SliceConfig {
            slices: vec![Slice {
                name: "embb".into(),
                classes: vec![ServiceClass::Embb],
                rbgs: 17,
                scheduler: SchedulerKind::RoundRobin,
                top_r: None,
            }],
        };
        assert!(cfg.validate(&s).is_err());
    }

    #[test]
    fn percentiles() {
        let p = Percentiles::from_samples((1..=100).map(|x| x as f64).collect());
        assert_eq!(p.p50_us, 50.0);
        assert_eq!(p.p99_us, 99.0);
        assert_eq!(p.max_us, 100.0);
    }
}
