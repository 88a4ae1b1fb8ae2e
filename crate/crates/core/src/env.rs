//! TTI-level downlink environment: per-UE queues, traffic sources, CQI
//! processes and the CQI/RB capacity map.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CQI_MIN: u8 = 1;
pub const CQI_MAX: u8 = 15;
/// Bytes per TTI carried by 1 Mbps at a 1 ms TTI.
pub const BYTES_PER_TTI_PER_MBPS: f64 = 125.0;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: no column `{column}` in header")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: trace has no rows")]
    EmptyTrace { path: PathBuf },
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> EnvError {
    EnvError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// SplitMix64 mix of a base seed with a sequence of tags. Used to give every
/// UE and every random source its own independent stream.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut x = base;
    for &t in tags {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

// ---------------------------------------------------------------------------
// Service classes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceClass {
    Embb,
    Urllc,
    Mmtc,
    Xr,
}

impl ServiceClass {
    pub const ALL: [ServiceClass; 4] = [Self::Embb, Self::Urllc, Self::Mmtc, Self::Xr];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Embb => "embb",
            Self::Urllc => "urllc",
            Self::Mmtc => "mmtc",
            Self::Xr => "xr",
        }
    }

    /// Default traffic, bounds and reward weights for the class.
    pub fn default_spec(self) -> ServiceClassSpec {
        let (traffic, tsls_bound_l, weights) = match self {
            Self::Embb => (
                TrafficModel::ConstantBitrate { rate_mbps: 5.8 },
                50,
                [0.2, 0.6, 0.2],
            ),
            Self::Xr => (
                TrafficModel::ConstantBitrate { rate_mbps: 6.2 },
                4,
                [0.2, 0.6, 0.2],
            ),
            Self::Urllc => (
                TrafficModel::Bursty {
                    rate_mbps: 2.0,
                    burst_prob: 0.01,
                    burst_bytes: None,
                },
                4,
                [0.2, 0.2, 0.6],
            ),
            Self::Mmtc => (
                TrafficModel::Bursty {
                    rate_mbps: 3.5,
                    burst_prob: 0.01,
                    burst_bytes: None,
                },
                100,
                [0.2, 0.2, 0.6],
            ),
        };
        ServiceClassSpec {
            class: self,
            traffic,
            tpt_bound_b: 0.9,
            tsls_bound_l,
            weights: RewardWeights::from(weights),
        }
    }
}

impl fmt::Display for ServiceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ServiceClass {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "embb" => Ok(Self::Embb),
            "urllc" => Ok(Self::Urllc),
            "mmtc" => Ok(Self::Mmtc),
            "xr" => Ok(Self::Xr),
            other => Err(invalid("class", format!("unknown service class `{other}`"))),
        }
    }
}

/// `(w_r, w_tpt, w_tsls)`, written as a three-element array in configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct RewardWeights {
    pub w_r: f64,
    pub w_tpt: f64,
    pub w_tsls: f64,
}

impl From<[f64; 3]> for RewardWeights {
    fn from(w: [f64; 3]) -> Self {
        Self {
            w_r: w[0],
            w_tpt: w[1],
            w_tsls: w[2],
        }
    }
}

impl From<RewardWeights> for [f64; 3] {
    fn from(w: RewardWeights) -> Self {
        [w.w_r, w.w_tpt, w.w_tsls]
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), EnvError> {
        let w = [self.w_r, self.w_tpt, self.w_tsls];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(invalid("weights", "entries must be finite and non-negative"));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid("weights", format!("must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceClassSpec {
    pub class: ServiceClass,
    pub traffic: TrafficModel,
    /// Throughput target as a fraction of the high-action throughput.
    pub tpt_bound_b: f64,
    /// Largest tolerated TSLS, in TTIs.
    pub tsls_bound_l: u32,
    pub weights: RewardWeights,
}

impl ServiceClassSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.traffic.validate()?;
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.tpt_bound_b) {
            return Err(invalid("tpt_bound_b", "must lie in [0, 1]"));
        }
        if self.tsls_bound_l == 0 {
            return Err(invalid("tsls_bound_l", "must be at least 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Traffic

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrafficModel {
    ConstantBitrate {
        rate_mbps: f64,
    },
    /// One burst with probability `burst_prob` per TTI. Without an explicit
    /// size, bursts carry `rate / burst_prob` so the mean rate is `rate_mbps`.
    Bursty {
        rate_mbps: f64,
        burst_prob: f64,
        #[serde(default)]
        burst_bytes: Option<u64>,
    },
}

impl TrafficModel {
    pub fn validate(&self) -> Result<(), EnvError> {
        match *self {
            Self::ConstantBitrate { rate_mbps } => {
                if !(rate_mbps >= 0.0 && rate_mbps.is_finite()) {
                    return Err(invalid("rate_mbps", "must be finite and non-negative"));
                }
            }
            Self::Bursty {
                rate_mbps,
                burst_prob,
                ..
            } => {
                if !(rate_mbps >= 0.0 && rate_mbps.is_finite()) {
                    return Err(invalid("rate_mbps", "must be finite and non-negative"));
                }
                if !(burst_prob > 0.0 && burst_prob <= 1.0) {
                    return Err(invalid("burst_prob", "must lie in (0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn rate_mbps(&self) -> f64 {
        match *self {
            Self::ConstantBitrate { rate_mbps } | Self::Bursty { rate_mbps, .. } => rate_mbps,
        }
    }

    /// Mean arrivals per TTI in bytes.
    pub fn mean_bytes_per_tti(&self) -> f64 {
        match *self {
            Self::ConstantBitrate { rate_mbps } => rate_mbps * BYTES_PER_TTI_PER_MBPS,
            Self::Bursty { burst_prob, .. } => burst_prob * self.burst_size() as f64,
        }
    }

    fn burst_size(&self) -> u64 {
        match *self {
            Self::ConstantBitrate { .. } => 0,
            Self::Bursty {
                rate_mbps,
                burst_prob,
                burst_bytes,
            } => burst_bytes
                .unwrap_or_else(|| (rate_mbps * BYTES_PER_TTI_PER_MBPS / burst_prob).round() as u64),
        }
    }
}

const MICRO: u64 = 1_000_000;

/// Arrival generator. Constant-bitrate sources keep a fractional carry in
/// micro-bytes so fractional per-TTI rates are delivered exactly on average.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSource {
    model: TrafficModel,
    per_tti_micro: u64,
    carry_micro: u64,
    burst_bytes: u64,
}

impl TrafficSource {
    pub fn new(model: TrafficModel) -> Self {
        let per_tti_micro = match model {
            TrafficModel::ConstantBitrate { rate_mbps } => {
                (rate_mbps * BYTES_PER_TTI_PER_MBPS * MICRO as f64).round() as u64
            }
            TrafficModel::Bursty { .. } => 0,
        };
        let burst_bytes = model.burst_size();
        Self {
            model,
            per_tti_micro,
            carry_micro: 0,
            burst_bytes,
        }
    }

    pub fn model(&self) -> &TrafficModel {
        &self.model
    }

    /// Bytes arriving in the next TTI. Bursty sources draw exactly one
    /// uniform per call.
    pub fn arrivals<R: Rng>(&mut self, rng: &mut R) -> u64 {
        match self.model {
            TrafficModel::ConstantBitrate { .. } => {
                self.carry_micro += self.per_tti_micro;
                let out = self.carry_micro / MICRO;
                self.carry_micro %= MICRO;
                out
            }
            TrafficModel::Bursty { burst_prob, .. } => {
                if rng.random::<f64>() < burst_prob {
                    self.burst_bytes
                } else {
                    0
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Channel

/// A CQI trace held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub values: Arc<[u8]>,
    /// Entries that were outside `[1, 15]` and got clamped.
    pub clamped: usize,
}

fn parse_trace_reader<R: std::io::Read>(
    reader: R,
    path: &Path,
    column: &str,
) -> Result<Trace, EnvError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |line: u64, message: String| EnvError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| EnvError::MissingColumn {
            path: path.to_path_buf(),
            column: column.to_string(),
        })?;
    let mut values = Vec::new();
    let mut clamped = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = rec
            .get(idx)
            .ok_or_else(|| parse_err(line, format!("missing field for `{column}`")))?;
        let raw: i64 = field
            .parse()
            .map_err(|_| parse_err(line, format!("CQI `{field}` is not an integer")))?;
        let cqi = raw.clamp(CQI_MIN as i64, CQI_MAX as i64) as u8;
        if cqi as i64 != raw {
            clamped += 1;
        }
        values.push(cqi);
    }
    if values.is_empty() {
        return Err(EnvError::EmptyTrace {
            path: path.to_path_buf(),
        });
    }
    Ok(Trace {
        values: values.into(),
        clamped,
    })
}

/// Reads one column of a CSV trace: header row of column names, one integer
/// CQI per row and TTI. Out-of-range values are clamped and counted.
pub fn load_trace(path: &Path, column: &str) -> Result<Trace, EnvError> {
    let file = std::fs::File::open(path).map_err(|source| EnvError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_trace_reader(file, path, column)
}

/// Loads the same column from several files and concatenates them in order.
pub fn load_trace_concat<P: AsRef<Path>>(paths: &[P], column: &str) -> Result<Trace, EnvError> {
    if paths.is_empty() {
        return Err(invalid("files", "at least one trace file is required"));
    }
    let mut values = Vec::new();
    let mut clamped = 0;
    for p in paths {
        let t = load_trace(p.as_ref(), column)?;
        values.extend_from_slice(&t.values);
        clamped += t.clamped;
    }
    Ok(Trace {
        values: values.into(),
        clamped,
    })
}

/// Channel description as it appears in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSpec {
    /// Replay of one column; several files are concatenated in order.
    Trace { files: Vec<PathBuf>, column: String },
    RandomWalk {
        cqi_min: u8,
        cqi_max: u8,
        step_prob: f64,
    },
    Constant { cqi: u8 },
}

impl Default for ChannelSpec {
    fn default() -> Self {
        Self::RandomWalk {
            cqi_min: 5,
            cqi_max: 15,
            step_prob: 0.2,
        }
    }
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let in_range = |c: u8| (CQI_MIN..=CQI_MAX).contains(&c);
        match self {
            Self::Trace { files, column } => {
                if files.is_empty() || column.is_empty() {
                    return Err(invalid("channel", "trace needs files and a column"));
                }
            }
            Self::RandomWalk {
                cqi_min,
                cqi_max,
                step_prob,
            } => {
                if !(in_range(*cqi_min) && in_range(*cqi_max) && cqi_min <= cqi_max) {
                    return Err(invalid("channel", "need 1 <= cqi_min <= cqi_max <= 15"));
                }
                if !(0.0..=1.0).contains(step_prob) {
                    return Err(invalid("step_prob", "must lie in [0, 1]"));
                }
            }
            Self::Constant { cqi } => {
                if !in_range(*cqi) {
                    return Err(invalid("cqi", "must lie in [1, 15]"));
                }
            }
        }
        Ok(())
    }

    /// Builds the process. Trace paths are resolved against `base_dir`; a
    /// random walk draws its starting CQI from `rng`.
    pub fn build<R: Rng>(&self, base_dir: &Path, rng: &mut R) -> Result<ChannelProcess, EnvError> {
        self.validate()?;
        Ok(match self {
            Self::Trace { files, column } => {
                let paths: Vec<PathBuf> = files.iter().map(|f| base_dir.join(f)).collect();
                ChannelProcess::from_trace(load_trace_concat(&paths, column)?)
            }
            Self::RandomWalk {
                cqi_min,
                cqi_max,
                step_prob,
            } => {
                let start = rng.random_range(*cqi_min..=*cqi_max);
                ChannelProcess::random_walk(*cqi_min, *cqi_max, *step_prob, start)
            }
            Self::Constant { cqi } => ChannelProcess::constant(*cqi),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Source {
    Trace { trace: Arc<[u8]>, pos: usize },
    RandomWalk { lo: u8, hi: u8, step_prob: f64 },
    Constant,
}

/// CQI process advanced once per TTI.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelProcess {
    source: Source,
    current: u8,
}

impl ChannelProcess {
    pub fn constant(cqi: u8) -> Self {
        Self {
            source: Source::Constant,
            current: cqi.clamp(CQI_MIN, CQI_MAX),
        }
    }

    /// Moves ±1 with probability `step_prob` per TTI, reflecting at the bounds.
    pub fn random_walk(lo: u8, hi: u8, step_prob: f64, start: u8) -> Self {
        let lo = lo.clamp(CQI_MIN, CQI_MAX);
        let hi = hi.clamp(lo, CQI_MAX);
        Self {
            source: Source::RandomWalk { lo, hi, step_prob },
            current: start.clamp(lo, hi),
        }
    }

    pub fn from_trace(trace: Trace) -> Self {
        let current = trace.values[0];
        Self {
            source: Source::Trace {
                trace: trace.values,
                pos: 0,
            },
            current,
        }
    }

    pub fn cqi(&self) -> u8 {
        self.current
    }

    /// Re-randomizes the starting point: a random walk restarts at a uniform
    /// CQI in its range, a trace at a uniform offset.
    pub fn restart<R: Rng>(&mut self, rng: &mut R) {
        match &mut self.source {
            Source::Trace { trace, pos } => {
                *pos = rng.random_range(0..trace.len());
                self.current = trace[*pos];
            }
            Source::RandomWalk { lo, hi, .. } => {
                self.current = rng.random_range(*lo..=*hi);
            }
            Source::Constant => {}
        }
    }

    /// Random walks draw two uniforms per call; other sources draw nothing.
    pub fn advance<R: Rng>(&mut self, rng: &mut R) -> u8 {
        match &mut self.source {
            Source::Trace { trace, pos } => {
                *pos = (*pos + 1) % trace.len();
                self.current = trace[*pos];
            }
            Source::RandomWalk { lo, hi, step_prob } => {
                let step = rng.random::<f64>() < *step_prob;
                let up = rng.random::<bool>();
                if step && lo != hi {
                    let c = self.current as i16 + if up { 1 } else { -1 };
                    self.current = if c > *hi as i16 {
                        *hi - 1
                    } else if c < *lo as i16 {
                        *lo + 1
                    } else {
                        c as u8
                    };
                }
            }
            Source::Constant => {}
        }
        self.current
    }
}

// ---------------------------------------------------------------------------
// Capacity

/// 3GPP CQI table spectral efficiencies (bits per symbol), CQI 1..=15.
const SPECTRAL_EFFICIENCY: [f64; 15] = [
    0.1523, 0.2344, 0.3770, 0.6016, 0.8770, 1.1758, 1.4766, 1.9141, 2.4063, 2.7305, 3.3223,
    3.9023, 4.5234, 5.1152, 5.5547,
];

/// Per-RB capacity in bytes per TTI, Gaussian with a per-CQI mean and sigma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityTable {
    pub mean_bytes_per_rb: Vec<f64>,
    pub sigma_bytes_per_rb: Vec<f64>,
}

impl Default for CapacityTable {
    /// Spectral efficiencies scaled so CQI 15 on 9 RBs carries 6.5 Mbps, with
    /// sigma at 5% of the mean.
    fn default() -> Self {
        let top = 6.5 * BYTES_PER_TTI_PER_MBPS / 9.0;
        let mean: Vec<f64> = SPECTRAL_EFFICIENCY
            .iter()
            .map(|e| e / SPECTRAL_EFFICIENCY[14] * top)
            .collect();
        let sigma = mean.iter().map(|m| 0.05 * m).collect();
        Self {
            mean_bytes_per_rb: mean,
            sigma_bytes_per_rb: sigma,
        }
    }
}

impl CapacityTable {
    pub fn deterministic() -> Self {
        let mut t = Self::default();
        t.sigma_bytes_per_rb.iter_mut().for_each(|s| *s = 0.0);
        t
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.mean_bytes_per_rb.len() != 15 || self.sigma_bytes_per_rb.len() != 15 {
            return Err(invalid("capacity", "need 15 mean and 15 sigma entries"));
        }
        let ok = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x >= 0.0);
        if !ok(&self.mean_bytes_per_rb) || !ok(&self.sigma_bytes_per_rb) {
            return Err(invalid("capacity", "entries must be finite and non-negative"));
        }
        if self.mean_bytes_per_rb.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("capacity", "means must be non-decreasing in CQI"));
        }
        Ok(())
    }

    fn slot(cqi: u8) -> usize {
        (cqi.clamp(CQI_MIN, CQI_MAX) - 1) as usize
    }

    pub fn mean(&self, cqi: u8, rbs: u32) -> f64 {
        self.mean_bytes_per_rb[Self::slot(cqi)] * rbs as f64
    }

    /// `max(0, N(mean·rbs, sigma·rbs))` rounded to whole bytes. Exactly one
    /// normal draw per call, whatever `rbs` is.
    pub fn sample<R: Rng>(&self, cqi: u8, rbs: u32, rng: &mut R) -> u64 {
        let z: f64 = rng.sample(StandardNormal);
        let i = Self::slot(cqi);
        let x = (self.mean_bytes_per_rb[i] + self.sigma_bytes_per_rb[i] * z) * rbs as f64;
        x.max(0.0).round() as u64
    }
}

// ---------------------------------------------------------------------------
// UE state and step

/// Observable per-UE state, also the index-network input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UeState {
    pub buffer_bytes: u64,
    pub cqi: u8,
    pub tsls: u32,
    pub v_tpt: f64,
    pub v_tsls: f64,
}

impl UeState {
    pub fn new(cqi: u8) -> Self {
        Self {
            buffer_bytes: 0,
            cqi,
            tsls: 0,
            v_tpt: 0.0,
            v_tsls: 0.0,
        }
    }

    /// `[buffer, cqi, tsls, v_tpt, v_tsls]` in raw units.
    pub fn features(&self) -> [f64; 5] {
        [
            self.buffer_bytes as f64,
            self.cqi as f64,
            self.tsls as f64,
            self.v_tpt,
            self.v_tsls,
        ]
    }
}

/// What happened to one UE in one TTI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub served_bytes: u64,
    pub arrivals: u64,
    /// Queue before service.
    pub buffer_before: u64,
    /// CQI the grant was served at.
    pub cqi: u8,
    pub rbs: u32,
    pub high: bool,
}

impl StepOutcome {
    pub fn tpt_mbps(&self) -> f64 {
        self.served_bytes as f64 / BYTES_PER_TTI_PER_MBPS
    }
}

/// Independent random streams of one UE, so that different policies see the
/// same channel and traffic realizations.
#[derive(Debug, Clone)]
pub struct UeRngs {
    pub channel: ChaCha8Rng,
    pub traffic: ChaCha8Rng,
    pub capacity: ChaCha8Rng,
}

impl UeRngs {
    pub fn new(seed: u64, ue: u64) -> Self {
        let s = |k| ChaCha8Rng::seed_from_u64(derive_seed(seed, &[ue, k]));
        Self {
            channel: s(0),
            traffic: s(1),
            capacity: s(2),
        }
    }
}

/// Advances one UE by a TTI: serve `min(buffer, capacity)`, add arrivals,
/// update TSLS (reset only on the high grant) and move the channel.
pub fn step_ue(
    ue: &mut UeState,
    channel: &mut ChannelProcess,
    traffic: &mut TrafficSource,
    rbs_granted: u32,
    high: bool,
    capacity: &CapacityTable,
    rngs: &mut UeRngs,
) -> StepOutcome {
    let buffer_before = ue.buffer_bytes;
    let cqi = ue.cqi;
    let cap = capacity.sample(cqi, rbs_granted, &mut rngs.capacity);
    let served = buffer_before.min(cap);
    let arrivals = traffic.arrivals(&mut rngs.traffic);
    ue.buffer_bytes = buffer_before - served + arrivals;
    ue.tsls = if high { 0 } else { ue.tsls.saturating_add(1) };
    ue.cqi = channel.advance(&mut rngs.channel);
    StepOutcome {
        served_bytes: served,
        arrivals,
        buffer_before,
        cqi,
        rbs: rbs_granted,
        high,
    }
}

/// A UE with everything needed to step it.
#[derive(Debug, Clone)]
pub struct UeSim {
    pub spec: ServiceClassSpec,
    pub state: UeState,
    pub channel: ChannelProcess,
    pub traffic: TrafficSource,
    pub rngs: UeRngs,
}

impl UeSim {
    pub fn new(spec: ServiceClassSpec, channel: ChannelProcess, rngs: UeRngs) -> Self {
        let traffic = TrafficSource::new(spec.traffic.clone());
        let state = UeState::new(channel.cqi());
        Self {
            spec,
            state,
            channel,
            traffic,
            rngs,
        }
    }

    pub fn step(&mut self, rbs: u32, high: bool, capacity: &CapacityTable) -> StepOutcome {
        step_ue(
            &mut self.state,
            &mut self.channel,
            &mut self.traffic,
            rbs,
            high,
            capacity,
            &mut self.rngs,
        )
    }
}
