//! The index network `f_θ`: 5 → 32 → 8 → 1, tanh hidden layers, linear head,
//! hand-written backprop and Adam.
//!
//! Parameters live in one flat vector laid out as
//!
//! ```text
//! W1 [32 x 5]  row-major (output, input)     0 ..160
//! b1 [32]                                   160..192
//! W2 [8 x 32]  row-major                    192..448
//! b2 [8]                                    448..456
//! W3 [1 x 8]                                456..464
//! b3 [1]                                    464..465
//! ```
//!
//! Gradients and Adam moments use the same layout.
//!
//! # Model file
//!
//! UTF-8 text, one token group per line:
//!
//! ```text
//! windex-net v1
//! class <embb|urllc|mmtc|xr|none>
//! norm <buffer_scale> <tsls_scale>
//! shapes 5 32 8 1
//! params 465
//! <465 lines, one parameter each, in the layout above>
//! adam <step>            (optional block)
//! <465 lines of first moments>
//! <465 lines of second moments>
//! end
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so save and load
//! reproduce every bit.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{ServiceClass, CQI_MAX};

pub const INPUT_DIM: usize = 5;
pub const HIDDEN1: usize = 32;
pub const HIDDEN2: usize = 8;
pub const NUM_PARAMS: usize =
    INPUT_DIM * HIDDEN1 + HIDDEN1 + HIDDEN1 * HIDDEN2 + HIDDEN2 + HIDDEN2 + 1;

const W1: usize = 0;
const B1: usize = W1 + INPUT_DIM * HIDDEN1;
const W2: usize = B1 + HIDDEN1;
const B2: usize = W2 + HIDDEN1 * HIDDEN2;
const W3: usize = B2 + HIDDEN2;
const B3: usize = W3 + HIDDEN2;

pub const DEFAULT_M: f64 = 5.0;
/// Probabilities are kept this far from 0 and 1.
pub const PROB_CLAMP: f64 = 1e-12;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

const MAGIC: &str = "windex-net v1";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("non-finite input feature {index}: {value}")]
    NonFiniteInput { index: usize, value: f64 },
    #[error("non-finite gradient entry {index}")]
    NonFiniteGradient { index: usize },
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("model file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Divisors applied to the raw `[buffer, cqi, tsls, v_tpt, v_tsls]` features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub buffer_scale: f64,
    pub tsls_scale: f64,
}

impl InputNorm {
    pub fn new(max_queue_bytes: f64, tsls_bound: f64) -> Self {
        Self {
            buffer_scale: max_queue_bytes,
            tsls_scale: tsls_bound,
        }
    }

    pub fn identity() -> Self {
        Self {
            buffer_scale: 1.0,
            tsls_scale: 1.0,
        }
    }

    pub fn apply(&self, x: &[f64; INPUT_DIM]) -> [f64; INPUT_DIM] {
        [
            x[0] / self.buffer_scale,
            x[1] / CQI_MAX as f64,
            x[2] / self.tsls_scale,
            x[3],
            x[4],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    fn new() -> Self {
        Self {
            m: vec![0.0; NUM_PARAMS],
            v: vec![0.0; NUM_PARAMS],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhittleNetwork {
    pub class: Option<ServiceClass>,
    pub norm: InputNorm,
    params: Vec<f64>,
    pub adam: AdamState,
}

/// Hidden activations kept from a forward pass for backprop.
struct Activations {
    x: [f64; INPUT_DIM],
    h1: [f64; HIDDEN1],
    h2: [f64; HIDDEN2],
    out: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ_m(index − λ)`, clamped to `[1e-12, 1 − 1e-12]`.
pub fn action_prob(index: f64, lambda: f64, m: f64) -> f64 {
    sigmoid(m * (index - lambda)).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

impl WhittleNetwork {
    /// Xavier-uniform hidden layers, zero biases and a zero output layer.
    pub fn new<R: Rng>(norm: InputNorm, rng: &mut R) -> Self {
        let mut params = vec![0.0; NUM_PARAMS];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.random_range(-limit..=limit);
            }
        };
        fill(W1..B1, INPUT_DIM, HIDDEN1);
        fill(W2..B2, HIDDEN1, HIDDEN2);
        Self {
            class: None,
            norm,
            params,
            adam: AdamState::new(),
        }
    }

    pub fn from_params(norm: InputNorm, params: Vec<f64>) -> Result<Self, NetError> {
        if params.len() != NUM_PARAMS {
            return Err(NetError::Length {
                expected: NUM_PARAMS,
                got: params.len(),
            });
        }
        Ok(Self {
            class: None,
            norm,
            params,
            adam: AdamState::new(),
        })
    }

    pub fn with_class(mut self, class: ServiceClass) -> Self {
        self.class = Some(class);
        self
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn max_abs_param(&self) -> f64 {
        self.params.iter().fold(0.0, |a, p| a.max(p.abs()))
    }

    fn check(x: &[f64; INPUT_DIM]) -> Result<(), NetError> {
        match x.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(NetError::NonFiniteInput {
                index,
                value: x[index],
            }),
            None => Ok(()),
        }
    }

    fn activations(&self, raw: &[f64; INPUT_DIM]) -> Activations {
        let p = &self.params;
        let x = self.norm.apply(raw);
        let mut h1 = [0.0; HIDDEN1];
        for (j, h) in h1.iter_mut().enumerate() {
            let row = &p[W1 + j * INPUT_DIM..W1 + (j + 1) * INPUT_DIM];
            let z: f64 = p[B1 + j] + row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>();
            *h = z.tanh();
        }
        let mut h2 = [0.0; HIDDEN2];
        for (k, h) in h2.iter_mut().enumerate() {
            let row = &p[W2 + k * HIDDEN1..W2 + (k + 1) * HIDDEN1];
            let z: f64 = p[B2 + k] + row.iter().zip(&h1).map(|(w, a)| w * a).sum::<f64>();
            *h = z.tanh();
        }
        let out = p[B3] + p[W3..B3].iter().zip(&h2).map(|(w, a)| w * a).sum::<f64>();
        Activations { x, h1, h2, out }
    }

    /// Index for raw (un-normalized) features.
    pub fn forward(&self, raw: &[f64; INPUT_DIM]) -> Result<f64, NetError> {
        Self::check(raw)?;
        Ok(self.activations(raw).out)
    }

    /// Output and `∂f/∂θ` in the flat layout.
    pub fn forward_grad(&self, raw: &[f64; INPUT_DIM]) -> Result<(f64, Vec<f64>), NetError> {
        Self::check(raw)?;
        let a = self.activations(raw);
        let mut g = vec![0.0; NUM_PARAMS];
        self.backprop(&a, 1.0, &mut g);
        Ok((a.out, g))
    }

    /// Adds `scale · ∂f/∂θ` into `grad`.
    fn backprop(&self, a: &Activations, scale: f64, grad: &mut [f64]) {
        let p = &self.params;
        grad[B3] += scale;
        let mut d2 = [0.0; HIDDEN2];
        for k in 0..HIDDEN2 {
            grad[W3 + k] += scale * a.h2[k];
            d2[k] = scale * p[W3 + k] * (1.0 - a.h2[k] * a.h2[k]);
        }
        let mut d1 = [0.0; HIDDEN1];
        for k in 0..HIDDEN2 {
            grad[B2 + k] += d2[k];
            let base = W2 + k * HIDDEN1;
            for j in 0..HIDDEN1 {
                grad[base + j] += d2[k] * a.h1[j];
                d1[j] += d2[k] * p[base + j];
            }
        }
        for j in 0..HIDDEN1 {
            let dj = d1[j] * (1.0 - a.h1[j] * a.h1[j]);
            grad[B1 + j] += dj;
            let base = W1 + j * INPUT_DIM;
            for i in 0..INPUT_DIM {
                grad[base + i] += dj * a.x[i];
            }
        }
    }

    /// Adds `∇_θ ln π(action)` into `acc`, where `π(1) = σ_m(f − λ)`.
    /// Returns the probability of the high action.
    pub fn logprob_grad(
        &self,
        raw: &[f64; INPUT_DIM],
        lambda: f64,
        m: f64,
        action: u8,
        acc: &mut PolicyGradAccumulator,
    ) -> Result<f64, NetError> {
        Self::check(raw)?;
        let a = self.activations(raw);
        let p = action_prob(a.out, lambda, m);
        self.backprop(&a, score_coefficient(p, m, action), &mut acc.grad);
        Ok(p)
    }

    /// Adam update applied as ascent along `grad`. Nothing changes if any
    /// entry of `grad` is not finite.
    pub fn adam_step(&mut self, grad: &[f64], lr: f64) -> Result<(), NetError> {
        if grad.len() != NUM_PARAMS {
            return Err(NetError::Length {
                expected: NUM_PARAMS,
                got: grad.len(),
            });
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(NetError::NonFiniteGradient { index });
        }
        let st = &mut self.adam;
        st.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(st.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(st.step as i32);
        for i in 0..NUM_PARAMS {
            st.m[i] = ADAM_BETA1 * st.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            st.v[i] = ADAM_BETA2 * st.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let mhat = st.m[i] / bc1;
            let vhat = st.v[i] / bc2;
            self.params[i] += lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut out: W, with_adam: bool) -> std::io::Result<()> {
        writeln!(out, "{MAGIC}")?;
        let class = self.class.map_or("none", |c| c.as_str());
        writeln!(out, "class {class}")?;
        writeln!(out, "norm {} {}", self.norm.buffer_scale, self.norm.tsls_scale)?;
        writeln!(out, "shapes {INPUT_DIM} {HIDDEN1} {HIDDEN2} 1")?;
        writeln!(out, "params {NUM_PARAMS}")?;
        for p in &self.params {
            writeln!(out, "{p}")?;
        }
        if with_adam {
            writeln!(out, "adam {}", self.adam.step)?;
            for x in self.adam.m.iter().chain(&self.adam.v) {
                writeln!(out, "{x}")?;
            }
        }
        writeln!(out, "end")
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self, NetError> {
        let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String), NetError> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l.trim().to_string())),
                Some((n, Err(e))) => Err(NetError::Format {
                    line: n,
                    message: e.to_string(),
                }),
                None => Err(NetError::Format {
                    line: 0,
                    message: format!("unexpected end of file, expected {what}"),
                }),
            }
        };
        let fmt_err = |line: usize, message: String| NetError::Format { line, message };
        let num = |line: usize, s: &str| -> Result<f64, NetError> {
            s.parse::<f64>()
                .map_err(|_| fmt_err(line, format!("`{s}` is not a number")))
        };

        let (n, l) = next("header")?;
        if l != MAGIC {
            return Err(fmt_err(n, format!("expected `{MAGIC}`, got `{l}`")));
        }
        let (n, l) = next("class")?;
        let class = match l.strip_prefix("class ") {
            Some("none") => None,
            Some(c) => Some(
                c.parse::<ServiceClass>()
                    .map_err(|e| fmt_err(n, e.to_string()))?,
            ),
            None => return Err(fmt_err(n, "expected `class`".into())),
        };
        let (n, l) = next("norm")?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "norm" {
            return Err(fmt_err(n, "expected `norm <buffer_scale> <tsls_scale>`".into()));
        }
        let norm = InputNorm {
            buffer_scale: num(n, parts[1])?,
            tsls_scale: num(n, parts[2])?,
        };
        let (n, l) = next("shapes")?;
        let want = format!("shapes {INPUT_DIM} {HIDDEN1} {HIDDEN2} 1");
        if l != want {
            return Err(fmt_err(n, format!("unsupported shapes `{l}`")));
        }
        let (n, l) = next("params")?;
        if l != format!("params {NUM_PARAMS}") {
            return Err(fmt_err(n, format!("expected `params {NUM_PARAMS}`")));
        }
        let read_vec = |next: &mut dyn FnMut(&str) -> Result<(usize, String), NetError>| {
            (0..NUM_PARAMS)
                .map(|_| {
                    let (n, l) = next("number")?;
                    num(n, &l)
                })
                .collect::<Result<Vec<f64>, NetError>>()
        };
        let params = read_vec(&mut next)?;
        let mut adam = AdamState::new();
        let (n, l) = next("`adam` or `end`")?;
        if let Some(step) = l.strip_prefix("adam ") {
            adam.step = step
                .parse()
                .map_err(|_| fmt_err(n, format!("bad adam step `{step}`")))?;
            adam.m = read_vec(&mut next)?;
            adam.v = read_vec(&mut next)?;
            let (n, l) = next("end")?;
            if l != "end" {
                return Err(fmt_err(n, "expected `end`".into()));
            }
        } else if l != "end" {
            return Err(fmt_err(n, "expected `adam` or `end`".into()));
        }
        Ok(Self {
            class,
            norm,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path, with_adam: bool) -> Result<(), NetError> {
        let io = |source| NetError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w, with_adam).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let file = std::fs::File::open(path).map_err(|source| NetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// `d ln π(action) / d f`: `(1 − p)·m` for the high action, `−p·m` for the low.
pub fn score_coefficient(p: f64, m: f64, action: u8) -> f64 {
    if action == 1 {
        (1.0 - p) * m
    } else {
        -p * m
    }
}

/// Per-episode sum of score-function gradients, flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradAccumulator {
    pub grad: Vec<f64>,
}

impl Default for PolicyGradAccumulator {
    fn default() -> Self {
        Self {
            grad: vec![0.0; NUM_PARAMS],
        }
    }
}

impl PolicyGradAccumulator {
    pub fn zero(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.grad.iter().all(|g| g.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}
