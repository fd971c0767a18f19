//! Backward dynamic programming and piecewise-linear value function approximation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fluid::OpsModel;
use crate::instance::Fleet;
use crate::mdp::{self, action_space, marginals, resignation_at, total_cost, FleetState, MdpError};

#[derive(Debug, Error)]
pub enum DpError {
    #[error("empty search range [{lo}, {hi}]")]
    EmptyRange { lo: i64, hi: i64 },
    #[error("index {idx} out of range for {len} slopes")]
    IndexOutOfRange { idx: usize, len: usize },
    #[error("{states} states per layer exceed the enumeration limit of {limit}")]
    StateSpaceTooLarge { states: u128, limit: u128 },
    #[error("unsupported file: {0}")]
    Format(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<crate::fluid::FluidError> for DpError {
    fn from(e: crate::fluid::FluidError) -> Self {
        DpError::Mdp(MdpError::Fluid(e))
    }
}

// ---------------------------------------------------------------------------
// Convex integer search

/// Smallest minimizer of a convex function over the integers in `[lo, hi]`,
/// found by bisection on the sign of forward differences.
pub fn try_convex_int_argmin<E>(mut f: impl FnMut(i64) -> Result<f64, E>, lo: i64, hi: i64) -> Result<(i64, f64), E> {
    let mut memo: Vec<(i64, f64)> = Vec::with_capacity(48);
    let mut eval = |x: i64| -> Result<f64, E> {
        if let Some(&(_, v)) = memo.iter().find(|p| p.0 == x) {
            return Ok(v);
        }
        let v = f(x)?;
        memo.push((x, v));
        Ok(v)
    };
    let (mut l, mut r) = (lo, hi);
    while l < r {
        let mid = l + (r - l) / 2;
        let a = eval(mid)?;
        let b = eval(mid + 1)?;
        // Differences within rounding noise count as flat so ties go left.
        if b - a >= -1e-10 * a.abs().max(b.abs()).max(1.0) {
            r = mid;
        } else {
            l = mid + 1;
        }
    }
    Ok((l, eval(l)?))
}

pub fn convex_int_argmin(mut f: impl FnMut(i64) -> f64, lo: i64, hi: i64) -> Result<(i64, f64), DpError> {
    if lo > hi {
        return Err(DpError::EmptyRange { lo, hi });
    }
    try_convex_int_argmin(|x| Ok::<f64, DpError>(f(x)), lo, hi)
}

// ---------------------------------------------------------------------------
// Backward dynamic programming

const VALUE_FORMAT: &str = "crowdfleet-value-table";
const SLOPE_FORMAT: &str = "crowdfleet-slope-table";
const FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub format: String,
    pub version: u32,
    pub horizon: usize,
    pub caps: Fleet,
    pub gamma: f64,
    /// `values[t][index(state)]`.
    pub values: Vec<Vec<f64>>,
    pub actions: Vec<Vec<i64>>,
}

impl ValueTable {
    pub fn index(&self, n_fd: u32, n_gw: u32, n_od: u32) -> usize {
        layer_index(self.caps, n_fd, n_gw, n_od)
    }

    pub fn contains(&self, s: FleetState) -> bool {
        s.t <= self.horizon && s.n_fd <= self.caps.fd && s.n_gw <= self.caps.gw && s.n_od <= self.caps.od
    }

    pub fn value(&self, s: FleetState) -> Option<f64> {
        self.contains(s).then(|| self.values[s.t][self.index(s.n_fd, s.n_gw, s.n_od)])
    }

    pub fn action(&self, s: FleetState) -> Option<i64> {
        self.contains(s).then(|| self.actions[s.t][self.index(s.n_fd, s.n_gw, s.n_od)])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("value table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DpError> {
        let table: Self = serde_json::from_str(text).map_err(|e| DpError::Format(e.to_string()))?;
        check_header(&table.format, table.version, VALUE_FORMAT)?;
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<(), DpError> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path) -> Result<Self, DpError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn check_header(format: &str, version: u32, want: &str) -> Result<(), DpError> {
    if format != want {
        return Err(DpError::Format(format!("expected a {want} file, found {format:?}")));
    }
    if version != FILE_VERSION {
        return Err(DpError::Format(format!("{want} version {version} is not supported (expected {FILE_VERSION})")));
    }
    Ok(())
}

fn layer_index(caps: Fleet, n_fd: u32, n_gw: u32, n_od: u32) -> usize {
    ((n_fd as usize * (caps.gw as usize + 1)) + n_gw as usize) * (caps.od as usize + 1) + n_od as usize
}

pub const DEFAULT_STATE_LIMIT: u128 = 2_000_000;

pub fn bdp_solve(ops: &OpsModel) -> Result<ValueTable, DpError> {
    bdp_solve_with_limit(ops, DEFAULT_STATE_LIMIT)
}

/// Exact backward induction over every in-cap state.
pub fn bdp_solve_with_limit(ops: &OpsModel, limit: u128) -> Result<ValueTable, DpError> {
    let inst = ops.instance();
    let caps = inst.strategic.caps;
    let horizon = inst.strategic.horizon;
    let gamma = inst.strategic.gamma;
    let states = (caps.fd as u128 + 1) * (caps.gw as u128 + 1) * (caps.od as u128 + 1);
    if states > limit {
        return Err(DpError::StateSpaceTooLarge { states, limit });
    }
    let size = states as usize;
    let mut values = vec![vec![0.0; size]; horizon + 1];
    let mut actions = vec![vec![0i64; size]; horizon + 1];

    for t in (0..=horizon).rev() {
        let expected = if t < horizon { expected_next(ops, &values[t + 1], t)? } else { vec![0.0; size] };
        for n_fd in 0..=caps.fd {
            for n_gw in 0..=caps.gw {
                for n_od in 0..=caps.od {
                    let s = FleetState::new(n_fd, n_gw, n_od, t);
                    let (lo, hi) = action_space(inst, s);
                    let (a, v) = try_convex_int_argmin(
                        |a| -> Result<f64, DpError> {
                            let post = layer_index(caps, (n_fd as i64 + a) as u32, n_gw, n_od);
                            Ok(total_cost(ops, s, a)?.total() + gamma * expected[post])
                        },
                        lo,
                        hi,
                    )?;
                    let idx = layer_index(caps, n_fd, n_gw, n_od);
                    values[t][idx] = v;
                    actions[t][idx] = a;
                }
            }
        }
    }
    Ok(ValueTable { format: VALUE_FORMAT.into(), version: FILE_VERSION, horizon, caps, gamma, values, actions })
}

/// `E[V_{t+1}]` for every post-decision state of step `t`.
fn expected_next(ops: &OpsModel, next: &[f64], t: usize) -> Result<Vec<f64>, DpError> {
    let inst = ops.instance();
    let caps = inst.strategic.caps;
    let mut out = vec![0.0; next.len()];
    for n_fd in 0..=caps.fd {
        for n_gw in 0..=caps.gw {
            for n_od in 0..=caps.od {
                let post = FleetState::new(n_fd, n_gw, n_od, t);
                let [fd, gw, od] = marginals(inst, post, resignation_at(ops, post)?);
                let mut acc = 0.0;
                for &(a, pa) in &fd {
                    for &(b, pb) in &gw {
                        let row: f64 = od.iter().map(|&(c, pc)| pc * next[layer_index(caps, a, b, c)]).sum();
                        acc += pa * pb * row;
                    }
                }
                out[layer_index(caps, n_fd, n_gw, n_od)] = acc;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Piecewise-linear value function approximation

/// Restores monotone slopes around the updated pair `(idx, idx + 1)`:
/// entries left of `idx` are capped at `z[idx]`, entries right of `idx + 1`
/// are floored at `z[idx + 1]`.
pub fn conv_project(z: &[f64], idx: usize) -> Result<Vec<f64>, DpError> {
    if idx + 1 >= z.len() {
        return Err(DpError::IndexOutOfRange { idx, len: z.len() });
    }
    let mut out = z.to_vec();
    conv_in_place(&mut out, idx);
    Ok(out)
}

fn conv_in_place(z: &mut [f64], idx: usize) {
    let left = z[idx];
    for v in &mut z[..idx] {
        if *v > left {
            *v = left;
        }
    }
    if idx + 1 < z.len() {
        let right = z[idx + 1];
        for v in &mut z[idx + 2..] {
            if *v < right {
                *v = right;
            }
        }
    }
}

pub fn aggregate(n_gw: u32, n_od: u32, k_gw: u32, k_od: u32) -> (u32, u32) {
    (n_gw / k_gw.max(1), n_od / k_od.max(1))
}

/// `(t, aggregated GW count, aggregated OD count)`.
pub type SlopeKey = (usize, u32, u32);

/// Marginal post-decision value of the `k`-th FD per step and aggregated crowd
/// fleet. Index 0 is unused; missing entries read as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeTable {
    pub horizon: usize,
    pub fd_cap: u32,
    pub k_gw: u32,
    pub k_od: u32,
    pub alpha: f64,
    pub slopes: BTreeMap<SlopeKey, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SlopeFile {
    format: String,
    version: u32,
    horizon: usize,
    fd_cap: u32,
    k_gw: u32,
    k_od: u32,
    alpha: f64,
    entries: Vec<SlopeEntry>,
}

#[derive(Serialize, Deserialize)]
struct SlopeEntry {
    t: usize,
    gw: u32,
    od: u32,
    slopes: Vec<f64>,
}

impl SlopeTable {
    pub fn zeros(horizon: usize, fd_cap: u32, k_gw: u32, k_od: u32, alpha: f64) -> Self {
        Self { horizon, fd_cap, k_gw, k_od, alpha, slopes: BTreeMap::new() }
    }

    pub fn key(&self, s: FleetState) -> SlopeKey {
        let (g, o) = aggregate(s.n_gw, s.n_od, self.k_gw, self.k_od);
        (s.t, g, o)
    }

    pub fn slope(&self, key: SlopeKey, k: u32) -> f64 {
        self.slopes.get(&key).and_then(|z| z.get(k as usize)).copied().unwrap_or(0.0)
    }

    /// `sum_{k=1}^{n} v(k)` for `n = 0..=fd_cap`.
    pub fn prefix(&self, key: SlopeKey) -> Vec<f64> {
        let mut out = vec![0.0; self.fd_cap as usize + 1];
        if let Some(z) = self.slopes.get(&key) {
            for k in 1..out.len() {
                out[k] = out[k - 1] + z.get(k).copied().unwrap_or(0.0);
            }
        }
        out
    }

    /// Whether every stored vector is non-decreasing from index 1 on.
    pub fn is_monotone(&self) -> bool {
        self.slopes.values().all(|z| z.iter().skip(1).zip(z.iter().skip(2)).all(|(a, b)| a <= b))
    }

    pub fn to_json(&self) -> String {
        let file = SlopeFile {
            format: SLOPE_FORMAT.into(),
            version: FILE_VERSION,
            horizon: self.horizon,
            fd_cap: self.fd_cap,
            k_gw: self.k_gw,
            k_od: self.k_od,
            alpha: self.alpha,
            entries: self.slopes.iter().map(|(&(t, gw, od), z)| SlopeEntry { t, gw, od, slopes: z.clone() }).collect(),
        };
        serde_json::to_string(&file).expect("slope table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DpError> {
        let file: SlopeFile = serde_json::from_str(text).map_err(|e| DpError::Format(e.to_string()))?;
        check_header(&file.format, file.version, SLOPE_FORMAT)?;
        Ok(Self {
            horizon: file.horizon,
            fd_cap: file.fd_cap,
            k_gw: file.k_gw,
            k_od: file.k_od,
            alpha: file.alpha,
            slopes: file.entries.into_iter().map(|e| ((e.t, e.gw, e.od), e.slopes)).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DpError> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path) -> Result<Self, DpError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Greedy action against the slope table and its estimated value
/// `min_a C_tot(s, a) + sum_{k=1}^{n+a} v_t(k, w)`.
pub fn plvfa_greedy_action(ops: &OpsModel, s: FleetState, table: &SlopeTable) -> Result<(i64, f64), DpError> {
    let prefix = table.prefix(table.key(s));
    let (lo, hi) = action_space(ops.instance(), s);
    try_convex_int_argmin(
        |a| -> Result<f64, DpError> {
            let n = (s.n_fd as i64 + a) as usize;
            Ok(total_cost(ops, s, a)?.total() + prefix.get(n).copied().unwrap_or(prefix[prefix.len() - 1]))
        },
        lo,
        hi,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialState {
    /// Each count uniform over `[0, cap]`.
    Uniform,
    Point {
        n_fd: u32,
        n_gw: u32,
        n_od: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearningRate {
    Constant,
    /// `alpha * 10 / (10 + episode)`.
    Harmonic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlvfaConfig {
    pub episodes: usize,
    pub alpha: f64,
    pub k_gw: u32,
    pub k_od: u32,
    pub initial: InitialState,
    pub seed: u64,
    /// Initial probability of perturbing the greedy action, decayed linearly to 0.
    pub epsilon: f64,
    pub learning_rate: LearningRate,
}

impl PlvfaConfig {
    pub fn new(episodes: usize, seed: u64) -> Self {
        Self {
            episodes,
            alpha: 1e-3,
            k_gw: 100,
            k_od: 100,
            initial: InitialState::Uniform,
            seed,
            epsilon: 0.05,
            learning_rate: LearningRate::Constant,
        }
    }

    /// Pure greedy exploration as in the original algorithm.
    pub fn strict(mut self) -> Self {
        self.epsilon = 0.0;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub episode: usize,
    pub initial: FleetState,
    pub cost: f64,
    pub final_state: FleetState,
    /// Slope vectors left non-monotone by an update (expected 0).
    pub violations: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingOutput {
    pub table: SlopeTable,
    pub traces: Vec<EpisodeTrace>,
}

/// Value estimate at a pre-decision state under the current slopes.
fn estimate(ops: &OpsModel, table: &SlopeTable, s: FleetState) -> Result<f64, DpError> {
    Ok(plvfa_greedy_action(ops, s, table)?.1)
}

pub fn plvfa_train(ops: &OpsModel, cfg: &PlvfaConfig) -> Result<TrainingOutput, DpError> {
    let inst = ops.instance();
    let caps = inst.strategic.caps;
    let horizon = inst.strategic.horizon;
    let gamma = inst.strategic.gamma;
    let mut table = SlopeTable::zeros(horizon, caps.fd, cfg.k_gw.max(1), cfg.k_od.max(1), cfg.alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut traces = Vec::with_capacity(cfg.episodes);
    let len = caps.fd as usize + 1;

    for episode in 0..cfg.episodes {
        let progress = episode as f64 / cfg.episodes as f64;
        let epsilon = cfg.epsilon * (1.0 - progress);
        let alpha = match cfg.learning_rate {
            LearningRate::Constant => cfg.alpha,
            LearningRate::Harmonic => cfg.alpha * 10.0 / (10.0 + episode as f64),
        };
        let mut s = match cfg.initial {
            InitialState::Uniform => {
                FleetState::new(rng.random_range(0..=caps.fd), rng.random_range(0..=caps.gw), rng.random_range(0..=caps.od), 0)
            }
            InitialState::Point { n_fd, n_gw, n_od } => FleetState::new(n_fd, n_gw, n_od, 0),
        };
        let initial = s;
        let mut cost = 0.0;
        let mut violations = 0;
        for t in 0..=horizon {
            let (greedy, _) = plvfa_greedy_action(ops, s, &table)?;
            let action = explore(inst, s, greedy, epsilon, &mut rng);
            cost += gamma.powi(t as i32) * total_cost(ops, s, action)?.total();
            let n_post = (s.n_fd as i64 + action) as u32;
            let post = FleetState::new(n_post, s.n_gw, s.n_od, t);
            let r = resignation_at(ops, post)?;
            let next = mdp::sample_transition(inst, post, r, &mut rng);
            if t == horizon {
                s = next;
                break;
            }

            let at = |n: u32| FleetState::new(n, next.n_gw, next.n_od, t + 1);
            let mid = estimate(ops, &table, at(next.n_fd))?;
            let lower = if n_post >= 1 && next.n_fd >= 1 { Some(gamma * (mid - estimate(ops, &table, at(next.n_fd - 1))?)) } else { None };
            let upper = if (n_post as usize + 1) < len && next.n_fd < caps.fd {
                Some(gamma * (estimate(ops, &table, at(next.n_fd + 1))? - mid))
            } else {
                None
            };

            let key = table.key(post);
            let z = table.slopes.entry(key).or_insert_with(|| vec![0.0; len]);
            let i = n_post as usize;
            if let Some(v) = lower {
                z[i] = (1.0 - alpha) * z[i] + alpha * v;
            }
            if let Some(v) = upper {
                z[i + 1] = (1.0 - alpha) * z[i + 1] + alpha * v;
            }
            if i + 1 < len && i >= 1 && z[i] > z[i + 1] {
                let m = 0.5 * (z[i] + z[i + 1]);
                z[i] = m;
                z[i + 1] = m;
            }
            conv_in_place(z, i);
            z[0] = 0.0;
            if !z.iter().skip(1).zip(z.iter().skip(2)).all(|(a, b)| a <= b) {
                violations += 1;
            }
            s = next;
        }
        traces.push(EpisodeTrace { episode, initial, cost, final_state: s, violations });
    }
    Ok(TrainingOutput { table, traces })
}

/// With probability `epsilon`, shifts the post-decision FD count by up to 10%.
fn explore(inst: &crate::instance::Instance, s: FleetState, greedy: i64, epsilon: f64, rng: &mut ChaCha8Rng) -> i64 {
    if epsilon <= 0.0 || rng.random::<f64>() >= epsilon {
        return greedy;
    }
    let (lo, hi) = action_space(inst, s);
    let n = s.n_fd as i64 + greedy;
    let span = ((n as f64 * 0.1).round() as i64).max(1);
    let step = rng.random_range(1..=span);
    let shifted = if rng.random::<bool>() { greedy + step } else { greedy - step };
    shifted.clamp(lo, hi)
}
