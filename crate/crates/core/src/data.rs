//! Trajectory and dataset representations, returns, normalization and the
//! binary dataset file format.
//!
//! Values are stored as `f32` so that a dataset survives a save/load cycle
//! bit-exactly; all learning code converts to `f64` on the way in.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

const MAGIC: &[u8; 8] = b"DITSDS\x00\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("index {index} out of range for trajectory of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Where a trajectory or a single transition came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Offline,
    Generated,
    Stitched,
}

impl Source {
    fn to_byte(self) -> u8 {
        match self {
            Source::Offline => 0,
            Source::Generated => 1,
            Source::Stitched => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Source::Offline),
            1 => Some(Source::Generated),
            2 => Some(Source::Stitched),
            _ => None,
        }
    }
}

/// Behaviour policy that produced an offline trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Random,
    Medium,
    Expert,
}

fn behavior_to_byte(b: Option<Behavior>) -> u8 {
    match b {
        None => 0,
        Some(Behavior::Random) => 1,
        Some(Behavior::Medium) => 2,
        Some(Behavior::Expert) => 3,
    }
}

fn behavior_from_byte(b: u8) -> Option<Option<Behavior>> {
    match b {
        0 => Some(None),
        1 => Some(Some(Behavior::Random)),
        2 => Some(Some(Behavior::Medium)),
        3 => Some(Some(Behavior::Expert)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f32>,
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_state: Vec<f32>,
    /// Provenance of this individual transition.
    pub origin: Source,
}

impl Transition {
    pub fn new(state: Vec<f32>, action: Vec<f32>, reward: f32, next_state: Vec<f32>) -> Self {
        Self {
            state,
            action,
            reward,
            next_state,
            origin: Source::Offline,
        }
    }

    pub fn with_origin(mut self, origin: Source) -> Self {
        self.origin = origin;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.reward.is_finite()
            && self.state.iter().all(|v| v.is_finite())
            && self.action.iter().all(|v| v.is_finite())
            && self.next_state.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub terminated: bool,
    pub source: Source,
    pub behavior: Option<Behavior>,
}

impl Trajectory {
    pub fn new(transitions: Vec<Transition>, terminated: bool, source: Source) -> Self {
        Self {
            transitions,
            terminated,
            source,
            behavior: None,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.transitions.iter().map(|t| t.reward as f64)
    }

    /// Undiscounted sum of rewards.
    pub fn reward_sum(&self) -> f64 {
        self.rewards().sum()
    }

    /// The state at position `i`, where `i == len()` addresses the final next-state.
    pub fn state_at(&self, i: usize) -> &[f32] {
        if i < self.transitions.len() {
            &self.transitions[i].state
        } else {
            &self.transitions[self.transitions.len() - 1].next_state
        }
    }

    /// Checks the chaining invariant `next_state[i] == state[i + 1]`.
    pub fn is_chained(&self) -> bool {
        self.transitions
            .windows(2)
            .all(|w| w[0].next_state == w[1].state)
    }
}

/// `Σ_t γ^t r_t`; an empty trajectory has return zero.
pub fn trajectory_return(traj: &Trajectory, gamma: f64) -> f64 {
    discounted_sum(traj.rewards(), gamma)
}

fn discounted_sum(rewards: impl Iterator<Item = f64>, gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut discount = 1.0;
    for r in rewards {
        acc += discount * r;
        discount *= gamma;
    }
    acc
}

/// Discounted reward sum over `t..min(t + horizon, len)`.
pub fn window_return(traj: &Trajectory, t: usize, horizon: usize, gamma: f64) -> Result<f64, DataError> {
    if t >= traj.len() {
        return Err(DataError::IndexOutOfRange {
            index: t,
            len: traj.len(),
        });
    }
    let end = (t + horizon).min(traj.len());
    Ok(discounted_sum(
        traj.transitions[t..end].iter().map(|tr| tr.reward as f64),
        gamma,
    ))
}

/// Discount factor in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscountedReturnSpec {
    gamma: f64,
}

impl DiscountedReturnSpec {
    pub fn new(gamma: f64) -> Result<Self, DataError> {
        if (0.0..1.0).contains(&gamma) {
            Ok(Self { gamma })
        } else {
            Err(DataError::Invalid(format!("gamma {gamma} not in [0, 1)")))
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Per-dimension affine normalization for states and rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub reward_mean: f64,
    pub reward_std: f64,
}

impl NormStats {
    pub fn identity(state_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            reward_mean: 0.0,
            reward_std: 1.0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn normalize_state<T: Copy + Into<f64>>(&self, s: &[T]) -> Vec<f64> {
        s.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(&v, (m, sd))| (v.into() - m) / sd)
            .collect()
    }

    pub fn denormalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (m, sd))| v * sd + m)
            .collect()
    }

    pub fn normalize_reward(&self, r: f64) -> f64 {
        (r - self.reward_mean) / self.reward_std
    }

    pub fn denormalize_reward(&self, r: f64) -> f64 {
        r * self.reward_std + self.reward_mean
    }

    /// A stable fingerprint used to tie model checkpoints to their dataset.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the bit patterns.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: f64| {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for &v in self.state_mean.iter().chain(&self.state_std) {
            feed(v);
        }
        feed(self.reward_mean);
        feed(self.reward_std);
        h
    }
}

/// How diffusion windows are cut out of trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub horizon: usize,
    pub gamma: f64,
}

/// Start indices of the training windows of `traj`.
///
/// Full windows always qualify. Terminated trajectories additionally yield
/// windows that run past the terminal step; those are padded with the
/// absorbing terminal state and zero reward.
pub fn window_starts(traj: &Trajectory, horizon: usize) -> std::ops::Range<usize> {
    let len = traj.len();
    if traj.terminated {
        0..len
    } else if len >= horizon {
        0..len - horizon + 1
    } else {
        0..0
    }
}

/// Raw (state, reward) blocks of the window starting at `t`, absorbing-padded.
pub fn window_blocks(traj: &Trajectory, t: usize, horizon: usize) -> Vec<(&[f32], f32)> {
    let len = traj.len();
    (t..t + horizon)
        .map(|j| {
            if j < len {
                let tr = &traj.transitions[j];
                (tr.state.as_slice(), tr.reward)
            } else {
                (traj.transitions[len - 1].next_state.as_slice(), 0.0)
            }
        })
        .collect()
}

/// Window return under the same padding as [`window_blocks`].
pub fn padded_window_return(traj: &Trajectory, t: usize, horizon: usize, gamma: f64) -> f64 {
    let end = (t + horizon).min(traj.len());
    discounted_sum(
        traj.transitions[t..end].iter().map(|tr| tr.reward as f64),
        gamma,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub state_dim: usize,
    pub action_dim: usize,
    pub norm: NormStats,
    /// (min, max) of window returns, used to map conditions into `[0, 1]`.
    pub return_bounds: (f64, f64),
    /// Window layout the return bounds were computed for.
    pub window: WindowSpec,
}

impl Dataset {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            trajectories: Vec::new(),
            state_dim,
            action_dim,
            norm: NormStats::identity(state_dim),
            return_bounds: (0.0, 1.0),
            window: WindowSpec {
                horizon: 1,
                gamma: 0.99,
            },
        }
    }

    pub fn with_trajectories(state_dim: usize, action_dim: usize, trajectories: Vec<Trajectory>) -> Self {
        let mut d = Self::new(state_dim, action_dim);
        d.trajectories = trajectories;
        d
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    pub fn mean_reward_sum(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().map(Trajectory::reward_sum).sum::<f64>() / self.len() as f64
    }

    /// Checks dimensions, finiteness, non-emptiness and chaining of every trajectory.
    pub fn validate(&self) -> Result<(), DataError> {
        for (i, traj) in self.trajectories.iter().enumerate() {
            if traj.is_empty() {
                return Err(DataError::Invalid(format!("trajectory {i} is empty")));
            }
            for tr in &traj.transitions {
                if tr.state.len() != self.state_dim
                    || tr.next_state.len() != self.state_dim
                    || tr.action.len() != self.action_dim
                {
                    return Err(DataError::DimensionMismatch(format!(
                        "trajectory {i}: expected m={} d={}",
                        self.state_dim, self.action_dim
                    )));
                }
                if !tr.is_finite() {
                    return Err(DataError::Invalid(format!("trajectory {i} has non-finite entries")));
                }
            }
            if !traj.is_chained() {
                return Err(DataError::Invalid(format!("trajectory {i} breaks chaining")));
            }
        }
        Ok(())
    }

    /// Fits normalization statistics and window-return bounds in place.
    pub fn fit_normalization(&mut self, window: WindowSpec) -> Result<(), DataError> {
        self.norm = compute_norm_stats(self)?;
        self.window = window;
        self.return_bounds = compute_return_bounds(self, window);
        Ok(())
    }

    /// Concatenates the trajectories of `other` (which must share dimensions).
    pub fn extend_from(&mut self, other: &[Trajectory]) {
        self.trajectories.extend_from_slice(other);
    }
}

/// Population mean/std of states (including final next-states) and rewards.
pub fn compute_norm_stats(dataset: &Dataset) -> Result<NormStats, DataError> {
    if dataset.num_transitions() == 0 {
        return Err(DataError::Invalid("cannot normalize an empty dataset".into()));
    }
    let m = dataset.state_dim;
    let mut sum = vec![0.0f64; m];
    let mut count = 0usize;
    let mut r_sum = 0.0;
    let mut r_count = 0usize;
    let for_each_state = |f: &mut dyn FnMut(&[f32])| {
        for traj in &dataset.trajectories {
            for tr in &traj.transitions {
                f(&tr.state);
            }
            if let Some(last) = traj.transitions.last() {
                f(&last.next_state);
            }
        }
    };
    for_each_state(&mut |s| {
        for (acc, &v) in sum.iter_mut().zip(s) {
            *acc += v as f64;
        }
        count += 1;
    });
    for tr in dataset.transitions() {
        r_sum += tr.reward as f64;
        r_count += 1;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let r_mean = r_sum / r_count as f64;
    let mut var = vec![0.0f64; m];
    for_each_state(&mut |s| {
        for ((acc, &v), mu) in var.iter_mut().zip(s).zip(&mean) {
            let d = v as f64 - mu;
            *acc += d * d;
        }
    });
    let r_var = dataset
        .transitions()
        .map(|tr| (tr.reward as f64 - r_mean).powi(2))
        .sum::<f64>()
        / r_count as f64;
    Ok(NormStats {
        state_mean: mean,
        state_std: var
            .iter()
            .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
            .collect(),
        reward_mean: r_mean,
        reward_std: r_var.sqrt().max(STD_FLOOR),
    })
}

fn compute_return_bounds(dataset: &Dataset, window: WindowSpec) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for traj in &dataset.trajectories {
        for t in window_starts(traj, window.horizon) {
            let r = padded_window_return(traj, t, window.horizon, window.gamma);
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    (lo, hi)
}

/// Returns a copy of `dataset` with states and rewards mapped into normalized
/// units together with the statistics used.
pub fn normalize(dataset: &Dataset) -> Result<(Dataset, NormStats), DataError> {
    let stats = compute_norm_stats(dataset)?;
    Ok((apply_affine(dataset, &stats, false), stats))
}

/// Inverse of [`normalize`].
pub fn denormalize(dataset: &Dataset, stats: &NormStats) -> Dataset {
    apply_affine(dataset, stats, true)
}

fn apply_affine(dataset: &Dataset, stats: &NormStats, inverse: bool) -> Dataset {
    let map_state = |s: &[f32]| -> Vec<f32> {
        if inverse {
            let v: Vec<f64> = s.iter().map(|&x| x as f64).collect();
            stats.denormalize_state(&v).into_iter().map(|x| x as f32).collect()
        } else {
            stats.normalize_state(s).into_iter().map(|x| x as f32).collect()
        }
    };
    let map_reward = |r: f32| -> f32 {
        if inverse {
            stats.denormalize_reward(r as f64) as f32
        } else {
            stats.normalize_reward(r as f64) as f32
        }
    };
    let mut out = dataset.clone();
    out.norm = stats.clone();
    for traj in &mut out.trajectories {
        for tr in &mut traj.transitions {
            tr.state = map_state(&tr.state);
            tr.next_state = map_state(&tr.next_state);
            tr.reward = map_reward(tr.reward);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// File format

fn fmt_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_floats(s: &str) -> Result<Vec<f64>, DataError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| DataError::MalformedHeader(format!("bad float {t:?}")))
        })
        .collect()
}

/// Serializes a dataset into the on-disk byte layout.
pub fn encode_dataset(dataset: &Dataset) -> Vec<u8> {
    let m = dataset.state_dim;
    let d = dataset.action_dim;
    let stride = 2 * m + d + 1;
    let n_trans = dataset.num_transitions();
    let payload_bytes = n_trans * stride * 4;

    let mut header = String::new();
    let _ = writeln!(header, "version={FORMAT_VERSION}");
    let _ = writeln!(header, "state_dim={m}");
    let _ = writeln!(header, "action_dim={d}");
    let _ = writeln!(header, "trajectories={}", dataset.len());
    let _ = writeln!(header, "transitions={n_trans}");
    let _ = writeln!(header, "state_mean={}", fmt_floats(&dataset.norm.state_mean));
    let _ = writeln!(header, "state_std={}", fmt_floats(&dataset.norm.state_std));
    let _ = writeln!(header, "reward_mean={:?}", dataset.norm.reward_mean);
    let _ = writeln!(header, "reward_std={:?}", dataset.norm.reward_std);
    let _ = writeln!(header, "return_min={:?}", dataset.return_bounds.0);
    let _ = writeln!(header, "return_max={:?}", dataset.return_bounds.1);
    let _ = writeln!(header, "window_horizon={}", dataset.window.horizon);
    let _ = writeln!(header, "window_gamma={:?}", dataset.window.gamma);
    let _ = writeln!(header, "payload_bytes={payload_bytes}");
    header.push_str("end\n");

    let mut out = Vec::with_capacity(MAGIC.len() + header.len() + payload_bytes + 8 * dataset.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(header.as_bytes());
    // Trajectory table: length, terminated, source, behaviour.
    for traj in &dataset.trajectories {
        out.extend_from_slice(&(traj.len() as u32).to_le_bytes());
        out.push(traj.terminated as u8);
        out.push(traj.source.to_byte());
        out.push(behavior_to_byte(traj.behavior));
        out.push(0);
    }
    // Per-transition provenance bytes.
    for tr in dataset.transitions() {
        out.push(tr.origin.to_byte());
    }
    for tr in dataset.transitions() {
        for v in tr.state.iter().chain(&tr.action).chain(std::iter::once(&tr.reward)).chain(&tr.next_state) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let bytes = encode_dataset(dataset);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, expected_total: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Truncated {
                expected: expected_total,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DataError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(DataError::MalformedHeader("missing magic bytes".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let end_marker = b"end\n";
    let header_len = rest
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| DataError::MalformedHeader("missing end marker".into()))?;
    let header = std::str::from_utf8(&rest[..header_len])
        .map_err(|_| DataError::MalformedHeader("header is not utf-8".into()))?;
    let mut fields = std::collections::HashMap::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DataError::MalformedHeader(format!("bad line {line:?}")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| -> Result<&str, DataError> {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| DataError::MalformedHeader(format!("missing key {k}")))
    };
    let get_usize = |k: &str| -> Result<usize, DataError> {
        get(k)?
            .parse()
            .map_err(|_| DataError::MalformedHeader(format!("bad integer for {k}")))
    };
    let get_f64 = |k: &str| -> Result<f64, DataError> {
        get(k)?
            .parse()
            .map_err(|_| DataError::MalformedHeader(format!("bad float for {k}")))
    };
    if get_usize("version")? != FORMAT_VERSION as usize {
        return Err(DataError::MalformedHeader("unsupported version".into()));
    }
    let m = get_usize("state_dim")?;
    let d = get_usize("action_dim")?;
    let n_traj = get_usize("trajectories")?;
    let n_trans = get_usize("transitions")?;
    let payload_bytes = get_usize("payload_bytes")?;
    let norm = NormStats {
        state_mean: parse_floats(get("state_mean")?)?,
        state_std: parse_floats(get("state_std")?)?,
        reward_mean: get_f64("reward_mean")?,
        reward_std: get_f64("reward_std")?,
    };
    if norm.state_mean.len() != m || norm.state_std.len() != m {
        return Err(DataError::DimensionMismatch(format!(
            "norm stats have {} entries, header declares m={m}",
            norm.state_mean.len()
        )));
    }
    let stride = 2 * m + d + 1;
    let body_start = MAGIC.len() + header_len + end_marker.len();
    let table_bytes = n_traj * 8;
    let expected_total = body_start + table_bytes + n_trans + payload_bytes;
    if payload_bytes != n_trans * stride * 4 {
        return Err(DataError::DimensionMismatch(format!(
            "payload of {payload_bytes} bytes does not hold {n_trans} transitions of m={m}, d={d}"
        )));
    }
    let mut cur = Cursor {
        bytes,
        pos: body_start,
    };
    let mut metas = Vec::with_capacity(n_traj);
    let mut total = 0usize;
    for _ in 0..n_traj {
        let rec = cur.take(8, expected_total)?;
        let len = u32::from_le_bytes([rec[0], rec[1], rec[2], rec[3]]) as usize;
        let source = Source::from_byte(rec[5])
            .ok_or_else(|| DataError::MalformedHeader("bad source tag".into()))?;
        let behavior = behavior_from_byte(rec[6])
            .ok_or_else(|| DataError::MalformedHeader("bad behaviour tag".into()))?;
        total += len;
        metas.push((len, rec[4] != 0, source, behavior));
    }
    if total != n_trans {
        return Err(DataError::MalformedHeader(format!(
            "trajectory lengths sum to {total}, header declares {n_trans}"
        )));
    }
    let origins = cur.take(n_trans, expected_total)?.to_vec();
    let payload = cur.take(payload_bytes, expected_total)?;
    if cur.pos != bytes.len() {
        return Err(DataError::MalformedHeader("trailing bytes after payload".into()));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut next = |n: usize| -> Vec<f32> { (&mut floats).take(n).collect() };
    let mut trajectories = Vec::with_capacity(n_traj);
    let mut k = 0usize;
    for (len, terminated, source, behavior) in metas {
        let mut transitions = Vec::with_capacity(len);
        for _ in 0..len {
            let state = next(m);
            let action = next(d);
            let reward = next(1)[0];
            let next_state = next(m);
            let origin = Source::from_byte(origins[k])
                .ok_or_else(|| DataError::MalformedHeader("bad transition origin".into()))?;
            k += 1;
            transitions.push(Transition {
                state,
                action,
                reward,
                next_state,
                origin,
            });
        }
        trajectories.push(Trajectory {
            transitions,
            terminated,
            source,
            behavior,
        });
    }
    Ok(Dataset {
        trajectories,
        state_dim: m,
        action_dim: d,
        norm,
        return_bounds: (get_f64("return_min")?, get_f64("return_max")?),
        window: WindowSpec {
            horizon: get_usize("window_horizon")?,
            gamma: get_f64("window_gamma")?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj_with_rewards(rewards: &[f32]) -> Trajectory {
        let transitions = rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| Transition::new(vec![i as f32], vec![0.0], r, vec![i as f32 + 1.0]))
            .collect();
        Trajectory::new(transitions, false, Source::Offline)
    }

    #[test]
    fn trajectory_return_examples() {
        assert_eq!(trajectory_return(&traj_with_rewards(&[5.0]), 0.99), 5.0);
        assert_eq!(trajectory_return(&traj_with_rewards(&[0.0, 0.0, 0.0]), 0.7), 0.0);
        let oracle = 1.0 + 0.5 + 0.25;
        assert_eq!(trajectory_return(&traj_with_rewards(&[1.0, 1.0, 1.0]), 0.5), oracle);
        assert_eq!(trajectory_return(&Trajectory::new(vec![], false, Source::Offline), 0.9), 0.0);
    }

    #[test]
    fn window_return_examples() {
        let t = traj_with_rewards(&[1.0, 2.0, 3.0]);
        assert_eq!(window_return(&t, 0, 2, 1.0).unwrap(), 1.0 + 2.0);
        assert_eq!(window_return(&t, 2, 5, 1.0).unwrap(), 3.0);
        assert_eq!(window_return(&traj_with_rewards(&[4.0, 4.0]), 0, 1, 0.9).unwrap(), 4.0);
        assert!(matches!(
            window_return(&t, 3, 1, 1.0),
            Err(DataError::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn gamma_spec_rejects_one() {
        assert!(DiscountedReturnSpec::new(1.0).is_err());
        assert!(DiscountedReturnSpec::new(-0.1).is_err());
        assert_eq!(DiscountedReturnSpec::new(0.0).unwrap().gamma(), 0.0);
    }

    #[test]
    fn normalize_two_points() {
        let tr = Transition::new(vec![0.0], vec![0.0], 0.0, vec![2.0]);
        let d = Dataset::with_trajectories(1, 1, vec![Trajectory::new(vec![tr], true, Source::Offline)]);
        let (n, stats) = normalize(&d).unwrap();
        assert_eq!(stats.state_mean, vec![1.0]);
        assert_eq!(stats.state_std, vec![1.0]);
        assert_eq!(n.trajectories[0].transitions[0].state, vec![-1.0]);
        assert_eq!(n.trajectories[0].transitions[0].next_state, vec![1.0]);
    }

    #[test]
    fn constant_dimension_is_floored() {
        let transitions = (0..4)
            .map(|_| Transition::new(vec![3.0, 3.0], vec![0.0], 1.0, vec![3.0, 3.0]))
            .collect();
        let d = Dataset::with_trajectories(2, 1, vec![Trajectory::new(transitions, false, Source::Offline)]);
        let (n, stats) = normalize(&d).unwrap();
        assert_eq!(stats.state_std, vec![STD_FLOOR, STD_FLOOR]);
        assert_eq!(stats.reward_std, STD_FLOOR);
        assert!(n.transitions().all(|t| t.state.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn renormalizing_normalized_data_gives_unit_stats() {
        let d = Dataset::with_trajectories(1, 1, vec![traj_with_rewards(&[1.0, -2.0, 0.5, 3.0])]);
        let (n, _) = normalize(&d).unwrap();
        let stats = compute_norm_stats(&n).unwrap();
        assert!(stats.state_mean[0].abs() < 1e-6);
        assert!((stats.state_std[0] - 1.0).abs() < 1e-6);
        assert!((stats.reward_std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_dataset_cannot_be_normalized() {
        assert!(normalize(&Dataset::new(1, 1)).is_err());
    }

    #[test]
    fn padded_windows_only_for_terminated() {
        let mut t = traj_with_rewards(&[1.0, 1.0, 1.0]);
        assert_eq!(window_starts(&t, 2), 0..2);
        assert_eq!(window_starts(&t, 4), 0..0);
        t.terminated = true;
        assert_eq!(window_starts(&t, 4), 0..3);
        let blocks = window_blocks(&t, 2, 3);
        assert_eq!(blocks[0], (&[2.0f32][..], 1.0));
        assert_eq!(blocks[1], (&[3.0f32][..], 0.0));
        assert_eq!(blocks[2], (&[3.0f32][..], 0.0));
    }

    #[test]
    fn empty_file_is_malformed() {
        assert!(matches!(decode_dataset(&[]), Err(DataError::MalformedHeader(_))));
    }
}
