//! Trajectory samples, rigid normalization, ETH-UCY text ingestion and the
//! synthetic long-tail generator.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Point<T> = [T; 2];

/// Below this last-step speed (metres per step) the rotation is left at zero.
pub const STATIONARY_EPS: f64 = 1e-12;

/// Rigid map from raw coordinates to the normalized frame:
/// `p_norm = R(-rotation) (p_raw - translation)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct RigidTransform<T> {
    pub translation: Point<T>,
    pub rotation: T,
}

impl<T: Scalar> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            translation: [T::zero(), T::zero()],
            rotation: T::zero(),
        }
    }

    pub fn forward(&self, p: Point<T>) -> Point<T> {
        let (s, c) = self.rotation.sin_cos();
        let dx = p[0] - self.translation[0];
        let dy = p[1] - self.translation[1];
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn inverse(&self, p: Point<T>) -> Point<T> {
        let (s, c) = self.rotation.sin_cos();
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
        ]
    }
}

/// Tail motion patterns of the synthetic generator; 0 marks head samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    Head = 0,
    Turn = 1,
    Accelerate = 2,
    BrakeToStop = 3,
    Reverse = 4,
}

impl Pattern {
    pub const TAIL: [Pattern; 4] = [
        Pattern::Turn,
        Pattern::Accelerate,
        Pattern::BrakeToStop,
        Pattern::Reverse,
    ];

    pub fn label(self) -> u8 {
        self as u8
    }
}

/// One agent's observed past and ground-truth future, stored in the
/// normalized frame alongside the transform that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct TrajectorySample<T> {
    pub sample_id: u64,
    pub obs: Vec<Point<T>>,
    pub fut: Vec<Point<T>>,
    pub transform: RigidTransform<T>,
    pub pattern_label: Option<u8>,
}

impl<T: Scalar> TrajectorySample<T> {
    pub fn is_tail(&self) -> bool {
        self.pattern_label.is_some_and(|l| l != 0)
    }

    /// Observation followed by future, in the normalized frame.
    pub fn full(&self) -> Vec<Point<T>> {
        self.obs.iter().chain(&self.fut).copied().collect()
    }

    pub fn raw_obs(&self) -> Vec<Point<T>> {
        self.obs.iter().map(|&p| self.transform.inverse(p)).collect()
    }

    pub fn raw_fut(&self) -> Vec<Point<T>> {
        self.fut.iter().map(|&p| self.transform.inverse(p)).collect()
    }
}

/// Translates the last observed point to the origin and rotates so the last
/// observed velocity points along +x. Stationary endings keep rotation 0.
pub fn normalize<T: Scalar>(
    sample_id: u64,
    obs: &[Point<T>],
    fut: &[Point<T>],
    pattern_label: Option<u8>,
) -> Result<TrajectorySample<T>> {
    if obs.len() < 2 {
        return Err(Error::Contract(format!(
            "normalize needs at least 2 observed points, got {}",
            obs.len()
        )));
    }
    let last = obs[obs.len() - 1];
    let prev = obs[obs.len() - 2];
    let v = [last[0] - prev[0], last[1] - prev[1]];
    let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
    let rotation = if speed < T::lit(STATIONARY_EPS) {
        T::zero()
    } else {
        v[1].atan2(v[0])
    };
    let transform = RigidTransform {
        translation: last,
        rotation,
    };
    let mut obs_n: Vec<Point<T>> = obs.iter().map(|&p| transform.forward(p)).collect();
    // p - t is exactly zero, but keep the invariant independent of sin/cos rounding.
    *obs_n.last_mut().expect("len >= 2") = [T::zero(), T::zero()];
    Ok(TrajectorySample {
        sample_id,
        obs: obs_n,
        fut: fut.iter().map(|&p| transform.forward(p)).collect(),
        transform,
        pattern_label,
    })
}

/// Maps normalized-frame positions back to raw coordinates.
pub fn denormalize<T: Scalar>(sample: &TrajectorySample<T>, pred: &[Point<T>]) -> Vec<Point<T>> {
    pred.iter().map(|&p| sample.transform.inverse(p)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct DatasetSplit<T> {
    pub train: Vec<TrajectorySample<T>>,
    pub test: Vec<TrajectorySample<T>>,
    pub t_obs: usize,
    pub t_pred: usize,
    pub dt: T,
}

impl<T: Scalar> DatasetSplit<T> {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &TrajectorySample<T>> {
        self.train.iter().chain(&self.test)
    }

    /// Checks the split invariants: disjoint ids, shared horizons.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.train {
            seen.insert(s.sample_id);
        }
        for s in &self.test {
            if seen.contains(&s.sample_id) {
                return Err(Error::Contract(format!(
                    "sample {} appears in both train and test",
                    s.sample_id
                )));
            }
        }
        for s in self.all() {
            if s.obs.len() != self.t_obs || s.fut.len() != self.t_pred {
                return Err(Error::Contract(format!(
                    "sample {} has horizons {}/{}, split expects {}/{}",
                    s.sample_id,
                    s.obs.len(),
                    s.fut.len(),
                    self.t_obs,
                    self.t_pred
                )));
            }
        }
        Ok(())
    }
}

/// One agent's track as read from a text file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTrack {
    pub agent_id: i64,
    pub frames: Vec<(i64, f64, f64)>,
}

impl RawTrack {
    /// Splits the track wherever the frame stride changes, so every returned
    /// piece has strictly increasing, equally spaced frames.
    pub fn contiguous_segments(&self) -> Vec<RawTrack> {
        let mut out = Vec::new();
        let mut current: Vec<(i64, f64, f64)> = Vec::new();
        let mut stride: Option<i64> = None;
        for &f in &self.frames {
            if let Some(&last) = current.last() {
                let d = f.0 - last.0;
                match stride {
                    Some(s) if s == d => {}
                    None if d > 0 && current.len() == 1 => stride = Some(d),
                    _ => {
                        out.push(RawTrack {
                            agent_id: self.agent_id,
                            frames: std::mem::take(&mut current),
                        });
                        stride = None;
                    }
                }
            }
            current.push(f);
        }
        if !current.is_empty() {
            out.push(RawTrack {
                agent_id: self.agent_id,
                frames: current,
            });
        }
        out
    }
}

/// Parses `frame_id agent_id x y` rows into per-agent tracks sorted by frame.
pub fn parse_ethucy_text(path: &Path, text: &str) -> Result<Vec<RawTrack>> {
    let mut by_agent: BTreeMap<i64, Vec<(i64, f64, f64)>> = BTreeMap::new();
    let mut order: Vec<i64> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected 4 fields `frame_id agent_id x y`, got {}", fields.len()),
            });
        }
        let bad = |what: &str, v: &str| Error::Format {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("cannot parse {what} from {v:?}"),
        };
        let frame: f64 = fields[0].parse().map_err(|_| bad("frame_id", fields[0]))?;
        let agent: f64 = fields[1].parse().map_err(|_| bad("agent_id", fields[1]))?;
        let x: f64 = fields[2].parse().map_err(|_| bad("x", fields[2]))?;
        let y: f64 = fields[3].parse().map_err(|_| bad("y", fields[3]))?;
        if ![frame, agent, x, y].iter().all(|v| v.is_finite())
            || frame.fract() != 0.0
            || agent.fract() != 0.0
        {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: line_no,
                message: "ids must be integral and coordinates finite".into(),
            });
        }
        let agent = agent as i64;
        if !by_agent.contains_key(&agent) {
            order.push(agent);
        }
        by_agent.entry(agent).or_default().push((frame as i64, x, y));
    }
    Ok(order
        .into_iter()
        .map(|agent_id| {
            let mut frames = by_agent.remove(&agent_id).unwrap_or_default();
            frames.sort_by_key(|f| f.0);
            frames.dedup_by_key(|f| f.0);
            RawTrack { agent_id, frames }
        })
        .collect())
}

/// Sliding windows of `t_obs + t_pred` frames (stride 1) per contiguous track
/// segment, normalized. Agents are split 80/20 into train/test by order of
/// first appearance (every fifth agent goes to test) so no frames are shared.
pub fn load_ethucy_text<T: Scalar>(
    path: &Path,
    t_obs: usize,
    t_pred: usize,
    dt: T,
) -> Result<DatasetSplit<T>> {
    if t_obs < 2 || t_pred < 2 {
        return Err(Error::config("t_obs/t_pred", "both horizons must be at least 2"));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tracks = parse_ethucy_text(path, &text)?;
    let window = t_obs + t_pred;
    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
        t_obs,
        t_pred,
        dt,
    };
    let mut next_id = 0u64;
    for (agent_idx, track) in tracks.iter().enumerate() {
        let to_test = agent_idx % 5 == 4;
        for seg in track.contiguous_segments() {
            if seg.frames.len() < window {
                continue;
            }
            for start in 0..=seg.frames.len() - window {
                let pts: Vec<Point<T>> = seg.frames[start..start + window]
                    .iter()
                    .map(|&(_, x, y)| [T::lit(x), T::lit(y)])
                    .collect();
                let s = normalize(next_id, &pts[..t_obs], &pts[t_obs..], None)?;
                next_id += 1;
                if to_test {
                    split.test.push(s);
                } else {
                    split.train.push(s);
                }
            }
        }
    }
    if split.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} yields no windows of {window} frames",
            path.display()
        )));
    }
    Ok(split)
}

/// Parameters of the synthetic long-tail generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub tail_fraction: f64,
    pub seed: u64,
    pub t_obs: usize,
    pub t_pred: usize,
    pub dt: f64,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            tail_fraction: 0.1,
            seed: 0,
            t_obs: 8,
            t_pred: 12,
            dt: 0.4,
            noise_sigma: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tail_fraction > 0.0 && self.tail_fraction < 1.0) {
            return Err(Error::config("tail", format!(
                "tail fraction must lie in (0, 1), got {}",
                self.tail_fraction
            )));
        }
        if self.n < 100 {
            return Err(Error::config("n", format!("need at least 100 samples, got {}", self.n)));
        }
        if self.t_obs < 2 || self.t_pred < 2 {
            return Err(Error::config("t_obs/t_pred", "both horizons must be at least 2"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dt", "must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise", "must be non-negative"));
        }
        Ok(())
    }

    /// `(head, per-tail-pattern)` counts. The tail total is `round(n * tail)`;
    /// any remainder after dividing by four goes to the earliest patterns.
    pub fn counts(&self) -> (usize, [usize; 4]) {
        let n_tail = ((self.n as f64) * self.tail_fraction).round() as usize;
        let n_tail = n_tail.clamp(4.min(self.n), self.n);
        let mut per = [n_tail / 4; 4];
        for slot in per.iter_mut().take(n_tail % 4) {
            *slot += 1;
        }
        (self.n - n_tail, per)
    }
}

/// Generates a labelled long-tail dataset. Head samples move at constant
/// velocity; tail samples follow one of four patterns:
///
/// * turn: constant speed, heading rate `±U(20°, 60°)/s` from the last observed frame on;
/// * accelerate: constant longitudinal acceleration `U(0.5, 1.5)` m/s² over the whole window;
/// * brake-to-stop: constant deceleration reaching zero speed inside the future horizon;
/// * reverse: the same deceleration continued past the stop, so the agent moves back.
///
/// Speeds are `U(0.5, 2.0)` m/s at the start of the window, headings `U(0, 2π)`.
pub fn synth_longtail<T: Scalar>(cfg: &SynthConfig) -> Result<DatasetSplit<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n_head, per_tail) = cfg.counts();

    let mut labels: Vec<Pattern> = vec![Pattern::Head; n_head];
    for (p, &c) in Pattern::TAIL.iter().zip(&per_tail) {
        labels.extend(std::iter::repeat_n(*p, c));
    }
    labels.shuffle(&mut rng);

    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0))
        .map_err(|e| Error::config("noise", e.to_string()))?;
    let total = cfg.t_obs + cfg.t_pred;
    let mut samples: Vec<TrajectorySample<T>> = Vec::with_capacity(cfg.n);
    for (id, &pattern) in labels.iter().enumerate() {
        let pts = synth_track(pattern, cfg, &mut rng);
        debug_assert_eq!(pts.len(), total);
        let noisy: Vec<Point<T>> = pts
            .iter()
            .map(|p| {
                let (ex, ey) = if cfg.noise_sigma > 0.0 {
                    (noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                [T::lit(p[0] + ex), T::lit(p[1] + ey)]
            })
            .collect();
        samples.push(normalize(
            id as u64,
            &noisy[..cfg.t_obs],
            &noisy[cfg.t_obs..],
            Some(pattern.label()),
        )?);
    }

    // Stratified 80/20: within each label, the first round(0.8 * count)
    // samples in generation order (already shuffled) go to train.
    let mut by_label: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_label.entry(s.pattern_label.unwrap_or(0)).or_default().push(i);
    }
    let mut is_train = vec![false; samples.len()];
    for idx in by_label.values() {
        let n_train = ((idx.len() as f64) * 0.8).round() as usize;
        for &i in &idx[..n_train] {
            is_train[i] = true;
        }
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
        t_obs: cfg.t_obs,
        t_pred: cfg.t_pred,
        dt: T::lit(cfg.dt),
    };
    for (s, train) in samples.into_iter().zip(is_train) {
        if train {
            split.train.push(s);
        } else {
            split.test.push(s);
        }
    }
    Ok(split)
}

fn synth_track<R: Rng>(pattern: Pattern, cfg: &SynthConfig, rng: &mut R) -> Vec<[f64; 2]> {
    let total = cfg.t_obs + cfg.t_pred;
    let dt = cfg.dt;
    let start = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
    let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let speed: f64 = rng.random_range(0.5..2.0);
    let dir = [heading.cos(), heading.sin()];
    let t_last_obs = (cfg.t_obs - 1) as f64 * dt;
    let t_end = (total - 1) as f64 * dt;
    let along = |s: f64| [start[0] + s * dir[0], start[1] + s * dir[1]];

    match pattern {
        Pattern::Head => (0..total).map(|k| along(speed * k as f64 * dt)).collect(),
        Pattern::Turn => {
            let rate = rng.random_range(20f64.to_radians()..60f64.to_radians());
            let omega = if rng.random_bool(0.5) { rate } else { -rate };
            let pivot = along(speed * t_last_obs);
            (0..total)
                .map(|k| {
                    let t = k as f64 * dt;
                    if t <= t_last_obs {
                        along(speed * t)
                    } else {
                        let tau = t - t_last_obs;
                        let h = heading + omega * tau;
                        [
                            pivot[0] + speed / omega * (h.sin() - heading.sin()),
                            pivot[1] - speed / omega * (h.cos() - heading.cos()),
                        ]
                    }
                })
                .collect()
        }
        Pattern::Accelerate => {
            let acc = rng.random_range(0.5..1.5);
            (0..total)
                .map(|k| {
                    let t = k as f64 * dt;
                    along(speed * t + 0.5 * acc * t * t)
                })
                .collect()
        }
        Pattern::BrakeToStop | Pattern::Reverse => {
            // Stop time strictly inside the future horizon; reversal keeps
            // decelerating through zero, braking holds position after the stop.
            let t_stop = if pattern == Pattern::BrakeToStop {
                rng.random_range(t_last_obs + dt..t_end)
            } else {
                rng.random_range(t_last_obs + dt..t_last_obs + 0.5 * (t_end - t_last_obs) + dt)
            };
            let decel = speed / t_stop;
            (0..total)
                .map(|k| {
                    let mut t = k as f64 * dt;
                    if pattern == Pattern::BrakeToStop {
                        t = t.min(t_stop);
                    }
                    along(speed * t - 0.5 * decel * t * t)
                })
                .collect()
        }
    }
}

const DATASET_FORMAT: &str = "fend-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    format: String,
    version: u32,
    t_obs: usize,
    t_pred: usize,
    dt: f64,
    n_train: usize,
    n_test: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
struct SampleRecord<T> {
    sample_id: u64,
    split: String,
    obs: Vec<Point<T>>,
    fut: Vec<Point<T>>,
    transform: RigidTransform<T>,
    pattern_label: Option<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
struct DatasetFile<T> {
    meta: DatasetMeta,
    samples: Vec<SampleRecord<T>>,
}

/// Serializes a split as `{meta, samples}` JSON. Coordinates are stored in the
/// normalized frame with the transform that recovers raw coordinates.
pub fn dataset_to_json<T: Scalar>(split: &DatasetSplit<T>) -> Result<String> {
    let record = |s: &TrajectorySample<T>, which: &str| SampleRecord {
        sample_id: s.sample_id,
        split: which.to_string(),
        obs: s.obs.clone(),
        fut: s.fut.clone(),
        transform: s.transform,
        pattern_label: s.pattern_label,
    };
    let file = DatasetFile {
        meta: DatasetMeta {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            t_obs: split.t_obs,
            t_pred: split.t_pred,
            dt: split.dt.to_f64_lossy(),
            n_train: split.train.len(),
            n_test: split.test.len(),
        },
        samples: split
            .train
            .iter()
            .map(|s| record(s, "train"))
            .chain(split.test.iter().map(|s| record(s, "test")))
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn dataset_from_json<T: Scalar>(text: &str) -> Result<DatasetSplit<T>> {
    let file: DatasetFile<T> = serde_json::from_str(text)?;
    if file.meta.format != DATASET_FORMAT || file.meta.version != DATASET_VERSION {
        return Err(Error::Contract(format!(
            "unsupported dataset format {} v{}",
            file.meta.format, file.meta.version
        )));
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
        t_obs: file.meta.t_obs,
        t_pred: file.meta.t_pred,
        dt: T::lit(file.meta.dt),
    };
    for r in file.samples {
        let s = TrajectorySample {
            sample_id: r.sample_id,
            obs: r.obs,
            fut: r.fut,
            transform: r.transform,
            pattern_label: r.pattern_label,
        };
        match r.split.as_str() {
            "train" => split.train.push(s),
            "test" => split.test.push(s),
            other => return Err(Error::Contract(format!("unknown split tag {other:?}"))),
        }
    }
    split.validate()?;
    Ok(split)
}

pub fn save_dataset<T: Scalar>(split: &DatasetSplit<T>, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_json(split)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset<T: Scalar>(path: &Path) -> Result<DatasetSplit<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_json(&text)
}
