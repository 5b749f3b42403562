//! Seeded multi-granularity sequence datasets and misalignment
//! perturbations.
//!
//! Every frame starts as isotropic Gaussian noise. The intervals of the
//! discriminative level `l*` come in sibling pairs; for pair `m` a video
//! of class `c` receives a constant class vector `+a u_{c,m}` over the
//! first sibling and, with `balanced` set, `-a u_{c,m}` over the second,
//! so every coarser node averages the class signal away while every
//! level-`l*` node separates all classes. [`Placement::Single`] restricts
//! class `c` to interval `(c - 1) mod 2^(l*-1)` and its sibling. With `detail > 0` each
//! level-`l*` interval also carries a per-video nuisance `+w` on its first
//! half and `-w` on its second, which cancels at `l*` and below it
//! dominates the finer nodes. The class is then readable at level `l*` and
//! nowhere else.
//!
//! The optional motion stream repeats the construction with independent
//! noise and directions at its own level. With two streams the per-class
//! amplitudes alternate between the streams, so each stream separates
//! some classes better than the other.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{
    write_feature_file, write_manifest, DataError, DatasetManifest, Split, Stream, StreamFeatureSequence, VideoRecord,
};
use crate::hierarchy::{build_intervals, Hierarchy, NodeInterval, MAX_DEPTH};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error("shift {shift} exceeds the {frames} frames of '{video_id}'")]
    ShiftTooLarge {
        video_id: String,
        shift: i64,
        frames: usize,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which level-`l*` intervals carry the class signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Every sibling pair, with its own class direction.
    #[default]
    Every,
    /// Only interval `(c - 1) mod 2^(l*-1)` and its sibling.
    Single,
}

impl std::str::FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "every" => Ok(Placement::Every),
            "single" => Ok(Placement::Single),
            other => Err(format!("unknown placement '{other}' (expected every or single)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub dim: usize,
    /// Discriminative level of the appearance stream.
    pub level: usize,
    pub amplitude: f64,
    pub sigma: f64,
    /// Amplitude of the per-video nuisance that hides the class below `level`.
    pub detail: f64,
    /// Mirror the class signal with opposite sign in the sibling interval.
    pub balanced: bool,
    #[serde(default)]
    pub placement: Placement,
    pub streams: usize,
    /// Discriminative level of the motion stream; `None` picks `level + 1`
    /// when the frames allow it.
    pub motion_level: Option<usize>,
    /// Amplitude multiplier of the weaker stream for each class.
    pub complement: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            per_class: 50,
            frames: 32,
            dim: 16,
            level: 2,
            amplitude: 2.0,
            sigma: 1.0,
            detail: 1.0,
            balanced: true,
            placement: Placement::Every,
            streams: 1,
            motion_level: None,
            complement: 0.35,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::SpecInvalid(m));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.per_class < 2 {
            return bad("per_class must be at least 2 for a train/test split".into());
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return bad(format!("amplitude must be positive, got {}", self.amplitude));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.detail >= 0.0 && self.detail.is_finite()) {
            return bad(format!("detail must be non-negative, got {}", self.detail));
        }
        if !(self.complement >= 0.0 && self.complement.is_finite()) {
            return bad(format!("complement must be non-negative, got {}", self.complement));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if !(1..=2).contains(&self.streams) {
            return bad(format!("streams must be 1 or 2, got {}", self.streams));
        }
        for level in std::iter::once(self.level).chain(self.motion_level) {
            if level == 0 || level > MAX_DEPTH {
                return bad(format!("level {level} outside 1..={MAX_DEPTH}"));
            }
            if self.frames < 1 << (level - 1) {
                return bad(format!("{} frames cannot fill level {level}", self.frames));
            }
        }
        Ok(())
    }

    pub fn resolved_motion_level(&self) -> usize {
        self.motion_level
            .unwrap_or(if self.level < MAX_DEPTH && self.frames >= 1 << self.level {
                self.level + 1
            } else {
                self.level
            })
    }

    /// Videos of each class placed in the training split.
    pub fn train_per_class(&self) -> usize {
        ((self.per_class as f64 * self.train_fraction).round() as usize).clamp(1, self.per_class - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub video_id: String,
    pub label: usize,
    pub split: Split,
    pub appearance: StreamFeatureSequence,
    pub motion: Option<StreamFeatureSequence>,
}

impl SynthVideo {
    pub fn stream(&self, stream: Stream) -> Option<&StreamFeatureSequence> {
        match stream {
            Stream::Appearance => Some(&self.appearance),
            Stream::Motion => self.motion.as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub videos: Vec<SynthVideo>,
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SynthVideo> + '_ {
        self.videos.iter().filter(move |v| v.split == split)
    }

    /// Manifest with paths relative to the dataset directory.
    pub fn manifest(&self) -> Result<DatasetManifest, DataError> {
        let records = self
            .videos
            .iter()
            .map(|v| VideoRecord {
                video_id: v.video_id.clone(),
                label: v.label,
                appearance: Some(feature_path(Stream::Appearance, &v.video_id)),
                motion: v.motion.as_ref().map(|_| feature_path(Stream::Motion, &v.video_id)),
                split: v.split,
            })
            .collect();
        let names = (1..=self.spec.num_classes).map(|c| (c, format!("class{c}"))).collect();
        DatasetManifest::new(records, Some(names))
    }

    /// Writes every feature file and `manifest.jsonl` under `dir`; returns
    /// the written paths, manifest last.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
        let mut written = Vec::new();
        for stream in Stream::ALL {
            if self.videos.iter().any(|v| v.stream(stream).is_some()) {
                let sub = dir.join(stream.as_str());
                fs::create_dir_all(&sub).map_err(|e| DataError::io(&sub, e))?;
            }
        }
        for v in &self.videos {
            for stream in Stream::ALL {
                if let Some(seq) = v.stream(stream) {
                    let path = dir.join(feature_path(stream, &v.video_id));
                    write_feature_file(seq, &path)?;
                    written.push(path);
                }
            }
        }
        let path = dir.join(MANIFEST_FILE);
        write_manifest(&self.manifest()?, &path)?;
        written.push(path);
        Ok(written)
    }
}

fn feature_path(stream: Stream, video_id: &str) -> PathBuf {
    PathBuf::from(stream.as_str()).join(format!("{video_id}.gpf"))
}

struct StreamPlan {
    /// Class directions, index `[c - 1][sibling pair]`.
    directions: Vec<Vec<Vec<f64>>>,
    /// Amplitude per class, index `c - 1`.
    amplitudes: Vec<f64>,
    /// Level-`level` intervals, and their two halves when the nuisance applies.
    intervals: Vec<NodeInterval>,
    halves: Option<Vec<NodeInterval>>,
}

fn unit_directions(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn plan(spec: &SynthSpec, level: usize, rng: &mut ChaCha8Rng, strong_odd: bool) -> Result<StreamPlan, SynthError> {
    let depth_intervals = build_intervals(spec.frames, level).map_err(|e| SynthError::SpecInvalid(e.to_string()))?;
    let h = Hierarchy::new(level).map_err(|e| SynthError::SpecInvalid(e.to_string()))?;
    let intervals = depth_intervals[h.level_positions(level)].to_vec();
    let halves = if spec.detail > 0.0 && level < MAX_DEPTH && spec.frames >= 1 << level {
        let finer = build_intervals(spec.frames, level + 1).map_err(|e| SynthError::SpecInvalid(e.to_string()))?;
        let fh = Hierarchy::new(level + 1).map_err(|e| SynthError::SpecInvalid(e.to_string()))?;
        Some(finer[fh.level_positions(level + 1)].to_vec())
    } else {
        None
    };
    let amplitudes = (1..=spec.num_classes)
        .map(|c| {
            let strong = spec.streams == 1 || (c % 2 == 1) == strong_odd;
            spec.amplitude * if strong { 1.0 } else { spec.complement }
        })
        .collect();
    Ok(StreamPlan {
        directions: (0..spec.num_classes)
            .map(|_| unit_directions(rng, intervals.len().div_ceil(2), spec.dim))
            .collect(),
        amplitudes,
        intervals,
        halves,
    })
}

fn add_constant(values: &mut [f64], dim: usize, iv: &NodeInterval, v: &[f64], scale: f64) {
    for t in iv.start..iv.end {
        for (x, &d) in values[t * dim..(t + 1) * dim].iter_mut().zip(v) {
            *x += scale * d;
        }
    }
}

fn render(spec: &SynthSpec, p: &StreamPlan, label: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let dim = spec.dim;
    let mut values: Vec<f64> = (0..spec.frames * dim)
        .map(|_| spec.sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let a = p.amplitudes[label - 1];
    let dirs = &p.directions[label - 1];
    let slots = p.intervals.len();
    match spec.placement {
        Placement::Every => {
            for (pair, u) in p.intervals.chunks(2).zip(dirs) {
                add_constant(&mut values, dim, &pair[0], u, a);
                if spec.balanced && pair.len() == 2 {
                    add_constant(&mut values, dim, &pair[1], u, -a);
                }
            }
        }
        Placement::Single => {
            let k = (label - 1) % slots;
            let u = &dirs[k / 2];
            add_constant(&mut values, dim, &p.intervals[k], u, a);
            if spec.balanced && slots > 1 {
                add_constant(&mut values, dim, &p.intervals[k ^ 1], u, -a);
            }
        }
    }
    if let Some(halves) = &p.halves {
        for pair in halves.chunks(2) {
            let w: Vec<f64> = (0..dim)
                .map(|_| spec.detail * rng.sample::<f64, _>(StandardNormal))
                .collect();
            add_constant(&mut values, dim, &pair[0], &w, 1.0);
            add_constant(&mut values, dim, &pair[1], &w, -1.0);
        }
    }
    values.into_iter().map(|x| x as f32).collect()
}

fn video_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds the dataset in memory; identical specs give identical datasets.
pub fn gen_dataset(spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let mut setup = video_rng(spec.seed, 0);
    let appearance = plan(spec, spec.level, &mut setup, true)?;
    let motion = if spec.streams == 2 {
        Some(plan(spec, spec.resolved_motion_level(), &mut setup, false)?)
    } else {
        None
    };
    let train = spec.train_per_class();
    let mut splits = Vec::with_capacity(spec.num_classes * spec.per_class);
    for _ in 0..spec.num_classes {
        let mut order: Vec<usize> = (0..spec.per_class).collect();
        order.shuffle(&mut setup);
        let mut s = vec![Split::Test; spec.per_class];
        for &i in &order[..train] {
            s[i] = Split::Train;
        }
        splits.extend(s);
    }

    let videos = (0..spec.num_classes * spec.per_class)
        .into_par_iter()
        .map(|idx| {
            let label = idx / spec.per_class + 1;
            let video_id = format!("c{label:02}_v{:03}", idx % spec.per_class + 1);
            let mut rng = video_rng(spec.seed, 2 * idx as u64 + 1);
            let appearance = StreamFeatureSequence::new(
                video_id.clone(),
                Stream::Appearance,
                spec.dim,
                render(spec, &appearance, label, &mut rng),
            )?;
            let motion = match &motion {
                Some(p) => {
                    let mut rng = video_rng(spec.seed, 2 * idx as u64 + 2);
                    Some(StreamFeatureSequence::new(
                        video_id.clone(),
                        Stream::Motion,
                        spec.dim,
                        render(spec, p, label, &mut rng),
                    )?)
                }
                None => None,
            };
            Ok(SynthVideo {
                video_id,
                label,
                split: splits[idx],
                appearance,
                motion,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(SynthDataset {
        spec: spec.clone(),
        videos,
    })
}

/// Circular shift: frame `t` of the result is frame `t - shift (mod T)` of
/// the input. Shifts of `T` or `-T` are the identity.
pub fn misalign(seq: &StreamFeatureSequence, shift: i64) -> Result<StreamFeatureSequence, SynthError> {
    let frames = seq.frame_count();
    if shift.unsigned_abs() > frames as u64 {
        return Err(SynthError::ShiftTooLarge {
            video_id: seq.video_id().to_string(),
            shift,
            frames,
        });
    }
    let s = shift.rem_euclid(frames as i64) as usize;
    let dim = seq.dim();
    let mut values = Vec::with_capacity(seq.values().len());
    for t in 0..frames {
        let src = (t + frames - s) % frames;
        values.extend_from_slice(seq.frame(src));
    }
    Ok(StreamFeatureSequence::new(seq.video_id(), seq.stream(), dim, values)?)
}
