//! The unified exo / transition / ego stream and the sub-task windows cut from it.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clip::FrameClip;
use crate::error::{Error, Result};
use crate::geometry::PoseTrack;
use crate::world::EpisodeRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Exo,
    Interp,
    Ego,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubTaskKind {
    ExoToInterp,
    InterpToEgo,
    ExoToEgoDirect,
}

/// Which conditioning recipe a run uses: frame + pose interpolation, frame-only
/// interpolation, or direct exo-to-ego prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "FPI")]
    Fpi,
    #[serde(rename = "FI")]
    Fi,
    Direct,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Fpi => "FPI",
            Ablation::Fi => "FI",
            Ablation::Direct => "Direct",
        }
    }

    pub fn training_mode(self) -> TrainingMode {
        match self {
            Ablation::Direct => TrainingMode::Direct,
            Ablation::Fpi | Ablation::Fi => TrainingMode::Finetune,
        }
    }

    pub fn uses_transition(self) -> bool {
        !matches!(self, Ablation::Direct)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FPI" => Ok(Ablation::Fpi),
            "FI" => Ok(Ablation::Fi),
            "Direct" => Ok(Ablation::Direct),
            other => Err(Error::Mode(format!("ablation `{other}` (expected FPI, FI or Direct)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    Finetune,
    Direct,
}

/// `S = [X, I, G]` with its pose stream `P = (Px, Pi, Pg)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedSequence {
    pub frames: FrameClip,
    pub poses: PoseTrack,
    pub labels: Vec<Segment>,
}

impl UnifiedSequence {
    pub fn segment_len(&self) -> usize {
        self.frames.frames / 3
    }

    /// Splits back into `(X, I, G)` clips and their pose tracks.
    pub fn split(&self) -> Result<[(FrameClip, PoseTrack); 3]> {
        let t = self.segment_len();
        let part = |k: usize| -> Result<(FrameClip, PoseTrack)> {
            if self.labels[k * t..(k + 1) * t].iter().any(|l| *l != SEGMENTS[k]) {
                return Err(Error::Size(format!("segment {k} labels are not contiguous")));
            }
            Ok((
                self.frames.slice(k * t..(k + 1) * t)?,
                PoseTrack::new(self.poses.poses[k * t..(k + 1) * t].to_vec())?,
            ))
        };
        Ok([part(0)?, part(1)?, part(2)?])
    }

    pub fn from_parts(parts: &[(FrameClip, PoseTrack); 3]) -> Result<Self> {
        let t = parts[0].0.frames;
        if parts.iter().any(|(c, p)| c.frames != t || p.len() != t) {
            return Err(Error::Size("segments must all have the same length".into()));
        }
        Ok(UnifiedSequence {
            frames: FrameClip::concat(&[&parts[0].0, &parts[1].0, &parts[2].0])?,
            poses: PoseTrack::concat(&[&parts[0].1, &parts[1].1, &parts[2].1])?,
            labels: segment_labels(t),
        })
    }
}

const SEGMENTS: [Segment; 3] = [Segment::Exo, Segment::Interp, Segment::Ego];

pub fn segment_labels(t: usize) -> Vec<Segment> {
    SEGMENTS.iter().flat_map(|s| std::iter::repeat_n(*s, t)).collect()
}

/// A `2T`-frame training window.
///
/// `positions` are the frames' indices in the unified `3T` stream; `pose_zeroed`
/// marks frames whose pose embedding is replaced by zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SubTaskPair {
    pub kind: SubTaskKind,
    pub frames: FrameClip,
    pub poses: PoseTrack,
    pub labels: Vec<Segment>,
    pub positions: Vec<usize>,
    pub pose_zeroed: Vec<bool>,
}

impl SubTaskPair {
    pub fn len(&self) -> usize {
        self.frames.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames.frames == 0
    }
}

/// `I = [x_T, I', g_1]` for an interior clip of `len - 2` frames.
pub fn assemble_interp_segment(x_last: &[f32], g_first: &[f32], interior: &FrameClip, len: usize) -> Result<FrameClip> {
    if len < 2 || interior.frames != len - 2 {
        return Err(Error::Size(format!(
            "interior must have T-2 = {} frames, got {}",
            len.saturating_sub(2),
            interior.frames
        )));
    }
    let n = interior.frame_len();
    if x_last.len() != n || g_first.len() != n {
        return Err(Error::Shape(format!(
            "boundary frames have {} and {} values, interior frames {n}",
            x_last.len(),
            g_first.len()
        )));
    }
    let mut data = Vec::with_capacity(len * n);
    data.extend_from_slice(x_last);
    data.extend_from_slice(&interior.data);
    data.extend_from_slice(g_first);
    FrameClip::new(len, interior.channels, interior.height, interior.width, data)
}

pub fn build_unified(episode: &EpisodeRecord) -> Result<UnifiedSequence> {
    episode.validate()?;
    UnifiedSequence::from_parts(&[
        (episode.exo.clone(), episode.exo_poses.clone()),
        (episode.interp.clone(), episode.interp_poses.clone()),
        (episode.ego.clone(), episode.ego_poses.clone()),
    ])
}

fn window(seq: &UnifiedSequence, kind: SubTaskKind, segments: [usize; 2]) -> Result<SubTaskPair> {
    let t = seq.segment_len();
    let positions: Vec<usize> = segments.iter().flat_map(|&s| s * t..(s + 1) * t).collect();
    let n = seq.frames.frame_len();
    let mut data = Vec::with_capacity(positions.len() * n);
    for &p in &positions {
        data.extend_from_slice(seq.frames.frame(p));
    }
    Ok(SubTaskPair {
        kind,
        frames: FrameClip::new(
            positions.len(),
            seq.frames.channels,
            seq.frames.height,
            seq.frames.width,
            data,
        )?,
        poses: PoseTrack::new(positions.iter().map(|&p| seq.poses.poses[p]).collect())?,
        labels: positions.iter().map(|&p| seq.labels[p]).collect(),
        pose_zeroed: vec![false; positions.len()],
        positions,
    })
}

pub fn subtask_window(seq: &UnifiedSequence, kind: SubTaskKind) -> Result<SubTaskPair> {
    match kind {
        SubTaskKind::ExoToInterp => window(seq, kind, [0, 1]),
        SubTaskKind::InterpToEgo => window(seq, kind, [1, 2]),
        SubTaskKind::ExoToEgoDirect => window(seq, kind, [0, 2]),
    }
}

/// Fine-tuning draws one of the two transition windows with probability 1/2;
/// direct mode always yields the exo-to-ego pair.
pub fn sample_subtask<R: Rng + ?Sized>(seq: &UnifiedSequence, rng: &mut R, mode: TrainingMode) -> Result<SubTaskPair> {
    let kind = match mode {
        TrainingMode::Direct => SubTaskKind::ExoToEgoDirect,
        TrainingMode::Finetune => {
            if rng.random_bool(0.5) {
                SubTaskKind::ExoToInterp
            } else {
                SubTaskKind::InterpToEgo
            }
        }
    };
    subtask_window(seq, kind)
}

/// Which frames of a window keep their true pose under `ablation`.
///
/// FPI keeps every pose; FI and Direct keep ego poses only.
pub fn pose_mask(labels: &[Segment], ablation: Ablation) -> Vec<bool> {
    labels
        .iter()
        .map(|l| match ablation {
            Ablation::Fpi => false,
            Ablation::Fi | Ablation::Direct => *l != Segment::Ego,
        })
        .collect()
}

pub fn apply_fi_pose_masking(mut pair: SubTaskPair, ablation: Ablation) -> SubTaskPair {
    if ablation != Ablation::Fpi {
        pair.pose_zeroed = pose_mask(&pair.labels, ablation);
    }
    pair
}

/// Frame layout used at inference: the segments present, their stream positions,
/// and the per-frame pose mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceLayout {
    pub labels: Vec<Segment>,
    pub positions: Vec<usize>,
    pub pose_zeroed: Vec<bool>,
}

impl InferenceLayout {
    /// `[X, I, G]` for the interpolating recipes, `[X, G]` for Direct.
    pub fn for_ablation(t: usize, ablation: Ablation) -> Self {
        let segments: &[usize] = if ablation.uses_transition() {
            &[0, 1, 2]
        } else {
            &[0, 2]
        };
        let positions: Vec<usize> = segments.iter().flat_map(|&s| s * t..(s + 1) * t).collect();
        let labels: Vec<Segment> = positions.iter().map(|&p| SEGMENTS[p / t]).collect();
        let pose_zeroed = pose_mask(&labels, ablation);
        InferenceLayout {
            labels,
            positions,
            pose_zeroed,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}
