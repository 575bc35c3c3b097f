use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AUDIO_SEG_DIM, MOTION_SEG_DIM};
use crate::diffnum::Tensor;
use crate::error::{Error, Result};
use crate::features::SEGMENT_FRAMES;
use crate::pyramid::{AvPyramid, SEGMENT_RADIUS};

/// Where negatives come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    /// Misaligned windows of the anchor's own clip.
    Hard,
    /// Windows from other clips.
    CrossSample,
}

impl MiningMode {
    /// Mode and negative count used for each pyramid level.
    pub fn for_level(level: usize) -> (Self, usize) {
        if level >= 4 {
            (MiningMode::CrossSample, 48)
        } else {
            (MiningMode::Hard, 12)
        }
    }
}

/// Minimum centre distance between a hard negative and its anchor.
pub const MIN_NEGATIVE_DISTANCE: usize = 2;

#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub level: usize,
    /// `[B, 520]`
    pub audio: Tensor,
    /// `[B, 300]`, aligned with `audio`.
    pub positive: Tensor,
    /// `[B * N, 300]`, anchor-major.
    pub negatives: Tensor,
    pub n_neg: usize,
    /// Mode each anchor's negatives were actually drawn with.
    pub modes: Vec<MiningMode>,
    /// `(clip, centre)` of each anchor.
    pub anchors: Vec<(usize, usize)>,
    /// `(clip, centre)` of each negative, anchor-major.
    pub negative_sources: Vec<(usize, usize)>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn interior(len: usize) -> Option<(usize, usize)> {
    (len >= SEGMENT_FRAMES).then(|| (SEGMENT_RADIUS, len - 1 - SEGMENT_RADIUS))
}

/// Samples `batch_size` anchors with `n_neg` negatives each at `level`.
///
/// In hard mode an anchor whose clip cannot supply `n_neg` distinct
/// negatives at distance >= 2 falls back to cross-sample negatives.
pub fn mine_batch<R: Rng>(
    pyramids: &[AvPyramid],
    level: usize,
    n_neg: usize,
    mode: MiningMode,
    batch_size: usize,
    rng: &mut R,
) -> Result<ContrastiveBatch> {
    if n_neg == 0 || batch_size == 0 {
        return Err(Error::Invalid("mining needs at least one anchor and one negative".into()));
    }
    if let Some(p) = pyramids.iter().find(|p| p.levels() < level) {
        return Err(Error::Invalid(format!("pyramid has {} levels, level {level} requested", p.levels())));
    }
    let usable: Vec<usize> = (0..pyramids.len()).filter(|&i| interior(pyramids[i].len(level)).is_some()).collect();
    if usable.is_empty() {
        return Err(Error::TooShort(format!("no clip has {SEGMENT_FRAMES} frames at level {level}")));
    }
    let cross_ok = usable.len() >= 2;
    if mode == MiningMode::CrossSample && !cross_ok {
        return Err(Error::Invalid(format!(
            "cross-sample mining needs at least 2 usable clips at level {level}, found {}",
            usable.len()
        )));
    }

    let mut audio = Vec::with_capacity(batch_size * AUDIO_SEG_DIM);
    let mut positive = Vec::with_capacity(batch_size * MOTION_SEG_DIM);
    let mut negatives = Vec::with_capacity(batch_size * n_neg * MOTION_SEG_DIM);
    let mut anchors = Vec::with_capacity(batch_size);
    let mut modes = Vec::with_capacity(batch_size);
    let mut sources = Vec::with_capacity(batch_size * n_neg);
    let mut fell_back = 0usize;

    for _ in 0..batch_size {
        let ci = usable[rng.random_range(0..usable.len())];
        let p = &pyramids[ci];
        let (lo, hi) = interior(p.len(level)).expect("usable");
        let c = rng.random_range(lo..=hi);
        audio.extend(p.audio_segment(level, c));
        positive.extend(p.keypoint_segment(level, c));
        anchors.push((ci, c));

        let far: Vec<usize> = (lo..=hi).filter(|&d| d.abs_diff(c) >= MIN_NEGATIVE_DISTANCE).collect();
        let mut m = mode;
        if m == MiningMode::Hard && far.len() < n_neg {
            if !cross_ok {
                return Err(Error::TooShort(format!(
                    "clip {ci} supplies {} hard negatives at level {level}, {n_neg} needed, and no other clip exists",
                    far.len()
                )));
            }
            m = MiningMode::CrossSample;
            fell_back += 1;
        }
        match m {
            MiningMode::Hard => {
                for j in sample(rng, far.len(), n_neg) {
                    negatives.extend(p.keypoint_segment(level, far[j]));
                    sources.push((ci, far[j]));
                }
            }
            MiningMode::CrossSample => {
                for _ in 0..n_neg {
                    let mut oj = usable[rng.random_range(0..usable.len() - 1)];
                    if oj == ci {
                        oj = *usable.last().expect("non-empty");
                    }
                    let (olo, ohi) = interior(pyramids[oj].len(level)).expect("usable");
                    let oc = rng.random_range(olo..=ohi);
                    negatives.extend(pyramids[oj].keypoint_segment(level, oc));
                    sources.push((oj, oc));
                }
            }
        }
        modes.push(m);
    }
    if fell_back > 0 {
        warn!("level {level}: {fell_back} anchor(s) fell back to cross-sample negatives (clip too short for {n_neg})");
    }
    Ok(ContrastiveBatch {
        level,
        audio: Tensor::new(vec![batch_size, AUDIO_SEG_DIM], audio)?,
        positive: Tensor::new(vec![batch_size, MOTION_SEG_DIM], positive)?,
        negatives: Tensor::new(vec![batch_size * n_neg, MOTION_SEG_DIM], negatives)?,
        n_neg,
        modes,
        anchors,
        negative_sources: sources,
    })
}
