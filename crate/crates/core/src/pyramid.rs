//! Temporal Gaussian pyramids and fixed-width audio/keypoint segments.
//!
//! Each level blurs the previous one with a 7-tap box filter (k = 3) and keeps
//! every other sample: `x[i][t] = mean(x[i-1][2t-3 ..= 2t+3])`, with replicate
//! padding at both ends. Level 1 is the input. Audio uses the same operator on
//! its own 4x finer clock, so every level keeps four audio rows per keypoint row.

use crate::diffnum::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{AvClip, SEGMENT_AUDIO_FRAMES, SEGMENT_FRAMES};
use crate::{AUDIO_PER_VIDEO, FRAME_DIM, KEYPOINT_STRIDE, MFCC_DIM, NUM_LEVELS};

/// Half-width of the blur.
pub const BLUR_RADIUS: usize = 3;
/// Half-width of a keypoint segment.
pub const SEGMENT_RADIUS: usize = SEGMENT_FRAMES / 2;

/// Smallest input length that leaves at least one segment at the top level.
pub fn min_length(levels: usize) -> usize {
    (1 << (levels - 1)) * SEGMENT_FRAMES
}

/// Level lengths `floor(len / 2^(i-1))` for `i = 1..=levels`.
pub fn level_lengths(len: usize, levels: usize) -> Vec<usize> {
    (0..levels).map(|i| len >> i).collect()
}

/// One blur-and-decimate step on a `[len, channels]` tensor (direct loop).
///
/// The mean is taken relative to the centre sample so constant inputs come
/// back bit for bit.
pub fn downsample(x: &Tensor) -> Tensor {
    let (len, ch) = (x.shape()[0], x.shape()[1]);
    let out_len = len / 2;
    let mut out = vec![0.0; out_len * ch];
    let last = len as isize - 1;
    let inv = 1.0 / (2 * BLUR_RADIUS + 1) as f64;
    for t in 0..out_len {
        let centre = &x.data()[2 * t * ch..(2 * t + 1) * ch];
        for tau in -(BLUR_RADIUS as isize)..=BLUR_RADIUS as isize {
            let src = (2 * t as isize + tau).clamp(0, last) as usize;
            for c in 0..ch {
                out[t * ch + c] += (x.data()[src * ch + c] - centre[c]) * inv;
            }
        }
        for c in 0..ch {
            out[t * ch + c] += centre[c];
        }
    }
    Tensor::new(vec![out_len, ch], out).expect("shape computed above")
}

/// All `levels` of the pyramid of a `[len, channels]` sequence.
pub fn build_pyramid(x: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    if x.ndim() != 2 {
        return Err(Error::Shape(format!("pyramid input must be [len, channels], got {:?}", x.shape())));
    }
    let need = min_length(levels);
    if x.shape()[0] < need {
        return Err(Error::TooShort(format!(
            "a {levels}-level pyramid needs at least {need} frames, got {}",
            x.shape()[0]
        )));
    }
    let mut out = vec![x.clone()];
    for _ in 1..levels {
        let next = downsample(out.last().unwrap());
        out.push(next);
    }
    Ok(out)
}

/// Differentiable blur-and-decimate along axis 1 of `[batch, len, channels]`,
/// composed from replicate padding and average pooling.
pub fn downsample_var(g: &mut Graph, x: Var) -> Result<Var> {
    let len = g.shape(x)[1];
    let padded = g.pad_replicate(x, 1, BLUR_RADIUS, BLUR_RADIUS)?;
    let pooled = g.avg_pool(padded, 1, 2 * BLUR_RADIUS + 1, 2)?;
    g.slice(pooled, 1, 0, len / 2)
}

/// Differentiable pyramid of a `[batch, len, channels]` variable.
pub fn build_pyramid_var(g: &mut Graph, x: Var, levels: usize) -> Result<Vec<Var>> {
    let len = g.shape(x)[1];
    let need = min_length(levels);
    if len < need {
        return Err(Error::TooShort(format!("a {levels}-level pyramid needs at least {need} frames, got {len}")));
    }
    let mut out = vec![x];
    for _ in 1..levels {
        let next = downsample_var(g, *out.last().unwrap())?;
        out.push(next);
    }
    Ok(out)
}

/// Paired audio and keypoint pyramids of one clip.
#[derive(Clone, Debug)]
pub struct AvPyramid {
    pub keypoints: Vec<Tensor>,
    pub audio: Vec<Tensor>,
}

impl AvPyramid {
    pub fn from_clip(clip: &AvClip, levels: usize) -> Result<Self> {
        Ok(Self {
            keypoints: build_pyramid(&clip.keypoints.to_tensor(), levels)?,
            audio: build_pyramid(&clip.audio.to_tensor(), levels)?,
        })
    }

    pub fn levels(&self) -> usize {
        self.keypoints.len()
    }

    /// Keypoint rows at 1-based `level`.
    pub fn len(&self, level: usize) -> usize {
        self.keypoints[level - 1].shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn keypoint_segment(&self, level: usize, center: usize) -> Vec<f64> {
        keypoint_window(&self.keypoints[level - 1], center)
    }

    pub fn audio_segment(&self, level: usize, center: usize) -> Vec<f64> {
        audio_window(&self.audio[level - 1], center)
    }
}

/// 5 rows of a `[len, 60]` tensor centred on `center`, edge-replicated.
pub fn keypoint_window(x: &Tensor, center: usize) -> Vec<f64> {
    window_rows(x, center as isize - SEGMENT_RADIUS as isize, SEGMENT_FRAMES)
}

/// 20 rows of a `[4 len, 26]` tensor covering keypoint rows `center-2..=center+2`.
pub fn audio_window(a: &Tensor, center: usize) -> Vec<f64> {
    let first = (center as isize - SEGMENT_RADIUS as isize) * AUDIO_PER_VIDEO as isize;
    window_rows(a, first, SEGMENT_AUDIO_FRAMES)
}

fn window_rows(x: &Tensor, first: isize, count: usize) -> Vec<f64> {
    let last = x.shape()[0] as isize - 1;
    (0..count as isize).flat_map(|j| x.row((first + j).clamp(0, last) as usize).iter().copied()).collect()
}

/// Level-local time indices (edge-clamped) of the keypoint windows at `centers`.
pub fn keypoint_window_indices(len: usize, centers: &[usize]) -> Vec<usize> {
    window_indices(len, centers, SEGMENT_FRAMES, 1, SEGMENT_RADIUS)
}

/// Audio-clock indices (edge-clamped) of the audio windows at keypoint `centers`.
pub fn audio_window_indices(audio_len: usize, centers: &[usize]) -> Vec<usize> {
    window_indices(audio_len, centers, SEGMENT_AUDIO_FRAMES, AUDIO_PER_VIDEO, SEGMENT_RADIUS * AUDIO_PER_VIDEO)
}

fn window_indices(len: usize, centers: &[usize], width: usize, scale: usize, back: usize) -> Vec<usize> {
    let last = len as isize - 1;
    centers
        .iter()
        .flat_map(|&c| {
            let first = (c * scale) as isize - back as isize;
            (0..width as isize).map(move |j| (first + j).clamp(0, last) as usize)
        })
        .collect()
}

/// Differentiable windows: `[batch, len, ch]` -> `[batch * n, width * ch]`
/// where `idx` holds `n * width` time indices.
pub fn gather_windows(g: &mut Graph, x: Var, idx: &[usize], width: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, ch) = (shape[0], shape[2]);
    let n = idx.len() / width;
    let w = g.index_select(x, 1, idx)?;
    g.reshape(w, &[b * n, width * ch])
}

/// Zeroes the Jacobian entries of flattened keypoint frames in place.
pub fn mask_jacobians(values: &mut [f64]) {
    for (i, v) in values.iter_mut().enumerate() {
        if i % KEYPOINT_STRIDE >= 2 {
            *v = 0.0;
        }
    }
}

/// One syncer input: a 5-frame keypoint window and its 20-frame audio window.
#[derive(Clone, Debug, PartialEq)]
pub struct AvSegment {
    pub level: usize,
    pub center: usize,
    pub keypoints: Vec<f64>,
    pub audio: Vec<f64>,
}

impl AvSegment {
    /// Wall-clock span in milliseconds.
    pub fn span_ms(&self) -> usize {
        200 << (self.level - 1)
    }
}

/// Segment centres at `stride` spacing. With `interior_only`, only centres
/// whose whole window lies inside the level are kept.
pub fn segment_centers(len: usize, stride: usize, interior_only: bool) -> Vec<usize> {
    let (lo, hi) = if interior_only {
        if len < SEGMENT_FRAMES {
            return Vec::new();
        }
        (SEGMENT_RADIUS, len - 1 - SEGMENT_RADIUS)
    } else {
        (0, len - 1)
    };
    (lo..=hi).step_by(stride.max(1)).collect()
}

pub fn extract_segments(p: &AvPyramid, level: usize, stride: usize, interior_only: bool) -> Result<Vec<AvSegment>> {
    if level == 0 || level > p.levels() {
        return Err(Error::Invalid(format!("level {level} outside 1..={}", p.levels())));
    }
    Ok(segment_centers(p.len(level), stride, interior_only)
        .into_iter()
        .map(|center| AvSegment {
            level,
            center,
            keypoints: p.keypoint_segment(level, center),
            audio: p.audio_segment(level, center),
        })
        .collect())
}

const _: () = assert!(NUM_LEVELS == 4 && FRAME_DIM == 60 && MFCC_DIM == 26);
