use crate::diffnum::Tensor;
use crate::error::{Error, Result};
use crate::{AUDIO_PER_VIDEO, FRAME_DIM, KEYPOINT_STRIDE, MFCC_DIM, NUM_KEYPOINTS};

/// Audio frames in a 200 ms window (5 video frames).
pub const SEGMENT_AUDIO_FRAMES: usize = 20;
/// Keypoint frames in a 200 ms window.
pub const SEGMENT_FRAMES: usize = 5;
/// Valid positions live in this symmetric range (normalized image coordinates with margin).
pub const POSITION_LIMIT: f64 = 1.5;

fn check_rows(what: &str, data: &[f64], width: usize) -> Result<usize> {
    if data.is_empty() || !data.len().is_multiple_of(width) {
        return Err(Error::Shape(format!(
            "{what}: {} values is not a positive multiple of {width}",
            data.len()
        )));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: what.to_string(),
            detail: format!("frame {} value {}", i / width, i % width),
        });
    }
    Ok(data.len() / width)
}

/// `T x 60` keypoint trajectory, flattened per frame as
/// `(x, y, J11, J12, J21, J22)` for each of the 10 keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSequence {
    data: Vec<f64>,
}

impl KeypointSequence {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        check_rows("keypoint sequence", &data, FRAME_DIM)?;
        Ok(Self { data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.ndim() != 2 || t.shape()[1] != FRAME_DIM {
            return Err(Error::Shape(format!("keypoint tensor must be [T, {FRAME_DIM}], got {:?}", t.shape())));
        }
        Self::new(t.data().to_vec())
    }

    pub fn len(&self) -> usize {
        self.data.len() / FRAME_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * FRAME_DIM..(t + 1) * FRAME_DIM]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn position(&self, t: usize, k: usize) -> (f64, f64) {
        let f = self.frame(t);
        (f[k * KEYPOINT_STRIDE], f[k * KEYPOINT_STRIDE + 1])
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), FRAME_DIM], self.data.clone()).expect("validated on construction")
    }

    /// Positions all inside `[-1.5, 1.5]`.
    pub fn positions_in_range(&self) -> bool {
        (0..self.len()).all(|t| {
            (0..NUM_KEYPOINTS).all(|k| {
                let (x, y) = self.position(t, k);
                x.abs() <= POSITION_LIMIT && y.abs() <= POSITION_LIMIT
            })
        })
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() || len == 0 {
            return Err(Error::Invalid(format!("slice {start}+{len} of {} frames", self.len())));
        }
        Ok(Self { data: self.data[start * FRAME_DIM..(start + len) * FRAME_DIM].to_vec() })
    }
}

/// `L x 26` MFCC track at a 10 ms hop.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatSequence {
    data: Vec<f64>,
}

impl AudioFeatSequence {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        check_rows("audio features", &data, MFCC_DIM)?;
        Ok(Self { data })
    }

    pub fn from_frames(frames: &[[f64; MFCC_DIM]]) -> Result<Self> {
        Self::new(frames.iter().flat_map(|f| f.iter().copied()).collect())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.ndim() != 2 || t.shape()[1] != MFCC_DIM {
            return Err(Error::Shape(format!("audio tensor must be [L, {MFCC_DIM}], got {:?}", t.shape())));
        }
        Self::new(t.data().to_vec())
    }

    pub fn len(&self) -> usize {
        self.data.len() / MFCC_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * MFCC_DIM..(i + 1) * MFCC_DIM]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), MFCC_DIM], self.data.clone()).expect("validated on construction")
    }

    /// Audio for video frames `start..start+len`.
    pub fn slice_video(&self, start: usize, len: usize) -> Result<Self> {
        let (a, n) = (start * AUDIO_PER_VIDEO, len * AUDIO_PER_VIDEO);
        if a + n > self.len() || n == 0 {
            return Err(Error::Invalid(format!("audio slice {a}+{n} of {} frames", self.len())));
        }
        Ok(Self { data: self.data[a * MFCC_DIM..(a + n) * MFCC_DIM].to_vec() })
    }
}

/// Trims an MFCC track to exactly `4 * frames` rows so that video frame `t`
/// owns audio rows `4t..4t+3`. Both clocks start at time zero, so surplus
/// rows are dropped from the end.
pub fn align(audio: &AudioFeatSequence, frames: usize) -> Result<AudioFeatSequence> {
    let need = AUDIO_PER_VIDEO * frames;
    if frames == 0 || audio.len() < need {
        return Err(Error::TooShort(format!(
            "alignment to {frames} video frames needs {need} audio frames, {} available",
            audio.len()
        )));
    }
    AudioFeatSequence::new(audio.data[..need * MFCC_DIM].to_vec())
}

/// The 20 audio rows of the 200 ms window centred on video frame `t`
/// (video frames `t-2..=t+2`), with replicate padding at the edges.
pub fn audio_segment(audio: &AudioFeatSequence, t: usize) -> Vec<f64> {
    let first = (t as isize - 2) * AUDIO_PER_VIDEO as isize;
    let last = audio.len() as isize - 1;
    (0..SEGMENT_AUDIO_FRAMES as isize)
        .flat_map(|j| audio.frame((first + j).clamp(0, last) as usize).iter().copied())
        .collect()
}

/// One talking-head clip: keypoints at 25 fps and the aligned MFCC track.
#[derive(Clone, Debug, PartialEq)]
pub struct AvClip {
    pub identity_id: String,
    pub clip_id: String,
    pub keypoints: KeypointSequence,
    pub audio: AudioFeatSequence,
}

impl AvClip {
    pub fn new(identity_id: String, clip_id: String, keypoints: KeypointSequence, audio: AudioFeatSequence) -> Result<Self> {
        let clip = Self { identity_id, clip_id, keypoints, audio };
        clip.validate()?;
        Ok(clip)
    }

    pub fn frames(&self) -> usize {
        self.keypoints.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.keypoints.len();
        if self.audio.len() != AUDIO_PER_VIDEO * t {
            return Err(Error::Invalid(format!(
                "clip `{}`: {} audio frames for {t} video frames (expected {})",
                self.clip_id,
                self.audio.len(),
                AUDIO_PER_VIDEO * t
            )));
        }
        Ok(())
    }

    /// Sub-clip over video frames `start..start+len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            identity_id: self.identity_id.clone(),
            clip_id: format!("{}@{start}", self.clip_id),
            keypoints: self.keypoints.slice(start, len)?,
            audio: self.audio.slice_video(start, len)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_audio(frames: usize) -> AudioFeatSequence {
        AudioFeatSequence::new((0..frames * MFCC_DIM).map(|i| (i / MFCC_DIM) as f64).collect()).unwrap()
    }

    #[test]
    fn align_to_forty_frames() {
        let a = align(&ramp_audio(170), 40).unwrap();
        assert_eq!(a.len(), 160);
        assert_eq!(a.frame(159)[0], 159.0);
    }

    #[test]
    fn align_reports_lengths() {
        let err = align(&ramp_audio(100), 40).unwrap_err().to_string();
        assert!(err.contains("160") && err.contains("100"), "{err}");
    }

    #[test]
    fn segment_is_twenty_frames_everywhere() {
        let a = ramp_audio(160);
        for t in [0, 1, 2, 20, 38, 39] {
            assert_eq!(audio_segment(&a, t).len(), 20 * MFCC_DIM);
        }
        let interior = audio_segment(&a, 10);
        assert_eq!(interior[0], 32.0);
        assert_eq!(interior[19 * MFCC_DIM], 51.0);
        let edge = audio_segment(&a, 0);
        assert_eq!(edge[0], 0.0);
        assert_eq!(edge[8 * MFCC_DIM], 0.0);
        assert_eq!(edge[9 * MFCC_DIM], 1.0);
        let end = audio_segment(&a, 39);
        assert_eq!(end[19 * MFCC_DIM], 159.0);
    }

    #[test]
    fn clip_length_invariant() {
        let kp = KeypointSequence::new(vec![0.0; 3 * FRAME_DIM]).unwrap();
        assert!(AvClip::new("i".into(), "c".into(), kp.clone(), ramp_audio(12)).is_ok());
        assert!(AvClip::new("i".into(), "c".into(), kp, ramp_audio(11)).is_err());
    }

    #[test]
    fn keypoint_dimension_enforced() {
        assert!(KeypointSequence::new(vec![0.0; 59]).is_err());
        assert!(KeypointSequence::new(vec![f64::NAN; 60]).is_err());
    }
}
