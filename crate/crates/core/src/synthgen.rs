//! Synthetic talking-head corpus with known audio/motion coupling.
//!
//! Audio is two amplitude-modulated noise carriers: a 2-4 kHz carrier whose
//! log-envelope is a fast (4-10 Hz) random signal and a 300-800 Hz carrier whose
//! log-envelope is a slow (about 0.2-1 Hz) one. Motion is built from the same
//! two signals:
//!
//! * lip keypoints open and close with `g_lip * fast + free * independent_fast`;
//! * the whole face translates rigidly with `g_head * slow + free * independent_slow`
//!   and rotates with a further independent slow signal. Rotation is kept
//!   audio-independent because it changes the direction of every local motion,
//!   which would expose the slow signal inside short windows.
//!
//! The translation and the slow carrier also carry independent fast jitter,
//! so a short window sees mostly jitter while the coarse pyramid levels
//! average it away.
//!
//! Each clip also gets a random identity pose (scale, rotation, offset) and a
//! white noise floor on every coordinate, which masks slow motion inside short
//! windows but averages out in the coarser pyramid levels.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::mfcc::{self, Waveform, HOP, SAMPLE_RATE, WINDOW};
use crate::features::{AudioFeatSequence, AvClip, KeypointSequence};
use crate::{AUDIO_PER_VIDEO, FRAME_DIM, KEYPOINT_STRIDE, NUM_KEYPOINTS};

pub const FPS: f64 = 25.0;

/// Neutral face layout: brows, eyes, nose, cheeks, upper lip, lower lip.
pub const BASE_LAYOUT: [(f64, f64); NUM_KEYPOINTS] = [
    (-0.30, -0.35),
    (0.30, -0.35),
    (-0.30, -0.20),
    (0.30, -0.20),
    (0.00, -0.10),
    (0.00, 0.05),
    (-0.40, 0.15),
    (0.40, 0.15),
    (0.00, 0.30),
    (0.00, 0.42),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_clips: usize,
    /// Video frames per clip.
    pub frames: usize,
    pub lip_keypoints: Vec<usize>,
    pub g_lip: f64,
    pub g_head: f64,
    /// Amplitude of motion that is independent of the audio.
    pub free_motion: f64,
    pub lip_band_hz: (f64, f64),
    pub head_band_hz: (f64, f64),
    /// Peak lip opening per unit driver.
    pub lip_amplitude: f64,
    /// Head rotation (radians) per unit of its own slow driver.
    pub head_rotation: f64,
    /// Head translation per unit driver.
    pub head_translation: f64,
    /// Independent fast rigid jitter, in head-driver units.
    pub head_jitter: f64,
    /// Independent fast modulation of the slow carrier's log-envelope.
    pub envelope_jitter: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_clips: 32,
            frames: 400,
            lip_keypoints: vec![8, 9],
            g_lip: 1.0,
            g_head: 1.0,
            free_motion: 0.5,
            lip_band_hz: (4.0, 10.0),
            head_band_hz: (0.2, 1.0),
            lip_amplitude: 0.04,
            head_rotation: 0.08,
            head_translation: 0.03,
            head_jitter: 3.0,
            envelope_jitter: 3.0,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

/// A clip plus the latent signals that produced it, sampled per video frame.
#[derive(Clone, Debug)]
pub struct SynthClip {
    pub clip: AvClip,
    /// Audio-side fast log-envelope.
    pub lip_envelope: Vec<f64>,
    /// Audio-side slow log-envelope.
    pub head_envelope: Vec<f64>,
    /// Lip opening driver actually applied to the lip keypoints.
    pub lip_driver: Vec<f64>,
    /// Rigid head driver actually applied to the whole face.
    pub head_driver: Vec<f64>,
}

/// Zero-mean, unit-variance random signal with spectrum inside `band` (Hz),
/// as a sum of sinusoids with random frequency and phase.
struct BandSignal {
    components: Vec<(f64, f64)>,
    amp: f64,
}

impl BandSignal {
    const COMPONENTS: usize = 24;

    fn new<R: Rng>(band: (f64, f64), rng: &mut R) -> Self {
        let components = (0..Self::COMPONENTS)
            .map(|_| (rng.random_range(band.0..band.1), rng.random_range(0.0..TAU)))
            .collect();
        Self { components, amp: (2.0 / Self::COMPONENTS as f64).sqrt() }
    }

    fn at(&self, seconds: f64) -> f64 {
        self.amp * self.components.iter().map(|&(f, p)| (TAU * f * seconds + p).sin()).sum::<f64>()
    }
}

fn band_noise<R: Rng>(n: usize, band: (f64, f64), rng: &mut R) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            Complex::new(z, 0.0)
        })
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k) as f64 * SAMPLE_RATE as f64 / n as f64;
        if bin < band.0 || bin > band.1 {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    out.into_iter().map(|v| v / rms).collect()
}

/// Waveform length whose MFCC track has exactly `4 * frames` rows.
pub fn waveform_len(frames: usize) -> usize {
    HOP * (AUDIO_PER_VIDEO * frames - 1) + WINDOW
}

/// Time (seconds) that video frame `t` represents: the mean centre of its
/// four audio analysis windows.
pub fn frame_time(t: usize) -> f64 {
    let first_center = (WINDOW as f64 / 2.0) / SAMPLE_RATE as f64;
    let hop = HOP as f64 / SAMPLE_RATE as f64;
    first_center + hop * (AUDIO_PER_VIDEO * t) as f64 + hop * 1.5
}

fn rotate(theta: f64, (x, y): (f64, f64)) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * x - s * y, s * x + c * y)
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 || self.frames < 40 {
            return Err(Error::Invalid(format!(
                "synth spec needs n_clips >= 1 and frames >= 40 (got {} and {})",
                self.n_clips, self.frames
            )));
        }
        if let Some(&k) = self.lip_keypoints.iter().find(|&&k| k >= NUM_KEYPOINTS) {
            return Err(Error::Invalid(format!("lip keypoint index {k} out of range")));
        }
        Ok(())
    }

    fn clip_rng(&self, i: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64))
    }

    /// Generates clip `i` of the corpus; clips are independent of each other.
    pub fn generate_clip(&self, i: usize) -> Result<SynthClip> {
        let mut rng = self.clip_rng(i);
        let t_frames = self.frames;
        let lip_env = BandSignal::new(self.lip_band_hz, &mut rng);
        let head_env = BandSignal::new(self.head_band_hz, &mut rng);
        let lip_free = BandSignal::new(self.lip_band_hz, &mut rng);
        let head_free = BandSignal::new(self.head_band_hz, &mut rng);
        let head_jit = BandSignal::new(self.lip_band_hz, &mut rng);
        let turn = BandSignal::new(self.head_band_hz, &mut rng);
        let env_jit = BandSignal::new(self.lip_band_hz, &mut rng);

        let n = waveform_len(t_frames);
        let hi = band_noise(n, (2000.0, 4000.0), &mut rng);
        let lo = band_noise(n, (300.0, 800.0), &mut rng);
        let samples: Vec<f64> = (0..n)
            .map(|s| {
                let sec = s as f64 / SAMPLE_RATE as f64;
                let floor: f64 = StandardNormal.sample(&mut rng);
                0.1 * ((0.8 * lip_env.at(sec)).exp() * hi[s] + (0.8 * (head_env.at(sec) + self.envelope_jitter * env_jit.at(sec))).exp() * lo[s])
                    + 1e-3 * floor
            })
            .collect();
        let audio = mfcc::mfcc(&Waveform::new(samples, SAMPLE_RATE)?)?;
        debug_assert_eq!(audio.len(), AUDIO_PER_VIDEO * t_frames);

        let scale = rng.random_range(0.9..1.1);
        let pose = rng.random_range(-0.15..0.15);
        let offset = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        let identity: Vec<(f64, f64)> = BASE_LAYOUT.iter().map(|&(x, y)| rotate(pose, (scale * x, scale * y))).collect();

        let mut lip_envelope = Vec::with_capacity(t_frames);
        let mut head_envelope = Vec::with_capacity(t_frames);
        let mut lip_driver = Vec::with_capacity(t_frames);
        let mut head_driver = Vec::with_capacity(t_frames);
        let mut data = Vec::with_capacity(t_frames * FRAME_DIM);
        for t in 0..t_frames {
            let sec = frame_time(t);
            let (le, he) = (lip_env.at(sec), head_env.at(sec));
            let lip = self.g_lip * le + self.free_motion * lip_free.at(sec);
            let head = self.g_head * he + self.free_motion * head_free.at(sec);
            lip_envelope.push(le);
            head_envelope.push(he);
            lip_driver.push(lip);
            head_driver.push(head);
            let rigid = head + self.head_jitter * head_jit.at(sec);
            let theta = self.head_rotation * turn.at(sec);
            let shift = (0.6 * self.head_translation * rigid, self.head_translation * rigid);
            for (k, &(bx, by)) in identity.iter().enumerate() {
                let is_lip = self.lip_keypoints.contains(&k);
                // Local lip opening happens in the face frame, before the rigid motion.
                let local = if is_lip {
                    let dir = if by > identity[self.lip_keypoints[0]].1 { 1.0 } else { -1.0 };
                    let open = self.lip_amplitude * lip;
                    (bx, by + dir * open)
                } else {
                    (bx, by)
                };
                let (rx, ry) = rotate(theta, local);
                let stretch = if is_lip { 1.0 + 0.2 * lip } else { 1.0 };
                // J = R(pose + theta) * diag(1, stretch)
                let (s, c) = (pose + theta).sin_cos();
                let jac = [c, -s * stretch, s, c * stretch];
                let mut frame = [0.0; KEYPOINT_STRIDE];
                frame[0] = rx + offset.0 + shift.0;
                frame[1] = ry + offset.1 + shift.1;
                frame[2..].copy_from_slice(&jac);
                for v in frame.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += self.noise_sigma * z;
                }
                data.extend_from_slice(&frame);
            }
        }
        let clip = AvClip::new(format!("id-{i}"), format!("synth-{i}"), KeypointSequence::new(data)?, audio)?;
        Ok(SynthClip { clip, lip_envelope, head_envelope, lip_driver, head_driver })
    }

    pub fn generate_detailed(&self) -> Result<Vec<SynthClip>> {
        self.validate()?;
        (0..self.n_clips).map(|i| self.generate_clip(i)).collect()
    }

    pub fn generate(&self) -> Result<Vec<AvClip>> {
        Ok(self.generate_detailed()?.into_iter().map(|c| c.clip).collect())
    }
}

/// Delays the audio of `clip` by `delta` video frames: the new track at frame
/// `t` is the old track at `t - delta`, edge-replicated. A syncer that sees the
/// shifted clip should report an offset of `delta`.
pub fn shift_audio(clip: &AvClip, delta: isize) -> Result<AvClip> {
    let rows = clip.audio.len() as isize;
    let d = delta * AUDIO_PER_VIDEO as isize;
    let data: Vec<f64> = (0..rows)
        .flat_map(|r| clip.audio.frame((r - d).clamp(0, rows - 1) as usize).iter().copied())
        .collect();
    AvClip::new(
        clip.identity_id.clone(),
        format!("{}+{delta}", clip.clip_id),
        clip.keypoints.clone(),
        AudioFeatSequence::new(data)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(g_lip: f64, g_head: f64) -> SynthSpec {
        SynthSpec { n_clips: 2, frames: 200, g_lip, g_head, seed: 5, ..SynthSpec::default() }
    }

    #[test]
    fn clips_satisfy_invariants() {
        for c in small(1.0, 1.0).generate().unwrap() {
            assert_eq!(c.audio.len(), 4 * c.frames());
            assert_eq!(c.frames(), 200);
            assert!(c.keypoints.positions_in_range());
        }
    }

    #[test]
    fn waveform_length_gives_exact_audio_rows() {
        for t in [40, 41, 400] {
            assert_eq!(mfcc::frame_count(waveform_len(t)), 4 * t);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = small(1.0, 1.0).generate().unwrap();
        let b = small(1.0, 1.0).generate().unwrap();
        assert_eq!(a, b);
        let c = SynthSpec { seed: 6, ..small(1.0, 1.0) }.generate().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn head_motion_is_rigid_on_non_lip_keypoints() {
        let spec = SynthSpec { noise_sigma: 0.0, ..small(1.0, 1.0) };
        let clip = spec.generate().unwrap().remove(0);
        let kp = &clip.keypoints;
        let dist = |t: usize, a: usize, b: usize| {
            let (p, q) = (kp.position(t, a), kp.position(t, b));
            ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
        };
        for t in 0..kp.len() {
            for a in 0..8 {
                for b in a + 1..8 {
                    assert!((dist(t, a, b) - dist(0, a, b)).abs() < 1e-12);
                }
            }
        }
    }

    fn band_energy(x: &[f64], lo: f64, hi: f64) -> f64 {
        let n = x.len();
        let mean = x.iter().sum::<f64>() / n as f64;
        let mut e = 0.0;
        for k in 1..n / 2 {
            let f = k as f64 * FPS / n as f64;
            if f < lo || f >= hi {
                continue;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let w = 0.5 - 0.5 * (TAU * t as f64 / n as f64).cos();
                let ph = TAU * k as f64 * t as f64 / n as f64;
                re += w * (v - mean) * ph.cos();
                im -= w * (v - mean) * ph.sin();
            }
            e += re * re + im * im;
        }
        e
    }

    #[test]
    fn lip_displacement_lives_in_its_band() {
        let spec = SynthSpec { frames: 400, noise_sigma: 0.0, n_clips: 1, ..small(1.0, 0.0) };
        let clip = spec.generate().unwrap().remove(0);
        let opening: Vec<f64> = (0..clip.frames())
            .map(|t| clip.keypoints.position(t, 9).1 - clip.keypoints.position(t, 8).1)
            .collect();
        let inside = band_energy(&opening, 4.0, 10.0);
        let below = band_energy(&opening, 0.0, 2.0);
        assert!(inside > 10.0 * below, "in-band {inside}, below 2 Hz {below}");
    }

    #[test]
    fn zero_coupling_drivers_ignore_audio_envelopes() {
        let a = SynthSpec { g_lip: 0.0, g_head: 0.0, n_clips: 1, ..small(0.0, 0.0) }.generate_detailed().unwrap();
        let c = &a[0];
        let corr = |x: &[f64], y: &[f64]| {
            let n = x.len() as f64;
            let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
            let cov: f64 = x.iter().zip(y).map(|(p, q)| (p - mx) * (q - my)).sum();
            let vx: f64 = x.iter().map(|p| (p - mx).powi(2)).sum();
            let vy: f64 = y.iter().map(|q| (q - my).powi(2)).sum();
            cov / (vx * vy).sqrt()
        };
        // Fast signals decorrelate quickly; the drivers come from separate draws.
        assert!(corr(&c.lip_driver, &c.lip_envelope).abs() < 0.3);
        let coupled = small(1.0, 1.0).generate_detailed().unwrap().remove(0);
        assert!(corr(&coupled.lip_driver, &coupled.lip_envelope) > 0.7);
    }

    #[test]
    fn shift_audio_delays_track() {
        let clip = small(1.0, 1.0).generate().unwrap().remove(0);
        let s = shift_audio(&clip, 3).unwrap();
        assert_eq!(s.audio.frame(4 * 10), clip.audio.frame(4 * 7));
        assert_eq!(s.audio.frame(0), clip.audio.frame(0));
        let back = shift_audio(&clip, -2).unwrap();
        assert_eq!(back.audio.frame(4 * 10 + 1), clip.audio.frame(4 * 12 + 1));
    }

    #[test]
    fn rejects_short_clips() {
        assert!(SynthSpec { frames: 39, ..SynthSpec::default() }.generate().is_err());
        assert!(SynthSpec { n_clips: 0, ..SynthSpec::default() }.generate().is_err());
    }
}
