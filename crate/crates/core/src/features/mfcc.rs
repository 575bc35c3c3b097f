//! 16 kHz waveform to 26-coefficient MFCC track.
//!
//! Pipeline: pre-emphasis 0.97 (replicating the first sample), 400-sample
//! Hann frames at a 160-sample hop, 512-point magnitude spectrum, 26
//! triangular mel bands over 0..8000 Hz, natural log floored at 1e-10,
//! orthonormal DCT-II keeping 26 coefficients, then per-track
//! mean/variance normalization of each coefficient.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::clip::AudioFeatSequence;
use crate::error::{Error, Result};
use crate::MFCC_DIM;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const NUM_MELS: usize = 26;
pub const PRE_EMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Invalid(format!(
                "waveform sample rate must be {SAMPLE_RATE} Hz, got {sample_rate} (resampling is not supported)"
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "waveform".into(), detail: format!("sample {i}") });
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }
}

/// Frames produced for `n` samples.
pub fn frame_count(n: usize) -> usize {
    if n < WINDOW {
        0
    } else {
        (n - WINDOW) / HOP + 1
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters as dense rows over the `FFT_SIZE/2 + 1` bins.
fn mel_filterbank() -> Vec<Vec<f64>> {
    let bins = FFT_SIZE / 2 + 1;
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let edges: Vec<f64> = (0..NUM_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (NUM_MELS + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
    (0..NUM_MELS)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = bin_hz(k);
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect()
        })
        .collect()
}

fn dct_matrix() -> Vec<Vec<f64>> {
    let n = NUM_MELS as f64;
    (0..MFCC_DIM)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            (0..NUM_MELS).map(|i| scale * (PI * k as f64 * (i as f64 + 0.5) / n).cos()).collect()
        })
        .collect()
}

/// Cepstra before the per-track normalization, `frame_count(len)` rows.
pub fn mfcc_unnormalized(w: &Waveform) -> Result<Vec<[f64; MFCC_DIM]>> {
    let x = w.samples();
    if x.len() < WINDOW {
        return Err(Error::TooShort(format!(
            "MFCC needs at least {WINDOW} samples, got {}",
            x.len()
        )));
    }
    let emphasized: Vec<f64> = (0..x.len())
        .map(|i| x[i] - PRE_EMPHASIS * x[i.saturating_sub(1)])
        .collect();
    let hann: Vec<f64> = (0..WINDOW).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WINDOW as f64).cos()).collect();
    let fbank = mel_filterbank();
    let dct = dct_matrix();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut out = Vec::with_capacity(frame_count(x.len()));
    for f in 0..frame_count(x.len()) {
        let frame = &emphasized[f * HOP..f * HOP + WINDOW];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(if i < WINDOW { frame[i] * hann[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        let mag: Vec<f64> = buf[..FFT_SIZE / 2 + 1].iter().map(|c| c.norm()).collect();
        let log_mel: Vec<f64> = fbank
            .iter()
            .map(|row| row.iter().zip(&mag).map(|(w, m)| w * m).sum::<f64>().max(LOG_FLOOR).ln())
            .collect();
        let mut cep = [0.0; MFCC_DIM];
        for (k, row) in dct.iter().enumerate() {
            cep[k] = row.iter().zip(&log_mel).map(|(a, b)| a * b).sum();
        }
        out.push(cep);
    }
    Ok(out)
}

/// Zero-mean, unit-variance per coefficient over the whole track.
/// Coefficients with (near) zero variance are only centered.
pub fn normalize_track(frames: &mut [[f64; MFCC_DIM]]) {
    let n = frames.len() as f64;
    for k in 0..MFCC_DIM {
        let mean = frames.iter().map(|f| f[k]).sum::<f64>() / n;
        let var = frames.iter().map(|f| (f[k] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let inv = if std > 1e-10 { 1.0 / std } else { 1.0 };
        for f in frames.iter_mut() {
            f[k] = (f[k] - mean) * inv;
        }
    }
}

pub fn mfcc(w: &Waveform) -> Result<AudioFeatSequence> {
    let mut frames = mfcc_unnormalized(w)?;
    normalize_track(&mut frames);
    AudioFeatSequence::from_frames(&frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let w = Waveform::new(noise(16_000, 1), SAMPLE_RATE).unwrap();
        assert_eq!(mfcc(&w).unwrap().len(), 98);
        assert_eq!(frame_count(16_000), (16_000 - 400) / 160 + 1);
    }

    #[test]
    fn constant_input_is_time_invariant() {
        let w = Waveform::new(vec![0.25; 8000], SAMPLE_RATE).unwrap();
        let frames = mfcc_unnormalized(&w).unwrap();
        for f in &frames[1..] {
            assert_eq!(f, &frames[0]);
        }
    }

    #[test]
    fn silence_hits_the_floor_without_nan() {
        let w = Waveform::new(vec![0.0; 4000], SAMPLE_RATE).unwrap();
        let raw = mfcc_unnormalized(&w).unwrap();
        // Every band sits at ln(1e-10); only the DC cepstral term is non-zero.
        let expected_c0 = LOG_FLOOR.ln() * (NUM_MELS as f64).sqrt();
        assert!((raw[0][0] - expected_c0).abs() < 1e-9);
        let feats = mfcc(&w).unwrap();
        assert!(feats.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_wrong_rate_and_short_input() {
        assert!(Waveform::new(vec![0.0; 1000], 8000).is_err());
        let w = Waveform::new(vec![0.0; 399], SAMPLE_RATE).unwrap();
        assert!(matches!(mfcc(&w), Err(Error::TooShort(_))));
    }

    #[test]
    fn deterministic() {
        let w = Waveform::new(noise(5000, 9), SAMPLE_RATE).unwrap();
        let a = mfcc(&w).unwrap();
        let b = mfcc(&w).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn hop_aligned_shift_shifts_frames() {
        let base = noise(16_000, 3);
        let n = 3;
        let mut shifted = noise(HOP * n, 4);
        shifted.extend_from_slice(&base);
        let a = mfcc_unnormalized(&Waveform::new(base, SAMPLE_RATE).unwrap()).unwrap();
        let b = mfcc_unnormalized(&Waveform::new(shifted, SAMPLE_RATE).unwrap()).unwrap();
        // Skip frame 0 of the unshifted track: its pre-emphasis sees a replicated sample.
        for f in 1..a.len() {
            for k in 0..MFCC_DIM {
                assert!((a[f][k] - b[f + n][k]).abs() < 1e-9, "frame {f} coef {k}");
            }
        }
    }

    #[test]
    fn filterbank_rows_are_nonempty() {
        for (m, row) in mel_filterbank().iter().enumerate() {
            assert!(row.iter().any(|&v| v > 0.0), "band {m} is empty");
        }
    }
}
