//! Offset/confidence search with frozen syncers, corpus reports and plot data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffnum::Tensor;
use crate::error::{Error, Result};
use crate::features::AvClip;
use crate::pyramid::{audio_window, keypoint_window, AvPyramid, SEGMENT_RADIUS};
use crate::syncer::{embed_rows, SyncScorer, AUDIO_SEG_DIM, MOTION_SEG_DIM, SCORE_EPS};

pub const DEFAULT_RANGE: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetResult {
    pub level: usize,
    /// Level-local frames; positive means the audio lags the motion.
    pub offset: isize,
    pub abs_offset: usize,
    pub confidence: f64,
    pub search_range: usize,
    /// Mean score for each shift `-R..=R`.
    pub scores: Vec<f64>,
}

/// Expected `|offset|` when the argmax is uniform over `-R..=R`.
pub fn random_baseline(range: usize) -> f64 {
    (range * (range + 1)) as f64 / (2 * range + 1) as f64
}

/// Level-local frames needed to slide `±range` with at least one full window.
pub fn min_level_frames(range: usize) -> usize {
    2 * range + 2 * SEGMENT_RADIUS + 1
}

/// Video frames a clip needs for an offset search at `level`.
pub fn min_clip_frames(level: usize, range: usize) -> usize {
    min_level_frames(range) << (level - 1)
}

fn unit_rows(e: &Tensor) -> Vec<Vec<f64>> {
    let cols = e.shape()[1];
    e.data()
        .chunks(cols)
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(SCORE_EPS);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Index of the best shift: highest score, ties to the smallest `|δ|`,
/// then to the negative shift.
pub fn pick_offset(scores: &[f64]) -> isize {
    let r = (scores.len() / 2) as isize;
    let mut best = 0isize;
    for m in 1..=r {
        for d in [-m, m] {
            if scores[(d + r) as usize] > scores[(best + r) as usize] {
                best = d;
            }
        }
    }
    best
}

/// `max - median` of the shift scores.
pub fn confidence(scores: &[f64]) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let median = if s.len() % 2 == 1 { s[s.len() / 2] } else { 0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2]) };
    s[s.len() - 1] - median
}

/// Offset search on a precomputed pyramid at the syncer's level.
///
/// Every interior window of the level is embedded once on each side. The
/// score at shift `δ` averages motion window `i` against audio window
/// `(i + δ) mod n`, so each shift uses the same windows and only their
/// pairing changes.
pub fn av_offset_pyramid<S: SyncScorer + ?Sized>(s: &S, p: &AvPyramid, range: usize) -> Result<OffsetResult> {
    let level = s.level();
    if level == 0 || level > p.levels() {
        return Err(Error::Invalid(format!("pyramid has {} levels, syncer wants level {level}", p.levels())));
    }
    let len = p.len(level);
    if len < min_level_frames(range) {
        return Err(Error::TooShort(format!(
            "offset search at level {level} with range {range} needs {} level frames ({} video frames), clip has {len}",
            min_level_frames(range),
            min_clip_frames(level, range)
        )));
    }
    let (kp, au) = (&p.keypoints[level - 1], &p.audio[level - 1]);
    let centers = SEGMENT_RADIUS..len - SEGMENT_RADIUS;
    let n = centers.len();
    let motion: Vec<f64> = centers.clone().flat_map(|t| keypoint_window(kp, t)).collect();
    let audio: Vec<f64> = centers.flat_map(|t| audio_window(au, t)).collect();
    let ex = unit_rows(&embed_rows(s, Tensor::new(vec![n, MOTION_SEG_DIM], motion)?, false)?);
    let ea = unit_rows(&embed_rows(s, Tensor::new(vec![n, AUDIO_SEG_DIM], audio)?, true)?);
    let r = range as isize;
    let scores: Vec<f64> = (-r..=r)
        .map(|d| {
            let sum: f64 = (0..n)
                .map(|i| {
                    let a = &ea[(i as isize + d).rem_euclid(n as isize) as usize];
                    a.iter().zip(&ex[i]).map(|(p, q)| p * q).sum::<f64>()
                })
                .sum();
            sum / n as f64
        })
        .collect();
    let offset = pick_offset(&scores);
    Ok(OffsetResult {
        level,
        offset,
        abs_offset: offset.unsigned_abs(),
        confidence: confidence(&scores),
        search_range: range,
        scores,
    })
}

pub fn av_offset<S: SyncScorer + ?Sized>(s: &S, clip: &AvClip, range: usize) -> Result<OffsetResult> {
    let need = min_clip_frames(s.level().max(1), range);
    if clip.frames() < need {
        return Err(Error::TooShort(format!(
            "clip `{}` has {} frames; offset search at level {} with range {range} needs {need}",
            clip.clip_id,
            clip.frames(),
            s.level()
        )));
    }
    av_offset_pyramid(s, &AvPyramid::from_clip(clip, s.level())?, range)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub clips: usize,
    pub offset_mean: f64,
    pub offset_std: f64,
    pub confidence_mean: f64,
    pub confidence_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub levels: Vec<LevelStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub search_range: usize,
    pub random_baseline: f64,
    pub rows: Vec<ReportRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Clips in a canonical order so reports do not depend on input order.
fn canonical(clips: &[AvClip]) -> Vec<&AvClip> {
    let mut v: Vec<&AvClip> = clips.iter().collect();
    v.sort_by(|a, b| a.clip_id.cmp(&b.clip_id).then(a.identity_id.cmp(&b.identity_id)));
    v
}

/// Per-level statistics of one set of clips.
pub fn evaluate_row<S: SyncScorer>(name: &str, syncers: &[S], clips: &[AvClip], range: usize) -> Result<ReportRow> {
    if clips.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one clip".into()));
    }
    let depth = syncers.iter().map(SyncScorer::level).max().unwrap_or(1);
    let ordered = canonical(clips);
    let pyramids: Vec<AvPyramid> = ordered.iter().map(|c| AvPyramid::from_clip(c, depth)).collect::<Result<_>>()?;
    let mut levels = Vec::with_capacity(syncers.len());
    for s in syncers {
        let results: Vec<OffsetResult> =
            pyramids.iter().map(|p| av_offset_pyramid(s, p, range)).collect::<Result<_>>()?;
        let offs: Vec<f64> = results.iter().map(|r| r.abs_offset as f64).collect();
        let confs: Vec<f64> = results.iter().map(|r| r.confidence).collect();
        let (om, os) = mean_std(&offs);
        let (cm, cs) = mean_std(&confs);
        levels.push(LevelStats {
            level: s.level(),
            clips: results.len(),
            offset_mean: om,
            offset_std: os,
            confidence_mean: cm,
            confidence_std: cs,
        });
    }
    Ok(ReportRow { name: name.to_string(), levels })
}

/// Each clip's keypoints paired with the next clip's audio (canonical order),
/// truncated to the shorter of the two.
pub fn shuffled_pairs(clips: &[AvClip]) -> Result<Vec<AvClip>> {
    let ordered = canonical(clips);
    if ordered.len() < 2 {
        return Err(Error::Invalid("shuffled pairs need at least two clips".into()));
    }
    let n = ordered.len();
    (0..n)
        .map(|k| {
            let (a, b) = (ordered[k], ordered[(k + 1) % n]);
            let t = a.frames().min(b.frames());
            AvClip::new(
                a.identity_id.clone(),
                format!("{}~{}", a.clip_id, b.clip_id),
                a.keypoints.slice(0, t)?,
                b.audio.slice_video(0, t)?,
            )
        })
        .collect()
}

/// Random and ground-truth rows, plus a generated row when given.
pub fn evaluate_corpus<S: SyncScorer>(
    syncers: &[S],
    clips: &[AvClip],
    generated: Option<&[AvClip]>,
    range: usize,
) -> Result<CorpusReport> {
    let mut rows = vec![
        evaluate_row("Random", syncers, &shuffled_pairs(clips)?, range)?,
        evaluate_row("Ground truth", syncers, clips, range)?,
    ];
    if let Some(gen) = generated {
        rows.push(evaluate_row("Generated", syncers, gen, range)?);
    }
    Ok(CorpusReport { search_range: range, random_baseline: random_baseline(range), rows })
}

impl CorpusReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,level,clips,offset_mean,offset_std,confidence_mean,confidence_std\n");
        for r in &self.rows {
            for l in &r.levels {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    r.name, l.level, l.clips, l.offset_mean, l.offset_std, l.confidence_mean, l.confidence_std
                );
            }
        }
        out
    }

    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Writes `<stem>.json` and `<stem>.csv` next to each other.
    pub fn write(&self, json_path: &Path) -> Result<()> {
        if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(json_path, self.to_json())?;
        fs::write(json_path.with_extension("csv"), self.to_csv())?;
        Ok(())
    }
}

/// Writes one `confidence_level<i>.csv` per level from `(step, [conf per
/// level])` points. Values are written in shortest round-trip form.
pub fn plot_export(dir: &Path, levels: usize, points: &[(usize, Vec<f64>)]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    (1..=levels)
        .map(|l| {
            let mut csv = String::from("step,confidence\n");
            for (step, conf) in points {
                let v = conf.get(l - 1).ok_or_else(|| {
                    Error::Invalid(format!("log point at step {step} has {} levels, {levels} expected", conf.len()))
                })?;
                let _ = writeln!(csv, "{step},{v}");
            }
            let path = dir.join(format!("confidence_level{l}.csv"));
            fs::write(&path, csv)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_for_fifteen() {
        assert!((random_baseline(15) - 240.0 / 31.0).abs() < 1e-15);
        assert!((random_baseline(15) - 7.741_935).abs() < 1e-6);
    }

    #[test]
    fn ties_prefer_small_then_negative() {
        assert_eq!(pick_offset(&[1.0, 1.0, 1.0, 1.0, 1.0]), 0);
        assert_eq!(pick_offset(&[0.0, 2.0, 1.0, 2.0, 0.0]), -1);
        assert_eq!(pick_offset(&[3.0, 2.0, 1.0, 2.0, 3.0]), -2);
        assert_eq!(pick_offset(&[0.0, 0.0, 1.0, 0.0, 5.0]), 2);
    }

    #[test]
    fn confidence_is_max_minus_median_and_shift_invariant() {
        let s = [0.1, 0.5, 0.2, 0.9, 0.3];
        assert!((confidence(&s) - 0.6).abs() < 1e-15);
        let t: Vec<f64> = s.iter().map(|v| v + 3.25).collect();
        assert!((confidence(&t) - confidence(&s)).abs() < 1e-12);
        assert!(confidence(&[0.4; 7]) == 0.0);
    }

    #[test]
    fn minimum_lengths() {
        assert_eq!(min_level_frames(15), 35);
        assert_eq!(min_clip_frames(4, 15), 280);
    }

    #[test]
    fn plot_export_series() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![(10, vec![0.1, 0.2, 1.0 / 3.0]), (20, vec![0.4, 0.5, 0.6])];
        let files = plot_export(dir.path(), 3, &pts).unwrap();
        assert_eq!(files.len(), 3);
        let text = fs::read_to_string(&files[2]).unwrap();
        let v: f64 = text.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v.to_bits(), (1.0f64 / 3.0).to_bits());
        let empty = plot_export(&dir.path().join("e"), 2, &[]).unwrap();
        for f in empty {
            assert_eq!(fs::read_to_string(f).unwrap(), "step,confidence\n");
        }
    }
}
