//! On-disk corpus: a JSON manifest plus one binary blob.
//!
//! The blob starts with the 4-byte magic `AVKP`, a version byte (1) and three
//! zero padding bytes. Every array after that is a run of little-endian `f64`
//! values; the manifest records the byte offset of each clip's keypoints
//! (`frames x 60`) and audio (`audio_frames x 26`) inside the blob.
//!
//! ```json
//! {
//!   "magic": "AVKP",
//!   "version": 1,
//!   "blob": "corpus.bin",
//!   "clips": [
//!     { "clip_id": "c0", "identity_id": "id0", "frames": 40,
//!       "audio_frames": 160, "keypoints_offset": 8, "audio_offset": 19208 }
//!   ]
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::clip::{AudioFeatSequence, AvClip, KeypointSequence};
use crate::error::{Error, Result};
use crate::{FRAME_DIM, MFCC_DIM};

pub const MAGIC: &str = "AVKP";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub identity_id: String,
    pub frames: usize,
    pub audio_frames: usize,
    pub keypoints_offset: u64,
    pub audio_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub magic: String,
    pub version: u8,
    pub blob: String,
    pub clips: Vec<ClipRecord>,
}

/// Outcome of reading a corpus: accepted clips and per-record rejections.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub clips: Vec<AvClip>,
    pub rejected: Vec<(String, String)>,
}

fn blob_name(manifest_path: &Path) -> String {
    let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
    format!("{stem}.bin")
}

/// Writes `clips` as `manifest_path` plus a sibling `<stem>.bin` blob.
pub fn write_corpus(manifest_path: &Path, clips: &[AvClip]) -> Result<()> {
    let blob = blob_name(manifest_path);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC.as_bytes());
    bytes.push(VERSION);
    bytes.extend_from_slice(&[0, 0, 0]);
    let mut records = Vec::with_capacity(clips.len());
    for c in clips {
        c.validate()?;
        let kp_off = bytes.len() as u64;
        for v in c.keypoints.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let au_off = bytes.len() as u64;
        for v in c.audio.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        records.push(ClipRecord {
            clip_id: c.clip_id.clone(),
            identity_id: c.identity_id.clone(),
            frames: c.frames(),
            audio_frames: c.audio.len(),
            keypoints_offset: kp_off,
            audio_offset: au_off,
        });
    }
    let manifest = Manifest { magic: MAGIC.into(), version: VERSION, blob: blob.clone(), clips: records };
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir)?;
    }
    fs::write(dir.join(&blob), &bytes)?;
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn read_f64s(blob: &[u8], offset: u64, count: usize) -> Result<Vec<f64>> {
    let start = offset as usize;
    let end = start
        .checked_add(count * 8)
        .filter(|&e| e <= blob.len() && start >= HEADER_LEN)
        .ok_or_else(|| Error::Format(format!("array at byte {offset} with {count} values is outside the blob")))?;
    Ok(blob[start..end].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
}

fn decode_record(blob: &[u8], r: &ClipRecord) -> Result<AvClip> {
    let kp = read_f64s(blob, r.keypoints_offset, r.frames * FRAME_DIM)?;
    let au = read_f64s(blob, r.audio_offset, r.audio_frames * MFCC_DIM)?;
    AvClip::new(r.identity_id.clone(), r.clip_id.clone(), KeypointSequence::new(kp)?, AudioFeatSequence::new(au)?)
}

pub fn read_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.magic != MAGIC || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "manifest {}: expected {MAGIC} v{VERSION}, found {} v{}",
            path.display(),
            manifest.magic,
            manifest.version
        )));
    }
    let blob = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    Ok((manifest, blob))
}

/// Loads every record, keeping invalid ones out of `clips` with a diagnostic.
pub fn load_corpus(path: &Path) -> Result<LoadReport> {
    let (manifest, blob_path) = read_manifest(path)?;
    let blob = fs::read(&blob_path)?;
    if blob.len() < HEADER_LEN || &blob[..4] != MAGIC.as_bytes() || blob[4] != VERSION {
        return Err(Error::Format(format!("blob {} has a bad header", blob_path.display())));
    }
    let mut report = LoadReport::default();
    if manifest.clips.is_empty() {
        warn!("corpus {} lists no clips", path.display());
    }
    for r in &manifest.clips {
        match decode_record(&blob, r) {
            Ok(c) => report.clips.push(c),
            Err(e) => {
                warn!("rejecting clip `{}`: {e}", r.clip_id);
                report.rejected.push((r.clip_id.clone(), e.to_string()));
            }
        }
    }
    Ok(report)
}

pub fn load_clips(path: &Path) -> Result<Vec<AvClip>> {
    Ok(load_corpus(path)?.clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(id: &str, t: usize, seed: f64) -> AvClip {
        let kp = (0..t * FRAME_DIM).map(|i| (i as f64 * 0.013 + seed).sin()).collect();
        let au = (0..4 * t * MFCC_DIM).map(|i| (i as f64 * 0.007 - seed).cos()).collect();
        AvClip::new(
            format!("who-{id}"),
            id.into(),
            KeypointSequence::new(kp).unwrap(),
            AudioFeatSequence::new(au).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn two_clip_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let clips = vec![clip("a", 12, 0.1), clip("b", 7, 2.0)];
        write_corpus(&path, &clips).unwrap();
        let back = load_clips(&path).unwrap();
        assert_eq!(back, clips);
    }

    #[test]
    fn length_mismatch_is_rejected_per_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        write_corpus(&path, &[clip("good", 5, 0.0), clip("bad", 5, 1.0)]).unwrap();
        let (mut m, _) = read_manifest(&path).unwrap();
        m.clips[1].audio_frames = 19;
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let report = load_corpus(&path).unwrap();
        assert_eq!(report.clips.len(), 1);
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.rejected[0].0, "bad");
        assert!(report.rejected[0].1.contains("19 audio frames"), "{}", report.rejected[0].1);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        write_corpus(&path, &[clip("x", 4, 0.0)]).unwrap();
        let blob_path = dir.path().join("c.bin");
        let mut blob = fs::read(&blob_path).unwrap();
        blob[HEADER_LEN..HEADER_LEN + 8].copy_from_slice(&f64::INFINITY.to_le_bytes());
        fs::write(&blob_path, blob).unwrap();
        let report = load_corpus(&path).unwrap();
        assert!(report.clips.is_empty());
        assert_eq!(report.rejected.len(), 1);
    }

    #[test]
    fn empty_manifest_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        write_corpus(&path, &[]).unwrap();
        assert!(load_clips(&path).unwrap().is_empty());
    }

    #[test]
    fn blob_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.json");
        write_corpus(&path, &[clip("x", 2, 0.0)]).unwrap();
        let blob = fs::read(dir.path().join("h.bin")).unwrap();
        assert_eq!(&blob[..5], b"AVKP\x01");
        let (m, _) = read_manifest(&path).unwrap();
        assert_eq!(m.clips[0].keypoints_offset, 8);
        assert_eq!(m.clips[0].audio_offset, 8 + 2 * 60 * 8);
    }
}
