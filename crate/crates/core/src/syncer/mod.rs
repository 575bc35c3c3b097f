//! Per-level audio/motion synchrony scorers.
//!
//! A syncer embeds a 20x26 audio window and a 5x60 keypoint window into the
//! same space; their cosine is the synchrony score.

mod loss;
mod mining;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{checkpoint, Bound, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{SEGMENT_AUDIO_FRAMES, SEGMENT_FRAMES};
use crate::nn::{Activation, Conv1d, Mlp};
use crate::{FRAME_DIM, KEYPOINT_STRIDE, MFCC_DIM, NUM_KEYPOINTS, NUM_LEVELS};

pub use loss::{infonce_from_scores, infonce_loss, infonce_value, triplet_from_scores, triplet_loss, InfoNceForm, Objective};
pub use mining::{mine_batch, ContrastiveBatch, MiningMode};
pub use train::{
    checkpoint_path, load_pyramid, save_pyramid, split_train_val, train_syncer, train_syncer_pyramid, SyncerHistory,
    SyncerTrainConfig,
};

/// Flattened audio window width.
pub const AUDIO_SEG_DIM: usize = SEGMENT_AUDIO_FRAMES * MFCC_DIM;
/// Flattened keypoint window width.
pub const MOTION_SEG_DIM: usize = SEGMENT_FRAMES * FRAME_DIM;
/// Norm floor inside the cosine score.
pub const SCORE_EPS: f64 = 1e-8;

/// Which keypoint channels the motion tower sees.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeypointMask {
    /// Drop the Jacobian entries.
    pub positions_only: bool,
    /// Keypoints removed entirely (e.g. the lips, for rigid-motion syncers).
    pub exclude: Vec<usize>,
}

impl KeypointMask {
    pub fn rigid(lip_keypoints: &[usize]) -> Self {
        Self { positions_only: true, exclude: lip_keypoints.to_vec() }
    }

    fn is_identity(&self) -> bool {
        !self.positions_only && self.exclude.is_empty()
    }

    /// 0/1 weights over one 60-d frame.
    pub fn frame_weights(&self) -> Vec<f64> {
        (0..FRAME_DIM)
            .map(|i| {
                let (k, c) = (i / KEYPOINT_STRIDE, i % KEYPOINT_STRIDE);
                let keep = !self.exclude.contains(&k) && !(self.positions_only && c >= 2);
                if keep {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncerConfig {
    pub level: usize,
    pub embed_dim: usize,
    pub conv_channels: usize,
    pub hidden: usize,
    pub logit_scale_init: f64,
    pub mask: KeypointMask,
    /// Subtract the window mean from each keypoint channel before embedding.
    pub center_keypoints: bool,
    /// Subtract the window mean from each audio coefficient before embedding.
    pub center_audio: bool,
}

impl Default for SyncerConfig {
    fn default() -> Self {
        Self {
            level: 1,
            embed_dim: 64,
            conv_channels: 32,
            hidden: 128,
            logit_scale_init: 10.0,
            mask: KeypointMask::default(),
            center_keypoints: true,
            center_audio: true,
        }
    }
}

impl SyncerConfig {
    pub fn paper() -> Self {
        Self { embed_dim: 512, conv_channels: 128, hidden: 512, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.level == 0 || self.level > NUM_LEVELS {
            return Err(Error::Invalid(format!("syncer level {} outside 1..={NUM_LEVELS}", self.level)));
        }
        if self.embed_dim == 0 || self.conv_channels == 0 || self.hidden == 0 {
            return Err(Error::Invalid("syncer widths must be positive".into()));
        }
        if !self.logit_scale_init.is_finite() || self.logit_scale_init <= 0.0 {
            return Err(Error::Invalid(format!("logit scale must be positive, got {}", self.logit_scale_init)));
        }
        if let Some(k) = self.mask.exclude.iter().find(|&&k| k >= NUM_KEYPOINTS) {
            return Err(Error::Invalid(format!("masked keypoint {k} out of range")));
        }
        Ok(())
    }
}

/// Anything that maps audio and keypoint windows into a shared embedding
/// space. Parameters, if any, enter the graph as constants.
pub trait SyncScorer: Sync {
    fn level(&self) -> usize;

    /// `[n, 520]` -> `[n, E]`.
    fn embed_audio(&self, g: &mut Graph, audio: Var) -> Result<Var>;

    /// `[n, 300]` -> `[n, E]`.
    fn embed_motion(&self, g: &mut Graph, motion: Var) -> Result<Var>;

    fn is_frozen(&self) -> bool {
        true
    }
}

/// Per-pair cosine scores `[n]`.
pub fn score_pairs<S: SyncScorer + ?Sized>(s: &S, g: &mut Graph, audio: Var, motion: Var) -> Result<Var> {
    let ea = s.embed_audio(g, audio)?;
    let ex = s.embed_motion(g, motion)?;
    g.cosine(ea, ex, SCORE_EPS)
}

fn check_segment(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what} segment has {got} values, expected {want}")));
    }
    Ok(())
}

/// Synchrony score of one audio window and one keypoint window.
pub fn score<S: SyncScorer + ?Sized>(s: &S, audio_seg: &[f64], motion_seg: &[f64]) -> Result<f64> {
    check_segment("audio", audio_seg.len(), AUDIO_SEG_DIM)?;
    check_segment("keypoint", motion_seg.len(), MOTION_SEG_DIM)?;
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![1, AUDIO_SEG_DIM], audio_seg.to_vec())?);
    let x = g.constant(Tensor::new(vec![1, MOTION_SEG_DIM], motion_seg.to_vec())?);
    let sc = score_pairs(s, &mut g, a, x)?;
    Ok(g.value(sc).item())
}

/// Embeds the rows of an `[n, width]` tensor without recording gradients.
pub fn embed_rows<S: SyncScorer + ?Sized>(s: &S, rows: Tensor, audio: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(rows);
    let e = if audio { s.embed_audio(&mut g, x)? } else { s.embed_motion(&mut g, x)? };
    Ok(g.value(e).clone())
}

#[derive(Clone, Debug)]
pub struct SyncerModel {
    pub config: SyncerConfig,
    pub params: ParamSet,
    frozen: bool,
    audio_conv: [Conv1d; 2],
    audio_mlp: Mlp,
    motion_mlp: Mlp,
    mask: Option<Tensor>,
}

const LOG_SCALE: &str = "logit_scale";

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: SyncerConfig,
    frozen: bool,
}

impl SyncerModel {
    pub fn new(config: SyncerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let c = config.conv_channels;
        let audio_conv = [
            Conv1d::create(&mut p, "audio/conv0", MFCC_DIM, c, 3, 2, &mut rng),
            Conv1d::create(&mut p, "audio/conv1", c, c, 3, 2, &mut rng),
        ];
        // 20 -> 9 -> 4 time steps
        let audio_mlp =
            Mlp::create(&mut p, "audio/mlp", &[4 * c, config.hidden, config.embed_dim], Activation::Relu, false, false, &mut rng);
        let motion_mlp = Mlp::create(
            &mut p,
            "motion/mlp",
            &[MOTION_SEG_DIM, config.hidden, config.hidden, config.embed_dim],
            Activation::Relu,
            true,
            false,
            &mut rng,
        );
        p.insert(LOG_SCALE, Tensor::from_vec(vec![config.logit_scale_init.ln()]));
        let mask = (!config.mask.is_identity()).then(|| {
            let w = config.mask.frame_weights();
            Tensor::new(vec![1, SEGMENT_FRAMES, FRAME_DIM], w.repeat(SEGMENT_FRAMES)).expect("fixed size")
        });
        Ok(Self { config, params: p, frozen: false, audio_conv, audio_mlp, motion_mlp, mask })
    }

    pub fn level(&self) -> usize {
        self.config.level
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    pub fn logit_scale(&self) -> f64 {
        self.params.get(LOG_SCALE).expect("registered").item().exp()
    }

    /// Applies a parameter update; refuses when frozen.
    pub fn update(&mut self, f: impl FnOnce(&mut ParamSet) -> Result<()>) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(format!("level-{} syncer is frozen", self.level())));
        }
        f(&mut self.params)
    }

    pub fn audio_with(&self, g: &mut Graph, p: &Bound, audio: Var) -> Result<Var> {
        let n = g.shape(audio)[0];
        let mut x = g.reshape(audio, &[n, SEGMENT_AUDIO_FRAMES, MFCC_DIM])?;
        if self.config.center_audio {
            let m = g.mean_axis(x, 1)?;
            let m = g.reshape(m, &[n, 1, MFCC_DIM])?;
            x = g.sub(x, m)?;
        }
        let x = self.audio_conv[0].forward(g, p, x)?;
        let x = g.relu(x);
        let x = self.audio_conv[1].forward(g, p, x)?;
        let x = g.relu(x);
        let width = g.shape(x)[1] * g.shape(x)[2];
        let x = g.reshape(x, &[n, width])?;
        self.audio_mlp.forward(g, p, x)
    }

    pub fn motion_with(&self, g: &mut Graph, p: &Bound, motion: Var) -> Result<Var> {
        let n = g.shape(motion)[0];
        let mut x = g.reshape(motion, &[n, SEGMENT_FRAMES, FRAME_DIM])?;
        if self.config.center_keypoints {
            let m = g.mean_axis(x, 1)?;
            let m = g.reshape(m, &[n, 1, FRAME_DIM])?;
            x = g.sub(x, m)?;
        }
        if let Some(mask) = &self.mask {
            let w = g.constant(mask.clone());
            x = g.mul(x, w)?;
        }
        let x = g.reshape(x, &[n, MOTION_SEG_DIM])?;
        self.motion_mlp.forward(g, p, x)
    }

    /// `exp(log_scale)` as a `[1]` node.
    pub fn scale_with(&self, g: &mut Graph, p: &Bound) -> Var {
        g.exp(p.get(LOG_SCALE))
    }

    fn meta(&self) -> String {
        serde_json::to_string(&Meta { kind: "syncer".into(), config: self.config.clone(), frozen: self.frozen })
            .expect("plain data")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params, &self.meta())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load(path)?;
        let meta: Meta = serde_json::from_str(&meta)?;
        if meta.kind != "syncer" {
            return Err(Error::Format(format!("{} holds a `{}` checkpoint, not a syncer", path.display(), meta.kind)));
        }
        let mut m = Self::new(meta.config, 0)?;
        m.params.load_from(&params)?;
        m.frozen = meta.frozen;
        Ok(m)
    }
}

impl SyncScorer for SyncerModel {
    fn level(&self) -> usize {
        self.config.level
    }

    fn embed_audio(&self, g: &mut Graph, audio: Var) -> Result<Var> {
        let p = self.params.bind(g, false);
        self.audio_with(g, &p, audio)
    }

    fn embed_motion(&self, g: &mut Graph, motion: Var) -> Result<Var> {
        let p = self.params.bind(g, false);
        self.motion_with(g, &p, motion)
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Embeds by truncating both inputs to their first two values.
    struct Stub;

    impl SyncScorer for Stub {
        fn level(&self) -> usize {
            1
        }
        fn embed_audio(&self, g: &mut Graph, a: Var) -> Result<Var> {
            g.slice(a, 1, 0, 2)
        }
        fn embed_motion(&self, g: &mut Graph, x: Var) -> Result<Var> {
            g.slice(x, 1, 0, 2)
        }
    }

    fn segs(a: [f64; 2], x: [f64; 2]) -> (Vec<f64>, Vec<f64>) {
        let mut av = vec![0.0; AUDIO_SEG_DIM];
        av[..2].copy_from_slice(&a);
        let mut xv = vec![0.0; MOTION_SEG_DIM];
        xv[..2].copy_from_slice(&x);
        (av, xv)
    }

    #[test]
    fn stubbed_scores() {
        let (a, x) = segs([0.3, -1.2], [0.3, -1.2]);
        assert!((score(&Stub, &a, &x).unwrap() - 1.0).abs() < 1e-15);
        let (a, x) = segs([1.0, 0.0], [0.0, 1.0]);
        assert_eq!(score(&Stub, &a, &x).unwrap(), 0.0);
        let (a, x) = segs([1.0, 0.0], [1.0, 1.0]);
        assert!((score(&Stub, &a, &x).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        let (a, x) = segs([0.0, 0.0], [1.0, 1.0]);
        assert_eq!(score(&Stub, &a, &x).unwrap(), 0.0);
    }

    #[test]
    fn score_rejects_wrong_geometry() {
        let err = score(&Stub, &[0.0; 10], &[0.0; MOTION_SEG_DIM]).unwrap_err().to_string();
        assert!(err.contains("520"), "{err}");
    }

    #[test]
    fn embeddings_share_dimension() {
        let m = SyncerModel::new(SyncerConfig { embed_dim: 16, ..SyncerConfig::default() }, 1).unwrap();
        let ea = embed_rows(&m, Tensor::zeros(&[3, AUDIO_SEG_DIM]), true).unwrap();
        let ex = embed_rows(&m, Tensor::zeros(&[2, MOTION_SEG_DIM]), false).unwrap();
        assert_eq!(ea.shape(), &[3, 16]);
        assert_eq!(ex.shape(), &[2, 16]);
        assert!((m.logit_scale() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn score_is_bounded_and_scale_invariant() {
        let m = SyncerModel::new(SyncerConfig { embed_dim: 8, hidden: 16, conv_channels: 4, ..SyncerConfig::default() }, 2)
            .unwrap();
        let a: Vec<f64> = (0..AUDIO_SEG_DIM).map(|i| (i as f64 * 0.37).sin()).collect();
        let x: Vec<f64> = (0..MOTION_SEG_DIM).map(|i| (i as f64 * 0.11).cos()).collect();
        let s = score(&m, &a, &x).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        let mut g = Graph::new();
        let av = g.constant(Tensor::new(vec![1, AUDIO_SEG_DIM], a).unwrap());
        let xv = g.constant(Tensor::new(vec![1, MOTION_SEG_DIM], x).unwrap());
        let ea = m.embed_audio(&mut g, av).unwrap();
        let ea = g.scale(ea, 7.5);
        let ex = m.embed_motion(&mut g, xv).unwrap();
        let c = g.cosine(ea, ex, SCORE_EPS).unwrap();
        assert!((g.value(c).item() - s).abs() < 1e-12);
    }

    #[test]
    fn masking_hides_channels() {
        let cfg = SyncerConfig { mask: KeypointMask::rigid(&[8, 9]), ..SyncerConfig::default() };
        let m = SyncerModel::new(cfg, 3).unwrap();
        let a = vec![0.1; AUDIO_SEG_DIM];
        let x: Vec<f64> = (0..MOTION_SEG_DIM).map(|i| (i as f64).sin()).collect();
        let mut y = x.clone();
        for t in 0..SEGMENT_FRAMES {
            for k in [8, 9] {
                y[t * FRAME_DIM + k * KEYPOINT_STRIDE + 1] += 5.0 * t as f64;
            }
            y[t * FRAME_DIM + 3] -= 2.0;
        }
        assert_eq!(score(&m, &a, &x).unwrap(), score(&m, &a, &y).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip_keeps_scores() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = SyncerModel::new(SyncerConfig { level: 3, ..SyncerConfig::default() }, 4).unwrap();
        m.freeze();
        let path = dir.path().join("s3.ckpt");
        m.save(&path).unwrap();
        let back = SyncerModel::load(&path).unwrap();
        assert!(back.frozen());
        assert_eq!(back.level(), 3);
        assert_eq!(back.checksum(), m.checksum());
    }

    #[test]
    fn frozen_models_refuse_updates() {
        let mut m = SyncerModel::new(SyncerConfig::default(), 5).unwrap();
        m.freeze();
        let before = m.checksum();
        assert!(matches!(m.update(|_| Ok(())), Err(Error::Frozen(_))));
        assert_eq!(m.checksum(), before);
    }
}
