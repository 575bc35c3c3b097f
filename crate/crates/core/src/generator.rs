//! Residual autoregressive keypoint generator.
//!
//! Each step embeds the frames generated so far with a causal transformer,
//! reads four audio feature maps at the next frame, and lets four branch
//! MLPs propose a velocity. A per-keypoint softmax over the branches blends
//! the proposals and the frame advances by `x_{t+1} = x_t + v_{t+1}`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{checkpoint, Bound, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{AudioFeatSequence, KeypointSequence};
use crate::nn::{Activation, Conv1d, LayerNorm, Linear, Mlp};
use crate::{AUDIO_PER_VIDEO, FRAME_DIM, KEYPOINT_STRIDE, MFCC_DIM, NUM_KEYPOINTS, NUM_LEVELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `dim`.
    pub ff_mult: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { dim: 64, layers: 2, heads: 4, ff_mult: 2 }
    }
}

impl GeneratorConfig {
    pub fn paper() -> Self {
        Self { dim: 512, layers: 4, heads: 8, ff_mult: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "generator needs positive sizes with dim divisible by heads (dim {}, heads {})",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Sinusoidal position code of length `dim` for position `t`.
pub fn position_code(t: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let a = t as f64 * rate;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff: Mlp,
}

/// One step's outputs.
#[derive(Clone, Copy, Debug)]
pub struct StepOut {
    /// `[B, 60]`
    pub velocity: Var,
    /// `[B, 10, 4]` blend weights; each keypoint's row sums to one.
    pub weights: Var,
}

/// A differentiable rollout.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// `[B, T, 60]`, frame 0 is the given start frame.
    pub frames: Var,
    /// Blend weights of every generated step.
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub params: ParamSet,
    token: Linear,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    stem: Linear,
    convs: [Conv1d; 3],
    branches: Vec<Mlp>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: GeneratorConfig,
}

impl GeneratorModel {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let d = config.dim;
        let token = Linear::create(&mut p, "temporal/token", FRAME_DIM, d, &mut rng);
        let blocks = (0..config.layers)
            .map(|l| {
                let pre = format!("temporal/block{l}");
                Block {
                    ln1: LayerNorm::create(&mut p, &format!("{pre}/ln1"), d),
                    q: Linear::create(&mut p, &format!("{pre}/q"), d, d, &mut rng),
                    k: Linear::create(&mut p, &format!("{pre}/k"), d, d, &mut rng),
                    v: Linear::create(&mut p, &format!("{pre}/v"), d, d, &mut rng),
                    o: Linear::create(&mut p, &format!("{pre}/o"), d, d, &mut rng),
                    ln2: LayerNorm::create(&mut p, &format!("{pre}/ln2"), d),
                    ff: Mlp::create(&mut p, &format!("{pre}/ff"), &[d, config.ff_mult * d, d], Activation::Gelu, false, false, &mut rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::create(&mut p, "temporal/ln_out", d);
        let stem = Linear::create(&mut p, "audio/stem", MFCC_DIM, d, &mut rng);
        let convs = [
            Conv1d::create(&mut p, "audio/conv1", d, d, 3, 2, &mut rng),
            Conv1d::create(&mut p, "audio/conv2", d, d, 3, 2, &mut rng),
            Conv1d::create(&mut p, "audio/conv3", d, d, 3, 2, &mut rng),
        ];
        let branches = (0..NUM_LEVELS)
            .map(|i| {
                Mlp::create(
                    &mut p,
                    &format!("branch{i}"),
                    &[2 * d + FRAME_DIM, d, d, FRAME_DIM + NUM_KEYPOINTS],
                    Activation::Relu,
                    false,
                    true,
                    &mut rng,
                )
            })
            .collect();
        Ok(Self { config, params: p, token, blocks, final_ln, stem, convs, branches })
    }

    /// Feature maps before upsampling: lengths `T, ceil(T/2), ceil(T/4), ceil(T/8)`.
    /// `audio` is `[B, 4T, 26]`.
    pub fn audio_maps(&self, g: &mut Graph, p: &Bound, audio: Var) -> Result<Vec<Var>> {
        let s = g.shape(audio).to_vec();
        if s.len() != 3 || s[2] != MFCC_DIM || !s[1].is_multiple_of(AUDIO_PER_VIDEO) || s[1] == 0 {
            return Err(Error::Shape(format!("audio_fpn: expected [B, 4T, {MFCC_DIM}], got {s:?}")));
        }
        let pooled = g.avg_pool(audio, 1, AUDIO_PER_VIDEO, AUDIO_PER_VIDEO)?;
        let a1 = self.stem.forward(g, p, pooled)?;
        let mut maps = vec![g.relu(a1)];
        for conv in &self.convs {
            let prev = *maps.last().expect("non-empty");
            let padded = g.pad_replicate(prev, 1, 1, 1)?;
            let y = conv.forward(g, p, padded)?;
            maps.push(g.relu(y));
        }
        Ok(maps)
    }

    /// The four feature maps, each interpolated to the video length `T`.
    pub fn audio_fpn(&self, g: &mut Graph, p: &Bound, audio: Var) -> Result<Vec<Var>> {
        let t = g.shape(audio)[1] / AUDIO_PER_VIDEO;
        let maps = self.audio_maps(g, p, audio)?;
        maps.into_iter()
            .enumerate()
            .map(|(i, m)| if i == 0 { Ok(m) } else { g.interp_linear(m, 1, t) })
            .collect()
    }

    fn embed_tokens(&self, g: &mut Graph, p: &Bound, x: Var, start: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (t, d) = (s[1], self.config.dim);
        let e = self.token.forward(g, p, x)?;
        let pe: Vec<f64> = (start..start + t).flat_map(|i| position_code(i, d)).collect();
        let pe = g.constant(Tensor::new(vec![1, t, d], pe)?);
        g.add(e, pe)
    }

    fn feed_forward(&self, g: &mut Graph, p: &Bound, b: &Block, h: Var) -> Result<Var> {
        let n = b.ln2.forward(g, p, h)?;
        let f = b.ff.forward(g, p, n)?;
        g.add(h, f)
    }

    /// Temporal states for a whole `[B, T, 60]` sequence with a causal mask.
    pub fn temporal_full(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let t = g.shape(x)[1];
        let mut mask = Tensor::zeros(&[t, t]);
        for i in 0..t {
            for j in i + 1..t {
                mask.data_mut()[i * t + j] = f64::NEG_INFINITY;
            }
        }
        let mut h = self.embed_tokens(g, p, x, 0)?;
        for b in &self.blocks {
            let n = b.ln1.forward(g, p, h)?;
            let (q, k, v) = (b.q.forward(g, p, n)?, b.k.forward(g, p, n)?, b.v.forward(g, p, n)?);
            let a = g.attention(q, k, v, self.config.heads, Some(&mask))?;
            let a = b.o.forward(g, p, a)?;
            h = g.add(h, a)?;
            h = self.feed_forward(g, p, b, h)?;
        }
        self.final_ln.forward(g, p, h)
    }

    /// Appends frame `x_t` (`[B, 60]` at position `t`) to the key/value cache
    /// and returns `h_t` as `[B, D]`.
    pub fn temporal_step(&self, g: &mut Graph, p: &Bound, cache: &mut KvCache, x_t: Var) -> Result<Var> {
        let b = g.shape(x_t)[0];
        let x = g.reshape(x_t, &[b, 1, FRAME_DIM])?;
        let mut h = self.embed_tokens(g, p, x, cache.len)?;
        for (l, blk) in self.blocks.iter().enumerate() {
            let n = blk.ln1.forward(g, p, h)?;
            let (q, k, v) = (blk.q.forward(g, p, n)?, blk.k.forward(g, p, n)?, blk.v.forward(g, p, n)?);
            let (k, v) = match cache.kv.get(l) {
                Some(&(ck, cv)) => (g.concat(&[ck, k], 1)?, g.concat(&[cv, v], 1)?),
                None => (k, v),
            };
            if l < cache.kv.len() {
                cache.kv[l] = (k, v);
            } else {
                cache.kv.push((k, v));
            }
            let a = g.attention(q, k, v, self.config.heads, None)?;
            let a = blk.o.forward(g, p, a)?;
            h = g.add(h, a)?;
            h = self.feed_forward(g, p, blk, h)?;
        }
        cache.len += 1;
        let h = self.final_ln.forward(g, p, h)?;
        g.reshape(h, &[b, self.config.dim])
    }

    /// Blends the branch proposals given `h_t`, `x_t` and the four audio
    /// features of frame `t+1` (each `[B, D]`).
    pub fn step(&self, g: &mut Graph, p: &Bound, h_t: Var, x_t: Var, audio_next: &[Var]) -> Result<StepOut> {
        if audio_next.len() != NUM_LEVELS {
            return Err(Error::Invalid(format!("step needs {NUM_LEVELS} audio features, got {}", audio_next.len())));
        }
        let b = g.shape(x_t)[0];
        let mut vels = Vec::with_capacity(NUM_LEVELS);
        let mut logits = Vec::with_capacity(NUM_LEVELS);
        for (i, (branch, &a)) in self.branches.iter().zip(audio_next).enumerate() {
            let inp = g.concat(&[h_t, x_t, a], 1)?;
            let out = branch.forward(g, p, inp)?;
            if !g.value(out).is_finite() {
                let which = [("h_t", h_t), ("x_t", x_t), ("audio", a)]
                    .into_iter()
                    .find(|(_, v)| !g.value(*v).is_finite())
                    .map_or(format!("branch {i} output"), |(n, _)| n.to_string());
                return Err(Error::NonFinite { context: "generator step".into(), detail: format!("non-finite {which}") });
            }
            let v = g.slice(out, 1, 0, FRAME_DIM)?;
            let w = g.slice(out, 1, FRAME_DIM, NUM_KEYPOINTS)?;
            vels.push(g.reshape(v, &[b, NUM_KEYPOINTS, 1, KEYPOINT_STRIDE])?);
            logits.push(g.reshape(w, &[b, NUM_KEYPOINTS, 1])?);
        }
        let w = g.concat(&logits, 2)?;
        let weights = g.softmax(w);
        let v = g.concat(&vels, 2)?;
        let w4 = g.reshape(weights, &[b, NUM_KEYPOINTS, NUM_LEVELS, 1])?;
        let blended = g.mul(v, w4)?;
        let blended = g.sum_axis(blended, 2)?;
        let velocity = g.reshape(blended, &[b, FRAME_DIM])?;
        Ok(StepOut { velocity, weights })
    }

    /// Free-running rollout of `frames` frames (including `x0`, `[B, 60]`)
    /// driven by `audio` (`[B, 4 * frames, 26]`).
    pub fn rollout_with(&self, g: &mut Graph, p: &Bound, x0: Var, audio: Var, frames: usize) -> Result<Rollout> {
        let sa = g.shape(audio).to_vec();
        if frames == 0 || sa.len() != 3 || sa[1] != AUDIO_PER_VIDEO * frames {
            return Err(Error::Shape(format!(
                "rollout of {frames} frames needs audio [B, {}, {MFCC_DIM}], got {sa:?}",
                AUDIO_PER_VIDEO * frames
            )));
        }
        let b = g.shape(x0)[0];
        let maps = self.audio_fpn(g, p, audio)?;
        let mut cache = KvCache::default();
        let mut x_t = x0;
        let mut out = vec![g.reshape(x0, &[b, 1, FRAME_DIM])?];
        let mut weights = Vec::with_capacity(frames.saturating_sub(1));
        for t in 0..frames - 1 {
            let h = self.temporal_step(g, p, &mut cache, x_t)?;
            let a: Vec<Var> = maps
                .iter()
                .map(|&m| {
                    let s = g.slice(m, 1, t + 1, 1)?;
                    g.reshape(s, &[b, self.config.dim])
                })
                .collect::<Result<_>>()?;
            let st = self.step(g, p, h, x_t, &a)?;
            x_t = g.add(x_t, st.velocity)?;
            if let Err(e) = g.value(x_t).check_finite("rollout") {
                return Err(Error::NonFinite { context: "rollout".into(), detail: format!("frame {}: {e}", t + 1) });
            }
            out.push(g.reshape(x_t, &[b, 1, FRAME_DIM])?);
            weights.push(st.weights);
        }
        Ok(Rollout { frames: g.concat(&out, 1)?, weights })
    }

    /// Inference rollout for one clip.
    pub fn rollout(&self, x0: &[f64], audio: &AudioFeatSequence, frames: usize) -> Result<KeypointSequence> {
        if x0.len() != FRAME_DIM {
            return Err(Error::Shape(format!("start frame has {} values, expected {FRAME_DIM}", x0.len())));
        }
        let audio = audio.slice_video(0, frames).map_err(|_| {
            Error::TooShort(format!("rollout of {frames} frames needs {} audio frames, {} available", AUDIO_PER_VIDEO * frames, audio.len()))
        })?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![1, FRAME_DIM], x0.to_vec())?);
        let a = g.constant(Tensor::new(vec![1, audio.len(), MFCC_DIM], audio.data().to_vec())?);
        let r = self.rollout_with(&mut g, &p, x, a, frames)?;
        KeypointSequence::new(g.value(r.frames).data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&Meta { kind: "generator".into(), config: self.config.clone() })?;
        checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load(path)?;
        let meta: Meta = serde_json::from_str(&meta)?;
        if meta.kind != "generator" {
            return Err(Error::Format(format!("{} holds a `{}` checkpoint, not a generator", path.display(), meta.kind)));
        }
        let mut m = Self::new(meta.config, 0)?;
        m.params.load_from(&params)?;
        Ok(m)
    }
}

/// Per-layer keys and values of the frames seen so far.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    kv: Vec<(Var, Var)>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorModel {
        GeneratorModel::new(GeneratorConfig { dim: 16, layers: 2, heads: 4, ff_mult: 2 }, 3).unwrap()
    }

    fn randomize(m: &mut GeneratorModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in m.params.iter_mut() {
            let noise = Tensor::randn(t.shape(), 0.2, &mut rng);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
    }

    fn audio(frames: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let l = AUDIO_PER_VIDEO * frames;
        Tensor::new(vec![1, l, MFCC_DIM], (0..l * MFCC_DIM).map(|i| f(i / MFCC_DIM, i % MFCC_DIM)).collect()).unwrap()
    }

    #[test]
    fn fpn_lengths() {
        let m = small();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let a = g.constant(audio(40, |t, c| ((t * 7 + c) as f64 * 0.1).sin()));
        let maps = m.audio_maps(&mut g, &p, a).unwrap();
        let lens: Vec<usize> = maps.iter().map(|v| g.shape(*v)[1]).collect();
        assert_eq!(lens, vec![40, 20, 10, 5]);
        for v in m.audio_fpn(&mut g, &p, a).unwrap() {
            assert_eq!(g.shape(v), &[1, 40, 16]);
        }
    }

    #[test]
    fn fpn_of_zero_audio_is_constant_in_time() {
        let m = small();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let a = g.constant(audio(24, |_, _| 0.0));
        for v in m.audio_fpn(&mut g, &p, a).unwrap() {
            let t = g.value(v);
            for r in 1..24 {
                assert_eq!(t.row(0)[..16], t.data()[r * 16..(r + 1) * 16]);
            }
        }
    }

    #[test]
    fn fpn_is_shift_equivariant_in_the_interior() {
        let m = small();
        let sig = |t: usize, c: usize| ((t as f64 * 0.37 + c as f64).sin() * 1.3).tanh();
        let run = |shift: usize| {
            let mut g = Graph::new();
            let p = m.params.bind(&mut g, false);
            let a = g.constant(audio(64, |t, c| sig((t + 4 * 64 - 4 * shift) % (4 * 64), c)));
            let maps = m.audio_maps(&mut g, &p, a).unwrap();
            g.value(maps[0]).clone()
        };
        let (base, moved) = (run(0), run(8));
        for t in 10..50 {
            for c in 0..16 {
                assert!((moved.data()[(t + 8) * 16 + c] - base.data()[t * 16 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fresh_model_rolls_out_constant_frames() {
        let m = small();
        let x0: Vec<f64> = (0..FRAME_DIM).map(|i| i as f64 * 0.01).collect();
        let au = AudioFeatSequence::new(audio(40, |t, c| (t + c) as f64 * 0.01).into_data()).unwrap();
        let out = m.rollout(&x0, &au, 40).unwrap();
        assert_eq!(out.len(), 40);
        for t in 0..40 {
            assert_eq!(out.frame(t), &x0[..]);
        }
    }

    #[test]
    fn incremental_states_match_causal_full_pass() {
        let mut m = small();
        randomize(&mut m, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = Tensor::randn(&[2, 7, FRAME_DIM], 1.0, &mut rng);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let xv = g.constant(xs.clone());
        let full = m.temporal_full(&mut g, &p, xv).unwrap();
        let full = g.value(full).clone();
        let mut cache = KvCache::default();
        for t in 0..7 {
            let xt = g.slice(xv, 1, t, 1).unwrap();
            let xt = g.reshape(xt, &[2, FRAME_DIM]).unwrap();
            let h = m.temporal_step(&mut g, &p, &mut cache, xt).unwrap();
            let h = g.value(h);
            for b in 0..2 {
                for c in 0..16 {
                    let want = full.data()[(b * 7 + t) * 16 + c];
                    assert!((h.data()[b * 16 + c] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn future_frames_do_not_change_past_states() {
        let mut m = small();
        randomize(&mut m, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = Tensor::randn(&[1, 6, FRAME_DIM], 1.0, &mut rng);
        let run = |x: Tensor| {
            let mut g = Graph::new();
            let p = m.params.bind(&mut g, false);
            let xv = g.constant(x);
            let h = m.temporal_full(&mut g, &p, xv).unwrap();
            g.value(h).clone()
        };
        let base = run(xs.clone());
        let mut pert = xs;
        for c in 0..FRAME_DIM {
            pert.data_mut()[4 * FRAME_DIM + c] += 2.0;
        }
        let moved = run(pert);
        assert_eq!(base.data()[..4 * 16], moved.data()[..4 * 16]);
        assert_ne!(base.data()[4 * 16..], moved.data()[4 * 16..]);
    }

    #[test]
    fn branch_weights_are_a_softmax() {
        let mut m = small();
        randomize(&mut m, 5);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let x0 = g.constant(Tensor::full(&[2, FRAME_DIM], 0.1));
        let a = g.constant(Tensor::new(vec![2, 40, MFCC_DIM], (0..2 * 40 * MFCC_DIM).map(|i| (i as f64).sin()).collect()).unwrap());
        let r = m.rollout_with(&mut g, &p, x0, a, 10).unwrap();
        assert_eq!(r.weights.len(), 9);
        for w in &r.weights {
            for row in g.value(*w).data().chunks(NUM_LEVELS) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small();
        randomize(&mut m, 6);
        m.save(&dir.path().join("g.ckpt")).unwrap();
        let back = GeneratorModel::load(&dir.path().join("g.ckpt")).unwrap();
        assert_eq!(back.params.checksum(), m.params.checksum());
        assert_eq!(back.config, m.config);
    }
}
