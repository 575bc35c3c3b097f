//! Frame and sequence critics with hinge losses.
//!
//! The frame critic scores single keypoint frames. The sequence critic runs a
//! GRU over sliding windows of several lengths (half-overlapping) and averages
//! the window scores. Both return raw, unbounded scores.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{checkpoint, Bound, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::FRAME_DIM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub dim: usize,
    /// Window lengths of the sequence critic.
    pub windows: Vec<usize>,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { dim: 64, windows: vec![4, 8, 16, 32] }
    }
}

impl CriticConfig {
    pub fn paper() -> Self {
        Self { dim: 512, ..Self::default() }
    }

    pub fn min_len(&self) -> usize {
        self.windows.iter().copied().min().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.windows.is_empty() || self.windows.iter().any(|&w| w < 2) {
            return Err(Error::Invalid(format!(
                "critic needs a positive width and window lengths of at least 2, got dim {} windows {:?}",
                self.dim, self.windows
            )));
        }
        Ok(())
    }
}

/// Start offsets of the half-overlapping windows of length `w` in `len` frames.
pub fn window_starts(len: usize, w: usize) -> Vec<usize> {
    if w > len {
        return Vec::new();
    }
    (0..=len - w).step_by((w / 2).max(1)).collect()
}

#[derive(Clone, Debug)]
struct Gru {
    input: Linear,
    recur: String,
    hidden: usize,
}

impl Gru {
    /// Runs over `xs` (`[n, L, in]`) and returns the final state `[n, H]`.
    fn forward(&self, g: &mut Graph, p: &Bound, xs: Var) -> Result<Var> {
        let s = g.shape(xs).to_vec();
        let (n, len, hd) = (s[0], s[1], self.hidden);
        let proj = self.input.forward(g, p, xs)?;
        let u = p.get(&self.recur);
        let mut h = g.constant(Tensor::zeros(&[n, hd]));
        for t in 0..len {
            let xt = g.slice(proj, 1, t, 1)?;
            let xt = g.reshape(xt, &[n, 3 * hd])?;
            let hu = g.matmul(h, u)?;
            let (xz, xr, xn) = (g.slice(xt, 1, 0, hd)?, g.slice(xt, 1, hd, hd)?, g.slice(xt, 1, 2 * hd, hd)?);
            let (hz, hr, hn) = (g.slice(hu, 1, 0, hd)?, g.slice(hu, 1, hd, hd)?, g.slice(hu, 1, 2 * hd, hd)?);
            let z = g.add(xz, hz)?;
            let z = g.sigmoid(z);
            let r = g.add(xr, hr)?;
            let r = g.sigmoid(r);
            let rh = g.mul(r, hn)?;
            let cand = g.add(xn, rh)?;
            let cand = g.tanh(cand);
            // h = cand + z * (h - cand)
            let diff = g.sub(h, cand)?;
            let zd = g.mul(z, diff)?;
            h = g.add(cand, zd)?;
        }
        Ok(h)
    }
}

/// Both critics in one parameter set (`frame/...`, `seq/...`).
#[derive(Clone, Debug)]
pub struct Critics {
    pub config: CriticConfig,
    pub params: ParamSet,
    frame: Mlp,
    embed: Linear,
    gru: Gru,
    head: Linear,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: CriticConfig,
}

impl Critics {
    pub fn new(config: CriticConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let d = config.dim;
        let frame = Mlp::create(&mut p, "frame", &[FRAME_DIM, d, d, d, 1], Activation::Relu, false, false, &mut rng);
        let embed = Linear::create(&mut p, "seq/embed", 2 * FRAME_DIM, d, &mut rng);
        let input = Linear::create(&mut p, "seq/gru/in", d, 3 * d, &mut rng);
        let bound = 1.0 / (d as f64).sqrt();
        p.insert("seq/gru/u", Tensor::uniform(&[d, 3 * d], bound, &mut rng));
        let gru = Gru { input, recur: "seq/gru/u".into(), hidden: d };
        let head = Linear::create(&mut p, "seq/head", d, 1, &mut rng);
        Ok(Self { config, params: p, frame, embed, gru, head })
    }

    /// Frame scores: `[B, T, 60]` -> `[B, T]`.
    pub fn frame_scores(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != FRAME_DIM {
            return Err(Error::Shape(format!("frame critic expects [B, T, {FRAME_DIM}], got {s:?}")));
        }
        let y = self.frame.forward(g, p, x)?;
        g.reshape(y, &[s[0], s[1]])
    }

    /// Sequence scores: `[B, T, 60]` -> `[B]`, mean over every window of every length.
    pub fn sequence_scores(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != FRAME_DIM {
            return Err(Error::Shape(format!("sequence critic expects [B, T, {FRAME_DIM}], got {s:?}")));
        }
        let (b, len, d) = (s[0], s[1], self.config.dim);
        if len < self.config.min_len() {
            return Err(Error::TooShort(format!(
                "sequence critic needs at least {} frames, got {len}",
                self.config.min_len()
            )));
        }
        let first = g.slice(x, 1, 0, 1)?;
        let prev = g.slice(x, 1, 0, len - 1)?;
        let prev = g.concat(&[first, prev], 1)?;
        let vel = g.sub(x, prev)?;
        let feats = g.concat(&[x, vel], 2)?;
        let e = self.embed.forward(g, p, feats)?;
        let e = g.tanh(e);
        let mut scores = Vec::new();
        for &w in &self.config.windows {
            let starts = window_starts(len, w);
            if starts.is_empty() {
                continue;
            }
            let idx: Vec<usize> = starts.iter().flat_map(|&s0| s0..s0 + w).collect();
            let win = g.index_select(e, 1, &idx)?;
            let win = g.reshape(win, &[b * starts.len(), w, d])?;
            let h = self.gru.forward(g, p, win)?;
            let sc = self.head.forward(g, p, h)?;
            scores.push(g.reshape(sc, &[b, starts.len()])?);
        }
        let all = g.concat(&scores, 1)?;
        g.mean_axis(all, 1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&Meta { kind: "critics".into(), config: self.config.clone() })?;
        checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load(path)?;
        let meta: Meta = serde_json::from_str(&meta)?;
        if meta.kind != "critics" {
            return Err(Error::Format(format!("{} holds a `{}` checkpoint, not critics", path.display(), meta.kind)));
        }
        let mut c = Self::new(meta.config, 0)?;
        c.params.load_from(&params)?;
        Ok(c)
    }
}

/// `mean(relu(1 + fake)) + mean(relu(1 - real))`.
pub fn d_hinge_loss(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    if g.value(real).is_empty() || g.value(fake).is_empty() {
        return Err(Error::Invalid("hinge loss needs non-empty score batches".into()));
    }
    let f = g.add_scalar(fake, 1.0);
    let f = g.relu(f);
    let f = g.mean(f);
    let r = g.neg(real);
    let r = g.add_scalar(r, 1.0);
    let r = g.relu(r);
    let r = g.mean(r);
    g.add(f, r)
}

/// Generator adversarial terms `(L_Gf, L_Gs)` from frame scores `[B, T]`
/// (frame 0 excluded) and sequence scores `[B]`.
pub fn g_adv_terms(g: &mut Graph, frame_scores: Var, seq_scores: Var) -> Result<(Var, Var)> {
    let t = g.shape(frame_scores)[1];
    if t < 2 {
        return Err(Error::TooShort("adversarial loss needs at least two frames".into()));
    }
    let f = g.slice(frame_scores, 1, 1, t - 1)?;
    let f = g.mean(f);
    let lf = g.neg(f);
    let s = g.mean(seq_scores);
    let ls = g.neg(s);
    Ok((lf, ls))
}

/// `L_Gf + L_Gs` for a generated `[B, T, 60]` sequence.
pub fn g_adv_loss(g: &mut Graph, critics: &Critics, p: &Bound, fake: Var) -> Result<Var> {
    let fs = critics.frame_scores(g, p, fake)?;
    let ss = critics.sequence_scores(g, p, fake)?;
    let (lf, ls) = g_adv_terms(g, fs, ss)?;
    g.add(lf, ls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::gradcheck;

    fn hinge(real: &[f64], fake: &[f64]) -> f64 {
        let mut g = Graph::new();
        let r = g.constant(Tensor::from_vec(real.to_vec()));
        let f = g.constant(Tensor::from_vec(fake.to_vec()));
        let l = d_hinge_loss(&mut g, r, f).unwrap();
        g.value(l).item()
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge(&[0.0; 3], &[0.0; 3]), 2.0);
        assert_eq!(hinge(&[1.0, 1.5], &[-1.0, -3.0]), 0.0);
        assert_eq!(hinge(&[-1.0], &[1.0]), 4.0);
        assert!((hinge(&[0.5, 2.0], &[-0.5, 0.0]) - (0.75 + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn adversarial_terms_skip_frame_zero() {
        let mut g = Graph::new();
        let fs = g.constant(Tensor::new(vec![1, 4], vec![9.0, 0.5, 0.5, 0.5]).unwrap());
        let ss = g.constant(Tensor::from_vec(vec![0.0]));
        let (lf, ls) = g_adv_terms(&mut g, fs, ss).unwrap();
        assert_eq!(g.value(lf).item(), -0.5);
        assert_eq!(g.value(ls).item(), 0.0);
    }

    #[test]
    fn window_layout() {
        assert_eq!(window_starts(10, 4), vec![0, 2, 4, 6]);
        assert_eq!(window_starts(40, 32), vec![0]);
        assert!(window_starts(20, 32).is_empty());
    }

    #[test]
    fn sequence_critic_accepts_many_lengths() {
        let c = Critics::new(CriticConfig { dim: 8, ..CriticConfig::default() }, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for len in [4, 5, 17, 40, 120] {
            let mut g = Graph::new();
            let p = c.params.bind(&mut g, false);
            let x = g.constant(Tensor::randn(&[2, len, FRAME_DIM], 0.3, &mut rng));
            let s = c.sequence_scores(&mut g, &p, x).unwrap();
            assert_eq!(g.shape(s), &[2]);
            assert!(g.value(s).is_finite());
        }
        let mut g = Graph::new();
        let p = c.params.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 3, FRAME_DIM]));
        assert!(matches!(c.sequence_scores(&mut g, &p, x), Err(Error::TooShort(_))));
    }

    #[test]
    fn losses_pass_gradient_check() {
        let mut c = Critics::new(CriticConfig { dim: 6, windows: vec![4, 8] }, 2).unwrap();
        // Lift real frame scores past the margin so the bias gradient is not an exact cancellation.
        c.params.get_mut("frame/l3/b").unwrap().data_mut()[0] = 1.5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let real = Tensor::randn(&[2, 9, FRAME_DIM], 0.5, &mut rng);
        let fake = Tensor::randn(&[2, 9, FRAME_DIM], 0.5, &mut rng);
        let d_loss = |g: &mut Graph, p: &Bound| {
            let (r, f) = (g.constant(real.clone()), g.constant(fake.clone()));
            let (rf, ff) = (c.frame_scores(g, p, r)?, c.frame_scores(g, p, f)?);
            let (rs, fs) = (c.sequence_scores(g, p, r)?, c.sequence_scores(g, p, f)?);
            let a = d_hinge_loss(g, rf, ff)?;
            let b = d_hinge_loss(g, rs, fs)?;
            g.add(a, b)
        };
        let rep = gradcheck::check(&c.params, d_loss, 1e-6, Some(6)).unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
        let g_loss = |g: &mut Graph, p: &Bound| {
            let f = g.constant(fake.clone());
            g_adv_loss(g, &c, p, f)
        };
        let rep = gradcheck::check(&c.params, g_loss, 1e-6, Some(6)).unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = Critics::new(CriticConfig { dim: 8, windows: vec![4, 16] }, 5).unwrap();
        c.save(&dir.path().join("d.ckpt")).unwrap();
        let back = Critics::load(&dir.path().join("d.ckpt")).unwrap();
        assert_eq!(back.params.checksum(), c.params.checksum());
        assert_eq!(back.config, c.config);
    }
}
