//! Generator objective and the alternating critic/generator optimisation.

mod checks;
mod run;

pub use checks::{check_loss, gradcheck_suite, LossCheck, GRADCHECK_TOL, LOSS_NAMES};

pub use run::{
    ablation_ms_vs_finest, ablation_runs, adversarial_grid, run_grid, sample_batch, train, validate, AblationReport, Batch, GridReport,
    GridRow, LogRecord, TrainOutcome, ValRecord,
};

use serde::{Deserialize, Serialize};

use crate::diffnum::{Bound, Graph, Tensor, Var};
use crate::discriminator::{g_adv_terms, CriticConfig, Critics};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorModel};
use crate::pyramid::{audio_window_indices, build_pyramid_var, gather_windows, keypoint_window_indices};
use crate::syncer::{score_pairs, SyncScorer};
use crate::features::{SEGMENT_AUDIO_FRAMES, SEGMENT_FRAMES};
use crate::{AUDIO_PER_VIDEO, NUM_LEVELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub critics: CriticConfig,
    pub lambda_av: f64,
    pub lambda_adv: f64,
    pub lambda_rec: f64,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Training sequence length in frames.
    pub seq_len: usize,
    /// Iterations at the base learning rate.
    pub iterations: usize,
    /// Further iterations at `decay_factor` times the base rate.
    pub decay_iterations: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Levels whose AV loss enters the objective.
    pub av_levels: Vec<usize>,
    /// Validation every this many iterations (and at the start and end).
    pub val_every: usize,
    pub val_clips: usize,
    pub val_frames: usize,
    pub val_range: usize,
    /// Checkpoint every this many iterations when an output directory is set.
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            generator: GeneratorConfig { dim: 32, layers: 2, heads: 4, ff_mult: 2 },
            critics: CriticConfig { dim: 32, ..CriticConfig::default() },
            lambda_av: 8.0,
            lambda_adv: 0.1,
            lambda_rec: 1.0,
            lr_gen: 5e-4,
            lr_disc: 2.5e-4,
            beta1: 0.0,
            beta2: 0.999,
            seq_len: 40,
            iterations: 400,
            decay_iterations: 28,
            decay_factor: 0.1,
            batch_size: 16,
            av_levels: vec![1, 2, 3, 4],
            val_every: 100,
            val_clips: 8,
            val_frames: 160,
            val_range: 4,
            checkpoint_every: None,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            generator: GeneratorConfig::paper(),
            critics: CriticConfig::paper(),
            lr_gen: 2e-5,
            lr_disc: 1e-5,
            iterations: 70_000,
            decay_iterations: 5_000,
            checkpoint_every: Some(5_000),
            ..Self::desk()
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.iterations + self.decay_iterations
    }

    /// Learning-rate multiplier at 1-based iteration `it`.
    pub fn lr_factor(&self, it: usize) -> f64 {
        if it > self.iterations {
            self.decay_factor
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.critics.validate()?;
        let lambdas = [self.lambda_av, self.lambda_adv, self.lambda_rec];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Invalid(format!("loss weights must be finite and non-negative, got {lambdas:?}")));
        }
        if !(self.lr_gen > 0.0 && self.lr_disc > 0.0) {
            return Err(Error::Invalid(format!("learning rates must be positive, got {} / {}", self.lr_gen, self.lr_disc)));
        }
        if self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::Invalid("batch_size and val_every must be positive".into()));
        }
        if let Some(&l) = self.av_levels.iter().find(|&&l| l == 0 || l > NUM_LEVELS) {
            return Err(Error::Invalid(format!("AV loss level {l} outside 1..={NUM_LEVELS}")));
        }
        let need = crate::pyramid::min_length(NUM_LEVELS).max(self.critics.min_len());
        if self.seq_len < need {
            return Err(Error::Invalid(format!("seq_len {} below the {need}-frame minimum", self.seq_len)));
        }
        Ok(())
    }
}

/// `sum((x - gt)^2) / B` over `[B, T, 60]`.
pub fn rec_loss(g: &mut Graph, x: Var, gt: Var) -> Result<Var> {
    if g.shape(x) != g.shape(gt) {
        return Err(Error::Shape(format!("rec_loss: {:?} vs {:?}", g.shape(x), g.shape(gt))));
    }
    let b = g.shape(x)[0].max(1);
    let d = g.sub(x, gt)?;
    let d = g.square(d);
    let s = g.sum(d);
    Ok(g.scale(s, 1.0 / b as f64))
}

/// Per-level AV losses `-mean_t S^i(a^i_t, x^i_t)` over stride-1, edge-padded
/// segments of a generated `[B, T, 60]` sequence and its `[B, 4T, 26]` audio.
/// Returns the sum and the per-level terms in `levels` order.
pub fn ms_av_loss<S: SyncScorer>(
    g: &mut Graph,
    syncers: &[S],
    x: Var,
    audio: &Tensor,
    levels: &[usize],
) -> Result<(Var, Vec<Var>)> {
    if levels.is_empty() {
        return Err(Error::Invalid("ms_av_loss needs at least one level".into()));
    }
    let sx = g.shape(x).to_vec();
    if audio.ndim() != 3 || audio.shape()[0] != sx[0] || audio.shape()[1] != AUDIO_PER_VIDEO * sx[1] {
        return Err(Error::Shape(format!("ms_av_loss: keypoints {sx:?} with audio {:?}", audio.shape())));
    }
    let depth = levels.iter().copied().max().unwrap_or(1);
    let mut pick = Vec::with_capacity(levels.len());
    for &l in levels {
        let s = syncers
            .iter()
            .find(|s| s.level() == l)
            .ok_or_else(|| Error::Invalid(format!("no syncer for level {l}")))?;
        if !s.is_frozen() {
            return Err(Error::Frozen(format!("level-{l} syncer must be frozen before generator training")));
        }
        pick.push(s);
    }
    let xp = build_pyramid_var(g, x, depth)?;
    let a = g.constant(audio.clone());
    let ap = build_pyramid_var(g, a, depth)?;
    let mut terms = Vec::with_capacity(levels.len());
    for (&l, s) in levels.iter().zip(pick) {
        let len = g.shape(xp[l - 1])[1];
        let alen = g.shape(ap[l - 1])[1];
        let centers: Vec<usize> = (0..len).collect();
        let motion = gather_windows(g, xp[l - 1], &keypoint_window_indices(len, &centers), SEGMENT_FRAMES)?;
        let au = gather_windows(g, ap[l - 1], &audio_window_indices(alen, &centers), SEGMENT_AUDIO_FRAMES)?;
        let sc = score_pairs(s, g, au, motion)?;
        let m = g.mean(sc);
        terms.push(g.neg(m));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok((total, terms))
}

/// Every term of the generator objective for one batch.
#[derive(Clone, Debug)]
pub struct GenLoss {
    pub total: Var,
    pub av: Var,
    pub av_levels: Vec<Var>,
    pub adv_frame: Var,
    pub adv_seq: Var,
    pub rec: Var,
}

/// `lambda_av * L_AV + lambda_adv * (L_Gf + L_Gs) + lambda_rec * L_rec` for a
/// generated sequence `fake` against ground truth `gt`.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<S: SyncScorer>(
    g: &mut Graph,
    cfg: &TrainConfig,
    critics: &Critics,
    cp: &Bound,
    syncers: &[S],
    fake: Var,
    gt: Var,
    audio: &Tensor,
) -> Result<GenLoss> {
    let (av, av_levels) = ms_av_loss(g, syncers, fake, audio, &cfg.av_levels)?;
    let fs = critics.frame_scores(g, cp, fake)?;
    let ss = critics.sequence_scores(g, cp, fake)?;
    let (adv_frame, adv_seq) = g_adv_terms(g, fs, ss)?;
    let rec = rec_loss(g, fake, gt)?;
    let a = g.scale(av, cfg.lambda_av);
    let adv = g.add(adv_frame, adv_seq)?;
    let adv = g.scale(adv, cfg.lambda_adv);
    let r = g.scale(rec, cfg.lambda_rec);
    let total = g.add(a, adv)?;
    let total = g.add(total, r)?;
    Ok(GenLoss { total, av, av_levels, adv_frame, adv_seq, rec })
}

/// Fresh generator and critics for `cfg`, seeded from `cfg.seed`.
pub fn init_models(cfg: &TrainConfig) -> Result<(GeneratorModel, Critics)> {
    let g = GeneratorModel::new(cfg.generator.clone(), cfg.seed.wrapping_mul(2).wrapping_add(11))?;
    let c = Critics::new(cfg.critics.clone(), cfg.seed.wrapping_mul(2).wrapping_add(12))?;
    Ok((g, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syncer::{SyncerConfig, SyncerModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scores every pair with the same constant.
    struct Constant {
        level: usize,
        value: f64,
    }

    impl SyncScorer for Constant {
        fn level(&self) -> usize {
            self.level
        }

        fn embed_audio(&self, g: &mut Graph, a: Var) -> Result<Var> {
            let n = g.shape(a)[0];
            Ok(g.constant(Tensor::new(vec![n, 2], [1.0, 0.0].repeat(n)).unwrap()))
        }

        fn embed_motion(&self, g: &mut Graph, x: Var) -> Result<Var> {
            let n = g.shape(x)[0];
            let row = [self.value, (1.0 - self.value * self.value).max(0.0).sqrt()];
            let c = g.constant(Tensor::new(vec![n, 2], row.repeat(n)).unwrap());
            // Keep a path to the input so gradients are defined.
            let z = g.scale(x, 0.0);
            let z = g.sum_axis(z, 1)?;
            let z = g.reshape(z, &[n, 1])?;
            g.add(c, z)
        }
    }

    fn stubs(value: f64) -> Vec<Constant> {
        (1..=4).map(|level| Constant { level, value }).collect()
    }

    fn inputs(seed: u64, b: usize, t: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (Tensor::randn(&[b, t, 60], 0.3, &mut rng), Tensor::randn(&[b, 4 * t, 26], 1.0, &mut rng))
    }

    fn av_value<S: SyncScorer>(s: &[S], x: &Tensor, a: &Tensor, levels: &[usize]) -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (l, _) = ms_av_loss(&mut g, s, xv, a, levels).unwrap();
        g.value(l).item()
    }

    #[test]
    fn av_loss_with_constant_scorers() {
        let (x, a) = inputs(0, 2, 40);
        assert!((av_value(&stubs(1.0), &x, &a, &[1, 2, 3, 4]) + 4.0).abs() < 1e-12);
        assert_eq!(av_value(&stubs(0.0), &x, &a, &[1, 2, 3, 4]), 0.0);
        assert!((av_value(&stubs(1.0), &x, &a, &[1]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn av_loss_requires_frozen_syncers() {
        let (x, a) = inputs(1, 1, 40);
        let s = vec![SyncerModel::new(SyncerConfig { level: 1, embed_dim: 4, conv_channels: 2, hidden: 4, ..SyncerConfig::default() }, 0).unwrap()];
        let mut g = Graph::new();
        let xv = g.constant(x);
        assert!(matches!(ms_av_loss(&mut g, &s, xv, &a, &[1]), Err(Error::Frozen(_))));
    }

    #[test]
    fn rec_loss_examples() {
        let mut g = Graph::new();
        let (x, _) = inputs(2, 3, 8);
        let a = g.constant(x.clone());
        let b = g.constant(x.clone());
        let l = rec_loss(&mut g, a, b).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let mut y = Tensor::zeros(&[1, 8, 60]);
        y.data_mut()[77] = 1.0;
        let (z, y) = (g.constant(Tensor::zeros(&[1, 8, 60])), g.constant(y));
        let l = rec_loss(&mut g, z, y).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let (p, q) = (inputs(3, 3, 8).0, inputs(4, 3, 8).0);
        let brute: f64 = p.data().iter().zip(q.data()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / 3.0;
        let (pv, qv) = (g.constant(p), g.constant(q));
        let l = rec_loss(&mut g, pv, qv).unwrap();
        assert!((g.value(l).item() - brute).abs() < 1e-12);
        let w = g.constant(Tensor::zeros(&[1, 7, 60]));
        assert!(rec_loss(&mut g, z, w).is_err());
    }

    #[test]
    fn av_loss_is_bounded_with_trained_shape_syncers() {
        let s: Vec<SyncerModel> = (1..=4)
            .map(|l| {
                let mut m = SyncerModel::new(SyncerConfig { level: l, embed_dim: 8, conv_channels: 4, hidden: 8, ..SyncerConfig::default() }, l as u64).unwrap();
                m.freeze();
                m
            })
            .collect();
        for seed in 0..4 {
            let (x, a) = inputs(seed, 2, 40);
            let v = av_value(&s, &x, &a, &[1, 2, 3, 4]);
            assert!((-4.0..=4.0).contains(&v));
        }
    }

    #[test]
    fn every_loss_passes_gradient_check() {
        for c in gradcheck_suite(3, 1).unwrap() {
            assert!(c.passes(), "{c:?}");
        }
    }

    #[test]
    fn config_checks() {
        TrainConfig::desk().validate().unwrap();
        TrainConfig::paper().validate().unwrap();
        assert!(TrainConfig { lambda_av: -1.0, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { lr_gen: 0.0, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { av_levels: vec![5], ..TrainConfig::desk() }.validate().is_err());
        let c = TrainConfig::desk();
        assert_eq!(c.lr_factor(c.iterations), 1.0);
        assert_eq!(c.lr_factor(c.iterations + 1), 0.1);
    }
}
