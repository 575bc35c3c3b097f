//! Finite-difference checks of every training loss on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ms_av_loss, rec_loss};
use crate::diffnum::gradcheck::{check, GradCheckReport};
use crate::diffnum::{Bound, Graph, ParamSet, Tensor, Var};
use crate::discriminator::{d_hinge_loss, g_adv_loss, CriticConfig, Critics};
use crate::error::Result;
use crate::syncer::{
    infonce_loss, triplet_loss, ContrastiveBatch, InfoNceForm, MiningMode, SyncerConfig, SyncerModel, AUDIO_SEG_DIM,
    MOTION_SEG_DIM,
};
use crate::{AUDIO_PER_VIDEO, FRAME_DIM, MFCC_DIM};

/// Bound on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;
const PROBES: usize = 4;

#[derive(Clone, Debug, Serialize)]
pub struct LossCheck {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl LossCheck {
    pub fn passes(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

pub const LOSS_NAMES: [&str; 9] = [
    "infonce", "infonce_literal", "triplet", "ms_av", "d_hinge_frame", "d_hinge_seq", "g_adv", "rec", "total_gen",
];

fn small_syncer(level: usize, seed: u64) -> Result<SyncerModel> {
    SyncerModel::new(SyncerConfig { level, embed_dim: 6, conv_channels: 4, hidden: 12, ..SyncerConfig::default() }, seed)
}

fn small_critics(seed: u64, rng: &mut ChaCha8Rng) -> Result<Critics> {
    let mut c = Critics::new(CriticConfig { dim: 5, windows: vec![4, 8] }, seed)?;
    // Zero biases put ReLU kinks exactly at zero input.
    for (name, t) in c.params.iter_mut() {
        if name.ends_with("/b") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
    }
    // A random output offset keeps the hinge terms from all sitting on the same side.
    let lift = rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    if let Some(b) = c.params.get_mut("frame/l3/b") {
        b.data_mut()[0] = lift;
    }
    if let Some(b) = c.params.get_mut("seq/head/b") {
        b.data_mut()[0] = -lift;
    }
    Ok(c)
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, n: usize) -> ContrastiveBatch {
    ContrastiveBatch {
        level: 1,
        audio: Tensor::randn(&[b, AUDIO_SEG_DIM], 1.0, rng),
        positive: Tensor::randn(&[b, MOTION_SEG_DIM], 0.3, rng),
        negatives: Tensor::randn(&[b * n, MOTION_SEG_DIM], 0.3, rng),
        n_neg: n,
        modes: vec![MiningMode::Hard; b],
        anchors: vec![(0, 0); b],
        negative_sources: vec![(0, 0); b * n],
    }
}

fn merge(acc: &mut LossCheck, r: GradCheckReport) {
    acc.instances += 1;
    acc.checked += r.checked;
    if r.max_rel_error >= acc.max_rel_error {
        acc.max_rel_error = r.max_rel_error;
        acc.worst = r.worst;
    }
}

fn single(name: &str, x: Tensor) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(name, x);
    p
}

/// Runs one loss on `instances` random instances derived from `seed`.
pub fn check_loss(name: &str, seed: u64, instances: usize) -> Result<LossCheck> {
    let mut out = LossCheck { name: name.into(), instances: 0, checked: 0, max_rel_error: 0.0, worst: String::new() };
    for i in 0..instances {
        let s = seed.wrapping_mul(1000).wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let r = match name {
            "infonce" | "infonce_literal" | "triplet" => {
                let m = small_syncer(1, s)?;
                let batch = random_batch(&mut rng, 3, 4);
                let f = |g: &mut Graph, p: &Bound| match name {
                    "infonce" => infonce_loss(g, &m, p, &batch, InfoNceForm::Log),
                    "infonce_literal" => infonce_loss(g, &m, p, &batch, InfoNceForm::Literal),
                    _ => triplet_loss(g, &m, p, &batch, 0.2),
                };
                check(&m.params, f, STEP, Some(PROBES))?
            }
            "ms_av" => {
                let syncers: Vec<SyncerModel> = (1..=4)
                    .map(|l| {
                        let mut m = small_syncer(l, s + l as u64)?;
                        m.freeze();
                        Ok(m)
                    })
                    .collect::<Result<_>>()?;
                let audio = Tensor::randn(&[1, AUDIO_PER_VIDEO * 40, MFCC_DIM], 1.0, &mut rng);
                let x = single("x", Tensor::randn(&[1, 40, FRAME_DIM], 0.3, &mut rng));
                let f = |g: &mut Graph, p: &Bound| Ok(ms_av_loss(g, &syncers, p.get("x"), &audio, &[1, 2, 3, 4])?.0);
                check(&x, f, STEP, Some(24))?
            }
            "d_hinge_frame" | "d_hinge_seq" | "g_adv" => {
                let c = small_critics(s, &mut rng)?;
                let real = Tensor::randn(&[2, 9, FRAME_DIM], 0.5, &mut rng);
                let fake = Tensor::randn(&[2, 9, FRAME_DIM], 0.5, &mut rng);
                let f = |g: &mut Graph, p: &Bound| -> Result<Var> {
                    let (r, fk) = (g.constant(real.clone()), g.constant(fake.clone()));
                    match name {
                        "d_hinge_frame" => {
                            let (a, b) = (c.frame_scores(g, p, r)?, c.frame_scores(g, p, fk)?);
                            d_hinge_loss(g, a, b)
                        }
                        "d_hinge_seq" => {
                            let (a, b) = (c.sequence_scores(g, p, r)?, c.sequence_scores(g, p, fk)?);
                            d_hinge_loss(g, a, b)
                        }
                        _ => g_adv_loss(g, &c, p, fk),
                    }
                };
                check(&c.params, f, STEP, Some(PROBES))?
            }
            "rec" => {
                let gt = Tensor::randn(&[2, 6, FRAME_DIM], 0.5, &mut rng);
                let x = single("x", Tensor::randn(&[2, 6, FRAME_DIM], 0.5, &mut rng));
                let f = |g: &mut Graph, p: &Bound| {
                    let t = g.constant(gt.clone());
                    rec_loss(g, p.get("x"), t)
                };
                // Quadratic, so central differences are exact up to round-off.
                check(&x, f, 1e-3, Some(32))?
            }
            "total_gen" => total_gen_instance(s, &mut rng)?,
            other => return Err(crate::Error::Invalid(format!("unknown loss `{other}`"))),
        };
        merge(&mut out, r);
    }
    Ok(out)
}

/// The full generator objective with respect to the generator parameters.
fn total_gen_instance(seed: u64, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    use crate::generator::{GeneratorConfig, GeneratorModel};
    use super::{generator_objective, TrainConfig};
    let cfg = TrainConfig {
        generator: GeneratorConfig { dim: 8, layers: 1, heads: 2, ff_mult: 2 },
        ..TrainConfig::desk()
    };
    let mut gen = GeneratorModel::new(cfg.generator.clone(), seed)?;
    // Small enough that the rollout stays near the ground truth and the
    // objective keeps a magnitude where round-off stays below the tolerance.
    for (_, t) in gen.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.01..0.01);
        }
    }
    let critics = small_critics(seed, rng)?;
    let syncers: Vec<SyncerModel> = (1..=4)
        .map(|l| {
            let mut m = small_syncer(l, seed + 7 * l as u64)?;
            m.freeze();
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let frames = 40;
    let gt = Tensor::randn(&[1, frames, FRAME_DIM], 0.05, rng);
    let audio = Tensor::randn(&[1, AUDIO_PER_VIDEO * frames, MFCC_DIM], 1.0, rng);
    let f = |g: &mut Graph, p: &Bound| -> Result<Var> {
        let cp = critics.params.bind(g, false);
        let gtv = g.constant(gt.clone());
        let x0 = g.slice(gtv, 1, 0, 1)?;
        let x0 = g.reshape(x0, &[1, FRAME_DIM])?;
        let a = g.constant(audio.clone());
        let roll = gen.rollout_with(g, p, x0, a, frames)?;
        Ok(generator_objective(g, &cfg, &critics, &cp, &syncers, roll.frames, gtv, &audio)?.total)
    };
    check(&gen.params, f, 1e-4, Some(2))
}

/// Every registered loss, `instances` random instances each.
pub fn gradcheck_suite(seed: u64, instances: usize) -> Result<Vec<LossCheck>> {
    LOSS_NAMES.iter().map(|n| check_loss(n, seed, instances)).collect()
}

