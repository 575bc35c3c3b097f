use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generator_objective, init_models, TrainConfig};
use crate::diffnum::{Adam, AdamConfig, Graph, Tensor};
use crate::discriminator::{d_hinge_loss, Critics};
use crate::error::{Error, Result};
use crate::eval::av_offset_pyramid;
use crate::features::{AudioFeatSequence, AvClip, KeypointSequence};
use crate::generator::GeneratorModel;
use crate::pyramid::AvPyramid;
use crate::syncer::SyncerModel;
use crate::{AUDIO_PER_VIDEO, FRAME_DIM, MFCC_DIM};

/// Ground-truth windows: keypoints `[B, T, 60]` and audio `[B, 4T, 26]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub keypoints: Tensor,
    pub audio: Tensor,
}

/// Uniform clip choice, then a uniform start inside the clip.
pub fn sample_batch<R: Rng + ?Sized>(clips: &[AvClip], size: usize, frames: usize, rng: &mut R) -> Result<Batch> {
    let usable: Vec<&AvClip> = clips.iter().filter(|c| c.frames() >= frames).collect();
    if usable.is_empty() {
        return Err(Error::TooShort(format!("no training clip has {frames} frames")));
    }
    let mut kp = Vec::with_capacity(size * frames * FRAME_DIM);
    let mut au = Vec::with_capacity(size * frames * AUDIO_PER_VIDEO * MFCC_DIM);
    for _ in 0..size {
        let c = usable[rng.random_range(0..usable.len())];
        let start = rng.random_range(0..=c.frames() - frames);
        kp.extend_from_slice(&c.keypoints.data()[start * FRAME_DIM..(start + frames) * FRAME_DIM]);
        let a0 = start * AUDIO_PER_VIDEO * MFCC_DIM;
        au.extend_from_slice(&c.audio.data()[a0..a0 + frames * AUDIO_PER_VIDEO * MFCC_DIM]);
    }
    Ok(Batch {
        keypoints: Tensor::new(vec![size, frames, FRAME_DIM], kp)?,
        audio: Tensor::new(vec![size, AUDIO_PER_VIDEO * frames, MFCC_DIM], au)?,
    })
}

/// Held-out rollout metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub iter: usize,
    /// Mean AV confidence per syncer level.
    pub confidence: BTreeMap<usize, f64>,
    /// Mean absolute AV offset per syncer level.
    pub abs_offset: BTreeMap<usize, f64>,
    /// Reconstruction loss over the first `seq_len` frames.
    pub rec: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub l_d: f64,
    pub l_df: f64,
    pub l_ds: f64,
    pub l_gf: f64,
    pub l_gs: f64,
    pub l_rec: f64,
    pub l_av: BTreeMap<usize, f64>,
    pub l_g: f64,
    pub lr_gen: f64,
    pub lr_disc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val: Option<ValRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub generator: GeneratorModel,
    pub critics: Critics,
    pub log: Vec<LogRecord>,
    /// Validation at iteration 0, every `val_every` iterations and at the end.
    pub val: Vec<ValRecord>,
}

/// Rolls the generator out on up to `cfg.val_clips` held-out clips of at
/// least `cfg.val_frames` frames and scores the result with every syncer.
pub fn validate(gen: &GeneratorModel, syncers: &[SyncerModel], clips: &[AvClip], cfg: &TrainConfig, iter: usize) -> Result<ValRecord> {
    let frames = cfg.val_frames;
    let chosen: Vec<&AvClip> = clips.iter().filter(|c| c.frames() >= frames).take(cfg.val_clips).collect();
    if chosen.is_empty() {
        return Err(Error::TooShort(format!("no validation clip has {frames} frames")));
    }
    let b = chosen.len();
    let x0: Vec<f64> = chosen.iter().flat_map(|c| c.keypoints.frame(0).to_vec()).collect();
    let audio: Vec<f64> = chosen
        .iter()
        .flat_map(|c| c.audio.data()[..frames * AUDIO_PER_VIDEO * MFCC_DIM].to_vec())
        .collect();
    let mut g = Graph::new();
    let p = gen.params.bind(&mut g, false);
    let xv = g.constant(Tensor::new(vec![b, FRAME_DIM], x0)?);
    let av = g.constant(Tensor::new(vec![b, AUDIO_PER_VIDEO * frames, MFCC_DIM], audio)?);
    let roll = gen.rollout_with(&mut g, &p, xv, av, frames)?;
    let out = g.value(roll.frames);
    let depth = syncers.iter().map(|s| s.level()).max().unwrap_or(1);
    let rec_len = cfg.seq_len.min(frames);
    let mut rec = 0.0;
    let mut conf: BTreeMap<usize, f64> = BTreeMap::new();
    let mut offs: BTreeMap<usize, f64> = BTreeMap::new();
    for (i, c) in chosen.iter().enumerate() {
        let gen_kp = &out.data()[i * frames * FRAME_DIM..(i + 1) * frames * FRAME_DIM];
        rec += gen_kp[..rec_len * FRAME_DIM]
            .iter()
            .zip(&c.keypoints.data()[..rec_len * FRAME_DIM])
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>();
        let clip = AvClip::new(
            c.identity_id.clone(),
            c.clip_id.clone(),
            KeypointSequence::new(gen_kp.to_vec())?,
            AudioFeatSequence::new(c.audio.data()[..frames * AUDIO_PER_VIDEO * MFCC_DIM].to_vec())?,
        )?;
        let pyr = AvPyramid::from_clip(&clip, depth)?;
        for s in syncers {
            let r = av_offset_pyramid(s, &pyr, cfg.val_range)?;
            *conf.entry(s.level()).or_default() += r.confidence / b as f64;
            *offs.entry(s.level()).or_default() += r.abs_offset as f64 / b as f64;
        }
    }
    Ok(ValRecord { iter, confidence: conf, abs_offset: offs, rec: rec / b as f64 })
}

fn non_finite(component: &str, iter: usize, value: f64) -> Error {
    Error::NonFinite { context: "training".into(), detail: format!("{component} is {value} at iteration {iter}") }
}

fn attribute(component: &'static str, iter: usize) -> impl Fn(Error) -> Error {
    move |e| Error::NonFinite { context: "training".into(), detail: format!("{component} at iteration {iter}: {e}") }
}

fn save_models(dir: &Path, tag: &str, gen: &GeneratorModel, critics: &Critics) -> Result<()> {
    gen.save(&dir.join(format!("generator{tag}.ckpt")))?;
    critics.save(&dir.join(format!("critics{tag}.ckpt")))
}

/// Alternating optimisation: one critic step on `L_Df + L_Ds`, then one
/// generator step on the weighted objective, per iteration. With `out` set
/// the log goes to `out/train_log.jsonl` and checkpoints to `out/`.
pub fn train(
    train_clips: &[AvClip],
    val_clips: &[AvClip],
    syncers: &[SyncerModel],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(s) = syncers.iter().find(|s| !s.frozen()) {
        return Err(Error::Frozen(format!("level-{} syncer must be frozen before generator training", s.level())));
    }
    let (mut gen, mut critics) = init_models(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(13));
    let adam_cfg = |lr| AdamConfig { learning_rate: lr, beta1: cfg.beta1, beta2: cfg.beta2, ..AdamConfig::default() };
    let mut g_adam = Adam::new(adam_cfg(cfg.lr_gen));
    let mut d_adam = Adam::new(adam_cfg(cfg.lr_disc));
    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.total_iterations());
    let mut vals = vec![validate(&gen, syncers, val_clips, cfg, 0)?];
    let (b, t) = (cfg.batch_size, cfg.seq_len);

    for it in 1..=cfg.total_iterations() {
        let f = cfg.lr_factor(it);
        g_adam.set_learning_rate(cfg.lr_gen * f);
        d_adam.set_learning_rate(cfg.lr_disc * f);
        let batch = sample_batch(train_clips, b, t, &mut rng)?;

        let mut g = Graph::new();
        let gp = gen.params.bind(&mut g, true);
        let gt = g.constant(batch.keypoints.clone());
        let x0 = g.slice(gt, 1, 0, 1)?;
        let x0 = g.reshape(x0, &[b, FRAME_DIM])?;
        let audio = g.constant(batch.audio.clone());
        let roll = match gen.rollout_with(&mut g, &gp, x0, audio, t) {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = out {
                    save_models(dir, "_failed", &gen, &critics)?;
                }
                return Err(attribute("generator rollout", it)(e));
            }
        };
        let fake = g.value(roll.frames).clone();

        let (l_d, l_df, l_ds) = {
            let mut dg = Graph::new();
            let cp = critics.params.bind(&mut dg, true);
            let real = dg.constant(batch.keypoints.clone());
            let fk = dg.constant(fake);
            let (rf, ff) = (critics.frame_scores(&mut dg, &cp, real)?, critics.frame_scores(&mut dg, &cp, fk)?);
            let (rf, ff) = (dg.slice(rf, 1, 1, t - 1)?, dg.slice(ff, 1, 1, t - 1)?);
            let (rs, fs) = (critics.sequence_scores(&mut dg, &cp, real)?, critics.sequence_scores(&mut dg, &cp, fk)?);
            let df = d_hinge_loss(&mut dg, rf, ff)?;
            let ds = d_hinge_loss(&mut dg, rs, fs)?;
            let ld = dg.add(df, ds)?;
            let vals = (dg.value(ld).item(), dg.value(df).item(), dg.value(ds).item());
            for (name, v) in [("L_D", vals.0), ("L_Df", vals.1), ("L_Ds", vals.2)] {
                if !v.is_finite() {
                    if let Some(dir) = out {
                        save_models(dir, "_failed", &gen, &critics)?;
                    }
                    return Err(non_finite(name, it, v));
                }
            }
            let grads = critics.params.grads(&cp, &dg.backward(ld)?);
            d_adam.step(&mut critics.params, &grads).map_err(attribute("critic update", it))?;
            vals
        };

        let cp = critics.params.bind(&mut g, false);
        let parts = generator_objective(&mut g, cfg, &critics, &cp, syncers, roll.frames, gt, &batch.audio)?;
        let mut l_av = BTreeMap::new();
        for (&l, &v) in cfg.av_levels.iter().zip(&parts.av_levels) {
            l_av.insert(l, g.value(v).item());
        }
        let rec = LogRecord {
            iter: it,
            l_d,
            l_df,
            l_ds,
            l_gf: g.value(parts.adv_frame).item(),
            l_gs: g.value(parts.adv_seq).item(),
            l_rec: g.value(parts.rec).item(),
            l_av,
            l_g: g.value(parts.total).item(),
            lr_gen: cfg.lr_gen * f,
            lr_disc: cfg.lr_disc * f,
            val: None,
        };
        let named = [("L_Gf", rec.l_gf), ("L_Gs", rec.l_gs), ("L_rec", rec.l_rec), ("L_AV", g.value(parts.av).item())];
        if let Some((name, v)) = named.into_iter().find(|(_, v)| !v.is_finite()) {
            if let Some(dir) = out {
                save_models(dir, "_failed", &gen, &critics)?;
            }
            return Err(non_finite(name, it, v));
        }
        let grads = gen.params.grads(&gp, &g.backward(parts.total)?);
        if let Err(e) = g_adam.step(&mut gen.params, &grads) {
            if let Some(dir) = out {
                save_models(dir, "_failed", &gen, &critics)?;
            }
            return Err(attribute("generator update", it)(e));
        }

        let mut rec = rec;
        if it % cfg.val_every == 0 || it == cfg.total_iterations() {
            let v = validate(&gen, syncers, val_clips, cfg, it)?;
            info!("generator iter {it}: L_G {:.4} L_D {:.4} val confidence {:?}", rec.l_g, rec.l_d, v.confidence);
            rec.val = Some(v.clone());
            vals.push(v);
        }
        if let Some(w) = writer.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        log.push(rec);
        if let (Some(dir), Some(k)) = (out, cfg.checkpoint_every) {
            if k > 0 && it % k == 0 {
                save_models(dir, &format!("_{it}"), &gen, &critics)?;
            }
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    if let Some(dir) = out {
        save_models(dir, "", &gen, &critics)?;
    }
    Ok(TrainOutcome { generator: gen, critics, log, val: vals })
}

/// Paired validation curves of the full multi-scale AV loss and the
/// finest-level-only loss, one pair per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub multi_scale: Vec<Vec<ValRecord>>,
    pub finest_only: Vec<Vec<ValRecord>>,
}

impl AblationReport {
    pub fn from_runs(seeds: &[u64], pairs: &[(TrainOutcome, TrainOutcome)]) -> Self {
        AblationReport {
            seeds: seeds.to_vec(),
            multi_scale: pairs.iter().map(|(m, _)| m.val.clone()).collect(),
            finest_only: pairs.iter().map(|(_, f)| f.val.clone()).collect(),
        }
    }

    /// End-of-training confidence at `level` for every seed: `(multi, finest)`.
    pub fn final_confidence(&self, level: usize) -> Vec<(f64, f64)> {
        let last = |runs: &[ValRecord]| runs.last().and_then(|r| r.confidence.get(&level).copied()).unwrap_or(f64::NAN);
        self.multi_scale.iter().zip(&self.finest_only).map(|(m, f)| (last(m), last(f))).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn run_many(
    configs: Vec<TrainConfig>,
    train_clips: &[AvClip],
    val_clips: &[AvClip],
    syncers: &[SyncerModel],
    threads: usize,
) -> Result<Vec<TrainOutcome>> {
    if threads <= 1 {
        return configs.iter().map(|c| train(train_clips, val_clips, syncers, c, None)).collect();
    }
    let mut out = Vec::with_capacity(configs.len());
    for chunk in configs.chunks(threads) {
        let results: Vec<Result<TrainOutcome>> = std::thread::scope(|s| {
            let hs: Vec<_> = chunk.iter().map(|c| s.spawn(move || train(train_clips, val_clips, syncers, c, None))).collect();
            hs.into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Invalid("training thread panicked".into()))))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Trains `cfg` twice per seed, once with AV levels `{1, 2, 3, 4}` and once
/// with `{1}`, everything else identical. Returns `(multi, finest)` per seed.
pub fn ablation_runs(
    train_clips: &[AvClip],
    val_clips: &[AvClip],
    syncers: &[SyncerModel],
    cfg: &TrainConfig,
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<(TrainOutcome, TrainOutcome)>> {
    let mut configs = Vec::new();
    for &seed in seeds {
        for levels in [vec![1, 2, 3, 4], vec![1]] {
            configs.push(TrainConfig { seed, av_levels: levels, ..cfg.clone() });
        }
    }
    let mut runs = run_many(configs, train_clips, val_clips, syncers, threads)?.into_iter();
    let mut pairs = Vec::with_capacity(seeds.len());
    while let (Some(m), Some(f)) = (runs.next(), runs.next()) {
        pairs.push((m, f));
    }
    Ok(pairs)
}

/// [`ablation_runs`] reduced to its validation curves.
pub fn ablation_ms_vs_finest(
    train_clips: &[AvClip],
    val_clips: &[AvClip],
    syncers: &[SyncerModel],
    cfg: &TrainConfig,
    seeds: &[u64],
    threads: usize,
) -> Result<AblationReport> {
    let pairs = ablation_runs(train_clips, val_clips, syncers, cfg, seeds, threads)?;
    Ok(AblationReport::from_runs(seeds, &pairs))
}

/// The five `(lambda_rec, lambda_adv)` settings of the loss-weight ablation.
pub fn adversarial_grid() -> [(f64, f64); 5] {
    [(1.0, 0.0), (1.0, 0.01), (1.0, 1.0), (0.01, 1.0), (1.0, 0.1)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub final_log: LogRecord,
    pub final_val: ValRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
}

impl GridReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_csv(&self) -> String {
        let levels: Vec<usize> = self.rows.first().map(|r| r.final_val.confidence.keys().copied().collect()).unwrap_or_default();
        let mut s = String::from("lambda_rec,lambda_adv,l_rec,l_gf,l_gs,val_rec");
        for l in &levels {
            s += &format!(",confidence_l{l}");
        }
        s.push('\n');
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{},{}",
                r.lambda_rec, r.lambda_adv, r.final_log.l_rec, r.final_log.l_gf, r.final_log.l_gs, r.final_val.rec
            );
            for l in &levels {
                s += &format!(",{}", r.final_val.confidence.get(l).copied().unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }
}

/// Runs every setting of [`adversarial_grid`] with the rest of `cfg` fixed.
pub fn run_grid(
    train_clips: &[AvClip],
    val_clips: &[AvClip],
    syncers: &[SyncerModel],
    cfg: &TrainConfig,
    threads: usize,
) -> Result<GridReport> {
    let grid = adversarial_grid();
    let configs = grid
        .iter()
        .map(|&(lambda_rec, lambda_adv)| TrainConfig { lambda_rec, lambda_adv, ..cfg.clone() })
        .collect();
    let runs = run_many(configs, train_clips, val_clips, syncers, threads)?;
    let rows = grid
        .iter()
        .zip(runs)
        .map(|(&(lambda_rec, lambda_adv), r)| GridRow {
            lambda_rec,
            lambda_adv,
            final_log: r.log.last().cloned().expect("at least one iteration"),
            final_val: r.val.last().cloned().expect("final validation"),
        })
        .collect();
    Ok(GridReport { rows })
}
