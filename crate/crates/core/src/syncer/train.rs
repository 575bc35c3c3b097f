use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::objective_loss;
use super::{mine_batch, ContrastiveBatch, InfoNceForm, MiningMode, Objective, SyncerConfig, SyncerModel};
use crate::diffnum::{Adam, AdamConfig, Graph, ParamSet};
use crate::error::{Error, Result};
use crate::features::AvClip;
use crate::pyramid::AvPyramid;
use crate::NUM_LEVELS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncerTrainConfig {
    pub model: SyncerConfig,
    pub objective: Objective,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
    /// Steps before the divergence check applies.
    pub warmup: usize,
    pub val_batches: usize,
    /// Overrides the per-level negative count.
    pub n_neg: Option<usize>,
    /// Overrides the per-level mining mode.
    pub mode: Option<MiningMode>,
    pub seed: u64,
    /// Levels trained concurrently by [`train_syncer_pyramid`].
    pub threads: usize,
}

impl Default for SyncerTrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SyncerTrainConfig {
    pub fn desk() -> Self {
        Self {
            model: SyncerConfig::default(),
            objective: Objective::default(),
            batch_size: 32,
            learning_rate: 1e-3,
            max_steps: 1500,
            eval_every: 50,
            patience: 5,
            min_delta: 1e-3,
            warmup: 200,
            val_batches: 4,
            n_neg: None,
            mode: None,
            seed: 0,
            threads: 1,
        }
    }

    pub fn paper() -> Self {
        Self {
            model: SyncerConfig::paper(),
            batch_size: 64,
            learning_rate: 1e-4,
            max_steps: 200_000,
            eval_every: 1000,
            warmup: 2000,
            val_batches: 16,
            ..Self::desk()
        }
    }

    pub fn mining(&self, level: usize) -> (MiningMode, usize) {
        let (mode, n) = MiningMode::for_level(level);
        (self.mode.unwrap_or(mode), self.n_neg.unwrap_or(n))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncerHistory {
    pub level: usize,
    /// `(step, smoothed training loss)` at every evaluation.
    pub train: Vec<(usize, f64)>,
    /// `(step, validation loss)`.
    pub val: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_val: f64,
    pub steps: usize,
    pub stop_reason: String,
}

fn level_seed(seed: u64, level: usize, salt: u64) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ ((level as u64) << 32) ^ salt
}

fn batch_loss(m: &SyncerModel, params: &ParamSet, batch: &ContrastiveBatch, obj: Objective) -> Result<f64> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let l = objective_loss(&mut g, m, &p, batch, obj)?;
    Ok(g.value(l).item())
}

/// Trains one level until the validation loss plateaus, then restores the
/// best parameters and freezes the model.
pub fn train_syncer(
    train: &[AvPyramid],
    val: &[AvPyramid],
    level: usize,
    cfg: &SyncerTrainConfig,
) -> Result<(SyncerModel, SyncerHistory)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("syncer training needs non-empty train and validation sets".into()));
    }
    let (mode, n_neg) = cfg.mining(level);
    let mut model = SyncerModel::new(SyncerConfig { level, ..cfg.model.clone() }, level_seed(cfg.seed, level, 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(level_seed(cfg.seed, level, 2));
    let mut val_rng = ChaCha8Rng::seed_from_u64(level_seed(cfg.seed, level, 3));
    let val_set: Vec<ContrastiveBatch> = (0..cfg.val_batches.max(1))
        .map(|_| mine_batch(val, level, n_neg, mode, cfg.batch_size, &mut val_rng))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() });
    let limit = match cfg.objective {
        Objective::InfoNce { form: InfoNceForm::Log } => Some(((n_neg + 1) as f64).ln() + 1.0),
        _ => None,
    };

    let mut hist = SyncerHistory { level, best_val: f64::INFINITY, ..SyncerHistory::default() };
    let mut best = model.params.clone();
    let mut smooth = None::<f64>;
    let mut stale = 0;
    hist.stop_reason = "max_steps".into();
    for step in 1..=cfg.max_steps {
        let batch = mine_batch(train, level, n_neg, mode, cfg.batch_size, &mut rng)?;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let loss = objective_loss(&mut g, &model, &p, &batch, cfg.objective)?;
        let lv = g.value(loss).item();
        let grads = model.params.grads(&p, &g.backward(loss)?);
        model.update(|params| adam.step(params, &grads))?;
        let s = smooth.map_or(lv, |s| 0.9 * s + 0.1 * lv);
        smooth = Some(s);
        hist.steps = step;
        if let Some(limit) = limit {
            if step > cfg.warmup && s > limit {
                return Err(Error::Diverged(format!(
                    "level-{level} syncer: smoothed loss {s:.4} exceeds {limit:.4} at step {step} (last batch {lv:.4})"
                )));
            }
        }
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let v = val_set.iter().map(|b| batch_loss(&model, &model.params, b, cfg.objective)).sum::<Result<f64>>()?
                / val_set.len() as f64;
            hist.train.push((step, s));
            hist.val.push((step, v));
            info!("syncer level {level} step {step}: train {s:.4} val {v:.4}");
            if v < hist.best_val - cfg.min_delta {
                hist.best_val = v;
                hist.best_step = step;
                best = model.params.clone();
                stale = 0;
            } else {
                if v < hist.best_val {
                    hist.best_val = v;
                    hist.best_step = step;
                    best = model.params.clone();
                }
                stale += 1;
                if stale >= cfg.patience {
                    hist.stop_reason = "plateau".into();
                    break;
                }
            }
        }
    }
    model.params = best;
    model.freeze();
    Ok((model, hist))
}

/// Deterministic clip split: every fifth clip goes to validation. Corpora
/// with fewer than two clips validate on the training clip.
pub fn split_train_val(n: usize) -> (Vec<usize>, Vec<usize>) {
    if n < 2 {
        return ((0..n).collect(), (0..n).collect());
    }
    let mut val: Vec<usize> = (0..n).filter(|i| i % 5 == 4).collect();
    if val.is_empty() {
        val.push(n - 1);
    }
    let train = (0..n).filter(|i| !val.contains(i)).collect();
    (train, val)
}

/// Trains the requested levels (normally 1..=4) on `clips`.
pub fn train_syncer_pyramid(
    clips: &[AvClip],
    levels: &[usize],
    cfg: &SyncerTrainConfig,
) -> Result<Vec<(SyncerModel, SyncerHistory)>> {
    if clips.is_empty() {
        return Err(Error::Invalid("syncer training corpus is empty".into()));
    }
    if let Some(&l) = levels.iter().find(|&&l| l == 0 || l > NUM_LEVELS) {
        return Err(Error::Invalid(format!("level {l} outside 1..={NUM_LEVELS}")));
    }
    let depth = levels.iter().copied().max().unwrap_or(1);
    let pyramids: Vec<AvPyramid> = clips.iter().map(|c| AvPyramid::from_clip(c, depth)).collect::<Result<_>>()?;
    let (ti, vi) = split_train_val(pyramids.len());
    let train: Vec<AvPyramid> = ti.iter().map(|&i| pyramids[i].clone()).collect();
    let val: Vec<AvPyramid> = vi.iter().map(|&i| pyramids[i].clone()).collect();
    if cfg.threads <= 1 {
        return levels.iter().map(|&l| train_syncer(&train, &val, l, cfg)).collect();
    }
    let mut out: Vec<Option<Result<(SyncerModel, SyncerHistory)>>> = levels.iter().map(|_| None).collect();
    for chunk in levels.iter().enumerate().collect::<Vec<_>>().chunks(cfg.threads) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(i, &l)| {
                    let (train, val) = (&train, &val);
                    (i, s.spawn(move || train_syncer(train, val, l, cfg)))
                })
                .collect();
            for (i, h) in handles {
                out[i] = Some(h.join().unwrap_or_else(|_| Err(Error::Invalid("syncer thread panicked".into()))));
            }
        });
    }
    out.into_iter().map(|r| r.expect("every level joined")).collect()
}

pub fn checkpoint_path(dir: &Path, level: usize) -> PathBuf {
    dir.join(format!("syncer_l{level}.ckpt"))
}

pub fn save_pyramid(dir: &Path, models: &[SyncerModel]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    models
        .iter()
        .map(|m| {
            let p = checkpoint_path(dir, m.level());
            m.save(&p)?;
            Ok(p)
        })
        .collect()
}

/// Loads every `syncer_l<level>.ckpt` in `dir`, ordered by level.
pub fn load_pyramid(dir: &Path) -> Result<Vec<SyncerModel>> {
    let models: Vec<SyncerModel> = (1..=NUM_LEVELS)
        .map(|l| checkpoint_path(dir, l))
        .filter(|p| p.exists())
        .map(|p| SyncerModel::load(&p))
        .collect::<Result<_>>()?;
    if models.is_empty() {
        return Err(Error::Invalid(format!("no syncer checkpoints in {}", dir.display())));
    }
    Ok(models)
}
