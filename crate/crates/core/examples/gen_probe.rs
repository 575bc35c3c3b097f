//! Trains generators with the multi-scale and the finest-only AV loss and
//! prints end-of-training validation confidences per level.
//!
//! usage: gen_probe <syncer_dir> <iterations> <seeds>

use std::path::Path;
use std::time::Instant;

use avsync::syncer::{load_pyramid, save_pyramid, train_syncer_pyramid, SyncerTrainConfig};
use avsync::synthgen::SynthSpec;
use avsync::training::{ablation_ms_vs_finest, TrainConfig};

fn main() -> avsync::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let dir = Path::new(args.get(1).map_or("/tmp/avsync_syncers", |s| s.as_str())).to_path_buf();
    let iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let seeds: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3);
    let env = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);

    let train = SynthSpec { n_clips: 40, frames: 240, seed: 1, ..SynthSpec::default() }.generate()?;
    let val = SynthSpec { n_clips: 8, frames: 400, seed: 3, ..SynthSpec::default() }.generate()?;
    let t0 = Instant::now();
    let syncers = match load_pyramid(&dir) {
        Ok(s) => s,
        Err(_) => {
            let cfg = SyncerTrainConfig::desk();
            let models: Vec<_> = train_syncer_pyramid(&train, &[1, 2, 3, 4], &cfg)?.into_iter().map(|(m, _)| m).collect();
            save_pyramid(&dir, &models)?;
            models
        }
    };
    println!("syncers ready in {:.1}s", t0.elapsed().as_secs_f64());

    let cfg = TrainConfig {
        iterations: iters,
        decay_iterations: iters / 14,
        lr_gen: env("LRG", 5e-4),
        lr_disc: env("LRD", 2.5e-4),
        batch_size: env("BATCH", 16.0) as usize,
        val_every: env("VAL", 100.0) as usize,
        lambda_av: env("LAV", 8.0),
        ..TrainConfig::desk()
    };
    let t0 = Instant::now();
    let seeds: Vec<u64> = (0..seeds).collect();
    let rep = ablation_ms_vs_finest(&train, &val, &syncers, &cfg, &seeds, env("THREADS", 1.0) as usize)?;
    println!("ablation in {:.1}s", t0.elapsed().as_secs_f64());
    for (i, s) in rep.seeds.iter().enumerate() {
        for (name, runs) in [("multi", &rep.multi_scale[i]), ("finest", &rep.finest_only[i])] {
            for v in runs {
                println!("seed {s} {name:6} iter {:4} rec {:8.4} conf {:?} off {:?}", v.iter, v.rec, v.confidence, v.abs_offset);
            }
        }
    }
    for l in 1..=4 {
        println!("level {l}: {:?}", rep.final_confidence(l));
    }
    Ok(())
}
