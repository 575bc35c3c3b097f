//! Trains syncers on a synthetic corpus and prints held-out offsets per level.
//!
//! usage: scale_probe <g_lip> <g_head> <noise_sigma> <max_steps> [levels]

use std::time::Instant;

use avsync::eval::{av_offset, random_baseline, DEFAULT_RANGE};
use avsync::synthgen::{shift_audio, SynthSpec};
use avsync::syncer::{train_syncer_pyramid, SyncerTrainConfig};

fn main() -> avsync::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (g_lip, g_head, sigma, steps) = (arg(1, 1.0), arg(2, 1.0), arg(3, 0.02), arg(4, 1500.0) as usize);
    let levels: Vec<usize> = args
        .get(5)
        .map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![1, 2, 3, 4]);
    let env = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let base = SynthSpec {
        g_lip,
        g_head,
        noise_sigma: sigma,
        head_jitter: env("HJ", 3.0),
        envelope_jitter: env("EJ", 3.0),
        free_motion: env("FREE", 0.5),
        head_band_hz: (env("HLO", 0.2), env("HHI", 1.0)),
        ..SynthSpec::default()
    };
    let train = SynthSpec { n_clips: 40, frames: 240, seed: 1, ..base.clone() }.generate()?;
    let test = SynthSpec { n_clips: env("NTEST", 48.0) as usize, frames: 400, seed: 2, ..base }.generate()?;
    let cfg = SyncerTrainConfig { max_steps: steps, ..SyncerTrainConfig::desk() };
    let t0 = Instant::now();
    let models = train_syncer_pyramid(&train, &levels, &cfg)?;
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    for (m, h) in &models {
        let offs: Vec<f64> = test.iter().map(|c| av_offset(m, c, DEFAULT_RANGE).map(|r| r.abs_offset as f64)).collect::<avsync::Result<_>>()?;
        let mean = offs.iter().sum::<f64>() / offs.len() as f64;
        let edge = offs.iter().filter(|&&o| o == DEFAULT_RANGE as f64).count();
        println!("  at the edge: {edge}/{}", offs.len());
        println!(
            "level {} steps {} best {:.3}@{} ({}) mean|off| {:.2} (baseline {:.2})",
            m.level(), h.steps, h.best_val, h.best_step, h.stop_reason, mean, random_baseline(DEFAULT_RANGE)
        );
        if m.level() == 1 {
            for d in [-5isize, -3, 3, 5] {
                let hits = test
                    .iter()
                    .filter(|c| {
                        let r = av_offset(m, &shift_audio(c, d).unwrap(), DEFAULT_RANGE).unwrap();
                        (r.offset - d).abs() <= 1
                    })
                    .count();
                println!("  shift {d}: {hits}/{}", test.len());
            }
        }
    }
    Ok(())
}
