//! `avsync`: synthetic data, feature extraction, training and evaluation of
//! multi-scale audio-visual synchrony models from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use avsync::eval::{evaluate_corpus, plot_export, DEFAULT_RANGE};
use avsync::features::{align, load_corpus, mfcc, write_corpus, AvClip, KeypointSequence, Waveform};
use avsync::generator::GeneratorModel;
use avsync::syncer::{load_pyramid, save_pyramid, split_train_val, train_syncer_pyramid, SyncerTrainConfig};
use avsync::synthgen::SynthSpec;
use avsync::training::{ablation_ms_vs_finest, gradcheck_suite, run_grid, train, TrainConfig};
use avsync::{Error, FRAME_DIM, NUM_LEVELS};

#[derive(Parser, Debug)]
#[command(name = "avsync", version, about = "Multi-scale audio-visual synchrony for keypoint talking heads")]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 1 gives bit-exact reproducibility.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// JSON file with the subcommand's configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    Desk,
    Paper,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with known audio-motion coupling.
    Synth(SynthArgs),
    /// Compute MFCCs of a 16 kHz WAV file, optionally pairing them with keypoints.
    Features(FeaturesArgs),
    /// Train the per-level syncers.
    TrainSyncers(TrainSyncersArgs),
    /// Train the keypoint generator against frozen syncers.
    TrainGen(TrainGenArgs),
    /// Roll a trained generator out on the clips of a corpus.
    Rollout(RolloutArgs),
    /// Multi-scale AV offset and confidence report.
    Eval(EvalArgs),
    /// Multi-scale vs finest-only AV loss, or the loss-weight grid.
    Ablate(AblateArgs),
    /// Finite-difference check of every training loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    g_lip: Option<f64>,
    #[arg(long)]
    g_head: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[arg(long)]
    wav: PathBuf,
    /// JSON array of 60-value keypoint frames at 25 fps.
    #[arg(long)]
    keypoints: Option<PathBuf>,
    #[arg(long, default_value = "speaker")]
    identity: String,
    #[arg(long, default_value = "clip")]
    clip_id: String,
}

#[derive(Args, Debug)]
struct TrainSyncersArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated levels.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<usize>>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainGenArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Directory holding `syncer_l<level>.ckpt` files.
    #[arg(long)]
    syncers: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    /// Levels entering the AV loss.
    #[arg(long, value_delimiter = ',')]
    av_levels: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[arg(long)]
    generator: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Frames per rollout; defaults to each clip's length.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    syncers: PathBuf,
    /// Corpus of generated clips to add as a third report row.
    #[arg(long)]
    generated: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RANGE)]
    range: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AblationKind {
    /// Full AV loss against the finest level only.
    Multiscale,
    /// The five (lambda_rec, lambda_adv) settings.
    Weights,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    syncers: PathBuf,
    #[arg(long, value_enum, default_value_t = AblationKind::Multiscale)]
    kind: AblationKind,
    /// Seeds `seed, seed+1, ...` for the multi-scale ablation.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    instances: usize,
}

/// Exit code 1 failures.
struct Failure(String, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Shape(_) => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Backward(_) => "backward",
            Error::Invalid(_) => "invalid",
            Error::TooShort(_) => "too_short",
            Error::Format(_) => "format",
            Error::Frozen(_) => "frozen",
            Error::Diverged(_) => "diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        };
        Failure(kind.into(), e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure("invalid".into(), msg.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(kind, message)) => {
            eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
            ExitCode::from(1)
        }
    }
}

/// The preset with the `--config` file laid over it, key by key.
fn base_config<T: Serialize + DeserializeOwned>(cli: &Cli, preset: T) -> CliResult<T> {
    let Some(path) = &cli.config else { return Ok(preset) };
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
    let file: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
    let mut value = serde_json::to_value(&preset)?;
    overlay(&mut value, file);
    serde_json::from_value(value).map_err(|e| invalid(format!("config {}: {e}", path.display())))
}

fn overlay(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn write_resolved<T: Serialize>(cli: &Cli, command: &str, config: &T) -> CliResult<()> {
    fs::create_dir_all(&cli.out)?;
    let v = json!({
        "command": command,
        "preset": cli.preset,
        "seed": cli.seed,
        "threads": cli.threads,
        "config": config,
    });
    fs::write(cli.out.join("config.json"), serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

fn load(path: &Path) -> CliResult<Vec<AvClip>> {
    let rep = load_corpus(path).map_err(|e| {
        let Failure(kind, msg) = e.into();
        Failure(kind, format!("{}: {msg}", path.display()))
    })?;
    for (id, why) in &rep.rejected {
        warn!("rejected clip `{id}`: {why}");
    }
    if rep.clips.is_empty() {
        return Err(invalid(format!("corpus {} has no usable clips", path.display())));
    }
    Ok(rep.clips)
}

fn train_config(cli: &Cli) -> CliResult<TrainConfig> {
    let preset = match cli.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Paper => TrainConfig::paper(),
    };
    base_config(cli, preset)
}

fn split(clips: Vec<AvClip>) -> (Vec<AvClip>, Vec<AvClip>) {
    let (ti, vi) = split_train_val(clips.len());
    let pick = |ix: &[usize]| ix.iter().map(|&i| clips[i].clone()).collect::<Vec<_>>();
    (pick(&ti), pick(&vi))
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Features(a) => features(cli, a),
        Command::TrainSyncers(a) => train_syncers(cli, a),
        Command::TrainGen(a) => train_gen(cli, a),
        Command::Rollout(a) => rollout(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Ablate(a) => ablate(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> CliResult<()> {
    let mut spec: SynthSpec = base_config(cli, SynthSpec::default())?;
    spec.seed = cli.seed;
    if let Some(v) = a.clips {
        spec.n_clips = v;
    }
    if let Some(v) = a.frames {
        spec.frames = v;
    }
    if let Some(v) = a.g_lip {
        spec.g_lip = v;
    }
    if let Some(v) = a.g_head {
        spec.g_head = v;
    }
    if let Some(v) = a.noise {
        spec.noise_sigma = v;
    }
    write_resolved(cli, "synth", &spec)?;
    let clips = spec.generate()?;
    write_corpus(&cli.out.join("corpus.json"), &clips)?;
    info!("wrote {} clips of {} frames", clips.len(), spec.frames);
    Ok(())
}

fn read_wav(path: &Path) -> CliResult<Waveform> {
    let mut r = hound::WavReader::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let spec = r.spec();
    let ch = spec.channels.max(1) as usize;
    let raw: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>(),
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            r.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<Result<_, _>>()
        }
    }
    .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mono: Vec<f64> = raw.chunks(ch).map(|c| c.iter().sum::<f64>() / ch as f64).collect();
    Ok(Waveform::new(mono, spec.sample_rate)?)
}

fn features(cli: &Cli, a: &FeaturesArgs) -> CliResult<()> {
    write_resolved(cli, "features", &json!({ "wav": a.wav, "keypoints": a.keypoints }))?;
    let feats = mfcc(&read_wav(&a.wav)?)?;
    let frames: Vec<&[f64]> = (0..feats.len()).map(|i| feats.frame(i)).collect();
    fs::write(cli.out.join("mfcc.json"), serde_json::to_string(&json!({ "frames": frames }))? + "\n")?;
    if let Some(kp) = &a.keypoints {
        let rows: Vec<Vec<f64>> = serde_json::from_str(&fs::read_to_string(kp)?)?;
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != FRAME_DIM) {
            return Err(invalid(format!("keypoint frame {i} has {} values, expected {FRAME_DIM}", r.len())));
        }
        let keypoints = KeypointSequence::new(rows.concat())?;
        let audio = align(&feats, keypoints.len())?;
        let clip = AvClip::new(a.identity.clone(), a.clip_id.clone(), keypoints, audio)?;
        write_corpus(&cli.out.join("corpus.json"), &[clip])?;
    }
    Ok(())
}

fn train_syncers(cli: &Cli, a: &TrainSyncersArgs) -> CliResult<()> {
    let preset = match cli.preset {
        Preset::Desk => SyncerTrainConfig::desk(),
        Preset::Paper => SyncerTrainConfig::paper(),
    };
    let mut cfg: SyncerTrainConfig = base_config(cli, preset)?;
    cfg.seed = cli.seed;
    cfg.threads = cli.threads;
    if let Some(s) = a.max_steps {
        cfg.max_steps = s;
    }
    let levels = a.levels.clone().unwrap_or_else(|| (1..=NUM_LEVELS).collect());
    write_resolved(cli, "train-syncers", &json!({ "levels": levels, "train": cfg }))?;
    let clips = load(&a.corpus)?;
    let trained = train_syncer_pyramid(&clips, &levels, &cfg)?;
    let (models, hist): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    save_pyramid(&cli.out.join("syncers"), &models)?;
    fs::write(cli.out.join("syncer_history.json"), serde_json::to_string_pretty(&hist)? + "\n")?;
    Ok(())
}

fn train_gen(cli: &Cli, a: &TrainGenArgs) -> CliResult<()> {
    let mut cfg = train_config(cli)?;
    cfg.seed = cli.seed;
    if let Some(n) = a.iterations {
        cfg.decay_iterations = n / 14;
        cfg.iterations = n - cfg.decay_iterations;
    }
    if let Some(l) = &a.av_levels {
        cfg.av_levels = l.clone();
    }
    cfg.validate()?;
    write_resolved(cli, "train-gen", &cfg)?;
    let syncers = load_pyramid(&a.syncers)?;
    let (tr, va) = split(load(&a.corpus)?);
    let outcome = train(&tr, &va, &syncers, &cfg, Some(&cli.out))?;
    fs::write(cli.out.join("validation.json"), serde_json::to_string_pretty(&outcome.val)? + "\n")?;
    let points: Vec<(usize, Vec<f64>)> =
        outcome.val.iter().map(|v| (v.iter, v.confidence.values().copied().collect())).collect();
    plot_export(&cli.out, syncers.len(), &points)?;
    Ok(())
}

fn rollout(cli: &Cli, a: &RolloutArgs) -> CliResult<()> {
    write_resolved(cli, "rollout", &json!({ "generator": a.generator, "corpus": a.corpus, "frames": a.frames }))?;
    let gen = GeneratorModel::load(&a.generator)?;
    let clips = load(&a.corpus)?;
    let mut out = Vec::with_capacity(clips.len());
    for c in &clips {
        let frames = a.frames.unwrap_or(c.frames());
        if frames > c.frames() {
            return Err(invalid(format!("clip `{}` has {} frames, {frames} requested", c.clip_id, c.frames())));
        }
        let kp = gen.rollout(c.keypoints.frame(0), &c.audio, frames)?;
        out.push(AvClip::new(c.identity_id.clone(), c.clip_id.clone(), kp, c.audio.slice_video(0, frames)?)?);
    }
    write_corpus(&cli.out.join("rollout.json"), &out)?;
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> CliResult<()> {
    write_resolved(cli, "eval", &json!({ "corpus": a.corpus, "syncers": a.syncers, "generated": a.generated, "range": a.range }))?;
    let syncers = load_pyramid(&a.syncers)?;
    let clips = load(&a.corpus)?;
    let generated = a.generated.as_deref().map(load).transpose()?;
    let report = evaluate_corpus(&syncers, &clips, generated.as_deref(), a.range)?;
    report.write(&cli.out.join("report.json"))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn ablate(cli: &Cli, a: &AblateArgs) -> CliResult<()> {
    let mut cfg = train_config(cli)?;
    cfg.seed = cli.seed;
    if let Some(n) = a.iterations {
        cfg.decay_iterations = n / 14;
        cfg.iterations = n - cfg.decay_iterations;
    }
    cfg.validate()?;
    let syncers = load_pyramid(&a.syncers)?;
    let (tr, va) = split(load(&a.corpus)?);
    match a.kind {
        AblationKind::Multiscale => {
            let seeds: Vec<u64> = (0..a.seeds).map(|i| cli.seed + i).collect();
            write_resolved(cli, "ablate", &json!({ "kind": "multiscale", "seeds": seeds, "train": cfg }))?;
            let rep = ablation_ms_vs_finest(&tr, &va, &syncers, &cfg, &seeds, cli.threads)?;
            fs::write(cli.out.join("ablation.json"), rep.to_json() + "\n")?;
            for (i, s) in rep.seeds.iter().enumerate() {
                for (name, runs) in [("multiscale", &rep.multi_scale[i]), ("finest", &rep.finest_only[i])] {
                    let points: Vec<(usize, Vec<f64>)> =
                        runs.iter().map(|v| (v.iter, v.confidence.values().copied().collect())).collect();
                    plot_export(&cli.out.join(format!("seed{s}_{name}")), syncers.len(), &points)?;
                }
            }
        }
        AblationKind::Weights => {
            write_resolved(cli, "ablate", &json!({ "kind": "weights", "train": cfg }))?;
            let rep = run_grid(&tr, &va, &syncers, &cfg, cli.threads)?;
            fs::write(cli.out.join("grid.json"), rep.to_json() + "\n")?;
            fs::write(cli.out.join("grid.csv"), rep.to_csv())?;
            print!("{}", rep.to_csv());
        }
    }
    Ok(())
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> CliResult<()> {
    write_resolved(cli, "gradcheck", &json!({ "instances": a.instances }))?;
    let checks = gradcheck_suite(cli.seed, a.instances)?;
    fs::write(cli.out.join("gradcheck.json"), serde_json::to_string_pretty(&checks)? + "\n")?;
    for c in &checks {
        println!("{:16} {} max rel error {:.3e} over {} probes", c.name, if c.passes() { "ok  " } else { "FAIL" }, c.max_rel_error, c.checked);
    }
    match checks.iter().find(|c| !c.passes()) {
        Some(c) => Err(Failure("gradcheck".into(), format!("{} exceeds the bound: {}", c.name, c.worst))),
        None => Ok(()),
    }
}
