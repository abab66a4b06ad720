use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use emoavse::data::{build_manifest, SnrConfig, Split, DEFAULT_FRACTIONS, DEFAULT_TEST_SNRS, TRAIN_SNR_RANGE};
use emoavse::dsp::{read_wav, write_wav, WavEncoding, WavReadOptions, Waveform};
use emoavse::emotion::{EmotionBackend, EMOTION_DIM};
use emoavse::losses::LossKind;
use emoavse::metrics::{evaluate, EvalOptions, EvalReport};
use emoavse::model::{enhance, load_checkpoint, prepare_context, DetectorConfig, Model, VideoSource};
use emoavse::selftest::run_selftest;
use emoavse::train::{train, TrainConfig};
use emoavse::util::check_output;
use emoavse::visual::VISUAL_DIM;
use emoavse_tensor::ndarray::Array2;

const VIDEO_FPS: f64 = 30.0;

#[derive(Parser)]
#[command(name = "emoavse", version, about = "Emotion-aware audio-visual speech enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a mixture manifest from clean speech and noise folders.
    Mix(MixArgs),
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Enhance one noisy recording.
    Enhance(EnhanceArgs),
    /// Score a checkpoint on a manifest split.
    Evaluate(EvaluateArgs),
    /// Render an evaluation summary.
    Report(ReportArgs),
    /// Run the dataset-free invariant checks.
    Selftest,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    clean: PathBuf,
    /// One or more noise folders, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    noise: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    test_snrs: Option<Vec<f64>>,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    no_video: bool,
    #[arg(long)]
    no_emotion: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    video: Option<PathBuf>,
    /// Precomputed crops: `<crops>/<clip-id>/<frame:05>.png`.
    #[arg(long, requires = "clip_id")]
    crops: Option<PathBuf>,
    #[arg(long)]
    clip_id: Option<String>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Feed zeros to the visual branch (audio-only inference).
    #[arg(long)]
    no_video: bool,
    /// Feed zeros to the emotion branch.
    #[arg(long)]
    no_emotion: bool,
    /// External face detector, overriding the checkpoint's.
    #[arg(long)]
    detector_bin: Option<PathBuf>,
    /// External emotion embedder, overriding the checkpoint's.
    #[arg(long)]
    emotion_bin: Option<PathBuf>,
    #[arg(long)]
    downmix: bool,
    /// Write 32-bit float samples instead of 16-bit PCM.
    #[arg(long)]
    float: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// PESQ executable; falls back to $EMOAVSE_PESQ_BIN.
    #[arg(long)]
    pesq_bin: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    crops: Option<PathBuf>,
    #[arg(long)]
    emotion_cache: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
    Csv,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation directory or summary.json.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: ReportFormat,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn cmd_mix(a: MixArgs) -> Result<()> {
    check_output(&a.out, a.force)?;
    let fractions = match a.fractions.as_deref() {
        Some(&[t, v, s]) => [t, v, s],
        Some(other) => bail!("--fractions takes three comma-separated values, got {}", other.len()),
        None => DEFAULT_FRACTIONS,
    };
    let snr = SnrConfig { train_range: TRAIN_SNR_RANGE, test_levels: a.test_snrs.unwrap_or_else(|| DEFAULT_TEST_SNRS.to_vec()) };
    let manifest = build_manifest(&a.clean, &a.noise, fractions, &snr, a.seed)?;
    manifest.write(&a.out)?;
    let count = |s| manifest.split(s).count();
    println!(
        "wrote {} ({} train, {} val, {} test; {} silent skipped)",
        a.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        manifest.header.skipped_silent
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(d) = a.out_dir {
        cfg.out_dir = d;
    }
    if let Some(l) = a.loss {
        cfg.model.loss = l;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.max_steps {
        cfg.max_steps = n;
    }
    if a.workers.is_some() {
        cfg.workers = a.workers;
    }
    cfg.model.use_video &= !a.no_video;
    cfg.model.use_emotion &= !a.no_emotion;
    cfg.validate()?;
    let last = cfg.out_dir.join("last.ckpt");
    if a.resume.is_none() {
        if a.force {
            for f in ["last.ckpt", "best.ckpt", "telemetry.csv"] {
                let p = cfg.out_dir.join(f);
                if p.exists() {
                    std::fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
                }
            }
        } else {
            check_output(&last, false)?;
        }
    }
    let out = train(&cfg, a.resume.as_deref())?;
    println!(
        "{} steps; last loss {}; best val {}; checkpoint {}",
        out.losses.len(),
        out.losses.last().map_or("n/a".into(), |l| format!("{l:.6}")),
        out.best_val.map_or("n/a".into(), |l| format!("{l:.6}")),
        out.last_checkpoint.display()
    );
    Ok(())
}

fn zero_context(frames: usize, dim: usize) -> Array2<f32> {
    Array2::zeros((dim, frames.max(1)))
}

fn cmd_enhance(a: EnhanceArgs) -> Result<()> {
    check_output(&a.out, a.force)?;
    let noisy: Waveform<f32> = read_wav(&a.input, WavReadOptions { sample_rate: 16_000, downmix: a.downmix })?;
    let mut model: Model<f32> = load_checkpoint(&a.ckpt)?.into_model();
    if let Some(p) = a.detector_bin {
        model.config.detector = DetectorConfig::Command { program: p, args: Vec::new() };
    }
    if let Some(p) = a.emotion_bin {
        model.config.emotion_backend = EmotionBackend::Command { program: p };
    }
    let source = match (a.video, a.crops, a.clip_id) {
        (Some(v), _, _) => VideoSource::File { path: v, start_s: 0.0 },
        (None, Some(dir), Some(clip_id)) => VideoSource::Crops { dir, clip_id, fps: VIDEO_FPS },
        _ => VideoSource::None,
    };
    // Extract only the context the caller asked for; silenced branches get zeros.
    let full = model.config.clone();
    model.config.use_video &= !a.no_video;
    model.config.use_emotion &= !a.no_emotion;
    let mut ctx = prepare_context(&model, &source, noisy.duration_secs(), None)?;
    model.config = full;
    let frames = (noisy.duration_secs() * VIDEO_FPS).round() as usize;
    if model.config.use_video && ctx.visual.is_none() {
        ctx.visual = Some(zero_context(frames, VISUAL_DIM));
    }
    if model.config.use_emotion && ctx.emotion.is_none() {
        ctx.emotion = Some(zero_context(frames, EMOTION_DIM));
    }
    let out = enhance(&model, &noisy, &ctx)?;
    let encoding = if a.float { WavEncoding::Float32 } else { WavEncoding::Pcm16 };
    write_output(&a.out, |tmp| write_wav(tmp, &out.waveform, encoding).map_err(Into::into))?;
    let fallbacks = ctx.provenance.iter().filter(|p| !matches!(p, emoavse::visual::CropSource::Detected(_))).count();
    println!(
        "wrote {} ({} samples, mode {}, {} of {} frames without a fresh detection)",
        a.out.display(),
        out.waveform.len(),
        model.config.mode_name(),
        fallbacks,
        ctx.provenance.len()
    );
    Ok(())
}

/// Writes through a temporary sibling, then renames into place.
fn write_output(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = tempfile::Builder::new().prefix(".emoavse-").tempfile_in(dir)?;
    write(tmp.path())?;
    tmp.persist(path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    check_output(&a.out.join(emoavse::metrics::eval::SUMMARY_JSON), a.force)?;
    let manifest = emoavse::data::MixtureManifest::read(&a.manifest)?;
    let model: Model<f32> = load_checkpoint(&a.ckpt)?.into_model();
    let opts = EvalOptions {
        split: Some(a.split),
        pesq_bin: a.pesq_bin,
        workers: a.workers,
        crops_dir: a.crops,
        emotion_cache: a.emotion_cache,
        ..Default::default()
    };
    let report = evaluate(&manifest, &model, &opts)?;
    report.write(&a.out)?;
    print!("{}", report.render());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let report = EvalReport::read(&a.input)?;
    let text = match a.format {
        ReportFormat::Text => report.render(),
        ReportFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
        ReportFormat::Csv => report.to_csv(),
    };
    match a.out {
        Some(p) => {
            check_output(&p, a.force)?;
            emoavse::util::write_atomic(&p, text.as_bytes())?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_selftest() -> Result<()> {
    let results = run_selftest(|r| {
        println!("{} {} ({:.1}s): {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.seconds, r.detail);
    });
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} of {} self-test checks failed", results.len());
    }
    Ok(())
}

fn error_json(e: &anyhow::Error) -> serde_json::Value {
    let kind = e.chain().find_map(|c| c.downcast_ref::<emoavse::Error>()).map_or("runtime", |e| e.kind());
    serde_json::json!({
        "error": {
            "kind": kind,
            "message": e.to_string(),
            "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
        }
    })
}

/// Parses `argv` and runs one command: 0 on success, 1 on failure (with a
/// JSON error on stderr), 2 on usage errors.
fn run(argv: impl IntoIterator<Item = OsString>) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Mix(a) => cmd_mix(a),
        Command::Train(a) => cmd_train(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            1
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
