//! `evd`: synthesize instruction-video triplets, train the toy latent
//! diffusion editor, and run edits. Every command takes `--config FILE`
//! (flat key=value, flags override) and is deterministic given `--seed`.

mod config;

use std::convert::Infallible;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use evd_core::augment::imgio::{load_frame_dir, load_png, save_frame_dir};
use evd_core::augment::{make_trajectory, synth_triplet, AffineRanges, EditTriplet, SourceTag, TrajectoryMode};
use evd_core::cappipe::backends::EditorBackend;
use evd_core::cappipe::{build_openworld_triplet, HttpEditor, PipelineClients, PipelineError, StubEditor};
use evd_core::dataset::{generate_indexed, read_shard, scan_shard, write_shard, RecordSummary};
use evd_core::diffusion::{
    edit_video, load_model, model_init_seed, save_model, train_loop, CenteredCodec,
    DenoiserConfig, DenoiserModel, DropoutPolicy, GuidanceConfig, TrainConfig, TrainState, TEXT_DIM,
};
use evd_core::metrics::{frame_consistency, MetricRecord, ToyEmbedder};
use evd_core::numkit::derive_seed;
use evd_core::schedule::NoiseSchedule;

use config::{runtime, usage, CliError, FileConfig};

#[derive(Parser)]
#[command(name = "evd", version, about = "Instruction-conditioned video editing at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize pseudo-video triplets from image editing pairs.
    SynthImages(SynthImagesArgs),
    /// Build open-world triplets via caption/instruction/editor backends.
    PipelineVideos(PipelineVideosArgs),
    /// Train the denoiser on triplet shards.
    Train(TrainArgs),
    /// Edit a video with a trained checkpoint.
    Edit(EditArgs),
    /// Summarize the records of a shard.
    Inspect(InspectArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthImages(a) => cmd_synth_images(a),
        Command::PipelineVideos(a) => cmd_pipeline_videos(a),
        Command::Train(a) => cmd_train(a),
        Command::Edit(a) => cmd_edit(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_file_config(path: Option<&Path>, allowed: &[&str]) -> Result<FileConfig, CliError> {
    let cfg = match path {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::empty(),
    };
    cfg.check_keys(allowed)?;
    Ok(cfg)
}

fn fmt_dims(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn tag_name(tag: SourceTag) -> &'static str {
    match tag {
        SourceTag::ImageSynth => "image-synth",
        SourceTag::Openworld => "openworld",
    }
}

/// Sorted subdirectories of `dir`; the unit of work for data generation.
fn subdirs(dir: &Path, flag: &str) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| usage(format!("cannot read --{flag} {}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn dir_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

// ---------------------------------------------------------------- synth-images

#[derive(Args)]
struct SynthImagesArgs {
    /// Flat key=value config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of pair subdirectories, each holding I.png, E.png, instruction.txt.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Output shard path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Frames per pseudo video [default: 8].
    #[arg(long)]
    frames: Option<usize>,
    /// Master seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Trajectory mode: interpolated or iid [default: interpolated].
    #[arg(long)]
    mode: Option<String>,
    /// key=value file overriding the default augmentation ranges.
    #[arg(long)]
    ranges: Option<PathBuf>,
    /// Worker threads; output bytes are independent of the count [default: 1].
    #[arg(long)]
    workers: Option<usize>,
}

const SYNTH_KEYS: &[&str] = &["pairs", "out", "frames", "seed", "mode", "ranges", "workers"];
const RANGES_KEYS: &[&str] =
    &["max_rotation_deg", "translate_frac", "scale_min", "scale_max", "shear_deg", "resize_short", "crop"];

fn parse_mode(text: &str) -> Result<TrajectoryMode, CliError> {
    match text {
        "interpolated" => Ok(TrajectoryMode::Interpolated),
        "iid" => Ok(TrajectoryMode::Iid),
        other => Err(usage(format!("--mode must be interpolated or iid, got {other:?}"))),
    }
}

fn load_ranges(path: &Path) -> Result<AffineRanges, CliError> {
    let file = FileConfig::load(path)?;
    file.check_keys(RANGES_KEYS)?;
    let d = AffineRanges::default();
    let ranges = AffineRanges {
        max_rotation_deg: file.resolve(None, "max_rotation_deg", d.max_rotation_deg)?,
        translate_frac: file.resolve(None, "translate_frac", d.translate_frac)?,
        scale: (
            file.resolve(None, "scale_min", d.scale.0)?,
            file.resolve(None, "scale_max", d.scale.1)?,
        ),
        shear_deg: file.resolve(None, "shear_deg", d.shear_deg)?,
        resize_short: file.resolve(None, "resize_short", d.resize_short)?,
        crop: file.resolve(None, "crop", d.crop)?,
    };
    ranges.validate().map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(ranges)
}

struct PairEntry {
    name: String,
    original: PathBuf,
    edited: PathBuf,
    instruction: PathBuf,
}

/// Complete (I.png, E.png, instruction.txt) triples, sorted by directory
/// name; incomplete ones are skipped with a warning.
fn scan_pairs(dir: &Path) -> Result<Vec<PairEntry>, CliError> {
    let mut pairs = Vec::new();
    for sub in subdirs(dir, "pairs")? {
        let name = dir_name(&sub);
        let entry = PairEntry {
            original: sub.join("I.png"),
            edited: sub.join("E.png"),
            instruction: sub.join("instruction.txt"),
            name,
        };
        let missing: Vec<&str> = [
            ("I.png", &entry.original),
            ("E.png", &entry.edited),
            ("instruction.txt", &entry.instruction),
        ]
        .iter()
        .filter(|(_, p)| !p.is_file())
        .map(|(n, _)| *n)
        .collect();
        if missing.is_empty() {
            pairs.push(entry);
        } else {
            log::warn!("skipping pair {}: missing {}", entry.name, missing.join(", "));
        }
    }
    Ok(pairs)
}

fn cmd_synth_images(a: SynthImagesArgs) -> Result<(), CliError> {
    let file = load_file_config(a.config.as_deref(), SYNTH_KEYS)?;
    let pairs_dir: PathBuf = file.require(a.pairs, "pairs")?;
    let out: PathBuf = file.require(a.out, "out")?;
    let frames = file.resolve(a.frames, "frames", 8)?;
    let seed = file.resolve(a.seed, "seed", 0)?;
    let mode = parse_mode(&file.resolve(a.mode, "mode", "interpolated".to_string())?)?;
    let workers = file.resolve(a.workers, "workers", 1)?;
    let ranges = match file.resolve_opt(a.ranges, "ranges")? {
        Some(p) => load_ranges(&p)?,
        None => AffineRanges::default(),
    };
    if frames == 0 {
        return Err(usage("--frames must be at least 1"));
    }

    let pairs = scan_pairs(&pairs_dir)?;
    if pairs.is_empty() {
        return Err(usage("no pairs found"));
    }

    let triplets = generate_indexed(pairs.len(), workers, |i| -> Result<EditTriplet, String> {
        let pair = &pairs[i];
        let original = load_png(&pair.original).map_err(|e| e.to_string())?;
        let edited = load_png(&pair.edited).map_err(|e| e.to_string())?;
        let instruction = fs::read_to_string(&pair.instruction)
            .map_err(|e| format!("{}: {e}", pair.instruction.display()))?;
        let pair_seed = derive_seed(seed, i as u64);
        let traj =
            make_trajectory(pair_seed, frames, &ranges, mode, true).map_err(|e| e.to_string())?;
        synth_triplet(&original, &edited, instruction.trim(), &traj, pair_seed)
            .map_err(|e| e.to_string())
    })
    .map_err(|(i, e)| runtime(format!("pair {}: {e}", pairs[i].name)))?;

    write_shard(&out, &triplets).map_err(|e| runtime(e.to_string()))?;
    println!("wrote {} records to {}", triplets.len(), out.display());
    Ok(())
}

// ------------------------------------------------------------- pipeline-videos

#[derive(Args)]
struct PipelineVideosArgs {
    /// Flat key=value config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of video subdirectories, each a numbered PNG frame sequence.
    #[arg(long)]
    videos: Option<PathBuf>,
    /// Output shard path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Use the deterministic offline backends instead of EVD_*_URL services.
    #[arg(long)]
    mock: bool,
    /// Worker threads; output bytes are independent of the count [default: 1].
    #[arg(long)]
    workers: Option<usize>,
}

const PIPELINE_KEYS: &[&str] = &["videos", "out", "seed", "mock", "workers"];

fn cmd_pipeline_videos(a: PipelineVideosArgs) -> Result<(), CliError> {
    let file = load_file_config(a.config.as_deref(), PIPELINE_KEYS)?;
    let videos_dir: PathBuf = file.require(a.videos, "videos")?;
    let out: PathBuf = file.require(a.out, "out")?;
    let seed = file.resolve(a.seed, "seed", 0)?;
    let mock = file.resolve_switch(a.mock, "mock")?;
    let workers = file.resolve(a.workers, "workers", 1)?;

    let pipeline_err = |e: PipelineError| match e {
        PipelineError::Config(_) => usage(e.to_string()),
        other => runtime(other.to_string()),
    };
    let (clients, editor): (PipelineClients, Box<dyn EditorBackend>) = if mock {
        (PipelineClients::mock(), Box::new(StubEditor::default()))
    } else {
        (
            PipelineClients::from_env().map_err(pipeline_err)?,
            Box::new(HttpEditor::from_env().map_err(pipeline_err)?),
        )
    };

    let videos = subdirs(&videos_dir, "videos")?;
    if videos.is_empty() {
        return Err(usage("no videos found"));
    }

    let results = generate_indexed(videos.len(), workers, |i| -> Result<_, Infallible> {
        let dir = &videos[i];
        let item = load_frame_dir(dir)
            .map_err(|e| e.to_string())
            .and_then(|video| {
                build_openworld_triplet(&clients, editor.as_ref(), &video, derive_seed(seed, i as u64))
                    .map_err(|e| e.to_string())
            })
            .map_err(|e| format!("video {}: {e}", dir_name(dir)));
        Ok(item)
    })
    .unwrap_or_else(|(_, e)| match e {});

    let mut kept = Vec::new();
    let mut failed = 0usize;
    for item in results {
        match item {
            Ok(t) => kept.push(t),
            Err(msg) => {
                failed += 1;
                log::error!("{msg}");
            }
        }
    }
    write_shard(&out, &kept).map_err(|e| runtime(e.to_string()))?;
    println!("wrote {} of {} records to {}", kept.len(), videos.len(), out.display());
    if failed > 0 {
        return Err(runtime(format!("{failed} of {} videos failed", videos.len())));
    }
    Ok(())
}

// ------------------------------------------------------------------------ train

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One or two shard paths: source A and optional source B.
    #[arg(long, num_args = 1..=2, value_name = "SHARD")]
    shards: Vec<PathBuf>,
    /// Draw ratio A:B when two shards are given [default: 5:1].
    #[arg(long)]
    ratio: Option<String>,
    /// Total optimization steps to reach.
    #[arg(long)]
    steps: Option<u64>,
    /// Diffusion schedule length [default: 50].
    #[arg(long = "T", value_name = "T")]
    t_diff: Option<usize>,
    /// Records per optimization step [default: 16].
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate [default: 1e-3].
    #[arg(long)]
    lr: Option<f32>,
    /// Master seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint path.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Resume model and optimizer state from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// CSV loss log path [default: checkpoint path with .csv extension].
    #[arg(long = "loss-log")]
    loss_log: Option<PathBuf>,
    /// Denoiser hidden width for fresh models [default: 64].
    #[arg(long)]
    hidden: Option<usize>,
}

const TRAIN_KEYS: &[&str] =
    &["shards", "ratio", "steps", "T", "batch", "lr", "seed", "ckpt", "resume", "loss-log", "hidden"];

fn parse_ratio(text: &str) -> Result<(u32, u32), CliError> {
    let bad = || usage(format!("--ratio must be A:B with positive integers, got {text:?}"));
    let (a, b) = text.split_once(':').ok_or_else(bad)?;
    let a: u32 = a.trim().parse().map_err(|_| bad())?;
    let b: u32 = b.trim().parse().map_err(|_| bad())?;
    if a == 0 || b == 0 {
        return Err(bad());
    }
    Ok((a, b))
}

/// All records must share one frame shape; the denoiser width is derived
/// from it.
fn frame_latent_of(records: &[&EditTriplet]) -> Result<usize, CliError> {
    let first = records
        .first()
        .ok_or_else(|| runtime("no training records in the given shards"))?
        .video_in
        .shape()
        .to_vec();
    for (i, r) in records.iter().enumerate() {
        let s = r.video_in.shape();
        if s[1..] != first[1..] {
            return Err(runtime(format!(
                "record {i} frame shape {} differs from {}",
                fmt_dims(&s[1..]),
                fmt_dims(&first[1..])
            )));
        }
    }
    Ok(first[1..].iter().product())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let file = load_file_config(a.config.as_deref(), TRAIN_KEYS)?;
    let shards: Vec<PathBuf> = if a.shards.is_empty() {
        match file.raw("shards") {
            Some(v) => v.split(',').map(|s| PathBuf::from(s.trim())).collect(),
            None => return Err(usage("missing required --shards (flag or config key)")),
        }
    } else {
        a.shards
    };
    if shards.is_empty() || shards.len() > 2 {
        return Err(usage(format!("--shards takes one or two paths, got {}", shards.len())));
    }
    let ratio = parse_ratio(&file.resolve(a.ratio, "ratio", "5:1".to_string())?)?;
    let steps = file.require(a.steps, "steps")?;
    let t_diff = file.resolve(a.t_diff, "T", 50)?;
    let batch = file.resolve(a.batch, "batch", 16)?;
    let lr = file.resolve(a.lr, "lr", 1e-3)?;
    let seed = file.resolve(a.seed, "seed", 0)?;
    let ckpt: PathBuf = file.require(a.ckpt, "ckpt")?;
    let resume = file.resolve_opt(a.resume, "resume")?;
    let loss_log = file
        .resolve_opt(a.loss_log, "loss-log")?
        .unwrap_or_else(|| ckpt.with_extension("csv"));
    let hidden = file.resolve(a.hidden, "hidden", 64)?;
    if batch == 0 {
        return Err(usage("--batch must be at least 1"));
    }

    let shard_err = |p: &Path| {
        let p = p.display().to_string();
        move |e: evd_core::dataset::ShardError| runtime(format!("shard {p}: {e}"))
    };
    let source_a = read_shard(&shards[0]).map_err(shard_err(&shards[0]))?;
    let source_b = match shards.get(1) {
        Some(p) => Some(read_shard(p).map_err(shard_err(p))?),
        None => None,
    };

    let all: Vec<&EditTriplet> =
        source_a.iter().chain(source_b.iter().flatten()).collect();
    let frame_latent = frame_latent_of(&all)?;

    let (mut model, mut state) = match &resume {
        Some(path) => {
            let (model, state) =
                load_model(path).map_err(|e| runtime(format!("resume {}: {e}", path.display())))?;
            if model.config.frame_latent != frame_latent {
                return Err(runtime(format!(
                    "checkpoint frame latent {} does not match shard frame latent {frame_latent}",
                    model.config.frame_latent
                )));
            }
            let state = state.unwrap_or_else(|| {
                log::warn!("checkpoint has no optimizer state; starting Adam fresh");
                TrainState::fresh(&model)
            });
            (model, state)
        }
        None => {
            let cfg = DenoiserConfig { frame_latent, hidden, time_dim: 16, text_dim: TEXT_DIM };
            let model = DenoiserModel::init(cfg, model_init_seed(seed));
            let state = TrainState::fresh(&model);
            (model, state)
        }
    };
    let start_step = state.step;
    if start_step >= steps {
        log::warn!("checkpoint is already at step {start_step}; nothing to train");
    }

    let cfg = TrainConfig { steps, batch, lr, t_diff, seed, ratio, policy: DropoutPolicy::default() };
    let mut log_file = fs::File::create(&loss_log)
        .map_err(|e| runtime(format!("cannot create {}: {e}", loss_log.display())))?;
    writeln!(log_file, "step,loss").map_err(|e| runtime(e.to_string()))?;
    let mut write_err = None;
    train_loop(
        &mut model,
        &mut state,
        &source_a,
        source_b.as_deref(),
        &CenteredCodec,
        &cfg,
        |step, loss| {
            if write_err.is_none() {
                write_err = writeln!(log_file, "{step},{loss}").err();
            }
        },
    )
    .map_err(|e| runtime(e.to_string()))?;
    if let Some(e) = write_err {
        return Err(runtime(format!("loss log {}: {e}", loss_log.display())));
    }
    log_file.flush().map_err(|e| runtime(e.to_string()))?;

    save_model(&ckpt, &model, Some(&state)).map_err(|e| runtime(e.to_string()))?;
    println!(
        "trained to step {} ({} new), checkpoint {}, loss log {}",
        state.step,
        state.step - start_step,
        ckpt.display(),
        loss_log.display()
    );
    Ok(())
}

// ------------------------------------------------------------------------- edit

#[derive(Args)]
struct EditArgs {
    /// Flat key=value config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained checkpoint path.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Input video: a directory of numbered PNG frames.
    #[arg(long)]
    video: Option<PathBuf>,
    /// Edit instruction text.
    #[arg(long)]
    instruction: Option<String>,
    /// Text guidance scale (no default; pick per edit).
    #[arg(long = "lambda-text")]
    lambda_text: Option<f32>,
    /// Vision guidance scale (no default; pick per edit).
    #[arg(long = "lambda-vision")]
    lambda_vision: Option<f32>,
    /// DDIM sampling steps [default: 25].
    #[arg(long)]
    steps: Option<usize>,
    /// Master seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output frame directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Diffusion schedule length; must match training [default: 50].
    #[arg(long = "T", value_name = "T")]
    t_diff: Option<usize>,
}

const EDIT_KEYS: &[&str] =
    &["ckpt", "video", "instruction", "lambda-text", "lambda-vision", "steps", "seed", "out", "T"];

fn cmd_edit(a: EditArgs) -> Result<(), CliError> {
    let file = load_file_config(a.config.as_deref(), EDIT_KEYS)?;
    let ckpt: PathBuf = file.require(a.ckpt, "ckpt")?;
    let video_dir: PathBuf = file.require(a.video, "video")?;
    let instruction: String = file.require(a.instruction, "instruction")?;
    let lambda_text = file.require(a.lambda_text, "lambda-text")?;
    let lambda_vision = file.require(a.lambda_vision, "lambda-vision")?;
    let steps = file.resolve(a.steps, "steps", 25)?;
    let seed = file.resolve(a.seed, "seed", 0)?;
    let out: PathBuf = file.require(a.out, "out")?;
    let t_diff = file.resolve(a.t_diff, "T", 50)?;
    let guidance = GuidanceConfig::new(lambda_text, lambda_vision).map_err(|e| usage(e.to_string()))?;
    if steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }

    let (model, _) =
        load_model(&ckpt).map_err(|e| runtime(format!("checkpoint {}: {e}", ckpt.display())))?;
    let video = load_frame_dir(&video_dir).map_err(|e| runtime(e.to_string()))?;
    let per_frame: usize = video.shape()[1..].iter().product();
    if per_frame != model.config.frame_latent {
        return Err(runtime(format!(
            "video frame shape {} ({} values) does not match checkpoint frame latent {}",
            fmt_dims(&video.shape()[1..]),
            per_frame,
            model.config.frame_latent
        )));
    }
    let schedule = NoiseSchedule::default_linear(t_diff).map_err(|e| usage(e.to_string()))?;

    let edited = edit_video(&model, &video, &instruction, &CenteredCodec, &schedule, steps, &guidance, seed)
        .map_err(|e| runtime(e.to_string()))?;
    save_frame_dir(&out, &edited).map_err(|e| runtime(e.to_string()))?;
    println!("wrote {} frames to {}", edited.shape()[0], out.display());

    match frame_consistency(&edited, &ToyEmbedder) {
        Ok(value) => {
            let record = MetricRecord::new(dir_name(&video_dir), "frame_consistency", value);
            println!("{}", record.to_json_line());
        }
        Err(e) => log::warn!("frame_consistency unavailable: {e}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------- inspect

#[derive(Args)]
struct InspectArgs {
    /// Flat key=value config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shard to inspect.
    #[arg(long)]
    shard: Option<PathBuf>,
    /// Show a single record instead of the whole listing.
    #[arg(long)]
    index: Option<usize>,
}

const INSPECT_KEYS: &[&str] = &["shard", "index"];

fn record_line(s: &RecordSummary) -> String {
    format!(
        "[{}] in {} out {} tag {} seed {} crc {} {:?}",
        s.index,
        fmt_dims(&s.video_in_shape),
        fmt_dims(&s.video_out_shape),
        tag_name(s.source_tag),
        s.seed,
        if s.crc_ok { "ok" } else { "BAD" },
        s.instruction
    )
}

fn cmd_inspect(a: InspectArgs) -> Result<(), CliError> {
    let file = load_file_config(a.config.as_deref(), INSPECT_KEYS)?;
    let shard: PathBuf = file.require(a.shard, "shard")?;
    let index = file.resolve_opt(a.index, "index")?;

    let summaries =
        scan_shard(&shard).map_err(|e| runtime(format!("shard {}: {e}", shard.display())))?;
    match index {
        Some(i) => {
            let s = summaries.get(i).ok_or_else(|| {
                runtime(format!("--index {i} out of range ({} records)", summaries.len()))
            })?;
            println!("{}", record_line(s));
        }
        None => {
            let bad = summaries.iter().filter(|s| !s.crc_ok).count();
            if bad > 0 {
                println!("{} records in {} ({bad} bad crc)", summaries.len(), shard.display());
            } else {
                println!("{} records in {}", summaries.len(), shard.display());
            }
            for s in &summaries {
                println!("{}", record_line(s));
            }
        }
    }
    Ok(())
}
