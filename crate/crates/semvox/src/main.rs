use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use semvox::eval::{evaluate_with, EvalMode, EvalOptions};
use semvox::io;
use semvox::pipeline::{
    run_frames, run_sequence, BackendConfig, FrameInput, PipelineConfig, RunMode,
};
use semvox::sensor::CameraIntrinsics;
use semvox::synth::{
    add_depth_noise, build_scene, export_training_pairs, generate_trajectory, render_depth,
    RoomSpec, TrajectoryPattern,
};

#[derive(Parser)]
#[command(name = "semvox", version, about = "Incremental occupancy mapping with semantic scene completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene, trajectory and depth sequence.
    Synth(SynthArgs),
    /// Reconstruction only: fuse a depth sequence without completion.
    Fuse(FuseArgs),
    /// Full pipeline: fusion, completion, integration and CRF.
    Run(RunArgs),
    /// Score a map snapshot against a ground-truth volume.
    Eval(EvalArgs),
    /// Export (partial sub-map, ground-truth) training pairs.
    ExportDataset(ExportDatasetArgs),
    /// Export the occupied surface of a map snapshot as ascii PLY.
    ExportPly(ExportPlyArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    #[arg(long, value_enum, default_value_t = PatternArg::Orbit)]
    pattern: PatternArg,
    /// Depth noise factor (sigma = k * z); 0 disables noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 160)]
    image_width: u32,
    #[arg(long, default_value_t = 120)]
    image_height: u32,
    /// Focal length in pixels (fx = fy).
    #[arg(long, default_value_t = 80.0)]
    focal: f64,
    /// Room spec JSON; defaults when omitted.
    #[arg(long)]
    room: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternArg {
    Orbit,
    Lawnmower,
}

#[derive(Args)]
struct SequenceArgs {
    /// Directory of frame-numbered 16-bit depth PNGs.
    #[arg(long)]
    depth: PathBuf,
    /// Trajectory text file (timestamp tx ty tz qx qy qz qw).
    #[arg(long)]
    trajectory: PathBuf,
    /// Intrinsics JSON.
    #[arg(long)]
    intrinsics: PathBuf,
    /// Pipeline config JSON overriding defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    seq: SequenceArgs,
    /// Output map snapshot path.
    #[arg(long)]
    out_map: PathBuf,
    /// Optional timing report JSON.
    #[arg(long)]
    timing: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Null,
    Heuristic,
    Oracle,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sync,
    Concurrent,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    seq: SequenceArgs,
    /// Completion backend; overrides the config file.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Ground-truth volume (oracle backend).
    #[arg(long)]
    gt: Option<PathBuf>,
    /// External backend command line (external backend).
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    external_cmd: Option<Vec<String>>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    out_map: PathBuf,
    /// Optional PLY export of the final surface.
    #[arg(long)]
    ply: Option<PathBuf>,
    /// Optional timing report JSON.
    #[arg(long)]
    timing: Option<PathBuf>,
    /// Optional fusion statistics JSON.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalModeArg {
    Surface,
    Full,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalModeArg::Full)]
    mode: EvalModeArg,
    /// Skip GT-occupied voxels the sensor carved Empty; report their count.
    #[arg(long)]
    exclude_carved: bool,
    /// Report JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-class CSV path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ExportDatasetArgs {
    #[command(flatten)]
    seq: SequenceArgs,
    /// Ground-truth volume dump.
    #[arg(long)]
    gt: PathBuf,
    /// Keep every skip-th frame when rebuilding the partial map.
    #[arg(long, default_value_t = 200)]
    skip: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportPlyArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => serde_json::from_slice(
            &std::fs::read(p).with_context(|| format!("reading config {}", p.display()))?,
        )
        .with_context(|| format!("parsing config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    Ok(cfg)
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let room: RoomSpec = match &args.room {
        Some(p) => serde_json::from_slice(
            &std::fs::read(p).with_context(|| format!("reading room spec {}", p.display()))?,
        )?,
        None => RoomSpec::default(),
    };
    let pattern = match args.pattern {
        PatternArg::Orbit => TrajectoryPattern::Orbit,
        PatternArg::Lawnmower => TrajectoryPattern::Lawnmower,
    };
    let intr = CameraIntrinsics {
        fx: args.focal,
        fy: args.focal,
        cx: (args.image_width as f64 - 1.0) / 2.0,
        cy: (args.image_height as f64 - 1.0) / 2.0,
        width: args.image_width,
        height: args.image_height,
    };
    intr.validate()?;

    let (scene, gt) = build_scene(args.seed, &room)?;
    let poses = generate_trajectory(&scene, args.frames, pattern)?;
    let depth_dir = args.out.join("depth");
    std::fs::create_dir_all(&depth_dir)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(args.seed ^ 0x5eed);
    for (i, (_, pose)) in poses.iter().enumerate() {
        let mut img = render_depth(&scene, pose, &intr);
        if args.noise > 0.0 {
            add_depth_noise(&mut img, args.noise, &mut rng);
        }
        io::save_depth_png(&img, &depth_dir.join(format!("frame_{i:05}.png")))?;
    }
    io::save_trajectory(&poses, &args.out.join("trajectory.txt"))?;
    io::save_intrinsics(&intr, &args.out.join("intrinsics.json"))?;
    io::save_gt(&gt, &args.out.join("gt.bin"))?;
    std::fs::write(
        args.out.join("scene.json"),
        serde_json::to_vec_pretty(&scene)?,
    )?;
    println!(
        "scene seed {}: {} primitives, {} GT voxels, {} frames -> {}",
        args.seed,
        scene.primitives.len(),
        gt.occupied_count(),
        poses.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_fuse(args: FuseArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.seq.config)?;
    cfg.backend = BackendConfig::Null;
    let out = run_sequence(&cfg, &args.seq.depth, &args.seq.trajectory, &args.seq.intrinsics)?;
    io::save_map(&out.map, &args.out_map)?;
    if let Some(p) = &args.timing {
        std::fs::write(p, serde_json::to_vec_pretty(&out.timing)?)?;
    }
    print!("{}", out.timing.format_table());
    Ok(())
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.seq.config)?;
    if let Some(mode) = args.mode {
        cfg.mode = match mode {
            ModeArg::Sync => RunMode::Sync,
            ModeArg::Concurrent => RunMode::Concurrent,
        };
    }
    if let Some(backend) = args.backend {
        cfg.backend = match backend {
            BackendArg::Null => BackendConfig::Null,
            BackendArg::Heuristic => BackendConfig::Heuristic,
            BackendArg::Oracle => {
                let Some(gt) = args.gt.clone() else {
                    bail!("--backend oracle requires --gt");
                };
                BackendConfig::Oracle { gt }
            }
            BackendArg::External => {
                let Some(command) = args.external_cmd.clone() else {
                    bail!("--backend external requires --external-cmd");
                };
                BackendConfig::External {
                    command,
                    timeout_ms: 1000,
                }
            }
        };
    }
    let out = run_sequence(&cfg, &args.seq.depth, &args.seq.trajectory, &args.seq.intrinsics)?;
    io::save_map(&out.map, &args.out_map)?;
    if let Some(p) = &args.ply {
        io::export_ply(&out.map, p)?;
    }
    if let Some(p) = &args.timing {
        std::fs::write(p, serde_json::to_vec_pretty(&out.timing)?)?;
    }
    if let Some(p) = &args.stats {
        std::fs::write(p, serde_json::to_vec_pretty(&out.fusion)?)?;
    }
    print!("{}", out.timing.format_table());
    println!(
        "completion calls: {}, skipped: {}, labels fused: {}, occupancy fused: {}, relabeled: {}",
        out.completion_calls,
        out.skipped_submaps,
        out.fusion.labels_fused,
        out.fusion.occupancy_fused,
        out.relabeled
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let map = io::load_map(&args.map)?;
    let gt = io::load_gt(&args.gt)?;
    let mode = match args.mode {
        EvalModeArg::Surface => EvalMode::SurfaceOnly,
        EvalModeArg::Full => EvalMode::Full,
    };
    let opts = EvalOptions {
        exclude_carved: args.exclude_carved,
    };
    let report = evaluate_with(&map, &gt, mode, &opts)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(p) => std::fs::write(p, &json)?,
        None => println!("{json}"),
    }
    if let Some(p) = &args.csv {
        std::fs::write(p, report.csv())?;
    }
    if let Some(miou) = report.mean_iou {
        eprintln!("mean IoU: {miou:.4}");
    }
    Ok(())
}

fn cmd_export_dataset(args: ExportDatasetArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.seq.config)?;
    cfg.backend = BackendConfig::Null;
    let intr = io::load_intrinsics(&args.seq.intrinsics)?;
    let poses = io::load_trajectory(&args.seq.trajectory)?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&args.seq.depth)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    entries.sort();
    if entries.len() != poses.len() {
        bail!(
            "{} depth frames but {} trajectory poses",
            entries.len(),
            poses.len()
        );
    }
    let skip = args.skip.max(1);
    let mut frames = Vec::new();
    for (i, (path, (_, pose))) in entries.iter().zip(poses.into_iter()).enumerate() {
        if i % skip != 0 {
            continue;
        }
        frames.push(FrameInput::new(io::load_depth_png(path)?, pose));
    }
    if frames.is_empty() {
        bail!("skip {} leaves no frames", skip);
    }
    let out = run_frames(
        &cfg,
        &frames,
        &intr,
        Box::new(semvox::completion::NullBackend),
    )?;
    let gt = io::load_gt(&args.gt)?;
    let manifest = export_training_pairs(&out.map, &gt, &args.out)?;
    println!(
        "kept {} pairs, discarded {} ({} frames fused)",
        manifest.kept.len(),
        manifest.discarded,
        frames.len()
    );
    Ok(())
}

fn cmd_export_ply(args: ExportPlyArgs) -> anyhow::Result<()> {
    let map = io::load_map(&args.map)?;
    io::export_ply(&map, &args.out)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ExportDataset(args) => cmd_export_dataset(args),
        Command::ExportPly(args) => cmd_export_ply(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
