use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;
use serde_json::json;

use kpwbc::action_codec::{
    absolute_from_chunk, compute_stats, decode, encode, relative_chunk, NormalizationStats, DEFAULT_HORIZON,
    LAYOUT_VERSION,
};
use kpwbc::controller::{initial_frame, retime, run_episode, sine_demo, static_demo, PlantState, ReplaySource};
use kpwbc::formats::{
    make_demo, read_chunks, read_demo, read_trajectory, validate_demo, write_chunks, write_convergence_csv,
    write_decoded, write_demo, write_trajectory, ChunkHeader, ChunkRecord, DecodedHeader, DecodedLine, DemoRecord,
    DemoSpec, Demonstration, RunConfig, Severity, Trajectory, TrajectoryHeader, CHUNK_FORMAT, DECODED_FORMAT,
    TRAJECTORY_FORMAT,
};
use kpwbc::geometry::{Pose, Quat};
use kpwbc::kinematics::{
    bundled_model, bundled_model_json, forward_kinematics, load_model_json, Keypoint, KinematicModel,
};
use kpwbc::motion_ref::{
    assemble_command, assemble_proprio, command_names, proprio_names, resample, write_observation_csv, MotionChunk,
    OffsetSet, ProprioHistory, ReferenceBuffer, RobotState, CONTROL_RATE, DEFAULT_HISTORY,
};
use kpwbc::skr::{
    height_scale_from_calibration, keypoints_of, retarget, retarget_stream, scale_keypoints, RobotMotionFrame,
    SkrConfig,
};

#[derive(Parser)]
#[command(
    name = "kpwbc",
    version,
    about = "Keypoint demonstrations to whole-body reference tracking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a demonstration file and list every problem with its line number.
    Validate {
        demo: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Retarget a demonstration to robot joint motion.
    Retarget(RetargetArgs),
    /// Encode demonstrations into action chunks or decode them back.
    #[command(subcommand)]
    Chunk(ChunkCommand),
    /// Fit per-dimension normalization stats over one or more demonstrations.
    Stats {
        #[arg(required = true)]
        demos: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a closed-loop episode against the simulated joint plant.
    Simulate(SimulateArgs),
    /// Forward kinematics for one configuration.
    Fk(FkArgs),
    /// Whole-body IK for one set of keypoint targets.
    Ik(IkArgs),
    /// Write a synthetic demonstration by FK playback of seeded sinusoidal joint motion.
    MakeDemo(MakeDemoArgs),
    /// Export command and proprioceptive observations of a trajectory as CSV.
    Observe(ObserveArgs),
    /// Print the default run configuration, a starting point for `--config`.
    Config,
}

#[derive(Args)]
struct ModelArg {
    /// Bundled model name (planar3, biped29) or path to a model JSON file.
    #[arg(long, default_value = "biped29")]
    model: String,
}

#[derive(Args)]
struct RetargetArgs {
    demo: PathBuf,
    #[command(flatten)]
    model: ModelArg,
    /// Run configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Demonstrator standing pelvis height (m); overrides the demo header.
    #[arg(long, conflicts_with = "height_scale")]
    height_calib: Option<f64>,
    /// Vertical pelvis-to-foot scale; skips calibration.
    #[arg(long)]
    height_scale: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// IK convergence CSV (default: next to the output with `.convergence.csv`).
    #[arg(long)]
    convergence: Option<PathBuf>,
    /// Fail when more than this fraction of frames does not converge.
    #[arg(long, default_value_t = 0.1)]
    max_failure_rate: f64,
}

#[derive(Subcommand)]
enum ChunkCommand {
    /// Demonstration to a chunk file, one chunk per valid anchor.
    Encode {
        demo: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        /// Fit stats on this demonstration and write them to `--stats`.
        #[arg(long)]
        fit_stats: bool,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chunk file to absolute keypoint frames.
    Decode {
        chunks: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArg,
    /// `synthetic:static`, `synthetic:sine` or `replay:<demo file>`.
    #[arg(long, default_value = "synthetic:static")]
    source: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Chunk handover rate (Hz).
    #[arg(long)]
    rate_hl: Option<f64>,
    /// Control rate (Hz).
    #[arg(long)]
    rate_ll: Option<f64>,
    /// Gaussian noise on measured joint positions (rad).
    #[arg(long)]
    sensor_noise: Option<f64>,
    /// Joint driven by `synthetic:sine` (default: left_elbow_joint, else joint 0).
    #[arg(long)]
    sine_joint: Option<String>,
    #[arg(long, default_value_t = 0.2)]
    sine_amplitude: f64,
    #[arg(long, default_value_t = 0.5)]
    sine_freq: f64,
    #[arg(long)]
    height_scale: Option<f64>,
    /// Directory receiving episode.csv and summary.json.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct FkArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Comma-separated joint positions (default: all zero).
    #[arg(long, allow_hyphen_values = true)]
    joints: Option<String>,
    /// Root pose `x,y,z` or `x,y,z,qw,qx,qy,qz` (default: standing height).
    #[arg(long, allow_hyphen_values = true)]
    root: Option<String>,
    /// Print only this keypoint.
    #[arg(long)]
    keypoint: Option<Keypoint>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct IkArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Targets JSON: `{"pelvis": [tx,ty,tz,qw,qx,qy,qz], ...}` for all five keypoints.
    #[arg(long, conflicts_with = "from_joints")]
    targets: Option<PathBuf>,
    /// Build targets by FK of these comma-separated joints.
    #[arg(long, allow_hyphen_values = true)]
    from_joints: Option<String>,
    /// Root pose used with `--from-joints`.
    #[arg(long, allow_hyphen_values = true)]
    root: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report only these keypoints (repeatable).
    #[arg(long)]
    keypoint: Vec<Keypoint>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct MakeDemoArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long, default_value_t = 30.0)]
    rate: f64,
    /// Demonstrator standing pelvis height (m).
    #[arg(long, default_value_t = 0.95)]
    calibration_height: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the generating joint trajectory.
    #[arg(long)]
    joints_out: Option<PathBuf>,
}

#[derive(Args)]
struct ObserveArgs {
    trajectory: PathBuf,
    #[command(flatten)]
    model: ModelArg,
    /// Comma-separated frame offsets.
    #[arg(long, allow_hyphen_values = true)]
    offsets: Option<String>,
    #[arg(long, default_value_t = DEFAULT_HISTORY)]
    history: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Validate { demo, json } => cmd_validate(&demo, json),
        Command::Retarget(a) => cmd_retarget(a),
        Command::Chunk(ChunkCommand::Encode {
            demo,
            stats,
            fit_stats,
            horizon,
            out,
        }) => cmd_encode(&demo, &stats, fit_stats, horizon, &out),
        Command::Chunk(ChunkCommand::Decode { chunks, stats, out }) => cmd_decode(&chunks, &stats, &out),
        Command::Stats { demos, horizon, out } => cmd_stats(&demos, horizon, &out),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fk(a) => cmd_fk(a),
        Command::Ik(a) => cmd_ik(a),
        Command::MakeDemo(a) => cmd_make_demo(a),
        Command::Observe(a) => cmd_observe(a),
        Command::Config => {
            println!("{}", RunConfig::default().to_json()?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_model(arg: &ModelArg) -> Result<KinematicModel> {
    if bundled_model_json(&arg.model).is_some() {
        return Ok(bundled_model(&arg.model)?);
    }
    let text = read_text(Path::new(&arg.model))?;
    load_model_json(&text).with_context(|| format!("loading model {}", arg.model))
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_json(&read_text(p)?).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_demo(path: &Path) -> Result<Demonstration> {
    read_demo(&read_text(path)?).with_context(|| format!("reading demonstration {}", path.display()))
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad number `{v}`")))
        .collect()
}

fn parse_joints(model: &KinematicModel, s: Option<&String>) -> Result<Vec<f64>> {
    match s {
        None => Ok(vec![0.0; model.dof()]),
        Some(s) => {
            let q = parse_list(s)?;
            if q.len() != model.dof() {
                bail!("expected {} joint values, got {}", model.dof(), q.len());
            }
            Ok(q)
        }
    }
}

fn parse_root(model: &KinematicModel, s: Option<&String>) -> Result<Pose> {
    let Some(s) = s else {
        return Ok(RobotMotionFrame::standing(model).root_pose());
    };
    let v = parse_list(s)?;
    let t = match v.len() {
        3 | 7 => nalgebra::Vector3::new(v[0], v[1], v[2]),
        n => bail!("root needs 3 or 7 values, got {n}"),
    };
    let q = if v.len() == 7 {
        Quat::try_new(v[3], v[4], v[5], v[6])?
    } else {
        Quat::identity()
    };
    Ok(Pose::new(t, q))
}

fn pose_json(p: &Pose) -> serde_json::Value {
    json!({"translation": [p.translation.x, p.translation.y, p.translation.z], "rotation": p.rotation.to_array()})
}

fn fmt_pose(p: &Pose) -> String {
    let t = p.translation;
    let q = p.rotation;
    format!(
        "t=({:.6}, {:.6}, {:.6}) q=({:.6}, {:.6}, {:.6}, {:.6})",
        t.x, t.y, t.z, q.w, q.x, q.y, q.z
    )
}

fn cmd_validate(path: &Path, as_json: bool) -> Result<ExitCode> {
    let (_, findings) = validate_demo(&read_text(path)?);
    let errors = findings.iter().filter(|f| f.severity == Severity::Error).count();
    if as_json {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({"clean": errors == 0, "findings": findings}))?
        );
    } else {
        for f in &findings {
            println!("{}: {f}", path.display());
        }
        println!("{} error(s), {} warning(s)", errors, findings.len() - errors);
    }
    Ok(if errors == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn resolve_height_scale(
    model: &KinematicModel,
    demo: &Demonstration,
    calib: Option<f64>,
    scale: Option<f64>,
) -> Result<f64> {
    if let Some(s) = scale {
        if !(s > 0.0 && s.is_finite()) {
            bail!("--height-scale must be positive");
        }
        return Ok(s);
    }
    let demo_h = calib.unwrap_or(demo.header.calibration_height);
    Ok(height_scale_from_calibration(model.default_root_height(), demo_h)?)
}

/// IK of the first demo frame from the bent standing posture.
fn first_frame(
    model: &KinematicModel,
    target: &kpwbc::action_codec::KeypointFrame,
    cfg: &SkrConfig,
) -> Result<RobotMotionFrame> {
    let (f, rep) = retarget(model, target, &initial_frame(model, true), cfg)?;
    if !rep.converged {
        warn!(
            "first frame did not converge (position error {:.2e} m)",
            rep.max_position_error()
        );
    }
    Ok(f)
}

fn cmd_retarget(a: RetargetArgs) -> Result<ExitCode> {
    let model = load_model(&a.model)?;
    let demo = load_demo(&a.demo)?;
    let mut cfg = load_config(a.config.as_ref())?.skr;
    cfg.height_scale = resolve_height_scale(&model, &demo, a.height_calib, a.height_scale)?;
    let targets: Vec<_> = demo
        .frames
        .iter()
        .map(|f| scale_keypoints(f, cfg.height_scale))
        .collect();
    let start = first_frame(&model, &targets[0], &cfg)?;
    let (frames, reports) = retarget_stream(&model, &targets, &start, &cfg)?;

    let timestamps: Vec<f64> = demo.frames.iter().map(|f| f.timestamp).collect();
    let traj = Trajectory {
        header: TrajectoryHeader {
            format_version: TRAJECTORY_FORMAT.into(),
            model: model.name().into(),
            rate: demo.header.rate,
            dof: model.dof(),
        },
        timestamps: timestamps.clone(),
        frames,
    };
    let mut w = create(&a.out)?;
    write_trajectory(&mut w, &traj)?;
    w.flush()?;
    let conv = a.convergence.unwrap_or_else(|| a.out.with_extension("convergence.csv"));
    let mut w = create(&conv)?;
    write_convergence_csv(&mut w, &timestamps, &reports)?;
    w.flush()?;

    let failed = reports.iter().filter(|r| !r.converged).count();
    let rate = failed as f64 / reports.len() as f64;
    let worst = reports.iter().map(|r| r.max_position_error()).fold(0.0, f64::max);
    println!(
        "retargeted {} frames (height scale {:.6}): {} not converged ({:.1}%), worst position error {:.2e} m",
        reports.len(),
        cfg.height_scale,
        failed,
        100.0 * rate,
        worst
    );
    if rate > a.max_failure_rate {
        eprintln!(
            "error: non-convergence rate {:.1}% exceeds {:.1}%",
            100.0 * rate,
            100.0 * a.max_failure_rate
        );
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_stats(demos: &[PathBuf], horizon: usize, out: &Path) -> Result<ExitCode> {
    let data = demos
        .iter()
        .map(|p| load_demo(p).map(|d| d.frames))
        .collect::<Result<Vec<_>>>()?;
    let stats = compute_stats(&data, horizon)?;
    let mut w = create(out)?;
    w.write_all(stats.to_json()?.as_bytes())?;
    w.flush()?;
    println!("wrote stats over {} demonstration(s) to {}", demos.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_stats(path: &Path) -> Result<NormalizationStats> {
    NormalizationStats::from_json(&read_text(path)?).with_context(|| format!("reading stats {}", path.display()))
}

fn cmd_encode(demo: &Path, stats_path: &Path, fit: bool, horizon: usize, out: &Path) -> Result<ExitCode> {
    if horizon == 0 {
        bail!("--horizon must be positive");
    }
    let d = load_demo(demo)?;
    let stats = if fit {
        let s = compute_stats(std::slice::from_ref(&d.frames), horizon)?;
        let mut w = create(stats_path)?;
        w.write_all(s.to_json()?.as_bytes())?;
        w.flush()?;
        s
    } else {
        load_stats(stats_path)?
    };
    let n = d.frames.len();
    let mut records = Vec::new();
    if n < horizon + 1 {
        warn!(
            "demonstration has {n} frames, fewer than horizon + 1 = {}; no chunks written",
            horizon + 1
        );
    } else {
        for t in 0..n - horizon {
            let rel = relative_chunk(&d.frames, t, horizon)?;
            records.push(ChunkRecord {
                index: t,
                anchor: d.frames[t].clone(),
                chunk: encode(&rel, &stats),
            });
        }
    }
    let clamped: usize = records.iter().map(|r| r.chunk.clamped).sum();
    let header = ChunkHeader {
        format_version: CHUNK_FORMAT.into(),
        layout_version: LAYOUT_VERSION.into(),
        horizon,
        step_period: 1.0 / d.header.rate,
    };
    let mut w = create(out)?;
    write_chunks(&mut w, &header, &records)?;
    w.flush()?;
    println!(
        "wrote {} chunks ({} clamped scalars) to {}",
        records.len(),
        clamped,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_decode(chunks: &Path, stats_path: &Path, out: &Path) -> Result<ExitCode> {
    let stats = load_stats(stats_path)?;
    let (header, records) =
        read_chunks(&read_text(chunks)?).with_context(|| format!("reading {}", chunks.display()))?;
    let lines = records
        .iter()
        .map(|r| {
            let rel = decode(&r.chunk, &stats)?;
            Ok(DecodedLine {
                index: r.index,
                frames: absolute_from_chunk(&rel, &r.anchor)
                    .iter()
                    .map(DemoRecord::from_frame)
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = create(out)?;
    write_decoded(
        &mut w,
        &DecodedHeader {
            format_version: DECODED_FORMAT.into(),
            horizon: header.horizon,
        },
        &lines,
    )?;
    w.flush()?;
    println!("decoded {} chunks to {}", lines.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(a: SimulateArgs) -> Result<ExitCode> {
    let model = load_model(&a.model)?;
    let cfg = load_config(a.config.as_ref())?;
    let mut episode = cfg.episode.clone();
    if let Some(d) = a.duration {
        episode.duration = d;
    }
    if let Some(s) = a.seed {
        episode.seed = s;
    }
    if let Some(r) = a.rate_hl {
        episode.hl_rate = r;
    }
    if let Some(n) = a.sensor_noise {
        episode.sensor_noise = n;
    }
    let mut ctrl_doc = cfg.controller.clone();
    if let Some(r) = a.rate_ll {
        ctrl_doc.control_rate = r;
    }
    let ctrl = ctrl_doc.resolve(model.dof())?;
    let mut skr = cfg.skr;

    let (demo_frames, initial) = match a.source.split_once(':') {
        Some(("synthetic", kind)) => {
            let initial = initial_frame(&model, true);
            let frames = match kind {
                "static" => static_demo(&model, &initial, episode.hl_rate, episode.duration + 1.0)?,
                "sine" => {
                    let names = model.joint_names();
                    let joint = match &a.sine_joint {
                        Some(n) => names
                            .iter()
                            .position(|j| j == n)
                            .with_context(|| format!("model has no joint `{n}`"))?,
                        None => names.iter().position(|j| *j == "left_elbow_joint").unwrap_or(0),
                    };
                    sine_demo(
                        &model,
                        &initial,
                        joint,
                        a.sine_amplitude,
                        a.sine_freq,
                        episode.hl_rate,
                        episode.duration + 1.0,
                    )?
                }
                other => bail!("unknown synthetic source `{other}` (static, sine)"),
            };
            if let Some(s) = a.height_scale {
                skr.height_scale = s;
            }
            (frames, initial)
        }
        Some(("replay", path)) => {
            let demo = load_demo(Path::new(path))?;
            skr.height_scale = resolve_height_scale(&model, &demo, None, a.height_scale)?;
            let frames = retime(&demo.frames, episode.hl_rate)?;
            let initial = first_frame(&model, &scale_keypoints(&frames[0], skr.height_scale), &skr)?;
            (frames, initial)
        }
        _ => bail!(
            "unknown source `{}` (synthetic:static, synthetic:sine, replay:<file>)",
            a.source
        ),
    };

    let mut source = ReplaySource::new(demo_frames, DEFAULT_HORIZON, None)?;
    let plant = PlantState::at_rest(initial.joints.clone(), &cfg.plant)?;
    let log = run_episode(&mut source, &model, &skr, &ctrl, plant, &initial, &episode)?;
    let summary = log.summary();

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut w = create(&a.out_dir.join("episode.csv"))?;
    log.write_csv(&mut w)?;
    w.flush()?;
    let doc = json!({
        "source": a.source,
        "model": model.name(),
        "seed": episode.seed,
        "hl_rate": episode.hl_rate,
        "control_rate": ctrl.control_rate,
        "summary": summary,
    });
    let mut w = create(&a.out_dir.join("summary.json"))?;
    writeln!(w, "{}", serde_json::to_string_pretty(&doc)?)?;
    w.flush()?;
    println!(
        "{} ticks, max tracking error {:.3e} rad, mean {:.3e} rad, max seam jump {:.3e} rad, IK convergence {:.3}",
        summary.ticks,
        summary.max_tracking_error,
        summary.mean_tracking_error,
        summary.max_seam_jump,
        summary.ik_convergence_rate
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_fk(a: FkArgs) -> Result<ExitCode> {
    let model = load_model(&a.model)?;
    let q = parse_joints(&model, a.joints.as_ref())?;
    let root = parse_root(&model, a.root.as_ref())?;
    let fk = forward_kinematics(&model, &q, &root)?;
    let kps: Vec<Keypoint> = match a.keypoint {
        Some(k) => vec![k],
        None => Keypoint::ALL.to_vec(),
    };
    if a.json {
        let mut out = serde_json::Map::new();
        if a.keypoint.is_none() {
            let links: serde_json::Map<_, _> = model
                .links()
                .iter()
                .zip(&fk.links)
                .map(|(n, p)| (n.clone(), pose_json(p)))
                .collect();
            out.insert("links".into(), links.into());
        }
        let k: serde_json::Map<_, _> = kps
            .iter()
            .map(|k| (k.name().to_string(), pose_json(fk.keypoint(*k))))
            .collect();
        out.insert("keypoints".into(), k.into());
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        if a.keypoint.is_none() {
            for (n, p) in model.links().iter().zip(&fk.links) {
                println!("link {n}: {}", fmt_pose(p));
            }
        }
        for k in kps {
            println!("keypoint {k}: {}", fmt_pose(fk.keypoint(k)));
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetsDoc {
    pelvis: [f64; 7],
    left_tcp: [f64; 7],
    right_tcp: [f64; 7],
    left_foot: [f64; 7],
    right_foot: [f64; 7],
}

fn cmd_ik(a: IkArgs) -> Result<ExitCode> {
    let model = load_model(&a.model)?;
    let cfg = load_config(a.config.as_ref())?.skr;
    let targets = match (&a.targets, &a.from_joints) {
        (Some(p), _) => {
            let d: TargetsDoc =
                serde_json::from_str(&read_text(p)?).with_context(|| format!("reading {}", p.display()))?;
            DemoRecord {
                t: 0.0,
                pelvis: d.pelvis,
                left_tcp: d.left_tcp,
                right_tcp: d.right_tcp,
                left_foot: d.left_foot,
                right_foot: d.right_foot,
                gripper: [0.0, 0.0],
            }
            .to_frame()
        }
        (None, Some(j)) => {
            let q = parse_joints(&model, Some(j))?;
            let root = parse_root(&model, a.root.as_ref())?;
            keypoints_of(&model, &RobotMotionFrame::new(root, q), 0.0)?
        }
        (None, None) => bail!("give --targets or --from-joints"),
    };
    let (sol, rep) = retarget(&model, &targets, &initial_frame(&model, true), &cfg)?;
    let kps: Vec<Keypoint> = if a.keypoint.is_empty() {
        Keypoint::ALL.to_vec()
    } else {
        a.keypoint.clone()
    };
    if a.json {
        let errors: serde_json::Map<_, _> = kps
            .iter()
            .map(|k| {
                (
                    k.name().to_string(),
                    json!({"position": rep.position_error[k.index()], "orientation": rep.orientation_error[k.index()]}),
                )
            })
            .collect();
        let doc = json!({
            "converged": rep.converged,
            "iterations": rep.iterations,
            "attempts": rep.attempts,
            "residual": rep.residual,
            "errors": errors,
            "root": pose_json(&sol.root_pose()),
            "joints": sol.joints,
        });
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        println!(
            "converged: {} ({} iterations, {} attempts, residual {:.3e})",
            rep.converged, rep.iterations, rep.attempts, rep.residual
        );
        for k in &kps {
            println!(
                "  {k}: position error {:.3e} m, orientation error {:.3e} rad",
                rep.position_error[k.index()],
                rep.orientation_error[k.index()]
            );
        }
        println!("root: {}", fmt_pose(&sol.root_pose()));
        for (n, q) in model.joint_names().iter().zip(&sol.joints) {
            println!("  {n} = {q:.6}");
        }
    }
    Ok(if rep.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_make_demo(a: MakeDemoArgs) -> Result<ExitCode> {
    let model = load_model(&a.model)?;
    let spec = DemoSpec {
        rate: a.rate,
        duration: a.duration,
        calibration_height: a.calibration_height,
        seed: a.seed,
    };
    let (demo, joints) = make_demo(&model, &spec)?;
    let mut w = create(&a.out)?;
    write_demo(&mut w, &demo)?;
    w.flush()?;
    if let Some(p) = &a.joints_out {
        let traj = Trajectory {
            header: TrajectoryHeader {
                format_version: TRAJECTORY_FORMAT.into(),
                model: model.name().into(),
                rate: a.rate,
                dof: model.dof(),
            },
            timestamps: demo.frames.iter().map(|f| f.timestamp).collect(),
            frames: joints,
        };
        let mut w = create(p)?;
        write_trajectory(&mut w, &traj)?;
        w.flush()?;
    }
    println!("wrote {} frames to {}", demo.frames.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_observe(a: ObserveArgs) -> Result<ExitCode> {
    let model = load_model(&a.model)?;
    let traj = read_trajectory(&read_text(&a.trajectory)?)?;
    if traj.header.dof != model.dof() {
        bail!(
            "trajectory dof {} does not match model dof {}",
            traj.header.dof,
            model.dof()
        );
    }
    if traj.frames.is_empty() {
        bail!("trajectory has no frames");
    }
    let offsets = match &a.offsets {
        Some(s) => OffsetSet::new(
            s.split(',')
                .map(|v| v.trim().parse::<i64>().with_context(|| format!("bad offset `{v}`")))
                .collect::<Result<_>>()?,
        )?,
        None => OffsetSet::default(),
    };
    let dense = resample(&MotionChunk::new(traj.frames.clone(), traj.header.rate)?, CONTROL_RATE)?;
    let mut buffer = ReferenceBuffer::new(dense[0].clone());
    buffer.extend(dense[1..].iter().cloned())?;
    let mut history = ProprioHistory::new(a.history)?;
    let names = model.joint_names();
    let mut header = command_names(&offsets, &names);
    header.extend(proprio_names(&names, a.history));
    let dt = 1.0 / CONTROL_RATE;
    let mut rows = Vec::with_capacity(dense.len());
    let mut prev: Option<RobotState> = None;
    for (i, f) in dense.iter().enumerate() {
        // perfect tracking: the robot sits on the reference
        let mut s = RobotState::at_rest(f, i as f64 * dt);
        if let Some(p) = &prev {
            s.joint_velocities = f.joints.iter().zip(&p.joints).map(|(a, b)| (a - b) / dt).collect();
            s.angular_velocity = p.root_orientation.inverse().mul(&f.root_orientation).scaled_axis() / dt;
            s.previous_action = p.joints.clone();
        }
        history.push(s.clone())?;
        let mut row = assemble_command(&buffer, &s, &offsets);
        row.extend(assemble_proprio(&history)?);
        rows.push(row);
        prev = Some(s);
        buffer.advance();
    }
    let mut w = create(&a.out)?;
    write_observation_csv(&mut w, &header, &rows)?;
    w.flush()?;
    println!(
        "wrote {} observation rows of width {} to {}",
        rows.len(),
        header.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
