//! Command-line front end: generates scenes, simulates drifting surveys,
//! replays observation logs through the correction variants, and emits
//! comparison reports. Every command is deterministic given its flags and
//! seeds; all artifacts are written atomically (temp file + rename).
//!
//! Exit codes: 0 success, 2 usage or input error, 3 internal numerical
//! failure.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use bimdrift_core::bim::{floorplan_json, load_bim, split_walls, BimModel};
use bimdrift_core::estimation::{EstimationConfig, EstimationError, ResidualMode};
use bimdrift_core::geometry::{RigidTransform, Vec3};
use bimdrift_core::matching::MatchConfig;
use bimdrift_core::metrics::{
    compare_variants, metrics_to_csv, report_to_json, MetricsError, MetricsSample,
};
use bimdrift_core::session::{
    observation_log_to_jsonl, read_observation_log, LocalSelectionConfig, Session, SessionConfig,
    SessionError, Variant,
};
use bimdrift_core::simulator::{
    generate_scene, ground_truth_to_json, simulate, survey_waypoints, DriftModel, NoiseModel,
    SceneSpec,
};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "bimdrift",
    version,
    about = "Drift correction for plane-based indoor mapping against BIM floorplans"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a grid floorplan and a survey route through it.
    Generate(GenerateArgs),
    /// Walk the route through a floorplan, emitting a drift-corrupted
    /// observation log plus the ground truth needed to audit it.
    Simulate(SimulateArgs),
    /// Replay an observation log through one correction variant.
    Run(RunArgs),
    /// Replay the same log through several variants and report the pooled
    /// error reductions against the manual baseline.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Room grid as COLUMNSxROWS, e.g. 2x2.
    #[arg(long, default_value = "2x2")]
    rooms: String,
    /// Side length of each square room, meters.
    #[arg(long, default_value_t = 4.0)]
    room_size: f64,
    /// Recorded in the floorplan so artifacts carry their generation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clearance kept from the boundary walls during the survey laps, meters.
    #[arg(long, default_value_t = 0.4)]
    inset: f64,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    output: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Floorplan JSON written by `generate` (or authored by hand).
    #[arg(long)]
    floorplan: PathBuf,
    /// Waypoints JSON written by `generate`.
    #[arg(long)]
    waypoints: PathBuf,
    /// Distance between keyframes along the route, meters.
    #[arg(long, default_value_t = 0.25)]
    spacing: f64,
    /// Random-walk rotation drift per keyframe, radians.
    #[arg(long, default_value_t = 0.0)]
    rot_rate: f64,
    /// Random-walk translation drift per keyframe, meters.
    #[arg(long, default_value_t = 0.0)]
    trans_rate: f64,
    /// Deterministic yaw bias per keyframe, radians.
    #[arg(long, default_value_t = 0.0)]
    bias_rot: f64,
    /// Deterministic camera-frame translation bias per keyframe, "X,Y,Z" meters.
    #[arg(long, default_value = "0,0,0", value_parser = parse_triple)]
    bias_trans: [f64; 3],
    /// Std of the plane-normal perturbation per component.
    #[arg(long, default_value_t = 0.0)]
    sigma_normal: f64,
    /// Std of the plane-offset perturbation, meters.
    #[arg(long, default_value_t = 0.0)]
    sigma_offset: f64,
    /// Std of the in-plane centroid slide, meters.
    #[arg(long, default_value_t = 0.0)]
    sigma_centroid: f64,
    /// Probability that a visible patch is reported.
    #[arg(long, default_value_t = 1.0)]
    detection_prob: f64,
    /// Seed for both the drift walk and the detection noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Zero out all drift, whatever the rate flags say.
    #[arg(long)]
    drift_none: bool,
    /// Zero out all detection noise, whatever the sigma flags say.
    #[arg(long)]
    noise_none: bool,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    output: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, required_unless_present = "dump_config")]
    floorplan: Option<PathBuf>,
    /// Observation log (JSONL) written by `simulate`.
    #[arg(long, required_unless_present = "dump_config")]
    log: Option<PathBuf>,
    /// Correction variant: initial_manual, global or local. Overrides the
    /// config file.
    #[arg(long)]
    variant: Option<String>,
    /// Configuration JSON; missing keys fall back to the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    dump_config: bool,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    output: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, required_unless_present = "dump_config")]
    floorplan: Option<PathBuf>,
    /// Observation log (JSONL) written by `simulate`.
    #[arg(long, required_unless_present = "dump_config")]
    log: Option<PathBuf>,
    /// Comma-separated variant list; must include initial_manual.
    #[arg(long, default_value = "initial_manual,global,local")]
    variants: String,
    /// Configuration JSON; missing keys fall back to the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    dump_config: bool,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    output: PathBuf,
}

/// One failure type per exit code. Usage and input problems exit 2;
/// numerical breakdowns inside the solver exit 3.
enum Failure {
    Usage(String),
    Numerical(String),
}

impl Failure {
    fn usage(msg: impl Display) -> Self {
        Failure::Usage(msg.to_string())
    }

    fn report(self) -> ExitCode {
        let (msg, code) = match self {
            Failure::Usage(m) => (m, 2),
            Failure::Numerical(m) => (m, 3),
        };
        eprintln!("error: {msg}");
        ExitCode::from(code)
    }
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Estimation(EstimationError::NonFiniteCost) => {
                Failure::Numerical(e.to_string())
            }
            other => Failure::Usage(other.to_string()),
        }
    }
}

fn parse_triple(text: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected X,Y,Z, got `{text}`"));
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|e| format!("bad component `{part}`: {e}"))?;
    }
    Ok(out)
}

/// Flat, fully explicit configuration for `run` and `compare`: the union of
/// the matching, estimation and plane-selection knobs plus the variant.
/// `--dump-config` emits every key, so a dumped file reproduces the run
/// exactly with no reliance on compiled-in defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    variant: String,
    // Association gates used for re-estimation.
    tau: f64,
    max_corner_gap: f64,
    max_center_gap: f64,
    min_area_ratio: f64,
    // Relaxed gates used only to score errors.
    eval_tau: f64,
    eval_max_corner_gap: f64,
    eval_max_center_gap: f64,
    eval_min_area_ratio: f64,
    // Transform estimation.
    max_iterations: usize,
    convergence_tol: f64,
    normal_weight: f64,
    svd_truncation: f64,
    residual_mode: String,
    // Local plane selection.
    selection_radius: f64,
    selection_min_planes: usize,
    selection_max_planes: usize,
    selection_radius_growth: f64,
    min_matches: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_session(&SessionConfig::default(), Variant::Local)
    }
}

impl RunConfig {
    fn from_session(cfg: &SessionConfig, variant: Variant) -> Self {
        let mode = match cfg.estimation.residual_mode {
            ResidualMode::PointToPlane => "point_to_plane",
            ResidualMode::PointToPoint => "point_to_point",
        };
        RunConfig {
            variant: variant.to_string(),
            tau: cfg.matching.tau,
            max_corner_gap: cfg.matching.max_corner_gap,
            max_center_gap: cfg.matching.max_center_gap,
            min_area_ratio: cfg.matching.min_area_ratio,
            eval_tau: cfg.eval_matching.tau,
            eval_max_corner_gap: cfg.eval_matching.max_corner_gap,
            eval_max_center_gap: cfg.eval_matching.max_center_gap,
            eval_min_area_ratio: cfg.eval_matching.min_area_ratio,
            max_iterations: cfg.estimation.max_iterations,
            convergence_tol: cfg.estimation.convergence_tol,
            normal_weight: cfg.estimation.normal_weight,
            svd_truncation: cfg.estimation.svd_truncation,
            residual_mode: mode.to_string(),
            selection_radius: cfg.selection.radius,
            selection_min_planes: cfg.selection.min_planes,
            selection_max_planes: cfg.selection.max_planes,
            selection_radius_growth: cfg.selection.radius_growth,
            min_matches: cfg.min_matches,
        }
    }

    fn session_config(&self) -> Result<SessionConfig, Failure> {
        let residual_mode = match self.residual_mode.as_str() {
            "point_to_plane" => ResidualMode::PointToPlane,
            "point_to_point" => ResidualMode::PointToPoint,
            other => {
                return Err(Failure::usage(format!(
                    "unknown residual_mode `{other}` (expected point_to_plane or point_to_point)"
                )))
            }
        };
        Ok(SessionConfig {
            matching: MatchConfig {
                tau: self.tau,
                max_corner_gap: self.max_corner_gap,
                max_center_gap: self.max_center_gap,
                min_area_ratio: self.min_area_ratio,
            },
            eval_matching: MatchConfig {
                tau: self.eval_tau,
                max_corner_gap: self.eval_max_corner_gap,
                max_center_gap: self.eval_max_center_gap,
                min_area_ratio: self.eval_min_area_ratio,
            },
            estimation: EstimationConfig {
                max_iterations: self.max_iterations,
                convergence_tol: self.convergence_tol,
                normal_weight: self.normal_weight,
                svd_truncation: self.svd_truncation,
                residual_mode,
            },
            selection: LocalSelectionConfig {
                radius: self.selection_radius,
                min_planes: self.selection_min_planes,
                max_planes: self.selection_max_planes,
                radius_growth: self.selection_radius_growth,
            },
            min_matches: self.min_matches,
        })
    }

    fn variant(&self) -> Result<Variant, Failure> {
        Variant::from_str(&self.variant)
            .map_err(|_| Failure::usage(format!("unknown variant `{}`", self.variant)))
    }
}

/// Loads the config file when given, overlays the `--variant` flag, and
/// returns the effective configuration.
fn effective_config(
    config_path: Option<&Path>,
    variant_flag: Option<&str>,
) -> Result<RunConfig, Failure> {
    let mut config = match config_path {
        None => RunConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::usage(format!("bad config {}: {e}", path.display())))?
        }
    };
    if let Some(v) = variant_flag {
        config.variant = v.to_string();
    }
    config.variant()?;
    config.session_config()?;
    Ok(config)
}

/// Writes through a sibling temp file and renames into place, so readers
/// never observe a half-written artifact.
fn write_atomic(path: &Path, contents: &str) -> Result<(), Failure> {
    let tmp = path.with_file_name(format!(
        "{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    let fail = |e| Failure::usage(format!("cannot write {}: {e}", path.display()));
    fs::write(&tmp, contents).map_err(fail)?;
    fs::rename(&tmp, path).map_err(fail)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))
}

#[derive(Serialize, Deserialize)]
struct WaypointsFile {
    waypoints: Vec<[f64; 3]>,
}

fn load_floorplan(path: &Path) -> Result<BimModel, Failure> {
    let model = load_bim(path).map_err(Failure::usage)?;
    Ok(split_walls(&model))
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), Failure> {
    let (cols, rows) = args
        .rooms
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
        .ok_or_else(|| Failure::usage(format!("--rooms expects COLUMNSxROWS, got `{}`", args.rooms)))?;
    let spec = SceneSpec {
        rooms_x: cols,
        rooms_y: rows,
        room_size: args.room_size,
        seed: args.seed,
    };
    let model = generate_scene(&spec).map_err(Failure::usage)?;
    let waypoints = WaypointsFile {
        waypoints: survey_waypoints(&spec, args.inset)
            .iter()
            .map(|p| [p.x, p.y, p.z])
            .collect(),
    };
    ensure_dir(&args.output)?;
    write_atomic(&args.output.join("floorplan.json"), &floorplan_json(&model))?;
    let mut waypoint_json = serde_json::to_string_pretty(&waypoints).expect("serializable");
    waypoint_json.push('\n');
    write_atomic(&args.output.join("waypoints.json"), &waypoint_json)?;
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    // Split before simulating so the emitted plane ids and the manual
    // alignment on the first keyframe name the same per-room wall segments
    // the replay commands will match against.
    let model = load_floorplan(&args.floorplan)?;
    let text = fs::read_to_string(&args.waypoints)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", args.waypoints.display())))?;
    let waypoints: WaypointsFile = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("bad waypoints {}: {e}", args.waypoints.display())))?;
    let route: Vec<Vec3> = waypoints
        .waypoints
        .iter()
        .map(|p| Vec3::new(p[0], p[1], p[2]))
        .collect();

    let drift = if args.drift_none {
        DriftModel { seed: args.seed, ..DriftModel::default() }
    } else {
        DriftModel {
            rot_rate: args.rot_rate,
            trans_rate: args.trans_rate,
            bias_rot: args.bias_rot,
            bias_trans: Vec3::new(args.bias_trans[0], args.bias_trans[1], args.bias_trans[2]),
            seed: args.seed,
        }
    };
    let noise = if args.noise_none {
        NoiseModel { seed: args.seed, ..NoiseModel::default() }
    } else {
        NoiseModel {
            sigma_normal: args.sigma_normal,
            sigma_offset: args.sigma_offset,
            sigma_centroid: args.sigma_centroid,
            detection_prob: args.detection_prob,
            seed: args.seed,
        }
    };

    let (keyframes, truth) =
        simulate(&model, &route, &drift, &noise, args.spacing).map_err(Failure::usage)?;
    ensure_dir(&args.output)?;
    write_atomic(&args.output.join("observations.jsonl"), &observation_log_to_jsonl(&keyframes))?;
    write_atomic(&args.output.join("ground_truth.json"), &ground_truth_to_json(&truth))?;
    println!("{} keyframes", keyframes.len());
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    variant: String,
    keyframes: usize,
    transform: RigidTransform,
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let config = effective_config(args.config.as_deref(), args.variant.as_deref())?;
    if args.dump_config {
        println!("{}", serde_json::to_string_pretty(&config).expect("serializable"));
        return Ok(());
    }
    let variant = config.variant()?;
    let session_config = config.session_config()?;
    let model = load_floorplan(args.floorplan.as_ref().expect("required by clap"))?;
    let log_path = args.log.as_ref().expect("required by clap");
    let keyframes = read_observation_log(log_path).map_err(Failure::from)?;

    let mut session = Session::new(model, variant, session_config);
    let mut samples: Vec<MetricsSample> = Vec::with_capacity(keyframes.len());
    for kf in &keyframes {
        samples.push(session.process_keyframe(kf)?);
    }
    let summary = RunSummary {
        variant: variant.to_string(),
        keyframes: keyframes.len(),
        transform: session.current_transform(),
    };
    ensure_dir(&args.output)?;
    write_atomic(&args.output.join("metrics.csv"), &metrics_to_csv(&samples))?;
    let mut summary_json = serde_json::to_string_pretty(&summary).expect("serializable");
    summary_json.push('\n');
    write_atomic(&args.output.join("transform.json"), &summary_json)?;
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<(), Failure> {
    let config = effective_config(args.config.as_deref(), None)?;
    if args.dump_config {
        println!("{}", serde_json::to_string_pretty(&config).expect("serializable"));
        return Ok(());
    }
    let session_config = config.session_config()?;
    let variants = args
        .variants
        .split(',')
        .map(|v| {
            Variant::from_str(v.trim())
                .map_err(|_| Failure::usage(format!("unknown variant `{}`", v.trim())))
        })
        .collect::<Result<Vec<Variant>, Failure>>()?;
    let model = load_floorplan(args.floorplan.as_ref().expect("required by clap"))?;
    let log_path = args.log.as_ref().expect("required by clap");
    let keyframes = read_observation_log(log_path).map_err(Failure::from)?;

    let report =
        compare_variants(&model, &keyframes, &session_config, &variants).map_err(|e| match e {
            MetricsError::Session(inner) => Failure::from(inner),
            other => Failure::usage(other),
        })?;
    let stacked: Vec<MetricsSample> = report
        .series
        .iter()
        .flat_map(|s| s.samples.iter().cloned())
        .collect();
    ensure_dir(&args.output)?;
    write_atomic(&args.output.join("report.json"), &report_to_json(&report))?;
    write_atomic(&args.output.join("metrics.csv"), &metrics_to_csv(&stacked))?;
    for r in &report.reductions {
        println!(
            "{}: angular reduction {:.2}%, distance reduction {:.2}%",
            r.variant, r.angular_reduction_percent, r.distance_reduction_percent
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => failure.report(),
    }
}
