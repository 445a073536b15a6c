use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use geoind_core::objects::Density;
use geoind_core::MechanismKind;

#[derive(Debug, Parser)]
#[command(name = "geoind", version, about = "Geo-indistinguishable location perturbation toolkit")]
#[command(args_override_self = true, propagate_version = true)]
pub struct Cli {
    /// Flat `key = value` file; each key is a flag name of the subcommand.
    /// Flags on the command line take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Log level for diagnostics on stderr (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn", value_name = "LEVEL")]
    pub log: tracing::Level,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Perturb every trace in a CSV and write true + released columns.
    Perturb(PerturbArgs),
    /// Score released traces: MNE, attack Bayes risk, catchable objects.
    Eval(EvalArgs),
    /// Evaluate a grid of mechanisms and parameters over the same traces.
    Sweep(SweepArgs),
    /// Time single-fix perturbation for each mechanism.
    Bench(BenchArgs),
    /// Generate synthetic traces.
    Synth(SynthArgs),
    /// Run the HTTP backend until interrupted.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct MechanismArgs {
    /// Mechanism: plm, psm or trpsm.
    #[arg(long)]
    pub mechanism: MechanismKind,
    /// Per-release privacy parameter ε (per meter).
    #[arg(long)]
    pub epsilon: f64,
    /// Session budget ε_T per trace (trpsm only; required there).
    #[arg(long)]
    pub epsilon_total: Option<f64>,
    /// Release threshold δ in meters (trpsm only; default 5).
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Grid cells per side for the attack labels.
    #[arg(long, default_value_t = 200)]
    pub grid_cells: u32,
    /// Side of the square study region in meters, centered on the data.
    #[arg(long, default_value_t = 6000.0)]
    pub region_side: f64,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    /// Input CSV (user_id,timestamp,lat,lon).
    #[arg(long)]
    pub input: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub mech: MechanismArgs,
    /// Random seed; output is byte-identical for a given seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Mne,
    Bayes,
    Catchable,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// CSV of true fixes. Must carry released_lat,released_lon unless
    /// --released is given.
    #[arg(long)]
    pub input: PathBuf,
    /// Separate CSV of released fixes aligned with --input by user and timestamp.
    #[arg(long)]
    pub released: Option<PathBuf>,
    /// Metrics to compute, comma separated.
    #[arg(long, value_enum, value_delimiter = ',', action = clap::ArgAction::Set, default_value = "mne")]
    pub metrics: Vec<Metric>,
    /// Attack window lengths L, comma separated.
    #[arg(long, value_delimiter = ',', action = clap::ArgAction::Set, default_value = "1,5,10,25")]
    pub window_len: Vec<usize>,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Object densities for the catchable metric: sparse, dense or both.
    #[arg(long, value_parser = parse_density, value_delimiter = ',', action = clap::ArgAction::Set, default_value = "sparse,dense")]
    pub density: Vec<Density>,
    /// Fraction of attack windows held out for evaluation.
    #[arg(long, default_value_t = 0.25)]
    pub eval_split: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for the attack (1 = sequential, 0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// CSV of true fixes.
    #[arg(long)]
    pub input: PathBuf,
    /// Mechanisms, comma separated.
    #[arg(long, value_delimiter = ',', action = clap::ArgAction::Set, default_value = "plm,psm,trpsm")]
    pub mechanism: Vec<MechanismKind>,
    /// Values of ε, comma separated.
    #[arg(long, value_delimiter = ',', action = clap::ArgAction::Set, default_value = "0.1,0.5,1,2")]
    pub epsilon: Vec<f64>,
    /// Values of δ for trpsm in meters, comma separated.
    #[arg(long, value_delimiter = ',', action = clap::ArgAction::Set, default_value = "5")]
    pub delta: Vec<f64>,
    /// Attack window lengths L, comma separated; `0` skips the attack.
    #[arg(long, value_delimiter = ',', action = clap::ArgAction::Set, default_value = "1,5,10,25")]
    pub window_len: Vec<usize>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, default_value_t = 0.25)]
    pub eval_split: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for sweep cells (1 = sequential, 0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Mechanisms to time, comma separated.
    #[arg(long, value_delimiter = ',', action = clap::ArgAction::Set, default_value = "plm,psm,trpsm")]
    pub mechanism: Vec<MechanismKind>,
    /// Timed iterations per mechanism (at least 1000).
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    /// Untimed iterations before measuring.
    #[arg(long, default_value_t = 1000)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    /// δ for trpsm in meters.
    #[arg(long, default_value_t = 5.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WalkArg {
    Stationary,
    Line,
    RandomWalk,
    Commute,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Movement model.
    #[arg(long, value_enum, default_value = "random-walk")]
    pub kind: WalkArg,
    /// Number of traces (users u0, u1, ...).
    #[arg(long, default_value_t = 1)]
    pub traces: usize,
    /// Fixes per trace.
    #[arg(long, default_value_t = 1000)]
    pub fixes: usize,
    /// Distance moved per fix in meters.
    #[arg(long, default_value_t = 8.0)]
    pub step: f64,
    /// Seconds between fixes.
    #[arg(long, default_value_t = 2.0)]
    pub interval: f64,
    /// Region center as lat,lon.
    #[arg(long, value_parser = parse_geo, default_value = "39.9042,116.4074")]
    pub center: geoind_core::GeoPoint,
    #[arg(long, default_value_t = 6000.0)]
    pub region_side: f64,
    /// Waypoints of the shared commute route.
    #[arg(long, default_value_t = 100)]
    pub route_fixes: usize,
    /// Seed of the shared commute route.
    #[arg(long, default_value_t = 7)]
    pub route_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    /// Object density when a request does not name one.
    #[arg(long, value_parser = parse_density, default_value = "sparse")]
    pub density: Density,
    /// Objects are spawned within this many meters of the released fix.
    #[arg(long, default_value_t = 150.0)]
    pub field_radius: f64,
    /// Visibility radius in meters.
    #[arg(long, default_value_t = 100.0)]
    pub visibility_radius: f64,
    /// Seconds of inactivity before a session is dropped.
    #[arg(long, default_value_t = 600)]
    pub session_ttl: u64,
    /// Master seed for per-session random streams.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Snapshot file: loaded at startup if present, written on shutdown.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
}

fn parse_density(s: &str) -> Result<Density, String> {
    s.parse()
}

fn parse_geo(s: &str) -> Result<geoind_core::GeoPoint, String> {
    let (a, b) = s.split_once(',').ok_or("expected lat,lon")?;
    let lat = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let lon = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    geoind_core::GeoPoint::new(lat, lon).map_err(|e| e.to_string())
}
