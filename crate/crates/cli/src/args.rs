use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Simulator, planner and evaluation harness for bronchoscopically deployed
/// steerable needles.
#[derive(Debug, Parser)]
#[command(name = "bronchosteer", version)]
pub struct Cli {
    /// Root directory for every file a subcommand writes.
    #[arg(long, global = true, env = "BRONCHOSTEER_OUT", default_value = ".")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scene files.
    #[command(subcommand)]
    Scene(SceneCommand),
    /// Plan candidate three-stage paths to a target.
    Plan(PlanArgs),
    /// Check a plan file against a scene.
    Validate(ValidateArgs),
    /// Run one deployment and store its record.
    Simulate(SimulateArgs),
    /// Run the robot versus manual comparison study.
    Study(StudyArgs),
    /// Re-run a stored record and compare.
    Replay(ReplayArgs),
    /// Start the session service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum SceneCommand {
    /// Generate a synthetic scene.
    Gen {
        #[arg(long)]
        seed: u64,
        /// Output file, relative to the output directory.
        #[arg(short, long, default_value = "scene.json")]
        output: PathBuf,
    },
}

/// Simulation configuration layers: profile, then file, then overrides.
#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// Noise profile: in_vivo, ex_vivo or noiseless.
    #[arg(long, default_value = "in_vivo")]
    pub profile: String,
    /// Full configuration file replacing the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `breath.period=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Target point `x,y,z` in scene millimetres.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    pub target: [f64; 3],
    #[arg(long)]
    pub seed: u64,
    #[arg(short, long, default_value = "plans.json")]
    pub output: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Target point `x,y,z`; drawn from the scene's target regions when
    /// omitted.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    pub target: Option<[f64; 3]>,
    /// Seed for drawing the target; defaults to 1000 + seed.
    #[arg(long)]
    pub target_seed: Option<u64>,
    #[arg(long)]
    pub seed: u64,
    /// Run the manual baseline instead of the robot.
    #[arg(long)]
    pub manual: bool,
    #[arg(short, long, default_value = "record.log")]
    pub output: PathBuf,
    /// Also write trajectory and trajectory-error CSV files next to the
    /// record.
    #[arg(long)]
    pub csv: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub robot: usize,
    #[arg(long, default_value_t = 11)]
    pub manual: usize,
    #[arg(long)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Output directory for the report, relative to the output root.
    #[arg(short, long, default_value = "study")]
    pub output: PathBuf,
    /// Store every deployment record as well.
    #[arg(long)]
    pub records: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub record: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: String,
    /// Simulated seconds per wall-clock second.
    #[arg(long, default_value_t = 1.0)]
    pub rtf: f64,
    /// Seconds a session without a client is kept.
    #[arg(long, default_value_t = 600)]
    pub session_ttl: u64,
    /// Read requests from stdin and write events to stdout, running the
    /// simulated clock without waiting.
    #[arg(long)]
    pub stdio: bool,
}

fn parse_point(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [x, y, z] if parts.iter().all(|v| v.is_finite()) => Ok([x, y, z]),
        _ => Err(format!("expected three finite numbers x,y,z, got {s:?}")),
    }
}
