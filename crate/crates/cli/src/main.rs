mod commands;
mod eval;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "dualsdf", version, about = "Prepare, train, evaluate, render and edit two-level SDF shape models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample SDF caches from OBJ meshes or procedural shapes.
    Prepare(PrepareArgs),
    /// Train both decoders and the per-shape posteriors.
    Train(TrainArgs),
    /// Score reconstructions against ground truth and write a JSON report.
    Eval(EvalArgs),
    /// Render a shape to PNG/PPM, optionally extracting a mesh.
    Render(RenderArgs),
    /// Optimise a shape's latent code toward an objective.
    Manipulate(ManipulateArgs),
    /// Interpolate between two shapes, freely or on selected attributes.
    Interpolate(InterpolateArgs),
    /// Run the HTTP/WebSocket editing service.
    Serve(ServeArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct PrepareSource {
    /// Directory of `.obj` meshes.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Generate this many procedural shapes instead.
    #[arg(long)]
    procedural: Option<usize>,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    source: PrepareSource,
    /// Output directory for caches and `manifest.json`.
    #[arg(long)]
    out: PathBuf,
    /// Surface-biased samples per shape.
    #[arg(long, default_value_t = 8192)]
    fine: usize,
    /// Uniform samples per shape.
    #[arg(long, default_value_t = 4096)]
    coarse: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared data directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for `log.csv` and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Training config (JSON or TOML). Defaults to the full-size settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the small desk-scale settings as the base config.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report path.
    #[arg(long)]
    out: PathBuf,
    /// Occupancy grid resolution for IoU.
    #[arg(long, default_value_t = 64)]
    iou_res: usize,
    /// Marching cubes resolution for surface metrics.
    #[arg(long, default_value_t = 64)]
    mc_res: usize,
    /// Surface points for Chamfer and accuracy.
    #[arg(long, default_value_t = 2048)]
    points: usize,
    /// Surface points for EMD (at most 2048).
    #[arg(long, default_value_t = 512)]
    emd_points: usize,
    /// Encoding steps for shapes the checkpoint has not seen.
    #[arg(long, default_value_t = 300)]
    encode_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
#[group(required = true, multiple = false)]
struct LatentSource {
    /// Training shape id.
    #[arg(long)]
    shape: Option<String>,
    /// Draw the code from the prior with this seed.
    #[arg(long)]
    random: Option<u64>,
    /// JSON file holding a latent array.
    #[arg(long)]
    latent: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Level {
    Coarse,
    Fine,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: LatentSource,
    #[arg(long, value_enum, default_value_t = Level::Fine)]
    level: Level,
    #[arg(long, default_value_t = 480)]
    width: usize,
    #[arg(long, default_value_t = 480)]
    height: usize,
    /// Marching steps per ray.
    #[arg(long, default_value_t = 64)]
    steps: usize,
    /// Image path; `.ppm` writes binary PPM, anything else PNG.
    #[arg(long)]
    out: PathBuf,
    /// Also extract the surface as OBJ.
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    mc_res: usize,
}

#[derive(Args)]
struct ManipulateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: LatentSource,
    /// Objective JSON: `{"terms": [{"kind", "indices", "target", "weight"}]}`.
    #[arg(long)]
    objective: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Write the step trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the final latent as a JSON array.
    #[arg(long)]
    out_latent: Option<PathBuf>,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source shape id.
    #[arg(long)]
    from: String,
    /// Target shape id.
    #[arg(long)]
    to: String,
    /// Number of evenly spaced codes, endpoints included.
    #[arg(long, default_value_t = 5)]
    count: usize,
    /// Only pull these per-primitive attribute slots toward the target
    /// (e.g. `1` for heights); the rest of the shape adjusts freely.
    #[arg(long, value_delimiter = ',')]
    slots: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// JSON lines output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// TOML service config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    #[arg(long)]
    max_sessions: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => eval::run(a),
        Command::Render(a) => commands::render(a),
        Command::Manipulate(a) => commands::manipulate(a),
        Command::Interpolate(a) => commands::interpolate(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
