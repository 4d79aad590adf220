//! The `shapegene` command line: dataset generation, the training stages,
//! remixing, interpolation, generation, evaluation and the HTTP service.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use shapegene::evalsuite::{self, EvalConfig, NamedCheckpoint};
use shapegene::image::Image;
use shapegene::labelspace::{LabelMap, Part};
use shapegene::pipeline::FaceModel;
use shapegene::synthgen;
use shapegene::trainer::{self, TrainConfig};
use shapegene::{Error, Result};

pub mod service;

use service::ServiceConfig;

#[derive(Debug, Parser)]
#[command(name = "shapegene", version, about = "Part-wise face shape codes: train, remix, generate, evaluate, serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with exact label maps.
    GenData(GenDataArgs),
    /// Train the perceptual feature network and the identity embedder.
    TrainFeatures(TrainArgs),
    /// Train the seven local face parsers.
    TrainParsers(TrainArgs),
    /// Train the overall decoder on frozen encoders.
    TrainOverall(TrainArgs),
    /// Cyclic training of the transformer and the overall decoder.
    TrainCyclic(TrainArgs),
    /// Swap (or blend) one part of a receptor face with a donor's.
    Remix(RemixArgs),
    /// Write a strip of faces morphing one part from receptor to donor.
    Interpolate(InterpolateArgs),
    /// Generate a face from a label map and a conditional face.
    Generate(GenerateArgs),
    /// Score checkpoints on the test split and write a JSON report.
    Eval(EvalArgs),
    /// Serve parsing, remixing and generation over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub identity_pool: u32,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config.
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint of an interrupted run of the same stage.
    #[arg(long, conflicts_with = "continue_run")]
    pub resume: Option<PathBuf>,
    /// Continue from the configured output checkpoint if it exists; a
    /// finished run is left untouched.
    #[arg(long = "continue", id = "continue_run")]
    pub continue_run: bool,
}

#[derive(Debug, Args)]
pub struct RemixArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub receptor: PathBuf,
    #[arg(long)]
    pub donor: PathBuf,
    #[arg(long)]
    pub part: String,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub receptor: PathBuf,
    #[arg(long)]
    pub donor: PathBuf,
    #[arg(long)]
    pub part: String,
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Label map PNG; snapped to the palette before use.
    #[arg(long)]
    pub label: PathBuf,
    /// Face providing the identity.
    #[arg(long)]
    pub cond: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// TOML evaluation config.
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated `name=path` (or bare path) checkpoints; replaces
    /// those listed in the config.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Vec<NamedCheckpoint>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML service config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<std::net::SocketAddr>,
    #[arg(long)]
    pub max_edge: Option<usize>,
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
}

impl ServeArgs {
    pub fn service_config(&self) -> Result<ServiceConfig> {
        let mut cfg = match (&self.config, &self.checkpoint) {
            (Some(path), _) => ServiceConfig::load(path)?,
            (None, Some(ckpt)) => ServiceConfig::new(ckpt),
            (None, None) => return Err(Error::Config("serve needs --config or --checkpoint".into())),
        };
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = c.clone();
        }
        if let Some(m) = &self.manifest {
            cfg.manifest = Some(m.clone());
        }
        if let Some(b) = self.bind {
            cfg.bind = b;
        }
        if let Some(e) = self.max_edge {
            cfg.max_edge = Some(e);
        }
        if let Some(t) = self.timeout_secs {
            cfg.timeout_secs = t;
        }
        if let Some(n) = self.max_in_flight {
            cfg.max_in_flight = n;
        }
        Ok(cfg)
    }
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 1 on a runtime error, 2 on a usage error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => {
            let m = synthgen::generate_dataset(a.n, a.seed, a.identity_pool, a.resolution, &a.out)?;
            println!("wrote {} faces to {}", m.entries.len(), a.out.display());
            Ok(())
        }
        Command::TrainFeatures(a) => train_stage(0, &a),
        Command::TrainParsers(a) => train_stage(1, &a),
        Command::TrainOverall(a) => train_stage(2, &a),
        Command::TrainCyclic(a) => train_stage(3, &a),
        Command::Remix(a) => remix(&a),
        Command::Interpolate(a) => interpolate(&a),
        Command::Generate(a) => generate(&a),
        Command::Eval(a) => eval(&a),
        Command::Serve(a) => service::serve(&a.service_config()?),
    }
}

fn train_stage(stage: u8, a: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig::load(&a.config)?;
    if cfg.stage != stage {
        return Err(Error::Config(format!(
            "{} is a stage {} config; this command trains stage {stage}",
            a.config.display(),
            cfg.stage
        )));
    }
    if a.continue_run {
        trainer::train_to_completion(&cfg)?;
    } else {
        trainer::train(&cfg, a.resume.as_deref())?;
    }
    println!("wrote {}", cfg.checkpoint_path().display());
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn remix(a: &RemixArgs) -> Result<()> {
    let part: Part = a.part.parse()?;
    let model = FaceModel::load(&a.checkpoint)?;
    let receptor = Image::load_png(&a.receptor)?;
    let donor = Image::load_png(&a.donor)?;
    let r = model.remix(&receptor, &donor, part, a.alpha)?;
    create_dir(&a.out)?;
    r.label.image().save_png(&a.out.join("remixed_label.png"))?;
    r.gene.save(&a.out.join("remixed_gene.bin"))?;
    if let (Some(face), Some(comp)) = (&r.face, &r.composited) {
        face.save_png(&a.out.join("remixed_face.png"))?;
        comp.save_png(&a.out.join("composited_face.png"))?;
    }
    println!("wrote remix of {} into {}", part.name(), a.out.display());
    Ok(())
}

fn interpolate(a: &InterpolateArgs) -> Result<()> {
    let part: Part = a.part.parse()?;
    let model = FaceModel::load(&a.checkpoint)?;
    let receptor = Image::load_png(&a.receptor)?;
    let donor = Image::load_png(&a.donor)?;
    let frames = model.interpolate(&receptor, &donor, part, a.steps)?;
    create_dir(&a.out)?;
    for (k, f) in frames.iter().enumerate() {
        f.label.image().save_png(&a.out.join(format!("label_{k:02}.png")))?;
        if let Some(face) = &f.composited {
            face.save_png(&a.out.join(format!("face_{k:02}.png")))?;
        }
    }
    println!("wrote {} frames into {}", frames.len(), a.out.display());
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let model = FaceModel::load(&a.checkpoint)?;
    let label = LabelMap::from_raw(Image::load_png(&a.label)?);
    let cond = Image::load_png(&a.cond)?;
    let face = model.generate(&label, &cond)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    face.save_png(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = EvalConfig::load(&a.config)?;
    if !a.checkpoints.is_empty() {
        cfg.checkpoints = a.checkpoints.clone();
    }
    let report = evalsuite::run_eval_table(&cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    report.save(&a.out)?;
    for row in &report.rows {
        println!(
            "{}: mean IoU {:.4}, leakage {:.4}, identity distance {}",
            row.name,
            row.mean_iou,
            row.leakage,
            row.identity_distance.map_or("n/a".into(), |d| format!("{d:.4}"))
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
