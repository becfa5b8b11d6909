//! Command-line surface. Every command prints its resolved configuration
//! and seed before doing any work.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autodiff::{Checkpoint, NamedTensor};
use crate::data::{
    generate_synthetic, load_sequence, read_scan, read_sensor_config, write_labels, write_sequence,
};
use crate::data::{ClassMapping, SyntheticSceneSpec};
use crate::error::{Error, Result};
use crate::eval::{config_hash, evaluate_with, EvalOptions};
use crate::geometry::{build_range_image, collision_free_fraction, ProjectionMode};
use crate::network::{image_tensor, MemoryUpdateKind, Model};
use crate::training::{TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "rangeseg",
    version,
    about = "Recurrent semantic segmentation of lidar range images"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Project a scan into a range image and report collision statistics.
    Project(ProjectArgs),
    /// Train a model on one or more sequence manifests.
    Train(TrainArgs),
    /// Evaluate a checkpoint on sequence manifests.
    Eval(EvalArgs),
    /// Render a synthetic scene into a sequence directory.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Simple,
    Adaptive,
}

impl From<ModeArg> for ProjectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Simple => ProjectionMode::Simple,
            ModeArg::Adaptive => ProjectionMode::Adaptive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UpdateArg {
    Residual,
    Gru,
    /// Single-frame model without memory.
    None,
}

impl From<UpdateArg> for Option<MemoryUpdateKind> {
    fn from(u: UpdateArg) -> Self {
        match u {
            UpdateArg::Residual => Some(MemoryUpdateKind::Residual),
            UpdateArg::Gru => Some(MemoryUpdateKind::ConvGru),
            UpdateArg::None => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Scan file (packed little-endian f32 x, y, z, remission).
    pub scan: PathBuf,
    /// Sensor configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum, default_value = "simple")]
    pub mode: ModeArg,
    /// Range-image dump (named-tensor container).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Sequence manifest; repeat for several sequences.
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    /// Output directory for `model.ckpt` and `metrics.tsv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub update: Option<UpdateArg>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Initialise weights (e.g. a pretrained backbone) from a checkpoint;
    /// parameters missing from it keep their initial values.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    /// Evaluation options (TOML); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-point predicted labels.
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub empty_memory: bool,
    #[arg(long)]
    pub no_tma: bool,
    #[arg(long)]
    pub majority_vote: bool,
    /// Range-based KNN back-projection with the given k.
    #[arg(long, num_args = 0..=1, default_missing_value = "5")]
    pub knn: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene specification (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class mapping (TOML); the bundled synthetic mapping by default.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn print_resolved(out: &mut dyn Write, seed: u64, text: &str) -> Result<()> {
    writeln!(out, "# seed = {seed}").map_err(out_err)?;
    for line in text.lines() {
        writeln!(out, "# {line}").map_err(out_err)?;
    }
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Project(a) => project(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Synth(a) => synth(a, out),
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn project(a: ProjectArgs, out: &mut dyn Write) -> Result<()> {
    let sensor = read_sensor_config(&a.config)?;
    let mode: ProjectionMode = a.mode.into();
    let resolved =
        format!("{}mode = \"{:?}\"\n", toml_text(&sensor.to_config())?, mode).to_lowercase();
    print_resolved(out, a.seed, &resolved)?;
    let cloud = read_scan(&a.scan)?;
    if cloud.is_empty() {
        return Err(Error::Config(format!(
            "{} contains no points",
            a.scan.display()
        )));
    }
    let ri = build_range_image(&cloud, &sensor, mode)?;
    let fraction = collision_free_fraction(&ri)?;
    writeln!(
        out,
        "n={}\toccupied={}\tcollision_free={}\tfraction={fraction:.4}",
        ri.n_points(),
        ri.occupied_count(),
        ri.collision_free_count()
    )
    .map_err(out_err)?;
    if let Some(path) = a.out {
        let mut ck = Checkpoint::default();
        ck.tensors
            .push(NamedTensor::from_tensor("range_image", &image_tensor(&ri)));
        ck.metadata
            .insert("points".into(), ri.n_points().to_string());
        ck.metadata
            .insert("collision_free_fraction".into(), format!("{fraction:e}"));
        ck.metadata
            .insert("mode".into(), format!("{mode:?}").to_lowercase());
        ck.save(&path)?;
    }
    Ok(())
}

fn toml_text<T: serde::Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::config(e.to_string()))
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = TrainConfig::from_toml(&read_text(&a.config)?)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.projection = m.into();
    }
    if let Some(u) = a.update {
        cfg.model.update = u.into();
    }
    cfg.validate()?;
    print_resolved(out, cfg.seed, &cfg.to_toml())?;
    let data = a
        .manifests
        .iter()
        .map(|m| load_sequence(m))
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = match (&a.resume, &a.init) {
        (Some(p), _) => Trainer::resume(cfg, &Checkpoint::load(p)?)?,
        (None, Some(p)) => {
            let mut model = Model::new(&cfg.model, cfg.seed)?;
            let ck = Checkpoint::load(p)?;
            let mut loaded = 0;
            for p in model.store_mut().iter_mut() {
                if let Some(t) = ck.get(&p.name) {
                    let t = t.to_tensor()?;
                    if t.shape() != p.value.shape() {
                        return Err(Error::shape(format!(
                            "parameter '{}' has a different shape",
                            p.name
                        )));
                    }
                    p.value = t;
                    loaded += 1;
                }
            }
            writeln!(out, "initialised {loaded} parameters from {}", p.display())
                .map_err(out_err)?;
            Trainer::with_model(cfg, model)?
        }
        (None, None) => Trainer::new(cfg)?,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    trainer.set_dump_dir(a.out.clone());
    let log_path = a.out.join("metrics.tsv");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let records = trainer.train(&data, &mut log)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let ck_path = a.out.join("model.ckpt");
    trainer.checkpoint()?.save(&ck_path)?;
    let (first, last) = (records.first(), records.last());
    writeln!(
        out,
        "updates={}\titeration={}\tfirst_loss={:.6}\tlast_loss={:.6}\tcheckpoint={}",
        records.len(),
        trainer.iteration(),
        first.map_or(f64::NAN, |r| r.loss),
        last.map_or(f64::NAN, |r| r.loss),
        ck_path.display()
    )
    .map_err(out_err)?;
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut opts = match &a.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::format(p, e.to_string()))?,
        None => EvalOptions::default(),
    };
    if let Some(m) = a.mode {
        opts.projection = m.into();
    }
    opts.empty_memory |= a.empty_memory;
    opts.no_tma |= a.no_tma;
    opts.majority_vote |= a.majority_vote;
    if a.knn.is_some() {
        opts.knn = a.knn;
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut model = Model::from_checkpoint(&ck)?;
    let resolved = format!(
        "{}[model]\n{}",
        toml_text(&opts)?,
        toml_text(model.config())?
    );
    print_resolved(out, a.seed, &resolved)?;
    let hash = config_hash(&format!("seed = {}\n{resolved}", a.seed));
    let data = a
        .manifests
        .iter()
        .map(|m| load_sequence(m))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &a.labels_out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let report = evaluate_with(&mut model, &data, &opts, |seq, t, labels| {
        match &a.labels_out {
            Some(dir) => write_labels(&dir.join(seq).join(format!("{t:06}.label")), labels),
            None => Ok(()),
        }
    })?;
    let text = report.to_tsv(&hash);
    match &a.out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(p, &text).map_err(|e| Error::io(p, e))?;
            writeln!(out, "mIoU\t{:.6}\treport={}", report.miou(), p.display()).map_err(out_err)?;
        }
        None => out.write_all(text.as_bytes()).map_err(out_err)?,
    }
    Ok(())
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SyntheticSceneSpec::from_toml(&read_text(&a.config)?)?;
    let mapping = match &a.mapping {
        Some(p) => ClassMapping::load(p)?,
        None => ClassMapping::synthetic(),
    };
    print_resolved(out, a.seed, &spec.to_toml())?;
    let frames = generate_synthetic(&spec, a.seed)?;
    let manifest = write_sequence(&a.out, &spec, &frames, &mapping)?;
    let points: usize = frames.iter().map(|f| f.cloud.len()).sum();
    writeln!(
        out,
        "frames={}\tpoints={points}\tmanifest={}",
        frames.len(),
        manifest.display()
    )
    .map_err(out_err)?;
    Ok(())
}
