//! `di2w` command-line entry point.
//!
//! Every command writes its artifacts into a run directory
//! (`<report-dir>/<run-name>`) together with `run_manifest.json`, which records
//! the effective configuration and a SHA-256 of every input and output file.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::eval::{evaluate, read_tasks, write_tasks, RetrievalReport, TaskKind};
use crate::pcm::{Activation, AlignTarget, GradCheckConfig, GradCheckProblem, LossTerms, ObjectiveConfig};
use crate::ptc::{CropConfig, MixtureConfig, Provenance, PtcConfig, SimMode, TripletManifestEntry};
use crate::store::{read_store, write_jsonl, write_manifest, write_store, ManifestEntry, Store, StoreRecord};
use crate::synth::{generate_world, make_eval_tasks, SynthWorld, WorldConfig};
use crate::trainer::{
    train_with, training_records, triplets_for_iteration, AdamWConfig, BatchSchedule, Checkpoint, TrainConfig,
    TrainEvent,
};

pub const REPORT_DIR_ENV: &str = "DI2W_REPORT_DIR";
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const STORE_FILE: &str = "store.di2w";
const MANIFEST_FILE: &str = "store.manifest.jsonl";
const TASKS_FILE: &str = "tasks.jsonl";
const GALLERY_FILE: &str = "gallery.jsonl";
const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(
    name = "di2w",
    version,
    about = "Denoise-I2W: pseudo-triplet construction, mapping training and composed retrieval"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct GlobalArgs {
    /// Root seed; every random stream is derived from it
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory that holds run directories
    #[arg(long, global = true, env = REPORT_DIR_ENV, default_value = "runs")]
    report_dir: PathBuf,
    /// Run directory name under the report directory [default: the command name]
    #[arg(long, global = true)]
    run_name: Option<String>,
    /// Log verbosity (-v info, -vv debug); RUST_LOG overrides
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    #[serde(skip)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world: store, encoders, metadata and evaluation tasks
    SynthGen(SynthGenArgs),
    /// Build a store from externally computed embeddings
    Ingest(IngestArgs),
    /// Export pseudo triplets and filter statistics for a number of batches
    BuildTriplets(BuildTripletsArgs),
    /// Train the mapping network
    Train(TrainCmdArgs),
    /// Evaluate a checkpoint with Recall@K
    Eval(EvalArgs),
    /// Check analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Train and evaluate across crop-size ranges
    CropSweep(CropSweepArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthGen(_) => "synth-gen",
            Command::Ingest(_) => "ingest",
            Command::BuildTriplets(_) => "build-triplets",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
            Command::CropSweep(_) => "crop-sweep",
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct WorldArgs {
    /// Embedding dimension
    #[arg(long, default_value_t = 32)]
    d: usize,
    /// Number of concepts
    #[arg(long, default_value_t = 64)]
    concepts: usize,
    /// Number of styles
    #[arg(long, default_value_t = 4)]
    styles: usize,
    /// Number of images
    #[arg(long, default_value_t = 2000)]
    images: usize,
    /// Image side in pixels [default: 224, crop-sweep 512]
    #[arg(long)]
    image_size: Option<u32>,
    /// Fewest concepts per image
    #[arg(long, default_value_t = 2)]
    min_concepts: usize,
    /// Most concepts per image
    #[arg(long, default_value_t = 4)]
    max_concepts: usize,
    /// Fraction of an image's concepts named by its caption
    #[arg(long, default_value_t = 0.6)]
    coverage: f64,
    /// Image-embedding noise sigma
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Style vector norm relative to concepts
    #[arg(long, default_value_t = 0.6)]
    style_scale: f64,
    /// Styles each scene is rendered in
    #[arg(long, default_value_t = 2)]
    styles_per_scene: usize,
    /// Probability of an edited companion scene
    #[arg(long, default_value_t = 0.25)]
    edit_fraction: f64,
    /// Crop candidates stored per image
    #[arg(long, default_value_t = 8)]
    crops_per_image: usize,
}

impl WorldArgs {
    fn config(&self, seed: u64, crop: CropConfig, default_size: u32) -> WorldConfig {
        WorldConfig {
            d: self.d,
            concepts: self.concepts,
            styles: self.styles,
            images: self.images,
            image_size: self.image_size.unwrap_or(default_size),
            concepts_per_image: (self.min_concepts, self.max_concepts),
            coverage: self.coverage,
            noise: self.noise,
            style_scale: self.style_scale,
            styles_per_scene: self.styles_per_scene,
            edit_fraction: self.edit_fraction,
            crops_per_image: self.crops_per_image,
            crop,
            seed,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct CropArgs {
    /// Smallest crop side in pixels
    #[arg(long, default_value_t = 32)]
    crop_min: u32,
    /// Largest crop side in pixels
    #[arg(long, default_value_t = 64)]
    crop_max: u32,
    /// Allow crop centers in the middle third of the image
    #[arg(long)]
    no_center_exclusion: bool,
}

impl CropArgs {
    fn config(&self) -> Result<CropConfig> {
        let c = CropConfig {
            min: self.crop_min,
            max: self.crop_max,
            exclude_center: !self.no_center_exclusion,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SimModeArg {
    Literal,
    Cosine,
}

#[derive(Args, Debug, Clone, Serialize)]
struct MixArgs {
    /// Probability of substituting the most similar other crop
    #[arg(long, default_value_t = 0.25)]
    p_other_crop: f64,
    /// Probability of substituting the most similar other original
    #[arg(long, default_value_t = 0.10)]
    p_other_original: f64,
    /// Caption-image similarity scoring
    #[arg(long, value_enum, default_value_t = SimModeArg::Literal)]
    sim_mode: SimModeArg,
}

impl MixArgs {
    fn config(&self, crop: CropConfig) -> Result<PtcConfig> {
        let mixture = MixtureConfig {
            other_crop: self.p_other_crop,
            other_original: self.p_other_original,
        };
        mixture.validate()?;
        Ok(PtcConfig {
            crop,
            mixture,
            sim_mode: match self.sim_mode {
                SimModeArg::Literal => SimMode::Literal,
                SimModeArg::Cosine => SimMode::Cosine,
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum LossArg {
    Full,
    NoCompose,
    NoAlign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum AlignArg {
    Reference,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ActivationArg {
    Gelu,
    Tanh,
    Identity,
}

#[derive(Args, Debug, Clone, Serialize)]
struct TrainArgs {
    /// Optimizer updates to apply
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    /// Peak learning rate
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    /// Linear warmup length in steps
    #[arg(long, default_value_t = 100)]
    warmup: u64,
    /// Images per batch
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Contrastive temperature (logit scale)
    #[arg(long, default_value_t = 100.0)]
    tau: f64,
    /// Decoupled weight decay
    #[arg(long, default_value_t = 0.1)]
    weight_decay: f64,
    /// AdamW first-moment decay
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    /// AdamW second-moment decay
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    /// AdamW epsilon
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    /// Loss terms to optimize
    #[arg(long, value_enum, default_value_t = LossArg::Full)]
    loss: LossArg,
    /// Image paired with the caption-free prompt in the alignment term
    #[arg(long, value_enum, default_value_t = AlignArg::Reference)]
    align_target: AlignArg,
    /// Hidden width of the mapping network [default: embedding dimension]
    #[arg(long)]
    hidden: Option<usize>,
    /// Mapping network activation
    #[arg(long, value_enum, default_value_t = ActivationArg::Gelu)]
    activation: ActivationArg,
    /// Abort after this many consecutive batches with fewer than two triplets
    #[arg(long, default_value_t = 100)]
    max_skips: u64,
}

impl TrainArgs {
    fn config(&self, seed: u64, ptc: PtcConfig, checkpoint_every: Option<u64>) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            learning_rate: self.lr,
            warmup_steps: self.warmup,
            batch_size: self.batch_size,
            total_steps: self.steps,
            seed,
            optimizer: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            objective: ObjectiveConfig {
                tau: self.tau,
                terms: match self.loss {
                    LossArg::Full => LossTerms::FULL,
                    LossArg::NoCompose => LossTerms::WITHOUT_COMPOSE,
                    LossArg::NoAlign => LossTerms::WITHOUT_ALIGN,
                },
                align_target: match self.align_target {
                    AlignArg::Reference => AlignTarget::Reference,
                    AlignArg::Target => AlignTarget::Target,
                },
            },
            ptc,
            hidden: self.hidden,
            activation: match self.activation {
                ActivationArg::Gelu => Activation::Gelu,
                ActivationArg::Tanh => Activation::Tanh,
                ActivationArg::Identity => Activation::Identity,
            },
            max_consecutive_skips: self.max_skips,
            checkpoint_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct StoreArgs {
    /// Store file
    #[arg(long)]
    store: PathBuf,
    /// Frozen encoder file [default: <store>.vocab.json]
    #[arg(long)]
    encoders: Option<PathBuf>,
}

impl StoreArgs {
    fn encoders_path(&self) -> PathBuf {
        self.encoders.clone().unwrap_or_else(|| encoders_sidecar(&self.store))
    }

    fn load(&self, run: &mut RunDir) -> Result<(Store, Encoders)> {
        let enc_path = self.encoders_path();
        require_file(&self.store)?;
        require_file(&enc_path)?;
        run.input(&self.store)?;
        run.input(&enc_path)?;
        Ok((read_store(&self.store)?, Encoders::load(&enc_path)?))
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct SynthGenArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[command(flatten)]
    crop: CropArgs,
    /// Evaluation queries per task kind
    #[arg(long, default_value_t = 500)]
    eval_queries: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
struct IngestArgs {
    /// JSON-lines file of store records (image, crop candidates, caption)
    #[arg(long)]
    records: PathBuf,
    /// Frozen encoder file (vocabulary and text encoder)
    #[arg(long)]
    encoders: PathBuf,
    /// Enforce that images with crops are at least twice this size per side
    #[arg(long)]
    crop_min: Option<u32>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct BuildTripletsArgs {
    #[command(flatten)]
    store: StoreArgs,
    /// Images per batch
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Batches to construct
    #[arg(long, default_value_t = 10)]
    batches: u64,
    #[command(flatten)]
    crop: CropArgs,
    #[command(flatten)]
    mix: MixArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
struct TrainCmdArgs {
    #[command(flatten)]
    store: StoreArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    crop: CropArgs,
    #[command(flatten)]
    mix: MixArgs,
    /// Write an intermediate checkpoint every N steps
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    store: StoreArgs,
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task file [default: tasks.jsonl next to the store]
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Gallery manifest [default: gallery.jsonl next to the store]
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// Cutoffs for Recall@K
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum GradLoss {
    All,
    Compose,
    Align,
    Total,
}

#[derive(Args, Debug, Clone, Serialize)]
struct GradcheckArgs {
    /// Embedding dimension
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// Token dimension [default: d]
    #[arg(long)]
    token_dim: Option<usize>,
    /// Triplets in the batch
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Contrastive temperature
    #[arg(long, default_value_t = 100.0)]
    tau: f64,
    /// Loss to check
    #[arg(long, value_enum, default_value_t = GradLoss::All)]
    loss: GradLoss,
    /// Check a random subset of this many coordinates (at least 200) [default: all]
    #[arg(long)]
    max_coords: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct CropSweepArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    mix: MixArgs,
    /// Crop ranges as MIN-MAX pairs
    #[arg(long, value_delimiter = ',', default_value = "16-32,32-64,64-128,128-256")]
    ranges: Vec<String>,
    /// Allow crop centers in the middle third of the image
    #[arg(long)]
    no_center_exclusion: bool,
    /// Evaluation queries per task kind
    #[arg(long, default_value_t = 500)]
    eval_queries: usize,
    /// Cutoffs for Recall@K
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
}

/// Encoder sidecar that accompanies a store file: `x/store.di2w` → `x/store.vocab.json`.
pub fn encoders_sidecar(store: &Path) -> PathBuf {
    store.with_extension("vocab.json")
}

fn sibling(store: &Path, name: &str) -> PathBuf {
    store.parent().unwrap_or_else(|| Path::new("")).join(name)
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct FileHash {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'a str,
    seed: u64,
    config: &'a C,
    inputs: &'a [FileHash],
    outputs: &'a [FileHash],
}

/// Output directory of one command plus the hashes of what it read and wrote.
struct RunDir {
    path: PathBuf,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

impl RunDir {
    fn create(path: PathBuf) -> Result<Self> {
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    /// Records a file already written into the run directory.
    fn output(&mut self, name: &str) -> Result<()> {
        let path = self.file(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(FileHash {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.file(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.output(name)
    }

    fn finish<C: Serialize>(self, command: &str, seed: u64, config: &C) -> Result<()> {
        let manifest = RunManifest {
            command,
            seed,
            config,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let path = self.file(RUN_MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn write_store_files(run: &mut RunDir, store: &Store, encoders: &Encoders) -> Result<()> {
    write_store(store.records(), store.dim(), run.file(STORE_FILE))?;
    run.output(STORE_FILE)?;
    let sidecar = encoders_sidecar(Path::new(STORE_FILE));
    let sidecar = sidecar.to_str().expect("utf-8 file name");
    encoders.save(run.file(sidecar))?;
    run.output(sidecar)?;
    let entries = store
        .records()
        .iter()
        .map(|r| {
            Ok(ManifestEntry {
                id: r.image.id.clone(),
                caption: encoders.vocab.render(&r.caption.tokens)?,
                tokens: r.caption.tokens.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(run.file(MANIFEST_FILE), &entries)?;
    run.output(MANIFEST_FILE)
}

fn world_tasks(world: &SynthWorld, max_queries: usize, seed: u64) -> Result<Vec<crate::eval::TaskSet>> {
    let mut tasks = Vec::new();
    for kind in TaskKind::ALL {
        match make_eval_tasks(world, kind, max_queries, seed) {
            Ok(t) => tasks.push(t),
            Err(Error::NoTasks(k)) => log::warn!("no `{k}` queries in this world"),
            Err(e) => return Err(e),
        }
    }
    if tasks.is_empty() {
        return Err(Error::Empty("evaluation task set"));
    }
    Ok(tasks)
}

fn cmd_synth_gen(g: &GlobalArgs, a: &SynthGenArgs, run: &mut RunDir) -> Result<()> {
    let cfg = a.world.config(g.seed, a.crop.config()?, 224);
    let world = generate_world(&cfg)?;
    write_store_files(run, &world.store, &world.encoders)?;
    run.write("world.json", world.to_json() + "\n")?;
    let tasks = world_tasks(&world, a.eval_queries, g.seed)?;
    write_tasks(run.file(TASKS_FILE), run.file(GALLERY_FILE), &tasks)?;
    run.output(TASKS_FILE)?;
    run.output(GALLERY_FILE)?;
    let store_hash = &run.outputs[0].sha256;
    println!(
        "synth-gen: {} images, {} scenes, d={} store sha256={store_hash}",
        world.store.len(),
        world.meta.scenes.len(),
        cfg.d
    );
    for t in &tasks {
        println!("  {} queries: {}", t.kind.name(), t.queries.len());
    }
    Ok(())
}

fn cmd_ingest(a: &IngestArgs, run: &mut RunDir) -> Result<()> {
    require_file(&a.records)?;
    require_file(&a.encoders)?;
    run.input(&a.records)?;
    run.input(&a.encoders)?;
    let encoders = Encoders::load(&a.encoders)?;
    let records: Vec<StoreRecord> = crate::store::read_jsonl(&a.records)?;
    if records.is_empty() {
        return Err(Error::Empty("ingested records"));
    }
    let d = records[0].image.embedding.dim();
    if d != encoders.out_dim() {
        return Err(Error::DimensionMismatch {
            expected: encoders.out_dim(),
            got: d,
            context: "ingested embeddings vs text encoder output",
        });
    }
    for r in &records {
        r.validate(d, a.crop_min)?;
    }
    let store = Store::new(d, records)?;
    write_store_files(run, &store, &encoders)?;
    println!(
        "ingest: {} records, d={d} store sha256={}",
        store.len(),
        run.outputs[0].sha256
    );
    Ok(())
}

#[derive(Serialize)]
struct TripletLine<'a> {
    batch: u64,
    #[serde(flatten)]
    entry: &'a TripletManifestEntry,
}

#[derive(Serialize)]
struct StatsLine<'a> {
    batch: u64,
    #[serde(flatten)]
    stats: &'a crate::ptc::PtcStats,
}

fn cmd_build_triplets(g: &GlobalArgs, a: &BuildTripletsArgs, run: &mut RunDir) -> Result<()> {
    let ptc = a.mix.config(a.crop.config()?)?;
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        seed: g.seed,
        ptc,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let (store, _) = a.store.load(run)?;
    let records = training_records(&store, &ptc)?;
    let mut schedule = BatchSchedule::new(records.len(), a.batch_size, g.seed)?;
    let mut entries = Vec::new();
    let mut stats = Vec::new();
    for it in 0..a.batches {
        let (triplets, s) = triplets_for_iteration(&records, &mut schedule, &cfg, it)?;
        entries.extend(triplets.iter().map(|t| (it, TripletManifestEntry::from(t))));
        stats.push((it, s));
    }
    let lines: Vec<TripletLine> = entries
        .iter()
        .map(|(b, e)| TripletLine { batch: *b, entry: e })
        .collect();
    write_jsonl(run.file("triplets.jsonl"), &lines)?;
    run.output("triplets.jsonl")?;
    let stat_lines: Vec<StatsLine> = stats.iter().map(|(b, s)| StatsLine { batch: *b, stats: s }).collect();
    write_jsonl(run.file("ptc_stats.jsonl"), &stat_lines)?;
    run.output("ptc_stats.jsonl")?;
    let count = |p: Provenance| entries.iter().filter(|(_, e)| e.provenance == p).count();
    let kept: usize = stats.iter().map(|(_, s)| s.selected).sum();
    println!(
        "build-triplets: {} batches of {}, {kept} triplets kept ({:.1}%), self_crop {} other_crop {} other_original {}",
        a.batches,
        a.batch_size,
        100.0 * kept as f64 / (a.batches as f64 * a.batch_size as f64).max(1.0),
        count(Provenance::SelfCrop),
        count(Provenance::OtherCrop),
        count(Provenance::OtherOriginal),
    );
    Ok(())
}

fn checkpoint_name(step: u64) -> String {
    format!("checkpoint-{step:06}.di2k")
}

fn cmd_train(g: &GlobalArgs, a: &TrainCmdArgs, run: &mut RunDir) -> Result<()> {
    let ptc = a.mix.config(a.crop.config()?)?;
    let cfg = a.train.config(g.seed, ptc, a.checkpoint_every)?;
    let resume = match &a.resume {
        Some(p) => {
            require_file(p)?;
            run.input(p)?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let (store, encoders) = a.store.load(run)?;
    let fingerprint = encoders.fingerprint();
    let mut written = Vec::new();
    let out = train_with(&store, &encoders, &cfg, resume, |ev| {
        if let TrainEvent::Checkpoint(ck) = ev {
            let name = checkpoint_name(ck.progress.step);
            ck.save(run.file(&name))?;
            written.push(name);
        }
        Ok(())
    })?;
    for name in &written {
        run.output(name)?;
    }
    if encoders.fingerprint() != fingerprint {
        return Err(Error::TrainingAborted("frozen encoders changed during training".into()));
    }
    out.checkpoint(&cfg).save(run.file("checkpoint.di2k"))?;
    run.output("checkpoint.di2k")?;
    write_jsonl(run.file("train_log.jsonl"), &out.log)?;
    run.output("train_log.jsonl")?;
    run.write("train_config.json", to_json(&cfg))?;
    let (first, last) = (out.log.first(), out.log.last());
    match (first, last) {
        (Some(f), Some(l)) => println!(
            "train: {} steps ({} skipped batches), l_total {:.6} -> {:.6}, checkpoint sha256={}",
            out.progress.step,
            out.skipped,
            f.l_total,
            l.l_total,
            run.outputs
                .iter()
                .find(|o| o.path == "checkpoint.di2k")
                .map_or("", |o| &o.sha256)
        ),
        _ => println!("train: no steps applied"),
    }
    Ok(())
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidConfig("K values must be >= 1".into()));
    }
    Ok(())
}

fn write_report(run: &mut RunDir, stem: &str, report: &RetrievalReport) -> Result<()> {
    run.write(&format!("{stem}.txt"), report.to_text())?;
    run.write(&format!("{stem}.csv"), report.to_csv())?;
    run.write(&format!("{stem}.json"), report.to_json() + "\n")
}

fn cmd_eval(g: &GlobalArgs, a: &EvalArgs, run: &mut RunDir) -> Result<()> {
    check_ks(&a.k)?;
    let tasks_path = a.tasks.clone().unwrap_or_else(|| sibling(&a.store.store, TASKS_FILE));
    let gallery_path = a
        .gallery
        .clone()
        .unwrap_or_else(|| sibling(&a.store.store, GALLERY_FILE));
    for p in [&a.checkpoint, &tasks_path, &gallery_path] {
        require_file(p)?;
    }
    let (store, encoders) = a.store.load(run)?;
    run.input(&a.checkpoint)?;
    run.input(&tasks_path)?;
    run.input(&gallery_path)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    if ck.params.input_dim() != store.dim() || ck.params.output_dim() != encoders.token_dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            got: ck.params.input_dim(),
            context: "checkpoint vs store dimension",
        });
    }
    let tasks = read_tasks(&tasks_path, &gallery_path, &store)?;
    let report = evaluate(
        &ck.params,
        &tasks,
        &encoders,
        &a.k,
        g.seed,
        &hex::encode(ck.config_hash),
    )?;
    write_report(run, "report", &report)?;
    print!("{}", report.to_text());
    Ok(())
}

#[derive(Serialize)]
struct GradcheckLine {
    loss: &'static str,
    coords: usize,
    max_rel_err: f64,
    max_abs_err: f64,
    passed: bool,
}

fn cmd_gradcheck(g: &GlobalArgs, a: &GradcheckArgs, run: &mut RunDir) -> Result<bool> {
    let problem = GradCheckProblem::random(a.d, a.token_dim.unwrap_or(a.d), a.batch, g.seed)?;
    let cfg = GradCheckConfig {
        h: a.h,
        tolerance: a.tolerance,
        max_coords: a.max_coords,
        seed: g.seed,
    };
    let losses: &[(&'static str, LossTerms)] = match a.loss {
        GradLoss::All => &[
            ("compose", LossTerms::WITHOUT_ALIGN),
            ("align", LossTerms::WITHOUT_COMPOSE),
            ("total", LossTerms::FULL),
        ],
        GradLoss::Compose => &[("compose", LossTerms::WITHOUT_ALIGN)],
        GradLoss::Align => &[("align", LossTerms::WITHOUT_COMPOSE)],
        GradLoss::Total => &[("total", LossTerms::FULL)],
    };
    let mut lines = Vec::new();
    for &(name, terms) in losses {
        let objective = ObjectiveConfig {
            tau: a.tau,
            terms,
            ..ObjectiveConfig::default()
        };
        let r = problem.check(&objective, &cfg)?;
        println!(
            "gradcheck {name}: coords={} max_rel_err={:.3e} max_abs_err={:.3e} {}",
            r.coords_checked,
            r.max_rel_err,
            r.max_abs_err,
            if r.passed { "PASS" } else { "FAIL" }
        );
        lines.push(GradcheckLine {
            loss: name,
            coords: r.coords_checked,
            max_rel_err: r.max_rel_err,
            max_abs_err: r.max_abs_err,
            passed: r.passed,
        });
    }
    let passed = lines.iter().all(|l| l.passed);
    let worst = lines.iter().map(|l| l.max_rel_err).fold(0.0, f64::max);
    println!("max_rel_err={worst:.3e} {}", if passed { "PASS" } else { "FAIL" });
    write_jsonl(run.file("gradcheck.jsonl"), &lines)?;
    run.output("gradcheck.jsonl")?;
    Ok(passed)
}

fn parse_range(s: &str) -> Result<(u32, u32)> {
    let bad = || Error::InvalidConfig(format!("crop range `{s}` is not MIN-MAX"));
    let (lo, hi) = s.trim().split_once('-').ok_or_else(bad)?;
    Ok((
        lo.trim().parse().map_err(|_| bad())?,
        hi.trim().parse().map_err(|_| bad())?,
    ))
}

#[derive(Serialize)]
struct SweepEntry {
    range: String,
    skipped_batches: u64,
    report: RetrievalReport,
}

fn cmd_crop_sweep(g: &GlobalArgs, a: &CropSweepArgs, run: &mut RunDir) -> Result<()> {
    check_ks(&a.k)?;
    let crops = a
        .ranges
        .iter()
        .map(|s| {
            let (min, max) = parse_range(s)?;
            let c = CropConfig {
                min,
                max,
                exclude_center: !a.no_center_exclusion,
            };
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    if crops.is_empty() {
        return Err(Error::InvalidConfig("no crop ranges given".into()));
    }
    let world_cfg = a.world.config(g.seed, crops[0], 512);
    for c in &crops {
        if 2 * c.min > world_cfg.image_size {
            return Err(Error::InfeasibleCrop(format!(
                "range {}-{} needs images of at least {} px, have {}",
                c.min,
                c.max,
                2 * c.min,
                world_cfg.image_size
            )));
        }
    }
    let base = generate_world(&world_cfg)?;
    let tasks = world_tasks(&base, a.eval_queries, g.seed)?;
    let mut entries = Vec::new();
    let mut csv = String::from("range,task,K,recall\n");
    let mut text = String::new();
    for crop in crops {
        let label = format!("{}-{}", crop.min, crop.max);
        let world = base.with_crop_range(crop)?;
        let cfg = a.train.config(g.seed, a.mix.config(crop)?, None)?;
        let out = train_with(&world.store, &world.encoders, &cfg, None, |_| Ok(()))?;
        let report = evaluate(
            &out.params,
            &tasks,
            &world.encoders,
            &a.k,
            g.seed,
            &hex::encode(cfg.trajectory_hash()),
        )?;
        for r in &report.rows {
            let _ = writeln!(csv, "{label},{},{},{:.6}", r.task, r.k, r.recall);
        }
        let _ = writeln!(text, "crop {label}");
        text.push_str(&report.to_text());
        text.push('\n');
        println!(
            "crop {label}: average R@{} = {:.2}",
            a.k[0],
            100.0 * report.recall(crate::eval::AVERAGE_ROW, a.k[0]).unwrap_or(0.0)
        );
        entries.push(SweepEntry {
            range: label,
            skipped_batches: out.skipped,
            report,
        });
    }
    run.write("crop_sweep.csv", csv)?;
    run.write("crop_sweep.txt", text)?;
    run.write("crop_sweep.json", to_json(&entries))?;
    Ok(())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn report_error(kind: &str, msg: &str) {
    let msg = msg
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    eprintln!(
        "error: kind={kind} msg={}",
        serde_json::to_string(&msg).expect("string serializes")
    );
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let g = &cli.global;
    let name = cli.command.name();
    let run_path = g.report_dir.join(g.run_name.as_deref().unwrap_or(name));
    let mut run = RunDir::create(run_path)?;
    let mut code = 0;
    match &cli.command {
        Command::SynthGen(a) => {
            cmd_synth_gen(g, a, &mut run)?;
            run.finish(name, g.seed, a)?;
        }
        Command::Ingest(a) => {
            cmd_ingest(a, &mut run)?;
            run.finish(name, g.seed, a)?;
        }
        Command::BuildTriplets(a) => {
            cmd_build_triplets(g, a, &mut run)?;
            run.finish(name, g.seed, a)?;
        }
        Command::Train(a) => {
            cmd_train(g, a, &mut run)?;
            run.finish(name, g.seed, a)?;
        }
        Command::Eval(a) => {
            cmd_eval(g, a, &mut run)?;
            run.finish(name, g.seed, a)?;
        }
        Command::Gradcheck(a) => {
            if !cmd_gradcheck(g, a, &mut run)? {
                code = EXIT_FAILURE;
            }
            run.finish(name, g.seed, a)?;
        }
        Command::CropSweep(a) => {
            cmd_crop_sweep(g, a, &mut run)?;
            run.finish(name, g.seed, a)?;
        }
    }
    Ok(code)
}

/// Parses `argv` (including the program name) and runs the command. Returns
/// the process exit code: 0 on success, 1 on failure, 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    use std::io::Write as _;
                    let _ = write!(std::io::stdout(), "{}", e.render());
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    eprint!("{}", e.render());
                    EXIT_USAGE
                }
                _ => {
                    let text = e.render().to_string();
                    let body = text.split("Usage:").next().unwrap_or("").trim_start_matches("error: ");
                    report_error("usage", body);
                    EXIT_USAGE
                }
            };
        }
    };
    init_logging(cli.global.verbose);
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            EXIT_FAILURE
        }
    }
}
