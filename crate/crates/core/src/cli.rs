//! Command-line front end. Exit codes: 0 success, 1 usage, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::augment::{splicemix, AugConfig, MultiHotLabel, SplicedBatch};
use crate::error::{Error, Result};
use crate::io::{
    decode_image, encode_png, encode_preview, load_aug_config, load_manifest, read_json, read_npy,
    write_json, BatchArchive, Manifest, ManifestEntry, ARCHIVE_IMAGES, ARCHIVE_PLAN,
};
use crate::metrics::{evaluate, EvalTable, TopKMode, DEFAULT_THRESHOLD};
use crate::rng::SeededStream;
use crate::synth::{gen_dataset, run_experiment, Method, SynthConfig, TrainConfig};
use crate::tensor::{parse_grid_list, GridGeometry, ImageTensor};

pub const THREADS_ENV: &str = "SPLICEMIX_THREADS";

#[derive(Debug, Parser)]
#[command(name = "splicemix", version, about = "Grid-splicing augmentation for multi-label images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Splice a manifest of images into batch archives.
    Augment(AugmentArgs),
    /// Write the mixed images of the first batch as PNGs.
    Preview(PreviewArgs),
    /// Generate the synthetic co-occurrence dataset as PNGs plus manifests.
    GenSynth(GenSynthArgs),
    /// Train baseline / splicemix / splicemix_cl heads on synthetic data.
    TrainDemo(TrainDemoArgs),
    /// Score predictions against labels (both NPY, shape [N, C]).
    Eval(EvalArgs),
    /// Positive-bit statistics of an archive.
    Stats(StatsArgs),
}

#[derive(Clone, Debug)]
pub struct GridList(pub Vec<GridGeometry>);

fn parse_grids(s: &str) -> std::result::Result<GridList, String> {
    parse_grid_list(s).map(GridList).map_err(|e| e.to_string())
}

fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let g: GridGeometry = s.parse().map_err(|e: Error| e.to_string())?;
    Ok((g.rows, g.cols))
}

#[derive(Clone, Debug)]
pub struct MethodList(pub Vec<Method>);

fn parse_methods(s: &str) -> std::result::Result<MethodList, String> {
    s.split(',')
        .map(|m| m.parse::<Method>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()
        .map(MethodList)
}

#[derive(Debug, Args)]
pub struct AugFlags {
    /// JSON AugConfig; explicit flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Grid family, e.g. "1x2,2x2,2x3".
    #[arg(long, value_parser = parse_grids)]
    pub grids: Option<GridList>,
    #[arg(long)]
    pub mixed_frac: Option<f64>,
    #[arg(long)]
    pub dropout_prob: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl AugFlags {
    fn resolve(&self) -> Result<AugConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_aug_config(p)?,
            None => AugConfig::default(),
        };
        if let Some(g) = &self.grids {
            cfg.grid_family = g.0.clone();
        }
        if let Some(v) = self.mixed_frac {
            cfg.mixed_frac = v;
        }
        if let Some(v) = self.dropout_prob {
            cfg.dropout_prob = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Directory that manifest image paths are relative to.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Expected image size "HxW"; defaults to the first image's size.
    #[arg(long, value_parser = parse_resolution)]
    pub resolution: Option<(usize, usize)>,
    #[command(flatten)]
    pub aug: AugFlags,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[command(flatten)]
    pub aug: AugFlags,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON SynthConfig; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_n: Option<usize>,
    #[arg(long)]
    pub test_n: Option<usize>,
    /// Applied to every biased pair.
    #[arg(long)]
    pub co_occur_prob: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainDemoArgs {
    #[arg(long, value_parser = parse_methods, default_value = "baseline,splicemix,splicemix_cl")]
    pub methods: MethodList,
    /// Number of seeds, run as seed_base, seed_base + 1, ...
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed_base: u64,
    #[arg(long)]
    pub synth_config: Option<PathBuf>,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub co_occur_prob: Option<f64>,
    #[command(flatten)]
    pub aug: AugFlags,
    /// Report JSON path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss curves as CSV.
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// float32 scores, [N, C].
    #[arg(long)]
    pub scores: PathBuf,
    /// uint8 multi-hot labels, [N, C].
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Top-3 block ignores the threshold.
    #[arg(long)]
    pub top_k_only: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// A batch archive, or an `augment` output directory of them.
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_batch_source(
    images: &Path,
    manifest_path: &Path,
    resolution: Option<(usize, usize)>,
) -> Result<(Manifest, Vec<(ImageTensor, MultiHotLabel)>)> {
    let manifest = load_manifest(manifest_path)?;
    let samples = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| Ok((decode_image(&images.join(&e.image))?, manifest.label(i)?)))
        .collect::<Result<Vec<_>>>()?;
    let expected = match (resolution, samples.first()) {
        (Some(r), _) => Some(r),
        (None, Some((img, _))) => Some((img.height(), img.width())),
        (None, None) => None,
    };
    for ((img, _), e) in samples.iter().zip(&manifest.entries) {
        let c0 = samples[0].0.channels();
        if Some((img.height(), img.width())) != expected || img.channels() != c0 {
            return Err(Error::Image {
                path: e.image.clone(),
                msg: format!(
                    "is {}x{}x{}, expected {}x{:?}",
                    img.channels(),
                    img.height(),
                    img.width(),
                    c0,
                    expected.unwrap_or_default()
                ),
            });
        }
    }
    Ok((manifest, samples))
}

fn check_divisible(cfg: &AugConfig, h: usize, w: usize) -> Result<()> {
    let (rd, cd) = cfg.required_divisors();
    if cfg.mixed_frac > 0.0 && (h % rd != 0 || w % cd != 0) {
        return Err(Error::Config(format!(
            "resolution {h}x{w} must be divisible by {rd}x{cd} for grids {}",
            cfg.grid_family
                .iter()
                .map(|g| g.to_string())
                .collect::<Vec<_>>()
                .join(",")
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BatchSummary {
    index: usize,
    dir: String,
    regular: usize,
    mixed: usize,
    grid: String,
    dropout: usize,
    passthrough: bool,
    plan_sha256: String,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    images: usize,
    classes: Vec<String>,
    batch_size: usize,
    resolution: (usize, usize),
    config: AugConfig,
    total_regular: usize,
    total_mixed: usize,
    batches: Vec<BatchSummary>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn splice_or_pass(
    batch: &[(ImageTensor, MultiHotLabel)],
    cfg: &AugConfig,
    rng: &mut SeededStream,
) -> Result<(SplicedBatch, bool)> {
    match splicemix(batch, cfg, rng) {
        Ok(s) => Ok((s, false)),
        // a short trailing batch may hold fewer images than one grid needs
        Err(Error::InfeasiblePlan(msg)) if batch.len() < cfg.required_divisors().0 * cfg.required_divisors().1 => {
            warn!("batch of {} images left unmixed: {msg}", batch.len());
            let no_mix = AugConfig {
                mixed_frac: 0.0,
                ..cfg.clone()
            };
            Ok((splicemix(batch, &no_mix, rng)?, true))
        }
        Err(e) => Err(e),
    }
}

fn cmd_augment(a: &AugmentArgs) -> Result<()> {
    let cfg = a.aug.resolve()?;
    if a.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let (manifest, samples) = load_batch_source(&a.images, &a.manifest, a.resolution)?;
    let (h, w) = samples
        .first()
        .map(|(img, _)| (img.height(), img.width()))
        .unwrap_or(a.resolution.unwrap_or_default());
    check_divisible(&cfg, h, w)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let chunks: Vec<&[(ImageTensor, MultiHotLabel)]> = samples.chunks(a.batch_size).collect();
    let batches = chunks
        .par_iter()
        .enumerate()
        .map(|(index, batch)| -> Result<BatchSummary> {
            let mut rng = SeededStream::derive(cfg.seed, index as u64);
            let (spliced, passthrough) = splice_or_pass(batch, &cfg, &mut rng)?;
            let dir = format!("batch_{index:04}");
            let path = a.out.join(&dir);
            BatchArchive::from_spliced(&spliced).write(&path, manifest.classes.len())?;
            let plan_bytes = fs::read(path.join(ARCHIVE_PLAN)).map_err(|e| Error::io(&path, e))?;
            Ok(BatchSummary {
                index,
                dir,
                regular: spliced.regulars.len(),
                mixed: spliced.mixed.len(),
                grid: spliced.plan.geom.to_string(),
                dropout: spliced.plan.dropout,
                passthrough,
                plan_sha256: sha256_hex(&plan_bytes),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = RunSummary {
        images: samples.len(),
        classes: manifest.classes.clone(),
        batch_size: a.batch_size,
        resolution: (h, w),
        config: cfg,
        total_regular: batches.iter().map(|b| b.regular).sum(),
        total_mixed: batches.iter().map(|b| b.mixed).sum(),
        batches,
    };
    info!(
        "{} batches, {} regular + {} mixed images",
        summary.batches.len(),
        summary.total_regular,
        summary.total_mixed
    );
    write_json(&summary, &a.out.join("summary.json"))
}

fn cmd_preview(a: &PreviewArgs) -> Result<()> {
    let cfg = a.aug.resolve()?;
    let (_, samples) = load_batch_source(&a.images, &a.manifest, None)?;
    if samples.is_empty() {
        return Err(Error::Config("manifest has no entries".into()));
    }
    let (h, w) = (samples[0].0.height(), samples[0].0.width());
    check_divisible(&cfg, h, w)?;
    let batch = &samples[..a.batch_size.clamp(1, samples.len())];
    let mut rng = SeededStream::derive(cfg.seed, 0);
    let (spliced, _) = splice_or_pass(batch, &cfg, &mut rng)?;
    let written = encode_preview(&spliced, &a.out)?;
    write_json(&spliced.plan, &a.out.join(ARCHIVE_PLAN))?;
    info!("wrote {} preview images", written.len());
    Ok(())
}

fn cmd_gen_synth(a: &GenSynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.train_n {
        cfg.train_n = v;
    }
    if let Some(v) = a.test_n {
        cfg.test_n = v;
    }
    if let Some(v) = a.co_occur_prob {
        cfg.biased_pairs.iter_mut().for_each(|p| p.co_occur_prob = v);
    }
    let data = gen_dataset(&cfg)?;
    let classes: Vec<String> = (0..cfg.classes).map(|k| format!("class_{k}")).collect();
    for (name, set) in [("train", &data.train), ("test", &data.test)] {
        let dir = a.out.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let entries = set
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let rel = PathBuf::from(name).join(format!("{i:05}.png"));
                encode_png(&s.image, &a.out.join(&rel))?;
                Ok(ManifestEntry {
                    image: rel,
                    labels: s.label.indices(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            classes: classes.clone(),
            entries,
        };
        write_json(&manifest, &a.out.join(format!("{name}_manifest.json")))?;
    }
    write_json(&cfg, &a.out.join("synth_config.json"))
}

fn cmd_train_demo(a: &TrainDemoArgs) -> Result<()> {
    let mut synth: SynthConfig = match &a.synth_config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.co_occur_prob {
        synth.biased_pairs.iter_mut().for_each(|p| p.co_occur_prob = v);
    }
    let mut train: TrainConfig = match &a.train_config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        train.epochs = e;
    }
    let aug = a.aug.resolve()?;
    let methods = &a.methods.0;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| a.seed_base + i).collect();
    let report = run_experiment(&synth, &aug, &train, methods, &seeds)?;
    if let Some(p) = &a.curves {
        fs::write(p, report.curves_csv()).map_err(|e| Error::io(p, e))?;
    }
    match &a.out {
        Some(p) => write_json(&report, p),
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let scores = read_npy(&a.scores)?;
    let labels = read_npy(&a.labels)?;
    let (&[n, c], &[ln, lc]) = (scores.shape(), labels.shape()) else {
        return Err(Error::Npy("scores and labels must both be 2-d".into()));
    };
    if (n, c) != (ln, lc) {
        return Err(Error::Shape(format!(
            "scores are {n}x{c}, labels are {ln}x{lc}"
        )));
    }
    let table = EvalTable::new(
        n,
        c,
        scores.as_f32()?.iter().map(|&v| v as f64).collect(),
        labels.as_u8()?.iter().map(|&v| v != 0).collect(),
    )?;
    let mode = if a.top_k_only {
        TopKMode::TopKOnly
    } else {
        TopKMode::ThresholdAndTopK
    };
    let report = evaluate(&table, a.threshold, mode)?;
    match &a.out {
        Some(p) => write_json(&report, p),
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

/// Positive-bit counts of regular and mixed labels.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelStats {
    pub archives: usize,
    pub regular: usize,
    pub mixed: usize,
    pub mean_positive_regular: f64,
    pub mean_positive_mixed: Option<f64>,
    /// Mixed mean over regular mean.
    pub ratio_change: Option<f64>,
}

pub fn label_stats(archives: &[BatchArchive]) -> LabelStats {
    let count = |ls: &[MultiHotLabel]| ls.iter().map(MultiHotLabel::count_ones).sum::<usize>();
    let regular: usize = archives.iter().map(|a| a.regular_labels().len()).sum();
    let mixed: usize = archives.iter().map(|a| a.mixed_labels().len()).sum();
    let pos_r: usize = archives.iter().map(|a| count(a.regular_labels())).sum();
    let pos_m: usize = archives.iter().map(|a| count(a.mixed_labels())).sum();
    let mean_r = if regular > 0 {
        pos_r as f64 / regular as f64
    } else {
        0.0
    };
    let mean_m = (mixed > 0).then(|| pos_m as f64 / mixed as f64);
    LabelStats {
        archives: archives.len(),
        regular,
        mixed,
        mean_positive_regular: mean_r,
        mean_positive_mixed: mean_m,
        ratio_change: mean_m.filter(|_| mean_r > 0.0).map(|m| m / mean_r),
    }
}

fn archive_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(ARCHIVE_IMAGES).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(ARCHIVE_IMAGES).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::io(
            root.join(ARCHIVE_IMAGES),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no batch archive found"),
        ));
    }
    Ok(dirs)
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let archives = archive_dirs(&a.archive)?
        .iter()
        .map(|d| BatchArchive::read(d))
        .collect::<Result<Vec<_>>>()?;
    let stats = label_stats(&archives);
    match &a.out {
        Some(p) => write_json(&stats, p),
        None => {
            println!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(())
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Augment(a) => cmd_augment(a),
        Command::Preview(a) => cmd_preview(a),
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::TrainDemo(a) => cmd_train_demo(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stats(a) => cmd_stats(a),
    }
}

fn init_threads() {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return;
    };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                warn!("could not size the worker pool: {e}");
            }
        }
        _ => warn!("ignoring {THREADS_ENV}={v:?}"),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_threads();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
