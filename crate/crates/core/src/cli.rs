//! The `fwasense` command line: dataset generation, the three training
//! stages, evaluation, sensing-region maps and angle-delay dumps.
//!
//! Every command writes a [`RunManifest`] listing its inputs, seeds and
//! produced artifacts with their SHA-256 digests.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{generate_dataset, DatasetManifest, DatasetReader};
use crate::detection::{
    train_detector, write_attention_csv, AttentionReport, AttentionRow, DetectionExample, Detector, DetectorConfig,
    DetectorHyper,
};
use crate::dsp::{dump_map_pgm, AngleDelayMap};
use crate::error::{Error, Result};
use crate::localization::{
    hard_fusion, soft_tokens, train_fusion, train_individual, write_trace_csv, FusionConfig, FusionInput, FusionNet,
    LocHyper, Locator, LocatorConfig, TokenSet, TraceRow,
};
use crate::metrics::{
    ape_stats, attention_label_correlation, detection_metrics, sensing_region_map, write_cdf_csv, ApeStats,
    DetectionMetrics, RegionMode,
};
use crate::rng::substream;
use crate::scenario::{load_scenario, PairId, Point3, Scenario};
use crate::selection::{reliability_sweep, select_pairs, write_reliability_csv, ReliabilityRow, SelectionConfig, SIGMA_GRID};
use crate::tensornet::schedule::write_curve_csv;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

pub const DETECTOR_FILE: &str = "detector.ckpt";
pub const LOCATOR_FILE: &str = "locator.ckpt";
pub const COOP_FILE: &str = "c-ulocnet.ckpt";
pub const SOFT_FILE: &str = "soft-fusion.ckpt";
pub const REPORT_FILE: &str = "report.json";

const INFER_CHUNK: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "fwasense", version, about = "Cooperative UAV detection and localization from multi-pair CSI")]
pub struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "FWASENSE_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train / val / test datasets.
    Gen(GenArgs),
    /// Train the cooperative detector.
    TrainDetect(TrainDetectArgs),
    /// Train the per-pair localizer on selected pairs.
    TrainLocIndividual(TrainLocIndividualArgs),
    /// Train the fusion network (and optionally the soft-fusion baseline).
    TrainLocCoop(TrainLocCoopArgs),
    /// Evaluate detection, selection and every localization variant.
    Eval(EvalArgs),
    /// Export sensing-region occupancy maps.
    RegionMap(RegionMapArgs),
    /// Export the angle-delay maps of one sample.
    DumpAd(DumpAdArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArg {
    /// Scenario JSON; the built-in desk profile when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ScenarioArg {
    pub fn load(&self) -> Result<Scenario> {
        match &self.config {
            Some(p) => load_scenario(p),
            None => Ok(Scenario::desk_profile()),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub scenario: ScenarioArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Samples per class in the training split.
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 400)]
    pub val: usize,
    #[arg(long, default_value_t = 600)]
    pub test: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainCommon {
    #[command(flatten)]
    pub scenario: ScenarioArg,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Skip the run when its manifest and artifacts already verify.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sigma_att: f64,
    /// Select pairs by their true labels instead of attention.
    #[arg(long)]
    pub label_selected: bool,
}

impl SelectArgs {
    fn source(&self) -> Result<PairSource> {
        let cfg = SelectionConfig::new(self.k, self.sigma_att).map_err(usage)?;
        Ok(if self.label_selected { PairSource::Labels(cfg) } else { PairSource::Attention(cfg) })
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainDetectArgs {
    #[command(flatten)]
    pub common: TrainCommon,
}

#[derive(Debug, Clone, Args)]
pub struct TrainLocIndividualArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    #[arg(long)]
    pub detector: PathBuf,
    #[command(flatten)]
    pub select: SelectArgs,
    /// Feature tap: dense128, dense64 or dense32.
    #[arg(long, default_value = "dense64")]
    pub tap: String,
}

#[derive(Debug, Clone, Args)]
pub struct TrainLocCoopArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    #[arg(long)]
    pub detector: PathBuf,
    #[arg(long)]
    pub locator: PathBuf,
    #[command(flatten)]
    pub select: SelectArgs,
    /// Also train the soft-fusion baseline on the same selections.
    #[arg(long)]
    pub baselines: bool,
    /// Cross-fitting folds for the fusion training estimates; 0 or 1 uses
    /// the given locator throughout.
    #[arg(long, default_value_t = 0)]
    pub folds: usize,
    /// Epoch cap for each fold locator; the individual default otherwise.
    #[arg(long)]
    pub fold_epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub scenario: ScenarioArg,
    #[arg(long)]
    pub detector: PathBuf,
    /// Directory holding locator.ckpt, c-ulocnet.ckpt and soft-fusion.ckpt.
    #[arg(long)]
    pub localizers: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sigma_att: f64,
    /// Require the soft-fusion baseline.
    #[arg(long)]
    pub baselines: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Union,
    Intersection,
}

#[derive(Debug, Clone, Args)]
pub struct RegionMapArgs {
    #[command(flatten)]
    pub scenario: ScenarioArg,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Pair as `m:n`; repeat for a composite.
    #[arg(long, required = true)]
    pub pair: Vec<String>,
    #[arg(long, value_enum, default_value_t = ModeArg::Union)]
    pub mode: ModeArg,
    /// Cell size in meters.
    #[arg(long, default_value_t = 5.0)]
    pub res: f64,
    /// Half-width of the mapped square; the scenario's UAV range by default.
    #[arg(long)]
    pub range: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DumpAdArgs {
    #[command(flatten)]
    pub scenario: ScenarioArg,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Pair as `m:n`; every pair when omitted.
    #[arg(long)]
    pub pair: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// A file and its SHA-256 digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileHash { path: path.to_path_buf(), sha256: sha256_file(path)? })
    }

    pub fn verify(&self) -> Result<()> {
        let actual = sha256_file(&self.path)?;
        if actual != self.sha256 {
            return Err(Error::Invariant {
                field: "sha256",
                message: format!("{} hashes to {actual}, manifest says {}", self.path.display(), self.sha256),
            });
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub command_line: Vec<String>,
    pub scenario_hash: String,
    pub datasets: Vec<FileHash>,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<FileHash>,
    pub metrics: serde_json::Value,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl RunManifest {
    fn new(command: &str, scenario: &Scenario) -> Self {
        RunManifest {
            command: command.to_string(),
            command_line: std::env::args().collect(),
            scenario_hash: scenario.hash_hex(),
            datasets: Vec::new(),
            seeds: BTreeMap::new(),
            artifacts: Vec::new(),
            metrics: serde_json::Value::Null,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    pub fn path_in(dir: &Path, command: &str) -> PathBuf {
        dir.join(format!("{command}.manifest.json"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Re-hashes every listed file.
    pub fn verify(&self) -> Result<()> {
        self.datasets.iter().chain(&self.artifacts).try_for_each(FileHash::verify)
    }

    fn add_artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts.push(FileHash::of(path)?);
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = Self::path_in(dir, &self.command);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence(_) => EXIT_DIVERGENCE,
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn usage(e: Error) -> Error {
    match e {
        Error::InvalidArgument(_) => e,
        other => Error::InvalidArgument(other.to_string()),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Errors are printed to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs a parsed command inside a pool of the requested size.
pub fn run(cli: Cli) -> Result<RunManifest> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::TrainDetect(a) => cmd_train_detect(&a),
        Command::TrainLocIndividual(a) => cmd_train_loc_individual(&a),
        Command::TrainLocCoop(a) => cmd_train_loc_coop(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::RegionMap(a) => cmd_region_map(&a),
        Command::DumpAd(a) => cmd_dump_ad(&a),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_gen(a: &GenArgs) -> Result<RunManifest> {
    let s = a.scenario.load()?;
    let splits = [("train", a.train), ("val", a.val), ("test", a.test)];
    if let Some((name, _)) = splits.iter().find(|(_, n)| *n == 0) {
        return Err(Error::InvalidArgument(format!("--{name} must be at least 1 sample per class")));
    }
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("gen", &s);
    manifest.seeds.insert("seed".into(), a.seed);
    let mut per_split = serde_json::Map::new();
    for (i, (name, n)) in splits.iter().enumerate() {
        let seed = substream(a.seed, "dataset", i as u64).next_u64();
        let path = a.out.join(format!("{name}.fwas"));
        eprintln!("generating {name}: {n} + {n} samples");
        let dm = generate_dataset(&s, *n, *n, seed, &path)?;
        manifest.seeds.insert(format!("dataset.{name}"), seed);
        manifest.artifacts.push(FileHash { path: path.clone(), sha256: dm.file_sha256.clone() });
        manifest.add_artifact(&DatasetManifest::path_for(&path))?;
        per_split.insert(
            name.to_string(),
            serde_json::json!({ "with_uav": dm.n_with_uav, "without_uav": dm.n_without_uav }),
        );
    }
    manifest.metrics = serde_json::Value::Object(per_split);
    manifest.write(&a.out)?;
    Ok(manifest)
}

/// One dataset sample reduced to what training and evaluation need.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub index: usize,
    pub uav_position: Option<Point3>,
    /// By flat slot.
    pub pair_labels: Vec<bool>,
    pub example: DetectionExample,
}

impl PreparedSample {
    pub fn map_of(&self, pair: PairId) -> Result<&AngleDelayMap> {
        self.example
            .pairs
            .iter()
            .position(|p| *p == pair)
            .map(|i| &self.example.maps[i])
            .ok_or_else(|| Error::OutOfRange(format!("pair {pair} missing from sample {}", self.index)))
    }
}

/// Reads a dataset, checks it against the scenario and its sidecar
/// manifest, and preprocesses every CFR.
pub fn load_prepared(path: &Path, s: &Scenario) -> Result<(Vec<PreparedSample>, FileHash)> {
    let hash = FileHash::of(path)?;
    let sidecar = DatasetManifest::path_for(path);
    if sidecar.exists() {
        let dm = DatasetManifest::load(&sidecar)?;
        if dm.file_sha256 != hash.sha256 {
            return Err(Error::Invariant {
                field: "file_sha256",
                message: format!("{} does not match its manifest", path.display()),
            });
        }
        if dm.scenario_hash != s.hash_hex() {
            return Err(Error::Invariant {
                field: "scenario_hash",
                message: format!("{} was generated from a different scenario", path.display()),
            });
        }
    }
    let mut reader = DatasetReader::open(path)?;
    reader.header().check_matches(s)?;
    let mut records = Vec::with_capacity(reader.header().count);
    while let Some(rec) = reader.next_record() {
        records.push(rec?);
    }
    let keep = s.delay_keep;
    let samples = records
        .into_par_iter()
        .enumerate()
        .map(|(index, rec)| {
            Ok(PreparedSample {
                index,
                uav_position: rec.uav_position,
                pair_labels: rec.pair_labels.clone(),
                example: DetectionExample::from_record(&rec, keep)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, hash))
}

fn examples(samples: &[PreparedSample]) -> Vec<DetectionExample> {
    samples.iter().map(|s| s.example.clone()).collect()
}

/// Detector outputs over all pairs of every sample, in order.
pub fn detect_all(det: &Detector, samples: &[PreparedSample]) -> Result<Vec<(u8, AttentionReport)>> {
    let chunks: Vec<&[PreparedSample]> = samples.chunks(INFER_CHUNK).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| {
            let batch: Vec<_> = chunk.iter().map(|s| s.example.all_pairs()).collect();
            det.detect_batch(&batch)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().map(|(d, r)| (d.label, r)).collect())
}

/// Where localization pairs come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairSource {
    Attention(SelectionConfig),
    /// True pair labels; samples with no labelled pair fall back to attention.
    Labels(SelectionConfig),
}

impl PairSource {
    fn name(&self) -> &'static str {
        match self {
            PairSource::Attention(_) => "attention",
            PairSource::Labels(_) => "labels",
        }
    }

    fn config(&self) -> SelectionConfig {
        match self {
            PairSource::Attention(c) | PairSource::Labels(c) => *c,
        }
    }
}

/// Pairs used for localizing one sample, in selection order.
pub fn choose_pairs(sample: &PreparedSample, report: &AttentionReport, source: PairSource) -> Result<Vec<PairId>> {
    if let PairSource::Labels(_) = source {
        let labelled: Vec<PairId> = sample
            .example
            .pairs
            .iter()
            .copied()
            .filter(|p| sample.pair_labels.get(p.slot()).copied().unwrap_or(false))
            .collect();
        if !labelled.is_empty() {
            return Ok(labelled);
        }
    }
    Ok(select_pairs(report, &source.config())?.pairs)
}

/// UAV samples with their selected pairs.
fn selections(
    samples: &[PreparedSample],
    reports: &[(u8, AttentionReport)],
    source: PairSource,
) -> Result<Vec<(usize, Vec<PairId>)>> {
    samples
        .iter()
        .zip(reports)
        .enumerate()
        .filter(|(_, (s, _))| s.uav_position.is_some())
        .map(|(i, (s, (_, r)))| Ok((i, choose_pairs(s, r, source)?)))
        .collect()
}

/// Locator outputs for the listed pairs of every sample.
fn locate_selected(
    loc: &Locator,
    samples: &[PreparedSample],
    sel: &[(usize, Vec<PairId>)],
) -> Result<Vec<Vec<(Point3, Vec<f64>)>>> {
    let chunks: Vec<&[(usize, Vec<PairId>)]> = sel.chunks(INFER_CHUNK).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| {
            let mut maps = Vec::new();
            for (i, pairs) in chunk.iter() {
                for p in pairs {
                    maps.push(samples[*i].map_of(*p)?);
                }
            }
            let mut out = loc.locate_batch(&maps)?.into_iter();
            Ok(chunk
                .iter()
                .map(|(_, pairs)| out.by_ref().take(pairs.len()).collect::<Vec<_>>())
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

fn fusion_input(pairs: &[PairId], located: &[(Point3, Vec<f64>)]) -> FusionInput {
    FusionInput {
        estimates: located.iter().map(|(p, _)| *p).collect(),
        features: located.iter().map(|(_, v)| v.clone()).collect(),
        indexes: pairs.iter().map(|p| p.flat).collect(),
    }
}

fn check_resume(common: &TrainCommon, command: &str) -> Result<Option<RunManifest>> {
    if !common.resume {
        return Ok(None);
    }
    let path = RunManifest::path_in(&common.out, command);
    if !path.exists() {
        return Ok(None);
    }
    let m = RunManifest::load(&path)?;
    if m.verify().is_ok() {
        eprintln!("{command}: {} is complete and verifies; nothing to do", path.display());
        return Ok(Some(m));
    }
    Ok(None)
}

/// Desk-scale defaults; the full-scale schedule is 1e-4 and 200 epochs.
pub fn desk_detector_hyper(seed: u64) -> DetectorHyper {
    DetectorHyper { lr: 1e-3, max_epochs: 18, seed, ..DetectorHyper::default() }
}

/// Desk-scale defaults; full scale runs up to 1000 epochs.
pub fn desk_individual_hyper(seed: u64) -> LocHyper {
    LocHyper { max_epochs: 60, seed, ..LocHyper::individual() }
}

/// Desk-scale defaults; full scale runs up to 300 epochs.
pub fn desk_cooperative_hyper(seed: u64) -> LocHyper {
    LocHyper { max_epochs: 60, seed, ..LocHyper::cooperative() }
}

fn apply_overrides(common: &TrainCommon, lr: &mut f64, batch: &mut usize, epochs: &mut usize) -> Result<()> {
    if let Some(v) = common.lr {
        *lr = v;
    }
    if let Some(v) = common.batch_size {
        *batch = v;
    }
    if let Some(v) = common.epochs {
        *epochs = v;
    }
    if !(*lr > 0.0 && lr.is_finite()) || *batch == 0 || *epochs == 0 {
        return Err(Error::InvalidArgument("--lr, --batch-size and --epochs must be positive".into()));
    }
    Ok(())
}

fn progress(stage: &'static str) -> impl FnMut(&crate::tensornet::schedule::EpochLog) {
    move |l| {
        eprintln!(
            "{stage} epoch {:>3}  train {:.5}  val {:.5}  lr {:.1e}",
            l.epoch, l.train_loss, l.val_loss, l.lr
        )
    }
}

pub fn cmd_train_detect(a: &TrainDetectArgs) -> Result<RunManifest> {
    let c = &a.common;
    if let Some(m) = check_resume(c, "train-detect")? {
        return Ok(m);
    }
    let s = c.scenario.load()?;
    let mut hyper = desk_detector_hyper(c.seed);
    apply_overrides(c, &mut hyper.lr, &mut hyper.batch_size, &mut hyper.max_epochs)?;
    let (train, th) = load_prepared(&c.train, &s)?;
    let (val, vh) = load_prepared(&c.val, &s)?;
    create_dir(&c.out)?;
    eprintln!("train-detect: {hyper:?}");
    let config = DetectorConfig::for_map([s.n_rx(), s.n_tx(), s.delay_keep]);
    let (det, report) = train_detector(&examples(&train), &examples(&val), config, &hyper, progress("detect"))?;

    let mut manifest = RunManifest::new("train-detect", &s);
    manifest.datasets = vec![th, vh];
    manifest.seeds.insert("seed".into(), c.seed);
    let ck = c.out.join(DETECTOR_FILE);
    det.save(&ck)?;
    let curve = c.out.join("detector_curve.csv");
    write_curve_csv(&curve, &report.curve)?;
    manifest.add_artifact(&ck)?;
    manifest.add_artifact(&curve)?;
    manifest.metrics = serde_json::json!({
        "hyper": hyper,
        "best_epoch": report.best_epoch,
        "best_val_loss": report.best_val_loss,
        "epochs_run": report.curve.len(),
    });
    manifest.write(&c.out)?;
    Ok(manifest)
}

/// Individual-localizer training pairs of a split.
fn individual_examples<'a>(
    samples: &'a [PreparedSample],
    sel: &[(usize, Vec<PairId>)],
) -> Result<Vec<(&'a AngleDelayMap, Point3)>> {
    let mut out = Vec::new();
    for (i, pairs) in sel {
        let truth = samples[*i].uav_position.expect("selections hold UAV samples");
        for p in pairs {
            out.push((samples[*i].map_of(*p)?, truth));
        }
    }
    Ok(out)
}

pub fn cmd_train_loc_individual(a: &TrainLocIndividualArgs) -> Result<RunManifest> {
    let c = &a.common;
    if let Some(m) = check_resume(c, "train-loc-individual")? {
        return Ok(m);
    }
    let s = c.scenario.load()?;
    let source = a.select.source()?;
    let mut hyper = desk_individual_hyper(c.seed);
    apply_overrides(c, &mut hyper.lr, &mut hyper.batch_size, &mut hyper.max_epochs)?;
    let det = Detector::load(&a.detector)?;
    let (train, th) = load_prepared(&c.train, &s)?;
    let (val, vh) = load_prepared(&c.val, &s)?;
    let train_sel = selections(&train, &detect_all(&det, &train)?, source)?;
    let val_sel = selections(&val, &detect_all(&det, &val)?, source)?;
    let tr = individual_examples(&train, &train_sel)?;
    let va = individual_examples(&val, &val_sel)?;
    create_dir(&c.out)?;
    eprintln!("train-loc-individual: {} train maps, {} val maps, {hyper:?}", tr.len(), va.len());
    let mut config = LocatorConfig::for_map([s.n_rx(), s.n_tx(), s.delay_keep], s.uav_xy_range);
    config.tap = a.tap.clone();
    config.validate().map_err(usage)?;
    let (loc, report) = train_individual(&tr, &va, config, &hyper, progress("individual"))?;

    let mut manifest = RunManifest::new("train-loc-individual", &s);
    manifest.datasets = vec![th, vh, FileHash::of(&a.detector)?];
    manifest.seeds.insert("seed".into(), c.seed);
    let ck = c.out.join(LOCATOR_FILE);
    loc.save(&ck)?;
    let curve = c.out.join("locator_curve.csv");
    write_curve_csv(&curve, &report.curve)?;
    manifest.add_artifact(&ck)?;
    manifest.add_artifact(&curve)?;
    manifest.metrics = serde_json::json!({
        "hyper": hyper,
        "selection": source.name(),
        "selection_config": source.config(),
        "train_maps": tr.len(),
        "best_epoch": report.best_epoch,
        "best_val_loss": report.best_val_loss,
        "initial_val_loss": report.initial_val_loss,
    });
    manifest.write(&c.out)?;
    Ok(manifest)
}

/// Medium and soft token sets for the UAV samples of a split, given the
/// selections and the locator outputs for them.
fn fusion_sets(
    samples: &[PreparedSample],
    sel: &[(usize, Vec<PairId>)],
    located: &[Vec<(Point3, Vec<f64>)>],
    scale: f64,
    with_soft: bool,
) -> Result<(Vec<(TokenSet, Point3)>, Vec<(TokenSet, Point3)>)> {
    let mut medium = Vec::with_capacity(sel.len());
    let mut soft = Vec::new();
    for ((i, pairs), est) in sel.iter().zip(located) {
        let truth = samples[*i].uav_position.expect("selections hold UAV samples");
        medium.push((fusion_input(pairs, est).tokens(scale)?, truth));
        if with_soft {
            let maps = pairs.iter().map(|p| samples[*i].map_of(*p)).collect::<Result<Vec<_>>>()?;
            let idx: Vec<usize> = pairs.iter().map(|p| p.flat).collect();
            soft.push((soft_tokens(&maps, &idx)?, truth));
        }
    }
    Ok((medium, soft))
}

/// Out-of-fold locator outputs: selection `j` is located by a locator
/// trained on every selection outside fold `j % folds`.
fn cross_fit_locate(
    config: &LocatorConfig,
    hyper: &LocHyper,
    samples: &[PreparedSample],
    sel: &[(usize, Vec<PairId>)],
    val: &[(&AngleDelayMap, Point3)],
    folds: usize,
) -> Result<Vec<Vec<(Point3, Vec<f64>)>>> {
    let mut located = vec![Vec::new(); sel.len()];
    for f in 0..folds {
        let (held, kept): (Vec<_>, Vec<_>) = sel.iter().cloned().enumerate().partition(|(j, _)| j % folds == f);
        let kept: Vec<_> = kept.into_iter().map(|(_, s)| s).collect();
        let train = individual_examples(samples, &kept)?;
        if train.is_empty() || held.is_empty() {
            return Err(Error::InvalidArgument(format!("{} UAV samples cannot fill {folds} folds", sel.len())));
        }
        let fold_hyper = LocHyper { seed: hyper.seed.wrapping_add(1 + f as u64), ..hyper.clone() };
        eprintln!("fold {f}: {} train maps", train.len());
        let (loc, _) = train_individual(&train, val, config.clone(), &fold_hyper, progress("fold"))?;
        let held_sel: Vec<_> = held.iter().map(|(_, s)| s.clone()).collect();
        for ((j, _), out) in held.iter().zip(locate_selected(&loc, samples, &held_sel)?) {
            located[*j] = out;
        }
    }
    Ok(located)
}

pub fn cmd_train_loc_coop(a: &TrainLocCoopArgs) -> Result<RunManifest> {
    let c = &a.common;
    if let Some(m) = check_resume(c, "train-loc-coop")? {
        return Ok(m);
    }
    let s = c.scenario.load()?;
    let source = a.select.source()?;
    let mut hyper = desk_cooperative_hyper(c.seed);
    apply_overrides(c, &mut hyper.lr, &mut hyper.batch_size, &mut hyper.max_epochs)?;
    let det = Detector::load(&a.detector)?;
    let loc = Locator::load(&a.locator)?;
    let (train, th) = load_prepared(&c.train, &s)?;
    let (val, vh) = load_prepared(&c.val, &s)?;
    let train_sel = selections(&train, &detect_all(&det, &train)?, source)?;
    let val_sel = selections(&val, &detect_all(&det, &val)?, source)?;
    let val_located = locate_selected(&loc, &val, &val_sel)?;
    let train_located = if a.folds > 1 {
        let mut fold_hyper = desk_individual_hyper(c.seed);
        if let Some(e) = a.fold_epochs {
            fold_hyper.max_epochs = e;
        }
        fold_hyper.validate().map_err(usage)?;
        let va = individual_examples(&val, &val_sel)?;
        cross_fit_locate(&loc.config, &fold_hyper, &train, &train_sel, &va, a.folds)?
    } else {
        locate_selected(&loc, &train, &train_sel)?
    };
    let scale = loc.config.position_scale;
    let (tr_m, tr_s) = fusion_sets(&train, &train_sel, &train_located, scale, a.baselines)?;
    let (va_m, va_s) = fusion_sets(&val, &val_sel, &val_located, scale, a.baselines)?;
    create_dir(&c.out)?;

    let mut manifest = RunManifest::new("train-loc-coop", &s);
    manifest.datasets = vec![th, vh, FileHash::of(&a.detector)?, FileHash::of(&a.locator)?];
    manifest.seeds.insert("seed".into(), c.seed);
    let mut metrics = serde_json::Map::new();
    metrics.insert("hyper".into(), serde_json::to_value(&hyper)?);
    metrics.insert("selection".into(), source.name().into());
    metrics.insert("folds".into(), a.folds.into());

    eprintln!("train-loc-coop: {} train sets, {hyper:?}", tr_m.len());
    let cfg = FusionConfig::medium(s.n_pairs(), loc.feature_dim(), s.uav_xy_range);
    let (net, report) = train_fusion(&tr_m, &va_m, cfg, &hyper, progress("cooperative"))?;
    let ck = c.out.join(COOP_FILE);
    net.to_checkpoint("c-ulocnet").save(&ck)?;
    let curve = c.out.join("c-ulocnet_curve.csv");
    write_curve_csv(&curve, &report.curve)?;
    manifest.add_artifact(&ck)?;
    manifest.add_artifact(&curve)?;
    metrics.insert("cooperative_best_val_loss".into(), report.best_val_loss.into());

    if a.baselines {
        let map_len = s.n_rx() * s.n_tx() * s.delay_keep;
        let cfg = FusionConfig::new(s.n_pairs(), map_len, s.uav_xy_range);
        let (net, report) = train_fusion(&tr_s, &va_s, cfg, &hyper, progress("soft"))?;
        let ck = c.out.join(SOFT_FILE);
        net.to_checkpoint("soft-fusion").save(&ck)?;
        let curve = c.out.join("soft-fusion_curve.csv");
        write_curve_csv(&curve, &report.curve)?;
        manifest.add_artifact(&ck)?;
        manifest.add_artifact(&curve)?;
        metrics.insert("soft_best_val_loss".into(), report.best_val_loss.into());
    }
    manifest.metrics = serde_json::Value::Object(metrics);
    manifest.write(&c.out)?;
    Ok(manifest)
}

/// Everything `eval` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub detection: DetectionMetrics,
    pub attention_label_pearson: Option<f64>,
    pub selection: SelectionConfig,
    pub mean_selected: f64,
    pub fallback_count: usize,
    /// APE statistics by variant: cooperative, hard, soft, label-selected,
    /// individual and scene-center.
    pub localization: BTreeMap<String, ApeStats>,
    pub reliability: Vec<ReliabilityRow>,
}

pub const VARIANT_COOPERATIVE: &str = "cooperative";
pub const VARIANT_HARD: &str = "hard";
pub const VARIANT_SOFT: &str = "soft";
pub const VARIANT_LABEL: &str = "label-selected";
pub const VARIANT_INDIVIDUAL: &str = "individual";
pub const VARIANT_CENTER: &str = "scene-center";

pub fn cmd_eval(a: &EvalArgs) -> Result<RunManifest> {
    let s = a.scenario.load()?;
    let cfg = SelectionConfig::new(a.k, a.sigma_att).map_err(usage)?;
    let det = Detector::load(&a.detector)?;
    let loc_path = a.localizers.join(LOCATOR_FILE);
    let coop_path = a.localizers.join(COOP_FILE);
    let soft_path = a.localizers.join(SOFT_FILE);
    let loc = Locator::load(&loc_path)?;
    let coop = FusionNet::from_checkpoint(&crate::tensornet::Checkpoint::load(&coop_path)?)?;
    let soft = if soft_path.exists() {
        Some(FusionNet::from_checkpoint(&crate::tensornet::Checkpoint::load(&soft_path)?)?)
    } else if a.baselines {
        return Err(Error::InvalidArgument(format!("--baselines needs {}", soft_path.display())));
    } else {
        None
    };
    let (samples, dh) = load_prepared(&a.dataset, &s)?;
    create_dir(&a.out)?;

    let detected = detect_all(&det, &samples)?;
    let preds: Vec<u8> = detected.iter().map(|(l, _)| *l).collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.example.scene_label).collect();
    let detection = detection_metrics(&preds, &labels)?;

    let mut att_rows = Vec::new();
    for (smp, (_, r)) in samples.iter().zip(&detected) {
        att_rows.extend(AttentionRow::from_report(smp.index, r, Some(&smp.pair_labels)));
    }
    let uav: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].uav_position.is_some()).collect();
    let uav_reports: Vec<AttentionReport> = uav.iter().map(|&i| detected[i].1.clone()).collect();
    let uav_labels: Vec<Vec<bool>> = uav.iter().map(|&i| samples[i].pair_labels.clone()).collect();
    let by_slot = |r: &AttentionReport, n: usize| {
        let mut w = vec![0.0; n];
        for (p, x) in r.pairs.iter().zip(&r.weights) {
            w[p.slot()] = *x;
        }
        w
    };
    let weights: Vec<Vec<f64>> = uav_reports.iter().map(|r| by_slot(r, s.n_pairs())).collect();
    let attention_label_pearson = if uav.is_empty() {
        None
    } else {
        attention_label_correlation(&weights, &uav_labels).ok()
    };
    let reliability = if uav.is_empty() {
        Vec::new()
    } else {
        reliability_sweep(&uav_reports, &uav_labels, a.k, &SIGMA_GRID)?
    };

    // Localization over every UAV sample.
    let att = selections(&samples, &detected, PairSource::Attention(cfg))?;
    let lab = selections(&samples, &detected, PairSource::Labels(cfg))?;
    let att_loc = locate_selected(&loc, &samples, &att)?;
    let lab_loc = locate_selected(&loc, &samples, &lab)?;
    let fallback_count = att
        .iter()
        .filter(|(i, _)| select_pairs(&detected[*i].1, &cfg).map(|x| x.fallback).unwrap_or(false))
        .count();
    let mean_selected = if att.is_empty() {
        0.0
    } else {
        att.iter().map(|(_, p)| p.len()).sum::<usize>() as f64 / att.len() as f64
    };

    let center = Point3::new(0.0, 0.0, s.uav_altitude);
    let mut traces: BTreeMap<&str, Vec<TraceRow>> = BTreeMap::new();
    for (((i, pairs), est), ((_, lpairs), lest)) in att.iter().zip(&att_loc).zip(lab.iter().zip(&lab_loc)) {
        let smp = &samples[*i];
        let truth = smp.uav_position.expect("selections hold UAV samples");
        let idx: Vec<usize> = pairs.iter().map(|p| p.flat).collect();
        let points: Vec<Point3> = est.iter().map(|(p, _)| *p).collect();
        let mut push = |variant: &'static str, idx: &[usize], pts: &[Point3], fused: Point3| {
            traces
                .entry(variant)
                .or_default()
                .push(TraceRow::new(smp.index, variant, idx, pts, &fused, &truth));
        };
        push(VARIANT_COOPERATIVE, &idx, &points, coop.fuse(&fusion_input(pairs, est))?);
        push(VARIANT_HARD, &idx, &points, hard_fusion(&points)?);
        if let Some(net) = &soft {
            let maps = pairs.iter().map(|p| smp.map_of(*p)).collect::<Result<Vec<_>>>()?;
            push(VARIANT_SOFT, &idx, &points, net.predict(&soft_tokens(&maps, &idx)?)?);
        }
        let lidx: Vec<usize> = lpairs.iter().map(|p| p.flat).collect();
        let lpoints: Vec<Point3> = lest.iter().map(|(p, _)| *p).collect();
        push(VARIANT_LABEL, &lidx, &lpoints, coop.fuse(&fusion_input(lpairs, lest))?);
        push(VARIANT_CENTER, &[], &[], center);
        for (pair, p) in idx.iter().zip(&points) {
            push(VARIANT_INDIVIDUAL, std::slice::from_ref(pair), std::slice::from_ref(p), *p);
        }
    }

    let mut manifest = RunManifest::new("eval", &s);
    manifest.datasets = vec![dh, FileHash::of(&a.detector)?, FileHash::of(&loc_path)?, FileHash::of(&coop_path)?];
    if soft.is_some() {
        manifest.datasets.push(FileHash::of(&soft_path)?);
    }
    let mut localization = BTreeMap::new();
    for (variant, rows) in &traces {
        let apes: Vec<f64> = rows.iter().map(|r| r.ape).collect();
        let stats = ape_stats(&apes)?;
        let trace = a.out.join(format!("trace_{variant}.csv"));
        write_trace_csv(&trace, rows)?;
        let cdf = a.out.join(format!("cdf_{variant}.csv"));
        write_cdf_csv(&cdf, &stats.cdf(&stats.default_grid(0.5)))?;
        manifest.add_artifact(&trace)?;
        manifest.add_artifact(&cdf)?;
        localization.insert(variant.to_string(), stats);
    }

    let report = EvalReport {
        samples: samples.len(),
        detection,
        attention_label_pearson,
        selection: cfg,
        mean_selected,
        fallback_count,
        localization,
        reliability,
    };
    let report_path = a.out.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
    let rel_path = a.out.join("reliability.csv");
    write_reliability_csv(&rel_path, &report.reliability)?;
    let att_path = a.out.join("attention.csv");
    write_attention_csv(&att_path, &att_rows)?;
    for p in [&report_path, &rel_path, &att_path] {
        manifest.add_artifact(p)?;
    }
    manifest.metrics = serde_json::to_value(&report)?;
    manifest.write(&a.out)?;
    print_summary(&report);
    Ok(manifest)
}

fn print_summary(r: &EvalReport) {
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}%", 100.0 * x));
    eprintln!("detection: MDP {} FAP {}", pct(r.detection.mdp), pct(r.detection.fap));
    for (name, st) in &r.localization {
        eprintln!("{name:>15}: mean {:.2} m  p95 {:.2} m  (n={})", st.mean, st.p95, st.count);
    }
}

/// Parses `m:n` against the scenario.
pub fn parse_pair(text: &str, s: &Scenario) -> Result<PairId> {
    let bad = || Error::InvalidArgument(format!("pair `{text}` is not m:n within {} BS and {} CPE", s.n_bs(), s.n_cpe()));
    let (m, n) = text.split_once(':').ok_or_else(bad)?;
    let m: usize = m.trim().parse().map_err(|_| bad())?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if m == 0 || m > s.n_bs() || n == 0 || n > s.n_cpe() {
        return Err(bad());
    }
    PairId::new(m, n, s.n_cpe()).map_err(|_| bad())
}

pub fn cmd_region_map(a: &RegionMapArgs) -> Result<RunManifest> {
    let s = a.scenario.load()?;
    let pairs = a.pair.iter().map(|p| parse_pair(p, &s)).collect::<Result<Vec<_>>>()?;
    let mode = match a.mode {
        ModeArg::Union => RegionMode::Union,
        ModeArg::Intersection => RegionMode::Intersection,
    };
    let hash = FileHash::of(&a.dataset)?;
    let mut reader = DatasetReader::open(&a.dataset)?;
    reader.header().check_matches(&s)?;
    let mut rows = Vec::new();
    while let Some(rec) = reader.next_record() {
        let rec = rec?;
        rows.push((rec.uav_position, rec.pair_labels));
    }
    let range = a.range.unwrap_or(s.uav_xy_range);
    let map = sensing_region_map(
        rows.iter().map(|(p, l)| (p.as_ref(), l.as_slice())),
        &pairs,
        mode,
        range,
        a.res,
    )
    .map_err(|e| match e {
        Error::InvalidArgument(_) => e,
        Error::Empty(_) => usage(e),
        other => other,
    })?;
    create_dir(&a.out)?;
    let tag: Vec<String> = pairs.iter().map(|p| format!("{}-{}", p.m, p.n)).collect();
    let suffix = if pairs.len() > 1 {
        match mode {
            RegionMode::Union => "_union",
            RegionMode::Intersection => "_intersection",
        }
    } else {
        ""
    };
    let stem = format!("region_{}{suffix}", tag.join("_"));
    let mut manifest = RunManifest::new("region-map", &s);
    manifest.datasets = vec![hash];
    for f in map.write_files(&a.out, &stem)? {
        manifest.add_artifact(&f)?;
    }
    manifest.metrics = serde_json::json!({
        "pairs": a.pair,
        "mass": map.total(),
        "cells_per_side": map.cells_per_side,
        "resolution": a.res,
        "range": range,
    });
    manifest.write(&a.out)?;
    Ok(manifest)
}

pub fn cmd_dump_ad(a: &DumpAdArgs) -> Result<RunManifest> {
    let s = a.scenario.load()?;
    let only = a.pair.as_deref().map(|p| parse_pair(p, &s)).transpose()?;
    let hash = FileHash::of(&a.dataset)?;
    let mut reader = DatasetReader::open(&a.dataset)?;
    reader.header().check_matches(&s)?;
    let count = reader.header().count;
    if a.sample >= count {
        return Err(Error::InvalidArgument(format!("sample {} outside 0..{count}", a.sample)));
    }
    let mut found = None;
    for _ in 0..=a.sample {
        found = reader.next_record().transpose()?;
    }
    let rec = found.ok_or(Error::Empty("dataset records"))?;
    let ex = DetectionExample::from_record(&rec, s.delay_keep)?;
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("dump-ad", &s);
    manifest.datasets = vec![hash];
    for (pair, map) in ex.pairs.iter().zip(&ex.maps) {
        if only.is_some_and(|p| p != *pair) {
            continue;
        }
        let stem = format!("ad_s{}_{}-{}", a.sample, pair.m, pair.n);
        let csv_path = a.out.join(format!("{stem}.csv"));
        write_map_csv(&csv_path, map)?;
        manifest.add_artifact(&csv_path)?;
        for f in dump_map_pgm(map, &a.out, &stem)? {
            manifest.add_artifact(&f)?;
        }
    }
    manifest.metrics = serde_json::json!({
        "sample": a.sample,
        "scene_label": rec.scene_label,
        "pair_labels": rec.pair_labels,
    });
    manifest.write(&a.out)?;
    Ok(manifest)
}

/// Long-format CSV: `rx, tx, delay, value`.
fn write_map_csv(path: &Path, map: &AngleDelayMap) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::tensornet::schedule::csv_err(path, e))?;
    let [a, b, c, _] = map.dims;
    w.write_record(["rx", "tx", "delay", "value"])
        .map_err(|e| crate::tensornet::schedule::csv_err(path, e))?;
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let v = map.data[(i * b + j) * c + k];
                w.write_record([i.to_string(), j.to_string(), k.to_string(), format!("{v:.9e}")])
                    .map_err(|e| crate::tensornet::schedule::csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
