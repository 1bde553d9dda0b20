//! Command-line front end: run-config resolution, the six subcommands, and
//! the exit-code contract (0 ok, 1 usage, 2 data, 3 internal).

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::datatools::{
    fnv1a64, heatmap_grid, read_countries, read_image_records, sample_locations,
    split_by_photographer, write_image_records, DistributionStats, ImageRecord,
};
use crate::error::{Error, Result};
use crate::geocell::{
    build_stack, partition_file_hash, read_partition, write_partition, GeoPoint, PartitionStack,
    DEFAULT_T_MAX, DEFAULT_T_MIN,
};
use crate::geodecoder::{
    load_checkpoint, save_checkpoint, EncoderConfig, GeoDecoder, ModelConfig, ModelInput,
    TrainState,
};
use crate::inference::{
    check_model_matches_stack, evaluate, haversine_km, predict, threshold_hits, EvalReport,
    Prediction,
};
use crate::numerics::{backward, Sgd, SgdConfig, Tensor};

fn default_seed() -> u64 {
    42
}
fn default_threads() -> usize {
    1
}
fn default_epochs() -> usize {
    40
}
fn default_batch_size() -> usize {
    512
}
fn default_true() -> bool {
    true
}

/// Input and output locations; commands fall back to these when the
/// corresponding flag is absent.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub countries: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionParams {
    #[serde(default = "default_t_min_param")]
    pub t_min: usize,
    #[serde(default = "default_t_max_param")]
    pub t_max: Vec<usize>,
}

fn default_t_min_param() -> usize {
    DEFAULT_T_MIN
}
fn default_t_max_param() -> Vec<usize> {
    DEFAULT_T_MAX.to_vec()
}

impl Default for PartitionParams {
    fn default() -> Self {
        PartitionParams {
            t_min: default_t_min_param(),
            t_max: default_t_max_param(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Upper bound; the effective batch is min(batch_size, dataset size).
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            shuffle: true,
        }
    }
}

/// Where per-image model inputs come from. The synthetic kinds derive each
/// image's tensor from a hash of its id, so any metadata file is usable
/// without pixel data.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSource {
    SyntheticTokens {
        tokens: usize,
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    SyntheticImages {
        size: usize,
        #[serde(default)]
        seed: u64,
    },
    TokenFile {
        path: PathBuf,
    },
}

/// The full run configuration. Unknown keys are rejected so config typos
/// fail loudly instead of silently training the wrong model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub partition: PartitionParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub optimizer: SgdConfig,
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureSource>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: default_seed(),
            strict: false,
            threads: default_threads(),
            paths: PathsConfig::default(),
            partition: PartitionParams::default(),
            model: None,
            optimizer: SgdConfig::default(),
            train: TrainParams::default(),
            features: None,
        }
    }
}

/// A run configuration after file loading, flag overrides, and validation,
/// together with its identity hash. The hash is embedded in every output
/// file so artifacts can be traced back to the exact settings.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub hash: String,
}

impl Resolved {
    pub fn new(config: RunConfig) -> Result<Resolved> {
        if let Some(model) = &config.model {
            model.validate()?;
        }
        let canonical = serde_json::to_string(&config)
            .map_err(|e| Error::internal(format!("config serialization: {e}")))?;
        let mut hash = String::with_capacity(64);
        for b in Sha256::digest(canonical.as_bytes()) {
            hash.push_str(&format!("{b:02x}"));
        }
        Ok(Resolved { config, hash })
    }

    fn with_epochs(&self, epochs: usize) -> Result<Resolved> {
        let mut config = self.config.clone();
        config.train.epochs = epochs;
        Resolved::new(config)
    }
}

/// Loads the config file (if any) and applies command-line overrides.
/// Strict mode forces a single thread so runs are bit-reproducible.
pub fn resolve(
    config_path: Option<&Path>,
    seed: Option<u64>,
    strict: bool,
    threads: Option<usize>,
) -> Result<Resolved> {
    let mut config = match config_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<RunConfig>(&text)
                .map_err(|e| Error::usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    if strict {
        config.strict = true;
    }
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::usage("--threads must be at least 1"));
        }
        config.threads = t;
    }
    if config.strict {
        config.threads = 1;
    }
    Resolved::new(config)
}

#[derive(Parser, Debug)]
#[command(
    name = "geoloc",
    version,
    about = "Worldwide image geo-localization: partitioning, training, evaluation, sampling"
)]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    strict: bool,
    /// Worker threads for evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a nested geocell partition from image metadata.
    Partition {
        #[arg(long)]
        metadata: Option<PathBuf>,
        /// Output partition file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-hierarchy split thresholds, strictly decreasing.
        #[arg(long, value_delimiter = ',')]
        t_max: Option<Vec<usize>>,
        /// Minimum images for a cell to become a class.
        #[arg(long)]
        t_min: Option<usize>,
    },
    /// Train the decoder; writes per-epoch checkpoints and a loss log.
    Train {
        /// Continue from <out_dir>/latest.ckpt.
        #[arg(long)]
        resume: bool,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Hold out this fraction of photographers before training.
        #[arg(long)]
        holdout: Option<f64>,
    },
    /// Score a checkpoint against labeled metadata.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[arg(long)]
        partition: Option<PathBuf>,
        /// Directory for report.json and predictions.jsonl.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Average predictions over ten crops per image.
        #[arg(long)]
        tencrop: bool,
    },
    /// Predict locations without scoring.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[arg(long)]
        partition: Option<PathBuf>,
        /// Output JSONL file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        tencrop: bool,
    },
    /// Sample an area-weighted location manifest from a city database.
    Sample {
        #[arg(long)]
        countries: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report Gini/Lorenz inequality and a location heatmap for a dataset.
    Bias {
        #[arg(long)]
        metadata: Option<PathBuf>,
        /// City database used for nearest-city assignment.
        #[arg(long)]
        countries: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 18)]
        lat_bins: usize,
        #[arg(long, default_value_t = 36)]
        lon_bins: usize,
    },
}

/// Entry point behind the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is a
            // usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let resolved = resolve(cli.config.as_deref(), cli.seed, cli.strict, cli.threads)?;
    log_resolved(&resolved)?;
    match cli.command {
        Command::Partition {
            metadata,
            out,
            t_max,
            t_min,
        } => {
            let metadata = require_path(metadata, &resolved.config.paths.metadata, "--metadata")?;
            let out = require_path(out, &resolved.config.paths.partition, "--out")?;
            let t_max = t_max.unwrap_or_else(|| resolved.config.partition.t_max.clone());
            let t_min = t_min.unwrap_or(resolved.config.partition.t_min);
            cmd_partition(&resolved, &metadata, &out, t_min, &t_max)
        }
        Command::Train {
            resume,
            epochs,
            holdout,
        } => cmd_train(&resolved, resume, epochs, holdout).map(|_| ()),
        Command::Eval {
            checkpoint,
            metadata,
            partition,
            out_dir,
            tencrop,
        } => {
            let paths = &resolved.config.paths;
            let checkpoint = require_path(checkpoint, &default_ckpt(paths), "--checkpoint")?;
            let metadata = require_path(metadata, &paths.metadata, "--metadata")?;
            let partition = require_path(partition, &paths.partition, "--partition")?;
            let out_dir = require_path(out_dir, &paths.out_dir, "--out-dir")?;
            cmd_eval(&resolved, &checkpoint, &metadata, &partition, &out_dir, tencrop).map(|_| ())
        }
        Command::Predict {
            checkpoint,
            metadata,
            partition,
            out,
            tencrop,
        } => {
            let paths = &resolved.config.paths;
            let checkpoint = require_path(checkpoint, &default_ckpt(paths), "--checkpoint")?;
            let metadata = require_path(metadata, &paths.metadata, "--metadata")?;
            let partition = require_path(partition, &paths.partition, "--partition")?;
            let default_out = paths.out_dir.as_ref().map(|d| d.join("predictions.jsonl"));
            let out = require_path(out, &default_out, "--out")?;
            cmd_predict(&resolved, &checkpoint, &metadata, &partition, &out, tencrop)
        }
        Command::Sample {
            countries,
            count,
            out,
        } => {
            let countries =
                require_path(countries, &resolved.config.paths.countries, "--countries")?;
            let default_out = resolved
                .config
                .paths
                .out_dir
                .as_ref()
                .map(|d| d.join("manifest.jsonl"));
            let out = require_path(out, &default_out, "--out")?;
            cmd_sample(&resolved, &countries, count, &out)
        }
        Command::Bias {
            metadata,
            countries,
            out_dir,
            lat_bins,
            lon_bins,
        } => {
            let paths = &resolved.config.paths;
            let metadata = require_path(metadata, &paths.metadata, "--metadata")?;
            let countries = require_path(countries, &paths.countries, "--countries")?;
            let out_dir = require_path(out_dir, &paths.out_dir, "--out-dir")?;
            cmd_bias(&resolved, &metadata, &countries, &out_dir, lat_bins, lon_bins)
        }
    }
}

fn default_ckpt(paths: &PathsConfig) -> Option<PathBuf> {
    paths.out_dir.as_ref().map(|d| d.join("latest.ckpt"))
}

fn require_path(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::usage(format!("missing {name} (flag or config [paths] entry)")))
}

/// Every run logs its identity hash and fully-resolved settings to stderr.
fn log_resolved(r: &Resolved) -> Result<()> {
    eprintln!("config {}", r.hash);
    let text = toml::to_string_pretty(&r.config)
        .map_err(|e| Error::internal(format!("config serialization: {e}")))?;
    for line in text.lines() {
        eprintln!("  {line}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Features

/// Materialized feature source; synthetic kinds stay lazy, token files are
/// loaded once.
#[derive(Debug)]
enum FeatureProvider {
    Tokens { tokens: usize, dim: usize, seed: u64 },
    Images { size: usize, seed: u64 },
    File { map: HashMap<String, Tensor>, dim: Option<usize> },
}

impl FeatureProvider {
    fn load(source: &FeatureSource) -> Result<FeatureProvider> {
        match source {
            FeatureSource::SyntheticTokens { tokens, dim, seed } => {
                if *tokens == 0 || *dim == 0 {
                    return Err(Error::usage("synthetic_tokens needs tokens and dim >= 1"));
                }
                Ok(FeatureProvider::Tokens {
                    tokens: *tokens,
                    dim: *dim,
                    seed: *seed,
                })
            }
            FeatureSource::SyntheticImages { size, seed } => {
                if *size == 0 {
                    return Err(Error::usage("synthetic_images needs size >= 1"));
                }
                Ok(FeatureProvider::Images {
                    size: *size,
                    seed: *seed,
                })
            }
            FeatureSource::TokenFile { path } => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct Row {
                    id: String,
                    tokens: Vec<Vec<f64>>,
                }
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let mut map = HashMap::new();
                let mut dim = None;
                for (idx, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let row: Row = serde_json::from_str(line)
                        .map_err(|e| Error::record(path, idx + 1, e.to_string()))?;
                    if row.tokens.is_empty() {
                        return Err(Error::record(path, idx + 1, "empty token list"));
                    }
                    let width = row.tokens[0].len();
                    if width == 0 || row.tokens.iter().any(|t| t.len() != width) {
                        return Err(Error::record(path, idx + 1, "ragged token rows"));
                    }
                    match dim {
                        None => dim = Some(width),
                        Some(d) if d != width => {
                            return Err(Error::record(
                                path,
                                idx + 1,
                                format!("token dim {width} differs from earlier {d}"),
                            ));
                        }
                        Some(_) => {}
                    }
                    if map
                        .insert(row.id.clone(), Tensor::from_rows(&row.tokens)?)
                        .is_some()
                    {
                        return Err(Error::record(
                            path,
                            idx + 1,
                            format!("duplicate id {}", row.id),
                        ));
                    }
                }
                Ok(FeatureProvider::File { map, dim })
            }
        }
    }

    /// Rejects source/encoder pairings the forward pass cannot consume.
    /// Exact image size is only demanded where no resize happens (training).
    fn check_compatible(&self, config: &ModelConfig, exact_image_size: bool) -> Result<()> {
        match (self, &config.encoder) {
            (FeatureProvider::Tokens { dim, .. }, EncoderConfig::Precomputed { input_dim }) => {
                if dim != input_dim {
                    return Err(Error::usage(format!(
                        "feature dim {dim} does not match the model's input_dim {input_dim}"
                    )));
                }
                Ok(())
            }
            (FeatureProvider::File { dim, .. }, EncoderConfig::Precomputed { input_dim }) => {
                if let Some(d) = dim {
                    if d != input_dim {
                        return Err(Error::data(format!(
                            "token file dim {d} does not match the model's input_dim {input_dim}"
                        )));
                    }
                }
                Ok(())
            }
            (FeatureProvider::Images { size, .. }, EncoderConfig::Patch { image_size, .. }) => {
                if exact_image_size && size != image_size {
                    return Err(Error::usage(format!(
                        "synthetic image size {size} does not match the model's image_size {image_size}"
                    )));
                }
                Ok(())
            }
            _ => Err(Error::usage(
                "feature source kind does not match the model encoder (tokens vs images)",
            )),
        }
    }

    fn input_for(&self, id: &str) -> Result<ModelInput> {
        match self {
            FeatureProvider::Tokens { tokens, dim, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(fnv1a64(id));
                Ok(ModelInput::Tokens(Tensor::randn(
                    vec![*tokens, *dim],
                    1.0,
                    &mut rng,
                )))
            }
            FeatureProvider::Images { size, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(fnv1a64(id));
                Ok(ModelInput::Image(Tensor::rand_uniform(
                    vec![3, *size, *size],
                    0.0,
                    1.0,
                    &mut rng,
                )))
            }
            FeatureProvider::File { map, .. } => map
                .get(id)
                .cloned()
                .map(ModelInput::Tokens)
                .ok_or_else(|| Error::data(format!("token file has no entry for image {id}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// partition

pub fn cmd_partition(
    r: &Resolved,
    metadata: &Path,
    out: &Path,
    t_min: usize,
    t_max: &[usize],
) -> Result<()> {
    let records = read_image_records(metadata)?;
    if records.is_empty() {
        eprintln!(
            "warning: {} holds no records; writing an empty partition",
            metadata.display()
        );
    }
    let points: Vec<GeoPoint> = records
        .iter()
        .map(|rec| rec.point())
        .collect::<Result<Vec<_>>>()?;
    let stack = build_stack(&points, t_max, t_min)?;
    for h in stack.hierarchies() {
        println!(
            "hierarchy {}: {} classes (t_max {})",
            h.level(),
            h.num_classes(),
            h.t_max()
        );
    }
    write_partition(out, &stack, Some(&r.hash))?;
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub latest_checkpoint: PathBuf,
}

struct TrainSet {
    inputs: Vec<ModelInput>,
    labels: Vec<Vec<Option<usize>>>,
    scenes: Vec<Option<usize>>,
}

fn build_train_set(
    records: &[ImageRecord],
    stack: &PartitionStack,
    provider: &FeatureProvider,
    num_scenes: usize,
) -> Result<TrainSet> {
    let mut set = TrainSet {
        inputs: Vec::new(),
        labels: Vec::new(),
        scenes: Vec::new(),
    };
    let mut skipped = 0usize;
    for rec in records {
        if num_scenes >= 1 && rec.scene_id >= num_scenes {
            return Err(Error::data(format!(
                "image {}: scene_id {} out of range for {} scenes",
                rec.id, rec.scene_id, num_scenes
            )));
        }
        let labels = stack.assign_labels(&rec.point()?);
        if labels.iter().any(|l| l.is_none()) {
            skipped += 1;
            continue;
        }
        set.inputs.push(provider.input_for(&rec.id)?);
        set.labels.push(labels);
        set.scenes
            .push(if num_scenes >= 1 { Some(rec.scene_id) } else { None });
    }
    if skipped > 0 {
        eprintln!(
            "warning: {skipped} of {} records fall outside the partition and were dropped",
            records.len()
        );
    }
    if set.inputs.is_empty() {
        return Err(Error::data("no training records fall inside the partition"));
    }
    Ok(set)
}

pub fn cmd_train(
    r: &Resolved,
    resume: bool,
    epochs_override: Option<usize>,
    holdout: Option<f64>,
) -> Result<TrainSummary> {
    let resolved_override;
    let r = match epochs_override {
        Some(n) => {
            resolved_override = r.with_epochs(n)?;
            &resolved_override
        }
        None => r,
    };
    let cfg = &r.config;
    let model_cfg = cfg
        .model
        .clone()
        .ok_or_else(|| Error::usage("train needs a [model] section in the config"))?;
    let source = cfg
        .features
        .as_ref()
        .ok_or_else(|| Error::usage("train needs a [features] section in the config"))?;
    let metadata = require_path(None, &cfg.paths.metadata, "[paths].metadata")?;
    let partition_path = require_path(None, &cfg.paths.partition, "[paths].partition")?;
    let out_dir = require_path(None, &cfg.paths.out_dir, "[paths].out_dir")?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let stack = read_partition(&partition_path)?;
    let partition_hash = partition_file_hash(&partition_path)?;
    let provider = FeatureProvider::load(source)?;
    provider.check_compatible(&model_cfg, true)?;

    let mut records = read_image_records(&metadata)?;
    if let Some(fraction) = holdout {
        let (train, test) = split_by_photographer(&records, fraction, cfg.seed);
        write_image_records(&out_dir.join("holdout.jsonl"), &test)?;
        eprintln!(
            "holdout: {} train records, {} held out to holdout.jsonl",
            train.len(),
            test.len()
        );
        records = train;
    }
    let set = build_train_set(&records, &stack, &provider, model_cfg.scenes)?;

    let mut model = GeoDecoder::new(model_cfg, cfg.seed)?;
    check_model_matches_stack(&model, &stack)?;
    let mut opt = Sgd::new(cfg.optimizer.clone());
    let mut start_epoch = 0usize;
    let mut global_step = 0usize;
    let latest = out_dir.join("latest.ckpt");

    if resume {
        let (loaded, meta) = load_checkpoint(&latest)?;
        if meta.config_hash != r.hash {
            return Err(Error::data(format!(
                "checkpoint config hash {} does not match this run's {}",
                meta.config_hash, r.hash
            )));
        }
        if meta.partition_hash != partition_hash {
            return Err(Error::data(
                "checkpoint was trained against a different partition file",
            ));
        }
        let state = meta
            .train_state
            .ok_or_else(|| Error::data("checkpoint carries no training state to resume"))?;
        model = loaded;
        opt.restore_buffers(state.buffers);
        start_epoch = state.epoch;
        global_step = state.step;
        eprintln!("resuming after epoch {start_epoch} (step {global_step})");
    }

    fs::write(
        out_dir.join("resolved_config.toml"),
        toml::to_string_pretty(cfg).map_err(|e| Error::internal(e.to_string()))?,
    )
    .map_err(|e| Error::io(out_dir.join("resolved_config.toml"), e))?;

    let log_path = out_dir.join("loss_log.jsonl");
    if !resume {
        // A fresh run owns the log; stale records from earlier runs would
        // corrupt loss curves.
        let _ = fs::remove_file(&log_path);
    }
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let fresh_log = log
        .metadata()
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    if fresh_log {
        writeln!(log, "{}", json!({ "config_hash": r.hash }))
            .map_err(|e| Error::io(&log_path, e))?;
    }

    let n = set.inputs.len();
    let batch_size = cfg.train.batch_size.min(n).max(1);
    let epochs = cfg.train.epochs;
    let mut final_loss = f64::NAN;
    for epoch in start_epoch..epochs {
        opt.set_epoch(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        if cfg.train.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1_000_000 + epoch as u64);
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let inputs: Vec<ModelInput> =
                chunk.iter().map(|&i| set.inputs[i].clone()).collect();
            let outputs = model.forward_batch(&inputs)?;
            let mut total: Option<Tensor> = None;
            for (k, out) in outputs.iter().enumerate() {
                let i = chunk[k];
                let sample = model.loss(out, &set.labels[i], set.scenes[i])?;
                total = Some(match total {
                    Some(t) => t.add(&sample)?,
                    None => sample,
                });
            }
            let mean = total
                .ok_or_else(|| Error::internal("empty batch"))?
                .scale(1.0 / chunk.len() as f64);
            let loss_value = mean.item()?;
            if !loss_value.is_finite() {
                return Err(Error::data(format!(
                    "loss became non-finite at epoch {} step {global_step}; \
                     training diverged (try a lower learning rate)",
                    epoch + 1
                )));
            }
            let grads = backward(&mean)?;
            let mut params = model.parameters_mut();
            for p in params.iter_mut() {
                p.accumulate(&grads);
            }
            opt.step(&mut params)?;
            for p in params.iter_mut() {
                p.zero_grad();
            }
            global_step += 1;
            epoch_loss += loss_value;
            final_loss = loss_value;
            batches += 1;
            writeln!(
                log,
                "{}",
                json!({
                    "epoch": epoch,
                    "step": global_step,
                    "loss": loss_value,
                    "lr": opt.learning_rate(),
                })
            )
            .map_err(|e| Error::io(&log_path, e))?;
        }
        println!(
            "epoch {}/{} mean loss {:.6} lr {}",
            epoch + 1,
            epochs,
            epoch_loss / batches.max(1) as f64,
            opt.learning_rate()
        );
        let state = TrainState {
            epoch: epoch + 1,
            step: global_step,
            buffers: opt.buffers_sorted(),
        };
        let ckpt = out_dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
        save_checkpoint(&ckpt, &model, &partition_hash, &r.hash, Some(&state))?;
        fs::copy(&ckpt, &latest).map_err(|e| Error::io(&latest, e))?;
    }
    println!("trained {} steps; checkpoint {}", global_step, latest.display());
    Ok(TrainSummary {
        epochs_run: epochs.saturating_sub(start_epoch),
        steps: global_step,
        final_loss,
        latest_checkpoint: latest,
    })
}

// ---------------------------------------------------------------------------
// eval / predict

fn load_model_for_inference(
    checkpoint: &Path,
    partition: &Path,
) -> Result<(GeoDecoder, PartitionStack)> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let stack = read_partition(partition)?;
    let current_hash = partition_file_hash(partition)?;
    if meta.partition_hash != current_hash {
        return Err(Error::data(format!(
            "checkpoint was trained against partition {} but {} hashes to {}",
            meta.partition_hash,
            partition.display(),
            current_hash
        )));
    }
    check_model_matches_stack(&model, &stack)?;
    Ok((model, stack))
}

fn predict_records(
    cfg: &RunConfig,
    model: &GeoDecoder,
    stack: &PartitionStack,
    provider: &FeatureProvider,
    records: &[ImageRecord],
    tencrop: bool,
) -> Result<Vec<Prediction>> {
    let one = |rec: &ImageRecord| -> Result<Prediction> {
        let input = provider.input_for(&rec.id)?;
        predict(model, &input, stack, tencrop)
    };
    if cfg.threads > 1 && !cfg.strict {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::internal(format!("thread pool: {e}")))?;
        pool.install(|| records.par_iter().map(one).collect())
    } else {
        records.iter().map(one).collect()
    }
}

pub fn cmd_eval(
    r: &Resolved,
    checkpoint: &Path,
    metadata: &Path,
    partition: &Path,
    out_dir: &Path,
    tencrop: bool,
) -> Result<EvalReport> {
    let cfg = &r.config;
    let source = cfg
        .features
        .as_ref()
        .ok_or_else(|| Error::usage("eval needs a [features] section in the config"))?;
    let (model, stack) = load_model_for_inference(checkpoint, partition)?;
    let provider = FeatureProvider::load(source)?;
    provider.check_compatible(model.config(), false)?;
    let records = read_image_records(metadata)?;
    if records.is_empty() {
        return Err(Error::data(format!(
            "{} holds no records to evaluate",
            metadata.display()
        )));
    }
    let predictions = predict_records(cfg, &model, &stack, &provider, &records, tencrop)?;
    let truth: Vec<GeoPoint> = records
        .iter()
        .map(|rec| rec.point())
        .collect::<Result<Vec<_>>>()?;
    let predicted: Vec<GeoPoint> = predictions.iter().map(|p| p.point).collect();
    let report = evaluate(&predicted, &truth)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    #[derive(Serialize)]
    struct ReportFile<'a> {
        config_hash: &'a str,
        #[serde(flatten)]
        report: &'a EvalReport,
    }
    let report_path = out_dir.join("report.json");
    let report_json = serde_json::to_string_pretty(&ReportFile {
        config_hash: &r.hash,
        report: &report,
    })
    .map_err(|e| Error::internal(e.to_string()))?;
    fs::write(&report_path, report_json + "\n").map_err(|e| Error::io(&report_path, e))?;

    let pred_path = out_dir.join("predictions.jsonl");
    let mut lines = json!({ "config_hash": r.hash }).to_string();
    lines.push('\n');
    for (rec, pred) in records.iter().zip(&predictions) {
        let truth_point = rec.point()?;
        let hits = threshold_hits(&pred.point, &truth_point);
        lines.push_str(
            &json!({
                "id": rec.id,
                "lat": pred.point.lat(),
                "lon": pred.point.lon(),
                "fine_class": pred.fine_class,
                "scene": pred.scene,
                "distance_km": haversine_km(&pred.point, &truth_point),
                "hits": hits,
            })
            .to_string(),
        );
        lines.push('\n');
    }
    fs::write(&pred_path, lines).map_err(|e| Error::io(&pred_path, e))?;

    println!("images evaluated: {}", report.n);
    println!("{:>12}  {}", "threshold_km", "accuracy");
    for (t, a) in report.thresholds_km.iter().zip(report.accuracy.iter()) {
        println!("{t:>12}  {a:.6}");
    }
    println!("wrote {} and {}", report_path.display(), pred_path.display());
    Ok(report)
}

pub fn cmd_predict(
    r: &Resolved,
    checkpoint: &Path,
    metadata: &Path,
    partition: &Path,
    out: &Path,
    tencrop: bool,
) -> Result<()> {
    let cfg = &r.config;
    let source = cfg
        .features
        .as_ref()
        .ok_or_else(|| Error::usage("predict needs a [features] section in the config"))?;
    let (model, stack) = load_model_for_inference(checkpoint, partition)?;
    let provider = FeatureProvider::load(source)?;
    provider.check_compatible(model.config(), false)?;
    let records = read_image_records(metadata)?;
    if records.is_empty() {
        return Err(Error::data(format!(
            "{} holds no records to predict",
            metadata.display()
        )));
    }
    let predictions = predict_records(cfg, &model, &stack, &provider, &records, tencrop)?;
    let mut lines = json!({ "config_hash": r.hash }).to_string();
    lines.push('\n');
    for (rec, pred) in records.iter().zip(&predictions) {
        lines.push_str(
            &json!({
                "id": rec.id,
                "lat": pred.point.lat(),
                "lon": pred.point.lon(),
                "fine_class": pred.fine_class,
                "scene": pred.scene,
                "score": pred.composed_scores[pred.fine_class],
            })
            .to_string(),
        );
        lines.push('\n');
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(out, lines).map_err(|e| Error::io(out, e))?;
    println!("wrote {} predictions to {}", records.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sample / bias

pub fn cmd_sample(r: &Resolved, countries: &Path, count: usize, out: &Path) -> Result<()> {
    let countries = read_countries(countries)?;
    let entries = sample_locations(&countries, count, r.config.seed)?;
    let mut lines = json!({
        "config_hash": r.hash,
        "seed": r.config.seed,
        "count": count,
    })
    .to_string();
    lines.push('\n');
    for e in &entries {
        lines.push_str(
            &serde_json::to_string(e).map_err(|err| Error::internal(err.to_string()))?,
        );
        lines.push('\n');
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(out, lines).map_err(|e| Error::io(out, e))?;
    println!("sampled {} locations into {}", entries.len(), out.display());
    Ok(())
}

pub fn cmd_bias(
    r: &Resolved,
    metadata: &Path,
    countries_path: &Path,
    out_dir: &Path,
    lat_bins: usize,
    lon_bins: usize,
) -> Result<()> {
    let records = read_image_records(metadata)?;
    if records.is_empty() {
        return Err(Error::data(format!(
            "{} holds no records to analyze",
            metadata.display()
        )));
    }
    let countries = read_countries(countries_path)?;
    let cities: Vec<(&str, &str, GeoPoint)> = countries
        .iter()
        .flat_map(|c| {
            c.cities
                .iter()
                .map(move |(name, p)| (c.name.as_str(), name.as_str(), *p))
        })
        .collect();
    if cities.is_empty() {
        return Err(Error::data(format!(
            "{} lists no cities",
            countries_path.display()
        )));
    }

    let mut counts = vec![0u64; cities.len()];
    let mut points = Vec::with_capacity(records.len());
    for rec in &records {
        let p = rec.point()?;
        let nearest = cities
            .iter()
            .enumerate()
            .map(|(i, (_, _, c))| (i, haversine_km(&p, c)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"))
            .map(|(i, _)| i)
            .expect("nonempty city list");
        counts[nearest] += 1;
        points.push(p);
    }

    // Inequality is measured across observed cities; places the dataset
    // never touches are not part of its frequency distribution.
    let used: Vec<usize> = (0..cities.len()).filter(|&i| counts[i] > 0).collect();
    let stats = DistributionStats::from_counts(used.iter().map(|&i| counts[i]).collect())?;
    let grid = heatmap_grid(&points, lat_bins, lon_bins)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let city_rows: Vec<serde_json::Value> = used
        .iter()
        .map(|&i| {
            json!({
                "country": cities[i].0,
                "city": cities[i].1,
                "count": counts[i],
            })
        })
        .collect();
    let stats_path = out_dir.join("bias.json");
    let stats_json = serde_json::to_string_pretty(&json!({
        "config_hash": r.hash,
        "gini": stats.gini,
        "images": records.len(),
        "cities": city_rows,
    }))
    .map_err(|e| Error::internal(e.to_string()))?;
    fs::write(&stats_path, stats_json + "\n").map_err(|e| Error::io(&stats_path, e))?;

    let lorenz_path = out_dir.join("lorenz.csv");
    let mut lorenz_csv = format!("# config_hash={}\nx,y\n", r.hash);
    for (x, y) in &stats.lorenz {
        lorenz_csv.push_str(&format!("{x},{y}\n"));
    }
    fs::write(&lorenz_path, lorenz_csv).map_err(|e| Error::io(&lorenz_path, e))?;

    let heatmap_path = out_dir.join("heatmap.csv");
    let mut heatmap_csv = format!("# config_hash={}\n", r.hash);
    for row in &grid {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        heatmap_csv.push_str(&cells.join(","));
        heatmap_csv.push('\n');
    }
    fs::write(&heatmap_path, heatmap_csv).map_err(|e| Error::io(&heatmap_path, e))?;

    println!("images: {}", records.len());
    println!("cities with images: {}", used.len());
    println!("gini {:.6}", stats.gini);
    println!(
        "wrote {}, {}, {}",
        stats_path.display(),
        lorenz_path.display(),
        heatmap_path.display()
    );
    Ok(())
}
