//! JSON-configured experiments: training runs that leave a loadable
//! checkpoint directory behind, evaluation of saved checkpoints, and
//! multi-seed ablation grids aggregated into CSV/JSON tables.
//!
//! A checkpoint directory written here carries a `model.json` describing
//! the backbone and fusion spec alongside the parameter tensors, so a
//! checkpoint path alone is enough to rebuild the model for evaluation
//! or visualization.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    load_checkpoint, preset, save_checkpoint, BackboneConfig, NetworkParams, PRESET_NAMES,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, extract_features, RetrievalProtocol, RetrievalReport};
use crate::fusion::{FusionSpec, PoolMode, TapSpec};
use crate::synth::{load_dataset, make_dataset, DatasetConfig, Domain, LoadedDataset, Split};
use crate::train::{
    train_classification_model, train_triplet_model, write_log, AugmentConfig, EarlyStopConfig,
    OptimizerConfig, TrainOutcome,
};

// ---------------------------------------------------------------------
// Experiment configuration

/// Which training loop an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Contour queries pulled toward their filled match and pushed from
    /// a negative; hinge on the distance margin.
    Triplet,
    /// Instance-id softmax over the fused descriptor.
    Classification,
}

impl Objective {
    /// Optimizer profile used when the config names none.
    pub fn default_profile(self) -> &'static str {
        match self {
            Objective::Triplet => "toy-aligned",
            Objective::Classification => "toy-view",
        }
    }
}

/// A backbone given either as a preset name or as a full inline config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackboneRef {
    Preset(String),
    Inline(BackboneConfig),
}

impl BackboneRef {
    pub fn resolve(&self) -> Result<BackboneConfig> {
        match self {
            BackboneRef::Preset(name) => preset(name).ok_or_else(|| {
                Error::config(format!(
                    "unknown backbone preset {name:?}; known presets: {PRESET_NAMES:?}"
                ))
            }),
            BackboneRef::Inline(cfg) => Ok(cfg.clone()),
        }
    }
}

/// A named optimizer profile with field-level overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileOverrides {
    pub profile: String,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub lr_decay: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub max_iterations: Option<usize>,
}

/// Optimizer section: either a complete [`OptimizerConfig`] or a profile
/// name with overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OptimizerRef {
    Inline(OptimizerConfig),
    Profile(ProfileOverrides),
}

/// One experiment, loadable from a JSON file. Every random choice is
/// driven by the explicit seeds in here; nothing reads the clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub backbone: BackboneRef,
    #[serde(default = "FusionSpec::vanilla")]
    pub fusion: FusionSpec,
    pub objective: Objective,
    /// Absent means the objective's default toy profile.
    #[serde(default)]
    pub optimizer: Option<OptimizerRef>,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub early_stop: Option<EarlyStopConfig>,
    #[serde(default = "RetrievalProtocol::contour_to_filled")]
    pub eval: RetrievalProtocol,
    pub train_seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub ablate: Option<AblateConfig>,
}

/// Read and parse an experiment config. Parse failures are reported as
/// configuration errors, not file-format errors: the file is user input.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

impl ExperimentConfig {
    /// Full optimizer config with profile defaults and overrides applied.
    pub fn resolve_optimizer(&self) -> Result<OptimizerConfig> {
        let cfg = match &self.optimizer {
            None => OptimizerConfig::profile(self.objective.default_profile())?,
            Some(OptimizerRef::Inline(cfg)) => cfg.clone(),
            Some(OptimizerRef::Profile(p)) => {
                let mut cfg = OptimizerConfig::profile(&p.profile)?;
                if let Some(lr) = p.learning_rate {
                    cfg.learning_rate = lr;
                }
                if let Some(decay) = p.lr_decay {
                    cfg.lr_decay = Some(decay);
                }
                if let Some(batch) = p.batch_size {
                    cfg.batch_size = batch;
                }
                if let Some(iters) = p.max_iterations {
                    cfg.max_iterations = iters;
                }
                cfg
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check every section, including cross-section constraints the
    /// individual types cannot see (dataset image shape vs. backbone
    /// input shape).
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let backbone = self.backbone.resolve()?;
        self.fusion.validate(&backbone)?;
        self.resolve_optimizer()?;
        self.augment.validate()?;
        if let Some(es) = &self.early_stop {
            es.validate()?;
        }
        if self.eval.ks.is_empty() {
            return Err(Error::config("eval protocol lists no K values"));
        }
        let (h, w) = self
            .augment
            .output_hw(self.dataset.image_size, self.dataset.image_size);
        if [h, w, self.dataset.channels] != backbone.input_shape {
            return Err(Error::config(format!(
                "dataset yields {h}x{w}x{} images but the backbone expects {:?}",
                self.dataset.channels, backbone.input_shape
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Checkpoint directories that know their model

pub const MODEL_FILE: &str = "model.json";

/// Everything needed to rebuild a model around a parameter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub backbone: BackboneConfig,
    pub fusion: FusionSpec,
    pub objective: Objective,
}

/// Write parameters plus the model description into one directory.
pub fn save_model(dir: &Path, params: &NetworkParams, desc: &ModelDescriptor) -> Result<()> {
    save_checkpoint(dir, params)?;
    let path = dir.join(MODEL_FILE);
    let json = serde_json::to_string_pretty(desc)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_model(dir: &Path) -> Result<(NetworkParams, ModelDescriptor)> {
    let params = load_checkpoint(dir)?;
    let path = dir.join(MODEL_FILE);
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let desc: ModelDescriptor =
        serde_json::from_str(&raw).map_err(|e| Error::format(&path, e.to_string()))?;
    Ok((params, desc))
}

// ---------------------------------------------------------------------
// Training and evaluation runs

/// Paths and results left behind by [`run_training`].
#[derive(Debug)]
pub struct TrainArtifacts {
    pub outcome: TrainOutcome,
    pub descriptor: ModelDescriptor,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
}

/// Dispatch to the objective's training loop.
pub fn train_model(
    dataset: &LoadedDataset,
    backbone: &BackboneConfig,
    fusion: &FusionSpec,
    optimizer: &OptimizerConfig,
    augment: &AugmentConfig,
    early_stop: Option<&EarlyStopConfig>,
    objective: Objective,
    seed: u64,
) -> Result<TrainOutcome> {
    match objective {
        Objective::Triplet => {
            train_triplet_model(dataset, backbone, fusion, optimizer, augment, early_stop, seed)
        }
        Objective::Classification => {
            train_classification_model(dataset, backbone, fusion, optimizer, augment, seed)
        }
    }
}

/// Extract fused descriptors for every dataset item and run a retrieval
/// protocol over one split.
pub fn evaluate_model(
    params: &NetworkParams,
    backbone: &BackboneConfig,
    fusion: &FusionSpec,
    dataset: &LoadedDataset,
    split: Split,
    protocol: &RetrievalProtocol,
) -> Result<RetrievalReport> {
    let features = extract_features(params, backbone, fusion, &dataset.images)?;
    evaluate(&features, &dataset.manifest, split, protocol)
}

/// Generate the dataset under `output_dir/data`, train, and write
/// `output_dir/checkpoint` (parameters + model description) and
/// `output_dir/train.jsonl`. Everything lands inside `output_dir`.
pub fn run_training(config: &ExperimentConfig) -> Result<TrainArtifacts> {
    config.validate()?;
    let backbone = config.backbone.resolve()?;
    let optimizer = config.resolve_optimizer()?;

    let data_dir = config.output_dir.join("data");
    make_dataset(&config.dataset, &data_dir)?;
    let dataset = load_dataset(&data_dir)?;

    let outcome = train_model(
        &dataset,
        &backbone,
        &config.fusion,
        &optimizer,
        &config.augment,
        config.early_stop.as_ref(),
        config.objective,
        config.train_seed,
    )?;

    let descriptor = ModelDescriptor {
        backbone,
        fusion: config.fusion.clone(),
        objective: config.objective,
    };
    let checkpoint_dir = config.output_dir.join("checkpoint");
    save_model(&checkpoint_dir, &outcome.params, &descriptor)?;
    let log_path = config.output_dir.join("train.jsonl");
    write_log(&log_path, &outcome.log)?;

    Ok(TrainArtifacts {
        outcome,
        descriptor,
        data_dir,
        checkpoint_dir,
        log_path,
    })
}

/// Evaluate a saved checkpoint against a dataset directory.
pub fn run_eval(
    checkpoint_dir: &Path,
    data_dir: &Path,
    split: Split,
    protocol: &RetrievalProtocol,
) -> Result<RetrievalReport> {
    let (params, desc) = load_model(checkpoint_dir)?;
    let dataset = load_dataset(data_dir)?;
    evaluate_model(&params, &desc.backbone, &desc.fusion, &dataset, split, protocol)
}

/// Protocol argument accepted on a command line: `contour-to-filled` or
/// `filled-to-contour`, optionally suffixed with `:multi` for pooled
/// multi-query probes, or a path to a JSON file holding the full
/// structure.
pub fn parse_protocol(arg: &str) -> Result<RetrievalProtocol> {
    let path = Path::new(arg);
    if path.is_file() {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return serde_json::from_str(&raw)
            .map_err(|e| Error::config(format!("protocol file {}: {e}", path.display())));
    }
    let (base, multi) = match arg.strip_suffix(":multi") {
        Some(stripped) => (stripped, true),
        None => (arg, false),
    };
    let mut protocol = match base {
        "contour-to-filled" => RetrievalProtocol::contour_to_filled(),
        "filled-to-contour" => RetrievalProtocol {
            query_domain: Domain::Filled,
            gallery_domain: Domain::Contour,
            multi_query: false,
            ks: vec![1, 5, 10],
        },
        other => {
            return Err(Error::config(format!(
                "unknown protocol {other:?}: expected contour-to-filled or filled-to-contour \
                 (optionally with a :multi suffix), or a path to a protocol JSON file"
            )))
        }
    };
    protocol.multi_query = protocol.multi_query || multi;
    Ok(protocol)
}

// ---------------------------------------------------------------------
// Ablation grids

/// What an ablation varies between cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Which layers are tapped for fusion, plus a frozen-fusion readout
    /// on a backbone trained without any taps.
    Layers,
    /// Flatten vs. global-average pooling of the tapped maps.
    Pooling,
    /// The fused model against the no-fusion baseline.
    Vanilla,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "layers" => Ok(AblationAxis::Layers),
            "pooling" => Ok(AblationAxis::Pooling),
            "vanilla" => Ok(AblationAxis::Vanilla),
            other => Err(Error::config(format!(
                "unknown ablation axis {other:?}: expected layers, pooling, or vanilla"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Layers => "layers",
            AblationAxis::Pooling => "pooling",
            AblationAxis::Vanilla => "vanilla",
        }
    }
}

/// One candidate tap set for the layers axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSet {
    /// Row label in the emitted table.
    pub label: String,
    /// Tap layer names; empty means train without fusion.
    pub taps: Vec<String>,
}

/// Ablation grid settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateConfig {
    #[serde(default = "default_ablation_seeds")]
    pub seeds: Vec<u64>,
    /// Candidate tap sets compared on the layers axis.
    #[serde(default)]
    pub layer_sets: Vec<LayerSet>,
    /// Pooling modes compared on the pooling axis.
    #[serde(default = "default_pooling_modes")]
    pub pooling_modes: Vec<PoolMode>,
    /// Worker threads training cells concurrently. Cells are
    /// independent, each writes its own subdirectory, and results are
    /// aggregated in a fixed order, so the worker count never changes
    /// the output.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_ablation_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_pooling_modes() -> Vec<PoolMode> {
    vec![PoolMode::Flatten, PoolMode::Gap]
}
fn default_workers() -> usize {
    1
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seeds: default_ablation_seeds(),
            layer_sets: Vec::new(),
            pooling_modes: default_pooling_modes(),
            workers: default_workers(),
        }
    }
}

fn pool_label(mode: PoolMode) -> &'static str {
    match mode {
        PoolMode::Flatten => "flatten",
        PoolMode::Gap => "gap",
    }
}

/// One table row's worth of metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRow {
    pub acc1: f64,
    pub acc5: f64,
    pub acc10: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: MetricsRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub axis_value: String,
    pub runs: Vec<SeedRun>,
    pub mean: MetricsRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    /// One row per (cell, seed) plus a `mean` row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis_value,seed,acc1,acc5,acc10,map\n");
        for cell in &self.cells {
            for run in &cell.runs {
                out.push_str(&csv_row(&cell.axis_value, &run.seed.to_string(), &run.metrics));
            }
            out.push_str(&csv_row(&cell.axis_value, "mean", &cell.mean));
        }
        out
    }

    pub fn cell(&self, axis_value: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.axis_value == axis_value)
    }
}

fn csv_row(axis_value: &str, seed: &str, m: &MetricsRow) -> String {
    format!(
        "{axis_value},{seed},{:.6},{:.6},{:.6},{:.6}\n",
        m.acc1, m.acc5, m.acc10, m.map
    )
}

/// The report plus where it was written.
#[derive(Debug)]
pub struct AblationOutcome {
    pub report: AblationReport,
    pub dir: PathBuf,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
}

/// A cell's training-time fusion and, when it differs, the fusion
/// applied frozen at evaluation time.
#[derive(Debug, Clone)]
struct CellVariant {
    label: String,
    train_fusion: FusionSpec,
    eval_fusion: Option<FusionSpec>,
}

impl CellVariant {
    fn eval_spec(&self) -> &FusionSpec {
        self.eval_fusion.as_ref().unwrap_or(&self.train_fusion)
    }
}

/// Tap spec for a named layer, inheriting the pool mode the base spec
/// uses for that layer (or for its first tap, or GAP).
fn tap_with_pool(base: &FusionSpec, layer: &str) -> TapSpec {
    let pool = base
        .taps
        .iter()
        .find(|t| t.layer == layer)
        .or_else(|| base.taps.first())
        .map(|t| t.pool)
        .unwrap_or(PoolMode::Gap);
    TapSpec {
        layer: layer.to_string(),
        pool,
    }
}

fn plan_variants(
    config: &ExperimentConfig,
    axis: AblationAxis,
    ab: &AblateConfig,
) -> Result<Vec<CellVariant>> {
    let variants = match axis {
        AblationAxis::Pooling => {
            if config.fusion.taps.is_empty() {
                return Err(Error::config(
                    "the pooling axis varies tap pooling, but the fusion spec has no taps",
                ));
            }
            if ab.pooling_modes.is_empty() {
                return Err(Error::config("ablate.pooling_modes must not be empty"));
            }
            ab.pooling_modes
                .iter()
                .map(|&mode| {
                    let mut fusion = config.fusion.clone();
                    for tap in &mut fusion.taps {
                        tap.pool = mode;
                    }
                    CellVariant {
                        label: pool_label(mode).to_string(),
                        train_fusion: fusion,
                        eval_fusion: None,
                    }
                })
                .collect()
        }
        AblationAxis::Vanilla => {
            if config.fusion.taps.is_empty() {
                return Err(Error::config(
                    "the vanilla axis compares fusion against no fusion, but the fusion spec \
                     has no taps",
                ));
            }
            vec![
                CellVariant {
                    label: "vanilla".to_string(),
                    train_fusion: FusionSpec::vanilla(),
                    eval_fusion: None,
                },
                CellVariant {
                    label: "fused".to_string(),
                    train_fusion: config.fusion.clone(),
                    eval_fusion: None,
                },
            ]
        }
        AblationAxis::Layers => {
            if ab.layer_sets.is_empty() {
                return Err(Error::config(
                    "the layers axis needs ablate.layer_sets naming the tap sets to compare",
                ));
            }
            let mut variants: Vec<CellVariant> = ab
                .layer_sets
                .iter()
                .map(|set| CellVariant {
                    label: set.label.clone(),
                    train_fusion: FusionSpec {
                        taps: set
                            .taps
                            .iter()
                            .map(|layer| tap_with_pool(&config.fusion, layer))
                            .collect(),
                        reduce_to: if set.taps.is_empty() {
                            None
                        } else {
                            config.fusion.reduce_to
                        },
                        normalize_blocks: config.fusion.normalize_blocks,
                    },
                    eval_fusion: None,
                })
                .collect();
            // Is deep supervision doing the work, or just the fusion
            // arithmetic? Train without taps, then bolt the fusion
            // readout onto the frozen backbone.
            variants.push(CellVariant {
                label: "vanilla+fusion".to_string(),
                train_fusion: FusionSpec::vanilla(),
                eval_fusion: Some(config.fusion.clone()),
            });
            variants
        }
    };
    for variant in &variants {
        if variant.label.is_empty() || variant.label.contains(',') || variant.label.contains('\n')
        {
            return Err(Error::config(format!(
                "ablation row label {:?} must be non-empty and free of commas and newlines",
                variant.label
            )));
        }
    }
    Ok(variants)
}

/// Directory-safe form of a row label.
fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '-'
            }
        })
        .collect()
}

fn mean_metrics(runs: &[SeedRun]) -> MetricsRow {
    let n = runs.len() as f64;
    MetricsRow {
        acc1: runs.iter().map(|r| r.metrics.acc1).sum::<f64>() / n,
        acc5: runs.iter().map(|r| r.metrics.acc5).sum::<f64>() / n,
        acc10: runs.iter().map(|r| r.metrics.acc10).sum::<f64>() / n,
        map: runs.iter().map(|r| r.metrics.map).sum::<f64>() / n,
    }
}

fn run_cell(
    variant: &CellVariant,
    seed: u64,
    dir: &Path,
    dataset: &LoadedDataset,
    backbone: &BackboneConfig,
    optimizer: &OptimizerConfig,
    config: &ExperimentConfig,
    protocol: &RetrievalProtocol,
) -> Result<MetricsRow> {
    let outcome = train_model(
        dataset,
        backbone,
        &variant.train_fusion,
        optimizer,
        &config.augment,
        config.early_stop.as_ref(),
        config.objective,
        seed,
    )?;
    let eval_fusion = variant.eval_spec();
    let descriptor = ModelDescriptor {
        backbone: backbone.clone(),
        fusion: eval_fusion.clone(),
        objective: config.objective,
    };
    save_model(&dir.join("checkpoint"), &outcome.params, &descriptor)?;
    write_log(&dir.join("train.jsonl"), &outcome.log)?;
    let report = evaluate_model(
        &outcome.params,
        backbone,
        eval_fusion,
        dataset,
        Split::Test,
        protocol,
    )?;
    let eval_path = dir.join("eval.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::format(&eval_path, e.to_string()))?;
    fs::write(&eval_path, json).map_err(|e| Error::io(&eval_path, e))?;
    Ok(MetricsRow {
        acc1: report.accuracy_at(1).unwrap_or(0.0),
        acc5: report.accuracy_at(5).unwrap_or(0.0),
        acc10: report.accuracy_at(10).unwrap_or(0.0),
        map: report.map,
    })
}

/// Train one model per (cell, seed) on a shared dataset, evaluate every
/// cell on the same test split, and write `table.csv` / `table.json`
/// under `output_dir/ablate-<axis>/`. Cells run on `ablate.workers`
/// threads; each cell's artifacts land in its own subdirectory.
pub fn run_ablation(config: &ExperimentConfig, axis: AblationAxis) -> Result<AblationOutcome> {
    config.validate()?;
    let backbone = config.backbone.resolve()?;
    let optimizer = config.resolve_optimizer()?;
    let ab = config.ablate.clone().unwrap_or_default();
    if ab.seeds.is_empty() {
        return Err(Error::config("ablate.seeds must not be empty"));
    }
    let variants = plan_variants(config, axis, &ab)?;
    for variant in &variants {
        variant.train_fusion.validate(&backbone)?;
        if let Some(fusion) = &variant.eval_fusion {
            fusion.validate(&backbone)?;
        }
    }

    let data_dir = config.output_dir.join("data");
    make_dataset(&config.dataset, &data_dir)?;
    let dataset = load_dataset(&data_dir)?;

    // The table always carries acc@1/5/10 columns; keep any extra K the
    // config asks for.
    let mut ks: BTreeSet<usize> = config.eval.ks.iter().copied().collect();
    ks.extend([1, 5, 10]);
    let mut protocol = config.eval.clone();
    protocol.ks = ks.into_iter().collect();

    let axis_dir = config.output_dir.join(format!("ablate-{}", axis.name()));
    struct Job<'a> {
        variant: &'a CellVariant,
        seed: u64,
        dir: PathBuf,
    }
    let jobs: Vec<Job> = variants
        .iter()
        .flat_map(|variant| {
            ab.seeds.iter().map(|&seed| Job {
                variant,
                seed,
                dir: axis_dir
                    .join("cells")
                    .join(format!("{}-seed{seed}", sanitize_label(&variant.label))),
            })
        })
        .collect();

    let results: Vec<Mutex<Option<Result<MetricsRow>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = ab.workers.clamp(1, jobs.len());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let job = &jobs[i];
                let res = run_cell(
                    job.variant,
                    job.seed,
                    &job.dir,
                    &dataset,
                    &backbone,
                    &optimizer,
                    config,
                    &protocol,
                );
                *results[i].lock().unwrap() = Some(res);
            });
        }
    });

    let mut cells = Vec::new();
    let per_cell = ab.seeds.len();
    for (vi, variant) in variants.iter().enumerate() {
        let mut runs = Vec::new();
        for (si, &seed) in ab.seeds.iter().enumerate() {
            let metrics = results[vi * per_cell + si]
                .lock()
                .unwrap()
                .take()
                .expect("every ablation job ran")?;
            runs.push(SeedRun { seed, metrics });
        }
        let mean = mean_metrics(&runs);
        cells.push(AblationCell {
            axis_value: variant.label.clone(),
            runs,
            mean,
        });
    }
    let report = AblationReport {
        axis,
        seeds: ab.seeds.clone(),
        cells,
    };

    fs::create_dir_all(&axis_dir).map_err(|e| Error::io(&axis_dir, e))?;
    let csv_path = axis_dir.join("table.csv");
    fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = axis_dir.join("table.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    Ok(AblationOutcome {
        report,
        dir: axis_dir,
        csv_path,
        json_path,
    })
}
