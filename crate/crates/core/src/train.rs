//! Optimizers, augmentation, triplet sampling, and the two training
//! loops: cross-domain triplet ranking and identity classification.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    bind_params, build_backbone_with_rng, forward_with_taps, triplet_forward, BackboneConfig,
    BoundParams, NetworkParams,
};
use crate::error::{Error, Result};
use crate::eval::rank_gallery;
use crate::fusion::{fuse, fuse_frozen, init_fusion_params, FusionSpec};
use crate::loss::{identity_classification_loss, triplet_ranking_loss, ClassifierHead, DEFAULT_MARGIN};
use crate::synth::{Domain, LoadedDataset, Manifest, Split};
use crate::tensor::{Real, Tape, Tensor};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Per-epoch multiplicative decay; 1.0 (or absent) keeps the rate
    /// constant.
    #[serde(default)]
    pub lr_decay: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
}

fn default_beta1() -> f64 {
    DEFAULT_BETA1
}
fn default_beta2() -> f64 {
    DEFAULT_BETA2
}
fn default_adam_eps() -> f64 {
    DEFAULT_ADAM_EPS
}

pub const OPTIMIZER_PROFILES: [&str; 4] = ["toy-aligned", "toy-view", "full-aligned", "full-view"];

impl OptimizerConfig {
    /// Named presets: `toy-*` are sized for the 32x32 synthetic tasks,
    /// `full-*` carry the reference schedules for full-scale data (SGD
    /// 0.001/batch 128; Adam 0.00035 with 0.95 decay).
    pub fn profile(name: &str) -> Result<Self> {
        let base = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.01,
            lr_decay: None,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_ADAM_EPS,
            batch_size: 32,
            max_iterations: 400,
        };
        match name {
            "toy-aligned" => Ok(base),
            "toy-view" => Ok(OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 1e-3,
                lr_decay: Some(0.95),
                ..base
            }),
            "full-aligned" => Ok(OptimizerConfig {
                learning_rate: 0.001,
                batch_size: 128,
                max_iterations: 20_000,
                ..base
            }),
            "full-view" => Ok(OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 3.5e-4,
                lr_decay: Some(0.95),
                batch_size: 128,
                max_iterations: 20_000,
                ..base
            }),
            other => Err(Error::config(format!(
                "unknown optimizer profile {other:?}; known: {OPTIMIZER_PROFILES:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if let Some(decay) = self.lr_decay {
            if !(decay > 0.0 && decay <= 1.0) {
                return Err(Error::config("lr_decay must be in (0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must be in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("adam eps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Optimizer steps

/// `p <- p - lr * g` elementwise, arithmetic in f64.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &BTreeMap<String, Vec<Real>>,
    lr: f64,
) -> Result<()> {
    for (name, grad) in grads {
        let tensor = params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("gradient for unknown parameter {name:?}")))?;
        if tensor.numel() != grad.len() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "parameter {name:?} has {} values, gradient has {}",
                    tensor.numel(),
                    grad.len()
                ),
            ));
        }
        for (p, &g) in tensor.data_mut().iter_mut().zip(grad) {
            *p = (*p as f64 - lr * g as f64) as Real;
        }
    }
    Ok(())
}

/// Adam moment state plus an f64 master copy of the parameters, so the
/// update trajectory matches a 64-bit reference even though checkpoints
/// store `Real`.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    master: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Standard bias-corrected Adam update at 1-based step index `t`. The
/// state initializes itself on `t == 1`; any out-of-order index is an
/// error.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &BTreeMap<String, Vec<Real>>,
    state: &mut AdamState,
    config: &OptimizerConfig,
    lr: f64,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::config("adam step index starts at 1"));
    }
    if state.t == 0 && t > 1 {
        return Err(Error::config(format!(
            "adam state is uninitialized but step index is {t}"
        )));
    }
    if state.t + 1 != t {
        return Err(Error::config(format!(
            "adam step index {t} does not follow {}",
            state.t
        )));
    }
    let bias1 = 1.0 - config.beta1.powi(t as i32);
    let bias2 = 1.0 - config.beta2.powi(t as i32);
    for (name, grad) in grads {
        let tensor = params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("gradient for unknown parameter {name:?}")))?;
        if tensor.numel() != grad.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "parameter {name:?} has {} values, gradient has {}",
                    tensor.numel(),
                    grad.len()
                ),
            ));
        }
        let n = grad.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let master = state
            .master
            .entry(name.clone())
            .or_insert_with(|| tensor.data().iter().map(|&p| p as f64).collect());
        if m.len() != n || master.len() != n {
            return Err(Error::shape(
                "adam_step",
                format!("state for {name:?} has stale length"),
            ));
        }
        for i in 0..n {
            let g = grad[i] as f64;
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            master[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
        for (p, &mv) in tensor.data_mut().iter_mut().zip(master.iter()) {
            *p = mv as Real;
        }
    }
    state.t = t;
    Ok(())
}

/// Pull the gradient of every bound parameter off a tape after
/// `backward`.
pub fn collect_gradients(tape: &Tape, bound: &BoundParams) -> Result<BTreeMap<String, Vec<Real>>> {
    let mut grads = BTreeMap::new();
    for (name, id) in bound.iter() {
        let grad = tape
            .grad(id)
            .ok_or_else(|| Error::numeric(format!("parameter {name:?} has no gradient")))?;
        grads.insert(name.clone(), grad.to_vec());
    }
    Ok(grads)
}

// ---------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipPolicy {
    /// One coin per triplet, applied to all members.
    Joint,
    /// One coin per image.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    #[serde(default = "default_flip_probability")]
    pub flip_probability: f64,
    #[serde(default = "default_flip_policy")]
    pub flip_policy: FlipPolicy,
    /// Random-crop target (height, width); must not exceed the image.
    #[serde(default)]
    pub crop: Option<(usize, usize)>,
}

fn default_flip_probability() -> f64 {
    0.5
}
fn default_flip_policy() -> FlipPolicy {
    FlipPolicy::Joint
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_probability: default_flip_probability(),
            flip_policy: default_flip_policy(),
            crop: None,
        }
    }
}

impl AugmentConfig {
    /// Identity transform.
    pub fn none() -> Self {
        AugmentConfig {
            flip_probability: 0.0,
            flip_policy: FlipPolicy::Joint,
            crop: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::config("flip_probability must be in [0, 1]"));
        }
        if let Some((h, w)) = self.crop {
            if h == 0 || w == 0 {
                return Err(Error::config("crop target must be positive"));
            }
        }
        Ok(())
    }

    /// Input height/width the network will see for a given image size.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        self.crop.unwrap_or((h, w))
    }
}

/// Mirror a `[h, w, c]` image about its vertical axis.
pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::shape(
            "flip_horizontal",
            format!("need rank 3, got {:?}", image.shape()),
        ));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut data = vec![0.0 as Real; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(y * w + x) * c + ch] = image.at3(y, w - 1 - x, ch);
            }
        }
    }
    Tensor::new(vec![h, w, c], data)
}

/// Apply the augmentation pipeline with the flip decision already made
/// (the joint policy shares one decision across a triplet). Crop
/// offsets are always drawn per image.
pub fn augment_with_flip<R: Rng>(
    image: &Tensor,
    config: &AugmentConfig,
    flip: bool,
    rng: &mut R,
) -> Result<Tensor> {
    let flipped = if flip {
        flip_horizontal(image)?
    } else {
        image.clone()
    };
    let Some((th, tw)) = config.crop else {
        return Ok(flipped);
    };
    let (h, w, c) = (flipped.shape()[0], flipped.shape()[1], flipped.shape()[2]);
    if th > h || tw > w {
        return Err(Error::config(format!(
            "crop target ({th}, {tw}) exceeds image ({h}, {w})"
        )));
    }
    let oy = rng.random_range(0..=h - th);
    let ox = rng.random_range(0..=w - tw);
    let mut data = vec![0.0 as Real; th * tw * c];
    for y in 0..th {
        for x in 0..tw {
            for ch in 0..c {
                data[(y * tw + x) * c + ch] = flipped.at3(oy + y, ox + x, ch);
            }
        }
    }
    Tensor::new(vec![th, tw, c], data)
}

/// Flip with `flip_probability`, then crop if configured.
pub fn augment<R: Rng>(image: &Tensor, config: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    let flip = rng.random_bool(config.flip_probability);
    augment_with_flip(image, config, flip, rng)
}

/// Flip decisions for (query, positive, negative) under the configured
/// policy.
pub fn triplet_flips<R: Rng>(config: &AugmentConfig, rng: &mut R) -> [bool; 3] {
    match config.flip_policy {
        FlipPolicy::Joint => {
            let f = rng.random_bool(config.flip_probability);
            [f, f, f]
        }
        FlipPolicy::Independent => [
            rng.random_bool(config.flip_probability),
            rng.random_bool(config.flip_probability),
            rng.random_bool(config.flip_probability),
        ],
    }
}

// ---------------------------------------------------------------------
// Triplet sampling

/// Manifest indices of one training triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub query: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Draws (query, true match, uniform wrong match) triplets: queries
/// come from one domain, matches from the other.
pub struct TripletSampler {
    queries: Vec<usize>,
    matches_by_instance: BTreeMap<usize, Vec<usize>>,
    match_items: Vec<usize>,
}

impl TripletSampler {
    pub fn new(
        manifest: &Manifest,
        split: Split,
        query_domain: Domain,
        match_domain: Domain,
        instances: Option<&BTreeSet<usize>>,
    ) -> Result<Self> {
        let keep = |instance: usize| instances.map_or(true, |set| set.contains(&instance));
        let mut queries = Vec::new();
        let mut matches_by_instance: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut match_items = Vec::new();
        for (i, item) in manifest.items.iter().enumerate() {
            if item.split != split || !keep(item.instance) {
                continue;
            }
            if item.domain == query_domain {
                queries.push(i);
            }
            if item.domain == match_domain {
                matches_by_instance.entry(item.instance).or_default().push(i);
                match_items.push(i);
            }
        }
        if matches_by_instance.len() < 2 {
            return Err(Error::config(format!(
                "triplet sampling needs at least 2 instances with {match_domain:?} items, got {}",
                matches_by_instance.len()
            )));
        }
        for &q in &queries {
            let instance = manifest.items[q].instance;
            if !matches_by_instance.contains_key(&instance) {
                return Err(Error::config(format!(
                    "query instance {instance} has no {match_domain:?} item to match"
                )));
            }
        }
        if queries.is_empty() {
            return Err(Error::config(format!(
                "no {query_domain:?} items in the {split:?} split to query with"
            )));
        }
        Ok(TripletSampler {
            queries,
            matches_by_instance,
            match_items,
        })
    }

    pub fn queries(&self) -> &[usize] {
        &self.queries
    }

    /// Complete one query into a triplet: positive uniform over the true
    /// matches, negative uniform over all other instances' match items.
    pub fn sample<R: Rng>(&self, query: usize, manifest: &Manifest, rng: &mut R) -> Triplet {
        let instance = manifest.items[query].instance;
        let positives = &self.matches_by_instance[&instance];
        let positive = positives[rng.random_range(0..positives.len())];
        let negative = loop {
            let candidate = self.match_items[rng.random_range(0..self.match_items.len())];
            if manifest.items[candidate].instance != instance {
                break candidate;
            }
        };
        Triplet {
            query,
            positive,
            negative,
        }
    }
}

// ---------------------------------------------------------------------
// Early stopping and logging

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    /// Fraction of training instances held out for validation.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Epochs without a new best validation acc@1 before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_validation_fraction() -> f64 {
    0.2
}
fn default_patience() -> usize {
    10
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            validation_fraction: default_validation_fraction(),
            patience: default_patience(),
        }
    }
}

impl EarlyStopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction must be in (0, 1)"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    /// Cumulative optimizer steps at the end of the epoch.
    pub iteration: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub val_acc1: Option<f64>,
    pub lr: f64,
}

/// Line-delimited JSON, one record per line.
pub fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut out = String::new();
    for record in log {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::format(path, e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub log: Vec<LogRecord>,
    pub epochs: usize,
    pub iterations: usize,
    /// Best validation acc@1 seen (triplet loop with early stopping).
    pub best_val_acc1: Option<f64>,
    /// Final training-set classification accuracy (classification loop).
    pub train_accuracy: Option<f64>,
}

// ---------------------------------------------------------------------
// Training loops

/// Domain the triplet loop queries with; matches come from the other.
pub const TRIPLET_QUERY_DOMAIN: Domain = Domain::Contour;
pub const TRIPLET_MATCH_DOMAIN: Domain = Domain::Filled;

struct StepState {
    adam: AdamState,
    iterations: usize,
}

impl StepState {
    fn new() -> Self {
        StepState {
            adam: AdamState::new(),
            iterations: 0,
        }
    }

    fn apply(
        &mut self,
        params: &mut NetworkParams,
        grads: &BTreeMap<String, Vec<Real>>,
        optimizer: &OptimizerConfig,
        lr: f64,
    ) -> Result<()> {
        self.iterations += 1;
        match optimizer.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, lr),
            OptimizerKind::Adam => {
                adam_step(params, grads, &mut self.adam, optimizer, lr, self.iterations as u64)
            }
        }
    }
}

fn check_input_shape(
    backbone: &BackboneConfig,
    augment: &AugmentConfig,
    image_shape: &[usize],
) -> Result<()> {
    let (h, w) = augment.output_hw(image_shape[0], image_shape[1]);
    let expected = [h, w, image_shape[2]];
    if backbone.input_shape != expected {
        return Err(Error::config(format!(
            "backbone expects input {:?} but augmented dataset images are {:?}",
            backbone.input_shape, expected
        )));
    }
    Ok(())
}

fn finite_or_diverged(loss: f64, epoch: usize, iteration: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::numeric(format!(
            "training diverged at epoch {epoch}, iteration {iteration}: loss = {loss}"
        )))
    }
}

/// Validation acc@1: every held-out query-domain item retrieves against
/// the held-out match-domain gallery.
fn validation_acc1(
    params: &NetworkParams,
    backbone: &BackboneConfig,
    fusion: &FusionSpec,
    dataset: &LoadedDataset,
    val_instances: &BTreeSet<usize>,
) -> Result<f64> {
    let manifest = &dataset.manifest;
    let mut query_idx = Vec::new();
    let mut gallery_idx = Vec::new();
    for (i, item) in manifest.items.iter().enumerate() {
        if item.split != Split::Train || !val_instances.contains(&item.instance) {
            continue;
        }
        match item.domain {
            d if d == TRIPLET_QUERY_DOMAIN => query_idx.push(i),
            _ => gallery_idx.push(i),
        }
    }
    let gallery: Vec<Tensor> = gallery_idx
        .iter()
        .map(|&i| fuse_frozen(params, backbone, fusion, &dataset.images[i]))
        .collect::<Result<_>>()?;
    let mut hits = 0usize;
    for &qi in &query_idx {
        let feature = fuse_frozen(params, backbone, fusion, &dataset.images[qi])?;
        let order = rank_gallery(&feature, &gallery)?;
        let best = manifest.items[gallery_idx[order[0]]].instance;
        if best == manifest.items[qi].instance {
            hits += 1;
        }
    }
    Ok(hits as f64 / query_idx.len() as f64)
}

/// Cross-domain triplet training. Holds out a fraction of the training
/// instances when `early_stop` is set and returns the checkpoint with
/// the best validation acc@1; otherwise returns the final parameters.
pub fn train_triplet_model(
    dataset: &LoadedDataset,
    backbone: &BackboneConfig,
    fusion: &FusionSpec,
    optimizer: &OptimizerConfig,
    augment_cfg: &AugmentConfig,
    early_stop: Option<&EarlyStopConfig>,
    seed: u64,
) -> Result<TrainOutcome> {
    optimizer.validate()?;
    augment_cfg.validate()?;
    fusion.validate(backbone)?;
    check_input_shape(backbone, augment_cfg, dataset.image_shape())?;
    if let Some(es) = early_stop {
        es.validate()?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = build_backbone_with_rng(backbone, &mut rng)?;
    init_fusion_params(backbone, fusion, &mut rng, &mut params)?;

    // Instance-level holdout: the tail of the (sorted) training ids.
    let train_ids = dataset.manifest.instance_ids(Split::Train);
    let (fit_ids, val_ids): (BTreeSet<usize>, BTreeSet<usize>) = match early_stop {
        Some(es) => {
            let val_count = ((train_ids.len() as f64 * es.validation_fraction).ceil() as usize)
                .max(1);
            if train_ids.len() < val_count + 2 {
                return Err(Error::config(format!(
                    "{} training instances cannot spare {val_count} for validation",
                    train_ids.len()
                )));
            }
            let cut = train_ids.len() - val_count;
            (
                train_ids[..cut].iter().copied().collect(),
                train_ids[cut..].iter().copied().collect(),
            )
        }
        None => (train_ids.iter().copied().collect(), BTreeSet::new()),
    };

    let sampler = TripletSampler::new(
        &dataset.manifest,
        Split::Train,
        TRIPLET_QUERY_DOMAIN,
        TRIPLET_MATCH_DOMAIN,
        Some(&fit_ids),
    )?;

    let mut state = StepState::new();
    let mut log = Vec::new();
    let mut lr = optimizer.learning_rate;
    let mut best: Option<(f64, NetworkParams)> = None;
    let mut stale_epochs = 0usize;
    let mut epoch = 0usize;

    'training: loop {
        let mut order = sampler.queries().to_vec();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_batches = 0usize;
        for batch in order.chunks(optimizer.batch_size) {
            if state.iterations >= optimizer.max_iterations {
                break;
            }
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params, true);
            let mut losses = Vec::with_capacity(batch.len());
            for &q in batch {
                let triplet = sampler.sample(q, &dataset.manifest, &mut rng);
                let flips = triplet_flips(augment_cfg, &mut rng);
                let [qv, pv, nv] = [
                    (triplet.query, flips[0]),
                    (triplet.positive, flips[1]),
                    (triplet.negative, flips[2]),
                ]
                .map(|(idx, flip)| {
                    augment_with_flip(&dataset.images[idx], augment_cfg, flip, &mut rng)
                        .map(|img| tape.leaf(img))
                });
                let (qv, pv, nv) = (qv?, pv?, nv?);
                let outs = triplet_forward(&mut tape, &bound, backbone, qv, pv, nv)?;
                let q_feat = fuse(&mut tape, &bound, fusion, &outs[0])?;
                let p_feat = fuse(&mut tape, &bound, fusion, &outs[1])?;
                let n_feat = fuse(&mut tape, &bound, fusion, &outs[2])?;
                losses.push(triplet_ranking_loss(
                    &mut tape,
                    q_feat,
                    p_feat,
                    n_feat,
                    DEFAULT_MARGIN,
                )?);
            }
            let stacked = tape.concatenate(&losses)?;
            let batch_loss = tape.mean_all(stacked);
            tape.backward(batch_loss)?;
            let loss = finite_or_diverged(
                tape.scalar_value(batch_loss) as f64,
                epoch,
                state.iterations,
            )?;
            let grads = collect_gradients(&tape, &bound)?;
            state.apply(&mut params, &grads, optimizer, lr)?;
            epoch_loss += loss;
            epoch_batches += 1;
        }
        if epoch_batches == 0 {
            break 'training;
        }

        let val_acc1 = match early_stop {
            Some(_) => Some(validation_acc1(
                &params, backbone, fusion, dataset, &val_ids,
            )?),
            None => None,
        };
        log.push(LogRecord {
            epoch,
            iteration: state.iterations,
            loss: epoch_loss / epoch_batches as f64,
            val_acc1,
            lr,
        });
        epoch += 1;

        if let Some(acc) = val_acc1 {
            let improved = best.as_ref().map_or(true, |(b, _)| acc > *b);
            if improved {
                best = Some((acc, params.clone()));
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= early_stop.unwrap().patience {
                    break 'training;
                }
            }
        }
        if state.iterations >= optimizer.max_iterations {
            break 'training;
        }
        if let Some(decay) = optimizer.lr_decay {
            lr *= decay;
        }
    }

    let (best_val_acc1, params) = match best {
        Some((acc, best_params)) => (Some(acc), best_params),
        None => (None, params),
    };
    Ok(TrainOutcome {
        params,
        epochs: epoch,
        iterations: state.iterations,
        log,
        best_val_acc1,
        train_accuracy: None,
    })
}

/// Identity-classification training over every training image in both
/// domains; labels are instance ids remapped to `0..K` in sorted order.
pub fn train_classification_model(
    dataset: &LoadedDataset,
    backbone: &BackboneConfig,
    fusion: &FusionSpec,
    optimizer: &OptimizerConfig,
    augment_cfg: &AugmentConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    optimizer.validate()?;
    augment_cfg.validate()?;
    fusion.validate(backbone)?;
    check_input_shape(backbone, augment_cfg, dataset.image_shape())?;

    let train_ids = dataset.manifest.instance_ids(Split::Train);
    let label_of: BTreeMap<usize, usize> = train_ids
        .iter()
        .enumerate()
        .map(|(label, &instance)| (instance, label))
        .collect();
    let head = ClassifierHead::new(fusion.fused_len(backbone)?, train_ids.len())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = build_backbone_with_rng(backbone, &mut rng)?;
    init_fusion_params(backbone, fusion, &mut rng, &mut params)?;
    head.init_params(&mut rng, &mut params);

    let items: Vec<usize> = dataset
        .manifest
        .items
        .iter()
        .enumerate()
        .filter(|(_, item)| item.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    if items.is_empty() {
        return Err(Error::config("no training items in the dataset"));
    }

    let mut state = StepState::new();
    let mut log = Vec::new();
    let mut lr = optimizer.learning_rate;
    let mut epoch = 0usize;

    'training: loop {
        let mut order = items.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_batches = 0usize;
        for batch in order.chunks(optimizer.batch_size) {
            if state.iterations >= optimizer.max_iterations {
                break;
            }
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params, true);
            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let image = augment(&dataset.images[idx], augment_cfg, &mut rng)?;
                let image_id = tape.leaf(image);
                let out = forward_with_taps(&mut tape, &bound, backbone, image_id)?;
                let feature = fuse(&mut tape, &bound, fusion, &out)?;
                let label = label_of[&dataset.manifest.items[idx].instance];
                losses.push(identity_classification_loss(
                    &mut tape, &bound, feature, label,
                )?);
            }
            let stacked = tape.concatenate(&losses)?;
            let batch_loss = tape.mean_all(stacked);
            tape.backward(batch_loss)?;
            let loss = finite_or_diverged(
                tape.scalar_value(batch_loss) as f64,
                epoch,
                state.iterations,
            )?;
            let grads = collect_gradients(&tape, &bound)?;
            state.apply(&mut params, &grads, optimizer, lr)?;
            epoch_loss += loss;
            epoch_batches += 1;
        }
        if epoch_batches == 0 {
            break 'training;
        }
        log.push(LogRecord {
            epoch,
            iteration: state.iterations,
            loss: epoch_loss / epoch_batches as f64,
            val_acc1: None,
            lr,
        });
        epoch += 1;
        if state.iterations >= optimizer.max_iterations {
            break 'training;
        }
        if let Some(decay) = optimizer.lr_decay {
            lr *= decay;
        }
    }

    let train_accuracy =
        classification_accuracy(&params, backbone, fusion, &head, dataset, &label_of, &items)?;
    Ok(TrainOutcome {
        params,
        epochs: epoch,
        iterations: state.iterations,
        log,
        best_val_acc1: None,
        train_accuracy: Some(train_accuracy),
    })
}

fn classification_accuracy(
    params: &NetworkParams,
    backbone: &BackboneConfig,
    fusion: &FusionSpec,
    head: &ClassifierHead,
    dataset: &LoadedDataset,
    label_of: &BTreeMap<usize, usize>,
    items: &[usize],
) -> Result<f64> {
    let mut hits = 0usize;
    for &idx in items {
        let feature = fuse_frozen(params, backbone, fusion, &dataset.images[idx])?;
        let logits = head.logits_frozen(params, &feature)?;
        let argmax = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap();
        if argmax == label_of[&dataset.manifest.items[idx].instance] {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}
