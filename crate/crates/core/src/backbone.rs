//! Configurable convolutional backbones. A backbone is a flat stack of
//! named layers; selected mid layers ("tap points") expose their
//! activations alongside the final embedding so fusion can combine them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Activation, Real, Tape, Tensor, ValueId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        kernel: usize,
        out_channels: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        relu: bool,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    GlobalAveragePool,
    Flatten,
    Fc {
        width: usize,
        relu: bool,
    },
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// Backbone description. `input_shape` is `[H, W, C]`; `tap_points` name
/// layers whose activations are exported to fusion and must precede
/// `final_layer`, which must be the last layer of the stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub tap_points: Vec<String>,
    pub final_layer: String,
}

/// Symbolic shape of a layer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    Spatial(usize, usize, usize),
    Vector(usize),
}

impl FeatureShape {
    pub fn numel(&self) -> usize {
        match *self {
            FeatureShape::Spatial(h, w, c) => h * w * c,
            FeatureShape::Vector(n) => n,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            FeatureShape::Spatial(h, w, c) => vec![h, w, c],
            FeatureShape::Vector(n) => vec![n],
        }
    }
}

impl BackboneConfig {
    /// Validate the config and return each layer's output shape in layer
    /// order. Every error names the offending layer.
    pub fn layer_output_shapes(&self) -> Result<Vec<(String, FeatureShape)>> {
        let [h, w, c] = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::config(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::config("backbone has no layers"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for layer in &self.layers {
            if layer.name.is_empty() {
                return Err(Error::config("layer with empty name"));
            }
            if !seen.insert(&layer.name) {
                return Err(Error::config(format!("duplicate layer name '{}'", layer.name)));
            }
        }

        let mut shape = FeatureShape::Spatial(h, w, c);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = propagate(&layer.name, &layer.kind, shape)?;
            out.push((layer.name.clone(), shape));
        }

        let last = &self.layers[self.layers.len() - 1].name;
        if &self.final_layer != last {
            return Err(Error::config(format!(
                "final layer '{}' must be the last layer ('{last}')",
                self.final_layer
            )));
        }
        let mut tap_seen = std::collections::BTreeSet::new();
        for tap in &self.tap_points {
            let Some(pos) = self.layers.iter().position(|l| &l.name == tap) else {
                return Err(Error::config(format!("tap point '{tap}' is not a layer")));
            };
            if pos + 1 == self.layers.len() {
                return Err(Error::config(format!(
                    "tap point '{tap}' must precede the final layer"
                )));
            }
            if !tap_seen.insert(tap) {
                return Err(Error::config(format!("duplicate tap point '{tap}'")));
            }
        }
        Ok(out)
    }

    /// Output shape of a single named layer.
    pub fn shape_of(&self, layer: &str) -> Result<FeatureShape> {
        self.layer_output_shapes()?
            .into_iter()
            .find(|(name, _)| name == layer)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::config(format!("no layer named '{layer}'")))
    }

    /// Length of the final embedding.
    pub fn final_len(&self) -> Result<usize> {
        Ok(self.shape_of(&self.final_layer)?.numel())
    }

    /// Expected parameter names and shapes for this backbone.
    pub fn param_shapes(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let shapes = self.layer_output_shapes()?;
        let mut expected = BTreeMap::new();
        let mut prev = FeatureShape::Spatial(
            self.input_shape[0],
            self.input_shape[1],
            self.input_shape[2],
        );
        for (layer, (_, shape)) in self.layers.iter().zip(&shapes) {
            match &layer.kind {
                LayerKind::Conv {
                    kernel,
                    out_channels,
                    ..
                } => {
                    let FeatureShape::Spatial(_, _, cin) = prev else {
                        unreachable!("validated: conv input is spatial");
                    };
                    expected.insert(
                        format!("{}.kernels", layer.name),
                        vec![*kernel, *kernel, cin, *out_channels],
                    );
                    expected.insert(format!("{}.bias", layer.name), vec![*out_channels]);
                }
                LayerKind::Fc { width, .. } => {
                    expected.insert(
                        format!("{}.weights", layer.name),
                        vec![prev.numel(), *width],
                    );
                    expected.insert(format!("{}.bias", layer.name), vec![*width]);
                }
                LayerKind::MaxPool { .. }
                | LayerKind::GlobalAveragePool
                | LayerKind::Flatten => {}
            }
            prev = *shape;
        }
        Ok(expected)
    }
}

fn propagate(name: &str, kind: &LayerKind, input: FeatureShape) -> Result<FeatureShape> {
    let bad = |details: String| Error::config(format!("layer '{name}': {details}"));
    match kind {
        LayerKind::Conv {
            kernel,
            out_channels,
            stride,
            padding,
            ..
        } => {
            let FeatureShape::Spatial(h, w, _) = input else {
                return Err(bad("conv needs a spatial input".into()));
            };
            if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                return Err(bad("kernel, stride, out_channels must be positive".into()));
            }
            if *kernel > h + 2 * padding || *kernel > w + 2 * padding {
                return Err(bad(format!(
                    "kernel {kernel} exceeds padded input {h}x{w} (padding {padding})"
                )));
            }
            Ok(FeatureShape::Spatial(
                (h + 2 * padding - kernel) / stride + 1,
                (w + 2 * padding - kernel) / stride + 1,
                *out_channels,
            ))
        }
        LayerKind::MaxPool { window, stride } => {
            let FeatureShape::Spatial(h, w, c) = input else {
                return Err(bad("max pool needs a spatial input".into()));
            };
            if *window == 0 || *stride == 0 {
                return Err(bad("window and stride must be positive".into()));
            }
            if *window > h || *window > w {
                return Err(bad(format!("window {window} exceeds input {h}x{w}")));
            }
            Ok(FeatureShape::Spatial(
                (h - window) / stride + 1,
                (w - window) / stride + 1,
                c,
            ))
        }
        LayerKind::GlobalAveragePool => {
            let FeatureShape::Spatial(_, _, c) = input else {
                return Err(bad("global average pool needs a spatial input".into()));
            };
            Ok(FeatureShape::Vector(c))
        }
        LayerKind::Flatten => {
            let FeatureShape::Spatial(h, w, c) = input else {
                return Err(bad("flatten needs a spatial input".into()));
            };
            Ok(FeatureShape::Vector(h * w * c))
        }
        LayerKind::Fc { width, .. } => {
            if *width == 0 {
                return Err(bad("width must be positive".into()));
            }
            // A spatial input is implicitly flattened.
            Ok(FeatureShape::Vector(*width))
        }
    }
}

/// Flat map from dotted parameter names (`conv1.kernels`, `head.bias`)
/// to tensors. Holds the backbone weights plus whatever fusion / head
/// parameters the model variant adds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetworkParams {
    entries: BTreeMap<String, Tensor>,
}

impl NetworkParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }
}

/// He-initialize the backbone's conv and fc parameters, drawing from the
/// given rng in layer order (kernels/weights elementwise, biases zero).
pub fn build_backbone_with_rng<R: Rng>(
    config: &BackboneConfig,
    rng: &mut R,
) -> Result<NetworkParams> {
    config.layer_output_shapes()?;
    let mut params = NetworkParams::new();
    let mut prev = FeatureShape::Spatial(
        config.input_shape[0],
        config.input_shape[1],
        config.input_shape[2],
    );
    for layer in &config.layers {
        match &layer.kind {
            LayerKind::Conv {
                kernel,
                out_channels,
                ..
            } => {
                let FeatureShape::Spatial(_, _, cin) = prev else {
                    unreachable!("validated: conv input is spatial");
                };
                let fan_in = kernel * kernel * cin;
                let kernels = he_tensor(vec![*kernel, *kernel, cin, *out_channels], fan_in, rng);
                params.insert(format!("{}.kernels", layer.name), kernels);
                params.insert(format!("{}.bias", layer.name), Tensor::zeros([*out_channels]));
            }
            LayerKind::Fc { width, .. } => {
                let fan_in = prev.numel();
                let weights = he_tensor(vec![fan_in, *width], fan_in, rng);
                params.insert(format!("{}.weights", layer.name), weights);
                params.insert(format!("{}.bias", layer.name), Tensor::zeros([*width]));
            }
            _ => {}
        }
        prev = propagate(&layer.name, &layer.kind, prev)?;
    }
    Ok(params)
}

/// As [`build_backbone_with_rng`] with a dedicated rng seeded from `seed`.
pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<NetworkParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_backbone_with_rng(config, &mut rng)
}

/// Normal(0, sqrt(2 / fan_in)); sampled in f64 so the stream of draws is
/// the same regardless of the crate's float width.
pub(crate) fn he_tensor<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0f64, std).expect("std is finite and positive");
    Tensor::from_fn(shape, |_| normal.sample(rng) as Real)
}

/// Parameters inserted into a tape, keyed by name. One binding is shared
/// by every branch of a forward pass so gradients accumulate into the
/// same leaves.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: BTreeMap<String, ValueId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Result<ValueId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, ValueId)> {
        self.ids.iter().map(|(k, &v)| (k, v))
    }
}

/// Copy every parameter onto the tape as a leaf, trainable or frozen.
pub fn bind_params(tape: &mut Tape, params: &NetworkParams, trainable: bool) -> BoundParams {
    let mut ids = BTreeMap::new();
    for (name, tensor) in params.iter() {
        let id = tape.leaf(tensor.clone().with_requires_grad(trainable));
        ids.insert(name.clone(), id);
    }
    BoundParams { ids }
}

/// Build a [`BoundParams`] directly from already-placed tape values.
pub fn bound_from_ids(ids: BTreeMap<String, ValueId>) -> BoundParams {
    BoundParams { ids }
}

/// Final embedding plus the raw activation of every tap point.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub final_feature: ValueId,
    pub taps: BTreeMap<String, ValueId>,
}

/// Run the backbone on one image, recording onto `tape`, and collect the
/// tap activations on the way.
pub fn forward_with_taps(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &BackboneConfig,
    image: ValueId,
) -> Result<ForwardOutput> {
    if tape.shape(image) != config.input_shape {
        return Err(Error::shape(
            "forward",
            format!(
                "image shape {:?} does not match configured input {:?}",
                tape.shape(image),
                config.input_shape
            ),
        ));
    }
    let mut current = image;
    let mut taps = BTreeMap::new();
    for layer in &config.layers {
        let with_layer =
            |e: Error| Error::config(format!("layer '{}': forward failed: {e}", layer.name));
        current = match &layer.kind {
            LayerKind::Conv {
                stride,
                padding,
                relu,
                ..
            } => {
                let kernels = bound.id(&format!("{}.kernels", layer.name))?;
                let bias = bound.id(&format!("{}.bias", layer.name))?;
                let conv = tape
                    .conv2d(current, kernels, bias, *stride, *padding)
                    .map_err(with_layer)?;
                if *relu {
                    tape.relu(conv)
                } else {
                    conv
                }
            }
            LayerKind::MaxPool { window, stride } => {
                tape.maxpool2d(current, *window, *stride).map_err(with_layer)?
            }
            LayerKind::GlobalAveragePool => {
                tape.global_average_pool(current).map_err(with_layer)?
            }
            LayerKind::Flatten => tape.flatten(current).map_err(with_layer)?,
            LayerKind::Fc { relu, .. } => {
                let weights = bound.id(&format!("{}.weights", layer.name))?;
                let bias = bound.id(&format!("{}.bias", layer.name))?;
                let input = if tape.shape(current).len() == 3 {
                    tape.flatten(current).map_err(with_layer)?
                } else {
                    current
                };
                let act = if *relu { Activation::Relu } else { Activation::Linear };
                tape.fully_connected(input, weights, bias, act)
                    .map_err(with_layer)?
            }
        };
        if config.tap_points.iter().any(|t| t == &layer.name) {
            taps.insert(layer.name.clone(), current);
        }
    }
    Ok(ForwardOutput {
        final_feature: current,
        taps,
    })
}

/// Forward three images (query, matching instance, non-matching instance)
/// through one shared parameter binding; gradients from any loss on the
/// outputs accumulate into the same weights.
pub fn triplet_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &BackboneConfig,
    query: ValueId,
    positive: ValueId,
    negative: ValueId,
) -> Result<[ForwardOutput; 3]> {
    Ok([
        forward_with_taps(tape, bound, config, query)?,
        forward_with_taps(tape, bound, config, positive)?,
        forward_with_taps(tape, bound, config, negative)?,
    ])
}

/// Inference-only forward: returns the final feature and tap tensors
/// without keeping the tape.
pub fn forward_features(
    params: &NetworkParams,
    config: &BackboneConfig,
    image: &Tensor,
) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false);
    let image_id = tape.leaf(image.clone());
    let out = forward_with_taps(&mut tape, &bound, config, image_id)?;
    let final_feature = tape.tensor(out.final_feature).clone();
    let taps = out
        .taps
        .iter()
        .map(|(name, &id)| (name.clone(), tape.tensor(id).clone()))
        .collect();
    Ok((final_feature, taps))
}

/// Check stored parameters against what the config expects, reporting
/// every mismatched or missing backbone parameter at once. Entries the
/// backbone does not know about (fusion, classifier head) are ignored.
pub fn validate_params(config: &BackboneConfig, params: &NetworkParams) -> Result<()> {
    let expected = config.param_shapes()?;
    let mut problems = Vec::new();
    for (name, shape) in &expected {
        match params.get(name) {
            None => problems.push(format!("{name}: missing (expected shape {shape:?})")),
            Some(t) if t.shape() != &shape[..] => problems.push(format!(
                "{name}: shape {:?} does not match expected {shape:?}",
                t.shape()
            )),
            Some(_) => {}
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "checkpoint does not match backbone config: {}",
            problems.join("; ")
        )))
    }
}

const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    params: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

/// Write every parameter as `<name>.cdtf` plus a `manifest.json` listing
/// names and shapes.
pub fn save_checkpoint(dir: &Path, params: &NetworkParams) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = CheckpointManifest { params: Vec::new() };
    for (name, tensor) in params.iter() {
        write_tensor(&dir.join(format!("{name}.cdtf")), tensor)?;
        manifest.params.push(CheckpointEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
        });
    }
    let path = dir.join(CHECKPOINT_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<NetworkParams> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&raw).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut params = NetworkParams::new();
    for entry in &manifest.params {
        let tensor_path = dir.join(format!("{}.cdtf", entry.name));
        let tensor = read_tensor(&tensor_path)?;
        if tensor.shape() != &entry.shape[..] {
            return Err(Error::format(
                &tensor_path,
                format!(
                    "tensor shape {:?} does not match manifest shape {:?}",
                    tensor.shape(),
                    entry.shape
                ),
            ));
        }
        params.insert(entry.name.clone(), tensor);
    }
    Ok(params)
}

/// 32x32 grayscale net for the pose-aligned task. The conv3 activation
/// (4x4x64) is the tap; the final embedding is a 64-wide fc.
pub fn mini_aligned_net() -> BackboneConfig {
    BackboneConfig {
        input_shape: [32, 32, 1],
        layers: vec![
            conv("conv1", 5, 16, 1, 0),
            pool("pool1"),
            conv("conv2", 3, 32, 1, 0),
            pool("pool2"),
            conv("conv3", 3, 64, 1, 0),
            pool("pool3"),
            LayerSpec {
                name: "fc_final".into(),
                kind: LayerKind::Fc {
                    width: 64,
                    relu: true,
                },
            },
        ],
        tap_points: vec!["conv3".into()],
        final_layer: "fc_final".into(),
    }
}

/// 32x32 3-channel net for the pose-varying task. Two tap blocks
/// (8x8x64 and 4x4x64) feed fusion; the final embedding is a global
/// average pool over 64 channels.
pub fn mini_view_net() -> BackboneConfig {
    BackboneConfig {
        input_shape: [32, 32, 3],
        layers: vec![
            conv("conv1", 3, 16, 1, 1),
            pool("pool1"),
            conv("conv2", 3, 32, 1, 1),
            pool("pool2"),
            conv("blockA", 3, 64, 1, 1),
            pool("pool3"),
            conv("blockB", 3, 64, 1, 1),
            LayerSpec {
                name: "gap_final".into(),
                kind: LayerKind::GlobalAveragePool,
            },
        ],
        tap_points: vec!["blockA".into(), "blockB".into()],
        final_layer: "gap_final".into(),
    }
}

fn conv(name: &str, kernel: usize, out_channels: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::Conv {
            kernel,
            out_channels,
            stride,
            padding,
            relu: true,
        },
    }
}

fn pool(name: &str) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::MaxPool {
            window: 2,
            stride: 2,
        },
    }
}

pub const PRESET_NAMES: [&str; 2] = ["mini_aligned_net", "mini_view_net"];

pub fn preset(name: &str) -> Option<BackboneConfig> {
    match name {
        "mini_aligned_net" => Some(mini_aligned_net()),
        "mini_view_net" => Some(mini_view_net()),
        _ => None,
    }
}
