//! Executable models materialized from [`ArchDescriptor`]s, and their on-disk checkpoints.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchDescriptor, LayerKind, INPUT};
use crate::attention::{cra_forward_graph, se_forward_graph, site_key, AttentionTrace, CraConfig, SeVars};
use crate::autograd::{Graph, GraphMode, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::{BatchNormConfig, BatchStats, BnMode, ConvGeometry, MaxPoolGeometry, RunningStats};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    FcWeight,
    FcBias,
    CraKernel,
    CraBias,
    SeWeight,
    SeBias,
}

impl ParamRole {
    /// Weight decay applies to weights and kernels only.
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::ConvWeight | ParamRole::FcWeight | ParamRole::CraKernel | ParamRole::SeWeight)
    }

    pub fn is_attention(self) -> bool {
        matches!(self, ParamRole::CraKernel | ParamRole::CraBias | ParamRole::SeWeight | ParamRole::SeBias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Element = f32> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InitOptions {
    pub seed: u64,
    /// Start every attention module at zero parameters, so CRA attentions begin at exactly 0.5.
    pub zero_attention: bool,
}

#[derive(Clone, Debug)]
struct LayerBinding {
    params: std::ops::Range<usize>,
    stats: Option<usize>,
    /// Index of the layer producing this layer's input; `None` is the network input.
    input: Option<usize>,
    shortcut: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    desc: ArchDescriptor,
    params: Vec<Param<T>>,
    running: Vec<RunningStats<T>>,
    bindings: Vec<LayerBinding>,
    pub bn: BatchNormConfig,
}

/// Handles produced by one forward pass.
pub struct Forward {
    pub logits: Var,
    /// One handle per model parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// `(site key, attentions [N, C])` for every CRA site.
    pub attentions: Vec<(String, Var)>,
}

/// Output of a training-mode forward: handles plus the batch statistics to fold into the model.
pub struct TrainForward<T: Element> {
    pub forward: Forward,
    pub batch_stats: Vec<BatchStats<T>>,
}

fn param_specs(layer: &crate::arch::LayerSpec) -> Vec<(String, ParamRole, Vec<usize>)> {
    let n = &layer.name;
    match layer.kind {
        LayerKind::Conv { in_channels, out_channels, kernel, groups, bias, .. } => {
            let mut v = vec![(format!("{n}.weight"), ParamRole::ConvWeight, vec![out_channels, in_channels / groups, kernel[0], kernel[1]])];
            if bias {
                v.push((format!("{n}.bias"), ParamRole::ConvBias, vec![out_channels]));
            }
            v
        }
        LayerKind::BatchNorm { channels } => vec![
            (format!("{n}.gamma"), ParamRole::BnGamma, vec![channels]),
            (format!("{n}.beta"), ParamRole::BnBeta, vec![channels]),
        ],
        LayerKind::FullyConnected { in_features, out_features } => vec![
            (format!("{n}.weight"), ParamRole::FcWeight, vec![out_features, in_features]),
            (format!("{n}.bias"), ParamRole::FcBias, vec![out_features]),
        ],
        LayerKind::Cra { channels, target } => vec![
            (format!("{n}.kernel"), ParamRole::CraKernel, vec![channels, target[0], target[1]]),
            (format!("{n}.bias"), ParamRole::CraBias, vec![channels]),
        ],
        LayerKind::Se { channels, ratio } => {
            let r = channels / ratio;
            vec![
                (format!("{n}.reduce.weight"), ParamRole::SeWeight, vec![r, channels]),
                (format!("{n}.reduce.bias"), ParamRole::SeBias, vec![r]),
                (format!("{n}.expand.weight"), ParamRole::SeWeight, vec![channels, r]),
                (format!("{n}.expand.bias"), ParamRole::SeBias, vec![channels]),
            ]
        }
        _ => Vec::new(),
    }
}

/// He-normal standard deviation for a parameter, or `None` for constant initialization.
fn init_std(role: ParamRole, shape: &[usize]) -> Option<f64> {
    let fan_in: usize = match role {
        ParamRole::ConvWeight => shape[1..].iter().product(),
        ParamRole::FcWeight | ParamRole::SeWeight => shape[1],
        ParamRole::CraKernel => shape[1] * shape[2],
        _ => return None,
    };
    Some((2.0 / fan_in as f64).sqrt())
}

fn bind_layers(desc: &ArchDescriptor) -> Result<(Vec<LayerBinding>, Vec<(String, ParamRole, Vec<usize>)>, Vec<usize>)> {
    let mut names: HashMap<&str, usize> = HashMap::new();
    let mut bindings = Vec::with_capacity(desc.layers.len());
    let mut specs = Vec::new();
    let mut stat_channels = Vec::new();
    let lookup = |names: &HashMap<&str, usize>, name: &str, at: &str| -> Result<Option<usize>> {
        if name == INPUT {
            return Ok(None);
        }
        names
            .get(name)
            .map(|&i| Some(i))
            .ok_or_else(|| Error::InvalidConfig(format!("layer {at} refers to unknown layer {name}")))
    };
    for (i, layer) in desc.layers.iter().enumerate() {
        let input = match &layer.from {
            Some(f) => lookup(&names, f, &layer.name)?,
            None => i.checked_sub(1),
        };
        let shortcut = match &layer.kind {
            LayerKind::Add { shortcut } => lookup(&names, shortcut, &layer.name)?,
            _ => None,
        };
        let start = specs.len();
        specs.extend(param_specs(layer));
        let stats = match layer.kind {
            LayerKind::BatchNorm { channels } => {
                stat_channels.push(channels);
                Some(stat_channels.len() - 1)
            }
            _ => None,
        };
        bindings.push(LayerBinding { params: start..specs.len(), stats, input, shortcut });
        names.insert(&layer.name, i);
    }
    Ok((bindings, specs, stat_channels))
}

impl<T: Element> Model<T> {
    /// Binds freshly initialized parameters: He-normal weights, unit batch-norm scale, zero biases.
    /// Identical seeds give bit-identical parameters.
    pub fn materialize(desc: &ArchDescriptor, options: InitOptions) -> Result<Self> {
        desc.validate()?;
        let (bindings, specs, stat_channels) = bind_layers(desc)?;
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut params = Vec::with_capacity(specs.len());
        for (name, role, shape) in specs {
            let mut value = Tensor::zeros(shape.clone())?;
            if role == ParamRole::BnGamma {
                value = Tensor::full(shape.clone(), T::one())?;
            }
            if let Some(std) = init_std(role, &shape) {
                if !(options.zero_attention && role.is_attention()) {
                    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                    for v in value.data_mut() {
                        *v = T::from_f64_lossy(normal.sample(&mut rng));
                    }
                }
            }
            params.push(Param { name, role, value });
        }
        let running = stat_channels.into_iter().map(RunningStats::new).collect();
        Ok(Self { desc: desc.clone(), params, running, bindings, bn: BatchNormConfig::default() })
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.desc
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.desc.num_classes
    }

    /// Converts parameters and running statistics to another element type.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            desc: self.desc.clone(),
            params: self.params.iter().map(|p| Param { name: p.name.clone(), role: p.role, value: p.value.cast() }).collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                    var: r.var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
            bindings: self.bindings.clone(),
            bn: self.bn,
        }
    }

    /// Records the network on `g` and returns the logits (the softmax layer is left to the loss).
    /// Parameters enter as differentiable leaves; batch statistics from training mode are
    /// returned rather than applied.
    pub fn forward_graph(&self, g: &mut Graph<T>, input: Var, mode: BnMode) -> Result<TrainForward<T>> {
        let expected = &self.desc.input_shape;
        let shape = g.shape(input)?;
        if shape.len() != 4 || shape[1..] != expected[..] {
            return Err(Error::InvalidShape(format!("model expects [N, {expected:?}] input, got {shape:?}")));
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf(p.value.clone())).collect();
        let mut outs: Vec<Var> = Vec::with_capacity(self.desc.layers.len());
        let mut attentions = Vec::new();
        let mut batch_stats = Vec::new();
        let mut logits = None;
        for (layer, b) in self.desc.layers.iter().zip(&self.bindings) {
            let x = b.input.map_or(input, |i| outs[i]);
            let p = &params[b.params.clone()];
            let y = match &layer.kind {
                LayerKind::Conv { stride, padding, groups, .. } => {
                    let geo = ConvGeometry { stride: (stride[0], stride[1]), padding: (padding[0], padding[1]), groups: *groups };
                    g.conv2d(x, p[0], p.get(1).copied(), geo)?
                }
                LayerKind::BatchNorm { .. } => {
                    let stats = &self.running[b.stats.expect("batch norm has statistics")];
                    let (y, batch) = g.batch_norm(x, p[0], p[1], stats, mode, self.bn.eps)?;
                    batch_stats.extend(batch);
                    y
                }
                LayerKind::Relu => g.relu(x)?,
                LayerKind::Sigmoid => g.sigmoid(x)?,
                LayerKind::MaxPool { kernel, stride, padding } => {
                    g.max_pool(x, MaxPoolGeometry { kernel: *kernel, stride: *stride, padding: *padding })?
                }
                LayerKind::AdaptiveAvgPool { target } => g.adaptive_avg_pool(x, (target[0], target[1]))?,
                LayerKind::GlobalAvgPool => g.global_avg_pool(x)?,
                LayerKind::FullyConnected { .. } => g.fully_connected(x, p[0], Some(p[1]))?,
                LayerKind::Cra { channels, target } => {
                    let config = CraConfig::new(*channels, (target[0], target[1]))?;
                    let (y, v) = cra_forward_graph(g, x, p[0], p[1], &config)?;
                    let (stage, block) = (layer.stage.unwrap_or(0), layer.block.unwrap_or(0));
                    attentions.push((site_key(stage, block), v));
                    y
                }
                LayerKind::Se { .. } => {
                    let vars = SeVars { reduce_weight: p[0], reduce_bias: p[1], expand_weight: p[2], expand_bias: p[3] };
                    se_forward_graph(g, x, vars)?.0
                }
                LayerKind::Add { .. } => {
                    let s = b.shortcut.map_or(input, |i| outs[i]);
                    g.add(x, s)?
                }
                LayerKind::PadShortcut { out_channels, stride } => g.pad_shortcut(x, *out_channels, *stride)?,
                LayerKind::Softmax => {
                    logits.get_or_insert(x);
                    x
                }
            };
            outs.push(y);
        }
        let logits = logits.or(outs.last().copied()).unwrap_or(input);
        Ok(TrainForward { forward: Forward { logits, params, attentions }, batch_stats })
    }

    /// Folds training-mode batch statistics (in forward order) into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::SizeMismatch(format!("{} batch statistics for {} batch norms", stats.len(), self.running.len())));
        }
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s, self.bn.momentum);
        }
        Ok(())
    }

    /// Evaluation-mode logits `[N, num_classes]`.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::with_mode(GraphMode::Inference);
        let x = g.constant(input.clone());
        let f = self.forward_graph(&mut g, x, BnMode::Eval)?;
        Ok(g.value(f.forward.logits)?.clone())
    }

    /// Arg-max class per sample.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(input)?;
        let k = self.desc.num_classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
            })
            .collect())
    }

    /// Evaluation-mode CRA attentions for one image `[C, H, W]` or `[1, C, H, W]`.
    pub fn attention_trace(&self, image: &Tensor<T>) -> Result<AttentionTrace> {
        if self.desc.cra_sites().next().is_none() {
            return Err(Error::EmptyTrace);
        }
        let input = match image.shape() {
            [c, h, w] => image.reshape(vec![1, *c, *h, *w])?,
            [1, ..] => image.clone(),
            s => return Err(Error::InvalidShape(format!("attention trace takes one image, got {s:?}"))),
        };
        let mut g = Graph::with_mode(GraphMode::Inference);
        let x = g.constant(input);
        let f = self.forward_graph(&mut g, x, BnMode::Eval)?;
        let mut sites = Vec::with_capacity(f.forward.attentions.len());
        for (key, v) in f.forward.attentions {
            sites.push((key, g.value(v)?.data().iter().map(|a| a.as_f64() as f32).collect()));
        }
        Ok(AttentionTrace { sites })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    role: ParamRole,
    file: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    bn_momentum: f64,
    bn_eps: f64,
    params: Vec<ManifestEntry>,
    running_stats: Vec<String>,
}

const DESCRIPTOR_FILE: &str = "descriptor.json";
const MANIFEST_FILE: &str = "manifest.json";

impl Model<f32> {
    /// Writes `descriptor.json`, `manifest.json` (parameter names in graph order) and one
    /// tensor file per parameter and per batch-norm statistic.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(DESCRIPTOR_FILE), self.desc.to_json())?;
        let mut entries = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let file = format!("p{i:04}.crat");
            p.value.save(dir.join(&file))?;
            entries.push(ManifestEntry { name: p.name.clone(), role: p.role, file, shape: p.value.shape().to_vec() });
        }
        let mut stat_files = Vec::with_capacity(self.running.len());
        for (i, r) in self.running.iter().enumerate() {
            let file = format!("bn{i:03}.crat");
            let c = r.channels();
            let mut data = r.mean.clone();
            data.extend_from_slice(&r.var);
            Tensor::new(vec![2, c], data)?.save(dir.join(&file))?;
            stat_files.push(file);
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            bn_momentum: self.bn.momentum,
            bn_eps: self.bn.eps,
            params: entries,
            running_stats: stat_files,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let desc = ArchDescriptor::from_json(&fs::read_to_string(dir.join(DESCRIPTOR_FILE))?)?;
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported checkpoint manifest version {}", manifest.version)));
        }
        let mut model = Model::materialize(&desc, InitOptions::default())?;
        model.bn = BatchNormConfig { momentum: manifest.bn_momentum, eps: manifest.bn_eps };
        if manifest.params.len() != model.params.len() || manifest.running_stats.len() != model.running.len() {
            return Err(Error::InvalidConfig("checkpoint manifest does not match its descriptor".into()));
        }
        for (p, e) in model.params.iter_mut().zip(&manifest.params) {
            let t = Tensor::load(dir.join(&e.file))?;
            if e.name != p.name || t.shape() != p.value.shape() {
                return Err(Error::InvalidConfig(format!("checkpoint tensor {} does not match parameter {}", e.name, p.name)));
            }
            p.value = t;
        }
        for (r, file) in model.running.iter_mut().zip(&manifest.running_stats) {
            let t = Tensor::load(dir.join(file))?;
            let c = r.channels();
            if t.shape() != [2, c] {
                return Err(Error::InvalidConfig(format!("running statistics {file} have shape {:?}", t.shape())));
            }
            r.mean = t.data()[..c].to_vec();
            r.var = t.data()[c..].to_vec();
        }
        Ok(model)
    }
}
