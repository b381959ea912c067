use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::se_param_count;
use crate::error::{Error, Result};
use crate::ops::conv::conv_output_size;

pub const DESCRIPTOR_VERSION: u32 = 1;

/// Name that refers to the network input in `from` / `shortcut` fields.
pub const INPUT: &str = "input";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    Se,
    Cra,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Se => "se",
            Variant::Cra => "cra",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "se" => Ok(Variant::Se),
            "cra" => Ok(Variant::Cra),
            other => Err(Error::InvalidConfig(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetShape {
    #[serde(rename = "imagenet-shape")]
    Imagenet,
    #[serde(rename = "cifar-shape")]
    Cifar,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        groups: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Sigmoid,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    AdaptiveAvgPool {
        target: [usize; 2],
    },
    GlobalAvgPool,
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
    Cra {
        channels: usize,
        target: [usize; 2],
    },
    Se {
        channels: usize,
        ratio: usize,
    },
    /// Residual sum of the previous layer's output and the named shortcut.
    Add {
        shortcut: String,
    },
    /// Parameter-free shortcut: strided subsampling plus zero channel padding.
    PadShortcut {
        out_channels: usize,
        stride: usize,
    },
    Softmax,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::Cra { .. } => "cra",
            LayerKind::Se { .. } => "se",
            LayerKind::Add { .. } => "add",
            LayerKind::PadShortcut { .. } => "pad_shortcut",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn is_attention(&self) -> bool {
        matches!(self, LayerKind::Cra { .. } | LayerKind::Se { .. })
    }

    /// Trainable elements this layer owns. Batch-norm running statistics are not trainable.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerKind::Conv { in_channels, out_channels, kernel, groups, bias, .. } => {
                kernel[0] * kernel[1] * in_channels * out_channels / groups + if bias { out_channels } else { 0 }
            }
            LayerKind::BatchNorm { channels } => 2 * channels,
            LayerKind::FullyConnected { in_features, out_features } => in_features * out_features + out_features,
            LayerKind::Cra { channels, target } => channels * (target[0] * target[1] + 1),
            LayerKind::Se { channels, ratio } => se_param_count(channels, ratio),
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Producer of this layer's input; `None` means the preceding layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    /// Per-sample shapes, `[C, H, W]` or `[F]`.
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self { name: name.into(), kind, from: None, input_shape: Vec::new(), output_shape: Vec::new(), stage: None, block: None }
    }

    pub fn from(mut self, producer: impl Into<String>) -> Self {
        self.from = Some(producer.into());
        self
    }

    pub fn site(mut self, stage: usize, block: usize) -> Self {
        self.stage = Some(stage);
        self.block = Some(block);
        self
    }

    pub fn param_count(&self) -> usize {
        self.kind.param_count()
    }
}

/// A network as an ordered list of layers with resolved per-layer shapes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub version: u32,
    pub name: String,
    pub variant: Variant,
    pub dataset: DatasetShape,
    /// `[C, H, W]` of one input image.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cra_target: Option<[usize; 2]>,
    pub layers: Vec<LayerSpec>,
}

fn spatial(shape: &[usize], layer: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape(format!("layer {layer} needs a [C, H, W] input, got {shape:?}"))),
    }
}

/// Output shape of `kind` applied to `input`. CRA targets larger than the map are an error here;
/// builders clamp before calling.
pub fn infer_output_shape(name: &str, kind: &LayerKind, input: &[usize]) -> Result<Vec<usize>> {
    let mismatch = |what: String| Err(Error::InvalidShape(format!("layer {name}: {what}")));
    match kind {
        LayerKind::Conv { in_channels, out_channels, kernel, stride, padding, groups, .. } => {
            let (c, h, w) = spatial(input, name)?;
            if c != *in_channels {
                return mismatch(format!("expects {in_channels} channels, got {c}"));
            }
            if *groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
                return Err(Error::InvalidConfig(format!("layer {name}: groups {groups} do not divide channels")));
            }
            Ok(vec![
                *out_channels,
                conv_output_size(h, kernel[0], stride[0], padding[0])?,
                conv_output_size(w, kernel[1], stride[1], padding[1])?,
            ])
        }
        LayerKind::BatchNorm { channels } => {
            if input.first() != Some(channels) {
                return mismatch(format!("batch norm over {channels} channels given {input:?}"));
            }
            Ok(input.to_vec())
        }
        LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Softmax => Ok(input.to_vec()),
        LayerKind::MaxPool { kernel, stride, padding } => {
            let (c, h, w) = spatial(input, name)?;
            Ok(vec![c, conv_output_size(h, *kernel, *stride, *padding)?, conv_output_size(w, *kernel, *stride, *padding)?])
        }
        LayerKind::AdaptiveAvgPool { target } => {
            let (c, h, w) = spatial(input, name)?;
            if target[0] == 0 || target[1] == 0 || target[0] > h || target[1] > w {
                return Err(Error::InvalidTarget { target: (target[0], target[1]), input: (h, w) });
            }
            Ok(vec![c, target[0], target[1]])
        }
        LayerKind::GlobalAvgPool => Ok(vec![spatial(input, name)?.0]),
        LayerKind::FullyConnected { in_features, out_features } => {
            if input != [*in_features] {
                return mismatch(format!("expects [{in_features}] features, got {input:?}"));
            }
            Ok(vec![*out_features])
        }
        LayerKind::Cra { channels, target } => {
            let (c, h, w) = spatial(input, name)?;
            if c != *channels {
                return mismatch(format!("CRA over {channels} channels given {c}"));
            }
            if target[0] == 0 || target[1] == 0 || target[0] > h || target[1] > w {
                return Err(Error::InvalidTarget { target: (target[0], target[1]), input: (h, w) });
            }
            Ok(input.to_vec())
        }
        LayerKind::Se { channels, ratio } => {
            let (c, _, _) = spatial(input, name)?;
            if c != *channels || *ratio == 0 || channels % ratio != 0 {
                return Err(Error::InvalidConfig(format!("layer {name}: SE ratio {ratio} over {channels} channels given {c}")));
            }
            Ok(input.to_vec())
        }
        LayerKind::Add { .. } => Ok(input.to_vec()),
        LayerKind::PadShortcut { out_channels, stride } => {
            let (c, h, w) = spatial(input, name)?;
            if *out_channels < c || *stride == 0 {
                return Err(Error::InvalidConfig(format!("layer {name}: cannot pad {c} channels to {out_channels}")));
            }
            Ok(vec![*out_channels, h.div_ceil(*stride), w.div_ceil(*stride)])
        }
    }
}

impl ArchDescriptor {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let desc: Self = serde_json::from_str(s)?;
        if desc.version != DESCRIPTOR_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported descriptor version {}", desc.version)));
        }
        desc.validate()?;
        Ok(desc)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Attention layers in network order.
    pub fn attention_sites(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind.is_attention())
    }

    pub fn cra_sites(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| matches!(l.kind, LayerKind::Cra { .. }))
    }

    /// Layers with attention modules removed; identical across variants of one architecture.
    pub fn without_attention(&self) -> Vec<&LayerSpec> {
        self.layers.iter().filter(|l| !l.kind.is_attention()).collect()
    }

    /// Recomputes every layer's shapes for a new input resolution. CRA targets restart from the
    /// configured target and are clamped to the maps they see.
    pub fn with_input_size(&self, height: usize, width: usize) -> Result<Self> {
        let mut out = self.clone();
        out.input_shape = vec![self.input_shape[0], height, width];
        if let Some(t) = self.cra_target {
            for layer in &mut out.layers {
                if let LayerKind::Cra { target, .. } = &mut layer.kind {
                    *target = t;
                }
            }
        }
        out.resolve_shapes(true)?;
        Ok(out)
    }

    /// Fills `input_shape` / `output_shape` from the layer kinds.
    pub(crate) fn resolve_shapes(&mut self, clamp_cra: bool) -> Result<()> {
        let mut outputs: HashMap<String, Vec<usize>> = HashMap::new();
        outputs.insert(INPUT.to_string(), self.input_shape.clone());
        let mut prev = self.input_shape.clone();
        for layer in &mut self.layers {
            let input = match &layer.from {
                Some(src) => outputs
                    .get(src)
                    .cloned()
                    .ok_or_else(|| Error::InvalidConfig(format!("layer {} reads unknown layer {src}", layer.name)))?,
                None => prev.clone(),
            };
            if clamp_cra {
                if let (LayerKind::Cra { target, .. }, [_, h, w]) = (&mut layer.kind, input.as_slice()) {
                    *target = [target[0].min(*h), target[1].min(*w)];
                }
            }
            if let LayerKind::Add { shortcut } = &layer.kind {
                let other = outputs
                    .get(shortcut)
                    .ok_or_else(|| Error::InvalidConfig(format!("layer {} adds unknown layer {shortcut}", layer.name)))?;
                if *other != input {
                    return Err(Error::InvalidShape(format!(
                        "residual add {}: main branch {input:?} vs shortcut {other:?}",
                        layer.name
                    )));
                }
            }
            let output = infer_output_shape(&layer.name, &layer.kind, &input)?;
            layer.input_shape = input;
            layer.output_shape = output.clone();
            if outputs.insert(layer.name.clone(), output.clone()).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate layer name {}", layer.name)));
            }
            prev = output;
        }
        Ok(())
    }

    /// Checks the shape chain, references, attention placement and the classifier width.
    pub fn validate(&self) -> Result<()> {
        let mut resolved = self.clone();
        resolved.resolve_shapes(false)?;
        for (a, b) in resolved.layers.iter().zip(&self.layers) {
            if a.input_shape != b.input_shape || a.output_shape != b.output_shape {
                return Err(Error::InvalidShape(format!(
                    "layer {} records {:?} -> {:?} but the chain gives {:?} -> {:?}",
                    b.name, b.input_shape, b.output_shape, a.input_shape, a.output_shape
                )));
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.kind.is_attention() {
                let next = self.layers.get(i + 1).map(|l| &l.kind);
                if !matches!(next, Some(LayerKind::Add { .. })) {
                    return Err(Error::InvalidConfig(format!(
                        "attention layer {} must directly precede a residual add",
                        layer.name
                    )));
                }
                if layer.stage.is_none() || layer.block.is_none() {
                    return Err(Error::InvalidConfig(format!("attention layer {} lacks stage/block ids", layer.name)));
                }
            }
        }
        let logits = self.layers.iter().rev().find(|l| !matches!(l.kind, LayerKind::Softmax));
        match logits {
            Some(l) if l.output_shape == [self.num_classes] => Ok(()),
            _ => Err(Error::InvalidConfig(format!("network does not end in {} logits", self.num_classes))),
        }
    }
}
