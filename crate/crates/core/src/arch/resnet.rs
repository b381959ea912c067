//! ResNet descriptors for ImageNet-shaped (bottleneck, depth 50/101) and CIFAR-shaped
//! (basic block, depth 56/110) inputs, plus a one-block toy network for desk-scale checks.
//!
//! Attention modules sit after the last batch norm of each residual block and
//! before the residual sum. Bottleneck blocks downsample on the 3x3 convolution
//! with a strided 1x1 projection shortcut; CIFAR blocks use parameter-free
//! subsample-and-zero-pad shortcuts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::descriptor::{ArchDescriptor, DatasetShape, LayerKind, LayerSpec, Variant, DESCRIPTOR_VERSION, INPUT};
use crate::attention::SE_DEFAULT_RATIO;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    ResNet50,
    ResNet101,
    ResNet56,
    ResNet110,
    /// Stem convolution, one residual basic block, classifier.
    Toy,
}

impl Arch {
    pub fn from_depth(depth: u32) -> Result<Self> {
        match depth {
            50 => Ok(Arch::ResNet50),
            101 => Ok(Arch::ResNet101),
            56 => Ok(Arch::ResNet56),
            110 => Ok(Arch::ResNet110),
            d => Err(Error::UnsupportedArchitecture(format!("ResNet depth {d} (supported: 50, 101, 56, 110)"))),
        }
    }

    pub fn dataset(self) -> DatasetShape {
        match self {
            Arch::ResNet50 | Arch::ResNet101 => DatasetShape::Imagenet,
            Arch::ResNet56 | Arch::ResNet110 | Arch::Toy => DatasetShape::Cifar,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::ResNet50 => "resnet50",
            Arch::ResNet101 => "resnet101",
            Arch::ResNet56 => "resnet56",
            Arch::ResNet110 => "resnet110",
            Arch::Toy => "toy",
        }
    }

    /// Table-style display name, e.g. `CRA-ResNet-50`.
    pub fn display_name(self, variant: Variant) -> String {
        let base = match self {
            Arch::ResNet50 => "ResNet-50",
            Arch::ResNet101 => "ResNet-101",
            Arch::ResNet56 => "ResNet-56",
            Arch::ResNet110 => "ResNet-110",
            Arch::Toy => "Toy",
        };
        match variant {
            Variant::Base => base.to_string(),
            Variant::Se => format!("SE-{base}"),
            Variant::Cra => format!("CRA-{base}"),
        }
    }

    pub fn default_input_size(self) -> usize {
        match self.dataset() {
            DatasetShape::Imagenet => 224,
            DatasetShape::Cifar => 32,
        }
    }

    pub fn default_num_classes(self) -> usize {
        match self.dataset() {
            DatasetShape::Imagenet => 1000,
            DatasetShape::Cifar => 10,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet50" => Ok(Arch::ResNet50),
            "resnet101" => Ok(Arch::ResNet101),
            "resnet56" => Ok(Arch::ResNet56),
            "resnet110" => Ok(Arch::ResNet110),
            "toy" => Ok(Arch::Toy),
            other => Err(Error::UnsupportedArchitecture(other.to_string())),
        }
    }
}

/// Default pooled size: the 7x7 last-stage map for ImageNet shapes, 8x8 for CIFAR shapes.
pub fn default_cra_target(dataset: DatasetShape) -> (usize, usize) {
    match dataset {
        DatasetShape::Imagenet => (7, 7),
        DatasetShape::Cifar => (8, 8),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub arch: Arch,
    pub variant: Variant,
    pub num_classes: usize,
    pub cra_target: Option<(usize, usize)>,
    /// Square input side; `None` uses the dataset default.
    pub input_size: Option<usize>,
    pub se_ratio: usize,
    /// Channel width of the toy network.
    pub toy_width: usize,
}

impl ResNetConfig {
    pub fn new(arch: Arch, variant: Variant) -> Self {
        Self {
            arch,
            variant,
            num_classes: arch.default_num_classes(),
            cra_target: (variant == Variant::Cra).then(|| default_cra_target(arch.dataset())),
            input_size: None,
            se_ratio: SE_DEFAULT_RATIO,
            toy_width: 8,
        }
    }

    pub fn build(&self) -> Result<ArchDescriptor> {
        build(self)
    }
}

/// Builds a ResNet by depth. The CRA variant needs an explicit pooled size.
pub fn build_resnet(depth: u32, variant: Variant, num_classes: usize, cra_target: Option<(usize, usize)>) -> Result<ArchDescriptor> {
    let arch = Arch::from_depth(depth)?;
    build(&ResNetConfig { num_classes, cra_target, ..ResNetConfig::new(arch, variant) })
}

/// Toy network used for gradient checks and desk-scale training.
pub fn build_toy(variant: Variant, num_classes: usize, width: usize, input_size: usize, cra_target: Option<(usize, usize)>) -> Result<ArchDescriptor> {
    build(&ResNetConfig { num_classes, cra_target, input_size: Some(input_size), toy_width: width, ..ResNetConfig::new(Arch::Toy, variant) })
}

struct Builder {
    layers: Vec<LayerSpec>,
    variant: Variant,
    cra_target: [usize; 2],
    se_ratio: usize,
}

impl Builder {
    fn push(&mut self, layer: LayerSpec) -> String {
        let name = layer.name.clone();
        self.layers.push(layer);
        name
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: String, from: Option<&str>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> String {
        let mut l = LayerSpec::new(
            name,
            LayerKind::Conv {
                in_channels: cin,
                out_channels: cout,
                kernel: [k, k],
                stride: [stride, stride],
                padding: [pad, pad],
                groups: 1,
                bias: false,
            },
        );
        l.from = from.map(str::to_string);
        self.push(l)
    }

    fn bn(&mut self, name: String, c: usize) -> String {
        self.push(LayerSpec::new(name, LayerKind::BatchNorm { channels: c }))
    }

    fn relu(&mut self, name: String) -> String {
        self.push(LayerSpec::new(name, LayerKind::Relu))
    }

    fn attention(&mut self, prefix: &str, channels: usize, stage: usize, block: usize) {
        match self.variant {
            Variant::Base => {}
            Variant::Se => {
                self.push(LayerSpec::new(format!("{prefix}.se"), LayerKind::Se { channels, ratio: self.se_ratio }).site(stage, block));
            }
            Variant::Cra => {
                self.push(LayerSpec::new(format!("{prefix}.cra"), LayerKind::Cra { channels, target: self.cra_target }).site(stage, block));
            }
        }
    }

    fn residual_tail(&mut self, prefix: &str, shortcut: String, stage: usize, block: usize) -> String {
        self.push(LayerSpec::new(format!("{prefix}.add"), LayerKind::Add { shortcut }).site(stage, block));
        self.relu(format!("{prefix}.relu"))
    }

    #[allow(clippy::too_many_arguments)]
    fn bottleneck(&mut self, input: &str, cin: usize, mid: usize, cout: usize, stride: usize, stage: usize, block: usize) -> String {
        let p = format!("s{stage}.b{block}");
        let shortcut = if stride != 1 || cin != cout {
            self.conv(format!("{p}.proj.conv"), Some(input), cin, cout, 1, stride, 0);
            self.bn(format!("{p}.proj.bn"), cout)
        } else {
            input.to_string()
        };
        self.conv(format!("{p}.conv1"), Some(input), cin, mid, 1, 1, 0);
        self.bn(format!("{p}.bn1"), mid);
        self.relu(format!("{p}.relu1"));
        self.conv(format!("{p}.conv2"), None, mid, mid, 3, stride, 1);
        self.bn(format!("{p}.bn2"), mid);
        self.relu(format!("{p}.relu2"));
        self.conv(format!("{p}.conv3"), None, mid, cout, 1, 1, 0);
        self.bn(format!("{p}.bn3"), cout);
        self.attention(&p, cout, stage, block);
        self.residual_tail(&p, shortcut, stage, block)
    }

    #[allow(clippy::too_many_arguments)]
    fn basic(&mut self, input: &str, cin: usize, cout: usize, stride: usize, stage: usize, block: usize) -> String {
        let p = format!("s{stage}.b{block}");
        let shortcut = if stride != 1 || cin != cout {
            let l = LayerSpec::new(format!("{p}.shortcut"), LayerKind::PadShortcut { out_channels: cout, stride }).from(input);
            self.push(l)
        } else {
            input.to_string()
        };
        self.conv(format!("{p}.conv1"), Some(input), cin, cout, 3, stride, 1);
        self.bn(format!("{p}.bn1"), cout);
        self.relu(format!("{p}.relu1"));
        self.conv(format!("{p}.conv2"), None, cout, cout, 3, 1, 1);
        self.bn(format!("{p}.bn2"), cout);
        self.attention(&p, cout, stage, block);
        self.residual_tail(&p, shortcut, stage, block)
    }

    fn head(&mut self, features: usize, classes: usize) {
        self.push(LayerSpec::new("head.gap", LayerKind::GlobalAvgPool));
        self.push(LayerSpec::new("head.fc", LayerKind::FullyConnected { in_features: features, out_features: classes }));
        self.push(LayerSpec::new("head.softmax", LayerKind::Softmax));
    }
}

pub fn build(config: &ResNetConfig) -> Result<ArchDescriptor> {
    let arch = config.arch;
    let dataset = arch.dataset();
    if config.num_classes == 0 {
        return Err(Error::InvalidConfig("num_classes must be positive".into()));
    }
    let target = match (config.variant, config.cra_target) {
        (Variant::Cra, None) => return Err(Error::MissingConfig("the cra variant needs a pooled target (h, w)".into())),
        (Variant::Cra, Some((h, w))) if h == 0 || w == 0 => {
            return Err(Error::InvalidConfig(format!("CRA target ({h}, {w}) must be positive")))
        }
        (_, t) => t.unwrap_or((1, 1)),
    };
    let size = config.input_size.unwrap_or(arch.default_input_size());
    match (arch, dataset) {
        (Arch::Toy, _) if size < 4 => return Err(Error::UnsupportedArchitecture(format!("toy network needs input >= 4, got {size}"))),
        (Arch::Toy, _) => {}
        (_, DatasetShape::Cifar) if size != 32 => {
            return Err(Error::UnsupportedArchitecture(format!("{arch} is a 32x32 CIFAR-shape network, not {size}x{size}")))
        }
        (_, DatasetShape::Imagenet) if size < 32 => {
            return Err(Error::UnsupportedArchitecture(format!("{arch} needs an input of at least 32x32, got {size}")))
        }
        _ => {}
    }
    if config.variant == Variant::Se && config.se_ratio == 0 {
        return Err(Error::InvalidConfig("SE ratio must be positive".into()));
    }

    let mut b = Builder { layers: Vec::new(), variant: config.variant, cra_target: [target.0, target.1], se_ratio: config.se_ratio };
    let features = match arch {
        Arch::ResNet50 | Arch::ResNet101 => {
            let blocks: [usize; 4] = if arch == Arch::ResNet50 { [3, 4, 6, 3] } else { [3, 4, 23, 3] };
            b.conv("stem.conv".into(), Some(INPUT), 3, 64, 7, 2, 3);
            b.bn("stem.bn".into(), 64);
            b.relu("stem.relu".into());
            let mut x = b.push(LayerSpec::new("stem.maxpool", LayerKind::MaxPool { kernel: 3, stride: 2, padding: 1 }));
            let mut cin = 64;
            for (s, (&n, mid)) in blocks.iter().zip([64, 128, 256, 512]).enumerate() {
                for blk in 0..n {
                    let stride = if blk == 0 && s > 0 { 2 } else { 1 };
                    x = b.bottleneck(&x, cin, mid, mid * 4, stride, s + 1, blk + 1);
                    cin = mid * 4;
                }
            }
            cin
        }
        Arch::ResNet56 | Arch::ResNet110 => {
            let n = if arch == Arch::ResNet56 { 9 } else { 18 };
            b.conv("stem.conv".into(), Some(INPUT), 3, 16, 3, 1, 1);
            b.bn("stem.bn".into(), 16);
            let mut x = b.relu("stem.relu".into());
            let mut cin = 16;
            for (s, width) in [16, 32, 64].into_iter().enumerate() {
                for blk in 0..n {
                    let stride = if blk == 0 && s > 0 { 2 } else { 1 };
                    x = b.basic(&x, cin, width, stride, s + 1, blk + 1);
                    cin = width;
                }
            }
            cin
        }
        Arch::Toy => {
            let w = config.toy_width;
            if w == 0 || (config.variant == Variant::Se && !w.is_multiple_of(config.se_ratio)) {
                return Err(Error::InvalidConfig(format!("toy width {w} incompatible with SE ratio {}", config.se_ratio)));
            }
            b.conv("stem.conv".into(), Some(INPUT), 3, w, 3, 1, 1);
            b.bn("stem.bn".into(), w);
            let x = b.relu("stem.relu".into());
            b.basic(&x, w, w, 1, 1, 1);
            w
        }
    };
    b.head(features, config.num_classes);

    let mut desc = ArchDescriptor {
        version: DESCRIPTOR_VERSION,
        name: arch.name().to_string(),
        variant: config.variant,
        dataset,
        input_shape: vec![3, size, size],
        num_classes: config.num_classes,
        cra_target: (config.variant == Variant::Cra).then_some([target.0, target.1]),
        layers: b.layers,
    };
    desc.resolve_shapes(true)?;
    desc.validate()?;
    Ok(desc)
}
