//! Declarative network descriptions.

mod descriptor;
mod resnet;

pub use descriptor::{infer_output_shape, ArchDescriptor, DatasetShape, LayerKind, LayerSpec, Variant, DESCRIPTOR_VERSION, INPUT};
pub use resnet::{build, build_resnet, build_toy, default_cra_target, Arch, ResNetConfig};
