//! JSON run file for `cra train`: the `TrainConfig` fields at the top level, plus `model`,
//! `data` and `out_dir`.

use std::path::PathBuf;

use cra_core::arch::{Arch, ArchDescriptor, ResNetConfig, Variant};
use cra_core::data::{load_cifar10, synth_dataset, LabeledDataset, Split, SynthConfig};
use cra_core::train::TrainConfig;
use cra_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    pub variant: Variant,
    pub classes: Option<usize>,
    pub target: Option<(usize, usize)>,
    pub input_size: Option<usize>,
    /// Toy network width.
    pub width: Option<usize>,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub zero_attention: bool,
}

impl ModelSpec {
    pub fn descriptor(&self) -> Result<ArchDescriptor> {
        let mut c = ResNetConfig::new(self.arch, self.variant);
        if let Some(k) = self.classes {
            c.num_classes = k;
        }
        if self.target.is_some() {
            c.cra_target = self.target;
        }
        c.input_size = self.input_size;
        if let Some(w) = self.width {
            c.toy_width = w;
        }
        c.build()
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Class-coloured blobs; the test split uses `seed + 1`.
    Synthetic {
        n: usize,
        classes: usize,
        seed: u64,
        #[serde(default)]
        test_n: usize,
        side: Option<usize>,
        noise: Option<f64>,
    },
    /// Directory holding the CIFAR-10 binary batches.
    Cifar10 { dir: PathBuf },
    /// Datasets written by `LabeledDataset::save`.
    Saved { train: PathBuf, test: Option<PathBuf>, classes: usize },
}

impl DataSpec {
    pub fn load(&self) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
        match self {
            DataSpec::Synthetic { n, classes, seed, test_n, side, noise } => {
                let mut c = SynthConfig::new(*n, *classes, *seed);
                if let Some(s) = side {
                    c.side = *s;
                }
                if let Some(v) = noise {
                    c.noise = *v;
                }
                let train = synth_dataset(&c)?;
                let test = if *test_n > 0 {
                    let mut t = synth_dataset(&SynthConfig { n: *test_n, seed: seed.wrapping_add(1), ..c })?;
                    t.split = Split::Test;
                    Some(t)
                } else {
                    None
                };
                Ok((train, test))
            }
            DataSpec::Cifar10 { dir } => {
                let (train, test) = load_cifar10(dir)?;
                Ok((train, Some(test)))
            }
            DataSpec::Saved { train, test, classes } => {
                let tr = LabeledDataset::load(train, *classes, Split::Train)?;
                let te = test.as_ref().map(|t| LabeledDataset::load(t, *classes, Split::Test)).transpose()?;
                Ok((tr, te))
            }
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub data: DataSpec,
    pub out_dir: PathBuf,
    /// Continue from `out_dir/last` when it exists.
    #[serde(default)]
    pub resume: bool,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text)?;
        c.train.validate()?;
        if c.model.zero_attention && c.model.variant == Variant::Base {
            return Err(Error::InvalidConfig("zero_attention needs an attention variant".into()));
        }
        Ok(c)
    }
}
