//! Static parameter and FLOP accounting over [`ArchDescriptor`]s.
//!
//! The default `mac` convention counts one multiply-accumulate as one FLOP for convolutions,
//! fully connected layers and GDConv, plus one op per input element for pooling. Elementwise
//! work (activations, batch norm, residual sums, attention rescaling) is itemized per layer but
//! left out of the total.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::{build, Arch, ArchDescriptor, LayerKind, ResNetConfig, Variant};
use crate::attention::site_key;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlopConvention {
    #[default]
    #[serde(rename = "mac")]
    Mac,
    /// `mac`, except each CRA site costs `2C(3HW + hw)`.
    #[serde(rename = "paper-cra-additive")]
    PaperCraAdditive,
}

impl FromStr for FlopConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mac" => Ok(FlopConvention::Mac),
            "paper-cra-additive" => Ok(FlopConvention::PaperCraAdditive),
            other => Err(Error::InvalidConvention(other.to_string())),
        }
    }
}

impl fmt::Display for FlopConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlopConvention::Mac => "mac",
            FlopConvention::PaperCraAdditive => "paper-cra-additive",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub output_shape: Vec<usize>,
    pub params: u64,
    /// Counted toward the total under the report's convention.
    pub flops: u64,
    /// Itemized elementwise ops, never part of the total.
    pub elementwise: u64,
}

/// Cost of one CRA insertion, by direct count and by the closed form `2C(3HW + hw)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CraSiteCost {
    pub site: String,
    pub channels: usize,
    pub input_hw: [usize; 2],
    pub target: [usize; 2],
    pub params: u64,
    /// Pooling + GDConv + sigmoid + rescale, one op each.
    pub direct_flops: u64,
    pub formula_flops: u64,
    /// `formula_flops / direct_flops`.
    pub formula_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: String,
    pub variant: Variant,
    pub target: Option<[usize; 2]>,
    pub input_shape: Vec<usize>,
    pub convention: FlopConvention,
    pub rows: Vec<LayerCost>,
    pub params_total: u64,
    pub flops_total: u64,
    pub elementwise_total: u64,
    pub cra_sites: Vec<CraSiteCost>,
}

/// `2C(3HW + hw)`.
pub fn cra_formula_flops(channels: usize, input_hw: (usize, usize), target: (usize, usize)) -> u64 {
    2 * channels as u64 * (3 * (input_hw.0 * input_hw.1) as u64 + (target.0 * target.1) as u64)
}

/// `C(hw + 1)`.
pub fn cra_param_delta(channels: usize, target: (usize, usize)) -> u64 {
    (channels * (target.0 * target.1 + 1)) as u64
}

fn numel(shape: &[usize]) -> u64 {
    shape.iter().product::<usize>() as u64
}

/// `(counted, elementwise)` ops of one layer under the `mac` convention.
fn layer_ops(kind: &LayerKind, input: &[usize], output: &[usize]) -> (u64, u64) {
    let out = numel(output);
    let inp = numel(input);
    match *kind {
        LayerKind::Conv { in_channels, kernel, groups, .. } => {
            let per_out = (kernel[0] * kernel[1] * (in_channels / groups)) as u64;
            (per_out * out, 0)
        }
        LayerKind::FullyConnected { in_features, out_features } => ((in_features * out_features) as u64, 0),
        LayerKind::MaxPool { .. } | LayerKind::AdaptiveAvgPool { .. } | LayerKind::GlobalAvgPool => (inp, 0),
        LayerKind::BatchNorm { .. } | LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Add { .. } | LayerKind::Softmax => (0, out),
        LayerKind::PadShortcut { .. } => (0, 0),
        LayerKind::Cra { channels, target } => {
            let gd = (channels * target[0] * target[1]) as u64;
            (inp + gd, channels as u64 + inp)
        }
        LayerKind::Se { channels, ratio } => {
            let r = channels / ratio;
            let fc = 2 * (channels * r) as u64;
            (inp + fc, (r + channels) as u64 + inp)
        }
    }
}

fn display_arch(desc: &ArchDescriptor) -> String {
    desc.name.parse::<Arch>().map(|a| a.display_name(desc.variant)).unwrap_or_else(|_| desc.name.clone())
}

/// Parameter count of a descriptor: conv `k·k·Cin·Cout/groups`, batch norm `2C`, fully connected
/// `Cin·Cout + Cout`, CRA `C(hw + 1)`, SE `2C²/r + C/r + C`.
pub fn count_params(desc: &ArchDescriptor) -> u64 {
    desc.layers.iter().map(|l| l.param_count() as u64).sum()
}

/// Full cost report at the descriptor's resolution, or at `input_hw` if given.
pub fn count_flops(desc: &ArchDescriptor, input_hw: Option<(usize, usize)>, convention: FlopConvention) -> Result<CostReport> {
    let resized;
    let desc = match input_hw {
        Some((h, w)) if (h, w) != (desc.input_shape[1], desc.input_shape[2]) => {
            resized = desc.with_input_size(h, w)?;
            &resized
        }
        _ => desc,
    };
    let mut rows = Vec::with_capacity(desc.layers.len());
    let mut cra_sites = Vec::new();
    for layer in &desc.layers {
        let (mut flops, elementwise) = layer_ops(&layer.kind, &layer.input_shape, &layer.output_shape);
        if let LayerKind::Cra { channels, target } = layer.kind {
            let hw = (layer.input_shape[1], layer.input_shape[2]);
            let formula = cra_formula_flops(channels, hw, (target[0], target[1]));
            let direct = flops + elementwise;
            cra_sites.push(CraSiteCost {
                site: site_key(layer.stage.unwrap_or(0), layer.block.unwrap_or(0)),
                channels,
                input_hw: [hw.0, hw.1],
                target,
                params: layer.param_count() as u64,
                direct_flops: direct,
                formula_flops: formula,
                formula_ratio: formula as f64 / direct as f64,
            });
            if convention == FlopConvention::PaperCraAdditive {
                flops = formula;
            }
        }
        rows.push(LayerCost {
            name: layer.name.clone(),
            kind: layer.kind.tag().to_string(),
            output_shape: layer.output_shape.clone(),
            params: layer.param_count() as u64,
            flops,
            elementwise,
        });
    }
    Ok(CostReport {
        arch: display_arch(desc),
        variant: desc.variant,
        target: desc.cra_target,
        input_shape: desc.input_shape.clone(),
        convention,
        params_total: rows.iter().map(|r| r.params).sum(),
        flops_total: rows.iter().map(|r| r.flops).sum(),
        elementwise_total: rows.iter().map(|r| r.elementwise).sum(),
        rows,
        cra_sites,
    })
}

/// Formats a count at two decimals with a K/M/G suffix, rounding half up: 918,540 → `918.54K`.
pub fn format_count(n: u64) -> String {
    let (unit, suffix) = match n {
        n if n >= 1_000_000_000 => (1_000_000_000u128, "G"),
        n if n >= 1_000_000 => (1_000_000, "M"),
        n if n >= 1_000 => (1_000, "K"),
        _ => return n.to_string(),
    };
    let hundredths = (n as u128 * 100 + unit / 2) / unit;
    format!("{}.{:02}{suffix}", hundredths / 100, hundredths % 100)
}

impl CostReport {
    pub fn params_display(&self) -> String {
        format_count(self.params_total)
    }

    pub fn flops_display(&self) -> String {
        format_count(self.flops_total)
    }

    /// `Σ C(hw + 1)` over CRA sites.
    pub fn cra_param_overhead(&self) -> u64 {
        self.cra_sites.iter().map(|s| s.params).sum()
    }

    fn target_label(&self) -> String {
        self.target.map(|t| format!("{},{}", t[0], t[1])).unwrap_or_default()
    }
}

/// CRA variants of `arch` at each pooled target.
pub fn ablation_table(arch: Arch, targets: &[(usize, usize)], convention: FlopConvention) -> Result<Vec<CostReport>> {
    targets
        .iter()
        .map(|&t| {
            let desc = build(&ResNetConfig { cra_target: Some(t), ..ResNetConfig::new(arch, Variant::Cra) })?;
            count_flops(&desc, None, convention)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TableFormat {
    #[default]
    Text,
    Csv,
    Json,
}

impl FromStr for TableFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(TableFormat::Text),
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            other => Err(Error::InvalidConfig(format!("unknown table format {other:?}"))),
        }
    }
}

/// One row of a rendered table; also the JSON record schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRecord {
    pub arch: String,
    pub variant: Variant,
    pub target: Option<[usize; 2]>,
    pub params_exact: u64,
    pub params_display: String,
    pub flops_exact: u64,
    pub flops_display: String,
    pub per_layer: Vec<LayerCost>,
}

impl From<&CostReport> for TableRecord {
    fn from(r: &CostReport) -> Self {
        Self {
            arch: r.arch.clone(),
            variant: r.variant,
            target: r.target,
            params_exact: r.params_total,
            params_display: r.params_display(),
            flops_exact: r.flops_total,
            flops_display: r.flops_display(),
            per_layer: r.rows.clone(),
        }
    }
}

/// Renders reports with a stable column order: architecture, params, FLOPs.
pub fn emit_table(reports: &[CostReport], format: TableFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::InvalidConfig("no reports to render".into()));
    }
    Ok(match format {
        TableFormat::Text => {
            let mut out = String::new();
            for r in reports {
                let name = match r.target {
                    Some(t) if r.variant == Variant::Cra => format!("{} <{},{}>", r.arch, t[0], t[1]),
                    _ => r.arch.clone(),
                };
                out.push_str(&format!("{name}, {}, {}\n", r.params_display(), r.flops_display()));
            }
            out
        }
        TableFormat::Csv => {
            let mut out = String::from("arch,variant,target,params_exact,params_display,flops_exact,flops_display\n");
            for r in reports {
                out.push_str(&format!(
                    "{},{},\"{}\",{},{},{},{}\n",
                    r.arch,
                    r.variant,
                    r.target_label(),
                    r.params_total,
                    r.params_display(),
                    r.flops_total,
                    r.flops_display()
                ));
            }
            out
        }
        TableFormat::Json => {
            let records: Vec<TableRecord> = reports.iter().map(TableRecord::from).collect();
            serde_json::to_string_pretty(&records)? + "\n"
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build_resnet;

    #[test]
    fn display_rounding() {
        assert_eq!(format_count(918_540), "918.54K");
        assert_eq!(format_count(918_545), "918.55K");
        assert_eq!(format_count(25_557_032), "25.56M");
        assert_eq!(format_count(999), "999");
        assert_eq!(format_count(4_105_000_000), "4.11G");
    }

    #[test]
    fn convention_parsing() {
        assert_eq!("mac".parse::<FlopConvention>().unwrap(), FlopConvention::Mac);
        assert!(matches!("flops".parse::<FlopConvention>(), Err(Error::InvalidConvention(_))));
    }

    #[test]
    fn totals_are_row_sums() {
        let d = build_resnet(56, Variant::Cra, 10, Some((8, 8))).unwrap();
        let r = count_flops(&d, None, FlopConvention::Mac).unwrap();
        assert_eq!(r.params_total, r.rows.iter().map(|x| x.params).sum::<u64>());
        assert_eq!(r.flops_total, r.rows.iter().map(|x| x.flops).sum::<u64>());
        assert_eq!(r.params_total, count_params(&d));
        assert_eq!(r.cra_sites.len(), 27);
    }

    #[test]
    fn formula_site() {
        assert_eq!(cra_formula_flops(256, (56, 56), (7, 7)), 4_841_984);
        let d = build_resnet(50, Variant::Cra, 1000, Some((7, 7))).unwrap();
        let r = count_flops(&d, None, FlopConvention::Mac).unwrap();
        let first = &r.cra_sites[0];
        assert_eq!(first.site, "CRA.1.1");
        assert_eq!(first.formula_flops, 4_841_984);
        // pool CHW + gdconv Chw + sigmoid C + rescale CHW
        assert_eq!(first.direct_flops, 256 * (2 * 3136 + 49 + 1));
    }

    #[test]
    fn additive_convention_swaps_cra_rows() {
        let d = build_resnet(56, Variant::Cra, 10, Some((8, 8))).unwrap();
        let mac = count_flops(&d, None, FlopConvention::Mac).unwrap();
        let additive = count_flops(&d, None, FlopConvention::PaperCraAdditive).unwrap();
        let base = count_flops(&build_resnet(56, Variant::Base, 10, None).unwrap(), None, FlopConvention::Mac).unwrap();
        let formula: u64 = additive.cra_sites.iter().map(|s| s.formula_flops).sum();
        assert_eq!(additive.flops_total, base.flops_total + formula);
        assert!(mac.flops_total > base.flops_total);
    }

    #[test]
    fn higher_resolution_costs_more() {
        let d = build_resnet(50, Variant::Cra, 1000, Some((7, 7))).unwrap();
        let small = count_flops(&d, Some((160, 160)), FlopConvention::Mac).unwrap();
        let big = count_flops(&d, None, FlopConvention::Mac).unwrap();
        assert!(small.flops_total < big.flops_total);
        assert_eq!(big.params_total, 26_312_232);
    }

    #[test]
    fn text_row() {
        let d = build_resnet(50, Variant::Base, 1000, None).unwrap();
        let r = count_flops(&d, None, FlopConvention::Mac).unwrap();
        let text = emit_table(&[r], TableFormat::Text).unwrap();
        assert!(text.starts_with("ResNet-50, 25.56M, "), "{text}");
    }

    #[test]
    fn json_round_trip() {
        let d = build_resnet(56, Variant::Se, 100, None).unwrap();
        let r = count_flops(&d, None, FlopConvention::Mac).unwrap();
        let json = emit_table(std::slice::from_ref(&r), TableFormat::Json).unwrap();
        let back: Vec<TableRecord> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vec![TableRecord::from(&r)]);
    }

    #[test]
    fn empty_table_is_an_error() {
        assert!(emit_table(&[], TableFormat::Csv).is_err());
    }
}
