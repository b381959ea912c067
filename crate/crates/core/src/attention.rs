//! Channel attention blocks.
//!
//! CRA compresses each channel of `Y` to a `h x w` map by adaptive average
//! pooling, reduces that map to one scalar with a global depthwise convolution
//! (a per-channel kernel of the same `h x w` size plus a bias), squashes it with
//! a sigmoid, and multiplies the channel by the result. The SE baseline uses
//! global average pooling followed by a two-layer bottleneck instead.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::autograd::{Graph, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

pub const SE_DEFAULT_RATIO: usize = 16;

/// Pooled size `(h, w)` and channel count for one CRA insertion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CraConfig {
    pub target: (usize, usize),
    pub channels: usize,
}

impl CraConfig {
    pub fn new(channels: usize, target: (usize, usize)) -> Result<Self> {
        if channels == 0 || target.0 == 0 || target.1 == 0 {
            return Err(Error::InvalidConfig(format!("CRA needs positive channels and target, got {channels} / {target:?}")));
        }
        Ok(Self { target, channels })
    }

    /// Shrinks the target to fit a `h x w` feature map.
    pub fn clamped_to(self, h: usize, w: usize) -> Self {
        Self { target: (self.target.0.min(h), self.target.1.min(w)), ..self }
    }

    /// `C * (h * w + 1)`: one kernel of the pooled size plus one bias per channel.
    pub fn param_count(&self) -> usize {
        self.channels * (self.target.0 * self.target.1 + 1)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, c, h, w] if c == self.channels && self.target.0 <= h && self.target.1 <= w => Ok(()),
            [_, c, ..] if c != self.channels => Err(Error::InvalidConfig(format!(
                "CRA configured for {} channels applied to {shape:?}",
                self.channels
            ))),
            _ => Err(Error::InvalidConfig(format!("CRA target {:?} does not fit input {shape:?}", self.target))),
        }
    }
}

/// Global depthwise convolution kernels `[C, h, w]` and biases `[C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CraParams<T: Element = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> CraParams<T> {
    pub fn zeros(config: &CraConfig) -> Self {
        let (h, w) = config.target;
        Self {
            kernel: Tensor::zeros(vec![config.channels, h, w]).expect("config dims are positive"),
            bias: Tensor::zeros(vec![config.channels]).expect("config dims are positive"),
        }
    }

    /// Kernels drawn from `N(0, 2 / (h * w))`, biases zero.
    pub fn init(config: &CraConfig, rng: &mut impl Rng) -> Self {
        let (h, w) = config.target;
        let mut p = Self::zeros(config);
        let normal = Normal::new(0.0, (2.0 / (h * w) as f64).sqrt()).expect("finite std");
        for v in p.kernel.data_mut() {
            *v = T::from_f64_lossy(normal.sample(rng));
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.kernel.numel() + self.bias.numel()
    }

    fn check(&self, config: &CraConfig) -> Result<()> {
        let (h, w) = config.target;
        if self.kernel.shape() != [config.channels, h, w] || self.bias.shape() != [config.channels] {
            return Err(Error::InvalidConfig(format!(
                "CRA parameters {:?}/{:?} do not match config {config:?}",
                self.kernel.shape(),
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

/// Applies CRA to `Y: [N, C, H, W]`, returning the rescaled features and the attentions `[N, C]`.
pub fn cra_forward<T: Element>(y: &Tensor<T>, params: &CraParams<T>, config: &CraConfig) -> Result<(Tensor<T>, Tensor<T>)> {
    config.check_input(y.shape())?;
    params.check(config)?;
    let pooled = ops::adaptive_avg_pool(y, config.target)?;
    let logits = ops::gdconv(&pooled, &params.kernel, &params.bias)?;
    let v = ops::sigmoid(&logits);
    let out = ops::channel_scale(y, &v)?;
    Ok((out, v))
}

/// Recording form of [`cra_forward`].
pub fn cra_forward_graph<T: Element>(g: &mut Graph<T>, y: Var, kernel: Var, bias: Var, config: &CraConfig) -> Result<(Var, Var)> {
    config.check_input(g.shape(y)?)?;
    let pooled = g.adaptive_avg_pool(y, config.target)?;
    let logits = g.gdconv(pooled, kernel, bias)?;
    let v = g.sigmoid(logits)?;
    let out = g.channel_scale(y, v)?;
    Ok((out, v))
}

/// Squeeze-and-excitation weights: `reduce` maps `C -> C/r`, `expand` maps `C/r -> C`, both biased.
#[derive(Clone, Debug, PartialEq)]
pub struct SeParams<T: Element = f32> {
    pub reduce_weight: Tensor<T>,
    pub reduce_bias: Tensor<T>,
    pub expand_weight: Tensor<T>,
    pub expand_bias: Tensor<T>,
    pub ratio: usize,
}

/// `2 C^2 / r + C / r + C`.
pub fn se_param_count(channels: usize, ratio: usize) -> usize {
    2 * channels * channels / ratio + channels / ratio + channels
}

impl<T: Element> SeParams<T> {
    pub fn zeros(channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::InvalidConfig(format!("SE ratio {ratio} must divide {channels} channels")));
        }
        let hidden = channels / ratio;
        Ok(Self {
            reduce_weight: Tensor::zeros(vec![hidden, channels])?,
            reduce_bias: Tensor::zeros(vec![hidden])?,
            expand_weight: Tensor::zeros(vec![channels, hidden])?,
            expand_bias: Tensor::zeros(vec![channels])?,
            ratio,
        })
    }

    pub fn channels(&self) -> usize {
        self.expand_bias.numel()
    }

    pub fn param_count(&self) -> usize {
        self.reduce_weight.numel() + self.reduce_bias.numel() + self.expand_weight.numel() + self.expand_bias.numel()
    }
}

/// `s = sigmoid(W_e relu(W_r GAP(Y) + b_r) + b_e)`, output `Y * s` per channel.
pub fn se_forward<T: Element>(y: &Tensor<T>, params: &SeParams<T>) -> Result<Tensor<T>> {
    Ok(se_forward_with_scales(y, params)?.0)
}

/// Like [`se_forward`] but also returns the channel scales `[N, C]`.
pub fn se_forward_with_scales<T: Element>(y: &Tensor<T>, params: &SeParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    match *y.shape() {
        [_, c, _, _] if c == params.channels() => {}
        _ => return Err(Error::InvalidConfig(format!("SE for {} channels applied to {:?}", params.channels(), y.shape()))),
    }
    let squeezed = ops::global_avg_pool(y)?;
    let hidden = ops::relu(&ops::fully_connected(&squeezed, &params.reduce_weight, Some(&params.reduce_bias))?);
    let s = ops::sigmoid(&ops::fully_connected(&hidden, &params.expand_weight, Some(&params.expand_bias))?);
    Ok((ops::channel_scale(y, &s)?, s))
}

/// Handles to SE weights bound in a graph.
#[derive(Clone, Copy, Debug)]
pub struct SeVars {
    pub reduce_weight: Var,
    pub reduce_bias: Var,
    pub expand_weight: Var,
    pub expand_bias: Var,
}

pub fn se_forward_graph<T: Element>(g: &mut Graph<T>, y: Var, p: SeVars) -> Result<(Var, Var)> {
    let squeezed = g.global_avg_pool(y)?;
    let h = g.fully_connected(squeezed, p.reduce_weight, Some(p.reduce_bias))?;
    let h = g.relu(h)?;
    let e = g.fully_connected(h, p.expand_weight, Some(p.expand_bias))?;
    let s = g.sigmoid(e)?;
    let out = g.channel_scale(y, s)?;
    Ok((out, s))
}

/// Channel attentions of every CRA site for one input, in network order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AttentionTrace {
    pub sites: Vec<(String, Vec<f32>)>,
}

/// Key of the CRA module in block `block` of stage `stage` (both 1-based).
pub fn site_key(stage: usize, block: usize) -> String {
    format!("CRA.{stage}.{block}")
}

impl AttentionTrace {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.sites.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_slice())
    }

    pub fn values(&self) -> impl Iterator<Item = f32> + '_ {
        self.sites.iter().flat_map(|(_, v)| v.iter().copied())
    }

    /// `site_key,channel_index,attention_value` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("site_key,channel_index,attention_value\n");
        for (key, values) in &self.sites {
            for (i, v) in values.iter().enumerate() {
                let _ = writeln!(out, "{key},{i},{v}");
            }
        }
        out
    }

    /// A JSON object mapping each site key to its attention vector.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(s)?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::InvalidConfig("attention trace JSON must be an object".into()))?;
        let mut sites = Vec::with_capacity(obj.len());
        for (k, v) in obj {
            sites.push((k.clone(), serde_json::from_value(v.clone())?));
        }
        // serde_json maps are sorted; restore network order from the keys
        sites.sort_by_key(|(k, _)| parse_site_key(k));
        Ok(Self { sites })
    }
}

fn parse_site_key(key: &str) -> (usize, usize) {
    let mut parts = key.trim_start_matches("CRA.").split('.').map(|p| p.parse().unwrap_or(usize::MAX));
    (parts.next().unwrap_or(usize::MAX), parts.next().unwrap_or(usize::MAX))
}

impl Serialize for AttentionTrace {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.sites.len()))?;
        for (k, v) in &self.sites {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}
