//! Model-level gradient check: autodiff against central finite differences on sampled coordinates.
//!
//! A ReLU or max-pool switching branch between `x - h` and `x + h` makes the finite difference
//! straddle a kink, so it no longer estimates the derivative autodiff computes. When
//! [`Graph::branch_signature`] shows such a switch, the probe is repeated with the branches pinned
//! to those of the unperturbed point ([`Graph::pin_branches`]): a central difference of the smooth
//! piece autodiff differentiates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{relative_error, BranchPattern, Graph, OpKind, DEFAULT_REL_TOL, DEFAULT_STEP};
use crate::error::{Error, Result};
use crate::model::{Model, ParamRole};
use crate::ops::BnMode;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub tol: f64,
    /// Coordinates per tensor; smaller tensors are checked exhaustively.
    pub samples: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_REL_TOL, samples: 20, step: DEFAULT_STEP, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    /// `input`, or the parameter role.
    pub group: String,
    pub numel: usize,
    pub checked: usize,
    /// Probes re-evaluated with pinned branches after straddling a kink.
    pub kinked: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tensors {
            out.push_str(&format!(
                "{} {:<28} {:<12} checked={:<3} kinked={:<3} max_rel_err={:.3e}\n",
                if t.passed { "ok  " } else { "FAIL" },
                t.name,
                t.group,
                t.checked,
                t.kinked,
                t.max_rel_error
            ));
        }
        out.push_str(&format!("{} (tol {:.0e}, max rel err {:.3e})\n", if self.passed() { "PASS" } else { "FAIL" }, self.tol, self.max_rel_error()));
        out
    }
}

fn group_name(role: ParamRole) -> &'static str {
    match role {
        ParamRole::ConvWeight => "conv_kernel",
        ParamRole::ConvBias => "conv_bias",
        ParamRole::BnGamma | ParamRole::BnBeta => "bn_affine",
        ParamRole::FcWeight => "fc_weight",
        ParamRole::FcBias => "fc_bias",
        ParamRole::CraKernel => "gdconv_kernel",
        ParamRole::CraBias => "gdconv_bias",
        ParamRole::SeWeight => "se_weight",
        ParamRole::SeBias => "se_bias",
    }
}

/// Training-mode cross-entropy and the branch fingerprint of that evaluation.
fn loss_at(model: &Model<f64>, input: &Tensor<f64>, labels: &[usize], pin: Option<&BranchPattern>) -> Result<(f64, u64)> {
    let mut g = Graph::<f64>::new();
    if let Some(p) = pin {
        g.pin_branches(p.clone());
    }
    let x = g.constant(input.clone());
    let f = model.forward_graph(&mut g, x, BnMode::Train)?;
    let loss = g.softmax_cross_entropy(f.forward.logits, labels)?;
    Ok((g.value(loss)?.data()[0], g.branch_signature()))
}

/// Gradient check with an optional backward fault injected into the autodiff side.
pub fn gradcheck_with_fault(
    model: &Model<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    options: &GradcheckOptions,
    fault: Option<(OpKind, f64)>,
) -> Result<GradcheckReport> {
    if options.samples == 0 || options.tol.is_nan() || options.tol <= 0.0 {
        return Err(Error::InvalidConfig("gradcheck needs a positive sample count and tolerance".into()));
    }
    let mut g = Graph::<f64>::new();
    if let Some((kind, factor)) = fault {
        g.inject_backward_fault(kind, factor);
    }
    let x = g.leaf(input.clone());
    let f = model.forward_graph(&mut g, x, BnMode::Train)?;
    let loss = g.softmax_cross_entropy(f.forward.logits, labels)?;
    let base_sig = g.branch_signature();
    let base_pattern = g.branch_pattern();
    let mut grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut tensors = Vec::with_capacity(model.params().len() + 1);
    let mut targets: Vec<(String, String, Option<usize>, Vec<f64>)> = model
        .params()
        .iter()
        .zip(&f.forward.params)
        .enumerate()
        .map(|(i, (p, &v))| {
            let grad = grads.take(v).unwrap_or_else(|| vec![0.0; p.value.numel()]);
            (p.name.clone(), group_name(p.role).to_string(), Some(i), grad)
        })
        .collect();
    targets.push(("input".into(), "input".into(), None, grads.take(x).unwrap_or_else(|| vec![0.0; input.numel()])));

    for (name, group, param, grad) in targets {
        let numel = grad.len();
        let mut order: Vec<usize> = (0..numel).collect();
        if numel > options.samples {
            order.shuffle(&mut rng);
            order.truncate(options.samples);
        }
        let mut probe_model = model.clone();
        let mut probe_input = input.clone();
        let (mut kinked, mut max_err, mut worst) = (0, 0.0f64, 0);
        for &k in &order {
            let mut eval = |delta: f64, pin: Option<&BranchPattern>| -> Result<(f64, u64)> {
                match param {
                    Some(i) => {
                        let orig = probe_model.params()[i].value.data()[k];
                        probe_model.params_mut()[i].value.data_mut()[k] = orig + delta;
                        let r = loss_at(&probe_model, input, labels, pin);
                        probe_model.params_mut()[i].value.data_mut()[k] = orig;
                        r
                    }
                    None => {
                        let orig = probe_input.data()[k];
                        probe_input.data_mut()[k] = orig + delta;
                        let r = loss_at(model, &probe_input, labels, pin);
                        probe_input.data_mut()[k] = orig;
                        r
                    }
                }
            };
            let mut central = |pin: Option<&BranchPattern>| -> Result<(f64, bool)> {
                let (plus, sig_p) = eval(options.step, pin)?;
                let (minus, sig_m) = eval(-options.step, pin)?;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NumericOverflow(format!("loss is {plus} / {minus} probing {name}[{k}]")));
                }
                Ok(((plus - minus) / (2.0 * options.step), sig_p != base_sig || sig_m != base_sig))
            };
            let (mut numeric, switched) = central(None)?;
            if switched {
                kinked += 1;
                numeric = central(Some(&base_pattern))?.0;
            }
            let err = relative_error(grad[k], numeric);
            if err > max_err {
                max_err = err;
                worst = k;
            }
        }
        let checked = order.len();
        let passed = checked > 0 && max_err < options.tol;
        tensors.push(TensorCheck { name, group, numel, checked, kinked, max_rel_error: max_err, worst_index: worst, passed });
    }
    Ok(GradcheckReport { tol: options.tol, tensors })
}

/// Checks every parameter tensor and the input of `model` at `(input, labels)`.
pub fn gradcheck(model: &Model<f64>, input: &Tensor<f64>, labels: &[usize], options: &GradcheckOptions) -> Result<GradcheckReport> {
    gradcheck_with_fault(model, input, labels, options, None)
}
