//! Python bindings: descriptors, cost reports, the CRA ops, models, gradient checks and training.
//!
//! Tensors cross the boundary as flat `float32` data plus a shape.

use cra_core::arch::{build_toy, Arch, ArchDescriptor, ResNetConfig, Variant};
use cra_core::attention::{cra_forward, CraConfig, CraParams};
use cra_core::cost::{ablation_table, count_flops, count_params, emit_table, CostReport, FlopConvention, TableFormat};
use cra_core::data::{synth_dataset, AugmentPolicy, LabeledDataset, Split, SynthConfig};
use cra_core::model::{InitOptions, Model};
use cra_core::ops;
use cra_core::train::{self, GradcheckOptions, TrainConfig, Trainer};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: cra_core::Error) -> PyErr {
    use cra_core::Error::*;
    match e {
        Io(e) => PyIOError::new_err(e.to_string()),
        DivergedTraining(_) | NumericOverflow(_) => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for cra_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn parse<T: std::str::FromStr<Err = cra_core::Error>>(s: &str) -> PyResult<T> {
    s.parse().py()
}

#[pyclass(name = "Tensor", module = "cra", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: cra_core::Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: cra_core::Tensor::new(shape, data).py()? })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: cra_core::Tensor::from_fn(shape, |_| 0.0).py()? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: cra_core::Tensor::load(path).py()? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).py()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.shape().first().copied().unwrap_or(1)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

#[pyclass(name = "Descriptor", module = "cra", from_py_object)]
#[derive(Clone)]
pub struct PyDescriptor {
    inner: ArchDescriptor,
}

#[pymethods]
impl PyDescriptor {
    /// `arch` is one of resnet50, resnet101, resnet56, resnet110.
    #[staticmethod]
    #[pyo3(signature = (arch, variant = "base", hw = None, input_size = None, classes = None))]
    fn resnet(arch: &str, variant: &str, hw: Option<(usize, usize)>, input_size: Option<usize>, classes: Option<usize>) -> PyResult<Self> {
        let mut c = ResNetConfig::new(parse::<Arch>(arch)?, parse(variant)?);
        if hw.is_some() {
            c.cra_target = hw;
        }
        c.input_size = input_size;
        if let Some(k) = classes {
            c.num_classes = k;
        }
        Ok(Self { inner: c.build().py()? })
    }

    #[staticmethod]
    #[pyo3(signature = (variant = "cra", classes = 4, width = 8, input_size = 32, hw = None))]
    fn toy(variant: &str, classes: usize, width: usize, input_size: usize, hw: Option<(usize, usize)>) -> PyResult<Self> {
        let variant: Variant = parse(variant)?;
        let hw = hw.or((variant == Variant::Cra).then_some((8, 8)));
        Ok(Self { inner: build_toy(variant, classes, width, input_size, hw).py()? })
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self { inner: ArchDescriptor::from_json(s).py()? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.to_string()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape.clone()
    }

    fn param_count(&self) -> u64 {
        count_params(&self.inner)
    }

    fn layer_names(&self) -> Vec<String> {
        self.inner.layers.iter().map(|l| l.name.clone()).collect()
    }

    fn __repr__(&self) -> String {
        format!("Descriptor({}, {}, {} layers)", self.inner.name, self.inner.variant, self.inner.layers.len())
    }
}

#[pyclass(name = "CostReport", module = "cra", skip_from_py_object)]
pub struct PyCostReport {
    inner: CostReport,
}

#[pymethods]
impl PyCostReport {
    #[getter]
    fn params(&self) -> u64 {
        self.inner.params_total
    }

    #[getter]
    fn flops(&self) -> u64 {
        self.inner.flops_total
    }

    #[getter]
    fn elementwise(&self) -> u64 {
        self.inner.elementwise_total
    }

    #[getter]
    fn params_display(&self) -> String {
        self.inner.params_display()
    }

    #[getter]
    fn flops_display(&self) -> String {
        self.inner.flops_display()
    }

    /// `(site, params, direct ops, closed-form ops)` per CRA module.
    fn cra_sites(&self) -> Vec<(String, u64, u64, u64)> {
        self.inner.cra_sites.iter().map(|s| (s.site.clone(), s.params, s.direct_flops, s.formula_flops)).collect()
    }

    #[pyo3(signature = (format = "text"))]
    fn table(&self, format: &str) -> PyResult<String> {
        emit_table(std::slice::from_ref(&self.inner), parse::<TableFormat>(format)?).py()
    }

    fn __repr__(&self) -> String {
        format!("CostReport({}, {}, {})", self.inner.arch, self.inner.params_display(), self.inner.flops_display())
    }
}

#[pyfunction]
#[pyo3(signature = (desc, input_hw = None, convention = "mac"))]
fn analyze(desc: &PyDescriptor, input_hw: Option<(usize, usize)>, convention: &str) -> PyResult<PyCostReport> {
    Ok(PyCostReport { inner: count_flops(&desc.inner, input_hw, parse::<FlopConvention>(convention)?).py()? })
}

#[pyfunction]
#[pyo3(signature = (arch, targets, format = "text", convention = "mac"))]
fn ablation(arch: &str, targets: Vec<(usize, usize)>, format: &str, convention: &str) -> PyResult<String> {
    let reports = ablation_table(parse(arch)?, &targets, parse(convention)?).py()?;
    emit_table(&reports, parse(format)?).py()
}

#[pyfunction]
fn adaptive_avg_pool(x: &PyTensor, target: (usize, usize)) -> PyResult<PyTensor> {
    Ok(PyTensor { inner: ops::adaptive_avg_pool(&x.inner, target).py()? })
}

#[pyfunction]
fn gdconv(u: &PyTensor, kernel: &PyTensor, bias: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor { inner: ops::gdconv(&u.inner, &kernel.inner, &bias.inner).py()? })
}

/// Returns `(rescaled, attention)` for `y: [N, C, H, W]`, `kernel: [C, h, w]`, `bias: [C]`.
#[pyfunction(name = "cra_forward")]
fn cra_rescale(y: &PyTensor, kernel: &PyTensor, bias: &PyTensor) -> PyResult<(PyTensor, PyTensor)> {
    let k = kernel.inner.shape();
    if k.len() != 3 {
        return Err(PyValueError::new_err(format!("kernel must be [C, h, w], got {k:?}")));
    }
    let config = CraConfig::new(k[0], (k[1], k[2])).py()?;
    let params = CraParams { kernel: kernel.inner.clone(), bias: bias.inner.clone() };
    let (out, v) = cra_forward(&y.inner, &params, &config).py()?;
    Ok((PyTensor { inner: out }, PyTensor { inner: v }))
}

#[pyclass(name = "Model", module = "cra", from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (desc, seed = 0, zero_attention = false))]
    fn new(desc: &PyDescriptor, seed: u64, zero_attention: bool) -> PyResult<Self> {
        Ok(Self { inner: Model::materialize(&desc.inner, InitOptions { seed, zero_attention }).py()? })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Self { inner: Model::load(dir).py()? })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        self.inner.save(dir).py()
    }

    #[getter]
    fn descriptor(&self) -> PyDescriptor {
        PyDescriptor { inner: self.inner.descriptor().clone() }
    }

    fn param_count(&self) -> usize {
        self.inner.trainable_count()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params().iter().map(|p| p.name.clone()).collect()
    }

    fn param(&self, name: &str) -> PyResult<PyTensor> {
        let p = self.inner.param(name).ok_or_else(|| PyValueError::new_err(format!("no parameter {name:?}")))?;
        Ok(PyTensor { inner: p.value.clone() })
    }

    fn set_param(&mut self, name: &str, value: &PyTensor) -> PyResult<()> {
        let p = self.inner.param_mut(name).ok_or_else(|| PyValueError::new_err(format!("no parameter {name:?}")))?;
        if p.value.shape() != value.inner.shape() {
            return Err(PyValueError::new_err(format!("{name} has shape {:?}, got {:?}", p.value.shape(), value.inner.shape())));
        }
        p.value = value.inner.clone();
        Ok(())
    }

    /// Evaluation-mode logits `[N, classes]`.
    fn logits(&self, py: Python<'_>, x: &PyTensor) -> PyResult<PyTensor> {
        let out = py.detach(|| self.inner.logits(&x.inner)).py()?;
        Ok(PyTensor { inner: out })
    }

    fn predict(&self, py: Python<'_>, x: &PyTensor) -> PyResult<Vec<usize>> {
        py.detach(|| self.inner.predict(&x.inner)).py()
    }

    /// Site key (`CRA.stage.block`) to channel attentions, in network order.
    fn attention_trace<'py>(&self, py: Python<'py>, image: &PyTensor) -> PyResult<Bound<'py, PyDict>> {
        let trace = self.inner.attention_trace(&image.inner).py()?;
        let d = PyDict::new(py);
        for (k, v) in trace.sites {
            d.set_item(k, v)?;
        }
        Ok(d)
    }
}

#[pyclass(name = "GradcheckReport", module = "cra", skip_from_py_object)]
pub struct PyGradcheckReport {
    inner: train::GradcheckReport,
}

#[pymethods]
impl PyGradcheckReport {
    #[getter]
    fn passed(&self) -> bool {
        self.inner.passed()
    }

    #[getter]
    fn max_rel_error(&self) -> f64 {
        self.inner.max_rel_error()
    }

    /// `(name, group, checked, max relative error, passed)` per tensor.
    fn tensors(&self) -> Vec<(String, String, usize, f64, bool)> {
        self.inner.tensors.iter().map(|t| (t.name.clone(), t.group.clone(), t.checked, t.max_rel_error, t.passed)).collect()
    }

    fn __str__(&self) -> String {
        self.inner.to_text()
    }
}

/// Checks the model's training-mode loss gradients in double precision.
#[pyfunction]
#[pyo3(signature = (model, x, labels, tol = 1e-3, samples = 20, seed = 0))]
fn gradcheck(py: Python<'_>, model: &PyModel, x: &PyTensor, labels: Vec<usize>, tol: f64, samples: usize, seed: u64) -> PyResult<PyGradcheckReport> {
    let options = GradcheckOptions { tol, samples, seed, ..Default::default() };
    let m = model.inner.cast::<f64>();
    let input = x.inner.cast::<f64>();
    let report = py.detach(|| train::gradcheck(&m, &input, &labels, &options)).py()?;
    Ok(PyGradcheckReport { inner: report })
}

/// Synthetic coloured-blob images `[n, 3, side, side]` and their labels.
#[pyfunction]
#[pyo3(signature = (n, classes, seed = 0, side = 32))]
fn synthetic(n: usize, classes: usize, seed: u64, side: usize) -> PyResult<(PyTensor, Vec<usize>)> {
    let d = synth_dataset(&SynthConfig { side, ..SynthConfig::new(n, classes, seed) }).py()?;
    Ok((PyTensor { inner: d.images }, d.labels))
}

#[pyclass(name = "Trainer", module = "cra", skip_from_py_object)]
pub struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (model, lr = 0.1, momentum = 0.9, weight_decay = 1e-4, batch_size = 128, epochs = 1, seed = 0, milestones = vec![], decay = 0.1, augment = false, freeze_attention = false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        model: &PyModel,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        batch_size: usize,
        epochs: usize,
        seed: u64,
        milestones: Vec<usize>,
        decay: f64,
        augment: bool,
        freeze_attention: bool,
    ) -> PyResult<Self> {
        let config = TrainConfig {
            lr,
            momentum,
            weight_decay,
            batch_size,
            epochs,
            lr_milestones: milestones,
            lr_decay: decay,
            seed,
            augment: augment.then(AugmentPolicy::default),
            freeze_attention,
            ..Default::default()
        };
        Ok(Self { inner: Trainer::new(model.inner.clone(), config).py()? })
    }

    /// Runs one epoch; returns `(train_loss, train_err, lr)`.
    fn run_epoch(&mut self, py: Python<'_>, images: &PyTensor, labels: Vec<usize>, classes: usize) -> PyResult<(f64, f64, f64)> {
        let data = LabeledDataset::new(images.inner.clone(), labels, classes, Split::Train).py()?;
        let r = py.detach(|| self.inner.run_epoch(&data, None).cloned()).py()?;
        Ok((r.train_loss, r.train_err, r.lr))
    }

    #[getter]
    fn model(&self) -> PyModel {
        PyModel { inner: self.inner.model.clone() }
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.next_epoch()
    }

    fn history_csv(&self) -> String {
        self.inner.history.to_csv()
    }
}

#[pymodule]
fn cra(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyDescriptor>()?;
    m.add_class::<PyCostReport>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyGradcheckReport>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(ablation, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_avg_pool, m)?)?;
    m.add_function(wrap_pyfunction!(gdconv, m)?)?;
    m.add_function(wrap_pyfunction!(cra_rescale, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    Ok(())
}
