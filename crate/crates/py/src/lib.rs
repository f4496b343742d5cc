//! Python bindings for robust-kip.
//!
//! Matrices cross the boundary as lists of rows (`numpy.asarray` converts
//! them). Attack and distillation configs are JSON strings with the same
//! schema as the sections of an `rkip` config file.

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use robust_kip::attacks::{self, Attack};
use robust_kip::data::{self, Dataset};
use robust_kip::distill::{self, DistillConfig};
use robust_kip::eval;
use robust_kip::krr::{KernelMachine, Ridge};
use robust_kip::ntk::{self, KernelSpec};
use robust_kip::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(format!("invalid JSON config: {e}"))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn spec(depth: usize, bias_variance: f64, input_scale: Option<f64>) -> PyResult<KernelSpec> {
    let s = KernelSpec {
        depth,
        bias_variance,
        input_scale,
    };
    s.validate().map_err(py_err)?;
    Ok(s)
}

fn to_dict(py: Python<'_>, json: String) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (json,))?.unbind())
}

/// Examples (n × d) with labels (n × k) and a pixel box.
#[pyclass(name = "Dataset", module = "robust_kip", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (examples, labels, bounds = (0.0, 1.0), labels_free = false, name = "data"))]
    fn new(
        examples: Vec<Vec<f64>>,
        labels: Vec<Vec<f64>>,
        bounds: (f64, f64),
        labels_free: bool,
        name: &str,
    ) -> PyResult<Self> {
        let inner = Dataset::new(
            matrix(examples)?,
            matrix(labels)?,
            bounds,
            labels_free,
            name,
        )
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Gaussian blobs in the unit cube.
    #[staticmethod]
    fn synth(
        n_per_class: usize,
        classes: usize,
        dim: usize,
        separation: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let inner =
            data::synth_gaussians(n_per_class, classes, dim, separation, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load_mnist(images: &str, labels: &str) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_mnist(images, labels).map_err(py_err)?,
        })
    }

    /// Reads an RKDS file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_distilled(path).map_err(py_err)?,
        })
    }

    /// Writes an RKDS file.
    fn save(&self, path: &str) -> PyResult<()> {
        data::save_distilled(&self.inner, path).map_err(py_err)
    }

    fn sample_balanced(&self, per_class: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: data::sample_balanced(&self.inner, per_class, seed).map_err(py_err)?,
        })
    }

    /// Shuffled split into `(rest, held_out)` with `held_out` of size `count`.
    fn split(&self, count: usize, seed: u64) -> PyResult<(Self, Self)> {
        let (rest, held) = data::SplitSpec {
            train_fraction: 1.0,
            validation_count: count,
            seed,
        }
        .split(&self.inner)
        .map_err(py_err)?;
        Ok((Self { inner: rest }, Self { inner: held }))
    }

    fn head(&self, n: usize) -> PyResult<Self> {
        let idx: Vec<usize> = (0..n.min(self.inner.len())).collect();
        Ok(Self {
            inner: self
                .inner
                .select(&idx, self.inner.name().to_string())
                .map_err(py_err)?,
        })
    }

    #[getter]
    fn examples(&self) -> Vec<Vec<f64>> {
        rows(self.inner.examples())
    }

    #[getter]
    fn labels(&self) -> Vec<Vec<f64>> {
        rows(self.inner.labels())
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn bounds(&self) -> (f64, f64) {
        self.inner.bounds()
    }

    #[getter]
    fn labels_free(&self) -> bool {
        self.inner.labels_free()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, n={}, d={}, k={})",
            self.inner.name(),
            self.inner.len(),
            self.inner.dim(),
            self.inner.class_count()
        )
    }
}

/// `(ntk, nngp)` matrices between the rows of `x` and `y`.
#[pyfunction]
#[pyo3(name = "ntk", signature = (x, y, depth = 3, bias_variance = 0.0, input_scale = None))]
fn py_ntk(
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    depth: usize,
    bias_variance: f64,
    input_scale: Option<f64>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let s = spec(depth, bias_variance, input_scale)?;
    let block = ntk::ntk_block(&s, matrix(x)?.view(), matrix(y)?.view()).map_err(py_err)?;
    Ok((rows(&block.ntk), rows(&block.nngp)))
}

fn parse_attack(json: &str) -> PyResult<Attack> {
    let a: Attack = serde_json::from_str(json).map_err(json_err)?;
    if let Some(c) = a.config() {
        c.validate().map_err(py_err)?;
    }
    Ok(a)
}

/// Kernel ridge regression with the closed-form NTK of an FC ReLU network.
#[pyclass(name = "KernelMachine", module = "robust_kip", frozen)]
struct PyKernelMachine {
    inner: KernelMachine,
}

#[pymethods]
impl PyKernelMachine {
    /// `ridge` is relative to the mean kernel diagonal unless `relative=False`.
    #[new]
    #[pyo3(signature = (support, depth = 3, bias_variance = 0.0, ridge = 1e-6, relative = true))]
    fn new(
        py: Python<'_>,
        support: &PyDataset,
        depth: usize,
        bias_variance: f64,
        ridge: f64,
        relative: bool,
    ) -> PyResult<Self> {
        let s = spec(depth, bias_variance, None)?;
        let r = if relative {
            Ridge::Relative(ridge)
        } else {
            Ridge::Fixed(ridge)
        };
        let ds = &support.inner;
        let inner = py
            .detach(|| KernelMachine::fit(&s, ds, r))
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    fn predict(&self, py: Python<'_>, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(x)?;
        let z = py.detach(|| self.inner.predict(x.view())).map_err(py_err)?;
        Ok(rows(&z))
    }

    fn accuracy(&self, py: Python<'_>, ds: &PyDataset) -> PyResult<f64> {
        py.detach(|| attacks::robust_accuracy(&self.inner, &ds.inner, &Attack::Clean))
            .map_err(py_err)
    }

    /// Accuracy under an attack given as JSON, e.g.
    /// `{"kind": "pgd", "config": {"norm": "linf", "epsilon": 0.3, "alpha": 0.1, "steps": 10}}`.
    fn robust_accuracy(&self, py: Python<'_>, ds: &PyDataset, attack: &str) -> PyResult<f64> {
        let a = parse_attack(attack)?;
        py.detach(|| attacks::robust_accuracy(&self.inner, &ds.inner, &a))
            .map_err(py_err)
    }

    /// Adversarial examples for `ds` under the JSON attack.
    fn attack(&self, py: Python<'_>, ds: &PyDataset, attack: &str) -> PyResult<Vec<Vec<f64>>> {
        let a = parse_attack(attack)?;
        let adv = py
            .detach(|| {
                a.run(
                    &self.inner,
                    ds.inner.examples().view(),
                    ds.inner.labels().view(),
                )
            })
            .map_err(py_err)?;
        Ok(rows(&adv))
    }

    /// Diagnostic report as a dict; `attacks` is a JSON list of attacks.
    #[pyo3(signature = (ds, attacks = "[]", bins = 15))]
    fn diagnose(
        &self,
        py: Python<'_>,
        ds: &PyDataset,
        attacks: &str,
        bins: usize,
    ) -> PyResult<Py<PyAny>> {
        let list: Vec<Attack> = serde_json::from_str(attacks).map_err(json_err)?;
        let report = py
            .detach(|| eval::diagnose(&self.inner, &ds.inner, &list, bins))
            .map_err(py_err)?;
        to_dict(py, serde_json::to_string(&report).map_err(json_err)?)
    }
}

/// Runs adv-KIP; returns `(distilled, best_epoch, history)` where history
/// rows are `(epoch, clean_acc, fgsm_acc, pgd_acc, grad_norm)`.
#[pyfunction]
#[pyo3(name = "distill", signature = (train, val, config, depth = 3, bias_variance = 0.0, kip = false))]
fn py_distill(
    py: Python<'_>,
    train: &PyDataset,
    val: &PyDataset,
    config: &str,
    depth: usize,
    bias_variance: f64,
    kip: bool,
) -> PyResult<(PyDataset, usize, Vec<(usize, f64, f64, f64, f64)>)> {
    let cfg: DistillConfig = serde_json::from_str(config).map_err(json_err)?;
    let s = spec(depth, bias_variance, None)?;
    let out = py
        .detach(|| {
            if kip {
                distill::kip_baseline(&train.inner, &val.inner, &s, &cfg)
            } else {
                distill::distill(&train.inner, &val.inner, &s, &cfg)
            }
        })
        .map_err(py_err)?;
    let history = out
        .history
        .iter()
        .map(|r| (r.epoch, r.clean_acc, r.fgsm_acc, r.pgd_acc, r.grad_norm))
        .collect();
    Ok((PyDataset { inner: out.dataset }, out.best_epoch, history))
}

/// Expected calibration error over equal-width bins.
#[pyfunction]
#[pyo3(signature = (confidences, correct, bins = 15))]
fn ece(confidences: Vec<f64>, correct: Vec<bool>, bins: usize) -> PyResult<f64> {
    if confidences.len() != correct.len() || bins == 0 {
        return Err(PyValueError::new_err("need equal lengths and bins >= 1"));
    }
    Ok(eval::reliability(&confidences, &correct, bins).1)
}

#[pymodule]
#[pyo3(name = "robust_kip")]
fn robust_kip_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyKernelMachine>()?;
    m.add_function(wrap_pyfunction!(py_ntk, m)?)?;
    m.add_function(wrap_pyfunction!(py_distill, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    Ok(())
}
