//! Python bindings: models, training, evaluation, receptive fields, Gram
//! matrices, Grad-CAM and t-SNE. Images cross the boundary as flat
//! row-major `[3, S, S]` float lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use stylenet::data::synth::{generate, SynthConfig};
use stylenet::data::{load_dataset, load_dataset_resized, ppm};
use stylenet::interpret::{self, TsneOptions};
use stylenet::receptive_field::{self as rf, LayerGeom};
use stylenet::train::{self, checkpoint, TrainConfig};
use stylenet::{ArchConfig, Error, Tensor, Variant};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Usage(_) | Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Data { .. } | Error::Io { .. } | Error::Checkpoint(_) => {
            PyOSError::new_err(e.to_string())
        }
        Error::NumericOverflow { .. } | Error::Diverged { .. } => {
            PyArithmeticError::new_err(e.to_string())
        }
    }
}

fn image_tensor(data: Vec<f32>, size: usize) -> PyResult<Tensor<f32>> {
    if data.len() != 3 * size * size {
        return Err(PyValueError::new_err(format!(
            "expected {} values for a 3x{size}x{size} image, got {}",
            3 * size * size,
            data.len()
        )));
    }
    Tensor::new(vec![3, size, size], data).map_err(to_py)
}

/// A trained or freshly initialized classifier.
#[pyclass(name = "Model")]
struct PyModel {
    inner: stylenet::Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (arch, truncation = 9, seed = 0, input_size = 64))]
    fn new(arch: &str, truncation: usize, seed: u64, input_size: usize) -> PyResult<Self> {
        let variant: Variant = arch.parse().map_err(to_py)?;
        let mut cfg = ArchConfig::new(variant)
            .with_truncation(truncation)
            .with_seed(seed);
        cfg.input_size = input_size;
        Ok(Self {
            inner: stylenet::Model::build(&cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.config().variant.to_string()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.config().input_size
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Canonical configuration text.
    fn config(&self) -> String {
        self.inner.config().to_text()
    }

    fn layer_names(&self) -> Vec<String> {
        self.inner.layer_names()
    }

    /// Class logits for one image.
    fn predict(&self, image: Vec<f32>) -> PyResult<Vec<f32>> {
        let s = self.input_size();
        let img = image_tensor(image, s)?
            .reshape(&[1, 3, s, s])
            .map_err(to_py)?;
        Ok(self.inner.predict_logits(&img).map_err(to_py)?.into_data())
    }

    /// Pre-classifier embedding for one image.
    fn embed(&self, image: Vec<f32>) -> PyResult<Vec<f32>> {
        self.inner
            .embed(&image_tensor(image, self.input_size())?)
            .map_err(to_py)
    }

    /// Train on a class-per-directory PPM corpus. Returns per-epoch
    /// `(train_loss, train_accuracy)` pairs.
    #[pyo3(signature = (data, epochs = 10, lr = 3e-3, batch = 16, seed = 0))]
    fn train(
        &mut self,
        data: PathBuf,
        epochs: usize,
        lr: f64,
        batch: usize,
        seed: u64,
    ) -> PyResult<Vec<(f64, f64)>> {
        let ds = load_dataset_resized(&data, self.input_size()).map_err(to_py)?;
        let cfg = TrainConfig {
            epochs,
            batch_size: batch,
            learning_rate: lr,
            seed,
            ..Default::default()
        };
        let hist = train::train(&mut self.inner, &ds, None, &cfg).map_err(to_py)?;
        Ok(hist
            .iter()
            .map(|h| (h.train_loss, h.train_accuracy))
            .collect())
    }

    /// Evaluation report as a dict keyed by the machine-report field names.
    fn evaluate<'py>(&self, py: Python<'py>, data: PathBuf) -> PyResult<Bound<'py, PyDict>> {
        let ds = load_dataset_resized(&data, self.input_size()).map_err(to_py)?;
        let r = train::evaluate(&self.inner, &ds).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("class_names", r.class_names.clone())?;
        d.set_item("confusion_matrix", r.confusion_matrix.clone())?;
        d.set_item("precision", r.precision.clone())?;
        d.set_item("recall", r.recall.clone())?;
        d.set_item("f1", r.f1.clone())?;
        d.set_item("macro_precision", r.macro_precision)?;
        d.set_item("macro_recall", r.macro_recall)?;
        d.set_item("macro_f1", r.macro_f1)?;
        d.set_item("sample_count", r.sample_count)?;
        d.set_item("throughput", r.throughput)?;
        Ok(d)
    }

    /// Grad-CAM heatmap (flat `S*S` list in `[0, 1]`).
    #[pyo3(signature = (image, class_index, layer = None))]
    fn grad_cam(
        &self,
        image: Vec<f32>,
        class_index: usize,
        layer: Option<&str>,
    ) -> PyResult<Vec<f32>> {
        let img = image_tensor(image, self.input_size())?;
        Ok(interpret::grad_cam(&self.inner, &img, layer, class_index)
            .map_err(to_py)?
            .values)
    }
}

/// Write a synthetic corpus; returns the number of images.
#[pyfunction]
#[pyo3(signature = (out, per_class = 100, size = 64, seed = 0, paired = false))]
fn synth(out: PathBuf, per_class: usize, size: usize, seed: u64, paired: bool) -> PyResult<usize> {
    let cfg = SynthConfig {
        per_class,
        size,
        seed,
        paired,
        ..Default::default()
    };
    Ok(generate(&cfg, &out).map_err(to_py)?.len())
}

/// Read a PPM as `(flat values, (channels, height, width))`.
#[pyfunction]
fn read_ppm(path: PathBuf) -> PyResult<(Vec<f32>, (usize, usize, usize))> {
    let t = ppm::read(&path).map_err(to_py)?;
    let sh = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Ok((t.into_data(), sh))
}

/// Labels of every image under `root`, in loader order.
#[pyfunction]
fn dataset_labels(root: PathBuf) -> PyResult<Vec<usize>> {
    Ok(load_dataset(&root).map_err(to_py)?.labels())
}

fn geoms(layers: Vec<(usize, usize, usize)>) -> Vec<LayerGeom> {
    layers
        .into_iter()
        .map(|(k, s, p)| LayerGeom::new(k, s, p))
        .collect()
}

/// Per-layer `(size, jump, offset)` for `(kernel, stride, padding)` layers.
#[pyfunction]
fn receptive_field(layers: Vec<(usize, usize, usize)>) -> PyResult<Vec<(usize, usize, f64)>> {
    Ok(rf::receptive_field(&geoms(layers))
        .map_err(to_py)?
        .iter()
        .map(|r| (r.size, r.jump, r.offset))
        .collect())
}

/// `(disjoint, margin)` where margin is `jump - size` of the last layer.
#[pyfunction]
fn is_disjoint(layers: Vec<(usize, usize, usize)>) -> (bool, i64) {
    let d = rf::is_disjoint(&geoms(layers));
    (d.disjoint, d.margin)
}

/// Normalized Gram matrix of `[C, H, W]` features given flat.
#[pyfunction]
fn gram(features: Vec<f64>, channels: usize, height: usize, width: usize) -> PyResult<Vec<f64>> {
    let t = Tensor::new(vec![channels, height, width], features).map_err(to_py)?;
    Ok(stylenet::models::gram(&t).map_err(to_py)?.into_data())
}

/// Exact t-SNE; returns `(points, kl)`.
#[pyfunction]
#[pyo3(signature = (vectors, perplexity = 30.0, iterations = 1000, seed = 0))]
fn tsne(
    vectors: Vec<Vec<f64>>,
    perplexity: f64,
    iterations: usize,
    seed: u64,
) -> PyResult<(Vec<(f64, f64)>, f64)> {
    let opts = TsneOptions {
        perplexity,
        iterations,
        seed,
        ..Default::default()
    };
    let p = interpret::tsne(&vectors, &opts).map_err(to_py)?;
    Ok((p.points.iter().map(|q| (q[0], q[1])).collect(), p.kl))
}

/// Mean silhouette coefficient.
#[pyfunction]
fn silhouette(points: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    interpret::silhouette(&points, &labels).map_err(to_py)
}

#[pymodule]
#[pyo3(name = "stylenet")]
fn stylenet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(read_ppm, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_labels, m)?)?;
    m.add_function(wrap_pyfunction!(receptive_field, m)?)?;
    m.add_function(wrap_pyfunction!(is_disjoint, m)?)?;
    m.add_function(wrap_pyfunction!(gram, m)?)?;
    m.add_function(wrap_pyfunction!(tsne, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    m.add("CLASS_NAMES", stylenet::data::CLASS_NAMES.to_vec())?;
    Ok(())
}
